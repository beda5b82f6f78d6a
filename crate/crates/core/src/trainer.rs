//! Incremental training: first-task bootstrap, expansion, compression,
//! memory update and evaluation.
//!
//! Every random draw comes from a ChaCha8 stream derived from the run seed
//! and a tag path (phase, step, epoch, batch), so a run is reproducible bit
//! for bit and one phase's draws never shift another's.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{aux_targets, bit_identical, compress_init, expand, weight_align, BackboneConfig, CompactNetwork, DynamicNetwork};
use crate::checkpoint::save_compact;
use crate::config::{Config, DatasetKind, TrainConfig};
use crate::data::{load_cifar100, load_idx, synth_gaussians_with, LabeledDataset, Split, SynthDifficulty};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{distillation_loss, one_hot};
use crate::memory::ExemplarMemory;
use crate::metrics::{percent2, topk_accuracy};
use crate::mixaug::{mix_batch, AugMode};
use crate::nn::Mode;
use crate::optim::{cosine_lr, OptimizerState};
use crate::protocol::{build_incremental_dataset, make_task_sequence, random_crop_flip, IncrementalDataset, Normalization, TaskSequence};
use crate::tensor::Tensor;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent random stream for `seed` and a tag path.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let h = tags.iter().fold(mix64(seed), |h, &t| mix64(h ^ mix64(t)));
    ChaCha8Rng::seed_from_u64(h)
}

const TAG_INIT: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    First,
    Expand,
    Compress,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::First => "first",
            Phase::Expand => "expand",
            Phase::Compress => "compress",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Accuracy in percent, two decimals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    /// 1-based.
    pub step: usize,
    pub classes_seen: usize,
    pub test_samples: usize,
    pub epochs: Vec<EpochRecord>,
    /// The expanded model; at step 1 there is no expansion and this repeats
    /// the compact model.
    pub big: Accuracy,
    pub compact: Accuracy,
    /// Previous compact model on this step's test set.
    pub previous_top1: Option<f64>,
    pub compact_params: usize,
    pub compact_extractor_params: usize,
    pub big_params: Option<usize>,
    pub big_extractor_params: Option<usize>,
    pub gamma_expand: Option<f64>,
    pub gamma_compress: Option<f64>,
    pub memory_counts: Vec<usize>,
    /// Training samples per seen class in this step (new data plus memory).
    pub train_histogram: Vec<usize>,
}

/// Everything a phase needs besides the networks.
pub struct PhaseContext<'a> {
    pub seed: u64,
    pub step: usize,
    pub train: &'a TrainConfig,
    pub norm: &'a Normalization,
    /// Class id to label position (its index in the class order).
    pub positions: &'a HashMap<u32, usize>,
}

struct BatchInput {
    /// Cropped raw images `[B×C×H×W]`, not yet normalized.
    images: Tensor,
    labels: Vec<usize>,
    rng: ChaCha8Rng,
}

fn positions_of(ctx: &PhaseContext<'_>, labels: &[u32]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|c| {
            ctx.positions
                .get(c)
                .copied()
                .ok_or_else(|| Error::invalid("trainer", format!("class {c} missing from the class order")))
        })
        .collect()
}

/// Shared epoch loop: shuffles, batches, crops, times, and applies the
/// cosine schedule. `step_fn` returns the batch loss after updating.
fn run_epochs(
    phase: Phase,
    epochs: usize,
    data: &IncrementalDataset,
    ctx: &PhaseContext<'_>,
    mut step_fn: impl FnMut(BatchInput, f64) -> Result<f64>,
) -> Result<Vec<EpochRecord>> {
    let labels = positions_of(ctx, &data.labels)?;
    let shape = data.image_shape();
    let per = shape.iter().product::<usize>();
    let b = ctx.train.batch_size;
    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, epochs, ctx.train.base_lr)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut substream(ctx.seed, &[phase.tag(), ctx.step as u64, epoch as u64]));
        let (mut total, mut seen) = (0.0, 0usize);
        // a trailing batch of one sample has no batch statistics; skip it
        for (bi, idx) in order.chunks(b).filter(|c| c.len() >= 2).enumerate() {
            let mut rng = substream(ctx.seed, &[phase.tag(), ctx.step as u64, epoch as u64, bi as u64 + 1]);
            let mut pixels = Vec::with_capacity(idx.len() * per);
            for &i in idx {
                if ctx.train.crop_pad > 0 || ctx.train.flip {
                    pixels.extend(random_crop_flip(data.image(i), shape, ctx.train.crop_pad, ctx.train.flip, &mut rng));
                } else {
                    pixels.extend_from_slice(data.image(i));
                }
            }
            let input = BatchInput {
                images: Tensor::new(vec![idx.len(), shape[0], shape[1], shape[2]], pixels)?,
                labels: idx.iter().map(|&i| labels[i]).collect(),
                rng,
            };
            let loss = step_fn(input, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence {
                    phase: phase.as_str(),
                    epoch: epoch + 1,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    phase: phase.as_str(),
                    epoch: epoch + 1,
                    loss,
                });
            }
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        if seen == 0 {
            return Err(Error::invalid("trainer", "no batch with at least two samples"));
        }
        records.push(EpochRecord {
            phase,
            epoch: epoch + 1,
            loss: total / seen as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(records)
}

/// Plain cross-entropy training of the first compact model.
pub fn train_first_task(net: &mut CompactNetwork, data: &IncrementalDataset, ctx: &PhaseContext<'_>) -> Result<Vec<EpochRecord>> {
    let classes = net.head.num_classes();
    let mut opt = OptimizerState::new(ctx.train.sgd(), &net.params_mut());
    run_epochs(Phase::First, ctx.train.epochs_expand, data, ctx, |mut batch, lr| {
        ctx.norm.apply(&mut batch.images);
        let mut g = Graph::new();
        let x = g.constant(batch.images)?;
        let out = net.forward(&mut g, x, Mode::Train)?;
        let loss = g.softmax_cross_entropy(out.logits, one_hot(&batch.labels, classes)?)?;
        let value = g.value(loss).item() as f64;
        g.backward(loss)?;
        net.collect_grads(&mut g);
        opt.step(&mut net.params_mut(), lr)?;
        Ok(value)
    })
}

/// `CE(H_big) + CE(H_aux)` with the previous extractor frozen, then weight
/// alignment of `H_big`. Returns the epoch records and the alignment factor.
pub fn train_expansion(net: &mut DynamicNetwork, data: &IncrementalDataset, ctx: &PhaseContext<'_>) -> Result<(Vec<EpochRecord>, f64)> {
    let total = net.head_big.num_classes();
    let old = net.old_classes;
    let aux_classes = net.head_aux.num_classes();
    let mut prev_snapshot = Vec::new();
    net.prev.state("prev", &mut prev_snapshot);
    let mut opt = OptimizerState::new(ctx.train.sgd(), &net.trainable_params_mut());
    let records = run_epochs(Phase::Expand, ctx.train.epochs_expand, data, ctx, |mut batch, lr| {
        ctx.norm.apply(&mut batch.images);
        let aux = aux_targets(&batch.labels, old, total)?;
        let mut g = Graph::new();
        let x = g.constant(batch.images)?;
        let out = net.forward_big(&mut g, x, Mode::Train)?;
        let l_big = g.softmax_cross_entropy(out.logits_big, one_hot(&batch.labels, total)?)?;
        let l_aux = g.softmax_cross_entropy(out.logits_aux, one_hot(&aux, aux_classes)?)?;
        let loss = g.add(l_big, l_aux)?;
        let value = g.value(loss).item() as f64;
        g.backward(loss)?;
        net.collect_grads(&mut g)?;
        opt.step(&mut net.trainable_params_mut(), lr)?;
        Ok(value)
    })?;
    let mut after = Vec::new();
    net.prev.state("prev", &mut after);
    if !bit_identical(&prev_snapshot, &after) {
        return Err(Error::FrozenGradient("previous extractor changed during expansion".into()));
    }
    let (old_ids, new_ids) = (net.old_class_ids().to_vec(), net.new_class_ids().to_vec());
    let gamma = weight_align(&mut net.head_big, &old_ids, &new_ids)?;
    Ok((records, gamma))
}

fn teacher_logits(big: &mut DynamicNetwork, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(images.clone())?;
    let out = big.forward_big(&mut g, x, Mode::Eval)?;
    Ok(g.value(out.logits_big).clone())
}

/// Distill the expanded network into `student` on mixed batches, then weight
/// alignment of the student head.
pub fn train_compression(
    big: &mut DynamicNetwork,
    student: &mut CompactNetwork,
    data: &IncrementalDataset,
    memory: &ExemplarMemory,
    ctx: &PhaseContext<'_>,
) -> Result<(Vec<EpochRecord>, f64)> {
    let classes = student.head.num_classes();
    if classes != big.head_big.num_classes() {
        return Err(Error::shape(
            "train_compression",
            format!("student has {classes} classes, teacher {}", big.head_big.num_classes()),
        ));
    }
    let teacher_before = big.state();
    let (tau, alpha, ce_weight, mode) = (
        ctx.train.tau,
        ctx.train.alpha,
        ctx.train.ce_weight_in_compression,
        ctx.train.compress_aug,
    );
    let mut opt = OptimizerState::new(ctx.train.sgd(), &student.params_mut());
    let records = run_epochs(Phase::Compress, ctx.train.epochs_compress, data, ctx, |mut batch, lr| {
        let mixed = mix_batch(
            mode,
            &batch.images,
            &batch.labels,
            classes,
            Some((memory, ctx.positions)),
            alpha,
            &mut batch.rng,
        )?;
        let mut images = mixed.images;
        ctx.norm.apply(&mut images);
        let teacher = teacher_logits(big, &images)?;
        let mut g = Graph::new();
        let x = g.constant(images)?;
        let out = student.forward(&mut g, x, Mode::Train)?;
        let mut loss = distillation_loss(&mut g, out.logits, &teacher, tau)?;
        if ce_weight > 0.0 {
            let ce = g.softmax_cross_entropy(out.logits, mixed.targets)?;
            let ce = g.scale(ce, ce_weight as f32)?;
            loss = g.add(loss, ce)?;
        }
        let value = g.value(loss).item() as f64;
        g.backward(loss)?;
        student.collect_grads(&mut g);
        opt.step(&mut student.params_mut(), lr)?;
        Ok(value)
    })?;
    if !bit_identical(&teacher_before, &big.state()) {
        return Err(Error::TeacherMutated);
    }
    let old_ids = big.old_class_ids().to_vec();
    let new_ids = big.new_class_ids().to_vec();
    let gamma = weight_align(&mut student.head, &old_ids, &new_ids)?;
    Ok((records, gamma))
}

/// Run `forward` over `images` in eval-sized chunks after normalization and
/// stack the outputs row-wise.
pub fn predict(
    images: &Tensor,
    norm: &Normalization,
    batch: usize,
    mut forward: impl FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<Tensor> {
    let n = images.dim(0);
    let inner: Vec<usize> = images.shape()[1..].to_vec();
    let per: usize = inner.iter().product();
    let mut rows: Vec<f32> = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(batch.max(1)) {
        let end = (start + batch).min(n);
        let mut shape = vec![end - start];
        shape.extend(&inner);
        let mut x = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        norm.apply(&mut x);
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let out = forward(&mut g, xv)?;
        width = g.value(out).dim(1);
        rows.extend_from_slice(g.value(out).data());
    }
    Tensor::new(vec![n, width], rows)
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<Accuracy> {
    let k5 = 5.min(logits.dim(1));
    Ok(Accuracy {
        top1: percent2(topk_accuracy(logits, labels, 1)?),
        top5: percent2(topk_accuracy(logits, labels, k5)?),
    })
}

pub fn compact_logits(net: &mut CompactNetwork, images: &Tensor, norm: &Normalization, batch: usize) -> Result<Tensor> {
    predict(images, norm, batch, |g, x| Ok(net.forward(g, x, Mode::Eval)?.logits))
}

pub fn big_logits(net: &mut DynamicNetwork, images: &Tensor, norm: &Normalization, batch: usize) -> Result<Tensor> {
    predict(images, norm, batch, |g, x| Ok(net.forward_big(g, x, Mode::Eval)?.logits_big))
}

pub fn compact_features(net: &mut CompactNetwork, images: &Tensor, norm: &Normalization, batch: usize) -> Result<Tensor> {
    predict(images, norm, batch, |g, x| Ok(net.forward(g, x, Mode::Eval)?.features))
}

/// Load the train and test splits named by the config.
pub fn load_datasets(cfg: &Config) -> Result<(LabeledDataset, LabeledDataset)> {
    let d = &cfg.dataset;
    let dir = || d.path.clone().ok_or_else(|| Error::Config("dataset.path is required".into()));
    match d.kind {
        DatasetKind::Synth => {
            let hard = SynthDifficulty {
                noise: d.noise,
                jitter: d.jitter,
            };
            Ok((
                synth_gaussians_with(d.num_classes, d.train_per_class, d.image_side, d.seed, Split::Train, hard)?,
                synth_gaussians_with(d.num_classes, d.test_per_class, d.image_side, d.seed, Split::Test, hard)?,
            ))
        }
        DatasetKind::Idx => {
            let p = dir()?;
            Ok((
                load_idx(
                    &p.join("train-images-idx3-ubyte"),
                    &p.join("train-labels-idx1-ubyte"),
                    d.num_classes,
                    Split::Train,
                )?,
                load_idx(
                    &p.join("t10k-images-idx3-ubyte"),
                    &p.join("t10k-labels-idx1-ubyte"),
                    d.num_classes,
                    Split::Test,
                )?,
            ))
        }
        DatasetKind::Cifar100 => {
            let p = dir()?;
            Ok((
                load_cifar100(&p.join("train.bin"), d.fine_labels, Split::Train)?,
                load_cifar100(&p.join("test.bin"), d.fine_labels, Split::Test)?,
            ))
        }
    }
}

/// Model and memory carried from one step to the next.
#[derive(Clone, Debug)]
pub struct StepState {
    /// Steps completed so far.
    pub steps_done: usize,
    pub model: CompactNetwork,
    pub memory: ExemplarMemory,
}

/// A configured run: datasets, task sequence and normalization.
#[derive(Clone, Debug)]
pub struct Session {
    pub config: Config,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub sequence: TaskSequence,
    pub backbone: BackboneConfig,
    pub norm: Normalization,
    pub positions: HashMap<u32, usize>,
}

impl Session {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_datasets(&config)?;
        Self::with_data(config, train, test)
    }

    pub fn with_data(config: Config, train: LabeledDataset, test: LabeledDataset) -> Result<Self> {
        config.validate()?;
        let [c, h, w] = train.image_shape();
        if h != w {
            return Err(Error::Config(format!("images must be square, got {h}×{w}")));
        }
        if test.image_shape() != train.image_shape() {
            return Err(Error::Config("train and test image shapes differ".into()));
        }
        let sequence = make_task_sequence(train.num_classes, config.protocol.kind, config.protocol.steps, config.run.seed)?;
        let backbone = config.backbone(c, h);
        backbone.validate()?;
        let first = train.filter_classes(&sequence.tasks[0])?;
        let norm = Normalization::fit(&first.images)?;
        let positions = sequence.class_order.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self {
            config,
            train,
            test,
            sequence,
            backbone,
            norm,
            positions,
        })
    }

    /// Same data and bootstrap, different compression augmentation.
    pub fn with_aug(&self, mode: AugMode) -> Self {
        let mut s = self.clone();
        s.config.train.compress_aug = mode;
        s
    }

    pub fn steps(&self) -> usize {
        self.sequence.tasks.len()
    }

    fn ctx(&self, step: usize) -> PhaseContext<'_> {
        PhaseContext {
            seed: self.config.run.seed,
            step,
            train: &self.config.train,
            norm: &self.norm,
            positions: &self.positions,
        }
    }

    /// Seen-class test images and their label positions after `step` (1-based).
    pub fn seen_test(&self, step: usize) -> Result<(Tensor, Vec<usize>)> {
        let seen = self.sequence.seen_through(step - 1);
        let ds = self.test.filter_classes(&seen)?;
        let labels = ds.labels.iter().map(|c| self.positions[c]).collect();
        Ok((ds.images, labels))
    }

    fn update_memory(&self, model: &mut CompactNetwork, memory: &mut ExemplarMemory, task: &LabeledDataset, new_ids: &[u32]) -> Result<()> {
        let feats = compact_features(model, &task.images, &self.norm, self.config.run.eval_batch_size)?;
        memory.update(task, new_ids, &feats)?;
        memory.check_invariants()
    }

    /// Train the first task's compact model and fill the memory.
    pub fn bootstrap(&self) -> Result<(StepState, StepReport)> {
        self.bootstrap_inner().map_err(|e| Error::Step {
            step: 1,
            source: Box::new(e),
        })
    }

    fn bootstrap_inner(&self) -> Result<(StepState, StepReport)> {
        let ids = &self.sequence.tasks[0];
        let seed = self.config.run.seed;
        let mut model = CompactNetwork::new(self.backbone, ids.clone(), &mut substream(seed, &[Phase::First.tag(), 1, TAG_INIT]))?;
        let task = self.train.filter_classes(ids)?;
        let budget = self.config.memory.resolve(self.sequence.memory_rule);
        let mut memory = ExemplarMemory::new(budget, task.image_shape());
        let data = build_incremental_dataset(&task, &memory)?;
        let epochs = train_first_task(&mut model, &data, &self.ctx(1))?;
        self.update_memory(&mut model, &mut memory, &task, ids)?;
        let (images, labels) = self.seen_test(1)?;
        let acc = accuracy(
            &compact_logits(&mut model, &images, &self.norm, self.config.run.eval_batch_size)?,
            &labels,
        )?;
        let report = StepReport {
            step: 1,
            classes_seen: ids.len(),
            test_samples: labels.len(),
            epochs,
            big: acc,
            compact: acc,
            previous_top1: None,
            compact_params: model.param_count(),
            compact_extractor_params: model.extractor.param_count(),
            big_params: None,
            big_extractor_params: None,
            gamma_expand: None,
            gamma_compress: None,
            memory_counts: memory.counts(),
            train_histogram: data.histogram(ids),
        };
        Ok((
            StepState {
                steps_done: 1,
                model,
                memory,
            },
            report,
        ))
    }

    /// One incremental step: expand, train, align, compress, align, update
    /// memory, evaluate. Also returns the trained expanded network.
    pub fn advance(&self, state: &StepState) -> Result<(StepState, StepReport, DynamicNetwork)> {
        let step = state.steps_done + 1;
        self.advance_inner(state, step)
            .map_err(|e| Error::Step { step, source: Box::new(e) })
    }

    fn advance_inner(&self, state: &StepState, step: usize) -> Result<(StepState, StepReport, DynamicNetwork)> {
        if step > self.steps() {
            return Err(Error::invalid("Session::advance", format!("all {} steps are done", self.steps())));
        }
        let seed = self.config.run.seed;
        let eval_batch = self.config.run.eval_batch_size;
        let new_ids = &self.sequence.tasks[step - 1];
        let task = self.train.filter_classes(new_ids)?;
        let data = build_incremental_dataset(&task, &state.memory)?;
        let (images, labels) = self.seen_test(step)?;

        let mut prev = state.model.clone();
        let prev_logits = compact_logits(&mut prev, &images, &self.norm, eval_batch)?;
        // the previous model cannot score new classes; pad them out of reach
        let seen = self.sequence.seen_through(step - 1).len();
        let padded = Tensor::from_fn(&[labels.len(), seen], |k| {
            let (i, c) = (k / seen, k % seen);
            if c < prev_logits.dim(1) {
                prev_logits.row(i)[c]
            } else {
                f32::NEG_INFINITY
            }
        });
        let previous_top1 = percent2(topk_accuracy(&padded, &labels, 1)?);

        let mut big = expand(&prev, new_ids, &mut substream(seed, &[Phase::Expand.tag(), step as u64, TAG_INIT]))?;
        let ctx = self.ctx(step);
        let (mut epochs, gamma_expand) = train_expansion(&mut big, &data, &ctx)?;
        let mut student = compress_init(
            &prev,
            new_ids,
            &mut substream(seed, &[Phase::Compress.tag(), step as u64, TAG_INIT]),
        )?;
        let (compress_epochs, gamma_compress) = train_compression(&mut big, &mut student, &data, &state.memory, &ctx)?;
        epochs.extend(compress_epochs);

        let mut memory = state.memory.clone();
        self.update_memory(&mut student, &mut memory, &task, new_ids)?;

        let big_acc = accuracy(&big_logits(&mut big, &images, &self.norm, eval_batch)?, &labels)?;
        let compact_acc = accuracy(&compact_logits(&mut student, &images, &self.norm, eval_batch)?, &labels)?;
        let seen_ids = self.sequence.seen_through(step - 1);
        let report = StepReport {
            step,
            classes_seen: seen,
            test_samples: labels.len(),
            epochs,
            big: big_acc,
            compact: compact_acc,
            previous_top1: Some(previous_top1),
            compact_params: student.param_count(),
            compact_extractor_params: student.extractor.param_count(),
            big_params: Some(big.head_big.param_count() + big.extractor_param_count()),
            big_extractor_params: Some(big.extractor_param_count()),
            gamma_expand: Some(gamma_expand),
            gamma_compress: Some(gamma_compress),
            memory_counts: memory.counts(),
            train_histogram: data.histogram(&seen_ids),
        };
        Ok((
            StepState {
                steps_done: step,
                model: student,
                memory,
            },
            report,
            big,
        ))
    }

    /// Continue from `state` to the last step.
    pub fn finish(&self, mut state: StepState, out: Option<&Path>) -> Result<(StepState, Vec<StepReport>)> {
        let mut reports = Vec::new();
        while state.steps_done < self.steps() {
            let (next, report, _) = self.advance(&state)?;
            self.save_step(&next, out)?;
            reports.push(report);
            state = next;
        }
        Ok((state, reports))
    }

    /// Whole run from scratch; writes checkpoints under `out` when enabled.
    pub fn run(&self, out: Option<&Path>) -> Result<(StepState, Vec<StepReport>)> {
        let (state, first) = self.bootstrap()?;
        self.save_step(&state, out)?;
        let (state, mut rest) = self.finish(state, out)?;
        rest.insert(0, first);
        Ok((state, rest))
    }

    fn save_step(&self, state: &StepState, out: Option<&Path>) -> Result<()> {
        let Some(dir) = out.filter(|_| self.config.run.save_checkpoints) else {
            return Ok(());
        };
        let t = state.steps_done;
        save_compact(&state.model, &self.norm, &dir.join(format!("ckpt_step{t}")))?;
        state.memory.save_snapshot(dir, &format!("memory_step{t}"), self.backbone)
    }
}

/// Median epoch time with the first (warm-up) epoch excluded.
pub fn median_epoch_seconds(records: &[EpochRecord], phase: Phase) -> Result<f64> {
    let mut times: Vec<f64> = records.iter().filter(|r| r.phase == phase).map(|r| r.seconds).collect();
    if times.len() < 3 {
        return Err(Error::invalid(
            "measure_epoch_time",
            format!("{} {} epochs measured, need at least 3", times.len(), phase.as_str()),
        ));
    }
    times.remove(0);
    times.sort_by(f64::total_cmp);
    let m = times.len();
    Ok(if m % 2 == 1 {
        times[m / 2]
    } else {
        0.5 * (times[m / 2 - 1] + times[m / 2])
    })
}

/// Median compression epoch time of `run` divided by that of `baseline`.
pub fn measure_epoch_time(run: &[EpochRecord], baseline: &[EpochRecord]) -> Result<f64> {
    Ok(median_epoch_seconds(run, Phase::Compress)? / median_epoch_seconds(baseline, Phase::Compress)?)
}
