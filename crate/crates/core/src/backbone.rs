//! Residual feature extractors, linear heads, and the two network shapes an
//! incremental step moves between: the expanded two-extractor network and the
//! compact single-extractor network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{take_state, uniform_rows, ConvBn, Mode, Param, StateDict};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub image_side: usize,
    /// Channels of the first stage; each later stage doubles it.
    pub width: usize,
    pub blocks_per_stage: usize,
    pub stages: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_side: 16,
            width: 8,
            blocks_per_stage: 2,
            stages: 3,
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        self.width << (self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.image_side == 0 || self.width == 0 || self.blocks_per_stage == 0 || self.stages == 0 {
            return Err(Error::Config(format!("backbone dimensions must be positive: {self:?}")));
        }
        if self.image_side >> (self.stages - 1) == 0 {
            return Err(Error::Config(format!(
                "image side {} too small for {} downsampling stages",
                self.image_side, self.stages
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    /// 1×1 projection when the block changes resolution or width.
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| ConvBn::new(in_ch, out_ch, 1, stride, 0, rng));
        Self {
            conv1: ConvBn::new(in_ch, out_ch, 3, stride, 1, rng),
            conv2: ConvBn::new(out_ch, out_ch, 3, 1, 1, rng),
            shortcut,
        }
    }

    fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(g, x, mode)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h, mode)?;
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(g, x, mode)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        g.relu(y)
    }

    fn layers(&self) -> impl Iterator<Item = (&'static str, &ConvBn)> {
        [("conv1", &self.conv1), ("conv2", &self.conv2)]
            .into_iter()
            .chain(self.shortcut.as_ref().map(|s| ("shortcut", s)))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut ConvBn)> {
        [("conv1", &mut self.conv1), ("conv2", &mut self.conv2)]
            .into_iter()
            .chain(self.shortcut.as_mut().map(|s| ("shortcut", s)))
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub config: BackboneConfig,
    pub stem: ConvBn,
    pub blocks: Vec<BasicBlock>,
    frozen: bool,
}

impl FeatureExtractor {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new(config.in_channels, config.width, 3, 1, 1, rng);
        let mut blocks = Vec::new();
        let mut in_ch = config.width;
        for stage in 0..config.stages {
            let out_ch = config.width << stage;
            for b in 0..config.blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(in_ch, out_ch, stride, rng));
                in_ch = out_ch;
            }
        }
        Ok(Self {
            config,
            stem,
            blocks,
            frozen: false,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn conv_layers(&self) -> Vec<(String, &ConvBn)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.layers().map(|(n, l)| (format!("block{i}.{n}"), l)));
        }
        out
    }

    fn conv_layers_mut(&mut self) -> Vec<(String, &mut ConvBn)> {
        let mut out = vec![("stem".to_string(), &mut self.stem)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.layers_mut().map(|(n, l)| (format!("block{i}.{n}"), l)));
        }
        out
    }

    /// Freeze parameters and batch-norm statistics.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for (_, l) in self.conv_layers_mut() {
            l.bn.frozen_stats = true;
            for p in l.params_mut() {
                p.trainable = false;
                p.grad = None;
            }
        }
    }

    /// A trainable deep copy with live batch-norm statistics.
    pub fn live_copy(&self) -> Self {
        let mut copy = self.clone();
        copy.frozen = false;
        for (_, l) in copy.conv_layers_mut() {
            l.bn.frozen_stats = false;
            for p in l.params_mut() {
                p.trainable = true;
                p.grad = None;
            }
        }
        copy
    }

    /// `[B,C,H,W]` images to `[B×d]` pooled features.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_side || s[3] != c.image_side {
            return Err(Error::shape(
                "FeatureExtractor::forward",
                format!("input {s:?}, expected [B,{},{},{}]", c.in_channels, c.image_side, c.image_side),
            ));
        }
        let h = self.stem.forward(g, x, mode)?;
        let mut h = g.relu(h)?;
        for b in &mut self.blocks {
            h = b.forward(g, h, mode)?;
        }
        g.global_avg_pool(h)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.conv_layers_mut().into_iter().flat_map(|(_, l)| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers().iter().flat_map(|(_, l)| l.params()).map(Param::len).sum()
    }

    pub fn collect_grads(&mut self, g: &mut Graph) {
        for p in self.params_mut() {
            p.collect(g);
        }
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, l) in self.conv_layers() {
            l.state(&format!("{prefix}.{name}"), out);
        }
    }

    pub fn load(&mut self, prefix: &str, state: &StateDict) -> Result<()> {
        for (name, l) in self.conv_layers_mut() {
            l.load(&format!("{prefix}.{name}"), state)?;
        }
        Ok(())
    }
}

/// Linear head whose rows are tied to external class labels.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub weight: Param,
    pub bias: Param,
    pub class_ids: Vec<u32>,
}

impl Classifier {
    pub fn new(in_dim: usize, class_ids: Vec<u32>, rng: &mut impl Rng) -> Result<Self> {
        check_unique(&class_ids)?;
        let (w, b) = uniform_rows(class_ids.len(), in_dim, rng);
        Ok(Self {
            weight: Param::new(w),
            bias: Param::new(b),
            class_ids,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn forward(&mut self, g: &mut Graph, features: Var) -> Result<Var> {
        let w = self.weight.bind(g)?;
        let b = self.bias.bind(g)?;
        g.dense(features, w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn collect_grads(&mut self, g: &mut Graph) {
        self.weight.collect(g);
        self.bias.collect(g);
    }

    /// Copy of this head widened to `in_dim` inputs (zero-filled extra
    /// columns) with freshly initialized rows appended for `new_ids`.
    pub fn grown(&self, in_dim: usize, new_ids: &[u32], rng: &mut impl Rng) -> Result<Self> {
        let old_in = self.in_dim();
        if in_dim < old_in {
            return Err(Error::invalid(
                "Classifier::grown",
                format!("cannot shrink inputs {old_in} -> {in_dim}"),
            ));
        }
        let mut ids = self.class_ids.clone();
        ids.extend_from_slice(new_ids);
        check_unique(&ids)?;
        let (fresh_w, fresh_b) = uniform_rows(new_ids.len(), in_dim, rng);
        let rows = ids.len();
        let mut w = Vec::with_capacity(rows * in_dim);
        for r in 0..self.num_classes() {
            w.extend_from_slice(self.weight.value.row(r));
            w.extend(std::iter::repeat_n(0.0, in_dim - old_in));
        }
        w.extend_from_slice(fresh_w.data());
        let mut b = self.bias.value.data().to_vec();
        b.extend_from_slice(fresh_b.data());
        Ok(Self {
            weight: Param::new(Tensor::new(vec![rows, in_dim], w)?),
            bias: Param::new(Tensor::new(vec![rows], b)?),
            class_ids: ids,
        })
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.value.clone()));
        out.push((format!("{prefix}.bias"), self.bias.value.clone()));
    }

    pub fn load(&mut self, prefix: &str, state: &StateDict) -> Result<()> {
        let (rows, cols) = (self.num_classes(), self.in_dim());
        self.weight.value = take_state(state, &format!("{prefix}.weight"), &[rows, cols])?;
        self.bias.value = take_state(state, &format!("{prefix}.bias"), &[rows])?;
        Ok(())
    }
}

fn check_unique(ids: &[u32]) -> Result<()> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid("Classifier", format!("duplicate class id {}", w[0])));
    }
    Ok(())
}

/// Single extractor plus head; the size-stable model carried between steps.
#[derive(Clone, Debug)]
pub struct CompactNetwork {
    pub extractor: FeatureExtractor,
    pub head: Classifier,
}

pub struct CompactOutput {
    pub logits: Var,
    pub features: Var,
}

impl CompactNetwork {
    pub fn new(config: BackboneConfig, class_ids: Vec<u32>, rng: &mut impl Rng) -> Result<Self> {
        let extractor = FeatureExtractor::new(config, rng)?;
        let head = Classifier::new(extractor.out_dim(), class_ids, rng)?;
        Ok(Self { extractor, head })
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<CompactOutput> {
        let features = self.extractor.forward(g, x, mode)?;
        let logits = self.head.forward(g, features)?;
        Ok(CompactOutput { logits, features })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.extractor.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn collect_grads(&mut self, g: &mut Graph) {
        self.extractor.collect_grads(g);
        self.head.collect_grads(g);
    }

    pub fn param_count(&self) -> usize {
        self.extractor.param_count() + self.head.param_count()
    }

    /// Parameters and running statistics, in a stable order.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.extractor.state("extractor", &mut out);
        self.head.state("head", &mut out);
        out
    }

    pub fn load(&mut self, state: &StateDict) -> Result<()> {
        self.extractor.load("extractor", state)?;
        self.head.load("head", state)
    }
}

/// Frozen previous extractor and a trainable copy side by side, a head over
/// their concatenated features, and an auxiliary head on the new features.
#[derive(Clone, Debug)]
pub struct DynamicNetwork {
    pub prev: FeatureExtractor,
    pub new: FeatureExtractor,
    pub head_big: Classifier,
    /// Output 0 is the merged "past classes" category.
    pub head_aux: Classifier,
    pub old_classes: usize,
}

pub struct BigOutput {
    pub logits_big: Var,
    pub logits_aux: Var,
    pub features: Var,
}

/// Build the expanded network for a step that adds `new_ids`.
pub fn expand(prev: &CompactNetwork, new_ids: &[u32], rng: &mut impl Rng) -> Result<DynamicNetwork> {
    if new_ids.is_empty() {
        return Err(Error::invalid("expand", "at least one new class is required"));
    }
    let mut frozen = prev.extractor.clone();
    frozen.freeze();
    let new = prev.extractor.live_copy();
    let d_old = frozen.out_dim();
    let d_new = new.out_dim();
    let head_big = prev.head.grown(d_old + d_new, new_ids, rng)?;
    // auxiliary ids are positions, not external labels
    let head_aux = Classifier::new(d_new, (0..=new_ids.len() as u32).collect(), rng)?;
    Ok(DynamicNetwork {
        prev: frozen,
        new,
        head_big,
        head_aux,
        old_classes: prev.head.num_classes(),
    })
}

impl DynamicNetwork {
    pub fn forward_big(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<BigOutput> {
        let old = self.prev.forward(g, x, mode)?;
        let fresh = self.new.forward(g, x, mode)?;
        let features = g.concat(&[old, fresh], 1)?;
        let logits_big = self.head_big.forward(g, features)?;
        let logits_aux = self.head_aux.forward(g, fresh)?;
        Ok(BigOutput {
            logits_big,
            logits_aux,
            features,
        })
    }

    /// Parameters the expansion phase updates; the frozen extractor is excluded.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.new.params_mut();
        p.extend(self.head_big.params_mut());
        p.extend(self.head_aux.params_mut());
        p
    }

    pub fn collect_grads(&mut self, g: &mut Graph) -> Result<()> {
        for p in self.prev.params_mut() {
            p.collect(g);
            if p.grad.is_some() {
                return Err(Error::FrozenGradient("previous extractor".into()));
            }
        }
        self.new.collect_grads(g);
        self.head_big.collect_grads(g);
        self.head_aux.collect_grads(g);
        Ok(())
    }

    pub fn new_class_ids(&self) -> &[u32] {
        &self.head_big.class_ids[self.old_classes..]
    }

    pub fn old_class_ids(&self) -> &[u32] {
        &self.head_big.class_ids[..self.old_classes]
    }

    pub fn extractor_param_count(&self) -> usize {
        self.prev.param_count() + self.new.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.extractor_param_count() + self.head_big.param_count() + self.head_aux.param_count()
    }

    /// Parameters and statistics of everything except the auxiliary head.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.prev.state("prev", &mut out);
        self.new.state("new", &mut out);
        self.head_big.state("head_big", &mut out);
        out
    }
}

/// Map labels (as positions in class order) onto the auxiliary head:
/// every old class to 0, the k-th new class to k.
pub fn aux_targets(labels: &[usize], old_classes: usize, total_classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            if y >= total_classes {
                Err(Error::invalid("aux_targets", format!("unknown class {y} (have {total_classes})")))
            } else if y < old_classes {
                Ok(0)
            } else {
                Ok(y - old_classes + 1)
            }
        })
        .collect()
}

/// Rescale new-class rows by `mean‖w_old‖ / mean‖w_new‖`, where the norms
/// cover weights only. The new rows' biases get the same factor so every
/// new-class logit scales uniformly. Returns the factor applied.
pub fn weight_align(head: &mut Classifier, old_ids: &[u32], new_ids: &[u32]) -> Result<f64> {
    if old_ids.is_empty() || new_ids.is_empty() {
        return Err(Error::invalid("weight_align", "both class groups must be non-empty"));
    }
    let row_of = |id: u32| {
        head.class_ids
            .iter()
            .position(|&c| c == id)
            .ok_or_else(|| Error::invalid("weight_align", format!("class {id} not in head")))
    };
    let old_rows = old_ids.iter().map(|&c| row_of(c)).collect::<Result<Vec<_>>>()?;
    let new_rows = new_ids.iter().map(|&c| row_of(c)).collect::<Result<Vec<_>>>()?;
    let mut seen = old_rows.clone();
    seen.extend(&new_rows);
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != head.num_classes() {
        return Err(Error::invalid("weight_align", "old and new ids must partition the head's classes"));
    }
    let w = &mut head.weight.value;
    let mean_norm = |w: &Tensor, rows: &[usize]| {
        rows.iter()
            .map(|&r| w.row(r).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .sum::<f64>()
            / rows.len() as f64
    };
    let old_norm = mean_norm(w, &old_rows);
    let new_norm = mean_norm(w, &new_rows);
    if new_norm == 0.0 {
        return Err(Error::invalid("weight_align", "new-class rows have zero norm"));
    }
    let gamma = old_norm / new_norm;
    for &r in &new_rows {
        for v in w.row_mut(r) {
            *v = (*v as f64 * gamma) as f32;
        }
    }
    let b = head.bias.value.data_mut();
    for &r in &new_rows {
        b[r] = (b[r] as f64 * gamma) as f32;
    }
    Ok(gamma)
}

/// Compact model for step t: extractor copied from the previous step, old
/// head rows copied, rows for `new_ids` freshly initialized.
pub fn compress_init(prev: &CompactNetwork, new_ids: &[u32], rng: &mut impl Rng) -> Result<CompactNetwork> {
    let extractor = prev.extractor.live_copy();
    let head = prev.head.grown(extractor.out_dim(), new_ids, rng)?;
    Ok(CompactNetwork { extractor, head })
}

/// True when two state lists hold the same names and bit-identical values.
pub fn bit_identical(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, ta), (nb, tb))| {
            na == nb && ta.shape() == tb.shape() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            image_side: 8,
            width: 4,
            blocks_per_stage: 1,
            stages: 3,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, cfg: &BackboneConfig) -> Tensor {
        Tensor::from_fn(&[n, cfg.in_channels, cfg.image_side, cfg.image_side], |_| {
            rng.random_range(-1.0..1.0)
        })
    }

    fn compact_logits(net: &mut CompactNetwork, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let out = net.forward(&mut g, xv, Mode::Eval).unwrap();
        g.value(out.logits).clone()
    }

    #[test]
    fn dense_layer_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Classifier::new(10, (0..5).collect(), &mut rng).unwrap();
        assert_eq!(head.param_count(), 55);
    }

    #[test]
    fn expansion_doubles_extractor_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_config();
        let prev = CompactNetwork::new(cfg, vec![0, 1], &mut rng).unwrap();
        let big = expand(&prev, &[2, 3], &mut rng).unwrap();
        assert_eq!(big.extractor_param_count(), 2 * prev.extractor.param_count());
        assert_eq!(big.head_big.in_dim(), 2 * cfg.feature_dim());
        assert_eq!(big.head_aux.in_dim(), cfg.feature_dim());
        assert_eq!(big.head_aux.num_classes(), 3);
        assert!(big.prev.is_frozen());
        assert!(!big.new.is_frozen());
        assert!(expand(&prev, &[], &mut rng).is_err());
    }

    #[test]
    fn expanded_old_logits_match_previous_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_config();
        let mut prev = CompactNetwork::new(cfg, vec![7, 3, 5], &mut rng).unwrap();
        let mut big = expand(&prev, &[1, 9], &mut rng).unwrap();
        let x = batch(&mut rng, 4, &cfg);
        let want = compact_logits(&mut prev, &x);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let out = big.forward_big(&mut g, xv, Mode::Eval).unwrap();
        let got = g.value(out.logits_big);
        assert_eq!(got.shape(), &[4, 5]);
        assert_eq!(g.value(out.logits_aux).shape(), &[4, 3]);
        for i in 0..4 {
            for c in 0..3 {
                assert!((got.row(i)[c] - want.row(i)[c]).abs() < 1e-5);
            }
        }
        // first d_old features are the previous extractor's
        let feats = g.value(out.features);
        assert_eq!(feats.dim(1), 2 * cfg.feature_dim());
    }

    #[test]
    fn frozen_prev_forward_is_deterministic_and_stats_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_config();
        let prev = CompactNetwork::new(cfg, vec![0], &mut rng).unwrap();
        let mut big = expand(&prev, &[1], &mut rng).unwrap();
        let before = big.prev.clone();
        let x = batch(&mut rng, 3, &cfg);
        let mut feats = Vec::new();
        for _ in 0..2 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let out = big.forward_big(&mut g, xv, Mode::Train).unwrap();
            feats.push(g.value(out.features).clone());
        }
        let d = cfg.feature_dim();
        for i in 0..3 {
            assert_eq!(&feats[0].row(i)[..d], &feats[1].row(i)[..d]);
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        before.state("p", &mut a);
        big.prev.state("p", &mut b);
        assert!(bit_identical(&a, &b));
    }

    #[test]
    fn aux_target_mapping() {
        let t = aux_targets(&[3, 5, 6, 0], 5, 7).unwrap();
        assert_eq!(t, vec![0, 1, 2, 0]);
        assert!(aux_targets(&[7], 5, 7).is_err());
    }

    fn head_with_norms(old: f32, new: f32) -> Classifier {
        let w = Tensor::new(vec![4, 2], vec![old, 0.0, 0.0, old, new, 0.0, 0.0, -new]).unwrap();
        Classifier {
            weight: Param::new(w),
            bias: Param::new(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()),
            class_ids: vec![0, 1, 2, 3],
        }
    }

    #[test]
    fn weight_align_ratio() {
        let mut h = head_with_norms(1.0, 2.0);
        let gamma = weight_align(&mut h, &[0, 1], &[2, 3]).unwrap();
        assert!((gamma - 0.5).abs() < 1e-12);
        assert_eq!(h.weight.value.row(2), &[1.0, 0.0]);
        assert_eq!(h.bias.value.data(), &[0.1, 0.2, 0.15, 0.2]);

        let mut same = head_with_norms(1.5, 1.5);
        let before = same.weight.value.clone();
        weight_align(&mut same, &[0, 1], &[2, 3]).unwrap();
        assert_eq!(same.weight.value, before);
    }

    #[test]
    fn weight_align_errors() {
        let mut h = head_with_norms(1.0, 0.0);
        assert!(weight_align(&mut h, &[0, 1], &[2, 3]).is_err());
        let mut h = head_with_norms(1.0, 1.0);
        assert!(weight_align(&mut h, &[], &[0, 1, 2, 3]).is_err());
        assert!(weight_align(&mut h, &[0], &[2, 3]).is_err());
    }

    #[test]
    fn compress_init_copies_previous_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small_config();
        let mut prev = CompactNetwork::new(cfg, vec![0, 1], &mut rng).unwrap();
        let x = batch(&mut rng, 2, &cfg);
        let want = compact_logits(&mut prev, &x);

        let mut same = compress_init(&prev, &[], &mut rng).unwrap();
        assert_eq!(compact_logits(&mut same, &x), want);

        let mut grown = compress_init(&prev, &[2, 3], &mut rng).unwrap();
        assert_eq!(grown.param_count(), prev.param_count() + 2 * (cfg.feature_dim() + 1));
        let got = compact_logits(&mut grown, &x);
        for i in 0..2 {
            for c in 0..2 {
                assert!((got.row(i)[c] - want.row(i)[c]).abs() < 1e-6);
            }
        }
        assert!(compress_init(&prev, &[1], &mut rng).is_err());
    }

    #[test]
    fn forward_rejects_wrong_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ext = FeatureExtractor::new(small_config(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 9, 9])).unwrap();
        assert!(ext.forward(&mut g, x, Mode::Eval).is_err());
    }
}
