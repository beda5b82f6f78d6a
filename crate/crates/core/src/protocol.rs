//! Class orders, task splits and the per-step training set `D_new ∪ M_t`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::memory::{ExemplarMemory, MemoryBudget};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    B0,
    B50,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSequence {
    pub class_order: Vec<u32>,
    pub tasks: Vec<Vec<u32>>,
    pub memory_rule: MemoryBudget,
}

impl TaskSequence {
    /// Classes seen after task `t` (0-based), in class order.
    pub fn seen_through(&self, t: usize) -> Vec<u32> {
        self.tasks[..=t].concat()
    }
}

/// Shuffle `0..num_classes` with `seed` and carve it into tasks.
///
/// B0 splits every class equally over `steps` tasks. B50 starts with 50
/// classes and splits the other 50 equally over `steps` further tasks.
pub fn make_task_sequence(num_classes: usize, protocol: Protocol, steps: usize, seed: u64) -> Result<TaskSequence> {
    let op = "make_task_sequence";
    if steps == 0 {
        return Err(Error::invalid(op, "steps must be at least 1"));
    }
    let mut class_order: Vec<u32> = (0..num_classes as u32).collect();
    class_order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (sizes, memory_rule) = match protocol {
        Protocol::B0 => {
            if num_classes == 0 || !num_classes.is_multiple_of(steps) {
                return Err(Error::invalid(op, format!("{steps} steps do not divide {num_classes} classes")));
            }
            (vec![num_classes / steps; steps], MemoryBudget::Total(2000))
        }
        Protocol::B50 => {
            if num_classes != 100 {
                return Err(Error::invalid(op, format!("B50 needs 100 classes, got {num_classes}")));
            }
            if 50 % steps != 0 {
                return Err(Error::invalid(op, format!("{steps} steps do not divide the 50 remaining classes")));
            }
            let mut sizes = vec![50];
            sizes.extend(std::iter::repeat_n(50 / steps, steps));
            (sizes, MemoryBudget::PerClass(20))
        }
    };
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for s in sizes {
        tasks.push(class_order[at..at + s].to_vec());
        at += s;
    }
    Ok(TaskSequence {
        class_order,
        tasks,
        memory_rule,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    New,
    Memory,
}

/// Training set of one step: every new-task sample and every exemplar, once.
#[derive(Clone, Debug)]
pub struct IncrementalDataset {
    /// `[N×C×H×W]`.
    pub images: Tensor,
    /// External class ids.
    pub labels: Vec<u32>,
    pub provenance: Vec<Provenance>,
}

impl IncrementalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n: usize = self.image_shape().iter().product();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }

    /// Sample count per external class id.
    pub fn histogram(&self, classes: &[u32]) -> Vec<usize> {
        classes.iter().map(|c| self.labels.iter().filter(|&&y| y == *c).count()).collect()
    }
}

pub fn build_incremental_dataset(task: &LabeledDataset, memory: &ExemplarMemory) -> Result<IncrementalDataset> {
    let op = "build_incremental_dataset";
    let task_classes: HashSet<u32> = task.labels.iter().copied().collect();
    if let Some(c) = memory.class_ids().into_iter().find(|c| task_classes.contains(c)) {
        return Err(Error::invalid(op, format!("class {c} is in both the new task and memory")));
    }
    if !memory.is_empty() && memory.image_shape != task.image_shape() {
        return Err(Error::shape(
            op,
            format!("memory images {:?} vs task {:?}", memory.image_shape, task.image_shape()),
        ));
    }
    let n = task.len() + memory.len();
    let mut data = task.images.data().to_vec();
    let mut labels = task.labels.clone();
    let mut provenance = vec![Provenance::New; task.len()];
    for s in memory.iter() {
        data.extend_from_slice(s.image);
        labels.push(s.class_id);
        provenance.push(Provenance::Memory);
    }
    let [c, h, w] = task.image_shape();
    Ok(IncrementalDataset {
        images: Tensor::new(vec![n, c, h, w], data)?,
        labels,
        provenance,
    })
}

/// Per-channel input normalization fitted on the first task.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and population standard deviation per channel.
    pub fn fit(images: &Tensor) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) == 0 {
            return Err(Error::shape("Normalization::fit", format!("{:?}", images.shape())));
        }
        let (n, c, hw) = (images.dim(0), images.dim(1), images.dim(2) * images.dim(3));
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| {
                let base = (i * c + ch) * hw;
                images.data()[base..base + hw].iter().map(|&v| v as f64)
            });
            let (mut s, mut s2) = (0.0, 0.0);
            for v in vals {
                s += v;
                s2 += v * v;
            }
            let m = s / (n * hw) as f64;
            let var = (s2 / (n * hw) as f64 - m * m).max(0.0);
            mean[ch] = m as f32;
            std[ch] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    /// Normalize a `[B×C×H×W]` batch in place.
    pub fn apply(&self, images: &mut Tensor) {
        let (c, hw) = (images.dim(1), images.dim(2) * images.dim(3));
        for (k, chunk) in images.data_mut().chunks_exact_mut(hw).enumerate() {
            let ch = k % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

/// Random crop from a zero-padded image, plus an optional horizontal flip.
pub fn random_crop_flip(image: &[f32], shape: [usize; 3], pad: usize, flip: bool, rng: &mut impl Rng) -> Vec<f32> {
    let [c, h, w] = shape;
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mirror = flip && rng.random_bool(0.5);
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if mirror { w - 1 - x } else { x };
                let sx = xx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_gaussians, Split};
    use crate::memory::ClassStore;
    use proptest::prelude::*;

    #[test]
    fn b0_equal_groups() {
        let s = make_task_sequence(100, Protocol::B0, 10, 1).unwrap();
        assert_eq!(s.tasks.len(), 10);
        assert!(s.tasks.iter().all(|t| t.len() == 10));
        assert_eq!(s.memory_rule, MemoryBudget::Total(2000));
        assert!(make_task_sequence(100, Protocol::B0, 7, 1).is_err());
    }

    #[test]
    fn b50_base_then_equal_groups() {
        let s = make_task_sequence(100, Protocol::B50, 5, 1).unwrap();
        let sizes: Vec<usize> = s.tasks.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![50, 10, 10, 10, 10, 10]);
        assert_eq!(s.memory_rule, MemoryBudget::PerClass(20));
        assert!(make_task_sequence(10, Protocol::B50, 5, 1).is_err());
        assert!(make_task_sequence(100, Protocol::B50, 3, 1).is_err());
    }

    #[test]
    fn class_order_is_seeded() {
        let a = make_task_sequence(10, Protocol::B0, 5, 42).unwrap();
        assert_eq!(a, make_task_sequence(10, Protocol::B0, 5, 42).unwrap());
        assert_ne!(a.class_order, make_task_sequence(10, Protocol::B0, 5, 43).unwrap().class_order);
        assert_eq!(a.seen_through(1), [a.tasks[0].clone(), a.tasks[1].clone()].concat());
    }

    #[test]
    fn incremental_dataset_is_a_disjoint_union() {
        let ds = synth_gaussians(4, 5, 8, 0, Split::Train).unwrap();
        let task = ds.filter_classes(&[2, 3]).unwrap();
        let empty = ExemplarMemory::new(MemoryBudget::Total(4), ds.image_shape());
        let d1 = build_incremental_dataset(&task, &empty).unwrap();
        assert_eq!(d1.images, task.images);
        assert_eq!(d1.count(Provenance::Memory), 0);

        let mut mem = empty.clone();
        mem.classes.push(ClassStore {
            class_id: 0,
            source_ids: vec![0, 4],
            images: vec![ds.image(0).to_vec(), ds.image(4).to_vec()],
        });
        let d2 = build_incremental_dataset(&task, &mem).unwrap();
        assert_eq!(d2.len(), task.len() + 2);
        assert_eq!(d2.count(Provenance::New), task.len());
        assert_eq!(d2.count(Provenance::Memory), 2);
        assert_eq!(d2.histogram(&[0, 1, 2, 3]), vec![2, 0, 5, 5]);
        assert_eq!(d2.image(task.len()), ds.image(0));

        let clash = ds.filter_classes(&[0]).unwrap();
        assert!(build_incremental_dataset(&clash, &mem).is_err());
    }

    #[test]
    fn normalization_standardizes_channels() {
        let ds = synth_gaussians(3, 10, 8, 0, Split::Train).unwrap();
        let norm = Normalization::fit(&ds.images).unwrap();
        let mut x = ds.images.clone();
        norm.apply(&mut x);
        let n = x.len() as f64;
        let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
    }

    #[test]
    fn zero_pad_crop_is_identity() {
        let img: Vec<f32> = (0..18).map(|v| v as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop_flip(&img, [2, 3, 3], 0, false, &mut rng), img);
    }

    proptest! {
        #[test]
        fn tasks_partition_classes(classes in 1usize..40, steps in 1usize..8, seed in any::<u64>()) {
            prop_assume!(classes % steps == 0);
            let s = make_task_sequence(classes, Protocol::B0, steps, seed).unwrap();
            let mut all: Vec<u32> = s.tasks.concat();
            prop_assert_eq!(&all, &s.class_order);
            all.sort_unstable();
            prop_assert_eq!(all, (0..classes as u32).collect::<Vec<_>>());
        }

        #[test]
        fn crop_keeps_pixel_values(seed in any::<u64>(), pad in 0usize..3) {
            let img: Vec<f32> = (0..16).map(|v| v as f32 + 1.0).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = random_crop_flip(&img, [1, 4, 4], pad, true, &mut rng);
            prop_assert!(out.iter().all(|v| *v == 0.0 || img.contains(v)));
        }
    }
}
