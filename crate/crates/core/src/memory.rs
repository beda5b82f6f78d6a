//! Fixed-budget rehearsal memory with herding-ordered exemplars.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::checkpoint::Container;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryBudget {
    /// `K` exemplars shared by every seen class.
    Total(usize),
    /// `m` exemplars per class.
    PerClass(usize),
}

/// Exemplars of one class in herding order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStore {
    pub class_id: u32,
    /// Index of each exemplar in its source dataset.
    pub source_ids: Vec<usize>,
    pub images: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarMemory {
    pub budget: MemoryBudget,
    pub image_shape: [usize; 3],
    /// One store per seen class, in class order.
    pub classes: Vec<ClassStore>,
}

/// A borrowed memory sample.
#[derive(Clone, Copy, Debug)]
pub struct MemorySample<'a> {
    pub class_id: u32,
    pub image: &'a [f32],
}

/// Greedy herding ranking.
///
/// Step `k` picks the unused row `j` that brings the running exemplar mean
/// `(Σ_chosen φ + φ_j)/k` closest to the full mean. Distances are compared
/// after scaling by `n·k`, so integer features tie exactly and ties go to the
/// lowest index.
pub fn herding_select(features: &Tensor<f64>, m: usize) -> Result<Vec<usize>> {
    if features.rank() != 2 || features.dim(0) == 0 || features.dim(1) == 0 {
        return Err(Error::invalid(
            "herding_select",
            format!("need a non-empty [n×d] feature set, got {:?}", features.shape()),
        ));
    }
    if m == 0 {
        return Err(Error::invalid("herding_select", "budget must be at least 1"));
    }
    let (n, d) = (features.dim(0), features.dim(1));
    let mut total = vec![0.0; d];
    for i in 0..n {
        for (t, &v) in total.iter_mut().zip(features.row(i)) {
            *t += v;
        }
    }
    let mut chosen = Vec::with_capacity(m.min(n));
    let mut used = vec![false; n];
    let mut running = vec![0.0; d];
    for k in 1..=m.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| !used[j]) {
            let dist: f64 = (0..d)
                .map(|c| {
                    let diff = k as f64 * total[c] - n as f64 * (running[c] + features.row(j)[c]);
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        let (j, _) = best.expect("an unused index remains");
        used[j] = true;
        chosen.push(j);
        for (r, &v) in running.iter_mut().zip(features.row(j)) {
            *r += v;
        }
    }
    Ok(chosen)
}

fn l2_normalized_rows(features: &Tensor) -> Tensor<f64> {
    let mut out = features.cast::<f64>();
    for i in 0..out.dim(0) {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Per-class quotas for `classes` seen classes.
pub fn quotas(budget: MemoryBudget, classes: usize) -> Result<Vec<usize>> {
    match budget {
        MemoryBudget::PerClass(0) | MemoryBudget::Total(0) => Err(Error::invalid("memory quota", "budget must be positive")),
        MemoryBudget::PerClass(m) => Ok(vec![m; classes]),
        MemoryBudget::Total(k) => {
            let q = k / classes.max(1);
            if q == 0 {
                return Err(Error::invalid(
                    "memory quota",
                    format!("{classes} classes exceed a total budget of {k}"),
                ));
            }
            let extra = k % classes;
            Ok((0..classes).map(|c| q + usize::from(c < extra)).collect())
        }
    }
}

impl ExemplarMemory {
    pub fn new(budget: MemoryBudget, image_shape: [usize; 3]) -> Self {
        Self {
            budget,
            image_shape,
            classes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.images.len()).collect()
    }

    /// Add `new_classes` (in class order) from `data`, shrinking old classes
    /// to their new quota. `features` holds one row per sample of `data`,
    /// already extracted in eval mode; rows are L2-normalized here.
    pub fn update(&mut self, data: &LabeledDataset, new_classes: &[u32], features: &Tensor) -> Result<()> {
        if features.rank() != 2 || features.dim(0) != data.len() {
            return Err(Error::shape(
                "ExemplarMemory::update",
                format!("{:?} features for {} samples", features.shape(), data.len()),
            ));
        }
        if data.image_shape() != self.image_shape {
            return Err(Error::shape(
                "ExemplarMemory::update",
                format!("images {:?} vs memory {:?}", data.image_shape(), self.image_shape),
            ));
        }
        for &c in new_classes {
            if self.classes.iter().any(|s| s.class_id == c) {
                return Err(Error::invalid("ExemplarMemory::update", format!("class {c} already stored")));
            }
        }
        let q = quotas(self.budget, self.classes.len() + new_classes.len())?;
        for (store, &quota) in self.classes.iter_mut().zip(&q) {
            store.images.truncate(quota);
            store.source_ids.truncate(quota);
        }
        let normalized = l2_normalized_rows(features);
        for (&class_id, &quota) in new_classes.iter().zip(&q[self.classes.len()..]) {
            let members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class_id).collect();
            if members.is_empty() {
                return Err(Error::invalid("ExemplarMemory::update", format!("no samples of class {class_id}")));
            }
            let d = normalized.dim(1);
            let class_feats = Tensor::from_fn(&[members.len(), d], |k| normalized.row(members[k / d])[k % d]);
            let order = herding_select(&class_feats, quota)?;
            self.classes.push(ClassStore {
                class_id,
                source_ids: order.iter().map(|&k| data.ids[members[k]]).collect(),
                images: order.iter().map(|&k| data.image(members[k]).to_vec()).collect(),
            });
        }
        Ok(())
    }

    /// Every stored exemplar, class by class in herding order.
    pub fn iter(&self) -> impl Iterator<Item = MemorySample<'_>> {
        self.classes.iter().flat_map(|c| {
            c.images.iter().map(move |img| MemorySample {
                class_id: c.class_id,
                image: img,
            })
        })
    }

    fn nth(&self, mut i: usize) -> MemorySample<'_> {
        for c in &self.classes {
            if i < c.images.len() {
                return MemorySample {
                    class_id: c.class_id,
                    image: &c.images[i],
                };
            }
            i -= c.images.len();
        }
        unreachable!("index within memory size")
    }

    /// `b` uniform draws with replacement over all stored exemplars.
    pub fn sample_batch(&self, b: usize, rng: &mut impl Rng) -> Result<Vec<MemorySample<'_>>> {
        let n = self.len();
        if n == 0 {
            return Err(Error::invalid("sample_memory_batch", "memory is empty"));
        }
        if b == 0 {
            return Err(Error::invalid("sample_memory_batch", "batch size must be at least 1"));
        }
        Ok((0..b).map(|_| self.nth(rng.random_range(0..n))).collect())
    }

    /// Check budget and balance invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let counts = self.counts();
        let ok = match self.budget {
            MemoryBudget::Total(k) => {
                let (lo, hi) = (counts.iter().min(), counts.iter().max());
                counts.iter().sum::<usize>() <= k && hi.zip(lo).is_none_or(|(h, l)| h - l <= 1)
            }
            MemoryBudget::PerClass(m) => counts.iter().all(|&c| c <= m),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "ExemplarMemory",
                format!("counts {counts:?} violate budget {:?}", self.budget),
            ))
        }
    }

    /// Write `<stem>.json` (class id to exemplar source ids) and `<stem>.bin`
    /// (one tensor per class in the checkpoint container).
    pub fn save_snapshot(&self, dir: &Path, stem: &str, config: BackboneConfig) -> Result<()> {
        let index: BTreeMap<String, &Vec<usize>> = self.classes.iter().map(|c| (c.class_id.to_string(), &c.source_ids)).collect();
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&serde_json::json!({
            "budget": self.budget,
            "class_order": self.class_ids(),
            "exemplars": index,
        }))
        .expect("memory index serializes");
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        let [ch, h, w] = self.image_shape;
        let tensors = self
            .classes
            .iter()
            .map(|c| {
                let flat: Vec<f32> = c.images.concat();
                Tensor::new(vec![c.images.len(), ch, h, w], flat).map(|t| (format!("class{}", c.class_id), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Container {
            tensors,
            class_ids: self.class_ids(),
            config,
        }
        .save(&dir.join(format!("{stem}.bin")))
    }
}
