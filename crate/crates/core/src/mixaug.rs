//! Mixup, CutMix and their rehearsal-paired variants.
//!
//! Images are channel-planar `[C×H×W]` slices. A CutMix box is pasted across
//! every channel.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::ExemplarMemory;
use crate::tensor::Tensor;

/// Augmentation applied to compression batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    None,
    Mixup,
    Cutmix,
    RMixup,
    RCutmix,
}

impl AugMode {
    pub const ALL: [AugMode; 5] = [AugMode::None, AugMode::Mixup, AugMode::Cutmix, AugMode::RMixup, AugMode::RCutmix];

    pub fn as_str(self) -> &'static str {
        match self {
            AugMode::None => "none",
            AugMode::Mixup => "mixup",
            AugMode::Cutmix => "cutmix",
            AugMode::RMixup => "r_mixup",
            AugMode::RCutmix => "r_cutmix",
        }
    }

    pub fn is_rehearsal(self) -> bool {
        matches!(self, AugMode::RMixup | AugMode::RCutmix)
    }

    /// The within-batch counterpart used when no memory exists yet.
    pub fn without_rehearsal(self) -> Self {
        match self {
            AugMode::RMixup => AugMode::Mixup,
            AugMode::RCutmix => AugMode::Cutmix,
            m => m,
        }
    }
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("AugMode", format!("unknown mode '{s}' (none|mixup|cutmix|r_mixup|r_cutmix)")))
    }
}

/// `λ ∼ Beta(α, α)`, resampled until strictly inside (0, 1).
pub fn sample_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("sample_lambda", format!("alpha must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid("sample_lambda", e.to_string()))?;
    loop {
        let v: f64 = beta.sample(rng);
        if v > 0.0 && v < 1.0 {
            return Ok(v);
        }
    }
}

/// Box centre and size in pixels; may extend past the borders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSpec {
    pub cx: f64,
    pub cy: f64,
    pub rw: f64,
    pub rh: f64,
}

/// Integer box `[x0, x1) × [y0, y1)` clipped to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

pub fn sample_box(w: usize, h: usize, lambda: f64, rng: &mut impl Rng) -> Result<BoxSpec> {
    if w == 0 || h == 0 {
        return Err(Error::invalid("sample_box", "image must be at least 1×1"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("sample_box", format!("lambda {lambda} outside [0, 1]")));
    }
    let cut = (1.0 - lambda).sqrt();
    Ok(BoxSpec {
        cx: rng.random_range(0.0..w as f64),
        cy: rng.random_range(0.0..h as f64),
        rw: w as f64 * cut,
        rh: h as f64 * cut,
    })
}

fn clip_axis(centre: f64, size: f64, limit: usize) -> (usize, usize) {
    let len = size.round() as i64;
    let lo = centre.floor() as i64 - len / 2;
    let hi = lo + len;
    let clamp = |v: i64| v.clamp(0, limit as i64) as usize;
    (clamp(lo), clamp(hi))
}

impl BoxSpec {
    /// Round the size to whole pixels, centre it on the pixel holding
    /// `(cx, cy)` and clip to `w×h`.
    pub fn clip(&self, w: usize, h: usize) -> Rect {
        let (x0, x1) = clip_axis(self.cx, self.rw, w);
        let (y0, y1) = clip_axis(self.cy, self.rh, h);
        Rect { x0, y0, x1, y1 }
    }
}

fn check_pair(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// Paste the `rect` region of `xj` into `xi`. Returns the mixed image and
/// `λ_eff = 1 − area/(W·H)`.
pub fn cutmix_apply(xi: &[f32], xj: &[f32], shape: [usize; 3], rect: Rect) -> Result<(Vec<f32>, f64)> {
    check_pair("cutmix_apply", xi, xj)?;
    let [c, h, w] = shape;
    if xi.len() != c * h * w {
        return Err(Error::shape("cutmix_apply", format!("{} values for image {shape:?}", xi.len())));
    }
    if rect.x1 > w || rect.y1 > h || rect.x0 > rect.x1 || rect.y0 > rect.y1 {
        return Err(Error::invalid("cutmix_apply", format!("{rect:?} outside {w}×{h}")));
    }
    let mut out = xi.to_vec();
    for ch in 0..c {
        for y in rect.y0..rect.y1 {
            let base = (ch * h + y) * w;
            out[base + rect.x0..base + rect.x1].copy_from_slice(&xj[base + rect.x0..base + rect.x1]);
        }
    }
    Ok((out, 1.0 - rect.area() as f64 / (w * h) as f64))
}

/// `λ·x_i + (1−λ)·x_j` elementwise.
pub fn mixup_apply(xi: &[f32], xj: &[f32], lambda: f64) -> Result<Vec<f32>> {
    check_pair("mixup_apply", xi, xj)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("mixup_apply", format!("lambda {lambda} outside [0, 1]")));
    }
    let (a, b) = (lambda as f32, (1.0 - lambda) as f32);
    Ok(xi.iter().zip(xj).map(|(&p, &q)| a * p + b * q).collect())
}

/// `λ·onehot(y_i) + (1−λ)·onehot(y_j)` over `classes` entries.
pub fn mixed_target(yi: usize, yj: usize, lambda: f64, classes: usize) -> Result<Vec<f32>> {
    if yi >= classes || yj >= classes {
        return Err(Error::invalid(
            "mixed_target",
            format!("labels {yi}, {yj} outside {classes} classes"),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("mixed_target", format!("lambda {lambda} outside [0, 1]")));
    }
    let mut row = vec![0.0; classes];
    if yi == yj {
        row[yi] = 1.0;
    } else {
        row[yi] = lambda as f32;
        row[yj] = (1.0 - lambda) as f32;
    }
    Ok(row)
}

/// Where the second image of a mix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partner {
    /// Another sample of the same mini-batch.
    Batch(usize),
    /// A rehearsal exemplar of this class id.
    Memory(u32),
}

/// One augmentation event.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub lambda_raw: f64,
    /// Present for CutMix only.
    pub bbox: Option<(BoxSpec, Rect)>,
    pub lambda_eff: f64,
    pub partner: Partner,
    pub partner_label: usize,
}

#[derive(Clone, Debug)]
pub struct MixedBatch {
    /// `[B×C×H×W]`.
    pub images: Tensor,
    /// Probability rows `[B×classes]`.
    pub targets: Tensor,
    pub plans: Vec<MixPlan>,
}

/// Mix a mini-batch according to `mode`.
///
/// Rehearsal modes draw one partner per sample from `memory`; `positions`
/// maps stored class ids to label positions. Without a non-empty memory
/// they fall back to within-batch pairing, which uses a random permutation
/// of the batch. Every pair gets a fresh `λ` (and box).
#[allow(clippy::too_many_arguments)]
pub fn mix_batch(
    mode: AugMode,
    images: &Tensor,
    labels: &[usize],
    classes: usize,
    memory: Option<(&ExemplarMemory, &HashMap<u32, usize>)>,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<MixedBatch> {
    if images.rank() != 4 || images.dim(0) != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "mix_batch",
            format!("images {:?} with {} labels", images.shape(), labels.len()),
        ));
    }
    let b = labels.len();
    let shape = [images.dim(1), images.dim(2), images.dim(3)];
    let stride = shape.iter().product::<usize>();
    let image = |i: usize| &images.data()[i * stride..(i + 1) * stride];
    let memory = memory.filter(|(m, _)| !m.is_empty());
    let mode = if memory.is_none() { mode.without_rehearsal() } else { mode };

    if mode == AugMode::None {
        let mut targets = Vec::with_capacity(b * classes);
        for &y in labels {
            targets.extend(mixed_target(y, y, 1.0, classes)?);
        }
        let plans = (0..b)
            .map(|i| MixPlan {
                lambda_raw: 1.0,
                bbox: None,
                lambda_eff: 1.0,
                partner: Partner::Batch(i),
                partner_label: labels[i],
            })
            .collect();
        return Ok(MixedBatch {
            images: images.clone(),
            targets: Tensor::new(vec![b, classes], targets)?,
            plans,
        });
    }

    let partners: Vec<(Partner, usize, &[f32])> = if mode.is_rehearsal() {
        let (mem, pos) = memory.expect("rehearsal mode keeps a memory");
        mem.sample_batch(b, rng)?
            .into_iter()
            .map(|s| {
                let y = *pos
                    .get(&s.class_id)
                    .ok_or_else(|| Error::invalid("mix_batch", format!("memory class {} has no label position", s.class_id)))?;
                Ok((Partner::Memory(s.class_id), y, s.image))
            })
            .collect::<Result<_>>()?
    } else {
        let mut perm: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        perm.into_iter().map(|j| (Partner::Batch(j), labels[j], image(j))).collect()
    };

    let mut out = Vec::with_capacity(b * stride);
    let mut targets = Vec::with_capacity(b * classes);
    let mut plans = Vec::with_capacity(b);
    for (i, (partner, yj, xj)) in partners.into_iter().enumerate() {
        let lambda_raw = sample_lambda(alpha, rng)?;
        let (mixed, lambda_eff, bbox) = match mode {
            AugMode::Cutmix | AugMode::RCutmix => {
                let spec = sample_box(shape[2], shape[1], lambda_raw, rng)?;
                let rect = spec.clip(shape[2], shape[1]);
                let (m, le) = cutmix_apply(image(i), xj, shape, rect)?;
                (m, le, Some((spec, rect)))
            }
            _ => (mixup_apply(image(i), xj, lambda_raw)?, lambda_raw, None),
        };
        out.extend(mixed);
        targets.extend(mixed_target(labels[i], yj, lambda_eff, classes)?);
        plans.push(MixPlan {
            lambda_raw,
            bbox,
            lambda_eff,
            partner,
            partner_label: yj,
        });
    }
    Ok(MixedBatch {
        images: Tensor::new(images.shape().to_vec(), out)?,
        targets: Tensor::new(vec![b, classes], targets)?,
        plans,
    })
}
