//! Labeled image sets and the loaders that produce them: IDX (MNIST-style),
//! CIFAR-100 binary records, and a seeded synthetic blob dataset.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images `[n, C, H, W]` with values in `[0,1]` (until normalized) and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<u32>,
    /// Index of each sample in the dataset it was loaded from.
    pub ids: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<u32>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(Error::shape(
                "LabeledDataset",
                format!("{} labels for images {:?}", labels.len(), images.shape()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::invalid("LabeledDataset", "dataset is empty"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::invalid("LabeledDataset", format!("label {bad} >= {num_classes} classes")));
        }
        let ids = (0..labels.len()).collect();
        Ok(Self {
            images,
            labels,
            ids,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.outer(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let slabs: Vec<&[f32]> = indices.iter().map(|&i| self.image(i)).collect();
        Ok(Self {
            images: Tensor::stack(&self.image_shape(), &slabs)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        })
    }

    /// Samples whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &[u32]) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y as usize] += 1;
        }
        h
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn check_magic(path: &Path, bytes: &[u8], want: u32) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::format(
            path,
            format!("file is {} bytes, too short for an IDX header", bytes.len()),
        ));
    }
    let got = be_u32(bytes, 0);
    if got != want {
        return Err(Error::format(
            path,
            format!(
                "bad IDX magic {:02x} {:02x} {:02x} {:02x}, expected {:08x}",
                bytes[0], bytes[1], bytes[2], bytes[3], want
            ),
        ));
    }
    Ok(())
}

/// Load an IDX image file (`0x00000803`, u8 pixels) with its IDX label file
/// (`0x00000801`). Pixels are scaled to `[0,1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, num_classes: usize, split: Split) -> Result<LabeledDataset> {
    let img = read(images_path)?;
    check_magic(images_path, &img, IDX_IMAGES_MAGIC)?;
    if img.len() < 16 {
        return Err(Error::format(images_path, "truncated IDX image header"));
    }
    let (n, rows, cols) = (be_u32(&img, 4) as usize, be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    if rows != cols {
        return Err(Error::format(images_path, format!("non-square images {rows}x{cols}")));
    }
    let want = 16 + n * rows * cols;
    if img.len() != want {
        return Err(Error::format(
            images_path,
            format!("header declares {n} images of {rows}x{cols} ({want} bytes), file has {}", img.len()),
        ));
    }

    let lab = read(labels_path)?;
    check_magic(labels_path, &lab, IDX_LABELS_MAGIC)?;
    if lab.len() < 8 {
        return Err(Error::format(labels_path, "truncated IDX label header"));
    }
    let ln = be_u32(&lab, 4) as usize;
    if lab.len() != 8 + ln {
        return Err(Error::format(
            labels_path,
            format!("header declares {ln} labels, payload has {}", lab.len().saturating_sub(8)),
        ));
    }
    if ln != n {
        return Err(Error::format(labels_path, format!("{ln} labels for {n} images")));
    }
    let labels: Vec<u32> = lab[8..].iter().map(|&b| b as u32).collect();
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
        return Err(Error::format(labels_path, format!("label {bad} >= {num_classes} classes")));
    }
    let pixels = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], pixels)?;
    LabeledDataset::new(images, labels, num_classes, split)
}

pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR100_RECORD: usize = 2 + CIFAR_PIXELS;
const CIFAR10_RECORD: usize = 1 + CIFAR_PIXELS;

/// Load a CIFAR-100 binary file: records of coarse label, fine label, then
/// 3072 channel-planar RGB bytes.
pub fn load_cifar100(path: &Path, fine_labels: bool, split: Split) -> Result<LabeledDataset> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR100_RECORD != 0 {
        let hint = if !bytes.is_empty() && bytes.len() % CIFAR10_RECORD == 0 {
            " (length fits 3073-byte records: CIFAR-10 layout detected)"
        } else {
            ""
        };
        return Err(Error::format(
            path,
            format!("length {} is not a multiple of {CIFAR100_RECORD}{hint}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR100_RECORD;
    let num_classes = if fine_labels { 100 } else { 20 };
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR100_RECORD).enumerate() {
        let label = if fine_labels { rec[1] } else { rec[0] } as u32;
        if label as usize >= num_classes {
            return Err(Error::format(path, format!("record {i}: label {label} >= {num_classes}")));
        }
        labels.push(label);
        pixels.extend(rec[2..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    LabeledDataset::new(images, labels, num_classes, split)
}

/// Per-class blob geometry of the synthetic dataset.
struct BlobClass {
    cx: f64,
    cy: f64,
    angle: f64,
}

fn blob_classes(num_classes: usize, side: usize) -> Vec<BlobClass> {
    let s = side as f64;
    let centre = (s - 1.0) / 2.0;
    let radius = 0.22 * s;
    (0..num_classes)
        .map(|c| {
            let t = std::f64::consts::TAU * c as f64 / num_classes as f64;
            BlobClass {
                cx: centre + radius * t.cos(),
                cy: centre + radius * t.sin(),
                // neighbouring positions get well-separated orientations
                angle: std::f64::consts::PI * ((3 * c) % num_classes) as f64 / num_classes as f64,
            }
        })
        .collect()
}

/// Pixel-noise and centre-jitter levels of the synthetic generator. Jitter
/// is a fraction of the image side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthDifficulty {
    pub noise: f64,
    pub jitter: f64,
}

impl Default for SynthDifficulty {
    fn default() -> Self {
        Self { noise: 0.1, jitter: 0.07 }
    }
}

/// Seeded synthetic dataset: class `c` is an elongated Gaussian blob at a
/// class-specific position and orientation, with per-sample jitter and
/// pixel noise at the default difficulty. Train and test draw from disjoint
/// random streams.
pub fn synth_gaussians(num_classes: usize, per_class: usize, image_side: usize, seed: u64, split: Split) -> Result<LabeledDataset> {
    synth_gaussians_with(num_classes, per_class, image_side, seed, split, SynthDifficulty::default())
}

pub fn synth_gaussians_with(
    num_classes: usize,
    per_class: usize,
    image_side: usize,
    seed: u64,
    split: Split,
    difficulty: SynthDifficulty,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::invalid("synth_gaussians", "need at least two classes"));
    }
    if per_class < 2 {
        return Err(Error::invalid("synth_gaussians", "need at least two samples per class"));
    }
    if image_side < 4 {
        return Err(Error::invalid("synth_gaussians", "image side must be at least 4"));
    }
    if !(difficulty.noise > 0.0 && difficulty.jitter > 0.0) {
        return Err(Error::invalid("synth_gaussians", "noise and jitter must be positive"));
    }
    let stream = match split {
        Split::Train => 0x7472_6169,
        Split::Test => 0x7465_7374,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let classes = blob_classes(num_classes, image_side);
    let s = image_side as f64;
    let (major, minor) = (0.2 * s, 0.09 * s);
    let jitter = Normal::new(0.0, difficulty.jitter * s).expect("positive std");
    let spin = Normal::new(0.0, 0.2).expect("positive std");
    let noise = Normal::new(0.0, difficulty.noise).expect("positive std");
    let n = num_classes * per_class;
    let mut pixels = Vec::with_capacity(n * image_side * image_side);
    let mut labels = Vec::with_capacity(n);
    // interleave classes so any prefix is roughly balanced
    for _ in 0..per_class {
        for (c, k) in classes.iter().enumerate() {
            let cx = k.cx + jitter.sample(&mut rng);
            let cy = k.cy + jitter.sample(&mut rng);
            let angle = k.angle + spin.sample(&mut rng);
            let amp = rng.random_range(0.6..1.0);
            let (sin, cos) = angle.sin_cos();
            for y in 0..image_side {
                for x in 0..image_side {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let u = dx * cos + dy * sin;
                    let v = -dx * sin + dy * cos;
                    let blob = amp * (-(u * u) / (2.0 * major * major) - (v * v) / (2.0 * minor * minor)).exp();
                    pixels.push((blob + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(c as u32);
        }
    }
    let images = Tensor::new(vec![n, 1, image_side, image_side], pixels)?;
    LabeledDataset::new(images, labels, num_classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn idx_fixture(n: usize, side: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [n, side, side] {
            img.extend((d as u32).to_be_bytes());
        }
        for i in 0..n * side * side {
            img.push(if i == 0 { 255 } else { (i % 251) as u8 });
        }
        let mut lab = Vec::new();
        lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend((n as u32).to_be_bytes());
        lab.extend((0..n).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn idx_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_fixture(4, 28);
        let ip = write(dir.path(), "img", &img);
        let lp = write(dir.path(), "lab", &lab);
        let ds = load_idx(&ip, &lp, 10, Split::Train).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.image_shape(), [1, 28, 28]);
        assert_eq!(ds.images.data()[0], 1.0);
    }

    #[test]
    fn idx_bad_magic_names_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lab) = idx_fixture(2, 4);
        img[2] = 0x09;
        let ip = write(dir.path(), "img", &img);
        let lp = write(dir.path(), "lab", &lab);
        let err = load_idx(&ip, &lp, 10, Split::Train).unwrap_err().to_string();
        assert!(err.contains("00 00 09 03"), "{err}");
    }

    #[test]
    fn idx_truncated_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_fixture(3, 4);
        let ip = write(dir.path(), "img", &img[..img.len() - 1]);
        let lp = write(dir.path(), "lab", &lab);
        assert!(load_idx(&ip, &lp, 10, Split::Train).is_err());

        let (img2, _) = idx_fixture(3, 4);
        let (_, lab2) = idx_fixture(2, 4);
        let ip = write(dir.path(), "img2", &img2);
        let lp = write(dir.path(), "lab2", &lab2);
        let err = load_idx(&ip, &lp, 10, Split::Train).unwrap_err().to_string();
        assert!(err.contains("2 labels for 3 images"), "{err}");
    }

    fn cifar_record(coarse: u8, fine: u8, first: u8) -> Vec<u8> {
        let mut r = vec![coarse, fine];
        r.extend((0..CIFAR_PIXELS).map(|i| if i == 0 { first } else { (i % 256) as u8 }));
        r
    }

    #[test]
    fn cifar_fixture_loads_fine_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = cifar_record(3, 42, 128);
        bytes.extend(cifar_record(1, 99, 0));
        let p = write(dir.path(), "train.bin", &bytes);
        let ds = load_cifar100(&p, true, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![42, 99]);
        assert_eq!(ds.images.data()[0], 128.0 / 255.0);
        let coarse = load_cifar100(&p, false, Split::Train).unwrap();
        assert_eq!(coarse.labels, vec![3, 1]);
    }

    #[test]
    fn cifar10_layout_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c10.bin", &vec![0u8; CIFAR10_RECORD * 2]);
        let err = load_cifar100(&p, true, Split::Train).unwrap_err().to_string();
        assert!(err.contains("CIFAR-10 layout"), "{err}");
    }

    #[test]
    fn cifar_label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.bin", &cifar_record(0, 100, 0));
        assert!(load_cifar100(&p, true, Split::Train).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_gaussians(4, 10, 16, 9, Split::Train).unwrap();
        let b = synth_gaussians(4, 10, 16, 9, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_histogram(), vec![10; 4]);
        let t = synth_gaussians(4, 10, 16, 9, Split::Test).unwrap();
        assert_ne!(a.images, t.images);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(synth_gaussians(4, 1, 16, 9, Split::Train).is_err());
        assert!(synth_gaussians(1, 10, 16, 9, Split::Train).is_err());
    }

    #[test]
    fn subset_keeps_source_ids() {
        let a = synth_gaussians(3, 4, 8, 1, Split::Train).unwrap();
        let s = a.filter_classes(&[2]).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.labels.iter().all(|&y| y == 2));
        assert_eq!(s.ids, vec![2, 5, 8, 11]);
        assert_eq!(s.image(1), a.image(5));
    }

    /// Softmax regression on raw pixels, full-batch gradient descent.
    fn linear_probe_accuracy(train: &LabeledDataset, test: &LabeledDataset, iters: usize) -> f64 {
        use crate::graph::Graph;
        let d = train.image_shape().iter().product::<usize>();
        let k = train.num_classes;
        let flat = |ds: &LabeledDataset| ds.images.clone().reshape(&[ds.len(), d]).unwrap();
        let (xtr, xte) = (flat(train), flat(test));
        let labels: Vec<usize> = train.labels.iter().map(|&y| y as usize).collect();
        let targets = crate::loss::one_hot::<f32>(&labels, k).unwrap();
        let mut w = Tensor::zeros(&[k, d]);
        let mut b = Tensor::zeros(&[k]);
        for _ in 0..iters {
            let mut g = Graph::new();
            let x = g.constant(xtr.clone()).unwrap();
            let wv = g.leaf(w.clone(), true).unwrap();
            let bv = g.leaf(b.clone(), true).unwrap();
            let z = g.dense(x, wv, Some(bv)).unwrap();
            let l = g.softmax_cross_entropy(z, targets.clone()).unwrap();
            g.backward(l).unwrap();
            for (p, v) in [(&mut w, wv), (&mut b, bv)] {
                let grad = g.grad(v).unwrap();
                p.data_mut().iter_mut().zip(grad.data()).for_each(|(a, g)| *a -= 0.5 * g);
            }
        }
        let mut hits = 0;
        for i in 0..test.len() {
            let x = xte.row(i);
            let best = (0..k)
                .map(|c| (c, w.row(c).iter().zip(x).map(|(a, v)| a * v).sum::<f32>() + b.data()[c]))
                .fold((0, f32::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            hits += usize::from(best.0 == test.labels[i] as usize);
        }
        hits as f64 / test.len() as f64
    }

    #[test]
    fn four_classes_are_linearly_separable() {
        let train = synth_gaussians(4, 200, 16, 0, Split::Train).unwrap();
        let test = synth_gaussians(4, 50, 16, 0, Split::Test).unwrap();
        let acc = linear_probe_accuracy(&train, &test, 300);
        assert!(acc > 0.9, "linear probe accuracy {acc}");
    }
}
