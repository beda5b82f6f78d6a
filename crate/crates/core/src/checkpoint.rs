//! Versioned binary container for named tensors.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "FECILCK1" | version | tensor count
//! per tensor: name length | name (UTF-8) | rank | dims... | f32 payload
//! class id count | class ids...
//! backbone echo: in_channels | image_side | width | blocks_per_stage | stages
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, Classifier, CompactNetwork, FeatureExtractor};
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::protocol::Normalization;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FECILCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor)>,
    pub class_ids: Vec<u32>,
    pub config: BackboneConfig,
}

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn as_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid("Container::to_bytes", format!("{what} {v} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.at),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION);
        put(&mut out, as_u32(self.tensors.len(), "tensor count")?);
        for (name, t) in &self.tensors {
            put(&mut out, as_u32(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
            put(&mut out, as_u32(t.rank(), "rank")?);
            for &d in t.shape() {
                put(&mut out, as_u32(d, "dimension")?);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put(&mut out, as_u32(self.class_ids.len(), "class count")?);
        for &c in &self.class_ids {
            put(&mut out, c);
        }
        let c = &self.config;
        for v in [c.in_channels, c.image_side, c.width, c.blocks_per_stage, c.stages] {
            put(&mut out, as_u32(v, "config field")?);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(path, format!("bad checkpoint magic {magic:02x?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(path, format!("{name}: shape {shape:?} overflows")))?;
            let payload = r.take(numel, &name)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let n_ids = r.u32("class count")? as usize;
        let mut class_ids = Vec::with_capacity(n_ids.min(1 << 16));
        for _ in 0..n_ids {
            class_ids.push(r.u32("class id")?);
        }
        let mut cfg = [0usize; 5];
        for v in &mut cfg {
            *v = r.u32("backbone config")? as usize;
        }
        if r.at != bytes.len() {
            return Err(Error::format(
                path,
                format!("{} trailing bytes after checkpoint", bytes.len() - r.at),
            ));
        }
        Ok(Self {
            tensors,
            class_ids,
            config: BackboneConfig {
                in_channels: cfg[0],
                image_side: cfg[1],
                width: cfg[2],
                blocks_per_stage: cfg[3],
                stages: cfg[4],
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Serialize a compact model and its input normalization.
pub fn compact_to_container(net: &CompactNetwork, norm: &Normalization) -> Container {
    let mut tensors = net.state();
    let c = norm.mean.len();
    tensors.push(("norm.mean".into(), Tensor::from_fn(&[c], |i| norm.mean[i])));
    tensors.push(("norm.std".into(), Tensor::from_fn(&[c], |i| norm.std[i])));
    Container {
        tensors,
        class_ids: net.head.class_ids.clone(),
        config: net.extractor.config,
    }
}

pub fn compact_from_container(c: &Container, path: &Path) -> Result<(CompactNetwork, Normalization)> {
    // initial values are overwritten by the load below
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.config.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let extractor = FeatureExtractor::new(c.config, &mut rng)?;
    let rows = c.class_ids.len();
    let head = Classifier {
        weight: Param::new(Tensor::zeros(&[rows, extractor.out_dim()])),
        bias: Param::new(Tensor::zeros(&[rows])),
        class_ids: c.class_ids.clone(),
    };
    let mut net = CompactNetwork { extractor, head };
    let state: HashMap<String, Tensor> = c.tensors.iter().cloned().collect();
    net.load(&state).map_err(|e| Error::format(path, e.to_string()))?;
    let chans = c.config.in_channels;
    let take = |name: &str| {
        state
            .get(name)
            .filter(|t| t.shape() == [chans])
            .map(|t| t.data().to_vec())
            .ok_or_else(|| Error::format(path, format!("missing or malformed {name}")))
    };
    let norm = Normalization {
        mean: take("norm.mean")?,
        std: take("norm.std")?,
    };
    Ok((net, norm))
}

pub fn save_compact(net: &CompactNetwork, norm: &Normalization, path: &Path) -> Result<()> {
    compact_to_container(net, norm).save(path)
}

pub fn load_compact(path: &Path) -> Result<(CompactNetwork, Normalization)> {
    compact_from_container(&Container::load(path)?, path)
}
