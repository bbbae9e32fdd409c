//! Bag datasets on disk: a `manifest.json` index plus one little-endian
//! binary file per bag.
//!
//! Bag file layout:
//!
//! ```text
//! "SMIL"                          4 bytes
//! version, K, c, ph, pw,          7 × u32
//!   full_h, full_w
//! (row, col) × K                  2K × u32
//! patch data                      K·c·ph·pw × f32, row-major [K, c, ph, pw]
//! ```

mod synth;

pub use synth::{generate_synthetic, SynthSpec, Task};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const BAG_MAGIC: [u8; 4] = *b"SMIL";
pub const BAG_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 4 + 7 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagRecord {
    pub id: String,
    pub label: usize,
    pub split: Split,
    /// `[K, c, ph, pw]`.
    pub patches: Tensor<f32>,
    /// Full-resolution `(row, col)` of every patch.
    pub locations: Vec<(usize, usize)>,
    pub full_h: usize,
    pub full_w: usize,
}

impl BagRecord {
    pub fn validate(&self) -> Result<()> {
        if self.patches.ndim() != 4 {
            return Err(Error::shape(format!("bag {}: patches must be rank 4", self.id)));
        }
        let k = self.patches.dim(0);
        if self.locations.len() != k {
            return Err(Error::invalid(format!(
                "bag {}: {k} patches but {} locations",
                self.id,
                self.locations.len()
            )));
        }
        if let Some(&(r, c)) = self.locations.iter().find(|&&(r, c)| r >= self.full_h || c >= self.full_w) {
            return Err(Error::CoordinateOutOfBounds {
                path: self.id.clone(),
                row: r as u32,
                col: c as u32,
                full_h: self.full_h as u32,
                full_w: self.full_w as u32,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// `(c, ph, pw)`.
    pub fn patch_shape(&self) -> (usize, usize, usize) {
        (self.patches.dim(1), self.patches.dim(2), self.patches.dim(3))
    }

    /// Patches and locations of the instances at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<(usize, usize)>)> {
        let (c, h, w) = self.patch_shape();
        let n = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * n);
        let mut locs = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.patches.data()[i * n..(i + 1) * n]);
            locs.push(self.locations[i]);
        }
        Ok((Tensor::from_vec(&[idx.len(), c, h, w], data)?, locs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    pub class_names: Vec<String>,
    /// Generator seed, when the dataset is synthetic.
    pub seed: Option<u64>,
    pub synth: Option<SynthSpec>,
    pub bags: Vec<BagRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    file: String,
    label: usize,
    split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    class_names: Vec<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    synth: Option<SynthSpec>,
    bags: Vec<ManifestEntry>,
}

impl BagDataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> Vec<&BagRecord> {
        self.bags.iter().filter(|b| b.split == split).collect()
    }

    /// Common `(c, ph, pw)` of every patch.
    pub fn patch_shape(&self) -> Result<(usize, usize, usize)> {
        let first = self.bags.first().ok_or_else(|| Error::invalid("dataset has no bags"))?;
        let s = first.patch_shape();
        if let Some(b) = self.bags.iter().find(|b| b.patch_shape() != s) {
            return Err(Error::shape(format!(
                "bag {} has patch shape {:?}, expected {s:?}",
                b.id,
                b.patch_shape()
            )));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for b in &self.bags {
            b.validate()?;
            if b.label >= self.n_classes() {
                return Err(Error::invalid(format!(
                    "bag {} has label {} but only {} classes",
                    b.id,
                    b.label,
                    self.n_classes()
                )));
            }
            if !ids.insert(&b.id) {
                return Err(Error::invalid(format!("duplicate bag id {}", b.id)));
            }
        }
        self.patch_shape().map(|_| ())
    }
}

pub fn encode_bag(bag: &BagRecord) -> Result<Vec<u8>> {
    bag.validate()?;
    let (c, h, w) = bag.patch_shape();
    let k = bag.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * k + 4 * bag.patches.len());
    out.extend_from_slice(&BAG_MAGIC);
    for v in [BAG_VERSION as usize, k, c, h, w, bag.full_h, bag.full_w] {
        let v = u32::try_from(v).map_err(|_| Error::invalid(format!("bag {}: header field {v} exceeds u32", bag.id)))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &(r, col) in &bag.locations {
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(col as u32).to_le_bytes());
    }
    for v in bag.patches.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decoded bag payload: patches, locations, and slide extents.
pub type BagPayload = (Tensor<f32>, Vec<(usize, usize)>, usize, usize);

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4-byte slice"))
}

/// Parses one bag file. `path` only labels diagnostics.
pub fn decode_bag(path: &str, bytes: &[u8]) -> Result<BagPayload> {
    let truncated = |needed: usize| Error::Truncated {
        path: path.to_string(),
        needed,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if found != BAG_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_string(),
            expected: BAG_MAGIC,
            found,
        });
    }
    if bytes.len() < 8 {
        return Err(truncated(HEADER_LEN));
    }
    let version = u32_at(bytes, 4);
    if version != BAG_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_string(),
            expected: BAG_VERSION,
            found: version,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let f: Vec<usize> = (1..7).map(|i| u32_at(bytes, 4 + 4 * i) as usize).collect();
    let (k, c, h, w, full_h, full_w) = (f[0], f[1], f[2], f[3], f[4], f[5]);
    if k == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("{path}: zero extent in header (K={k}, c={c}, {h}x{w})")));
    }
    let n_vals = k
        .checked_mul(c * h * w)
        .ok_or_else(|| Error::invalid(format!("{path}: header sizes overflow")))?;
    let needed = HEADER_LEN + 8 * k + 4 * n_vals;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    if bytes.len() > needed {
        return Err(Error::invalid(format!(
            "{path}: {} trailing bytes after patch data",
            bytes.len() - needed
        )));
    }
    let mut locations = Vec::with_capacity(k);
    for i in 0..k {
        let off = HEADER_LEN + 8 * i;
        let (row, col) = (u32_at(bytes, off), u32_at(bytes, off + 4));
        if row as usize >= full_h || col as usize >= full_w {
            return Err(Error::CoordinateOutOfBounds {
                path: path.to_string(),
                row,
                col,
                full_h: full_h as u32,
                full_w: full_w as u32,
            });
        }
        locations.push((row as usize, col as usize));
    }
    let base = HEADER_LEN + 8 * k;
    let data = bytes[base..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect();
    Ok((Tensor::from_vec(&[k, c, h, w], data)?, locations, full_h, full_w))
}

fn bag_file(id: &str) -> String {
    format!("{id}.smil")
}

/// Writes `dataset` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, dataset: &BagDataset) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let results = par::map_slice(&dataset.bags, |bag| -> Result<()> {
        let path = dir.join(bag_file(&bag.id));
        fs::write(&path, encode_bag(bag)?).map_err(|e| Error::io(&path, e))
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        class_names: dataset.class_names.clone(),
        seed: dataset.seed,
        synth: dataset.synth.clone(),
        bags: dataset
            .bags
            .iter()
            .map(|b| ManifestEntry {
                id: b.id.clone(),
                file: bag_file(&b.id),
                label: b.label,
                split: b.split,
            })
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<BagDataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            path: mpath.display().to_string(),
            expected: MANIFEST_VERSION,
            found: manifest.version,
        });
    }
    let bags = par::map_slice(&manifest.bags, |e| -> Result<BagRecord> {
        if e.file.contains(['/', '\\']) || e.file.starts_with('.') {
            return Err(Error::invalid(format!("manifest file name `{}` must be a plain name", e.file)));
        }
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let (patches, locations, full_h, full_w) = decode_bag(&path.display().to_string(), &bytes)?;
        Ok(BagRecord {
            id: e.id.clone(),
            label: e.label,
            split: e.split,
            patches,
            locations,
            full_h,
            full_w,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ds = BagDataset {
        class_names: manifest.class_names,
        seed: manifest.seed,
        synth: manifest.synth,
        bags,
    };
    ds.validate()?;
    Ok(ds)
}
