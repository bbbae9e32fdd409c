//! Synthetic bag generators.
//!
//! Every instance type owns a fixed texture (per-channel offset plus an
//! oriented stripe pattern) derived from the seed; each drawn patch adds
//! Gaussian pixel noise. In the presence task a bag is positive iff it
//! holds a type-0 instance. In the adjacency task every bag holds exactly
//! two type-0 instances and the label depends only on how far apart they
//! are, so any location-blind pooling sees the same input distribution for
//! both classes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BagDataset, BagRecord, Split};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{substream, Prng};
use crate::sparse_map::downsampled_extent;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Presence,
    Adjacency,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "presence" => Ok(Task::Presence),
            "adjacency" => Ok(Task::Adjacency),
            _ => Err(Error::invalid(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub task: Task,
    pub n_bags: usize,
    pub tiles_per_bag: usize,
    pub n_types: usize,
    pub patch_channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Full slide extent in both directions.
    pub grid: usize,
    /// Chebyshev threshold in cells of `reference_downsampling`.
    pub adjacency_d: usize,
    pub reference_downsampling: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            task: Task::Adjacency,
            n_bags: 200,
            tiles_per_bag: 32,
            n_types: 4,
            patch_channels: 3,
            patch_h: 8,
            patch_w: 8,
            grid: 4096,
            adjacency_d: 2,
            reference_downsampling: 128,
            noise_sigma: 0.5,
            seed: 0,
            train_fraction: 0.6,
            validation_fraction: 0.2,
        }
    }
}

const TEXTURE_STREAM: u64 = 1 << 32;
const MIN_OFFSET_GAP: f64 = 0.5;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_types < 2 {
            return bad(format!("n_types must be at least 2, got {}", self.n_types));
        }
        if self.n_bags == 0 || self.tiles_per_bag == 0 || self.grid == 0 {
            return bad("n_bags, tiles_per_bag and grid must be positive".into());
        }
        if self.patch_channels == 0 || self.patch_h < 8 || self.patch_w < 8 {
            return bad("patches need at least one channel and 8x8 pixels".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        let (t, v) = (self.train_fraction, self.validation_fraction);
        if !(t > 0.0 && v >= 0.0 && t + v <= 1.0) {
            return bad(format!("invalid split fractions train={t} validation={v}"));
        }
        if self.task == Task::Adjacency {
            if self.tiles_per_bag < 2 {
                return bad("adjacency task needs at least 2 tiles per bag".into());
            }
            if self.reference_downsampling == 0 {
                return bad("reference_downsampling must be positive".into());
            }
            let cells = downsampled_extent(self.grid, self.reference_downsampling);
            if cells < 4 * self.adjacency_d + 3 {
                return bad(format!(
                    "adjacency_d={} infeasible: {cells} cells per side cannot separate label-0 pairs by more than {}",
                    self.adjacency_d,
                    2 * self.adjacency_d
                ));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        match self.task {
            Task::Presence => vec!["absent".into(), "present".into()],
            Task::Adjacency => vec!["far".into(), "near".into()],
        }
    }
}

/// Per-type textures, `[n_types][c·h·w]`.
fn textures(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = substream(spec.seed, TEXTURE_STREAM);
    let c = spec.patch_channels;
    // channel offsets pairwise separated in L∞ so types stay distinguishable
    let mut offsets: Vec<Vec<f64>> = Vec::new();
    let mut attempts = 0;
    while offsets.len() < spec.n_types {
        attempts += 1;
        let cand: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let far = offsets
            .iter()
            .all(|o| o.iter().zip(&cand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) >= MIN_OFFSET_GAP);
        if far || attempts > 10_000 {
            offsets.push(cand);
        }
    }
    offsets
        .into_iter()
        .map(|off| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(2.0..6.0);
            let (fy, fx) = (theta.sin() / period, theta.cos() / period);
            let mut tex = Vec::with_capacity(c * spec.patch_h * spec.patch_w);
            for (ch, &o) in off.iter().enumerate() {
                let phase = ch as f64 * 1.3;
                for y in 0..spec.patch_h {
                    for x in 0..spec.patch_w {
                        let s = (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
                        tex.push(o + 0.5 * s);
                    }
                }
            }
            tex
        })
        .collect()
}

fn chebyshev_cells(a: (usize, usize), b: (usize, usize), ds: usize) -> usize {
    let (ar, ac, br, bc) = (a.0 / ds, a.1 / ds, b.0 / ds, b.1 / ds);
    ar.abs_diff(br).max(ac.abs_diff(bc))
}

fn uniform_loc(rng: &mut Prng, grid: usize) -> (usize, usize) {
    (rng.random_range(0..grid), rng.random_range(0..grid))
}

/// Two type-0 locations with cell distance `≤ d` (near) or `> 2d` (far).
fn type0_pair(spec: &SynthSpec, near: bool, rng: &mut Prng) -> [(usize, usize); 2] {
    let (ds, d, g) = (spec.reference_downsampling, spec.adjacency_d, spec.grid);
    loop {
        let a = uniform_loc(rng, g);
        if near {
            let lo = |v: usize| (v / ds).saturating_sub(d) * ds;
            let hi = |v: usize| ((v / ds + d + 1) * ds).min(g);
            let b = (rng.random_range(lo(a.0)..hi(a.0)), rng.random_range(lo(a.1)..hi(a.1)));
            return [a, b];
        }
        for _ in 0..10_000 {
            let b = uniform_loc(rng, g);
            if chebyshev_cells(a, b, ds) > 2 * d {
                return [a, b];
            }
        }
    }
}

fn generate_bag(spec: &SynthSpec, tex: &[Vec<f64>], index: usize, label: usize) -> Result<BagRecord> {
    let mut rng = substream(spec.seed, index as u64 + 1);
    let k = spec.tiles_per_bag;
    let other = |rng: &mut Prng| rng.random_range(1..spec.n_types);
    let (mut types, mut locs): (Vec<usize>, Vec<(usize, usize)>) = match spec.task {
        Task::Presence => {
            let n0 = if label == 1 { rng.random_range(1..=k.min(4)) } else { 0 };
            let types: Vec<usize> = (0..k).map(|i| if i < n0 { 0 } else { other(&mut rng) }).collect();
            let locs = (0..k).map(|_| uniform_loc(&mut rng, spec.grid)).collect();
            (types, locs)
        }
        Task::Adjacency => {
            let pair = type0_pair(spec, label == 1, &mut rng);
            let mut types = vec![0, 0];
            let mut locs = pair.to_vec();
            for _ in 2..k {
                types.push(other(&mut rng));
                locs.push(uniform_loc(&mut rng, spec.grid));
            }
            (types, locs)
        }
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    types = order.iter().map(|&i| types[i]).collect();
    locs = order.iter().map(|&i| locs[i]).collect();

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n = spec.patch_channels * spec.patch_h * spec.patch_w;
    let mut data = Vec::with_capacity(k * n);
    for &t in &types {
        data.extend(tex[t].iter().map(|&b| (b + noise.sample(&mut rng)) as f32));
    }
    Ok(BagRecord {
        id: format!("bag_{index:05}"),
        label,
        split: Split::Train,
        patches: Tensor::from_vec(&[k, spec.patch_channels, spec.patch_h, spec.patch_w], data)?,
        locations: locs,
        full_h: spec.grid,
        full_w: spec.grid,
    })
}

/// Generates a class-balanced two-class dataset. Bag `i` has label `i mod 2`
/// and is built from its own sub-stream, so output is independent of
/// scheduling. Splits are assigned per class in index order.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<BagDataset> {
    spec.validate()?;
    let tex = textures(spec);
    let indices: Vec<usize> = (0..spec.n_bags).collect();
    let mut bags = par::map_slice(&indices, |&i| generate_bag(spec, &tex, i, i % 2))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for class in 0..2 {
        let members: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == class).collect();
        let n = members.len();
        let n_train = (n as f64 * spec.train_fraction).round() as usize;
        let n_val = ((n as f64 * spec.validation_fraction).round() as usize).min(n - n_train);
        for (rank, &i) in members.iter().enumerate() {
            bags[i].split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }
    Ok(BagDataset {
        class_names: spec.class_names(),
        seed: Some(spec.seed),
        synth: Some(spec.clone()),
        bags,
    })
}
