//! Convolution and pooling layers that read and write only active cells.
//!
//! Convolution follows generalised sparse semantics: an output cell exists
//! iff its receptive field `{(s·i+m, s·j+n) : |m|,|n| ≤ f}` touches at least
//! one active input. Inactive inputs and taps outside the grid contribute
//! nothing. Per-cell tap summation runs in a fixed order, so outputs are
//! bit-identical regardless of how many workers compute them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{glorot_uniform, ParamMut, ParamRef, Parameterized};
use crate::par;
use crate::sparse_map::SparseMap;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct SparseConv<T> {
    /// `[out_c, in_c, 2f+1, 2f+1]`
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub use_bias: bool,
    pub stride: usize,
    pub grad_kernel: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

/// One (output cell, tap, input cell) triple of a convolution.
#[derive(Debug, Clone, Copy)]
struct Rule {
    out: usize,
    tap: usize,
    inp: usize,
}

impl<T: Scalar> SparseConv<T> {
    pub fn new(in_c: usize, out_c: usize, half_size: usize, stride: usize, use_bias: bool) -> Result<Self> {
        if stride == 0 || in_c == 0 || out_c == 0 {
            return Err(Error::invalid("sparse conv needs positive channels and stride"));
        }
        let k = 2 * half_size + 1;
        Ok(SparseConv {
            kernel: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
            use_bias,
            stride,
            grad_kernel: Tensor::zeros(&[out_c, in_c, k, k]),
            grad_bias: Tensor::zeros(&[out_c]),
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let k2 = self.kernel_size() * self.kernel_size();
        let (fi, fo) = (self.in_channels() * k2, self.out_channels() * k2);
        glorot_uniform(&mut self.kernel, fi, fo, rng);
        self.bias.fill(T::zero());
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dim(0)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dim(2)
    }

    pub fn half_size(&self) -> usize {
        self.kernel_size() / 2
    }

    /// Output grid extent `floor((n − 1) / s) + 1`.
    pub fn output_extent(&self, n: usize) -> usize {
        (n - 1) / self.stride + 1
    }

    fn check_input(&self, map: &SparseMap<T>) -> Result<()> {
        if !map.is_coalesced() {
            return Err(Error::invalid("sparse conv requires a coalesced map"));
        }
        if map.dim() != self.in_channels() {
            return Err(Error::shape(format!(
                "sparse conv expects {} channels, map has {}",
                self.in_channels(),
                map.dim()
            )));
        }
        Ok(())
    }

    /// Output cells whose receptive field touches an active input, sorted.
    pub fn output_cells(&self, map: &SparseMap<T>) -> Vec<(usize, usize)> {
        let (h, w) = map.grid();
        let (oh, ow) = (self.output_extent(h), self.output_extent(w));
        let f = self.half_size() as isize;
        let s = self.stride as isize;
        let mut cells = Vec::with_capacity(map.len() * self.kernel_size() * self.kernel_size());
        for &(r, c) in map.coords() {
            for m in -f..=f {
                let rr = r as isize - m;
                if rr < 0 || rr % s != 0 || rr / s >= oh as isize {
                    continue;
                }
                for n in -f..=f {
                    let cc = c as isize - n;
                    if cc < 0 || cc % s != 0 || cc / s >= ow as isize {
                        continue;
                    }
                    cells.push(((rr / s) as usize, (cc / s) as usize));
                }
            }
        }
        cells.sort_unstable();
        cells.dedup();
        cells
    }

    /// Rules grouped by output cell, taps in row-major kernel order.
    fn rules_for_output(&self, map: &SparseMap<T>, i: usize, j: usize, out: usize, into: &mut Vec<Rule>) {
        let (h, w) = map.grid();
        let k = self.kernel_size();
        let f = self.half_size() as isize;
        for a in 0..k {
            let r = (self.stride * i) as isize + a as isize - f;
            if r < 0 || r >= h as isize {
                continue;
            }
            for b in 0..k {
                let c = (self.stride * j) as isize + b as isize - f;
                if c < 0 || c >= w as isize {
                    continue;
                }
                if let Some(inp) = map.find(r as usize, c as usize) {
                    into.push(Rule { out, tap: a * k + b, inp });
                }
            }
        }
    }

    /// Per-tap weight matrices laid out `[tap][out_c][in_c]`.
    fn tap_major_kernel(&self) -> Vec<T> {
        let (o, c, k2) = (self.out_channels(), self.in_channels(), self.kernel_size() * self.kernel_size());
        let kd = self.kernel.data();
        let mut w = vec![T::zero(); k2 * o * c];
        for oo in 0..o {
            for cc in 0..c {
                for t in 0..k2 {
                    w[(t * o + oo) * c + cc] = kd[(oo * c + cc) * k2 + t];
                }
            }
        }
        w
    }

    pub fn forward(&self, map: &SparseMap<T>) -> Result<SparseMap<T>> {
        self.check_input(map)?;
        let (h, w) = map.grid();
        let out_cells = self.output_cells(map);
        let (o, c) = (self.out_channels(), self.in_channels());
        let weights = self.tap_major_kernel();
        let rows = par::map_range(out_cells.len(), |idx| {
            let (i, j) = out_cells[idx];
            let mut rules = Vec::new();
            self.rules_for_output(map, i, j, idx, &mut rules);
            let mut acc = if self.use_bias {
                self.bias.data().to_vec()
            } else {
                vec![T::zero(); o]
            };
            for rule in &rules {
                let x = map.embedding(rule.inp);
                let wt = &weights[rule.tap * o * c..(rule.tap + 1) * o * c];
                for (oo, a) in acc.iter_mut().enumerate() {
                    let wr = &wt[oo * c..(oo + 1) * c];
                    *a = wr.iter().zip(x).fold(*a, |s, (&p, &q)| s + p * q);
                }
            }
            acc
        });
        let values = rows.into_iter().flatten().collect();
        Ok(SparseMap::from_sorted_unchecked(
            self.output_extent(h),
            self.output_extent(w),
            o,
            out_cells,
            values,
        ))
    }

    /// Accumulates kernel (and bias) gradients and returns the gradient over
    /// the input active set. `grad` must share the forward output's active set.
    pub fn backward(&mut self, input: &SparseMap<T>, grad: &SparseMap<T>) -> Result<SparseMap<T>> {
        self.check_input(input)?;
        let (h, w) = input.grid();
        let out_cells = self.output_cells(input);
        if grad.coords() != out_cells.as_slice()
            || grad.grid() != (self.output_extent(h), self.output_extent(w))
            || grad.dim() != self.out_channels()
        {
            return Err(Error::ActiveSet(format!(
                "gradient map has {} cells over {:?}, forward output has {} cells",
                grad.len(),
                grad.grid(),
                out_cells.len()
            )));
        }
        let (o, c, k) = (self.out_channels(), self.in_channels(), self.kernel_size());
        let k2 = k * k;

        let mut rules = Vec::new();
        for (idx, &(i, j)) in out_cells.iter().enumerate() {
            self.rules_for_output(input, i, j, idx, &mut rules);
        }

        if self.use_bias {
            let gb = self.grad_bias.data_mut();
            for idx in 0..grad.len() {
                for (b, &g) in gb.iter_mut().zip(grad.embedding(idx)) {
                    *b = *b + g;
                }
            }
        }

        // kernel gradient: each tap owns an independent [o][c] block
        let mut by_tap: Vec<Vec<Rule>> = vec![Vec::new(); k2];
        for r in &rules {
            by_tap[r.tap].push(*r);
        }
        let tap_grads = par::map_range(k2, |t| {
            let mut gw = vec![T::zero(); o * c];
            for r in &by_tap[t] {
                let g = grad.embedding(r.out);
                let x = input.embedding(r.inp);
                for (oo, &go) in g.iter().enumerate() {
                    let row = &mut gw[oo * c..(oo + 1) * c];
                    for (dst, &xv) in row.iter_mut().zip(x) {
                        *dst = *dst + go * xv;
                    }
                }
            }
            gw
        });
        {
            let gk = self.grad_kernel.data_mut();
            for (t, gw) in tap_grads.iter().enumerate() {
                for oo in 0..o {
                    for cc in 0..c {
                        let at = (oo * c + cc) * k2 + t;
                        gk[at] = gk[at] + gw[oo * c + cc];
                    }
                }
            }
        }

        // input gradient, grouped per input cell in (out, tap) order
        let mut by_input: Vec<Vec<Rule>> = vec![Vec::new(); input.len()];
        for r in &rules {
            by_input[r.inp].push(*r);
        }
        let weights = self.tap_major_kernel();
        let rows = par::map_range(input.len(), |inp| {
            let mut gx = vec![T::zero(); c];
            for r in &by_input[inp] {
                let g = grad.embedding(r.out);
                let wt = &weights[r.tap * o * c..(r.tap + 1) * o * c];
                for (oo, &go) in g.iter().enumerate() {
                    let wr = &wt[oo * c..(oo + 1) * c];
                    for (dst, &wv) in gx.iter_mut().zip(wr) {
                        *dst = *dst + go * wv;
                    }
                }
            }
            gx
        });
        input.with_values(c, rows.into_iter().flatten().collect())
    }
}

impl<T: Scalar> Parameterized<T> for SparseConv<T> {
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = vec![ParamMut {
            name: "kernel".into(),
            value: &mut self.kernel,
            grad: &mut self.grad_kernel,
        }];
        if self.use_bias {
            v.push(ParamMut {
                name: "bias".into(),
                value: &mut self.bias,
                grad: &mut self.grad_bias,
            });
        }
        v
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = vec![ParamRef {
            name: "kernel".into(),
            value: &self.kernel,
            grad: &self.grad_kernel,
        }];
        if self.use_bias {
            v.push(ParamRef {
                name: "bias".into(),
                value: &self.bias,
                grad: &self.grad_bias,
            });
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    #[default]
    Avg,
}

/// Sparse max/average pooling. The window at output `(i, j)` spans input
/// offsets `0..window` from `(s·i, s·j)`; only active cells take part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparsePool {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl SparsePool {
    pub fn new(kind: PoolKind, window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::invalid("pooling window and stride must be positive"));
        }
        Ok(SparsePool { kind, window, stride })
    }

    pub fn output_extent(&self, n: usize) -> usize {
        (n - 1) / self.stride + 1
    }

    fn output_cells<T: Scalar>(&self, map: &SparseMap<T>) -> Vec<(usize, usize)> {
        let (h, w) = map.grid();
        let (oh, ow) = (self.output_extent(h), self.output_extent(w));
        let span = |p: usize, limit: usize| {
            let lo = (p + 1).saturating_sub(self.window).div_ceil(self.stride);
            let hi = (p / self.stride).min(limit - 1);
            lo..=hi
        };
        let mut cells = Vec::new();
        for &(r, c) in map.coords() {
            for i in span(r, oh) {
                for j in span(c, ow) {
                    cells.push((i, j));
                }
            }
        }
        cells.sort_unstable();
        cells.dedup();
        cells
    }

    /// Active input indices inside the window of output `(i, j)`, in
    /// row-major order.
    fn members<T: Scalar>(&self, map: &SparseMap<T>, i: usize, j: usize) -> Vec<usize> {
        let (h, w) = map.grid();
        let mut v = Vec::new();
        for dr in 0..self.window {
            let r = self.stride * i + dr;
            if r >= h {
                break;
            }
            for dc in 0..self.window {
                let c = self.stride * j + dc;
                if c >= w {
                    break;
                }
                if let Some(k) = map.find(r, c) {
                    v.push(k);
                }
            }
        }
        v
    }

    pub fn forward<T: Scalar>(&self, map: &SparseMap<T>) -> Result<SparseMap<T>> {
        if !map.is_coalesced() {
            return Err(Error::invalid("sparse pooling requires a coalesced map"));
        }
        let (h, w) = map.grid();
        let d = map.dim();
        let cells = self.output_cells(map);
        let rows = par::map_range(cells.len(), |idx| {
            let (i, j) = cells[idx];
            let members = self.members(map, i, j);
            match self.kind {
                PoolKind::Max => {
                    let mut acc = map.embedding(members[0]).to_vec();
                    for &k in &members[1..] {
                        for (a, &v) in acc.iter_mut().zip(map.embedding(k)) {
                            if v > *a {
                                *a = v;
                            }
                        }
                    }
                    acc
                }
                PoolKind::Avg => {
                    let mut acc = vec![T::zero(); d];
                    for &k in &members {
                        for (a, &v) in acc.iter_mut().zip(map.embedding(k)) {
                            *a = *a + v;
                        }
                    }
                    let n = T::lit(members.len() as f64);
                    acc.iter_mut().for_each(|a| *a = *a / n);
                    acc
                }
            }
        });
        Ok(SparseMap::from_sorted_unchecked(
            self.output_extent(h),
            self.output_extent(w),
            d,
            cells,
            rows.into_iter().flatten().collect(),
        ))
    }

    /// Gradient over the input active set. Max routes to the first maximal
    /// member; average spreads evenly over the active members.
    pub fn backward<T: Scalar>(&self, input: &SparseMap<T>, grad: &SparseMap<T>) -> Result<SparseMap<T>> {
        let cells = self.output_cells(input);
        if grad.coords() != cells.as_slice() || grad.dim() != input.dim() {
            return Err(Error::ActiveSet("pooling gradient does not match forward output".into()));
        }
        let d = input.dim();
        let mut gx = vec![T::zero(); input.len() * d];
        for (idx, &(i, j)) in cells.iter().enumerate() {
            let members = self.members(input, i, j);
            let g = grad.embedding(idx);
            match self.kind {
                PoolKind::Max => {
                    for ch in 0..d {
                        let mut best = members[0];
                        for &k in &members[1..] {
                            if input.embedding(k)[ch] > input.embedding(best)[ch] {
                                best = k;
                            }
                        }
                        gx[best * d + ch] = gx[best * d + ch] + g[ch];
                    }
                }
                PoolKind::Avg => {
                    let n = T::lit(members.len() as f64);
                    for &k in &members {
                        for ch in 0..d {
                            gx[k * d + ch] = gx[k * d + ch] + g[ch] / n;
                        }
                    }
                }
            }
        }
        input.with_values(d, gx)
    }
}

/// Region index of every row (or column) under adaptive partitioning of
/// `grid` into `out` bands `[floor(grid·i/out), floor(grid·(i+1)/out))`.
fn adaptive_bands(grid: usize, out: usize) -> Vec<usize> {
    let mut band = vec![0; grid];
    for i in 0..out {
        let (lo, hi) = (grid * i / out, grid * (i + 1) / out);
        band[lo..hi].iter_mut().for_each(|b| *b = i);
    }
    band
}

fn check_adaptive<T: Scalar>(map: &SparseMap<T>, out_h: usize, out_w: usize) -> Result<()> {
    if map.is_empty() {
        return Err(Error::invalid("adaptive pooling of a map with no active cells"));
    }
    let (h, w) = map.grid();
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::invalid(format!(
            "adaptive output {out_h}x{out_w} incompatible with grid {h}x{w}"
        )));
    }
    Ok(())
}

/// Pools active cells into a dense `[out_h, out_w, D]` tensor. Regions with
/// no active cell are zero.
pub fn adaptive_pool_to_dense<T: Scalar>(map: &SparseMap<T>, out_h: usize, out_w: usize, kind: PoolKind) -> Result<Tensor<T>> {
    check_adaptive(map, out_h, out_w)?;
    let (h, w) = map.grid();
    let (rb, cb) = (adaptive_bands(h, out_h), adaptive_bands(w, out_w));
    let d = map.dim();
    let mut out = vec![T::zero(); out_h * out_w * d];
    let mut counts = vec![0usize; out_h * out_w];
    for (k, &(r, c)) in map.coords().iter().enumerate() {
        let region = rb[r] * out_w + cb[c];
        let dst = &mut out[region * d..(region + 1) * d];
        let src = map.embedding(k);
        match kind {
            PoolKind::Avg => dst.iter_mut().zip(src).for_each(|(a, &v)| *a = *a + v),
            PoolKind::Max if counts[region] == 0 => dst.copy_from_slice(src),
            PoolKind::Max => dst.iter_mut().zip(src).for_each(|(a, &v)| {
                if v > *a {
                    *a = v
                }
            }),
        }
        counts[region] += 1;
    }
    if kind == PoolKind::Avg {
        for (region, &n) in counts.iter().enumerate() {
            if n > 1 {
                let n = T::lit(n as f64);
                out[region * d..(region + 1) * d].iter_mut().for_each(|v| *v = *v / n);
            }
        }
    }
    Tensor::from_vec(&[out_h, out_w, d], out)
}

/// Gradient of [`adaptive_pool_to_dense`] with respect to the map values.
pub fn adaptive_pool_backward<T: Scalar>(
    map: &SparseMap<T>,
    out_h: usize,
    out_w: usize,
    kind: PoolKind,
    grad: &Tensor<T>,
) -> Result<SparseMap<T>> {
    check_adaptive(map, out_h, out_w)?;
    let d = map.dim();
    if grad.shape() != [out_h, out_w, d] {
        return Err(Error::shape(format!(
            "adaptive pool gradient expected [{out_h}, {out_w}, {d}], got {:?}",
            grad.shape()
        )));
    }
    let (h, w) = map.grid();
    let (rb, cb) = (adaptive_bands(h, out_h), adaptive_bands(w, out_w));
    let region_of: Vec<usize> = map.coords().iter().map(|&(r, c)| rb[r] * out_w + cb[c]).collect();
    let mut gx = vec![T::zero(); map.len() * d];
    match kind {
        PoolKind::Avg => {
            let mut counts = vec![0usize; out_h * out_w];
            region_of.iter().for_each(|&g| counts[g] += 1);
            for (k, &region) in region_of.iter().enumerate() {
                let n = T::lit(counts[region] as f64);
                for ch in 0..d {
                    gx[k * d + ch] = grad.data()[region * d + ch] / n;
                }
            }
        }
        PoolKind::Max => {
            // first maximal cell per region and channel wins
            let mut best: Vec<Option<usize>> = vec![None; out_h * out_w * d];
            for (k, &region) in region_of.iter().enumerate() {
                for ch in 0..d {
                    let slot = &mut best[region * d + ch];
                    match *slot {
                        Some(b) if map.embedding(b)[ch] >= map.embedding(k)[ch] => {}
                        _ => *slot = Some(k),
                    }
                }
            }
            for (at, b) in best.iter().enumerate() {
                if let Some(k) = b {
                    let ch = at % d;
                    gx[k * d + ch] = gx[k * d + ch] + grad.data()[at];
                }
            }
        }
    }
    map.with_values(d, gx)
}
