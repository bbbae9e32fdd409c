//! Central finite-difference checks of every analytic backward pass, run in
//! `f64`.
//!
//! Layer checks project outputs onto a fixed random vector `r`, so the
//! scalar loss is `Σ r·y` and the upstream gradient is `r` itself.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::layers::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, softmax, softmax_backward, Activation,
    Conv2d, Linear, Parameterized,
};
use crate::mil_pooling::{
    pool_instance_level, pool_instance_level_backward, pool_lse, pool_lse_backward, pool_max, pool_max_backward,
    pool_mean, pool_mean_backward, AttentionPool, InstanceKind, LseParam,
};
use crate::model::{BagView, EmbedderConfig, Method, Mode, Model, ModelConfig};
use crate::rng::{prng, Prng};
use crate::sparse_cnn::{adaptive_pool_backward, adaptive_pool_to_dense, PoolKind, SparseConv, SparsePool};
use crate::sparse_map::{augment_with_assignment, build_map_with, AugmentSpec, CollisionRule, SparseMap};
use crate::tensor::Tensor;
use crate::training::cross_entropy_loss;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients near zero are
    /// judged on absolute error.
    pub floor: f64,
    /// Coordinates probed per tensor; larger tensors are subsampled.
    pub max_coords: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-5,
            max_coords: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(len: usize, max: usize, rng: &mut Prng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks `analytic` against central differences of `loss` around `x`.
pub fn check_input(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    loss: impl Fn(&[f64]) -> Result<f64>,
    opts: &GradcheckOptions,
    rng: &mut Prng,
) -> Result<GradcheckResult> {
    let mut x = x.to_vec();
    let mut worst = 0.0f64;
    let idx = coords(x.len(), opts.max_coords, rng);
    for &i in &idx {
        let orig = x[i];
        x[i] = orig + opts.step;
        let lp = loss(&x)?;
        x[i] = orig - opts.step;
        let lm = loss(&x)?;
        x[i] = orig;
        let num = (lp - lm) / (2.0 * opts.step);
        worst = worst.max(relative_error(analytic[i], num, opts.floor));
    }
    Ok(GradcheckResult {
        name: name.to_string(),
        checked: idx.len(),
        max_rel_error: worst,
        tolerance: opts.tolerance,
    })
}

fn set_param<M: Parameterized<f64>>(m: &mut M, p: usize, i: usize, v: f64) {
    m.params_mut()[p].value.data_mut()[i] = v;
}

/// Checks every parameter tensor of `model`. `backward` must accumulate
/// the gradient of `loss` into the model.
pub fn check_params<M: Parameterized<f64>>(
    prefix: &str,
    model: &mut M,
    loss: impl Fn(&M) -> Result<f64>,
    backward: impl FnOnce(&mut M) -> Result<()>,
    opts: &GradcheckOptions,
    rng: &mut Prng,
) -> Result<Vec<GradcheckResult>> {
    model.zero_grad();
    backward(model)?;
    let (names, analytic): (Vec<String>, Vec<Vec<f64>>) = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .unzip();
    let mut out = Vec::new();
    for (p, grads) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        let idx = coords(grads.len(), opts.max_coords, rng);
        for &i in &idx {
            let orig = model.params()[p].value.data()[i];
            set_param(model, p, i, orig + opts.step);
            let lp = loss(model)?;
            set_param(model, p, i, orig - opts.step);
            let lm = loss(model)?;
            set_param(model, p, i, orig);
            let num = (lp - lm) / (2.0 * opts.step);
            worst = worst.max(relative_error(grads[i], num, opts.floor));
        }
        out.push(GradcheckResult {
            name: format!("{prefix}.{}", names[p]),
            checked: idx.len(),
            max_rel_error: worst,
            tolerance: opts.tolerance,
        });
    }
    Ok(out)
}

fn uniform(n: usize, rng: &mut Prng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tensor(shape: &[usize], rng: &mut Prng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, uniform(n, rng)).expect("valid shape")
}

/// Sparse map on a `h × w` grid with `n` distinct random active cells.
fn random_map(h: usize, w: usize, n: usize, dim: usize, rng: &mut Prng) -> SparseMap<f64> {
    let mut cells: Vec<(usize, usize)> = sample(rng, h * w, n).into_iter().map(|i| (i / w, i % w)).collect();
    cells.sort_unstable();
    let values = uniform(n * dim, rng);
    SparseMap::from_entries(h, w, dim, cells, values).expect("valid map").coalesce()
}

fn linear_suite(opts: &GradcheckOptions, rng: &mut Prng) -> Result<Vec<GradcheckResult>> {
    let mut lin = Linear::<f64>::new(4, 3);
    lin.init(rng);
    lin.bias = tensor(&[3], rng);
    let x = tensor(&[2, 4], rng);
    let r = uniform(6, rng);
    let mut out = check_params(
        "linear",
        &mut lin,
        |l| Ok(dot(l.forward(&x)?.data(), &r)),
        |l| l.backward(&x, &Tensor::from_vec(&[2, 3], r.clone())?).map(|_| ()),
        opts,
        rng,
    )?;
    let gx = lin.clone().backward(&x, &Tensor::from_vec(&[2, 3], r.clone())?)?;
    out.push(check_input(
        "linear.input",
        x.data(),
        gx.data(),
        |v| Ok(dot(lin.forward(&Tensor::from_vec(&[2, 4], v.to_vec())?)?.data(), &r)),
        opts,
        rng,
    )?);
    Ok(out)
}

fn conv_suite(opts: &GradcheckOptions, rng: &mut Prng) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    for (stride, pad) in [(1, 1), (2, 0)] {
        let mut conv = Conv2d::<f64>::new(2, 3, 3, stride, pad)?;
        conv.init(rng);
        conv.bias = tensor(&[3], rng);
        let x = tensor(&[2, 2, 5, 5], rng);
        let y_shape = conv.forward(&x)?.shape().to_vec();
        let r = uniform(y_shape.iter().product(), rng);
        let g = Tensor::from_vec(&y_shape, r.clone())?;
        let label = format!("conv2d_s{stride}p{pad}");
        out.extend(check_params(
            &label,
            &mut conv,
            |c| Ok(dot(c.forward(&x)?.data(), &r)),
            |c| c.backward(&x, &g).map(|_| ()),
            opts,
            rng,
        )?);
        let gx = conv.clone().backward(&x, &g)?;
        out.push(check_input(
            &format!("{label}.input"),
            x.data(),
            gx.data(),
            |v| Ok(dot(conv.forward(&Tensor::from_vec(x.shape(), v.to_vec())?)?.data(), &r)),
            opts,
            rng,
        )?);
    }
    Ok(out)
}

fn activation_suite(opts: &GradcheckOptions, rng: &mut Prng) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    // keep inputs clear of the rectifier kink
    let xs: Vec<f64> = uniform(12, rng)
        .into_iter()
        .map(|v| if v.abs() < 0.1 { v + 0.2f64.copysign(v) } else { v })
        .map(|v| 2.0 * v)
        .collect();
    let x = Tensor::from_vec(&[3, 4], xs)?;
    let r = uniform(12, rng);
    let g = Tensor::from_vec(&[3, 4], r.clone())?;
    for act in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        let gx = act.backward(&x, &g)?;
        out.push(check_input(
            &format!("activation.{act:?}").to_lowercase(),
            x.data(),
            gx.data(),
            |v| Ok(dot(act.forward(&Tensor::from_vec(&[3, 4], v.to_vec())?).data(), &r)),
            opts,
            rng,
        )?);
    }
    let y = softmax(&x)?;
    let gx = softmax_backward(&y, &g)?;
    out.push(check_input(
        "softmax",
        x.data(),
        gx.data(),
        |v| Ok(dot(softmax(&Tensor::from_vec(&[3, 4], v.to_vec())?)?.data(), &r)),
        opts,
        rng,
    )?);

    let x = tensor(&[2, 3, 4, 4], rng);
    let pooled = maxpool2d(&x, 2)?;
    let r = uniform(pooled.output.len(), rng);
    let gx = maxpool2d_backward(x.shape(), &pooled.argmax, &Tensor::from_vec(pooled.output.shape(), r.clone())?)?;
    out.push(check_input(
        "maxpool2d",
        x.data(),
        gx.data(),
        |v| Ok(dot(maxpool2d(&Tensor::from_vec(x.shape(), v.to_vec())?, 2)?.output.data(), &r)),
        opts,
        rng,
    )?);
    let r = uniform(6, rng);
    let gx = global_avg_pool_backward(x.shape(), &Tensor::from_vec(&[2, 3], r.clone())?)?;
    out.push(check_input(
        "global_avg_pool",
        x.data(),
        gx.data(),
        |v| Ok(dot(global_avg_pool(&Tensor::from_vec(x.shape(), v.to_vec())?)?.data(), &r)),
        opts,
        rng,
    )?);
    Ok(out)
}

fn cross_entropy_suite(rng: &mut Prng) -> Result<Vec<GradcheckResult>> {
    // softmax + cross-entropy end to end on logits, at a tighter tolerance
    let opts = GradcheckOptions {
        tolerance: 1e-6,
        ..GradcheckOptions::default()
    };
    let logits = tensor(&[1, 5], rng);
    let label = 2;
    let loss = |v: &[f64]| -> Result<f64> {
        let p = softmax(&Tensor::from_vec(&[1, 5], v.to_vec())?)?;
        Ok(cross_entropy_loss(p.data(), label)?.0)
    };
    let p = softmax(&logits)?;
    let (_, gp) = cross_entropy_loss(p.data(), label)?;
    let gx = softmax_backward(&p, &Tensor::from_vec(&[1, 5], gp)?)?;
    Ok(vec![check_input("softmax_cross_entropy", logits.data(), gx.data(), loss, &opts, rng)?])
}

fn sparse_conv_suite(opts: &GradcheckOptions, rng: &mut Prng) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    for (half, stride) in [(1, 1), (1, 2), (2, 1), (0, 1)] {
        let mut conv = SparseConv::<f64>::new(3, 2, half, stride, true)?;
        conv.init(rng);
        conv.bias = tensor(&[2], rng);
        let map = random_map(7, 6, 10, 3, rng);
        let y = conv.forward(&map)?;
        let r = uniform(y.values().len(), rng);
        let g = y.with_values(2, r.clone())?;
        let label = format!("sparse_conv_f{half}s{stride}");
        out.extend(check_params(
            &label,
            &mut conv,
            |c| Ok(dot(c.forward(&map)?.values(), &r)),
            |c| c.backward(&map, &g).map(|_| ()),
            opts,
            rng,
        )?);
        let gx = conv.clone().backward(&map, &g)?;
        out.push(check_input(
            &format!("{label}.embeddings"),
            map.values(),
            gx.values(),
            |v| Ok(dot(conv.forward(&map.with_values(3, v.to_vec())?)?.values(), &r)),
            opts,
            rng,
        )?);
    }
    Ok(out)
}

fn sparse_pool_suite(opts: &GradcheckOptions, rng: &mut Prng) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    let map = random_map(7, 7, 14, 3, rng);
    for kind in [PoolKind::Avg, PoolKind::Max] {
        for (window, stride) in [(2, 2), (3, 2)] {
            let pool = SparsePool::new(kind, window, stride)?;
            let y = pool.forward(&map)?;
            let r = uniform(y.values().len(), rng);
            let gx = pool.backward(&map, &y.with_values(3, r.clone())?)?;
            out.push(check_input(
                &format!("sparse_pool_{kind:?}_w{window}s{stride}").to_lowercase(),
                map.values(),
                gx.values(),
                |v| Ok(dot(pool.forward(&map.with_values(3, v.to_vec())?)?.values(), &r)),
                opts,
                rng,
            )?);
        }
        let r = uniform(2 * 2 * 3, rng);
        let gx = adaptive_pool_backward(&map, 2, 2, kind, &Tensor::from_vec(&[2, 2, 3], r.clone())?)?;
        out.push(check_input(
            &format!("adaptive_pool_{kind:?}").to_lowercase(),
            map.values(),
            gx.values(),
            |v| Ok(dot(adaptive_pool_to_dense(&map.with_values(3, v.to_vec())?, 2, 2, kind)?.data(), &r)),
            opts,
            rng,
        )?);
    }
    Ok(out)
}

fn map_suite(opts: &GradcheckOptions, rng: &mut Prng) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    let locs = [(0, 0), (3, 2), (1, 1), (30, 17), (12, 30), (31, 31)];
    let emb = tensor(&[6, 3], rng);
    for rule in [CollisionRule::Sum, CollisionRule::Mean] {
        let (map, assign) = build_map_with(&locs, &emb, 4, 32, 32, rule)?;
        let r = uniform(map.values().len(), rng);
        let gx = assign.pull_back(3, &r);
        out.push(check_input(
            &format!("build_map_{rule:?}").to_lowercase(),
            emb.data(),
            &gx,
            |v| {
                let e = Tensor::from_vec(&[6, 3], v.to_vec())?;
                Ok(dot(build_map_with(&locs, &e, 4, 32, 32, rule)?.0.values(), &r))
            },
            opts,
            rng,
        )?);
    }
    let map = random_map(8, 8, 12, 2, rng);
    let spec = AugmentSpec {
        flip_h: true,
        flip_v: false,
        rot90_quarter_turns: 1,
        jitter_radius: 2,
        prng_seed: 5,
    };
    let (y, a) = augment_with_assignment(&map, &spec)?;
    let r = uniform(y.values().len(), rng);
    let gx = a.pull_back(2, &r);
    out.push(check_input(
        "augment",
        map.values(),
        &gx,
        |v| Ok(dot(augment_with_assignment(&map.with_values(2, v.to_vec())?, &spec)?.0.values(), &r)),
        opts,
        rng,
    )?);
    Ok(out)
}

fn mil_suite(opts: &GradcheckOptions, rng: &mut Prng) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    let (k, d) = (5, 4);
    let x = tensor(&[k, d], rng);
    let r = uniform(d, rng);
    let reshape = |v: &[f64]| Tensor::from_vec(&[k, d], v.to_vec());

    let gx = pool_mean_backward(&x, &r)?;
    out.push(check_input("mil_mean", x.data(), gx.data(), |v| Ok(dot(&pool_mean(&reshape(v)?)?, &r)), opts, rng)?);
    let (_, arg) = pool_max(&x)?;
    let gx = pool_max_backward(&x, &arg, &r)?;
    out.push(check_input("mil_max", x.data(), gx.data(), |v| Ok(dot(&pool_max(&reshape(v)?)?.0, &r)), opts, rng)?);
    for m in [1.0, 5.0] {
        let p = LseParam::new(m)?;
        let gx = pool_lse_backward(&x, p, &r)?;
        out.push(check_input(
            &format!("mil_lse_m{m}"),
            x.data(),
            gx.data(),
            |v| Ok(dot(&pool_lse(&reshape(v)?, p)?, &r)),
            opts,
            rng,
        )?);
    }
    for gated in [false, true] {
        let label = if gated { "mil_gated_attention" } else { "mil_attention" };
        let mut att = AttentionPool::<f64>::new(d, 3, gated);
        att.init(rng);
        out.extend(check_params(
            label,
            &mut att,
            |a| Ok(dot(&a.forward(&x)?.0, &r)),
            |a| {
                let (_, cache) = a.forward(&x)?;
                a.backward(&x, &cache, &r).map(|_| ())
            },
            opts,
            rng,
        )?);
        let (_, cache) = att.forward(&x)?;
        let gx = att.clone().backward(&x, &cache, &r)?;
        out.push(check_input(
            &format!("{label}.embeddings"),
            x.data(),
            gx.data(),
            |v| Ok(dot(&att.forward(&reshape(v)?)?.0, &r)),
            opts,
            rng,
        )?);
    }

    // instance level, through the per-instance softmax
    let c = 3;
    let logits = tensor(&[k, c], rng);
    let r = uniform(c, rng);
    for kind in [InstanceKind::Mean, InstanceKind::Max, InstanceKind::Lse(LseParam::new(2.0)?)] {
        let scores = softmax(&logits)?;
        let gs = pool_instance_level_backward(&scores, kind, &r)?;
        let gl = softmax_backward(&scores, &gs)?;
        let name = match kind {
            InstanceKind::Mean => "mil_instance_mean",
            InstanceKind::Max => "mil_instance_max",
            InstanceKind::Lse(_) => "mil_instance_lse",
        };
        out.push(check_input(
            name,
            logits.data(),
            gl.data(),
            |v| {
                let s = softmax(&Tensor::from_vec(&[k, c], v.to_vec())?)?;
                Ok(dot(&pool_instance_level(&s, kind)?, &r))
            },
            opts,
            rng,
        )?);
    }
    Ok(out)
}

/// Tiny end-to-end configuration: D=4, 2 classes.
pub fn tiny_model_config(method: Method) -> ModelConfig {
    ModelConfig {
        method,
        n_classes: 2,
        n_tiles: 3,
        downsampling: 4,
        sparse_conv_channels: vec![3, 3],
        attention_l: 3,
        lse_m: 2.0,
        embedder: EmbedderConfig {
            patch_channels: 2,
            patch_h: 8,
            patch_w: 8,
            conv_widths: vec![2, 3],
            embedding_dim: 4,
        },
        ..ModelConfig::default()
    }
}

fn end_to_end_suite(rng: &mut Prng) -> Result<Vec<GradcheckResult>> {
    let opts = GradcheckOptions {
        tolerance: 1e-3,
        max_coords: 12,
        ..GradcheckOptions::default()
    };
    let patches = tensor(&[3, 2, 8, 8], rng);
    let locs = [(1, 2), (6, 6), (13, 4)];
    let mut out = Vec::new();
    let mut variants: Vec<(String, ModelConfig, bool)> = Method::ALL
        .iter()
        .map(|&m| (format!("end_to_end.{m}"), tiny_model_config(m), false))
        .collect();
    let mut aug = tiny_model_config(Method::SparseConvMil);
    aug.n_aug = 2;
    aug.augment.jitter_radius = 1;
    aug.global_pool = PoolKind::Max;
    variants.push(("end_to_end.sparseconvmil_augmented".into(), aug, true));
    for (label, cfg, train) in variants {
        let mut model = Model::<f64>::init_new(&cfg, rng)?;
        let aug_seed: u64 = rng.random();
        let bag = BagView {
            patches: &patches,
            locations: &locs,
            full_h: 16,
            full_w: 16,
        };
        let run = |m: &Model<f64>| -> Result<(f64, Vec<Vec<f64>>, crate::model::ForwardCache<f64>)> {
            let mut arng = prng(aug_seed);
            let mode = if train { Mode::Train(&mut arng) } else { Mode::Eval };
            let o = m.forward(&bag, mode)?;
            let n = o.probs.len() as f64;
            let mut loss = 0.0;
            let mut grads = Vec::new();
            for p in &o.probs {
                let (l, g) = cross_entropy_loss(p, 1)?;
                loss += l / n;
                grads.push(g.into_iter().map(|v| v / n).collect());
            }
            Ok((loss, grads, o.cache))
        };
        out.extend(check_params(
            &label,
            &mut model,
            |m| Ok(run(m)?.0),
            |m| {
                let (_, g, cache) = run(m)?;
                m.backward(cache, &g)
            },
            &opts,
            rng,
        )?);
    }
    Ok(out)
}

/// Runs every suite and returns one result per checked tensor.
pub fn run_all(seed: u64) -> Result<Vec<GradcheckResult>> {
    let opts = GradcheckOptions::default();
    let mut rng = prng(seed);
    let mut out = Vec::new();
    out.extend(linear_suite(&opts, &mut rng)?);
    out.extend(conv_suite(&opts, &mut rng)?);
    out.extend(activation_suite(&opts, &mut rng)?);
    out.extend(cross_entropy_suite(&mut rng)?);
    out.extend(sparse_conv_suite(&opts, &mut rng)?);
    out.extend(sparse_pool_suite(&opts, &mut rng)?);
    out.extend(map_suite(&opts, &mut rng)?);
    out.extend(mil_suite(&opts, &mut rng)?);
    out.extend(end_to_end_suite(&mut rng)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-5), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-5) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-5) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = prng(0);
        let r = check_input("bad", &[1.0, 2.0], &[2.0, 4.1], |v| Ok(v[0] * v[0] + v[1] * v[1]), &GradcheckOptions::default(), &mut rng)
            .unwrap();
        assert!(!r.passed());
    }
}
