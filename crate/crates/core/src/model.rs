//! End-to-end MIL pipelines: a shared patch embedder, a pooling stage, and a
//! linear classifier with softmax.
//!
//! SparseConvMIL places embeddings on a sparse grid and runs a sparse CNN
//! over it; the baselines pool embeddings (or per-instance probabilities)
//! with permutation-invariant operators and ignore locations entirely.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, prefixed, prefixed_ref, softmax,
    softmax_backward, Activation, Conv2d, Linear, ParamMut, ParamRef, Parameterized,
};
use crate::mil_pooling::{
    pool_instance_level, pool_instance_level_backward, pool_max, pool_max_backward, pool_mean, pool_mean_backward,
    AttentionCache, AttentionPool, InstanceKind, LseParam,
};
use crate::rng::Prng;
use crate::sparse_cnn::{adaptive_pool_backward, adaptive_pool_to_dense, PoolKind, SparseConv};
use crate::sparse_map::{augment_with_assignment, build_map_with, AugmentSpec, CellAssignment, CollisionRule, SparseMap};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "sparseconvmil")]
    SparseConvMil,
    EmbMean,
    EmbMax,
    Attention,
    GatedAttention,
    InstMean,
    InstMax,
    InstLse,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::SparseConvMil,
        Method::EmbMean,
        Method::EmbMax,
        Method::Attention,
        Method::GatedAttention,
        Method::InstMean,
        Method::InstMax,
        Method::InstLse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SparseConvMil => "sparseconvmil",
            Method::EmbMean => "emb_mean",
            Method::EmbMax => "emb_max",
            Method::Attention => "attention",
            Method::GatedAttention => "gated_attention",
            Method::InstMean => "inst_mean",
            Method::InstMax => "inst_max",
            Method::InstLse => "inst_lse",
        }
    }

    pub fn is_instance_level(self) -> bool {
        matches!(self, Method::InstMean | Method::InstMax | Method::InstLse)
    }

    pub fn uses_locations(self) -> bool {
        self == Method::SparseConvMil
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Small CNN patch embedder: `[conv3×3 → relu → maxpool2]` per width, then
/// global average pooling and a linear projection to `embedding_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub patch_channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub conv_widths: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            patch_channels: 3,
            patch_h: 8,
            patch_w: 8,
            conv_widths: vec![8, 16],
            embedding_dim: 64,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.patch_channels == 0 {
            return Err(Error::Config("embedding_dim and patch_channels must be positive".into()));
        }
        if self.patch_h < 8 || self.patch_w < 8 {
            return Err(Error::Config(format!(
                "patches must be at least 8x8, got {}x{}",
                self.patch_h, self.patch_w
            )));
        }
        if self.conv_widths.contains(&0) {
            return Err(Error::Config("conv_widths entries must be positive".into()));
        }
        let div = 1usize << self.conv_widths.len();
        if !self.patch_h.is_multiple_of(div) || !self.patch_w.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "patch {}x{} not divisible by {div} for {} pooling stages",
                self.patch_h,
                self.patch_w,
                self.conv_widths.len()
            )));
        }
        Ok(())
    }
}

fn default_augment() -> AugmentSpec {
    AugmentSpec {
        flip_h: true,
        flip_v: true,
        rot90_quarter_turns: 3,
        jitter_radius: 0,
        prng_seed: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub method: Method,
    pub n_classes: usize,
    /// Tiles sampled per bag (all tiles when the bag holds fewer).
    pub n_tiles: usize,
    pub downsampling: usize,
    pub sparse_conv_channels: Vec<usize>,
    /// Half-size `f` of the sparse kernels (`2f+1` wide).
    pub sparse_kernel_half: usize,
    pub sparse_conv_bias: bool,
    pub global_pool: PoolKind,
    pub collision: CollisionRule,
    pub lse_m: f64,
    pub attention_l: usize,
    /// Augmented sparse maps per bag during training.
    pub n_aug: usize,
    /// Template for training-time augmentation: flips are taken with
    /// probability 1/2 when enabled, rotations are uniform in
    /// `0..=rot90_quarter_turns`, jitter uses the given radius.
    pub augment: AugmentSpec,
    pub embedder: EmbedderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            method: Method::SparseConvMil,
            n_classes: 2,
            n_tiles: 200,
            downsampling: 128,
            sparse_conv_channels: vec![32, 32],
            sparse_kernel_half: 1,
            sparse_conv_bias: true,
            global_pool: PoolKind::Avg,
            collision: CollisionRule::Sum,
            lse_m: 1.0,
            attention_l: 128,
            n_aug: 1,
            augment: default_augment(),
            embedder: EmbedderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if self.n_tiles == 0 {
            return Err(Error::Config("n_tiles must be positive".into()));
        }
        if self.n_aug == 0 {
            return Err(Error::Config("n_aug must be positive".into()));
        }
        match self.method {
            Method::SparseConvMil => {
                if self.downsampling == 0 {
                    return Err(Error::Config("downsampling must be positive".into()));
                }
                if self.sparse_conv_channels.is_empty() || self.sparse_conv_channels.contains(&0) {
                    return Err(Error::Config("sparse_conv_channels must be non-empty and positive".into()));
                }
                if self.augment.rot90_quarter_turns > 3 {
                    return Err(Error::Config("augment.rot90_quarter_turns must be in 0..=3".into()));
                }
            }
            Method::Attention | Method::GatedAttention if self.attention_l == 0 => {
                return Err(Error::Config("attention_l must be positive".into()));
            }
            Method::InstLse => {
                LseParam::new(self.lse_m).map_err(|e| Error::Config(e.to_string()))?;
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Embedder<T> {
    pub convs: Vec<Conv2d<T>>,
    pub proj: Linear<T>,
    config: EmbedderConfig,
}

#[derive(Debug, Clone)]
pub struct EmbedderCache<T> {
    /// Input to each conv stage.
    inputs: Vec<Tensor<T>>,
    /// Conv outputs before rectification.
    pre_acts: Vec<Tensor<T>>,
    argmax: Vec<Vec<usize>>,
    /// Final pooled feature map fed to global average pooling.
    last: Tensor<T>,
    gap: Tensor<T>,
}

impl<T: Scalar> Embedder<T> {
    pub fn new(config: &EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut c = config.patch_channels;
        for &w in &config.conv_widths {
            convs.push(Conv2d::new(c, w, 3, 1, 1)?);
            c = w;
        }
        Ok(Embedder {
            convs,
            proj: Linear::new(c, config.embedding_dim),
            config: config.clone(),
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.convs.iter_mut().for_each(|c| c.init(rng));
        self.proj.init(rng);
    }

    pub fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Embeds `[K, c, h, w]` patches into `[K, D]`. Row `k` depends only on
    /// patch `k`.
    pub fn forward(&self, patches: &Tensor<T>) -> Result<(Tensor<T>, EmbedderCache<T>)> {
        let cfg = &self.config;
        if patches.ndim() != 4 || patches.shape()[1..] != [cfg.patch_channels, cfg.patch_h, cfg.patch_w] {
            return Err(Error::shape(format!(
                "patches must be [K, {}, {}, {}], got {:?}",
                cfg.patch_channels,
                cfg.patch_h,
                cfg.patch_w,
                patches.shape()
            )));
        }
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre_acts = Vec::with_capacity(self.convs.len());
        let mut argmax = Vec::with_capacity(self.convs.len());
        let mut x = patches.clone();
        for conv in &self.convs {
            let pre = conv.forward(&x)?;
            let act = Activation::Relu.forward(&pre);
            let pooled = maxpool2d(&act, 2)?;
            inputs.push(x);
            pre_acts.push(pre);
            argmax.push(pooled.argmax);
            x = pooled.output;
        }
        let gap = global_avg_pool(&x)?;
        let emb = self.proj.forward(&gap)?;
        Ok((
            emb,
            EmbedderCache {
                inputs,
                pre_acts,
                argmax,
                last: x,
                gap,
            },
        ))
    }

    pub fn backward(&mut self, cache: &EmbedderCache<T>, grad: &Tensor<T>) -> Result<()> {
        let g_gap = self.proj.backward(&cache.gap, grad)?;
        let mut g = global_avg_pool_backward(cache.last.shape(), &g_gap)?;
        for (i, conv) in self.convs.iter_mut().enumerate().rev() {
            let pre = &cache.pre_acts[i];
            let g_act = maxpool2d_backward(pre.shape(), &cache.argmax[i], &g)?;
            let g_pre = Activation::Relu.backward(pre, &g_act)?;
            g = conv.backward(&cache.inputs[i], &g_pre)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for Embedder<T> {
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            v.extend(prefixed(&format!("conv{i}"), c.params_mut()));
        }
        v.extend(prefixed("proj", self.proj.params_mut()));
        v
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.extend(prefixed_ref(&format!("conv{i}"), c.params()));
        }
        v.extend(prefixed_ref("proj", self.proj.params()));
        v
    }
}

#[derive(Debug, Clone)]
pub enum PoolingStage<T> {
    Sparse(Vec<SparseConv<T>>),
    Attention(AttentionPool<T>),
    /// Mean, max, and the instance-level poolings carry no parameters.
    Fixed,
}

impl<T: Scalar> Parameterized<T> for PoolingStage<T> {
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        match self {
            PoolingStage::Sparse(convs) => convs
                .iter_mut()
                .enumerate()
                .flat_map(|(i, c)| prefixed(&format!("conv{i}"), c.params_mut()))
                .collect(),
            PoolingStage::Attention(a) => prefixed("attention", a.params_mut()),
            PoolingStage::Fixed => Vec::new(),
        }
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        match self {
            PoolingStage::Sparse(convs) => convs
                .iter()
                .enumerate()
                .flat_map(|(i, c)| prefixed_ref(&format!("conv{i}"), c.params()))
                .collect(),
            PoolingStage::Attention(a) => prefixed_ref("attention", a.params()),
            PoolingStage::Fixed => Vec::new(),
        }
    }
}

/// One bag as seen by the model: patches `[K, c, h, w]` with their
/// full-resolution locations on a `full_h × full_w` slide.
#[derive(Debug, Clone, Copy)]
pub struct BagView<'a, T> {
    pub patches: &'a Tensor<T>,
    pub locations: &'a [(usize, usize)],
    pub full_h: usize,
    pub full_w: usize,
}

/// Forward mode. Training enables spatial augmentation (drawn from `rng`)
/// and produces `n_aug` views per bag.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Prng),
}

#[derive(Debug, Clone)]
struct SparseView<T> {
    aug: Option<CellAssignment>,
    /// Input map of each conv layer.
    inputs: Vec<SparseMap<T>>,
    pre_acts: Vec<SparseMap<T>>,
    last: SparseMap<T>,
    pooled: Tensor<T>,
    probs: Tensor<T>,
}

#[derive(Debug, Clone)]
enum PoolCache<T> {
    Sparse {
        assign: CellAssignment,
        dim: usize,
        views: Vec<SparseView<T>>,
    },
    Mean {
        pooled: Tensor<T>,
        probs: Tensor<T>,
    },
    Max {
        argmax: Vec<usize>,
        pooled: Tensor<T>,
        probs: Tensor<T>,
    },
    Attention {
        cache: AttentionCache<T>,
        pooled: Tensor<T>,
        probs: Tensor<T>,
    },
    Instance {
        kind: InstanceKind,
        scores: Tensor<T>,
    },
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    method: Method,
    embeddings: Tensor<T>,
    embedder: EmbedderCache<T>,
    pool: PoolCache<T>,
}

impl<T> ForwardCache<T> {
    pub fn method(&self) -> Method {
        self.method
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }
}

/// Class probabilities, one vector per view (a single view outside of
/// augmented training).
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub probs: Vec<Vec<T>>,
    /// Attention weights over instances, for attention methods.
    pub attention: Option<Vec<T>>,
    pub cache: ForwardCache<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub embedder: Embedder<T>,
    pub pooling: PoolingStage<T>,
    pub classifier: Linear<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds a zero-initialised model; see [`Model::init`].
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let embedder = Embedder::new(&config.embedder)?;
        let d = embedder.dim();
        let (pooling, head_in) = match config.method {
            Method::SparseConvMil => {
                let mut convs = Vec::new();
                let mut c = d;
                for &o in &config.sparse_conv_channels {
                    convs.push(SparseConv::new(c, o, config.sparse_kernel_half, 1, config.sparse_conv_bias)?);
                    c = o;
                }
                (PoolingStage::Sparse(convs), c)
            }
            Method::Attention | Method::GatedAttention => (
                PoolingStage::Attention(AttentionPool::new(
                    d,
                    config.attention_l,
                    config.method == Method::GatedAttention,
                )),
                d,
            ),
            _ => (PoolingStage::Fixed, d),
        };
        Ok(Model {
            config: config.clone(),
            embedder,
            pooling,
            classifier: Linear::new(head_in, config.n_classes),
        })
    }

    /// Builds and randomly initialises a model.
    pub fn init_new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut m = Model::new(config)?;
        m.init(rng);
        Ok(m)
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.embedder.init(rng);
        match &mut self.pooling {
            PoolingStage::Sparse(convs) => convs.iter_mut().for_each(|c| c.init(rng)),
            PoolingStage::Attention(a) => a.init(rng),
            PoolingStage::Fixed => {}
        }
        self.classifier.init(rng);
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    /// Trainable parameters of the pooling stage alone.
    pub fn pooling_param_count(&self) -> usize {
        self.pooling.num_params()
    }

    pub fn embed(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.embedder.forward(patches)?.0)
    }

    pub fn forward(&self, bag: &BagView<'_, T>, mode: Mode<'_>) -> Result<ForwardOutput<T>> {
        let k = bag.patches.shape().first().copied().unwrap_or(0);
        if k == 0 || bag.locations.len() != k {
            return Err(Error::invalid(format!(
                "bag has {k} patches and {} locations",
                bag.locations.len()
            )));
        }
        let (embeddings, embedder) = self.embedder.forward(bag.patches)?;
        let (probs, attention, pool) = match self.config.method {
            Method::SparseConvMil => self.forward_sparse(bag, &embeddings, mode)?,
            _ => self.forward_baseline(&embeddings)?,
        };
        for p in &probs {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("model forward"));
            }
        }
        Ok(ForwardOutput {
            probs,
            attention,
            cache: ForwardCache {
                method: self.config.method,
                embeddings,
                embedder,
                pool,
            },
        })
    }

    fn sparse_convs(&self) -> &[SparseConv<T>] {
        match &self.pooling {
            PoolingStage::Sparse(c) => c,
            _ => unreachable!("sparse pooling stage for sparseconvmil"),
        }
    }

    fn concrete_augment(&self, rng: &mut Prng, grid: (usize, usize)) -> AugmentSpec {
        let t = &self.config.augment;
        let flip_h = t.flip_h && rng.random_bool(0.5);
        let flip_v = t.flip_v && rng.random_bool(0.5);
        let rot90_quarter_turns = if t.rot90_quarter_turns > 0 {
            rng.random_range(0..=t.rot90_quarter_turns)
        } else {
            0
        };
        let max_jitter = (grid.0.min(grid.1).saturating_sub(1)) / 2;
        AugmentSpec {
            flip_h,
            flip_v,
            rot90_quarter_turns,
            jitter_radius: t.jitter_radius.min(max_jitter),
            prng_seed: rng.random(),
        }
    }

    #[allow(clippy::type_complexity)]
    fn forward_sparse(
        &self,
        bag: &BagView<'_, T>,
        embeddings: &Tensor<T>,
        mut mode: Mode<'_>,
    ) -> Result<(Vec<Vec<T>>, Option<Vec<T>>, PoolCache<T>)> {
        let cfg = &self.config;
        let (base, assign) = build_map_with(
            bag.locations,
            embeddings,
            cfg.downsampling,
            bag.full_h,
            bag.full_w,
            cfg.collision,
        )?;
        let n_views = match mode {
            Mode::Eval => 1,
            Mode::Train(_) => cfg.n_aug,
        };
        let mut views = Vec::with_capacity(n_views);
        let mut probs = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            let (map, aug) = match &mut mode {
                Mode::Train(rng) => {
                    let spec = self.concrete_augment(rng, base.grid());
                    if spec.is_identity() {
                        (base.clone(), None)
                    } else {
                        let (m, a) = augment_with_assignment(&base, &spec)?;
                        (m, Some(a))
                    }
                }
                Mode::Eval => (base.clone(), None),
            };
            let view = self.sparse_head(map, aug)?;
            probs.push(view.probs.data().to_vec());
            views.push(view);
        }
        Ok((
            probs,
            None,
            PoolCache::Sparse {
                assign,
                dim: embeddings.dim(1),
                views,
            },
        ))
    }

    fn sparse_head(&self, map: SparseMap<T>, aug: Option<CellAssignment>) -> Result<SparseView<T>> {
        let mut inputs = Vec::new();
        let mut pre_acts = Vec::new();
        let mut x = map;
        for conv in self.sparse_convs() {
            let pre = conv.forward(&x)?;
            let mut act = pre.clone();
            act.values_mut().iter_mut().for_each(|v| *v = Activation::Relu.apply(*v));
            inputs.push(x);
            pre_acts.push(pre);
            x = act;
        }
        let pooled = adaptive_pool_to_dense(&x, 1, 1, self.config.global_pool)?;
        let width = pooled.len();
        let pooled = pooled.reshape(&[1, width])?;
        let probs = softmax(&self.classifier.forward(&pooled)?)?;
        Ok(SparseView {
            aug,
            inputs,
            pre_acts,
            last: x,
            pooled,
            probs,
        })
    }

    #[allow(clippy::type_complexity)]
    fn forward_baseline(&self, embeddings: &Tensor<T>) -> Result<(Vec<Vec<T>>, Option<Vec<T>>, PoolCache<T>)> {
        let d = embeddings.dim(1);
        let classify = |pooled: Vec<T>| -> Result<(Tensor<T>, Tensor<T>)> {
            let pooled = Tensor::from_vec(&[1, d], pooled)?;
            let probs = softmax(&self.classifier.forward(&pooled)?)?;
            Ok((pooled, probs))
        };
        let out = match self.config.method {
            Method::EmbMean => {
                let (pooled, probs) = classify(pool_mean(embeddings)?)?;
                (vec![probs.data().to_vec()], None, PoolCache::Mean { pooled, probs })
            }
            Method::EmbMax => {
                let (v, argmax) = pool_max(embeddings)?;
                let (pooled, probs) = classify(v)?;
                (vec![probs.data().to_vec()], None, PoolCache::Max { argmax, pooled, probs })
            }
            Method::Attention | Method::GatedAttention => {
                let PoolingStage::Attention(att) = &self.pooling else {
                    unreachable!("attention stage for attention methods")
                };
                let (v, cache) = att.forward(embeddings)?;
                let (pooled, probs) = classify(v)?;
                let weights = cache.weights.clone();
                (
                    vec![probs.data().to_vec()],
                    Some(weights),
                    PoolCache::Attention { cache, pooled, probs },
                )
            }
            Method::InstMean | Method::InstMax | Method::InstLse => {
                let kind = match self.config.method {
                    Method::InstMean => InstanceKind::Mean,
                    Method::InstMax => InstanceKind::Max,
                    _ => InstanceKind::Lse(LseParam::new(self.config.lse_m)?),
                };
                let scores = softmax(&self.classifier.forward(embeddings)?)?;
                let probs = pool_instance_level(&scores, kind)?;
                (vec![probs], None, PoolCache::Instance { kind, scores })
            }
            Method::SparseConvMil => unreachable!("handled by forward_sparse"),
        };
        Ok(out)
    }

    /// Accumulates parameter gradients given `∂L/∂probs` for every view.
    pub fn backward(&mut self, cache: ForwardCache<T>, grad_probs: &[Vec<T>]) -> Result<()> {
        if cache.method != self.config.method {
            return Err(Error::StaleCache(format!(
                "cache from {} used with a {} model",
                cache.method, self.config.method
            )));
        }
        let (k, d) = (cache.embeddings.dim(0), cache.embeddings.dim(1));
        let c = self.config.n_classes;
        if grad_probs.iter().any(|g| g.len() != c) {
            return Err(Error::shape("probability gradient has the wrong class count"));
        }
        let grad_emb = match &cache.pool {
            PoolCache::Sparse { assign, dim, views } => {
                if views.len() != grad_probs.len() {
                    return Err(Error::StaleCache(format!(
                        "{} view gradients for {} views",
                        grad_probs.len(),
                        views.len()
                    )));
                }
                let base_cells = assign.counts.len();
                let mut g_base = vec![T::zero(); base_cells * dim];
                for (view, g) in views.iter().zip(grad_probs) {
                    let g_cells = self.sparse_head_backward(view, g)?;
                    let g_view = match &view.aug {
                        Some(a) => a.pull_back(*dim, g_cells.values()),
                        None => g_cells.values().to_vec(),
                    };
                    for (acc, v) in g_base.iter_mut().zip(g_view) {
                        *acc = *acc + v;
                    }
                }
                Tensor::from_vec(&[k, d], assign.pull_back(*dim, &g_base))?
            }
            PoolCache::Mean { pooled, probs } => {
                let g = self.head_backward(pooled, probs, &grad_probs[0])?;
                pool_mean_backward(&cache.embeddings, &g)?
            }
            PoolCache::Max { argmax, pooled, probs } => {
                let g = self.head_backward(pooled, probs, &grad_probs[0])?;
                pool_max_backward(&cache.embeddings, argmax, &g)?
            }
            PoolCache::Attention { cache: ac, pooled, probs } => {
                let g = self.head_backward(pooled, probs, &grad_probs[0])?;
                let PoolingStage::Attention(att) = &mut self.pooling else {
                    return Err(Error::StaleCache("attention cache without attention stage".into()));
                };
                att.backward(&cache.embeddings, ac, &g)?
            }
            PoolCache::Instance { kind, scores } => {
                let g_scores = pool_instance_level_backward(scores, *kind, &grad_probs[0])?;
                let g_logits = softmax_backward(scores, &g_scores)?;
                self.classifier.backward(&cache.embeddings, &g_logits)?
            }
        };
        self.embedder.backward(&cache.embedder, &grad_emb)
    }

    /// Through softmax and classifier; returns `∂L/∂pooled` as a vector.
    fn head_backward(&mut self, pooled: &Tensor<T>, probs: &Tensor<T>, grad: &[T]) -> Result<Vec<T>> {
        let g = Tensor::from_vec(probs.shape(), grad.to_vec())?;
        let g_logits = softmax_backward(probs, &g)?;
        Ok(self.classifier.backward(pooled, &g_logits)?.into_data())
    }

    fn sparse_head_backward(&mut self, view: &SparseView<T>, grad: &[T]) -> Result<SparseMap<T>> {
        let g_pooled = self.head_backward(&view.pooled, &view.probs, grad)?;
        let width = g_pooled.len();
        let g_pooled = Tensor::from_vec(&[1, 1, width], g_pooled)?;
        let mut g = adaptive_pool_backward(&view.last, 1, 1, self.config.global_pool, &g_pooled)?;
        let PoolingStage::Sparse(convs) = &mut self.pooling else {
            return Err(Error::StaleCache("sparse cache without sparse stage".into()));
        };
        for (i, conv) in convs.iter_mut().enumerate().rev() {
            let pre = &view.pre_acts[i];
            let vals = pre
                .values()
                .iter()
                .zip(g.values())
                .map(|(&p, &gv)| gv * Activation::Relu.derivative(p))
                .collect();
            let g_pre = pre.with_values(pre.dim(), vals)?;
            g = conv.backward(&view.inputs[i], &g_pre)?;
        }
        Ok(g)
    }
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = prefixed("embedder", self.embedder.params_mut());
        v.extend(prefixed("pool", self.pooling.params_mut()));
        v.extend(prefixed("classifier", self.classifier.params_mut()));
        v
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = prefixed_ref("embedder", self.embedder.params());
        v.extend(prefixed_ref("pool", self.pooling.params()));
        v.extend(prefixed_ref("classifier", self.classifier.params()));
        v
    }
}
