use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use sparseconvmil::model::{BagView, Method, Mode, Model, ModelConfig};
use sparseconvmil::rng::prng;
use sparseconvmil::sparse_cnn::SparseConv;
use sparseconvmil::sparse_map::{build_map, SparseMap};
use sparseconvmil::Tensor;

fn random_map(side: usize, n: usize, dim: usize) -> SparseMap<f32> {
    let mut rng = prng(7);
    let locs: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..side), rng.random_range(0..side))).collect();
    let emb = Tensor::from_vec(&[n, dim], (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    build_map(&locs, &emb, 1, side, side).unwrap()
}

fn model_and_bag(k: usize) -> (Model<f32>, Tensor<f32>, Vec<(usize, usize)>) {
    let mut rng = prng(3);
    let cfg = ModelConfig {
        method: Method::SparseConvMil,
        n_tiles: k,
        ..ModelConfig::default()
    };
    let model = Model::init_new(&cfg, &mut rng).unwrap();
    let e = &cfg.embedder;
    let n = k * e.patch_channels * e.patch_h * e.patch_w;
    let patches = Tensor::from_vec(
        &[k, e.patch_channels, e.patch_h, e.patch_w],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let locs = (0..k).map(|_| (rng.random_range(0..4096), rng.random_range(0..4096))).collect();
    (model, patches, locs)
}

/// Execution mode: an explicit rayon pool, or the sequential build.
enum Exec {
    #[cfg(feature = "parallel")]
    Pool(String, rayon::ThreadPool),
    #[cfg(not(feature = "parallel"))]
    Sequential,
}

impl Exec {
    fn all() -> Vec<Exec> {
        #[cfg(feature = "parallel")]
        {
            let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            let full = rayon::ThreadPoolBuilder::new().build().unwrap();
            let label = format!("rayon_all_cores_{}", full.current_num_threads());
            vec![Exec::Pool("rayon_1_thread".into(), single), Exec::Pool(label, full)]
        }
        #[cfg(not(feature = "parallel"))]
        vec![Exec::Sequential]
    }

    fn label(&self) -> &str {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Pool(l, _) => l,
            #[cfg(not(feature = "parallel"))]
            Exec::Sequential => "sequential",
        }
    }

    fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Pool(_, pool) => pool.install(f),
            #[cfg(not(feature = "parallel"))]
            Exec::Sequential => f(),
        }
    }
}

fn sparse_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("sparse_conv");
    for &(side, n) in &[(32usize, 200usize), (128, 2000)] {
        let map = random_map(side, n, 32);
        let mut conv = SparseConv::<f32>::new(32, 32, 1, 1, true).unwrap();
        conv.init(&mut prng(1));
        let out = conv.forward(&map).unwrap();
        let grad = out.with_values(32, vec![1.0; out.values().len()]).unwrap();
        for exec in Exec::all() {
            let label = exec.label();
            group.bench_function(BenchmarkId::new(format!("forward/{label}"), format!("{side}x{side}_n{n}")), |b| {
                b.iter(|| exec.run(|| conv.forward(&map).unwrap()))
            });
            let mut conv_b = conv.clone();
            group.bench_function(BenchmarkId::new(format!("backward/{label}"), format!("{side}x{side}_n{n}")), |b| {
                b.iter(|| exec.run(|| conv_b.backward(&map, &grad).unwrap()))
            });
        }
    }
    group.finish();
}

fn bag_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("bag_forward");
    group.sample_size(20);
    let (model, patches, locs) = model_and_bag(200);
    let bag = BagView {
        patches: &patches,
        locations: &locs,
        full_h: 4096,
        full_w: 4096,
    };
    for exec in Exec::all() {
        group.bench_function(BenchmarkId::new("embed_200", exec.label()), |b| {
            b.iter(|| exec.run(|| model.embed(&patches).unwrap()))
        });
        group.bench_function(BenchmarkId::new("sparseconvmil_200", exec.label()), |b| {
            b.iter(|| exec.run(|| model.forward(&bag, Mode::Eval).unwrap().probs))
        });
    }
    group.finish();
}

criterion_group!(benches, sparse_conv, bag_forward);
criterion_main!(benches);
