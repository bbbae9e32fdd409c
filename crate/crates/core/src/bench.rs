//! Method comparisons: train each configuration with the same seeds and
//! report test-split metrics.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{BagDataset, Split};
use crate::error::{Error, Result};
use crate::model::Method;
use crate::training::{evaluate, train, MetricsReport};

/// One bench configuration. `None` keeps the base config's value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSetting {
    pub method: Method,
    pub downsampling: Option<usize>,
    pub n_tiles: Option<usize>,
}

impl BenchSetting {
    pub fn method(method: Method) -> Self {
        BenchSetting {
            method,
            downsampling: None,
            n_tiles: None,
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.model.method = self.method;
        if let Some(d) = self.downsampling {
            c.model.downsampling = d;
        }
        if let Some(b) = self.n_tiles {
            c.model.n_tiles = b;
        }
        c
    }

    fn tag(&self, cfg: &RunConfig) -> String {
        format!("{}_ds{}_b{}", self.method, cfg.model.downsampling, cfg.model.n_tiles)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub downsampling: usize,
    pub n_tiles: usize,
    /// Trainable parameters of the pooling stage.
    pub params: usize,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
}

pub const BENCH_HEADER: &str = "method,downsampling,n_tiles,params,balanced_accuracy,macro_precision,macro_recall,macro_f1,macro_auc,cross_entropy";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{},{}", self.method, self.downsampling, self.n_tiles, self.params);
        for v in self.metrics.values() {
            let _ = write!(s, ",{v}");
        }
        s
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Trains and tests one setting. With `out`, run artifacts go to a
/// per-setting subdirectory.
pub fn run_setting(dataset: &BagDataset, base: &RunConfig, setting: &BenchSetting, out: Option<&Path>) -> Result<BenchRow> {
    let cfg = setting.apply(base);
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::invalid("bench needs a non-empty test split"));
    }
    let dir = out.map(|d| d.join(setting.tag(&cfg)));
    let outcome = train(dataset, &cfg, dir.as_deref())?;
    let metrics = evaluate(&outcome.best, &test, cfg.training.seed)?;
    log::info!("{}: test AUC {:.3}", setting.tag(&cfg), metrics.macro_auc);
    Ok(BenchRow {
        method: setting.method,
        downsampling: cfg.model.downsampling,
        n_tiles: cfg.model.n_tiles,
        params: outcome.best.pooling_param_count(),
        best_epoch: outcome.best_epoch,
        metrics,
    })
}

pub fn run_bench(dataset: &BagDataset, base: &RunConfig, settings: &[BenchSetting], out: Option<&Path>) -> Result<Vec<BenchRow>> {
    settings.iter().map(|s| run_setting(dataset, base, s, out)).collect()
}
