use std::io::Write;
use std::path::Path;

use super::config::{ExperimentConfig, Method, PruneGrid, SweepSpec};
use super::train::{evaluate, train, EpochLog, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::importance::{estimate_many, format_score, random_table, GradientSource, ImportanceTable};
use crate::nn::{build_reference, Model, ReferenceConfig};
use crate::par;
use crate::pruning::{apply_mask, rank_global_with, PruneMask, RankOptions};

pub const HEADER: [&str; 8] = [
    "estimator",
    "source",
    "normalized",
    "data_size",
    "pruned_count",
    "pruned_fraction",
    "test_accuracy",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub estimator: String,
    pub source: String,
    pub normalized: bool,
    pub data_size: usize,
    pub pruned_count: usize,
    pub pruned_fraction: f64,
    pub test_accuracy: f64,
    pub seed: u64,
}

/// Rows in grid order: seed, method, data size, prune count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.estimator.clone(),
                r.source.clone(),
                r.normalized.to_string(),
                r.data_size.to_string(),
                r.pruned_count.to_string(),
                format_score(r.pruned_fraction),
                format_score(r.test_accuracy),
                r.seed.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    /// Rows of one method at one prune count.
    pub fn select<'a>(&'a self, estimator: &'a str, source: &'a str, normalized: bool, pruned: usize) -> impl Iterator<Item = &'a SweepRow> {
        self.rows.iter().filter(move |r| {
            r.estimator == estimator && r.source == source && r.normalized == normalized && r.pruned_count == pruned
        })
    }
}

/// Prune counts for a model with `n` prunable channels over `sites` sites:
/// always starting with 0, sorted and deduplicated.
pub fn resolve_prune_counts(grid: &PruneGrid, n: usize, sites: usize) -> Result<Vec<usize>> {
    let max = n - sites;
    let mut counts: Vec<usize> = match grid {
        PruneGrid::Counts(c) => c.clone(),
        PruneGrid::Fractions(f) => f.iter().map(|f| (f * n as f64).round() as usize).collect(),
        PruneGrid::Default => (0..10)
            .map(|i| ((0.7 * n as f64) * i as f64 / 9.0).round() as usize)
            .map(|p| p.min(max))
            .collect(),
    };
    if let Some(&p) = counts.iter().find(|&&p| p > max) {
        return Err(Error::Config {
            file: "<sweep>".into(),
            message: format!("prune count {p} exceeds {max} ({n} channels, {sites} sites)"),
        });
    }
    counts.push(0);
    counts.sort_unstable();
    counts.dedup();
    Ok(counts)
}

fn tables_for(
    model: &Model<f32>,
    train_set: &Dataset,
    d: usize,
    spec: &SweepSpec,
    seed: u64,
) -> Result<Vec<(Method, ImportanceTable)>> {
    let mut out: Vec<Option<ImportanceTable>> = vec![None; spec.methods.len()];
    for (i, m) in spec.methods.iter().enumerate() {
        if out[i].is_some() {
            continue;
        }
        match m.estimator {
            None => out[i] = Some(random_table(model, seed)),
            Some(_) => {
                let group: Vec<usize> = (i..spec.methods.len())
                    .filter(|&j| {
                        let o = &spec.methods[j];
                        o.estimator.is_some() && o.source == m.source && o.normalize == m.normalize && out[j].is_none()
                    })
                    .collect();
                let estimators: Vec<_> = group.iter().map(|&j| spec.methods[j].estimator.expect("filtered")).collect();
                let source = GradientSource {
                    kind: m.source,
                    normalize: m.normalize,
                    seed,
                };
                let tables = estimate_many(model, train_set, d, &estimators, &source, spec.estimate_batch_size)?;
                for (j, t) in group.into_iter().zip(tables) {
                    out[j] = Some(t);
                }
            }
        }
    }
    Ok(spec.methods.iter().copied().zip(out.into_iter().map(|t| t.expect("filled"))).collect())
}

/// Estimates importance on the first `D` training examples for every method
/// and data size, then for every prune count masks the model from that one
/// table and measures test accuracy. `P = 0` rows carry the unpruned
/// accuracy.
pub fn prune_sweep(
    model: &Model<f32>,
    train_set: &Dataset,
    test_set: &Dataset,
    spec: &SweepSpec,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<SweepResult> {
    let n = model.prunable_channels();
    let sites = model.prunable_sites().count();
    let counts = resolve_prune_counts(&spec.prune, n, sites)?;
    let mut sizes = Vec::new();
    for ds in &spec.data_sizes {
        let d = ds.resolve(train_set.len());
        if d > train_set.len() {
            return Err(Error::Config {
                file: "<sweep>".into(),
                message: format!("data size {d} exceeds the {} training examples", train_set.len()),
            });
        }
        sizes.push(d);
    }
    let baseline = evaluate(model, test_set, spec.eval_batch_size)?;
    let options = RankOptions {
        per_site_max_normalize: spec.per_site_normalize,
    };
    let mut rows = Vec::new();
    for &d in &sizes {
        for (method, table) in tables_for(model, train_set, d, spec, seed)? {
            let accuracies = par::map_slice(&counts, |&p| -> Result<f64> {
                if p == 0 {
                    return Ok(baseline);
                }
                let plan = rank_global_with(&table, p, options)?;
                let mut masked = apply_mask(model, &PruneMask::from_plan(model, &plan)?)?;
                if spec.finetune_epochs > 0 {
                    let cfg = TrainConfig {
                        epochs: spec.finetune_epochs,
                        ..*train_cfg
                    };
                    train(&mut masked, train_set, &cfg)?;
                }
                evaluate(&masked, test_set, spec.eval_batch_size)
            });
            for (&p, acc) in counts.iter().zip(accuracies) {
                rows.push(SweepRow {
                    estimator: method.estimator_name().into(),
                    source: method.source_name().into(),
                    normalized: method.normalize,
                    data_size: d,
                    pruned_count: p,
                    pruned_fraction: p as f64 / n as f64,
                    test_accuracy: acc?,
                    seed,
                });
            }
        }
    }
    // Order rows as method-major within each seed.
    let order = |r: &SweepRow| {
        let m = spec
            .methods
            .iter()
            .position(|m| m.estimator_name() == r.estimator && m.source_name() == r.source && m.normalize == r.normalized)
            .unwrap_or(usize::MAX);
        let d = sizes.iter().position(|&d| d == r.data_size).unwrap_or(usize::MAX);
        (m, d)
    };
    rows.sort_by_key(order);
    Ok(SweepResult { rows })
}

/// A trained model for one seed.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub seed: u64,
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
}

/// Builds and trains the configured reference model with `seed`.
pub fn train_reference(cfg: &ExperimentConfig, train_set: &Dataset, seed: u64) -> Result<TrainedRun> {
    let mut model = build_reference::<f32>(&cfg.model, &reference_config(train_set, seed)?)?;
    let log = train(&mut model, train_set, &TrainConfig { seed, ..cfg.train })?;
    Ok(TrainedRun { seed, model, log })
}

pub fn reference_config(data: &Dataset, seed: u64) -> Result<ReferenceConfig> {
    let shape: [usize; 3] = data
        .image_shape()
        .try_into()
        .map_err(|_| Error::Input("images must be C×H×W".into()))?;
    Ok(ReferenceConfig {
        input_shape: shape,
        num_classes: data.num_classes,
        seed,
    })
}

/// The whole protocol: per seed, train (or reuse `model`), then sweep.
pub fn run_experiment(cfg: &ExperimentConfig, model: Option<&Model<f32>>) -> Result<SweepResult> {
    let (train_set, test_set) = cfg.dataset.load()?;
    let mut result = SweepResult::default();
    for &seed in &cfg.sweep.seeds {
        let trained = match model {
            Some(m) => m.clone(),
            None => train_reference(cfg, &train_set, seed)?.model,
        };
        let part = prune_sweep(&trained, &train_set, &test_set, &cfg.sweep, &cfg.train, seed)?;
        result.rows.extend(part.rows);
    }
    Ok(result)
}
