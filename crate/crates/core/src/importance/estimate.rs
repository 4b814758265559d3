use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::accumulate::{Accumulator, Estimator};
use super::signal::{site_signals, SignalKind, Signals};
use super::source::GradientSource;
use super::table::{ImportanceEntry, ImportanceTable};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model, SiteKind};
use crate::par;
use crate::tensor::Scalar;

/// Final scores of one site, probes included.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteScores {
    pub site_id: usize,
    pub node: usize,
    pub kind: SiteKind,
    pub scores: Vec<f64>,
}

fn batch_signals<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    range: (usize, usize),
    kinds: &[SignalKind],
    source: &GradientSource,
) -> Result<Vec<Signals>> {
    let (start, end) = range;
    let x = data.images.slice_batch(start, end)?.cast::<T>();
    let record = model.forward_pass(&x, Mode::Eval, None)?;
    let labels = if source.needs_labels() {
        Some(&data.labels()?[start..end])
    } else {
        None
    };
    let grad = super::make_output_gradient(source, record.logits(), labels, start)?;
    let grads = model.backward_pass(&record, &grad, false)?;
    kinds
        .iter()
        .map(|&k| site_signals(model, &record, &grads, k))
        .collect()
}

/// Streams the first `d` examples through eval-mode forward and reverse
/// passes and accumulates every requested estimator. Batches may run
/// concurrently; their signals are folded in example order.
pub fn estimate_sites<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    d: usize,
    estimators: &[Estimator],
    source: &GradientSource,
    batch_size: usize,
) -> Result<Vec<Accumulator>> {
    if d == 0 || d > data.len() {
        return Err(Error::Input(format!(
            "data size {d} outside [1, {}]",
            data.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    if estimators.is_empty() {
        return Err(Error::Input("no estimators requested".into()));
    }
    if source.needs_labels() {
        data.labels()?;
    }
    let mut kinds: Vec<SignalKind> = Vec::new();
    for e in estimators {
        if !kinds.contains(&e.signal()) {
            kinds.push(e.signal());
        }
    }
    let ranges: Vec<(usize, usize)> = (0..d)
        .step_by(batch_size)
        .map(|s| (s, (s + batch_size).min(d)))
        .collect();
    let per_batch = par::map_slice(&ranges, |&r| batch_signals(model, data, r, &kinds, source));

    let mut accs: Vec<Accumulator> = estimators.iter().map(|&e| Accumulator::new(model, e)).collect();
    for signals in per_batch {
        let signals = signals?;
        for acc in &mut accs {
            let k = kinds
                .iter()
                .position(|&k| k == acc.estimator.signal())
                .expect("kind requested above");
            acc.accumulate(acc.estimator, &signals[k])?;
        }
    }
    Ok(accs)
}

fn to_table(
    acc: &Accumulator,
    source: &GradientSource,
    data_size: usize,
) -> Result<(ImportanceTable, Vec<SiteScores>)> {
    let scores = acc.scores()?;
    let sites: Vec<SiteScores> = acc
        .sites
        .iter()
        .zip(scores)
        .map(|(s, scores)| SiteScores {
            site_id: s.site_id,
            node: s.node,
            kind: s.kind,
            scores,
        })
        .collect();
    let entries = sites
        .iter()
        .filter(|s| s.kind == SiteKind::Prunable)
        .flat_map(|s| {
            s.scores.iter().enumerate().map(|(channel, &score)| ImportanceEntry {
                site_id: s.site_id,
                node: s.node,
                channel,
                score,
            })
        })
        .collect();
    let table = ImportanceTable {
        entries,
        estimator: acc.estimator.name().to_owned(),
        source: source.name().to_owned(),
        normalized: source.normalize,
        data_size,
        seed: source.seed,
    };
    table.validate()?;
    Ok((table, sites))
}

/// Importance tables for several estimators from one pass over the data.
pub fn estimate_many<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    d: usize,
    estimators: &[Estimator],
    source: &GradientSource,
    batch_size: usize,
) -> Result<Vec<ImportanceTable>> {
    estimate_sites(model, data, d, estimators, source, batch_size)?
        .iter()
        .map(|acc| to_table(acc, source, d).map(|(t, _)| t))
        .collect()
}

/// Importance of every prunable channel under one estimator.
pub fn estimate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    d: usize,
    estimator: Estimator,
    source: &GradientSource,
    batch_size: usize,
) -> Result<ImportanceTable> {
    Ok(estimate_many(model, data, d, &[estimator], source, batch_size)?.remove(0))
}

impl Accumulator {
    /// Per-site scores including probe sites.
    pub fn site_scores(&self) -> Result<Vec<SiteScores>> {
        to_table(self, &GradientSource::loss(false), self.count).map(|(_, s)| s)
    }
}

/// Uniform random scores: the random-ranking baseline.
pub fn random_table<T: Scalar>(model: &Model<T>, seed: u64) -> ImportanceTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = model
        .prunable_sites()
        .flat_map(|s| (0..s.channels).map(move |c| (s.id, s.node, c)))
        .map(|(site_id, node, channel)| ImportanceEntry {
            site_id,
            node,
            channel,
            score: rng.gen(),
        })
        .collect();
    ImportanceTable {
        entries,
        estimator: "random".into(),
        source: "none".into(),
        normalized: false,
        data_size: 0,
        seed,
    }
}
