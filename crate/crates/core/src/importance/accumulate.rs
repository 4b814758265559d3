use super::signal::{SignalKind, Signals};
use crate::error::{Error, Result};
use crate::nn::{Model, SiteKind};
use crate::tensor::Scalar;

/// The five data-driven importance estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    /// Mean of `x·δx`; may be negative.
    TaylorFo,
    /// Mean of `|x·δx|`.
    TaylorFoAbs,
    /// Mean of `(x·δx)²`.
    TaylorFoSq,
    /// Mean of `(γ·δγ + β·δβ)²` at the attached BatchNorm.
    MolchanovBn,
    /// Mean of `(Σ w·δw + b·δb)²` over the channel's weight group.
    MolchanovGroup,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::TaylorFo,
        Estimator::TaylorFoAbs,
        Estimator::TaylorFoSq,
        Estimator::MolchanovBn,
        Estimator::MolchanovGroup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::TaylorFo => "taylorfo",
            Estimator::TaylorFoAbs => "taylorfo_abs",
            Estimator::TaylorFoSq => "taylorfo_sq",
            Estimator::MolchanovBn => "molchanov_bn",
            Estimator::MolchanovGroup => "molchanov_group",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == name)
            .ok_or_else(|| Error::Input(format!("unknown estimator `{name}`")))
    }

    pub fn signal(self) -> SignalKind {
        match self {
            Estimator::TaylorFo | Estimator::TaylorFoAbs | Estimator::TaylorFoSq => SignalKind::Gate,
            Estimator::MolchanovBn => SignalKind::BatchNorm,
            Estimator::MolchanovGroup => SignalKind::Group,
        }
    }

    /// The per-example map applied before averaging.
    pub fn transform(self, s: f64) -> f64 {
        match self {
            Estimator::TaylorFo => s,
            Estimator::TaylorFoAbs => s.abs(),
            _ => s * s,
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Running per-channel sums for one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteAccumulator {
    pub site_id: usize,
    pub node: usize,
    pub kind: SiteKind,
    pub acc: Vec<f64>,
}

/// Streaming sums of transformed per-example signals for one estimator.
/// `count` is the number of examples consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    pub estimator: Estimator,
    pub sites: Vec<SiteAccumulator>,
    pub count: usize,
}

impl Accumulator {
    pub fn new<T: Scalar>(model: &Model<T>, estimator: Estimator) -> Self {
        Accumulator {
            estimator,
            sites: model
                .sites()
                .iter()
                .map(|s| SiteAccumulator {
                    site_id: s.id,
                    node: s.node,
                    kind: s.kind,
                    acc: vec![0.0; s.channels],
                })
                .collect(),
            count: 0,
        }
    }

    /// Adds `f(s[n,c])` for every example of the batch, in example order.
    pub fn accumulate(&mut self, estimator: Estimator, signals: &Signals) -> Result<()> {
        if estimator != self.estimator || signals.kind != estimator.signal() {
            return Err(Error::State(format!(
                "{} accumulator fed {} with {:?} signals",
                self.estimator, estimator, signals.kind
            )));
        }
        if signals.per_site.len() != self.sites.len() {
            return Err(Error::State(format!(
                "signals cover {} sites, accumulator has {}",
                signals.per_site.len(),
                self.sites.len()
            )));
        }
        for (site, s) in self.sites.iter().zip(&signals.per_site) {
            let c = site.acc.len();
            if !(s.is_empty() && site.kind == SiteKind::Probe) && s.len() != signals.examples * c {
                return Err(Error::State(format!(
                    "site {} expects {}×{c} signals, got {}",
                    site.site_id,
                    signals.examples,
                    s.len()
                )));
            }
        }
        for (site, s) in self.sites.iter_mut().zip(&signals.per_site) {
            for row in s.chunks(site.acc.len()) {
                for (a, &v) in site.acc.iter_mut().zip(row) {
                    *a += estimator.transform(v);
                }
            }
        }
        self.count += signals.examples;
        Ok(())
    }

    /// Appends another accumulator's examples after this one's. Merging
    /// partial results in a fixed order gives a fixed final sum.
    pub fn merge(&mut self, other: &Accumulator) -> Result<()> {
        let compatible = other.estimator == self.estimator
            && other.sites.len() == self.sites.len()
            && self
                .sites
                .iter()
                .zip(&other.sites)
                .all(|(a, b)| a.site_id == b.site_id && a.acc.len() == b.acc.len());
        if !compatible {
            return Err(Error::State("merging incompatible accumulators".into()));
        }
        for (a, b) in self.sites.iter_mut().zip(&other.sites) {
            for (x, y) in a.acc.iter_mut().zip(&b.acc) {
                *x += y;
            }
        }
        self.count += other.count;
        Ok(())
    }

    /// `acc / M` for every site, probes included.
    pub fn scores(&self) -> Result<Vec<Vec<f64>>> {
        if self.count == 0 {
            return Err(Error::State(
                "cannot finalize importance from zero examples".into(),
            ));
        }
        let m = self.count as f64;
        Ok(self
            .sites
            .iter()
            .map(|s| s.acc.iter().map(|a| a / m).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelBuilder, Source};

    fn one_site() -> Model<f64> {
        let mut b = ModelBuilder::<f64>::new(&[2], 0);
        let l = b.linear(Source::Input, 1, false, true);
        let l = b.batch_norm(l);
        b.linear(l, 2, true, false);
        b.build(2).unwrap()
    }

    fn gate(values: &[f64]) -> Signals {
        Signals {
            kind: SignalKind::Gate,
            examples: values.len(),
            per_site: vec![values.to_vec()],
        }
    }

    fn score(e: Estimator, batches: &[&[f64]]) -> f64 {
        let mut acc = Accumulator::new(&one_site(), e);
        for b in batches {
            acc.accumulate(e, &gate(b)).unwrap();
        }
        acc.scores().unwrap()[0][0]
    }

    #[test]
    fn hand_arithmetic() {
        assert_eq!(score(Estimator::TaylorFo, &[&[1.0, -2.0]]), -0.5);
        assert_eq!(score(Estimator::TaylorFoAbs, &[&[1.0, -2.0]]), 1.5);
        assert_eq!(score(Estimator::TaylorFoSq, &[&[1.0, -2.0]]), 2.5);
        for e in [Estimator::TaylorFo, Estimator::TaylorFoAbs, Estimator::TaylorFoSq] {
            assert_eq!(score(e, &[&[0.0, 0.0]]), 0.0);
        }
        assert_eq!(score(Estimator::TaylorFo, &[&[1.5, 1.5, 1.5, 1.5]]), 1.5);
        assert_eq!(score(Estimator::TaylorFo, &[&[6.0]]), 6.0);
    }

    #[test]
    fn partitions_and_merges_agree() {
        let values: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).sin()).collect();
        let whole = score(Estimator::TaylorFoSq, &[&values]);
        let split = score(Estimator::TaylorFoSq, &[&values[..3], &values[3..]]);
        assert_eq!(whole, split);
        let model = one_site();
        let mut a = Accumulator::new(&model, Estimator::TaylorFoSq);
        let mut b = a.clone();
        a.accumulate(Estimator::TaylorFoSq, &gate(&values[..3])).unwrap();
        b.accumulate(Estimator::TaylorFoSq, &gate(&values[3..])).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.count, 8);
        assert_eq!(a.scores().unwrap()[0][0], whole);
    }

    #[test]
    fn errors() {
        let model = one_site();
        let mut acc = Accumulator::new(&model, Estimator::TaylorFo);
        assert!(matches!(acc.scores(), Err(Error::State(_))));
        assert!(matches!(
            acc.accumulate(Estimator::TaylorFoSq, &gate(&[1.0])),
            Err(Error::State(_))
        ));
        let bad = Signals { examples: 2, ..gate(&[1.0]) };
        assert!(matches!(acc.accumulate(Estimator::TaylorFo, &bad), Err(Error::State(_))));
        assert!(Estimator::from_name("magnitude").is_err());
        for e in Estimator::ALL {
            assert_eq!(Estimator::from_name(e.name()).unwrap(), e);
        }
    }
}
