use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::train::TrainConfig;
use crate::data::{generate_split, load_idx, Dataset, GlyphSpec, Split};
use crate::error::{Error, Result};
use crate::importance::{Estimator, SourceKind};
use crate::nn::REFERENCE_MODELS;

/// One ranking method of the sweep: an estimator with its gradient source,
/// or the random-ranking baseline (`estimator: None`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Method {
    pub estimator: Option<Estimator>,
    pub source: SourceKind,
    pub normalize: bool,
}

impl Method {
    pub const RANDOM: Method = Method {
        estimator: None,
        source: SourceKind::Random,
        normalize: false,
    };

    pub fn new(estimator: Estimator, source: SourceKind, normalize: bool) -> Self {
        Method {
            estimator: Some(estimator),
            source,
            normalize,
        }
    }

    /// Parses `random` or `estimator:source[:norm]`.
    pub fn parse(text: &str) -> std::result::Result<Method, String> {
        let parts: Vec<&str> = text.trim().split(':').map(str::trim).collect();
        match parts[..] {
            ["random"] => Ok(Method::RANDOM),
            [est, src] | [est, src, _] => {
                let estimator = Estimator::from_name(est).map_err(|e| e.to_string())?;
                let source = match src {
                    "loss" => SourceKind::Loss,
                    "random" => SourceKind::Random,
                    other => return Err(format!("unknown gradient source `{other}`")),
                };
                let normalize = match parts.get(2) {
                    None => false,
                    Some(&"norm") => true,
                    Some(other) => return Err(format!("expected `norm`, found `{other}`")),
                };
                Ok(Method::new(estimator, source, normalize))
            }
            _ => Err(format!("cannot parse method `{text}`")),
        }
    }

    pub fn estimator_name(&self) -> &'static str {
        self.estimator.map_or("random", |e| e.name())
    }

    pub fn source_name(&self) -> &'static str {
        match (self.estimator, self.source) {
            (None, _) => "none",
            (_, SourceKind::Loss) => "loss",
            (_, SourceKind::Random) => "random",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.estimator {
            None => f.write_str("random"),
            Some(e) => {
                write!(f, "{}:{}", e.name(), self.source_name())?;
                if self.normalize {
                    f.write_str(":norm")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSize {
    Count(usize),
    Full,
}

impl DataSize {
    pub fn resolve(self, available: usize) -> usize {
        match self {
            DataSize::Count(n) => n,
            DataSize::Full => available,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PruneGrid {
    Counts(Vec<usize>),
    Fractions(Vec<f64>),
    /// Ten evenly spaced counts from 0 to 70% of the prunable channels.
    Default,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Glyphs {
        spec: GlyphSpec,
        train_per_class: usize,
        test_per_class: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DatasetSpec {
    /// `(train, test)` splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Glyphs {
                spec,
                train_per_class,
                test_per_class,
            } => generate_split(spec, *train_per_class, *test_per_class),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let mut train = load_idx(train_images, Some(train_labels))?;
                let mut test = load_idx(test_images, Some(test_labels))?;
                let k = train.num_classes.max(test.num_classes);
                train.num_classes = k;
                test.num_classes = k;
                test.split = Split::Test;
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub data_sizes: Vec<DataSize>,
    pub prune: PruneGrid,
    pub eval_batch_size: usize,
    pub estimate_batch_size: usize,
    pub seeds: Vec<u64>,
    pub finetune_epochs: usize,
    pub per_site_normalize: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let loss = |e| Method::new(e, SourceKind::Loss, false);
        SweepSpec {
            methods: vec![
                loss(Estimator::TaylorFo),
                loss(Estimator::TaylorFoAbs),
                loss(Estimator::TaylorFoSq),
                loss(Estimator::MolchanovBn),
                loss(Estimator::MolchanovGroup),
                Method::new(Estimator::TaylorFoSq, SourceKind::Random, true),
                Method::RANDOM,
            ],
            data_sizes: vec![DataSize::Full],
            prune: PruneGrid::Default,
            eval_batch_size: 100,
            estimate_batch_size: 32,
            seeds: vec![0],
            finetune_epochs: 0,
            per_site_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: String,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "cnn_small".into(),
            dataset: DatasetSpec::Glyphs {
                spec: GlyphSpec::default(),
                train_per_class: 200,
                test_per_class: 100,
            },
            train: TrainConfig::default(),
            sweep: SweepSpec::default(),
        }
    }
}

/// Every key the config file accepts.
pub const KEYS: [&str; 26] = [
    "model",
    "classes",
    "train_per_class",
    "test_per_class",
    "image_size",
    "noise",
    "data_seed",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "weight_decay",
    "seed",
    "methods",
    "data_sizes",
    "prune_counts",
    "prune_fractions",
    "eval_batch_size",
    "estimate_batch_size",
    "seeds",
    "finetune_epochs",
    "per_site_normalize",
];

fn list<T>(value: &str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not listed in
    /// [`KEYS`] and repeated keys are errors; absent keys keep their defaults.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let err = |message: String| Error::Config {
            file: file.to_owned(),
            message,
        };
        let mut values: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("line {}: unknown key `{key}`", i + 1)));
            }
            if values.insert(key, (i + 1, value)).is_some() {
                return Err(err(format!("line {}: key `{key}` given twice", i + 1)));
            }
        }
        let mut cfg = ExperimentConfig::default();
        let mut glyph = GlyphSpec::default();
        let (mut train_pc, mut test_pc) = (200, 100);
        let mut idx: BTreeMap<&str, PathBuf> = BTreeMap::new();
        for (&key, &(line, value)) in &values {
            let bad = |m: String| err(format!("line {line}: `{key}`: {m}"));
            match key {
                "model" => {
                    if !REFERENCE_MODELS.contains(&value) {
                        return Err(bad(format!("unknown model, expected one of {REFERENCE_MODELS:?}")));
                    }
                    cfg.model = value.to_owned();
                }
                "classes" => glyph.num_classes = num(value).map_err(bad)?,
                "train_per_class" => train_pc = num(value).map_err(bad)?,
                "test_per_class" => test_pc = num(value).map_err(bad)?,
                "image_size" => glyph.image_size = num(value).map_err(bad)?,
                "noise" => glyph.noise = num(value).map_err(bad)?,
                "data_seed" => glyph.seed = num(value).map_err(bad)?,
                "train_images" | "train_labels" | "test_images" | "test_labels" => {
                    idx.insert(key, PathBuf::from(value));
                }
                "epochs" => cfg.train.epochs = num(value).map_err(bad)?,
                "batch_size" => cfg.train.batch_size = num(value).map_err(bad)?,
                "learning_rate" => cfg.train.learning_rate = num(value).map_err(bad)?,
                "momentum" => cfg.train.momentum = num(value).map_err(bad)?,
                "weight_decay" => cfg.train.weight_decay = num(value).map_err(bad)?,
                "seed" => cfg.train.seed = num(value).map_err(bad)?,
                "methods" => cfg.sweep.methods = list(value, Method::parse).map_err(bad)?,
                "data_sizes" => {
                    cfg.sweep.data_sizes = list(value, |v| match v {
                        "full" => Ok(DataSize::Full),
                        n => num(n).and_then(|n: usize| {
                            if n == 0 {
                                Err("data sizes must be positive".into())
                            } else {
                                Ok(DataSize::Count(n))
                            }
                        }),
                    })
                    .map_err(bad)?
                }
                "prune_counts" => cfg.sweep.prune = PruneGrid::Counts(list(value, num).map_err(bad)?),
                "prune_fractions" => {
                    let f: Vec<f64> = list(value, num).map_err(bad)?;
                    if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(bad("fractions must lie in [0, 1]".into()));
                    }
                    cfg.sweep.prune = PruneGrid::Fractions(f);
                }
                "eval_batch_size" => cfg.sweep.eval_batch_size = num(value).map_err(bad)?,
                "estimate_batch_size" => cfg.sweep.estimate_batch_size = num(value).map_err(bad)?,
                "seeds" => cfg.sweep.seeds = list(value, num).map_err(bad)?,
                "finetune_epochs" => cfg.sweep.finetune_epochs = num(value).map_err(bad)?,
                "per_site_normalize" => {
                    cfg.sweep.per_site_normalize = value.parse().map_err(|_| bad("expected true or false".into()))?
                }
                _ => unreachable!("keys are checked above"),
            }
        }
        if values.contains_key("prune_counts") && values.contains_key("prune_fractions") {
            return Err(err("give prune_counts or prune_fractions, not both".into()));
        }
        for (key, v) in [
            ("batch_size", cfg.train.batch_size < 2),
            ("eval_batch_size", cfg.sweep.eval_batch_size == 0),
            ("estimate_batch_size", cfg.sweep.estimate_batch_size == 0),
        ] {
            if v {
                return Err(err(format!("`{key}` is too small")));
            }
        }
        cfg.dataset = match idx.len() {
            0 => {
                if !(2..=10).contains(&glyph.num_classes) || glyph.image_size < 12 {
                    return Err(err("glyph data needs 2..=10 classes and image_size >= 12".into()));
                }
                if train_pc == 0 || test_pc == 0 {
                    return Err(err("per-class counts must be positive".into()));
                }
                DatasetSpec::Glyphs {
                    spec: glyph,
                    train_per_class: train_pc,
                    test_per_class: test_pc,
                }
            }
            4 => DatasetSpec::Idx {
                train_images: idx["train_images"].clone(),
                train_labels: idx["train_labels"].clone(),
                test_images: idx["test_images"].clone(),
                test_labels: idx["test_labels"].clone(),
            },
            _ => {
                return Err(err(
                    "IDX data needs train_images, train_labels, test_images and test_labels".into(),
                ))
            }
        };
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_section() {
        let text = "
            # a comment
            model = mlp_small
            classes = 3   # trailing comment
            epochs = 2
            methods = taylorfo_sq:loss, taylorfo_sq:random:norm, random
            data_sizes = 2, 10, full
            prune_fractions = 0.1, 0.5
            seeds = 4, 5
        ";
        let cfg = ExperimentConfig::parse(text, "t.cfg").unwrap();
        assert_eq!(cfg.model, "mlp_small");
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.sweep.methods.len(), 3);
        assert_eq!(cfg.sweep.methods[1].to_string(), "taylorfo_sq:random:norm");
        assert_eq!(cfg.sweep.methods[2], Method::RANDOM);
        assert_eq!(cfg.sweep.data_sizes, vec![DataSize::Count(2), DataSize::Count(10), DataSize::Full]);
        assert_eq!(cfg.sweep.prune, PruneGrid::Fractions(vec![0.1, 0.5]));
        assert_eq!(cfg.sweep.seeds, vec![4, 5]);
        let DatasetSpec::Glyphs { spec, .. } = cfg.dataset else { panic!() };
        assert_eq!(spec.num_classes, 3);
    }

    #[test]
    fn rejects_bad_input_naming_the_key() {
        for (text, needle) in [
            ("epochz = 3", "epochz"),
            ("epochs = 3\nepochs = 4", "twice"),
            ("epochs = three", "epochs"),
            ("model = vgg", "model"),
            ("methods = taylorfo:grad", "methods"),
            ("prune_counts = 1\nprune_fractions = 0.1", "not both"),
            ("train_images = a.idx", "IDX"),
            ("just text", "key = value"),
        ] {
            match ExperimentConfig::parse(text, "bad.cfg") {
                Err(Error::Config { file, message }) => {
                    assert_eq!(file, "bad.cfg");
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("", "x").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn method_names_round_trip() {
        for m in SweepSpec::default().methods {
            assert_eq!(Method::parse(&m.to_string()).unwrap(), m);
        }
    }
}
