//! End-to-end acceptance checks. Each check writes one `PASS`/`FAIL` line
//! straight to the process's standard output, so the lines show up in the
//! test log without `--nocapture`. All checks run before the final assertion.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use neuroprune::data::{generate_shapes, generate_split, write_idx, Dataset, GlyphSpec, Split};
use neuroprune::harness::{
    prune_sweep, train_reference, DataSize, ExperimentConfig, Method, PruneGrid, SweepResult, SweepSpec, TrainedRun,
};
use neuroprune::importance::{
    bn_gate_terms, estimate, estimate_many, estimate_sites, rank_correlation, Accumulator, Estimator,
    GradientSource, SignalKind, Signals, SourceKind,
};
use neuroprune::nn::{
    build_reference, checkpoint, gradient_check_with, GradCheckOptions, Layer, Mode, Model, ModelBuilder,
    ReferenceConfig, Source, REFERENCE_MODELS,
};
use neuroprune::pruning::{apply_mask, compact, validate_equivalence, zero_incoming, zero_outgoing, PruneMask};
use neuroprune::tensor::Tensor;

type Check = Result<String, String>;

fn report(outcomes: &mut Vec<bool>, number: usize, title: &str, check: Check) {
    let (pass, detail) = match check {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let line = format!(
        "{} criterion {number:>2} ({title}): {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    outcomes.push(pass);
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn reference_f64(name: &str, seed: u64) -> Model<f64> {
    build_reference(name, &ReferenceConfig { seed, ..Default::default() }).unwrap()
}

fn all_sources(seed: u64) -> Vec<GradientSource> {
    vec![
        GradientSource::loss(false),
        GradientSource::loss(true),
        GradientSource::random(seed, false),
        GradientSource::random(seed, true),
    ]
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pair = uniform(&[2, 1, 16, 16], &mut rng);
    let eight = uniform(&[8, 1, 16, 16], &mut rng);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut runs = Vec::new();
    for name in REFERENCE_MODELS {
        runs.push((name, Mode::Eval, &pair));
    }
    runs.push(("mlp_small", Mode::Train, &eight));
    for (name, mode, x) in runs {
        let opts = GradCheckOptions { mode, ..Default::default() };
        let r = gradient_check_with(&reference_f64(name, 0), x, opts).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        if !r.passed {
            return Err(format!("{name} {mode:?}: max relative error {:.3e} at {:?}", r.max_rel_error, r.worst));
        }
    }
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(60),
        format!("{checked} partials, max relative error {worst:.3e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn oracles() -> Check {
    let mut b = ModelBuilder::<f64>::new(&[1], 0);
    let x = b.linear(Source::Input, 1, false, true);
    b.linear(x, 2, true, false);
    let m = b.build(2).unwrap();
    let feed = |estimator: Estimator, kind: SignalKind, values: Vec<f64>| -> f64 {
        let mut acc = Accumulator::new(&m, estimator);
        let examples = values.len();
        acc.accumulate(estimator, &Signals { kind, examples, per_site: vec![values] }).unwrap();
        acc.scores().unwrap()[0][0]
    };
    let cases = [
        (feed(Estimator::TaylorFo, SignalKind::Gate, vec![1.0, -2.0]), -0.5),
        (feed(Estimator::TaylorFoAbs, SignalKind::Gate, vec![1.0, -2.0]), 1.5),
        (feed(Estimator::TaylorFoSq, SignalKind::Gate, vec![1.0, -2.0]), 2.5),
        (
            feed(
                Estimator::MolchanovBn,
                SignalKind::BatchNorm,
                bn_gate_terms(&[2.0], &[1.0], &[3.0], &[-1.0]).unwrap(),
            ),
            25.0,
        ),
    ];
    let err = cases.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    let got: Vec<f64> = cases.iter().map(|c| c.0).collect();
    ensure(err <= 1e-12, format!("scores {got:?}, max error {err:.1e}"))
}

fn bn_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for instance in 0..20u64 {
        let (channels, side) = (rng.gen_range(2..7), rng.gen_range(3..8));
        let mut b = ModelBuilder::<f64>::new(&[2, side, side], instance);
        let x = b.conv(Source::Input, channels, 3, 1, 1, false, true);
        let x = b.batch_norm(x);
        let x = b.relu(x);
        let x = b.flatten(x);
        b.linear(x, 3, true, false);
        let mut m = b.build(3).unwrap();
        if let Layer::BatchNorm { gamma, beta, running_mean, running_var, .. } = &mut m.nodes_mut()[1].layer {
            gamma.data_mut().iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
            beta.data_mut().iter_mut().for_each(|b| *b = 0.0);
            running_mean.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            running_var.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        }
        let probe = m.add_probe_site(1).unwrap();
        let images = Tensor::new(&[1, 2, side, side], (0..2 * side * side).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let data = Dataset::new(images, None, 3, Split::Train, 0).unwrap();
        let source = GradientSource::random(instance, false);
        let accs = estimate_sites(&m, &data, 1, &[Estimator::MolchanovBn, Estimator::TaylorFoSq], &source, 1)
            .map_err(|e| e.to_string())?;
        let bn = &accs[0].site_scores().unwrap()[0].scores;
        let gate = &accs[1].site_scores().unwrap()[probe].scores;
        for (a, g) in bn.iter().zip(gate) {
            worst = worst.max((a - g).abs() / a.abs().max(g.abs()).max(1e-8));
        }
    }
    ensure(worst <= 1e-6, format!("20 instances, max relative difference {worst:.2e}"))
}

fn dead_neurons(data: &Dataset) -> Check {
    let mut checked = 0;
    let mut outgoing_dev: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&[6, 1, 16, 16], &mut rng);
    for name in REFERENCE_MODELS {
        let mut m = reference_f64(name, 2);
        zero_incoming(&mut m, 0, 3).map_err(|e| e.to_string())?;
        zero_outgoing(&mut m, 1, 5).map_err(|e| e.to_string())?;
        for source in all_sources(9) {
            for t in estimate_many(&m, data, 12, &Estimator::ALL, &source, 4).map_err(|e| e.to_string())? {
                for (site, ch) in [(0, 3), (1, 5)] {
                    if t.score(site, ch) != Some(0.0) {
                        return Err(format!("{name} {} {}: site {site} channel {ch} scored {:?}", t.estimator, t.source, t.score(site, ch)));
                    }
                    checked += 1;
                }
            }
        }
        let logits = m.infer(&x).unwrap();
        let mut keep = PruneMask::all_keep(&m);
        keep.keep[0][3] = false;
        let incoming = apply_mask(&m, &keep).unwrap().infer(&x).unwrap();
        if incoming != logits {
            return Err(format!("{name}: masking an incoming-zero channel changed the logits"));
        }
        keep.keep[0][3] = true;
        keep.keep[1][5] = false;
        let outgoing = apply_mask(&m, &keep).unwrap().infer(&x).unwrap();
        outgoing_dev = outgoing_dev.max(outgoing.max_abs_diff(&logits).unwrap());
        keep.keep[0][3] = false;
        let compacted = compact(&m, &keep).unwrap().infer(&x).unwrap();
        outgoing_dev = outgoing_dev.max(compacted.max_abs_diff(&logits).unwrap());
    }
    ensure(
        outgoing_dev <= 1e-10,
        format!("{checked} dead-channel scores exactly 0; incoming-zero masking exact; outgoing-zero deviation {outgoing_dev:.1e}"),
    )
}

fn randomize_norms(m: &mut Model<f64>, rng: &mut ChaCha8Rng) {
    for node in m.nodes_mut() {
        if let Layer::BatchNorm { gamma, beta, running_mean, running_var, .. } = &mut node.layer {
            gamma.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
            beta.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            running_mean.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            running_var.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        }
    }
}

fn compaction() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut dev64, mut dev32): (f64, f64) = (0.0, 0.0);
    let mut pruned = 0;
    for name in REFERENCE_MODELS {
        for trial in 0..100u64 {
            let mut m = reference_f64(name, 1000 + trial);
            randomize_norms(&mut m, &mut rng);
            let mask = PruneMask::random(&m, &mut rng);
            pruned += mask.pruned_count();
            dev64 = dev64.max(validate_equivalence(&m, &mask, 2, trial).map_err(|e| e.to_string())?);
            dev32 = dev32.max(validate_equivalence(&m.cast::<f32>(), &mask, 2, trial).map_err(|e| e.to_string())?);
        }
    }
    ensure(
        dev64 < 1e-10 && dev32 < 1e-5,
        format!("300 trials, {pruned} channels pruned; max deviation f64 {dev64:.1e}, f32 {dev32:.1e}"),
    )
}

fn partitions(data: &Dataset) -> Check {
    let mut worst: f64 = 0.0;
    let mut tables = 0;
    for name in REFERENCE_MODELS {
        let m = reference_f64(name, 3);
        for source in all_sources(11) {
            let base = estimate_many(&m, data, 10, &Estimator::ALL, &source, 1).map_err(|e| e.to_string())?;
            for batch in [3, 8] {
                let other = estimate_many(&m, data, 10, &Estimator::ALL, &source, batch).map_err(|e| e.to_string())?;
                for (a, b) in base.iter().zip(&other) {
                    worst = worst.max(max_diff(&a.scores(), &b.scores()));
                    tables += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-12, format!("{tables} table pairs at D=10, max difference {worst:.1e}"))
}

struct Reproduction {
    runs: Vec<TrainedRun>,
    sweeps: Vec<SweepResult>,
    train: Dataset,
    test: Dataset,
    elapsed: Duration,
}

fn figure_methods() -> Vec<Method> {
    vec![
        Method::new(Estimator::TaylorFoSq, SourceKind::Loss, false),
        Method::new(Estimator::TaylorFoAbs, SourceKind::Loss, false),
        Method::new(Estimator::TaylorFoSq, SourceKind::Random, true),
        Method::RANDOM,
    ]
}

fn reproduce() -> Reproduction {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let (train, test) = cfg.dataset.load().unwrap();
    let spec = SweepSpec {
        methods: figure_methods(),
        data_sizes: vec![DataSize::Full],
        prune: PruneGrid::Fractions(vec![0.3, 0.5]),
        ..Default::default()
    };
    let mut runs = Vec::new();
    let mut sweeps = Vec::new();
    for seed in 0..5 {
        let run = train_reference(&cfg, &train, seed).unwrap();
        sweeps.push(prune_sweep(&run.model, &train, &test, &spec, &cfg.train, seed).unwrap());
        runs.push(run);
    }
    Reproduction { runs, sweeps, train, test, elapsed: start.elapsed() }
}

fn mean_accuracy(rep: &Reproduction, method: &Method, fraction: f64) -> f64 {
    let n = rep.runs[0].model.prunable_channels();
    let p = (fraction * n as f64).round() as usize;
    let accs: Vec<f64> = rep
        .sweeps
        .iter()
        .map(|s| {
            s.select(method.estimator_name(), method.source_name(), method.normalize, p)
                .next()
                .expect("row present")
                .test_accuracy
        })
        .collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

fn pruning_beats_random(rep: &Reproduction) -> Check {
    let train_acc: Vec<f64> = rep.runs.iter().map(|r| r.log.last().unwrap().accuracy).collect();
    let min_train = train_acc.iter().cloned().fold(1.0, f64::min);
    let methods = figure_methods();
    let (sq, abs, random) = (
        mean_accuracy(rep, &methods[0], 0.5),
        mean_accuracy(rep, &methods[1], 0.5),
        mean_accuracy(rep, &methods[3], 0.5),
    );
    ensure(
        min_train >= 0.95 && sq - random >= 0.10 && abs - random >= 0.10 && rep.elapsed < Duration::from_secs(600),
        format!(
            "min train accuracy {min_train:.3}; at 50% pruning taylorfo_sq {sq:.3}, taylorfo_abs {abs:.3}, random {random:.3}; {:.0}s",
            rep.elapsed.as_secs_f64()
        ),
    )
}

fn random_gradients_suffice(rep: &Reproduction) -> Check {
    let methods = figure_methods();
    let (loss, random) = (mean_accuracy(rep, &methods[0], 0.3), mean_accuracy(rep, &methods[2], 0.3));
    ensure(
        (loss - random).abs() <= 0.05,
        format!("at 30% pruning taylorfo_sq loss {loss:.3}, normalized random {random:.3}"),
    )
}

fn seed_stability(rep: &Reproduction) -> Check {
    let model = &rep.runs[0].model;
    let mut rhos = Vec::new();
    for (a, b) in [(1, 2), (3, 4), (5, 6)] {
        let ta = estimate(model, &rep.train, 512, Estimator::TaylorFoSq, &GradientSource::random(a, true), 32);
        let tb = estimate(model, &rep.train, 512, Estimator::TaylorFoSq, &GradientSource::random(b, true), 32);
        let (ta, tb) = (ta.map_err(|e| e.to_string())?, tb.map_err(|e| e.to_string())?);
        rhos.push(rank_correlation(&ta, &tb).map_err(|e| e.to_string())?);
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    ensure(mean >= 0.8, format!("D=512, Spearman {rhos:.3?}, mean {mean:.3}"))
}

fn run_cli(args: &[&str], dir: &Path) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_neuroprune"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn label_free() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = generate_shapes(&GlyphSpec { per_class: 10, seed: 21, ..Default::default() }).unwrap();
    let mut permuted = data.clone();
    permuted.labels.as_mut().unwrap().shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    let p = |f: &str| dir.path().join(f);
    write_idx(&data, &p("images"), Some(&p("labels"))).map_err(|e| e.to_string())?;
    write_idx(&permuted, &p("images2"), Some(&p("permuted"))).map_err(|e| e.to_string())?;
    let model: Model<f32> = build_reference("cnn_small", &ReferenceConfig { seed: 3, ..Default::default() }).unwrap();
    checkpoint::save(&model, p("model.ckpt")).map_err(|e| e.to_string())?;

    let base = ["importance", "--source", "random", "--normalize", "--seed", "5", "--images", "images"];
    let mut outputs = Vec::new();
    for with_ckpt in [true, false] {
        for labels in [None, Some("labels"), Some("permuted")] {
            let mut args: Vec<&str> = base.to_vec();
            if with_ckpt {
                args.extend(["--checkpoint", "model.ckpt"]);
            }
            if let Some(l) = labels {
                args.extend(["--labels", l]);
            }
            outputs.push(run_cli(&args, dir.path())?);
        }
    }
    let header = String::from_utf8_lossy(&outputs[0]).lines().next().unwrap_or("").to_owned();
    let identical = outputs[..3].iter().all(|o| *o == outputs[0]) && outputs[3..].iter().all(|o| *o == outputs[3]);
    ensure(
        identical && outputs[0].len() > header.len(),
        format!("no labels, true labels and permuted labels give byte-identical CSVs ({} bytes, header `{header}`)", outputs[0].len()),
    )
}

fn data_size_grid(rep: &Reproduction) -> Check {
    let spec = SweepSpec {
        data_sizes: vec![DataSize::Count(2), DataSize::Count(10), DataSize::Count(100), DataSize::Full],
        ..Default::default()
    };
    let cfg = ExperimentConfig::default();
    let model = &rep.runs[0].model;
    let result = prune_sweep(model, &rep.train, &rep.test, &spec, &cfg.train, 0).map_err(|e| e.to_string())?;
    let counts = 10;
    let expected = spec.methods.len() * spec.data_sizes.len() * counts;
    let finite = result.rows.iter().all(|r| r.test_accuracy.is_finite() && (0.0..=1.0).contains(&r.test_accuracy));
    let full = rep.train.len();
    let mut sizes: Vec<usize> = result.rows.iter().map(|r| r.data_size).collect();
    sizes.sort();
    sizes.dedup();
    let mut tiny_finite = true;
    for source in all_sources(0) {
        for t in estimate_many(model, &rep.train, 2, &Estimator::ALL, &source, 32).map_err(|e| e.to_string())? {
            tiny_finite &= t.scores().iter().all(|s| s.is_finite()) && t.validate().is_ok();
        }
    }
    ensure(
        result.rows.len() == expected && finite && tiny_finite && sizes == vec![2, 10, 100, full],
        format!("{} rows (expected {expected}) over D = {sizes:?}; D=2 tables finite: {tiny_finite}", result.rows.len()),
    )
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = "model = cnn_small\ntrain_per_class = 30\ntest_per_class = 20\nepochs = 3\n\
                  data_sizes = 10, full\nprune_counts = 8, 24, 40\nseeds = 0, 1\n";
    std::fs::write(dir.path().join("sweep.cfg"), config).map_err(|e| e.to_string())?;
    run_cli(&["sweep", "--config", "sweep.cfg", "--out", "a.csv"], dir.path())?;
    run_cli(&["sweep", "--config", "sweep.cfg", "--out", "b.csv"], dir.path())?;
    let a = std::fs::read(dir.path().join("a.csv")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dir.path().join("b.csv")).map_err(|e| e.to_string())?;
    let rows = a.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
    ensure(a == b && rows > 0, format!("two sweep runs, {rows} rows each, byte-identical: {}", a == b))
}

#[test]
fn acceptance_suite() {
    let glyphs = generate_split(&GlyphSpec { seed: 2, ..Default::default() }, 4, 1).unwrap().0;
    let mut outcomes = Vec::new();
    report(&mut outcomes, 1, "gradient check", gradients());
    report(&mut outcomes, 2, "estimator oracles", oracles());
    report(&mut outcomes, 3, "BatchNorm equivalence", bn_equivalence());
    report(&mut outcomes, 4, "dead channels", dead_neurons(&glyphs));
    report(&mut outcomes, 5, "mask/compaction equivalence", compaction());
    report(&mut outcomes, 6, "partition invariance", partitions(&glyphs));
    let rep = reproduce();
    report(&mut outcomes, 7, "pruning beats random ranking", pruning_beats_random(&rep));
    report(&mut outcomes, 8, "random gradients match loss gradients", random_gradients_suffice(&rep));
    report(&mut outcomes, 9, "seed stability", seed_stability(&rep));
    report(&mut outcomes, 10, "label-free pipeline", label_free());
    report(&mut outcomes, 11, "data-size sweep", data_size_grid(&rep));
    report(&mut outcomes, 12, "determinism", determinism());
    let failed: Vec<usize> = outcomes.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
