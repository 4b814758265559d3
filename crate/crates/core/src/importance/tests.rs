use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_shapes, Dataset, GlyphSpec, Split};
use crate::error::Error;
use crate::nn::{build_reference, Layer, Model, ModelBuilder, ReferenceConfig, Source, REFERENCE_MODELS};
use crate::pruning::{zero_incoming, zero_outgoing};
use crate::tensor::Tensor;

fn glyphs(per_class: usize) -> Dataset {
    generate_shapes(&GlyphSpec {
        per_class,
        seed: 1,
        ..Default::default()
    })
    .unwrap()
}

fn model(name: &str) -> Model<f64> {
    build_reference(name, &ReferenceConfig::default()).unwrap()
}

fn sources() -> [GradientSource; 4] {
    [
        GradientSource::loss(false),
        GradientSource::loss(true),
        GradientSource::random(3, false),
        GradientSource::random(3, true),
    ]
}

#[test]
fn two_examples_give_finite_scores_everywhere() {
    let data = glyphs(2);
    for name in REFERENCE_MODELS {
        let m = build_reference::<f32>(name, &ReferenceConfig::default()).unwrap();
        for t in estimate_many(&m, &data, 2, &Estimator::ALL, &GradientSource::random(0, true), 2).unwrap() {
            assert_eq!(t.len(), m.prunable_channels());
            assert!(t.scores().iter().all(|s| s.is_finite()));
            assert_eq!(t.data_size, 2);
        }
    }
}

#[test]
fn random_source_never_reads_labels() {
    let data = glyphs(2);
    let m = model("cnn_small");
    let src = GradientSource::random(5, true);
    let with = estimate_many(&m, &data, 6, &Estimator::ALL, &src, 4).unwrap();
    let without = estimate_many(&m, &data.without_labels(), 6, &Estimator::ALL, &src, 4).unwrap();
    assert_eq!(with, without);
    let loss = estimate(&m, &data.without_labels(), 6, Estimator::TaylorFo, &GradientSource::loss(false), 4);
    assert!(matches!(loss, Err(Error::Input(_))));
}

#[test]
fn batch_partition_does_not_matter() {
    let data = glyphs(2);
    for name in REFERENCE_MODELS {
        let m = model(name);
        for src in sources() {
            let reference = estimate_many(&m, &data, 8, &Estimator::ALL, &src, 8).unwrap();
            for b in [1, 3] {
                assert_eq!(estimate_many(&m, &data, 8, &Estimator::ALL, &src, b).unwrap(), reference);
            }
        }
    }
}

#[test]
fn group_score_matches_squared_gate_score() {
    // Σ_w w·δw(n) + b·δb(n) over a channel's weights equals Σ x·δx at its output.
    let data = glyphs(2);
    for name in REFERENCE_MODELS {
        let m = model(name);
        let t = estimate_many(&m, &data, 5, &[Estimator::MolchanovGroup, Estimator::TaylorFoSq], &GradientSource::random(1, false), 5).unwrap();
        for (g, s) in t[0].scores().iter().zip(t[1].scores()) {
            assert!((g - s).abs() <= 1e-9 * s.abs().max(1e-12), "{name}: {g} vs {s}");
        }
    }
}

#[test]
fn group_score_of_one_input_linear_layer() {
    let images = Tensor::new(&[4, 1, 1, 1], vec![0.3, 0.9, 0.1, 0.6]).unwrap();
    let data = Dataset::new(images, None, 2, Split::Train, 0).unwrap();
    let mut b = ModelBuilder::<f64>::new(&[1, 1, 1], 2);
    let x = b.flatten(Source::Input);
    let h = b.linear(x, 3, false, true);
    let h = b.relu(h);
    b.linear(h, 2, true, false);
    let m = b.build(2).unwrap();
    let t = estimate_many(&m, &data, 4, &[Estimator::MolchanovGroup, Estimator::TaylorFoSq], &GradientSource::random(8, false), 2).unwrap();
    for (g, s) in t[0].scores().iter().zip(t[1].scores()) {
        assert!((g - s).abs() <= 1e-12 * s.abs().max(1e-300));
    }
}

#[test]
fn dead_channels_score_zero() {
    let data = glyphs(2);
    for name in REFERENCE_MODELS {
        let mut m = model(name);
        zero_incoming(&mut m, 0, 3).unwrap();
        zero_outgoing(&mut m, 1, 5).unwrap();
        for src in sources() {
            for t in estimate_many(&m, &data, 6, &Estimator::ALL, &src, 3).unwrap() {
                assert_eq!(t.score(0, 3), Some(0.0), "{name} {} incoming", t.estimator);
                assert_eq!(t.score(1, 5), Some(0.0), "{name} {} outgoing", t.estimator);
                if t.estimator != "taylorfo" {
                    assert!(t.scores().iter().all(|&s| s >= 0.0));
                }
            }
        }
    }
}

#[test]
fn batchnorm_score_equals_squared_gate_at_bn_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for instance in 0..5 {
        let mut b = ModelBuilder::<f64>::new(&[1, 5, 5], instance);
        let x = b.conv(Source::Input, 4, 3, 1, 1, false, true);
        let x = b.batch_norm(x);
        let x = b.relu(x);
        let x = b.flatten(x);
        b.linear(x, 3, true, false);
        let mut m = b.build(3).unwrap();
        if let Layer::BatchNorm { gamma, running_mean, running_var, .. } = &mut m.nodes_mut()[1].layer {
            gamma.data_mut().iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
            running_mean.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            running_var.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        }
        let probe = m.add_probe_site(1).unwrap();
        let images = Tensor::new(&[1, 1, 5, 5], (0..25).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let data = Dataset::new(images, None, 3, Split::Train, 0).unwrap();
        let accs = estimate_sites(&m, &data, 1, &[Estimator::MolchanovBn, Estimator::TaylorFoSq], &GradientSource::random(instance, false), 1).unwrap();
        let bn = &accs[0].site_scores().unwrap()[0].scores;
        let gate = &accs[1].site_scores().unwrap()[probe].scores;
        for (a, b) in bn.iter().zip(gate) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-8), "{a} vs {b}");
        }
    }
}

#[test]
fn invalid_requests() {
    let data = glyphs(1);
    let m = model("mlp_small");
    let src = GradientSource::random(0, false);
    for (d, b) in [(0, 1), (5, 1), (2, 0)] {
        assert!(matches!(estimate(&m, &data, d, Estimator::TaylorFo, &src, b), Err(Error::Input(_))));
    }
    assert!(estimate_many(&m, &data, 2, &[], &src, 1).is_err());
}

#[test]
fn random_baseline_is_seeded() {
    let m = model("cnn_small");
    assert_eq!(random_table(&m, 4), random_table(&m, 4));
    assert_ne!(random_table(&m, 4).scores(), random_table(&m, 5).scores());
    assert_eq!(random_table(&m, 4).len(), 80);
}
