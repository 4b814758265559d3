//! Finite-difference verification of the reverse pass.
//!
//! Each parameter partial of `f(θ) = ⟨logits(θ), g⟩` (with `g` a fixed
//! standard-normal output gradient) is compared against a central difference.
//! The perturbed passes reuse the ReLU and max-pool decisions of the
//! unperturbed pass, so the difference quotient measures the derivative of the
//! active linear piece even when a perturbation would otherwise cross a kink;
//! such crossings are counted in [`GradCheckReport::gate_flips`].
//!
//! Difference quotients are first taken in f64. A partial that misses the
//! tolerance is re-evaluated with the same step in double-double arithmetic
//! before it is judged, so that cancellation noise in the two forward passes
//! (which dominates for partials near zero) is not mistaken for an adjoint
//! error. [`GradCheckReport::refined`] counts these re-evaluations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use twofloat::TwoFloat;

use super::forward::{ForwardRecord, Mode};
use super::model::Model;
use crate::error::Result;
use crate::par;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tolerance: 1e-6,
            mode: Mode::Train,
            seed: 0x6772_6164,
        }
    }
}

/// Location of one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLocation {
    pub node: usize,
    pub param: usize,
    pub element: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Partial with the largest relative error.
    pub worst: Option<ParamLocation>,
    /// Node of the worst partial, when it exceeds the tolerance.
    pub failing_node: Option<usize>,
    pub checked: usize,
    pub gate_flips: usize,
    /// Partials re-evaluated in extended precision.
    pub refined: usize,
    pub passed: bool,
}

/// Relative error with the denominator floored at 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn gradient_check(
    model: &Model<f64>,
    input: &Tensor<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    gradient_check_with(
        model,
        input,
        GradCheckOptions {
            tolerance,
            ..Default::default()
        },
    )
}

pub fn gradient_check_with(
    model: &Model<f64>,
    input: &Tensor<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let base = model.forward_pass(input, opts.mode, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shape = base.logits().shape().to_vec();
    let g = Tensor::new(
        &shape,
        (0..base.logits().len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    )?;
    let analytic = model.backward_pass(&base, &g, true)?.param_grads;

    let locations: Vec<ParamLocation> = model
        .nodes()
        .iter()
        .enumerate()
        .flat_map(|(node, n)| {
            n.layer
                .params()
                .into_iter()
                .enumerate()
                .flat_map(move |(param, p)| {
                    (0..p.len()).map(move |element| ParamLocation {
                        node,
                        param,
                        element,
                    })
                })
        })
        .collect();

    const CHUNK: usize = 64;
    let chunks: Vec<&[ParamLocation]> = locations.chunks(CHUNK).collect();
    let results = par::map_slice(&chunks, |chunk| -> Result<Vec<(f64, usize)>> {
        let mut work = model.clone();
        chunk
            .iter()
            .map(|loc| numeric_partial(&mut work, &base, &g, *loc, opts.epsilon))
            .collect()
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        failing_node: None,
        checked: locations.len(),
        gate_flips: 0,
        refined: 0,
        passed: true,
    };
    let mut suspects = Vec::new();
    let mut errors = Vec::with_capacity(locations.len());
    for (chunk, res) in chunks.iter().zip(results) {
        for (loc, (numeric, flips)) in chunk.iter().zip(res?) {
            report.gate_flips += flips;
            let a = analytic[loc.node][loc.param].data()[loc.element];
            let err = relative_error(a, numeric);
            if err >= opts.tolerance {
                suspects.push(errors.len());
            }
            errors.push(err);
        }
    }
    if !suspects.is_empty() {
        let mut wide = model.cast::<TwoFloat>();
        let frozen = base.cast::<TwoFloat>();
        let wide_base = wide.forward_pass(&frozen.input, opts.mode, Some(&frozen))?;
        let wide_g = g.cast::<TwoFloat>();
        for &i in &suspects {
            let loc = locations[i];
            let (numeric, _) = numeric_partial(&mut wide, &wide_base, &wide_g, loc, opts.epsilon)?;
            let a = analytic[loc.node][loc.param].data()[loc.element];
            errors[i] = relative_error(a, numeric);
        }
        report.refined = suspects.len();
    }
    for (loc, &err) in locations.iter().zip(&errors) {
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some(*loc);
        }
    }
    report.passed = report.max_rel_error < opts.tolerance;
    if !report.passed {
        report.failing_node = report.worst.map(|w| w.node);
    }
    Ok(report)
}

fn numeric_partial<S: Scalar>(
    work: &mut Model<S>,
    base: &ForwardRecord<S>,
    g: &Tensor<S>,
    loc: ParamLocation,
    eps: f64,
) -> Result<(f64, usize)> {
    let read = |m: &mut Model<S>| {
        m.nodes_untracked()[loc.node].layer.params_mut()[loc.param].data()[loc.element]
    };
    let write = |m: &mut Model<S>, v: S| {
        m.nodes_untracked()[loc.node].layer.params_mut()[loc.param].data_mut()[loc.element] = v;
    };
    let theta = read(work);
    let (hi, lo) = (theta + S::of(eps), theta - S::of(eps));
    write(work, hi);
    let plus = work.forward_resume(base, loc.node)?;
    write(work, lo);
    let minus = work.forward_resume(base, loc.node)?;
    write(work, theta);
    let mut diff = S::zero();
    for ((&p, &m), &gv) in plus
        .logits()
        .data()
        .iter()
        .zip(minus.logits().data())
        .zip(g.data())
    {
        diff += (p - m) * gv;
    }
    Ok(((diff / (hi - lo)).f64(), plus.gate_flips + minus.gate_flips))
}
