//! Central finite-difference oracle for the tape's analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::NamedTensorSet;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Which coordinates of each tensor are perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many evenly spaced coordinates per tensor.
    Strided(usize),
}

fn coordinates(n: usize, cov: Coverage) -> Vec<usize> {
    match cov {
        Coverage::Strided(k) if k < n => {
            let step = n as f64 / k as f64;
            (0..k).map(|i| (i as f64 * step) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Evaluates `build` on a fresh tape over `params` and returns the scalar.
pub fn evaluate<S: Scalar, F>(build: &F, params: &NamedTensorSet<S>, mode: Mode) -> Result<f64>
where
    F: Fn(&mut Graph<S>) -> Result<Var>,
{
    let mut g = Graph::new(params, mode);
    let out = build(&mut g)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::contract("gradient check needs a scalar function"));
    }
    Ok(v.item().f64())
}

/// Analytic gradients of every trainable tensor via one reverse sweep.
pub fn analytic_gradient<S: Scalar, F>(
    build: &F,
    params: &NamedTensorSet<S>,
    mode: Mode,
) -> Result<NamedTensorSet<S>>
where
    F: Fn(&mut Graph<S>) -> Result<Var>,
{
    let mut g = Graph::new(params, mode);
    let out = build(&mut g)?;
    Ok(g.backward(out)?.named(params))
}

/// Finite-difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p+e) - f(p-e)) / 2e`
    Central,
    /// `(f(p-2e) - 8f(p-e) + 8f(p+e) - f(p+2e)) / 12e`
    FivePoint,
}

impl Stencil {
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::Central => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::FivePoint => &[
                (-2.0, 1.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (2.0, -1.0 / 12.0),
            ],
        }
    }
}

/// Central differences for the chosen coordinates; coordinates not visited
/// are left at zero.
pub fn numeric_gradient<S: Scalar, F>(
    build: &F,
    params: &NamedTensorSet<S>,
    mode: Mode,
    epsilon: f64,
    coverage: Coverage,
) -> Result<NamedTensorSet<S>>
where
    F: Fn(&mut Graph<S>) -> Result<Var>,
{
    numeric_gradient_with(build, params, mode, Stencil::Central, epsilon, coverage)
}

pub fn numeric_gradient_with<S: Scalar, F>(
    build: &F,
    params: &NamedTensorSet<S>,
    mode: Mode,
    stencil: Stencil,
    epsilon: f64,
    coverage: Coverage,
) -> Result<NamedTensorSet<S>>
where
    F: Fn(&mut Graph<S>) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::contract("finite difference epsilon must be positive"));
    }
    let base = evaluate(build, params, mode)?;
    let again = evaluate(build, params, mode)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }
    let mut work = params.clone();
    let mut out = params.zeros_like_trainable();
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let n = params.get(&name)?.numel();
        for i in coordinates(n, coverage) {
            let orig = params.get(&name)?.data()[i];
            let mut acc = 0.0;
            for &(offset, weight) in stencil.taps() {
                work.get_mut(&name)?.data_mut()[i] = orig + S::of(offset * epsilon);
                acc += weight * evaluate(build, &work, mode)?;
            }
            work.get_mut(&name)?.data_mut()[i] = orig;
            out.get_mut(&name)?.data_mut()[i] = S::of(acc / epsilon);
        }
    }
    Ok(out)
}

/// Largest coordinate-wise relative error between two gradient sets over
/// the coordinates selected by `coverage`.
pub fn compare<S: Scalar>(
    analytic: &NamedTensorSet<S>,
    numeric: &NamedTensorSet<S>,
    coverage: Coverage,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (name, num) in numeric.trainable() {
        let ana: &Tensor<S> = analytic.get(name)?;
        for i in coordinates(num.numel(), coverage) {
            let e = relative_error(ana.data()[i].f64(), num.data()[i].f64());
            report.coordinates += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((name.to_string(), i));
            }
        }
    }
    Ok(report)
}

/// Compares reverse-mode gradients of `build` with central differences over
/// every trainable tensor in `params`.
pub fn finite_diff_check<S: Scalar, F>(
    build: F,
    params: &NamedTensorSet<S>,
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<S>) -> Result<Var>,
{
    finite_diff_check_with(build, params, epsilon, Mode::Train, Coverage::All)
}

pub fn finite_diff_check_with<S: Scalar, F>(
    build: F,
    params: &NamedTensorSet<S>,
    epsilon: f64,
    mode: Mode,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<S>) -> Result<Var>,
{
    let analytic = analytic_gradient(&build, params, mode)?;
    let numeric = numeric_gradient(&build, params, mode, epsilon, coverage)?;
    compare(&analytic, &numeric, coverage)
}

/// Stencils and step sizes tried per coordinate by `finite_diff_check_ladder`.
pub const EPSILON_LADDER: [(Stencil, f64); 5] = [
    (Stencil::Central, 1e-4),
    (Stencil::Central, 3e-5),
    (Stencil::Central, 1e-5),
    (Stencil::FivePoint, 1e-3),
    (Stencil::FivePoint, 3e-3),
];

/// Like `finite_diff_check_with`, but each coordinate is scored by its best
/// agreement over several stencils and step sizes. Large steps can straddle
/// a kink of a piecewise-linear op and small steps lose tiny gradients to
/// roundoff; an analytic error shows at every rung.
pub fn finite_diff_check_ladder<S: Scalar, F>(
    build: F,
    params: &NamedTensorSet<S>,
    ladder: &[(Stencil, f64)],
    mode: Mode,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<S>) -> Result<Var>,
{
    if ladder.is_empty() {
        return Err(Error::contract("epsilon ladder is empty"));
    }
    let analytic = analytic_gradient(&build, params, mode)?;
    let numerics = ladder
        .iter()
        .map(|&(st, e)| numeric_gradient_with(&build, params, mode, st, e, coverage))
        .collect::<Result<Vec<_>>>()?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (name, _) in numerics[0].trainable() {
        let ana = analytic.get(name)?;
        let nums = numerics.iter().map(|n| n.get(name)).collect::<Result<Vec<_>>>()?;
        for i in coordinates(ana.numel(), coverage) {
            let a = ana.data()[i].f64();
            let e = nums
                .iter()
                .map(|n| relative_error(a, n.data()[i].f64()))
                .fold(f64::INFINITY, f64::min);
            report.coordinates += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((name.to_string(), i));
            }
        }
    }
    Ok(report)
}
