//! Finite-difference checks of each network module at tiny shapes.
//!
//! Inputs are registered as trainable tensors so the check covers gradients
//! with respect to activations and recurrent state as well as weights. The
//! checked scalar is a fixed random projection of the module outputs.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ablation::{AblationConfig, N_HEADS};
use crate::ccnn::{CcnnConfig, CcnnLayer, CcnnState};
use crate::ceaef::Ceaef;
use crate::decoder::{Dfi, Mfe, Sfi};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_ladder, finite_diff_check_with, Coverage, GradCheckReport, EPSILON_LADDER};
use crate::graph::{Graph, Mode, Var};
use crate::params::NamedTensorSet;
use crate::supervision::{awl_total, LossTerms};
use crate::tensor::{Scalar, Tensor};

/// Largest channel count and side length used by the suite.
pub const MAX_CHANNELS: usize = 8;
pub const MAX_SIDE: usize = 8;
pub const TOLERANCE_F64: f64 = 1e-4;
pub const TOLERANCE_F32: f64 = 5e-2;
const EPSILON_F32: f64 = 1e-2;
const CCNN_STEPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckModule {
    Ccnn,
    Ceaef,
    Sfi,
    Dfi,
    Mfe,
    Loss,
}

impl CheckModule {
    pub const ALL: [CheckModule; 6] = [Self::Ccnn, Self::Ceaef, Self::Sfi, Self::Dfi, Self::Mfe, Self::Loss];
}

impl fmt::Display for CheckModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Ccnn => "ccnn",
            Self::Ceaef => "ceaef",
            Self::Sfi => "sfi",
            Self::Dfi => "dfi",
            Self::Mfe => "mfe",
            Self::Loss => "loss",
        })
    }
}

impl FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: CheckModule,
    pub report: GradCheckReport,
    pub seconds: f64,
}

struct Fixture<S> {
    store: NamedTensorSet<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Fixture<S> {
    fn new(seed: u64) -> Self {
        Self {
            store: NamedTensorSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn random(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| S::of(rng.gen_range(lo..hi)))
    }

    fn input(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) {
        let t = self.random(shape, lo, hi);
        self.store.insert(name, t, true);
    }

    fn state(&mut self, prefix: &str, shape: &[usize]) {
        self.input(&format!("{prefix}.f"), shape, -1.0, 1.0);
        self.input(&format!("{prefix}.l"), shape, -1.0, 1.0);
        self.input(&format!("{prefix}.e"), shape, 0.2, 1.5);
        self.input(&format!("{prefix}.y"), shape, 0.1, 0.9);
    }

    /// Projection weights for the output named `name`.
    fn probe(&mut self, name: &str, shape: &[usize]) {
        let t = self.random(shape, -1.0, 1.0);
        self.store.insert(name, t, false);
    }
}

fn state_of<S: Scalar>(g: &mut Graph<S>, prefix: &str) -> Result<CcnnState> {
    Ok(CcnnState {
        f: g.param(&format!("{prefix}.f"))?,
        l: g.param(&format!("{prefix}.l"))?,
        e: g.param(&format!("{prefix}.e"))?,
        y: g.param(&format!("{prefix}.y"))?,
        n: 0,
    })
}

/// `sum_k <probe_k, out_k>` with the probes read from the store.
fn project<S: Scalar>(g: &mut Graph<S>, outs: &[(&str, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(probe, v) in outs {
        let p = g.param(probe)?;
        let pv = g.mul(p, v)?;
        let s = g.sum(pv);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    total.ok_or_else(|| Error::contract("nothing to project"))
}

/// f64 checks score each coordinate over `EPSILON_LADDER`; single precision
/// uses one coarse step because roundoff dominates any finer one.
fn check_params<S: Scalar>(
    build: impl Fn(&mut Graph<S>) -> Result<Var>,
    store: &NamedTensorSet<S>,
) -> Result<GradCheckReport> {
    if S::of(1.0 + 1e-10).f64() == 1.0 {
        finite_diff_check_with(build, store, EPSILON_F32, Mode::Train, Coverage::All)
    } else {
        finite_diff_check_ladder(build, store, &EPSILON_LADDER, Mode::Train, Coverage::All)
    }
}

const B: usize = 2;
const C: usize = 4;
const H: usize = 6;
const W: usize = 6;

fn ccnn_cfg() -> CcnnConfig {
    CcnnConfig::default()
}

pub fn check_module<S: Scalar>(module: CheckModule) -> Result<GradCheckReport> {
    let shape = [B, C, H, W];
    match module {
        CheckModule::Ccnn => {
            let mut fx = Fixture::<S>::new(11);
            let layer = CcnnLayer::new("ccnn", C, ccnn_cfg());
            layer.init(&mut fx.store, &mut fx.rng);
            fx.input("in.x", &shape, -1.0, 1.0);
            fx.state("in.state", &shape);
            for p in ["probe.y", "probe.f", "probe.l", "probe.e", "probe.y_last"] {
                fx.probe(p, &shape);
            }
            check_params(
                |g: &mut Graph<S>| {
                    let x = g.param("in.x")?;
                    let st = state_of(g, "in.state")?;
                    let (y, st) = layer.forward(g, st, x, CCNN_STEPS)?;
                    project(
                        g,
                        &[
                            ("probe.y", y),
                            ("probe.f", st.f),
                            ("probe.l", st.l),
                            ("probe.e", st.e),
                            ("probe.y_last", st.y),
                        ],
                    )
                },
                &fx.store,
            )
        }
        CheckModule::Ceaef => {
            let mut fx = Fixture::<S>::new(12);
            let m = Ceaef::new("fuse", C, C, 2);
            m.init(&mut fx.store, &mut fx.rng);
            fx.input("in.r", &shape, -1.0, 1.0);
            fx.input("in.t", &shape, -1.0, 1.0);
            fx.probe("probe.out", &shape);
            check_params(
                |g: &mut Graph<S>| {
                    let r = g.param("in.r")?;
                    let t = g.param("in.t")?;
                    let out = m.forward(g, r, t)?;
                    project(g, &[("probe.out", out)])
                },
                &fx.store,
            )
        }
        CheckModule::Sfi => {
            let mut fx = Fixture::<S>::new(13);
            let m = Sfi::new("sfi", C, &ccnn_cfg());
            m.init(&mut fx.store, &mut fx.rng);
            for n in ["in.e1", "in.e2", "in.s"] {
                fx.input(n, &shape, -1.0, 1.0);
            }
            fx.state("in.state", &shape);
            fx.probe("probe.s", &shape);
            fx.probe("probe.y", &shape);
            check_params(
                |g: &mut Graph<S>| {
                    let e1 = g.param("in.e1")?;
                    let e2 = g.param("in.e2")?;
                    let s = g.param("in.s")?;
                    let st = state_of(g, "in.state")?;
                    let (tr, st) = m.forward(g, e1, e2, s, st, CCNN_STEPS, true)?;
                    project(g, &[("probe.s", tr.s_out), ("probe.y", st.y)])
                },
                &fx.store,
            )
        }
        CheckModule::Dfi => {
            let mut fx = Fixture::<S>::new(14);
            let m = Dfi::new("dfi", C, 2, H, W, &ccnn_cfg());
            m.init(&mut fx.store, &mut fx.rng);
            for n in ["in.e3", "in.e4", "in.d"] {
                fx.input(n, &shape, -1.0, 1.0);
            }
            fx.state("in.state", &shape);
            fx.probe("probe.d", &shape);
            fx.probe("probe.y", &shape);
            check_params(
                |g: &mut Graph<S>| {
                    let e3 = g.param("in.e3")?;
                    let e4 = g.param("in.e4")?;
                    let d = g.param("in.d")?;
                    let st = state_of(g, "in.state")?;
                    let (tr, st) = m.forward(g, e3, e4, d, st, CCNN_STEPS)?;
                    project(g, &[("probe.d", tr.d_out), ("probe.y", st.y)])
                },
                &fx.store,
            )
        }
        CheckModule::Mfe => {
            let mut fx = Fixture::<S>::new(15);
            let m = Mfe::new("mfe", C, 2);
            m.init(&mut fx.store, &mut fx.rng);
            // move the blend scalars off their zero initialisation
            for name in [m.delta_name(), m.gamma_name()] {
                let v = fx.random(&[1, 1, 1, 1], -1.0, 1.0);
                fx.store.set(&name, v)?;
            }
            for n in ["in.s", "in.d", "in.m"] {
                fx.input(n, &shape, -1.0, 1.0);
            }
            for p in ["probe.f", "probe.s", "probe.d", "probe.m"] {
                fx.probe(p, &shape);
            }
            check_params(
                |g: &mut Graph<S>| {
                    let s = g.param("in.s")?;
                    let d = g.param("in.d")?;
                    let mp = g.param("in.m")?;
                    let o = m.forward(g, s, d, mp)?;
                    project(
                        g,
                        &[("probe.f", o.f_fuse), ("probe.s", o.s), ("probe.d", o.d), ("probe.m", o.m)],
                    )
                },
                &fx.store,
            )
        }
        CheckModule::Loss => {
            let mut fx = Fixture::<S>::new(16);
            let classes = [2, 2, 2, 2, 2, 2, 5];
            let mut targets = Vec::new();
            for (k, &kc) in classes.iter().enumerate() {
                fx.input(&format!("in.logits{k}"), &[B, kc, H, W], -2.0, 2.0);
                targets.push((0..B * H * W).map(|_| fx.rng.gen_range(0..kc)).collect::<Vec<usize>>());
            }
            fx.input("awl.s", &[N_HEADS], -1.0, 1.0);
            let abl = AblationConfig::default();
            check_params(
                |g: &mut Graph<S>| {
                    let mut terms = Vec::with_capacity(N_HEADS);
                    for (k, t) in targets.iter().enumerate() {
                        let l = g.param(&format!("in.logits{k}"))?;
                        terms.push(g.cross_entropy(l, t)?);
                    }
                    let losses = LossTerms {
                        terms: terms.try_into().expect("seven heads"),
                    };
                    let s = g.param("awl.s")?;
                    awl_total(g, &losses, s, &abl)
                },
                &fx.store,
            )
        }
    }
}

/// Runs `modules` in order and times each one.
pub fn run<S: Scalar>(modules: &[CheckModule]) -> Result<Vec<ModuleCheck>> {
    modules
        .iter()
        .map(|&module| {
            let started = Instant::now();
            let report = check_module::<S>(module)?;
            Ok(ModuleCheck {
                module,
                report,
                seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
