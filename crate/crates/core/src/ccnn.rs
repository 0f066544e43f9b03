//! Continuous-coupled neuron layer.
//!
//! One step updates, in order,
//!
//! ```text
//! F <- exp(-alpha_f) F + conv_m(Y) + X
//! L <- exp(-alpha_l) L + conv_w(Y)
//! U  = F * (1 + beta L)
//! E <- exp(-alpha_e) E + v_e Y
//! Y  = sigmoid(U - E)
//! ```
//!
//! where `Y` on the right-hand side is the previous output. A layer runs
//! `T` steps on the same drive and emits the mean of the `T` outputs. The
//! state is never reset between layers: a lineage starts silent once and is
//! threaded through every layer that follows.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::nn::Conv;
use crate::params::NamedTensorSet;
use crate::tensor::{Scalar, Tensor};

/// Clamp applied to `Y` after a state is resampled to a new shape.
pub const Y_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CcnnMode {
    Full,
    /// `beta = 0` and the feedback convolution removed: neurons no longer
    /// interact.
    Nolinking,
    /// The layer returns its drive unchanged and leaves the state alone.
    Bypass,
}

impl std::str::FromStr for CcnnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "nolinking" => Ok(Self::Nolinking),
            "identity-bypass" | "bypass" => Ok(Self::Bypass),
            other => Err(Error::Config(format!("unknown ccnn mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for CcnnMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Nolinking => "nolinking",
            Self::Bypass => "identity-bypass",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcnnConfig {
    pub alpha_f: f64,
    pub alpha_l: f64,
    pub alpha_e: f64,
    pub v_e: f64,
    pub beta: f64,
    pub kernel: usize,
    pub dilation: usize,
    pub mode: CcnnMode,
}

impl Default for CcnnConfig {
    fn default() -> Self {
        Self {
            alpha_f: 0.1,
            alpha_l: 1.0,
            alpha_e: 0.4,
            v_e: 1.0,
            beta: 0.5,
            kernel: 7,
            dilation: 1,
            mode: CcnnMode::Full,
        }
    }
}

impl CcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_f > 0.0 && self.alpha_l > 0.0 && self.alpha_e > 0.0) {
            return Err(Error::Config("ccnn decay exponents must be positive".into()));
        }
        if !(self.v_e >= 0.0) {
            return Err(Error::Config("ccnn.v_e must be non-negative".into()));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("ccnn.beta must be finite".into()));
        }
        if self.kernel.is_multiple_of(2) || self.dilation == 0 {
            return Err(Error::Config("ccnn kernel must be odd and dilation positive".into()));
        }
        Ok(())
    }

    /// Linking strength actually used, zero in the nolinking variant.
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            CcnnMode::Nolinking => 0.0,
            _ => self.beta,
        }
    }
}

/// Dynamical signals of one lineage, resident on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CcnnState {
    pub f: Var,
    pub l: Var,
    pub e: Var,
    pub y: Var,
    /// Total steps taken by the lineage so far.
    pub n: usize,
}

impl CcnnState {
    /// Silent state: every field zero, no steps taken.
    pub fn zeros<S: Scalar>(g: &mut Graph<S>, shape: &[usize]) -> Self {
        let z = g.constant(Tensor::zeros(shape));
        Self {
            f: z,
            l: z,
            e: z,
            y: z,
            n: 0,
        }
    }

    pub fn shape<'g, S: Scalar>(&self, g: &'g Graph<S>) -> &'g [usize] {
        g.shape(self.f)
    }

    pub fn fields(&self) -> [Var; 4] {
        [self.f, self.l, self.e, self.y]
    }
}

/// Transient values of one step, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    pub u: Var,
}

#[derive(Clone, Debug)]
pub struct CcnnLayer {
    pub name: String,
    pub channels: usize,
    pub cfg: CcnnConfig,
    conv_m: Conv,
    conv_w: Conv,
}

impl CcnnLayer {
    pub fn new(name: &str, channels: usize, cfg: CcnnConfig) -> Self {
        let spec = ConvSpec::dilated(cfg.kernel, cfg.dilation);
        Self {
            name: name.to_string(),
            channels,
            conv_m: Conv::new(format!("{name}.conv_m"), channels, channels, cfg.kernel, spec).without_bias(),
            conv_w: Conv::new(format!("{name}.conv_w"), channels, channels, cfg.kernel, spec).without_bias(),
            cfg,
        }
    }

    pub fn conv_m_name(&self) -> String {
        self.conv_m.weight_name()
    }

    pub fn conv_w_name(&self) -> String {
        self.conv_w.weight_name()
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.conv_m.init(store, rng);
        self.conv_w.init(store, rng);
    }

    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, state: CcnnState, input: Var) -> Result<(CcnnState, StepTrace)> {
        if g.shape(input) != state.shape(g) {
            return Err(Error::dim(
                "ccnn_step",
                "all",
                format!("input {:?} vs state {:?}", g.shape(input), state.shape(g)),
            ));
        }
        let cfg = &self.cfg;
        let f_decay = g.scale(state.f, (-cfg.alpha_f).exp());
        let f = match cfg.mode {
            CcnnMode::Nolinking => g.add(f_decay, input)?,
            _ => {
                let fb = self.conv_m.forward(g, state.y)?;
                let f = g.add(f_decay, fb)?;
                g.add(f, input)?
            }
        };
        let l_decay = g.scale(state.l, (-cfg.alpha_l).exp());
        let link = self.conv_w.forward(g, state.y)?;
        let l = g.add(l_decay, link)?;
        let beta = cfg.effective_beta();
        let u = if beta == 0.0 {
            f
        } else {
            let gain = g.affine(l, beta, 1.0);
            g.mul(f, gain)?
        };
        let e_decay = g.scale(state.e, (-cfg.alpha_e).exp());
        let e_gain = g.scale(state.y, cfg.v_e);
        let e = g.add(e_decay, e_gain)?;
        let drive = g.sub(u, e)?;
        let y = g.sigmoid(drive);
        // keeps Y strictly inside (0, 1) where the sigmoid rounds to 0 or 1
        let y = g.clamp(y, Y_CLAMP, 1.0 - Y_CLAMP);
        Ok((
            CcnnState {
                f,
                l,
                e,
                y,
                n: state.n + 1,
            },
            StepTrace { u },
        ))
    }

    /// Runs `t_steps` steps on the same input; returns the mean output and
    /// the final state.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        state: CcnnState,
        input: Var,
        t_steps: usize,
    ) -> Result<(Var, CcnnState)> {
        if t_steps < 1 {
            return Err(Error::contract("ccnn_forward needs t_steps >= 1"));
        }
        if self.cfg.mode == CcnnMode::Bypass {
            return Ok((input, state));
        }
        let mut state = state;
        let mut total: Option<Var> = None;
        for _ in 0..t_steps {
            let (next, _) = self.step(g, state, input)?;
            state = next;
            total = Some(match total {
                None => state.y,
                Some(t) => g.add(t, state.y)?,
            });
        }
        let total = total.expect("t_steps >= 1");
        let avg = if t_steps == 1 {
            total
        } else {
            g.scale(total, 1.0 / t_steps as f64)
        };
        Ok((avg, state))
    }
}

/// Elementwise mean of two lineages with matching shape and step count.
pub fn state_merge<S: Scalar>(g: &mut Graph<S>, a: CcnnState, b: CcnnState) -> Result<CcnnState> {
    if a.n != b.n {
        return Err(Error::contract(format!(
            "state_merge: iteration counts differ ({} vs {})",
            a.n, b.n
        )));
    }
    if a.shape(g) != b.shape(g) {
        return Err(Error::contract(format!(
            "state_merge: shapes differ ({:?} vs {:?})",
            a.shape(g),
            b.shape(g)
        )));
    }
    let mut mean = |x: Var, y: Var| -> Result<Var> {
        let s = g.add(x, y)?;
        Ok(g.scale(s, 0.5))
    };
    Ok(CcnnState {
        f: mean(a.f, b.f)?,
        l: mean(a.l, b.l)?,
        e: mean(a.e, b.e)?,
        y: mean(a.y, b.y)?,
        n: a.n,
    })
}

/// Learned per-field 1x1 projection carrying a lineage across a change of
/// width and resolution.
#[derive(Clone, Debug)]
pub struct StateAdapter {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl StateAdapter {
    const FIELDS: [&'static str; 4] = ["f", "l", "e", "y"];

    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            name: name.to_string(),
            cin,
            cout,
        }
    }

    pub fn weight_name(&self, field: &str) -> String {
        format!("{}.{field}.w", self.name)
    }

    /// Near average-preserving initialization: every output channel starts
    /// as a jittered mean of the input channels.
    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        let base = 1.0 / self.cin as f64;
        for field in Self::FIELDS {
            let w = Tensor::from_fn(&[self.cout, self.cin, 1, 1], |_| {
                S::of(base * (1.0 + rng.gen_range(-0.1..=0.1)))
            });
            store.insert(self.weight_name(field), w, true);
        }
    }

    pub fn adapt<S: Scalar>(&self, g: &mut Graph<S>, state: CcnnState, h: usize, w: usize) -> Result<CcnnState> {
        let c = state.shape(g)[1];
        if c != self.cin {
            return Err(Error::dim(
                "state_adapt",
                "1",
                format!("adapter expects {} channels, state has {c}", self.cin),
            ));
        }
        let mut out = [state.f; 4];
        for (slot, (field, v)) in out.iter_mut().zip(Self::FIELDS.iter().zip(state.fields())) {
            let r = g.resize_bilinear(v, h, w)?;
            let wt = g.param(&self.weight_name(field))?;
            *slot = g.conv2d(r, wt, None, ConvSpec::default())?;
        }
        let y = g.clamp(out[3], Y_CLAMP, 1.0 - Y_CLAMP);
        Ok(CcnnState {
            f: out[0],
            l: out[1],
            e: out[2],
            y,
            n: state.n,
        })
    }
}

/// One row of a single-neuron trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub n: usize,
    pub f: f64,
    pub l: f64,
    pub u: f64,
    pub e: f64,
    pub y: f64,
}

/// Iterates a lone neuron with self-feedback weight `m` and self-linking
/// weight `w` under constant drive, through the same layer code as the
/// network uses.
pub fn scalar_trajectory(cfg: &CcnnConfig, drive: f64, m: f64, w: f64, steps: usize) -> Result<Vec<TrajectoryPoint>> {
    let cfg = CcnnConfig {
        kernel: 1,
        dilation: 1,
        ..cfg.clone()
    };
    let layer = CcnnLayer::new("neuron", 1, cfg);
    let mut store = NamedTensorSet::<f64>::new();
    store.insert(layer.conv_m_name(), Tensor::full(&[1, 1, 1, 1], m), true);
    store.insert(layer.conv_w_name(), Tensor::full(&[1, 1, 1, 1], w), true);
    let mut g = Graph::new(&store, crate::graph::Mode::Eval);
    let x = g.constant(Tensor::full(&[1, 1, 1, 1], drive));
    let mut state = CcnnState::zeros(&mut g, &[1, 1, 1, 1]);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, trace) = layer.step(&mut g, state, x)?;
        state = next;
        out.push(TrajectoryPoint {
            n: state.n,
            f: g.value(state.f).item(),
            l: g.value(state.l).item(),
            u: g.value(trace.u).item(),
            e: g.value(state.e).item(),
            y: g.value(state.y).item(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Direct scalar recursion of the neuron with zero coupling kernels.
    fn recursion_oracle(cfg: &CcnnConfig, drive: f64, steps: usize) -> Vec<f64> {
        let (mut f, mut l, mut e, mut y) = (0.0, 0.0, 0.0, 0.0);
        let mut ys = Vec::new();
        for _ in 0..steps {
            f = (-cfg.alpha_f).exp() * f + drive;
            l = (-cfg.alpha_l).exp() * l;
            let u = f * (1.0 + cfg.beta * l);
            e = (-cfg.alpha_e).exp() * e + cfg.v_e * y;
            y = sigmoid(u - e);
            ys.push(y);
        }
        ys
    }

    fn zero_kernel_layer(store: &mut NamedTensorSet<f64>, channels: usize, cfg: CcnnConfig) -> CcnnLayer {
        let layer = CcnnLayer::new("c", channels, cfg);
        layer.init(store, &mut ChaCha8Rng::seed_from_u64(0));
        let k = layer.cfg.kernel;
        store.set(&layer.conv_m_name(), Tensor::zeros(&[channels, channels, k, k])).unwrap();
        store.set(&layer.conv_w_name(), Tensor::zeros(&[channels, channels, k, k])).unwrap();
        layer
    }

    #[test]
    fn first_steps_from_silence() {
        let mut store = NamedTensorSet::<f64>::new();
        let layer = zero_kernel_layer(&mut store, 2, CcnnConfig::default());
        let mut g = Graph::new(&store, Mode::Train);
        let shape = [1, 2, 3, 3];
        let x = g.constant(Tensor::zeros(&shape));
        let s0 = CcnnState::zeros(&mut g, &shape);
        let (s1, _) = layer.step(&mut g, s0, x).unwrap();
        assert!(g.value(s1.y).data().iter().all(|&v| v == 0.5));
        let (s2, _) = layer.step(&mut g, s1, x).unwrap();
        let expect = sigmoid(-0.5);
        assert!((expect - 0.377_540_668_798_145_4).abs() < 1e-15);
        assert!(g.value(s2.y).data().iter().all(|&v| (v - expect).abs() < 1e-15));
        assert_eq!(s2.n, 2);
    }

    #[test]
    fn four_step_average_matches_recursion() {
        let cfg = CcnnConfig::default();
        let oracle = recursion_oracle(&cfg, 0.0, 4);
        // third output written out explicitly
        let third = sigmoid(-(-cfg.alpha_e).exp() * 0.5 - sigmoid(-0.5));
        assert!((oracle[2] - third).abs() < 1e-15);
        let expect = oracle.iter().sum::<f64>() / 4.0;

        let mut store = NamedTensorSet::<f64>::new();
        let layer = zero_kernel_layer(&mut store, 1, cfg);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let s0 = CcnnState::zeros(&mut g, &[1, 1, 2, 2]);
        let (avg, s) = layer.forward(&mut g, s0, x, 4).unwrap();
        assert_eq!(s.n, 4);
        for &v in g.value(avg).data() {
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn single_step_average_is_that_step() {
        let mut store = NamedTensorSet::<f64>::new();
        let layer = CcnnLayer::new("c", 2, CcnnConfig::default());
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.37).sin()));
        let s0 = CcnnState::zeros(&mut g, &[1, 2, 4, 4]);
        let (avg, s1) = layer.forward(&mut g, s0, x, 1).unwrap();
        assert_eq!(g.value(avg), g.value(s1.y));
        assert!(layer.forward(&mut g, s1, x, 0).is_err());
    }

    #[test]
    fn nolinking_modulation_equals_feedback() {
        let cfg = CcnnConfig {
            mode: CcnnMode::Nolinking,
            ..CcnnConfig::default()
        };
        let mut store = NamedTensorSet::<f64>::new();
        let layer = CcnnLayer::new("c", 3, cfg);
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(Tensor::from_fn(&[1, 3, 5, 5], |i| (i as f64 * 1.3).cos() * 3.0));
        let mut s = CcnnState::zeros(&mut g, &[1, 3, 5, 5]);
        for _ in 0..3 {
            let (next, trace) = layer.step(&mut g, s, x).unwrap();
            assert_eq!(g.value(trace.u), g.value(next.f));
            s = next;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = NamedTensorSet::<f64>::new();
        let layer = CcnnLayer::new("c", 1, CcnnConfig::default());
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let s = CcnnState::zeros(&mut g, &[1, 1, 3, 3]);
        assert!(matches!(layer.step(&mut g, s, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn merge_mean_and_checks() {
        let mut g = Graph::<f64>::standalone();
        let mk = |g: &mut Graph<f64>, k: f64, n: usize| {
            let f = g.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| k * i as f64));
            let l = g.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| -k * i as f64 + 1.0));
            CcnnState { f, l, e: f, y: l, n }
        };
        let a = mk(&mut g, 1.0, 4);
        let b = mk(&mut g, 3.0, 4);
        let m = state_merge(&mut g, a, b).unwrap();
        assert_eq!(g.value(m.f).data(), &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(g.value(m.l).data(), &[1.0, -1.0, -3.0, -5.0]);
        assert_eq!(m.n, 4);
        let same = state_merge(&mut g, a, a).unwrap();
        assert_eq!(g.value(same.f), g.value(a.f));
        let c = mk(&mut g, 1.0, 3);
        assert!(state_merge(&mut g, a, c).is_err());
    }

    #[test]
    fn adapter_identity_and_constants() {
        let mut store = NamedTensorSet::<f64>::new();
        let ad = StateAdapter::new("a", 2, 3);
        ad.init(&mut store, &mut ChaCha8Rng::seed_from_u64(9));
        for field in StateAdapter::FIELDS {
            store.set(&ad.weight_name(field), Tensor::full(&[3, 2, 1, 1], 0.5)).unwrap();
        }
        let mut g = Graph::new(&store, Mode::Train);
        let c = |g: &mut Graph<f64>, v: f64| g.constant(Tensor::full(&[1, 2, 2, 2], v));
        let s = CcnnState {
            f: c(&mut g, 1.5),
            l: c(&mut g, -2.0),
            e: c(&mut g, 0.25),
            y: c(&mut g, 0.7),
            n: 8,
        };
        let out = ad.adapt(&mut g, s, 4, 4).unwrap();
        assert_eq!(g.shape(out.f), &[1, 3, 4, 4]);
        for (v, want) in [(out.f, 1.5), (out.l, -2.0), (out.e, 0.25), (out.y, 0.7)] {
            assert!(g.value(v).data().iter().all(|&x| (x - want).abs() < 1e-15));
        }
        assert_eq!(out.n, 8);
    }
}
