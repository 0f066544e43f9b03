//! Two-branch convolutional encoder with a CCNN layer and residual after
//! every stage.

use rand::Rng;

use crate::ccnn::{CcnnConfig, CcnnLayer, CcnnState, StateAdapter};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::nn::Cbl;
use crate::params::NamedTensorSet;
use crate::tensor::Scalar;

pub const STAGE_STRIDES: [usize; 4] = [4, 2, 2, 2];
/// Total downsampling of the deepest stage; inputs must divide by it.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 256],
            blocks_per_stage: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "encoder.channels must be positive and strictly increasing, got {:?}",
                self.channels
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("encoder.blocks_per_stage must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub convs: Vec<Cbl>,
    pub ccnn: CcnnLayer,
}

/// Output of one stage: the residual sum and the conv-stack output it was
/// built from.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub out: Var,
    pub x: Var,
    pub y_avg: Var,
}

impl EncoderStage {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, blocks: usize, ccnn: &CcnnConfig) -> Self {
        let kernel = if stride == 4 { 7 } else { 3 };
        let spec = ConvSpec {
            stride,
            padding: kernel / 2,
            ..ConvSpec::default()
        };
        let mut convs = vec![Cbl::new(&format!("{name}.conv0"), cin, cout, kernel, spec)];
        for b in 1..blocks {
            convs.push(Cbl::same(&format!("{name}.conv{b}"), cout, cout, 3));
        }
        Self {
            convs,
            ccnn: CcnnLayer::new(&format!("{name}.ccnn"), cout, ccnn.clone()),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        for c in &self.convs {
            c.init(store, rng);
        }
        self.ccnn.init(store, rng);
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        x: Var,
        state: CcnnState,
        t_steps: usize,
    ) -> Result<(StageOutput, CcnnState)> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, h)?;
        }
        if g.shape(h) != state.shape(g) {
            return Err(Error::contract(format!(
                "encoder stage: state {:?} does not match features {:?}",
                state.shape(g),
                g.shape(h)
            )));
        }
        let (y_avg, state) = self.ccnn.forward(g, state, h, t_steps)?;
        let out = g.add(y_avg, h)?;
        Ok((StageOutput { out, x: h, y_avg }, state))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBranch {
    pub name: String,
    pub in_channels: usize,
    pub stages: Vec<EncoderStage>,
    /// Carries the lineage from stage `i` to stage `i + 1`.
    pub adapters: Vec<StateAdapter>,
}

#[derive(Clone, Debug)]
pub struct BranchFeatures {
    pub stages: Vec<StageOutput>,
    pub final_state: CcnnState,
}

impl BranchFeatures {
    pub fn features(&self) -> Vec<Var> {
        self.stages.iter().map(|s| s.out).collect()
    }
}

impl EncoderBranch {
    pub fn new(name: &str, in_channels: usize, cfg: &EncoderConfig, ccnn: &CcnnConfig) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut adapters = Vec::with_capacity(3);
        let mut cin = in_channels;
        for (i, (&c, &s)) in cfg.channels.iter().zip(STAGE_STRIDES.iter()).enumerate() {
            stages.push(EncoderStage::new(
                &format!("{name}.stage{}", i + 1),
                cin,
                c,
                s,
                cfg.blocks_per_stage,
                ccnn,
            ));
            if i > 0 {
                adapters.push(StateAdapter::new(&format!("{name}.adapt{}", i + 1), cin, c));
            }
            cin = c;
        }
        Self {
            name: name.to_string(),
            in_channels,
            stages,
            adapters,
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        for s in &self.stages {
            s.init(store, rng);
        }
        for a in &self.adapters {
            a.init(store, rng);
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var, t_steps: usize) -> Result<BranchFeatures> {
        let (_, c, h, w) = dims(g, x)?;
        if c != self.in_channels {
            return Err(Error::dim(
                "encode",
                "1",
                format!("{} branch expects {} channels, got {c}", self.name, self.in_channels),
            ));
        }
        check_divisible(h, w)?;
        let mut outs = Vec::with_capacity(4);
        let mut h = x;
        let mut state: Option<CcnnState> = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let (b, _, sh, sw) = dims(g, h)?;
            let (oh, ow) = (sh / STAGE_STRIDES[i], sw / STAGE_STRIDES[i]);
            let st = match state {
                None => CcnnState::zeros(g, &[b, stage.ccnn.channels, oh, ow]),
                Some(prev) => self.adapters[i - 1].adapt(g, prev, oh, ow)?,
            };
            let (o, next) = stage.forward(g, h, st, t_steps)?;
            h = o.out;
            state = Some(next);
            outs.push(o);
        }
        Ok(BranchFeatures {
            stages: outs,
            final_state: state.expect("four stages"),
        })
    }
}

fn dims<S: Scalar>(g: &Graph<S>, x: Var) -> Result<(usize, usize, usize, usize)> {
    match g.shape(x) {
        &[b, c, h, w] => Ok((b, c, h, w)),
        other => Err(Error::dim("encode", "rank", format!("expected BCHW, got {other:?}"))),
    }
}

pub fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::contract(format!(
            "input size {h}x{w} is not a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub rgb: EncoderBranch,
    pub thermal: EncoderBranch,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, ccnn: &CcnnConfig) -> Self {
        Self {
            rgb: EncoderBranch::new("enc.rgb", 3, cfg, ccnn),
            thermal: EncoderBranch::new("enc.th", 1, cfg, ccnn),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.rgb.init(store, rng);
        self.thermal.init(store, rng);
    }

    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        rgb: Var,
        thermal: Var,
        t_steps: usize,
    ) -> Result<(BranchFeatures, BranchFeatures)> {
        let (rb, _, rh, rw) = dims(g, rgb)?;
        let (tb, _, th, tw) = dims(g, thermal)?;
        if (rb, rh, rw) != (tb, th, tw) {
            return Err(Error::contract(format!(
                "rgb {:?} and thermal {:?} are not aligned",
                g.shape(rgb),
                g.shape(thermal)
            )));
        }
        check_divisible(rh, rw)?;
        let r = self.rgb.forward(g, rgb, t_steps)?;
        let t = self.thermal.forward(g, thermal, t_steps)?;
        Ok((r, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            channels: [4, 6, 8, 10],
            blocks_per_stage: 2,
        }
    }

    #[test]
    fn stage_sizes_and_chain_count() {
        let enc = Encoder::new(&tiny(), &CcnnConfig::default());
        let mut store = NamedTensorSet::<f64>::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new(&store, Mode::Train);
        let rgb = g.constant(Tensor::from_fn(&[1, 3, 64, 64], |i| (i as f64 * 0.01).sin()));
        let th = g.constant(Tensor::from_fn(&[1, 1, 64, 64], |i| (i as f64 * 0.02).cos()));
        let (r, t) = enc.encode(&mut g, rgb, th, 2).unwrap();
        let sizes: Vec<_> = r.features().iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(
            sizes,
            vec![vec![1, 4, 16, 16], vec![1, 6, 8, 8], vec![1, 8, 4, 4], vec![1, 10, 2, 2]]
        );
        assert_eq!(r.final_state.n, 8);
        assert_eq!(t.final_state.n, 8);
        for s in &r.stages {
            let diff = g.value(s.out).zip_map(g.value(s.x), |a, b| a - b).unwrap();
            assert!(diff.max_abs_diff(g.value(s.y_avg)) < 1e-12);
        }
    }

    #[test]
    fn zeroed_ccnn_adds_half() {
        let enc = Encoder::new(&tiny(), &CcnnConfig::default());
        let mut store = NamedTensorSet::<f64>::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let stage = &enc.rgb.stages[0];
        for name in [stage.ccnn.conv_m_name(), stage.ccnn.conv_w_name()] {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new(&store, Mode::Train);
        let zero = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let st = CcnnState::zeros(&mut g, &[1, 4, 8, 8]);
        let (o, _) = stage.forward(&mut g, zero, st, 1).unwrap();
        assert!(g.value(o.x).data().iter().all(|&v| v == 0.0));
        assert!(g.value(o.out).data().iter().all(|&v| v == 0.5));

        // nonzero drive: the single step emits sigmoid(X)
        let x = g.constant(Tensor::from_fn(&[1, 3, 32, 32], |i| (i % 7) as f64 - 3.0));
        let st = CcnnState::zeros(&mut g, &[1, 4, 8, 8]);
        let (o, _) = stage.forward(&mut g, x, st, 1).unwrap();
        let expect = g.value(o.x).map(|v| v + 1.0 / (1.0 + (-v).exp()));
        assert!(g.value(o.out).max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn rejects_indivisible_input() {
        let enc = Encoder::new(&tiny(), &CcnnConfig::default());
        let mut store = NamedTensorSet::<f64>::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new(&store, Mode::Train);
        let rgb = g.constant(Tensor::zeros(&[1, 3, 48, 64]));
        let th = g.constant(Tensor::zeros(&[1, 1, 48, 64]));
        assert!(matches!(enc.encode(&mut g, rgb, th, 1), Err(Error::Contract(_))));
        assert!(g.len() <= 2);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            channels: [8, 8, 16, 32],
            blocks_per_stage: 1,
        };
        assert!(bad.validate().is_err());
    }
}
