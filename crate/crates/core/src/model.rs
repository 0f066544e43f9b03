use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::{AblationConfig, N_HEADS};
use crate::ccnn::{state_merge, CcnnConfig, CcnnMode, CcnnState};
use crate::ceaef::Ceaef;
use crate::decoder::{Decoder, DecoderConfig, DecoderOutputs};
use crate::encoder::{check_divisible, BranchFeatures, Encoder, EncoderConfig, STAGE_STRIDES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::NamedTensorSet;
use crate::tensor::{Scalar, Tensor};

/// Name of the seven learnable loss-weight exponents `s_k`.
pub const AWL_PARAM: &str = "awl.s";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub encoder: EncoderConfig,
    pub ccnn: CcnnConfig,
    pub ceaef_reduction: usize,
    pub decoder: DecoderConfig,
    pub ablation: AblationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_classes: 4,
            encoder: EncoderConfig::default(),
            ccnn: CcnnConfig::default(),
            ceaef_reduction: 4,
            decoder: DecoderConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small widths used by tests and the desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                channels: [8, 16, 32, 64],
                blocks_per_stage: 2,
            },
            decoder: DecoderConfig {
                width: 16,
                ..DecoderConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_divisible(self.height, self.width).map_err(|e| Error::Config(e.to_string()))?;
        if self.n_classes < 2 {
            return Err(Error::Config("model.n_classes must be at least 2".into()));
        }
        if self.ceaef_reduction == 0 {
            return Err(Error::Config("ceaef.reduction must be positive".into()));
        }
        self.encoder.validate()?;
        self.ccnn.validate()?;
        self.decoder.validate()?;
        self.ablation.validate()?;
        let (a, c) = (self.ablation.ccnn_mode, self.ccnn.mode);
        if a != CcnnMode::Full && c != CcnnMode::Full && a != c {
            return Err(Error::Config(format!("ccnn.mode `{c}` conflicts with ablation.ccnn_mode `{a}`")));
        }
        Ok(())
    }

    /// CCNN settings with the ablation mode applied when it is not `full`.
    pub fn effective_ccnn(&self) -> CcnnConfig {
        let mut ccnn = self.ccnn.clone();
        if self.ablation.ccnn_mode != CcnnMode::Full {
            ccnn.mode = self.ablation.ccnn_mode;
        }
        ccnn
    }

    pub fn decoder_size(&self) -> (usize, usize) {
        (self.height / STAGE_STRIDES[0], self.width / STAGE_STRIDES[0])
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub rgb: BranchFeatures,
    pub thermal: BranchFeatures,
    /// Fused features `E_1..E_4` at decoder width, each at its own stride.
    pub fused: Vec<Var>,
    pub seed: CcnnState,
    pub decoder: DecoderOutputs,
}

impl ForwardOutputs {
    pub fn logits(&self) -> Var {
        self.decoder.semantic
    }
}

#[derive(Clone, Debug)]
pub struct BimiiNet {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub fusions: Vec<Ceaef>,
    pub decoder: Decoder,
}

impl BimiiNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let ccnn = cfg.effective_ccnn();
        let encoder = Encoder::new(&cfg.encoder, &ccnn);
        let fusions = cfg
            .encoder
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Ceaef::new(&format!("fuse{}", i + 1), c, cfg.decoder.width, cfg.ceaef_reduction))
            .collect();
        let (dh, dw) = cfg.decoder_size();
        let decoder = Decoder::new(&cfg.decoder, dh, dw, cfg.encoder.channels[3], cfg.n_classes, &ccnn);
        Ok(Self {
            cfg,
            encoder,
            fusions,
            decoder,
        })
    }

    /// Fresh parameters drawn from a seeded generator, including the loss
    /// weights.
    pub fn init<S: Scalar>(&self, seed: u64) -> NamedTensorSet<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = NamedTensorSet::new();
        self.encoder.init(&mut store, &mut rng);
        for f in &self.fusions {
            f.init(&mut store, &mut rng);
        }
        self.decoder.init(&mut store, &mut rng);
        store.insert(AWL_PARAM, Tensor::zeros(&[N_HEADS]), true);
        store
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, rgb: Var, thermal: Var, t_steps: usize) -> Result<ForwardOutputs> {
        let (_, _, h, w) = match g.shape(rgb) {
            &[b, c, h, w] => (b, c, h, w),
            other => return Err(Error::dim("forward", "rank", format!("expected BCHW, got {other:?}"))),
        };
        if (h, w) != (self.cfg.height, self.cfg.width) {
            return Err(Error::dim(
                "forward",
                "2,3",
                format!("model built for {}x{}, got {h}x{w}", self.cfg.height, self.cfg.width),
            ));
        }
        let (r, t) = self.encoder.encode(g, rgb, thermal, t_steps)?;
        let mut fused = Vec::with_capacity(4);
        for (i, f) in self.fusions.iter().enumerate() {
            let (ri, ti) = (r.stages[i].out, t.stages[i].out);
            fused.push(if self.cfg.ablation.disable_ceaef {
                f.forward_additive(g, ri, ti)?
            } else {
                f.forward(g, ri, ti)?
            });
        }
        let seed = state_merge(g, r.final_state, t.final_state)?;
        let decoder = self.decoder.decode(g, &fused, seed, t_steps, &self.cfg.ablation, h, w)?;
        Ok(ForwardOutputs {
            rgb: r,
            thermal: t,
            fused,
            seed,
            decoder,
        })
    }

    /// Same parameters, different structural toggles.
    pub fn with_ablation(&self, ablation: AblationConfig) -> Result<Self> {
        Self::new(ModelConfig {
            ablation,
            ..self.cfg.clone()
        })
    }
}
