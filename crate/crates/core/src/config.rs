//! Run configuration in `key = value` form.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ablation::{AblationConfig, HEAD_NAMES};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm; `None` disables clipping.
    pub clip: Option<f64>,
    pub t_steps: usize,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            epochs: 60,
            batch: 2,
            lr: 1e-4,
            weight_decay: 5e-4,
            clip: None,
            t_steps: 1,
        }
    }

    pub fn stage2() -> Self {
        Self {
            epochs: 10,
            batch: 1,
            lr: 1e-5,
            weight_decay: 5e-4,
            clip: Some(20.0),
            t_steps: 4,
        }
    }

    fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{prefix}.{what}")));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if matches!(self.clip, Some(c) if !(c > 0.0 && c.is_finite())) {
            return bad("clip must be positive");
        }
        if self.t_steps == 0 {
            return bad("t_steps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Dir,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
    pub night_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            train_count: 200,
            val_count: 50,
            seed: 7,
            night_fraction: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub augment_crop: bool,
    pub augment_flip: bool,
    pub optim: AdamConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            data: DataConfig::default(),
            seed: 1,
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            augment_crop: true,
            augment_flip: true,
            optim: AdamConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N]>
where
    T::Err: Display,
{
    let items = v.split(',').map(|p| parse::<T>(key, p.trim())).collect::<Result<Vec<_>>>()?;
    let n = items.len();
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values, got {n}")))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.height" => m.height = parse(key, v)?,
            "model.width" => m.width = parse(key, v)?,
            "model.n_classes" => m.n_classes = parse(key, v)?,
            "encoder.channels" => m.encoder.channels = parse_list(key, v)?,
            "encoder.blocks_per_stage" => m.encoder.blocks_per_stage = parse(key, v)?,
            "ccnn.alpha_f" => m.ccnn.alpha_f = parse(key, v)?,
            "ccnn.alpha_l" => m.ccnn.alpha_l = parse(key, v)?,
            "ccnn.alpha_e" => m.ccnn.alpha_e = parse(key, v)?,
            "ccnn.v_e" => m.ccnn.v_e = parse(key, v)?,
            "ccnn.beta" => m.ccnn.beta = parse(key, v)?,
            "ccnn.kernel" => m.ccnn.kernel = parse(key, v)?,
            "ccnn.dilation" => m.ccnn.dilation = parse(key, v)?,
            "ccnn.mode" => m.ccnn.mode = parse(key, v)?,
            "ceaef.reduction" => m.ceaef_reduction = parse(key, v)?,
            "decoder.width" => m.decoder.width = parse(key, v)?,
            "decoder.stages" => m.decoder.stages = parse(key, v)?,
            "decoder.reduction" => m.decoder.reduction = parse(key, v)?,
            "ablation.disable_ceaef" => m.ablation.disable_ceaef = parse(key, v)?,
            "ablation.disable_sfi" => m.ablation.disable_sfi = parse(key, v)?,
            "ablation.disable_dfi" => m.ablation.disable_dfi = parse(key, v)?,
            "ablation.disable_mfe" => m.ablation.disable_mfe = parse(key, v)?,
            "ablation.disable_mdfe" => m.ablation.disable_mdfe = parse(key, v)?,
            "ablation.ccnn_mode" => m.ablation.ccnn_mode = parse(key, v)?,
            "ablation.loss_mask" => m.ablation.loss_mask = AblationConfig::parse_loss_mask(v)?,
            "ablation.fixed_loss_weights" => {
                m.ablation.fixed_loss_weights = match v {
                    "none" => None,
                    _ => Some(AblationConfig::parse_weights(v)?),
                }
            }
            "data.source" => {
                self.data.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "dir" => DataSource::Dir,
                    _ => return Err(Error::Config(format!("{key}: expected synthetic or dir, got `{v}`"))),
                }
            }
            "data.root" => self.data.root = Some(PathBuf::from(v)),
            "data.train_count" => self.data.train_count = parse(key, v)?,
            "data.val_count" => self.data.val_count = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.night_fraction" => self.data.night_fraction = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.out_dir" => self.out_dir = PathBuf::from(v),
            "augment.crop" => self.augment_crop = parse(key, v)?,
            "augment.flip" => self.augment_flip = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            _ => {
                let (stage, field) = match key.split_once('.') {
                    Some(("stage1", f)) => (&mut self.stage1, f),
                    Some(("stage2", f)) => (&mut self.stage2, f),
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                };
                match field {
                    "epochs" => stage.epochs = parse(key, v)?,
                    "batch" => stage.batch = parse(key, v)?,
                    "lr" => stage.lr = parse(key, v)?,
                    "weight_decay" => stage.weight_decay = parse(key, v)?,
                    "t_steps" => stage.t_steps = parse(key, v)?,
                    "clip" => {
                        stage.clip = match v {
                            "none" => None,
                            _ => Some(parse(key, v)?),
                        }
                    }
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    /// Every key with its current value, in a form `parse_str` accepts.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let a = &m.ablation;
        let mask: Vec<&str> = HEAD_NAMES
            .iter()
            .zip(a.loss_mask)
            .filter_map(|(n, on)| on.then_some(*n))
            .collect();
        let mut lines = vec![
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.n_classes", m.n_classes.to_string()),
            ("encoder.channels", join(&m.encoder.channels)),
            ("encoder.blocks_per_stage", m.encoder.blocks_per_stage.to_string()),
            ("ccnn.alpha_f", m.ccnn.alpha_f.to_string()),
            ("ccnn.alpha_l", m.ccnn.alpha_l.to_string()),
            ("ccnn.alpha_e", m.ccnn.alpha_e.to_string()),
            ("ccnn.v_e", m.ccnn.v_e.to_string()),
            ("ccnn.beta", m.ccnn.beta.to_string()),
            ("ccnn.kernel", m.ccnn.kernel.to_string()),
            ("ccnn.dilation", m.ccnn.dilation.to_string()),
            ("ccnn.mode", m.ccnn.mode.to_string()),
            ("ceaef.reduction", m.ceaef_reduction.to_string()),
            ("decoder.width", m.decoder.width.to_string()),
            ("decoder.stages", m.decoder.stages.to_string()),
            ("decoder.reduction", m.decoder.reduction.to_string()),
            ("ablation.disable_ceaef", a.disable_ceaef.to_string()),
            ("ablation.disable_sfi", a.disable_sfi.to_string()),
            ("ablation.disable_dfi", a.disable_dfi.to_string()),
            ("ablation.disable_mfe", a.disable_mfe.to_string()),
            ("ablation.disable_mdfe", a.disable_mdfe.to_string()),
            ("ablation.ccnn_mode", a.ccnn_mode.to_string()),
            ("ablation.loss_mask", mask.join(",")),
            (
                "ablation.fixed_loss_weights",
                a.fixed_loss_weights.map_or_else(|| "none".into(), |w| join(&w)),
            ),
            (
                "data.source",
                match self.data.source {
                    DataSource::Synthetic => "synthetic".into(),
                    DataSource::Dir => "dir".into(),
                },
            ),
        ];
        if let Some(root) = &self.data.root {
            lines.push(("data.root", root.display().to_string()));
        }
        lines.extend([
            ("data.train_count", self.data.train_count.to_string()),
            ("data.val_count", self.data.val_count.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("data.night_fraction", self.data.night_fraction.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.out_dir", self.out_dir.display().to_string()),
            ("augment.crop", self.augment_crop.to_string()),
            ("augment.flip", self.augment_flip.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
        ]);
        let mut out: String = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            out.push_str(&format!("{name}.epochs = {}\n", s.epochs));
            out.push_str(&format!("{name}.batch = {}\n", s.batch));
            out.push_str(&format!("{name}.lr = {}\n", s.lr));
            out.push_str(&format!("{name}.weight_decay = {}\n", s.weight_decay));
            out.push_str(&format!("{name}.t_steps = {}\n", s.t_steps));
            let clip = s.clip.map_or_else(|| "none".to_string(), |c| c.to_string());
            out.push_str(&format!("{name}.clip = {clip}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.optim.validate()?;
        if !(0.0..=1.0).contains(&self.data.night_fraction) {
            return Err(Error::Config("data.night_fraction must lie in [0, 1]".into()));
        }
        match self.data.source {
            DataSource::Dir if self.data.root.is_none() => {
                Err(Error::Config("data.source = dir needs data.root".into()))
            }
            DataSource::Synthetic if self.model.n_classes < 3 => Err(Error::Config(
                "synthetic data needs model.n_classes >= 3".into(),
            )),
            DataSource::Synthetic if self.data.train_count == 0 => {
                Err(Error::Config("data.train_count must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            height: self.model.height,
            width: self.model.width,
            n_classes: self.model.n_classes,
            night_fraction: self.data.night_fraction,
        }
    }
}
