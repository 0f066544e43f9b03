//! Structural toggles that remove or neutralize single components.

use crate::ccnn::CcnnMode;
use crate::error::{Error, Result};

/// Number of supervised heads, in the fixed order bin1..3, bou1..3, se.
pub const N_HEADS: usize = 7;
pub const HEAD_NAMES: [&str; N_HEADS] = ["bin1", "bin2", "bin3", "bou1", "bou2", "bou3", "se"];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    /// Fuse by elementwise addition instead of the attention module.
    pub disable_ceaef: bool,
    /// Shallow branch output replaced by the resized shallow feature.
    pub disable_sfi: bool,
    /// Deep branch output replaced by the resized deepest feature.
    pub disable_dfi: bool,
    /// Enhancement replaced by the sum of the two branch outputs.
    pub disable_mfe: bool,
    /// Dilated multi-scale block inside the shallow branch skipped.
    pub disable_mdfe: bool,
    pub ccnn_mode: CcnnMode,
    pub loss_mask: [bool; N_HEADS],
    pub fixed_loss_weights: Option<[f64; N_HEADS]>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            disable_ceaef: false,
            disable_sfi: false,
            disable_dfi: false,
            disable_mfe: false,
            disable_mdfe: false,
            ccnn_mode: CcnnMode::Full,
            loss_mask: [true; N_HEADS],
            fixed_loss_weights: None,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.disable_sfi && self.disable_mdfe {
            return Err(Error::Config(
                "ablation.disable_mdfe conflicts with ablation.disable_sfi: the block lives inside the removed module"
                    .into(),
            ));
        }
        if !self.loss_mask.iter().any(|&m| m) {
            return Err(Error::Config("ablation.loss_mask removes every head".into()));
        }
        if let Some(w) = &self.fixed_loss_weights {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config("ablation.fixed_loss_weights must be finite and non-negative".into()));
            }
            if w.iter().zip(&self.loss_mask).all(|(v, &m)| !m || *v == 0.0) {
                return Err(Error::Config("ablation.fixed_loss_weights leave no active head".into()));
            }
        }
        Ok(())
    }

    pub fn is_noop(&self) -> bool {
        *self == Self::default()
    }

    /// Parses a comma-separated list of head names into a mask.
    pub fn parse_loss_mask(s: &str) -> Result<[bool; N_HEADS]> {
        let mut mask = [false; N_HEADS];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let i = HEAD_NAMES
                .iter()
                .position(|h| *h == part)
                .ok_or_else(|| Error::Config(format!("unknown loss head `{part}`")))?;
            if mask[i] {
                return Err(Error::Config(format!("loss head `{part}` listed twice")));
            }
            mask[i] = true;
        }
        Ok(mask)
    }

    pub fn parse_weights(s: &str) -> Result<[f64; N_HEADS]> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad loss weight `{p}`: {e}")))
            })
            .collect::<Result<_>>()?;
        vals.try_into()
            .map_err(|v: Vec<f64>| Error::Config(format!("expected {N_HEADS} loss weights, got {}", v.len())))
    }
}
