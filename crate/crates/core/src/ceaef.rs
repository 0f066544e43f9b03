//! Cross explicit attention-enhanced fusion of an RGB and a thermal feature
//! map into one fused map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Cbl, Conv, DwSeparable, Mlp};
use crate::params::NamedTensorSet;
use crate::tensor::Scalar;

pub const DEFAULT_REDUCTION: usize = 4;

/// Intermediate maps of one fusion, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct CeaefTrace {
    pub mask: Var,
    pub r_main: Var,
    pub t_main: Var,
    pub r_comp: Var,
    pub t_comp: Var,
    pub f_i: Var,
    pub f_c: Var,
    pub v_fi: Var,
    pub v_fc: Var,
    /// `V_FI * F_I + V_FC * F_C`, before the output projection.
    pub selected: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Ceaef {
    pub name: String,
    pub channels: usize,
    pub out_channels: usize,
    pub ca_rgb: Mlp,
    pub ca_th: Mlp,
    pub dw_main: Conv,
    pub dw_comp: Conv,
    pub gate_main: Mlp,
    pub gate_comp: Mlp,
    pub dw_fi: DwSeparable,
    pub dw_fc: DwSeparable,
    pub ds_fi: DwSeparable,
    pub ds_fc: DwSeparable,
    pub out_cbl: Cbl,
}

impl Ceaef {
    pub fn new(name: &str, channels: usize, out_channels: usize, reduction: usize) -> Self {
        let c = channels;
        let hidden = (c / reduction.max(1)).max(1);
        Self {
            name: name.to_string(),
            channels: c,
            out_channels,
            ca_rgb: Mlp::new(&format!("{name}.ca_rgb"), c, hidden, c),
            ca_th: Mlp::new(&format!("{name}.ca_th"), c, hidden, c),
            dw_main: Conv::depthwise(format!("{name}.dw_main"), 2 * c, 3),
            dw_comp: Conv::depthwise(format!("{name}.dw_comp"), 2 * c, 3),
            gate_main: Mlp::new(&format!("{name}.gate_main"), 2 * c, 2 * c, 2 * c),
            gate_comp: Mlp::new(&format!("{name}.gate_comp"), 2 * c, 2 * c, 2 * c),
            dw_fi: DwSeparable::new(&format!("{name}.dw_fi"), 2 * c, c),
            dw_fc: DwSeparable::new(&format!("{name}.dw_fc"), 2 * c, c),
            ds_fi: DwSeparable::new(&format!("{name}.ds_fi"), c, 1),
            ds_fc: DwSeparable::new(&format!("{name}.ds_fc"), c, 1),
            out_cbl: Cbl::same(&format!("{name}.out"), c, out_channels, 3),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.ca_rgb.init(store, rng);
        self.ca_th.init(store, rng);
        self.dw_main.init(store, rng);
        self.dw_comp.init(store, rng);
        self.gate_main.init(store, rng);
        self.gate_comp.init(store, rng);
        self.dw_fi.init(store, rng);
        self.dw_fc.init(store, rng);
        self.ds_fi.init(store, rng);
        self.ds_fc.init(store, rng);
        self.out_cbl.init(store, rng);
    }

    /// Pooled channel descriptor; no squashing here.
    pub fn channel_descriptor<S: Scalar>(g: &mut Graph<S>, x: Var, mlp: &Mlp) -> Result<Var> {
        let p = g.global_avg_pool(x)?;
        mlp.forward(g, p)
    }

    fn gates<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var, dw: &Conv, mlp: &Mlp, c: usize) -> Result<(Var, Var)> {
        let cat = g.concat(&[a, b])?;
        let d = dw.forward(g, cat)?;
        let p = g.global_max_pool(d)?;
        let z = mlp.forward(g, p)?;
        let s = g.sigmoid(z);
        Ok((g.slice_channels(s, 0, c)?, g.slice_channels(s, c, c)?))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, r_i: Var, t_i: Var) -> Result<Var> {
        Ok(self.forward_traced(g, r_i, t_i)?.out)
    }

    pub fn forward_traced<S: Scalar>(&self, g: &mut Graph<S>, r_i: Var, t_i: Var) -> Result<CeaefTrace> {
        if g.shape(r_i) != g.shape(t_i) {
            return Err(Error::contract(format!(
                "ceaef: rgb {:?} and thermal {:?} differ",
                g.shape(r_i),
                g.shape(t_i)
            )));
        }
        let c = g.shape(r_i)[1];
        if c != self.channels {
            return Err(Error::contract(format!("ceaef `{}` expects {} channels, got {c}", self.name, self.channels)));
        }
        let r = Self::channel_descriptor(g, r_i, &self.ca_rgb)?;
        let t = Self::channel_descriptor(g, t_i, &self.ca_th)?;
        let rt = g.mul(r, t)?;
        let rt = g.scale(rt, c as f64);
        let mask = g.sigmoid(rt);
        let comp = g.one_minus(mask);
        let r_main = g.mul(mask, r_i)?;
        let t_main = g.mul(mask, t_i)?;
        let r_comp = g.mul(comp, r_i)?;
        let t_comp = g.mul(comp, t_i)?;

        let (gate_ri, gate_ti) = Self::gates(g, r_main, t_main, &self.dw_main, &self.gate_main, c)?;
        let (gate_rc, gate_tc) = Self::gates(g, r_comp, t_comp, &self.dw_comp, &self.gate_comp, c)?;
        let ri = g.mul(r_main, gate_ri)?;
        let ti = g.mul(t_main, gate_ti)?;
        let rc = g.mul(r_comp, gate_rc)?;
        let tc = g.mul(t_comp, gate_tc)?;

        let cat_i = g.concat(&[ri, tc])?;
        let f_i = self.dw_fi.forward(g, cat_i)?;
        let f_i = g.add(f_i, r_comp)?;
        let cat_c = g.concat(&[rc, ti])?;
        let f_c = self.dw_fc.forward(g, cat_c)?;
        let f_c = g.add(f_c, t_comp)?;

        let a = self.ds_fi.forward(g, f_i)?;
        let b = self.ds_fc.forward(g, f_c)?;
        let (v_fi, v_fc) = g.softmax_pair(a, b)?;
        let wi = g.mul(v_fi, f_i)?;
        let wc = g.mul(v_fc, f_c)?;
        let selected = g.add(wi, wc)?;
        let out = self.out_cbl.forward(g, selected)?;
        Ok(CeaefTrace {
            mask,
            r_main,
            t_main,
            r_comp,
            t_comp,
            f_i,
            f_c,
            v_fi,
            v_fc,
            selected,
            out,
        })
    }

    /// Replacement used when fusion is ablated: plain sum, then the same
    /// output projection.
    pub fn forward_additive<S: Scalar>(&self, g: &mut Graph<S>, r_i: Var, t_i: Var) -> Result<Var> {
        let s = g.add(r_i, t_i)?;
        self.out_cbl.forward(g, s)
    }
}
