//! Three-stage complementary decoder: a shallow branch (texture and
//! contour), a deep branch (global skeleton) and an enhancement block that
//! blends them, with one CCNN lineage threaded through each branch.
//!
//! Every stage runs at the resolution of the shallowest fused feature.

use rand::Rng;

use crate::ablation::AblationConfig;
use crate::ccnn::{CcnnConfig, CcnnLayer, CcnnState, StateAdapter};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::nn::{Cbl, ChannelAttention, Conv, DwSeparable, Linear};
use crate::params::NamedTensorSet;
use crate::tensor::{Scalar, Tensor};

pub const DILATIONS: [usize; 4] = [1, 3, 6, 12];
pub const STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub width: usize,
    pub stages: usize,
    pub reduction: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            stages: STAGES,
            reduction: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages != STAGES {
            return Err(Error::Config(format!("decoder.stages is fixed at {STAGES}, got {}", self.stages)));
        }
        if self.width < 2 || !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!("decoder.width must be even and >= 2, got {}", self.width)));
        }
        if self.reduction == 0 {
            return Err(Error::Config("decoder reduction must be positive".into()));
        }
        Ok(())
    }
}

fn check_same<S: Scalar>(g: &Graph<S>, what: &str, vars: &[Var]) -> Result<()> {
    let first = g.shape(vars[0]);
    for &v in &vars[1..] {
        if g.shape(v) != first {
            return Err(Error::contract(format!("{what}: inputs {:?} and {:?} differ", first, g.shape(v))));
        }
    }
    Ok(())
}

/// CCNN, pointwise, depthwise-separable, plus residual.
#[derive(Clone, Debug)]
pub struct SeparableCcnn {
    pub ccnn: CcnnLayer,
    pub pw: Conv,
    pub ds: DwSeparable,
}

impl SeparableCcnn {
    pub fn new(name: &str, c: usize, ccnn: &CcnnConfig) -> Self {
        Self {
            ccnn: CcnnLayer::new(&format!("{name}.ccnn"), c, ccnn.clone()),
            pw: Conv::pointwise(format!("{name}.pw"), c, c),
            ds: DwSeparable::new(&format!("{name}.ds"), c, c),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.ccnn.init(store, rng);
        self.pw.init(store, rng);
        self.ds.init(store, rng);
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        x: Var,
        state: CcnnState,
        t_steps: usize,
    ) -> Result<(Var, CcnnState)> {
        let (y, state) = self.ccnn.forward(g, state, x, t_steps)?;
        let p = self.pw.forward(g, y)?;
        let d = self.ds.forward(g, p)?;
        Ok((g.add(d, x)?, state))
    }
}

#[derive(Clone, Debug)]
pub struct Mdfe {
    pub branches: Vec<Cbl>,
    pub merge: Cbl,
}

impl Mdfe {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            branches: DILATIONS
                .iter()
                .map(|&d| Cbl::new(&format!("{name}.d{d}"), c, c, 3, ConvSpec::dilated(3, d)))
                .collect(),
            merge: Cbl::same(&format!("{name}.merge"), DILATIONS.len() * c, c, 1),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        for b in &self.branches {
            b.init(store, rng);
        }
        self.merge.init(store, rng);
    }

    /// Returns the merged output and the concatenated branch maps.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<(Var, Var)> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&outs)?;
        Ok((self.merge.forward(g, cat)?, cat))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SfiTrace {
    pub f_fuse: Var,
    pub f_out: Var,
    pub mdfe_cat: Option<Var>,
    pub s_out: Var,
}

#[derive(Clone, Debug)]
pub struct Sfi {
    pub cbl_e1: Cbl,
    pub cbl_e2: Cbl,
    pub cbl_s: Cbl,
    pub cbl_add: Cbl,
    pub cbl_cat: Cbl,
    pub sep: SeparableCcnn,
    pub mdfe: Mdfe,
}

impl Sfi {
    pub fn new(name: &str, c: usize, ccnn: &CcnnConfig) -> Self {
        Self {
            cbl_e1: Cbl::same(&format!("{name}.e1"), c, c, 1),
            cbl_e2: Cbl::same(&format!("{name}.e2"), c, c, 1),
            cbl_s: Cbl::same(&format!("{name}.s"), c, c, 1),
            cbl_add: Cbl::same(&format!("{name}.add"), c, c / 2, 3),
            cbl_cat: Cbl::same(&format!("{name}.cat"), 2 * c, c / 2, 3),
            sep: SeparableCcnn::new(&format!("{name}.sep"), c, ccnn),
            mdfe: Mdfe::new(&format!("{name}.mdfe"), c),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        for c in [&self.cbl_e1, &self.cbl_e2, &self.cbl_s, &self.cbl_add, &self.cbl_cat] {
            c.init(store, rng);
        }
        self.sep.init(store, rng);
        self.mdfe.init(store, rng);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        e1: Var,
        e2: Var,
        s_prev: Var,
        state: CcnnState,
        t_steps: usize,
        use_mdfe: bool,
    ) -> Result<(SfiTrace, CcnnState)> {
        check_same(g, "sfi", &[e1, e2, s_prev])?;
        let p1 = self.cbl_e1.forward(g, e1)?;
        let p2 = self.cbl_e2.forward(g, e2)?;
        let ps = self.cbl_s.forward(g, s_prev)?;
        let f_add = g.add(p1, p2)?;
        let f_cat = g.concat(&[p1, ps])?;
        let a = self.cbl_add.forward(g, f_add)?;
        let c = self.cbl_cat.forward(g, f_cat)?;
        let f_fuse = g.concat(&[a, c])?;
        let (f_out, state) = self.sep.forward(g, f_fuse, state, t_steps)?;
        let (s_out, mdfe_cat) = if use_mdfe {
            let (s, cat) = self.mdfe.forward(g, f_out)?;
            (s, Some(cat))
        } else {
            (f_out, None)
        };
        Ok((
            SfiTrace {
                f_fuse,
                f_out,
                mdfe_cat,
                s_out,
            },
            state,
        ))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TsaTrace {
    pub x: Var,
    pub x1r: Var,
    pub x1c: Var,
    pub x2c: Var,
    pub x2r: Var,
    pub x12: Var,
    pub cat: Var,
    pub out: Var,
}

/// Two-dimensional splicing attention. Row maps act along the width axis,
/// column maps along the height axis; both orders share the same maps.
#[derive(Clone, Debug)]
pub struct Tsa {
    pub conv: Conv,
    pub lin_r: Linear,
    pub lin_c: Linear,
    pub proj: Cbl,
    pub normalize: bool,
}

impl Tsa {
    pub fn new(name: &str, c: usize, h: usize, w: usize) -> Self {
        Self {
            conv: Conv::new(format!("{name}.conv"), c, c, 3, ConvSpec::same(3)).without_bias(),
            lin_r: Linear::new(format!("{name}.row"), w, w),
            lin_c: Linear::new(format!("{name}.col"), h, h),
            proj: Cbl::same(&format!("{name}.proj"), 3 * c, c, 1),
            normalize: true,
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.conv.init(store, rng);
        self.lin_r.init(store, rng);
        self.lin_c.init(store, rng);
        self.proj.init(store, rng);
    }

    fn rows<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let n = if self.normalize { g.layer_norm_last(x) } else { x };
        self.lin_r.forward(g, n)
    }

    fn cols<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let t = g.permute(x, [0, 1, 3, 2])?;
        let n = if self.normalize { g.layer_norm_last(t) } else { t };
        let y = self.lin_c.forward(g, n)?;
        g.permute(y, [0, 1, 3, 2])
    }

    pub fn forward_traced<S: Scalar>(&self, g: &mut Graph<S>, f_out: Var) -> Result<TsaTrace> {
        let x = self.conv.forward(g, f_out)?;
        let x1r = self.rows(g, x)?;
        let x1c = self.cols(g, x1r)?;
        let x2c = self.cols(g, x)?;
        let x2r = self.rows(g, x2c)?;
        let x12 = g.add(x1c, x2r)?;
        let cat = g.concat(&[x12, x1c, x2r])?;
        let out = self.proj.forward(g, cat)?;
        Ok(TsaTrace {
            x,
            x1r,
            x1c,
            x2c,
            x2r,
            x12,
            cat,
            out,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DfiTrace {
    pub f_fuse34: Var,
    pub v_f: Var,
    pub v_d: Var,
    pub f_fuse: Var,
    pub f_out: Var,
    pub tsa: TsaTrace,
    pub d_out: Var,
}

#[derive(Clone, Debug)]
pub struct Dfi {
    pub cbl_e3: Cbl,
    pub cbl_cat: Cbl,
    pub ca: ChannelAttention,
    pub ds_f: DwSeparable,
    pub ds_d: DwSeparable,
    pub sep: SeparableCcnn,
    pub tsa: Tsa,
}

impl Dfi {
    pub fn new(name: &str, c: usize, reduction: usize, h: usize, w: usize, ccnn: &CcnnConfig) -> Self {
        Self {
            cbl_e3: Cbl::same(&format!("{name}.e3"), c, c, 1),
            cbl_cat: Cbl::same(&format!("{name}.cat"), 2 * c, c, 3),
            ca: ChannelAttention::new(&format!("{name}.ca"), c, reduction),
            ds_f: DwSeparable::new(&format!("{name}.sa_f"), c, 1),
            ds_d: DwSeparable::new(&format!("{name}.sa_d"), c, 1),
            sep: SeparableCcnn::new(&format!("{name}.sep"), c, ccnn),
            tsa: Tsa::new(&format!("{name}.tsa"), c, h, w),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.cbl_e3.init(store, rng);
        self.cbl_cat.init(store, rng);
        self.ca.init(store, rng);
        self.ds_f.init(store, rng);
        self.ds_d.init(store, rng);
        self.sep.init(store, rng);
        self.tsa.init(store, rng);
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        e3: Var,
        e4: Var,
        d_prev: Var,
        state: CcnnState,
        t_steps: usize,
    ) -> Result<(DfiTrace, CcnnState)> {
        check_same(g, "dfi", &[e3, e4, d_prev])?;
        let p3 = self.cbl_e3.forward(g, e3)?;
        let f_cat = g.concat(&[p3, e4])?;
        let fc = self.cbl_cat.forward(g, f_cat)?;
        let att = self.ca.forward(g, fc)?;
        let sum = g.add(p3, e4)?;
        let f_fuse34 = g.mul(att, sum)?;
        let a = self.ds_f.forward(g, f_fuse34)?;
        let b = self.ds_d.forward(g, d_prev)?;
        let (v_f, v_d) = g.softmax_pair(a, b)?;
        let wf = g.mul(v_f, f_fuse34)?;
        let wd = g.mul(v_d, d_prev)?;
        let f_fuse = g.add(wf, wd)?;
        let (f_out, state) = self.sep.forward(g, f_fuse, state, t_steps)?;
        let tsa = self.tsa.forward_traced(g, f_out)?;
        Ok((
            DfiTrace {
                f_fuse34,
                v_f,
                v_d,
                f_fuse,
                f_out,
                tsa,
                d_out: tsa.out,
            },
            state,
        ))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MfeOutput {
    pub f_fuse: Var,
    pub s: Var,
    pub d: Var,
    pub m: Var,
}

#[derive(Clone, Debug)]
pub struct Mfe {
    pub name: String,
    pub conv_m: Conv,
    pub conv_sd: Conv,
    pub ca_s: ChannelAttention,
    pub ca_d: ChannelAttention,
    pub merge: Cbl,
}

impl Mfe {
    pub fn new(name: &str, c: usize, reduction: usize) -> Self {
        Self {
            name: name.to_string(),
            conv_m: Conv::new(format!("{name}.conv_m"), c, c, 3, ConvSpec::same(3)),
            conv_sd: Conv::new(format!("{name}.conv_sd"), c, c, 3, ConvSpec::same(3)),
            ca_s: ChannelAttention::new(&format!("{name}.ca_s"), c, reduction),
            ca_d: ChannelAttention::new(&format!("{name}.ca_d"), c, reduction),
            merge: Cbl::same(&format!("{name}.merge"), 3 * c, c, 1),
        }
    }

    pub fn delta_name(&self) -> String {
        format!("{}.delta", self.name)
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.conv_m.init(store, rng);
        self.conv_sd.init(store, rng);
        self.ca_s.init(store, rng);
        self.ca_d.init(store, rng);
        self.merge.init(store, rng);
        store.insert(self.delta_name(), Tensor::zeros(&[1, 1, 1, 1]), true);
        store.insert(self.gamma_name(), Tensor::zeros(&[1, 1, 1, 1]), true);
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, s_out: Var, d_out: Var, m_prev: Var) -> Result<MfeOutput> {
        check_same(g, "mfe", &[s_out, d_out, m_prev])?;
        let d_raw = g.param(&self.delta_name())?;
        let g_raw = g.param(&self.gamma_name())?;
        let delta = g.sigmoid(d_raw);
        let gamma = g.sigmoid(g_raw);
        let gs = g.mul(gamma, s_out)?;
        let one_g = g.one_minus(gamma);
        let gd = g.mul(one_g, d_out)?;
        let blend = g.add(gs, gd)?;
        let cm = self.conv_m.forward(g, m_prev)?;
        let cb = self.conv_sd.forward(g, blend)?;
        let one_d = g.one_minus(delta);
        let a = g.mul(one_d, cm)?;
        let b = g.mul(delta, cb)?;
        let f_fuse = g.add(a, b)?;
        let sd = g.add(s_out, d_out)?;
        let branch = |g: &mut Graph<S>, ca: &ChannelAttention| -> Result<Var> {
            let w = ca.forward(g, f_fuse)?;
            let y = g.mul(w, sd)?;
            g.add(y, f_fuse)
        };
        let s = branch(g, &self.ca_s)?;
        let d = branch(g, &self.ca_d)?;
        let cat = g.concat(&[f_fuse, s, d])?;
        let m = self.merge.forward(g, cat)?;
        Ok(MfeOutput { f_fuse, s, d, m })
    }
}

/// 1x1 prediction heads. The semantic head is shared by the three stages.
#[derive(Clone, Debug)]
pub struct Heads {
    pub semantic: Conv,
    pub binary: Conv,
    pub boundary: Conv,
}

impl Heads {
    pub fn new(c: usize, n_classes: usize) -> Self {
        Self {
            semantic: Conv::pointwise("head.sem", c, n_classes),
            binary: Conv::pointwise("head.bin", c, 2),
            boundary: Conv::pointwise("head.bou", c, 2),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        self.semantic.init(store, rng);
        self.binary.init(store, rng);
        self.boundary.init(store, rng);
    }

    /// Sum of the shared semantic head over every enhancement output, at
    /// decoder resolution.
    pub fn semantic_sum<S: Scalar>(&self, g: &mut Graph<S>, ms: &[Var]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &m in ms {
            let l = self.semantic.forward(g, m)?;
            acc = Some(match acc {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        acc.ok_or_else(|| Error::contract("semantic head needs at least one stage"))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutputs {
    pub s_out: Vec<Var>,
    pub d_out: Vec<Var>,
    pub s: Vec<Var>,
    pub d: Vec<Var>,
    pub m: Vec<Var>,
    /// Summed semantic logits at input resolution.
    pub semantic: Var,
    pub binary: Vec<Var>,
    pub boundary: Vec<Var>,
    pub sfi_state: CcnnState,
    pub dfi_state: CcnnState,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub h: usize,
    pub w: usize,
    pub sfi: Vec<Sfi>,
    pub dfi: Vec<Dfi>,
    pub mfe: Vec<Mfe>,
    pub seed_sfi: StateAdapter,
    pub seed_dfi: StateAdapter,
    pub heads: Heads,
}

impl Decoder {
    /// `h`, `w` is the working resolution; `seed_channels` the width of the
    /// encoder lineage that seeds both decoder chains.
    pub fn new(
        cfg: &DecoderConfig,
        h: usize,
        w: usize,
        seed_channels: usize,
        n_classes: usize,
        ccnn: &CcnnConfig,
    ) -> Self {
        let c = cfg.width;
        Self {
            cfg: cfg.clone(),
            h,
            w,
            sfi: (1..=STAGES).map(|j| Sfi::new(&format!("dec.sfi{j}"), c, ccnn)).collect(),
            dfi: (1..=STAGES)
                .map(|j| Dfi::new(&format!("dec.dfi{j}"), c, cfg.reduction, h, w, ccnn))
                .collect(),
            mfe: (1..=STAGES).map(|j| Mfe::new(&format!("dec.mfe{j}"), c, cfg.reduction)).collect(),
            seed_sfi: StateAdapter::new("dec.seed_sfi", seed_channels, c),
            seed_dfi: StateAdapter::new("dec.seed_dfi", seed_channels, c),
            heads: Heads::new(c, n_classes),
        }
    }

    pub fn init<S: Scalar, R: Rng>(&self, store: &mut NamedTensorSet<S>, rng: &mut R) {
        for j in 0..STAGES {
            self.sfi[j].init(store, rng);
            self.dfi[j].init(store, rng);
            self.mfe[j].init(store, rng);
        }
        self.seed_sfi.init(store, rng);
        self.seed_dfi.init(store, rng);
        self.heads.init(store, rng);
    }

    /// Runs the three stages on the fused pyramid `E_1..E_4` (all at decoder
    /// width) and upsamples every head to `out_h` x `out_w`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        pyramid: &[Var],
        seed: CcnnState,
        t_steps: usize,
        ablation: &AblationConfig,
        out_h: usize,
        out_w: usize,
    ) -> Result<DecoderOutputs> {
        if pyramid.len() != 4 {
            return Err(Error::contract(format!("decoder needs 4 pyramid levels, got {}", pyramid.len())));
        }
        let mut e = Vec::with_capacity(4);
        for &p in pyramid {
            if g.shape(p)[1] != self.cfg.width {
                return Err(Error::contract(format!(
                    "pyramid level has {} channels, decoder width is {}",
                    g.shape(p)[1],
                    self.cfg.width
                )));
            }
            e.push(g.resize_bilinear(p, self.h, self.w)?);
        }
        let mut sfi_state = self.seed_sfi.adapt(g, seed, self.h, self.w)?;
        let mut dfi_state = self.seed_dfi.adapt(g, seed, self.h, self.w)?;
        let (mut s_prev, mut d_prev, mut m_prev) = (e[3], e[3], e[3]);
        let mut out = DecoderOutputs {
            s_out: Vec::new(),
            d_out: Vec::new(),
            s: Vec::new(),
            d: Vec::new(),
            m: Vec::new(),
            semantic: e[3],
            binary: Vec::new(),
            boundary: Vec::new(),
            sfi_state,
            dfi_state,
        };
        for j in 0..STAGES {
            let s_out = if ablation.disable_sfi {
                e[1]
            } else {
                let (tr, st) = self.sfi[j].forward(g, e[0], e[1], s_prev, sfi_state, t_steps, !ablation.disable_mdfe)?;
                sfi_state = st;
                tr.s_out
            };
            let d_out = if ablation.disable_dfi {
                e[3]
            } else {
                let (tr, st) = self.dfi[j].forward(g, e[2], e[3], d_prev, dfi_state, t_steps)?;
                dfi_state = st;
                tr.d_out
            };
            let (s, d, m) = if ablation.disable_mfe {
                let sum = g.add(s_out, d_out)?;
                (sum, sum, sum)
            } else {
                let o = self.mfe[j].forward(g, s_out, d_out, m_prev)?;
                (o.s, o.d, o.m)
            };
            out.s_out.push(s_out);
            out.d_out.push(d_out);
            out.s.push(s);
            out.d.push(d);
            out.m.push(m);
            s_prev = s;
            d_prev = d;
            m_prev = m;
        }
        let sem = self.heads.semantic_sum(g, &out.m)?;
        out.semantic = g.resize_bilinear(sem, out_h, out_w)?;
        for j in 0..STAGES {
            let b = self.heads.binary.forward(g, out.d_out[j])?;
            out.binary.push(g.resize_bilinear(b, out_h, out_w)?);
            let s = self.heads.boundary.forward(g, out.s_out[j])?;
            out.boundary.push(g.resize_bilinear(s, out_h, out_w)?);
        }
        out.sfi_state = sfi_state;
        out.dfi_state = dfi_state;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(shape: &[usize], seed: usize) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| (((i + seed) * 7919 % 211) as f64 / 105.0) - 1.0)
    }

    #[test]
    fn tsa_identity_paths_double_input() {
        let mut tsa = Tsa::new("t", 1, 2, 2);
        tsa.normalize = false;
        let mut store = NamedTensorSet::<f64>::new();
        tsa.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store.set("t.row.w", eye.clone()).unwrap();
        store.set("t.col.w", eye).unwrap();
        store.set("t.row.b", Tensor::zeros(&[2])).unwrap();
        store.set("t.col.b", Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(rand_map(&[1, 1, 2, 2], 3));
        let tr = tsa.forward_traced(&mut g, x).unwrap();
        let twice = g.value(tr.x).map(|v| 2.0 * v);
        assert_eq!(g.value(tr.x12), &twice);
        assert_eq!(g.shape(tr.cat)[1], 3);
    }

    #[test]
    fn tsa_hand_matrices() {
        let mut tsa = Tsa::new("t", 1, 2, 2);
        tsa.normalize = false;
        let mut store = NamedTensorSet::<f64>::new();
        tsa.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        // row map acts on the width axis: x W_r^T + b_r
        store.set("t.row.w", Tensor::new(&[2, 2], vec![1.0, 2.0, 0.0, 1.0]).unwrap()).unwrap();
        store.set("t.row.b", Tensor::new(&[2], vec![1.0, 0.0]).unwrap()).unwrap();
        // column map acts on the height axis: W_c x + b_c
        store.set("t.col.w", Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        store.set("t.col.b", Tensor::zeros(&[2])).unwrap();
        store.set("t.conv.w", Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 })).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        // X = [[1, 2], [3, 4]]
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let tr = tsa.forward_traced(&mut g, x).unwrap();
        // X1r = [[1+4+1, 2], [3+8+1, 4]] = [[6, 2], [12, 4]]
        assert_eq!(g.value(tr.x1r).data(), &[6.0, 2.0, 12.0, 4.0]);
        // X1c = [[12, 4], [18, 6]]
        assert_eq!(g.value(tr.x1c).data(), &[12.0, 4.0, 18.0, 6.0]);
        // X2c = [[3, 4], [4, 6]]; X2r = [[3+8+1, 4], [4+12+1, 6]]
        assert_eq!(g.value(tr.x2r).data(), &[12.0, 4.0, 17.0, 6.0]);
        assert_eq!(g.value(tr.x12).data(), &[24.0, 8.0, 35.0, 12.0]);
    }

    fn mfe_store(seed: u64) -> (Mfe, NamedTensorSet<f64>) {
        let m = Mfe::new("m", 4, 4);
        let mut store = NamedTensorSet::new();
        m.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (m, store)
    }

    #[test]
    fn mfe_gate_saturation() {
        let (m, mut store) = mfe_store(1);
        let s = rand_map(&[1, 4, 4, 4], 1);
        let d = rand_map(&[1, 4, 4, 4], 2);
        let mp = rand_map(&[1, 4, 4, 4], 3);
        let conv = |store: &NamedTensorSet<f64>, name: &str, x: &Tensor<f64>| {
            let mut g = Graph::new(store, Mode::Train);
            let v = g.constant(x.clone());
            let w = g.param(&format!("{name}.w")).unwrap();
            let b = g.param(&format!("{name}.b")).unwrap();
            let y = g.conv2d(v, w, Some(b), ConvSpec::same(3)).unwrap();
            g.value(y).clone()
        };
        for (dv, gv, expect) in [(40.0, 40.0, conv(&store, "m.conv_sd", &s)), (-40.0, 0.0, conv(&store, "m.conv_m", &mp))] {
            store.set("m.delta", Tensor::full(&[1, 1, 1, 1], dv)).unwrap();
            store.set("m.gamma", Tensor::full(&[1, 1, 1, 1], gv)).unwrap();
            let mut g = Graph::new(&store, Mode::Train);
            let (sv, dvv, mv) = (g.constant(s.clone()), g.constant(d.clone()), g.constant(mp.clone()));
            let o = m.forward(&mut g, sv, dvv, mv).unwrap();
            assert!(g.value(o.f_fuse).max_abs_diff(&expect) < 1e-6);
        }
    }

    #[test]
    fn mfe_tied_attention_gives_equal_branches() {
        let (m, mut store) = mfe_store(2);
        for suffix in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
            let v = store.get(&format!("m.ca_s.mlp.{suffix}")).unwrap().clone();
            store.set(&format!("m.ca_d.mlp.{suffix}"), v).unwrap();
        }
        let mut g = Graph::new(&store, Mode::Train);
        let s = g.constant(rand_map(&[1, 4, 4, 4], 4));
        let d = g.constant(rand_map(&[1, 4, 4, 4], 5));
        let mp = g.constant(rand_map(&[1, 4, 4, 4], 6));
        let o = m.forward(&mut g, s, d, mp).unwrap();
        assert_eq!(g.value(o.s), g.value(o.d));
    }

    #[test]
    fn sfi_residual_and_mdfe_width() {
        let sfi = Sfi::new("s", 4, &CcnnConfig::default());
        let mut store = NamedTensorSet::<f64>::new();
        sfi.init(&mut store, &mut ChaCha8Rng::seed_from_u64(7));
        let mut g = Graph::new(&store, Mode::Train);
        let e1 = g.constant(rand_map(&[1, 4, 8, 8], 1));
        let e2 = g.constant(rand_map(&[1, 4, 8, 8], 2));
        let sp = g.constant(rand_map(&[1, 4, 8, 8], 3));
        let st = CcnnState::zeros(&mut g, &[1, 4, 8, 8]);
        let (tr, st) = sfi.forward(&mut g, e1, e2, sp, st, 2, true).unwrap();
        assert_eq!(st.n, 2);
        assert_eq!(g.shape(tr.mdfe_cat.unwrap())[1], 16);
        assert_eq!(g.shape(tr.s_out), &[1, 4, 8, 8]);
        let (tr2, _) = sfi.forward(&mut g, e1, e2, sp, st, 1, false).unwrap();
        assert_eq!(tr2.s_out, tr2.f_out);
        assert!(g.value(tr.s_out).max_abs_diff(g.value(tr.f_out)) > 1e-3);
    }

    #[test]
    fn semantic_sum_is_linear_in_stages() {
        let heads = Heads::new(4, 3);
        let mut store = NamedTensorSet::<f64>::new();
        heads.init(&mut store, &mut ChaCha8Rng::seed_from_u64(8));
        let mut g = Graph::new(&store, Mode::Eval);
        let ms: Vec<Var> = (0..3).map(|k| g.constant(rand_map(&[1, 4, 4, 4], k))).collect();
        let full = heads.semantic_sum(&mut g, &ms).unwrap();
        let zero = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let dropped = heads.semantic_sum(&mut g, &[ms[0], zero, ms[2]]).unwrap();
        let only = heads.semantic_sum(&mut g, &[ms[1]]).unwrap();
        let only_zero = heads.semantic_sum(&mut g, &[zero]).unwrap();
        // full - dropped == head(M_2) - head(0)
        let lhs = g.value(full).zip_map(g.value(dropped), |a, b| a - b).unwrap();
        let rhs = g.value(only).zip_map(g.value(only_zero), |a, b| a - b).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
