//! Targets, losses, automatic loss weighting and segmentation metrics.

use std::fmt::Write as _;

use crate::ablation::{AblationConfig, N_HEADS};
use crate::decoder::DecoderOutputs;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Class-id image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::dim(
                "label_map",
                "spatial",
                format!("{} ids for {height}x{width}", ids.len()),
            ));
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn distinct(&self) -> usize {
        let mut seen = [false; 256];
        self.ids.iter().for_each(|&i| seen[i as usize] = true);
        seen.iter().filter(|&&s| s).count()
    }

    pub fn max_id(&self) -> u8 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut ids = Vec::with_capacity(self.ids.len());
        for row in self.ids.chunks(self.width) {
            ids.extend(row.iter().rev());
        }
        Self { ids, ..*self }
    }
}

/// Marks pixels with a differently labelled 4-neighbour, then dilates the
/// marks once with a 3x3 square.
pub fn boundary_target(labels: &LabelMap) -> LabelMap {
    let (h, w) = (labels.height, labels.width);
    let mut edge = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = labels.at(y, x);
            let differs = (y > 0 && labels.at(y - 1, x) != c)
                || (y + 1 < h && labels.at(y + 1, x) != c)
                || (x > 0 && labels.at(y, x - 1) != c)
                || (x + 1 < w && labels.at(y, x + 1) != c);
            edge[y * w + x] = differs;
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let hit = (y.saturating_sub(1)..(y + 2).min(h))
                .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| edge[yy * w + xx]));
            out[y * w + x] = hit as u8;
        }
    }
    LabelMap {
        height: h,
        width: w,
        ids: out,
    }
}

/// Foreground indicator: 1 wherever the class id is nonzero.
pub fn binary_target(labels: &LabelMap) -> LabelMap {
    LabelMap {
        ids: labels.ids.iter().map(|&c| (c > 0) as u8).collect(),
        ..*labels
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupervisionTargets {
    pub semantic: LabelMap,
    pub binary: LabelMap,
    pub boundary: LabelMap,
}

impl SupervisionTargets {
    pub fn from_labels(labels: &LabelMap) -> Self {
        Self {
            semantic: labels.clone(),
            binary: binary_target(labels),
            boundary: boundary_target(labels),
        }
    }
}

fn flatten<'a>(maps: impl Iterator<Item = &'a LabelMap>) -> Vec<usize> {
    maps.flat_map(|m| m.ids.iter().map(|&i| i as usize)).collect()
}

/// The seven supervised losses in the order bin1..3, bou1..3, se.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub terms: [Var; N_HEADS],
}

impl LossTerms {
    pub fn values<S: Scalar>(&self, g: &Graph<S>) -> [f64; N_HEADS] {
        self.terms.map(|v| g.value(v).item().f64())
    }
}

pub fn compute_losses<S: Scalar>(
    g: &mut Graph<S>,
    outputs: &DecoderOutputs,
    targets: &[SupervisionTargets],
    n_classes: usize,
) -> Result<LossTerms> {
    let sem_k = g.shape(outputs.semantic)[1];
    if sem_k != n_classes {
        return Err(Error::contract(format!(
            "semantic head has {sem_k} classes, targets use {n_classes}"
        )));
    }
    let sem = flatten(targets.iter().map(|t| &t.semantic));
    let bin = flatten(targets.iter().map(|t| &t.binary));
    let bou = flatten(targets.iter().map(|t| &t.boundary));
    let mut terms = Vec::with_capacity(N_HEADS);
    for &v in &outputs.binary {
        terms.push(g.cross_entropy(v, &bin)?);
    }
    for &v in &outputs.boundary {
        terms.push(g.cross_entropy(v, &bou)?);
    }
    terms.push(g.cross_entropy(outputs.semantic, &sem)?);
    let terms: [Var; N_HEADS] = terms
        .try_into()
        .map_err(|_| Error::contract("decoder must expose three binary and three boundary heads"))?;
    Ok(LossTerms { terms })
}

/// Weighted total over the active heads. With learned weights each term is
/// `exp(-s_k) / 2 * L_k + s_k / 2`; with fixed weights it is `w_k L_k / 2`.
pub fn awl_total<S: Scalar>(g: &mut Graph<S>, losses: &LossTerms, s: Var, ablation: &AblationConfig) -> Result<Var> {
    if g.shape(s) != [N_HEADS] {
        return Err(Error::dim("awl_total", "0", format!("expected [{N_HEADS}], got {:?}", g.shape(s))));
    }
    let mut cols = Vec::with_capacity(N_HEADS);
    for &l in &losses.terms {
        cols.push(g.reshape(l, &[1, 1, 1, 1])?);
    }
    let l = g.concat(&cols)?;
    let mask = Tensor::from_fn(&[1, N_HEADS, 1, 1], |k| if ablation.loss_mask[k] { S::one() } else { S::zero() });
    let total = match &ablation.fixed_loss_weights {
        Some(w) => {
            let w = g.constant(Tensor::from_fn(&[1, N_HEADS, 1, 1], |k| {
                S::of(if ablation.loss_mask[k] { w[k] / 2.0 } else { 0.0 })
            }));
            let wl = g.mul(w, l)?;
            g.sum(wl)
        }
        None => {
            let mask = g.constant(mask);
            let s4 = g.reshape(s, &[1, N_HEADS, 1, 1])?;
            let neg = g.scale(s4, -1.0);
            let e = g.exp(neg);
            let wl = g.mul(e, l)?;
            let term = g.add(wl, s4)?;
            let term = g.scale(term, 0.5);
            let term = g.mul(term, mask)?;
            g.sum(term)
        }
    };
    Ok(total)
}

/// Plain-arithmetic weighted total, for reporting and tests.
pub fn awl_value(losses: &[f64; N_HEADS], s: &[f64; N_HEADS], ablation: &AblationConfig) -> f64 {
    (0..N_HEADS)
        .filter(|&k| ablation.loss_mask[k])
        .map(|k| match &ablation.fixed_loss_weights {
            Some(w) => w[k] * losses[k] / 2.0,
            None => (-s[k]).exp() / 2.0 * losses[k] + s[k] / 2.0,
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(n_classes: usize) -> Self {
        Self {
            tp: vec![0; n_classes],
            fp: vec![0; n_classes],
            fn_: vec![0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::dim(
                "metrics",
                "spatial",
                format!("{}x{} vs {}x{}", pred.height, pred.width, gt.height, gt.width),
            ));
        }
        let n = self.n_classes();
        for (&p, &t) in pred.ids.iter().zip(&gt.ids) {
            let (p, t) = (p as usize, t as usize);
            if p >= n || t >= n {
                return Err(Error::contract(format!("class id {} out of range for {n} classes", p.max(t))));
            }
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for i in 0..self.n_classes() {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
    }

    pub fn report(&self) -> MetricsReport {
        let per_class: Vec<ClassMetrics> = (0..self.n_classes())
            .map(|i| {
                let (tp, fp, fn_) = (self.tp[i], self.fp[i], self.fn_[i]);
                ClassMetrics {
                    class: i,
                    acc: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
                    iou: (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64),
                }
            })
            .collect();
        let mean = |xs: Vec<f64>| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        MetricsReport {
            macc: mean(per_class.iter().filter_map(|c| c.acc).collect()),
            miou: mean(per_class.iter().filter_map(|c| c.iou).collect()),
            per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    /// Undefined when the class never occurs in the ground truth.
    pub acc: Option<f64>,
    /// Undefined when the class occurs in neither map.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macc: f64,
    pub miou: f64,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("class,acc,iou\n");
        for c in &self.per_class {
            let _ = writeln!(s, "{},{},{}", c.class, f(c.acc), f(c.iou));
        }
        let _ = writeln!(s, "mean,{:.6},{:.6}", self.macc, self.miou);
        s
    }
}

pub fn metrics(pred: &LabelMap, gt: &LabelMap, n_classes: usize) -> Result<MetricsReport> {
    let mut c = ConfusionCounts::new(n_classes);
    c.accumulate(pred, gt)?;
    Ok(c.report())
}
