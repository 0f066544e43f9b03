//! Two-stage training, evaluation and prediction.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ablation::{HEAD_NAMES, N_HEADS};
use crate::checkpoint::{config_sidecar, Checkpoint, RunMeta};
use crate::config::{DataSource, RunConfig, StageConfig};
use crate::data::{load_dataset, make_batch, synthetic_splits, Batch, SceneSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::model::{BimiiNet, AWL_PARAM};
use crate::optim::{clip_grad_norm, AdamW};
use crate::params::NamedTensorSet;
use crate::supervision::{awl_total, compute_losses, ConfusionCounts, LabelMap, MetricsReport};
use crate::tensor::{Scalar, Tensor};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "BIMII_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: u32,
    pub epoch: u32,
    /// Mean weighted total over the epoch's batches.
    pub total: f64,
    /// Mean of each unweighted head loss, in head order.
    pub components: [f64; N_HEADS],
    pub seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let comps: Vec<String> = HEAD_NAMES
            .iter()
            .zip(self.components)
            .map(|(n, v)| format!("{n}={v:.5}"))
            .collect();
        format!(
            "stage {} epoch {:>3} total={:.5} {} ({:.1}s)",
            self.stage,
            self.epoch,
            self.total,
            comps.join(" "),
            self.seconds
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub total: f64,
    pub components: [f64; N_HEADS],
    pub grad_norm: f64,
}

/// Forward, backward and one optimizer update on `batch`. Batch-norm running
/// statistics are written back to `store`.
pub fn train_step<S: Scalar>(
    net: &BimiiNet,
    store: &mut NamedTensorSet<S>,
    opt: &mut AdamW<S>,
    batch: &Batch<S>,
    stage: &StageConfig,
) -> Result<StepOutcome> {
    let (total, components, mut grads, stats) = {
        let mut g = Graph::new(store, Mode::Train);
        let rgb = g.constant(batch.rgb.clone());
        let th = g.constant(batch.thermal.clone());
        let out = net.forward(&mut g, rgb, th, stage.t_steps)?;
        let losses = compute_losses(&mut g, &out.decoder, &batch.targets, net.cfg.n_classes)?;
        let s = g.param(AWL_PARAM)?;
        let total = awl_total(&mut g, &losses, s, &net.cfg.ablation)?;
        let components = losses.values(&g);
        for (name, v) in HEAD_NAMES.iter().zip(components) {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss component {name} = {v}")));
            }
        }
        let total_v = g.value(total).item().f64();
        if !total_v.is_finite() {
            return Err(Error::NonFinite(format!("weighted total loss = {total_v} ({AWL_PARAM} diverged)")));
        }
        let grads = g.backward(total)?.named(store);
        (total_v, components, grads, g.take_stat_updates())
    };
    let grad_norm = match stage.clip {
        Some(c) => clip_grad_norm(&mut grads, c),
        None => grads.l2_norm(),
    };
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm = {grad_norm}")));
    }
    opt.step(store, &grads, stage.lr, stage.weight_decay)?;
    for u in stats {
        store.set(&u.name, u.value)?;
    }
    Ok(StepOutcome {
        total,
        components,
        grad_norm,
    })
}

fn epoch_rng(seed: u64, stage: u32, epoch: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((stage as u64) << 48) ^ ((epoch as u64) << 32))
}

/// Runs epochs `first_epoch..=stage.epochs` of one stage.
pub fn run_stage<S: Scalar>(
    cfg: &RunConfig,
    net: &BimiiNet,
    store: &mut NamedTensorSet<S>,
    samples: &[SceneSample],
    stage_idx: u32,
    first_epoch: u32,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let stage = if stage_idx == 1 { &cfg.stage1 } else { &cfg.stage2 };
    let mut opt = AdamW::new(store, cfg.optim.clone());
    let mut logs = Vec::new();
    for epoch in first_epoch..=stage.epochs as u32 {
        let started = Instant::now();
        let mut rng = epoch_rng(cfg.seed, stage_idx, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut sum_total = 0.0;
        let mut sum_comps = [0.0; N_HEADS];
        let mut batches = 0usize;
        for chunk in order.chunks(stage.batch) {
            let owned: Vec<SceneSample> = chunk
                .iter()
                .map(|&i| {
                    samples[i].augment_with(&mut rng, cfg.augment_crop, cfg.augment_flip)
                })
                .collect();
            let refs: Vec<&SceneSample> = owned.iter().collect();
            let batch = make_batch::<S>(&refs)?;
            let step = train_step(net, store, &mut opt, &batch, stage)?;
            sum_total += step.total;
            for (acc, v) in sum_comps.iter_mut().zip(step.components) {
                *acc += v;
            }
            batches += 1;
        }
        let log = EpochLog {
            stage: stage_idx,
            epoch,
            total: sum_total / batches as f64,
            components: sum_comps.map(|v| v / batches as f64),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub net: BimiiNet,
    pub store: NamedTensorSet<S>,
    pub logs: Vec<EpochLog>,
    /// Checkpoints written at each stage end, when an output directory was given.
    pub checkpoints: Vec<PathBuf>,
}

fn write_checkpoint<S: Scalar>(
    dir: &Path,
    cfg: &RunConfig,
    store: &NamedTensorSet<S>,
    meta: RunMeta,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("stage{}.bimk", meta.stage));
    Checkpoint::capture(store, meta).save(&path)?;
    std::fs::write(config_sidecar(&path), cfg.to_text())?;
    Ok(path)
}

/// Full schedule: stage 1 at its time steps, then stage 2 starting from the
/// stage-1 checkpoint. `resume` continues after the stage and epoch it
/// records, with fresh optimizer moments.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    samples: &[SceneSample],
    resume: Option<&Checkpoint>,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let net = BimiiNet::new(cfg.model.clone())?;
    let mut store = net.init::<S>(cfg.seed);
    let (mut stage, mut epoch) = (1u32, 1u32);
    if let Some(ck) = resume {
        ck.restore_into(&mut store)?;
        let done = if ck.meta.stage == 1 { cfg.stage1.epochs } else { cfg.stage2.epochs };
        (stage, epoch) = match ck.meta.stage {
            1 | 2 if ck.meta.epoch as usize >= done => (ck.meta.stage + 1, 1),
            1 | 2 => (ck.meta.stage, ck.meta.epoch + 1),
            s => return Err(Error::Checkpoint(format!("unknown stage {s} in resume checkpoint"))),
        };
    }
    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    if stage == 1 {
        logs.extend(run_stage(cfg, &net, &mut store, samples, 1, epoch, on_epoch)?);
        let meta = RunMeta {
            stage: 1,
            epoch: cfg.stage1.epochs as u32,
            seed: cfg.seed,
        };
        let ck = Checkpoint::capture(&store, meta);
        if let Some(dir) = out_dir {
            checkpoints.push(write_checkpoint(dir, cfg, &store, meta)?);
        }
        store = net.init::<S>(cfg.seed);
        ck.restore_into(&mut store)?;
        stage = 2;
        epoch = 1;
    }
    if stage == 2 {
        logs.extend(run_stage(cfg, &net, &mut store, samples, 2, epoch, on_epoch)?);
        if let Some(dir) = out_dir {
            let meta = RunMeta {
                stage: 2,
                epoch: cfg.stage2.epochs as u32,
                seed: cfg.seed,
            };
            checkpoints.push(write_checkpoint(dir, cfg, &store, meta)?);
        }
    }
    Ok(TrainOutcome {
        net,
        store,
        logs,
        checkpoints,
    })
}

/// Raw semantic logits `[1, K, H, W]` for one sample in evaluation mode.
pub fn logits<S: Scalar>(net: &BimiiNet, store: &NamedTensorSet<S>, sample: &SceneSample, t_steps: usize) -> Result<Tensor<S>> {
    let batch = make_batch::<S>(&[sample])?;
    let mut g = Graph::new(store, Mode::Eval);
    let rgb = g.constant(batch.rgb);
    let th = g.constant(batch.thermal);
    let out = net.forward(&mut g, rgb, th, t_steps)?;
    Ok(g.value(out.logits()).clone())
}

/// Per-pixel argmax over the summed semantic logits; ties go to the lower id.
pub fn argmax_labels<S: Scalar>(logits: &Tensor<S>) -> Result<LabelMap> {
    let (b, k, h, w) = logits.dims4()?;
    if b != 1 {
        return Err(Error::contract("argmax_labels expects a single image"));
    }
    let d = logits.data();
    let ids = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * h * w + p] > d[best * h * w + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, ids)
}

pub fn predict<S: Scalar>(net: &BimiiNet, store: &NamedTensorSet<S>, sample: &SceneSample, t_steps: usize) -> Result<LabelMap> {
    argmax_labels(&logits(net, store, sample, t_steps)?)
}

fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Confusion counts over `samples`, parallel over samples.
pub fn evaluate<S: Scalar + Send + Sync>(
    net: &BimiiNet,
    store: &NamedTensorSet<S>,
    samples: &[SceneSample],
    t_steps: usize,
    n_classes: usize,
) -> Result<MetricsReport> {
    if n_classes != net.cfg.n_classes {
        return Err(Error::Config(format!(
            "dataset has {n_classes} classes, model predicts {}",
            net.cfg.n_classes
        )));
    }
    let counts = pool()?.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let pred = predict(net, store, s, t_steps)?;
                let mut c = ConfusionCounts::new(n_classes);
                c.accumulate(&pred, &s.labels)?;
                Ok::<_, Error>(c)
            })
            .try_reduce(
                || ConfusionCounts::new(n_classes),
                |mut a, b| {
                    a.merge(&b);
                    Ok(a)
                },
            )
    })?;
    Ok(counts.report())
}

/// Samples of `split` from the data source in `cfg`. Synthetic data has
/// `train` and `val` splits; directory datasets read `<split>.txt`. `all`
/// yields every sample.
pub fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<SceneSample>> {
    let samples = match cfg.data.source {
        DataSource::Synthetic => {
            let (train, val) = synthetic_splits(cfg.data.seed, cfg.data.train_count, cfg.data.val_count, &cfg.synth())?;
            match split {
                "train" => train,
                "val" => val,
                "all" => train.into_iter().chain(val).collect(),
                other => {
                    return Err(Error::Dataset(format!(
                        "synthetic data has no `{other}` split (use train, val or all)"
                    )))
                }
            }
        }
        DataSource::Dir => {
            let root = cfg
                .data
                .root
                .as_deref()
                .ok_or_else(|| Error::Config("data.source = dir needs data.root".into()))?;
            load_dataset(root, cfg.model.n_classes)?.load_split(split)?
        }
    };
    if samples.is_empty() {
        return Err(Error::Dataset(format!("split `{split}` is empty")));
    }
    let (h, w) = (cfg.model.height, cfg.model.width);
    if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Dataset(format!(
            "sample is {}x{}, model expects {h}x{w}",
            s.height, s.width
        )));
    }
    Ok(samples)
}

/// Network for `cfg` with parameters restored from `ckpt`.
pub fn load_model<S: Scalar>(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<(BimiiNet, NamedTensorSet<S>)> {
    cfg.validate()?;
    let net = BimiiNet::new(cfg.model.clone())?;
    let mut store = net.init::<S>(cfg.seed);
    ckpt.restore_into(&mut store)?;
    Ok((net, store))
}

/// Time steps used at evaluation: the last stage that trains at all.
pub fn eval_t_steps(cfg: &RunConfig) -> usize {
    if cfg.stage2.epochs > 0 {
        cfg.stage2.t_steps
    } else {
        cfg.stage1.t_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_set, SynthConfig};

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.height = 32;
        cfg.model.width = 32;
        cfg.model.encoder.channels = [4, 6, 8, 10];
        cfg.model.encoder.blocks_per_stage = 1;
        cfg.model.decoder.width = 8;
        cfg.stage1.epochs = 2;
        cfg.stage2.epochs = 1;
        cfg.augment_crop = false;
        cfg.augment_flip = false;
        cfg
    }

    fn samples(cfg: &RunConfig, n: usize) -> Vec<SceneSample> {
        let s = SynthConfig {
            height: cfg.model.height,
            width: cfg.model.width,
            ..SynthConfig::default()
        };
        gen_synthetic_set(3, n, &s).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_stage_two_runs() {
        let cfg = small_cfg();
        let data = samples(&cfg, 4);
        let a = train::<f32>(&cfg, &data, None, None, &mut |_| {}).unwrap();
        let b = train::<f32>(&cfg, &data, None, None, &mut |_| {}).unwrap();
        assert_eq!(a.logs.len(), 3);
        assert_eq!(a.logs[2].stage, 2);
        let bits = |l: &[EpochLog]| l.iter().map(|e| e.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logs), bits(&b.logs));
        for ((_, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(x.tensor, y.tensor);
        }
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        let t = Tensor::new(&[1, 3, 1, 2], vec![1.0f32, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap().ids, vec![0, 1]);
    }

    #[test]
    fn class_count_mismatch_is_an_error() {
        let cfg = small_cfg();
        let net = BimiiNet::new(cfg.model.clone()).unwrap();
        let store = net.init::<f32>(0);
        assert!(evaluate(&net, &store, &samples(&cfg, 1), 1, 9).is_err());
    }
}
