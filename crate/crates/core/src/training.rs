//! Joint loss, the training loop and the evaluation harness.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vrckit_tensor::{lr_schedule, AdamConfig, ParamRegistry, Tape, Tensor, Var};

use crate::error::{Error, Result, ResultExt};
use crate::geometry::PointCloud;
use crate::metrics::{chamfer_distance, fscore, MetricReport, SampleScore, DEFAULT_TAU};
use crate::model::{complete, save_model, train_forward, LossVars, VrcnetConfig};
use crate::pmnet::StepNoise;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_com: f64,
    pub lambda_fine: f64,
    /// Weight of each KL term inside its path loss.
    pub kl_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 1.0,
            lambda_com: 1.0,
            lambda_fine: 1.0,
            kl_lambda: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_com", self.lambda_com),
            ("lambda_fine", self.lambda_fine),
            ("kl_lambda", self.kl_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Loss term values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub kl_rec: f64,
    pub cd_rec: f64,
    pub kl_com: f64,
    pub cd_com: f64,
    pub cd_fine: f64,
}

impl LossParts {
    fn read(tape: &Tape, v: &LossVars) -> Self {
        LossParts {
            kl_rec: tape.value(v.kl_rec).item(),
            cd_rec: tape.value(v.cd_rec).item(),
            kl_com: tape.value(v.kl_com).item(),
            cd_com: tape.value(v.cd_com).item(),
            cd_fine: tape.value(v.cd_fine).item(),
        }
    }

    fn add(&mut self, o: &LossParts) {
        self.kl_rec += o.kl_rec;
        self.cd_rec += o.cd_rec;
        self.kl_com += o.kl_com;
        self.cd_com += o.cd_com;
        self.cd_fine += o.cd_fine;
    }

    fn scaled(&self, f: f64) -> Self {
        LossParts {
            kl_rec: self.kl_rec * f,
            cd_rec: self.cd_rec * f,
            kl_com: self.kl_com * f,
            cd_com: self.cd_com * f,
            cd_fine: self.cd_fine * f,
        }
    }
}

/// `λ_rec(κ·kl_rec + cd_rec) + λ_com(κ·kl_com + cd_com) + λ_fine·cd_fine`,
/// evaluated in exactly this order.
pub fn joint_loss_value(p: &LossParts, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let rec = w.lambda_rec * (w.kl_lambda * p.kl_rec + p.cd_rec);
    let com = w.lambda_com * (w.kl_lambda * p.kl_com + p.cd_com);
    Ok(rec + com + w.lambda_fine * p.cd_fine)
}

/// The same sum as [`joint_loss_value`], on the tape.
pub fn joint_loss(tape: &mut Tape, parts: &LossVars, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    for v in [
        parts.kl_rec,
        parts.cd_rec,
        parts.kl_com,
        parts.cd_com,
        parts.cd_fine,
    ] {
        if tape.shape(v) != [1] {
            return Err(Error::InvalidArgument(format!(
                "loss terms must be scalars, got {:?}",
                tape.shape(v)
            )));
        }
    }
    let path = |tape: &mut Tape, kl: Var, cd: Var, lambda: f64| -> Result<Var> {
        let k = tape.scale(kl, w.kl_lambda)?;
        let s = tape.add(k, cd)?;
        Ok(tape.scale(s, lambda)?)
    };
    let rec = path(tape, parts.kl_rec, parts.cd_rec, w.lambda_rec)?;
    let com = path(tape, parts.kl_com, parts.cd_com, w.lambda_com)?;
    let fine = tape.scale(parts.cd_fine, w.lambda_fine)?;
    let s = tape.add(rec, com)?;
    Ok(tape.add(s, fine)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub base_lr: f64,
    pub decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_interval: usize,
    pub seed: u64,
    /// Epochs between checkpoints; `0` saves only the final model.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Ground-truth resolution used as the training target.
    pub gt_resolution: usize,
    /// Runs the samples of a batch concurrently; results are identical.
    #[serde(default)]
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 100,
            max_steps: None,
            base_lr: 1e-4,
            decay: 0.7,
            decay_interval: 40,
            seed: 0,
            checkpoint_every: 0,
            gt_resolution: 1024,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.epochs == 0
            || self.decay_interval == 0
            || self.gt_resolution == 0
        {
            return Err(Error::InvalidArgument(format!(
                "training sizes must be positive: {self:?}"
            )));
        }
        if !(self.base_lr > 0.0 && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need base_lr > 0 and decay in (0, 1], got {} and {}",
                self.base_lr, self.decay
            )));
        }
        Ok(())
    }

    /// `base_lr · decay^⌊epoch / decay_interval⌋`
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_schedule(
            epoch as u64,
            self.base_lr,
            self.decay,
            self.decay_interval as u64,
        )
    }
}

/// One partial/complete training pair.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub partial: PointCloud,
    pub target: PointCloud,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub kl_rec: f64,
    pub cd_rec: f64,
    pub kl_com: f64,
    pub cd_com: f64,
    pub cd_fine: f64,
    pub total: f64,
}

fn sample_grads(
    reg: &ParamRegistry,
    model: &VrcnetConfig,
    w: &LossWeights,
    s: &TrainSample,
    noise_seed: u64,
) -> Result<(LossParts, f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let noise = StepNoise::sample(noise_seed, model.pmnet.latent_dim);
    let fwd = train_forward(&mut tape, reg, model, &s.partial, &s.target, &noise)?;
    let loss = joint_loss(&mut tape, &fwd.losses, w)?;
    let parts = LossParts::read(&tape, &fwd.losses);
    let total = tape.value(loss).item();
    let grads = tape.backward(loss)?.into_params();
    Ok((parts, total, grads))
}

/// Batches of equal partial size, shuffled by a per-epoch stream.
fn epoch_batches(
    data: &[TrainSample],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, &format!("train.shuffle.{epoch}")));
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        groups.entry(data[i].partial.len()).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = groups
        .into_values()
        .flat_map(|g| {
            g.chunks(batch_size)
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect();
    batches.shuffle(&mut rng::stream(seed, &format!("train.batches.{epoch}")));
    batches
}

/// Adam training with per-epoch step decay. Each step's record goes to
/// `on_step` as it completes; checkpoints go to `checkpoint_dir` as
/// `epoch_NNNN` every `checkpoint_every` epochs and `final` at the end.
pub fn fit(
    reg: &mut ParamRegistry,
    model: &VrcnetConfig,
    data: &[TrainSample],
    cfg: &TrainConfig,
    w: &LossWeights,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    w.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut log = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        for batch in epoch_batches(data, cfg.batch_size, cfg.seed, epoch) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let job = |(slot, &i): (usize, &usize)| {
                let noise_seed = rng::derive(cfg.seed, &format!("train.noise.{step}.{slot}"));
                sample_grads(reg, model, w, &data[i], noise_seed)
            };
            let results: Vec<_> = if cfg.parallel {
                batch.par_iter().enumerate().map(job).collect()
            } else {
                batch.iter().enumerate().map(job).collect()
            };
            let inv = 1.0 / batch.len() as f64;
            let mut parts = LossParts::default();
            let mut total = 0.0;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for r in results {
                let (p, t, g) = match r {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => return Err(Error::NonFiniteLoss { step }),
                    Err(e) => return Err(e).context(|| format!("training step {step}")),
                };
                parts.add(&p);
                total += t;
                for (path, gt) in g {
                    match grads.get_mut(&path) {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(gt.data())
                            .for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(path, gt);
                        }
                    }
                }
            }
            let parts = parts.scaled(inv);
            let total = total * inv;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            grads
                .values_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            reg.adam_step(
                &grads,
                &AdamConfig {
                    lr,
                    ..AdamConfig::default()
                },
            )?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                kl_rec: parts.kl_rec,
                cd_rec: parts.cd_rec,
                kl_com: parts.kl_com,
                cd_com: parts.cd_com,
                cd_fine: parts.cd_fine,
                total,
            };
            on_step(&rec)?;
            log.push(rec);
            step += 1;
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_model(&dir.join(format!("epoch_{:04}", epoch + 1)), reg, model)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_model(&dir.join("final"), reg, model)?;
    }
    Ok(log)
}

/// One evaluation sample with ground truth at several resolutions.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub category: String,
    pub partial: PointCloud,
    pub gts: BTreeMap<usize, PointCloud>,
}

/// Scores any predictor `(partial, n) → n-point completion`; samples run in parallel.
pub fn evaluate_with<F>(
    samples: &[EvalSample],
    resolutions: &[usize],
    predict: F,
) -> Result<BTreeMap<usize, MetricReport>>
where
    F: Fn(&EvalSample, usize) -> Result<PointCloud> + Sync,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut out = BTreeMap::new();
    for &n in resolutions {
        let scores: Vec<SampleScore> = samples
            .par_iter()
            .map(|s| {
                let gt = s.gts.get(&n).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "no {n}-point ground truth for a {} sample",
                        s.category
                    ))
                })?;
                let pred = predict(s, n)?;
                Ok(SampleScore {
                    category: s.category.clone(),
                    cd: chamfer_distance(pred.points(), gt.points())?,
                    fscore: fscore(pred.points(), gt.points(), DEFAULT_TAU)?,
                })
            })
            .collect::<Result<_>>()?;
        out.insert(n, MetricReport::from_samples(&scores)?);
    }
    Ok(out)
}

/// Deterministic completions at each resolution, scored per category.
pub fn evaluate(
    reg: &ParamRegistry,
    model: &VrcnetConfig,
    samples: &[EvalSample],
    resolutions: &[usize],
) -> Result<BTreeMap<usize, MetricReport>> {
    for &n in resolutions {
        if let Some(s) = samples.first() {
            let n_in = s.partial.len() + model.pmnet.coarse_n;
            model
                .renet
                .ratio_for(n_in, n)
                .context(|| format!("resolution {n} is unsupported by this checkpoint"))?;
        }
    }
    evaluate_with(samples, resolutions, |s, n| {
        Ok(complete(reg, model, &s.partial, n)?.fine)
    })
}
