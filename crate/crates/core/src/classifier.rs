//! Shared-MLP, max-pool point classifier and the partial / completed /
//! complete accuracy benchmark.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vrckit_tensor::{checkpoint_paths, AdamConfig, ParamRegistry, Tape, Tensor, Var};

use crate::error::{Error, Result, ResultExt};
use crate::geometry::PointCloud;
use crate::metrics::classification_metrics;
use crate::model::{checkpoint_prefix, config_path};
use crate::nn::{init_mlp, mlp};
use crate::rng;

type Grads = Vec<(String, Tensor)>;

const TRUNK: &str = "cls.trunk";
const HEAD: &str = "cls.head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub trunk: Vec<usize>,
    pub head_hidden: usize,
    pub categories: Vec<String>,
}

impl ClassifierConfig {
    pub fn new(categories: Vec<String>) -> Self {
        ClassifierConfig {
            trunk: vec![64, 128, 256],
            head_hidden: 128,
            categories,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() || self.trunk.contains(&0) || self.head_hidden == 0 {
            return Err(Error::InvalidArgument(format!(
                "classifier widths must be nonempty and positive: {self:?}"
            )));
        }
        if self.categories.len() < 2 {
            return Err(Error::InvalidArgument(
                "a classifier needs at least two categories".into(),
            ));
        }
        let mut c = self.categories.clone();
        c.sort();
        c.dedup();
        if c.len() != self.categories.len() {
            return Err(Error::InvalidArgument(format!(
                "duplicate categories in {:?}",
                self.categories
            )));
        }
        Ok(())
    }

    pub fn label(&self, category: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category `{category}`")))
    }
}

pub fn init_classifier(cfg: &ClassifierConfig, seed: u64) -> Result<ParamRegistry> {
    cfg.validate()?;
    let mut reg = ParamRegistry::new();
    let mut r = rng::stream(seed, "classifier.init");
    let trunk: Vec<usize> = std::iter::once(3)
        .chain(cfg.trunk.iter().copied())
        .collect();
    init_mlp(&mut reg, &mut r, TRUNK, &trunk)?;
    init_mlp(
        &mut reg,
        &mut r,
        HEAD,
        &[
            *cfg.trunk.last().expect("validated"),
            cfg.head_hidden,
            cfg.categories.len(),
        ],
    )?;
    Ok(reg)
}

/// Logits `[1, #categories]`.
pub fn classify_tape(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &ClassifierConfig,
    points: Var,
) -> Result<Var> {
    let s = tape.shape(points);
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::InvalidArgument(format!(
            "classifier expects [N, 3] points, got {s:?}"
        )));
    }
    if s[0] == 0 {
        return Err(Error::EmptyCloud);
    }
    let h = mlp(tape, reg, TRUNK, points, cfg.trunk.len(), true)?;
    let g = tape.max(h, 0)?;
    let g = tape.reshape(g, vec![1, *cfg.trunk.last().expect("validated")])?;
    mlp(tape, reg, HEAD, g, 2, false)
}

pub fn classify(
    reg: &ParamRegistry,
    cfg: &ClassifierConfig,
    cloud: &PointCloud,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(cloud.to_tensor());
    let l = classify_tape(&mut tape, reg, cfg, x)?;
    Ok(tape.value(l).data().to_vec())
}

/// Highest-logit category (ties to the earlier category).
pub fn predict(reg: &ParamRegistry, cfg: &ClassifierConfig, cloud: &PointCloud) -> Result<String> {
    let logits = classify(reg, cfg, cloud)?;
    let best = logits
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > logits[b] { i } else { b });
    Ok(cfg.categories[best].clone())
}

/// `−log softmax(logits)[label]`
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let c = tape.shape(logits)[1];
    if label >= c {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    let lp = tape.log_softmax(logits, 1)?;
    let pick = tape.slice(lp, 1, label, label + 1)?;
    let s = tape.sum_all(pick)?;
    Ok(tape.scale(s, -1.0)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Adam on mean cross-entropy over seeded mini-batches; returns the
/// per-step mean loss.
pub fn train_classifier(
    reg: &mut ParamRegistry,
    cfg: &ClassifierConfig,
    data: &[(PointCloud, usize)],
    tc: &ClassifierTrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "classifier training set is empty".into(),
        ));
    }
    if tc.batch_size == 0 || !(tc.lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid classifier training settings {tc:?}"
        )));
    }
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0;
    let mut losses = Vec::with_capacity(tc.steps);
    for _ in 0..tc.steps {
        if order.len() < tc.batch_size.min(data.len()) {
            let mut fresh: Vec<usize> = (0..data.len()).collect();
            fresh.shuffle(&mut rng::stream(
                tc.seed,
                &format!("classifier.shuffle.{epoch}"),
            ));
            epoch += 1;
            order.extend(fresh);
        }
        let batch: Vec<usize> = order.drain(..tc.batch_size.min(data.len())).collect();
        let inv = 1.0 / batch.len() as f64;
        let results: Vec<Result<(f64, Grads)>> = batch
            .iter()
            .map(|&i| {
                let (cloud, label) = &data[i];
                let mut tape = Tape::new();
                let x = tape.constant(cloud.to_tensor());
                let logits = classify_tape(&mut tape, reg, cfg, x)?;
                let l = cross_entropy(&mut tape, logits, *label)?;
                let v = tape.value(l).item();
                Ok((v, tape.backward(l)?.into_params().into_iter().collect()))
            })
            .collect();
        let mut grads = std::collections::BTreeMap::<String, Tensor>::new();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l * inv;
            for (p, t) in g {
                match grads.get_mut(&p) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b * inv),
                    None => {
                        let mut t = t;
                        t.data_mut().iter_mut().for_each(|v| *v *= inv);
                        grads.insert(p, t);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: losses.len() });
        }
        reg.adam_step(
            &grads,
            &AdamConfig {
                lr: tc.lr,
                ..AdamConfig::default()
            },
        )?;
        losses.push(loss);
    }
    Ok(losses)
}

pub fn save_classifier(prefix: &Path, reg: &ParamRegistry, cfg: &ClassifierConfig) -> Result<()> {
    reg.save(prefix)
        .context(|| format!("saving classifier {}", prefix.display()))?;
    let path = config_path(prefix);
    fs::write(&path, serde_json::to_string_pretty(cfg)?)
        .context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<(ParamRegistry, ClassifierConfig)> {
    let prefix = checkpoint_prefix(path);
    let (idx, _) = checkpoint_paths(&prefix);
    if !idx.exists() {
        return Err(Error::InvalidArgument(format!(
            "classifier checkpoint {} not found",
            idx.display()
        )));
    }
    let cfg_path = config_path(&prefix);
    let text =
        fs::read_to_string(&cfg_path).context(|| format!("reading {}", cfg_path.display()))?;
    let cfg: ClassifierConfig =
        serde_json::from_str(&text).context(|| format!("parsing {}", cfg_path.display()))?;
    cfg.validate()?;
    let reg = ParamRegistry::load(&prefix)
        .context(|| format!("loading classifier {}", prefix.display()))?;
    Ok((reg, cfg))
}

/// A held-out pair for the benchmark.
#[derive(Clone, Debug)]
pub struct BenchSample {
    pub category: String,
    pub partial: PointCloud,
    pub complete: PointCloud,
}

/// Overall and per-category-mean accuracy on partial, completed and
/// complete inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub acc_partial: f64,
    pub avg_partial: f64,
    pub acc_completed: f64,
    pub avg_completed: f64,
    pub acc_complete: f64,
    pub avg_complete: f64,
}

/// Classifies each sample's partial input, its completion by `completer`
/// and its complete cloud.
pub fn classification_bench<F>(
    reg: &ParamRegistry,
    cfg: &ClassifierConfig,
    samples: &[BenchSample],
    completer: F,
) -> Result<BenchReport>
where
    F: Fn(&BenchSample) -> Result<PointCloud> + Sync,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("benchmark set is empty".into()));
    }
    let preds: Vec<[String; 3]> = samples
        .par_iter()
        .map(|s| {
            let completed = completer(s)?;
            Ok([
                predict(reg, cfg, &s.partial)?,
                predict(reg, cfg, &completed)?,
                predict(reg, cfg, &s.complete)?,
            ])
        })
        .collect::<Result<_>>()?;
    let truth: Vec<&str> = samples.iter().map(|s| s.category.as_str()).collect();
    let cats: Vec<&str> = cfg.categories.iter().map(String::as_str).collect();
    let score = |k: usize| {
        let p: Vec<&str> = preds.iter().map(|p| p[k].as_str()).collect();
        classification_metrics(&p, &truth, &cats)
    };
    let (acc_partial, avg_partial) = score(0)?;
    let (acc_completed, avg_completed) = score(1)?;
    let (acc_complete, avg_complete) = score(2)?;
    Ok(BenchReport {
        acc_partial,
        avg_partial,
        acc_completed,
        avg_completed,
        acc_complete,
        avg_complete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use vrckit_tensor::{grad_check_registry, GradCheckOptions};

    fn cfg() -> ClassifierConfig {
        ClassifierConfig {
            trunk: vec![6, 8],
            head_hidden: 5,
            categories: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    fn cloud(n: usize, seed: u64, shift: f64) -> PointCloud {
        let v = rng::normals(&mut rng::stream(seed, "test.cls"), 3 * n);
        PointCloud::new(
            v.chunks_exact(3)
                .map(|c| [c[0] * 0.2 + shift, c[1] * 0.2, c[2] * 0.2])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn logits_width_and_permutation_invariance() {
        let c = cfg();
        let reg = init_classifier(&c, 1).unwrap();
        let x = cloud(30, 1, 0.0);
        let l = classify(&reg, &c, &x).unwrap();
        assert_eq!(l.len(), 3);
        let mut pts = x.points().to_vec();
        pts.reverse();
        pts.swap(3, 17);
        assert_eq!(
            classify(&reg, &c, &PointCloud::new(pts).unwrap()).unwrap(),
            l
        );
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let c = cfg();
        let reg = init_classifier(&c, 2).unwrap();
        let x = cloud(10, 2, 0.1);
        let r = grad_check_registry(&reg, GradCheckOptions::default(), |t, reg| {
            let p = t.constant(x.to_tensor());
            let l = classify_tape(t, reg, &c, p)
                .map_err(|e| vrckit_tensor::TensorError::InvalidArgument(e.to_string()))?;
            cross_entropy(t, l, 1)
                .map_err(|e| vrckit_tensor::TensorError::InvalidArgument(e.to_string()))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn learns_separable_toy_classes() {
        let c = cfg();
        let mut reg = init_classifier(&c, 3).unwrap();
        let data: Vec<(PointCloud, usize)> = (0..12)
            .map(|i| (cloud(20, i as u64, (i % 3) as f64 - 1.0), i % 3))
            .collect();
        let losses = train_classifier(
            &mut reg,
            &c,
            &data,
            &ClassifierTrainConfig {
                steps: 60,
                batch_size: 12,
                lr: 1e-2,
                seed: 0,
            },
        )
        .unwrap();
        assert!(
            losses[59] < 0.5 * losses[0],
            "{} → {}",
            losses[0],
            losses[59]
        );
        let samples: Vec<BenchSample> = (0..6)
            .map(|i| BenchSample {
                category: c.categories[i % 3].clone(),
                partial: cloud(20, 100 + i as u64, (i % 3) as f64 - 1.0),
                complete: cloud(20, 200 + i as u64, (i % 3) as f64 - 1.0),
            })
            .collect();
        let rep = classification_bench(&reg, &c, &samples, |s| Ok(s.complete.clone())).unwrap();
        assert_eq!(rep.acc_completed, rep.acc_complete);
        assert_eq!(rep.avg_completed, rep.avg_complete);
        let json = serde_json::to_value(rep).unwrap();
        for k in [
            "acc_partial",
            "avg_partial",
            "acc_completed",
            "avg_completed",
            "acc_complete",
            "avg_complete",
        ] {
            assert!(json.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg();
        let reg = init_classifier(&c, 4).unwrap();
        save_classifier(&dir.path().join("cls"), &reg, &c).unwrap();
        let (back, bc) = load_classifier(&dir.path().join("cls.bin")).unwrap();
        let x = cloud(9, 4, 0.0);
        assert_eq!(
            classify(&back, &bc, &x).unwrap(),
            classify(&reg, &c, &x).unwrap()
        );
    }
}
