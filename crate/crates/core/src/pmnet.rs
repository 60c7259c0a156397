//! Probabilistic modeling network: a shared max-pool encoder trunk, one
//! latent head per path (reconstruction over the complete cloud, completion
//! over the partial cloud) and a shared coarse decoder.

use serde::{Deserialize, Serialize};
use vrckit_tensor::{ParamRegistry, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::{chamfer_tape, gaussian_kl_tape, LatentDistribution, LatentVars};
use crate::nn::{init_mlp, mlp};
use crate::rng::{self, Rng};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmnetConfig {
    pub latent_dim: usize,
    /// Shared per-point widths before the first max pool, starting after `3`.
    pub stage1: Vec<usize>,
    /// Widths after concatenating the pooled stage-1 feature; the last is
    /// the global feature width.
    pub stage2: Vec<usize>,
    pub head_hidden: usize,
    pub decoder_hidden: Vec<usize>,
    pub coarse_n: usize,
}

impl Default for PmnetConfig {
    fn default() -> Self {
        PmnetConfig {
            latent_dim: 32,
            stage1: vec![32, 64],
            stage2: vec![128, 256],
            head_hidden: 128,
            decoder_hidden: vec![256, 256],
            coarse_n: 256,
        }
    }
}

impl PmnetConfig {
    pub fn feature_dim(&self) -> usize {
        *self.stage2.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self
            .stage1
            .iter()
            .chain(&self.stage2)
            .chain(&self.decoder_hidden);
        if self.stage1.is_empty()
            || self.stage2.is_empty()
            || self.latent_dim == 0
            || self.head_hidden == 0
            || self.coarse_n == 0
            || widths.clone().any(|&w| w == 0)
        {
            return Err(Error::InvalidArgument(format!(
                "PMNet widths must be nonempty and positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn stage1_dims(&self) -> Vec<usize> {
        std::iter::once(3)
            .chain(self.stage1.iter().copied())
            .collect()
    }

    fn stage2_dims(&self) -> Vec<usize> {
        let pooled = *self.stage1.last().expect("validated");
        std::iter::once(2 * pooled)
            .chain(self.stage2.iter().copied())
            .collect()
    }

    fn decoder_dims(&self) -> Vec<usize> {
        std::iter::once(self.latent_dim + self.feature_dim())
            .chain(self.decoder_hidden.iter().copied())
            .chain(std::iter::once(3 * self.coarse_n))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentPath {
    Reconstruction,
    Completion,
}

impl LatentPath {
    fn head(self) -> &'static str {
        match self {
            LatentPath::Reconstruction => "pmnet.head_rec",
            LatentPath::Completion => "pmnet.head_com",
        }
    }
}

pub const TRUNK_PREFIX: &str = "pmnet.trunk";
pub const DECODER_PREFIX: &str = "pmnet.decoder";

pub fn init_pmnet(reg: &mut ParamRegistry, rng: &mut Rng, cfg: &PmnetConfig) -> Result<()> {
    cfg.validate()?;
    init_mlp(
        reg,
        rng,
        &format!("{TRUNK_PREFIX}.stage1"),
        &cfg.stage1_dims(),
    )?;
    init_mlp(
        reg,
        rng,
        &format!("{TRUNK_PREFIX}.stage2"),
        &cfg.stage2_dims(),
    )?;
    for path in [LatentPath::Reconstruction, LatentPath::Completion] {
        init_mlp(
            reg,
            rng,
            path.head(),
            &[cfg.feature_dim(), cfg.head_hidden, 2 * cfg.latent_dim],
        )?;
    }
    init_mlp(reg, rng, DECODER_PREFIX, &cfg.decoder_dims())?;
    Ok(())
}

pub struct Encoded {
    /// `[1, feature_dim]`
    pub global: Var,
    pub dist: LatentVars,
}

/// Shared trunk: per-point MLP, max pool, concatenation of the pooled
/// feature onto every point, second MLP, max pool.
pub fn encode_global(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &PmnetConfig,
    points: Var,
) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(points);
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::InvalidArgument(format!(
            "encoder expects [N, 3] points, got {s:?}"
        )));
    }
    let n = s[0];
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let h = mlp(
        tape,
        reg,
        &format!("{TRUNK_PREFIX}.stage1"),
        points,
        cfg.stage1.len(),
        true,
    )?;
    let g = tape.max(h, 0)?;
    let g = tape.reshape(g, vec![1, *cfg.stage1.last().expect("validated")])?;
    let g = tape.tile(g, n)?;
    let h = tape.concat(&[h, g], 1)?;
    let h = mlp(
        tape,
        reg,
        &format!("{TRUNK_PREFIX}.stage2"),
        h,
        cfg.stage2.len(),
        true,
    )?;
    let g = tape.max(h, 0)?;
    Ok(tape.reshape(g, vec![1, cfg.feature_dim()])?)
}

/// Maps a global feature to `(mu, logvar)` with the head of `path`;
/// `logvar` is clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
pub fn latent_head(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &PmnetConfig,
    global: Var,
    path: LatentPath,
) -> Result<LatentVars> {
    let out = mlp(tape, reg, path.head(), global, 2, false)?;
    let d = cfg.latent_dim;
    let mu = tape.slice(out, 1, 0, d)?;
    let logvar = tape.slice(out, 1, d, 2 * d)?;
    let logvar = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)?;
    Ok(LatentVars { mu, logvar })
}

pub fn encode(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &PmnetConfig,
    points: Var,
    path: LatentPath,
) -> Result<Encoded> {
    let global = encode_global(tape, reg, cfg, points)?;
    let dist = latent_head(tape, reg, cfg, global, path)?;
    Ok(Encoded { global, dist })
}

/// Plain-value encoding of a cloud.
pub fn encode_cloud(
    reg: &ParamRegistry,
    cfg: &PmnetConfig,
    cloud: &PointCloud,
    path: LatentPath,
) -> Result<(Vec<f64>, LatentDistribution)> {
    let mut tape = Tape::new();
    let x = tape.constant(cloud.to_tensor());
    let e = encode(&mut tape, reg, cfg, x, path)?;
    Ok((tape.value(e.global).data().to_vec(), e.dist.value(&tape)))
}

/// Standard normal noise of width `dim` from `seed`.
pub fn sample_eps(seed: u64, dim: usize) -> Vec<f64> {
    rng::normals(&mut rng::stream(seed, "pmnet.eps"), dim)
}

/// `z = mu + exp(logvar / 2) ⊙ ε`; `ε = None` means `ε = 0` and returns the mean.
pub fn reparameterize_tape(tape: &mut Tape, dist: LatentVars, eps: Option<&[f64]>) -> Result<Var> {
    let Some(eps) = eps else { return Ok(dist.mu) };
    let shape = tape.shape(dist.mu).to_vec();
    let e = tape.constant(Tensor::new(shape, eps.to_vec())?);
    let half = tape.scale(dist.logvar, 0.5)?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, e)?;
    Ok(tape.add(dist.mu, noise)?)
}

pub fn reparameterize(dist: &LatentDistribution, seed: u64) -> Vec<f64> {
    let eps = sample_eps(seed, dist.dim());
    dist.mu
        .iter()
        .zip(&dist.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect()
}

/// `[coarse_n, 3]` coordinates from `concat(z, global)`.
pub fn decode_coarse(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &PmnetConfig,
    z: Var,
    global: Var,
) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    let gs = tape.shape(global).to_vec();
    if zs != [1, cfg.latent_dim] || gs != [1, cfg.feature_dim()] {
        return Err(Error::InvalidArgument(format!(
            "decoder expects z [1, {}] and feature [1, {}], got {zs:?} and {gs:?}",
            cfg.latent_dim,
            cfg.feature_dim()
        )));
    }
    let h = tape.concat(&[z, global], 1)?;
    let out = mlp(
        tape,
        reg,
        DECODER_PREFIX,
        h,
        cfg.decoder_hidden.len() + 1,
        false,
    )?;
    Ok(tape.reshape(out, vec![cfg.coarse_n, 3])?)
}

/// Both paths of a training step.
pub struct PmnetTrainOutput {
    pub kl_rec: Var,
    pub cd_rec: Var,
    pub kl_com: Var,
    pub cd_com: Var,
    pub coarse: Var,
    pub reconstruction: Var,
    pub partial: Var,
    pub target: Var,
}

/// Noise for the two paths of one training step.
pub struct StepNoise {
    pub reconstruction: Vec<f64>,
    pub completion: Vec<f64>,
}

impl StepNoise {
    pub fn sample(seed: u64, dim: usize) -> Self {
        StepNoise {
            reconstruction: sample_eps(rng::derive(seed, "reconstruction"), dim),
            completion: sample_eps(rng::derive(seed, "completion"), dim),
        }
    }
}

/// Reconstruction path: `q = encode(Y)`, `kl_rec = KL[q ‖ N(0, I)]`,
/// `cd_rec = CD(decode(z_q), Y)`. Completion path: `p = encode(X)`,
/// `kl_com = KL[q ‖ p]` with `q` detached, `cd_com = CD(decode(z_p), Y)`.
pub fn pmnet_losses(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &PmnetConfig,
    x: &PointCloud,
    y: &PointCloud,
    noise: &StepNoise,
) -> Result<PmnetTrainOutput> {
    let partial = tape.constant(x.to_tensor());
    let target = tape.constant(y.to_tensor());
    let rec = encode(tape, reg, cfg, target, LatentPath::Reconstruction)?;
    let std = LatentVars::standard(tape, cfg.latent_dim);
    let kl_rec = gaussian_kl_tape(tape, rec.dist, std)?;
    let zq = reparameterize_tape(tape, rec.dist, Some(&noise.reconstruction))?;
    let reconstruction = decode_coarse(tape, reg, cfg, zq, rec.global)?;
    let cd_rec = chamfer_tape(tape, reconstruction, target)?;

    let com = encode(tape, reg, cfg, partial, LatentPath::Completion)?;
    let q_fixed = LatentVars {
        mu: tape.detach(rec.dist.mu),
        logvar: tape.detach(rec.dist.logvar),
    };
    let kl_com = gaussian_kl_tape(tape, q_fixed, com.dist)?;
    let zp = reparameterize_tape(tape, com.dist, Some(&noise.completion))?;
    let coarse = decode_coarse(tape, reg, cfg, zp, com.global)?;
    let cd_com = chamfer_tape(tape, coarse, target)?;
    Ok(PmnetTrainOutput {
        kl_rec,
        cd_rec,
        kl_com,
        cd_com,
        coarse,
        reconstruction,
        partial,
        target,
    })
}

/// Completion path only, at the distribution mean.
pub fn pmnet_infer(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &PmnetConfig,
    partial: Var,
) -> Result<Var> {
    let com = encode(tape, reg, cfg, partial, LatentPath::Completion)?;
    let z = reparameterize_tape(tape, com.dist, None)?;
    decode_coarse(tape, reg, cfg, z, com.global)
}
