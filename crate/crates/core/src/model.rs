//! The full completion network: PMNet followed by RENet, with parameter
//! initialization, the training-mode forward pass, deterministic inference
//! and checkpoint files that carry their configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vrckit_tensor::{checkpoint_paths, ParamRegistry, Tape, Var};

use crate::error::{Error, Result, ResultExt};
use crate::geometry::PointCloud;
use crate::metrics::chamfer_tape;
use crate::pmnet::{init_pmnet, pmnet_infer, pmnet_losses, PmnetConfig, StepNoise};
use crate::renet::{init_renet, renet_forward, RenetConfig};
use crate::rng;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VrcnetConfig {
    #[serde(default)]
    pub pmnet: PmnetConfig,
    #[serde(default)]
    pub renet: RenetConfig,
}

impl VrcnetConfig {
    pub fn validate(&self) -> Result<()> {
        self.pmnet.validate()?;
        self.renet.validate()
    }
}

/// Fresh parameters drawn from the `init` sub-stream of `seed`.
pub fn init_vrcnet(cfg: &VrcnetConfig, seed: u64) -> Result<ParamRegistry> {
    cfg.validate()?;
    let mut reg = ParamRegistry::new();
    let mut r = rng::stream(seed, "init");
    init_pmnet(&mut reg, &mut r, &cfg.pmnet)?;
    init_renet(&mut reg, &mut r, &cfg.renet)?;
    Ok(reg)
}

/// Scalar loss terms of one training sample.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub kl_rec: Var,
    pub cd_rec: Var,
    pub kl_com: Var,
    pub cd_com: Var,
    pub cd_fine: Var,
}

pub struct TrainForward {
    pub losses: LossVars,
    pub coarse: Var,
    pub fine: Var,
}

/// Both PMNet paths, then RENet on `concat(X, Yc)` at the target's resolution.
pub fn train_forward(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &VrcnetConfig,
    x: &PointCloud,
    y: &PointCloud,
    noise: &StepNoise,
) -> Result<TrainForward> {
    let pm = pmnet_losses(tape, reg, &cfg.pmnet, x, y, noise)?;
    let fused = tape.concat(&[pm.partial, pm.coarse], 0)?;
    let re = renet_forward(tape, reg, &cfg.renet, fused, y.len())?;
    let cd_fine = chamfer_tape(tape, re.fine, pm.target)?;
    Ok(TrainForward {
        losses: LossVars {
            kl_rec: pm.kl_rec,
            cd_rec: pm.cd_rec,
            kl_com: pm.kl_com,
            cd_com: pm.cd_com,
            cd_fine,
        },
        coarse: pm.coarse,
        fine: re.fine,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub coarse: PointCloud,
    pub fine: PointCloud,
}

/// Completion path at the latent mean, then RENet to `output_n` points.
pub fn complete(
    reg: &ParamRegistry,
    cfg: &VrcnetConfig,
    x: &PointCloud,
    output_n: usize,
) -> Result<Completion> {
    let mut tape = Tape::new();
    let partial = tape.constant(x.to_tensor());
    let coarse = pmnet_infer(&mut tape, reg, &cfg.pmnet, partial)?;
    let fused = tape.concat(&[partial, coarse], 0)?;
    let re = renet_forward(&mut tape, reg, &cfg.renet, fused, output_n)?;
    Ok(Completion {
        coarse: PointCloud::from_tensor(tape.value(coarse))?,
        fine: PointCloud::from_tensor(tape.value(re.fine))?,
    })
}

/// `<prefix>.config.json`
pub fn config_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".config.json");
    PathBuf::from(p)
}

/// Writes parameters and the network configuration under `prefix`.
pub fn save_model(prefix: &Path, reg: &ParamRegistry, cfg: &VrcnetConfig) -> Result<()> {
    reg.save(prefix)
        .context(|| format!("saving checkpoint {}", prefix.display()))?;
    let path = config_path(prefix);
    fs::write(&path, serde_json::to_string_pretty(cfg)?)
        .context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Accepts either the checkpoint prefix or its `.idx.json` / `.bin` file.
pub fn checkpoint_prefix(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for suffix in [".idx.json", ".bin", ".config.json"] {
        if let Some(stem) = s.strip_suffix(suffix) {
            return PathBuf::from(stem);
        }
    }
    path.to_path_buf()
}

pub fn load_model(path: &Path) -> Result<(ParamRegistry, VrcnetConfig)> {
    let prefix = checkpoint_prefix(path);
    let (idx, _) = checkpoint_paths(&prefix);
    if !idx.exists() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {} not found",
            idx.display()
        )));
    }
    let cfg_path = config_path(&prefix);
    let text =
        fs::read_to_string(&cfg_path).context(|| format!("reading {}", cfg_path.display()))?;
    let cfg: VrcnetConfig =
        serde_json::from_str(&text).context(|| format!("parsing {}", cfg_path.display()))?;
    let reg = ParamRegistry::load(&prefix)
        .context(|| format!("loading checkpoint {}", prefix.display()))?;
    let fresh = init_vrcnet(&cfg, 0)?;
    for (path, t) in fresh.iter() {
        match reg.get(path) {
            Some(v) if v.shape() == t.shape() => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint {} does not match its configuration at `{path}`",
                    prefix.display()
                )))
            }
        }
    }
    Ok((reg, cfg))
}
