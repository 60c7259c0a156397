//! Relational enhancement network: a hierarchical encoder-decoder of
//! residual selective kernels over the fused partial and coarse clouds,
//! ending in feature expansion, per-copy coordinate offsets and a farthest
//! point trim to the requested resolution.

use serde::{Deserialize, Serialize};
use vrckit_tensor::{ParamRegistry, Tape, Var};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, Point};
use crate::kernels::{
    canonical_seed, efe_expand, ep_pool, eu_unpool, init_efe, init_rpsk, rpsk_forward, EfeConfig,
    Neighborhoods, PskConfig,
};
use crate::nn::{init_linear, linear};
use crate::rng::Rng;

pub const PREFIX: &str = "renet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenetConfig {
    /// Feature width of each level; the number of entries is the level count.
    pub channels: Vec<usize>,
    /// Fraction of points kept by the pooling after each level.
    pub pool_ratios: Vec<f64>,
    /// Neighborhood size of each pooling step.
    pub pool_k: Vec<usize>,
    /// Neighborhood sizes of the two selective-kernel branches.
    pub branch_ks: [usize; 2],
    pub psa_mid: usize,
    pub psa_gamma_hidden: usize,
    pub code_dim: usize,
    pub efe_hidden: usize,
    pub efe_out: usize,
    /// Largest expansion ratio; emitted resolutions must not exceed
    /// `up_ratio` times the input count.
    pub up_ratio: usize,
    pub output_n: usize,
}

impl Default for RenetConfig {
    fn default() -> Self {
        RenetConfig {
            channels: vec![32, 64],
            pool_ratios: vec![0.25, 0.25],
            pool_k: vec![8, 8],
            branch_ks: [8, 16],
            psa_mid: 8,
            psa_gamma_hidden: 16,
            code_dim: 8,
            efe_hidden: 32,
            efe_out: 32,
            up_ratio: 6,
            output_n: 1024,
        }
    }
}

impl RenetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 || self.pool_ratios.len() != l || self.pool_k.len() != l {
            return Err(Error::InvalidArgument(format!(
                "RENet needs matching nonempty per-level channels, pool_ratios and pool_k: {self:?}"
            )));
        }
        if self.channels.contains(&0)
            || self.pool_k.contains(&0)
            || self.pool_ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0))
            || self.branch_ks.contains(&0)
            || self.branch_ks[0] == self.branch_ks[1]
            || [
                self.psa_mid,
                self.psa_gamma_hidden,
                self.code_dim,
                self.efe_hidden,
                self.efe_out,
                self.up_ratio,
                self.output_n,
            ]
            .contains(&0)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid RENet configuration: {self:?}"
            )));
        }
        Ok(())
    }

    fn psk(&self, c_in: usize, c_out: usize) -> PskConfig {
        PskConfig {
            branch_ks: self.branch_ks,
            c_in,
            c_out,
            c_mid: self.psa_mid,
            gamma_hidden: self.psa_gamma_hidden,
        }
    }

    fn efe(&self) -> EfeConfig {
        EfeConfig {
            c_in: self.channels[0],
            code_dim: self.code_dim,
            hidden: self.efe_hidden,
            c_out: self.efe_out,
            max_up_ratio: self.up_ratio,
        }
    }

    /// Down-path block `l` maps the previous width (the lift width for `l = 0`)
    /// to `channels[l]`.
    fn down(&self, l: usize) -> PskConfig {
        let c_in = if l == 0 {
            self.channels[0]
        } else {
            self.channels[l - 1]
        };
        self.psk(c_in, self.channels[l])
    }

    fn bottleneck(&self) -> PskConfig {
        let c = *self.channels.last().expect("validated");
        self.psk(c, c)
    }

    /// Up-path block `l` takes the interpolated coarser features concatenated
    /// with the level-`l` skip.
    fn up(&self, l: usize) -> PskConfig {
        let coarser = if l + 1 == self.levels() {
            self.channels[l]
        } else {
            self.channels[l + 1]
        };
        self.psk(coarser + self.channels[l], self.channels[l])
    }

    /// Expansion ratio for `n_in` input points.
    pub fn ratio_for(&self, n_in: usize, output_n: usize) -> Result<usize> {
        let r = output_n.div_ceil(n_in.max(1)).max(1);
        if r > self.up_ratio {
            return Err(Error::InvalidArgument(format!(
                "{output_n} output points exceed the {} expanded from {n_in} inputs",
                self.up_ratio * n_in
            )));
        }
        Ok(r)
    }

    /// Smallest input count every level can serve.
    pub fn min_points(&self) -> usize {
        let k = self.branch_ks[0].max(self.branch_ks[1]);
        let mut n = k;
        for l in (0..self.levels()).rev() {
            n = n.max(self.pool_k[l]);
            n = ((n as f64) / self.pool_ratios[l]).ceil() as usize;
            n = n.max(k);
        }
        n
    }
}

pub fn block_prefix(kind: &str, l: usize) -> String {
    format!("{PREFIX}.{kind}{l}")
}

pub fn init_renet(reg: &mut ParamRegistry, rng: &mut Rng, cfg: &RenetConfig) -> Result<()> {
    cfg.validate()?;
    init_linear(
        reg,
        rng,
        &format!("{PREFIX}.lift"),
        3,
        cfg.channels[0],
        true,
    )?;
    for l in 0..cfg.levels() {
        init_rpsk(reg, rng, &block_prefix("down", l), &cfg.down(l))?;
        init_rpsk(reg, rng, &block_prefix("up", l), &cfg.up(l))?;
    }
    init_rpsk(reg, rng, &format!("{PREFIX}.bottleneck"), &cfg.bottleneck())?;
    init_efe(reg, rng, &format!("{PREFIX}.efe"), &cfg.efe())?;
    Ok(())
}

pub struct RenetOutput {
    /// `[output_n, 3]`
    pub fine: Var,
    /// All `r · N` expanded points before the trim.
    pub expanded: Var,
    /// Indices of `fine` rows within `expanded`.
    pub kept: Vec<usize>,
}

/// Refines the fused input cloud `[N, 3]` (partial then coarse points) into
/// `output_n` points.
pub fn renet_forward(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &RenetConfig,
    input: Var,
    output_n: usize,
) -> Result<RenetOutput> {
    cfg.validate()?;
    let s = tape.shape(input);
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::InvalidArgument(format!(
            "RENet expects [N, 3] input, got {s:?}"
        )));
    }
    let n = s[0];
    if n < cfg.min_points() {
        return Err(Error::TooFewPoints {
            requested: cfg.min_points(),
            available: n,
        });
    }
    let r = cfg.ratio_for(n, output_n)?;
    let coords0: Vec<Point> = tape.value(input).to_points()?;

    let mut h = linear(tape, reg, &format!("{PREFIX}.lift"), input)?;
    h = tape.relu(h)?;
    let mut coords = coords0;
    let mut coords_var = input;
    let mut skips: Vec<(Var, Var, Neighborhoods)> = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        let psk = cfg.down(l);
        let nbhd = Neighborhoods::new(&coords, psk.max_k())?;
        h = rpsk_forward(tape, reg, &block_prefix("down", l), &psk, h, &nbhd)?;
        let pooled = ep_pool(tape, h, coords_var, cfg.pool_ratios[l], cfg.pool_k[l])?;
        skips.push((h, coords_var, nbhd));
        h = pooled.features;
        coords = pooled.points;
        coords_var = pooled.coords;
    }
    let psk = cfg.bottleneck();
    let nbhd = Neighborhoods::new(&coords, psk.max_k())?;
    h = rpsk_forward(tape, reg, &format!("{PREFIX}.bottleneck"), &psk, h, &nbhd)?;
    for l in (0..cfg.levels()).rev() {
        let (skip, fine_coords, nbhd) = skips.pop().expect("one skip per level");
        h = eu_unpool(tape, h, coords_var, fine_coords, skip)?;
        h = rpsk_forward(tape, reg, &block_prefix("up", l), &cfg.up(l), h, &nbhd)?;
        coords_var = fine_coords;
    }

    let expanded = efe_expand(tape, reg, &format!("{PREFIX}.efe"), &cfg.efe(), h, input, r)?.coords;
    let pts = tape.value(expanded).to_points()?;
    if let Some(i) = pts.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite(i));
    }
    let kept = farthest_point_sample(&pts, output_n, canonical_seed(&pts))?;
    let fine = tape.gather(expanded, kept.clone())?;
    Ok(RenetOutput {
        fine,
        expanded,
        kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_param;
    use crate::rng;
    use vrckit_tensor::Tensor;

    fn toy() -> RenetConfig {
        RenetConfig {
            channels: vec![6, 8],
            pool_ratios: vec![0.5, 0.5],
            pool_k: vec![3, 3],
            branch_ks: [2, 4],
            psa_mid: 3,
            psa_gamma_hidden: 4,
            code_dim: 3,
            efe_hidden: 6,
            efe_out: 5,
            up_ratio: 3,
            output_n: 48,
        }
    }

    fn cloud(n: usize, seed: u64) -> Vec<Point> {
        let v = rng::normals(&mut rng::stream(seed, "test.re"), 3 * n);
        v.chunks_exact(3)
            .map(|c| [c[0] * 0.4, c[1] * 0.4, c[2] * 0.4])
            .collect()
    }

    fn init(cfg: &RenetConfig, seed: u64) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        init_renet(&mut reg, &mut rng::stream(seed, "init"), cfg).unwrap();
        reg
    }

    #[test]
    fn output_count_and_finiteness() {
        let cfg = toy();
        for seed in 0..10 {
            let reg = init(&cfg, seed);
            let mut t = Tape::new();
            let x = t.constant(Tensor::from_points(&cloud(32, seed)));
            for n_out in [10, 32, 48, 96] {
                let out = renet_forward(&mut t, &reg, &cfg, x, n_out).unwrap();
                assert_eq!(t.shape(out.fine), &[n_out, 3]);
                assert!(t.value(out.fine).is_finite());
            }
            assert!(renet_forward(&mut t, &reg, &cfg, x, 97).is_err());
        }
    }

    #[test]
    fn zero_offsets_select_input_points() {
        let cfg = toy();
        let mut reg = init(&cfg, 1);
        zero_param(&mut reg, "renet.efe.offset.weight").unwrap();
        let pts = cloud(32, 1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_points(&pts));
        let out = renet_forward(&mut t, &reg, &cfg, x, 40).unwrap();
        let tiled: Vec<Point> = (0..2).flat_map(|_| pts.iter().copied()).collect();
        let want = farthest_point_sample(&tiled, 40, canonical_seed(&tiled)).unwrap();
        let got = t.value(out.fine).to_points().unwrap();
        assert_eq!(got, want.iter().map(|&i| tiled[i]).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_points_rejected() {
        let cfg = toy();
        let reg = init(&cfg, 2);
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_points(&cloud(cfg.min_points() - 1, 2)));
        assert!(matches!(
            renet_forward(&mut t, &reg, &cfg, x, 8),
            Err(Error::TooFewPoints { .. })
        ));
        let x = t.constant(Tensor::from_points(&cloud(cfg.min_points(), 2)));
        assert!(renet_forward(&mut t, &reg, &cfg, x, 8).is_ok());
    }

    #[test]
    fn default_config_ratios() {
        let cfg = RenetConfig::default();
        assert_eq!(cfg.ratio_for(768, 512).unwrap(), 1);
        assert_eq!(cfg.ratio_for(768, 1024).unwrap(), 2);
        assert_eq!(cfg.ratio_for(768, 4096).unwrap(), 6);
        assert!(cfg.ratio_for(768, 4609).is_err());
        assert!(cfg.min_points() <= 768);
    }
}
