//! Relational point kernels: point self-attention (PSA), the two-branch
//! point selective kernel (PSK) and its residual form (R-PSK), plus
//! edge-preserved pooling/unpooling and edge-aware feature expansion.
//!
//! Neighborhoods are computed from coordinate values and enter the graph
//! as fixed indices; gradients flow through features only.

use serde::{Deserialize, Serialize};
use vrckit_tensor::{ParamRegistry, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn, NeighborTable, Point};
use crate::nn::{init_linear, linear, mlp};
use crate::rng::Rng;

/// Index of the lexicographically smallest point, a start for farthest
/// point sampling that does not depend on point order.
pub fn canonical_seed(points: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = &points[best];
        let less = p[0]
            .total_cmp(&b[0])
            .then(p[1].total_cmp(&b[1]))
            .then(p[2].total_cmp(&b[2]));
        if less.is_lt() {
            best = i;
        }
    }
    best
}

/// Neighbor tables of one coordinate set, computed once at the largest `k`
/// needed and truncated per query.
pub struct Neighborhoods {
    table: NeighborTable,
}

impl Neighborhoods {
    pub fn new(coords: &[Point], max_k: usize) -> Result<Self> {
        Ok(Neighborhoods {
            table: knn(coords, coords, max_k)?,
        })
    }

    pub fn get(&self, k: usize) -> Result<NeighborTable> {
        self.table.truncated(k)
    }

    pub fn max_k(&self) -> usize {
        self.table.k()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsaConfig {
    pub k: usize,
    pub c_in: usize,
    /// Width of the σ and ξ transforms.
    pub c_mid: usize,
    pub c_out: usize,
    /// Hidden width of the weight head γ.
    pub gamma_hidden: usize,
}

impl PsaConfig {
    fn validate(&self) -> Result<()> {
        if [self.k, self.c_in, self.c_mid, self.c_out, self.gamma_hidden].contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "PSA sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Registers σ, ξ, β (one affine+ReLU layer each) and the two-layer γ head
/// emitting `k · c_out` weights per point.
pub fn init_psa(
    reg: &mut ParamRegistry,
    rng: &mut Rng,
    prefix: &str,
    cfg: &PsaConfig,
) -> Result<()> {
    cfg.validate()?;
    init_linear(
        reg,
        rng,
        &format!("{prefix}.sigma"),
        cfg.c_in,
        cfg.c_mid,
        true,
    )?;
    init_linear(reg, rng, &format!("{prefix}.xi"), cfg.c_in, cfg.c_mid, true)?;
    init_linear(
        reg,
        rng,
        &format!("{prefix}.beta"),
        cfg.c_in,
        cfg.c_out,
        true,
    )?;
    init_linear(
        reg,
        rng,
        &format!("{prefix}.gamma.0"),
        (cfg.k + 1) * cfg.c_mid,
        cfg.gamma_hidden,
        true,
    )?;
    init_linear(
        reg,
        rng,
        &format!("{prefix}.gamma.1"),
        cfg.gamma_hidden,
        cfg.k * cfg.c_out,
        true,
    )?;
    Ok(())
}

fn check_features(tape: &Tape, x: Var, c: usize, what: &str) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != c {
        return Err(Error::InvalidArgument(format!(
            "{what} expects [N, {c}] features, got {s:?}"
        )));
    }
    if s[0] == 0 {
        return Err(Error::EmptyCloud);
    }
    Ok(s[0])
}

/// `y_i = Σ_j α(x_N(i))_j ⊙ β(x_j)` over the `k` neighbors of each point,
/// with `α = γ([σ(x_i), ξ(x_j1), …, ξ(x_jk)])` in neighbor-table order.
pub fn psa_forward(
    tape: &mut Tape,
    reg: &ParamRegistry,
    prefix: &str,
    cfg: &PsaConfig,
    x: Var,
    nbrs: &NeighborTable,
) -> Result<Var> {
    cfg.validate()?;
    let n = check_features(tape, x, cfg.c_in, "PSA")?;
    if nbrs.k() != cfg.k || nbrs.rows() != n {
        return Err(Error::InvalidArgument(format!(
            "PSA with k = {} over {n} points got a {}×{} neighbor table",
            cfg.k,
            nbrs.rows(),
            nbrs.k()
        )));
    }
    if let Some(&bad) = nbrs.flat().iter().find(|&&j| j >= n) {
        return Err(Error::InvalidArgument(format!(
            "neighbor index {bad} out of range for {n} points"
        )));
    }
    let s = linear(tape, reg, &format!("{prefix}.sigma"), x)?;
    let s = tape.relu(s)?;
    let xi = linear(tape, reg, &format!("{prefix}.xi"), x)?;
    let xi = tape.relu(xi)?;
    let b = linear(tape, reg, &format!("{prefix}.beta"), x)?;
    let b = tape.relu(b)?;

    let idx = nbrs.flat().to_vec();
    let xi_n = tape.gather(xi, idx.clone())?;
    let xi_n = tape.reshape(xi_n, vec![n, cfg.k * cfg.c_mid])?;
    let delta = tape.concat(&[s, xi_n], 1)?;
    let alpha = mlp(tape, reg, &format!("{prefix}.gamma"), delta, 2, false)?;
    let alpha = tape.reshape(alpha, vec![n * cfg.k, cfg.c_out])?;
    let b_n = tape.gather(b, idx)?;
    let prod = tape.mul(alpha, b_n)?;
    let prod = tape.reshape(prod, vec![n, cfg.k, cfg.c_out])?;
    Ok(tape.sum(prod, 1)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PskConfig {
    pub branch_ks: [usize; 2],
    pub c_in: usize,
    pub c_out: usize,
    pub c_mid: usize,
    pub gamma_hidden: usize,
}

impl PskConfig {
    pub fn new(branch_ks: [usize; 2], c_in: usize, c_out: usize) -> Self {
        PskConfig {
            branch_ks,
            c_in,
            c_out,
            c_mid: 8,
            gamma_hidden: 16,
        }
    }

    /// Reduced gate width `max(c_out / 4, 8)`.
    pub fn d(&self) -> usize {
        (self.c_out / 4).max(8)
    }

    pub fn branch(&self, i: usize) -> PsaConfig {
        PsaConfig {
            k: self.branch_ks[i],
            c_in: self.c_in,
            c_mid: self.c_mid,
            c_out: self.c_out,
            gamma_hidden: self.gamma_hidden,
        }
    }

    pub fn max_k(&self) -> usize {
        self.branch_ks[0].max(self.branch_ks[1])
    }

    fn validate(&self) -> Result<()> {
        if self.branch_ks[0] == self.branch_ks[1] {
            return Err(Error::InvalidArgument(format!(
                "PSK branch sizes must differ, got {:?}",
                self.branch_ks
            )));
        }
        Ok(())
    }
}

/// Registers both PSA branches and the gate weights `W [c_out, d]`,
/// `A, B [d, c_out]` (row-vector convention, no biases).
pub fn init_psk(
    reg: &mut ParamRegistry,
    rng: &mut Rng,
    prefix: &str,
    cfg: &PskConfig,
) -> Result<()> {
    cfg.validate()?;
    init_psa(reg, rng, &format!("{prefix}.branch0"), &cfg.branch(0))?;
    init_psa(reg, rng, &format!("{prefix}.branch1"), &cfg.branch(1))?;
    init_linear(
        reg,
        rng,
        &format!("{prefix}.gate_w"),
        cfg.c_out,
        cfg.d(),
        false,
    )?;
    init_linear(
        reg,
        rng,
        &format!("{prefix}.gate_a"),
        cfg.d(),
        cfg.c_out,
        false,
    )?;
    init_linear(
        reg,
        rng,
        &format!("{prefix}.gate_b"),
        cfg.d(),
        cfg.c_out,
        false,
    )?;
    Ok(())
}

/// PSK output with the two channel gates, each `[1, c_out]`.
pub struct PskOutput {
    pub v: Var,
    pub a: Var,
    pub b: Var,
}

/// Fuses the two branches: `U = Ũ + Û`, `s = mean_i U(i)`, `z = ReLU(W s)`,
/// `[a_c, b_c] = softmax(A_c z, B_c z)`, `V_c = Ũ_c a_c + Û_c b_c`.
pub fn psk_forward_gated(
    tape: &mut Tape,
    reg: &ParamRegistry,
    prefix: &str,
    cfg: &PskConfig,
    x: Var,
    nbhd: &Neighborhoods,
) -> Result<PskOutput> {
    cfg.validate()?;
    let n = check_features(tape, x, cfg.c_in, "PSK")?;
    let u0 = psa_forward(
        tape,
        reg,
        &format!("{prefix}.branch0"),
        &cfg.branch(0),
        x,
        &nbhd.get(cfg.branch_ks[0])?,
    )?;
    let u1 = psa_forward(
        tape,
        reg,
        &format!("{prefix}.branch1"),
        &cfg.branch(1),
        x,
        &nbhd.get(cfg.branch_ks[1])?,
    )?;
    let u = tape.add(u0, u1)?;
    let s = tape.order_free_mean(u, 0)?;
    let s = tape.reshape(s, vec![1, cfg.c_out])?;
    let z = linear(tape, reg, &format!("{prefix}.gate_w"), s)?;
    let z = tape.relu(z)?;
    let la = linear(tape, reg, &format!("{prefix}.gate_a"), z)?;
    let lb = linear(tape, reg, &format!("{prefix}.gate_b"), z)?;
    let logits = tape.concat(&[la, lb], 0)?;
    let gates = tape.softmax(logits, 0)?;
    let a = tape.slice(gates, 0, 0, 1)?;
    let b = tape.slice(gates, 0, 1, 2)?;
    let a_n = tape.tile(a, n)?;
    let b_n = tape.tile(b, n)?;
    let va = tape.mul(u0, a_n)?;
    let vb = tape.mul(u1, b_n)?;
    let v = tape.add(va, vb)?;
    Ok(PskOutput { v, a, b })
}

pub fn psk_forward(
    tape: &mut Tape,
    reg: &ParamRegistry,
    prefix: &str,
    cfg: &PskConfig,
    x: Var,
    nbhd: &Neighborhoods,
) -> Result<Var> {
    Ok(psk_forward_gated(tape, reg, prefix, cfg, x, nbhd)?.v)
}

/// Registers a PSK main path plus, when widths differ, an affine residual
/// projection `{prefix}.proj`.
pub fn init_rpsk(
    reg: &mut ParamRegistry,
    rng: &mut Rng,
    prefix: &str,
    cfg: &PskConfig,
) -> Result<()> {
    init_psk(reg, rng, &format!("{prefix}.main"), cfg)?;
    if cfg.c_in != cfg.c_out {
        init_linear(
            reg,
            rng,
            &format!("{prefix}.proj"),
            cfg.c_in,
            cfg.c_out,
            true,
        )?;
    }
    Ok(())
}

/// `PSK(x) + proj(x)`, where `proj` is the identity for equal widths.
pub fn rpsk_forward(
    tape: &mut Tape,
    reg: &ParamRegistry,
    prefix: &str,
    cfg: &PskConfig,
    x: Var,
    nbhd: &Neighborhoods,
) -> Result<Var> {
    let main = psk_forward(tape, reg, &format!("{prefix}.main"), cfg, x, nbhd)?;
    let res = if cfg.c_in == cfg.c_out {
        x
    } else {
        linear(tape, reg, &format!("{prefix}.proj"), x)?
    };
    Ok(tape.add(main, res)?)
}

/// Path of the main-path output transform whose zeroing silences an R-PSK
/// block (β of both branches).
pub fn rpsk_main_final_layers(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.main.branch0.beta.weight"),
        format!("{prefix}.main.branch0.beta.bias"),
        format!("{prefix}.main.branch1.beta.weight"),
        format!("{prefix}.main.branch1.beta.bias"),
    ]
}

pub struct Pooled {
    pub features: Var,
    /// Retained coordinates, gathered from the input coordinate variable.
    pub coords: Var,
    pub points: Vec<Point>,
    /// Ascending indices of the retained points in the input cloud.
    pub kept: Vec<usize>,
}

fn cloud_of(tape: &Tape, coords: Var) -> Result<Vec<Point>> {
    let s = tape.shape(coords);
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::InvalidArgument(format!(
            "coordinates must be [N, 3], got {s:?}"
        )));
    }
    Ok(tape.value(coords).to_points()?)
}

/// Edge-preserved pooling: `⌈ratio·N⌉` centers by farthest point sampling
/// (from the lexicographically smallest point), each taking the channelwise
/// max over its `k` nearest input points.
pub fn ep_pool(tape: &mut Tape, x: Var, coords: Var, ratio: f64, k: usize) -> Result<Pooled> {
    let pts = cloud_of(tape, coords)?;
    let n = pts.len();
    if tape.shape(x).len() != 2 || tape.shape(x)[0] != n {
        return Err(Error::InvalidArgument(format!(
            "pooling {n} coordinates with features {:?}",
            tape.shape(x)
        )));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pool ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let m = ((ratio * n as f64).ceil() as usize).max(1);
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let mut kept = farthest_point_sample(&pts, m, canonical_seed(&pts))?;
    kept.sort_unstable();
    let centers: Vec<Point> = kept.iter().map(|&i| pts[i]).collect();
    let table = knn(&pts, &centers, k)?;
    let c = tape.shape(x)[1];
    let g = tape.gather(x, table.flat().to_vec())?;
    let g = tape.reshape(g, vec![m, k, c])?;
    let features = tape.max(g, 1)?;
    let coords = tape.gather(coords, kept.clone())?;
    Ok(Pooled {
        features,
        coords,
        points: centers,
        kept,
    })
}

/// Edge-preserved unpooling: inverse-squared-distance interpolation from
/// the 3 nearest coarse points (fewer if the coarse cloud is smaller),
/// concatenated with `skip`. The weights are differentiable in both
/// coordinate sets; neighbor selection is not.
pub fn eu_unpool(
    tape: &mut Tape,
    coarse: Var,
    coarse_coords: Var,
    fine_coords: Var,
    skip: Var,
) -> Result<Var> {
    let coarse_pts = cloud_of(tape, coarse_coords)?;
    let fine_pts = cloud_of(tape, fine_coords)?;
    let m = coarse_pts.len();
    if m == 0 {
        return Err(Error::EmptyCloud);
    }
    let n = fine_pts.len();
    let cs = tape.shape(coarse).to_vec();
    if cs.len() != 2 || cs[0] != m {
        return Err(Error::InvalidArgument(format!(
            "{m} coarse coordinates with features {cs:?}"
        )));
    }
    let ss = tape.shape(skip).to_vec();
    if ss.len() != 2 || ss[0] != n {
        return Err(Error::InvalidArgument(format!(
            "{n} fine coordinates with skip features {ss:?}"
        )));
    }
    let k = m.min(3);
    let table = knn(&coarse_pts, &fine_pts, k)?;
    let c = cs[1];
    // softmax(-log(d² + ε)) over the k neighbors is the normalized 1/(d² + ε).
    let near = tape.gather(coarse_coords, table.flat().to_vec())?;
    let repeated = tape.gather(
        fine_coords,
        (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect(),
    )?;
    let diff = tape.sub(near, repeated)?;
    let sq = tape.square(diff)?;
    let d2 = tape.sum(sq, 1)?;
    let d2 = tape.add_scalar(d2, 1e-8)?;
    let logd = tape.log(d2)?;
    let logits = tape.scale(logd, -1.0)?;
    let logits = tape.reshape(logits, vec![n, k])?;
    let w = tape.softmax(logits, 1)?;
    let w = tape.reshape(w, vec![n * k, 1])?;
    let ones = tape.constant(Tensor::full(&[1, c], 1.0));
    let w = tape.linear(w, ones, None)?;
    let g = tape.gather(coarse, table.flat().to_vec())?;
    let g = tape.mul(g, w)?;
    let g = tape.reshape(g, vec![n, k, c])?;
    let interp = tape.sum(g, 1)?;
    Ok(tape.concat(&[interp, skip], 1)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfeConfig {
    pub c_in: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub c_out: usize,
    /// Number of learned per-copy codes; the largest usable ratio.
    pub max_up_ratio: usize,
}

/// Registers the per-copy codes, the shared feature stack and the offset head.
pub fn init_efe(
    reg: &mut ParamRegistry,
    rng: &mut Rng,
    prefix: &str,
    cfg: &EfeConfig,
) -> Result<()> {
    use rand::Rng as _;
    if cfg.max_up_ratio == 0 {
        return Err(Error::InvalidArgument(
            "expansion needs at least one code".into(),
        ));
    }
    let codes = (0..cfg.max_up_ratio * cfg.code_dim)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    reg.insert(
        format!("{prefix}.codes"),
        Tensor::new(vec![cfg.max_up_ratio, cfg.code_dim], codes)?,
    )?;
    init_linear(
        reg,
        rng,
        &format!("{prefix}.mlp.0"),
        cfg.c_in + cfg.code_dim,
        cfg.hidden,
        true,
    )?;
    init_linear(
        reg,
        rng,
        &format!("{prefix}.mlp.1"),
        cfg.hidden,
        cfg.c_out,
        true,
    )?;
    init_linear(reg, rng, &format!("{prefix}.offset"), cfg.c_out, 3, true)?;
    Ok(())
}

pub struct Expanded {
    /// `[r·N, c_out]`, copy-major: row `j·N + i` is copy `j` of point `i`.
    pub features: Var,
    pub offsets: Var,
    /// `tile(coords, r) + offsets`.
    pub coords: Var,
}

/// Edge-aware feature expansion to `r` copies per point.
pub fn efe_expand(
    tape: &mut Tape,
    reg: &ParamRegistry,
    prefix: &str,
    cfg: &EfeConfig,
    x: Var,
    coords: Var,
    r: usize,
) -> Result<Expanded> {
    if r < 1 || r > cfg.max_up_ratio {
        return Err(Error::InvalidArgument(format!(
            "expansion ratio {r} outside 1..={}",
            cfg.max_up_ratio
        )));
    }
    let n = check_features(tape, x, cfg.c_in, "EFE")?;
    if tape.shape(coords) != [n, 3] {
        return Err(Error::InvalidArgument(format!(
            "EFE coordinates {:?} for {n} points",
            tape.shape(coords)
        )));
    }
    let codes = tape.param(reg, &format!("{prefix}.codes"))?;
    let code_rows: Vec<usize> = (0..r).flat_map(|j| std::iter::repeat_n(j, n)).collect();
    let codes = tape.gather(codes, code_rows)?;
    let feats = tape.tile(x, r)?;
    let h = tape.concat(&[feats, codes], 1)?;
    let features = mlp(tape, reg, &format!("{prefix}.mlp"), h, 2, true)?;
    let offsets = linear(tape, reg, &format!("{prefix}.offset"), features)?;
    let anchors = tape.tile(coords, r)?;
    let coords = tape.add(anchors, offsets)?;
    Ok(Expanded {
        features,
        offsets,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_param;
    use crate::rng;
    use vrckit_tensor::{grad_check_registry, GradCheckOptions};

    fn cloud(n: usize, seed: u64) -> Vec<Point> {
        let mut r = rng::stream(seed, "test.cloud");
        rng::normals(&mut r, 3 * n)
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }

    fn feats(n: usize, c: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test.feats");
        Tensor::new(vec![n, c], rng::normals(&mut r, n * c)).unwrap()
    }

    fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> vrckit_tensor::Result<Var> {
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let mut r = rng::stream(seed, "test.weights");
        let w = tape.constant(Tensor::new(shape, rng::normals(&mut r, n)).unwrap());
        let p = tape.mul(y, w)?;
        tape.sum_all(p)
    }

    fn te(e: Error) -> vrckit_tensor::TensorError {
        vrckit_tensor::TensorError::InvalidArgument(e.to_string())
    }

    #[test]
    fn psa_single_neighbor_is_one_term() {
        let cfg = PsaConfig {
            k: 1,
            c_in: 4,
            c_mid: 3,
            c_out: 5,
            gamma_hidden: 6,
        };
        let mut reg = ParamRegistry::new();
        init_psa(&mut reg, &mut rng::stream(1, "init"), "psa", &cfg).unwrap();
        let pts = cloud(6, 1);
        let table = knn(&pts, &pts, 1).unwrap();
        assert_eq!(table.flat(), &[0, 1, 2, 3, 4, 5]);
        let mut t = Tape::new();
        let x = t.input(feats(6, 4, 1));
        let y = psa_forward(&mut t, &reg, "psa", &cfg, x, &table).unwrap();
        assert_eq!(t.shape(y), &[6, 5]);
        // Same graph assembled by hand.
        let s = linear(&mut t, &reg, "psa.sigma", x).unwrap();
        let s = t.relu(s).unwrap();
        let xi = linear(&mut t, &reg, "psa.xi", x).unwrap();
        let xi = t.relu(xi).unwrap();
        let d = t.concat(&[s, xi], 1).unwrap();
        let a = mlp(&mut t, &reg, "psa.gamma", d, 2, false).unwrap();
        let b = linear(&mut t, &reg, "psa.beta", x).unwrap();
        let b = t.relu(b).unwrap();
        let want = t.mul(a, b).unwrap();
        assert_eq!(t.value(y).data(), t.value(want).data());
    }

    #[test]
    fn psa_identical_points_give_identical_rows() {
        let cfg = PsaConfig {
            k: 3,
            c_in: 4,
            c_mid: 3,
            c_out: 5,
            gamma_hidden: 6,
        };
        let mut reg = ParamRegistry::new();
        init_psa(&mut reg, &mut rng::stream(2, "init"), "psa", &cfg).unwrap();
        let mut pts = cloud(8, 2);
        pts[5] = pts[2];
        let mut f = feats(8, 4, 2).into_data();
        let row2: Vec<f64> = f[8..12].to_vec();
        f[20..24].copy_from_slice(&row2);
        let table = knn(&pts, &pts, 3).unwrap();
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![8, 4], f).unwrap());
        let y = psa_forward(&mut t, &reg, "psa", &cfg, x, &table).unwrap();
        assert_eq!(t.value(y).row(2), t.value(y).row(5));
    }

    #[test]
    fn psa_rejects_bad_neighbors() {
        let cfg = PsaConfig {
            k: 2,
            c_in: 2,
            c_mid: 2,
            c_out: 2,
            gamma_hidden: 2,
        };
        let mut reg = ParamRegistry::new();
        init_psa(&mut reg, &mut rng::stream(3, "init"), "psa", &cfg).unwrap();
        let mut t = Tape::new();
        let x = t.input(feats(3, 2, 3));
        let bad = NeighborTable::from_flat(2, vec![0, 1, 1, 2, 2, 7]).unwrap();
        assert!(psa_forward(&mut t, &reg, "psa", &cfg, x, &bad).is_err());
        let x3 = t.input(feats(3, 3, 3));
        let ok = NeighborTable::from_flat(2, vec![0, 1, 1, 2, 2, 0]).unwrap();
        assert!(psa_forward(&mut t, &reg, "psa", &cfg, x3, &ok).is_err());
    }

    #[test]
    fn psk_equal_gate_weights_average_branches() {
        let cfg = PskConfig::new([2, 4], 4, 6);
        let mut reg = ParamRegistry::new();
        init_psk(&mut reg, &mut rng::stream(4, "init"), "psk", &cfg).unwrap();
        let a = reg.get("psk.gate_a.weight").unwrap().clone();
        reg.value_mut("psk.gate_b.weight")
            .unwrap()
            .copy_from_slice(a.data());
        let pts = cloud(10, 4);
        let nb = Neighborhoods::new(&pts, 4).unwrap();
        let mut t = Tape::new();
        let x = t.input(feats(10, 4, 4));
        let out = psk_forward_gated(&mut t, &reg, "psk", &cfg, x, &nb).unwrap();
        assert!(t.value(out.a).data().iter().all(|&v| v == 0.5));
        assert!(t.value(out.b).data().iter().all(|&v| v == 0.5));
        let u0 = psa_forward(
            &mut t,
            &reg,
            "psk.branch0",
            &cfg.branch(0),
            x,
            &nb.get(2).unwrap(),
        )
        .unwrap();
        let u1 = psa_forward(
            &mut t,
            &reg,
            "psk.branch1",
            &cfg.branch(1),
            x,
            &nb.get(4).unwrap(),
        )
        .unwrap();
        for ((v, a), b) in t
            .value(out.v)
            .data()
            .iter()
            .zip(t.value(u0).data())
            .zip(t.value(u1).data())
        {
            assert!((v - (a + b) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rpsk_zero_main_path_is_projection() {
        for (c_in, c_out) in [(4, 4), (4, 6)] {
            let cfg = PskConfig::new([2, 3], c_in, c_out);
            let mut reg = ParamRegistry::new();
            init_rpsk(&mut reg, &mut rng::stream(5, "init"), "r", &cfg).unwrap();
            for p in rpsk_main_final_layers("r") {
                zero_param(&mut reg, &p).unwrap();
            }
            let pts = cloud(7, 5);
            let nb = Neighborhoods::new(&pts, 3).unwrap();
            let mut t = Tape::new();
            let x = t.input(feats(7, c_in, 5));
            let y = rpsk_forward(&mut t, &reg, "r", &cfg, x, &nb).unwrap();
            if c_in == c_out {
                assert_eq!(t.value(y).data(), t.value(x).data());
            } else {
                let p = linear(&mut t, &reg, "r.proj", x).unwrap();
                assert_eq!(t.value(y).data(), t.value(p).data());
            }
        }
    }

    #[test]
    fn ep_pool_identity_configuration() {
        let pts = cloud(9, 6);
        let mut t = Tape::new();
        let x = t.input(feats(9, 3, 6));
        let cv = t.constant(Tensor::from_points(&pts));
        let p = ep_pool(&mut t, x, cv, 1.0, 1).unwrap();
        assert_eq!(p.kept, (0..9).collect::<Vec<_>>());
        assert_eq!(p.points, pts);
        assert_eq!(t.value(p.coords).data(), t.value(cv).data());
        assert_eq!(t.value(p.features).data(), t.value(x).data());
        assert!(matches!(
            ep_pool(&mut t, x, cv, 0.5, 10),
            Err(Error::KTooLarge { .. })
        ));
    }

    #[test]
    fn ep_pool_hand_checked_max() {
        // Four well-separated clusters of four points; pooling 16 → 4 with
        // k = 4 takes the max within each cluster.
        let centers = [
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, 10.0, 0.0],
            [0.0, 0.0, 10.0],
        ];
        let mut pts = Vec::new();
        let mut f = Vec::new();
        for (ci, c) in centers.iter().enumerate() {
            for j in 0..4 {
                let o = 0.1 * j as f64;
                pts.push([c[0] + o, c[1] + o * 0.5, c[2] - o * 0.3]);
                f.push((ci * 10 + j) as f64);
                f.push(-((ci * 10 + j) as f64));
            }
        }
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![16, 2], f).unwrap());
        let cv = t.constant(Tensor::from_points(&pts));
        let p = ep_pool(&mut t, x, cv, 0.25, 4).unwrap();
        assert_eq!(p.kept.len(), 4);
        for (slot, &i) in p.kept.iter().enumerate() {
            let cluster = i / 4;
            assert_eq!(
                t.value(p.features).row(slot),
                &[(cluster * 10 + 3) as f64, -((cluster * 10) as f64)]
            );
        }
    }

    #[test]
    fn eu_unpool_weights() {
        let coarse_pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let fine = [[0.0, 0.0, 0.0], [0.3, 0.3, 0.3], [2.0, 2.0, 2.0]];
        let mut t = Tape::new();
        let coarse = t.input(feats(4, 3, 7));
        let skip = t.input(feats(3, 2, 8));
        let cc = t.constant(Tensor::from_points(&coarse_pts));
        let fc = t.constant(Tensor::from_points(&fine));
        let y = eu_unpool(&mut t, coarse, cc, fc, skip).unwrap();
        assert_eq!(t.shape(y), &[3, 5]);
        let yv = t.value(y).clone();
        let cv = t.value(coarse).clone();
        for c in 0..3 {
            assert!((yv.row(0)[c] - cv.row(0)[c]).abs() < 1e-6);
            let lo = (0..4).map(|j| cv.row(j)[c]).fold(f64::INFINITY, f64::min);
            let hi = (0..4)
                .map(|j| cv.row(j)[c])
                .fold(f64::NEG_INFINITY, f64::max);
            for i in 0..3 {
                assert!(yv.row(i)[c] >= lo - 1e-12 && yv.row(i)[c] <= hi + 1e-12);
            }
        }
        assert_eq!(&yv.row(1)[3..], t.value(skip).row(1));
        let constant = t.input(Tensor::full(&[4, 3], 2.5));
        let z = eu_unpool(&mut t, constant, cc, fc, skip).unwrap();
        for i in 0..3 {
            for c in 0..3 {
                assert!((t.value(z).row(i)[c] - 2.5).abs() < 1e-12);
            }
        }
        let two = t.input(feats(2, 3, 9));
        let cc2 = t.constant(Tensor::from_points(&coarse_pts[..2]));
        assert!(eu_unpool(&mut t, two, cc2, fc, skip).is_ok());
    }

    #[test]
    fn efe_shapes_and_identity() {
        let cfg = EfeConfig {
            c_in: 4,
            code_dim: 3,
            hidden: 8,
            c_out: 5,
            max_up_ratio: 4,
        };
        let mut reg = ParamRegistry::new();
        init_efe(&mut reg, &mut rng::stream(9, "init"), "efe", &cfg).unwrap();
        let pts = cloud(6, 9);
        let mut t = Tape::new();
        let x = t.input(feats(6, 4, 9));
        let c = t.input(Tensor::from_points(&pts));
        let e = efe_expand(&mut t, &reg, "efe", &cfg, x, c, 3).unwrap();
        assert_eq!(t.shape(e.coords), &[18, 3]);
        assert_eq!(t.shape(e.features), &[18, 5]);
        assert!(efe_expand(&mut t, &reg, "efe", &cfg, x, c, 0).is_err());
        assert!(efe_expand(&mut t, &reg, "efe", &cfg, x, c, 5).is_err());
        zero_param(&mut reg, "efe.offset.weight").unwrap();
        let mut t = Tape::new();
        let x = t.input(feats(6, 4, 9));
        let c = t.input(Tensor::from_points(&pts));
        let e = efe_expand(&mut t, &reg, "efe", &cfg, x, c, 1).unwrap();
        assert_eq!(t.value(e.coords).data(), t.value(c).data());
    }

    #[test]
    fn efe_copies_get_distinct_offsets() {
        let cfg = EfeConfig {
            c_in: 4,
            code_dim: 4,
            hidden: 16,
            c_out: 8,
            max_up_ratio: 4,
        };
        for seed in 0..10 {
            let mut reg = ParamRegistry::new();
            init_efe(&mut reg, &mut rng::stream(seed, "init"), "efe", &cfg).unwrap();
            let mut t = Tape::new();
            let x = t.input(feats(5, 4, seed));
            let c = t.input(Tensor::from_points(&cloud(5, seed)));
            let e = efe_expand(&mut t, &reg, "efe", &cfg, x, c, 4).unwrap();
            let off = t.value(e.offsets);
            for i in 0..5 {
                for a in 0..4 {
                    for b in a + 1..4 {
                        assert_ne!(off.row(a * 5 + i), off.row(b * 5 + i));
                    }
                }
            }
        }
    }

    #[test]
    fn kernels_pass_gradient_checks() {
        let opts = GradCheckOptions::default();
        for seed in 0..5 {
            let pts = cloud(16, seed);
            let nb = Neighborhoods::new(&pts, 4).unwrap();
            let cfg = PskConfig::new([2, 4], 3, 4);
            let mut reg = ParamRegistry::new();
            init_rpsk(&mut reg, &mut rng::stream(seed, "init"), "r", &cfg).unwrap();
            reg.insert("x", feats(16, 3, seed)).unwrap();
            let psa_cfg = cfg.branch(1);
            let psa = grad_check_registry(&reg, opts, |t, reg| {
                let x = t.param(reg, "x")?;
                let y = psa_forward(t, reg, "r.main.branch1", &psa_cfg, x, &nb.get(4).unwrap())
                    .map_err(te)?;
                weighted_sum(t, y, seed)
            })
            .unwrap();
            assert!(psa.max_rel_error < 1e-4, "psa seed {seed}: {psa:?}");
            let r = grad_check_registry(&reg, opts, |t, reg| {
                let x = t.param(reg, "x")?;
                let y = rpsk_forward(t, reg, "r", &cfg, x, &nb).map_err(te)?;
                weighted_sum(t, y, seed)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "rpsk seed {seed}: {r:?}");
        }
    }
}
