//! Finite-difference gradient suite over every differentiable building
//! block: tape primitives, relational kernels, the encoder, the coarse
//! decoder, RENet, the losses and the classifier.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use vrckit_tensor::{
    grad_check, grad_check_registry, GradCheckOptions, ParamRegistry, Primitive, Tape, Tensor,
    TensorError, Var,
};

use crate::classifier::{classify_tape, cross_entropy, init_classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::kernels::{
    efe_expand, ep_pool, eu_unpool, init_efe, init_psa, init_rpsk, psa_forward, psk_forward,
    rpsk_forward, EfeConfig, Neighborhoods, PskConfig,
};
use crate::metrics::{chamfer_tape, gaussian_kl_tape, LatentVars};
use crate::pmnet::{decode_coarse, encode, init_pmnet, LatentPath, PmnetConfig};
use crate::renet::{init_renet, renet_forward, RenetConfig};
use crate::rng;

/// Central-difference step.
pub const EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

pub const MODULES: [&str; 6] = [
    "primitives",
    "kernels",
    "pmnet",
    "renet",
    "metrics",
    "classifier",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub module: String,
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    /// Parameter or input holding the worst coordinate.
    pub worst: String,
    pub seconds: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn te(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument(other.to_string()),
    }
}

fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    use rand::Rng as _;
    let mut r = rng::stream(seed, "gradcheck.values");
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
    )
    .expect("shape matches")
}

fn cloud(n: usize, seed: u64) -> Vec<Point> {
    let v = rng::normals(&mut rng::stream(seed, "gradcheck.cloud"), 3 * n);
    v.chunks_exact(3)
        .map(|c| [c[0] * 0.5, c[1] * 0.5, c[2] * 0.5])
        .collect()
}

/// Contracts any output with fixed random weights.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> vrckit_tensor::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(uniform(seed ^ 0x5eed, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

struct Probe {
    error: f64,
    coords: usize,
    worst: String,
}

fn probe(error: f64, coords: usize) -> Probe {
    Probe {
        error,
        coords,
        worst: "inputs".into(),
    }
}

struct Suite {
    filter: Option<String>,
    entries: Vec<GradCheckEntry>,
}

impl Suite {
    fn wants(&self, module: &str) -> bool {
        self.filter.as_deref().is_none_or(|f| f == module)
    }

    /// Runs `check` for each seed and records the worst error.
    fn run(
        &mut self,
        module: &str,
        name: &str,
        seeds: u64,
        mut check: impl FnMut(u64) -> Result<Probe>,
    ) -> Result<()> {
        let t0 = Instant::now();
        let mut max_rel_error = 0.0f64;
        let mut worst = String::new();
        let mut coords = 0;
        for seed in 0..seeds {
            let p = check(seed)?;
            if p.error >= max_rel_error {
                max_rel_error = p.error;
                worst = format!("{} (seed {seed})", p.worst);
            }
            coords += p.coords;
        }
        self.entries.push(GradCheckEntry {
            module: module.into(),
            name: name.into(),
            max_rel_error,
            coords,
            worst,
            seconds: t0.elapsed().as_secs_f64(),
        });
        Ok(())
    }
}

fn prim(inputs: Vec<Tensor>, p: Primitive, seed: u64) -> Result<Probe> {
    let coords = inputs.iter().map(Tensor::len).sum();
    let e = grad_check(&inputs, EPS, |t, vars| {
        let y = t.apply(p.clone(), vars)?;
        weighted_sum(t, y, seed)
    })?;
    Ok(probe(e, coords))
}

/// Random biases move every ReLU input off the kink that zero biases put
/// under all-zero feature rows.
fn randomize_biases(reg: &mut ParamRegistry, seed: u64) {
    use rand::Rng as _;
    let mut r = rng::stream(seed, "gradcheck.bias");
    let paths: Vec<String> = reg
        .paths()
        .filter(|p| p.ends_with(".bias"))
        .map(str::to_string)
        .collect();
    for p in paths {
        for v in reg.value_mut(&p).expect("listed path") {
            *v = r.random_range(-0.5..0.5);
        }
    }
}

fn registry_check(
    reg: &ParamRegistry,
    cap: Option<usize>,
    build: impl Fn(&mut Tape, &ParamRegistry) -> Result<Var>,
) -> Result<Probe> {
    let mut reg = reg.clone();
    let seed = reg.numel() as u64;
    randomize_biases(&mut reg, seed);
    let reg = &reg;
    let opts = GradCheckOptions {
        eps: EPS,
        max_coords_per_tensor: cap,
    };
    let r = grad_check_registry(reg, opts, |t, reg| build(t, reg).map_err(te))?;
    Ok(Probe {
        error: r.max_rel_error,
        coords: r.coords_checked,
        worst: format!("{}[{}]", r.worst_path, r.worst_index),
    })
}

type Case<'a> = (&'a str, Box<dyn Fn(u64) -> (Vec<Tensor>, Primitive)>);

fn primitives(s: &mut Suite) -> Result<()> {
    let u = |seed: u64, k: u64, shape: &[usize]| uniform(seed * 97 + k, shape, -1.0, 1.0);
    let cases: Vec<Case> = vec![
        (
            "linear",
            Box::new(move |sd| {
                (
                    vec![u(sd, 0, &[5, 4]), u(sd, 1, &[4, 3]), u(sd, 2, &[3])],
                    Primitive::Linear,
                )
            }),
        ),
        (
            "relu",
            Box::new(move |sd| (vec![u(sd, 0, &[6, 3])], Primitive::Relu)),
        ),
        (
            "concat",
            Box::new(move |sd| {
                (
                    vec![u(sd, 0, &[3, 2]), u(sd, 1, &[3, 5])],
                    Primitive::Concat { axis: 1 },
                )
            }),
        ),
        (
            "gather",
            Box::new(move |sd| {
                (
                    vec![u(sd, 0, &[4, 3])],
                    Primitive::Gather {
                        indices: vec![3, 0, 0, 2, 1],
                    },
                )
            }),
        ),
        (
            "softmax",
            Box::new(move |sd| (vec![u(sd, 0, &[4, 3])], Primitive::Softmax { axis: 0 })),
        ),
        (
            "log_softmax",
            Box::new(move |sd| (vec![u(sd, 0, &[3, 5])], Primitive::LogSoftmax { axis: 1 })),
        ),
        (
            "add",
            Box::new(move |sd| (vec![u(sd, 0, &[3, 2]), u(sd, 1, &[3, 2])], Primitive::Add)),
        ),
        (
            "sub",
            Box::new(move |sd| (vec![u(sd, 0, &[3, 2]), u(sd, 1, &[3, 2])], Primitive::Sub)),
        ),
        (
            "mul",
            Box::new(move |sd| (vec![u(sd, 0, &[3, 2]), u(sd, 1, &[3, 2])], Primitive::Mul)),
        ),
        (
            "scale",
            Box::new(move |sd| (vec![u(sd, 0, &[3, 2])], Primitive::Scale { factor: -1.7 })),
        ),
        (
            "add_scalar",
            Box::new(move |sd| (vec![u(sd, 0, &[3, 2])], Primitive::AddScalar { value: 0.3 })),
        ),
        (
            "mean",
            Box::new(move |sd| {
                (
                    vec![u(sd, 0, &[2, 4, 3])],
                    Primitive::MeanReduce { axis: 1 },
                )
            }),
        ),
        (
            "order_free_mean",
            Box::new(move |sd| {
                (
                    vec![u(sd, 0, &[5, 3])],
                    Primitive::OrderFreeMean { axis: 0 },
                )
            }),
        ),
        (
            "sum",
            Box::new(move |sd| (vec![u(sd, 0, &[2, 4, 3])], Primitive::SumReduce { axis: 2 })),
        ),
        (
            "max",
            Box::new(move |sd| (vec![u(sd, 0, &[2, 5, 3])], Primitive::MaxReduce { axis: 1 })),
        ),
        (
            "reshape",
            Box::new(move |sd| {
                (
                    vec![u(sd, 0, &[2, 6])],
                    Primitive::Reshape { shape: vec![3, 4] },
                )
            }),
        ),
        (
            "tile",
            Box::new(move |sd| (vec![u(sd, 0, &[2, 3])], Primitive::Tile { reps: 3 })),
        ),
        (
            "exp",
            Box::new(move |sd| (vec![u(sd, 0, &[3, 3])], Primitive::Exp)),
        ),
        (
            "log",
            Box::new(move |sd| (vec![uniform(sd, &[3, 3], 0.2, 2.0)], Primitive::Log)),
        ),
        (
            "square",
            Box::new(move |sd| (vec![u(sd, 0, &[3, 3])], Primitive::Square)),
        ),
        (
            "slice",
            Box::new(move |sd| {
                (
                    vec![u(sd, 0, &[3, 6])],
                    Primitive::Slice {
                        axis: 1,
                        start: 2,
                        end: 5,
                    },
                )
            }),
        ),
        (
            "clamp",
            Box::new(move |sd| {
                (
                    vec![u(sd, 0, &[4, 4])],
                    Primitive::Clamp {
                        min: -0.5,
                        max: 0.5,
                    },
                )
            }),
        ),
    ];
    for (name, make) in cases {
        s.run("primitives", name, 5, |seed| {
            let (inputs, p) = make(seed);
            prim(inputs, p, seed)
        })?;
    }
    Ok(())
}

fn kernels(s: &mut Suite) -> Result<()> {
    s.run("kernels", "psa", 3, |seed| {
        let pts = cloud(16, seed);
        let nb = Neighborhoods::new(&pts, 4)?;
        let cfg = PskConfig::new([2, 4], 3, 4).branch(1);
        let mut reg = ParamRegistry::new();
        init_psa(&mut reg, &mut rng::stream(seed, "gc.psa"), "psa", &cfg)?;
        reg.insert("x", uniform(seed, &[16, 3], -1.0, 1.0))?;
        let table = nb.get(4)?;
        registry_check(&reg, None, |t, reg| {
            let x = t.param(reg, "x")?;
            let y = psa_forward(t, reg, "psa", &cfg, x, &table)?;
            Ok(weighted_sum(t, y, seed)?)
        })
    })?;
    for (name, residual) in [("psk", false), ("r_psk", true)] {
        s.run("kernels", name, 3, |seed| {
            let pts = cloud(8, seed + 10);
            let nb = Neighborhoods::new(&pts, 4)?;
            let cfg = PskConfig::new([2, 4], 3, if residual { 5 } else { 4 });
            let mut reg = ParamRegistry::new();
            if residual {
                init_rpsk(&mut reg, &mut rng::stream(seed, "gc.psk"), "k", &cfg)?;
            } else {
                crate::kernels::init_psk(&mut reg, &mut rng::stream(seed, "gc.psk"), "k", &cfg)?;
            }
            reg.insert("x", uniform(seed + 10, &[8, 3], -1.0, 1.0))?;
            registry_check(&reg, None, |t, reg| {
                let x = t.param(reg, "x")?;
                let y = if residual {
                    rpsk_forward(t, reg, "k", &cfg, x, &nb)?
                } else {
                    psk_forward(t, reg, "k", &cfg, x, &nb)?
                };
                Ok(weighted_sum(t, y, seed)?)
            })
        })?;
    }
    s.run("kernels", "ep_pool", 3, |seed| {
        let pts = cloud(12, seed + 20);
        let x = uniform(seed + 20, &[12, 4], -1.0, 1.0);
        let e = grad_check(&[x, Tensor::from_points(&pts)], EPS, |t, v| {
            let p = ep_pool(t, v[0], v[1], 0.5, 3).map_err(te)?;
            let a = weighted_sum(t, p.features, seed)?;
            let b = weighted_sum(t, p.coords, seed + 1)?;
            t.add(a, b)
        })?;
        Ok(probe(e, 84))
    })?;
    s.run("kernels", "eu_unpool", 3, |seed| {
        let coarse = cloud(5, seed + 30);
        let fine = cloud(11, seed + 31);
        let inputs = [
            uniform(seed + 30, &[5, 3], -1.0, 1.0),
            uniform(seed + 31, &[11, 2], -1.0, 1.0),
            Tensor::from_points(&coarse),
            Tensor::from_points(&fine),
        ];
        let e = grad_check(&inputs, EPS, |t, v| {
            let y = eu_unpool(t, v[0], v[2], v[3], v[1]).map_err(te)?;
            weighted_sum(t, y, seed)
        })?;
        Ok(probe(e, 85))
    })?;
    s.run("kernels", "efe", 3, |seed| {
        let cfg = EfeConfig {
            c_in: 3,
            code_dim: 2,
            hidden: 5,
            c_out: 4,
            max_up_ratio: 3,
        };
        let mut reg = ParamRegistry::new();
        init_efe(&mut reg, &mut rng::stream(seed, "gc.efe"), "efe", &cfg)?;
        reg.insert("x", uniform(seed + 40, &[6, 3], -1.0, 1.0))?;
        reg.insert("coords", Tensor::from_points(&cloud(6, seed + 40)))?;
        registry_check(&reg, None, |t, reg| {
            let x = t.param(reg, "x")?;
            let c = t.param(reg, "coords")?;
            let e = efe_expand(t, reg, "efe", &cfg, x, c, 3)?;
            let a = weighted_sum(t, e.coords, seed)?;
            let b = weighted_sum(t, e.features, seed + 1)?;
            Ok(t.add(a, b)?)
        })
    })?;
    Ok(())
}

fn small_pmnet() -> PmnetConfig {
    PmnetConfig {
        latent_dim: 3,
        stage1: vec![6, 8],
        stage2: vec![8, 10],
        head_hidden: 6,
        decoder_hidden: vec![12],
        coarse_n: 8,
    }
}

fn pmnet(s: &mut Suite) -> Result<()> {
    let cfg = small_pmnet();
    s.run("pmnet", "encoder_kl", 3, |seed| {
        let mut reg = ParamRegistry::new();
        init_pmnet(&mut reg, &mut rng::stream(seed, "gc.pm"), &cfg)?;
        reg.insert("x", Tensor::from_points(&cloud(10, seed + 50)))?;
        registry_check(&reg, Some(12), |t, reg| {
            let x = t.param(reg, "x")?;
            let e = encode(t, reg, &cfg, x, LatentPath::Reconstruction)?;
            let std = LatentVars::standard(t, cfg.latent_dim);
            let kl = gaussian_kl_tape(t, e.dist, std)?;
            let g = weighted_sum(t, e.global, seed)?;
            Ok(t.add(kl, g)?)
        })
    })?;
    s.run("pmnet", "decoder_cd", 3, |seed| {
        let mut reg = ParamRegistry::new();
        init_pmnet(&mut reg, &mut rng::stream(seed, "gc.pm"), &cfg)?;
        reg.insert("z", uniform(seed + 60, &[1, 3], -1.0, 1.0))?;
        reg.insert("g", uniform(seed + 61, &[1, 10], 0.0, 1.0))?;
        let y = Tensor::from_points(&cloud(12, seed + 60));
        registry_check(&reg, Some(12), |t, reg| {
            let z = t.param(reg, "z")?;
            let g = t.param(reg, "g")?;
            let out = decode_coarse(t, reg, &cfg, z, g)?;
            let target = t.constant(y.clone());
            chamfer_tape(t, out, target)
        })
    })?;
    Ok(())
}

fn renet(s: &mut Suite) -> Result<()> {
    let cfg = RenetConfig {
        channels: vec![4, 6],
        pool_ratios: vec![0.5, 0.5],
        pool_k: vec![3, 3],
        branch_ks: [2, 4],
        psa_mid: 3,
        psa_gamma_hidden: 4,
        code_dim: 2,
        efe_hidden: 5,
        efe_out: 4,
        up_ratio: 2,
        output_n: 64,
    };
    s.run("renet", "renet_cd", 2, |seed| {
        let mut reg = ParamRegistry::new();
        init_renet(&mut reg, &mut rng::stream(seed, "gc.re"), &cfg)?;
        reg.insert("input", Tensor::from_points(&cloud(32, seed + 70)))?;
        let y = Tensor::from_points(&cloud(40, seed + 71));
        registry_check(&reg, Some(6), |t, reg| {
            let x = t.param(reg, "input")?;
            // Keeping all 64 expanded points leaves the trim without a selection jump.
            let out = renet_forward(t, reg, &cfg, x, 64)?;
            let target = t.constant(y.clone());
            chamfer_tape(t, out.fine, target)
        })
    })
}

fn metrics(s: &mut Suite) -> Result<()> {
    s.run("metrics", "chamfer", 5, |seed| {
        let inputs = [
            Tensor::from_points(&cloud(9, seed + 80)),
            Tensor::from_points(&cloud(13, seed + 81)),
        ];
        let e = grad_check(&inputs, EPS, |t, v| chamfer_tape(t, v[0], v[1]).map_err(te))?;
        Ok(probe(e, 66))
    })?;
    s.run("metrics", "gaussian_kl", 5, |seed| {
        let inputs: Vec<Tensor> = (0..4)
            .map(|k| uniform(seed * 4 + k + 90, &[1, 5], -1.5, 1.5))
            .collect();
        let e = grad_check(&inputs, EPS, |t, v| {
            gaussian_kl_tape(
                t,
                LatentVars {
                    mu: v[0],
                    logvar: v[1],
                },
                LatentVars {
                    mu: v[2],
                    logvar: v[3],
                },
            )
            .map_err(te)
        })?;
        Ok(probe(e, 20))
    })
}

fn classifier(s: &mut Suite) -> Result<()> {
    let cfg = ClassifierConfig {
        trunk: vec![6, 8],
        head_hidden: 5,
        categories: vec!["a".into(), "b".into(), "c".into()],
    };
    s.run("classifier", "cross_entropy", 3, |seed| {
        let reg = init_classifier(&cfg, seed)?;
        let x = Tensor::from_points(&cloud(10, seed + 100));
        registry_check(&reg, None, |t, reg| {
            let p = t.constant(x.clone());
            let l = classify_tape(t, reg, &cfg, p)?;
            cross_entropy(t, l, (seed % 3) as usize)
        })
    })
}

/// Runs the suite, or only `module` (one of [`MODULES`]).
pub fn run_suite(module: Option<&str>) -> Result<Vec<GradCheckEntry>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::InvalidArgument(format!(
                "unknown module `{m}`; expected one of {MODULES:?}"
            )));
        }
    }
    let mut s = Suite {
        filter: module.map(str::to_string),
        entries: Vec::new(),
    };
    type Part = fn(&mut Suite) -> Result<()>;
    let parts: [(&str, Part); 6] = [
        ("primitives", primitives),
        ("kernels", kernels),
        ("pmnet", pmnet),
        ("renet", renet),
        ("metrics", metrics),
        ("classifier", classifier),
    ];
    for (name, f) in parts {
        if s.wants(name) {
            f(&mut s)?;
        }
    }
    Ok(s.entries)
}
