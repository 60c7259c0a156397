//! Acceptance criteria 1 to 11. Each test writes one `[PASS]` / `[FAIL]`
//! line straight to stderr (visible without `--nocapture`) and then asserts
//! the same condition. A process-wide lock runs the tests one at a time so
//! the wall-clock budgets are measured without contention.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrckit::classifier::{
    classification_bench, classify, init_classifier, train_classifier, BenchSample,
    ClassifierConfig, ClassifierTrainConfig,
};
use vrckit::geometry::{farthest_point_sample, mirror, Point, PointCloud, ShapeFamily, ShapeSpec};
use vrckit::gradcheck::{run_suite, TOLERANCE};
use vrckit::io::write_dataset;
use vrckit::kernels::{
    init_psa, init_psk, init_rpsk, psa_forward, psk_forward, psk_forward_gated, rpsk_forward,
    Neighborhoods, PskConfig,
};
use vrckit::metrics::{chamfer_distance, fscore, gaussian_kl, LatentDistribution};
use vrckit::model::{complete, init_vrcnet, load_model, save_model, VrcnetConfig};
use vrckit::pmnet::{encode_cloud, init_pmnet, LatentPath, PmnetConfig};
use vrckit::rng;
use vrckit::training::{fit, LossWeights, StepRecord, TrainConfig, TrainSample};
use vrckit::views::{
    base_directions, build_dataset, camera_poses_26, crop_missing_ratio, desk_resolutions,
    nearest_kept_indices, DatasetOptions, DatasetPair, Mode, Split,
};
use vrckit_tensor::{ParamRegistry, Tape, Tensor};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr().lock(),
        "[{tag}] criterion {id:>2} {name}: {detail}"
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point> {
    (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-scale..scale)))
        .collect()
}

fn all_distances_distinct(pts: &[Point]) -> bool {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push((0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum());
        }
    }
    d.sort_by(f64::total_cmp);
    d.windows(2).all(|w| w[0] != w[1])
}

#[test]
fn criterion_01_gradient_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let entries = run_suite(None).expect("suite runs");
    let secs = t0.elapsed().as_secs_f64();
    let names: BTreeSet<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    let required = [
        "psa",
        "psk",
        "r_psk",
        "ep_pool",
        "eu_unpool",
        "efe",
        "encoder_kl",
        "decoder_cd",
        "chamfer",
        "gaussian_kl",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|r| !names.contains(r))
        .collect();
    let primitives = entries.iter().filter(|e| e.module == "primitives").count();
    let worst = entries
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("nonempty");
    let pass =
        worst.max_rel_error < TOLERANCE && missing.is_empty() && primitives > 0 && secs < 60.0;
    report(
        1,
        "gradient oracle",
        pass,
        &format!(
            "{} checks ({primitives} primitives), max rel err {:.2e} at {}/{} (< 1e-4), {secs:.1} s (< 60 s), missing {missing:?}",
            entries.len(),
            worst.max_rel_error,
            worst.module,
            worst.name
        ),
    );
}

/// Brute-force references: every pair is visited, nearest distances are
/// collected per point and the per-point terms added in ascending order.
fn oracle_chamfer(p: &[Point], q: &[Point]) -> f64 {
    let side = |a: &[Point], b: &[Point]| {
        let mut terms: Vec<f64> = a
            .iter()
            .map(|x| {
                b.iter()
                    .map(|y| {
                        let (dx, dy, dz) = (x[0] - y[0], x[1] - y[1], x[2] - y[2]);
                        dx * dx + dy * dy + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        terms.sort_by(f64::total_cmp);
        terms.iter().fold(0.0, |s, t| s + t) / a.len() as f64
    };
    side(p, q) + side(q, p)
}

fn oracle_fraction(a: &[Point], b: &[Point], tau: f64) -> f64 {
    let hits = a
        .iter()
        .filter(|x| {
            b.iter().any(|y| {
                ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt() < tau
            })
        })
        .count();
    hits as f64 / a.len() as f64
}

#[test]
fn criterion_02_metric_oracle_equivalence() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut nonzero_f = 0;
    for trial in 0..200 {
        let (n, m) = (rng.random_range(1..=256), rng.random_range(1..=256));
        let p = random_cloud(&mut rng, n, 0.5);
        let q = random_cloud(&mut rng, m, 0.5);
        if chamfer_distance(&p, &q).unwrap().to_bits() != oracle_chamfer(&p, &q).to_bits() {
            mismatches += 1;
        }
        let tau = [0.01, 0.05, 0.1, 0.2][trial % 4];
        let f = fscore(&p, &q, tau).unwrap();
        let (pr, rc) = (oracle_fraction(&p, &q, tau), oracle_fraction(&q, &p, tau));
        let f1 = if pr + rc > 0.0 {
            2.0 * pr * rc / (pr + rc)
        } else {
            0.0
        };
        if f.precision.to_bits() != pr.to_bits()
            || f.recall.to_bits() != rc.to_bits()
            || f.f1.to_bits() != f1.to_bits()
        {
            mismatches += 1;
        }
        nonzero_f += usize::from(f1 > 0.0);
    }
    report(
        2,
        "metric oracle equivalence",
        mismatches == 0 && nonzero_f > 50,
        &format!("200 pairs, {mismatches} bitwise mismatches, {nonzero_f} with nonzero F-score"),
    );
}

#[test]
fn criterion_03_closed_forms() {
    let _g = serial();
    let kl = gaussian_kl(
        &LatentDistribution::new(vec![1.0], vec![0.0]).unwrap(),
        &LatentDistribution::standard(1),
    )
    .unwrap();
    let p = LatentDistribution::new(vec![0.3, -1.2, 2.0], vec![0.5, -0.7, 1.1]).unwrap();
    let kl_pp = gaussian_kl(&p, &p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(&mut rng, 100, 1.0);
    let cd_pp = chamfer_distance(&cloud, &cloud).unwrap();
    let single = chamfer_distance(&[[0.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]).unwrap();
    let pass = (kl - 0.5).abs() <= 1e-12 && kl_pp == 0.0 && cd_pp == 0.0 && single == 2.0;
    report(3, "closed forms", pass, &format!("KL(N(1,1)||N(0,1)) = {kl}, KL(p,p) = {kl_pp}, CD(P,P) = {cd_pp}, single-point CD = {single}"));
}

#[test]
fn criterion_04_psk_gate_law() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_sum, mut worst_half) = (0.0f64, 0.0f64);
    for trial in 0..100 {
        let k0 = rng.random_range(1..=6);
        let k1 = rng.random_range(k0 + 1..=10);
        let cfg = PskConfig::new([k0, k1], rng.random_range(1..=6), rng.random_range(1..=12));
        let n = rng.random_range(k1..=k1 + 20);
        let pts = random_cloud(&mut rng, n, 1.0);
        let nb = Neighborhoods::new(&pts, cfg.max_k()).unwrap();
        let mut reg = ParamRegistry::new();
        init_psk(&mut reg, &mut rng::stream(trial, "gate"), "k", &cfg).unwrap();
        let feats: Vec<f64> = (0..n * cfg.c_in)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let gates = |reg: &ParamRegistry| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(vec![n, cfg.c_in], feats.clone()).unwrap());
            let out = psk_forward_gated(&mut t, reg, "k", &cfg, x, &nb).unwrap();
            (
                t.value(out.a).data().to_vec(),
                t.value(out.b).data().to_vec(),
            )
        };
        let (a, b) = gates(&reg);
        assert_eq!(a.len(), cfg.c_out);
        for (x, y) in a.iter().zip(&b) {
            worst_sum = worst_sum.max((x + y - 1.0).abs());
        }
        let wa = reg.get("k.gate_a.weight").unwrap().data().to_vec();
        reg.value_mut("k.gate_b.weight")
            .unwrap()
            .copy_from_slice(&wa);
        let (a, b) = gates(&reg);
        for (x, y) in a.iter().zip(&b) {
            worst_half = worst_half.max((x - 0.5).abs()).max((y - 0.5).abs());
        }
    }
    report(
        4,
        "PSK gate law",
        worst_sum <= 1e-12 && worst_half <= 1e-12,
        &format!("100 configurations, max |a+b-1| = {worst_sum:.1e}, max |gate-0.5| with A = B: {worst_half:.1e} (<= 1e-12)"),
    );
}

#[test]
fn criterion_05_permutation_contracts() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures: Vec<String> = Vec::new();
    for trial in 0..20u64 {
        let n = rng.random_range(24..64);
        let pts = loop {
            let p = random_cloud(&mut rng, n, 1.0);
            if all_distances_distinct(&p) {
                break p;
            }
        };
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let cloud_p = PointCloud::new(permuted.clone()).unwrap();

        let pm = PmnetConfig {
            latent_dim: 8,
            stage1: vec![16, 32],
            stage2: vec![64],
            head_hidden: 32,
            decoder_hidden: vec![32],
            coarse_n: 16,
        };
        let mut reg = ParamRegistry::new();
        init_pmnet(&mut reg, &mut rng::stream(trial, "perm.pmnet"), &pm).unwrap();
        for path in [LatentPath::Reconstruction, LatentPath::Completion] {
            if encode_cloud(&reg, &pm, &cloud, path).unwrap()
                != encode_cloud(&reg, &pm, &cloud_p, path).unwrap()
            {
                failures.push(format!("encoder trial {trial}"));
            }
        }

        let ccfg = ClassifierConfig {
            trunk: vec![16, 32],
            head_hidden: 16,
            categories: vec!["a".into(), "b".into(), "c".into()],
        };
        let creg = init_classifier(&ccfg, trial).unwrap();
        let (l0, l1) = (
            classify(&creg, &ccfg, &cloud).unwrap(),
            classify(&creg, &ccfg, &cloud_p).unwrap(),
        );
        if l0.iter().zip(&l1).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures.push(format!("classifier trial {trial}"));
        }

        let c_in = rng.random_range(1..=5);
        let feats: Vec<f64> = (0..n * c_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feats_p: Vec<f64> = perm
            .iter()
            .flat_map(|&i| feats[i * c_in..(i + 1) * c_in].iter().copied())
            .collect();
        let psk = PskConfig::new(
            [rng.random_range(1..=4), rng.random_range(5..=9)],
            c_in,
            rng.random_range(2..=8),
        );
        let psa = psk.branch(1);
        let mut kreg = ParamRegistry::new();
        let mut krng = rng::stream(trial, "perm.kernels");
        init_psa(&mut kreg, &mut krng, "psa", &psa).unwrap();
        init_psk(&mut kreg, &mut krng, "psk", &psk).unwrap();
        init_rpsk(&mut kreg, &mut krng, "rpsk", &psk).unwrap();
        type Kernel = fn(
            &mut Tape,
            &ParamRegistry,
            &PskConfig,
            vrckit_tensor::Var,
            &Neighborhoods,
        ) -> vrckit::Result<vrckit_tensor::Var>;
        let kernels: [(&str, Kernel); 3] = [
            ("psa", |t, r, c, x, nb| {
                psa_forward(t, r, "psa", &c.branch(1), x, &nb.get(c.branch_ks[1])?)
            }),
            ("psk", |t, r, c, x, nb| psk_forward(t, r, "psk", c, x, nb)),
            ("r_psk", |t, r, c, x, nb| {
                rpsk_forward(t, r, "rpsk", c, x, nb)
            }),
        ];
        for (name, kernel) in kernels {
            let run = |p: &[Point], f: &[f64]| {
                let nb = Neighborhoods::new(p, psk.max_k()).unwrap();
                let mut t = Tape::new();
                let x = t.constant(Tensor::new(vec![n, c_in], f.to_vec()).unwrap());
                let y = kernel(&mut t, &kreg, &psk, x, &nb).unwrap();
                t.value(y).clone()
            };
            let (y, y_p) = (run(&pts, &feats), run(&permuted, &feats_p));
            if (0..n).any(|i| y_p.row(i) != y.row(perm[i])) {
                failures.push(format!("{name} trial {trial}"));
            }
        }
    }
    report(
        5,
        "permutation contracts",
        failures.is_empty(),
        &format!("20 trials each of encoder/classifier invariance and PSA/PSK/R-PSK equivariance (bitwise); failures {failures:?}"),
    );
}

fn canonical_specs() -> Vec<ShapeSpec> {
    ShapeFamily::ALL
        .iter()
        .map(|&f| ShapeSpec::canonical(f))
        .collect()
}

#[test]
fn criterion_06_dataset_generator() {
    let _g = serial();
    let mut notes = Vec::new();
    let mut pass = true;

    // Cosines rather than angles: acos amplifies rounding near ±1.
    let angles = |d: &[Point]| {
        let mut v = Vec::new();
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                v.push(d[i][0] * d[j][0] + d[i][1] * d[j][1] + d[i][2] * d[j][2]);
            }
        }
        v.sort_by(f64::total_cmp);
        v
    };
    let base = angles(&base_directions());
    let mut worst_norm = 0.0f64;
    let mut worst_angle = 0.0f64;
    for seed in 0..10 {
        let poses = camera_poses_26(seed);
        pass &= poses.len() == 26;
        for d in &poses.directions {
            worst_norm =
                worst_norm.max(((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - 1.0).abs());
        }
        for (a, b) in angles(&poses.directions).iter().zip(&base) {
            worst_angle = worst_angle.max((a - b).abs());
        }
    }
    pass &= worst_norm <= 1e-12 && worst_angle <= 1e-12;
    notes.push(format!("26 poses x 10 seeds, max |norm-1| {worst_norm:.1e}, max pairwise-cosine drift {worst_angle:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut crop_ok = true;
    for &n in &[1usize, 2, 3, 7, 100, 1023, 4096] {
        let pts = random_cloud(&mut rng, n, 1.0);
        let cam = [2.0 * rng.random_range(-1.0..1.0), 2.0, 0.5];
        for r in [0.25, 0.5] {
            let kept = nearest_kept_indices(&pts, cam, r).unwrap();
            crop_ok &= kept.len() == n - (r * n as f64).floor() as usize;
        }
    }
    let src = PointCloud::new(random_cloud(&mut rng, 2048, 1.0)).unwrap();
    for r in [0.25, 0.5] {
        crop_ok &= crop_missing_ratio(&src, [0.0, 0.0, 2.0], r, 512)
            .unwrap()
            .len()
            == 512;
    }
    let mut fps_ok = true;
    for &(n, m) in &[(1usize, 1usize), (10, 10), (100, 37), (3000, 1024)] {
        let pts = random_cloud(&mut rng, n, 1.0);
        let idx = farthest_point_sample(&pts, m, 0).unwrap();
        fps_ok &= idx.len() == m && idx.iter().collect::<BTreeSet<_>>().len() == m;
    }
    pass &= crop_ok && fps_ok;
    notes.push(format!(
        "crops keep N-floor(rN): {crop_ok}, FPS exact counts: {fps_ok}"
    ));

    let res = desk_resolutions(4).unwrap();
    let opts = DatasetOptions::new(Mode::Mvp, res.clone(), 60);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let t0 = Instant::now();
    let pairs = build_dataset(&canonical_specs(), &opts).unwrap();
    let h0 = write_dataset(dirs[0].path(), "acceptance", Mode::Mvp, 60, 4, &pairs).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let counts_ok = pairs.len() == 6 * 26
        && pairs
            .iter()
            .all(|p| p.partial.len() == res[0] && res.iter().all(|&r| p.gts[&r].len() == r));
    let again = build_dataset(&canonical_specs(), &opts).unwrap();
    let h1 = write_dataset(dirs[1].path(), "acceptance", Mode::Mvp, 60, 4, &again).unwrap();
    pass &= counts_ok && h0 == h1 && secs < 120.0;
    notes.push(format!("{} pairs at {res:?}, exact counts {counts_ok}, same-seed hash equal {}, {secs:.1} s (< 120 s)", pairs.len(), h0 == h1));
    report(6, "dataset generator", pass, &notes.join("; "));
}

struct Overfit {
    cfg: VrcnetConfig,
    reg: ParamRegistry,
    data: Vec<TrainSample>,
    log: Vec<StepRecord>,
    secs: f64,
    inference_cd: f64,
}

/// Toy model on 8 pairs: four canonical shapes seen from two cameras each.
fn overfit() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        let fams = [
            ShapeFamily::Chair,
            ShapeFamily::Table,
            ShapeFamily::Lamp,
            ShapeFamily::Cylinder,
        ];
        let specs: Vec<ShapeSpec> = fams.iter().map(|&f| ShapeSpec::canonical(f)).collect();
        let mut opts = DatasetOptions::new(Mode::Mvp, vec![512, 1024], 7);
        opts.views = Some(vec![0, 13]);
        let pairs = build_dataset(&specs, &opts).unwrap();
        let data: Vec<TrainSample> = pairs
            .iter()
            .map(|p| TrainSample {
                partial: p.partial.clone(),
                target: p.gt(1024).unwrap().clone(),
            })
            .collect();
        let cfg = VrcnetConfig::default();
        let mut reg = init_vrcnet(&cfg, 1).unwrap();
        let tc = TrainConfig {
            batch_size: 1,
            epochs: 250,
            max_steps: Some(2000),
            base_lr: 2e-3,
            decay: 0.7,
            decay_interval: 40,
            seed: 3,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let log = fit(
            &mut reg,
            &cfg,
            &data,
            &tc,
            &LossWeights::default(),
            None,
            |_| Ok(()),
        )
        .unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let inference_cd = data
            .iter()
            .map(|d| {
                chamfer_distance(
                    complete(&reg, &cfg, &d.partial, 1024)
                        .unwrap()
                        .fine
                        .points(),
                    d.target.points(),
                )
                .unwrap()
            })
            .sum::<f64>()
            / data.len() as f64;
        Overfit {
            cfg,
            reg,
            data,
            log,
            secs,
            inference_cd,
        }
    })
}

fn mean_of(records: &[StepRecord], f: impl Fn(&StepRecord) -> f64) -> f64 {
    records.iter().map(f).sum::<f64>() / records.len() as f64
}

#[test]
fn criterion_07_overfit() {
    let _g = serial();
    let run = overfit();
    let tail = &run.log[run.log.len() - 100..];
    let fine = mean_of(tail, |r| r.cd_fine);
    let com = mean_of(tail, |r| r.cd_com);
    let pass = run.log.len() <= 2000 && fine < 1e-3 && fine < com && run.secs < 900.0;
    report(
        7,
        "overfit",
        pass,
        &format!(
            "{} pairs, {} steps in {:.0} s (< 900 s); mean train cd_fine over last 100 steps {fine:.3e} (< 1e-3), inference {:.3e}; cd_com {com:.3e} (cd_fine < cd_com: {})",
            run.data.len(),
            run.log.len(),
            run.secs,
            run.inference_cd,
            fine < com
        ),
    );
}

#[test]
fn criterion_08_symmetry_recovery() {
    let _g = serial();
    let mut r = rng::stream(8, "specs");
    let specs: Vec<ShapeSpec> = (0..10)
        .map(|_| ShapeSpec::random(ShapeFamily::Chair, &mut r))
        .collect();
    let mut opts = DatasetOptions::new(Mode::Mvp, vec![512, 1024], 13);
    opts.test_fraction = 0.2;
    let pairs = build_dataset(&specs, &opts).unwrap();
    let lateral = |p: &DatasetPair| {
        let c = p.camera_position;
        c[0].abs() / (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
    };
    let data: Vec<TrainSample> = pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .map(|p| TrainSample {
            partial: p.partial.clone(),
            target: p.gt(1024).unwrap().clone(),
        })
        .collect();
    let held: Vec<&DatasetPair> = pairs
        .iter()
        .filter(|p| p.split == Split::Test && lateral(p) > 0.85)
        .collect();
    let cfg = VrcnetConfig::default();
    let mut reg = init_vrcnet(&cfg, 1).unwrap();
    let tc = TrainConfig {
        batch_size: 1,
        epochs: 1000,
        max_steps: Some(1000),
        base_lr: 1e-3,
        decay_interval: 1000,
        seed: 3,
        ..TrainConfig::default()
    };
    fit(
        &mut reg,
        &cfg,
        &data,
        &tc,
        &LossWeights::default(),
        None,
        |_| Ok(()),
    )
    .unwrap();
    let asym = |c: &PointCloud| {
        chamfer_distance(c.points(), mirror(c, [1.0, 0.0, 0.0]).unwrap().points()).unwrap()
    };
    let (mut a_in, mut a_out) = (0.0, 0.0);
    for p in &held {
        a_in += asym(&p.partial);
        a_out += asym(&complete(&reg, &cfg, &p.partial, 1024).unwrap().fine);
    }
    let k = held.len() as f64;
    let ratio = a_out / a_in;
    report(
        8,
        "symmetry recovery",
        !held.is_empty() && ratio <= 0.5,
        &format!("{} lateral held-out views, asymmetry partial {:.4} vs completion {:.4}, ratio {ratio:.3} (<= 0.5)", held.len(), a_in / k, a_out / k),
    );
}

#[test]
fn criterion_09_distribution_link() {
    let _g = serial();
    let run = overfit();
    let first = mean_of(&run.log[..100], |r| r.kl_com);
    let last = mean_of(&run.log[run.log.len() - 100..], |r| r.kl_com);
    report(9, "distribution link", last < 0.5 * first, &format!("mean kl_com first 100 steps {first:.3e}, last 100 steps {last:.3e}, ratio {:.3} (< 0.5)", last / first));
}

#[test]
fn criterion_10_classification_protocol() {
    let _g = serial();
    let fams = [
        ShapeFamily::Chair,
        ShapeFamily::Table,
        ShapeFamily::Lamp,
        ShapeFamily::Cylinder,
    ];
    let mut r = rng::stream(5, "specs");
    let specs: Vec<ShapeSpec> = fams
        .iter()
        .flat_map(|&f| (0..8).map(move |_| f))
        .map(|f| ShapeSpec::random(f, &mut r))
        .collect();
    let mut opts = DatasetOptions::new(Mode::Mvp40, vec![512, 1024], 11);
    opts.test_fraction = 0.25;
    let pairs = build_dataset(&specs, &opts).unwrap();
    let ccfg = ClassifierConfig::new(fams.iter().map(|f| f.name().to_string()).collect());
    let train: Vec<&DatasetPair> = pairs.iter().filter(|p| p.split == Split::Train).collect();
    let cls_data: Vec<(PointCloud, usize)> = train
        .iter()
        .filter(|p| p.camera_id == 0)
        .map(|p| {
            (
                p.gt(1024).unwrap().clone(),
                ccfg.label(&p.category).unwrap(),
            )
        })
        .collect();
    let mut creg = init_classifier(&ccfg, 1).unwrap();
    train_classifier(
        &mut creg,
        &ccfg,
        &cls_data,
        &ClassifierTrainConfig {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            seed: 2,
        },
    )
    .unwrap();
    let bench: Vec<BenchSample> = pairs
        .iter()
        .filter(|p| p.split == Split::Test)
        .map(|p| BenchSample {
            category: p.category.clone(),
            partial: p.partial.clone(),
            complete: p.gt(1024).unwrap().clone(),
        })
        .collect();
    let oracle = classification_bench(&creg, &ccfg, &bench, |s| Ok(s.complete.clone())).unwrap();

    let cfg = VrcnetConfig::default();
    let mut reg = init_vrcnet(&cfg, 1).unwrap();
    let data: Vec<TrainSample> = train
        .iter()
        .map(|p| TrainSample {
            partial: p.partial.clone(),
            target: p.gt(1024).unwrap().clone(),
        })
        .collect();
    let tc = TrainConfig {
        batch_size: 1,
        epochs: 1000,
        max_steps: Some(1500),
        base_lr: 1e-3,
        decay_interval: 1000,
        seed: 3,
        ..TrainConfig::default()
    };
    fit(
        &mut reg,
        &cfg,
        &data,
        &tc,
        &LossWeights::default(),
        None,
        |_| Ok(()),
    )
    .unwrap();
    let rep = classification_bench(&creg, &ccfg, &bench, |s| {
        Ok(complete(&reg, &cfg, &s.partial, 1024)?.fine)
    })
    .unwrap();
    let gain = rep.acc_completed - rep.acc_partial;
    let pass = rep.acc_complete >= rep.acc_completed
        && rep.acc_completed >= rep.acc_partial
        && gain >= 0.05
        && oracle.acc_completed == oracle.acc_complete;
    report(
        10,
        "classification protocol",
        pass,
        &format!(
            "{} test pairs, acc partial {:.3} / completed {:.3} / complete {:.3}, gain {:.1} pp (>= 5), oracle completed {:.3} = complete {:.3}",
            bench.len(),
            rep.acc_partial,
            rep.acc_completed,
            rep.acc_complete,
            100.0 * gain,
            oracle.acc_completed,
            oracle.acc_complete
        ),
    );
}

#[test]
fn criterion_11_multi_resolution() {
    let _g = serial();
    let run = overfit();
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("model");
    save_model(&prefix, &run.reg, &run.cfg).unwrap();
    let (reg, cfg) = load_model(&prefix).unwrap();
    let resolutions = desk_resolutions(4).unwrap();
    let mut counts = Vec::new();
    let mut pass = resolutions == [512, 1024, 2048, 4096];
    for s in run.data.iter().take(3) {
        for &n in &resolutions {
            let c = complete(&reg, &cfg, &s.partial, n).unwrap();
            pass &= c.fine.len() == n
                && c.fine
                    .points()
                    .iter()
                    .all(|p| p.iter().all(|v| v.is_finite()));
            counts.push(c.fine.len());
        }
    }
    counts.dedup();
    report(
        11,
        "multi-resolution",
        pass,
        &format!("one checkpoint, outputs {counts:?} points for resolutions {resolutions:?}"),
    );
}
