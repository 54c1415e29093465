//! Acceptance criteria A1-A9, one PASS/FAIL line each.
//!
//! The training criteria (A5, A6, A7, A9) need several 5k-iteration runs and
//! are skipped unless `NETO_ACCEPTANCE_FULL=1`. With `NETO_ACCEPTANCE_STRICT=1`
//! any FAIL makes the process exit nonzero. Run directories go to
//! `NETO_ACCEPTANCE_DIR` (default: a temp dir).

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neto_core::capture::{simulate, Dataset, RigSpec};
use neto_core::field::{
    checkpoint, fit_shape, init_sphere_with, AnalyticShape, Architecture, NeuralField, PrefitConfig, ScalarField,
};
use neto_core::geometry::{refract, OpticalConstants, Refraction, Vec3};
use neto_core::mesh::{evaluate, marching_cubes, MetricsReport, TriangleMesh};
use neto_core::tracer::{
    brute_force_bounce_count, check_self_occlusion_batch, scene_bound, trace_two_bounce_batch, BounceCount,
    IntersectMode, PathStatus, SamplingConfig,
};
use neto_core::train::{self, loss_and_gradients, replay_loss, trace_batch, LossWeights, RayPools, TrainConfig};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::*;

fn verdict(ok: bool, msg: String) -> Outcome {
    if ok {
        Pass(msg)
    } else {
        Fail(msg)
    }
}

// ---------------------------------------------------------------------------
// A1

fn a1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let unit = |rng: &mut ChaCha8Rng| loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            break v.normalize();
        }
    };
    let (mut snell, mut plane, mut rev, mut unit_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut transmitted = 0;
    for _ in 0..10_000 {
        let d = unit(&mut rng);
        let mut n = unit(&mut rng);
        if d.dot(&n) > 0.0 {
            n = -n;
        }
        if d.dot(&n).abs() < 1e-6 {
            continue;
        }
        let eta = rng.gen_range(0.5..2.0);
        if let Refraction::Transmitted(t) = refract(&d, &n, eta).unwrap() {
            transmitted += 1;
            unit_err = unit_err.max((t.norm() - 1.0).abs());
            plane = plane.max(d.cross(&n).dot(&t).abs());
            snell = snell.max((eta * d.cross(&n).norm() - t.cross(&n).norm()).abs());
            let back = refract(&-t, &-n, 1.0 / eta).unwrap().direction().unwrap();
            rev = rev.max((back + d).norm());
        }
    }
    // Critical angle leaving the solid, by bisection on the incidence angle.
    let c = OpticalConstants::default();
    let n = Vec3::z();
    let tir = |theta: f64| {
        let d = Vec3::new(theta.sin(), 0.0, -theta.cos());
        matches!(refract(&d, &n, c.eta_out()).unwrap(), Refraction::TotalInternalReflection)
    };
    let (mut lo, mut hi) = (0.0, std::f64::consts::FRAC_PI_2 - 1e-9);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tir(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let critical = (c.ior_outside / c.ior_inside).asin();
    let boundary = (0.5 * (lo + hi) - critical).abs();
    verdict(
        snell < 1e-10 && plane < 1e-10 && rev < 1e-9 && unit_err < 1e-10 && boundary < 1e-9,
        format!(
            "{transmitted} refractions: snell {snell:.1e}, coplanarity {plane:.1e}, reversibility {rev:.1e}; \
             critical angle off by {boundary:.1e} rad"
        ),
    )
}

// ---------------------------------------------------------------------------
// A2

fn a2() -> Outcome {
    let rig = RigSpec { n_views: 2, width: 24, height: 24, ..RigSpec::default() };
    let ds = simulate(&AnalyticShape::sphere(0.4), &rig, 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        architecture: Architecture::small(16),
        init_radius: 0.4,
        prefit: PrefitConfig { steps: 300, batch: 128, lr: 3e-3 },
        eikonal_points_per_ray: 6,
        weights: LossWeights::default(),
        sampling: SamplingConfig { n_coarse: 24, n_importance_rounds: 2, n_importance_per_round: 8, ..Default::default() },
        ..TrainConfig::default()
    };
    let mut field = init_sphere_with(cfg.architecture, 3, cfg.init_radius, cfg.prefit);
    field.set_sharpness(30.0);
    let pools = RayPools::new(&ds);
    let mut recs: Vec<_> = pools
        .inside
        .iter()
        .map(|&(v, i)| ds.records[v][i])
        .filter(|r| r.q.is_some())
        .step_by(7)
        .take(3)
        .collect();
    recs.push(ds.records[pools.outside[40].0][pools.outside[40].1]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let traced = trace_batch(&field, &ds, &recs, &cfg, &mut rng);
    let c = ds.manifest.rig.constants;
    let g = loss_and_gradients(&field, &traced, &cfg, &c);

    let h = 1e-6;
    let (mut worst, mut num, mut den) = (0.0f64, 0.0, 0.0);
    for i in 0..field.num_params() {
        let mut fp = field.clone();
        fp.params_mut()[i] += h;
        let mut fm = field.clone();
        fm.params_mut()[i] -= h;
        let fd = (replay_loss(&fp, &traced, &cfg, &c).total - replay_loss(&fm, &traced, &cfg, &c).total) / (2.0 * h);
        let a = g.params[i];
        num += (a - fd).powi(2);
        den += fd * fd;
        if fd.abs().max(a.abs()) > 1e-7 {
            worst = worst.max((a - fd).abs() / fd.abs().max(a.abs()));
        }
    }
    let global = (num / den).sqrt();

    let net = NeuralField::new_random(Architecture::default(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut spatial = 0.0f64;
    for _ in 0..1000 {
        let x = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let (_, gr) = net.evaluate(&x);
        let mut fd = Vec3::zeros();
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = 1e-4;
            fd[k] = (net.value(&(x + e)) - net.value(&(x - e))) / 2e-4;
        }
        spatial = spatial.max((gr - fd).norm() / fd.norm());
    }
    verdict(
        worst < 1e-2 && spatial < 1e-3,
        format!(
            "{} parameters: worst rel err {worst:.1e} (global {global:.1e}); spatial worst rel err {spatial:.1e} on 1000 points",
            field.num_params()
        ),
    )
}

// ---------------------------------------------------------------------------
// A3

/// Rays of every view of `rig`, with pixel coordinates.
fn view_rays(rig: &RigSpec, view: usize) -> Vec<neto_core::geometry::Ray> {
    let cam = rig.camera(view);
    (0..rig.width * rig.height).map(|k| cam.pixel_center_ray(k % rig.width, k / rig.width)).collect()
}

fn a3() -> Outcome {
    let rig = RigSpec { width: 25, height: 25, ..RigSpec::default() };
    let cfg = SamplingConfig::default();
    let s = 400.0;
    let mut lines = Vec::new();
    let (mut agree, mut total, mut far) = (0usize, 0usize, 0usize);
    for name in ["barbell", "legs"] {
        let shape = AnalyticShape::preset(name).unwrap();
        let mut field = fit_shape(Architecture { depth: 4, width: 64, freqs: 5 }, 1, &shape, PrefitConfig::default());
        field.set_sharpness(s);
        let (mut a, mut t, mut f) = (0, 0, 0);
        for v in 0..rig.n_views {
            let rays = view_rays(&rig, v);
            let counts: Vec<BounceCount> =
                rays.iter().map(|r| brute_force_bounce_count(&shape, r, &rig.constants, 8)).collect();
            let oracle: Vec<bool> = counts.iter().map(|c| matches!(c, BounceCount::Count(n) if *n > 2)).collect();
            let label = |c: &BounceCount| match c {
                BounceCount::Count(0) => 0,
                BounceCount::Count(2) => 2,
                BounceCount::Count(_) => 3,
                BounceCount::Tir => 4,
            };
            let mon = rig.monitor(&rig.camera(v));
            let paths = trace_two_bounce_batch(&field, s, &rays, &mon, &rig.constants, &cfg);
            let starts: Vec<(usize, (Vec3, Vec3))> = paths
                .iter()
                .enumerate()
                .filter_map(|(k, p)| Some((k, (p.entry_hit()?.point, p.dir_interior?))))
                .collect();
            let pairs: Vec<(Vec3, Vec3)> = starts.iter().map(|x| x.1).collect();
            let mut flagged = vec![false; rays.len()];
            for ((k, _), c) in starts.iter().zip(check_self_occlusion_batch(&field, s, &pairs, &cfg)) {
                flagged[*k] = c.occluded;
            }
            let w = rig.width as i64;
            for k in 0..rays.len() {
                t += 1;
                if flagged[k] == oracle[k] {
                    a += 1;
                    continue;
                }
                let (u, r) = (k as i64 % w, k as i64 / w);
                let near = (-2..=2).any(|du| {
                    (-2..=2).any(|dv| {
                        let (x, y) = (u + du, r + dv);
                        x >= 0 && y >= 0 && x < w && y < w && label(&counts[(y * w + x) as usize]) != label(&counts[k])
                    })
                });
                if !near {
                    f += 1;
                }
            }
        }
        lines.push(format!("{name} {a}/{t}, {f} away from tag boundaries"));
        agree += a;
        total += t;
        far += f;
    }
    let rate = agree as f64 / total as f64;
    verdict(rate >= 0.98 && far == 0, format!("agreement {rate:.4} over {total} rays ({})", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// A4

fn a4() -> Outcome {
    let rig = RigSpec { width: 32, height: 32, ..RigSpec::default() };
    let shape = AnalyticShape::sphere(0.4);
    let mut field = fit_shape(Architecture { depth: 4, width: 64, freqs: 5 }, 1, &shape, PrefitConfig::default());
    let s = 400.0;
    field.set_sharpness(s);
    let cfg = SamplingConfig::default();
    let (mut close, mut n) = (0usize, 0usize);
    for v in 0..rig.n_views {
        let rays = view_rays(&rig, v);
        let mon = rig.monitor(&rig.camera(v));
        let paths = trace_two_bounce_batch(&field, s, &rays, &mon, &rig.constants, &cfg);
        let valid: Vec<_> = paths.iter().filter(|p| p.status == PathStatus::ValidTwoBounce).collect();
        let starts: Vec<(Vec3, Vec3)> =
            valid.iter().map(|p| (p.entry_hit().unwrap().point, p.dir_interior.unwrap())).collect();
        for (p, c) in valid.iter().zip(check_self_occlusion_batch(&field, s, &starts, &cfg)) {
            if c.occluded {
                continue;
            }
            n += 1;
            if (c.back_point.unwrap() - p.exit_hit().unwrap().point).norm() < 0.03 {
                close += 1;
            }
        }
    }
    let frac = close as f64 / n.max(1) as f64;
    verdict(n > 0 && frac >= 0.95, format!("{close}/{n} two-bounce rays ({frac:.4}) have |p_b - exit| < 0.03"))
}

// ---------------------------------------------------------------------------
// Training criteria.

/// Budget for every training criterion: the A5 network and iteration count,
/// with batch and sample counts sized for a desk CPU.
fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        iterations: 5000,
        seed,
        learning_rate: 1e-4,
        checkpoint_every: 1000,
        init_sharpness: 1000.0,
        architecture: Architecture { depth: 4, width: 128, freqs: 5 },
        sampling: SamplingConfig { n_coarse: 32, n_importance_rounds: 4, n_importance_per_round: 8, ..Default::default() },
        ..TrainConfig::default()
    }
}

struct Run {
    metrics: MetricsReport,
    checkpoint: Vec<u8>,
    skipped: usize,
    minutes: f64,
}

fn root_dir() -> PathBuf {
    match std::env::var("NETO_ACCEPTANCE_DIR") {
        Ok(d) => PathBuf::from(d),
        Err(_) => std::env::temp_dir().join(format!("neto_acceptance_{}", std::process::id())),
    }
}

fn gt_mesh(shape: &AnalyticShape) -> TriangleMesh {
    let (lo, hi) = scene_bound();
    marching_cubes(shape, &lo, &hi, 256).unwrap()
}

fn train_and_score(tag: &str, ds: &Dataset, shape: &AnalyticShape, cfg: TrainConfig) -> Run {
    let t0 = Instant::now();
    let dir = root_dir().join(tag);
    let _ = std::fs::remove_dir_all(&dir);
    let summary = train::run(ds, cfg, &dir, false, |_| {}).expect("training run");
    let field: NeuralField = checkpoint::load(&summary.final_checkpoint).unwrap();
    let (lo, hi) = scene_bound();
    let metrics = match marching_cubes(&field, &lo, &hi, 128) {
        Ok(m) => evaluate(&m, &gt_mesh(shape), 0.01, 100_000, 1).unwrap(),
        Err(_) => MetricsReport {
            accuracy: f64::INFINITY,
            completeness: f64::INFINITY,
            precision: 0.0,
            recall: 0.0,
            f_score: 0.0,
            tau: 0.01,
            n_recon_samples: 0,
            n_gt_samples: 0,
            seed: 1,
            reduction: "empty reconstruction".into(),
        },
    };
    std::fs::write(dir.join("metrics.json"), metrics.to_json()).unwrap();
    let checkpoint = std::fs::read(&summary.final_checkpoint).unwrap();
    eprintln!("  [{tag}] f_score {:.4} accuracy {:.5} in {:.1} min", metrics.f_score, metrics.accuracy, t0.elapsed().as_secs_f64() / 60.0);
    Run { metrics, checkpoint, skipped: summary.skipped_steps, minutes: t0.elapsed().as_secs_f64() / 60.0 }
}

fn dataset(name: &str, corrupt: bool) -> (AnalyticShape, Dataset) {
    let shape = AnalyticShape::preset(name).unwrap();
    let rig = RigSpec { corrupt_multibounce_q: corrupt, ..RigSpec::default() };
    let ds = simulate(&shape, &rig, 1).unwrap();
    (shape, ds)
}

#[derive(Default)]
struct Runs {
    sphere: Option<Run>,
    torus: Option<Run>,
}

fn a5(runs: &mut Runs) -> Outcome {
    let (sphere, ds) = dataset("sphere", false);
    let s = train_and_score("a5_sphere", &ds, &sphere, desk_config(1));
    let (torus, ds) = dataset("torus", false);
    let t = train_and_score("a5_torus", &ds, &torus, desk_config(1));
    let out = verdict(
        s.metrics.f_score >= 0.9 && s.metrics.accuracy <= 0.01 && t.metrics.f_score >= 0.8,
        format!(
            "sphere F {:.4} accuracy {:.5} ({:.0} min); torus F {:.4} ({:.0} min)",
            s.metrics.f_score, s.metrics.accuracy, s.minutes, t.metrics.f_score, t.minutes
        ),
    );
    runs.sphere = Some(s);
    runs.torus = Some(t);
    out
}

fn a6() -> Outcome {
    let (shape, ds) = dataset("barbell", true);
    let full = train_and_score("a6_full", &ds, &shape, desk_config(1));
    let no_occ =
        train_and_score("a6_no_occlusion", &ds, &shape, TrainConfig { enable_occlusion_check: false, ..desk_config(1) });
    let no_eik = train_and_score("a6_no_eikonal", &ds, &shape, TrainConfig { enable_eikonal: false, ..desk_config(1) });
    let (f, o, e) = (full.metrics.f_score, no_occ.metrics.f_score, no_eik.metrics.f_score);
    verdict(f > o && f > e, format!("full F {f:.4}, without occlusion check {o:.4}, without eikonal {e:.4}"))
}

fn a7(runs: &Runs) -> Outcome {
    let (torus, ds) = dataset("torus", false);
    let volume = runs.torus.as_ref().expect("A5 torus run");
    let mut cfg = desk_config(1);
    cfg.sampling.mode = IntersectMode::Surface;
    let surface = train_and_score("a7_surface", &ds, &torus, cfg);
    let (v, s) = (volume.metrics.f_score, surface.metrics.f_score);
    let nan_free = volume.skipped == 0 && surface.skipped == 0;
    verdict(
        v >= s && nan_free,
        format!("volume F {v:.4}, surface F {s:.4}; skipped steps {} / {}", volume.skipped, surface.skipped),
    )
}

fn a8() -> Outcome {
    let (lo, hi) = scene_bound();
    let meshes: Vec<(&str, TriangleMesh)> = ["sphere", "torus", "barbell"]
        .into_iter()
        .map(|n| (n, marching_cubes(&AnalyticShape::preset(n).unwrap(), &lo, &hi, 64).unwrap()))
        .collect();
    let mut ok = true;
    for (_, m) in &meshes {
        let r = evaluate(m, m, 0.01, 20_000, 3).unwrap();
        ok &= r.precision == 1.0 && r.recall == 1.0 && r.f_score == 1.0 && r.accuracy == 0.0 && r.completeness == 0.0;
    }
    for w in meshes.windows(2) {
        let ab = evaluate(&w[0].1, &w[1].1, 0.01, 20_000, 3).unwrap();
        let ba = evaluate(&w[1].1, &w[0].1, 0.01, 20_000, 3).unwrap();
        ok &= ab.accuracy.to_bits() == ba.completeness.to_bits() && ab.completeness.to_bits() == ba.accuracy.to_bits();
        ok &= ab.precision == ba.recall && ab.recall == ba.precision;
    }
    verdict(ok, "self-evaluation exact on sphere, torus, barbell; swap identity bitwise".into())
}

fn a9(runs: &Runs) -> Outcome {
    let first = runs.sphere.as_ref().expect("A5 sphere run");
    let (sphere, ds) = dataset("sphere", false);
    let second = train_and_score("a9_sphere_repeat", &ds, &sphere, desk_config(1));
    let same_ckpt = first.checkpoint == second.checkpoint;
    let same_json = first.metrics.to_json() == second.metrics.to_json();
    verdict(same_ckpt && same_json, format!("checkpoints identical: {same_ckpt}; metric JSON identical: {same_json}"))
}

fn main() {
    let full = std::env::var("NETO_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let strict = std::env::var("NETO_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let skip = || Skip("needs several 5k-iteration runs; set NETO_ACCEPTANCE_FULL=1".into());
    let mut runs = Runs::default();
    let mut failed = Vec::new();
    let mut report = |id: &str, what: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let outcome = f();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, msg) = match outcome {
            Pass(m) => ("PASS", m),
            Fail(m) => {
                failed.push(id.to_string());
                ("FAIL", m)
            }
            Skip(m) => ("SKIP", m),
        };
        println!("{id} {tag} {what}: {msg} [{secs:.1} s]");
    };
    report("A1", "optics", &mut a1);
    report("A2", "gradients", &mut a2);
    report("A3", "occlusion vs oracle", &mut a3);
    report("A4", "reversibility", &mut a4);
    report("A5", "reconstruction", &mut || if full { a5(&mut runs) } else { skip() });
    report("A6", "ablation order", &mut || if full { a6() } else { skip() });
    report("A7", "volume vs surface", &mut || if full { a7(&runs) } else { skip() });
    report("A8", "metrics self-consistency", &mut a8);
    report("A9", "determinism", &mut || if full { a9(&runs) } else { skip() });
    if failed.is_empty() {
        println!("acceptance: no failures");
    } else {
        println!("acceptance: failing {}", failed.join(", "));
        if strict {
            std::process::exit(1);
        }
    }
    if full && std::env::var("NETO_ACCEPTANCE_DIR").is_err() {
        let _ = std::fs::remove_dir_all(root_dir());
    }
}
