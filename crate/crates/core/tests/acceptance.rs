//! Acceptance gate: one line per criterion, non-zero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use fpgame::entropy;
use fpgame::game::{self, GameConfig, OperatorSettings, StrategySpace};
use fpgame::perturb::{self, NoiseSpec, ResilienceConfig, SdePathConfig};
use fpgame::system::{self, FeedbackProfile, MultiChannelSystem};
use fpgame::transfer::{
    adjoint_residual, apply_fp, build_ulam, DensityVector, FlowMeta, ObservableVector, Partition,
    SolverSettings,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn s(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_density(part: &Arc<Partition>, rng: &mut ChaCha8Rng) -> DensityVector {
    let w: Vec<f64> = (0..part.cell_count())
        .map(|_| {
            if rng.random::<f64>() < 0.2 {
                0.0
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    DensityVector::normalized(part.clone(), w).unwrap()
}

/// Scalar plant `ẋ = u_1 + u_2` on [-1, 1] with gains {-0.5, -1, -1.5} per
/// channel; the closed loop is the sum of the two gains.
struct ScalarGame {
    sys: MultiChannelSystem,
    space: StrategySpace,
    cfg: GameConfig,
}

fn scalar_game() -> ScalarGame {
    let sys = MultiChannelSystem::new(s(0.0), vec![s(1.0), s(1.0)]).unwrap();
    let list = vec![s(-0.5), s(-1.0), s(-1.5)];
    let space = StrategySpace::from_matrices(&sys, vec![list.clone(), list], true).unwrap();
    let part = Arc::new(Partition::interval(-1.0, 1.0, 64).unwrap());
    let mut cfg = GameConfig::new(vec![0.25, 0.5, 1.0], DensityVector::uniform(part)).unwrap();
    cfg.operator = OperatorSettings {
        q: 16,
        ..OperatorSettings::default()
    };
    ScalarGame { sys, space, cfg }
}

fn c1_adjointness() -> Outcome {
    let sys = MultiChannelSystem::new(s(-1.0), vec![s(1.0)]).unwrap();
    let part = Arc::new(Partition::interval(-1.0, 1.0, 64).unwrap());
    let flow = system::flow_map(&sys, &FeedbackProfile::zeros(&sys), 0.0, 0.7, 200).unwrap();
    let p = build_ulam(&part, &flow, 16, 0.0, FlowMeta::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let theta = random_density(&part, &mut rng);
        let zeta =
            ObservableVector::new((0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        worst = worst.max(adjoint_residual(&p, &theta, &zeta).unwrap());
    }
    check(
        p.max_leakage() == 0.0 && worst <= 1e-12,
        format!("max residual {worst:.2e}"),
    )
}

fn c2_semigroup() -> Outcome {
    // mildly expanding flow so that boundary rows leak
    let sys = MultiChannelSystem::new(s(0.3), vec![s(1.0)]).unwrap();
    let part = Arc::new(Partition::interval(-1.0, 1.0, 64).unwrap());
    let flow = system::flow_map(&sys, &FeedbackProfile::zeros(&sys), 0.0, 0.5, 200).unwrap();
    let p = build_ulam(&part, &flow, 16, 1.0, FlowMeta::default()).unwrap();
    let leak = p.leakage_vector();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut lin, mut mass_err) = (0.0_f64, 0.0_f64);
    let mut negatives = 0;
    for _ in 0..100 {
        let a = random_density(&part, &mut rng);
        let b = random_density(&part, &mut rng);
        let (wa, wb) = (rng.random::<f64>(), rng.random::<f64>());
        let mix: Vec<f64> = a
            .masses()
            .iter()
            .zip(b.masses())
            .map(|(x, y)| wa * x + wb * y)
            .collect();
        let pa = p.push_masses(&a.masses());
        let pb = p.push_masses(&b.masses());
        for (k, v) in p.push_masses(&mix).iter().enumerate() {
            lin = lin.max((v - (wa * pa[k] + wb * pb[k])).abs());
        }
        let pushed = apply_fp(&p, &a, false).unwrap();
        negatives += pushed.values().iter().filter(|&&v| v < 0.0).count();
        let expected: f64 = a
            .masses()
            .iter()
            .zip(&leak)
            .map(|(m, l)| m * (1.0 - l))
            .sum();
        mass_err = mass_err.max((pushed.mass() - expected).abs());
    }
    check(
        lin <= 1e-15 && negatives == 0 && mass_err <= 1e-14 && p.max_leakage() > 0.0,
        format!("linearity {lin:.1e}, negative cells {negatives}, mass bookkeeping {mass_err:.1e}"),
    )
}

fn c3_extremality() -> Outcome {
    let part = Arc::new(Partition::new(vec![-1.0, 0.0], vec![2.0, 0.5], vec![12, 10]).unwrap());
    let h_u = entropy::entropy(&DensityVector::uniform(part.clone())).value;
    let ln_vol = part.domain_volume().ln();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut excess = f64::NEG_INFINITY;
    for _ in 0..1000 {
        excess = excess.max(entropy::entropy(&random_density(&part, &mut rng)).value - h_u);
    }
    check(
        excess <= 1e-9 && (h_u - ln_vol).abs() <= 1e-12,
        format!(
            "max excess {excess:.3e}, |H(u) - ln vol| {:.1e}",
            (h_u - ln_vol).abs()
        ),
    )
}

fn c4_quadrature() -> Outcome {
    let part = Arc::new(Partition::interval(0.0, 1.0, 256).unwrap());
    let theta = DensityVector::from_fn(part.clone(), |x| 2.0 * x[0]).unwrap();
    let h = entropy::entropy(&theta).value;
    let kl = entropy::relative_entropy(&theta, &DensityVector::uniform(part)).unwrap();
    let (h_exact, kl_exact) = (0.5 - 2f64.ln(), 2f64.ln() - 0.5);
    check(
        (h - h_exact).abs() <= 2e-3 && (kl - kl_exact).abs() <= 2e-3,
        format!(
            "H err {:.1e}, H_r err {:.1e}",
            (h - h_exact).abs(),
            (kl - kl_exact).abs()
        ),
    )
}

fn c5_transition() -> Outcome {
    let sys = MultiChannelSystem::new(s(0.0), vec![s(1.0)]).unwrap();
    let p = FeedbackProfile::from_matrices(vec![s(-1.0)]).unwrap();
    let phi = system::integrate_transition(&sys, &p, 0.0, 1.0, 100)
        .unwrap()
        .phi[(0, 0)];
    let e1 = (phi - (-1f64).exp()).abs();

    let a = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -0.5, -0.2]);
    let b1 = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
    let b2 = DMatrix::from_row_slice(2, 1, &[0.3, 1.0]);
    let sys2 = MultiChannelSystem::new(a, vec![b1, b2]).unwrap();
    let prof = FeedbackProfile::from_matrices(vec![
        DMatrix::from_row_slice(1, 2, &[-0.8, 0.2]),
        DMatrix::from_row_slice(1, 2, &[0.1, -0.6]),
    ])
    .unwrap();
    let full = system::integrate_transition(&sys2, &prof, 0.0, 2.0, 400)
        .unwrap()
        .phi;
    let mut worst = 0.0_f64;
    for j in 0..2 {
        let (rest, own) = system::decompose_transition(&sys2, &prof, j, 0.0, 2.0, 400).unwrap();
        worst = worst.max((&rest.phi * &own.phi - &full).amax());
    }
    check(
        e1 <= 1e-8 && worst <= 1e-6,
        format!("|Φ(1) - 1/e| {e1:.1e}, product defect {worst:.1e}"),
    )
}

fn c6_stationary() -> Outcome {
    let g = scalar_game();
    let profile = FeedbackProfile::from_matrices(vec![s(-0.5), s(-0.5)]).unwrap();
    let rep = game::stationary_report(&g.sys, &profile, &g.cfg).map_err(|e| e.to_string())?;
    let v = rep.density.masses();
    let central = v[31] + v[32];
    let grid_worst = rep.grid_residuals.iter().copied().fold(0.0, f64::max);
    check(
        central >= 0.99 && rep.residual <= 1e-9 && grid_worst <= 1e-8,
        format!(
            "central mass {central:.6}, residual {:.1e}, grid residual {grid_worst:.1e}",
            rep.residual
        ),
    )
}

fn c7_decay() -> Outcome {
    let g = scalar_game();
    let res =
        game::find_equilibrium(&g.sys, &g.space, &g.cfg, &[0, 0]).map_err(|e| e.to_string())?;
    let star = res.stationary.ok_or("not converged")?.density;
    let times: Vec<f64> = (1..=10).map(|k| 0.5 * k as f64).collect();
    let part = star.partition().clone();
    let thetas = vec![DensityVector::uniform(part)];
    let trace = game::entropy_decay_trace(
        &g.sys,
        &res.profile,
        &star,
        &thetas,
        &times,
        &g.cfg.operator,
        Some(fpgame::cli::DEFAULT_KL_FLOOR),
    )
    .map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut finals = Vec::new();
    for id in 0..thetas.len() {
        let seq = trace.sequence(id);
        ok &= game::is_non_increasing(&seq, 1e-6) && *seq.last().unwrap() < 0.05;
        finals.push(format!("{:.3e}", seq.last().unwrap()));
    }
    check(ok, format!("final values {}", finals.join(", ")))
}

fn c8_exhaustive() -> Outcome {
    let g = scalar_game();
    // exhaustive oracle: objective of all nine profiles
    let objective = |c: &[usize]| -> f64 {
        game::criterion(&g.sys, &g.space.profile(c), 0, &g.cfg)
            .unwrap()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut table = [[0.0; 3]; 3];
    for (i, row) in table.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = objective(&[i, k]);
        }
    }
    let survives = |c: [usize; 2]| {
        (0..3).all(|alt| table[alt][c[1]] >= table[c[0]][c[1]] - g.cfg.tol)
            && (0..3).all(|alt| table[c[0]][alt] >= table[c[0]][c[1]] - g.cfg.tol)
    };
    let mut found = Vec::new();
    for i in 0..3 {
        for k in 0..3 {
            let res = game::find_equilibrium(&g.sys, &g.space, &g.cfg, &[i, k])
                .map_err(|e| e.to_string())?;
            if !res.converged {
                return Err(format!("start ({i},{k}) did not converge"));
            }
            found.push([res.choice[0], res.choice[1]]);
        }
    }
    let first = found[0];
    let all_same = found.iter().all(|f| *f == first);
    let verified = game::verify_equilibrium(&g.sys, &g.space.profile(&first), &g.space, &g.cfg)
        .map_err(|e| e.to_string())?;
    check(
        all_same && survives(first) && verified.no_deviation.passed,
        format!(
            "profile {first:?} from all 9 starts, no-deviation margin {:.2e}",
            verified.no_deviation.worst_margin
        ),
    )
}

fn c9_contraction() -> Outcome {
    // rotation by a quarter turn at t = 0.5 and a half turn at t = 1
    let a = DMatrix::from_row_slice(
        2,
        2,
        &[0.0, std::f64::consts::PI, -std::f64::consts::PI, 0.0],
    );
    let sys = MultiChannelSystem::new(a, vec![DMatrix::zeros(2, 1)]).unwrap();
    let space =
        StrategySpace::from_matrices(&sys, vec![vec![DMatrix::zeros(1, 2)]], false).unwrap();
    let part = Arc::new(Partition::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![10, 10]).unwrap());
    let mut cfg = GameConfig::new(vec![0.5, 1.0], DensityVector::uniform(part.clone())).unwrap();
    cfg.operator = OperatorSettings {
        q: 4,
        leak_tol: 0.0,
        integration_steps: 400,
    };
    let center = DensityVector::from_fn(part.clone(), |x| 1.0 + 0.5 * x[0] - 0.3 * x[1]).unwrap();
    let rot = game::contraction_estimate(&sys, &space, &cfg, &center, 0.5, 200, 9)
        .map_err(|e| e.to_string())?;
    let quarter = game::operator_at(&sys, &space.profile(&[0]), 0.5, &cfg.operator, &part).unwrap();
    let perm_ok = (0..part.cell_count()).all(|i| quarter.row(i).count() == 1);

    let g = scalar_game();
    let profile = g.space.profile(&[0, 0]);
    let star = game::stationary_report(&g.sys, &profile, &g.cfg)
        .map_err(|e| e.to_string())?
        .density;
    let (beta, n_pairs, seed) = (0.5, 100, 11);
    let est = game::contraction_estimate(&g.sys, &g.space, &g.cfg, &star, beta, n_pairs, seed)
        .map_err(|e| e.to_string())?;
    // dense recomputation over the same operators and pairs
    let (pairs, _) = game::sample_ball_pairs(&star, beta, n_pairs, seed).unwrap();
    let mut kappa = 0.0_f64;
    for choice in g.space.all_choices() {
        for &t in &g.cfg.time_grid {
            let dense = game::operator_at(
                &g.sys,
                &g.space.profile(&choice),
                t,
                &g.cfg.operator,
                star.partition(),
            )
            .unwrap()
            .to_dense();
            let push = |m: &[f64]| -> Vec<f64> {
                (0..m.len())
                    .map(|j| (0..m.len()).map(|i| m[i] * dense[i][j]).sum())
                    .collect()
            };
            for (x, y) in &pairs {
                let (mx, my) = (x.masses(), y.masses());
                let (px, py) = (push(&mx), push(&my));
                let num: f64 = px.iter().zip(&py).map(|(a, b)| (a - b).abs()).sum();
                let den: f64 = mx.iter().zip(&my).map(|(a, b)| (a - b).abs()).sum();
                kappa = kappa.max(num / den);
            }
        }
    }
    check(
        perm_ok
            && (rot.kappa - 1.0).abs() <= 1e-9
            && (est.kappa - kappa).abs() <= 1e-9
            && est.drift <= 1e-10,
        format!(
            "rotation κ̂ = {:.12}, contracting κ̂ = {:.6} (dense {:.6}), drift {:.1e}, ball_ok {}",
            rot.kappa, est.kappa, kappa, est.drift, est.ball_ok
        ),
    )
}

fn c10_sde_moments() -> Outcome {
    let sys = MultiChannelSystem::new(s(0.0), vec![s(1.0)]).unwrap();
    let p = FeedbackProfile::from_matrices(vec![s(-1.0)]).unwrap();
    let noise = NoiseSpec::new(s(1.0), vec![0.1]).unwrap();
    let started = Instant::now();
    let cfg = SdePathConfig {
        h: 0.01,
        n_steps: 1000,
        n_paths: 100_000,
        seed: 2024,
    };
    let (_, stats) = perturb::simulate_ensemble(&sys, &p, &noise, 0.1, &[0.0], &cfg)
        .map_err(|e| e.to_string())?;
    let rel = (stats.variance[0] - 0.05).abs() / 0.05;
    let elapsed = started.elapsed().as_secs_f64();
    let det = SdePathConfig {
        h: 1e-3,
        n_steps: 1000,
        n_paths: 1,
        seed: 0,
    };
    let end = perturb::simulate_sde(&sys, &p, &noise, 0.0, &[1.0], &det, 0)
        .unwrap()
        .endpoint()[0];
    let e0 = (end - (-1f64).exp()).abs();
    check(
        rel <= 0.10 && e0 <= 2e-3 && elapsed <= 300.0,
        format!(
            "variance {:.5} (rel err {:.3}), zero-noise endpoint err {e0:.1e}, {elapsed:.1}s",
            stats.variance[0], rel
        ),
    )
}

fn resilience_inputs() -> (
    MultiChannelSystem,
    FeedbackProfile,
    NoiseSpec,
    ResilienceConfig,
    Vec<DensityVector>,
) {
    let sys = MultiChannelSystem::new(s(0.0), vec![s(1.0)]).unwrap();
    let p = FeedbackProfile::from_matrices(vec![s(-1.0)]).unwrap();
    let noise = NoiseSpec::new(s(1.0), vec![0.2, 0.1, 0.05, 0.0]).unwrap();
    let cfg = ResilienceConfig {
        times: vec![0.5, 1.0],
        stationary_time: 1.0,
        path: SdePathConfig {
            h: 0.01,
            n_steps: 0,
            n_paths: 256,
            seed: 7,
        },
        leak_tol: 0.05,
        solver: SolverSettings::default(),
        kl_floor: Some(fpgame::cli::DEFAULT_KL_FLOOR),
    };
    let part = Arc::new(Partition::interval(-1.5, 1.5, 64).unwrap());
    (sys, p, noise, cfg, vec![DensityVector::uniform(part)])
}

fn c11_resilience() -> Outcome {
    let (sys, p, noise, cfg, thetas) = resilience_inputs();
    let rep =
        perturb::resilience_report(&sys, &p, &noise, &cfg, &thetas).map_err(|e| e.to_string())?;
    let theta: Vec<f64> = rep
        .theta_eps
        .iter()
        .map(|v| v.unwrap_or(f64::INFINITY))
        .collect();
    let positive = &theta[..3];
    let dists = &rep.stationary_distance[..3];
    let zero_rows = rep.entries.iter().filter(|e| e.epsilon == 0.0).all(|e| {
        e.l1_distance == 0.0 && e.rel_entropy == Some(0.0) && e.support_violation_mass == 0.0
    });
    check(
        game::is_non_increasing(positive, 0.0)
            && game::is_non_increasing(dists, 0.0)
            && zero_rows
            && rep.stationary_distance[3] == 0.0,
        format!("theta_eps {positive:.4?}, ‖ϑ*^ε − ϑ*‖₁ {dists:.4?}, ε=0 rows zero: {zero_rows}"),
    )
}

const RESILIENCE_CONFIG: &str = r#"{
  "system": {"d": 1, "A": [[0.0]], "channels": [{"B": [[1.0]], "gains": [[-1.0]]}]},
  "domain": {"lower": [-1.5], "upper": [1.5], "cells_per_axis": [64]},
  "ulam": {"q": 16, "t_step": 1.0},
  "perturb": {"sigma": [[1.0]], "epsilon_list": [0.2, 0.1, 0.05, 0.0], "h": 0.01,
              "n_paths": 256, "seed": 7, "times": [0.5, 1.0]}
}"#;

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn c12_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("scenario.json");
    std::fs::write(&config, RESILIENCE_CONFIG).unwrap();
    let mut runs = Vec::new();
    for (k, threads) in [1, 2, 8, 8].iter().enumerate() {
        let out = tmp.path().join(format!("run{k}"));
        let code = fpgame::cli::run([
            "fpgame",
            "resilience",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            &threads.to_string(),
            "--kl-floor",
        ]);
        if code != 0 {
            return Err(format!("run with {threads} threads exited with {code}"));
        }
        runs.push(read_dir_bytes(&out));
    }
    let same = runs.iter().all(|r| *r == runs[0]);
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    check(
        same && names.len() >= 2,
        format!("artifacts {names:?} identical across 1/2/8 threads: {same}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("adjointness", c1_adjointness),
        ("semigroup bookkeeping", c2_semigroup),
        ("entropy extremality", c3_extremality),
        ("quadrature oracles", c4_quadrature),
        ("transition integration", c5_transition),
        ("stationary density", c6_stationary),
        ("relative entropy decay", c7_decay),
        ("exhaustive equilibrium", c8_exhaustive),
        ("contraction estimator", c9_contraction),
        ("sde moments", c10_sde_moments),
        ("resilience trends", c11_resilience),
        ("determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {detail}", k + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
