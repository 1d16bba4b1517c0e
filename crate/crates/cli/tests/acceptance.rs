//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use formation_cli::commands::trace_checkpoints;
use formation_cli::jacobian::check_jacobian;
use formation_core::estimator::monte_carlo;
use formation_core::fisher::{crlb, fim, null_direction, Cost};
use formation_core::formation_opt::{agent_distance, descend, CheckpointSpacing, DescentResult, OptError};
use formation_core::manifold::{exp, log, odot, wedge, GroupMode, Pose, StateTuple};
use formation_core::presets::{preset, two_tag_layout, NAMES, PRESET_SIGMA};
use formation_core::ranging::stack_jacobian;
use formation_core::scenario::{fully_connected_graph, OptimizerParams, Scenario};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

type Outcome = Result<String, String>;

const MC_TRIALS: usize = 2000;
const PRIOR_SIGMA: f64 = 0.08;

fn line3() -> &'static (Scenario, DescentResult) {
    static CELL: OnceLock<(Scenario, DescentResult)> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = preset("line3").unwrap();
        let r = descend(&s).unwrap();
        (s, r)
    })
}

fn pairwise(x: &StateTuple) -> Vec<f64> {
    let n = x.agent_count();
    let mut d = Vec::new();
    for a in 1..=n {
        for b in a + 1..=n {
            d.push(agent_distance(x, a, b));
        }
    }
    d
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    (max - min) / (v.iter().sum::<f64>() / v.len() as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn jacobian_fidelity() -> Outcome {
    let planar = preset("triangle3").unwrap();
    let mode = GroupMode::Se3Heading;
    let tags = two_tag_layout(3, &[0.2, 0.2, 0.0], &[0.2, -0.2, 0.0]);
    let graph = fully_connected_graph(&tags, PRESET_SIGMA).unwrap();
    let start = StateTuple::new(
        mode,
        vec![Pose::from_heading(0.3, &[1.5, 0.2, 0.1]), Pose::from_heading(-0.4, &[0.3, 1.6, -0.2])],
    )
    .unwrap();
    let heading = Scenario::new(mode, tags, graph, OptimizerParams::default(), start, 7).unwrap();
    let mut worst = Vec::new();
    for (name, s) in [("SE(2)", &planar), ("heading SE(3)", &heading)] {
        let report = check_jacobian(s, 100, 11, 1e-6, false).map_err(|e| e.to_string())?;
        worst.push((name, report.trials.len(), report.worst().rel_error));
    }
    let detail = worst
        .iter()
        .map(|(n, k, e)| format!("{n}: {k} states, max rel err {e:.2e}"))
        .collect::<Vec<_>>()
        .join("; ");
    if worst.iter().all(|w| w.2 < 1e-5) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn triangle_and_square() -> Outcome {
    let (_, tri) = line3();
    let d3 = pairwise(&tri.state);
    let s4 = preset("square4").unwrap();
    let sq = descend(&s4).map_err(|e| e.to_string())?;
    let mut d4 = pairwise(&sq.state);
    d4.sort_by(f64::total_cmp);
    let (sides, diagonals) = d4.split_at(4);
    let (e3, es, ed) = (spread(&d3), spread(sides), spread(diagonals));
    let detail = format!(
        "triangle sides {d3:.4?} spread {e3:.2e}; square sides spread {es:.2e}, diagonals {diagonals:.4?} spread {ed:.2e}"
    );
    if e3 < 0.01 && es < 0.01 && ed < 0.01 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn observability_barrier() -> Outcome {
    let s = preset("collinear").unwrap();
    let x = s.initial_state();
    let info = fim(x, &s).map_err(|e| e.to_string())?;
    let h = stack_jacobian(x, &s).map_err(|e| e.to_string())?;
    let v = null_direction(x, &s).map_err(|e| e.to_string())?.ok_or("no null direction")?;
    let ratio = (&h * &v).norm() / h.norm();
    let detail = format!(
        "rank {} of {}, J_est {:?}, |Hv|/|H| = {ratio:.2e}",
        info.rank,
        info.dim(),
        info.j_est()
    );
    if info.rank < info.dim() && info.j_est() == Cost::Infinite && ratio < 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn descent_contract() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for name in NAMES {
        let s = preset(name).unwrap();
        let d_safe = s.optimizer().safety_radius;
        let trace = match descend(&s) {
            Ok(r) => r.trace,
            Err(OptError::InfiniteStart | OptError::Ranging(_) | OptError::Infeasible { .. }) => {
                lines.push(format!("{name}: refused start"));
                continue;
            }
            Err(e) => {
                ok = false;
                lines.push(format!("{name}: {e}"));
                continue;
            }
        };
        let rises = trace.records.windows(2).filter(|w| w[1].j_total > w[0].j_total).count();
        let min_d = trace
            .records
            .iter()
            .filter_map(|r| r.state.as_ref())
            .flat_map(pairwise)
            .fold(f64::INFINITY, f64::min);
        ok &= rises == 0 && min_d > d_safe;
        lines.push(format!("{name}: {} iterates, {rises} rises, min dist {min_d:.3}", trace.records.len()));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cost_mse_correlation() -> Outcome {
    let (s, r) = line3();
    let cps = trace_checkpoints(&r.trace, 10, CheckpointSpacing::Geometric);
    let report = monte_carlo(&cps, s, PRIOR_SIGMA, MC_TRIALS, s.seed()).map_err(|e| e.to_string())?;
    let j: Vec<f64> = report.checkpoints.iter().map(|c| c.j_total.value()).collect();
    let m: Vec<f64> = report.checkpoints.iter().map(|c| c.mse).collect();
    let rho = spearman(&j, &m);
    let ratio = m[m.len() - 1] / m[0];
    let detail = format!("{} checkpoints, Spearman {rho:.3}, final/first MSE {ratio:.3}", cps.len());
    if cps.len() == 10 && rho > 0.8 && ratio < 0.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn experiment_surrogate() -> Outcome {
    let s = preset("experiment").unwrap();
    let opt = descend(&s).map_err(|e| e.to_string())?;
    let cps = vec![(0, s.initial_state().clone()), (1, opt.state)];
    let report = monte_carlo(&cps, &s, PRIOR_SIGMA, MC_TRIALS, s.seed()).map_err(|e| e.to_string())?;
    let (line, tri) = (report.checkpoints[0].mean_position_error, report.checkpoints[1].mean_position_error);
    let reduction = 1.0 - tri / line;
    let detail = format!("mean position error {line:.4} m -> {tri:.4} m, reduction {:.1}%", 100.0 * reduction);
    if reduction >= 0.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn translation_trace(cov: &DMatrix<f64>, x: &StateTuple) -> f64 {
    let (n, r) = (x.mode().dim(), x.mode().rot_dof());
    (2..=x.agent_count())
        .map(|a| {
            let off = x.block_offset(a).unwrap() + r;
            (0..n).map(|k| cov[(off + k, off + k)]).sum::<f64>()
        })
        .sum()
}

fn crlb_consistency() -> Outcome {
    let (s, r) = line3();
    let x = &r.state;
    let bound: f64 = crlb(x, s).map_err(|e| e.to_string())?.iter().map(|e| e.covariance.trace()).sum();
    let report = monte_carlo(&[(0, x.clone())], s, PRIOR_SIGMA, MC_TRIALS, s.seed()).map_err(|e| e.to_string())?;
    let sample = translation_trace(&report.checkpoints[0].sample_covariance, x);
    // the same bound with the attitude prior's information added
    let mut info = fim(x, s).map_err(|e| e.to_string())?.matrix;
    for a in 2..=x.agent_count() {
        let off = x.block_offset(a).unwrap();
        for k in 0..x.mode().rot_dof() {
            info[(off + k, off + k)] += PRIOR_SIGMA.powi(-2);
        }
    }
    let with_prior = translation_trace(&info.try_inverse().ok_or("singular")?, x);
    let detail = format!(
        "sample trace {sample:.4} vs 0.9 x CRLB trace {:.4} (ratio {:.3}); bound with prior {with_prior:.4}",
        0.9 * bound,
        sample / bound
    );
    if sample >= 0.9 * bound {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tangent(mode: GroupMode, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let r = mode.rot_dof();
    let mut xi = DVector::from_fn(mode.dof(), |_, _| rng.random_range(-5.0..5.0));
    let phi = DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0));
    let phi = phi.normalize() * rng.random_range(0.0..3.0);
    xi.rows_mut(0, r).copy_from(&phi);
    xi
}

fn kernel_properties() -> Outcome {
    const DRAWS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut round, mut ident, mut plus0, mut flat) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for mode in [GroupMode::Se2, GroupMode::Se3, GroupMode::Se3Heading] {
        let n = mode.dim();
        for _ in 0..DRAWS {
            let xi = random_tangent(mode, &mut rng);
            let t = exp(mode, &xi).map_err(|e| e.to_string())?;
            let back = log(mode, &t).map_err(|e| e.to_string())?;
            round = round.max((&back - &xi).amax());
            let again = exp(mode, &back).map_err(|e| e.to_string())?;
            round = round.max((again.to_homogeneous() - t.to_homogeneous()).amax());

            let mut p = DVector::from_fn(n + 1, |_, _| rng.random_range(-5.0..5.0));
            p[n] = 1.0;
            let lhs = wedge(mode, &xi).map_err(|e| e.to_string())? * &p;
            let rhs = odot(mode, &p).map_err(|e| e.to_string())? * &xi;
            ident = ident.max((lhs - rhs).amax());

            let x = StateTuple::new(mode, vec![t.clone(), exp(mode, &random_tangent(mode, &mut rng)).unwrap()])
                .map_err(|e| e.to_string())?;
            let same = x.oplus(&DVector::zeros(x.tangent_dim())).map_err(|e| e.to_string())?;
            for (a, b) in x.poses().iter().zip(same.poses()) {
                plus0 = plus0.max((a.to_homogeneous() - b.to_homogeneous()).amax());
            }

            if mode == GroupMode::Se3Heading {
                let mut y = x.clone();
                for _ in 0..5 {
                    let dx = DVector::from_fn(y.tangent_dim(), |_, _| rng.random_range(-2.0..2.0));
                    y = y.oplus(&dx).map_err(|e| e.to_string())?;
                }
                for pose in y.poses() {
                    let c = pose.rotation().matrix();
                    let off = [c[(0, 2)], c[(1, 2)], c[(2, 0)], c[(2, 1)], c[(2, 2)] - 1.0];
                    flat = off.iter().fold(flat, |m, v| m.max(v.abs()));
                }
            }
        }
    }
    let detail = format!(
        "{DRAWS} draws per mode: exp/log {round:.2e}, odot {ident:.2e}, oplus(x, 0) {plus0:.2e}, roll/pitch {flat:.2e}"
    );
    if round < 1e-9 && ident < 1e-12 && plus0 == 0.0 && flat < 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_cli(args: &[&str], threads: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_formation-opt"))
        .args(args)
        .args(["--threads", threads])
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&status.stderr)))
    }
}

fn same_bytes(a: &Path, b: &Path) -> Result<bool, String> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok(read(a)? == read(b)?)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs: Vec<_> = ["a", "b"].iter().map(|d| tmp.path().join(d)).collect();
    for (dir, threads) in dirs.iter().zip(["1", "4"]) {
        let out = dir.to_str().unwrap();
        run_cli(&["optimize", "--preset", "line3", "--out", out, "--seed", "5"], threads)?;
        let trace = dir.join("trace.json");
        run_cli(
            &[
                "montecarlo",
                "--preset",
                "line3",
                "--trace",
                trace.to_str().unwrap(),
                "--trials",
                "300",
                "--out",
                out,
                "--seed",
                "5",
            ],
            threads,
        )?;
    }
    let mut lines = Vec::new();
    let mut ok = true;
    for name in ["trace.csv", "crlb_checkpoints.csv", "montecarlo.csv"] {
        let same = same_bytes(&dirs[0].join(name), &dirs[1].join(name))?;
        ok &= same;
        lines.push(format!("{name} {}", if same { "identical" } else { "differs" }));
    }
    let detail = format!("1 vs 4 threads: {}", lines.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("jacobian fidelity", jacobian_fidelity),
        ("triangle and square", triangle_and_square),
        ("observability barrier", observability_barrier),
        ("descent contract", descent_contract),
        ("cost-MSE correlation", cost_mse_correlation),
        ("experiment surrogate", experiment_surrogate),
        ("CRLB consistency", crlb_consistency),
        ("kernel properties", kernel_properties),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {} {name} ({secs:.1} s): {d}", k + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {} {name} ({secs:.1} s): {d}", k + 1)
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
