use crate::args::{CheckJacobianArgs, Common, EstimateArgs, MonteCarloArgs, OptimizeArgs, PresetsArgs, StateArgs};
use crate::error::CliError;
use crate::jacobian::check_jacobian;
use crate::output::{fmt_f64, read_json, read_state, Run, RunManifest, StateFile, TraceFile};
use formation_core::estimator::{
    gauss_newton, initial_guess, monte_carlo, trial_rng, AttitudePrior, EstimatorError, MonteCarloReport,
};
use formation_core::fisher::{crlb, fim, CrlbEllipse};
use formation_core::formation_opt::{agent_distance, descend_with, j_total, DescentOptions, DescentTrace, OptError};
use formation_core::manifold::StateTuple;
use formation_core::presets::{preset, NAMES};
use formation_core::ranging::{synthesize, RangingError};
use formation_core::scenario::{load_scenario, write_scenario, Scenario};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;
use std::fs;

fn load(common: &Common) -> Result<(Scenario, String), CliError> {
    match (&common.scenario, &common.preset) {
        (Some(path), _) => Ok((load_scenario(path)?, path.display().to_string())),
        (None, Some(name)) => Ok((preset(name)?, format!("preset:{name}"))),
        (None, None) => Err(CliError::Validation("one of --scenario or --preset is required".into())),
    }
}

fn execute(mut run: Run, body: impl FnOnce(&mut Run) -> Result<(), CliError>) -> Result<RunManifest, CliError> {
    let result = body(&mut run);
    let manifest = run.finish(&result)?;
    result.map(|()| manifest)
}

fn unobservable(x: &StateTuple, scenario: &Scenario) -> CliError {
    match crlb(x, scenario) {
        Err(e) => e.into(),
        Ok(_) => CliError::Validation("initial formation has infinite cost".into()),
    }
}

fn coordinate_names(n: usize) -> Vec<String> {
    ["x", "y", "z"][..n].iter().map(|s| s.to_string()).collect()
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn ellipse_rows(label: Option<usize>, ellipses: &[CrlbEllipse]) -> Vec<Vec<String>> {
    ellipses
        .iter()
        .flat_map(|e| {
            e.contour.iter().map(move |p| {
                label
                    .map(|l| l.to_string())
                    .into_iter()
                    .chain(std::iter::once(e.agent_id.to_string()))
                    .chain(p.iter().map(|&v| fmt_f64(v)))
                    .collect()
            })
        })
        .collect()
}

fn write_trace(run: &mut Run, trace: &DescentTrace, scenario: &Scenario) -> Result<(), CliError> {
    let header: Vec<String> = ["iter", "J_est", "J_col", "J_total", "grad_norm", "step_scale"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = trace
        .records
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                fmt_f64(r.j_est),
                fmt_f64(r.j_col),
                fmt_f64(r.j_total),
                fmt_f64(r.gradient_norm),
                fmt_f64(r.step_scale),
            ]
        })
        .collect();
    run.write_csv("trace.csv", &header, &rows)?;
    run.write_json(
        "trace.json",
        &TraceFile::from_trace(trace, scenario.mode(), scenario.agent_count()),
    )
}

fn distances(x: &StateTuple) -> Vec<(usize, usize, f64)> {
    let n = x.agent_count();
    (1..=n)
        .flat_map(|a| (a + 1..=n).map(move |b| (a, b)))
        .map(|(a, b)| (a, b, agent_distance(x, a, b)))
        .collect()
}

pub fn optimize(args: &OptimizeArgs) -> Result<RunManifest, CliError> {
    let (s, label) = load(&args.common)?;
    let seed = args.common.seed.unwrap_or(s.seed());
    let params = json!({
        "optimizer": s.optimizer(),
        "checkpoints": args.checkpoints,
        "spacing": format!("{:?}", args.spacing).to_lowercase(),
    });
    let run = Run::new(&args.common.out, "optimize", label, params, seed)?;
    execute(run, |run| {
        let (trace, outcome) = match descend_with(&s, DescentOptions { snapshot_every: 1 }) {
            Ok(r) => (r.trace, Ok(())),
            Err(OptError::Stall { iteration, trace }) => (*trace, Err(CliError::Stall { iteration })),
            Err(OptError::InfiniteStart) => return Err(unobservable(s.initial_state(), &s)),
            Err(e) => return Err(e.into()),
        };
        write_trace(run, &trace, &s)?;
        let last = trace.final_state().expect("trace ends with a state").clone();
        run.write_json("final_state.json", &StateFile::from_state(&last))?;

        let mut header = vec!["checkpoint".to_string(), "agent".to_string()];
        header.extend(coordinate_names(s.mode().dim()));
        let mut rows = Vec::new();
        for k in trace.checkpoints(args.checkpoints, args.spacing.into()) {
            let record = &trace.records[k];
            let state = record.state.as_ref().expect("checkpoints carry states");
            if let Ok(ellipses) = crlb(state, &s) {
                rows.extend(ellipse_rows(Some(record.iter), &ellipses));
            }
        }
        run.write_csv("crlb_checkpoints.csv", &header, &rows)?;

        let end = trace.records.last().expect("non-empty trace");
        println!(
            "{:?} after {} iterations: J_total {:.6} (J_est {:.6}, J_col {:.6})",
            trace.termination, end.iter, end.j_total, end.j_est, end.j_col
        );
        for (a, b, d) in distances(&last) {
            println!("  |r_{a}{b}| = {d:.6} m");
        }
        outcome
    })
}

#[derive(Serialize)]
struct Evaluation {
    j_est: Option<f64>,
    j_col: f64,
    j_total: Option<f64>,
    observable: bool,
    fim_rank: usize,
    fim_dim: usize,
    fim_eigenvalues: Vec<f64>,
    distances: Vec<(usize, usize, f64)>,
}

pub fn evaluate(args: &StateArgs) -> Result<RunManifest, CliError> {
    let (s, label) = load(&args.common)?;
    let seed = args.common.seed.unwrap_or(s.seed());
    let x = match &args.state {
        Some(p) => read_state(p, &s)?,
        None => s.initial_state().clone(),
    };
    let params = json!({ "state": args.state.as_ref().map(|p| p.display().to_string()) });
    let run = Run::new(&args.common.out, "evaluate", label, params, seed)?;
    execute(run, |run| {
        let cost = j_total(&x, &s)?;
        let info = fim(&x, &s)?;
        let report = Evaluation {
            j_est: cost.j_est.finite(),
            j_col: cost.j_col,
            j_total: cost.total.finite(),
            observable: info.is_full_rank(),
            fim_rank: info.rank,
            fim_dim: info.dim(),
            fim_eigenvalues: info.eigenvalues.iter().copied().collect(),
            distances: distances(&x),
        };
        println!(
            "J_est {}  J_col {:.6}  J_total {}  FIM rank {}/{}",
            cost.j_est,
            cost.j_col,
            cost.total,
            info.rank,
            info.dim()
        );
        run.write_json("evaluation.json", &report)
    })
}

pub fn check(args: &CheckJacobianArgs) -> Result<RunManifest, CliError> {
    let (s, label) = load(&args.common)?;
    let seed = args.common.seed.unwrap_or(s.seed());
    let params = json!({
        "trials": args.trials,
        "step": args.step,
        "tolerance": args.tolerance,
        "corrupt_sign": args.corrupt_sign,
    });
    let run = Run::new(&args.common.out, "check-jacobian", label, params, seed)?;
    execute(run, |run| {
        let report = match check_jacobian(&s, args.trials, seed, args.step, args.corrupt_sign) {
            Ok(r) => r,
            Err(RangingError::SingularGeometry { tag_i, tag_j, range }) => {
                run.write_json("worst_state.json", &StateFile::from_state(s.initial_state()))?;
                return Err(CliError::Jacobian(format!(
                    "singular geometry on edge ({tag_i}, {tag_j}): range {range:e} m"
                )));
            }
            Err(e) => return Err(e.into()),
        };
        let header: Vec<String> = ["trial", "max_abs_error", "max_rel_error"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = report
            .trials
            .iter()
            .map(|t| vec![t.trial.to_string(), fmt_f64(t.max_abs_error), fmt_f64(t.rel_error)])
            .collect();
        run.write_csv("jacobian_check.csv", &header, &rows)?;
        let worst = report.worst();
        println!(
            "max relative error {:e} at trial {} over {} states",
            worst.rel_error,
            worst.trial,
            report.trials.len()
        );
        if worst.rel_error < args.tolerance {
            Ok(())
        } else {
            run.write_json("worst_state.json", &StateFile::from_state(&worst.state))?;
            Err(CliError::Jacobian(format!(
                "max relative error {:e} at trial {} is not below {:e}; state in worst_state.json",
                worst.rel_error, worst.trial, args.tolerance
            )))
        }
    })
}

#[derive(Serialize)]
struct EstimateReport {
    converged: bool,
    iterations: Option<usize>,
    objective: Vec<f64>,
    ranges: Vec<f64>,
    truth: StateFile,
    initial_guess: StateFile,
    estimate: StateFile,
    tangent_error: Vec<f64>,
    squared_error: f64,
}

pub fn estimate(args: &EstimateArgs) -> Result<RunManifest, CliError> {
    let (s, label) = load(&args.common)?;
    let seed = args.common.seed.unwrap_or(s.seed());
    let truth = match &args.state {
        Some(p) => read_state(p, &s)?,
        None => s.initial_state().clone(),
    };
    let params = json!({
        "state": args.state.as_ref().map(|p| p.display().to_string()),
        "prior_sigma": args.prior_sigma,
    });
    let run = Run::new(&args.common.out, "estimate", label, params, seed)?;
    execute(run, |run| {
        if !(args.prior_sigma > 0.0) {
            return Err(CliError::Validation(format!("--prior-sigma must be positive, got {}", args.prior_sigma)));
        }
        let mut rng = trial_rng(seed, 0, 0);
        let y = synthesize(&truth, &s, &mut rng)?;
        let prior = AttitudePrior::sample(&truth, args.prior_sigma, &mut rng)?;
        let x0 = initial_guess(&truth, &prior, &mut rng)?;
        let (est, iterations, objective) = match gauss_newton(&y, &s, &prior, &x0) {
            Ok(e) => (e.state, Some(e.iterations), e.objective),
            Err(EstimatorError::MaxIter { last, .. }) => (*last, None, Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let err = truth.boxminus(&est).map_err(EstimatorError::from)?;
        let mode = s.mode();
        let mut header = vec!["agent".to_string(), "heading".to_string()];
        header.extend(coordinate_names(mode.dim()));
        header.extend(["position_error".to_string(), "heading_error".to_string()]);
        let mut rows = Vec::new();
        for (k, (t, e)) in truth.poses().iter().zip(est.poses()).enumerate() {
            let heading_error = t
                .rotation()
                .transpose()
                .compose(e.rotation())
                .log(mode)
                .map_err(EstimatorError::from)?
                .norm();
            let mut row = vec![(k + 2).to_string(), fmt_f64(e.heading())];
            row.extend(e.translation().iter().map(|&v| fmt_f64(v)));
            row.push(fmt_f64((e.translation() - t.translation()).norm()));
            row.push(fmt_f64(heading_error));
            rows.push(row);
        }
        run.write_csv("estimate.csv", &header, &rows)?;
        println!(
            "{} ; squared tangent error {:.6e}",
            match iterations {
                Some(n) => format!("converged in {n} iterations"),
                None => "stopped at the iteration cap".to_string(),
            },
            err.norm_squared()
        );
        run.write_json(
            "estimate.json",
            &EstimateReport {
                converged: iterations.is_some(),
                iterations,
                objective,
                ranges: y.values.iter().copied().collect(),
                truth: StateFile::from_state(&truth),
                initial_guess: StateFile::from_state(&x0),
                estimate: StateFile::from_state(&est),
                squared_error: err.norm_squared(),
                tangent_error: err.iter().copied().collect(),
            },
        )
    })
}

#[derive(Serialize)]
struct CheckpointJson {
    checkpoint: usize,
    j_est: Option<f64>,
    j_col: f64,
    j_total: Option<f64>,
    mse: f64,
    mean_position_error: f64,
    mean_heading_error: f64,
    trials: usize,
    failed: usize,
    not_converged: usize,
    mean_error: Vec<f64>,
    sample_covariance: Vec<Vec<f64>>,
}

/// Header of `montecarlo.csv`.
pub const MONTE_CARLO_COLUMNS: [&str; 8] = [
    "checkpoint",
    "J_est",
    "J_col",
    "J_total",
    "MSE",
    "mean_pos_err",
    "mean_heading_err",
    "trials_failed",
];

fn write_report(run: &mut Run, report: &MonteCarloReport) -> Result<(), CliError> {
    let header: Vec<String> = MONTE_CARLO_COLUMNS.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = report
        .checkpoints
        .iter()
        .map(|c| {
            vec![
                c.checkpoint.to_string(),
                fmt_f64(c.j_est.value()),
                fmt_f64(c.j_col),
                fmt_f64(c.j_total.value()),
                fmt_f64(c.mse),
                fmt_f64(c.mean_position_error),
                fmt_f64(c.mean_heading_error),
                c.failed.to_string(),
            ]
        })
        .collect();
    run.write_csv("montecarlo.csv", &header, &rows)?;
    let json: Vec<CheckpointJson> = report
        .checkpoints
        .iter()
        .map(|c| CheckpointJson {
            checkpoint: c.checkpoint,
            j_est: c.j_est.finite(),
            j_col: c.j_col,
            j_total: c.j_total.finite(),
            mse: c.mse,
            mean_position_error: c.mean_position_error,
            mean_heading_error: c.mean_heading_error,
            trials: c.trials,
            failed: c.failed,
            not_converged: c.not_converged,
            mean_error: c.mean_error.iter().copied().collect(),
            sample_covariance: matrix_rows(&c.sample_covariance),
        })
        .collect();
    run.write_json(
        "montecarlo.json",
        &json!({ "prior_sigma": report.prior_sigma, "seed": report.seed, "checkpoints": json }),
    )
}

/// `(iteration, state)` checkpoints of a trace.
pub fn trace_checkpoints(
    trace: &DescentTrace,
    count: usize,
    spacing: formation_core::formation_opt::CheckpointSpacing,
) -> Vec<(usize, StateTuple)> {
    trace
        .checkpoints(count, spacing)
        .into_iter()
        .map(|k| {
            let r = &trace.records[k];
            (r.iter, r.state.clone().expect("checkpoints carry states"))
        })
        .collect()
}

pub fn montecarlo(args: &MonteCarloArgs) -> Result<RunManifest, CliError> {
    let (s, label) = load(&args.common)?;
    let seed = args.common.seed.unwrap_or(s.seed());
    if args.trials == 0 {
        return Err(CliError::Validation("--trials must be at least 1".into()));
    }
    if !(args.prior_sigma > 0.0) {
        return Err(CliError::Validation(format!("--prior-sigma must be positive, got {}", args.prior_sigma)));
    }
    let trace = match &args.trace {
        Some(path) => {
            let file: TraceFile = read_json(path)?;
            if file.mode != s.mode() || file.agent_count != s.agent_count() {
                return Err(CliError::Validation(format!(
                    "{}: trace does not match the scenario's mode and agent count",
                    path.display()
                )));
            }
            file.to_trace()?
        }
        None => match descend_with(&s, DescentOptions { snapshot_every: 1 }) {
            Ok(r) => r.trace,
            Err(OptError::Stall { trace, .. }) => *trace,
            Err(OptError::InfiniteStart) => return Err(unobservable(s.initial_state(), &s)),
            Err(e) => return Err(e.into()),
        },
    };
    let checkpoints = trace_checkpoints(&trace, args.checkpoints, args.spacing.into());
    if checkpoints.is_empty() {
        return Err(CliError::Validation("trace has no checkpoint states".into()));
    }
    let params = json!({
        "trace": args.trace.as_ref().map(|p| p.display().to_string()),
        "trials": args.trials,
        "prior_sigma": args.prior_sigma,
        "checkpoints": args.checkpoints,
        "spacing": format!("{:?}", args.spacing).to_lowercase(),
    });
    let run = Run::new(&args.common.out, "montecarlo", label, params, seed)?;
    execute(run, |run| {
        let report = monte_carlo(&checkpoints, &s, args.prior_sigma, args.trials, seed)?;
        write_report(run, &report)?;
        println!("checkpoint      J_total          MSE   mean_pos_err  failed");
        for c in &report.checkpoints {
            println!(
                "{:>10} {:>12.6} {:>12.6} {:>14.6} {:>7}",
                c.checkpoint,
                c.j_total.value(),
                c.mse,
                c.mean_position_error,
                c.failed
            );
        }
        match report.first_failure() {
            Some(c) => Err(CliError::MonteCarlo {
                checkpoint: c.checkpoint,
                failed: c.failed,
                trials: c.trials,
            }),
            None => Ok(()),
        }
    })
}

#[derive(Serialize)]
struct EllipseJson {
    agent: usize,
    center: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    semi_axes: Vec<f64>,
    axis_ratio: f64,
    area: f64,
}

pub fn crlb_cmd(args: &StateArgs) -> Result<RunManifest, CliError> {
    let (s, label) = load(&args.common)?;
    let seed = args.common.seed.unwrap_or(s.seed());
    let x = match &args.state {
        Some(p) => read_state(p, &s)?,
        None => s.initial_state().clone(),
    };
    let params = json!({ "state": args.state.as_ref().map(|p| p.display().to_string()) });
    let run = Run::new(&args.common.out, "crlb", label, params, seed)?;
    execute(run, |run| {
        let ellipses = crlb(&x, &s)?;
        let mut header = vec!["agent".to_string()];
        header.extend(coordinate_names(s.mode().dim()));
        run.write_csv("crlb.csv", &header, &ellipse_rows(None, &ellipses))?;
        let json: Vec<EllipseJson> = ellipses
            .iter()
            .map(|e| EllipseJson {
                agent: e.agent_id,
                center: e.center.iter().copied().collect(),
                covariance: matrix_rows(&e.covariance),
                semi_axes: e.semi_axes().iter().copied().collect(),
                axis_ratio: e.axis_ratio(),
                area: e.area(),
            })
            .collect();
        for e in &json {
            println!("agent {}: area {:.6e} m², axis ratio {:.3}", e.agent, e.area, e.axis_ratio);
        }
        run.write_json("crlb.json", &json)
    })
}

pub fn presets(args: &PresetsArgs) -> Result<(), CliError> {
    match &args.export {
        None => {
            for name in NAMES {
                println!("{name}");
            }
            Ok(())
        }
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| CliError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            for name in NAMES {
                write_scenario(&preset(name)?, dir.join(format!("{name}.json")))?;
            }
            Ok(())
        }
    }
}
