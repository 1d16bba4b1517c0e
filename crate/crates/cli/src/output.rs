//! Output files: CSV with full float precision, JSON documents and the run manifest.

use crate::error::CliError;
use formation_core::formation_opt::{DescentTrace, Termination, TraceRecord};
use formation_core::manifold::{GroupMode, StateTuple};
use formation_core::scenario::{state_from_document, state_to_document, PoseDocument, Scenario};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A state on its own, as written to `final_state.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFile {
    pub mode: GroupMode,
    pub agent_count: usize,
    pub poses: Vec<PoseDocument>,
}

impl StateFile {
    pub fn from_state(x: &StateTuple) -> Self {
        StateFile {
            mode: x.mode(),
            agent_count: x.agent_count(),
            poses: state_to_document(x),
        }
    }

    pub fn to_state(&self) -> Result<StateTuple, CliError> {
        Ok(state_from_document(self.mode, self.agent_count, &self.poses)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecordFile {
    pub iter: usize,
    pub j_est: f64,
    pub j_col: f64,
    pub j_total: f64,
    pub gradient_norm: f64,
    pub step_scale: f64,
    pub state: Option<Vec<PoseDocument>>,
}

/// A descent trace with per-iterate states, as written to `trace.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFile {
    pub mode: GroupMode,
    pub agent_count: usize,
    pub termination: String,
    pub records: Vec<TraceRecordFile>,
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::Converged => "converged",
        Termination::MaxIterations => "max_iterations",
        Termination::Stalled => "stalled",
    }
}

impl TraceFile {
    pub fn from_trace(trace: &DescentTrace, mode: GroupMode, agent_count: usize) -> Self {
        TraceFile {
            mode,
            agent_count,
            termination: termination_name(trace.termination).to_string(),
            records: trace
                .records
                .iter()
                .map(|r| TraceRecordFile {
                    iter: r.iter,
                    j_est: r.j_est,
                    j_col: r.j_col,
                    j_total: r.j_total,
                    gradient_norm: r.gradient_norm,
                    step_scale: r.step_scale,
                    state: r.state.as_ref().map(state_to_document),
                })
                .collect(),
        }
    }

    pub fn to_trace(&self) -> Result<DescentTrace, CliError> {
        let termination = match self.termination.as_str() {
            "converged" => Termination::Converged,
            "max_iterations" => Termination::MaxIterations,
            "stalled" => Termination::Stalled,
            other => {
                return Err(CliError::Validation(format!("trace.termination: unknown value {other:?}")));
            }
        };
        let records = self
            .records
            .iter()
            .map(|r| {
                Ok(TraceRecord {
                    iter: r.iter,
                    j_est: r.j_est,
                    j_col: r.j_col,
                    j_total: r.j_total,
                    gradient_norm: r.gradient_norm,
                    step_scale: r.step_scale,
                    state: match &r.state {
                        Some(docs) => Some(state_from_document(self.mode, self.agent_count, docs)?),
                        None => None,
                    },
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(DescentTrace { records, termination })
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads a state file and checks it against the scenario.
pub fn read_state(path: &Path, scenario: &Scenario) -> Result<StateTuple, CliError> {
    let file: StateFile = read_json(path)?;
    if file.mode != scenario.mode() || file.agent_count != scenario.agent_count() {
        return Err(CliError::Validation(format!(
            "{}: state has mode {} with {} agents, scenario has mode {} with {}",
            path.display(),
            file.mode,
            file.agent_count,
            scenario.mode(),
            scenario.agent_count()
        )));
    }
    file.to_state()
}

/// `RunManifest`, written to `manifest.json` in the output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub scenario: String,
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub status: String,
    pub exit_code: i32,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

/// Collects output files of one command and writes the manifest at the end.
pub struct Run {
    dir: PathBuf,
    command: String,
    scenario: String,
    parameters: serde_json::Value,
    seed: u64,
    outputs: Vec<String>,
    start: Instant,
}

impl Run {
    pub fn new(
        dir: &Path,
        command: &str,
        scenario: String,
        parameters: serde_json::Value,
        seed: u64,
    ) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Run {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            scenario,
            parameters,
            seed,
            outputs: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.record(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(header).map_err(|e| csv_err(&path, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(io_err(&path))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.record(name);
        let text = serde_json::to_string_pretty(value).expect("output serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    /// Writes `manifest.json` with the outcome of `result` and returns the manifest.
    pub fn finish(self, result: &Result<(), CliError>) -> Result<RunManifest, CliError> {
        let (status, exit_code) = match result {
            Ok(()) => ("ok".to_string(), crate::error::exit::OK),
            Err(e) => (format!("failed: {e}"), e.exit_code()),
        };
        let mut outputs = self.outputs;
        outputs.push("manifest.json".into());
        let manifest = RunManifest {
            command: self.command,
            scenario: self.scenario,
            parameters: self.parameters,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            status,
            exit_code,
            outputs,
            duration_seconds: self.start.elapsed().as_secs_f64(),
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(manifest)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    }
}
