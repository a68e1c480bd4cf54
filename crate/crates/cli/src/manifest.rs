use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

/// Objective values of one registration, one list per pyramid level.
#[derive(Debug, Serialize)]
pub struct TraceRecord {
    pub name: String,
    pub levels: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
}

#[derive(Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one invocation, written next to its primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub threads: usize,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: BTreeMap<String, Value>,
    pub outputs: BTreeMap<String, Value>,
    /// Wall-clock seconds per stage, in execution order.
    pub timings: Vec<StageTiming>,
    pub objective_traces: Vec<TraceRecord>,
    pub results: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            threads: rayon::current_num_threads(),
            seed: None,
            config: Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: Vec::new(),
            objective_traces: Vec::new(),
            results: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, key: &str, value: impl Serialize) {
        self.inputs.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn output(&mut self, key: &str, value: impl Serialize) {
        self.outputs.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) {
        self.results.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    /// Runs `f` and records its duration under `stage`.
    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn write(&self, output: &Path) -> lgefuse::Result<PathBuf> {
        let path = Self::path_for(output);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| lgefuse::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}
