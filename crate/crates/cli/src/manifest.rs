use std::fs;
use std::path::{Path, PathBuf};

use gcp_smd::data::{SyntheticSpec, TraceFormat};
use gcp_smd::solver::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const GAMMA_NOTE: &str = "gamma data use shape 1 and scale M_i (mean M_i)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Input {
    Synthetic {
        spec: SyntheticSpec,
    },
    File {
        path: PathBuf,
        shape: Option<Vec<usize>>,
    },
}

/// Everything needed to rerun a command, with no defaults left implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub input: Input,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub truth: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_format: Option<TraceFormat>,
    pub outputs: Vec<PathBuf>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, input: Input) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            input,
            solver: None,
            methods: Vec::new(),
            threshold: None,
            truth: Vec::new(),
            seeds: Vec::new(),
            trace_format: None,
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| {
            CliError::Data(gcp_smd::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Data(gcp_smd::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Data(gcp_smd::Error::Serialization(format!(
                "{}: {e}",
                path.display()
            )))
        })
    }
}
