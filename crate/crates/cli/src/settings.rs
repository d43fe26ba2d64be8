//! Config-file merging and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

fn merge(base: &mut Map<String, Value>, over: Map<String, Value>) {
    for (k, v) in over {
        base.insert(k, v);
    }
}

fn read_config(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    // a run manifest can be fed back in; its resolved config is what counts
    let value = match value {
        Value::Object(mut m) if m.contains_key("subcommand") && m.contains_key("config") => {
            m.remove("config").unwrap_or(Value::Null)
        }
        v => v,
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Data(format!("{}: config must be a JSON object", path.display()))),
    }
}

/// Defaults, then the `--config` file, then explicitly given flags.
pub fn resolve<S, F>(config: Option<&Path>, flags: &F) -> Result<S, CliError>
where
    S: DeserializeOwned + Serialize + Default,
    F: Serialize,
{
    let mut merged = match serde_json::to_value(S::default()).expect("defaults serialize") {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    if let Some(p) = config {
        merge(&mut merged, read_config(p)?);
    }
    if let Value::Object(m) = serde_json::to_value(flags).expect("flags serialize") {
        merge(&mut merged, m.into_iter().filter(|(_, v)| !v.is_null()).collect());
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_ms: u64,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_ms: 0,
        }
    }

    pub fn inputs(mut self, paths: impl IntoIterator<Item = PathBuf>) -> Self {
        self.inputs.extend(paths);
        self
    }

    pub fn outputs(mut self, paths: impl IntoIterator<Item = PathBuf>) -> Self {
        self.outputs.extend(paths);
        self
    }

    /// Writes via a temporary file and a rename so readers never see a
    /// partial manifest.
    pub fn write(mut self, path: &Path, elapsed: Duration) -> Result<(), CliError> {
        self.wall_ms = elapsed.as_millis() as u64;
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        write_atomic(path, text.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::Data(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `<artifact>.manifest.json`, beside the artifact.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
