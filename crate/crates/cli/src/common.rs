use std::fs;
use std::path::{Path, PathBuf};

use edmkit::edm::{DistanceMatrix, Mask};
use edmkit::io::{read_masks, write_atomic, EdmBatch};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Input { path: PathBuf, source: edmkit::Error },

    #[error(transparent)]
    Core(#[from] edmkit::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for usage and parameter errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(edmkit::Error::InvalidParameter(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn required<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| usage(format!("{flag} is required (flag or config file)")))
}

/// One-line JSON summary plus the items that failed.
pub struct Outcome {
    pub summary: Value,
    pub failed: Vec<String>,
}

impl Outcome {
    pub fn ok(summary: Value) -> Self {
        Self {
            summary,
            failed: Vec::new(),
        }
    }
}

/// Copy every `Some` flag over the config value.
macro_rules! overlay {
    ($cfg:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = v; } )*
    };
}

/// As `overlay!` for config fields that are themselves optional.
macro_rules! overlay_opt {
    ($cfg:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = Some(v); } )*
    };
}

pub(crate) use {overlay, overlay_opt};

/// Read a JSON config for `command`. A `command` key, as written in
/// sidecars, must match.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| usage(format!("config {} must be a JSON object", path.display())))?;
    if let Some(c) = obj.remove("command") {
        if c.as_str() != Some(command) {
            return Err(usage(format!(
                "config {} is for command {c}, not {command}",
                path.display()
            )));
        }
    }
    serde_json::from_value(value).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Write the resolved config next to `out`; it can be passed back with
/// `--config` to rerun the command.
pub fn write_sidecar<T: Serialize>(out: &Path, command: &str, cfg: &T) -> CliResult<PathBuf> {
    let mut obj = Map::new();
    obj.insert("command".into(), command.into());
    if let Value::Object(fields) = serde_json::to_value(cfg)? {
        obj.extend(fields);
    }
    let path = sidecar_path(out);
    write_json(&path, &Value::Object(obj))?;
    Ok(path)
}

pub fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// `<out>.report.json` unless given.
pub fn report_path(out: &Path, report: &Option<PathBuf>) -> PathBuf {
    report.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".report.json");
        PathBuf::from(s)
    })
}

fn input_err(path: &Path) -> impl FnOnce(edmkit::Error) -> CliError + '_ {
    move |source| CliError::Input {
        path: path.to_owned(),
        source,
    }
}

pub fn read_edmd(path: &Path) -> CliResult<EdmBatch> {
    EdmBatch::read(path).map_err(input_err(path))
}

pub fn read_matrices(path: &Path) -> CliResult<(EdmBatch, Vec<DistanceMatrix>)> {
    let batch = read_edmd(path)?;
    let ms = batch.distance_matrices().map_err(input_err(path))?;
    if ms.is_empty() {
        return Err(usage(format!("{} holds no matrices", path.display())));
    }
    Ok((batch, ms))
}

/// Masks for `count` matrices of size `n`: one mask per matrix, or a single
/// mask used for all of them.
pub fn read_masks_for(path: &Path, count: usize, n: usize) -> CliResult<Vec<Mask>> {
    let masks = read_masks(path).map_err(input_err(path))?;
    if masks.iter().any(|m| m.n() != n) {
        return Err(usage(format!("{}: masks are not {n}x{n}", path.display())));
    }
    match masks.len() {
        1 => Ok(vec![masks[0].clone(); count]),
        c if c == count => Ok(masks),
        c => Err(usage(format!("{}: {c} masks for {count} matrices", path.display()))),
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Mean and standard error of the mean.
pub fn mean_err(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// JSON number, or null when not finite.
pub fn finite(v: f64) -> Value {
    if v.is_finite() {
        v.into()
    } else {
        Value::Null
    }
}

pub fn parse_hurst(s: &str) -> Result<f64, String> {
    let h: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if h > 0.0 && h < 1.0 {
        Ok(h)
    } else {
        Err(format!("Hurst exponent must lie in (0, 1), got {h}"))
    }
}

pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("value must lie in [0, 1], got {v}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hurst_range() {
        assert!(parse_hurst("0.5").is_ok());
        assert!(parse_hurst("1.5").is_err());
        assert!(parse_hurst("0").is_err());
        assert!(parse_hurst("x").is_err());
    }

    #[test]
    fn standard_error() {
        let (m, e) = mean_err(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((e - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_err(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn config_command_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"command": "mask", "seed": 3}"#).unwrap();
        #[derive(Default, serde::Deserialize)]
        #[serde(default, deny_unknown_fields)]
        struct C {
            seed: u64,
        }
        assert_eq!(load_config::<C>(Some(&p), "mask").unwrap().seed, 3);
        assert!(load_config::<C>(Some(&p), "generate").is_err());
        fs::write(&p, r#"{"sead": 3}"#).unwrap();
        assert!(load_config::<C>(Some(&p), "mask").is_err());
    }
}
