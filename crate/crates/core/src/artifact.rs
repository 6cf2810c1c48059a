//! Helpers for the JSON artifact files written by each stage.
//!
//! Objects are written through `serde_json::Value`, whose map type keeps keys
//! sorted, so every artifact is canonical.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde_json::Value;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

impl ArtifactError {
    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        ArtifactError::Format { path: path.display().to_string(), msg: msg.into() }
    }
}

pub fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io { path: path.display().to_string(), source }
}

/// Write a JSON value followed by a newline.
pub fn write_json(path: &Path, value: &Value) -> Result<(), ArtifactError> {
    let mut s = serde_json::to_string(value).map_err(|source| ArtifactError::Json {
        path: path.display().to_string(),
        source,
    })?;
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_json(path: &Path) -> Result<Value, ArtifactError> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|source| ArtifactError::Json { path: path.display().to_string(), source })
}

/// Write JSON lines, one value per line.
pub fn write_jsonl<'a>(path: &Path, values: impl IntoIterator<Item = &'a Value>) -> Result<(), ArtifactError> {
    let mut buf = Vec::new();
    for v in values {
        serde_json::to_writer(&mut buf, v)
            .map_err(|source| ArtifactError::Json { path: path.display().to_string(), source })?;
        buf.write_all(b"\n").map_err(io_err(path))?;
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Value>, ArtifactError> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ArtifactError::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Round to 12 significant digits; used where a file promises fixed float precision.
pub fn fixed(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float parses")
}

pub fn floats_to_value<T: Scalar>(xs: &[T]) -> Value {
    Value::Array(xs.iter().map(|x| Value::from(x.as_f64())).collect())
}

pub fn value_to_floats<T: Scalar>(path: &Path, v: &Value) -> Result<Vec<T>, ArtifactError> {
    v.as_array()
        .ok_or_else(|| ArtifactError::format(path, "expected an array of numbers"))?
        .iter()
        .map(|x| {
            x.as_f64().map(T::of).ok_or_else(|| ArtifactError::format(path, "expected a number"))
        })
        .collect()
}

/// Fetch a required field.
pub fn field<'a>(path: &Path, v: &'a Value, key: &str) -> Result<&'a Value, ArtifactError> {
    v.get(key).ok_or_else(|| ArtifactError::format(path, format!("missing field {key:?}")))
}

pub fn field_u64(path: &Path, v: &Value, key: &str) -> Result<u64, ArtifactError> {
    field(path, v, key)?.as_u64().ok_or_else(|| ArtifactError::format(path, format!("{key:?} is not an integer")))
}

pub fn field_f64(path: &Path, v: &Value, key: &str) -> Result<f64, ArtifactError> {
    field(path, v, key)?.as_f64().ok_or_else(|| ArtifactError::format(path, format!("{key:?} is not a number")))
}

pub fn field_str<'a>(path: &Path, v: &'a Value, key: &str) -> Result<&'a str, ArtifactError> {
    field(path, v, key)?.as_str().ok_or_else(|| ArtifactError::format(path, format!("{key:?} is not a string")))
}

/// Check the `format`/`version` header of a model file.
pub fn check_header(path: &Path, v: &Value, format: &str, version: u64) -> Result<(), ArtifactError> {
    let f = field_str(path, v, "format")?;
    if f != format {
        return Err(ArtifactError::format(path, format!("expected format {format:?}, found {f:?}")));
    }
    let ver = field_u64(path, v, "version")?;
    if ver != version {
        return Err(ArtifactError::format(path, format!("unsupported version {ver}")));
    }
    Ok(())
}
