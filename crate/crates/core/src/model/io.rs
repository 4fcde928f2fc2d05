//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"XMC1" | u32 version | u64 config_len | config JSON | u64 count | count x f64
//! ```
//!
//! Values follow [`ModelParameters::tensors`] order.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParameters;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XMC1";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(config: &ModelConfig, params: &ModelParameters) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(config)?;
    let flat = params.to_flat();
    let mut out = Vec::with_capacity(24 + json.len() + 8 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    match end {
        Some(e) => {
            let s = &bytes[*at..e];
            *at = e;
            Ok(s)
        }
        None => Err(format!("truncated while reading {what}")),
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<(ModelConfig, ModelParameters), String> {
    let mut at = 0;
    if take(bytes, &mut at, 4, "magic")? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8, "config length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| "config length overflow".to_string())?;
    let config: ModelConfig =
        serde_json::from_slice(take(bytes, &mut at, len, "config")?).map_err(|e| format!("config: {e}"))?;
    config.validate().map_err(|e| e.to_string())?;
    let count = u64::from_le_bytes(take(bytes, &mut at, 8, "value count")?.try_into().unwrap());
    let expected: usize = ModelParameters::expected_shapes(&config).iter().map(|s| s[0] * s[1]).sum();
    if count != expected as u64 {
        return Err(format!("value count {count} does not match config ({expected})"));
    }
    if bytes.len() - at != expected * 8 {
        return Err(format!(
            "expected {} payload bytes, found {}",
            expected * 8,
            bytes.len() - at
        ));
    }
    let values: Vec<f64> = bytes[at..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ModelParameters::from_flat(&config, &values).map_err(|e| e.to_string())?;
    if !params.is_finite() {
        return Err("non-finite parameter values".into());
    }
    Ok((config, params))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelParameters)> {
    parse(bytes).map_err(|msg| Error::Checkpoint {
        path: "<memory>".into(),
        msg,
    })
}

pub fn save(path: &Path, config: &ModelConfig, params: &ModelParameters) -> Result<()> {
    fs::write(path, to_bytes(config, params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelParameters)> {
    let bytes = fs::read(path)?;
    parse(&bytes).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}
