//! Versioned binary checkpoints.
//!
//! ```text
//! magic    8 bytes  "SDSSLCKP"
//! version  u32 LE
//! hlen     u64 LE
//! header   hlen bytes of JSON (config, step, tensor table, data digest)
//! data     f64 LE values of every tensor, in header order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::framework::Framework;
use crate::params::ParamSet;
use crate::train::TrainerState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SDSSLCKP";
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    framework: Framework,
    step: usize,
    total_steps: usize,
    config: ExperimentConfig,
    adam_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
    data_sha256: String,
}

fn groups(state: &TrainerState) -> Vec<(&'static str, &ParamSet)> {
    let mut g = vec![("student", &state.student), ("buffers", &state.buffers)];
    if let Some(t) = &state.teacher {
        g.push(("teacher", t));
    }
    g.push(("adam_m", &state.optimizer.exp_avg));
    g.push(("adam_v", &state.optimizer.exp_avg_sq));
    g
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(state: &TrainerState, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    for (group, set) in groups(state) {
        for (name, m) in set.iter() {
            tensors.push(TensorEntry {
                group: group.into(),
                name: name.into(),
                rows: m.nrows(),
                cols: m.ncols(),
            });
            for v in m.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        framework: state.framework(),
        step: state.schedule.step,
        total_steps: state.schedule.total_steps,
        config: state.config.clone(),
        adam_steps: state.optimizer.steps.clone(),
        tensors,
        data_sha256: hex(&Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut bytes = Vec::with_capacity(PREAMBLE + json.len() + data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&data);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.part");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn format_error(found: Option<u32>, message: impl Into<String>) -> Error {
    Error::Format {
        found,
        expected: FORMAT_VERSION,
        message: message.into(),
    }
}

/// Reads a checkpoint; nothing is returned unless the whole file is valid.
pub fn load_checkpoint(path: &Path) -> Result<TrainerState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = |m: &str| format!("{}: {m}", path.display());
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(format_error(None, ctx("not a checkpoint file")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format_error(
            Some(version),
            ctx("unsupported checkpoint version"),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if hlen > bytes.len() - PREAMBLE {
        return Err(format_error(
            Some(version),
            ctx("header length exceeds file size"),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + hlen])
        .map_err(|e| format_error(Some(version), ctx(&format!("corrupt header: {e}"))))?;
    let data = &bytes[PREAMBLE + hlen..];
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if data.len() != expected {
        return Err(format_error(
            Some(version),
            ctx(&format!(
                "{} data bytes, header describes {expected}",
                data.len()
            )),
        ));
    }
    if hex(&Sha256::digest(data)) != header.data_sha256 {
        return Err(format_error(
            Some(version),
            ctx("tensor data checksum mismatch"),
        ));
    }
    if header.config.framework != header.framework {
        return Err(format_error(
            Some(version),
            ctx("framework tag disagrees with stored config"),
        ));
    }

    let mut state = TrainerState::new(header.config, header.total_steps).map_err(|e| {
        format_error(
            Some(version),
            ctx(&format!("stored config is invalid: {e}")),
        )
    })?;
    let mut loaded: BTreeMap<&str, ParamSet> = BTreeMap::new();
    let mut offset = 0;
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let values: Vec<f64> = data[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 8 * n;
        let m = Mat::from_shape_vec((t.rows, t.cols), values).expect("length checked");
        loaded
            .entry(t.group.as_str())
            .or_default()
            .insert(t.name.clone(), m);
    }
    let mut take = |group: &str, reference: Option<&ParamSet>| -> Result<ParamSet> {
        let set = loaded.remove(group).unwrap_or_default();
        if let Some(r) = reference {
            let same = set.len() == r.len()
                && r.iter()
                    .all(|(n, v)| set.get(n).is_ok_and(|m| m.dim() == v.dim()));
            if !same {
                return Err(format_error(
                    Some(version),
                    ctx(&format!("`{group}` tensors do not match the stored config")),
                ));
            }
        }
        Ok(set)
    };
    let student = take("student", Some(&state.student))?;
    let buffers = take("buffers", Some(&state.buffers))?;
    let teacher = match &state.teacher {
        Some(t) => Some(take("teacher", Some(t))?),
        None => None,
    };
    let adam_m = take("adam_m", None)?;
    let adam_v = take("adam_v", None)?;
    if !loaded.is_empty() {
        return Err(format_error(Some(version), ctx("unexpected tensor groups")));
    }
    state.student = student;
    state.buffers = buffers;
    state.teacher = teacher;
    state.optimizer.exp_avg = adam_m;
    state.optimizer.exp_avg_sq = adam_v;
    state.optimizer.steps = header.adam_steps;
    state.schedule.step = header.step;
    Ok(state)
}
