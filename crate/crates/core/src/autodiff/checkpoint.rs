//! Checkpoint serialization.
//!
//! A checkpoint is a single JSON document:
//!
//! ```json
//! {"format_version": 1,
//!  "params": [{"name": "...", "shape": [..], "data": [..]}, ...],
//!  "optimizer_state": {"t": 0, "moments": [{"name", "m", "v"}, ...]} | null,
//!  "model_config": {...} | null}
//! ```
//!
//! Parameters appear in deterministic name order and floats are written with
//! 17 significant digits so values round-trip exactly. `model_config` makes a
//! checkpoint self-describing for evaluation.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::jsonio::{fmt_f64_array, json_escape};

use super::adam::AdamState;
use super::params::ParameterStore;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
struct CkParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct CkMoment {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct CkOptimizer {
    t: u64,
    moments: Vec<CkMoment>,
}

#[derive(Debug, Deserialize)]
struct CkFile {
    format_version: u32,
    params: Vec<CkParam>,
    optimizer_state: Option<CkOptimizer>,
    #[serde(default)]
    model_config: Option<serde_json::Value>,
}

/// `(name, first moment, second moment)` rows of saved optimizer state.
pub type MomentRows = Vec<(String, Vec<f64>, Vec<f64>)>;

/// A parsed checkpoint, decoupled from any live model.
#[derive(Debug)]
pub struct Checkpoint {
    pub format_version: u32,
    /// `(name, shape, data)` in the file's (name) order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    /// `(t, moment rows)` if the file carried optimizer state.
    pub optimizer: Option<(u64, MomentRows)>,
    pub model_config: Option<serde_json::Value>,
}

impl Checkpoint {
    /// Copies parameter values into `store`, matching entries by name.
    pub fn apply_params(&self, store: &mut ParameterStore) -> Result<()> {
        for (name, shape, data) in &self.params {
            let entry = store
                .get_mut(name)
                .ok_or_else(|| Error::InvalidParam(format!("checkpoint has unknown parameter {name:?}")))?;
            if &entry.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name:?}: checkpoint shape {shape:?}, store shape {:?}",
                    entry.shape
                )));
            }
            entry.data.copy_from_slice(data);
        }
        Ok(())
    }

    /// Rebuilds Adam moments aligned to `store` order.
    pub fn adam_state(&self, store: &ParameterStore) -> Result<Option<AdamState>> {
        let Some((t, moments)) = &self.optimizer else {
            return Ok(None);
        };
        let mut state = AdamState::new(store);
        state.t = *t;
        for (name, m, v) in moments {
            let idx = store
                .index_of(name)
                .ok_or_else(|| Error::InvalidParam(format!("optimizer state for unknown parameter {name:?}")))?;
            if m.len() != store.entry(idx).data.len() || v.len() != m.len() {
                return Err(Error::ShapeMismatch(format!("optimizer moments for {name:?} have wrong length")));
            }
            state.m[idx].copy_from_slice(m);
            state.v[idx].copy_from_slice(v);
        }
        Ok(Some(state))
    }
}

/// Renders a checkpoint document; see the module docs for the layout.
pub fn write_checkpoint_string(
    store: &ParameterStore,
    adam: Option<&AdamState>,
    model_config: Option<&serde_json::Value>,
) -> String {
    // Name order, independent of insertion order.
    let mut order: Vec<usize> = (0..store.num_entries()).collect();
    order.sort_by(|&a, &b| store.entry(a).name.cmp(&store.entry(b).name));

    let mut s = String::new();
    s.push_str(&format!("{{\"format_version\":{CHECKPOINT_FORMAT_VERSION},\"params\":["));
    for (i, &k) in order.iter().enumerate() {
        let e = store.entry(k);
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!(
            "{{\"name\":{},\"shape\":{:?},\"data\":{}}}",
            json_escape(&e.name),
            e.shape,
            fmt_f64_array(&e.data)
        ));
    }
    s.push_str("],\"optimizer_state\":");
    match adam {
        None => s.push_str("null"),
        Some(st) => {
            s.push_str(&format!("{{\"t\":{},\"moments\":[", st.t));
            for (i, &k) in order.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                s.push_str(&format!(
                    "{{\"name\":{},\"m\":{},\"v\":{}}}",
                    json_escape(&store.entry(k).name),
                    fmt_f64_array(&st.m[k]),
                    fmt_f64_array(&st.v[k])
                ));
            }
            s.push_str("]}");
        }
    }
    s.push_str(",\"model_config\":");
    match model_config {
        None => s.push_str("null"),
        Some(v) => s.push_str(&serde_json::to_string(v).expect("config serializes")),
    }
    s.push_str("}\n");
    s
}

pub fn write_checkpoint(
    path: &Path,
    store: &ParameterStore,
    adam: Option<&AdamState>,
    model_config: Option<&serde_json::Value>,
) -> Result<()> {
    std::fs::write(path, write_checkpoint_string(store, adam, model_config))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let file: CkFile = serde_json::from_str(&text)?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::InvalidParam(format!(
            "unsupported checkpoint format_version {}",
            file.format_version
        )));
    }
    Ok(Checkpoint {
        format_version: file.format_version,
        params: file.params.into_iter().map(|p| (p.name, p.shape, p.data)).collect(),
        optimizer: file.optimizer_state.map(|o| {
            (o.t, o.moments.into_iter().map(|m| (m.name, m.m, m.v)).collect())
        }),
        model_config: file.model_config,
    })
}
