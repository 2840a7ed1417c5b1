//! Model checkpoints and training reports.
//!
//! A checkpoint is `#NETCFG {json}`, `#MODEL {json}` (branch and window
//! lengths), `#NORM {json}`, then one `name;rows,cols;base64` line per
//! parameter tensor holding little-endian f64 values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use phrc_core::intent::{BranchModel, EpochStats, ModelConfig, Normalizer, TrainReport};
use phrc_core::nn::NetConfig;
use phrc_core::trajectory::Branch;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    branch: Branch,
    obs_len: usize,
    fut_len: usize,
    #[serde(default)]
    dt: Option<f64>,
}

/// A model plus the sample period of the corpus it was trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: BranchModel,
    pub dt: Option<f64>,
}

fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_f64(text: &str) -> Option<Vec<f64>> {
    let bytes = STANDARD.decode(text).ok()?;
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    )
}

pub fn model_to_string(model: &BranchModel, dt: Option<f64>) -> String {
    let cfg = model.config();
    let header = ModelHeader {
        branch: cfg.branch,
        obs_len: cfg.obs_len,
        fut_len: cfg.fut_len,
        dt,
    };
    let mut out = String::new();
    writeln!(out, "#NETCFG {}", serde_json::to_string(&cfg.net).expect("plain struct")).unwrap();
    writeln!(out, "#MODEL {}", serde_json::to_string(&header).expect("plain struct")).unwrap();
    writeln!(out, "#NORM {}", serde_json::to_string(model.normalizer()).expect("plain struct")).unwrap();
    for (_, t) in model.store().iter() {
        writeln!(out, "{};{},{};{}", t.name, t.value.rows(), t.value.cols(), encode_f64(t.value.data())).unwrap();
    }
    out
}

pub fn save_model(path: &Path, model: &BranchModel, dt: Option<f64>) -> Result<()> {
    fs::write(path, model_to_string(model, dt)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text, path)
}

fn tagged<'a, T: serde::de::DeserializeOwned>(line: Option<&'a str>, tag: &str, n: usize, path: &Path) -> Result<T> {
    let json = line
        .and_then(|l| l.strip_prefix(tag))
        .ok_or_else(|| Error::format(path, n, format!("expected `{tag}{{json}}`")))?;
    serde_json::from_str(json).map_err(|e| Error::json(format!("{} line {n}", path.display()), e))
}

/// Parse checkpoint text; `path` is only used in error messages.
pub fn parse_model(text: &str, path: &Path) -> Result<Checkpoint> {
    let mut lines = text.lines();
    let net: NetConfig = tagged(lines.next(), "#NETCFG ", 1, path)?;
    let header: ModelHeader = tagged(lines.next(), "#MODEL ", 2, path)?;
    let norm: Normalizer = tagged(lines.next(), "#NORM ", 3, path)?;
    let config = ModelConfig {
        branch: header.branch,
        net,
        obs_len: header.obs_len,
        fut_len: header.fut_len,
    };
    // Initial weights are overwritten below; the seed is irrelevant.
    let mut model = BranchModel::new(config, 0)?;
    model.set_normalizer(norm)?;
    let mut seen = vec![false; model.store().len()];
    for (i, line) in lines.enumerate() {
        let n = i + 4;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(';');
        let (Some(name), Some(shape), Some(data), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format(path, n, "expected `name;rows,cols;base64`"));
        };
        let shape: Vec<usize> = shape
            .split(',')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| Error::format(path, n, "shape must be `rows,cols`"))?;
        let [rows, cols] = shape[..] else {
            return Err(Error::format(path, n, "shape must be `rows,cols`"));
        };
        let values = decode_f64(data).ok_or_else(|| Error::format(path, n, "invalid base64 tensor data"))?;
        let id = model
            .store()
            .find(name)
            .ok_or_else(|| Error::format(path, n, format!("unknown parameter `{name}`")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::format(path, n, format!("parameter `{name}` appears twice")));
        }
        model.store_mut().load(name, [rows, cols], values)?;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = model.store().iter().nth(missing).map(|(_, t)| t.name.clone()).unwrap_or_default();
        return Err(Error::format(path, 0, format!("parameter `{name}` is missing")));
    }
    Ok(Checkpoint { model, dt: header.dt })
}

pub fn report_to_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,loss,kl,recon\n");
    for EpochStats { epoch, loss, kl, recon } in &report.epochs {
        writeln!(out, "{epoch},{loss},{kl},{recon}").unwrap();
    }
    out
}

pub fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    fs::write(path, report_to_csv(report)).map_err(|e| Error::io(path, e))
}
