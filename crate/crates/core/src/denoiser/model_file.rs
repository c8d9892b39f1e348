//! `CFDN1` model files: magic, one-line JSON header, little-endian f32 weights.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::convnet::{ConvNet, LayerDesc};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

pub const MODEL_MAGIC: &[u8; 5] = b"CFDN1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleHeader {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub channels: usize,
    pub kernel: usize,
    pub padding: String,
    pub activation: String,
    pub time_input: String,
    pub layers: Vec<LayerDesc>,
    /// Parameter order: per layer, weights `[out][in][ky][kx]` then biases.
    pub param_count: usize,
    pub schedule: ScheduleHeader,
}

impl ModelHeader {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "model",
        detail: detail.into(),
    }
}

pub fn write_model<T: Scalar>(path: &Path, net: &ConvNet<T>, schedule: &NoiseSchedule) -> Result<()> {
    if net.schedule_steps() != schedule.steps() {
        return Err(Error::param("network and schedule disagree on T"));
    }
    let header = ModelHeader {
        channels: net.image_channels(),
        kernel: LayerDesc::KERNEL,
        padding: "reflect".into(),
        activation: "silu".into(),
        time_input: "t/T channel".into(),
        layers: net.layers().to_vec(),
        param_count: net.param_count(),
        schedule: ScheduleHeader {
            steps: schedule.steps(),
            beta_start: schedule.beta_start(),
            beta_end: schedule.beta_end(),
        },
    };
    let json = serde_json::to_string(&header).map_err(|e| format_err(e.to_string()))?;
    let mut bytes = Vec::with_capacity(MODEL_MAGIC.len() + json.len() + 1 + 4 * net.param_count());
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(json.as_bytes());
    bytes.push(b'\n');
    for p in net.params() {
        bytes.extend_from_slice(&(p.to_f64_lossy() as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_model<T: Scalar>(path: &Path) -> Result<(ConvNet<T>, ModelHeader)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MODEL_MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    if line.pop() != Some(b'\n') {
        return Err(format_err("header not terminated by a newline"));
    }
    let header: ModelHeader = serde_json::from_slice(&line).map_err(|e| format_err(e.to_string()))?;
    if header.kernel != LayerDesc::KERNEL || header.activation != "silu" {
        return Err(format_err("unsupported layer type"));
    }
    let expected: usize = header.layers.iter().map(LayerDesc::param_len).sum();
    if expected != header.param_count {
        return Err(format_err("parameter count does not match layers"));
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != 4 * expected {
        return Err(format_err(format!(
            "expected {} weight bytes, found {}",
            4 * expected,
            raw.len()
        )));
    }
    let params = raw
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let net = ConvNet::from_params(header.layers.clone(), header.schedule.steps, params)?;
    if net.image_channels() != header.channels {
        return Err(format_err("channel count does not match layers"));
    }
    Ok((net, header))
}
