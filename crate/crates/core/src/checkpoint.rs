//! Checkpoint container: every parameter tensor plus optimizer state, the
//! training configuration, and the training log, in one versioned text
//! file.
//!
//! Layout (line oriented):
//!
//! ```text
//! pgcc-ckpt v1
//! config <key> = <value>            # one line per config key
//! step <optimizer step counter>
//! tensor <kind> <name> <rank> <dims...>
//! <hex-encoded f64 words, space separated, one line>
//! ...
//! log <csv row>                     # train log rows, header included
//! end
//! ```
//!
//! Values are stored as the 16-hex-digit big-endian bit pattern of each
//! f64, so round trips are lossless at 64-bit precision. Tensor kinds are
//! `param`, `m1`, and `m2` (optimizer moments).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelDims};
use crate::trainer::{OptimizerState, TrainConfig, TrainLog};

/// A full training snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    /// Absent for checkpoints that only carry weights.
    pub opt: Option<OptimizerState>,
    pub log: TrainLog,
}

const MAGIC: &str = "pgcc-ckpt v1";

fn encode_values(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{:016x}", v.to_bits()));
    }
    out.push('\n');
}

/// Serializes a checkpoint to its text form.
pub fn checkpoint_to_string(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for (k, v) in ckpt.config.to_key_values() {
        out.push_str(&format!("config {k} = {v}\n"));
    }
    if let Some(opt) = &ckpt.opt {
        out.push_str(&format!("step {}\n", opt.step));
    }
    let entries = ckpt.params.tensor_entries();
    for (name, shape, data) in &entries {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("tensor param {name} {} {}\n", shape.len(), dims.join(" ")));
        encode_values(&mut out, data);
    }
    if let Some(opt) = &ckpt.opt {
        for (kind, moments) in [("m1", &opt.m1), ("m2", &opt.m2)] {
            for ((name, shape, _), m) in entries.iter().zip(moments.iter()) {
                let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                out.push_str(&format!("tensor {kind} {name} {} {}\n", shape.len(), dims.join(" ")));
                encode_values(&mut out, m);
            }
        }
    }
    for line in ckpt.log.to_csv().lines() {
        out.push_str(&format!("log {line}\n"));
    }
    out.push_str("end\n");
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_string(ckpt)).map_err(|e| Error::io(path, e))
}

fn decode_values(line: &str, expect: usize, path: &Path, line_no: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(expect);
    for tok in line.split_whitespace() {
        let bits = u64::from_str_radix(tok, 16)
            .map_err(|_| Error::parse(path, line_no, format!("invalid hex word `{tok}`")))?;
        out.push(f64::from_bits(bits));
    }
    if out.len() != expect {
        return Err(Error::parse(
            path,
            line_no,
            format!("expected {expect} values, found {}", out.len()),
        ));
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_string(&text, path)
}

pub fn checkpoint_from_string(text: &str, path: &Path) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (first_no, first) = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty checkpoint file".into()))?;
    if first.trim() != MAGIC {
        return Err(Error::parse(
            path,
            first_no,
            format!("bad magic, expected `{MAGIC}`, got `{first}`"),
        ));
    }

    let mut config = TrainConfig::default();
    let mut step = 0usize;
    let mut saw_step = false;
    struct RawTensor {
        kind: String,
        name: String,
        shape: Vec<usize>,
        data: Vec<f64>,
    }
    let mut tensors: Vec<RawTensor> = Vec::new();
    let mut log_lines: Vec<String> = Vec::new();

    while let Some((line_no, raw)) = lines.next() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("config ") {
            let (key, value) = rest
                .split_once('=')
                .ok_or_else(|| Error::parse(path, line_no, "config line missing `=`"))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|msg| Error::parse(path, line_no, msg))?;
        } else if let Some(rest) = line.strip_prefix("step ") {
            step = rest
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("invalid step `{rest}`")))?;
            saw_step = true;
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() < 3 {
                return Err(Error::parse(path, line_no, "short tensor header"));
            }
            let kind = fields[0].to_string();
            let name = fields[1].to_string();
            let rank: usize = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("invalid rank `{}`", fields[2])))?;
            if fields.len() != 3 + rank {
                return Err(Error::parse(path, line_no, "tensor header dims do not match rank"));
            }
            let mut shape = Vec::with_capacity(rank);
            for d in &fields[3..] {
                shape.push(
                    d.parse()
                        .map_err(|_| Error::parse(path, line_no, format!("invalid dim `{d}`")))?,
                );
            }
            let expect: usize = shape.iter().product();
            let (data_no, data_line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, line_no, "tensor header without data line"))?;
            let data = decode_values(data_line, expect, path, data_no)?;
            tensors.push(RawTensor {
                kind,
                name,
                shape,
                data,
            });
        } else if let Some(rest) = line.strip_prefix("log ") {
            log_lines.push(rest.to_string());
        } else {
            return Err(Error::parse(path, line_no, format!("unrecognized line `{line}`")));
        }
    }

    config.validate()?;
    let mut params = ModelParams::init(config.dims(), config.seed);
    let expected = params.tensor_entries();

    // Fill parameters by name, insisting on exactly the expected set.
    let mut filled = 0usize;
    {
        let names: Vec<(String, Vec<usize>)> = expected
            .iter()
            .map(|(n, s, _)| (n.clone(), s.clone()))
            .collect();
        let mut slices = params.param_slices_mut();
        for t in tensors.iter().filter(|t| t.kind == "param") {
            let ix = names
                .iter()
                .position(|(n, _)| *n == t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", t.name)))?;
            if names[ix].1 != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    t.name, t.shape, names[ix].1
                )));
            }
            slices[ix].copy_from_slice(&t.data);
            filled += 1;
        }
        if filled != names.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {filled} of {} parameter tensors",
                names.len()
            )));
        }
    }

    let opt = if saw_step {
        let mut opt = OptimizerState::new(&params);
        opt.step = step;
        for (kind, target) in [("m1", &mut opt.m1), ("m2", &mut opt.m2)] {
            for (ix, (name, shape, _)) in expected.iter().enumerate() {
                let t = tensors
                    .iter()
                    .find(|t| t.kind == kind && t.name == *name)
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("missing optimizer tensor {kind} {name}"))
                    })?;
                if t.shape != *shape {
                    return Err(Error::Checkpoint(format!(
                        "optimizer tensor `{}` has shape {:?}, expected {:?}",
                        name, t.shape, shape
                    )));
                }
                target[ix].copy_from_slice(&t.data);
            }
        }
        Some(opt)
    } else {
        None
    };

    let log = if log_lines.is_empty() {
        TrainLog::default()
    } else {
        TrainLog::from_csv(&log_lines.join("\n"), path)?
    };

    Ok(Checkpoint {
        config,
        params,
        opt,
        log,
    })
}

/// Model widths recorded in a checkpoint, without loading tensors.
pub fn checkpoint_dims(ckpt: &Checkpoint) -> ModelDims {
    ckpt.config.dims()
}
