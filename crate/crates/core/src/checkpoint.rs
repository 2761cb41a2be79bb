//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a UTF-8 header of
//! `key = value` lines followed by one `block <name> <d0>x<d1>...` line per tensor,
//! then every block's values as little-endian `f64` in header order. Parameters are
//! stored unconstrained, exactly as the optimizer sees them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::parse_architecture;
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::stochastic::IbpPrior;
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: &[u8; 8] = b"SBLWTA\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub seed: u64,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64) -> Self {
        Checkpoint {
            model,
            step: 0,
            seed,
            adam: None,
        }
    }
}

fn blocks(ckpt: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, layer) in ckpt.model.layers.iter().enumerate() {
        for (name, t) in layer.params() {
            out.push((format!("{i}.{name}"), t));
        }
        if let Some(k) = layer.keep() {
            out.push((format!("{i}.keep"), k));
        }
    }
    if let Some(a) = &ckpt.adam {
        for (j, t) in a.m.iter().enumerate() {
            out.push((format!("adam.m.{j}"), t));
        }
        for (j, t) in a.v.iter().enumerate() {
            out.push((format!("adam.v.{j}"), t));
        }
    }
    out
}

fn shape_text(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    if dims.is_empty() {
        "scalar".into()
    } else {
        dims.join("x")
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let m = &ckpt.model;
    let [h, w, c] = m.arch.input;
    let mut header = String::new();
    let _ = writeln!(header, "arch = {}", m.arch);
    let _ = writeln!(header, "input = {h}x{w}x{c}");
    let _ = writeln!(header, "alpha = {}", m.prior.alpha);
    let _ = writeln!(header, "beta = {}", m.prior.beta);
    let _ = writeln!(header, "step = {}", ckpt.step);
    let _ = writeln!(header, "seed = {}", ckpt.seed);
    if let Some(a) = &ckpt.adam {
        let _ = writeln!(header, "adam_step = {}", a.step);
    }
    let blocks = blocks(ckpt);
    for (name, t) in &blocks {
        let _ = writeln!(header, "block {name} {}", shape_text(t.shape()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, t) in &blocks {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(path, &bytes)
}

/// Decodes a checkpoint; every failure is reported before a model is built.
pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let format = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 20 {
        return Err(truncated(20));
    }
    if &bytes[..8] != MAGIC {
        return Err(format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).ok_or_else(|| format("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(truncated(header_end));
    }
    let header = std::str::from_utf8(&bytes[20..header_end]).map_err(|_| format("header is not UTF-8".into()))?;

    let mut keys = std::collections::HashMap::new();
    let mut declared: Vec<(String, Vec<usize>)> = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("block ") {
            let (name, shape) = rest
                .rsplit_once(' ')
                .ok_or_else(|| format(format!("bad block line `{line}`")))?;
            let dims = if shape == "scalar" {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| format(format!("bad shape in `{line}`"))))
                    .collect::<Result<Vec<usize>>>()?
            };
            declared.push((name.to_string(), dims));
        } else if let Some((k, v)) = line.split_once(" = ") {
            keys.insert(k.to_string(), v.to_string());
        } else {
            return Err(format(format!("bad header line `{line}`")));
        }
    }
    let get = |k: &str| keys.get(k).ok_or_else(|| format(format!("header lacks `{k}`")));
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| format(format!("bad `{k}`"))) };
    let real = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| format(format!("bad `{k}`"))) };

    let dims: Vec<usize> = get("input")?
        .split('x')
        .map(|d| d.parse().map_err(|_| format("bad `input`".into())))
        .collect::<Result<_>>()?;
    let input: [usize; 3] = dims.try_into().map_err(|_| format("bad `input`".into()))?;
    let arch = parse_architecture(get("arch")?, input).map_err(|e| format(e.to_string()))?;
    let prior = IbpPrior {
        alpha: real("alpha")?,
        beta: real("beta")?,
    };
    let adam_step = keys.contains_key("adam_step").then(|| num("adam_step")).transpose()?;

    let mut model = Model::new(arch, prior, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| format(e.to_string()))?;
    let mut ckpt = Checkpoint {
        adam: adam_step.map(|step| {
            let mut a = AdamState::for_model(&model);
            a.step = step;
            a
        }),
        model: model.clone(),
        step: num("step")?,
        seed: num("seed")?,
    };

    let expected: Vec<(String, Vec<usize>)> = blocks(&ckpt)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected != declared {
        return Err(format("block list does not match the architecture".into()));
    }
    let payload: usize = declared.iter().map(|(_, s)| s.iter().product::<usize>() * 8).sum();
    let total = header_end + payload;
    if bytes.len() < total {
        return Err(truncated(total));
    }
    if bytes.len() > total {
        return Err(format(format!("{} trailing bytes", bytes.len() - total)));
    }

    let mut values = bytes[header_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut fill = |t: &mut Tensor| {
        for v in t.data_mut() {
            *v = values.next().expect("payload length checked");
        }
    };
    for layer in &mut model.layers {
        for t in layer.params_mut() {
            fill(t);
        }
        match layer {
            Layer::Dense(l) => fill(&mut l.keep),
            Layer::Conv(l) => fill(&mut l.keep),
            _ => {}
        }
    }
    if let Some(a) = &mut ckpt.adam {
        for t in a.m.iter_mut().chain(a.v.iter_mut()) {
            fill(t);
        }
    }
    ckpt.model = model;
    Ok(ckpt)
}
