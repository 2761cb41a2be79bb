//! Pruning by utility posterior, bit-precision inference, quantization and winner analyses.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{self, ForwardMode};
use crate::model::{Layer, Model};
use crate::tensor::Tensor;
use crate::train::error_rate;

/// Largest mantissa width considered (single precision).
pub const MAX_BITS: u32 = 23;
pub const DEFAULT_TAU: f64 = 1e-2;

/// Retained versus original prunable components of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeptCount {
    pub layer: usize,
    pub kept: usize,
    pub total: usize,
}

/// Display names (`conv1`, `pool1`, `dense2`, `out`), one per layer.
pub fn layer_names(model: &Model) -> Vec<String> {
    let (mut conv, mut pool, mut dense) = (0, 0, 0);
    model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv(_) => {
                conv += 1;
                format!("conv{conv}")
            }
            Layer::MaxPool => {
                pool += 1;
                format!("pool{pool}")
            }
            Layer::Dense(_) => {
                dense += 1;
                format!("dense{dense}")
            }
            Layer::Output(_) => "out".to_string(),
        })
        .collect()
}

/// Resolves a layer given by name (`dense2`) or index.
pub fn find_layer(model: &Model, name: &str) -> Result<usize> {
    let names = layer_names(model);
    if let Some(i) = names.iter().position(|n| n == name) {
        return Ok(i);
    }
    match name.parse::<usize>() {
        Ok(i) if i < names.len() => Ok(i),
        _ => Err(Error::Config(format!(
            "no layer named `{name}` (layers: {})",
            names.join(", ")
        ))),
    }
}

/// Dense layers: per `(j, k)` connection group; conv layers: per kernel.
pub fn kept_counts(model: &Model) -> Vec<KeptCount> {
    model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            l.keep().map(|keep| KeptCount {
                layer: i,
                kept: keep.data().iter().filter(|&&v| v != 0.0).count(),
                total: keep.len(),
            })
        })
        .collect()
}

/// Drops every component whose utility probability is below `tau`.
///
/// Dropped components get a zero keep-mask entry and zero weight means, so they
/// vanish from eval-mode computation and from the bit and quantization statistics.
pub fn prune(model: &Model, tau: f64) -> (Model, Vec<KeptCount>) {
    let mut out = model.clone();
    for layer in &mut out.layers {
        match layer {
            Layer::Dense(l) => {
                let probs = l.utility.probs();
                for (m, &p) in l.keep.data_mut().iter_mut().zip(probs.data()) {
                    if p < tau {
                        *m = 0.0;
                    }
                }
                let u = l.competitors;
                for (g, &m) in l.keep.data().iter().enumerate() {
                    if m == 0.0 {
                        l.weights.mu.data_mut()[g * u..(g + 1) * u].fill(0.0);
                    }
                }
            }
            Layer::Conv(l) => {
                let probs = l.utility.probs();
                for (m, &p) in l.keep.data_mut().iter_mut().zip(probs.data()) {
                    if p < tau {
                        *m = 0.0;
                    }
                }
                // [h, l, C, K, U]: the kernel index cycles every U entries.
                let (k, u) = (l.kernels, l.competitors);
                for (i, w) in l.weights.mu.data_mut().iter_mut().enumerate() {
                    if l.keep.data()[(i / u) % k] == 0.0 {
                        *w = 0.0;
                    }
                }
            }
            _ => {}
        }
    }
    let counts = kept_counts(&out);
    (out, counts)
}

/// Per-weight retained flags (all true for layers without a mask).
fn retained_weights(layer: &Layer) -> Option<(Tensor, Vec<bool>)> {
    match layer {
        Layer::Dense(l) => {
            let u = l.competitors;
            let flags = (0..l.weights.mu.len()).map(|i| l.keep.data()[i / u] != 0.0).collect();
            Some((l.weights.variance(), flags))
        }
        Layer::Conv(l) => {
            let (k, u) = (l.kernels, l.competitors);
            let flags = (0..l.weights.mu.len())
                .map(|i| l.keep.data()[(i / u) % k] != 0.0)
                .collect();
            Some((l.weights.variance(), flags))
        }
        Layer::Output(l) => Some((l.weights.variance(), vec![true; l.weights.mu.len()])),
        Layer::MaxPool => None,
    }
}

/// Mantissa bits from the retained weights' posterior variances:
/// `clamp(ceil(−log2 sqrt(mean variance)), 0, 23)`; 0 when nothing is retained.
pub fn bits_from_variances(variances: impl IntoIterator<Item = f64>) -> u32 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in variances {
        sum += v;
        n += 1;
    }
    if n == 0 {
        return 0;
    }
    let sd = (sum / n as f64).sqrt();
    let bits = (-sd.log2()).ceil();
    if bits.is_nan() {
        return 0;
    }
    bits.clamp(0.0, MAX_BITS as f64) as u32
}

/// Bit precision of one layer; `None` for layers without weights.
pub fn infer_bits(layer: &Layer) -> Option<u32> {
    let (var, flags) = retained_weights(layer)?;
    Some(bits_from_variances(
        var.data().iter().zip(&flags).filter(|(_, &f)| f).map(|(&v, _)| v),
    ))
}

/// Grid step for `bits` mantissa bits anchored at the largest magnitude.
pub fn quantization_step(max_abs: f64, bits: u32) -> f64 {
    2f64.powi(-(bits as i32)) * 2f64.powi(max_abs.log2().ceil() as i32)
}

/// Rounds `values` to the nearest multiple of the layer grid, keeping signs.
pub fn quantize_values(values: &mut [f64], bits: u32) {
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 || !max_abs.is_finite() {
        return;
    }
    let step = quantization_step(max_abs, bits);
    for v in values {
        *v = v.signum() * (v.abs() / step).round() * step;
    }
}

/// Quantizes the weight means of every layer with `Some(bits)`.
pub fn quantize(model: &Model, bits: &[Option<u32>]) -> Result<Model> {
    if bits.len() != model.layers.len() {
        return Err(Error::dimension("quantize", &[bits.len()], &[model.layers.len()]));
    }
    let mut out = model.clone();
    for (layer, b) in out.layers.iter_mut().zip(bits) {
        let (Some(b), Some(mu)) = (b, weight_means_mut(layer)) else {
            continue;
        };
        if *b > MAX_BITS {
            return Err(Error::Contract(format!("{b} bits exceeds {MAX_BITS}")));
        }
        quantize_values(mu.data_mut(), *b);
    }
    Ok(out)
}

fn weight_means_mut(layer: &mut Layer) -> Option<&mut Tensor> {
    match layer {
        Layer::Dense(l) => Some(&mut l.weights.mu),
        Layer::Conv(l) => Some(&mut l.weights.mu),
        Layer::Output(l) => Some(&mut l.weights.mu),
        Layer::MaxPool => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    pub kept: usize,
    pub total: usize,
    pub bits: u32,
    /// Error of the pruned full-precision model.
    pub err_fp: f64,
    /// Error with only this layer quantized.
    pub err_q: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionReport {
    pub tau: f64,
    /// Error of the unpruned model.
    pub err_unpruned: f64,
    pub err_fp: f64,
    /// Error with every layer quantized to its inferred bits.
    pub err_q: f64,
    pub layers: Vec<LayerReport>,
}

pub const TABLE_HEADER: &str = "layer, kept/total, bits, err_fp, err_q";

/// Prunes at `tau`, infers per-layer bits, quantizes, and evaluates on `data`.
///
/// Returns the report together with the pruned full-precision and the quantized models.
pub fn compress(model: &Model, tau: f64, data: &Dataset) -> Result<(CompressionReport, Model, Model)> {
    let err_unpruned = error_rate(model, data)?;
    let (pruned, _) = prune(model, tau);
    let err_fp = error_rate(&pruned, data)?;
    let bits: Vec<Option<u32>> = pruned.layers.iter().map(infer_bits).collect();
    let quantized = quantize(&pruned, &bits)?;
    let err_q = error_rate(&quantized, data)?;
    let names = layer_names(&pruned);
    let mut rows = Vec::new();
    for (i, layer) in pruned.layers.iter().enumerate() {
        let Some(b) = bits[i] else { continue };
        let mut only = vec![None; bits.len()];
        only[i] = Some(b);
        let err_layer = error_rate(&quantize(&pruned, &only)?, data)?;
        let (kept, total) = match layer.keep() {
            Some(k) => (k.data().iter().filter(|&&v| v != 0.0).count(), k.len()),
            None => {
                let n = layer.params()[0].1.len();
                (n, n)
            }
        };
        rows.push(LayerReport {
            name: names[i].clone(),
            kind: layer.kind().to_string(),
            kept,
            total,
            bits: b,
            err_fp,
            err_q: err_layer,
        });
    }
    let report = CompressionReport {
        tau,
        err_unpruned,
        err_fp,
        err_q,
        layers: rows,
    };
    Ok((report, pruned, quantized))
}

impl LayerReport {
    pub fn table_row(&self) -> String {
        format!(
            "{}, {}/{}, {}, {}, {}",
            self.name, self.kept, self.total, self.bits, self.err_fp, self.err_q
        )
    }
}

/// Parses a `layer, kept/total, bits, err_fp, err_q` row.
pub fn parse_table_row(row: &str) -> Result<(String, usize, usize, u32, f64, f64)> {
    let bad = || Error::Format {
        path: "<report row>".into(),
        message: format!("cannot parse `{row}`"),
    };
    let fields: Vec<&str> = row.split(',').map(str::trim).collect();
    let [name, counts, bits, fp, q] = fields[..] else {
        return Err(bad());
    };
    let (kept, total) = counts.split_once('/').ok_or_else(bad)?;
    Ok((
        name.to_string(),
        kept.parse().map_err(|_| bad())?,
        total.parse().map_err(|_| bad())?,
        bits.parse().map_err(|_| bad())?,
        fp.parse().map_err(|_| bad())?,
        q.parse().map_err(|_| bad())?,
    ))
}

impl CompressionReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{TABLE_HEADER}");
        for r in &self.layers {
            let _ = writeln!(s, "{}", r.table_row());
        }
        s
    }

    /// Sectioned `key = value` text, one section per layer in fixed field order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[compression]");
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "error_unpruned = {}", self.err_unpruned);
        let _ = writeln!(s, "error_full_precision = {}", self.err_fp);
        let _ = writeln!(s, "error_quantized = {}", self.err_q);
        for r in &self.layers {
            let _ = writeln!(s, "\n[layer {}]", r.name);
            let _ = writeln!(s, "kind = {}", r.kind);
            let _ = writeln!(s, "kept = {}", r.kept);
            let _ = writeln!(s, "total = {}", r.total);
            let _ = writeln!(s, "bits = {}", r.bits);
            let _ = writeln!(s, "error_full_precision = {}", r.err_fp);
            let _ = writeln!(s, "error_quantized = {}", r.err_q);
        }
        s
    }
}

/// Empirical winner frequencies of one LWTA layer, per class.
#[derive(Clone, Debug, PartialEq)]
pub struct WinnerStats {
    pub layer: usize,
    pub classes: usize,
    pub blocks: usize,
    pub units: usize,
    /// `[class][block][unit]`, flattened.
    pub probs: Vec<f64>,
    pub class_counts: Vec<usize>,
}

impl WinnerStats {
    pub fn row(&self, class: usize, block: usize) -> &[f64] {
        let start = (class * self.blocks + block) * self.units;
        &self.probs[start..start + self.units]
    }

    /// Classes without examples; their rows are uniform.
    pub fn empty_classes(&self) -> Vec<usize> {
        (0..self.classes).filter(|&c| self.class_counts[c] == 0).collect()
    }

    /// Comma-separated grid, one line per `(class, block)`: `class,block,p_1,…,p_U`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,block");
        for u in 0..self.units {
            let _ = write!(s, ",p{}", u + 1);
        }
        s.push('\n');
        for c in 0..self.classes {
            for b in 0..self.blocks {
                let _ = write!(s, "{c},{b}");
                for p in self.row(c, b) {
                    let _ = write!(s, ",{p}");
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Hard-winner frequencies of LWTA layer `layer` for its first `blocks` blocks (all when `None`).
pub fn winner_stats(model: &Model, layer: usize, data: &Dataset, blocks: Option<usize>) -> Result<WinnerStats> {
    let (k, u) = match model.layers.get(layer) {
        Some(Layer::Dense(l)) => (l.blocks, l.competitors),
        Some(Layer::Conv(l)) => (l.kernels, l.competitors),
        _ => return Err(Error::Config(format!("layer {layer} is not an LWTA layer"))),
    };
    let blocks = blocks.unwrap_or(k).min(k);
    let classes = model.classes();
    let mut counts = vec![0.0; classes * blocks * u];
    let mut class_counts = vec![0usize; classes];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(500) {
        let (x, labels) = data.batch(chunk);
        let g = Graph::new();
        let bound = model.bind(&g, false);
        let pass = model.forward(&bound, g.constant(x), ForwardMode::Eval, None)?;
        let logits = pass
            .lwta
            .iter()
            .find(|(i, _)| *i == layer)
            .map(|(_, f)| f.winner_logits.value())
            .ok_or_else(|| Error::Contract("layer produced no winner logits".into()))?;
        for (n, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::Contract(format!("label {label} out of range")));
            }
            class_counts[label] += 1;
            for b in 0..blocks {
                let row = &logits.data()[(n * k + b) * u..(n * k + b + 1) * u];
                counts[(label * blocks + b) * u + layers::argmax(row)] += 1.0;
            }
        }
    }
    for c in 0..classes {
        for b in 0..blocks {
            let row = &mut counts[(c * blocks + b) * u..(c * blocks + b + 1) * u];
            if class_counts[c] == 0 {
                row.fill(1.0 / u as f64);
            } else {
                row.iter_mut().for_each(|v| *v /= class_counts[c] as f64);
            }
        }
    }
    Ok(WinnerStats {
        layer,
        classes,
        blocks,
        units: u,
        probs: counts,
        class_counts,
    })
}

/// Fraction of blocks whose most frequent winner agrees between each pair of classes.
pub fn overlap_matrix(stats: &WinnerStats) -> Vec<Vec<f64>> {
    let c = stats.classes;
    let top: Vec<Vec<usize>> = (0..c)
        .map(|cl| (0..stats.blocks).map(|b| layers::argmax(stats.row(cl, b))).collect())
        .collect();
    let mut m = vec![vec![0.0; c]; c];
    for a in 0..c {
        for b in 0..c {
            m[a][b] = if a == b || stats.blocks == 0 {
                1.0
            } else {
                let same = top[a].iter().zip(&top[b]).filter(|(x, y)| x == y).count();
                same as f64 / stats.blocks as f64
            };
        }
    }
    m
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}
