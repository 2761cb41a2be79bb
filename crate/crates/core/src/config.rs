//! Plain `key = value` experiment configuration and architecture descriptors.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Architecture, LayerSpec};
use crate::stochastic::IbpPrior;
use crate::train::TrainConfig;

/// Everything a training run needs besides data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Architecture,
    pub prior: IbpPrior,
    pub train: TrainConfig,
    /// Train on the first `subset` examples only.
    pub subset: Option<usize>,
    pub tau: f64,
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        Ok(RunConfig {
            arch: Architecture::preset(name)?,
            prior: IbpPrior::default(),
            train: TrainConfig::default(),
            subset: None,
            tau: crate::compress::DEFAULT_TAU,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.subset == Some(0) {
            return Err(Error::Config("subset must be positive".into()));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau must be non-negative, got {}", self.tau)));
        }
        Ok(())
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_input(value: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = value
        .split('x')
        .map(|d| parse_num("input", d.trim()))
        .collect::<Result<_>>()?;
    match dims[..] {
        [h, w, c] => Ok([h, w, c]),
        [h, w] => Ok([h, w, 1]),
        _ => Err(Error::Config(format!("`input`: expected HxWxC, got `{value}`"))),
    }
}

/// Parses configuration text.
///
/// Lines are `key = value`; `#` starts a comment. The architecture comes from `preset`
/// or from `arch` (a `->`-separated layer list, with `input = HxWxC`, default 28x28x1).
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut preset = None;
    let mut arch = None;
    let mut input = None;
    let mut cfg = RunConfig::from_preset("lenet300-sb2")?;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let t = &mut cfg.train;
        match key {
            "preset" => preset = Some(value.to_string()),
            "arch" => arch = Some(value.to_string()),
            "input" => input = Some(parse_input(value)?),
            "alpha" => cfg.prior = IbpPrior::new(parse_num(key, value)?).map_err(|e| Error::Config(e.to_string()))?,
            "batch" | "batch_size" => t.batch_size = parse_num(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "lr" | "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => t.adam_eps = parse_num(key, value)?,
            "lambda0" => t.lambda0 = parse_num(key, value)?,
            "lambda_min" => t.lambda_min = parse_num(key, value)?,
            "anneal_rate" => t.anneal_rate = parse_num(key, value)?,
            "dataset_size" => t.dataset_size = Some(parse_num(key, value)?),
            "seed" => t.seed = parse_num(key, value)?,
            "subset" => cfg.subset = Some(parse_num(key, value)?),
            "tau" => cfg.tau = parse_num(key, value)?,
            other => return Err(Error::Config(format!("line {}: unknown key `{other}`", n + 1))),
        }
    }
    cfg.arch = match (preset, arch) {
        (Some(_), Some(_)) => return Err(Error::Config("give either `preset` or `arch`, not both".into())),
        (Some(p), None) => {
            if input.is_some() {
                return Err(Error::Config("`input` only applies to `arch`".into()));
            }
            Architecture::preset(&p)?
        }
        (None, Some(a)) => parse_architecture(&a, input.unwrap_or([28, 28, 1]))?,
        (None, None) => cfg.arch,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Parses `dense-lwta(K=150,U=2) -> dense-lwta(K=50,U=2) -> dense-out(10)` and validates widths.
pub fn parse_architecture(text: &str, input: [usize; 3]) -> Result<Architecture> {
    let layers = text
        .replace('→', "->")
        .split("->")
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<LayerSpec>>>()?;
    let arch = Architecture { input, layers };
    arch.validate()?;
    Ok(arch)
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("layer `{s}`: {m}"));
        let s = s.trim();
        if s == "pool" || s == "maxpool" {
            return Ok(LayerSpec::MaxPool);
        }
        let (name, rest) = s.split_once('(').ok_or_else(|| bad("expected name(args)".into()))?;
        let args = rest
            .strip_suffix(')')
            .ok_or_else(|| bad("missing `)`".into()))?;
        if name.trim() == "dense-out" {
            let classes = args
                .trim()
                .trim_start_matches("classes=")
                .parse()
                .map_err(|_| bad("expected a class count".into()))?;
            return Ok(LayerSpec::Output { classes });
        }
        let mut fields = std::collections::HashMap::new();
        for kv in args.split(',').filter(|a| !a.trim().is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{kv}`")))?;
            let v: usize = v.trim().parse().map_err(|_| bad(format!("`{kv}` is not a count")))?;
            if fields.insert(k.trim().to_string(), v).is_some() {
                return Err(bad(format!("`{}` given twice", k.trim())));
            }
        }
        let mut take = |k: &str| fields.remove(k);
        let spec = match name.trim() {
            "dense-lwta" => LayerSpec::DenseLwta {
                blocks: take("K").ok_or_else(|| bad("missing K".into()))?,
                competitors: take("U").ok_or_else(|| bad("missing U".into()))?,
                inputs: take("J"),
            },
            "conv-lwta" => LayerSpec::ConvLwta {
                kernels: take("K").ok_or_else(|| bad("missing K".into()))?,
                competitors: take("U").ok_or_else(|| bad("missing U".into()))?,
                size: take("size").unwrap_or(5),
                channels: take("C"),
            },
            other => return Err(bad(format!("unknown layer type `{other}`"))),
        };
        if let Some(k) = fields.keys().next() {
            return Err(bad(format!("unknown argument `{k}`")));
        }
        Ok(spec)
    }
}
