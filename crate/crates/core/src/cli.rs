//! Checkpoints, configuration files and the command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::backbone::U2FormerConfig;
use crate::blocks::{FilterConfig, FilterMode};
use crate::contrastive::View;
use crate::costmodel::{sweep_csv, sweep_ratio, sweep_table};
use crate::datasynth::{load_dataset, load_png, save_png, write_dataset, Backgrounds, DegradationSpec, Kind};
use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::numerics::{grad_check_steps, DType, Element, GradCheckReport, InitMode, ParamStore, Probes, Step, Tensor};
use crate::rng::Stream;
use crate::training::{batch_objective, evaluate, restore, EvalReport, Network, TrainConfig, Trainer, Triple};

pub const MAGIC: &[u8; 4] = b"U2FM";
pub const VERSION: u32 = 1;
const META: &str = "meta.";

/// One serialized tensor. Values are held as `f64`, which is exact for both
/// storage types.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn from_tensor<T: Element>(name: &str, t: &Tensor<T>) -> Self {
        RawTensor {
            name: name.to_string(),
            dtype: T::DTYPE,
            dims: t.shape().to_vec(),
            data: t.to_f64_vec(),
        }
    }

    fn meta(name: &str, values: &[f64]) -> Self {
        RawTensor {
            name: format!("{META}{name}"),
            dtype: DType::F64,
            dims: vec![values.len()],
            data: values.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<RawTensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Architecture metadata followed by every parameter in definition order.
    pub fn from_store<T: Element>(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let mut tensors = meta_tensors(cfg);
        tensors.extend(store.iter().map(|p| RawTensor::from_tensor(&p.name, &p.tensor)));
        Checkpoint { tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                match t.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 + 4 {
            return Err(corrupt(format!("{} bytes is too short for a checkpoint", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if &body[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(corrupt(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| corrupt(format!("unknown dtype for {name}")))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt(format!("dims of {name} overflow")))?;
            let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            tensors.push(RawTensor { name, dtype, dims, data });
        }
        if r.pos != body.len() {
            return Err(corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn meta(&self, name: &str) -> Result<&[f64]> {
        let full = format!("{META}{name}");
        self.tensors
            .iter()
            .find(|t| t.name == full)
            .map(|t| t.data.as_slice())
            .ok_or_else(|| corrupt(format!("missing {full}")))
    }

    /// Training config carrying the stored architecture; everything else is
    /// left at the desk defaults.
    pub fn config(&self) -> Result<TrainConfig> {
        let one = |name: &str| -> Result<f64> {
            match self.meta(name)? {
                [v] => Ok(*v),
                other => Err(corrupt(format!("{META}{name} has {} values", other.len()))),
            }
        };
        let int = |name: &str| one(name).map(|v| v as usize);
        let depths = self.meta("stage_depths")?;
        if depths.len() != 4 {
            return Err(corrupt("meta.stage_depths needs 4 values"));
        }
        let mut cfg = TrainConfig::desk();
        cfg.model = U2FormerConfig {
            base_channels: int("base_channels")?,
            window: int("window")?,
            stage_depths: [0, 1, 2, 3].map(|i| depths[i] as usize),
            bottleneck_blocks: int("bottleneck_blocks")?,
            filter: FilterConfig {
                mode: if one("filter_mode")? == 0.0 { FilterMode::TopK } else { FilterMode::Threshold },
                rho: one("rho")?,
                keep_ratio: one("keep_ratio")?,
            },
            heads: int("heads")?,
            reduction: int("reduction")?,
            rel_pos_bias: one("rel_pos_bias")? != 0.0,
            blocks_per_level: int("blocks_per_level")?,
        };
        cfg.contrastive.hidden = int("proj_hidden")?;
        cfg.contrastive.dim = int("proj_dim")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy parameters into `store`, which must have the same names and
    /// shapes in the same order.
    pub fn load_into<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let params: Vec<&RawTensor> = self.tensors.iter().filter(|t| !t.name.starts_with(META)).collect();
        for (i, p) in store.iter_mut().enumerate() {
            let Some(t) = params.get(i) else {
                return Err(Error::ConfigMismatch(format!("first offending tensor {}: missing from checkpoint ({} stored)", p.name, params.len())));
            };
            if t.name != p.name || t.dims != p.tensor.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "first offending tensor {}: checkpoint has {} {:?}, model expects {} {:?}",
                    p.name,
                    t.name,
                    t.dims,
                    p.name,
                    p.tensor.shape()
                )));
            }
            for (d, &v) in p.tensor.data_mut().iter_mut().zip(&t.data) {
                *d = T::from_f64(v);
            }
        }
        if params.len() > store.len() {
            let extra = &params[store.len()];
            return Err(Error::ConfigMismatch(format!("first offending tensor {}: not present in the model", extra.name)));
        }
        Ok(())
    }
}

fn meta_tensors(cfg: &TrainConfig) -> Vec<RawTensor> {
    let m = &cfg.model;
    let n = |v: usize| v as f64;
    vec![
        RawTensor::meta("base_channels", &[n(m.base_channels)]),
        RawTensor::meta("window", &[n(m.window)]),
        RawTensor::meta("stage_depths", &m.stage_depths.map(n)),
        RawTensor::meta("bottleneck_blocks", &[n(m.bottleneck_blocks)]),
        RawTensor::meta("filter_mode", &[if m.filter.mode == FilterMode::TopK { 0.0 } else { 1.0 }]),
        RawTensor::meta("rho", &[m.filter.rho]),
        RawTensor::meta("keep_ratio", &[m.filter.keep_ratio]),
        RawTensor::meta("heads", &[n(m.heads)]),
        RawTensor::meta("reduction", &[n(m.reduction)]),
        RawTensor::meta("rel_pos_bias", &[if m.rel_pos_bias { 1.0 } else { 0.0 }]),
        RawTensor::meta("blocks_per_level", &[n(m.blocks_per_level)]),
        RawTensor::meta("proj_hidden", &[n(cfg.contrastive.hidden)]),
        RawTensor::meta("proj_dim", &[n(cfg.contrastive.dim)]),
    ]
}

/// Rebuild the network described by a checkpoint and load its weights.
pub fn load_model(path: &Path) -> Result<(TrainConfig, Network, ParamStore<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ckpt.config()?;
    let mut store = ParamStore::new();
    let net = Network::build(&cfg, &mut store, InitMode::Standard)?;
    ckpt.load_into(&mut store)?;
    Ok((cfg, net, store))
}

/// Every accepted config key with a short description. Lists are comma
/// separated, booleans are `true` / `false`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "run seed (init, batch order, augmentation, patch draws)"),
    ("lr", "Adam learning rate"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("batch_size", "samples per step"),
    ("max_steps", "optimizer steps"),
    ("crop", "square training crop side, 0 for whole images"),
    ("flip", "random horizontal and vertical flips"),
    ("random_crop", "random crop position instead of centered"),
    ("resize", "crop up to 1.5x larger and resize down"),
    ("eval_every", "steps between evaluations, 0 disables"),
    ("extractor_seed", "seed of the fixed perceptual feature extractor"),
    ("base_channels", "embedding width C"),
    ("window", "attention window side"),
    ("stage_depths", "UTB depth of the four encoder stages"),
    ("bottleneck_blocks", "transformer blocks in the bottleneck"),
    ("heads", "attention heads"),
    ("reduction", "channel-attention reduction ratio"),
    ("rel_pos_bias", "relative position bias in attention"),
    ("blocks_per_level", "transformer blocks per UTB level"),
    ("filter_mode", "topk or threshold"),
    ("rho", "channel threshold in threshold mode"),
    ("keep_ratio", "kept channel fraction in topk mode"),
    ("patch_size", "contrastive patch side"),
    ("n_per_role", "patches per query / positive / negative role"),
    ("proj_hidden", "projection head hidden width"),
    ("proj_dim", "projection head output width"),
    ("l2_normalize", "normalize embeddings before similarity"),
    ("temperature", "contrastive temperature"),
    ("stop_gradient", "treat positive and negative embeddings as constants"),
    ("views", "contrastive views, subset of v1,v2,v3"),
    ("alpha1", "pixel loss background weight"),
    ("beta1", "pixel loss noise weight"),
    ("theta", "pixel loss stage weights (4 values)"),
    ("alpha2", "perceptual loss background weight"),
    ("beta2", "perceptual loss noise weight"),
    ("theta_p", "perceptual loss stage weights (4 values)"),
    ("lambda1", "pixel term weight"),
    ("lambda2", "perceptual term weight"),
    ("lambda3", "contrastive term weight"),
];

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Parse(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse(format!("bad boolean {value:?} for {key}"))),
    }
}

fn parse_list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn parse_four<V: std::str::FromStr + Copy>(key: &str, value: &str) -> Result<[V; 4]> {
    let v: Vec<V> = parse_list(key, value)?;
    v.try_into().map_err(|_| Error::Parse(format!("{key} needs exactly 4 values")))
}

fn join<V: std::fmt::Display>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Set one config key from its text value.
pub fn apply_setting(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    let (m, c, l) = (&mut cfg.model, &mut cfg.contrastive, &mut cfg.loss);
    match key {
        "seed" => cfg.seed = parse_num(key, value)?,
        "lr" => cfg.lr = parse_num(key, value)?,
        "adam_beta1" => cfg.betas.0 = parse_num(key, value)?,
        "adam_beta2" => cfg.betas.1 = parse_num(key, value)?,
        "adam_eps" => cfg.adam_eps = parse_num(key, value)?,
        "batch_size" => cfg.batch_size = parse_num(key, value)?,
        "max_steps" => cfg.max_steps = parse_num(key, value)?,
        "crop" => cfg.crop = parse_num(key, value)?,
        "flip" => cfg.flip = parse_bool(key, value)?,
        "random_crop" => cfg.random_crop = parse_bool(key, value)?,
        "resize" => cfg.resize = parse_bool(key, value)?,
        "eval_every" => cfg.eval_every = parse_num(key, value)?,
        "extractor_seed" => cfg.extractor_seed = parse_num(key, value)?,
        "base_channels" => m.base_channels = parse_num(key, value)?,
        "window" => m.window = parse_num(key, value)?,
        "stage_depths" => m.stage_depths = parse_four(key, value)?,
        "bottleneck_blocks" => m.bottleneck_blocks = parse_num(key, value)?,
        "heads" => m.heads = parse_num(key, value)?,
        "reduction" => m.reduction = parse_num(key, value)?,
        "rel_pos_bias" => m.rel_pos_bias = parse_bool(key, value)?,
        "blocks_per_level" => m.blocks_per_level = parse_num(key, value)?,
        "filter_mode" => {
            m.filter.mode = match value {
                "topk" => FilterMode::TopK,
                "threshold" => FilterMode::Threshold,
                _ => return Err(Error::Parse(format!("filter_mode must be topk or threshold, got {value:?}"))),
            }
        }
        "rho" => m.filter.rho = parse_num(key, value)?,
        "keep_ratio" => m.filter.keep_ratio = parse_num(key, value)?,
        "patch_size" => c.patch_size = parse_num(key, value)?,
        "n_per_role" => c.n_per_role = parse_num(key, value)?,
        "proj_hidden" => c.hidden = parse_num(key, value)?,
        "proj_dim" => c.dim = parse_num(key, value)?,
        "l2_normalize" => c.l2_normalize = parse_bool(key, value)?,
        "temperature" => c.temperature = parse_num(key, value)?,
        "stop_gradient" => c.stop_gradient = parse_bool(key, value)?,
        "views" => {
            c.views = value
                .split(',')
                .map(|v| match v.trim() {
                    "v1" => Ok(View::V1),
                    "v2" => Ok(View::V2),
                    "v3" => Ok(View::V3),
                    other => Err(Error::Parse(format!("unknown view {other:?}"))),
                })
                .collect::<Result<_>>()?
        }
        "alpha1" => l.alpha1 = parse_num(key, value)?,
        "beta1" => l.beta1 = parse_num(key, value)?,
        "theta" => l.theta = parse_four(key, value)?,
        "alpha2" => l.alpha2 = parse_num(key, value)?,
        "beta2" => l.beta2 = parse_num(key, value)?,
        "theta_p" => l.theta_p = parse_four(key, value)?,
        "lambda1" => l.lambda1 = parse_num(key, value)?,
        "lambda2" => l.lambda2 = parse_num(key, value)?,
        "lambda3" => l.lambda3 = parse_num(key, value)?,
        _ => return Err(Error::Parse(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// Text value of one config key, parseable by [`apply_setting`].
pub fn config_value(cfg: &TrainConfig, key: &str) -> Result<String> {
    let (m, c, l) = (&cfg.model, &cfg.contrastive, &cfg.loss);
    Ok(match key {
        "seed" => cfg.seed.to_string(),
        "lr" => cfg.lr.to_string(),
        "adam_beta1" => cfg.betas.0.to_string(),
        "adam_beta2" => cfg.betas.1.to_string(),
        "adam_eps" => cfg.adam_eps.to_string(),
        "batch_size" => cfg.batch_size.to_string(),
        "max_steps" => cfg.max_steps.to_string(),
        "crop" => cfg.crop.to_string(),
        "flip" => cfg.flip.to_string(),
        "random_crop" => cfg.random_crop.to_string(),
        "resize" => cfg.resize.to_string(),
        "eval_every" => cfg.eval_every.to_string(),
        "extractor_seed" => cfg.extractor_seed.to_string(),
        "base_channels" => m.base_channels.to_string(),
        "window" => m.window.to_string(),
        "stage_depths" => join(&m.stage_depths),
        "bottleneck_blocks" => m.bottleneck_blocks.to_string(),
        "heads" => m.heads.to_string(),
        "reduction" => m.reduction.to_string(),
        "rel_pos_bias" => m.rel_pos_bias.to_string(),
        "blocks_per_level" => m.blocks_per_level.to_string(),
        "filter_mode" => match m.filter.mode {
            FilterMode::TopK => "topk".into(),
            FilterMode::Threshold => "threshold".into(),
        },
        "rho" => m.filter.rho.to_string(),
        "keep_ratio" => m.filter.keep_ratio.to_string(),
        "patch_size" => c.patch_size.to_string(),
        "n_per_role" => c.n_per_role.to_string(),
        "proj_hidden" => c.hidden.to_string(),
        "proj_dim" => c.dim.to_string(),
        "l2_normalize" => c.l2_normalize.to_string(),
        "temperature" => c.temperature.to_string(),
        "stop_gradient" => c.stop_gradient.to_string(),
        "views" => c
            .views
            .iter()
            .map(|v| match v {
                View::V1 => "v1",
                View::V2 => "v2",
                View::V3 => "v3",
            })
            .collect::<Vec<_>>()
            .join(","),
        "alpha1" => l.alpha1.to_string(),
        "beta1" => l.beta1.to_string(),
        "theta" => join(&l.theta),
        "alpha2" => l.alpha2.to_string(),
        "beta2" => l.beta2.to_string(),
        "theta_p" => join(&l.theta_p),
        "lambda1" => l.lambda1.to_string(),
        "lambda2" => l.lambda2.to_string(),
        "lambda3" => l.lambda3.to_string(),
        _ => return Err(Error::Parse(format!("unknown config key {key:?}"))),
    })
}

/// Apply `key = value` lines on top of `base`. Blank lines and `#` comments
/// are ignored.
pub fn parse_config_onto(mut base: TrainConfig, text: &str) -> Result<TrainConfig> {
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
        apply_setting(&mut base, k.trim(), v).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
    }
    Ok(base)
}

/// Parse a config file's text; unspecified keys keep the desk defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg = parse_config_onto(TrainConfig::desk(), text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Every key of [`CONFIG_KEYS`] as `key = value` lines.
pub fn config_to_string(cfg: &TrainConfig) -> String {
    CONFIG_KEYS.iter().map(|(k, _)| format!("{k} = {}\n", config_value(cfg, k).unwrap())).collect()
}

/// Settings of the reduced gradient check: C = 4, 4x4 windows, one block
/// per level, 8x8 contrastive patches on 16x16 images.
pub fn gradcheck_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.model = U2FormerConfig {
        base_channels: 4,
        window: 4,
        stage_depths: [1, 1, 1, 1],
        bottleneck_blocks: 1,
        ..Default::default()
    };
    cfg.contrastive.patch_size = 8;
    cfg.contrastive.n_per_role = 1;
    cfg.contrastive.hidden = 8;
    cfg.contrastive.dim = 8;
    cfg.batch_size = 2;
    cfg.seed = 7;
    cfg
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Steps move the objective by about 1e-10, far above its rounding error
/// and small enough to rarely cross a kink of |x|, ReLU or top-k.
pub const GRADCHECK_STEP: Step = Step::Scaled {
    change: 1e-10,
    min: 1e-8,
    max: 1e-3,
};

/// Finite-difference check of the full training objective (pixel,
/// perceptual and contrastive terms) in `f64`, probing `probes` scalars of
/// every parameter tensor.
pub fn gradcheck_small(probes: usize) -> Result<GradCheckReport> {
    let cfg = gradcheck_config();
    let mut store = ParamStore::<f64>::new();
    let net = Network::build(&cfg, &mut store, InitMode::Randomized(0.3))?;
    let extractor = FeatureExtractor::<f64>::random(cfg.extractor_seed);
    let spec = DegradationSpec::new(Kind::Rain, 16, 11);
    let batch: Vec<Triple<f64>> = crate::datasynth::synthesize(&spec, cfg.batch_size, &Backgrounds::Procedural)?
        .iter()
        .map(Triple::from_sample)
        .collect();
    grad_check_steps(
        &mut store,
        |tape, p| batch_objective(&net, &extractor, &cfg, &batch, 0, p, tape, &mut Stream::new(cfg.seed, 0xc0)),
        GRADCHECK_STEP,
        Probes::PerTensor { count: probes, seed: 5 },
    )
}

#[derive(Parser, Debug)]
#[command(name = "u2former", version, about = "Image restoration with a nested U-shaped transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic degradation dataset.
    Synth {
        #[arg(long, default_value = "rain")]
        kind: Kind,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side in pixels.
        #[arg(long, default_value_t = 48)]
        size: usize,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Held-out split evaluated every `eval_every` steps and at the end.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Split one image into background and noise estimates.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_background: PathBuf,
        #[arg(long)]
        out_noise: PathBuf,
    },
    /// PSNR / SSIM of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the training objective's gradients.
    Gradcheck {
        #[arg(long, default_value = "small", value_parser = ["small"])]
        size: String,
        /// Probed scalars per parameter tensor.
        #[arg(long, default_value_t = 1)]
        probes: usize,
    },
    /// Analytic block cost per keep ratio, as CSV.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Aligned table instead of CSV.
        #[arg(long)]
        table: bool,
    },
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => parse_config(&fs::read_to_string(p)?),
        None => Ok(TrainConfig::desk()),
    }
}

fn to_triples(samples: &[crate::datasynth::SamplePair]) -> Vec<Triple<f32>> {
    samples.iter().map(Triple::from_sample).collect()
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out_path: &Path,
    log: Option<&Path>,
    eval_data: Option<&Path>,
    overrides: (Option<usize>, Option<u64>, Option<f64>),
    set: &[String],
    out: &mut dyn Write,
) -> Result<()> {
    let mut cfg = read_config(config)?;
    let (steps, seed, lr) = overrides;
    if let Some(v) = steps {
        cfg.max_steps = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = lr {
        cfg.lr = v;
    }
    for kv in set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        apply_setting(&mut cfg, k.trim(), v)?;
    }
    cfg.validate()?;
    let train = to_triples(&load_dataset(data)?);
    let held_out = eval_data.map(load_dataset).transpose()?;
    let mut trainer = Trainer::new(cfg)?;
    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout()),
    };
    let history = trainer.fit(&train, &mut *sink, |t| {
        if let Some(s) = &held_out {
            let r = evaluate(&t.net.model, &t.store, s)?;
            log::info!("step {}: psnr {:.3} (input {:.3}) ssim {:.4}", t.step, r.psnr, r.baseline_psnr, r.ssim);
        }
        Ok(())
    })?;
    sink.flush()?;
    drop(sink);
    Checkpoint::from_store(&trainer.store, &trainer.cfg).save(out_path)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        writeln!(out, "trained {} steps: total {:.6} -> {:.6}", history.len(), first.total, last.total)?;
    }
    if let Some(s) = &held_out {
        let r = evaluate(&trainer.net.model, &trainer.store, s)?;
        write!(out, "{}", r.table())?;
    }
    Ok(())
}

fn cmd_restore(ckpt: &Path, input: &Path, bg: &Path, noise: &Path) -> Result<()> {
    let (_, net, store) = load_model(ckpt)?;
    let image = load_png(input)?.cast::<f32>();
    let (b, r) = restore(&net.model, &store, &image)?;
    save_png(&b.cast(), bg)?;
    save_png(&r.cast(), noise)
}

pub fn eval_checkpoint(ckpt: &Path, data: &Path) -> Result<EvalReport> {
    let (_, net, store) = load_model(ckpt)?;
    evaluate(&net.model, &store, &load_dataset(data)?)
}

fn flops_ratios_ok(ratios: &[f64]) -> bool {
    !ratios.is_empty() && ratios.iter().all(|&r| r > 0.0 && r <= 1.0)
}

/// Run the command line `args` (program name first) and return the exit
/// code: 0 on success, 1 on a failed check or runtime error, 2 on a usage
/// error.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth { kind, n, out: dir, seed, size } => (|| {
            let spec = DegradationSpec::new(kind, size, seed);
            let entries = write_dataset(&dir, &spec, n, &Backgrounds::Procedural)?;
            writeln!(out, "wrote {} {kind} samples to {}", entries.len(), dir.display())?;
            Ok(())
        })(),
        Command::Train {
            config,
            data,
            out: ckpt,
            log,
            eval_data,
            steps,
            seed,
            lr,
            set,
        } => cmd_train(config.as_deref(), &data, &ckpt, log.as_deref(), eval_data.as_deref(), (steps, seed, lr), &set, out),
        Command::Restore {
            ckpt,
            input,
            out_background,
            out_noise,
        } => cmd_restore(&ckpt, &input, &out_background, &out_noise),
        Command::Eval { ckpt, data } => eval_checkpoint(&ckpt, &data).and_then(|r| Ok(write!(out, "{}", r.table())?)),
        Command::Gradcheck { probes, .. } => match gradcheck_small(probes) {
            Ok(r) => {
                let _ = writeln!(out, "max relative error {:.3e} over {} probes", r.max_rel_error, r.probes);
                if let Some(w) = &r.worst {
                    let _ = writeln!(out, "worst: {}[{}] analytic {:.9e} numeric {:.9e} step {:.1e}", w.param, w.index, w.analytic, w.numeric, w.step);
                }
                if r.max_rel_error <= GRADCHECK_TOLERANCE {
                    return 0;
                }
                let _ = writeln!(err, "gradient check failed: {:.3e} > {GRADCHECK_TOLERANCE:e}", r.max_rel_error);
                return 1;
            }
            Err(e) => Err(e),
        },
        Command::Flops {
            config,
            ratios,
            height,
            width,
            table,
        } => {
            if !flops_ratios_ok(&ratios) {
                let _ = writeln!(err, "error: --ratios must lie in (0, 1], got {ratios:?}\n\nUsage: u2former flops [--config FILE] --ratios R1,R2,...");
                return 2;
            }
            let mut sorted = ratios.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            read_config(config.as_deref()).and_then(|cfg| {
                let base = cfg.model.encoder_utb(1).block(0);
                let rows = sweep_ratio(&base, height, width, &sorted)?;
                let text = if table { sweep_table(&rows) } else { sweep_csv(&rows) };
                Ok(write!(out, "{text}")?)
            })
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::Parse(_) => 2,
                _ => 1,
            }
        }
    }
}
