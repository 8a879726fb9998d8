//! `key = value` run configuration.
//!
//! Every tunable of the pipeline has a dotted key. Unknown keys and values
//! that fail their module's validation are rejected. [`Config::to_text`]
//! writes every key, so a snapshot parsed back gives an equal config.

use std::path::Path;
use std::str::FromStr;

use crate::crbm::{CdHyper, FeatureMode, StackSpec};
use crate::error::{Error, Result};
use crate::mining::PositiveMining;
use crate::optim::{rule_names, BenchSpec, MemoryInit};
use crate::pipeline::StackLayout;
use crate::preproc::{InputSpec, Representation};
use crate::synth::SyntheticSpec;
use crate::train::{EvalConfig, LossKind, TrainConfig};

pub const SEED_ENV: &str = "DAFE_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub train_fraction: f64,
    pub input: InputSpec,
    pub layout: StackLayout,
    pub stack: StackSpec,
    pub stack_variance: f64,
    pub pretrain_epochs: usize,
    pub cd: CdHyper,
    pub mode: FeatureMode,
    /// Components kept per branch; 0 disables PCA.
    pub pca: usize,
    pub head_variance: f64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config::toy()
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// `"8x8p2,16x6p2"` -> `[(8, 8, 2), (16, 6, 2)]`: filters x size, pool.
pub fn parse_layers(value: &str) -> Result<StackSpec> {
    let bad = || Error::config(format!("stack.layers: expected e.g. 8x8p2,16x6p2, got {value:?}"));
    let layers = value
        .split(',')
        .map(|l| {
            let (k, rest) = l.trim().split_once('x').ok_or_else(bad)?;
            let (n, c) = rest.split_once('p').ok_or_else(bad)?;
            Ok((
                k.parse().map_err(|_| bad())?,
                n.parse().map_err(|_| bad())?,
                c.parse().map_err(|_| bad())?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StackSpec { layers })
}

pub fn format_layers(spec: &StackSpec) -> String {
    spec.layers
        .iter()
        .map(|(k, n, c)| format!("{k}x{n}p{c}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl Config {
    /// Desk-scale defaults: 48x48 intensity input, small three-layer stack.
    pub fn toy() -> Self {
        Config {
            seed: 0,
            data: SyntheticSpec::default(),
            train_fraction: 0.5,
            input: InputSpec {
                size: 48,
                representations: vec![Representation::Intensity],
                ..InputSpec::default()
            },
            layout: StackLayout::Joint,
            stack: StackSpec {
                layers: vec![(8, 8, 2), (16, 6, 2), (16, 4, 2)],
            },
            stack_variance: 0.01,
            pretrain_epochs: 5,
            cd: CdHyper::default(),
            mode: FeatureMode::TopLayer,
            pca: 0,
            head_variance: 0.5,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchSpec::default(),
        }
    }

    /// Full-size geometry: 150x150 input, all three representations.
    pub fn full() -> Self {
        let mut c = Config::toy();
        c.data.size = 150;
        c.input = InputSpec::default();
        // one stack per representation, each reduced by its own PCA
        c.layout = StackLayout::PerRepresentation;
        c.stack = StackSpec {
            layers: vec![(40, 12, 2), (100, 10, 2), (40, 6, 2)],
        };
        c.pca = 500;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Config::toy()),
            "full" => Ok(Config::full()),
            _ => Err(Error::config(format!("unknown preset {name:?} (toy, full)"))),
        }
    }

    /// Seeds every component from the top-level seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self.bench.seed = seed;
    }

    /// Apply `key = value` lines over `self`. A `preset` line replaces every
    /// earlier setting except the seed.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value)
                .map_err(|e| Error::config(format!("line {}: {}", no + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::toy();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// `DAFE_SEED`, when set, overrides the configured seed.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = parse(SEED_ENV, v.trim())?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                let seed = self.seed;
                *self = Config::preset(value)?;
                self.set_seed(seed);
            }
            "seed" => self.set_seed(parse(key, value)?),

            "data.identities" => self.data.identities = parse(key, value)?,
            "data.views" => self.data.views = parse(key, value)?,
            "data.images_per_view" => self.data.images_per_view = parse(key, value)?,
            "data.size" => self.data.size = parse(key, value)?,
            "data.curvature" => self.data.curvature = parse(key, value)?,
            "data.noise" => self.data.noise = parse(key, value)?,
            "data.blobs" => self.data.blobs = parse(key, value)?,
            "data.warp" => self.data.warp = parse(key, value)?,
            "data.train_fraction" => self.train_fraction = parse(key, value)?,

            "input.size" => self.input.size = parse(key, value)?,
            "input.representations" => {
                self.input.representations = value
                    .split(',')
                    .map(|r| {
                        Representation::parse(r.trim())
                            .ok_or_else(|| Error::config(format!("{key}: unknown representation {r:?}")))
                    })
                    .collect::<Result<_>>()?
            }
            "input.gabor.wavelengths" => self.input.gabor.wavelengths = parse_list(key, value)?,
            "input.gabor.orientations" => self.input.gabor.orientations = parse(key, value)?,
            "input.gabor.sigma_ratio" => self.input.gabor.sigma_ratio = parse(key, value)?,
            "input.gabor.gamma" => self.input.gabor.gamma = parse(key, value)?,
            "input.gabor.psi" => self.input.gabor.psi = parse(key, value)?,
            "input.gabor.size" => self.input.gabor.size = parse(key, value)?,

            "stack.layout" => {
                self.layout = StackLayout::parse(value)
                    .ok_or_else(|| Error::config(format!("{key}: expected joint or per_representation")))?
            }
            "stack.layers" => self.stack = parse_layers(value)?,
            "stack.init_variance" => self.stack_variance = parse(key, value)?,

            "pretrain.epochs" => self.pretrain_epochs = parse(key, value)?,
            "pretrain.lr" => self.cd.learning_rate = parse(key, value)?,
            "pretrain.momentum" => self.cd.momentum = parse(key, value)?,
            "pretrain.weight_decay" => self.cd.weight_decay = parse(key, value)?,
            "pretrain.sparsity_target" => self.cd.sparsity_target = parse(key, value)?,
            "pretrain.sparsity_weight" => self.cd.sparsity_weight = parse(key, value)?,
            "pretrain.batch_size" => self.cd.batch_size = parse(key, value)?,

            "features.mode" => {
                self.mode = FeatureMode::parse(value)
                    .ok_or_else(|| Error::config(format!("{key}: expected third_layer or concat_all")))?
            }
            "features.pca" => self.pca = parse(key, value)?,

            "head.init_variance" => self.head_variance = parse(key, value)?,

            "loss.kind" => {
                self.train.loss = LossKind::parse(value)
                    .ok_or_else(|| Error::config(format!("{key}: expected quadruplet or triplet")))?
            }
            "loss.alpha1" => self.train.margins.alpha1 = parse(key, value)?,
            "loss.alpha2" => self.train.margins.alpha2 = parse(key, value)?,
            "loss.triplet_alpha" => self.train.triplet_alpha = parse(key, value)?,
            "mining.positive" => {
                self.train.positive = PositiveMining::parse(value)
                    .ok_or_else(|| Error::config(format!("{key}: expected local or random")))?
            }
            "mining.per_identity" => self.train.per_identity = parse_bool(key, value)?,

            "train.iterations" => self.train.iterations = parse(key, value)?,
            "train.batch_p" => self.train.batch_p = parse(key, value)?,
            "train.batch_k" => self.train.batch_k = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.optimizer" => self.train.optimizer = value.to_string(),
            "train.q" => self.train.q = parse(key, value)?,
            "train.neighbors" => self.train.neighbors = parse(key, value)?,
            "train.batch_pool" => self.train.batch_pool = parse(key, value)?,
            "train.finetune_layers" => self.train.finetune_layers = parse(key, value)?,
            "train.augment" => self.train.augment = parse_bool(key, value)?,

            "eval.trials" => self.eval.trials = parse(key, value)?,
            "eval.gallery_view" => self.eval.gallery_view = parse(key, value)?,
            "eval.mq" => self.eval.mq = parse_bool(key, value)?,

            "bench.variant" => self.bench.variant = value.to_string(),
            "bench.q" => self.bench.q = parse(key, value)?,
            "bench.k" => self.bench.k = parse(key, value)?,
            "bench.forced" => self.bench.forced = parse_bool(key, value)?,
            "bench.mu" => self.bench.mu = parse(key, value)?,
            "bench.epochs" => self.bench.epochs = parse(key, value)?,
            "bench.samples" => self.bench.samples = parse(key, value)?,
            "bench.dim" => self.bench.dim = parse(key, value)?,
            "bench.clusters" => self.bench.clusters = parse(key, value)?,
            "bench.spread" => self.bench.spread = parse(key, value)?,
            "bench.noise" => self.bench.noise = parse(key, value)?,
            "bench.log_every" => self.bench.log_every = parse(key, value)?,
            "bench.memory_init" => {
                self.bench.memory_init = match value {
                    "zeros" => MemoryInit::Zeros,
                    "full_pass" => MemoryInit::FullPass,
                    _ => return Err(Error::config(format!("{key}: expected zeros or full_pass"))),
                }
            }
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = |v: bool| v.to_string();
        vec![
            ("seed", self.seed.to_string()),
            ("data.identities", self.data.identities.to_string()),
            ("data.views", self.data.views.to_string()),
            ("data.images_per_view", self.data.images_per_view.to_string()),
            ("data.size", self.data.size.to_string()),
            ("data.curvature", self.data.curvature.to_string()),
            ("data.noise", self.data.noise.to_string()),
            ("data.blobs", self.data.blobs.to_string()),
            ("data.warp", self.data.warp.to_string()),
            ("data.train_fraction", self.train_fraction.to_string()),
            ("input.size", self.input.size.to_string()),
            (
                "input.representations",
                self.input.representations.iter().map(|r| r.name()).collect::<Vec<_>>().join(","),
            ),
            ("input.gabor.wavelengths", join(&self.input.gabor.wavelengths)),
            ("input.gabor.orientations", self.input.gabor.orientations.to_string()),
            ("input.gabor.sigma_ratio", self.input.gabor.sigma_ratio.to_string()),
            ("input.gabor.gamma", self.input.gabor.gamma.to_string()),
            ("input.gabor.psi", self.input.gabor.psi.to_string()),
            ("input.gabor.size", self.input.gabor.size.to_string()),
            ("stack.layout", self.layout.name().to_string()),
            ("stack.layers", format_layers(&self.stack)),
            ("stack.init_variance", self.stack_variance.to_string()),
            ("pretrain.epochs", self.pretrain_epochs.to_string()),
            ("pretrain.lr", self.cd.learning_rate.to_string()),
            ("pretrain.momentum", self.cd.momentum.to_string()),
            ("pretrain.weight_decay", self.cd.weight_decay.to_string()),
            ("pretrain.sparsity_target", self.cd.sparsity_target.to_string()),
            ("pretrain.sparsity_weight", self.cd.sparsity_weight.to_string()),
            ("pretrain.batch_size", self.cd.batch_size.to_string()),
            ("features.mode", self.mode.name().to_string()),
            ("features.pca", self.pca.to_string()),
            ("head.init_variance", self.head_variance.to_string()),
            ("loss.kind", self.train.loss.name().to_string()),
            ("loss.alpha1", self.train.margins.alpha1.to_string()),
            ("loss.alpha2", self.train.margins.alpha2.to_string()),
            ("loss.triplet_alpha", self.train.triplet_alpha.to_string()),
            ("mining.positive", self.train.positive.name().to_string()),
            ("mining.per_identity", b(self.train.per_identity)),
            ("train.iterations", self.train.iterations.to_string()),
            ("train.batch_p", self.train.batch_p.to_string()),
            ("train.batch_k", self.train.batch_k.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.momentum", self.train.momentum.to_string()),
            ("train.optimizer", self.train.optimizer.clone()),
            ("train.q", self.train.q.to_string()),
            ("train.neighbors", self.train.neighbors.to_string()),
            ("train.batch_pool", self.train.batch_pool.to_string()),
            ("train.finetune_layers", self.train.finetune_layers.to_string()),
            ("train.augment", b(self.train.augment)),
            ("eval.trials", self.eval.trials.to_string()),
            ("eval.gallery_view", self.eval.gallery_view.to_string()),
            ("eval.mq", b(self.eval.mq)),
            ("bench.variant", self.bench.variant.clone()),
            ("bench.q", self.bench.q.to_string()),
            ("bench.k", self.bench.k.to_string()),
            ("bench.forced", b(self.bench.forced)),
            ("bench.mu", self.bench.mu.to_string()),
            ("bench.epochs", self.bench.epochs.to_string()),
            ("bench.samples", self.bench.samples.to_string()),
            ("bench.dim", self.bench.dim.to_string()),
            ("bench.clusters", self.bench.clusters.to_string()),
            ("bench.spread", self.bench.spread.to_string()),
            ("bench.noise", self.bench.noise.to_string()),
            ("bench.log_every", self.bench.log_every.to_string()),
            (
                "bench.memory_init",
                match self.bench.memory_init {
                    MemoryInit::Zeros => "zeros",
                    MemoryInit::FullPass => "full_pass",
                }
                .to_string(),
            ),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::config(strip(e));
        self.data.validate().map_err(wrap)?;
        self.cd.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.input.representations.is_empty() {
            return Err(Error::config("input.representations must not be empty"));
        }
        if self.input.representations.contains(&Representation::Gabor) {
            self.input.gabor.validate().map_err(wrap)?;
        }
        if self.data.size < self.input.size {
            log::debug!("images are upsampled from {} to {}", self.data.size, self.input.size);
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("data.train_fraction must lie in (0, 1)"));
        }
        if self.stack.layers.is_empty() {
            return Err(Error::config("stack.layers must list at least one layer"));
        }
        for (name, v) in [("stack.init_variance", self.stack_variance), ("head.init_variance", self.head_variance)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        let names = rule_names();
        for (key, v) in [("train.optimizer", &self.train.optimizer), ("bench.variant", &self.bench.variant)] {
            if !names.contains(&v.as_str()) {
                return Err(Error::config(format!("{key}: unknown optimizer {v:?} ({})", names.join(", "))));
            }
        }
        if self.eval.trials == 0 || self.eval.gallery_view >= self.data.views {
            return Err(Error::config("eval needs >= 1 trial and a gallery view that exists"));
        }
        if self.bench.samples == 0 || self.bench.dim == 0 || !(self.bench.mu > 0.0) || self.bench.log_every == 0 {
            return Err(Error::config("bench needs samples, dim, log_every > 0 and mu > 0"));
        }
        Ok(())
    }
}

/// Inner message of a config error, so wrapping does not stack prefixes.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
