//! Run configuration: a flat JSON object with dotted keys, overridable by
//! `key=value` strings, resolved into typed settings for every stage.
//!
//! ```json
//! { "seed": 7, "model.latent_dim": 32, "sgd.lr0": 0.001, "aug.scale": [0.9, 1.1] }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::AugmentRanges;
use crate::error::{Error, Result};
use crate::eval::SvmParams;
use crate::synth::{AbnormalityParams, ShapeGenParams};
use crate::vae::{TrainOptions, VaeConfig};
use crate::volume::{Dims, Spacing};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global seed; every stochastic component derives its own stream"),
    ("data.grid", "[nx, ny, nz] working grid"),
    ("data.spacing", "[sx, sy, sz] working spacing in mm"),
    ("data.n_healthy", "healthy masks produced by synth"),
    ("data.n_abnormal", "abnormal masks produced by synth"),
    ("data.abnormal.shrink_center", "centerline position of the constriction"),
    (
        "data.abnormal.shrink_width",
        "constriction support as a centerline fraction",
    ),
    ("data.abnormal.shrink_factor", "radius multiplier at the constriction"),
    (
        "data.abnormal.volume_preserving",
        "rescale abnormal shapes to the paired healthy volume",
    ),
    ("model.stages", "encoder/decoder resolution stages"),
    ("model.channels", "channels per stage"),
    ("model.latent_dim", "latent dimension"),
    (
        "model.kl_warmup_fraction",
        "KL warm-up length as a fraction of optimizer steps",
    ),
    ("model.prob_clamp_eps", "probability clamp before the log"),
    ("sgd.lr0", "initial learning rate"),
    ("sgd.power", "polynomial decay exponent"),
    ("sgd.momentum", "SGD momentum"),
    ("sgd.grad_clip_norm", "global gradient norm cap; 0 disables"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "micro-batch size"),
    ("train.accum_steps", "micro-batches per optimizer step"),
    ("train.val_fraction", "validation share of the training cohort"),
    ("aug.enabled", "random similarity augmentation during training"),
    ("aug.translation", "[tx, ty, tz] maximum shift in voxels"),
    ("aug.rotation_deg", "[rx, ry, rz] maximum rotation in degrees"),
    ("aug.scale", "[lo, hi] isotropic scale range"),
    ("svm.lambda", "linear SVM regularization"),
    ("svm.epochs", "linear SVM passes over the training fold"),
    ("fewshot.ratios", "train/test ratios evaluated besides leave-one-out"),
    ("eval.n_boot", "bootstrap replicates"),
    ("asm.k", "signed-distance PCA components"),
    ("interp.ts", "interpolation positions t"),
];

/// Raw key/value pairs, sorted by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlatConfig {
    values: BTreeMap<String, Value>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = v else {
            return Err(Error::Config("top level must be an object".into()));
        };
        let mut out = Self::default();
        for (k, v) in map {
            out.insert(k, v)?;
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn insert(&mut self, key: String, value: Value) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key, value);
        Ok(())
    }

    /// Applies `key=value`; the value is read as JSON, falling back to a
    /// plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.insert(k.trim().to_string(), value)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    /// Canonical JSON text: keys sorted, compact.
    pub fn canonical(&self) -> String {
        serde_json::to_string(&self.values).expect("JSON values serialize")
    }

    /// Hex SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn num(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .ok_or_else(|| Error::Config(format!("{key} must be a number"))),
        }
    }

    fn uint(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(|u| Some(u as usize))
                .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer"))),
        }
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_bool()
                .map(Some)
                .ok_or_else(|| Error::Config(format!("{key} must be true or false"))),
        }
    }

    fn nums(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| Error::Config(format!("{key} must hold numbers")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(_) => Err(Error::Config(format!("{key} must be an array"))),
        }
    }

    fn triple(&self, key: &str) -> Result<Option<[f64; 3]>> {
        self.nums(key)?
            .map(|v| <[f64; 3]>::try_from(v).map_err(|_| Error::Config(format!("{key} must hold 3 numbers"))))
            .transpose()
    }

    fn uints(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.nums(key)?
            .map(|v| {
                v.into_iter()
                    .map(|x| {
                        if x >= 0.0 && x.fract() == 0.0 {
                            Ok(x as usize)
                        } else {
                            Err(Error::Config(format!("{key} must hold non-negative integers")))
                        }
                    })
                    .collect()
            })
            .transpose()
    }
}

/// Fully resolved settings for every command.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub grid: Dims,
    pub spacing: Spacing,
    pub shape: ShapeGenParams,
    pub abnormality: AbnormalityParams,
    pub n_healthy: usize,
    pub n_abnormal: usize,
    pub model: VaeConfig,
    pub kl_warmup_fraction: f64,
    pub train: TrainOptions,
    pub svm: SvmParams,
    pub fewshot_ratios: Vec<f64>,
    pub n_boot: usize,
    pub asm_k: usize,
    pub interp_ts: Vec<f64>,
}

pub const DEFAULT_INTERP_TS: [f64; 7] = [-0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25];

impl Settings {
    pub fn resolve(cfg: &FlatConfig) -> Result<Self> {
        let seed = cfg.uint("seed")?.unwrap_or(0) as u64;
        let grid = match cfg.uints("data.grid")? {
            Some(v) => <[usize; 3]>::try_from(v).map_err(|_| Error::Config("data.grid must hold 3 integers".into()))?,
            None => [48, 32, 16],
        };
        let mut shape = ShapeGenParams::for_grid(grid)?;
        if let Some(s) = cfg.triple("data.spacing")? {
            shape.spacing = s;
        }
        let spacing = shape.spacing;
        let mut ab = AbnormalityParams::default();
        if let Some(v) = cfg.num("data.abnormal.shrink_center")? {
            ab.shrink_center_t = v;
        }
        if let Some(v) = cfg.num("data.abnormal.shrink_width")? {
            ab.shrink_width = v;
        }
        if let Some(v) = cfg.num("data.abnormal.shrink_factor")? {
            ab.shrink_factor = v;
        }
        if let Some(v) = cfg.flag("data.abnormal.volume_preserving")? {
            ab.volume_preserving = v;
        }
        ab.validate()?;

        let mut model = VaeConfig {
            input_dims: grid,
            ..VaeConfig::default()
        };
        if let Some(v) = cfg.uint("model.stages")? {
            model.stages = v;
        }
        if let Some(v) = cfg.uints("model.channels")? {
            model.channels = v;
        } else if model.stages != model.channels.len() {
            model.channels = (0..model.stages).map(|s| 8 << s).collect();
        }
        if let Some(v) = cfg.uint("model.latent_dim")? {
            model.latent_dim = v;
        }
        if let Some(v) = cfg.num("model.prob_clamp_eps")? {
            model.prob_clamp_eps = v;
        }
        let kl_warmup_fraction = cfg.num("model.kl_warmup_fraction")?.unwrap_or(0.1);
        if !(0.0..=1.0).contains(&kl_warmup_fraction) {
            return Err(Error::Config("model.kl_warmup_fraction must lie in [0, 1]".into()));
        }

        let mut train = TrainOptions {
            seed,
            ..TrainOptions::default()
        };
        if let Some(v) = cfg.num("sgd.lr0")? {
            train.sgd.lr0 = v;
        }
        if let Some(v) = cfg.num("sgd.power")? {
            train.sgd.power = v;
        }
        if let Some(v) = cfg.num("sgd.momentum")? {
            train.sgd.momentum = v;
        }
        if let Some(v) = cfg.num("sgd.grad_clip_norm")? {
            train.grad_clip_norm = (v > 0.0).then_some(v);
        }
        if let Some(v) = cfg.uint("train.epochs")? {
            train.epochs = v;
        }
        if let Some(v) = cfg.uint("train.batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = cfg.uint("train.accum_steps")? {
            train.accum_steps = v;
        }
        if let Some(v) = cfg.num("train.val_fraction")? {
            train.val_fraction = v;
        }
        if let Some(v) = cfg.flag("aug.enabled")? {
            train.augment = v;
        }
        let mut aug = AugmentRanges::default();
        if let Some(v) = cfg.triple("aug.translation")? {
            aug.max_translation_voxels = v;
        }
        if let Some(v) = cfg.triple("aug.rotation_deg")? {
            aug.max_rotation_deg = v;
        }
        if let Some(v) = cfg.nums("aug.scale")? {
            let [lo, hi] =
                <[f64; 2]>::try_from(v).map_err(|_| Error::Config("aug.scale must hold 2 numbers".into()))?;
            aug.scale_range = (lo, hi);
        }
        train.aug = aug;
        train.validate()?;

        let mut svm = SvmParams {
            seed: crate::seed::derive(seed, 20),
            ..SvmParams::default()
        };
        if let Some(v) = cfg.num("svm.lambda")? {
            svm.lambda = v;
        }
        if let Some(v) = cfg.uint("svm.epochs")? {
            svm.epochs = v;
        }
        let fewshot_ratios = cfg
            .nums("fewshot.ratios")?
            .unwrap_or_else(|| vec![0.05, 0.1, 0.25, 0.5]);
        if let Some(r) = fewshot_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!(
                "fewshot.ratios entries must lie in (0, 1], got {r}"
            )));
        }
        let n_boot = cfg.uint("eval.n_boot")?.unwrap_or(10_000);
        if n_boot == 0 {
            return Err(Error::Config("eval.n_boot must be at least 1".into()));
        }
        Ok(Self {
            seed,
            grid,
            spacing,
            shape,
            abnormality: ab,
            n_healthy: cfg.uint("data.n_healthy")?.unwrap_or(200),
            n_abnormal: cfg.uint("data.n_abnormal")?.unwrap_or(0),
            model,
            kl_warmup_fraction,
            train,
            svm,
            fewshot_ratios,
            n_boot,
            asm_k: cfg.uint("asm.k")?.unwrap_or(10),
            interp_ts: cfg.nums("interp.ts")?.unwrap_or_else(|| DEFAULT_INTERP_TS.to_vec()),
        })
    }

    /// Model configuration with the KL warm-up set from the fraction and the
    /// number of optimizer steps for `n_train` training masks.
    pub fn model_for(&self, n_train: usize) -> VaeConfig {
        let total = self.train.epochs * self.train.steps_per_epoch(n_train);
        VaeConfig {
            kl_warmup_steps: (self.kl_warmup_fraction * total as f64).round() as usize,
            ..self.model.clone()
        }
    }
}

/// Number of folds giving a train/test ratio close to `ratio` when one fold
/// trains and the rest test.
pub fn folds_for_ratio(ratio: f64, n: usize) -> usize {
    ((1.0 + 1.0 / ratio).round() as usize).clamp(2, n)
}
