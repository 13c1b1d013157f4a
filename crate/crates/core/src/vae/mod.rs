//! Convolutional variational autoencoder over binary masks.
//!
//! The encoder maps a mask to a diagonal Gaussian posterior, the decoder maps
//! a latent vector to per-voxel Bernoulli probabilities, and training
//! minimizes the negative evidence lower bound: summed Bernoulli NLL plus a
//! (warmed-up) KL divergence to the standard normal prior.

mod train;

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, NamedTensor};
use crate::nn::{ops, ConvSpec, Gradients, Graph, ParamId, ParamSet, Real, Tensor, Var};
use crate::seed;
use crate::volume::{Dims, MaskVolume, ScalarField, Spacing};

pub use train::{
    split_by_volume_quartile, train, train_with_validation, volume_quartiles, EpochRecord, TrainOptions,
    TrainingHistory, MIN_COHORT,
};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LOGVAR_BOUND: f64 = 10.0;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// `(nx, ny, nz)`, each divisible by `2^stages`.
    pub input_dims: Dims,
    pub stages: usize,
    /// Encoder output channels per stage.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub kl_warmup_steps: usize,
    pub prob_clamp_eps: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            input_dims: [48, 32, 16],
            stages: 3,
            channels: vec![8, 16, 32],
            latent_dim: 32,
            kl_warmup_steps: 80,
            prob_clamp_eps: 1e-6,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.stages == 0 || self.channels.len() != self.stages {
            return bad(format!(
                "need one channel count per stage, got {} for {} stages",
                self.channels.len(),
                self.stages
            ));
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        let f = 1usize << self.stages;
        if self.input_dims.iter().any(|&n| n == 0 || n % f != 0) {
            return bad(format!(
                "input dims {:?} must be positive multiples of {f}",
                self.input_dims
            ));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if !(self.prob_clamp_eps > 0.0 && self.prob_clamp_eps < 0.5) {
            return bad(format!(
                "prob_clamp_eps must lie in (0, 0.5), got {}",
                self.prob_clamp_eps
            ));
        }
        Ok(())
    }

    /// Feature grid `[C, D, H, W]` at the bottleneck.
    pub fn bottleneck_shape(&self) -> [usize; 4] {
        let f = 1usize << self.stages;
        let [nx, ny, nz] = self.input_dims;
        [self.channels[self.stages - 1], nz / f, ny / f, nx / f]
    }

    pub fn voxels(&self) -> usize {
        self.input_dims.iter().product()
    }

    /// KL weight at optimizer step `step`: linear from 0 to 1 over the
    /// warm-up, then 1.
    pub fn kl_weight(&self, step: usize) -> f64 {
        if self.kl_warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.kl_warmup_steps as f64).min(1.0)
        }
    }
}

/// Diagonal Gaussian `N(mu, exp(logvar))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentPosterior {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::LengthMismatch {
                expected: mu.len(),
                found: logvar.len(),
            });
        }
        if mu.is_empty() || !mu.iter().chain(&logvar).all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("posterior must be non-empty and finite".into()));
        }
        Ok(Self { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Standard normal draws for the reparameterization.
pub fn sample_eps(dim: usize, rng_seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(rng_seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `mu + exp(logvar / 2) * eps` for given noise.
pub fn reparameterize_with(post: &LatentPosterior, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != post.dim() {
        return Err(Error::LengthMismatch {
            expected: post.dim(),
            found: eps.len(),
        });
    }
    Ok(post
        .mu
        .iter()
        .zip(&post.logvar)
        .zip(eps)
        .map(|((m, l), e)| m + (l / 2.0).exp() * e)
        .collect())
}

pub fn reparameterize(post: &LatentPosterior, rng_seed: u64) -> Vec<f64> {
    reparameterize_with(post, &sample_eps(post.dim(), rng_seed)).expect("noise length matches")
}

/// Summed Bernoulli negative log-likelihood of `mask` under `probs`.
pub fn bernoulli_nll(probs: &ScalarField, mask: &MaskVolume) -> Result<f64> {
    if probs.dims() != mask.dims() {
        return Err(Error::DimMismatch(probs.dims(), mask.dims()));
    }
    let target: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    Ok(ops::bernoulli_nll(probs.data(), &target))
}

/// `KL(q || N(0, I))` in closed form.
pub fn kl_gaussian(post: &LatentPosterior) -> f64 {
    ops::kl_gaussian(&post.mu, &post.logvar)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    enc: Vec<(Affine, Affine)>,
    enc_fc: Affine,
    dec_fc: Affine,
    /// Deepest stage first.
    dec: Vec<(Affine, Affine)>,
    out: Affine,
}

/// Encoder and decoder weights together with the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams<T: Real = f32> {
    config: VaeConfig,
    params: ParamSet<T>,
    layout: Layout,
}

fn build<T: Real>(config: &VaeConfig, mut init: impl FnMut(&str, &[usize], f64) -> Tensor<T>) -> (ParamSet<T>, Layout) {
    let mut ps = ParamSet::new();
    let k3 = KERNEL * KERNEL * KERNEL;
    let mut affine = |ps: &mut ParamSet<T>, name: String, wshape: Vec<usize>, fan_in: f64, gain: f64| {
        let w = init(&format!("{name}.w"), &wshape, (gain / fan_in).sqrt());
        let bshape = [if name.contains(".up") { wshape[1] } else { wshape[0] }];
        let b = init(&format!("{name}.b"), &bshape, 0.0);
        Affine {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), b),
        }
    };
    let mut enc = Vec::new();
    let mut cin = 1;
    for (s, &c) in config.channels.iter().enumerate() {
        let a = affine(
            &mut ps,
            format!("enc{s}.conv"),
            vec![c, cin, 3, 3, 3],
            (cin * k3) as f64,
            2.0,
        );
        let b = affine(
            &mut ps,
            format!("enc{s}.down"),
            vec![c, c, 3, 3, 3],
            (c * k3) as f64,
            2.0,
        );
        enc.push((a, b));
        cin = c;
    }
    let bottleneck: usize = config.bottleneck_shape().iter().product();
    let l = config.latent_dim;
    let enc_fc = affine(
        &mut ps,
        "enc.fc".into(),
        vec![2 * l, bottleneck],
        bottleneck as f64,
        1.0,
    );
    let dec_fc = affine(&mut ps, "dec.fc".into(), vec![bottleneck, l], l as f64, 2.0);
    let mut dec = Vec::new();
    for s in (0..config.stages).rev() {
        let cin = config.channels[s];
        let cout = config.channels[s.saturating_sub(1)];
        // Each output voxel of a stride-2 transposed conv sees about k^3/8 taps.
        let up = affine(
            &mut ps,
            format!("dec{s}.up"),
            vec![cin, cout, 3, 3, 3],
            (cin * k3) as f64 / 8.0,
            2.0,
        );
        let conv = affine(
            &mut ps,
            format!("dec{s}.conv"),
            vec![cout, cout, 3, 3, 3],
            (cout * k3) as f64,
            2.0,
        );
        dec.push((up, conv));
    }
    let c0 = config.channels[0];
    let out = affine(&mut ps, "dec.out".into(), vec![1, c0, 3, 3, 3], (c0 * k3) as f64, 1.0);
    (
        ps,
        Layout {
            enc,
            enc_fc,
            dec_fc,
            dec,
            out,
        },
    )
}

fn mask_tensor<T: Real>(mask: &MaskVolume) -> Tensor<T> {
    let [nx, ny, nz] = mask.dims();
    let data = mask
        .data()
        .iter()
        .map(|&v| if v == 1 { T::one() } else { T::zero() })
        .collect();
    Tensor::new(vec![1, nz, ny, nx], data).expect("mask length matches its dims")
}

const S1: ConvSpec = ConvSpec::new(1, 1);
const S2: ConvSpec = ConvSpec::new(2, 1);

impl<T: Real> VaeParams<T> {
    /// He-style Gaussian initialization for layers followed by leaky ReLU,
    /// variance `1/fan_in` for the posterior head and output conv, zero
    /// biases except the output, which starts at a low foreground prior.
    pub fn init(config: VaeConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed);
        let (params, layout) = build(&config, |name, shape, std| {
            let n: usize = shape.iter().product();
            if name == "dec.out.b" {
                return Tensor::filled(shape, T::lit(-2.0));
            }
            let data = (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    T::lit(g * std)
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape and data agree")
        });
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> VaeParams<U> {
        VaeParams {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_mask(&self, mask: &MaskVolume) -> Result<()> {
        if mask.dims() != self.config.input_dims {
            return Err(Error::DimMismatch(mask.dims(), self.config.input_dims));
        }
        Ok(())
    }

    fn affine_vars(g: &mut Graph<'_, T>, a: Affine) -> (Var, Var) {
        (g.param(a.w), g.param(a.b))
    }

    /// Records the encoder on `g`; returns `(mu, logvar)` nodes.
    fn encode_graph(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let slope = T::lit(LEAKY_SLOPE);
        let mut h = x;
        for &(a, b) in &self.layout.enc {
            let (w, bias) = Self::affine_vars(g, a);
            h = g.conv3d(h, w, bias, S1)?;
            h = g.leaky_relu(h, slope);
            let (w, bias) = Self::affine_vars(g, b);
            h = g.conv3d(h, w, bias, S2)?;
            h = g.leaky_relu(h, slope);
        }
        let (w, b) = Self::affine_vars(g, self.layout.enc_fc);
        let stats = g.linear(h, w, b)?;
        let l = self.config.latent_dim;
        let mu = g.slice(stats, 0, l)?;
        let logvar = g.slice(stats, l, l)?;
        let logvar = g.clamp(logvar, T::lit(-LOGVAR_BOUND), T::lit(LOGVAR_BOUND));
        Ok((mu, logvar))
    }

    /// Records the decoder on `g`; returns the clamped probability node.
    fn decode_graph(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let slope = T::lit(LEAKY_SLOPE);
        let (w, b) = Self::affine_vars(g, self.layout.dec_fc);
        let h = g.linear(z, w, b)?;
        let h = g.leaky_relu(h, slope);
        let mut h = g.reshape(h, &self.config.bottleneck_shape())?;
        for &(up, conv) in &self.layout.dec {
            let (w, b) = Self::affine_vars(g, up);
            h = g.conv3d_transpose(h, w, b, S2, 1)?;
            h = g.leaky_relu(h, slope);
            let (w, b) = Self::affine_vars(g, conv);
            h = g.conv3d(h, w, b, S1)?;
            h = g.leaky_relu(h, slope);
        }
        let (w, b) = Self::affine_vars(g, self.layout.out);
        let logits = g.conv3d(h, w, b, S1)?;
        let p = g.sigmoid(logits);
        let eps = self.config.prob_clamp_eps;
        Ok(g.clamp(p, T::lit(eps), T::lit(1.0 - eps)))
    }

    pub fn encode(&self, mask: &MaskVolume) -> Result<LatentPosterior> {
        self.check_mask(mask)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(mask_tensor(mask));
        let (mu, lv) = self.encode_graph(&mut g, x)?;
        let to_f64 = |v: Var| g.value(v).data().iter().map(|x| x.as_f64()).collect();
        LatentPosterior::new(to_f64(mu), to_f64(lv))
    }

    /// Decoder probabilities on the configured grid with the given spacing.
    pub fn decode_with_spacing(&self, z: &[f64], spacing: Spacing) -> Result<ScalarField> {
        if z.len() != self.config.latent_dim {
            return Err(Error::LengthMismatch {
                expected: self.config.latent_dim,
                found: z.len(),
            });
        }
        let mut g = Graph::new(&self.params);
        let zin = g.input(Tensor::from_vec(z.iter().map(|&v| T::lit(v)).collect()));
        let p = self.decode_graph(&mut g, zin)?;
        let data = g.value(p).data().iter().map(|v| v.as_f64()).collect();
        ScalarField::new(self.config.input_dims, spacing, data)
    }

    /// Decoder probabilities with unit spacing.
    pub fn decode(&self, z: &[f64]) -> Result<ScalarField> {
        self.decode_with_spacing(z, [1.0; 3])
    }

    /// Binarized (`p > 0.5`) decoding of the posterior mean.
    pub fn reconstruct(&self, mask: &MaskVolume) -> Result<MaskVolume> {
        let post = self.encode(mask)?;
        let probs = self.decode_with_spacing(&post.mu, mask.spacing())?;
        Ok(MaskVolume::from_field(&probs, 0.5))
    }

    fn loss_graph<'a>(&'a self, mask: &MaskVolume, eps: &[T], kl_weight: f64) -> Result<(Graph<'a, T>, Var, Var, Var)> {
        let (g, t, n, k, _) = self.loss_graph_probs(mask, eps, kl_weight)?;
        Ok((g, t, n, k))
    }

    #[allow(clippy::type_complexity)]
    fn loss_graph_probs<'a>(
        &'a self,
        mask: &MaskVolume,
        eps: &[T],
        kl_weight: f64,
    ) -> Result<(Graph<'a, T>, Var, Var, Var, Var)> {
        self.check_mask(mask)?;
        if !(0.0..=1.0).contains(&kl_weight) {
            return Err(Error::InvalidParameter(format!(
                "kl_weight must lie in [0, 1], got {kl_weight}"
            )));
        }
        if eps.len() != self.config.latent_dim {
            return Err(Error::LengthMismatch {
                expected: self.config.latent_dim,
                found: eps.len(),
            });
        }
        let mut g = Graph::new(&self.params);
        let target = mask_tensor::<T>(mask);
        let x = g.input(target.clone());
        let (mu, lv) = self.encode_graph(&mut g, x)?;
        let z = g.reparameterize(mu, lv, eps.to_vec())?;
        let p = self.decode_graph(&mut g, z)?;
        let nll = g.bernoulli_nll(p, target.data())?;
        let kl = g.kl_gaussian(mu, lv)?;
        let total = g.weighted_sum(nll, T::one(), kl, T::lit(kl_weight))?;
        Ok((g, total, nll, kl, p))
    }

    fn terms(g: &Graph<'_, T>, total: Var, nll: Var, kl: Var) -> LossTerms {
        let s = |v: Var| g.value(v).data()[0].as_f64();
        LossTerms {
            total: s(total),
            nll: s(nll),
            kl: s(kl),
        }
    }

    /// `nll + kl_weight * kl` for the given reparameterization noise.
    pub fn loss_with_eps(&self, mask: &MaskVolume, eps: &[T], kl_weight: f64) -> Result<LossTerms> {
        let (g, t, n, k) = self.loss_graph(mask, eps, kl_weight)?;
        Ok(Self::terms(&g, t, n, k))
    }

    /// Loss with noise drawn from `rng_seed`.
    pub fn loss(&self, mask: &MaskVolume, rng_seed: u64, kl_weight: f64) -> Result<LossTerms> {
        let eps: Vec<T> = sample_eps(self.config.latent_dim, rng_seed)
            .into_iter()
            .map(T::lit)
            .collect();
        self.loss_with_eps(mask, &eps, kl_weight)
    }

    /// Deterministic evaluation at `z = mu` with the full KL weight: the loss
    /// terms and the binarized reconstruction from a single forward pass.
    pub fn evaluate(&self, mask: &MaskVolume) -> Result<(LossTerms, MaskVolume)> {
        let eps = vec![T::zero(); self.config.latent_dim];
        let (g, t, n, k, p) = self.loss_graph_probs(mask, &eps, 1.0)?;
        let data = g.value(p).data().iter().map(|v| v.as_f64()).collect();
        let probs = ScalarField::new(mask.dims(), mask.spacing(), data)?;
        Ok((Self::terms(&g, t, n, k), MaskVolume::from_field(&probs, 0.5)))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        mask: &MaskVolume,
        eps: &[T],
        kl_weight: f64,
    ) -> Result<(LossTerms, Gradients<T>)> {
        let (g, t, n, k) = self.loss_graph(mask, eps, kl_weight)?;
        let grads = g.backward(t)?;
        Ok((Self::terms(&g, t, n, k), grads))
    }

    /// Named tensors for a checkpoint: architecture fields under `meta.*`,
    /// then every parameter.
    pub fn to_named(&self) -> Vec<NamedTensor> {
        let c = &self.config;
        let as_f32 = |v: &[usize]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let mut out = vec![
            NamedTensor::new("meta.input_dims", vec![3], as_f32(&c.input_dims)),
            NamedTensor::new("meta.channels", vec![c.stages], as_f32(&c.channels)),
            NamedTensor::new("meta.latent_dim", vec![1], vec![c.latent_dim as f32]),
            NamedTensor::new("meta.kl_warmup_steps", vec![1], vec![c.kl_warmup_steps as f32]),
            NamedTensor::new("meta.prob_clamp_eps", vec![1], vec![c.prob_clamp_eps as f32]),
        ];
        out.extend(checkpoint::params_to_named(&self.params));
        out
    }

    pub fn from_named(tensors: &[NamedTensor]) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))
        };
        let ints = |name: &str| -> Result<Vec<usize>> {
            get(name)?
                .data
                .iter()
                .map(|&v| {
                    (v >= 0.0 && v.fract() == 0.0)
                        .then_some(v as usize)
                        .ok_or_else(|| Error::Checkpoint(format!("{name} holds a non-integer")))
                })
                .collect()
        };
        let dims = ints("meta.input_dims")?;
        let channels = ints("meta.channels")?;
        let config = VaeConfig {
            input_dims: <[usize; 3]>::try_from(dims.as_slice())
                .map_err(|_| Error::Checkpoint("meta.input_dims must hold 3 values".into()))?,
            stages: channels.len(),
            channels,
            latent_dim: ints("meta.latent_dim")?.first().copied().unwrap_or(0),
            kl_warmup_steps: ints("meta.kl_warmup_steps")?.first().copied().unwrap_or(0),
            // Shortest decimal form of the stored f32, so 1e-6 reads back as 1e-6.
            prob_clamp_eps: get("meta.prob_clamp_eps")?
                .data
                .first()
                .map_or(0.0, |v| v.to_string().parse().unwrap_or(0.0)),
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
        let (mut params, layout) = build::<T>(&config, |_, shape, _| Tensor::zeros(shape));
        let weights: Vec<NamedTensor> = tensors
            .iter()
            .filter(|t| !t.name.starts_with("meta."))
            .cloned()
            .collect();
        checkpoint::load_named_into(&mut params, &weights)?;
        Ok(Self { config, params, layout })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write_named(path, &self.to_named())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named(&checkpoint::read_named(path)?)
    }
}
