//! Anomaly detection on latent codes: distance to the healthy mean
//! (zero-shot), a linear max-margin classifier (few-shot), and the volume and
//! signed-distance PCA ("active shape model") baselines.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::checkpoint::NamedTensor;
use crate::seed;
use crate::volume::{signed_distance, volume_mm3, Dims, MaskVolume};

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::LengthMismatch { expected, found });
    }
    Ok(())
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidParameter(format!("labels must be 0 or 1, got {bad}")));
    }
    for class in [0u8, 1] {
        if !labels.contains(&class) {
            return Err(Error::SingleClass { missing: class });
        }
    }
    Ok(())
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Healthy-cohort summary used by the zero-shot scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortStats {
    pub z_bar: Vec<f64>,
    pub n: usize,
    /// Mean healthy volume, when fitted with volumes.
    pub mean_volume_mm3: Option<f64>,
}

/// Arithmetic mean of the healthy latent vectors.
pub fn fit_normative(latents: &[Vec<f64>]) -> Result<CohortStats> {
    let first = latents.first().ok_or(Error::EmptyCohort)?;
    let dim = first.len();
    let mut sum = vec![0.0; dim];
    for z in latents {
        check_len(dim, z.len())?;
        for (s, v) in sum.iter_mut().zip(z) {
            *s += v;
        }
    }
    let n = latents.len();
    let z_bar: Vec<f64> = sum.into_iter().map(|s| s / n as f64).collect();
    if !z_bar.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("latent mean is not finite".into()));
    }
    Ok(CohortStats {
        z_bar,
        n,
        mean_volume_mm3: None,
    })
}

/// [`fit_normative`] plus the mean physical volume of the healthy masks.
pub fn fit_normative_with_volumes(latents: &[Vec<f64>], masks: &[MaskVolume]) -> Result<CohortStats> {
    let mut stats = fit_normative(latents)?;
    check_len(latents.len(), masks.len())?;
    stats.mean_volume_mm3 = Some(masks.iter().map(volume_mm3).sum::<f64>() / masks.len() as f64);
    Ok(stats)
}

/// `||latent - z_bar||_2`; larger is more abnormal.
pub fn zero_shot_score(latent: &[f64], stats: &CohortStats) -> Result<f64> {
    check_len(stats.z_bar.len(), latent.len())?;
    Ok(l2(latent, &stats.z_bar))
}

/// `|volume(mask) - mean healthy volume|`.
pub fn volume_baseline_score(mask: &MaskVolume, stats: &CohortStats) -> Result<f64> {
    let mean = stats
        .mean_volume_mm3
        .ok_or_else(|| Error::InvalidParameter("cohort statistics were fitted without volumes".into()))?;
    Ok((volume_mm3(mask) - mean).abs())
}

/// Linear classifier on standardized features. The bias is learned as the
/// weight of a constant feature and is regularized with the other weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub w: Vec<f64>,
    pub b: f64,
    pub lambda: f64,
    /// Per-dimension training mean and standard deviation.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearClassifier {
    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn standardize(&self, feature: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), feature.len())?;
        Ok(feature
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect())
    }

    /// `lambda/2 (|w|^2 + b^2) + mean hinge loss` on the given data.
    pub fn objective(&self, features: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
        check_len(features.len(), labels.len())?;
        let mut hinge = 0.0;
        for (x, &l) in features.iter().zip(labels) {
            let y = if l == 1 { 1.0 } else { -1.0 };
            hinge += (1.0 - y * svm_decision(self, x)?).max(0.0);
        }
        let reg = self.w.iter().map(|v| v * v).sum::<f64>() + self.b * self.b;
        Ok(0.5 * self.lambda * reg + hinge / features.len() as f64)
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        let d = self.dim();
        vec![
            NamedTensor::from_f64("svm.w", vec![d], &self.w),
            NamedTensor::from_f64("svm.b", vec![1], &[self.b]),
            NamedTensor::from_f64("svm.lambda", vec![1], &[self.lambda]),
            NamedTensor::from_f64("svm.mean", vec![d], &self.mean),
            NamedTensor::from_f64("svm.scale", vec![d], &self.scale),
        ]
    }

    pub fn from_named(tensors: &[NamedTensor]) -> Result<Self> {
        let get = |name: &str| -> Result<Vec<f64>> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(NamedTensor::to_f64)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))
        };
        let w = get("svm.w")?;
        let (mean, scale) = (get("svm.mean")?, get("svm.scale")?);
        let scalar = |name: &str| -> Result<f64> {
            get(name)?
                .first()
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("{name} is empty")))
        };
        if mean.len() != w.len() || scale.len() != w.len() {
            return Err(Error::Checkpoint("classifier tensors disagree in length".into()));
        }
        Ok(Self {
            w,
            b: scalar("svm.b")?,
            lambda: scalar("svm.lambda")?,
            mean,
            scale,
        })
    }
}

/// Per-dimension mean and population standard deviation; constant
/// dimensions get unit scale.
fn standardization(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = features.len() as f64;
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for x in features {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for x in features {
        for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let sd = v.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Pegasos training of a linear SVM; returns the Polyak average of the
/// iterates. See [`fit_linear_svm_traced`].
pub fn fit_linear_svm(
    features: &[Vec<f64>],
    labels: &[u8],
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> Result<LinearClassifier> {
    fit_linear_svm_traced(features, labels, lambda, epochs, seed).map(|(c, _)| c)
}

/// Pegasos: for `t = 1..epochs*n`, draw a sample uniformly, step by
/// `1/(lambda t)` along the subgradient of `lambda/2 |w|^2 + hinge`, then
/// project onto the ball of radius `1/sqrt(lambda)`. Also returns the
/// averaged classifier at the end of every epoch.
pub fn fit_linear_svm_traced(
    features: &[Vec<f64>],
    labels: &[u8],
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> Result<(LinearClassifier, Vec<LinearClassifier>)> {
    check_len(features.len(), labels.len())?;
    check_labels(labels)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let d = features[0].len();
    for x in features {
        check_len(d, x.len())?;
    }
    let (mean, scale) = standardization(features);
    // Standardized features with a trailing constant 1 for the bias.
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|x| {
            let mut v: Vec<f64> = x.iter().zip(&mean).zip(&scale).map(|((x, m), s)| (x - m) / s).collect();
            v.push(1.0);
            v
        })
        .collect();
    let ys: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let n = xs.len();
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; d + 1];
    let mut avg = vec![0.0; d + 1];
    let mut rng = seed::rng(seed);
    let make = |v: &[f64]| LinearClassifier {
        w: v[..d].to_vec(),
        b: v[d],
        lambda,
        mean: mean.clone(),
        scale: scale.clone(),
    };
    let mut trace = Vec::with_capacity(epochs);
    let mut t = 0usize;
    for _ in 0..epochs {
        for _ in 0..n {
            t += 1;
            let i = rng.random_range(0..n);
            let eta = 1.0 / (lambda * t as f64);
            let margin = ys[i] * w.iter().zip(&xs[i]).map(|(a, b)| a * b).sum::<f64>();
            let shrink = 1.0 - eta * lambda;
            for v in w.iter_mut() {
                *v *= shrink;
            }
            if margin < 1.0 {
                for (v, x) in w.iter_mut().zip(&xs[i]) {
                    *v += eta * ys[i] * x;
                }
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                for v in w.iter_mut() {
                    *v *= radius / norm;
                }
            }
            let a = 1.0 / t as f64;
            for (m, v) in avg.iter_mut().zip(&w) {
                *m += a * (v - *m);
            }
        }
        trace.push(make(&avg));
    }
    Ok((make(&avg), trace))
}

/// `w . standardize(feature) + b`; positive predicts class 1.
pub fn svm_decision(clf: &LinearClassifier, feature: &[f64]) -> Result<f64> {
    let x = clf.standardize(feature)?;
    Ok(clf.w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + clf.b)
}

/// PCA model of flattened signed distance maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AsmModel {
    pub dims: Dims,
    pub mean_sdf: Vec<f64>,
    /// `K` orthonormal rows of length `d`, by non-increasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub variances: Vec<f64>,
}

impl AsmModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        let d = self.mean_sdf.len();
        let flat: Vec<f64> = self.components.iter().flatten().copied().collect();
        let dims: Vec<f64> = self.dims.iter().map(|&v| v as f64).collect();
        vec![
            NamedTensor::from_f64("asm.dims", vec![3], &dims),
            NamedTensor::from_f64("asm.mean_sdf", vec![d], &self.mean_sdf),
            NamedTensor::from_f64("asm.components", vec![self.k(), d], &flat),
            NamedTensor::from_f64("asm.variances", vec![self.k()], &self.variances),
        ]
    }

    pub fn from_named(tensors: &[NamedTensor]) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))
        };
        let dims_t = get("asm.dims")?;
        let dims: Dims = <[f32; 3]>::try_from(dims_t.data.as_slice())
            .map_err(|_| Error::Checkpoint("asm.dims must hold 3 values".into()))?
            .map(|v| v as usize);
        let mean_sdf = get("asm.mean_sdf")?.to_f64();
        let comps = get("asm.components")?;
        let d = mean_sdf.len();
        if d != dims.iter().product::<usize>() || comps.shape.len() != 2 || comps.shape[1] != d {
            return Err(Error::Checkpoint("ASM tensors disagree in shape".into()));
        }
        let components = comps.to_f64().chunks(d).map(<[f64]>::to_vec).collect();
        Ok(Self {
            dims,
            mean_sdf,
            components,
            variances: get("asm.variances")?.to_f64(),
        })
    }
}

fn flat_sdf(mask: &MaskVolume) -> Result<Vec<f64>> {
    Ok(signed_distance(mask)?.into_data())
}

/// Fits the top-`k` principal directions of the masks' signed distance maps
/// through the `n x n` Gram matrix of the centered data.
pub fn asm_fit(masks: &[MaskVolume], k: usize) -> Result<AsmModel> {
    let n = masks.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let dims = masks[0].dims();
    if let Some(m) = masks.iter().find(|m| m.dims() != dims) {
        return Err(Error::DimMismatch(m.dims(), dims));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let sdfs = masks.iter().map(flat_sdf).collect::<Result<Vec<_>>>()?;
    let d = sdfs[0].len();
    let mut mean = vec![0.0; d];
    for s in &sdfs {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| sdfs[i][j] - mean[j]);
    let gram = &x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 * n as f64;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol && top > 0.0).count();
    if k > rank {
        return Err(Error::RankDeficient { requested: k, rank });
    }
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &i in &order[..k] {
        let lam = eig.eigenvalues[i];
        let u = eig.eigenvectors.column(i);
        let mut v = x.transpose() * u;
        v /= lam.sqrt();
        // Renormalize against round-off and fix the sign: first nonzero
        // loading positive.
        let norm = v.norm();
        v /= norm;
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        components.push(v.iter().copied().collect());
        variances.push(lam / (n - 1) as f64);
    }
    Ok(AsmModel {
        dims,
        mean_sdf: mean,
        components,
        variances,
    })
}

/// `components . (sdf(mask) - mean_sdf)`.
pub fn asm_project(model: &AsmModel, mask: &MaskVolume) -> Result<Vec<f64>> {
    if mask.dims() != model.dims {
        return Err(Error::DimMismatch(mask.dims(), model.dims));
    }
    let s = flat_sdf(mask)?;
    Ok(asm_project_sdf(model, &s))
}

/// Projection of an already flattened signed distance map.
pub fn asm_project_sdf(model: &AsmModel, sdf: &[f64]) -> Vec<f64> {
    model
        .components
        .iter()
        .map(|c| {
            c.iter()
                .zip(sdf)
                .zip(&model.mean_sdf)
                .map(|((c, s), m)| c * (s - m))
                .sum()
        })
        .collect()
}
