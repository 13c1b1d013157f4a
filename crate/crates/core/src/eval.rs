//! Evaluation: ROC AUC, balanced accuracy, bootstrap intervals, stratified
//! cross-validation of the few-shot classifier, PCA projection and latent
//! interpolation between group means.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::detect::{fit_linear_svm, svm_decision};
use crate::error::{Error, Result};
use crate::seed;
use crate::vae::VaeParams;
use crate::volume::{MaskVolume, Spacing};

/// Resample attempts per bootstrap replicate before giving up.
pub const MAX_RESAMPLE_RETRIES: usize = 100;

fn check_scored(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("scores contain NaN".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidParameter(format!("labels must be 0 or 1, got {bad}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::SingleClass { missing: 1 });
    }
    if neg == 0 {
        return Err(Error::SingleClass { missing: 0 });
    }
    Ok((pos, neg))
}

/// Area under the ROC curve, `P(score_pos > score_neg) + 0.5 P(tie)`, from a
/// single sort. Label 1 is the positive (abnormal) class.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_scored(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U, kept integral so ties cost no precision.
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        u2 += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Ok(u2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Mean of the per-class recalls of hard predictions.
pub fn balanced_accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    let as_scores: Vec<f64> = preds.iter().map(|&p| p as f64).collect();
    check_scored(&as_scores, labels)?;
    if let Some(&bad) = preds.iter().find(|&&p| p > 1) {
        return Err(Error::InvalidParameter(format!(
            "predictions must be 0 or 1, got {bad}"
        )));
    }
    let mut hit = [0usize; 2];
    let mut tot = [0usize; 2];
    for (&p, &l) in preds.iter().zip(labels) {
        tot[l as usize] += 1;
        hit[l as usize] += usize::from(p == l);
    }
    Ok(0.5 * (hit[0] as f64 / tot[0] as f64 + hit[1] as f64 / tot[1] as f64))
}

/// Balanced accuracy of `score > threshold` predictions.
pub fn balanced_accuracy_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s > threshold)).collect();
    check_scored(scores, labels)?;
    balanced_accuracy(&preds, labels)
}

/// ROC curve points `(fpr, tpr)` from the highest threshold down, starting at
/// `(0, 0)` and ending at `(1, 1)`; tied scores form one step.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_scored(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Bootstrap mean and sample standard deviation of `metric`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub sd: f64,
    pub reps: usize,
}

/// Resamples `(score, label)` pairs with replacement `reps` times and
/// summarizes `metric` over the replicates. A resample that misses a class is
/// redrawn, at most [`MAX_RESAMPLE_RETRIES`] times. Replicate `r` draws from
/// its own derived stream, so results do not depend on thread count.
pub fn bootstrap<F>(scores: &[f64], labels: &[u8], reps: usize, boot_seed: u64, metric: F) -> Result<BootstrapSummary>
where
    F: Fn(&[f64], &[u8]) -> Result<f64> + Sync,
{
    check_scored(scores, labels)?;
    if reps == 0 {
        return Err(Error::InvalidParameter("bootstrap needs at least one replicate".into()));
    }
    let n = scores.len();
    let values = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive(boot_seed, r as u64));
            let mut s = vec![0.0; n];
            let mut l = vec![0u8; n];
            for _ in 0..=MAX_RESAMPLE_RETRIES {
                for k in 0..n {
                    let i = rng.random_range(0..n);
                    s[k] = scores[i];
                    l[k] = labels[i];
                }
                let pos = l.iter().filter(|&&v| v == 1).count();
                if pos > 0 && pos < n {
                    return metric(&s, &l);
                }
            }
            Err(Error::ResampleExhausted(MAX_RESAMPLE_RETRIES))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / reps as f64;
    let sd = if reps > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(BootstrapSummary { mean, sd, reps })
}

/// Metrics of one scoring method on one labelled set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub auc: f64,
    pub auc_boot: BootstrapSummary,
    /// Present when the scores have a decision threshold.
    pub balanced_accuracy: Option<f64>,
    pub balanced_accuracy_boot: Option<BootstrapSummary>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Sample index of each score.
    pub ids: Vec<usize>,
}

/// AUC (and balanced accuracy at `threshold`, if given) with bootstrap
/// summaries.
pub fn evaluate_scores(
    method: &str,
    scores: Vec<f64>,
    labels: Vec<u8>,
    ids: Vec<usize>,
    threshold: Option<f64>,
    reps: usize,
    boot_seed: u64,
) -> Result<EvalReport> {
    let a = auc(&scores, &labels)?;
    let auc_boot = bootstrap(&scores, &labels, reps, boot_seed, auc)?;
    let (ba, ba_boot) = match threshold {
        Some(t) => (
            Some(balanced_accuracy_at(&scores, &labels, t)?),
            Some(bootstrap(&scores, &labels, reps, boot_seed, |s, l| {
                balanced_accuracy_at(s, l, t)
            })?),
        ),
        None => (None, None),
    };
    Ok(EvalReport {
        method: method.to_string(),
        auc: a,
        auc_boot,
        balanced_accuracy: ba,
        balanced_accuracy_boot: ba_boot,
        scores,
        labels,
        ids,
    })
}

/// Fold membership of every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn fold(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == f)
            .collect()
    }

    pub fn is_leave_one_out(&self) -> bool {
        self.k == self.assignment.len()
    }
}

/// Stratified `k`-fold plan: each class is shuffled and dealt round-robin,
/// continuing the fold counter across classes, so per-class and total fold
/// sizes differ by at most one. `k == n` is leave-one-out.
pub fn stratified_kfold(labels: &[u8], k: usize, fold_seed: u64) -> Result<FoldPlan> {
    let n = labels.len();
    if k < 2 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidParameter(format!("labels must be 0 or 1, got {bad}")));
    }
    let mut rng = seed::rng(fold_seed);
    let mut assignment = vec![0; n];
    let mut next = 0;
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::SingleClass { missing: class });
        }
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldPlan { k, assignment })
}

/// Classifier hyperparameters for few-shot evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            epochs: 100,
            seed: 0,
        }
    }
}

/// Pooled decisions of the few-shot protocol: with `k < n` folds the
/// classifier trains on one fold and scores the other `k - 1` (small training
/// sets), so every sample is scored `k - 1` times; leave-one-out trains on
/// `n - 1` and scores the held-out sample. Returns `(decisions, labels, ids)`.
pub fn crossval_decisions(
    features: &[Vec<f64>],
    labels: &[u8],
    plan: &FoldPlan,
    svm: SvmParams,
) -> Result<(Vec<f64>, Vec<u8>, Vec<usize>)> {
    if features.len() != labels.len() || plan.assignment.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            found: features.len().min(plan.assignment.len()),
        });
    }
    let loo = plan.is_leave_one_out();
    let per_fold = (0..plan.k)
        .into_par_iter()
        .map(|f| {
            let in_fold = plan.fold(f);
            let out_fold: Vec<usize> = (0..labels.len()).filter(|&i| plan.assignment[i] != f).collect();
            let (train, test) = if loo { (out_fold, in_fold) } else { (in_fold, out_fold) };
            let xs: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
            let ys: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
            let clf = fit_linear_svm(&xs, &ys, svm.lambda, svm.epochs, seed::derive(svm.seed, f as u64))?;
            test.into_iter()
                .map(|i| Ok((svm_decision(&clf, &features[i])?, labels[i], i)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut d = Vec::new();
    let mut l = Vec::new();
    let mut ids = Vec::new();
    for (s, y, i) in per_fold.into_iter().flatten() {
        d.push(s);
        l.push(y);
        ids.push(i);
    }
    Ok((d, l, ids))
}

/// [`crossval_decisions`] followed by AUC and balanced accuracy at zero.
pub fn crossval_fewshot(
    method: &str,
    features: &[Vec<f64>],
    labels: &[u8],
    plan: &FoldPlan,
    svm: SvmParams,
    reps: usize,
    boot_seed: u64,
) -> Result<EvalReport> {
    let (d, l, ids) = crossval_decisions(features, labels, plan, svm)?;
    evaluate_scores(method, d, l, ids, Some(0.0), reps, boot_seed)
}

/// Projects points onto their top two principal axes. Each axis is signed so
/// its first nonzero loading is positive; with one input dimension the
/// second coordinate is zero.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    let d = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::LengthMismatch {
            expected: d,
            found: p.len(),
        });
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v.iter().copied().find(|c| c.abs() > 1e-12).unwrap_or(0.0);
            if lead < 0.0 {
                v.iter().map(|c| -c).collect()
            } else {
                v
            }
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut out = [0.0; 2];
            for (o, a) in out.iter_mut().zip(&axes) {
                *o = (0..d).map(|j| x[(i, j)] * a[j]).sum();
            }
            out
        })
        .collect())
}

/// One decoded point on the path between the group means.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpFrame {
    pub t: f64,
    pub z: Vec<f64>,
    pub mask: MaskVolume,
}

impl InterpFrame {
    pub fn file_name(&self) -> String {
        format!("interp_t{}.pgm", self.t)
    }
}

fn group_mean(latents: &[Vec<f64>], name: &'static str) -> Result<Vec<f64>> {
    let first = latents.first().ok_or(Error::EmptyGroup(name))?;
    let mut m = vec![0.0; first.len()];
    for z in latents {
        if z.len() != m.len() {
            return Err(Error::LengthMismatch {
                expected: m.len(),
                found: z.len(),
            });
        }
        for (a, v) in m.iter_mut().zip(z) {
            *a += v / latents.len() as f64;
        }
    }
    Ok(m)
}

/// Decodes `z(t) = z_normal + t (z_abnormal - z_normal)` for each `t`, where
/// the endpoints are the group means, and binarizes at 0.5.
pub fn interpolate_groups(
    params: &VaeParams<f32>,
    normal: &[Vec<f64>],
    abnormal: &[Vec<f64>],
    ts: &[f64],
    spacing: Spacing,
) -> Result<Vec<InterpFrame>> {
    let zn = group_mean(normal, "normal")?;
    let za = group_mean(abnormal, "abnormal")?;
    if zn.len() != za.len() {
        return Err(Error::LengthMismatch {
            expected: zn.len(),
            found: za.len(),
        });
    }
    ts.iter()
        .map(|&t| {
            let z: Vec<f64> = zn.iter().zip(&za).map(|(a, b)| a + t * (b - a)).collect();
            let field = params.decode_with_spacing(&z, spacing)?;
            Ok(InterpFrame {
                t,
                z,
                mask: MaskVolume::from_field(&field, 0.5),
            })
        })
        .collect()
}

/// Binary PGM (P5) of the middle axial slice: foreground 255, background 0.
pub fn mid_slice_pgm(mask: &MaskVolume) -> Vec<u8> {
    let [nx, ny, nz] = mask.dims();
    let z = nz / 2;
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for y in 0..ny {
        for x in 0..nx {
            out.push(if mask.get(x, y, z) { 255 } else { 0 });
        }
    }
    out
}

/// `method,n_boot,auc_mean,auc_sd,balacc_mean,balacc_sd`; balanced accuracy
/// is left empty for scores without a decision threshold.
pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("method,n_boot,auc_mean,auc_sd,balacc_mean,balacc_sd\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{}",
            r.method,
            r.auc_boot.reps,
            r.auc_boot.mean,
            r.auc_boot.sd,
            opt(r.balanced_accuracy_boot.map(|b| b.mean)),
            opt(r.balanced_accuracy_boot.map(|b| b.sd)),
        );
    }
    s
}

pub const SCORES_HEADER: &str = "id,label,score,method\n";

/// Appends `id,label,score,method` rows.
pub fn push_score_rows(out: &mut String, method: &str, ids: &[usize], labels: &[u8], scores: &[f64]) {
    for ((i, l), v) in ids.iter().zip(labels).zip(scores) {
        let _ = writeln!(out, "{i},{l},{v:.9},{method}");
    }
}

/// Score CSV of several reports under one header.
pub fn scores_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(SCORES_HEADER);
    for r in reports {
        push_score_rows(&mut s, &r.method, &r.ids, &r.labels, &r.scores);
    }
    s
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (f, t) in points {
        let _ = writeln!(s, "{f:.6},{t:.6}");
    }
    s
}

pub fn pca_csv(coords: &[[f64; 2]], labels: &[u8]) -> String {
    let mut s = String::from("id,label,p1,p2\n");
    for (i, (c, l)) in coords.iter().zip(labels).enumerate() {
        let _ = writeln!(s, "{i},{l},{:.9},{:.9}", c[0], c[1]);
    }
    s
}
