//! Identity feature extractor and the detection, similarity and Fréchet
//! scores computed on its features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::params::Params;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub mod countermeasure;

pub use countermeasure::{apply_countermeasure, Countermeasure};

pub const FEATURE_DIM: usize = 32;
pub const MIN_ACCURACY: f64 = 0.9;
pub const DEFAULT_TAU: f64 = 0.5;
pub const COV_SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub widths: [usize; 2],
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Fraction of every class held out for the accuracy check.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { widths: [16, 32], steps: 600, lr: 3e-3, batch: 32, holdout: 0.25, seed: 0 }
    }
}

/// Three stride-2 conv blocks, global average pooling and a parameter-free
/// layer norm give the 32-d feature; a linear head gives class logits.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub params: Params<f32>,
    pub classes: usize,
    pub heldout_accuracy: f64,
}

impl FeatureExtractor {
    fn init(classes: usize, channels: usize, widths: [usize; 2], rng: &mut ChaCha8Rng) -> Result<Params<f32>> {
        let mut p = Params::new();
        let mut conv = |p: &mut Params<f32>, name: &str, cin: usize, cout: usize| -> Result<()> {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let d = Normal::new(0.0, std).unwrap();
            p.insert(format!("{name}.weight"), Tensor::from_fn(&[cout, cin, 3, 3], |_| d.sample(rng) as f32))?;
            p.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
            Ok(())
        };
        conv(&mut p, "conv1", channels, widths[0])?;
        conv(&mut p, "conv2", widths[0], widths[1])?;
        conv(&mut p, "conv3", widths[1], FEATURE_DIM)?;
        let d = Normal::new(0.0, (1.0 / FEATURE_DIM as f64).sqrt()).unwrap();
        p.insert("head.weight", Tensor::from_fn(&[FEATURE_DIM, classes], |_| d.sample(rng) as f32))?;
        p.insert("head.bias", Tensor::zeros(&[classes]))?;
        Ok(p)
    }

    /// `(features [B, 32], logits [B, K])` built inside `g` from bound leaves.
    fn graph(g: &mut Graph<f32>, leaves: &std::collections::HashMap<String, Var>, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for name in ["conv1", "conv2", "conv3"] {
            let y = g.conv2d(h, leaves[&format!("{name}.weight")], Some(leaves[&format!("{name}.bias")]), 2, 1)?;
            h = g.silu(y);
        }
        let d = g.dims(h).to_vec();
        let flat = g.reshape(h, &[d[0], d[1], d[2] * d[3]])?;
        let pooled = g.mean_axis(flat, 2)?;
        let feat = g.layer_norm(pooled, None, None)?;
        let y = g.matmul(feat, leaves["head.weight"])?;
        let logits = g.add(y, leaves["head.bias"])?;
        Ok((feat, logits))
    }

    fn bind(g: &mut Graph<f32>, p: &Params<f32>, train: bool) -> std::collections::HashMap<String, Var> {
        p.iter()
            .map(|(n, t)| {
                let v = if train { g.var(t.clone()) } else { g.constant(t.clone()) };
                (n.to_owned(), v)
            })
            .collect()
    }

    /// Trains on labelled images and checks accuracy on a stratified
    /// held-out split.
    pub fn train(images: &Tensor<f32>, labels: &[usize], cfg: &ExtractorConfig) -> Result<Self> {
        let n = images.dims()[0];
        if labels.len() != n || n == 0 {
            return Err(Error::Config(format!("{} labels for {n} images", labels.len())));
        }
        let classes = labels.iter().max().unwrap() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
        for k in 0..classes {
            let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
            members.shuffle(&mut rng);
            let hold = ((members.len() as f64) * cfg.holdout).round() as usize;
            let hold = hold.min(members.len().saturating_sub(1));
            test_idx.extend_from_slice(&members[..hold]);
            train_idx.extend_from_slice(&members[hold..]);
        }
        if test_idx.is_empty() {
            test_idx = train_idx.clone();
        }
        let mut params = Self::init(classes, images.dims()[1], cfg.widths, &mut rng)?;
        let mut opt = Adam::new(cfg.lr);
        let batch = cfg.batch.clamp(1, train_idx.len());
        let mut order = train_idx.clone();
        let mut cursor = order.len();
        for _ in 0..cfg.steps {
            if cursor + batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            let x = images.select_outer(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let leaves = Self::bind(&mut g, &params, true);
            let xv = g.constant(x);
            let (_, logits) = Self::graph(&mut g, &leaves, xv)?;
            let loss = g.cross_entropy(logits, &y)?;
            let names: Vec<String> = params.names().map(str::to_owned).collect();
            let vars: Vec<Var> = names.iter().map(|n| leaves[n]).collect();
            let rec = g.evaluate_with_grads(loss, &vars)?;
            if !rec.value.is_finite() {
                return Err(Error::Metric(format!("extractor loss diverged: {}", rec.value)));
            }
            let grads: Vec<_> = names.into_iter().zip(vars).map(|(n, v)| (n, rec.grads[&v].clone())).collect();
            opt.step(&mut params, &grads);
        }
        let mut ext = Self { params, classes, heldout_accuracy: 0.0 };
        let x = images.select_outer(&test_idx)?;
        let probs = ext.probabilities(&x)?;
        let correct = test_idx
            .iter()
            .enumerate()
            .filter(|(r, &i)| argmax(&probs.data()[r * classes..(r + 1) * classes]) == labels[i])
            .count();
        ext.heldout_accuracy = correct as f64 / test_idx.len() as f64;
        if ext.heldout_accuracy < MIN_ACCURACY {
            return Err(Error::ExtractorQuality { accuracy: ext.heldout_accuracy, required: MIN_ACCURACY });
        }
        Ok(ext)
    }

    fn eval(&self, images: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut g = Graph::new();
        let leaves = Self::bind(&mut g, &self.params, false);
        let x = g.constant(images.clone());
        let (f, logits) = Self::graph(&mut g, &leaves, x)?;
        let p = g.softmax(logits, 1)?;
        Ok((g.value(f).clone(), g.value(p).clone()))
    }

    /// Penultimate features, `[B, 32]`.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.eval(images)?.0)
    }

    /// Class probabilities, `[B, K]`.
    pub fn probabilities(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.eval(images)?.1)
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn nonempty(images: &Tensor<f32>, what: &str) -> Result<()> {
    if images.dims().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Config(format!("{what} batch is empty")));
    }
    Ok(())
}

/// Fraction of images whose top class probability is at least `tau`.
pub fn fr_proxy(generated: &Tensor<f32>, extractor: &FeatureExtractor, tau: f64) -> Result<f64> {
    nonempty(generated, "generated")?;
    let p = extractor.probabilities(generated)?;
    let k = extractor.classes;
    let n = generated.dims()[0];
    let hits = (0..n)
        .filter(|&i| {
            let top = p.data()[i * k..(i + 1) * k].iter().fold(0.0f32, |m, &v| m.max(v));
            top as f64 >= tau
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mean of `max(0, cos)` over all pairs of feature rows; zero rows are
/// skipped.
pub fn mean_clamped_cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let d = a.dims()[1];
    let rows = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    };
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (ra, rb) = (rows(a), rows(b));
    let (mut total, mut count) = (0.0, 0usize);
    for x in &ra {
        for y in &rb {
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                continue;
            }
            let cos = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny);
            total += cos.max(0.0);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Metric("every feature pair involves a zero vector".into()));
    }
    Ok((total / count as f64).min(1.0))
}

/// Average clamped cosine similarity to the reference images, in `[0, 1]`.
pub fn fs_proxy(generated: &Tensor<f32>, references: &Tensor<f32>, extractor: &FeatureExtractor) -> Result<f64> {
    nonempty(generated, "generated")?;
    nonempty(references, "reference")?;
    mean_clamped_cosine(&extractor.features(generated)?, &extractor.features(references)?)
}

fn to_matrix(features: &Tensor<f32>) -> DMatrix<f64> {
    let d = features.dims();
    DMatrix::from_row_iterator(d[0], d[1], features.data().iter().map(|&v| v as f64))
}

/// Mean and unbiased covariance of the rows; `1e-6 I` is added when there
/// are too few rows for a full-rank estimate.
pub fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mu = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    if n <= d {
        cov += DMatrix::identity(d, d) * COV_SHRINKAGE;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians. `tr (S1 S2)^{1/2}` is evaluated
/// as `tr (S1^{1/2} S2 S1^{1/2})^{1/2}` with negative eigenvalues clipped.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if s1.iter().chain(s2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite covariance".into()));
    }
    let r1 = psd_sqrt(s1);
    let inner = &r1 * s2 * &r1;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let cross: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    Ok((diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between raw feature sets `[n, d]`.
pub fn fid_from_features(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.dims()[0] == 0 || b.dims()[0] == 0 {
        return Err(Error::Config("feature batch is empty".into()));
    }
    let (m1, s1) = moments(&to_matrix(a));
    let (m2, s2) = moments(&to_matrix(b));
    frechet_distance(&m1, &s1, &m2, &s2)
}

/// Fréchet distance between the extractor features of two image batches.
pub fn fid_lite(generated: &Tensor<f32>, references: &Tensor<f32>, extractor: &FeatureExtractor) -> Result<f64> {
    nonempty(generated, "generated")?;
    nonempty(references, "reference")?;
    fid_from_features(&extractor.features(generated)?, &extractor.features(references)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fr: f64,
    pub fs: f64,
    pub fid: f64,
    pub seconds: f64,
    pub backward_count: usize,
}

/// FR, FS against `subject` and FID against `reference_set`.
pub fn evaluate(
    generated: &Tensor<f32>,
    subject: &Tensor<f32>,
    reference_set: &Tensor<f32>,
    extractor: &FeatureExtractor,
) -> Result<(f64, f64, f64)> {
    Ok((
        fr_proxy(generated, extractor, DEFAULT_TAU)?,
        fs_proxy(generated, subject, extractor)?,
        fid_lite(generated, reference_set, extractor)?,
    ))
}
