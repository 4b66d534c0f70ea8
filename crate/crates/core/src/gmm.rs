//! Diagonal-covariance Gaussian mixture models trained by EM.
//!
//! Used directly as the per-class baseline classifier and as the universal
//! background model of the i-vector pipeline.

use std::io::{Cursor, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::binio::*;
use crate::dsp::FeatureSequence;
use crate::matrix::Matrix;

pub const GMM_MAGIC: &[u8; 4] = b"SKG1";
pub const CLASSIFIER_MAGIC: &[u8; 4] = b"SKGC";

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Frames per E-step work unit. Partial sums are combined in chunk order so
/// the result does not depend on thread scheduling.
const CHUNK: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error("need at least {k} frames for {k} components, got {n}")]
    TooFewFrames { n: usize, k: usize },
    #[error("component count must be >= 1")]
    InvalidComponents,
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("dimension mismatch: model has {expected}, input has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty feature sequence")]
    EmptySequence,
    #[error("no training data for class '{0}'")]
    MissingClass(String),
    #[error("model format: {0}")]
    Format(String),
}

/// Mixture weights, means and diagonal variances (K × D).
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Matrix,
    variances: Matrix,
    // Derived: ln w_k - 0.5 * sum_d ln(2 pi var_kd), and 1 / var.
    log_consts: Vec<f64>,
    inv_var: Matrix,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix) -> Result<Self, GmmError> {
        let k = weights.len();
        if k == 0 {
            return Err(GmmError::InvalidComponents);
        }
        if means.rows() != k || variances.rows() != k || means.cols() != variances.cols() {
            return Err(GmmError::DimMismatch {
                expected: k,
                got: means.rows(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || !means.is_finite()
            || variances.as_slice().iter().any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(GmmError::NonFinite);
        }
        let mut inv_var = variances.clone();
        inv_var.as_mut_slice().iter_mut().for_each(|v| *v = 1.0 / *v);
        let log_consts = (0..k)
            .map(|c| {
                weights[c].ln() - 0.5 * variances.row(c).iter().map(|v| LN_2PI + v.ln()).sum::<f64>()
            })
            .collect();
        Ok(Self {
            weights,
            means,
            variances,
            log_consts,
            inv_var,
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn variances(&self) -> &Matrix {
        &self.variances
    }

    /// Per-component joint log-densities `ln w_k + ln N(x; mu_k, Sigma_k)`.
    pub(crate) fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mu = self.means.row(c);
            let iv = self.inv_var.row(c);
            let mut q = 0.0;
            for d in 0..x.len() {
                let diff = x[d] - mu[d];
                q += diff * diff * iv[d];
            }
            *o = self.log_consts[c] - 0.5 * q;
        }
    }

    /// Log density of one frame, via log-sum-exp over components.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64, GmmError> {
        self.check_dim(x.len())?;
        let mut buf = vec![0.0; self.num_components()];
        self.component_log_densities(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    /// E-step responsibilities of one frame.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>, GmmError> {
        self.check_dim(x.len())?;
        let mut out = vec![0.0; self.num_components()];
        self.posteriors(x, &mut out);
        Ok(out)
    }

    /// Component posteriors of one frame; returns the frame log density.
    pub(crate) fn posteriors(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.component_log_densities(x, out);
        let lse = log_sum_exp(out);
        for o in out.iter_mut() {
            *o = (*o - lse).exp();
        }
        lse
    }

    pub(crate) fn check_dim(&self, got: usize) -> Result<(), GmmError> {
        if got != self.dim() {
            return Err(GmmError::DimMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Sum of frame log densities.
    pub fn total_log_likelihood(&self, frames: &Matrix) -> Result<f64, GmmError> {
        self.check_dim(frames.cols())?;
        let k = self.num_components();
        let partial: Vec<f64> = frames
            .as_slice()
            .par_chunks(CHUNK * frames.cols().max(1))
            .map(|chunk| {
                let mut buf = vec![0.0; k];
                chunk
                    .chunks_exact(frames.cols().max(1))
                    .map(|x| {
                        self.component_log_densities(x, &mut buf);
                        log_sum_exp(&buf)
                    })
                    .sum::<f64>()
            })
            .collect();
        Ok(partial.iter().sum())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(GMM_MAGIC)?;
        write_u32(w, self.num_components() as u32)?;
        write_u32(w, self.dim() as u32)?;
        write_f64s(w, &self.weights)?;
        write_f64s(w, self.means.as_slice())?;
        write_f64s(w, self.variances.as_slice())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, GmmError> {
        let fmt = |e: std::io::Error| GmmError::Format(e.to_string());
        expect_magic(r, GMM_MAGIC).map_err(fmt)?;
        let k = read_count(r, 1 << 20, "component").map_err(fmt)?;
        let d = read_count(r, 1 << 20, "dimension").map_err(fmt)?;
        let weights = read_f64s(r, k).map_err(fmt)?;
        let means = Matrix::from_vec(k, d, read_f64s(r, k * d).map_err(fmt)?);
        let variances = Matrix::from_vec(k, d, read_f64s(r, k * d).map_err(fmt)?);
        Self::new(weights, means, variances)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("write to Vec");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GmmError> {
        let mut r = Cursor::new(bytes);
        let m = Self::read_from(&mut r)?;
        if r.position() as usize != bytes.len() {
            return Err(GmmError::Format("trailing bytes".into()));
        }
        Ok(m)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmOptions {
    pub components: usize,
    pub max_iters: usize,
    /// Stop once the relative change in total log-likelihood drops below this.
    pub tol: f64,
    pub kmeans_iters: usize,
    /// Variance floor as a fraction of each dimension's global variance.
    pub var_floor_factor: f64,
    pub seed: u64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            components: 32,
            max_iters: 100,
            tol: 1e-5,
            kmeans_iters: 10,
            var_floor_factor: 1e-3,
            seed: 0,
        }
    }
}

/// A trained model plus the total log-likelihood before each M-step.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihoods: Vec<f64>,
}

/// EM fit with k-means++ initialisation. Shorthand for [`fit_gmm_with`].
pub fn fit_gmm(frames: &Matrix, k: usize, iters: usize, seed: u64) -> Result<GmmModel, GmmError> {
    let opts = GmmOptions {
        components: k,
        max_iters: iters,
        seed,
        ..GmmOptions::default()
    };
    Ok(fit_gmm_with(frames, &opts)?.model)
}

pub fn fit_gmm_with(frames: &Matrix, opts: &GmmOptions) -> Result<GmmFit, GmmError> {
    let (n, d, k) = (frames.rows(), frames.cols(), opts.components);
    if k == 0 {
        return Err(GmmError::InvalidComponents);
    }
    if n < k {
        return Err(GmmError::TooFewFrames { n, k });
    }
    if !frames.is_finite() {
        return Err(GmmError::NonFinite);
    }

    let global_var = column_variance(frames);
    let floor: Vec<f64> = global_var
        .iter()
        .map(|v| (opts.var_floor_factor * v).max(1e-10))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let centers = kmeans(frames, k, opts.kmeans_iters, &mut rng);
    let mut model = init_from_centers(frames, &centers, &floor, &global_var)?;

    let mut history = Vec::new();
    for _ in 0..opts.max_iters.max(1) {
        let stats = accumulate(&model, frames);
        let ll = stats.log_likelihood;
        let prev = history.last().copied();
        history.push(ll);
        model = m_step(&model, &stats, n, d, &floor)?;
        if let Some(p) = prev {
            if ((ll - p) / ll.abs().max(1e-300)).abs() < opts.tol {
                break;
            }
        }
    }
    Ok(GmmFit {
        model,
        log_likelihoods: history,
    })
}

fn column_variance(frames: &Matrix) -> Vec<f64> {
    let (n, d) = (frames.rows() as f64, frames.cols());
    let mut mean = vec![0.0; d];
    for r in frames.row_iter() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in frames.row_iter() {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    var
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Inverse-CDF draw: first index whose cumulative weight exceeds `u * total`.
fn draw_index(cumulative: &[f64], u: f64) -> usize {
    let total = *cumulative.last().unwrap();
    let target = u * total;
    cumulative
        .partition_point(|&c| c <= target)
        .min(cumulative.len() - 1)
}

/// k-means++ seeding followed by Lloyd iterations. Returns K × D centres.
fn kmeans(frames: &Matrix, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = frames.rows();
    let d = frames.cols();
    let mut centers = Matrix::zeros(k, d);
    let first = ((rng.random::<f64>() * n as f64) as usize).min(n - 1);
    centers.row_mut(0).copy_from_slice(frames.row(first));
    let mut dist: Vec<f64> = frames.row_iter().map(|x| sq_dist(x, centers.row(0))).collect();
    for c in 1..k {
        let mut cum = Vec::with_capacity(n);
        let mut acc = 0.0;
        for &v in &dist {
            acc += v;
            cum.push(acc);
        }
        let u = rng.random::<f64>();
        let idx = if acc > 0.0 {
            draw_index(&cum, u)
        } else {
            ((u * n as f64) as usize).min(n - 1)
        };
        centers.row_mut(c).copy_from_slice(frames.row(idx));
        for (dv, x) in dist.iter_mut().zip(frames.row_iter()) {
            *dv = dv.min(sq_dist(x, centers.row(c)));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (a, x) in assign.iter_mut().zip(frames.row_iter()) {
            *a = nearest(&centers, x);
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (&a, x) in assign.iter().zip(frames.row_iter()) {
            counts[a] += 1;
            sums.row_mut(a).iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    centers
}

fn nearest(centers: &Matrix, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centers.row_iter().enumerate() {
        let dd = sq_dist(x, mu);
        if dd < best.1 {
            best = (c, dd);
        }
    }
    best.0
}

fn init_from_centers(
    frames: &Matrix,
    centers: &Matrix,
    floor: &[f64],
    global_var: &[f64],
) -> Result<GmmModel, GmmError> {
    let (k, d) = (centers.rows(), centers.cols());
    let mut counts = vec![0usize; k];
    let mut var = Matrix::zeros(k, d);
    for x in frames.row_iter() {
        let c = nearest(centers, x);
        counts[c] += 1;
        for ((s, v), m) in var.row_mut(c).iter_mut().zip(x).zip(centers.row(c)) {
            *s += (v - m) * (v - m);
        }
    }
    for c in 0..k {
        for dd in 0..d {
            let v = if counts[c] > 1 {
                var[(c, dd)] / counts[c] as f64
            } else {
                global_var[dd]
            };
            var[(c, dd)] = v.max(floor[dd]);
        }
    }
    // Components that captured no frames still get a small positive weight.
    let weights: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
    let total: f64 = weights.iter().sum();
    GmmModel::new(weights.iter().map(|w| w / total).collect(), centers.clone(), var)
}

/// Sufficient statistics, first and second moments taken about the current
/// means to limit cancellation.
struct Stats {
    n: Vec<f64>,
    s1: Matrix,
    s2: Matrix,
    log_likelihood: f64,
}

fn accumulate(model: &GmmModel, frames: &Matrix) -> Stats {
    let (k, d) = (model.num_components(), model.dim());
    let parts: Vec<Stats> = frames
        .as_slice()
        .par_chunks(CHUNK * d.max(1))
        .map(|chunk| {
            let mut st = Stats {
                n: vec![0.0; k],
                s1: Matrix::zeros(k, d),
                s2: Matrix::zeros(k, d),
                log_likelihood: 0.0,
            };
            let mut gamma = vec![0.0; k];
            for x in chunk.chunks_exact(d.max(1)) {
                st.log_likelihood += model.posteriors(x, &mut gamma);
                for c in 0..k {
                    let g = gamma[c];
                    if g == 0.0 {
                        continue;
                    }
                    st.n[c] += g;
                    let mu = model.means.row(c);
                    let s1 = st.s1.row_mut(c);
                    for dd in 0..d {
                        s1[dd] += g * (x[dd] - mu[dd]);
                    }
                    let s2 = st.s2.row_mut(c);
                    for dd in 0..d {
                        let diff = x[dd] - mu[dd];
                        s2[dd] += g * diff * diff;
                    }
                }
            }
            st
        })
        .collect();

    let mut total = Stats {
        n: vec![0.0; k],
        s1: Matrix::zeros(k, d),
        s2: Matrix::zeros(k, d),
        log_likelihood: 0.0,
    };
    for p in parts {
        total.log_likelihood += p.log_likelihood;
        total.n.iter_mut().zip(&p.n).for_each(|(a, b)| *a += b);
        total
            .s1
            .as_mut_slice()
            .iter_mut()
            .zip(p.s1.as_slice())
            .for_each(|(a, b)| *a += b);
        total
            .s2
            .as_mut_slice()
            .iter_mut()
            .zip(p.s2.as_slice())
            .for_each(|(a, b)| *a += b);
    }
    total
}

fn m_step(model: &GmmModel, st: &Stats, n: usize, d: usize, floor: &[f64]) -> Result<GmmModel, GmmError> {
    let k = model.num_components();
    let mut weights = Vec::with_capacity(k);
    let mut means = model.means.clone();
    let mut vars = model.variances.clone();
    for c in 0..k {
        let nk = st.n[c];
        weights.push(nk / n as f64);
        if nk < 1e-10 {
            continue;
        }
        for dd in 0..d {
            let shift = st.s1[(c, dd)] / nk;
            means[(c, dd)] = model.means[(c, dd)] + shift;
            let v = st.s2[(c, dd)] / nk - shift * shift;
            vars[(c, dd)] = v.max(floor[dd]);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmModel::new(weights, means, vars)
}

/// One GMM per class over the shared feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmClassifier {
    labels: Vec<String>,
    models: Vec<GmmModel>,
}

impl GmmClassifier {
    pub fn new(labels: Vec<String>, models: Vec<GmmModel>) -> Result<Self, GmmError> {
        let dim = models.first().map(|m| m.dim()).ok_or(GmmError::InvalidComponents)?;
        if labels.len() != models.len() {
            return Err(GmmError::Format("label/model count mismatch".into()));
        }
        if let Some(m) = models.iter().find(|m| m.dim() != dim) {
            return Err(GmmError::DimMismatch {
                expected: dim,
                got: m.dim(),
            });
        }
        Ok(Self { labels, models })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn models(&self) -> &[GmmModel] {
        &self.models
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    /// Per-class clip scores `sum_t ln p(x_t | class)`.
    pub fn classify_frames(&self, frames: &Matrix) -> Result<Vec<f64>, GmmError> {
        if frames.rows() == 0 {
            return Err(GmmError::EmptySequence);
        }
        self.models.iter().map(|m| m.total_log_likelihood(frames)).collect()
    }

    /// Per-frame class log-likelihoods (frames × classes).
    pub fn frame_scores(&self, frames: &Matrix) -> Result<Matrix, GmmError> {
        if frames.rows() == 0 {
            return Err(GmmError::EmptySequence);
        }
        if frames.cols() != self.dim() {
            return Err(GmmError::DimMismatch {
                expected: self.dim(),
                got: frames.cols(),
            });
        }
        let c = self.models.len();
        let mut out = Matrix::zeros(frames.rows(), c);
        let mut buf = Vec::new();
        for (t, x) in frames.row_iter().enumerate() {
            for (j, m) in self.models.iter().enumerate() {
                buf.resize(m.num_components(), 0.0);
                m.component_log_densities(x, &mut buf);
                out[(t, j)] = log_sum_exp(&buf);
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CLASSIFIER_MAGIC)?;
        write_u32(w, self.labels.len() as u32)?;
        for (label, model) in self.labels.iter().zip(&self.models) {
            write_str(w, label)?;
            model.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, GmmError> {
        let fmt = |e: std::io::Error| GmmError::Format(e.to_string());
        expect_magic(r, CLASSIFIER_MAGIC).map_err(fmt)?;
        let c = read_count(r, 1 << 16, "class").map_err(fmt)?;
        let mut labels = Vec::with_capacity(c);
        let mut models = Vec::with_capacity(c);
        for _ in 0..c {
            labels.push(read_str(r).map_err(fmt)?);
            models.push(GmmModel::read_from(r)?);
        }
        Self::new(labels, models)
    }
}

/// Scores a clip: `score(c) = sum_t ln p(x_t | c)`.
pub fn classify_clip(clf: &GmmClassifier, seq: &FeatureSequence) -> Result<Vec<f64>, GmmError> {
    clf.classify_frames(&seq.to_matrix())
}

/// FNV-1a over the matrix shape and raw bits.
pub(crate) fn fingerprint(m: &Matrix) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&(m.rows() as u64).to_le_bytes());
    eat(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        eat(&v.to_bits().to_le_bytes());
    }
    h
}

/// Mixes a master seed with a stream id (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains one GMM per class. Each class seed is derived from the master seed
/// and a fingerprint of that class's frames, so identical bags yield
/// identical models regardless of label.
pub fn train_classifier(
    bags: &[(String, Matrix)],
    opts: &GmmOptions,
) -> Result<GmmClassifier, GmmError> {
    if bags.is_empty() {
        return Err(GmmError::MissingClass("<none>".into()));
    }
    if let Some((label, _)) = bags.iter().find(|(_, m)| m.rows() == 0) {
        return Err(GmmError::MissingClass(label.clone()));
    }
    let models = bags
        .par_iter()
        .map(|(_, frames)| {
            let o = GmmOptions {
                seed: derive_seed(opts.seed, fingerprint(frames)),
                ..opts.clone()
            };
            fit_gmm_with(frames, &o).map(|f| f.model)
        })
        .collect::<Result<Vec<_>, _>>()?;
    GmmClassifier::new(bags.iter().map(|(l, _)| l.clone()).collect(), models)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
