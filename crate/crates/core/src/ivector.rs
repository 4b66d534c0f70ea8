//! Total-variability modelling: Baum-Welch statistics against a UBM, T-matrix
//! EM, posterior-mean i-vector extraction, LDA and class scoring.
//!
//! A clip supervector is modelled as `M = m + T y` with `y ~ N(0, I)`. Given
//! zeroth-order stats `n_k` and centred first-order stats `f_k`, the posterior
//! of `y` is Gaussian with precision `L = I + sum_k n_k T_k' S_k^-1 T_k` and
//! mean `w = L^-1 sum_k T_k' S_k^-1 f_k`, where `T_k` is the D×R block of
//! component `k` and `S_k` its diagonal UBM covariance.

use std::io::{Cursor, Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::*;
use crate::dsp::FeatureSequence;
use crate::gmm::{GmmError, GmmModel};
use crate::matrix::Matrix;

pub const IVECTOR_MAGIC: &[u8; 4] = b"SKI1";

#[derive(Debug, Error, PartialEq)]
pub enum IVectorError {
    #[error("empty feature sequence")]
    EmptySequence,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("posterior precision is not positive definite")]
    SingularPrecision,
    #[error("rank {rank} exceeds supervector dimension {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("rank must be >= 1")]
    ZeroRank,
    #[error("need at least {needed} utterances, got {got}")]
    TooFewUtterances { needed: usize, got: usize },
    #[error("LDA needs at least two classes, got {0}")]
    SingleClass(usize),
    #[error("model has no trained LDA projection")]
    UntrainedLda,
    #[error("label index {index} out of range for {classes} classes")]
    BadLabel { index: usize, classes: usize },
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("model format: {0}")]
    Format(String),
    #[error(transparent)]
    Gmm(#[from] GmmError),
}

/// Zeroth- and centred first-order statistics of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct BwStats {
    pub n: Vec<f64>,
    /// K × D, `f_k = sum_t gamma_tk (x_t - mu_k)`.
    pub f: Matrix,
}

impl BwStats {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            n: vec![0.0; k],
            f: Matrix::zeros(k, d),
        }
    }
}

pub fn bw_stats(ubm: &GmmModel, seq: &FeatureSequence) -> Result<BwStats, IVectorError> {
    bw_stats_frames(ubm, &seq.to_matrix())
}

pub fn bw_stats_frames(ubm: &GmmModel, frames: &Matrix) -> Result<BwStats, IVectorError> {
    if frames.rows() == 0 {
        return Err(IVectorError::EmptySequence);
    }
    ubm.check_dim(frames.cols())?;
    let (k, d) = (ubm.num_components(), ubm.dim());
    let mut st = BwStats::zeros(k, d);
    let mut gamma = vec![0.0; k];
    for x in frames.row_iter() {
        let ll = ubm.posteriors(x, &mut gamma);
        if !ll.is_finite() {
            return Err(IVectorError::NonFinite);
        }
        for c in 0..k {
            let g = gamma[c];
            st.n[c] += g;
            let mu = ubm.means().row(c);
            for ((fv, xv), m) in st.f.row_mut(c).iter_mut().zip(x).zip(mu) {
                *fv += g * (xv - m);
            }
        }
    }
    Ok(st)
}

/// UBM plus total-variability matrix, with per-component `T_k' S_k^-1 T_k`
/// cached for extraction.
#[derive(Debug, Clone)]
pub struct Extractor {
    ubm: GmmModel,
    /// (K·D) × R, rows grouped by component.
    t: Matrix,
    precision_blocks: Vec<DMatrix<f64>>,
}

impl PartialEq for Extractor {
    fn eq(&self, other: &Self) -> bool {
        self.ubm == other.ubm && self.t == other.t
    }
}

impl Extractor {
    pub fn new(ubm: GmmModel, t: Matrix) -> Result<Self, IVectorError> {
        let kd = ubm.num_components() * ubm.dim();
        if t.rows() != kd {
            return Err(IVectorError::DimMismatch {
                expected: kd,
                got: t.rows(),
            });
        }
        if t.cols() == 0 {
            return Err(IVectorError::ZeroRank);
        }
        if !t.is_finite() {
            return Err(IVectorError::NonFinite);
        }
        let precision_blocks = component_precisions(&ubm, &t);
        Ok(Self {
            ubm,
            t,
            precision_blocks,
        })
    }

    pub fn ubm(&self) -> &GmmModel {
        &self.ubm
    }

    pub fn t_matrix(&self) -> &Matrix {
        &self.t
    }

    pub fn rank(&self) -> usize {
        self.t.cols()
    }

    /// Concatenated UBM means `m`.
    pub fn supervector(&self) -> Vec<f64> {
        self.ubm.means().as_slice().to_vec()
    }

    fn check_stats(&self, st: &BwStats) -> Result<(), IVectorError> {
        let (k, d) = (self.ubm.num_components(), self.ubm.dim());
        if st.n.len() != k || st.f.rows() != k || st.f.cols() != d {
            return Err(IVectorError::DimMismatch {
                expected: k * d,
                got: st.f.rows() * st.f.cols(),
            });
        }
        Ok(())
    }

    /// `T' S^-1 f`.
    fn linear_term(&self, st: &BwStats) -> DVector<f64> {
        let r = self.rank();
        let mut b = DVector::zeros(r);
        let fs = st.f.as_slice();
        let vars = self.ubm.variances().as_slice();
        for (i, trow) in self.t.row_iter().enumerate() {
            let s = fs[i] / vars[i];
            if s == 0.0 {
                continue;
            }
            for j in 0..r {
                b[j] += trow[j] * s;
            }
        }
        b
    }

    fn precision(&self, st: &BwStats) -> DMatrix<f64> {
        let r = self.rank();
        let mut l = DMatrix::identity(r, r);
        for (nk, p) in st.n.iter().zip(&self.precision_blocks) {
            if *nk != 0.0 {
                l += p * *nk;
            }
        }
        l
    }

    /// Posterior mean and covariance of `y`, and the utterance's contribution
    /// to the T-matrix objective.
    fn posterior(&self, st: &BwStats) -> Result<Posterior, IVectorError> {
        let l = self.precision(st);
        let chol = l.cholesky().ok_or(IVectorError::SingularPrecision)?;
        let b = self.linear_term(st);
        let w = chol.solve(&b);
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let objective = 0.5 * b.dot(&w) - 0.5 * log_det;
        Ok(Posterior {
            cov: chol.inverse(),
            w,
            objective,
        })
    }

    pub fn extract(&self, st: &BwStats) -> Result<IVector, IVectorError> {
        self.check_stats(st)?;
        let l = self.precision(st);
        let chol = l.cholesky().ok_or(IVectorError::SingularPrecision)?;
        let w = chol.solve(&self.linear_term(st));
        if w.iter().any(|v| !v.is_finite()) {
            return Err(IVectorError::NonFinite);
        }
        Ok(IVector { w: w.as_slice().to_vec() })
    }

    /// Sum over utterances of `0.5 b' L^-1 b - 0.5 ln|L|`, the T-dependent
    /// part of the marginal log-likelihood of the statistics.
    pub fn objective(&self, stats: &[BwStats]) -> Result<f64, IVectorError> {
        let parts = stats
            .par_iter()
            .map(|st| {
                self.check_stats(st)?;
                self.posterior(st).map(|p| p.objective)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(parts.iter().sum())
    }
}

struct Posterior {
    w: DVector<f64>,
    cov: DMatrix<f64>,
    objective: f64,
}

fn component_precisions(ubm: &GmmModel, t: &Matrix) -> Vec<DMatrix<f64>> {
    let (k, d, r) = (ubm.num_components(), ubm.dim(), t.cols());
    (0..k)
        .into_par_iter()
        .map(|c| {
            let mut p = DMatrix::zeros(r, r);
            for dd in 0..d {
                let row = t.row(c * d + dd);
                let iv = 1.0 / ubm.variances()[(c, dd)];
                for a in 0..r {
                    let s = row[a] * iv;
                    for b in 0..r {
                        p[(a, b)] += s * row[b];
                    }
                }
            }
            p
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVector {
    pub w: Vec<f64>,
}

/// Posterior mean of `y` for one utterance.
pub fn extract_ivector(extractor: &Extractor, stats: &BwStats) -> Result<IVector, IVectorError> {
    extractor.extract(stats)
}

#[derive(Debug, Clone)]
pub struct TMatrixFit {
    pub extractor: Extractor,
    /// Objective before training and after each iteration.
    pub objective: Vec<f64>,
}

/// Random initial T: i.i.d. `0.1 * N(0, 1)` entries.
pub fn init_t_matrix(ubm: &GmmModel, rank: usize, seed: u64) -> Result<Matrix, IVectorError> {
    let kd = ubm.num_components() * ubm.dim();
    if rank == 0 {
        return Err(IVectorError::ZeroRank);
    }
    if rank > kd {
        return Err(IVectorError::RankTooLarge { rank, max: kd });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..kd * rank)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.1 * z
        })
        .collect::<Vec<f64>>();
    Ok(Matrix::from_vec(kd, rank, data))
}

pub fn train_t_matrix(
    stats: &[BwStats],
    ubm: &GmmModel,
    rank: usize,
    iters: usize,
    seed: u64,
) -> Result<TMatrixFit, IVectorError> {
    let t0 = init_t_matrix(ubm, rank, seed)?;
    train_t_matrix_from(stats, Extractor::new(ubm.clone(), t0)?, iters)
}

/// Runs `iters` EM updates starting from the extractor's current T.
pub fn train_t_matrix_from(
    stats: &[BwStats],
    mut ex: Extractor,
    iters: usize,
) -> Result<TMatrixFit, IVectorError> {
    if stats.len() < 2 {
        return Err(IVectorError::TooFewUtterances {
            needed: 2,
            got: stats.len(),
        });
    }
    for st in stats {
        ex.check_stats(st)?;
        if st.n.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !st.f.is_finite() {
            return Err(IVectorError::NonFinite);
        }
    }
    let mut history = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let (t, obj) = em_step(&ex, stats)?;
        history.push(obj);
        ex = Extractor::new(ex.ubm.clone(), t)?;
    }
    history.push(ex.objective(stats)?);
    Ok(TMatrixFit {
        extractor: ex,
        objective: history,
    })
}

fn em_step(ex: &Extractor, stats: &[BwStats]) -> Result<(Matrix, f64), IVectorError> {
    let (k, d, r) = (ex.ubm.num_components(), ex.ubm.dim(), ex.rank());
    let posts = stats
        .par_iter()
        .map(|st| ex.posterior(st))
        .collect::<Result<Vec<_>, _>>()?;

    // Accumulate in utterance order.
    let mut c_acc = Matrix::zeros(k * d, r);
    let mut a_acc = vec![DMatrix::<f64>::zeros(r, r); k];
    let mut evidence = vec![0.0; k];
    let mut objective = 0.0;
    for (st, p) in stats.iter().zip(&posts) {
        objective += p.objective;
        let eyy = &p.cov + &p.w * p.w.transpose();
        for c in 0..k {
            let nk = st.n[c];
            if nk == 0.0 {
                continue;
            }
            evidence[c] += nk;
            a_acc[c] += &eyy * nk;
        }
        let fs = st.f.as_slice();
        for i in 0..k * d {
            let fv = fs[i];
            if fv == 0.0 {
                continue;
            }
            for (cv, wv) in c_acc.row_mut(i).iter_mut().zip(p.w.iter()) {
                *cv += fv * wv;
            }
        }
    }

    let mut t = ex.t.clone();
    for c in 0..k {
        if evidence[c] <= 0.0 {
            continue;
        }
        let Some(chol) = a_acc[c].clone().cholesky() else {
            return Err(IVectorError::SingularPrecision);
        };
        for dd in 0..d {
            let i = c * d + dd;
            let rhs = DVector::from_row_slice(c_acc.row(i));
            let sol = chol.solve(&rhs);
            t.row_mut(i).copy_from_slice(sol.as_slice());
        }
    }
    Ok((t, objective))
}

/// Linear discriminant projection (`out × R`).
#[derive(Debug, Clone, PartialEq)]
pub struct Lda {
    pub projection: Matrix,
}

impl Lda {
    pub fn input_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn project(&self, w: &[f64]) -> Result<Vec<f64>, IVectorError> {
        if w.len() != self.input_dim() {
            return Err(IVectorError::DimMismatch {
                expected: self.input_dim(),
                got: w.len(),
            });
        }
        Ok(self
            .projection
            .row_iter()
            .map(|p| p.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Leading generalised eigenvectors of `(S_w + lambda I)^-1 S_b`,
/// `lambda = 1e-6 tr(S_w) / R`, keeping `min(C - 1, R)` directions.
pub fn fit_lda(ivectors: &Matrix, labels: &[usize], num_classes: usize) -> Result<Lda, IVectorError> {
    let (n, r) = (ivectors.rows(), ivectors.cols());
    if labels.len() != n {
        return Err(IVectorError::DimMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(IVectorError::BadLabel {
            index: bad,
            classes: num_classes,
        });
    }
    let mut counts = vec![0usize; num_classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(IVectorError::SingleClass(present));
    }
    if !ivectors.is_finite() {
        return Err(IVectorError::NonFinite);
    }

    let mut means = DMatrix::<f64>::zeros(num_classes, r);
    let mut global = DVector::<f64>::zeros(r);
    for (x, &l) in ivectors.row_iter().zip(labels) {
        for j in 0..r {
            means[(l, j)] += x[j];
            global[j] += x[j];
        }
    }
    global /= n as f64;
    for c in 0..num_classes {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            means.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    let mut sw = DMatrix::<f64>::zeros(r, r);
    for (x, &l) in ivectors.row_iter().zip(labels) {
        let diff = DVector::from_iterator(r, (0..r).map(|j| x[j] - means[(l, j)]));
        sw += &diff * diff.transpose();
    }
    let mut sb = DMatrix::<f64>::zeros(r, r);
    for c in 0..num_classes {
        if counts[c] == 0 {
            continue;
        }
        let diff = DVector::from_iterator(r, (0..r).map(|j| means[(c, j)] - global[j]));
        sb += (&diff * diff.transpose()) * counts[c] as f64;
    }
    sw /= n as f64;
    sb /= n as f64;

    let mut lambda = 1e-6 * sw.trace() / r as f64;
    if lambda <= 0.0 {
        // Zero within-class scatter: fall back to a scale taken from S_b.
        lambda = (1e-6 * sb.trace() / r as f64).max(f64::MIN_POSITIVE);
    }
    let reg = &sw + DMatrix::identity(r, r) * lambda;
    let chol = reg.cholesky().ok_or(IVectorError::SingularPrecision)?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(r, r))
        .ok_or(IVectorError::SingularPrecision)?;
    let m = &l_inv * &sb * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let keep = (present - 1).min(r);
    let mut proj = Matrix::zeros(keep, r);
    for (row, &idx) in order.iter().take(keep).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let u = l_inv.transpose() * v;
        let pivot = u.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..r {
            proj[(row, j)] = sign * u[j];
        }
    }
    Ok(Lda { projection: proj })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    #[default]
    Cosine,
    /// Negative Euclidean distance to the class mean.
    Euclidean,
}

/// Trained back end: LDA plus projected class means.
#[derive(Debug, Clone, PartialEq)]
pub struct Backend {
    pub lda: Lda,
    pub class_means: Matrix,
    pub labels: Vec<String>,
    pub scoring: Scoring,
    pub length_norm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVectorModel {
    pub extractor: Extractor,
    pub backend: Option<Backend>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

pub fn length_normalize(w: &mut [f64]) {
    let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        w.iter_mut().for_each(|x| *x /= n);
    }
}

impl Backend {
    pub fn fit(
        ivectors: &Matrix,
        labels: &[usize],
        names: Vec<String>,
        scoring: Scoring,
        length_norm: bool,
    ) -> Result<Self, IVectorError> {
        let mut x = ivectors.clone();
        if length_norm {
            for i in 0..x.rows() {
                length_normalize(x.row_mut(i));
            }
        }
        let lda = fit_lda(&x, labels, names.len())?;
        let out = lda.output_dim();
        let mut means = Matrix::zeros(names.len(), out);
        let mut counts = vec![0usize; names.len()];
        for (row, &l) in x.row_iter().zip(labels) {
            let p = lda.project(row)?;
            counts[l] += 1;
            means.row_mut(l).iter_mut().zip(&p).for_each(|(m, v)| *m += v);
        }
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                means.row_mut(c).iter_mut().for_each(|m| *m /= cnt as f64);
            }
        }
        Ok(Self {
            lda,
            class_means: means,
            labels: names,
            scoring,
            length_norm,
        })
    }

    pub fn score(&self, w: &[f64]) -> Result<Vec<f64>, IVectorError> {
        let mut w = w.to_vec();
        if self.length_norm {
            length_normalize(&mut w);
        }
        let p = self.lda.project(&w)?;
        Ok(self
            .class_means
            .row_iter()
            .map(|mu| match self.scoring {
                Scoring::Cosine => cosine(&p, mu),
                Scoring::Euclidean => -p.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            })
            .collect())
    }
}

impl IVectorModel {
    pub fn labels(&self) -> Option<&[String]> {
        self.backend.as_ref().map(|b| b.labels.as_slice())
    }

    pub fn ivector_frames(&self, frames: &Matrix) -> Result<IVector, IVectorError> {
        let st = bw_stats_frames(self.extractor.ubm(), frames)?;
        self.extractor.extract(&st)
    }

    pub fn classify_frames(&self, frames: &Matrix) -> Result<Vec<f64>, IVectorError> {
        let backend = self.backend.as_ref().ok_or(IVectorError::UntrainedLda)?;
        let w = self.ivector_frames(frames)?;
        backend.score(&w.w)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(IVECTOR_MAGIC)?;
        self.extractor.ubm.write_to(w)?;
        write_u32(w, self.extractor.rank() as u32)?;
        write_f64s(w, self.extractor.t.as_slice())?;
        match &self.backend {
            None => write_u8(w, 0),
            Some(b) => {
                write_u8(w, 1)?;
                write_u8(w, matches!(b.scoring, Scoring::Euclidean) as u8)?;
                write_u8(w, b.length_norm as u8)?;
                write_u32(w, b.lda.output_dim() as u32)?;
                write_f64s(w, b.lda.projection.as_slice())?;
                write_u32(w, b.labels.len() as u32)?;
                for l in &b.labels {
                    write_str(w, l)?;
                }
                write_f64s(w, b.class_means.as_slice())
            }
        }
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IVectorError> {
        let fmt = |e: std::io::Error| IVectorError::Format(e.to_string());
        expect_magic(r, IVECTOR_MAGIC).map_err(fmt)?;
        let ubm = GmmModel::read_from(r)?;
        let kd = ubm.num_components() * ubm.dim();
        let rank = read_count(r, kd.max(1), "rank").map_err(fmt)?;
        let t = Matrix::from_vec(kd, rank, read_f64s(r, kd * rank).map_err(fmt)?);
        let extractor = Extractor::new(ubm, t)?;
        let backend = match read_u8(r).map_err(fmt)? {
            0 => None,
            1 => {
                let scoring = match read_u8(r).map_err(fmt)? {
                    0 => Scoring::Cosine,
                    1 => Scoring::Euclidean,
                    v => return Err(IVectorError::Format(format!("unknown scoring tag {v}"))),
                };
                let length_norm = read_u8(r).map_err(fmt)? != 0;
                let out = read_count(r, rank, "LDA output").map_err(fmt)?;
                let projection = Matrix::from_vec(out, rank, read_f64s(r, out * rank).map_err(fmt)?);
                let c = read_count(r, 1 << 16, "class").map_err(fmt)?;
                let labels = (0..c).map(|_| read_str(r)).collect::<Result<Vec<_>, _>>().map_err(fmt)?;
                let class_means = Matrix::from_vec(c, out, read_f64s(r, c * out).map_err(fmt)?);
                Some(Backend {
                    lda: Lda { projection },
                    class_means,
                    labels,
                    scoring,
                    length_norm,
                })
            }
            v => return Err(IVectorError::Format(format!("unknown backend tag {v}"))),
        };
        Ok(Self { extractor, backend })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("write to Vec");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IVectorError> {
        let mut r = Cursor::new(bytes);
        let m = Self::read_from(&mut r)?;
        if r.position() as usize != bytes.len() {
            return Err(IVectorError::Format("trailing bytes".into()));
        }
        Ok(m)
    }
}

/// Per-class scores for a clip.
pub fn ivector_classify(model: &IVectorModel, seq: &FeatureSequence) -> Result<Vec<f64>, IVectorError> {
    model.classify_frames(&seq.to_matrix())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVectorOptions {
    pub ubm_components: usize,
    pub ubm_iters: usize,
    pub rank: usize,
    pub t_iters: usize,
    pub scoring: Scoring,
    pub length_norm: bool,
    pub seed: u64,
}

impl Default for IVectorOptions {
    fn default() -> Self {
        Self {
            ubm_components: 256,
            ubm_iters: 20,
            rank: 400,
            t_iters: 10,
            scoring: Scoring::Cosine,
            length_norm: false,
            seed: 0,
        }
    }
}

/// Full pipeline: UBM on pooled frames, T-matrix, per-clip i-vectors, LDA.
pub fn train_ivector_system(
    clips: &[(usize, Matrix)],
    labels: Vec<String>,
    opts: &IVectorOptions,
) -> Result<IVectorModel, IVectorError> {
    if clips.len() < 2 {
        return Err(IVectorError::TooFewUtterances {
            needed: 2,
            got: clips.len(),
        });
    }
    let dim = clips[0].1.cols();
    let pooled = Matrix::vstack(clips.iter().map(|(_, m)| m), dim);
    let ubm = crate::gmm::fit_gmm(&pooled, opts.ubm_components, opts.ubm_iters, opts.seed)?;
    let stats = clips
        .par_iter()
        .map(|(_, m)| bw_stats_frames(&ubm, m))
        .collect::<Result<Vec<_>, _>>()?;
    let fit = train_t_matrix(
        &stats,
        &ubm,
        opts.rank,
        opts.t_iters,
        crate::gmm::derive_seed(opts.seed, 0x7469_7665),
    )?;
    let ex = fit.extractor;
    let ivs = stats
        .par_iter()
        .map(|st| ex.extract(st).map(|iv| iv.w))
        .collect::<Result<Vec<_>, _>>()?;
    let ivs = Matrix::from_rows(&ivs, ex.rank());
    let y: Vec<usize> = clips.iter().map(|(l, _)| *l).collect();
    let backend = Backend::fit(&ivs, &y, labels, opts.scoring, opts.length_norm)?;
    Ok(IVectorModel {
        extractor: ex,
        backend: Some(backend),
    })
}
