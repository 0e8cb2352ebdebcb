//! First and second moments of latent states, and assembly of the per-step
//! coefficient matrices `A`, `Ahat`, `B`, `C`, `D`, `D_i` consumed by the
//! synchronization game's backward recursion.
//!
//! Rectified-Gaussian moments: for `Z = ReLU(a + sigma W)` with `W`
//! standard normal,
//!
//! ```text
//!     E[Z]   = a (1 - Phi(-a/sigma)) + sigma/sqrt(2 pi) exp(-a^2 / 2 sigma^2)
//!     E[Z^2] = (a^2 + sigma^2)(1 - Phi(-a/sigma))
//!              + a sigma/sqrt(2 pi) exp(-a^2 / 2 sigma^2)
//! ```
//!
//! applied element-wise; distinct entries are independent, so cross moments
//! factor into products of means. `sigma = 0` degenerates to the point mass
//! at `ReLU(a)`.
//!
//! Three assembly routes produce the same [`MomentSet`]: exact closed forms
//! for rectified-Gaussian (RFN) latents, realized values for deterministic
//! encoders (all expectations drop), and Monte-Carlo averaging of joint
//! draws for anything else. The Monte-Carlo route doubles as the test
//! oracle for the closed forms.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::types::Dims;

#[derive(Debug, Error, PartialEq)]
pub enum MomentsError {
    #[error("sigma must be >= 0, got {0}")]
    BadSigma(f64),
    #[error("rect_second_moment is defined for a single output row, got {0}")]
    RowExpected(usize),
    #[error("missing cached pre-activations: expected {expected}, got {got}")]
    MissingPreActivations { expected: usize, got: usize },
    #[error("latent {index} has shape {rows}x{cols}, expected {want_rows}x{want_cols}")]
    LatentShape {
        index: usize,
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("continuation matrices disagree with dims: {0}")]
    ContinuationShape(String),
    #[error("need at least one Monte-Carlo sample")]
    NoSamples,
}

/// Pre-activation matrix and noise scale of one rectified-Gaussian latent.
#[derive(Debug, Clone)]
pub struct RectGaussParams {
    /// `d_y x d_z` pre-activation.
    pub a: DMatrix<f64>,
    /// Noise scale, >= 0. Zero is the degenerate point mass.
    pub sigma: f64,
}

/// Standard normal CDF via the complementary error function.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// `E[ReLU(a + sigma W)]` element-wise.
pub fn rect_mean(p: &RectGaussParams) -> DMatrix<f64> {
    if p.sigma == 0.0 {
        return p.a.map(|v| v.max(0.0));
    }
    p.a.map(|a| {
        let tail = std_normal_cdf(a / p.sigma); // 1 - Phi(-a/sigma)
        a * tail + p.sigma * INV_SQRT_2PI * (-a * a / (2.0 * p.sigma * p.sigma)).exp()
    })
}

/// `E[ReLU(a + sigma W)^2]` element-wise.
pub fn rect_sq_mean(p: &RectGaussParams) -> DMatrix<f64> {
    if p.sigma == 0.0 {
        return p.a.map(|v| v.max(0.0).powi(2));
    }
    let s2 = p.sigma * p.sigma;
    p.a.map(|a| {
        let tail = std_normal_cdf(a / p.sigma);
        (a * a + s2) * tail + a * p.sigma * INV_SQRT_2PI * (-a * a / (2.0 * s2)).exp()
    })
}

/// Full second-moment matrix `E[Z' Z]` for a single latent row
/// (`d_y = 1`): exact values on the diagonal, products of means off it.
pub fn rect_second_moment(p: &RectGaussParams) -> Result<DMatrix<f64>, MomentsError> {
    if p.sigma < 0.0 || !p.sigma.is_finite() {
        return Err(MomentsError::BadSigma(p.sigma));
    }
    if p.a.nrows() != 1 {
        return Err(MomentsError::RowExpected(p.a.nrows()));
    }
    let mean = rect_mean(p);
    let sq = rect_sq_mean(p);
    let d_z = p.a.ncols();
    let mut m = DMatrix::zeros(d_z, d_z);
    for j in 0..d_z {
        for k in 0..d_z {
            m[(j, k)] = if j == k {
                sq[(0, j)]
            } else {
                mean[(0, j)] * mean[(0, k)]
            };
        }
    }
    Ok(m)
}

/// Per-step coefficient matrices of the backward recursion.
#[derive(Debug, Clone)]
pub struct MomentSet {
    /// `E[Z_i]` per agent, `d_y x d_z`.
    pub mean_z: Vec<DMatrix<f64>>,
    /// `N d_z x N d_z`.
    pub a: DMatrix<f64>,
    /// `N d_z x N d_z`, symmetric PSD.
    pub a_hat: DMatrix<f64>,
    /// `N d_z x N d_y`.
    pub b: DMatrix<f64>,
    /// `N d_z`.
    pub c: DVector<f64>,
    /// `N d_y x N d_z`, block-diagonal in the means.
    pub d: DMatrix<f64>,
    /// `N d_z x N d_z` per agent.
    pub d_i: Vec<DMatrix<f64>>,
}

/// Latent statistics sufficient for one step's assembly.
enum JointStats {
    /// Independent entries with known mean and elementwise second moment
    /// (covers deterministic latents as the zero-variance case).
    Closed {
        mean: Vec<DMatrix<f64>>,
        sq: Vec<DMatrix<f64>>,
    },
    /// Joint Monte-Carlo draws: `samples[s][agent]`.
    Sampled {
        samples: Vec<Vec<DMatrix<f64>>>,
        mean: Vec<DMatrix<f64>>,
    },
}

impl JointStats {
    fn mean(&self, i: usize) -> &DMatrix<f64> {
        match self {
            JointStats::Closed { mean, .. } => &mean[i],
            JointStats::Sampled { mean, .. } => &mean[i],
        }
    }

    /// `E[Z_i' M Z_j]` for a `d_y x d_y` coefficient block `M`.
    fn quad(&self, i: usize, j: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            JointStats::Closed { mean, sq } => {
                if i != j {
                    mean[i].transpose() * m * &mean[j]
                } else {
                    let mut out = mean[i].transpose() * m * &mean[i];
                    // Same-entry correction: E[Z_kp^2] differs from mean^2
                    // only on matching (row, column) pairs.
                    let d_y = mean[i].nrows();
                    let d_z = mean[i].ncols();
                    for k in 0..d_y {
                        let mk = m[(k, k)];
                        if mk != 0.0 {
                            for p in 0..d_z {
                                let mu = mean[i][(k, p)];
                                out[(p, p)] += mk * (sq[i][(k, p)] - mu * mu);
                            }
                        }
                    }
                    out
                }
            }
            JointStats::Sampled { samples, .. } => {
                let d_z = samples[0][i].ncols();
                let mut acc = DMatrix::zeros(d_z, d_z);
                for s in samples {
                    acc += s[i].transpose() * m * &s[j];
                }
                acc / samples.len() as f64
            }
        }
    }
}

fn check_continuation(
    p_next: &[DMatrix<f64>],
    s_next: &[DVector<f64>],
    dims: &Dims,
) -> Result<(), MomentsError> {
    let ny = dims.stacked_y();
    if p_next.len() != dims.n_agents || s_next.len() != dims.n_agents {
        return Err(MomentsError::ContinuationShape(format!(
            "expected {} P/S entries, got {}/{}",
            dims.n_agents,
            p_next.len(),
            s_next.len()
        )));
    }
    for (i, p) in p_next.iter().enumerate() {
        if p.nrows() != ny || p.ncols() != ny {
            return Err(MomentsError::ContinuationShape(format!(
                "P_{i} is {}x{}, expected {ny}x{ny}",
                p.nrows(),
                p.ncols()
            )));
        }
    }
    for (i, s) in s_next.iter().enumerate() {
        if s.len() != ny {
            return Err(MomentsError::ContinuationShape(format!(
                "S_{i} has length {}, expected {ny}",
                s.len()
            )));
        }
    }
    Ok(())
}

fn assemble(
    stats: &JointStats,
    p_next: &[DMatrix<f64>],
    s_next: &[DVector<f64>],
    w: &DVector<f64>,
    dims: &Dims,
) -> MomentSet {
    let n = dims.n_agents;
    let (d_y, d_z) = (dims.d_y, dims.d_z);
    let nz = dims.stacked_z();
    let ny = dims.stacked_y();

    let mut a = DMatrix::zeros(nz, nz);
    let mut a_hat = DMatrix::zeros(nz, nz);
    let mut d_i = vec![DMatrix::zeros(nz, nz); n];
    let eye = DMatrix::identity(d_y, d_y);
    for i in 0..n {
        for j in 0..n {
            let p_block = p_next[i].view((i * d_y, j * d_y), (d_y, d_y)).into_owned();
            a.view_mut((i * d_z, j * d_z), (d_z, d_z))
                .copy_from(&stats.quad(i, j, &p_block));
            let unit = stats.quad(i, j, &eye);
            a_hat
                .view_mut((i * d_z, j * d_z), (d_z, d_z))
                .copy_from(&(unit * (w[i] * w[j])));
        }
    }
    for (k, d_k) in d_i.iter_mut().enumerate() {
        for j in 0..n {
            for l in 0..n {
                let p_block = p_next[k].view((j * d_y, l * d_y), (d_y, d_y)).into_owned();
                d_k.view_mut((j * d_z, l * d_z), (d_z, d_z))
                    .copy_from(&stats.quad(j, l, &p_block));
            }
        }
    }

    let mut b = DMatrix::zeros(nz, ny);
    let mut c = DVector::zeros(nz);
    let mut d = DMatrix::zeros(ny, nz);
    for i in 0..n {
        let mean = stats.mean(i);
        // Row-block i of B is (P_i e_i E[Z_i])' where P_i e_i is P_i's
        // column block i.
        let col = p_next[i].view((0, i * d_y), (ny, d_y));
        b.view_mut((i * d_z, 0), (d_z, ny))
            .copy_from(&(col * mean).transpose());
        let s_block = s_next[i].rows(i * d_y, d_y);
        c.rows_mut(i * d_z, d_z)
            .copy_from(&(mean.transpose() * s_block));
        d.view_mut((i * d_y, i * d_z), (d_y, d_z)).copy_from(mean);
    }

    MomentSet {
        mean_z: (0..n).map(|i| stats.mean(i).clone()).collect(),
        a,
        a_hat,
        b,
        c,
        d,
        d_i,
    }
}

fn check_latents(latents: &[DMatrix<f64>], dims: &Dims) -> Result<(), MomentsError> {
    if latents.len() != dims.n_agents {
        return Err(MomentsError::MissingPreActivations {
            expected: dims.n_agents,
            got: latents.len(),
        });
    }
    for (i, z) in latents.iter().enumerate() {
        if z.nrows() != dims.d_y || z.ncols() != dims.d_z {
            return Err(MomentsError::LatentShape {
                index: i,
                rows: z.nrows(),
                cols: z.ncols(),
                want_rows: dims.d_y,
                want_cols: dims.d_z,
            });
        }
    }
    Ok(())
}

/// Assembly for deterministic encoders: every expectation is the realized
/// value, so the closed route with `E[Z^2] = Z^2` is exact.
pub fn assemble_deterministic_moments(
    latents: &[DMatrix<f64>],
    p_next: &[DMatrix<f64>],
    s_next: &[DVector<f64>],
    w: &DVector<f64>,
    dims: &Dims,
) -> Result<MomentSet, MomentsError> {
    check_latents(latents, dims)?;
    check_continuation(p_next, s_next, dims)?;
    let stats = JointStats::Closed {
        mean: latents.to_vec(),
        sq: latents.iter().map(|z| z.map(|v| v * v)).collect(),
    };
    Ok(assemble(&stats, p_next, s_next, w, dims))
}

/// Assembly for rectified-Gaussian (RFN) latents from cached
/// pre-activations: exact second moments on diagonal blocks, products of
/// means elsewhere (cross-agent independence).
pub fn assemble_rfn_moments(
    pre: &[RectGaussParams],
    p_next: &[DMatrix<f64>],
    s_next: &[DVector<f64>],
    w: &DVector<f64>,
    dims: &Dims,
) -> Result<MomentSet, MomentsError> {
    if pre.len() != dims.n_agents {
        return Err(MomentsError::MissingPreActivations {
            expected: dims.n_agents,
            got: pre.len(),
        });
    }
    for (i, p) in pre.iter().enumerate() {
        if p.sigma < 0.0 || !p.sigma.is_finite() {
            return Err(MomentsError::BadSigma(p.sigma));
        }
        if p.a.nrows() != dims.d_y || p.a.ncols() != dims.d_z {
            return Err(MomentsError::LatentShape {
                index: i,
                rows: p.a.nrows(),
                cols: p.a.ncols(),
                want_rows: dims.d_y,
                want_cols: dims.d_z,
            });
        }
    }
    check_continuation(p_next, s_next, dims)?;
    let stats = JointStats::Closed {
        mean: pre.iter().map(rect_mean).collect(),
        sq: pre.iter().map(rect_sq_mean).collect(),
    };
    Ok(assemble(&stats, p_next, s_next, w, dims))
}

/// Monte-Carlo assembly: every expectation is replaced by the sample mean
/// over `n_samples` joint draws. `draw(s)` must return one fresh joint draw
/// `(Z_1, ..., Z_N)` for sample index `s`; determinism across schedules is
/// the caller's concern (use per-sample substreams).
pub fn assemble_mc_moments<F>(
    mut draw: F,
    n_samples: usize,
    p_next: &[DMatrix<f64>],
    s_next: &[DVector<f64>],
    w: &DVector<f64>,
    dims: &Dims,
) -> Result<MomentSet, MomentsError>
where
    F: FnMut(usize) -> Vec<DMatrix<f64>>,
{
    if n_samples == 0 {
        return Err(MomentsError::NoSamples);
    }
    check_continuation(p_next, s_next, dims)?;
    let mut samples = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let joint = draw(s);
        check_latents(&joint, dims)?;
        samples.push(joint);
    }
    let mut mean = vec![DMatrix::zeros(dims.d_y, dims.d_z); dims.n_agents];
    for s in &samples {
        for i in 0..dims.n_agents {
            mean[i] += &s[i];
        }
    }
    for m in &mut mean {
        *m /= n_samples as f64;
    }
    let stats = JointStats::Sampled { samples, mean };
    Ok(assemble(&stats, p_next, s_next, w, dims))
}

/// Monte-Carlo assembly that also returns entry-wise standard errors of
/// every coefficient, for statistical cross-validation of the closed
/// forms.
pub fn assemble_mc_moments_with_se<F>(
    mut draw: F,
    n_samples: usize,
    p_next: &[DMatrix<f64>],
    s_next: &[DVector<f64>],
    w: &DVector<f64>,
    dims: &Dims,
) -> Result<(MomentSet, MomentSet), MomentsError>
where
    F: FnMut(usize) -> Vec<DMatrix<f64>>,
{
    if n_samples == 0 {
        return Err(MomentsError::NoSamples);
    }
    check_continuation(p_next, s_next, dims)?;
    let mut acc: Option<(MomentSet, MomentSet)> = None;
    for s in 0..n_samples {
        let joint = draw(s);
        check_latents(&joint, dims)?;
        // One-sample "instant" set: realized values in place of moments.
        let stats = JointStats::Closed {
            mean: joint.clone(),
            sq: joint.iter().map(|z| z.map(|v| v * v)).collect(),
        };
        let inst = assemble(&stats, p_next, s_next, w, dims);
        match &mut acc {
            None => {
                let sq = map_set(&inst, &inst, |v, _| v * v);
                acc = Some((inst, sq));
            }
            Some((sum, sumsq)) => {
                *sum = map_set(sum, &inst, |a, b| a + b);
                *sumsq = map_set(sumsq, &inst, |a, b| a + b * b);
            }
        }
    }
    let (sum, sumsq) = acc.unwrap();
    let nf = n_samples as f64;
    let mean = map_set(&sum, &sum, |v, _| v / nf);
    let se = map_set(&sumsq, &mean, |sq, m| {
        ((sq / nf - m * m).max(0.0) / nf).sqrt()
    });
    Ok((mean, se))
}

fn map_set(a: &MomentSet, b: &MomentSet, f: impl Fn(f64, f64) -> f64 + Copy) -> MomentSet {
    MomentSet {
        mean_z: a
            .mean_z
            .iter()
            .zip(&b.mean_z)
            .map(|(x, y)| x.zip_map(y, f))
            .collect(),
        a: a.a.zip_map(&b.a, f),
        a_hat: a.a_hat.zip_map(&b.a_hat, f),
        b: a.b.zip_map(&b.b, f),
        c: a.c.zip_map(&b.c, f),
        d: a.d.zip_map(&b.d, f),
        d_i: a
            .d_i
            .iter()
            .zip(&b.d_i)
            .map(|(x, y)| x.zip_map(y, f))
            .collect(),
    }
}
