//! Agent feature encoders behind one interface.
//!
//! Three kinds are provided. A *deterministic* encoder applies a fixed
//! feature map to the current input (standing in for any pre-trained
//! model). A *random feature network* (RFN) adds fresh iid Gaussian noise
//! to a fixed affine map and rectifies. An *echo-state network* (ESN) adds
//! a recurrence on the previous latent and squashes through a Hard Sigmoid,
//! which keeps latents in `[0, 1]`; the [`relu_blowup_probe`] documents why
//! an unbounded activation is not the default.
//!
//! The paper-facing pre-activation is `A [x, ..., x] + b`; since every
//! column of the tiled input equals `x`, this is computed as the rank-one
//! broadcast `(A x) 1' + b`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("input has length {got}, expected {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("previous latent has shape {rows}x{cols}, expected {want_rows}x{want_cols}")]
    PrevShape {
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("operation requires encoder kind {0}")]
    WrongKind(&'static str),
}

/// Element-wise activation used by the recurrent encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `clip((u + offset) / scale, 0, 1)`; the default, bounded.
    HardSigmoid,
    /// Unbounded; kept for the blow-up diagnostic.
    Relu,
}

/// Deterministic feature maps for the pre-trained encoder kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeterministicMap {
    /// `tanh((A x) 1' + b)` with fixed seeded `A`, `b`; entries in (-1, 1).
    SeededTanh,
    /// Each latent row is `x` padded (or truncated) to `d_z` columns.
    IdentityPad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Deterministic(DeterministicMap),
    Rfn,
    Esn(Activation),
}

/// Fixed per-agent encoder parameters, drawn once at construction.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub kind: EncoderKind,
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    /// Input matrix `A`, `d_y x d_x`.
    pub input: DMatrix<f64>,
    /// Bias `b`, `d_y x d_z`.
    pub bias: DMatrix<f64>,
    /// Recurrence `B`, `d_y x d_y` (ESN only, zero otherwise).
    pub recurrence: DMatrix<f64>,
    /// Noise scale; constant over time.
    pub sigma: f64,
    /// Spectral radius of `B` after rescaling (diagnostic).
    pub spectral_radius: f64,
    /// Hard-Sigmoid shape `(offset, scale)`: `clip((u + offset)/scale, 0, 1)`.
    pub hard_sigmoid: (f64, f64),
}

/// A latent state together with the step it was produced at.
///
/// For ESN encoders with the Hard Sigmoid activation every entry lies in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: DMatrix<f64>,
    pub t: usize,
}

impl LatentState {
    /// Whether all entries are inside the Hard-Sigmoid range.
    pub fn in_unit_range(&self) -> bool {
        self.z.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Build an encoder. `A` and `b` entries are `N(0, 1/d_x)`; the ESN
/// recurrence starts as `N(0, 1/d_y)` and is rescaled to
/// `target_radius` when its spectral radius is nonzero.
pub fn build_encoder(
    kind: EncoderKind,
    d_x: usize,
    d_y: usize,
    d_z: usize,
    sigma: f64,
    target_radius: f64,
    init_rng: &mut ChaCha8Rng,
) -> EncoderParams {
    let scale = 1.0 / (d_x as f64).sqrt();
    let mut input = rng::normal_matrix(init_rng, d_y, d_x, scale);
    let mut bias = rng::normal_matrix(init_rng, d_y, d_z, scale);
    let mut recurrence = DMatrix::zeros(d_y, d_y);
    let mut spectral_radius = 0.0;
    match kind {
        EncoderKind::Deterministic(DeterministicMap::IdentityPad) => {
            input.fill(0.0);
            bias.fill(0.0);
        }
        EncoderKind::Esn(_) => {
            let raw = rng::normal_matrix(init_rng, d_y, d_y, 1.0 / (d_y as f64).sqrt());
            let rho = raw
                .complex_eigenvalues()
                .iter()
                .map(|c| c.norm())
                .fold(0.0f64, f64::max);
            recurrence = if rho > 0.0 {
                raw * (target_radius / rho)
            } else {
                raw
            };
            spectral_radius = if rho > 0.0 { target_radius } else { 0.0 };
        }
        _ => {}
    }
    EncoderParams {
        kind,
        d_x,
        d_y,
        d_z,
        input,
        bias,
        recurrence,
        sigma,
        spectral_radius,
        hard_sigmoid: (3.0, 6.0),
    }
}

fn hard_sigmoid(u: f64, offset: f64, scale: f64) -> f64 {
    ((u + offset) / scale).clamp(0.0, 1.0)
}

impl EncoderParams {
    fn check_input(&self, x: &DVector<f64>) -> Result<(), EncoderError> {
        if x.len() != self.d_x {
            return Err(EncoderError::InputLength {
                expected: self.d_x,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// The deterministic part of the pre-activation: `(A x) 1' + b`.
    pub fn pre_activation(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, EncoderError> {
        self.check_input(x)?;
        let ax = &self.input * x;
        let mut a = self.bias.clone();
        for r in 0..self.d_y {
            for c in 0..self.d_z {
                a[(r, c)] += ax[r];
            }
        }
        Ok(a)
    }

    /// Unified encode used by the online loop. `prev` is the previous
    /// latent (ignored by memoryless kinds); `rng` supplies the fresh
    /// per-step noise (ignored by the deterministic kind).
    pub fn encode(
        &self,
        x: &DVector<f64>,
        prev: &DMatrix<f64>,
        rng_in: &mut ChaCha8Rng,
    ) -> Result<DMatrix<f64>, EncoderError> {
        match self.kind {
            EncoderKind::Deterministic(_) => encode_deterministic(self, x),
            EncoderKind::Rfn => encode_rfn(self, x, rng_in),
            EncoderKind::Esn(_) => encode_esn(self, x, prev, rng_in),
        }
    }
}

/// Deterministic encoder: a fixed map of the current input with no
/// randomness and no memory. Repeated calls are bit-identical.
pub fn encode_deterministic(
    params: &EncoderParams,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>, EncoderError> {
    let map = match params.kind {
        EncoderKind::Deterministic(m) => m,
        _ => return Err(EncoderError::WrongKind("deterministic")),
    };
    params.check_input(x)?;
    match map {
        DeterministicMap::SeededTanh => Ok(params.pre_activation(x)?.map(f64::tanh)),
        DeterministicMap::IdentityPad => {
            let mut z = DMatrix::zeros(params.d_y, params.d_z);
            for r in 0..params.d_y {
                for c in 0..params.d_z.min(params.d_x) {
                    z[(r, c)] = x[c];
                }
            }
            Ok(z)
        }
    }
}

/// Random feature network: `ReLU((A x) 1' + b + sigma W)` with a fresh
/// `d_y x d_z` matrix `W` of iid standard normals every call.
pub fn encode_rfn(
    params: &EncoderParams,
    x: &DVector<f64>,
    rng_in: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>, EncoderError> {
    if !matches!(params.kind, EncoderKind::Rfn) {
        return Err(EncoderError::WrongKind("rfn"));
    }
    let mut a = params.pre_activation(x)?;
    add_noise(&mut a, params.sigma, rng_in);
    Ok(a.map(|v| v.max(0.0)))
}

/// Echo-state encoder: `act((A x) 1' + B Z_prev + b + sigma W)`.
pub fn encode_esn(
    params: &EncoderParams,
    x: &DVector<f64>,
    prev: &DMatrix<f64>,
    rng_in: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>, EncoderError> {
    let act = match params.kind {
        EncoderKind::Esn(a) => a,
        _ => return Err(EncoderError::WrongKind("esn")),
    };
    if prev.nrows() != params.d_y || prev.ncols() != params.d_z {
        return Err(EncoderError::PrevShape {
            rows: prev.nrows(),
            cols: prev.ncols(),
            want_rows: params.d_y,
            want_cols: params.d_z,
        });
    }
    let mut u = params.pre_activation(x)? + &params.recurrence * prev;
    add_noise(&mut u, params.sigma, rng_in);
    let (off, sc) = params.hard_sigmoid;
    Ok(match act {
        Activation::HardSigmoid => u.map(|v| hard_sigmoid(v, off, sc)),
        Activation::Relu => u.map(|v| v.max(0.0)),
    })
}

fn add_noise(a: &mut DMatrix<f64>, sigma: f64, rng_in: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        for v in a.iter_mut() {
            *v += sigma * rng::standard_normal(rng_in);
        }
    }
}

/// Run the ESN recurrence for `steps` steps on standard-normal inputs and
/// return the max-abs latent entry per step. With the Hard Sigmoid the
/// trace is bounded by 1; with ReLU and a super-unit spectral radius it
/// tends to grow, which is why the bounded activation is the default.
pub fn relu_blowup_probe(
    params: &EncoderParams,
    steps: usize,
    rng_in: &mut ChaCha8Rng,
) -> Result<Vec<f64>, EncoderError> {
    if !matches!(params.kind, EncoderKind::Esn(_)) {
        return Err(EncoderError::WrongKind("esn"));
    }
    let mut z = DMatrix::zeros(params.d_y, params.d_z);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x = rng::normal_vector(rng_in, params.d_x, 1.0);
        z = encode_esn(params, &x, &z, rng_in)?;
        trace.push(z.amax());
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{rect_mean, RectGaussParams};
    use crate::rng::{standard_normal, stream, TAG_INIT, TAG_PATH};

    fn det(map: DeterministicMap, d_x: usize, d_y: usize, d_z: usize, seed: u64) -> EncoderParams {
        let mut r = stream(seed, &[TAG_INIT, 0]);
        build_encoder(
            EncoderKind::Deterministic(map),
            d_x,
            d_y,
            d_z,
            0.0,
            0.9,
            &mut r,
        )
    }

    #[test]
    fn identity_pad_places_input_in_rows() {
        let p = det(DeterministicMap::IdentityPad, 2, 2, 4, 1);
        let x = DVector::from_column_slice(&[1.0, 2.0]);
        let z = encode_deterministic(&p, &x).unwrap();
        for r in 0..2 {
            assert_eq!(z[(r, 0)], 1.0);
            assert_eq!(z[(r, 1)], 2.0);
            assert_eq!(z[(r, 2)], 0.0);
            assert_eq!(z[(r, 3)], 0.0);
        }
    }

    #[test]
    fn deterministic_encode_is_bit_identical() {
        let p = det(DeterministicMap::SeededTanh, 3, 2, 4, 7);
        let x = DVector::from_column_slice(&[0.3, -1.0, 2.5]);
        let a = encode_deterministic(&p, &x).unwrap();
        let b = encode_deterministic(&p, &x).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn rfn_with_zero_sigma_is_rectified_affine() {
        let mut r = stream(2, &[TAG_INIT, 0]);
        let p = build_encoder(EncoderKind::Rfn, 2, 1, 3, 0.0, 0.9, &mut r);
        let x = DVector::from_column_slice(&[0.5, -0.25]);
        let mut path = stream(2, &[TAG_PATH, 0]);
        let z = encode_rfn(&p, &x, &mut path).unwrap();
        let want = p.pre_activation(&x).unwrap().map(|v| v.max(0.0));
        assert_eq!(z, want);
    }

    #[test]
    fn rfn_dead_zone_is_zero() {
        let mut r = stream(3, &[TAG_INIT, 0]);
        let mut p = build_encoder(EncoderKind::Rfn, 1, 2, 3, 0.01, 0.9, &mut r);
        p.input.fill(0.0);
        p.bias.fill(-10.0);
        let mut path = stream(3, &[TAG_PATH, 0]);
        let z = encode_rfn(&p, &DVector::zeros(1), &mut path).unwrap();
        assert!(z.amax() < 1e-12);
    }

    #[test]
    fn esn_saturates_at_both_rails() {
        let mut r = stream(4, &[TAG_INIT, 0]);
        let mut p = build_encoder(
            EncoderKind::Esn(Activation::HardSigmoid),
            1,
            2,
            3,
            0.0,
            0.9,
            &mut r,
        );
        p.input.fill(0.0);
        p.recurrence.fill(0.0);
        let mut path = stream(4, &[TAG_PATH, 0]);
        p.bias.fill(3.0);
        let hi = encode_esn(&p, &DVector::zeros(1), &DMatrix::zeros(2, 3), &mut path).unwrap();
        assert!(hi.iter().all(|v| *v == 1.0));
        p.bias.fill(-3.0);
        let lo = encode_esn(&p, &DVector::zeros(1), &DMatrix::zeros(2, 3), &mut path).unwrap();
        assert!(lo.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn esn_outputs_stay_in_unit_range() {
        let mut r = stream(5, &[TAG_INIT, 0]);
        let p = build_encoder(
            EncoderKind::Esn(Activation::HardSigmoid),
            2,
            2,
            3,
            2.0,
            0.9,
            &mut r,
        );
        let mut path = stream(5, &[TAG_PATH, 0]);
        let mut z = DMatrix::zeros(2, 3);
        for t in 0..50 {
            let x = rng::normal_vector(&mut path, 2, 3.0);
            z = encode_esn(&p, &x, &z, &mut path).unwrap();
            let state = LatentState { z: z.clone(), t };
            assert!(state.in_unit_range());
        }
    }

    #[test]
    fn noiseless_memoryless_esn_matches_rfn_after_activation_swap() {
        let mut r = stream(6, &[TAG_INIT, 0]);
        let mut esn = build_encoder(
            EncoderKind::Esn(Activation::Relu),
            2,
            1,
            3,
            0.0,
            0.9,
            &mut r,
        );
        esn.recurrence.fill(0.0);
        let mut rfn = esn.clone();
        rfn.kind = EncoderKind::Rfn;
        let x = DVector::from_column_slice(&[0.7, -0.4]);
        let mut p1 = stream(6, &[TAG_PATH, 0]);
        let mut p2 = stream(6, &[TAG_PATH, 0]);
        let a = encode_esn(&esn, &x, &DMatrix::zeros(1, 3), &mut p1).unwrap();
        let b = encode_rfn(&rfn, &x, &mut p2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spectral_radius_is_rescaled() {
        let mut r = stream(7, &[TAG_INIT, 0]);
        let p = build_encoder(
            EncoderKind::Esn(Activation::HardSigmoid),
            1,
            4,
            2,
            0.1,
            0.9,
            &mut r,
        );
        let rho = p
            .recurrence
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0f64, f64::max);
        assert!((rho - 0.9).abs() < 1e-10);
        assert_eq!(p.spectral_radius, 0.9);
    }

    #[test]
    fn probe_hard_sigmoid_bounded_by_one() {
        let mut r = stream(8, &[TAG_INIT, 0]);
        let p = build_encoder(
            EncoderKind::Esn(Activation::HardSigmoid),
            2,
            3,
            3,
            1.0,
            1.5,
            &mut r,
        );
        let mut path = stream(8, &[TAG_PATH, 0]);
        let trace = relu_blowup_probe(&p, 20, &mut path).unwrap();
        assert!(trace.iter().all(|v| *v <= 1.0));
    }

    #[test]
    fn probe_relu_grows_for_super_unit_radius() {
        let mut increasing = 0;
        for seed in 0..100 {
            let mut r = stream(seed, &[TAG_INIT, 0]);
            let p = build_encoder(
                EncoderKind::Esn(Activation::Relu),
                2,
                3,
                3,
                1.0,
                5.0,
                &mut r,
            );
            let mut path = stream(seed, &[TAG_PATH, 0]);
            let trace = relu_blowup_probe(&p, 10, &mut path).unwrap();
            if trace.windows(2).all(|w| w[1] > w[0]) {
                increasing += 1;
            }
        }
        assert!(
            increasing >= 50,
            "only {increasing}/100 seeds grew monotonically"
        );
    }

    #[test]
    fn probe_without_recurrence_is_bounded_by_observed_max() {
        let mut r = stream(9, &[TAG_INIT, 0]);
        let mut p = build_encoder(
            EncoderKind::Esn(Activation::Relu),
            2,
            2,
            3,
            0.5,
            0.9,
            &mut r,
        );
        p.recurrence.fill(0.0);
        let mut path = stream(9, &[TAG_PATH, 0]);
        let trace = relu_blowup_probe(&p, 30, &mut path).unwrap();
        // Without memory the trace cannot trend: it is a sequence of
        // independent draws, so its running max stabilizes quickly.
        let head_max = trace[..15].iter().cloned().fold(0.0f64, f64::max);
        let tail_max = trace[15..].iter().cloned().fold(0.0f64, f64::max);
        assert!(tail_max <= head_max * 10.0 + 10.0);
    }

    #[test]
    fn distinct_seeds_give_uncorrelated_noise_streams() {
        let mut r1 = stream(100, &[TAG_PATH, 0]);
        let mut r2 = stream(101, &[TAG_PATH, 1]);
        let n = 20_000;
        let mut sum1 = 0.0;
        let mut sum2 = 0.0;
        let mut sum12 = 0.0;
        let mut sq1 = 0.0;
        let mut sq2 = 0.0;
        for _ in 0..n {
            let a = standard_normal(&mut r1);
            let b = standard_normal(&mut r2);
            sum1 += a;
            sum2 += b;
            sum12 += a * b;
            sq1 += a * a;
            sq2 += b * b;
        }
        let nf = n as f64;
        let cov = sum12 / nf - (sum1 / nf) * (sum2 / nf);
        let var1 = sq1 / nf - (sum1 / nf).powi(2);
        let var2 = sq2 / nf - (sum2 / nf).powi(2);
        let corr = cov / (var1 * var2).sqrt();
        assert!(corr.abs() <= 3.0 / nf.sqrt(), "corr = {corr}");
    }

    #[test]
    fn causality_replaying_a_prefix_reproduces_latents() {
        let mut r = stream(10, &[TAG_INIT, 0]);
        let p = build_encoder(
            EncoderKind::Esn(Activation::HardSigmoid),
            2,
            1,
            3,
            0.5,
            0.9,
            &mut r,
        );
        let xs: Vec<_> = (0..12)
            .map(|k| DVector::from_column_slice(&[(k as f64).sin(), (k as f64).cos()]))
            .collect();
        let run = |len: usize| {
            let mut path = stream(10, &[TAG_PATH, 0]);
            let mut z = DMatrix::zeros(1, 3);
            let mut out = Vec::new();
            for x in &xs[..len] {
                z = encode_esn(&p, x, &z, &mut path).unwrap();
                out.push(z.clone());
            }
            out
        };
        let full = run(12);
        let half = run(6);
        assert_eq!(&full[..6], &half[..]);
    }

    #[test]
    fn rfn_sample_mean_matches_rectified_gaussian_mean() {
        let mut r = stream(11, &[TAG_INIT, 0]);
        let p = build_encoder(EncoderKind::Rfn, 2, 1, 3, 0.8, 0.9, &mut r);
        let x = DVector::from_column_slice(&[0.4, -0.2]);
        let a = p.pre_activation(&x).unwrap();
        let want = rect_mean(&RectGaussParams { a, sigma: p.sigma });
        let n = 100_000usize;
        let mut path = stream(11, &[TAG_PATH, 0]);
        let mut sum = DMatrix::zeros(1, 3);
        let mut sumsq = DMatrix::zeros(1, 3);
        for _ in 0..n {
            let z = encode_rfn(&p, &x, &mut path).unwrap();
            sumsq += z.map(|v| v * v);
            sum += z;
        }
        let mean = sum / n as f64;
        for c in 0..3 {
            let var = sumsq[(0, c)] / n as f64 - mean[(0, c)].powi(2);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean[(0, c)] - want[(0, c)]).abs() <= 3.0 * se,
                "col {c}: mc {} vs closed {}",
                mean[(0, c)],
                want[(0, c)]
            );
        }
    }
}
