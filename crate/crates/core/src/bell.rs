//! Binary measurements, the CHSH functional and the shifted CHSH operator.
//!
//! The shifted operator is `S = mu_s * I - nu_s * CHSH` with
//! `mu_s = 2 / sqrt(2 - s^2/4)` and `nu_s = (s/4) / sqrt(2 - s^2/4)`. For any
//! pair of binary measurements on each side and any `s` in `(2, 2 sqrt 2)` it
//! dominates `±(A(0|0) - A(1|0)) ⊗ I`; [`verify_shifted_bound`] checks that
//! numerically by eigenvalue computation.

use std::f64::consts::SQRT_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, c64, hermiticity_error, identity, kron, kron_all, min_eigenvalue, CMatrix,
};

/// Tolerance on `E0 + E1 = I` and on positivity of POVM elements.
pub const POVM_TOL: f64 = 1e-12;
/// Tolerance on `E^2 = E` for projective measurements.
pub const PROJECTIVE_TOL: f64 = 1e-10;
/// Minimum eigenvalue accepted as "positive semidefinite" in verdicts.
pub const PSD_TOL: f64 = 1e-9;
/// Distance kept from either end of the open interval `(2, 2 sqrt 2)`.
pub const S_MARGIN: f64 = 1e-6;
pub const TSIRELSON: f64 = 2.0 * SQRT_2;
pub const S_MIN: f64 = 2.0 + S_MARGIN;
pub const S_MAX: f64 = TSIRELSON - S_MARGIN;
/// Largest total dimension accepted by the tensor-product check.
pub const MAX_PRODUCT_DIM: usize = 1 << 12;

/// A two-outcome POVM `{E0, E1}` on a `dim`-dimensional system.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMeasurement {
    dim: usize,
    elements: [CMatrix; 2],
    projective: bool,
}

impl BinaryMeasurement {
    /// Validate a POVM pair. The measurement is flagged projective when both
    /// elements are idempotent within [`PROJECTIVE_TOL`].
    pub fn new(element0: CMatrix, element1: CMatrix) -> Result<Self> {
        let dim = element0.nrows();
        if !element0.is_square() || element1.shape() != element0.shape() || dim == 0 {
            return Err(Error::InvalidMeasurement(
                "POVM elements must be square matrices of equal size".into(),
            ));
        }
        for (label, e) in [("E0", &element0), ("E1", &element1)] {
            if hermiticity_error(e) > POVM_TOL {
                return Err(Error::InvalidMeasurement(format!("{label} is not Hermitian")));
            }
            let lo = min_eigenvalue(e);
            if lo < -POVM_TOL {
                return Err(Error::InvalidMeasurement(format!(
                    "{label} has negative eigenvalue {lo:e}"
                )));
            }
        }
        let completeness = &element0 + &element1 - identity(dim);
        if completeness.iter().any(|z| z.norm() > POVM_TOL) {
            return Err(Error::InvalidMeasurement("E0 + E1 != I".into()));
        }
        let projective = [&element0, &element1]
            .iter()
            .all(|e| (*e * *e - *e).iter().all(|z| z.norm() <= PROJECTIVE_TOL));
        Ok(BinaryMeasurement {
            dim,
            elements: [element0, element1],
            projective,
        })
    }

    /// Projective qubit measurement of the observable `cos(theta) Z + sin(theta) X`.
    pub fn qubit_xz(theta: f64) -> Self {
        let obs = linalg::pauli_z().scale(theta.cos()) + linalg::pauli_x().scale(theta.sin());
        let half_id = identity(2).scale(0.5);
        BinaryMeasurement {
            dim: 2,
            elements: [&half_id + obs.scale(0.5), &half_id - obs.scale(0.5)],
            projective: true,
        }
    }

    /// Projective qubit measurement along an arbitrary Bloch direction.
    pub fn qubit_bloch(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let obs = linalg::pauli_x().scale(st * phi.cos())
            + linalg::pauli_y().scale(st * phi.sin())
            + linalg::pauli_z().scale(ct);
        let half_id = identity(2).scale(0.5);
        BinaryMeasurement {
            dim: 2,
            elements: [&half_id + obs.scale(0.5), &half_id - obs.scale(0.5)],
            projective: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn element(&self, outcome: usize) -> &CMatrix {
        &self.elements[outcome]
    }

    pub fn is_projective(&self) -> bool {
        self.projective
    }

    /// `E0 - E1`.
    pub fn observable(&self) -> CMatrix {
        &self.elements[0] - &self.elements[1]
    }
}

/// Alice's and Bob's two binary measurements for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundDevices {
    alice: [BinaryMeasurement; 2],
    bob: [BinaryMeasurement; 2],
}

/// Measurement angles in the X–Z plane, used for serialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceAngles {
    pub alice: [f64; 2],
    pub bob: [f64; 2],
}

impl DeviceAngles {
    /// Angles reaching the Tsirelson value on `(|00> + |11>)/sqrt 2`.
    pub const OPTIMAL: DeviceAngles = DeviceAngles {
        alice: [0.0, std::f64::consts::FRAC_PI_2],
        bob: [std::f64::consts::FRAC_PI_4, -std::f64::consts::FRAC_PI_4],
    };
}

impl RoundDevices {
    pub fn new(alice: [BinaryMeasurement; 2], bob: [BinaryMeasurement; 2]) -> Result<Self> {
        if alice[0].dim != alice[1].dim || bob[0].dim != bob[1].dim {
            return Err(Error::DimensionMismatch(
                "both settings of a party must act on the same space".into(),
            ));
        }
        Ok(RoundDevices { alice, bob })
    }

    pub fn from_angles(angles: DeviceAngles) -> Self {
        RoundDevices {
            alice: angles.alice.map(BinaryMeasurement::qubit_xz),
            bob: angles.bob.map(BinaryMeasurement::qubit_xz),
        }
    }

    /// The standard optimal-angle qubit devices.
    pub fn optimal() -> Self {
        Self::from_angles(DeviceAngles::OPTIMAL)
    }

    /// Random projective qubit devices with X–Z plane angles.
    pub fn random_xz<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut angle = || rng.random_range(0.0..std::f64::consts::TAU);
        Self::from_angles(DeviceAngles {
            alice: [angle(), angle()],
            bob: [angle(), angle()],
        })
    }

    /// Random projective qubit devices with uniformly random Bloch directions.
    pub fn random_bloch<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut meas = || {
            let cos_theta: f64 = rng.random_range(-1.0..=1.0);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            BinaryMeasurement::qubit_bloch(cos_theta.acos(), phi)
        };
        RoundDevices {
            alice: [meas(), meas()],
            bob: [meas(), meas()],
        }
    }

    pub fn dim_a(&self) -> usize {
        self.alice[0].dim
    }

    pub fn dim_b(&self) -> usize {
        self.bob[0].dim
    }

    pub fn alice(&self, setting: usize) -> &BinaryMeasurement {
        &self.alice[setting]
    }

    pub fn bob(&self, setting: usize) -> &BinaryMeasurement {
        &self.bob[setting]
    }

    /// `A(a|x) ⊗ B(b|y)`.
    pub fn joint_element(&self, a: usize, b: usize, x: usize, y: usize) -> CMatrix {
        kron(self.alice[x].element(a), self.bob[y].element(b))
    }

    /// `(A(0|0) - A(1|0)) ⊗ I_B`, the bias operator of Alice's key setting.
    pub fn key_bias_operator(&self) -> CMatrix {
        kron(&self.alice[0].observable(), &identity(self.dim_b()))
    }
}

/// `sum_{x,y,a,b} (-1)^{a+b+xy} A(a|x) ⊗ B(b|y)`.
pub fn chsh_operator(devices: &RoundDevices) -> CMatrix {
    let dim = devices.dim_a() * devices.dim_b();
    let mut op = CMatrix::zeros(dim, dim);
    for x in 0..2 {
        for y in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    let sign = if (a + b + x * y) % 2 == 0 { 1.0 } else { -1.0 };
                    op += devices.joint_element(a, b, x, y).scale(sign);
                }
            }
        }
    }
    op
}

/// CHSH value `tr(rho * CHSH)` of a bipartite state.
pub fn chsh_value(state: &CMatrix, devices: &RoundDevices) -> Result<f64> {
    let dim = devices.dim_a() * devices.dim_b();
    if state.shape() != (dim, dim) {
        return Err(Error::DimensionMismatch(format!(
            "state is {:?}, devices act on dimension {dim}",
            state.shape()
        )));
    }
    Ok(linalg::trace_of_product(state, &chsh_operator(devices)).re)
}

/// Parameters of the shifted CHSH operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftedChshParams {
    pub s: f64,
    pub mu: f64,
    pub nu: f64,
}

impl ShiftedChshParams {
    /// Accepts `s` in the closed interval `[2, 2 sqrt 2]` and clamps it into
    /// `[S_MIN, S_MAX]`, where both coefficients are finite.
    pub fn new(s: f64) -> Result<Self> {
        if !s.is_finite() || !(2.0..=TSIRELSON).contains(&s) {
            return Err(Error::OutOfRange(format!(
                "s = {s} is outside [2, 2 sqrt 2]"
            )));
        }
        let s = s.clamp(S_MIN, S_MAX);
        let (mu, nu) = shifted_coefficients(s);
        Ok(ShiftedChshParams { s, mu, nu })
    }

    /// `<S>` for a state with the given CHSH value.
    pub fn expectation(&self, chsh: f64) -> f64 {
        self.mu - self.nu * chsh
    }
}

/// `(mu_s, nu_s)` without clamping or range checks.
pub fn shifted_coefficients(s: f64) -> (f64, f64) {
    let root = (2.0 - s * s / 4.0).sqrt();
    (2.0 / root, s / (4.0 * root))
}

/// `S = mu_s I - nu_s CHSH`.
pub fn shifted_chsh_operator(params: &ShiftedChshParams, devices: &RoundDevices) -> CMatrix {
    shifted_operator_with(params.mu, params.nu, devices)
}

/// `mu I - nu CHSH` for arbitrary coefficients.
pub fn shifted_operator_with(mu: f64, nu: f64, devices: &RoundDevices) -> CMatrix {
    let chsh = chsh_operator(devices);
    identity(chsh.nrows()).scale(mu) - chsh.scale(nu)
}

/// Smallest eigenvalues of `S - C` and `S + C`, with `C` the key bias operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub min_eig_plus: f64,
    pub min_eig_minus: f64,
    pub pass: bool,
}

/// Check `±(A(0|0) - A(1|0)) ⊗ I <= S` for the given parameters and devices.
pub fn verify_shifted_bound(params: &ShiftedChshParams, devices: &RoundDevices) -> BoundReport {
    check_against_bias(&shifted_chsh_operator(params, devices), devices)
}

/// Check `±(A(0|0) - A(1|0)) ⊗ I <= op` for an arbitrary operator `op`.
pub fn check_against_bias(op: &CMatrix, devices: &RoundDevices) -> BoundReport {
    let bias = devices.key_bias_operator();
    let min_eig_plus = min_eigenvalue(&(op - &bias));
    let min_eig_minus = min_eigenvalue(&(op + &bias));
    BoundReport {
        min_eig_plus,
        min_eig_minus,
        pass: min_eig_plus >= -PSD_TOL && min_eig_minus >= -PSD_TOL,
    }
}

/// Check `±⊗C_i <= ⊗S_i` given pairs satisfying `±C_i <= S_i`.
///
/// Returns [`Error::HypothesisViolated`] when some pair fails its own
/// hypothesis (within `1e-10`), so a bad generator is never mistaken for a
/// counterexample.
pub fn verify_tensor_product_bound(pairs: &[(CMatrix, CMatrix)]) -> Result<BoundReport> {
    if pairs.is_empty() {
        return Err(Error::OutOfRange("no factors given".into()));
    }
    let mut total = 1usize;
    for (i, (c, s)) in pairs.iter().enumerate() {
        if !c.is_square() || c.shape() != s.shape() {
            return Err(Error::DimensionMismatch(format!(
                "factor {i}: C and S must be square and of equal size"
            )));
        }
        if hermiticity_error(c) > POVM_TOL || hermiticity_error(s) > POVM_TOL {
            return Err(Error::HypothesisViolated(format!("factor {i} is not Hermitian")));
        }
        total = total.saturating_mul(c.nrows());
        if total > MAX_PRODUCT_DIM {
            return Err(Error::TooLarge {
                dim: total,
                limit: MAX_PRODUCT_DIM,
            });
        }
        let lo = min_eigenvalue(&(s - c)).min(min_eigenvalue(&(s + c)));
        if lo < -1e-10 {
            return Err(Error::HypothesisViolated(format!(
                "factor {i}: ±C <= S fails with eigenvalue {lo:e}"
            )));
        }
    }
    let c_all = kron_all(pairs.iter().map(|(c, _)| c));
    let s_all = kron_all(pairs.iter().map(|(_, s)| s));
    let min_eig_plus = min_eigenvalue(&(&s_all + &c_all));
    let min_eig_minus = min_eigenvalue(&(&s_all - &c_all));
    Ok(BoundReport {
        min_eig_plus,
        min_eig_minus,
        pass: min_eig_plus >= -PSD_TOL && min_eig_minus >= -PSD_TOL,
    })
}

/// `(|00> + |11>)/sqrt 2` as a density matrix.
pub fn phi_plus() -> CMatrix {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let v = nalgebra::DVector::from_vec(vec![c64(h, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), c64(h, 0.0)]);
    linalg::outer(&v)
}

/// Two-qubit Werner-type state `v |phi+><phi+| + (1 - v) I/4`.
pub fn werner(visibility: f64) -> CMatrix {
    phi_plus().scale(visibility) + identity(4).scale((1.0 - visibility) / 4.0)
}

/// `s` values for sweeps: `count` points in `[S_MIN, S_MAX]`, evenly spaced.
pub fn linear_s_grid(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![S_MIN],
        _ => (0..count)
            .map(|i| S_MIN + (S_MAX - S_MIN) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}
