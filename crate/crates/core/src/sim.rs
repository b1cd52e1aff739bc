//! Exact density-matrix simulation of the extractor rounds with an adversary.
//!
//! A [`TripartiteState`] lives on `A_1..A_n B_1..B_n E`. Alice measures
//! setting 0 in every round, the outcomes feed an extractor, and the
//! resulting classical-quantum state on `K ⊗ E` is compared with the ideal
//! `u_K ⊗ rho_E` in trace norm. Two upper bounds are provided: the XOR bound
//! `tr[rho prod_i S_i]` and the table bound
//! `n^2 sqrt(2)^(m-n) tr[rho prod_i (I + S_i)]`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bell::{shifted_chsh_operator, DeviceAngles, RoundDevices, ShiftedChshParams, S_MAX, S_MIN};
use crate::error::{Error, Result};
use crate::extractor::{certify, xor_table, ExtractorTable};
use crate::linalg::{
    self, apply_local, c64, hermiticity_error, identity, keep_last, kron_all, min_eigenvalue,
    permute_subsystems, reduce_to, trace_norm, trace_out_last, CMatrix, Layout,
};

/// Largest total dimension of a tripartite state.
pub const MAX_STATE_DIM: usize = 1 << 12;
/// Validation tolerance for Hermiticity, positivity and normalization.
pub const STATE_TOL: f64 = 1e-10;
/// Slack granted to bound comparisons.
pub const BOUND_SLACK: f64 = 1e-8;

/// Density matrix on `A_1..A_n B_1..B_n E`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripartiteState {
    dims_a: Vec<usize>,
    dims_b: Vec<usize>,
    dim_e: usize,
    rho: CMatrix,
}

impl TripartiteState {
    /// Validate dimensions, Hermiticity, positivity and trace.
    pub fn new(dims_a: Vec<usize>, dims_b: Vec<usize>, dim_e: usize, rho: CMatrix) -> Result<Self> {
        let state = Self::unchecked(dims_a, dims_b, dim_e, rho)?;
        if hermiticity_error(&state.rho) > STATE_TOL {
            return Err(Error::InvalidState("not Hermitian".into()));
        }
        let tr = state.rho.trace();
        if (tr.re - 1.0).abs() > STATE_TOL || tr.im.abs() > STATE_TOL {
            return Err(Error::InvalidState(format!("trace is {tr}")));
        }
        let lo = min_eigenvalue(&state.rho);
        if lo < -STATE_TOL {
            return Err(Error::InvalidState(format!("negative eigenvalue {lo:e}")));
        }
        Ok(state)
    }

    /// Shape checks only, for states produced by trusted constructions.
    pub(crate) fn unchecked(dims_a: Vec<usize>, dims_b: Vec<usize>, dim_e: usize, rho: CMatrix) -> Result<Self> {
        if dims_a.is_empty() || dims_a.len() != dims_b.len() {
            return Err(Error::DimensionMismatch(
                "need at least one round and equally many A and B factors".into(),
            ));
        }
        if dims_a.iter().chain(&dims_b).chain(std::iter::once(&dim_e)).any(|&d| d == 0) {
            return Err(Error::DimensionMismatch("zero-dimensional factor".into()));
        }
        let total = dims_a
            .iter()
            .chain(&dims_b)
            .try_fold(dim_e, |acc, &d| acc.checked_mul(d))
            .unwrap_or(usize::MAX);
        if total > MAX_STATE_DIM {
            return Err(Error::TooLarge {
                dim: total,
                limit: MAX_STATE_DIM,
            });
        }
        if rho.shape() != (total, total) {
            return Err(Error::DimensionMismatch(format!(
                "rho is {:?}, factors multiply to {total}",
                rho.shape()
            )));
        }
        Ok(TripartiteState {
            dims_a,
            dims_b,
            dim_e,
            rho,
        })
    }

    /// Qubit rounds with Eve of dimension `dim_e`.
    pub fn qubits(n_rounds: usize, dim_e: usize, rho: CMatrix) -> Result<Self> {
        Self::new(vec![2; n_rounds], vec![2; n_rounds], dim_e, rho)
    }

    pub fn n_rounds(&self) -> usize {
        self.dims_a.len()
    }

    pub fn dims_a(&self) -> &[usize] {
        &self.dims_a
    }

    pub fn dims_b(&self) -> &[usize] {
        &self.dims_b
    }

    pub fn dim_e(&self) -> usize {
        self.dim_e
    }

    pub fn rho(&self) -> &CMatrix {
        &self.rho
    }

    /// Factor dimensions in storage order `A_1..A_n B_1..B_n E`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = self.dims_a.clone();
        d.extend(&self.dims_b);
        d.push(self.dim_e);
        d
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.dims())
    }

    /// `rho_{A B}` with Eve traced out.
    pub fn reduced_ab(&self) -> CMatrix {
        trace_out_last(&self.rho, self.dim_e)
    }

    /// `rho_{A E}` with Bob traced out, factors `A_1..A_n E`.
    pub fn reduced_ae(&self) -> CMatrix {
        let n = self.n_rounds();
        let mut targets: Vec<usize> = (0..n).collect();
        targets.push(2 * n);
        reduce_to(&self.rho, &self.layout(), &targets).expect("targets are valid")
    }

    /// Check that per-round devices match the local dimensions.
    pub fn check_devices(&self, devices: &[RoundDevices]) -> Result<()> {
        if devices.len() != self.n_rounds() {
            return Err(Error::DimensionMismatch(format!(
                "{} device rounds for a {}-round state",
                devices.len(),
                self.n_rounds()
            )));
        }
        for (i, d) in devices.iter().enumerate() {
            if d.dim_a() != self.dims_a[i] || d.dim_b() != self.dims_b[i] {
                return Err(Error::DimensionMismatch(format!(
                    "round {i}: devices act on ({}, {}), state has ({}, {})",
                    d.dim_a(),
                    d.dim_b(),
                    self.dims_a[i],
                    self.dims_b[i]
                )));
            }
        }
        Ok(())
    }
}

/// Unnormalized conditional states of Eve, one per extractor output value.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalQuantumOutput {
    pub m_out: u32,
    pub blocks: Vec<CMatrix>,
}

impl ClassicalQuantumOutput {
    /// `rho_E = sum_k block_k`.
    pub fn rho_e(&self) -> CMatrix {
        let dim = self.blocks.first().map_or(1, |b| b.nrows());
        self.blocks
            .iter()
            .fold(CMatrix::zeros(dim, dim), |acc, b| acc + b)
    }

    pub fn total_trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.trace().re).sum()
    }

    /// `|| rho_KE - u_K ⊗ rho_E ||_1 = sum_k || block_k - 2^-m rho_E ||_1`.
    pub fn trace_distance_to_ideal(&self) -> f64 {
        let ideal = self.rho_e().scale(1.0 / self.blocks.len() as f64);
        self.blocks.iter().map(|b| trace_norm(&(b - &ideal))).sum()
    }
}

fn check_alice_key_projective(devices: &[RoundDevices]) -> Result<()> {
    for (i, d) in devices.iter().enumerate() {
        if !d.alice(0).is_projective() {
            return Err(Error::InvalidMeasurement(format!(
                "round {i}: Alice's key measurement is not projective"
            )));
        }
    }
    Ok(())
}

/// Build `rho_KE` for Alice's setting-0 outcomes fed through `g`.
pub fn build_rho_ke(
    state: &TripartiteState,
    devices: &[RoundDevices],
    g: &ExtractorTable,
) -> Result<ClassicalQuantumOutput> {
    state.check_devices(devices)?;
    check_alice_key_projective(devices)?;
    let n = state.n_rounds();
    if g.n_in() as usize != n {
        return Err(Error::DimensionMismatch(format!(
            "extractor takes {} bits, state has {n} rounds",
            g.n_in()
        )));
    }
    let rho_ae = state.reduced_ae();
    let mut dims: Vec<usize> = state.dims_a().to_vec();
    dims.push(state.dim_e());
    let layout = Layout::new(&dims);
    let dim_e = state.dim_e();
    let mut blocks = vec![CMatrix::zeros(dim_e, dim_e); 1 << g.m_out()];
    accumulate_outcomes(&rho_ae, &layout, devices, 0, 0, &mut |a, m| {
        blocks[g.apply(a) as usize] += keep_last(m, dim_e);
    })?;
    Ok(ClassicalQuantumOutput {
        m_out: g.m_out(),
        blocks,
    })
}

/// Visit `(prod_i A_i(a_i|0)) rho` for every outcome string, `a_1` least significant.
fn accumulate_outcomes(
    current: &CMatrix,
    layout: &Layout,
    devices: &[RoundDevices],
    round: usize,
    packed: usize,
    visit: &mut dyn FnMut(usize, &CMatrix),
) -> Result<()> {
    if round == devices.len() {
        visit(packed, current);
        return Ok(());
    }
    for bit in 0..2 {
        let next = apply_local(current, layout, &[round], devices[round].alice(0).element(bit))?;
        accumulate_outcomes(&next, layout, devices, round + 1, packed | (bit << round), visit)?;
    }
    Ok(())
}

/// `tr[rho_AB prod_i op_i]` with `op_i` acting on `(A_i, B_i)`.
fn product_expectation(state: &TripartiteState, ops: &[CMatrix]) -> Result<f64> {
    let n = state.n_rounds();
    let mut dims = state.dims_a().to_vec();
    dims.extend(state.dims_b());
    let layout = Layout::new(&dims);
    let mut x = state.reduced_ab();
    for (i, op) in ops.iter().enumerate() {
        x = apply_local(&x, &layout, &[i, n + i], op)?;
    }
    Ok(x.trace().re)
}

/// XOR bound `tr[rho_AB prod_i S_i]` at a single `s`.
pub fn xor_error_bound(state: &TripartiteState, devices: &[RoundDevices], s: f64) -> Result<f64> {
    state.check_devices(devices)?;
    let params = ShiftedChshParams::new(s)?;
    let ops: Vec<CMatrix> = devices
        .iter()
        .map(|d| shifted_chsh_operator(&params, d))
        .collect();
    product_expectation(state, &ops)
}

fn table_bound_unchecked(state: &TripartiteState, devices: &[RoundDevices], s: f64, m_out: u32) -> Result<f64> {
    let params = ShiftedChshParams::new(s)?;
    let ops: Vec<CMatrix> = devices
        .iter()
        .map(|d| {
            let op = shifted_chsh_operator(&params, d);
            &op + identity(op.nrows())
        })
        .collect();
    let n = state.n_rounds() as f64;
    let prefactor = n * n * 2f64.powf((f64::from(m_out) - n) / 2.0);
    Ok(prefactor * product_expectation(state, &ops)?)
}

fn require_certified(g: &ExtractorTable, n_rounds: usize) -> Result<()> {
    if g.n_in() as usize != n_rounds {
        return Err(Error::DimensionMismatch(format!(
            "extractor takes {} bits, state has {n_rounds} rounds",
            g.n_in()
        )));
    }
    let cert = certify(g)?;
    if !cert.pass {
        return Err(Error::Uncertified(format!(
            "max deviation {} exceeds {}",
            cert.max_deviation, cert.bound
        )));
    }
    Ok(())
}

/// Table bound `n^2 sqrt(2)^(m-n) tr[rho_AB prod_i (I + S_i)]` at a single `s`.
/// Requires `m < n` and a certified table.
pub fn table_error_bound(
    state: &TripartiteState,
    devices: &[RoundDevices],
    s: f64,
    g: &ExtractorTable,
) -> Result<f64> {
    state.check_devices(devices)?;
    require_certified(g, state.n_rounds())?;
    table_bound_unchecked(state, devices, s, g.m_out())
}

/// Which extractor, and hence which bound, [`verify_bound`] uses.
#[derive(Debug, Clone, Copy)]
pub enum Extractor<'a> {
    Xor,
    Table(&'a ExtractorTable),
}

/// Outcome of comparing the exact distance with the best bound over an `s` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BoundCheck {
    pub lhs: f64,
    pub best_rhs: f64,
    pub best_s: f64,
    pub slack: f64,
    pub pass: bool,
}

/// Exact trace distance against the minimum of the applicable bound over `s_grid`.
pub fn verify_bound(
    state: &TripartiteState,
    devices: &[RoundDevices],
    extractor: Extractor<'_>,
    s_grid: &[f64],
) -> Result<BoundCheck> {
    if s_grid.is_empty() {
        return Err(Error::OutOfRange("empty s grid".into()));
    }
    state.check_devices(devices)?;
    let n = state.n_rounds();
    let xor;
    let table = match extractor {
        Extractor::Xor => {
            xor = xor_table(n as u32)?;
            &xor
        }
        Extractor::Table(g) => {
            require_certified(g, n)?;
            g
        }
    };
    let lhs = build_rho_ke(state, devices, table)?.trace_distance_to_ideal();
    let mut best_rhs = f64::INFINITY;
    let mut best_s = s_grid[0];
    for &s in s_grid {
        let rhs = match extractor {
            Extractor::Xor => xor_error_bound(state, devices, s)?,
            Extractor::Table(g) => table_bound_unchecked(state, devices, s, g.m_out())?,
        };
        if rhs < best_rhs {
            best_rhs = rhs;
            best_s = s;
        }
    }
    Ok(BoundCheck {
        lhs,
        best_rhs,
        best_s,
        slack: best_rhs - lhs,
        pass: lhs <= best_rhs + BOUND_SLACK,
    })
}

/// 64 points `s = 2 sqrt 2 - delta` with `delta` log-spaced over the clamped interval.
pub fn default_s_grid() -> Vec<f64> {
    log_s_grid(64)
}

/// `count` points accumulating towards `2 sqrt 2`, spanning `[S_MIN, S_MAX]`.
pub fn log_s_grid(count: usize) -> Vec<f64> {
    let top = crate::bell::TSIRELSON;
    let (lo, hi) = ((top - S_MAX).ln(), (top - S_MIN).ln());
    let mut grid: Vec<f64> = (0..count)
        .map(|i| {
            let t = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
            (top - (lo + (hi - lo) * t).exp()).clamp(S_MIN, S_MAX)
        })
        .collect();
    grid.sort_by(f64::total_cmp);
    grid
}

/// Tensor product of per-round `A_i B_i` states and Eve's state, reordered to
/// `A_1..A_n B_1..B_n E`.
pub fn product_over_rounds(
    rounds: &[CMatrix],
    dims_a: &[usize],
    dims_b: &[usize],
    rho_e: &CMatrix,
) -> Result<CMatrix> {
    let n = rounds.len();
    if dims_a.len() != n || dims_b.len() != n {
        return Err(Error::DimensionMismatch("per-round dimension lists".into()));
    }
    let mut natural_dims = Vec::with_capacity(2 * n + 1);
    for i in 0..n {
        if rounds[i].nrows() != dims_a[i] * dims_b[i] {
            return Err(Error::DimensionMismatch(format!("round {i} state size")));
        }
        natural_dims.push(dims_a[i]);
        natural_dims.push(dims_b[i]);
    }
    natural_dims.push(rho_e.nrows());
    let full = kron_all(rounds.iter().chain(std::iter::once(rho_e)));
    let mut order: Vec<usize> = (0..n).map(|i| 2 * i).collect();
    order.extend((0..n).map(|i| 2 * i + 1));
    order.push(2 * n);
    permute_subsystems(&full, &natural_dims, &order)
}

/// `n` copies of a two-qubit state with trivial Eve.
pub fn iid_qubit_state(round_state: &CMatrix, n_rounds: usize) -> Result<TripartiteState> {
    TripartiteState::new(vec![2], vec![2], 1, round_state.clone())?;
    guard(1usize << (2 * n_rounds))?;
    let rounds = vec![round_state.clone(); n_rounds];
    let rho = product_over_rounds(&rounds, &vec![2; n_rounds], &vec![2; n_rounds], &identity(1))?;
    TripartiteState::unchecked(vec![2; n_rounds], vec![2; n_rounds], 1, rho)
}

/// Full-rank Ginibre mixed state on qubit rounds with Eve of dimension `dim_e`.
pub fn random_mixed_state<R: Rng + ?Sized>(n_rounds: usize, dim_e: usize, rng: &mut R) -> Result<TripartiteState> {
    let total = (1usize << (2 * n_rounds)) * dim_e;
    guard(total)?;
    let rho = linalg::random_density(total, total, rng);
    TripartiteState::unchecked(vec![2; n_rounds], vec![2; n_rounds], dim_e, rho)
}

/// Random pure state on `A B E`: Eve holds a purification of a random
/// rank-`dim_e` state of Alice and Bob.
pub fn random_purified_state<R: Rng + ?Sized>(n_rounds: usize, dim_e: usize, rng: &mut R) -> Result<TripartiteState> {
    let total = (1usize << (2 * n_rounds)) * dim_e;
    guard(total)?;
    let rho = linalg::random_density(total, 1, rng);
    TripartiteState::unchecked(vec![2; n_rounds], vec![2; n_rounds], dim_e, rho)
}

/// `2^-n sum_a |a><a|_A ⊗ |a><a|_B ⊗ |a><a|_E`: Eve keeps a classical copy of
/// Alice's computational-basis outcomes.
pub fn eve_copy_state(n_rounds: usize) -> Result<TripartiteState> {
    let d = 1usize << n_rounds;
    guard(d * d * d)?;
    let mut rho = CMatrix::zeros(d * d * d, d * d * d);
    let w = c64(1.0 / d as f64, 0.0);
    for a in 0..d {
        let idx = (a * d + a) * d + a;
        rho[(idx, idx)] = w;
    }
    TripartiteState::unchecked(vec![2; n_rounds], vec![2; n_rounds], d, rho)
}

fn guard(total: usize) -> Result<()> {
    if total > MAX_STATE_DIM {
        return Err(Error::TooLarge {
            dim: total,
            limit: MAX_STATE_DIM,
        });
    }
    Ok(())
}

/// Serialized fixture: `{nRounds, dims, rho, devices?}` with `dims` listing
/// `A_1..A_n B_1..B_n E` and `rho` as row-major `[re, im]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StateFixture {
    pub n_rounds: usize,
    pub dims: Vec<usize>,
    pub rho: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub devices: Option<Vec<DeviceAngles>>,
}

impl StateFixture {
    pub fn from_state(state: &TripartiteState, devices: Option<Vec<DeviceAngles>>) -> Self {
        let rho = state.rho();
        let mut entries = Vec::with_capacity(rho.len());
        for i in 0..rho.nrows() {
            for j in 0..rho.ncols() {
                let z = rho[(i, j)];
                entries.push([z.re, z.im]);
            }
        }
        StateFixture {
            n_rounds: state.n_rounds(),
            dims: state.dims(),
            rho: entries,
            devices,
        }
    }

    /// Validate and build the state.
    pub fn to_state(&self) -> Result<TripartiteState> {
        let n = self.n_rounds;
        if n == 0 || self.dims.len() != 2 * n + 1 {
            return Err(Error::Parse(format!(
                "dims must list 2*nRounds+1 = {} factors, got {}",
                2 * n + 1,
                self.dims.len()
            )));
        }
        let total = self
            .dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .unwrap_or(usize::MAX);
        guard(total)?;
        let entries: Vec<_> = self.rho.iter().map(|&[re, im]| c64(re, im)).collect();
        let rho = linalg::from_row_major(total, total, &entries)?;
        TripartiteState::new(
            self.dims[..n].to_vec(),
            self.dims[n..2 * n].to_vec(),
            self.dims[2 * n],
            rho,
        )
    }

    /// Per-round devices from the stored angles, or optimal devices when absent.
    pub fn round_devices(&self) -> Result<Vec<RoundDevices>> {
        match &self.devices {
            Some(angles) if angles.len() != self.n_rounds => Err(Error::Parse(format!(
                "{} device entries for {} rounds",
                angles.len(),
                self.n_rounds
            ))),
            Some(angles) => Ok(angles.iter().map(|&a| RoundDevices::from_angles(a)).collect()),
            None => Ok(vec![RoundDevices::optimal(); self.n_rounds]),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fixture serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bell::{phi_plus, DeviceAngles, TSIRELSON};
    use crate::linalg::diag;
    use crate::rng::seeded;

    fn z_devices(n: usize) -> Vec<RoundDevices> {
        vec![
            RoundDevices::from_angles(DeviceAngles {
                alice: [0.0, std::f64::consts::FRAC_PI_2],
                bob: [std::f64::consts::FRAC_PI_4, -std::f64::consts::FRAC_PI_4],
            });
            n
        ]
    }

    fn identity_table() -> ExtractorTable {
        xor_table(1).unwrap()
    }

    #[test]
    fn deterministic_outcome_blocks() {
        let rho = diag(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let st = TripartiteState::qubits(1, 2, rho).unwrap();
        let out = build_rho_ke(&st, &z_devices(1), &identity_table()).unwrap();
        assert_eq!(out.blocks[0], diag(&[1.0, 0.0]));
        assert_eq!(out.blocks[1], diag(&[0.0, 0.0]));
        assert!((out.trace_distance_to_ideal() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unbiased_coin_blocks() {
        let st = TripartiteState::qubits(1, 1, identity(4).scale(0.25)).unwrap();
        let out = build_rho_ke(&st, &z_devices(1), &identity_table()).unwrap();
        assert!((out.blocks[0][(0, 0)].re - 0.5).abs() < 1e-12);
        assert!((out.blocks[1][(0, 0)].re - 0.5).abs() < 1e-12);
        assert!(out.trace_distance_to_ideal() < 1e-12);
    }

    #[test]
    fn eve_copy_is_fully_predictable() {
        let st = eve_copy_state(2).unwrap();
        let out = build_rho_ke(&st, &z_devices(2), &xor_table(2).unwrap()).unwrap();
        for b in &out.blocks {
            assert!(hermiticity_error(b) < 1e-15);
            for i in 0..b.nrows() {
                for j in 0..b.ncols() {
                    if i != j {
                        assert_eq!(b[(i, j)].norm(), 0.0);
                    }
                }
            }
        }
        assert!((out.trace_distance_to_ideal() - 1.0).abs() < 1e-12);
        let check = verify_bound(&st, &z_devices(2), Extractor::Xor, &default_s_grid()).unwrap();
        assert!(check.pass && check.best_rhs >= 1.0 - 1e-9, "{check:?}");
    }

    #[test]
    fn xor_bound_for_singlets() {
        let p = ShiftedChshParams::new(2.5).unwrap();
        let per_round = p.expectation(TSIRELSON);
        let one = iid_qubit_state(&phi_plus(), 1).unwrap();
        let two = iid_qubit_state(&phi_plus(), 2).unwrap();
        let d = RoundDevices::optimal();
        let r1 = xor_error_bound(&one, std::slice::from_ref(&d), 2.5).unwrap();
        let r2 = xor_error_bound(&two, &[d.clone(), d.clone()], 2.5).unwrap();
        assert!((r1 - per_round).abs() < 1e-10);
        assert!((r2 - per_round * per_round).abs() < 1e-10);
        let mixed = TripartiteState::qubits(1, 1, identity(4).scale(0.25)).unwrap();
        let r0 = xor_error_bound(&mixed, &[d], 2.0).unwrap();
        assert!((r0 - 2.0).abs() < 1e-5);
    }

    #[test]
    fn table_bound_for_singlets() {
        let n = 6;
        let st = iid_qubit_state(&phi_plus(), n).unwrap();
        let devices = vec![RoundDevices::optimal(); n];
        let g = xor_table(6).unwrap();
        let got = table_error_bound(&st, &devices, 2.8, &g).unwrap();
        let p = ShiftedChshParams::new(2.8).unwrap();
        let want = 36.0 * 2f64.powf(-2.5) * (1.0 + p.expectation(TSIRELSON)).powi(6);
        assert!((got - want).abs() < 1e-9 * want, "{got} {want}");
        let square = ExtractorTable::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let st2 = iid_qubit_state(&phi_plus(), 2).unwrap();
        assert!(table_error_bound(&st2, &devices[..2], 2.8, &square).is_err());
    }

    #[test]
    fn no_violation_table_bound_is_vacuous() {
        let st = iid_qubit_state(&identity(4).scale(0.25), 3).unwrap();
        let devices = vec![RoundDevices::optimal(); 3];
        let g = ExtractorTable::new(3, 1, vec![0, 1, 1, 0, 1, 0, 0, 1]).unwrap();
        for s in default_s_grid() {
            assert!(table_error_bound(&st, &devices, s, &g).unwrap() >= 1.0);
        }
    }

    #[test]
    fn random_states_respect_xor_bound() {
        let mut rng = seeded(21);
        for trial in 0..20 {
            let st = if trial % 2 == 0 {
                random_mixed_state(2, 2, &mut rng).unwrap()
            } else {
                random_purified_state(2, 2, &mut rng).unwrap()
            };
            let devices: Vec<_> = (0..2).map(|_| RoundDevices::random_xz(&mut rng)).collect();
            let out = build_rho_ke(&st, &devices, &xor_table(2).unwrap()).unwrap();
            assert!((out.total_trace() - 1.0).abs() < 1e-10);
            let check = verify_bound(&st, &devices, Extractor::Xor, &default_s_grid()).unwrap();
            assert!(check.pass, "{check:?}");
        }
    }

    #[test]
    fn xor_bound_shrinks_with_rounds() {
        let d = RoundDevices::optimal();
        let mut prev = f64::INFINITY;
        for n in 1..=4 {
            let st = iid_qubit_state(&phi_plus(), n).unwrap();
            let r = xor_error_bound(&st, &vec![d.clone(); n], 2.7).unwrap();
            assert!(r < prev);
            prev = r;
        }
    }

    #[test]
    fn per_round_factor_vanishes_near_tsirelson() {
        let grid = log_s_grid(64);
        assert!(grid.iter().all(|&s| (S_MIN..=S_MAX).contains(&s)));
        let near: Vec<f64> = grid.iter().copied().filter(|&s| s <= TSIRELSON - 1e-4).collect();
        let best = near
            .iter()
            .map(|&s| ShiftedChshParams::new(s).unwrap().expectation(TSIRELSON))
            .fold(f64::INFINITY, f64::min);
        assert!(best <= 0.05, "{best}");
    }

    #[test]
    fn validation_rejects_bad_states() {
        assert!(TripartiteState::qubits(1, 1, identity(4)).is_err());
        assert!(TripartiteState::qubits(1, 1, diag(&[1.5, -0.5, 0.0, 0.0])).is_err());
        assert!(TripartiteState::qubits(1, 2, identity(4).scale(0.25)).is_err());
        assert!(matches!(
            random_mixed_state(6, 2, &mut seeded(1)),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn non_projective_key_measurement_is_rejected() {
        let soft = crate::bell::BinaryMeasurement::new(diag(&[0.7, 0.3]), diag(&[0.3, 0.7])).unwrap();
        let z = crate::bell::BinaryMeasurement::qubit_xz(0.0);
        let d = RoundDevices::new([soft, z.clone()], [z.clone(), z]).unwrap();
        let st = TripartiteState::qubits(1, 1, identity(4).scale(0.25)).unwrap();
        assert!(matches!(
            build_rho_ke(&st, &[d], &identity_table()),
            Err(Error::InvalidMeasurement(_))
        ));
    }

    #[test]
    fn fixture_round_trip() {
        let mut rng = seeded(30);
        let st = random_mixed_state(1, 2, &mut rng).unwrap();
        let fx = StateFixture::from_state(&st, Some(vec![DeviceAngles::OPTIMAL]));
        let back = StateFixture::from_json(&fx.to_json()).unwrap();
        assert_eq!(back, fx);
        assert_eq!(back.to_state().unwrap(), st);
        assert_eq!(back.round_devices().unwrap().len(), 1);
        assert!(StateFixture::from_json("{\"nRounds\": 1}").is_err());
        let mut bad = fx.clone();
        bad.rho.pop();
        assert!(bad.to_state().is_err());
    }
}
