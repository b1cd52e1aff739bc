//! Reference computations written independently of the optimized code paths
//! in `seedless-di`, used to cross-check them in the acceptance suite.
//!
//! Everything here favours directness over speed: explicit index arithmetic
//! instead of subsystem-local updates, double loops instead of fast
//! transforms, and brute-force grids instead of refined searches.

use seedless_di::bell::RoundDevices;
use seedless_di::linalg::{eigenvalues_hermitian, CMatrix, Complex64};
use seedless_di::rates::Mode;

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Digits of `index` in the mixed radix `dims`, first subsystem most significant.
fn digits(mut index: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for (d, &dim) in out.iter_mut().zip(dims).rev() {
        *d = index % dim;
        index /= dim;
    }
    out
}

/// Tensor product of `factors` from entrywise products.
pub fn naive_kron_all(factors: &[CMatrix]) -> CMatrix {
    let dims: Vec<usize> = factors.iter().map(|f| f.nrows()).collect();
    let total: usize = dims.iter().product();
    CMatrix::from_fn(total, total, |r, c| {
        let (dr, dc) = (digits(r, &dims), digits(c, &dims));
        factors
            .iter()
            .enumerate()
            .fold(Complex64::new(1.0, 0.0), |acc, (i, f)| acc * f[(dr[i], dc[i])])
    })
}

/// `prod_i op_i` with `op_i` acting on `(A_i, B_i)`, expressed on
/// `A_1..A_n B_1..B_n E` with identity on `E`.
pub fn round_product_operator(ops: &[CMatrix], dims_a: &[usize], dims_b: &[usize], dim_e: usize) -> CMatrix {
    let n = ops.len();
    let mut dims = dims_a.to_vec();
    dims.extend_from_slice(dims_b);
    dims.push(dim_e);
    let total: usize = dims.iter().product();
    CMatrix::from_fn(total, total, |r, c| {
        let (dr, dc) = (digits(r, &dims), digits(c, &dims));
        if dr[2 * n] != dc[2 * n] {
            return Complex64::new(0.0, 0.0);
        }
        let mut v = Complex64::new(1.0, 0.0);
        for (i, op) in ops.iter().enumerate() {
            let row = dr[i] * dims_b[i] + dr[n + i];
            let col = dc[i] * dims_b[i] + dc[n + i];
            v *= op[(row, col)];
            if v == Complex64::new(0.0, 0.0) {
                break;
            }
        }
        v
    })
}

/// Partial trace over everything but the last factor of dimension `last`.
pub fn naive_keep_last(m: &CMatrix, last: usize) -> CMatrix {
    let front = m.nrows() / last;
    CMatrix::from_fn(last, last, |i, j| (0..front).map(|f| m[(f * last + i, f * last + j)]).sum())
}

/// Partial trace over the last factor of dimension `last`.
pub fn naive_trace_out_last(m: &CMatrix, last: usize) -> CMatrix {
    let front = m.nrows() / last;
    CMatrix::from_fn(front, front, |i, j| (0..last).map(|e| m[(i * last + e, j * last + e)]).sum())
}

/// Trace norm of a Hermitian matrix from its spectrum.
pub fn hermitian_trace_norm(m: &CMatrix) -> f64 {
    let sym = (m + m.adjoint()).scale(0.5);
    eigenvalues_hermitian(&sym).iter().map(|l| l.abs()).sum()
}

/// `(mu_s, nu_s)` of the shifted CHSH operator.
pub fn reference_coefficients(s: f64) -> (f64, f64) {
    let root = (2.0 - s * s / 4.0).sqrt();
    (2.0 / root, s / (4.0 * root))
}

fn observable(d: &RoundDevices, alice: bool, setting: usize) -> CMatrix {
    let m = if alice { d.alice(setting) } else { d.bob(setting) };
    m.element(0) - m.element(1)
}

/// `mu I - nu (A_0 B_0 + A_0 B_1 + A_1 B_0 - A_1 B_1)` from the observables.
pub fn reference_shifted_operator(s: f64, d: &RoundDevices) -> CMatrix {
    let (mu, nu) = reference_coefficients(s);
    let a = [observable(d, true, 0), observable(d, true, 1)];
    let b = [observable(d, false, 0), observable(d, false, 1)];
    let mut chsh = CMatrix::zeros(d.dim_a() * d.dim_b(), d.dim_a() * d.dim_b());
    for x in 0..2 {
        for y in 0..2 {
            let sign = if x * y == 1 { -1.0 } else { 1.0 };
            chsh += naive_kron_all(&[a[x].clone(), b[y].clone()]).scale(sign);
        }
    }
    CMatrix::identity(chsh.nrows(), chsh.nrows()).scale(mu) - chsh.scale(nu)
}

/// `Q_z = (1/4) sum [a + b + xy = z] A(a|x) ⊗ B(b|y)`.
pub fn reference_estimation_povm(d: &RoundDevices) -> [CMatrix; 2] {
    let dim = d.dim_a() * d.dim_b();
    let mut q = [CMatrix::zeros(dim, dim), CMatrix::zeros(dim, dim)];
    for x in 0..2 {
        for y in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    let el = naive_kron_all(&[d.alice(x).element(a).clone(), d.bob(y).element(b).clone()]);
                    q[(a + b + x * y) % 2] += el.scale(0.25);
                }
            }
        }
    }
    q
}

/// A qubit-round state given as its full matrix on `A_1..A_n B_1..B_n E`.
pub struct RefState<'a> {
    pub rho: &'a CMatrix,
    pub dims_a: &'a [usize],
    pub dims_b: &'a [usize],
    pub dim_e: usize,
}

impl RefState<'_> {
    fn expectation(&self, ops: &[CMatrix]) -> f64 {
        let op = round_product_operator(ops, self.dims_a, self.dims_b, self.dim_e);
        (0..op.nrows())
            .map(|i| (0..op.ncols()).map(|j| op[(i, j)] * self.rho[(j, i)]).sum::<Complex64>())
            .sum::<Complex64>()
            .re
    }

    /// Eve's unnormalized state after the pair operators `ops`.
    fn eve_block(&self, ops: &[CMatrix]) -> CMatrix {
        let op = round_product_operator(ops, self.dims_a, self.dims_b, self.dim_e);
        naive_keep_last(&(op * self.rho), self.dim_e)
    }
}

/// `tr[rho prod_i S_i]`.
pub fn reference_xor_bound(state: &RefState<'_>, devices: &[RoundDevices], s: f64) -> f64 {
    let ops: Vec<CMatrix> = devices.iter().map(|d| reference_shifted_operator(s, d)).collect();
    state.expectation(&ops)
}

/// `n^2 sqrt(2)^(m-n) tr[rho prod_i (I + S_i)]`.
pub fn reference_table_bound(state: &RefState<'_>, devices: &[RoundDevices], s: f64, m_out: u32) -> f64 {
    let ops: Vec<CMatrix> = devices
        .iter()
        .map(|d| {
            let op = reference_shifted_operator(s, d);
            let id = CMatrix::identity(op.nrows(), op.nrows());
            op + id
        })
        .collect();
    let n = devices.len() as f64;
    n * n * SQRT2.powf(f64::from(m_out) - n) * state.expectation(&ops)
}

fn key_projector(d: &RoundDevices, bit: usize) -> CMatrix {
    naive_kron_all(&[d.alice(0).element(bit).clone(), CMatrix::identity(d.dim_b(), d.dim_b())])
}

fn distance_to_ideal(blocks: &[CMatrix]) -> f64 {
    let dim = blocks[0].nrows();
    let rho_e = blocks.iter().fold(CMatrix::zeros(dim, dim), |acc, b| acc + b);
    let ideal = rho_e.scale(1.0 / blocks.len() as f64);
    blocks.iter().map(|b| hermitian_trace_norm(&(b - &ideal))).sum()
}

/// `|| rho_KE - u_K ⊗ rho_E ||_1` with `K = g(a_1..a_n)`, `a_1` least significant.
pub fn reference_key_distance(state: &RefState<'_>, devices: &[RoundDevices], table: &[u32], m_out: u32) -> f64 {
    let n = devices.len();
    let mut blocks = vec![CMatrix::zeros(state.dim_e, state.dim_e); 1 << m_out];
    for a in 0..1usize << n {
        let ops: Vec<CMatrix> = (0..n).map(|i| key_projector(&devices[i], a >> i & 1)).collect();
        blocks[table[a] as usize] += state.eve_block(&ops);
    }
    distance_to_ideal(&blocks)
}

/// Averaged distance `sum_{t,z} P(t) || rho_{KE,t,z} - u_K rho_{E,t,z} ||_1`.
///
/// `t` bit `i` set marks round `i` as an estimation round; `z` packs the
/// estimation outcomes in round order. `extractor(n0, n1, n_r)` returns the
/// table and output length for that transcript, or `None` for an empty output.
pub fn reference_averaged_distance(
    state: &RefState<'_>,
    devices: &[RoundDevices],
    p_e: f64,
    extractor: &dyn Fn(usize, usize, usize) -> Option<(Vec<u32>, u32)>,
) -> f64 {
    let n = devices.len();
    let povms: Vec<[CMatrix; 2]> = devices.iter().map(reference_estimation_povm).collect();
    let mut total = 0.0;
    for t in 0..1usize << n {
        let est: Vec<usize> = (0..n).filter(|i| t >> i & 1 == 1).collect();
        let raw: Vec<usize> = (0..n).filter(|i| t >> i & 1 == 0).collect();
        let p_t = p_e.powi(est.len() as i32) * (1.0 - p_e).powi(raw.len() as i32);
        for z in 0..1usize << est.len() {
            let n1 = z.count_ones() as usize;
            let Some((table, m_out)) = extractor(est.len() - n1, n1, raw.len()) else {
                continue;
            };
            let mut blocks = vec![CMatrix::zeros(state.dim_e, state.dim_e); 1 << m_out];
            for a in 0..1usize << raw.len() {
                let mut ops = vec![CMatrix::zeros(0, 0); n];
                for (j, &round) in est.iter().enumerate() {
                    ops[round] = povms[round][z >> j & 1].clone();
                }
                for (j, &round) in raw.iter().enumerate() {
                    ops[round] = key_projector(&devices[round], a >> j & 1);
                }
                blocks[table[a] as usize] += state.eve_block(&ops);
            }
            total += p_t * distance_to_ideal(&blocks);
        }
    }
    total
}

/// `2^-m sum_a (-1)^(r.a) (2^m [g(a) = k] - 1)` by direct summation.
pub fn naive_walsh(table: &[u32], m_out: u32, k: u32, r: usize) -> f64 {
    let scale = f64::from(1u32 << m_out);
    let sum: f64 = table
        .iter()
        .enumerate()
        .map(|(a, &g)| {
            let sign = if (r & a).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            let delta = if g == k { scale - 1.0 } else { -1.0 };
            sign * delta
        })
        .sum();
    sum / scale
}

/// Largest `|naive_walsh|` over all `(k, r)`.
pub fn naive_max_deviation(table: &[u32], m_out: u32) -> f64 {
    let mut best: f64 = 0.0;
    for k in 0..1u32 << m_out {
        for r in 0..table.len() {
            best = best.max(naive_walsh(table, m_out, k, r).abs());
        }
    }
    best
}

/// Brute-force maximum of `w0 alpha_0 + w1 alpha_1 + wb beta` over a dense
/// `(s, beta)` grid, with the `alpha_z` saturating their constraints.
///
/// At each of `s_points` evenly spaced `s`, `beta` is scanned at
/// `beta_points` log-spaced distances below its feasibility cap, then over
/// `beta_points` evenly spaced points between the neighbours of the best one.
pub fn reference_maximum(mode: Mode, p_e: f64, w: [f64; 3], s_points: usize, beta_points: usize) -> Option<f64> {
    let p_r = 1.0 - p_e;
    let shift = match mode {
        Mode::Xor => 0.0,
        Mode::Mbit => 1.0,
    };
    let lo = 2.0 + 1e-6;
    let hi = 2.0 * SQRT2 - 1e-6;
    let gap_at = |j: usize| 1e-9 * 1e11f64.powf(j as f64 / beta_points as f64);
    let mut best: Option<f64> = None;
    for i in 0..s_points {
        let s = lo + (hi - lo) * i as f64 / (s_points - 1) as f64;
        let (mu, nu) = reference_coefficients(s);
        let k = [shift + mu - 4.0 * nu, shift + mu + 4.0 * nu];
        // c = p_r sqrt(2)^(beta - 1) must keep every 1 - c K_z positive.
        let beta_cap = 1.0 + 2.0 * (1.0 / (p_r * k[0].max(k[1]))).log2();
        let value_at = |gap: f64| {
            let beta = beta_cap - gap;
            let c = p_r * SQRT2.powf(beta - 1.0);
            let slack = [1.0 - c * k[0], 1.0 - c * k[1]];
            if slack[0] <= 0.0 || slack[1] <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let alpha = [2.0 * (slack[0] / p_e).log2(), 2.0 * (slack[1] / p_e).log2()];
            w[0] * alpha[0] + w[1] * alpha[1] + w[2] * beta
        };
        let (mut best_j, mut best_here) = (1, f64::NEG_INFINITY);
        for j in 1..=beta_points {
            let v = value_at(gap_at(j));
            if v > best_here {
                (best_j, best_here) = (j, v);
            }
        }
        if best_here == f64::NEG_INFINITY {
            continue;
        }
        let (g_lo, g_hi) = (gap_at(best_j - 1), gap_at((best_j + 1).min(beta_points)));
        for j in 0..beta_points {
            let v = value_at(g_lo + (g_hi - g_lo) * j as f64 / (beta_points - 1) as f64);
            best_here = best_here.max(v);
        }
        if best.is_none_or(|b| best_here > b) {
            best = Some(best_here);
        }
    }
    best
}
