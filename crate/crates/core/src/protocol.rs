//! The spot-checking protocols: round sampling, output lengths, extraction
//! and an exact small-`n` check of the averaged security condition.
//!
//! Each round is an estimation round with probability `p_e` and a raw-bit
//! round otherwise. Estimation rounds record `z = a + b + xy mod 2` for
//! uniform settings; raw-bit rounds keep Alice's setting-0 outcome. The
//! output length depends on the transcript only through `(n_0, n_1, n_r)`.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::bell::{phi_plus, shifted_chsh_operator, DeviceAngles, RoundDevices, ShiftedChshParams, TSIRELSON};
use crate::error::{Error, Result};
use crate::extractor::{certify, random_certified_table, xor_table, ExtractorTable, MAX_INPUT_BITS};
use crate::linalg::{apply_local, identity, keep_last, kron, reduce_to, trace_norm, CMatrix, Layout};
use crate::rates::{maximize, Mode, RateSolution, Weights};
use crate::rng::{rng_for, Stream};
use crate::sim::TripartiteState;

pub use crate::rates::Mode as ExtractionMode;

/// Attempts allowed when constructing a table for the protocol.
pub const TABLE_SEARCH_ATTEMPTS: u64 = 64;
/// Environment variable overriding the table cache directory.
pub const CACHE_ENV: &str = "SEEDLESS_DI_CACHE";
/// Largest number of rounds accepted by the exact security check.
pub const MAX_EXACT_ROUNDS: usize = 3;

/// Per-round i.i.d. two-qubit device with fixed measurement angles.
#[derive(Debug, Clone, PartialEq)]
pub struct HonestDevice {
    pub state: CMatrix,
    pub angles: DeviceAngles,
}

impl HonestDevice {
    /// Werner-type state at optimal angles with the given CHSH value.
    pub fn with_chsh(chsh: f64) -> Result<Self> {
        if !(0.0..=TSIRELSON).contains(&chsh) {
            return Err(Error::OutOfRange(format!("CHSH target {chsh} outside [0, 2 sqrt 2]")));
        }
        Ok(HonestDevice {
            state: crate::bell::werner(chsh / TSIRELSON),
            angles: DeviceAngles::OPTIMAL,
        })
    }

    /// Maximal violation.
    pub fn singlet() -> Self {
        HonestDevice {
            state: phi_plus(),
            angles: DeviceAngles::OPTIMAL,
        }
    }

    pub fn devices(&self) -> RoundDevices {
        RoundDevices::from_angles(self.angles)
    }

    fn born_table(&self) -> BornTable {
        let d = self.devices();
        let mut joint = [[[0.0; 4]; 2]; 2];
        for (x, row) in joint.iter_mut().enumerate() {
            for (y, cell) in row.iter_mut().enumerate() {
                for a in 0..2 {
                    for b in 0..2 {
                        let p = crate::linalg::trace_of_product(&self.state, &d.joint_element(a, b, x, y)).re;
                        cell[2 * a + b] = p.max(0.0);
                    }
                }
            }
        }
        let key0 = kron(d.alice(0).element(0), &identity(2));
        let p_key0 = crate::linalg::trace_of_product(&self.state, &key0).re.clamp(0.0, 1.0);
        BornTable { joint, p_key0 }
    }
}

struct BornTable {
    /// `joint[x][y][2a + b]`.
    joint: [[[f64; 4]; 2]; 2],
    p_key0: f64,
}

/// Source of measurement statistics.
#[derive(Debug, Clone)]
pub enum DeviceModel {
    Honest(HonestDevice),
    /// An explicit state on `A_1..A_n B_1..B_n E` with per-round devices.
    Fixture {
        state: TripartiteState,
        devices: Vec<RoundDevices>,
    },
}

/// Protocol parameters.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub n: usize,
    pub p_e: f64,
    pub epsilon: f64,
    pub mode: Mode,
    pub seed: u64,
    pub device: DeviceModel,
    /// Where m-bit tables are cached; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::OutOfRange("n must be at least 1".into()));
        }
        if !(self.p_e > 0.0 && self.p_e < 1.0) {
            return Err(Error::OutOfRange(format!("p_e = {} outside (0, 1)", self.p_e)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::OutOfRange(format!("epsilon = {} outside (0, 1]", self.epsilon)));
        }
        if let DeviceModel::Fixture { state, devices } = &self.device {
            if state.n_rounds() != self.n {
                return Err(Error::DimensionMismatch(format!(
                    "fixture has {} rounds, n = {}",
                    state.n_rounds(),
                    self.n
                )));
            }
            state.check_devices(devices)?;
        }
        Ok(())
    }
}

/// Round type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Estimation,
    Rawbit,
}

/// Full record of one protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub tags: Vec<Tag>,
    /// Settings `(x, y)` of estimation rounds, in order.
    pub settings: Vec<(u8, u8)>,
    /// Estimation bits, one per estimation round.
    pub z: Vec<u8>,
    /// Extractor input bits, one per raw-bit round.
    pub a: Vec<u8>,
    pub n_e: usize,
    pub n_r: usize,
    /// Relative frequency of `z = 0`; `None` without estimation rounds.
    pub q0: Option<f64>,
    pub m_out: u32,
    /// Output value, `k_1` least significant; `None` when nothing was extracted.
    pub k: Option<u32>,
}

impl Transcript {
    pub fn n0(&self) -> usize {
        self.z.iter().filter(|&&z| z == 0).count()
    }
}

/// One-line JSON summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TranscriptSummary {
    pub seed: u64,
    pub n: usize,
    #[serde(rename = "pE")]
    pub p_e: f64,
    pub epsilon: f64,
    pub mode: Mode,
    #[serde(rename = "nE")]
    pub n_e: usize,
    #[serde(rename = "nR")]
    pub n_r: usize,
    pub q0: Option<f64>,
    pub m_out: u32,
    pub k_hex: Option<String>,
}

impl TranscriptSummary {
    pub fn new(cfg: &ProtocolConfig, t: &Transcript) -> Self {
        TranscriptSummary {
            seed: cfg.seed,
            n: cfg.n,
            p_e: cfg.p_e,
            epsilon: cfg.epsilon,
            mode: cfg.mode,
            n_e: t.n_e,
            n_r: t.n_r,
            q0: t.q0,
            m_out: t.m_out,
            k_hex: t.k.map(|k| format!("{k:x}")),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }
}

/// Result of an output-length computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct OutputLength {
    pub m: u32,
    /// Maximized objective before finite-size terms; NaN when not computed.
    pub objective: f64,
    /// The quantity compared with 0 (XOR) or floored (m-bit).
    pub value: f64,
    pub solution: Option<RateSolution>,
}

impl OutputLength {
    fn zero() -> Self {
        OutputLength {
            m: 0,
            objective: f64::NAN,
            value: f64::NEG_INFINITY,
            solution: None,
        }
    }
}

/// `epsilon = mantissa * 2^exponent` with `mantissa` in `[1, 2)`; keeps the
/// `2 log2(1/epsilon)` term exact under power-of-two rescaling.
fn split_epsilon(epsilon: f64) -> (f64, i64) {
    let exponent = epsilon.log2().floor() as i64;
    let mut mantissa = epsilon / 2f64.powi(exponent as i32);
    let mut exponent = exponent;
    if mantissa >= 2.0 {
        mantissa /= 2.0;
        exponent += 1;
    } else if mantissa < 1.0 {
        mantissa *= 2.0;
        exponent -= 1;
    }
    (mantissa, exponent)
}

fn maximize_counts(mode: Mode, n0: usize, n1: usize, n_r: usize, p_e: f64) -> RateSolution {
    maximize(
        mode,
        p_e,
        Weights {
            w0: n0 as f64,
            w1: n1 as f64,
            wb: n_r as f64,
        },
    )
}

/// XOR output length: 1 iff
/// `max [n_0 alpha_0 + n_1 alpha_1 + (beta - 1) n_r] - 2 log2(1/epsilon) >= 0`.
pub fn output_length_xor(n0: usize, n1: usize, n_r: usize, p_e: f64, epsilon: f64) -> OutputLength {
    if n0 + n1 == 0 || n_r == 0 {
        return OutputLength::zero();
    }
    let sol = maximize_counts(Mode::Xor, n0, n1, n_r, p_e);
    if !sol.feasible {
        return OutputLength::zero();
    }
    let objective = sol.objective - n_r as f64;
    let value = objective - 2.0 * (1.0 / epsilon).log2();
    OutputLength {
        m: u32::from(value >= 0.0),
        objective,
        value,
        solution: Some(sol),
    }
}

/// m-bit output length:
/// `floor(max [n_0 alpha_0 + n_1 alpha_1 + beta n_r] - 2 log2(1/epsilon) - 4 log2 n_r)`,
/// clamped to `[0, n_r - 1]`.
pub fn output_length_mbit(n0: usize, n1: usize, n_r: usize, p_e: f64, epsilon: f64) -> OutputLength {
    if n0 + n1 == 0 || n_r == 0 {
        return OutputLength::zero();
    }
    let sol = maximize_counts(Mode::Mbit, n0, n1, n_r, p_e);
    if !sol.feasible {
        return OutputLength::zero();
    }
    let (mantissa, exponent) = split_epsilon(epsilon);
    // 2 log2(1/epsilon) = -2 exponent - 2 log2(mantissa)
    let base = sol.objective + 2.0 * mantissa.log2() - 4.0 * (n_r as f64).log2();
    let value = base + 2.0 * exponent as f64;
    let floored = base.floor() + 2.0 * exponent as f64;
    let m = if floored <= 0.0 {
        0
    } else {
        floored.min((n_r - 1) as f64) as u32
    };
    OutputLength {
        m,
        objective: sol.objective,
        value,
        solution: Some(sol),
    }
}

pub fn output_length(mode: Mode, n0: usize, n1: usize, n_r: usize, p_e: f64, epsilon: f64) -> OutputLength {
    match mode {
        Mode::Xor => output_length_xor(n0, n1, n_r, p_e, epsilon),
        Mode::Mbit => output_length_mbit(n0, n1, n_r, p_e, epsilon),
    }
}

/// Output length from raw per-round data, for permutation checks.
pub fn output_length_from_bits(mode: Mode, z: &[u8], n_r: usize, p_e: f64, epsilon: f64) -> OutputLength {
    let n0 = z.iter().filter(|&&b| b == 0).count();
    output_length(mode, n0, z.len() - n0, n_r, p_e, epsilon)
}

/// Cache directory from [`CACHE_ENV`], if set.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

fn cached_table_path(dir: &Path, n_r: u32, m: u32, seed: u64) -> PathBuf {
    dir.join(format!("table_n{n_r}_m{m}_seed{seed}.txt"))
}

/// Certified table at `(n_r, m)` drawn from the extractor-search stream of
/// `seed`, reusing a cached copy when one is present and still certifies.
pub fn protocol_table(n_r: u32, m: u32, seed: u64, cache_dir: Option<&Path>) -> Result<ExtractorTable> {
    if let Some(dir) = cache_dir {
        let path = cached_table_path(dir, n_r, m, seed);
        if let Ok(table) = ExtractorTable::load(&path) {
            if table.n_in() == n_r && table.m_out() == m && certify(&table)?.pass {
                return Ok(table);
            }
        }
    }
    let mut rng = rng_for(seed, Stream::ExtractorSearch);
    let (table, _, _) = random_certified_table(n_r, m, TABLE_SEARCH_ATTEMPTS, &mut rng)?;
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
        let path = cached_table_path(dir, n_r, m, seed);
        let tmp = path.with_extension("tmp");
        table.save(&tmp)?;
        std::fs::rename(tmp, path)?;
    }
    Ok(table)
}

fn pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Run the protocol end to end.
pub fn run_protocol(cfg: &ProtocolConfig) -> Result<Transcript> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, Stream::RoundSampling);
    let mut tags = Vec::with_capacity(cfg.n);
    let mut settings = Vec::new();
    let mut z = Vec::new();
    let mut a_bits = Vec::new();

    match &cfg.device {
        DeviceModel::Honest(dev) => {
            let born = dev.born_table();
            for _ in 0..cfg.n {
                if rng.random::<f64>() < cfg.p_e {
                    let x = rng.random_range(0..2u8);
                    let y = rng.random_range(0..2u8);
                    let ab = pick(&mut rng, &born.joint[x as usize][y as usize]) as u8;
                    let (a, b) = (ab >> 1, ab & 1);
                    tags.push(Tag::Estimation);
                    settings.push((x, y));
                    z.push((a + b + x * y) % 2);
                } else {
                    tags.push(Tag::Rawbit);
                    a_bits.push(u8::from(rng.random::<f64>() >= born.p_key0));
                }
            }
        }
        DeviceModel::Fixture { state, devices } => {
            let layout = state.layout();
            let n = state.n_rounds();
            let mut current = state.rho().clone();
            let mut norm = current.trace().re;
            for (i, d) in devices.iter().enumerate() {
                let estimation = rng.random::<f64>() < cfg.p_e;
                let (x, y) = if estimation {
                    (rng.random_range(0..2u8), rng.random_range(0..2u8))
                } else {
                    (0, 0)
                };
                let branches: Vec<CMatrix> = if estimation {
                    let mut v = Vec::with_capacity(4);
                    for a in 0..2 {
                        for b in 0..2 {
                            let e = d.joint_element(a, b, x as usize, y as usize);
                            v.push(apply_local(&current, &layout, &[i, n + i], &e)?);
                        }
                    }
                    v
                } else {
                    (0..2)
                        .map(|a| apply_local(&current, &layout, &[i], d.alice(0).element(a)))
                        .collect::<Result<_>>()?
                };
                let weights: Vec<f64> = branches.iter().map(|m| (m.trace().re / norm).max(0.0)).collect();
                let outcome = pick(&mut rng, &weights);
                current = branches.into_iter().nth(outcome).expect("outcome in range");
                norm = current.trace().re;
                if estimation {
                    let (a, b) = ((outcome >> 1) as u8, (outcome & 1) as u8);
                    tags.push(Tag::Estimation);
                    settings.push((x, y));
                    z.push((a + b + x * y) % 2);
                } else {
                    tags.push(Tag::Rawbit);
                    a_bits.push(outcome as u8);
                }
            }
        }
    }

    let n_e = z.len();
    let n_r = a_bits.len();
    let n0 = z.iter().filter(|&&b| b == 0).count();
    let q0 = (n_e > 0).then(|| n0 as f64 / n_e as f64);
    let len = output_length(cfg.mode, n0, n_e - n0, n_r, cfg.p_e, cfg.epsilon);
    let k = if len.m == 0 {
        None
    } else {
        match cfg.mode {
            Mode::Xor => Some(a_bits.iter().fold(0u32, |acc, &b| acc ^ u32::from(b))),
            Mode::Mbit if n_r as u32 <= MAX_INPUT_BITS => {
                let table = protocol_table(n_r as u32, len.m, cfg.seed, cfg.cache_dir.as_deref())?;
                Some(table.apply_bits(&a_bits)?)
            }
            Mode::Mbit => None,
        }
    };
    Ok(Transcript {
        tags,
        settings,
        z,
        a: a_bits,
        n_e,
        n_r,
        q0,
        m_out: len.m,
        k,
    })
}

/// `Q_z = sum_{a,b,x,y} (1/4) A(a|x) B(b|y) [a + b + xy = z mod 2]`.
pub fn estimation_povm(devices: &RoundDevices) -> [CMatrix; 2] {
    let dim = devices.dim_a() * devices.dim_b();
    let mut q = [CMatrix::zeros(dim, dim), CMatrix::zeros(dim, dim)];
    for x in 0..2 {
        for y in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    q[(a + b + x * y) % 2] += devices.joint_element(a, b, x, y).scale(0.25);
                }
            }
        }
    }
    q
}

/// Largest entrywise deviations in `S = mu I - 4 nu (Q_0 - Q_1)` and `Q_0 + Q_1 = I`.
pub fn estimation_identity_errors(params: &ShiftedChshParams, devices: &RoundDevices) -> (f64, f64) {
    let [q0, q1] = estimation_povm(devices);
    let s = shifted_chsh_operator(params, devices);
    let via_q = identity(s.nrows()).scale(params.mu) - (&q0 - &q1).scale(4.0 * params.nu);
    let err_s = (s - via_q).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let err_q = (q0 + q1 - identity(devices.dim_a() * devices.dim_b()))
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    (err_s, err_q)
}

/// `p_r sqrt(2)^(beta-1) [(I +) S] + p_e [sqrt(2)^alpha_0 Q_0 + sqrt(2)^alpha_1 Q_1]`,
/// equal to the identity at every feasible solution.
pub fn protocol_factor(mode: Mode, p_e: f64, sol: &RateSolution, devices: &RoundDevices) -> Result<CMatrix> {
    let params = ShiftedChshParams::new(sol.s)?;
    let mut s_op = shifted_chsh_operator(&params, devices);
    if mode == Mode::Mbit {
        s_op += identity(s_op.nrows());
    }
    let [q0, q1] = estimation_povm(devices);
    let c = (1.0 - p_e) * 2f64.powf((sol.beta - 1.0) / 2.0);
    Ok(s_op.scale(c)
        + q0.scale(p_e * 2f64.powf(sol.alpha0 / 2.0))
        + q1.scale(p_e * 2f64.powf(sol.alpha1 / 2.0)))
}

/// Outcome of the exact security check.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SecurityReport {
    pub n: usize,
    pub mode: Mode,
    #[serde(rename = "pE")]
    pub p_e: f64,
    pub lhs_average: f64,
    pub epsilon: f64,
    /// Probability mass of `(t, z)` with a non-empty output.
    pub output_probability: f64,
    pub pass: bool,
}

/// Exact `sum_{t,z} P(t,z) || rho_{KE|t,z} - u_K rho_{E|t,z} ||_1` for a
/// small fixture, compared with `epsilon`. Estimation rounds are measured with
/// `{Q_0, Q_1}`, raw-bit rounds with Alice's setting 0; terms with `m = 0`
/// contribute nothing.
pub fn verify_protocol_security_exact(
    state: &TripartiteState,
    devices: &[RoundDevices],
    mode: Mode,
    p_e: f64,
    epsilon: f64,
    table_seed: u64,
) -> Result<SecurityReport> {
    let n = state.n_rounds();
    if n > MAX_EXACT_ROUNDS {
        return Err(Error::TooLarge {
            dim: n,
            limit: MAX_EXACT_ROUNDS,
        });
    }
    if !(p_e > 0.0 && p_e < 1.0) || !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::OutOfRange("p_e must lie in (0, 1) and epsilon in (0, 1]".into()));
    }
    state.check_devices(devices)?;
    for (i, d) in devices.iter().enumerate() {
        if !d.alice(0).is_projective() {
            return Err(Error::InvalidMeasurement(format!(
                "round {i}: Alice's key measurement is not projective"
            )));
        }
    }
    let povms: Vec<[CMatrix; 2]> = devices.iter().map(estimation_povm).collect();
    let layout = state.layout();
    let dim_e = state.dim_e();
    let mut lhs = 0.0;
    let mut output_probability = 0.0;

    for t in 0..1usize << n {
        let est: Vec<usize> = (0..n).filter(|i| t >> i & 1 == 1).collect();
        let raw: Vec<usize> = (0..n).filter(|i| t >> i & 1 == 0).collect();
        let p_t = p_e.powi(est.len() as i32) * (1.0 - p_e).powi(raw.len() as i32);
        let n_r = raw.len();
        for z in 0..1usize << est.len() {
            let n1 = z.count_ones() as usize;
            let n0 = est.len() - n1;
            let m = output_length(mode, n0, n1, n_r, p_e, epsilon).m;
            let mut x = state.rho().clone();
            for (j, &round) in est.iter().enumerate() {
                let q = &povms[round][z >> j & 1];
                x = apply_local(&x, &layout, &[round, n + round], q)?;
            }
            if m == 0 {
                continue;
            }
            output_probability += p_t * x.trace().re;
            let g = match mode {
                Mode::Xor => xor_table(n_r as u32)?,
                Mode::Mbit => protocol_table(n_r as u32, m, table_seed, None)?,
            };
            // Keep the raw-round A factors and E.
            let mut targets = raw.clone();
            targets.push(2 * n);
            let reduced = reduce_to(&x, &layout, &targets)?;
            let mut dims: Vec<usize> = raw.iter().map(|&r| state.dims_a()[r]).collect();
            dims.push(dim_e);
            let sub = Layout::new(&dims);
            let mut blocks = vec![CMatrix::zeros(dim_e, dim_e); 1 << g.m_out()];
            for input in 0..1usize << n_r {
                let mut y = reduced.clone();
                for (j, &round) in raw.iter().enumerate() {
                    let bit = input >> j & 1;
                    y = apply_local(&y, &sub, &[j], devices[round].alice(0).element(bit))?;
                }
                blocks[g.apply(input) as usize] += keep_last(&y, dim_e);
            }
            let rho_e = blocks
                .iter()
                .fold(CMatrix::zeros(dim_e, dim_e), |acc, b| acc + b);
            let ideal = rho_e.scale(1.0 / blocks.len() as f64);
            let dist: f64 = blocks.iter().map(|b| trace_norm(&(b - &ideal))).sum();
            lhs += p_t * dist;
        }
    }
    Ok(SecurityReport {
        n,
        mode,
        p_e,
        lhs_average: lhs,
        epsilon,
        output_probability,
        pass: lhs <= epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::{solve, RateProblem, Q0_TSIRELSON};
    use crate::rng::seeded;
    use crate::sim::{eve_copy_state, iid_qubit_state};

    fn honest_cfg(n: usize, p_e: f64, mode: Mode, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            n,
            p_e,
            epsilon: 1e-6,
            mode,
            seed,
            device: DeviceModel::Honest(HonestDevice::singlet()),
            cache_dir: None,
        }
    }

    #[test]
    fn epsilon_split_is_exact() {
        for eps in [1e-6, 0.5, 1.0, 0.3, 1e-6 / 1024.0] {
            let (m, e) = split_epsilon(eps);
            assert!((1.0..2.0).contains(&m));
            assert_eq!(m * 2f64.powi(e as i32), eps);
        }
        assert_eq!(split_epsilon(1e-6).0, split_epsilon(1e-6 / 1024.0).0);
    }

    #[test]
    fn honest_singlet_statistics() {
        let t = run_protocol(&honest_cfg(100_000, 0.8, Mode::Xor, 1)).unwrap();
        assert_eq!(t.n_e + t.n_r, 100_000);
        assert_eq!(t.z.len(), t.n_e);
        assert_eq!(t.a.len(), t.n_r);
        let q0 = t.q0.unwrap();
        assert!((q0 - Q0_TSIRELSON).abs() < 0.01, "{q0}");
        assert_eq!(t.m_out, 1);
        assert!(t.k.is_some());
    }

    #[test]
    fn small_p_e_gives_nothing() {
        let t = run_protocol(&honest_cfg(100_000, 0.3, Mode::Xor, 2)).unwrap();
        assert_eq!(t.m_out, 0);
        assert!(t.k.is_none());
    }

    #[test]
    fn single_round_has_no_output() {
        for seed in 0..20 {
            let t = run_protocol(&honest_cfg(1, 0.5, Mode::Xor, seed)).unwrap();
            assert_eq!(t.m_out, 0);
        }
        let mut cfg = honest_cfg(1, 0.5, Mode::Xor, 0);
        cfg.n = 0;
        assert!(run_protocol(&cfg).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = run_protocol(&honest_cfg(5_000, 0.7, Mode::Xor, 9)).unwrap();
        let b = run_protocol(&honest_cfg(5_000, 0.7, Mode::Xor, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn xor_length_examples() {
        let (n_e, n_r) = (90_000usize, 10_000usize);
        let n0 = (Q0_TSIRELSON * n_e as f64).round() as usize;
        assert_eq!(output_length_xor(n0, n_e - n0, n_r, 0.9, 1e-6).m, 1);
        assert_eq!(output_length_xor(0, n_e, n_r, 0.9, 1e-6).m, 0);
        assert_eq!(output_length_xor(0, 0, n_r, 0.9, 1e-6).m, 0);
    }

    #[test]
    fn mbit_epsilon_shift_is_exact() {
        let (n_e, n_r) = (950_000usize, 50_000usize);
        let n0 = (Q0_TSIRELSON * n_e as f64).round() as usize;
        let a = output_length_mbit(n0, n_e - n0, n_r, 0.95, 1e-6);
        let b = output_length_mbit(n0, n_e - n0, n_r, 0.95, 1e-6 / 1024.0);
        let floor_a = (a.value).floor();
        let floor_b = (b.value).floor();
        assert_eq!(floor_a - floor_b, 20.0);
        assert_eq!(output_length_mbit(n_e / 2, n_e / 2, n_r, 0.95, 1e-6).m, 0);
    }

    #[test]
    fn q_identities_hold() {
        let mut rng = seeded(4);
        for _ in 0..20 {
            let d = RoundDevices::random_bloch(&mut rng);
            let p = ShiftedChshParams::new(rng.random_range(2.0..TSIRELSON)).unwrap();
            let (es, eq) = estimation_identity_errors(&p, &d);
            assert!(es <= 1e-10 && eq <= 1e-10);
        }
    }

    #[test]
    fn factor_identity_at_solutions() {
        let mut rng = seeded(5);
        for mode in [Mode::Xor, Mode::Mbit] {
            for (p_e, q0) in [(0.9, Q0_TSIRELSON), (0.7, 0.8), (0.4, 0.6)] {
                let sol = solve(&RateProblem::new(mode, p_e, q0).unwrap());
                let d = RoundDevices::random_xz(&mut rng);
                let f = protocol_factor(mode, p_e, &sol, &d).unwrap();
                let err = (f - identity(4)).iter().map(|z| z.norm()).fold(0.0, f64::max);
                assert!(err <= 1e-9, "{mode} {err:e}");
            }
        }
    }

    #[test]
    fn fixture_sampling_matches_born_rule() {
        let st = iid_qubit_state(&phi_plus(), 2).unwrap();
        let devices = vec![RoundDevices::optimal(); 2];
        let mut zeros = 0usize;
        let mut total = 0usize;
        for seed in 0..400 {
            let cfg = ProtocolConfig {
                n: 2,
                p_e: 0.99,
                epsilon: 0.5,
                mode: Mode::Xor,
                seed,
                device: DeviceModel::Fixture {
                    state: st.clone(),
                    devices: devices.clone(),
                },
                cache_dir: None,
            };
            let t = run_protocol(&cfg).unwrap();
            zeros += t.z.iter().filter(|&&z| z == 0).count();
            total += t.z.len();
        }
        let q0 = zeros as f64 / total as f64;
        assert!((q0 - Q0_TSIRELSON).abs() < 0.05, "{q0}");
    }

    #[test]
    fn exact_security_product_singlets() {
        let st = iid_qubit_state(&phi_plus(), 2).unwrap();
        let devices = vec![RoundDevices::optimal(); 2];
        let r = verify_protocol_security_exact(&st, &devices, Mode::Xor, 0.9, 0.5, 0).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn exact_security_eve_copy() {
        let st = eve_copy_state(3).unwrap();
        let devices = vec![RoundDevices::optimal(); 3];
        for mode in [Mode::Xor, Mode::Mbit] {
            let r = verify_protocol_security_exact(&st, &devices, mode, 0.9, 0.5, 0).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn table_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = protocol_table(8, 3, 11, Some(dir.path())).unwrap();
        let b = protocol_table(8, 3, 11, Some(dir.path())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, protocol_table(8, 3, 11, None).unwrap());
        assert!(dir.path().join("table_n8_m3_seed11.txt").exists());
    }
}
