//! Output-length maximization over `(s, alpha_0, alpha_1, beta)` and the
//! asymptotic rate curves derived from it.
//!
//! The two equality constraints
//! `p_r sqrt(2)^(beta-1) K_z(s) + p_e sqrt(2)^(alpha_z) = 1`, with
//! `K_z = mu_s ∓ 4 nu_s` (plus 1 in m-bit mode), are solved for `alpha_z`.
//! Writing `c = p_r sqrt(2)^(beta-1)`, feasibility is `0 < c < 1/K_1`, and the
//! search runs over `s` and `u = ln v` with `c = exp(-v)/K_1`, so that
//! `1 - c K_1 = -expm1(-v)` stays accurate near the boundary.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bell::{shifted_coefficients, S_MAX, S_MIN, TSIRELSON};
use crate::error::{Error, Result};

/// Extraction mode of the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Xor,
    Mbit,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Xor => "xor",
            Mode::Mbit => "mbit",
        }
    }

    /// `(K_0(s), K_1(s))`.
    pub fn constraint_coefficients(self, s: f64) -> (f64, f64) {
        let (mu, nu) = shifted_coefficients(s);
        let shift = match self {
            Mode::Xor => 0.0,
            Mode::Mbit => 1.0,
        };
        (shift + mu - 4.0 * nu, shift + mu + 4.0 * nu)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xor" => Ok(Mode::Xor),
            "mbit" => Ok(Mode::Mbit),
            other => Err(Error::Parse(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Smallest statistic with a Bell violation, `CHSH = 2`.
pub const Q0_CLASSICAL: f64 = 0.75;
/// Statistic at the Tsirelson bound, `(2 + sqrt 2)/4`.
pub const Q0_TSIRELSON: f64 = (2.0 + std::f64::consts::SQRT_2) / 4.0;

pub fn chsh_from_q0(q0: f64) -> f64 {
    8.0 * q0 - 4.0
}

pub fn q0_from_chsh(chsh: f64) -> f64 {
    (chsh + 4.0) / 8.0
}

/// Linear objective `w0 alpha_0 + w1 alpha_1 + wb beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub w0: f64,
    pub w1: f64,
    pub wb: f64,
}

impl Weights {
    pub fn evaluate(&self, alpha0: f64, alpha1: f64, beta: f64) -> f64 {
        self.w0 * alpha0 + self.w1 * alpha1 + self.wb * beta
    }
}

/// Asymptotic problem at estimation probability `p_e` and statistic `q_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RateProblem {
    pub mode: Mode,
    pub p_e: f64,
    pub q0: f64,
}

impl RateProblem {
    pub fn new(mode: Mode, p_e: f64, q0: f64) -> Result<Self> {
        if !(p_e > 0.0 && p_e < 1.0) {
            return Err(Error::OutOfRange(format!("p_e = {p_e} outside (0, 1)")));
        }
        if !(0.0..=1.0).contains(&q0) {
            return Err(Error::OutOfRange(format!("q0 = {q0} outside [0, 1]")));
        }
        Ok(RateProblem { mode, p_e, q0 })
    }

    /// `(p_e q_0, p_e q_1, p_r)`.
    pub fn weights(&self) -> Weights {
        Weights {
            w0: self.p_e * self.q0,
            w1: self.p_e * (1.0 - self.q0),
            wb: 1.0 - self.p_e,
        }
    }
}

/// A maximizer found by [`maximize`] or [`solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RateSolution {
    pub s: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta: f64,
    pub objective: f64,
    pub feasible: bool,
}

impl RateSolution {
    fn infeasible() -> Self {
        RateSolution {
            s: f64::NAN,
            alpha0: f64::NAN,
            alpha1: f64::NAN,
            beta: f64::NAN,
            objective: f64::NEG_INFINITY,
            feasible: false,
        }
    }
}

/// Constraint left-hand sides minus 1 at a solution.
pub fn constraint_residuals(mode: Mode, p_e: f64, sol: &RateSolution) -> [f64; 2] {
    let (k0, k1) = mode.constraint_coefficients(sol.s);
    let c = (1.0 - p_e) * 2f64.powf((sol.beta - 1.0) / 2.0);
    [
        c * k0 + p_e * 2f64.powf(sol.alpha0 / 2.0) - 1.0,
        c * k1 + p_e * 2f64.powf(sol.alpha1 / 2.0) - 1.0,
    ]
}

pub const S_GRID_POINTS: usize = 128;
pub const U_GRID_POINTS: usize = 128;
const U_MIN: f64 = -27.631_021_115_928_547; // ln 1e-12
const U_MAX: f64 = 4.158_883_083_359_671; // ln 64
const GOLDEN_ITERS: usize = 60;

/// Sorted union of 64 linear points and 64 points accumulating at `2 sqrt 2`.
fn solver_s_grid() -> &'static [f64] {
    static GRID: std::sync::OnceLock<Vec<f64>> = std::sync::OnceLock::new();
    GRID.get_or_init(|| {
        let half = S_GRID_POINTS / 2;
        let mut g: Vec<f64> = (0..half)
            .map(|i| S_MIN + (S_MAX - S_MIN) * i as f64 / (half - 1) as f64)
            .collect();
        let (lo, hi) = ((TSIRELSON - S_MAX).ln(), (TSIRELSON - 2.3).ln());
        g.extend((0..half).map(|i| {
            TSIRELSON - (lo + (hi - lo) * i as f64 / (half - 1) as f64).exp()
        }));
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    })
}

/// A candidate point and its objective value.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    s: f64,
    alpha0: f64,
    alpha1: f64,
    beta: f64,
    value: f64,
}

fn evaluate(mode: Mode, p_e: f64, w: &Weights, s: f64, u: f64) -> Candidate {
    let (k0, k1) = mode.constraint_coefficients(s);
    let v = u.exp();
    // c = exp(-v) / K_1
    let log2_c = -v / std::f64::consts::LN_2 - k1.log2();
    let beta = 1.0 + 2.0 * (log2_c - (1.0 - p_e).log2());
    let c = log2_c.exp2();
    let alpha0 = 2.0 * ((1.0 - c * k0).log2() - p_e.log2());
    let alpha1 = 2.0 * ((-(-v).exp_m1()).log2() - p_e.log2());
    let value = w.evaluate(alpha0, alpha1, beta);
    Candidate {
        s,
        alpha0,
        alpha1,
        beta,
        value: if value.is_nan() { f64::NEG_INFINITY } else { value },
    }
}

fn golden_max(lo: f64, hi: f64, mut f: impl FnMut(f64) -> Candidate) -> Candidate {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut best = if f1.value >= f2.value { f1 } else { f2 };
    for _ in 0..GOLDEN_ITERS {
        if f1.value >= f2.value {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
        for c in [f1, f2] {
            if c.value > best.value {
                best = c;
            }
        }
        if b - a <= 1e-13 * (1.0 + a.abs()) {
            break;
        }
    }
    best
}

/// Best `u` at fixed `s`: grid scan, then golden section around the best cell.
fn best_u(mode: Mode, p_e: f64, w: &Weights, s: f64) -> Candidate {
    let du = (U_MAX - U_MIN) / (U_GRID_POINTS - 1) as f64;
    let u_at = |j: usize| U_MIN + du * j as f64;
    let mut best = evaluate(mode, p_e, w, s, u_at(0));
    let mut bj = 0;
    for j in 1..U_GRID_POINTS {
        let c = evaluate(mode, p_e, w, s, u_at(j));
        if c.value > best.value {
            best = c;
            bj = j;
        }
    }
    if !best.value.is_finite() {
        return best;
    }
    let refined = golden_max(
        u_at(bj.saturating_sub(1)),
        u_at((bj + 1).min(U_GRID_POINTS - 1)),
        |u| evaluate(mode, p_e, w, s, u),
    );
    if refined.value > best.value {
        refined
    } else {
        best
    }
}

/// Maximize `w0 alpha_0 + w1 alpha_1 + wb beta` under the mode's constraints.
///
/// The objective is nearly flat in `s`, so `u` is optimized accurately at
/// every grid `s` before the best `s` cell is refined.
pub fn maximize(mode: Mode, p_e: f64, w: Weights) -> RateSolution {
    if !(p_e > 0.0 && p_e < 1.0) || ![w.w0, w.w1, w.wb].iter().all(|x| x.is_finite()) {
        return RateSolution::infeasible();
    }
    let s_grid = solver_s_grid();
    let mut best = best_u(mode, p_e, &w, s_grid[0]);
    let mut bi = 0;
    for (i, &s) in s_grid.iter().enumerate().skip(1) {
        let c = best_u(mode, p_e, &w, s);
        if c.value > best.value {
            best = c;
            bi = i;
        }
    }
    if !best.value.is_finite() {
        return RateSolution::infeasible();
    }
    let refined = golden_max(
        s_grid[bi.saturating_sub(1)],
        s_grid[(bi + 1).min(s_grid.len() - 1)],
        |s| best_u(mode, p_e, &w, s),
    );
    if refined.value > best.value {
        best = refined;
    }

    RateSolution {
        s: best.s,
        alpha0: best.alpha0,
        alpha1: best.alpha1,
        beta: best.beta,
        objective: w.evaluate(best.alpha0, best.alpha1, best.beta),
        feasible: true,
    }
}

/// Maximize `p_e (alpha_0 q_0 + alpha_1 q_1) + beta p_r`.
pub fn solve(problem: &RateProblem) -> RateSolution {
    maximize(problem.mode, problem.p_e, problem.weights())
}

/// One point of the minimum-CHSH curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MinChshPoint {
    pub p_e: f64,
    /// `None` when even the Tsirelson statistic gives no yield.
    pub min_chsh: Option<f64>,
}

/// Bisection tolerance on `q_0`.
pub const Q0_TOL: f64 = 1e-5;

fn yields(mode: Mode, p_e: f64, q0: f64) -> bool {
    RateProblem::new(mode, p_e, q0)
        .map(|p| solve(&p).objective >= 0.0)
        .unwrap_or(false)
}

/// Smallest CHSH in `[2, 2 sqrt 2]` with non-negative asymptotic objective.
pub fn min_chsh(mode: Mode, p_e: f64) -> MinChshPoint {
    if !yields(mode, p_e, Q0_TSIRELSON) {
        return MinChshPoint { p_e, min_chsh: None };
    }
    if yields(mode, p_e, Q0_CLASSICAL) {
        return MinChshPoint {
            p_e,
            min_chsh: Some(chsh_from_q0(Q0_CLASSICAL)),
        };
    }
    let (mut lo, mut hi) = (Q0_CLASSICAL, Q0_TSIRELSON);
    while hi - lo > Q0_TOL {
        let mid = 0.5 * (lo + hi);
        if yields(mode, p_e, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    MinChshPoint {
        p_e,
        min_chsh: Some(chsh_from_q0(hi)),
    }
}

/// [`min_chsh`] over a grid of `p_e` values, in parallel.
pub fn min_chsh_curve(mode: Mode, p_e_grid: &[f64]) -> Vec<MinChshPoint> {
    p_e_grid.par_iter().map(|&p| min_chsh(mode, p)).collect()
}

/// `0.01, 0.02, .., 0.99` style grid with `count` interior points of `(0, 1)`.
pub fn p_e_grid(count: usize) -> Vec<f64> {
    (1..=count).map(|i| i as f64 / (count + 1) as f64).collect()
}

/// Maximal rates at one CHSH value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RatePoint {
    pub chsh: f64,
    /// Output bits per extractor input bit, clamped at 0.
    pub r_ext: f64,
    /// Output bits per round, clamped at 0.
    pub r_eff: f64,
    /// Unclamped supremum of the extraction rate.
    pub r_ext_raw: f64,
    pub r_eff_raw: f64,
    pub p_e_star: f64,
    pub p_e_eff_star: f64,
    /// Solution at the extraction-rate maximizer.
    pub solution: RateSolution,
}

impl RatePoint {
    pub fn yields(&self) -> bool {
        self.r_ext_raw > 0.0
    }
}

/// Tolerance of the outer search over `p_e`.
pub const P_E_TOL: f64 = 1e-4;
const P_E_LO: f64 = 1e-4;
const P_E_HI: f64 = 1.0 - 1e-4;
const P_E_SCAN: usize = 40;

fn maximize_over_p_e(f: impl Fn(f64) -> (f64, RateSolution)) -> (f64, f64, RateSolution) {
    let scan: Vec<f64> = (0..P_E_SCAN)
        .map(|i| P_E_LO + (P_E_HI - P_E_LO) * i as f64 / (P_E_SCAN - 1) as f64)
        .collect();
    let values: Vec<(f64, RateSolution)> = scan.iter().map(|&p| f(p)).collect();
    let best_i = (0..scan.len())
        .max_by(|&a, &b| values[a].0.total_cmp(&values[b].0))
        .expect("non-empty scan");
    let mut best = (scan[best_i], values[best_i].0, values[best_i].1);
    let (mut a, mut b) = (
        scan[best_i.saturating_sub(1)],
        scan[(best_i + 1).min(scan.len() - 1)],
    );
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while b - a > P_E_TOL {
        if f1.0 >= f2.0 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
        for (x, fx) in [(x1, f1), (x2, f2)] {
            if fx.0 > best.1 {
                best = (x, fx.0, fx.1);
            }
        }
    }
    best
}

/// Maximal extraction and efficiency rates at one CHSH value.
pub fn rate_point(mode: Mode, chsh: f64) -> Result<RatePoint> {
    let q0 = q0_from_chsh(chsh);
    if !(0.0..=1.0).contains(&q0) {
        return Err(Error::OutOfRange(format!("CHSH = {chsh} outside [-4, 4]")));
    }
    let at = |p_e: f64| solve(&RateProblem { mode, p_e, q0 });
    let (p_ext, r_ext, sol) = maximize_over_p_e(|p| {
        let sol = at(p);
        (sol.objective / (1.0 - p), sol)
    });
    let (p_eff, r_eff, _) = maximize_over_p_e(|p| {
        let sol = at(p);
        (sol.objective, sol)
    });
    Ok(RatePoint {
        chsh,
        r_ext: r_ext.max(0.0),
        r_eff: r_eff.max(0.0),
        r_ext_raw: r_ext,
        r_eff_raw: r_eff,
        p_e_star: p_ext,
        p_e_eff_star: p_eff,
        solution: sol,
    })
}

/// [`rate_point`] over a CHSH grid, in parallel.
pub fn rate_curves(mode: Mode, chsh_grid: &[f64]) -> Result<Vec<RatePoint>> {
    chsh_grid.par_iter().map(|&c| rate_point(mode, c)).collect()
}

/// `count` evenly spaced CHSH values in `[2 + 1e-6, 2 sqrt 2 - 1e-6]`.
pub fn chsh_grid(count: usize) -> Vec<f64> {
    crate::bell::linear_s_grid(count)
}

/// `printf("%.12g")` formatting.
pub fn format_g12(x: f64) -> String {
    const DIGITS: i32 = 12;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..DIGITS).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `pE,minCHSH,feasible` CSV.
pub fn write_min_chsh_csv<W: Write>(mut w: W, points: &[MinChshPoint]) -> Result<()> {
    let mut out = String::from("pE,minCHSH,feasible\n");
    for p in points {
        let (value, feasible) = match p.min_chsh {
            Some(v) => (v, 1),
            None => (f64::NAN, 0),
        };
        writeln!(out, "{},{},{}", format_g12(p.p_e), format_g12(value), feasible)
            .expect("writing to a string");
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// `chsh,rExt,rEff,pE_star,s_star,beta_star,alpha0,alpha1` CSV; the solution
/// columns belong to the extraction-rate maximizer.
pub fn write_rates_csv<W: Write>(mut w: W, points: &[RatePoint]) -> Result<()> {
    let mut out = String::from("chsh,rExt,rEff,pE_star,s_star,beta_star,alpha0,alpha1\n");
    for p in points {
        let row = [
            p.chsh,
            p.r_ext,
            p.r_eff,
            p.p_e_star,
            p.solution.s,
            p.solution.beta,
            p.solution.alpha0,
            p.solution.alpha1,
        ]
        .map(format_g12)
        .join(",");
        out.push_str(&row);
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g12_formatting() {
        assert_eq!(format_g12(0.0), "0");
        assert_eq!(format_g12(1.0), "1");
        assert_eq!(format_g12(0.5), "0.5");
        assert_eq!(format_g12(2.0 * 2f64.sqrt()), "2.82842712475");
        assert_eq!(format_g12(1e-5), "1e-05");
        assert_eq!(format_g12(1.5e20), "1.5e+20");
        assert_eq!(format_g12(123456789012.0), "123456789012");
        assert_eq!(format_g12(1234567890123.0), "1.23456789012e+12");
        assert_eq!(format_g12(-0.000123), "-0.000123");
        assert_eq!(format_g12(f64::NAN), "nan");
        assert_eq!(format_g12(0.99999999999999), "1");
    }

    #[test]
    fn xor_positive_at_tsirelson_with_large_p_e() {
        let sol = solve(&RateProblem::new(Mode::Xor, 0.9, Q0_TSIRELSON).unwrap());
        assert!(sol.feasible && sol.objective > 0.0, "{sol:?}");
    }

    #[test]
    fn xor_negative_at_half() {
        for q0 in [0.5, 0.75, 0.8, Q0_TSIRELSON] {
            let sol = solve(&RateProblem::new(Mode::Xor, 0.5, q0).unwrap());
            assert!(sol.objective < 0.0, "q0={q0} {sol:?}");
        }
    }

    #[test]
    fn residuals_vanish() {
        for mode in [Mode::Xor, Mode::Mbit] {
            for (p_e, q0) in [(0.3, 0.8), (0.9, Q0_TSIRELSON), (0.6, 0.5), (0.99, 0.84)] {
                let sol = solve(&RateProblem::new(mode, p_e, q0).unwrap());
                for r in constraint_residuals(mode, p_e, &sol) {
                    assert!(r.abs() <= 1e-10, "{mode} {p_e} {q0} {r:e}");
                }
            }
        }
    }

    #[test]
    fn invalid_problems() {
        assert!(RateProblem::new(Mode::Xor, 0.0, 0.8).is_err());
        assert!(RateProblem::new(Mode::Xor, 0.5, 1.2).is_err());
        assert!(!maximize(Mode::Xor, 1.0, Weights { w0: 1.0, w1: 0.0, wb: 0.0 }).feasible);
    }

    #[test]
    fn min_chsh_anchor_points() {
        assert!(min_chsh(Mode::Xor, 0.5).min_chsh.is_none());
        let at_74 = min_chsh(Mode::Xor, 0.74).min_chsh.unwrap();
        assert!(at_74 <= 2.01, "{at_74}");
        let at_60 = min_chsh(Mode::Xor, 0.6).min_chsh.unwrap();
        assert!(at_60 > 2.01 && at_60 < TSIRELSON);
    }

    #[test]
    fn rate_csv_layout() {
        let pts = rate_curves(Mode::Mbit, &[2.8]).unwrap();
        let mut buf = Vec::new();
        write_rates_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "chsh,rExt,rEff,pE_star,s_star,beta_star,alpha0,alpha1"
        );
        assert_eq!(lines.next().unwrap().split(',').count(), 8);
        let mut buf = Vec::new();
        write_min_chsh_csv(&mut buf, &[MinChshPoint { p_e: 0.5, min_chsh: None }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "pE,minCHSH,feasible\n0.5,nan,0\n");
    }
}
