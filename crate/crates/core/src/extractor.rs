//! Extractor functions `g: {0,1}^n -> {0,1}^m` and their Walsh–Hadamard
//! certification.
//!
//! An input `a = (a_1, .., a_n)` is read as the integer `sum_i a_i 2^(i-1)`,
//! so `a_1` is the least significant bit and the inner product `a·r` is the
//! parity of `a & r`. A table is certified when every centered Walsh
//! coefficient `sum_a (delta_{g(a)}^k - 2^-m)(-1)^{a·r}` is bounded in
//! absolute value by `n^2 sqrt(2)^(n-m)`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// Largest supported input length.
pub const MAX_INPUT_BITS: u32 = 26;
/// Smallest input length accepted by [`search_extractor`].
pub const MIN_SEARCH_INPUT_BITS: u32 = 6;

/// Packed truth table of an extractor function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractorTable {
    n_in: u32,
    m_out: u32,
    table: Vec<u32>,
}

impl ExtractorTable {
    /// Validate and wrap an explicit table of `2^n_in` values below `2^m_out`.
    pub fn new(n_in: u32, m_out: u32, table: Vec<u32>) -> Result<Self> {
        if n_in == 0 || n_in > MAX_INPUT_BITS {
            return Err(Error::OutOfRange(format!(
                "input length {n_in} outside 1..={MAX_INPUT_BITS}"
            )));
        }
        if m_out == 0 || m_out > 31 {
            return Err(Error::OutOfRange(format!("output length {m_out} outside 1..=31")));
        }
        if table.len() != 1usize << n_in {
            return Err(Error::DimensionMismatch(format!(
                "table has {} entries, expected 2^{n_in}",
                table.len()
            )));
        }
        if let Some(bad) = table.iter().find(|&&v| v >> m_out != 0) {
            return Err(Error::OutOfRange(format!(
                "table value {bad:#x} does not fit in {m_out} bits"
            )));
        }
        Ok(ExtractorTable { n_in, m_out, table })
    }

    pub fn n_in(&self) -> u32 {
        self.n_in
    }

    pub fn m_out(&self) -> u32 {
        self.m_out
    }

    pub fn values(&self) -> &[u32] {
        &self.table
    }

    /// `g(a)` for an input packed as an integer.
    pub fn apply(&self, input: usize) -> u32 {
        self.table[input]
    }

    /// `g(a)` for an input given bit by bit, `bits[0] = a_1`.
    pub fn apply_bits(&self, bits: &[u8]) -> Result<u32> {
        if bits.len() != self.n_in as usize {
            return Err(Error::DimensionMismatch(format!(
                "{} input bits for a table on {} bits",
                bits.len(),
                self.n_in
            )));
        }
        Ok(self.apply(pack_bits(bits)))
    }

    /// Number of inputs mapped to each output value.
    pub fn preimage_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; 1usize << self.m_out];
        for &v in &self.table {
            counts[v as usize] += 1;
        }
        counts
    }

    /// Write the table in the `n=<n> m=<m>` header plus one hex value per line format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n={} m={}", self.n_in, self.m_out)?;
        for v in &self.table {
            writeln!(w, "{v:x}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty table file".into()))??;
        let (n_in, m_out) = parse_header(header.trim())?;
        if n_in == 0 || n_in > MAX_INPUT_BITS {
            return Err(Error::Parse(format!("input length {n_in} unsupported")));
        }
        let mut table = Vec::with_capacity(1usize << n_in);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let v = u32::from_str_radix(t, 16)
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 2)))?;
            table.push(v);
        }
        ExtractorTable::new(n_in, m_out, table).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }
}

fn parse_header(header: &str) -> Result<(u32, u32)> {
    let mut n = None;
    let mut m = None;
    for field in header.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field {field:?}")))?;
        let value: u32 = value
            .parse()
            .map_err(|_| Error::Parse(format!("bad header value {field:?}")))?;
        match key {
            "n" => n = Some(value),
            "m" => m = Some(value),
            _ => return Err(Error::Parse(format!("unknown header key {key:?}"))),
        }
    }
    match (n, m) {
        (Some(n), Some(m)) => Ok((n, m)),
        _ => Err(Error::Parse(format!("header {header:?} must be `n=<n> m=<m>`"))),
    }
}

/// Pack bits with `bits[0]` as the least significant bit.
pub fn pack_bits(bits: &[u8]) -> usize {
    bits.iter()
        .enumerate()
        .fold(0usize, |acc, (i, &b)| acc | (usize::from(b & 1) << i))
}

/// The parity function on `n_in` bits.
pub fn xor_table(n_in: u32) -> Result<ExtractorTable> {
    if n_in == 0 || n_in > MAX_INPUT_BITS {
        return Err(Error::OutOfRange(format!(
            "input length {n_in} outside 1..={MAX_INPUT_BITS}"
        )));
    }
    let table = (0..1u32 << n_in).map(|a| a.count_ones() & 1).collect();
    ExtractorTable::new(n_in, 1, table)
}

/// In-place unnormalized Walsh–Hadamard transform; length must be a power of two.
pub fn fwht(values: &mut [i64]) {
    let len = values.len();
    debug_assert!(len.is_power_of_two());
    let mut half = 1;
    while half < len {
        for block in values.chunks_exact_mut(2 * half) {
            let (lo, hi) = block.split_at_mut(half);
            for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*x, *y);
                *x = u + v;
                *y = u - v;
            }
        }
        half *= 2;
    }
}

/// Integer coefficients `2^m * sum_a (delta_{g(a)}^k - 2^-m)(-1)^{a·r}` into `buf`.
fn scaled_deviations_into(g: &ExtractorTable, k: u32, buf: &mut [i64]) {
    let hit = 1i64 << g.m_out;
    for (slot, &v) in buf.iter_mut().zip(&g.table) {
        *slot = if v == k { hit - 1 } else { -1 };
    }
    fwht(buf);
}

/// `sum_a (delta_{g(a)}^k - 2^-m)(-1)^{a·r}` for every `r`.
pub fn walsh_deviations(g: &ExtractorTable, k: u32) -> Vec<f64> {
    let mut buf = vec![0i64; g.table.len()];
    scaled_deviations_into(g, k, &mut buf);
    let scale = (1u64 << g.m_out) as f64;
    buf.into_iter().map(|v| v as f64 / scale).collect()
}

/// Walsh–Hadamard certificate of an extractor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WalshCertificate {
    pub n: u32,
    pub m: u32,
    pub max_deviation: f64,
    pub bound: f64,
    pub pass: bool,
    pub argmax_k: u32,
    pub argmax_r: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl WalshCertificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("certificate serializes")
    }
}

/// `n^2 sqrt(2)^(n-m)`.
pub fn certification_bound(n_in: u32, m_out: u32) -> f64 {
    let n = f64::from(n_in);
    n * n * 2f64.powf((f64::from(n_in) - f64::from(m_out)) / 2.0)
}

/// Largest centered Walsh coefficient over all `k` and `r`, with the bound verdict.
pub fn certify(g: &ExtractorTable) -> Result<WalshCertificate> {
    if g.m_out >= g.n_in {
        return Err(Error::OutOfRange(format!(
            "certification needs m < n (got n={}, m={})",
            g.n_in, g.m_out
        )));
    }
    let counts = g.preimage_counts();
    let len = g.table.len();
    // A value without preimages has coefficient -2^(n-m) at r = 0 and 0 elsewhere.
    let empty_dev = (len >> g.m_out) as i64;
    let (scaled, argmax_k, argmax_r) = (0..counts.len() as u32)
        .into_par_iter()
        .map_init(
            || vec![0i64; len],
            |buf, k| {
                if counts[k as usize] == 0 {
                    return (empty_dev << g.m_out, k, 0u64);
                }
                scaled_deviations_into(g, k, buf);
                let (r, v) = buf
                    .iter()
                    .enumerate()
                    .map(|(r, v)| (r, v.abs()))
                    .fold((0, -1), |best, cur| if cur.1 > best.1 { cur } else { best });
                (v, k, r as u64)
            },
        )
        .reduce(
            || (-1, 0, 0),
            |a, b| {
                if b.0 > a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) {
                    b
                } else {
                    a
                }
            },
        );
    let max_deviation = scaled as f64 / (1u64 << g.m_out) as f64;
    let bound = certification_bound(g.n_in, g.m_out);
    Ok(WalshCertificate {
        n: g.n_in,
        m: g.m_out,
        max_deviation,
        bound,
        pass: max_deviation <= bound,
        argmax_k,
        argmax_r,
        seed: None,
    })
}

/// Uniformly random table with `2^n_in` independent `m_out`-bit entries.
pub fn random_table<R: RngCore + ?Sized>(n_in: u32, m_out: u32, rng: &mut R) -> Result<ExtractorTable> {
    if m_out == 0 || m_out > 31 {
        return Err(Error::OutOfRange(format!("output length {m_out} outside 1..=31")));
    }
    if n_in == 0 || n_in > MAX_INPUT_BITS {
        return Err(Error::OutOfRange(format!(
            "input length {n_in} outside 1..={MAX_INPUT_BITS}"
        )));
    }
    let shift = 32 - m_out;
    let table = (0..1usize << n_in).map(|_| rng.next_u32() >> shift).collect();
    ExtractorTable::new(n_in, m_out, table)
}

/// Rejection sampling of random tables until one is certified, without the
/// `n > 5` restriction. The returned certificate has no seed attached.
pub fn random_certified_table<R: Rng + ?Sized>(
    n_in: u32,
    m_out: u32,
    max_attempts: u64,
    rng: &mut R,
) -> Result<(ExtractorTable, WalshCertificate, u64)> {
    if m_out == 0 || m_out >= n_in {
        return Err(Error::OutOfRange(format!(
            "need 0 < m < n (got n={n_in}, m={m_out})"
        )));
    }
    for attempt in 1..=max_attempts {
        let table = random_table(n_in, m_out, rng)?;
        let cert = certify(&table)?;
        if cert.pass {
            return Ok((table, cert, attempt));
        }
    }
    Err(Error::SearchExhausted {
        n_in,
        m_out,
        attempts: max_attempts,
    })
}

/// Result of [`search_extractor`].
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub table: ExtractorTable,
    pub certificate: WalshCertificate,
    pub attempts: u64,
}

/// Deterministic search for a certified table, seeded on the extractor-search stream.
pub fn search_extractor(n_in: u32, m_out: u32, max_attempts: u64, seed: u64) -> Result<SearchOutcome> {
    if !(MIN_SEARCH_INPUT_BITS..=MAX_INPUT_BITS).contains(&n_in) {
        return Err(Error::OutOfRange(format!(
            "input length must satisfy {MIN_SEARCH_INPUT_BITS} <= n <= {MAX_INPUT_BITS}, got {n_in}"
        )));
    }
    if m_out == 0 || m_out >= n_in {
        return Err(Error::OutOfRange(format!(
            "output length must satisfy 0 < m < n, got n={n_in}, m={m_out}"
        )));
    }
    let mut rng = rng_for(seed, Stream::ExtractorSearch);
    let (table, mut certificate, attempts) =
        random_certified_table(n_in, m_out, max_attempts, &mut rng)?;
    certificate.seed = Some(seed);
    Ok(SearchOutcome {
        table,
        certificate,
        attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn naive(g: &ExtractorTable, k: u32) -> Vec<f64> {
        let inv = 1.0 / f64::from(1u32 << g.m_out);
        (0..g.table.len())
            .map(|r| {
                (0..g.table.len())
                    .map(|a| {
                        let d = if g.table[a] == k { 1.0 } else { 0.0 } - inv;
                        if (a & r).count_ones() % 2 == 0 { d } else { -d }
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn xor_tables() {
        assert_eq!(xor_table(1).unwrap().values(), &[0, 1]);
        assert_eq!(xor_table(2).unwrap().values(), &[0, 1, 1, 0]);
        assert_eq!(xor_table(3).unwrap().apply_bits(&[1, 0, 1]).unwrap(), 0);
        assert!(xor_table(0).is_err());
        assert!(xor_table(27).is_err());
    }

    #[test]
    fn fwht_of_delta_is_constant() {
        let mut v = vec![0i64; 8];
        v[0] = 1;
        fwht(&mut v);
        assert_eq!(v, vec![1; 8]);
    }

    #[test]
    fn constant_function_deviation() {
        let g = ExtractorTable::new(5, 1, vec![0; 32]).unwrap();
        let d = walsh_deviations(&g, 0);
        assert_eq!(d[0], 16.0);
        assert!(d[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn xor_deviation_concentrates_on_all_ones() {
        for n in 1..=8 {
            let g = xor_table(n).unwrap();
            let d = walsh_deviations(&g, 0);
            let all_ones = (1usize << n) - 1;
            for (r, v) in d.iter().enumerate() {
                let want = if r == all_ones { f64::from(1u32 << (n - 1)) } else { 0.0 };
                assert_eq!(*v, want, "n={n} r={r}");
            }
        }
    }

    #[test]
    fn zero_frequency_counts_preimages() {
        let mut rng = seeded(3);
        let g = random_table(7, 3, &mut rng).unwrap();
        let counts = g.preimage_counts();
        for k in 0..8u32 {
            let d = walsh_deviations(&g, k);
            assert_eq!(d[0], counts[k as usize] as f64 - 16.0);
        }
    }

    #[test]
    fn fast_matches_naive() {
        let mut rng = seeded(5);
        for n in 2..=7 {
            for m in 1..n.min(4) {
                let g = random_table(n, m, &mut rng).unwrap();
                for k in 0..1u32 << m {
                    let fast = walsh_deviations(&g, k);
                    let slow = naive(&g, k);
                    for (x, y) in fast.iter().zip(&slow) {
                        assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn certify_constant_examples() {
        let c = certify(&ExtractorTable::new(8, 1, vec![0; 256]).unwrap()).unwrap();
        assert_eq!(c.max_deviation, 128.0);
        assert!((c.bound - 64.0 * 2f64.powf(3.5)).abs() < 1e-9);
        assert!(c.pass);
        assert_eq!((c.argmax_k, c.argmax_r), (0, 0));
    }

    #[test]
    fn certify_large_constant_fails() {
        let c = certify(&ExtractorTable::new(24, 4, vec![0; 1 << 24]).unwrap()).unwrap();
        assert_eq!(c.max_deviation, 16_777_216.0 * (1.0 - 1.0 / 16.0));
        assert!((c.bound - 576.0 * 1024.0).abs() < 1e-6);
        assert!(!c.pass);
    }

    #[test]
    fn certify_rejects_m_not_below_n() {
        let g = ExtractorTable::new(3, 3, (0..8).collect()).unwrap();
        assert!(certify(&g).is_err());
    }

    #[test]
    fn random_table_certifies_at_sixteen_bits() {
        let mut rng = seeded(16);
        let g = random_table(16, 4, &mut rng).unwrap();
        assert!(certify(&g).unwrap().pass);
    }

    #[test]
    fn search_is_deterministic_and_checks_hypotheses() {
        let a = search_extractor(12, 3, 5, 7).unwrap();
        let b = search_extractor(12, 3, 5, 7).unwrap();
        assert_eq!(a.table, b.table);
        assert!(a.certificate.pass);
        assert_eq!(a.certificate.seed, Some(7));
        assert!(search_extractor(5, 1, 5, 7).is_err());
        assert!(search_extractor(10, 10, 5, 7).is_err());
        assert!(search_extractor(6, 5, 50, 1).unwrap().certificate.pass);
    }

    #[test]
    fn table_file_round_trip() {
        let mut rng = seeded(9);
        let g = random_table(6, 5, &mut rng).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("n=6 m=5\n"));
        assert_eq!(ExtractorTable::read_from(&buf[..]).unwrap(), g);
        assert!(ExtractorTable::read_from(&b"n=2 m=1\n0\n1\n"[..]).is_err());
        assert!(ExtractorTable::read_from(&b"bogus\n"[..]).is_err());
    }

    #[test]
    fn certificate_json_field_names() {
        let c = search_extractor(8, 2, 10, 3).unwrap().certificate;
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        for key in ["n", "m", "maxDeviation", "bound", "pass", "argmaxK", "argmaxR", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
