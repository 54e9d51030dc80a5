//! Regular LDPC codes built by progressive edge growth, with systematic
//! encoding and sum-product decoding.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::io::{read_file, write_file, Reader, Writer};
use crate::{Error, Result};

pub const DEFAULT_BLOCK_LEN: usize = 1024;
pub const DEFAULT_VAR_DEGREE: usize = 3;
pub const DEFAULT_MAX_ITER: usize = 50;
/// Magnitude cap on messages inside the decoder.
const LLR_CAP: f64 = 30.0;

/// Binary code given by a sparse parity-check matrix.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    n: usize,
    k: usize,
    /// Variable indices of each check.
    checks: Vec<Vec<usize>>,
    /// Check indices of each variable.
    vars: Vec<Vec<usize>>,
    /// Codeword positions of the information bits.
    info_cols: Vec<usize>,
    /// For each pivot: its codeword position and the info-bit indices it sums.
    parity: Vec<(usize, Vec<usize>)>,
    pub max_iter: usize,
}

/// Outcome of one decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub info: Vec<u8>,
    pub codeword: Vec<u8>,
    pub iterations: usize,
    pub converged: bool,
}

impl LdpcCode {
    /// Rate-`rate` code of length `n` with column weight `dv`, built by
    /// progressive edge growth. Constructions whose parity-check matrix is
    /// rank deficient are rebuilt with the next seed.
    pub fn peg(n: usize, rate: f64, dv: usize, seed: u64) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::InvalidParameter(format!("code rate {rate} outside (0, 1)")));
        }
        let k = (rate * n as f64).round() as usize;
        let m = n - k;
        if k == 0 || m < dv || dv == 0 {
            return Err(Error::InvalidParameter(format!("cannot build a ({n}, {k}) code with column weight {dv}")));
        }
        for attempt in 0..64 {
            let checks = peg_checks(n, m, dv, seed.wrapping_add(attempt));
            if let Some(code) = Self::from_checks(n, checks)? {
                if code.k == k {
                    return Ok(code);
                }
            }
        }
        Err(Error::InvalidParameter(format!("no full-rank ({n}, {k}) construction found")))
    }

    /// Builds the code from check rows. Returns `None` if the rows are not
    /// linearly independent.
    fn from_checks(n: usize, checks: Vec<Vec<usize>>) -> Result<Option<Self>> {
        let m = checks.len();
        let mut vars = vec![Vec::new(); n];
        for (c, row) in checks.iter().enumerate() {
            for &v in row {
                if v >= n {
                    return Err(Error::InvalidParameter(format!("check {c} references column {v} >= n = {n}")));
                }
                vars[v].push(c);
            }
        }
        let Some((pivots, rref)) = rref(n, &checks) else {
            return Ok(None);
        };
        let mut is_pivot = vec![false; n];
        for &p in &pivots {
            is_pivot[p] = true;
        }
        let info_cols: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
        let mut info_index = vec![usize::MAX; n];
        for (i, &c) in info_cols.iter().enumerate() {
            info_index[c] = i;
        }
        let parity = pivots
            .iter()
            .zip(&rref)
            .map(|(&p, row)| {
                let deps = (0..n).filter(|&c| c != p && get_bit(row, c)).map(|c| info_index[c]).collect();
                (p, deps)
            })
            .collect();
        Ok(Some(Self {
            n,
            k: n - m,
            checks,
            vars,
            info_cols,
            parity,
            max_iter: DEFAULT_MAX_ITER,
        }))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    pub fn checks(&self) -> &[Vec<usize>] {
        &self.checks
    }

    /// Codeword positions carrying the information bits, in order.
    pub fn info_positions(&self) -> &[usize] {
        &self.info_cols
    }

    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.len() != self.k {
            return Err(Error::LengthMismatch {
                expected: self.k,
                actual: info.len(),
            });
        }
        let mut cw = vec![0u8; self.n];
        for (&c, &b) in self.info_cols.iter().zip(info) {
            cw[c] = b & 1;
        }
        for (p, deps) in &self.parity {
            cw[*p] = deps.iter().fold(0, |acc, &i| acc ^ (info[i] & 1));
        }
        Ok(cw)
    }

    pub fn syndrome_ok(&self, cw: &[u8]) -> bool {
        self.checks.iter().all(|row| row.iter().fold(0u8, |a, &v| a ^ cw[v]) == 0)
    }

    /// Sum-product decoding of channel LLRs (`ln P(0)/P(1)`), stopping as
    /// soon as the hard decision satisfies every check.
    pub fn decode(&self, llr: &[f64]) -> Result<Decoded> {
        if llr.len() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                actual: llr.len(),
            });
        }
        if llr.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("decoder input LLRs"));
        }
        let ch: Vec<f64> = llr.iter().map(|v| v.clamp(-LLR_CAP, LLR_CAP)).collect();
        // Edge messages stored per check, in row order.
        let mut c2v: Vec<Vec<f64>> = self.checks.iter().map(|r| vec![0.0; r.len()]).collect();
        let mut v2c: Vec<Vec<f64>> = self.checks.iter().map(|r| r.iter().map(|&v| ch[v]).collect()).collect();
        // Position of each (var, check) edge inside the check row.
        let slot: Vec<Vec<usize>> = self
            .vars
            .iter()
            .enumerate()
            .map(|(v, cs)| cs.iter().map(|&c| self.checks[c].iter().position(|&x| x == v).unwrap()).collect())
            .collect();
        let mut hard: Vec<u8> = ch.iter().map(|&l| u8::from(l < 0.0)).collect();
        if self.syndrome_ok(&hard) {
            return Ok(self.finish(hard, 0, true));
        }
        let mut t = Vec::new();
        for it in 1..=self.max_iter {
            for (c, row) in v2c.iter().enumerate() {
                t.clear();
                t.extend(row.iter().map(|&m| (m / 2.0).tanh()));
                for (e, out) in c2v[c].iter_mut().enumerate() {
                    let prod: f64 = t.iter().enumerate().filter(|&(j, _)| j != e).map(|(_, x)| x).product();
                    let p = prod.clamp(-0.999_999_999_999, 0.999_999_999_999);
                    *out = (2.0 * p.atanh()).clamp(-LLR_CAP, LLR_CAP);
                }
            }
            for v in 0..self.n {
                let total: f64 = ch[v] + self.vars[v].iter().zip(&slot[v]).map(|(&c, &s)| c2v[c][s]).sum::<f64>();
                hard[v] = u8::from(total < 0.0);
                for (&c, &s) in self.vars[v].iter().zip(&slot[v]) {
                    v2c[c][s] = (total - c2v[c][s]).clamp(-LLR_CAP, LLR_CAP);
                }
            }
            if self.syndrome_ok(&hard) {
                return Ok(self.finish(hard, it, true));
            }
        }
        Ok(self.finish(hard, self.max_iter, false))
    }

    fn finish(&self, codeword: Vec<u8>, iterations: usize, converged: bool) -> Decoded {
        Decoded {
            info: self.info_cols.iter().map(|&c| codeword[c]).collect(),
            codeword,
            iterations,
            converged,
        }
    }

    /// Header `(n, k)` as u32 followed by the nonzero `(row, col)` pairs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u32(self.n as u32);
        w.u32(self.k as u32);
        for (r, row) in self.checks.iter().enumerate() {
            for &c in row {
                w.u32(r as u32);
                w.u32(c as u32);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let n = r.u32("n")? as usize;
        let k = r.u32("k")? as usize;
        if k == 0 || k >= n {
            return Err(Error::format(4, format!("invalid (n, k) = ({n}, {k})")));
        }
        let mut checks = vec![Vec::new(); n - k];
        while r.remaining() > 0 {
            let at = r.offset();
            let row = r.u32("row")? as usize;
            let col = r.u32("col")? as usize;
            if row >= n - k || col >= n {
                return Err(Error::format(at, format!("entry ({row}, {col}) outside {}x{n}", n - k)));
            }
            if checks[row].contains(&col) {
                return Err(Error::format(at, format!("duplicate entry ({row}, {col})")));
            }
            checks[row].push(col);
        }
        Self::from_checks(n, checks)?
            .ok_or_else(|| Error::format(bytes.len() as u64, "parity-check matrix is rank deficient"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

/// Progressive edge growth: each new edge of a variable goes to the
/// lowest-degree check among those farthest from it in the current graph.
fn peg_checks(n: usize, m: usize, dv: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut vars: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut order: Vec<usize> = (0..m).collect();
    let mut seen_c = vec![usize::MAX; m];
    let mut seen_v = vec![usize::MAX; n];
    let mut stamp = 0usize;
    for v in 0..n {
        for e in 0..dv {
            order.shuffle(&mut rng);
            let candidates: Vec<usize> = if e == 0 {
                order.clone()
            } else {
                stamp += 1;
                let far = bfs_far(v, &checks, &vars, &mut seen_c, &mut seen_v, stamp);
                order.iter().copied().filter(|c| far[*c]).collect()
            };
            let best = candidates
                .iter()
                .copied()
                .filter(|c| !vars[v].contains(c))
                .min_by_key(|&c| checks[c].len())
                .expect("a check outside the variable's neighborhood exists");
            checks[best].push(v);
            vars[v].push(best);
        }
    }
    for row in &mut checks {
        row.sort_unstable();
    }
    checks
}

/// Checks not reached from `v`, or the last level reached if the expansion
/// ends up covering every check.
fn bfs_far(
    v: usize,
    checks: &[Vec<usize>],
    vars: &[Vec<usize>],
    seen_c: &mut [usize],
    seen_v: &mut [usize],
    stamp: usize,
) -> Vec<bool> {
    let m = checks.len();
    let mut frontier: Vec<usize> = Vec::new();
    let mut reached = 0;
    seen_v[v] = stamp;
    for &c in &vars[v] {
        if seen_c[c] != stamp {
            seen_c[c] = stamp;
            frontier.push(c);
            reached += 1;
        }
    }
    loop {
        let mut next = Vec::new();
        for &c in &frontier {
            for &u in &checks[c] {
                if seen_v[u] == stamp {
                    continue;
                }
                seen_v[u] = stamp;
                for &c2 in &vars[u] {
                    if seen_c[c2] != stamp {
                        seen_c[c2] = stamp;
                        next.push(c2);
                    }
                }
            }
        }
        if next.is_empty() {
            return (0..m).map(|c| seen_c[c] != stamp).collect();
        }
        if reached + next.len() == m {
            let mut far = vec![false; m];
            for &c in &next {
                far[c] = true;
            }
            return far;
        }
        reached += next.len();
        frontier = next;
    }
}

fn get_bit(row: &[u64], c: usize) -> bool {
    row[c / 64] >> (c % 64) & 1 == 1
}

/// Reduced row echelon form over GF(2). Returns the pivot column of each
/// row and the reduced rows, or `None` if the rows are dependent.
fn rref(n: usize, checks: &[Vec<usize>]) -> Option<(Vec<usize>, Vec<Vec<u64>>)> {
    let words = n.div_ceil(64);
    let mut rows: Vec<Vec<u64>> = checks
        .iter()
        .map(|r| {
            let mut b = vec![0u64; words];
            for &c in r {
                b[c / 64] ^= 1 << (c % 64);
            }
            b
        })
        .collect();
    let m = rows.len();
    let mut pivots = Vec::with_capacity(m);
    let mut r = 0;
    // Scan from the last column so pivots favor the tail of the codeword.
    for col in (0..n).rev() {
        if r == m {
            break;
        }
        let Some(p) = (r..m).find(|&i| get_bit(&rows[i], col)) else {
            continue;
        };
        rows.swap(r, p);
        let pivot = rows[r].clone();
        for (i, row) in rows.iter_mut().enumerate() {
            if i != r && get_bit(row, col) {
                for (a, b) in row.iter_mut().zip(&pivot) {
                    *a ^= b;
                }
            }
        }
        pivots.push(col);
        r += 1;
    }
    (r == m).then_some((pivots, rows))
}
