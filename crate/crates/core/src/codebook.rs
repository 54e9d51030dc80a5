//! Token codebooks and the semantic relevance matrix.
//!
//! The relevance between tokens `i` and `j` is `1 - (D_ij - min D) / (max D - min D)`
//! where `D` is the matrix of pairwise L2 distances between embeddings. The
//! normalization runs over the full matrix, zero diagonal included, so the
//! minimum is always 0 and `R = 1 - D / max D`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::io::{read_file, write_file, Reader, Writer};
use crate::{Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 8] = b"SWCB\x01\x00\x00\x00";

/// Frozen `K x D` embedding table. Row `i` is the embedding of token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    embeddings: Vec<f64>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, embeddings: Vec<f64>) -> Result<Self> {
        if k < 2 {
            return Err(Error::Codebook(format!("K must be ≥ 2, got {k}")));
        }
        if d < 1 {
            return Err(Error::Codebook("D must be ≥ 1".into()));
        }
        if embeddings.len() != k * d {
            return Err(Error::LengthMismatch {
                expected: k * d,
                actual: embeddings.len(),
            });
        }
        if let Some(pos) = embeddings.iter().position(|v| !v.is_finite()) {
            return Err(Error::Codebook(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self { k, d, embeddings })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn embedding(&self, token: usize) -> &[f64] {
        &self.embeddings[token * self.d..(token + 1) * self.d]
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.embedding(a)
            .iter()
            .zip(self.embedding(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Reads an SWCB1 file. Values are stored as f32 and widened losslessly.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CODEBOOK_MAGIC)?;
        let k_off = r.offset();
        let k = r.u32("K")? as usize;
        let d = r.u32("D")? as usize;
        if k < 2 {
            return Err(Error::format(k_off, format!("K must be ≥ 2, got {k}")));
        }
        if d < 1 {
            return Err(Error::format(k_off + 4, "D must be ≥ 1"));
        }
        let mut embeddings = Vec::with_capacity(k * d);
        for row in 0..k {
            for col in 0..d {
                let off = r.offset();
                let v = r.f32("embedding value")?;
                if !v.is_finite() {
                    return Err(Error::format(
                        off,
                        format!("non-finite value at row {row}, column {col}"),
                    ));
                }
                embeddings.push(v as f64);
            }
        }
        r.finish()?;
        Ok(Self { k, d, embeddings })
    }

    /// Serializes as SWCB1. Values are narrowed to f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CODEBOOK_MAGIC);
        w.u32(self.k as u32);
        w.u32(self.d as u32);
        for &v in &self.embeddings {
            w.f32(v as f32);
        }
        w.buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    /// Synthetic codebook with `clusters` Gaussian blobs. Cluster centres are
    /// i.i.d. unit normal; members are offset by `spread`-scaled noise. Token
    /// `i` belongs to cluster `i % clusters`. Values are rounded through f32 so
    /// a saved copy reloads identically.
    pub fn planted_clusters(
        k: usize,
        d: usize,
        clusters: usize,
        spread: f64,
        seed: u64,
    ) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::InvalidParameter("clusters must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let centres: Vec<f64> = (0..clusters * d).map(|_| normal.sample(&mut rng)).collect();
        let mut e = Vec::with_capacity(k * d);
        for i in 0..k {
            let c = i % clusters;
            for j in 0..d {
                let v = centres[c * d + j] + spread * normal.sample(&mut rng);
                e.push(v as f32 as f64);
            }
        }
        Self::new(k, d, e)
    }

    /// Clustered codebook with equidistant centres: cluster `c` sits at
    /// `separation * e_c`, members are offset by `spread`-scaled Gaussian
    /// noise. Token `i` belongs to cluster `i % clusters`. Needs
    /// `clusters <= d`.
    pub fn orthogonal_clusters(
        k: usize,
        d: usize,
        clusters: usize,
        separation: f64,
        spread: f64,
        seed: u64,
    ) -> Result<Self> {
        if clusters == 0 || clusters > d {
            return Err(Error::InvalidParameter(format!("need 1 ≤ clusters ≤ D, got {clusters} for D = {d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut e = Vec::with_capacity(k * d);
        for i in 0..k {
            let c = i % clusters;
            for j in 0..d {
                let centre = if j == c { separation } else { 0.0 };
                e.push((centre + spread * normal.sample(&mut rng)) as f32 as f64);
            }
        }
        Self::new(k, d, e)
    }

    /// Cluster label used by [`Codebook::planted_clusters`].
    pub fn planted_cluster_of(token: usize, clusters: usize) -> usize {
        token % clusters
    }
}

/// Dense row-major `n x n` matrix of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::LengthMismatch {
                expected: n * n,
                actual: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `M[i][j] = ||c_i - c_j||`, computed in double precision.
pub fn pairwise_distances(cb: &Codebook) -> SquareMatrix {
    let k = cb.k();
    let mut data = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let dij = cb.distance(i, j);
            data[i * k + j] = dij;
            data[j * k + i] = dij;
        }
    }
    SquareMatrix { n: k, data }
}

/// Min-max normalized semantic relevance, `R[i][j] = 1` for identical tokens
/// and `0` for the most distant pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix(SquareMatrix);

impl RelevanceMatrix {
    pub fn k(&self) -> usize {
        self.0.n()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.0
    }

    pub fn from_codebook(cb: &Codebook) -> Result<Self> {
        relevance_matrix(&pairwise_distances(cb))
    }

    /// Wraps a hand-built relevance table as-is (loss fixtures, ablations).
    pub fn from_raw(m: SquareMatrix) -> Self {
        Self(m)
    }
}

pub fn relevance_matrix(m: &SquareMatrix) -> Result<RelevanceMatrix> {
    if m.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distance matrix"));
    }
    let lo = m.min();
    let hi = m.max();
    let span = hi - lo;
    if span <= 0.0 {
        return Err(Error::DegenerateCodebook);
    }
    let data = m.as_slice().iter().map(|&v| 1.0 - (v - lo) / span).collect();
    Ok(RelevanceMatrix(SquareMatrix { n: m.n(), data }))
}
