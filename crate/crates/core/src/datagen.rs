//! Synthetic sparse precision matrices, Gaussian sampling and the on-disk
//! dataset format.
//!
//! A dataset directory holds `meta.json` plus one little-endian `f64` blob per
//! entry (`entry_00000.bin`: the true precision then the sample covariance,
//! both `p²` row-major). With `keep_samples` the raw `n × p` draws are stored
//! next to it as `samples_00000.bin`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, SymMatrix};
use crate::rng::{self, Rng64};
use crate::{Error, Result};

pub const DATASET_FORMAT: &str = "SPODNET-DS-1";

const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub p: usize,
    /// Samples drawn per matrix.
    pub n: usize,
    /// Number of matrices.
    pub num: usize,
    /// Probability that a strictly-lower factor entry is zero.
    pub alpha: f64,
    #[serde(default = "default_diag_boost")]
    pub diag_boost: f64,
    pub seed: u64,
}

fn default_diag_boost() -> f64 {
    0.1
}

impl GenConfig {
    pub fn new(p: usize, n: usize, num: usize, alpha: f64, seed: u64) -> Self {
        Self {
            p,
            n,
            num,
            alpha,
            diag_boost: default_diag_boost(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::Config(format!(
                "p must be at least 2, got {}",
                self.p
            )));
        }
        if self.n < 1 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.diag_boost >= 0.0) || !self.diag_boost.is_finite() {
            return Err(Error::Config(format!(
                "diag_boost must be non-negative, got {}",
                self.diag_boost
            )));
        }
        Ok(())
    }
}

/// Raw draws, `n` rows of length `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl Samples {
    pub fn new(n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * p {
            return Err(Error::Dimension(format!(
                "{} values for {n} samples of dimension {p}",
                data.len()
            )));
        }
        Ok(Self { n, p, data })
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.p..(k + 1) * self.p]
    }

    /// Rows `range` as a new sample block.
    pub fn rows(&self, range: std::ops::Range<usize>) -> Samples {
        Samples {
            n: range.len(),
            p: self.p,
            data: self.data[range.start * self.p..range.end * self.p].to_vec(),
        }
    }

    /// All rows except `range`.
    pub fn without_rows(&self, range: std::ops::Range<usize>) -> Samples {
        let mut data = self.data[..range.start * self.p].to_vec();
        data.extend_from_slice(&self.data[range.end * self.p..]);
        Samples {
            n: self.n - range.len(),
            p: self.p,
            data,
        }
    }

    /// Uncentred second moment `XᵀX / n`.
    pub fn covariance(&self) -> Result<SymMatrix> {
        if self.n == 0 {
            return Err(Error::Dimension("covariance of zero samples".into()));
        }
        let p = self.p;
        let mut s = vec![0.0; p * p];
        for k in 0..self.n {
            let x = self.row(k);
            for r in 0..p {
                if x[r] == 0.0 {
                    continue;
                }
                for c in r..p {
                    s[r * p + c] += x[r] * x[c];
                }
            }
        }
        let inv_n = 1.0 / self.n as f64;
        for r in 0..p {
            for c in r..p {
                let v = s[r * p + c] * inv_n;
                s[r * p + c] = v;
                s[c * p + r] = v;
            }
        }
        SymMatrix::new(p, s)
    }
}

/// Sparse SPD matrix `P(LᵀL)Pᵀ + diag_boost·I` with `L` unit-lower (diagonal
/// −1) and off-diagonal entries zero with probability `alpha`, otherwise in
/// `[−0.9, −0.1]`; `P` is a uniformly random permutation.
pub fn make_sparse_spd(
    p: usize,
    alpha: f64,
    diag_boost: f64,
    rng: &mut Rng64,
) -> Result<SymMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let mut l = vec![0.0; p * p];
    for r in 0..p {
        l[r * p + r] = -1.0;
        for c in 0..r {
            let zero = rng.random::<f64>() < alpha;
            let magnitude: f64 = rng.random_range(0.1..=0.9);
            if !zero {
                l[r * p + c] = -magnitude;
            }
        }
    }
    let mut perm: Vec<usize> = (0..p).collect();
    perm.shuffle(rng);

    // (LᵀL)_ab = Σ_k L_ka L_kb
    let mut ltl = vec![0.0; p * p];
    for k in 0..p {
        let row = &l[k * p..(k + 1) * p];
        for a in 0..=k {
            if row[a] == 0.0 {
                continue;
            }
            for b in 0..=k {
                ltl[a * p + b] += row[a] * row[b];
            }
        }
    }
    let mut theta = vec![0.0; p * p];
    for a in 0..p {
        for b in 0..p {
            theta[a * p + b] = ltl[perm[a] * p + perm[b]];
        }
        theta[a * p + a] += diag_boost;
    }
    SymMatrix::new(p, theta)
}

/// `n` centred Gaussian draws with covariance `Θ⁻¹`.
pub fn draw_samples(theta: &SymMatrix, n: usize, rng: &mut Rng64) -> Result<Samples> {
    let chol = linalg::cholesky(theta)?;
    let p = theta.dim();
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        // Θ = L·Lᵀ, so x = L⁻ᵀz has covariance Θ⁻¹
        data.extend(chol.solve_upper(&z));
    }
    Samples::new(n, p, data)
}

/// Empirical covariance `(1/n) Σ xxᵀ` of `n` draws from `N(0, Θ⁻¹)`.
pub fn sample_covariance(theta: &SymMatrix, n: usize, rng: &mut Rng64) -> Result<SymMatrix> {
    draw_samples(theta, n, rng)?.covariance()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub theta_true: SymMatrix,
    pub s: SymMatrix,
    pub samples: Option<Samples>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn p(&self) -> usize {
        self.config.p
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_samples(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.samples.is_some())
    }
}

/// Entry `index` of the dataset described by `cfg`.
pub fn build_entry(cfg: &GenConfig, index: usize, keep_samples: bool) -> Result<Entry> {
    let mut rng = rng::rng_from_seed(rng::child_seed(cfg.seed, index as u64));
    let theta_true = make_sparse_spd(cfg.p, cfg.alpha, cfg.diag_boost, &mut rng)?;
    let samples = draw_samples(&theta_true, cfg.n, &mut rng)?;
    Ok(Entry {
        s: samples.covariance()?,
        theta_true,
        samples: keep_samples.then_some(samples),
    })
}

pub fn build_dataset(cfg: &GenConfig, keep_samples: bool) -> Result<Dataset> {
    cfg.validate()?;
    #[cfg(feature = "parallel")]
    let entries = {
        use rayon::prelude::*;
        (0..cfg.num)
            .into_par_iter()
            .map(|k| build_entry(cfg, k, keep_samples))
            .collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let entries = (0..cfg.num)
        .map(|k| build_entry(cfg, k, keep_samples))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        entries,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    config: GenConfig,
    num_entries: usize,
    keep_samples: bool,
}

fn write_f64s(path: &Path, parts: &[&[f64]]) -> Result<()> {
    let len: usize = parts.iter().map(|p| p.len()).sum();
    let mut bytes = Vec::with_capacity(len * 8);
    for part in parts {
        for x in *part {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn entry_file(k: usize) -> String {
    format!("entry_{k:05}.bin")
}

fn samples_file(k: usize) -> String {
    format!("samples_{k:05}.bin")
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let keep_samples = ds.has_samples();
    let meta = Meta {
        format: DATASET_FORMAT.into(),
        config: ds.config.clone(),
        num_entries: ds.entries.len(),
        keep_samples,
    };
    fs::write(
        dir.join(META_FILE),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    for (k, e) in ds.entries.iter().enumerate() {
        write_f64s(&dir.join(entry_file(k)), &[e.theta_true.data(), e.s.data()])?;
        if let (true, Some(samples)) = (keep_samples, &e.samples) {
            write_f64s(&dir.join(samples_file(k)), &[&samples.data])?;
        }
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
    if meta.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "expected format {DATASET_FORMAT:?}, found {:?}",
            meta.format
        )));
    }
    meta.config.validate()?;
    let p = meta.config.p;
    let mut entries = Vec::with_capacity(meta.num_entries);
    for k in 0..meta.num_entries {
        let mut data = read_f64s(&dir.join(entry_file(k)), 2 * p * p)?;
        let s = data.split_off(p * p);
        let samples = if meta.keep_samples {
            let n = meta.config.n;
            Some(Samples::new(
                n,
                p,
                read_f64s(&dir.join(samples_file(k)), n * p)?,
            )?)
        } else {
            None
        };
        entries.push(Entry {
            theta_true: SymMatrix::new(p, data)?,
            s: SymMatrix::new(p, s)?,
            samples,
        });
    }
    Ok(Dataset {
        config: meta.config,
        entries,
    })
}
