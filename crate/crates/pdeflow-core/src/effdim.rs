//! Effective-dimension diagnostics for PDE patch vectors: sample native-axis
//! patches, RMS-normalize, take the covariance eigen-spectrum, and summarize
//! with the participation ratio and EV90. These are the numbers that justify
//! predicting the clean field instead of the noise.

use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::datagen::DatasetContainer;
use crate::field::{DimType, PatchSize};
use crate::tensor::matmul_at_into;

#[derive(Debug, Error)]
pub enum EffDimError {
    #[error("dataset too small: {0}")]
    InsufficientData(String),
    #[error("need at least 2 rows for a covariance, got {0}")]
    TooFewRows(usize),
    #[error("spectrum is identically zero")]
    ZeroSpectrum,
    #[error("eigenvalue iteration failed to converge")]
    NoConvergence,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which population of patch vectors to diagnose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// The data patches themselves.
    X,
    /// Fresh standard normal draws of the same shape.
    Eps,
    /// The rectified-flow velocity v = x - eps.
    V,
}

impl Target {
    pub fn label(self) -> &'static str {
        match self {
            Target::X => "x",
            Target::Eps => "eps",
            Target::V => "v",
        }
    }
}

/// One row of the diagnostics table.
#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub dim_type: DimType,
    pub v: usize,
    pub target: Target,
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    pub pr: f64,
    pub ev90: usize,
    pub ev90_over_v: f64,
}

/// Draws n patch vectors over native axes and native channels only:
/// 1D uses (p_t, p_h), 2D (p_t, p_h, p_w), 3D the full patch.
pub fn sample_patch_vectors(
    dataset: &DatasetContainer,
    n: usize,
    target: Target,
    patch: PatchSize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, EffDimError> {
    let h = &dataset.header;
    let dim = h.dim_type.as_usize();
    let spatial = h.spatial();
    let mut pe = vec![patch.t, patch.h];
    if dim >= 2 {
        pe.push(patch.w);
    }
    if dim >= 3 {
        pe.push(patch.d);
    }
    let frames = h.frames();
    if h.n_traj() == 0 || frames < patch.t {
        return Err(EffDimError::InsufficientData("no trajectories or too few frames".into()));
    }
    for (axis, (&g, &p)) in spatial.iter().zip(pe[1..].iter()).enumerate() {
        if g < p {
            return Err(EffDimError::InsufficientData(format!(
                "spatial axis {axis} extent {g} below patch extent {p}"
            )));
        }
    }
    let c = h.n_vars();
    let v_len: usize = pe.iter().product::<usize>() * c;
    let cells = h.cells_per_frame();
    let strides: Vec<usize> = {
        // row-major strides over (X,Y,Z) in cells
        let mut s = vec![0; 3];
        s[2] = 1;
        s[1] = h.shape[4];
        s[0] = h.shape[3] * h.shape[4];
        s
    };
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let traj = rng.random_range(0..h.n_traj());
        let t0 = rng.random_range(0..=frames - patch.t);
        let mut origins = Vec::with_capacity(dim);
        for (axis, &p) in pe[1..].iter().enumerate() {
            origins.push(rng.random_range(0..=spatial[axis] - p));
        }
        let mut row = Vec::with_capacity(v_len);
        let base = traj * frames * cells * c;
        // scan order (t, native axes..., channel)
        let mut cursor = vec![0usize; dim];
        for dt in 0..patch.t {
            loop {
                let mut cell = 0usize;
                for (axis, &off) in cursor.iter().enumerate() {
                    cell += (origins[axis] + off) * strides[axis];
                }
                let idx = base + ((t0 + dt) * cells + cell) * c;
                for ch in 0..c {
                    let x = dataset.payload[idx + ch] as f64;
                    row.push(match target {
                        Target::X => x,
                        Target::Eps => rng.sample::<f64, _>(StandardNormal),
                        Target::V => x - rng.sample::<f64, _>(StandardNormal),
                    });
                }
                // odometer over the native spatial offsets
                let mut axis = dim;
                let mut done = true;
                while axis > 0 {
                    axis -= 1;
                    if cursor[axis] + 1 < pe[axis + 1] {
                        cursor[axis] += 1;
                        for cc in cursor.iter_mut().skip(axis + 1) {
                            *cc = 0;
                        }
                        done = false;
                        break;
                    }
                }
                if done {
                    cursor.iter_mut().for_each(|ccc| *ccc = 0);
                    break;
                }
            }
        }
        debug_assert_eq!(row.len(), v_len);
        rows.push(row);
    }
    Ok(rows)
}

/// Divides each row by its root-mean-square; all-zero rows are dropped with
/// a warning on stderr.
pub fn rms_normalize_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    let mut skipped = 0usize;
    for row in rows {
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        if ms == 0.0 {
            skipped += 1;
            continue;
        }
        let rms = ms.sqrt();
        out.push(row.iter().map(|v| v / rms).collect());
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} all-zero patch vectors during RMS normalization");
    }
    out
}

/// Eigenvalues of the mean-centered sample covariance, sorted descending.
pub fn eigenspectrum(rows: &[Vec<f64>]) -> Result<Vec<f64>, EffDimError> {
    let n = rows.len();
    if n < 2 {
        return Err(EffDimError::TooFewRows(n));
    }
    let v = rows[0].len();
    let mut mean = vec![0f64; v];
    for row in rows {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = Vec::with_capacity(n * v);
    for row in rows {
        for (c, (&x, &m)) in row.iter().zip(&mean).enumerate() {
            let _ = c;
            centered.push(x - m);
        }
    }
    let mut cov = vec![0f64; v * v];
    matmul_at_into(&mut cov, &centered, &centered, n, v, v, false);
    let scale = 1.0 / (n as f64 - 1.0);
    for c in cov.iter_mut() {
        *c *= scale;
    }
    let mut evals = sym_eigenvalues(&mut cov, v)?;
    evals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(evals)
}

/// PR = (sum lambda)^2 / sum lambda^2.
pub fn participation_ratio(evals: &[f64]) -> Result<f64, EffDimError> {
    let s1: f64 = evals.iter().sum();
    let s2: f64 = evals.iter().map(|l| l * l).sum();
    if s2 <= 0.0 {
        return Err(EffDimError::ZeroSpectrum);
    }
    Ok(s1 * s1 / s2)
}

/// Smallest k such that the top-k eigenvalues reach 90% of total variance.
pub fn ev90(evals: &[f64]) -> Result<usize, EffDimError> {
    let total: f64 = evals.iter().sum();
    if total <= 0.0 {
        return Err(EffDimError::ZeroSpectrum);
    }
    let mut acc = 0.0;
    for (i, &l) in evals.iter().enumerate() {
        acc += l;
        if acc >= 0.9 * total {
            return Ok(i + 1);
        }
    }
    Ok(evals.len())
}

#[derive(Clone, Debug)]
pub struct DiagnoseConfig {
    pub n_samples: usize,
    pub patch: PatchSize,
    /// Smaller 3D diagnostics patch for desk-scale grids; with V close to
    /// or above n the sample spectrum of white noise flattens well below
    /// V (Marchenko-Pastur), so the patch is kept small enough that
    /// PR(eps)/V stays near 1.
    pub patch_3d_override: Option<PatchSize>,
    pub seed: u64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            n_samples: 6000,
            patch: PatchSize::default(),
            patch_3d_override: Some(PatchSize { t: 2, h: 4, w: 4, d: 4 }),
            seed: 0,
        }
    }
}

impl DiagnoseConfig {
    pub fn patch_for(&self, dim: DimType) -> PatchSize {
        match (dim, self.patch_3d_override) {
            (DimType::Three, Some(p)) => p,
            _ => self.patch,
        }
    }
}

/// Full pipeline per (dataset, target): sample, normalize, eigenspectrum,
/// PR/EV90. One report row per cell.
pub fn diagnose(datasets: &[DatasetContainer], cfg: &DiagnoseConfig) -> Result<Vec<SpectrumReport>, EffDimError> {
    let mut out = Vec::new();
    for ds in datasets {
        let dim = ds.header.dim_type;
        let patch = cfg.patch_for(dim);
        for target in [Target::X, Target::Eps, Target::V] {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (dim.as_usize() as u64) << 8 ^ target_tag(target));
            let rows = sample_patch_vectors(ds, cfg.n_samples, target, patch, &mut rng)?;
            let v = rows.first().map(|r| r.len()).unwrap_or(0);
            let normed = rms_normalize_rows(&rows);
            let evals = eigenspectrum(&normed)?;
            let pr = participation_ratio(&evals)?;
            let k90 = ev90(&evals)?;
            out.push(SpectrumReport {
                dim_type: dim,
                v,
                target,
                ev90_over_v: k90 as f64 / v as f64,
                eigenvalues: evals,
                pr,
                ev90: k90,
            });
        }
    }
    Ok(out)
}

fn target_tag(t: Target) -> u64 {
    match t {
        Target::X => 1,
        Target::Eps => 2,
        Target::V => 3,
    }
}

/// Tab-separated table with columns Dim, V, Target, PR, EV90, EV90/V.
pub fn write_report(path: &Path, reports: &[SpectrumReport]) -> Result<(), EffDimError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "dim\tV\ttarget\tPR\tEV90\tEV90_over_V")?;
    for r in reports {
        writeln!(
            f,
            "{}D\t{}\t{}\t{:.4}\t{}\t{:.4}",
            r.dim_type.as_usize(),
            r.v,
            r.target.label(),
            r.pr,
            r.ev90,
            r.ev90_over_v
        )?;
    }
    Ok(())
}

/// Log-scale spectrum series for plotting: one line per eigenvalue.
pub fn write_spectra(path: &Path, reports: &[SpectrumReport]) -> Result<(), EffDimError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "dim\ttarget\tindex\teigenvalue")?;
    for r in reports {
        for (i, &l) in r.eigenvalues.iter().enumerate() {
            writeln!(f, "{}D\t{}\t{}\t{:e}", r.dim_type.as_usize(), r.target.label(), i, l)?;
        }
    }
    Ok(())
}

/// Eigenvalues of a dense symmetric matrix: Householder tridiagonalization
/// followed by implicit-shift QL. The matrix buffer is consumed as scratch.
pub fn sym_eigenvalues(a: &mut [f64], n: usize) -> Result<Vec<f64>, EffDimError> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![a[0]]);
    }
    let mut d = vec![0f64; n];
    let mut e = vec![0f64; n];

    // Householder reduction to tridiagonal (no eigenvector accumulation)
    for k in 0..n - 2 {
        let mut sigma = 0.0;
        for i in k + 1..n {
            sigma += a[i * n + k] * a[i * n + k];
        }
        let x0 = a[(k + 1) * n + k];
        if sigma <= 1e-300 {
            e[k] = x0;
            continue;
        }
        let alpha = if x0 >= 0.0 { -sigma.sqrt() } else { sigma.sqrt() };
        let u_norm2 = sigma - alpha * x0;
        if u_norm2 <= 1e-300 {
            e[k] = x0;
            continue;
        }
        let beta = 1.0 / u_norm2;
        let mut u = vec![0f64; n];
        u[k + 1] = x0 - alpha;
        for i in k + 2..n {
            u[i] = a[i * n + k];
        }
        // p = beta * A u over the trailing block
        let mut p = vec![0f64; n];
        for i in k + 1..n {
            let mut acc = 0.0;
            for j in k + 1..n {
                acc += a[i * n + j] * u[j];
            }
            p[i] = beta * acc;
        }
        let mut kdot = 0.0;
        for i in k + 1..n {
            kdot += u[i] * p[i];
        }
        let kappa = 0.5 * beta * kdot;
        for i in k + 1..n {
            p[i] -= kappa * u[i];
        }
        // A <- A - u q^T - q u^T on the trailing block
        for i in k + 1..n {
            for j in k + 1..n {
                a[i * n + j] -= u[i] * p[j] + p[i] * u[j];
            }
        }
        a[(k + 1) * n + k] = alpha;
        a[k * n + (k + 1)] = alpha;
        for i in k + 2..n {
            a[i * n + k] = 0.0;
            a[k * n + i] = 0.0;
        }
        e[k] = alpha;
    }
    e[n - 2] = a[(n - 1) * n + (n - 2)];
    for i in 0..n {
        d[i] = a[i * n + i];
    }

    // implicit-shift QL on the tridiagonal (d, e)
    ql_implicit(&mut d, &mut e)?;
    Ok(d)
}

fn ql_implicit(d: &mut [f64], e: &mut [f64]) -> Result<(), EffDimError> {
    let n = d.len();
    // e[i] couples d[i] and d[i+1]; shift into the 1.. layout QL expects
    let mut sub = vec![0f64; n];
    sub[..n - 1].copy_from_slice(&e[..n - 1]);
    // absolute floor so clusters of (near-)zero eigenvalues still deflate
    let anorm = d
        .iter()
        .zip(sub.iter())
        .map(|(a, b)| a.abs() + b.abs())
        .fold(0.0f64, f64::max);
    let floor = f64::EPSILON * anorm.max(f64::MIN_POSITIVE);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if sub[m].abs() <= f64::EPSILON * dd + floor {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 100 {
                return Err(EffDimError::NoConvergence);
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * sub[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + sub[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0f64;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * sub[i];
                let b = c * sub[i];
                r = f.hypot(g);
                if i + 1 < n {
                    sub[i + 1] = r;
                }
                if r == 0.0 {
                    d[i + 1] -= p;
                    sub[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                if i == l {
                    d[l] -= p;
                    sub[l] = g;
                    sub[m] = 0.0;
                }
            }
        }
    }
    Ok(())
}
