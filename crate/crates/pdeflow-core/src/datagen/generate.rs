//! Synthetic trajectory generators with independent oracles: exact spectral
//! advection, a resolved fine-grid pseudo-spectral Burgers solve, and exact
//! heat-kernel diffusion in 2D/3D. Periodic domain [0,1)^d everywhere.

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

use super::container::{DatasetContainer, DatasetHeader, SCHEMA_VERSION};
use super::fft::{fft, freq_index, ifft};
use crate::field::DimType;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("grid rank {got} does not match family dimensionality {expected}")]
    GridRank { expected: usize, got: usize },
    #[error("grid extents must be >= 2, got {0}")]
    GridTooSmall(usize),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Advection,
    Burgers,
    Diffusion2d,
    Diffusion3d,
}

impl Family {
    pub fn dim(self) -> usize {
        match self {
            Family::Advection | Family::Burgers => 1,
            Family::Diffusion2d => 2,
            Family::Diffusion3d => 3,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct GenSpec {
    pub family: Family,
    pub n_traj: usize,
    pub grid: Vec<usize>,
    pub t_steps: usize,
    /// Frame spacing in physical time.
    pub dt: f64,
    /// Advection speed (center value).
    pub beta: f64,
    /// Half-width of the per-trajectory uniform speed spread; zero keeps
    /// every trajectory at exactly `beta`.
    pub beta_spread: f64,
    /// Viscosity / diffusivity.
    pub nu: f64,
    /// Initial conditions superpose Fourier modes with |k_a| <= max_mode.
    pub max_mode: usize,
    /// Independent scalar fields for the diffusion families (1 or 2).
    pub channels: usize,
    pub seed: u64,
}

impl GenSpec {
    pub fn desk(family: Family, seed: u64) -> Self {
        let (n_traj, grid) = match family {
            Family::Advection => (60, vec![128]),
            Family::Burgers => (40, vec![128]),
            Family::Diffusion2d => (30, vec![32, 32]),
            Family::Diffusion3d => (12, vec![16, 16, 16]),
        };
        GenSpec {
            family,
            n_traj,
            grid,
            t_steps: 24,
            dt: match family {
                Family::Advection | Family::Burgers => 0.02,
                _ => 0.05,
            },
            beta: 1.0,
            beta_spread: 0.0,
            nu: match family {
                Family::Burgers => 0.05,
                _ => 0.01,
            },
            max_mode: 4,
            channels: 1,
            seed,
        }
    }

    fn validate(&self) -> Result<(), GenError> {
        let want = self.family.dim();
        if self.grid.len() != want {
            return Err(GenError::GridRank { expected: want, got: self.grid.len() });
        }
        for &g in &self.grid {
            if g < 2 {
                return Err(GenError::GridTooSmall(g));
            }
        }
        if self.n_traj == 0 || self.t_steps == 0 {
            return Err(GenError::NonPositive("n_traj/t_steps"));
        }
        if self.dt <= 0.0 {
            return Err(GenError::NonPositive("dt"));
        }
        if matches!(self.family, Family::Burgers | Family::Diffusion2d | Family::Diffusion3d) && self.nu <= 0.0 {
            return Err(GenError::NonPositive("nu"));
        }
        Ok(())
    }

    pub fn var_names(&self) -> Vec<String> {
        match self.family {
            Family::Advection | Family::Burgers => vec!["Vx".into()],
            _ => {
                if self.channels >= 2 {
                    vec!["u_act".into(), "v_inh".into()]
                } else {
                    vec!["u_act".into()]
                }
            }
        }
    }
}

/// Random real Fourier superposition: a_k cos(2 pi k.x) + b_k sin(2 pi k.x)
/// over half-space modes with |k_a| <= max_mode, amplitude ~ N(0,1)/(1+|k|^2).
#[derive(Clone, Debug)]
pub struct FourierInit {
    pub modes: Vec<(Vec<i64>, f64, f64)>,
}

impl FourierInit {
    pub fn random(dim: usize, max_mode: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut modes = Vec::new();
        let m = max_mode as i64;
        let mut k = vec![-m; dim];
        loop {
            // half-space: first nonzero component positive; k = 0 included
            let first_nz = k.iter().find(|&&v| v != 0);
            let take = match first_nz {
                None => true,
                Some(&v) => v > 0,
            };
            if take {
                let k2: f64 = k.iter().map(|&v| (v * v) as f64).sum();
                let amp = 1.0 / (1.0 + k2);
                let a: f64 = rng.sample::<f64, _>(StandardNormal) * amp;
                let b: f64 = if first_nz.is_none() {
                    0.0
                } else {
                    rng.sample::<f64, _>(StandardNormal) * amp
                };
                modes.push((k.clone(), a, b));
            }
            // odometer increment
            let mut axis = dim;
            loop {
                if axis == 0 {
                    return FourierInit { modes };
                }
                axis -= 1;
                if k[axis] < m {
                    k[axis] += 1;
                    for kk in k.iter_mut().skip(axis + 1) {
                        *kk = -m;
                    }
                    break;
                }
            }
        }
    }

    pub fn eval_1d(&self, x: f64) -> f64 {
        let tau = 2.0 * std::f64::consts::PI;
        self.modes
            .iter()
            .map(|(k, a, b)| {
                let ang = tau * k[0] as f64 * x;
                a * ang.cos() + b * ang.sin()
            })
            .sum()
    }
}

fn header(spec: &GenSpec, phys: BTreeMap<String, f64>) -> DatasetHeader {
    let mut shape = [spec.n_traj, spec.t_steps, 1, 1, 1, spec.var_names().len()];
    for (i, &g) in spec.grid.iter().enumerate() {
        shape[2 + i] = g;
    }
    DatasetHeader {
        schema_version: SCHEMA_VERSION,
        dim_type: DimType::from_u8(spec.family.dim() as u8).unwrap(),
        var_names: spec.var_names(),
        shape,
        dtype: "f32le".into(),
        phys,
    }
}

/// Exact solution of du/dt + beta du/dx = 0: each mode picks up a phase
/// shift beta*t, evaluated directly with zero numerical dissipation.
pub fn gen_advection(spec: &GenSpec) -> Result<DatasetContainer, GenError> {
    spec.validate()?;
    let n = spec.grid[0];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut payload = Vec::with_capacity(spec.n_traj * spec.t_steps * n);
    for _ in 0..spec.n_traj {
        let init = FourierInit::random(1, spec.max_mode, &mut rng);
        let beta = if spec.beta_spread > 0.0 {
            spec.beta + spec.beta_spread * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            spec.beta
        };
        for frame in 0..spec.t_steps {
            let t = frame as f64 * spec.dt;
            for j in 0..n {
                let x = j as f64 / n as f64;
                payload.push(init.eval_1d(x - beta * t) as f32);
            }
        }
    }
    let phys = [("beta".to_string(), spec.beta), ("beta_spread".to_string(), spec.beta_spread)]
        .into_iter()
        .collect();
    Ok(DatasetContainer::new(header(spec, phys), payload))
}

/// Pseudo-spectral RK4 step count for one frame interval under the RK4
/// stability bounds for the viscous and advective spectral radii.
fn burgers_substeps(frame_dt: f64, nu: f64, n_fine: usize, umax: f64, dt_scale: f64) -> usize {
    let kmax = std::f64::consts::PI * n_fine as f64;
    let visc_limit = 2.79 / (nu * kmax * kmax);
    let adv_limit = 2.8 / (kmax * umax.max(1e-6));
    let stable = 0.5 * visc_limit.min(adv_limit) * dt_scale;
    (frame_dt / stable).ceil().max(1.0) as usize
}

/// Method-of-lines viscous Burgers on a fine periodic grid: spectral
/// derivatives, 2/3-rule dealiasing of the nonlinear term, classic RK4 with
/// automatic substepping. Returns the solution at every frame time.
pub fn simulate_burgers(
    u0: &[f64],
    nu: f64,
    frame_dt: f64,
    frames: usize,
    dt_scale: f64,
) -> Vec<Vec<f64>> {
    let n = u0.len();
    let kang: Vec<f64> = (0..n).map(|j| 2.0 * std::f64::consts::PI * freq_index(j, n) as f64).collect();
    let cutoff = (n as i64) / 3;
    let rhs = |u: &[f64]| -> Vec<f64> {
        let mut uh: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft(&mut uh);
        let mut dxh: Vec<Complex64> = uh
            .iter()
            .zip(&kang)
            .map(|(&c, &k)| c * Complex64::new(0.0, k))
            .collect();
        ifft(&mut dxh);
        let mut nl: Vec<Complex64> = dxh
            .iter()
            .zip(u.iter())
            .map(|(&ux, &uv)| Complex64::new(uv * ux.re, 0.0))
            .collect();
        fft(&mut nl);
        let mut out: Vec<Complex64> = nl
            .iter()
            .zip(uh.iter())
            .enumerate()
            .map(|(j, (&nlj, &uhj))| {
                let k = kang[j];
                let nl_term = if freq_index(j, n).abs() > cutoff {
                    Complex64::new(0.0, 0.0)
                } else {
                    nlj
                };
                -nl_term - uhj * (nu * k * k)
            })
            .collect();
        ifft(&mut out);
        out.iter().map(|c| c.re).collect()
    };

    let mut u = u0.to_vec();
    let mut out = Vec::with_capacity(frames);
    out.push(u.clone());
    for _ in 1..frames {
        let umax = u.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let sub = burgers_substeps(frame_dt, nu, n, umax, dt_scale);
        let h = frame_dt / sub as f64;
        for _ in 0..sub {
            let k1 = rhs(&u);
            let u2: Vec<f64> = u.iter().zip(&k1).map(|(&a, &b)| a + 0.5 * h * b).collect();
            let k2 = rhs(&u2);
            let u3: Vec<f64> = u.iter().zip(&k2).map(|(&a, &b)| a + 0.5 * h * b).collect();
            let k3 = rhs(&u3);
            let u4: Vec<f64> = u.iter().zip(&k3).map(|(&a, &b)| a + h * b).collect();
            let k4 = rhs(&u4);
            for (i, v) in u.iter_mut().enumerate() {
                *v += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(u.clone());
    }
    out
}

/// Viscous Burgers trajectories solved on a 4x finer grid and subsampled;
/// the resolved fine solve is the oracle for this dataset.
pub fn gen_burgers(spec: &GenSpec) -> Result<DatasetContainer, GenError> {
    spec.validate()?;
    if spec.nu <= 0.0 {
        return Err(GenError::NonPositive("nu"));
    }
    let n = spec.grid[0];
    let n_fine = 4 * n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut payload = Vec::with_capacity(spec.n_traj * spec.t_steps * n);
    for _ in 0..spec.n_traj {
        let init = FourierInit::random(1, spec.max_mode, &mut rng);
        let u0: Vec<f64> = (0..n_fine).map(|j| init.eval_1d(j as f64 / n_fine as f64)).collect();
        let frames = simulate_burgers(&u0, spec.nu, spec.dt, spec.t_steps, 1.0);
        for frame in &frames {
            for j in 0..n {
                payload.push(frame[4 * j] as f32);
            }
        }
    }
    let phys = [("nu".to_string(), spec.nu)].into_iter().collect();
    Ok(DatasetContainer::new(header(spec, phys), payload))
}

/// Exact heat-equation evolution of one Fourier superposition: every mode
/// decays by exp(-4 pi^2 nu |k|^2 t). Returns (frames * cells) in f64.
pub fn diffusion_frames(init: &FourierInit, grid: &[usize], nu: f64, dt: f64, frames: usize) -> Vec<f64> {
    let cells: usize = grid.iter().product();
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = vec![0f64; frames * cells];
    for (k, a, b) in &init.modes {
        // per-cell phase via per-axis tables
        let mut re = vec![1.0f64; cells];
        let mut im = vec![0.0f64; cells];
        let mut stride = cells;
        for (axis, &g) in grid.iter().enumerate() {
            stride /= g;
            let table: Vec<(f64, f64)> = (0..g)
                .map(|j| {
                    let ang = tau * k[axis] as f64 * j as f64 / g as f64;
                    (ang.cos(), ang.sin())
                })
                .collect();
            for cell in 0..cells {
                let j = (cell / stride) % g;
                let (c, s) = table[j];
                let (r0, i0) = (re[cell], im[cell]);
                re[cell] = r0 * c - i0 * s;
                im[cell] = r0 * s + i0 * c;
            }
        }
        let k2: f64 = k.iter().map(|&v| (v * v) as f64).sum();
        let contrib: Vec<f64> = re.iter().zip(&im).map(|(&r, &i)| a * r + b * i).collect();
        for frame in 0..frames {
            let t = frame as f64 * dt;
            let decay = (-4.0 * std::f64::consts::PI * std::f64::consts::PI * nu * k2 * t).exp();
            let base = frame * cells;
            for cell in 0..cells {
                out[base + cell] += decay * contrib[cell];
            }
        }
    }
    out
}

/// Diffusion trajectories from random initial superpositions; one or two
/// independent channels.
pub fn gen_diffusion(spec: &GenSpec) -> Result<DatasetContainer, GenError> {
    spec.validate()?;
    let dim = spec.family.dim();
    assert!(dim == 2 || dim == 3, "diffusion families are 2D/3D");
    let channels = spec.channels.clamp(1, 2);
    let cells: usize = spec.grid.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut payload = vec![0f32; spec.n_traj * spec.t_steps * cells * channels];

    for traj in 0..spec.n_traj {
        for ch in 0..channels {
            let init = FourierInit::random(dim, spec.max_mode, &mut rng);
            let frames = diffusion_frames(&init, &spec.grid, spec.nu, spec.dt, spec.t_steps);
            for frame in 0..spec.t_steps {
                let base = ((traj * spec.t_steps) + frame) * cells * channels;
                for cell in 0..cells {
                    payload[base + cell * channels + ch] += frames[frame * cells + cell] as f32;
                }
            }
        }
    }
    let mut spec_ch = spec.clone();
    spec_ch.channels = channels;
    let phys = [("nu".to_string(), spec.nu)].into_iter().collect();
    Ok(DatasetContainer::new(header(&spec_ch, phys), payload))
}

/// Dispatch on family.
pub fn generate(spec: &GenSpec) -> Result<DatasetContainer, GenError> {
    match spec.family {
        Family::Advection => gen_advection(spec),
        Family::Burgers => gen_burgers(spec),
        Family::Diffusion2d | Family::Diffusion3d => gen_diffusion(spec),
    }
}
