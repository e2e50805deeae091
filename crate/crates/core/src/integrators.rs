//! One-step maps for `dX = v(X) dt + σ dW`.
//!
//! The splitting schemes solve the deterministic part with a sequence of
//! shears, each moving one coordinate using the others (already-updated
//! coordinates first), then add the Brownian increment. For a field whose
//! component `i` does not depend on `x^i` every shear has unit Jacobian, so
//! the deterministic map preserves volume. In two dimensions with
//! `v = (-f(q), g(p))` this is exactly the symplectic Euler splitting
//!
//! ```text
//! p1 = p0 - f(q0) Δt + σ n_p
//! q1 = q0 + g(p0 - f(q0) Δt) Δt + σ n_q
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flows::{SeparableFlow2D, VelocityField, MAX_DIM};
use crate::rng::NoiseDraw;

pub const SCHEME_NAMES: [&str; 3] = ["symplectic", "volume-preserving", "euler"];

/// Time step and noise amplitude. The splitting parameter is fixed at 1
/// (fully explicit).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    dt: f64,
    sigma: f64,
}

impl IntegratorConfig {
    pub fn new(dt: f64, sigma: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
        }
        Ok(Self { dt, sigma })
    }

    /// Config with molecular diffusivity `d0 = σ²/2`.
    pub fn from_d0(dt: f64, d0: f64) -> Result<Self> {
        if !(d0 >= 0.0) {
            return Err(Error::InvalidArgument(format!("d0 must be non-negative, got {d0}")));
        }
        Self::new(dt, (2.0 * d0).sqrt())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn d0(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }

    pub fn alpha(&self) -> f64 {
        1.0
    }

    pub fn with_sigma(self, sigma: f64) -> Result<Self> {
        Self::new(self.dt, sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Explicit splitting; on fields of dimension above two it is the
    /// volume-preserving splitting.
    Symplectic,
    VolumePreserving,
    Euler,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Symplectic => "symplectic",
            Scheme::VolumePreserving => "volume-preserving",
            Scheme::Euler => "euler",
        }
    }

    pub(crate) fn is_splitting(&self) -> bool {
        !matches!(self, Scheme::Euler)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symplectic" => Ok(Scheme::Symplectic),
            "volume-preserving" => Ok(Scheme::VolumePreserving),
            "euler" => Ok(Scheme::Euler),
            _ => Err(Error::UnknownScheme {
                name: s.to_string(),
                known: SCHEME_NAMES.join(", "),
            }),
        }
    }
}

/// Deterministic sequential shears, in place.
#[inline(always)]
pub(crate) fn splitting_drift<F: VelocityField + ?Sized>(field: &F, x: &mut [f64], dt: f64) {
    for i in 0..x.len() {
        let v = field.component(i, x);
        x[i] += dt * v;
    }
}

/// Deterministic explicit Euler update, in place.
#[inline(always)]
pub(crate) fn euler_drift<F: VelocityField + ?Sized>(field: &F, x: &mut [f64], dt: f64) {
    let d = x.len();
    let mut v = [0.0; MAX_DIM];
    for (i, vi) in v.iter_mut().enumerate().take(d) {
        *vi = field.component(i, x);
    }
    for i in 0..d {
        x[i] += dt * v[i];
    }
}

#[inline(always)]
pub(crate) fn add_noise(x: &mut [f64], sigma: f64, noise: &[f64]) {
    for (xi, n) in x.iter_mut().zip(noise) {
        *xi += sigma * n;
    }
}

/// Deterministic part of one step of `scheme`, in place.
#[inline(always)]
pub(crate) fn deterministic_step<F: VelocityField + ?Sized>(scheme: Scheme, field: &F, x: &mut [f64], dt: f64) {
    if scheme.is_splitting() {
        splitting_drift(field, x, dt);
    } else {
        euler_drift(field, x, dt);
    }
}

fn check_noise(noise: &NoiseDraw, d: usize) -> Result<()> {
    if noise.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: noise.len(),
        });
    }
    Ok(())
}

/// One step of the symplectic splitting for a separable 2D flow.
pub fn symplectic_step_2d<S: SeparableFlow2D + ?Sized>(
    state: (f64, f64),
    flow: &S,
    cfg: &IntegratorConfig,
    noise: &NoiseDraw,
) -> Result<(f64, f64)> {
    check_noise(noise, 2)?;
    let (p0, q0) = state;
    let dt = cfg.dt;
    let p_star = p0 - flow.f(q0) * dt;
    let q_star = q0 + flow.g(p_star) * dt;
    let n = noise.as_slice();
    Ok((p_star + cfg.sigma * n[0], q_star + cfg.sigma * n[1]))
}

/// One step of the volume-preserving splitting, in place.
pub fn volume_preserving_step<F: VelocityField + ?Sized>(
    state: &mut [f64],
    field: &F,
    cfg: &IntegratorConfig,
    noise: &NoiseDraw,
) -> Result<()> {
    if !field.component_independent() {
        return Err(Error::NotComponentIndependent {
            scheme: "volume-preserving",
            field: field.name().to_string(),
        });
    }
    check_state(state, field)?;
    check_noise(noise, state.len())?;
    splitting_drift(field, state, cfg.dt);
    add_noise(state, cfg.sigma, noise.as_slice());
    Ok(())
}

/// One Euler–Maruyama step, in place. With additive noise this is also the
/// Milstein step.
pub fn euler_maruyama_step<F: VelocityField + ?Sized>(
    state: &mut [f64],
    field: &F,
    cfg: &IntegratorConfig,
    noise: &NoiseDraw,
) -> Result<()> {
    check_state(state, field)?;
    check_noise(noise, state.len())?;
    euler_drift(field, state, cfg.dt);
    add_noise(state, cfg.sigma, noise.as_slice());
    Ok(())
}

/// Step dispatcher used by callers holding a [`Scheme`] value.
pub fn step<F: VelocityField + ?Sized>(
    scheme: Scheme,
    state: &mut [f64],
    field: &F,
    cfg: &IntegratorConfig,
    noise: &NoiseDraw,
) -> Result<()> {
    match scheme {
        Scheme::Symplectic | Scheme::VolumePreserving => volume_preserving_step(state, field, cfg, noise),
        Scheme::Euler => euler_maruyama_step(state, field, cfg, noise),
    }
}

fn check_state<F: VelocityField + ?Sized>(state: &[f64], field: &F) -> Result<()> {
    if state.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: state.len(),
        });
    }
    if state.len() > MAX_DIM {
        return Err(Error::InvalidArgument(format!("dimension {} exceeds {MAX_DIM}", state.len())));
    }
    Ok(())
}

/// Determinant of the Jacobian of the deterministic part of one step
/// (σ treated as 0), from a fourth-order central stencil of width `h`.
pub fn deterministic_jacobian_det<F: VelocityField + ?Sized>(
    scheme: Scheme,
    field: &F,
    state: &[f64],
    cfg: &IntegratorConfig,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("stencil width must be positive, got {h}")));
    }
    check_state(state, field)?;
    if scheme.is_splitting() && !field.component_independent() {
        return Err(Error::NotComponentIndependent {
            scheme: scheme.name(),
            field: field.name().to_string(),
        });
    }
    let d = state.len();
    let mut jac = [[0.0; MAX_DIM]; MAX_DIM];
    let image = |k: usize, offset: f64| {
        let mut y = [0.0; MAX_DIM];
        y[..d].copy_from_slice(state);
        y[k] += offset;
        deterministic_step(scheme, field, &mut y[..d], cfg.dt);
        y
    };
    for k in 0..d {
        let (p1, m1, p2, m2) = (image(k, h), image(k, -h), image(k, 2.0 * h), image(k, -2.0 * h));
        for i in 0..d {
            jac[i][k] = (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / (12.0 * h);
        }
    }
    Ok(determinant(&mut jac, d))
}

/// Determinant by Gaussian elimination with partial pivoting.
fn determinant(a: &mut [[f64; MAX_DIM]; MAX_DIM], d: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..d {
            let factor = a[row][col] / a[col][col];
            for k in col..d {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    det
}
