//! Periodic, time-independent, incompressible velocity fields.
//!
//! Every field is a pure function of position. Positions handed to a field
//! are never reduced modulo the period; the built-in fields are periodic by
//! construction, so unwrapped coordinates evaluate to the same velocity as
//! their image in the base cell.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Largest state dimension supported by the integrators.
pub const MAX_DIM: usize = 8;

/// Registry names, in the order they are listed in diagnostics.
pub const FLOW_NAMES: [&str; 5] = ["cellular2d", "abc", "kolmogorov", "kolmogorov3d-type", "none"];

/// A periodic drift field on `R^dim`.
pub trait VelocityField: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Period along `axis`.
    fn period(&self, axis: usize) -> f64;

    /// True when component `i` of the drift never depends on `x[i]`.
    /// The volume-preserving splitting is only valid for such fields.
    fn component_independent(&self) -> bool;

    /// Component `i` of the drift at `x`.
    fn component(&self, i: usize, x: &[f64]) -> f64;

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.dim()) {
            *o = self.component(i, x);
        }
    }
}

/// Two-dimensional Hamiltonian flow with separable Hamiltonian
/// `H(p, q) = F(q) + G(p)`: `dp = -f(q) dt`, `dq = g(p) dt`.
pub trait SeparableFlow2D: Send + Sync {
    /// `H_q`, a function of `q` alone.
    fn f(&self, q: f64) -> f64;

    /// `H_p`, a function of `p` alone.
    fn g(&self, p: f64) -> f64;

    fn hamiltonian(&self, _p: f64, _q: f64) -> Option<f64> {
        None
    }

    /// Periods along `p` and `q`.
    fn periods(&self) -> [f64; 2];
}

/// Drift of the oscillating-vortex cellular flow at `(p, q)`.
///
/// Returns `(sin(4πq+1)·exp(cos(4πq+1)), cos(2πp)·exp(sin(2πp)))`.
#[inline]
pub fn cellular_drift(p: f64, q: f64) -> (f64, f64) {
    (cellular_p_drift(q), cellular_q_drift(p))
}

#[inline(always)]
fn cellular_p_drift(q: f64) -> f64 {
    let (s, c) = (4.0 * PI * q + 1.0).sin_cos();
    s * c.exp()
}

#[inline(always)]
fn cellular_q_drift(p: f64) -> f64 {
    let (s, c) = (2.0 * PI * p).sin_cos();
    c * s.exp()
}

/// ABC velocity `(A sin r + C cos q, B sin p + A cos r, C sin q + B cos p)`.
#[inline]
pub fn abc_drift(x: [f64; 3], a: f64, b: f64, c: f64) -> [f64; 3] {
    let [p, q, r] = x;
    [
        a * r.sin() + c * q.cos(),
        b * p.sin() + a * r.cos(),
        c * q.sin() + b * p.cos(),
    ]
}

/// Kolmogorov velocity `(sin r, sin p, sin q)`.
#[inline]
pub fn kolmogorov_drift(x: [f64; 3]) -> [f64; 3] {
    let [p, q, r] = x;
    [r.sin(), p.sin(), q.sin()]
}

#[inline(always)]
fn cos_exp_sin(theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    c * s.exp()
}

/// Kolmogorov-type velocity built from `cos(θ)·exp(sin θ)` profiles.
#[inline]
pub fn kolmogorov3d_type_drift(x: [f64; 3]) -> [f64; 3] {
    let [p, q, r] = x;
    [
        cos_exp_sin(4.0 * PI * r + 1.0),
        cos_exp_sin(6.0 * PI * p + 2.0),
        cos_exp_sin(2.0 * PI * q + 3.0),
    ]
}

/// Oscillating-vortex cellular flow; period 1 in `p`, 1/2 in `q`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CellularFlow;

impl SeparableFlow2D for CellularFlow {
    #[inline(always)]
    fn f(&self, q: f64) -> f64 {
        -cellular_p_drift(q)
    }

    #[inline(always)]
    fn g(&self, p: f64) -> f64 {
        cellular_q_drift(p)
    }

    fn hamiltonian(&self, p: f64, q: f64) -> Option<f64> {
        Some((2.0 * PI * p).sin().exp() / (2.0 * PI) + (4.0 * PI * q + 1.0).cos().exp() / (4.0 * PI))
    }

    fn periods(&self) -> [f64; 2] {
        [1.0, 0.5]
    }
}

impl VelocityField for CellularFlow {
    fn name(&self) -> &str {
        "cellular2d"
    }
    fn dim(&self) -> usize {
        2
    }
    fn period(&self, axis: usize) -> f64 {
        self.periods()[axis]
    }
    fn component_independent(&self) -> bool {
        true
    }
    #[inline(always)]
    fn component(&self, i: usize, x: &[f64]) -> f64 {
        match i {
            0 => cellular_p_drift(x[1]),
            _ => cellular_q_drift(x[0]),
        }
    }
}

/// Arnold–Beltrami–Childress flow, 2π-periodic on every axis.
#[derive(Debug, Clone, Copy)]
pub struct AbcFlow {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for AbcFlow {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, c: 1.0 }
    }
}

impl VelocityField for AbcFlow {
    fn name(&self) -> &str {
        "abc"
    }
    fn dim(&self) -> usize {
        3
    }
    fn period(&self, _axis: usize) -> f64 {
        2.0 * PI
    }
    fn component_independent(&self) -> bool {
        true
    }
    #[inline(always)]
    fn component(&self, i: usize, x: &[f64]) -> f64 {
        match i {
            0 => self.a * x[2].sin() + self.c * x[1].cos(),
            1 => self.b * x[0].sin() + self.a * x[2].cos(),
            _ => self.c * x[1].sin() + self.b * x[0].cos(),
        }
    }
}

/// Kolmogorov flow: ABC with `A = B = C = 1` and the cosines removed.
#[derive(Debug, Clone, Copy, Default)]
pub struct KolmogorovFlow;

impl VelocityField for KolmogorovFlow {
    fn name(&self) -> &str {
        "kolmogorov"
    }
    fn dim(&self) -> usize {
        3
    }
    fn period(&self, _axis: usize) -> f64 {
        2.0 * PI
    }
    fn component_independent(&self) -> bool {
        true
    }
    #[inline(always)]
    fn component(&self, i: usize, x: &[f64]) -> f64 {
        match i {
            0 => x[2].sin(),
            1 => x[0].sin(),
            _ => x[1].sin(),
        }
    }
}

/// Three-dimensional Kolmogorov-type flow. The `p` dependence (through the
/// second component) has period 1/3, `q` has period 1, `r` has period 1/2.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kolmogorov3dTypeFlow;

impl VelocityField for Kolmogorov3dTypeFlow {
    fn name(&self) -> &str {
        "kolmogorov3d-type"
    }
    fn dim(&self) -> usize {
        3
    }
    fn period(&self, axis: usize) -> f64 {
        [1.0 / 3.0, 1.0, 0.5][axis]
    }
    fn component_independent(&self) -> bool {
        true
    }
    #[inline(always)]
    fn component(&self, i: usize, x: &[f64]) -> f64 {
        match i {
            0 => cos_exp_sin(4.0 * PI * x[2] + 1.0),
            1 => cos_exp_sin(6.0 * PI * x[0] + 2.0),
            _ => cos_exp_sin(2.0 * PI * x[1] + 3.0),
        }
    }
}

/// Zero drift with unit period; the Brownian baseline.
#[derive(Debug, Clone, Copy)]
pub struct ZeroFlow {
    pub dim: usize,
}

impl VelocityField for ZeroFlow {
    fn name(&self) -> &str {
        "none"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn period(&self, _axis: usize) -> f64 {
        1.0
    }
    fn component_independent(&self) -> bool {
        true
    }
    #[inline(always)]
    fn component(&self, _i: usize, _x: &[f64]) -> f64 {
        0.0
    }
}

impl SeparableFlow2D for ZeroFlow {
    fn f(&self, _q: f64) -> f64 {
        0.0
    }
    fn g(&self, _p: f64) -> f64 {
        0.0
    }
    fn hamiltonian(&self, _p: f64, _q: f64) -> Option<f64> {
        Some(0.0)
    }
    fn periods(&self) -> [f64; 2] {
        [1.0, 1.0]
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type HamiltonianFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Separable flow assembled from closures.
#[derive(Clone)]
pub struct FnSeparableFlow {
    pub f: ScalarFn,
    pub g: ScalarFn,
    pub hamiltonian: Option<HamiltonianFn>,
    pub periods: [f64; 2],
}

impl FnSeparableFlow {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
        periods: [f64; 2],
    ) -> Self {
        Self {
            f: Arc::new(f),
            g: Arc::new(g),
            hamiltonian: None,
            periods,
        }
    }

    pub fn with_hamiltonian(mut self, h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.hamiltonian = Some(Arc::new(h));
        self
    }

    /// Copies `flow` into closures.
    pub fn from_flow<S: SeparableFlow2D + Clone + 'static>(flow: S) -> Self {
        let (a, b, c) = (flow.clone(), flow.clone(), flow.clone());
        let h: HamiltonianFn = Arc::new(move |p, q| c.hamiltonian(p, q).unwrap_or(f64::NAN));
        Self {
            f: Arc::new(move |q| a.f(q)),
            g: Arc::new(move |p| b.g(p)),
            hamiltonian: flow.hamiltonian(0.0, 0.0).map(|_| h),
            periods: flow.periods(),
        }
    }

    /// The flow with velocity `-v`.
    pub fn time_reversed(&self) -> Self {
        let (f, g) = (self.f.clone(), self.g.clone());
        Self {
            f: Arc::new(move |q| -f(q)),
            g: Arc::new(move |p| -g(p)),
            hamiltonian: self.hamiltonian.clone().map(|h| -> HamiltonianFn { Arc::new(move |p, q| -h(p, q)) }),
            periods: self.periods,
        }
    }
}

impl fmt::Debug for FnSeparableFlow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnSeparableFlow").field("periods", &self.periods).finish_non_exhaustive()
    }
}

impl SeparableFlow2D for FnSeparableFlow {
    fn f(&self, q: f64) -> f64 {
        (self.f)(q)
    }
    fn g(&self, p: f64) -> f64 {
        (self.g)(p)
    }
    fn hamiltonian(&self, p: f64, q: f64) -> Option<f64> {
        self.hamiltonian.as_ref().map(|h| h(p, q))
    }
    fn periods(&self) -> [f64; 2] {
        self.periods
    }
}

/// Views a separable flow as the planar field `v = (-f(q), g(p))`.
#[derive(Debug, Clone)]
pub struct SeparableField<S>(pub S);

impl<S: SeparableFlow2D> VelocityField for SeparableField<S> {
    fn name(&self) -> &str {
        "separable2d"
    }
    fn dim(&self) -> usize {
        2
    }
    fn period(&self, axis: usize) -> f64 {
        self.0.periods()[axis]
    }
    fn component_independent(&self) -> bool {
        true
    }
    #[inline(always)]
    fn component(&self, i: usize, x: &[f64]) -> f64 {
        match i {
            0 => -self.0.f(x[1]),
            _ => self.0.g(x[0]),
        }
    }
}

type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// General field assembled from a closure writing the full drift vector.
#[derive(Clone)]
pub struct FnField {
    pub name: String,
    pub periods: Vec<f64>,
    pub component_independent: bool,
    pub drift: DriftFn,
}

impl FnField {
    pub fn new(
        name: impl Into<String>,
        periods: Vec<f64>,
        component_independent: bool,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            periods,
            component_independent,
            drift: Arc::new(drift),
        }
    }
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnField")
            .field("name", &self.name)
            .field("periods", &self.periods)
            .finish_non_exhaustive()
    }
}

impl VelocityField for FnField {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.periods.len()
    }
    fn period(&self, axis: usize) -> f64 {
        self.periods[axis]
    }
    fn component_independent(&self) -> bool {
        self.component_independent
    }
    fn component(&self, i: usize, x: &[f64]) -> f64 {
        let mut out = [0.0; MAX_DIM];
        (self.drift)(x, &mut out[..self.dim()]);
        out[i]
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, &mut out[..self.dim()]);
    }
}

/// A registered flow. Built-ins are concrete so hot loops can be
/// monomorphised; anything else goes through `Custom`.
#[derive(Clone)]
pub enum Flow {
    Cellular(CellularFlow),
    Abc(AbcFlow),
    Kolmogorov(KolmogorovFlow),
    Kolmogorov3dType(Kolmogorov3dTypeFlow),
    Zero(ZeroFlow),
    Custom(Arc<dyn VelocityField>),
}

impl fmt::Debug for Flow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Flow({})", self.field().name())
    }
}

/// Runs `$body` with `$f` bound to the concrete field inside `$flow`.
#[macro_export]
macro_rules! with_field {
    ($flow:expr, $f:ident => $body:expr) => {
        match $flow {
            $crate::flows::Flow::Cellular($f) => $body,
            $crate::flows::Flow::Abc($f) => $body,
            $crate::flows::Flow::Kolmogorov($f) => $body,
            $crate::flows::Flow::Kolmogorov3dType($f) => $body,
            $crate::flows::Flow::Zero($f) => $body,
            $crate::flows::Flow::Custom(arc) => {
                let $f: &dyn $crate::flows::VelocityField = arc.as_ref();
                $body
            }
        }
    };
}

impl Flow {
    /// Looks a flow up by its registry name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "cellular2d" => Flow::Cellular(CellularFlow),
            "abc" => Flow::Abc(AbcFlow::default()),
            "kolmogorov" => Flow::Kolmogorov(KolmogorovFlow),
            "kolmogorov3d-type" => Flow::Kolmogorov3dType(Kolmogorov3dTypeFlow),
            "none" => Flow::Zero(ZeroFlow { dim: 2 }),
            _ => {
                return Err(Error::UnknownFlow {
                    name: name.to_string(),
                    known: FLOW_NAMES.join(", "),
                })
            }
        })
    }

    pub fn custom(field: impl VelocityField + 'static) -> Self {
        Flow::Custom(Arc::new(field))
    }

    pub fn field(&self) -> &dyn VelocityField {
        with_field!(self, f => f)
    }

    pub fn name(&self) -> &str {
        self.field().name()
    }

    pub fn dim(&self) -> usize {
        self.field().dim()
    }

    /// The separable-Hamiltonian view, for 2D flows that have one.
    pub fn separable(&self) -> Option<FnSeparableFlow> {
        match self {
            Flow::Cellular(c) => Some(FnSeparableFlow::from_flow(*c)),
            Flow::Zero(z) if z.dim == 2 => Some(FnSeparableFlow::from_flow(*z)),
            _ => None,
        }
    }

    /// Initial sampling box: `[-0.5, 0.5]^2` for the cellular flow, one
    /// period cell `[0, L_k)` otherwise.
    pub fn default_init_box(&self) -> Vec<(f64, f64)> {
        match self {
            Flow::Cellular(_) => vec![(-0.5, 0.5); 2],
            _ => {
                let f = self.field();
                (0..f.dim()).map(|k| (0.0, f.period(k))).collect()
            }
        }
    }
}

/// Max over `n_samples` points of the central-difference divergence
/// `Σ_k (v_k(x + h e_k) - v_k(x - h e_k)) / 2h`. Points are drawn
/// uniformly over one period cell from a fixed stream.
pub fn divergence_probe<F: VelocityField + ?Sized>(field: &F, n_samples: usize, h: f64) -> Result<f64> {
    if !(h > 0.0) || n_samples == 0 {
        return Err(Error::InvalidArgument(format!(
            "divergence probe needs h > 0 and n_samples >= 1 (h = {h}, n = {n_samples})"
        )));
    }
    let d = field.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_d1e5);
    let mut x = [0.0; MAX_DIM];
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        for (k, xk) in x.iter_mut().enumerate().take(d) {
            *xk = crate::rng::unit_open(rng.next_u64()) * field.period(k);
        }
        worst = worst.max(central_divergence(field, &x[..d], h).abs());
    }
    Ok(worst)
}

pub(crate) fn central_divergence<F: VelocityField + ?Sized>(field: &F, x: &[f64], h: f64) -> f64 {
    let mut y = [0.0; MAX_DIM];
    let d = x.len();
    y[..d].copy_from_slice(x);
    let mut div = 0.0;
    for k in 0..d {
        y[k] = x[k] + h;
        let plus = field.component(k, &y[..d]);
        y[k] = x[k] - h;
        let minus = field.component(k, &y[..d]);
        y[k] = x[k];
        div += (plus - minus) / (2.0 * h);
    }
    div
}
