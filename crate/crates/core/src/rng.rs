//! Counter-addressed Gaussian streams.
//!
//! Every draw is a pure function of `(master_seed, stream_id, counter)`:
//! the ChaCha8 keystream keyed by the master seed is split into 2^64
//! streams, one per particle, and draw `k` of a stream is word `k` of that
//! keystream. One normal consumes exactly one 64-bit word, so advancing a
//! `d`-dimensional increment moves the counter by `d`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::flows::MAX_DIM;

const INIT_DOMAIN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Maps 64 random bits to a uniform in the open interval (0, 1).
#[inline(always)]
pub fn unit_open(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Inverse of the standard normal CDF (Acklam's rational approximation,
/// relative error below 1.2e-9 over the open unit interval).
#[inline(always)]
pub fn inverse_normal_cdf(u: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.02425;

    if !(LOW..=1.0 - LOW).contains(&u) {
        let tail = if u < LOW { u } else { 1.0 - u };
        let s = (-2.0 * tail.ln()).sqrt();
        let x = (((((C[0] * s + C[1]) * s + C[2]) * s + C[3]) * s + C[4]) * s + C[5])
            / ((((D[0] * s + D[1]) * s + D[2]) * s + D[3]) * s + 1.0);
        if u < LOW {
            x
        } else {
            -x
        }
    } else {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// One particle's reproducible stream of standard normals.
#[derive(Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    counter: u64,
    core: ChaCha8Rng,
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RngStream")
            .field("master_seed", &self.master_seed)
            .field("stream_id", &self.stream_id)
            .field("counter", &self.counter)
            .finish()
    }
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(master_seed);
        core.set_stream(stream_id);
        core.set_word_pos(u128::from(counter) * 2);
        Self {
            master_seed,
            stream_id,
            counter,
            core,
        }
    }

    /// Stream used for initial positions; disjoint from the noise streams.
    pub fn for_init(master_seed: u64, particle: u64) -> Self {
        Self::new(master_seed ^ INIT_DOMAIN, particle, 0)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline(always)]
    pub fn next_uniform(&mut self) -> f64 {
        self.counter += 1;
        unit_open(self.core.next_u64())
    }

    #[inline(always)]
    pub fn next_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.next_uniform())
    }
}

/// `d` independent `sqrt(dt)·N(0,1)` increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    len: usize,
    values: [f64; MAX_DIM],
}

impl NoiseDraw {
    pub fn zeros(d: usize) -> Self {
        assert!(d <= MAX_DIM, "dimension {d} exceeds {MAX_DIM}");
        Self {
            len: d,
            values: [0.0; MAX_DIM],
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        let mut out = Self::zeros(values.len());
        out.values[..values.len()].copy_from_slice(values);
        out
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.len]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Draws `d` Gaussian increments of variance `dt`; the counter advances by `d`.
pub fn gaussian_increments(stream: &mut RngStream, d: usize, dt: f64) -> NoiseDraw {
    NoiseSchedule::plain(dt).draw(stream, d)
}

/// How one integrator step's increment is assembled from the fine stream.
///
/// A step of size `substeps · fine_dt` uses the sum of `substeps`
/// consecutive fine increments, so a coarse run driven by this schedule
/// sees the same Brownian path as a fine run at `fine_dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub fine_dt: f64,
    pub substeps: u64,
}

impl NoiseSchedule {
    pub fn plain(dt: f64) -> Self {
        Self {
            fine_dt: dt,
            substeps: 1,
        }
    }

    pub fn coupled(fine_dt: f64, substeps: u64) -> Self {
        Self { fine_dt, substeps }
    }

    pub fn step_dt(&self) -> f64 {
        self.fine_dt * self.substeps as f64
    }

    /// Counter position at the start of integrator step `step`.
    pub fn counter_at(&self, step: u64, d: usize) -> u64 {
        step * self.substeps * d as u64
    }

    #[inline(always)]
    pub fn draw(&self, stream: &mut RngStream, d: usize) -> NoiseDraw {
        let mut out = NoiseDraw::zeros(d);
        self.fill(stream, out.as_mut_slice());
        out
    }

    #[inline(always)]
    pub fn fill(&self, stream: &mut RngStream, out: &mut [f64]) {
        let scale = self.fine_dt.sqrt();
        if self.substeps == 1 {
            for o in out.iter_mut() {
                *o = scale * stream.next_normal();
            }
            return;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for _ in 0..self.substeps {
            for o in out.iter_mut() {
                *o += scale * stream.next_normal();
            }
        }
    }
}
