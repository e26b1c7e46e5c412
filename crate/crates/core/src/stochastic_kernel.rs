//! Replayable Brownian drivers and the Euler–Maruyama step.
//!
//! Every random number in the crate comes from a ChaCha8 keystream whose key
//! is `(base_seed, replication, domain)` and whose 64-bit stream id selects
//! the particle. The position inside the stream is the time step, so draw
//! `(particle i, step k)` is a pure function of its coordinates: generation
//! order and thread count never matter, and growing `n` leaves earlier
//! particles' noise untouched.

use std::io::{Read, Write};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_lq::ModelParams;

/// Uniform time grid `0 = t₀ < … < t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Construction(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::Construction("time grid needs at least one step".into()));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// `t_k`; the last point is `T` exactly.
    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Index of the grid point equal to `t` (within `1e-9 · dt`).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let pos = t / self.dt();
        let k = pos.round();
        if k < 0.0 || k as usize > self.n_steps || (pos - k).abs() > 1e-9 {
            return Err(Error::Range(format!("t = {t} is not a point of the time grid")));
        }
        Ok(k as usize)
    }
}

/// Seed coordinates of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedRecord {
    pub base_seed: u64,
    pub replication_id: u64,
}

/// Independent key domains sharing one `(base_seed, replication)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamDomain {
    Idiosyncratic = 0,
    Common = 1,
    Initial = 2,
    Oracle = 3,
    Sampling = 4,
}

/// Standard normal draws by inverse CDF, one 64-bit counter word per draw.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(seed: SeedRecord, domain: StreamDomain, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.base_seed.to_le_bytes());
        key[8..16].copy_from_slice(&seed.replication_id.to_le_bytes());
        key[16..24].copy_from_slice(&(domain as u64).to_le_bytes());
        key[24..].copy_from_slice(b"MFGFLUCT");
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        NormalStream { rng }
    }

    /// Uniform in the open interval `(0, 1)`.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        bits_to_open_unit(self.rng.next_u64())
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.next_uniform())
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_normal();
        }
    }
}

#[inline]
fn bits_to_open_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Standard normal quantile (Wichura's AS241, about 1e-16 relative error).
#[inline]
pub fn inverse_normal_cdf(u: f64) -> f64 {
    let q = u - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&AS241_A, r) / poly(&AS241_B, r);
    }
    let tail = if q < 0.0 { u } else { 1.0 - u };
    let r = (-tail.ln()).sqrt();
    let z = if r <= 5.0 {
        let r = r - 1.6;
        poly(&AS241_C, r) / poly(&AS241_D, r)
    } else {
        let r = r - 5.0;
        poly(&AS241_E, r) / poly(&AS241_F, r)
    };
    if q < 0.0 {
        -z
    } else {
        z
    }
}

#[inline(always)]
fn poly(c: &[f64; 8], x: f64) -> f64 {
    ((((((c[7] * x + c[6]) * x + c[5]) * x + c[4]) * x + c[3]) * x + c[2]) * x + c[1]) * x + c[0]
}

const AS241_A: [f64; 8] = [
    3.387_132_872_796_366_5,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const AS241_B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_66e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545e3,
];
const AS241_C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_546,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const AS241_D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const AS241_E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_048_7e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const AS241_F: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

/// Idiosyncratic and common Brownian increments for one replication.
///
/// `idio` is row-major `[n_steps × n_particles]`; `initial` holds one
/// standard normal per particle from which `X₀ⁱ` is derived.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBundle {
    grid: TimeGrid,
    n_particles: usize,
    idio: Vec<f64>,
    common: Vec<f64>,
    initial: Vec<f64>,
    seed: SeedRecord,
}

/// Particles processed together when filling the step-major array.
const FILL_TILE: usize = 32;
/// Steps drawn per stream before scattering into rows.
const FILL_STEPS: usize = 128;

/// Build the bundle for `(base_seed, replication_id)`.
pub fn make_bundle(
    base_seed: u64,
    replication_id: u64,
    grid: TimeGrid,
    n_particles: usize,
) -> Result<BrownianBundle> {
    if n_particles == 0 {
        return Err(Error::Construction("bundle needs at least one particle".into()));
    }
    let seed = SeedRecord {
        base_seed,
        replication_id,
    };
    let steps = grid.n_steps();
    let sqrt_dt = grid.dt().sqrt();

    let mut idio = vec![0.0; steps * n_particles];
    let mut column = vec![0.0; FILL_STEPS * FILL_TILE];
    for tile_start in (0..n_particles).step_by(FILL_TILE) {
        let tile = FILL_TILE.min(n_particles - tile_start);
        let mut streams: Vec<NormalStream> = (0..tile)
            .map(|j| NormalStream::new(seed, StreamDomain::Idiosyncratic, (tile_start + j) as u64))
            .collect();
        for chunk_start in (0..steps).step_by(FILL_STEPS) {
            let chunk = FILL_STEPS.min(steps - chunk_start);
            for (j, stream) in streams.iter_mut().enumerate() {
                stream.fill_normal(&mut column[j * FILL_STEPS..j * FILL_STEPS + chunk]);
            }
            for dk in 0..chunk {
                let k = chunk_start + dk;
                let row = &mut idio[k * n_particles + tile_start..k * n_particles + tile_start + tile];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = sqrt_dt * column[j * FILL_STEPS + dk];
                }
            }
        }
    }

    let mut common = vec![0.0; steps];
    NormalStream::new(seed, StreamDomain::Common, 0).fill_normal(&mut common);
    for v in &mut common {
        *v *= sqrt_dt;
    }

    let initial = (0..n_particles)
        .map(|i| NormalStream::new(seed, StreamDomain::Initial, i as u64).next_normal())
        .collect();

    Ok(BrownianBundle {
        grid,
        n_particles,
        idio,
        common,
        initial,
        seed,
    })
}

impl BrownianBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn seed(&self) -> SeedRecord {
        self.seed
    }

    /// Idiosyncratic increments `ΔBⁱ` of step `k`, one per particle.
    #[inline]
    pub fn idio_row(&self, k: usize) -> &[f64] {
        &self.idio[k * self.n_particles..(k + 1) * self.n_particles]
    }

    pub fn idio(&self) -> &[f64] {
        &self.idio
    }

    /// Common increments `ΔW`, one per step.
    pub fn common(&self) -> &[f64] {
        &self.common
    }

    /// Standard normal seeds of the initial states.
    pub fn initial_normals(&self) -> &[f64] {
        &self.initial
    }

    /// Cumulative common noise `W_{t_k}`, `k = 0..=n_steps`, `W₀ = 0`.
    pub fn w_path(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.common.len() + 1);
        let mut acc = 0.0;
        w.push(acc);
        for dw in &self.common {
            acc += dw;
            w.push(acc);
        }
        w
    }

    /// Cumulative idiosyncratic noise `B^i_{t_k}` of one particle.
    pub fn b_path(&self, particle: usize) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.n_steps() + 1);
        let mut acc = 0.0;
        b.push(acc);
        for k in 0..self.n_steps() {
            acc += self.idio_row(k)[particle];
            b.push(acc);
        }
        b
    }

    /// The same Brownian paths sampled on a grid `factor` times coarser:
    /// each coarse increment is the sum of `factor` fine ones.
    pub fn coarsen(&self, factor: usize) -> Result<BrownianBundle> {
        if factor == 0 || !self.n_steps().is_multiple_of(factor) {
            return Err(Error::Construction(format!(
                "cannot coarsen {} steps by {factor}",
                self.n_steps()
            )));
        }
        let steps = self.n_steps() / factor;
        let n = self.n_particles;
        let mut idio = vec![0.0; steps * n];
        for k in 0..steps {
            let row = &mut idio[k * n..(k + 1) * n];
            for f in 0..factor {
                for (acc, v) in row.iter_mut().zip(self.idio_row(k * factor + f)) {
                    *acc += v;
                }
            }
        }
        let common = self
            .common
            .chunks(factor)
            .map(|c| c.iter().sum())
            .collect();
        Ok(BrownianBundle {
            grid: TimeGrid::new(self.grid.horizon(), steps)?,
            n_particles: n,
            idio,
            common,
            initial: self.initial.clone(),
            seed: self.seed,
        })
    }

    /// Reorder particles: particle `j` of the result is particle `perm[j]`.
    pub fn permute_particles(&self, perm: &[usize]) -> Result<BrownianBundle> {
        let n = self.n_particles;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Construction("not a permutation of the particles".into()));
        }
        let mut idio = vec![0.0; self.idio.len()];
        for k in 0..self.n_steps() {
            let src = self.idio_row(k);
            for (j, &i) in perm.iter().enumerate() {
                idio[k * n + j] = src[i];
            }
        }
        Ok(BrownianBundle {
            grid: self.grid,
            n_particles: n,
            idio,
            common: self.common.clone(),
            initial: perm.iter().map(|&i| self.initial[i]).collect(),
            seed: self.seed,
        })
    }

    /// Binary dump: magic `MFGB1`, little-endian `u64` base seed and
    /// replication id, `u32` step and particle counts, `f64` dt, then the
    /// row-major `f64` arrays `idio`, `common` and `initial`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(BUNDLE_MAGIC)?;
        out.write_all(&self.seed.base_seed.to_le_bytes())?;
        out.write_all(&self.seed.replication_id.to_le_bytes())?;
        let steps = u32::try_from(self.n_steps())
            .map_err(|_| Error::Unsupported("too many steps for the binary format".into()))?;
        let particles = u32::try_from(self.n_particles)
            .map_err(|_| Error::Unsupported("too many particles for the binary format".into()))?;
        out.write_all(&steps.to_le_bytes())?;
        out.write_all(&particles.to_le_bytes())?;
        out.write_all(&self.dt().to_le_bytes())?;
        for v in self.idio.iter().chain(&self.common).chain(&self.initial) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<BrownianBundle> {
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::Unsupported("not an MFGB1 bundle".into()));
        }
        let base_seed = read_u64(&mut input)?;
        let replication_id = read_u64(&mut input)?;
        let steps = read_u32(&mut input)? as usize;
        let n = read_u32(&mut input)? as usize;
        let dt = f64::from_le_bytes(read_array(&mut input)?);
        let grid = TimeGrid::new(dt * steps as f64, steps)?;
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            (0..len)
                .map(|_| Ok(f64::from_le_bytes(read_array(&mut input)?)))
                .collect()
        };
        let idio = read_vec(steps * n)?;
        let common = read_vec(steps)?;
        let initial = read_vec(n)?;
        Ok(BrownianBundle {
            grid,
            n_particles: n,
            idio,
            common,
            initial,
            seed: SeedRecord {
                base_seed,
                replication_id,
            },
        })
    }
}

const BUNDLE_MAGIC: &[u8; 5] = b"MFGB1";

fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(input)?))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

/// `x + drift·dt + σ·dB + σ₀·dW`.
#[inline]
pub fn euler_step(x: f64, drift: f64, db: f64, dw: f64, dt: f64, p: &ModelParams) -> Result<f64> {
    let next = x + drift * dt + p.sigma * db + p.sigma0 * dw;
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::Numeric(format!(
            "non-finite Euler step from x={x}, drift={drift}, dB={db}, dW={dw}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    #[test]
    fn grid_basics() {
        let g = TimeGrid::new(2.0, 8).unwrap();
        assert_eq!(g.time(8), 2.0);
        assert!((g.dt() - 0.25).abs() < 1e-15);
        assert_eq!(g.index_of(0.5).unwrap(), 2);
        assert!(g.index_of(0.3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 3).is_err());
        let t = g.times();
        for w in t.windows(2) {
            assert!(((w[1] - w[0]) - g.dt()).abs() <= 1e-14 * g.dt());
        }
    }

    #[test]
    fn bundles_are_deterministic() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let a = make_bundle(7, 3, g, 40).unwrap();
        let b = make_bundle(7, 3, g, 40).unwrap();
        assert_eq!(a, b);
        assert!(make_bundle(7, 3, g, 0).is_err());
    }

    #[test]
    fn larger_population_extends_smaller_one() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let small = make_bundle(1, 0, g, 33).unwrap();
        let big = make_bundle(1, 0, g, 100).unwrap();
        for k in 0..20 {
            assert_eq!(small.idio_row(k), &big.idio_row(k)[..33]);
        }
        assert_eq!(small.common(), big.common());
        assert_eq!(small.initial_normals(), &big.initial_normals()[..33]);
    }

    #[test]
    fn increments_have_right_moments() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let b = make_bundle(11, 0, g, 1000).unwrap();
        let dt = g.dt();
        let est = stats::estimate(b.idio());
        assert!(est.mean.abs() < 4.0 * est.se, "mean {est:?}");
        let var = stats::variance_estimate(b.idio());
        assert!((var.mean - dt).abs() < 4.0 * var.se, "var {var:?} vs dt {dt}");
    }

    #[test]
    fn replications_are_uncorrelated() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let a = make_bundle(5, 0, g, 100).unwrap();
        let b = make_bundle(5, 1, g, 100).unwrap();
        let n = a.idio().len() as f64;
        let (xa, xb) = (a.idio(), b.idio());
        let ma = xa.iter().sum::<f64>() / n;
        let mb = xb.iter().sum::<f64>() / n;
        let cov: f64 = xa.iter().zip(xb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va: f64 = xa.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb: f64 = xb.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
        let rho = cov / (va * vb).sqrt();
        assert!(rho.abs() < 0.01, "rho = {rho}");
    }

    #[test]
    fn coarsening_sums_increments() {
        let g = TimeGrid::new(1.0, 12).unwrap();
        let b = make_bundle(2, 2, g, 5).unwrap();
        let c = b.coarsen(4).unwrap();
        assert_eq!(c.n_steps(), 3);
        let fine_w = b.w_path();
        let coarse_w = c.w_path();
        for k in 0..=3 {
            assert!((fine_w[4 * k] - coarse_w[k]).abs() < 1e-15);
        }
        assert!(b.coarsen(5).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let g = TimeGrid::new(0.5, 6).unwrap();
        let b = make_bundle(99, 4, g, 3).unwrap();
        let mut buf = Vec::new();
        b.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"MFGB1");
        assert_eq!(buf.len(), 5 + 16 + 8 + 8 + 8 * (18 + 6 + 3));
        let back = BrownianBundle::read_binary(&buf[..]).unwrap();
        assert_eq!(back.idio(), b.idio());
        assert_eq!(back.common(), b.common());
        assert_eq!(back.seed(), b.seed());
        assert!(BrownianBundle::read_binary(&b"NOPE!"[..]).is_err());
    }

    #[test]
    fn euler_step_cases() {
        let p = ModelParams::baseline();
        assert_eq!(euler_step(1.25, 0.0, 0.0, 0.0, 0.1, &p).unwrap(), 1.25);
        assert!((euler_step(0.0, 1.0, 0.0, 0.0, 0.1, &p).unwrap() - 0.1).abs() < 1e-16);
        assert!(euler_step(f64::NAN, 0.0, 0.0, 0.0, 0.1, &p).is_err());
        assert!(euler_step(0.0, f64::INFINITY, 0.0, 0.0, 0.1, &p).is_err());
    }

    #[test]
    fn inverse_cdf_symmetry_and_tails() {
        assert_eq!(inverse_normal_cdf(0.5), 0.0);
        assert!((inverse_normal_cdf(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((inverse_normal_cdf(0.025) + 1.959963984540054).abs() < 1e-12);
        let tiny = bits_to_open_unit(0);
        assert!(tiny > 0.0 && inverse_normal_cdf(tiny).is_finite());
        let top = bits_to_open_unit(u64::MAX);
        assert!(top < 1.0 && inverse_normal_cdf(top).is_finite());
        for &u in &[1e-300, 1e-20, 1e-5, 0.01, 0.3, 0.5 + 1e-9, 0.7, 0.99, 1.0 - 1e-12] {
            let reference = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * u);
            let z = inverse_normal_cdf(u);
            assert!((z - reference).abs() <= 1e-13 * reference.abs().max(1.0), "u = {u}: {z} vs {reference}");
        }
    }
}
