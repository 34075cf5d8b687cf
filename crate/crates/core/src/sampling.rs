//! Importance-sampling envelopes and seeded stream construction.
//!
//! Added-particle integrals are sampled from a product envelope: uniform
//! positions over a bounded box and an isotropic Gaussian in momentum. All
//! randomness flows through counter-derived ChaCha streams so that runs are
//! reproducible at any parallelism level.

use crate::dynamics::Particle;
use crate::vec3::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// The seeded stream generator used across the crate.
pub type StreamRng = ChaCha12Rng;

/// Deterministic RNG for stream `stream` of a master seed.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Axis-aligned box for position sampling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl BoxDomain {
    pub fn cube(side: f64) -> Self {
        BoxDomain {
            lo: Vec3::ZERO,
            hi: Vec3::new(side, side, side),
        }
    }

    pub fn centered_cube(half: f64) -> Self {
        BoxDomain {
            lo: Vec3::new(-half, -half, -half),
            hi: Vec3::new(half, half, half),
        }
    }

    pub fn volume(&self) -> f64 {
        (self.hi.x() - self.lo.x())
            * (self.hi.y() - self.lo.y())
            * (self.hi.z() - self.lo.z())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        Vec3::new(
            rng.gen_range(self.lo.x()..self.hi.x()),
            rng.gen_range(self.lo.y()..self.hi.y()),
            rng.gen_range(self.lo.z()..self.hi.z()),
        )
    }

    pub fn contains(&self, q: Vec3) -> bool {
        (0..3).all(|k| q.0[k] >= self.lo.0[k] && q.0[k] <= self.hi.0[k])
    }
}

/// Isotropic Gaussian momentum envelope N(0, sigma^2 I_3).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MomentumEnvelope {
    pub sigma: f64,
}

impl MomentumEnvelope {
    pub fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        let s = self.sigma;
        Vec3::new(
            s * rng.sample::<f64, _>(StandardNormal),
            s * rng.sample::<f64, _>(StandardNormal),
            s * rng.sample::<f64, _>(StandardNormal),
        )
    }

    pub fn density(&self, p: Vec3) -> f64 {
        let s2 = self.sigma * self.sigma;
        let norm = (2.0 * std::f64::consts::PI * s2).powf(1.5);
        (-p.norm_sq() / (2.0 * s2)).exp() / norm
    }
}

/// Product envelope over one-particle phase space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleDomain {
    pub bounds: BoxDomain,
    pub momentum: MomentumEnvelope,
}

impl SampleDomain {
    /// Draw a particle from the envelope, returning its density.
    pub fn sample(&self, rng: &mut impl Rng) -> (Particle, f64) {
        let q = self.bounds.sample(rng);
        let p = self.momentum.sample(rng);
        let dens = self.momentum.density(p) / self.bounds.volume();
        (Particle::new(q, p), dens)
    }

    pub fn density(&self, particle: &Particle) -> f64 {
        if self.bounds.contains(particle.q) {
            self.momentum.density(particle.p) / self.bounds.volume()
        } else {
            0.0
        }
    }
}

/// Concrete momentum laws with exact sampling and evaluable densities; all
/// are bounded by a Gaussian envelope.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MomentumDist {
    /// Isotropic Gaussian (Maxwellian) with per-component deviation `sigma`.
    Gaussian { sigma: f64 },
    /// Axis-wise Gaussian with distinct temperatures.
    AnisoGaussian { sx: f64, sy: f64, sz: f64 },
    /// Equal mixture of two Gaussians drifting at +-`speed` along x.
    TwoBeam { speed: f64, spread: f64 },
}

impl MomentumDist {
    pub fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        match *self {
            MomentumDist::Gaussian { sigma } => MomentumEnvelope { sigma }.sample(rng),
            MomentumDist::AnisoGaussian { sx, sy, sz } => Vec3::new(
                sx * rng.sample::<f64, _>(StandardNormal),
                sy * rng.sample::<f64, _>(StandardNormal),
                sz * rng.sample::<f64, _>(StandardNormal),
            ),
            MomentumDist::TwoBeam { speed, spread } => {
                let drift = if rng.gen::<bool>() { speed } else { -speed };
                Vec3::new(
                    drift + spread * rng.sample::<f64, _>(StandardNormal),
                    spread * rng.sample::<f64, _>(StandardNormal),
                    spread * rng.sample::<f64, _>(StandardNormal),
                )
            }
        }
    }

    pub fn pdf(&self, p: Vec3) -> f64 {
        fn g1(x: f64, s: f64) -> f64 {
            (-x * x / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        }
        match *self {
            MomentumDist::Gaussian { sigma } => MomentumEnvelope { sigma }.density(p),
            MomentumDist::AnisoGaussian { sx, sy, sz } => {
                g1(p.x(), sx) * g1(p.y(), sy) * g1(p.z(), sz)
            }
            MomentumDist::TwoBeam { speed, spread } => {
                0.5 * (g1(p.x() - speed, spread) + g1(p.x() + speed, spread))
                    * g1(p.y(), spread)
                    * g1(p.z(), spread)
            }
        }
    }

    /// Standard deviation scale used to size histogram ranges and envelopes.
    pub fn thermal_width(&self) -> f64 {
        match *self {
            MomentumDist::Gaussian { sigma } => sigma,
            MomentumDist::AnisoGaussian { sx, sy, sz } => sx.max(sy).max(sz),
            MomentumDist::TwoBeam { speed, spread } => {
                (speed * speed + spread * spread).sqrt()
            }
        }
    }

    /// Mean of |p|^2 under the law.
    pub fn mean_square(&self) -> f64 {
        match *self {
            MomentumDist::Gaussian { sigma } => 3.0 * sigma * sigma,
            MomentumDist::AnisoGaussian { sx, sy, sz } => {
                sx * sx + sy * sy + sz * sz
            }
            MomentumDist::TwoBeam { speed, spread } => {
                speed * speed + 3.0 * spread * spread
            }
        }
    }
}

/// Uniform point on the unit sphere.
pub fn sample_unit_sphere(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if let Some(u) = v.normalized() {
            return u;
        }
    }
}

/// Fold a unit vector into the hemisphere `<eta, w> >= 0`.
///
/// With `u` uniform on the sphere the result is uniform on the hemisphere,
/// and hemisphere integrals become `2*pi * E[f(fold(u, w))]`.
#[inline]
pub fn fold_to_hemisphere(u: Vec3, w: Vec3) -> Vec3 {
    if u.dot(w) < 0.0 {
        -u
    } else {
        u
    }
}

/// Area of the hemisphere; the weight attached to a folded uniform sample.
pub const HEMISPHERE_AREA: f64 = 2.0 * std::f64::consts::PI;

/// Uniform sample of the descending time simplex t >= t_1 >= ... >= t_n >= 0.
/// The associated integration weight is t^n / n!.
pub fn sorted_simplex_times(rng: &mut impl Rng, t: f64, n: usize) -> Vec<f64> {
    let mut ts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0) * t).collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts
}

/// Weight of the simplex sampler: t^n / n!.
pub fn simplex_weight(t: f64, n: usize) -> f64 {
    let mut w = 1.0;
    for k in 1..=n {
        w *= t / k as f64;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = stream_rng(42, 0);
        let mut b = stream_rng(42, 0);
        let mut c = stream_rng(42, 1);
        let xa: f64 = a.gen();
        let xb: f64 = b.gen();
        let xc: f64 = c.gen();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn gaussian_density_normalizes() {
        // quadrature over a wide cube
        let env = MomentumEnvelope { sigma: 0.7 };
        let m = 40;
        let half = 5.0 * env.sigma;
        let h = 2.0 * half / m as f64;
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let p = Vec3::new(
                        -half + (i as f64 + 0.5) * h,
                        -half + (j as f64 + 0.5) * h,
                        -half + (k as f64 + 0.5) * h,
                    );
                    total += env.density(p) * h * h * h;
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-5, "total = {total}");
    }

    #[test]
    fn hemisphere_average_of_cosine() {
        // E[<eta, w>] over the folded uniform hemisphere is |w|/2, so the
        // weighted integral is pi*|w|.
        let mut rng = stream_rng(7, 0);
        let w = Vec3::new(0.3, -1.2, 0.4);
        let mut acc = crate::stats::RunningMoments::new();
        for _ in 0..200_000 {
            let eta = fold_to_hemisphere(sample_unit_sphere(&mut rng), w);
            acc.push(HEMISPHERE_AREA * eta.dot(w));
        }
        let exact = std::f64::consts::PI * w.norm();
        assert!((acc.mean() - exact).abs() < 4.0 * acc.std_error() + 1e-3);
    }

    #[test]
    fn simplex_times_are_sorted_and_weighted() {
        let mut rng = stream_rng(3, 0);
        let ts = sorted_simplex_times(&mut rng, 2.0, 4);
        for w in ts.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!((simplex_weight(2.0, 3) - 8.0 / 6.0).abs() < 1e-15);
    }
}
