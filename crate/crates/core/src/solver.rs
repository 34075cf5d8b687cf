//! Stochastic-particle solvers for the hard-sphere kinetic equations.
//!
//! Collisions are simulated by majorant (null-collision) sampling: candidate
//! pairs arrive as a Poisson stream bounded by a relative-speed majorant,
//! the contact direction is uniform on the hemisphere and acceptance is
//! proportional to the kernel `<eta, p1 - p2>`. With the Poisson candidate
//! count the jump process is simulated without time-step bias; the only
//! systematic gaps to the kinetic equation are finite-sample effects.
//!
//! The displaced-collision variant draws the partner from the cell at
//! `q +- eps*eta`, which is the stochastic realization of a collision
//! integral evaluated at shifted contact points. Functional order 1
//! modulates the acceptance by a pair-functional correction evaluated
//! through the cluster operators on a smooth proxy of the current field.
//!
//! In dimensionless form the unit of density is 1 and the collision-rate
//! normalization enters through a single rate multiplier.

use crate::cluster::{generating_operator_v, ClusterIndexSet, FlowKernel, StateFunction};
use crate::dynamics::{reflect, Boundary, FlowOptions, Particle};
use crate::sampling::{fold_to_hemisphere, sample_unit_sphere, MomentumDist};
use crate::vec3::Vec3;
use rand::Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("relative speed {speed} exceeds the majorant bound {bound}")]
    MajorantOverflow { speed: f64, bound: f64 },
    #[error("collision probability per particle exceeded 0.5 in one step ({0:.3})")]
    TimeStepTooLarge(f64),
    #[error("ensemble of {0} samples below the floor of {1}")]
    TooFewSamples(usize, usize),
    #[error("diameter {eps} must be smaller than the cell size {cell}")]
    DiameterVsCell { eps: f64, cell: f64 },
    #[error("functional correction {0} escaped its cap; majorant invalid")]
    CorrectionOverflow(f64),
}

/// Equal-weight momentum sample set representing a one-particle law.
#[derive(Debug, Clone)]
pub struct VelocityEnsemble {
    pub samples: Vec<Vec3>,
    /// Physical density carried by each sample (n = len * weight).
    pub weight: f64,
    /// Spatial cell id for inhomogeneous bookkeeping.
    pub cell: Option<usize>,
}

impl VelocityEnsemble {
    pub fn from_dist(dist: &MomentumDist, count: usize, rng: &mut impl Rng) -> Self {
        VelocityEnsemble {
            samples: (0..count).map(|_| dist.sample(rng)).collect(),
            weight: 1.0 / count as f64,
            cell: None,
        }
    }

    pub fn density(&self) -> f64 {
        self.samples.len() as f64 * self.weight
    }

    pub fn mean_momentum(&self) -> Vec3 {
        let m = self.samples.len() as f64;
        self.samples.iter().fold(Vec3::ZERO, |a, &p| a + p) / m
    }

    /// Scalar temperature: mean squared deviation per degree of freedom.
    pub fn temperature(&self) -> f64 {
        let mean = self.mean_momentum();
        let m = self.samples.len() as f64;
        self.samples
            .iter()
            .map(|&p| (p - mean).norm_sq())
            .sum::<f64>()
            / (3.0 * m)
    }

    pub fn momentum_sum(&self) -> Vec3 {
        self.samples.iter().fold(Vec3::ZERO, |a, &p| a + p)
    }

    pub fn energy_sum(&self) -> f64 {
        self.samples.iter().map(|p| p.norm_sq()).sum()
    }
}

/// Kernel normalization and majorant bound shared by the collision steps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CollisionParams {
    /// Multiplies the collision kernel (the dimensionless rate constant).
    pub rate_multiplier: f64,
    /// Upper bound on relative speeds; exceeding it aborts the step.
    pub majorant_speed: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CollisionStats {
    pub candidates: u64,
    pub accepted: u64,
}

fn poisson_count(rng: &mut impl Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    rng.sample(Poisson::new(mean).expect("positive mean")) as u64
}

/// One homogeneous collision step over `dt`.
///
/// Candidate unordered pairs arrive at the majorant rate
/// `pi * M * v_maj * n * mult`; each candidate draws a hemisphere direction
/// and accepts with probability `<eta, dp> / v_maj`, applying the elastic
/// transform on acceptance. Momentum and energy are conserved per collision.
pub fn dsmc_collision_step(
    ens: &mut VelocityEnsemble,
    dt: f64,
    params: &CollisionParams,
    rng: &mut impl Rng,
) -> Result<CollisionStats, SolverError> {
    let m = ens.samples.len();
    if m < 2 {
        return Ok(CollisionStats::default());
    }
    let n = ens.density();
    let lambda = std::f64::consts::PI
        * m as f64
        * params.majorant_speed
        * n
        * params.rate_multiplier
        * dt;
    let candidates = poisson_count(rng, lambda);
    let mut stats = CollisionStats {
        candidates,
        ..Default::default()
    };
    for _ in 0..candidates {
        let i = rng.gen_range(0..m);
        let mut j = rng.gen_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        let dp = ens.samples[i] - ens.samples[j];
        let speed = dp.norm();
        if speed > params.majorant_speed {
            return Err(SolverError::MajorantOverflow {
                speed,
                bound: params.majorant_speed,
            });
        }
        let eta = fold_to_hemisphere(sample_unit_sphere(rng), dp);
        let accept = eta.dot(dp) / params.majorant_speed;
        if rng.gen::<f64>() < accept {
            let (a, b) = reflect(ens.samples[i], ens.samples[j], eta);
            ens.samples[i] = a;
            ens.samples[j] = b;
            stats.accepted += 1;
        }
    }
    if stats.accepted as f64 > 0.25 * m as f64 {
        return Err(SolverError::TimeStepTooLarge(
            2.0 * stats.accepted as f64 / m as f64,
        ));
    }
    Ok(stats)
}

/// 1D slab of 3D-momentum samples with periodic ends.
#[derive(Debug, Clone)]
pub struct SlabEnsemble {
    pub length: f64,
    pub cells: usize,
    pub x: Vec<f64>,
    pub p: Vec<Vec3>,
    /// Density carried per sample per unit length.
    pub weight: f64,
}

impl SlabEnsemble {
    /// Samples positions from the density profile `profile` (relative,
    /// rejection-sampled) and momenta from `dist`. The total represented
    /// density averages to `mean_density`.
    pub fn sample_profile(
        length: f64,
        cells: usize,
        count: usize,
        mean_density: f64,
        profile: impl Fn(f64) -> f64,
        dist: &MomentumDist,
        rng: &mut impl Rng,
    ) -> Self {
        let mut bound = 0.0_f64;
        for k in 0..1000 {
            bound = bound.max(profile((k as f64 + 0.5) / 1000.0 * length));
        }
        let mut x = Vec::with_capacity(count);
        while x.len() < count {
            let cand = rng.gen_range(0.0..length);
            if rng.gen::<f64>() * bound <= profile(cand) {
                x.push(cand);
            }
        }
        let p = (0..count).map(|_| dist.sample(rng)).collect();
        SlabEnsemble {
            length,
            cells,
            x,
            p,
            weight: mean_density * length / count as f64,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.length / self.cells as f64
    }

    pub fn cell_of(&self, x: f64) -> usize {
        let mut w = x % self.length;
        if w < 0.0 {
            w += self.length;
        }
        ((w / self.cell_size()) as usize).min(self.cells - 1)
    }

    pub fn cell_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.cells];
        for (idx, &x) in self.x.iter().enumerate() {
            lists[self.cell_of(x)].push(idx);
        }
        lists
    }

    /// Number density per cell.
    pub fn cell_density(&self, lists: &[Vec<usize>]) -> Vec<f64> {
        lists
            .iter()
            .map(|l| l.len() as f64 * self.weight / self.cell_size())
            .collect()
    }

    pub fn momentum_sum(&self) -> Vec3 {
        self.p.iter().fold(Vec3::ZERO, |a, &p| a + p)
    }

    pub fn energy_sum(&self) -> f64 {
        self.p.iter().map(|p| p.norm_sq()).sum()
    }
}

/// Free streaming over `dt` with periodic wrap; cells are reassigned by
/// position, so two half steps compose exactly into one full step.
pub fn transport_step(slab: &mut SlabEnsemble, dt: f64) {
    let l = slab.length;
    for (x, p) in slab.x.iter_mut().zip(slab.p.iter()) {
        *x += p.x() * dt;
        *x %= l;
        if *x < 0.0 {
            *x += l;
        }
    }
}

/// Collision closure of the displaced-partner step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalOrder {
    Product,
    PairCorrected,
}

/// One collision step over the slab, with partners drawn at the displaced
/// contact point `x + eps * eta_x`. `eps = 0` reduces to cell-local
/// collisions. Candidates arrive per ordered particle at the majorant rate
/// `2 pi v_maj n_max mult` (times the correction cap at order 1).
#[allow(clippy::too_many_arguments)]
pub fn enskog_collision_step(
    slab: &mut SlabEnsemble,
    dt: f64,
    eps: f64,
    params: &CollisionParams,
    order: FunctionalOrder,
    elapsed: f64,
    rng: &mut impl Rng,
) -> Result<CollisionStats, SolverError> {
    if eps >= slab.cell_size() {
        return Err(SolverError::DiameterVsCell {
            eps,
            cell: slab.cell_size(),
        });
    }
    let lists = slab.cell_lists();
    let dens = slab.cell_density(&lists);
    let n_max = dens.iter().fold(0.0_f64, |a, &b| a.max(b));
    if n_max == 0.0 {
        return Ok(CollisionStats::default());
    }
    let corr_cap = match order {
        FunctionalOrder::Product => 1.0,
        FunctionalOrder::PairCorrected => CORRECTION_CAP,
    };
    let field = match order {
        FunctionalOrder::Product => None,
        FunctionalOrder::PairCorrected => Some(SlabField::fit(slab, &lists, &dens)),
    };
    let m = slab.p.len();
    let per_particle = 2.0
        * std::f64::consts::PI
        * params.majorant_speed
        * n_max
        * params.rate_multiplier
        * corr_cap
        * dt;
    let candidates = poisson_count(rng, per_particle * m as f64);
    let mut stats = CollisionStats {
        candidates,
        ..Default::default()
    };
    for _ in 0..candidates {
        let i = rng.gen_range(0..m);
        let eta = sample_unit_sphere(rng);
        let partner_cell = slab.cell_of(slab.x[i] + eps * eta.x());
        let list = &lists[partner_cell];
        if list.is_empty() {
            continue;
        }
        let j = list[rng.gen_range(0..list.len())];
        if j == i {
            continue;
        }
        let dp = slab.p[i] - slab.p[j];
        let speed = dp.norm();
        if speed > params.majorant_speed {
            return Err(SolverError::MajorantOverflow {
                speed,
                bound: params.majorant_speed,
            });
        }
        let kernel = eta.dot(dp);
        if kernel <= 0.0 {
            continue; // wrong hemisphere for this contact geometry
        }
        let mut accept =
            kernel / params.majorant_speed * dens[partner_cell] / (n_max * corr_cap);
        if let Some(field) = &field {
            let f = field.pair_correction(slab.x[i], eps, eta, slab.p[i], slab.p[j], elapsed, rng);
            if !(0.0..=CORRECTION_CAP).contains(&f) {
                return Err(SolverError::CorrectionOverflow(f));
            }
            accept *= f;
        }
        if rng.gen::<f64>() < accept {
            let (a, b) = reflect(slab.p[i], slab.p[j], eta);
            slab.p[i] = a;
            slab.p[j] = b;
            stats.accepted += 1;
        }
    }
    if stats.accepted as f64 > 0.25 * m as f64 {
        return Err(SolverError::TimeStepTooLarge(
            2.0 * stats.accepted as f64 / m as f64,
        ));
    }
    Ok(stats)
}

/// Cap on the pair-functional acceptance correction; the candidate rate is
/// widened by the same factor so the scheme stays a valid majorant.
pub const CORRECTION_CAP: f64 = 2.0;

/// Smooth per-cell Gaussian proxy of the slab field used by the order-1
/// closure correction.
#[derive(Debug, Clone)]
pub struct SlabField {
    length: f64,
    cells: usize,
    density: Vec<f64>,
    mean: Vec<Vec3>,
    sigma: Vec<Vec3>,
}

impl SlabField {
    pub fn fit(slab: &SlabEnsemble, lists: &[Vec<usize>], dens: &[f64]) -> Self {
        let mut mean = vec![Vec3::ZERO; slab.cells];
        let mut sigma = vec![Vec3::new(1.0, 1.0, 1.0); slab.cells];
        for (c, list) in lists.iter().enumerate() {
            if list.len() < 2 {
                continue;
            }
            let m = list.len() as f64;
            let mu = list
                .iter()
                .fold(Vec3::ZERO, |a, &i| a + slab.p[i])
                / m;
            let mut var = Vec3::ZERO;
            for &i in list {
                let d = slab.p[i] - mu;
                var += Vec3::new(d.x() * d.x(), d.y() * d.y(), d.z() * d.z());
            }
            var = var / m;
            mean[c] = mu;
            sigma[c] = Vec3::new(
                var.x().sqrt().max(1e-6),
                var.y().sqrt().max(1e-6),
                var.z().sqrt().max(1e-6),
            );
        }
        SlabField {
            length: slab.length,
            cells: slab.cells,
            density: dens.to_vec(),
            mean,
            sigma,
        }
    }

    fn cell_of(&self, x: f64) -> usize {
        let mut w = x % self.length;
        if w < 0.0 {
            w += self.length;
        }
        ((w / (self.length / self.cells as f64)) as usize).min(self.cells - 1)
    }

    /// Evaluable one-particle proxy; positions enter through x only.
    fn proxy(&self) -> StateFunction {
        let field = self.clone();
        StateFunction::new(1, move |pt| {
            let c = field.cell_of(pt[0].q.x());
            let mu = field.mean[c];
            let s = field.sigma[c];
            let d = pt[0].p - mu;
            let g = |u: f64, sd: f64| {
                (-u * u / (2.0 * sd * sd)).exp()
                    / (sd * (2.0 * std::f64::consts::PI).sqrt())
            };
            field.density[c] * g(d.x(), s.x()) * g(d.y(), s.y()) * g(d.z(), s.z())
        })
    }

    /// Ratio F_2 / (F_1 F_1) at the contact pair from the first-order
    /// functional term, estimated with two added-particle draws and a hard
    /// cap on flow evaluations.
    #[allow(clippy::too_many_arguments)]
    pub fn pair_correction(
        &self,
        x1: f64,
        eps: f64,
        eta: Vec3,
        p1: Vec3,
        p2: Vec3,
        elapsed: f64,
        rng: &mut impl Rng,
    ) -> f64 {
        let q1 = Vec3::new(x1, 0.0, 0.0);
        let q2 = q1 + eta * eps;
        let f1 = self.proxy();
        let base = f1.eval(&[Particle::new(q1, p1)]) * f1.eval(&[Particle::new(q2, p2)]);
        if base <= 0.0 {
            return 1.0;
        }
        let kernel = FlowKernel {
            epsilon: eps,
            boundary: Boundary::Unbounded,
            // two partition flows per scattering cumulant and three
            // cumulants per draw; two draws keep the flow budget at ten
            options: FlowOptions { max_events: 64 },
        };
        let ground = ClusterIndexSet::new(vec![0, 1], vec![2]).expect("disjoint");
        let f3 = StateFunction::product_of(&f1, 3);
        let Ok(op) = generating_operator_v(&kernel, elapsed.min(1.0), &ground, &f3) else {
            return 1.0;
        };
        // importance ball around the contact midpoint
        let mid = (q1 + q2) * 0.5;
        let radius = 3.0 * eps + 2.0 * elapsed.min(1.0) * self.thermal_scale();
        let ball_vol = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
        let mut integral = 0.0;
        const DRAWS: usize = 2;
        for _ in 0..DRAWS {
            let dir = sample_unit_sphere(rng);
            let r = radius * rng.gen::<f64>().cbrt();
            let q3 = mid + dir * r;
            let c3 = self.cell_of(q3.x());
            let mu = self.mean[c3];
            let s = self.sigma[c3];
            let p3 = Vec3::new(
                mu.x() + s.x() * rng.sample::<f64, _>(rand_distr::StandardNormal),
                mu.y() + s.y() * rng.sample::<f64, _>(rand_distr::StandardNormal),
                mu.z() + s.z() * rng.sample::<f64, _>(rand_distr::StandardNormal),
            );
            let g = |u: f64, sd: f64| {
                (-u * u / (2.0 * sd * sd)).exp()
                    / (sd * (2.0 * std::f64::consts::PI).sqrt())
            };
            let p_dens = g(p3.x() - mu.x(), s.x())
                * g(p3.y() - mu.y(), s.y())
                * g(p3.z() - mu.z(), s.z());
            let point = [
                Particle::new(q1, p1),
                Particle::new(q2, p2),
                Particle::new(q3, p3),
            ];
            let v = op.eval(&point);
            if v.is_finite() {
                integral += v * ball_vol / (p_dens * DRAWS as f64);
            }
        }
        (1.0 + integral / base).clamp(0.0, CORRECTION_CAP)
    }

    fn thermal_scale(&self) -> f64 {
        self.sigma
            .iter()
            .map(|s| s.x().max(s.y()).max(s.z()))
            .fold(0.0_f64, f64::max)
    }
}

/// Dimensionless 1D collision integral of the displaced pair functional,
/// evaluated by composite Simpson quadrature on [0, cutoff].
///
/// `f2(q1, p1, q2, p2)` is the evaluable pair closure.
pub struct RodIntegral {
    pub value: f64,
    /// Set when the integrand at the cutoff is above 1% of its peak.
    pub tail_warning: bool,
}

pub fn hard_rod_collision_integral_1d(
    f2: &dyn Fn(f64, f64, f64, f64) -> f64,
    q1: f64,
    p1: f64,
    eps: f64,
    cutoff: f64,
    panels: usize,
) -> RodIntegral {
    let integrand = |cap_p: f64| -> f64 {
        cap_p
            * (f2(q1, p1 - cap_p, q1 - eps, p1) - f2(q1, p1, q1 - eps, p1 + cap_p)
                + f2(q1, p1 + cap_p, q1 + eps, p1)
                - f2(q1, p1, q1 + eps, p1 - cap_p))
    };
    let n = panels.max(2) * 2; // even count for Simpson
    let h = cutoff / n as f64;
    let mut sum = integrand(0.0) + integrand(cutoff);
    let mut peak = 0.0_f64;
    for k in 1..n {
        let v = integrand(k as f64 * h);
        peak = peak.max(v.abs());
        sum += v * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    let tail = integrand(cutoff).abs();
    RodIntegral {
        value: sum * h / 3.0,
        tail_warning: peak > 0.0 && tail > 0.01 * peak,
    }
}

/// Histogram-based estimate of `int f log f` over momentum space with a
/// separable Gaussian smoothing kernel (sigma of one bin). The range is
/// centered on the sample mean, so the estimate is drift-invariant.
pub fn h_functional(samples: &[Vec3], bins: usize) -> f64 {
    assert!(samples.len() >= 2, "h_functional needs samples");
    let m = samples.len() as f64;
    let mean = samples.iter().fold(Vec3::ZERO, |a, &p| a + p) / m;
    let mut var = 0.0;
    for p in samples {
        var += (*p - mean).norm_sq();
    }
    let sd = (var / (3.0 * m)).sqrt().max(1e-12);
    let half = 4.0 * sd;
    let width = 2.0 * half / bins as f64;
    let idx = |u: f64| -> Option<usize> {
        let k = ((u + half) / width).floor();
        (k >= 0.0 && k < bins as f64).then(|| k as usize)
    };
    let mut counts = vec![0.0_f64; bins * bins * bins];
    let mut kept = 0.0;
    for p in samples {
        let d = *p - mean;
        if let (Some(i), Some(j), Some(k)) = (idx(d.x()), idx(d.y()), idx(d.z())) {
            counts[(i * bins + j) * bins + k] += 1.0;
            kept += 1.0;
        }
    }
    if kept == 0.0 {
        return 0.0;
    }
    // separable 3-tap Gaussian smoothing, sigma = 1 bin
    let kern = [0.27901008925473087, 0.44197982149053826, 0.27901008925473087];
    let mut smooth = counts.clone();
    for axis in 0..3 {
        let mut next = vec![0.0_f64; smooth.len()];
        for i in 0..bins {
            for j in 0..bins {
                for k in 0..bins {
                    let v = smooth[(i * bins + j) * bins + k];
                    if v == 0.0 {
                        continue;
                    }
                    for (o, &w) in kern.iter().enumerate() {
                        let shift = o as isize - 1;
                        let (mut a, mut b, mut c) = (i as isize, j as isize, k as isize);
                        match axis {
                            0 => a += shift,
                            1 => b += shift,
                            _ => c += shift,
                        }
                        if a < 0 || b < 0 || c < 0 {
                            continue;
                        }
                        let (a, b, c) = (a as usize, b as usize, c as usize);
                        if a >= bins || b >= bins || c >= bins {
                            continue;
                        }
                        next[(a * bins + b) * bins + c] += v * w;
                    }
                }
            }
        }
        smooth = next;
    }
    let cell_vol = width * width * width;
    let total: f64 = smooth.iter().sum();
    let mut h = 0.0;
    for &c in &smooth {
        let f = c / (total * cell_vol);
        if f > 0.0 {
            h += f * (f + 1e-12).ln() * cell_vol;
        }
    }
    h
}

/// A per-step record of cell moments emitted by the drivers.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    pub cell: usize,
    pub density: f64,
    pub mean_momentum: Vec3,
    pub temperature: f64,
    pub h_value: f64,
}

/// Homogeneous relaxation driver: collision steps only, recording global
/// moments and the smoothed H value every `record_every` steps.
pub struct HomogeneousRun {
    pub records: Vec<StepRecord>,
    pub stats: CollisionStats,
}

#[allow(clippy::too_many_arguments)]
pub fn run_homogeneous(
    ens: &mut VelocityEnsemble,
    dt: f64,
    steps: usize,
    params: &CollisionParams,
    h_bins: usize,
    record_every: usize,
    rng: &mut impl Rng,
) -> Result<HomogeneousRun, SolverError> {
    let mut records = Vec::new();
    let mut stats = CollisionStats::default();
    let mut push = |t: f64, e: &VelocityEnsemble| {
        records.push(StepRecord {
            t,
            cell: 0,
            density: e.density(),
            mean_momentum: e.mean_momentum(),
            temperature: e.temperature(),
            h_value: h_functional(&e.samples, h_bins),
        });
    };
    push(0.0, ens);
    for step in 1..=steps {
        let s = dsmc_collision_step(ens, dt, params, rng)?;
        stats.candidates += s.candidates;
        stats.accepted += s.accepted;
        if step % record_every.max(1) == 0 {
            push(step as f64 * dt, ens);
        }
    }
    Ok(HomogeneousRun { records, stats })
}

/// Strang-split slab driver: half transport, collisions, half transport.
#[allow(clippy::too_many_arguments)]
pub fn run_slab(
    slab: &mut SlabEnsemble,
    dt: f64,
    steps: usize,
    eps: f64,
    params: &CollisionParams,
    order: FunctionalOrder,
    record_every: usize,
    rng: &mut impl Rng,
) -> Result<Vec<StepRecord>, SolverError> {
    let mut records = Vec::new();
    let mut record = |t: f64, s: &SlabEnsemble| {
        let lists = s.cell_lists();
        let dens = s.cell_density(&lists);
        for (c, list) in lists.iter().enumerate() {
            let (mut mu, mut t_c) = (Vec3::ZERO, 0.0);
            if !list.is_empty() {
                let m = list.len() as f64;
                mu = list.iter().fold(Vec3::ZERO, |a, &i| a + s.p[i]) / m;
                t_c = list
                    .iter()
                    .map(|&i| (s.p[i] - mu).norm_sq())
                    .sum::<f64>()
                    / (3.0 * m);
            }
            records.push(StepRecord {
                t,
                cell: c,
                density: dens[c],
                mean_momentum: mu,
                temperature: t_c,
                h_value: 0.0,
            });
        }
    };
    record(0.0, slab);
    for step in 1..=steps {
        transport_step(slab, dt / 2.0);
        enskog_collision_step(slab, dt, eps, params, order, (step as f64 - 0.5) * dt, rng)?;
        transport_step(slab, dt / 2.0);
        if step % record_every.max(1) == 0 {
            record(step as f64 * dt, slab);
        }
    }
    Ok(records)
}
