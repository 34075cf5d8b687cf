//! Scaling experiments at constant N * eps^2.
//!
//! A scaling plan sweeps the diameter downward while the particle count
//! grows like 1/eps^2 at fixed box volume, so the collision rate per
//! particle stays put while the gas becomes ideal. Every replica is an
//! independent chaos-sampled periodic configuration evolved by the exact
//! event-driven dynamics; marginal histograms carry the eps^(2s)
//! normalization and replica-group jackknife error bars. The per-momentum
//! reference is a stochastic solver run whose rate constant is fixed to the
//! plan's density constant, never fitted.

use crate::dynamics::{
    hard_sphere_flow, Boundary, DynamicsError, FlowOptions, Particle, PhaseState,
};
use crate::cluster::StateFunction;
use crate::sampling::{stream_rng, MomentumDist, SampleDomain};
use crate::solver::{dsmc_collision_step, CollisionParams, SolverError, VelocityEnsemble};
use crate::stats::{monotone_decreasing_test, RunningMoments, TrendReport};
use crate::vec3::Vec3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("chaos sampling rejected more than 99% of proposals (packing too dense)")]
    PackingTooDense,
    #[error("particle count {0} exceeds the configured cap {1}")]
    ParticleCap(usize, usize),
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("epsilons must be positive and strictly descending")]
    BadSweep,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Histogram controls for marginal estimation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HistogramSpec {
    /// Bins per momentum axis for one-particle projections.
    pub momentum_bins: usize,
    /// Half range in thermal widths.
    pub momentum_halfwidth: f64,
    /// Pair-distance bins on [0, box/2).
    pub pair_r_bins: usize,
    /// Momentum bins per particle in the pair histogram.
    pub pair_momentum_bins: usize,
    /// Bins with smaller expected product counts are left out of the
    /// factorization metric.
    pub min_expected_count: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec {
            momentum_bins: 32,
            momentum_halfwidth: 4.0,
            pair_r_bins: 8,
            pair_momentum_bins: 2,
            min_expected_count: 25.0,
        }
    }
}

/// Declarative description of one eps sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingPlan {
    /// Strictly descending diameters.
    pub epsilons: Vec<f64>,
    /// c in N = round(c * volume / eps^2); also the solver rate constant.
    pub density_constant: f64,
    pub box_side: f64,
    /// Replica count at the smallest diameter.
    pub replicas: usize,
    /// Scale replica counts so each diameter sees the same total samples.
    pub equalize_budget: bool,
    /// Observation times in plain simulation units.
    pub t_grid: Vec<f64>,
    pub momentum: MomentumDist,
    pub estimator: HistogramSpec,
    /// Hard cap on N (defaults to 10_000 in the config layer).
    pub particle_cap: usize,
    pub seed: u64,
    /// Stochastic reference ensemble size and step.
    pub reference_samples: usize,
    pub reference_dt: f64,
}

impl ScalingPlan {
    pub fn particle_count(&self, eps: f64) -> usize {
        let v = self.box_side.powi(3);
        (self.density_constant * v / (eps * eps)).round() as usize
    }

    pub fn replicas_for(&self, eps: f64) -> usize {
        if !self.equalize_budget {
            return self.replicas;
        }
        let n_small = self.particle_count(*self.epsilons.last().unwrap());
        let n = self.particle_count(eps);
        ((self.replicas * n_small) as f64 / n as f64).round().max(1.0) as usize
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.epsilons.is_empty()
            || self.epsilons.windows(2).any(|w| w[1] >= w[0])
            || self.epsilons.iter().any(|&e| e <= 0.0)
        {
            return Err(HarnessError::BadSweep);
        }
        for &eps in &self.epsilons {
            let n = self.particle_count(eps);
            if n > self.particle_cap {
                return Err(HarnessError::ParticleCap(n, self.particle_cap));
            }
        }
        Ok(())
    }

    /// Mean relative speed of the momentum law (Maxwellian estimate used
    /// for the mean free time).
    pub fn mean_relative_speed(&self) -> f64 {
        let s = self.momentum.thermal_width();
        2.0 * (2.0 / std::f64::consts::PI).sqrt() * s * 2.0_f64.sqrt()
    }

    /// Kinetic mean free time at the plan's density constant.
    pub fn mean_free_time(&self) -> f64 {
        1.0 / (std::f64::consts::PI * self.density_constant * self.mean_relative_speed())
    }
}

/// Retry policy of the chaos sampler. Whole-configuration rejection draws
/// from the exact restricted product law but its acceptance decays like
/// exp(-N^2 v_excl / 2V); incremental resampling keeps only the offending
/// particle and stays usable at scaling-plan densities, with residual
/// correlations of the same O(N eps^3 / V) order the experiments measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChaosRetry {
    WholeConfiguration,
    Incremental,
}

/// Draw an n-particle chaos configuration: i.i.d. one-particle draws
/// restricted to allowed configurations. Aborts when the proposal
/// acceptance falls below 1%.
pub fn sample_chaos_state(
    momentum: &MomentumDist,
    n: usize,
    eps: f64,
    box_side: f64,
    retry: ChaosRetry,
    rng: &mut impl Rng,
) -> Result<PhaseState, HarnessError> {
    let boundary = Boundary::Periodic { side: box_side };
    let mut particles: Vec<Particle> = Vec::with_capacity(n);
    let mut proposals = 0u64;
    // a >99% rejection rate cannot finish inside this budget
    let budget = 100 * n as u64 + 10_000;
    while particles.len() < n {
        proposals += 1;
        if proposals > budget {
            return Err(HarnessError::PackingTooDense);
        }
        let q = Vec3::new(
            rng.gen_range(0.0..box_side),
            rng.gen_range(0.0..box_side),
            rng.gen_range(0.0..box_side),
        );
        let overlaps = eps > 0.0
            && particles
                .iter()
                .any(|pt| boundary.pair_distance(pt.q, q) < eps);
        if overlaps {
            if retry == ChaosRetry::WholeConfiguration {
                particles.clear();
            }
            continue;
        }
        particles.push(Particle::new(q, momentum.sample(rng)));
    }
    // zero diameter means plain product sampling; the state still needs a
    // positive diameter, so use a value no pair can violate
    let eps_state = if eps > 0.0 { eps } else { f64::MIN_POSITIVE };
    Ok(PhaseState::new(particles, eps_state, boundary)?)
}

/// Acceptance bookkeeping of the chaos sampler, for rejection-rate oracles.
pub fn chaos_acceptance_probe(
    momentum: &MomentumDist,
    n: usize,
    eps: f64,
    box_side: f64,
    tries: usize,
    rng: &mut impl Rng,
) -> f64 {
    let boundary = Boundary::Periodic { side: box_side };
    let mut accepted = 0usize;
    let mut total = 0usize;
    for _ in 0..tries {
        let mut particles: Vec<Particle> = Vec::with_capacity(n);
        while particles.len() < n {
            total += 1;
            let q = Vec3::new(
                rng.gen_range(0.0..box_side),
                rng.gen_range(0.0..box_side),
                rng.gen_range(0.0..box_side),
            );
            if eps > 0.0
                && particles
                    .iter()
                    .any(|pt| boundary.pair_distance(pt.q, q) < eps)
            {
                continue;
            }
            accepted += 1;
            particles.push(Particle::new(q, momentum.sample(rng)));
        }
    }
    accepted as f64 / total as f64
}

/// A multi-dimensional marginal histogram with its scaling normalization.
#[derive(Debug, Clone)]
pub struct MarginalHistogram {
    pub order: usize,
    /// Bin edges per dimension.
    pub edges: Vec<Vec<f64>>,
    /// Flattened counts (row-major over dimensions).
    pub counts: Vec<f64>,
    /// Tuples offered to the histogram, including out-of-range ones.
    pub samples: f64,
    /// eps^(2s) prefactor carried by every counted tuple.
    pub normalization: f64,
    pub replicas: usize,
}

impl MarginalHistogram {
    fn dims(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.len() - 1).collect()
    }

    fn bin_volume(&self, flat: usize) -> f64 {
        let dims = self.dims();
        let mut rest = flat;
        let mut vol = 1.0;
        for (d, edges) in self.edges.iter().enumerate().rev() {
            let k = rest % dims[d];
            rest /= dims[d];
            vol *= edges[k + 1] - edges[k];
        }
        vol
    }

    /// Integral of the normalized density over the binned range
    /// (per-replica average).
    pub fn integral(&self) -> f64 {
        self.counts.iter().sum::<f64>() * self.normalization / self.replicas as f64
    }

    /// Density value per bin (normalized counts over bin volume).
    pub fn densities(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                c * self.normalization / self.replicas as f64 / self.bin_volume(k)
            })
            .collect()
    }

    /// Mass the histogram should carry: the in-range fraction of the
    /// eps^(2s)-scaled tuple count per replica.
    pub fn expected_mass(&self) -> f64 {
        let kept: f64 = self.counts.iter().sum();
        kept * self.normalization / self.replicas as f64
    }
}

fn axis_edges(halfwidth: f64, bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|k| -halfwidth + 2.0 * halfwidth * k as f64 / bins as f64)
       .collect()
}

fn bin_index(edges: &[f64], v: f64) -> Option<usize> {
    if v < edges[0] || v >= edges[edges.len() - 1] {
        return None;
    }
    let w = (edges[edges.len() - 1] - edges[0]) / (edges.len() - 1) as f64;
    let k = ((v - edges[0]) / w) as usize;
    Some(k.min(edges.len() - 2))
}

/// One-particle momentum projections (one histogram per axis), scaled by
/// eps^2 per the scaling-limit normalization.
pub fn estimate_marginal_momentum(
    states: &[PhaseState],
    spec: &HistogramSpec,
    thermal_width: f64,
) -> Result<Vec<MarginalHistogram>, HarnessError> {
    if states.is_empty() {
        return Err(HarnessError::EmptyEnsemble);
    }
    let eps = states[0].epsilon();
    let half = spec.momentum_halfwidth * thermal_width;
    let edges = axis_edges(half, spec.momentum_bins);
    let mut hists: Vec<MarginalHistogram> = (0..3)
        .map(|_| MarginalHistogram {
            order: 1,
            edges: vec![edges.clone()],
            counts: vec![0.0; spec.momentum_bins],
            samples: 0.0,
            normalization: 0.0,
            replicas: states.len(),
        })
        .collect();
    for st in states {
        for pt in st.particles() {
            for (axis, hist) in hists.iter_mut().enumerate() {
                hist.samples += 1.0;
                if let Some(k) = bin_index(&hist.edges[0], pt.p.0[axis]) {
                    hist.counts[k] += 1.0;
                }
            }
        }
    }
    for h in hists.iter_mut() {
        h.normalization = eps * eps;
    }
    Ok(hists)
}

/// Pair histogram over (minimum-image distance, p_x of each partner), with
/// the eps^4 prefactor. Both orderings of every unordered pair are counted.
pub fn estimate_marginal_pair(
    states: &[PhaseState],
    spec: &HistogramSpec,
    thermal_width: f64,
) -> Result<MarginalHistogram, HarnessError> {
    if states.is_empty() {
        return Err(HarnessError::EmptyEnsemble);
    }
    let eps = states[0].epsilon();
    let side = match states[0].boundary() {
        Boundary::Periodic { side } => side,
        Boundary::Unbounded => panic!("pair marginals assume a periodic box"),
    };
    let r_max = side / 2.0;
    let r_edges: Vec<f64> = (0..=spec.pair_r_bins)
        .map(|k| r_max * k as f64 / spec.pair_r_bins as f64)
        .collect();
    let half = spec.momentum_halfwidth * thermal_width;
    let p_edges = axis_edges(half, spec.pair_momentum_bins);
    let nb = spec.pair_r_bins * spec.pair_momentum_bins * spec.pair_momentum_bins;
    let mut hist = MarginalHistogram {
        order: 2,
        edges: vec![r_edges.clone(), p_edges.clone(), p_edges.clone()],
        counts: vec![0.0; nb],
        samples: 0.0,
        normalization: 0.0,
        replicas: states.len(),
    };
    for st in states {
        let n = st.len();
        let parts = st.particles();
        for i in 0..n {
            for j in (i + 1)..n {
                let r = st.boundary().pair_distance(parts[i].q, parts[j].q);
                hist.samples += 2.0;
                let Some(kr) = bin_index(&r_edges, r) else {
                    continue;
                };
                for (a, b) in [(i, j), (j, i)] {
                    if let (Some(ka), Some(kb)) = (
                        bin_index(&p_edges, parts[a].p.x()),
                        bin_index(&p_edges, parts[b].p.x()),
                    ) {
                        hist.counts
                            [(kr * spec.pair_momentum_bins + ka) * spec.pair_momentum_bins + kb] +=
                            1.0;
                    }
                }
            }
        }
    }
    hist.normalization = eps.powi(4);
    Ok(hist)
}

/// Factorization defect of the pair histogram against the product of its
/// own one-particle marginals: mean over kept bins of |ratio - 1|. Bins
/// with pair distance below `shell_radius` or with expected counts below
/// the configured floor are excluded.
pub fn chaos_metric(
    pair: &MarginalHistogram,
    spec: &HistogramSpec,
    shell_radius: f64,
    box_side: f64,
) -> f64 {
    let nr = pair.edges[0].len() - 1;
    let np = pair.edges[1].len() - 1;
    let total: f64 = pair.counts.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    // marginal momentum fractions from the pair histogram itself
    let mut pa = vec![0.0; np];
    let mut pb = vec![0.0; np];
    let mut pr = vec![0.0; nr];
    for kr in 0..nr {
        for ka in 0..np {
            for kb in 0..np {
                let c = pair.counts[(kr * np + ka) * np + kb];
                pa[ka] += c;
                pb[kb] += c;
                pr[kr] += c;
            }
        }
    }
    // ideal-gas shell masses over the binned range
    let vol = box_side.powi(3);
    let mut shell = vec![0.0; nr];
    let mut shell_total = 0.0;
    for (kr, s) in shell.iter_mut().enumerate() {
        let (r0, r1) = (pair.edges[0][kr], pair.edges[0][kr + 1]);
        *s = 4.0 / 3.0 * std::f64::consts::PI * (r1.powi(3) - r0.powi(3)) / vol;
        shell_total += *s;
    }
    // in-range momentum fractions
    let pa_sum: f64 = pa.iter().sum();
    let pb_sum: f64 = pb.iter().sum();
    let mut sum = 0.0;
    let mut kept = 0usize;
    for kr in 0..nr {
        if pair.edges[0][kr] < shell_radius {
            continue;
        }
        for ka in 0..np {
            for kb in 0..np {
                let expected = total * (shell[kr] / shell_total) * (pa[ka] / pa_sum)
                    * (pb[kb] / pb_sum);
                if expected < spec.min_expected_count {
                    continue;
                }
                let ratio = pair.counts[(kr * np + ka) * np + kb] / expected;
                sum += (ratio - 1.0).abs();
                kept += 1;
            }
        }
    }
    if kept == 0 {
        0.0
    } else {
        sum / kept as f64
    }
}

/// L1 distance between unit-normalized per-axis momentum marginals,
/// averaged over the three axes.
pub fn l1_momentum_distance(a: &[MarginalHistogram], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (axis, hist) in a.iter().enumerate() {
        let ha: f64 = hist.counts.iter().sum();
        let hb: f64 = b[axis].iter().sum();
        let mut l1 = 0.0;
        for (ca, cb) in hist.counts.iter().zip(b[axis].iter()) {
            l1 += (ca / ha - cb / hb).abs();
        }
        total += l1;
    }
    total / a.len() as f64
}

/// Per-axis momentum histogram of a sample set on the same edges the
/// marginal estimator uses.
pub fn momentum_histogram(
    samples: &[Vec3],
    spec: &HistogramSpec,
    thermal_width: f64,
) -> Vec<Vec<f64>> {
    let half = spec.momentum_halfwidth * thermal_width;
    let edges = axis_edges(half, spec.momentum_bins);
    let mut out = vec![vec![0.0; spec.momentum_bins]; 3];
    for p in samples {
        for axis in 0..3 {
            if let Some(k) = bin_index(&edges, p.0[axis]) {
                out[axis][k] += 1.0;
            }
        }
    }
    out
}

/// One row of the scaling report.
#[derive(Debug, Clone)]
pub struct BgReportRow {
    pub epsilon: f64,
    pub t: f64,
    pub l1: f64,
    pub l1_err: f64,
    pub chi: f64,
    pub chi_err: f64,
    pub n: usize,
    pub replicas: usize,
}

#[derive(Debug, Clone)]
pub struct BgReport {
    pub rows: Vec<BgReportRow>,
    /// Trend of L1 across the sweep per observation time.
    pub l1_trends: Vec<TrendReport>,
    /// Trend of the chaos metric across the sweep per observation time.
    pub chi_trends: Vec<TrendReport>,
    /// MD energy per particle minus reference second moment, in combined
    /// standard errors.
    pub energy_consistency_z: f64,
}

/// Replica groups used for jackknife error bars (fewer when the replica
/// budget is small).
const JACKKNIFE_GROUPS: usize = 8;

struct ReplicaAccumulator {
    momentum: Vec<Vec<MarginalHistogram>>,
    pairs: Vec<MarginalHistogram>,
}

fn merge_hist(into: &mut MarginalHistogram, from: &MarginalHistogram) {
    for (a, b) in into.counts.iter_mut().zip(from.counts.iter()) {
        *a += b;
    }
    into.samples += from.samples;
    into.replicas += from.replicas;
}

/// Runs the sweep: chaos sampling, event-driven evolution to each
/// observation time, marginal estimation, reference comparison and trend
/// statistics. Replicas run in parallel on deterministic seed streams.
pub fn bg_convergence_report(plan: &ScalingPlan) -> Result<BgReport, HarnessError> {
    plan.validate()?;
    let spec = plan.estimator;
    let width = plan.momentum.thermal_width();
    let params = CollisionParams {
        rate_multiplier: plan.density_constant,
        majorant_speed: 16.0 * width,
    };

    // reference momentum histograms per observation time
    let mut reference: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut ref_second_moment = Vec::new();
    {
        let mut rng = stream_rng(plan.seed, u64::MAX);
        let mut ens =
            VelocityEnsemble::from_dist(&plan.momentum, plan.reference_samples, &mut rng);
        let mut t_now = 0.0;
        for &t in &plan.t_grid {
            let steps = ((t - t_now) / plan.reference_dt).round().max(0.0) as usize;
            for _ in 0..steps {
                dsmc_collision_step(&mut ens, plan.reference_dt, &params, &mut rng)?;
            }
            t_now += steps as f64 * plan.reference_dt;
            reference.push(momentum_histogram(&ens.samples, &spec, width));
            let m2 = ens.energy_sum() / ens.samples.len() as f64;
            ref_second_moment.push(m2);
        }
    }

    let mut rows = Vec::new();
    let mut md_energy_sum = 0.0;
    let mut md_energy_count = 0.0;
    for (ei, &eps) in plan.epsilons.iter().enumerate() {
        let n = plan.particle_count(eps);
        let replicas = plan.replicas_for(eps);
        let n_groups = JACKKNIFE_GROUPS.min(replicas);
        let groups: Vec<ReplicaAccumulator> = (0..n_groups)
            .into_par_iter()
            .map(|g| -> Result<ReplicaAccumulator, HarnessError> {
                let lo = replicas * g / n_groups;
                let hi = replicas * (g + 1) / n_groups;
                let mut acc: Option<ReplicaAccumulator> = None;
                for r in lo..hi {
                    let stream = (ei as u64) << 32 | r as u64;
                    let mut rng = stream_rng(plan.seed, stream);
                    let mut state = sample_chaos_state(
                        &plan.momentum,
                        n,
                        eps,
                        plan.box_side,
                        ChaosRetry::Incremental,
                        &mut rng,
                    )?;
                    let mut t_now = 0.0;
                    let mut momentum = Vec::new();
                    let mut pairs = Vec::new();
                    for &t in &plan.t_grid {
                        state = hard_sphere_flow(&state, t - t_now, FlowOptions::default())?;
                        t_now = t;
                        let snap = std::slice::from_ref(&state);
                        momentum.push(estimate_marginal_momentum(snap, &spec, width)?);
                        pairs.push(estimate_marginal_pair(snap, &spec, width)?);
                    }
                    match acc.as_mut() {
                        None => {
                            acc = Some(ReplicaAccumulator { momentum, pairs });
                        }
                        Some(a) => {
                            for (ti, hists) in momentum.into_iter().enumerate() {
                                for (h_into, h_from) in
                                    a.momentum[ti].iter_mut().zip(hists.iter())
                                {
                                    merge_hist(h_into, h_from);
                                }
                            }
                            for (ti, h) in pairs.into_iter().enumerate() {
                                merge_hist(&mut a.pairs[ti], &h);
                            }
                        }
                    }
                }
                acc.ok_or(HarnessError::EmptyEnsemble)
            })
            .collect::<Result<Vec<_>, _>>()?;

        // energy bookkeeping from replica zero: conservation makes any
        // time equivalent, so the initial state suffices
        {
            let mut rng = stream_rng(plan.seed, (ei as u64) << 32);
            let state = sample_chaos_state(
                &plan.momentum,
                n,
                eps,
                plan.box_side,
                ChaosRetry::Incremental,
                &mut rng,
            )?;
            md_energy_sum += state.momentum_square_sum();
            md_energy_count += n as f64;
        }

        for (ti, &t) in plan.t_grid.iter().enumerate() {
            // pooled histograms
            let mut pooled_m = groups[0].momentum[ti].clone();
            let mut pooled_p = groups[0].pairs[ti].clone();
            for g in &groups[1..] {
                for (h_into, h_from) in pooled_m.iter_mut().zip(g.momentum[ti].iter()) {
                    merge_hist(h_into, h_from);
                }
                merge_hist(&mut pooled_p, &g.pairs[ti]);
            }
            let l1 = l1_momentum_distance(&pooled_m, &reference[ti]);
            let chi = chaos_metric(&pooled_p, &spec, 2.0 * eps, plan.box_side);

            // jackknife over replica groups
            let mut l1_jack = Vec::new();
            let mut chi_jack = Vec::new();
            for leave in 0..groups.len() {
                let mut m = None::<Vec<MarginalHistogram>>;
                let mut p = None::<MarginalHistogram>;
                for (gi, g) in groups.iter().enumerate() {
                    if gi == leave {
                        continue;
                    }
                    match m.as_mut() {
                        None => {
                            m = Some(g.momentum[ti].clone());
                            p = Some(g.pairs[ti].clone());
                        }
                        Some(mm) => {
                            for (h_into, h_from) in mm.iter_mut().zip(g.momentum[ti].iter())
                            {
                                merge_hist(h_into, h_from);
                            }
                            merge_hist(p.as_mut().unwrap(), &g.pairs[ti]);
                        }
                    }
                }
                l1_jack.push(l1_momentum_distance(&m.unwrap(), &reference[ti]));
                chi_jack.push(chaos_metric(&p.unwrap(), &spec, 2.0 * eps, plan.box_side));
            }
            let jk_err = |vals: &[f64]| -> f64 {
                let k = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / k;
                ((k - 1.0) / k
                    * vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sqrt()
            };
            rows.push(BgReportRow {
                epsilon: eps,
                t,
                l1,
                l1_err: jk_err(&l1_jack),
                chi,
                chi_err: jk_err(&chi_jack),
                n,
                replicas,
            });
        }
    }

    // trends across the sweep at each observation time
    let mut l1_trends = Vec::new();
    let mut chi_trends = Vec::new();
    for (ti, _) in plan.t_grid.iter().enumerate() {
        let series: Vec<&BgReportRow> = plan
            .epsilons
            .iter()
            .enumerate()
            .map(|(ei, _)| &rows[ei * plan.t_grid.len() + ti])
            .collect();
        let vals: Vec<f64> = series.iter().map(|r| r.l1).collect();
        let errs: Vec<f64> = series.iter().map(|r| r.l1_err).collect();
        l1_trends.push(monotone_decreasing_test(&vals, &errs, 0.95));
        let vals: Vec<f64> = series.iter().map(|r| r.chi).collect();
        let errs: Vec<f64> = series.iter().map(|r| r.chi_err).collect();
        chi_trends.push(monotone_decreasing_test(&vals, &errs, 0.95));
    }

    // energy consistency: MD per-particle |p|^2 against the reference
    // second moment; both conserve exactly, so the spread comes from the
    // initial sampling alone
    let ref_m2 = ref_second_moment.iter().sum::<f64>() / ref_second_moment.len() as f64;
    let var_psq = {
        // fourth-moment spread of the momentum law, from the exact values
        // of an axis-wise Gaussian as a conservative stand-in
        let w = plan.momentum.thermal_width();
        2.0 * 3.0 * w.powi(4) + plan.momentum.mean_square().powi(2) * 0.1
    };
    let se = (var_psq / md_energy_count + var_psq / plan.reference_samples as f64).sqrt();
    let z = (md_energy_sum / md_energy_count - ref_m2) / se;

    Ok(BgReport {
        rows,
        l1_trends,
        chi_trends,
        energy_consistency_z: z,
    })
}

/// Defect of the interacting flow against the free flow paired with smooth
/// observables over chaos states, per diameter.
pub fn factorization_test(
    b: &StateFunction,
    domain: &SampleDomain,
    epsilons: &[f64],
    t: f64,
    samples: u64,
    seed: u64,
) -> Result<Vec<(f64, crate::stats::Estimate)>, HarnessError> {
    let s = b.arity();
    let mut out = Vec::new();
    for (ei, &eps) in epsilons.iter().enumerate() {
        let mut rng = stream_rng(seed, ei as u64);
        let mut acc = RunningMoments::new();
        let mut drawn = 0u64;
        while drawn < samples {
            let mut point = Vec::with_capacity(s);
            while point.len() < s {
                let (cand, _) = domain.sample(&mut rng);
                if point
                    .iter()
                    .all(|p: &Particle| (p.q - cand.q).norm() >= eps)
                {
                    point.push(cand);
                }
            }
            drawn += 1;
            let state = PhaseState::new(point.clone(), eps, Boundary::Unbounded)?;
            let flowed = hard_sphere_flow(&state, t, FlowOptions::default())?;
            let mut free = point.clone();
            for pt in free.iter_mut() {
                pt.q += pt.p * t;
            }
            acc.push(b.eval(flowed.particles()) - b.eval(&free));
        }
        out.push((eps, acc.estimate()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{BoxDomain, MomentumEnvelope};

    fn maxwell() -> MomentumDist {
        MomentumDist::Gaussian { sigma: 1.0 }
    }

    #[test]
    fn chaos_single_particle_never_rejected() {
        let mut rng = stream_rng(1, 0);
        let st = sample_chaos_state(
            &maxwell(),
            1,
            0.2,
            1.0,
            ChaosRetry::WholeConfiguration,
            &mut rng,
        )
        .unwrap();
        assert_eq!(st.len(), 1);
    }

    #[test]
    fn chaos_zero_diameter_is_plain_product() {
        let mut rng = stream_rng(2, 0);
        let st =
            sample_chaos_state(&maxwell(), 50, 0.0, 1.0, ChaosRetry::Incremental, &mut rng)
                .unwrap();
        assert_eq!(st.len(), 50);
    }

    /// Exclusion-volume oracle: per-proposal acceptance is about
    /// 1 - (N/2) * (4/3) pi eps^3 / V in the dilute regime.
    #[test]
    fn chaos_acceptance_matches_exclusion_volume_estimate() {
        let n = 100usize;
        let box_side = 1.0;
        // N eps^3 / V = 1e-3
        let eps = 1e-5_f64.cbrt();
        let mut rng = stream_rng(3, 0);
        let acc = chaos_acceptance_probe(&maxwell(), n, eps, box_side, 40, &mut rng);
        assert!(acc > 0.9, "acceptance {acc}");
        let v_ex = 4.0 / 3.0 * std::f64::consts::PI * eps.powi(3);
        let predicted = 1.0 - 0.5 * n as f64 * v_ex;
        assert!((acc - predicted).abs() < 0.01, "acc {acc} vs {predicted}");
    }

    #[test]
    fn chaos_dense_packing_aborts() {
        let mut rng = stream_rng(4, 0);
        let r = sample_chaos_state(
            &maxwell(),
            200,
            0.45,
            1.0,
            ChaosRetry::WholeConfiguration,
            &mut rng,
        );
        assert!(matches!(r, Err(HarnessError::PackingTooDense)));
    }

    fn small_ensemble(eps: f64, n: usize, replicas: usize, seed: u64) -> Vec<PhaseState> {
        (0..replicas)
            .map(|r| {
                let mut rng = stream_rng(seed, r as u64);
                sample_chaos_state(
                    &maxwell(),
                    n,
                    eps,
                    2.0,
                    ChaosRetry::Incremental,
                    &mut rng,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn marginal_momentum_recovers_initial_law() {
        let states = small_ensemble(0.05, 200, 40, 5);
        let spec = HistogramSpec::default();
        let hists = estimate_marginal_momentum(&states, &spec, 1.0).unwrap();
        let env = MomentumEnvelope { sigma: 1.0 };
        for hist in &hists {
            let dens = hist.densities();
            let edges = &hist.edges[0];
            let n_per_replica = 200.0;
            for (k, d) in dens.iter().enumerate() {
                let mid = 0.5 * (edges[k] + edges[k + 1]);
                // 1D projection of the Maxwellian times the eps^2 N mass
                let gauss = (-mid * mid / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
                let expect = gauss * n_per_replica * 0.05 * 0.05;
                let sigma_bin = (expect
                    * hist.normalization
                    / (hist.replicas as f64 * (edges[k + 1] - edges[k])))
                .sqrt()
                .max(1e-9);
                assert!(
                    (d - expect).abs() < 5.0 * sigma_bin + 0.1 * expect + 1e-4,
                    "bin {k}: {d} vs {expect}"
                );
            }
            let _ = env;
        }
    }

    #[test]
    fn marginal_mass_bookkeeping_is_exact() {
        let states = small_ensemble(0.1, 100, 10, 6);
        let spec = HistogramSpec::default();
        let hists = estimate_marginal_momentum(&states, &spec, 1.0).unwrap();
        for h in &hists {
            assert!((h.integral() - h.expected_mass()).abs() < 1e-6 * h.expected_mass());
        }
        let pair = estimate_marginal_pair(&states, &spec, 1.0).unwrap();
        assert!((pair.integral() - pair.expected_mass()).abs() < 1e-6 * pair.expected_mass());
    }

    #[test]
    fn collisionless_evolution_keeps_momentum_marginal() {
        let states = small_ensemble(1e-9, 200, 10, 7);
        let spec = HistogramSpec::default();
        let before = estimate_marginal_momentum(&states, &spec, 1.0).unwrap();
        let evolved: Vec<PhaseState> = states
            .iter()
            .map(|s| hard_sphere_flow(s, 0.4, FlowOptions::default()).unwrap())
            .collect();
        let after = estimate_marginal_momentum(&evolved, &spec, 1.0).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a.counts, b.counts);
        }
    }

    #[test]
    fn pair_histogram_factorizes_at_t0_away_from_contact() {
        let states = small_ensemble(0.1, 300, 60, 8);
        let spec = HistogramSpec::default();
        let pair = estimate_marginal_pair(&states, &spec, 1.0).unwrap();
        let chi = chaos_metric(&pair, &spec, 0.2, 2.0);
        assert!(chi < 0.05, "chi = {chi}");
    }

    #[test]
    fn bg_smoke_report_shapes_and_reproducibility() {
        let plan = ScalingPlan {
            epsilons: vec![0.3, 0.2],
            density_constant: 0.5,
            box_side: 2.0,
            replicas: 12,
            equalize_budget: true,
            t_grid: vec![0.1, 0.2],
            momentum: maxwell(),
            estimator: HistogramSpec::default(),
            particle_cap: 10_000,
            seed: 42,
            reference_samples: 20_000,
            reference_dt: 0.01,
        };
        let a = bg_convergence_report(&plan).unwrap();
        let b = bg_convergence_report(&plan).unwrap();
        assert_eq!(a.rows.len(), 4);
        for (ra, rb) in a.rows.iter().zip(b.rows.iter()) {
            assert_eq!(ra.l1, rb.l1);
            assert_eq!(ra.chi, rb.chi);
            assert_eq!(ra.n, rb.n);
        }
        assert!(a.energy_consistency_z.abs() < 5.0);
    }

    #[test]
    fn factorization_vanishes_for_single_particle() {
        let b = StateFunction::new(1, |pt| pt[0].q.x() + pt[0].p.norm_sq());
        let domain = SampleDomain {
            bounds: BoxDomain::cube(1.0),
            momentum: MomentumEnvelope { sigma: 1.0 },
        };
        let out = factorization_test(&b, &domain, &[0.2, 0.1], 0.5, 500, 9).unwrap();
        for (_, est) in out {
            assert_eq!(est.value, 0.0);
        }
    }

    #[test]
    fn factorization_vanishes_for_separated_supports() {
        // pair observable supported only where both particles sit in
        // far-apart windows; flows cannot connect them within t
        let b = StateFunction::new(2, |pt| {
            let w1 = (-(pt[0].q - Vec3::new(0.5, 0.5, 0.5)).norm_sq() * 40.0).exp();
            let w2 = (-(pt[1].q - Vec3::new(30.0, 0.5, 0.5)).norm_sq() * 40.0).exp();
            w1 * w2 * (1.0 + pt[0].p.x())
        });
        let domain = SampleDomain {
            bounds: BoxDomain::cube(1.0),
            momentum: MomentumEnvelope { sigma: 1.0 },
        };
        let out = factorization_test(&b, &domain, &[0.2], 0.5, 400, 10).unwrap();
        for (_, est) in out {
            assert_eq!(est.value, 0.0);
        }
    }

    #[test]
    fn factorization_defect_decreases_with_diameter() {
        // collisions deflect the relative trajectory, so a window on the
        // pair separation picks up the interacting-vs-free defect; an odd
        // momentum factor would average the signal away
        let b = StateFunction::new(2, |pt| (-(pt[0].q - pt[1].q).norm_sq()).exp());
        let domain = SampleDomain {
            bounds: BoxDomain::cube(1.0),
            momentum: MomentumEnvelope { sigma: 1.0 },
        };
        let eps = [0.3, 0.2, 0.12];
        let out = factorization_test(&b, &domain, &eps, 0.8, 100_000, 11).unwrap();
        let mags: Vec<f64> = out.iter().map(|(_, e)| e.value.abs()).collect();
        let errs: Vec<f64> = out.iter().map(|(_, e)| e.std_error).collect();
        let trend = crate::stats::monotone_decreasing_test(&mags, &errs, 0.95);
        assert!(trend.decreasing, "defects {mags:?} errs {errs:?}");
        // collision probability scales like eps^2
        let slope = crate::stats::log_log_slope(&eps, &mags);
        assert!((slope - 2.0).abs() < 0.7, "slope {slope}");
    }
}
