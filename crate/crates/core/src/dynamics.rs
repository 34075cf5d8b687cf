//! Exact event-driven dynamics of n hard spheres.
//!
//! A trajectory alternates free flight `q_i <- q_i + p_i * dt` with elastic
//! pair collisions. Collision times are roots of `|dq + t*dp| = eps` and the
//! momentum update reflects the normal component of the relative momentum,
//! conserving total momentum and kinetic energy exactly up to rounding.
//!
//! Two schedulers produce identical trajectories: full recomputation of the
//! earliest pair event after every collision for small systems, and a binary
//! heap with collision-count invalidation for large ones. Ties are broken by
//! lexicographic pair index so trajectories are deterministic.

use crate::vec3::Vec3;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use thiserror::Error;

/// Relative tolerance for unit-normal checks.
const ETA_NORM_TOL: f64 = 1e-9;
/// Relative pair-overlap slack admitted by the allowed-configuration check.
const OVERLAP_SLACK: f64 = 1e-12;
/// Relative contact tolerance at event times.
const CONTACT_TOL: f64 = 1e-9;
/// Normal relative momenta below this scale are treated as grazing no-ops.
fn grazing_tol(dp: Vec3) -> f64 {
    1e-12 * dp.norm().max(1.0)
}

/// Particle count at which the flow switches from full event recomputation
/// to the heap scheduler.
const HEAP_SCHEDULER_MIN_N: usize = 65;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("contact normal is not a unit vector (|eta| = {0})")]
    NonUnitNormal(f64),
    #[error("contact normal points into the wrong hemisphere (<eta, p1-p2> = {0})")]
    WrongHemisphere(f64),
    #[error("component is not finite")]
    NonFinite,
    #[error("epsilon must be positive (got {0})")]
    BadEpsilon(f64),
    #[error("periodic box side {side} must exceed twice the diameter {eps}")]
    BoxTooSmall { side: f64, eps: f64 },
    #[error("particles {0} and {1} overlap (distance {2}, diameter {3})")]
    Overlap(usize, usize, f64, f64),
    #[error("event backlog exceeded cap of {0}; configuration suggests a pathological grazing chain")]
    EventBacklog(usize),
    #[error("post-event overlap beyond tolerance between {0} and {1} (distance {2})")]
    PostEventOverlap(usize, usize, f64),
}

/// One hard sphere: position and momentum (unit mass, dimensionless).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub q: Vec3,
    pub p: Vec3,
}

impl Particle {
    pub fn new(q: Vec3, p: Vec3) -> Self {
        Particle { q, p }
    }
}

/// Spatial domain of the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Boundary {
    Unbounded,
    /// Cubic box `[0, side)^3` with minimum-image pair distances.
    Periodic { side: f64 },
}

impl Boundary {
    /// Separation `q_i - q_j` under the minimum-image convention.
    pub fn separation(&self, qi: Vec3, qj: Vec3) -> Vec3 {
        let mut d = qi - qj;
        if let Boundary::Periodic { side } = self {
            for c in d.0.iter_mut() {
                *c -= side * (*c / side).round();
            }
        }
        d
    }

    pub fn pair_distance(&self, qi: Vec3, qj: Vec3) -> f64 {
        self.separation(qi, qj).norm()
    }

    /// Wrap a position into the primary cell.
    pub fn wrap(&self, q: Vec3) -> Vec3 {
        match self {
            Boundary::Unbounded => q,
            Boundary::Periodic { side } => {
                let mut w = q;
                for c in w.0.iter_mut() {
                    *c -= side * (*c / side).floor();
                }
                w
            }
        }
    }
}

/// An n-sphere configuration with its diameter and domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    particles: Vec<Particle>,
    epsilon: f64,
    boundary: Boundary,
}

impl PhaseState {
    /// Validates finiteness, the diameter, the box size and the
    /// allowed-configuration requirement `|q_i - q_j| >= eps*(1 - 1e-12)`.
    pub fn new(
        particles: Vec<Particle>,
        epsilon: f64,
        boundary: Boundary,
    ) -> Result<Self, DynamicsError> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(DynamicsError::BadEpsilon(epsilon));
        }
        if let Boundary::Periodic { side } = boundary {
            if !(side > 2.0 * epsilon) {
                return Err(DynamicsError::BoxTooSmall {
                    side,
                    eps: epsilon,
                });
            }
        }
        for pt in &particles {
            if !pt.q.is_finite() || !pt.p.is_finite() {
                return Err(DynamicsError::NonFinite);
            }
        }
        let state = PhaseState {
            particles,
            epsilon,
            boundary,
        };
        state.check_allowed()?;
        Ok(state)
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.particles
            .iter()
            .fold(Vec3::ZERO, |acc, pt| acc + pt.p)
    }

    /// Sum of |p_i|^2 (twice the kinetic energy at unit mass).
    pub fn momentum_square_sum(&self) -> f64 {
        self.particles.iter().map(|pt| pt.p.norm_sq()).sum()
    }

    pub fn min_pair_distance(&self) -> Option<f64> {
        let n = self.particles.len();
        let mut min = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self
                    .boundary
                    .pair_distance(self.particles[i].q, self.particles[j].q);
                min = min.min(d);
            }
        }
        (n >= 2).then_some(min)
    }

    fn check_allowed(&self) -> Result<(), DynamicsError> {
        let n = self.particles.len();
        let floor = self.epsilon * (1.0 - OVERLAP_SLACK);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self
                    .boundary
                    .pair_distance(self.particles[i].q, self.particles[j].q);
                if d < floor {
                    return Err(DynamicsError::Overlap(i, j, d, self.epsilon));
                }
            }
        }
        Ok(())
    }
}

/// A predicted pair contact: time, pair (i < j), and the unit contact
/// normal pointing from particle j to particle i at the moment of contact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionEvent {
    pub time: f64,
    pub pair: (usize, usize),
    pub eta: Vec3,
}

/// Elastic hard-sphere momentum exchange along the unit normal `eta`.
///
/// Requires `<eta, p1 - p2> >= 0`; the grazing case (zero normal component)
/// returns the momenta unchanged. The transform is an involution: applying
/// it again with `-eta` restores the inputs exactly.
pub fn collide(p1: Vec3, p2: Vec3, eta: Vec3) -> Result<(Vec3, Vec3), DynamicsError> {
    let norm = eta.norm();
    if (norm - 1.0).abs() > ETA_NORM_TOL {
        return Err(DynamicsError::NonUnitNormal(norm));
    }
    let g = eta.dot(p1 - p2);
    if g < 0.0 {
        return Err(DynamicsError::WrongHemisphere(g));
    }
    Ok(reflect(p1, p2, eta))
}

/// The raw momentum transform, valid for either normal orientation.
#[inline]
pub(crate) fn reflect(p1: Vec3, p2: Vec3, eta: Vec3) -> (Vec3, Vec3) {
    let g = eta.dot(p1 - p2);
    (p1 - eta * g, p2 + eta * g)
}

/// 1 if all pair distances are at least `epsilon`, else 0. Plain Euclidean
/// distances; see [`PhaseState::min_pair_distance`] for the boundary-aware
/// check.
pub fn allowed_indicator(positions: &[Vec3], epsilon: f64) -> f64 {
    let n = positions.len();
    for i in 0..n {
        for j in (i + 1)..n {
            if (positions[i] - positions[j]).norm() < epsilon {
                return 0.0;
            }
        }
    }
    1.0
}

/// Earliest positive root of `|d + t*w| = eps` with the approach condition
/// `<d, w> < 0`, or `None`. Uses the cancellation-free root form
/// `t = 2c / (-b + sqrt(disc))`.
fn contact_time(d: Vec3, w: Vec3, epsilon: f64) -> Option<f64> {
    let a = w.norm_sq();
    if a == 0.0 {
        return None;
    }
    let b = 2.0 * d.dot(w);
    if b >= 0.0 {
        return None; // receding or tangent
    }
    let c = d.norm_sq() - epsilon * epsilon;
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return None;
    }
    let t = 2.0 * c / (-b + disc.sqrt());
    if t.is_finite() {
        Some(t.max(0.0))
    } else {
        None
    }
}

/// Earliest contact time for the pair over the candidate image offsets.
fn pair_contact_time(
    boundary: Boundary,
    qi: Vec3,
    qj: Vec3,
    pi: Vec3,
    pj: Vec3,
    epsilon: f64,
) -> Option<f64> {
    let w = pi - pj;
    match boundary {
        Boundary::Unbounded => contact_time(qi - qj, w, epsilon),
        Boundary::Periodic { side } => {
            // Nearest-image candidates over the 27 neighbor offsets of the
            // minimum-image separation.
            let d0 = boundary.separation(qi, qj);
            let mut best: Option<f64> = None;
            for ox in -1..=1 {
                for oy in -1..=1 {
                    for oz in -1..=1 {
                        let d = d0
                            + Vec3::new(ox as f64, oy as f64, oz as f64) * side;
                        if let Some(t) = contact_time(d, w, epsilon) {
                            if best.is_none_or(|b| t < b) {
                                best = Some(t);
                            }
                        }
                    }
                }
            }
            best
        }
    }
}

/// Earliest future pair-contact event of the state, or `None` if no pair
/// ever comes to contact. Grazing contacts are reported like any other;
/// the flow driver decides what to do with them.
pub fn next_collision(state: &PhaseState) -> Option<CollisionEvent> {
    next_collision_excluding(state, &HashSet::new())
}

fn next_collision_excluding(
    state: &PhaseState,
    excluded: &HashSet<(usize, usize)>,
) -> Option<CollisionEvent> {
    let n = state.particles.len();
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            if excluded.contains(&(i, j)) {
                continue;
            }
            let (a, b) = (&state.particles[i], &state.particles[j]);
            if let Some(t) =
                pair_contact_time(state.boundary, a.q, b.q, a.p, b.p, state.epsilon)
            {
                let better = match best {
                    None => true,
                    Some((bt, bi, bj)) => t < bt || (t == bt && (i, j) < (bi, bj)),
                };
                if better {
                    best = Some((t, i, j));
                }
            }
        }
    }
    best.map(|(t, i, j)| {
        let a = &state.particles[i];
        let b = &state.particles[j];
        let eta = contact_normal(state.boundary, a, b, t);
        CollisionEvent {
            time: t,
            pair: (i, j),
            eta,
        }
    })
}

/// Unit normal from particle j to particle i at the projected contact time.
fn contact_normal(boundary: Boundary, a: &Particle, b: &Particle, t: f64) -> Vec3 {
    let qi = a.q + a.p * t;
    let qj = b.q + b.p * t;
    let d = boundary.separation(qi, qj);
    d.normalized().unwrap_or(Vec3::new(1.0, 0.0, 0.0))
}

/// Tuning knobs for [`hard_sphere_flow`].
#[derive(Debug, Clone, Copy)]
pub struct FlowOptions {
    /// Cap on processed collision events per flow call.
    pub max_events: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            max_events: 1_000_000,
        }
    }
}

/// Summary of one flow call.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlowReport {
    pub collisions: usize,
    pub grazing_skips: usize,
}

/// Advance the state by `t` (signed). Free flight between events, the
/// collision transform at each contact in chronological order; negative `t`
/// flips momenta, evolves `|t|`, and flips back.
pub fn hard_sphere_flow(
    state: &PhaseState,
    t: f64,
    opts: FlowOptions,
) -> Result<PhaseState, DynamicsError> {
    let (out, _) = hard_sphere_flow_reported(state, t, opts)?;
    Ok(out)
}

pub fn hard_sphere_flow_reported(
    state: &PhaseState,
    t: f64,
    opts: FlowOptions,
) -> Result<(PhaseState, FlowReport), DynamicsError> {
    if !t.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    let mut work = state.clone();
    if t < 0.0 {
        for pt in work.particles.iter_mut() {
            pt.p = -pt.p;
        }
        let report = evolve_forward(&mut work, -t, opts, &mut |_, _, _| {})?;
        for pt in work.particles.iter_mut() {
            pt.p = -pt.p;
        }
        Ok((work, report))
    } else {
        let report = evolve_forward(&mut work, t, opts, &mut |_, _, _| {})?;
        Ok((work, report))
    }
}

/// Forward flow with a per-event callback `(time, pair, state)` used by
/// trajectory dumps. `t` must be nonnegative.
pub fn hard_sphere_flow_traced(
    state: &PhaseState,
    t: f64,
    opts: FlowOptions,
    on_event: &mut dyn FnMut(f64, (usize, usize), &PhaseState),
) -> Result<(PhaseState, FlowReport), DynamicsError> {
    if !t.is_finite() || t < 0.0 {
        return Err(DynamicsError::NonFinite);
    }
    let mut work = state.clone();
    let report = evolve_forward(&mut work, t, opts, on_event)?;
    Ok((work, report))
}

fn drift_all(state: &mut PhaseState, dt: f64) {
    for pt in state.particles.iter_mut() {
        pt.q += pt.p * dt;
    }
    if let Boundary::Periodic { .. } = state.boundary {
        for pt in state.particles.iter_mut() {
            pt.q = state.boundary.wrap(pt.q);
        }
    }
}

/// Horizon within which 27-image contact prediction is exhaustive: relative
/// displacements stay below half a box side.
fn prediction_horizon(state: &PhaseState) -> f64 {
    match state.boundary {
        Boundary::Unbounded => f64::INFINITY,
        Boundary::Periodic { side } => {
            let vmax = state
                .particles
                .iter()
                .map(|pt| pt.p.norm())
                .fold(0.0_f64, f64::max);
            if vmax == 0.0 {
                f64::INFINITY
            } else {
                0.45 * side / (2.0 * vmax)
            }
        }
    }
}

fn evolve_forward(
    state: &mut PhaseState,
    t: f64,
    opts: FlowOptions,
    on_event: &mut dyn FnMut(f64, (usize, usize), &PhaseState),
) -> Result<FlowReport, DynamicsError> {
    if state.particles.len() >= HEAP_SCHEDULER_MIN_N {
        evolve_heap(state, t, opts, on_event)
    } else {
        evolve_rescan(state, t, opts, on_event)
    }
}

/// Pairs skipped after a grazing contact until they separate again.
fn refresh_exclusions(state: &PhaseState, excluded: &mut HashSet<(usize, usize)>) {
    let eps = state.epsilon;
    excluded.retain(|&(i, j)| {
        let d = state
            .boundary
            .pair_distance(state.particles[i].q, state.particles[j].q);
        d <= eps * (1.0 + CONTACT_TOL)
    });
}

/// Resolve a contact for pair (i, j) on a state already drifted to the event
/// time. Returns true if momenta changed, false for a grazing no-op.
fn resolve_contact(
    state: &mut PhaseState,
    i: usize,
    j: usize,
    now: f64,
) -> Result<bool, DynamicsError> {
    let (qi, qj) = (state.particles[i].q, state.particles[j].q);
    let d = state.boundary.separation(qi, qj);
    let dist = d.norm();
    if (dist - state.epsilon).abs() > CONTACT_TOL * state.epsilon {
        // A contact event whose geometry no longer matches is a scheduler
        // defect; surface it instead of silently transforming.
        return Err(DynamicsError::PostEventOverlap(i, j, dist));
    }
    let eta = d.normalized().expect("contact distance is positive");
    let (pi, pj) = (state.particles[i].p, state.particles[j].p);
    let g = eta.dot(pi - pj);
    if g.abs() <= grazing_tol(pi - pj) {
        return Ok(false);
    }
    let (npi, npj) = reflect(pi, pj, eta);
    state.particles[i].p = npi;
    state.particles[j].p = npj;
    let _ = now;
    Ok(true)
}

/// Full-recomputation driver: after every event the earliest contact is
/// recomputed from scratch.
fn evolve_rescan(
    state: &mut PhaseState,
    t: f64,
    opts: FlowOptions,
    on_event: &mut dyn FnMut(f64, (usize, usize), &PhaseState),
) -> Result<FlowReport, DynamicsError> {
    let mut now = 0.0;
    let mut report = FlowReport::default();
    let mut excluded: HashSet<(usize, usize)> = HashSet::new();
    let mut events = 0usize;
    while now < t {
        refresh_exclusions(state, &mut excluded);
        let horizon = prediction_horizon(state);
        let next = next_collision_excluding(state, &excluded);
        let remaining = t - now;
        match next {
            Some(ev) if ev.time <= horizon.min(remaining) => {
                events += 1;
                if events > opts.max_events {
                    return Err(DynamicsError::EventBacklog(opts.max_events));
                }
                drift_all(state, ev.time);
                now += ev.time;
                let (i, j) = ev.pair;
                if resolve_contact(state, i, j, now)? {
                    report.collisions += 1;
                    on_event(now, (i, j), state);
                } else {
                    report.grazing_skips += 1;
                    excluded.insert((i, j));
                }
            }
            _ => {
                let step = remaining.min(horizon);
                drift_all(state, step);
                now += step;
                if step == 0.0 {
                    break;
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEvent {
    time: f64,
    pair: (usize, usize),
    counts: (u64, u64),
}

impl Eq for HeapEvent {}

impl Ord for HeapEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Ascending time with lexicographic pair tie-break; times are finite.
        self.time
            .partial_cmp(&other.time)
            .expect("event times are not NaN")
            .then(self.pair.cmp(&other.pair))
    }
}

impl PartialOrd for HeapEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Heap driver with collision-count invalidation for larger systems.
fn evolve_heap(
    state: &mut PhaseState,
    t: f64,
    opts: FlowOptions,
    on_event: &mut dyn FnMut(f64, (usize, usize), &PhaseState),
) -> Result<FlowReport, DynamicsError> {
    let n = state.particles.len();
    let mut report = FlowReport::default();
    let mut excluded: HashSet<(usize, usize)> = HashSet::new();
    let mut counts = vec![0u64; n];
    let mut heap: BinaryHeap<Reverse<HeapEvent>> = BinaryHeap::new();
    let mut now = 0.0;
    let mut events = 0usize;

    let schedule_pair = |heap: &mut BinaryHeap<Reverse<HeapEvent>>,
                         state: &PhaseState,
                         counts: &[u64],
                         excluded: &HashSet<(usize, usize)>,
                         now: f64,
                         horizon: f64,
                         i: usize,
                         j: usize| {
        if excluded.contains(&(i, j)) {
            return;
        }
        let (a, b) = (&state.particles[i], &state.particles[j]);
        if let Some(dt) = pair_contact_time(state.boundary, a.q, b.q, a.p, b.p, state.epsilon)
        {
            if dt <= horizon {
                heap.push(Reverse(HeapEvent {
                    time: now + dt,
                    pair: (i, j),
                    counts: (counts[i], counts[j]),
                }));
            }
        }
    };

    // (Re)build the heap for the prediction window starting at `now`.
    let mut window_end: f64;
    macro_rules! rebuild {
        () => {{
            heap.clear();
            refresh_exclusions(state, &mut excluded);
            let horizon = prediction_horizon(state);
            window_end = (now + horizon).min(t);
            for i in 0..n {
                for j in (i + 1)..n {
                    schedule_pair(
                        &mut heap,
                        state,
                        &counts,
                        &excluded,
                        now,
                        window_end - now,
                        i,
                        j,
                    );
                }
            }
        }};
    }

    rebuild!();
    loop {
        let next = loop {
            match heap.pop() {
                None => break None,
                Some(Reverse(ev)) => {
                    let (i, j) = ev.pair;
                    if ev.counts == (counts[i], counts[j]) {
                        break Some(ev);
                    }
                }
            }
        };
        match next {
            Some(ev) if ev.time <= window_end => {
                events += 1;
                if events > opts.max_events {
                    return Err(DynamicsError::EventBacklog(opts.max_events));
                }
                drift_all(state, ev.time - now);
                now = ev.time;
                let (i, j) = ev.pair;
                if resolve_contact(state, i, j, now)? {
                    report.collisions += 1;
                    on_event(now, (i, j), state);
                } else {
                    report.grazing_skips += 1;
                    excluded.insert((i, j));
                }
                counts[i] += 1;
                counts[j] += 1;
                let horizon = window_end - now;
                for k in 0..n {
                    if k != i {
                        let (a, b) = (k.min(i), k.max(i));
                        schedule_pair(
                            &mut heap, state, &counts, &excluded, now, horizon, a, b,
                        );
                    }
                    if k != j && k != i {
                        let (a, b) = (k.min(j), k.max(j));
                        schedule_pair(
                            &mut heap, state, &counts, &excluded, now, horizon, a, b,
                        );
                    }
                }
            }
            _ => {
                drift_all(state, window_end - now);
                now = window_end;
                if now >= t {
                    break;
                }
                rebuild!();
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_body_state(epsilon: f64) -> PhaseState {
        PhaseState::new(
            vec![
                Particle::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)),
                Particle::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)),
            ],
            epsilon,
            Boundary::Unbounded,
        )
        .unwrap()
    }

    #[test]
    fn collide_head_on_exchanges_momenta() {
        let (a, b) = collide(
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        assert_eq!(a, Vec3::new(-1.0, 0.0, 0.0));
        assert_eq!(b, Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn collide_grazing_is_identity() {
        let p1 = Vec3::new(1.0, 0.0, 0.0);
        let p2 = Vec3::ZERO;
        let (a, b) = collide(p1, p2, Vec3::new(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(a, p1);
        assert_eq!(b, p2);
    }

    #[test]
    fn collide_oblique_hand_computed() {
        let s = 1.0 / 2.0_f64.sqrt();
        let (a, b) = collide(
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::ZERO,
            Vec3::new(s, s, 0.0),
        )
        .unwrap();
        assert!((a - Vec3::new(1.0, -1.0, 0.0)).norm() < 1e-14);
        assert!((b - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-14);
        // conservation by direct substitution
        let sum = a + b;
        assert!((sum - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-14);
        assert!((a.norm_sq() + b.norm_sq() - 4.0).abs() < 1e-13);
    }

    #[test]
    fn collide_rejects_bad_inputs() {
        let e = collide(Vec3::ZERO, Vec3::ZERO, Vec3::new(0.5, 0.0, 0.0));
        assert!(matches!(e, Err(DynamicsError::NonUnitNormal(_))));
        let e = collide(
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
        );
        assert!(matches!(e, Err(DynamicsError::WrongHemisphere(_))));
    }

    #[test]
    fn next_collision_head_on_geometry() {
        let state = two_body_state(0.1);
        let ev = next_collision(&state).unwrap();
        assert!((ev.time - 0.45).abs() < 1e-12);
        assert_eq!(ev.pair, (0, 1));
        assert!((ev.eta - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn next_collision_none_cases() {
        let single = PhaseState::new(
            vec![Particle::new(Vec3::ZERO, Vec3::new(1.0, 2.0, 3.0))],
            0.1,
            Boundary::Unbounded,
        )
        .unwrap();
        assert!(next_collision(&single).is_none());

        let receding = PhaseState::new(
            vec![
                Particle::new(Vec3::ZERO, Vec3::new(-1.0, 0.0, 0.0)),
                Particle::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)),
            ],
            0.1,
            Boundary::Unbounded,
        )
        .unwrap();
        assert!(next_collision(&receding).is_none());
    }

    #[test]
    fn free_flight_single_particle() {
        let state = PhaseState::new(
            vec![Particle::new(Vec3::ZERO, Vec3::new(1.0, 2.0, 3.0))],
            0.1,
            Boundary::Unbounded,
        )
        .unwrap();
        let out = hard_sphere_flow(&state, 2.0, FlowOptions::default()).unwrap();
        assert!((out.particles()[0].q - Vec3::new(2.0, 4.0, 6.0)).norm() < 1e-14);
        assert_eq!(out.particles()[0].p, state.particles()[0].p);
    }

    /// Closed-form two-body oracle for the head-on setup: contact at
    /// t = (d - eps)/2, momentum exchange, then free flight.
    fn head_on_oracle(epsilon: f64, t: f64) -> (Vec3, Vec3) {
        let tc = (1.0 - epsilon) / 2.0;
        assert!(t >= tc);
        let q1 = Vec3::new(tc - (t - tc), 0.0, 0.0);
        let q2 = Vec3::new((1.0 - tc) + (t - tc), 0.0, 0.0);
        (q1, q2)
    }

    #[test]
    fn two_body_flow_matches_oracle() {
        let state = two_body_state(0.1);
        let out = hard_sphere_flow(&state, 1.0, FlowOptions::default()).unwrap();
        let (q1, q2) = head_on_oracle(0.1, 1.0);
        assert!((out.particles()[0].q - q1).norm() < 1e-12, "{:?}", out);
        assert!((out.particles()[1].q - q2).norm() < 1e-12);
        assert!((out.particles()[0].p - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-14);
        assert!((out.particles()[1].p - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-14);
        // explicit check of the hand computation in the module docs:
        // q1(1.0) = 0.45 - 0.55 = -0.1
        assert!((out.particles()[0].q.x() + 0.1).abs() < 1e-12);
    }

    #[test]
    fn allowed_indicator_cases() {
        let eps = 0.2;
        let a = Vec3::ZERO;
        assert_eq!(
            allowed_indicator(&[a, Vec3::new(2.0 * eps, 0.0, 0.0)], eps),
            1.0
        );
        assert_eq!(
            allowed_indicator(&[a, Vec3::new(eps / 2.0, 0.0, 0.0)], eps),
            0.0
        );
        let three = [
            a,
            Vec3::new(10.0, 0.0, 0.0),
            Vec3::new(10.0 + 0.99 * eps, 0.0, 0.0),
        ];
        assert_eq!(allowed_indicator(&three, eps), 0.0);
    }

    fn random_state(n: usize, side: f64, eps: f64, seed: u64) -> PhaseState {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let boundary = Boundary::Periodic { side };
        let mut particles: Vec<Particle> = Vec::new();
        while particles.len() < n {
            let q = Vec3::new(
                rng.gen_range(0.0..side),
                rng.gen_range(0.0..side),
                rng.gen_range(0.0..side),
            );
            if particles
                .iter()
                .all(|pt| boundary.pair_distance(pt.q, q) > 1.05 * eps)
            {
                let p = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                particles.push(Particle::new(q, p));
            }
        }
        PhaseState::new(particles, eps, boundary).unwrap()
    }

    #[test]
    fn reversibility_over_many_collisions() {
        // Dense enough that roundoff amplification over ~55 collisions stays
        // well under the 1e-6 reversibility budget.
        let state = random_state(10, 1.0, 0.3, 7);
        let t = 2.0;
        let (fwd, report) =
            hard_sphere_flow_reported(&state, t, FlowOptions::default()).unwrap();
        assert!(report.collisions >= 50, "collisions = {}", report.collisions);
        let back = hard_sphere_flow(&fwd, -t, FlowOptions::default()).unwrap();
        let scale: f64 = state
            .particles()
            .iter()
            .map(|pt| pt.p.norm())
            .fold(0.0, f64::max);
        for (a, b) in state.particles().iter().zip(back.particles()) {
            let dq = state.boundary().separation(a.q, b.q).norm();
            assert!(dq < 1e-6 * 1.0_f64.max(scale), "dq = {dq}");
            assert!((a.p - b.p).norm() < 1e-6 * scale);
        }
    }

    #[test]
    fn group_property_composition() {
        let state = random_state(8, 1.0, 0.08, 11);
        let one = hard_sphere_flow(&state, 1.7, FlowOptions::default()).unwrap();
        let half = hard_sphere_flow(&state, 0.9, FlowOptions::default()).unwrap();
        let two = hard_sphere_flow(&half, 0.8, FlowOptions::default()).unwrap();
        for (a, b) in one.particles().iter().zip(two.particles()) {
            assert!(one.boundary().separation(a.q, b.q).norm() < 1e-8);
            assert!((a.p - b.p).norm() < 1e-8);
        }
    }

    #[test]
    fn conservation_along_trajectory() {
        let state = random_state(12, 1.0, 0.1, 3);
        let p0 = state.total_momentum();
        let e0 = state.momentum_square_sum();
        let out = hard_sphere_flow(&state, 10.0, FlowOptions::default()).unwrap();
        let pnorm = e0.sqrt();
        assert!((out.total_momentum() - p0).norm() <= 1e-10 * pnorm);
        assert!((out.momentum_square_sum() - e0).abs() <= 1e-9 * e0);
    }

    #[test]
    fn no_overlap_after_flow() {
        let state = random_state(16, 1.0, 0.09, 5);
        let out = hard_sphere_flow(&state, 5.0, FlowOptions::default()).unwrap();
        let min = out.min_pair_distance().unwrap();
        assert!(min >= 0.09 * (1.0 - 1e-9), "min distance {min}");
    }

    #[test]
    fn heap_and_rescan_agree() {
        // Same physical system, scheduler chosen by particle count; compare a
        // 70-particle run against pairwise re-predicted evolution in chunks.
        let state = random_state(70, 2.0, 0.08, 13);
        let direct = hard_sphere_flow(&state, 1.0, FlowOptions::default()).unwrap();
        let mut chunked = state.clone();
        for _ in 0..10 {
            chunked = hard_sphere_flow(&chunked, 0.1, FlowOptions::default()).unwrap();
        }
        for (a, b) in direct.particles().iter().zip(chunked.particles()) {
            assert!(direct.boundary().separation(a.q, b.q).norm() < 1e-8);
            assert!((a.p - b.p).norm() < 1e-8);
        }
    }

    #[test]
    fn rejects_overlapping_construction() {
        let r = PhaseState::new(
            vec![
                Particle::new(Vec3::ZERO, Vec3::ZERO),
                Particle::new(Vec3::new(0.05, 0.0, 0.0), Vec3::ZERO),
            ],
            0.1,
            Boundary::Unbounded,
        );
        assert!(matches!(r, Err(DynamicsError::Overlap(0, 1, _, _))));
    }

    proptest! {
        /// Conservation and involution for random hemisphere-valid inputs.
        #[test]
        fn prop_collide_conserves_and_inverts(
            p1 in prop::array::uniform3(-3.0f64..3.0),
            p2 in prop::array::uniform3(-3.0f64..3.0),
            dir in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let p1 = Vec3(p1);
            let p2 = Vec3(p2);
            let raw = Vec3(dir);
            prop_assume!(raw.norm() > 1e-3);
            let mut eta = raw.normalized().unwrap();
            if eta.dot(p1 - p2) < 0.0 {
                eta = -eta;
            }
            let (a, b) = collide(p1, p2, eta).unwrap();
            prop_assert!(((a + b) - (p1 + p2)).norm() <= 1e-12 * (p1.norm() + p2.norm() + 1.0));
            prop_assert!((a.norm_sq() + b.norm_sq() - p1.norm_sq() - p2.norm_sq()).abs()
                <= 1e-12 * (p1.norm_sq() + p2.norm_sq() + 1.0));
            // normal component flips sign
            prop_assert!(eta.dot(a - b) <= 0.0 || eta.dot(p1 - p2) == 0.0);
            // involution through the opposite normal
            let (r1, r2) = collide(a, b, -eta).unwrap();
            prop_assert!((r1 - p1).norm() <= 1e-12 * (1.0 + p1.norm()));
            prop_assert!((r2 - p2).norm() <= 1e-12 * (1.0 + p2.norm()));
        }
    }
}
