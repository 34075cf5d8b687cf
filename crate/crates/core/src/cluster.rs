//! Set-partition enumeration and the signed cumulant combinators of
//! sub-system flow groups.
//!
//! A ground set is a list of atoms: one distinguished cluster atom holding
//! the particle indices of the tracked group, plus any number of singleton
//! atoms. The (1+n)th-order cumulant is the partition sum
//!
//! ```text
//! A_{1+n}(t) = sum_P (-1)^{|P|-1} (|P|-1)! prod_{X in P} S_{|X|}(t, X)
//! ```
//!
//! where each factor evolves the particles of its block under isolated
//! hard-sphere dynamics, ignoring every other block. Cumulants vanish
//! identically when blocks cannot interact, which is what makes the
//! truncated hierarchy series converge at short times.
//!
//! Scattering cumulants compose the adjoint cumulant with multiplication by
//! the allowed-configuration indicator and per-particle free forward flows;
//! the first two generating evolution operators are assembled from them.

use crate::dynamics::{
    hard_sphere_flow, Boundary, DynamicsError, FlowOptions, Particle, PhaseState,
};
use crate::vec3::Vec3;
use std::sync::Arc;
use thiserror::Error;

/// Bell numbers for ground sizes 1..=8.
pub const BELL: [u64; 8] = [1, 2, 5, 15, 52, 203, 877, 4140];

/// Partition enumeration is capped here; the Bell numbers grow too fast for
/// anything larger to be useful at desk scale.
pub const MAX_GROUND_ELEMENTS: usize = 8;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("ground set has {0} elements, cap is {MAX_GROUND_ELEMENTS}")]
    GroundTooLarge(usize),
    #[error("cluster and singles must be disjoint")]
    NotDisjoint,
    #[error("cluster atom must be nonempty")]
    EmptyCluster,
    #[error("function arity {arity} does not cover particle index {index}")]
    ArityMismatch { arity: usize, index: usize },
    #[error("order {0} is outside the implemented range (n <= {1})")]
    OrderOutOfRange(usize, usize),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Ground set of a cumulant: a cluster of particle indices treated as one
/// element, plus singleton elements. Indices are 0-based positions into the
/// phase point the resulting operator is evaluated at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterIndexSet {
    cluster: Vec<usize>,
    singles: Vec<usize>,
}

impl ClusterIndexSet {
    pub fn new(cluster: Vec<usize>, singles: Vec<usize>) -> Result<Self, ClusterError> {
        if cluster.is_empty() {
            return Err(ClusterError::EmptyCluster);
        }
        for s in &singles {
            if cluster.contains(s) {
                return Err(ClusterError::NotDisjoint);
            }
        }
        let mut seen = singles.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != singles.len() {
            return Err(ClusterError::NotDisjoint);
        }
        Ok(ClusterIndexSet { cluster, singles })
    }

    /// Cluster `(0..s)` with singles `(s..s+n)`.
    pub fn standard(s: usize, n: usize) -> Self {
        ClusterIndexSet {
            cluster: (0..s).collect(),
            singles: (s..s + n).collect(),
        }
    }

    pub fn cluster(&self) -> &[usize] {
        &self.cluster
    }

    pub fn singles(&self) -> &[usize] {
        &self.singles
    }

    /// Number of elements being partitioned (the cluster counts as one).
    pub fn element_count(&self) -> usize {
        1 + self.singles.len()
    }

    /// Order n of the cumulant this ground set generates.
    pub fn order(&self) -> usize {
        self.singles.len()
    }

    /// All particle indices (the declusterized ground set).
    pub fn all_particles(&self) -> Vec<usize> {
        let mut v = self.cluster.clone();
        v.extend_from_slice(&self.singles);
        v
    }

    fn max_index(&self) -> usize {
        self.all_particles().into_iter().max().unwrap_or(0)
    }

    /// Particle indices of element `e` (0 = cluster, k>0 = single k-1).
    fn element_particles(&self, e: usize) -> Vec<usize> {
        if e == 0 {
            self.cluster.clone()
        } else {
            vec![self.singles[e - 1]]
        }
    }
}

/// A partition of a ground set into disjoint nonempty blocks. Blocks store
/// element ids; the cluster element is atomic and never split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetPartition {
    blocks: Vec<Vec<usize>>,
}

impl SetPartition {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// Expand block `b` into particle indices via the ground set.
    pub fn block_particles(&self, ground: &ClusterIndexSet, b: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &e in &self.blocks[b] {
            out.extend(ground.element_particles(e));
        }
        out
    }
}

/// Every partition of the ground set, exactly once (restricted-growth
/// strings). Count equals the Bell number of the element count.
pub fn enumerate_partitions(
    ground: &ClusterIndexSet,
) -> Result<Vec<SetPartition>, ClusterError> {
    let m = ground.element_count();
    if m > MAX_GROUND_ELEMENTS {
        return Err(ClusterError::GroundTooLarge(m));
    }
    let mut out = Vec::new();
    let mut assignment = vec![0usize; m];
    loop {
        let k = assignment.iter().max().copied().unwrap_or(0) + 1;
        let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (e, &b) in assignment.iter().enumerate() {
            blocks[b].push(e);
        }
        out.push(SetPartition { blocks });

        // next restricted-growth string
        let mut i = m;
        loop {
            if i == 1 {
                return Ok(out);
            }
            i -= 1;
            let prefix_max = assignment[..i].iter().max().copied().unwrap_or(0);
            if assignment[i] <= prefix_max {
                assignment[i] += 1;
                for a in assignment.iter_mut().skip(i + 1) {
                    *a = 0;
                }
                break;
            }
        }
    }
}

/// An evaluable function of an n-particle phase point.
#[derive(Clone)]
pub struct StateFunction {
    arity: usize,
    eval: Arc<dyn Fn(&[Particle]) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for StateFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateFunction")
            .field("arity", &self.arity)
            .finish()
    }
}

impl StateFunction {
    pub fn new(
        arity: usize,
        eval: impl Fn(&[Particle]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        StateFunction {
            arity,
            eval: Arc::new(eval),
        }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn eval(&self, point: &[Particle]) -> f64 {
        debug_assert_eq!(point.len(), self.arity);
        (self.eval)(point)
    }

    /// Constant function of the given arity.
    pub fn constant(arity: usize, value: f64) -> Self {
        StateFunction::new(arity, move |_| value)
    }

    /// Product `prod_i f1(x_i)` over an n-particle point.
    pub fn product_of(f1: &StateFunction, n: usize) -> Self {
        assert_eq!(f1.arity(), 1);
        let f1 = f1.clone();
        StateFunction::new(n, move |pt| {
            pt.iter().map(|x| f1.eval(std::slice::from_ref(x))).product()
        })
    }

    /// Multiply by the allowed-configuration indicator at diameter `epsilon`
    /// (boundary-aware pair distances).
    pub fn restricted_to_allowed(self, epsilon: f64, boundary: Boundary) -> Self {
        let f = self;
        StateFunction::new(f.arity, move |pt| {
            for i in 0..pt.len() {
                for j in (i + 1)..pt.len() {
                    if boundary.pair_distance(pt[i].q, pt[j].q) < epsilon {
                        return 0.0;
                    }
                }
            }
            f.eval(pt)
        })
    }

    pub fn scaled(self, c: f64) -> Self {
        let f = self;
        StateFunction::new(f.arity, move |pt| c * f.eval(pt))
    }

    pub fn plus(self, other: StateFunction) -> Self {
        assert_eq!(self.arity, other.arity);
        let (f, g) = (self, other);
        StateFunction::new(f.arity, move |pt| f.eval(pt) + g.eval(pt))
    }

    /// Σ_j b(x_j): the s-particle lift of an additive one-particle observable.
    pub fn additive_sum(b1: &StateFunction, s: usize) -> Self {
        assert_eq!(b1.arity(), 1);
        let b1 = b1.clone();
        StateFunction::new(s, move |pt| {
            pt.iter().map(|x| b1.eval(std::slice::from_ref(x))).sum()
        })
    }
}

/// Flow direction selector for cumulants: `Adjoint` applies the groups at
/// time `-t`, `Forward` at `+t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSign {
    Forward,
    Adjoint,
}

/// The dynamics every block flow runs under.
#[derive(Debug, Clone, Copy)]
pub struct FlowKernel {
    pub epsilon: f64,
    pub boundary: Boundary,
    pub options: FlowOptions,
}

impl FlowKernel {
    pub fn unbounded(epsilon: f64) -> Self {
        FlowKernel {
            epsilon,
            boundary: Boundary::Unbounded,
            options: FlowOptions::default(),
        }
    }

    /// Evolve the sub-state of `idx` by `t` in place. Returns false when the
    /// sub-configuration is forbidden (the enclosing partition term is then
    /// zero by the support convention for functions on allowed
    /// configurations). A zero diameter selects free dynamics.
    pub fn flow_block(&self, point: &mut [Particle], idx: &[usize], t: f64) -> bool {
        if self.epsilon == 0.0 {
            self.free_flight(point, idx, t);
            return true;
        }
        if idx.len() == 1 {
            let pt = &mut point[idx[0]];
            pt.q += pt.p * t;
            pt.q = self.boundary.wrap(pt.q);
            return true;
        }
        let sub: Vec<Particle> = idx.iter().map(|&i| point[i]).collect();
        let state = match PhaseState::new(sub, self.epsilon, self.boundary) {
            Ok(s) => s,
            Err(DynamicsError::Overlap(..)) => return false,
            Err(e) => panic!("invalid block flow input: {e}"),
        };
        match hard_sphere_flow(&state, t, self.options) {
            Ok(out) => {
                for (k, &i) in idx.iter().enumerate() {
                    point[i] = out.particles()[k];
                }
                true
            }
            // An event-cap blowup inside a lazy evaluation poisons the value
            // rather than the process; accumulators reject NaN loudly.
            Err(_) => {
                point[idx[0]].q = Vec3::new(f64::NAN, f64::NAN, f64::NAN);
                true
            }
        }
    }

    /// Free flight of a set of particles by `t`.
    fn free_flight(&self, point: &mut [Particle], idx: &[usize], t: f64) {
        for &i in idx {
            let pt = &mut point[i];
            pt.q += pt.p * t;
            pt.q = self.boundary.wrap(pt.q);
        }
    }

    fn pairwise_allowed(&self, point: &[Particle], idx: &[usize]) -> bool {
        for (a, &i) in idx.iter().enumerate() {
            for &j in idx.iter().skip(a + 1) {
                if self.boundary.pair_distance(point[i].q, point[j].q) < self.epsilon {
                    return false;
                }
            }
        }
        true
    }
}

/// The (1+n)th-order cumulant of flow groups applied to `f`.
///
/// `Adjoint` realizes the solution-series generator (blocks evolved by -t),
/// `Forward` the observable-series generator (+t). The returned function has
/// the arity of `f`; particles outside the ground set are spectators.
pub fn cumulant_apply(
    kernel: &FlowKernel,
    t: f64,
    ground: &ClusterIndexSet,
    f: &StateFunction,
    sign: GroupSign,
) -> Result<StateFunction, ClusterError> {
    if f.arity() <= ground.max_index() {
        return Err(ClusterError::ArityMismatch {
            arity: f.arity(),
            index: ground.max_index(),
        });
    }
    let partitions = enumerate_partitions(ground)?;
    // Precompute per-partition signed coefficients and particle-index blocks.
    let mut terms: Vec<(f64, Vec<Vec<usize>>)> = Vec::with_capacity(partitions.len());
    for part in &partitions {
        let k = part.block_count();
        let mut coef = if k % 2 == 1 { 1.0 } else { -1.0 };
        for m in 1..k {
            coef *= m as f64;
        }
        let blocks: Vec<Vec<usize>> = (0..k)
            .map(|b| part.block_particles(ground, b))
            .collect();
        terms.push((coef, blocks));
    }
    let tau = match sign {
        GroupSign::Forward => t,
        GroupSign::Adjoint => -t,
    };
    let kernel = *kernel;
    let f = f.clone();
    let arity = f.arity();
    Ok(StateFunction::new(arity, move |pt| {
        let mut total = 0.0;
        let mut scratch = pt.to_vec();
        'term: for (coef, blocks) in &terms {
            scratch.copy_from_slice(pt);
            for idx in blocks {
                if !kernel.flow_block(&mut scratch, idx, tau) {
                    continue 'term;
                }
            }
            total += coef * f.eval(&scratch);
        }
        total
    }))
}

/// Scattering cumulant: adjoint cumulant of order n, multiplication by the
/// allowed-configuration indicator over the ground particles, then free
/// forward flight of each ground particle, applied to `f` in that order of
/// composition (free flights act on `f` first).
pub fn scattering_cumulant(
    kernel: &FlowKernel,
    t: f64,
    ground: &ClusterIndexSet,
    f: &StateFunction,
) -> Result<StateFunction, ClusterError> {
    if ground.order() > 1 {
        return Err(ClusterError::OrderOutOfRange(ground.order(), 1));
    }
    scattering_cumulant_any_order(kernel, t, ground, f)
}

fn scattering_cumulant_any_order(
    kernel: &FlowKernel,
    t: f64,
    ground: &ClusterIndexSet,
    f: &StateFunction,
) -> Result<StateFunction, ClusterError> {
    let idx = ground.all_particles();
    let k = *kernel;
    let inner = f.clone();
    let idx_free = idx.clone();
    let arity = f.arity();
    let freed = StateFunction::new(arity, move |pt| {
        let mut scratch = pt.to_vec();
        k.free_flight(&mut scratch, &idx_free, t);
        inner.eval(&scratch)
    });
    let k2 = *kernel;
    let gated = StateFunction::new(arity, move |pt| {
        if k2.pairwise_allowed(pt, &idx) {
            freed.eval(pt)
        } else {
            0.0
        }
    });
    cumulant_apply(kernel, t, ground, &gated, GroupSign::Adjoint)
}

/// Generating evolution operators of the marginal state functionals,
/// implemented through the printed low orders:
///
/// - n = 0: `V_1(t,{Y}) = scattering cumulant of order 0`
/// - n = 1: `V_2(t,{Y},s+1) = Ahat_2(t,{Y},s+1)
///          - Ahat_1(t,{Y}) sum_{i in Y} Ahat_2(t,i,s+1)`
pub fn generating_operator_v(
    kernel: &FlowKernel,
    t: f64,
    ground: &ClusterIndexSet,
    f: &StateFunction,
) -> Result<StateFunction, ClusterError> {
    match ground.order() {
        0 => scattering_cumulant(kernel, t, ground, f),
        1 => {
            let extra = ground.singles()[0];
            let full = scattering_cumulant(kernel, t, ground, f)?;
            let mut corrections: Option<StateFunction> = None;
            for &i in ground.cluster() {
                let pair = ClusterIndexSet::new(vec![i], vec![extra])?;
                let term = scattering_cumulant_any_order(kernel, t, &pair, f)?;
                corrections = Some(match corrections {
                    None => term,
                    Some(acc) => acc.plus(term),
                });
            }
            let sum = corrections.expect("cluster atom is nonempty");
            let y_only = ClusterIndexSet::new(ground.cluster().to_vec(), vec![])?;
            let outer = scattering_cumulant_any_order(kernel, t, &y_only, &sum)?;
            Ok(full.plus(outer.scaled(-1.0)))
        }
        n => Err(ClusterError::OrderOutOfRange(n, 1)),
    }
}
