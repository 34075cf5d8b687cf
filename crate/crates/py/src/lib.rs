//! Python bindings: the event-driven dynamics, partition counts, the
//! homogeneous stochastic solver and the 1D displaced collision integral.
//!
//! Vectors cross the boundary as plain 3-tuples; phase states as parallel
//! position/momentum lists.

use hskit::cluster::{enumerate_partitions, ClusterIndexSet};
use hskit::dynamics::{
    allowed_indicator, collide, hard_sphere_flow, next_collision, Boundary, FlowOptions,
    Particle, PhaseState,
};
use hskit::harness::{sample_chaos_state, ChaosRetry};
use hskit::sampling::{stream_rng, MomentumDist};
use hskit::solver::{
    dsmc_collision_step, h_functional, hard_rod_collision_integral_1d, CollisionParams,
    VelocityEnsemble,
};
use hskit::Vec3;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

type Triple = (f64, f64, f64);

fn v3(t: Triple) -> Vec3 {
    Vec3::new(t.0, t.1, t.2)
}

fn t3(v: Vec3) -> Triple {
    (v.x(), v.y(), v.z())
}

/// Elastic momentum exchange along a unit contact normal.
#[pyfunction]
#[pyo3(name = "collide")]
fn py_collide(p1: Triple, p2: Triple, eta: Triple) -> PyResult<(Triple, Triple)> {
    collide(v3(p1), v3(p2), v3(eta))
        .map(|(a, b)| (t3(a), t3(b)))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// 1 when all pair distances are at least epsilon, else 0.
#[pyfunction]
#[pyo3(name = "allowed_indicator")]
fn py_allowed_indicator(positions: Vec<Triple>, epsilon: f64) -> f64 {
    let q: Vec<Vec3> = positions.into_iter().map(v3).collect();
    allowed_indicator(&q, epsilon)
}

/// Number of set partitions of a ground set with one cluster element and
/// `singles` singleton elements.
#[pyfunction]
fn partition_count(singles: usize) -> PyResult<usize> {
    let ground = ClusterIndexSet::standard(1, singles);
    enumerate_partitions(&ground)
        .map(|p| p.len())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// An n-sphere configuration under exact event-driven dynamics.
#[pyclass]
struct HardSphereState {
    state: PhaseState,
}

#[pymethods]
impl HardSphereState {
    /// Build from explicit positions and momenta. `box_side = None` selects
    /// unbounded dynamics, otherwise a periodic cube.
    #[new]
    #[pyo3(signature = (positions, momenta, epsilon, box_side=None))]
    fn new(
        positions: Vec<Triple>,
        momenta: Vec<Triple>,
        epsilon: f64,
        box_side: Option<f64>,
    ) -> PyResult<Self> {
        if positions.len() != momenta.len() {
            return Err(PyValueError::new_err(
                "positions and momenta must have equal length",
            ));
        }
        let particles: Vec<Particle> = positions
            .into_iter()
            .zip(momenta)
            .map(|(q, p)| Particle::new(v3(q), v3(p)))
            .collect();
        let boundary = match box_side {
            Some(side) => Boundary::Periodic { side },
            None => Boundary::Unbounded,
        };
        PhaseState::new(particles, epsilon, boundary)
            .map(|state| HardSphereState { state })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Chaos-sampled periodic configuration: uniform positions restricted
    /// to allowed configurations, Maxwellian momenta of width sigma.
    #[staticmethod]
    fn sample_chaos(
        n: usize,
        epsilon: f64,
        box_side: f64,
        sigma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let mut rng = stream_rng(seed, 0);
        sample_chaos_state(
            &MomentumDist::Gaussian { sigma },
            n,
            epsilon,
            box_side,
            ChaosRetry::Incremental,
            &mut rng,
        )
        .map(|state| HardSphereState { state })
        .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.state.len()
    }

    fn positions(&self) -> Vec<Triple> {
        self.state.particles().iter().map(|pt| t3(pt.q)).collect()
    }

    fn momenta(&self) -> Vec<Triple> {
        self.state.particles().iter().map(|pt| t3(pt.p)).collect()
    }

    fn total_momentum(&self) -> Triple {
        t3(self.state.total_momentum())
    }

    /// Sum of |p_i|^2.
    fn energy(&self) -> f64 {
        self.state.momentum_square_sum()
    }

    fn min_pair_distance(&self) -> Option<f64> {
        self.state.min_pair_distance()
    }

    /// Earliest future contact as (time, (i, j), eta), or None.
    fn next_collision(&self) -> Option<(f64, (usize, usize), Triple)> {
        next_collision(&self.state).map(|ev| (ev.time, ev.pair, t3(ev.eta)))
    }

    /// Evolve by a signed time, returning the collision count.
    fn evolve(&mut self, t: f64) -> PyResult<usize> {
        let (out, report) =
            hskit::dynamics::hard_sphere_flow_reported(&self.state, t, FlowOptions::default())
                .map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.state = out;
        Ok(report.collisions)
    }

    /// A copy evolved by `t` without touching this state.
    fn evolved(&self, t: f64) -> PyResult<Self> {
        hard_sphere_flow(&self.state, t, FlowOptions::default())
            .map(|state| HardSphereState { state })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Homogeneous stochastic hard-sphere solver over a momentum sample set.
#[pyclass]
struct DsmcSolver {
    ens: VelocityEnsemble,
    params: CollisionParams,
    rng: hskit::sampling::StreamRng,
}

#[pymethods]
impl DsmcSolver {
    /// `kind` selects the initial law: "maxwell", "two_beam" or "aniso".
    #[new]
    #[pyo3(signature = (samples, seed, kind="maxwell", sigma=1.0, speed=0.5, rate_multiplier=1.0, majorant=16.0))]
    fn new(
        samples: usize,
        seed: u64,
        kind: &str,
        sigma: f64,
        speed: f64,
        rate_multiplier: f64,
        majorant: f64,
    ) -> PyResult<Self> {
        let dist = match kind {
            "maxwell" => MomentumDist::Gaussian { sigma },
            "two_beam" => MomentumDist::TwoBeam {
                speed,
                spread: sigma,
            },
            "aniso" => MomentumDist::AnisoGaussian {
                sx: sigma * 1.4,
                sy: sigma * 0.8,
                sz: sigma * 0.8,
            },
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown momentum kind '{other}'"
                )))
            }
        };
        let mut rng = stream_rng(seed, 0);
        let ens = VelocityEnsemble::from_dist(&dist, samples, &mut rng);
        Ok(DsmcSolver {
            ens,
            params: CollisionParams {
                rate_multiplier,
                majorant_speed: majorant * dist.thermal_width(),
            },
            rng,
        })
    }

    /// One collision step; returns the number of accepted collisions.
    fn step(&mut self, dt: f64) -> PyResult<u64> {
        dsmc_collision_step(&mut self.ens, dt, &self.params, &mut self.rng)
            .map(|s| s.accepted)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn temperature(&self) -> f64 {
        self.ens.temperature()
    }

    fn mean_momentum(&self) -> Triple {
        t3(self.ens.mean_momentum())
    }

    fn energy(&self) -> f64 {
        self.ens.energy_sum()
    }

    /// Smoothed H = int f log f estimate of the current ensemble.
    #[pyo3(signature = (bins=20))]
    fn h_value(&self, bins: usize) -> f64 {
        h_functional(&self.ens.samples, bins)
    }

    fn samples(&self) -> Vec<Triple> {
        self.ens.samples.iter().map(|&p| t3(p)).collect()
    }
}

/// Dimensionless 1D displaced collision integral for the product closure
/// `(1 + gradient*(q1+q2)) g(p1) g(p2)` with Gaussian width sigma.
#[pyfunction]
#[pyo3(signature = (q1, p1, epsilon, cutoff=8.0, gradient=0.0, sigma=1.0, panels=400))]
fn hard_rod_integral(
    q1: f64,
    p1: f64,
    epsilon: f64,
    cutoff: f64,
    gradient: f64,
    sigma: f64,
    panels: usize,
) -> (f64, bool) {
    let g = move |p: f64| {
        (-p * p / (2.0 * sigma * sigma)).exp()
            / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let f2 = move |a: f64, pa: f64, b: f64, pb: f64| (1.0 + gradient * (a + b)) * g(pa) * g(pb);
    let out = hard_rod_collision_integral_1d(&f2, q1, p1, epsilon, cutoff, panels);
    (out.value, out.tail_warning)
}

#[pymodule]
fn hskit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(py_collide, m)?)?;
    m.add_function(wrap_pyfunction!(py_allowed_indicator, m)?)?;
    m.add_function(wrap_pyfunction!(partition_count, m)?)?;
    m.add_function(wrap_pyfunction!(hard_rod_integral, m)?)?;
    m.add_class::<HardSphereState>()?;
    m.add_class::<DsmcSolver>()?;
    Ok(())
}
