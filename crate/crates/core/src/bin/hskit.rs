//! Command-line front end: configuration parsing, run manifests and
//! plot-ready CSV tables. All columns are dimensionless.

use clap::{Parser, Subcommand};
use hskit::cluster::StateFunction;
use hskit::config::{apply_override, ExperimentConfig, HierarchyCheck};
use hskit::dynamics::{hard_sphere_flow_traced, FlowOptions};
use hskit::harness::{
    bg_convergence_report, sample_chaos_state, ChaosRetry, ScalingPlan,
};
use hskit::hierarchy::{
    collision_moment_rate, collision_moment_second, duality_residual, ObservableSpec,
    ProductState,
};
use hskit::manifest::RunManifest;
use hskit::sampling::{BoxDomain, MomentumDist, MomentumEnvelope, SampleDomain};
use hskit::solver::{
    hard_rod_collision_integral_1d, run_homogeneous, run_slab, CollisionParams,
    SlabEnsemble, VelocityEnsemble,
};
use hskit::Vec3;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hskit", version, about = "hard-sphere kinetic theory toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to config, then $HSKIT_OUT, then ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Thread budget for replica parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dotted-path config overrides, e.g. --set bgscan.replicas=64.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve one hard-sphere configuration and dump its trajectory.
    Md,
    /// Homogeneous stochastic Boltzmann relaxation run.
    Boltzmann,
    /// Slab run with displaced-partner collisions.
    Enskog,
    /// One-dimensional displaced collision integral on a grid.
    Rods1d,
    /// Hierarchy-series checks.
    Hierarchy {
        /// Which check to run (duality | series); overrides the config.
        #[arg(long)]
        check: Option<String>,
    },
    /// Scaling sweep with convergence and factorization metrics.
    Bgscan,
    /// Validate a config without running.
    Validate,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("validation error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}

enum Failure {
    Validation(String),
    Numerical(String),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numerical(format!("io: {e}"))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Validation("--config is required".into()))?;
    let raw = std::fs::read(config_path)
        .map_err(|e| Failure::Validation(format!("cannot read config: {e}")))?;
    let mut doc: serde_json::Value = serde_json::from_slice(&raw)
        .map_err(|e| Failure::Validation(format!("config is not JSON: {e}")))?;
    for assignment in &cli.overrides {
        apply_override(&mut doc, assignment).map_err(Failure::Validation)?;
    }
    let config = ExperimentConfig::from_json(doc.to_string().as_bytes())
        .map_err(|e| Failure::Validation(format!("schema: {e}")))?;

    if matches!(cli.command, Command::Validate) {
        let diags = config.validate();
        if diags.is_empty() {
            println!("config ok");
        } else {
            for d in &diags {
                println!("{}: {}", d.field, d.message);
            }
        }
        return Ok(());
    }

    let mut diags = config.validate();
    // a seed supplied on the command line satisfies the seed requirement
    if cli.seed.is_some() {
        diags.retain(|d| d.field != "seed");
    }
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("{}: {}", d.field, d.message);
        }
        return Err(Failure::Validation(format!(
            "{} diagnostic(s); see above",
            diags.len()
        )));
    }
    let seed = cli
        .seed
        .or(config.seed)
        .expect("validated configs carry a seed");

    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os("HSKIT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)?;

    let threads = cli.threads.or(config.threads);
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }

    let command_name = match &cli.command {
        Command::Md => "md",
        Command::Boltzmann => "boltzmann",
        Command::Enskog => "enskog",
        Command::Rods1d => "rods1d",
        Command::Hierarchy { .. } => "hierarchy",
        Command::Bgscan => "bgscan",
        Command::Validate => unreachable!(),
    };
    let mut manifest = RunManifest::begin(&raw, command_name, &cli.overrides, seed);

    match &cli.command {
        Command::Md => cmd_md(&config, seed, &out_dir, &mut manifest)?,
        Command::Boltzmann => cmd_boltzmann(&config, seed, &out_dir, &mut manifest)?,
        Command::Enskog => cmd_enskog(&config, seed, &out_dir, &mut manifest)?,
        Command::Rods1d => cmd_rods(&config, &out_dir, &mut manifest)?,
        Command::Hierarchy { check } => {
            cmd_hierarchy(&config, check.as_deref(), seed, &out_dir, &mut manifest)?
        }
        Command::Bgscan => cmd_bgscan(&config, seed, &out_dir, &mut manifest)?,
        Command::Validate => unreachable!(),
    }

    manifest.finish(&out_dir)?;
    Ok(())
}

/// Plain CSV writer with deterministic shortest-roundtrip float formatting.
struct CsvFile {
    path: PathBuf,
    buf: String,
}

impl CsvFile {
    fn create(dir: &Path, name: &str, header: &str) -> Self {
        CsvFile {
            path: dir.join(name),
            buf: format!("{header}\n"),
        }
    }

    fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    fn finish(self, manifest: &mut RunManifest) -> std::io::Result<PathBuf> {
        let mut f = std::fs::File::create(&self.path)?;
        f.write_all(self.buf.as_bytes())?;
        manifest.record_file(&self.path);
        Ok(self.path)
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn cmd_md(
    config: &ExperimentConfig,
    seed: u64,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    let md = config
        .md
        .as_ref()
        .ok_or_else(|| Failure::Validation("config has no md section".into()))?;
    let mut rng = hskit::sampling::stream_rng(seed, 0);
    let state = sample_chaos_state(
        &md.momentum,
        md.n,
        md.epsilon,
        md.box_side,
        ChaosRetry::Incremental,
        &mut rng,
    )
    .map_err(|e| Failure::Numerical(e.to_string()))?;
    let mut csv = CsvFile::create(out, "trajectory.csv", "t,i,qx,qy,qz,px,py,pz");
    fn dump(t: f64, st: &hskit::dynamics::PhaseState, csv: &mut CsvFile) {
        for (i, pt) in st.particles().iter().enumerate() {
            csv.row(&[
                fmt(t),
                i.to_string(),
                fmt(pt.q.x()),
                fmt(pt.q.y()),
                fmt(pt.q.z()),
                fmt(pt.p.x()),
                fmt(pt.p.y()),
                fmt(pt.p.z()),
            ]);
        }
    }
    dump(0.0, &state, &mut csv);
    let p0 = state.total_momentum();
    let e0 = state.momentum_square_sum();
    let dump_events = md.dump_events;
    let (final_state, report) = hard_sphere_flow_traced(
        &state,
        md.t_end,
        FlowOptions::default(),
        &mut |t, _pair, st| {
            if dump_events {
                dump(t, st, &mut csv);
            }
        },
    )
    .map_err(|e| Failure::Numerical(e.to_string()))?;
    dump(md.t_end, &final_state, &mut csv);
    csv.finish(manifest)?;
    println!(
        "collisions={} momentum_drift={} energy_drift={}",
        report.collisions,
        fmt((final_state.total_momentum() - p0).norm()),
        fmt((final_state.momentum_square_sum() - e0).abs() / e0.max(1e-300)),
    );
    Ok(())
}

fn cmd_boltzmann(
    config: &ExperimentConfig,
    seed: u64,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    let b = config
        .boltzmann
        .as_ref()
        .ok_or_else(|| Failure::Validation("config has no boltzmann section".into()))?;
    let mut rng = hskit::sampling::stream_rng(seed, 0);
    let mut ens = VelocityEnsemble::from_dist(&b.momentum, b.samples, &mut rng);
    let params = CollisionParams {
        rate_multiplier: b.rate_multiplier,
        majorant_speed: b.majorant_speed * b.momentum.thermal_width(),
    };
    let run = run_homogeneous(
        &mut ens,
        b.dt,
        b.steps,
        &params,
        b.h_bins,
        b.record_every,
        &mut rng,
    )
    .map_err(|e| Failure::Numerical(e.to_string()))?;
    let mut csv =
        CsvFile::create(out, "boltzmann.csv", "t,cell,density,px,py,pz,temperature,h");
    for r in &run.records {
        csv.row(&[
            fmt(r.t),
            r.cell.to_string(),
            fmt(r.density),
            fmt(r.mean_momentum.x()),
            fmt(r.mean_momentum.y()),
            fmt(r.mean_momentum.z()),
            fmt(r.temperature),
            fmt(r.h_value),
        ]);
    }
    csv.finish(manifest)?;
    println!(
        "steps={} accepted_collisions={}",
        b.steps, run.stats.accepted
    );
    Ok(())
}

fn cmd_enskog(
    config: &ExperimentConfig,
    seed: u64,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    let e = config
        .enskog
        .as_ref()
        .ok_or_else(|| Failure::Validation("config has no enskog section".into()))?;
    let mut rng = hskit::sampling::stream_rng(seed, 0);
    let amp = e.density_amplitude;
    let length = e.length;
    let mut slab = SlabEnsemble::sample_profile(
        length,
        e.cells,
        e.samples,
        1.0,
        move |x| 1.0 + amp * (2.0 * std::f64::consts::PI * x / length).sin(),
        &e.momentum,
        &mut rng,
    );
    let params = CollisionParams {
        rate_multiplier: e.rate_multiplier,
        majorant_speed: e.majorant_speed * e.momentum.thermal_width(),
    };
    let records = run_slab(
        &mut slab,
        e.dt,
        e.steps,
        e.epsilon,
        &params,
        e.functional_order,
        e.record_every,
        &mut rng,
    )
    .map_err(|err| Failure::Numerical(err.to_string()))?;
    let mut csv =
        CsvFile::create(out, "enskog.csv", "t,cell,density,px,py,pz,temperature,h");
    for r in &records {
        csv.row(&[
            fmt(r.t),
            r.cell.to_string(),
            fmt(r.density),
            fmt(r.mean_momentum.x()),
            fmt(r.mean_momentum.y()),
            fmt(r.mean_momentum.z()),
            fmt(r.temperature),
            fmt(r.h_value),
        ]);
    }
    csv.finish(manifest)?;
    Ok(())
}

fn cmd_rods(
    config: &ExperimentConfig,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    let r = config
        .rods1d
        .as_ref()
        .ok_or_else(|| Failure::Validation("config has no rods1d section".into()))?;
    let sigma = r.sigma;
    let grad = r.gradient;
    let g = move |p: f64| {
        (-p * p / (2.0 * sigma * sigma)).exp()
            / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let f2 = move |q1: f64, p1: f64, q2: f64, p2: f64| {
        (1.0 + grad * (q1 + q2)) * g(p1) * g(p2)
    };
    let mut csv = CsvFile::create(out, "rods1d.csv", "q1,p1,value,tail_warning");
    for iq in 0..r.q_points {
        let q1 = r.q_range.0
            + (r.q_range.1 - r.q_range.0) * iq as f64 / (r.q_points.max(2) - 1) as f64;
        for ip in 0..r.p_points {
            let p1 = r.p_range.0
                + (r.p_range.1 - r.p_range.0) * ip as f64 / (r.p_points.max(2) - 1) as f64;
            let res =
                hard_rod_collision_integral_1d(&f2, q1, p1, r.epsilon, r.cutoff, r.panels);
            csv.row(&[
                fmt(q1),
                fmt(p1),
                fmt(res.value),
                (res.tail_warning as u8).to_string(),
            ]);
        }
    }
    csv.finish(manifest)?;
    Ok(())
}

fn cmd_hierarchy(
    config: &ExperimentConfig,
    check_flag: Option<&str>,
    seed: u64,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    let h = config
        .hierarchy
        .as_ref()
        .ok_or_else(|| Failure::Validation("config has no hierarchy section".into()))?;
    let check = match check_flag {
        None => h.check,
        Some("duality") => HierarchyCheck::Duality,
        Some("series") => HierarchyCheck::Series,
        Some(other) => {
            return Err(Failure::Validation(format!("unknown check '{other}'")))
        }
    };
    match check {
        HierarchyCheck::Duality => {
            let sigma = h.sigma;
            let env = MomentumEnvelope { sigma };
            let f1 = StateFunction::new(1, move |pt| {
                let q = pt[0].q;
                let inside = (0..3).all(|k| (0.0..=1.0).contains(&q.0[k]));
                if inside {
                    env.density(pt[0].p)
                } else {
                    0.0
                }
            });
            let b1 = StateFunction::new(1, |pt| {
                (-(pt[0].q - Vec3::new(0.5, 0.5, 0.5)).norm_sq() * 2.0).exp()
                    * (1.0 + 0.5 * pt[0].p.x())
            });
            let init = ProductState::new(f1, h.epsilon);
            let obs = ObservableSpec::additive(b1);
            let domain = SampleDomain {
                bounds: BoxDomain::cube(1.0),
                momentum: MomentumEnvelope { sigma },
            };
            let rep = duality_residual(
                &obs,
                &init,
                h.support_n,
                h.t,
                &domain,
                h.mc_samples,
                seed,
            )
            .map_err(|e| Failure::Numerical(e.to_string()))?;
            let mut csv = CsvFile::create(
                out,
                "duality.csv",
                "t,support_n,residual,std_error,observable_side,state_side",
            );
            csv.row(&[
                fmt(h.t),
                h.support_n.to_string(),
                fmt(rep.residual),
                fmt(rep.std_error),
                fmt(rep.observable_side),
                fmt(rep.state_side),
            ]);
            csv.finish(manifest)?;
            println!(
                "residual={} sigma={}",
                fmt(rep.residual),
                fmt(rep.std_error)
            );
            if rep.residual <= 3.0 * rep.std_error {
                Ok(())
            } else {
                Err(Failure::Numerical(format!(
                    "duality residual {} exceeds 3 sigma = {}",
                    rep.residual,
                    3.0 * rep.std_error
                )))
            }
        }
        HierarchyCheck::Series => {
            let f0 = MomentumDist::AnisoGaussian {
                sx: 1.3 * h.sigma,
                sy: 0.8 * h.sigma,
                sz: 0.8 * h.sigma,
            };
            let phi = |p: Vec3| p.x() * p.x();
            let rate = collision_moment_rate(&f0, &phi, h.mc_samples, seed);
            let second = collision_moment_second(&f0, &phi, h.t, h.mc_samples, seed);
            let mut csv = CsvFile::create(out, "series.csv", "t,order,value,std_error");
            csv.row(&[
                fmt(h.t),
                "1".into(),
                fmt(rate.value * h.t),
                fmt(rate.std_error * h.t),
            ]);
            csv.row(&[fmt(h.t), "2".into(), fmt(second.value), fmt(second.std_error)]);
            csv.finish(manifest)?;
            println!(
                "order1={} order2={}",
                fmt(rate.value * h.t),
                fmt(second.value)
            );
            Ok(())
        }
    }
}

fn cmd_bgscan(
    config: &ExperimentConfig,
    seed: u64,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    let bg = config
        .bgscan
        .as_ref()
        .ok_or_else(|| Failure::Validation("config has no bgscan section".into()))?;
    let mut plan = ScalingPlan {
        epsilons: bg.epsilons.clone(),
        density_constant: bg.density_constant,
        box_side: bg.box_side,
        replicas: bg.replicas,
        equalize_budget: bg.equalize_budget,
        t_grid: Vec::new(),
        momentum: bg.momentum,
        estimator: bg.estimator.unwrap_or_default(),
        particle_cap: bg.particle_cap,
        seed,
        reference_samples: bg.reference_samples,
        reference_dt: bg.reference_dt,
    };
    let mft = plan.mean_free_time();
    plan.t_grid = bg.t_grid_mft.iter().map(|&t| t * mft).collect();
    let report =
        bg_convergence_report(&plan).map_err(|e| Failure::Numerical(e.to_string()))?;
    let mut csv = CsvFile::create(
        out,
        "report.csv",
        "epsilon,t,L1,L1_err,chi,chi_err,N,replicas",
    );
    for r in &report.rows {
        csv.row(&[
            fmt(r.epsilon),
            fmt(r.t),
            fmt(r.l1),
            fmt(r.l1_err),
            fmt(r.chi),
            fmt(r.chi_err),
            r.n.to_string(),
            r.replicas.to_string(),
        ]);
    }
    csv.finish(manifest)?;
    for (ti, (l1t, chit)) in report
        .l1_trends
        .iter()
        .zip(report.chi_trends.iter())
        .enumerate()
    {
        println!(
            "t_index={} l1_decreasing={} chi_decreasing={}",
            ti, l1t.decreasing, chit.decreasing
        );
    }
    println!("energy_consistency_z={}", fmt(report.energy_consistency_z));
    Ok(())
}
