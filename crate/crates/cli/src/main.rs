//! `covertime` command line runner.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use covertime::experiments::{self, ExperimentConfig, TargetSpec};
use covertime::interlacement::{vacancy_one, InterlacementSampler, TruncationPolicy};
use covertime::output::{write_csv, write_json, write_report, Format, Meta, Table, ToTable};
use covertime::potential::{self, equilibrium_measure, GreenTable, DEFAULT_ENV_RADIUS};
use covertime::spectral::{build_kernel, quasistationary};
use covertime::walk::{Start, Trajectory};
use covertime::{BoxSpec, LocalSet, RngStream, Site, SiteSet, TorusGeometry};

#[derive(Parser)]
#[command(name = "covertime", version, about = "Cover-time experiments for random walk on the discrete torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

#[derive(Args, Clone)]
struct Shared {
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    side: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
    /// Record 0 as wall-clock time so repeated runs give identical files.
    #[arg(long)]
    reproducible: bool,
    /// Horizon as a multiple of g0 N^d ln N^d.
    #[arg(long, default_value_t = 50.0)]
    horizon_multiplier: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Cover times of the torus or of a set of sites, with Gumbel statistics.
    Cover {
        #[command(flatten)]
        shared: Shared,
        /// Target sites instead of the whole torus.
        #[arg(long)]
        centers: Option<String>,
        /// Number of last covered sites to report per trial.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Binary dump of the walk of trial 0 up to its cover time.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Probability that the origin (and optionally a second site) is unvisited by u N^d.
    Vacancy {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, num_args = 1.., default_values_t = vec![2.0])]
        level: Vec<f64>,
        /// Second site for the two-point probability.
        #[arg(long)]
        centers: Option<String>,
    },
    /// Sites not yet visited at a (1 - rho) fraction of the typical cover time.
    LatePoints {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value_t = 0.25)]
        rho: f64,
        #[arg(long)]
        centers: Option<String>,
    },
    /// Point process of unvisited sites at times g0 N^d (ln N^d + z).
    LastPoints {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, num_args = 1.., default_values_t = experiments::DEFAULT_Z_GRID.to_vec())]
        z: Vec<f64>,
        /// Also report the positions of the unvisited sites.
        #[arg(long)]
        keep_hit_times: bool,
    },
    /// Separation of the last k covered sites.
    LastK {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, num_args = 1.., default_values_t = vec![0.05, 0.1, 0.2, 0.3, 0.5])]
        delta: Vec<f64>,
    },
    /// Mean entrance time of a union of boxes, scaled by their capacities.
    Hitting {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value = "0,0,0")]
        centers: String,
        #[arg(long, default_value_t = 1)]
        box_radius: usize,
    },
    /// Number of complete excursions between A-boxes and the outside of C-boxes.
    Excursions {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value = "0,0,0")]
        centers: String,
        #[arg(long, default_value_t = 0.7)]
        epsilon: f64,
        #[arg(long, default_value_t = 2.0)]
        level: f64,
        /// Override the A radius from the policy.
        #[arg(long)]
        box_radius: Option<usize>,
        /// Override the C radius from the policy.
        #[arg(long)]
        c_radius: Option<usize>,
        /// Override t* = N^{2 + eps/100}.
        #[arg(long)]
        t_star: Option<f64>,
    },
    /// Local random interlacement samples on a box of Z^d.
    Interlacement {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, num_args = 1.., default_values_t = experiments::DEFAULT_LEVELS.to_vec())]
        level: Vec<f64>,
        /// K = B(0, r) unless explicit sites are given.
        #[arg(long, default_value_t = 1)]
        box_radius: usize,
        #[arg(long)]
        centers: Option<String>,
        #[arg(long)]
        trunc_radius: Option<usize>,
        /// One JSON object per sample.
        #[arg(long)]
        samples_out: Option<PathBuf>,
    },
    /// Green function table, g(0) and box capacities.
    Potential {
        #[command(flatten)]
        shared: Shared,
        /// Radius of the exported table.
        #[arg(long, default_value_t = 8)]
        box_radius: usize,
        #[arg(long, num_args = 1.., default_values_t = vec![1, 2, 4, 8])]
        cap_radius: Vec<usize>,
    },
    /// Quasistationary distribution of the walk killed on B(0, r).
    Quasistationary {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value_t = 1)]
        box_radius: usize,
        #[arg(long, default_value_t = 1e-11)]
        tol: f64,
    },
}

fn parse_sites(text: &str, dim: usize) -> Result<Vec<Site>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let coords: Vec<i64> =
                s.split(',').map(|c| c.trim().parse::<i64>()).collect::<std::result::Result<_, _>>().with_context(|| format!("bad site {s:?}"))?;
            if coords.len() != dim {
                bail!("site {s:?} has {} coordinates, expected {dim}", coords.len());
            }
            Ok(Site::new(coords))
        })
        .collect()
}

impl Shared {
    fn config(&self) -> ExperimentConfig {
        ExperimentConfig {
            threads: self.threads,
            horizon_multiplier: self.horizon_multiplier,
            ..ExperimentConfig::new(self.dim, self.side, self.trials, self.seed)
        }
    }

    fn format(&self) -> Format {
        match self.format {
            OutFormat::Json => Format::Json,
            OutFormat::Csv => Format::Csv,
        }
    }

    fn sink(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    fn meta(&self, started: Instant) -> Meta {
        Meta::new(self.seed, if self.reproducible { 0.0 } else { started.elapsed().as_secs_f64() })
    }
}

#[derive(Serialize)]
struct RunConfig<'a> {
    command: &'a str,
    #[serde(flatten)]
    base: &'a ExperimentConfig,
    params: Value,
}

fn emit<R: Serialize + ToTable>(shared: &Shared, command: &str, base: &ExperimentConfig, params: Value, started: Instant, results: &R) -> Result<()> {
    let mut out = shared.sink()?;
    let config = RunConfig { command, base, params };
    write_report(&mut out, shared.format(), &config, &shared.meta(started), results)?;
    out.flush()?;
    Ok(())
}

/// Several reports of the same kind, one block per parameter value.
#[derive(Serialize)]
#[serde(transparent)]
struct Parts<T>(Vec<T>);

impl<T: ToTable> ToTable for Parts<T> {
    fn to_table(&self) -> Table {
        let mut t = Table::default();
        for (i, p) in self.0.iter().enumerate() {
            let sub = p.to_table();
            if i == 0 {
                t.header = std::iter::once("part".to_string()).chain(sub.header).collect();
            }
            for r in sub.rows {
                t.row(std::iter::once(i.to_string()).chain(r).collect());
            }
            for (k, v) in sub.summary {
                t.stat(format!("part{i}_{k}"), v);
            }
        }
        t
    }
}

fn write_dump(path: &Path, cfg: &ExperimentConfig, cover_time: Option<f64>) -> Result<()> {
    let Some(duration) = cover_time else { bail!("trial 0 did not finish; nothing to dump") };
    let geom = TorusGeometry::new(cfg.dim, cfg.side)?;
    let mut rng = RngStream::new(cfg.seed, 0);
    let start = Start::Uniform.resolve(&geom, &mut rng);
    let traj = Trajectory::sample(&geom, start, duration, &mut rng);
    traj.write_dump(&geom, BufWriter::new(File::create(path)?))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::Cover { shared, centers, k, dump } => {
            let mut cfg = shared.config();
            if let Some(c) = &centers {
                cfg.target = TargetSpec::Sites(parse_sites(c, cfg.dim)?);
            }
            let fit = experiments::run_gumbel(&cfg, k)?;
            if let Some(p) = &dump {
                write_dump(p, &cfg, fit.trials[0].cover_time)?;
            }
            emit(&shared, "cover", &cfg, json!({ "k": k }), started, &fit)
        }
        Command::Vacancy { shared, level, centers } => {
            let cfg = shared.config();
            let partner = match &centers {
                Some(c) => parse_sites(c, cfg.dim)?.into_iter().next(),
                None => None,
            };
            let reps = level
                .iter()
                .map(|&u| experiments::vacancy_experiment(&cfg, u, partner.clone()))
                .collect::<covertime::Result<Vec<_>>>()?;
            emit(&shared, "vacancy", &cfg, json!({ "levels": level, "partner": partner }), started, &Parts(reps))
        }
        Command::LatePoints { shared, rho, centers } => {
            let mut cfg = shared.config();
            cfg.rho = rho;
            if let Some(c) = &centers {
                cfg.target = TargetSpec::Sites(parse_sites(c, cfg.dim)?);
            }
            let rep = experiments::run_late_points(&cfg)?;
            emit(&shared, "late-points", &cfg, json!({}), started, &rep)
        }
        Command::LastPoints { shared, z, keep_hit_times } => {
            let mut cfg = shared.config();
            cfg.z_grid = z;
            cfg.keep_hit_times = keep_hit_times;
            let rep = experiments::run_last_points(&cfg)?;
            emit(&shared, "last-points", &cfg, json!({}), started, &rep)
        }
        Command::LastK { shared, k, delta } => {
            let cfg = shared.config();
            let rep = experiments::run_last_k_separation(&cfg, k, &delta)?;
            emit(&shared, "last-k", &cfg, json!({ "k": k }), started, &rep)
        }
        Command::Hitting { shared, centers, box_radius } => {
            let cfg = shared.config();
            let boxes: Vec<BoxSpec> = parse_sites(&centers, cfg.dim)?.into_iter().map(|c| BoxSpec::new(c, box_radius)).collect();
            let rep = experiments::run_hitting_time_check(&cfg, &boxes)?;
            emit(&shared, "hitting", &cfg, json!({ "box_radius": box_radius }), started, &rep)
        }
        Command::Excursions { shared, centers, epsilon, level, box_radius, c_radius, t_star } => {
            let cfg = shared.config();
            let geom = cfg.validate()?;
            let centers = parse_sites(&centers, cfg.dim)?;
            let plan = experiments::excursion_plan(&geom, &centers, epsilon)?;
            let a = box_radius.unwrap_or(plan.a_radius);
            let c = c_radius.unwrap_or(plan.c_radius);
            let ts = t_star.unwrap_or(plan.t_star);
            let rep = experiments::run_excursion_calibration(&cfg, &centers, a, c, level, ts)?;
            emit(&shared, "excursions", &cfg, json!({ "plan": plan, "level": level }), started, &rep)
        }
        Command::Interlacement { shared, level, box_radius, centers, trunc_radius, samples_out } => {
            let cfg = shared.config();
            cfg.validate()?;
            let k = match &centers {
                Some(c) => LocalSet::from_sites(parse_sites(c, cfg.dim)?),
                None => BoxSpec::new(Site::origin(cfg.dim), box_radius).sites(),
            };
            let env = DEFAULT_ENV_RADIUS.max(4 * k.enclosing_radius().max(1));
            let eq = equilibrium_measure(&k, env)?;
            let policy = trunc_radius.map_or_else(|| TruncationPolicy::default_for(&k), |radius| TruncationPolicy { radius });
            let sampler = InterlacementSampler::new(&eq, policy)?;
            let max_level = level.iter().cloned().fold(0.0, f64::max);
            let batches = experiments::run_trials(&cfg, |_, rng| sampler.sample_labeled(max_level, rng))?;
            let mut lines = samples_out.as_ref().map(|p| File::create(p).map(BufWriter::new)).transpose()?;
            let origin = sampler.window().position(&Site::origin(cfg.dim));
            let g0 = potential::g0(cfg.dim)?;
            let mut table = Table::new(&["sample", "level", "visited_count", "trajectories"]);
            let mut summaries = Vec::new();
            for &u in &level {
                let mut visited = 0usize;
                let mut origin_vacant = 0usize;
                for (i, b) in batches.iter().enumerate() {
                    let s = b.at_level(u);
                    visited += s.visited_count();
                    origin_vacant += origin.map_or(0, |o| usize::from(s.is_vacant(o)));
                    table.row(vec![i.to_string(), u.to_string(), s.visited_count().to_string(), s.trajectories.to_string()]);
                    if let Some(w) = lines.as_mut() {
                        s.write_json_line(&mut *w)?;
                    }
                }
                let n = batches.len() as f64;
                let row = json!({
                    "u": u,
                    "mean_visited_fraction": visited as f64 / (n * k.len() as f64),
                    "origin_vacancy": origin.map(|_| origin_vacant as f64 / n),
                    "origin_vacancy_prediction": origin.map(|_| vacancy_one(u, g0)),
                });
                for key in ["mean_visited_fraction", "origin_vacancy", "origin_vacancy_prediction"] {
                    table.stat(format!("u{u}_{key}"), &row[key]);
                }
                summaries.push(row);
            }
            if let Some(mut w) = lines {
                w.flush()?;
            }
            table.stat("capacity", eq.capacity);
            table.stat("trunc_radius", policy.radius);
            table.stat("budget", sampler.budget());
            let results = json!({
                "window_size": k.len(),
                "capacity": eq.capacity,
                "trunc_radius": policy.radius,
                "budget": sampler.budget(),
                "levels": summaries,
            });
            let params = json!({ "levels": level, "box_radius": box_radius, "trunc_radius": policy.radius });
            let mut out = shared.sink()?;
            let config = RunConfig { command: "interlacement", base: &cfg, params };
            match shared.format() {
                Format::Json => write_json(&mut out, &config, &shared.meta(started), &results)?,
                Format::Csv => write_csv(&mut out, &table, &shared.meta(started))?,
            }
            out.flush()?;
            Ok(())
        }
        Command::Potential { shared, box_radius, cap_radius } => {
            let cfg = shared.config();
            let green = GreenTable::compute(cfg.dim, box_radius, &potential::default_schedule(cfg.dim))?;
            let caps = cap_radius
                .iter()
                .map(|&r| {
                    let eq = equilibrium_measure(&BoxSpec::new(Site::origin(cfg.dim), r).sites(), DEFAULT_ENV_RADIUS.max(4 * r))?;
                    let (lo, hi) = eq.capacity_bounds();
                    Ok(json!({ "radius": r, "capacity": eq.capacity, "lower": lo, "upper": hi,
                               "scaled": eq.capacity / (r as f64).powi(cfg.dim as i32 - 2) }))
                })
                .collect::<covertime::Result<Vec<_>>>()?;
            let results = json!({
                "g0": green.g0(),
                "error_estimate": green.error_estimate,
                "harmonic_residual": green.harmonic_residual,
                "schedule": green.schedule,
                "origin_trail": green.origin_trail,
                "capacities": caps,
            });
            let params = json!({ "box_radius": box_radius, "cap_radius": cap_radius });
            let mut out = shared.sink()?;
            let config = RunConfig { command: "potential", base: &cfg, params };
            match shared.format() {
                Format::Json => write_json(&mut out, &config, &shared.meta(started), &results)?,
                Format::Csv => {
                    green.write_csv(&mut out)?;
                    writeln!(out, "#summary")?;
                    writeln!(out, "key,value")?;
                    writeln!(out, "g0,{}", green.g0())?;
                    writeln!(out, "error_estimate,{}", green.error_estimate)?;
                    writeln!(out, "harmonic_residual,{}", green.harmonic_residual)?;
                    for c in &caps {
                        writeln!(out, "capacity_r{},{}", c["radius"], c["capacity"])?;
                    }
                }
            }
            out.flush()?;
            Ok(())
        }
        Command::Quasistationary { shared, box_radius, tol } => {
            let cfg = shared.config();
            let geom = cfg.validate()?;
            let removed: SiteSet = geom.ball(&Site::origin(cfg.dim), box_radius)?;
            let kernel = build_kernel(&geom, &removed)?;
            let q = quasistationary(&kernel, tol, 200_000)?;
            let results = json!({
                "lambda1": q.lambda1,
                "lambda2": q.lambda2,
                "gap": q.gap,
                "continuous_rate1": 1.0 - q.lambda1,
                "continuous_rate2": 1.0 - q.lambda2,
                "residual1": q.residual1,
                "residual2": q.residual2,
                "iterations1": q.iterations1,
                "iterations2": q.iterations2,
                "sigma_max": q.sigma.iter().cloned().fold(0.0, f64::max),
                "sigma_min": q.sigma.iter().cloned().fold(f64::INFINITY, f64::min),
            });
            let params = json!({ "box_radius": box_radius, "tol": tol });
            let mut out = shared.sink()?;
            let config = RunConfig { command: "quasistationary", base: &cfg, params };
            match shared.format() {
                Format::Json => write_json(&mut out, &config, &shared.meta(started), &results)?,
                Format::Csv => {
                    covertime::spectral::write_sigma_csv(&kernel, &q.sigma, &mut out)?;
                    writeln!(out, "#summary")?;
                    writeln!(out, "key,value")?;
                    for key in ["lambda1", "lambda2", "gap", "residual1", "residual2"] {
                        writeln!(out, "{key},{}", results[key])?;
                    }
                }
            }
            out.flush()?;
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
