//! `bmc` — cluster recovery in block Markov chains from the command line.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad model files,
//! out-of-range parameters), 3 on runtime failures.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bmc::experiment::{
    default_lloyd, exp_feasibility, exp_improvement_vs_t, exp_spectral_error_vs_n,
    exp_spectral_norm, run_pipeline, ExperimentConfig, TRule,
};
use bmc::improve::{default_max_iters, improve};
use bmc::info::{check_zero_condition, feasibility_raster, information_quantity};
use bmc::model::{build_transition_matrix, mixing_time_bound, BmcModel, Partition};
use bmc::simulate::{count_matrix, simulate_trajectory, Trajectory};
use bmc::spectral::{spectral_cluster_with, ClusterMethod};
use bmc::Error;

#[derive(Parser)]
#[command(name = "bmc", version, about = "Cluster recovery in block Markov chains")]
struct Cli {
    /// Number of worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    /// Neighborhood/center/remainder procedure.
    Neighborhood,
    /// Lloyd K-means on the row/column embedding (10 restarts).
    Kmeans,
}

impl Method {
    fn to_cluster_method(self, seed: u64) -> ClusterMethod {
        match self {
            Method::Neighborhood => ClusterMethod::Neighborhood,
            Method::Kmeans => default_lloyd(seed),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Detectability report: I, pairwise values, D, zero condition (JSON).
    Info {
        /// Model file (JSON or TOML with keys K, alpha, p, optional n).
        #[arg(long)]
        model: PathBuf,
    },
    /// Simulate a trajectory from equilibrium; write the dump and counts.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Number of states (falls back to the model file's `n`).
        #[arg(long)]
        n: Option<usize>,
        /// Trajectory length; overrides --t-rule.
        #[arg(long)]
        t: Option<u64>,
        /// T(n) rule: nlogn, nlogn1.5, nlogn2, n2, n3, or an explicit value.
        #[arg(long, default_value = "nlogn")]
        t_rule: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for trajectory.txt and counts.csv.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the two-stage recovery pipeline on a generated or given trajectory.
    Cluster {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        t: Option<u64>,
        #[arg(long, default_value = "nlogn")]
        t_rule: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Improvement iterations (default: ceil(ln n)).
        #[arg(long)]
        iters: Option<usize>,
        /// Read a trajectory dump instead of simulating (no error rates).
        #[arg(long)]
        traj: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Neighborhood)]
        method: Method,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Stage-1 error rate as a function of n.
    ExpSpectral {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated n values.
        #[arg(long, default_value = "100,200,300,400,500")]
        n_grid: String,
        #[arg(long, default_value = "nlogn")]
        t_rule: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Method::Kmeans)]
        method: Method,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Error after 0..=iters improvement passes as a function of T.
    ExpImprove {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 240)]
        n: usize,
        /// Comma-separated T values.
        #[arg(long, default_value = "2500,5000,7500,10000,12500,15000,17500,20000,22500,25000,27500,30000")]
        t_list: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        iters: usize,
        #[arg(long, value_enum, default_value_t = Method::Kmeans)]
        method: Method,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Simulated feasibility raster over (p12, p21) at T = n ln n, K = 2.
    ExpFeasibility {
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        resolution: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        iters: usize,
        #[arg(long, value_enum, default_value_t = Method::Kmeans)]
        method: Method,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Spectral norm of the trimmed noise matrix versus n, with a
    /// c1 + c2 sqrt(T/n) fit.
    ExpNorm {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "100,150,200,250,300,350,400,450,500")]
        n_grid: String,
        #[arg(long, default_value = "nlogn1.5")]
        t_rule: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Theoretical feasibility raster of I(alpha, p) over (p12, p21), K = 2.
    Raster {
        /// Second cluster fraction (alpha = (1-alpha2, alpha2)).
        #[arg(long, default_value_t = 0.5)]
        alpha2: f64,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        /// Feasibility threshold on I; 1 matches the critical regime.
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn load_model(path: &Path) -> Result<(BmcModel, Option<usize>), Error> {
    BmcModel::load(path)
}

fn resolve_n(flag: Option<usize>, from_file: Option<usize>) -> Result<usize, Error> {
    flag.or(from_file).ok_or_else(|| {
        Error::DomainError("number of states required: pass --n or put `n` in the model file".into())
    })
}

fn resolve_t(t: Option<u64>, t_rule: &str, n: usize) -> Result<u64, Error> {
    match t {
        Some(v) => {
            if v <= n as u64 {
                return Err(Error::DomainError(format!("T = {v} must exceed n = {n}")));
            }
            Ok(v)
        }
        None => t_rule.parse::<TRule>()?.t_for(n, 0),
    }
}

fn parse_grid(text: &str) -> Result<Vec<usize>, Error> {
    let grid: Result<Vec<usize>, _> = text.split(',').map(|v| v.trim().parse::<usize>()).collect();
    match grid {
        Ok(g) if !g.is_empty() => Ok(g),
        _ => Err(Error::Parse(format!("bad n grid `{text}`"))),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })
}

fn write_out(path: &Path, contents: &[u8]) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Info { model } => {
            let (model, _) = load_model(&model)?;
            let report = information_quantity(&model)?;
            let (zero, witness) = check_zero_condition(&model);
            let mut json = report.to_json();
            json["zero_condition"] = serde_json::json!({
                "holds": zero,
                "witness": witness.map(|(i, j)| vec![i, j]),
            });
            json["eta"] = serde_json::json!(model.eta());
            json["mixing_bound_eps_0.01"] =
                serde_json::json!(mixing_time_bound(model.eta(), 0.01)?);
            println!("{}", serde_json::to_string_pretty(&json).expect("valid json"));
            Ok(())
        }
        Command::Simulate {
            model,
            n,
            t,
            t_rule,
            seed,
            out,
        } => {
            let (model, file_n) = load_model(&model)?;
            let n = resolve_n(n, file_n)?;
            let t = resolve_t(t, &t_rule, n)?;
            let part = Partition::proportional(n, model.alpha())?;
            let kernel = build_transition_matrix(&model, &part)?;
            let traj = simulate_trajectory(&kernel, t, seed);
            let counts = count_matrix(&traj, n)?;
            ensure_dir(&out)?;
            let mut buf = Vec::new();
            traj.write_dump(n, &mut buf)?;
            write_out(&out.join("trajectory.txt"), &buf)?;
            let mut buf = Vec::new();
            counts.write_csv(&mut buf)?;
            write_out(&out.join("counts.csv"), &buf)?;
            println!(
                "simulated n={n} T={t} seed={seed} -> {}",
                out.join("trajectory.txt").display()
            );
            Ok(())
        }
        Command::Cluster {
            model,
            n,
            t,
            t_rule,
            seed,
            iters,
            traj,
            method,
            out,
        } => {
            let (model, file_n) = load_model(&model)?;
            ensure_dir(&out)?;
            match traj {
                Some(path) => {
                    // Trajectory supplied: the truth is unknown, report the
                    // recovered partition only.
                    let file = fs::File::open(&path).map_err(|e| Error::Io {
                        context: format!("opening {}", path.display()),
                        source: e,
                    })?;
                    let (traj, n) = Trajectory::read_dump(BufReader::new(file))?;
                    let counts = count_matrix(&traj, n)?;
                    let iters = iters.unwrap_or_else(|| default_max_iters(n));
                    let spectral = spectral_cluster_with(
                        &counts,
                        model.k(),
                        &method.to_cluster_method(seed),
                    )?;
                    let final_part = if iters > 0 && !spectral.clusters.has_empty_cluster() {
                        let trace = improve(&counts, &spectral.clusters, iters, None)?;
                        let mut buf = Vec::new();
                        trace.write_csv(&mut buf)?;
                        write_out(&out.join("trace.csv"), &buf)?;
                        trace
                            .final_partition()
                            .cloned()
                            .unwrap_or_else(|| spectral.clusters.clone())
                    } else {
                        if spectral.clusters.has_empty_cluster() {
                            eprintln!(
                                "warning: spectral stage left a cluster empty; skipping improvement"
                            );
                        }
                        spectral.clusters.clone()
                    };
                    write_partition(&out, &spectral, &final_part)?;
                    println!(
                        "clustered {} states from {} -> {}",
                        n,
                        path.display(),
                        out.join("partition.txt").display()
                    );
                }
                None => {
                    let n = resolve_n(n, file_n)?;
                    let t = resolve_t(t, &t_rule, n)?;
                    let iters = iters.unwrap_or_else(|| default_max_iters(n));
                    let run = run_pipeline(
                        &model,
                        n,
                        t,
                        seed,
                        iters,
                        &method.to_cluster_method(seed),
                    )?;
                    println!("n={n} T={t} seed={seed} iters={iters}");
                    for (i, err) in run.errors.iter().enumerate() {
                        let stage = if i == 0 {
                            "spectral".to_string()
                        } else {
                            format!("improve {i}")
                        };
                        println!("  {stage:<12} error rate {err:.6}");
                    }
                    let mut csv = String::from("stage,error_rate\n");
                    for (i, err) in run.errors.iter().enumerate() {
                        csv.push_str(&format!("{i},{err}\n"));
                    }
                    write_out(&out.join("errors.csv"), csv.as_bytes())?;
                    let mut trace = String::from("iter,reassignments,error_rate\n");
                    for (i, &moves) in run.reassignments.iter().enumerate() {
                        trace.push_str(&format!("{},{},{}\n", i + 1, moves, run.errors[i + 1]));
                    }
                    write_out(&out.join("trace.csv"), trace.as_bytes())?;
                }
            }
            Ok(())
        }
        Command::ExpSpectral {
            model,
            n_grid,
            t_rule,
            trials,
            seed,
            method,
            out,
        } => {
            let (model, _) = load_model(&model)?;
            let config = ExperimentConfig {
                model,
                n_grid: parse_grid(&n_grid)?,
                t_rule: t_rule.parse()?,
                trials,
                seed_base: seed,
                improvement_iters: 0,
                out_dir: out,
                method: method.to_cluster_method(seed),
            };
            let (csv, _) = exp_spectral_error_vs_n(&config)?;
            println!("wrote {}", csv.display());
            Ok(())
        }
        Command::ExpImprove {
            model,
            n,
            t_list,
            trials,
            seed,
            iters,
            method,
            out,
        } => {
            let (model, _) = load_model(&model)?;
            let t_values: Result<Vec<u64>, _> =
                t_list.split(',').map(|v| v.trim().parse::<u64>()).collect();
            let t_values = t_values.map_err(|e| Error::Parse(format!("bad T list: {e}")))?;
            let config = ExperimentConfig {
                model,
                n_grid: vec![n],
                t_rule: TRule::Explicit(t_values),
                trials,
                seed_base: seed,
                improvement_iters: iters,
                out_dir: out,
                method: method.to_cluster_method(seed),
            };
            let (csv, _) = exp_improvement_vs_t(&config)?;
            println!("wrote {}", csv.display());
            Ok(())
        }
        Command::ExpFeasibility {
            n,
            resolution,
            trials,
            seed,
            iters,
            method,
            out,
        } => {
            // The per-cell model is built inside the experiment; the config
            // model is a placeholder with the right shape.
            let (placeholder, _) = BmcModel::from_json_str(
                r#"{ "K": 2, "alpha": [0.5, 0.5], "p": [[0.5, 0.5], [0.5, 0.5]] }"#,
            )?;
            let config = ExperimentConfig {
                model: placeholder,
                n_grid: vec![n],
                t_rule: TRule::NLogN,
                trials,
                seed_base: seed,
                improvement_iters: iters,
                out_dir: out,
                method: method.to_cluster_method(seed),
            };
            let (csv, _) = exp_feasibility(&config, resolution)?;
            println!("wrote {}", csv.display());
            Ok(())
        }
        Command::ExpNorm {
            model,
            n_grid,
            t_rule,
            trials,
            seed,
            out,
        } => {
            let (model, _) = load_model(&model)?;
            let config = ExperimentConfig {
                model,
                n_grid: parse_grid(&n_grid)?,
                t_rule: t_rule.parse()?,
                trials,
                seed_base: seed,
                improvement_iters: 0,
                out_dir: out,
                method: ClusterMethod::Neighborhood,
            };
            let (csv, fit) = exp_spectral_norm(&config)?;
            println!(
                "wrote {} (fit: {:.4} + {:.4} sqrt(T/n), R^2 = {:.4})",
                csv.display(),
                fit.c1,
                fit.c2,
                fit.r_squared
            );
            Ok(())
        }
        Command::Raster {
            alpha2,
            resolution,
            threshold,
            out,
        } => {
            let raster = feasibility_raster([1.0 - alpha2, alpha2], resolution, threshold)?;
            ensure_dir(&out)?;
            let mut buf = Vec::new();
            raster.write_csv(&mut buf)?;
            let path = out.join("raster.csv");
            write_out(&path, &buf)?;
            write_out(
                &out.join("raster.gp"),
                b"set datafile separator ','\n\
                  set key autotitle columnhead\n\
                  set xlabel 'p12'\nset ylabel 'p21'\n\
                  set view map\n\
                  splot 'raster.csv' using 1:2:4 with points pointtype 5 pointsize 1 palette\n",
            )?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn write_partition(
    out: &Path,
    spectral: &bmc::spectral::SpectralResult,
    final_part: &Partition,
) -> Result<(), Error> {
    let dump = |part: &Partition| {
        let mut text = String::new();
        for &c in part.assignment() {
            text.push_str(&format!("{c}\n"));
        }
        text
    };
    write_out(&out.join("partition.txt"), dump(final_part).as_bytes())?;
    write_out(
        &out.join("initial_partition.txt"),
        dump(&spectral.clusters).as_bytes(),
    )?;
    let mut sv = String::from("index,sigma\n");
    for (i, s) in spectral.singular_values.iter().enumerate() {
        sv.push_str(&format!("{i},{s}\n"));
    }
    write_out(&out.join("singular_values.csv"), sv.as_bytes())?;
    Ok(())
}
