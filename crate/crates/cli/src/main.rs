//! Command line front end for the three-step reduction pipeline. Every
//! subcommand operates on a run directory; `reduce` spawns this same binary
//! with the hidden `worker` subcommand so subdomains run as independent
//! processes.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ddmor_core::local_reduction::{
    evaluate_hmt_bounds, sketch_failure_probability, Method,
};
use ddmor_core::mesh::generate_unit_cube_mesh;
use ddmor_core::pipeline::{self, PartitionConfig, Runner, SolveOptions};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "ddmor", version, about = "Reduced-order solves of elliptic problems \
via overlapping domain decomposition and optimal local bases")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Partition a mesh and write one extended submesh file per subdomain.
    Partition(PartitionArgs),
    /// Build local reduced bases for all pending subdomains.
    Reduce(ReduceArgs),
    /// Assemble and solve the reduced system, then report errors.
    Solve(SolveArgs),
    /// Reference full-order finite element solve.
    FullSolve(FullSolveArgs),
    /// Singular spectra of the weighted lifting operators.
    Spectra(SpectraArgs),
    /// Solve a sequence of mesh sizes and fit the error decay rate.
    Convergence(ConvergenceArgs),
    /// Evaluate Gaussian sketching error bounds.
    Bounds(BoundsArgs),
    /// Write a structured simplicial mesh of the unit square or cube.
    GenMesh(GenMeshArgs),
    /// Run a single reduction worker (spawned by `reduce`).
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct PartitionArgs {
    /// Mesh reference: gen:<divisions>:<dim>, file:<path>, or a bare path.
    #[arg(long)]
    mesh: String,
    /// Run directory to create.
    #[arg(long)]
    run_dir: PathBuf,
    /// Number of subdomains.
    #[arg(long)]
    n: usize,
    /// Overlap extension in node hops.
    #[arg(long)]
    r_hops: usize,
    /// Singular value truncation threshold.
    #[arg(long, default_value_t = 1e-2)]
    epsilon: f64,
    /// Reduction method: explicit or randomized.
    #[arg(long, default_value = "randomized")]
    method: String,
    /// Sketch width divisor: k_i = max(M_i / divisor, 32).
    #[arg(long, default_value_t = 8)]
    sketch_divisor: usize,
    /// Master seed; worker seeds derive from it.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Coefficient field: one, const:<v>, or oscillatory:<k>.
    #[arg(long, default_value = "one")]
    coefficient: String,
    /// Load: unit-energy, one, or zero.
    #[arg(long, default_value = "unit-energy")]
    load: String,
    /// Run identifier recorded in the manifest (defaults to the dir name).
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct ReduceArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Concurrent worker processes.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Restrict to these subdomain ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    only: Option<Vec<u32>>,
    /// Run workers inside this process instead of spawning children.
    #[arg(long)]
    in_process: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Relative residual tolerance for the reduced solve.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Iteration cap (default: ten times the reduced dimension).
    #[arg(long)]
    max_iter: Option<usize>,
    /// Also solve the full system and report the reduction error.
    #[arg(long)]
    compare_full: bool,
    /// Estimate condition numbers of both systems.
    #[arg(long)]
    kappa: bool,
    #[arg(long, default_value_t = 400)]
    kappa_iters: usize,
    /// Reconstruct and write the nodal solution to solution.txt.
    #[arg(long)]
    write_solution: bool,
}

#[derive(Args)]
struct FullSolveArgs {
    /// Mesh reference: gen:<divisions>:<dim>, file:<path>, or a bare path.
    #[arg(long)]
    mesh: String,
    #[arg(long, default_value = "one")]
    coefficient: String,
    #[arg(long, default_value = "unit-energy")]
    load: String,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Args)]
struct SpectraArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Restrict to these subdomain ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    only: Option<Vec<u32>>,
    /// Keep at most this many values per subdomain.
    #[arg(long, default_value_t = 200)]
    max_count: usize,
}

#[derive(Args)]
struct ConvergenceArgs {
    /// Directory that receives one run subdirectory per case.
    #[arg(long)]
    out_dir: PathBuf,
    /// Cases as <divisions>:<subdomains>:<hops>, comma separated.
    #[arg(long, value_delimiter = ',')]
    cases: Vec<String>,
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, default_value_t = 1e-2)]
    epsilon: f64,
    #[arg(long, default_value = "randomized")]
    method: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Args)]
struct BoundsArgs {
    /// Target rank.
    #[arg(long)]
    k: usize,
    /// Oversampling count.
    #[arg(long)]
    p: usize,
    /// Tail deviation factor.
    #[arg(long, default_value_t = 2.0)]
    t: f64,
    /// Gaussian deviation factor.
    #[arg(long, default_value_t = 5.0)]
    u: f64,
    /// Spectra file written by `spectra`; enables the error bounds.
    #[arg(long)]
    spectrum: Option<PathBuf>,
    /// Subdomain to evaluate (default: every one in the file).
    #[arg(long)]
    subdomain: Option<u32>,
}

#[derive(Args)]
struct GenMeshArgs {
    #[arg(long)]
    divisions: usize,
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    id: u32,
}

/// Accept bare paths as mesh references for convenience.
fn normalize_mesh_ref(s: &str) -> String {
    if s.starts_with("gen:") || s.starts_with("file:") {
        s.to_string()
    } else {
        format!("file:{s}")
    }
}

fn parse_cases(specs: &[String]) -> Result<Vec<(usize, usize, usize)>> {
    specs
        .iter()
        .map(|s| {
            let parts: Vec<&str> = s.split(':').collect();
            if parts.len() != 3 {
                bail!("case `{s}` is not <divisions>:<subdomains>:<hops>");
            }
            Ok((
                parts[0].parse().with_context(|| format!("case `{s}`"))?,
                parts[1].parse().with_context(|| format!("case `{s}`"))?,
                parts[2].parse().with_context(|| format!("case `{s}`"))?,
            ))
        })
        .collect()
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Partition(a) => {
            let cfg = PartitionConfig {
                mesh_ref: normalize_mesh_ref(&a.mesh),
                n: a.n,
                r_hops: a.r_hops,
                master_seed: a.seed,
                epsilon: a.epsilon,
                method: Method::from_str(&a.method)?,
                sketch_divisor: a.sketch_divisor,
                coefficient: a.coefficient,
                load: a.load,
                run_id: a.run_id,
            };
            let s = pipeline::cmd_partition(&a.run_dir, &cfg)?;
            println!(
                "partitioned {} free DOFs (h = {:.4e}) into {} subdomains",
                s.n_free, s.mesh_size, s.n
            );
            println!(
                "overlap: {} subdomains max per element, {} extended, {} neighbor pairs, \
                 {} interface elements",
                s.overlap_count, s.extended_overlap_count, s.neighbor_pairs, s.interface_elements
            );
            println!("run directory ready: {}", a.run_dir.display());
        }
        Cmd::Reduce(a) => {
            let runner = if a.in_process {
                Runner::InProcess
            } else {
                let exe = std::env::current_exe().context("locating own executable")?;
                Runner::Subprocess { exe, worker_count: a.workers }
            };
            let s = pipeline::cmd_reduce(&a.run_dir, a.only.as_deref(), &runner)?;
            println!(
                "reduce: {} built, {} already done, {} failed",
                s.done.len(),
                s.skipped.len(),
                s.failed.len()
            );
            if !s.failed.is_empty() {
                for (id, msg) in &s.failed {
                    eprintln!("subdomain {id} failed: {msg}");
                }
                bail!("{} worker(s) failed", s.failed.len());
            }
        }
        Cmd::Solve(a) => {
            let opts = SolveOptions {
                tol: a.tol,
                max_iter: a.max_iter,
                compare_full: a.compare_full,
                kappa: a.kappa,
                kappa_iters: a.kappa_iters,
                write_solution: a.write_solution,
            };
            let r = pipeline::cmd_solve(&a.run_dir, &opts)?;
            println!(
                "reduced system: dim {} nnz {}; solved in {} iterations (residual {:.3e})",
                r.reduced_dim, r.reduced_nnz, r.iterations, r.residual
            );
            if let Some(e) = r.energy_error {
                println!("energy error        {e:.6e}");
            }
            if let Some(e) = r.fe_energy_error {
                println!("fe energy error     {e:.6e}");
            }
            if let Some(e) = r.reduction_error {
                println!("reduction error     {e:.6e}");
            }
            for (name, est) in
                [("kappa reduced", &r.kappa_reduced), ("kappa full", &r.kappa_full)]
            {
                if let Some(est) = est {
                    let tag = if est.converged { "" } else { " (lower bound)" };
                    println!(
                        "{name}      {:.6e}{tag}  [{:.3e}, {:.3e}]",
                        est.kappa, est.lambda_min, est.lambda_max
                    );
                }
            }
            println!("report written to {}", a.run_dir.join("report.txt").display());
        }
        Cmd::FullSolve(a) => {
            let r = pipeline::full_solve(
                &normalize_mesh_ref(&a.mesh),
                &a.coefficient,
                &a.load,
                a.tol,
            )?;
            println!(
                "full solve: {} DOFs, {} iterations, residual {:.3e}",
                r.n_free, r.iterations, r.residual
            );
            if let Some(e) = r.energy_error {
                println!("energy error        {e:.6e}");
            }
        }
        Cmd::Spectra(a) => {
            let out = pipeline::cmd_spectra(&a.run_dir, a.only.as_deref(), a.max_count)?;
            for (id, s) in &out {
                match s.first() {
                    Some(top) => println!(
                        "subdomain {id}: {} values, sigma_1 = {top:.6e}, sigma_last = {:.6e}",
                        s.len(),
                        s.last().unwrap()
                    ),
                    None => println!("subdomain {id}: empty spectrum (no internal boundary)"),
                }
            }
            println!("spectra written to {}", a.run_dir.join("spectra.txt").display());
        }
        Cmd::Convergence(a) => {
            let cases = parse_cases(&a.cases)?;
            let rep = pipeline::cmd_convergence(
                &a.out_dir,
                a.dim,
                &cases,
                a.epsilon,
                Method::from_str(&a.method)?,
                a.seed,
                a.tol,
            )?;
            println!(
                "{:>5} {:>12} {:>14} {:>14} {:>14} {:>9} {:>9}",
                "div", "h", "energy err", "fe err", "reduction err", "dim", "free"
            );
            for r in &rep.rows {
                println!(
                    "{:>5} {:>12.4e} {:>14.6e} {:>14.6e} {:>14.6e} {:>9} {:>9}",
                    r.divisions, r.h, r.energy_error, r.fe_error, r.reduction_error,
                    r.reduced_dim, r.n_free
                );
            }
            println!("log-log slope: {:.4}", rep.slope);
        }
        Cmd::Bounds(a) => {
            println!(
                "failure probability: {:.6e} (2 t^-p + exp(-u^2/2))",
                sketch_failure_probability(a.p, a.t, a.u)
            );
            if let Some(path) = a.spectrum {
                let spectra = pipeline::read_spectra(&path)?;
                for (id, sigma) in spectra {
                    if let Some(want) = a.subdomain {
                        if id != want {
                            continue;
                        }
                    }
                    if sigma.len() <= a.k {
                        println!(
                            "subdomain {id}: spectrum has {} values, need more than k = {}",
                            sigma.len(),
                            a.k
                        );
                        continue;
                    }
                    let b = evaluate_hmt_bounds(&sigma, a.k, a.p, a.t, a.u)?;
                    print!("subdomain {id}: expected error <= {:.6e}", b.expected);
                    if let Some(t) = b.tail {
                        print!(", tail bound {t:.6e}");
                    }
                    println!();
                }
            }
        }
        Cmd::GenMesh(a) => {
            let mesh = generate_unit_cube_mesh(a.divisions, a.dim)?;
            mesh.export(&a.out)?;
            println!(
                "wrote {}d mesh: {} vertices, {} elements, {} free DOFs",
                a.dim,
                mesh.n_vertices(),
                mesh.n_elements(),
                mesh.n_free_dofs()
            );
        }
        Cmd::Worker(a) => {
            pipeline::run_single_worker(&a.run_dir, a.id)?;
        }
    }
    Ok(())
}
