use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use branchvis::bench::{parse_schemes, parse_workers, run_bench};
use branchvis::render::render_ppm;
use branchvis_core::query::{sample_point, Field, SpaceTimePoint, StoreSource};
use branchvis_core::solver::{Boundary, GridSpec, SolverParams};
use branchvis_core::store::{ParamPatch, RunId, Store, DEFAULT_CHECKPOINT_EVERY};

#[derive(Parser)]
#[command(
    name = "branchvis",
    version,
    about = "Branching simulation store and service"
)]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, default_value = "branchvis-store")]
    store: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a new root run.
    Run {
        /// Grid size as WxH.
        #[arg(long, default_value = "64x64")]
        grid: String,
        #[arg(long, default_value_t = 1.0)]
        dx: f64,
        #[arg(long, default_value = "zero_flux")]
        boundary: String,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = DEFAULT_CHECKPOINT_EVERY)]
        checkpoint_every: u64,
        /// Parameter override, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Fork a run at a time index with parameter changes.
    Branch {
        #[arg(long)]
        run: String,
        #[arg(long)]
        at: u64,
        /// Child length; defaults to the parent's.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// List runs as JSON.
    Runs,
    /// Show one run with its reuse statistics.
    Status {
        #[arg(long)]
        run: String,
    },
    /// Write a frame as a binary PPM image.
    Render {
        #[arg(long)]
        run: String,
        #[arg(long)]
        t: u64,
        #[arg(long, default_value = "scalar")]
        field: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a value at a space-time point.
    Query {
        #[arg(long)]
        run: String,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        y: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value = "scalar")]
        field: String,
    },
    /// Compare scheduling schemes on a workload.
    Bench {
        /// `bfs:b=B,d=D`, `unit:n=N,k=K` or `branchsim:PATH`.
        #[arg(long)]
        workload: String,
        #[arg(long, default_value = branchvis::api::DEFAULT_SCHEMES)]
        schemes: String,
        #[arg(long, default_value = "4")]
        workers: String,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn patch_from(sets: &[String]) -> Result<ParamPatch> {
    let mut patch = ParamPatch::default();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("--set `{s}` is not key=value"))?;
        patch.set(k.trim(), v)?;
    }
    Ok(patch)
}

fn parse_grid(s: &str, dx: f64, boundary: &str) -> Result<GridSpec> {
    let (w, h) = s.split_once('x').context("--grid must look like WxH")?;
    let boundary = match boundary {
        "zero_flux" | "zero-flux" => Boundary::ZeroFlux,
        "periodic" => Boundary::Periodic,
        other => bail!("unknown boundary `{other}`"),
    };
    Ok(GridSpec::new(
        w.trim().parse()?,
        h.trim().parse()?,
        dx,
        boundary,
    )?)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let store = Store::open(&cli.store)
        .with_context(|| format!("opening store {}", cli.store.display()))?;
    match cli.command {
        Command::Run {
            grid,
            dx,
            boundary,
            steps,
            checkpoint_every,
            set,
        } => {
            let grid = parse_grid(&grid, dx, &boundary)?;
            let params = patch_from(&set)?.apply(&SolverParams::default());
            let id = store.create_root(grid, params, steps, checkpoint_every)?;
            print_json(&store.run(&id)?)?;
        }
        Command::Branch {
            run,
            at,
            steps,
            set,
        } => {
            let id = store.branch_with_steps(&RunId(run), at, patch_from(&set)?, steps)?;
            print_json(&serde_json::json!({
                "run": store.run(&id)?,
                "stats": store.stats(&id)?,
            }))?;
        }
        Command::Runs => print_json(&store.runs())?,
        Command::Status { run } => {
            let id = RunId(run);
            print_json(&serde_json::json!({
                "run": store.run(&id)?,
                "params": store.effective_params(&id)?,
                "stats": store.stats(&id).ok(),
            }))?;
        }
        Command::Render { run, t, field, out } => {
            let id = RunId(run);
            let field: Field = field.parse()?;
            let grid = store.run(&id)?.grid;
            let frame = store.materialize(&id, t)?;
            std::fs::write(&out, render_ppm(&frame, &grid, field))
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} ({}x{})", out.display(), grid.nx, grid.ny);
        }
        Command::Query {
            run,
            x,
            y,
            t,
            field,
        } => {
            let id = RunId(run);
            let src = StoreSource::new(&store, &id)?;
            let value = sample_point(&src, SpaceTimePoint::new(x, y, t), field.parse()?)?;
            println!("{value}");
        }
        Command::Bench {
            workload,
            schemes,
            workers,
        } => {
            let runs = store.runs();
            let out = run_bench(
                &workload,
                &parse_schemes(&schemes)?,
                &parse_workers(&workers)?,
                Some(&runs),
            )?;
            print_json(&out)?;
        }
        Command::Serve { host, port } => {
            let app = branchvis::router(Arc::new(store));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, app).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
    }
    Ok(())
}
