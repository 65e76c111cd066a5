//! `nhflow`: experiment runner for the n-harmonic map flow laboratory.
//!
//! Every run resolves a single [`config::ExperimentConfig`] from the command line
//! flags and an optional JSON file (the file wins), writes its artifacts into the
//! output directory, and finishes with `manifest.json`.

// `!(x > 0.0)` is used on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod manifest;
mod recipes;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{Experiment, ExperimentConfig, Family};
use manifest::{sha256_hex, Artifact, InputFile, Manifest};

#[derive(Parser)]
#[command(name = "nhflow", version, about = "n-harmonic map flow experiments")]
struct Cli {
    /// JSON config; its fields override the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct FlowArgs {
    /// Domain dimension.
    #[arg(long)]
    n: Option<usize>,
    /// Grid cells.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    family: Option<Family>,
    #[arg(long)]
    amplitude: Option<f64>,
    /// Bubble width for the `bubble` family.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_time: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one equivariant flow.
    Flow(FlowArgs),
    /// Sweep dimensions and amplitudes of the initial family.
    BlowupSweep {
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        /// Comma-separated amplitudes.
        #[arg(long, value_delimiter = ',')]
        amplitude: Option<Vec<f64>>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_time: Option<f64>,
    },
    /// Run a flow and decompose its blowup into base, bubble and neck.
    BubbleAnalyze {
        #[command(flatten)]
        flow: FlowArgs,
        /// Neck radius.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Annulus energy of the glued initial map against σ.
    Construct {
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated gluing scales.
        #[arg(long, value_delimiter = ',')]
        sigma: Option<Vec<f64>>,
        /// Winding number of the annulus segment.
        #[arg(long)]
        l: Option<i64>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Width and energy of the glued initial map against the winding.
    Width {
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated winding numbers.
        #[arg(long, value_delimiter = ',')]
        l: Option<Vec<i64>>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Quick invariant suite; exits nonzero if any check fails.
    Checks,
}

fn apply_flow(cfg: &mut ExperimentConfig, a: &FlowArgs) {
    if let Some(n) = a.n {
        cfg.flow.n = n;
    }
    if let Some(k) = a.k {
        cfg.flow.k = k;
    }
    if let Some(f) = a.family {
        cfg.initial.family = f;
    }
    if let Some(x) = a.amplitude {
        cfg.initial.amplitude = x;
    }
    if let Some(x) = a.lambda {
        cfg.initial.lambda = x;
    }
    if let Some(x) = a.max_time {
        cfg.flow.max_time = x;
    }
}

fn from_flags(cli: &Cli) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Flow(a) => {
            cfg.experiment = Experiment::Flow;
            apply_flow(&mut cfg, a);
        }
        Command::BlowupSweep { n, amplitude, k, max_time } => {
            cfg.experiment = Experiment::BlowupSweep;
            if let Some(n) = n {
                cfg.sweep.n = n.clone();
            }
            if let Some(a) = amplitude {
                cfg.sweep.amplitude = a.clone();
            }
            apply_flow(&mut cfg, &FlowArgs { k: *k, max_time: *max_time, ..Default::default() });
        }
        Command::BubbleAnalyze { flow, delta } => {
            cfg.experiment = Experiment::BubbleAnalyze;
            apply_flow(&mut cfg, flow);
            if let Some(d) = delta {
                cfg.bubble.extract.delta = *d;
            }
        }
        Command::Construct { n, sigma, l, resolution } => {
            cfg.experiment = Experiment::Construct;
            let s = &mut cfg.construct;
            if let Some(n) = n {
                s.spec.n = *n;
            }
            if let Some(x) = sigma {
                s.sigmas = x.clone();
            }
            if let Some(l) = l {
                s.spec.l = *l;
            }
            if let Some(r) = resolution {
                s.spec.resolution = *r;
            }
        }
        Command::Width { n, l, sigma, resolution } => {
            cfg.experiment = Experiment::Width;
            let s = &mut cfg.construct;
            if let Some(n) = n {
                s.spec.n = *n;
            }
            if let Some(x) = l {
                s.windings = x.clone();
            }
            if let Some(x) = sigma {
                s.spec.sigma = *x;
            }
            if let Some(r) = resolution {
                s.spec.resolution = *r;
            }
        }
        Command::Checks => cfg.experiment = Experiment::Checks,
    }
    cfg
}

fn fail(kind: &str, err: &anyhow::Error, code: u8) -> ExitCode {
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    let diag = json!({
        "schema_version": nhflow::io::SCHEMA_VERSION,
        "error": { "kind": kind, "message": chain.join(": "), "causes": chain },
    });
    eprintln!("{diag}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let input = match &cli.config {
        Some(path) => match std::fs::read(path).with_context(|| format!("cannot read {}", path.display())) {
            Ok(bytes) => Some((path.clone(), bytes)),
            Err(e) => return fail("invalid_config", &e, 2),
        },
        None => None,
    };
    let cfg = match config::resolve(&from_flags(&cli), input.as_ref().map(|x| x.1.as_slice())) {
        Ok(c) => c,
        Err(e) => return fail("invalid_config", &e, 2),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        pool = pool.num_threads(j);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => return fail("runtime", &e.into(), 3),
    };
    let t0 = Instant::now();
    let outcome = match pool.install(|| recipes::dispatch(&cfg)) {
        Ok(o) => o,
        Err(e) => return fail("runtime", &e, 3),
    };
    let written = (|| -> anyhow::Result<()> {
        let artifacts = outcome
            .artifacts
            .iter()
            .map(|a| Artifact::of(&cfg.out, a))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let input_file = input.as_ref().map(|(p, b)| InputFile {
            path: p.clone(),
            sha256: sha256_hex(b),
        });
        let m = Manifest::new(&cfg, input_file, t0.elapsed().as_secs_f64(), artifacts)?;
        nhflow::io::write_json(&m, &cfg.out.join("manifest.json"))?;
        Ok(())
    })();
    if let Err(e) = written {
        return fail("runtime", &e, 3);
    }
    if outcome.ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
