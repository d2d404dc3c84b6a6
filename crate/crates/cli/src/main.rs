use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use fibersim_core::cli::{
    cmd_diff, cmd_run, cmd_validate, env_seed, parse_binding, CliError, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "fibersim",
    version,
    about = "Sparse tensor accelerator simulator"
)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a spec file and list its violations.
    Validate { spec: PathBuf },
    /// Execute a spec on input tensors and model its cost.
    Run {
        spec: PathBuf,
        /// NAME=PATH (Matrix Market) or NAME=gen:shape=AxB,density=D[,seed=S]
        #[arg(long = "tensor", value_name = "BINDING")]
        tensors: Vec<String>,
        /// Per-action energy table (`component.action = pJ` lines).
        #[arg(long)]
        energy: Option<PathBuf>,
        /// Directory for report.json, report.txt, trace.csv and ir.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        dump_ir: bool,
        /// Exit 1 when the model reports any diagnostic.
        #[arg(long)]
        strict: bool,
        #[arg(short, long, action = ArgAction::Count)]
        verbose: u8,
    },
    /// Compare two report.json files.
    Diff { a: PathBuf, b: PathBuf },
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    match Args::parse().cmd {
        Cmd::Validate { spec } => {
            let (code, diags) = cmd_validate(&spec);
            for d in &diags {
                eprintln!("{d}");
            }
            if code == 0 {
                println!("{}: ok", spec.display());
            }
            ExitCode::from(code as u8)
        }
        Cmd::Run {
            spec,
            tensors,
            energy,
            out,
            trace,
            dump_ir,
            strict,
            verbose,
        } => {
            let seed = match env_seed() {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let mut cfg = RunConfig {
                spec,
                energy,
                out,
                trace,
                dump_ir,
                strict,
                verbosity: verbose,
                ..Default::default()
            };
            for t in &tensors {
                match parse_binding(t, seed) {
                    Ok((name, src)) => {
                        cfg.tensors.insert(name, src);
                    }
                    Err(e) => return fail(e),
                }
            }
            match cmd_run(&cfg) {
                Ok(o) => {
                    print!("{}", o.table);
                    if verbose > 0 {
                        if let Some(ir) = &o.ir {
                            print!("\n{ir}");
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Cmd::Diff { a, b } => match cmd_diff(&a, &b) {
            Ok(d) => {
                print!("{}", d.to_table());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
