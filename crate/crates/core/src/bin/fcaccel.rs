use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use fcaccel::cli::{
    self, cmd_run, cmd_sweep, cmd_tables, cmd_verify, gen_weights, save_container, Mode, OutputFormat, RunConfig,
    SweepGrid,
};
use fcaccel::QFormat;

#[derive(Parser)]
#[command(name = "fcaccel", version, about = "Fully-connected-layer accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one layer: timing (analytic/detailed), functional, or all.
    Run(RunArgs),
    /// Reproduce the latency and throughput tables.
    Tables {
        /// Emit CSV instead of aligned text.
        #[arg(long)]
        csv: bool,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Timing reports over a grid of configurations, as CSV.
    Sweep(SweepArgs),
    /// Write a seeded random weight container.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 10)]
        frac_bits: u32,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Tiled inference against the serial fixed-point oracle on random layers.
    Verify {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also check one full 4096 -> 1000 layer.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with RunConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fc8-alex, fc8-vgg, fc7, fc6-alex or fc6-vgg.
    #[arg(long)]
    preset: Option<String>,
    /// Custom layer: IN_FEATURES OUT_FEATURES.
    #[arg(long, num_args = 2, value_names = ["IN", "OUT"])]
    custom: Option<Vec<usize>>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    pe_count: Option<usize>,
    #[arg(long, conflicts_with = "non_pipelined")]
    pipelined: bool,
    #[arg(long)]
    non_pipelined: bool,
    #[arg(long)]
    rd_clk_hz: Option<f64>,
    #[arg(long)]
    rd_period_ns: Option<f64>,
    #[arg(long)]
    wr_clk_hz: Option<f64>,
    #[arg(long)]
    cycles_per_slot: Option<u32>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    inputs: Option<PathBuf>,
    #[arg(long)]
    bias: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
}

impl RunArgs {
    fn into_config(self) -> anyhow::Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if self.$f.is_some() { rc.$f = self.$f; } )* };
        }
        set!(preset, tile, pe_count, rd_clk_hz, rd_period_ns, wr_clk_hz, cycles_per_slot, weights, inputs, bias);
        if let Some(c) = self.custom {
            rc.custom = Some([c[0], c[1]]);
        }
        if self.pipelined {
            rc.pipelined = Some(true);
        } else if self.non_pipelined {
            rc.pipelined = Some(false);
        }
        if let Some(m) = self.mode {
            rc.mode = m;
        }
        if let Some(s) = self.seed {
            rc.seed = s;
        }
        if self.out.is_some() {
            rc.output = self.out;
        }
        if let Some(f) = self.format {
            rc.format = f;
        }
        Ok(rc)
    }
}

#[derive(Args)]
struct SweepArgs {
    /// TOML file with SweepGrid fields; flags override it.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, num_args = 2, value_names = ["IN", "OUT"])]
    custom: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    tile: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pe_count: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pipelined: Option<Vec<bool>>,
    #[arg(long, value_delimiter = ',')]
    rd_clk_hz: Option<Vec<f64>>,
    /// Add the two-clock feasibility verdict to every row.
    #[arg(long)]
    detailed: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<bool> {
    match Cli::parse().command {
        Command::Run(args) => {
            let rc = args.into_config()?;
            let outcome = cmd_run(&rc)?;
            let text = match rc.format {
                OutputFormat::Json => serde_json::to_string_pretty(&outcome)? + "\n",
                OutputFormat::Csv => cli::run_csv(&outcome)?,
            };
            emit(rc.output.as_ref(), &text)?;
            if !outcome.ok {
                eprintln!("run failed one or more checks");
            }
            Ok(outcome.ok)
        }
        Command::Tables { csv, out } => {
            let rows = cmd_tables()?;
            let text = if csv { cli::tables_csv(&rows)? } else { cli::tables_text(&rows) };
            emit(out.as_ref(), &text)?;
            Ok(true)
        }
        Command::Sweep(args) => {
            let mut grid = match &args.grid {
                Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => SweepGrid::default(),
            };
            if args.preset.is_some() {
                grid.preset = args.preset;
            }
            if let Some(c) = args.custom {
                grid.custom = Some([c[0], c[1]]);
            }
            if let Some(v) = args.tile {
                grid.tiles = v;
            }
            if let Some(v) = args.pe_count {
                grid.pe_counts = v;
            }
            if let Some(v) = args.pipelined {
                grid.pipelined = v;
            }
            if args.rd_clk_hz.is_some() {
                grid.rd_clk_hz = args.rd_clk_hz;
            }
            grid.detailed |= args.detailed;
            let rows = cmd_sweep(&grid);
            for r in rows.iter().filter(|r| r.status != "ok") {
                eprintln!("row {}: {}", r.index, r.status);
            }
            emit(args.out.as_ref(), &cli::sweep_csv(&rows)?)?;
            Ok(true)
        }
        Command::Gen { seed, rows, cols, frac_bits, out } => {
            let m = gen_weights(seed, rows, cols, QFormat::new(16, frac_bits)?)?;
            save_container(&out, &m)?;
            Ok(true)
        }
        Command::Verify { cases, seed, full } => {
            let v = cmd_verify(cases, seed, full);
            for f in &v.failures {
                eprintln!("FAIL {f}");
            }
            println!("{} cases, {} failures", v.cases, v.failures.len());
            Ok(v.failures.is_empty())
        }
    }
}
