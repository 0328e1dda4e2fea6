use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atmotomo::experiment::{
    compare_solvers, cost_report, layer_selection_study, load_config, parse_seed_range, run_batch,
    sweep_alpha, write_cost, write_runs, ExperimentConfig, RunRecord, Setup,
};
use atmotomo::{Result, TomoError};
use clap::{Args, Parser, Subcommand};

/// Seeded tomography experiments driven by a TOML config.
#[derive(Parser)]
#[command(name = "atmotomo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Half-open seed range such as 0..32.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent trials.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct once per seed and write per-seed tables.
    Run(Common),
    /// Repeat the configured solver over a list of regularization weights.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated weights; overrides [sweep].alphas.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Run every [[compare]] entry on the same atmospheres.
    Compare(Common),
    /// Score the layers kept by the sparse solver against fixed-layer baselines.
    LayerSelect(Common),
    /// Per-iteration flop counts for full and reduced layer sets.
    Cost {
        /// Config with [[cost]] rows; the stock rows are used without it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, requires_all = ["full", "reduced"])]
        stars: Option<u64>,
        #[arg(long)]
        full: Option<u64>,
        #[arg(long)]
        reduced: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Parse a config and check every reference without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

struct Context {
    setup: Setup,
    seeds: Vec<u64>,
    out: PathBuf,
    threads: usize,
}

impl Common {
    fn context(&self) -> Result<Context> {
        let config = load_config(&self.config)?;
        let seeds = match (&self.seed, &self.seeds) {
            (Some(s), _) => vec![*s],
            (None, Some(r)) => parse_seed_range(r)?,
            (None, None) => config.seeds()?,
        };
        let out = self.out.clone().unwrap_or_else(|| {
            let base = self.config.parent().unwrap_or(Path::new("."));
            base.join(&config.run.output)
        });
        log::info!("config {} hash {}", self.config.display(), config.hash());
        let setup = Setup::new(config)?;
        log::info!("layer grids {:?}", setup.problem.op.layer_sizes());
        Ok(Context {
            setup,
            seeds,
            out,
            threads: self.threads,
        })
    }
}

/// Logs each record and reports whether any run diverged.
fn report<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> bool {
    let mut diverged = false;
    for r in records {
        log::info!(
            "{} seed {}: mean Strehl {:.4}, center {:.4}, nnz {}, {} iterations, {:.1?}",
            r.label,
            r.seed,
            r.mean_strehl,
            r.center_strehl,
            r.nnz,
            r.iterations,
            r.wall_time
        );
        if r.diverged {
            log::error!("{} seed {} diverged", r.label, r.seed);
            diverged = true;
        }
    }
    diverged
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run(common) => {
            let ctx = common.context()?;
            let trials = run_batch(&ctx.setup, &ctx.seeds, ctx.threads)?;
            write_runs(&ctx.setup, &trials, &ctx.out)?;
            Ok(report(trials.iter().map(|t| &t.record)))
        }
        Command::SweepAlpha { common, alphas } => {
            let ctx = common.context()?;
            let alphas = match alphas {
                Some(a) => a,
                None => ctx
                    .setup
                    .config
                    .sweep
                    .as_ref()
                    .map(|s| s.alphas.clone())
                    .ok_or_else(|| TomoError::Config("no [sweep] block and no --alphas".into()))?,
            };
            let table = sweep_alpha(&ctx.setup, &alphas, &ctx.seeds, ctx.threads)?;
            table.write(&ctx.out)?;
            Ok(report(table.records.iter().flatten()))
        }
        Command::Compare(common) => {
            let ctx = common.context()?;
            let table = compare_solvers(&ctx.setup, &ctx.seeds, ctx.threads)?;
            table.write(&ctx.out)?;
            Ok(report(table.records.iter().flatten()))
        }
        Command::LayerSelect(common) => {
            let ctx = common.context()?;
            let table = layer_selection_study(&ctx.setup, &ctx.seeds, ctx.threads)?;
            table.write(&ctx.out)?;
            log::info!("survivor is the best candidate in {:.0}% of seeds", 100.0 * table.hit_rate());
            Ok(report(table.rows.iter().flat_map(|r| &r.baselines)))
        }
        Command::Cost {
            config,
            stars,
            full,
            reduced,
            out,
        } => {
            let rows = match (stars, config) {
                (Some(g), _) => vec![cost_report(g, full.unwrap_or(0), reduced.unwrap_or(0))?],
                (None, Some(path)) => {
                    let config: ExperimentConfig = load_config(path)?;
                    config
                        .cost
                        .iter()
                        .map(|c| cost_report(c.stars, c.full_layers, c.reduced_layers))
                        .collect::<Result<_>>()?
                }
                (None, None) => vec![cost_report(6, 40, 5)?, cost_report(6, 9, 3)?],
            };
            for r in &rows {
                println!(
                    "G={} L={}: {}n, L={}: {}n, speed-up {:.1}",
                    r.stars, r.full_layers, r.full_cost, r.reduced_layers, r.reduced_cost, r.speedup
                );
            }
            write_cost(&rows, &out)?;
            Ok(false)
        }
        Command::ValidateConfig { config } => {
            let parsed = load_config(&config)?;
            parsed.validate()?;
            println!("{}: ok, hash {}", config.display(), parsed.hash());
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
