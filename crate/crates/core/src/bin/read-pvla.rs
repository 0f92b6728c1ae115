use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use read_pvla::adapters::CellKind;
use read_pvla::config::RunConfig;
use read_pvla::data::{generate_dataset, save_dataset, Split};
use read_pvla::pipeline::{
    eval_run, finetune_seeds, grad_check_suite, obtain_backbone, param_count_table, read_cost_matrix,
    save_backbone,
};
use read_pvla::pot::{exact_partial_ot, solve_mass_grid, DiscreteDistribution, TransportMode};
use read_pvla::train::{PvlaMode, StrategyKind};
use read_pvla::{Error, Result};

#[derive(Parser)]
#[command(name = "read-pvla", version, about = "Recurrent adapters with partial video-language alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed (default: READ_PVLA_SEED or 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Which data to write.
        #[arg(long, value_enum, default_value_t = Which::Target)]
        which: Which,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        noise: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        domain_shift: Option<f64>,
        #[arg(long)]
        world_seed: Option<u64>,
    },
    /// Build the stand-in backbone on source data and save it frozen.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a strategy; writes checkpoint, metrics and summary.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        out: PathBuf,
        /// Number of consecutive seeds to run.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Score a saved fine-tuning run.
    Eval {
        /// Output directory of a `finetune` run.
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Solve partial transport for a plain-text cost matrix.
    OtSolve {
        #[command(flatten)]
        common: Common,
        cost: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        mass_grid: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Also print the exact optimum at the chosen mass.
        #[arg(long)]
        exact: bool,
    },
    /// Finite-difference check of every trainable gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Trainable / total parameters per strategy.
    ParamCount {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Clone)]
struct RunFlags {
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long)]
    pvla_mode: Option<PvlaMode>,
    #[arg(long)]
    cell: Option<CellKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Target,
    Source,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Partial,
    Full,
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply_preset()?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            out,
            which,
            n_train,
            noise,
            domain_shift,
            world_seed,
        } => {
            let mut cfg = base_config(&common)?;
            let spec = match which {
                Which::Target => &mut cfg.data,
                Which::Source => &mut cfg.source,
            };
            set(&mut spec.n_train, n_train);
            set(&mut spec.noise_sigma, noise);
            set(&mut spec.domain_shift, domain_shift);
            set(&mut spec.world_seed, world_seed);
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            cfg.finalize()?;
            let spec = match which {
                Which::Target => &cfg.data,
                Which::Source => &cfg.source,
            };
            let ds = generate_dataset(spec)?;
            save_dataset(&ds, &out)?;
            cfg.write_resolved(&out)?;
            println!(
                "wrote {} train / {} val / {} test samples to {}",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                out.display()
            );
        }
        Command::Pretrain {
            common,
            out,
            blocks,
            epochs,
        } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.model.num_blocks, blocks);
            set(&mut cfg.pretrain.epochs, epochs);
            if let Some(s) = common.seed {
                cfg.pretrain.seed = s;
            }
            cfg.backbone_dir = None;
            cfg.finalize()?;
            let (model, report) = obtain_backbone(&cfg)?;
            save_backbone(&model, &out)?;
            cfg.write_resolved(&out)?;
            if let Some(r) = report {
                println!("source mAP {:.4} -> {:.4}", r.initial_map, r.final_map);
                let path = out.join("pretrain.json");
                std::fs::write(&path, serde_json::to_string_pretty(&r)?).map_err(|e| Error::io(&path, e))?;
            }
            println!("frozen backbone ({} parameters) saved to {}", model.total_params(), out.display());
        }
        Command::Finetune {
            common,
            run,
            out,
            seeds,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if run.preset.is_some() {
                cfg.train.preset = run.preset.clone();
            }
            cfg.apply_preset()?;
            set(&mut cfg.seed, common.seed);
            set(&mut cfg.seeds, seeds);
            set(&mut cfg.strategy.kind, run.strategy);
            set(&mut cfg.strategy.cell, run.cell);
            set(&mut cfg.strategy.k, run.k);
            set(&mut cfg.train.epochs, run.epochs);
            set(&mut cfg.train.learning_rate, run.lr);
            set(&mut cfg.train.batch_size, run.batch_size);
            set(&mut cfg.train.lambda_pvla, run.lambda);
            set(&mut cfg.train.pvla_mode, run.pvla_mode);
            set(&mut cfg.train.solver.n_iter, run.iters);
            if run.backbone.is_some() {
                cfg.backbone_dir = run.backbone;
            }
            if run.data.is_some() {
                cfg.data_dir = run.data;
            }
            cfg.finalize()?;
            let summary = finetune_seeds(&cfg, &out)?;
            for r in &summary.runs {
                println!(
                    "seed {} {}: val mAP {:.4} -> {:.4} ({} / {} trainable)",
                    r.seed, r.strategy, r.initial_val_map, r.final_val_map, r.trainable_params, r.total_params
                );
            }
            if summary.runs.len() > 1 {
                println!("mean val mAP {:.4} over {} seeds", summary.mean_val_map, summary.runs.len());
            }
        }
        Command::Eval { run, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let map = eval_run(&run, split)?;
            println!("{} mAP {map}", split.name());
        }
        Command::OtSolve {
            common,
            cost,
            tau,
            iters,
            mass_grid,
            mode,
            exact,
        } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.solver.tau, tau);
            set(&mut cfg.solver.n_iter, iters);
            if mass_grid.is_some() {
                cfg.solver.mass_grid_size = mass_grid;
            }
            if let Some(m) = mode {
                cfg.solver.mode = match m {
                    ModeArg::Partial => TransportMode::Partial,
                    ModeArg::Full => TransportMode::Full,
                };
            }
            cfg.solver.validate()?;
            let c = read_cost_matrix(&cost)?;
            let res = solve_mass_grid(&c, &cfg.solver)?;
            println!("loss {}", res.loss);
            println!("best_mass {}", res.best_mass);
            println!("plan");
            for i in 0..res.plan.rows() {
                let row: Vec<String> = (0..res.plan.cols()).map(|j| format!("{:.6}", res.plan.at(i, j))).collect();
                println!("{}", row.join(" "));
            }
            if exact {
                let a = DiscreteDistribution::uniform(c.rows());
                let b = DiscreteDistribution::uniform(c.cols());
                let (_, value) = exact_partial_ot(&c, &a, &b, res.best_mass)?;
                println!("exact {value}");
            }
        }
        Command::GradCheck { common } => {
            let cfg = base_config(&common)?;
            let rep = grad_check_suite(cfg.seed)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst: {}[{}])",
                rep.max_rel_error, rep.checked, rep.worst.0, rep.worst.1
            );
            if rep.max_rel_error >= 1e-4 {
                return Err(Error::Numeric(format!(
                    "gradient check failed: {:.3e} >= 1e-4",
                    rep.max_rel_error
                )));
            }
        }
        Command::ParamCount {
            common,
            k,
            rank,
            blocks,
            json,
        } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.strategy.k, k);
            set(&mut cfg.strategy.rank, rank);
            set(&mut cfg.model.num_blocks, blocks);
            cfg.finalize()?;
            let rows = param_count_table(&cfg.model, &cfg.strategy)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                println!("{:<10} {:>12} {:>12} {:>9}", "strategy", "trainable", "total", "fraction");
                for r in rows {
                    println!(
                        "{:<10} {:>12} {:>12} {:>8.2}%",
                        r.strategy.name(),
                        r.trainable,
                        r.total,
                        100.0 * r.fraction()
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
