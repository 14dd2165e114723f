use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use lsn_core::bench::hessian::bench_hessian;
use lsn_core::bench::pipeline::{self, Layout, PipelineConfig};
use lsn_core::Result;

#[derive(Parser)]
#[command(
    name = "lsn",
    version,
    about = "Laplacian segmentation networks: training, Laplace fitting and OOD benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config with blocks data, arch, train, laplace, eval. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "lsn-out")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate(Common),
    /// Train all ensemble members of every model.
    Train(Common),
    /// Fit the Laplace posterior of every model.
    FitLaplace(Common),
    /// Score ID and OOD test sets; writes results.csv and heatmaps.
    Evaluate(Common),
    /// Summaries from results.csv: summary.json and ratios.json.
    Report(Common),
    /// Curvature scaling benchmark.
    BenchHessian {
        /// Side lengths of the square inputs.
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        sides: Vec<usize>,
        /// Channel ladder of the benchmarked U-net.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        channels: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in order, plus manifest.json.
    All(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let data = pipeline::stage_generate(&c.config()?, &Layout::new(&c.out))?;
            println!("generated {}/{}/{} train/val/test images", data.train.len(), data.val.len(), data.test.len());
        }
        Command::Train(c) => {
            for m in pipeline::stage_train(&c.config()?, &Layout::new(&c.out))? {
                println!("{}: final epoch loss per member {:?}", m.kind.name(), m.final_losses);
            }
        }
        Command::FitLaplace(c) => {
            let (posts, _) = pipeline::stage_fit(&c.config()?, &Layout::new(&c.out))?;
            for p in posts {
                let total: f64 = p.curvature().iter().sum();
                println!(
                    "posterior over {} weights, curvature total {total:.4e}, prior precision {:e}",
                    p.len(),
                    p.prior_precision()
                );
            }
        }
        Command::Evaluate(c) => {
            let e = pipeline::stage_evaluate(&c.config()?, &Layout::new(&c.out))?;
            println!("wrote {} records", e.records.len());
        }
        Command::Report(c) => {
            print_reports(&pipeline::stage_report(&Layout::new(&c.out))?);
        }
        Command::BenchHessian { sides, channels, reps, seed, out } => {
            let report = bench_hessian(&sides, &channels, reps, seed)?;
            println!("side  pixels  params  db_s        db_peak_aux  exact_s");
            for r in &report.rows {
                let exact = r.exact_seconds.map_or("-".to_string(), |s| format!("{s:.4e}"));
                println!(
                    "{:<5} {:<7} {:<7} {:<11.4e} {:<12} {exact}",
                    r.side, r.pixels, r.params, r.db_seconds, r.db_peak_aux
                );
            }
            println!("per pixel doubling: db time {:?}", report.db_time_ratios);
            println!("per pixel doubling: db memory {:?}", report.db_memory_ratios);
            println!("per pixel doubling: exact time {:?}", report.exact_time_ratios);
            if let Some(p) = out {
                std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::All(c) => {
            let outcome = pipeline::run_pipeline(&c.config()?, &c.out)?;
            print_reports(&outcome.reports);
            println!("outputs in {}", c.out.display());
        }
    }
    Ok(())
}

fn print_reports(r: &pipeline::Reports) {
    for (key, e) in &r.summary {
        let pooled = e.pooled_auroc.map_or("undefined".to_string(), |a| format!("{a:.3}"));
        println!("{key:<32} pooled AUROC {pooled}");
    }
    for (model, rep) in &r.ratios {
        match rep {
            Some(rep) => {
                let cells: Vec<String> = rep
                    .rows
                    .iter()
                    .map(|row| {
                        let flag = if row.strong_flag {
                            "✓✓"
                        } else if row.flag {
                            "✓"
                        } else {
                            ""
                        };
                        format!("{} {:.3}{flag}", row.set, row.ratio)
                    })
                    .collect();
                println!("EPKL ratio {model}: {}", cells.join(", "));
            }
            None => println!("EPKL ratio {model}: undefined"),
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
