use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use canf::checkpoint;
use canf::config::{load_config, RunConfig};
use canf::harness::{
    bench_csv, bench_table, default_bench_shapes, generate_samples, run_ablation, run_bench, run_train, write_reports,
    Suite,
};
use canf::model::count_parameters;
use canf::pgm::write_pgms;
use canf::verify;
use canf::{Error, Result};

#[derive(Parser)]
#[command(name = "canf", version, about = "Condition-aware weight generation for toy diffusion transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }

    fn load(&self) -> Result<RunConfig> {
        load_config(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on the synthetic dataset and save a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Generate images from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class of every sample; cycles through all classes when omitted.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// DDIM steps; defaults to the checkpoint's `sample_steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale; defaults to the checkpoint's `guidance`.
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/samples")]
        out: PathBuf,
    },
    /// Run one ablation suite over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// module-sets, condition-sources, control-methods or can-vs-aks.
        #[arg(long)]
        suite: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Time per-sample, fused and static convolution layers.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,8,32")]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 11)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let rec = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{rec}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train { cfg, out } => train(&cfg.load()?, &out),
        Command::Sample {
            checkpoint,
            class,
            count,
            steps,
            guidance,
            seed,
            out,
        } => sample(&checkpoint, class, count, steps, guidance, seed, &out),
        Command::Ablate { cfg, suite, seeds, out } => ablate(&cfg.load()?, &suite, &seeds, &out),
        Command::Bench { batch, repeats, out } => bench(&batch, repeats, out.as_deref()),
        Command::Verify { seed } => run_verify(seed),
    }
}

fn train(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let (report, model) = run_train(cfg, "train", "single")?;
    for e in &report.epochs {
        println!(
            "epoch {:>3}  train {:.6}  eval {:.6}  {:.2} ms/step",
            e.epoch, e.train_loss, e.eval_loss, e.step_ms
        );
    }
    let counts = count_parameters(&model);
    println!(
        "params {} (static {}, generators {}, control {})  fidelity {:.4}",
        counts.total, counts.static_params, counts.generators, counts.control, report.fidelity
    );
    let path = out.join("model.canf");
    checkpoint::save(&model, cfg, &path)?;
    write_reports(out, "train", [&report])?;
    println!("checkpoint {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn sample(
    path: &Path,
    class: Option<usize>,
    count: usize,
    steps: Option<usize>,
    guidance: Option<f64>,
    seed: u64,
    out: &Path,
) -> Result<ExitCode> {
    let ck = checkpoint::load(path)?;
    let (cfg, model) = ck.into_model::<f32>(&[])?;
    let k = cfg.model.n_classes;
    let labels: Vec<usize> = (0..count).map(|i| class.unwrap_or(i % k)).collect();
    let steps = steps.unwrap_or(cfg.train.sample_steps);
    let guidance = guidance.unwrap_or(cfg.train.guidance);
    let images = generate_samples(&model, &cfg, &labels, steps, guidance, seed)?;
    let files = write_pgms(out, "sample", &images)?;
    let label_tensor = canf::Tensor::<f32>::from_fn(&[labels.len()], |i| labels[i] as f32);
    checkpoint::save_tensors(
        &cfg.serialize(),
        &[("samples", &images), ("labels", &label_tensor)],
        &out.join("samples.canf"),
    )?;
    println!("{} images in {}", files.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn ablate(base: &RunConfig, suite: &str, seeds: &[u64], out: &Path) -> Result<ExitCode> {
    let suite = Suite::parse(suite)?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let result = run_ablation(suite, base, seeds)?;
    print!("{}", result.table());
    write_reports(out, suite.name(), result.reports())?;
    let failed = result.rows.iter().filter(|r| r.result.is_err()).count();
    for row in result.rows.iter().filter(|r| r.result.is_err()) {
        eprintln!(
            "{}",
            serde_json::json!({ "variant": row.variant, "seed": row.seed, "error": row.result.as_ref().err() })
        );
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn bench(batch: &[usize], repeats: usize, out: Option<&Path>) -> Result<ExitCode> {
    let rows = run_bench(&default_bench_shapes(), batch, repeats)?;
    print!("{}", bench_table(&rows));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("bench.csv"), bench_csv(&rows))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_verify(seed: u64) -> Result<ExitCode> {
    let base = canf::model::ModelConfig {
        width: 16,
        depth: 2,
        heads: 2,
        cond_dim: 8,
        ..Default::default()
    };
    let suites = [
        verify::fusion_equivalence(50, seed)?,
        verify::distributivity(20, seed)?,
        verify::baseline_reduction(&base, 10, seed)?,
        verify::model_gradients(seed)?.0,
    ];
    let mut ok = true;
    for s in &suites {
        println!(
            "{:<20} {:>5}/{:<5} worst {:.3e}  {}",
            s.name,
            s.passed,
            s.total,
            s.worst,
            if s.ok() { "PASS" } else { "FAIL" }
        );
        for f in s.failures.iter().take(5) {
            println!("    {f}");
        }
        ok &= s.ok();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
