use clap::{Args, Parser, Subcommand};
use cmsc_core::config::Config;
use cmsc_core::harness::{csv_string, emit_csv, Harness, ResultRow};
use cmsc_core::model::Models;
use cmsc_core::phy::self_test;
use cmsc_core::trainer::{write_loss_csv, Trainer};
use cmsc_core::{Error, Result};
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

/// Cross-modal semantic communication simulator.
#[derive(Parser, Debug)]
#[command(name = "cmsc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train all models and write a checkpoint plus a per-step loss CSV.
    Train(Common),
    /// AP for the four ego/collaborator sensor pairings.
    SensorMatrix(Common),
    /// AP against SNR for each configured method.
    SnrSweep(Common),
    /// AP against compression ratio at several SNRs.
    LambdaSweep(Common),
    /// Quick checks of the LDPC code, QAM mapping and coded link.
    PhySelftest(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration; defaults are used for anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed for `train`, the experiment seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV (loss history for `train`, results otherwise). Results go
    /// to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model checkpoint, written by `train` and read by the sweeps.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the number of evaluation scenes.
    #[arg(long)]
    scenes: Option<usize>,
}

const DEFAULT_CHECKPOINT: &str = "cmsc.ckpt";
const DEFAULT_LOSS_CSV: &str = "train_loss.csv";

impl Common {
    fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(n) = self.scenes {
            cfg.experiment.scenes = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CHECKPOINT))
    }
}

fn fresh_models(cfg: &Config) -> Result<Models> {
    Models::new(
        cfg.render.channels,
        &cfg.model,
        &cfg.perception,
        cfg.train.seed,
    )
}

fn train(args: &Common) -> Result<()> {
    let mut cfg = args.config()?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let ckpt = args.checkpoint();
    let loss_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_LOSS_CSV));
    let trainer = Trainer::new(cfg.train.clone(), cfg.scene.clone(), cfg.render.clone())?;
    let mut models = fresh_models(&cfg)?;
    let outcome = trainer.train(&mut models, |stage, m| {
        eprintln!("stage {stage} done, checkpoint {}", ckpt.display());
        m.save(&ckpt)
    })?;
    for p in &outcome.probes {
        eprintln!(
            "stage {}: probe loss {:.5} -> {:.5}",
            p.stage, p.before.total, p.after.total
        );
    }
    models.save(&ckpt)?;
    let f = File::create(&loss_path)
        .map_err(|e| Error::Usage(format!("cannot write {}: {e}", loss_path.display())))?;
    write_loss_csv(BufWriter::new(f), &outcome.history)
}

fn sweep(args: &Common, run: impl Fn(&Harness) -> Result<Vec<ResultRow>>) -> Result<()> {
    let mut cfg = args.config()?;
    if let Some(s) = args.seed {
        cfg.experiment.seed = s;
    }
    let mut models = fresh_models(&cfg)?;
    models.load(&args.checkpoint())?;
    let harness = Harness::new(&models, &cfg)?;
    let rows = run(&harness)?;
    match &args.out {
        Some(p) => emit_csv(&rows, p),
        None => {
            print!("{}", csv_string(&rows)?);
            Ok(())
        }
    }
}

fn phy_selftest(args: &Common) -> Result<()> {
    args.config()?;
    let checks = self_test(args.seed.unwrap_or(0))?;
    let mut text = String::new();
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        text.push_str(&format!("{verdict} {}: {}\n", c.name, c.detail));
        failed += usize::from(!c.passed);
    }
    match &args.out {
        Some(p) => std::fs::write(p, &text)?,
        None => print!("{text}"),
    }
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} PHY self-checks failed")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::SensorMatrix(a) => sweep(a, |h| h.run_sensor_matrix()),
        Command::SnrSweep(a) => sweep(a, |h| h.run_snr_sweep()),
        Command::LambdaSweep(a) => sweep(a, |h| h.run_lambda_sweep()),
        Command::PhySelftest(a) => phy_selftest(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
