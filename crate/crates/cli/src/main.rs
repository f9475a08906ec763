use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deepbayes_core::attacks::{load_adversarial_batch, save_adversarial_batch, AdversarialBatch};
use deepbayes_core::harness::{
    attack_cell, attack_rows, batch_path, calibrate_model, cell_applies, clean_rows, load_data,
    model_path, run_pipeline, train_model, transfer_rows, two_rings_demo, write_demo, write_report,
    DemoConfig, ExperimentConfig, PreparedData, ReportRow,
};
use deepbayes_core::lvm::{load_checkpoint, save_checkpoint, Checkpoint};
use deepbayes_core::Error;
use log::info;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_MISSING: u8 = 4;

#[derive(Parser)]
#[command(name = "deepbayes", version, about = "Train latent-variable classifiers, attack them and detect the attacks")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured model and save checkpoints.
    Train,
    /// Fit detector thresholds on the training data and store them in the checkpoints.
    Calibrate,
    /// Craft adversarial batches for every (model, attack) pair.
    Attack,
    /// Write per-input detector decisions for clean and crafted inputs.
    Detect,
    /// Clean accuracy plus metrics of any crafted batches found on disk.
    Evaluate,
    /// Replay every crafted batch on every other model.
    Transfer,
    /// Run the whole pipeline and write the report.
    Report,
    /// Decision and rejection grids of the analytic two-rings classifier.
    TwoRingsDemo,
}

struct Context {
    cfg: ExperimentConfig,
    base: PathBuf,
    out: PathBuf,
    jobs: usize,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self, Error> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs --config <path>".into()))?;
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self {
            cfg,
            base,
            out,
            jobs: cli.jobs.max(1),
        })
    }

    fn data(&self) -> Result<PreparedData, Error> {
        load_data(&self.cfg, &self.base)
    }

    fn checkpoint(&self, name: &str) -> Result<Checkpoint, Error> {
        load_checkpoint(&model_path(&self.out, name))
    }

    fn calibrated(&self, name: &str) -> Result<Checkpoint, Error> {
        let ckpt = self.checkpoint(name)?;
        if ckpt.calibration.is_none() {
            return Err(Error::MissingArtifact(
                model_path(&self.out, name).with_extension("json (calibration section)"),
            ));
        }
        Ok(ckpt)
    }

    /// Batches of configured cells that exist on disk.
    fn batches(&self) -> Result<Vec<(String, String, AdversarialBatch)>, Error> {
        let mut found = Vec::new();
        for m in &self.cfg.models {
            for a in &self.cfg.attacks {
                let path = batch_path(&self.out, &m.name(), &a.name());
                if path.exists() {
                    found.push((m.name(), a.name(), load_adversarial_batch(&path)?));
                }
            }
        }
        Ok(found)
    }
}

fn train(ctx: &Context) -> Result<(), Error> {
    let data = ctx.data()?;
    let mut rows = Vec::new();
    for entry in &ctx.cfg.models {
        let name = entry.name();
        let (model, trace) = train_model(entry, &ctx.cfg, &data)?;
        for (epoch, v) in trace.iter().enumerate() {
            rows.push(ReportRow::new(&name, "none", Some((epoch + 1) as f64), "train_objective", Some(*v)));
        }
        let path = model_path(&ctx.out, &name);
        save_checkpoint(
            &path,
            &Checkpoint {
                model,
                seed: ctx.cfg.seed,
                calibration: None,
            },
        )?;
        info!("wrote {}", path.display());
    }
    write_report(&ctx.out.join("training.csv"), &rows)
}

fn calibrate(ctx: &Context) -> Result<(), Error> {
    let data = ctx.data()?;
    for entry in &ctx.cfg.models {
        let name = entry.name();
        let mut ckpt = ctx.checkpoint(&name)?;
        ckpt.calibration = Some(calibrate_model(&name, &ckpt.model, &ctx.cfg, &data)?);
        save_checkpoint(&model_path(&ctx.out, &name), &ckpt)?;
    }
    Ok(())
}

fn attack(ctx: &Context) -> Result<(), Error> {
    let data = ctx.data()?;
    for m in &ctx.cfg.models {
        let name = m.name();
        let ckpt = ctx.checkpoint(&name)?;
        for a in ctx.cfg.attacks.iter().filter(|a| cell_applies(&ckpt.model, a)) {
            let batch = attack_cell(&name, &ckpt.model, ckpt.calibration.as_ref(), a, &ctx.cfg, &data)?;
            save_adversarial_batch(&batch_path(&ctx.out, &name, &a.name()), &batch)?;
        }
    }
    Ok(())
}

fn detect(ctx: &Context) -> Result<(), Error> {
    use deepbayes_core::harness::evaluate_crafted;
    let data = ctx.data()?;
    let mut text = String::from("model,attack,setting,index,label,predicted,detector,statistic,accepted\n");
    let mut emit = |model: &str, attack: &str, s: &deepbayes_core::attacks::CraftedSetting, labels: &[usize]| {
        for (kind, out) in &s.detections {
            for i in 0..labels.len() {
                text.push_str(&format!(
                    "{model},{attack},{},{i},{},{},{},{},{}\n",
                    s.setting,
                    labels[i],
                    s.predicted[i],
                    kind.name(),
                    out.statistics[i],
                    u8::from(out.accepted[i])
                ));
            }
        }
    };
    for m in &ctx.cfg.models {
        let name = m.name();
        let ckpt = ctx.calibrated(&name)?;
        let mut rng = deepbayes_core::harness::cell_rng(ctx.cfg.seed, &format!("detect/{name}"));
        let clean = evaluate_crafted(
            &ckpt.model,
            ckpt.calibration.as_ref(),
            data.test.labels(),
            data.test.inputs().clone(),
            0.0,
            ctx.cfg.samples,
            &mut rng,
        )?;
        emit(&name, "none", &clean, data.test.labels());
    }
    for (model, attack, batch) in ctx.batches()? {
        for s in &batch.settings {
            emit(&model, &attack, s, &batch.labels);
        }
    }
    let path = ctx.out.join("detections.csv");
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::Io {
        path: ctx.out.clone(),
        source: e,
    })?;
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

fn evaluate(ctx: &Context) -> Result<(), Error> {
    let data = ctx.data()?;
    let mut rows = Vec::new();
    for m in &ctx.cfg.models {
        let name = m.name();
        let ckpt = ctx.checkpoint(&name)?;
        rows.extend(clean_rows(&name, &ckpt.model, ckpt.calibration.as_ref(), &ctx.cfg, &data)?);
    }
    for (model, attack, batch) in ctx.batches()? {
        rows.extend(attack_rows(&model, &attack, &batch)?);
    }
    write_report(&ctx.out.join("report.csv"), &rows)
}

fn transfer(ctx: &Context) -> Result<(), Error> {
    let mut rows = Vec::new();
    for (source, attack, batch) in ctx.batches()? {
        for target in &ctx.cfg.models {
            let name = target.name();
            if name == source {
                continue;
            }
            let ckpt = ctx.checkpoint(&name)?;
            rows.extend(transfer_rows(
                &source,
                &attack,
                &batch,
                &name,
                &ckpt.model,
                ckpt.calibration.as_ref(),
                &ctx.cfg,
            )?);
        }
    }
    write_report(&ctx.out.join("transfer.csv"), &rows)
}

fn demo(cli: &Cli) -> Result<(), Error> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<DemoConfig>(&text)
                .map_err(|e| Error::Config(format!("malformed demo config: {e}")))?
        }
        None => DemoConfig::default(),
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let demo = two_rings_demo(&cfg, cli.seed.unwrap_or(0))?;
    write_demo(&out, &demo)
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::TwoRingsDemo = cli.command {
        return demo(cli);
    }
    let ctx = Context::load(cli)?;
    match cli.command {
        Command::Train => train(&ctx),
        Command::Calibrate => calibrate(&ctx),
        Command::Attack => attack(&ctx),
        Command::Detect => detect(&ctx),
        Command::Evaluate => evaluate(&ctx),
        Command::Transfer => transfer(&ctx),
        Command::Report => run_pipeline(&ctx.cfg, &ctx.base, &ctx.out, ctx.jobs).map(|_| ()),
        Command::TwoRingsDemo => unreachable!(),
    }
}

fn classify(err: &Error) -> (u8, &'static str) {
    match err {
        Error::Config(_) => (EXIT_CONFIG, "config"),
        Error::MissingArtifact(_) => (EXIT_MISSING, "missing_artifact"),
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            (EXIT_MISSING, "missing_artifact")
        }
        _ => (EXIT_FAILURE, "failure"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEEPBAYES_LOG", "warn")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = classify(&err);
            let msg = serde_json::json!({ "error": kind, "message": err.to_string() });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
