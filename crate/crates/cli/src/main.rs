use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use promptdrop_core::ablation::{metrics_json, run_ablation_with, Arm};
use promptdrop_core::analysis::{importance_pass, residual_uniformity, retention_survey};
use promptdrop_core::config::Config;
use promptdrop_core::data::{generate_dataset, SyntheticDataset};
use promptdrop_core::dropout::DropoutMode;
use promptdrop_core::encoder::{load_checkpoint, save_checkpoint, EncoderState};
use promptdrop_core::rng::{derive_seed, Purpose};
use promptdrop_core::train::{evaluate, train};
use promptdrop_core::{selftest, Error};

const ARTIFACT_VERSION: &str = "1";

#[derive(Parser)]
#[command(name = "promptdrop", version, about = "Importance-weighted token dropout for prompt tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset snapshot.
    GenData(Common),
    /// Train one model and evaluate it.
    Train(Common),
    /// Evaluate a saved checkpoint.
    Eval(WithCheckpoint),
    /// Run the four-arm ablation over the configured seeds.
    Ablate(Common),
    /// Importance heatmap, retention sums and residual uniformity.
    Analyze(WithCheckpoint),
    /// Run the invariant suite.
    Selftest(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "PROMPTDROP_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "PROMPTDROP_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to load; `analyze` trains a fresh model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

struct Run {
    cfg: Config,
    seed: u64,
    hash: String,
    out: PathBuf,
    command: &'static str,
}

impl Run {
    fn new(c: &Common, command: &'static str) -> Result<Self> {
        let mut cfg = Config::load(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
        if c.seed.is_some() {
            cfg.seed = c.seed;
        }
        let seed = cfg.require_seed()?;
        let hash = cfg.hash();
        std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
        Ok(Self {
            cfg,
            seed,
            hash,
            out: c.out.clone(),
            command,
        })
    }

    fn tag(&self) -> String {
        format!("s{}-{}", self.seed, &self.hash[..12])
    }

    fn meta(&self) -> Value {
        json!({
            "command": self.command,
            "config_hash": self.hash,
            "seed": self.seed,
            "version": ARTIFACT_VERSION,
        })
    }

    fn csv_header(&self) -> String {
        format!(
            "# command={} config_hash={} seed={} version={}\n",
            self.command, self.hash, self.seed, ARTIFACT_VERSION
        )
    }

    fn write_json(&self, name: &str, body: Value) -> Result<PathBuf> {
        let mut doc = json!({ "meta": self.meta() });
        if let (Some(d), Value::Object(b)) = (doc.as_object_mut(), body) {
            d.extend(b);
        }
        let path = self.out.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        std::fs::write(&path, self.csv_header() + body).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn dataset(&self) -> Result<SyntheticDataset> {
        Ok(generate_dataset(&self.cfg.data, self.seed)?)
    }

    fn train(&self, data: &SyntheticDataset) -> Result<EncoderState> {
        let (state, history) = train(&self.cfg.train_config(self.seed), data)?;
        self.write_csv(&format!("train-log-{}.csv", self.tag()), &history.csv())?;
        save_checkpoint(&self.out.join(format!("checkpoint-{}.pdck", self.tag())), &state, &self.meta())?;
        Ok(state)
    }

    fn load(&self, path: &Path) -> Result<EncoderState> {
        let (state, _) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        if state.config() != &self.cfg.encoder {
            bail!("checkpoint encoder does not match the [encoder] section of the config");
        }
        Ok(state)
    }
}

fn cmd_gen_data(c: &Common) -> Result<()> {
    let run = Run::new(c, "gen-data")?;
    let data = run.dataset()?;
    let dir = run.out.join(format!("data-{}", run.tag()));
    data.save(&dir, &run.meta())?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let run = Run::new(c, "train")?;
    let data = run.dataset()?;
    let state = run.train(&data)?;
    let m = evaluate(&state, &data)?;
    let path = run.write_json(&format!("metrics-{}.json", run.tag()), json!({ "metrics": m }))?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_eval(c: &WithCheckpoint) -> Result<()> {
    let run = Run::new(&c.common, "eval")?;
    let Some(ckpt) = &c.checkpoint else {
        bail!("eval needs --checkpoint");
    };
    let state = run.load(ckpt)?;
    let m = evaluate(&state, &run.dataset()?)?;
    let path = run.write_json(&format!("eval-{}.json", run.tag()), json!({ "metrics": m }))?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_ablate(c: &Common) -> Result<()> {
    let run = Run::new(c, "ablate")?;
    let dir = run.out.join(format!("ablation-{}", &run.hash[..12]));
    std::fs::create_dir_all(&dir)?;
    let total = 4 * run.cfg.ablation.seeds.len();
    let table = run_ablation_with(&run.cfg.ablation_config(), &run.cfg.ablation.seeds, |row, done| {
        eprintln!("[{done}/{total}] {} seed {}: {}", row.arm.as_str(), row.seed, match (&row.metrics, &row.error) {
            (Some(m), _) => format!("hm {:.4}", m.hm),
            (None, Some(e)) => format!("FAILED {e}"),
            _ => String::new(),
        });
    })?;
    let sub = Run {
        out: dir.clone(),
        cfg: run.cfg.clone(),
        hash: run.hash.clone(),
        seed: run.seed,
        command: run.command,
    };
    for row in &table.rows {
        let name = format!("metrics-{}-s{}.json", row.arm.as_str(), row.seed);
        match &row.metrics {
            Some(m) => sub.write_json(&name, metrics_json(row.arm, row.seed, m))?,
            None => sub.write_json(&name, json!({"arm": row.arm.as_str(), "seed": row.seed, "error": row.error}))?,
        };
    }
    let ordering = table.ordering();
    sub.write_csv("summary.tsv", &table.summary_tsv())?;
    sub.write_json("table.json", json!({ "table": table, "ordering": ordering }))?;
    print!("{}", table.summary_tsv());
    let failed: Vec<&str> = Arm::ALL
        .iter()
        .filter(|a| table.rows.iter().any(|r| r.arm == **a && r.metrics.is_none()))
        .map(|a| a.as_str())
        .collect();
    if !failed.is_empty() {
        bail!(Error::TrainingFailure {
            step: 0,
            reason: format!("partial results; failed arms: {}", failed.join(", ")),
        });
    }
    Ok(())
}

fn cmd_analyze(c: &WithCheckpoint) -> Result<()> {
    let run = Run::new(&c.common, "analyze")?;
    let data = run.dataset()?;
    let state = match &c.checkpoint {
        Some(p) => run.load(p)?,
        None => run.train(&data)?,
    };
    let (p_min, p_max) = (run.cfg.dropout.p_min, run.cfg.dropout.p_max);
    let sample = &data.test_base[run.cfg.analysis.heatmap_sample];
    let dropout_seed = derive_seed(run.seed, Purpose::Dropout);
    let pass = importance_pass(&state, &sample.image, p_min, p_max, dropout_seed)?;
    let heat = run.write_csv(&format!("heatmap-{}.csv", run.tag()), &pass.csv())?;
    let survey = retention_survey(run.cfg.analysis.retention_plans, p_min, p_max, derive_seed(run.seed, Purpose::Batch))?;
    let mode = DropoutMode::Iwtd { p_min, p_max };
    let lambda = run.cfg.schedule().at(run.cfg.train.steps)?;
    let uniformity = residual_uniformity(&state, &data, lambda, &mode, dropout_seed)?;
    let path = run.write_json(
        &format!("analysis-{}.json", run.tag()),
        json!({
            "heatmap": heat.file_name().map(|f| f.to_string_lossy().into_owned()),
            "retention_survey": survey,
            "heatmap_retention": pass.retention(p_min, p_max),
            "residual_uniformity": uniformity,
            "lambda": lambda,
        }),
    )?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_selftest(c: &Common) -> Result<()> {
    let run = Run::new(c, "selftest")?;
    let outcomes = selftest::run(run.seed);
    for o in &outcomes {
        println!("{} {:<24} {:>7.2}s  {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.seconds, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let times: Vec<(String, f64)> = outcomes.iter().map(|o| (o.name.clone(), o.seconds)).collect();
    let results: Vec<Value> = outcomes
        .iter()
        .map(|o| json!({"name": o.name, "passed": o.passed, "detail": o.detail}))
        .collect();
    run.write_json("selftest.json", json!({ "results": results }))?;
    let total: f64 = times.iter().map(|(_, s)| s).sum();
    eprintln!("selftest finished in {total:.1}s");
    if failed > 0 {
        bail!("{failed} selftest check(s) failed");
    }
    Ok(())
}

fn error_json(e: &anyhow::Error) -> Value {
    let context: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config { key, line, message }) => json!({
            "error": { "kind": "config", "key": key, "line": line, "message": message, "context": e.to_string() }
        }),
        Some(core) => json!({ "error": { "kind": core.kind(), "message": core.to_string(), "context": e.to_string() } }),
        None => json!({ "error": { "kind": "cli", "message": e.to_string(), "causes": context } }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => cmd_gen_data(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Analyze(c) => cmd_analyze(c),
        Command::Selftest(c) => cmd_selftest(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
