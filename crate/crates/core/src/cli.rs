//! Command-line front end: `gen-data`, `train`, `eval`, `inspect`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::eval::{self, decode};
use crate::loss::assign;
use crate::model::{ModelInput, Qeot};
use crate::tensor::Tensor;
use crate::train::{load_model, StepLog, Trainer};

/// Query-based entity-object triple extraction on synthetic text + image grids.
///
/// Settings come from built-in defaults, then `--config`, then `--set`, then
/// the dedicated flags of each subcommand; later sources win.
#[derive(Debug, Parser)]
#[command(name = "qeot", version)]
pub struct Cli {
    /// key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set d_model=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output root for all files of a run.
    #[arg(long, env = "QEOT_RUN_DIR", default_value = "runs/default", global = true)]
    pub run_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train.jsonl and test.jsonl.
    GenData(GenDataArgs),
    /// Train and write checkpoints plus a JSONL log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and print the metrics as JSON.
    Eval(EvalArgs),
    /// Dump attention maps and gate values for one sample as CSV.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset seed (`data_seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to `<run-dir>/data`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.jsonl; defaults to `<run-dir>/data`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds parameter init and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Defaults to `<run-dir>/checkpoint.bin`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `<run-dir>/data/test.jsonl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write decoded triples and counts per sample as JSONL.
    #[arg(long)]
    pub per_sample: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sample_id: String,
    /// Defaults to `<run-dir>/inspect/<sample-id>`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_ECHO: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.json";

/// Exit code for an error: 2 for invalid input or configuration, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_invalid_input() {
        2
    } else {
        1
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("file not found: {}", path.display())))
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_ECHO), &cfg.to_text())
}

fn load_split(cfg: &RunConfig, path: &Path) -> Result<Vec<Sample>> {
    let max_gold = if cfg.truncate_gold { usize::MAX } else { cfg.queries };
    data::load_checked(path, cfg.seq_len, cfg.grid, cfg.img_channels, cfg.relations, max_gold)
}

/// Runs a parsed command line, writing human-facing output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    let run_dir = cli.run_dir.clone();
    match cli.command {
        Command::GenData(a) => {
            if let Some(s) = a.seed {
                cfg.data_seed = s;
            }
            cfg.dataset_spec().validate()?;
            let dir = a.out_dir.unwrap_or_else(|| run_dir.join("data"));
            cmd_gen_data(&cfg, &dir, out)?;
            echo_config(&run_dir, &cfg)
        }
        Command::Train(a) => {
            if let Some(v) = a.steps {
                cfg.steps = v;
            }
            if let Some(v) = a.lr {
                cfg.lr = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            cfg.validate()?;
            let data_dir = a.data_dir.unwrap_or_else(|| run_dir.join("data"));
            let train_path = data_dir.join("train.jsonl");
            require_file(&train_path)?;
            if let Some(r) = &a.resume {
                require_file(r)?;
            }
            echo_config(&run_dir, &cfg)?;
            cmd_train(&cfg, &train_path, &run_dir, a.resume.as_deref(), out)
        }
        Command::Eval(a) => {
            cfg.validate()?;
            let ckpt = a.checkpoint.unwrap_or_else(|| run_dir.join(CHECKPOINT_FILE));
            let data = a.data.unwrap_or_else(|| run_dir.join("data").join("test.jsonl"));
            require_file(&ckpt)?;
            require_file(&data)?;
            echo_config(&run_dir, &cfg)?;
            cmd_eval(&cfg, &ckpt, &data, &run_dir, a.per_sample.as_deref(), out)
        }
        Command::Inspect(a) => {
            cfg.validate()?;
            let ckpt = a.checkpoint.unwrap_or_else(|| run_dir.join(CHECKPOINT_FILE));
            let data = a.data.unwrap_or_else(|| run_dir.join("data").join("test.jsonl"));
            require_file(&ckpt)?;
            require_file(&data)?;
            let dir = a.out_dir.unwrap_or_else(|| run_dir.join("inspect").join(&a.sample_id));
            echo_config(&run_dir, &cfg)?;
            cmd_inspect(&cfg, &ckpt, &data, &a.sample_id, &dir, out)
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let spec = cfg.dataset_spec();
    let d = data::generate(&spec)?;
    create_dir(dir)?;
    data::save(&d.train, &dir.join("train.jsonl"))?;
    data::save(&d.test, &dir.join("test.jsonl"))?;
    write_file(&dir.join("spec.json"), &(serde_json::to_string_pretty(&spec).expect("spec serializes") + "\n"))?;
    let triples = |s: &[Sample]| s.iter().map(|x| x.gold.len()).sum::<usize>();
    let _ = writeln!(
        out,
        "wrote {} train samples ({} triples) and {} test samples ({} triples) to {}",
        d.train.len(),
        triples(&d.train),
        d.test.len(),
        triples(&d.test),
        dir.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, train_path: &Path, run_dir: &Path, resume: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let samples = load_split(cfg, train_path)?;
    let tc = cfg.train_config();
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.model_config(), tc, p)?,
        None => Trainer::new(Qeot::new(cfg.model_config())?, tc)?,
    };
    create_dir(run_dir)?;
    let log_path = run_dir.join(LOG_FILE);
    let log_file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let ckpt_dir = run_dir.join("checkpoints");
    let every = cfg.checkpoint_every;
    let mut last: Option<StepLog> = None;
    trainer
        .run(&samples, |t, entry| {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            if every > 0 && t.step % every == 0 {
                create_dir(&ckpt_dir)?;
                t.save(&ckpt_dir.join(format!("step-{:06}.bin", t.step)))?;
            }
            last = Some(*entry);
            Ok(())
        })
        .map_err(|e| match e {
            Error::NonFiniteLoss(id) => Error::NonFiniteLoss(format!("{id} at step {}", trainer_step_hint(&log_path))),
            e => e,
        })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.save(&run_dir.join(CHECKPOINT_FILE))?;
    match last {
        Some(l) => {
            let _ = writeln!(out, "{}", serde_json::to_string(&l).expect("log entry serializes"));
        }
        None => {
            let _ = writeln!(out, "no steps run; checkpoint at step {}", trainer.step);
        }
    }
    Ok(())
}

/// Step that failed: one past the last logged step.
fn trainer_step_hint(log_path: &Path) -> usize {
    fs::read_to_string(log_path)
        .ok()
        .and_then(|s| s.lines().last().and_then(|l| serde_json::from_str::<StepLog>(l).ok()))
        .map_or(1, |l| l.step + 1)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    ckpt: &Path,
    data_path: &Path,
    run_dir: &Path,
    per_sample: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_model(cfg.model_config(), ckpt)?;
    let samples = load_split(cfg, data_path)?;
    let (report, per) = eval::evaluate_dataset(&model, &samples, cfg.iou_threshold)?;
    let json = serde_json::to_string(&report).expect("report serializes");
    write_file(&run_dir.join(METRICS_FILE), &format!("{json}\n"))?;
    if let Some(p) = per_sample {
        let mut text = String::new();
        for s in &per {
            text.push_str(&serde_json::to_string(s).expect("sample eval serializes"));
            text.push('\n');
        }
        write_file(p, &text)?;
    }
    let _ = writeln!(out, "{json}");
    Ok(())
}

fn write_csv(path: &Path, t: &Tensor) -> Result<()> {
    let cols = t.shape()[1];
    let mut s = String::new();
    for r in 0..t.shape()[0] {
        let row: Vec<String> = t.data()[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_file(path, &s)
}

pub fn cmd_inspect(cfg: &RunConfig, ckpt: &Path, data_path: &Path, id: &str, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let model = load_model(cfg.model_config(), ckpt)?;
    let samples = load_split(cfg, data_path)?;
    let sample = samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Data(format!("no sample with id `{id}` in {}", data_path.display())))?;
    let (output, state) = model.forward(ModelInput {
        tokens: &sample.tokens,
        grid: &sample.grid,
    })?;
    create_dir(dir)?;
    write_csv(&dir.join("selective_text_to_image.csv"), &state.text_self_attn)?;
    write_csv(&dir.join("selective_image_to_text.csv"), &state.img_self_attn)?;
    write_csv(&dir.join("cross_image_to_text.csv"), &state.img_to_text_cross)?;
    for (i, m) in state.dec_cross_attn.iter().enumerate() {
        write_csv(&dir.join(format!("decoder_cross_attention_layer{i}.csv")), m)?;
    }
    let (l, d) = (state.gate_text.shape()[0], state.gate_text.shape()[1]);
    let mut gates = String::from("position,token,text_gate_mean,image_gate_mean\n");
    for p in 0..l {
        let mean = |t: &Tensor| t.row(p).iter().sum::<f64>() / d as f64;
        gates.push_str(&format!("{p},{},{},{}\n", sample.tokens[p], mean(&state.gate_text), mean(&state.gate_img)));
    }
    write_file(&dir.join("gates.csv"), &gates)?;
    let assignment = assign(&output, &sample.gold, &cfg.loss_options().weights)?;
    let summary = serde_json::json!({
        "id": sample.id,
        "gold": sample.gold,
        "pred": decode(&output),
        "matched_queries": assignment.as_slice(),
    });
    write_file(&dir.join("summary.json"), &format!("{summary}\n"))?;
    let _ = writeln!(out, "wrote inspection files for {id} to {}", dir.display());
    Ok(())
}
