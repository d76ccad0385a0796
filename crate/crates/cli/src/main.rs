use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cfb::config::FilterMode;
use cfb::erf::ErfDataset;
use cfb::experiment::{ablate, render_table, AblationAxis, RunSummary, TableRow};
use cfb::io::write_atomic;
use cfb::plot::history_plots;
use cfb::sim::stream::gen_stream;
use cfb::sim::{history_jsonl, parse_history, predict_records, run_burn_in, HistoryEvent, SimState, Simulation};
use cfb::{
    filter_confusion, pseudo_purity, BankSnapshot, Error, ExperimentConfig, FeatureBankSet, OodFilter, Progress,
    RejectReason, Result,
};

/// Class-wise feature bank OOD filtering for pseudo-labels, on synthetic embeddings.
#[derive(Parser)]
#[command(name = "cfb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply to every key left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set bank.capacity=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic stream as ERF files: burn-in labeled data plus one unlabeled file per epoch.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Burn in the detector and warm the banks; writes a bank snapshot.
    Burnin {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Bank snapshot to write.
        #[arg(long)]
        out: PathBuf,
        /// Labeled ERF to burn in on instead of the generated burn-in set.
        #[arg(long)]
        labeled: Option<PathBuf>,
        /// Also write the teacher's predictions on epoch-1 unlabeled data as a pseudo ERF.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Gate an ERF of pseudo predictions against a bank snapshot; writes decisions JSONL.
    Filter {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Completed training iterations, for the threshold schedule.
        #[arg(long, default_value_t = 0)]
        step: u64,
        /// Total training iterations.
        #[arg(long, default_value_t = 1)]
        total: u64,
    },
    /// Full burn-in plus mutual-learning run; writes the history JSONL.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Directory for threshold.svg and retention.svg.
        #[arg(long)]
        plots: Option<PathBuf>,
    },
    /// Sweep one axis over several seeds and print a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// bank_length, metric, threshold, bank or scorer.
        #[arg(long)]
        axis: String,
        /// Seeds per variant, counting up from the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the rows as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare history files in one table, a row per file.
    Report {
        #[arg(required = true)]
        histories: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn config_sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.toml");
    path.with_file_name(name)
}

fn generate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let data = gen_stream(&cfg.stream, cfg.seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    write_text(&out_dir.join("config.toml"), &cfg.to_toml())?;
    ErfDataset::from_stream(&data.burn_in, true)?.write(&out_dir.join("burnin.erf"))?;
    for epoch in 1..data.unlabeled.len() {
        ErfDataset::from_stream(&data.unlabeled[epoch], false)?.write(&out_dir.join(format!("unlabeled-{epoch}.erf")))?;
    }
    println!("{}", json!({"burn_in": data.burn_in.len(), "epochs": data.unlabeled.len() - 1, "out_dir": out_dir}));
    Ok(())
}

fn burnin(cfg: &ExperimentConfig, out: &Path, labeled: Option<&Path>, predictions: Option<&Path>) -> Result<()> {
    let data = gen_stream(&cfg.stream, cfg.seed)?;
    let records = match labeled {
        Some(p) => {
            let ds = ErfDataset::read(p)?;
            if ds.dim != cfg.stream.dimension {
                return Err(Error::Validation(format!(
                    "{}: feature dimension {} does not match stream.dimension {}",
                    p.display(),
                    ds.dim,
                    cfg.stream.dimension
                )));
            }
            ds.labeled_records()
        }
        None => data.burn_in.clone(),
    };
    let mut state = SimState::new(
        cfg.stream.num_id_classes,
        cfg.stream.dimension,
        cfg.bank.capacity,
        cfg.train.temperature,
    )?;
    let t = &cfg.train;
    run_burn_in(&mut state, &records, t.burnin_epochs, t.burnin_batch, t.lr)?;
    state.banks.snapshot().write(out)?;
    write_text(&config_sidecar(out), &cfg.to_toml())?;
    if let Some(p) = predictions {
        let preds = predict_records(&state.teacher, data.unlabeled.get(1).map_or(&[][..], Vec::as_slice))?;
        ErfDataset::from_predictions(&preds)?.write(p)?;
    }
    println!(
        "{}",
        json!({"labeled": records.len(), "warm": state.banks.is_warm(), "cold_classes": state.banks.cold_classes()})
    );
    Ok(())
}

fn filter(cfg: &ExperimentConfig, bank: &Path, input: &Path, out: &Path, progress: Progress) -> Result<()> {
    if cfg.filter.mode != FilterMode::Cfb {
        return Err(Error::Config(format!(
            "filter.mode `{}` cannot run on ERF input, which carries no logits; use `cfb`",
            cfg.filter.mode.as_str()
        )));
    }
    let snapshot = BankSnapshot::read(bank)?;
    if snapshot.capacity != cfg.bank.capacity {
        return Err(Error::Config(format!(
            "bank snapshot capacity {} differs from bank.capacity {}",
            snapshot.capacity, cfg.bank.capacity
        )));
    }
    let banks = FeatureBankSet::restore(&snapshot)?;
    let preds = ErfDataset::read(input)?.predictions()?;
    let decisions = OodFilter::new(cfg.filter_config()?)?.filter(&preds, &banks, progress, None)?;

    let mut text = json!({"type": "config", "config": cfg, "step": progress.step, "total": progress.total}).to_string();
    text.push('\n');
    for d in &decisions {
        let mut v = serde_json::to_value(d).expect("decision serializes");
        v["type"] = json!("decision");
        text.push_str(&v.to_string());
        text.push('\n');
    }
    let count = |r: RejectReason| decisions.iter().filter(|d| !d.kept && d.reject_reason == r).count();
    let confusion = filter_confusion(&decisions, &preds)?;
    let summary = json!({
        "type": "summary",
        "records": decisions.len(),
        "kept": decisions.iter().filter(|d| d.kept).count(),
        "low_confidence": count(RejectReason::LowConfidence),
        "ood": count(RejectReason::Ood),
        "cold_bank": count(RejectReason::ColdBank),
        "warm": banks.is_warm(),
        "confusion": confusion,
        "id_retention": confusion.id_retention(),
        "ood_leakage": confusion.ood_leakage(),
        "f1": confusion.f1(),
        "pseudo_purity": pseudo_purity(&decisions, &preds)?,
    });
    text.push_str(&summary.to_string());
    text.push('\n');
    write_text(out, &text)?;
    println!("{summary}");
    Ok(())
}

fn simulate(cfg: ExperimentConfig, out: &Path, plots: Option<&Path>) -> Result<()> {
    let mut events = Vec::new();
    Simulation::new(cfg)?.run(&mut |e| {
        events.push(e);
        Ok(())
    })?;
    write_text(out, &history_jsonl(&events))?;
    if let Some(dir) = plots {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let (thresholds, retention) = history_plots(&events);
        write_text(&dir.join("threshold.svg"), &thresholds)?;
        write_text(&dir.join("retention.svg"), &retention)?;
    }
    let row = TableRow::from_runs("run", &[RunSummary::from_events(&events)?]);
    println!("{}", serde_json::to_string(&row).expect("row serializes"));
    Ok(())
}

fn report(histories: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for path in histories {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let events = parse_history(&text, &path.display().to_string())?;
        let label = events
            .iter()
            .find_map(|e| match e {
                HistoryEvent::Config { config } => Some(format!(
                    "{} ({}, seed {})",
                    path.file_stem().unwrap_or_default().to_string_lossy(),
                    config.filter.mode.as_str(),
                    config.seed
                )),
                _ => None,
            })
            .unwrap_or_else(|| path.display().to_string());
        rows.push(TableRow::from_runs(label, &[RunSummary::from_events(&events)?]));
    }
    let table = render_table("report", &rows);
    print!("{table}");
    if let Some(p) = out {
        write_text(p, &table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { cfg, out_dir } => generate(&cfg.load()?, &out_dir),
        Command::Burnin {
            cfg,
            out,
            labeled,
            predictions,
        } => burnin(&cfg.load()?, &out, labeled.as_deref(), predictions.as_deref()),
        Command::Filter {
            cfg,
            bank,
            input,
            out,
            step,
            total,
        } => filter(&cfg.load()?, &bank, &input, &out, Progress { step, total }),
        Command::Simulate { cfg, out, plots } => simulate(cfg.load()?, &out, plots.as_deref()),
        Command::Ablate {
            cfg,
            axis,
            seeds,
            out,
            json,
        } => {
            let base = cfg.load()?;
            let axis: AblationAxis = axis.parse()?;
            let rows = ablate(&base, axis, seeds, base.filter.workers)?;
            let table = render_table(&format!("ablation: {}", axis.as_str()), &rows);
            print!("{table}");
            if let Some(p) = out {
                write_text(&p, &table)?;
            }
            if let Some(p) = json {
                let body = json!({"axis": axis, "seeds": seeds, "config": base, "rows": rows});
                write_text(&p, &format!("{body}\n"))?;
            }
            Ok(())
        }
        Command::Report { histories, out } => report(&histories, out.as_deref()),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
