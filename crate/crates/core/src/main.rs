use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixerlab::analysis::export_heatmap;
use mixerlab::harness::{
    analyze_snapshots, build_dataset, forecast_series, run_experiment, run_single_arm, DataSource, ExperimentConfig,
    ExperimentRun, SeedStreams, SnapshotSet, Split, Target,
};
use mixerlab::models::{save_checkpoint, DenseInit, Template};
use mixerlab::mixers::MixerFamily;
use mixerlab::{Error, Result};

#[derive(Parser)]
#[command(name = "mixerlab", version, about = "Structured sequence mixers versus dense replacements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset as CSV.
    Gen(Common),
    /// Train a single arm (the original, or the dense arm with --dense-init).
    Train(Common),
    /// Train both arms and compare them.
    Compare(Common),
    /// Similarity and rank analysis of two snapshot files.
    Analyze {
        #[arg(long)]
        orig: PathBuf,
        #[arg(long)]
        dense: PathBuf,
        /// Seed of the random-matrix baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write PGM and CSV heatmaps for every matrix in a snapshot file.
    Export {
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    template: Option<Template>,
    #[arg(long)]
    mixer: Option<MixerFamily>,
    #[arg(long)]
    dense_init: Option<DenseInit>,
    #[arg(long)]
    causal_dense: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.template {
            cfg.template = t;
        }
        if self.mixer.is_some() {
            cfg.mixer = self.mixer;
        }
        if let Some(d) = self.dense_init {
            cfg.dense_init = d;
        }
        if self.causal_dense {
            cfg.causal_dense = true;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn gen(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    create_dir(&common.out)?;
    let ds = build_dataset(&cfg, &SeedStreams::from_master(cfg.seed))?;
    let path = common.out.join("data.csv");
    if cfg.data == DataSource::Toy {
        // One row per window: split, label, then the window flattened step-major.
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Io { path: path.clone(), source: e.into() })?;
        for win in &ds.windows {
            let Target::Class(k) = win.target else { unreachable!("toy data is labelled") };
            let split = match win.split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            let mut rec = vec![split.to_string(), k.to_string()];
            rec.extend(win.lookback.data().iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(|e| Error::Io { path: path.clone(), source: e.into() })?;
        }
        w.flush().map_err(|e| Error::Io { path: path.clone(), source: e })?;
    } else {
        let series = forecast_series(&ds)?;
        let names: Vec<String> = (0..series.cols()).map(|c| format!("ch{c}")).collect();
        mixerlab::harness::write_series_csv(&path, &names, &series)?;
    }
    write_text(&common.out.join("config.cfg"), &cfg.to_text())?;
    println!("wrote {} ({} windows)", path.display(), ds.windows.len());
    Ok(())
}

fn write_run(out: &Path, run: &ExperimentRun) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join("report.json"), &run.report.to_json()?)?;
    for (name, model) in [("orig", &run.orig), ("jd", &run.jd)] {
        if let Some(m) = model {
            save_checkpoint(&out.join(format!("{name}.ckpt")), &m.params)?;
        }
    }
    for (name, snaps) in [("orig", &run.snapshots_orig), ("jd", &run.snapshots_jd)] {
        if let Some(s) = snaps {
            s.save(&out.join(format!("snapshots_{name}.json")))?;
        }
    }
    Ok(())
}

fn summarize(run: &ExperimentRun) {
    for arm in [&run.report.orig, &run.report.jd].into_iter().flatten() {
        let t = &arm.test;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        println!(
            "{:<5} test mse {}  mase {}  accuracy {}  params {}  {:.1}s",
            arm.name,
            fmt(t.mse),
            fmt(t.mase),
            fmt(t.accuracy),
            arm.census.total,
            arm.wall_clock_secs
        );
    }
    if let Some(a) = &run.report.analysis {
        println!("mean JSD(orig, jd) {:.6}, mean JSD(orig, random) {:.6}", a.mean_jsd, a.mean_jsd_random_baseline);
    }
    if let Some(e) = &run.report.error {
        eprintln!("incomplete: {e}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(c) => gen(&c).map(|_| true),
        Command::Train(c) => {
            let cfg = c.config()?;
            let run = run_single_arm(&cfg, c.dense_init.is_some())?;
            write_run(&c.out, &run)?;
            summarize(&run);
            Ok(run.report.complete)
        }
        Command::Compare(c) => {
            let run = run_experiment(&c.config()?)?;
            write_run(&c.out, &run)?;
            summarize(&run);
            Ok(run.report.complete)
        }
        Command::Analyze { orig, dense, seed, out } => {
            let report = analyze_snapshots(&SnapshotSet::load(&orig)?, &SnapshotSet::load(&dense)?, seed)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(dir) => {
                    create_dir(&dir)?;
                    write_text(&dir.join("analysis.json"), &json)?;
                }
                None => println!("{json}"),
            }
            eprintln!("mean JSD(orig, dense) {:.6}, mean JSD(orig, random) {:.6}", report.mean_jsd, report.mean_jsd_random_baseline);
            Ok(true)
        }
        Command::Export { snapshots, out } => {
            let set = SnapshotSet::load(&snapshots)?;
            for s in &set.snapshots {
                let base = out.join(format!("{}_b{}_h{}", s.model, s.block, s.head));
                let (pgm, _) = export_heatmap(&s.matrix, &base)?;
                println!("{}", pgm.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
