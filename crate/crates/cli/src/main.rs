//! `coughwatch` command-line front end.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use coughwatch_core::budget::{self, mfcc_budget, model_budget, shape_budget, BudgetReport, NetworkShape};
use coughwatch_core::metrics::{self, accumulate, read_manifest, ConfusionCounts, EvalReport, Label};
use coughwatch_core::mfcc::{MfccConfig, MfccExtractor, MfccMatrix};
use coughwatch_core::pipeline::{EventReport, Pipeline};
use coughwatch_core::preprocess::Preprocessor;
use coughwatch_core::quantize::quantize_model;
use coughwatch_core::{synth, AudioSegment, ModelWeights, PipelineConfig, SegmentReader};
use rayon::prelude::*;
use serde::Serialize;

const FEATURE_MAGIC: &[u8; 4] = b"MFC1";

#[derive(Parser)]
#[command(name = "coughwatch", version, about = "Cough detection on 16 kHz mono WAV audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect cough events in a WAV file (`-` reads stdin). Exits 0 when
    /// events were found, 1 when none were, 2 on error.
    Detect {
        input: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write MFCC feature matrices, one per one-second segment.
    Featurize {
        input: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FeatureFormat::Binary)]
        format: FeatureFormat,
        /// Skip AGC and band-pass filtering.
        #[arg(long)]
        raw: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score every file in a `path,label` manifest.
    Evaluate {
        manifest: PathBuf,
        /// Worker threads across files.
        #[arg(short, long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Memory and compute budget for feature configurations and the network.
    Budget {
        /// Every frame length / overlap pair of the reference table.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        frame_ms: Option<u32>,
        #[arg(long)]
        overlap: Option<u32>,
        #[arg(long, default_value_t = budget::DEFAULT_SCRATCH_KB)]
        scratch_kb: f64,
        /// Take the network shape from a weight file.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, conflicts_with = "json")]
        csv: bool,
        #[arg(long)]
        json: bool,
    },
    /// Convert float weights to int8.
    Quantize { input: PathBuf, output: PathBuf },
    /// Write seeded, untrained weights (for fixtures and smoke tests).
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 267)]
        n_frames: usize,
        /// Override the dense-layer bias.
        #[arg(long, allow_hyphen_values = true)]
        dense_bias: Option<f32>,
    },
    /// Write a synthetic test clip: silence with optional noise bursts.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        seconds: f64,
        /// Burst start time in seconds; repeatable.
        #[arg(long = "burst-at")]
        bursts: Vec<f64>,
        #[arg(long, default_value_t = 0.2)]
        burst_length: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureFormat {
    Binary,
    Json,
}

/// Configuration file plus per-key overrides. Flags win over the file.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    frame_ms: Option<u32>,
    #[arg(long)]
    overlap: Option<u32>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    merge_window: Option<f64>,
    #[arg(long)]
    tail: Option<f64>,
    #[arg(long)]
    onset_threshold: Option<f64>,
    #[arg(long)]
    band_low: Option<f64>,
    #[arg(long)]
    band_high: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                PipelineConfig::from_text(&text).with_context(|| format!("in config {}", path.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(w) = &self.weights {
            cfg.weights_path = Some(w.clone());
        }
        let m = &mut cfg.mfcc;
        m.frame_length_ms = self.frame_ms.unwrap_or(m.frame_length_ms);
        m.overlap_pct = self.overlap.unwrap_or(m.overlap_pct);
        let p = &mut cfg.preprocess;
        p.onset_threshold = self.onset_threshold.unwrap_or(p.onset_threshold);
        p.band_low_hz = self.band_low.unwrap_or(p.band_low_hz);
        p.band_high_hz = self.band_high.unwrap_or(p.band_high_hz);
        cfg.decision_threshold = self.threshold.unwrap_or(cfg.decision_threshold);
        cfg.merge_window_s = self.merge_window.unwrap_or(cfg.merge_window_s);
        cfg.tail_s = self.tail.unwrap_or(cfg.tail_s);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
    ModelWeights::from_bytes(&bytes).with_context(|| format!("loading weights {}", path.display()))
}

fn build_pipeline(cfg: PipelineConfig) -> Result<Pipeline> {
    let Some(path) = cfg.weights_path.clone() else {
        bail!("no weights given (use --weights or weights_path in the config file)");
    };
    let weights = load_weights(&path)?;
    Pipeline::new(cfg, weights).with_context(|| format!("weights {}", path.display()))
}

fn open_input(path: &Path) -> Result<Box<dyn Read>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Box::new(BufReader::new(f)))
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn dump(cfg: &PipelineConfig) -> ExitCode {
    print!("{}", cfg.to_text());
    ExitCode::SUCCESS
}

fn detect(input: &Path, args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    if args.dump_config {
        return Ok(dump(&cfg));
    }
    let pipeline = build_pipeline(cfg)?;
    let source = input.display().to_string();
    let report = pipeline
        .detect(open_input(input)?, &source)
        .with_context(|| format!("processing {source}"))?;
    print!("{}", report.to_json());
    Ok(if report.events.is_empty() { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

#[derive(Serialize)]
struct FeatureJson<'a> {
    segment_index: usize,
    n_mfcc: usize,
    n_frames: usize,
    coefficients: Vec<&'a [f32]>,
}

fn write_binary(out: &mut dyn Write, index: usize, m: &MfccMatrix) -> io::Result<()> {
    out.write_all(FEATURE_MAGIC)?;
    for v in [m.n_mfcc, m.n_frames, index] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for c in &m.coefficients {
        out.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

fn featurize(input: &Path, out: Option<&Path>, format: FeatureFormat, raw: bool, args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    if args.dump_config {
        return Ok(dump(&cfg));
    }
    let extractor = MfccExtractor::new(cfg.mfcc.clone())?;
    let pre = Preprocessor::new(cfg.preprocess.clone())?;
    let features = |seg: &AudioSegment| {
        if raw {
            extractor.mfcc(seg)
        } else {
            extractor.mfcc(&pre.condition(seg))
        }
    };
    let mut sink = open_output(out)?;
    let mut json = Vec::new();
    for seg in SegmentReader::new(open_input(input)?).with_context(|| format!("reading {}", input.display()))? {
        let seg = seg.with_context(|| format!("reading {}", input.display()))?;
        let m = features(&seg)?;
        match format {
            FeatureFormat::Binary => write_binary(&mut sink, seg.index, &m)?,
            FeatureFormat::Json => json.push((seg.index, m)),
        }
    }
    if let FeatureFormat::Json = format {
        let doc: Vec<FeatureJson> = json
            .iter()
            .map(|(i, m)| FeatureJson { segment_index: *i, n_mfcc: m.n_mfcc, n_frames: m.n_frames, coefficients: m.rows().collect() })
            .collect();
        serde_json::to_writer(&mut sink, &doc)?;
        writeln!(sink)?;
    }
    sink.flush()?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct FileResult {
    path: PathBuf,
    label: Label,
    predicted: Label,
    events: usize,
}

#[derive(Serialize)]
struct Evaluation {
    config_fingerprint: String,
    report: EvalReport,
    files: Vec<FileResult>,
}

fn evaluate(manifest: &Path, jobs: usize, args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    if args.dump_config {
        return Ok(dump(&cfg));
    }
    let pipeline = build_pipeline(cfg)?;
    let text = File::open(manifest).with_context(|| format!("opening manifest {}", manifest.display()))?;
    let entries = read_manifest(text).with_context(|| format!("in manifest {}", manifest.display()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));

    let run = |e: &metrics::ManifestEntry| -> Result<FileResult> {
        let path = base.join(&e.path);
        let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let r: EventReport = pipeline
            .detect(BufReader::new(f), &path.display().to_string())
            .with_context(|| format!("processing {}", path.display()))?;
        Ok(FileResult {
            path: e.path.clone(),
            label: e.label,
            predicted: Label::from_bool(!r.events.is_empty()),
            events: r.events.len(),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let files: Vec<FileResult> = pool.install(|| entries.par_iter().map(run).collect::<Result<_>>())?;

    let counts = files.iter().fold(ConfusionCounts::default(), |c, f| accumulate(c, f.predicted, f.label));
    let report = metrics::metrics(counts);
    eprint!("{}", report.to_table());
    let doc = Evaluation { config_fingerprint: pipeline.config().fingerprint(), report, files };
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn budget_cmd(
    all: bool,
    frame_ms: Option<u32>,
    overlap: Option<u32>,
    scratch_kb: f64,
    weights: Option<&Path>,
    csv: bool,
    json: bool,
) -> Result<ExitCode> {
    let configs: Vec<MfccConfig> = if all {
        MfccConfig::table_rows().collect()
    } else {
        let d = MfccConfig::default();
        vec![MfccConfig::new(frame_ms.unwrap_or(d.frame_length_ms), overlap.unwrap_or(d.overlap_pct))]
    };
    for c in &configs {
        c.validate()?;
    }
    let features: Vec<_> = configs.iter().map(|c| mfcc_budget(c, scratch_kb)).collect();
    let model = match weights {
        Some(p) => model_budget(&load_weights(p)?),
        None => shape_budget(NetworkShape::default()),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&BudgetReport { features, model })?);
    } else if csv {
        print!("{}", budget::render_csv(&features));
    } else {
        print!("{}", budget::render_text(&features));
        println!();
        print!("{}", budget::render_model(&model));
    }
    Ok(ExitCode::SUCCESS)
}

fn quantize_cmd(input: &Path, output: &Path) -> Result<ExitCode> {
    let w = load_weights(input)?;
    let q = quantize_model(&w);
    fs::write(output, q.to_bytes()).with_context(|| format!("writing {}", output.display()))?;
    eprintln!(
        "payload {:.2} KB -> {:.2} KB",
        w.payload_bytes() as f64 / 1024.0,
        q.payload_bytes() as f64 / 1024.0
    );
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Detect { input, config } => detect(&input, &config),
        Command::Featurize { input, out, format, raw, config } => featurize(&input, out.as_deref(), format, raw, &config),
        Command::Evaluate { manifest, jobs, config } => evaluate(&manifest, jobs, &config),
        Command::Budget { all, frame_ms, overlap, scratch_kb, weights, csv, json } => {
            budget_cmd(all, frame_ms, overlap, scratch_kb, weights.as_deref(), csv, json)
        }
        Command::Quantize { input, output } => quantize_cmd(&input, &output),
        Command::InitWeights { out, seed, n_frames, dense_bias } => {
            let mut w = ModelWeights::seeded(seed, (40, n_frames));
            if let Some(b) = dense_bias {
                w.dense.bias = b;
            }
            fs::write(&out, w.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out, seconds, bursts, burst_length, seed } => {
            let mut samples = synth::silence(seconds);
            for (i, at) in bursts.iter().enumerate() {
                synth::add_burst(&mut samples, *at, burst_length, seed + i as u64);
            }
            fs::write(&out, coughwatch_core::encode_wav(&samples)).with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("coughwatch: error: {e:#}");
            ExitCode::from(2)
        }
    }
}
