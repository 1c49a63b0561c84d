//! Command-line surface for the codec: corpus synthesis, prior building,
//! two-stage training, encode/decode, rate tables, and evaluation.
//!
//! Every command is deterministic for a given seed and fails with a
//! one-line error on any precondition violation. The effective
//! configuration is echoed into each output artifact: checkpoints embed
//! it, loss logs start with a config line, and evaluation reports carry a
//! `config` field.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use almcodec::audio::{load_audio, save_wav_f32, AudioClip};
use almcodec::checkpoint;
use almcodec::codestream::CodeStreamFile;
use almcodec::config::{load_config, save_config, CodecConfig};
use almcodec::eval::{
    bitrate_row, evaluate, length_sweep, BitrateRow, EvalReport, SweepRow,
};
use almcodec::fixtures::synth_corpus;
use almcodec::losses::LossReport;
use almcodec::quantizer::{
    build_prior_codebooks, load_codebooks, save_codebooks, synth_prior_features, CodebookSet,
};
use almcodec::training::{load_corpus, Stage1Trainer, Stage2Trainer};

#[derive(Parser, Debug)]
#[command(name = "almcodec", version, about = "query-token neural audio codec")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Write a starter configuration file.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Desk-scale settings for quick experiments instead of full scale.
        #[arg(long)]
        toy: bool,
    },
    /// Generate a deterministic synthetic wav corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        clips: usize,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Build frozen k-means prior codebooks from feature matrices.
    KmeansPrior {
        /// Text matrix of speech features, one row per vector; synthetic
        /// features are generated when omitted.
        #[arg(long)]
        speech_feats: Option<PathBuf>,
        /// Text matrix of general-sound features, one row per vector.
        #[arg(long)]
        sound_feats: Option<PathBuf>,
        #[arg(long, default_value_t = 2048)]
        codebook_size: usize,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        /// Lloyd iterations per layer.
        #[arg(long, default_value_t = 25)]
        iters: usize,
        /// Dimension of synthesized features (when no files are given).
        #[arg(long, default_value_t = 256)]
        feature_dim: usize,
        /// Synthesized vectors per kind (when no files are given).
        #[arg(long, default_value_t = 8192)]
        feature_count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 (frontend), stage 2 (full codec), or the
    /// single-stage ablation.
    Train(TrainOpts),
    /// Encode one wav file to a code-stream file.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a code-stream file back to a wav file.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the exact rate table for the configured window sizes.
    Bitrate {
        /// Configuration file; the built-in default is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Explicit window list, e.g. --windows 1,2,6.
        #[arg(long, value_delimiter = ',')]
        windows: Option<Vec<usize>>,
    },
    /// Round-trip a corpus through a trained model and report metrics.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Token window; the smallest configured size when omitted.
        #[arg(long)]
        window: Option<usize>,
        /// Also run the duration sweep (clips grouped by length).
        #[arg(long)]
        sweep: bool,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainStage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "single")]
    Single,
}

#[derive(Parser, Debug)]
pub struct TrainOpts {
    #[arg(long)]
    pub stage: TrainStage,
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of training wav files.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-1 frontend checkpoint (required for --stage 2).
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// Frozen prior codebooks (stage 2/single; omit with --random-priors).
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Resume a stage-2 run from a full checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// JSON-lines loss log; stdout when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Override the configured step count for this stage.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation: disable the masked-frame auxiliary loss.
    #[arg(long)]
    pub no_mae: bool,
    /// Ablation: disable the depth prediction auxiliary loss.
    #[arg(long)]
    pub no_ar: bool,
    /// Ablation: random codebooks instead of file priors.
    #[arg(long)]
    pub random_priors: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    check_thread_env()?;
    match cli.cmd {
        Cmd::InitConfig { out, toy } => {
            cmd_init_config(&out, toy)?;
            println!("wrote {}", out.display());
        }
        Cmd::Synth { out, clips, seconds, sample_rate, seed } => {
            let paths = cmd_synth(&out, clips, seconds, sample_rate, seed)?;
            println!("wrote {} clips under {}", paths.len(), out.display());
        }
        Cmd::KmeansPrior {
            speech_feats,
            sound_feats,
            codebook_size,
            layers,
            iters,
            feature_dim,
            feature_count,
            seed,
            out,
        } => {
            let set = cmd_kmeans_prior(KmeansPriorOpts {
                speech_feats,
                sound_feats,
                codebook_size,
                layers,
                iters,
                feature_dim,
                feature_count,
                seed,
                out: out.clone(),
            })?;
            println!(
                "wrote {} layers x {} codes x {} dims to {}",
                set.layers(),
                set.size(),
                set.dim(),
                out.display()
            );
        }
        Cmd::Train(opts) => {
            let out = opts.out.clone();
            let summary = cmd_train(opts)?;
            println!(
                "stage {} finished at step {}; checkpoint {}",
                summary.stage,
                summary.steps_run,
                out.display()
            );
        }
        Cmd::Encode { model, input, window, out } => {
            let s = cmd_encode(&model, &input, window, &out)?;
            println!(
                "encoded {} positions x {} layers at w={}: fps {} tps {} bps {}",
                s.tq,
                s.layers,
                window,
                s.rate.frames_per_second,
                s.rate.tokens_per_second,
                s.rate.bits_per_second
            );
            println!("wrote {}", out.display());
        }
        Cmd::Decode { model, input, out } => {
            let n = cmd_decode(&model, &input, &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Cmd::Bitrate { config, windows } => {
            let rows = cmd_bitrate(config.as_deref(), windows)?;
            for r in &rows {
                println!(
                    "w={} fps={} tps={} bps={}",
                    r.window, r.frames_per_second, r.tokens_per_second, r.bits_per_second
                );
            }
        }
        Cmd::Eval { model, data, out, window, sweep } => {
            let o = cmd_eval(&model, &data, window, sweep)?;
            let json = serde_json::to_string_pretty(&o.to_json()?)?;
            match out {
                Some(path) => {
                    fs::write(&path, json)?;
                    println!("wrote report to {}", path.display());
                }
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}

/// The build is single-threaded by design; the thread-count variable is
/// validated so scripts that set it fail loudly instead of silently
/// degrading determinism expectations.
fn check_thread_env() -> Result<()> {
    if let Ok(v) = std::env::var("ALMCODEC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow!("ALMCODEC_THREADS=`{v}` is not a positive integer"))?;
        if n != 1 {
            bail!("ALMCODEC_THREADS={n} unsupported: this build is single-threaded (set 1 or unset)");
        }
    }
    Ok(())
}

pub fn cmd_init_config(out: &Path, toy: bool) -> Result<CodecConfig> {
    let cfg = if toy { CodecConfig::toy() } else { CodecConfig::default() };
    save_config(out, &cfg).with_context(|| format!("writing {}", out.display()))?;
    Ok(cfg)
}

pub fn cmd_synth(
    out: &Path,
    clips: usize,
    seconds: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    if clips == 0 {
        bail!("--clips must be positive");
    }
    if !(seconds > 0.0) {
        bail!("--seconds must be positive");
    }
    Ok(synth_corpus(out, clips, seconds, sample_rate, seed)?)
}

pub struct KmeansPriorOpts {
    pub speech_feats: Option<PathBuf>,
    pub sound_feats: Option<PathBuf>,
    pub codebook_size: usize,
    pub layers: usize,
    pub iters: usize,
    pub feature_dim: usize,
    pub feature_count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_kmeans_prior(o: KmeansPriorOpts) -> Result<CodebookSet> {
    let (speech, sound) = match (&o.speech_feats, &o.sound_feats) {
        (Some(sp), Some(sn)) => (read_matrix(sp)?, read_matrix(sn)?),
        (None, None) => synth_prior_features(o.feature_dim, o.feature_count, o.seed),
        _ => bail!("--speech-feats and --sound-feats must be given together"),
    };
    let set = build_prior_codebooks(&speech, &sound, o.codebook_size, o.layers, o.iters, o.seed)?;
    save_codebooks(&o.out, &set)?;
    Ok(set)
}

/// Whitespace-separated text matrix: one feature vector per line; blank
/// lines and `#` comments are skipped.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<f64> = Vec::new();
    let mut width = None;
    let mut n = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut count = 0usize;
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                anyhow!("{}:{}: `{}` is not a number", path.display(), i + 1, tok)
            })?;
            rows.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => bail!(
                "{}:{}: row has {} values, earlier rows have {}",
                path.display(),
                i + 1,
                count,
                w
            ),
            _ => {}
        }
        n += 1;
    }
    let width = width.ok_or_else(|| anyhow!("{}: no feature rows", path.display()))?;
    Ok(Array2::from_shape_vec((n, width), rows).expect("consistent row widths"))
}

#[derive(Debug)]
pub struct TrainSummary {
    pub stage: &'static str,
    pub steps_run: u64,
    pub first: Option<LossReport>,
    pub last: Option<LossReport>,
}

pub fn cmd_train(o: TrainOpts) -> Result<TrainSummary> {
    let mut cfg =
        load_config(&o.config).with_context(|| format!("loading {}", o.config.display()))?;
    if o.resume.is_some()
        && (o.seed.is_some() || o.no_mae || o.no_ar || o.random_priors || o.stage1.is_some())
    {
        bail!("--resume restores the checkpoint's embedded config; it cannot be combined with override flags");
    }
    if let Some(s) = o.seed {
        cfg.training.seed = s;
    }
    if o.no_mae {
        cfg.losses.enable_mae = false;
    }
    if o.no_ar {
        cfg.losses.enable_ar = false;
    }
    if o.random_priors {
        cfg.quantizer.random_priors = true;
    }
    if o.stage == TrainStage::Single {
        cfg.training.single_stage = true;
    }
    cfg.validate()?;

    let corpus = load_corpus(&o.data)?;
    check_corpus_rate(&corpus, cfg.sample_rate)?;

    match o.stage {
        TrainStage::One => {
            if o.priors.is_some() || o.random_priors {
                bail!("priors only apply to stage 2");
            }
            if o.resume.is_some() {
                bail!("stage 1 runs are short-lived and cannot be resumed; rerun from scratch");
            }
            let steps = o.steps.unwrap_or(cfg.training.stage1_steps as u64);
            let mut log = LossLog::open(o.log.as_deref(), &cfg)?;
            let mut t = Stage1Trainer::new(&cfg)?;
            let mut first = None;
            let mut last = None;
            while t.step < steps {
                let r = t.train_step(&corpus)?;
                log.record(&r, steps)?;
                if first.is_none() {
                    first = Some(r.clone());
                }
                last = Some(r);
            }
            t.save_frontend(&o.out)?;
            Ok(TrainSummary { stage: "1", steps_run: t.step, first, last })
        }
        TrainStage::Two | TrainStage::Single => {
            let steps = o.steps.unwrap_or(cfg.training.stage2_steps as u64);
            let mut t = if let Some(resume) = &o.resume {
                Stage2Trainer::load_checkpoint(resume)?
            } else {
                let books = load_books(&cfg, o.priors.as_deref())?;
                let snap = match (o.stage, &o.stage1) {
                    (TrainStage::Two, Some(p)) => Some(checkpoint::load(p)?),
                    (TrainStage::Two, None) => bail!(
                        "--stage 2 needs --stage1 <frontend checkpoint> from a stage-1 run"
                    ),
                    (TrainStage::Single, Some(_)) => {
                        bail!("--stage single trains from scratch; drop --stage1")
                    }
                    _ => None,
                };
                Stage2Trainer::new(&cfg, books, snap.as_ref())?
            };
            // Resumed runs log under the checkpoint's embedded config.
            let mut log = LossLog::open(o.log.as_deref(), &t.cfg)?;
            let mut first = None;
            let mut last = None;
            while t.step < steps {
                let r = t.train_step(&corpus)?;
                log.record(&r, steps)?;
                if first.is_none() {
                    first = Some(r.clone());
                }
                last = Some(r);
            }
            t.save_checkpoint(&o.out)?;
            let stage = if o.stage == TrainStage::Single { "single" } else { "2" };
            Ok(TrainSummary { stage, steps_run: t.step, first, last })
        }
    }
}

fn load_books(cfg: &CodecConfig, priors: Option<&Path>) -> Result<CodebookSet> {
    let q = &cfg.quantizer;
    match priors {
        Some(_) if q.random_priors => {
            bail!("both --priors and random priors requested; pick one")
        }
        Some(p) => Ok(load_codebooks(p)?),
        None if q.random_priors => Ok(CodebookSet::random(
            q.layers,
            q.codebook_size,
            q.dim,
            cfg.training.seed + 4,
        )?),
        None => bail!("stage 2 needs --priors <codebook file> (or --random-priors)"),
    }
}

fn check_corpus_rate(corpus: &[AudioClip], want: u32) -> Result<()> {
    for (i, c) in corpus.iter().enumerate() {
        if c.sample_rate != want {
            bail!(
                "corpus clip {} has sample rate {}, the configuration expects {}",
                i,
                c.sample_rate,
                want
            );
        }
    }
    Ok(())
}

/// JSON-lines sink: one config line, then one line per logged step.
struct LossLog {
    sink: Option<fs::File>,
    every: u64,
}

impl LossLog {
    fn open(path: Option<&Path>, cfg: &CodecConfig) -> Result<Self> {
        let mut log = LossLog {
            sink: match path {
                Some(p) => Some(
                    fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
                ),
                None => None,
            },
            every: cfg.training.log_every.max(1) as u64,
        };
        let line =
            serde_json::to_string(&serde_json::json!({ "event": "config", "config": cfg }))?;
        log.write_line(&line)?;
        Ok(log)
    }

    fn record(&mut self, r: &LossReport, final_step: u64) -> Result<()> {
        let step = r.step as u64;
        if step == 1 || step % self.every == 0 || step == final_step {
            self.write_line(&serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        match &mut self.sink {
            Some(f) => writeln!(f, "{line}")?,
            None => println!("{line}"),
        }
        Ok(())
    }
}

pub struct EncodeSummary {
    pub tq: usize,
    pub layers: usize,
    pub rate: BitrateRow,
}

pub fn cmd_encode(model: &Path, input: &Path, window: usize, out: &Path) -> Result<EncodeSummary> {
    let model = Stage2Trainer::load_model(model)?;
    let cfg = &model.cfg;
    let clip = load_audio(input)?;
    if clip.sample_rate != cfg.sample_rate {
        bail!(
            "{} is sampled at {} Hz, the model expects {}",
            input.display(),
            clip.sample_rate,
            cfg.sample_rate
        );
    }
    let enc = model.encode_clip(&clip.samples, window)?;
    let file = CodeStreamFile {
        sample_rate: cfg.sample_rate,
        patch_size: u16::try_from(cfg.patch_size)
            .context("patch size exceeds the u16 header field")?,
        window: u8::try_from(window).context("window exceeds the u8 header field")?,
        layers: u8::try_from(cfg.quantizer.layers)
            .context("layer count exceeds the u8 header field")?,
        codebook_size: u32::try_from(cfg.quantizer.codebook_size)
            .context("codebook size exceeds the u32 header field")?,
        original_sample_count: enc.original_len as u64,
        codes: enc.codes,
    };
    file.write(out)?;
    Ok(EncodeSummary {
        tq: file.codes.nrows(),
        layers: cfg.quantizer.layers,
        rate: bitrate_row(cfg, window)?,
    })
}

pub fn cmd_decode(model: &Path, input: &Path, out: &Path) -> Result<usize> {
    let model = Stage2Trainer::load_model(model)?;
    let cfg = &model.cfg;
    let f = CodeStreamFile::read(input)?;
    header_field("sample_rate", f.sample_rate as u64, cfg.sample_rate as u64)?;
    header_field("patch_size", f.patch_size as u64, cfg.patch_size as u64)?;
    header_field("layers", f.layers as u64, cfg.quantizer.layers as u64)?;
    header_field(
        "codebook_size",
        f.codebook_size as u64,
        cfg.quantizer.codebook_size as u64,
    )?;
    let w = f.window as usize;
    if !cfg.window_sizes.contains(&w) {
        bail!(
            "header field `window` is {}, the model supports {:?}",
            w,
            cfg.window_sizes
        );
    }
    let wave = model.decode_codes(&f.codes, w, f.original_sample_count as usize)?;
    let n = wave.len();
    save_wav_f32(out, &AudioClip::new(wave, cfg.sample_rate)?)?;
    Ok(n)
}

fn header_field(name: &str, file: u64, model: u64) -> Result<()> {
    if file != model {
        bail!("header field `{name}` is {file}, the model expects {model}");
    }
    Ok(())
}

pub fn cmd_bitrate(config: Option<&Path>, windows: Option<Vec<usize>>) -> Result<Vec<BitrateRow>> {
    let cfg = match config {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => CodecConfig::default(),
    };
    let ws = windows.unwrap_or_else(|| cfg.window_sizes.clone());
    ws.iter().map(|&w| Ok(bitrate_row(&cfg, w)?)).collect()
}

pub struct EvalOutput {
    pub config: CodecConfig,
    pub report: EvalReport,
    pub sweep: Option<Vec<SweepRow>>,
}

impl EvalOutput {
    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "config": self.config,
            "report": self.report,
            "sweep": self.sweep,
        }))
    }
}

pub fn cmd_eval(
    model: &Path,
    data: &Path,
    window: Option<usize>,
    sweep: bool,
) -> Result<EvalOutput> {
    let model = Stage2Trainer::load_model(model)?;
    let cfg = model.cfg.clone();
    let corpus = load_corpus(data)?;
    check_corpus_rate(&corpus, cfg.sample_rate)?;
    let w = match window {
        Some(w) => w,
        None => *cfg
            .window_sizes
            .iter()
            .min()
            .expect("validated configs have window sizes"),
    };
    let clips: Vec<Vec<f64>> = corpus.iter().map(|c| c.samples.clone()).collect();
    let report = evaluate(&model, &clips, w)?;
    let sweep_rows = if sweep {
        let mut groups: Vec<(f64, Vec<Vec<f64>>)> = Vec::new();
        for c in &corpus {
            let secs = (c.duration_seconds() * 1000.0).round() / 1000.0;
            match groups.iter_mut().find(|(s, _)| *s == secs) {
                Some((_, v)) => v.push(c.samples.clone()),
                None => groups.push((secs, vec![c.samples.clone()])),
            }
        }
        groups.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Some(length_sweep(&model, &groups, w)?)
    } else {
        None
    };
    Ok(EvalOutput { config: cfg, report, sweep: sweep_rows })
}
