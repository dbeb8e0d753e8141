//! `csg`: chord codec utilities, synthetic data, training, generation,
//! ablation, and evaluation in one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/runtime error. All file
//! outputs are written atomically, and every run directory receives a
//! manifest describing the command, configuration, seeds, and outputs.

mod manifest;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use csg_core::chord::{
    parse_chord_label, parse_progression, quantize, read_lab_file, transpose, ChordLabel,
    FrameSequence, Mode,
};
use csg_core::fusion::FusionMode;
use csg_core::io::{atomic_write_str, KvMap};
use csg_core::metrics::{extract_chords_from_tokens, sim};
use csg_core::model::{generate, load_checkpoint, save_checkpoint, ModelConfig, Sampler};
use csg_core::train::{
    ablation_summary_tsv, ablation_table_tsv, curve_to_tsv, generate_dataset, run_ablation,
    summarize, train, Dataset, SynthSpec, TrainConfig, EXTRACT_WINDOW,
};
use manifest::Manifest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "csg", version, about = "Chord-conditioned song-token generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chord codec utilities.
    Chord {
        #[command(subcommand)]
        command: ChordCommand,
    },
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a synthetic dataset.
    Train(TrainArgs),
    /// Generate song/vocal tokens from a checkpoint.
    Generate(GenerateArgs),
    /// Train all fusion modes over several seeds and tabulate eval scores.
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum ChordCommand {
    /// Parse a chord label such as C:maj or A:min.
    Parse { label: String },
    /// Expand scale degrees into diatonic triads of a key.
    Progression {
        /// Key root, e.g. C, F#, Bb.
        #[arg(long, default_value = "C")]
        key: String,
        #[arg(long, value_enum, default_value = "major")]
        mode: KeyMode,
        /// Digit string of scale degrees, e.g. 6451.
        digits: String,
    },
    /// Quantize a .lab interval file into a frame sequence.
    Quantize {
        input: PathBuf,
        #[arg(long, default_value_t = 50.0)]
        rate: f64,
        /// Total duration in seconds; defaults to the last interval end.
        #[arg(long)]
        duration: Option<f64>,
        /// Output path; defaults to the input with a .seq extension.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Shift every chord root by a number of semitones.
    Transpose {
        input: PathBuf,
        #[arg(long, short = 'k', allow_hyphen_values = true)]
        semitones: i32,
        /// Output path; prints to stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Key-shift similarity between two frame sequences.
    Sim { predicted: PathBuf, target: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum KeyMode {
    Major,
    Minor,
}

impl From<KeyMode> for Mode {
    fn from(m: KeyMode) -> Mode {
        match m {
            KeyMode::Major => Mode::Major,
            KeyMode::Minor => Mode::Minor,
        }
    }
}

#[derive(Args)]
struct ConfigArg {
    /// Flat key = value config file; absent keys use desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of training chord frames corrupted.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    /// Fusion mode override: dws, concat, xattn, or none.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory from `csg synth`; generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Chord input: a digit progression (6451), a .lab file, or a .seq file.
    #[arg(long)]
    chords: String,
    /// Key root for digit progressions.
    #[arg(long, default_value = "C")]
    key: String,
    #[arg(long, value_enum, default_value = "major")]
    mode: KeyMode,
    /// Frames each progression chord is held.
    #[arg(long, default_value_t = 32)]
    hold: usize,
    /// Total frames for digit progressions; defaults to one pass.
    #[arg(long)]
    frames: Option<usize>,
    /// Frame rate used when quantizing .lab input.
    #[arg(long, default_value_t = 50.0)]
    rate: f64,
    /// Lyric token file (whitespace-separated ids); random when omitted.
    #[arg(long)]
    lyrics: Option<PathBuf>,
    /// Sampler: greedy, top-k:<k>, or temp:<t>.
    #[arg(long, default_value = "greedy")]
    sampler: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    /// Chord-noise rate applied to every run.
    #[arg(long, default_value_t = 0.33)]
    noise: f64,
    /// Number of seeds (0..n).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated fusion modes.
    #[arg(long, default_value = "dws,concat,xattn,none")]
    modes: String,
}

enum CliError {
    Data(String),
}

impl<T: std::fmt::Display> From<T> for CliError {
    fn from(e: T) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) =>
        {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Chord { command } => run_chord(command),
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Generate(args) => run_generate(args),
        Command::Ablate(args) => run_ablate(args),
    }
}

fn parse_key(key: &str) -> Result<u8, CliError> {
    match parse_chord_label(&format!("{key}:maj"))? {
        ChordLabel::Chord(c) => Ok(c.root()),
        ChordLabel::NoChord => Err(CliError::Data(format!("bad key root {key:?}"))),
    }
}

fn run_chord(command: ChordCommand) -> CliResult {
    match command {
        ChordCommand::Parse { label } => {
            let parsed = parse_chord_label(&label)?;
            match parsed {
                ChordLabel::Chord(c) => {
                    println!("label = {c}");
                    println!("token_id = {}", c.token_id());
                    println!("root = {}", c.root());
                    println!("quality = {}", c.quality().name());
                }
                ChordLabel::NoChord => {
                    println!("label = N");
                    println!("token_id = {}", csg_core::chord::NO_CHORD);
                }
            }
        }
        ChordCommand::Progression { key, mode, digits } => {
            let root = parse_key(&key)?;
            let chords = parse_progression(root, mode.into(), &digits)?;
            let names: Vec<String> = chords.iter().map(|c| c.to_string()).collect();
            println!("{}", names.join(" "));
        }
        ChordCommand::Quantize {
            input,
            rate,
            duration,
            out,
        } => {
            let intervals = read_lab_file(&input)?;
            let duration = duration.unwrap_or_else(|| intervals.total_end());
            let seq = quantize(&intervals, rate, duration)?;
            let out = out.unwrap_or_else(|| input.with_extension("seq"));
            atomic_write_str(&out, &seq.to_seq_string())?;
            println!("wrote {} frames to {}", seq.len(), out.display());
        }
        ChordCommand::Transpose {
            input,
            semitones,
            out,
        } => {
            let seq = FrameSequence::read_seq_file(&input)?;
            let shifted = transpose(&seq, semitones);
            match out {
                Some(path) => {
                    atomic_write_str(&path, &shifted.to_seq_string())?;
                    println!("wrote {} frames to {}", shifted.len(), path.display());
                }
                None => print!("{}", shifted.to_seq_string()),
            }
        }
        ChordCommand::Sim { predicted, target } => {
            let p = FrameSequence::read_seq_file(&predicted)?;
            let t = FrameSequence::read_seq_file(&target)?;
            let report = sim(&p, &t)?;
            print!("{}", report.to_kv());
        }
    }
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<KvMap, CliError> {
    match path {
        None => Ok(KvMap::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Ok(KvMap::parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?)
        }
    }
}

fn run_synth(args: SynthArgs) -> CliResult {
    let kv = load_config(&args.config.config)?;
    let mut spec = SynthSpec::from_kv(&kv)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(noise) = args.noise {
        spec.noise_rate = noise;
    }
    let mut manifest = Manifest::start("synth");
    manifest.config("synth", &spec.to_kv());
    manifest.set("seed", spec.seed);

    let (train_ds, eval_ds) = generate_dataset(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    let train_path = args.out.join("train.txt");
    let eval_path = args.out.join("eval.txt");
    train_ds.save(&train_path)?;
    eval_ds.save(&eval_path)?;
    manifest.output(&train_path);
    manifest.output(&eval_path);
    manifest.finish(&args.out)?;
    println!(
        "wrote {} train / {} eval examples to {}",
        train_ds.examples.len(),
        eval_ds.examples.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> CliResult {
    let kv = load_config(&args.config.config)?;
    let mut model_cfg = ModelConfig::from_kv(&kv)?;
    let mut train_cfg = TrainConfig::from_kv(&kv)?;
    let mut spec = SynthSpec::from_kv(&kv)?;
    if let Some(mode) = &args.mode {
        model_cfg.fusion_mode = mode.parse::<FusionMode>().map_err(CliError::Data)?;
    }
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
        spec.seed = seed;
    }

    let (train_ds, eval_ds) = match &args.data {
        Some(dir) => (
            Dataset::load(dir.join("train.txt"))?,
            Dataset::load(dir.join("eval.txt"))?,
        ),
        None => generate_dataset(&spec)?,
    };

    let mut manifest = Manifest::start("train");
    manifest.config("model", &model_cfg.to_kv());
    manifest.config("train", &train_cfg.to_kv());
    manifest.config("synth", &train_ds.spec.to_kv());
    manifest.set("seed", train_cfg.seed);

    let outcome = train::<f32>(&model_cfg, &train_cfg, &train_ds, &eval_ds)?;
    std::fs::create_dir_all(&args.out)?;

    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&outcome.state, &ckpt)?;
    let curve = args.out.join("curve.tsv");
    atomic_write_str(&curve, &curve_to_tsv(&outcome.curve))?;
    let eval_path = args.out.join("eval.txt");
    atomic_write_str(&eval_path, &outcome.final_eval.to_kv().to_string())?;
    manifest.output(&ckpt);
    manifest.output(&curve);
    manifest.output(&eval_path);
    manifest.finish(&args.out)?;
    println!(
        "trained {} steps (mode {}): eval sim {:.4}, final loss {:.4}",
        train_cfg.steps, model_cfg.fusion_mode, outcome.final_eval.mean_sim, outcome.final_eval.final_loss
    );
    Ok(())
}

fn parse_sampler(s: &str) -> Result<Sampler, CliError> {
    if s == "greedy" {
        return Ok(Sampler::Greedy);
    }
    if let Some(k) = s.strip_prefix("top-k:") {
        let k: usize = k
            .parse()
            .map_err(|_| CliError::Data(format!("bad top-k value in {s:?}")))?;
        return Ok(Sampler::TopK(k));
    }
    if let Some(t) = s.strip_prefix("temp:") {
        let t: f64 = t
            .parse()
            .map_err(|_| CliError::Data(format!("bad temperature in {s:?}")))?;
        return Ok(Sampler::Temperature(t));
    }
    Err(CliError::Data(format!(
        "unknown sampler {s:?} (expected greedy, top-k:<k>, or temp:<t>)"
    )))
}

fn resolve_chords(args: &GenerateArgs) -> Result<FrameSequence, CliError> {
    let path = Path::new(&args.chords);
    if path.exists() {
        if path.extension().is_some_and(|e| e == "lab") {
            let intervals = read_lab_file(path)?;
            return Ok(quantize(&intervals, args.rate, intervals.total_end())?);
        }
        return Ok(FrameSequence::read_seq_file(path)?);
    }
    // digit progression, each chord held for a fixed number of frames
    let root = parse_key(&args.key)?;
    let chords = parse_progression(root, args.mode.into(), &args.chords)?;
    let hold = args.hold.max(1);
    let total = args.frames.unwrap_or(chords.len() * hold);
    let mut tokens = Vec::with_capacity(total);
    'fill: loop {
        for c in &chords {
            for _ in 0..hold {
                tokens.push(c.token_id());
                if tokens.len() == total {
                    break 'fill;
                }
            }
        }
    }
    Ok(FrameSequence::new(tokens, args.rate))
}

fn run_generate(args: GenerateArgs) -> CliResult {
    let state = load_checkpoint::<f32>(&args.checkpoint)?;
    let chords = resolve_chords(&args)?;
    let frames = chords.len();
    if frames == 0 {
        return Err(CliError::Data("empty chord sequence".into()));
    }
    let lyrics: Vec<u16> = match &args.lyrics {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let parsed: Result<Vec<u16>, _> =
                text.split_whitespace().map(|t| t.parse::<u16>()).collect();
            parsed.map_err(|e| CliError::Data(format!("{}: bad lyric token: {e}", path.display())))?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            (0..frames)
                .map(|_| rng.random_range(0..state.config.lyric_vocab as u16))
                .collect()
        }
    };
    if lyrics.len() != frames {
        return Err(CliError::Data(format!(
            "lyric stream has {} tokens but the chord sequence has {frames} frames",
            lyrics.len()
        )));
    }
    let sampler = parse_sampler(&args.sampler)?;

    let mut manifest = Manifest::start("generate");
    manifest.set("checkpoint", args.checkpoint.display());
    manifest.set("frames", frames);
    manifest.set("sampler", &args.sampler);
    manifest.set("seed", args.seed);

    let (vocal, song) = generate(&state, &chords.tokens, &lyrics, sampler, args.seed)?;

    // score the generation against the requested chords
    let rule = csg_core::train::EmissionRule {
        lyric_vocab: state.config.lyric_vocab as u16,
        vocal_vocab: state.config.vocal_vocab as u16,
        song_vocab: state.config.song_vocab as u16,
        ..csg_core::train::EmissionRule::default()
    };
    let extracted = extract_chords_from_tokens(&song, &rule, EXTRACT_WINDOW, chords.frame_rate_hz);
    let report = sim(&extracted, &chords)?;

    std::fs::create_dir_all(&args.out)?;
    let join_tokens =
        |ts: &[u16]| ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("\n") + "\n";
    let vocal_path = args.out.join("vocal.txt");
    let song_path = args.out.join("song.txt");
    let chords_path = args.out.join("chords.seq");
    let extracted_path = args.out.join("extracted_chords.seq");
    let report_path = args.out.join("sim_report.txt");
    atomic_write_str(&vocal_path, &join_tokens(&vocal))?;
    atomic_write_str(&song_path, &join_tokens(&song))?;
    atomic_write_str(&chords_path, &chords.to_seq_string())?;
    atomic_write_str(&extracted_path, &extracted.to_seq_string())?;
    atomic_write_str(&report_path, &report.to_kv().to_string())?;
    for p in [&vocal_path, &song_path, &chords_path, &extracted_path, &report_path] {
        manifest.output(p);
    }
    manifest.finish(&args.out)?;
    println!("generated {frames} frames: sim {:.4} (best shift {})", report.sim, report.best_shift);
    Ok(())
}

fn run_ablate(args: AblateArgs) -> CliResult {
    let kv = load_config(&args.config.config)?;
    let model_cfg = ModelConfig::from_kv(&kv)?;
    let train_cfg = TrainConfig::from_kv(&kv)?;
    let mut spec = SynthSpec::from_kv(&kv)?;
    spec.noise_rate = args.noise;

    let modes: Vec<FusionMode> = args
        .modes
        .split(',')
        .map(|m| m.trim().parse::<FusionMode>())
        .collect::<Result<_, _>>()
        .map_err(CliError::Data)?;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let threads = std::env::var("CSG_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });

    let mut manifest = Manifest::start("ablate");
    manifest.config("model", &model_cfg.to_kv());
    manifest.config("train", &train_cfg.to_kv());
    manifest.config("synth", &spec.to_kv());
    manifest.set("modes", &args.modes);
    manifest.set("seeds", args.seeds);
    manifest.set("threads", threads);

    let outcome = run_ablation::<f32>(&model_cfg, &train_cfg, &spec, &modes, &seeds, threads)?;

    std::fs::create_dir_all(&args.out)?;
    let table = args.out.join("ablation.tsv");
    atomic_write_str(&table, &ablation_table_tsv(&outcome.rows))?;
    manifest.output(&table);
    let summary_path = args.out.join("summary.tsv");
    let summaries = summarize(&outcome.rows);
    atomic_write_str(&summary_path, &ablation_summary_tsv(&summaries))?;
    manifest.output(&summary_path);
    for (mode, seed, curve) in &outcome.curves {
        let path = args.out.join(format!("curve_{mode}_{seed}.tsv"));
        atomic_write_str(&path, &curve_to_tsv(curve))?;
        manifest.output(&path);
    }
    manifest.finish(&args.out)?;

    for s in &summaries {
        println!(
            "{}: sim {:.4} +/- {:.4}, loss {:.4}",
            s.mode, s.mean_sim, s.std_sim, s.mean_loss
        );
    }
    Ok(())
}
