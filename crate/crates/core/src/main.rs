use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparse_lstm::bench::{bench_backward, BenchConfig};
use sparse_lstm::config::{Artifacts, RunManifest, RunOptions, PRESETS};
use sparse_lstm::data::{batch_iterate, TokenMode};
use sparse_lstm::gradcheck::{check_instance, GradCheckDims, GradCheckInstance, DEFAULT_STEP, DEFAULT_THRESHOLD};
use sparse_lstm::sparsify::{parse_matrix_text, sparsify_report};
use sparse_lstm::tensor::{set_tile_shape, tile_shape, Matrix, Precision, Scalar, TileShape};
use sparse_lstm::train::{evaluate_perplexity, read_header, train, Checkpoint};
use sparse_lstm::{Error, Result};

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

/// Structurally sparse LSTM training and benchmarking.
///
/// Exit codes: 0 success, 1 runtime error (I/O, bad files), 2 usage or
/// configuration error, 3 training diverged, 4 a check failed.
#[derive(Parser)]
#[command(name = "sparse-lstm", version)]
struct Cli {
    /// Worker threads for GEMM (default: all cores).
    #[arg(long, global = true, env = "SPARSE_LSTM_THREADS")]
    threads: Option<usize>,
    /// GEMM micro-kernel tile, ROWSxCOLS (4x4, 8x4, 4x8, 8x8, 16x4).
    #[arg(long, global = true)]
    tile: Option<TileShape>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a language model; writes manifest, metrics and checkpoint.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on its validation split or a text file.
    Eval(EvalArgs),
    /// Finite-difference check of the backward pass in f64.
    GradCheck(GradCheckArgs),
    /// Time the LSTM backward pass with and without a sparsifier.
    BenchBackward(BenchArgs),
    /// Sparsify one gate-gradient matrix and print the pattern and norms.
    SparsifyDump(DumpArgs),
}

#[derive(Args, Default)]
struct SparsifierArgs {
    /// identity, coarse, fine or column-topk.
    #[arg(long)]
    sparsifier: Option<String>,
    /// Coarse slice width P.
    #[arg(long)]
    slice_width: Option<usize>,
    /// Coarse region size R (slices).
    #[arg(long)]
    region: Option<usize>,
    /// Coarse slices removed per region S.
    #[arg(long)]
    removed: Option<usize>,
    /// Embed coarse offsets in the mantissa and decode them again.
    #[arg(long)]
    embed_index: bool,
    /// Fine tile rows My.
    #[arg(long)]
    tile_rows: Option<usize>,
    /// Fine tile columns Mx.
    #[arg(long)]
    tile_cols: Option<usize>,
    /// Fine tiles kept per slice K.
    #[arg(long)]
    keep: Option<usize>,
    /// Columns kept by unified top-k.
    #[arg(long)]
    topk: Option<usize>,
    /// Target sparsity for fine/top-k when --keep/--topk is not given.
    #[arg(long)]
    sparsity: Option<f64>,
}

impl SparsifierArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            sparsifier: self.sparsifier.clone(),
            slice_width: self.slice_width,
            region: self.region,
            removed: self.removed,
            embed_index: self.embed_index.then_some(true),
            tile_rows: self.tile_rows,
            tile_cols: self.tile_cols,
            keep: self.keep,
            topk: self.topk,
            sparsity: self.sparsity,
            ..RunOptions::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Flat TOML file with run options.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replay the options recorded in a run manifest.
    #[arg(long, conflicts_with = "config")]
    from_manifest: Option<PathBuf>,
    /// Named preset (see --list-presets).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    list_presets: bool,
    /// Output directory for manifest.json, metrics.jsonl, checkpoint.bin
    /// and vocab.txt.
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    unroll: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_start_epoch: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Fraction of steps run sparse before the dense phase.
    #[arg(long)]
    sparse_fraction: Option<f64>,
    /// Text corpus (default: the bundled one).
    #[arg(long)]
    corpus: Option<String>,
    /// word or char.
    #[arg(long)]
    token_mode: Option<TokenMode>,
    #[arg(long)]
    max_vocab: Option<usize>,
    #[arg(long)]
    valid_fraction: Option<f64>,
    /// Log validation perplexity every N steps (0: only at the end).
    #[arg(long)]
    eval_every: Option<u64>,
    /// Record wall_ms per step (metrics then differ between runs).
    #[arg(long)]
    wall_time: bool,
    #[command(flatten)]
    sparsifier: SparsifierArgs,
}

impl TrainArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            preset: self.preset.clone(),
            steps: self.steps,
            seed: self.seed,
            hidden: self.hidden,
            embedding_dim: self.embedding_dim,
            layers: self.layers,
            unroll: self.unroll,
            batch: self.batch,
            precision: self.precision,
            init_scale: self.init_scale,
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_start_epoch: self.decay_start_epoch,
            clip_norm: self.clip_norm,
            sparse_fraction: self.sparse_fraction,
            corpus: self.corpus.clone(),
            token_mode: self.token_mode,
            max_vocab: self.max_vocab,
            valid_fraction: self.valid_fraction,
            eval_every: self.eval_every,
            wall_time: self.wall_time.then_some(true),
            ..RunOptions::default()
        }
        .overlay(self.sparsifier.options())
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate this text file instead of the validation split.
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    input: usize,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of random instances (seeds seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    instances: u64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Zero all weights and inputs.
    #[arg(long)]
    zero_weights: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    #[arg(long, default_value_t = 512)]
    input: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    sparsifier: SparsifierArgs,
}

#[derive(Args)]
struct DumpArgs {
    /// Text matrix (one row per line); random when absent.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Layer input x (N x D, text) for the weight-gradient correlation.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Rows N of the random matrix.
    #[arg(long, default_value_t = 16)]
    rows: usize,
    /// Columns 4H of the random matrix.
    #[arg(long, default_value_t = 64)]
    cols: usize,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    sparsifier: SparsifierArgs,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) | Error::Geometry(_) | Error::Capacity { .. } => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Parameter("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    }
    if let Some(t) = cli.tile {
        set_tile_shape(t)?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::BenchBackward(a) => cmd_bench(a),
        Command::SparsifyDump(a) => cmd_dump(a),
    }
}

fn cmd_train(args: TrainArgs) -> Result<u8> {
    if args.list_presets {
        for (name, desc) in PRESETS {
            println!("{name:<22} {desc}");
        }
        return Ok(0);
    }
    let file = match (&args.config, &args.from_manifest) {
        (Some(p), _) => RunOptions::from_toml(&read_text(p)?)?,
        (None, Some(p)) => {
            let m: RunManifest = serde_json::from_str(&read_text(p)?)?;
            m.options
        }
        (None, None) => RunOptions::default(),
    };
    let options = RunOptions::layered(file, args.options())?;
    let data = options.data_config()?;
    let corpus = data.load()?;
    let config = options.resolve(corpus.vocab.len())?;

    std::fs::create_dir_all(&args.out_dir)?;
    let path = |name: &str| args.out_dir.join(name);
    let artifacts = Artifacts {
        manifest: path("manifest.json").display().to_string(),
        metrics: path("metrics.jsonl").display().to_string(),
        checkpoint: path("checkpoint.bin").display().to_string(),
        vocab: path("vocab.txt").display().to_string(),
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        options,
        config: config.clone(),
        corpus: data.corpus_name().to_string(),
        vocab_size: corpus.vocab.len(),
        threads: rayon::current_num_threads(),
        tile: tile_shape(),
        artifacts: artifacts.clone(),
    };
    std::fs::write(&artifacts.manifest, serde_json::to_string_pretty(&manifest)? + "\n")?;
    std::fs::write(&artifacts.vocab, corpus.vocab.dump())?;

    let mut metrics = BufWriter::new(File::create(&artifacts.metrics)?);
    let summary = match config.model.precision {
        Precision::F32 => train_and_save::<f32>(&config, &corpus, &mut metrics, &artifacts.checkpoint)?,
        Precision::F64 => train_and_save::<f64>(&config, &corpus, &mut metrics, &artifacts.checkpoint)?,
    };
    print!("{summary}");
    println!("artifacts in {}", args.out_dir.display());
    Ok(0)
}

fn train_and_save<T: Scalar>(
    config: &sparse_lstm::train::TrainConfig,
    corpus: &sparse_lstm::data::Corpus,
    metrics: &mut dyn Write,
    checkpoint: &str,
) -> Result<String> {
    let out = train::<T>(config, &corpus.train, Some(&corpus.valid), metrics)?;
    out.checkpoint.save(Path::new(checkpoint))?;
    let mut s = format!(
        "steps {} | final train loss {:.4} (ppl {:.3}) | valid ppl {:.3}\n",
        config.schedule.total_steps(),
        out.final_loss,
        out.final_loss.exp(),
        out.valid_ppl.unwrap_or(f64::NAN)
    );
    for (i, (phase, macs)) in config.schedule.phases.iter().zip(&out.phase_macs).enumerate() {
        s.push_str(&format!(
            "phase {i}: {} x {} steps, backward MACs {}/{} ({:.3})\n",
            phase.sparsifier.kind(),
            phase.steps,
            macs.executed_macs,
            macs.dense_macs,
            macs.ratio()
        ));
    }
    Ok(s)
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::Parameter(format!("{}: {e}", p.display())))
}

fn cmd_eval(args: EvalArgs) -> Result<u8> {
    let bytes = std::fs::read(&args.checkpoint)?;
    let (header, _) = read_header(&bytes)?;
    let corpus = header.config.data.load()?;
    let ids = match &args.text {
        Some(p) => corpus.vocab.encode(&read_text(p)?),
        None => corpus.valid.clone(),
    };
    let (n, t) = (header.config.model.batch, header.config.model.unroll);
    let stream = batch_iterate(&ids, n, t)?;
    let ppl = match header.precision {
        Precision::F32 => evaluate_perplexity(&Checkpoint::<f32>::from_bytes(&bytes)?.model, stream)?,
        Precision::F64 => evaluate_perplexity(&Checkpoint::<f64>::from_bytes(&bytes)?.model, stream)?,
    };
    if args.json {
        println!("{}", serde_json::json!({ "step": header.step, "ppl": ppl }));
    } else {
        println!("checkpoint at step {}: perplexity {ppl:.4}", header.step);
    }
    Ok(0)
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<u8> {
    let dims = GradCheckDims {
        batch: args.batch,
        hidden: args.hidden,
        input: args.input,
        steps: args.steps,
        layers: args.layers,
    };
    if [dims.batch, dims.hidden, dims.input, dims.steps, dims.layers, args.instances as usize].contains(&0) {
        return Err(Error::Parameter("gradient check dimensions and instance count must be positive".into()));
    }
    let mut worst = 0.0f64;
    for i in 0..args.instances {
        let mut inst = GradCheckInstance::random(dims, args.seed + i);
        if args.zero_weights {
            inst = inst.zeroed();
        }
        let report = check_instance(&inst, DEFAULT_STEP)?;
        if args.json {
            println!("{}", serde_json::json!({ "seed": args.seed + i, "report": report }));
        } else {
            println!("instance seed {}:", args.seed + i);
            for t in &report.tensors {
                println!("  {:<10} {:>5} entries  max rel err {:.3e}", t.name, t.entries, t.max_rel_err);
            }
        }
        worst = worst.max(report.max_rel_err);
    }
    let pass = worst <= args.threshold;
    if !args.json {
        println!("max rel err {worst:.3e} (threshold {:.1e}): {}", args.threshold, if pass { "PASS" } else { "FAIL" });
    }
    Ok(if pass { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_bench(args: BenchArgs) -> Result<u8> {
    let cfg = BenchConfig {
        batch: args.batch,
        hidden: args.hidden,
        input: args.input,
        steps: args.steps,
        warmup: args.warmup,
        repeats: args.repeats,
        seed: args.seed,
    };
    let defaults = RunOptions {
        sparsifier: Some("coarse".into()),
        ..RunOptions::default()
    };
    let sparsifier = defaults
        .overlay(args.sparsifier.options())
        .sparsifier_config(cfg.batch, cfg.hidden)?;
    let report = bench_backward(&cfg, sparsifier)?;
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", report.summary());
    }
    Ok(0)
}

fn cmd_dump(args: DumpArgs) -> Result<u8> {
    let dnet = match &args.matrix {
        Some(p) => parse_matrix_text(&read_text(p)?)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            Matrix::from_fn(args.rows, args.cols, |_, _| rng.gen_range(-1.0..1.0))
        }
    };
    let x = args.reference.as_deref().map(|p| read_text(p).and_then(|t| parse_matrix_text(&t))).transpose()?;
    if dnet.cols() % 4 != 0 {
        return Err(Error::Geometry(format!("gate gradient width {} is not a multiple of 4", dnet.cols())));
    }
    let defaults = RunOptions {
        sparsifier: Some("coarse".into()),
        ..RunOptions::default()
    };
    let sparsifier = defaults
        .overlay(args.sparsifier.options())
        .sparsifier_config(dnet.rows(), dnet.cols() / 4)?;
    let report = sparsify_report(&dnet, &sparsifier, x.as_ref())?;
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", report.summary());
    }
    Ok(0)
}
