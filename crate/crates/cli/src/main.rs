//! `rnnt` command-line front end. Log verbosity follows `RUST_LOG`
//! (default `info`).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use rnnt::biasing::{compile_context, parse_phrases, ContextFst, ShallowFusion, SubwordInventory};
use rnnt::decoder::{decode_utterance, DecodeParams, FusionHook, NoFusion, StreamingDecoder};
use rnnt::model::ModelConfig;
use rnnt::quant::{float_engine, quantize_model, EngineModel, Scheme};
use rnnt::runtime::{measure_rt, Mode, PipelineConfig};
use rnnt::tooling::container;
use rnnt::tooling::data::{
    labels_transcript, read_dataset, read_features, read_manifest, write_dataset, ToyTask, ToyTaskSpec,
};
use rnnt::tooling::recipe::{evaluate, toy_model_config, toy_train_config, NameScenario};
use rnnt::tooling::train::{init_model, train, Optimizer, TrainConfig};
use rnnt::tooling::wer::{wer, WerStats};

// Stdout writes that fail instead of panicking, so a closed pipe ends the
// command quietly.
macro_rules! out {
    ($($t:tt)*) => { std::io::Write::write_fmt(&mut std::io::stdout().lock(), format_args!($($t)*))? };
}
macro_rules! outln {
    ($($t:tt)*) => {{ out!($($t)*); out!("\n") }};
}

#[derive(Parser)]
#[command(name = "rnnt", version, about = "Streaming RNN-T recognizer: toy data, training, decoding, quantization and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic toy dataset (manifest plus feature files).
    GenData(GenDataArgs),
    /// Train a model on a manifest and write a float container.
    Train(TrainArgs),
    /// Batch-decode every utterance of a manifest and print N-best lists.
    Decode(DecodeArgs),
    /// Decode one feature file frame by frame, printing partial results.
    Stream(StreamArgs),
    /// Quantize a float container to 8-bit weights.
    Quantize(QuantizeArgs),
    /// Compile a phrase list into a biasing automaton and print its arc list.
    CompileBias(CompileBiasArgs),
    /// Score WER, either decoding a manifest or comparing two manifests.
    Eval(EvalArgs),
    /// Measure per-utterance real-time factors and RT50/RT90.
    BenchRtf(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory; receives `<name>.tsv` and `<name>/*.f32`.
    #[arg(long)]
    out: PathBuf,
    /// Dataset name (manifest file stem).
    #[arg(long, default_value = "data")]
    name: String,
    /// Number of utterances.
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Task seed: fixes the per-unit embeddings. Use the same seed for the
    /// train and test sets of one task.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampling stream; use different values for disjoint splits.
    #[arg(long, default_value_t = 0)]
    split: u64,
    /// Number of output units.
    #[arg(long, default_value_t = 8)]
    vocab_size: usize,
    /// Feature width.
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Minimum labels per utterance.
    #[arg(long, default_value_t = 1)]
    min_labels: usize,
    /// Maximum labels per utterance.
    #[arg(long, default_value_t = 6)]
    max_labels: usize,
    /// Minimum frames per label.
    #[arg(long, default_value_t = 3)]
    min_frames: usize,
    /// Maximum frames per label.
    #[arg(long, default_value_t = 6)]
    max_frames: usize,
    /// Instead of a plain set, write a biasing scenario with this many names:
    /// `<name>_names.tsv`, `<name>_plain.tsv`, `<name>.phrases` and
    /// `<name>.inventory`.
    #[arg(long)]
    names: Option<usize>,
    /// Labels per name.
    #[arg(long, default_value_t = 4)]
    name_len: usize,
    /// Noise standard deviation of name segments.
    #[arg(long, default_value_t = 1.0)]
    name_noise: f64,
    /// Sampling stream of the names themselves.
    #[arg(long, default_value_t = 100)]
    name_stream: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output container.
    #[arg(long)]
    out: PathBuf,
    /// Model configuration as JSON; defaults to the toy architecture sized
    /// from the data and `--vocab-size`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output units of the default configuration.
    #[arg(long, default_value_t = 8)]
    vocab_size: usize,
    /// Parameter updates.
    #[arg(long, default_value_t = toy_train_config().steps)]
    steps: usize,
    /// Learning rate.
    #[arg(long, default_value_t = toy_train_config().learning_rate)]
    lr: f64,
    /// Utterances per batch.
    #[arg(long, default_value_t = toy_train_config().batch_size)]
    batch: usize,
    /// Optimizer.
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Momentum of the SGD optimizer.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Seed of the initialization and the batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gradient worker threads; results do not depend on this value.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Steps between progress log lines.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Also write the per-step training loss, one value per line.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args)]
struct SearchArgs {
    /// Beam width.
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Labels a hypothesis may emit per encoder frame.
    #[arg(long, default_value_t = 3)]
    max_expansions: usize,
    /// Prediction-state cache entries; 0 disables the cache.
    #[arg(long, default_value_t = 4096)]
    cache: usize,
    /// Hypotheses to print; 0 prints the whole beam.
    #[arg(long, default_value_t = 0)]
    nbest: usize,
    /// Biasing phrases, one per line.
    #[arg(long, requires = "inventory")]
    phrases: Option<PathBuf>,
    /// Speller inventory, `word<TAB>unit unit ...` per line.
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// Fusion weight of the biasing score.
    #[arg(long, default_value_t = 3.0)]
    lambda: f64,
    /// Per-unit boost of the biasing automaton.
    #[arg(long, default_value_t = 1.0)]
    boost: f64,
}

impl SearchArgs {
    fn params(&self) -> DecodeParams {
        DecodeParams {
            beam_width: self.beam,
            max_expansions_per_frame: self.max_expansions,
            cache_capacity: self.cache,
            nbest: self.nbest,
        }
    }

    fn fusion(&self, model: &EngineModel) -> Result<Box<dyn FusionHook>> {
        let Some(phrases) = &self.phrases else { return Ok(Box::new(NoFusion)) };
        let fst = compile_files(phrases, self.inventory.as_deref().context("--phrases needs --inventory")?, self.boost, Some(model))?;
        Ok(Box::new(ShallowFusion::new(Arc::new(fst), self.lambda)?))
    }
}

#[derive(Args)]
struct DecodeArgs {
    /// Model container.
    #[arg(long)]
    model: PathBuf,
    /// Manifest of utterances to decode.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct StreamArgs {
    /// Model container.
    #[arg(long)]
    model: PathBuf,
    /// Feature file to stream.
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Float model container.
    #[arg(long)]
    model: PathBuf,
    /// Output container.
    #[arg(long)]
    out: PathBuf,
    /// Quantization scheme.
    #[arg(long, value_parser = parse_scheme, default_value = "sym")]
    scheme: Scheme,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    s.parse().map_err(|e: rnnt::error::Error| e.to_string())
}

#[derive(Args)]
struct CompileBiasArgs {
    /// Phrase file, one phrase per line.
    #[arg(long)]
    phrases: PathBuf,
    /// Speller inventory, `word<TAB>unit unit ...` per line.
    #[arg(long)]
    inventory: PathBuf,
    /// Model container whose vocabulary names the units; without it units are
    /// numeric IDs.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Per-unit boost.
    #[arg(long, default_value_t = 1.0)]
    boost: f64,
    /// Write the arc list here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference manifest.
    #[arg(long)]
    reference: PathBuf,
    /// Hypothesis manifest (same IDs) to score against the reference.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    hyp: Option<PathBuf>,
    /// Model container to decode the reference utterances with.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Model container.
    #[arg(long)]
    model: PathBuf,
    /// Manifest of utterances to time.
    #[arg(long)]
    manifest: PathBuf,
    /// Time only the first N utterances.
    #[arg(long)]
    limit: Option<usize>,
    /// Execution mode.
    #[arg(long, value_enum, default_value_t = ModeArg::Sequential)]
    mode: ModeArg,
    /// Capacity of each inter-stage queue (pipelined mode).
    #[arg(long, default_value_t = 8)]
    queue: usize,
    /// Write the report here as well as to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    Pipelined,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Decode(a) => decode(a),
        Command::Stream(a) => stream(a),
        Command::Quantize(a) => quantize(a),
        Command::CompileBias(a) => compile_bias(a),
        Command::Eval(a) => eval(a),
        Command::BenchRtf(a) => bench(a),
    };
    if let Err(e) = res {
        let closed = |c: &(dyn std::error::Error + 'static)| {
            c.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
        };
        if e.chain().any(closed) {
            return;
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load(path: &Path) -> Result<EngineModel> {
    container::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = ToyTaskSpec {
        vocab_size: a.vocab_size,
        feature_dim: a.feature_dim,
        min_labels: a.min_labels,
        max_labels: a.max_labels,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        noise: a.noise,
        seed: a.seed,
        ..ToyTaskSpec::default()
    };
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let task = ToyTask::new(spec)?;
    let vocab = task.vocabulary();
    fs::create_dir_all(&a.out)?;
    let Some(names) = a.names else {
        let utts = task.generate(a.count, a.split, &format!("{}-", a.name))?;
        let path = write_dataset(&a.out, &a.name, &utts, &vocab)?;
        outln!("{}", path.display());
        return Ok(());
    };
    if names == 0 || a.name_len == 0 {
        bail!("--names and --name-len must be at least 1");
    }
    let scenario = NameScenario::random(&task, names, a.name_len, a.name_noise, a.name_stream);
    let (with, without) = scenario.generate(&task, a.count, a.split)?;
    let mut inventory = String::new();
    let mut phrases = String::new();
    for (i, n) in scenario.names.iter().enumerate() {
        writeln!(inventory, "name{i}\t{}", labels_transcript(n, &vocab))?;
        writeln!(phrases, "name{i}")?;
    }
    fs::write(a.out.join(format!("{}.inventory", a.name)), inventory)?;
    fs::write(a.out.join(format!("{}.phrases", a.name)), phrases)?;
    outln!("{}", write_dataset(&a.out, &format!("{}_names", a.name), &with, &vocab)?.display());
    outln!("{}", write_dataset(&a.out, &format!("{}_plain", a.name), &without, &vocab)?.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config: ModelConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => {
            let first = read_manifest(&a.data)?.into_iter().next().context("training manifest is empty")?;
            let dim = read_features(&first.path)?.dim();
            toy_model_config(&ToyTaskSpec { vocab_size: a.vocab_size, feature_dim: dim, ..ToyTaskSpec::default() })
        }
    };
    config.validate()?;
    let data = read_dataset(&a.data, &config.vocabulary)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        steps: a.steps,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd { momentum: a.momentum },
            OptimizerArg::Adam => Optimizer::adam(),
        },
        grad_clip: a.clip,
        seed: a.seed,
        threads: a.threads,
        log_every: a.log_every,
    };
    let mut model = init_model(config, a.seed)?;
    info!("training {} parameters on {} utterances", model.num_params(), data.len());
    let report = train(&mut model, &data, &cfg, &mut |_, _| {})?;
    if let Some(p) = &a.loss_log {
        let text: String = report.losses.iter().map(|l| format!("{l}\n")).collect();
        fs::write(p, text)?;
    }
    container::save(&a.out, &float_engine(&model.cast::<f32>()))?;
    outln!("final loss {:.6} (mean of last 10 steps {:.6})", report.losses.last().unwrap_or(&f64::NAN), report.tail_loss(10));
    for d in &report.diagnostics {
        outln!("diagnostic: {d}");
    }
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let model = load(&a.model)?;
    let fusion = a.search.fusion(&model)?;
    let params = a.search.params();
    for e in read_manifest(&a.manifest)? {
        let nbest = decode_utterance(&model, &read_features(&e.path)?, &params, fusion.as_ref())
            .with_context(|| format!("decoding {}", e.id))?;
        out!("# {}\n{}", e.id, nbest.to_text());
    }
    Ok(())
}

fn stream(a: StreamArgs) -> Result<()> {
    let model = load(&a.model)?;
    let fusion = a.search.fusion(&model)?;
    let features = read_features(&a.features)?;
    let mut dec = StreamingDecoder::new(&model, a.search.params(), fusion.as_ref())?;
    let mut last: Option<Vec<u32>> = None;
    for t in 0..features.len() {
        if let Some(p) = dec.push_frame(features.frame(t))? {
            if last.as_ref() != Some(&p) {
                outln!("partial\t{}\t{}", t + 1, model.detokenize(&p));
                last = Some(p);
            }
        }
    }
    out!("{}", dec.finish()?.to_text());
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let model = container::load_float(&a.model).with_context(|| format!("loading float model {}", a.model.display()))?;
    container::save(&a.out, &quantize_model(&model, a.scheme)?)?;
    let float = container::payload_sizes(&container::read_header(&fs::read(&a.model)?)?.0);
    let quant = container::payload_sizes(&container::read_header(&fs::read(&a.out)?)?.0);
    outln!(
        "weight payload {} -> {} bytes ({:.2}%), container payload {} -> {} bytes",
        float.0,
        quant.0,
        100.0 * quant.0 as f64 / float.0 as f64,
        float.1,
        quant.1
    );
    Ok(())
}

fn compile_files(phrases: &Path, inventory: &Path, boost: f64, model: Option<&EngineModel>) -> Result<ContextFst> {
    let text = fs::read_to_string(inventory).with_context(|| format!("reading {}", inventory.display()))?;
    let inv = match model {
        Some(m) => SubwordInventory::parse(&text, |u| m.unit_id(u))?,
        None => SubwordInventory::parse(&text, |u| u.parse().ok())?,
    };
    let phrases = parse_phrases(&fs::read_to_string(phrases).with_context(|| format!("reading {}", phrases.display()))?);
    let fst = compile_context(&phrases, &inv, boost)?;
    for p in fst.skipped() {
        log::warn!("skipping phrase with unknown words: {p}");
    }
    Ok(fst)
}

fn compile_bias(a: CompileBiasArgs) -> Result<()> {
    let model = a.model.as_deref().map(load).transpose()?;
    let fst = compile_files(&a.phrases, &a.inventory, a.boost, model.as_ref())?;
    match &a.out {
        Some(p) => fs::write(p, fst.dump())?,
        None => out!("{}", fst.dump()),
    }
    info!("{} states, {} arcs", fst.num_states(), fst.num_arcs());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let refs = read_manifest(&a.reference)?;
    let mut stats = WerStats::default();
    let mut exact = 0;
    if let Some(hyp) = &a.hyp {
        let hyps: HashMap<String, String> = read_manifest(hyp)?.into_iter().map(|e| (e.id, e.transcript)).collect();
        for r in &refs {
            let h = hyps.get(&r.id).with_context(|| format!("hypothesis manifest lacks `{}`", r.id))?;
            let (rw, hw): (Vec<&str>, Vec<&str>) = (r.transcript.split_whitespace().collect(), h.split_whitespace().collect());
            stats.add(&wer(&rw, &hw));
            exact += usize::from(rw == hw);
        }
    } else {
        let model = load(a.model.as_deref().context("--model or --hyp is required")?)?;
        let fusion = a.search.fusion(&model)?;
        let utts = read_dataset(&a.reference, &model.config().vocabulary)?;
        let res = evaluate(&model, &utts, &a.search.params(), fusion.as_ref())?;
        stats = res.stats;
        exact = res.exact;
    }
    outln!(
        "WER {:.2}% (S={} I={} D={} N={}) exact {}/{}",
        stats.wer(),
        stats.substitutions,
        stats.insertions,
        stats.deletions,
        stats.ref_len,
        exact,
        refs.len()
    );
    if stats.empty_ref {
        outln!("note: empty references present; their insertions are scored with denominator 1");
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = load(&a.model)?;
    let fusion = a.search.fusion(&model)?;
    let mut entries = read_manifest(&a.manifest)?;
    if let Some(n) = a.limit {
        entries.truncate(n);
    }
    let utts = entries.into_iter().map(|e| Ok((e.id, read_features(&e.path)?))).collect::<Result<Vec<_>>>()?;
    let config = PipelineConfig {
        mode: match a.mode {
            ModeArg::Sequential => Mode::Sequential,
            ModeArg::Pipelined => Mode::Pipelined,
        },
        queue_capacity: [a.queue; 2],
        ..PipelineConfig::default()
    };
    let (_, report) = measure_rt(&model, &utts, &a.search.params(), fusion.as_ref(), &config)?;
    let text = report.to_text();
    out!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn every_flag_has_help() {
        let cli = Cli::command();
        cli.clone().debug_assert();
        for sub in cli.get_subcommands() {
            assert!(sub.get_about().is_some(), "{} lacks a description", sub.get_name());
            for arg in sub.get_arguments() {
                assert!(arg.get_help().is_some(), "{} --{} lacks help", sub.get_name(), arg.get_id());
            }
        }
    }
}
