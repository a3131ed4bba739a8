//! Command-line front end for the head-relevance toolkit.
//!
//! Every subcommand is a thin shell over the library: flags are parsed
//! and validated here, files are read and written here, and everything
//! numeric happens in `hrv`. Exit codes follow one contract across the
//! binary:
//!
//! * `0` — success,
//! * `2` — bad flags or a bad flag combination (including malformed
//!   values for `--plant`, `--ks`, and `HRV_THREADS`),
//! * `3` — broken input data: unreadable files, malformed relevance /
//!   trace / raw-count files, unknown concepts or heads,
//! * `4` — a map transform hook broke its contract mid-generation.
//!
//! Commands that generate require `--seed`; every random draw they make
//! is derived from it, and output headers echo the seeds so any file can
//! be reproduced from its own comments.

use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hrv::{apply_token_rescale, order_curve};
use hrv::{
    area_between, build_online, cosine_matrix, default_ks, head_order, random_order,
    read_raw_tensor, read_trace, rebuild_from_traces, rescaling_vector, scale_stats_from_traces,
    timestep_vectors, weakening_curve, write_raw_tensor, write_trace, AttentionAdapter, CaMap,
    ConceptVocabulary, Direction, GenerationRun, HeadId, HrvError, HrvMatrix, KeyBank,
    PlantAssignment, PlantSpec, ToyConfig, ToyEngine, TraceFile, WeakenPlan,
};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_thread_pool().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build(cmd) => run_build(cmd),
        Command::Order(cmd) => run_order(cmd),
        Command::Weaken(cmd) => run_weaken(cmd),
        Command::Area(cmd) => run_area(cmd),
        Command::Steer(cmd) => run_steer(cmd),
        Command::Edit(cmd) => run_edit(cmd),
        Command::Stats(cmd) => run_stats(cmd),
        Command::Timesteps(cmd) => run_timesteps(cmd),
        Command::Info(cmd) => run_info(cmd),
    }
}

/// A bad flag value or combination — distinct from broken input data so
/// the two get different exit codes.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(message.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<HrvError>() {
        Some(inner) if inner.is_hook_error() => 4,
        _ => 3,
    }
}

/// `HRV_THREADS` caps the rayon worker pool; unset means rayon's default.
fn init_thread_pool() -> Result<()> {
    let Ok(value) = std::env::var("HRV_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.parse().map_err(|_| {
        usage(format!(
            "HRV_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    if threads == 0 {
        return Err(usage("HRV_THREADS must be a positive integer, got 0"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("initializing the worker pool")
}

#[derive(Parser)]
#[command(
    name = "hrv",
    version,
    about = "Head-relevance toolkit: build per-concept head-importance vectors \
             over a deterministic toy diffusion engine, then order, weaken, \
             steer, and edit with them."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a head-relevance matrix from fresh generations or recorded traces
    Build(BuildCmd),
    /// Print a concept's head ordering (most or least relevant first)
    Order(OrderCmd),
    /// Sweep concept energy while weakening the top-k heads of an ordering
    Weaken(WeakenCmd),
    /// Compare the informed weakening gap against random-order baselines
    Area(AreaCmd),
    /// Generate with per-head attention rescaling toward a concept
    Steer(SteerCmd),
    /// Re-generate a source prompt under a target prompt's edit
    Edit(EditCmd),
    /// Audit per-head attention logit scales from recorded traces
    Stats(StatsCmd),
    /// Summarize a raw per-timestep count dump: means and cosine tables
    Timesteps(TimestepsCmd),
    /// Describe a relevance file: dimensions, masses, provenance
    Info(InfoCmd),
}

// ---------------------------------------------------------------------------
// shared flag groups

#[derive(Args)]
struct EngineArgs {
    /// Generation engine. Only "toy" ships.
    #[arg(long, default_value = "toy")]
    engine: String,

    /// Engine geometry file: one key=value per line (feature_dim,
    /// token_slots, spatial_side, layers, heads_per_layer, timesteps,
    /// step_size, master_seed). Missing keys keep their defaults.
    #[arg(long, value_name = "FILE")]
    engine_config: Option<PathBuf>,

    /// Concept vocabulary TSV (concept<TAB>word1,word2,…); multi-token
    /// words carry a "#k" sub-token suffix. Built-in table when omitted.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,

    /// Master seed for every random draw this command makes. Overrides
    /// any master_seed in --engine-config.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,

    /// Plant a concept into one head's key projection, repeatable:
    /// L<layer>.H<head>=<concept>[@gain], e.g. --plant L0.H2=Sky@10.
    #[arg(long, value_name = "L0.H2=NAME[@GAIN]")]
    plant: Vec<String>,
}

impl EngineArgs {
    fn engine_and_seed(&self) -> Result<(ToyEngine, u64)> {
        if self.engine != "toy" {
            return Err(usage(format!(
                "--engine {:?} is not available; only \"toy\" ships",
                self.engine
            )));
        }
        let seed = self
            .seed
            .ok_or_else(|| usage("generation requires --seed"))?;
        let mut config = match &self.engine_config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading engine config {}", path.display()))?;
                ToyConfig::from_kv_str(&text)
                    .map_err(|e| usage(format!("--engine-config {}: {e}", path.display())))?
            }
            None => ToyConfig::default(),
        };
        config.master_seed = seed;
        let vocab = load_vocab(self.vocab.as_deref())?;
        let mut engine =
            ToyEngine::new(config, vocab).map_err(|e| usage(format!("--engine-config: {e}")))?;
        if !self.plant.is_empty() {
            let assignments = self
                .plant
                .iter()
                .map(|s| parse_plant(s))
                .collect::<Result<Vec<_>>>()?;
            engine.plant(&PlantSpec { assignments })?;
        }
        Ok((engine, seed))
    }
}

fn load_vocab(path: Option<&Path>) -> Result<ConceptVocabulary> {
    match path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading vocabulary {}", path.display()))?;
            ConceptVocabulary::from_tsv_str(&text)
                .with_context(|| format!("parsing vocabulary {}", path.display()))
        }
        None => Ok(ConceptVocabulary::builtin()),
    }
}

/// `L<layer>.H<head>=<concept>[@gain]`, gain defaulting to the engine's
/// conventional strong plant.
fn parse_plant(raw: &str) -> Result<PlantAssignment> {
    let bad = |detail: String| usage(format!("--plant {raw:?}: {detail}"));
    let (head, rest) = raw
        .split_once('=')
        .ok_or_else(|| bad("expected L<layer>.H<head>=<concept>[@gain]".into()))?;
    let head: HeadId = head.parse().map_err(bad)?;
    let (concept, gain) = match rest.rsplit_once('@') {
        Some((concept, gain)) => {
            let gain: f64 = gain
                .parse()
                .map_err(|_| bad(format!("gain {gain:?} is not a number")))?;
            (concept, gain)
        }
        None => (rest, PlantSpec::DEFAULT_GAIN),
    };
    if concept.is_empty() {
        return Err(bad("concept name is empty".into()));
    }
    Ok(PlantAssignment {
        head,
        concept: concept.to_string(),
        gain,
    })
}

#[derive(Args)]
struct PromptArgs {
    /// Prompt file: one prompt per line, `#` comments skipped. A line
    /// splits on commas when it has any, else on whitespace.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["prompt_count", "prompt_seed"])]
    prompts: Option<PathBuf>,

    /// Sample this many prompts from the engine's vocabulary instead of
    /// reading a file.
    #[arg(long, value_name = "N")]
    prompt_count: Option<usize>,

    /// Seed for prompt sampling; defaults to --seed.
    #[arg(long, value_name = "SEED")]
    prompt_seed: Option<u64>,
}

impl PromptArgs {
    /// `concept`: sampled prompts are guaranteed to mention it (used by
    /// the weakening sweeps, which score that concept's energy).
    fn resolve(
        &self,
        engine: &ToyEngine,
        seed: u64,
        concept: Option<&str>,
    ) -> Result<Vec<Vec<String>>> {
        if let Some(path) = &self.prompts {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading prompt file {}", path.display()))?;
            let prompts: Vec<Vec<String>> = text
                .lines()
                .map(str::trim)
                .filter(|line| !line.is_empty() && !line.starts_with('#'))
                .map(parse_prompt)
                .collect();
            if prompts.is_empty() {
                return Err(anyhow!("prompt file {} holds no prompts", path.display()));
            }
            return Ok(prompts);
        }
        let count = self
            .prompt_count
            .ok_or_else(|| usage("pass --prompts FILE or --prompt-count N"))?;
        if count == 0 {
            return Err(usage("--prompt-count must be at least 1"));
        }
        let prompt_seed = self.prompt_seed.unwrap_or(seed);
        match concept {
            Some(concept) => Ok(engine.concept_prompts(concept, count, prompt_seed)?),
            None => Ok(engine.sample_prompts(count, prompt_seed)),
        }
    }

    /// Header note recording where the prompts came from.
    fn note(&self, seed: u64) -> String {
        match &self.prompts {
            Some(path) => format!("prompts-file={}", path.display()),
            None => format!(
                "prompt-count={} prompt-seed={}",
                self.prompt_count.unwrap_or(0),
                self.prompt_seed.unwrap_or(seed)
            ),
        }
    }
}

/// Words split on commas when the text has any (so multi-token words like
/// "oak tree" survive), else on whitespace.
fn parse_prompt(text: &str) -> Vec<String> {
    if text.contains(',') {
        text.split(',')
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect()
    } else {
        text.split_whitespace().map(str::to_string).collect()
    }
}

fn parse_direction(raw: &str) -> std::result::Result<Direction, String> {
    raw.parse()
}

fn read_hrv(path: &Path) -> Result<HrvMatrix> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading relevance file {}", path.display()))?;
    HrvMatrix::from_hrv1_str(&text)
        .with_context(|| format!("parsing relevance file {}", path.display()))
}

/// Relevance rows must be as wide as the engine before per-head values
/// can be zipped onto its heads.
fn check_head_width(matrix: &HrvMatrix, engine: &ToyEngine, hrv_path: &Path) -> Result<()> {
    if matrix.head_count() != engine.head_count() {
        return Err(anyhow!(
            "{} holds {}-head rows but the engine has {} heads",
            hrv_path.display(),
            matrix.head_count(),
            engine.head_count()
        ));
    }
    Ok(())
}

fn provenance(seed: u64, engine: &str, vocab: &ConceptVocabulary) -> String {
    format!(
        "seed={} engine={} vocab-fingerprint={:016x}",
        seed,
        engine,
        vocab.fingerprint()
    )
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn semantic_masks(engine: &ToyEngine, prompts: &[Vec<String>]) -> Result<Vec<Vec<bool>>> {
    prompts
        .iter()
        .map(|prompt| {
            let encoded = engine
                .encode_text(prompt)
                .with_context(|| format!("encoding prompt {:?}", prompt.join(" ")))?;
            Ok(encoded.semantic)
        })
        .collect()
}

fn parse_ks(raw: Option<&str>, head_count: usize) -> Result<Vec<usize>> {
    let Some(raw) = raw else {
        return Ok(default_ks(head_count));
    };
    let ks: Vec<usize> = raw
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("--ks: {:?} is not a head count", part.trim())))
        })
        .collect::<Result<_>>()?;
    if ks.is_empty() {
        return Err(usage("--ks needs at least one entry"));
    }
    if ks[0] != 0 {
        return Err(usage("--ks must start at 0, the unweakened column"));
    }
    if !ks.windows(2).all(|w| w[0] < w[1]) {
        return Err(usage("--ks must be strictly increasing"));
    }
    if *ks.last().unwrap() > head_count {
        return Err(usage(format!(
            "--ks goes up to {}, but the engine has only {} heads",
            ks.last().unwrap(),
            head_count
        )));
    }
    Ok(ks)
}

/// One latent grid as TSV rows: `label <TAB> row <TAB> v0 v1 …`.
fn push_latent_grid(out: &mut String, label: &str, run: &GenerationRun) {
    for (row, values) in run.final_latent().rows().into_iter().enumerate() {
        out.push_str(&format!("{label}\t{row}\t{}\n", join_values(values.iter())));
    }
}

// ---------------------------------------------------------------------------
// build

#[derive(Args)]
struct BuildCmd {
    #[command(flatten)]
    engine: EngineArgs,

    #[command(flatten)]
    prompts: PromptArgs,

    /// Rebuild from a directory of recorded trace files (*.atrace,
    /// replayed in filename order) instead of generating.
    #[arg(
        long,
        value_name = "DIR",
        conflicts_with_all = [
            "engine", "engine_config", "vocab", "seed", "plant",
            "prompts", "prompt_count", "prompt_seed", "emit_traces",
        ]
    )]
    trace: Option<PathBuf>,

    /// Record one replayable trace file per generation into this
    /// directory (created if missing).
    #[arg(long, value_name = "DIR")]
    emit_traces: Option<PathBuf>,

    /// Also dump the raw per-timestep count tensor to FILE.
    #[arg(long, value_name = "FILE")]
    per_timestep: Option<PathBuf>,

    /// Output relevance file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn run_build(cmd: BuildCmd) -> Result<()> {
    let result = match &cmd.trace {
        Some(dir) => {
            let traces = read_trace_dir(dir)?;
            rebuild_from_traces(&traces)?
        }
        None => {
            let (engine, seed) = cmd.engine.engine_and_seed()?;
            let prompts = cmd.prompts.resolve(&engine, seed, None)?;
            let bank = KeyBank::build(engine.vocab(), &engine)?;
            match &cmd.emit_traces {
                Some(dir) => {
                    fs::create_dir_all(dir)
                        .with_context(|| format!("creating trace directory {}", dir.display()))?;
                    let bank_ref = &bank;
                    let dir = dir.clone();
                    let mut on_run = move |index: usize,
                                           run: &GenerationRun,
                                           sampler_seed: u64|
                          -> hrv::Result<()> {
                        let text = write_trace(run, bank_ref, sampler_seed)?;
                        let path = dir.join(format!("trace-{index:03}.atrace"));
                        fs::write(&path, text).map_err(|e| {
                            HrvError::Precondition(format!("writing trace {}: {e}", path.display()))
                        })
                    };
                    build_online(&engine, &bank, &prompts, seed, Some(&mut on_run))?
                }
                None => build_online(&engine, &bank, &prompts, seed, None)?,
            }
        }
    };
    let provenance = result.provenance();
    fs::write(&cmd.out, result.matrix.to_hrv1(Some(&provenance)))
        .with_context(|| format!("writing {}", cmd.out.display()))?;
    if let Some(path) = &cmd.per_timestep {
        let dump = write_raw_tensor(&result.raw, result.matrix.names(), Some(&provenance))?;
        fs::write(path, dump).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn read_trace_dir(dir: &Path) -> Result<Vec<TraceFile>> {
    let entries =
        fs::read_dir(dir).with_context(|| format!("reading trace directory {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|path| path.extension().is_some_and(|ext| ext == "atrace"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(anyhow!("no .atrace files in {}", dir.display()));
    }
    paths
        .iter()
        .map(|path| {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading trace {}", path.display()))?;
            read_trace(&text).with_context(|| format!("parsing trace {}", path.display()))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// order

#[derive(Args)]
struct OrderCmd {
    /// Relevance file to read.
    #[arg(long, value_name = "FILE")]
    hrv: PathBuf,

    /// Concept whose head ordering to print.
    #[arg(long, value_name = "NAME")]
    concept: String,

    /// morhf (most relevant heads first) or lerhf (least relevant first).
    #[arg(long, value_parser = parse_direction, value_name = "morhf|lerhf")]
    direction: Direction,

    /// Output file; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn run_order(cmd: OrderCmd) -> Result<()> {
    let matrix = read_hrv(&cmd.hrv)?;
    let concept = matrix.require(&cmd.concept)?;
    let order = head_order(&matrix, concept, cmd.direction)?;
    let mut text = format!(
        "# hrv={} concept={} direction={}\n",
        cmd.hrv.display(),
        cmd.concept,
        cmd.direction
    );
    text.push_str("position\thead\n");
    for (position, head) in order.iter().enumerate() {
        text.push_str(&format!("{position}\t{head}\n"));
    }
    write_output(cmd.out.as_deref(), &text)
}

// ---------------------------------------------------------------------------
// weaken

#[derive(Args)]
struct WeakenCmd {
    #[command(flatten)]
    engine: EngineArgs,

    #[command(flatten)]
    prompts: PromptArgs,

    /// Relevance file supplying the head ordering.
    #[arg(long, value_name = "FILE")]
    hrv: PathBuf,

    /// Concept to weaken and score.
    #[arg(long, value_name = "NAME")]
    concept: String,

    /// morhf (most relevant heads first) or lerhf (least relevant first).
    #[arg(long, value_parser = parse_direction, value_name = "morhf|lerhf")]
    direction: Direction,

    /// Comma-separated weakened-head counts, starting at 0 and strictly
    /// increasing. Default: up to 13 even steps across all heads.
    #[arg(long, value_name = "K0,K1,…")]
    ks: Option<String>,

    /// Scale applied to a weakened head's semantic attention columns.
    #[arg(long, default_value_t = WeakenPlan::DEFAULT_FACTOR, allow_hyphen_values = true)]
    factor: f64,

    /// Output file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn run_weaken(cmd: WeakenCmd) -> Result<()> {
    let (engine, seed) = cmd.engine.engine_and_seed()?;
    let matrix = read_hrv(&cmd.hrv)?;
    check_head_width(&matrix, &engine, &cmd.hrv)?;
    let prompts = cmd.prompts.resolve(&engine, seed, Some(&cmd.concept))?;
    let masks = semantic_masks(&engine, &prompts)?;
    let ks = parse_ks(cmd.ks.as_deref(), engine.head_count())?;
    let curve = weakening_curve(
        &engine,
        &prompts,
        &masks,
        seed,
        &matrix,
        &cmd.concept,
        cmd.direction,
        cmd.factor,
        &ks,
        |_, run| engine.score_planted(run, &cmd.concept),
    )?;
    let mut text = format!(
        "# {}\n",
        provenance(seed, &cmd.engine.engine, engine.vocab())
    );
    text.push_str(&format!(
        "# concept={} direction={} factor={} {}\n",
        curve.concept,
        curve.direction,
        cmd.factor,
        cmd.prompts.note(seed)
    ));
    text.push_str("k\tscore\n");
    for (k, score) in curve.ks.iter().zip(&curve.scores) {
        text.push_str(&format!("{k}\t{score}\n"));
    }
    fs::write(&cmd.out, text).with_context(|| format!("writing {}", cmd.out.display()))
}

// ---------------------------------------------------------------------------
// area

#[derive(Args)]
struct AreaCmd {
    #[command(flatten)]
    engine: EngineArgs,

    #[command(flatten)]
    prompts: PromptArgs,

    /// Relevance file supplying the informed ordering.
    #[arg(long, value_name = "FILE")]
    hrv: PathBuf,

    /// Concept to sweep.
    #[arg(long, value_name = "NAME")]
    concept: String,

    /// Comma-separated weakened-head counts, starting at 0 and strictly
    /// increasing. Default: up to 13 even steps across all heads.
    #[arg(long, value_name = "K0,K1,…")]
    ks: Option<String>,

    /// Scale applied to a weakened head's semantic attention columns.
    #[arg(long, default_value_t = WeakenPlan::DEFAULT_FACTOR, allow_hyphen_values = true)]
    factor: f64,

    /// How many seeded random baseline orderings to sweep.
    #[arg(long, default_value_t = 3, value_name = "N")]
    random_orders: u64,

    /// Output file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn run_area(cmd: AreaCmd) -> Result<()> {
    let (engine, seed) = cmd.engine.engine_and_seed()?;
    let matrix = read_hrv(&cmd.hrv)?;
    check_head_width(&matrix, &engine, &cmd.hrv)?;
    let prompts = cmd.prompts.resolve(&engine, seed, Some(&cmd.concept))?;
    let masks = semantic_masks(&engine, &prompts)?;
    let head_count = engine.head_count();
    let ks = parse_ks(cmd.ks.as_deref(), head_count)?;

    let informed_sweep = |direction: Direction| {
        weakening_curve(
            &engine,
            &prompts,
            &masks,
            seed,
            &matrix,
            &cmd.concept,
            direction,
            cmd.factor,
            &ks,
            |_, run| engine.score_planted(run, &cmd.concept),
        )
    };
    let baseline_sweep = |order: &[usize], label: &str| {
        order_curve(
            &engine,
            &prompts,
            &masks,
            seed,
            order,
            &cmd.concept,
            label,
            cmd.factor,
            &ks,
            |_, run| engine.score_planted(run, &cmd.concept),
        )
    };

    // The informed gap: weakening irrelevant heads first (lerhf) should
    // hold concept energy high while weakening relevant heads first
    // (morhf) collapses it, so their area is positive when the ordering
    // carries signal. Each random baseline plays one seeded permutation
    // against its own reverse — same construction, no information.
    let lerhf = informed_sweep(Direction::Lerhf)?;
    let morhf = informed_sweep(Direction::Morhf)?;
    let mut rows = vec![("hrv".to_string(), area_between(&lerhf, &morhf, head_count)?)];
    for order_seed in 1..=cmd.random_orders {
        let perm = random_order(head_count, seed, order_seed);
        let reversed: Vec<usize> = perm.iter().rev().copied().collect();
        let upper = baseline_sweep(&reversed, &format!("random-{order_seed}-reversed"))?;
        let lower = baseline_sweep(&perm, &format!("random-{order_seed}"))?;
        rows.push((
            format!("random-{order_seed}"),
            area_between(&upper, &lower, head_count)?,
        ));
    }

    let mut text = format!(
        "# {}\n",
        provenance(seed, &cmd.engine.engine, engine.vocab())
    );
    text.push_str(&format!(
        "# concept={} factor={} {} — informed area is lerhf minus morhf; \
         each random baseline is a seeded permutation against its reverse\n",
        cmd.concept,
        cmd.factor,
        cmd.prompts.note(seed)
    ));
    text.push_str("ordering\tarea\n");
    for (label, area) in rows {
        text.push_str(&format!("{label}\t{area}\n"));
    }
    fs::write(&cmd.out, text).with_context(|| format!("writing {}", cmd.out.display()))
}

// ---------------------------------------------------------------------------
// steer

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SteerMode {
    /// Scale the edited token's attention by the desired concept's
    /// relevance row.
    Strengthen,
    /// Trade the undesired concept's relevance for the desired one's.
    Adjust,
}

#[derive(Args)]
struct SteerCmd {
    #[command(flatten)]
    engine: EngineArgs,

    /// Relevance file supplying per-head rescaling weights.
    #[arg(long, value_name = "FILE")]
    hrv: PathBuf,

    #[arg(long, value_enum)]
    mode: SteerMode,

    /// Concept to push toward.
    #[arg(long, value_name = "NAME")]
    desired: String,

    /// Concept to push away from (adjust mode only).
    #[arg(long, value_name = "NAME")]
    undesired: Option<String>,

    /// Prompt word whose attention columns get rescaled.
    #[arg(long, value_name = "WORD")]
    token: String,

    /// Prompt text; splits on commas when present, else whitespace.
    #[arg(long, value_name = "TEXT")]
    prompt: String,

    /// Output file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn run_steer(cmd: SteerCmd) -> Result<()> {
    match (cmd.mode, &cmd.undesired) {
        (SteerMode::Adjust, None) => {
            return Err(usage("--mode adjust requires --undesired"));
        }
        (SteerMode::Strengthen, Some(_)) => {
            return Err(usage("--undesired only applies with --mode adjust"));
        }
        _ => {}
    }
    let (engine, seed) = cmd.engine.engine_and_seed()?;
    let matrix = read_hrv(&cmd.hrv)?;
    check_head_width(&matrix, &engine, &cmd.hrv)?;
    let rescale = rescaling_vector(&matrix, &cmd.desired, cmd.undesired.as_deref())?;
    let words = parse_prompt(&cmd.prompt);
    let span = engine
        .span_of(&words, &cmd.token)
        .map_err(|e| usage(format!("--token: {e}")))?;

    let baseline = engine.generate_with_hooks(&words, seed, None, false)?;

    // The hook contract forbids returning an error, so a rescale failure
    // parks here and surfaces after the run.
    let failure: RefCell<Option<HrvError>> = RefCell::new(None);
    let heads = engine.enumerate_heads();
    let mut hook = |id: HeadId, _t: usize, map: &CaMap| -> CaMap {
        let rescaled = heads
            .iter()
            .position(|desc| desc.id == id)
            .ok_or(HrvError::UnknownHead(id))
            .and_then(|flat| {
                apply_token_rescale(map, std::slice::from_ref(&span), rescale.get(flat))
            });
        match rescaled {
            Ok(map) => map,
            Err(err) => {
                failure.borrow_mut().get_or_insert(err);
                map.clone()
            }
        }
    };
    let steered = engine.generate_with_hooks(&words, seed, Some(&mut hook), false)?;
    if let Some(err) = failure.into_inner() {
        return Err(err.into());
    }

    let mode = match cmd.mode {
        SteerMode::Strengthen => "strengthen",
        SteerMode::Adjust => "adjust",
    };
    let mut text = format!(
        "# {}\n",
        provenance(seed, &cmd.engine.engine, engine.vocab())
    );
    text.push_str(&format!(
        "# mode={} desired={} undesired={} token={} prompt={:?}\n",
        mode,
        cmd.desired,
        cmd.undesired.as_deref().unwrap_or("-"),
        cmd.token,
        words.join(" ")
    ));
    text.push_str(&format!(
        "# desired-energy baseline={} steered={}\n",
        engine.score_planted(&baseline, &cmd.desired)?,
        engine.score_planted(&steered, &cmd.desired)?
    ));
    if let Some(undesired) = &cmd.undesired {
        text.push_str(&format!(
            "# undesired-energy baseline={} steered={}\n",
            engine.score_planted(&baseline, undesired)?,
            engine.score_planted(&steered, undesired)?
        ));
    }
    text.push_str("latent\trow\tvalues\n");
    push_latent_grid(&mut text, "baseline", &baseline);
    push_latent_grid(&mut text, "steered", &steered);
    fs::write(&cmd.out, text).with_context(|| format!("writing {}", cmd.out.display()))
}

// ---------------------------------------------------------------------------
// edit

#[derive(Args)]
struct EditCmd {
    #[command(flatten)]
    engine: EngineArgs,

    /// Relevance file supplying per-head rescaling weights.
    #[arg(long, value_name = "FILE")]
    hrv: PathBuf,

    /// Concept to push toward on the edited token.
    #[arg(long, value_name = "NAME")]
    desired: String,

    /// Concept to push away from (optional trade-off).
    #[arg(long, value_name = "NAME")]
    undesired: Option<String>,

    /// Prompt whose structure to keep.
    #[arg(long, value_name = "TEXT")]
    source_prompt: String,

    /// Prompt carrying the edit.
    #[arg(long, value_name = "TEXT")]
    target_prompt: String,

    /// Word in the target prompt that carries the edit.
    #[arg(long, value_name = "WORD")]
    edited_token: String,

    /// Fraction of timesteps whose attention maps are replaced by the
    /// source run's maps (outside the edited token's columns).
    #[arg(long, default_value_t = 0.6)]
    tau_c: f64,

    /// Fraction of timesteps whose queries come from the source run's
    /// latent, keeping the target on the source's spatial structure.
    #[arg(long, default_value_t = 0.9)]
    sa_rate: f64,

    /// Output file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn run_edit(cmd: EditCmd) -> Result<()> {
    for (value, flag) in [(cmd.tau_c, "--tau-c"), (cmd.sa_rate, "--sa-rate")] {
        if !(0.0..=1.0).contains(&value) || !value.is_finite() {
            return Err(usage(format!("{flag} must lie in [0, 1], got {value}")));
        }
    }
    let (engine, seed) = cmd.engine.engine_and_seed()?;
    let matrix = read_hrv(&cmd.hrv)?;
    check_head_width(&matrix, &engine, &cmd.hrv)?;
    let rescale = rescaling_vector(&matrix, &cmd.desired, cmd.undesired.as_deref())?;
    let source_words = parse_prompt(&cmd.source_prompt);
    let target_words = parse_prompt(&cmd.target_prompt);
    let span = engine
        .span_of(&target_words, &cmd.edited_token)
        .map_err(|e| usage(format!("--edited-token: {e}")))?;

    let timesteps = engine.config().timesteps;
    let tau_c = (cmd.tau_c * timesteps as f64).round() as usize;
    let run = engine.run_edit(
        &source_words,
        &target_words,
        &span,
        &rescale,
        tau_c,
        cmd.sa_rate,
        seed,
    )?;

    let mut text = format!(
        "# {}\n",
        provenance(seed, &cmd.engine.engine, engine.vocab())
    );
    text.push_str(&format!(
        "# source={:?} target={:?} edited-token={} desired={} undesired={} \
         tau-c={} (timestep {}/{}) sa-rate={}\n",
        source_words.join(" "),
        target_words.join(" "),
        cmd.edited_token,
        cmd.desired,
        cmd.undesired.as_deref().unwrap_or("-"),
        cmd.tau_c,
        tau_c,
        timesteps,
        cmd.sa_rate
    ));
    text.push_str(&format!(
        "# desired-energy source={} target={} edited={}\n",
        engine.score_planted(&run.source, &cmd.desired)?,
        engine.score_planted(&run.target, &cmd.desired)?,
        engine.score_planted(&run.edited, &cmd.desired)?
    ));
    text.push_str("latent\trow\tvalues\n");
    push_latent_grid(&mut text, "source", &run.source);
    push_latent_grid(&mut text, "target", &run.target);
    push_latent_grid(&mut text, "edited", &run.edited);
    fs::write(&cmd.out, text).with_context(|| format!("writing {}", cmd.out.display()))
}

// ---------------------------------------------------------------------------
// stats

#[derive(Args)]
struct StatsCmd {
    /// Directory of recorded trace files to audit.
    #[arg(long, value_name = "DIR")]
    trace: PathBuf,

    /// Output file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn run_stats(cmd: StatsCmd) -> Result<()> {
    let traces = read_trace_dir(&cmd.trace)?;
    let stats = scale_stats_from_traces(&traces)?;
    let mut text = format!(
        "# engine={} traces={} vocab-fingerprint={:016x}\n",
        traces[0].engine,
        traces.len(),
        traces[0].vocab().fingerprint()
    );
    text.push_str("head\tmean\tstd\n");
    for (head, scale) in stats.iter().enumerate() {
        text.push_str(&format!("{head}\t{}\t{}\n", scale.mean, scale.std));
    }
    fs::write(&cmd.out, text).with_context(|| format!("writing {}", cmd.out.display()))
}

// ---------------------------------------------------------------------------
// timesteps

#[derive(Args)]
struct TimestepsCmd {
    /// Raw per-timestep count dump, as written by build --per-timestep.
    #[arg(long, value_name = "FILE")]
    raw: PathBuf,

    /// Output file; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn run_timesteps(cmd: TimestepsCmd) -> Result<()> {
    let text = fs::read_to_string(&cmd.raw)
        .with_context(|| format!("reading raw count file {}", cmd.raw.display()))?;
    let (raw, names) = read_raw_tensor(&text)
        .with_context(|| format!("parsing raw count file {}", cmd.raw.display()))?;
    let vectors = timestep_vectors(&raw);
    let concept_cos = cosine_matrix(&vectors.concept_means)?;
    let timestep_cos = cosine_matrix(&vectors.timestep_means)?;

    let mut out = format!(
        "# source={} concepts={} timesteps={} heads={} sweeps={}\n",
        cmd.raw.display(),
        raw.concepts(),
        raw.timesteps(),
        raw.heads(),
        raw.sweeps()
    );
    if !concept_cos.zero_rows.is_empty() {
        let named: Vec<&str> = concept_cos
            .zero_rows
            .iter()
            .map(|&i| names[i].as_str())
            .collect();
        out.push_str(&format!(
            "# concepts with no counts (cosine rows left zero): {}\n",
            named.join(", ")
        ));
    }
    if !timestep_cos.zero_rows.is_empty() {
        let listed: Vec<String> = timestep_cos
            .zero_rows
            .iter()
            .map(usize::to_string)
            .collect();
        out.push_str(&format!(
            "# timesteps with no counts (cosine rows left zero): {}\n",
            listed.join(", ")
        ));
    }
    out.push_str("table\trow\tvalues\n");
    for (i, row) in vectors.concept_means.rows().into_iter().enumerate() {
        out.push_str(&format!(
            "concept-mean\t{}\t{}\n",
            names[i],
            join_values(row.iter())
        ));
    }
    for (t, row) in vectors.timestep_means.rows().into_iter().enumerate() {
        out.push_str(&format!(
            "timestep-mean\t{t}\t{}\n",
            join_values(row.iter())
        ));
    }
    for (i, row) in concept_cos.values.rows().into_iter().enumerate() {
        out.push_str(&format!(
            "concept-cosine\t{}\t{}\n",
            names[i],
            join_values(row.iter())
        ));
    }
    for (t, row) in timestep_cos.values.rows().into_iter().enumerate() {
        out.push_str(&format!(
            "timestep-cosine\t{t}\t{}\n",
            join_values(row.iter())
        ));
    }
    write_output(cmd.out.as_deref(), &out)
}

fn join_values<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// info

#[derive(Args)]
struct InfoCmd {
    /// Relevance file to describe.
    #[arg(long, value_name = "FILE")]
    hrv: PathBuf,
}

fn run_info(cmd: InfoCmd) -> Result<()> {
    let text = fs::read_to_string(&cmd.hrv)
        .with_context(|| format!("reading relevance file {}", cmd.hrv.display()))?;
    let matrix = HrvMatrix::from_hrv1_str(&text)
        .with_context(|| format!("parsing relevance file {}", cmd.hrv.display()))?;
    println!("relevance file: {}", cmd.hrv.display());
    println!(
        "concepts: {}  heads: {}",
        matrix.concept_count(),
        matrix.head_count()
    );
    for line in text.lines().filter(|line| line.starts_with("# ")) {
        println!("provenance: {}", &line[2..]);
    }
    println!();
    println!("mass\tconcept");
    let mut zero = Vec::new();
    for (index, name) in matrix.names().iter().enumerate() {
        let mass: f64 = matrix.values().row(index).iter().map(|v| v.abs()).sum();
        if mass == 0.0 {
            zero.push(name.as_str());
        }
        println!("{mass:.6}\t{name}");
    }
    if !zero.is_empty() {
        println!();
        println!(
            "rows with no mass (concept never won a draw): {}",
            zero.join(", ")
        );
    }
    Ok(())
}
