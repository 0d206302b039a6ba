use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use davalid::analysis::{analyze, write_report_dir, AnalysisOptions, TaskResults, DEFAULT_WEIGHT_EXPONENT};
use davalid::datapack::{read_pack, write_pack, BundleSource, Pack, Setting};
use davalid::scoring::{score_pack, ScoreTable};
use davalid::selection::{
    baseline_value, oracle_table, read_selections, select_all, write_selections, BatchWeighting, SelectOptions,
};
use davalid::synth::{gen_pack, FeatureMode, QualityProfile, SynthConfig};
use davalid::validators::{default_specs, parse_specs, DefaultProfile, ValidatorSpec};
use davalid::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_INAPPLICABLE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "davalid",
    version,
    about = "Score, select and compare checkpoints with unsupervised validators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark pack.
    Synth(SynthArgs),
    /// Score every checkpoint of a pack under a validator set.
    Score(ScoreArgs),
    /// Pick a checkpoint per algorithm and validator.
    Select(SelectArgs),
    /// Build report tables from one or more scored and selected tasks.
    Analyze(AnalyzeArgs),
    /// Summarise a pack.
    Inspect(InspectArgs),
    /// Load every tensor of a pack and check all format invariants.
    ValidatePack(PackArg),
}

#[derive(Args)]
struct SeedArg {
    /// Root seed; falls back to DAVALID_SEED, then 0.
    #[arg(long, env = "DAVALID_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthSetting {
    Uda,
    Sfda,
    Tta,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Mixed,
    Monotone,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Samples per domain.
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 4.0)]
    shift: f64,
    /// Target covariance scale.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 3)]
    algorithms: usize,
    #[arg(long, default_value_t = 10)]
    hparams: usize,
    /// Checkpoints per hyperparameter draw (update steps for TTA).
    #[arg(long, default_value_t = 20)]
    checkpoints: usize,
    #[arg(long, default_value_t = 0.0)]
    collapse_rate: f64,
    #[arg(long, value_enum, default_value = "mixed")]
    profile: Profile,
    /// Give every checkpoint this quality in [0, 1]; overrides --profile.
    #[arg(long)]
    quality: Option<f64>,
    /// Record a fixed random projection of the inputs as features.
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    logit_scale: f64,
    #[arg(long, value_enum, default_value = "uda")]
    setting: SynthSetting,
    /// Shorthand for --setting tta.
    #[arg(long)]
    tta: bool,
    /// Target-test rows per batch (TTA only).
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value = "source")]
    source_name: String,
    #[arg(long, default_value = "target")]
    target_name: String,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    pack: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON list of validator specs.
    #[arg(long, conflicts_with = "defaults")]
    validators: Option<PathBuf>,
    /// Default validator set to use instead of the pack setting's own.
    #[arg(long)]
    defaults: Option<DefaultProfile>,
    #[command(flatten)]
    seed: SeedArg,
    /// Worker threads; never changes the output.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    pack: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Add the source-only records to every algorithm's pool.
    #[arg(long)]
    include_source_only: bool,
    /// Select per batch (TTA packs).
    #[arg(long)]
    episodic: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Pack of each task; pair with --scores and --selections in order.
    #[arg(long, required = true)]
    pack: Vec<PathBuf>,
    #[arg(long, required = true)]
    scores: Vec<PathBuf>,
    #[arg(long, required = true)]
    selections: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WEIGHT_EXPONENT)]
    weight_exponent: f64,
    /// Also correlate over all tasks' checkpoints pooled together.
    #[arg(long)]
    pooled: bool,
    /// Weight episodic batches by their row counts.
    #[arg(long)]
    weighted_batches: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    pack: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PackArg {
    #[arg(long)]
    pack: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Inapplicable { .. } => EXIT_INAPPLICABLE,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_FORMAT,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let setting = match (a.tta, a.setting) {
        (true, _) | (_, SynthSetting::Tta) => Setting::Tta,
        (_, SynthSetting::Uda) => Setting::Uda,
        (_, SynthSetting::Sfda) => Setting::Sfda,
    };
    let profile = match (a.quality, a.profile) {
        (Some(q), _) => QualityProfile::Constant(q),
        (None, Profile::Mixed) => QualityProfile::Mixed,
        (None, Profile::Monotone) => QualityProfile::Monotone,
    };
    let cfg = SynthConfig {
        num_classes: a.classes,
        dim: a.dim,
        n: a.n,
        shift: a.shift,
        scale: a.scale,
        sigma: a.sigma,
        separation: a.separation,
        algorithms: a.algorithms,
        hparams: a.hparams,
        checkpoints: a.checkpoints,
        collapse_rate: a.collapse_rate,
        profile,
        features: a
            .feature_dim
            .map_or(FeatureMode::Inputs, |dim| FeatureMode::Projection { dim }),
        logit_scale: a.logit_scale,
        setting,
        batch_size: a.batch_size,
        source_name: a.source_name,
        target_name: a.target_name,
        seed: a.seed.seed,
    };
    let out = gen_pack(&cfg)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    write_pack(&a.out, &out.pack)?;
    print_summary(&out.pack, &mut std::io::stdout().lock())
}

fn print_summary(pack: &dyn BundleSource, w: &mut dyn Write) -> Result<(), Error> {
    let m = pack.manifest();
    let bundles: usize = m.checkpoints.iter().map(|r| r.bundles.len()).sum();
    let so = m.source_only().count();
    let io = |e| io_err(Path::new("<stdout>"), e);
    writeln!(w, "task: {}", m.task_name()).map_err(io)?;
    writeln!(w, "setting: {}", m.setting).map_err(io)?;
    writeln!(w, "classes: {}", m.num_classes).map_err(io)?;
    writeln!(w, "algorithms: {}", m.algorithms().join(", ")).map_err(io)?;
    writeln!(w, "checkpoints: {} ({} source-only)", m.checkpoints.len(), so).map_err(io)?;
    writeln!(w, "bundles: {bundles}").map_err(io)?;
    if m.setting.is_episodic() {
        let mut batches: Vec<u32> = m.checkpoints.iter().flat_map(|r| r.batches()).collect();
        batches.sort_unstable();
        batches.dedup();
        writeln!(w, "batches: {}", batches.len()).map_err(io)?;
    }
    if let Some(b) = &m.baseline {
        writeln!(w, "baseline: {b}").map_err(io)?;
    }
    Ok(())
}

fn load_specs(a: &ScoreArgs, pack: &Pack) -> Result<Vec<ValidatorSpec>, Error> {
    if let Some(path) = &a.validators {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        return parse_specs(&text);
    }
    let profile = a
        .defaults
        .unwrap_or_else(|| DefaultProfile::for_setting(pack.manifest().setting));
    Ok(default_specs(profile))
}

fn score(a: ScoreArgs) -> Result<(), Error> {
    let pack = read_pack(&a.pack)?;
    let specs = load_specs(&a, &pack)?;
    let table = score_pack(&pack, &specs, a.seed.seed, a.parallel)?;
    table.write_csv(create(&a.out)?)?;
    let invalid = table.rows.iter().filter(|r| !r.is_valid()).count();
    println!(
        "scored {} cells ({} invalid) for {} validators",
        table.rows.len(),
        invalid,
        specs.len()
    );
    Ok(())
}

fn select(a: SelectArgs) -> Result<(), Error> {
    let pack = read_pack(&a.pack)?;
    let scores = ScoreTable::read_csv(open(&a.scores)?)?;
    let oracle = oracle_table(&pack)?;
    let opts = SelectOptions {
        include_source_only: a.include_source_only,
        episodic: a.episodic,
        weighting: BatchWeighting::Unweighted,
    };
    let rows = select_all(&pack, &scores, &oracle, opts)?;
    write_selections(&rows, create(&a.out)?)?;
    println!("wrote {} selections", rows.len());
    Ok(())
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<(), Error> {
    if a.pack.len() != a.scores.len() || a.pack.len() != a.selections.len() {
        return Err(Error::InvalidArgument(format!(
            "got {} packs, {} score files and {} selection files; pass one of each per task",
            a.pack.len(),
            a.scores.len(),
            a.selections.len()
        )));
    }
    let weighting = if a.weighted_batches {
        BatchWeighting::BySize
    } else {
        BatchWeighting::Unweighted
    };
    let mut tasks = Vec::new();
    for ((p, s), sel) in a.pack.iter().zip(&a.scores).zip(&a.selections) {
        let pack = read_pack(p)?;
        let oracle = oracle_table(&pack)?;
        tasks.push(TaskResults {
            task: pack.manifest().task_name(),
            baseline: baseline_value(&pack, &oracle, weighting)?,
            selections: read_selections(open(sel)?)?,
            scores: ScoreTable::read_csv(open(s)?)?,
            oracle,
        });
    }
    let report = analyze(
        &tasks,
        AnalysisOptions {
            weight_exponent: a.weight_exponent,
            pooled: a.pooled,
            weighting,
        },
    )?;
    write_report_dir(&report, &a.out)?;
    println!("wrote report for {} tasks to {}", tasks.len(), a.out.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), Error> {
    let pack = read_pack(&a.pack)?;
    if a.json {
        let m = pack.manifest();
        let summary = serde_json::json!({
            "task": m.task_name(),
            "setting": m.setting,
            "num_classes": m.num_classes,
            "algorithms": m.algorithms(),
            "checkpoints": m.checkpoints.len(),
            "source_only": m.source_only().map(|r| r.key().to_string()).collect::<Vec<_>>(),
            "baseline": m.baseline.as_ref().map(|k| k.to_string()),
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
        Ok(())
    } else {
        print_summary(&pack, &mut std::io::stdout().lock())
    }
}

fn validate_pack(a: PackArg) -> Result<(), Error> {
    let pack = read_pack(&a.pack)?;
    let n = pack.check_all()?;
    println!("ok: {} checkpoints, {n} bundles", pack.manifest().checkpoints.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Score(a) => score(a),
        Command::Select(a) => select(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Inspect(a) => inspect(a),
        Command::ValidatePack(a) => validate_pack(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
