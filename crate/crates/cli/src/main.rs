use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gqkva::bench::{
    compare_table, reference_records, render_table, scatter_data, write_csv, write_json, BenchRecord, CompareOptions,
    TimingOptions,
};
use gqkva::checkpoint::save_checkpoint;
use gqkva::scheme::{parse_scheme_list, SCHEME_GRAMMAR};
use gqkva::train::data::load_dataset_dir;
use gqkva::train::{synth_dataset, train_loop, Schedule, SplitDataset, TrainHyper};
use gqkva::verify::verify_scheme;
use gqkva::{Error, Preset, Scalar, ScaleMode, SchemeSpec, ViTConfig};

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INVARIANT: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "gqkva",
    version,
    about = "Grouped query/key/value attention: checks, accounting, benchmarks, toy training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the scheme invariant suite at small dims (d = 2·heads).
    Verify(VerifyArgs),
    /// Print parameter, size and FLOP columns for each scheme.
    Count(CountArgs),
    /// Time training steps per scheme and write a report.
    Bench(BenchArgs),
    /// Train a model on synthetic or on-disk data.
    Train(TrainArgs),
    /// Write size/time-vs-accuracy series for the published reference rows.
    Scatter(ScatterArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Comma-separated schemes, or the bundles `table1` / `all`.
    #[arg(long, default_value = "all")]
    schemes: String,
    #[arg(long, default_value_t = 6)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "head-dim")]
    scale_mode: ScaleMode,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Model geometry: a preset with optional per-field overrides.
#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    preset: Preset,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, default_value = "head-dim")]
    scale_mode: ScaleMode,
}

impl ModelArgs {
    fn configs(&self, schemes: &str) -> Result<Vec<ViTConfig>, CliError> {
        let base = ViTConfig::preset(self.preset, SchemeSpec::Mha).map_err(CliError::usage)?;
        let heads = self.heads.unwrap_or(base.heads);
        parse_scheme_list(schemes, heads)
            .map_err(CliError::scheme)?
            .into_iter()
            .map(|spec| {
                ViTConfig::new(
                    self.image_size.unwrap_or(base.image_size),
                    self.patch.unwrap_or(base.patch_size),
                    base.in_channels,
                    self.dim.unwrap_or(base.d),
                    self.depth.unwrap_or(base.depth),
                    heads,
                    base.mlp_ratio,
                    self.classes.unwrap_or(base.num_classes),
                    spec,
                )
                .map(|c| c.with_scale(self.scale_mode))
                .map_err(CliError::scheme)
            })
            .collect()
    }
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "table1")]
    schemes: String,
    /// Images per batch for the FLOP column.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "table1")]
    schemes: String,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Timed iterations per scheme (at least 5).
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "mha")]
    schemes: String,
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value = "cosine")]
    schedule: Schedule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,
    /// Synthetic sample count (ignored with --data-dir).
    #[arg(long, default_value_t = 1200)]
    samples: usize,
    /// Dataset directory with meta.json, images.f32 and labels.u32.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Directory receiving `<scheme>.jsonl` logs and `<scheme>.ckpt` checkpoints.
    #[arg(long, default_value = "train-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScatterArgs {
    /// Directory receiving the series CSVs and fit sidecars.
    #[arg(long, default_value = "scatter-out")]
    out: PathBuf,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_USAGE, message: e.to_string() }
    }

    fn scheme(e: Error) -> Self {
        CliError { code: EXIT_USAGE, message: format!("{e}\nscheme grammar: {SCHEME_GRAMMAR} (bundles: table1, all)") }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            Error::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_OTHER,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(&a),
        Command::Count(a) => cmd_count(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Scatter(a) => cmd_scatter(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Writes to `path`, or stdout when absent.
fn emit(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> CliResult) -> CliResult {
    match path {
        Some(p) => {
            let mut f = io::BufWriter::new(fs::File::create(p)?);
            write(&mut f)?;
            f.flush()?;
            Ok(())
        }
        None => write(&mut io::stdout().lock()),
    }
}

fn cmd_verify(a: &VerifyArgs) -> CliResult {
    let specs = parse_scheme_list(&a.schemes, a.heads).map_err(CliError::scheme)?;
    for spec in &specs {
        spec.build(2 * a.heads, a.heads).map_err(CliError::scheme)?;
    }
    let reports =
        specs.iter().map(|&spec| verify_scheme(spec, a.heads, a.scale_mode, a.seed)).collect::<Result<Vec<_>, _>>()?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    emit(a.out.as_deref(), |w| {
        match a.format {
            Format::Json => {
                serde_json::to_writer_pretty(&mut *w, &reports)?;
                writeln!(w)?;
            }
            Format::Table | Format::Csv => {
                for r in &reports {
                    writeln!(w, "{} {} (d={}, h={}, {})", verdict(r.passed()), r.scheme, r.d, r.heads, r.scale_mode)?;
                    for c in &r.checks {
                        writeln!(w, "    {} {}: {}", verdict(c.passed), c.name, c.detail)?;
                    }
                }
                writeln!(w, "{} of {} schemes passed", reports.len() - failed, reports.len())?;
            }
        }
        Ok(())
    })?;
    if failed > 0 {
        return Err(CliError { code: EXIT_INVARIANT, message: format!("{failed} scheme(s) violated invariants") });
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn write_report(records: &[BenchRecord], format: Format, out: Option<&Path>) -> CliResult {
    emit(out, |w| {
        match format {
            Format::Table => w.write_all(render_table(records).as_bytes())?,
            Format::Csv => write_csv(records, w)?,
            Format::Json => write_json(records, w)?,
        }
        Ok(())
    })
}

fn cmd_count(a: &CountArgs) -> CliResult {
    let configs = a.model.configs(&a.schemes)?;
    let records = compare_table(&configs, &CompareOptions { flops_batch: a.batch, timing: None })?;
    write_report(&records, a.format, a.out.as_deref())
}

fn cmd_bench(a: &BenchArgs) -> CliResult {
    if a.iters < 5 {
        return Err(CliError::usage(format!("--iters must be at least 5, got {}", a.iters)));
    }
    let configs = a.model.configs(&a.schemes)?;
    let timing = TimingOptions { batch_size: a.batch, warmup_iters: a.warmup, timed_iters: a.iters, seed: a.seed };
    let records = compare_table(&configs, &CompareOptions { flops_batch: a.batch, timing: Some(timing) })?;
    write_report(&records, a.format, a.out.as_deref())
}

fn load_data(a: &TrainArgs, cfg: &ViTConfig) -> CliResult<SplitDataset> {
    Ok(match &a.data_dir {
        Some(dir) => load_dataset_dir(dir)?.split()?,
        None => synth_dataset(a.seed, a.samples, cfg.image_size, cfg.num_classes)?,
    })
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let configs = a.model.configs(&a.schemes)?;
    let hyper = TrainHyper {
        lr: a.lr,
        weight_decay: a.weight_decay,
        batch_size: a.batch,
        steps: a.steps,
        schedule: a.schedule,
        seed: a.seed,
        ..TrainHyper::default()
    };
    hyper.validate()?;
    fs::create_dir_all(&a.out)?;
    let data = load_data(a, &configs[0])?;
    for cfg in &configs {
        match a.dtype {
            DTypeArg::F32 => train_one::<f32>(cfg, &hyper, &data, &a.out)?,
            DTypeArg::F64 => train_one::<f64>(cfg, &hyper, &data, &a.out)?,
        }
    }
    Ok(())
}

fn train_one<T: Scalar>(cfg: &ViTConfig, hyper: &TrainHyper, data: &SplitDataset, out: &Path) -> CliResult {
    let stem = cfg.scheme.spec().map(|s| s.to_string()).unwrap_or_else(|| cfg.scheme.label().to_lowercase());
    let outcome = train_loop::<T>(cfg, hyper, data, None)?;
    let ckpt = out.join(format!("{stem}.ckpt"));
    save_checkpoint(&ckpt, cfg, &outcome.weights)?;
    let log_path = out.join(format!("{stem}.jsonl"));
    outcome.log.write_jsonl(io::BufWriter::new(fs::File::create(&log_path)?))?;
    let log = &outcome.log;
    println!(
        "{:<10} loss {:.4} -> {:.4}  val acc {:.3}  ({} steps) -> {}",
        cfg.scheme.label(),
        log.initial_loss().unwrap_or(f64::NAN),
        log.final_loss(10).unwrap_or(f64::NAN),
        log.final_accuracy().unwrap_or(f64::NAN),
        log.steps.len(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_scatter(a: &ScatterArgs) -> CliResult {
    fs::create_dir_all(&a.out)?;
    let scatter = scatter_data(&reference_records())?;
    let mut series = vec![("size_vs_acc", &scatter.size_vs_acc)];
    if let Some(t) = &scatter.tps_vs_acc {
        series.push(("tps_vs_acc", t));
    }
    for (name, s) in series {
        s.write_csv(fs::File::create(a.out.join(format!("{name}.csv")))?)?;
        s.write_fit_json(fs::File::create(a.out.join(format!("{name}.json")))?)?;
        println!("{name}: slope {:.4} intercept {:.4} r2 {:.4}", s.fit.slope, s.fit.intercept, s.fit.r2);
    }
    Ok(())
}
