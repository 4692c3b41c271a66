use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use meet_core::config::{parse_slots, Ablation, ExperimentConfig, ModelConfig};
use meet_core::data::{
    check_slot, ingest, make_window, parse_psv, serialize_psv, stratified_split, synth_generate,
    LabelRuleSet, PatientRecord, RawWindow, Scheme, SynthSpec, WindowArchive,
};
use meet_core::diagnostics::{check_model, check_ops, op_names};
use meet_core::eval::{compute_metrics, sweep, sweep_csv, sweep_summary, sweep_svg};
use meet_core::pipeline::Pipeline;

#[derive(Parser)]
#[command(name = "meet-ts", version, about = "Early multi-class time-series classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a directory of PSV records, label them and write a window archive.
    Ingest {
        #[arg(long)]
        data_dir: PathBuf,
        /// Rule file; defaults to the built-in rules of the scheme.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, default_value = "qsofa")]
        scheme: String,
        #[arg(long)]
        out: PathBuf,
        /// Report path; defaults to `<out>.report.txt`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate synthetic records with planted early motifs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Also write the records as PSV files into this directory.
        #[arg(long)]
        psv_dir: Option<PathBuf>,
        #[arg(long, default_value_t = SynthSpec::default().n_per_class)]
        n_per_class: usize,
        #[arg(long, default_value_t = SynthSpec::default().n_classes)]
        classes: usize,
        #[arg(long, default_value_t = SynthSpec::default().d_in)]
        features: usize,
        #[arg(long, default_value_t = SynthSpec::default().hours)]
        hours: usize,
        #[arg(long, default_value_t = SynthSpec::default().motif_strength)]
        motif_strength: f64,
        #[arg(long, default_value_t = SynthSpec::default().noise_sd)]
        noise_sd: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one pipeline on the training split of one slot.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        slot: usize,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Per-epoch history; defaults to `<out-checkpoint>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out split it was trained against.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        windows: PathBuf,
    },
    /// Run the slot x variant x run grid and write CSV and SVG reports.
    Sweep {
        #[command(flatten)]
        grid: Grid,
        /// Comma-separated variants; defaults to the config's list.
        #[arg(long)]
        variants: Option<String>,
    },
    /// The sweep over all four variants.
    Ablate {
        #[command(flatten)]
        grid: Grid,
    },
    /// Finite-difference gradient checks of every op and the composed loss.
    Gradcheck {
        /// Model section overrides the built-in toy shapes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupts the analytic gradient of the named op.
        #[arg(long, hide = true)]
        fault_op: Option<String>,
    },
    /// Classify PSV records with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PSV file or a directory of them.
        #[arg(long)]
        psv: PathBuf,
        /// Must match the checkpoint's slot when given.
        #[arg(long)]
        slot: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    windows: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Grid {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    runs: Option<usize>,
    /// e.g. `2-23` or `4,8,12`.
    #[arg(long)]
    slots: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, env = "MEET_TS_WORKERS")]
    workers: Option<usize>,
}

/// Problems with flags, config files or input paths (exit code 2).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use meet_core::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config { .. } | E::Parse { .. } | E::InvalidArgument(_) => 2,
                E::NonFinite(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Ingest {
            data_dir,
            rules,
            scheme,
            out,
            report,
        } => cmd_ingest(&data_dir, rules.as_deref(), &scheme, &out, report),
        Command::Synth {
            out,
            psv_dir,
            n_per_class,
            classes,
            features,
            hours,
            motif_strength,
            noise_sd,
            seed,
        } => {
            let spec = SynthSpec {
                n_per_class,
                n_classes: classes,
                d_in: features,
                hours,
                motif_strength,
                noise_sd,
            };
            cmd_synth(&spec, seed, &out, psv_dir.as_deref())
        }
        Command::Train {
            common,
            slot,
            variant,
            out_checkpoint,
            history,
        } => cmd_train(&common, slot, &variant, &out_checkpoint, history),
        Command::Evaluate { checkpoint, windows } => cmd_evaluate(&checkpoint, &windows),
        Command::Sweep { grid, variants } => cmd_sweep(&grid, variants.as_deref(), "sweep"),
        Command::Ablate { grid } => cmd_sweep(&grid, Some("full,no_mere,no_cdta,no_both"), "ablation"),
        Command::Gradcheck {
            config,
            seed,
            fault_op,
        } => cmd_gradcheck(config.as_deref(), seed, fault_op.as_deref()),
        Command::Predict {
            checkpoint,
            psv,
            slot,
        } => cmd_predict(&checkpoint, &psv, slot),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_text(&read_text(p)?)
            .with_context(|| format!("in config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    Ok(cfg)
}

fn load_archive(path: &Path) -> Result<WindowArchive> {
    WindowArchive::from_bytes(&read_bytes(path)?)
        .with_context(|| format!("reading window archive {}", path.display()))
}

fn psv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| usage(format!("cannot list {}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "psv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("no PSV files in {}", path.display())));
    }
    Ok(files)
}

fn read_record(path: &Path) -> Result<PatientRecord> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let text = fs::read_to_string(path)?;
    Ok(parse_psv(&id, &text)?)
}

fn cmd_ingest(data_dir: &Path, rules: Option<&Path>, scheme: &str, out: &Path, report: Option<PathBuf>) -> Result<u8> {
    let scheme: Scheme = scheme.parse()?;
    let rules = match rules {
        Some(p) => LabelRuleSet::parse(&read_text(p)?, scheme)
            .with_context(|| format!("in rule file {}", p.display()))?,
        None => LabelRuleSet::default_for(scheme)?,
    };
    let files = psv_files(data_dir)?;
    let mut records = Vec::with_capacity(files.len());
    let mut failed = 0;
    for f in &files {
        match read_record(f).and_then(|r| rules.apply(&r).map(|_| r).map_err(Into::into)) {
            Ok(r) => records.push(r),
            Err(e) => {
                failed += 1;
                eprintln!("warning: skipping {}: {e:#}", f.display());
            }
        }
    }
    if records.is_empty() {
        bail!("none of the {} PSV files could be ingested", files.len());
    }
    let archive = ingest(&records, &rules)?;
    write(out, archive.to_bytes())?;
    let mut text = archive.report();
    writeln!(text, "files skipped: {failed}")?;
    write(&report.unwrap_or_else(|| with_suffix(out, ".report.txt")), &text)?;
    print!("{text}");
    Ok(0)
}

fn cmd_synth(spec: &SynthSpec, seed: u64, out: &Path, psv_dir: Option<&Path>) -> Result<u8> {
    let (records, labels) = synth_generate(spec, seed)?;
    let archive = WindowArchive::from_records(&records, &labels, spec.n_classes)?;
    write(out, archive.to_bytes())?;
    if let Some(dir) = psv_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for r in &records {
            write(&dir.join(format!("{}.psv", r.id)), serialize_psv(r))?;
        }
    }
    print!("{}", archive.report());
    Ok(0)
}

/// Windows of one slot and the split the config's seed selects.
fn split_windows(archive: &WindowArchive, slot: usize, cfg: &ExperimentConfig) -> Result<(Vec<RawWindow>, Vec<usize>, Vec<usize>)> {
    check_slot(slot)?;
    let ws = archive.windows(slot)?;
    if ws.is_empty() {
        return Err(usage(format!("the archive has no windows at slot {slot}")));
    }
    let (train, test) = stratified_split(&ws, cfg.split_ratio, cfg.model.seed)?;
    Ok((ws, train, test))
}

fn print_metrics(pred: &[usize], labels: &[usize], n_classes: usize) -> Result<()> {
    let m = compute_metrics(pred, labels, n_classes)?;
    println!("test windows: {}", m.n_test);
    println!("accuracy: {:.6}", m.accuracy);
    println!("macro F1: {:.6}", m.macro_f1);
    for (k, f) in m.per_class_f1.iter().enumerate() {
        println!("class {k} F1: {f:.6}");
    }
    Ok(())
}

fn cmd_train(common: &Common, slot: usize, variant: &str, out: &Path, history: Option<PathBuf>) -> Result<u8> {
    let cfg = load_config(common.config.as_deref(), common.seed)?;
    let variant: Ablation = variant.parse()?;
    let archive = load_archive(&common.windows)?;
    let (ws, train, test) = split_windows(&archive, slot, &cfg)?;
    let tr: Vec<&RawWindow> = train.iter().map(|&i| &ws[i]).collect();
    let fit = Pipeline::fit(&tr, &archive.feature_names, archive.n_classes, variant, &cfg, cfg.model.seed)?;
    let mut pipeline = fit.pipeline;
    write(out, pipeline.to_bytes())?;
    let mut csv = String::from("epoch,l_mse,l_reg,l_pred,total,train_accuracy\n");
    if let Some(h) = &fit.history {
        for (e, (l, acc)) in h.epochs.iter().zip(&h.valid_accuracy).enumerate() {
            writeln!(csv, "{},{:.10},{:.10},{:.10},{:.10},{acc:.6}", e + 1, l.l_mse, l.l_reg, l.l_pred, l.total)?;
        }
    }
    write(&history.unwrap_or_else(|| with_suffix(out, ".history.csv")), csv)?;
    println!("train windows: {}", tr.len());
    if !test.is_empty() {
        let te: Vec<&RawWindow> = test.iter().map(|&i| &ws[i]).collect();
        let pred = pipeline.predict(&te)?;
        let labels: Vec<usize> = te.iter().map(|w| w.label).collect();
        print_metrics(&pred.classes, &labels, archive.n_classes)?;
    }
    Ok(0)
}

fn cmd_evaluate(checkpoint: &Path, windows: &Path) -> Result<u8> {
    let mut pipeline = Pipeline::from_bytes(&read_bytes(checkpoint)?)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let archive = load_archive(windows)?;
    if archive.feature_names != pipeline.feature_names {
        return Err(usage("archive features differ from the checkpoint's"));
    }
    let (ws, _, test) = split_windows(&archive, pipeline.slot(), &pipeline.config)?;
    let te: Vec<&RawWindow> = test.iter().map(|&i| &ws[i]).collect();
    if te.is_empty() {
        bail!("the split leaves no test windows");
    }
    let pred = pipeline.predict(&te)?;
    let labels: Vec<usize> = te.iter().map(|w| w.label).collect();
    println!("slot: {}  variant: {}", pipeline.slot(), pipeline.variant());
    print_metrics(&pred.classes, &labels, pipeline.n_classes())?;
    Ok(0)
}

fn cmd_sweep(grid: &Grid, variants: Option<&str>, stem: &str) -> Result<u8> {
    let mut cfg = load_config(grid.common.config.as_deref(), grid.common.seed)?;
    if let Some(v) = variants {
        cfg.variants = v
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<meet_core::Result<_>>()?;
    }
    if let Some(r) = grid.runs {
        cfg.runs = r;
    }
    if let Some(s) = &grid.slots {
        cfg.slots = parse_slots(s)?;
    }
    if let Some(w) = grid.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let archive = load_archive(&grid.common.windows)?;
    let cells = sweep(&archive, &cfg, cfg.model.seed)?;
    fs::create_dir_all(&grid.out_dir).with_context(|| format!("cannot create {}", grid.out_dir.display()))?;
    write(&grid.out_dir.join(format!("{stem}.csv")), sweep_csv(&cells))?;
    write(&grid.out_dir.join(format!("{stem}.svg")), sweep_svg(&cells))?;
    print!("{}", sweep_summary(&cells));
    let failed = cells.iter().filter(|c| c.failed()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", cells.len());
        return Ok(1);
    }
    Ok(0)
}

fn cmd_gradcheck(config: Option<&Path>, seed: u64, fault: Option<&str>) -> Result<u8> {
    let model = match config {
        Some(p) => load_config(Some(p), None)?.model,
        None => ModelConfig::toy(),
    };
    if let Some(f) = fault {
        if !op_names().contains(&f) {
            return Err(usage(format!("unknown op `{f}`")));
        }
    }
    let mut results = check_ops(seed, fault)?;
    results.extend(check_model(&model, 2, seed)?.into_iter().map(|mut r| {
        r.name = format!("model:{}", r.name);
        r
    }));
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<32} {:.3e} {verdict}", r.name, r.max_relative_error);
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(0)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(1)
    }
}

/// Probabilities in millionths, rounded so that they add up to exactly one
/// million: floor everything, then hand the leftover units to the largest
/// remainders.
fn micro_units(p: &[f64]) -> Vec<u64> {
    let scaled: Vec<f64> = p.iter().map(|v| v * 1e6).collect();
    let mut units: Vec<u64> = scaled.iter().map(|v| v.floor() as u64).collect();
    let short = 1_000_000u64.saturating_sub(units.iter().sum());
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| (scaled[b] - scaled[b].floor()).total_cmp(&(scaled[a] - scaled[a].floor())));
    for &i in order.iter().cycle().take(short as usize) {
        units[i] += 1;
    }
    units
}

fn cmd_predict(checkpoint: &Path, psv: &Path, slot: Option<usize>) -> Result<u8> {
    let mut pipeline = Pipeline::from_bytes(&read_bytes(checkpoint)?)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    if let Some(s) = slot {
        if s != pipeline.slot() {
            return Err(usage(format!("checkpoint was trained for slot {}, not {s}", pipeline.slot())));
        }
    }
    let slot = pipeline.slot();
    let mut out = io::stdout().lock();
    let mut emitted = 0;
    for f in psv_files(psv)? {
        let window = read_record(&f).and_then(|r| {
            let cols = pipeline
                .feature_names
                .iter()
                .map(|n| r.column_index(n).ok_or_else(|| anyhow!("missing column `{n}`")))
                .collect::<Result<Vec<_>>>()?;
            make_window(&r, &cols, slot, 0)
                .ok_or_else(|| anyhow!("record has {} hours, fewer than {slot}", r.hours()))
        });
        let window = match window {
            Ok(w) => w,
            Err(e) => {
                eprintln!("warning: skipping {}: {e:#}", f.display());
                continue;
            }
        };
        let p = pipeline.predict(&[&window])?;
        let mut line = format!("{},{}", window.patient_id, p.classes[0]);
        for v in micro_units(&p.probabilities) {
            write!(line, ",{}.{:06}", v / 1_000_000, v % 1_000_000)?;
        }
        line.push('\n');
        if let Err(e) = out.write_all(line.as_bytes()) {
            if e.kind() == io::ErrorKind::BrokenPipe {
                return Ok(0);
            }
            return Err(e.into());
        }
        emitted += 1;
    }
    if emitted == 0 {
        bail!("no record could be classified");
    }
    Ok(0)
}
