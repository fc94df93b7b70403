use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use focustrack::config::RunConfig;
use focustrack::eval::{evaluate, MetricsReport, SequenceAnnotation, TrackResult};
use focustrack::gradcheck::{self, Precision, TERMS};
use focustrack::macs;
use focustrack::model::{check_params, ModelConfig, Preset};
use focustrack::synthdata::{self, Sequence, SynthSpec};
use focustrack::tracker::{run_many, trace_csv, worker_count};
use focustrack::train::{self, Phase};
use focustrack::{ntc1, Error, Result};

#[derive(Parser)]
#[command(name = "focustrack", version, about = "Small-target tracking with adaptive search regions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Track one sequence directory, or every sequence directory under it.
    Track(TrackArgs),
    /// Score tracker result files against annotations.
    Eval(EvalArgs),
    /// Train a model on synthetic (or any annotated) sequences.
    Train(TrainArgs),
    /// Render a synthetic sequence.
    Synth(SynthArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the analytic multiply-accumulate count of one tracking step.
    Macs(MacsArgs),
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    use_sra: Option<bool>,
    #[arg(long)]
    use_atm: Option<bool>,
    #[arg(long)]
    use_window: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of `<sequence>.json` result files.
    #[arg(long)]
    results: PathBuf,
    /// Directory holding `<sequence>/annotation.json` (or `<sequence>.json`).
    #[arg(long)]
    ann: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of sequence directories.
    #[arg(long)]
    data: PathBuf,
    /// Output weights file; the loss trace goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    phase: Option<Phase>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Allow training the full-size preset.
    #[arg(long)]
    i_know: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON sequence spec; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Sequences are written to `<out>/synth_<seed>`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sequences, with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    count: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "toy")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run in single precision (looser tolerance).
    #[arg(long)]
    f32: bool,
    /// Random directions per parameter tensor.
    #[arg(long, default_value_t = 1)]
    dirs: usize,
}

#[derive(Args)]
struct MacsArgs {
    #[arg(long, default_value = "full")]
    preset: Preset,
    /// Count the plain baseline (no CLS token, presence branch or masks).
    #[arg(long)]
    baseline: bool,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn echo(cfg: &RunConfig) {
    println!("effective config: {}", serde_json::to_string(cfg).expect("config serializes"));
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// CSV with the run config as a leading `#` comment line.
fn with_config_comment(cfg: &RunConfig, csv: &str) -> String {
    format!("# config: {}\n{csv}", serde_json::to_string(cfg).expect("config serializes"))
}

/// `dir` itself if it holds an annotation, else its annotated subdirectories by name.
fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("annotation.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let rd = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("annotation.json").is_file())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Precondition(format!("no sequence directories under {}", dir.display())));
    }
    Ok(out)
}

fn load_sequences(dir: &Path, model: &ModelConfig) -> Result<Vec<Sequence>> {
    sequence_dirs(dir)?
        .iter()
        .map(|d| synthdata::load_sequence(d, model.encoder.channels))
        .collect()
}

fn load_weights(path: &Path, model: &ModelConfig) -> Result<focustrack::autodiff::GradientTape<f32>> {
    let (tape, _) = ntc1::load::<f32>(path)?;
    check_params(model, &tape)?;
    Ok(tape)
}

fn cmd_track(a: TrackArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.use_sra = a.use_sra.unwrap_or(cfg.use_sra);
    cfg.use_atm = a.use_atm.unwrap_or(cfg.use_atm);
    cfg.use_window = a.use_window.unwrap_or(cfg.use_window);
    cfg.validate()?;
    echo(&cfg);
    let model = cfg.model();
    let weights = load_weights(&a.weights, &model)?;
    let seqs = load_sequences(&a.seq, &model)?;
    let runs = run_many(&model, &weights, cfg.tracker(), &seqs, worker_count());
    for (name, run) in runs {
        let run = run?;
        let result = json!({
            "res": run.result.res,
            "exist_pred": run.result.exist_pred,
            "config": cfg.to_json(),
        });
        write(&a.out.join(format!("{name}.json")), serde_json::to_string(&result)?)?;
        write(
            &a.out.join(format!("{name}_trace.csv")),
            with_config_comment(&cfg, &trace_csv(&run.outputs)),
        )?;
        println!("{name}: {} frames tracked", run.outputs.len());
    }
    Ok(())
}

fn annotation_for(ann_dir: &Path, name: &str) -> Result<SequenceAnnotation> {
    let nested = ann_dir.join(name).join("annotation.json");
    if nested.is_file() {
        return SequenceAnnotation::load(&nested);
    }
    SequenceAnnotation::load(&ann_dir.join(format!("{name}.json")))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    echo(&cfg);
    let rd = fs::read_dir(&a.results).map_err(|e| Error::Io {
        path: a.results.clone(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Precondition(format!("no result files in {}", a.results.display())));
    }
    let jobs: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p))
        .collect();
    let workers = worker_count().clamp(1, jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let scored: Vec<(String, Result<focustrack::eval::SequenceMetrics>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some((name, path)) = jobs.get(i) else { break };
                        let m = TrackResult::load(path).and_then(|r| {
                            let ann = annotation_for(&a.ann, name)?;
                            evaluate(&r.boxes(), &r.exist_pred, &ann)
                        });
                        local.push((name.clone(), m));
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut per = BTreeMap::new();
    for (name, m) in scored {
        per.insert(name, m?);
    }
    let report = MetricsReport::from_sequences(per)?;
    let mut doc = serde_json::to_value(&report)?;
    doc["config"] = cfg.to_json();
    write(&a.out, serde_json::to_string_pretty(&doc)?)?;
    write(&a.out.with_extension("curves.csv"), with_config_comment(&cfg, &report.curves_csv()))?;
    println!(
        "AUC {:.4}  P {:.4}  Pnorm {:.4}  SA {:.4}  ({} sequences)",
        report.auc,
        report.p20,
        report.pnorm,
        report.sa,
        report.per_sequence.len()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(p) = a.phase {
        cfg.phase = p;
    }
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    if cfg.preset == Preset::Full && !a.i_know {
        return Err(Error::Config(
            "training the full preset is refused on a desk machine; pass --i-know to insist".into(),
        ));
    }
    echo(&cfg);
    let model = cfg.model();
    let seqs = load_sequences(&a.data, &model)?;
    let tc = cfg.train();
    let every = (tc.steps / 20).max(1);
    let out = train::train(&model, &tc, &seqs, None, |step, p| {
        if step == 1 || step % every == 0 {
            eprintln!("step {step:>5}  total {:.4}", p.total);
        }
    })?;
    let meta = json!({
        "config": cfg.to_json(),
        "probe_initial": out.probe_initial,
        "probe_final": out.probe_final,
    });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    ntc1::save(&out.tape, Some(meta), &a.out)?;
    write(&a.out.with_extension("loss.csv"), with_config_comment(&cfg, &out.trace_csv()))?;
    println!(
        "probe loss {:.4} -> {:.4}  ({:.0} ms/step)",
        out.probe_initial.total, out.probe_final.total, out.ms_per_step
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Error::Format {
                path: p.clone(),
                msg: e.to_string(),
            })?
        }
        None => SynthSpec::default(),
    };
    let base = a.seed.unwrap_or(spec.seed);
    for k in 0..a.count {
        spec.seed = base + k;
        let seq = synthdata::generate(&spec)?;
        let dir = a.out.join(&seq.name);
        synthdata::save_sequence(&seq, Some(&spec), &dir)?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    if a.preset != Preset::Toy {
        return Err(Error::Config("gradcheck runs on the toy preset only".into()));
    }
    let precision = if a.f32 {
        eprintln!(
            "warning: single precision; tolerance relaxed to {:.0e}",
            Precision::F32.tolerance()
        );
        Precision::F32
    } else {
        Precision::F64
    };
    let report = gradcheck::run(&ModelConfig::toy(), a.seed, precision, a.dirs, &TERMS)?;
    for t in &report.terms {
        let verdict = if t.max_rel_err <= report.tolerance { "ok" } else { "FAIL" };
        println!(
            "{:<7} max_rel_err {:.3e}  ({} directions, worst {})  {verdict}",
            t.term, t.max_rel_err, t.coords_checked, t.worst_param
        );
    }
    println!("tolerance {:.0e}: {}", report.tolerance, if report.passed() { "pass" } else { "FAIL" });
    Ok(report.passed())
}

fn cmd_macs(a: MacsArgs) {
    let m = macs::count(&ModelConfig::preset(a.preset), a.baseline);
    let variant = if a.baseline { "baseline" } else { "focustrack" };
    println!("preset {:?}, {variant}", a.preset);
    for (k, v) in [
        ("patch_embed", m.patch_embed),
        ("encoder", m.encoder),
        ("head", m.head),
        ("sra", m.sra),
        ("atm", m.atm),
    ] {
        println!("{k:<12} {v}");
    }
    println!("total        {}  ({:.2} G)", m.total(), m.total() as f64 / 1e9);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Track(a) => cmd_track(a).map(|_| true),
        Cmd::Eval(a) => cmd_eval(a).map(|_| true),
        Cmd::Train(a) => cmd_train(a).map(|_| true),
        Cmd::Synth(a) => cmd_synth(a).map(|_| true),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Macs(a) => {
            cmd_macs(a);
            Ok(true)
        }
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
