use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use evfuse::afnet::FusionMode;
use evfuse::eval::{
    attribute_breakdown, interpolate_from_rate, load_track, merge_reports, precision_thresholds, success_thresholds,
    write_box_csv, MetricsReport, TimedBox, TrackResult, DEFAULT_RPR_THRESHOLD,
};
use evfuse::events::{accumulation_window, aggregate_events, AccumulationMode, RateSchedule};
use evfuse::gradsuite::run_suite;
use evfuse::image::write_atomic;
use evfuse::sequence::{Sequence, MANIFEST_FILE};
use evfuse::simulator::{make_scenario, ScenarioKind};
use evfuse::tracker::{build_training_set, track_sequence, EpochLog, Modality, TrackInput, TrackerModel, TrainConfig};
use evfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "evfuse", version, about = "Frame and event fusion tracking on synthetic sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence: manifest, frames, events, ground truth.
    Simulate {
        #[arg(long)]
        scenario: ScenarioKind,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one event frame per tick as PGM.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: AccumulationMode,
        #[arg(long = "gamma-e")]
        gamma_e: u32,
        /// Defaults to a sibling of the input named `<input>.events-<mode>-<rate>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every op and block.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
    },
    /// Train a tracker from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint path with a `.loss.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Track a sequence at the event-frame rate.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        fusion: String,
        #[arg(long, value_parser = parse_mode)]
        mode: AccumulationMode,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// A box CSV or a sequence directory.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long = "interpolate-from-rate")]
        interpolate_from_rate: Option<u32>,
        #[arg(long, default_value_t = DEFAULT_RPR_THRESHOLD)]
        threshold: f64,
        /// Defaults to the directory of the prediction.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge the metrics of several run directories into one table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<AccumulationMode, String> {
    AccumulationMode::from_label(s).ok_or_else(|| format!("expected a or b, found {s:?}"))
}

fn config_error(message: impl Into<String>) -> Error {
    Error::Config(message.into())
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(config_error(format!("{} does not exist", path.display())))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_atomic(path, bytes)
}

fn json_bytes(value: &impl serde::Serialize, path: &Path) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    out.push(b'\n');
    Ok(out)
}

fn simulate(scenario: ScenarioKind, seed: u64, out: &Path) -> Result<()> {
    let seq = Sequence::simulate(&make_scenario(scenario, seed))?;
    ensure_dir(out)?;
    seq.save(out)?;
    println!("{} frames, {} events -> {}", seq.frames.len(), seq.events.len(), out.display());
    Ok(())
}

fn aggregate(input: &Path, mode: AccumulationMode, gamma_e: u32, out: Option<PathBuf>) -> Result<()> {
    ensure_exists(&input.join(MANIFEST_FILE))?;
    let seq = Sequence::load(input)?;
    let schedule = RateSchedule::new(seq.manifest.gamma_f, gamma_e)?;
    let times = &seq.manifest.frame_times;
    if *times != schedule.frame_times(times.len()) {
        return Err(Error::Schedule(format!("frame times are not on the {gamma_e} Hz event clock")));
    }
    let out = out.unwrap_or_else(|| {
        let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "sequence".into());
        input.with_file_name(format!("{name}.events-{}-{gamma_e}", mode.label()))
    });
    ensure_dir(&out)?;
    let mut index = String::from("file,t_us,t_start_us,t_end_us,frame,n\n");
    for (m, tick) in schedule.ticks(times.len()).iter().enumerate() {
        let (start, end) = accumulation_window(&schedule, times[tick.frame_index], tick.n, mode)?;
        let frame = aggregate_events(&seq.events, start, end)?;
        let name = format!("{:06}.pgm", m + 1);
        frame.image.save_pgm(&out.join(&name))?;
        let _ = writeln!(index, "{name},{},{start},{end},{},{}", tick.t, tick.frame_index, tick.n);
    }
    write_atomic(&out.join("windows.csv"), index.as_bytes())?;
    println!("event frames -> {}", out.display());
    Ok(())
}

fn gradcheck(op: Option<&str>) -> Result<bool> {
    let start = Instant::now();
    let reports = run_suite(op)?;
    let mut names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    names.dedup();
    let mut ok = true;
    for name in names {
        let runs: Vec<_> = reports.iter().filter(|r| r.name == name).collect();
        let worst = runs.iter().map(|r| r.worst()).fold(0.0, f64::max);
        let passed = runs.iter().all(|r| r.passed);
        ok &= passed;
        let verdict = if passed { "ok" } else { "FAIL" };
        let detail = runs.iter().find_map(|r| r.failure.clone()).unwrap_or_default();
        println!("{name:<26} seeds={} max_rel_err={worst:.3e} {verdict} {detail}", runs.len());
    }
    println!("{} checks in {:.1} s", reports.len(), start.elapsed().as_secs_f64());
    Ok(ok)
}

fn train(config: &Path, out: &Path, log: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|source| Error::Io {
        path: config.to_path_buf(),
        source,
    })?;
    let json_err = |source| Error::Json {
        path: config.to_path_buf(),
        source,
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    if raw.get("seed").is_none() {
        return Err(config_error(format!("{}: the config must set a seed", config.display())));
    }
    let cfg: TrainConfig = serde_json::from_value(raw).map_err(json_err)?;
    cfg.validate()?;
    let data = build_training_set(&cfg)?;
    let outcome = evfuse::tracker::train(&data, &cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    outcome.model.save(out)?;
    let log = log.unwrap_or_else(|| out.with_extension("loss.csv"));
    write_file(&log, EpochLog::csv(&outcome.log).as_bytes())?;
    if let Some(last) = outcome.log.last() {
        println!("epoch {} loss {:.6} -> {}", last.epoch, last.loss, out.display());
    }
    Ok(())
}

fn track(ckpt: &Path, input: &Path, fusion: &str, mode: AccumulationMode, out: Option<PathBuf>) -> Result<()> {
    ensure_exists(ckpt)?;
    ensure_exists(&input.join(MANIFEST_FILE))?;
    let model = TrackerModel::load(ckpt)?;
    let trained = model.config.arch.fusion;
    let modality = match fusion {
        "frame-only" => Modality::FrameOnly,
        "event-only" => Modality::EventOnly,
        other => {
            let wanted: FusionMode = other.parse().map_err(|_| {
                config_error(format!(
                    "unknown fusion {other:?}, expected afnet, ef, mf, frame-only or event-only"
                ))
            })?;
            if wanted != trained {
                return Err(config_error(format!(
                    "checkpoint was trained with fusion {trained}, not {wanted}"
                )));
            }
            Modality::Fused
        }
    };
    let seq = Sequence::load(input)?;
    let result = track_sequence(&model, &TrackInput::from_sequence(&seq)?, mode, modality)?;
    let csv = write_box_csv(&result);
    match out {
        Some(path) => write_file(&path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn curve_csv(thresholds: &[f64], values: &[f64]) -> String {
    let mut out = String::from("threshold,value\n");
    for (t, v) in thresholds.iter().zip(values) {
        let _ = writeln!(out, "{t},{v}");
    }
    out
}

/// Ground truth plus the initial box when `gt` is a sequence directory.
fn load_ground_truth(gt: &Path) -> Result<(TrackResult, Option<TimedBox>)> {
    if gt.is_dir() {
        ensure_exists(&gt.join(MANIFEST_FILE))?;
        let seq = Sequence::load(gt)?;
        let anchor = TimedBox {
            t: seq.manifest.frame_times[0],
            bbox: seq.manifest.init_box,
        };
        Ok((seq.ground_truth, Some(anchor)))
    } else {
        ensure_exists(gt)?;
        Ok((load_track(gt)?, None))
    }
}

fn evaluate_cmd(pred: &Path, gt: &Path, rate: Option<u32>, threshold: f64, out: Option<PathBuf>) -> Result<()> {
    ensure_exists(pred)?;
    let (truth, anchor) = load_ground_truth(gt)?;
    let mut result = load_track(pred)?.with_attribute(truth.attribute);
    if let Some(rate) = rate {
        result = interpolate_from_rate(&result, rate, anchor)?;
    }
    let report = attribute_breakdown(&[(result, truth)], threshold)?;
    let stem = pred
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pred".into());
    let stem = match rate {
        Some(r) => format!("{stem}.interp{r}"),
        None => stem,
    };
    let dir = out.unwrap_or_else(|| pred.parent().map(Path::to_path_buf).unwrap_or_default());
    let json = dir.join(format!("{stem}.metrics.json"));
    write_file(&json, &json_bytes(&report, &json)?)?;
    write_file(
        &dir.join(format!("{stem}.success.csv")),
        curve_csv(&success_thresholds(), &report.curves.success).as_bytes(),
    )?;
    write_file(
        &dir.join(format!("{stem}.precision.csv")),
        curve_csv(&precision_thresholds(), &report.curves.precision).as_bytes(),
    )?;
    println!(
        "rsr {:.4} rpr {:.4} op50 {:.4} op75 {:.4} error {:.3} px -> {}",
        report.rsr,
        report.rpr,
        report.op50,
        report.op75,
        report.mean_center_error,
        json.display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct RunSummary {
    run: String,
    sources: Vec<String>,
    report: MetricsReport,
}

fn load_run(dir: &Path) -> Result<RunSummary> {
    let io = |source| Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()).map_err(io))
        .collect::<Result<Vec<_>>>()?;
    files.retain(|p| p.to_string_lossy().ends_with(".metrics.json"));
    files.sort();
    if files.is_empty() {
        return Err(config_error(format!("{} holds no *.metrics.json files", dir.display())));
    }
    let reports = files
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|source| Error::Io {
                path: p.clone(),
                source,
            })?;
            serde_json::from_slice::<MetricsReport>(&bytes).map_err(|source| Error::Json { path: p.clone(), source })
        })
        .collect::<Result<Vec<_>>>()?;
    let run = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunSummary {
        run,
        sources: files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
        report: merge_reports(&reports.iter().collect::<Vec<_>>())?,
    })
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let summaries = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("run,attribute,frames,rsr,rpr,op50,op75,mean_center_error\n");
    let mut row = |run: &str, attr: &str, r: &MetricsReport| {
        let _ = writeln!(
            csv,
            "{run},{attr},{},{},{},{},{},{}",
            r.frames, r.rsr, r.rpr, r.op50, r.op75, r.mean_center_error
        );
    };
    for s in &summaries {
        row(&s.run, "all", &s.report);
        for (kind, sub) in &s.report.attributes {
            row(&s.run, kind.label(), sub);
        }
    }
    ensure_dir(out)?;
    write_atomic(&out.join("report.csv"), csv.as_bytes())?;
    let json = out.join("report.json");
    write_atomic(&json, &json_bytes(&summaries, &json)?)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { scenario, seed, out } => simulate(scenario, seed, &out)?,
        Command::Aggregate {
            input,
            mode,
            gamma_e,
            out,
        } => aggregate(&input, mode, gamma_e, out)?,
        Command::Gradcheck { op } => return gradcheck(op.as_deref()),
        Command::Train { config, out, log } => train(&config, &out, log)?,
        Command::Track {
            ckpt,
            input,
            fusion,
            mode,
            out,
        } => track(&ckpt, &input, &fusion, mode, out)?,
        Command::Evaluate {
            pred,
            gt,
            interpolate_from_rate,
            threshold,
            out,
        } => evaluate_cmd(&pred, &gt, interpolate_from_rate, threshold, out)?,
        Command::Report { runs, out } => report(&runs, &out)?,
    }
    Ok(true)
}

fn fail(message: &str) -> ExitCode {
    let line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error: {}", line.trim_start_matches("error: "));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            return fail(text.lines().next().unwrap_or("invalid arguments"));
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => fail("gradient check failed"),
        Err(e) => fail(&e.to_string()),
    }
}
