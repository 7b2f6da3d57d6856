//! Command-line interface.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use drscreen::analytics::{
    annual_summaries, drift_report, false_negative_breakdown, generate_cohort, global_agreement, gp_table,
    workload_from_events, AnnualSummary, CohortConfig, DriftFlag, FalseNegativeTally, GpRow, Period, ScreeningEvent,
    WorkloadCounterfactual,
};
use drscreen::attribution::{annotate_map, attribute_dr, ClusterParams};
use drscreen::calibration::{
    calibration_report, select_threshold, BetaCalibrator, CalibrationReport, Calibrator, IsotonicCalibrator,
};
use drscreen::enhancement::{enhance_with, ClaheParams, EnhanceParams};
use drscreen::gold_standard::{evaluate, LabeledEye};
use drscreen::metrics::{AgreementStats, BootstrapConfig};
use drscreen::orchestrator::{screen_batch, StudyInput};
use drscreen::{AnnotationCircle, Execution, FundusImage, Laterality};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::service::Service;
use crate::sidecar::Sidecar;
use crate::state::State;
use crate::store::read_log;

#[derive(Debug, Parser)]
#[command(name = "drscreen", version, about = "Diabetic-retinopathy screening toolkit")]
pub struct Cli {
    /// Service configuration file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run data-parallel loops sequentially.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Screen every sidecar in a directory and write proposals as JSONL.
    Screen {
        dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Crop, stretch and CLAHE-equalize one image.
    Enhance {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "8x8", value_parser = parse_tiles)]
        tiles: (u32, u32),
        #[arg(long, default_value_t = 2.0)]
        clip: f64,
        #[arg(long, default_value_t = 1.0)]
        lo: f64,
        #[arg(long, default_value_t = 99.0)]
        hi: f64,
    },
    /// Lesion circles from Integrated Gradients on one image.
    Annotate {
        input: PathBuf,
        /// Annotation JSON.
        #[arg(short, long)]
        output: PathBuf,
        /// Also write `cx,cy,r` rows.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Fit a calibrator from `score,label` CSV rows.
    Calibrate {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Beta)]
        method: Method,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Threshold maximizing mean recall over `score,label` CSV rows.
    ChooseThreshold {
        input: PathBuf,
        /// Apply this calibrator to the scores first.
        #[arg(long)]
        calibrator: Option<PathBuf>,
    },
    /// Evaluate the system against expert labels (labeled-eyes JSONL).
    EvaluateGold {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        t_prime: f64,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Annual, per-GP, workload, false-negative and drift reports from an event log.
    AnalyzeProgram {
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        from: Option<NaiveDate>,
        #[arg(long)]
        to: Option<NaiveDate>,
        #[arg(long, default_value_t = 3.0)]
        k: f64,
        #[arg(long, default_value_t = 3)]
        min_history: usize,
    },
    /// Synthetic screening program: events, latent truth and optional images.
    GenCohort {
        /// Cohort configuration (JSON); defaults otherwise.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Write sidecars and PNGs for every study here.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        image_size: u32,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Beta,
    Isotonic,
}

fn parse_tiles(s: &str) -> Result<(u32, u32), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got {s}"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v}: {e}"));
    Ok((parse(r)?, parse(c)?))
}

pub fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    let config = match &cli.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    match cli.command {
        Command::Screen { dir, output } => screen(&config, exec, &dir, &output),
        Command::Enhance { input, output, tiles, clip, lo, hi } => {
            let params = EnhanceParams { lo_pct: lo, hi_pct: hi, clahe: ClaheParams { tiles, clip } };
            enhance(&input, &output, &params, exec)
        }
        Command::Annotate { input, output, csv, steps } => {
            annotate(&config, exec, &input, &output, csv.as_deref(), steps)
        }
        Command::Calibrate { input, method, output, bins } => calibrate(&input, method, &output, bins),
        Command::ChooseThreshold { input, calibrator } => choose_threshold(&input, calibrator.as_deref()),
        Command::EvaluateGold { input, output, t_prime, resamples, seed } => {
            let cfg = BootstrapConfig { resamples, seed, ..Default::default() };
            evaluate_gold(&input, output.as_deref(), t_prime, &cfg, exec)
        }
        Command::AnalyzeProgram { input, out_dir, from, to, k, min_history } => {
            let report = analyze_program(&input, Period { from, to }, k, min_history, exec)?;
            report.write(&out_dir)?;
            print_summary(&report);
            Ok(())
        }
        Command::GenCohort { cohort, n, seed, output, truth, images, image_size } => {
            let mut cfg = match cohort {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => CohortConfig::default(),
            };
            if let Some(n) = n {
                cfg.n_studies = n;
            }
            gen_cohort(&cfg, seed, &output, truth.as_deref(), images.as_deref(), image_size)
        }
        Command::Serve { addr } => serve(&config, &addr),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(f.flush()?)
}

fn screen(config: &ServiceConfig, exec: Execution, dir: &Path, output: &Path) -> Result<()> {
    let backend = config.backend_spec()?.build(config.seed, config.inference_timeout())?;
    let orchestrator = config.orchestrator(exec);
    let mut sidecars: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    sidecars.sort();

    let mut inputs = Vec::new();
    let mut rejected: Vec<(String, String)> = Vec::new();
    for path in &sidecars {
        let name = path.display().to_string();
        let sidecar: Sidecar = match std::fs::read(path)
            .map_err(anyhow::Error::from)
            .and_then(|b| serde_json::from_slice(&b).map_err(anyhow::Error::from))
        {
            Ok(s) => s,
            Err(e) => {
                rejected.push((name, e.to_string()));
                continue;
            }
        };
        match sidecar.load_from_dir(dir) {
            Ok(eyes) => inputs.push(StudyInput { study_id: sidecar.study_id.clone(), eyes }),
            Err(e) => rejected.push((sidecar.study_id.clone(), e.to_string())),
        }
    }

    let results = screen_batch(&inputs, backend.as_ref(), &orchestrator, exec);
    let mut out = BufWriter::new(File::create(output).with_context(|| format!("creating {}", output.display()))?);
    let mut failures = rejected.len();
    for (input, result) in inputs.iter().zip(results) {
        match result {
            Ok(p) => serde_json::to_writer(&mut out, &p)?,
            Err(e) => {
                failures += 1;
                serde_json::to_writer(
                    &mut out,
                    &serde_json::json!({"study_id": input.study_id, "error": e.to_string()}),
                )?
            }
        }
        out.write_all(b"\n")?;
    }
    for (id, err) in &rejected {
        serde_json::to_writer(&mut out, &serde_json::json!({"study_id": id, "error": err}))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    eprintln!("screened {} studies, {} failed", inputs.len() + rejected.len(), failures);
    if failures > 0 {
        bail!("{failures} studies could not be screened");
    }
    Ok(())
}

fn enhance(input: &Path, output: &Path, params: &EnhanceParams, exec: Execution) -> Result<()> {
    if !params.clahe.is_valid() || !(0.0..100.0).contains(&params.lo_pct) || params.hi_pct <= params.lo_pct {
        bail!("invalid enhancement parameters {params:?}");
    }
    let img = image::open(input).with_context(|| format!("opening {}", input.display()))?.to_rgb8();
    let out = enhance_with(&img, params, exec);
    out.image.save(output).with_context(|| format!("writing {}", output.display()))?;
    println!("{}", serde_json::to_string(&out.geometry)?);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationOutput {
    pub image: String,
    pub backend: String,
    pub dr_prob: f64,
    pub clustering: ClusterParams,
    pub annotations: Vec<AnnotationCircle>,
}

fn annotate(
    config: &ServiceConfig,
    exec: Execution,
    input: &Path,
    output: &Path,
    csv_out: Option<&Path>,
    steps: usize,
) -> Result<()> {
    let backend = config.backend_spec()?.build(config.seed, config.inference_timeout())?;
    let rgb = image::open(input).with_context(|| format!("opening {}", input.display()))?.to_rgb8();
    let image = FundusImage::new(input.display().to_string(), rgb, Laterality::Left, 0);
    let map = attribute_dr(backend.as_ref(), &image, steps, exec)?;
    let annotations = annotate_map(&map, &config.clustering);
    let out = AnnotationOutput {
        image: image.image_id.clone(),
        backend: backend.name().to_string(),
        dr_prob: backend.score_dr(&image)?,
        clustering: config.clustering,
        annotations,
    };
    write_json(output, &out)?;
    if let Some(path) = csv_out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["cx", "cy", "r"])?;
        for c in &out.annotations {
            w.serialize((c.cx, c.cy, c.r))?;
        }
        w.flush()?;
    }
    println!("{} annotation(s)", out.annotations.len());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    score: f64,
    label: String,
}

/// Reads `score,label` rows; labels are `0/1` or `true/false`.
pub fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, row) in reader.deserialize::<ScoreRow>().enumerate() {
        let row = row.with_context(|| format!("row {}", i + 2))?;
        let label = match row.label.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => bail!("row {}: label must be 0/1 or true/false, got {other:?}", i + 2),
        };
        scores.push(row.score);
        labels.push(label);
    }
    Ok((scores, labels))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationOutput {
    pub calibrator: Calibrator,
    pub before: CalibrationReport,
    pub after: CalibrationReport,
}

fn calibrate(input: &Path, method: Method, output: &Path, bins: usize) -> Result<()> {
    let (scores, labels) = read_scores(input)?;
    let calibrator = match method {
        Method::Beta => Calibrator::Beta(BetaCalibrator::fit(&scores, &labels)?),
        Method::Isotonic => Calibrator::Isotonic(IsotonicCalibrator::fit(&scores, &labels)?),
    };
    let mapped: Vec<f64> = scores.iter().map(|&p| calibrator.predict(p)).collect();
    let before = calibration_report(&scores, &labels, bins)?;
    let after = calibration_report(&mapped, &labels, bins)?;
    eprintln!("ECE {:.4} -> {:.4}, Brier {:.4} -> {:.4}", before.ece, after.ece, before.brier, after.brier);
    write_json(output, &CalibrationOutput { calibrator, before, after })
}

fn load_calibrator(path: &Path) -> Result<Calibrator> {
    let text = std::fs::read_to_string(path)?;
    // Accept both a bare calibrator and the output of `calibrate`.
    if let Ok(out) = serde_json::from_str::<CalibrationOutput>(&text) {
        return Ok(out.calibrator);
    }
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn choose_threshold(input: &Path, calibrator: Option<&Path>) -> Result<()> {
    let (mut scores, labels) = read_scores(input)?;
    if let Some(path) = calibrator {
        let c = load_calibrator(path)?;
        scores.iter_mut().for_each(|s| *s = c.predict(*s));
    }
    let choice = select_threshold(&scores, &labels)?;
    println!("{}", serde_json::to_string_pretty(&choice)?);
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn evaluate_gold(
    input: &Path,
    output: Option<&Path>,
    t_prime: f64,
    cfg: &BootstrapConfig,
    exec: Execution,
) -> Result<()> {
    let eyes: Vec<LabeledEye> = read_jsonl(input)?;
    let report = evaluate(&eyes, t_prime, cfg, exec)?;
    match output {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    for (task, m) in &report.tasks {
        let pct = |c: &Option<drscreen::metrics::BootstrapCI>| {
            c.map(|c| format!("{:.1}% [{:.1}, {:.1}]", c.point * 100.0, c.lo * 100.0, c.hi * 100.0))
                .unwrap_or_else(|| "-".into())
        };
        eprintln!("{:<18} n={:<5} sens {}  spec {}", task.name(), m.n, pct(&m.sensitivity), pct(&m.specificity));
    }
    Ok(())
}

/// Reads analytics records from either a service event log or a plain
/// `ScreeningEvent` JSONL file.
pub fn load_screening_events(path: &Path) -> Result<Vec<ScreeningEvent>> {
    let first = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?)
        .lines()
        .map_while(|l| l.ok())
        .find(|l| !l.trim().is_empty());
    let is_store = first
        .as_deref()
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .is_some_and(|v| v.get("sequence_number").is_some());
    if is_store {
        let contents = read_log(path)?;
        if contents.discarded_tail {
            tracing::warn!(path = %path.display(), "ignoring incomplete trailing event");
        }
        Ok(State::replay(&contents.events)?.screening_events())
    } else {
        read_jsonl(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramReport {
    pub n_events: usize,
    pub annual: Vec<AnnualSummary>,
    pub period: Period,
    pub gp_table: Vec<GpRow>,
    pub global_agreement: Option<AgreementStats>,
    pub workload: Option<WorkloadCounterfactual>,
    pub false_negatives: FalseNegativeTally,
    pub drift: Vec<DriftFlag>,
}

impl ProgramReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("report.json"), self)?;
        write_json(&dir.join("annual.json"), &self.annual)?;
        write_json(&dir.join("gp_table.json"), &self.gp_table)?;
        write_json(&dir.join("workload.json"), &self.workload)?;
        write_json(&dir.join("false_negatives.json"), &self.false_negatives)?;
        write_json(&dir.join("drift.json"), &self.drift)?;

        let mut gp = String::from(GpRow::CSV_HEADER);
        gp.push('\n');
        for row in &self.gp_table {
            gp.push_str(&row.to_csv());
            gp.push('\n');
        }
        std::fs::write(dir.join("gp_table.csv"), gp)?;

        let mut w = csv::Writer::from_path(dir.join("annual.csv"))?;
        for a in &self.annual {
            w.serialize(AnnualCsv::from(a))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct AnnualCsv {
    year: i32,
    n_studies: usize,
    gp_referral_rate: f64,
    ai_referral_rate: f64,
    ai_dr_rate: f64,
    ai_nongradable_rate: f64,
    exam_rate: f64,
    kappa_gp_vs_ai: Option<f64>,
}

impl From<&AnnualSummary> for AnnualCsv {
    fn from(a: &AnnualSummary) -> Self {
        AnnualCsv {
            year: a.year,
            n_studies: a.n_studies,
            gp_referral_rate: a.gp_referral_rate,
            ai_referral_rate: a.ai_referral_rate,
            ai_dr_rate: a.ai_dr_rate,
            ai_nongradable_rate: a.ai_nongradable_rate,
            exam_rate: a.exam_rate,
            kappa_gp_vs_ai: a.kappa_gp_vs_ai,
        }
    }
}

pub fn analyze_program(
    path: &Path,
    period: Period,
    k: f64,
    min_history: usize,
    exec: Execution,
) -> Result<ProgramReport> {
    let events = load_screening_events(path)?;
    analyze_events(&events, period, k, min_history, exec)
}

pub fn analyze_events(
    events: &[ScreeningEvent],
    period: Period,
    k: f64,
    min_history: usize,
    exec: Execution,
) -> Result<ProgramReport> {
    let workload = match workload_from_events(events) {
        Ok(w) => Some(w),
        Err(drscreen::analytics::AnalyticsError::ZeroAiReferred) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(ProgramReport {
        n_events: events.len(),
        annual: annual_summaries(events, exec),
        period,
        gp_table: gp_table(events, period)?,
        global_agreement: global_agreement(events, period)?,
        workload,
        false_negatives: false_negative_breakdown(events),
        drift: drift_report(events, k, min_history),
    })
}

fn print_summary(r: &ProgramReport) {
    println!("{} studies", r.n_events);
    for a in &r.annual {
        println!(
            "{}  n={:<6} gp {:>6.2}%  ai {:>6.2}% (dr {:.2}%, ng {:.2}%)  exams {:>6.2}%  kappa {}",
            a.year,
            a.n_studies,
            a.gp_referral_rate * 100.0,
            a.ai_referral_rate * 100.0,
            a.ai_dr_rate * 100.0,
            a.ai_nongradable_rate * 100.0,
            a.exam_rate * 100.0,
            a.kappa_gp_vs_ai.map_or("-".into(), |k| format!("{k:.3}"))
        );
    }
    if let Some(w) = &r.workload {
        println!(
            "workload: {} visualizations now, {} autonomous, reduction x{:.2}",
            w.current_visualizations, w.autonomous_visualizations, w.reduction_factor
        );
    }
    let flagged = r.drift.iter().filter(|d| d.referral || d.nongradable).count();
    println!("drift: {flagged} flagged month(s)");
}

fn gen_cohort(
    cfg: &CohortConfig,
    seed: u64,
    output: &Path,
    truth: Option<&Path>,
    images: Option<&Path>,
    image_size: u32,
) -> Result<()> {
    let records = generate_cohort(cfg, seed)?;
    let mut events = BufWriter::new(File::create(output).with_context(|| format!("creating {}", output.display()))?);
    for r in &records {
        serde_json::to_writer(&mut events, &r.event)?;
        events.write_all(b"\n")?;
    }
    events.flush()?;
    if let Some(path) = truth {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &records {
            serde_json::to_writer(&mut w, &serde_json::json!({"study_id": r.event.study_id, "truth": r.truth}))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    if let Some(dir) = images {
        std::fs::create_dir_all(dir)?;
        for (i, r) in records.iter().enumerate() {
            crate::cohort::write_study(dir, r, image_size, seed.wrapping_add(i as u64))?;
        }
    }
    eprintln!("generated {} studies", records.len());
    Ok(())
}

fn serve(config: &ServiceConfig, addr: &str) -> Result<()> {
    // The remote backend's blocking client must be built outside the runtime.
    let service = Arc::new(Service::open(config)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on {}", listener.local_addr()?);
        crate::api::serve(service, listener).await?;
        Ok(())
    })
}
