use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use flam_core::federation::{
    Coordinator, CoordinatorConfig, Participant, TcpCoordinatorTransport, TcpParticipantLink,
};
use flam_core::partition::partition;
use flam_core::predictors::{ingest_predictions, ingest_predictions_by_id, write_predictions};
use flam_core::report::{
    mode_values, report_records, run_sweep, value_records, write_csv, write_json, SweepBase, SweepConfig,
    REPORT_COLUMNS, SWEEP_COLUMNS, VALUE_COLUMNS,
};
use flam_core::synthetic::{ClassificationSetup, RegressionSetup};
use flam_core::{
    build_deviation_report, DeviationReport, EvalMode, Execution, LabeledPredictions, MetricSpec, SkewConfig,
    Task, WeightScheme,
};
use serde::Serialize;

use crate::args::{
    Command, CoordinatorArgs, EvaluateArgs, GenerateArgs, MetricArgs, ModeArg, ModelArgs, ParticipantArgs,
    PartitionArgs, ServeCommand, SkewArgs, SweepArgs,
};
use crate::error::CliError;

/// Largest tolerated |flam - centralized|.
const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

pub fn dispatch(command: Command, argv: &[String]) -> Result<(), CliError> {
    match command {
        Command::Partition(a) => cmd_partition(a, argv),
        Command::Generate(a) => cmd_generate(a, argv),
        Command::Evaluate(a) => cmd_evaluate(a, argv),
        Command::Sweep(a) => cmd_sweep(a, argv),
        Command::Serve(ServeCommand::Coordinator(a)) => cmd_coordinator(a, argv),
        Command::Serve(ServeCommand::Participant(a)) => cmd_participant(a),
    }
}

fn skew_config(a: &SkewArgs) -> Result<SkewConfig, CliError> {
    let cfg = SkewConfig {
        kind: a.kind.into(),
        alpha_quantity: a.alpha_quantity,
        alpha_label: a.alpha_label,
        participants: a.participants,
        seed: a.seed,
        shared_classes: a.shared_classes.clone(),
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn synthetic_base(task: Task, class_count: usize, skew: SkewConfig, m: &ModelArgs) -> SweepBase {
    match task {
        Task::Classification => SweepBase::Classification(ClassificationSetup {
            samples: m.samples,
            class_count,
            skew,
            accuracy: m.accuracy,
            accuracy_spread: m.accuracy_spread,
            kernel: m.kernel,
        }),
        Task::Regression => SweepBase::Regression(RegressionSetup {
            samples: m.samples,
            skew,
            station_shift: m.station_shift,
            bias: m.bias,
            bias_spread: m.bias_spread,
            noise_sigma: m.noise_sigma,
        }),
    }
}

fn resolve_specs(a: &MetricArgs, task: Task) -> Result<(Vec<MetricSpec>, Vec<WeightScheme>), CliError> {
    if !(0.0..=1.0).contains(&a.zero_division) {
        return Err(CliError::Usage(format!(
            "--zero-division must lie in [0, 1], got {}",
            a.zero_division
        )));
    }
    let specs = if a.metrics.is_empty() {
        match task {
            Task::Classification => MetricSpec::all_classification(),
            Task::Regression => vec![MetricSpec::r2()],
        }
    } else {
        a.metrics.clone()
    };
    let specs: Vec<MetricSpec> = specs.into_iter().map(|s| s.with_zero_division(a.zero_division)).collect();
    if let Some(bad) = specs.iter().find(|s| s.task() != task) {
        return Err(CliError::Usage(format!("metric `{bad}` does not apply to a {task} task")));
    }
    let schemes = if a.schemes.is_empty() {
        vec![WeightScheme::SampleCount]
    } else {
        a.schemes.clone()
    };
    Ok((specs, schemes))
}

/// Opens `path` for writing, or stdout.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => {
            let file = File::create(p).map_err(|e| CliError::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            Ok(Box::new(BufWriter::new(file)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn at(path: Option<&Path>) -> impl Fn(flam_core::Error) -> CliError + '_ {
    move |e| match path {
        Some(p) => CliError::input(p)(e),
        None => CliError::Core(e),
    }
}

fn emit<T: Serialize>(
    out: Option<&Path>,
    json: Option<&Path>,
    columns: &[&str],
    records: &[T],
) -> Result<(), CliError> {
    write_csv(sink(out)?, columns, records).map_err(at(out))?;
    if let Some(j) = json {
        write_json(sink(Some(j))?, records).map_err(at(Some(j)))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    arguments: &'a [String],
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Run timestamps live next to the output in `<out>.meta.json` so the
/// output itself stays byte-identical across reruns.
fn write_metadata(out: Option<&Path>, argv: &[String], started: u128) -> Result<(), CliError> {
    let Some(out) = out else {
        return Ok(());
    };
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    let path = PathBuf::from(name);
    let meta = Metadata {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        arguments: argv,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    };
    let mut w = sink(Some(&path))?;
    serde_json::to_writer_pretty(&mut w, &meta).map_err(|e| CliError::Core(e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Io { path, source: e })
}

fn cmd_partition(a: PartitionArgs, argv: &[String]) -> Result<(), CliError> {
    let started = now_ms();
    let cfg = skew_config(&a.skew)?;
    let labels = read_labels(&a.labels)?;
    let plan = partition(&labels, a.class_count, &cfg)?;
    let mut w = sink(a.out.as_deref())?;
    plan.write_csv(&mut w).map_err(at(a.out.as_deref()))?;
    drop(w);
    log::info!("partitioned {} samples into {:?}", plan.len(), plan.sizes());
    write_metadata(a.out.as_deref(), argv, started)
}

/// Reads the `label` column of a CSV file.
fn read_labels(path: &Path) -> Result<Vec<usize>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let fail = |line: u64, message: String| CliError::Input {
        path: path.to_path_buf(),
        source: flam_core::Error::Parse { line, message },
    };
    let headers = r.headers().map_err(|e| fail(1, e.to_string()))?.clone();
    let column = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| fail(1, "no `label` column".into()))?;
    let mut labels = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| fail(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = record.get(column).unwrap_or("");
        labels.push(
            cell.parse()
                .map_err(|_| fail(line, format!("label `{cell}` is not a non-negative integer")))?,
        );
    }
    Ok(labels)
}

fn cmd_generate(a: GenerateArgs, argv: &[String]) -> Result<(), CliError> {
    let started = now_ms();
    let skew = skew_config(&a.skew)?;
    let federation = synthetic_base(a.task, a.class_count, skew, &a.model).generate()?;
    let mut w = sink(a.out.as_deref())?;
    write_predictions(&mut w, &federation).map_err(at(a.out.as_deref()))?;
    drop(w);
    write_metadata(a.out.as_deref(), argv, started)
}

fn load_federation(a: &EvaluateArgs) -> Result<Vec<LabeledPredictions>, CliError> {
    match &a.input {
        Some(path) => ingest_predictions(path, a.task, a.class_count).map_err(CliError::input(path)),
        None => {
            let skew = skew_config(&a.skew)?;
            Ok(synthetic_base(a.task, a.class_count.unwrap_or(10), skew, &a.model).generate()?)
        }
    }
}

/// Fails when FLAM disagrees with centralized evaluation anywhere.
fn check_equivalence(report: &DeviationReport) -> Result<(), CliError> {
    for row in &report.rows {
        match (row.centralized, row.flam) {
            (Some(c), Some(f)) if (c - f).abs() > EQUIVALENCE_TOLERANCE => {
                return Err(CliError::Equivalence(format!(
                    "{}: centralized {c}, flam {f}",
                    row.metric
                )))
            }
            (Some(_), None) | (None, Some(_)) => {
                return Err(CliError::Equivalence(format!(
                    "{}: only one of centralized and flam is defined ({})",
                    row.metric,
                    row.error.as_deref().unwrap_or("")
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, argv: &[String]) -> Result<(), CliError> {
    let started = now_ms();
    let (specs, schemes) = resolve_specs(&a.metrics, a.task)?;
    let federation = load_federation(&a)?;
    let report = build_deviation_report(&federation, &specs, &schemes)?;
    check_equivalence(&report)?;
    let (out, json) = (a.out.as_deref(), a.json.as_deref());
    match a.mode {
        ModeArg::Report => emit(out, json, &REPORT_COLUMNS, &report_records(&report))?,
        ModeArg::Centralized => emit(out, json, &VALUE_COLUMNS, &mode_values(&report, EvalMode::Centralized))?,
        ModeArg::WeightedAverage => {
            emit(out, json, &VALUE_COLUMNS, &mode_values(&report, EvalMode::WeightedAverage))?
        }
        ModeArg::Flam => emit(out, json, &VALUE_COLUMNS, &mode_values(&report, EvalMode::Flam))?,
    }
    log::info!(
        "{} participants, max |weighted - centralized| {:.6}, max |flam - centralized| {:.1e}",
        federation.len(),
        report.max_weighted_deviation(),
        report.max_flam_deviation()
    );
    write_metadata(out, argv, started)
}

fn cmd_sweep(a: SweepArgs, argv: &[String]) -> Result<(), CliError> {
    let started = now_ms();
    if a.seeds.0.is_empty() {
        return Err(CliError::Usage("--seeds selects no seeds".into()));
    }
    let (specs, schemes) = resolve_specs(&a.metrics, a.task)?;
    // alphas are filled in per cell; a placeholder keeps validation happy
    let mut skew_args = a.skew.clone();
    let placeholder = a.alphas.first().copied();
    skew_args.alpha_label = skew_args.alpha_label.or(placeholder);
    skew_args.alpha_quantity = skew_args.alpha_quantity.or(placeholder);
    let skew = skew_config(&skew_args)?;
    let config = SweepConfig {
        base: synthetic_base(a.task, a.class_count, skew, &a.model),
        alphas: a.alphas.clone(),
        seeds: a.seeds.0.clone(),
        specs,
        schemes,
    };
    let exec = if a.sequential { Execution::Sequential } else { Execution::Parallel };
    let outcome = run_sweep(&config, exec)?;
    for cell in &outcome.cells {
        check_equivalence(&cell.report)
            .map_err(|e| CliError::Equivalence(format!("alpha {} seed {}: {e}", cell.alpha, cell.seed)))?;
    }
    emit(a.out.as_deref(), a.json.as_deref(), &SWEEP_COLUMNS, &outcome.records())?;
    for spec in &config.specs {
        for &scheme in &config.schemes {
            for &alpha in &config.alphas {
                if let Some(mean) = outcome.mean_deviation(alpha, spec, scheme) {
                    log::info!("{spec} {scheme} alpha {alpha}: mean deviation {mean:.6}");
                }
            }
        }
    }
    write_metadata(a.out.as_deref(), argv, started)
}

fn shutdown_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let handler_flag = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        log::warn!("shutdown requested");
        handler_flag.store(true, Ordering::SeqCst);
    }) {
        log::warn!("no signal handler installed: {e}");
    }
    flag
}

fn cmd_coordinator(a: CoordinatorArgs, argv: &[String]) -> Result<(), CliError> {
    let started = now_ms();
    if a.participants == 0 {
        return Err(CliError::Usage("--participants must be at least 1".into()));
    }
    let (specs, _) = resolve_specs(&a.metrics, a.task)?;
    let shutdown = shutdown_flag();
    let listener = TcpListener::bind(&a.addr).map_err(|e| CliError::Io {
        path: PathBuf::from(&a.addr),
        source: e,
    })?;
    log::info!("listening on {}", listener.local_addr().map_or(a.addr.clone(), |s| s.to_string()));
    let mut transport = TcpCoordinatorTransport::accept(
        &listener,
        a.participants,
        Duration::from_millis(a.registration_timeout_ms),
        Some(shutdown.clone()),
    )
    .map_err(flam_core::Error::from)?;
    let config = CoordinatorConfig {
        phase_timeout: Duration::from_millis(a.phase_timeout_ms),
        allow_partial: a.allow_partial,
        shutdown: Some(shutdown),
    };
    let outcome = Coordinator::new(config)
        .expecting(a.task, a.class_count)
        .run_round(&mut transport, &specs)?;
    drop(transport);
    log::info!("round {} aggregated participants {:?}", outcome.round_id, outcome.participants);
    emit(a.out.as_deref(), a.json.as_deref(), &VALUE_COLUMNS, &value_records(&outcome.values))?;
    write_metadata(a.out.as_deref(), argv, started)
}

fn cmd_participant(a: ParticipantArgs) -> Result<(), CliError> {
    if let Err(e) = ctrlc::set_handler(|| std::process::exit(130)) {
        log::warn!("no signal handler installed: {e}");
    }
    let all = ingest_predictions_by_id(&a.input, a.task, a.class_count).map_err(CliError::input(&a.input))?;
    let data = match all.iter().find(|(id, _)| *id == a.id) {
        Some((_, data)) => data.clone(),
        None => {
            log::warn!("{} has no rows for participant {}", a.input.display(), a.id);
            all[0].1.empty_like()
        }
    };
    let mut participant = Participant::new(a.id, data);
    if let Some(v) = a.schema_version {
        participant = participant.with_schema_version(v);
    }
    let mut link = TcpParticipantLink::connect(a.addr.as_str(), Duration::from_millis(a.connect_timeout_ms))
        .map_err(flam_core::Error::from)?;
    match participant.serve(&mut link).map_err(flam_core::Error::from)? {
        Some(values) => emit(None, None, &VALUE_COLUMNS, &value_records(&values)),
        None => Err(CliError::Aborted("the coordinator closed the connection without results".into())),
    }
}
