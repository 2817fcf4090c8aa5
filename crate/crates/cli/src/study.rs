//! `cxr study ...`: serve, simulate and analyze reader studies.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Subcommand};
use cxr_core::evalkit::{arm_comparison, parse_events_csv, parse_truth_csv, truth_to_csv, Arm, DEFAULT_TIME_CAP_S};
use cxr_study::simulate::{run_simulation, SimulationConfig};
use cxr_study::{http, StudyService, SystemClock};

use crate::pipeline::write_file;
use crate::{CliError, ConfigFile, Output};

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Run the reader-study HTTP service.
    Serve(ServeArgs),
    /// Play scripted virtual readers through a fresh study.
    Simulate(SimulateArgs),
    /// Compare the blind and assisted arms of an exported event table.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory holding the study journals.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Address to listen on; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Service data directory for the simulated study (journal and DICOM images).
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Directory for `events.csv` and `truth.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub study_id: Option<String>,
    #[arg(long)]
    pub readers: Option<usize>,
    #[arg(long)]
    pub images: Option<usize>,
    /// Standard deviation of blind-arm severity noise.
    #[arg(long)]
    pub blind_noise: Option<f64>,
    /// Standard deviation of assisted-arm severity noise.
    #[arg(long)]
    pub assisted_noise: Option<f64>,
    #[arg(long)]
    pub washout_days: Option<u32>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Event table exported by the service.
    #[arg(long)]
    pub events: PathBuf,
    /// Ground truth `image,label`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Directory for the report CSVs.
    #[arg(long)]
    pub out: PathBuf,
    /// Readings longer than this many seconds are excluded from time statistics.
    #[arg(long, default_value_t = DEFAULT_TIME_CAP_S)]
    pub time_cap: f64,
}

pub fn run(cmd: StudyCommand, config: &ConfigFile, seed: Option<u64>) -> Result<Output, CliError> {
    match cmd {
        StudyCommand::Serve(a) => serve(a),
        StudyCommand::Simulate(a) => simulate(a, config, seed),
        StudyCommand::Analyze(a) => analyze(a),
    }
}

fn serve(a: ServeArgs) -> Result<Output, CliError> {
    let service = Arc::new(StudyService::open(&a.data_dir, Arc::new(SystemClock))?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::runtime(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| CliError::runtime(format!("bind {}: {e}", a.bind)))?;
        let addr = listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?;
        // scripts wait for this line before connecting
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        http::serve(listener, service, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::runtime(format!("server: {e}")))
    })?;
    Ok(Output {
        summary: "service stopped\n".into(),
        artifacts: vec![],
    })
}

fn simulate(a: SimulateArgs, config: &ConfigFile, seed: Option<u64>) -> Result<Output, CliError> {
    let mut cfg: SimulationConfig = config.section("simulate")?;
    cfg.study_id = a.study_id.unwrap_or(cfg.study_id);
    cfg.n_readers = a.readers.unwrap_or(cfg.n_readers);
    cfg.n_images = a.images.unwrap_or(cfg.n_images);
    cfg.blind_noise = a.blind_noise.unwrap_or(cfg.blind_noise);
    cfg.assisted_noise = a.assisted_noise.unwrap_or(cfg.assisted_noise);
    cfg.washout_days = a.washout_days.unwrap_or(cfg.washout_days);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let out = run_simulation(&cfg, &a.data_dir)?;
    let events = a.out.join("events.csv");
    let truth = a.out.join("truth.csv");
    write_file(&events, &out.events_csv)?;
    write_file(&truth, &truth_to_csv(&out.truth))?;
    Ok(Output {
        summary: format!(
            "simulated study `{}`: {} readers x {} images x 2 arms\nevents: {}\ntruth: {}\n",
            out.study_id,
            cfg.n_readers,
            cfg.n_images,
            events.display(),
            truth.display()
        ),
        artifacts: vec![events, truth],
    })
}

fn analyze(a: AnalyzeArgs) -> Result<Output, CliError> {
    let read = |p: &PathBuf| std::fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())));
    let events =
        parse_events_csv(&read(&a.events)?).map_err(|e| CliError::data(format!("{}: {e}", a.events.display())))?;
    let truth = parse_truth_csv(&read(&a.truth)?).map_err(|e| CliError::data(format!("{}: {e}", a.truth.display())))?;
    let cmp = arm_comparison(&events, &truth, a.time_cap).map_err(|e| CliError::data(e.to_string()))?;

    let mut artifacts = vec![];
    let mut put = |name: &str, text: &str| -> Result<(), CliError> {
        let p = a.out.join(name);
        write_file(&p, text)?;
        artifacts.push(p);
        Ok(())
    };
    put("per_reader.csv", &cmp.per_reader_csv())?;
    put("pooled.csv", &cmp.pooled_csv())?;
    put("time_pairs.csv", &cmp.time_pairs_csv())?;
    for arm in Arm::ALL {
        if let Some(roc) = cmp.roc_csv(arm) {
            put(&format!("roc_{arm}.csv"), &roc)?;
        }
    }

    let mut s = String::new();
    for w in &cmp.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    let _ = writeln!(
        s,
        "{} readings; {} over the {} s time cap",
        events.len(),
        cmp.flagged_readings,
        cmp.time_cap_s
    );
    for p in &cmp.pooled {
        let t = |v: Option<f64>| v.map(|x| format!("{x:.3} s")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<8} pooled AUC {:.4} over {} images; mean time {} per reading, {} per reader",
            p.arm.to_string(),
            p.auc,
            p.n_images,
            t(p.mean_time_per_reading_s),
            t(p.mean_time_per_reader_s)
        );
    }
    match (&cmp.regression, cmp.below_identity) {
        (Some(fit), Some(below)) => {
            let _ = writeln!(
                s,
                "assisted time = {:.4} x blind time + {:.4} s; line {} the identity",
                fit.slope,
                fit.intercept,
                if below { "below" } else { "not below" }
            );
        }
        _ => {
            let _ = writeln!(s, "time regression unavailable");
        }
    }
    Ok(Output { summary: s, artifacts })
}
