//! Dataset, training and evaluation subcommands.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use cxr_core::datakit::{
    generate_synthetic_biased, load_manifest, site_composition_report, stratified_kfold, DatasetManifest,
    FindingsTable, FoldAssignment, GrayImage, Label, PixelStore, SyntheticConfig,
};
use cxr_core::evalkit::{balanced_accuracy, roc_auc, PredictionSet};
use cxr_core::trainer::{
    self, extract_features, fit_to_encoder, pretrain_findings, train_covid_head, EncoderCheckpoint, FindingsDataset,
    TrainConfig,
};
use ndarray::Array2;

use crate::{CliError, ConfigFile, Output};

fn data_err(context: impl Display) -> impl FnOnce(String) -> CliError {
    move |e| CliError::data(format!("{context}: {e}"))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    load_manifest(path).map_err(|e| CliError::data(e.to_string()))
}

fn images(manifest: &DatasetManifest) -> Result<Vec<GrayImage>, CliError> {
    let store = PixelStore::load(manifest).map_err(|e| CliError::data(e.to_string()))?;
    Ok(manifest
        .records()
        .iter()
        .map(|r| store.get(&r.id).expect("loaded from this manifest").to_gray())
        .collect())
}

fn train_config(config: &ConfigFile, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = config.section("train")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (manifest.csv, findings.csv, meta.csv, images/).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub sites: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Probability that a sample comes from a site aligned with its class.
    #[arg(long)]
    pub rho: Option<f64>,
}

pub fn synth(a: SynthArgs, config: &ConfigFile, seed: Option<u64>) -> Result<Output, CliError> {
    let mut cfg: SyntheticConfig = config.section("synth")?;
    cfg.n_per_class = a.n_per_class.unwrap_or(cfg.n_per_class);
    cfg.n_sites = a.sites.unwrap_or(cfg.n_sites);
    cfg.image_size = a.size.unwrap_or(cfg.image_size);
    cfg.bias_correlation = a.rho.unwrap_or(cfg.bias_correlation);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let data = generate_synthetic_biased(&cfg).map_err(|e| CliError::data(e.to_string()))?;
    let artifacts = data
        .write_to_dir(&a.out)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let conflicting = data.samples.iter().filter(|m| m.bias_conflicting).count();
    Ok(Output {
        summary: format!(
            "wrote {} images ({} bias-conflicting) from {} sites to {}\n",
            data.samples.len(),
            conflicting,
            cfg.n_sites,
            a.out.display()
        ),
        artifacts,
    })
}

#[derive(Debug, Args)]
pub struct CompositionArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn report_composition(a: CompositionArgs) -> Result<Output, CliError> {
    let report = site_composition_report(&manifest(&a.manifest)?);
    let mut artifacts = vec![];
    if let Some(path) = a.csv {
        write_file(&path, &report.to_csv_string())?;
        artifacts.push(path);
    }
    Ok(Output {
        summary: report.to_string(),
        artifacts,
    })
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Fold file to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn split(a: SplitArgs, seed: Option<u64>) -> Result<Output, CliError> {
    let m = manifest(&a.manifest)?;
    let folds = stratified_kfold(&m, a.k, seed.unwrap_or(0)).map_err(|e| CliError::data(e.to_string()))?;
    write_file(&a.out, &folds.to_csv_string())?;
    let mut summary = String::new();
    for w in &folds.warnings {
        let _ = writeln!(summary, "warning: {w}");
    }
    for f in 0..a.k {
        let _ = writeln!(summary, "fold {f}: {} records", folds.ids_in_fold(f).len());
    }
    Ok(Output {
        summary,
        artifacts: vec![a.out],
    })
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Findings table (id plus one column per finding).
    #[arg(long)]
    pub findings: PathBuf,
    /// Encoder checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `pretrain_epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn pretrain(a: PretrainArgs, config: &ConfigFile, seed: Option<u64>) -> Result<Output, CliError> {
    let mut cfg = train_config(config, seed)?;
    cfg.pretrain_epochs = a.epochs.unwrap_or(cfg.pretrain_epochs);
    let m = manifest(&a.manifest)?;
    let pixels = PixelStore::load(&m).map_err(|e| CliError::data(e.to_string()))?;
    let findings = FindingsTable::load(&a.findings).map_err(|e| CliError::data(e.to_string()))?;
    let data = FindingsDataset::from_parts(&m, &pixels, &findings, cfg.uncertain_policy)?;
    let (encoder, report) = pretrain_findings(&data, &cfg)?;
    encoder.save(&a.out)?;
    let mut summary = format!(
        "pretrained on {} images ({} held out), {} epochs\n",
        report.n_train,
        report.n_holdout,
        report.epoch_losses.len()
    );
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(summary, "epoch {e}: train loss {loss:.6}");
    }
    let _ = writeln!(
        summary,
        "holdout loss {:.6} -> {:.6}",
        report.initial_holdout_loss, report.final_holdout_loss
    );
    let _ = writeln!(summary, "encoder written to {}", a.out.display());
    Ok(Output {
        summary,
        artifacts: vec![a.out],
    })
}

/// Features, labels and site indices of the labelled records.
fn labelled_features(
    m: &DatasetManifest,
    encoder: &EncoderCheckpoint,
) -> Result<(Array2<f64>, Vec<bool>, Vec<usize>), CliError> {
    let labelled = m.subset(|r| r.label != Label::Unknown);
    let imgs = fit_to_encoder(encoder, &images(&labelled)?);
    let features = extract_features(encoder, &imgs)?;
    let labels = labelled.records().iter().map(|r| r.label == Label::Positive).collect();
    let sites = labelled
        .records()
        .iter()
        .map(|r| m.site_index(&r.site).expect("manifest invariant"))
        .collect();
    Ok((features, labels, sites))
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Head checkpoint to write; the curve goes next to it as `<out>.curve.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the FairKL weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Overrides `epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn train_head(a: TrainHeadArgs, config: &ConfigFile, seed: Option<u64>) -> Result<Output, CliError> {
    let mut cfg = train_config(config, seed)?;
    cfg.lambda = a.lambda.unwrap_or(cfg.lambda);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.validate()?;
    let m = manifest(&a.manifest)?;
    let encoder = EncoderCheckpoint::load(&a.encoder)?;
    let (features, labels, sites) = labelled_features(&m, &encoder)?;
    let head = train_covid_head(
        features.view(),
        &labels,
        &sites,
        m.site_vocabulary().len(),
        &encoder,
        &cfg,
    )?;
    head.save(&a.out)?;
    let last = head.curve.rows.last().expect("at least one epoch");
    let curve = trainer::HeadCheckpoint::curve_path(&a.out);
    Ok(Output {
        summary: format!(
            "trained head on {} images, lambda {}: final bce {:.6}, fairkl {:.6}, total {:.6}\nhead written to {}\n",
            labels.len(),
            cfg.lambda,
            last.bce,
            last.fairkl,
            last.total,
            a.out.display()
        ),
        artifacts: vec![a.out, curve],
    })
}

#[derive(Debug, Args)]
pub struct CrossValidateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold file from `split`.
    #[arg(long)]
    pub folds: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Metric table CSV (method x site balanced accuracy).
    #[arg(long)]
    pub out: PathBuf,
    /// Out-of-fold predictions CSV, readable by `evaluate`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// FairKL weight of the `fairkl` method.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn cross_validate(a: CrossValidateArgs, config: &ConfigFile, seed: Option<u64>) -> Result<Output, CliError> {
    let mut cfg = train_config(config, seed)?;
    cfg.lambda = a.lambda.unwrap_or(if cfg.lambda == 0.0 { 1.0 } else { cfg.lambda });
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.validate()?;
    let m = manifest(&a.manifest)?;
    let folds = FoldAssignment::load(&a.folds).map_err(|e| CliError::data(format!("{}: {e}", a.folds.display())))?;
    let encoder = EncoderCheckpoint::load(&a.encoder)?;
    let features = extract_features(&encoder, &fit_to_encoder(&encoder, &images(&m)?))?;
    let report = trainer::cross_validate(&m, &folds, features.view(), &encoder, &cfg)?;
    write_file(&a.out, &report.table.to_csv_string())?;
    let mut artifacts = vec![a.out];
    if let Some(p) = a.predictions {
        write_file(&p, &report.predictions_csv())?;
        artifacts.push(p);
    }
    let mut summary = String::new();
    for w in &report.warnings {
        let _ = writeln!(summary, "warning: {w}");
    }
    let _ = write!(summary, "{}", report.table);
    Ok(Output { summary, artifacts })
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// CSV with `id`, `score`, `label` and optional `site` and `method` columns.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Decision threshold: positive iff score > threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Write `group,site,n,balanced_accuracy,auc` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Splits a predictions CSV by its `method` column; a file without one is a single group `all`.
fn split_by_method(text: &str) -> Result<Vec<(String, PredictionSet)>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| CliError::data(e.to_string()))?.clone();
    let Some(mc) = headers.iter().position(|h| h.trim() == "method") else {
        return Ok(vec![(
            "all".into(),
            PredictionSet::parse(text).map_err(|e| CliError::data(e.to_string()))?,
        )]);
    };
    let mut groups: Vec<(String, csv::Writer<Vec<u8>>)> = vec![];
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::data(e.to_string()))?;
        let method = rec.get(mc).unwrap_or_default().trim().to_string();
        let idx = match groups.iter().position(|(m, _)| *m == method) {
            Some(i) => i,
            None => {
                let mut w = csv::Writer::from_writer(vec![]);
                w.write_record(&headers).expect("in-memory write");
                groups.push((method, w));
                groups.len() - 1
            }
        };
        groups[idx].1.write_record(&rec).expect("in-memory write");
    }
    groups
        .into_iter()
        .map(|(m, w)| {
            let bytes = w.into_inner().expect("in-memory flush");
            let set = PredictionSet::parse(&String::from_utf8_lossy(&bytes))
                .map_err(|e| CliError::data(format!("method `{m}`: {e}")))?;
            Ok((m, set))
        })
        .collect()
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn evaluate(a: EvaluateArgs) -> Result<Output, CliError> {
    let text = fs::read_to_string(&a.predictions).map_err(|e| data_err(a.predictions.display())(e.to_string()))?;
    let groups = split_by_method(&text).map_err(|e| data_err(a.predictions.display())(e.message))?;
    let mut csv = String::from("group,site,n,balanced_accuracy,auc\n");
    let mut summary = format!(
        "{:<12} {:<12} {:>6} {:>10} {:>10}\n",
        "group", "site", "n", "bal.acc", "auc"
    );
    for (group, set) in &groups {
        let mut parts: Vec<(String, Vec<usize>)> = vec![("all".into(), (0..set.len()).collect())];
        if let Some(sites) = &set.sites {
            let mut by_site: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, s) in sites.iter().enumerate() {
                by_site.entry(s).or_default().push(i);
            }
            parts.extend(by_site.into_iter().map(|(s, idx)| (s.to_string(), idx)));
        }
        let decisions = set.decisions(a.threshold);
        for (site, idx) in parts {
            let labels: Vec<bool> = idx.iter().map(|&i| set.labels[i]).collect();
            let preds: Vec<bool> = idx.iter().map(|&i| decisions[i]).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| set.scores[i]).collect();
            let ba = balanced_accuracy(&preds, &labels).ok();
            let auc = roc_auc(&scores, &labels).ok();
            let _ = writeln!(
                csv,
                "{group},{site},{},{},{}",
                idx.len(),
                fmt_metric(ba),
                fmt_metric(auc)
            );
            let _ = writeln!(
                summary,
                "{group:<12} {site:<12} {:>6} {:>10} {:>10}",
                idx.len(),
                ba.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
                auc.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
            );
        }
    }
    let mut artifacts = vec![];
    if let Some(out) = a.out {
        write_file(&out, &csv)?;
        artifacts.push(out);
    }
    Ok(Output { summary, artifacts })
}
