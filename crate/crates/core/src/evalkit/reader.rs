//! Reader-study analysis: mean-reader severity AUC, per-reader breakouts and
//! blind-versus-assisted timing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::metrics::{roc_auc, roc_curve, MetricError, RocPoint};

/// Maximum Brixia-style severity.
pub const MAX_SEVERITY: u8 = 18;
/// Readings slower than this are flagged and left out of time summaries.
pub const DEFAULT_TIME_CAP_S: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Blind,
    Assisted,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Blind, Arm::Assisted];
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Blind => "blind",
            Arm::Assisted => "assisted",
        })
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "blind" => Ok(Arm::Blind),
            "assisted" => Ok(Arm::Assisted),
            other => Err(format!("unknown arm `{other}` (expected blind or assisted)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingEvent {
    pub study: String,
    pub reader: String,
    pub image: String,
    pub arm: Arm,
    pub severity: u8,
    pub displayed_at: DateTime<Utc>,
    pub submitted_at: DateTime<Utc>,
    pub duration_s: f64,
    pub report_shown: bool,
}

pub const EVENT_CSV_HEADER: &str = "study,reader,image,arm,severity,displayed_at,submitted_at,duration_s,report_shown";

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Seconds between two instants at millisecond resolution.
pub fn duration_between(displayed: &DateTime<Utc>, submitted: &DateTime<Utc>) -> f64 {
    (*submitted - *displayed).num_milliseconds() as f64 / 1000.0
}

impl ReadingEvent {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3},{}",
            self.study,
            self.reader,
            self.image,
            self.arm,
            self.severity,
            format_timestamp(&self.displayed_at),
            format_timestamp(&self.submitted_at),
            self.duration_s,
            self.report_shown
        )
    }
}

pub fn events_to_csv(events: &[ReadingEvent]) -> String {
    let mut out = format!("{EVENT_CSV_HEADER}\n");
    for e in events {
        out.push_str(&e.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_events_csv(text: &str) -> Result<Vec<ReadingEvent>, MetricError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(EVENT_CSV_HEADER) {
        return Err(MetricError::Parse(format!("expected header `{EVENT_CSV_HEADER}`")));
    }
    let mut out = vec![];
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| MetricError::Parse(format!("event row {}: bad {what}", i + 1));
        let c: Vec<&str> = line.split(',').map(str::trim).collect();
        if c.len() != 9 {
            return Err(bad("column count"));
        }
        let ts = |s: &str| DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc));
        let severity: u8 = c[4].parse().map_err(|_| bad("severity"))?;
        if severity > MAX_SEVERITY {
            return Err(bad("severity"));
        }
        out.push(ReadingEvent {
            study: c[0].to_string(),
            reader: c[1].to_string(),
            image: c[2].to_string(),
            arm: c[3].parse().map_err(|_| bad("arm"))?,
            severity,
            displayed_at: ts(c[5]).map_err(|_| bad("displayed_at"))?,
            submitted_at: ts(c[6]).map_err(|_| bad("submitted_at"))?,
            duration_s: c[7].parse().map_err(|_| bad("duration_s"))?,
            report_shown: c[8].parse().map_err(|_| bad("report_shown"))?,
        });
    }
    Ok(out)
}

pub const TRUTH_CSV_HEADER: &str = "image,label";

/// Ground-truth table: `image,label` with label 1 (Covid-19) or 0.
pub fn truth_to_csv(truth: &BTreeMap<String, bool>) -> String {
    let mut out = format!("{TRUTH_CSV_HEADER}\n");
    for (image, &label) in truth {
        let _ = writeln!(out, "{image},{}", u8::from(label));
    }
    out
}

pub fn parse_truth_csv(text: &str) -> Result<BTreeMap<String, bool>, MetricError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRUTH_CSV_HEADER) {
        return Err(MetricError::Parse(format!("expected header `{TRUTH_CSV_HEADER}`")));
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || MetricError::Parse(format!("truth row {}: `{line}`", i + 1));
        let (image, label) = line.split_once(',').ok_or_else(bad)?;
        let label = match label.trim() {
            "1" | "pos" | "true" => true,
            "0" | "neg" | "false" => false,
            _ => return Err(bad()),
        };
        if out.insert(image.trim().to_string(), label).is_some() {
            return Err(MetricError::Parse(format!(
                "duplicate image `{}` in truth table",
                image.trim()
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanScores {
    pub scores: BTreeMap<String, f64>,
    /// Expected images with no reading in the arm.
    pub missing: Vec<String>,
}

/// Per-image mean severity over readers, for one arm.
pub fn mean_reader_scores(events: &[ReadingEvent], arm: Arm, expected: Option<&[String]>) -> MeanScores {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for e in events.iter().filter(|e| e.arm == arm) {
        let slot = acc.entry(e.image.clone()).or_insert((0.0, 0));
        slot.0 += e.severity as f64;
        slot.1 += 1;
    }
    let missing = expected
        .map(|ids| ids.iter().filter(|id| !acc.contains_key(*id)).cloned().collect())
        .unwrap_or_default();
    MeanScores {
        scores: acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        missing,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReaderOutcome {
    pub reader: String,
    pub arm: Arm,
    pub auc: f64,
    /// Mean over readings under the time cap; `None` when all were capped.
    pub mean_time_s: Option<f64>,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledArm {
    pub arm: Arm,
    /// AUC of the per-image mean-reader severity.
    pub auc: f64,
    pub n_images: usize,
    /// Mean over all uncapped readings.
    pub mean_time_per_reading_s: Option<f64>,
    /// Mean over readers of each reader's mean time.
    pub mean_time_per_reader_s: Option<f64>,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimePair {
    pub image: String,
    pub blind_s: f64,
    pub assisted_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmComparison {
    pub per_reader: Vec<ReaderOutcome>,
    pub pooled: Vec<PooledArm>,
    /// Per-image mean time over readers, blind versus assisted.
    pub time_pairs: Vec<TimePair>,
    pub regression: Option<LinearFit>,
    /// Fitted line lies below `y = x` over the observed blind-time range.
    pub below_identity: Option<bool>,
    pub time_cap_s: f64,
    pub flagged_readings: usize,
    pub warnings: Vec<String>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn least_squares(points: &[(f64, f64)]) -> Option<LinearFit> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
    })
}

fn labels_for(images: &[&String], truth: &BTreeMap<String, bool>) -> Vec<bool> {
    images.iter().map(|i| truth[*i]).collect()
}

/// Compares the two arms. `truth` maps image id to Covid-19 status; events on
/// images outside it are ignored with a warning. Readers seen in one arm only
/// are excluded from the per-reader table.
pub fn arm_comparison(
    events: &[ReadingEvent],
    truth: &BTreeMap<String, bool>,
    time_cap_s: f64,
) -> Result<ArmComparison, MetricError> {
    let mut warnings = vec![];
    let unknown: BTreeSet<&str> = events
        .iter()
        .filter(|e| !truth.contains_key(&e.image))
        .map(|e| e.image.as_str())
        .collect();
    if !unknown.is_empty() {
        warnings.push(format!("ignored readings of images without ground truth: {unknown:?}"));
    }
    let events: Vec<&ReadingEvent> = events.iter().filter(|e| truth.contains_key(&e.image)).collect();
    let flagged_readings = events.iter().filter(|e| e.duration_s > time_cap_s).count();
    let timed = |e: &&&ReadingEvent| e.duration_s <= time_cap_s;

    let mut by_reader: BTreeMap<&str, BTreeMap<Arm, Vec<&ReadingEvent>>> = BTreeMap::new();
    for e in &events {
        by_reader
            .entry(&e.reader)
            .or_default()
            .entry(e.arm)
            .or_default()
            .push(e);
    }
    let mut per_reader = vec![];
    let mut reader_means: BTreeMap<Arm, Vec<f64>> = BTreeMap::new();
    for (reader, arms) in &by_reader {
        if arms.len() < 2 {
            warnings.push(format!("reader {reader} has readings in one arm only; excluded"));
            continue;
        }
        for (&arm, evs) in arms {
            let images: Vec<&String> = evs.iter().map(|e| &e.image).collect();
            let scores: Vec<f64> = evs.iter().map(|e| e.severity as f64).collect();
            let auc = match roc_auc(&scores, &labels_for(&images, truth)) {
                Ok(a) => a,
                Err(err) => {
                    warnings.push(format!("reader {reader}, {arm} arm: {err}"));
                    continue;
                }
            };
            let mean_time_s = mean(evs.iter().filter(timed).map(|e| e.duration_s));
            if let Some(m) = mean_time_s {
                reader_means.entry(arm).or_default().push(m);
            }
            per_reader.push(ReaderOutcome {
                reader: reader.to_string(),
                arm,
                auc,
                mean_time_s,
                n_images: evs.len(),
            });
        }
    }

    let owned: Vec<ReadingEvent> = events.iter().map(|e| (*e).clone()).collect();
    let mut pooled = vec![];
    for arm in Arm::ALL {
        let ms = mean_reader_scores(&owned, arm, None);
        if ms.scores.is_empty() {
            warnings.push(format!("no readings in the {arm} arm"));
            continue;
        }
        let images: Vec<&String> = ms.scores.keys().collect();
        let scores: Vec<f64> = ms.scores.values().copied().collect();
        let labels = labels_for(&images, truth);
        pooled.push(PooledArm {
            arm,
            auc: roc_auc(&scores, &labels)?,
            n_images: images.len(),
            mean_time_per_reading_s: mean(
                events
                    .iter()
                    .filter(|e| e.arm == arm)
                    .filter(timed)
                    .map(|e| e.duration_s),
            ),
            mean_time_per_reader_s: mean(reader_means.get(&arm).into_iter().flatten().copied()),
            roc: roc_curve(&scores, &labels)?,
        });
    }

    let mut per_image: BTreeMap<&str, BTreeMap<Arm, Vec<f64>>> = BTreeMap::new();
    for e in events.iter().filter(timed) {
        per_image
            .entry(&e.image)
            .or_default()
            .entry(e.arm)
            .or_default()
            .push(e.duration_s);
    }
    let time_pairs: Vec<TimePair> = per_image
        .iter()
        .filter_map(|(image, arms)| {
            let b = mean(arms.get(&Arm::Blind)?.iter().copied())?;
            let a = mean(arms.get(&Arm::Assisted)?.iter().copied())?;
            Some(TimePair {
                image: image.to_string(),
                blind_s: b,
                assisted_s: a,
            })
        })
        .collect();
    let xy: Vec<(f64, f64)> = time_pairs.iter().map(|p| (p.blind_s, p.assisted_s)).collect();
    let regression = least_squares(&xy);
    let below_identity = regression.map(|fit| {
        let lo = xy.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = xy.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        [lo, hi].iter().all(|&x| fit.slope * x + fit.intercept < x)
    });

    Ok(ArmComparison {
        per_reader,
        pooled,
        time_pairs,
        regression,
        below_identity,
        time_cap_s,
        flagged_readings,
        warnings,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl ArmComparison {
    pub fn pooled_arm(&self, arm: Arm) -> Option<&PooledArm> {
        self.pooled.iter().find(|p| p.arm == arm)
    }

    /// `reader,arm,auc,mean_time_s,n_images`
    pub fn per_reader_csv(&self) -> String {
        let mut out = String::from("reader,arm,auc,mean_time_s,n_images\n");
        for r in &self.per_reader {
            let _ = writeln!(
                out,
                "{},{},{:.6},{},{}",
                r.reader,
                r.arm,
                r.auc,
                opt(r.mean_time_s),
                r.n_images
            );
        }
        out
    }

    /// `arm,auc,n_images,mean_time_per_reading_s,mean_time_per_reader_s`,
    /// followed by the regression as `# slope=.. intercept=.. below_identity=..`.
    pub fn pooled_csv(&self) -> String {
        let mut out = String::from("arm,auc,n_images,mean_time_per_reading_s,mean_time_per_reader_s\n");
        for p in &self.pooled {
            let _ = writeln!(
                out,
                "{},{:.6},{},{},{}",
                p.arm,
                p.auc,
                p.n_images,
                opt(p.mean_time_per_reading_s),
                opt(p.mean_time_per_reader_s)
            );
        }
        if let Some(fit) = self.regression {
            let _ = writeln!(
                out,
                "# slope={:.6} intercept={:.6} below_identity={}",
                fit.slope,
                fit.intercept,
                self.below_identity.unwrap_or(false)
            );
        }
        out
    }

    /// `image,blind_s,assisted_s`
    pub fn time_pairs_csv(&self) -> String {
        let mut out = String::from("image,blind_s,assisted_s\n");
        for p in &self.time_pairs {
            let _ = writeln!(out, "{},{:.6},{:.6}", p.image, p.blind_s, p.assisted_s);
        }
        out
    }

    /// `fpr,tpr,threshold` for one arm's pooled ROC.
    pub fn roc_csv(&self, arm: Arm) -> Option<String> {
        let p = self.pooled_arm(arm)?;
        let mut out = String::from("fpr,tpr,threshold\n");
        for pt in &p.roc {
            let _ = writeln!(out, "{:.6},{:.6},{:.6}", pt.fpr, pt.tpr, pt.threshold);
        }
        Some(out)
    }
}
