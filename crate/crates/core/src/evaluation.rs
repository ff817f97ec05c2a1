//! Attack metrics and report tables.
//!
//! Perturbations are measured on the internal `[0, 1]` scale and converted
//! to 0–255 units only inside [`psnr`].

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackConfig, CampaignItem};
use crate::tensor::Tensor;

pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pixel count must be positive")]
    PixelCount,
    #[error("no results to aggregate")]
    Empty,
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("bin count must be positive")]
    Bins,
    #[error("malformed results CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `20·log10(255·√pixel_count / ‖255·δ‖₂)`, `+∞` for `δ = 0`.
pub fn psnr(delta: &Tensor, pixel_count: usize) -> Result<f64, EvalError> {
    psnr_from_norm(delta.l2_norm(), pixel_count)
}

/// [`psnr`] from the `[0, 1]`-scale norm of `δ`.
pub fn psnr_from_norm(l2_norm: f64, pixel_count: usize) -> Result<f64, EvalError> {
    if pixel_count == 0 {
        return Err(EvalError::PixelCount);
    }
    let scaled = 255.0 * l2_norm;
    if scaled == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (255.0 * (pixel_count as f64).sqrt() / scaled).log10())
}

/// One attacked image; the column names are the CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub image_id: usize,
    pub true_class: usize,
    pub target_class: usize,
    pub attack: String,
    pub lambda_start: f64,
    pub n: usize,
    pub epsilon: f64,
    pub m: usize,
    pub c: f64,
    pub success: bool,
    pub l2_norm: f64,
    pub psnr_db: f64,
    pub prob_true_before: f64,
    pub prob_true_after: f64,
    pub prob_target_before: f64,
    pub prob_target_after: f64,
}

impl AttackRecord {
    pub const HEADER: [&'static str; 16] = [
        "image_id",
        "true_class",
        "target_class",
        "attack",
        "lambda_start",
        "n",
        "epsilon",
        "m",
        "c",
        "success",
        "l2_norm",
        "psnr_db",
        "prob_true_before",
        "prob_true_after",
        "prob_target_before",
        "prob_target_after",
    ];

    pub fn from_item(item: &CampaignItem, config: &AttackConfig) -> Self {
        let r = &item.result;
        Self {
            image_id: item.image_id,
            true_class: item.true_class,
            target_class: r.target,
            attack: config.kind.name().to_string(),
            lambda_start: config.lambda_start,
            n: config.binary_search_steps,
            epsilon: config.step_size,
            m: config.max_iterations,
            c: config.confidence,
            success: r.success,
            l2_norm: r.l2_norm,
            psnr_db: r.psnr_db,
            prob_true_before: r.prob_true_before,
            prob_true_after: r.prob_true_after,
            prob_target_before: r.prob_target_before,
            prob_target_after: r.prob_target_after,
        }
    }

    /// `(attack, λ₁, n, ε, m, c)` as text, used to group rows.
    pub fn setting(&self) -> String {
        format!(
            "{}({},{},{},{}) eps={}",
            self.attack, self.lambda_start, self.n, self.m, self.c, self.epsilon
        )
    }
}

pub fn write_records<W: Write>(writer: W, records: &[AttackRecord]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(AttackRecord::HEADER)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows without a header, for appending to an existing results file.
pub fn append_records<W: Write>(writer: W, records: &[AttackRecord]) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(reader: R) -> Result<Vec<AttackRecord>, EvalError> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().ne(AttackRecord::HEADER) {
        return Err(EvalError::Csv(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        ))));
    }
    Ok(r.deserialize().collect::<Result<Vec<AttackRecord>, _>>()?)
}

/// Rows of several result files, concatenated in argument order.
pub fn read_record_files(paths: &[impl AsRef<Path>]) -> Result<Vec<AttackRecord>, EvalError> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_records(std::fs::File::open(p)?)?);
    }
    Ok(out)
}

/// Successes over attempts.
pub fn attack_success_rate(records: &[AttackRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(records.iter().filter(|r| r.success).count() as f64 / records.len() as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Aggregate row for one attack setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub setting: String,
    pub attacks: usize,
    pub successes: usize,
    pub asr: f64,
    /// Mean finite PSNR over successful attacks.
    pub mean_psnr_successes: Option<f64>,
    /// Mean finite PSNR over every attack.
    pub mean_psnr_all: Option<f64>,
    pub mean_l2_successes: Option<f64>,
    pub mean_prob_true_before: f64,
    pub mean_prob_true_after: f64,
    pub mean_prob_target_before: f64,
    pub mean_prob_target_after: f64,
}

impl Summary {
    pub fn of(setting: impl Into<String>, rows: &[&AttackRecord]) -> Result<Self, EvalError> {
        if rows.is_empty() {
            return Err(EvalError::Empty);
        }
        let ok: Vec<&&AttackRecord> = rows.iter().filter(|r| r.success).collect();
        let all = || rows.iter();
        Ok(Self {
            setting: setting.into(),
            attacks: rows.len(),
            successes: ok.len(),
            asr: ok.len() as f64 / rows.len() as f64,
            mean_psnr_successes: mean(ok.iter().map(|r| r.psnr_db).filter(|p| p.is_finite())),
            mean_psnr_all: mean(all().map(|r| r.psnr_db).filter(|p| p.is_finite())),
            mean_l2_successes: mean(ok.iter().map(|r| r.l2_norm)),
            mean_prob_true_before: mean(all().map(|r| r.prob_true_before)).unwrap_or(0.0),
            mean_prob_true_after: mean(all().map(|r| r.prob_true_after)).unwrap_or(0.0),
            mean_prob_target_before: mean(all().map(|r| r.prob_target_before)).unwrap_or(0.0),
            mean_prob_target_after: mean(all().map(|r| r.prob_target_after)).unwrap_or(0.0),
        })
    }
}

/// One summary per setting, in order of first appearance.
pub fn summarize(records: &[AttackRecord]) -> Result<Vec<Summary>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut settings: Vec<String> = Vec::new();
    for r in records {
        let s = r.setting();
        if !settings.contains(&s) {
            settings.push(s);
        }
    }
    settings
        .into_iter()
        .map(|s| {
            let rows: Vec<&AttackRecord> = records.iter().filter(|r| r.setting() == s).collect();
            Summary::of(s, &rows)
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_summaries<W: Write>(writer: W, summaries: &[Summary]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "setting",
        "attacks",
        "successes",
        "asr",
        "mean_psnr_db_successes",
        "mean_psnr_db_all",
        "mean_l2_successes",
        "mean_prob_true_before",
        "mean_prob_true_after",
        "mean_prob_target_before",
        "mean_prob_target_after",
    ])?;
    for s in summaries {
        w.write_record([
            s.setting.clone(),
            s.attacks.to_string(),
            s.successes.to_string(),
            s.asr.to_string(),
            opt(s.mean_psnr_successes),
            opt(s.mean_psnr_all),
            opt(s.mean_l2_successes),
            s.mean_prob_true_before.to_string(),
            s.mean_prob_true_after.to_string(),
            s.mean_prob_target_before.to_string(),
            s.mean_prob_target_after.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Probability table row for one confidence margin.
///
/// `after` columns only count successes, which by construction reached the
/// margin; `before` columns average every attacked image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub c: f64,
    pub attacked: usize,
    pub counted: usize,
    pub asr: f64,
    pub mean_psnr: Option<f64>,
    pub prob_true_before: f64,
    pub prob_true_after: Option<f64>,
    pub prob_target_before: f64,
    pub prob_target_after: Option<f64>,
    /// No attack reached the margin.
    pub empty: bool,
}

/// Groups `records` by `c` (ascending).
pub fn confidence_table(records: &[AttackRecord]) -> Result<Vec<ConfidenceRow>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cs: Vec<f64> = records.iter().map(|r| r.c).collect();
    cs.sort_by(f64::total_cmp);
    cs.dedup();
    Ok(cs
        .into_iter()
        .map(|c| {
            let rows: Vec<&AttackRecord> = records.iter().filter(|r| r.c == c).collect();
            let ok: Vec<&&AttackRecord> = rows.iter().filter(|r| r.success).collect();
            ConfidenceRow {
                c,
                attacked: rows.len(),
                counted: ok.len(),
                asr: ok.len() as f64 / rows.len() as f64,
                mean_psnr: mean(ok.iter().map(|r| r.psnr_db).filter(|p| p.is_finite())),
                prob_true_before: mean(rows.iter().map(|r| r.prob_true_before)).unwrap_or(0.0),
                prob_true_after: mean(ok.iter().map(|r| r.prob_true_after)),
                prob_target_before: mean(rows.iter().map(|r| r.prob_target_before)).unwrap_or(0.0),
                prob_target_after: mean(ok.iter().map(|r| r.prob_target_after)),
                empty: ok.is_empty(),
            }
        })
        .collect())
}

pub fn write_confidence_table<W: Write>(writer: W, rows: &[ConfidenceRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "c",
        "attacked",
        "counted",
        "asr",
        "mean_psnr_db",
        "prob_true_before",
        "prob_true_after",
        "prob_target_before",
        "prob_target_after",
        "empty",
    ])?;
    for r in rows {
        w.write_record([
            r.c.to_string(),
            r.attacked.to_string(),
            r.counted.to_string(),
            r.asr.to_string(),
            opt(r.mean_psnr),
            r.prob_true_before.to_string(),
            opt(r.prob_true_after),
            r.prob_target_before.to_string(),
            opt(r.prob_target_after),
            r.empty.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from 0 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width bins over `[0, 1]`; `1.0` falls in the last bin.
pub fn probability_histogram(values: &[f64], bins: usize) -> Result<Histogram, EvalError> {
    if bins == 0 {
        return Err(EvalError::Bins);
    }
    let mut counts = vec![0; bins];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::OutOfRange(v));
        }
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(Histogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
    })
}

/// Most-probable-class probabilities: `prob_true_before` on the clean
/// images and `prob_target_after` on the successful adversarial ones.
pub fn top_class_probabilities(records: &[AttackRecord]) -> (Vec<f64>, Vec<f64>) {
    let clean = records.iter().map(|r| r.prob_true_before).collect();
    let adversarial = records.iter().filter(|r| r.success).map(|r| r.prob_target_after).collect();
    (clean, adversarial)
}

/// `(τ, ASR counting successes with psnr ≥ τ)` for every threshold.
pub fn asr_vs_psnr_curve(records: &[AttackRecord], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let total = records.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&tau| {
            let hits = records.iter().filter(|r| r.success && r.psnr_db >= tau).count();
            (tau, hits as f64 / total)
        })
        .collect()
}

/// Two-column CSV for external plotting.
pub fn write_two_columns<W: Write>(writer: W, header: [&str; 2], rows: &[(f64, f64)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for (a, b) in rows {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Histogram as `(bin lower edge, count)` rows.
pub fn histogram_rows(h: &Histogram) -> Vec<(f64, f64)> {
    h.counts.iter().enumerate().map(|(i, &c)| (h.edges[i], c as f64)).collect()
}
