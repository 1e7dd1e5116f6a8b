//! Subject ingestion, phenotype encoding, segment augmentation, splitting,
//! and the synthetic dataset generator.
//!
//! On-disk layout:
//! * one delimited text file per subject (rows = time, columns = ROIs,
//!   optional non-numeric header line), named `{subject_id}.tsv`;
//! * one phenotypic table with columns `subject_id, site, dx, gender,
//!   age, handedness, full4_iq` (empty cell = missing, `-999` IQ = error).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngStream, Stream};
use crate::tensor::Tensor;

/// Width of the encoded phenotype vector.
pub const PHENO_DIM: usize = 5;
pub const IQ_ERROR_SENTINEL: f64 = -999.0;
pub const PHENOTYPIC_COLUMNS: [&str; 7] =
    ["subject_id", "site", "dx", "gender", "age", "handedness", "full4_iq"];

#[derive(Clone, Debug, PartialEq)]
pub struct RoiTimeSeries {
    pub subject_id: String,
    /// `T_full × S`.
    pub values: Tensor,
    pub template_name: String,
}

impl RoiTimeSeries {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_rois(&self) -> usize {
        self.values.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Iq {
    Measured(f64),
    /// The table carried the `-999` error value.
    Error,
    Missing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhenotypicRecord {
    pub subject_id: String,
    pub site: String,
    pub dx: u8,
    pub gender: Option<u8>,
    pub age: Option<f64>,
    pub handedness: Option<u8>,
    pub full4_iq: Iq,
}

impl PhenotypicRecord {
    pub fn label(&self) -> u8 {
        u8::from(self.dx != 0)
    }
}

/// Healthy control (0) versus any ADHD subtype (1, 2, 3).
pub fn binarize_label(dx: i64) -> Result<u8> {
    match dx {
        0 => Ok(0),
        1..=3 => Ok(1),
        _ => Err(Error::invalid("binarize_label", format!("dx code {dx} not in 0..=3"))),
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').collect()
    } else if line.contains(',') {
        line.split(',').collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a `T × S` matrix; a first line that does not parse as numbers is
/// treated as a header.
pub fn load_subject_series(path: &Path) -> Result<RoiTimeSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(line.trim_end());
        let parsed: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if rows.is_empty() && n == 0 => continue,
            Err(e) => return Err(parse_err(path, n + 1, e.to_string())),
        };
        if let Some(bad) = row.iter().position(|v| !v.is_finite()) {
            return Err(parse_err(path, n + 1, format!("non-finite value in column {bad}")));
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    path,
                    n + 1,
                    format!("{} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "no data rows"));
    }
    let subject_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(RoiTimeSeries {
        subject_id,
        values: Tensor::from_rows(&rows)?,
        template_name: String::new(),
    })
}

/// Writes a series with a `roi_{j}` header, shortest round-trip floats.
pub fn write_subject_series(path: &Path, values: &Tensor) -> Result<()> {
    let (t, s) = values.dims2()?;
    let mut out = String::with_capacity(t * s * 20);
    let header: Vec<String> = (0..s).map(|j| format!("roi_{j}")).collect();
    out.push_str(&header.join("\t"));
    out.push('\n');
    for i in 0..t {
        for j in 0..s {
            if j > 0 {
                out.push('\t');
            }
            write!(out, "{}", values.at(i, j)).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_opt<T: std::str::FromStr>(s: &str) -> std::result::Result<Option<T>, T::Err> {
    let s = s.trim();
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

pub fn load_phenotypic_table(path: &Path) -> Result<Vec<PhenotypicRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 0, "empty table"))?;
    let delim = if header.contains('\t') { '\t' } else { ',' };
    let names: Vec<&str> = header.split(delim).map(str::trim).collect();
    let mut col = HashMap::new();
    for required in PHENOTYPIC_COLUMNS {
        let idx = names
            .iter()
            .position(|n| *n == required)
            .ok_or_else(|| parse_err(path, 1, format!("missing required column `{required}`")))?;
        col.insert(required, idx);
    }

    let mut records = Vec::new();
    for (n, line) in lines {
        let lineno = n + 1;
        let fields: Vec<&str> = line.split(delim).collect();
        let get = |name: &str| fields.get(col[name]).copied().unwrap_or("").trim();
        let bad = |name: &str, what: String| parse_err(path, lineno, format!("column `{name}`: {what}"));

        let dx_raw = get("dx");
        let dx: i64 = dx_raw
            .parse()
            .map_err(|_| bad("dx", format!("`{dx_raw}` is not an integer")))?;
        binarize_label(dx).map_err(|e| bad("dx", e.to_string()))?;
        let gender: Option<u8> =
            parse_opt::<u8>(get("gender")).map_err(|e| bad("gender", e.to_string()))?;
        let age: Option<f64> = parse_opt::<f64>(get("age")).map_err(|e| bad("age", e.to_string()))?;
        let handedness: Option<u8> =
            parse_opt::<u8>(get("handedness")).map_err(|e| bad("handedness", e.to_string()))?;
        let iq: Option<f64> =
            parse_opt::<f64>(get("full4_iq")).map_err(|e| bad("full4_iq", e.to_string()))?;
        let full4_iq = match iq {
            None => Iq::Missing,
            Some(v) if v == IQ_ERROR_SENTINEL => Iq::Error,
            Some(v) => Iq::Measured(v),
        };
        records.push(PhenotypicRecord {
            subject_id: get("subject_id").to_string(),
            site: get("site").to_string(),
            dx: dx as u8,
            gender,
            age,
            handedness,
            full4_iq,
        });
    }
    Ok(records)
}

pub fn write_phenotypic_table(path: &Path, records: &[PhenotypicRecord]) -> Result<()> {
    let mut out = PHENOTYPIC_COLUMNS.join("\t");
    out.push('\n');
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in records {
        let iq = match r.full4_iq {
            Iq::Measured(v) => v.to_string(),
            Iq::Error => "-999".to_string(),
            Iq::Missing => String::new(),
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.subject_id,
            r.site,
            r.dx,
            opt(r.gender.map(|g| g.to_string())),
            opt(r.age.map(|a| a.to_string())),
            opt(r.handedness.map(|h| h.to_string())),
            iq
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Training-split moments used to z-score age and IQ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhenoStats {
    pub age_mean: f64,
    pub age_std: f64,
    pub iq_mean: f64,
    pub iq_std: f64,
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

impl PhenoStats {
    /// Moments over present, non-sentinel values of the given records.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a PhenotypicRecord> + Clone) -> Self {
        let (age_mean, age_std) = moments(records.clone().into_iter().filter_map(|r| r.age));
        let (iq_mean, iq_std) = moments(records.into_iter().filter_map(|r| match r.full4_iq {
            Iq::Measured(v) => Some(v),
            _ => None,
        }));
        PhenoStats {
            age_mean,
            age_std,
            iq_mean,
            iq_std,
        }
    }
}

/// `[gender, age_z, handedness, iq_z, iq_missing]`.
///
/// Missing gender and unknown handedness map to 0.5; missing age and
/// missing or error IQ map to 0, with the last entry flagging the IQ case.
pub fn encode_phenotype(r: &PhenotypicRecord, stats: &PhenoStats) -> [f64; PHENO_DIM] {
    let gender = match r.gender {
        Some(0) => 0.0,
        Some(1) => 1.0,
        _ => 0.5,
    };
    let age = r.age.map_or(0.0, |a| (a - stats.age_mean) / stats.age_std);
    let handedness = match r.handedness {
        Some(0) => 0.0,
        Some(1) => 1.0,
        _ => 0.5,
    };
    let (iq, iq_missing) = match r.full4_iq {
        Iq::Measured(v) => ((v - stats.iq_mean) / stats.iq_std, 0.0),
        Iq::Error | Iq::Missing => (0.0, 1.0),
    };
    [gender, age, handedness, iq, iq_missing]
}

fn check_crop(op: &'static str, series: &Tensor, len: usize) -> Result<usize> {
    let (t, _) = series.dims2()?;
    if len == 0 || t < len {
        return Err(Error::invalid(op, format!("segment length {len} with {t} time points")));
    }
    Ok(t)
}

/// A contiguous `len`-row crop starting uniformly in `[0, T_full − len]`.
pub fn random_segment(series: &Tensor, len: usize, rng: &mut RngStream) -> Result<Tensor> {
    let t = check_crop("random_segment", series, len)?;
    let start = rng.range_inclusive(0, t - len);
    series.slice_rows(start, start + len)
}

/// Rows `[⌊(T_full − len)/2⌋, ⌊(T_full − len)/2⌋ + len)`.
pub fn center_segment(series: &Tensor, len: usize) -> Result<Tensor> {
    let t = check_crop("center_segment", series, len)?;
    let start = (t - len) / 2;
    series.slice_rows(start, start + len)
}

/// Random subject-level split with `round(frac·n)` validation subjects.
/// Both sides keep the input order.
pub fn split_train_val(ids: &[String], frac: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::invalid("split_train_val", format!("fraction {frac} outside (0, 1)")));
    }
    let n = ids.len();
    let n_val = (frac * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::invalid(
            "split_train_val",
            format!("{n} subjects at fraction {frac} leaves an empty side"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, Stream::Split).shuffle(&mut order);
    let mut is_val = vec![false; n];
    order[..n_val].iter().for_each(|&i| is_val[i] = true);
    let (val, train): (Vec<_>, Vec<_>) = ids.iter().cloned().zip(is_val).partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(id, _)| id).collect(),
        val.into_iter().map(|(id, _)| id).collect(),
    ))
}

/// One subject: its full series, phenotype and binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub series: RoiTimeSeries,
    pub record: PhenotypicRecord,
    pub label: u8,
}

/// Model-ready input.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSample {
    pub segment: Tensor,
    pub pheno: Vec<f64>,
    pub label: u8,
}

impl Subject {
    pub fn center_sample(&self, len: usize, stats: &PhenoStats) -> Result<SubjectSample> {
        Ok(SubjectSample {
            segment: center_segment(&self.series.values, len)?,
            pheno: encode_phenotype(&self.record, stats).to_vec(),
            label: self.label,
        })
    }

    pub fn random_sample(
        &self,
        len: usize,
        stats: &PhenoStats,
        rng: &mut RngStream,
    ) -> Result<SubjectSample> {
        Ok(SubjectSample {
            segment: random_segment(&self.series.values, len, rng)?,
            pheno: encode_phenotype(&self.record, stats).to_vec(),
            label: self.label,
        })
    }
}

pub const PHENOTYPIC_FILE: &str = "phenotypic.tsv";
pub const SERIES_DIR: &str = "series";

/// Joins every phenotypic record with `{series_dir}/{subject_id}.tsv`.
///
/// Rejects subjects shorter than `min_len` and inconsistent ROI counts.
pub fn load_dataset(series_dir: &Path, phenotypic: &Path, min_len: usize) -> Result<Vec<Subject>> {
    let records = load_phenotypic_table(phenotypic)?;
    let mut subjects = Vec::with_capacity(records.len());
    let mut n_rois: Option<(usize, PathBuf)> = None;
    for record in records {
        let path = series_dir.join(format!("{}.tsv", record.subject_id));
        let mut series = load_subject_series(&path)?;
        series.subject_id = record.subject_id.clone();
        if series.len() < min_len {
            return Err(Error::Data(format!(
                "{}: {} time points, segment length is {min_len}",
                path.display(),
                series.len()
            )));
        }
        match &n_rois {
            Some((s, first)) if *s != series.n_rois() => {
                return Err(Error::Data(format!(
                    "{} has {} ROIs but {} has {s}",
                    path.display(),
                    series.n_rois(),
                    first.display()
                )))
            }
            None => n_rois = Some((series.n_rois(), path.clone())),
            _ => {}
        }
        let label = record.label();
        subjects.push(Subject {
            series,
            record,
            label,
        });
    }
    Ok(subjects)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub t_full: usize,
    pub n_rois: usize,
    /// Probability of label 1.
    pub balance: f64,
    pub signal_rois: Vec<usize>,
    pub effect_size: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 200,
            t_full: 90,
            n_rois: 20,
            balance: 0.5,
            signal_rois: vec![0, 1, 2],
            effect_size: 2.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_subjects == 0 || self.t_full == 0 || self.n_rois == 0 {
            errs.push("synthetic n_subjects, t_full and n_rois must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.balance) {
            errs.push(format!("synthetic balance = {} outside [0, 1]", self.balance));
        }
        if let Some(r) = self.signal_rois.iter().find(|&&r| r >= self.n_rois) {
            errs.push(format!("synthetic signal ROI {r} outside [0, {})", self.n_rois));
        }
        if !(self.effect_size >= 0.0) {
            errs.push("synthetic effect_size must be non-negative".to_string());
        }
        if !(self.noise_std >= 0.0) {
            errs.push("synthetic noise_std must be non-negative".to_string());
        }
        errs
    }
}

/// Gaussian background; label-1 subjects get one shared low-frequency
/// sinusoid of amplitude `effect_size` on every signal ROI. Phenotypes are
/// drawn independently of the label except for `dx`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Subject>> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut rng = RngStream::new(spec.seed, Stream::Synthetic);
    let sites = ["SYN-A", "SYN-B", "SYN-C"];
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let label = u8::from(rng.bernoulli(spec.balance));
        let mut values = vec![0.0; spec.t_full * spec.n_rois];
        for v in &mut values {
            *v = rng.normal(0.0, 1.0) * spec.noise_std;
        }
        // Drawn for both classes to keep the streams aligned.
        let freq = 0.02 + 0.06 * rng.uniform();
        let phase = std::f64::consts::TAU * rng.uniform();
        if label == 1 {
            for t in 0..spec.t_full {
                let wave = spec.effect_size * (std::f64::consts::TAU * freq * t as f64 + phase).sin();
                for &r in &spec.signal_rois {
                    values[t * spec.n_rois + r] += wave;
                }
            }
        }

        let dx = if label == 1 {
            1 + rng.range_inclusive(0, 2) as u8
        } else {
            0
        };
        let gender = Some(u8::from(rng.bernoulli(0.6)));
        let age = Some(((7.0 + 14.0 * rng.uniform()) * 100.0).round() / 100.0);
        let hand_draw = rng.uniform();
        let handedness = Some(if hand_draw < 0.85 {
            1
        } else if hand_draw < 0.95 {
            0
        } else {
            2
        });
        let iq_draw = rng.uniform();
        let iq_value = rng.normal(105.0, 14.0).round();
        let full4_iq = if iq_draw < 0.05 {
            Iq::Error
        } else if iq_draw < 0.10 {
            Iq::Missing
        } else {
            Iq::Measured(iq_value)
        };
        let site = sites[rng.range_inclusive(0, sites.len() - 1)].to_string();
        let subject_id = format!("sub{i:04}");
        subjects.push(Subject {
            series: RoiTimeSeries {
                subject_id: subject_id.clone(),
                values: Tensor::new(vec![spec.t_full, spec.n_rois], values)?,
                template_name: "synthetic".into(),
            },
            record: PhenotypicRecord {
                subject_id,
                site,
                dx,
                gender,
                age,
                handedness,
                full4_iq,
            },
            label,
        });
    }
    Ok(subjects)
}

/// Writes `series/{id}.tsv` for every subject plus `phenotypic.tsv`.
pub fn write_dataset(dir: &Path, subjects: &[Subject]) -> Result<()> {
    let series_dir = dir.join(SERIES_DIR);
    fs::create_dir_all(&series_dir).map_err(|e| Error::io(&series_dir, e))?;
    for s in subjects {
        write_subject_series(&series_dir.join(format!("{}.tsv", s.series.subject_id)), &s.series.values)?;
    }
    let records: Vec<PhenotypicRecord> = subjects.iter().map(|s| s.record.clone()).collect();
    write_phenotypic_table(&dir.join(PHENOTYPIC_FILE), &records)
}
