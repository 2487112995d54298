//! Word error rate and its noise-grid aggregates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{NoiseCategory, NoiseCondition, SNR_GRID_DB};

/// SNRs at or below 0 dB, where noise dominates.
pub const NOISE_DOMINANT_SNR_DB: [i32; 3] = [-10, -5, 0];

/// Minimum number of substitutions, deletions and insertions.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// `100 * edits / |reference|`.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Domain("WER needs a non-empty reference".into()));
    }
    Ok(100.0 * edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// WER percent per evaluation condition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    cells: BTreeMap<NoiseCondition, f64>,
}

impl EvalTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, condition: NoiseCondition, wer: f64) {
        self.cells.insert(condition, wer);
    }

    pub fn get(&self, condition: &NoiseCondition) -> Option<f64> {
        self.cells.get(condition).copied()
    }

    pub fn cells(&self) -> impl Iterator<Item = (&NoiseCondition, &f64)> {
        self.cells.iter()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn clean(&self) -> Option<f64> {
        self.get(&NoiseCondition::Clean)
    }

    /// Builds a table from per-category rows over the SNR grid.
    pub fn from_rows(rows: &[(NoiseCategory, [f64; 5])]) -> Self {
        let mut t = Self::new();
        for (cat, values) in rows {
            for (&snr_db, &v) in SNR_GRID_DB.iter().zip(values) {
                t.insert(NoiseCondition::Noisy { category: *cat, snr_db }, v);
            }
        }
        t
    }

    /// Table whose music and natural rows share one merged row, the
    /// convention of tables that average those two noise types.
    pub fn with_merged_music_natural(babble: [f64; 5], speech: [f64; 5], music_natural: [f64; 5]) -> Self {
        Self::from_rows(&[
            (NoiseCategory::Babble, babble),
            (NoiseCategory::Speech, speech),
            (NoiseCategory::Music, music_natural),
            (NoiseCategory::Natural, music_natural),
        ])
    }

    /// Table in which every cell of a category holds that category's average.
    pub fn from_category_averages(babble: f64, speech: f64, music_natural: f64) -> Self {
        Self::with_merged_music_natural([babble; 5], [speech; 5], [music_natural; 5])
    }

    fn mean_over(&self, snrs: &[i32]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0;
        for cat in NoiseCategory::ALL {
            for &snr_db in snrs {
                let cond = NoiseCondition::Noisy { category: cat, snr_db };
                sum += self.get(&cond).ok_or_else(|| Error::IncompleteTable(cond.to_string()))?;
                n += 1;
            }
        }
        Ok(sum / n as f64)
    }

    /// Mean of one category over the full SNR grid.
    pub fn category_average(&self, category: NoiseCategory) -> Result<f64> {
        self.category_mean(category, &SNR_GRID_DB)
    }

    /// Mean of one category over the noise-dominant SNRs.
    pub fn category_noise_dominant(&self, category: NoiseCategory) -> Result<f64> {
        self.category_mean(category, &NOISE_DOMINANT_SNR_DB)
    }

    fn category_mean(&self, category: NoiseCategory, snrs: &[i32]) -> Result<f64> {
        let mut sum = 0.0;
        for &snr_db in snrs {
            let cond = NoiseCondition::Noisy { category, snr_db };
            sum += self.get(&cond).ok_or_else(|| Error::IncompleteTable(cond.to_string()))?;
        }
        Ok(sum / snrs.len() as f64)
    }
}

/// Mean of the 20 grid cells.
pub fn nwer(table: &EvalTable) -> Result<f64> {
    table.mean_over(&SNR_GRID_DB)
}

/// Mean of the 12 cells at SNR <= 0 dB.
pub fn nwer_noise_dominant(table: &EvalTable) -> Result<f64> {
    table.mean_over(&NOISE_DOMINANT_SNR_DB)
}

/// Aggregates of a complete table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub category_average: BTreeMap<NoiseCategory, f64>,
    pub category_noise_dominant: BTreeMap<NoiseCategory, f64>,
    pub nwer: f64,
    pub nwer_noise_dominant: f64,
    pub clean: Option<f64>,
}

impl AggregateReport {
    pub fn from_table(table: &EvalTable) -> Result<Self> {
        let mut category_average = BTreeMap::new();
        let mut category_noise_dominant = BTreeMap::new();
        for cat in NoiseCategory::ALL {
            category_average.insert(cat, table.category_average(cat)?);
            category_noise_dominant.insert(cat, table.category_noise_dominant(cat)?);
        }
        Ok(Self {
            category_average,
            category_noise_dominant,
            nwer: nwer(table)?,
            nwer_noise_dominant: nwer_noise_dominant(table)?,
            clean: table.clean(),
        })
    }
}

/// One line of the machine-readable evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum EvalRecord {
    Meta { label: String, video_only: bool, utterances: usize },
    Cell { condition: String, wer: f64 },
    Aggregate { name: String, value: f64 },
}

/// A labelled evaluation: cells plus their aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalArtifact {
    pub label: String,
    pub video_only: bool,
    pub utterances: usize,
    pub table: EvalTable,
    pub report: AggregateReport,
}

fn aggregate_pairs(report: &AggregateReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (cat, v) in &report.category_average {
        out.push((format!("{cat}.avg"), *v));
    }
    for (cat, v) in &report.category_noise_dominant {
        out.push((format!("{cat}.noise_dominant"), *v));
    }
    out.push(("nwer".into(), report.nwer));
    out.push(("nwer_noise_dominant".into(), report.nwer_noise_dominant));
    out
}

impl EvalArtifact {
    pub fn new(label: impl Into<String>, video_only: bool, utterances: usize, table: EvalTable) -> Result<Self> {
        let report = AggregateReport::from_table(&table)?;
        Ok(Self {
            label: label.into(),
            video_only,
            utterances,
            table,
            report,
        })
    }

    pub fn records(&self) -> Vec<EvalRecord> {
        let mut out = vec![EvalRecord::Meta {
            label: self.label.clone(),
            video_only: self.video_only,
            utterances: self.utterances,
        }];
        for (cond, wer) in self.table.cells() {
            out.push(EvalRecord::Cell {
                condition: cond.to_string(),
                wer: *wer,
            });
        }
        for (name, value) in aggregate_pairs(&self.report) {
            out.push(EvalRecord::Aggregate { name, value });
        }
        out
    }

    /// JSON lines, one record per line.
    pub fn to_jsonl(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    /// Parses JSON lines and checks the stored aggregates against the cells.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut meta = None;
        let mut table = EvalTable::new();
        let mut stored = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: EvalRecord = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("eval record line {}: {e}", i + 1)))?;
            match rec {
                EvalRecord::Meta { label, video_only, utterances } => meta = Some((label, video_only, utterances)),
                EvalRecord::Cell { condition, wer } => table.insert(condition.parse()?, wer),
                EvalRecord::Aggregate { name, value } => {
                    stored.insert(name, value);
                }
            }
        }
        let (label, video_only, utterances) =
            meta.ok_or_else(|| Error::Config("eval output has no meta record".into()))?;
        let artifact = Self::new(label, video_only, utterances, table)?;
        for (name, value) in aggregate_pairs(&artifact.report) {
            match stored.get(&name) {
                Some(&s) if s == value => {}
                Some(&s) => {
                    return Err(Error::Config(format!(
                        "stored aggregate {name} = {s} disagrees with cells ({value})"
                    )))
                }
                None => return Err(Error::Config(format!("aggregate {name} missing"))),
            }
        }
        Ok(artifact)
    }

    /// Text table: one row per category with the SNR columns and averages.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "noise");
        for snr in SNR_GRID_DB {
            let _ = write!(s, "\t{snr:>6}");
        }
        let _ = writeln!(s, "\t{:>6}\t{:>6}", "avg", "snr<=0");
        for cat in NoiseCategory::ALL {
            let _ = write!(s, "{:<10}", cat.as_str());
            for snr_db in SNR_GRID_DB {
                let v = self.table.get(&NoiseCondition::Noisy { category: cat, snr_db });
                let _ = write!(s, "\t{:>6.1}", v.unwrap_or(f64::NAN));
            }
            let _ = writeln!(
                s,
                "\t{:>6.1}\t{:>6.1}",
                self.report.category_average[&cat], self.report.category_noise_dominant[&cat]
            );
        }
        let _ = writeln!(s, "N-WER\t{:.2}", self.report.nwer);
        let _ = writeln!(s, "N-WER (snr<=0)\t{:.2}", self.report.nwer_noise_dominant);
        if let Some(c) = self.report.clean {
            let _ = writeln!(s, "clean\t{c:.2}");
        }
        s
    }
}

/// One comparison row: audio-visual aggregates plus the video-only WER.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub noise_dominant: Option<BTreeMap<NoiseCategory, f64>>,
    pub nwer_noise_dominant: Option<f64>,
    pub video_only: Option<f64>,
}

/// Merges artifacts by label, in order of first appearance. Refuses
/// artifacts whose condition grids differ.
pub fn comparison_rows(artifacts: &[EvalArtifact]) -> Result<Vec<ComparisonRow>> {
    let first = artifacts
        .first()
        .ok_or_else(|| Error::Config("report needs at least one eval output".into()))?;
    let grid: Vec<&NoiseCondition> = first.table.cells().map(|(c, _)| c).collect();
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for a in artifacts {
        let g: Vec<&NoiseCondition> = a.table.cells().map(|(c, _)| c).collect();
        if g != grid {
            return Err(Error::Config(format!(
                "eval output `{}` uses a different condition grid",
                a.label
            )));
        }
        let idx = match rows.iter().position(|r| r.label == a.label) {
            Some(i) => i,
            None => {
                rows.push(ComparisonRow {
                    label: a.label.clone(),
                    noise_dominant: None,
                    nwer_noise_dominant: None,
                    video_only: None,
                });
                rows.len() - 1
            }
        };
        let row = &mut rows[idx];
        if a.video_only {
            row.video_only = Some(a.report.clean.unwrap_or(a.report.nwer));
        } else {
            row.noise_dominant = Some(a.report.category_noise_dominant.clone());
            row.nwer_noise_dominant = Some(a.report.nwer_noise_dominant);
        }
    }
    Ok(rows)
}

/// Tab-delimited comparison: noise-dominant WER per noise source, their
/// mean, and the video-only WER.
pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("config");
    for cat in NoiseCategory::ALL {
        let _ = write!(s, "\t{cat}");
    }
    s.push_str("\tN-WER(snr<=0)\tvideo-only\n");
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    for r in rows {
        s.push_str(&r.label);
        for cat in NoiseCategory::ALL {
            let _ = write!(s, "\t{}", fmt(r.noise_dominant.as_ref().map(|m| m[&cat])));
        }
        let _ = writeln!(s, "\t{}\t{}", fmt(r.nwer_noise_dominant), fmt(r.video_only));
    }
    s
}
