//! Prediction tables, report files and α-sweep curves on disk.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::MetricsReport;
use crate::error::{Error, Result};

/// Track-level logits: header `track_id<TAB>tag...`, then one row per track.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub track_ids: Vec<String>,
    pub tags: Vec<String>,
    pub logits: Array2<f64>,
}

impl PredictionTable {
    pub fn new(track_ids: Vec<String>, tags: Vec<String>, logits: Array2<f64>) -> Result<Self> {
        if logits.dim() != (track_ids.len(), tags.len()) {
            return Err(Error::Shape(format!(
                "logits {:?} for {} tracks × {} tags",
                logits.dim(),
                track_ids.len(),
                tags.len()
            )));
        }
        Ok(Self {
            track_ids,
            tags,
            logits,
        })
    }

    pub fn serialize(&self) -> String {
        let mut out = String::from("track_id");
        for t in &self.tags {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
        for (id, row) in self.track_ids.iter().zip(self.logits.rows()) {
            out.push_str(id);
            for v in row {
                // Display prints the shortest round-tripping form.
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty prediction file".into()))?;
        let mut cols = header.split('\t');
        if cols.next() != Some("track_id") {
            return Err(err(1, "header must start with `track_id`".into()));
        }
        let tags: Vec<String> = cols.map(str::to_owned).collect();
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines {
            let mut f = line.split('\t');
            ids.push(f.next().unwrap_or_default().to_owned());
            let row: Vec<f64> = f
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| err(i + 1, format!("bad logit `{v}`: {e}")))
                })
                .collect::<Result<_>>()?;
            if row.len() != tags.len() {
                return Err(err(
                    i + 1,
                    format!("expected {} logits, found {}", tags.len(), row.len()),
                ));
            }
            values.extend(row);
        }
        let logits = Array2::from_shape_vec((ids.len(), tags.len()), values).expect("row lengths checked");
        Self::new(ids, tags, logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.serialize())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Rows reordered to `ids`; every id must be present.
    pub fn select(&self, ids: &[&str]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.tags.len()));
        for (i, id) in ids.iter().enumerate() {
            let r = self
                .track_ids
                .iter()
                .position(|t| t == id)
                .ok_or_else(|| Error::Integrity(format!("no prediction for track `{id}`")))?;
            out.row_mut(i).assign(&self.logits.row(r));
        }
        Ok(out)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv(r: &MetricsReport) -> String {
    let mut out = String::from("tag,roc_auc,pr_auc,f_score,tpr,tnr,threshold\n");
    for t in &r.per_tag {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            t.tag,
            opt(t.roc_auc),
            opt(t.pr_auc),
            t.f_score,
            opt(t.tpr),
            opt(t.tnr),
            t.threshold
        );
    }
    out
}

/// Writes `<stem>.json` and `<stem>.csv` under `dir`.
pub fn write_report(r: &MetricsReport, dir: &Path, stem: &str) -> Result<()> {
    let json = serde_json::to_string_pretty(r).expect("report serializes");
    write_text(&dir.join(format!("{stem}.json")), &json)?;
    write_text(&dir.join(format!("{stem}.csv")), &report_csv(r))
}

pub fn curve_csv(curve: &[(f64, f64)], metric: &str) -> String {
    let mut out = format!("alpha,{metric}\n");
    for (a, v) in curve {
        let _ = writeln!(out, "{a},{v}");
    }
    out
}
