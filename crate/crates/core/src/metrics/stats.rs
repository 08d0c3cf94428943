//! Paired t-tests and grouped summaries of evaluation records.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::protocol::{EvalRecord, Metric};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p: f64,
    /// The differences have zero variance but a nonzero mean.
    pub degenerate: bool,
}

/// Two-sided paired-samples t-test of `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                df,
                p: 1.0,
                degenerate: false,
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                df,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(TTest {
        t,
        df,
        p: (2.0 * dist.sf(t.abs())).min(1.0),
        degenerate: false,
    })
}

/// Record fields tables can be grouped by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Observer,
    Video,
    Step,
    Protocol,
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Observer => "observer",
            GroupKey::Video => "video",
            GroupKey::Step => "step",
            GroupKey::Protocol => "protocol",
        }
    }

    fn value(self, r: &EvalRecord) -> String {
        match self {
            GroupKey::Observer => r.observer.to_string(),
            GroupKey::Video => r.video.clone(),
            GroupKey::Step => r.step.to_string(),
            GroupKey::Protocol => r.protocol.name().to_owned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// Values of the grouping keys, in key order.
    pub keys: Vec<String>,
    pub metric: Metric,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub keys: Vec<GroupKey>,
    pub rows: Vec<SummaryRow>,
    /// Records without a defined value.
    pub excluded: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and standard deviation per metric within each group of `keys`.
pub fn aggregate(records: &[EvalRecord], keys: &[GroupKey]) -> SummaryTable {
    let mut groups: BTreeMap<(Vec<String>, Metric), Vec<f64>> = BTreeMap::new();
    let mut excluded = 0;
    for r in records {
        match r.value {
            Some(v) => groups
                .entry((keys.iter().map(|k| k.value(r)).collect(), r.metric))
                .or_default()
                .push(v),
            None => excluded += 1,
        }
    }
    let rows = groups
        .into_iter()
        .map(|((keys, metric), v)| {
            let (mean, std) = mean_std(&v);
            SummaryRow {
                keys,
                metric,
                mean,
                std,
                n: v.len(),
            }
        })
        .collect();
    SummaryTable {
        keys: keys.to_vec(),
        rows,
        excluded,
    }
}

/// Per observer: the standard deviation of per-video means, then the mean of
/// those over observers. Grouped additionally by `keys`.
pub fn video_variance(records: &[EvalRecord], keys: &[GroupKey]) -> SummaryTable {
    let mut inner = vec![GroupKey::Observer, GroupKey::Video];
    inner.extend(keys.iter().copied().filter(|k| !matches!(k, GroupKey::Observer | GroupKey::Video)));
    let per_video = aggregate(records, &inner);
    let mut per_observer: BTreeMap<(Vec<String>, Metric, String), Vec<f64>> = BTreeMap::new();
    for row in &per_video.rows {
        let outer: Vec<String> = row.keys[2..].to_vec();
        per_observer.entry((outer, row.metric, row.keys[0].clone())).or_default().push(row.mean);
    }
    let mut outer: BTreeMap<(Vec<String>, Metric), Vec<f64>> = BTreeMap::new();
    for ((k, m, _), means) in per_observer {
        outer.entry((k, m)).or_default().push(mean_std(&means).1);
    }
    let rows = outer
        .into_iter()
        .map(|((keys, metric), stds)| {
            let (mean, std) = mean_std(&stds);
            SummaryRow {
                keys,
                metric,
                mean,
                std,
                n: stds.len(),
            }
        })
        .collect();
    SummaryTable {
        keys: inner[2..].to_vec(),
        rows,
        excluded: per_video.excluded,
    }
}

impl SummaryTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = self.keys.iter().map(|k| k.name()).collect();
        header.extend(["metric", "mean", "std", "n"]);
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = r.keys.clone();
            rec.push(r.metric.name().to_owned());
            rec.push(format!("{:.6}", r.mean));
            rec.push(format!("{:.6}", r.std));
            rec.push(r.n.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn find(&self, keys: &[&str], metric: Metric) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.metric == metric && r.keys.iter().map(String::as_str).eq(keys.iter().copied()))
    }
}
