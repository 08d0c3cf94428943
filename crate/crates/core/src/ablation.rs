//! Cue ablation: one model per non-empty cue subset and variant, with the
//! fixation history always present.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datamodel::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::integrator::{ModelConfig, Variant};
use crate::metrics::{evaluate_all, EvalRecord, Metric, Protocol};
use crate::train::{train_loop, TrainConfig};

/// Non-empty subsets of `cues`, smallest first, each in canonical order.
pub fn cue_subsets(cues: &[Modality]) -> Result<Vec<Vec<Modality>>> {
    let mut base = cues.to_vec();
    base.sort();
    base.dedup();
    if base.is_empty() || base.len() != cues.len() {
        return Err(Error::Config(format!("ablation needs distinct cues, got {cues:?}")));
    }
    let n = base.len();
    let mut out: Vec<Vec<Modality>> = (1u32..(1 << n))
        .map(|mask| base.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &m)| m).collect())
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    Ok(out)
}

pub fn subset_label(cues: &[Modality]) -> String {
    cues.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    /// Cues whose subsets are enumerated.
    pub cues: Vec<Modality>,
    pub seeds: Vec<u64>,
    pub protocol: Protocol,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Argmu, Variant::Largmu],
            cues: Modality::ALL.to_vec(),
            seeds: vec![0],
            protocol: Protocol::OneVsOne,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub cues: Vec<Modality>,
    pub seed: u64,
    pub aucj: f64,
    pub nss: f64,
    pub best_epoch: usize,
}

/// Median over seeds of one (variant, subset) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub cues: Vec<Modality>,
    pub aucj: f64,
    pub nss: f64,
    pub seeds: usize,
}

impl AblationCell {
    /// Number of cues: the row group.
    pub fn group(&self) -> usize {
        self.cues.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean_of(records: &[EvalRecord], metric: Metric) -> f64 {
    let v: Vec<f64> = records.iter().filter(|r| r.metric == metric).filter_map(|r| r.value).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

impl AblationReport {
    /// Cells grouped by variant, then by cue count, then by subset.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut groups: BTreeMap<(Variant, usize, Vec<Modality>), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &self.rows {
            let e = groups.entry((r.variant, r.cues.len(), r.cues.clone())).or_default();
            e.0.push(r.aucj);
            e.1.push(r.nss);
        }
        groups
            .into_iter()
            .map(|((variant, _, cues), (a, n))| AblationCell {
                variant,
                cues,
                seeds: a.len(),
                aucj: median(a),
                nss: median(n),
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,group,cues,aucj,nss,seeds\n");
        for c in self.cells() {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{}\n",
                c.variant,
                c.group(),
                subset_label(&c.cues),
                c.aucj,
                c.nss,
                c.seeds
            ));
        }
        out
    }

    /// Whether the largest subset's median AUCJ is at least every single-cue
    /// median for `variant`. `None` when either is missing.
    pub fn full_set_dominates(&self, variant: Variant) -> Option<bool> {
        let cells: Vec<AblationCell> = self.cells().into_iter().filter(|c| c.variant == variant).collect();
        let top = cells.iter().map(|c| c.group()).max()?;
        let full = cells.iter().find(|c| c.group() == top)?;
        let singles: Vec<&AblationCell> = cells.iter().filter(|c| c.group() == 1).collect();
        if singles.is_empty() || top == 1 {
            return None;
        }
        Some(singles.iter().all(|s| full.aucj >= s.aucj))
    }
}

/// Trains and scores one model per variant, subset and seed.
pub fn run_ablation(run: &RunConfig, dataset: &Dataset, spec: &AblationSpec, workers: usize) -> Result<AblationReport> {
    if spec.seeds.is_empty() || spec.variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let subsets = cue_subsets(&spec.cues)?;
    let mut rows = Vec::new();
    for &variant in &spec.variants {
        for cues in &subsets {
            let model_config = ModelConfig {
                variant,
                cues: cues.clone(),
                ..run.model.clone()
            };
            for &seed in &spec.seeds {
                let train = TrainConfig {
                    seed,
                    ..run.train.clone()
                };
                let out = train_loop(&train, &model_config, dataset)?;
                let records = evaluate_all(&out.model, dataset, &[spec.protocol], workers)?;
                rows.push(AblationRow {
                    variant,
                    cues: cues.clone(),
                    seed,
                    aucj: mean_of(&records, Metric::Aucj),
                    nss: mean_of(&records, Metric::Nss),
                    best_epoch: out.best_epoch,
                });
            }
        }
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_cues_give_seven_subsets() {
        let s = cue_subsets(&Modality::ALL).unwrap();
        assert_eq!(s.len(), 7);
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 1, 1, 2, 2, 2, 3]);
        assert_eq!(subset_label(&s[6]), "saliency+gaze+expression");
        assert_eq!(cue_subsets(&[Modality::Gaze]).unwrap(), vec![vec![Modality::Gaze]]);
        assert!(cue_subsets(&[]).is_err());
        assert!(cue_subsets(&[Modality::Gaze, Modality::Gaze]).is_err());
    }

    fn row(variant: Variant, cues: &[Modality], seed: u64, aucj: f64) -> AblationRow {
        AblationRow {
            variant,
            cues: cues.to_vec(),
            seed,
            aucj,
            nss: 0.0,
            best_epoch: 1,
        }
    }

    #[test]
    fn medians_and_dominance() {
        use Modality::*;
        let mut rows = Vec::new();
        for (seed, a) in [(0, 0.7), (1, 0.9), (2, 0.8)] {
            rows.push(row(Variant::Largmu, &[Saliency], seed, a));
            rows.push(row(Variant::Largmu, &[Gaze], seed, a - 0.1));
            rows.push(row(Variant::Largmu, &[Saliency, Gaze], seed, 0.81));
        }
        let report = AblationReport { rows };
        let cells = report.cells();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[0].cues, vec![Saliency]);
        assert!((cells[0].aucj - 0.8).abs() < 1e-12);
        assert_eq!(report.full_set_dominates(Variant::Largmu), Some(true));
        assert_eq!(report.full_set_dominates(Variant::Argmu), None);
        let csv = report.to_csv();
        assert!(csv.starts_with("variant,group,cues,aucj,nss,seeds\nlargmu,1,saliency,0.800000,0.000000,3\n"), "{csv}");
    }
}
