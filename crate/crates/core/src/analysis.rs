//! Cross-domain transfer matrices: collection from a run registry, per-column
//! min-max normalization, element-wise aggregation, per-target bar
//! summaries and best-source selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::models::Arch;
use crate::transfer::{FineTunePolicy, RegistryRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("missing cell: {model} {source_id} -> {target_id} ({policy})")]
    MissingCell {
        model: Arch,
        source_id: String,
        target_id: String,
        policy: FineTunePolicy,
    },
    #[error("conflicting records for {model} {source_id} -> {target_id} ({policy}): {first} vs {second}")]
    RegistryConflict {
        model: Arch,
        source_id: String,
        target_id: String,
        policy: FineTunePolicy,
        first: f64,
        second: f64,
    },
    #[error("record for unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("inconsistent matrices: {0}")]
    Shape(String),
    #[error("invalid aggregation configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationConfig {
    /// Datasets.
    pub n: usize,
    /// Models.
    pub m: usize,
    /// Fine-tuning methods.
    pub f: usize,
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.n < 2 || self.m < 1 || self.f < 1 {
            return Err(AnalysisError::Config(format!(
                "need N >= 2, M >= 1, F >= 1; got {}, {}, {}",
                self.n, self.m, self.f
            )));
        }
        Ok(())
    }
}

/// Raw ROC-AUC percentages, `cells[source][target]`. The diagonal holds the
/// single-domain score under `All` and is always absent under `OutputOnly`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub model: Arch,
    pub policy: FineTunePolicy,
    pub datasets: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl TransferMatrix {
    pub fn n(&self) -> usize {
        self.datasets.len()
    }

    pub fn index_of(&self, dataset: &str) -> Option<usize> {
        self.datasets.iter().position(|d| d == dataset)
    }

    /// Off-diagonal scores of one target column, in source order.
    pub fn column(&self, target: usize) -> Vec<f64> {
        (0..self.n())
            .filter(|&s| s != target)
            .map(|s| self.cells[s][target].expect("complete matrix"))
            .collect()
    }
}

/// `cells[source][target]` in `[0, 1]` with an empty diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMatrix {
    pub datasets: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl AggregateMatrix {
    pub fn get(&self, source: &str, target: &str) -> Option<f64> {
        let s = self.datasets.iter().position(|d| d == source)?;
        let t = self.datasets.iter().position(|d| d == target)?;
        self.cells[s][t]
    }
}

/// Registry fraction to matrix percentage, rounded to 1e-6 points so that
/// a fraction parsed from a two-decimal percentage maps back to exactly the
/// same double.
pub fn to_percent(fraction: f64) -> f64 {
    libm::round(fraction * 1e8) / 1e6
}

/// Groups registry records into one matrix per (model, policy), models in
/// `models` order and policies `OutputOnly` then `All`. Identical duplicate
/// records are tolerated; every off-diagonal cell must be present.
pub fn collect_matrices(
    records: &[RegistryRecord],
    datasets: &[String],
    models: &[Arch],
) -> Result<Vec<TransferMatrix>, AnalysisError> {
    AggregationConfig {
        n: datasets.len(),
        m: models.len(),
        f: FineTunePolicy::ALL.len(),
    }
    .validate()?;
    let idx = |d: &str| {
        datasets
            .iter()
            .position(|x| x == d)
            .ok_or_else(|| AnalysisError::UnknownDataset(d.into()))
    };
    let mut table: BTreeMap<(Arch, FineTunePolicy, usize, usize), f64> = BTreeMap::new();
    for r in records {
        if !models.contains(&r.model) {
            continue;
        }
        let (s, t) = (idx(&r.source)?, idx(&r.target)?);
        if s == t && r.policy == FineTunePolicy::OutputOnly {
            continue;
        }
        let pct = to_percent(r.roc_auc);
        if let Some(&prev) = table.get(&(r.model, r.policy, s, t)) {
            if prev != pct {
                return Err(AnalysisError::RegistryConflict {
                    model: r.model,
                    source_id: r.source.clone(),
                    target_id: r.target.clone(),
                    policy: r.policy,
                    first: prev,
                    second: pct,
                });
            }
        }
        table.insert((r.model, r.policy, s, t), pct);
    }
    let n = datasets.len();
    let mut out = Vec::new();
    for &model in models {
        for policy in FineTunePolicy::ALL {
            let mut cells = vec![vec![None; n]; n];
            for (s, row) in cells.iter_mut().enumerate() {
                for (t, cell) in row.iter_mut().enumerate() {
                    let v = table.get(&(model, policy, s, t)).copied();
                    if v.is_none() && s != t {
                        return Err(AnalysisError::MissingCell {
                            model,
                            source_id: datasets[s].clone(),
                            target_id: datasets[t].clone(),
                            policy,
                        });
                    }
                    *cell = v;
                }
            }
            out.push(TransferMatrix {
                model,
                policy,
                datasets: datasets.to_vec(),
                cells,
            });
        }
    }
    Ok(out)
}

/// `(x − min)/(max − min)`; an all-equal column maps to 0.5 everywhere.
pub fn minmax_normalize(column: &[f64]) -> Vec<f64> {
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; column.len()];
    }
    column.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

/// Column-wise normalization of the off-diagonal cells; diagonal left empty.
#[allow(clippy::needless_range_loop)]
pub fn normalize(matrix: &TransferMatrix) -> AggregateMatrix {
    let n = matrix.n();
    let mut cells = vec![vec![None; n]; n];
    for t in 0..n {
        let norm = minmax_normalize(&matrix.column(t));
        let sources = (0..n).filter(|&s| s != t);
        for (s, v) in sources.zip(norm) {
            cells[s][t] = Some(v);
        }
    }
    AggregateMatrix {
        datasets: matrix.datasets.clone(),
        cells,
    }
}

fn check_same_datasets(matrices: &[TransferMatrix]) -> Result<&[String], AnalysisError> {
    let first = matrices
        .first()
        .ok_or_else(|| AnalysisError::Shape("no matrices".into()))?;
    for m in matrices {
        if m.datasets != first.datasets || m.cells.len() != m.n() || m.cells.iter().any(|r| r.len() != m.n()) {
            return Err(AnalysisError::Shape(format!(
                "{} {} has datasets {:?}, expected {:?}",
                m.model, m.policy, m.datasets, first.datasets
            )));
        }
        for t in 0..m.n() {
            for s in (0..m.n()).filter(|&s| s != t) {
                if m.cells[s][t].is_none() {
                    return Err(AnalysisError::MissingCell {
                        model: m.model,
                        source_id: m.datasets[s].clone(),
                        target_id: m.datasets[t].clone(),
                        policy: m.policy,
                    });
                }
            }
        }
    }
    Ok(&first.datasets)
}

/// Element-wise mean of the normalized matrices.
pub fn aggregate(matrices: &[TransferMatrix]) -> Result<AggregateMatrix, AnalysisError> {
    let datasets = check_same_datasets(matrices)?.to_vec();
    let n = datasets.len();
    let mut sum = vec![vec![0.0; n]; n];
    for m in matrices {
        let norm = normalize(m);
        for (s, row) in norm.cells.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    sum[s][t] += v;
                }
            }
        }
    }
    let k = matrices.len() as f64;
    let cells = sum
        .into_iter()
        .enumerate()
        .map(|(s, row)| {
            row.into_iter()
                .enumerate()
                .map(|(t, v)| if s == t { None } else { Some(v / k) })
                .collect()
        })
        .collect();
    Ok(AggregateMatrix { datasets, cells })
}

/// Per target: the mean raw score over models for each source under
/// `policy`, and the mean single-domain score as reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarSummary {
    pub policy: FineTunePolicy,
    pub datasets: Vec<String>,
    /// `bars[target][source]`, absent when `source == target`.
    pub bars: Vec<Vec<Option<f64>>>,
    /// Mean `All` diagonal per target, when every model has one.
    pub single_domain: Vec<Option<f64>>,
}

impl BarSummary {
    pub fn bar(&self, target: &str, source: &str) -> Option<f64> {
        let t = self.datasets.iter().position(|d| d == target)?;
        let s = self.datasets.iter().position(|d| d == source)?;
        self.bars[t][s]
    }

    /// Max minus min transfer bar of one target.
    pub fn spread(&self, target: usize) -> f64 {
        let vals: Vec<f64> = self.bars[target].iter().flatten().copied().collect();
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

pub fn bar_summary(matrices: &[TransferMatrix], policy: FineTunePolicy) -> Result<BarSummary, AnalysisError> {
    let datasets = check_same_datasets(matrices)?.to_vec();
    let n = datasets.len();
    let chosen: Vec<&TransferMatrix> = matrices.iter().filter(|m| m.policy == policy).collect();
    if chosen.is_empty() {
        return Err(AnalysisError::Shape(format!("no {policy} matrices")));
    }
    let k = chosen.len() as f64;
    let bars = (0..n)
        .map(|t| {
            (0..n)
                .map(|s| (s != t).then(|| chosen.iter().map(|m| m.cells[s][t].expect("checked")).sum::<f64>() / k))
                .collect()
        })
        .collect();
    let diag: Vec<&TransferMatrix> = matrices.iter().filter(|m| m.policy == FineTunePolicy::All).collect();
    let single_domain = (0..n)
        .map(|t| {
            let vals: Option<Vec<f64>> = diag.iter().map(|m| m.cells[t][t]).collect();
            vals.filter(|v| !v.is_empty())
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Ok(BarSummary {
        policy,
        datasets,
        bars,
        single_domain,
    })
}

/// Sources attaining the maximum of `target`'s column; all tied sources are
/// returned in dataset order.
pub fn best_source(aggregate: &AggregateMatrix, target: &str) -> Option<Vec<String>> {
    let t = aggregate.datasets.iter().position(|d| d == target)?;
    let col: Vec<(usize, f64)> = (0..aggregate.datasets.len())
        .filter_map(|s| aggregate.cells[s][t].map(|v| (s, v)))
        .collect();
    let hi = col.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    let best: Vec<String> = col
        .iter()
        .filter(|&&(_, v)| v == hi)
        .map(|&(s, _)| aggregate.datasets[s].clone())
        .collect();
    (!best.is_empty()).then_some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    fn rec(model: Arch, s: usize, t: usize, policy: FineTunePolicy, v: f64) -> RegistryRecord {
        RegistryRecord {
            model,
            source: format!("d{s}"),
            target: format!("d{t}"),
            policy,
            seed: 0,
            roc_auc: v,
            pr_auc: None,
        }
    }

    fn full_registry(n: usize) -> Vec<RegistryRecord> {
        let mut r = Vec::new();
        for p in FineTunePolicy::ALL {
            for s in 0..n {
                for t in 0..n {
                    if s != t || p == FineTunePolicy::All {
                        r.push(rec(Arch::VggIsh, s, t, p, 0.5 + 0.01 * (s * n + t) as f64));
                    }
                }
            }
        }
        r
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(minmax_normalize(&[3.0, 3.0, 3.0]), [0.5; 3]);
        assert_eq!(minmax_normalize(&[0.8, 0.7]), [1.0, 0.0]);
    }

    #[test]
    fn missing_and_conflicting_cells() {
        let mut r = full_registry(3);
        let m = collect_matrices(&r, &names(3), &[Arch::VggIsh]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].cells[1][1], None);
        assert!(m[1].cells[1][1].is_some());
        r.push(rec(Arch::VggIsh, 0, 1, FineTunePolicy::All, 0.1));
        assert!(matches!(
            collect_matrices(&r, &names(3), &[Arch::VggIsh]),
            Err(AnalysisError::RegistryConflict { .. })
        ));
        let mut r = full_registry(3);
        r.retain(|x| !(x.source == "d2" && x.target == "d0" && x.policy == FineTunePolicy::OutputOnly));
        assert_eq!(
            collect_matrices(&r, &names(3), &[Arch::VggIsh]).unwrap_err(),
            AnalysisError::MissingCell {
                model: Arch::VggIsh,
                source_id: "d2".to_string(),
                target_id: "d0".to_string(),
                policy: FineTunePolicy::OutputOnly
            }
        );
    }

    #[test]
    fn single_matrix_aggregate_is_its_normalization() {
        let m = collect_matrices(&full_registry(4), &names(4), &[Arch::VggIsh]).unwrap();
        assert_eq!(aggregate(&m[..1]).unwrap(), normalize(&m[0]));
        let bars = bar_summary(&m[..1], FineTunePolicy::OutputOnly).unwrap();
        assert_eq!(bars.bar("d1", "d0"), m[0].cells[0][1]);
    }

    #[test]
    fn ties_report_every_best_source() {
        let agg = AggregateMatrix {
            datasets: names(3),
            cells: vec![
                vec![None, Some(1.0), Some(0.2)],
                vec![Some(1.0), None, Some(0.2)],
                vec![Some(0.0), Some(1.0), None],
            ],
        };
        assert_eq!(best_source(&agg, "d1").unwrap(), ["d0", "d2"]);
        assert_eq!(best_source(&agg, "d2").unwrap(), ["d0", "d1"]);
        assert_eq!(best_source(&agg, "zz"), None);
    }
}
