//! Published transfer and single-domain scores bundled as CSV.

use std::io::Read;

use mtag_core::models::Arch;
use mtag_core::transfer::{FineTunePolicy, RegistryRecord};
use serde::{Deserialize, Serialize};

pub const TRANSFER_CSV: &str = include_str!("../fixtures/published_transfer.csv");
pub const SINGLE_DOMAIN_CSV: &str = include_str!("../fixtures/published_single_domain.csv");

/// Dataset ids in the published row/column order.
pub const PUBLISHED_DATASETS: [&str; 6] = ["magnatagatune", "fma", "lyra", "makam", "hindustani", "carnatic"];

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Deserialize)]
struct TransferRow {
    model: String,
    policy: String,
    source: String,
    target: String,
    roc_auc_pct: f64,
}

/// Parses `model,policy,source,target,roc_auc_pct` rows into registry
/// records (scores as fractions, seed 0).
pub fn read_transfer_table(reader: impl Read) -> Result<Vec<RegistryRecord>, FixtureError> {
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_reader(reader)
        .deserialize::<TransferRow>()
        .enumerate()
    {
        let row = row?;
        let bad = |message: String| FixtureError::Row { row: i + 1, message };
        let model = Arch::parse(&row.model).ok_or_else(|| bad(format!("unknown model `{}`", row.model)))?;
        let policy =
            FineTunePolicy::parse(&row.policy).ok_or_else(|| bad(format!("unknown policy `{}`", row.policy)))?;
        out.push(RegistryRecord {
            model,
            source: row.source,
            target: row.target,
            policy,
            seed: 0,
            roc_auc: row.roc_auc_pct / 100.0,
            pr_auc: None,
        });
    }
    Ok(out)
}

pub fn published_transfer() -> Vec<RegistryRecord> {
    read_transfer_table(TRANSFER_CSV.as_bytes()).expect("bundled fixture parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleDomainScore {
    pub model: Arch,
    pub dataset: String,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

#[derive(Deserialize)]
struct SingleRow {
    model: String,
    dataset: String,
    roc_auc: f64,
    pr_auc: f64,
}

pub fn published_single_domain() -> Vec<SingleDomainScore> {
    csv::Reader::from_reader(SINGLE_DOMAIN_CSV.as_bytes())
        .deserialize::<SingleRow>()
        .map(|r| {
            let r = r.expect("bundled fixture parses");
            SingleDomainScore {
                model: Arch::parse(&r.model).expect("known model"),
                dataset: r.dataset,
                roc_auc: r.roc_auc,
                pr_auc: r.pr_auc,
            }
        })
        .collect()
}
