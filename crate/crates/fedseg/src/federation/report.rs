//! Per-round result rows and their CSV serialization.

use std::path::Path;

use crate::error::Result;

/// One client's numbers for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRow {
    pub round: usize,
    pub client: String,
    pub dice: f64,
    pub hd95: f64,
    pub mean_lambda: f64,
    pub agreement_rate: f64,
    pub unsup_loss: f64,
}

/// All client rows for one round plus their plain means.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub rows: Vec<ClientRow>,
    pub mean_dice: f64,
    pub mean_hd95: f64,
    pub mean_agreement: f64,
}

impl RoundReport {
    pub fn new(round: usize, rows: Vec<ClientRow>) -> RoundReport {
        let n = rows.len().max(1) as f64;
        let mean_dice = rows.iter().map(|r| r.dice).sum::<f64>() / n;
        let mean_hd95 = rows.iter().map(|r| r.hd95).sum::<f64>() / n;
        let mean_agreement = rows.iter().map(|r| r.agreement_rate).sum::<f64>() / n;
        RoundReport { round, rows, mean_dice, mean_hd95, mean_agreement }
    }
}

pub const CSV_HEADER: &str = "round,client,dice,hd95,mean_lambda,agreement_rate,unsup_loss";

/// Render reports as CSV text: fixed header, one row per client per round,
/// floats with six decimals.
pub fn csv_string(reports: &[RoundReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for report in reports {
        for r in &report.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.round, r.client, r.dice, r.hd95, r.mean_lambda, r.agreement_rate, r.unsup_loss
            ));
        }
    }
    out
}

pub fn write_csv(path: &Path, reports: &[RoundReport]) -> Result<()> {
    std::fs::write(path, csv_string(reports))?;
    Ok(())
}
