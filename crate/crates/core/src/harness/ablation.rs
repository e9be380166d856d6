use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{evaluate, train};
use crate::error::Result;
use crate::model::AblationMode;
use crate::numerics::Real;
use crate::synth_data::McqaInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub label: String,
    /// Held-out accuracy in `[0, 1]`.
    pub accuracy: f64,
    /// Published accuracy in percent, for orientation.
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn accuracy(&self, mode: AblationMode) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.accuracy)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>9}  {:>9}", "Model", "toy (%)", "paper (%)")?;
        for (i, r) in self.rows.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(
                f,
                "{:<width$}  {:>9.1}  {:>9.1}",
                r.label,
                100.0 * r.accuracy,
                r.reference
            )?;
        }
        Ok(())
    }
}

/// Trains and evaluates all five configurations on the same data and seed.
///
/// Only `mode` differs between rows; everything else comes from `base`.
pub fn run_ablation_suite<T: Real>(
    base: &TrainConfig,
    train_set: &[McqaInstance],
    test_set: &[McqaInstance],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(AblationMode::ALL.len());
    for mode in AblationMode::ALL {
        let cfg = TrainConfig {
            mode,
            ..base.clone()
        };
        let ck = train::<T>(&cfg, train_set, None, |_| {})?;
        let row = AblationRow {
            mode,
            label: mode.table_label().to_string(),
            accuracy: evaluate(&ck.params, test_set)?,
            reference: mode.reference_accuracy(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(AblationTable { seed: base.seed, rows })
}
