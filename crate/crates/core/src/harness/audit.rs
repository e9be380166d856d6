use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence_filter::{build_filter, max_commutation_residual, FilterMode, FilterWeights, Permutation};
use crate::fusion_head::model_forward;
use crate::model::ModelParams;
use crate::numerics::{argmax, Real};
use crate::synth_data::{permute_options, McqaInstance};

/// Logit gap below which a changed argmax counts as a tie rather than a flip.
pub const EQUIVARIANCE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRun {
    /// `None` for explicitly supplied permutation sets.
    pub seed: Option<u64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleAuditReport {
    pub baseline_accuracy: f64,
    pub runs: Vec<ShuffleRun>,
    /// `max − min` over the baseline and every shuffled run.
    pub accuracy_spread: f64,
    /// `max |logits(π·x) − π·logits(x)|` over all instances and runs.
    pub max_logit_residual: f64,
    /// Instances whose prediction moved under at least one permutation.
    pub argmax_change_fraction: f64,
}

impl fmt::Display for ShuffleAuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "baseline accuracy   {:.4}", self.baseline_accuracy)?;
        for (i, run) in self.runs.iter().enumerate() {
            match run.seed {
                Some(s) => writeln!(f, "shuffle seed {s:<6} {:.4}", run.accuracy)?,
                None => writeln!(f, "shuffle set {i:<7} {:.4}", run.accuracy)?,
            }
        }
        writeln!(f, "accuracy spread     {:.4}", self.accuracy_spread)?;
        writeln!(f, "max logit residual  {:.3e}", self.max_logit_residual)?;
        write!(f, "argmax changed      {:.4}", self.argmax_change_fraction)
    }
}

/// Re-evaluates `dataset` under one random option order per instance for each seed.
pub fn shuffle_audit<T: Real>(
    params: &ModelParams<T>,
    dataset: &[McqaInstance],
    seeds: &[u64],
) -> Result<ShuffleAuditReport> {
    if seeds.is_empty() {
        return Err(Error::contract("shuffle audit needs at least one seed"));
    }
    let sets: Vec<Vec<Permutation>> = seeds
        .iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            dataset.iter().map(|_| Permutation::random(&mut rng)).collect()
        })
        .collect();
    let mut report = shuffle_audit_with(params, dataset, &sets)?;
    for (run, &s) in report.runs.iter_mut().zip(seeds) {
        run.seed = Some(s);
    }
    Ok(report)
}

/// Same as [`shuffle_audit`] with explicit permutations: `sets[r][i]` reorders instance `i` in run `r`.
pub fn shuffle_audit_with<T: Real>(
    params: &ModelParams<T>,
    dataset: &[McqaInstance],
    sets: &[Vec<Permutation>],
) -> Result<ShuffleAuditReport> {
    if sets.is_empty() {
        return Err(Error::contract("shuffle audit needs at least one permutation set"));
    }
    if let Some(bad) = sets.iter().find(|s| s.len() != dataset.len()) {
        return Err(Error::Dimension {
            op: "shuffle_audit",
            left: vec![dataset.len()],
            right: vec![bad.len()],
        });
    }
    super::check_compatible(params, dataset)?;
    let n = dataset.len().max(1) as f64;

    let mut baseline_correct = 0usize;
    let mut run_correct = vec![0usize; sets.len()];
    let mut changed = 0usize;
    let mut residual = 0f64;

    for (i, inst) in dataset.iter().enumerate() {
        let base: Vec<f64> = model_forward(inst, params)?.iter().map(|v| v.as_f64()).collect();
        let base_pred = argmax(&base);
        baseline_correct += usize::from(base_pred == inst.label);
        let mut flipped = false;
        for (r, set) in sets.iter().enumerate() {
            let perm = &set[i];
            let shuffled = permute_options(inst, perm);
            let logits: Vec<f64> = model_forward(&shuffled, params)?.iter().map(|v| v.as_f64()).collect();
            let expected = perm.apply(&base);
            for (a, b) in logits.iter().zip(&expected) {
                residual = residual.max((a - b).abs());
            }
            let pred = argmax(&logits);
            run_correct[r] += usize::from(pred == shuffled.label);
            // Map the shuffled prediction back to the original option index.
            let original = perm.as_slice()[pred];
            if original != base_pred && (base[base_pred] - base[original]).abs() > EQUIVARIANCE_TOLERANCE {
                flipped = true;
            }
        }
        changed += usize::from(flipped);
    }

    let baseline_accuracy = baseline_correct as f64 / n;
    let runs: Vec<ShuffleRun> = run_correct
        .iter()
        .map(|&c| ShuffleRun {
            seed: None,
            accuracy: c as f64 / n,
        })
        .collect();
    let (lo, hi) = runs
        .iter()
        .fold((baseline_accuracy, baseline_accuracy), |(lo, hi), r| {
            (lo.min(r.accuracy), hi.max(r.accuracy))
        });
    Ok(ShuffleAuditReport {
        baseline_accuracy,
        runs,
        accuracy_spread: hi - lo,
        max_logit_residual: residual,
        argmax_change_fraction: changed as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub block: usize,
    pub alpha: f64,
    pub beta: f64,
    pub product: f64,
    /// Largest `|A·R − R·A|` over the 24 permutation matrices.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub rows: Vec<FilterRow>,
    pub alpha_mean: f64,
    pub alpha_std: f64,
    pub beta_mean: f64,
    pub beta_std: f64,
    /// `α·β < 0` in every row.
    pub opposite_sign: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl FilterReport {
    /// Builds the report from `(block, α, β)` triples. Standard deviations are population ones.
    pub fn from_values(values: &[(usize, f64, f64)]) -> Result<Self> {
        let rows = values
            .iter()
            .map(|&(block, alpha, beta)| {
                Ok(FilterRow {
                    block,
                    alpha,
                    beta,
                    product: alpha * beta,
                    residual: max_commutation_residual(&build_filter(alpha, beta))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
        let betas: Vec<f64> = rows.iter().map(|r| r.beta).collect();
        let (alpha_mean, alpha_std) = mean_std(&alphas);
        let (beta_mean, beta_std) = mean_std(&betas);
        let opposite_sign = !rows.is_empty() && rows.iter().all(|r| r.product < 0.0);
        Ok(FilterReport {
            rows,
            alpha_mean,
            alpha_std,
            beta_mean,
            beta_std,
            opposite_sign,
        })
    }
}

const COLUMNS_PER_LINE: usize = 12;

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (c, chunk) in self.rows.chunks(COLUMNS_PER_LINE).enumerate() {
            if c > 0 {
                writeln!(f)?;
            }
            let line = |label: &str, cell: &dyn Fn(&FilterRow) -> String| {
                let mut s = format!("{label:<9}");
                for r in chunk {
                    s.push_str(&format!(" {:>9}", cell(r)));
                }
                s
            };
            // Blocks are shown 1-based.
            writeln!(f, "{}", line("Index", &|r| (r.block + 1).to_string()))?;
            writeln!(f, "{}", line("alpha", &|r| format!("{:.4}", r.alpha)))?;
            writeln!(f, "{}", line("beta", &|r| format!("{:.4}", r.beta)))?;
            writeln!(f, "{}", line("alpha*beta", &|r| format!("{:.4}", r.product)))?;
            writeln!(f, "{}", line("residual", &|r| format!("{:.1e}", r.residual)))?;
        }
        writeln!(f)?;
        writeln!(f, "alpha {:.4}±{:.4}", self.alpha_mean, self.alpha_std)?;
        writeln!(f, "beta  {:.4}±{:.4}", self.beta_mean, self.beta_std)?;
        write!(
            f,
            "opposite sign in all blocks: {}",
            if self.opposite_sign { "yes" } else { "no" }
        )
    }
}

/// Per-block `(α, β)` table of a constrained model.
pub fn inspect_filter<T: Real>(params: &ModelParams<T>) -> Result<FilterReport> {
    let filter = params.evidence_filter();
    if filter.mode != FilterMode::Constrained {
        return Err(Error::UnsupportedMode(format!(
            "inspect-filter needs a constrained filter, model mode is {}",
            params.config.mode
        )));
    }
    let values = filter
        .blocks
        .iter()
        .map(|(k, w)| match w {
            FilterWeights::Constrained { alpha, beta } => Ok((*k, alpha.as_f64(), beta.as_f64())),
            FilterWeights::Unconstrained(_) => Err(Error::contract("constrained model holds a free filter")),
        })
        .collect::<Result<Vec<_>>>()?;
    FilterReport::from_values(&values)
}
