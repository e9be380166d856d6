use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion_head::{instance_loss, loss_and_accumulate};
use crate::model::{AblationMode, ModelConfig, ModelParams};
use crate::numerics::{finite_diff_gradient, Precision, Real};
use crate::synth_data::{generate_instance, GenSpec};

/// Settings of a gradient check. Defaults are the tiny `d = 8`, `K = 2` model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub encoder: EncoderConfig,
    pub mode: AblationMode,
    pub aux_group: bool,
    pub gen: GenSpec,
    pub precision: Precision,
    pub seeds: Vec<u64>,
    /// Noise added to every parameter after initialization so that no
    /// tensor (α, β, fusion weights) sits at a special point.
    pub perturb_std: f64,
    /// Central-difference step, always applied in 64-bit.
    pub step: f64,
    /// The relative-error denominator never drops below this fraction of
    /// the largest gradient entry of the whole model. Tensors whose exact
    /// gradient vanishes (biases that shift all four logits equally) would
    /// otherwise divide rounding noise by zero.
    pub floor_fraction: f64,
    /// `None` picks 1e-6 for f64 and 1e-3 for f32.
    pub threshold: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            encoder: EncoderConfig {
                blocks: 2,
                hidden: 8,
                heads: 2,
                ffn_hidden: 16,
                vocab_size: 64,
                max_len: 24,
                init_std: 0.3,
                ..EncoderConfig::default()
            },
            mode: AblationMode::FusionPerBlockFilter,
            aux_group: true,
            gen: GenSpec {
                n_sentences: 3,
                n_evidence: 1,
                min_sentence_len: 2,
                max_sentence_len: 4,
                ..GenSpec::default()
            },
            precision: Precision::F64,
            seeds: (0..20).collect(),
            perturb_std: 0.3,
            step: 1e-5,
            floor_fraction: 1e-2,
            threshold: None,
        }
    }
}

impl GradcheckConfig {
    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(match self.precision {
            Precision::F64 => 1e-6,
            Precision::F32 => 1e-3,
        })
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            mode: self.mode,
            aux_group: self.aux_group,
            unconstrained_init_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub seed: u64,
    pub name: String,
    pub numel: usize,
    pub max_abs_error: f64,
    /// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor_fraction · max_all |n|)`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub precision: Precision,
    pub threshold: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    pub fn offenders(&self) -> Vec<&GradcheckEntry> {
        self.entries
            .iter()
            .filter(|e| !(e.relative_error < self.threshold))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.offenders().is_empty()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seeds = {
            let mut s: Vec<u64> = self.entries.iter().map(|e| e.seed).collect();
            s.dedup();
            s.len()
        };
        writeln!(
            f,
            "gradcheck {}: {} tensors x {} seeds, max relative error {:.3e} (threshold {:.0e})",
            self.precision,
            self.entries.len() / seeds.max(1),
            seeds,
            self.max_relative_error(),
            self.threshold
        )?;
        let offenders = self.offenders();
        if offenders.is_empty() {
            write!(f, "all tensors within threshold")
        } else {
            write!(f, "offenders:")?;
            for e in offenders {
                write!(
                    f,
                    "\n  seed {} {} relative {:.3e} abs {:.3e}",
                    e.seed, e.name, e.relative_error, e.max_abs_error
                )?;
            }
            Ok(())
        }
    }
}

/// Perturbed parameters and one instance for `seed`.
fn setup(cfg: &GradcheckConfig, seed: u64) -> Result<(ModelParams<f64>, crate::synth_data::McqaInstance)> {
    let mut params = ModelParams::<f64>::init(cfg.model_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, cfg.perturb_std).map_err(|e| Error::contract(e.to_string()))?;
    let mut flat = params.store.flatten();
    flat.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    params.store.assign_flat(&flat)?;
    let instance = generate_instance(&cfg.gen, &mut rng)?;
    Ok((params, instance))
}

fn check_seed<T: Real>(cfg: &GradcheckConfig, seed: u64) -> Result<Vec<GradcheckEntry>> {
    let (reference, instance) = setup(cfg, seed)?;
    let mut params: ModelParams<T> = reference.cast();
    // The oracle runs in 64-bit at exactly the point the analytic pass sees.
    let mut probe: ModelParams<f64> = params.cast();
    let theta = probe.store.flatten();

    params.store.zero_grad();
    loss_and_accumulate(&instance, &mut params)?;
    let analytic: Vec<f64> = params.store.flatten_grads().iter().map(|g| g.as_f64()).collect();

    let mut failure = None;
    let numeric = finite_diff_gradient(
        |x: &[f64]| {
            let loss = probe
                .store
                .assign_flat(x)
                .and_then(|_| instance_loss(&instance, &probe));
            match loss {
                Ok(l) => l,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &theta,
        cfg.step,
    );
    if let Some(e) = failure {
        return Err(e);
    }

    let inf = |v: &[f64]| v.iter().fold(0f64, |m, x| m.max(x.abs()));
    let floor = (cfg.floor_fraction * inf(&numeric)).max(f64::MIN_POSITIVE);
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in params.store.iter() {
        let n = t.numel();
        let a = &analytic[offset..offset + n];
        let num = &numeric[offset..offset + n];
        offset += n;
        let max_abs_error = a.iter().zip(num).fold(0f64, |m, (x, y)| m.max((x - y).abs()));
        let denom = inf(a).max(inf(num)).max(floor);
        entries.push(GradcheckEntry {
            seed,
            name: name.to_string(),
            numel: n,
            max_abs_error,
            relative_error: max_abs_error / denom,
        });
    }
    Ok(entries)
}

/// Compares backpropagated gradients of the full-model loss with central differences.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.encoder.validate()?;
    if cfg.gen.max_packed_len() > cfg.encoder.max_len {
        return Err(Error::ConfigMismatch(format!(
            "generated sequences reach {} tokens, max_len is {}",
            cfg.gen.max_packed_len(),
            cfg.encoder.max_len
        )));
    }
    let mut entries = Vec::new();
    for &seed in &cfg.seeds {
        entries.extend(match cfg.precision {
            Precision::F64 => check_seed::<f64>(cfg, seed)?,
            Precision::F32 => check_seed::<f32>(cfg, seed)?,
        });
    }
    Ok(GradcheckReport {
        precision: cfg.precision,
        threshold: cfg.threshold(),
        entries,
    })
}
