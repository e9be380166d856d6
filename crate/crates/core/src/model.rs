//! Parameter layout of the full model and the ablation switches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams, Init, Source};
use crate::error::{Error, Result};
use crate::evidence_filter::{EvidenceFilter, FilterMode, FilterWeights};
use crate::numerics::{ParamId, ParamStore, Real};
use crate::NUM_OPTIONS;

/// The five model variants compared in the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// (1) final block only, no filter.
    NoFilter,
    /// (2) final block only, free 4×4 filter.
    UnconstrainedNoFusion,
    /// (3) final block only, `(α, β)` filter.
    ConstrainedNoFusion,
    /// (4) block fusion with one `(α, β)` filter tied across blocks.
    FusionSharedFilter,
    /// Full model: block fusion with a separate `(α, β)` filter per block.
    FusionPerBlockFilter,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::NoFilter,
        AblationMode::UnconstrainedNoFusion,
        AblationMode::ConstrainedNoFusion,
        AblationMode::FusionSharedFilter,
        AblationMode::FusionPerBlockFilter,
    ];

    pub fn filter_mode(self) -> FilterMode {
        match self {
            AblationMode::NoFilter => FilterMode::Disabled,
            AblationMode::UnconstrainedNoFusion => FilterMode::Unconstrained,
            _ => FilterMode::Constrained,
        }
    }

    pub fn shared_filter(self) -> bool {
        self == AblationMode::FusionSharedFilter
    }

    pub fn block_fusion(self) -> bool {
        matches!(
            self,
            AblationMode::FusionSharedFilter | AblationMode::FusionPerBlockFilter
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::NoFilter => "no-filter",
            AblationMode::UnconstrainedNoFusion => "unconstrained-no-fusion",
            AblationMode::ConstrainedNoFusion => "constrained-no-fusion",
            AblationMode::FusionSharedFilter => "fusion-shared-filter",
            AblationMode::FusionPerBlockFilter => "fusion-per-block-filter",
        }
    }

    /// Row label used in the ablation table.
    pub fn table_label(self) -> &'static str {
        match self {
            AblationMode::NoFilter => "(1) w/o block fusion; w/o evidence filter",
            AblationMode::UnconstrainedNoFusion => "(2) w/o block fusion; evidence filter w/o constraints",
            AblationMode::ConstrainedNoFusion => "(3) w/o block fusion; evidence filter",
            AblationMode::FusionSharedFilter => "(4) block fusion with same evidence filter",
            AblationMode::FusionPerBlockFilter => "block fusion with different evidence filter (ours)",
        }
    }

    /// Published OpenbookQA test accuracy (%) for the same configuration,
    /// printed next to toy results for orientation only.
    pub fn reference_accuracy(self) -> f64 {
        match self {
            AblationMode::NoFilter => 60.0,
            AblationMode::UnconstrainedNoFusion => 63.8,
            AblationMode::ConstrainedNoFusion => 65.0,
            AblationMode::FusionSharedFilter => 64.0,
            AblationMode::FusionPerBlockFilter => 65.6,
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown ablation mode {s:?}"))
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mode: AblationMode,
    /// Adds the context-free `[Q; O_i]` scoring branch.
    pub aux_group: bool,
    /// Entry std of a freshly drawn unconstrained filter.
    pub unconstrained_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            mode: AblationMode::FusionPerBlockFilter,
            aux_group: true,
            unconstrained_init_std: 1.0,
        }
    }
}

impl ModelConfig {
    /// Blocks whose filtered output reaches the classifier.
    pub fn used_blocks(&self) -> Vec<usize> {
        let k = self.encoder.blocks;
        if self.mode.block_fusion() {
            (0..k).collect()
        } else {
            vec![k - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterParamIds {
    Constrained { alpha: ParamId, beta: ParamId },
    Unconstrained { matrix: ParamId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub encoder: EncoderParams,
    /// `(block, filter)` for every used block; tied filters repeat the same ids.
    pub filters: Vec<(usize, FilterParamIds)>,
    /// `(block, gain, bias)` of the layer norm applied after filtering.
    pub filter_norms: Vec<(usize, ParamId, ParamId)>,
    /// `W_bf` (length K) and scalar `b_bf`.
    pub fusion: Option<(ParamId, ParamId)>,
    /// Scoring weights `d×1` and scalar bias.
    pub head: (ParamId, ParamId),
    pub aux: Option<(ParamId, ParamId)>,
}

impl ParamLayout {
    fn build<T: Real, R: rand::Rng + ?Sized>(cfg: &ModelConfig, src: &mut Source<'_, T, R>) -> Result<Self> {
        cfg.encoder.validate()?;
        let enc = &cfg.encoder;
        let d = enc.hidden;
        let encoder = EncoderParams::build(enc, src)?;
        let used = cfg.used_blocks();

        let mut filters = Vec::new();
        let make_filter = |src: &mut Source<'_, T, R>, tag: &str| -> Result<FilterParamIds> {
            Ok(match cfg.mode.filter_mode() {
                FilterMode::Constrained => FilterParamIds::Constrained {
                    alpha: src.get(&format!("filter.{tag}.alpha"), &[1], Init::Const(0.0))?,
                    beta: src.get(&format!("filter.{tag}.beta"), &[1], Init::Const(0.0))?,
                },
                FilterMode::Unconstrained => FilterParamIds::Unconstrained {
                    matrix: src.get(
                        &format!("filter.{tag}.matrix"),
                        &[NUM_OPTIONS, NUM_OPTIONS],
                        Init::Normal(cfg.unconstrained_init_std),
                    )?,
                },
                FilterMode::Disabled => unreachable!("disabled filters own no parameters"),
            })
        };
        if cfg.mode.filter_mode() != FilterMode::Disabled {
            if cfg.mode.shared_filter() {
                let ids = make_filter(src, "shared")?;
                filters.extend(used.iter().map(|&k| (k, ids)));
            } else {
                for &k in &used {
                    let ids = make_filter(src, &format!("block{k}"))?;
                    filters.push((k, ids));
                }
            }
        }

        let mut filter_norms = Vec::new();
        for &k in &used {
            filter_norms.push((
                k,
                src.get(&format!("filter_norm.block{k}.gain"), &[d], Init::Const(1.0))?,
                src.get(&format!("filter_norm.block{k}.bias"), &[d], Init::Const(0.0))?,
            ));
        }

        let fusion = if cfg.mode.block_fusion() {
            Some((
                src.get("fusion.w_bf", &[enc.blocks], Init::Const(1.0 / enc.blocks as f64))?,
                src.get("fusion.b_bf", &[1], Init::Const(0.0))?,
            ))
        } else {
            None
        };
        let head = (
            src.get("head.w_out", &[d, 1], Init::Normal(enc.init_std))?,
            src.get("head.b_out", &[1], Init::Const(0.0))?,
        );
        let aux = if cfg.aux_group {
            Some((
                src.get("aux.w", &[d, 1], Init::Normal(enc.init_std))?,
                src.get("aux.b", &[1], Init::Const(0.0))?,
            ))
        } else {
            None
        };
        Ok(ParamLayout {
            encoder,
            filters,
            filter_norms,
            fusion,
            head,
            aux,
        })
    }
}

/// All trainable tensors of one model together with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: ParamLayout,
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters drawn from a ChaCha stream seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = ParamLayout::build(&config, &mut Source::Init(&mut store, &mut rng))?;
        Ok(ModelParams {
            config,
            store,
            layout,
        })
    }

    /// Wraps an existing store, checking that every expected tensor exists
    /// with the right shape and that no unknown tensors are present.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let layout = ParamLayout::build::<T, ChaCha8Rng>(&config, &mut Source::Locate(&store))?;
        let expected = Self::init(config.clone(), 0)?.store.len();
        if store.len() != expected {
            return Err(Error::ConfigMismatch(format!(
                "store has {} tensors, configuration expects {expected}",
                store.len()
            )));
        }
        Ok(ModelParams {
            config,
            store,
            layout,
        })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    fn scalar(&self, id: ParamId) -> T {
        self.store.get(id).data()[0]
    }

    /// Current filter values of every used block.
    pub fn evidence_filter(&self) -> EvidenceFilter<T> {
        let blocks = self
            .layout
            .filters
            .iter()
            .map(|(k, ids)| {
                let w = match *ids {
                    FilterParamIds::Constrained { alpha, beta } => FilterWeights::Constrained {
                        alpha: self.scalar(alpha),
                        beta: self.scalar(beta),
                    },
                    FilterParamIds::Unconstrained { matrix } => {
                        FilterWeights::Unconstrained(self.store.get(matrix).clone())
                    }
                };
                (*k, w)
            })
            .collect();
        EvidenceFilter {
            mode: self.config.mode.filter_mode(),
            shared: self.config.mode.shared_filter(),
            blocks,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_follow_the_mode() {
        for mode in AblationMode::ALL {
            let cfg = ModelConfig {
                mode,
                ..ModelConfig::default()
            };
            let p = ModelParams::<f32>::init(cfg.clone(), 1).unwrap();
            let f = p.evidence_filter();
            assert_eq!(p.layout.fusion.is_some(), mode.block_fusion());
            match mode {
                AblationMode::NoFilter => assert!(f.blocks.is_empty()),
                AblationMode::FusionPerBlockFilter | AblationMode::FusionSharedFilter => {
                    assert_eq!(f.blocks.len(), 4)
                }
                _ => assert_eq!(f.blocks.iter().map(|b| b.0).collect::<Vec<_>>(), vec![3]),
            }
            assert_eq!(mode.name().parse::<AblationMode>().unwrap(), mode);
            let again = ModelParams::<f32>::from_store(cfg, p.store.clone()).unwrap();
            assert_eq!(again.layout, p.layout);
        }
    }

    #[test]
    fn fresh_filters_and_fusion_weights() {
        let p = ModelParams::<f64>::init(ModelConfig::default(), 5).unwrap();
        for (_, w) in p.evidence_filter().blocks {
            assert_eq!(w, FilterWeights::Constrained { alpha: 0.0, beta: 0.0 });
        }
        let (w_bf, b_bf) = p.layout.fusion.unwrap();
        assert_eq!(p.store.get(w_bf).data(), &[0.25; 4]);
        assert_eq!(p.store.get(b_bf).data(), &[0.0]);
    }

    #[test]
    fn shared_mode_ties_one_pair() {
        let cfg = ModelConfig {
            mode: AblationMode::FusionSharedFilter,
            ..ModelConfig::default()
        };
        let p = ModelParams::<f32>::init(cfg, 2).unwrap();
        let first = p.layout.filters[0].1;
        assert!(p.layout.filters.iter().all(|(_, ids)| *ids == first));
        assert!(p.store.id("filter.shared.alpha").is_some());
    }

    #[test]
    fn from_store_rejects_foreign_layout() {
        let p = ModelParams::<f32>::init(ModelConfig::default(), 1).unwrap();
        let other = ModelConfig {
            mode: AblationMode::NoFilter,
            ..ModelConfig::default()
        };
        assert!(ModelParams::<f32>::from_store(other, p.store).is_err());
    }
}
