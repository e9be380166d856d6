//! Block fusion, option scoring and the end-to-end forward pass.

use crate::encoder::{pack, PackedInput};
use crate::error::{Error, Result};
use crate::evidence_filter::FilterMode;
use crate::model::{FilterParamIds, ModelParams};
use crate::numerics::{Graph, NodeId, Real, Tensor, LAYER_NORM_EPS};
use crate::synth_data::McqaInstance;
use crate::NUM_OPTIONS;

/// Plain copies of the fusion and scoring parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    /// `W_bf`, one weight per block. Empty when fusion is disabled.
    pub w_bf: Vec<T>,
    pub b_bf: T,
    pub w_out: Vec<T>,
    pub b_out: T,
    pub aux: Option<(Vec<T>, T)>,
}

impl<T: Real> FusionParams<T> {
    pub fn from_model(params: &ModelParams<T>) -> Self {
        let s = &params.store;
        let vec = |id| s.get(id).data().to_vec();
        let scalar = |id| s.get(id).data()[0];
        let (w_bf, b_bf) = match params.layout.fusion {
            Some((w, b)) => (vec(w), scalar(b)),
            None => (Vec::new(), T::zero()),
        };
        FusionParams {
            w_bf,
            b_bf,
            w_out: vec(params.layout.head.0),
            b_out: scalar(params.layout.head.1),
            aux: params.layout.aux.map(|(w, b)| (vec(w), scalar(b))),
        }
    }
}

/// `M = Σ_k W_bf[k] · stack[k] + b_bf`, with the scalar bias broadcast.
pub fn block_fusion<T: Real>(stack: &[Tensor<T>], w_bf: &[T], b_bf: T) -> Result<Tensor<T>> {
    if stack.len() != w_bf.len() || stack.is_empty() {
        return Err(Error::Dimension {
            op: "block_fusion",
            left: vec![stack.len()],
            right: vec![w_bf.len()],
        });
    }
    let shape = stack[0].shape().to_vec();
    let mut out = Tensor::full(&shape, b_bf);
    for (block, &w) in stack.iter().zip(w_bf) {
        if block.shape() != shape.as_slice() {
            return Err(Error::Dimension {
                op: "block_fusion",
                left: shape,
                right: block.shape().to_vec(),
            });
        }
        for (o, v) in out.data_mut().iter_mut().zip(block.data()) {
            *o += w * *v;
        }
    }
    Ok(out)
}

/// `logits[i] = w_out·M[i] + b_out (+ w_aux·aux[i] + b_aux)`.
pub fn score<T: Real>(m: &Tensor<T>, aux: Option<&Tensor<T>>, params: &FusionParams<T>) -> Result<Vec<T>> {
    let lin = |x: &Tensor<T>, w: &[T], b: T| -> Result<Vec<T>> {
        if x.last_dim() != w.len() {
            return Err(Error::Dimension {
                op: "score",
                left: x.shape().to_vec(),
                right: vec![w.len()],
            });
        }
        Ok((0..x.rows())
            .map(|i| x.row(i).iter().zip(w).map(|(a, b)| *a * *b).sum::<T>() + b)
            .collect())
    };
    let mut logits = lin(m, &params.w_out, params.b_out)?;
    if let (Some(aux), Some((w, b))) = (aux, &params.aux) {
        for (l, a) in logits.iter_mut().zip(lin(aux, w, *b)?) {
            *l += a;
        }
    }
    Ok(logits)
}

/// Packs one instance for the main and auxiliary branches.
pub(crate) struct PackedInstance {
    pub main: Vec<PackedInput>,
    pub aux: Vec<PackedInput>,
}

pub(crate) fn pack_instance<T: Real>(instance: &McqaInstance, params: &ModelParams<T>) -> Result<PackedInstance> {
    instance.validate()?;
    let cfg = &params.config.encoder;
    let limit = cfg.vocab_size;
    if instance.max_token() as usize >= limit {
        return Err(Error::Index {
            what: "token id",
            index: instance.max_token() as usize,
            limit,
        });
    }
    let main = instance
        .options
        .iter()
        .map(|o| pack(&instance.context, &instance.question, o, cfg.max_len))
        .collect::<Result<Vec<_>>>()?;
    let aux = if params.config.aux_group {
        instance
            .options
            .iter()
            .map(|o| pack(&[], &instance.question, o, cfg.max_len))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(PackedInstance { main, aux })
}

/// Builds the forward graph for one instance and returns the `4×1` logits node.
pub fn build_forward<T: Real>(g: &mut Graph<T>, instance: &McqaInstance, params: &ModelParams<T>) -> Result<NodeId> {
    let packed = pack_instance(instance, params)?;
    forward_packed(g, &packed, params)
}

pub(crate) fn forward_packed<T: Real>(
    g: &mut Graph<T>,
    packed: &PackedInstance,
    params: &ModelParams<T>,
) -> Result<NodeId> {
    let cfg = &params.config;
    let enc = &cfg.encoder;
    let layout = &params.layout;
    let store = &params.store;
    let fusion = cfg.mode.block_fusion();
    let eps = T::lit(LAYER_NORM_EPS);

    let bound = layout.encoder.bind(g, store);

    // pooled[i] holds option i's block vectors: all K with fusion, else the last.
    let mut pooled = Vec::with_capacity(NUM_OPTIONS);
    for input in &packed.main {
        pooled.push(bound.encode(g, enc, input, !fusion)?);
    }

    let mut filter_nodes: Vec<(FilterParamIds, NodeId)> = Vec::new();
    let mut filtered = Vec::new();
    for (slot, &(k, gain, bias)) in layout.filter_norms.iter().enumerate() {
        let rows: Vec<NodeId> = pooled.iter().map(|p| p[slot]).collect();
        let h = g.stack_rows(&rows)?;
        let a = match cfg.mode.filter_mode() {
            FilterMode::Disabled => None,
            _ => {
                let ids = layout
                    .filters
                    .iter()
                    .find(|(b, _)| *b == k)
                    .map(|(_, ids)| *ids)
                    .ok_or_else(|| Error::contract(format!("no filter for block {k}")))?;
                // Tied filters are registered once so their gradients sum.
                let node = match filter_nodes.iter().find(|(i, _)| *i == ids) {
                    Some((_, n)) => *n,
                    None => {
                        let n = match ids {
                            FilterParamIds::Constrained { alpha, beta } => {
                                let a = g.param(store, alpha);
                                let b = g.param(store, beta);
                                g.constrained_matrix(a, b, NUM_OPTIONS)?
                            }
                            FilterParamIds::Unconstrained { matrix } => g.param(store, matrix),
                        };
                        filter_nodes.push((ids, n));
                        n
                    }
                };
                Some(node)
            }
        };
        let pre = match a {
            Some(a) => {
                let mixed = g.matmul(a, h)?;
                g.add(h, mixed)?
            }
            None => h,
        };
        let gain = g.param(store, gain);
        let bias = g.param(store, bias);
        filtered.push(g.layer_norm(pre, gain, bias, eps)?);
    }

    let m = match layout.fusion {
        Some((w_bf, b_bf)) => {
            let w = g.param(store, w_bf);
            let b = g.param(store, b_bf);
            let terms = filtered
                .iter()
                .enumerate()
                .map(|(k, &x)| g.scale_by_elem(x, w, k))
                .collect::<Result<Vec<_>>>()?;
            let sum = g.add_n(&terms)?;
            g.add_scalar(sum, b)?
        }
        None => filtered[0],
    };

    let w_out = g.param(store, layout.head.0);
    let b_out = g.param(store, layout.head.1);
    let logits = g.matmul(m, w_out)?;
    let mut logits = g.add_scalar(logits, b_out)?;

    if let Some((w_aux, b_aux)) = layout.aux {
        let rows = packed
            .aux
            .iter()
            .map(|input| Ok(bound.encode(g, enc, input, true)?[0]))
            .collect::<Result<Vec<_>>>()?;
        let aux = g.stack_rows(&rows)?;
        let w = g.param(store, w_aux);
        let b = g.param(store, b_aux);
        let aux_logits = g.matmul(aux, w)?;
        let aux_logits = g.add_scalar(aux_logits, b)?;
        logits = g.add(logits, aux_logits)?;
    }
    Ok(logits)
}

/// Four option logits for one instance.
pub fn model_forward<T: Real>(instance: &McqaInstance, params: &ModelParams<T>) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let logits = build_forward(&mut g, instance, params)?;
    Ok(g.value(logits).data().to_vec())
}

/// Cross-entropy of one instance; gradients are added into `params.store`.
pub fn loss_and_accumulate<T: Real>(instance: &McqaInstance, params: &mut ModelParams<T>) -> Result<T> {
    let mut g = Graph::new();
    let logits = build_forward(&mut g, instance, params)?;
    let loss = g.cross_entropy(logits, instance.label)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    drop(g);
    grads.accumulate_into(&mut params.store);
    Ok(value)
}

/// Cross-entropy of one instance without gradients.
pub fn instance_loss<T: Real>(instance: &McqaInstance, params: &ModelParams<T>) -> Result<T> {
    let logits = model_forward(instance, params)?;
    crate::numerics::softmax_cross_entropy(&logits, instance.label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[[f64; 3]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_block_identity_fusion() {
        let x = t(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(block_fusion(&[x.clone()], &[1.0], 0.0).unwrap(), x);
    }

    #[test]
    fn uniform_weights_average_blocks() {
        let a = t(&[[1.0, 2.0, 3.0]]);
        let b = t(&[[3.0, 6.0, -3.0]]);
        let m = block_fusion(&[a, b], &[0.5, 0.5], 0.0).unwrap();
        assert_eq!(m.data(), &[2.0, 4.0, 0.0]);
    }

    #[test]
    fn bias_broadcasts_and_block_count_is_checked() {
        let a = t(&[[1.0, 2.0, 3.0]]);
        let m = block_fusion(&[a.clone()], &[2.0], 0.5).unwrap();
        assert_eq!(m.data(), &[2.5, 4.5, 6.5]);
        assert!(matches!(
            block_fusion(&[a.clone(), a], &[1.0], 0.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let params = FusionParams {
            w_bf: vec![],
            b_bf: 0.0,
            w_out: vec![0.0; 3],
            b_out: 0.0,
            aux: None,
        };
        let m = t(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0], [1.0, 1.0, 1.0]]);
        assert_eq!(score(&m, None, &params).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn identical_rows_identical_logits() {
        let params = FusionParams {
            w_bf: vec![],
            b_bf: 0.0,
            w_out: vec![0.3, -1.0, 2.0],
            b_out: 0.1,
            aux: Some((vec![1.0, 1.0, 1.0], -0.2)),
        };
        let m = t(&[[1.0, 2.0, 3.0]; 4]);
        let l = score(&m, Some(&m), &params).unwrap();
        assert!(l.iter().all(|v| *v == l[0]));
    }
}
