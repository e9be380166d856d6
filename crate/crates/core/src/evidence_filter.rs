//! The 4×4 evidence filter and the permutation algebra behind it.
//!
//! A filter `A` mixes the four per-option representations `H` (one row per
//! option) as `A·H`. With one value `α` on the diagonal and one value `β`
//! off the diagonal, row `i` becomes `α·hᵢ + β·Σ_{j≠i} hⱼ`; when the signs
//! differ this is the difference between an option's evidence and the
//! evidence gathered for the other options.
//!
//! Shuffling options multiplies `H` on the left by a permutation matrix `R`.
//! A constrained `A` satisfies `A·R = R·A` for every `R`, since
//! `(A·R)[i][j] = (α − β)·R[i][j] + β = (R·A)[i][j]`, so filtering commutes
//! with shuffling. An unconstrained `A` does not.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Real, Tensor};
use crate::NUM_OPTIONS;

/// A bijection on `{0, 1, 2, 3}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation([usize; NUM_OPTIONS]);

impl Permutation {
    pub fn new(map: &[usize]) -> Result<Self> {
        if map.len() != NUM_OPTIONS {
            return Err(Error::contract(format!(
                "permutation needs {NUM_OPTIONS} entries, got {}",
                map.len()
            )));
        }
        let mut seen = [false; NUM_OPTIONS];
        for &m in map {
            if m >= NUM_OPTIONS || seen[m] {
                return Err(Error::contract(format!("{map:?} is not a bijection on 0..4")));
            }
            seen[m] = true;
        }
        let mut out = [0; NUM_OPTIONS];
        out.copy_from_slice(map);
        Ok(Permutation(out))
    }

    pub fn identity() -> Self {
        Permutation([0, 1, 2, 3])
    }

    pub fn swap(i: usize, j: usize) -> Result<Self> {
        let mut m = [0, 1, 2, 3];
        if i >= NUM_OPTIONS || j >= NUM_OPTIONS {
            return Err(Error::contract(format!("swap({i}, {j}) out of range")));
        }
        m.swap(i, j);
        Ok(Permutation(m))
    }

    /// All 24 permutations in lexicographic order, identity first.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::with_capacity(24);
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        if let Ok(p) = Permutation::new(&[a, b, c, d]) {
                            out.push(p);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut m = [0, 1, 2, 3];
        m.shuffle(rng);
        Permutation(m)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = [0; NUM_OPTIONS];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Permutation(inv)
    }

    /// The permutation whose matrix is `self.matrix() · other.matrix()`,
    /// i.e. `i ↦ other[self[i]]`.
    pub fn compose(&self, other: &Permutation) -> Self {
        let mut out = [0; NUM_OPTIONS];
        for (i, o) in out.iter_mut().enumerate() {
            *o = other.0[self.0[i]];
        }
        Permutation(out)
    }

    /// Row selection matching `R·X`: output item `i` is `items[self[i]]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.0.iter().map(|&src| items[src].clone()).collect()
    }

    pub fn matrix(&self) -> PermutationMatrix {
        let mut entries = [[0u8; NUM_OPTIONS]; NUM_OPTIONS];
        for (i, &p) in self.0.iter().enumerate() {
            entries[i][p] = 1;
        }
        PermutationMatrix {
            perm: *self,
            entries,
        }
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{} {} {} {}]", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// Row-exchange matrix `R` with `R[i][perm(i)] = 1`; each row and column sums to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PermutationMatrix {
    perm: Permutation,
    entries: [[u8; NUM_OPTIONS]; NUM_OPTIONS],
}

/// Builds `R` from a permutation given as a slice; rejects non-bijections.
pub fn permutation_matrix(perm: &[usize]) -> Result<PermutationMatrix> {
    Ok(Permutation::new(perm)?.matrix())
}

impl PermutationMatrix {
    pub fn permutation(&self) -> Permutation {
        self.perm
    }

    pub fn entries(&self) -> &[[u8; NUM_OPTIONS]; NUM_OPTIONS] {
        &self.entries
    }

    pub fn entry(&self, i: usize, j: usize) -> u8 {
        self.entries[i][j]
    }

    pub fn row_sums(&self) -> [u32; NUM_OPTIONS] {
        let mut s = [0; NUM_OPTIONS];
        for (i, row) in self.entries.iter().enumerate() {
            s[i] = row.iter().map(|&e| e as u32).sum();
        }
        s
    }

    pub fn col_sums(&self) -> [u32; NUM_OPTIONS] {
        let mut s = [0; NUM_OPTIONS];
        for row in &self.entries {
            for (j, &e) in row.iter().enumerate() {
                s[j] += e as u32;
            }
        }
        s
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .entries
            .iter()
            .flat_map(|r| r.iter().map(|&e| if e == 1 { T::one() } else { T::zero() }))
            .collect();
        Tensor::new(vec![NUM_OPTIONS, NUM_OPTIONS], data).expect("4x4")
    }
}

/// 4×4 matrix with `alpha` on the diagonal and `beta` elsewhere.
pub fn build_filter<T: Real>(alpha: T, beta: T) -> Tensor<T> {
    let data = (0..NUM_OPTIONS * NUM_OPTIONS)
        .map(|idx| {
            if idx / NUM_OPTIONS == idx % NUM_OPTIONS {
                alpha
            } else {
                beta
            }
        })
        .collect();
    Tensor::new(vec![NUM_OPTIONS, NUM_OPTIONS], data).expect("4x4")
}

fn check_filter_shapes<T: Real>(a: &Tensor<T>, h: &Tensor<T>) -> Result<()> {
    if a.shape() != [NUM_OPTIONS, NUM_OPTIONS] || h.shape().len() != 2 || h.shape()[0] != NUM_OPTIONS {
        return Err(Error::Dimension {
            op: "apply_filter",
            left: a.shape().to_vec(),
            right: h.shape().to_vec(),
        });
    }
    Ok(())
}

/// `A·H` for a 4×4 filter and a 4×d stack of option representations.
pub fn apply_filter<T: Real>(a: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    check_filter_shapes(a, h)?;
    a.matmul(h)
}

/// `LayerNorm(H + A·H)` row-wise, or `LayerNorm(H)` when `a` is `None`.
pub fn filter_block<T: Real>(
    h: &Tensor<T>,
    a: Option<&Tensor<T>>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let eps = T::lit(numerics::LAYER_NORM_EPS);
    match a {
        None => numerics::layer_norm(h, gain, bias, eps),
        Some(a) => {
            let mixed = apply_filter(a, h)?;
            let mut sum = h.clone();
            for (s, m) in sum.data_mut().iter_mut().zip(mixed.data()) {
                *s += *m;
            }
            numerics::layer_norm(&sum, gain, bias, eps)
        }
    }
}

/// Outcome of comparing `A·R` with `R·A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommutationCheck<T> {
    /// `max |(A·R − R·A)[i][j]|`.
    pub residual: T,
    /// For a constrained `A`: `max |(A·R)[i][j] − ((α − β)·R[i][j] + β)|`.
    pub closed_form_residual: Option<T>,
}

/// `(α, β)` when `a` has one diagonal value and one off-diagonal value.
pub fn constrained_values<T: Real>(a: &Tensor<T>) -> Option<(T, T)> {
    if a.shape() != [NUM_OPTIONS, NUM_OPTIONS] {
        return None;
    }
    let alpha = a.at(0, 0);
    let beta = a.at(0, 1);
    for i in 0..NUM_OPTIONS {
        for j in 0..NUM_OPTIONS {
            let want = if i == j { alpha } else { beta };
            if a.at(i, j) != want {
                return None;
            }
        }
    }
    Some((alpha, beta))
}

pub fn check_commutation<T: Real>(a: &Tensor<T>, r: &PermutationMatrix) -> Result<CommutationCheck<T>> {
    if a.shape() != [NUM_OPTIONS, NUM_OPTIONS] {
        return Err(Error::Dimension {
            op: "check_commutation",
            left: a.shape().to_vec(),
            right: vec![NUM_OPTIONS, NUM_OPTIONS],
        });
    }
    let rt = r.to_tensor::<T>();
    let ar = a.matmul(&rt)?;
    let ra = rt.matmul(a)?;
    let residual = ar.max_abs_diff(&ra)?;
    let closed_form_residual = constrained_values(a).map(|(alpha, beta)| {
        let mut worst = T::zero();
        for i in 0..NUM_OPTIONS {
            for j in 0..NUM_OPTIONS {
                let rij = T::lit(r.entry(i, j) as f64);
                let closed = (alpha - beta) * rij + beta;
                worst = worst.max((ar.at(i, j) - closed).abs());
            }
        }
        worst
    });
    Ok(CommutationCheck {
        residual,
        closed_form_residual,
    })
}

/// Largest commutation residual over all 24 permutation matrices.
pub fn max_commutation_residual<T: Real>(a: &Tensor<T>) -> Result<T> {
    let mut worst = T::zero();
    for p in Permutation::all() {
        worst = worst.max(check_commutation(a, &p.matrix())?.residual);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// One trainable `(α, β)` pair per filter.
    Constrained,
    /// Sixteen free entries per filter.
    Unconstrained,
    /// No filter term: `LayerNorm(H)`.
    Disabled,
}

/// One materializable filter.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterWeights<T> {
    Constrained { alpha: T, beta: T },
    Unconstrained(Tensor<T>),
}

impl<T: Real> FilterWeights<T> {
    pub fn matrix(&self) -> Tensor<T> {
        match self {
            FilterWeights::Constrained { alpha, beta } => build_filter(*alpha, *beta),
            FilterWeights::Unconstrained(m) => m.clone(),
        }
    }
}

/// Snapshot of the filters of a model: which blocks have a filter, in what mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceFilter<T> {
    pub mode: FilterMode,
    /// One filter tied across all filtered blocks.
    pub shared: bool,
    /// `(block index, weights)` for every filtered block, ascending.
    pub blocks: Vec<(usize, FilterWeights<T>)>,
}

impl<T: Real> EvidenceFilter<T> {
    pub fn weights(&self, block: usize) -> Option<&FilterWeights<T>> {
        self.blocks.iter().find(|(k, _)| *k == block).map(|(_, w)| w)
    }

    pub fn matrix(&self, block: usize) -> Option<Tensor<T>> {
        self.weights(block).map(FilterWeights::matrix)
    }

    /// Eq.-style block update for block `k`; blocks without a filter (and
    /// disabled mode) reduce to `LayerNorm(H)`.
    pub fn filter_block(
        &self,
        h: &Tensor<T>,
        block: usize,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let a = match self.mode {
            FilterMode::Disabled => None,
            _ => self.matrix(block),
        };
        filter_block(h, a.as_ref(), gain, bias)
    }
}
