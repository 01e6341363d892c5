//! Expert-merging protocols over domain vectors.
//!
//! A domain vector is the difference `tau_i = E_i - E_m` between a domain
//! expert and the base expert, kept per parameter tensor. Merging produces
//! `E_m + alpha * sum_i s_i * tau_i` where the `s_i` are router scores shared
//! by all four tensors of an expert. Two masking protocols sparsify the taus
//! before combining:
//!
//! - TIES: per-entry sign election across experts; entries whose sign loses
//!   the election are dropped, with an optional prior magnitude trim.
//! - DARE: independent Bernoulli drops with survivor rescaling `1/(1-p)`,
//!   fully determined by a derived seed.
//!
//! Masks are computed from values and enter the autodiff graph as constants,
//! so gradients flow only through surviving entries. The diagonal-Fisher
//! baseline merges whole experts by precision-weighted averaging and takes no
//! router scores at all.

use crate::autodiff::{Graph, Var};
use crate::error::{CamexError, Result};
use crate::moe::{Expert, ExpertBank};
use crate::seeds;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Merge protocol selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Plain score-weighted combination of domain vectors.
    DomainSpecific,
    /// Sign-election masking before combination.
    Ties,
    /// Random-drop masking with survivor rescaling before combination.
    Dare,
    /// Precision-weighted averaging with diagonal Fisher weights. Score-free;
    /// only valid for offline merging, not for routed forward passes.
    FisherDiag,
}

/// Protocol plus every knob the merge paths need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSpec {
    pub protocol: Protocol,
    /// Global merge strength.
    pub alpha: f64,
    /// Apply learned curvature transforms to (masked) domain vectors.
    pub ca_enabled: bool,
    /// Propagate the base expert across layers instead of storing one per layer.
    pub dynamic: bool,
    /// Drop probability for [`Protocol::Dare`].
    pub dare_drop_prob: f64,
    /// Fraction of lowest-magnitude entries zeroed per tau before TIES sign
    /// election.
    pub ties_trim_fraction: f64,
    /// Strict reading of the TIES update rule: additionally multiply the
    /// summed update by the elected sign pattern. Off by default, which keeps
    /// the scalar-strength semantics.
    pub ties_sign_gate: bool,
    pub rng_seed: u64,
}

impl Default for MergeSpec {
    fn default() -> MergeSpec {
        MergeSpec {
            protocol: Protocol::DomainSpecific,
            alpha: 1.0,
            ca_enabled: true,
            dynamic: false,
            dare_drop_prob: 0.5,
            ties_trim_fraction: 0.0,
            ties_sign_gate: false,
            rng_seed: 0,
        }
    }
}

impl MergeSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(CamexError::Contract {
                detail: format!("alpha must be finite, got {}", self.alpha),
            });
        }
        if !(0.0..1.0).contains(&self.dare_drop_prob) {
            return Err(CamexError::Contract {
                detail: format!(
                    "dare_drop_prob must lie in [0, 1), got {}",
                    self.dare_drop_prob
                ),
            });
        }
        if !(0.0..1.0).contains(&self.ties_trim_fraction) {
            return Err(CamexError::Contract {
                detail: format!(
                    "ties_trim_fraction must lie in [0, 1), got {}",
                    self.ties_trim_fraction
                ),
            });
        }
        Ok(())
    }
}

/// The four parameter-tensor deltas of one domain expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDelta {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ExpertDelta {
    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("W1", &self.w1), ("b1", &self.b1), ("W2", &self.w2), ("b2", &self.b2)]
    }

    pub fn zeros_like(e: &Expert) -> ExpertDelta {
        ExpertDelta {
            w1: Tensor::zeros(e.w1.shape().to_vec()),
            b1: Tensor::zeros(e.b1.shape().to_vec()),
            w2: Tensor::zeros(e.w2.shape().to_vec()),
            b2: Tensor::zeros(e.b2.shape().to_vec()),
        }
    }
}

/// Domain vectors for every domain expert of a bank, in bank order.
#[derive(Debug, Clone)]
pub struct DomainVectors {
    pub taus: Vec<ExpertDelta>,
}

/// Computes `tau_i = E_i - E_m` per parameter tensor. The bank is unchanged.
pub fn domain_vectors(bank: &ExpertBank) -> Result<DomainVectors> {
    let taus = bank
        .domain
        .iter()
        .map(|e| {
            Ok(ExpertDelta {
                w1: e.w1.sub(&bank.base.w1)?,
                b1: e.b1.sub(&bank.base.b1)?,
                w2: e.w2.sub(&bank.base.w2)?,
                b2: e.b2.sub(&bank.base.b2)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainVectors { taus })
}

fn check_same_shapes(taus: &[&Tensor], op: &'static str) -> Result<()> {
    if taus.is_empty() {
        return Err(CamexError::Contract {
            detail: format!("{op} requires at least one domain vector"),
        });
    }
    for t in taus.iter().skip(1) {
        if t.shape() != taus[0].shape() {
            return Err(CamexError::ShapeMismatch {
                op,
                lhs: taus[0].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn sign0(x: f64) -> f64 {
    crate::autodiff::signum0(x)
}

/// Zeroes the `floor(fraction * n)` lowest-magnitude entries of `t`.
/// Magnitude ties are broken by zeroing the higher index first, matching the
/// lowest-index-wins convention of top-k selection.
fn trim_lowest_magnitude(t: &Tensor, fraction: f64) -> Tensor {
    let n = t.numel();
    let k = (fraction * n as f64).floor() as usize;
    if k == 0 {
        return t.clone();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // Ascending magnitude, descending index among ties.
    idx.sort_by(|&a, &b| {
        t.data()[a]
            .abs()
            .partial_cmp(&t.data()[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.cmp(&a))
    });
    let mut out = t.clone();
    for &i in idx.iter().take(k) {
        out.data_mut()[i] = 0.0;
    }
    out
}

/// TIES mask generation: magnitude trim, per-entry sign election across the
/// taus, then a 0/1 keep-mask per tau. Returns the masks and the elected sign
/// pattern (entries in `{-1, 0, 1}`). An elected sign of zero keeps nothing.
pub fn ties_masks(taus: &[&Tensor], trim_fraction: f64) -> Result<(Vec<Tensor>, Tensor)> {
    check_same_shapes(taus, "ties_masks")?;
    if !(0.0..1.0).contains(&trim_fraction) {
        return Err(CamexError::Contract {
            detail: format!("ties trim fraction must lie in [0, 1), got {trim_fraction}"),
        });
    }
    let trimmed: Vec<Tensor> = taus.iter().map(|t| trim_lowest_magnitude(t, trim_fraction)).collect();
    let n = taus[0].numel();
    let mut elected = Tensor::zeros(taus[0].shape().to_vec());
    for e in 0..n {
        let total: f64 = trimmed.iter().map(|t| t.data()[e]).sum();
        elected.data_mut()[e] = sign0(total);
    }
    let masks = trimmed
        .iter()
        .map(|t| {
            let mut m = Tensor::zeros(t.shape().to_vec());
            for e in 0..n {
                let g = elected.data()[e];
                if g != 0.0 && sign0(t.data()[e]) == g {
                    m.data_mut()[e] = 1.0;
                }
            }
            m
        })
        .collect();
    Ok((masks, elected))
}

/// TIES masking applied to values: keeps entries whose sign won the election,
/// zeroes the rest.
pub fn ties_mask_values(taus: &[Tensor], trim_fraction: f64) -> Result<Vec<Tensor>> {
    let refs: Vec<&Tensor> = taus.iter().collect();
    let (masks, _) = ties_masks(&refs, trim_fraction)?;
    taus.iter().zip(&masks).map(|(t, m)| t.mul(m)).collect()
}

/// DARE keep-masks: each entry independently survives with probability
/// `1 - p` and is rescaled by `1/(1 - p)`; dropped entries are zero. Each tau
/// gets its own derived stream, so the whole draw is a pure function of
/// `(seed, tau index)`.
pub fn dare_masks(shapes: &[&Tensor], p: f64, seed: u64) -> Result<Vec<Tensor>> {
    check_same_shapes(shapes, "dare_masks")?;
    if !(0.0..1.0).contains(&p) {
        return Err(CamexError::Contract {
            detail: format!("dare drop probability must lie in [0, 1), got {p}"),
        });
    }
    let keep_scale = 1.0 / (1.0 - p);
    Ok(shapes
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[seed, i as u64]));
            let mut m = Tensor::zeros(t.shape().to_vec());
            for v in m.data_mut() {
                let u: f64 = rng.gen();
                *v = if u < p { 0.0 } else { keep_scale };
            }
            m
        })
        .collect())
}

/// DARE masking applied to values. `p = 0` returns the inputs bit-exactly.
pub fn dare_mask_values(taus: &[Tensor], p: f64, seed: u64) -> Result<Vec<Tensor>> {
    let refs: Vec<&Tensor> = taus.iter().collect();
    if p == 0.0 {
        check_same_shapes(&refs, "dare_masks")?;
        return Ok(taus.to_vec());
    }
    let masks = dare_masks(&refs, p, seed)?;
    taus.iter().zip(&masks).map(|(t, m)| t.mul(m)).collect()
}

/// Applies an externally supplied 0/1 keep-mask with DARE rescaling; used to
/// pin down the rescale semantics independently of the random draw.
pub fn apply_dare_keep(tau: &Tensor, keep: &Tensor, p: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(CamexError::Contract {
            detail: format!("dare drop probability must lie in [0, 1), got {p}"),
        });
    }
    if keep.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CamexError::Contract {
            detail: "keep mask entries must be 0 or 1".into(),
        });
    }
    let scale = 1.0 / (1.0 - p);
    tau.zip(keep, "apply_dare_keep", |t, k| t * k * scale)
}

/// Per-call context for mask derivation during training.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskContext {
    pub layer: usize,
    pub step: usize,
}

/// Result of in-graph masking: new tau handles plus the elected sign pattern
/// when the protocol produced one.
pub struct MaskedTaus {
    pub taus: Vec<Var>,
    pub elected: Option<Tensor>,
}

/// Masks tau handles in-graph according to the protocol. The masks are
/// derived from the current tau values and recorded as constants, so
/// gradients flow only through surviving entries.
pub fn mask_taus(g: &mut Graph, taus: &[Var], spec: &MergeSpec, ctx: MaskContext) -> Result<MaskedTaus> {
    spec.validate()?;
    match spec.protocol {
        Protocol::DomainSpecific => Ok(MaskedTaus {
            taus: taus.to_vec(),
            elected: None,
        }),
        Protocol::Ties => {
            let values: Vec<&Tensor> = taus.iter().map(|&t| g.value(t)).collect();
            let (masks, elected) = ties_masks(&values, spec.ties_trim_fraction)?;
            let mut out = Vec::with_capacity(taus.len());
            for (&t, m) in taus.iter().zip(masks) {
                let mv = g.constant(m);
                out.push(g.mul(t, mv)?);
            }
            Ok(MaskedTaus {
                taus: out,
                elected: Some(elected),
            })
        }
        Protocol::Dare => {
            if spec.dare_drop_prob == 0.0 {
                return Ok(MaskedTaus {
                    taus: taus.to_vec(),
                    elected: None,
                });
            }
            let values: Vec<&Tensor> = taus.iter().map(|&t| g.value(t)).collect();
            let seed = seeds::mask_seed(spec.rng_seed, ctx.layer, usize::MAX, ctx.step);
            // The per-expert component is folded in by dare_masks via the tau
            // index, so all experts of one call share `seed` but not streams.
            let masks = dare_masks(&values, spec.dare_drop_prob, seed)?;
            let mut out = Vec::with_capacity(taus.len());
            for (&t, m) in taus.iter().zip(masks) {
                let mv = g.constant(m);
                out.push(g.mul(t, mv)?);
            }
            Ok(MaskedTaus {
                taus: out,
                elected: None,
            })
        }
        Protocol::FisherDiag => Err(CamexError::Contract {
            detail: "fisher_diag is score-free and cannot mask domain vectors; use fisher_diag_merge"
                .into(),
        }),
    }
}

/// Score-weighted combination `E_m + alpha * sum_i s_i * tau_i` over tau
/// handles that have already been masked/transformed. `sign_gate` multiplies
/// the summed update elementwise (strict TIES update reading).
pub fn combine(
    g: &mut Graph,
    e_m: Var,
    taus: &[Var],
    scores: &[Var],
    alpha: f64,
    sign_gate: Option<&Tensor>,
) -> Result<Var> {
    if taus.is_empty() || taus.len() != scores.len() {
        return Err(CamexError::Contract {
            detail: format!(
                "combine requires matching non-empty taus and scores, got {} and {}",
                taus.len(),
                scores.len()
            ),
        });
    }
    let base_shape = g.value(e_m).shape().to_vec();
    for &t in taus {
        if g.value(t).shape() != base_shape.as_slice() {
            return Err(CamexError::ShapeMismatch {
                op: "combine",
                lhs: base_shape,
                rhs: g.value(t).shape().to_vec(),
            });
        }
    }
    // alpha == 0 contributes nothing: the merged tensor IS the base, and all
    // merge-path gradients are exactly zero. Returning the base node keeps
    // both facts bit-exact.
    if alpha == 0.0 {
        return Ok(e_m);
    }
    let mut update: Option<Var> = None;
    for (&t, &s) in taus.iter().zip(scores) {
        let term = g.scale(t, s)?;
        update = Some(match update {
            Some(u) => g.add(u, term)?,
            None => term,
        });
    }
    let mut u = update.expect("taus checked non-empty");
    if let Some(gate) = sign_gate {
        let gv = g.constant(gate.clone());
        u = g.mul(u, gv)?;
    }
    let scaled = g.mul_scalar(u, alpha);
    g.add(e_m, scaled)
}

/// Plain domain-specific merging of one parameter tensor (no masks, no
/// curvature): `E_m + alpha * sum_i s_i * tau_i`.
pub fn merge_domain_specific(
    g: &mut Graph,
    e_m: Var,
    taus: &[Var],
    scores: &[Var],
    alpha: f64,
) -> Result<Var> {
    combine(g, e_m, taus, scores, alpha, None)
}

/// Value-level domain-specific merge.
pub fn merge_domain_specific_values(
    e_m: &Tensor,
    taus: &[&Tensor],
    scores: &[f64],
    alpha: f64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let base = g.constant(e_m.clone());
    let tau_vars: Vec<Var> = taus.iter().map(|t| g.constant((*t).clone())).collect();
    let score_vars: Vec<Var> = scores.iter().map(|&s| g.scalar(s)).collect();
    let merged = merge_domain_specific(&mut g, base, &tau_vars, &score_vars, alpha)?;
    Ok(g.value(merged).clone())
}

/// Precision-weighted average of whole tensors with nonnegative diagonal
/// Fisher weights: `(sum_i F_i * E_i) / (sum_i F_i)` elementwise.
pub fn fisher_diag_merge_tensors(tensors: &[&Tensor], fishers: &[&Tensor]) -> Result<Tensor> {
    if tensors.is_empty() || tensors.len() != fishers.len() {
        return Err(CamexError::Contract {
            detail: format!(
                "fisher merge requires matching non-empty tensors and fishers, got {} and {}",
                tensors.len(),
                fishers.len()
            ),
        });
    }
    check_same_shapes(tensors, "fisher_diag_merge")?;
    for f in fishers {
        if f.shape() != tensors[0].shape() {
            return Err(CamexError::ShapeMismatch {
                op: "fisher_diag_merge",
                lhs: tensors[0].shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        if f.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(CamexError::Numeric {
                op: "fisher_diag_merge",
                detail: "fisher weights must be finite and nonnegative".into(),
            });
        }
    }
    let n = tensors[0].numel();
    let mut out = Tensor::zeros(tensors[0].shape().to_vec());
    for e in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        for (t, f) in tensors.iter().zip(fishers) {
            num += f.data()[e] * t.data()[e];
            den += f.data()[e];
        }
        if den == 0.0 {
            return Err(CamexError::DegenerateWeights { entry: e });
        }
        out.data_mut()[e] = num / den;
    }
    Ok(out)
}

/// Fisher merging of whole experts, tensor by tensor.
pub fn fisher_diag_merge(experts: &[&Expert], fishers: &[&ExpertDelta]) -> Result<Expert> {
    if experts.is_empty() || experts.len() != fishers.len() {
        return Err(CamexError::Contract {
            detail: format!(
                "fisher merge requires matching non-empty experts and fishers, got {} and {}",
                experts.len(),
                fishers.len()
            ),
        });
    }
    let pick = |sel: fn(&Expert) -> &Tensor, self_: fn(&ExpertDelta) -> &Tensor| -> Result<Tensor> {
        let ts: Vec<&Tensor> = experts.iter().map(|e| sel(e)).collect();
        let fs: Vec<&Tensor> = fishers.iter().map(|f| self_(f)).collect();
        fisher_diag_merge_tensors(&ts, &fs)
    };
    Expert::new(
        pick(|e| &e.w1, |f| &f.w1)?,
        pick(|e| &e.b1, |f| &f.b1)?,
        pick(|e| &e.w2, |f| &f.w2)?,
        pick(|e| &e.b2, |f| &f.b2)?,
        experts[0].activation,
    )
}

/// Estimates diagonal Fisher information as the mean squared gradient over a
/// batch. `build` constructs the per-example loss on a fresh graph and
/// returns the loss node plus the parameter leaves, which must be consistent
/// across examples.
pub fn estimate_diag_fisher<F>(n_examples: usize, mut build: F) -> Result<Vec<Tensor>>
where
    F: FnMut(usize, &mut Graph) -> Result<(Var, Vec<Var>)>,
{
    if n_examples == 0 {
        return Err(CamexError::Contract {
            detail: "fisher estimation requires at least one example".into(),
        });
    }
    let mut acc: Option<Vec<Tensor>> = None;
    for ex in 0..n_examples {
        let mut g = Graph::new();
        let (loss, leaves) = build(ex, &mut g)?;
        g.backward(loss)?;
        let grads: Vec<Tensor> = leaves
            .iter()
            .map(|&v| {
                g.grad(v).ok_or(CamexError::Contract {
                    detail: "fisher leaves must require gradients".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match &mut acc {
            None => acc = Some(grads.iter().map(|t| t.mul(t)).collect::<Result<Vec<_>>>()?),
            Some(acc) => {
                if acc.len() != grads.len() {
                    return Err(CamexError::Contract {
                        detail: format!(
                            "leaf count changed across examples: {} vs {}",
                            acc.len(),
                            grads.len()
                        ),
                    });
                }
                for (a, gt) in acc.iter_mut().zip(&grads) {
                    *a = a.add(&gt.mul(gt)?)?;
                }
            }
        }
    }
    let scale = 1.0 / n_examples as f64;
    Ok(acc
        .expect("n_examples checked nonzero")
        .into_iter()
        .map(|t| t.scale(scale))
        .collect())
}
