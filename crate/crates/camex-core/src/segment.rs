//! Causal segment routing.
//!
//! Token sequences are cut into equal contiguous segments. Each segment gets
//! one routing-score vector over the domain experts, computed from the MEAN
//! hidden state of the PREVIOUS segment, so a segment's merged weights never
//! see its own tokens or anything later. The first segment has no
//! predecessor: it scores from its own mean, wrapped in a stop-gradient so no
//! learning signal flows into the router through that shortcut.
//!
//! Hidden states stay chunked per segment (`Vec<Var>`, one `[S, d]` block per
//! segment) through the whole layer stack; that keeps every dependency
//! explicit and makes the causality guarantees directly testable.

use crate::autodiff::{Graph, Var};
use crate::curvature::{apply_curvature, CurvatureBank, ExpertCurvatureVars};
use crate::error::{CamexError, Result};
use crate::merge::{combine, mask_taus, MaskContext, MergeSpec, Protocol};
use crate::moe::{expert_forward, route_tokens, ExpertBank, ExpertVars, Router};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Equal-length contiguous segmentation of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub seq_len: usize,
    pub seg_len: usize,
}

/// Builds a plan; the segment length must divide the sequence length (any
/// padding happens upstream).
pub fn plan_segments(seq_len: usize, seg_len: usize) -> Result<SegmentPlan> {
    if seq_len == 0 || seg_len == 0 {
        return Err(CamexError::Contract {
            detail: format!("segmentation needs positive lengths, got {seq_len} and {seg_len}"),
        });
    }
    if seq_len % seg_len != 0 {
        return Err(CamexError::Contract {
            detail: format!("segment length {seg_len} does not divide sequence length {seq_len}"),
        });
    }
    Ok(SegmentPlan { seq_len, seg_len })
}

impl SegmentPlan {
    pub fn n_segments(&self) -> usize {
        self.seq_len / self.seg_len
    }

    /// Token range of segment `k`.
    pub fn range(&self, k: usize) -> Result<std::ops::Range<usize>> {
        if k >= self.n_segments() {
            return Err(CamexError::IndexOutOfBounds {
                op: "segment_range",
                index: k,
                bound: self.n_segments(),
            });
        }
        Ok(k * self.seg_len..(k + 1) * self.seg_len)
    }

    fn check_rows(&self, rows: usize, op: &'static str) -> Result<()> {
        if rows != self.seq_len {
            return Err(CamexError::Contract {
                detail: format!("{op}: plan covers {} rows, input has {rows}", self.seq_len),
            });
        }
        Ok(())
    }
}

/// Where a segment's scores came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// First segment: its own mean hidden state, gradient-blocked.
    OwnMeanDetached,
    /// Later segments: the previous segment's mean hidden state.
    PreviousSegmentMean,
}

/// Per-segment routing scores over the domain experts.
#[derive(Debug, Clone)]
pub struct SegmentScores {
    /// One rank-1 `[n_domain]` score vector per segment; each sums to 1.
    pub scores: Vec<Tensor>,
    pub sources: Vec<ScoreSource>,
}

/// Knobs for the segment forward pass that are not part of the merge rule.
#[derive(Debug, Clone, Copy)]
pub struct SegmentOptions {
    /// Stop-gradient on the first segment's scores. Always on in training;
    /// the finite-difference harness turns it off because a difference
    /// quotient measures the true derivative THROUGH the detached path and
    /// would disagree with the (intentionally) blocked analytic gradient.
    pub detach_first: bool,
    /// Layer/step identity for mask derivation.
    pub ctx: MaskContext,
}

impl Default for SegmentOptions {
    fn default() -> SegmentOptions {
        SegmentOptions {
            detach_first: true,
            ctx: MaskContext::default(),
        }
    }
}

/// Cuts `h` (`[L, d]`) into per-segment `[S, d]` blocks.
pub fn split_segments(g: &mut Graph, h: Var, plan: &SegmentPlan) -> Result<Vec<Var>> {
    let shape = g.value(h).shape().to_vec();
    if shape.len() != 2 {
        return Err(CamexError::InvalidShape {
            op: "split_segments",
            shape,
            detail: "expected [tokens, d_model]".into(),
        });
    }
    plan.check_rows(shape[0], "split_segments")?;
    (0..plan.n_segments())
        .map(|k| {
            let idx: Vec<usize> = plan.range(k)?.collect();
            g.gather_rows(h, &idx)
        })
        .collect()
}

/// One segment's score vector: softmax of the router applied to the mean
/// hidden state of `source_seg`.
fn score_from_mean(g: &mut Graph, w_g: Var, source_seg: Var) -> Result<Var> {
    let mean = g.mean_rows(source_seg)?;
    let d = g.value(mean).shape()[0];
    let row = g.reshape(mean, vec![1, d])?;
    let probs = route_tokens(g, w_g, row)?;
    let n = g.value(probs).shape()[1];
    g.reshape(probs, vec![n])
}

/// Score vectors for all segments of a chunked sequence. Segment 0 scores
/// from its own mean (detached unless `detach_first` is off); segment `k >=
/// 1` scores from segment `k-1`'s mean.
pub fn segment_score_rows(
    g: &mut Graph,
    w_g: Var,
    segs: &[Var],
    detach_first: bool,
) -> Result<Vec<Var>> {
    if segs.is_empty() {
        return Err(CamexError::Contract {
            detail: "scoring requires at least one segment".into(),
        });
    }
    let mut out = Vec::with_capacity(segs.len());
    let first = score_from_mean(g, w_g, segs[0])?;
    out.push(if detach_first { g.detach(first) } else { first });
    for k in 1..segs.len() {
        out.push(score_from_mean(g, w_g, segs[k - 1])?);
    }
    Ok(out)
}

/// Value-level segment scoring for a full `[L, d]` hidden-state matrix.
pub fn segment_scores(router: &Router, h: &Tensor, plan: &SegmentPlan) -> Result<SegmentScores> {
    let mut g = Graph::new();
    let w_g = g.constant(router.weight.clone());
    let hv = g.constant(h.clone());
    let segs = split_segments(&mut g, hv, plan)?;
    let rows = segment_score_rows(&mut g, w_g, &segs, true)?;
    let scores = rows.iter().map(|&r| g.value(r).clone()).collect();
    let mut sources = vec![ScoreSource::OwnMeanDetached];
    sources.resize(rows.len(), ScoreSource::PreviousSegmentMean);
    Ok(SegmentScores { scores, sources })
}

/// Graph handles for one merged-SMoE layer's parameters.
#[derive(Debug, Clone)]
pub struct MergedLayerVars {
    pub base: ExpertVars,
    pub domain: Vec<ExpertVars>,
    /// One factor bundle per domain expert when curvature is in play.
    pub curvature: Option<Vec<ExpertCurvatureVars>>,
    /// Router weight, `[n_domain, d_model]`.
    pub w_g: Var,
}

/// Same layer parameters with the domain experts given directly as domain
/// vectors (the storage form of the base-propagating variant).
#[derive(Debug, Clone)]
pub struct MergedLayerTaus {
    pub base: ExpertVars,
    /// Per domain expert: `(tau_W1, tau_b1, tau_W2, tau_b2)` handles.
    pub taus: Vec<[Var; 4]>,
    pub curvature: Option<Vec<ExpertCurvatureVars>>,
    pub w_g: Var,
}

/// Outputs of the segmented merged forward pass.
pub struct SegmentForward {
    /// Per-segment `[S, d]` outputs, same chunking as the input.
    pub outputs: Vec<Var>,
    /// Per-segment `[n_domain]` score vectors.
    pub scores: Vec<Var>,
    /// Masked-and-curved domain vectors, `[slot][expert]`; what the base
    /// propagation step of the two-step merge consumes.
    pub transformed: Vec<Vec<Var>>,
    /// Per-slot elected-sign gate when the protocol produced one and the
    /// gate flag is on.
    pub gates: Vec<Option<Tensor>>,
}

/// Forward pass of one merged layer over segment-chunked hidden states.
///
/// Per layer call: domain vectors are formed once, masked once (masks shared
/// by every segment of this call), and curvature-transformed once; each
/// segment then builds its own merged parameter tensors from its score
/// vector and runs the expert on its tokens.
pub fn segment_merged_forward_vars(
    g: &mut Graph,
    layer: &MergedLayerVars,
    segs: &[Var],
    spec: &MergeSpec,
    opts: &SegmentOptions,
) -> Result<SegmentForward> {
    let base_slots = layer.base.vars();
    let taus = layer
        .domain
        .iter()
        .map(|e| {
            let ev = e.vars();
            Ok([
                g.sub(ev[0], base_slots[0])?,
                g.sub(ev[1], base_slots[1])?,
                g.sub(ev[2], base_slots[2])?,
                g.sub(ev[3], base_slots[3])?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let as_taus = MergedLayerTaus {
        base: layer.base.clone(),
        taus,
        curvature: layer.curvature.clone(),
        w_g: layer.w_g,
    };
    segment_merged_forward_taus(g, &as_taus, segs, spec, opts)
}

/// [`segment_merged_forward_vars`] over directly stored domain vectors.
pub fn segment_merged_forward_taus(
    g: &mut Graph,
    layer: &MergedLayerTaus,
    segs: &[Var],
    spec: &MergeSpec,
    opts: &SegmentOptions,
) -> Result<SegmentForward> {
    spec.validate()?;
    if spec.protocol == Protocol::FisherDiag {
        return Err(CamexError::Contract {
            detail: "fisher_diag merging is score-free and offline; it cannot drive a routed forward pass"
                .into(),
        });
    }
    let n_domain = layer.taus.len();
    if n_domain == 0 {
        return Err(CamexError::Contract {
            detail: "merged forward requires at least one domain expert".into(),
        });
    }
    if let Some(c) = &layer.curvature {
        if c.len() != n_domain {
            return Err(CamexError::Contract {
                detail: format!(
                    "curvature bundles ({}) must match domain experts ({n_domain})",
                    c.len()
                ),
            });
        }
    }
    let w_g_rows = g.value(layer.w_g).shape()[0];
    if w_g_rows != n_domain {
        return Err(CamexError::Contract {
            detail: format!("router scores {w_g_rows} experts, bank has {n_domain} domain experts"),
        });
    }

    let scores = segment_score_rows(g, layer.w_g, segs, opts.detach_first)?;

    // Transform each parameter slot once; only the score weighting is
    // per-segment.
    let base_slots = layer.base.vars();
    let mut transformed: Vec<Vec<Var>> = Vec::with_capacity(4); // [slot][expert]
    let mut gates: Vec<Option<Tensor>> = Vec::with_capacity(4);
    for slot in 0..4 {
        let taus: Vec<Var> = layer.taus.iter().map(|t| t[slot]).collect();
        let masked = mask_taus(g, &taus, spec, opts.ctx)?;
        let curved = match (&layer.curvature, spec.ca_enabled) {
            (Some(banks), true) => masked
                .taus
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let f = match slot {
                        0 => &banks[i].w1,
                        1 => &banks[i].b1,
                        2 => &banks[i].w2,
                        _ => &banks[i].b2,
                    };
                    apply_curvature(g, f, t)
                })
                .collect::<Result<Vec<_>>>()?,
            _ => masked.taus.clone(),
        };
        gates.push(if spec.ties_sign_gate { masked.elected } else { None });
        transformed.push(curved);
    }

    let mut outputs = Vec::with_capacity(segs.len());
    for (&seg, &score_row) in segs.iter().zip(&scores) {
        let per_expert: Vec<Var> = (0..n_domain)
            .map(|i| g.index_scalar(score_row, i))
            .collect::<Result<Vec<_>>>()?;
        let mut merged_slots = [base_slots[0]; 4];
        for slot in 0..4 {
            merged_slots[slot] = combine(
                g,
                base_slots[slot],
                &transformed[slot],
                &per_expert,
                spec.alpha,
                gates[slot].as_ref(),
            )?;
        }
        let merged = ExpertVars::from_vars(merged_slots, layer.base.activation);
        outputs.push(expert_forward(g, &merged, seg)?);
    }
    Ok(SegmentForward {
        outputs,
        scores,
        transformed,
        gates,
    })
}

/// Value-level segmented forward over a whole `[L, d]` matrix, stitching the
/// per-segment outputs back together.
pub fn segment_merged_forward(
    bank: &ExpertBank,
    curvature: Option<&CurvatureBank>,
    router: &Router,
    h: &Tensor,
    plan: &SegmentPlan,
    spec: &MergeSpec,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let segs = split_segments(&mut g, hv, plan)?;
    let layer = register_merged_layer(&mut g, bank, curvature, router, false)?;
    let fwd = segment_merged_forward_vars(&mut g, &layer, &segs, spec, &SegmentOptions::default())?;
    let d = h.shape()[1];
    let mut out = Tensor::zeros(vec![plan.seq_len, d]);
    for (k, &seg_out) in fwd.outputs.iter().enumerate() {
        let block = g.value(seg_out);
        let dst = plan.range(k)?.start * d;
        out.data_mut()[dst..dst + block.numel()].copy_from_slice(block.data());
    }
    Ok(out)
}

/// Registers a bank (+ optional curvature and router) on a graph as one
/// [`MergedLayerVars`] bundle.
pub fn register_merged_layer(
    g: &mut Graph,
    bank: &ExpertBank,
    curvature: Option<&CurvatureBank>,
    router: &Router,
    trainable: bool,
) -> Result<MergedLayerVars> {
    if let Some(c) = curvature {
        if c.experts.len() != bank.domain.len() {
            return Err(CamexError::Contract {
                detail: format!(
                    "curvature bank covers {} experts, bank has {}",
                    c.experts.len(),
                    bank.domain.len()
                ),
            });
        }
    }
    let base = bank.base.register(g, trainable);
    let domain: Vec<ExpertVars> = bank.domain.iter().map(|e| e.register(g, trainable)).collect();
    let curvature = curvature
        .map(|c| {
            c.experts
                .iter()
                .map(|e| crate::curvature::register_expert_curvature(g, e, trainable))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let w_g = if trainable {
        g.param(&router.weight)
    } else {
        g.constant(router.weight.clone())
    };
    Ok(MergedLayerVars {
        base,
        domain,
        curvature,
        w_g,
    })
}
