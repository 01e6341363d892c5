//! A small residual MoE language model in three parameter layouts, used by
//! the training harness and the end-to-end comparisons.
//!
//! * `Vanilla` — every layer routes tokens over all `N` experts (top-k).
//! * `Merging` — every layer stores a base expert plus `N - 1` domain
//!   experts and runs the segment-merged forward pass.
//! * `Dynamic` — one shared base expert for the whole stack; each layer
//!   stores only domain vectors and the base is re-derived layer to layer
//!   with uniform weights. Costs `(layers - 1)` fewer experts of storage
//!   than `Merging` at identical layer width.
//!
//! The token embedding doubles as the output head (tied weights), so the
//! backbone outside the expert stack is a single `[vocab, d_model]` matrix.

use crate::autodiff::{Graph, Var};
use crate::curvature::{CurvatureBank, CurvatureVars, ExpertCurvature, ExpertCurvatureVars};
use crate::error::{CamexError, Result};
use crate::merge::{combine, ExpertDelta, MaskContext, MergeSpec};
use crate::moe::{smoe_forward, Activation, Expert, ExpertBank, ExpertVars, Router};
use crate::seeds;
use crate::segment::{
    plan_segments, segment_merged_forward_taus, split_segments, MergedLayerTaus, SegmentOptions,
};
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const TAG_EMBED: u64 = 0xE0;
const TAG_BASE: u64 = 0xB0;
const TAG_EXPERT: u64 = 0xE1;
const TAG_TAU: u64 = 0x70;
const TAG_ROUTER: u64 = 0x60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Merging,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Total expert count `N`. Merged layouts store one base plus `N - 1`
    /// domain experts and route over the domain experts only.
    pub n_experts: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    pub seg_len: usize,
    /// `Some(rank)` attaches trainable Kronecker curvature factors to every
    /// domain expert (merged layouts only).
    pub curvature_rank: Option<usize>,
    /// Experts activated per token in the vanilla layout.
    pub top_k: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(CamexError::Contract {
                detail: format!("vocab must be at least 2, got {}", self.vocab),
            });
        }
        if self.d_model == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(CamexError::Contract {
                detail: "d_model, d_ff and n_layers must be positive".into(),
            });
        }
        if self.n_experts < 2 {
            return Err(CamexError::Contract {
                detail: format!("at least 2 experts are required, got {}", self.n_experts),
            });
        }
        plan_segments(self.seq_len, self.seg_len)?;
        match self.variant {
            Variant::Vanilla => {
                if self.curvature_rank.is_some() {
                    return Err(CamexError::Contract {
                        detail: "curvature factors only apply to merged layouts".into(),
                    });
                }
                if self.top_k == 0 || self.top_k > self.n_experts {
                    return Err(CamexError::Contract {
                        detail: format!(
                            "top_k must lie in 1..={}, got {}",
                            self.n_experts, self.top_k
                        ),
                    });
                }
            }
            Variant::Merging | Variant::Dynamic => {
                if self.curvature_rank == Some(0) {
                    return Err(CamexError::Contract {
                        detail: "curvature rank must be positive when enabled".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_domain(&self) -> usize {
        self.n_experts - 1
    }

    fn n_scores(&self) -> usize {
        match self.variant {
            Variant::Vanilla => self.n_experts,
            Variant::Merging | Variant::Dynamic => self.n_domain(),
        }
    }
}

/// Expert storage of one layer.
#[derive(Debug, Clone)]
pub enum LayerBank {
    /// Full experts; in merged layouts index 0 is the base.
    Full(ExpertBank),
    /// Domain vectors only; the base lives at the model level.
    DomainOnly(Vec<ExpertDelta>),
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub bank: LayerBank,
    pub curvature: Option<CurvatureBank>,
    pub router: Router,
}

#[derive(Debug, Clone)]
pub struct CamexModel {
    pub cfg: ModelConfig,
    /// `[vocab, d_model]`, also the tied output head.
    pub embed: Tensor,
    /// Shared base expert of the `Dynamic` layout.
    pub base: Option<Expert>,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Embedding / tied head.
    pub backbone: usize,
    /// Expert weights, counting stored domain vectors and bases.
    pub experts: usize,
    pub curvature: usize,
    pub router: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.backbone + self.experts + self.curvature + self.router
    }
}

fn init_expert(seed: u64, tags: [u64; 3], d_model: usize, d_ff: usize) -> Expert {
    let [tag, layer, idx] = tags;
    let mut r1 = ChaCha8Rng::seed_from_u64(seeds::mix(&[seed, tag, layer, idx, 0]));
    let w1 = Tensor::randn(vec![d_ff, d_model], 1.0 / (d_model as f64).sqrt(), &mut r1);
    let mut r2 = ChaCha8Rng::seed_from_u64(seeds::mix(&[seed, tag, layer, idx, 1]));
    let w2 = Tensor::randn(vec![d_model, d_ff], 1.0 / (d_ff as f64).sqrt(), &mut r2);
    Expert {
        w1,
        b1: Tensor::zeros(vec![d_ff]),
        w2,
        b2: Tensor::zeros(vec![d_model]),
        activation: Activation::GeluTanh,
    }
}

impl CamexModel {
    /// Fresh model. Every tensor gets its own seeded stream, so two models
    /// that share a seed agree bit-for-bit on every tensor they both have —
    /// turning curvature on, or switching the expert layout, perturbs
    /// nothing else.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<CamexModel> {
        cfg.validate()?;
        let mut re = ChaCha8Rng::seed_from_u64(seeds::mix(&[seed, TAG_EMBED]));
        let embed = Tensor::randn(
            vec![cfg.vocab, cfg.d_model],
            1.0 / (cfg.d_model as f64).sqrt(),
            &mut re,
        );
        let base = match cfg.variant {
            Variant::Dynamic => Some(init_expert(seed, [TAG_BASE, 0, 0], cfg.d_model, cfg.d_ff)),
            _ => None,
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let bank = match cfg.variant {
                Variant::Vanilla | Variant::Merging => {
                    let mut experts = (0..cfg.n_experts).map(|i| {
                        init_expert(seed, [TAG_EXPERT, l as u64, i as u64], cfg.d_model, cfg.d_ff)
                    });
                    let base = experts.next().expect("n_experts >= 2");
                    LayerBank::Full(ExpertBank::new(base, experts.collect())?)
                }
                Variant::Dynamic => {
                    let taus = (0..cfg.n_domain())
                        .map(|i| {
                            let e = init_expert(
                                seed,
                                [TAG_TAU, l as u64, i as u64],
                                cfg.d_model,
                                cfg.d_ff,
                            );
                            ExpertDelta { w1: e.w1, b1: e.b1, w2: e.w2, b2: e.b2 }
                        })
                        .collect();
                    LayerBank::DomainOnly(taus)
                }
            };
            let curvature = cfg
                .curvature_rank
                .map(|rank| {
                    let experts = (0..cfg.n_domain())
                        .map(|_| ExpertCurvature::identity(cfg.d_model, cfg.d_ff, rank))
                        .collect::<Result<Vec<_>>>()?;
                    Ok::<_, CamexError>(CurvatureBank { experts })
                })
                .transpose()?;
            let mut rr = ChaCha8Rng::seed_from_u64(seeds::mix(&[seed, TAG_ROUTER, l as u64]));
            let router = Router::new(Tensor::randn(
                vec![cfg.n_scores(), cfg.d_model],
                1.0 / (cfg.d_model as f64).sqrt(),
                &mut rr,
            ))?;
            layers.push(LayerParams { bank, curvature, router });
        }
        Ok(CamexModel { cfg: cfg.clone(), embed, base, layers })
    }

    /// Every parameter tensor with its canonical name, in canonical order.
    /// This order is the model's flat parameter layout: checkpoints,
    /// optimizer state and [`ModelVars::ordered`] all follow it.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embed".to_string(), &self.embed)];
        if let Some(base) = &self.base {
            for (slot, t) in base.tensors() {
                out.push((format!("base.{slot}"), t));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer.{l}.router.W"), &layer.router.weight));
            match &layer.bank {
                LayerBank::Full(bank) => {
                    for (i, e) in bank.all().into_iter().enumerate() {
                        for (slot, t) in e.tensors() {
                            out.push((format!("layer.{l}.expert.{i}.{slot}"), t));
                        }
                    }
                }
                LayerBank::DomainOnly(taus) => {
                    for (i, d) in taus.iter().enumerate() {
                        for (slot, t) in d.tensors() {
                            out.push((format!("layer.{l}.tau.{i}.{slot}"), t));
                        }
                    }
                }
            }
            if let Some(c) = &layer.curvature {
                for (i, ec) in c.experts.iter().enumerate() {
                    for (slot, f) in ec.factor_sets() {
                        for (rname, t) in f.tensors() {
                            out.push((format!("layer.{l}.curv.{i}.{slot}.{rname}"), t));
                        }
                    }
                }
            }
        }
        out
    }

    /// Mutable view in the same order as [`CamexModel::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("embed".to_string(), &mut self.embed)];
        if let Some(base) = &mut self.base {
            for (slot, t) in base.tensors_mut() {
                out.push((format!("base.{slot}"), t));
            }
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer.{l}.router.W"), &mut layer.router.weight));
            match &mut layer.bank {
                LayerBank::Full(bank) => {
                    for (slot, t) in bank.base.tensors_mut() {
                        out.push((format!("layer.{l}.expert.0.{slot}"), t));
                    }
                    for (i, e) in bank.domain.iter_mut().enumerate() {
                        for (slot, t) in e.tensors_mut() {
                            out.push((format!("layer.{l}.expert.{}.{slot}", i + 1), t));
                        }
                    }
                }
                LayerBank::DomainOnly(taus) => {
                    for (i, d) in taus.iter_mut().enumerate() {
                        let ExpertDelta { w1, b1, w2, b2 } = d;
                        for (slot, t) in
                            [("W1", w1), ("b1", b1), ("W2", w2), ("b2", b2)]
                        {
                            out.push((format!("layer.{l}.tau.{i}.{slot}"), t));
                        }
                    }
                }
            }
            if let Some(c) = &mut layer.curvature {
                for (i, ec) in c.experts.iter_mut().enumerate() {
                    for (slot, f) in ec.factor_sets_mut() {
                        for (rname, t) in f.tensors_mut() {
                            out.push((format!("layer.{l}.curv.{i}.{slot}.{rname}"), t));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn count_params(&self) -> ParamCounts {
        let mut counts = ParamCounts { backbone: self.embed.numel(), experts: 0, curvature: 0, router: 0 };
        if let Some(base) = &self.base {
            counts.experts += base.param_count();
        }
        for layer in &self.layers {
            counts.router += layer.router.weight.numel();
            match &layer.bank {
                LayerBank::Full(bank) => {
                    counts.experts += bank.all().iter().map(|e| e.param_count()).sum::<usize>();
                }
                LayerBank::DomainOnly(taus) => {
                    counts.experts += taus
                        .iter()
                        .map(|d| d.tensors().iter().map(|(_, t)| t.numel()).sum::<usize>())
                        .sum::<usize>();
                }
            }
            if let Some(c) = &layer.curvature {
                counts.curvature += c.param_count();
            }
        }
        counts
    }

    /// Registers every parameter on `g` (trainable or frozen) and returns
    /// the structured handles.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<ModelVars> {
        let ordered: Vec<Var> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect();
        self.vars_from_ordered(&ordered)
    }

    /// Builds structured handles from a flat var list in canonical order.
    /// The finite-difference harness uses this to substitute probe tensors
    /// for real parameters.
    pub fn vars_from_ordered(&self, vars: &[Var]) -> Result<ModelVars> {
        let expected = self.named_tensors().len();
        if vars.len() != expected {
            return Err(CamexError::Contract {
                detail: format!("expected {} parameter vars, got {}", expected, vars.len()),
            });
        }
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = &vars[at..at + n];
            at += n;
            s.to_vec()
        };
        let embed = take(1)[0];
        let base = self.base.as_ref().map(|b| {
            let q = take(4);
            ExpertVars::from_vars([q[0], q[1], q[2], q[3]], b.activation)
        });
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w_g = take(1)[0];
            let bank_vars = match &layer.bank {
                LayerBank::Full(bank) => {
                    let experts = bank
                        .all()
                        .into_iter()
                        .map(|e| {
                            let q = take(4);
                            ExpertVars::from_vars([q[0], q[1], q[2], q[3]], e.activation)
                        })
                        .collect::<Vec<_>>();
                    BankVars::Full(experts)
                }
                LayerBank::DomainOnly(taus) => {
                    let handles = taus
                        .iter()
                        .map(|_| {
                            let q = take(4);
                            [q[0], q[1], q[2], q[3]]
                        })
                        .collect();
                    BankVars::DomainOnly(handles)
                }
            };
            let curvature = layer.curvature.as_ref().map(|c| {
                c.experts
                    .iter()
                    .map(|ec| {
                        let mut sets = ec.factor_sets().into_iter().map(|(_, f)| {
                            let terms = f
                                .terms
                                .iter()
                                .map(|_| {
                                    let q = take(4);
                                    crate::curvature::RankTermVars {
                                        a: q[0],
                                        b: q[1],
                                        c: q[2],
                                        d: q[3],
                                    }
                                })
                                .collect();
                            CurvatureVars { dims: f.dims, terms }
                        });
                        ExpertCurvatureVars {
                            w1: sets.next().expect("four factor sets"),
                            b1: sets.next().expect("four factor sets"),
                            w2: sets.next().expect("four factor sets"),
                            b2: sets.next().expect("four factor sets"),
                        }
                    })
                    .collect::<Vec<_>>()
            });
            layers.push(LayerVars { w_g, bank: bank_vars, curvature });
        }
        debug_assert_eq!(at, vars.len());
        Ok(ModelVars { embed, base, layers, ordered: vars.to_vec() })
    }

    /// Runs the stack over one token sequence and returns the final hidden
    /// states in forward order, chunked the way the variant processes them
    /// (one `[L, d]` block for vanilla, per-segment `[S, d]` blocks
    /// otherwise).
    pub fn forward_chunks(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        tokens: &[usize],
        spec: &MergeSpec,
        opts: &ForwardOptions,
    ) -> Result<Vec<Var>> {
        if tokens.len() != self.cfg.seq_len {
            return Err(CamexError::Contract {
                detail: format!(
                    "example has {} tokens, model expects {}",
                    tokens.len(),
                    self.cfg.seq_len
                ),
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(CamexError::Contract {
                detail: format!("token {t} out of range for vocab {}", self.cfg.vocab),
            });
        }
        let h0 = g.gather_rows(vars.embed, tokens)?;
        let chunks = match self.cfg.variant {
            Variant::Vanilla => {
                let mut h = h0;
                for layer in &vars.layers {
                    let BankVars::Full(experts) = &layer.bank else {
                        return Err(CamexError::Contract {
                            detail: "vanilla layers store full experts".into(),
                        });
                    };
                    let out = smoe_forward(g, experts, layer.w_g, h, self.cfg.top_k)?;
                    h = g.add(h, out)?;
                }
                vec![h]
            }
            Variant::Merging => {
                let plan = plan_segments(self.cfg.seq_len, self.cfg.seg_len)?;
                let mut segs = split_segments(g, h0, &plan)?;
                for (l, layer) in vars.layers.iter().enumerate() {
                    let mlt = layer.as_taus(g, None)?;
                    let seg_opts = SegmentOptions {
                        detach_first: opts.detach_first,
                        ctx: MaskContext { layer: l, step: opts.step },
                    };
                    let fwd = segment_merged_forward_taus(g, &mlt, &segs, spec, &seg_opts)?;
                    for (s, out) in segs.iter_mut().zip(fwd.outputs) {
                        *s = g.add(*s, out)?;
                    }
                }
                segs
            }
            Variant::Dynamic => {
                let plan = plan_segments(self.cfg.seq_len, self.cfg.seg_len)?;
                let mut segs = split_segments(g, h0, &plan)?;
                let base = vars.base.as_ref().ok_or_else(|| CamexError::Contract {
                    detail: "dynamic layout requires a shared base expert".into(),
                })?;
                let mut base_slots = base.vars();
                for (l, layer) in vars.layers.iter().enumerate() {
                    let mlt = layer.as_taus(
                        g,
                        Some(ExpertVars::from_vars(base_slots, base.activation)),
                    )?;
                    let seg_opts = SegmentOptions {
                        detach_first: opts.detach_first,
                        ctx: MaskContext { layer: l, step: opts.step },
                    };
                    let fwd = segment_merged_forward_taus(g, &mlt, &segs, spec, &seg_opts)?;
                    for (s, out) in segs.iter_mut().zip(&fwd.outputs) {
                        *s = g.add(*s, *out)?;
                    }
                    if l + 1 < vars.layers.len() {
                        // Base hand-off: uniform weights over the very same
                        // masked-and-curved domain vectors this layer merged
                        // with.
                        let n = self.cfg.n_domain();
                        let uniform = g.scalar(1.0 / n as f64);
                        let scores = vec![uniform; n];
                        for (slot, base_slot) in base_slots.iter_mut().enumerate() {
                            *base_slot = combine(
                                g,
                                *base_slot,
                                &fwd.transformed[slot],
                                &scores,
                                spec.alpha,
                                fwd.gates[slot].as_ref(),
                            )?;
                        }
                    }
                }
                segs
            }
        };
        Ok(chunks)
    }

    pub fn forward_loss(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        example: &Example<'_>,
        spec: &MergeSpec,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let oob = |what: &str, v: usize| CamexError::Contract {
            detail: format!("{what} {v} out of range for vocab {}", self.cfg.vocab),
        };
        match example {
            Example::Lm { targets, .. } => {
                if targets.len() != self.cfg.seq_len {
                    return Err(CamexError::Contract {
                        detail: format!(
                            "example has {} targets, model expects {}",
                            targets.len(),
                            self.cfg.seq_len
                        ),
                    });
                }
                if let Some(&t) = targets.iter().find(|&&t| t >= self.cfg.vocab) {
                    return Err(oob("target", t));
                }
            }
            Example::Cls { label, .. } => {
                if *label >= self.cfg.vocab {
                    return Err(oob("label", *label));
                }
            }
        }
        let chunks = self.forward_chunks(g, vars, example.tokens(), spec, opts)?;

        let embed_t = g.transpose(vars.embed)?;
        match example {
            Example::Lm { targets, .. } => {
                let mut total: Option<Var> = None;
                let mut row0 = 0usize;
                for &chunk in &chunks {
                    let rows = g.value(chunk).shape()[0];
                    let logits = g.matmul(chunk, embed_t)?;
                    let lsm = g.log_softmax(logits)?;
                    let picked = g.gather_per_row(lsm, &targets[row0..row0 + rows])?;
                    let s = g.sum(picked);
                    total = Some(match total {
                        Some(t) => g.add(t, s)?,
                        None => s,
                    });
                    row0 += rows;
                }
                let total = total.expect("at least one chunk");
                let mean = g.mul_scalar(total, 1.0 / self.cfg.seq_len as f64);
                Ok(g.neg(mean))
            }
            Example::Cls { label, .. } => {
                let last = *chunks.last().expect("at least one chunk");
                let rows = g.value(last).shape()[0];
                let final_row = g.gather_rows(last, &[rows - 1])?;
                let logits = g.matmul(final_row, embed_t)?;
                let lsm = g.log_softmax(logits)?;
                let picked = g.gather_per_row(lsm, &[*label])?;
                let s = g.sum(picked);
                Ok(g.neg(s))
            }
        }
    }
}

/// Expert handles of one layer.
#[derive(Debug, Clone)]
pub enum BankVars {
    Full(Vec<ExpertVars>),
    DomainOnly(Vec<[Var; 4]>),
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub w_g: Var,
    pub bank: BankVars,
    pub curvature: Option<Vec<ExpertCurvatureVars>>,
}

impl LayerVars {
    /// Layer as a tau-form merged layer. `shared_base` supplies the base
    /// expert when the layer stores only domain vectors.
    fn as_taus(&self, g: &mut Graph, shared_base: Option<ExpertVars>) -> Result<MergedLayerTaus> {
        match (&self.bank, shared_base) {
            (BankVars::Full(experts), None) => {
                let base = experts[0].clone();
                let base_slots = base.vars();
                let taus = experts[1..]
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
                Ok(MergedLayerTaus {
                    base,
                    taus,
                    curvature: self.curvature.clone(),
                    w_g: self.w_g,
                })
            }
            (BankVars::DomainOnly(taus), Some(base)) => Ok(MergedLayerTaus {
                base,
                taus: taus.clone(),
                curvature: self.curvature.clone(),
                w_g: self.w_g,
            }),
            (BankVars::Full(_), Some(_)) => Err(CamexError::Contract {
                detail: "layer stores its own base; a shared base does not apply".into(),
            }),
            (BankVars::DomainOnly(_), None) => Err(CamexError::Contract {
                detail: "domain-only layer needs the shared base expert".into(),
            }),
        }
    }
}

/// Graph handles for a registered model. `ordered` mirrors
/// [`CamexModel::named_tensors`] index for index.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: Var,
    pub base: Option<ExpertVars>,
    pub layers: Vec<LayerVars>,
    pub ordered: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Training step, folded into drop-mask derivation.
    pub step: usize,
    /// See [`SegmentOptions::detach_first`].
    pub detach_first: bool,
}

impl Default for ForwardOptions {
    fn default() -> ForwardOptions {
        ForwardOptions { step: 0, detach_first: true }
    }
}

/// One training example, borrowed from a dataset.
#[derive(Debug, Clone, Copy)]
pub enum Example<'a> {
    Lm { tokens: &'a [usize], targets: &'a [usize] },
    Cls { tokens: &'a [usize], label: usize },
}

impl Example<'_> {
    pub fn tokens(&self) -> &[usize] {
        match self {
            Example::Lm { tokens, .. } | Example::Cls { tokens, .. } => tokens,
        }
    }
}
