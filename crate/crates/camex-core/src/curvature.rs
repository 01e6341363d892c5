//! Kronecker-factored curvature transforms for domain vectors.
//!
//! Each domain vector `tau` (an `[d_out, d_in]` matrix or `[d]` bias) gets a
//! learnable linear map `M` approximated as a sum of `R` four-factor
//! Kronecker terms:
//!
//! ```text
//! M ≈ sum_r (A_r ⊗ B_r) ⊗ (C_r ⊗ D_r)
//! ```
//!
//! with `A_r: [o1,o1]`, `B_r: [o2,o2]`, `C_r: [i1,i1]`, `D_r: [i2,i2]` and
//! `o1*o2 = d_out`, `i1*i2 = d_in`. Applying `M` to `vec(tau)` never
//! materializes a Kronecker product: `tau` is viewed as a 4-axis tensor
//! `[o1, o2, i1, i2]` (row-major, so the view is free) and each factor is a
//! mode-wise contraction done with permute + reshape + matmul, all
//! differentiable.
//!
//! The module also hosts the merge updates built on the transform, the dense
//! brute-force oracle used to check it, the closed-form gradient of a dense
//! `M`, the two-step update decomposition, and the test-time
//! reparameterization that folds curvature into stored experts.

use crate::autodiff::{Graph, Var};
use crate::error::{CamexError, Result};
use crate::merge::{combine, domain_vectors, mask_taus, ExpertDelta, MaskContext, MergeSpec};
use crate::moe::{Expert, ExpertBank};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Largest `vec(tau)` length the dense-oracle paths accept. Dense forms are
/// `n x n` matrices, so this keeps them trivially cheap.
pub const DENSE_VEC_CAP: usize = 64;

fn check_dense_cap(n: usize, op: &'static str) -> Result<()> {
    if n > DENSE_VEC_CAP {
        return Err(CamexError::Oracle {
            detail: format!("{op} is a dense oracle limited to vec length {DENSE_VEC_CAP}, got {n}"),
        });
    }
    Ok(())
}

/// Splits `n` into `(a, b)` with `a * b == n`, `a <= b`, and `a` the largest
/// divisor not exceeding `sqrt(n)` — the nearest-to-square factor pair.
pub fn split_nearest_square(n: usize) -> (usize, usize) {
    assert!(n > 0, "cannot factor zero");
    let mut a = (n as f64).sqrt().floor() as usize;
    a = a.max(1);
    while n % a != 0 {
        a -= 1;
    }
    (a, n / a)
}

/// How one parameter tensor's dimensions split into the four factor sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimFactorization {
    pub d_out1: usize,
    pub d_out2: usize,
    pub d_in1: usize,
    pub d_in2: usize,
}

impl DimFactorization {
    pub fn new(d_out1: usize, d_out2: usize, d_in1: usize, d_in2: usize) -> Result<DimFactorization> {
        if d_out1 == 0 || d_out2 == 0 || d_in1 == 0 || d_in2 == 0 {
            return Err(CamexError::Contract {
                detail: "factorization dimensions must be positive".into(),
            });
        }
        Ok(DimFactorization { d_out1, d_out2, d_in1, d_in2 })
    }

    /// Nearest-to-square factorization of a `[d_out, d_in]` matrix.
    pub fn nearest_square(d_out: usize, d_in: usize) -> Result<DimFactorization> {
        if d_out == 0 || d_in == 0 {
            return Err(CamexError::Contract {
                detail: "factorization dimensions must be positive".into(),
            });
        }
        let (o1, o2) = split_nearest_square(d_out);
        let (i1, i2) = split_nearest_square(d_in);
        DimFactorization::new(o1, o2, i1, i2)
    }

    /// Factorization for a parameter tensor: `[d_out, d_in]` matrices split
    /// both dims; `[d]` biases are treated as `[d, 1]`.
    pub fn for_shape(shape: &[usize]) -> Result<DimFactorization> {
        match shape {
            [d_out, d_in] => DimFactorization::nearest_square(*d_out, *d_in),
            [d] => DimFactorization::nearest_square(*d, 1),
            other => Err(CamexError::InvalidShape {
                op: "dim_factorization",
                shape: other.to_vec(),
                detail: "curvature applies to rank-1 or rank-2 tensors".into(),
            }),
        }
    }

    pub fn d_out(&self) -> usize {
        self.d_out1 * self.d_out2
    }

    pub fn d_in(&self) -> usize {
        self.d_in1 * self.d_in2
    }

    /// Total `vec(tau)` length.
    pub fn vec_len(&self) -> usize {
        self.d_out() * self.d_in()
    }

    pub fn axes(&self) -> [usize; 4] {
        [self.d_out1, self.d_out2, self.d_in1, self.d_in2]
    }

    /// Whether `shape` is a tensor this factorization applies to.
    pub fn matches(&self, shape: &[usize]) -> bool {
        match shape {
            [d_out, d_in] => *d_out == self.d_out() && *d_in == self.d_in(),
            [d] => *d == self.d_out() && self.d_in() == 1,
            _ => false,
        }
    }

    /// Factor parameters for one rank term.
    pub fn params_per_rank(&self) -> usize {
        self.d_out1 * self.d_out1
            + self.d_out2 * self.d_out2
            + self.d_in1 * self.d_in1
            + self.d_in2 * self.d_in2
    }
}

/// One rank term's four square factors.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTerm {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

impl RankTerm {
    fn identity(dims: DimFactorization) -> RankTerm {
        RankTerm {
            a: Tensor::eye(dims.d_out1),
            b: Tensor::eye(dims.d_out2),
            c: Tensor::eye(dims.d_in1),
            d: Tensor::eye(dims.d_in2),
        }
    }

    fn zero(dims: DimFactorization) -> RankTerm {
        RankTerm {
            a: Tensor::zeros(vec![dims.d_out1, dims.d_out1]),
            b: Tensor::zeros(vec![dims.d_out2, dims.d_out2]),
            c: Tensor::zeros(vec![dims.d_in1, dims.d_in1]),
            d: Tensor::zeros(vec![dims.d_in2, dims.d_in2]),
        }
    }

    fn random<R: Rng>(dims: DimFactorization, std: f64, rng: &mut R) -> RankTerm {
        RankTerm {
            a: Tensor::randn(vec![dims.d_out1, dims.d_out1], std, rng),
            b: Tensor::randn(vec![dims.d_out2, dims.d_out2], std, rng),
            c: Tensor::randn(vec![dims.d_in1, dims.d_in1], std, rng),
            d: Tensor::randn(vec![dims.d_in2, dims.d_in2], std, rng),
        }
    }
}

/// Learnable factored curvature transform for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureFactors {
    pub dims: DimFactorization,
    pub terms: Vec<RankTerm>,
}

impl CurvatureFactors {
    /// Rank slot 1 starts as exact identity (the transform is a no-op until
    /// trained); slots 2+ start as zero matrices.
    pub fn identity(dims: DimFactorization, rank: usize) -> Result<CurvatureFactors> {
        if rank == 0 {
            return Err(CamexError::Contract {
                detail: "curvature rank must be at least 1".into(),
            });
        }
        let mut terms = vec![RankTerm::identity(dims)];
        for _ in 1..rank {
            terms.push(RankTerm::zero(dims));
        }
        Ok(CurvatureFactors { dims, terms })
    }

    /// Random factors, for oracles and tests.
    pub fn random<R: Rng>(dims: DimFactorization, rank: usize, std: f64, rng: &mut R) -> Result<CurvatureFactors> {
        if rank == 0 {
            return Err(CamexError::Contract {
                detail: "curvature rank must be at least 1".into(),
            });
        }
        Ok(CurvatureFactors {
            dims,
            terms: (0..rank).map(|_| RankTerm::random(dims, std, rng)).collect(),
        })
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    /// Exact learnable-parameter count: `R * (o1^2 + o2^2 + i1^2 + i2^2)`.
    pub fn param_count(&self) -> usize {
        self.rank() * self.dims.params_per_rank()
    }

    /// Whether the factored form holds fewer numbers than the dense
    /// `vec_len x vec_len` matrix it approximates. Fails only for degenerate
    /// tiny dims; model configurations assert it.
    pub fn is_compressive(&self) -> bool {
        self.param_count() < self.dims.vec_len() * self.dims.vec_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(CamexError::Contract {
                detail: "curvature rank must be at least 1".into(),
            });
        }
        let want = [
            vec![self.dims.d_out1, self.dims.d_out1],
            vec![self.dims.d_out2, self.dims.d_out2],
            vec![self.dims.d_in1, self.dims.d_in1],
            vec![self.dims.d_in2, self.dims.d_in2],
        ];
        for term in &self.terms {
            for (t, w) in [&term.a, &term.b, &term.c, &term.d].iter().zip(&want) {
                if t.shape() != w.as_slice() {
                    return Err(CamexError::ShapeMismatch {
                        op: "curvature_factors",
                        lhs: w.clone(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Factor tensors with stable names (`r0.A`, `r0.B`, ...), in rank order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.terms.len() * 4);
        for (r, term) in self.terms.iter().enumerate() {
            out.push((format!("r{r}.A"), &term.a));
            out.push((format!("r{r}.B"), &term.b));
            out.push((format!("r{r}.C"), &term.c));
            out.push((format!("r{r}.D"), &term.d));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.terms.len() * 4);
        for (r, term) in self.terms.iter_mut().enumerate() {
            out.push((format!("r{r}.A"), &mut term.a));
            out.push((format!("r{r}.B"), &mut term.b));
            out.push((format!("r{r}.C"), &mut term.c));
            out.push((format!("r{r}.D"), &mut term.d));
        }
        out
    }
}

/// Graph handles for one registered rank term.
#[derive(Debug, Clone, Copy)]
pub struct RankTermVars {
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
}

/// Graph handles for a registered [`CurvatureFactors`].
#[derive(Debug, Clone)]
pub struct CurvatureVars {
    pub dims: DimFactorization,
    pub terms: Vec<RankTermVars>,
}

impl CurvatureVars {
    /// All factor handles in the same order as [`CurvatureFactors::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.terms
            .iter()
            .flat_map(|t| [t.a, t.b, t.c, t.d])
            .collect()
    }
}

/// Registers factor tensors on the graph, as trainable leaves or constants.
pub fn register_curvature(g: &mut Graph, f: &CurvatureFactors, trainable: bool) -> Result<CurvatureVars> {
    f.validate()?;
    let terms = f
        .terms
        .iter()
        .map(|t| {
            let mut reg = |x: &Tensor| {
                if trainable {
                    g.param(x)
                } else {
                    g.constant(x.clone())
                }
            };
            RankTermVars {
                a: reg(&t.a),
                b: reg(&t.b),
                c: reg(&t.c),
                d: reg(&t.d),
            }
        })
        .collect();
    Ok(CurvatureVars { dims: f.dims, terms })
}

/// Contracts square matrix `m` along `axis` of the 4-axis tensor `t`:
/// `out[..., j, ...] = sum_k m[j, k] * t[..., k, ...]`.
fn mode_apply(g: &mut Graph, t: Var, shape4: [usize; 4], axis: usize, m: Var) -> Result<Var> {
    let k = shape4[axis];
    let mut perm = Vec::with_capacity(4);
    perm.push(axis);
    for a in 0..4 {
        if a != axis {
            perm.push(a);
        }
    }
    let fronted = g.permute(t, &perm)?;
    let rest: usize = (0..4).filter(|&a| a != axis).map(|a| shape4[a]).product();
    let flat = g.reshape(fronted, vec![k, rest])?;
    let prod = g.matmul(m, flat)?;
    let mut fronted_shape = vec![k];
    fronted_shape.extend((0..4).filter(|&a| a != axis).map(|a| shape4[a]));
    let unflat = g.reshape(prod, fronted_shape)?;
    let mut inv = [0usize; 4];
    for (pos, &a) in perm.iter().enumerate() {
        inv[a] = pos;
    }
    g.permute(unflat, &inv)
}

fn check_tau_shape(dims: DimFactorization, shape: &[usize]) -> Result<()> {
    if !dims.matches(shape) {
        return Err(CamexError::InvalidShape {
            op: "apply_curvature",
            shape: shape.to_vec(),
            detail: format!(
                "factorization covers [{}, {}] (axes {:?})",
                dims.d_out(),
                dims.d_in(),
                dims.axes()
            ),
        });
    }
    Ok(())
}

/// Applies the factored transform to `tau` in-graph: the result equals
/// `sum_r ((A_r ⊗ B_r) ⊗ (C_r ⊗ D_r)) · vec(tau)` reshaped back, computed as
/// four sequential mode contractions per rank term. Differentiable in both
/// the factors and `tau`.
pub fn apply_curvature(g: &mut Graph, f: &CurvatureVars, tau: Var) -> Result<Var> {
    let tau_shape = g.value(tau).shape().to_vec();
    check_tau_shape(f.dims, &tau_shape)?;
    if f.terms.is_empty() {
        return Err(CamexError::Contract {
            detail: "curvature rank must be at least 1".into(),
        });
    }
    let shape4 = f.dims.axes();
    let viewed = g.reshape(tau, shape4.to_vec())?;
    let mut total: Option<Var> = None;
    for term in &f.terms {
        let mut cur = viewed;
        for (axis, m) in [(0, term.a), (1, term.b), (2, term.c), (3, term.d)] {
            cur = mode_apply(g, cur, shape4, axis, m)?;
        }
        total = Some(match total {
            Some(t) => g.add(t, cur)?,
            None => cur,
        });
    }
    g.reshape(total.expect("rank checked nonzero"), tau_shape)
}

/// Value-level curvature application.
pub fn apply_curvature_values(f: &CurvatureFactors, tau: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let fv = register_curvature(&mut g, f, false)?;
    let tv = g.constant(tau.clone());
    let out = apply_curvature(&mut g, &fv, tv)?;
    Ok(g.value(out).clone())
}

/// Dense Kronecker product of two matrices, for the oracle path.
pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(CamexError::InvalidShape {
            op: "kron",
            shape: if a.rank() != 2 { a.shape().to_vec() } else { b.shape().to_vec() },
            detail: "kron takes rank-2 tensors".into(),
        });
    }
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let mut out = Tensor::zeros(vec![ar * br, ac * bc]);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a.at2(i, j);
            if aij == 0.0 {
                continue;
            }
            for p in 0..br {
                for q in 0..bc {
                    let v = aij * b.at2(p, q);
                    let row = i * br + p;
                    let col = j * bc + q;
                    out.data_mut()[row * (ac * bc) + col] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Materializes the full dense transform `sum_r (A_r ⊗ B_r) ⊗ (C_r ⊗ D_r)`
/// as a `[vec_len, vec_len]` matrix. Oracle only; refuses large dims.
pub fn dense_curvature_matrix(f: &CurvatureFactors) -> Result<Tensor> {
    f.validate()?;
    let n = f.dims.vec_len();
    check_dense_cap(n, "dense_curvature_matrix")?;
    let mut total = Tensor::zeros(vec![n, n]);
    for term in &f.terms {
        let ab = kron(&term.a, &term.b)?;
        let cd = kron(&term.c, &term.d)?;
        let full = kron(&ab, &cd)?;
        total = total.add(&full)?;
    }
    Ok(total)
}

/// Oracle evaluation of the transform: materializes the dense matrix and
/// multiplies `vec(tau)` directly.
pub fn apply_curvature_dense(f: &CurvatureFactors, tau: &Tensor) -> Result<Tensor> {
    check_tau_shape(f.dims, tau.shape())?;
    let m = dense_curvature_matrix(f)?;
    let n = f.dims.vec_len();
    let vec = Tensor::from_vec(vec![n, 1], tau.data().to_vec())?;
    let out = m.matmul(&vec)?;
    Tensor::from_vec(tau.shape().to_vec(), out.data().to_vec())
}

/// Curvature-aware merge of one parameter tensor:
/// `E_m + alpha * sum_i s_i * M_i(tau_i)`. With identity factors this is
/// exactly the plain score-weighted merge.
pub fn merge_ca(
    g: &mut Graph,
    e_m: Var,
    taus: &[Var],
    factors: &[&CurvatureVars],
    scores: &[Var],
    alpha: f64,
) -> Result<Var> {
    if taus.len() != factors.len() {
        return Err(CamexError::Contract {
            detail: format!(
                "merge_ca requires one factor set per tau, got {} taus and {} factor sets",
                taus.len(),
                factors.len()
            ),
        });
    }
    let curved = taus
        .iter()
        .zip(factors)
        .map(|(&t, f)| apply_curvature(g, f, t))
        .collect::<Result<Vec<_>>>()?;
    combine(g, e_m, &curved, scores, alpha, None)
}

/// Value-level curvature-aware merge.
pub fn merge_ca_values(
    e_m: &Tensor,
    taus: &[&Tensor],
    factors: &[&CurvatureFactors],
    scores: &[f64],
    alpha: f64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let base = g.constant(e_m.clone());
    let tau_vars: Vec<Var> = taus.iter().map(|t| g.constant((*t).clone())).collect();
    let factor_vars = factors
        .iter()
        .map(|f| register_curvature(&mut g, f, false))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CurvatureVars> = factor_vars.iter().collect();
    let score_vars: Vec<Var> = scores.iter().map(|&s| g.scalar(s)).collect();
    let merged = merge_ca(&mut g, base, &tau_vars, &refs, &score_vars, alpha)?;
    Ok(g.value(merged).clone())
}

/// Two-step inter-layer merge. Step one propagates the base with uniform
/// weights `1/(N-1)` and no scores:
/// `E_m^{l+1} = E_m^l + (alpha/(N-1)) * sum_i M_i(tau_i^l)`;
/// step two builds the layer-(l+1) merged tensor from the propagated base
/// with the layer-(l+1) scores. Returns `(propagated base, merged)`.
pub fn merge_dynamic(
    g: &mut Graph,
    e_m_l: Var,
    taus_l: &[Var],
    taus_next: &[Var],
    scores_next: &[Var],
    alpha: f64,
    factors_l: &[&CurvatureVars],
    factors_next: &[&CurvatureVars],
) -> Result<(Var, Var)> {
    if taus_l.is_empty() || taus_next.is_empty() {
        return Err(CamexError::Contract {
            detail: "dynamic merging requires at least one domain expert per layer".into(),
        });
    }
    let base_next = propagate_base(g, e_m_l, taus_l, factors_l, alpha)?;
    let merged = merge_ca(g, base_next, taus_next, factors_next, scores_next, alpha)?;
    Ok((base_next, merged))
}

/// Step one of the two-step merge on its own: uniform-weight propagation of
/// the base through one layer's (curved) domain vectors.
pub fn propagate_base(
    g: &mut Graph,
    e_m: Var,
    taus: &[Var],
    factors: &[&CurvatureVars],
    alpha: f64,
) -> Result<Var> {
    if taus.is_empty() {
        return Err(CamexError::Contract {
            detail: "base propagation requires at least one domain expert".into(),
        });
    }
    let uniform = g.scalar(1.0 / taus.len() as f64);
    let scores = vec![uniform; taus.len()];
    merge_ca(g, e_m, taus, factors, &scores, alpha)
}

/// Closed-form gradient of the task loss w.r.t. a dense curvature matrix
/// `M_j`: `alpha * s_j * vec(g) . vec(tau_j)^T`, where `g` is the loss
/// gradient at the merged tensor. Dense-oracle mode only.
pub fn curvature_grad_identity(g_merged: &Tensor, s_j: f64, tau_j: &Tensor, alpha: f64) -> Result<Tensor> {
    if g_merged.shape() != tau_j.shape() {
        return Err(CamexError::ShapeMismatch {
            op: "curvature_grad_identity",
            lhs: g_merged.shape().to_vec(),
            rhs: tau_j.shape().to_vec(),
        });
    }
    let n = tau_j.numel();
    check_dense_cap(n, "curvature_grad_identity")?;
    let mut out = Tensor::zeros(vec![n, n]);
    let c = alpha * s_j;
    for a in 0..n {
        let ga = c * g_merged.data()[a];
        if ga == 0.0 {
            continue;
        }
        for b in 0..n {
            out.data_mut()[a * n + b] = ga * tau_j.data()[b];
        }
    }
    Ok(out)
}

/// Optimizer assumed by the two-step decomposition check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Plain gradient descent `M <- M - beta * dL/dM`.
    Sgd,
    /// Adam-style update; the decomposition below does not hold for it.
    AdamW,
}

/// Outcome of [`verify_two_step_decomposition`].
#[derive(Debug, Clone, Serialize)]
pub struct TwoStepReport {
    /// Max abs difference between the simulated merge after one gradient
    /// step on dense `M` and the closed two-term form.
    pub max_abs_diff: f64,
    /// Per-expert scalar weights `tau_j^t . g^t` coupling each domain vector
    /// to the loss gradient.
    pub matching_weights: Vec<f64>,
    /// Largest-magnitude entry of the correction term.
    pub correction_max_abs: f64,
}

/// Checks that one plain gradient step on dense curvature matrices, followed
/// by merging, equals the closed two-term form
/// `[E_m + alpha * sum_j s_j^{t+1} M_j^t tau_j^{t+1}]
///  - alpha^2 * beta * sum_j s_j^t s_j^{t+1} (tau_j^t . tau_j^{t+1}) g^t`.
///
/// `g_t` is the loss gradient at the step-`t` merged tensor. Only plain
/// gradient descent is supported; the identity does not hold for adaptive
/// rules.
#[allow(clippy::too_many_arguments)]
pub fn verify_two_step_decomposition(
    e_m: &Tensor,
    taus_t: &[Tensor],
    taus_next: &[Tensor],
    scores_t: &[f64],
    scores_next: &[f64],
    ms_t: &[Tensor],
    g_t: &Tensor,
    beta: f64,
    alpha: f64,
    rule: UpdateRule,
) -> Result<TwoStepReport> {
    if rule != UpdateRule::Sgd {
        return Err(CamexError::Contract {
            detail: "two-step decomposition assumes plain gradient descent".into(),
        });
    }
    let k = taus_t.len();
    if k == 0
        || taus_next.len() != k
        || scores_t.len() != k
        || scores_next.len() != k
        || ms_t.len() != k
    {
        return Err(CamexError::Contract {
            detail: "two-step check requires equal non-empty expert lists".into(),
        });
    }
    let n = e_m.numel();
    check_dense_cap(n, "verify_two_step_decomposition")?;
    for t in taus_t.iter().chain(taus_next).chain(std::iter::once(g_t)) {
        if t.shape() != e_m.shape() {
            return Err(CamexError::ShapeMismatch {
                op: "verify_two_step_decomposition",
                lhs: e_m.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    for m in ms_t {
        if m.shape() != [n, n] {
            return Err(CamexError::ShapeMismatch {
                op: "verify_two_step_decomposition",
                lhs: vec![n, n],
                rhs: m.shape().to_vec(),
            });
        }
    }

    let vec_of = |t: &Tensor| Tensor::from_vec(vec![n, 1], t.data().to_vec());
    let g_vec = vec_of(g_t)?;

    // Simulated side: M_j^{t+1} = M_j^t - beta * (alpha s_j^t vec(g) vec(tau_j^t)^T),
    // then merge at step t+1.
    let mut simulated = e_m.clone();
    for j in 0..k {
        let grad_m = curvature_grad_identity(g_t, scores_t[j], &taus_t[j], alpha)?;
        let m_next = ms_t[j].sub(&grad_m.scale(beta))?;
        let moved = m_next.matmul(&vec_of(&taus_next[j])?)?;
        let update = Tensor::from_vec(e_m.shape().to_vec(), moved.data().to_vec())?
            .scale(alpha * scores_next[j]);
        simulated = simulated.add(&update)?;
    }

    // Closed form: merge with the step-t matrices, then subtract the rank-one
    // correction driven by the tau overlaps.
    let mut closed = e_m.clone();
    let mut correction = Tensor::zeros(e_m.shape().to_vec());
    let mut matching_weights = Vec::with_capacity(k);
    for j in 0..k {
        let moved = ms_t[j].matmul(&vec_of(&taus_next[j])?)?;
        let update = Tensor::from_vec(e_m.shape().to_vec(), moved.data().to_vec())?
            .scale(alpha * scores_next[j]);
        closed = closed.add(&update)?;
        let overlap: f64 = taus_t[j]
            .data()
            .iter()
            .zip(taus_next[j].data())
            .map(|(a, b)| a * b)
            .sum();
        let coeff = alpha * alpha * beta * scores_t[j] * scores_next[j] * overlap;
        correction = correction.add(&g_t.scale(coeff))?;
        let matching: f64 = taus_t[j]
            .data()
            .iter()
            .zip(g_vec.data())
            .map(|(a, b)| a * b)
            .sum();
        matching_weights.push(matching);
    }
    let closed = closed.sub(&correction)?;

    Ok(TwoStepReport {
        max_abs_diff: simulated.max_abs_diff(&closed)?,
        matching_weights,
        correction_max_abs: correction.data().iter().fold(0.0, |m, v| m.max(v.abs())),
    })
}

/// Per-expert curvature: one factor set per merged parameter tensor, in the
/// canonical `(W1, b1, W2, b2)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCurvature {
    pub w1: CurvatureFactors,
    pub b1: CurvatureFactors,
    pub w2: CurvatureFactors,
    pub b2: CurvatureFactors,
}

impl ExpertCurvature {
    pub fn identity(d_model: usize, d_ff: usize, rank: usize) -> Result<ExpertCurvature> {
        Ok(ExpertCurvature {
            w1: CurvatureFactors::identity(DimFactorization::nearest_square(d_ff, d_model)?, rank)?,
            b1: CurvatureFactors::identity(DimFactorization::nearest_square(d_ff, 1)?, rank)?,
            w2: CurvatureFactors::identity(DimFactorization::nearest_square(d_model, d_ff)?, rank)?,
            b2: CurvatureFactors::identity(DimFactorization::nearest_square(d_model, 1)?, rank)?,
        })
    }

    pub fn factor_sets(&self) -> [(&'static str, &CurvatureFactors); 4] {
        [("W1", &self.w1), ("b1", &self.b1), ("W2", &self.w2), ("b2", &self.b2)]
    }

    pub fn factor_sets_mut(&mut self) -> [(&'static str, &mut CurvatureFactors); 4] {
        [
            ("W1", &mut self.w1),
            ("b1", &mut self.b1),
            ("W2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.factor_sets().iter().map(|(_, f)| f.param_count()).sum()
    }
}

/// Curvature for a whole bank: one [`ExpertCurvature`] per domain expert.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureBank {
    pub experts: Vec<ExpertCurvature>,
}

impl CurvatureBank {
    pub fn identity(bank: &ExpertBank, rank: usize) -> Result<CurvatureBank> {
        let d_model = bank.base.d_model();
        let d_ff = bank.base.d_ff();
        let experts = (0..bank.domain.len())
            .map(|_| ExpertCurvature::identity(d_model, d_ff, rank))
            .collect::<Result<Vec<_>>>()?;
        Ok(CurvatureBank { experts })
    }

    /// Factor sets held: domain experts x merged tensors per expert.
    pub fn n_factor_sets(&self) -> usize {
        self.experts.len() * 4
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(|e| e.param_count()).sum()
    }
}

/// Graph handles for one registered [`ExpertCurvature`].
#[derive(Debug, Clone)]
pub struct ExpertCurvatureVars {
    pub w1: CurvatureVars,
    pub b1: CurvatureVars,
    pub w2: CurvatureVars,
    pub b2: CurvatureVars,
}

impl ExpertCurvatureVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.w1.vars();
        out.extend(self.b1.vars());
        out.extend(self.w2.vars());
        out.extend(self.b2.vars());
        out
    }
}

pub fn register_expert_curvature(
    g: &mut Graph,
    c: &ExpertCurvature,
    trainable: bool,
) -> Result<ExpertCurvatureVars> {
    Ok(ExpertCurvatureVars {
        w1: register_curvature(g, &c.w1, trainable)?,
        b1: register_curvature(g, &c.b1, trainable)?,
        w2: register_curvature(g, &c.w2, trainable)?,
        b2: register_curvature(g, &c.b2, trainable)?,
    })
}

/// Test-time reparameterization: returns a bank whose domain experts are
/// `E'_i = E_m + M_i(tau_i)`, so plain score-weighted merging of the result
/// reproduces curvature-aware merging of the original and the factors can be
/// discarded. Exact only at unit merge strength, hence the strength argument
/// is checked; use [`fold_domain_experts`] to bake a different strength in
/// with explicitly changed semantics.
pub fn reparameterize(bank: &ExpertBank, curv: &CurvatureBank, alpha: f64) -> Result<ExpertBank> {
    if alpha != 1.0 {
        return Err(CamexError::Contract {
            detail: format!(
                "reparameterization is an exact equivalence only at merge strength 1, got {alpha}"
            ),
        });
    }
    fold_domain_experts(
        bank,
        Some(curv),
        &MergeSpec {
            alpha: 1.0,
            ..MergeSpec::default()
        },
        MaskContext::default(),
    )
}

/// Bakes the configured protocol into stored experts:
/// `E'_i = E_m + alpha * M_i(mask(tau_i))`, with masking and curvature
/// applied per the spec (curvature skipped when `ca_enabled` is false or no
/// factors are given). Plain unit-strength merging of the result reproduces
/// the configured merge of the original bank.
pub fn fold_domain_experts(
    bank: &ExpertBank,
    curv: Option<&CurvatureBank>,
    spec: &MergeSpec,
    ctx: MaskContext,
) -> Result<ExpertBank> {
    spec.validate()?;
    if let Some(c) = curv {
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
    let dv = domain_vectors(bank)?;
    let mut folded = Vec::with_capacity(bank.domain.len());
    // One tensor slot at a time so DARE's per-call stream layout matches the
    // in-graph merge path (tensor-major, expert index within a call).
    let mut out_tensors: Vec<Vec<Tensor>> = vec![Vec::new(); bank.domain.len()];
    for (slot, (_, base_t)) in bank.base.tensors().into_iter().enumerate() {
        let mut g = Graph::new();
        let tau_vars: Vec<Var> = dv
            .taus
            .iter()
            .map(|d| g.constant(d.tensors()[slot].1.clone()))
            .collect();
        let masked = mask_taus(&mut g, &tau_vars, spec, ctx)?;
        for (i, &tv) in masked.taus.iter().enumerate() {
            let transformed = match (spec.ca_enabled, curv) {
                (true, Some(c)) => {
                    let f = &c.experts[i].factor_sets()[slot].1;
                    let fv = register_curvature(&mut g, f, false)?;
                    apply_curvature(&mut g, &fv, tv)?
                }
                _ => tv,
            };
            let scaled = g.mul_scalar(transformed, spec.alpha);
            let base_v = g.constant(base_t.clone());
            let folded_t = g.add(base_v, scaled)?;
            out_tensors[i].push(g.value(folded_t).clone());
        }
    }
    for ts in out_tensors {
        let [w1, b1, w2, b2]: [Tensor; 4] = ts.try_into().map_err(|_| CamexError::Contract {
            detail: "expert folding produced an unexpected tensor count".into(),
        })?;
        folded.push(Expert::new(w1, b1, w2, b2, bank.base.activation)?);
    }
    ExpertBank::new(bank.base.clone(), folded)
}

/// Domain vectors of a reparameterized bank, mostly for equivalence tests.
pub fn folded_deltas(bank: &ExpertBank) -> Result<Vec<ExpertDelta>> {
    Ok(domain_vectors(bank)?.taus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check_multi;
    use crate::merge::merge_domain_specific_values;
    use crate::moe::Activation;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(vec![rows, cols], v).unwrap()
    }

    #[test]
    fn nearest_square_factor_pairs() {
        assert_eq!(split_nearest_square(16), (4, 4));
        assert_eq!(split_nearest_square(12), (3, 4));
        assert_eq!(split_nearest_square(7), (1, 7));
        assert_eq!(split_nearest_square(1), (1, 1));
        assert_eq!(split_nearest_square(48), (6, 8));
    }

    #[test]
    fn factorization_reconstructs_dims() {
        let f = DimFactorization::for_shape(&[6, 15]).unwrap();
        assert_eq!(f.d_out(), 6);
        assert_eq!(f.d_in(), 15);
        assert_eq!((f.d_out1, f.d_out2, f.d_in1, f.d_in2), (2, 3, 3, 5));
        let b = DimFactorization::for_shape(&[9]).unwrap();
        assert_eq!((b.d_out1, b.d_out2, b.d_in1, b.d_in2), (3, 3, 1, 1));
        assert!(DimFactorization::for_shape(&[2, 2, 2]).is_err());
    }

    #[test]
    fn param_count_formula_and_compression() {
        let dims = DimFactorization::new(4, 4, 2, 8).unwrap();
        let f = CurvatureFactors::identity(dims, 3).unwrap();
        assert_eq!(f.param_count(), 3 * (16 + 16 + 4 + 64));
        // Dense transform for a [16, 16] tensor would be 256^2 numbers.
        assert!(f.is_compressive());
        let tiny = CurvatureFactors::identity(DimFactorization::new(1, 1, 1, 1).unwrap(), 1).unwrap();
        assert!(!tiny.is_compressive());
    }

    #[test]
    fn identity_factors_are_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for shape in [vec![4, 6], vec![12, 5], vec![9], vec![7, 7]] {
            let dims = DimFactorization::for_shape(&shape).unwrap();
            let f = CurvatureFactors::identity(dims, 1).unwrap();
            let tau = Tensor::randn(shape.clone(), 1.0, &mut rng);
            let out = apply_curvature_values(&f, &tau).unwrap();
            assert!(out.bits_eq(&tau), "identity transform changed bits for {shape:?}");
        }
    }

    #[test]
    fn extra_rank_slots_start_as_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dims = DimFactorization::for_shape(&[6, 4]).unwrap();
        let f = CurvatureFactors::identity(dims, 3).unwrap();
        let tau = Tensor::randn(vec![6, 4], 1.0, &mut rng);
        let out = apply_curvature_values(&f, &tau).unwrap();
        assert!(out.bits_eq(&tau));
    }

    #[test]
    fn factored_matches_dense_oracle_2x2x2x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dims = DimFactorization::new(2, 2, 2, 2).unwrap();
        for _ in 0..20 {
            let f = CurvatureFactors::random(dims, 2, 1.0, &mut rng).unwrap();
            let tau = Tensor::randn(vec![4, 4], 1.0, &mut rng);
            let fast = apply_curvature_values(&f, &tau).unwrap();
            let dense = apply_curvature_dense(&f, &tau).unwrap();
            let d = fast.max_abs_diff(&dense).unwrap();
            assert!(d <= 1e-10, "factored vs dense diff {d}");
        }
    }

    #[test]
    fn factored_matches_dense_oracle_uneven_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for shape in [vec![6, 10], vec![3, 8], vec![12], vec![5, 5]] {
            let dims = DimFactorization::for_shape(&shape).unwrap();
            let f = CurvatureFactors::random(dims, 1, 1.0, &mut rng).unwrap();
            let tau = Tensor::randn(shape.clone(), 1.0, &mut rng);
            let fast = apply_curvature_values(&f, &tau).unwrap();
            let dense = apply_curvature_dense(&f, &tau).unwrap();
            let d = fast.max_abs_diff(&dense).unwrap();
            assert!(d <= 1e-10, "shape {shape:?} diff {d}");
        }
    }

    #[test]
    fn kron_hand_example() {
        // [[1,2],[3,4]] ⊗ [[0,1],[1,0]]
        let a = mat(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = mat(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let k = kron(&a, &b).unwrap();
        let want = mat(
            4,
            4,
            vec![
                0.0, 1.0, 0.0, 2.0, //
                1.0, 0.0, 2.0, 0.0, //
                0.0, 3.0, 0.0, 4.0, //
                3.0, 0.0, 4.0, 0.0,
            ],
        );
        assert!(k.bits_eq(&want));
    }

    #[test]
    fn transform_is_linear_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let dims = DimFactorization::for_shape(&[4, 6]).unwrap();
        let f = CurvatureFactors::random(dims, 2, 1.0, &mut rng).unwrap();
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let y = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let both = apply_curvature_values(&f, &x.add(&y).unwrap()).unwrap();
        let sum = apply_curvature_values(&f, &x)
            .unwrap()
            .add(&apply_curvature_values(&f, &y).unwrap())
            .unwrap();
        assert!(both.max_abs_diff(&sum).unwrap() <= 1e-12);
        let scaled = apply_curvature_values(&f, &x.scale(2.5)).unwrap();
        let by_hand = apply_curvature_values(&f, &x).unwrap().scale(2.5);
        assert!(scaled.max_abs_diff(&by_hand).unwrap() <= 1e-12);
    }

    #[test]
    fn transform_is_multilinear_in_each_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let dims = DimFactorization::for_shape(&[4, 4]).unwrap();
        let base = CurvatureFactors::random(dims, 1, 1.0, &mut rng).unwrap();
        let tau = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        let base_out = apply_curvature_values(&base, &tau).unwrap();
        for pick in 0..4 {
            let mut scaled = base.clone();
            let t = &mut scaled.terms[0];
            let slot = match pick {
                0 => &mut t.a,
                1 => &mut t.b,
                2 => &mut t.c,
                _ => &mut t.d,
            };
            *slot = slot.scale(3.0);
            let out = apply_curvature_values(&scaled, &tau).unwrap();
            let want = base_out.scale(3.0);
            let d = out.max_abs_diff(&want).unwrap();
            assert!(d <= 1e-10, "factor {pick} not linear, diff {d}");
        }
    }

    #[test]
    fn rank_terms_superpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dims = DimFactorization::for_shape(&[6, 4]).unwrap();
        let two = CurvatureFactors::random(dims, 2, 1.0, &mut rng).unwrap();
        let first = CurvatureFactors {
            dims,
            terms: vec![two.terms[0].clone()],
        };
        let second = CurvatureFactors {
            dims,
            terms: vec![two.terms[1].clone()],
        };
        let tau = Tensor::randn(vec![6, 4], 1.0, &mut rng);
        let whole = apply_curvature_values(&two, &tau).unwrap();
        let parts = apply_curvature_values(&first, &tau)
            .unwrap()
            .add(&apply_curvature_values(&second, &tau).unwrap())
            .unwrap();
        assert!(whole.max_abs_diff(&parts).unwrap() <= 1e-12);
    }

    #[test]
    fn apply_rejects_mismatched_tau() {
        let dims = DimFactorization::for_shape(&[4, 6]).unwrap();
        let f = CurvatureFactors::identity(dims, 1).unwrap();
        let tau = Tensor::zeros(vec![6, 4]);
        assert!(apply_curvature_values(&f, &tau).is_err());
    }

    #[test]
    fn dense_oracle_refuses_large_dims() {
        let dims = DimFactorization::nearest_square(16, 16).unwrap();
        let f = CurvatureFactors::identity(dims, 1).unwrap();
        let err = dense_curvature_matrix(&f).unwrap_err();
        assert!(matches!(err, CamexError::Oracle { .. }));
    }

    #[test]
    fn merge_ca_identity_equals_plain_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let dims = DimFactorization::for_shape(&[5, 4]).unwrap();
        let f1 = CurvatureFactors::identity(dims, 1).unwrap();
        let f2 = CurvatureFactors::identity(dims, 1).unwrap();
        for _ in 0..100 {
            let e_m = Tensor::randn(vec![5, 4], 1.0, &mut rng);
            let t1 = Tensor::randn(vec![5, 4], 1.0, &mut rng);
            let t2 = Tensor::randn(vec![5, 4], 1.0, &mut rng);
            let s = [0.3, 0.7];
            let ca = merge_ca_values(&e_m, &[&t1, &t2], &[&f1, &f2], &s, 0.8).unwrap();
            let plain = merge_domain_specific_values(&e_m, &[&t1, &t2], &s, 0.8).unwrap();
            let d = ca.max_abs_diff(&plain).unwrap();
            assert!(d <= 1e-14, "identity curvature drifted by {d}");
        }
    }

    #[test]
    fn merge_ca_alpha_zero_returns_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let dims = DimFactorization::for_shape(&[3, 3]).unwrap();
        let f = CurvatureFactors::random(dims, 1, 1.0, &mut rng).unwrap();
        let e_m = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let tau = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let out = merge_ca_values(&e_m, &[&tau], &[&f], &[0.9], 0.0).unwrap();
        assert!(out.bits_eq(&e_m));
    }

    #[test]
    fn merge_ca_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let dims = DimFactorization::new(2, 3, 2, 2).unwrap();
        for _ in 0..20 {
            let fs: Vec<CurvatureFactors> = (0..3)
                .map(|_| CurvatureFactors::random(dims, 2, 0.8, &mut rng).unwrap())
                .collect();
            let e_m = Tensor::randn(vec![6, 4], 1.0, &mut rng);
            let taus: Vec<Tensor> = (0..3).map(|_| Tensor::randn(vec![6, 4], 1.0, &mut rng)).collect();
            let scores = [0.2, 0.5, 0.3];
            let alpha = 0.7;
            let tr: Vec<&Tensor> = taus.iter().collect();
            let fr: Vec<&CurvatureFactors> = fs.iter().collect();
            let fast = merge_ca_values(&e_m, &tr, &fr, &scores, alpha).unwrap();
            let mut dense = e_m.clone();
            for j in 0..3 {
                let moved = apply_curvature_dense(&fs[j], &taus[j]).unwrap();
                dense = dense.add(&moved.scale(alpha * scores[j])).unwrap();
            }
            let d = fast.max_abs_diff(&dense).unwrap();
            assert!(d <= 1e-10, "merge vs dense oracle diff {d}");
        }
    }

    #[test]
    fn merge_ca_requires_factor_per_tau() {
        let dims = DimFactorization::for_shape(&[2, 2]).unwrap();
        let f = CurvatureFactors::identity(dims, 1).unwrap();
        let e_m = Tensor::zeros(vec![2, 2]);
        let tau = Tensor::ones(vec![2, 2]);
        assert!(merge_ca_values(&e_m, &[&tau, &tau], &[&f], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn dynamic_zero_taus_keep_base() {
        let dims = DimFactorization::for_shape(&[3, 2]).unwrap();
        let f = CurvatureFactors::identity(dims, 1).unwrap();
        let mut g = Graph::new();
        let e_m = g.constant(mat(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let z1 = g.constant(Tensor::zeros(vec![3, 2]));
        let z2 = g.constant(Tensor::zeros(vec![3, 2]));
        let fv = register_curvature(&mut g, &f, false).unwrap();
        let half = g.scalar(0.5);
        let (base_next, _) = merge_dynamic(
            &mut g,
            e_m,
            &[z1, z2],
            &[z1, z2],
            &[half, half],
            1.0,
            &[&fv, &fv],
            &[&fv, &fv],
        )
        .unwrap();
        assert!(g.value(base_next).bits_eq(g.value(e_m)));
    }

    #[test]
    fn dynamic_opposite_taus_cancel() {
        // Identity curvature, N=3 domain pair +X/−X: propagation adds
        // (1/2)(X − X) = 0.
        let dims = DimFactorization::for_shape(&[2, 2]).unwrap();
        let f = CurvatureFactors::identity(dims, 1).unwrap();
        let mut g = Graph::new();
        let e_m = g.constant(mat(2, 2, vec![3.0, -1.0, 0.5, 2.0]));
        let x = g.constant(mat(2, 2, vec![4.0, -2.0, 8.0, 16.0]));
        let negx = g.constant(mat(2, 2, vec![-4.0, 2.0, -8.0, -16.0]));
        let fv = register_curvature(&mut g, &f, false).unwrap();
        let base_next = propagate_base(&mut g, e_m, &[x, negx], &[&fv, &fv], 1.0).unwrap();
        let d = g.value(base_next).max_abs_diff(g.value(e_m)).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn dynamic_requires_domain_experts() {
        let mut g = Graph::new();
        let e_m = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(propagate_base(&mut g, e_m, &[], &[], 1.0).is_err());
    }

    #[test]
    fn grad_identity_matches_autodiff_on_dense_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 16; // 4x4 tensors
        let shape = vec![4, 4];
        for trial in 0..10 {
            let e_m = Tensor::randn(shape.clone(), 1.0, &mut rng);
            let tau1 = Tensor::randn(shape.clone(), 1.0, &mut rng);
            let tau2 = Tensor::randn(shape.clone(), 1.0, &mut rng);
            let m1 = Tensor::randn(vec![n, n], 0.5, &mut rng);
            let m2 = Tensor::randn(vec![n, n], 0.5, &mut rng);
            let w = Tensor::randn(shape.clone(), 1.0, &mut rng);
            let (s1, s2) = (0.35, 0.65);
            let alpha = 0.8;

            let mut g = Graph::new();
            let m1v = g.param(&m1);
            let m2v = g.constant(m2.clone());
            let base = g.constant(e_m.clone());
            let wv = g.constant(w.clone());
            let mut merged = base;
            for (mv, tau, s) in [(m1v, &tau1, s1), (m2v, &tau2, s2)] {
                let tv = g.constant(Tensor::from_vec(vec![n, 1], tau.data().to_vec()).unwrap());
                let moved = g.matmul(mv, tv).unwrap();
                let reshaped = g.reshape(moved, shape.clone()).unwrap();
                let scaled = g.mul_scalar(reshaped, alpha * s);
                merged = g.add(merged, scaled).unwrap();
            }
            // Nonlinear readout so the merged-tensor gradient is not trivially
            // the weight tensor.
            let prod = g.mul(merged, wv).unwrap();
            let sq = g.mul(prod, prod).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();

            let g_at_merged = g.grad(merged).expect("merged node gradient");
            let want = curvature_grad_identity(&g_at_merged, s1, &tau1, alpha).unwrap();
            let got = g.grad(m1v).expect("dense matrix gradient");
            let mut max_rel = 0.0f64;
            for (a, b) in got.data().iter().zip(want.data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel <= 1e-8, "trial {trial} rel err {max_rel}");
        }
    }

    #[test]
    fn grad_identity_zero_cases() {
        let tau = mat(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let zeros = Tensor::zeros(vec![2, 2]);
        let out = curvature_grad_identity(&zeros, 0.5, &tau, 1.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let g_loss = mat(2, 2, vec![1.0, -1.0, 2.0, 0.5]);
        let out = curvature_grad_identity(&g_loss, 0.0, &tau, 1.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_identity_refuses_large_dims() {
        let big = Tensor::zeros(vec![9, 9]);
        assert!(curvature_grad_identity(&big, 1.0, &big, 1.0).is_err());
    }

    #[test]
    fn two_step_decomposition_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let shape = vec![4, 4];
        let n = 16;
        for trial in 0..20 {
            let e_m = Tensor::randn(shape.clone(), 1.0, &mut rng);
            let taus_t: Vec<Tensor> = (0..3).map(|_| Tensor::randn(shape.clone(), 1.0, &mut rng)).collect();
            let taus_next: Vec<Tensor> =
                (0..3).map(|_| Tensor::randn(shape.clone(), 1.0, &mut rng)).collect();
            let ms: Vec<Tensor> = (0..3).map(|_| Tensor::randn(vec![n, n], 0.5, &mut rng)).collect();
            let g_t = Tensor::randn(shape.clone(), 1.0, &mut rng);
            let report = verify_two_step_decomposition(
                &e_m,
                &taus_t,
                &taus_next,
                &[0.2, 0.3, 0.5],
                &[0.4, 0.4, 0.2],
                &ms,
                &g_t,
                0.05,
                0.9,
                UpdateRule::Sgd,
            )
            .unwrap();
            assert!(
                report.max_abs_diff <= 1e-9,
                "trial {trial} diff {}",
                report.max_abs_diff
            );
            assert_eq!(report.matching_weights.len(), 3);
        }
    }

    #[test]
    fn two_step_zero_rate_is_plain_merge_and_no_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let shape = vec![3, 3];
        let e_m = Tensor::randn(shape.clone(), 1.0, &mut rng);
        let taus: Vec<Tensor> = (0..2).map(|_| Tensor::randn(shape.clone(), 1.0, &mut rng)).collect();
        let ms: Vec<Tensor> = (0..2).map(|_| Tensor::randn(vec![9, 9], 0.5, &mut rng)).collect();
        let g_t = Tensor::randn(shape.clone(), 1.0, &mut rng);
        let report = verify_two_step_decomposition(
            &e_m,
            &taus,
            &taus,
            &[0.5, 0.5],
            &[0.5, 0.5],
            &ms,
            &g_t,
            0.0,
            1.0,
            UpdateRule::Sgd,
        )
        .unwrap();
        assert_eq!(report.correction_max_abs, 0.0);
        assert!(report.max_abs_diff <= 1e-12);
    }

    #[test]
    fn two_step_orthogonal_taus_have_zero_correction() {
        let e_m = Tensor::zeros(vec![2, 2]);
        // tau_t and tau_next share no support, so their overlap is zero.
        let tau_t = mat(2, 2, vec![1.0, 0.0, 2.0, 0.0]);
        let tau_next = mat(2, 2, vec![0.0, 3.0, 0.0, -1.0]);
        let m = Tensor::eye(4);
        let g_t = mat(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let report = verify_two_step_decomposition(
            &e_m,
            &[tau_t],
            &[tau_next],
            &[1.0],
            &[1.0],
            &[m],
            &g_t,
            0.1,
            1.0,
            UpdateRule::Sgd,
        )
        .unwrap();
        assert_eq!(report.correction_max_abs, 0.0);
        assert!(report.max_abs_diff <= 1e-12);
    }

    #[test]
    fn two_step_rejects_adaptive_rule() {
        let e_m = Tensor::zeros(vec![2, 2]);
        let tau = Tensor::ones(vec![2, 2]);
        let m = Tensor::eye(4);
        let g_t = Tensor::ones(vec![2, 2]);
        let err = verify_two_step_decomposition(
            &e_m,
            &[tau.clone()],
            &[tau],
            &[1.0],
            &[1.0],
            &[m],
            &g_t,
            0.1,
            1.0,
            UpdateRule::AdamW,
        )
        .unwrap_err();
        assert!(matches!(err, CamexError::Contract { .. }));
    }

    #[test]
    fn factors_pass_finite_difference_check() {
        // Differentiate a small merge-then-readout pipeline w.r.t. every
        // factor and the tau.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let dims = DimFactorization::new(2, 2, 1, 3).unwrap();
        let f = CurvatureFactors::random(dims, 2, 0.7, &mut rng).unwrap();
        let tau = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let e_m = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let w = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let mut inputs: Vec<Tensor> = f.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.push(tau.clone());
        let report = fd_check_multi(&inputs, 1e-5, 1e-6, |g, vars| {
            let (factor_vars, tau_var) = vars.split_at(8);
            let terms = vec![
                RankTermVars {
                    a: factor_vars[0],
                    b: factor_vars[1],
                    c: factor_vars[2],
                    d: factor_vars[3],
                },
                RankTermVars {
                    a: factor_vars[4],
                    b: factor_vars[5],
                    c: factor_vars[6],
                    d: factor_vars[7],
                },
            ];
            let fv = CurvatureVars { dims, terms };
            let base = g.constant(e_m.clone());
            let s = g.scalar(0.6);
            let merged = merge_ca(g, base, &[tau_var[0]], &[&fv], &[s], 0.9)?;
            let wv = g.constant(w.clone());
            let prod = g.mul(merged, wv)?;
            let sq = g.mul(prod, prod)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.pass, "fd check failed: {}", report.max_rel_err);
    }

    fn integer_bank(rng: &mut ChaCha8Rng) -> ExpertBank {
        let mut mk = || {
            let mut e = Expert::randn(3, 4, Activation::GeluTanh, rng);
            for (_, t) in e.tensors_mut() {
                for v in t.data_mut() {
                    // `+ 0.0` turns round()'s -0.0 into +0.0 so bitwise
                    // comparisons see one zero.
                    *v = v.round().clamp(-3.0, 3.0) + 0.0;
                }
            }
            e
        };
        let base = mk();
        let d1 = mk();
        let d2 = mk();
        ExpertBank::new(base, vec![d1, d2]).unwrap()
    }

    #[test]
    fn reparameterize_identity_curvature_recovers_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let bank = integer_bank(&mut rng);
        let curv = CurvatureBank::identity(&bank, 1).unwrap();
        let re = reparameterize(&bank, &curv, 1.0).unwrap();
        for (orig, folded) in bank.domain.iter().zip(&re.domain) {
            for ((_, a), (_, b)) in orig.tensors().iter().zip(folded.tensors().iter()) {
                assert!(a.bits_eq(b), "identity reparameterization changed an expert");
            }
        }
    }

    #[test]
    fn reparameterized_plain_merge_equals_ca_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..50 {
            let base = Expert::randn(3, 4, Activation::GeluTanh, &mut rng);
            let d1 = Expert::randn(3, 4, Activation::GeluTanh, &mut rng);
            let d2 = Expert::randn(3, 4, Activation::GeluTanh, &mut rng);
            let bank = ExpertBank::new(base, vec![d1, d2]).unwrap();
            let mut curv = CurvatureBank::identity(&bank, 1).unwrap();
            for ec in &mut curv.experts {
                for (_, f) in ec.factor_sets_mut() {
                    let dims = f.dims;
                    *f = CurvatureFactors::random(dims, 1, 0.6, &mut rng).unwrap();
                }
            }
            let re = reparameterize(&bank, &curv, 1.0).unwrap();
            let scores = [0.45, 0.55];

            let dv = domain_vectors(&bank).unwrap();
            let dv_re = domain_vectors(&re).unwrap();
            for slot in 0..4 {
                let (_, base_t) = bank.base.tensors()[slot];
                let taus: Vec<&Tensor> = dv.taus.iter().map(|d| d.tensors()[slot].1).collect();
                let fs: Vec<&CurvatureFactors> = curv
                    .experts
                    .iter()
                    .map(|e| e.factor_sets()[slot].1)
                    .collect();
                let ca = merge_ca_values(base_t, &taus, &fs, &scores, 1.0).unwrap();
                let taus_re: Vec<&Tensor> = dv_re.taus.iter().map(|d| d.tensors()[slot].1).collect();
                let plain = merge_domain_specific_values(base_t, &taus_re, &scores, 1.0).unwrap();
                let d = ca.max_abs_diff(&plain).unwrap();
                assert!(d <= 1e-12, "slot {slot} equivalence broke by {d}");
            }
        }
    }

    #[test]
    fn reparameterize_rejects_non_unit_strength() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let bank = integer_bank(&mut rng);
        let curv = CurvatureBank::identity(&bank, 1).unwrap();
        assert!(reparameterize(&bank, &curv, 0.5).is_err());
    }

    #[test]
    fn fold_bakes_strength_into_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let bank = integer_bank(&mut rng);
        let curv = CurvatureBank::identity(&bank, 1).unwrap();
        let spec = MergeSpec {
            alpha: 0.25,
            ..MergeSpec::default()
        };
        let folded = fold_domain_experts(&bank, Some(&curv), &spec, MaskContext::default()).unwrap();
        let dv = domain_vectors(&bank).unwrap();
        let dv_f = domain_vectors(&folded).unwrap();
        for (orig, got) in dv.taus.iter().zip(&dv_f.taus) {
            for ((_, a), (_, b)) in orig.tensors().iter().zip(got.tensors().iter()) {
                let d = a.scale(0.25).max_abs_diff(b).unwrap();
                assert!(d <= 1e-15, "strength folding off by {d}");
            }
        }
    }

    #[test]
    fn curvature_bank_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let base = Expert::randn(4, 8, Activation::GeluTanh, &mut rng);
        let bank = ExpertBank::new(
            base.clone(),
            vec![base.clone(), base.clone(), base.clone()],
        )
        .unwrap();
        let curv = CurvatureBank::identity(&bank, 2).unwrap();
        assert_eq!(curv.n_factor_sets(), 3 * 4);
        // d_model=4 -> (2,2); d_ff=8 -> (2,4); bias in-dims are 1.
        // W1 [8,4]: 2*(4+16+4+4); b1 [8]: 2*(4+16+1+1); W2 [4,8]: same as W1
        // transposed counts; b2 [4]: 2*(4+4+1+1).
        let w1 = 2 * (4 + 16 + 4 + 4);
        let b1 = 2 * (4 + 16 + 1 + 1);
        let w2 = 2 * (4 + 4 + 4 + 16);
        let b2 = 2 * (4 + 4 + 1 + 1);
        assert_eq!(curv.param_count(), 3 * (w1 + b1 + w2 + b2));
    }
}
