//! Experts, expert banks, routers, and the sparse top-k forward pass.
//!
//! An expert is a two-matrix feed-forward block
//! `y = W2 . act(W1 . h + b1) + b2` applied per token. A bank holds one base
//! expert plus `N - 1` domain experts; merging paths score only the domain
//! experts, while the vanilla sparse forward scores all `N`.
//!
//! Forward passes are recorded on a [`Graph`] so gradients flow to expert
//! weights and router scores. The top-k selection itself is made on values and
//! enters the graph as a constant 0/1 mask, so it is non-differentiable (as
//! usual for hard routing); gradients flow through the selected scores.

use crate::autodiff::{Graph, Var};
use crate::error::{CamexError, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity applied between the two expert matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Smooth GELU-style gate (tanh approximation).
    GeluTanh,
    /// Identity; used by tests that need exact algebra through the expert.
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, v: Var) -> Result<Var> {
        match self {
            Activation::GeluTanh => g.gelu(v),
            Activation::Identity => Ok(v),
        }
    }
}

/// Two-matrix feed-forward expert.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// `[d_ff, d_model]`
    pub w1: Tensor,
    /// `[d_ff]`
    pub b1: Tensor,
    /// `[d_model, d_ff]`
    pub w2: Tensor,
    /// `[d_model]`
    pub b2: Tensor,
    pub activation: Activation,
}

impl Expert {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, activation: Activation) -> Result<Expert> {
        if w1.rank() != 2 || w2.rank() != 2 {
            return Err(CamexError::InvalidShape {
                op: "Expert::new",
                shape: if w1.rank() != 2 { w1.shape().to_vec() } else { w2.shape().to_vec() },
                detail: "weight matrices must be rank-2".into(),
            });
        }
        let (d_ff, d_model) = (w1.shape()[0], w1.shape()[1]);
        if w2.shape() != [d_model, d_ff] {
            return Err(CamexError::ShapeMismatch {
                op: "Expert::new",
                lhs: w1.shape().to_vec(),
                rhs: w2.shape().to_vec(),
            });
        }
        if b1.shape() != [d_ff] || b2.shape() != [d_model] {
            return Err(CamexError::ShapeMismatch {
                op: "Expert::new",
                lhs: b1.shape().to_vec(),
                rhs: b2.shape().to_vec(),
            });
        }
        Ok(Expert { w1, b1, w2, b2, activation })
    }

    /// Expert with weights drawn from scaled normal distributions
    /// (`1/sqrt(fan_in)`) and zero biases.
    pub fn randn<R: Rng>(d_model: usize, d_ff: usize, activation: Activation, rng: &mut R) -> Expert {
        let w1 = Tensor::randn(vec![d_ff, d_model], 1.0 / (d_model as f64).sqrt(), rng).with_grad();
        let b1 = Tensor::zeros(vec![d_ff]).with_grad();
        let w2 = Tensor::randn(vec![d_model, d_ff], 1.0 / (d_ff as f64).sqrt(), rng).with_grad();
        let b2 = Tensor::zeros(vec![d_model]).with_grad();
        Expert { w1, b1, w2, b2, activation }
    }

    /// All-zero expert (maps everything to zero).
    pub fn zeros(d_model: usize, d_ff: usize, activation: Activation) -> Expert {
        Expert {
            w1: Tensor::zeros(vec![d_ff, d_model]),
            b1: Tensor::zeros(vec![d_ff]),
            w2: Tensor::zeros(vec![d_model, d_ff]),
            b2: Tensor::zeros(vec![d_model]),
            activation,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn d_ff(&self) -> usize {
        self.w1.shape()[0]
    }

    /// Parameter tensors in canonical order with their canonical names.
    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("W1", &self.w1), ("b1", &self.b1), ("W2", &self.w2), ("b2", &self.b2)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("W1", &mut self.w1),
            ("b1", &mut self.b1),
            ("W2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }

    /// Records the expert's tensors on a graph. `trainable` controls whether
    /// gradients are tracked.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ExpertVars {
        let mut reg = |t: &Tensor| {
            let mut c = t.clone();
            c.requires_grad = trainable;
            c.grad = None;
            g.leaf(c)
        };
        ExpertVars {
            w1: reg(&self.w1),
            b1: reg(&self.b1),
            w2: reg(&self.w2),
            b2: reg(&self.b2),
            activation: self.activation,
        }
    }
}

/// Graph handles for one expert's tensors.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub activation: Activation,
}

impl ExpertVars {
    /// Tensor handles in the same canonical order as [`Expert::tensors`].
    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn from_vars(vars: [Var; 4], activation: Activation) -> ExpertVars {
        ExpertVars {
            w1: vars[0],
            b1: vars[1],
            w2: vars[2],
            b2: vars[3],
            activation,
        }
    }

    /// Reads the current values back into an [`Expert`].
    pub fn to_expert(&self, g: &Graph) -> Expert {
        Expert {
            w1: g.value(self.w1).clone(),
            b1: g.value(self.b1).clone(),
            w2: g.value(self.w2).clone(),
            b2: g.value(self.b2).clone(),
            activation: self.activation,
        }
    }
}

/// One base expert plus `N - 1` domain experts (`N >= 2` in total).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub base: Expert,
    pub domain: Vec<Expert>,
}

impl ExpertBank {
    pub fn new(base: Expert, domain: Vec<Expert>) -> Result<ExpertBank> {
        if domain.is_empty() {
            return Err(CamexError::Contract {
                detail: "an expert bank needs at least one domain expert (N >= 2)".into(),
            });
        }
        for e in &domain {
            if e.d_model() != base.d_model() || e.d_ff() != base.d_ff() {
                return Err(CamexError::ShapeMismatch {
                    op: "ExpertBank::new",
                    lhs: vec![base.d_ff(), base.d_model()],
                    rhs: vec![e.d_ff(), e.d_model()],
                });
            }
            if e.activation != base.activation {
                return Err(CamexError::Contract {
                    detail: "all experts in a bank must share one activation".into(),
                });
            }
        }
        Ok(ExpertBank { base, domain })
    }

    /// Total number of experts, counting the base.
    pub fn n_experts(&self) -> usize {
        1 + self.domain.len()
    }

    /// Experts in vanilla scoring order: base first, then domain experts.
    pub fn all(&self) -> Vec<&Expert> {
        std::iter::once(&self.base).chain(self.domain.iter()).collect()
    }
}

/// Token router: scores experts from hidden states via `softmax(W_g . h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// `[n_scores, d_model]`
    pub weight: Tensor,
}

impl Router {
    pub fn new(weight: Tensor) -> Result<Router> {
        if weight.rank() != 2 {
            return Err(CamexError::InvalidShape {
                op: "Router::new",
                shape: weight.shape().to_vec(),
                detail: "router weight must be rank-2 [n_scores, d_model]".into(),
            });
        }
        Ok(Router { weight })
    }

    pub fn randn<R: Rng>(n_scores: usize, d_model: usize, rng: &mut R) -> Router {
        Router {
            weight: Tensor::randn(vec![n_scores, d_model], 1.0 / (d_model as f64).sqrt(), rng)
                .with_grad(),
        }
    }

    pub fn n_scores(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Scores every token against every expert: `softmax(h . W_g^T)` row-wise.
/// `h` is `[T, d_model]`, the result is `[T, n_scores]`; `T = 0` is allowed.
pub fn route_tokens(g: &mut Graph, w_g: Var, h: Var) -> Result<Var> {
    let wt = g.transpose(w_g)?;
    let logits = g.matmul(h, wt)?;
    g.softmax(logits)
}

/// Expert forward pass over a token matrix `h: [T, d_model]`.
pub fn expert_forward(g: &mut Graph, e: &ExpertVars, h: Var) -> Result<Var> {
    let w1t = g.transpose(e.w1)?;
    let z = g.matmul(h, w1t)?;
    let z = g.add_rowvec(z, e.b1)?;
    let a = e.activation.apply(g, z)?;
    let w2t = g.transpose(e.w2)?;
    let y = g.matmul(a, w2t)?;
    g.add_rowvec(y, e.b2)
}

/// Forward pass through a merged expert. Identical math to
/// [`expert_forward`]; kept as a separate named path so call sites and tests
/// can distinguish merged dispatch from per-expert dispatch.
pub fn merged_forward(g: &mut Graph, merged: &ExpertVars, h: Var) -> Result<Var> {
    expert_forward(g, merged, h)
}

/// Vanilla sparse forward: every token is routed to its top-k experts by
/// score and the selected expert outputs are combined with the raw softmax
/// scores (no renormalization over the selected subset).
pub fn smoe_forward(g: &mut Graph, experts: &[ExpertVars], w_g: Var, h: Var, k: usize) -> Result<Var> {
    let n = experts.len();
    if n == 0 {
        return Err(CamexError::Contract {
            detail: "smoe_forward requires at least one expert".into(),
        });
    }
    if k < 1 || k > n {
        return Err(CamexError::Contract {
            detail: format!("smoe_forward requires 1 <= k <= {n}, got k = {k}"),
        });
    }
    let n_scores = g.value(w_g).shape()[0];
    if n_scores != n {
        return Err(CamexError::ShapeMismatch {
            op: "smoe_forward",
            lhs: vec![n_scores, g.value(w_g).shape()[1]],
            rhs: vec![n],
        });
    }
    let scores = route_tokens(g, w_g, h)?;
    let t = g.value(h).shape()[0];
    let d = g.value(h).shape()[1];

    // Hard selection is made on values and enters the tape as a constant mask.
    let selected = g.value(scores).topk_rows(k)?;
    let mut mask = Tensor::zeros(vec![t, n]);
    for (row, cols) in selected.iter().enumerate() {
        for &c in cols {
            mask.data_mut()[row * n + c] = 1.0;
        }
    }
    let mask = g.constant(mask);
    let gated = g.mul(scores, mask)?;
    let gated_t = g.transpose(gated)?;

    let mut y = g.constant(Tensor::zeros(vec![t, d]));
    for (i, e) in experts.iter().enumerate() {
        let out = expert_forward(g, e, h)?;
        let row = g.gather_rows(gated_t, &[i])?;
        let col = g.reshape(row, vec![t])?;
        let weighted = g.scale_rows(out, col)?;
        y = g.add(y, weighted)?;
    }
    Ok(y)
}

/// Value-level convenience: runs [`expert_forward`] on a scratch graph.
pub fn expert_forward_values(e: &Expert, h: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ev = e.register(&mut g, false);
    let hv = g.constant(h.clone());
    let y = expert_forward(&mut g, &ev, hv)?;
    Ok(g.value(y).clone())
}

/// Value-level convenience: routing scores for a token matrix.
pub fn route_tokens_values(router: &Router, h: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = g.constant(router.weight.clone());
    let hv = g.constant(h.clone());
    let s = route_tokens(&mut g, w, hv)?;
    Ok(g.value(s).clone())
}

/// Value-level convenience: vanilla sparse forward over a bank (base expert
/// is scored first, then the domain experts).
pub fn smoe_forward_values(bank: &ExpertBank, router: &Router, h: &Tensor, k: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let experts: Vec<ExpertVars> = bank.all().iter().map(|e| e.register(&mut g, false)).collect();
    let w = g.constant(router.weight.clone());
    let hv = g.constant(h.clone());
    let y = smoe_forward(&mut g, &experts, w, hv, k)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check_multi;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_expert(d: usize) -> Expert {
        Expert::new(
            Tensor::eye(d),
            Tensor::zeros(vec![d]),
            Tensor::eye(d),
            Tensor::zeros(vec![d]),
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn identity_expert_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let y = expert_forward_values(&identity_expert(4), &h).unwrap();
        assert_eq!(y.max_abs_diff(&h).unwrap(), 0.0);
    }

    #[test]
    fn zero_expert_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let y = expert_forward_values(&Expert::zeros(3, 7, Activation::GeluTanh), &h).unwrap();
        assert_eq!(y.max_abs_diff(&Tensor::zeros(vec![5, 3])).unwrap(), 0.0);
    }

    /// Independent loop oracle: plain nested loops and `f64::tanh`.
    fn expert_forward_loops(e: &Expert, h: &Tensor) -> Tensor {
        let (t, d) = (h.shape()[0], h.shape()[1]);
        let ff = e.d_ff();
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh());
        let mut out = Tensor::zeros(vec![t, d]);
        for ti in 0..t {
            let mut hidden = vec![0.0; ff];
            for f in 0..ff {
                let mut z = e.b1.data()[f];
                for j in 0..d {
                    z += e.w1.at2(f, j) * h.at2(ti, j);
                }
                hidden[f] = match e.activation {
                    Activation::GeluTanh => gelu(z),
                    Activation::Identity => z,
                };
            }
            for j in 0..d {
                let mut y = e.b2.data()[j];
                for f in 0..ff {
                    y += e.w2.at2(j, f) * hidden[f];
                }
                out.data_mut()[ti * d + j] = y;
            }
        }
        out
    }

    #[test]
    fn expert_forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let e = Expert::randn(4, 6, Activation::GeluTanh, &mut rng);
            let h = Tensor::randn(vec![3, 4], 1.0, &mut rng);
            let got = expert_forward_values(&e, &h).unwrap();
            let want = expert_forward_loops(&e, &h);
            let d = got.max_abs_diff(&want).unwrap();
            assert!(d <= 1e-12, "diff {d}");
        }
    }

    #[test]
    fn expert_shape_validation() {
        let e = Expert::new(
            Tensor::zeros(vec![4, 3]),
            Tensor::zeros(vec![4]),
            Tensor::zeros(vec![4, 4]),
            Tensor::zeros(vec![3]),
            Activation::Identity,
        );
        assert!(matches!(e.unwrap_err(), CamexError::ShapeMismatch { .. }));
    }

    #[test]
    fn route_tokens_uniform_and_saturated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let router = Router::new(Tensor::randn(vec![3, 4], 1.0, &mut rng)).unwrap();
        let zero_h = Tensor::zeros(vec![2, 4]);
        let s = route_tokens_values(&router, &zero_h).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // One token aligned with router row 0 at scale 10 gives logits
        // [10, 0, 0]; the top score is e^10 / (e^10 + 2).
        let aligned = Router::new(Tensor::from_vec(vec![3, 3], vec![
            10.0, 0.0, 0.0,
            0.0, 0.0, 0.0,
            0.0, 0.0, 0.0,
        ]).unwrap())
        .unwrap();
        let h = Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let s = route_tokens_values(&aligned, &h).unwrap();
        let top = 10f64.exp() / (10f64.exp() + 2.0);
        assert!((s.data()[0] - top).abs() < 1e-15);
        assert!((s.data()[0] - 0.9999092).abs() < 1e-7);
        assert!((s.data()[1] - 0.0000454).abs() < 1e-7);
        let total: f64 = s.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn route_tokens_accepts_empty_input() {
        let router = Router::new(Tensor::zeros(vec![3, 4])).unwrap();
        let s = route_tokens_values(&router, &Tensor::zeros(vec![0, 4])).unwrap();
        assert_eq!(s.shape(), &[0, 3]);
    }

    fn random_bank(n: usize, d: usize, ff: usize, rng: &mut ChaCha8Rng) -> (ExpertBank, Router) {
        let base = Expert::randn(d, ff, Activation::GeluTanh, rng);
        let domain = (1..n).map(|_| Expert::randn(d, ff, Activation::GeluTanh, rng)).collect();
        let bank = ExpertBank::new(base, domain).unwrap();
        let router = Router::randn(n, d, rng);
        (bank, router)
    }

    #[test]
    fn smoe_with_identical_experts_and_full_k_equals_single_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = Expert::randn(4, 6, Activation::GeluTanh, &mut rng);
        let bank = ExpertBank::new(e.clone(), vec![e.clone(), e.clone(), e.clone()]).unwrap();
        let router = Router::randn(4, 4, &mut rng);
        let h = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let y = smoe_forward_values(&bank, &router, &h, 4).unwrap();
        let single = expert_forward_values(&e, &h).unwrap();
        let d = y.max_abs_diff(&single).unwrap();
        assert!(d <= 1e-12, "diff {d}");
    }

    #[test]
    fn smoe_saturated_router_selects_one_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (bank, _) = random_bank(3, 3, 5, &mut rng);
        // Router row 1 dominates for h = e0 at scale 50.
        let router = Router::new(Tensor::from_vec(vec![3, 3], vec![
            0.0, 0.0, 0.0,
            50.0, 0.0, 0.0,
            0.0, 0.0, 0.0,
        ]).unwrap())
        .unwrap();
        let h = Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let y = smoe_forward_values(&bank, &router, &h, 1).unwrap();
        // Expert index 1 in vanilla order is domain[0].
        let want = expert_forward_values(&bank.domain[0], &h).unwrap();
        let d = y.max_abs_diff(&want).unwrap();
        assert!(d <= 1e-6, "diff {d}");
    }

    #[test]
    fn smoe_is_token_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (bank, router) = random_bank(4, 4, 6, &mut rng);
        let h = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        let y = smoe_forward_values(&bank, &router, &h, 2).unwrap();
        let perm = [2usize, 0, 3, 1];
        let hp = h.gather_rows(&perm).unwrap();
        let yp = smoe_forward_values(&bank, &router, &hp, 2).unwrap();
        let want = y.gather_rows(&perm).unwrap();
        assert!(yp.bits_eq(&want));
    }

    #[test]
    fn smoe_rejects_bad_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (bank, router) = random_bank(3, 3, 5, &mut rng);
        let h = Tensor::zeros(vec![2, 3]);
        assert!(smoe_forward_values(&bank, &router, &h, 0).is_err());
        assert!(smoe_forward_values(&bank, &router, &h, 4).is_err());
    }

    #[test]
    fn smoe_handles_empty_token_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (bank, router) = random_bank(3, 4, 5, &mut rng);
        let y = smoe_forward_values(&bank, &router, &Tensor::zeros(vec![0, 4]), 2).unwrap();
        assert_eq!(y.shape(), &[0, 4]);
    }

    #[test]
    fn smoe_gradients_pass_fd_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = Tensor::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let w_g = Tensor::rand_uniform(vec![2, 3], -1.0, 1.0, &mut rng);
        let e0 = Expert::randn(3, 4, Activation::GeluTanh, &mut rng);
        let e1 = Expert::randn(3, 4, Activation::GeluTanh, &mut rng);
        let inputs = vec![
            w_g,
            e0.w1.clone(), e0.b1.clone(), e0.w2.clone(), e0.b2.clone(),
            e1.w1.clone(), e1.b1.clone(), e1.w2.clone(), e1.b2.clone(),
        ];
        let rep = fd_check_multi(&inputs, 1e-5, 1e-5, |g, vars| {
            let experts = vec![
                ExpertVars::from_vars([vars[1], vars[2], vars[3], vars[4]], Activation::GeluTanh),
                ExpertVars::from_vars([vars[5], vars[6], vars[7], vars[8]], Activation::GeluTanh),
            ];
            let hv = g.constant(h.clone());
            let y = smoe_forward(g, &experts, vars[0], hv, 1)?;
            let sq = g.mul(y, y)?;
            g.mean(sq)
        })
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn bank_requires_domain_and_consistent_dims() {
        let base = Expert::zeros(4, 6, Activation::GeluTanh);
        assert!(ExpertBank::new(base.clone(), vec![]).is_err());
        let odd = Expert::zeros(5, 6, Activation::GeluTanh);
        assert!(ExpertBank::new(base.clone(), vec![odd]).is_err());
        let ok = ExpertBank::new(base.clone(), vec![base.clone()]).unwrap();
        assert_eq!(ok.n_experts(), 2);
    }
}
