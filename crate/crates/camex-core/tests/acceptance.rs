//! Acceptance gate: one test per numbered criterion, each printing a
//! single PASS/FAIL line (with its measured worst case and elapsed time)
//! and asserting both the numeric tolerance and the runtime budget.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::{Duration, Instant};

use camex_core::train::{train, TrainConfig};
use camex_core::verify::{
    check_causal_separation, check_dare_contracts, check_dynamic_param_counts,
    check_fisher_baseline, check_identity_degeneracy, check_kronecker_dense,
    check_m_grad_identity, check_pipeline_fd, check_reparam, check_score_stop_gradient,
    check_ties_contracts, check_two_step, check_two_step_rejects_adaptive, Check,
};

const SEED: u64 = 7;

fn report(idx: usize, title: &str, checks: &[Check], elapsed: Duration, budget_s: f64) {
    let pass = checks.iter().all(|c| c.pass);
    let status = if pass { "PASS" } else { "FAIL" };
    let secs = elapsed.as_secs_f64();
    println!("criterion {idx:02} {status} in {secs:.2}s (budget {budget_s}s): {title}");
    for c in checks {
        println!("    {}: {}", c.name, c.detail);
    }
    assert!(pass, "criterion {idx:02} failed: {title}");
    assert!(
        secs < budget_s,
        "criterion {idx:02} took {secs:.2}s, over its {budget_s}s budget"
    );
}

#[test]
fn criterion_01_identity_curvature_degenerates_to_plain_merge() {
    let t = Instant::now();
    let check = check_identity_degeneracy(100, 1e-14, SEED).unwrap();
    report(
        1,
        "identity factors make the curvature-aware merge equal the plain merge",
        &[check],
        t.elapsed(),
        5.0,
    );
}

#[test]
fn criterion_02_factored_transform_matches_dense_kronecker() {
    let t = Instant::now();
    let check = check_kronecker_dense(64, 50, 1e-10, SEED).unwrap();
    report(
        2,
        "factored transform equals dense Kronecker application for every factorization up to length 64",
        &[check],
        t.elapsed(),
        10.0,
    );
}

#[test]
fn criterion_03_gradient_identities_hold() {
    let t = Instant::now();
    let closed = check_m_grad_identity(100, 1e-8, SEED).unwrap();
    let fd = check_pipeline_fd(1e-5, SEED).unwrap();
    report(
        3,
        "closed-form curvature-matrix gradient and full-pipeline finite differences",
        &[closed, fd],
        t.elapsed(),
        30.0,
    );
}

#[test]
fn criterion_04_two_step_merge_matches_closed_form() {
    let t = Instant::now();
    let decomposition = check_two_step(20, 1e-9, SEED).unwrap();
    let gate = check_two_step_rejects_adaptive().unwrap();
    report(
        4,
        "gradient step on dense curvature matrices then merging equals the two-term form",
        &[decomposition, gate],
        t.elapsed(),
        10.0,
    );
}

#[test]
fn criterion_05_reparameterization_is_exact_at_full_strength() {
    let t = Instant::now();
    let check = check_reparam(50, 1e-12, true, SEED).unwrap();
    report(
        5,
        "folding curvature into stored experts reproduces the direct merge, including through a checkpoint",
        &[check],
        t.elapsed(),
        10.0,
    );
}

#[test]
fn criterion_06_segment_routing_is_causal() {
    let t = Instant::now();
    let order = check_causal_separation(SEED).unwrap();
    let detach = check_score_stop_gradient(SEED).unwrap();
    report(
        6,
        "segment outputs ignore later segments; first-segment scores carry exactly zero gradient",
        &[order, detach],
        t.elapsed(),
        10.0,
    );
}

#[test]
fn criterion_07_masking_protocol_contracts() {
    let t = Instant::now();
    let ties = check_ties_contracts(SEED).unwrap();
    let dare = check_dare_contracts(10_000, SEED).unwrap();
    report(
        7,
        "sign-election unanimity and idempotence; random-drop identity, determinism, unbiasedness",
        &[ties, dare],
        t.elapsed(),
        20.0,
    );
}

#[test]
fn criterion_08_dynamic_layout_saves_expert_parameters() {
    let t = Instant::now();
    let check = check_dynamic_param_counts(SEED).unwrap();
    report(
        8,
        "base propagation stores exactly (layers - 1) fewer experts than per-layer bases",
        &[check],
        t.elapsed(),
        5.0,
    );
}

/// One-sided sign test tail: probability of at least `wins` successes in `n`
/// fair coin flips.
fn sign_test_p(n: usize, wins: usize) -> f64 {
    let choose = |n: usize, k: usize| -> f64 {
        let mut c = 1.0;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        c
    };
    (wins..=n).map(|i| choose(n, i)).sum::<f64>() / 2f64.powi(n as i32)
}

#[test]
fn criterion_09_curvature_improves_directional_training() {
    let t = Instant::now();
    let seeds = [1u64, 2, 3, 4, 5];
    let run = |seed: u64, ca: bool| -> f64 {
        let cfg = TrainConfig { seed, ca, ..TrainConfig::default() };
        train(&cfg).unwrap().log.final_metric
    };
    let ca_ppl: Vec<f64> = seeds.iter().map(|&s| run(s, true)).collect();
    let plain_ppl: Vec<f64> = seeds.iter().map(|&s| run(s, false)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_ca, m_plain) = (mean(&ca_ppl), mean(&plain_ppl));
    let untrained = f64::from(16u8);

    let wins = ca_ppl.iter().zip(&plain_ppl).filter(|(a, b)| a < b).count();
    let decided = ca_ppl.iter().zip(&plain_ppl).filter(|(a, b)| a != b).count();
    let p = sign_test_p(decided, wins);
    let pass = m_ca <= m_plain && m_ca < untrained && m_plain < untrained;

    let secs = t.elapsed().as_secs_f64();
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion 09 {status} in {secs:.2}s (budget 600s): curvature-aware training at least matches plain merging");
    println!(
        "    mean perplexity over {} paired seeds: curvature {m_ca:.4} vs plain {m_plain:.4} (untrained {untrained})",
        seeds.len()
    );
    println!("    per-seed curvature {ca_ppl:.4?} vs plain {plain_ppl:.4?}");
    println!(
        "    one-sided sign test: {wins}/{decided} wins, p = {p:.3}, significant at 0.1: {}",
        p <= 0.1
    );
    assert!(
        pass,
        "criterion 09 failed: curvature mean {m_ca:.4}, plain mean {m_plain:.4}, untrained {untrained}"
    );
    assert!(secs < 600.0, "criterion 09 took {secs:.2}s, over its 600s budget");
}

#[test]
fn criterion_10_fisher_merge_matches_hand_numbers() {
    let t = Instant::now();
    let check = check_fisher_baseline(1e-12).unwrap();
    report(
        10,
        "precision-weighted averaging against hand-computed numbers and the equal-weights mean",
        &[check],
        t.elapsed(),
        5.0,
    );
}
