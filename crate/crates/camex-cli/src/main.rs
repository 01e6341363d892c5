//! `camex` command-line front end.
//!
//! Subcommands: `train` a model from a TOML config, `merge` a saved bank
//! offline (masking + curvature folding baked into the stored experts),
//! `verify` the numeric self-checks, `sweep` one config axis across seeds,
//! and `info` to inspect a checkpoint.
//!
//! Exit codes: 0 on success, 1 when verification checks fail or a run aborts,
//! 2 on usage errors (bad flags, malformed configs, incompatible arguments).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use camex_core::curvature::fold_domain_experts;
use camex_core::io;
use camex_core::merge::{MaskContext, MergeSpec, Protocol};
use camex_core::model::{LayerBank, Variant};
use camex_core::sweep::{sweep, GridAxis};
use camex_core::train::train;
use camex_core::verify::{run_suites, Suite};
use camex_core::CamexError;

#[derive(Parser)]
#[command(
    name = "camex",
    version,
    about = "Curvature-aware expert merging: training, offline merging, and verification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML config; writes a checkpoint and a metrics
    /// CSV, and prints a JSON run summary to stdout.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Output metrics CSV path.
        #[arg(long)]
        metrics: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Offline-merge a saved bank: applies the chosen masking protocol and
    /// (for ca variants) folds the curvature transforms into the stored
    /// domain experts, so the output checkpoint serves with plain merging.
    Merge {
        /// Input checkpoint (per-layer bank layout).
        #[arg(long)]
        ckpt: PathBuf,
        /// Merge protocol for the folded experts.
        #[arg(long)]
        protocol: ProtocolArg,
        /// Merge strength folded into the stored domain experts.
        #[arg(long)]
        alpha: f64,
        /// Fraction of lowest-magnitude entries trimmed before sign election
        /// (ties protocols).
        #[arg(long = "ties-trim")]
        ties_trim: Option<f64>,
        /// Drop probability for random-drop masking (dare protocols).
        #[arg(long = "dare-p")]
        dare_p: Option<f64>,
        /// Seed for the masking draws.
        #[arg(long)]
        seed: Option<u64>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numeric verification suites; exits 1 if any check fails.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train across one config axis (grid x seeds) and write a CSV of
    /// final metrics with per-point means.
    Sweep {
        /// TOML run configuration for the base point.
        #[arg(long)]
        config: PathBuf,
        /// Axis spec: alpha=v1,v2,... | rank=r1,r2,... | experts=n1,n2,...
        #[arg(long)]
        grid: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// First seed of the per-point seed list.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds per grid point.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Print checkpoint dimensions, merge protocol, and a parameter table.
    Info {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    All,
    Gradcheck,
    Kronecker,
    Causal,
    Eq8,
    Reparam,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Suite {
        match s {
            SuiteArg::All => Suite::All,
            SuiteArg::Gradcheck => Suite::Gradcheck,
            SuiteArg::Kronecker => Suite::Kronecker,
            SuiteArg::Causal => Suite::Causal,
            SuiteArg::Eq8 => Suite::TwoStep,
            SuiteArg::Reparam => Suite::Reparam,
        }
    }
}

/// Masking/curvature combination for offline merging. `ca*` variants fold
/// the learned curvature transforms into the stored experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    /// Score-weighted combination, no masking, no curvature.
    Plain,
    /// Curvature-aware: fold the learned transforms, no masking.
    Ca,
    /// Magnitude trim plus sign election.
    Ties,
    /// Random drop with survivor rescaling.
    Dare,
    /// Sign election plus curvature folding.
    CaTies,
    /// Random drop plus curvature folding.
    CaDare,
}

impl ProtocolArg {
    fn protocol(self) -> Protocol {
        match self {
            ProtocolArg::Plain | ProtocolArg::Ca => Protocol::DomainSpecific,
            ProtocolArg::Ties | ProtocolArg::CaTies => Protocol::Ties,
            ProtocolArg::Dare | ProtocolArg::CaDare => Protocol::Dare,
        }
    }

    fn curvature(self) -> bool {
        matches!(self, ProtocolArg::Ca | ProtocolArg::CaTies | ProtocolArg::CaDare)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            // Bad arguments and malformed configs are usage errors; anything
            // else (I/O, corrupt checkpoints, numeric aborts) is a plain
            // failure.
            let (code, label) = match &e {
                CamexError::Contract { .. } | CamexError::Config { .. } => (2u8, "usage error"),
                _ => (1u8, "error"),
            };
            eprintln!("{label}: {e}");
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode, CamexError> {
    match cmd {
        Cmd::Train { config, out, metrics, seed } => cmd_train(&config, &out, &metrics, seed),
        Cmd::Merge { ckpt, protocol, alpha, ties_trim, dare_p, seed, out } => {
            cmd_merge(&ckpt, protocol, alpha, ties_trim, dare_p, seed, &out)
        }
        Cmd::Verify { suite, seed } => cmd_verify(suite.into(), seed),
        Cmd::Sweep { config, grid, out, seed, seeds } => cmd_sweep(&config, &grid, &out, seed, seeds),
        Cmd::Info { ckpt } => cmd_info(&ckpt),
    }
}

fn cmd_train(config: &Path, out: &Path, metrics: &Path, seed: Option<u64>) -> Result<ExitCode, CamexError> {
    let mut cfg = io::load_train_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = train(&cfg)?;
    std::fs::write(metrics, io::metrics_csv(&outcome.log)).map_err(CamexError::Io)?;
    io::save_model(out, &outcome.model, &cfg.merge_spec())?;
    println!("{}", io::run_summary_json(&outcome.log)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_merge(
    ckpt: &Path,
    protocol: ProtocolArg,
    alpha: f64,
    ties_trim: Option<f64>,
    dare_p: Option<f64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<ExitCode, CamexError> {
    let (mut model, stored) = io::load_model(ckpt)?;
    if model.cfg.variant != Variant::Merging {
        return Err(CamexError::Contract {
            detail: format!(
                "offline merging needs a checkpoint with per-layer domain experts \
                 (merging layout); this one stores a {:?} model",
                model.cfg.variant
            ),
        });
    }
    if protocol.curvature() && model.cfg.curvature_rank.is_none() {
        return Err(CamexError::Contract {
            detail: "curvature-aware protocols need a checkpoint that stores curvature factors".into(),
        });
    }

    let mut spec = stored;
    spec.protocol = protocol.protocol();
    spec.ca_enabled = protocol.curvature();
    spec.alpha = alpha;
    spec.dynamic = false;
    if let Some(t) = ties_trim {
        spec.ties_trim_fraction = t;
    }
    if let Some(p) = dare_p {
        spec.dare_drop_prob = p;
    }
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    spec.validate()?;

    for (l, layer) in model.layers.iter_mut().enumerate() {
        let bank = match &layer.bank {
            LayerBank::Full(b) => b,
            LayerBank::DomainOnly(_) => {
                return Err(CamexError::Contract {
                    detail: "merging layout stores full experts per layer; checkpoint is inconsistent".into(),
                })
            }
        };
        // Masks are drawn with the same per-layer context evaluation uses,
        // so the folded experts reproduce eval-time merging exactly.
        let folded = fold_domain_experts(
            bank,
            layer.curvature.as_ref(),
            &spec,
            MaskContext { layer: l, step: 0 },
        )?;
        layer.bank = LayerBank::Full(folded);
        layer.curvature = None;
    }
    model.cfg.curvature_rank = None;

    // Everything the protocol did is baked into the stored experts; the
    // output serves with a plain strength-1 merge and no further masking.
    let out_spec = MergeSpec {
        protocol: Protocol::DomainSpecific,
        alpha: 1.0,
        ca_enabled: false,
        dynamic: false,
        dare_drop_prob: 0.0,
        ties_trim_fraction: 0.0,
        ties_sign_gate: false,
        rng_seed: spec.rng_seed,
    };
    io::save_model(out, &model, &out_spec)?;
    println!(
        "folded {} layers with protocol {:?} at strength {alpha}; wrote {}",
        model.layers.len(),
        protocol,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suite: Suite, seed: u64) -> Result<ExitCode, CamexError> {
    let reports = run_suites(suite, seed)?;
    let mut passed = 0usize;
    let mut total = 0usize;
    for r in &reports {
        for c in &r.checks {
            total += 1;
            if c.pass {
                passed += 1;
            }
            let status = if c.pass { "PASS" } else { "FAIL" };
            println!("[{}] {status} {}: {}", r.suite, c.name, c.detail);
        }
        println!(
            "suite {}: {}/{} checks passed in {:.2}s",
            r.suite,
            r.checks.iter().filter(|c| c.pass).count(),
            r.checks.len(),
            r.elapsed_s
        );
    }
    if passed == total {
        println!("verification: all {total} checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("verification: {} of {total} checks FAILED", total - passed);
        Ok(ExitCode::from(1))
    }
}

fn cmd_sweep(config: &Path, grid: &str, out: &Path, seed: u64, seeds: usize) -> Result<ExitCode, CamexError> {
    if seeds == 0 {
        return Err(CamexError::Contract {
            detail: "--seeds must be at least 1".into(),
        });
    }
    let base = io::load_train_config(config)?;
    let axis = GridAxis::parse(grid)?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| seed + i).collect();
    let rows = sweep(&base, &axis, &seed_list)?;
    std::fs::write(out, io::sweep_csv(&rows)).map_err(CamexError::Io)?;
    println!(
        "swept {} over {} points x {} seeds; wrote {} rows to {}",
        axis.name(),
        axis.len(),
        seeds,
        rows.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::DomainSpecific => "domain_specific",
        Protocol::Ties => "ties",
        Protocol::Dare => "dare",
        Protocol::FisherDiag => "fisher_diag",
    }
}

fn cmd_info(ckpt: &Path) -> Result<ExitCode, CamexError> {
    let (model, merge) = io::load_model(ckpt)?;
    let cfg = &model.cfg;
    let counts = model.count_params();
    println!("checkpoint: {}", ckpt.display());
    println!("variant: {:?}", cfg.variant);
    println!(
        "dims: vocab {} | d_model {} | d_ff {} | experts/layer {} | layers {} | seq {} (segment {}) | top-k {}",
        cfg.vocab, cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.n_layers, cfg.seq_len, cfg.seg_len, cfg.top_k
    );
    match cfg.curvature_rank {
        Some(r) => println!("curvature rank: {r}"),
        None => println!("curvature rank: none"),
    }
    println!(
        "merge: protocol {} | alpha {} | curvature {} | dynamic {}",
        protocol_name(merge.protocol),
        merge.alpha,
        if merge.ca_enabled { "on" } else { "off" },
        if merge.dynamic { "on" } else { "off" },
    );
    let table: BTreeMap<&str, usize> = BTreeMap::from([
        ("backbone", counts.backbone),
        ("experts", counts.experts),
        ("curvature", counts.curvature),
        ("router", counts.router),
    ]);
    println!("parameters:");
    for (name, n) in table {
        println!("  {name:<10} {n}");
    }
    println!("  {:<10} {}", "total", counts.total());
    println!("tensors stored: {}", model.named_tensors().len());
    Ok(ExitCode::SUCCESS)
}
