//! Ablation sweeps: train one model per (grid point, seed) pair, in
//! parallel, and tabulate the final metric with a per-point mean.
//!
//! Rows come back in a fixed order — grid points in the order given, seeds
//! in the order given, then one aggregate row per point — regardless of how
//! the runs were scheduled across threads. The `CAMEX_THREADS` environment
//! variable caps worker parallelism.

use crate::error::{CamexError, Result};
use crate::train::{train, TrainConfig};
use serde::Serialize;
use std::thread;

#[derive(Debug, Clone, PartialEq)]
pub enum GridAxis {
    Alpha(Vec<f64>),
    Rank(Vec<usize>),
    Experts(Vec<usize>),
}

impl GridAxis {
    /// Field the axis varies, as it appears in run configs.
    pub fn name(&self) -> &'static str {
        match self {
            GridAxis::Alpha(_) => "alpha",
            GridAxis::Rank(_) => "kronecker_rank",
            GridAxis::Experts(_) => "n_experts",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GridAxis::Alpha(v) => v.len(),
            GridAxis::Rank(v) => v.len(),
            GridAxis::Experts(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Numeric value of grid point `i` (ranks and expert counts as floats,
    /// for uniform tabulation).
    pub fn value(&self, i: usize) -> f64 {
        match self {
            GridAxis::Alpha(v) => v[i],
            GridAxis::Rank(v) => v[i] as f64,
            GridAxis::Experts(v) => v[i] as f64,
        }
    }

    /// Base config with grid point `i` applied. A rank sweep implies
    /// curvature is on; the other fields are untouched.
    pub fn apply(&self, i: usize, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            GridAxis::Alpha(v) => cfg.alpha = v[i],
            GridAxis::Rank(v) => {
                cfg.ca = true;
                cfg.kronecker_rank = v[i];
            }
            GridAxis::Experts(v) => cfg.n_experts = v[i],
        }
        cfg
    }

    /// Parses `"alpha=0.5,0.8,1.0"`, `"rank=1,2,4"`, or `"experts=2,4,8"`.
    pub fn parse(s: &str) -> Result<GridAxis> {
        let bad = |detail: String| CamexError::Contract { detail };
        let (name, rest) = s
            .split_once('=')
            .ok_or_else(|| bad(format!("grid spec '{s}' must look like axis=v1,v2,...")))?;
        let values: Vec<&str> = rest.split(',').map(str::trim).collect();
        if values.is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(bad(format!("grid spec '{s}' has an empty value list")));
        }
        match name.trim() {
            "alpha" => values
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| bad(format!("bad alpha value '{v}': {e}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(GridAxis::Alpha),
            "rank" => values
                .iter()
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|e| bad(format!("bad rank value '{v}': {e}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(GridAxis::Rank),
            "experts" => values
                .iter()
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|e| bad(format!("bad expert count '{v}': {e}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(GridAxis::Experts),
            other => Err(bad(format!(
                "unknown grid axis '{other}' (expected alpha, rank, or experts)"
            ))),
        }
    }
}

/// One tabulated sweep result. `seed: None` marks the per-point aggregate
/// (mean over seeds).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: Option<u64>,
    pub metric: f64,
}

/// Worker cap from `CAMEX_THREADS`, falling back to the machine's
/// parallelism. Exposed with the raw value injected for testability.
pub fn thread_cap(env_value: Option<&str>) -> Result<usize> {
    match env_value {
        Some(raw) => {
            let n: usize = raw.trim().parse().map_err(|e| CamexError::Contract {
                detail: format!("CAMEX_THREADS must be a positive integer, got '{raw}': {e}"),
            })?;
            if n == 0 {
                return Err(CamexError::Contract {
                    detail: "CAMEX_THREADS must be at least 1".into(),
                });
            }
            Ok(n)
        }
        None => Ok(thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Runs the sweep with parallelism from `CAMEX_THREADS`.
pub fn sweep(base: &TrainConfig, axis: &GridAxis, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let cap = thread_cap(std::env::var("CAMEX_THREADS").ok().as_deref())?;
    sweep_with_threads(base, axis, seeds, cap)
}

/// Runs the sweep on at most `threads` workers. The result is independent
/// of `threads`.
pub fn sweep_with_threads(
    base: &TrainConfig,
    axis: &GridAxis,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    if axis.is_empty() {
        return Err(CamexError::Contract {
            detail: "sweep grid must contain at least one point".into(),
        });
    }
    if seeds.is_empty() {
        return Err(CamexError::Contract {
            detail: "sweep needs at least one seed".into(),
        });
    }
    if threads == 0 {
        return Err(CamexError::Contract {
            detail: "at least one worker thread is required".into(),
        });
    }
    // Validate every grid point up front so a bad point fails fast instead
    // of aborting a half-finished sweep.
    let jobs: Vec<TrainConfig> = (0..axis.len())
        .flat_map(|p| {
            seeds.iter().map(move |&s| {
                let mut cfg = axis.apply(p, base);
                cfg.seed = s;
                cfg
            })
        })
        .collect();
    for cfg in &jobs {
        cfg.validate()?;
    }

    let workers = threads.min(jobs.len());
    let mut metrics: Vec<Option<f64>> = vec![None; jobs.len()];
    thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let jobs = &jobs;
            handles.push(scope.spawn(move || -> Result<Vec<(usize, f64)>> {
                let mut out = Vec::new();
                for (i, cfg) in jobs.iter().enumerate() {
                    if i % workers == w {
                        out.push((i, train(cfg)?.log.final_metric));
                    }
                }
                Ok(out)
            }));
        }
        for h in handles {
            let part = h.join().map_err(|_| CamexError::Contract {
                detail: "a sweep worker panicked".into(),
            })??;
            for (i, m) in part {
                metrics[i] = Some(m);
            }
        }
        Ok(())
    })?;

    let mut rows = Vec::with_capacity(axis.len() * (seeds.len() + 1));
    for p in 0..axis.len() {
        let mut sum = 0.0;
        for (si, &seed) in seeds.iter().enumerate() {
            let metric = metrics[p * seeds.len() + si].expect("job completed");
            sum += metric;
            rows.push(SweepRow {
                axis: axis.name().to_string(),
                value: axis.value(p),
                seed: Some(seed),
                metric,
            });
        }
        rows.push(SweepRow {
            axis: axis.name().to_string(),
            value: axis.value(p),
            seed: None,
            metric: sum / seeds.len() as f64,
        });
    }
    Ok(rows)
}
