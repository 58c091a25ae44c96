//! Staged execution: spatial selection → transport → budgets → execution.
//!
//! Frames and pairs are processed on a bounded rayon pool. Every per-frame
//! and per-pair step is a pure function of its inputs and results are
//! collected in index order, so the output does not depend on the number of
//! workers. Budget allocation and graph resolution run sequentially.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{self, BudgetAllocation, RhoBin};
use crate::container::TokenVideo;
use crate::error::{Error, Result};
use crate::executor::{self, CompressedSequence, CompressionEdge, EdgeKind};
use crate::spatial::{self, RetainedFrame, SpatialStrategy};
use crate::transport::{self, AlphaMode, PairTransport, SinkhornParams};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Target retention ratio `r`.
    pub ratio: f64,
    /// Temporal share `γ`.
    pub gamma: f64,
    pub tau_m: f64,
    pub tau_b: f64,
    pub tau_c: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub strategy: SpatialStrategy,
    pub alpha_mode: AlphaMode,
    pub uniform_saliency: bool,
    pub seed: u64,
    /// Worker threads. Not serialized: results do not depend on it.
    #[serde(skip_serializing)]
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let sinkhorn = SinkhornParams::default();
        Self {
            ratio: 0.25,
            gamma: 0.3,
            tau_m: 0.3,
            tau_b: 0.3,
            tau_c: 0.3,
            epsilon: sinkhorn.epsilon,
            max_iters: sinkhorn.max_iters,
            tol: sinkhorn.tol,
            strategy: SpatialStrategy::Ours,
            alpha_mode: AlphaMode::PositionAligned,
            uniform_saliency: false,
            seed: 0,
            workers: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} must be positive")))
            }
        };
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::param("ratio", format!("{} not in (0, 1]", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::param("gamma", format!("{} not in [0, 1]", self.gamma)));
        }
        positive("tau_m", self.tau_m)?;
        positive("tau_b", self.tau_b)?;
        if !(0.0..=2.0).contains(&self.tau_c) {
            return Err(Error::param("tau_c", format!("{} not in [0, 2]", self.tau_c)));
        }
        positive("epsilon", self.epsilon)?;
        positive("tol", self.tol)?;
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::param("workers", "must be at least 1"));
        }
        if let AlphaMode::Fixed(a) = self.alpha_mode {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::param("alpha_mode", format!("fixed α {a} not in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn sinkhorn(&self) -> SinkhornParams {
        SinkhornParams {
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }

    /// Builds a config from a key-value mapping. Missing keys take their
    /// defaults; unknown keys are rejected.
    pub fn from_map(map: BTreeMap<String, serde_json::Value>) -> Result<Self> {
        let value = serde_json::Value::Object(map.into_iter().collect());
        let config: Self = serde_json::from_value(value).map_err(|e| Error::param("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair: usize,
    /// `s̄_t`; absent under a fixed mixing weight.
    pub similarity: Option<f64>,
    pub alpha: f64,
    pub difficulty: f64,
    pub weight: f64,
    pub target: f64,
    pub budget: usize,
    pub rho: f64,
    pub converged: bool,
    pub iterations: usize,
    pub merges: usize,
    pub prunes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub spatial_ms: f64,
    pub transport_ms: f64,
    pub budget_ms: f64,
    pub execute_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub spatial_ratio: f64,
    pub temporal_ratio: f64,
    /// `K`, also the per-pair cap.
    pub retained_per_frame: usize,
    pub total_budget: usize,
    /// `ρ*`; absent without temporal compression.
    pub overflow_threshold: Option<f64>,
    /// Empty when no temporal stage ran.
    pub pairs: Vec<PairReport>,
    pub cv: f64,
    pub overflow_rate: f64,
    pub rho_histogram: Vec<RhoBin>,
    pub redistribution_rounds: usize,
    pub frozen_pairs: Vec<usize>,
    pub survivors: usize,
    pub achieved_retention: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(s)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::param(
                "schema_version",
                format!("unsupported report schema {}", report.schema_version),
            ));
        }
        Ok(report)
    }

    /// Per-pair table as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "pair,similarity,alpha,difficulty,weight,target,budget,rho,converged,iterations,merges,prunes\n",
        );
        for p in &self.pairs {
            let similarity = p.similarity.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                p.pair,
                similarity,
                p.alpha,
                p.difficulty,
                p.weight,
                p.target,
                p.budget,
                p.rho,
                p.converged,
                p.iterations,
                p.merges,
                p.prunes
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "frames {}  tokens/frame {}  K {}  r_s {:.4}  r_t {:.4}",
            self.frames, self.tokens_per_frame, self.retained_per_frame, self.spatial_ratio, self.temporal_ratio
        );
        let _ = writeln!(
            out,
            "B_tot {}  CV {:.4}  overflow rate {:.4}  rounds {}  rho* {}",
            self.total_budget,
            self.cv,
            self.overflow_rate,
            self.redistribution_rounds,
            self.overflow_threshold
                .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
        );
        let _ = writeln!(
            out,
            "survivors {}  achieved retention {:.6} (target {})",
            self.survivors, self.achieved_retention, self.config.ratio
        );
        if !self.pairs.is_empty() {
            let _ = writeln!(
                out,
                "{:>5} {:>8} {:>10} {:>6} {:>7} {:>6} {:>6}",
                "pair", "alpha", "W", "B", "rho", "merge", "prune"
            );
            for p in &self.pairs {
                let _ = writeln!(
                    out,
                    "{:>5} {:>8.4} {:>10.6} {:>6} {:>7.3} {:>6} {:>6}{}",
                    p.pair,
                    p.alpha,
                    p.difficulty,
                    p.budget,
                    p.rho,
                    p.merges,
                    p.prunes,
                    if p.converged { "" } else { "  (not converged)" }
                );
            }
        }
        out
    }
}

/// Intermediate results of a run, for inspection and verification.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub retained: Vec<RetainedFrame>,
    pub transports: Vec<PairTransport>,
    pub allocation: Option<BudgetAllocation>,
    pub edges: Vec<CompressionEdge>,
    pub sequence: CompressedSequence,
    pub report: RunReport,
}

fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs the whole pipeline and keeps every intermediate stage.
pub fn run_detailed(config: &PipelineConfig, video: &TokenVideo) -> Result<RunArtifacts> {
    config.validate()?;
    let uniform;
    let video = if config.uniform_saliency {
        uniform = video.with_uniform_saliency();
        &uniform
    } else {
        video
    };

    let frames = video.frames();
    let tokens = video.tokens_per_frame();
    let (spatial_ratio, temporal_ratio) = spatial::retention_split(config.ratio, config.gamma)?;
    let k = spatial::retained_count(tokens, spatial_ratio);
    let total = budget::total_budget(k, frames, temporal_ratio)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::param("workers", e.to_string()))?;

    let started = Instant::now();
    let retained: Vec<RetainedFrame> = pool.install(|| {
        (0..frames)
            .into_par_iter()
            .map(|t| spatial::retain_frame(video, t, config.strategy, k, config.tau_m))
            .collect::<Result<_>>()
    })?;
    let spatial_time = started.elapsed();

    let mut transports = Vec::new();
    let mut allocation = None;
    let mut edges = Vec::new();
    let (mut transport_time, mut budget_time) = (Duration::ZERO, Duration::ZERO);

    let started = Instant::now();
    if total > 0 {
        let grid = video.grid();
        let params = config.sinkhorn();
        transports = pool.install(|| {
            (0..frames - 1)
                .into_par_iter()
                .map(|t| {
                    let (similarity, alpha) = transport::mixing_weight_variant(config.alpha_mode, video, t)?;
                    transport::solve_pair(t, &retained[t], &retained[t + 1], similarity, alpha, grid, params)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        transport_time = started.elapsed();

        let started = Instant::now();
        let difficulties: Vec<f64> = transports.iter().map(|p| p.difficulty).collect();
        let alloc = budget::allocate(&difficulties, total, k, config.tau_b)?;
        budget_time = started.elapsed();

        let per_pair: Vec<Vec<CompressionEdge>> = pool.install(|| {
            transports
                .par_iter()
                .zip(alloc.budgets.par_iter())
                .map(|(p, &b)| executor::select_matches(p.pair, &p.plan, &p.cost, b, config.tau_c))
                .collect::<Result<_>>()
        })?;
        edges = per_pair.into_iter().flatten().collect();
        allocation = Some(alloc);
    }
    let started = Instant::now();
    let sequence = executor::resolve_graph(&edges, &retained)?;
    let execute_time = started.elapsed();

    let stats = allocation.as_ref().map(budget::budget_stats);
    let pairs = match &allocation {
        Some(alloc) => transports
            .iter()
            .map(|p| {
                let t = p.pair;
                let kinds = edges.iter().filter(|e| e.pair == t);
                PairReport {
                    pair: t,
                    similarity: p.similarity,
                    alpha: p.alpha,
                    difficulty: p.difficulty,
                    weight: alloc.weights[t],
                    target: alloc.targets[t],
                    budget: alloc.budgets[t],
                    rho: alloc.ratios[t],
                    converged: p.converged,
                    iterations: p.iterations,
                    merges: kinds.clone().filter(|e| e.kind == EdgeKind::Merge).count(),
                    prunes: kinds.filter(|e| e.kind == EdgeKind::Prune).count(),
                }
            })
            .collect(),
        None => Vec::new(),
    };

    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        frames,
        tokens_per_frame: tokens,
        dim: video.dim(),
        spatial_ratio,
        temporal_ratio,
        retained_per_frame: k,
        total_budget: total,
        overflow_threshold: if total > 0 {
            Some(budget::overflow_threshold(frames, temporal_ratio)?)
        } else {
            None
        },
        pairs,
        cv: stats.as_ref().map_or(0.0, |s| s.cv),
        overflow_rate: stats.as_ref().map_or(0.0, |s| s.overflow_rate),
        rho_histogram: stats.map_or_else(Vec::new, |s| s.rho_histogram),
        redistribution_rounds: allocation.as_ref().map_or(0, |a| a.rounds),
        frozen_pairs: allocation.as_ref().map_or_else(Vec::new, |a| a.frozen.clone()),
        survivors: sequence.len(),
        achieved_retention: executor::compression_ratio(&sequence, frames, tokens),
        timings: Some(StageTimings {
            spatial_ms: millis(spatial_time),
            transport_ms: millis(transport_time),
            budget_ms: millis(budget_time),
            execute_ms: millis(execute_time),
        }),
    };

    Ok(RunArtifacts {
        retained,
        transports,
        allocation,
        edges,
        sequence,
        report,
    })
}

/// Runs the pipeline. The report carries no wall-clock timings, so identical
/// inputs produce identical reports.
pub fn run(config: &PipelineConfig, video: &TokenVideo) -> Result<(CompressedSequence, RunReport)> {
    let RunArtifacts {
        sequence, mut report, ..
    } = run_detailed(config, video)?;
    report.timings = None;
    Ok((sequence, report))
}

/// Like [`run`], with per-stage wall-clock timings in the report.
pub fn run_timed(config: &PipelineConfig, video: &TokenVideo) -> Result<(CompressedSequence, RunReport)> {
    let RunArtifacts { sequence, report, .. } = run_detailed(config, video)?;
    Ok((sequence, report))
}
