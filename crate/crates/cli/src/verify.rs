//! `ottv verify`: Sinkhorn against the exact LP and greedy selection against
//! exhaustive search, on random small instances.

use clap::Args;
use ndarray::Array2;
use ottv_core::oracle;
use ottv_core::spatial::{self, Similarity};
use ottv_core::transport::{self, SinkhornParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `1 - 1/e`.
const GREEDY_BOUND: f64 = 1.0 - 1.0 / std::f64::consts::E;

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Sinkhorn iteration cap; the pipeline default of 200 leaves many
    /// random instances unconverged at small epsilon.
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
}

fn simplex_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn check_sinkhorn(rng: &mut ChaCha8Rng, params: SinkhornParams) -> anyhow::Result<(f64, bool)> {
    let m = rng.random_range(1..=oracle::MAX_OT_SIZE);
    let n = rng.random_range(1..=oracle::MAX_OT_SIZE);
    let (src, dst) = (simplex_point(rng, m), simplex_point(rng, n));
    let cost = Array2::from_shape_fn((m, n), |_| rng.random_range(0.0..2.0));
    let approx = transport::sinkhorn(&src, &dst, &cost, params)?;
    let exact = oracle::exact_ot(&src, &dst, &cost)?;
    let value = transport::difficulty(&approx.plan, &cost);
    let gap = (value - exact.objective).abs();
    Ok((gap, gap <= (0.02 * exact.objective.abs()).max(1e-3)))
}

fn check_greedy(rng: &mut ChaCha8Rng) -> anyhow::Result<(f64, bool)> {
    let n = rng.random_range(2..=oracle::MAX_SELECTION_TOKENS);
    let k = rng.random_range(1..=oracle::MAX_SELECTION_K.min(n));
    let dim = rng.random_range(2..=6);
    let tokens: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if v.iter().all(|x| *x == 0.0) {
                vec![1.0; dim]
            } else {
                v
            }
        })
        .collect();
    let saliency = simplex_point(rng, n);
    let greedy = spatial::select_ours(&Similarity::new(&tokens), &saliency, k)?;
    let value = oracle::facility_location(&tokens, &saliency, &greedy);
    let (_, best) = oracle::brute_force_selection(&tokens, &saliency, k)?;
    let ratio = if best > 0.0 { value / best } else { 1.0 };
    Ok((ratio, value >= GREEDY_BOUND * best - 1e-12))
}

/// Returns whether every instance passed.
pub fn run(args: &VerifyArgs) -> anyhow::Result<bool> {
    let params = SinkhornParams {
        epsilon: args.epsilon,
        max_iters: args.max_iters,
        ..SinkhornParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let (mut worst_gap, mut ot_failures) = (0.0f64, 0);
    for _ in 0..args.instances {
        let (gap, ok) = check_sinkhorn(&mut rng, params)?;
        worst_gap = worst_gap.max(gap);
        ot_failures += usize::from(!ok);
    }
    let (mut worst_ratio, mut greedy_failures) = (1.0f64, 0);
    for _ in 0..args.instances {
        let (ratio, ok) = check_greedy(&mut rng)?;
        worst_ratio = worst_ratio.min(ratio);
        greedy_failures += usize::from(!ok);
    }

    let verdict = |failures: usize| if failures == 0 { "PASS" } else { "FAIL" };
    println!(
        "{} sinkhorn vs exact: {} instances, worst gap {worst_gap:.3e}, {ot_failures} outside tolerance",
        verdict(ot_failures),
        args.instances
    );
    println!(
        "{} greedy vs exhaustive: {} instances, worst ratio {worst_ratio:.4} (bound {GREEDY_BOUND:.4}), {greedy_failures} below",
        verdict(greedy_failures),
        args.instances
    );
    Ok(ot_failures == 0 && greedy_failures == 0)
}
