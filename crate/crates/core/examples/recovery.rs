//! Train on a synthetic superposition corpus and report recovery metrics.
//!
//! cargo run --release --example recovery -- [variant] [steps] [lambda] [lr] [seed]

use std::time::Instant;

use saerad::data::{generate_synthetic, SyntheticSpec};
use saerad::metrics::{evaluate, mmcs, shrinkage};
use saerad::optim::TrainConfig;
use saerad::sae::SaeVariant;
use saerad::train::train;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let variant: SaeVariant = arg(0, "sae-rad").parse()?;
    let spec = SyntheticSpec {
        n: 64,
        m_true: 256,
        rows: 50_000,
        p_active: 0.02,
        magnitude_range: (0.5, 1.5),
        noise_sigma: 0.01,
        seed: 1,
    };
    let (raw, truth) = generate_synthetic(&spec)?;
    let data = raw.normalized()?;
    let cfg = TrainConfig {
        expansion_factor: 8,
        steps: arg(1, "20000").parse()?,
        lambda_max: arg(2, "0.01").parse()?,
        lr_max: arg(3, "0.001").parse()?,
        batch_size: 256,
        seed: arg(4, "0").parse()?,
        ..TrainConfig::full_scale(variant)
    };
    let start = Instant::now();
    let (params, report) = train(&cfg, &data)?;
    let elapsed = start.elapsed();
    let eval = evaluate(&params, &data)?;
    let shrink = shrinkage(&params, &data, &truth)?;
    println!(
        "{variant} steps={} lambda={} lr={} time={:.1}s loss={:.4} l0={:.2} ev={:.4} mmcs={:.4} dead={} shrink_gap={:.4}",
        cfg.steps,
        cfg.lambda_max,
        cfg.lr_max,
        elapsed.as_secs_f64(),
        report.records.last().map_or(f64::NAN, |r| r.loss.total),
        eval.l0,
        eval.explained_variance,
        mmcs(&params, &truth)?,
        eval.dead_feature_count,
        shrink.gap(),
    );
    Ok(())
}
