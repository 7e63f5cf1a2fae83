// Scratch harness used to tune the default desk-scale plan budgets.

use std::time::Instant;

use fpvec_core::harness::{run_full, Condition, ExperimentPlan};

fn main() {
    let t0 = Instant::now();
    let mut plan = ExperimentPlan::default_desk_scale();
    // Calibration-only: probe extra random-prune seeds.
    for seed in [82u64, 83, 84] {
        let mut s = fpvec_core::prune_ops::PruneSpec::new(fpvec_core::prune_ops::PruneMethod::Random, 0.2);
        s.seed = seed;
        plan.attacks.prune.push(s);
    }
    let run = run_full(&plan).expect("pipeline");
    println!("== main plan ({:.1?}) ==", t0.elapsed());
    for row in &run.pipeline.report.rows {
        println!(
            "  {:<9} {:<8} {:<6} fsr={:<5} acc={:?}",
            row.condition.to_string(),
            row.variant.as_deref().unwrap_or("-"),
            row.attack,
            row.fsr,
            row.harmlessness.map(|h| (h.token_acc * 1000.0).round() / 1000.0),
        );
    }
    println!("-- robustness --");
    for row in &run.robustness.rows {
        if row.strategy.is_none() {
            println!(
                "  {:<9} {:<8} {:<22} fsr={}",
                row.condition.to_string(),
                row.variant.as_deref().unwrap_or("-"),
                row.attack,
                row.fsr
            );
        }
    }
    println!("-- merge curves (min/max fsr per strategy x condition) --");
    for strategy in ["task", "ties", "dare_task", "dare_ties"] {
        for cond in [Condition::Direct, Condition::Transfer] {
            let fsrs: Vec<f64> = run
                .robustness
                .rows
                .iter()
                .filter(|r| r.strategy.as_deref() == Some(strategy) && r.condition == cond)
                .map(|r| r.fsr)
                .collect();
            let min = fsrs.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = fsrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!("  {strategy:<10} {cond:<9} n={} min={min} max={max}", fsrs.len());
        }
    }
    println!("-- lambda sweep --");
    for row in &run.lambda_sweep.rows {
        println!(
            "  lambda={:<4} fsr={:<6} acc={:.3}",
            row.lambda.unwrap(),
            row.fsr,
            row.harmlessness.unwrap().token_acc
        );
    }

    let t1 = Instant::now();
    let rare = ExperimentPlan::default_rare_token();
    let rare_run = run_full(&rare).expect("rare pipeline");
    println!("== rare-token plan ({:.1?}) ==", t1.elapsed());
    for row in &rare_run.pipeline.report.rows {
        println!(
            "  {:<9} {:<8} {:<6} fsr={:<5} acc={:?}",
            row.condition.to_string(),
            row.variant.as_deref().unwrap_or("-"),
            row.attack,
            row.fsr,
            row.harmlessness.map(|h| (h.token_acc * 1000.0).round() / 1000.0),
        );
    }
    for row in &rare_run.robustness.rows {
        println!(
            "  {:<9} {:<8} {:<22} fsr={}",
            row.condition.to_string(),
            row.variant.as_deref().unwrap_or("-"),
            row.attack,
            row.fsr
        );
    }
    println!("total {:.1?}", t0.elapsed());
}
