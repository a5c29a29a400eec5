//! Trains the context-conditioned selector jointly with the classifier on a
//! synthetic split, then evaluates it with the gates deciding the
//! budget and at fixed top-k budgets.
//!
//! Without `--full` the run is reduced to finish in seconds; with it the
//! default desk-scale data and schedule are used.
//!
//! ```text
//! cargo run --release --example train_end_to_end -- --full
//! ```

use timegate::harness::{evaluate, load_or_generate, train, ExperimentConfig, TrainMode};
use timegate::selector::Budget;

pub fn run_example() -> timegate::Result<()> {
    run(false)
}

fn run(full: bool) -> timegate::Result<()> {
    let mut config = ExperimentConfig {
        seed: 3,
        mode: TrainMode::E2e,
        ..ExperimentConfig::default()
    };
    if !full {
        config.data.n_train = 1000;
        config.data.n_test = 200;
        config.train.epochs = 25;
    }

    let data = load_or_generate(&config)?;
    let outcome = train(&config, &data.train)?;
    for e in outcome.history.iter().step_by(3) {
        println!(
            "epoch {:>2}  loss {:.4}  train acc {:.3}  open ratio {:.3}",
            e.epoch,
            e.loss,
            e.accuracy,
            e.mean_ratio.unwrap_or(f64::NAN)
        );
    }

    let budgets = [Budget::GateCount, Budget::TopK(2), Budget::TopK(4), Budget::TopK(8)];
    println!("\nbudget  accuracy  timesteps  heavy runs  GFLOPs");
    for r in evaluate(&outcome.model, &data.test, &budgets)? {
        println!(
            "{:<6}  {:>8.3}  {:>9.2}  {:>10}  {:.6}",
            r.budget, r.metric, r.mean_selected, r.heavy_invocations, r.cost.total_gflops
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> timegate::Result<()> {
    run(std::env::args().any(|a| a == "--full"))
}
