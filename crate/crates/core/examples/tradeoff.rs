//! Computation/accuracy tradeoff: the published I3D curve, then a desk-scale
//! curve from one trained model evaluated at several top-k budgets next to
//! the uniform sampler.
//!
//! ```text
//! cargo run --release --example tradeoff
//! ```

use timegate::costmodel::{reference_i3d_tradeoff, tradeoff_csv, tradeoff_from_reports, CostRegistry};
use timegate::harness::{evaluate, load_or_generate, train, ExperimentConfig, TrainMode};
use timegate::selector::Budget;

pub fn run_example() -> timegate::Result<()> {
    print!("{}", tradeoff_csv(&reference_i3d_tradeoff(&CostRegistry::default())?));

    let budgets: Vec<Budget> = [1, 2, 4, 8, 16].into_iter().map(Budget::TopK).collect();
    let mut items = Vec::new();
    for mode in [TrainMode::E2e, TrainMode::Uniform] {
        let mut c = ExperimentConfig {
            seed: 5,
            mode,
            ..ExperimentConfig::default()
        };
        c.data.n_train = 300;
        c.data.n_test = 100;
        c.train.epochs = 8;
        let data = load_or_generate(&c)?;
        let model = train(&c, &data.train)?.model;
        for r in evaluate(&model, &data.test, &budgets)? {
            items.push((r.mode, r.cost, r.metric));
        }
    }
    print!("\n{}", tradeoff_csv(&tradeoff_from_reports(&items)?));
    Ok(())
}

#[allow(dead_code)]
fn main() -> timegate::Result<()> {
    run_example()
}
