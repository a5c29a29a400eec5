//! Reproduces the published pipeline budgets from per-timestep rates and
//! prints the measured rates of the desk-scale models.
//!
//! ```text
//! cargo run --release --example cost_table
//! ```

use timegate::costmodel::{pipeline_cost, reference_cost_table, CostRegistry};
use timegate::harness::{DataDims, ExperimentConfig, Model, TrainMode, HEAVY_TAG};
use timegate::synthdata::ActivitySpec;

pub fn run_example() -> timegate::Result<()> {
    let registry = CostRegistry::default();
    println!("{:<16} {:>7} {:>7} {:>8} {:>8} {:>8} {:>9}", "config", "light", "heavy", "light G", "heavy G", "total G", "published");
    for row in reference_cost_table() {
        let r = pipeline_cost(row.n_light, row.n_heavy, row.light_model, row.heavy_model, &registry)?;
        println!(
            "{:<16} {:>7} {:>7} {:>8.1} {:>8.1} {:>8.1} {:>9.1}",
            row.config, row.n_light, row.n_heavy, r.light_gflops, r.heavy_gflops, r.total_rounded(), row.total_gflops
        );
    }

    let dims = DataDims::of(&ActivitySpec::default());
    println!("\ndesk-scale models over {} timesteps:", dims.timesteps);
    for mode in [TrainMode::E2e, TrainMode::Scsampler] {
        let config = ExperimentConfig { mode, ..ExperimentConfig::default() };
        let model = Model::new(&config, dims)?;
        let registry = model.cost_registry();
        let (light, n_light) = model.light_cost();
        for k in [4.0, 16.0] {
            let r = pipeline_cost(n_light, k, light, HEAVY_TAG, &registry)?;
            println!(
                "  {:<10} {k:>4} heavy timesteps: light {:.6} + heavy {:.6} = {:.6} GFLOPs",
                mode.name(),
                r.light_gflops,
                r.heavy_gflops,
                r.total_gflops
            );
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> timegate::Result<()> {
    run_example()
}
