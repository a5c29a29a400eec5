//! Per-class selection ratios and temporal gate profiles of a trained
//! selector, printed next to each class's evidence placement.
//!
//! Without `--full` the run is reduced to finish in seconds; with it the
//! default desk-scale data and schedule are used.
//!
//! ```text
//! cargo run --release --example gating_report -- --full
//! ```

use timegate::harness::{gating_report, load_or_generate, train, ExperimentConfig};

pub fn run_example() -> timegate::Result<()> {
    run(false)
}

fn run(full: bool) -> timegate::Result<()> {
    let mut config = ExperimentConfig { seed: 2, ..ExperimentConfig::default() };
    if !full {
        config.data.n_train = 1000;
        config.data.n_test = 200;
        config.train.epochs = 25;
    }
    let data = load_or_generate(&config)?;
    let model = train(&config, &data.train)?.model;
    let report = gating_report(&model, &data.test)?;

    let t = model.dims.timesteps;
    println!("class  placement  ratio  peak  profile");
    for (c, recipe) in data.test.spec.class_recipes.iter().enumerate() {
        let bars: String = report.profiles[c]
            .iter()
            .map(|&v| [' ', '.', ':', '+', '#'][(v * 4.0).round() as usize])
            .collect();
        println!(
            "{c:>5}  {:<9}  {:.3}  {:>2}/{t}  |{bars}|",
            format!("{:?}", recipe.placement),
            report.ratios[c],
            report.peak(c)
        );
    }
    println!("\nacross-class ratio variance {:.6}", report.ratio_variance);
    Ok(())
}

#[allow(dead_code)]
fn main() -> timegate::Result<()> {
    run(std::env::args().any(|a| a == "--full"))
}
