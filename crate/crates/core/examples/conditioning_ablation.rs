//! Context-conditioned gating against frame-conditioned gating and the
//! segment-only saliency sampler, at a matched timestep budget.
//!
//! The context model keeps whatever its gates open; the other two keep their
//! top `k` timesteps, with `k` the context model's mean gate count.
//!
//! Without `--full` the run is reduced to finish in seconds and the trend
//! may not show; with it the default desk-scale data and schedule are used.
//!
//! ```text
//! cargo run --release --example conditioning_ablation -- --full
//! ```

use timegate::harness::{evaluate, gating_report, load_or_generate, train, ExperimentConfig, SelectionMode, TrainMode};

fn config(mode: TrainMode, full: bool) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed: 1,
        mode,
        ..ExperimentConfig::default()
    };
    if !full {
        c.data.n_train = 1000;
        c.data.n_test = 200;
        c.train.epochs = 25;
    }
    c
}

pub fn run_example() -> timegate::Result<()> {
    run(false)
}

fn run(full: bool) -> timegate::Result<()> {
    let context = config(TrainMode::E2e, full);
    let data = load_or_generate(&context)?;
    let model = train(&context, &data.train)?.model;
    let gated = evaluate(&model, &data.test, &context.budgets())?.remove(0);
    let ratio_var = gating_report(&model, &data.test)?.ratio_variance;
    let k = gated.mean_selected.round().max(1.0) as usize;
    println!("context            gate  accuracy {:.3} at {:.2} timesteps, ratio variance {ratio_var:.5}", gated.metric, gated.mean_selected);

    for mode in [TrainMode::FrameConditioned, TrainMode::Scsampler] {
        let mut c = config(mode, full);
        c.train.sampler_k = k;
        c.eval.selection = SelectionMode::Topk;
        c.eval.budgets = vec![k];
        let model = train(&c, &data.train)?.model;
        let r = evaluate(&model, &data.test, &c.budgets())?.remove(0);
        let var = gating_report(&model, &data.test)?.ratio_variance;
        println!("{:<18} top{k}  accuracy {:.3}, ratio variance {var:.5}", mode.name(), r.metric);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> timegate::Result<()> {
    run(std::env::args().any(|a| a == "--full"))
}
