//! Empirical behaviour of a single gate.
//!
//! With logistic noise added to the logit, a training-mode gate opens with
//! probability `sigmoid(α)`. With the noise removed it opens exactly when the
//! inference-mode step function does.
//!
//! ```text
//! cargo run --release --example gate_probability
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use timegate::autodiff::sigmoid;
use timegate::gating::{sample_gate_noise, GateDecision};

pub fn run_example() -> timegate::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = 100_000;
    println!("{:>6} {:>10} {:>10} {:>10}", "alpha", "sigmoid", "open freq", "mean value");
    for alpha in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let (mut open, mut value) = (0usize, 0.0);
        for _ in 0..draws {
            let d = GateDecision::train(alpha, sample_gate_noise(&mut rng));
            open += usize::from(d.open);
            value += d.value;
        }
        println!(
            "{alpha:>6.1} {:>10.4} {:>10.4} {:>10.4}",
            sigmoid(alpha),
            open as f64 / draws as f64,
            value / draws as f64
        );
    }

    println!("\nnoise-free training gate against the inference gate:");
    for alpha in [-3.0, -1e-9, 0.0, 1e-9, 0.4, 3.0] {
        let train = GateDecision::train(alpha, 0.0);
        let test = GateDecision::test(alpha);
        println!(
            "  alpha {alpha:>7.1e}: train open {:<5} value {:.4} | test open {:<5} value {}",
            train.open, train.value, test.open, test.value
        );
        assert_eq!(train.open, test.open);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> timegate::Result<()> {
    run_example()
}
