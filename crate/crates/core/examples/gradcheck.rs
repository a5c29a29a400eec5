//! Finite-difference check of every differentiable operation and of every
//! parameter of small models through their full training losses.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use std::time::Instant;

use timegate::harness::{full_suite, max_rel_err, GRADCHECK_TOLERANCE};

pub fn run_example() -> timegate::Result<()> {
    let start = Instant::now();
    let cases = full_suite(7)?;
    for c in &cases {
        let flag = if c.max_rel_err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<52} {:>10.2e} {:>5} {:>3}  {flag}", c.name, c.max_rel_err, c.checked, c.excluded);
    }
    println!(
        "\n{} cases, max relative error {:.2e}, {:.2}s",
        cases.len(),
        max_rel_err(&cases),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> timegate::Result<()> {
    run_example()
}
