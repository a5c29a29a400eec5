//! Generates a small synthetic split, inspects the class recipes and shows a
//! shared prototype whose relevance flips with the video's label.
//!
//! ```text
//! cargo run --release --example generate_data
//! ```

use timegate::synthdata::{generate_dataset, relevance_oracle, ActivitySpec, Dataset};

pub fn run_example() -> timegate::Result<()> {
    let spec = ActivitySpec::default();
    let data = generate_dataset(&spec, 200, 50, 42)?;
    println!(
        "{} classes, {} timesteps of {}x{} frames, {} train / {} test videos",
        spec.num_classes,
        spec.timesteps,
        spec.frames_per_timestep,
        spec.raw_dim,
        data.train.videos.len(),
        data.test.videos.len()
    );

    let mut counts = vec![0usize; spec.num_classes];
    for v in &data.train.videos {
        for &c in v.labels.classes() {
            counts[c] += 1;
        }
    }
    println!("\nclass  own  shared   evidence  placement   train videos");
    for (c, r) in spec.class_recipes.iter().enumerate() {
        println!(
            "{c:>5}  {:?}  {:?}  {:>8}  {:<10}  {:>5}",
            r.discriminative, r.shared, r.evidence_count, format!("{:?}", r.placement), counts[c]
        );
    }

    let v = &data.train.videos[0];
    let relevant: Vec<usize> = (0..v.timesteps()).filter(|&t| v.relevance[t]).collect();
    println!("\nvideo 0 labels {:?}, prototypes {:?}", v.labels, v.prototypes);
    println!("relevant timesteps {relevant:?}");

    // The same timestep, judged against a class whose recipe lacks the
    // prototype, is irrelevant.
    let own = v.labels.classes()[0];
    let shared = spec.class_recipes[own].shared[0];
    if let Some(t) = v.prototypes.iter().position(|&p| p == shared) {
        let other = (0..spec.num_classes)
            .find(|&c| !spec.class_recipes[c].shared.contains(&shared))
            .expect("some class lacks the prototype");
        println!(
            "timestep {t} (shared prototype {shared}): relevant to class {own}: {}, to class {other}: {}",
            relevance_oracle(&spec, v, own)?[t],
            relevance_oracle(&spec, v, other)?[t]
        );
    }

    let path = std::env::temp_dir().join(format!("timegate-example-{}.tgds", std::process::id()));
    data.train.save(&path)?;
    let back = Dataset::load(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    std::fs::remove_file(&path)?;
    println!("\nsaved and reloaded {bytes} bytes; identical: {}", back == data.train);
    Ok(())
}

#[allow(dead_code)]
fn main() -> timegate::Result<()> {
    run_example()
}
