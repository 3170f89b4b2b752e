//! Fixtures shared by the benchmarks.

use labrun::{Payload, Resource, Scalar, TaskSpec};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// A scheduling instance with `n` tasks over a small mixed pool.
pub fn scheduling_instance(seed: u64, n: usize) -> (Vec<TaskSpec>, Vec<Resource>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let resources = vec![
        Resource::new("lh-1", "liquid_handler", 1),
        Resource::new("pr-1", "plate_reader", 1),
        Resource::new("pr-2", "plate_reader", 1),
        Resource::new("gpu-1", "gpu", 2),
        Resource::new("ops", "personnel", 2),
    ];
    let classes = ["liquid_handler", "plate_reader", "gpu", "personnel"];
    let tasks = (0..n)
        .map(|i| {
            let t = TaskSpec::new(
                format!("t{i:04}"),
                rng.random_range(0..600),
                rng.random_range(5..120),
            )
            .requiring(classes[rng.random_range(0..classes.len())], 1);
            if rng.random_bool(0.3) {
                t.keyed("absorbance-450")
            } else {
                t
            }
        })
        .collect();
    (tasks, resources)
}

/// A step-completion payload of the usual size.
pub fn step_payload(i: i64) -> Payload {
    [
        ("step_id".to_string(), Scalar::Str(format!("step-{i}"))),
        ("status".to_string(), Scalar::Str("Succeeded".into())),
        ("result.signal".to_string(), Scalar::Int(i * 37 % 65536)),
        ("result.well".to_string(), Scalar::Str("B7".into())),
        ("attempt".to_string(), Scalar::Int(1)),
    ]
    .into_iter()
    .collect()
}
