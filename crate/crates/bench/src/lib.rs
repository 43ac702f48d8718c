//! Shared setup for the benchmarks: the shipped experiment configuration
//! with the desk-scale dataset swapped in small.

use conas_core::engine::{parse_run_config, RunConfig};

/// The repository's `experiment.conf`, shrunk so a single benchmark
/// iteration stays in the millisecond range.
pub fn bench_config() -> RunConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../experiment.conf");
    let text = std::fs::read_to_string(path).expect("experiment.conf at repo root");
    let mut config = parse_run_config(&text).expect("shipped config parses");
    config.generations = 2;
    config.individuals = 4;
    config.workers = 1;
    config.dataset.train = 200;
    config.dataset.validation = 50;
    config
}
