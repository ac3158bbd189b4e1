//! Exact-scan throughput at D=128.
//!
//!     cargo run --release -p mmrank --example scan_throughput -- [threads]

use mmrank::throughput::measure_scan;

fn main() {
    let threads = std::env::args()
        .nth(1)
        .map_or_else(num_cpus, |s| s.parse().expect("thread count"));
    let r = measure_scan(200_000, 128, 20, 10, threads, 7).expect("scan");
    println!("{}", serde_json::to_string_pretty(&r).unwrap());
    println!(
        "single-thread: {:.3e} dot products/s; {} threads: {:.2}x speedup; bit-identical: {}",
        r.dots_per_sec_single, r.threads, r.speedup, r.bit_identical
    );
}

fn num_cpus() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
