//! Runs the gradient-check suite and prints the per-op table.
//!
//! cargo run --release -p pcnn --example gradcheck_suite -- [h=STEP] [op ...]

fn main() -> pcnn::Result<()> {
    let mut opts = pcnn::gradcheck::SuiteOptions::default();
    for arg in std::env::args().skip(1) {
        match arg.strip_prefix("h=") {
            Some(h) => opts.h = h.parse().expect("step must be a number"),
            None => opts.ops.push(arg),
        }
    }
    let start = std::time::Instant::now();
    let report = pcnn::gradcheck::run_suite(&opts)?;
    print!("{}", report.table());
    for op in report.ops.iter().filter(|o| !o.passed()) {
        println!("{}: seed {} {:?}", op.name, op.worst_seed, op.worst);
    }
    println!("passed={} in {:.1}s", report.passed(), start.elapsed().as_secs_f64());
    Ok(())
}
