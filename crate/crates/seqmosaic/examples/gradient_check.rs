//! Verify every analytic gradient against central finite differences.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

fn main() -> seqmosaic::Result<()> {
    let report = seqmosaic::gradcheck::run_suite(1)?;
    print!("{}", report.summary());
    std::process::exit(if report.passed { 0 } else { 3 });
}
