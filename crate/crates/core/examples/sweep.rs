//! Runs one ablation sweep and prints mean AUROC per variant.
//!
//! ```text
//! cargo run --release -p ccl-core --example sweep -- losses 3 epochs=200 warmup_epochs=100
//! ```

use std::time::Instant;

use ccl::harness::{run_sweep, Sweep, TrainConfig};
use ccl::scoring::ScoreKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let sweep: Sweep = args.first().map_or("losses", String::as_str).parse()?;
    let seeds: u64 = args.get(1).map_or(Ok(3), |s| s.parse())?;
    let mut base = TrainConfig::default();
    base.apply_overrides(&args[2.min(args.len())..])?;
    let start = Instant::now();
    let result = run_sweep(&base, sweep, &(0..seeds).collect::<Vec<_>>())?;
    println!("cos\n{}", result.table(ScoreKind::Cos));
    println!("var\n{}", result.table(ScoreKind::Var));
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
