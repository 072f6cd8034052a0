//! Runs one of the built-in ablation grids with short runs and prints the
//! summary table.
//!
//! Usage: `ablation [tab2|tab3|tab4] [ITERS]`.

use ktda::config::RunConfig;
use ktda::experiment::{builtin_grid, builtin_grid_names, run_grid, SummaryRow};

fn main() -> ktda::Result<()> {
    let mut args = std::env::args().skip(1);
    let grid = args.next().unwrap_or_else(|| "tab4".into());
    let iters: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let Some(runs) = builtin_grid(&grid) else {
        eprintln!("unknown grid `{grid}`; choose one of {:?}", builtin_grid_names());
        std::process::exit(1);
    };

    let mut base = RunConfig::default();
    base.data.num_samples = 10;
    base.data.size = 32;
    base.train.optim.max_iters = iters;
    base.train.optim.warmup_iters = (iters / 20).max(1);
    base.train.eval_every = 0;

    let out = std::env::temp_dir().join(format!("ktda-ablation-{grid}"));
    println!("{}", SummaryRow::CSV_HEADER);
    run_grid(&base, &runs, &out, &mut |row| println!("{}", row.csv_row()))?;
    println!("summary written to {}", out.join("summary.csv").display());
    Ok(())
}
