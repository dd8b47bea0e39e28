//! A small resumable experiment matrix: runs it twice into a scratch store
//! (the second pass skips every cell) and prints tidy plot data.

use kai0::harness::matrix::{run_matrix, MatrixConfig, ResultStore, STORE_FILE};
use kai0::harness::plot::plotdata_with;
use kai0::Result;

const CONFIG: &str = include_str!("../../../configs/smoke_matrix.yaml");

fn main() -> Result<()> {
    let cfg = MatrixConfig::from_str_with_ext(CONFIG, "yaml")?;
    let dir = tempfile::tempdir().expect("tempdir");
    let store = ResultStore::new(dir.path().join(STORE_FILE));
    let first = run_matrix(&cfg, &store)?;
    let second = run_matrix(&cfg, &store)?;
    println!(
        "first pass {} new rows; second pass {} new, {} skipped; hash {}",
        first.new_rows,
        second.new_rows,
        second.skipped,
        store.hash()?
    );
    print!("{}", plotdata_with(&store.rows()?, "control", &cfg)?);
    Ok(())
}
