//! Regenerates the built-in weight table over the default grid.
//!
//! `cargo run --release -p rearrange-core --example gen_weights > crates/core/data/default_weights.csv`

use rearrange_core::weights::{generate_table, DEFAULT_ALPHAS, DEFAULT_QS, DEFAULT_RHOS};

fn main() {
    let table = generate_table(&DEFAULT_ALPHAS, &DEFAULT_RHOS, &DEFAULT_QS).expect("weight table");
    print!("{}", table.to_csv());
}
