//! Chance that random patch masking hides an object entirely, exact versus
//! Monte Carlo, on a 14x14 grid at ratio 0.75.

use maskris::masking::{exact_full_mask_prob, mc_full_mask_prob};
use maskris::RngStream;

fn main() -> maskris::Result<()> {
    let (cells, masked) = (196, 147);
    println!("{:>6} {:>12} {:>12} {:>10}", "cells", "exact", "monte carlo", "std err");
    for k in [1, 2, 4, 8, 16] {
        let exact = exact_full_mask_prob(cells, masked, k)?;
        let mut rng = RngStream::new(11, format!("example/mc/{k}"));
        let mc = mc_full_mask_prob(cells, masked, k, 200_000, &mut rng)?;
        println!("{k:>6} {exact:>12.6} {:>12.6} {:>10.6}", mc.p, mc.std_err);
    }
    Ok(())
}
