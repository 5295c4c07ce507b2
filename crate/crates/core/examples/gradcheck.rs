// Compares tape gradients with central finite differences for the WKV scan
// and for a whole spiking block unrolled over two steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdit::gradcheck::{grad_check, weighted_sum};
use sdit::rwkv::wkv_scan;
use sdit::verify::block_gradcheck;
use sdit::{init, Result};

pub fn run_example() -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        init::randn::<f64>(&mut rng, &[1, 5, 3]),
        init::randn::<f64>(&mut rng, &[1, 5, 3]),
        init::randn::<f64>(&mut rng, &[3]),
        init::randn::<f64>(&mut rng, &[3]),
    ];
    let wkv = grad_check(
        |_, v| weighted_sum(wkv_scan(v[0], v[1], v[2], v[3])?, 1),
        &inputs,
        1e-6,
        1e-5,
    );
    println!("wkv scan: {wkv}");

    let block = block_gradcheck(2);
    println!("spiking block, 2 steps: {block}");
    Ok((wkv.max_rel_err, block.max_rel_err))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
