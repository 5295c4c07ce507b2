// Prints parameter and multiply-accumulate counts for every preset.

use sdit::model::{count_params_macs, Counts, ModelConfig};
use sdit::Result;

pub fn run_example() -> Result<Vec<(String, Counts)>> {
    let mut out = Vec::new();
    println!("{:<6} {:>12} {:>16} {:>16}", "preset", "params", "MACs/step", "MACs total");
    for name in ["desk", "mnist", "cifar"] {
        let cfg = ModelConfig::preset(name)?;
        let c = count_params_macs(&cfg);
        println!(
            "{name:<6} {:>12} {:>16} {:>16}",
            c.params, c.macs_per_spike_step, c.macs_total
        );
        out.push((name.to_string(), c));
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
