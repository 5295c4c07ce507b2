// Drives one layer of LIF neurons with constant inputs for eight spiking
// steps and prints membrane potential and spike trains.

use sdit::spiking::{lif_step, LifConfig, LifState};
use sdit::{Result, Tape, Tensor};

pub fn run_example() -> Result<Vec<Vec<f64>>> {
    let cfg = LifConfig::default();
    let inputs = [0.0, 0.8, 1.5, 3.0];
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[inputs.len()], &inputs)?);
    let mut state = LifState::new();
    let mut trains = vec![Vec::new(); inputs.len()];
    println!("tau {} threshold {} reset {}", cfg.tau, cfg.v_threshold, cfg.v_reset);
    for step in 0..8 {
        let s = lif_step(x, &mut state, &cfg)?;
        let v = state.potential().expect("potential after a step").value();
        let row: Vec<String> = v.data().iter().map(|p| format!("{p:6.3}")).collect();
        println!("t={step}  v=[{}]  spikes={:?}", row.join(" "), s.value().data());
        for (tr, &sp) in trains.iter_mut().zip(s.value().data()) {
            tr.push(sp);
        }
    }
    for (x, tr) in inputs.iter().zip(&trains) {
        println!("input {x:.1}: {} spikes", tr.iter().sum::<f64>());
    }
    Ok(trains)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
