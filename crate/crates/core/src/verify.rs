//! Self-checks run by `sdit verify`: gradient checks, the WKV oracle, neuron
//! behaviour, reconstruction identities, skip wiring and the noise schedule.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, weighted_sum, CheckReport};
use crate::init;
use crate::model::{block_forward, reconstruction_apply, Block, ForwardProbe, ModelConfig, SditModel};
use crate::params::ParamStore;
use crate::rwkv::{channel_mixing, time_mixing, wkv_forward, wkv_scan, ChannelMix, TimeMix};
use crate::spiking::{lif_step, LifConfig, LifState};
use crate::tensor::{Tape, Tensor, Var, GATHER_ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Ops,
    Wkv,
    Lif,
    Recon,
    Skip,
    Schedule,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Ops,
        Group::Wkv,
        Group::Lif,
        Group::Recon,
        Group::Skip,
        Group::Schedule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Ops => "ops",
            Group::Wkv => "wkv",
            Group::Lif => "lif",
            Group::Recon => "recon",
            Group::Skip => "skip",
            Group::Schedule => "schedule",
        }
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown check group '{s}' (expected ops, wkv, lif, recon, skip, schedule)")))
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub group: Group,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<9} {:<28} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.group.name(),
            self.name,
            self.detail
        )
    }
}

/// Runs the selected groups (all when `only` is empty) in a fixed order.
pub fn run_checks(only: &[Group]) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for g in Group::ALL {
        if only.is_empty() || only.contains(&g) {
            match g {
                Group::Ops => ops(&mut out),
                Group::Wkv => wkv(&mut out),
                Group::Lif => lif(&mut out),
                Group::Recon => recon(&mut out),
                Group::Skip => skip(&mut out),
                Group::Schedule => schedule(&mut out),
            }
        }
    }
    out
}

fn push_report(out: &mut Vec<CheckResult>, group: Group, name: &str, rep: CheckReport) {
    out.push(CheckResult {
        group,
        name: name.to_string(),
        passed: rep.passed(),
        detail: rep.to_string(),
    });
}

fn push(out: &mut Vec<CheckResult>, group: Group, name: &str, passed: bool, detail: String) {
    out.push(CheckResult {
        group,
        name: name.to_string(),
        passed,
        detail,
    });
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    init::randn(&mut rng(seed), shape)
}

type OpFn = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Primitive ops with the input shapes they are checked at.
fn primitive_cases() -> Vec<(&'static str, OpFn, Vec<Vec<usize>>)> {
    vec![
        ("add (broadcast)", |_, v| weighted_sum(v[0].add(v[1])?, 1), vec![vec![2, 3], vec![3]]),
        ("sub", |_, v| weighted_sum(v[0].sub(v[1])?, 2), vec![vec![2, 3], vec![2, 3]]),
        ("mul (broadcast)", |_, v| weighted_sum(v[0].mul(v[1])?, 3), vec![vec![2, 3], vec![3]]),
        ("mul_const", |_, v| weighted_sum(v[0].mul_const(Tensor::from_fn(&[3], |i| i as f64 - 0.5))?, 4), vec![vec![2, 3]]),
        ("scale/offset", |_, v| weighted_sum(v[0].scale(-1.7)?.offset(0.3)?, 5), vec![vec![4]]),
        ("sigmoid", |_, v| weighted_sum(v[0].sigmoid()?, 6), vec![vec![5]]),
        ("silu", |_, v| weighted_sum(v[0].silu()?, 7), vec![vec![5]]),
        ("relu_squared", |_, v| weighted_sum(v[0].relu_squared()?, 8), vec![vec![5]]),
        ("exp", |_, v| weighted_sum(v[0].exp()?, 9), vec![vec![5]]),
        ("matmul (batched)", |_, v| weighted_sum(v[0].matmul(v[1])?, 10), vec![vec![2, 3, 4], vec![4, 2]]),
        ("transpose", |_, v| weighted_sum(v[0].transpose()?, 11), vec![vec![2, 3, 4]]),
        ("reshape", |_, v| weighted_sum(v[0].reshape(&[6, 2])?, 12), vec![vec![3, 4]]),
        ("concat", |_, v| weighted_sum(Var::concat(&[v[0], v[1]], 1)?, 13), vec![vec![2, 2, 3], vec![2, 1, 3]]),
        ("slice/split", |_, v| {
            let p = v[0].split(1, &[1, 2])?;
            weighted_sum(p[1].mul(p[1])?, 14)?.add(weighted_sum(p[0].slice(2, 1, 2)?, 15)?)
        }, vec![vec![2, 3, 3]]),
        ("gather", |_, v| {
            let idx: Rc<[usize]> = vec![3, 0, GATHER_ZERO, 3, 5, 1].into();
            weighted_sum(v[0].gather(&[2, 3], idx)?, 15)
        }, vec![vec![6]]),
        ("layer_norm", |_, v| weighted_sum(v[0].layer_norm(v[1], v[2], 1e-5)?, 16), vec![vec![3, 5], vec![5], vec![5]]),
        ("conv3x3", |_, v| weighted_sum(v[0].conv3x3(v[1], v[2])?, 17), vec![vec![2, 2, 4, 3], vec![3, 2, 3, 3], vec![3]]),
        ("sum", |_, v| v[0].mul(v[0])?.sum(), vec![vec![2, 3]]),
        ("mean", |_, v| v[0].exp()?.mean(), vec![vec![2, 3]]),
    ]
}

fn ops(out: &mut Vec<CheckResult>) {
    for (i, (name, f, shapes)) in primitive_cases().into_iter().enumerate() {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| randn(100 + 10 * i as u64 + j as u64, s))
            .collect();
        let rep = grad_check(f, &inputs, 1e-6, 1e-5);
        push_report(out, Group::Ops, name, rep);
    }
    push_report(out, Group::Ops, "spiking block (T=1)", block_gradcheck(1));
}

/// Full block at B=1, N=2, D=4 with the smooth spike used for checking.
pub fn block_gradcheck(steps: usize) -> CheckReport {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(7);
    let bp = Block::register(&mut store, "b", 4, 16, 2, &mut r);
    for id in [bp.recon_wd, bp.recon_wn] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, init::uniform(&mut r, &shape, 0.5)).expect("same shape");
    }
    let cfg = LifConfig::default().for_gradcheck();
    let mut inputs = vec![init::randn(&mut r, &[1, 2, 4]), init::randn(&mut r, &[2, 4])];
    inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
    grad_check(
        |_, v| {
            let b = crate::params::Binding::from_vars(v[2..].to_vec());
            let bv = bp.bind(&b);
            let mut lif = [LifState::new(), LifState::new()];
            let mut acc: Option<Var<'_, f64>> = None;
            for _ in 0..steps {
                let y = block_forward(v[0], None, None, &bv, v[1], &mut lif, &cfg, 1e-5, true)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => a.add(y)?,
                });
            }
            weighted_sum(acc.expect("steps >= 1"), 21)
        },
        &inputs,
        1e-6,
        1e-4,
    )
}

/// Direct double sum over the history.
pub fn wkv_double_sum(k: &Tensor<f64>, v: &Tensor<f64>, w_raw: &[f64], u: &[f64]) -> Tensor<f64> {
    let (l, d) = (k.shape()[1], k.shape()[2]);
    Tensor::from_fn(k.shape(), |idx| {
        let (bi, t, c) = (idx / (l * d), (idx / d) % l, idx % d);
        let at = |i: usize| bi * l * d + i * d + c;
        let w = (1.0 + w_raw[c].exp()).ln();
        let bonus = (u[c] + k.data()[at(t)]).exp();
        let (mut num, mut den) = (bonus * v.data()[at(t)], bonus);
        for i in 0..t {
            let e = (-((t - 1 - i) as f64) * w + k.data()[at(i)]).exp();
            num += e * v.data()[at(i)];
            den += e;
        }
        num / den
    })
}

fn wkv(out: &mut Vec<CheckResult>) {
    let mut worst: f64 = 0.0;
    let mut convex = true;
    let mut causal = true;
    for case in 0..100u64 {
        let mut r = rng(1000 + case);
        let l = 1 + (case as usize * 7) % 16;
        let d = 1 + (case as usize * 3) % 8;
        let k = init::uniform::<f64>(&mut r, &[1, l, d], 3.0);
        let v = init::uniform::<f64>(&mut r, &[1, l, d], 2.0);
        let w = init::uniform::<f64>(&mut r, &[d], 2.0);
        let u = init::uniform::<f64>(&mut r, &[d], 1.0);
        let Ok(got) = wkv_forward(&k, &v, &w, &u) else {
            worst = f64::INFINITY;
            continue;
        };
        let want = wkv_double_sum(&k, &v, w.data(), u.data());
        for (a, b) in got.data().iter().zip(want.data()) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-300));
        }
        for c in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for t in 0..l {
                lo = lo.min(v.data()[t * d + c]);
                hi = hi.max(v.data()[t * d + c]);
                let y = got.data()[t * d + c];
                convex &= y >= lo - 1e-12 && y <= hi + 1e-12;
            }
        }
        let cut = case as usize % l;
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for i in (cut + 1) * d..l * d {
            k2.data_mut()[i] += 0.9;
            v2.data_mut()[i] -= 1.3;
        }
        if let Ok(o2) = wkv_forward(&k2, &v2, &w, &u) {
            causal &= got.data()[..(cut + 1) * d] == o2.data()[..(cut + 1) * d];
        } else {
            causal = false;
        }
    }
    push(out, Group::Wkv, "scan vs double sum", worst < 1e-10, format!("max rel err {worst:.3e} (tol 1e-10) over 100 cases"));
    push(out, Group::Wkv, "convex combination", convex, "100 cases".into());
    push(out, Group::Wkv, "causality", causal, "future perturbation, bit-exact".into());

    let mut r = rng(2000);
    let inputs = vec![
        init::uniform::<f64>(&mut r, &[2, 6, 3], 3.0),
        init::uniform(&mut r, &[2, 6, 3], 2.0),
        init::uniform(&mut r, &[3], 2.0),
        init::uniform(&mut r, &[3], 1.0),
    ];
    let rep = grad_check(|_, x| weighted_sum(wkv_scan(x[0], x[1], x[2], x[3])?, 31), &inputs, 1e-6, 1e-5);
    push_report(out, Group::Wkv, "wkv gradient", rep);

    let mut store = ParamStore::<f64>::new();
    let tm = TimeMix::register(&mut store, "tm", 4, &mut r);
    let cm = ChannelMix::register(&mut store, "cm", 4, 16, &mut r);
    for id in [tm.mix_r, tm.mix_k, tm.mix_v, cm.mix_r, cm.mix_k] {
        store.set(id, init::uniform(&mut r, &[4], 1.0)).expect("same shape");
    }
    let mut inputs = vec![init::randn(&mut r, &[1, 5, 4])];
    inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
    let rep = grad_check(
        |_, v| {
            let b = crate::params::Binding::from_vars(v[1..].to_vec());
            let y = time_mixing(v[0], &tm.bind(&b))?;
            weighted_sum(channel_mixing(y, &cm.bind(&b))?, 32)
        },
        &inputs,
        1e-6,
        1e-4,
    );
    push_report(out, Group::Wkv, "time+channel mixing grad", rep);
}

fn lif(out: &mut Vec<CheckResult>) {
    let cfg = LifConfig::default();
    let tape = Tape::<f64>::new();
    let mut binary = true;
    let mut st = LifState::new();
    let mut r = rng(3000);
    for _ in 0..8 {
        let x = tape.constant(init::normal(&mut r, &[4, 16], 2.0));
        match lif_step(x, &mut st, &cfg) {
            Ok(s) => binary &= s.value().data().iter().all(|&v| v == 0.0 || v == 1.0),
            Err(_) => binary = false,
        }
    }
    push(out, Group::Lif, "spikes are binary", binary, "8 steps of N(0, 4) input".into());

    let mut silent = true;
    let mut st = LifState::new();
    for _ in 0..8 {
        let x = tape.constant(Tensor::zeros(&[3, 5]));
        silent &= lif_step(x, &mut st, &cfg).map_or(false, |s| s.value().data().iter().all(|&v| v == 0.0));
    }
    push(out, Group::Lif, "zero input stays silent", silent, "T = 8".into());

    let trace = |xs: &[f64]| -> Vec<(f64, f64)> {
        let mut st = LifState::new();
        xs.iter()
            .map(|&x| {
                let s = lif_step(tape.constant(Tensor::scalar(x)), &mut st, &cfg).expect("finite");
                let v = st.potential().expect("stepped").value().data()[0];
                (s.value().data()[0], v)
            })
            .collect()
    };
    let a = trace(&[2.0]);
    let b = trace(&[0.8, 0.8]);
    let ok = a == [(1.0, 0.0)]
        && b.len() == 2
        && b[0].0 == 0.0
        && (b[0].1 - 0.4).abs() < 1e-12
        && b[1].0 == 0.0
        && (b[1].1 - 0.6).abs() < 1e-12;
    push(out, Group::Lif, "hand traces", ok, format!("x=2 -> {a:?}; x=0.8,0.8 -> {b:?}"));
}

fn recon(out: &mut Vec<CheckResult>) {
    let tape = Tape::<f64>::new();
    let x = tape.constant(randn(4000, &[2, 6, 5]));
    let wd = tape.constant(randn(4001, &[5, 3]));
    let wn = tape.constant(Tensor::zeros(&[3, 5]));
    let split = x.slice(1, 0, 3).map(|s| s.value());
    let y = reconstruction_apply(x, wd, wn, true).map(|y| y.value());
    let ok = matches!((&split, &y), (Ok(a), Ok(b)) if a == b);
    push(out, Group::Recon, "W_N = 0 is a plain split", ok, "bit-exact".into());

    let run = || -> Result<bool> {
        let cfg = ModelConfig::desk();
        let mut full = SditModel::<f64>::new(cfg.clone(), &mut rng(4002))?;
        for bp in full.blocks.clone() {
            for id in [bp.recon_wd, bp.recon_wn] {
                let shape = full.params.get(id).shape().to_vec();
                full.params.set(id, Tensor::zeros(&shape))?;
            }
        }
        let mut ablated = full.clone();
        ablated.disable_reconstruction()?;
        let x = randn(4003, &[2, 1, 8, 8]);
        Ok(full.predict(&x, &[4, 31])? == ablated.predict(&x, &[4, 31])?)
    };
    let ok = run().unwrap_or(false);
    push(out, Group::Recon, "ablation equals zeroed model", ok, "bit-exact".into());
}

/// Which output block's skip input changes when input block `i`'s skip copy
/// is perturbed, for every `i`. Returns `paired[i] = j` or `None` when zero
/// or several outputs changed.
pub fn skip_pairing(blocks: usize, seed: u64) -> Result<Vec<Option<usize>>> {
    let cfg = ModelConfig {
        image_size: 4,
        hidden_dim: 8,
        num_input_blocks: blocks,
        num_output_blocks: blocks,
        ..ModelConfig::desk()
    };
    let model = SditModel::<f64>::new(cfg.clone(), &mut rng(seed))?;
    let x = randn(seed + 1, &[1, 1, 4, 4]);
    let run = |perturb| -> Result<Vec<Vec<Tensor<f64>>>> {
        let tape = Tape::new();
        let b = model.params.bind(&tape);
        let mut probe = ForwardProbe {
            perturb_skip: perturb,
            ..Default::default()
        };
        model.forward_probed(&b, tape.constant(x.clone()), &[3], &mut model.new_state(), Some(&mut probe))?;
        Ok(probe.skips)
    };
    let base = run(None)?;
    (0..blocks)
        .map(|i| {
            let marked = run(Some((i, 0.5)))?;
            let changed: Vec<usize> = (0..blocks)
                .filter(|&j| (0..cfg.spike_steps).any(|s| base[s][j] != marked[s][j]))
                .collect();
            Ok(if changed.len() == 1 { Some(changed[0]) } else { None })
        })
        .collect()
}

fn skip(out: &mut Vec<CheckResult>) {
    for k in [1, 2, 4] {
        let res = skip_pairing(k, 5000 + k as u64);
        let ok = matches!(&res, Ok(p) if p.iter().enumerate().all(|(i, j)| *j == Some(k - 1 - i)));
        let detail = match res {
            Ok(p) => format!("input -> output: {p:?}"),
            Err(e) => e.to_string(),
        };
        push(out, Group::Skip, &format!("pairing K={k}"), ok, detail);
    }
}

/// Sample variance of `q_sample(0, t, eps)` over `draws` draws.
pub fn q_sample_variance(sched: &NoiseSchedule, t: usize, draws: usize, seed: u64) -> Result<f64> {
    let eps = init::randn::<f64>(&mut rng(seed), &[draws]);
    let x = sched.q_sample(&Tensor::zeros(&[draws]), t, &eps)?;
    let m = x.mean();
    Ok(x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (draws - 1) as f64)
}

fn schedule(out: &mut Vec<CheckResult>) {
    for steps in [50, 1000] {
        let ok = NoiseSchedule::linear_for(steps).is_ok_and(|s| {
            s.alpha_bars.windows(2).all(|w| w[1] < w[0]) && s.alpha_bars.iter().all(|&a| a > 0.0 && a < 1.0)
        });
        push(out, Group::Schedule, &format!("alpha_bar monotone (T={steps})"), ok, "strictly decreasing in (0, 1)".into());
    }
    let sched = NoiseSchedule::linear_for(1000).expect("valid defaults");
    let mut worst: f64 = 0.0;
    for (i, t) in [10, 500, 999].into_iter().enumerate() {
        let want = 1.0 - sched.alpha_bars[t];
        let got = q_sample_variance(&sched, t, 10_000, 6000 + i as u64).unwrap_or(f64::INFINITY);
        worst = worst.max((got - want).abs() / want);
    }
    push(out, Group::Schedule, "q_sample variance", worst <= 0.03, format!("max rel dev {worst:.4} (tol 0.03), 10k draws at t=10,500,999"));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let res = run_checks(&[]);
        for r in &res {
            assert!(r.passed, "{r}");
        }
        assert!(res.len() > 25);
    }

    #[test]
    fn filter_selects_one_group() {
        let res = run_checks(&[Group::Skip]);
        assert_eq!(res.len(), 3);
        assert!(res.iter().all(|r| r.group == Group::Skip));
        assert!("nope".parse::<Group>().is_err());
    }
}
