//! Fast property suites behind `masp selftest`. Each check is a smaller
//! sample of a property the test suite pins down at full size.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assign::{brute_force_min, cost_matrix, hungarian, matcher_reward, AssignmentOutcome, CostMatrix};
use crate::baselines::ScriptedConfig;
use crate::cae::{group_count, make_groups, ExecutorConfig, GraphExecutor, NODE_FEATURES};
use crate::env::{reset, EnvConfig};
use crate::geom::Vec2;
use crate::harness::{evaluate, EvalProtocol};
use crate::mgm::{build_match_obs, AttentionMatcher, MatcherConfig};
use crate::policy::ScriptedController;
use crate::tensor::{gradcheck, GruCell, Linear, ParamStore, Tape};
use crate::train::gae;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_costs(n: usize, rng: &mut ChaCha8Rng) -> CostMatrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
    CostMatrix::from_rows(&rows).expect("finite square rows")
}

fn hungarian_oracle(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for n in 2..=6 {
        for _ in 0..100 {
            let c = random_costs(n, rng);
            let (_, total) = hungarian(&c);
            let best = brute_force_min(&c);
            ensure(total == best, || format!("n={n}: hungarian {total} vs brute force {best}"))?;
        }
    }
    Ok("500 instances".into())
}

fn matcher_reward_range(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for _ in 0..1000 {
        let n = rng.gen_range(2..8);
        let pts = |rng: &mut ChaCha8Rng| -> Vec<Vec2> { (0..n).map(|_| Vec2::new(rng.gen(), rng.gen())).collect() };
        let (a, l) = (pts(rng), pts(rng));
        let costs = cost_matrix(&a, &l).map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let out = AssignmentOutcome::new(&costs, perm).map_err(|e| e.to_string())?;
        for k in 0..n {
            let r = matcher_reward(&out, k).map_err(|e| e.to_string())?;
            ensure(r > -1.0 && r <= 0.0, || format!("permutation reward {r} outside (-1, 0]"))?;
        }
    }
    Ok("1000 permutations".into())
}

fn grouping(_: &mut ChaCha8Rng) -> Result<String, String> {
    for n in 1..=32 {
        let env = EnvConfig::mpe(n);
        let w = reset(&env).map_err(|e| e.to_string())?;
        for focal in 0..n {
            let g = make_groups(&w, focal).map_err(|e| e.to_string())?;
            ensure(g.len() == group_count(n), || format!("N={n}: {} groups", g.len()))?;
            let mut seen = vec![false; n];
            for grp in &g.groups {
                ensure(grp.len() == 3 && grp[0] == focal, || format!("N={n}: bad group {grp:?}"))?;
                for &m in grp {
                    seen[m] = true;
                }
            }
            ensure(seen.iter().all(|&s| s), || format!("N={n}: union misses an agent"))?;
        }
    }
    Ok("N in 1..=32".into())
}

fn merge_symmetry(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let ex = GraphExecutor::new("cae", ExecutorConfig { hidden: 8 });
    let mut ps = ParamStore::new();
    ex.init(&mut ps, rng).map_err(|e| e.to_string())?;
    for _ in 0..50 {
        let groups = rng.gen_range(1..5);
        let nodes = Array2::from_shape_fn((3 * groups, NODE_FEATURES), |_| rng.gen_range(-1.0..1.0));
        let mut order: Vec<usize> = (0..groups).collect();
        order.shuffle(rng);
        let mut permuted = Array2::zeros(nodes.dim());
        for (dst, &src) in order.iter().enumerate() {
            let swap = rng.gen_bool(0.5);
            for r in 0..3 {
                let from = if swap && r > 0 { 3 - r } else { r };
                permuted.row_mut(3 * dst + r).assign(&nodes.row(3 * src + from));
            }
        }
        let run = |x: &Array2<f64>| -> Result<Array2<f64>, String> {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let out = ex.graph_merge(&mut t, &ps, v, groups).map_err(|e| e.to_string())?;
            Ok(t.value(out).clone())
        };
        let (a, b) = (run(&nodes)?, run(&permuted)?);
        let diff = (&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        ensure(diff < 1e-9, || format!("focal output moved by {diff}"))?;
    }
    Ok("50 trials".into())
}

fn layer_gradients(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let lin = Linear::new("lin", 3, 2);
    let gru = GruCell::new("gru", 3, 2);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mut ps = ParamStore::new();
        lin.init(&mut ps, 1.0, rng).map_err(|e| e.to_string())?;
        gru.init(&mut ps, rng).map_err(|e| e.to_string())?;
        for (_, p) in ps.iter_mut() {
            p.mapv_inplace(|_| rng.gen_range(-0.8..0.8));
        }
        let x = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let h = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
        let r = gradcheck(&ps, 1e-5, |t, ps| {
            let xv = t.constant(x.clone());
            let hv = t.constant(h.clone());
            let y = lin.forward(t, ps, xv)?;
            let h1 = gru.forward(t, ps, xv, hv)?;
            let y = t.tanh(y);
            let s = t.mul(y, h1)?;
            Ok(t.sum_all(s))
        })
        .map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e}"))
}

fn matcher_distribution(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let m = AttentionMatcher::new("mgm", MatcherConfig { embed: 8, heads: 2, ..MatcherConfig::default() }).map_err(|e| e.to_string())?;
    let mut ps = ParamStore::new();
    m.init(&mut ps, rng).map_err(|e| e.to_string())?;
    for _ in 0..200 {
        let n = rng.gen_range(1..7);
        let env = EnvConfig::mpe(n).with_seed(rng.gen());
        let mut w = reset(&env).map_err(|e| e.to_string())?;
        for c in w.covered.iter_mut() {
            *c = rng.gen_bool(0.3);
        }
        if w.all_covered() {
            w.covered[0] = false;
        }
        let obs = build_match_obs(&env, &w, rng.gen_range(0..n)).map_err(|e| e.to_string())?;
        let mut t = Tape::new();
        let lp = m.log_probs(&mut t, &ps, &[&obs]).map_err(|e| e.to_string())?;
        let p: Vec<f64> = t.value(lp).iter().map(|l| l.exp()).collect();
        ensure((p.iter().sum::<f64>() - 1.0).abs() < 1e-9, || "probabilities do not sum to 1".into())?;
        ensure(p.iter().zip(&w.covered).all(|(&q, &c)| !c || q == 0.0), || "covered goal has mass".into())?;
    }
    Ok("200 worlds".into())
}

#[allow(clippy::needless_range_loop)]
fn gae_oracle(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for _ in 0..200 {
        let n = rng.gen_range(1..30);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
        let (g, l, last) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0));
        let (adv, _) = gae(&r, &v, &d, last, g, l).map_err(|e| e.to_string())?;
        for t in 0..n {
            let (mut acc, mut w) = (0.0, 1.0);
            for i in t..n {
                let next = if d[i] {
                    0.0
                } else if i + 1 < n {
                    v[i + 1]
                } else {
                    last
                };
                acc += w * (r[i] + g * next - v[i]);
                if d[i] {
                    break;
                }
                w *= g * l;
            }
            ensure((adv[t] - acc).abs() < 1e-10, || format!("t={t}: {} vs {acc}", adv[t]))?;
        }
    }
    Ok("200 streams".into())
}

fn report_determinism(_: &mut ChaCha8Rng) -> Result<String, String> {
    let env = EnvConfig::mpe(5);
    let p = EvalProtocol { seeds: vec![3], episodes_per_seed: 10, ..EvalProtocol::default() };
    let run = || -> Result<String, String> {
        let mut c = ScriptedController::new(ScriptedConfig::default());
        let (r, _) = evaluate(&env, &mut c, &p, 0).map_err(|e| e.to_string())?;
        serde_json::to_string(&r).map_err(|e| e.to_string())
    };
    ensure(run()? == run()?, || "reports differ".into())?;
    Ok("10 scripted episodes twice".into())
}

pub const CHECKS: &[(&str, Check)] = &[
    ("hungarian_matches_brute_force", hungarian_oracle),
    ("matcher_reward_range", matcher_reward_range),
    ("grouping_invariants", grouping),
    ("graph_merge_symmetry", merge_symmetry),
    ("layer_gradients", layer_gradients),
    ("matcher_distribution", matcher_distribution),
    ("gae_oracle", gae_oracle),
    ("report_determinism", report_determinism),
];

pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match check(&mut rng) {
                Ok(detail) => CheckOutcome { name, passed: true, detail },
                Err(detail) => CheckOutcome { name, passed: false, detail },
            }
        })
        .collect()
}
