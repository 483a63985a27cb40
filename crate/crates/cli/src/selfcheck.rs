//! Fast property checks runnable from the command line.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cul_core::agent::consolidate_task;
use cul_core::curriculum::{run_episode, ZeroAction};
use cul_core::dynamics::{linearize_nominal, reference_signal};
use cul_core::lincontrol::{closed_loop_spectral_radius, dare_residual, solve_dare};
use cul_core::neural::{Activation, DenseNet};
use cul_core::{
    nominal_mbc, sample_plant, step_plant, ControlVariant, EnvConfig, PlantParams, PlantState, RunConfig,
    UncertaintyRanges,
};

type Check = fn() -> Result<(), String>;

fn riccati() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..10 {
        let n = 3 + trial % 4;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)) * 0.9 / n as f64;
        let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let q = DMatrix::identity(n, n);
        let r = DMatrix::identity(1, 1);
        let p = solve_dare(&a, &b, &q, &r).map_err(|e| e.to_string())?;
        let res = dare_residual(&a, &b, &q, &r, &p);
        if res > 1e-10 * (1.0 + p.norm()) {
            return Err(format!("system {trial}: residual {res:e}"));
        }
    }
    Ok(())
}

fn baseline_servo() -> Result<(), String> {
    let cfg = RunConfig::default();
    let mbc = nominal_mbc(&cfg).map_err(|e| e.to_string())?;
    let model = linearize_nominal(&cfg.plant.linear(), cfg.env.dt).map_err(|e| e.to_string())?;
    let rho = closed_loop_spectral_radius(&model, &mbc);
    if rho >= 1.0 {
        return Err(format!("spectral radius {rho}"));
    }
    let rec = run_episode(&cfg.plant.linear(), &mbc, &mut ZeroAction, ControlVariant::MbcOnly, &cfg.env, 0)
        .map_err(|e| e.to_string())?;
    if rec.final_error.abs() >= 1e-4 {
        return Err(format!("terminal error {:e}", rec.final_error));
    }
    Ok(())
}

fn linear_limit() -> Result<(), String> {
    let env = EnvConfig::default();
    let p = PlantParams::nominal().linear();
    let m = linearize_nominal(&p, env.dt).map_err(|e| e.to_string())?;
    let mut s = PlantState::default();
    let mut x = DVector::zeros(m.n_states());
    let (mut worst, mut peak) = (0.0f64, 0.0f64);
    for k in 0..env.horizon {
        let u = p.k_c * reference_signal(&p, k as f64 * env.dt);
        s = step_plant(&s, u, 0.0, &p, env.dt, env.substeps).map_err(|e| e.to_string())?;
        x = m.step(&x, u, 0.0);
        worst = worst.max((s.x_b - m.output(&x)).abs());
        peak = peak.max(m.output(&x).abs());
    }
    if worst > 1e-6 * peak {
        return Err(format!("relative deviation {:e}", worst / peak));
    }
    Ok(())
}

fn gradients() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let net = DenseNet::new(&[5, 12, 12, 1], Activation::Tanh, Activation::Tanh, &mut rng).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = net.forward(&x).map_err(|e| e.to_string())?;
        let (g, _) = net.backward(&cache, &[1.0]).map_err(|e| e.to_string())?;
        let h = 1e-5;
        for j in 0..g.len() {
            let mut plus = net.clone();
            plus.params_mut()[j] += h;
            let mut minus = net.clone();
            minus.params_mut()[j] -= h;
            let fd = (plus.forward(&x).unwrap().0[0] - minus.forward(&x).unwrap().0[0]) / (2.0 * h);
            let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-4);
            if rel > 1e-4 {
                return Err(format!("parameter {j}: analytic {} vs numeric {fd}", g[j]));
            }
        }
    }
    Ok(())
}

fn online_fisher() -> Result<(), String> {
    let tasks = [[1.0, 0.5], [2.0, 0.0], [0.25, 4.0]];
    let mut snap = None;
    for f in &tasks {
        snap = Some(consolidate_task(snap.as_ref(), &[0.0, 0.0], f, 0.9).map_err(|e| e.to_string())?);
    }
    let snap = snap.expect("three tasks consolidated");
    for j in 0..2 {
        let brute: f64 = (0..3).map(|m| 0.9f64.powi(2 - m as i32) * tasks[m][j]).sum();
        if (snap.fisher[j] - brute).abs() > 1e-12 {
            return Err(format!("coordinate {j}: {} vs {brute}", snap.fisher[j]));
        }
    }
    Ok(())
}

fn residual_identity() -> Result<(), String> {
    let cfg = RunConfig::default();
    let mbc = nominal_mbc(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = sample_plant(4, &cfg.plant, &UncertaintyRanges::default(), &mut rng).map_err(|e| e.to_string())?;
    let a = run_episode(&p, &mbc, &mut ZeroAction, ControlVariant::Residual, &cfg.env, 4).map_err(|e| e.to_string())?;
    let b = run_episode(&p, &mbc, &mut ZeroAction, ControlVariant::MbcOnly, &cfg.env, 4).map_err(|e| e.to_string())?;
    if a.y != b.y || a.u != b.u {
        return Err("trajectories differ".into());
    }
    Ok(())
}

const CHECKS: [(&str, Check); 6] = [
    ("riccati residual", riccati),
    ("baseline servo", baseline_servo),
    ("linear limit", linear_limit),
    ("network gradients", gradients),
    ("online fisher recursion", online_fisher),
    ("residual identity", residual_identity),
];

/// Prints one line per check; returns whether all passed.
pub fn run() -> bool {
    let mut ok = true;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                ok = false;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    ok
}
