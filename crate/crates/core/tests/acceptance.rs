//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.

mod common;

use std::time::Instant;

use pemsim::coordinator::FeedbackPolicy;
use pemsim::grid::{step_grid, GridInputs, GridParams, GridState};
use pemsim::harness::{
    group_baseline, macro_vs_monte_carlo, run_scenario, window_rms, DrawSpec, ReferenceSpec,
    RunResult, Scenario,
};
use pemsim::protocol::DelayDistribution;
use rayon::prelude::*;

use common::*;

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn homogeneous_2000() -> Scenario {
    Scenario::from_toml(
        r#"
name = "ewh-2000"
duration_s = 3600
seed = 1

[[fleet]]
count = 2000
class = "ewh"
power_kw = 4.5
tank_liters = 275
setpoint = 52
lower = 48.9
upper = 55.1
initial = "stationary"

[reference]
kind = "baseline"
"#,
    )
    .unwrap()
}

fn run(sc: &Scenario) -> RunResult {
    run_scenario(sc).unwrap_or_else(|e| panic!("{}: {e}", sc.name))
}

fn baseline() -> Outcome {
    let t = Instant::now();
    let (b, _) = group_baseline(&homogeneous_2000()).unwrap();
    let s = t.elapsed().as_secs_f64();
    let mw = b.p_nom_kw / 1000.0;
    let ok = (0.20..=0.32).contains(&b.beta_c) && (2.0..=2.7).contains(&mw) && s <= 30.0;
    (
        ok,
        format!("beta_c {:.4}, P_nom {mw:.3} MW, {s:.2} s", b.beta_c),
    )
}

fn limits() -> Outcome {
    let t = Instant::now();
    let (_, l) = group_baseline(&homogeneous_2000()).unwrap();
    let s = t.elapsed().as_secs_f64();
    let ok = (l.upper - 53.4).abs() <= 0.3 && (l.lower - 49.3).abs() <= 0.3 && s <= 10.0;
    (
        ok,
        format!("upper {:.2} C, lower {:.2} C, {s:.2} s", l.upper, l.lower),
    )
}

fn fidelity() -> Outcome {
    let t = Instant::now();
    let p = ewh();
    // Two hours of one-minute steps, cycling high, low and baseline-ish.
    let betas: Vec<(f64, f64)> = (0..120)
        .map(|k| ([0.28, 0.6, 0.1][(k / 20) % 3], 0.0))
        .collect();
    let r = macro_vs_monte_carlo(&p, Some(DrawSpec::standard_ewh()), 5000, &betas, 20, 7).unwrap();
    let s = t.elapsed().as_secs_f64();
    let bound = 0.02 * (p.upper - p.lower);
    let d = r.max_abs_diff();
    (
        d <= bound && s <= 300.0,
        format!("max mean-SoC gap {d:.3} C (bound {bound:.3}), {s:.1} s"),
    )
}

fn ekf() -> Outcome {
    let sc = load("ekf-tracking");
    let r = run(&sc);
    let z = r.metrics.est_max_abs_z_err.unwrap_or(f64::INFINITY);
    let hourly: Vec<f64> = r
        .traces
        .estimator
        .iter()
        .filter(|e| e.t >= 3600.0 && (e.t / 3600.0 - (e.t / 3600.0).round()).abs() * 3600.0 < 0.5)
        .map(|e| e.tv)
        .collect();
    let tv = hourly.iter().copied().fold(0.0, f64::max);
    let ok = z <= 0.05 && !hourly.is_empty() && tv <= 0.1 && r.wall_s <= 600.0;
    (
        ok,
        format!(
            "max |z_hat - z| {z:.4}, hourly TV max {tv:.3} over {} checks, {:.1} s",
            hourly.len(),
            r.wall_s
        ),
    )
}

fn steps() -> Outcome {
    let sc = load("step-tracking");
    let r = run(&sc);
    let ReferenceSpec::Steps { times_s, .. } = &sc.reference else {
        return (false, "step-tracking has no step reference".into());
    };
    let bound = 2.0 * r.metrics.mean_rated_kw;
    let rms: Vec<f64> = times_s
        .iter()
        .filter(|&&t| t >= sc.warmup_s)
        .map(|&t| {
            window_rms(
                &r.traces.tracking,
                t + 120.0,
                (t + 300.0).min(sc.duration_s),
            )
        })
        .collect();
    let worst = rms.iter().copied().fold(0.0, f64::max);
    let p10 = r.metrics.soc_p10_min.unwrap_or(-1.0);
    let p90 = r.metrics.soc_p90_max.unwrap_or(2.0);
    let ok = !rms.is_empty() && worst <= bound && p10 >= 0.0 && p90 <= 1.0;
    (
        ok,
        format!(
            "{} steps, worst post-transient RMS {worst:.2} kW (bound {bound:.2}), SoC p10 min {p10:.3}, p90 max {p90:.3}",
            rms.len()
        ),
    )
}

fn delays() -> Outcome {
    let base = load("delay-study");
    let means = [0.0, 20.0, 30.0, 60.0];
    let seeds = [1u64, 2, 3, 4];
    let cases: Vec<(usize, FeedbackPolicy, u64)> = (0..means.len())
        .flat_map(|i| {
            [FeedbackPolicy::Measured, FeedbackPolicy::Reconstructed]
                .into_iter()
                .flat_map(move |p| seeds.into_iter().map(move |s| (i, p, s)))
        })
        .collect();
    let pct: Vec<f64> = cases
        .par_iter()
        .map(|&(i, policy, seed)| {
            let mut sc = base.clone();
            sc.seed = seed;
            sc.coordinator.feedback = policy;
            sc.channel.measurement_delay = DelayDistribution::Normal {
                mean_s: means[i],
                sd_s: 2.0,
            };
            run(&sc).metrics.rms_pct_baseline.unwrap_or(f64::INFINITY)
        })
        .collect();
    let avg = |i: usize, p: FeedbackPolicy| {
        let v: Vec<f64> = cases
            .iter()
            .zip(&pct)
            .filter(|(c, _)| c.0 == i && c.1 == p)
            .map(|(_, v)| *v)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let m: Vec<f64> = (0..means.len())
        .map(|i| avg(i, FeedbackPolicy::Measured))
        .collect();
    let rc: Vec<f64> = (0..means.len())
        .map(|i| avg(i, FeedbackPolicy::Reconstructed))
        .collect();
    let increasing = m.windows(2).all(|w| w[1] > w[0]);
    let beats = m.iter().zip(&rc).all(|(a, b)| b < a);
    let ok = increasing && m[1] <= 5.0 && beats;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.2}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    (
        ok,
        format!(
            "RMS % of baseline at 0/20/30/60 s, mean of {} seeds: measured {}, reconstructed {}",
            seeds.len(),
            fmt(&m),
            fmt(&rc)
        ),
    )
}

fn reconstruction() -> Outcome {
    let a = run(&load("reconstruction-20ewh"));
    let b = run(&load("reconstruction-20ewh-input-delay"));
    let within = a.metrics.reconstruction_within_rated;
    let bias = a.metrics.reconstruction_bias_kw;
    let pct = 100.0 * b.metrics.reconstruction_rms_kw / b.metrics.baseline_kw.unwrap_or(f64::NAN);
    let ok = within >= 0.99 && bias.abs() <= 1e-6 && pct <= 2.0;
    (
        ok,
        format!(
            "within one rated power on {:.2}% of ticks, bias {bias:.4} kW; 8 ms input delay RMS {pct:.2}% of baseline",
            100.0 * within
        ),
    )
}

fn droop_closed_form() -> f64 {
    let mut p = GridParams::vermont();
    p.agc_scale = 0.0;
    let inp = GridInputs {
        solar_mw: 30.0,
        z_hat: 0.5,
        ..Default::default()
    };
    let mut s = GridState::new(&p);
    for _ in 0..6000 {
        step_grid(&mut s, &p, &inp, 0.1).unwrap();
    }
    let expect = 30.0 / (p.frequency_response(0) + p.frequency_response(1));
    s.df.iter()
        .map(|d| ((d - expect) / expect).abs())
        .fold(0.0, f64::max)
}

fn grid() -> Outcome {
    let sc = load("solar-step");
    let r = run(&sc);
    let g = &r.traces.grid;
    let step = sc.grid.as_ref().map_or(30.0, |g| g.solar_step_mw);
    // Steady state: the last 20 minutes.
    let tail: Vec<_> = g.iter().filter(|x| x.t >= sc.duration_s - 1200.0).collect();
    let n = tail.len().max(1) as f64;
    let mean =
        |f: &dyn Fn(&pemsim::harness::GridRow) -> f64| tail.iter().map(|x| f(x)).sum::<f64>() / n;
    let peak = g
        .iter()
        .map(|x| x.df_int_hz.abs().max(x.df_ext_hz.abs()))
        .fold(0.0, f64::max);
    let df = mean(&|x| x.df_int_hz.abs().max(x.df_ext_hz.abs()));
    let tie = mean(&|x| x.tie_mw.abs());
    let ext = mean(&|x| x.external_mw);
    let absorbed = mean(&|x| -x.local1_mw - x.local2_mw - x.battery_mw + x.der_actual_mw);
    let droop = droop_closed_form();
    let ok = !tail.is_empty()
        && df <= 0.01 * peak
        && tie <= 0.01 * step
        && ext.abs() <= 0.01 * step
        && (absorbed - step).abs() <= 0.01 * step
        && droop <= 1e-6;
    (
        ok,
        format!(
            "steady |df| {df:.5} Hz (peak {peak:.3}), |tie| {tie:.3} MW, external {:.2} MW, absorbed {absorbed:.2} MW; droop rel err {droop:.1e}",
            218.0 + ext
        ),
    )
}

fn properties() -> Outcome {
    let mut bad = Vec::new();
    let simplex = pmf_simplex_error(3, 2000);
    if simplex > 1e-12 {
        bad.push(format!("simplex {simplex:.1e}"));
    }
    for (name, r) in [
        ("request probability", request_probability_check(5, 1000)),
        ("round trip", round_trip_check(7, 10_000)),
        ("privacy", privacy_check(9, 400)),
        ("rerun", rerun_identical(&small_scenario())),
    ] {
        if let Err(e) = r {
            bad.push(format!("{name}: {e}"));
        }
    }
    let (asym, min_eig) = ekf_covariance_check(11, 1000);
    if asym > 1e-12 || min_eig < -1e-12 {
        bad.push(format!("covariance asym {asym:.1e}, min eig {min_eig:.1e}"));
    }
    let msg = if bad.is_empty() {
        format!("simplex err {simplex:.1e}, cov asym {asym:.1e}, min eig {min_eig:.1e}, all suites hold")
    } else {
        bad.join("; ")
    };
    (bad.is_empty(), msg)
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("baseline", baseline),
        ("soc limits", limits),
        ("macromodel fidelity", fidelity),
        ("ekf tracking", ekf),
        ("step tracking", steps),
        ("delay study", delays),
        ("reconstruction", reconstruction),
        ("grid and agc", grid),
        ("property suites", properties),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (ok, msg) = f();
        if !ok {
            failed += 1;
        }
        println!(
            "{} {} {name}: {msg}",
            if ok { "PASS" } else { "FAIL" },
            i + 1
        );
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
