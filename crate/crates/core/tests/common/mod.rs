//! Seeded property checks shared by the acceptance run and the property suite.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nalgebra::SymmetricEigen;
use pemsim::coordinator::{Coordinator, CoordinatorConfig, FeedbackPolicy};
use pemsim::device::{request_probability, DeviceParams, Direction};
use pemsim::estimator::{EstimatorConfig, EstimatorState, Measurement};
use pemsim::harness::{run_scenario, write_outputs, DrawSpec, Scenario};
use pemsim::macromodel::{build_transition, FleetPmf, MacroConfig, Macromodel, TransitionData};
use pemsim::protocol::{decode, encode, ForcedPacket, OptOutEdge, PacketMessage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn load(name: &str) -> Scenario {
    Scenario::load(&scenario_dir().join(format!("{name}.toml"))).unwrap()
}

pub fn ewh() -> DeviceParams {
    DeviceParams::ewh(4.5, 275.0, 52.0, 48.9, 55.1)
}

pub fn ewh_transition(n: f64) -> TransitionData {
    let d = DrawSpec::standard_ewh();
    build_transition(&ewh(), &MacroConfig::new(n, d.rate_per_s * d.mean_kj)).unwrap()
}

/// Largest departure from the simplex over `steps` random macro steps.
pub fn pmf_simplex_error(seed: u64, steps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let td = ewh_transition(2000.0);
    let mut m = Macromodel::new(td.clone(), &FleetPmf::uniform_standby(td.grid.n_b));
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        m.step(rng.random(), rng.random());
        let q = m.pmf();
        worst = worst.max((q.total() - 1.0).abs());
        worst = worst.max(-q.q.iter().copied().fold(0.0, f64::min));
    }
    worst
}

/// Boundary values and monotonicity of the request probability for random
/// parameter draws. Returns the first violation.
pub fn request_probability_check(seed: u64, draws: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..draws {
        let lower = rng.random_range(10.0..60.0);
        let upper = lower + rng.random_range(1.0..30.0);
        let set = rng.random_range(lower + 0.05 * (upper - lower)..upper - 0.05 * (upper - lower));
        let mut p = DeviceParams::ess(rng.random_range(1.0..10.0), 13.5, set, lower, upper);
        p.request_rate = rng.random_range(1e-4..0.05);
        let dt = rng.random_range(0.1..60.0);
        let g = |x: f64, d: Direction| request_probability(x, &p, dt, d);
        if g(lower, Direction::Charge) != 1.0 || g(upper, Direction::Charge) != 0.0 {
            return Err(format!("draw {i}: charge boundary"));
        }
        if g(upper, Direction::Discharge) != 1.0 || g(lower, Direction::Discharge) != 0.0 {
            return Err(format!("draw {i}: discharge boundary"));
        }
        let mut prev = (1.0, 0.0);
        for k in 1..50 {
            let x = lower + (upper - lower) * k as f64 / 50.0;
            let (c, d) = (g(x, Direction::Charge), g(x, Direction::Discharge));
            if !(0.0..=1.0).contains(&c) || !(0.0..=1.0).contains(&d) || c > prev.0 || d < prev.1 {
                return Err(format!("draw {i}: not monotone at x = {x}"));
            }
            prev = (c, d);
        }
    }
    Ok(())
}

pub fn random_message(rng: &mut impl Rng) -> PacketMessage {
    let dir = |rng: &mut dyn rand::RngCore| {
        if rng.random::<bool>() {
            Direction::Charge
        } else {
            Direction::Discharge
        }
    };
    let t = rng.random_range(0.0..1e7);
    match rng.random_range(0..4) {
        0 => PacketMessage::Request {
            direction: dir(rng),
            rated_power_kw: rng.random_range(0.1..20.0),
            packet_length_s: rng.random_range(1.0..900.0),
            nonce: rng.random(),
            sent_at: t,
        },
        1 => PacketMessage::Response {
            accept: rng.random(),
            nonce: rng.random(),
            sent_at: t,
        },
        2 => PacketMessage::OptOutNotice {
            edge: [OptOutEdge::Low, OptOutEdge::High, OptOutEdge::Rejoin][rng.random_range(0..3)],
            forced: rng.random::<bool>().then(|| ForcedPacket {
                direction: dir(rng),
                rated_power_kw: rng.random_range(0.1..20.0),
                packet_length_s: rng.random_range(1.0..900.0),
            }),
            nonce: rng.random(),
            cancels: rng.random::<bool>().then(|| rng.random()),
            sent_at: t,
        },
        _ => PacketMessage::DemandMeasurement {
            measured_demand_kw: rng.random_range(-1e4..1e4),
            sent_at: t,
        },
    }
}

pub fn round_trip_check(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let m = random_message(&mut rng);
        match decode(&encode(&m)) {
            Ok(back) if back == m => {}
            other => return Err(format!("message {i}: {m:?} came back as {other:?}")),
        }
    }
    Ok(())
}

/// Replay one request stream twice with the nonces shuffled; decisions must
/// not move.
pub fn privacy_check(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reqs: Vec<(f64, Direction, f64)> = (0..n)
        .map(|i| {
            let d = if rng.random::<f64>() < 0.7 {
                Direction::Charge
            } else {
                Direction::Discharge
            };
            (i as f64 * 0.37, d, rng.random_range(3.0..6.0))
        })
        .collect();
    let mut nonces: Vec<u64> = (0..n as u64).collect();
    let run = |nonces: &[u64]| {
        let mut c = Coordinator::new(CoordinatorConfig {
            feedback: FeedbackPolicy::Reconstructed,
            ..Default::default()
        });
        c.set_reference(60.0);
        reqs.iter()
            .zip(nonces)
            .map(|(&(t, direction, p), &nonce)| {
                let req = PacketMessage::Request {
                    direction,
                    rated_power_kw: p,
                    packet_length_s: 300.0,
                    nonce,
                    sent_at: t,
                };
                matches!(
                    c.handle_request(&req, t).unwrap(),
                    PacketMessage::Response { accept: true, .. }
                )
            })
            .collect::<Vec<bool>>()
    };
    let a = run(&nonces);
    use rand::seq::SliceRandom;
    nonces.shuffle(&mut rng);
    let b = run(&nonces);
    if a != b {
        return Err("decisions depend on the nonce".into());
    }
    if !a.contains(&true) || !a.contains(&false) {
        return Err("stream never exercised both outcomes".into());
    }
    Ok(())
}

/// Worst asymmetry and most negative eigenvalue of the EKF covariance.
pub fn ekf_covariance_check(seed: u64, steps: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let td = ewh_transition(2000.0);
    let nominal = 2351.0;
    let mut est = EstimatorState::new(
        Macromodel::new(td.clone(), &FleetPmf::uniform_standby(td.grid.n_b)),
        EstimatorConfig {
            nominal_kw: nominal,
            ..Default::default()
        },
    );
    let (mut asym, mut min_eig): (f64, f64) = (0.0, f64::INFINITY);
    for _ in 0..steps {
        let y = Measurement {
            demand_kw: nominal * rng.random_range(0.3..1.7),
            requests_charge: rng.random_range(0.0..600.0),
            requests_discharge: 0.0,
            opt_outs: 0.0,
        };
        est.ekf_step(rng.random_range(0.0..1.0), 0.0, &y).unwrap();
        let p = &est.cov_post;
        asym = asym.max((p - p.transpose()).amax());
        min_eig = min_eig.min(SymmetricEigen::new(p.clone()).eigenvalues.min());
    }
    (asym, min_eig)
}

/// Run `sc` twice and compare every output file byte for byte.
pub fn rerun_identical(sc: &Scenario) -> Result<(), String> {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let r = run_scenario(sc).map_err(|e| e.to_string())?;
        write_outputs(d.path(), &r.traces, &r.metrics).map_err(|e| e.to_string())?;
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err("no outputs written".into());
    }
    for n in names {
        let a = std::fs::read(dirs[0].path().join(&n)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&n)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{} differs", n.to_string_lossy()));
        }
    }
    Ok(())
}

pub fn small_scenario() -> Scenario {
    Scenario::from_toml(
        r#"
name = "rerun"
duration_s = 900
warmup_s = 120
seed = 21

[[fleet]]
count = 150
class = "ewh"
power_kw = { mean = 4.5, sd = 0.2 }
tank_liters = 275
setpoint = 52
lower = 48.9
upper = 55.1

[reference]
kind = "sines"
offset_kw = 180
components = [{ amplitude_kw = 40, period_s = 600 }]

[channel]
base_latency = { family = "normal", mean_s = 0.05, sd_s = 0.01 }
loss_probability = 0.01
"#,
    )
    .unwrap()
}
