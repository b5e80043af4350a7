//! Monte-Carlo fleet driven by a scripted acceptance sequence, side by side
//! with the macromodel under the same sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::scenario::DrawSpec;
use super::HarnessError;
use crate::device::{DeviceActor, DeviceConfig, DeviceParams, DeviceState};
use crate::macromodel::{build_transition, FleetPmf, MacroConfig, Macromodel, Mode};
use crate::protocol::PacketMessage;

fn mode_of(d: &DeviceActor) -> Mode {
    match d.state().zeta {
        1 => Mode::Charge,
        -1 => Mode::Discharge,
        _ => Mode::Standby,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityRun {
    /// End of each macro step, s.
    pub t: Vec<f64>,
    pub mc_mean: Vec<f64>,
    pub macro_mean: Vec<f64>,
    pub mc_demand_kw: Vec<f64>,
    pub macro_demand_kw: Vec<f64>,
    /// Total-variation distance between the two SoC marginals.
    pub tv: Vec<f64>,
}

impl FidelityRun {
    pub fn max_abs_diff(&self) -> f64 {
        self.mc_mean
            .iter()
            .zip(&self.macro_mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Hold `betas[k]` over macro step `k` and record the mean SoC of both models
/// at the end of every step. Requests are granted by independent coin flips.
pub fn macro_vs_monte_carlo(
    params: &DeviceParams,
    draw: Option<DrawSpec>,
    n_devices: usize,
    betas: &[(f64, f64)],
    n_b: usize,
    seed: u64,
) -> Result<FidelityRun, HarnessError> {
    let mean_draw = draw.map_or(0.0, |d| d.rate_per_s * d.mean_kj);
    let mut cfg = MacroConfig::new(n_devices as f64, mean_draw);
    cfg.n_b = n_b;
    let td = build_transition(params, &cfg)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut grant = ChaCha8Rng::seed_from_u64(master.random());
    let mut devices = Vec::with_capacity(n_devices);
    for _ in 0..n_devices {
        let x0 = master.random_range(params.lower..params.upper);
        let d = draw.map_or_else(crate::device::DrawProcess::none, |d| d.process());
        devices.push(DeviceActor::new(
            params.clone(),
            DeviceState::standby(x0),
            d,
            DeviceConfig::default(),
            master.random(),
        )?);
    }
    let q0 = FleetPmf::from_samples(
        &td.grid,
        devices.iter().map(|d| (d.state().soc, Mode::Standby)),
    );
    let mut model = Macromodel::new(td.clone(), &q0);
    let ticks = td.ticks as u64;
    let mut out = FidelityRun {
        t: Vec::new(),
        mc_mean: Vec::new(),
        macro_mean: Vec::new(),
        mc_demand_kw: Vec::new(),
        macro_demand_kw: Vec::new(),
        tv: Vec::new(),
    };
    let mut now = 0.0;
    for &(bc, bd) in betas {
        for _ in 0..ticks {
            now += 1.0;
            let sent: Vec<_> = devices.par_iter_mut().map(|d| d.tick(now)).collect();
            for (i, msgs) in sent.into_iter().enumerate() {
                for m in msgs? {
                    if let PacketMessage::Request {
                        direction, nonce, ..
                    } = m
                    {
                        let beta = match direction {
                            crate::device::Direction::Charge => bc,
                            crate::device::Direction::Discharge => bd,
                        };
                        let accept = grant.random::<f64>() < beta;
                        devices[i].deliver(
                            &PacketMessage::Response {
                                accept,
                                nonce,
                                sent_at: now,
                            },
                            now,
                        );
                    }
                }
            }
        }
        let y = model.step(bc, bd);
        let xs: f64 = devices.iter().map(|d| d.state().soc).sum();
        out.t.push(now);
        out.mc_mean.push(xs / n_devices as f64);
        out.macro_mean.push(model.pmf().mean_soc(&td.grid));
        out.mc_demand_kw
            .push(devices.iter().map(|d| d.power_at(now)).sum());
        out.macro_demand_kw.push(y.demand_kw);
        let truth = FleetPmf::from_samples(
            &td.grid,
            devices.iter().map(|d| (d.state().soc, mode_of(d))),
        );
        out.tv.push(model.pmf().tv_distance(&truth));
    }
    Ok(out)
}
