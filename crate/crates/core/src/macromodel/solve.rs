use serde::Serialize;

use super::{fleet_soc_pmf, FleetPmf, MacroError, Macromodel, TransitionData};

const MAX_STEPS: usize = 200_000;
const TOL: f64 = 1e-13;

/// Run the model with fixed acceptance until its PMF stops moving. Returns
/// the converged model so its ledger can seed a simulation.
pub fn stationary_distribution(
    td: &TransitionData,
    beta_c: f64,
    beta_d: f64,
    q0: &FleetPmf,
) -> Result<Macromodel, MacroError> {
    let mut m = Macromodel::new(td.clone(), q0);
    let mut prev = m.pmf();
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_STEPS {
        m.step(beta_c, beta_d);
        let q = m.pmf();
        residual = q.q.iter().zip(&prev.q).map(|(a, b)| (a - b).abs()).sum();
        prev = q;
        if residual < TOL {
            return Ok(m);
        }
    }
    Err(MacroError::NoConvergence {
        iterations: MAX_STEPS,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SocLimits {
    /// Mean SoC with every request accepted, device units.
    pub upper: f64,
    /// Mean SoC with every charge request refused.
    pub lower: f64,
    pub z_upper: f64,
    pub z_lower: f64,
}

/// Energy limits of the group: stationary mean SoC at β = (1, 0) and (0, 1).
pub fn soc_limits(td: &TransitionData) -> Result<SocLimits, MacroError> {
    let q0 = FleetPmf::uniform_standby(td.grid.n_b);
    let hi = stationary_distribution(td, 1.0, 0.0, &q0)?.pmf();
    let lo = stationary_distribution(td, 0.0, 1.0, &q0)?.pmf();
    Ok(SocLimits {
        upper: hi.mean_soc(&td.grid),
        lower: lo.mean_soc(&td.grid),
        z_upper: fleet_soc_pmf(&hi, &td.grid),
        z_lower: fleet_soc_pmf(&lo, &td.grid),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Baseline {
    pub beta_c: f64,
    pub beta_d: f64,
    /// Minimum steady-state group demand, kW.
    pub p_nom_kw: f64,
    pub mean_soc: f64,
    pub q: FleetPmf,
}

fn evaluate(td: &TransitionData, bc: f64, bd: f64, q0: &FleetPmf) -> Result<Baseline, MacroError> {
    let m = stationary_distribution(td, bc, bd, q0)?;
    let q = m.pmf();
    Ok(Baseline {
        beta_c: bc,
        beta_d: bd,
        p_nom_kw: m.demand_kw(),
        mean_soc: q.mean_soc(&td.grid),
        q,
    })
}

/// Smallest steady-state demand whose stationary mean SoC is at least the
/// setpoint. Bisection on β_c for groups that cannot discharge; a grid with
/// local refinement over (β_c, β_d) otherwise.
pub fn baseline_optimization(td: &TransitionData, setpoint: f64) -> Result<Baseline, MacroError> {
    let q0 = FleetPmf::uniform_standby(td.grid.n_b);
    let can_discharge = td.discharge_kw > 0.0;
    if !can_discharge {
        let top = evaluate(td, 1.0, 0.0, &q0)?;
        if top.mean_soc < setpoint {
            return Err(MacroError::Infeasible(format!(
                "mean SoC {:.3} < setpoint {setpoint} even with every request accepted",
                top.mean_soc
            )));
        }
        let bottom = evaluate(td, 0.0, 0.0, &q0)?;
        if bottom.mean_soc >= setpoint {
            return Ok(bottom);
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut best = top;
        while hi - lo > 1e-6 {
            let mid = 0.5 * (lo + hi);
            let b = evaluate(td, mid, 0.0, &best.q)?;
            if b.mean_soc >= setpoint {
                hi = mid;
                best = b;
            } else {
                lo = mid;
            }
        }
        return Ok(best);
    }

    let feasible = |b: &Baseline| b.mean_soc >= setpoint - 1e-9;
    let mut best: Option<Baseline> = None;
    let (mut c0, mut c1, mut d0, mut d1) = (0.0, 1.0, 0.0, 1.0);
    for _ in 0..4 {
        let k = 10;
        for a in 0..=k {
            for b in 0..=k {
                let bc = c0 + (c1 - c0) * a as f64 / k as f64;
                let bd = d0 + (d1 - d0) * b as f64 / k as f64;
                if bc == 0.0 && bd == 0.0 {
                    // No packets at all: the chain is not irreducible.
                    continue;
                }
                let cand = evaluate(td, bc, bd, &q0)?;
                if feasible(&cand) && best.as_ref().is_none_or(|x| cand.p_nom_kw < x.p_nom_kw) {
                    best = Some(cand);
                }
            }
        }
        let Some(b) = &best else { break };
        let (hc, hd) = ((c1 - c0) / 10.0, (d1 - d0) / 10.0);
        c0 = (b.beta_c - hc).max(0.0);
        c1 = (b.beta_c + hc).min(1.0);
        d0 = (b.beta_d - hd).max(0.0);
        d1 = (b.beta_d + hd).min(1.0);
    }
    best.ok_or_else(|| {
        MacroError::Infeasible(format!("no acceptance pair reaches mean SoC {setpoint}"))
    })
}
