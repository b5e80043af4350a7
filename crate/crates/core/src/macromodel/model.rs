use std::collections::VecDeque;

use super::{
    demand_of, drift_modes, request_terms, ControlInput, FleetPmf, MacroOutput, TransitionData,
};

/// Macromodel state with packet cohorts: charge (discharge) mass is kept per
/// packet age so that exactly the mass granted `packet_steps` ago expires.
#[derive(Debug, Clone, PartialEq)]
pub struct Macromodel {
    td: TransitionData,
    /// Front is the youngest cohort.
    charge: VecDeque<Vec<f64>>,
    standby: Vec<f64>,
    discharge: VecDeque<Vec<f64>>,
}

fn spread(v: &[f64], k: usize) -> VecDeque<Vec<f64>> {
    (0..k)
        .map(|_| v.iter().map(|m| m / k as f64).collect())
        .collect()
}

fn column_sum(c: &VecDeque<Vec<f64>>, n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for cohort in c {
        for (a, b) in s.iter_mut().zip(cohort) {
            *a += b;
        }
    }
    s
}

impl Macromodel {
    /// Start from `q`, spreading packet mass evenly over packet ages.
    pub fn new(td: TransitionData, q: &FleetPmf) -> Self {
        let charge = spread(q.charge(), td.packet_steps_c);
        let discharge = spread(q.discharge(), td.packet_steps_d);
        Self {
            standby: q.standby().to_vec(),
            charge,
            discharge,
            td,
        }
    }

    pub fn transition(&self) -> &TransitionData {
        &self.td
    }

    pub fn pmf(&self) -> FleetPmf {
        let n = self.td.grid.n_b;
        let mut p = FleetPmf::zeros(n);
        p.q[..n].copy_from_slice(&column_sum(&self.charge, n));
        p.q[n..2 * n].copy_from_slice(&self.standby);
        p.q[2 * n..].copy_from_slice(&column_sum(&self.discharge, n));
        p
    }

    pub fn demand_kw(&self) -> f64 {
        demand_of(&self.pmf(), &self.td)
    }

    /// Per-bin fraction of packet mass that expires at the next step, with
    /// acceptance proportions `beta_c`, `beta_d`.
    pub fn control(&self, beta_c: f64, beta_d: f64) -> ControlInput {
        let n = self.td.grid.n_b;
        let frac = |c: &VecDeque<Vec<f64>>| -> Vec<f64> {
            let tot = column_sum(c, n);
            let oldest = c.back().expect("packet ledger is never empty");
            (0..n)
                .map(|i| {
                    if tot[i] > 0.0 {
                        (oldest[i] / tot[i]).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        ControlInput {
            beta_c,
            beta_d,
            expire_c: frac(&self.charge),
            expire_d: frac(&self.discharge),
        }
    }

    /// Advance one macro step with acceptance proportions `beta_c`, `beta_d`.
    pub fn step(&mut self, beta_c: f64, beta_d: f64) -> MacroOutput {
        let n = self.td.grid.n_b;
        let td = &self.td;
        for ledger in [&mut self.charge, &mut self.discharge] {
            let oldest = ledger.pop_back().expect("packet ledger is never empty");
            for (s, m) in self.standby.iter_mut().zip(&oldest) {
                *s += m;
            }
            ledger.push_front(vec![0.0; n]);
        }
        let mut out = MacroOutput::default();
        for i in 0..n {
            let sb = self.standby[i];
            let [pc, pd, rc, rd] = request_terms(td, beta_c, beta_d, i);
            out.requests_charge += rc * sb;
            out.requests_discharge += rd * sb;
            self.charge[0][i] += pc * sb;
            self.discharge[0][i] += pd * sb;
            self.standby[i] = sb - pc * sb - pd * sb;
        }
        let (fl, forced_c, forced_d) = drift_modes(
            td,
            self.charge.make_contiguous(),
            &mut self.standby,
            self.discharge.make_contiguous(),
        );
        self.charge[0][0] += forced_c;
        self.discharge[0][n - 1] += forced_d;
        out.requests_charge *= td.n_devices;
        out.requests_discharge *= td.n_devices;
        out.opt_outs = fl.opt_outs(td.top_cutoff) * td.n_devices;
        out.demand_kw = self.demand_kw();
        out
    }

    /// Replace the state with `q`, keeping the current age profile of packet
    /// mass within each bin. Bins with no ledger history get an even spread.
    pub fn rescale_to(&mut self, q: &FleetPmf) {
        let n = self.td.grid.n_b;
        for (ledger, target) in [
            (&mut self.charge, q.charge()),
            (&mut self.discharge, q.discharge()),
        ] {
            let tot = column_sum(ledger, n);
            let k = ledger.len() as f64;
            for i in 0..n {
                for cohort in ledger.iter_mut() {
                    cohort[i] = if tot[i] > 1e-300 {
                        cohort[i] * target[i] / tot[i]
                    } else {
                        target[i] / k
                    };
                }
            }
        }
        self.standby.copy_from_slice(q.standby());
    }

    /// Cohort ledgers, youngest first: (charge, discharge).
    pub fn cohorts(&self) -> (&VecDeque<Vec<f64>>, &VecDeque<Vec<f64>>) {
        (&self.charge, &self.discharge)
    }

    pub(crate) fn from_parts(
        td: TransitionData,
        charge: VecDeque<Vec<f64>>,
        standby: Vec<f64>,
        discharge: VecDeque<Vec<f64>>,
    ) -> Self {
        Self {
            td,
            charge,
            standby,
            discharge,
        }
    }
}
