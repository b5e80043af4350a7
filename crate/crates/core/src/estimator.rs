//! Extended Kalman filter over the macromodel. Estimates the fleet PMF from
//! interval aggregates the coordinator already has: reconstructed demand,
//! request counts and, optionally, opt-out counts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::macromodel::{
    demand_of, fleet_soc_pmf, step_pmf, ControlInput, FleetPmf, MacroOutput, Macromodel,
    TransitionData,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("measurement has {got} entries, expected {expected}")]
    Dimension { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Metering noise standard deviation as a fraction of nominal demand.
    pub demand_noise_frac: f64,
    /// Nominal group demand used to scale metering noise, kW.
    pub nominal_kw: f64,
    /// Diagonal of the process noise covariance.
    pub process_noise: f64,
    /// Diagonal of the initial covariance.
    pub initial_variance: f64,
    /// Append opt-out counts as a fourth measurement.
    pub use_opt_outs: bool,
    /// Multiplier on the whole measurement noise covariance.
    pub noise_scale: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            demand_noise_frac: 0.01,
            nominal_kw: 0.0,
            process_noise: 1e-6,
            initial_variance: 1e-3,
            use_opt_outs: false,
            noise_scale: 1.0,
        }
    }
}

/// One interval's measurements.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Measurement {
    pub demand_kw: f64,
    pub requests_charge: f64,
    pub requests_discharge: f64,
    pub opt_outs: f64,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepStats {
    /// Normalised innovation squared.
    pub nis: f64,
    pub innovation_demand_kw: f64,
    /// Euclidean size of the Kalman correction Kν.
    pub correction_norm: f64,
    /// Distance moved by the simplex projection.
    pub projection_norm: f64,
}

#[derive(Debug, Clone)]
pub struct EstimatorState {
    /// q̂[k|k−1], the prior for the interval about to be measured.
    pub q_prior: DVector<f64>,
    pub cov_prior: DMatrix<f64>,
    /// q̂[k−1|k−1] from the last update.
    pub q_post: DVector<f64>,
    pub cov_post: DMatrix<f64>,
    pub meas_noise: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    model: Macromodel,
    config: EstimatorConfig,
    beta: (f64, f64),
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// State transition matrix A_u and affine output pieces at control `u`.
/// The dynamics are linear in q for a fixed `u`, so each column is the
/// step of a unit vector.
pub fn linearize(u: &ControlInput, td: &TransitionData) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = td.grid.dim();
    let mut a = DMatrix::zeros(n, n);
    let mut c = DMatrix::zeros(4, n);
    let mut e = FleetPmf { q: vec![0.0; n] };
    let base = td.base_kw;
    for j in 0..n {
        e.q.iter_mut().for_each(|v| *v = 0.0);
        e.q[j] = 1.0;
        let (next, out) = step_pmf(&e, u, td);
        for i in 0..n {
            a[(i, j)] = next.q[i];
        }
        c[(0, j)] = demand_of(&e, td) - base;
        c[(1, j)] = out.requests_charge;
        c[(2, j)] = out.requests_discharge;
        c[(3, j)] = out.opt_outs;
    }
    (a, c)
}

/// Evaluate the step map at an arbitrary (not necessarily normalised) q.
pub fn transition_map(
    q: &DVector<f64>,
    u: &ControlInput,
    td: &TransitionData,
) -> (DVector<f64>, MacroOutput) {
    let (next, out) = step_pmf(
        &FleetPmf {
            q: q.iter().copied().collect(),
        },
        u,
        td,
    );
    (DVector::from_vec(next.q), out)
}

/// Gain and covariance after a measurement, Joseph form.
pub fn joseph_update(
    p: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), EstimatorError> {
    let s = c * p * c.transpose() + r;
    let chol = s.cholesky().ok_or(EstimatorError::SingularInnovation)?;
    // K = P Cᵀ S⁻¹, via S Kᵀ = C P.
    let k = chol.solve(&(c * p)).transpose();
    let n = p.nrows();
    let ikc = DMatrix::identity(n, n) - &k * c;
    let mut p_post = &ikc * p * ikc.transpose() + &k * r * k.transpose();
    symmetrize(&mut p_post);
    Ok((k, p_post))
}

pub fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p = (&*p + t) * 0.5;
}

impl EstimatorState {
    /// Start from the macromodel's current state and ledger.
    pub fn new(model: Macromodel, config: EstimatorConfig) -> Self {
        let q = DVector::from_vec(model.pmf().q);
        let n = q.len();
        let m = if config.use_opt_outs { 4 } else { 3 };
        Self {
            q_post: q.clone(),
            cov_post: DMatrix::identity(n, n) * config.initial_variance,
            q_prior: q,
            cov_prior: DMatrix::identity(n, n) * config.initial_variance,
            meas_noise: DMatrix::identity(m, m),
            process_noise: DMatrix::identity(n, n) * config.process_noise,
            model,
            config,
            beta: (0.0, 0.0),
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn transition(&self) -> &TransitionData {
        self.model.transition()
    }

    pub fn measurement_dim(&self) -> usize {
        if self.config.use_opt_outs {
            4
        } else {
            3
        }
    }

    /// Acceptance proportions from interval counts; an interval with no
    /// requests keeps the previous value.
    pub fn beta_from_counts(
        &mut self,
        req_c: u64,
        acc_c: u64,
        req_d: u64,
        acc_d: u64,
    ) -> (f64, f64) {
        if req_c > 0 {
            self.beta.0 = acc_c as f64 / req_c as f64;
        }
        if req_d > 0 {
            self.beta.1 = acc_d as f64 / req_d as f64;
        }
        self.beta
    }

    /// Measurement matrix for the interval: demand is the average of the
    /// start and end of the step, counts are linear in the prior.
    fn measurement_matrix(&self, a: &DMatrix<f64>, c_raw: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.ncols();
        let m = self.measurement_dim();
        let c_dem = c_raw.rows(0, 1);
        let dem = (c_dem * (DMatrix::identity(n, n) + a)) * 0.5;
        let mut c = DMatrix::zeros(m, n);
        c.row_mut(0).copy_from(&dem.row(0));
        for r in 1..m {
            c.row_mut(r).copy_from(&c_raw.row(r));
        }
        c
    }

    fn noise_for(&self, y_pred: &DVector<f64>) -> DMatrix<f64> {
        let m = self.measurement_dim();
        let nominal = if self.config.nominal_kw > 0.0 {
            self.config.nominal_kw
        } else {
            y_pred[0].abs().max(1.0)
        };
        let sd = (self.config.demand_noise_frac * nominal).max(1e-6);
        let mut r = DMatrix::zeros(m, m);
        r[(0, 0)] = sd * sd;
        for i in 1..m {
            // Poisson count variance, floored at one.
            r[(i, i)] = y_pred[i].max(1.0);
        }
        r * self.config.noise_scale
    }

    /// One measurement update for the interval just finished, followed by
    /// the time update to the next interval.
    pub fn ekf_step(
        &mut self,
        beta_c: f64,
        beta_d: f64,
        y: &Measurement,
    ) -> Result<StepStats, EstimatorError> {
        let td = self.model.transition().clone();
        let u = self.model.control(beta_c, beta_d);
        let (a, c_raw) = linearize(&u, &td);
        let c = self.measurement_matrix(&a, &c_raw);
        let mut yv = DVector::from_vec(vec![
            y.demand_kw - td.base_kw,
            y.requests_charge,
            y.requests_discharge,
        ]);
        if self.config.use_opt_outs {
            yv = yv.push(y.opt_outs);
        }
        let y_pred = &c * &self.q_prior;
        let r = self.noise_for(
            &(&y_pred + DVector::from_fn(yv.len(), |i, _| if i == 0 { td.base_kw } else { 0.0 })),
        );
        self.meas_noise = r.clone();
        let (k, p_post) = joseph_update(&self.cov_prior, &c, &r)?;
        let innov = &yv - &y_pred;
        let correction = &k * &innov;
        let raw = &self.q_prior + &correction;
        let q_post = project_simplex(&raw);
        let s = &c * &self.cov_prior * c.transpose() + &r;
        let nis = s
            .clone()
            .cholesky()
            .map(|ch| innov.dot(&ch.solve(&innov)))
            .unwrap_or(f64::NAN);
        let stats = StepStats {
            nis,
            innovation_demand_kw: innov[0],
            correction_norm: correction.norm(),
            projection_norm: (&q_post - &raw).norm(),
        };

        // Time update through the filter's own ledger.
        self.model.rescale_to(&FleetPmf {
            q: q_post.iter().copied().collect(),
        });
        self.model.step(beta_c, beta_d);
        let q_next = DVector::from_vec(self.model.pmf().q);
        let mut cov_next = &a * &p_post * a.transpose() + &self.process_noise;
        symmetrize(&mut cov_next);

        self.q_post = q_post;
        self.cov_post = p_post;
        self.q_prior = q_next;
        self.cov_prior = cov_next;
        Ok(stats)
    }

    /// Posterior PMF after the last update.
    pub fn pmf(&self) -> FleetPmf {
        FleetPmf {
            q: self.q_post.iter().copied().collect(),
        }
    }

    /// Predicted PMF for the current interval.
    pub fn prior_pmf(&self) -> FleetPmf {
        FleetPmf {
            q: self.q_prior.iter().copied().collect(),
        }
    }
}

/// Estimated fleet SoC and whether it sits within `margin` of a limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SocEstimate {
    pub z: f64,
    pub near_upper: bool,
    pub near_lower: bool,
}

pub fn estimated_soc(est: &EstimatorState, z_lower: f64, z_upper: f64, margin: f64) -> SocEstimate {
    let z = fleet_soc_pmf(&est.prior_pmf(), &est.transition().grid);
    SocEstimate {
        z,
        near_upper: z >= z_upper - margin,
        near_lower: z <= z_lower + margin,
    }
}
