use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

/// End-use consumption modelled as Poisson-arriving heat pulses.
///
/// Each pulse removes a normally distributed amount of heat (truncated at
/// zero) spread evenly over `duration_s`; a zero duration removes it at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawProcess {
    pub rate_per_s: f64,
    pub mean_kj: f64,
    pub sd_kj: f64,
    pub duration_s: f64,
    /// (seconds remaining, kW) of every pulse still in progress.
    #[serde(skip)]
    active: Vec<(f64, f64)>,
    #[serde(skip)]
    arrivals: u64,
}

impl DrawProcess {
    pub fn new(rate_per_s: f64, mean_kj: f64, sd_kj: f64, duration_s: f64) -> Self {
        assert!(rate_per_s >= 0.0, "pulse rate must be non-negative");
        Self {
            rate_per_s,
            mean_kj,
            sd_kj,
            duration_s,
            active: Vec::new(),
            arrivals: 0,
        }
    }

    pub fn none() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    /// Long-run average heat removal in kW.
    pub fn mean_power_kw(&self) -> f64 {
        self.rate_per_s * self.mean_kj
    }

    /// Total pulses that have arrived so far.
    pub fn arrivals(&self) -> u64 {
        self.arrivals
    }

    /// Start a pulse now, bypassing the arrival process.
    pub fn inject(&mut self, magnitude_kj: f64) {
        self.start_pulse(magnitude_kj.max(0.0));
    }

    fn start_pulse(&mut self, kj: f64) -> f64 {
        if self.duration_s > 0.0 {
            self.active.push((self.duration_s, kj / self.duration_s));
            0.0
        } else {
            kj
        }
    }

    /// Advance by `dt` seconds and return the heat Q (kJ) removed in that time.
    pub fn sample<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) -> f64 {
        let mut q = 0.0;
        let lambda = self.rate_per_s * dt;
        if lambda > 0.0 {
            let n = Poisson::new(lambda)
                .map(|d| d.sample(rng) as u64)
                .unwrap_or(0);
            if n > 0 {
                self.arrivals += n;
                let mag = Normal::new(self.mean_kj, self.sd_kj.max(0.0)).ok();
                for _ in 0..n {
                    let kj = mag.map_or(self.mean_kj, |d| d.sample(rng)).max(0.0);
                    q += self.start_pulse(kj);
                }
            }
        }
        for pulse in &mut self.active {
            let on = pulse.0.min(dt);
            q += on * pulse.1;
            pulse.0 -= on;
        }
        self.active.retain(|p| p.0 > 1e-12);
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_never_draws() {
        let mut d = DrawProcess::new(0.0, 500.0, 50.0, 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            assert_eq!(d.sample(1.0, &mut rng), 0.0);
        }
    }

    #[test]
    fn single_pulse_fully_covered() {
        let mut d = DrawProcess::new(0.0, 0.0, 0.0, 30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        d.inject(250.0);
        let q = d.sample(60.0, &mut rng);
        assert!((q - 250.0).abs() < 1e-9);
        assert_eq!(d.sample(60.0, &mut rng), 0.0);
    }

    #[test]
    fn pulse_is_spread_over_its_duration() {
        let mut d = DrawProcess::new(0.0, 0.0, 0.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        d.inject(100.0);
        let total: f64 = (0..4).map(|_| d.sample(3.0, &mut rng)).sum();
        assert!((total - 100.0).abs() < 1e-9);
    }

    #[test]
    fn arrival_count_matches_poisson() {
        // λΔt = 0.001 over 10⁶ ticks: count ~ Poisson(1000), σ ≈ 31.6.
        let mut d = DrawProcess::new(0.001, 100.0, 10.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1_000_000 {
            d.sample(1.0, &mut rng);
        }
        let n = d.arrivals() as f64;
        assert!((n - 1000.0).abs() < 3.0 * 1000f64.sqrt(), "n = {n}");
    }

    #[test]
    fn window_counts_pass_chi_square() {
        // 2000 windows of 500 ticks at λΔt = 0.001 (expected 0.5 per window).
        // Bin counts 0, 1, 2, ≥3 and compare with Poisson(0.5).
        let mut d = DrawProcess::new(0.001, 1.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hist = [0f64; 4];
        let mut last = 0;
        for _ in 0..2000 {
            for _ in 0..500 {
                d.sample(1.0, &mut rng);
            }
            let k = (d.arrivals() - last) as usize;
            last = d.arrivals();
            hist[k.min(3)] += 1.0;
        }
        let m = 0.5f64;
        let p0 = (-m).exp();
        let p1 = p0 * m;
        let p2 = p1 * m / 2.0;
        let probs = [p0, p1, p2, 1.0 - p0 - p1 - p2];
        let chi2: f64 = hist
            .iter()
            .zip(probs)
            .map(|(o, p)| (o - 2000.0 * p).powi(2) / (2000.0 * p))
            .sum();
        // 3 degrees of freedom, 99.9th percentile = 16.27.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn mean_power_is_long_run_average() {
        let mut d = DrawProcess::new(1.0 / 300.0, 333.0, 30.0, 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let secs = 2_000_000;
        let total: f64 = (0..secs).map(|_| d.sample(1.0, &mut rng)).sum();
        let avg = total / secs as f64;
        // ≈6700 arrivals: relative σ of the count is ≈1.2%.
        assert!(
            (avg - d.mean_power_kw()).abs() / d.mean_power_kw() < 0.05,
            "{avg}"
        );
    }
}
