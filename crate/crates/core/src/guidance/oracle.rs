use super::{GuidanceBackend, GuidanceGrad, GuidanceRequest, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Exact denoiser for a data distribution that is a point mass at the
/// target: `eps_hat(x_t) = (x_t - alpha_t * target) / sigma_t`. The prompt
/// selects `target_cond`, the empty prompt `target_uncond`.
#[derive(Clone, Debug)]
pub struct DeltaOracle {
    target_cond: Image,
    target_uncond: Image,
    schedule: NoiseSchedule,
}

impl DeltaOracle {
    pub fn new(target_cond: Image, target_uncond: Image, schedule: NoiseSchedule) -> Result<Self> {
        target_cond.check_shape(&target_uncond, "delta oracle targets")?;
        Ok(DeltaOracle {
            target_cond,
            target_uncond,
            schedule,
        })
    }

    pub fn target_cond(&self) -> &Image {
        &self.target_cond
    }

    pub fn target_uncond(&self) -> &Image {
        &self.target_uncond
    }

    /// Single-precision evaluation in the fixed operation order of
    /// [`delta_terms_f32`]; what a remote echo server must reproduce bit for bit.
    pub fn evaluate_f32(&self, req: &GuidanceRequest<'_>) -> Result<GuidanceGrad> {
        req.validate()?;
        req.x.check_shape(&self.target_cond, "delta oracle target")?;
        self.schedule.check_timestep(req.t)?;
        let f32s = |img: &Image| img.data().iter().map(|&v| v as f32).collect::<Vec<f32>>();
        let (gn, gs) = delta_terms_f32(
            &f32s(req.x),
            &f32s(req.eps),
            &f32s(&self.target_cond),
            &f32s(&self.target_uncond),
            self.schedule.alpha(req.t) as f32,
            self.schedule.sigma(req.t) as f32,
        );
        let (h, w, c) = req.x.dims();
        let back = |v: Vec<f32>| Image::from_vec(h, w, c, v.into_iter().map(f64::from).collect());
        Ok(GuidanceGrad {
            grad_noise: back(gn)?,
            grad_sem: back(gs)?,
            t: req.t,
        })
    }
}

/// Delta-oracle gradient terms in `f32`, element by element:
///
/// ```text
/// xt = alpha * x + sigma * eps
/// ec = (xt - alpha * tc) / sigma
/// eu = (xt - alpha * tu) / sigma
/// w  = sigma * sigma
/// grad_noise = w * (ec - eps)
/// grad_sem   = w * (ec - eu)
/// ```
pub fn delta_terms_f32(
    x: &[f32],
    eps: &[f32],
    target_cond: &[f32],
    target_uncond: &[f32],
    alpha: f32,
    sigma: f32,
) -> (Vec<f32>, Vec<f32>) {
    let w = sigma * sigma;
    let mut grad_noise = Vec::with_capacity(x.len());
    let mut grad_sem = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xt = alpha * x[i] + sigma * eps[i];
        let ec = (xt - alpha * target_cond[i]) / sigma;
        let eu = (xt - alpha * target_uncond[i]) / sigma;
        grad_noise.push(w * (ec - eps[i]));
        grad_sem.push(w * (ec - eu));
    }
    (grad_noise, grad_sem)
}

impl NoisePredictor for DeltaOracle {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(&self, x_t: &Image, t: usize, conditional: bool) -> Result<Image> {
        self.schedule.check_timestep(t)?;
        let target = if conditional {
            &self.target_cond
        } else {
            &self.target_uncond
        };
        x_t.check_shape(target, "delta oracle target")?;
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        let mut out = x_t.clone();
        for (o, tv) in out.data_mut().iter_mut().zip(target.data()) {
            *o = (*o - a * tv) / s;
        }
        Ok(out)
    }
}

impl GuidanceBackend for DeltaOracle {
    fn name(&self) -> &str {
        "delta"
    }

    fn evaluate(&mut self, request: &GuidanceRequest<'_>) -> Result<GuidanceGrad> {
        self.decomposed(request)
    }
}

/// Isotropic Gaussian mixture `sum_m w_m N(mean_m, gamma^2 I)`.
#[derive(Clone, Debug)]
pub struct Mixture {
    means: Vec<Image>,
    log_weights: Vec<f64>,
    gamma: f64,
}

impl Mixture {
    pub fn new(means: Vec<Image>, weights: Vec<f64>, gamma: f64) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "mixture needs matching nonempty means/weights, got {} / {}",
                means.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "mixture weights must be positive and sum to 1".into(),
            ));
        }
        if !(gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be > 0, got {gamma}")));
        }
        for m in &means[1..] {
            m.check_shape(&means[0], "mixture means")?;
        }
        Ok(Mixture {
            means,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            gamma,
        })
    }

    pub fn means(&self) -> &[Image] {
        &self.means
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Weighted average of the component means.
    pub fn mean(&self) -> Image {
        let mut out = Image::zeros(
            self.means[0].height(),
            self.means[0].width(),
            self.means[0].channels(),
        );
        for (m, lw) in self.means.iter().zip(&self.log_weights) {
            out.add_scaled(m, lw.exp());
        }
        out
    }

    /// `E[x_0 | x_t]` under `x_t = alpha x_0 + sigma eps`.
    pub fn posterior_mean(&self, x_t: &Image, alpha: f64, sigma: f64) -> Result<Image> {
        x_t.check_shape(&self.means[0], "mixture mean")?;
        let g2 = self.gamma * self.gamma;
        let var = alpha * alpha * g2 + sigma * sigma;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.log_weights)
            .map(|(m, lw)| {
                let d2: f64 = x_t
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(x, mu)| (x - alpha * mu).powi(2))
                    .sum();
                lw - d2 / (2.0 * var)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= total);

        // Per component: mean + (alpha gamma^2 / var) (x_t - alpha mean).
        let gain = alpha * g2 / var;
        let mut out = Image::zeros(x_t.height(), x_t.width(), x_t.channels());
        for (m, r) in self.means.iter().zip(&resp) {
            for ((o, x), mu) in out.data_mut().iter_mut().zip(x_t.data()).zip(m.data()) {
                *o += r * (mu + gain * (x - alpha * mu));
            }
        }
        Ok(out)
    }
}

/// Exact posterior-mean denoiser for Gaussian-mixture data. The prompt
/// selects `cond`, the empty prompt `uncond`.
#[derive(Clone, Debug)]
pub struct GmmOracle {
    cond: Mixture,
    uncond: Mixture,
    schedule: NoiseSchedule,
}

impl GmmOracle {
    pub fn new(cond: Mixture, uncond: Mixture, schedule: NoiseSchedule) -> Result<Self> {
        cond.means[0].check_shape(&uncond.means[0], "gmm cond/uncond")?;
        Ok(GmmOracle {
            cond,
            uncond,
            schedule,
        })
    }

    pub fn cond(&self) -> &Mixture {
        &self.cond
    }
}

/// Gaussian-mixture oracle whose unconditional distribution is a single
/// component at the mixture's weighted mean with the same spread.
pub fn gmm_oracle(means: Vec<Image>, weights: Vec<f64>, gamma: f64, schedule: NoiseSchedule) -> Result<GmmOracle> {
    let cond = Mixture::new(means, weights, gamma)?;
    let uncond = Mixture::new(vec![cond.mean()], vec![1.0], gamma)?;
    GmmOracle::new(cond, uncond, schedule)
}

impl NoisePredictor for GmmOracle {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(&self, x_t: &Image, t: usize, conditional: bool) -> Result<Image> {
        self.schedule.check_timestep(t)?;
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        let mix = if conditional { &self.cond } else { &self.uncond };
        let x0 = mix.posterior_mean(x_t, a, s)?;
        let mut out = x_t.clone();
        for (o, m) in out.data_mut().iter_mut().zip(x0.data()) {
            *o = (*o - a * m) / s;
        }
        Ok(out)
    }
}

impl GuidanceBackend for GmmOracle {
    fn name(&self) -> &str {
        "gmm"
    }

    fn evaluate(&mut self, request: &GuidanceRequest<'_>) -> Result<GuidanceGrad> {
        self.decomposed(request)
    }
}

#[cfg(test)]
mod tests {
    use super::super::Condition;
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear_beta(1000).unwrap()
    }

    fn img(h: usize, w: usize, phase: f64) -> Image {
        Image::from_vec(h, w, 3, (0..h * w * 3).map(|i| ((i as f64 + phase) * 1.3).sin() * 0.5 + 0.5).collect())
            .unwrap()
    }

    #[test]
    fn delta_matched_noise_vanishes() {
        let s = sched();
        let target = img(2, 2, 0.0);
        let eps = img(2, 2, 5.0);
        let mut oracle = DeltaOracle::new(target.clone(), target.clone(), s.clone()).unwrap();
        let cond = Condition::default();
        let t = 500;
        let eps_hat = oracle.predict(&s.noised(&target, &eps, t), t, true).unwrap();
        assert!(eps_hat.max_abs_diff(&eps) < 1e-12);
        let g = oracle
            .evaluate(&GuidanceRequest { x: &target, eps: &eps, t, condition: &cond })
            .unwrap();
        assert!(g.grad_noise.data().iter().all(|v| v.abs() < 1e-12));
        assert!(g.grad_sem.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_semantic_term_closed_form() {
        let s = sched();
        let (tc, tu) = (img(2, 2, 0.0), img(2, 2, 3.0));
        let mut oracle = DeltaOracle::new(tc.clone(), tu.clone(), s.clone()).unwrap();
        let cond = Condition::default();
        let (x, eps) = (img(2, 2, 7.0), img(2, 2, 11.0));
        for t in [20, 400, 980] {
            let g = oracle.evaluate(&GuidanceRequest { x: &x, eps: &eps, t, condition: &cond }).unwrap();
            let (a, sg) = (s.alpha(t), s.sigma(t));
            for i in 0..12 {
                let want = sg * sg * a * (tu.data()[i] - tc.data()[i]) / sg;
                assert!((g.grad_sem.data()[i] - want).abs() < 1e-12);
                let want_noise = sg * a * (x.data()[i] - tc.data()[i]);
                assert!((g.grad_noise.data()[i] - want_noise).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_rejects_t0() {
        let mut oracle = DeltaOracle::new(img(1, 1, 0.0), img(1, 1, 0.0), sched()).unwrap();
        let (x, cond) = (img(1, 1, 1.0), Condition::default());
        assert!(oracle.evaluate(&GuidanceRequest { x: &x, eps: &x, t: 0, condition: &cond }).is_err());
        assert!(oracle.evaluate_f32(&GuidanceRequest { x: &x, eps: &x, t: 0, condition: &cond }).is_err());
    }

    #[test]
    fn gmm_degenerates_to_delta() {
        let s = sched();
        let (tc, x, eps) = (img(3, 2, 0.0), img(3, 2, 4.0), img(3, 2, 8.0));
        let delta = DeltaOracle::new(tc.clone(), tc.clone(), s.clone()).unwrap();
        let gmm = gmm_oracle(vec![tc.clone()], vec![1.0], 1e-6, s.clone()).unwrap();
        for t in [20, 300, 999] {
            let x_t = s.noised(&x, &eps, t);
            let a = delta.predict(&x_t, t, true).unwrap();
            let b = gmm.predict(&x_t, t, true).unwrap();
            // The gap is O(gamma^2 / sigma_t^2) relative.
            let rel = a.max_abs_diff(&b) / a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(rel < 1e-8, "t {t}: {rel}");
        }
    }

    #[test]
    fn gmm_equal_means_is_single_gaussian() {
        let s = sched();
        let m = img(2, 2, 1.0);
        let two = gmm_oracle(vec![m.clone(), m.clone()], vec![0.3, 0.7], 0.2, s.clone()).unwrap();
        let one = gmm_oracle(vec![m.clone()], vec![1.0], 0.2, s.clone()).unwrap();
        let x_t = img(2, 2, 9.0);
        let a = two.predict(&x_t, 250, true).unwrap();
        let b = one.predict(&x_t, 250, true).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        // Equal means also make the unconditional mixture identical.
        let mut two = two;
        let cond = Condition::default();
        let g = two.evaluate(&GuidanceRequest { x: &x_t, eps: &x_t, t: 250, condition: &cond }).unwrap();
        assert!(g.grad_sem.data().iter().all(|v| v.abs() < 1e-12));
    }

    /// Posterior mean by trapezoid quadrature over x0 for a scalar mixture.
    fn quadrature_eps(mu: [f64; 2], w: [f64; 2], gamma: f64, x_t: f64, alpha: f64, sigma: f64) -> f64 {
        let (lo, hi, n) = (-6.0, 6.0, 200_000);
        let dx = (hi - lo) / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let x0 = lo + i as f64 * dx;
            let prior: f64 = (0..2)
                .map(|m| w[m] * (-(x0 - mu[m]).powi(2) / (2.0 * gamma * gamma)).exp() / gamma)
                .sum();
            let lik = (-(x_t - alpha * x0).powi(2) / (2.0 * sigma * sigma)).exp();
            let wt = if i == 0 || i == n { 0.5 } else { 1.0 };
            num += wt * x0 * prior * lik;
            den += wt * prior * lik;
        }
        (x_t - alpha * num / den) / sigma
    }

    #[test]
    fn gmm_matches_quadrature() {
        let s = sched();
        let (mu, w, gamma) = ([-0.8, 1.1], [0.35, 0.65], 0.4);
        let oracle = gmm_oracle(
            vec![Image::from_pixel(1, 1, &[mu[0]]), Image::from_pixel(1, 1, &[mu[1]])],
            w.to_vec(),
            gamma,
            s.clone(),
        )
        .unwrap();
        for (t, xt) in [(100, 0.9), (500, -0.3), (900, 0.05), (300, 1.7)] {
            let got = oracle.predict(&Image::from_pixel(1, 1, &[xt]), t, true).unwrap().get(0, 0, 0);
            let want = quadrature_eps(mu, w, gamma, xt, s.alpha(t), s.sigma(t));
            assert!((got - want).abs() < 1e-6, "t {t}: {got} vs {want}");
        }
    }

    #[test]
    fn mixture_validation() {
        let m = img(1, 1, 0.0);
        assert!(Mixture::new(vec![m.clone()], vec![0.5], 0.1).is_err());
        assert!(Mixture::new(vec![m.clone()], vec![1.0], 0.0).is_err());
        assert!(Mixture::new(vec![m.clone(), img(2, 1, 0.0)], vec![0.5, 0.5], 0.1).is_err());
    }
}
