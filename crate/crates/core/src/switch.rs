//! Switch layers: a learnable scale per channel, plus the sign statistics
//! used to decide when a channel has stopped mattering.
//!
//! Every update records the sign of each active `beta` (zero counts as
//! positive). The layer keeps an exponential moving average of that sign and
//! of its squared deviation:
//!
//! ```text
//! mean <- mu * mean + (1 - mu) * s
//! var  <- mu * var  + (1 - mu) * (s - mean)^2
//! ```
//!
//! seeded with `mean = s, var = 0` on the first observation. A channel whose
//! `beta` keeps crossing zero under the L1 pull has a large `var`; once it
//! exceeds the threshold the channel is screened out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenerConfig {
    /// EMA momentum, in `[0, 1)`.
    pub momentum: f64,
    /// Variance above which a channel is screened out. `f64::INFINITY` disables screening.
    #[serde(with = "crate::serde_ext::extended_f64")]
    pub threshold: f64,
}

impl Default for ScreenerConfig {
    fn default() -> Self {
        ScreenerConfig {
            momentum: 0.9,
            threshold: 0.5,
        }
    }
}

impl ScreenerConfig {
    pub fn new(momentum: f64, threshold: f64) -> Result<Self> {
        let cfg = ScreenerConfig { momentum, threshold };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "switch momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!(
                "switch threshold must be positive, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SwitchLayer<S> {
    pub beta: Tensor<S>,
    pub active: Vec<bool>,
    pub ema_mean: Vec<f64>,
    pub ema_var: Vec<f64>,
    pub initialized: Vec<bool>,
}

impl<S: Scalar> SwitchLayer<S> {
    pub fn new(beta: Tensor<S>) -> Result<Self> {
        if beta.rank() != 1 {
            return Err(Error::dim(format!("switch beta has shape {:?}", beta.shape())));
        }
        let c = beta.dim(0);
        Ok(SwitchLayer {
            beta,
            active: vec![true; c],
            ema_mean: vec![0.0; c],
            ema_var: vec![0.0; c],
            initialized: vec![false; c],
        })
    }

    /// `beta ~ N(0, 1)`.
    pub fn init(channels: usize, rng: &mut SeededRng) -> Self {
        Self::new(rng.normal_tensor(&[channels])).expect("rank-1 beta")
    }

    pub fn ones(channels: usize) -> Self {
        Self::new(Tensor::ones(&[channels])).expect("rank-1 beta")
    }

    pub fn channels(&self) -> usize {
        self.beta.dim(0)
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let c = self.channels();
        if self.active.len() != c || self.ema_mean.len() != c || self.ema_var.len() != c || self.initialized.len() != c
        {
            return Err(Error::dim("switch statistics differ in length from beta"));
        }
        Ok(())
    }

    /// Scales channel `i` of a single sample `(c, ...)` by `beta[i]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.scale_axis(0, self.beta.data())
    }

    /// Single-sample backward with the L1 subgradient `lambda * sgn(beta)` folded in.
    /// Returns `(grad_x, grad_beta)`.
    pub fn backward(&self, x: &Tensor<S>, grad_out: &Tensor<S>, lambda: S) -> Result<(Tensor<S>, Tensor<S>)> {
        if x.shape() != grad_out.shape() {
            return Err(Error::dim(format!(
                "switch input {:?} vs gradient {:?}",
                x.shape(),
                grad_out.shape()
            )));
        }
        let gx = grad_out.scale_axis(0, self.beta.data())?;
        let mut gb = self.channel_correlation(x, grad_out, 0);
        add_l1_subgradient(&mut gb, &self.beta, lambda);
        Ok((gx, gb))
    }

    pub(crate) fn forward_batch(&self, x: &Tensor<S>) -> Tensor<S> {
        x.scale_axis(1, self.beta.data()).expect("validated switch width")
    }

    pub(crate) fn backward_batch(&self, x: &Tensor<S>, g: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let gx = g.scale_axis(1, self.beta.data()).expect("validated switch width");
        (gx, self.channel_correlation(x, g, 1))
    }

    /// `Σ x·g` per channel, where channels live on `axis`.
    fn channel_correlation(&self, x: &Tensor<S>, g: &Tensor<S>, axis: usize) -> Tensor<S> {
        let (outer, c, inner) = x.split_at_axis(axis);
        let mut out = vec![S::zero(); c];
        for o in 0..outer {
            for (ch, acc) in out.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                for j in base..base + inner {
                    *acc += x.data()[j] * g.data()[j];
                }
            }
        }
        Tensor::vector(out)
    }

    /// Records the sign of every active `beta`; call once per optimizer update.
    pub fn observe_signs(&mut self, cfg: &ScreenerConfig) {
        let mu = cfg.momentum;
        for i in 0..self.channels() {
            if !self.active[i] {
                continue;
            }
            let s = if self.beta.data()[i] < S::zero() { -1.0 } else { 1.0 };
            if !self.initialized[i] {
                self.ema_mean[i] = s;
                self.ema_var[i] = 0.0;
                self.initialized[i] = true;
            } else {
                self.ema_mean[i] = mu * self.ema_mean[i] + (1.0 - mu) * s;
                let d = s - self.ema_mean[i];
                self.ema_var[i] = mu * self.ema_var[i] + (1.0 - mu) * d * d;
            }
        }
    }

    /// Active channels whose sign variance exceeds the threshold.
    pub fn screen(&self, cfg: &ScreenerConfig) -> Vec<usize> {
        (0..self.channels())
            .filter(|&i| self.active[i] && self.ema_var[i] > cfg.threshold)
            .collect()
    }

    /// Sets `beta` of the given channels to exactly zero and marks them inactive.
    pub fn deactivate(&mut self, channels: &[usize]) -> Result<()> {
        if let Some(&bad) = channels.iter().find(|&&i| i >= self.channels()) {
            return Err(Error::arg(format!(
                "channel {bad} out of range for switch of width {}",
                self.channels()
            )));
        }
        for &i in channels {
            self.active[i] = false;
            self.beta.data_mut()[i] = S::zero();
        }
        Ok(())
    }

    /// Forces `beta` of inactive channels back to zero.
    pub fn clamp_inactive(&mut self) {
        for (b, &a) in self.beta.data_mut().iter_mut().zip(&self.active) {
            if !a {
                *b = S::zero();
            }
        }
    }

    /// Drops bookkeeping for removed channels. `beta` itself is edited as a parameter.
    pub(crate) fn remove_channel_state(&mut self, channels: &[usize]) {
        let keep = |i: usize| !channels.contains(&i);
        self.active = retain_idx(&self.active, keep);
        self.ema_mean = retain_idx(&self.ema_mean, keep);
        self.ema_var = retain_idx(&self.ema_var, keep);
        self.initialized = retain_idx(&self.initialized, keep);
    }
}

fn retain_idx<T: Copy>(v: &[T], keep: impl Fn(usize) -> bool) -> Vec<T> {
    v.iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, &x)| x)
        .collect()
}

/// `g += lambda * sgn(beta)` with `sgn(0) = 0`.
pub(crate) fn add_l1_subgradient<S: Scalar>(g: &mut Tensor<S>, beta: &Tensor<S>, lambda: S) {
    for (gv, &b) in g.data_mut().iter_mut().zip(beta.data()) {
        if b > S::zero() {
            *gv += lambda;
        } else if b < S::zero() {
            *gv -= lambda;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn forward_cases() {
        let sw = SwitchLayer::<f64>::new(t(&[2], &[0.0, 1.0])).unwrap();
        let y = sw.forward(&t(&[2, 2], &[5.0, 5.0, 7.0, 7.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 7.0, 7.0]);

        let ones = SwitchLayer::<f64>::ones(3);
        let x = t(&[3, 1], &[1.0, -2.0, 3.0]);
        assert_eq!(ones.forward(&x).unwrap(), x);

        let mut rng = SeededRng::new(4);
        let sw = SwitchLayer::<f64>::init(8, &mut rng);
        let x = rng.normal_tensor::<f64>(&[8, 3, 2]);
        assert_eq!(sw.forward(&x).unwrap(), x.channel_scale(&sw.beta).unwrap());
        assert!(matches!(
            sw.forward(&rng.normal_tensor::<f64>(&[7, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_hand_chain_rule() {
        let sw = SwitchLayer::<f64>::new(t(&[1], &[0.5])).unwrap();
        let (gx, gb) = sw.backward(&t(&[1], &[2.0]), &t(&[1], &[3.0]), 0.1).unwrap();
        assert_eq!(gx.data(), &[1.5]);
        assert!((gb.data()[0] - 6.1).abs() < 1e-15);

        let sw = SwitchLayer::<f64>::new(t(&[2], &[1.0, -1.0])).unwrap();
        let (gx, gb) = sw.backward(&t(&[2], &[1.0, 2.0]), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert!(gx.data().iter().chain(gb.data()).all(|&v| v == 0.0));
        assert!(sw.backward(&t(&[2], &[1.0, 2.0]), &Tensor::zeros(&[3]), 0.0).is_err());
    }

    #[test]
    fn l1_subgradient_is_zero_at_zero() {
        let sw = SwitchLayer::<f64>::new(t(&[3], &[0.0, 2.0, -2.0])).unwrap();
        let (_, gb) = sw.backward(&Tensor::zeros(&[3]), &Tensor::zeros(&[3]), 0.25).unwrap();
        assert_eq!(gb.data(), &[0.0, 0.25, -0.25]);
    }

    #[test]
    fn constant_sign_is_a_fixed_point() {
        let cfg = ScreenerConfig::default();
        let mut sw = SwitchLayer::<f64>::new(t(&[2], &[0.3, 0.0])).unwrap();
        for _ in 0..200 {
            sw.observe_signs(&cfg);
            assert_eq!(sw.ema_mean, vec![1.0, 1.0]);
            assert_eq!(sw.ema_var, vec![0.0, 0.0]);
        }
        assert!(sw.screen(&cfg).is_empty());
    }

    #[test]
    fn memoryless_momentum_tracks_current_sign() {
        let cfg = ScreenerConfig::new(0.0, 0.5).unwrap();
        let mut sw = SwitchLayer::<f64>::new(t(&[1], &[1.0])).unwrap();
        for step in 0..10 {
            let b = if step % 2 == 0 { 1.0 } else { -1.0 };
            sw.beta.data_mut()[0] = b;
            sw.observe_signs(&cfg);
            assert_eq!(sw.ema_mean[0], b);
            assert_eq!(sw.ema_var[0], 0.0);
        }
    }

    /// Independent replay of the EMA recurrence on a sign sequence.
    fn simulate(signs: &[f64], mu: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let (mut m, mut v) = (signs[0], 0.0);
        out.push(v);
        for &s in &signs[1..] {
            m = mu * m + (1.0 - mu) * s;
            v = mu * v + (1.0 - mu) * (s - m) * (s - m);
            out.push(v);
        }
        out
    }

    #[test]
    fn alternating_signs_cross_half_on_fourth_update() {
        let signs: Vec<f64> = (0..30).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let oracle = simulate(&signs, 0.9);
        let first = oracle.iter().position(|&v| v > 0.5).unwrap() + 1;
        assert_eq!(first, 4);
        // Dips back under the threshold once before settling above it.
        assert!(oracle[4] < 0.5 && oracle[5..].iter().all(|&v| v > 0.5));

        let cfg = ScreenerConfig::default();
        let mut sw = SwitchLayer::<f64>::new(t(&[1], &[1.0])).unwrap();
        for (i, &s) in signs.iter().enumerate() {
            sw.beta.data_mut()[0] = s;
            sw.observe_signs(&cfg);
            assert!((sw.ema_var[0] - oracle[i]).abs() < 1e-15);
            assert_eq!(sw.screen(&cfg).is_empty(), oracle[i] <= 0.5);
        }
    }

    #[test]
    fn pure_l1_descent_is_flagged_on_fifth_update() {
        // beta <- beta - step * sgn(beta), starting at 0.3 with step 0.1.
        let step = 0.1;
        let mut b: f64 = 0.3;
        let mut signs = Vec::new();
        for _ in 0..100 {
            b -= step * b.signum() * (b != 0.0) as u8 as f64;
            signs.push(if b < 0.0 { -1.0 } else { 1.0 });
        }
        let oracle = simulate(&signs, 0.9);
        let flagged_at = oracle.iter().position(|&v| v > 0.5).unwrap() + 1;
        assert_eq!(flagged_at, 5);

        let cfg = ScreenerConfig::default();
        let mut sw = SwitchLayer::<f64>::new(t(&[1], &[0.3])).unwrap();
        let mut hit = None;
        for k in 1..=100 {
            let (_, g) = sw.backward(&t(&[1], &[0.0]), &t(&[1], &[0.0]), 1.0).unwrap();
            sw.beta.data_mut()[0] -= step * g.data()[0];
            sw.observe_signs(&cfg);
            if hit.is_none() && !sw.screen(&cfg).is_empty() {
                hit = Some(k);
            }
        }
        assert_eq!(hit, Some(flagged_at));
    }

    #[test]
    fn screen_thresholds_active_channels_only() {
        let cfg = ScreenerConfig::new(0.9, 0.5).unwrap();
        let mut sw = SwitchLayer::<f64>::new(t(&[2], &[1.0, 1.0])).unwrap();
        sw.ema_var = vec![0.6, 0.1];
        assert_eq!(sw.screen(&cfg), vec![0]);
        sw.deactivate(&[0]).unwrap();
        assert!(sw.screen(&cfg).is_empty());
        assert_eq!(sw.beta.data()[0], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(ScreenerConfig::new(1.0, 0.5).is_err());
        assert!(ScreenerConfig::new(-0.1, 0.5).is_err());
        assert!(ScreenerConfig::new(0.9, 0.0).is_err());
        assert!(ScreenerConfig::new(0.9, f64::INFINITY).is_ok());
    }
}
