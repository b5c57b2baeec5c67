//! Shared training-loop plumbing: divergence detection and loss curves.

use crate::CoreError;

/// Flags a run as diverged when the loss stays above `factor ×` the initial
/// loss for `patience` consecutive observations, or ever goes non-finite.
#[derive(Debug, Clone)]
pub struct DivergenceWatch {
    factor: f64,
    patience: usize,
    initial: Option<f64>,
    consecutive: usize,
}

impl Default for DivergenceWatch {
    fn default() -> Self {
        Self { factor: 10.0, patience: 100, initial: None, consecutive: 0 }
    }
}

impl DivergenceWatch {
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<(), CoreError> {
        let initial = *self.initial.get_or_insert(loss);
        if !loss.is_finite() {
            return Err(CoreError::TrainingDiverged { step, loss, initial });
        }
        if loss > self.factor * initial {
            self.consecutive += 1;
            if self.consecutive >= self.patience {
                return Err(CoreError::TrainingDiverged { step, loss, initial });
            }
        } else {
            self.consecutive = 0;
        }
        Ok(())
    }

    pub fn initial(&self) -> Option<f64> {
        self.initial
    }
}

/// Downsampled loss curve: keeps every `stride`-th observation plus the last.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
    #[serde(skip)]
    stride: usize,
}

impl LossCurve {
    pub fn with_stride(stride: usize) -> Self {
        Self { points: Vec::new(), stride: stride.max(1) }
    }

    pub fn push(&mut self, step: usize, loss: f64) {
        if step % self.stride.max(1) == 0 {
            self.points.push((step, loss));
        }
    }

    pub fn push_final(&mut self, step: usize, loss: f64) {
        if self.points.last().map(|&(s, _)| s) != Some(step) {
            self.points.push((step, loss));
        }
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.points.first().map(|&(_, l)| l)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.points.last().map(|&(_, l)| l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steady_loss_never_diverges() {
        let mut watch = DivergenceWatch::default();
        for step in 0..500 {
            watch.observe(step, 1.0 + (step as f64 * 0.01).sin()).unwrap();
        }
    }

    #[test]
    fn sustained_blowup_is_flagged_after_patience() {
        let mut watch = DivergenceWatch::default();
        watch.observe(0, 1.0).unwrap();
        let mut failed_at = None;
        for step in 1..300 {
            if watch.observe(step, 50.0).is_err() {
                failed_at = Some(step);
                break;
            }
        }
        assert_eq!(failed_at, Some(100));
    }

    #[test]
    fn transient_spike_is_forgiven() {
        let mut watch = DivergenceWatch::default();
        watch.observe(0, 1.0).unwrap();
        for step in 1..90 {
            watch.observe(step, 50.0).unwrap();
        }
        watch.observe(90, 1.0).unwrap(); // recovery resets the counter
        for step in 91..180 {
            watch.observe(step, 50.0).unwrap();
        }
    }

    #[test]
    fn nan_loss_fails_immediately() {
        let mut watch = DivergenceWatch::default();
        watch.observe(0, 1.0).unwrap();
        assert!(watch.observe(1, f64::NAN).is_err());
    }

    #[test]
    fn curve_keeps_stride_and_final_points() {
        let mut curve = LossCurve::with_stride(10);
        for step in 0..25 {
            curve.push(step, step as f64);
        }
        curve.push_final(24, 24.0);
        assert_eq!(curve.points, vec![(0, 0.0), (10, 10.0), (20, 20.0), (24, 24.0)]);
    }
}
