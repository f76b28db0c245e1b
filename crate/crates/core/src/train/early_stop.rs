//! Patience-based early stopping on a maximised validation metric.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self {
            patience,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improve: 0,
        }
    }

    /// Record the metric of 1-based `epoch`. Only strict improvements count;
    /// NaN never improves.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.epochs_since_improve = 0;
            Verdict::Improved
        } else {
            self.epochs_since_improve += 1;
            if self.epochs_since_improve >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

/// Feed `metrics` until the stopper fires; returns `(epochs run, best epoch)`.
pub fn simulate(patience: usize, max_epochs: usize, metrics: impl IntoIterator<Item = f64>) -> (usize, usize) {
    let mut s = EarlyStopper::new(patience);
    let mut run = 0;
    for (i, m) in metrics.into_iter().take(max_epochs).enumerate() {
        run = i + 1;
        if s.observe(run, m) == Verdict::Stop {
            break;
        }
    }
    (run, s.best_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_stops_after_patience() {
        let seq = [0.50, 0.60, 0.61, 0.60, 0.60, 0.60, 0.60, 0.60, 0.9, 0.9];
        assert_eq!(simulate(5, 100, seq), (8, 3));
    }

    #[test]
    fn monotone_runs_to_the_limit() {
        assert_eq!(simulate(5, 100, (0..200).map(|i| i as f64)), (100, 100));
    }

    #[test]
    fn equal_values_are_not_improvements() {
        assert_eq!(simulate(2, 100, [0.5, 0.5, 0.5]), (3, 1));
        assert_eq!(simulate(2, 100, [f64::NAN, 0.1, f64::NAN]), (3, 2));
    }
}
