//! Learning-rate schedule: linear warmup, inverse-square-root decay,
//! normalized by the square root of the hidden size.

#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub base_rate: f64,
    pub warmup_steps: u64,
    pub hidden_size: usize,
    pub total_steps: u64,
    pub batch_size: usize,
}

impl TrainSchedule {
    pub fn new(base_rate: f64, warmup_steps: u64, hidden_size: usize, total_steps: u64, batch_size: usize) -> Self {
        assert!(warmup_steps >= 1, "warmup_steps must be >= 1");
        TrainSchedule {
            base_rate,
            warmup_steps,
            hidden_size,
            total_steps,
            batch_size,
        }
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        assert!(step >= 1, "steps are 1-based");
        let s = step as f64;
        let w = self.warmup_steps as f64;
        let h = self.hidden_size as f64;
        self.base_rate * h.powf(-0.5) * (s * w.powf(-1.5)).min(s.powf(-0.5))
    }
}
