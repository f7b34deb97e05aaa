//! Sigmoid temperature scaling of raw uncertainty and its label-free online
//! adaptation from verifier outcomes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub const MIN_TEMPERATURE: f64 = 0.5;
pub const MAX_TEMPERATURE: f64 = 2.0;

const RAISE_FACTOR: f64 = 1.1;
const LOWER_FACTOR: f64 = 0.9;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sigmoid((u - 0.5) / T)`.
///
/// This is not the identity at `T = 1`: the unit interval is compressed to
/// roughly `[0.378, 0.622]`. Smaller temperatures stretch it towards
/// `[0.269, 0.731]`.
pub fn calibrate(u: f64, temperature: f64) -> f64 {
    sigmoid((u - 0.5) / temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub raw_u: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub capacity: usize,
    pub update_interval: usize,
    pub tau_low: f64,
    pub tau_high: f64,
    pub theta_acc: f64,
    pub min_bucket: usize,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        CalibrationParams {
            capacity: 200,
            update_interval: 20,
            tau_low: 0.3,
            tau_high: 0.7,
            theta_acc: 0.7,
            min_bucket: 5,
        }
    }
}

/// Pass rates seen at an update check.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketRates {
    pub low_count: usize,
    pub low_pass_rate: Option<f64>,
    pub high_count: usize,
    pub high_pass_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub temperature: f64,
    pub observations: VecDeque<Observation>,
    pub since_update: usize,
    pub updates: u64,
    pub params: CalibrationParams,
    #[serde(default)]
    pub last_rates: Option<BucketRates>,
}

impl Default for CalibrationState {
    fn default() -> Self {
        Self::new(CalibrationParams::default(), 1.0)
    }
}

impl CalibrationState {
    pub fn new(params: CalibrationParams, initial_temperature: f64) -> Self {
        CalibrationState {
            temperature: initial_temperature.clamp(MIN_TEMPERATURE, MAX_TEMPERATURE),
            observations: VecDeque::with_capacity(params.capacity),
            since_update: 0,
            updates: 0,
            params,
            last_rates: None,
        }
    }

    /// Drops all observations and restores `initial_temperature`.
    pub fn reset(&mut self, initial_temperature: f64) {
        *self = Self::new(self.params, initial_temperature);
    }

    pub fn calibrate(&self, u: f64) -> f64 {
        calibrate(u, self.temperature)
    }

    pub fn record_observation(&mut self, raw_u: f64, passed: bool) {
        if self.params.capacity == 0 {
            self.since_update += 1;
            return;
        }
        if self.observations.len() == self.params.capacity {
            self.observations.pop_front();
        }
        self.observations.push_back(Observation {
            raw_u: raw_u.clamp(0.0, 1.0),
            passed,
        });
        self.since_update += 1;
    }

    pub fn bucket_rates(&self) -> BucketRates {
        let rate = |pred: &dyn Fn(f64) -> bool| {
            let (mut n, mut pass) = (0usize, 0usize);
            for o in self.observations.iter().filter(|o| pred(o.raw_u)) {
                n += 1;
                pass += o.passed as usize;
            }
            let r = if n >= self.params.min_bucket && n > 0 {
                Some(pass as f64 / n as f64)
            } else {
                None
            };
            (n, r)
        };
        let (low_count, low_pass_rate) = rate(&|u| u < self.params.tau_low);
        let (high_count, high_pass_rate) = rate(&|u| u > self.params.tau_high);
        BucketRates {
            low_count,
            low_pass_rate,
            high_count,
            high_pass_rate,
        }
    }

    /// Applies the update rule once `since_update` reaches the interval.
    /// Returns whether a check ran (not whether `T` changed).
    pub fn maybe_update_temperature(&mut self) -> bool {
        if self.since_update < self.params.update_interval {
            return false;
        }
        let rates = self.bucket_rates();
        let factor = match (rates.low_pass_rate, rates.high_pass_rate) {
            (Some(low), _) if low < self.params.theta_acc => RAISE_FACTOR,
            (_, Some(high)) if high > self.params.theta_acc => LOWER_FACTOR,
            _ => 1.0,
        };
        self.temperature = (self.temperature * factor).clamp(MIN_TEMPERATURE, MAX_TEMPERATURE);
        self.since_update = 0;
        self.updates += 1;
        self.last_rates = Some(rates);
        true
    }
}
