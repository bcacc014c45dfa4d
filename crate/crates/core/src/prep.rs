//! Preprocessing ahead of the labeler: edge-padded moving average,
//! per-batch standard scaling and the batch average rate of change.

use thiserror::Error;

/// Standard deviation below which a batch counts as constant.
pub const DEGENERATE_STD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PrepError {
    #[error("empty input series")]
    EmptyInput,
    #[error("smoothing window must be odd and >= 1, got {0}")]
    InvalidWindow(usize),
    #[error("batch needs at least 2 values, got {0}")]
    TooShort(usize),
    #[error("batch has zero variance")]
    DegenerateBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmoothingConfig {
    pub window_w: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { window_w: 5 }
    }
}

impl SmoothingConfig {
    pub fn new(window_w: usize) -> Result<Self, PrepError> {
        let cfg = SmoothingConfig { window_w };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        if self.window_w == 0 || self.window_w % 2 == 0 {
            return Err(PrepError::InvalidWindow(self.window_w));
        }
        Ok(())
    }

    pub fn half_width(&self) -> usize {
        self.window_w / 2
    }
}

/// Uniform-kernel moving average with edge-value padding, so the output has
/// the same length as the input.
pub fn moving_average(series: &[f64], cfg: &SmoothingConfig) -> Result<Vec<f64>, PrepError> {
    cfg.validate()?;
    if series.is_empty() {
        return Err(PrepError::EmptyInput);
    }
    Ok(smooth_range(series, 0..series.len(), cfg))
}

/// Moving-average values for `range` of `series`, padding with the series'
/// edge values. Equal to `moving_average(series)[range]`.
pub(crate) fn smooth_range(series: &[f64], range: std::ops::Range<usize>, cfg: &SmoothingConfig) -> Vec<f64> {
    let h = cfg.half_width() as isize;
    let last = series.len() as isize - 1;
    let w = cfg.window_w as f64;
    range
        .map(|i| {
            let i = i as isize;
            let sum: f64 = (i - h..=i + h).map(|j| series[j.clamp(0, last) as usize]).sum();
            sum / w
        })
        .collect()
}

/// A run of consecutive values cut from a stream, with its source indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub values: Vec<f64>,
    pub start_idx: usize,
    pub end_idx: usize,
}

impl Batch {
    pub fn new(values: Vec<f64>, start_idx: usize) -> Result<Self, PrepError> {
        if values.len() < 2 {
            return Err(PrepError::TooShort(values.len()));
        }
        let end_idx = start_idx + values.len();
        Ok(Batch { values, start_idx, end_idx })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean and population standard deviation fitted on one set of values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Result<Self, PrepError> {
        if values.len() < 2 {
            return Err(PrepError::TooShort(values.len()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std >= DEGENERATE_STD) {
            return Err(PrepError::DegenerateBatch);
        }
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Z-scores a batch against its own mean and population standard deviation.
pub fn standard_scale(batch: &Batch) -> Result<Batch, PrepError> {
    let scaler = Scaler::fit(&batch.values)?;
    Ok(Batch {
        values: batch.values.iter().map(|&v| scaler.transform(v)).collect(),
        start_idx: batch.start_idx,
        end_idx: batch.end_idx,
    })
}

/// Average rate of change: the mean of successive differences.
pub fn arc(batch: &Batch) -> Result<f64, PrepError> {
    arc_of(&batch.values)
}

pub(crate) fn arc_of(values: &[f64]) -> Result<f64, PrepError> {
    let n = values.len();
    if n < 2 {
        return Err(PrepError::TooShort(n));
    }
    let total: f64 = values.windows(2).map(|w| w[1] - w[0]).sum();
    Ok(total / (n - 1) as f64)
}
