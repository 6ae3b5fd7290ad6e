use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A multichannel recording: `channels[c][t]` at a fixed sampling rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSet {
    labels: Vec<String>,
    rate_hz: f64,
    channels: Vec<Vec<f64>>,
}

impl TimeSeriesSet {
    pub fn new(labels: Vec<String>, rate_hz: f64, channels: Vec<Vec<f64>>) -> Result<Self> {
        if labels.len() != channels.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} channels",
                labels.len(),
                channels.len()
            )));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::Config(format!("invalid sampling rate {rate_hz}")));
        }
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("channels of unequal length".into()));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample".into()));
        }
        Ok(Self {
            labels,
            rate_hz,
            channels,
        })
    }

    /// Labels `ch0`, `ch1`, ...
    pub fn unlabeled(rate_hz: f64, channels: Vec<Vec<f64>>) -> Result<Self> {
        let labels = (0..channels.len()).map(|i| format!("ch{i}")).collect();
        Self::new(labels, rate_hz, channels)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Number of samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Channels `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> TimeSeriesSet {
        TimeSeriesSet {
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            rate_hz: self.rate_hz,
            channels: indices.iter().map(|&i| self.channels[i].clone()).collect(),
        }
    }

    /// Samples `[start, end)` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeriesSet {
        TimeSeriesSet {
            labels: self.labels.clone(),
            rate_hz: self.rate_hz,
            channels: self.channels.iter().map(|c| c[start..end].to_vec()).collect(),
        }
    }

    pub fn with_channel(&self, i: usize, values: Vec<f64>) -> TimeSeriesSet {
        let mut out = self.clone();
        out.channels[i] = values;
        out
    }

    /// samples×channels matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.len(), self.n_channels(), |t, c| self.channels[c][t])
    }
}
