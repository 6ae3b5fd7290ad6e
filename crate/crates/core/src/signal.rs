//! Resampling, windowing, band decomposition and differential-entropy
//! features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{variance, Matrix};
use crate::timeseries::TimeSeriesSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl BandSpec {
    pub fn new(name: &str, low_hz: f64, high_hz: f64) -> Self {
        Self {
            name: name.to_string(),
            low_hz,
            high_hz,
        }
    }

    pub fn validate(&self, rate_hz: f64) -> Result<()> {
        let nyquist_hz = rate_hz / 2.0;
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyquist_hz) {
            return Err(Error::Band {
                name: self.name.clone(),
                low_hz: self.low_hz,
                high_hz: self.high_hz,
                nyquist_hz,
            });
        }
        Ok(())
    }
}

/// δ 1–4, θ 4–8, α 8–13, β 13–30, γ 30–50 Hz.
pub fn default_bands() -> Vec<BandSpec> {
    vec![
        BandSpec::new("delta", 1.0, 4.0),
        BandSpec::new("theta", 4.0, 8.0),
        BandSpec::new("alpha", 8.0, 13.0),
        BandSpec::new("beta", 13.0, 30.0),
        BandSpec::new("gamma", 30.0, 50.0),
    ]
}

/// Butterworth order applied at each band edge.
pub const DEFAULT_FILTER_ORDER: usize = 8;

/// Anti-alias low-pass then integer decimation.
pub fn resample(x: &TimeSeriesSet, target_hz: f64) -> Result<TimeSeriesSet> {
    let source_hz = x.rate_hz();
    let ratio_f = source_hz / target_hz;
    let ratio = ratio_f.round();
    if !(target_hz > 0.0) || target_hz > source_hz || (ratio_f - ratio).abs() > 1e-9 {
        return Err(Error::UnsupportedRatio {
            source_hz,
            target_hz,
        });
    }
    let ratio = ratio as usize;
    if ratio == 1 {
        return Ok(x.clone());
    }
    let taps = lowpass_fir(0.45 * target_hz / source_hz, 20 * ratio + 1);
    let channels = x
        .channels()
        .iter()
        .map(|c| {
            let filtered = convolve_same(c, &taps);
            filtered.into_iter().step_by(ratio).collect()
        })
        .collect();
    TimeSeriesSet::new(x.labels().to_vec(), target_hz, channels)
}

/// Hamming-windowed sinc low-pass with unit DC gain. `cutoff` is in
/// cycles per sample.
fn lowpass_fir(cutoff: f64, numtaps: usize) -> Vec<f64> {
    let m = (numtaps - 1) as f64;
    let mut h: Vec<f64> = (0..numtaps)
        .map(|i| {
            let t = i as f64 - m / 2.0;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * t).sin() / (std::f64::consts::PI * t)
            };
            let window = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / m).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Centered convolution with odd-reflection padding at both ends.
fn convolve_same(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let half = taps.len() / 2;
    let padded = odd_reflect(x, half.min(x.len().saturating_sub(1)));
    let pad = (padded.len() - x.len()) / 2;
    (0..x.len())
        .map(|t| {
            let center = t + pad;
            taps.iter()
                .enumerate()
                .map(|(k, &h)| {
                    let idx = center as isize + half as isize - k as isize;
                    if idx < 0 || idx as usize >= padded.len() {
                        0.0
                    } else {
                        h * padded[idx as usize]
                    }
                })
                .sum()
        })
        .collect()
}

fn odd_reflect(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(2.0 * x[0] - x[i]);
    }
    out.extend_from_slice(x);
    for i in 1..=pad {
        out.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    out
}

/// Binary (arousal, valence) classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPair {
    pub arousal: u8,
    pub valence: u8,
}

/// Equal-length windows cut from one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedRecording {
    pub windows: Vec<TimeSeriesSet>,
    pub window_seconds: f64,
    pub trial: Option<String>,
    pub labels: Option<LabelPair>,
}

impl WindowedRecording {
    pub fn with_source(mut self, trial: impl Into<String>, labels: LabelPair) -> Self {
        self.trial = Some(trial.into());
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Non-overlapping windows of `seconds`; the tail is dropped.
pub fn segment_windows(x: &TimeSeriesSet, seconds: f64) -> Result<WindowedRecording> {
    segment_windows_with_overlap(x, seconds, 0.0)
}

/// Windows of `seconds` advancing by `(1 − overlap)` of a window.
pub fn segment_windows_with_overlap(x: &TimeSeriesSet, seconds: f64, overlap: f64) -> Result<WindowedRecording> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    let len = (seconds * x.rate_hz()).round() as usize;
    if len == 0 {
        return Err(Error::Config(format!("window of {seconds} s is empty")));
    }
    if x.len() < len {
        return Err(Error::InsufficientData(format!(
            "recording of {} samples is shorter than one {len}-sample window",
            x.len()
        )));
    }
    let hop = (len - (overlap * len as f64).round() as usize).max(1);
    let count = (x.len() - len) / hop + 1;
    Ok(WindowedRecording {
        windows: (0..count).map(|w| x.slice(w * hop, w * hop + len)).collect(),
        window_seconds: seconds,
        trial: None,
        labels: None,
    })
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}

/// Butterworth sections of even `order` (bilinear, prewarped at the cutoff).
fn butterworth(cutoff_hz: f64, rate_hz: f64, order: usize, highpass: bool) -> Vec<Biquad> {
    let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / rate_hz;
    let (sin, cos) = w0.sin_cos();
    (0..order / 2)
        .map(|k| {
            let q = 1.0 / (2.0 * (std::f64::consts::PI * (2 * k + 1) as f64 / (2 * order) as f64).cos());
            let alpha = sin / (2.0 * q);
            let a0 = 1.0 + alpha;
            let b = if highpass {
                [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
            } else {
                [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
            };
            Biquad {
                b: [b[0] / a0, b[1] / a0, b[2] / a0],
                a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
            }
        })
        .collect()
}

/// Zero-phase band-pass of one channel: forward-backward through a
/// Butterworth high-pass at `low_hz` and low-pass at `high_hz`.
pub fn bandpass_filtfilt(x: &[f64], band: &BandSpec, rate_hz: f64, order: usize) -> Vec<f64> {
    let order = order.max(2) & !1;
    let mut sections = butterworth(band.low_hz, rate_hz, order, true);
    sections.extend(butterworth(band.high_hz, rate_hz, order, false));
    let pad = ((3.0 * rate_hz / band.low_hz).ceil() as usize).min(x.len().saturating_sub(1));
    let mut buf = odd_reflect(x, pad);
    for s in &sections {
        s.run(&mut buf);
    }
    buf.reverse();
    for s in &sections {
        s.run(&mut buf);
    }
    buf.reverse();
    buf[pad..pad + x.len()].to_vec()
}

/// One band-limited copy of `window` per band.
pub fn bandpass_decompose(window: &TimeSeriesSet, bands: &[BandSpec], order: usize) -> Result<Vec<TimeSeriesSet>> {
    for b in bands {
        b.validate(window.rate_hz())?;
    }
    bands
        .iter()
        .map(|b| {
            let channels = window
                .channels()
                .iter()
                .map(|c| bandpass_filtfilt(c, b, window.rate_hz(), order))
                .collect();
            TimeSeriesSet::new(window.labels().to_vec(), window.rate_hz(), channels)
        })
        .collect()
}

pub const DEFAULT_DE_FLOOR: f64 = -20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entropy {
    pub value: f64,
    /// The variance was zero and `value` is the floor.
    pub floored: bool,
}

/// Gaussian differential entropy `0.5·ln(2πe·σ²)` of each channel.
pub fn differential_entropy(channels: &[Vec<f64>], floor: f64) -> Result<Vec<Entropy>> {
    channels
        .iter()
        .map(|c| {
            if c.len() < 2 {
                return Err(Error::InsufficientData(
                    "differential entropy needs at least 2 samples".into(),
                ));
            }
            let var = variance(c);
            Ok(if var > 0.0 {
                let value = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln();
                Entropy {
                    value: value.max(floor),
                    floored: value < floor,
                }
            } else {
                Entropy {
                    value: floor,
                    floored: true,
                }
            })
        })
        .collect()
}

/// Node features: channels × bands matrix of DE values, plus the number of
/// floored entries.
pub fn de_features(window: &TimeSeriesSet, bands: &[BandSpec], order: usize, floor: f64) -> Result<(Matrix, usize)> {
    let per_band = bandpass_decompose(window, bands, order)?;
    let mut out = Matrix::zeros(window.n_channels(), bands.len());
    let mut floored = 0;
    for (b, band) in per_band.iter().enumerate() {
        for (c, h) in differential_entropy(band.channels(), floor)?.into_iter().enumerate() {
            out[(c, b)] = h.value;
            floored += h.floored as usize;
        }
    }
    Ok((out, floored))
}
