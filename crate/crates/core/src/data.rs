//! Dataset manifests, trial files, and the synthetic generators used as
//! ground truth.
//!
//! # Trial binary format (version 1)
//!
//! | offset | size | content                                               |
//! |--------|------|-------------------------------------------------------|
//! | 0      | 8    | magic `FGTRIAL\0`                                     |
//! | 8      | 4    | format version, `u32` little-endian (= 1)             |
//! | 12     | 4    | reserved, zero                                        |
//! | 16     | 8    | header length `H`, `u64` little-endian                |
//! | 24     | H    | UTF-8 JSON `{"channels":[..],"rate_hz":f,"samples":n}` |
//! | 24+H   | 8·c·n| samples as `f64` little-endian, channel-major         |
//!
//! A CSV trial has one header row of channel labels and one row per sample;
//! its sampling rate comes from the manifest.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::RegionMap;
use crate::numerics::Matrix;
use crate::rng::{derive_seed, SplitMix64};
use crate::timeseries::TimeSeriesSet;

pub const TRIAL_MAGIC: &[u8; 8] = b"FGTRIAL\0";
pub const TRIAL_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    /// Path relative to the manifest directory.
    pub file: String,
    pub duration_s: f64,
    pub arousal: u8,
    pub valence: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subject: String,
    pub channels: Vec<String>,
    pub sampling_rate_hz: f64,
    pub trials: Vec<TrialEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, (text + "\n").as_bytes())
    }

    /// Checks label values, channel uniqueness and that trial files exist
    /// under `root`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        if let Some(dup) = self.channels.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Data(format!("duplicate channel label {dup}")));
        }
        if !(self.sampling_rate_hz > 0.0) {
            return Err(Error::Data("sampling rate must be positive".into()));
        }
        for t in &self.trials {
            if t.arousal > 1 || t.valence > 1 {
                return Err(Error::Data(format!("trial {}: labels must be 0 or 1", t.file)));
            }
            let p = root.join(&t.file);
            if !p.exists() {
                return Err(Error::Data(format!("trial file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialHeader {
    channels: Vec<String>,
    rate_hz: f64,
    samples: usize,
}

pub fn encode_trial(x: &TimeSeriesSet) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&TrialHeader {
        channels: x.labels().to_vec(),
        rate_hz: x.rate_hz(),
        samples: x.len(),
    })?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + 8 * x.n_channels() * x.len());
    out.extend_from_slice(TRIAL_MAGIC);
    out.extend_from_slice(&TRIAL_VERSION.to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for ch in x.channels() {
        for v in ch {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_trial(bytes: &[u8], path: &Path) -> Result<TimeSeriesSet> {
    if bytes.len() < PREAMBLE_LEN || &bytes[..8] != TRIAL_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != TRIAL_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported version {version}"),
        });
    }
    let header_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let header_end = PREAMBLE_LEN
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: TrialHeader = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| corrupt(path, format!("header: {e}")))?;
    let payload = &bytes[header_end..];
    let expected = header.channels.len() * header.samples * 8;
    if payload.len() != expected {
        return Err(corrupt(
            path,
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let channels = payload
        .chunks_exact(8 * header.samples.max(1))
        .take(header.channels.len())
        .map(|ch| {
            ch.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect::<Vec<Vec<f64>>>();
    let channels = if header.samples == 0 {
        vec![Vec::new(); header.channels.len()]
    } else {
        channels
    };
    TimeSeriesSet::new(header.channels, header.rate_hz, channels)
        .map_err(|e| corrupt(path, e.to_string()))
}

pub fn save_trial(path: &Path, x: &TimeSeriesSet) -> Result<()> {
    write_atomic(path, &encode_trial(x)?)
}

pub fn save_trial_csv(path: &Path, x: &TimeSeriesSet) -> Result<()> {
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(x.labels()).map_err(io)?;
    for t in 0..x.len() {
        w.write_record(x.channels().iter().map(|c| format!("{:e}", c[t])))
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trial_csv(path: &Path, rate_hz: f64) -> Result<TimeSeriesSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let labels: Vec<String> = r
        .headers()
        .map_err(|e| corrupt(path, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut channels = vec![Vec::new(); labels.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| corrupt(path, e.to_string()))?;
        if rec.len() != labels.len() {
            return Err(corrupt(path, "row width differs from header"));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| corrupt(path, format!("bad number {field:?}")))?;
            channels[c].push(v);
        }
    }
    TimeSeriesSet::new(labels, rate_hz, channels).map_err(|e| corrupt(path, e.to_string()))
}

/// Reads a trial file (binary, or CSV by extension) and checks it against
/// the manifest's channels and rate.
pub fn load_trial(path: &Path, manifest: &DatasetManifest) -> Result<TimeSeriesSet> {
    let x = if path.extension().is_some_and(|e| e == "csv") {
        read_trial_csv(path, manifest.sampling_rate_hz)?
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_trial(&bytes, path)?
    };
    if x.labels() != manifest.channels.as_slice() {
        return Err(Error::Data(format!(
            "{}: channels do not match the manifest",
            path.display()
        )));
    }
    if x.rate_hz() != manifest.sampling_rate_hz {
        return Err(Error::Data(format!(
            "{}: rate {} Hz, manifest says {} Hz",
            path.display(),
            x.rate_hz(),
            manifest.sampling_rate_hz
        )));
    }
    Ok(x)
}

/// A linear system `X_{t+1} = A X_t + σ ε_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarSystemSpec {
    /// `coupling[(i, j)]`: effect of `X_j` on the next value of `X_i`.
    pub coupling: Matrix,
    pub noise_scale: f64,
    pub length: usize,
    pub seed: u64,
    pub rate_hz: f64,
    pub burn_in: usize,
}

impl VarSystemSpec {
    pub fn new(coupling: Matrix, noise_scale: f64, length: usize, seed: u64) -> Self {
        Self {
            coupling,
            noise_scale,
            length,
            seed,
            rate_hz: 100.0,
            burn_in: 1000,
        }
    }

    /// The two-channel system where channel 0 drives channel 1.
    pub fn driven_pair(strength: f64, length: usize, seed: u64) -> Self {
        let coupling = Matrix::from_rows(&[vec![0.5, 0.0], vec![strength, 0.5]]).unwrap();
        Self::new(coupling, 1.0, length, seed)
    }

    /// Directed edges `(source, target)` of the true system.
    pub fn true_edges(&self) -> Vec<(usize, usize)> {
        let n = self.coupling.rows();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                if self.coupling[(i, j)] != 0.0 {
                    out.push((j, i));
                }
            }
        }
        out
    }
}

pub fn spectral_radius(m: &Matrix) -> f64 {
    let n = m.rows();
    nalgebra::DMatrix::from_row_slice(n, n, m.data())
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct VarRealization {
    pub series: TimeSeriesSet,
    pub true_edges: Vec<(usize, usize)>,
}

pub fn generate_var(spec: &VarSystemSpec) -> Result<VarRealization> {
    let n = spec.coupling.rows();
    if !spec.coupling.is_square() || n == 0 {
        return Err(Error::Shape("coupling must be a non-empty square matrix".into()));
    }
    let rho = spectral_radius(&spec.coupling);
    if rho >= 1.0 {
        return Err(Error::Stability(rho));
    }
    let mut rng = SplitMix64::seed_from_u64(spec.seed);
    let mut state = vec![0.0; n];
    let mut channels = vec![Vec::with_capacity(spec.length); n];
    for t in 0..spec.burn_in + spec.length {
        let mut next = spec.coupling.matvec(&state);
        for v in next.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_scale * e;
        }
        state = next;
        if t >= spec.burn_in {
            for (c, &v) in channels.iter_mut().zip(&state) {
                c.push(v);
            }
        }
    }
    Ok(VarRealization {
        series: TimeSeriesSet::unlabeled(spec.rate_hz, channels)?,
        true_edges: spec.true_edges(),
    })
}

/// Synthetic stand-in for a music-listening EEG session.
///
/// Each channel mixes an alpha oscillator, a beta oscillator and a slow
/// background process. Class-1 trials add directed coupling from frontal
/// to left-temporal channels and shift band power (stronger frontal beta,
/// weaker occipital alpha). All class effects scale with `separation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionSynthConfig {
    pub n_trials: usize,
    pub trial_seconds: f64,
    pub rate_hz: f64,
    pub separation: f64,
    /// Strength of the planted frontal → temporal drive at `separation = 1`.
    pub coupling: f64,
    /// Standard deviation of per-trial log channel gains.
    pub trial_gain_jitter: f64,
    pub seed: u64,
    pub subject: String,
}

impl Default for EmotionSynthConfig {
    fn default() -> Self {
        Self {
            n_trials: 20,
            trial_seconds: 60.0,
            rate_hz: 200.0,
            separation: 1.0,
            coupling: 0.4,
            trial_gain_jitter: 0.05,
            seed: 0,
            subject: "synthetic".into(),
        }
    }
}

/// Source/target canonical channel pairs that carry the class-1 drive.
pub fn planted_edges(regions: &RegionMap) -> Vec<(usize, usize)> {
    let blocks = regions.blocks();
    let find = |name: &str| regions.region_names().iter().position(|r| r == name);
    match (find("Frontal"), find("LeftTemporal")) {
        (Some(f), Some(t)) => blocks[f].clone().zip(blocks[t].clone()).collect(),
        _ => {
            // Fall back to region 0 driving region 1.
            blocks[0].clone().zip(blocks[1.min(blocks.len() - 1)].clone()).collect()
        }
    }
}

struct Resonator {
    a1: f64,
    a2: f64,
    s1: f64,
    s2: f64,
}

impl Resonator {
    fn new(freq_hz: f64, radius: f64, rate_hz: f64) -> Self {
        let w = 2.0 * std::f64::consts::PI * freq_hz / rate_hz;
        Self {
            a1: 2.0 * radius * w.cos(),
            a2: -radius * radius,
            s1: 0.0,
            s2: 0.0,
        }
    }

    fn step(&mut self, e: f64) -> f64 {
        let s = self.a1 * self.s1 + self.a2 * self.s2 + e;
        self.s2 = self.s1;
        self.s1 = s;
        s
    }
}

/// Generates one trial's recording in canonical channel order.
pub fn synth_trial(cfg: &EmotionSynthConfig, regions: &RegionMap, class: u8, trial: usize) -> Result<TimeSeriesSet> {
    let n = regions.n_channels();
    let len = (cfg.trial_seconds * cfg.rate_hz).round() as usize;
    let burn = (2.0 * cfg.rate_hz) as usize;
    let mut rng = SplitMix64::seed_from_u64(derive_seed(cfg.seed, &[0x5452_4941_4c, trial as u64]));
    let sep = if class == 1 { cfg.separation } else { 0.0 };

    let names = regions.region_names();
    let region_name = |c: usize| names[regions.region_of(c)].as_str();
    let beta_gain: Vec<f64> = (0..n)
        .map(|c| match region_name(c) {
            "Prefrontal" | "Frontal" => 1.0 + sep,
            _ => 1.0,
        })
        .collect();
    let alpha_gain: Vec<f64> = (0..n)
        .map(|c| if region_name(c) == "Occipital" { 1.0 - 0.5 * sep } else { 1.0 })
        .collect();
    let trial_gain: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (cfg.trial_gain_jitter * z).exp()
        })
        .collect();
    let mut drivers: Vec<Option<usize>> = vec![None; n];
    for (src, dst) in planted_edges(regions) {
        drivers[dst] = Some(src);
    }

    let mut alpha: Vec<Resonator> = (0..n)
        .map(|_| Resonator::new(rng.random_range(9.0..11.0), 0.97, cfg.rate_hz))
        .collect();
    let mut beta: Vec<Resonator> = (0..n)
        .map(|_| Resonator::new(rng.random_range(18.0..24.0), 0.92, cfg.rate_hz))
        .collect();
    let mut background = vec![0.0; n];
    let mut prev = vec![0.0; n];
    let mut channels = vec![Vec::with_capacity(len); n];
    for t in 0..burn + len {
        let mut cur = vec![0.0; n];
        for c in 0..n {
            let drive = drivers[c].map_or(0.0, |s| cfg.coupling * sep * prev[s]);
            let e: f64 = StandardNormal.sample(&mut rng);
            background[c] = 0.9 * background[c] + drive + e;
        }
        for c in 0..n {
            let ea: f64 = StandardNormal.sample(&mut rng);
            let eb: f64 = StandardNormal.sample(&mut rng);
            let a = alpha[c].step(0.3 * ea);
            let b = beta[c].step(0.3 * eb);
            cur[c] = trial_gain[c] * (alpha_gain[c] * a + beta_gain[c] * b + background[c]);
        }
        if t >= burn {
            for (ch, &v) in channels.iter_mut().zip(&cur) {
                ch.push(v);
            }
        }
        prev = cur;
    }
    TimeSeriesSet::new(regions.labels().to_vec(), cfg.rate_hz, channels)
}

/// Class of trial `k`: alternating, so any even trial count is balanced.
pub fn synth_class(trial: usize) -> u8 {
    (trial % 2) as u8
}

/// Writes `trial_XX.bin` files plus `manifest.json` into `dir`.
pub fn generate_emotion_synthetic(cfg: &EmotionSynthConfig, regions: &RegionMap, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut trials = Vec::with_capacity(cfg.n_trials);
    for k in 0..cfg.n_trials {
        let class = synth_class(k);
        let x = synth_trial(cfg, regions, class, k)?;
        let file = format!("trial_{k:02}.bin");
        save_trial(&dir.join(&file), &x)?;
        trials.push(TrialEntry {
            file,
            duration_s: x.len() as f64 / cfg.rate_hz,
            arousal: class,
            valence: class,
        });
    }
    let manifest = DatasetManifest {
        subject: cfg.subject.clone(),
        channels: regions.labels().to_vec(),
        sampling_rate_hz: cfg.rate_hz,
        trials,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        path.with_file_name(name)
    };
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::covariance_of;

    #[test]
    fn zero_coupling_channels_are_uncorrelated() {
        let spec = VarSystemSpec::new(Matrix::zeros(3, 3), 1.0, 50_000, 4);
        let x = generate_var(&spec).unwrap().series;
        let refs: Vec<&[f64]> = x.channels().iter().map(Vec::as_slice).collect();
        let c = covariance_of(&refs).unwrap();
        for i in 0..3 {
            for j in (0..3).filter(|&j| j != i) {
                let r = c[(i, j)] / (c[(i, i)] * c[(j, j)]).sqrt();
                assert!(r.abs() < 0.05, "corr {r}");
            }
        }
    }

    #[test]
    fn unstable_system_is_rejected() {
        let spec = VarSystemSpec::new(Matrix::identity(2).scale(1.01), 1.0, 100, 0);
        assert!(matches!(generate_var(&spec), Err(Error::Stability(r)) if (r - 1.01).abs() < 1e-12));
    }

    #[test]
    fn generation_is_deterministic_and_reports_edges() {
        let spec = VarSystemSpec::driven_pair(0.5, 500, 9);
        let a = generate_var(&spec).unwrap();
        let b = generate_var(&spec).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.true_edges, vec![(0, 1)]);
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let x = generate_var(&VarSystemSpec::driven_pair(0.5, 300, 1)).unwrap().series;
        let bytes = encode_trial(&x).unwrap();
        let p = Path::new("mem.bin");
        assert_eq!(decode_trial(&bytes, p).unwrap(), x);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_trial(&bad, p), Err(Error::Format { .. })));

        let truncated = &bytes[..bytes.len() - 8];
        assert!(matches!(decode_trial(truncated, p), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn csv_and_binary_agree() {
        let dir = tempfile::tempdir().unwrap();
        let x = generate_var(&VarSystemSpec::driven_pair(0.5, 200, 2)).unwrap().series;
        let manifest = DatasetManifest {
            subject: "s".into(),
            channels: x.labels().to_vec(),
            sampling_rate_hz: x.rate_hz(),
            trials: vec![],
        };
        save_trial(&dir.path().join("a.bin"), &x).unwrap();
        save_trial_csv(&dir.path().join("a.csv"), &x).unwrap();
        let b = load_trial(&dir.path().join("a.bin"), &manifest).unwrap();
        let c = load_trial(&dir.path().join("a.csv"), &manifest).unwrap();
        assert_eq!(b, x);
        for (u, v) in b.channels().iter().flatten().zip(c.channels().iter().flatten()) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }

    #[test]
    fn synthetic_dataset_is_byte_reproducible() {
        let cfg = EmotionSynthConfig {
            n_trials: 2,
            trial_seconds: 4.0,
            ..Default::default()
        };
        let regions = RegionMap::default_32();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m = generate_emotion_synthetic(&cfg, &regions, d1.path()).unwrap();
        generate_emotion_synthetic(&cfg, &regions, d2.path()).unwrap();
        for f in ["manifest.json", "trial_00.bin", "trial_01.bin"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap()
            );
        }
        assert_eq!(m.trials.len(), 2);
        assert_eq!(m.trials[1].arousal, 1);
        let loaded = DatasetManifest::load(&d1.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(load_trial(&d1.path().join("trial_00.bin"), &m).unwrap().len(), 800);
    }

    #[test]
    fn manifest_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            subject: "s".into(),
            channels: vec!["a".into(), "a".into()],
            sampling_rate_hz: 200.0,
            trials: vec![],
        };
        assert!(m.validate(dir.path()).is_err());
        let m = DatasetManifest {
            channels: vec!["a".into()],
            trials: vec![TrialEntry {
                file: "missing.bin".into(),
                duration_s: 1.0,
                arousal: 0,
                valence: 2,
            }],
            ..m
        };
        assert!(m.validate(dir.path()).is_err());
    }
}
