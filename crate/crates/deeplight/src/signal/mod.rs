//! Voxel-level preprocessing: spatial smoothing, per-voxel detrending and
//! standardization, temporal highpass filtering, and block-onset exclusion.
//!
//! The chain runs in a fixed order — smoothing, detrend, standardize,
//! highpass, onset exclusion — and is a pure function of the recording and
//! the configuration.

mod butterworth;

pub use butterworth::{design_highpass, filter_forward, filtfilt, FilterCoeffs};

use serde::{Deserialize, Serialize};

use crate::config::KeyValueFile;
use crate::error::{Error, Result};
use crate::volume::{Block, BrainVolume, Recording};

/// Preprocessing parameters.
///
/// `voxel_size_mm` is a fallback for volumes that carry no usable voxel
/// size of their own. The smoothing kernel width is a FWHM in millimetres.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocConfig {
    pub fwhm_mm: f64,
    pub voxel_size_mm: [f64; 3],
    pub tr_seconds: f64,
    pub highpass_cutoff_seconds: f64,
    pub filter_order: usize,
    pub onset_trs_excluded: usize,
    /// Forward-backward filtering (no phase shift). Single-pass when false.
    pub zero_phase: bool,
    /// Listing order standardizes before the temporal filter; set false to
    /// filter first.
    pub standardize_before_filter: bool,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig {
            fwhm_mm: 3.0,
            voxel_size_mm: [2.0; 3],
            tr_seconds: 0.72,
            highpass_cutoff_seconds: 128.0,
            filter_order: 5,
            onset_trs_excluded: 2,
            zero_phase: true,
            standardize_before_filter: true,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fwhm_mm <= 0.0 {
            return Err(Error::config(format!("fwhm_mm must be > 0, got {}", self.fwhm_mm)));
        }
        if self.voxel_size_mm.iter().any(|&v| v <= 0.0) {
            return Err(Error::config("voxel sizes must be > 0"));
        }
        if self.tr_seconds <= 0.0 {
            return Err(Error::config(format!(
                "tr_seconds must be > 0, got {}",
                self.tr_seconds
            )));
        }
        if self.highpass_cutoff_seconds <= 2.0 * self.tr_seconds {
            return Err(Error::config(format!(
                "highpass cutoff {}s must exceed 2*TR = {}s (cutoff below Nyquist)",
                self.highpass_cutoff_seconds,
                2.0 * self.tr_seconds
            )));
        }
        if self.filter_order < 1 {
            return Err(Error::config("filter_order must be >= 1"));
        }
        Ok(())
    }

    /// Loads settings from a `key = value` file; absent keys keep defaults.
    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let kv = KeyValueFile::load(path)?;
        Self::from_key_values(&kv)
    }

    pub fn from_key_values(kv: &KeyValueFile) -> Result<Self> {
        let mut cfg = PreprocConfig::default();
        if let Some(v) = kv.get_f64("fwhm_mm")? {
            cfg.fwhm_mm = v;
        }
        if let Some(v) = kv.get_f64("voxel_size_mm")? {
            cfg.voxel_size_mm = [v; 3];
        }
        if let Some(v) = kv.get_f64("tr_seconds")? {
            cfg.tr_seconds = v;
        }
        if let Some(v) = kv.get_f64("highpass_cutoff_seconds")? {
            cfg.highpass_cutoff_seconds = v;
        }
        if let Some(v) = kv.get_usize("filter_order")? {
            cfg.filter_order = v;
        }
        if let Some(v) = kv.get_usize("onset_trs_excluded")? {
            cfg.onset_trs_excluded = v;
        }
        if let Some(v) = kv.get_bool("zero_phase")? {
            cfg.zero_phase = v;
        }
        if let Some(v) = kv.get_bool("standardize_before_filter")? {
            cfg.standardize_before_filter = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Per-axis kernel sigma in voxel units: FWHM = 2*sqrt(2 ln 2) * sigma.
    pub fn sigma_voxels(&self, voxel_size_mm: &[f64; 3]) -> [f64; 3] {
        let factor = 2.0 * (2.0 * (2.0f64).ln()).sqrt();
        [
            self.fwhm_mm / (factor * voxel_size_mm[0]),
            self.fwhm_mm / (factor * voxel_size_mm[1]),
            self.fwhm_mm / (factor * voxel_size_mm[2]),
        ]
    }
}

/// Discrete Gaussian taps truncated at 4 sigma, normalized to sum 1.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).floor().max(0.0) as usize;
    let mut taps: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Separable 3-D Gaussian smoothing with zero padding at the boundary.
pub fn gaussian_smooth(volume: &BrainVolume, config: &PreprocConfig) -> Result<BrainVolume> {
    config.validate()?;
    let voxel_size = if volume.voxel_size_mm.iter().all(|&v| v > 0.0) {
        volume.voxel_size_mm
    } else {
        config.voxel_size_mm
    };
    let sigma = config.sigma_voxels(&voxel_size);
    let (nx, ny, nz) = volume.dims;
    let mut data: Vec<f64> = volume.data.iter().map(|&v| v as f64).collect();
    let mut scratch = vec![0.0f64; data.len()];

    // Axis strides for x, y, z in the flat layout x + X*(y + Y*z).
    let axes = [(0usize, nx, 1usize), (1, ny, nx), (2, nz, nx * ny)];
    for (axis, extent, stride) in axes {
        let taps = gaussian_kernel(sigma[axis]);
        if taps.len() == 1 {
            continue;
        }
        let radius = taps.len() / 2;
        scratch.fill(0.0);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let pos = [x, y, z][axis];
                    let idx = x + nx * (y + ny * z);
                    let mut acc = 0.0;
                    for (k, &tap) in taps.iter().enumerate() {
                        let offset = k as isize - radius as isize;
                        let p = pos as isize + offset;
                        if p < 0 || p as usize >= extent {
                            continue; // zero padding
                        }
                        let src = (idx as isize + offset * stride as isize) as usize;
                        acc += tap * data[src];
                    }
                    scratch[idx] = acc;
                }
            }
        }
        std::mem::swap(&mut data, &mut scratch);
    }

    BrainVolume::new(
        volume.dims,
        volume.voxel_size_mm,
        data.into_iter().map(|v| v as f32).collect(),
    )
}

/// Subtracts the least-squares line fit to the series.
pub fn linear_detrend(series: &[f64]) -> Result<Vec<f64>> {
    let t = series.len();
    if t < 2 {
        return Err(Error::data(format!("detrend needs at least 2 samples, got {t}")));
    }
    let n = t as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_x: f64 = series.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_t = 0.0;
    for (i, &x) in series.iter().enumerate() {
        let dt = i as f64 - mean_t;
        cov += dt * (x - mean_x);
        var_t += dt * dt;
    }
    let slope = cov / var_t;
    let intercept = mean_x - slope * mean_t;
    Ok(series
        .iter()
        .enumerate()
        .map(|(i, &x)| x - (slope * i as f64 + intercept))
        .collect())
}

/// Standardization epsilon: a constant series maps to all zeros.
pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Centers to mean zero and scales to unit (population) variance.
pub fn standardize(series: &[f64]) -> Result<Vec<f64>> {
    let t = series.len();
    if t < 2 {
        return Err(Error::data(format!(
            "standardize needs at least 2 samples, got {t}"
        )));
    }
    let n = t as f64;
    let mean: f64 = series.iter().sum::<f64>() / n;
    let var: f64 = series.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(STANDARDIZE_EPS);
    Ok(series.iter().map(|&x| (x - mean) / denom).collect())
}

/// Butterworth highpass of one voxel series at the configured cutoff.
///
/// Zero-phase (forward-backward, odd reflective padding of `3 * order`)
/// unless the config selects single-pass filtering.
pub fn butterworth_highpass(series: &[f64], config: &PreprocConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let pad = 3 * config.filter_order;
    if series.len() <= pad {
        return Err(Error::data(format!(
            "series of length {} too short for filter order {} (needs > {pad})",
            series.len(),
            config.filter_order
        )));
    }
    let fs = 1.0 / config.tr_seconds;
    let coeffs = design_highpass(config.filter_order, 1.0 / config.highpass_cutoff_seconds, fs)?;
    if config.zero_phase {
        filtfilt(&coeffs, series, pad)
    } else {
        Ok(filter_forward(&coeffs, series))
    }
}

/// A block skipped entirely because it was shorter than the exclusion count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnsetWarning {
    pub subject_id: String,
    pub task_id: String,
    pub block_start: usize,
    pub block_len: usize,
}

/// Drops the first `onset_trs_excluded` volumes of every labeled block.
///
/// Only volumes covered by (surviving) blocks are retained; blocks shorter
/// than the exclusion count are dropped whole, with a warning record.
pub fn exclude_block_onsets(
    recording: &Recording,
    config: &PreprocConfig,
) -> Result<(Recording, Vec<OnsetWarning>)> {
    recording.validate()?;
    let skip = config.onset_trs_excluded;
    let mut blocks: Vec<Block> = recording.blocks.clone();
    blocks.sort_by_key(|b| b.start);

    let mut volumes = Vec::new();
    let mut labels = Vec::new();
    let mut new_blocks = Vec::new();
    let mut warnings = Vec::new();
    for block in blocks {
        if block.len <= skip {
            warnings.push(OnsetWarning {
                subject_id: recording.subject_id.clone(),
                task_id: recording.task_id.clone(),
                block_start: block.start,
                block_len: block.len,
            });
            continue;
        }
        let start = volumes.len();
        for i in block.start + skip..block.start + block.len {
            volumes.push(recording.volumes[i].clone());
            labels.push(recording.labels[i]);
        }
        new_blocks.push(Block {
            start,
            len: block.len - skip,
            target: block.target,
        });
    }

    Ok((
        Recording {
            subject_id: recording.subject_id.clone(),
            task_id: recording.task_id.clone(),
            volumes,
            labels,
            blocks: new_blocks,
            tr_seconds: recording.tr_seconds,
        },
        warnings,
    ))
}

/// The full voxel-level chain in listing order: smoothing, detrend,
/// standardize, highpass, onset exclusion.
pub fn preprocess_recording(
    recording: &Recording,
    config: &PreprocConfig,
) -> Result<(Recording, Vec<OnsetWarning>)> {
    config.validate()?;
    recording.validate()?;
    let mut smoothed: Vec<BrainVolume> = recording
        .volumes
        .iter()
        .map(|v| gaussian_smooth(v, config))
        .collect::<Result<_>>()?;

    let t = smoothed.len();
    if t >= 2 {
        let voxels = smoothed[0].num_voxels();
        let mut series = vec![0.0f64; t];
        for v in 0..voxels {
            for (i, vol) in smoothed.iter().enumerate() {
                series[i] = vol.data[v] as f64;
            }
            let mut out = linear_detrend(&series)?;
            if config.standardize_before_filter {
                out = standardize(&out)?;
                out = butterworth_highpass(&out, config)?;
            } else {
                out = butterworth_highpass(&out, config)?;
                out = standardize(&out)?;
            }
            for (i, vol) in smoothed.iter_mut().enumerate() {
                vol.data[v] = out[i] as f32;
            }
        }
    }

    let processed = Recording {
        subject_id: recording.subject_id.clone(),
        task_id: recording.task_id.clone(),
        volumes: smoothed,
        labels: recording.labels.clone(),
        blocks: recording.blocks.clone(),
        tr_seconds: recording.tr_seconds,
    };
    exclude_block_onsets(&processed, config)
}
