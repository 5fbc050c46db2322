//! On-disk bundle container, fixed-window segmentation with edge trimming,
//! and per-trial z-score normalization.
//!
//! Bundle directory layout: a TOML `manifest` plus headerless
//! `trial_<k>_eeg.raw` / `trial_<k>_env.raw` files of little-endian 32-bit
//! IEEE-754 values, row-major (time-major). Shapes come solely from the
//! manifest.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::correlation::EnvelopeSet;
use crate::decoder::EegSegment;
use crate::error::{Error, Result};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// One trial's arrays plus its manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub id: String,
    pub n_samples: usize,
    pub attended_index: usize,
    /// T x C, time-major.
    pub eeg: Vec<f32>,
    /// T x N, time-major.
    pub env: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub rate_hz: f64,
    pub n_channels: usize,
    pub n_speakers: usize,
    pub trials: Vec<TrialData>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTrial {
    id: String,
    n_samples: usize,
    attended_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    rate_hz: f64,
    n_channels: usize,
    n_speakers: usize,
    trials: Vec<ManifestTrial>,
}

impl Bundle {
    pub fn new(
        rate_hz: f64,
        n_channels: usize,
        n_speakers: usize,
        trials: Vec<TrialData>,
    ) -> Result<Bundle> {
        let b = Bundle { rate_hz, n_channels, n_speakers, trials };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        if self.n_channels == 0
            || self.n_speakers < 2
            || !self.rate_hz.is_finite()
            || self.rate_hz <= 0.0
        {
            return Err(Error::Config("invalid bundle header".into()));
        }
        for tr in &self.trials {
            if tr.eeg.len() != tr.n_samples * self.n_channels {
                return Err(Error::CorruptBundle {
                    file: format!("trial {}", tr.id),
                    reason: format!(
                        "EEG length {} != {} x {}",
                        tr.eeg.len(),
                        tr.n_samples,
                        self.n_channels
                    ),
                });
            }
            if tr.env.len() != tr.n_samples * self.n_speakers {
                return Err(Error::CorruptBundle {
                    file: format!("trial {}", tr.id),
                    reason: format!(
                        "envelope length {} != {} x {}",
                        tr.env.len(),
                        tr.n_samples,
                        self.n_speakers
                    ),
                });
            }
            if tr.attended_index >= self.n_speakers {
                return Err(Error::CorruptBundle {
                    file: format!("trial {}", tr.id),
                    reason: format!("attended index {} out of range", tr.attended_index),
                });
            }
        }
        Ok(())
    }

    pub fn trial_ids(&self) -> Vec<String> {
        self.trials.iter().map(|t| t.id.clone()).collect()
    }

    pub fn manifest_text(&self) -> String {
        let manifest = Manifest {
            format_version: BUNDLE_FORMAT_VERSION,
            rate_hz: self.rate_hz,
            n_channels: self.n_channels,
            n_speakers: self.n_speakers,
            trials: self
                .trials
                .iter()
                .map(|t| ManifestTrial {
                    id: t.id.clone(),
                    n_samples: t.n_samples,
                    attended_index: t.attended_index,
                })
                .collect(),
        };
        toml::to_string_pretty(&manifest).expect("manifest serialization cannot fail")
    }
}

fn write_f32_le(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f32_le(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let bytes = std::fs::read(path).map_err(|e| Error::CorruptBundle {
        file: name.clone(),
        reason: e.to_string(),
    })?;
    if bytes.len() != expect * 4 {
        return Err(Error::CorruptBundle {
            file: name,
            reason: format!("expected {} bytes, found {}", expect * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_bundle(bundle: &Bundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest"), bundle.manifest_text())?;
    for (k, tr) in bundle.trials.iter().enumerate() {
        write_f32_le(&dir.join(format!("trial_{k}_eeg.raw")), &tr.eeg)?;
        write_f32_le(&dir.join(format!("trial_{k}_env.raw")), &tr.env)?;
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let manifest_path = dir.join("manifest");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::CorruptBundle {
        file: "manifest".into(),
        reason: e.to_string(),
    })?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::CorruptBundle {
        file: "manifest".into(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != BUNDLE_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(manifest.format_version));
    }
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for (k, mt) in manifest.trials.iter().enumerate() {
        let eeg = read_f32_le(
            &dir.join(format!("trial_{k}_eeg.raw")),
            mt.n_samples * manifest.n_channels,
        )?;
        let env = read_f32_le(
            &dir.join(format!("trial_{k}_env.raw")),
            mt.n_samples * manifest.n_speakers,
        )?;
        trials.push(TrialData {
            id: mt.id.clone(),
            n_samples: mt.n_samples,
            attended_index: mt.attended_index,
            eeg,
            env,
        });
    }
    Bundle::new(manifest.rate_hz, manifest.n_channels, manifest.n_speakers, trials)
}

/// Evaluation/training window description. Non-overlapping by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub length_seconds: f64,
    pub hop_seconds: f64,
}

impl WindowSpec {
    pub fn non_overlapping(length_seconds: f64) -> Self {
        Self { length_seconds, hop_seconds: length_seconds }
    }

    fn validate(&self, rate_hz: f64) -> Result<()> {
        if !(self.length_seconds > 0.0 && self.hop_seconds > 0.0) {
            return Err(Error::Config("window length and hop must be positive".into()));
        }
        let samples = self.length_seconds * rate_hz;
        if (samples - samples.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "window length {} s is not integral at {rate_hz} Hz",
                self.length_seconds
            )));
        }
        Ok(())
    }
}

/// One windowed (EEG, envelopes) pair.
#[derive(Debug, Clone)]
pub struct SegmentItem {
    pub eeg: EegSegment,
    pub env: EnvelopeSet,
    pub trial_id: String,
    pub window_index: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SegmentSet {
    pub items: Vec<SegmentItem>,
    /// Trials skipped because they were shorter than one trimmed window.
    pub skipped_trials: usize,
}

/// Cuts every trial into fixed windows, excluding the first and last
/// `edge_trim_seconds` of each trial. No window ever spans two trials.
pub fn segment(bundle: &Bundle, spec: &WindowSpec, edge_trim_seconds: f64) -> Result<SegmentSet> {
    spec.validate(bundle.rate_hz)?;
    if edge_trim_seconds < 0.0 {
        return Err(Error::Config("edge trim must be nonnegative".into()));
    }
    let rate = bundle.rate_hz;
    let win = (spec.length_seconds * rate).round() as usize;
    let hop = (spec.hop_seconds * rate).round().max(1.0) as usize;
    let trim = (edge_trim_seconds * rate).round() as usize;

    let mut set = SegmentSet::default();
    for tr in &bundle.trials {
        if tr.n_samples < 2 * trim + win {
            set.skipped_trials += 1;
            continue;
        }
        let usable_end = tr.n_samples - trim;
        let mut window_index = 0usize;
        let mut start = trim;
        while start + win <= usable_end {
            let c_n = bundle.n_channels;
            let n_sp = bundle.n_speakers;
            let eeg_data: Vec<f64> = tr.eeg[start * c_n..(start + win) * c_n]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let mut streams = vec![Vec::with_capacity(win); n_sp];
            for t in start..start + win {
                for (j, s) in streams.iter_mut().enumerate() {
                    s.push(tr.env[t * n_sp + j] as f64);
                }
            }
            set.items.push(SegmentItem {
                eeg: EegSegment::new(eeg_data, c_n, rate, tr.id.clone())?,
                env: EnvelopeSet::new(streams, tr.attended_index)?,
                trial_id: tr.id.clone(),
                window_index,
            });
            window_index += 1;
            start += hop;
        }
        if window_index == 0 {
            set.skipped_trials += 1;
        }
    }
    if set.items.is_empty() {
        return Err(Error::DataQuality("all trials too short for the window spec".into()));
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizePolicy {
    /// Z-score each EEG channel with statistics pooled over its own trial's
    /// segments. Envelopes are untouched (the correlation metrics are
    /// invariant to positive affine transforms).
    PerTrialZscore,
    None,
}

/// Normalizes EEG channels in place. Returns the number of zero-variance
/// channels that were zero-filled.
pub fn normalize(set: &mut SegmentSet, policy: NormalizePolicy) -> Result<usize> {
    if set.items.is_empty() {
        return Err(Error::EmptyInput("segment set"));
    }
    if policy == NormalizePolicy::None {
        return Ok(0);
    }
    let c_n = set.items[0].eeg.n_channels;
    // Pooled per (trial, channel) statistics.
    let mut stats: BTreeMap<&str, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for item in &set.items {
        let entry = stats
            .entry(item.trial_id.as_str())
            .or_insert_with(|| (0, vec![0.0; c_n], vec![0.0; c_n]));
        let t_n = item.eeg.n_samples();
        entry.0 += t_n;
        for t in 0..t_n {
            for c in 0..c_n {
                let v = item.eeg.get(t, c);
                entry.1[c] += v;
                entry.2[c] += v * v;
            }
        }
    }
    let mut scale: BTreeMap<String, Vec<(f64, f64, bool)>> = BTreeMap::new();
    let mut warnings = 0usize;
    for (id, (n, sums, sqs)) in &stats {
        let n_f = *n as f64;
        let mut per_channel = Vec::with_capacity(c_n);
        for c in 0..c_n {
            let mean = sums[c] / n_f;
            let var = (sqs[c] / n_f - mean * mean).max(0.0);
            let msq = sqs[c] / n_f;
            let degenerate = var <= msq * 1e-18;
            if degenerate {
                warnings += 1;
            }
            per_channel.push((mean, var.sqrt(), degenerate));
        }
        scale.insert((*id).to_string(), per_channel);
    }
    for item in &mut set.items {
        let per_channel = &scale[&item.trial_id];
        let t_n = item.eeg.n_samples();
        for t in 0..t_n {
            for (c, &(mean, sd, degenerate)) in per_channel.iter().enumerate() {
                let v = &mut item.eeg.data[t * c_n + c];
                *v = if degenerate { 0.0 } else { (*v - mean) / sd };
            }
        }
    }
    Ok(warnings)
}
