//! Synthetic multi-speaker forward model: rectified band-limited noise
//! envelopes, Gabor-mixture temporal response functions, and EEG assembled as
//! attended response + attenuated unattended response + noise at a configured
//! SNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::correlation::EnvelopeSet;
use crate::dataset::{Bundle, TrialData};
use crate::decoder::EegSegment;
use crate::error::{Error, Result};
use crate::signal::{bandpass, FilterSpec, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_trials: usize,
    pub trial_seconds: f64,
    pub rate_hz: f64,
    pub n_channels: usize,
    pub n_speakers: usize,
    /// Attended-response power over noise power, in dB.
    pub snr_db: f64,
    /// Gain on the unattended cortical response, in [0, 1].
    pub unattended_gain: f64,
    /// Fraction of a common component mixed into every speaker's envelope.
    pub shared_fraction: f64,
    pub envelope_band_hz: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_trials: 8,
            trial_seconds: 120.0,
            rate_hz: 128.0,
            n_channels: 16,
            n_speakers: 2,
            snr_db: 0.0,
            unattended_gain: 0.7,
            shared_fraction: 0.3,
            envelope_band_hz: (1.0, 9.0),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 || self.n_channels == 0 || self.n_speakers < 2 {
            return Err(Error::Config(
                "need positive trial/channel counts and at least 2 speakers".into(),
            ));
        }
        if !(self.trial_seconds > 0.0 && self.rate_hz > 0.0) {
            return Err(Error::Config("trial length and rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.unattended_gain) {
            return Err(Error::Config("unattended_gain must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::Config("shared_fraction must be in [0, 1]".into()));
        }
        let (lo, hi) = self.envelope_band_hz;
        if !(lo > 0.0 && lo < hi && hi < self.rate_hz / 2.0) {
            return Err(Error::Config(format!(
                "envelope band ({lo}, {hi}) invalid for rate {}",
                self.rate_hz
            )));
        }
        if self.trial_seconds * self.rate_hz < 256.0 {
            return Err(Error::Config("trial must span at least 256 samples".into()));
        }
        Ok(())
    }
}

/// One generated trial: full-length EEG, all envelopes, and the ground truth
/// that produced them.
#[derive(Debug, Clone)]
pub struct SynthTrial {
    pub eeg: EegSegment,
    pub envelopes: EnvelopeSet,
    pub truth: SynthTruth,
}

/// Generator parameters actually used for a trial.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub attended_trfs: Vec<Vec<f64>>,
    pub unattended_trfs: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

/// Derives an independent RNG from a base seed, a purpose tag, and an index.
fn derived_rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&base.to_le_bytes());
    seed[8..16].copy_from_slice(&index.to_le_bytes());
    let tag_bytes = tag.as_bytes();
    for (i, &b) in tag_bytes.iter().take(16).enumerate() {
        seed[16 + i] = b;
    }
    ChaCha8Rng::from_seed(seed)
}

fn white_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Rectified band-limited Gaussian noise envelope, unit variance, optionally
/// mixed with a shared component before normalization.
pub fn gen_envelope(
    seconds: f64,
    rate_hz: f64,
    band: (f64, f64),
    shared: Option<(&Waveform, f64)>,
    seed: u64,
) -> Result<Waveform> {
    let n = (seconds * rate_hz).round() as usize;
    if n < 256 {
        return Err(Error::Config(format!("envelope needs >= 256 samples, got {n}")));
    }
    let (lo, hi) = band;
    if !(lo > 0.0 && lo < hi && hi < rate_hz / 2.0) {
        return Err(Error::Config(format!("invalid envelope band ({lo}, {hi})")));
    }
    let mut rng = derived_rng(seed, "envelope", 0);
    let white = Waveform::new(white_noise(&mut rng, n), rate_hz)?;
    let banded = bandpass(&white, &FilterSpec::band_pass(lo, hi, 4))?;
    let mut own: Vec<f64> = banded.samples.iter().map(|&v| v.max(0.0)).collect();
    if let Some((shared_wave, frac)) = shared {
        if shared_wave.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "shared component length {} vs {n}",
                shared_wave.len()
            )));
        }
        for (o, &s) in own.iter_mut().zip(shared_wave.samples.iter()) {
            *o = (1.0 - frac) * *o + frac * s;
        }
    }
    let mean = own.iter().sum::<f64>() / n as f64;
    let var = own.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(Error::Config("generated envelope is constant".into()));
    }
    let inv_sd = 1.0 / var.sqrt();
    for v in &mut own {
        *v *= inv_sd;
    }
    Waveform::new(own, rate_hz)
}

const TRF_SUPPORT_SECONDS: f64 = 0.4;

/// Per-channel cortical response kernels: a seeded mixture of two Gabor-like
/// components near 100 ms and 200 ms latency on a 0-400 ms support, unit peak.
pub fn gen_trf(n_channels: usize, rate_hz: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n_channels == 0 {
        return Err(Error::Config("need at least one channel".into()));
    }
    let klen = (TRF_SUPPORT_SECONDS * rate_hz).floor() as usize + 1;
    let mut kernels = Vec::with_capacity(n_channels);
    for c in 0..n_channels {
        let mut rng = derived_rng(seed, "trf", c as u64);
        let mut kernel = vec![0.0; klen];
        for (mu0, amp_lo) in [(0.1, 0.6), (0.2, 0.3)] {
            let mu = mu0 + rng.gen_range(-0.02..0.02);
            let sigma = rng.gen_range(0.025..0.045);
            let freq = rng.gen_range(2.0..5.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(amp_lo..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for (m, k) in kernel.iter_mut().enumerate() {
                let t = m as f64 / rate_hz;
                *k += amp
                    * (-(t - mu) * (t - mu) / (2.0 * sigma * sigma)).exp()
                    * (std::f64::consts::TAU * freq * (t - mu) + phase).cos();
            }
        }
        let peak = kernel.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        for v in &mut kernel {
            *v /= peak;
        }
        kernels.push(kernel);
    }
    Ok(kernels)
}

/// Causal convolution of an envelope with each channel's kernel; zero history
/// before the trial start. Returns time-major T x C data.
pub fn simulate_response(trfs: &[Vec<f64>], env: &[f64]) -> Vec<f64> {
    let c_n = trfs.len();
    let t_n = env.len();
    let mut out = vec![0.0; t_n * c_n];
    for (c, h) in trfs.iter().enumerate() {
        for t in 0..t_n {
            let mmax = h.len().min(t + 1);
            let mut acc = 0.0;
            for m in 0..mmax {
                acc += h[m] * env[t - m];
            }
            out[t * c_n + c] = acc;
        }
    }
    out
}

/// Generates one trial. The attended stream alternates with trial parity so
/// classes balance across a dataset.
pub fn gen_trial(cfg: &SynthConfig, trial_index: usize) -> Result<SynthTrial> {
    cfg.validate()?;
    let t_n = (cfg.trial_seconds * cfg.rate_hz).round() as usize;
    let c_n = cfg.n_channels;

    let shared = gen_envelope(
        cfg.trial_seconds,
        cfg.rate_hz,
        cfg.envelope_band_hz,
        None,
        splitmix(cfg.seed, 0x5ead, trial_index as u64),
    )?;
    let streams: Vec<Vec<f64>> = (0..cfg.n_speakers)
        .map(|j| {
            gen_envelope(
                cfg.trial_seconds,
                cfg.rate_hz,
                cfg.envelope_band_hz,
                Some((&shared, cfg.shared_fraction)),
                splitmix(cfg.seed, 0xe46 + j as u64, trial_index as u64),
            )
            .map(|w| w.samples)
        })
        .collect::<Result<_>>()?;

    let attended_index = trial_index % 2;
    let envelopes = EnvelopeSet::new(streams, attended_index)?;

    // TRFs are a property of the simulated listener: fixed across trials.
    let attended_trfs = gen_trf(c_n, cfg.rate_hz, splitmix(cfg.seed, 0x7a, 0))?;
    let unattended_trfs = gen_trf(c_n, cfg.rate_hz, splitmix(cfg.seed, 0x7b, 0))?;

    let resp_a = simulate_response(&attended_trfs, envelopes.attended());
    let mut unatt_avg = vec![0.0; t_n];
    let m = (cfg.n_speakers - 1) as f64;
    for u in envelopes.unattended() {
        for (a, &v) in unatt_avg.iter_mut().zip(u.iter()) {
            *a += v / m;
        }
    }
    let resp_u = simulate_response(&unattended_trfs, &unatt_avg);

    let p_att = resp_a.iter().map(|v| v * v).sum::<f64>() / resp_a.len() as f64;
    let noise_sigma = (p_att / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    let noise_seed = splitmix(cfg.seed, 0x401e, trial_index as u64);
    let mut nrng = derived_rng(noise_seed, "noise", 0);

    let mut data = vec![0.0; t_n * c_n];
    for i in 0..t_n * c_n {
        let n: f64 = StandardNormal.sample(&mut nrng);
        data[i] = resp_a[i] + cfg.unattended_gain * resp_u[i] + noise_sigma * n;
    }

    let eeg = EegSegment::new(data, c_n, cfg.rate_hz, format!("synth-{trial_index:03}"))?;
    Ok(SynthTrial {
        eeg,
        envelopes,
        truth: SynthTruth { attended_trfs, unattended_trfs, noise_sigma, noise_seed },
    })
}

fn splitmix(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generates the full dataset; each trial is a pure function of
/// `(cfg.seed, trial_index)`.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Vec<SynthTrial>> {
    cfg.validate()?;
    (0..cfg.n_trials).map(|i| gen_trial(cfg, i)).collect()
}

/// Converts generated trials to the on-disk bundle representation
/// (32-bit storage).
pub fn to_bundle(cfg: &SynthConfig, trials: &[SynthTrial]) -> Result<Bundle> {
    let trial_data = trials
        .iter()
        .map(|tr| {
            let t_n = tr.eeg.n_samples();
            let mut env = Vec::with_capacity(t_n * cfg.n_speakers);
            for t in 0..t_n {
                for s in &tr.envelopes.streams {
                    env.push(s[t] as f32);
                }
            }
            TrialData {
                id: tr.eeg.trial_id.clone(),
                n_samples: t_n,
                attended_index: tr.envelopes.attended_index,
                eeg: tr.eeg.data.iter().map(|&v| v as f32).collect(),
                env,
            }
        })
        .collect();
    Bundle::new(cfg.rate_hz, cfg.n_channels, cfg.n_speakers, trial_data)
}

/// Convenience: generate and pack in one step.
pub fn gen_bundle(cfg: &SynthConfig) -> Result<Bundle> {
    to_bundle(cfg, &gen_dataset(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::pearson;

    #[test]
    fn envelope_independent_seeds_weakly_correlated() {
        for seed in 0..20u64 {
            let a = gen_envelope(60.0, 128.0, (1.0, 9.0), None, seed * 2).unwrap();
            let b = gen_envelope(60.0, 128.0, (1.0, 9.0), None, seed * 2 + 1).unwrap();
            let r = pearson(&a.samples, &b.samples).unwrap();
            assert!(r.abs() < 0.2, "seed {seed}: r = {r}");
        }
    }

    #[test]
    fn envelope_fully_shared_identical() {
        let shared = gen_envelope(10.0, 128.0, (1.0, 9.0), None, 1).unwrap();
        let a = gen_envelope(10.0, 128.0, (1.0, 9.0), Some((&shared, 1.0)), 2).unwrap();
        let b = gen_envelope(10.0, 128.0, (1.0, 9.0), Some((&shared, 1.0)), 3).unwrap();
        let r = pearson(&a.samples, &b.samples).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn envelope_nonnegative_nonconstant() {
        let e = gen_envelope(10.0, 128.0, (1.0, 9.0), None, 5).unwrap();
        assert!(e.samples.iter().all(|&v| v >= 0.0));
        let min = e.samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = e.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max > min);
    }

    #[test]
    fn shared_fraction_monotone_in_expectation() {
        let mut means = Vec::new();
        for &frac in &[0.0, 0.3, 0.6, 0.9] {
            let mut acc = 0.0;
            for seed in 0..20u64 {
                let shared = gen_envelope(30.0, 128.0, (1.0, 9.0), None, 1000 + seed).unwrap();
                let a =
                    gen_envelope(30.0, 128.0, (1.0, 9.0), Some((&shared, frac)), 2000 + seed)
                        .unwrap();
                let b =
                    gen_envelope(30.0, 128.0, (1.0, 9.0), Some((&shared, frac)), 3000 + seed)
                        .unwrap();
                acc += pearson(&a.samples, &b.samples).unwrap();
            }
            means.push(acc / 20.0);
        }
        assert!(
            means.windows(2).all(|w| w[0] < w[1]),
            "correlation not monotone in shared fraction: {means:?}"
        );
    }

    #[test]
    fn trf_support_and_determinism() {
        let k1 = gen_trf(16, 128.0, 9).unwrap();
        let k2 = gen_trf(16, 128.0, 9).unwrap();
        assert_eq!(k1, k2);
        let expect_len = (0.4 * 128.0) as usize + 1;
        assert!(k1.iter().all(|k| k.len() == expect_len));
        assert!(k1.iter().all(|k| k.iter().fold(0.0f64, |a, &v| a.max(v.abs())) == 1.0));
    }

    #[test]
    fn trf_channels_differ() {
        let k = gen_trf(16, 128.0, 4).unwrap();
        let mut differing = 0;
        let mut total = 0;
        for i in 0..16 {
            for j in (i + 1)..16 {
                total += 1;
                let max_diff = k[i]
                    .iter()
                    .zip(&k[j])
                    .fold(0.0f64, |a, (&p, &q)| a.max((p - q).abs()));
                if max_diff > 0.01 {
                    differing += 1;
                }
            }
        }
        assert!(differing as f64 >= 0.9 * total as f64, "{differing}/{total}");
    }

    #[test]
    fn forward_model_is_linear() {
        let trfs = gen_trf(4, 128.0, 2).unwrap();
        let e1 = gen_envelope(5.0, 128.0, (1.0, 9.0), None, 10).unwrap();
        let e2 = gen_envelope(5.0, 128.0, (1.0, 9.0), None, 11).unwrap();
        let sum: Vec<f64> = e1.samples.iter().zip(&e2.samples).map(|(a, b)| a + b).collect();
        let r1 = simulate_response(&trfs, &e1.samples);
        let r2 = simulate_response(&trfs, &e2.samples);
        let rs = simulate_response(&trfs, &sum);
        for i in 0..rs.len() {
            assert!((rs[i] - (r1[i] + r2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn attended_index_alternates() {
        let cfg = SynthConfig { n_trials: 4, trial_seconds: 4.0, ..Default::default() };
        let trials = gen_dataset(&cfg).unwrap();
        for (i, tr) in trials.iter().enumerate() {
            assert_eq!(tr.envelopes.attended_index, i % 2);
            assert_eq!(tr.eeg.trial_id, format!("synth-{i:03}"));
        }
    }

    #[test]
    fn dataset_deterministic() {
        let cfg = SynthConfig { n_trials: 2, trial_seconds: 4.0, ..Default::default() };
        let a = gen_dataset(&cfg).unwrap();
        let b = gen_dataset(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.eeg.data, y.eeg.data);
            assert_eq!(x.envelopes.streams, y.envelopes.streams);
        }
    }

    #[test]
    fn snr_scales_noise() {
        let hi = SynthConfig { n_trials: 1, trial_seconds: 4.0, snr_db: 40.0, ..Default::default() };
        let lo = SynthConfig { n_trials: 1, trial_seconds: 4.0, snr_db: -40.0, ..Default::default() };
        let th = gen_trial(&hi, 0).unwrap();
        let tl = gen_trial(&lo, 0).unwrap();
        assert!(tl.truth.noise_sigma > 1000.0 * th.truth.noise_sigma);
    }
}
