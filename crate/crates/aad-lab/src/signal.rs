//! Deterministic signal-processing primitives: zero-phase band-pass filtering,
//! rational-ratio resampling, ERB-spaced gammatone filterbank, and power-law
//! envelope extraction.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// A uniformly sampled real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub rate_hz: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, rate_hz: f64) -> Result<Self> {
        if !rate_hz.is_finite() || rate_hz <= 0.0 {
            return Err(Error::Config(format!("rate_hz must be positive, got {rate_hz}")));
        }
        if samples.is_empty() {
            return Err(Error::EmptyInput("waveform samples"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("waveform contains non-finite samples".into()));
        }
        Ok(Self { samples, rate_hz })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }
}

/// Band-pass filter description. Applied zero-phase (forward-backward), so the
/// effective magnitude order is twice `order`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
}

impl FilterSpec {
    pub fn band_pass(low_hz: f64, high_hz: f64, order: usize) -> Self {
        Self { low_hz, high_hz, order }
    }

    fn validate(&self, rate_hz: f64) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidSpec("filter order must be positive".into()));
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz) {
            return Err(Error::InvalidSpec(format!(
                "need 0 < low ({}) < high ({})",
                self.low_hz, self.high_hz
            )));
        }
        if self.high_hz >= rate_hz / 2.0 {
            return Err(Error::InvalidSpec(format!(
                "high cutoff {} Hz at or above Nyquist {} Hz",
                self.high_hz,
                rate_hz / 2.0
            )));
        }
        Ok(())
    }
}

/// Second-order section in `z^-1`: b0 + b1 z^-1 + b2 z^-2 over 1 + a1 z^-1 + a2 z^-2.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// Direct form II transposed, zero initial state.
    fn filter_in_place(&self, x: &mut [f64]) {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for v in x.iter_mut() {
            let xin = *v;
            let y = self.b[0] * xin + s1;
            s1 = self.b[1] * xin - self.a[0] * y + s2;
            s2 = self.b[2] * xin - self.a[1] * y;
            *v = y;
        }
    }
}

/// Digital Butterworth band-pass as cascaded biquads, designed by the analog
/// prototype -> band transform -> bilinear transform route.
fn butter_bandpass_sos(order: usize, low_hz: f64, high_hz: f64, rate_hz: f64) -> Vec<Biquad> {
    let fs2 = 2.0 * rate_hz;
    // Prewarped analog band edges.
    let wl = fs2 * (PI * low_hz / rate_hz).tan();
    let wh = fs2 * (PI * high_hz / rate_hz).tan();
    let w0 = (wl * wh).sqrt();
    let bw = wh - wl;

    // Analog low-pass prototype poles on the unit circle, left half plane.
    let n = order;
    let proto: Vec<Complex64> = (1..=n)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n - 1) as f64 / (2 * n) as f64))
        .collect();

    // Low-pass -> band-pass: each prototype pole yields two poles.
    let mut analog_poles = Vec::with_capacity(2 * n);
    for p in proto {
        let pb = p * (bw / 2.0);
        let disc = (pb * pb - Complex64::new(w0 * w0, 0.0)).sqrt();
        analog_poles.push(pb + disc);
        analog_poles.push(pb - disc);
    }

    // Bilinear transform of poles; zeros land at z = +1 (n of them) and z = -1.
    let digital_poles: Vec<Complex64> = analog_poles
        .iter()
        .map(|s| (Complex64::new(fs2, 0.0) + s) / (Complex64::new(fs2, 0.0) - s))
        .collect();

    // Pair poles into conjugate (or real) pairs.
    let mut pos: Vec<Complex64> = Vec::new();
    let mut reals: Vec<Complex64> = Vec::new();
    for p in &digital_poles {
        if p.im > 1e-10 {
            pos.push(*p);
        } else if p.im >= -1e-10 {
            reals.push(*p);
        }
    }
    let mut sections = Vec::with_capacity(n);
    for p in pos {
        // Conjugate pair: z^2 - 2 Re(p) z + |p|^2.
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [-2.0 * p.re, p.norm_sqr()],
        });
    }
    let mut it = reals.chunks_exact(2);
    for pair in &mut it {
        let (p, q) = (pair[0].re, pair[1].re);
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [-(p + q), p * q],
        });
    }

    // Normalize so the cascade has unit gain at the (warped) center frequency.
    let wc = 2.0 * (w0 / fs2).atan();
    let z1 = Complex64::from_polar(1.0, -wc); // z^-1
    let z2 = z1 * z1;
    let mut resp = Complex64::new(1.0, 0.0);
    for s in &sections {
        let num = Complex64::new(s.b[0], 0.0) + z1 * s.b[1] + z2 * s.b[2];
        let den = Complex64::new(1.0, 0.0) + z1 * s.a[0] + z2 * s.a[1];
        resp *= num / den;
    }
    let per_section_gain = (1.0 / resp.norm()).powf(1.0 / sections.len() as f64);
    for s in &mut sections {
        for b in &mut s.b {
            *b *= per_section_gain;
        }
    }
    sections
}

fn sosfilt_in_place(sos: &[Biquad], x: &mut [f64]) {
    for s in sos {
        s.filter_in_place(x);
    }
}

/// Zero-phase band-pass: the Butterworth cascade is run forward and backward
/// over an odd-reflection extension of the signal, then the extension is
/// trimmed. Output has the same length and rate as the input.
pub fn bandpass(signal: &Waveform, spec: &FilterSpec) -> Result<Waveform> {
    spec.validate(signal.rate_hz)?;
    let n = signal.len();
    if n <= 3 * spec.order {
        return Err(Error::InsufficientLength { got: n, need: 3 * spec.order });
    }
    let sos = butter_bandpass_sos(spec.order, spec.low_hz, spec.high_hz, signal.rate_hz);

    // Long pad for the low cutoff's slow transient; odd reflection about the ends.
    let padlen = ((3.0 * signal.rate_hz / spec.low_hz).ceil() as usize).min(n - 1);
    let x = &signal.samples;
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    for k in (1..=padlen).rev() {
        ext.push(2.0 * x[0] - x[k]);
    }
    ext.extend_from_slice(x);
    for k in 1..=padlen {
        ext.push(2.0 * x[n - 1] - x[n - 1 - k]);
    }

    sosfilt_in_place(&sos, &mut ext);
    ext.reverse();
    sosfilt_in_place(&sos, &mut ext);
    ext.reverse();

    let out = ext[padlen..padlen + n].to_vec();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSpec("filter produced non-finite output".into()));
    }
    Ok(Waveform { samples: out, rate_hz: signal.rate_hz })
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Downsample with a Hann-windowed sinc kernel whose cutoff sits at the target
/// Nyquist. Kernel weights are renormalized per output sample, so constants
/// are preserved exactly and equal-rate calls are the identity.
pub fn resample(signal: &Waveform, target_hz: f64) -> Result<Waveform> {
    if !target_hz.is_finite() || target_hz <= 0.0 {
        return Err(Error::Config(format!("target rate must be positive, got {target_hz}")));
    }
    if target_hz > signal.rate_hz * (1.0 + 1e-12) {
        return Err(Error::UnsupportedDirection { input_hz: signal.rate_hz, target_hz });
    }
    let n = signal.len();
    let out_len = ((n as f64) * target_hz / signal.rate_hz).floor() as usize;
    if out_len == 0 {
        return Err(Error::InsufficientLength { got: n, need: (signal.rate_hz / target_hz) as usize });
    }
    let ratio = target_hz / signal.rate_hz; // <= 1
    let step = signal.rate_hz / target_hz; // input samples per output sample
    const ZERO_CROSSINGS: f64 = 16.0;
    let half = ZERO_CROSSINGS / ratio;
    let x = &signal.samples;
    let mut out = Vec::with_capacity(out_len);
    for k in 0..out_len {
        let center = k as f64 * step;
        let lo = ((center - half).ceil().max(0.0)) as usize;
        let hi = ((center + half).floor() as usize).min(n - 1);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        #[allow(clippy::needless_range_loop)] // `m` is both a sample index and a time offset
        for m in lo..=hi {
            let tau = m as f64 - center;
            let w = sinc(ratio * tau) * 0.5 * (1.0 + (PI * tau / half).cos());
            acc += w * x[m];
            wsum += w;
        }
        out.push(acc / wsum);
    }
    Waveform::new(out, target_hz)
}

/// ERB-number scale (Glasberg & Moore): E(f) = 21.4 log10(4.37 f / 1000 + 1).
pub fn erb_number(f_hz: f64) -> f64 {
    21.4 * (4.37 * f_hz / 1000.0 + 1.0).log10()
}

/// Inverse of [`erb_number`].
pub fn erb_number_inv(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) * 1000.0 / 4.37
}

/// Equivalent rectangular bandwidth at center frequency `f_hz`.
pub fn erb_bandwidth(f_hz: f64) -> f64 {
    24.7 * (4.37 * f_hz / 1000.0 + 1.0)
}

/// `n` center frequencies equally spaced on the ERB-number scale, endpoints at
/// `fmin_hz` and `fmax_hz`.
pub fn erb_centers(n: usize, fmin_hz: f64, fmax_hz: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidCount(n));
    }
    if !(fmin_hz > 0.0 && fmin_hz < fmax_hz) {
        return Err(Error::Config(format!("need 0 < fmin ({fmin_hz}) < fmax ({fmax_hz})")));
    }
    let e0 = erb_number(fmin_hz);
    let e1 = erb_number(fmax_hz);
    let mut centers = Vec::with_capacity(n);
    for i in 0..n {
        let e = e0 + (e1 - e0) * i as f64 / (n - 1) as f64;
        centers.push(erb_number_inv(e));
    }
    centers[0] = fmin_hz;
    centers[n - 1] = fmax_hz;
    Ok(centers)
}

/// Gammatone filterbank with FIR-truncated impulse responses.
#[derive(Debug, Clone)]
pub struct GammatoneBank {
    pub center_hz: Vec<f64>,
    pub order: usize,
    pub rate_hz: f64,
    kernels: Vec<Vec<f64>>,
}

impl GammatoneBank {
    /// Builds kernels `t^(order-1) exp(-2 pi b t) cos(2 pi fc t)` with
    /// b = 1.019 ERB(fc), truncated where the impulse-response envelope falls
    /// below 1e-4 of its peak, and normalized to unit gain at the center
    /// frequency.
    pub fn new(center_hz: Vec<f64>, order: usize, rate_hz: f64) -> Result<Self> {
        if center_hz.is_empty() {
            return Err(Error::EmptyInput("gammatone center frequencies"));
        }
        if order == 0 {
            return Err(Error::Config("gammatone order must be positive".into()));
        }
        if center_hz.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("gammatone centers must be strictly increasing".into()));
        }
        if *center_hz.last().unwrap() >= rate_hz / 2.0 {
            return Err(Error::Config(format!(
                "top center {} Hz at or above Nyquist {} Hz",
                center_hz.last().unwrap(),
                rate_hz / 2.0
            )));
        }
        let kernels = center_hz
            .iter()
            .map(|&fc| gammatone_kernel(fc, order, rate_hz))
            .collect();
        Ok(Self { center_hz, order, rate_hz, kernels })
    }

    pub fn erb_spaced(n: usize, fmin_hz: f64, fmax_hz: f64, order: usize, rate_hz: f64) -> Result<Self> {
        Self::new(erb_centers(n, fmin_hz, fmax_hz)?, order, rate_hz)
    }

    pub fn n_bands(&self) -> usize {
        self.center_hz.len()
    }

    pub fn max_kernel_len(&self) -> usize {
        self.kernels.iter().map(|k| k.len()).max().unwrap_or(0)
    }
}

fn gammatone_kernel(fc: f64, order: usize, rate_hz: f64) -> Vec<f64> {
    let b = 1.019 * erb_bandwidth(fc);
    let env = |t: f64| t.powi(order as i32 - 1) * (-2.0 * PI * b * t).exp();
    let t_peak = (order as f64 - 1.0) / (2.0 * PI * b);
    let peak = env(t_peak).max(f64::MIN_POSITIVE);
    // Scan past the envelope peak for the 1e-4 cutoff.
    let dt = 1.0 / rate_hz;
    let mut m_end = (t_peak / dt).ceil() as usize + 1;
    loop {
        let t = m_end as f64 * dt;
        if env(t) < 1e-4 * peak {
            break;
        }
        m_end += 1;
    }
    let mut h: Vec<f64> = (0..=m_end)
        .map(|m| {
            let t = m as f64 * dt;
            env(t) * (2.0 * PI * fc * t).cos()
        })
        .collect();
    // Unit gain at the center frequency.
    let mut resp = Complex64::new(0.0, 0.0);
    for (m, &v) in h.iter().enumerate() {
        resp += Complex64::from_polar(v, -2.0 * PI * fc * m as f64 / rate_hz);
    }
    let g = 1.0 / resp.norm();
    for v in &mut h {
        *v *= g;
    }
    h
}

/// Causal same-length convolution of the audio with every subband kernel.
pub fn gammatone_apply(audio: &Waveform, bank: &GammatoneBank) -> Result<Vec<Waveform>> {
    if (audio.rate_hz - bank.rate_hz).abs() > 1e-9 * bank.rate_hz {
        return Err(Error::RateMismatch { left: audio.rate_hz, right: bank.rate_hz });
    }
    let n = audio.len();
    let klen = bank.max_kernel_len();
    if n < klen {
        return Err(Error::InsufficientLength { got: n, need: klen });
    }
    let x = &audio.samples;
    let mut out = Vec::with_capacity(bank.n_bands());
    for h in &bank.kernels {
        let mut y = vec![0.0; n];
        for (t, yt) in y.iter_mut().enumerate() {
            let mmax = h.len().min(t + 1);
            let mut acc = 0.0;
            for m in 0..mmax {
                acc += h[m] * x[t - m];
            }
            *yt = acc;
        }
        out.push(Waveform { samples: y, rate_hz: audio.rate_hz });
    }
    Ok(out)
}

/// Power-law envelope: `out[t] = sum_k |subband_k[t]|^exponent`.
pub fn envelope(subbands: &[Waveform], exponent: f64) -> Result<Waveform> {
    if subbands.is_empty() {
        return Err(Error::EmptyInput("subband list"));
    }
    if !(exponent > 0.0 && exponent <= 1.0) {
        return Err(Error::Config(format!("exponent must be in (0, 1], got {exponent}")));
    }
    let n = subbands[0].len();
    let rate = subbands[0].rate_hz;
    for (k, s) in subbands.iter().enumerate() {
        if s.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "subband {k} has length {}, expected {n}",
                s.len()
            )));
        }
        if (s.rate_hz - rate).abs() > 1e-9 * rate {
            return Err(Error::RateMismatch { left: s.rate_hz, right: rate });
        }
    }
    let mut out = vec![0.0; n];
    for s in subbands {
        for (o, &v) in out.iter_mut().zip(s.samples.iter()) {
            *o += v.abs().powf(exponent);
        }
    }
    Ok(Waveform { samples: out, rate_hz: rate })
}

/// Configuration for the audio -> broadband-envelope pipeline.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EnvelopePipelineConfig {
    pub n_bands: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub gammatone_order: usize,
    pub exponent: f64,
    pub out_rate_hz: f64,
}

impl Default for EnvelopePipelineConfig {
    fn default() -> Self {
        Self {
            n_bands: 17,
            fmin_hz: 50.0,
            fmax_hz: 5000.0,
            gammatone_order: 4,
            exponent: 0.6,
            out_rate_hz: 128.0,
        }
    }
}

/// Full broadband-envelope pipeline: gammatone filterbank, power-law
/// magnitude compression, linear summation, and resampling to the output rate.
pub fn envelope_pipeline(audio: &Waveform, cfg: &EnvelopePipelineConfig) -> Result<Waveform> {
    let bank = GammatoneBank::erb_spaced(
        cfg.n_bands,
        cfg.fmin_hz,
        cfg.fmax_hz,
        cfg.gammatone_order,
        audio.rate_hz,
    )?;
    let subbands = gammatone_apply(audio, &bank)?;
    let broad = envelope(&subbands, cfg.exponent)?;
    resample(&broad, cfg.out_rate_hz)
}
