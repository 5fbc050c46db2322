//! Trainable decoders mapping a T x C EEG segment to a length-T envelope
//! prediction: a lagged linear spatiotemporal decoder and a small stack of
//! 1-D convolutions with an input skip connection. Gradients are hand-derived
//! layer-local backward rules checked against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

/// One windowed multichannel EEG segment, time-major (`data[t * C + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EegSegment {
    pub data: Vec<f64>,
    pub n_channels: usize,
    pub rate_hz: f64,
    pub trial_id: String,
}

impl EegSegment {
    pub fn new(data: Vec<f64>, n_channels: usize, rate_hz: f64, trial_id: String) -> Result<Self> {
        if n_channels == 0 || data.len() < 2 * n_channels || !data.len().is_multiple_of(n_channels) {
            return Err(Error::ShapeMismatch(format!(
                "EEG data length {} not a multiple >= 2 of channel count {}",
                data.len(),
                n_channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("EEG segment contains non-finite values".into()));
        }
        Ok(Self { data, n_channels, rate_hz, trial_id })
    }

    pub fn n_samples(&self) -> usize {
        self.data.len() / self.n_channels
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.n_channels + c]
    }
}

/// Decoder family and its family-specific hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum DecoderFamily {
    /// `yhat_t = b + sum_c sum_{tau=0..lag} W[c,tau] X[t-tau, c]`, zeros
    /// before the segment start.
    LinearLagged { lag_samples: usize },
    /// Stacked same-length 1-D convolutions with tanh between layers and a
    /// pointwise input skip added to the output.
    ConvStack { layers: usize, kernel: usize, hidden_width: usize },
}

impl DecoderFamily {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderFamily::LinearLagged { .. } => "linear_lagged",
            DecoderFamily::ConvStack { .. } => "conv_stack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channels: usize,
    #[serde(flatten)]
    pub family: DecoderFamily,
    pub init_seed: u64,
}

impl DecoderConfig {
    /// Default lag window 0-250 ms at 128 Hz.
    pub fn linear(channels: usize, init_seed: u64) -> Self {
        Self { channels, family: DecoderFamily::LinearLagged { lag_samples: 32 }, init_seed }
    }

    pub fn conv(channels: usize, init_seed: u64) -> Self {
        Self {
            channels,
            family: DecoderFamily::ConvStack { layers: 2, kernel: 9, hidden_width: 8 },
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        match self.family {
            DecoderFamily::LinearLagged { .. } => Ok(()),
            DecoderFamily::ConvStack { layers, kernel, hidden_width } => {
                if layers == 0 {
                    return Err(Error::Config("conv stack needs at least 1 layer".into()));
                }
                if kernel % 2 == 0 || kernel == 0 {
                    return Err(Error::Config(format!("kernel must be odd, got {kernel}")));
                }
                if hidden_width == 0 && layers > 1 {
                    return Err(Error::Config("hidden width must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// (in_width, out_width) per conv layer.
    fn conv_widths(&self) -> Vec<(usize, usize)> {
        match self.family {
            DecoderFamily::ConvStack { layers, hidden_width, .. } => (0..layers)
                .map(|i| {
                    let w_in = if i == 0 { self.channels } else { hidden_width };
                    let w_out = if i + 1 == layers { 1 } else { hidden_width };
                    (w_in, w_out)
                })
                .collect(),
            _ => unreachable!(),
        }
    }
}

/// Named slices into a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub slices: Vec<(String, Range<usize>)>,
}

impl ParamLayout {
    pub fn total(&self) -> usize {
        self.slices.last().map(|(_, r)| r.end).unwrap_or(0)
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.slices.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone())
    }

    fn for_config(cfg: &DecoderConfig) -> ParamLayout {
        let mut slices = Vec::new();
        let mut off = 0usize;
        let mut push = |name: String, len: usize, off: &mut usize| {
            slices.push((name, *off..*off + len));
            *off += len;
        };
        match cfg.family {
            DecoderFamily::LinearLagged { lag_samples } => {
                push("weights".into(), cfg.channels * (lag_samples + 1), &mut off);
                push("bias".into(), 1, &mut off);
            }
            DecoderFamily::ConvStack { kernel, .. } => {
                for (i, (w_in, w_out)) in cfg.conv_widths().iter().enumerate() {
                    push(format!("layer{i}.weight"), w_in * w_out * kernel, &mut off);
                    push(format!("layer{i}.bias"), *w_out, &mut off);
                }
                push("skip.weight".into(), cfg.channels, &mut off);
            }
        }
        ParamLayout { slices }
    }
}

/// Flat trainable parameters plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl DecoderParams {
    pub fn zeros_like(&self) -> DecoderParams {
        DecoderParams { values: vec![0.0; self.values.len()], layout: self.layout.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes `<u64 header byte length><TOML layout header><f64 LE values>`.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            format_version: u32,
            n_values: usize,
            layout: &'a ParamLayout,
        }
        let header = toml::to_string(&Header {
            format_version: 1,
            n_values: self.values.len(),
            layout: &self.layout,
        })
        .map_err(|e| Error::Config(format!("layout serialization failed: {e}")))?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(header.as_bytes())?;
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DecoderParams> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
            n_values: usize,
            layout: ParamLayout,
        }
        let mut f = std::fs::File::open(path)?;
        let mut len_buf = [0u8; 8];
        f.read_exact(&mut len_buf)?;
        let hlen = u64::from_le_bytes(len_buf) as usize;
        let mut hbuf = vec![0u8; hlen];
        f.read_exact(&mut hbuf)?;
        let header: Header = toml::from_str(
            std::str::from_utf8(&hbuf)
                .map_err(|e| Error::Config(format!("bad params header: {e}")))?,
        )
        .map_err(|e| Error::Config(format!("bad params header: {e}")))?;
        if header.format_version != 1 {
            return Err(Error::UnsupportedVersion(header.format_version));
        }
        let mut values = Vec::with_capacity(header.n_values);
        let mut vbuf = [0u8; 8];
        for _ in 0..header.n_values {
            f.read_exact(&mut vbuf)?;
            values.push(f64::from_le_bytes(vbuf));
        }
        if header.layout.total() != values.len() {
            return Err(Error::Config("params layout does not cover value vector".into()));
        }
        Ok(DecoderParams { values, layout: header.layout })
    }
}

/// Deterministic initialization: zeros for the linear family, seeded uniform
/// scaled by `1/sqrt(fan_in)` for the conv family.
pub fn init(cfg: &DecoderConfig) -> Result<DecoderParams> {
    cfg.validate()?;
    let layout = ParamLayout::for_config(cfg);
    let n = layout.total();
    let values = match cfg.family {
        DecoderFamily::LinearLagged { .. } => vec![0.0; n],
        DecoderFamily::ConvStack { kernel, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
            let mut values = vec![0.0; n];
            for (i, (w_in, _)) in cfg.conv_widths().iter().enumerate() {
                let scale = 1.0 / ((w_in * kernel) as f64).sqrt();
                let r = layout.range(&format!("layer{i}.weight")).unwrap();
                for v in &mut values[r] {
                    *v = rng.gen_range(-1.0..1.0) * scale;
                }
                // biases stay zero
            }
            let scale = 1.0 / (cfg.channels as f64).sqrt();
            let r = layout.range("skip.weight").unwrap();
            for v in &mut values[r] {
                *v = rng.gen_range(-1.0..1.0) * scale;
            }
            values
        }
    };
    Ok(DecoderParams { values, layout })
}

fn check_input(cfg: &DecoderConfig, x: &EegSegment) -> Result<()> {
    if x.n_channels != cfg.channels {
        return Err(Error::ShapeMismatch(format!(
            "segment has {} channels, decoder expects {}",
            x.n_channels, cfg.channels
        )));
    }
    Ok(())
}

/// Same-length 1-D correlation over time: `y[t,o] = b_o + sum_ci sum_d
/// w[o,ci,d] a[t+d-r, ci]` with zero padding, `r = (k-1)/2`.
fn conv_same_forward(
    a: &[f64],
    t_len: usize,
    w_in: usize,
    w_out: usize,
    kernel: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let r = (kernel - 1) / 2;
    let mut y = vec![0.0; t_len * w_out];
    for t in 0..t_len {
        for o in 0..w_out {
            let mut acc = bias[o];
            for d in 0..kernel {
                let s = t as isize + d as isize - r as isize;
                if s < 0 || s as usize >= t_len {
                    continue;
                }
                let s = s as usize;
                for ci in 0..w_in {
                    acc += weight[(o * w_in + ci) * kernel + d] * a[s * w_in + ci];
                }
            }
            y[t * w_out + o] = acc;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)] // private kernel; all ten pieces belong together
fn conv_same_backward(
    a: &[f64],
    grad_y: &[f64],
    t_len: usize,
    w_in: usize,
    w_out: usize,
    kernel: usize,
    weight: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    grad_a: &mut [f64],
) {
    let r = (kernel - 1) / 2;
    for t in 0..t_len {
        for o in 0..w_out {
            let gy = grad_y[t * w_out + o];
            if gy == 0.0 {
                continue;
            }
            grad_bias[o] += gy;
            for d in 0..kernel {
                let s = t as isize + d as isize - r as isize;
                if s < 0 || s as usize >= t_len {
                    continue;
                }
                let s = s as usize;
                for ci in 0..w_in {
                    grad_weight[(o * w_in + ci) * kernel + d] += gy * a[s * w_in + ci];
                    grad_a[s * w_in + ci] += gy * weight[(o * w_in + ci) * kernel + d];
                }
            }
        }
    }
}

/// Forward pass: deterministic, side-effect free.
#[allow(clippy::needless_range_loop)] // indices couple several flat arrays with offsets
pub fn forward(params: &DecoderParams, cfg: &DecoderConfig, x: &EegSegment) -> Result<Vec<f64>> {
    check_input(cfg, x)?;
    let t_len = x.n_samples();
    match cfg.family {
        DecoderFamily::LinearLagged { lag_samples } => {
            let wr = params.layout.range("weights").unwrap();
            let w = &params.values[wr];
            let bias = params.values[params.layout.range("bias").unwrap().start];
            let c_n = cfg.channels;
            let mut y = vec![bias; t_len];
            for t in 0..t_len {
                let mut acc = 0.0;
                let tau_max = lag_samples.min(t);
                for tau in 0..=tau_max {
                    let row = t - tau;
                    for c in 0..c_n {
                        acc += w[c * (lag_samples + 1) + tau] * x.data[row * c_n + c];
                    }
                }
                y[t] += acc;
            }
            Ok(y)
        }
        DecoderFamily::ConvStack { layers, kernel, .. } => {
            let widths = cfg.conv_widths();
            let mut act = x.data.clone();
            for (i, &(w_in, w_out)) in widths.iter().enumerate() {
                let w = &params.values[params.layout.range(&format!("layer{i}.weight")).unwrap()];
                let b = &params.values[params.layout.range(&format!("layer{i}.bias")).unwrap()];
                let mut z = conv_same_forward(&act, t_len, w_in, w_out, kernel, w, b);
                if i + 1 < layers {
                    for v in &mut z {
                        *v = v.tanh();
                    }
                }
                act = z;
            }
            let skip = &params.values[params.layout.range("skip.weight").unwrap()];
            let c_n = cfg.channels;
            let mut y = act; // T x 1
            for t in 0..t_len {
                let mut s = 0.0;
                for c in 0..c_n {
                    s += skip[c] * x.data[t * c_n + c];
                }
                y[t] += s;
            }
            Ok(y)
        }
    }
}

/// Backward pass: gradient of the loss with respect to every parameter given
/// the upstream gradient `dL/dyhat`. Layout matches the parameter vector.
#[allow(clippy::needless_range_loop)] // indices couple several flat arrays with offsets
pub fn backward(
    params: &DecoderParams,
    cfg: &DecoderConfig,
    x: &EegSegment,
    upstream: &[f64],
) -> Result<DecoderParams> {
    check_input(cfg, x)?;
    let t_len = x.n_samples();
    if upstream.len() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "upstream length {} vs segment length {t_len}",
            upstream.len()
        )));
    }
    let mut grad = params.zeros_like();
    match cfg.family {
        DecoderFamily::LinearLagged { lag_samples } => {
            let wr = params.layout.range("weights").unwrap();
            let br = params.layout.range("bias").unwrap();
            let c_n = cfg.channels;
            {
                let gw = &mut grad.values[wr];
                for t in 0..t_len {
                    let u = upstream[t];
                    if u == 0.0 {
                        continue;
                    }
                    let tau_max = lag_samples.min(t);
                    for tau in 0..=tau_max {
                        let row = t - tau;
                        for c in 0..c_n {
                            gw[c * (lag_samples + 1) + tau] += u * x.data[row * c_n + c];
                        }
                    }
                }
            }
            grad.values[br.start] = upstream.iter().sum();
        }
        DecoderFamily::ConvStack { layers, kernel, .. } => {
            let widths = cfg.conv_widths();
            // Recompute and stash layer inputs and post-activation outputs.
            let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(layers);
            let mut act = x.data.clone();
            for (i, &(w_in, w_out)) in widths.iter().enumerate() {
                inputs.push(act.clone());
                let w = &params.values[params.layout.range(&format!("layer{i}.weight")).unwrap()];
                let b = &params.values[params.layout.range(&format!("layer{i}.bias")).unwrap()];
                let mut z = conv_same_forward(&act, t_len, w_in, w_out, kernel, w, b);
                if i + 1 < layers {
                    for v in &mut z {
                        *v = v.tanh();
                    }
                }
                act = z;
            }

            // Skip path.
            let c_n = cfg.channels;
            {
                let sr = params.layout.range("skip.weight").unwrap();
                let gs = &mut grad.values[sr];
                for t in 0..t_len {
                    for c in 0..c_n {
                        gs[c] += upstream[t] * x.data[t * c_n + c];
                    }
                }
            }

            // Conv layers, last to first.
            let mut grad_out: Vec<f64> = upstream.to_vec(); // grad wrt layer output (post-activation)
            for i in (0..layers).rev() {
                let (w_in, w_out) = widths[i];
                // Undo tanh for hidden layers: act stored post-activation in `inputs[i+1]`
                // for i+1 < layers; the post-activation of layer i is inputs[i+1] (or the
                // final pre-skip output for the last layer, which has no tanh).
                if i + 1 < layers {
                    let post = &inputs[i + 1];
                    for (g, &a) in grad_out.iter_mut().zip(post.iter()) {
                        *g *= 1.0 - a * a;
                    }
                }
                let wr = params.layout.range(&format!("layer{i}.weight")).unwrap();
                let br = params.layout.range(&format!("layer{i}.bias")).unwrap();
                let w = params.values[wr.clone()].to_vec();
                let mut gw = vec![0.0; wr.len()];
                let mut gb = vec![0.0; br.len()];
                let mut ga = vec![0.0; t_len * w_in];
                conv_same_backward(
                    &inputs[i], &grad_out, t_len, w_in, w_out, kernel, &w, &mut gw, &mut gb,
                    &mut ga,
                );
                grad.values[wr].copy_from_slice(&gw);
                grad.values[br].copy_from_slice(&gb);
                grad_out = ga;
            }
        }
    }
    Ok(grad)
}
