//! Multichannel STFT and inverse STFT with exact weighted-overlap-add
//! reconstruction.
//!
//! Analysis uses a periodic Hann window. Synthesis uses the canonical dual
//! window `s[u] = a[u] / D[u mod H]` with `D[r] = Σ_{m ≡ r (mod H)} a[m]²`,
//! which makes analysis → synthesis an identity on the interior of the
//! signal for any window/hop pair whose squared window actually covers
//! every hop phase. The signal is zero-padded by a full window on both
//! sides so even the first and last samples sit under a complete set of
//! frames; reconstruction trims the padding using the stored signal length.

use num_complex::Complex64;
use realfft::RealFftPlanner;

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// Relative floor for the overlap-add envelope: if any hop phase collects
/// less than this fraction of the peak envelope, perfect reconstruction is
/// numerically meaningless and the configuration is rejected.
pub const COLA_MIN_REL: f64 = 1e-12;

/// STFT framing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    /// Analysis window length in samples (even, ≥ 2).
    pub window_len: usize,
    /// Hop between adjacent frames in samples (1 ..= window_len).
    pub hop_len: usize,
}

impl StftConfig {
    pub fn new(window_len: usize, hop_len: usize) -> Result<Self> {
        let cfg = Self {
            window_len,
            hop_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.window_len % 2 != 0 {
            return Err(Error::invalid_config(format!(
                "window length must be even and at least 2, got {}",
                self.window_len
            )));
        }
        if self.hop_len == 0 || self.hop_len > self.window_len {
            return Err(Error::invalid_config(format!(
                "hop length must be in 1..={}, got {}",
                self.window_len, self.hop_len
            )));
        }
        // A valid config must admit a synthesis window.
        self.synthesis_window()?;
        Ok(())
    }

    /// Number of one-sided frequency bins, DC through Nyquist.
    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples after
    /// padding by a full window on both sides.
    pub fn n_frames(&self, len: usize) -> usize {
        (len + self.window_len) / self.hop_len + 1
    }

    /// Periodic Hann analysis window.
    pub fn analysis_window(&self) -> Vec<f64> {
        let w = self.window_len;
        (0..w)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / w as f64).cos()))
            .collect()
    }

    /// Canonical dual synthesis window; errors if the squared analysis
    /// window fails to cover some hop phase (e.g. Hann with hop == window).
    pub fn synthesis_window(&self) -> Result<Vec<f64>> {
        let a = self.analysis_window();
        let h = self.hop_len;
        let mut envelope = vec![0.0; h];
        for (i, &ai) in a.iter().enumerate() {
            envelope[i % h] += ai * ai;
        }
        let max = envelope.iter().cloned().fold(0.0, f64::max);
        let min = envelope.iter().cloned().fold(f64::INFINITY, f64::min);
        if min <= COLA_MIN_REL * max {
            return Err(Error::invalid_config(format!(
                "window {} / hop {} leaves hop phases uncovered (envelope min {min:.3e}, max {max:.3e})",
                self.window_len, self.hop_len
            )));
        }
        Ok(a.iter()
            .enumerate()
            .map(|(i, &ai)| ai / envelope[i % h])
            .collect())
    }
}

/// Multichannel time-domain signal with a common sample rate.
#[derive(Debug, Clone)]
pub struct TimeSignal {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl TimeSignal {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid_input("signal needs at least one channel"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid_input("sample rate must be positive"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::invalid_input("all channels must share one length"));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    /// Samplewise sum of two equally shaped signals.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.n_channels() != other.n_channels()
            || self.len() != other.len()
            || self.sample_rate != other.sample_rate
        {
            return Err(Error::invalid_input("signal shapes differ in add"));
        }
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        TimeSignal::new(channels, self.sample_rate)
    }

    /// Returns a copy with every sample multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|ch| ch.iter().map(|x| x * c).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Complex STFT coefficients indexed `[channel][bin][frame]`, together with
/// everything needed to invert exactly: the framing config and the original
/// signal length for trimming the padding.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub bins: Array3<Complex64>,
    pub config: StftConfig,
    pub sample_rate: u32,
    pub signal_len: usize,
}

impl Spectrogram {
    pub fn n_channels(&self) -> usize {
        self.bins.dim().0
    }

    pub fn n_bins(&self) -> usize {
        self.bins.dim().1
    }

    pub fn n_frames(&self) -> usize {
        self.bins.dim().2
    }

    /// Wraps a single-channel coefficient matrix (bins × frames) so it can
    /// be inverted with the same framing as `like`.
    pub fn from_single_channel(coeffs: Array2<Complex64>, like: &Spectrogram) -> Result<Self> {
        if coeffs.dim() != (like.n_bins(), like.n_frames()) {
            return Err(Error::invalid_input(format!(
                "coefficient shape {:?} does not match framing ({}, {})",
                coeffs.dim(),
                like.n_bins(),
                like.n_frames()
            )));
        }
        let (f, t) = coeffs.dim();
        let bins = coeffs.into_shape_with_order((1, f, t)).expect("1×F×T");
        Ok(Self {
            bins,
            config: like.config,
            sample_rate: like.sample_rate,
            signal_len: like.signal_len,
        })
    }
}

/// Forward multichannel STFT.
pub fn stft(signal: &TimeSignal, config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    if signal.is_empty() {
        return Err(Error::invalid_input("cannot transform an empty signal"));
    }
    let w = config.window_len;
    let h = config.hop_len;
    let window = config.analysis_window();
    let n_bins = config.n_bins();
    let n_frames = config.n_frames(signal.len());
    let len = signal.len() as isize;

    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(w);
    let mut frame = fft.make_input_vec();
    let mut spectrum = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();

    let mut bins = Array3::zeros((signal.n_channels(), n_bins, n_frames));
    for ch in 0..signal.n_channels() {
        let samples = signal.channel(ch);
        for m in 0..n_frames {
            // Frame m starts at m·H - W in unpadded coordinates.
            let start = (m * h) as isize - w as isize;
            for (j, slot) in frame.iter_mut().enumerate() {
                let idx = start + j as isize;
                *slot = if idx >= 0 && idx < len {
                    samples[idx as usize] * window[j]
                } else {
                    0.0
                };
            }
            fft.process_with_scratch(&mut frame, &mut spectrum, &mut scratch)
                .expect("forward FFT buffers are sized by the planner");
            for f in 0..n_bins {
                bins[[ch, f, m]] = spectrum[f];
            }
        }
    }
    Ok(Spectrogram {
        bins,
        config: *config,
        sample_rate: signal.sample_rate(),
        signal_len: signal.len(),
    })
}

/// Inverse multichannel STFT via weighted overlap-add with the canonical
/// dual window. For spectra straight out of [`stft`] this reconstructs the
/// input to machine precision; for modified spectra it returns the real
/// signal whose STFT is closest in the least-squares sense.
pub fn istft(spec: &Spectrogram, config: &StftConfig) -> Result<TimeSignal> {
    if *config != spec.config {
        return Err(Error::invalid_config(
            "framing config does not match the one the spectrogram was built with",
        ));
    }
    let w = config.window_len;
    let h = config.hop_len;
    let synthesis = config.synthesis_window()?;
    let n_frames = spec.n_frames();
    let n_bins = spec.n_bins();
    if n_bins != config.n_bins() {
        return Err(Error::invalid_input(format!(
            "spectrogram has {} bins but config implies {}",
            n_bins,
            config.n_bins()
        )));
    }

    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(w);
    let mut spectrum = ifft.make_input_vec();
    let mut frame = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let inv_w = 1.0 / w as f64;

    let padded_len = (n_frames - 1) * h + w;
    let mut channels = Vec::with_capacity(spec.n_channels());
    for ch in 0..spec.n_channels() {
        let mut acc = vec![0.0; padded_len];
        for m in 0..n_frames {
            for f in 0..n_bins {
                spectrum[f] = spec.bins[[ch, f, m]];
            }
            // The inverse real FFT treats DC/Nyquist imaginary parts as
            // zero, i.e. modified spectra reconstruct to their closest real
            // signal.
            spectrum[0].im = 0.0;
            spectrum[n_bins - 1].im = 0.0;
            ifft.process_with_scratch(&mut spectrum, &mut frame, &mut scratch)
                .expect("inverse FFT buffers are sized by the planner");
            let offset = m * h;
            for j in 0..w {
                acc[offset + j] += frame[j] * inv_w * synthesis[j];
            }
        }
        // Drop the analysis padding: original sample u lives at u + W.
        let end = (w + spec.signal_len).min(padded_len);
        channels.push(acc[w..end].to_vec());
    }
    TimeSignal::new(channels, spec.sample_rate)
}
