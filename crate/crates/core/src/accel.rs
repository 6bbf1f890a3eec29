//! Acceleration preprocessing: decimation to 10 Hz, magnitude and jerk,
//! log-banded STFT spectrograms, and time/frequency masking.
//!
//! Spectrogram tensors are laid out `[segment, band, channel]` with channel
//! 0 the magnitude and channel 1 the jerk.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::Placement;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, LOG_EPS};

pub const ACCEL_RATE_HZ: f64 = 10.0;
pub const WINDOW_SAMPLES: usize = 600;
pub const SEGMENT_SAMPLES: usize = 100;
pub const N_SEGMENTS: usize = 51;
pub const N_BANDS: usize = 51;

/// Uniformly sampled 3-axis acceleration. Missing samples are stored as NaN
/// and any window touching one is rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct AccelStream {
    pub session: String,
    pub placement: Placement,
    pub rate_hz: f64,
    /// Timestamp of sample 0 in milliseconds.
    pub start_ms: i64,
    pub samples: Vec<[f64; 3]>,
}

impl AccelStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of complete one-minute frames.
    pub fn minutes(&self) -> usize {
        self.samples.len() / self.samples_per_minute()
    }

    pub fn samples_per_minute(&self) -> usize {
        (self.rate_hz * 60.0).round() as usize
    }

    fn is_present(&self, i: usize) -> bool {
        self.samples[i].iter().all(|v| v.is_finite())
    }

    pub fn span_complete(&self, start: usize, len: usize) -> bool {
        start + len <= self.samples.len() && (start..start + len).all(|i| self.is_present(i))
    }
}

/// Magnitude and jerk over a run of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MagJerkWindow {
    /// Index of the first sample in the source stream.
    pub start: usize,
    pub magnitude: Vec<f64>,
    pub jerk: Vec<f64>,
}

impl MagJerkWindow {
    pub fn len(&self) -> usize {
        self.magnitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitude.is_empty()
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn diff_norm(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Magnitude `|a[n]|` and jerk `|a[n] - a[n-1]| * fs` over
/// `len` samples from `start`. The first jerk value uses the sample before
/// the window when present, otherwise it repeats the second value.
pub fn magnitude_jerk_span(stream: &AccelStream, start: usize, len: usize) -> Result<MagJerkWindow> {
    if len < 2 {
        return Err(Error::invalid("a magnitude/jerk window needs at least two samples"));
    }
    if !stream.span_complete(start, len) {
        return Err(Error::Data(format!(
            "{}/{}: samples {start}..{} missing",
            stream.session,
            stream.placement,
            start + len
        )));
    }
    let s = &stream.samples[start..start + len];
    let fs = stream.rate_hz;
    let magnitude: Vec<f64> = s.iter().map(|&v| norm(v)).collect();
    let mut jerk = vec![0.0; len];
    for n in 1..len {
        jerk[n] = diff_norm(s[n], s[n - 1]) * fs;
    }
    jerk[0] = if start > 0 && stream.is_present(start - 1) {
        diff_norm(s[0], stream.samples[start - 1]) * fs
    } else {
        jerk[1]
    };
    Ok(MagJerkWindow { start, magnitude, jerk })
}

/// One-minute window starting at sample `start`.
pub fn magnitude_jerk(stream: &AccelStream, start: usize) -> Result<MagJerkWindow> {
    magnitude_jerk_span(stream, start, stream.samples_per_minute())
}

// ------------------------------------------------------------ decimation

/// Windowed-sinc low-pass (Hamming) followed by keeping every `factor`-th
/// sample. `cutoff` is a fraction of the output Nyquist rate. Output sample
/// `n` is centred on input sample `n * factor`; the stream edges are
/// extended by repetition. NaN inputs propagate to every output whose
/// filter support touches them.
pub fn decimate(samples: &[[f64; 3]], factor: usize, cutoff: f64) -> Vec<[f64; 3]> {
    if factor <= 1 {
        return samples.to_vec();
    }
    let half = 5 * factor;
    let fc = cutoff / (2.0 * factor as f64);
    let taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let k = i as f64 - half as f64;
            let sinc = if k == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * k).sin() / (std::f64::consts::PI * k)
            };
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (2 * half) as f64).cos();
            sinc * w
        })
        .collect();
    let gain: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / gain).collect();
    let n = samples.len();
    let last = n.saturating_sub(1) as isize;
    (0..n.div_ceil(factor))
        .map(|o| {
            let centre = (o * factor) as isize;
            let mut acc = [0.0; 3];
            for (i, t) in taps.iter().enumerate() {
                let j = (centre + i as isize - half as isize).clamp(0, last) as usize;
                for a in 0..3 {
                    acc[a] += t * samples[j][a];
                }
            }
            acc
        })
        .collect()
}

// ------------------------------------------------------------ band table

/// Partition of the one-sided DFT bins `0..=nfft/2` into bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandTable {
    /// Half-open bin ranges, contiguous and ordered.
    pub bins: Vec<(usize, usize)>,
    /// `bins.len() + 1` edges in Hz: 0, bin boundaries at half-bin
    /// positions, Nyquist.
    pub edges_hz: Vec<f64>,
    pub bin_hz: f64,
}

impl BandTable {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.bins.iter().map(|(a, b)| b - a).collect()
    }

    /// Band holding DFT bin `k`.
    pub fn band_of_bin(&self, k: usize) -> Option<usize> {
        self.bins.iter().position(|&(a, b)| (a..b).contains(&k))
    }

    /// Band holding frequency `f` (bin nearest to `f`).
    pub fn band_of_hz(&self, f: f64) -> Option<usize> {
        self.band_of_bin((f / self.bin_hz).round() as usize)
    }
}

/// Bands whose widths double, clipped below at one bin: `k` single-bin
/// bands, then `2, 4, .., 2^m`, then a last band of at least `2^m` bins
/// ending at Nyquist. The largest feasible `m` is used.
pub fn band_table(fs: f64, nfft: usize, n_bands: usize) -> Result<BandTable> {
    if nfft < 2 || n_bands == 0 {
        return Err(Error::config("band table needs nfft >= 2 and at least one band"));
    }
    let n_bins = nfft / 2 + 1;
    if n_bands > n_bins {
        return Err(Error::config(format!(
            "{n_bands} bands requested but only {n_bins} DFT bins exist"
        )));
    }
    let mut chosen = None;
    for m in 0..n_bands {
        let singles = n_bands - 1 - m;
        let doubling = (1usize << (m + 1)) - 2;
        let Some(last) = n_bins.checked_sub(singles + doubling) else {
            break;
        };
        if last >= (1usize << m) {
            chosen = Some((m, singles, last));
        }
    }
    let (m, singles, last) = chosen.ok_or_else(|| Error::config("no band layout fits the DFT bins"))?;
    let mut widths = vec![1usize; singles];
    widths.extend((1..=m).map(|i| 1usize << i));
    widths.push(last);
    let bin_hz = fs / nfft as f64;
    let nyquist = fs / 2.0;
    let mut bins = Vec::with_capacity(n_bands);
    let mut edges_hz = vec![0.0];
    let mut start = 0;
    for w in widths {
        bins.push((start, start + w));
        start += w;
        edges_hz.push(if start == n_bins {
            nyquist
        } else {
            (start as f64 - 0.5) * bin_hz
        });
    }
    debug_assert_eq!(start, n_bins);
    Ok(BandTable { bins, edges_hz, bin_hz })
}

// ----------------------------------------------------------- spectrogram

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramConfig {
    pub rate_hz: f64,
    pub segment: usize,
    pub segments: usize,
    /// DFT length; larger than `segment` zero-pads.
    pub nfft: usize,
    pub bands: usize,
    pub log_eps: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            rate_hz: ACCEL_RATE_HZ,
            segment: SEGMENT_SAMPLES,
            segments: N_SEGMENTS,
            nfft: SEGMENT_SAMPLES,
            bands: N_BANDS,
            log_eps: LOG_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccelSpectrogram {
    /// `[segments, bands, 2]` log power.
    pub values: Tensor,
    pub start: usize,
}

impl AccelSpectrogram {
    pub fn at(&self, segment: usize, band: usize, channel: usize) -> f64 {
        let s = self.values.shape();
        self.values.data()[(segment * s[1] + band) * s[2] + channel]
    }
}

/// Short-time power spectra with a periodic Hann window, one-sided density
/// scaling, summed into bands, then `ln(P + eps)`.
pub struct Spectrogrammer {
    pub config: SpectrogramConfig,
    pub table: BandTable,
    window: Vec<f64>,
    scale: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Spectrogrammer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectrogrammer").field("config", &self.config).finish()
    }
}

impl Spectrogrammer {
    pub fn new(config: SpectrogramConfig) -> Result<Self> {
        if config.segment < 2 || config.nfft < config.segment || config.segments == 0 {
            return Err(Error::config("invalid spectrogram segment layout"));
        }
        let table = band_table(config.rate_hz, config.nfft, config.bands)?;
        let n = config.segment;
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let scale = 1.0 / (config.rate_hz * window.iter().map(|w| w * w).sum::<f64>());
        let fft = FftPlanner::new().plan_fft_forward(config.nfft);
        Ok(Spectrogrammer {
            config,
            table,
            window,
            scale,
            fft,
        })
    }

    /// Hop between segments for a signal of `len` samples.
    pub fn hop_for(&self, len: usize) -> Result<usize> {
        let c = &self.config;
        if len < c.segment {
            return Err(Error::shape(format!("{len} samples shorter than one segment")));
        }
        if c.segments == 1 {
            return Ok(0);
        }
        let span = len - c.segment;
        if !span.is_multiple_of(c.segments - 1) {
            return Err(Error::shape(format!(
                "{len} samples cannot be split into {} segments of {} at a fixed hop",
                c.segments, c.segment
            )));
        }
        Ok(span / (c.segments - 1))
    }

    /// Band powers `[segments * bands]` of one channel.
    pub fn band_powers(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = &self.config;
        let hop = self.hop_for(x.len())?;
        let n_bins = c.nfft / 2 + 1;
        let mut out = Vec::with_capacity(c.segments * self.table.len());
        let mut buf = vec![Complex::new(0.0, 0.0); c.nfft];
        let mut power = vec![0.0; n_bins];
        for s in 0..c.segments {
            let seg = &x[s * hop..s * hop + c.segment];
            buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            for (b, (v, w)) in buf.iter_mut().zip(seg.iter().zip(&self.window)) {
                b.re = v * w;
            }
            self.fft.process(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                let one_sided = if k == 0 || (c.nfft.is_multiple_of(2) && k == c.nfft / 2) {
                    1.0
                } else {
                    2.0
                };
                *p = one_sided * self.scale * buf[k].norm_sqr();
            }
            for &(a, b) in &self.table.bins {
                out.push(power[a..b].iter().sum());
            }
        }
        Ok(out)
    }

    pub fn spectrogram(&self, w: &MagJerkWindow) -> Result<AccelSpectrogram> {
        let mag = self.band_powers(&w.magnitude)?;
        let jerk = self.band_powers(&w.jerk)?;
        let eps = self.config.log_eps;
        let mut data = Vec::with_capacity(mag.len() * 2);
        for (m, j) in mag.iter().zip(&jerk) {
            data.push((m + eps).ln());
            data.push((j + eps).ln());
        }
        Ok(AccelSpectrogram {
            values: Tensor::new(vec![self.config.segments, self.table.len(), 2], data)?,
            start: w.start,
        })
    }
}

/// Spectrogram with the default configuration.
pub fn spectrogram(w: &MagJerkWindow) -> Result<AccelSpectrogram> {
    Spectrogrammer::new(SpectrogramConfig::default())?.spectrogram(w)
}

// --------------------------------------------------------------- masking

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub max_stripes: usize,
    pub max_width: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            max_stripes: 2,
            max_width: 5,
        }
    }
}

/// Stripes to mask, as `(start, width)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskDraw {
    pub band_stripes: Vec<(usize, usize)>,
    pub time_stripes: Vec<(usize, usize)>,
}

fn draw_stripes<R: Rng + ?Sized>(rng: &mut R, cfg: &MaskConfig, extent: usize) -> Vec<(usize, usize)> {
    let count = rng.random_range(0..=cfg.max_stripes);
    (0..count)
        .map(|_| {
            let width = rng.random_range(0..=cfg.max_width.min(extent));
            let start = rng.random_range(0..=extent - width);
            (start, width)
        })
        .collect()
}

pub fn draw_masks<R: Rng + ?Sized>(rng: &mut R, cfg: &MaskConfig, segments: usize, bands: usize) -> MaskDraw {
    let band_stripes = draw_stripes(rng, cfg, bands);
    let time_stripes = draw_stripes(rng, cfg, segments);
    MaskDraw {
        band_stripes,
        time_stripes,
    }
}

/// Fill the drawn stripes of every channel with that channel's mean over
/// the unmasked input.
pub fn apply_masks(spec: &AccelSpectrogram, draw: &MaskDraw) -> AccelSpectrogram {
    let s = spec.values.shape().to_vec();
    let (t, b, c) = (s[0], s[1], s[2]);
    let src = spec.values.data();
    let means: Vec<f64> = (0..c)
        .map(|ch| src.iter().skip(ch).step_by(c).sum::<f64>() / (t * b) as f64)
        .collect();
    let mut out = spec.clone();
    let data = out.values.data_mut();
    let mut fill = |seg: usize, band: usize| {
        for ch in 0..c {
            data[(seg * b + band) * c + ch] = means[ch];
        }
    };
    for &(start, width) in &draw.band_stripes {
        for band in start..(start + width).min(b) {
            (0..t).for_each(|seg| fill(seg, band));
        }
    }
    for &(start, width) in &draw.time_stripes {
        for seg in start..(start + width).min(t) {
            (0..b).for_each(|band| fill(seg, band));
        }
    }
    out
}

pub fn mask_augment<R: Rng + ?Sized>(spec: &AccelSpectrogram, cfg: &MaskConfig, rng: &mut R) -> AccelSpectrogram {
    let s = spec.values.shape();
    let draw = draw_masks(rng, cfg, s[0], s[1]);
    apply_masks(spec, &draw)
}
