//! Log-magnitude spectrograms and their 8-bit image encoding.
//!
//! Magnitudes are normalized to the per-snapshot peak, so the display range
//! is always [-90, 0] dB and maps linearly onto pixel values [0, 255].

use crate::error::{ensure, Error, Result};
use crate::siggen::IqSnapshot;
use num_complex::Complex;
use rustfft::FftPlanner;
use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

pub const DB_FLOOR: f64 = -90.0;
pub const IMAGE_MAGIC: &[u8; 8] = b"GNSSIMG1";

/// Frequency-major dB grid: `grid[f * n_frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramDb {
    pub grid: Vec<f64>,
    pub n_freq: usize,
    pub n_frames: usize,
    pub freq_axis_hz: Vec<f64>,
    pub time_axis_ms: Vec<f64>,
}

impl SpectrogramDb {
    pub fn at(&self, freq: usize, frame: usize) -> f64 {
        self.grid[freq * self.n_frames + frame]
    }
}

/// Row-major 8-bit image, rows are frequency bins and columns are frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpectrogramImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub label: Option<u8>,
}

impl SpectrogramImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "image dims must be positive, got {height}x{width}");
        ensure!(
            pixels.len() == height * width,
            "pixel count {} does not match {height}x{width}",
            pixels.len()
        );
        Ok(Self { height, width, pixels, label: None })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

pub fn frame_count(n: usize, window_len: usize, hop: usize) -> usize {
    (n - window_len) / hop + 1
}

fn hann(len: usize) -> Vec<f64> {
    // Periodic Hann, the usual STFT choice.
    (0..len).map(|i| 0.5 - 0.5 * (TAU * i as f64 / len as f64).cos()).collect()
}

/// Hann-windowed STFT, fft-shifted so row 0 is the most negative frequency,
/// converted to dB relative to the global peak and clamped at -90 dB.
pub fn stft_magnitude(snapshot: &IqSnapshot, window_len: usize, hop: usize) -> Result<SpectrogramDb> {
    let n = snapshot.len();
    ensure!(hop > 0, "hop must be positive");
    ensure!(hop <= window_len, "hop {hop} exceeds window {window_len}");
    ensure!(window_len <= n, "window {window_len} exceeds snapshot length {n}");
    let n_frames = frame_count(n, window_len, hop);
    let window = hann(window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let half = window_len / 2;

    let mut mags = vec![0.0f64; window_len * n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = snapshot.samples[start + i];
            *b = Complex::new(s.re as f64, s.im as f64) * window[i];
        }
        fft.process(&mut buf);
        for (k, c) in buf.iter().enumerate() {
            let row = (k + half) % window_len;
            mags[row * n_frames + t] = c.norm();
        }
    }

    let peak = mags.iter().cloned().fold(0.0, f64::max);
    let grid = mags
        .iter()
        .map(|&m| {
            if peak == 0.0 || m == 0.0 {
                DB_FLOOR
            } else {
                (20.0 * (m / peak).log10()).max(DB_FLOOR)
            }
        })
        .collect();

    let fs = snapshot.sample_rate_hz;
    let freq_axis_hz = (0..window_len)
        .map(|row| (row as f64 - half as f64) * fs / window_len as f64)
        .collect();
    let time_axis_ms = (0..n_frames)
        .map(|t| (t * hop) as f64 * 1e3 / fs)
        .collect();
    Ok(SpectrogramDb { grid, n_freq: window_len, n_frames, freq_axis_hz, time_axis_ms })
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

pub fn quantize_value(v: f64) -> Result<u8> {
    if !(DB_FLOOR..=0.0).contains(&v) {
        return Err(Error::Contract(format!("dB value {v} outside [-90, 0]")));
    }
    Ok(round_half_up(255.0 * (v - DB_FLOOR) / -DB_FLOOR) as u8)
}

pub fn dequantize_value(p: u8) -> f64 {
    p as f64 * -DB_FLOOR / 255.0 + DB_FLOOR
}

pub fn quantize(db: &SpectrogramDb) -> Result<SpectrogramImage> {
    let pixels = db.grid.iter().map(|&v| quantize_value(v)).collect::<Result<Vec<_>>>()?;
    SpectrogramImage::new(db.n_freq, db.n_frames, pixels)
}

/// Bilinear resampling with half-pixel centres; the label is carried over.
pub fn resize(image: &SpectrogramImage, h_out: usize, w_out: usize) -> Result<SpectrogramImage> {
    ensure!(h_out > 0 && w_out > 0, "target dims must be positive, got {h_out}x{w_out}");
    if h_out == image.height && w_out == image.width {
        return Ok(image.clone());
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = axis(image.height, h_out);
    let cols = axis(image.width, w_out);
    let mut pixels = Vec::with_capacity(h_out * w_out);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let p = |r, c| image.get(r, c) as f64;
            let top = p(r0, c0) * (1.0 - fc) + p(r0, c1) * fc;
            let bottom = p(r1, c0) * (1.0 - fc) + p(r1, c1) * fc;
            let v = top * (1.0 - fr) + bottom * fr;
            pixels.push(round_half_up(v).clamp(0.0, 255.0) as u8);
        }
    }
    Ok(SpectrogramImage { height: h_out, width: w_out, pixels, label: image.label })
}

/// STFT, quantization and resize in one step.
pub fn snapshot_to_image(
    snapshot: &IqSnapshot,
    window_len: usize,
    hop: usize,
    h_out: usize,
    w_out: usize,
) -> Result<SpectrogramImage> {
    let db = stft_magnitude(snapshot, window_len, hop)?;
    resize(&quantize(&db)?, h_out, w_out)
}

pub fn encode_image<W: Write>(image: &SpectrogramImage, mut w: W) -> Result<()> {
    let h = u32::try_from(image.height).map_err(|_| Error::invalid("image height exceeds u32"))?;
    let wd = u32::try_from(image.width).map_err(|_| Error::invalid("image width exceeds u32"))?;
    w.write_all(IMAGE_MAGIC)?;
    w.write_all(&h.to_le_bytes())?;
    w.write_all(&wd.to_le_bytes())?;
    w.write_all(&image.pixels)?;
    Ok(())
}

pub fn decode_image<R: Read>(mut r: R) -> Result<SpectrogramImage> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != IMAGE_MAGIC {
        return Err(Error::Format("missing GNSSIMG1 magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let h = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let w = u32::from_le_bytes(word) as usize;
    if h == 0 || w == 0 {
        return Err(Error::Format(format!("zero image dimension {h}x{w}")));
    }
    let mut pixels = vec![0u8; h * w];
    r.read_exact(&mut pixels)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after pixels", rest.len())));
    }
    SpectrogramImage::new(h, w, pixels)
}

pub fn write_image(path: &Path, image: &SpectrogramImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + image.pixels.len());
    encode_image(image, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<SpectrogramImage> {
    decode_image(std::io::Cursor::new(std::fs::read(path)?))
}

/// Comma-separated pixel grid, one image row per line.
pub fn image_to_csv(image: &SpectrogramImage) -> String {
    let mut out = String::new();
    for r in 0..image.height {
        let row: Vec<String> = (0..image.width).map(|c| image.get(r, c).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siggen::{gen_jammer, JammerKind, JammerSpec, Sample};
    use proptest::prelude::*;

    fn snapshot(samples: Vec<Sample>) -> IqSnapshot {
        let n = samples.len();
        IqSnapshot { samples, sample_rate_hz: 1e6, duration_ms: n as f64 / 1e3 }
    }

    #[test]
    fn zero_snapshot_is_all_floor() {
        let db = stft_magnitude(&snapshot(vec![Sample::new(0.0, 0.0); 512]), 128, 32).unwrap();
        assert!(db.grid.iter().all(|&v| v == DB_FLOOR));
    }

    #[test]
    fn tone_argmax_row_every_frame() {
        let f0 = 1.25e5;
        let spec = JammerSpec { kind: JammerKind::Tone { tone_freq_hz: f0 }, jnr_db: 0.0, seed: 1 };
        let snap = gen_jammer(&spec, 2.0, 1e6).unwrap();
        let db = stft_magnitude(&snap, 256, 64).unwrap();
        let df = 1e6 / 256.0;
        let expected = (f0 / df).round() as usize + 128;
        for t in 0..db.n_frames {
            let best = (0..db.n_freq).max_by(|&a, &b| db.at(a, t).total_cmp(&db.at(b, t))).unwrap();
            assert_eq!(best, expected, "frame {t}");
        }
        assert_eq!(db.freq_axis_hz[expected], expected as f64 * df - 5e5);
    }

    #[test]
    fn global_max_is_zero_db() {
        let spec = JammerSpec { kind: JammerKind::Noise { bandwidth_hz: 3e5 }, jnr_db: 0.0, seed: 4 };
        let snap = gen_jammer(&spec, 2.0, 1e6).unwrap();
        let db = stft_magnitude(&snap, 64, 16).unwrap();
        let max = db.grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max, 0.0);
        assert!(db.grid.iter().all(|&v| (DB_FLOOR..=0.0).contains(&v)));
    }

    #[test]
    fn stft_argument_errors() {
        let s = snapshot(vec![Sample::new(1.0, 0.0); 100]);
        assert!(stft_magnitude(&s, 64, 0).is_err());
        assert!(stft_magnitude(&s, 64, 65).is_err());
        assert!(stft_magnitude(&s, 128, 32).is_err());
    }

    #[test]
    fn quantize_endpoints() {
        assert_eq!(quantize_value(-90.0).unwrap(), 0);
        assert_eq!(quantize_value(0.0).unwrap(), 255);
        assert_eq!(quantize_value(-45.0).unwrap(), 128);
        assert!(quantize_value(0.5).is_err());
        assert!(quantize_value(-90.01).is_err());
    }

    #[test]
    fn resize_cases() {
        let img = SpectrogramImage::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(resize(&img, 2, 3).unwrap(), img);
        let flat = SpectrogramImage::filled(7, 5, 127).unwrap();
        let out = resize(&flat, 13, 3).unwrap();
        assert!(out.pixels.iter().all(|&p| p == 127));
        let checker = SpectrogramImage::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        assert_eq!(resize(&checker, 1, 1).unwrap().pixels, vec![128]);
        assert!(resize(&img, 0, 4).is_err());
    }

    #[test]
    fn image_file_layout_is_exact() {
        let img = SpectrogramImage::new(2, 3, vec![9, 8, 7, 6, 5, 4]).unwrap();
        let mut bytes = Vec::new();
        encode_image(&img, &mut bytes).unwrap();
        let mut expected = b"GNSSIMG1".to_vec();
        expected.extend_from_slice(&[2, 0, 0, 0, 3, 0, 0, 0, 9, 8, 7, 6, 5, 4]);
        assert_eq!(bytes, expected);
        assert_eq!(decode_image(&bytes[..]).unwrap(), img);
        assert!(decode_image(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_image(&bad[..]).is_err());
    }

    proptest! {
        #[test]
        fn frame_count_formula(n in 16usize..600, w in 1usize..16, h in 1usize..16) {
            let window = w.min(n);
            let hop = h.min(window);
            let s = snapshot(vec![Sample::new(0.3, -0.1); n]);
            let db = stft_magnitude(&s, window, hop).unwrap();
            prop_assert_eq!(db.n_frames, (n - window) / hop + 1);
            prop_assert_eq!(db.time_axis_ms.len(), db.n_frames);
        }

        #[test]
        fn quantize_is_monotone(a in -90.0f64..=0.0, b in -90.0f64..=0.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_value(lo).unwrap() <= quantize_value(hi).unwrap());
        }

        #[test]
        fn quantize_round_trip_error(v in -90.0f64..=0.0) {
            let back = dequantize_value(quantize_value(v).unwrap());
            prop_assert!((back - v).abs() <= 90.0 / 255.0 / 2.0 + 1e-12);
        }
    }
}
