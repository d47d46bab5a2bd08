//! Labelled synthetic corpus: per-class signal recipes, spectrogram
//! rendering, stratified split tags and the on-disk manifest.
//!
//! Each record's content depends only on `(master_seed, record_index)`, so
//! counts or generation order of other records never change it.

use crate::error::{ensure, Error, Result};
use crate::fsl::{split_corpus, Split, DEFAULT_FRACTIONS};
use crate::seed::{derive_seed, rng_from_seed};
use crate::siggen::{
    add_scaled, band_limited_noise, db_to_linear, gen_background, gen_jammer, BackgroundLevels, BackgroundSpec,
    Intensity, IqSnapshot, JammerKind, JammerSpec, Sweep, HARDWARE_DURATION_MS, HARDWARE_SAMPLE_RATE_HZ,
};
use crate::spectro::{read_image, snapshot_to_image, write_image, SpectrogramImage};
use crate::NUM_CLASSES;
use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Per-class sample counts of the reference recording campaign.
pub const TABLE1_COUNTS: [usize; NUM_CLASSES] = [9980, 132974, 54620, 13, 28, 59, 9, 39, 79, 10, 16];

pub const DESK_TARGET_TOTAL: usize = 2000;
pub const DESK_MIN_PER_CLASS: usize = 8;
/// Floor of the benchmark profile: enough rare-class samples for a k = 5 support plus queries.
pub const BENCH_MIN_PER_CLASS: usize = 24;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROFILE_FILE: &str = "profile.json";

/// Reference proportions scaled to exactly `target` images, with every class at least `min_per_class`.
/// Floored classes take their minimum; the rest share the remaining budget by largest remainder.
pub fn scaled_counts(target: usize, min_per_class: usize) -> [usize; NUM_CLASSES] {
    assert!(target >= min_per_class * NUM_CLASSES, "target below the class floor");
    let mut floored = [false; NUM_CLASSES];
    loop {
        let budget = target - min_per_class * floored.iter().filter(|&&f| f).count();
        let weight: usize = (0..NUM_CLASSES).filter(|&c| !floored[c]).map(|c| TABLE1_COUNTS[c]).sum();
        let share = |c: usize| TABLE1_COUNTS[c] as f64 * budget as f64 / weight as f64;
        let newly: Vec<usize> = (0..NUM_CLASSES).filter(|&c| !floored[c] && share(c) < min_per_class as f64).collect();
        if !newly.is_empty() {
            newly.into_iter().for_each(|c| floored[c] = true);
            continue;
        }
        let mut counts = [min_per_class; NUM_CLASSES];
        let mut rem = Vec::new();
        for c in (0..NUM_CLASSES).filter(|&c| !floored[c]) {
            counts[c] = share(c).floor() as usize;
            rem.push((share(c) - share(c).floor(), c));
        }
        let left = budget - (0..NUM_CLASSES).filter(|&c| !floored[c]).map(|c| counts[c]).sum::<usize>();
        rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        rem.iter().take(left).for_each(|&(_, c)| counts[c] += 1);
        return counts;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusProfile {
    pub name: String,
    pub duration_ms: f64,
    pub sample_rate_hz: f64,
    pub window_len: usize,
    pub hop: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub counts: Vec<usize>,
    pub levels: BackgroundLevels,
    /// Power of the always-present satellite band, dB relative to 1.0.
    pub satellite_db: f64,
    /// Half-width of the satellite band as a fraction of the sample rate.
    pub satellite_half_band: f64,
    pub jnr_db_min: f64,
    pub jnr_db_max: f64,
    pub fractions: [f64; 3],
}

impl CorpusProfile {
    /// 2 ms at 1 MHz, rendered to 32x32 images; about 2000 records.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            duration_ms: 2.0,
            sample_rate_hz: 1e6,
            window_len: 64,
            hop: 16,
            image_height: 32,
            image_width: 32,
            counts: scaled_counts(DESK_TARGET_TOTAL, DESK_MIN_PER_CLASS).to_vec(),
            ..Self::paper()
        }
    }

    /// Desk settings with a higher per-class floor at the same total.
    pub fn bench() -> Self {
        Self {
            name: "bench".into(),
            counts: scaled_counts(DESK_TARGET_TOTAL, BENCH_MIN_PER_CLASS).to_vec(),
            ..Self::desk()
        }
    }

    /// Capture hardware settings and the full reference counts.
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            duration_ms: HARDWARE_DURATION_MS,
            sample_rate_hz: HARDWARE_SAMPLE_RATE_HZ,
            window_len: 256,
            hop: 64,
            image_height: 128,
            image_width: 128,
            counts: TABLE1_COUNTS.to_vec(),
            levels: BackgroundLevels::default(),
            satellite_db: 0.0,
            satellite_half_band: 0.2,
            jnr_db_min: 20.0,
            jnr_db_max: 35.0,
            fractions: DEFAULT_FRACTIONS,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "bench" => Ok(Self::bench()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::invalid(format!("unknown profile {other:?}, expected desk, bench or paper"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.counts.len() == NUM_CLASSES, "need {NUM_CLASSES} class counts, got {}", self.counts.len());
        ensure!(self.counts.iter().all(|&c| c >= 1), "every class needs at least one sample");
        ensure!(self.jnr_db_min <= self.jnr_db_max, "jnr range is inverted");
        ensure!(
            self.satellite_half_band > 0.0 && self.satellite_half_band < 0.25,
            "satellite half band must lie in (0, 0.25)"
        );
        self.levels.validate()?;
        crate::siggen::sample_count(self.duration_ms, self.sample_rate_hz)?;
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Everything needed to regenerate one record's snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalParams {
    pub background: Intensity,
    #[serde(default)]
    pub jammer: Option<JammerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub file: String,
    pub label: u8,
    pub split: Split,
    pub seed: u64,
    pub jammer_params: SignalParams,
}

/// Draws the background level and jammer parameters of a class-`label`
/// record. Time constants scale with the snapshot duration and frequencies
/// with the sample rate, so every profile renders the same archetypes.
pub fn draw_params(profile: &CorpusProfile, label: u8, seed: u64) -> Result<SignalParams> {
    ensure!((label as usize) < NUM_CLASSES, "label {label} outside 0..{NUM_CLASSES}");
    let mut rng = rng_from_seed(seed);
    let fs = profile.sample_rate_hz;
    let d = profile.duration_ms;
    let levels = [Intensity::Low, Intensity::Medium, Intensity::High];
    let background = match label {
        0..=2 => levels[label as usize],
        _ => levels[rng.random_range(0..3)],
    };
    let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let jnr_db = uniform(profile.jnr_db_min, profile.jnr_db_max);
    let mut sweep = |period_lo: f64, period_hi: f64| {
        let span = uniform(0.2, 0.4) * fs;
        let dir = if uniform(0.0, 1.0) < 0.5 { 1.0 } else { -1.0 };
        Sweep { f0_hz: -dir * span, f1_hz: dir * span, period_ms: uniform(period_lo, period_hi) * d }
    };
    let kind = match label {
        0..=2 => None,
        3 => Some(JammerKind::Pulsed { duty_cycle: uniform(0.2, 0.5), pulse_period_ms: uniform(0.075, 0.15) * d }),
        4 => Some(JammerKind::Pulsed { duty_cycle: uniform(0.2, 0.5), pulse_period_ms: uniform(0.4, 0.6) * d }),
        5 => {
            let sign = if uniform(0.0, 1.0) < 0.5 { 1.0 } else { -1.0 };
            Some(JammerKind::OutOfBandTone {
                tone_freq_hz: sign * uniform(0.3, 0.45) * fs,
                passband_edge_hz: profile.satellite_half_band * fs,
            })
        }
        6 => Some(JammerKind::Noise { bandwidth_hz: uniform(0.6, 0.9) * fs }),
        7 => Some(JammerKind::Tone { tone_freq_hz: uniform(-0.15, 0.15) * fs }),
        8 => Some(JammerKind::Chirp { sweep: sweep(0.8, 1.2) }),
        9 => Some(JammerKind::TwoChirps { first: sweep(0.25, 0.35), second: sweep(0.45, 0.6) }),
        _ => Some(JammerKind::Chirp { sweep: sweep(0.05, 0.1) }),
    };
    let jammer = kind.map(|kind| JammerSpec { kind, jnr_db, seed: derive_seed(seed, 1) });
    Ok(SignalParams { background, jammer })
}

/// Unit-power satellite band of `power_db` occupying `±half_band·fs`.
pub fn gen_satellite_band(n: usize, sample_rate_hz: f64, half_band: f64, power_db: f64, seed: u64) -> Vec<Complex<f64>> {
    let mut rng = rng_from_seed(seed);
    let g = db_to_linear(power_db).sqrt();
    band_limited_noise(&mut rng, n, sample_rate_hz, 2.0 * half_band * sample_rate_hz)
        .into_iter()
        .map(|c| c * g)
        .collect()
}

/// Background noise plus satellite band plus (optionally) a jammer whose power
/// is `jnr_db` above the noise floor.
pub fn synthesize_snapshot(profile: &CorpusProfile, params: &SignalParams, seed: u64) -> Result<IqSnapshot> {
    let spec = BackgroundSpec { intensity: params.background, levels: profile.levels, seed: derive_seed(seed, 2) };
    let mut snap = gen_background(&spec, profile.duration_ms, profile.sample_rate_hz)?;
    let sat = gen_satellite_band(
        snap.len(),
        profile.sample_rate_hz,
        profile.satellite_half_band,
        profile.satellite_db,
        derive_seed(seed, 3),
    );
    for (s, c) in snap.samples.iter_mut().zip(sat) {
        *s += Complex::new(c.re as f32, c.im as f32);
    }
    if let Some(j) = &params.jammer {
        let jam = gen_jammer(j, profile.duration_ms, profile.sample_rate_hz)?;
        let g = (db_to_linear(j.jnr_db) * spec.noise_power()).sqrt();
        snap = add_scaled(&snap, &jam, g)?;
    }
    Ok(snap)
}

pub fn render_record(profile: &CorpusProfile, label: u8, seed: u64) -> Result<(SignalParams, SpectrogramImage)> {
    let params = draw_params(profile, label, seed)?;
    let snap = synthesize_snapshot(profile, &params, seed)?;
    let img = snapshot_to_image(&snap, profile.window_len, profile.hop, profile.image_height, profile.image_width)?;
    Ok((params, img.with_label(label)))
}

/// Images plus their manifest records, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub profile: CorpusProfile,
    pub records: Vec<CorpusRecord>,
    pub images: Vec<SpectrogramImage>,
}

impl LabeledCorpus {
    /// Records are laid out class by class; record `i` uses seed
    /// `derive_seed(master_seed, i)`.
    pub fn synthesize(profile: &CorpusProfile, master_seed: u64) -> Result<Self> {
        profile.validate()?;
        let mut records = Vec::with_capacity(profile.total());
        let mut images = Vec::with_capacity(profile.total());
        let mut index = 0u64;
        for (label, &count) in profile.counts.iter().enumerate() {
            for _ in 0..count {
                let seed = derive_seed(master_seed, index);
                let (params, img) = render_record(profile, label as u8, seed)?;
                records.push(CorpusRecord {
                    file: format!("{index:06}.gimg"),
                    label: label as u8,
                    split: Split::Train,
                    seed,
                    jammer_params: params,
                });
                images.push(img);
                index += 1;
            }
        }
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        let splits = split_corpus(&labels, profile.fractions, derive_seed(master_seed, u64::MAX))?;
        for (r, s) in records.iter_mut().zip(splits) {
            r.split = s;
        }
        log::info!("synthesized {} records for profile {}", records.len(), profile.name);
        Ok(Self { profile: profile.clone(), records, images })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Indices of records in `split`, in corpus order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn class_counts(&self, split: Option<Split>) -> BTreeMap<u8, usize> {
        let mut out = BTreeMap::new();
        for r in self.records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
            *out.entry(r.label).or_insert(0) += 1;
        }
        out
    }

    /// Writes images, `manifest.json` and `profile.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (r, img) in self.records.iter().zip(&self.images) {
            write_image(&dir.join(&r.file), img)?;
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&self.records)?)?;
        fs::write(dir.join(PROFILE_FILE), serde_json::to_vec_pretty(&self.profile)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_FILE);
        let records: Vec<CorpusRecord> = serde_json::from_slice(
            &fs::read(&manifest).map_err(|e| Error::Format(format!("cannot read {}: {e}", manifest.display())))?,
        )?;
        let profile_path = dir.join(PROFILE_FILE);
        let profile: CorpusProfile = serde_json::from_slice(
            &fs::read(&profile_path).map_err(|e| Error::Format(format!("cannot read {}: {e}", profile_path.display())))?,
        )?;
        let mut images = Vec::with_capacity(records.len());
        for r in &records {
            ensure!((r.label as usize) < NUM_CLASSES, "record {} has label {}", r.file, r.label);
            images.push(read_image(&dir.join(&r.file))?.with_label(r.label));
        }
        Ok(Self { profile, records, images })
    }
}
