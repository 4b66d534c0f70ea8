//! Deterministic synthetic scene corpus. A corpus has one pool of sound
//! events (tone clusters and band-passed noises) shared by all classes.
//! A class is a probability distribution over those events, a fixed
//! equaliser coloration and a stereo placement; each clip draws its own
//! event sequence, amplitudes, phases, gain and small detuning.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use scenekit::audio::{encode_wav, AudioClip};
use scenekit::gmm::derive_seed;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub clips_per_class: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            clips_per_class: 20,
            seconds: 5.0,
            sample_rate: 22_050,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.classes == 0 || self.clips_per_class == 0 {
            return Err(CliError::Config("synth needs at least one class and one clip".into()));
        }
        if !(self.seconds > 0.0 && self.seconds <= 600.0) {
            return Err(CliError::Config("synth clip length must be in (0, 600] seconds".into()));
        }
        if self.sample_rate < 8_000 {
            return Err(CliError::Config("synth sample rate must be >= 8000 Hz".into()));
        }
        Ok(())
    }
}

const TONE_EVENTS: usize = 4;
const NOISE_EVENTS: usize = 4;
const EVENTS: usize = TONE_EVENTS + NOISE_EVENTS;

/// Sound events shared by every class of a corpus.
#[derive(Debug, Clone)]
struct EventPool {
    /// Two-partial tone clusters `(f0, ratio)`.
    tones: Vec<(f64, f64)>,
    /// Band-passed noises `(center, q)`.
    noises: Vec<(f64, f64)>,
}

/// A class is an event distribution plus a fixed spectral coloration.
#[derive(Debug, Clone)]
struct ClassTexture {
    event_probs: Vec<f64>,
    eq_center: f64,
    eq_gain_db: f64,
    eq_q: f64,
    pan: f64,
    delay: usize,
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn top_frequency(sr: u32) -> f64 {
    (f64::from(sr) * 0.4).min(6000.0)
}

fn event_pool(seed: u64, sr: u32) -> EventPool {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let top = top_frequency(sr);
    EventPool {
        tones: (0..TONE_EVENTS)
            .map(|_| (log_uniform(&mut rng, 120.0, top / 2.0), rng.random_range(1.2..2.0)))
            .collect(),
        noises: (0..NOISE_EVENTS)
            .map(|_| (log_uniform(&mut rng, 250.0, top), rng.random_range(0.7..3.0)))
            .collect(),
    }
}

fn texture(seed: u64, class: usize, sr: u32) -> ClassTexture {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
    // Squaring concentrates each class on a few events; the floor keeps
    // every event possible in every class.
    let raw: Vec<f64> = (0..EVENTS).map(|_| 0.05 + rng.random::<f64>().powi(2)).collect();
    let total: f64 = raw.iter().sum();
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    ClassTexture {
        event_probs: raw.iter().map(|w| w / total).collect(),
        eq_center: log_uniform(&mut rng, 300.0, top_frequency(sr)),
        eq_gain_db: sign * rng.random_range(4.0..9.0),
        eq_q: rng.random_range(0.7..2.0),
        pan: rng.random_range(-0.6..0.6),
        delay: rng.random_range(0..24),
    }
}

/// Direct-form I biquad.
fn biquad(x: &[f64], b: [f64; 3], a: [f64; 3]) -> Vec<f64> {
    let (b0, b1, b2) = (b[0] / a[0], b[1] / a[0], b[2] / a[0]);
    let (a1, a2) = (a[1] / a[0], a[2] / a[0]);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

/// Band-pass with 0 dB peak gain.
fn bandpass(x: &[f64], center: f64, q: f64, sr: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * center / sr;
    let alpha = w0.sin() / (2.0 * q);
    biquad(x, [alpha, 0.0, -alpha], [1.0 + alpha, -2.0 * w0.cos(), 1.0 - alpha])
}

/// Peaking equaliser with `gain_db` at `center`.
fn peaking(x: &[f64], center: f64, gain_db: f64, q: f64, sr: f64) -> Vec<f64> {
    let a = 10f64.powf(gain_db / 40.0);
    let w0 = 2.0 * PI * center / sr;
    let alpha = w0.sin() / (2.0 * q);
    let c = -2.0 * w0.cos();
    biquad(x, [1.0 + alpha * a, c, 1.0 - alpha * a], [1.0 + alpha / a, c, 1.0 - alpha / a])
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One stereo clip of `class`: a random sequence of short events drawn from
/// the class's event distribution, coloured by the class equaliser.
pub fn synth_clip(spec: &SynthSpec, class: usize, index: usize) -> AudioClip {
    let sr = f64::from(spec.sample_rate);
    let pool = event_pool(spec.seed, spec.sample_rate);
    let tex = texture(spec.seed, class, spec.sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, ((class as u64) << 32) | index as u64 | 1 << 63));
    let n = (spec.seconds * sr).round() as usize;
    let detune = 1.0 + rng.random_range(-0.02..0.02);
    let fade = (0.005 * sr) as usize;

    let noises: Vec<Vec<f64>> = pool
        .noises
        .iter()
        .map(|&(center, q)| {
            let white: Vec<f64> = (0..n).map(|_| gaussian(&mut rng)).collect();
            bandpass(&white, center * detune, q, sr)
        })
        .collect();
    let mut mono = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let len = ((rng.random_range(0.1..0.6) * sr) as usize).min(n - start);
        let event = draw(&mut rng, &tex.event_probs);
        let amp = (0.3 * gaussian(&mut rng)).exp();
        let phase = rng.random_range(0.0..2.0 * PI);
        for i in 0..len {
            let t = start + i;
            let env = amp * (i.min(len - 1 - i) as f64 / fade as f64).min(1.0);
            mono[t] = env
                * if event < TONE_EVENTS {
                    let (f0, ratio) = pool.tones[event];
                    let w = 2.0 * PI * f0 * detune * t as f64 / sr + phase;
                    0.7 * w.sin() + 0.3 * (ratio * w).sin()
                } else {
                    2.0 * noises[event - TONE_EVENTS][t]
                };
        }
        start += len;
    }
    let mono = peaking(&mono, tex.eq_center, tex.eq_gain_db, tex.eq_q, sr);
    let floor: Vec<f64> = (0..n + tex.delay).map(|_| 0.003 * gaussian(&mut rng)).collect();

    let peak = mono.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let gain = 0.8 * 10f64.powf(rng.random_range(-6.0..0.0) / 20.0) / peak;
    let (gl, gr) = ((1.0 - tex.pan) / 2.0, (1.0 + tex.pan) / 2.0);
    let left: Vec<f64> = (0..n).map(|t| (gain * gl * mono[t] + floor[t]).clamp(-1.0, 1.0)).collect();
    let right: Vec<f64> = (0..n)
        .map(|t| {
            let s = if t >= tex.delay { mono[t - tex.delay] } else { 0.0 };
            (gain * gr * s + floor[t + tex.delay]).clamp(-1.0, 1.0)
        })
        .collect();
    AudioClip::new(vec![left, right], spec.sample_rate).expect("synthetic samples are bounded")
}

pub fn class_name(class: usize) -> String {
    format!("scene{class:02}")
}

/// Writes `audio/<class>_<index>.wav` files and `manifest.tsv` under `out`.
/// Returns the manifest text.
pub fn write_corpus(spec: &SynthSpec, out: &Path) -> Result<String, CliError> {
    spec.validate()?;
    let audio = out.join("audio");
    std::fs::create_dir_all(&audio).map_err(|e| CliError::io(&audio, e))?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes)
        .flat_map(|c| (0..spec.clips_per_class).map(move |i| (c, i)))
        .collect();
    let lines = jobs
        .par_iter()
        .map(|&(c, i)| {
            let rel = format!("audio/{}_{i:03}.wav", class_name(c));
            let bytes = encode_wav(&synth_clip(spec, c, i), 16).map_err(|e| CliError::Data(e.to_string()))?;
            write_atomic(&out.join(&rel), &bytes)?;
            Ok(format!("{rel}\t{}\n", class_name(c)))
        })
        .collect::<Result<Vec<String>, CliError>>()?;
    let manifest: String = lines.concat();
    write_atomic(&out.join("manifest.tsv"), manifest.as_bytes())?;
    Ok(manifest)
}
