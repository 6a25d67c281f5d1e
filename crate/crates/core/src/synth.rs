//! Deterministic synthetic pulse-video generation: a textured "skin" patch
//! whose masked region is color-modulated by a known pulse waveform, with
//! optional illumination drift, Gaussian noise and integer-pixel jitter.
//! Ground truth (waveform and analytic peak times) comes for free.

use crate::error::{Error, Result};
use crate::models::VideoClip;
use crate::pulse::PulseSignal;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Centered ellipse covering ~38% of the frame.
    Ellipse,
    /// Top half of the frame.
    HalfFrame,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    /// Heart rate at t = 0, bpm.
    pub hr_bpm: f64,
    /// Linear HR drift in bpm per second (0 = steady).
    pub hr_drift: f64,
    /// Fractional color modulation of the green channel; red/blue get half.
    pub amp: f64,
    pub noise_sigma: f64,
    pub illum_amp: f64,
    /// Maximum translation jitter in pixels (integer shifts).
    pub jitter_amp: f64,
    pub mask: MaskKind,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            frames: 64,
            height: 64,
            width: 64,
            fps: 30.0,
            hr_bpm: 72.0,
            hr_drift: 0.0,
            amp: 0.01,
            noise_sigma: 0.0,
            illum_amp: 0.0,
            jitter_amp: 0.0,
            mask: MaskKind::Ellipse,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("frames/height/width must be >= 1"));
        }
        if self.fps <= 0.0 {
            return Err(Error::invalid("fps must be positive"));
        }
        if !(45.0..=150.0).contains(&self.hr_bpm) {
            return Err(Error::invalid(format!(
                "hr {} bpm outside the supported [45,150] range",
                self.hr_bpm
            )));
        }
        let hr_end = self.hr_bpm + self.hr_drift * self.frames as f64 / self.fps;
        if !(45.0..=150.0).contains(&hr_end) {
            return Err(Error::invalid(format!(
                "hr drifts to {hr_end:.1} bpm, outside [45,150]"
            )));
        }
        if self.amp < 0.0 || self.noise_sigma < 0.0 || self.illum_amp < 0.0 || self.jitter_amp < 0.0
        {
            return Err(Error::invalid("amplitudes must be >= 0"));
        }
        Ok(())
    }

    /// Pulse phase in beats at time t (integral of instantaneous rate).
    fn phase(&self, t: f64) -> f64 {
        self.hr_bpm / 60.0 * t + self.hr_drift / 60.0 * t * t / 2.0
    }

    /// Time at which the phase reaches `k` beats (inverse of `phase`).
    fn beat_time(&self, k: f64) -> f64 {
        let b = self.hr_bpm / 60.0;
        let a = self.hr_drift / 120.0;
        if a.abs() < 1e-15 {
            k / b
        } else {
            // positive root of a t^2 + b t - k = 0
            (-b + (b * b + 4.0 * a * k).sqrt()) / (2.0 * a)
        }
    }
}

/// Pulse waveform over phase (in beats): fundamental, a 0.3 second
/// harmonic, and a small third-harmonic dicrotic-notch term. All cosines,
/// so the global maximum of each beat sits exactly at integer phase.
pub fn pulse_waveform(phase: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * phase;
    // the notch term is kept small so the secondary bump at half phase
    // stays well below peak-detection prominence after band-pass filtering
    w.cos() + 0.3 * (2.0 * w).cos() - 0.05 * (3.0 * w).cos()
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub clip: VideoClip,
    pub signal: PulseSignal,
    /// Analytic waveform maxima, seconds, within the clip duration.
    pub peak_times: Vec<f64>,
    /// Number of pixel values clamped into [0,1] during modulation.
    pub clamped: usize,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthClip> {
    spec.validate()?;
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // static skin-like base texture, [3,H,W]
    let base_rgb = [0.70f64, 0.55, 0.45];
    let mut base = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            base[c * h * w + i] = base_rgb[c] + rng.gen_range(-0.05..0.05);
        }
    }

    let mask: Vec<bool> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            match spec.mask {
                MaskKind::Ellipse => {
                    let dy = (y as f64 + 0.5 - h as f64 / 2.0) / (0.35 * h as f64);
                    let dx = (x as f64 + 0.5 - w as f64 / 2.0) / (0.35 * w as f64);
                    dy * dy + dx * dx <= 1.0
                }
                MaskKind::HalfFrame => y < h / 2,
            }
        })
        .collect();

    let illum_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-300)).unwrap();
    let jit = spec.jitter_amp.round() as i64;

    // channel modulation depths: green strongest, red/blue at half
    let chan_amp = [spec.amp / 2.0, spec.amp, spec.amp / 2.0];

    let mut frames = vec![0.0f32; 3 * t_len * h * w];
    let mut signal = Vec::with_capacity(t_len);
    let mut clamped = 0usize;
    for ti in 0..t_len {
        let t = ti as f64 / spec.fps;
        let p = pulse_waveform(spec.phase(t));
        signal.push(p);
        let illum = 1.0 + spec.illum_amp * (std::f64::consts::TAU * 0.08 * t + illum_phase).sin();
        let (dy, dx) = if jit > 0 {
            (rng.gen_range(-jit..=jit), rng.gen_range(-jit..=jit))
        } else {
            (0, 0)
        };
        for c in 0..3 {
            for y in 0..h {
                let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
                for x in 0..w {
                    let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                    let src = sy * w + sx;
                    let mut v = base[c * h * w + src] * illum;
                    if mask[src] {
                        v *= 1.0 + chan_amp[c] * p;
                    }
                    if spec.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    if !(0.0..=1.0).contains(&v) {
                        clamped += 1;
                        v = v.clamp(0.0, 1.0);
                    }
                    frames[((c * t_len) + ti) * h * w + y * w + x] = v as f32;
                }
            }
        }
    }

    let duration = t_len as f64 / spec.fps;
    let mut peak_times = Vec::new();
    let mut k = 0u64;
    loop {
        let t = spec.beat_time(k as f64);
        if t >= duration {
            break;
        }
        peak_times.push(t);
        k += 1;
    }

    Ok(SynthClip {
        clip: VideoClip::new(Tensor::new(vec![3, t_len, h, w], frames)?, spec.fps)?,
        signal: PulseSignal::new(signal, spec.fps)?,
        peak_times,
        clamped,
    })
}

// ── Dataset on disk ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub clips: usize,
    pub hr_min: f64,
    pub hr_max: f64,
    pub seed: u64,
    /// Fractional per-clip spread of the modulation depth: each clip draws
    /// its amplitude uniformly from `base.amp * (1 ± amp_jitter)`. Zero
    /// keeps every clip at exactly `base.amp`.
    pub amp_jitter: f64,
    /// Per-clip template; its `seed` and `hr_bpm` are overwritten per clip.
    pub base: SynthSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            clips: 10,
            hr_min: 60.0,
            hr_max: 120.0,
            seed: 0,
            amp_jitter: 0.0,
            base: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestClip {
    pub path: String,
    pub signal_path: String,
    pub peaks_path: String,
    pub hr_bpm: f64,
    /// Modulation depth actually used for this clip (differs from the base
    /// amp when the dataset draws per-clip amplitudes).
    #[serde(default)]
    pub amp: f64,
    pub seed: u64,
    pub split: String,
    pub fps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub clips: Vec<ManifestClip>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Deterministic 80/20 train/test split tag for clip `index`.
pub fn split_tag(index: usize) -> &'static str {
    if splitmix64(index as u64) % 5 == 0 {
        "test"
    } else {
        "train"
    }
}

/// Generate `spec.clips` clips with HRs drawn uniformly from the range and
/// write tensor files, signal/peak CSVs, and `manifest.json` into `dir`.
pub fn make_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    if spec.clips == 0 {
        return Err(Error::invalid("dataset needs at least 1 clip"));
    }
    if !(spec.hr_min <= spec.hr_max && spec.hr_min >= 45.0 && spec.hr_max <= 150.0) {
        return Err(Error::invalid(format!(
            "hr range [{},{}] must lie within [45,150]",
            spec.hr_min, spec.hr_max
        )));
    }
    if !(0.0..1.0).contains(&spec.amp_jitter) {
        return Err(Error::invalid("amp_jitter must be in [0,1)"));
    }
    std::fs::create_dir_all(dir)?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clips = Vec::with_capacity(spec.clips);
    for i in 0..spec.clips {
        let hr = if spec.hr_max > spec.hr_min {
            master.gen_range(spec.hr_min..spec.hr_max)
        } else {
            spec.hr_min
        };
        let clip_seed: u64 = master.gen();
        let mut cs = spec.base;
        cs.seed = clip_seed;
        cs.hr_bpm = hr;
        if spec.amp_jitter > 0.0 {
            let lo = spec.base.amp * (1.0 - spec.amp_jitter);
            let hi = spec.base.amp * (1.0 + spec.amp_jitter);
            cs.amp = master.gen_range(lo..hi);
        }
        let out = generate(&cs)?;

        let path = format!("clip_{i:03}.tensor");
        let signal_path = format!("clip_{i:03}_signal.csv");
        let peaks_path = format!("clip_{i:03}_peaks.csv");
        out.clip.frames.save(dir.join(&path))?;
        out.signal.save_csv(dir.join(&signal_path))?;
        {
            use std::io::Write as _;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&peaks_path))?);
            writeln!(f, "peak_t_s")?;
            for t in &out.peak_times {
                writeln!(f, "{t}")?;
            }
        }
        clips.push(ManifestClip {
            path,
            signal_path,
            peaks_path,
            hr_bpm: hr,
            amp: cs.amp,
            seed: clip_seed,
            split: split_tag(i).to_string(),
            fps: cs.fps,
        });
    }
    let manifest = Manifest { clips };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// One loaded dataset entry.
#[derive(Clone, Debug)]
pub struct DatasetClip {
    pub clip: VideoClip,
    pub signal: PulseSignal,
    pub peak_times: Vec<f64>,
    pub hr_bpm: f64,
    pub split: String,
}

/// Load a dataset manifest; `split` of None loads everything.
pub fn load_dataset(manifest_path: &Path, split: Option<&str>) -> Result<Vec<DatasetClip>> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.display().to_string(),
        reason: format!("bad manifest: {e}"),
    })?;
    let dir: PathBuf = manifest_path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_default();
    let mut out = Vec::new();
    for mc in &manifest.clips {
        if let Some(s) = split {
            if mc.split != s {
                continue;
            }
        }
        let frames = Tensor::load(dir.join(&mc.path))?;
        let signal = PulseSignal::load_csv(dir.join(&mc.signal_path))?;
        let peaks_text = std::fs::read_to_string(dir.join(&mc.peaks_path))?;
        let peak_times: Vec<f64> = peaks_text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim().parse().map_err(|e| Error::Format {
                    path: mc.peaks_path.clone(),
                    reason: format!("bad peak row: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        out.push(DatasetClip {
            clip: VideoClip::new(frames, mc.fps)?,
            signal,
            peak_times,
            hr_bpm: mc.hr_bpm,
            split: mc.split.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::invalid(format!(
            "no clips matched split {split:?} in {}",
            manifest_path.display()
        )));
    }
    Ok(out)
}
