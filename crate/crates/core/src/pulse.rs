//! Testing-stage signal pipeline: zero-phase band-pass filtering,
//! z-normalization, peak detection with sub-sample refinement, inter-beat
//! intervals and average heart rate.

use crate::error::{Error, Result};
use num_complex::Complex64;
use std::io::{BufRead, Write};

/// 1-D waveform plus its sampling rate in Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseSignal {
    pub samples: Vec<f64>,
    pub rate: f64,
}

impl PulseSignal {
    pub fn new(samples: Vec<f64>, rate: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty signal"));
        }
        if rate <= 0.0 {
            return Err(Error::invalid("signal rate must be positive"));
        }
        Ok(PulseSignal { samples, rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.rate
    }

    /// CSV with header `t_s,value`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "t_s,value")?;
        for (i, v) in self.samples.iter().enumerate() {
            writeln!(w, "{},{}", i as f64 / self.rate, v)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)
    }

    pub fn read_csv(r: &mut impl BufRead, path: &str) -> Result<Self> {
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            if ln == 0 {
                continue; // header
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ',');
            let t: f64 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format {
                    path: path.into(),
                    reason: format!("bad row {}", ln + 1),
                })?;
            let v: f64 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format {
                    path: path.into(),
                    reason: format!("bad row {}", ln + 1),
                })?;
            times.push(t);
            values.push(v);
        }
        if values.len() < 2 {
            return Err(Error::Format {
                path: path.into(),
                reason: "signal CSV needs at least 2 samples".into(),
            });
        }
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        if dt <= 0.0 {
            return Err(Error::Format {
                path: path.into(),
                reason: "non-increasing timestamps".into(),
            });
        }
        PulseSignal::new(values, 1.0 / dt)
    }

    pub fn load_csv(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let p = path.as_ref();
        let mut f = std::io::BufReader::new(std::fs::File::open(p)?);
        Self::read_csv(&mut f, &p.display().to_string())
    }
}

/// Band-pass specification: cutoffs in Hz, Butterworth prototype order.
#[derive(Clone, Copy, Debug)]
pub struct FilterSpec {
    pub low: f64,
    pub high: f64,
    pub order: usize,
}

impl FilterSpec {
    /// Standard rPPG band, 42-210 bpm.
    pub fn rppg() -> Self {
        FilterSpec {
            low: 0.7,
            high: 3.5,
            order: 4,
        }
    }

    /// Wider band for sharp ECG R-peaks (test-time ground truth).
    pub fn ecg() -> Self {
        FilterSpec {
            low: 0.7,
            high: 40.0,
            order: 4,
        }
    }

    pub fn validate(&self, rate: f64) -> Result<()> {
        if !(self.low > 0.0 && self.low < self.high) {
            return Err(Error::invalid(format!(
                "need 0 < low < high, got {}..{}",
                self.low, self.high
            )));
        }
        if self.high >= rate / 2.0 {
            return Err(Error::invalid(format!(
                "high cutoff {} Hz at or above Nyquist ({} Hz)",
                self.high,
                rate / 2.0
            )));
        }
        if self.order == 0 {
            return Err(Error::invalid("filter order must be >= 1"));
        }
        Ok(())
    }
}

// ── Butterworth band-pass as second-order sections ────────────────────

#[derive(Clone, Copy, Debug)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2], // a0 normalized to 1
}

impl Biquad {
    fn response(&self, z: Complex64) -> Complex64 {
        let z1 = z.inv();
        let z2 = z1 * z1;
        let num = Complex64::new(self.b[0], 0.0)
            + Complex64::new(self.b[1], 0.0) * z1
            + Complex64::new(self.b[2], 0.0) * z2;
        let den = Complex64::new(1.0, 0.0)
            + Complex64::new(self.a[0], 0.0) * z1
            + Complex64::new(self.a[1], 0.0) * z2;
        num / den
    }
}

/// Digital Butterworth band-pass via the bilinear transform, returned as a
/// cascade of `order` biquad sections.
pub fn butter_bandpass(spec: &FilterSpec, rate: f64) -> Result<Vec<Biquad>> {
    spec.validate(rate)?;
    let n = spec.order;
    let fs2 = 2.0 * rate;
    // prewarped analog band edges
    let w1 = fs2 * (std::f64::consts::PI * spec.low / rate).tan();
    let w2 = fs2 * (std::f64::consts::PI * spec.high / rate).tan();
    let w0sq = w1 * w2;
    let bw = w2 - w1;

    // analog band-pass poles from the unit-cutoff low-pass prototype
    let mut analog_poles = Vec::with_capacity(2 * n);
    for k in 1..=n {
        let theta = std::f64::consts::PI * (2 * k + n - 1) as f64 / (2 * n) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let pb = proto * bw;
        let disc = (pb * pb - Complex64::new(4.0 * w0sq, 0.0)).sqrt();
        analog_poles.push((pb + disc) / 2.0);
        analog_poles.push((pb - disc) / 2.0);
    }

    // bilinear transform; zeros land at z = +1 (n of them) and z = -1 (n)
    let digital_poles: Vec<Complex64> = analog_poles
        .iter()
        .map(|&s| (Complex64::new(fs2, 0.0) + s) / (Complex64::new(fs2, 0.0) - s))
        .collect();

    // group into conjugate pairs
    let tol = 1e-10;
    let mut complex_poles: Vec<Complex64> = digital_poles
        .iter()
        .copied()
        .filter(|p| p.im > tol)
        .collect();
    complex_poles.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
    let mut real_poles: Vec<f64> = digital_poles
        .iter()
        .copied()
        .filter(|p| p.im.abs() <= tol)
        .map(|p| p.re)
        .collect();
    real_poles.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut sections = Vec::with_capacity(n);
    for p in &complex_poles {
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0], // one zero at +1, one at -1
            a: [-2.0 * p.re, p.norm_sqr()],
        });
    }
    for pair in real_poles.chunks(2) {
        let (p1, p2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [-(p1 + p2), p1 * p2],
        });
    }

    // normalize to unit gain at the geometric band center
    let f0 = (spec.low * spec.high).sqrt();
    let z0 = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * f0 / rate);
    let gain: f64 = sections.iter().map(|s| s.response(z0).norm()).product();
    if gain <= 0.0 || !gain.is_finite() {
        return Err(Error::invalid("degenerate filter design"));
    }
    let k = 1.0 / gain;
    sections[0].b.iter_mut().for_each(|c| *c *= k);
    Ok(sections)
}

/// Steady-state transposed-direct-form-II state for a unit step input, so
/// filtering starts without a startup transient (scaled by the first sample).
fn biquad_zi(s: &Biquad) -> [f64; 2] {
    let y = (s.b[0] + s.b[1] + s.b[2]) / (1.0 + s.a[0] + s.a[1]);
    let z1 = s.b[2] - s.a[1] * y;
    let z0 = s.b[1] + s.b[2] - (s.a[0] + s.a[1]) * y;
    [z0, z1]
}

fn sosfilt_section(s: &Biquad, x: &[f64], zi: [f64; 2]) -> Vec<f64> {
    let mut z0 = zi[0];
    let mut z1 = zi[1];
    let mut out = Vec::with_capacity(x.len());
    for &xv in x {
        let y = s.b[0] * xv + z0;
        z0 = s.b[1] * xv - s.a[0] * y + z1;
        z1 = s.b[2] * xv - s.a[1] * y;
        out.push(y);
    }
    out
}

fn sosfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in sections {
        let zi = biquad_zi(s);
        let x0 = y[0];
        y = sosfilt_section(s, &y, [zi[0] * x0, zi[1] * x0]);
    }
    y
}

/// Forward-backward (zero-phase) cascade filter with odd-reflection padding.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let padlen = (3 * (2 * sections.len() + 1)).min(n - 1);
    if padlen == 0 {
        return Err(Error::invalid("signal too short to filter"));
    }
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    for i in (1..=padlen).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in (n - padlen - 1..n - 1).rev() {
        ext.push(2.0 * x[n - 1] - x[i]);
    }
    let mut y = sosfilt(sections, &ext);
    y.reverse();
    let mut y = sosfilt(sections, &y);
    y.reverse();
    Ok(y[padlen..padlen + n].to_vec())
}

/// Zero-phase band-pass. Output length equals input length.
pub fn bandpass(signal: &PulseSignal, spec: &FilterSpec) -> Result<PulseSignal> {
    spec.validate(signal.rate)?;
    if signal.len() <= 3 * spec.order {
        return Err(Error::invalid(format!(
            "signal of {} samples too short for order-{} filtering",
            signal.len(),
            spec.order
        )));
    }
    let sos = butter_bandpass(spec, signal.rate)?;
    let y = filtfilt(&sos, &signal.samples)?;
    PulseSignal::new(y, signal.rate)
}

/// Shift to zero mean, scale to unit standard deviation (population).
pub fn znormalize(signal: &PulseSignal) -> Result<PulseSignal> {
    let n = signal.len() as f64;
    let mean = signal.samples.iter().sum::<f64>() / n;
    let var = signal
        .samples
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    if var < 1e-24 {
        return Err(Error::DegenerateSignal(
            "constant signal cannot be z-normalized".into(),
        ));
    }
    let sd = var.sqrt();
    PulseSignal::new(
        signal.samples.iter().map(|v| (v - mean) / sd).collect(),
        signal.rate,
    )
}

// ── Peak detection and inter-beat intervals ───────────────────────────

/// Minimum peak separation in seconds (240 bpm ceiling).
const MIN_PEAK_SEPARATION_S: f64 = 0.25;
/// Minimum prominence in z-normalized units.
const MIN_PROMINENCE: f64 = 0.3;
/// Physiological plausibility window for intervals, in ms.
const IBI_MIN_MS: f64 = 250.0;
const IBI_MAX_MS: f64 = 2000.0;

/// Ordered inter-beat intervals with their absolute peak timestamps.
#[derive(Clone, Debug)]
pub struct IbiSeries {
    /// Strictly increasing peak timestamps in seconds.
    pub peak_times: Vec<f64>,
    /// Successive differences in milliseconds.
    pub intervals: Vec<f64>,
}

impl IbiSeries {
    pub fn from_peak_times(peak_times: Vec<f64>) -> Result<Self> {
        if peak_times.len() < 2 {
            return Err(Error::DegenerateSignal(
                "need at least 2 peaks for an interval series".into(),
            ));
        }
        let intervals: Vec<f64> = peak_times
            .windows(2)
            .map(|w| (w[1] - w[0]) * 1000.0)
            .collect();
        if intervals.iter().any(|&d| d <= 0.0) {
            return Err(Error::invalid("peak times must be strictly increasing"));
        }
        Ok(IbiSeries {
            peak_times,
            intervals,
        })
    }

    pub fn span(&self) -> f64 {
        self.peak_times[self.peak_times.len() - 1] - self.peak_times[0]
    }

    /// CSV with header `peak_t_s,ibi_ms`: one row per interval, stamped with
    /// the leading peak time.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "peak_t_s,ibi_ms")?;
        for (t, d) in self.peak_times.iter().zip(&self.intervals) {
            writeln!(w, "{t},{d}")?;
        }
        Ok(())
    }
}

fn prominence(s: &[f64], peak: usize) -> f64 {
    let h = s[peak];
    let mut left_min = h;
    let mut i = peak;
    while i > 0 {
        i -= 1;
        if s[i] > h {
            break;
        }
        left_min = left_min.min(s[i]);
    }
    let mut right_min = h;
    let mut i = peak;
    while i + 1 < s.len() {
        i += 1;
        if s[i] > h {
            break;
        }
        right_min = right_min.min(s[i]);
    }
    h - left_min.max(right_min)
}

/// Local maxima with minimum separation and prominence thresholds, refined
/// to sub-sample timestamps by parabolic interpolation, then cleaned to the
/// physiological interval window.
pub fn detect_peaks(signal: &PulseSignal) -> Result<IbiSeries> {
    if signal.duration() < 2.0 {
        return Err(Error::invalid(format!(
            "signal of {:.2} s too short for peak detection (need >= 2 s)",
            signal.duration()
        )));
    }
    // prominence threshold is defined in normalized units; normalizing here
    // makes detection invariant to positive scaling of the input
    let z = znormalize(signal)?;
    let s = &z.samples;
    let n = s.len();

    let mut candidates: Vec<usize> = Vec::new();
    for i in 1..n - 1 {
        if s[i] > s[i - 1] && s[i] >= s[i + 1] {
            candidates.push(i);
        }
    }
    let mut scored: Vec<(usize, f64)> = candidates
        .into_iter()
        .filter_map(|i| {
            let p = prominence(s, i);
            (p >= MIN_PROMINENCE).then_some((i, p))
        })
        .collect();
    if scored.is_empty() {
        return Err(Error::DegenerateSignal("no peaks found".into()));
    }

    // enforce minimum separation, keeping taller peaks first
    let min_dist = (MIN_PEAK_SEPARATION_S * signal.rate).round() as usize;
    scored.sort_by(|a, b| s[b.0].partial_cmp(&s[a.0]).unwrap());
    let mut kept: Vec<usize> = Vec::new();
    for (i, _) in &scored {
        if kept.iter().all(|&j| i.abs_diff(j) >= min_dist) {
            kept.push(*i);
        }
    }
    kept.sort_unstable();

    // parabolic sub-sample refinement over the 3 samples around each maximum
    let mut times: Vec<f64> = kept
        .iter()
        .map(|&i| {
            let mut t = i as f64;
            if i > 0 && i + 1 < n {
                let denom = s[i - 1] - 2.0 * s[i] + s[i + 1];
                if denom.abs() > 1e-12 {
                    let dt = 0.5 * (s[i - 1] - s[i + 1]) / denom;
                    if dt.abs() <= 0.5 {
                        t += dt;
                    }
                }
            }
            t / signal.rate
        })
        .collect();

    // drop the lower peak of any pair closer than the minimum interval
    loop {
        let mut removed = false;
        for k in 1..times.len() {
            if (times[k] - times[k - 1]) * 1000.0 < IBI_MIN_MS {
                let drop = if s[kept[k]] < s[kept[k - 1]] { k } else { k - 1 };
                times.remove(drop);
                kept.remove(drop);
                removed = true;
                break;
            }
        }
        if !removed {
            break;
        }
    }

    // keep the longest contiguous run without over-long gaps
    let mut best: (usize, usize) = (0, 0); // [start, end)
    let mut start = 0;
    for k in 1..=times.len() {
        let broken = k == times.len() || (times[k] - times[k - 1]) * 1000.0 > IBI_MAX_MS;
        if broken {
            if k - start > best.1 - best.0 {
                best = (start, k);
            }
            start = k;
        }
    }
    let times: Vec<f64> = times[best.0..best.1].to_vec();
    if times.len() < 2 {
        return Err(Error::DegenerateSignal(
            "fewer than 2 plausible peaks after cleaning".into(),
        ));
    }
    IbiSeries::from_peak_times(times)
}

/// Average heart rate in bpm: 60000 / mean interval (ms).
pub fn average_hr(ibi: &IbiSeries) -> Result<f64> {
    if ibi.intervals.is_empty() {
        return Err(Error::DegenerateSignal("empty interval series".into()));
    }
    let mean = ibi.intervals.iter().sum::<f64>() / ibi.intervals.len() as f64;
    Ok(60_000.0 / mean)
}
