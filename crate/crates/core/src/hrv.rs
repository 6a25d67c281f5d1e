//! Frequency-domain HRV features from an inter-beat interval series:
//! LF/HF in normalized units, their ratio, and the respiratory frequency.
//!
//! The IBI tachogram is resampled to a uniform 4 Hz grid and analyzed with
//! a Hann-windowed Welch periodogram. (A Lomb-Scargle estimator could be
//! dropped in here instead; at these IBI densities the interpolation error
//! is negligible.)

use crate::error::{Error, Result};
use crate::pulse::IbiSeries;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

const RESAMPLE_HZ: f64 = 4.0;
/// Welch segment length: 64 s at 4 Hz, or the full series if shorter.
const SEGMENT_SAMPLES: usize = 256;
/// Spectrum is reported up to this frequency (covers both HRV bands).
const F_MAX: f64 = 0.5;

pub const LF_LO: f64 = 0.04;
pub const LF_HI: f64 = 0.15;
pub const HF_HI: f64 = 0.4;

/// One-sided power spectral density of the resampled IBI series, 0–0.5 Hz.
#[derive(Clone, Debug)]
pub struct IbiSpectrum {
    /// Strictly increasing frequency grid in Hz.
    pub freqs: Vec<f64>,
    /// Power density per bin, ms^2/Hz.
    pub power: Vec<f64>,
}

/// Normalized-unit band powers, their ratio, and the respiratory frequency.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HrvFeatures {
    pub lf_nu: f64,
    pub hf_nu: f64,
    #[serde(rename = "lf_hf")]
    pub lf_hf_ratio: f64,
    pub rf_hz: f64,
}

/// Welch PSD of the mean-removed IBI tachogram.
pub fn ibi_spectrum(ibi: &IbiSeries) -> Result<IbiSpectrum> {
    if ibi.intervals.len() < 16 {
        return Err(Error::invalid(format!(
            "need >= 16 intervals for a spectrum, got {}",
            ibi.intervals.len()
        )));
    }
    if ibi.span() < 30.0 {
        return Err(Error::invalid(format!(
            "IBI span {:.1} s too short for a spectrum (need >= 30 s)",
            ibi.span()
        )));
    }

    // tachogram: each interval stamped at its closing peak, then linearly
    // interpolated onto the uniform grid
    let ts = &ibi.peak_times[1..];
    let vs = &ibi.intervals;
    let n = ((ts[ts.len() - 1] - ts[0]) * RESAMPLE_HZ).floor() as usize + 1;
    let mut x = Vec::with_capacity(n);
    let mut j = 0usize;
    for i in 0..n {
        let t = ts[0] + i as f64 / RESAMPLE_HZ;
        while j + 1 < ts.len() && ts[j + 1] < t {
            j += 1;
        }
        let v = if j + 1 < ts.len() && ts[j + 1] > ts[j] {
            let w = ((t - ts[j]) / (ts[j + 1] - ts[j])).clamp(0.0, 1.0);
            vs[j] + (vs[j + 1] - vs[j]) * w
        } else {
            vs[j]
        };
        x.push(v);
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);

    let seg = SEGMENT_SAMPLES.min(x.len());
    let hop = (seg / 2).max(1);
    let window: Vec<f64> = (0..seg)
        .map(|j| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / seg as f64).cos()))
        .collect();
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let scale = 1.0 / (RESAMPLE_HZ * wss);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(seg);
    let half = seg / 2;
    let mut psd = vec![0.0f64; half + 1];
    let mut nseg = 0usize;
    let mut start = 0;
    while start + seg <= x.len() {
        let chunk = &x[start..start + seg];
        let cmean = chunk.iter().sum::<f64>() / seg as f64;
        let mut buf: Vec<Complex<f64>> = chunk
            .iter()
            .zip(&window)
            .map(|(&v, &w)| Complex::new((v - cmean) * w, 0.0))
            .collect();
        fft.process(&mut buf);
        for k in 0..=half {
            let mut p = buf[k].norm_sqr() * scale;
            if k != 0 && !(seg % 2 == 0 && k == half) {
                p *= 2.0; // one-sided
            }
            psd[k] += p;
        }
        nseg += 1;
        start += hop;
    }
    debug_assert!(nseg > 0);
    psd.iter_mut().for_each(|p| *p /= nseg as f64);

    let df = RESAMPLE_HZ / seg as f64;
    let keep = ((F_MAX / df).floor() as usize).min(half);
    Ok(IbiSpectrum {
        freqs: (0..=keep).map(|k| k as f64 * df).collect(),
        power: psd[..=keep].to_vec(),
    })
}

/// Trapezoidal integral of the piecewise-linear spectrum over [lo, hi],
/// interpolating at the band edges.
fn band_power(spec: &IbiSpectrum, lo: f64, hi: f64) -> f64 {
    let f = &spec.freqs;
    let p = &spec.power;
    let interp = |x: f64| -> f64 {
        match f.iter().position(|&v| v >= x) {
            Some(0) => p[0],
            Some(i) => {
                let w = (x - f[i - 1]) / (f[i] - f[i - 1]);
                p[i - 1] + (p[i] - p[i - 1]) * w
            }
            None => *p.last().unwrap(),
        }
    };
    let mut acc = 0.0;
    let mut prev_f = lo;
    let mut prev_p = interp(lo);
    for i in 0..f.len() {
        if f[i] <= lo {
            continue;
        }
        if f[i] >= hi {
            break;
        }
        acc += 0.5 * (prev_p + p[i]) * (f[i] - prev_f);
        prev_f = f[i];
        prev_p = p[i];
    }
    acc + 0.5 * (prev_p + interp(hi)) * (hi - prev_f)
}

/// LF/HF normalized units, ratio, and HF-band argmax frequency.
pub fn hrv_features(spec: &IbiSpectrum) -> Result<HrvFeatures> {
    if spec.freqs.len() < 2 {
        return Err(Error::invalid("spectrum too short"));
    }
    if spec.freqs[0] > LF_LO || *spec.freqs.last().unwrap() < HF_HI {
        return Err(Error::invalid(format!(
            "spectrum [{:.3},{:.3}] Hz does not cover the {LF_LO}-{HF_HI} Hz bands",
            spec.freqs[0],
            spec.freqs.last().unwrap()
        )));
    }
    let lf = band_power(spec, LF_LO, LF_HI);
    let hf = band_power(spec, LF_HI, HF_HI);
    let total = lf + hf;
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateSignal(
            "no spectral power in the HRV bands".into(),
        ));
    }
    let lf_nu = lf / total;
    let hf_nu = 1.0 - lf_nu; // exact complement by construction
    let rf_hz = spec
        .freqs
        .iter()
        .zip(&spec.power)
        .filter(|(f, _)| (LF_HI..=HF_HI).contains(*f))
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(f, _)| *f)
        .ok_or_else(|| Error::invalid("no grid points in the HF band"))?;
    Ok(HrvFeatures {
        lf_nu,
        hf_nu,
        lf_hf_ratio: lf / hf,
        rf_hz,
    })
}

/// Convenience: spectrum + features in one call.
pub fn hrv_from_ibi(ibi: &IbiSeries) -> Result<HrvFeatures> {
    hrv_features(&ibi_spectrum(ibi)?)
}
