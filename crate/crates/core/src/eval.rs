//! Paired evaluation: predicted vs ground-truth HR (and HRV on long clips)
//! over a clip set, aggregated as SD / RMSE / MAE / Pearson R per quantity.

use crate::error::{Error, Result};
use crate::hrv::hrv_from_ibi;
use crate::models::{PulseNet, VideoClip};
use crate::pulse::{average_hr, bandpass, detect_peaks, znormalize, FilterSpec, PulseSignal};
use serde::{Deserialize, Serialize};

/// Minimum clip duration (s) for HRV quantities; shorter clips contribute
/// to HR metrics only.
pub const HRV_MIN_DURATION_S: f64 = 60.0;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub sd: f64,
    pub rmse: f64,
    pub mae: f64,
    pub r: f64,
}

/// SD of the signed error (population), RMSE, MAE, and Pearson R between
/// paired predictions and ground truth.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            context: "metrics",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::invalid("metrics need at least 2 pairs"));
    }
    let nf = n as f64;
    let errs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let me = errs.iter().sum::<f64>() / nf;
    let sd = (errs.iter().map(|e| (e - me) * (e - me)).sum::<f64>() / nf).sqrt();
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / nf).sqrt();
    let mae = errs.iter().map(|e| e.abs()).sum::<f64>() / nf;

    let mp = pred.iter().sum::<f64>() / nf;
    let mt = truth.iter().sum::<f64>() / nf;
    let mut num = 0.0;
    let mut dp = 0.0;
    let mut dt = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        num += (p - mp) * (t - mt);
        dp += (p - mp) * (p - mp);
        dt += (t - mt) * (t - mt);
    }
    if dt <= 0.0 {
        return Err(Error::DegenerateSignal(
            "constant ground truth: R undefined".into(),
        ));
    }
    if dp <= 0.0 {
        return Err(Error::DegenerateSignal(
            "constant predictions: R undefined".into(),
        ));
    }
    let r = (num / (dp * dt).sqrt()).clamp(-1.0, 1.0);
    Ok(Metrics { sd, rmse, mae, r })
}

/// HR plus optional HRV quantities for one signal.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClipQuantities {
    pub hr_bpm: f64,
    pub rf_hz: Option<f64>,
    pub lf_nu: Option<f64>,
    pub hf_nu: Option<f64>,
    pub lf_hf: Option<f64>,
}

/// The full testing-stage pipeline on one raw signal: band-pass, normalize,
/// detect peaks, HR; HRV only when the clip is long enough.
pub fn signal_quantities(raw: &PulseSignal, band: &FilterSpec) -> Result<ClipQuantities> {
    let filtered = bandpass(raw, band)?;
    let normed = znormalize(&filtered)?;
    let ibi = detect_peaks(&normed)?;
    let hr = average_hr(&ibi)?;
    let hrv = if raw.duration() >= HRV_MIN_DURATION_S {
        hrv_from_ibi(&ibi).ok()
    } else {
        None
    };
    Ok(ClipQuantities {
        hr_bpm: hr,
        rf_hz: hrv.map(|h| h.rf_hz),
        lf_nu: hrv.map(|h| h.lf_nu),
        hf_nu: hrv.map(|h| h.hf_nu),
        lf_hf: hrv.map(|h| h.lf_hf_ratio),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerClip {
    pub index: usize,
    pub pred: ClipQuantities,
    pub truth: ClipQuantities,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_count: usize,
    /// Indices of clips dropped because the pipeline failed, with reasons.
    pub excluded: Vec<(usize, String)>,
    pub hr: Metrics,
    /// HRV rows are present only when enough long clips were available.
    pub rf: Option<Metrics>,
    pub lf: Option<Metrics>,
    pub hf: Option<Metrics>,
    pub lf_hf: Option<Metrics>,
    pub per_clip: Vec<PerClip>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("report encode: {e}")))
    }

    /// Optional per-clip CSV: predicted and true HR per clip.
    pub fn write_per_clip_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "clip,pred_hr_bpm,true_hr_bpm")?;
        for c in &self.per_clip {
            writeln!(w, "{},{},{}", c.index, c.pred.hr_bpm, c.truth.hr_bpm)?;
        }
        Ok(())
    }
}

fn paired_metrics(
    per_clip: &[PerClip],
    get: impl Fn(&ClipQuantities) -> Option<f64>,
) -> Option<Metrics> {
    let pairs: Vec<(f64, f64)> = per_clip
        .iter()
        .filter_map(|c| Some((get(&c.pred)?, get(&c.truth)?)))
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    let (pred, truth): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    metrics(&pred, &truth).ok()
}

/// Evaluate a model over paired clips: both the recovered signal and the
/// ground truth run through the same pulse pipeline before comparison.
/// Clips on which either pipeline fails are excluded and reported.
pub fn evaluate(
    model: &PulseNet<f32>,
    clips: &[(VideoClip, PulseSignal)],
    mut log: impl FnMut(&str),
) -> Result<MetricReport> {
    if clips.len() < 2 {
        return Err(Error::invalid("evaluation needs at least 2 clips"));
    }
    let band = FilterSpec::rppg();
    let mut per_clip = Vec::new();
    let mut excluded = Vec::new();
    for (i, (clip, truth)) in clips.iter().enumerate() {
        let outcome = (|| -> Result<PerClip> {
            let pred_raw = model.forward(clip)?;
            Ok(PerClip {
                index: i,
                pred: signal_quantities(&pred_raw, &band)?,
                truth: signal_quantities(truth, &band)?,
            })
        })();
        match outcome {
            Ok(row) => per_clip.push(row),
            Err(e) => {
                log(&format!("clip {i} excluded: {e}"));
                excluded.push((i, e.to_string()));
            }
        }
    }
    if per_clip.len() < 2 {
        return Err(Error::invalid(format!(
            "only {} clips survived the pipeline (need >= 2)",
            per_clip.len()
        )));
    }
    let hr = metrics(
        &per_clip.iter().map(|c| c.pred.hr_bpm).collect::<Vec<_>>(),
        &per_clip.iter().map(|c| c.truth.hr_bpm).collect::<Vec<_>>(),
    )?;
    Ok(MetricReport {
        clip_count: per_clip.len(),
        excluded,
        hr,
        rf: paired_metrics(&per_clip, |q| q.rf_hz),
        lf: paired_metrics(&per_clip, |q| q.lf_nu),
        hf: paired_metrics(&per_clip, |q| q.hf_nu),
        lf_hf: paired_metrics(&per_clip, |q| q.lf_hf),
        per_clip,
    })
}
