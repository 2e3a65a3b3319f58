//! Video-level classification and temporal segment extraction from the
//! final T-CAM.
//!
//! Indices are 0-based in memory. The detection text format is 1-based for
//! both classes and time steps, like the dataset manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{parse_value, KeyValue};
use crate::data::{Dataset, VideoSample};
use crate::error::{Error, Result};
use crate::loss::topk_count;
use crate::model::{Network, Tcam};
use crate::numkit::{softmax, topk_mean, Tensor2};

pub const DETECTION_HEADER: &str = "# video\tclass\tstart\tend\tconfidence";

/// One localized activity instance, `[start, end]` inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video: String,
    pub class: usize,
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeConfig {
    /// Top-k ratio `s` of the video-level scores.
    pub topk_ratio: f64,
    /// Shortest run of positive T-CAM values kept as a segment.
    pub min_len: usize,
    /// Optional odd-length kernel convolved (zero padded) along time over
    /// every row of the final T-CAM before scoring.
    pub smoothing: Option<Vec<f64>>,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            topk_ratio: 8.0,
            min_len: 2,
            smoothing: None,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.topk_ratio >= 1.0 && self.topk_ratio.is_finite()) {
            return Err(Error::invalid(format!("topk-ratio must be >= 1, got {}", self.topk_ratio)));
        }
        if self.min_len == 0 {
            return Err(Error::invalid("min-run must be at least 1"));
        }
        if let Some(k) = &self.smoothing {
            if k.len().is_multiple_of(2) || k.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("smoothing kernel must have odd length and finite taps"));
            }
        }
        Ok(())
    }
}

impl KeyValue for LocalizeConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "topk-ratio" => self.topk_ratio = parse_value(key, value)?,
            "min-run" => self.min_len = parse_value(key, value)?,
            "smoothing" => {
                self.smoothing = match value {
                    "" | "none" => None,
                    v => Some(
                        v.split(',')
                            .map(|t| parse_value(key, t.trim()))
                            .collect::<Result<Vec<f64>>>()?,
                    ),
                }
            }
            _ => return Err(Error::invalid(format!("unknown localization key {key:?}"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let smoothing = match &self.smoothing {
            None => "none".to_string(),
            Some(k) => k.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        };
        vec![
            ("topk-ratio", self.topk_ratio.to_string()),
            ("min-run", self.min_len.to_string()),
            ("smoothing", smoothing),
        ]
    }
}

/// Video-level prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Top-k mean per class.
    pub scores: Vec<f64>,
    pub pmf: Vec<f64>,
    /// Classes with a strictly positive score, ascending.
    pub positive: Vec<usize>,
}

pub fn classify(c_final: &Tcam, topk_ratio: f64) -> Result<Classification> {
    if c_final.cols() == 0 {
        return Err(Error::invalid("cannot classify an empty T-CAM"));
    }
    let k = topk_count(c_final.cols(), topk_ratio);
    let scores = (0..c_final.rows())
        .map(|j| topk_mean(c_final.row(j), k))
        .collect::<Result<Vec<f64>>>()?;
    let positive = (0..scores.len()).filter(|&j| scores[j] > 0.0).collect();
    Ok(Classification {
        pmf: softmax(&scores),
        scores,
        positive,
    })
}

/// Maximal runs of strictly positive values at least `min_len` long, as
/// inclusive `(start, end)` pairs in increasing order.
pub fn extract_segments(row: &[f64], min_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for t in 0..=row.len() {
        let positive = t < row.len() && row[t] > 0.0;
        match (positive, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                if t - s >= min_len {
                    out.push((s, t - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Zero-padded temporal convolution of every row with an odd kernel.
pub fn smooth_rows(c: &Tcam, kernel: &[f64]) -> Result<Tcam> {
    if kernel.len().is_multiple_of(2) {
        return Err(Error::invalid("smoothing kernel must have odd length"));
    }
    let half = kernel.len() / 2;
    let l = c.cols();
    Ok(Tensor2::from_fn(c.rows(), l, |j, t| {
        kernel
            .iter()
            .enumerate()
            .filter_map(|(i, w)| {
                let src = (t + i).checked_sub(half).filter(|&s| s < l)?;
                Some(w * c.get(j, src))
            })
            .sum()
    }))
}

/// Detections of one video from its final T-CAM.
pub fn localize_tcam(video: &str, c_final: &Tcam, cfg: &LocalizeConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let smoothed;
    let c = match &cfg.smoothing {
        Some(k) => {
            smoothed = smooth_rows(c_final, k)?;
            &smoothed
        }
        None => c_final,
    };
    let cls = classify(c, cfg.topk_ratio)?;
    let mut out = Vec::new();
    for &j in &cls.positive {
        let row = c.row(j);
        for (start, end) in extract_segments(row, cfg.min_len) {
            let peak = row[start..=end].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.push(Detection {
                video: video.to_string(),
                class: j,
                start,
                end,
                confidence: peak + cls.scores[j],
            });
        }
    }
    Ok(out)
}

/// Full forward pass followed by [`localize_tcam`].
pub fn localize(sample: &VideoSample, net: &Network, cfg: &LocalizeConfig) -> Result<Vec<Detection>> {
    let fwd = net.forward(sample).map_err(|e| e.in_sample(&sample.id))?;
    localize_tcam(&sample.id, &fwd.fused, cfg).map_err(|e| e.in_sample(&sample.id))
}

/// Detections of every video, in dataset order.
pub fn localize_dataset(ds: &Dataset, net: &Network, cfg: &LocalizeConfig) -> Result<Vec<Vec<Detection>>> {
    ds.samples.par_iter().map(|s| localize(s, net, cfg)).collect()
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::from(DETECTION_HEADER);
    s.push('\n');
    for d in dets {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.6}",
            d.video,
            d.class + 1,
            d.start + 1,
            d.end + 1,
            d.confidence
        );
    }
    s
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| Error::Parse {
            what: "detections",
            line: i + 1,
            message: m,
        };
        let f: Vec<&str> = line.split('\t').collect();
        let [video, class, start, end, conf] = f.as_slice() else {
            return Err(bad(format!("expected 5 tab-separated fields, got {}", f.len())));
        };
        let index = |name: &str, v: &str| -> Result<usize> {
            match v.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(n - 1),
                _ => Err(bad(format!("{name} must be a 1-based index, got {v:?}"))),
            }
        };
        let (class, start, end) = (index("class", class)?, index("start", start)?, index("end", end)?);
        if end < start {
            return Err(bad(format!("end {} before start {}", end + 1, start + 1)));
        }
        let confidence: f64 = conf
            .parse()
            .ok()
            .filter(|c: &f64| c.is_finite())
            .ok_or_else(|| bad(format!("bad confidence {conf:?}")))?;
        out.push(Detection {
            video: video.to_string(),
            class,
            start,
            end,
            confidence,
        });
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, format_detections(dets)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text)
}
