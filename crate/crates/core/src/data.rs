//! Two-stream feature datasets: the on-disk manifest/binary format and a
//! seeded synthetic generator.
//!
//! Internally all class and time indices are 0-based; the manifest stores
//! them 1-based.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::{parse_flag, parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::numkit::{norm, Tensor2};

pub const MANIFEST_MAGIC: &str = "A2CLPT-MANIFEST v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// D×l feature matrix of one stream of one video.
pub type FeatureSequence = Tensor2;

/// Inclusive ground-truth interval `[start, end]` of one activity instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

#[allow(clippy::len_without_is_empty)]
impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub rgb: FeatureSequence,
    pub flow: FeatureSequence,
    pub labels: Vec<bool>,
    pub gt_segments: Vec<Segment>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.rgb.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_label(&self) -> bool {
        self.labels.iter().any(|&y| y)
    }

    /// Labeled class indices in increasing order.
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &y)| y).map(|(j, _)| j)
    }

    /// Checks the sample's structural invariants against dataset dimensions.
    pub fn validate(&self, feature_dim: usize, num_classes: usize) -> Result<()> {
        let fail = |message: String| Error::Load {
            id: self.id.clone(),
            message,
        };
        if self.id.is_empty() || self.id.contains(['\t', '\n', '/']) {
            return Err(fail("video id must be non-empty without tabs, newlines or slashes".into()));
        }
        if self.rgb.rows() != feature_dim || self.flow.rows() != feature_dim {
            return Err(fail(format!(
                "feature dimension {}/{} does not match D={feature_dim}",
                self.rgb.rows(),
                self.flow.rows()
            )));
        }
        if self.rgb.cols() != self.flow.cols() {
            return Err(fail(format!(
                "rgb length {} differs from flow length {}",
                self.rgb.cols(),
                self.flow.cols()
            )));
        }
        if self.is_empty() {
            return Err(fail("empty feature sequence".into()));
        }
        if !self.rgb.is_finite() || !self.flow.is_finite() {
            return Err(fail("non-finite feature values".into()));
        }
        if self.labels.len() != num_classes {
            return Err(fail(format!(
                "{} labels for {num_classes} classes",
                self.labels.len()
            )));
        }
        for seg in &self.gt_segments {
            if seg.start > seg.end || seg.end >= self.len() {
                return Err(fail(format!(
                    "segment {}-{} outside 1..={}",
                    seg.start + 1,
                    seg.end + 1,
                    self.len()
                )));
            }
            if seg.class >= num_classes || !self.labels[seg.class] {
                return Err(fail(format!("segment class {} is not labeled", seg.class + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<VideoSample>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<VideoSample>, num_classes: usize, feature_dim: usize) -> Result<Self> {
        for s in &samples {
            s.validate(feature_dim, num_classes)?;
        }
        Ok(Self {
            samples,
            num_classes,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the samples from `at` onward into a second dataset.
    pub fn split_at(mut self, at: usize) -> (Dataset, Dataset) {
        let tail = self.samples.split_off(at.min(self.samples.len()));
        let rest = Dataset {
            samples: tail,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        };
        (self, rest)
    }

    /// All ground-truth segments paired with their video ids.
    pub fn ground_truth(&self) -> Vec<(String, Segment)> {
        self.samples
            .iter()
            .flat_map(|s| s.gt_segments.iter().map(|g| (s.id.clone(), *g)))
            .collect()
    }
}

fn feature_path(dir: &Path, id: &str, stream: &str) -> PathBuf {
    dir.join(format!("{id}.{stream}.bin"))
}

fn read_features(path: &Path, id: &str, d: usize, l: usize) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        id: id.to_string(),
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    if bytes.len() != d * l * 4 {
        return Err(Error::Load {
            id: id.to_string(),
            message: format!(
                "{} has {} bytes, expected {} for D={d}, l={l}",
                path.display(),
                bytes.len(),
                d * l * 4
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor2::new(d, l, values).map_err(|e| Error::Load {
        id: id.to_string(),
        message: format!("{}: {e}", path.display()),
    })
}

fn write_features(path: &Path, m: &FeatureSequence) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.as_slice().len() * 4);
    for &v in m.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = |message: &str| Error::Parse {
        what: "manifest header",
        line: 1,
        message: message.to_string(),
    };
    let rest = line
        .strip_prefix(MANIFEST_MAGIC)
        .ok_or_else(|| bad("missing A2CLPT-MANIFEST v1 magic"))?;
    let mut d = None;
    let mut c = None;
    for tok in rest.split_whitespace() {
        match tok.split_once('=') {
            Some(("D", v)) => d = v.parse().ok(),
            Some(("C", v)) => c = v.parse().ok(),
            _ => return Err(bad(&format!("unexpected token `{tok}`"))),
        }
    }
    match (d, c) {
        (Some(d), Some(c)) if d > 0 && c > 0 => Ok((d, c)),
        _ => Err(bad("expected positive D=<int> C=<int>")),
    }
}

struct ManifestEntry {
    id: String,
    len: usize,
    classes: Vec<usize>,
    segments: Vec<Segment>,
}

fn parse_entry(line: &str, lineno: usize, num_classes: usize) -> Result<ManifestEntry> {
    let bad = |message: String| Error::Parse {
        what: "manifest entry",
        line: lineno,
        message,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
    }
    let id = fields[0].to_string();
    let len: usize = fields[1]
        .parse()
        .map_err(|_| bad(format!("bad length `{}`", fields[1])))?;
    let parse_class = |tok: &str| -> Result<usize> {
        match tok.trim().parse::<usize>() {
            Ok(c) if (1..=num_classes).contains(&c) => Ok(c - 1),
            _ => Err(bad(format!("class `{tok}` outside 1..={num_classes}"))),
        }
    };
    let classes = if fields[2].is_empty() || fields[2] == "-" {
        Vec::new()
    } else {
        fields[2].split(',').map(parse_class).collect::<Result<_>>()?
    };
    let mut segments = Vec::new();
    if fields[3] != "-" {
        for tok in fields[3].split(',') {
            let (class, range) = tok
                .split_once(':')
                .ok_or_else(|| bad(format!("segment `{tok}` lacks class:start-end")))?;
            let (s, e) = range
                .split_once('-')
                .ok_or_else(|| bad(format!("segment `{tok}` lacks start-end")))?;
            let parse_t = |t: &str| -> Result<usize> {
                match t.parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v - 1),
                    _ => Err(bad(format!("bad time index `{t}` in `{tok}`"))),
                }
            };
            segments.push(Segment {
                class: parse_class(class)?,
                start: parse_t(s)?,
                end: parse_t(e)?,
            });
        }
    }
    Ok(ManifestEntry {
        id,
        len,
        classes,
        segments,
    })
}

/// Reads a manifest and its per-stream feature files (same directory).
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse {
        what: "manifest header",
        line: 1,
        message: "empty file".into(),
    })?;
    let (d, c) = parse_header(header)?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = parse_entry(line, i + 2, c)?;
        let rgb = read_features(&feature_path(dir, &entry.id, "rgb"), &entry.id, d, entry.len)?;
        let flow = read_features(&feature_path(dir, &entry.id, "flow"), &entry.id, d, entry.len)?;
        let mut labels = vec![false; c];
        for &j in &entry.classes {
            labels[j] = true;
        }
        samples.push(VideoSample {
            id: entry.id,
            rgb,
            flow,
            labels,
            gt_segments: entry.segments,
        });
    }
    Dataset::new(samples, c, d)
}

fn manifest_text(ds: &Dataset) -> String {
    let mut out = format!("{MANIFEST_MAGIC} D={} C={}\n", ds.feature_dim, ds.num_classes);
    for s in &ds.samples {
        let classes: Vec<String> = s.classes().map(|j| (j + 1).to_string()).collect();
        let classes = if classes.is_empty() {
            "-".to_string()
        } else {
            classes.join(",")
        };
        let segments = if s.gt_segments.is_empty() {
            "-".to_string()
        } else {
            s.gt_segments
                .iter()
                .map(|g| format!("{}:{}-{}", g.class + 1, g.start + 1, g.end + 1))
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(out, "{}\t{}\t{}\t{}", s.id, s.len(), classes, segments);
    }
    out
}

/// Writes `manifest.txt` plus `<id>.rgb.bin`/`<id>.flow.bin` into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &ds.samples {
        s.validate(ds.feature_dim, ds.num_classes)?;
        write_features(&feature_path(dir, &s.id, "rgb"), &s.rgb)?;
        write_features(&feature_path(dir, &s.id, "flow"), &s.flow)?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest_text(ds)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parameters of the synthetic two-stream generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    /// Labeled classes per video (segments are spread across them).
    pub classes_per_video: usize,
    pub sigma: f64,
    /// When false, background steps carry noise only.
    pub background: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            feature_dim: 32,
            num_videos: 50,
            min_len: 48,
            max_len: 96,
            min_segments: 1,
            max_segments: 3,
            min_segment_len: 6,
            max_segment_len: 16,
            classes_per_video: 1,
            sigma: 0.1,
            background: true,
            seed: 0,
        }
    }
}

impl KeyValue for SynthConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num-classes" => self.num_classes = parse_value(key, value)?,
            "feature-dim" => self.feature_dim = parse_value(key, value)?,
            "num-videos" => self.num_videos = parse_value(key, value)?,
            "min-len" => self.min_len = parse_value(key, value)?,
            "max-len" => self.max_len = parse_value(key, value)?,
            "min-segments" => self.min_segments = parse_value(key, value)?,
            "max-segments" => self.max_segments = parse_value(key, value)?,
            "min-segment-len" => self.min_segment_len = parse_value(key, value)?,
            "max-segment-len" => self.max_segment_len = parse_value(key, value)?,
            "classes-per-video" => self.classes_per_video = parse_value(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "background" => self.background = parse_flag(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::invalid(format!("unknown synthetic config key {key:?}"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num-classes", self.num_classes.to_string()),
            ("feature-dim", self.feature_dim.to_string()),
            ("num-videos", self.num_videos.to_string()),
            ("min-len", self.min_len.to_string()),
            ("max-len", self.max_len.to_string()),
            ("min-segments", self.min_segments.to_string()),
            ("max-segments", self.max_segments.to_string()),
            ("min-segment-len", self.min_segment_len.to_string()),
            ("max-segment-len", self.max_segment_len.to_string()),
            ("classes-per-video", self.classes_per_video.to_string()),
            ("sigma", self.sigma.to_string()),
            ("background", self.background.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synthetic config: {m}")));
        if self.num_classes == 0 || self.feature_dim == 0 {
            return bad("num_classes and feature_dim must be positive");
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return bad("need 3 <= min_len <= max_len");
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return bad("need 1 <= min_segments <= max_segments");
        }
        if self.min_segment_len == 0 || self.min_segment_len > self.max_segment_len {
            return bad("need 1 <= min_segment_len <= max_segment_len");
        }
        if self.classes_per_video == 0
            || self.classes_per_video > self.num_classes
            || self.classes_per_video > self.min_segments
        {
            return bad("classes_per_video must lie in 1..=min(num_classes, min_segments)");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be a finite non-negative number");
        }
        let needed = self.max_segments * (self.min_segment_len + 1) - 1;
        if needed > self.min_len {
            return bad(&format!(
                "{} segments of length {} (plus gaps) need {needed} steps but min_len is {}",
                self.max_segments, self.min_segment_len, self.min_len
            ));
        }
        Ok(())
    }
}

/// Unit prototypes for each class plus one background direction. When
/// `dim > classes` they are mutually orthonormal.
fn prototypes(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let count = classes + 1;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if dim >= count {
            // modified Gram-Schmidt against the previous prototypes
            for p in &out {
                let proj = crate::numkit::dot(&v, p);
                v.iter_mut().zip(p).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    out
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Places `count` non-overlapping segments with at least one gap step
/// between neighbours.
fn place_segments(rng: &mut ChaCha8Rng, cfg: &SynthConfig, len: usize, count: usize) -> Vec<(usize, usize)> {
    let mut lengths: Vec<usize> = (0..count)
        .map(|_| rng.random_range(cfg.min_segment_len..=cfg.max_segment_len))
        .collect();
    // shrink the longest until everything fits
    while lengths.iter().sum::<usize>() + count - 1 > len {
        let (i, _) = lengths
            .iter()
            .enumerate()
            .max_by_key(|(i, &l)| (l, std::cmp::Reverse(*i)))
            .expect("count >= 1");
        lengths[i] -= 1;
    }
    let slack = len - lengths.iter().sum::<usize>() - (count - 1);
    let mut cuts: Vec<usize> = (0..count).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(count);
    let mut pos = 0;
    let mut used = 0;
    for (i, &l) in lengths.iter().enumerate() {
        pos += cuts[i] - used;
        used = cuts[i];
        out.push((pos, pos + l - 1));
        pos += l + 1;
    }
    out
}

/// Deterministic synthetic dataset: activity steps carry the class
/// prototype of their stream, background steps the background prototype
/// (or nothing), both plus isotropic Gaussian noise.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rgb_protos = prototypes(&mut rng, cfg.num_classes, cfg.feature_dim);
    let flow_protos = prototypes(&mut rng, cfg.num_classes, cfg.feature_dim);
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let width = cfg.num_videos.max(1).to_string().len();

    let mut samples = Vec::with_capacity(cfg.num_videos);
    for v in 0..cfg.num_videos {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        // round-robin primary class guarantees coverage
        let mut classes = vec![v % cfg.num_classes];
        let mut others: Vec<usize> = (0..cfg.num_classes).filter(|&c| c != classes[0]).collect();
        others.shuffle(&mut rng);
        classes.extend(others.into_iter().take(cfg.classes_per_video - 1));
        let count = rng.random_range(cfg.min_segments..=cfg.max_segments);
        let spans = place_segments(&mut rng, cfg, len, count);
        let mut seg_classes: Vec<usize> = (0..count).map(|i| classes[i % classes.len()]).collect();
        seg_classes.shuffle(&mut rng);

        let mut owner: Vec<Option<usize>> = vec![None; len];
        let mut gt = Vec::with_capacity(count);
        for (&(start, end), &class) in spans.iter().zip(&seg_classes) {
            owner[start..=end].iter_mut().for_each(|o| *o = Some(class));
            gt.push(Segment { class, start, end });
        }

        let mut make_stream = |protos: &[Vec<f64>]| {
            let mut m = Tensor2::zeros(cfg.feature_dim, len);
            for (t, o) in owner.iter().enumerate() {
                let base: Option<&[f64]> = match o {
                    Some(c) => Some(&protos[*c]),
                    None if cfg.background => Some(&protos[cfg.num_classes]),
                    None => None,
                };
                for d in 0..cfg.feature_dim {
                    let mut x = base.map_or(0.0, |b| b[d]);
                    if cfg.sigma > 0.0 {
                        x += noise.sample(&mut rng);
                    }
                    m.set(d, t, round_f32(x));
                }
            }
            m
        };
        let rgb = make_stream(&rgb_protos);
        let flow = make_stream(&flow_protos);

        let mut labels = vec![false; cfg.num_classes];
        classes.iter().for_each(|&c| labels[c] = true);
        samples.push(VideoSample {
            id: format!("synth_{v:0width$}"),
            rgb,
            flow,
            labels,
            gt_segments: gt,
        });
    }
    Dataset::new(samples, cfg.num_classes, cfg.feature_dim)
}

/// Exposes the generator's prototypes for tests that need ground truth
/// directions.
pub fn synth_prototypes(cfg: &SynthConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rgb = prototypes(&mut rng, cfg.num_classes, cfg.feature_dim);
    let flow = prototypes(&mut rng, cfg.num_classes, cfg.feature_dim);
    (rgb, flow)
}
