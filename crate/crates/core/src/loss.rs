//! Training objectives and their analytic gradients.
//!
//! A branch (one stream, first or adversarial head) contributes an angular
//! triplet-center term on attention-aggregated features and a new-triplet
//! term comparing that aggregate with the one obtained under a flatter,
//! tempered attention. Every T-CAM additionally contributes a top-k
//! multiple-instance cross-entropy. All values here are per video; batch
//! averaging and the `alpha` weight are applied by the trainer.

use crate::centers::{nearest_negative, TripletRecord};
use crate::error::{Error, Result};
use crate::model::Tcam;
use crate::numkit::{angular_distance_grad, norm, softmax, softmax_rows, topk_indices, Tensor2};

/// Margins and weights of the pair of triplets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletHyper {
    /// ATCL angular margin, radians.
    pub m1: f64,
    /// New-triplet angular margin, radians.
    pub m2: f64,
    /// Weight of the new-triplet term.
    pub gamma: f64,
    /// Temperature of the tempered attention, in (0, 1].
    pub beta: f64,
}

impl TripletHyper {
    pub fn validate(&self) -> Result<()> {
        let pi = std::f64::consts::PI;
        if !(0.0..=pi).contains(&self.m1) || !(0.0..=pi).contains(&self.m2) {
            return Err(Error::invalid("angular margins must lie in [0, pi]"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma must be non-negative"));
        }
        Ok(())
    }
}

/// Top-down attention: row-wise softmax of the T-CAM.
pub fn attention(c: &Tcam) -> Result<Tensor2> {
    softmax_rows(c, 1.0)
}

/// Softmax of `beta * C`, flatter than [`attention`] for `beta < 1`.
pub fn tempered_attention(c: &Tcam, beta: f64) -> Result<Tensor2> {
    softmax_rows(c, beta)
}

/// Attention-weighted sum of feature columns for class `j`.
pub fn aggregate(xe: &Tensor2, a: &Tensor2, j: usize) -> Vec<f64> {
    let weights = a.row(j);
    (0..xe.rows())
        .map(|e| xe.row(e).iter().zip(weights).map(|(x, w)| x * w).sum())
        .collect()
}

/// Value and aggregate gradients of one triplet loss.
#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub value: f64,
    /// Gradient with respect to the ordinary aggregates (N_c×E).
    pub d_big: Tensor2,
    /// Gradient with respect to the tempered aggregates (N_c×E).
    pub d_small: Tensor2,
    /// Raw hinge argument per class, `None` for unlabeled or skipped classes.
    pub hinges: Vec<Option<f64>>,
    /// Nearest negative center per class (ATCL only).
    pub negatives: Vec<Option<usize>>,
    /// Labeled classes skipped because an aggregate had zero norm.
    pub skipped: usize,
}

impl TripletOutput {
    fn empty(n_c: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            d_big: Tensor2::zeros(n_c, dim),
            d_small: Tensor2::zeros(n_c, dim),
            hinges: vec![None; n_c],
            negatives: vec![None; n_c],
            skipped: 0,
        }
    }
}

fn check_aggregates(context: &'static str, aggs: &Tensor2, labels: &[bool], centers: &Tensor2) -> Result<()> {
    if aggs.shape() != centers.shape() || labels.len() != centers.rows() {
        return Err(Error::shape(
            context,
            format!("{}x{} with {} labels", centers.rows(), centers.cols(), centers.rows()),
            format!("{}x{} with {} labels", aggs.rows(), aggs.cols(), labels.len()),
        ));
    }
    Ok(())
}

/// Sum over labeled classes of
/// `max(0, D(F_j, c_j) - D(F_j, c_n) + m1)` with `n` the nearest negative.
pub fn atcl_loss(big: &Tensor2, labels: &[bool], centers: &Tensor2, m1: f64) -> Result<TripletOutput> {
    check_aggregates("atcl_loss", big, labels, centers)?;
    if centers.rows() < 2 {
        return Err(Error::invalid("ATCL needs at least two classes"));
    }
    let mut out = TripletOutput::empty(centers.rows(), centers.cols());
    for j in (0..labels.len()).filter(|&j| labels[j]) {
        let f = big.row(j);
        if norm(f) == 0.0 {
            out.skipped += 1;
            continue;
        }
        let n = nearest_negative(f, centers, j)?;
        let (d_pos, g_pos) = angular_distance_grad(f, centers.row(j))?;
        let (d_neg, g_neg) = angular_distance_grad(f, centers.row(n))?;
        let hinge = d_pos - d_neg + m1;
        out.hinges[j] = Some(hinge);
        out.negatives[j] = Some(n);
        if hinge > 0.0 {
            out.value += hinge;
            out.d_big
                .row_mut(j)
                .iter_mut()
                .zip(g_pos.iter().zip(&g_neg))
                .for_each(|(d, (p, q))| *d += p - q);
        }
    }
    Ok(out)
}

/// Sum over labeled classes of `max(0, D(F_j, c_j) - D(f_j, c_j) + m2)`.
pub fn nt_loss(big: &Tensor2, small: &Tensor2, labels: &[bool], centers: &Tensor2, m2: f64) -> Result<TripletOutput> {
    check_aggregates("nt_loss", big, labels, centers)?;
    check_aggregates("nt_loss", small, labels, centers)?;
    let mut out = TripletOutput::empty(centers.rows(), centers.cols());
    for j in (0..labels.len()).filter(|&j| labels[j]) {
        let (fb, fs) = (big.row(j), small.row(j));
        if norm(fb) == 0.0 || norm(fs) == 0.0 {
            out.skipped += 1;
            continue;
        }
        let (d_big, g_big) = angular_distance_grad(fb, centers.row(j))?;
        let (d_small, g_small) = angular_distance_grad(fs, centers.row(j))?;
        let hinge = d_big - d_small + m2;
        out.hinges[j] = Some(hinge);
        if hinge > 0.0 {
            out.value += hinge;
            out.d_big.row_mut(j).iter_mut().zip(&g_big).for_each(|(d, g)| *d += g);
            out.d_small.row_mut(j).iter_mut().zip(&g_small).for_each(|(d, g)| *d -= g);
        }
    }
    Ok(out)
}

/// Everything one branch's triplet losses need.
#[derive(Debug, Clone, Copy)]
pub struct BranchLossInput<'a> {
    pub features: &'a Tensor2,
    pub tcam: &'a Tcam,
    pub labels: &'a [bool],
    pub centers: &'a Tensor2,
    pub hyper: TripletHyper,
}

/// Pair-of-triplets loss of one branch with gradients.
#[derive(Debug, Clone)]
pub struct BranchLoss {
    pub atcl: f64,
    pub nt: f64,
    /// `atcl + gamma * nt`.
    pub aclpt: f64,
    pub d_features: Tensor2,
    pub d_tcam: Tensor2,
    /// Per labeled class statistics for the center update.
    pub records: Vec<TripletRecord>,
    pub skipped: usize,
}

/// Backward of a row-wise softmax of `scale * c` given `dL/d(attention)`.
fn softmax_rows_backward(att: &Tensor2, d_att: &Tensor2, scale: f64, d_c: &mut Tensor2) {
    for j in 0..att.rows() {
        let (a, da) = (att.row(j), d_att.row(j));
        let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for (t, out) in d_c.row_mut(j).iter_mut().enumerate() {
            *out += scale * a[t] * (da[t] - inner);
        }
    }
}

/// Gradient of `aggregate` pulled back to the features and the attention.
fn aggregate_backward(xe: &Tensor2, att: &Tensor2, d_agg: &Tensor2, d_xe: &mut Tensor2) -> Tensor2 {
    let (n_c, l) = att.shape();
    let mut d_att = Tensor2::zeros(n_c, l);
    for j in 0..n_c {
        let g = d_agg.row(j);
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for t in 0..l {
            let mut acc = 0.0;
            let w = att.get(j, t);
            for (e, &ge) in g.iter().enumerate() {
                acc += ge * xe.get(e, t);
                d_xe.add_at(e, t, w * ge);
            }
            d_att.set(j, t, acc);
        }
    }
    d_att
}

/// Ordinary and tempered aggregates for the labeled classes (other rows
/// stay zero).
pub fn branch_aggregates(xe: &Tensor2, att: &Tensor2, tempered: &Tensor2, labels: &[bool]) -> (Tensor2, Tensor2) {
    let (n_c, dim) = (att.rows(), xe.rows());
    let mut big = Tensor2::zeros(n_c, dim);
    let mut small = Tensor2::zeros(n_c, dim);
    for j in (0..n_c).filter(|&j| labels[j]) {
        big.row_mut(j).copy_from_slice(&aggregate(xe, att, j));
        small.row_mut(j).copy_from_slice(&aggregate(xe, tempered, j));
    }
    (big, small)
}

/// `atcl + gamma * nt` for one branch, with gradients with respect to the
/// branch features and T-CAM.
pub fn aclpt_loss(input: &BranchLossInput<'_>) -> Result<BranchLoss> {
    let BranchLossInput {
        features: xe,
        tcam: c,
        labels,
        centers,
        hyper,
    } = *input;
    hyper.validate()?;
    if c.cols() != xe.cols() || c.rows() != centers.rows() || xe.rows() != centers.cols() {
        return Err(Error::shape(
            "aclpt_loss",
            format!("tcam {}x{}", centers.rows(), xe.cols()),
            format!("tcam {}x{}", c.rows(), c.cols()),
        ));
    }
    let att = attention(c)?;
    let tempered = tempered_attention(c, hyper.beta)?;
    let (big, small) = branch_aggregates(xe, &att, &tempered, labels);

    let atcl = atcl_loss(&big, labels, centers, hyper.m1)?;
    let nt = nt_loss(&big, &small, labels, centers, hyper.m2)?;

    let mut d_big = atcl.d_big.clone();
    d_big.axpy(hyper.gamma, &nt.d_big);
    let mut d_small = nt.d_small.clone();
    d_small.scale(hyper.gamma);

    let mut d_features = Tensor2::zeros(xe.rows(), xe.cols());
    let mut d_tcam = Tensor2::zeros(c.rows(), c.cols());
    let d_att = aggregate_backward(xe, &att, &d_big, &mut d_features);
    softmax_rows_backward(&att, &d_att, 1.0, &mut d_tcam);
    let d_temp = aggregate_backward(xe, &tempered, &d_small, &mut d_features);
    softmax_rows_backward(&tempered, &d_temp, hyper.beta, &mut d_tcam);

    let records = (0..labels.len())
        .filter_map(|j| {
            let (a, n) = (atcl.hinges[j]?, nt.hinges[j]?);
            Some(TripletRecord {
                class: j,
                big: big.row(j).to_vec(),
                small: small.row(j).to_vec(),
                negative: atcl.negatives[j]?,
                atcl_hinge: a,
                nt_hinge: n,
            })
        })
        .collect();

    Ok(BranchLoss {
        atcl: atcl.value,
        nt: nt.value,
        aclpt: atcl.value + hyper.gamma * nt.value,
        d_features,
        d_tcam,
        records,
        skipped: atcl.skipped.max(nt.skipped),
    })
}

/// Sum of [`aclpt_loss`] over the given branches.
pub fn a2clpt_total(inputs: &[BranchLossInput<'_>]) -> Result<f64> {
    inputs.iter().map(|i| aclpt_loss(i).map(|b| b.aclpt)).sum()
}

/// `ceil(l / s)`, clamped to `1..=l`.
pub fn topk_count(len: usize, ratio: f64) -> usize {
    ((len as f64 / ratio).ceil() as usize).clamp(1, len.max(1))
}

/// Multiple-instance classification loss of one T-CAM.
#[derive(Debug, Clone)]
pub struct ClsLoss {
    pub value: f64,
    pub scores: Vec<f64>,
    pub d_tcam: Tensor2,
}

/// Label pmf `y / |y|_1`.
pub fn label_pmf(labels: &[bool]) -> Result<Vec<f64>> {
    let count = labels.iter().filter(|&&y| y).count();
    if count == 0 {
        return Err(Error::invalid("classification loss needs at least one label"));
    }
    Ok(labels
        .iter()
        .map(|&y| if y { 1.0 / count as f64 } else { 0.0 })
        .collect())
}

/// Cross-entropy between `softmax(top-k mean scores)` and the label pmf;
/// gradients reach only the selected top-k entries.
pub fn cls_loss(c: &Tcam, labels: &[bool], ratio: f64) -> Result<ClsLoss> {
    if labels.len() != c.rows() {
        return Err(Error::shape("cls_loss", c.rows(), labels.len()));
    }
    if !(ratio >= 1.0) {
        return Err(Error::invalid("top-k ratio s must be >= 1"));
    }
    if c.cols() == 0 {
        return Err(Error::invalid("classification loss of an empty T-CAM"));
    }
    let q = label_pmf(labels)?;
    let k = topk_count(c.cols(), ratio);
    let picks: Vec<Vec<usize>> = (0..c.rows()).map(|j| topk_indices(c.row(j), k)).collect();
    let scores: Vec<f64> = picks
        .iter()
        .enumerate()
        .map(|(j, idx)| idx.iter().map(|&t| c.get(j, t)).sum::<f64>() / k as f64)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let value = q
        .iter()
        .zip(&scores)
        .filter(|(qj, _)| **qj > 0.0)
        .map(|(qj, s)| -qj * (s - lse))
        .sum();
    let p = softmax(&scores);
    let mut d_tcam = Tensor2::zeros(c.rows(), c.cols());
    for (j, idx) in picks.iter().enumerate() {
        let g = (p[j] - q[j]) / k as f64;
        for &t in idx {
            d_tcam.set(j, t, g);
        }
    }
    Ok(ClsLoss {
        value,
        scores,
        d_tcam,
    })
}

/// Sum of the five classification losses (both branches of both streams
/// and the fused T-CAM).
pub fn cls_total(c_r: &Tcam, c_ra: &Tcam, c_o: &Tcam, c_oa: &Tcam, c_final: &Tcam, labels: &[bool], ratio: f64) -> Result<f64> {
    [c_r, c_ra, c_o, c_oa, c_final]
        .into_iter()
        .map(|c| cls_loss(c, labels, ratio).map(|l| l.value))
        .sum()
}

/// Classification terms of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClsBreakdown {
    pub rgb: f64,
    pub rgb_adversarial: f64,
    pub flow: f64,
    pub flow_adversarial: f64,
    pub fused: f64,
}

impl ClsBreakdown {
    pub fn sum(&self) -> f64 {
        self.rgb + self.rgb_adversarial + self.flow + self.flow_adversarial + self.fused
    }
}

/// All loss terms of one objective evaluation (already batch-averaged).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// ATCL summed over branches.
    pub atcl: f64,
    /// New-triplet loss summed over branches.
    pub nt: f64,
    /// `atcl + gamma * nt`.
    pub aclpt: f64,
    pub cls: ClsBreakdown,
    /// `alpha * aclpt + cls`.
    pub total: f64,
    pub skipped: usize,
}

impl ClsBreakdown {
    fn add(&mut self, o: &ClsBreakdown) {
        self.rgb += o.rgb;
        self.rgb_adversarial += o.rgb_adversarial;
        self.flow += o.flow;
        self.flow_adversarial += o.flow_adversarial;
        self.fused += o.fused;
    }

    fn scale(&mut self, s: f64) {
        self.rgb *= s;
        self.rgb_adversarial *= s;
        self.flow *= s;
        self.flow_adversarial *= s;
        self.fused *= s;
    }
}

impl LossBreakdown {
    /// Adds every term of `o` (skip counts included).
    pub fn accumulate(&mut self, o: &LossBreakdown) {
        self.atcl += o.atcl;
        self.nt += o.nt;
        self.aclpt += o.aclpt;
        self.cls.add(&o.cls);
        self.total += o.total;
        self.skipped += o.skipped;
    }

    /// Multiplies every loss term by `s`; the skip count is left alone.
    pub fn scale(&mut self, s: f64) {
        self.atcl *= s;
        self.nt *= s;
        self.aclpt *= s;
        self.cls.scale(s);
        self.total *= s;
    }
}
