//! Class centers and their averaged-gradient update.
//!
//! Each (stream, branch) pair owns its own set of `N_c` unit-norm centers.
//! Centers are not touched by Adam: they move by plain SGD along an
//! averaged gradient in which every role a center plays in a batch
//! (own-class anchor, nearest negative, new-triplet anchor) is averaged
//! separately over the active hinges, with a `1 +` in the denominator.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Branch, Stream};
use crate::numkit::{angular_distance, norm, Tensor2, SIN_FLOOR};

/// Per (video, labeled class) statistics of one branch, as needed by the
/// center update.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletRecord {
    pub class: usize,
    /// Aggregate under the ordinary attention.
    pub big: Vec<f64>,
    /// Aggregate under the tempered attention.
    pub small: Vec<f64>,
    /// Nearest negative center index.
    pub negative: usize,
    /// Value inside the ATCL hinge (before `max(0, ·)`).
    pub atcl_hinge: f64,
    /// Value inside the new-triplet hinge.
    pub nt_hinge: f64,
}

/// Four independent center sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    sets: [Tensor2; 4],
}

fn slot(stream: Stream, branch: Branch) -> usize {
    match (stream, branch) {
        (Stream::Rgb, Branch::First) => 0,
        (Stream::Rgb, Branch::Adversarial) => 1,
        (Stream::Flow, Branch::First) => 2,
        (Stream::Flow, Branch::Adversarial) => 3,
    }
}

/// Center sets in storage order.
pub const CENTER_SETS: [(Stream, Branch); 4] = [
    (Stream::Rgb, Branch::First),
    (Stream::Rgb, Branch::Adversarial),
    (Stream::Flow, Branch::First),
    (Stream::Flow, Branch::Adversarial),
];

impl CenterBank {
    /// Seeded random unit vectors.
    pub fn random(rng: &mut ChaCha8Rng, num_classes: usize, dim: usize) -> Self {
        let mut make = || {
            let mut m = Tensor2::zeros(num_classes, dim);
            for j in 0..num_classes {
                loop {
                    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                    let n = norm(&v);
                    if n > 1e-12 {
                        m.row_mut(j).iter_mut().zip(&v).for_each(|(a, b)| *a = b / n);
                        break;
                    }
                }
            }
            m
        };
        Self {
            sets: [make(), make(), make(), make()],
        }
    }

    /// Wraps four matrices, normalising every row.
    pub fn from_sets(sets: [Tensor2; 4]) -> Result<Self> {
        let shape = sets[0].shape();
        let mut sets = sets;
        for s in &mut sets {
            if s.shape() != shape {
                return Err(Error::shape("CenterBank", format!("{shape:?}"), format!("{:?}", s.shape())));
            }
            normalize_rows(s)?;
        }
        Ok(Self { sets })
    }

    /// Wraps four matrices whose rows are already unit-norm (to `tol`),
    /// keeping the stored bits.
    pub fn from_unit_sets(sets: [Tensor2; 4], tol: f64) -> Result<Self> {
        let bank = Self { sets };
        let shape = bank.sets[0].shape();
        if bank.sets.iter().any(|s| s.shape() != shape) {
            return Err(Error::invalid("center sets differ in shape"));
        }
        let err = bank.max_norm_error();
        if !(err <= tol) {
            return Err(Error::invalid(format!("center rows deviate from unit norm by {err}")));
        }
        Ok(bank)
    }

    pub fn get(&self, stream: Stream, branch: Branch) -> &Tensor2 {
        &self.sets[slot(stream, branch)]
    }

    pub fn get_mut(&mut self, stream: Stream, branch: Branch) -> &mut Tensor2 {
        &mut self.sets[slot(stream, branch)]
    }

    pub fn sets(&self) -> &[Tensor2; 4] {
        &self.sets
    }

    pub fn num_classes(&self) -> usize {
        self.sets[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.sets[0].cols()
    }

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        self.sets
            .iter()
            .flat_map(|s| (0..s.rows()).map(move |j| (norm(s.row(j)) - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

fn normalize_rows(m: &mut Tensor2) -> Result<()> {
    for j in 0..m.rows() {
        let n = norm(m.row(j));
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid(format!("center {j} collapsed to zero norm")));
        }
        m.row_mut(j).iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

/// Index `k != j` of the center closest in angle to `aggregate`; the lowest
/// index wins ties.
pub fn nearest_negative(aggregate: &[f64], centers: &Tensor2, j: usize) -> Result<usize> {
    if centers.rows() < 2 {
        return Err(Error::invalid("a nearest negative center needs at least two classes"));
    }
    let mut best: Option<(usize, f64)> = None;
    for k in (0..centers.rows()).filter(|&k| k != j) {
        let d = angular_distance(aggregate, centers.row(k))?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    Ok(best.expect("at least one negative").0)
}

/// `v / (max(sin(D(v, c)), SIN_FLOOR) * |v|)`, the magnitude shared by all
/// three per-sample center derivatives.
fn scaled_direction(v: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let sin = angular_distance(v, c)?.sin().max(SIN_FLOOR);
    let n = norm(v);
    Ok(v.iter().map(|x| x / (sin * n)).collect())
}

/// Running `(sum, count)` of one role's contributions to one center.
struct RoleSum {
    sum: Vec<f64>,
    count: usize,
}

impl RoleSum {
    fn new(dim: usize) -> Self {
        Self {
            sum: vec![0.0; dim],
            count: 0,
        }
    }

    fn add(&mut self, v: &[f64], scale: f64) {
        self.sum.iter_mut().zip(v).for_each(|(a, b)| *a += scale * b);
    }

    fn averaged(&self) -> impl Iterator<Item = f64> + '_ {
        let denom = 1.0 + self.count as f64;
        self.sum.iter().map(move |s| s / denom)
    }
}

/// Averaged center gradient for one center set.
///
/// `nt_scale` multiplies the new-triplet contributions (the loss weight of
/// that triplet); `batch_size` is the `1/N` normaliser.
pub fn center_grads(records: &[TripletRecord], centers: &Tensor2, batch_size: usize, nt_scale: f64) -> Result<Tensor2> {
    let (n_c, dim) = centers.shape();
    let mut anchor: Vec<RoleSum> = (0..n_c).map(|_| RoleSum::new(dim)).collect();
    let mut negative: Vec<RoleSum> = (0..n_c).map(|_| RoleSum::new(dim)).collect();
    let mut new_triplet: Vec<RoleSum> = (0..n_c).map(|_| RoleSum::new(dim)).collect();

    for r in records {
        if r.atcl_hinge > 0.0 {
            let own = scaled_direction(&r.big, centers.row(r.class))?;
            anchor[r.class].add(&own, -1.0);
            anchor[r.class].count += 1;
            let neg = scaled_direction(&r.big, centers.row(r.negative))?;
            negative[r.negative].add(&neg, 1.0);
            negative[r.negative].count += 1;
        }
        if r.nt_hinge > 0.0 {
            let c = centers.row(r.class);
            let big = scaled_direction(&r.big, c)?;
            let small = scaled_direction(&r.small, c)?;
            let role = &mut new_triplet[r.class];
            role.add(&big, -nt_scale);
            role.add(&small, nt_scale);
            role.count += 1;
        }
    }

    let inv_n = 1.0 / batch_size.max(1) as f64;
    let mut out = Tensor2::zeros(n_c, dim);
    for k in 0..n_c {
        let row = out.row_mut(k);
        for role in [&anchor[k], &negative[k], &new_triplet[k]] {
            row.iter_mut().zip(role.averaged()).for_each(|(a, b)| *a += inv_n * b);
        }
    }
    Ok(out)
}

/// SGD step `c <- c - lr * delta` followed by row renormalisation. RGB sets
/// use `lr_rgb`, flow sets `lr_flow`.
pub fn update_centers(bank: &mut CenterBank, deltas: &[Tensor2; 4], lr_rgb: f64, lr_flow: f64) -> Result<()> {
    for (i, (stream, _)) in CENTER_SETS.iter().enumerate() {
        if deltas[i].shape() != bank.sets[i].shape() {
            return Err(Error::shape(
                "update_centers",
                format!("{:?}", bank.sets[i].shape()),
                format!("{:?}", deltas[i].shape()),
            ));
        }
        let lr = match stream {
            Stream::Rgb => lr_rgb,
            Stream::Flow => lr_flow,
        };
        let mut next = bank.sets[i].clone();
        next.axpy(-lr, &deltas[i]);
        normalize_rows(&mut next)?;
        bank.sets[i] = next;
    }
    Ok(())
}
