//! Class prototypes, the modal-enhancement (ME) loss, ground-truth scores and
//! the imbalance ratios that drive loss modulation and modality selection.
//!
//! Distances are plain Euclidean norms. Prototypes are treated as constants
//! wherever a loss is differentiated.

use std::collections::BTreeMap;

use crate::numkit::{l2_distance, Matrix};
use crate::{Error, Modality, Result};

/// Centroid of one class together with the number of samples behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub centroid: Vec<f64>,
    pub count: usize,
}

/// Per-class prototypes of one modality. Absent classes are simply missing.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    modality: Modality,
    dim: usize,
    classes: BTreeMap<usize, Prototype>,
}

impl PrototypeSet {
    pub fn empty(modality: Modality, dim: usize) -> Self {
        PrototypeSet {
            modality,
            dim,
            classes: BTreeMap::new(),
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.classes.get(&class)
    }

    /// Classes in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Prototype)> {
        self.classes.iter().map(|(&c, p)| (c, p))
    }

    pub fn insert(&mut self, class: usize, proto: Prototype) -> Result<()> {
        if proto.centroid.len() != self.dim {
            return Err(Error::Dimension {
                op: "prototype insert",
                left: (1, self.dim),
                right: (1, proto.centroid.len()),
            });
        }
        if proto.count == 0 {
            return Err(Error::param("prototype count must be >= 1"));
        }
        self.classes.insert(class, proto);
        Ok(())
    }

    fn require(&self, class: usize) -> Result<&Prototype> {
        self.classes.get(&class).ok_or(Error::PrototypeCoverage {
            class,
            modality: self.modality,
        })
    }

    /// Classes present in `fresh` replace this set's entries; others are kept.
    pub fn refresh_from(&mut self, fresh: &PrototypeSet) -> Result<()> {
        if fresh.is_empty() {
            return Ok(());
        }
        if fresh.dim != self.dim {
            return Err(Error::Dimension {
                op: "prototype refresh",
                left: (1, self.dim),
                right: (1, fresh.dim),
            });
        }
        for (c, p) in fresh.iter() {
            self.classes.insert(c, p.clone());
        }
        Ok(())
    }
}

/// Prototypes for both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalPrototypes {
    pub a: PrototypeSet,
    pub i: PrototypeSet,
}

impl ModalPrototypes {
    pub fn empty(dim: usize) -> Self {
        ModalPrototypes {
            a: PrototypeSet::empty(Modality::A, dim),
            i: PrototypeSet::empty(Modality::I, dim),
        }
    }

    pub fn get(&self, modality: Modality) -> &PrototypeSet {
        match modality {
            Modality::A => &self.a,
            Modality::I => &self.i,
        }
    }

    pub fn get_mut(&mut self, modality: Modality) -> &mut PrototypeSet {
        match modality {
            Modality::A => &mut self.a,
            Modality::I => &mut self.i,
        }
    }
}

/// Per-class mean of the rows of `z`.
pub fn local_prototypes(z: &Matrix, labels: &[usize], modality: Modality) -> Result<PrototypeSet> {
    if z.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "local_prototypes",
            left: z.shape(),
            right: (labels.len(), 1),
        });
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (r, &y) in labels.iter().enumerate() {
        let entry = sums.entry(y).or_insert_with(|| (vec![0.0; z.cols()], 0));
        for (s, v) in entry.0.iter_mut().zip(z.row(r)) {
            *s += v;
        }
        entry.1 += 1;
    }
    let classes = sums
        .into_iter()
        .map(|(c, (sum, n))| {
            let centroid = sum.into_iter().map(|s| s / n as f64).collect();
            (c, Prototype { centroid, count: n })
        })
        .collect();
    Ok(PrototypeSet {
        modality,
        dim: z.cols(),
        classes,
    })
}

/// Count-weighted mean of the class centroids across reports.
pub fn aggregate_prototypes(reports: &[&PrototypeSet]) -> Result<PrototypeSet> {
    let first = reports
        .first()
        .ok_or_else(|| Error::param("aggregate_prototypes needs at least one report"))?;
    let (modality, dim) = (first.modality, first.dim);
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for rep in reports {
        if rep.dim != dim || rep.modality != modality {
            return Err(Error::Dimension {
                op: "aggregate_prototypes",
                left: (1, dim),
                right: (1, rep.dim),
            });
        }
        for (c, p) in rep.iter() {
            let entry = acc.entry(c).or_insert_with(|| (vec![0.0; dim], 0));
            for (s, v) in entry.0.iter_mut().zip(&p.centroid) {
                *s += v * p.count as f64;
            }
            entry.1 += p.count;
        }
    }
    let classes = acc
        .into_iter()
        .map(|(c, (sum, n))| {
            let centroid = sum.into_iter().map(|s| s / n as f64).collect();
            (c, Prototype { centroid, count: n })
        })
        .collect();
    Ok(PrototypeSet { modality, dim, classes })
}

fn check_width(z: &Matrix, labels: &[usize], protos: &PrototypeSet, op: &'static str) -> Result<()> {
    if z.rows() != labels.len() || z.cols() != protos.dim {
        return Err(Error::Dimension {
            op,
            left: z.shape(),
            right: (labels.len(), protos.dim),
        });
    }
    Ok(())
}

/// Softmax over `−d(z_row, c_j)` for every prototype class `j`, plus the
/// distances, for one row. Classes in ascending order.
fn distance_softmax(row: &[f64], protos: &PrototypeSet) -> (Vec<f64>, Vec<f64>) {
    let dists: Vec<f64> = protos.iter().map(|(_, p)| l2_distance(row, &p.centroid)).collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = dists.iter().map(|d| (min - d).exp()).collect();
    let total: f64 = exps.iter().sum();
    (dists, exps.into_iter().map(|e| e / total).collect())
}

fn class_position(protos: &PrototypeSet, class: usize) -> Result<usize> {
    protos.require(class)?;
    Ok(protos.classes.range(..class).count())
}

/// Modal-enhancement loss: mean over rows of
/// `−log softmax(−d(z, c_j))_y` against `protos`, and its gradient w.r.t. `z`.
///
/// At a zero distance the contribution of that prototype to the gradient is
/// zero (the subgradient at the norm's kink).
pub fn me_loss_and_grad(z: &Matrix, labels: &[usize], protos: &PrototypeSet) -> Result<(f64, Matrix)> {
    check_width(z, labels, protos, "me_loss")?;
    let batch = labels.len().max(1) as f64;
    let centroids: Vec<&Prototype> = protos.iter().map(|(_, p)| p).collect();
    let mut loss = 0.0;
    let mut dz = vec![0.0; z.len()];
    for (r, &y) in labels.iter().enumerate() {
        let pos = class_position(protos, y)?;
        let row = z.row(r);
        let (dists, probs) = distance_softmax(row, protos);
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let lse = -min + dists.iter().map(|d| (min - d).exp()).sum::<f64>().ln();
        loss += dists[pos] + lse;
        let out = &mut dz[r * z.cols()..(r + 1) * z.cols()];
        for (j, proto) in centroids.iter().enumerate() {
            let d = dists[j];
            if d == 0.0 {
                continue;
            }
            // ∂loss/∂d_j = 1[j = y] − p_j, ∂d_j/∂z = (z − c_j) / d_j
            let coef = ((if j == pos { 1.0 } else { 0.0 }) - probs[j]) / (d * batch);
            for ((o, zv), cv) in out.iter_mut().zip(row).zip(&proto.centroid) {
                *o += coef * (zv - cv);
            }
        }
    }
    Ok((loss / batch, Matrix::from_vec(z.rows(), z.cols(), dz)?))
}

/// Per-sample probability mass on the ground-truth class, with logits taken
/// as negative distances to `protos`.
pub fn gt_scores(z: &Matrix, labels: &[usize], protos: &PrototypeSet) -> Result<Vec<f64>> {
    check_width(z, labels, protos, "gt_scores")?;
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let pos = class_position(protos, y)?;
            let (_, probs) = distance_softmax(z.row(r), protos);
            Ok(probs[pos])
        })
        .collect()
}

/// `ρ_I^k = Σ s^A / Σ s^I` over one batch. Above 1 means A is ahead.
pub fn local_ratio(s_a: &[f64], s_i: &[f64]) -> Result<f64> {
    if s_a.is_empty() || s_a.len() != s_i.len() {
        return Err(Error::DegenerateBatch(format!(
            "score vectors must be non-empty and equal length ({} vs {})",
            s_a.len(),
            s_i.len()
        )));
    }
    let num: f64 = s_a.iter().sum();
    let den: f64 = s_i.iter().sum();
    if den < 1e-12 {
        return Err(Error::DegenerateBatch(format!("denominator sum {den} below 1e-12")));
    }
    Ok(num / den)
}

/// Modulation coefficients `(γ, β)`. `γ` boosts A when A lags (`ρ < 1`),
/// `β` boosts I when I lags (`ρ ≥ 1`).
pub fn coefficients(ratio: f64) -> Result<(f64, f64)> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::param(format!(
            "imbalance ratio must be positive and finite, got {ratio}"
        )));
    }
    if ratio < 1.0 {
        Ok(((1.0 / ratio - 1.0).clamp(0.0, 1.0), 0.0))
    } else {
        Ok((0.0, (ratio - 1.0).clamp(0.0, 1.0)))
    }
}

/// Coefficient applied to the ME term of `modality` for a client with
/// `ratio`: `γ` for A, `β` for I.
pub fn coefficient_for(ratio: f64, modality: Modality) -> Result<f64> {
    let (gamma, beta) = coefficients(ratio)?;
    Ok(match modality {
        Modality::A => gamma,
        Modality::I => beta,
    })
}

/// The modality a ratio designates as weak: I when `ρ > 1`, otherwise A.
pub fn weak_modality(ratio: f64) -> Modality {
    if ratio > 1.0 {
        Modality::I
    } else {
        Modality::A
    }
}

/// One client's imbalance report for a round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImbalanceReport {
    pub local_ratio: f64,
    pub sample_count: usize,
    pub gamma: f64,
    pub beta: f64,
}

impl ImbalanceReport {
    pub fn new(local_ratio: f64, sample_count: usize) -> Result<Self> {
        let (gamma, beta) = coefficients(local_ratio)?;
        Ok(ImbalanceReport {
            local_ratio,
            sample_count,
            gamma,
            beta,
        })
    }
}

/// Sample-count-weighted mean of local ratios.
pub fn global_ratio(reports: &[ImbalanceReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::param("global_ratio needs at least one report"));
    }
    if reports.iter().any(|r| r.sample_count == 0) {
        return Err(Error::param("report with zero samples"));
    }
    let total: f64 = reports.iter().map(|r| r.sample_count as f64).sum();
    Ok(reports
        .iter()
        .map(|r| r.local_ratio * r.sample_count as f64)
        .sum::<f64>()
        / total)
}

/// Per-row nearest prototype; ties go to the smallest class id.
pub fn nearest_prototype_classify(z: &Matrix, protos: &PrototypeSet) -> Result<Vec<usize>> {
    if protos.is_empty() {
        return Err(Error::param(
            "nearest_prototype_classify needs a non-empty prototype set",
        ));
    }
    if z.cols() != protos.dim {
        return Err(Error::Dimension {
            op: "nearest_prototype_classify",
            left: z.shape(),
            right: (1, protos.dim),
        });
    }
    Ok((0..z.rows())
        .map(|r| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (c, p) in protos.iter() {
                let d = l2_distance(z.row(r), &p.centroid);
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Purpose, RngStream};
    use proptest::prelude::*;

    fn set(modality: Modality, entries: &[(usize, &[f64], usize)]) -> PrototypeSet {
        let dim = entries[0].1.len();
        let mut s = PrototypeSet::empty(modality, dim);
        for &(c, v, n) in entries {
            s.insert(
                c,
                Prototype {
                    centroid: v.to_vec(),
                    count: n,
                },
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn local_prototype_cases() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let p = local_prototypes(&z, &[0, 0, 0], Modality::A).unwrap();
        assert_eq!(p.get(0).unwrap().centroid, vec![1.0, 2.0]);

        let z = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let p = local_prototypes(&z, &[0, 0], Modality::I).unwrap();
        assert_eq!(
            p.get(0).unwrap(),
            &Prototype {
                centroid: vec![1.0],
                count: 2
            }
        );

        let empty = local_prototypes(&Matrix::zeros(0, 3), &[], Modality::A).unwrap();
        assert!(empty.is_empty());
        assert!(local_prototypes(&Matrix::zeros(2, 1), &[0], Modality::A).is_err());
    }

    #[test]
    fn local_prototypes_match_accumulate_oracle() {
        let mut rng = RngStream::keyed(4, Purpose::Test, 0, 0);
        let z = rng.gaussian(30, 4, 0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..30).map(|k| (k * 7) % 5).collect();
        let p = local_prototypes(&z, &labels, Modality::A).unwrap();
        for c in 0..5 {
            let mut sum = [0.0; 4];
            let mut n = 0;
            for r in 0..30 {
                if labels[r] == c {
                    n += 1;
                    for k in 0..4 {
                        sum[k] += z.get(r, k);
                    }
                }
            }
            let proto = p.get(c).unwrap();
            assert_eq!(proto.count, n);
            for k in 0..4 {
                assert!((proto.centroid[k] - sum[k] / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_cases() {
        let single = set(Modality::A, &[(0, &[1.0, 2.0], 3)]);
        assert_eq!(aggregate_prototypes(&[&single]).unwrap(), single);

        let a = set(Modality::A, &[(0, &[0.0], 1)]);
        let b = set(Modality::A, &[(0, &[4.0], 3), (2, &[1.0], 1)]);
        let g = aggregate_prototypes(&[&a, &b]).unwrap();
        assert_eq!(g.get(0).unwrap().centroid, vec![3.0]);
        assert_eq!(g.get(0).unwrap().count, 4);
        assert!(g.get(1).is_none());
        assert_eq!(g.get(2).unwrap().centroid, vec![1.0]);

        let wide = set(Modality::A, &[(0, &[0.0, 1.0], 1)]);
        assert!(aggregate_prototypes(&[&a, &wide]).is_err());
    }

    #[test]
    fn aggregate_equals_pooled_mean() {
        let mut rng = RngStream::keyed(5, Purpose::Test, 0, 0);
        let mut pooled_z: Option<Matrix> = None;
        let mut pooled_y = Vec::new();
        let mut locals = Vec::new();
        for (k, n) in [7usize, 13, 4].into_iter().enumerate() {
            let z = rng.gaussian(n, 3, k as f64, 1.0).unwrap();
            let y: Vec<usize> = (0..n).map(|r| (r + k) % 4).collect();
            locals.push(local_prototypes(&z, &y, Modality::I).unwrap());
            pooled_z = Some(match pooled_z {
                None => z,
                Some(p) => p.vstack(&z).unwrap(),
            });
            pooled_y.extend(y);
        }
        let refs: Vec<&PrototypeSet> = locals.iter().collect();
        let agg = aggregate_prototypes(&refs).unwrap();
        let direct = local_prototypes(&pooled_z.unwrap(), &pooled_y, Modality::I).unwrap();
        for (c, p) in direct.iter() {
            let q = agg.get(c).unwrap();
            assert_eq!(q.count, p.count);
            for (x, y) in q.centroid.iter().zip(&p.centroid) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn me_loss_hand_values() {
        let protos = set(Modality::I, &[(0, &[0.0, 0.0], 1), (1, &[1.0, 0.0], 1)]);
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (loss, _) = me_loss_and_grad(&z, &[0], &protos).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.313262).abs() < 1e-6);

        let sym = set(
            Modality::I,
            &[
                (0, &[1.0, 0.0], 1),
                (1, &[-1.0, 0.0], 1),
                (2, &[0.0, 1.0], 1),
                (3, &[0.0, -1.0], 1),
            ],
        );
        let origin = Matrix::zeros(1, 2);
        let (loss, dz) = me_loss_and_grad(&origin, &[2], &sym).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        // per label the gradient is (z − c_y)/d − mean_j (z − c_j)/d = −c_y here
        assert!((dz.get(0, 0)).abs() < 1e-15 && (dz.get(0, 1) + 1.0).abs() < 1e-15);
        // averaged over labels it vanishes at the prototypes' centre
        let z4 = Matrix::zeros(4, 2);
        let (loss4, dz4) = me_loss_and_grad(&z4, &[0, 1, 2, 3], &sym).unwrap();
        assert!((loss4 - 4f64.ln()).abs() < 1e-12);
        assert!(dz4.col_sums().as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn me_loss_missing_prototype() {
        let protos = set(Modality::A, &[(0, &[0.0], 1)]);
        let z = Matrix::zeros(1, 1);
        assert!(matches!(
            me_loss_and_grad(&z, &[1], &protos),
            Err(Error::PrototypeCoverage {
                class: 1,
                modality: Modality::A
            })
        ));
    }

    fn random_protos(rng: &mut RngStream, classes: usize, dim: usize) -> PrototypeSet {
        let c = rng.gaussian(classes, dim, 0.0, 1.0).unwrap();
        let mut s = PrototypeSet::empty(Modality::I, dim);
        for k in 0..classes {
            s.insert(
                k,
                Prototype {
                    centroid: c.row(k).to_vec(),
                    count: 1,
                },
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn me_gradient_finite_differences() {
        let mut rng = RngStream::keyed(6, Purpose::Test, 0, 0);
        for _ in 0..10 {
            let protos = random_protos(&mut rng, 4, 3);
            let z = rng.gaussian(5, 3, 0.0, 1.0).unwrap();
            let labels = [0, 1, 2, 3, 1];
            let (_, dz) = me_loss_and_grad(&z, &labels, &protos).unwrap();
            let h = 1e-5;
            for r in 0..5 {
                for c in 0..3 {
                    let mut p = z.clone();
                    p.set(r, c, z.get(r, c) + h).unwrap();
                    let mut m = z.clone();
                    m.set(r, c, z.get(r, c) - h).unwrap();
                    let fd = (me_loss_and_grad(&p, &labels, &protos).unwrap().0
                        - me_loss_and_grad(&m, &labels, &protos).unwrap().0)
                        / (2.0 * h);
                    let an = dz.get(r, c);
                    assert!(
                        (fd - an).abs() / an.abs().max(1e-8) < 1e-5 || (fd - an).abs() < 1e-9,
                        "{fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn gt_score_cases() {
        let sym = set(Modality::A, &[(0, &[1.0], 1), (1, &[-1.0], 1)]);
        let s = gt_scores(&Matrix::zeros(1, 1), &[1], &sym).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);

        let far = set(Modality::A, &[(0, &[0.0], 1), (1, &[10.0], 1)]);
        let s = gt_scores(&Matrix::zeros(1, 1), &[0], &far).unwrap();
        assert!((s[0] - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-12);
        assert!((s[0] - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn gt_scores_match_scalar_oracle() {
        let mut rng = RngStream::keyed(7, Purpose::Test, 0, 0);
        let protos = random_protos(&mut rng, 3, 2);
        let z = rng.gaussian(20, 2, 0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..20).map(|k| k % 3).collect();
        let s = gt_scores(&z, &labels, &protos).unwrap();
        let mut oracle_mean = 0.0;
        for r in 0..20 {
            let d: Vec<f64> = (0..3)
                .map(|c| {
                    let p = &protos.get(c).unwrap().centroid;
                    ((z.get(r, 0) - p[0]).powi(2) + (z.get(r, 1) - p[1]).powi(2)).sqrt()
                })
                .collect();
            let denom: f64 = d.iter().map(|v| (-v).exp()).sum();
            oracle_mean += (-d[labels[r]]).exp() / denom;
        }
        oracle_mean /= 20.0;
        let mean = s.iter().sum::<f64>() / 20.0;
        assert!((mean - oracle_mean).abs() < 1e-12);
    }

    #[test]
    fn ratio_and_coefficients() {
        assert_eq!(local_ratio(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(local_ratio(&[1.0, 0.5], &[0.5, 0.25]).unwrap(), 2.0);
        assert!(matches!(local_ratio(&[1.0], &[0.0]), Err(Error::DegenerateBatch(_))));

        assert_eq!(coefficients(1.0).unwrap(), (0.0, 0.0));
        let (g, b) = coefficients(1.3).unwrap();
        assert_eq!(g, 0.0);
        assert!((b - 0.3).abs() < 1e-12);
        assert_eq!(coefficients(3.0).unwrap(), (0.0, 1.0));
        assert_eq!(coefficients(0.5).unwrap(), (1.0, 0.0));
        assert!(coefficients(0.0).is_err());
        assert!(coefficients(-2.0).is_err());
    }

    #[test]
    fn global_ratio_cases() {
        let r = |ratio, n| ImbalanceReport::new(ratio, n).unwrap();
        assert_eq!(global_ratio(&[r(1.7, 5)]).unwrap(), 1.7);
        assert!((global_ratio(&[r(2.0, 1), r(1.0, 3)]).unwrap() - 1.25).abs() < 1e-15);
        assert!((global_ratio(&[r(1.4, 2), r(1.4, 9), r(1.4, 1)]).unwrap() - 1.4).abs() < 1e-12);
        assert!(global_ratio(&[]).is_err());
        assert_eq!(weak_modality(1.25), Modality::I);
        assert_eq!(weak_modality(1.0), Modality::A);
    }

    #[test]
    fn nearest_prototype_cases() {
        let p = set(Modality::A, &[(0, &[-1.0], 1), (1, &[2.0], 1)]);
        assert_eq!(nearest_prototype_classify(&Matrix::zeros(1, 1), &p).unwrap(), vec![0]);

        let q = set(Modality::A, &[(1, &[1.0], 1), (3, &[5.0], 1), (4, &[-1.0], 1)]);
        let z = Matrix::from_rows(&[vec![5.0], vec![0.0]]).unwrap();
        assert_eq!(nearest_prototype_classify(&z, &q).unwrap(), vec![3, 1]);

        assert!(nearest_prototype_classify(&z, &PrototypeSet::empty(Modality::A, 1)).is_err());
    }

    proptest! {
        #[test]
        fn me_loss_translation_invariant(
            shift in proptest::collection::vec(-5.0f64..5.0, 3),
            seed in 0u64..1000,
        ) {
            let mut rng = RngStream::keyed(seed, Purpose::Test, 1, 0);
            let protos = random_protos(&mut rng, 4, 3);
            let z = rng.gaussian(6, 3, 0.0, 1.0).unwrap();
            let labels = [0, 1, 2, 3, 0, 2];
            let (l0, d0) = me_loss_and_grad(&z, &labels, &protos).unwrap();

            let row = Matrix::row_vector(&shift).unwrap();
            let z2 = z.add_row_broadcast(&row).unwrap();
            let mut p2 = PrototypeSet::empty(Modality::I, 3);
            for (c, p) in protos.iter() {
                let centroid = p.centroid.iter().zip(&shift).map(|(a, b)| a + b).collect();
                p2.insert(c, Prototype { centroid, count: 1 }).unwrap();
            }
            let (l1, d1) = me_loss_and_grad(&z2, &labels, &p2).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-10);
            for (a, b) in d0.as_slice().iter().zip(d1.as_slice()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn coefficients_bounded_and_swap(log_ratio in -5.0f64..5.0) {
            let rho = log_ratio.exp();
            let (g, b) = coefficients(rho).unwrap();
            prop_assert!((0.0..=1.0).contains(&g) && (0.0..=1.0).contains(&b));
            prop_assert!(g == 0.0 || b == 0.0);
            if rho != 1.0 {
                let (g2, b2) = coefficients(1.0 / rho).unwrap();
                prop_assert!((g - b2).abs() < 1e-9 && (b - g2).abs() < 1e-9);
            }
        }

        #[test]
        fn gt_scores_are_probabilities(seed in 0u64..1000) {
            let mut rng = RngStream::keyed(seed, Purpose::Test, 2, 0);
            let protos = random_protos(&mut rng, 5, 2);
            let z = rng.gaussian(4, 2, 0.0, 2.0).unwrap();
            for r in 0..4 {
                let mut total = 0.0;
                for c in 0..5 {
                    let s = gt_scores(&z.slice_rows(r, r + 1), &[c], &protos).unwrap()[0];
                    prop_assert!(s > 0.0 && s < 1.0);
                    total += s;
                }
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn nearest_prototype_invariant_under_monotone_transform(seed in 0u64..1000) {
            let mut rng = RngStream::keyed(seed, Purpose::Test, 3, 0);
            let protos = random_protos(&mut rng, 4, 3);
            let z = rng.gaussian(8, 3, 0.0, 1.5).unwrap();
            let direct = nearest_prototype_classify(&z, &protos).unwrap();
            // argmin of exp(2d)+d (strictly increasing in d)
            for r in 0..8 {
                let scores: Vec<f64> = protos
                    .iter()
                    .map(|(_, p)| {
                        let d = l2_distance(z.row(r), &p.centroid);
                        (2.0 * d).exp() + d
                    })
                    .collect();
                let mut best = 0;
                for (k, s) in scores.iter().enumerate() {
                    if *s < scores[best] {
                        best = k;
                    }
                }
                prop_assert_eq!(direct[r], best);
            }
        }
    }
}
