//! Synthetic bimodal data and client partitioning.
//!
//! Class `j` of modality `m` is centred at `√2 · scale · e_j` in that
//! modality's feature space (pairwise distance `2·scale`) with isotropic
//! Gaussian noise of std `1/snr_m`. A larger snr makes a modality dominant.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::numkit::{Matrix, RngStream};
use crate::{Error, Modality, ModalityMask, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BimodalDataset {
    pub x_a: Matrix,
    pub x_i: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl BimodalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::A => &self.x_a,
            Modality::I => &self.x_i,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> BimodalDataset {
        BimodalDataset {
            x_a: self.x_a.select_rows(indices),
            x_i: self.x_i.select_rows(indices),
            labels: indices.iter().map(|&k| self.labels[k]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Writes the `BMSD` little-endian binary format.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            FORMAT_VERSION,
            self.len() as u32,
            self.x_a.cols() as u32,
            self.x_i.cols() as u32,
            self.num_classes as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.x_a.as_slice().iter().chain(self.x_i.as_slice()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for &y in &self.labels {
            w.write_all(&(y as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut u32s = [0u32; 5];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, n, d_a, d_i, classes] = u32s.map(|v| v as usize);
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let x_a = Matrix::from_vec(n, d_a, read_f64s(n * d_a)?)?;
        let x_i = Matrix::from_vec(n, d_i, read_f64s(n * d_i)?)?;
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let labels: Vec<usize> = buf
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Label {
                label: bad,
                num_classes: classes,
            });
        }
        Ok(BimodalDataset {
            x_a,
            x_i,
            labels,
            num_classes: classes,
        })
    }
}

const MAGIC: &[u8; 4] = b"BMSD";
const FORMAT_VERSION: u32 = 1;

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim_a: usize,
    pub dim_i: usize,
    pub snr_a: f64,
    pub snr_i: f64,
    pub scale: f64,
}

fn class_means(spec: &DataSpec, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(spec.num_classes, dim);
    for j in 0..spec.num_classes {
        m.set(j, j, std::f64::consts::SQRT_2 * spec.scale).expect("finite");
    }
    m
}

fn noise_std(snr: f64) -> f64 {
    if snr.is_infinite() {
        0.0
    } else {
        1.0 / snr
    }
}

/// Draws `per_class` samples of every class, ordered by class.
pub fn generate(spec: &DataSpec, rng: &mut RngStream) -> Result<BimodalDataset> {
    if spec.num_classes < 2 {
        return Err(Error::param(format!(
            "need at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    for (name, snr) in [("snr_a", spec.snr_a), ("snr_i", spec.snr_i)] {
        if !(snr > 0.0) {
            return Err(Error::param(format!(
                "{name} must be > 0 (use inf for noiseless), got {snr}"
            )));
        }
    }
    if spec.dim_a < spec.num_classes || spec.dim_i < spec.num_classes {
        return Err(Error::param(format!(
            "feature dims ({}, {}) must be at least the class count {}",
            spec.dim_a, spec.dim_i, spec.num_classes
        )));
    }
    let n = spec.num_classes * spec.per_class;
    let labels: Vec<usize> = (0..n).map(|k| k / spec.per_class.max(1)).collect();
    let mut draw = |dim: usize, snr: f64| -> Result<Matrix> {
        let means = class_means(spec, dim);
        let noise = rng.gaussian(n, dim, 0.0, noise_std(snr))?;
        let centres = means.select_rows(&labels);
        centres.add(&noise)
    };
    let x_a = draw(spec.dim_a, spec.snr_a)?;
    let x_i = draw(spec.dim_i, spec.snr_i)?;
    Ok(BimodalDataset {
        x_a,
        x_i,
        labels,
        num_classes: spec.num_classes,
    })
}

/// Which samples and modalities each client holds.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignment: Vec<Vec<usize>>,
    /// `None` for an IID split.
    pub alpha: Option<f64>,
    pub masks: Vec<ModalityMask>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }
}

/// Random permutation split into shards whose sizes differ by at most one.
pub fn partition_iid(n_samples: usize, n_clients: usize, rng: &mut RngStream) -> Result<PartitionPlan> {
    if n_clients == 0 || n_clients > n_samples {
        return Err(Error::PartitionInfeasible(format!(
            "cannot split {n_samples} samples over {n_clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    rng.shuffle(&mut order);
    let base = n_samples / n_clients;
    let extra = n_samples % n_clients;
    let mut assignment = Vec::with_capacity(n_clients);
    let mut start = 0;
    for k in 0..n_clients {
        let size = base + usize::from(k < extra);
        let mut shard = order[start..start + size].to_vec();
        shard.sort_unstable();
        assignment.push(shard);
        start += size;
    }
    Ok(PartitionPlan {
        assignment,
        alpha: None,
        masks: vec![ModalityMask::BOTH; n_clients],
    })
}

const DIRICHLET_RETRIES: usize = 100;

/// Per-class Dirichlet(α) split. Draws leaving any client empty are redrawn.
pub fn partition_dirichlet(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<PartitionPlan> {
    if !(alpha > 0.0) {
        return Err(Error::param(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    if n_clients == 0 || n_clients > labels.len() {
        return Err(Error::PartitionInfeasible(format!(
            "cannot split {} samples over {n_clients} clients",
            labels.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(k);
    }
    for _ in 0..DIRICHLET_RETRIES {
        let mut assignment = vec![Vec::new(); n_clients];
        for members in by_class.values() {
            let mut members = members.clone();
            rng.shuffle(&mut members);
            let props = rng.dirichlet(alpha, n_clients)?;
            let mut cum = 0.0;
            let mut start = 0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == n_clients {
                    members.len()
                } else {
                    ((cum * members.len() as f64).round() as usize).clamp(start, members.len())
                };
                assignment[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if assignment.iter().all(|a| !a.is_empty()) {
            for a in &mut assignment {
                a.sort_unstable();
            }
            return Ok(PartitionPlan {
                assignment,
                alpha: Some(alpha),
                masks: vec![ModalityMask::BOTH; n_clients],
            });
        }
    }
    Err(Error::PartitionInfeasible(format!(
        "every one of {DIRICHLET_RETRIES} Dirichlet draws (alpha={alpha}) left a client empty"
    )))
}

/// Gives `⌊fraction · N⌋` random clients a single modality, A or I with
/// equal probability.
pub fn apply_incongruity(mut plan: PartitionPlan, fraction_uni: f64, rng: &mut RngStream) -> Result<PartitionPlan> {
    if !(0.0..=1.0).contains(&fraction_uni) {
        return Err(Error::param(format!(
            "fraction_uni must be in [0,1], got {fraction_uni}"
        )));
    }
    let n = plan.num_clients();
    let count = (fraction_uni * n as f64).floor() as usize;
    let clients: Vec<usize> = (0..n).collect();
    let chosen = rng.subset(&clients, count)?;
    plan.masks = vec![ModalityMask::BOTH; n];
    for k in chosen {
        let keep = if rng.bernoulli(0.5) { Modality::A } else { Modality::I };
        plan.masks[k] = ModalityMask::only(keep);
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Purpose;

    fn spec() -> DataSpec {
        DataSpec {
            num_classes: 3,
            per_class: 4,
            dim_a: 4,
            dim_i: 5,
            snr_a: 4.0,
            snr_i: 1.0,
            scale: 1.0,
        }
    }

    #[test]
    fn noiseless_samples_sit_on_means() {
        let s = DataSpec {
            snr_a: f64::INFINITY,
            snr_i: f64::INFINITY,
            ..spec()
        };
        let d = generate(&s, &mut RngStream::keyed(1, Purpose::TrainData, 0, 0)).unwrap();
        for r in 0..d.len() {
            let y = d.labels[r];
            for c in 0..4 {
                let expect = if c == y { std::f64::consts::SQRT_2 } else { 0.0 };
                assert_eq!(d.x_a.get(r, c), expect);
            }
        }
        // pairwise class distance is 2·scale
        let diff = crate::numkit::l2_distance(d.x_i.row(0), d.x_i.row(4));
        assert!((diff - 2.0).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_and_validated() {
        let a = generate(&spec(), &mut RngStream::keyed(3, Purpose::TrainData, 0, 0)).unwrap();
        let b = generate(&spec(), &mut RngStream::keyed(3, Purpose::TrainData, 0, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        let bad = DataSpec {
            num_classes: 1,
            ..spec()
        };
        assert!(generate(&bad, &mut RngStream::keyed(3, Purpose::TrainData, 0, 0)).is_err());
        let bad = DataSpec { snr_i: 0.0, ..spec() };
        assert!(generate(&bad, &mut RngStream::keyed(3, Purpose::TrainData, 0, 0)).is_err());
    }

    #[test]
    fn binary_roundtrip_and_header() {
        let d = generate(&spec(), &mut RngStream::keyed(3, Purpose::TrainData, 0, 0)).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"BMSD");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 12);
        assert_eq!(buf.len(), 24 + 12 * (4 + 5) * 8 + 12 * 4);
        assert_eq!(BimodalDataset::read_from(&buf[..]).unwrap(), d);

        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(matches!(BimodalDataset::read_from(&corrupt[..]), Err(Error::Format(_))));
        assert!(BimodalDataset::read_from(&buf[..buf.len() - 1]).is_err());
    }

    fn assert_disjoint_cover(plan: &PartitionPlan, n: usize) {
        let mut seen = vec![false; n];
        for shard in &plan.assignment {
            assert!(!shard.is_empty());
            for &k in shard {
                assert!(!seen[k], "index {k} assigned twice");
                seen[k] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn iid_shards() {
        let mut rng = RngStream::keyed(1, Purpose::Partition, 0, 0);
        let p = partition_iid(10, 2, &mut rng).unwrap();
        assert_eq!(p.assignment[0].len(), 5);
        assert_eq!(p.assignment[1].len(), 5);
        assert_disjoint_cover(&p, 10);
        let q = partition_iid(23, 5, &mut rng).unwrap();
        let sizes: Vec<usize> = q.assignment.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_disjoint_cover(&q, 23);
        assert!(partition_iid(3, 4, &mut rng).is_err());
    }

    #[test]
    fn iid_class_frequencies_track_global() {
        let n = 20_000;
        let labels: Vec<usize> = (0..n).map(|k| k % 4).collect();
        let p = partition_iid(n, 4, &mut RngStream::keyed(2, Purpose::Partition, 0, 0)).unwrap();
        for shard in &p.assignment {
            let m = shard.len() as f64;
            for c in 0..4 {
                let count = shard.iter().filter(|&&k| labels[k] == c).count() as f64;
                let sd = (m * 0.25 * 0.75).sqrt();
                assert!((count - m * 0.25).abs() < 5.0 * sd);
            }
        }
    }

    #[test]
    fn dirichlet_conserves_and_covers() {
        let labels: Vec<usize> = (0..300).map(|k| k % 6).collect();
        let p = partition_dirichlet(&labels, 10, 0.5, &mut RngStream::keyed(4, Purpose::Partition, 0, 0)).unwrap();
        assert_disjoint_cover(&p, 300);
        for c in 0..6 {
            let total: usize = p
                .assignment
                .iter()
                .map(|s| s.iter().filter(|&&k| labels[k] == c).count())
                .sum();
            assert_eq!(total, 50);
        }
    }

    #[test]
    fn dirichlet_large_alpha_is_near_uniform() {
        let labels: Vec<usize> = (0..6000).map(|k| k % 3).collect();
        let p = partition_dirichlet(&labels, 5, 1e6, &mut RngStream::keyed(5, Purpose::Partition, 0, 0)).unwrap();
        for shard in &p.assignment {
            for c in 0..3 {
                let share = shard.iter().filter(|&&k| labels[k] == c).count() as f64 / 2000.0;
                assert!((share - 0.2).abs() < 0.02, "{share}");
            }
        }
    }

    #[test]
    fn dirichlet_golden_assignment() {
        let labels: Vec<usize> = (0..12).map(|k| k % 3).collect();
        let p = partition_dirichlet(&labels, 3, 1.0, &mut RngStream::keyed(77, Purpose::Partition, 0, 0)).unwrap();
        let golden: Vec<Vec<usize>> = vec![vec![2, 3, 4, 6, 7], vec![1, 5, 8, 9, 10, 11], vec![0]];
        assert_eq!(p.assignment, golden);
        let again = partition_dirichlet(&labels, 3, 1.0, &mut RngStream::keyed(77, Purpose::Partition, 0, 0)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn dirichlet_infeasible() {
        // three samples over three clients with a near-degenerate alpha
        let labels = vec![0, 0, 0];
        let res = partition_dirichlet(&labels, 3, 1e-3, &mut RngStream::keyed(6, Purpose::Partition, 0, 0));
        assert!(matches!(res, Err(Error::PartitionInfeasible(_))));
        assert!(partition_dirichlet(&labels, 2, 0.0, &mut RngStream::keyed(6, Purpose::Partition, 0, 0)).is_err());
    }

    #[test]
    fn incongruity_counts() {
        let mut rng = RngStream::keyed(8, Purpose::Incongruity, 0, 0);
        let base = partition_iid(100, 20, &mut rng).unwrap();
        let p0 = apply_incongruity(base.clone(), 0.0, &mut rng).unwrap();
        assert!(p0.masks.iter().all(ModalityMask::is_complete));
        let p5 = apply_incongruity(base.clone(), 0.5, &mut rng).unwrap();
        assert_eq!(p5.masks.iter().filter(|m| !m.is_complete()).count(), 10);
        let small = partition_iid(8, 4, &mut rng).unwrap();
        let a = apply_incongruity(small.clone(), 1.0, &mut RngStream::keyed(9, Purpose::Incongruity, 0, 0)).unwrap();
        let b = apply_incongruity(small, 1.0, &mut RngStream::keyed(9, Purpose::Incongruity, 0, 0)).unwrap();
        assert_eq!(a.masks.iter().filter(|m| !m.is_complete()).count(), 4);
        assert_eq!(a, b);
        assert!(apply_incongruity(base, 1.2, &mut rng).is_err());
    }
}
