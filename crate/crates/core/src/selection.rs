//! Client and modality selection.
//!
//! The diversity objective is the facility-location cost
//! `G(S) = Σ_k min_{i∈S} dist[k][i]` over a matrix of pairwise gradient
//! distances. Greedy maximisation works on the surrogate
//! `Ḡ(S) = Σ_k (C_max − min_{i∈S} dist[k][i])` with `C_max` the largest
//! entry of the matrix, so `Ḡ(∅) = 0` and every marginal gain is
//! non-negative. Ties are always broken toward the smallest client id.

use std::collections::{BTreeMap, BTreeSet};

use crate::numkit::{l2_distance, Matrix, RngStream};
use crate::{Error, Modality, ModalityMask, Result};

/// Pairwise distances between the latest flattened gradients of all clients.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    dist: Matrix,
    /// Round in which each client's gradient was last refreshed.
    freshness: Vec<Option<usize>>,
    vectors: Vec<Option<Vec<f64>>>,
}

impl SimilarityMatrix {
    /// An `n × n` matrix with no gradients yet (all distances zero).
    pub fn new(n: usize) -> Self {
        SimilarityMatrix {
            dist: Matrix::zeros(n, n),
            freshness: vec![None; n],
            vectors: vec![None; n],
        }
    }

    /// Builds a matrix directly from distances. The input must be square,
    /// symmetric, non-negative and zero on the diagonal.
    pub fn from_distances(dist: Matrix) -> Result<Self> {
        let n = dist.rows();
        if dist.cols() != n {
            return Err(Error::Dimension {
                op: "similarity matrix",
                left: dist.shape(),
                right: (n, n),
            });
        }
        for r in 0..n {
            if dist.get(r, r) != 0.0 {
                return Err(Error::param("distance matrix diagonal must be zero"));
            }
            for c in 0..n {
                if dist.get(r, c) < 0.0 || dist.get(r, c) != dist.get(c, r) {
                    return Err(Error::param("distance matrix must be symmetric and non-negative"));
                }
            }
        }
        Ok(SimilarityMatrix {
            dist,
            freshness: vec![None; n],
            vectors: vec![None; n],
        })
    }

    pub fn n(&self) -> usize {
        self.dist.rows()
    }

    pub fn dist(&self) -> &Matrix {
        &self.dist
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.dist.get(r, c)
    }

    pub fn freshness(&self) -> &[Option<usize>] {
        &self.freshness
    }

    pub fn vector(&self, client: usize) -> Option<&[f64]> {
        self.vectors.get(client).and_then(|v| v.as_deref())
    }

    /// `C_max`, the largest entry.
    pub fn c_max(&self) -> f64 {
        self.dist.as_slice().iter().cloned().fold(0.0, f64::max)
    }
}

fn check_members(dist: &SimilarityMatrix, s: &BTreeSet<usize>) -> Result<()> {
    if let Some(&bad) = s.iter().find(|&&k| k >= dist.n()) {
        return Err(Error::param(format!("client {bad} outside universe of {}", dist.n())));
    }
    Ok(())
}

fn coverage_of(dist: &SimilarityMatrix, s: &BTreeSet<usize>, c_max: f64) -> Vec<f64> {
    (0..dist.n())
        .map(|k| s.iter().map(|&i| dist.get(k, i)).fold(c_max, f64::min))
        .collect()
}

/// `G(S) = Σ_k min_{i∈S} dist[k][i]`; the empty set costs `n · C_max`.
pub fn facility_location_value(dist: &SimilarityMatrix, s: &BTreeSet<usize>) -> Result<f64> {
    check_members(dist, s)?;
    Ok(coverage_of(dist, s, dist.c_max()).iter().sum())
}

/// The maximised surrogate `Ḡ(S) = n · C_max − G(S)`.
pub fn surrogate_value(dist: &SimilarityMatrix, s: &BTreeSet<usize>) -> Result<f64> {
    let c_max = dist.c_max();
    check_members(dist, s)?;
    Ok(coverage_of(dist, s, c_max).iter().map(|m| c_max - m).sum())
}

/// `Ḡ(S ∪ {v}) − Ḡ(S)`.
pub fn marginal_gain(dist: &SimilarityMatrix, s: &BTreeSet<usize>, candidate: usize) -> Result<f64> {
    if s.contains(&candidate) {
        return Err(Error::Usage(format!("candidate {candidate} already selected")));
    }
    check_members(dist, s)?;
    if candidate >= dist.n() {
        return Err(Error::param(format!(
            "client {candidate} outside universe of {}",
            dist.n()
        )));
    }
    let cover = coverage_of(dist, s, dist.c_max());
    Ok(gain_from_coverage(dist, &cover, candidate))
}

fn gain_from_coverage(dist: &SimilarityMatrix, cover: &[f64], candidate: usize) -> f64 {
    cover
        .iter()
        .enumerate()
        .map(|(k, &m)| (m - dist.get(k, candidate)).max(0.0))
        .sum()
}

/// Argmax of the gain over `pool`, smallest id on ties.
fn best_candidate(dist: &SimilarityMatrix, cover: &[f64], pool: impl IntoIterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for k in pool {
        let g = gain_from_coverage(dist, cover, k);
        match best {
            Some((bg, _)) if g <= bg => {}
            _ => best = Some((g, k)),
        }
    }
    best.map(|(_, k)| k)
}

fn absorb(dist: &SimilarityMatrix, cover: &mut [f64], chosen: usize) {
    for (k, m) in cover.iter_mut().enumerate() {
        *m = m.min(dist.get(k, chosen));
    }
}

/// Deterministic greedy maximisation of `Ḡ`. Returns the picks in order.
pub fn greedy(dist: &SimilarityMatrix, budget: usize) -> Result<Vec<usize>> {
    if budget > dist.n() {
        return Err(Error::param(format!("budget {budget} exceeds {} clients", dist.n())));
    }
    let mut cover = vec![dist.c_max(); dist.n()];
    let mut chosen = Vec::with_capacity(budget);
    let mut taken = vec![false; dist.n()];
    for _ in 0..budget {
        let k = best_candidate(dist, &cover, (0..dist.n()).filter(|&k| !taken[k])).expect("budget <= n");
        taken[k] = true;
        absorb(dist, &mut cover, k);
        chosen.push(k);
    }
    Ok(chosen)
}

/// Stochastic greedy: each step scans a random `s_sample`-subset of the
/// unselected clients (capped at all of them).
pub fn stochastic_greedy(
    dist: &SimilarityMatrix,
    budget: usize,
    s_sample: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    if budget > dist.n() {
        return Err(Error::param(format!("budget {budget} exceeds {} clients", dist.n())));
    }
    if s_sample == 0 {
        return Err(Error::param("s_sample must be >= 1"));
    }
    let mut cover = vec![dist.c_max(); dist.n()];
    let mut remaining: Vec<usize> = (0..dist.n()).collect();
    let mut chosen = Vec::with_capacity(budget);
    for _ in 0..budget {
        let pool = rng.subset(&remaining, s_sample.min(remaining.len()))?;
        let k = best_candidate(dist, &cover, pool).expect("pool is non-empty");
        remaining.retain(|&r| r != k);
        absorb(dist, &mut cover, k);
        chosen.push(k);
    }
    Ok(chosen)
}

/// The sets chosen for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionOutcome {
    /// Clients training with both modalities.
    pub s_m: BTreeSet<usize>,
    /// Clients training only the weak modality.
    pub s_uni: BTreeSet<usize>,
    pub weak_modality: Modality,
}

impl SelectionOutcome {
    pub fn len(&self) -> usize {
        self.s_m.len() + self.s_uni.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs of the dual-matrix selection beyond the two matrices.
#[derive(Debug, Clone)]
pub struct BmsParams<'a> {
    /// Latest local ratio `ρ_I^k` of every client that can report one.
    pub ratios: &'a BTreeMap<usize, f64>,
    pub global_ratio: f64,
    pub budget: usize,
    pub s_sample: usize,
    pub chi: f64,
    pub availability: &'a [ModalityMask],
}

/// Balanced modality selection with conflict resolution.
///
/// Every step draws one candidate pool from the unselected eligible clients,
/// picks `k1*` on `dist_multi` relative to `S_M` and `k2*` on `dist_enh`
/// relative to `S_M ∪ S_uni`. Agreement sends the client to `S_M`;
/// otherwise `k1*` joins `S_M` and `k2*` goes to `S_uni` when its
/// weak-direction ratio exceeds `chi`, else to `S_M`. If only one slot is
/// left, only `k1*` is added.
///
/// Clients missing a modality never enter `S_M`. A client holding only the
/// weak modality always lands in `S_uni`; a client holding only the strong
/// modality is not eligible at all.
pub fn bms_select(
    dist_multi: &SimilarityMatrix,
    dist_enh: &SimilarityMatrix,
    params: &BmsParams<'_>,
    rng: &mut RngStream,
) -> Result<SelectionOutcome> {
    let n = dist_multi.n();
    if dist_enh.n() != n || params.availability.len() != n {
        return Err(Error::Dimension {
            op: "bms_select universe",
            left: (n, n),
            right: (dist_enh.n(), params.availability.len()),
        });
    }
    if !(params.chi >= 1.0) {
        return Err(Error::param(format!("chi must be >= 1, got {}", params.chi)));
    }
    if params.s_sample == 0 {
        return Err(Error::param("s_sample must be >= 1"));
    }
    let weak = crate::balance::weak_modality(params.global_ratio);
    let eligible: Vec<usize> = (0..n).filter(|&k| params.availability[k].has(weak)).collect();
    if params.budget > eligible.len() {
        return Err(Error::InfeasibleSelection(format!(
            "budget {} exceeds {} clients able to train the weak modality {weak}",
            params.budget,
            eligible.len()
        )));
    }

    let weak_direction = |k: usize| -> Option<f64> {
        params.ratios.get(&k).map(|&r| match weak {
            Modality::I => r,
            Modality::A => 1.0 / r,
        })
    };

    let mut s_m = BTreeSet::new();
    let mut s_uni = BTreeSet::new();
    let mut cover_multi = vec![dist_multi.c_max(); n];
    let mut cover_enh = vec![dist_enh.c_max(); n];
    let mut remaining = eligible;

    while s_m.len() + s_uni.len() < params.budget {
        let slots = params.budget - s_m.len() - s_uni.len();
        let pool = rng.subset(&remaining, params.s_sample.min(remaining.len()))?;
        let k1 = best_candidate(
            dist_multi,
            &cover_multi,
            pool.iter().copied().filter(|&k| params.availability[k].is_complete()),
        );
        let k2 = best_candidate(dist_enh, &cover_enh, pool.iter().copied()).expect("pool is non-empty");

        let mut add = |k: usize, to_multi: bool, s_m: &mut BTreeSet<usize>, s_uni: &mut BTreeSet<usize>| {
            if to_multi {
                s_m.insert(k);
                absorb(dist_multi, &mut cover_multi, k);
            } else {
                s_uni.insert(k);
            }
            absorb(dist_enh, &mut cover_enh, k);
            remaining.retain(|&r| r != k);
        };

        let route_k2_multi =
            params.availability[k2].is_complete() && weak_direction(k2).is_none_or(|r| r <= params.chi);
        match k1 {
            Some(k1) if k1 == k2 => add(k1, true, &mut s_m, &mut s_uni),
            Some(k1) => {
                add(k1, true, &mut s_m, &mut s_uni);
                if slots >= 2 {
                    add(k2, route_k2_multi, &mut s_m, &mut s_uni);
                }
            }
            None => add(k2, route_k2_multi, &mut s_m, &mut s_uni),
        }
    }
    Ok(SelectionOutcome {
        s_m,
        s_uni,
        weak_modality: weak,
    })
}

/// Recomputes the rows and columns of the clients in `fresh` from their new
/// flattened gradients and stamps them with `round`.
pub fn update_similarity(dist: &mut SimilarityMatrix, fresh: &BTreeMap<usize, Vec<f64>>, round: usize) -> Result<()> {
    let n = dist.n();
    let width = dist
        .vectors
        .iter()
        .flatten()
        .map(Vec::len)
        .chain(fresh.values().map(Vec::len))
        .next();
    for (&k, v) in fresh {
        if k >= n {
            return Err(Error::param(format!("client {k} outside universe of {n}")));
        }
        if Some(v.len()) != width {
            return Err(Error::Dimension {
                op: "update_similarity",
                left: (1, width.unwrap_or(0)),
                right: (1, v.len()),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("update_similarity"));
        }
    }
    for (&k, v) in fresh {
        dist.vectors[k] = Some(v.clone());
        dist.freshness[k] = Some(round);
    }
    for &k in fresh.keys() {
        for j in 0..n {
            let d = match (&dist.vectors[k], &dist.vectors[j]) {
                (Some(a), Some(b)) if j != k => l2_distance(a, b),
                _ => 0.0,
            };
            dist.dist.set(k, j, d)?;
            dist.dist.set(j, k, d)?;
        }
    }
    Ok(())
}

/// Uniform random client subset.
pub fn baseline_random(universe: &[usize], budget: usize, rng: &mut RngStream) -> Result<BTreeSet<usize>> {
    Ok(rng.subset(universe, budget)?.into_iter().collect())
}

/// Power-of-choice: draw a pool of `d_pool` clients, keep the `budget` with
/// the largest loss.
pub fn baseline_powd(
    candidate_losses: &BTreeMap<usize, f64>,
    d_pool: usize,
    budget: usize,
    rng: &mut RngStream,
) -> Result<BTreeSet<usize>> {
    if budget > d_pool {
        return Err(Error::param(format!("pow-d budget {budget} exceeds pool {d_pool}")));
    }
    let universe: Vec<usize> = candidate_losses.keys().copied().collect();
    let pool = rng.subset(&universe, d_pool)?;
    Ok(top_by_loss(&pool, candidate_losses, budget))
}

fn top_by_loss(pool: &[usize], losses: &BTreeMap<usize, f64>, budget: usize) -> BTreeSet<usize> {
    let mut ranked: Vec<(f64, usize)> = pool.iter().map(|&k| (losses[&k], k)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(budget).map(|(_, k)| k).collect()
}

/// DivFL: stochastic greedy on the multi-modal matrix alone.
pub fn baseline_divfl(
    dist_multi: &SimilarityMatrix,
    budget: usize,
    s_sample: usize,
    rng: &mut RngStream,
) -> Result<BTreeSet<usize>> {
    Ok(stochastic_greedy(dist_multi, budget, s_sample, rng)?
        .into_iter()
        .collect())
}

/// Independently per client, with probability `drop_prob` drop one
/// modality chosen uniformly.
pub fn baseline_modality_drop(
    selected: &BTreeSet<usize>,
    drop_prob: f64,
    rng: &mut RngStream,
) -> Result<BTreeMap<usize, ModalityMask>> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::param(format!(
            "drop probability must be in [0,1], got {drop_prob}"
        )));
    }
    Ok(selected
        .iter()
        .map(|&k| {
            let mask = if rng.bernoulli(drop_prob) {
                let keep = if rng.bernoulli(0.5) { Modality::A } else { Modality::I };
                ModalityMask::only(keep)
            } else {
                ModalityMask::BOTH
            };
            (k, mask)
        })
        .collect())
}
