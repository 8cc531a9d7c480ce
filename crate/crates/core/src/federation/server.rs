use std::collections::BTreeMap;

use rayon::prelude::*;

use super::client::{client_loss, local_train, Client, LocalConfig, LocalUpdate, MeMode, Role, UniEnhancement};
use super::{FederationConfig, Method, RoundMetrics};
use crate::balance::{
    aggregate_prototypes, coefficient_for, global_ratio, nearest_prototype_classify, weak_modality, ModalPrototypes,
};
use crate::data::BimodalDataset;
use crate::model::{forward_multi, forward_uni, Group, GroupMask, GroupedParams, ModelParams};
use crate::numkit::{Purpose, RngStream};
use crate::selection::{
    baseline_divfl, baseline_modality_drop, baseline_powd, baseline_random, bms_select, update_similarity, BmsParams,
    SimilarityMatrix,
};
use crate::{Error, Modality, Result};

/// Everything the server keeps between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_model: ModelParams,
    pub global_protos: ModalPrototypes,
    pub global_ratio: f64,
    pub dist_multi: SimilarityMatrix,
    /// Enhancement matrix over the A encoder and its fusion block.
    pub dist_enh_a: SimilarityMatrix,
    /// Enhancement matrix over the I encoder and its fusion block.
    pub dist_enh_i: SimilarityMatrix,
    /// Latest reported local ratio per client.
    pub client_ratios: BTreeMap<usize, f64>,
    /// Rounds completed so far; 0 before the bootstrap round.
    pub round: usize,
}

impl ServerState {
    pub fn new(global_model: ModelParams, n_clients: usize) -> Self {
        let dim = global_model.embedding_dim();
        ServerState {
            global_model,
            global_protos: ModalPrototypes::empty(dim),
            global_ratio: 1.0,
            dist_multi: SimilarityMatrix::new(n_clients),
            dist_enh_a: SimilarityMatrix::new(n_clients),
            dist_enh_i: SimilarityMatrix::new(n_clients),
            client_ratios: BTreeMap::new(),
            round: 0,
        }
    }

    pub fn weak_modality(&self) -> Modality {
        weak_modality(self.global_ratio)
    }

    /// The enhancement matrix of `modality`.
    pub fn dist_enh(&self, modality: Modality) -> &SimilarityMatrix {
        match modality {
            Modality::A => &self.dist_enh_a,
            Modality::I => &self.dist_enh_i,
        }
    }
}

/// Top-1 accuracies on a held-out set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracies {
    pub multi: f64,
    pub uni_a: f64,
    pub uni_i: f64,
}

fn argmax_rows(logits: &crate::numkit::Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Multi-modal accuracy from the fused logits, uni-modal accuracy from the
/// nearest global prototype of each modality's embedding.
pub fn evaluate(model: &ModelParams, protos: &ModalPrototypes, test: &BimodalDataset) -> Result<Accuracies> {
    if test.is_empty() {
        return Err(Error::param("evaluation needs a non-empty test set"));
    }
    let fused = forward_multi(model, &test.x_a, &test.x_i)?;
    let multi = accuracy(&argmax_rows(&fused.logits), &test.labels);
    let mut uni = [0.0; 2];
    for (slot, m) in [Modality::A, Modality::I].into_iter().enumerate() {
        let f = forward_uni(model, test.features(m), m)?;
        let z = f.embedding(m).expect("uni forward yields its embedding");
        uni[slot] = accuracy(&nearest_prototype_classify(z, protos.get(m))?, &test.labels);
    }
    Ok(Accuracies {
        multi,
        uni_a: uni[0],
        uni_i: uni[1],
    })
}

/// Per parameter group, the sample-weighted mean over the uploads holding
/// that group. Groups nobody uploaded keep their value in `global`.
pub fn aggregate_models(global: &ModelParams, uploads: &[(&GroupedParams, usize)]) -> Result<ModelParams> {
    let mut out = global.clone();
    for group in Group::ALL {
        let single = GroupMask::NONE.with(group);
        let contributors: Vec<(GroupedParams, usize)> = uploads
            .iter()
            .filter(|(p, n)| p.mask().contains(group) && *n > 0)
            .map(|(p, n)| ((*p).clone().restrict(single), *n))
            .collect();
        if contributors.is_empty() {
            continue;
        }
        let total: f64 = contributors.iter().map(|(_, n)| *n as f64).sum();
        let mut acc = GroupedParams::zeros_like(global, single);
        for (p, n) in &contributors {
            acc = acc.axpy(*n as f64 / total, p)?;
        }
        out.assign_groups(&acc)?;
    }
    Ok(out)
}

fn lr_for_round(cfg: &FederationConfig, round: usize) -> f64 {
    if cfg.lr_decay_round > 0 && round >= cfg.lr_decay_round {
        cfg.lr * super::LR_DECAY_FACTOR
    } else {
        cfg.lr
    }
}

#[allow(clippy::too_many_arguments)]
fn train_all(
    server: &ServerState,
    clients: &[Client],
    plan: &[(usize, Role)],
    me: MeMode<'_>,
    enhancement: Option<UniEnhancement>,
    local: &LocalConfig,
    seed: u64,
    round: usize,
) -> Result<Vec<LocalUpdate>> {
    plan.par_iter()
        .map(|&(k, role)| {
            let mut rng = RngStream::keyed(seed, Purpose::LocalTrain, k as u64, round as u64);
            local_train(
                &clients[k],
                &server.global_model,
                role,
                me,
                enhancement,
                local,
                &mut rng,
            )
        })
        .collect()
}

/// Folds one round of uploads into the prototypes, the ratio and
/// (optionally) the similarity matrices. The model is left alone.
fn absorb_side_information(
    server: &mut ServerState,
    updates: &[LocalUpdate],
    clients: &[Client],
    refresh: bool,
    round: usize,
) -> Result<()> {
    for m in [Modality::A, Modality::I] {
        let sets: Vec<_> = updates
            .iter()
            .filter(|u| u.role.trains(m))
            .map(|u| u.protos.get(m))
            .filter(|s| !s.is_empty())
            .collect();
        if !sets.is_empty() {
            let fresh = aggregate_prototypes(&sets)?;
            server.global_protos.get_mut(m).refresh_from(&fresh)?;
        }
    }

    let reports: Vec<_> = updates.iter().filter_map(|u| u.report).collect();
    if !reports.is_empty() {
        server.global_ratio = global_ratio(&reports)?;
    }
    for u in updates {
        if let Some(r) = u.report {
            server.client_ratios.insert(u.client, r.local_ratio);
        }
    }

    if refresh {
        let model = &server.global_model;
        let mut multi = BTreeMap::new();
        let mut enh_a = BTreeMap::new();
        let mut enh_i = BTreeMap::new();
        for u in updates {
            if u.role == Role::Multi || !clients[u.client].mask().is_complete() {
                multi.insert(u.client, u.delta.flatten_like(model, GroupMask::ALL));
            }
            if u.role.trains(Modality::A) {
                enh_a.insert(u.client, u.delta.flatten_like(model, GroupMask::modality(Modality::A)));
            }
            if u.role.trains(Modality::I) {
                enh_i.insert(u.client, u.delta.flatten_like(model, GroupMask::modality(Modality::I)));
            }
        }
        update_similarity(&mut server.dist_multi, &multi, round)?;
        update_similarity(&mut server.dist_enh_a, &enh_a, round)?;
        update_similarity(&mut server.dist_enh_i, &enh_i, round)?;
    }
    Ok(())
}

fn natural_role(client: &Client) -> Role {
    match client.mask().single() {
        Some(m) => Role::Uni(m),
        None => Role::Multi,
    }
}

fn mean_loss(updates: &[LocalUpdate]) -> f64 {
    if updates.is_empty() {
        return 0.0;
    }
    updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64
}

fn metrics(
    round: usize,
    acc: Accuracies,
    server: &ServerState,
    plan: &[(usize, Role)],
    updates: &[LocalUpdate],
) -> RoundMetrics {
    let n_multi = plan.iter().filter(|(_, r)| *r == Role::Multi).count();
    RoundMetrics {
        round,
        acc_multi: acc.multi,
        acc_uni_a: acc.uni_a,
        acc_uni_i: acc.uni_i,
        global_ratio: server.global_ratio,
        n_multi,
        n_uni: plan.len() - n_multi,
        train_loss: mean_loss(updates),
    }
}

/// Round 1: every client trains one epoch from the broadcast model (with ME
/// against its own prototypes when the method uses ME). The server builds
/// the similarity matrices, global prototypes and global ratio; the global
/// model is not updated.
pub fn bootstrap_round(
    server: &mut ServerState,
    clients: &[Client],
    cfg: &FederationConfig,
    test: &BimodalDataset,
) -> Result<RoundMetrics> {
    if server.round != 0 {
        return Err(Error::Usage(format!("bootstrap after round {}", server.round)));
    }
    if let Some(c) = clients.iter().find(|c| c.n_samples() == 0) {
        return Err(Error::Config(format!("client {} has no samples", c.id)));
    }
    let round = 1;
    let plan: Vec<(usize, Role)> = clients.iter().map(|c| (c.id, natural_role(c))).collect();
    let local = LocalConfig {
        epochs: 1,
        lr: lr_for_round(cfg, round),
        batch_size: cfg.batch_size,
    };
    let me = if cfg.method.uses_me() {
        MeMode::Local
    } else {
        MeMode::Off
    };
    let updates = train_all(server, clients, &plan, me, None, &local, cfg.seed, round)?;
    absorb_side_information(server, &updates, clients, cfg.method.uses_matrices(), round)?;
    server.round = round;
    let acc = evaluate(&server.global_model, &server.global_protos, test)?;
    Ok(metrics(round, acc, server, &plan, &updates))
}

/// Chooses who trains what this round.
pub fn plan_round(
    server: &ServerState,
    clients: &[Client],
    cfg: &FederationConfig,
    round: usize,
) -> Result<Vec<(usize, Role)>> {
    let n = clients.len();
    if cfg.budget > n {
        return Err(Error::param(format!("budget {} exceeds {n} clients", cfg.budget)));
    }
    let universe: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::keyed(cfg.seed, Purpose::Selection, 0, round as u64);
    let natural =
        |set: std::collections::BTreeSet<usize>| set.into_iter().map(|k| (k, natural_role(&clients[k]))).collect();
    Ok(match cfg.method {
        Method::BmsFed => {
            let availability: Vec<_> = clients.iter().map(Client::mask).collect();
            let weak = server.weak_modality();
            let outcome = bms_select(
                &server.dist_multi,
                server.dist_enh(weak),
                &BmsParams {
                    ratios: &server.client_ratios,
                    global_ratio: server.global_ratio,
                    budget: cfg.budget,
                    s_sample: cfg.s_sample,
                    chi: cfg.chi,
                    availability: &availability,
                },
                &mut rng,
            )?;
            let mut plan: Vec<(usize, Role)> = outcome.s_m.iter().map(|&k| (k, Role::Multi)).collect();
            plan.extend(outcome.s_uni.iter().map(|&k| (k, Role::Uni(weak))));
            plan.sort_unstable_by_key(|(k, _)| *k);
            plan
        }
        Method::FedAvg => natural(baseline_random(&universe, cfg.budget, &mut rng)?),
        Method::FedAvgDrop => {
            let chosen = baseline_random(&universe, cfg.budget, &mut rng)?;
            let mut drop_rng = RngStream::keyed(cfg.seed, Purpose::ModalityDrop, 0, round as u64);
            let kept = baseline_modality_drop(&chosen, cfg.drop_prob, &mut drop_rng)?;
            kept.into_iter()
                .map(|(k, keep)| {
                    let has = clients[k].mask();
                    let role = match (has.single(), keep.single()) {
                        (Some(m), _) => Role::Uni(m),
                        (None, Some(m)) => Role::Uni(m),
                        (None, None) => Role::Multi,
                    };
                    (k, role)
                })
                .collect()
        }
        Method::PowD => {
            let losses: Vec<f64> = clients
                .par_iter()
                .map(|c| client_loss(&server.global_model, c))
                .collect::<Result<_>>()?;
            let losses: BTreeMap<usize, f64> = losses.into_iter().enumerate().collect();
            let d_pool = n.div_ceil(2).max(cfg.budget);
            natural(baseline_powd(&losses, d_pool, cfg.budget, &mut rng)?)
        }
        Method::DivFl => natural(baseline_divfl(&server.dist_multi, cfg.budget, cfg.s_sample, &mut rng)?),
    })
}

/// One round after the bootstrap: select, train, aggregate, evaluate.
pub fn run_round(
    server: &mut ServerState,
    clients: &[Client],
    cfg: &FederationConfig,
    test: &BimodalDataset,
) -> Result<RoundMetrics> {
    if server.round == 0 {
        return Err(Error::Usage("run_round before the bootstrap round".into()));
    }
    let round = server.round + 1;
    let plan = plan_round(server, clients, cfg, round)?;
    let local = LocalConfig {
        epochs: cfg.local_epochs,
        lr: lr_for_round(cfg, round),
        batch_size: cfg.batch_size,
    };
    let (me, enhancement) = if cfg.method.uses_me() {
        let weak = server.weak_modality();
        let enh = UniEnhancement {
            weak,
            fallback_coefficient: coefficient_for(server.global_ratio, weak)?,
        };
        (MeMode::Global(&server.global_protos), Some(enh))
    } else {
        (MeMode::Off, None)
    };
    let updates = train_all(server, clients, &plan, me, enhancement, &local, cfg.seed, round)?;

    let uploads: Vec<(&GroupedParams, usize)> = updates.iter().map(|u| (&u.params, u.n_samples)).collect();
    let model = aggregate_models(&server.global_model, &uploads)?;
    absorb_side_information(server, &updates, clients, cfg.method.uses_matrices(), round)?;
    server.global_model = model;
    server.round = round;
    let acc = evaluate(&server.global_model, &server.global_protos, test)?;
    Ok(metrics(round, acc, server, &plan, &updates))
}
