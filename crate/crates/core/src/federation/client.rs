use crate::balance::{
    coefficient_for, coefficients, gt_scores, local_prototypes, local_ratio, me_loss_and_grad, ImbalanceReport,
    ModalPrototypes, PrototypeSet,
};
use crate::data::BimodalDataset;
use crate::model::{
    backward_with_embeddings, ce_loss_and_grad, forward_multi, forward_uni, sgd_step, GradientVector, GroupMask,
    GroupedParams, ModelParams, Path,
};
use crate::numkit::{Matrix, RngStream};
use crate::{Error, Modality, ModalityMask, Result};

/// One client's private shard.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub x_a: Option<Matrix>,
    pub x_i: Option<Matrix>,
    pub labels: Vec<usize>,
}

impl Client {
    /// Takes the rows `indices` of `data`, keeping only the modalities in `mask`.
    pub fn from_dataset(id: usize, data: &BimodalDataset, indices: &[usize], mask: ModalityMask) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config(format!("client {id} has no samples")));
        }
        if !mask.a && !mask.i {
            return Err(Error::Config(format!("client {id} holds no modality")));
        }
        let shard = data.subset(indices);
        Ok(Client {
            id,
            x_a: mask.a.then_some(shard.x_a),
            x_i: mask.i.then_some(shard.x_i),
            labels: shard.labels,
        })
    }

    pub fn mask(&self) -> ModalityMask {
        ModalityMask {
            a: self.x_a.is_some(),
            i: self.x_i.is_some(),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn features(&self, modality: Modality) -> Result<&Matrix> {
        match modality {
            Modality::A => self.x_a.as_ref(),
            Modality::I => self.x_i.as_ref(),
        }
        .ok_or(Error::ModalityUnavailable(modality))
    }
}

/// What a selected client trains this round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Multi,
    Uni(Modality),
}

impl Role {
    pub fn path(self) -> Path {
        match self {
            Role::Multi => Path::Multi,
            Role::Uni(m) => Path::Uni(m),
        }
    }

    /// Groups the client trains and uploads.
    pub fn upload_mask(self) -> GroupMask {
        match self {
            Role::Multi => GroupMask::ALL,
            Role::Uni(m) => GroupMask::modality(m),
        }
    }

    pub fn trains(self, modality: Modality) -> bool {
        match self {
            Role::Multi => true,
            Role::Uni(m) => m == modality,
        }
    }
}

/// Which prototypes the modal-enhancement term pulls toward.
#[derive(Debug, Clone, Copy)]
pub enum MeMode<'a> {
    /// No ME term.
    Off,
    /// Global prototypes broadcast by the server.
    Global(&'a ModalPrototypes),
    /// The client's own prototypes, recomputed at the start of each epoch.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// How the ME term is applied on a uni-modal path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniEnhancement {
    /// The globally weak modality; ME is active only when it is trained.
    pub weak: Modality,
    /// Coefficient used when the client cannot compute its own ratio
    /// (it lacks the other modality).
    pub fallback_coefficient: f64,
}

/// Everything a client sends back after local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client: usize,
    pub role: Role,
    pub n_samples: usize,
    /// End-of-training values of the uploaded groups.
    pub params: GroupedParams,
    /// `θ_start − θ_end` over the uploaded groups.
    pub delta: GradientVector,
    /// Fresh prototypes of the trained modalities.
    pub protos: ModalPrototypes,
    /// Present when the client holds both modalities.
    pub report: Option<ImbalanceReport>,
    /// Mean per-step training loss.
    pub mean_loss: f64,
}

/// Mini-batch index lists for one epoch, shuffled by `rng`.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn embed_all(model: &ModelParams, client: &Client, modality: Modality) -> Result<Matrix> {
    let f = forward_uni(model, client.features(modality)?, modality)?;
    Ok(f.embedding(modality)
        .cloned()
        .expect("uni forward yields its embedding"))
}

fn prototypes_of(model: &ModelParams, client: &Client, modalities: &[Modality]) -> Result<ModalPrototypes> {
    let mut out = ModalPrototypes::empty(model.embedding_dim());
    for &m in modalities {
        let z = embed_all(model, client, m)?;
        *out.get_mut(m) = local_prototypes(&z, &client.labels, m)?;
    }
    Ok(out)
}

fn batch_ratio(z_a: &Matrix, z_i: &Matrix, labels: &[usize], local: &ModalPrototypes) -> Result<f64> {
    let s_a = gt_scores(z_a, labels, &local.a)?;
    let s_i = gt_scores(z_i, labels, &local.i)?;
    local_ratio(&s_a, &s_i)
}

fn me_term(
    z: &Matrix,
    labels: &[usize],
    modality: Modality,
    coef: f64,
    me: MeMode<'_>,
    local: &ModalPrototypes,
) -> Result<Option<(f64, Matrix)>> {
    if coef <= 0.0 {
        return Ok(None);
    }
    let protos: &PrototypeSet = match me {
        MeMode::Off => return Ok(None),
        MeMode::Global(g) => g.get(modality),
        MeMode::Local => local.get(modality),
    };
    let (loss, dz) = me_loss_and_grad(z, labels, protos)?;
    Ok(Some((coef * loss, dz.scale(coef)?)))
}

/// Multi-modal local training on `CE + γ·ME(A)` when the batch ratio is
/// at most 1, `CE + β·ME(I)` otherwise.
pub fn local_train_multi(
    client: &Client,
    global: &ModelParams,
    me: MeMode<'_>,
    cfg: &LocalConfig,
    rng: &mut RngStream,
) -> Result<LocalUpdate> {
    local_train(client, global, Role::Multi, me, None, cfg, rng)
}

/// Uni-modal local training of `modality`'s encoder and fusion row block.
/// The ME term is active only when `modality` is the weak one.
pub fn local_train_uni(
    client: &Client,
    global: &ModelParams,
    modality: Modality,
    me: MeMode<'_>,
    enhancement: UniEnhancement,
    cfg: &LocalConfig,
    rng: &mut RngStream,
) -> Result<LocalUpdate> {
    local_train(client, global, Role::Uni(modality), me, Some(enhancement), cfg, rng)
}

pub(crate) fn local_train(
    client: &Client,
    global: &ModelParams,
    role: Role,
    me: MeMode<'_>,
    enhancement: Option<UniEnhancement>,
    cfg: &LocalConfig,
    rng: &mut RngStream,
) -> Result<LocalUpdate> {
    let mask = client.mask();
    match role {
        Role::Multi => {
            for m in [Modality::A, Modality::I] {
                if !mask.has(m) {
                    return Err(Error::ModalityUnavailable(m));
                }
            }
        }
        Role::Uni(m) if !mask.has(m) => return Err(Error::ModalityUnavailable(m)),
        Role::Uni(_) => {}
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch_size must be >= 1"));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::param(format!("learning rate must be >= 0, got {}", cfg.lr)));
    }

    let can_report = mask.is_complete();
    let trained = role.upload_mask();
    let mut model = global.clone();
    let mut step_losses = Vec::new();
    let mut final_epoch_ratios = Vec::new();

    for epoch in 0..cfg.epochs {
        let local = if can_report {
            prototypes_of(&model, client, &[Modality::A, Modality::I])?
        } else {
            ModalPrototypes::empty(model.embedding_dim())
        };
        for batch in epoch_batches(client.n_samples(), cfg.batch_size, rng) {
            let labels: Vec<usize> = batch.iter().map(|&k| client.labels[k]).collect();
            let x_a = client.x_a.as_ref().map(|x| x.select_rows(&batch));
            let x_i = client.x_i.as_ref().map(|x| x.select_rows(&batch));

            let fwd = match role {
                Role::Multi => forward_multi(&model, x_a.as_ref().unwrap(), x_i.as_ref().unwrap())?,
                Role::Uni(Modality::A) => forward_uni(&model, x_a.as_ref().unwrap(), Modality::A)?,
                Role::Uni(Modality::I) => forward_uni(&model, x_i.as_ref().unwrap(), Modality::I)?,
            };
            let (ce, dlogits) = ce_loss_and_grad(&fwd.logits, &labels)?;

            let ratio = if can_report {
                let z_a = match &fwd.z_a {
                    Some(z) => z.clone(),
                    None => forward_uni(&model, x_a.as_ref().unwrap(), Modality::A)?.z_a.unwrap(),
                };
                let z_i = match &fwd.z_i {
                    Some(z) => z.clone(),
                    None => forward_uni(&model, x_i.as_ref().unwrap(), Modality::I)?.z_i.unwrap(),
                };
                match batch_ratio(&z_a, &z_i, &labels, &local) {
                    Ok(r) => Some(r),
                    // every I score underflowed; the batch carries no ratio
                    Err(Error::DegenerateBatch(_)) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            if epoch + 1 == cfg.epochs {
                final_epoch_ratios.extend(ratio);
            }

            // (modality, coefficient) of the ME term for this step
            let enhance: Option<(Modality, f64)> = match (role, enhancement) {
                (Role::Multi, _) => match ratio {
                    Some(r) => {
                        let (gamma, beta) = coefficients(r)?;
                        if r <= 1.0 {
                            Some((Modality::A, gamma))
                        } else {
                            Some((Modality::I, beta))
                        }
                    }
                    None => None,
                },
                (Role::Uni(m), Some(enh)) if m == enh.weak => {
                    let coef = match ratio {
                        Some(r) => coefficient_for(r, m)?,
                        None => enh.fallback_coefficient,
                    };
                    Some((m, coef))
                }
                (Role::Uni(_), _) => None,
            };

            let mut loss = ce;
            let (mut dz_a, mut dz_i) = (None, None);
            if let Some((m, coef)) = enhance {
                let z = fwd.embedding(m).expect("trained modality has an embedding");
                if let Some((me_loss, dz)) = me_term(z, &labels, m, coef, me, &local)? {
                    loss += me_loss;
                    match m {
                        Modality::A => dz_a = Some(dz),
                        Modality::I => dz_i = Some(dz),
                    }
                }
            }
            step_losses.push(loss);

            if cfg.lr > 0.0 {
                let grads = backward_with_embeddings(
                    &model,
                    &fwd.cache,
                    Some(&dlogits),
                    role.path(),
                    dz_a.as_ref(),
                    dz_i.as_ref(),
                )?
                .restrict(trained);
                model = sgd_step(&model, &grads, cfg.lr)?;
            }
        }
    }

    let trained_modalities: Vec<Modality> = [Modality::A, Modality::I]
        .into_iter()
        .filter(|&m| role.trains(m))
        .collect();
    let protos = prototypes_of(&model, client, &trained_modalities)?;
    let report = if final_epoch_ratios.is_empty() {
        None
    } else {
        let mean = final_epoch_ratios.iter().sum::<f64>() / final_epoch_ratios.len() as f64;
        Some(ImbalanceReport::new(mean, client.n_samples())?)
    };
    let params = model.groups(trained);
    let delta = global.groups(params.mask()).sub(&params)?;
    let mean_loss = if step_losses.is_empty() {
        0.0
    } else {
        step_losses.iter().sum::<f64>() / step_losses.len() as f64
    };
    Ok(LocalUpdate {
        client: client.id,
        role,
        n_samples: client.n_samples(),
        params,
        delta,
        protos,
        report,
        mean_loss,
    })
}

/// Mean CE of `model` on the client's data along the path its modalities allow.
pub fn client_loss(model: &ModelParams, client: &Client) -> Result<f64> {
    let fwd = match (client.x_a.as_ref(), client.x_i.as_ref()) {
        (Some(a), Some(i)) => forward_multi(model, a, i)?,
        (Some(a), None) => forward_uni(model, a, Modality::A)?,
        (None, Some(i)) => forward_uni(model, i, Modality::I)?,
        (None, None) => return Err(Error::Config(format!("client {} holds no modality", client.id))),
    };
    Ok(ce_loss_and_grad(&fwd.logits, &client.labels)?.0)
}
