use super::params::{DenseLayer, EncoderParams, GradientVector, GroupMask, GroupedParams, ModelParams};
use crate::numkit::{matmul, Matrix};
use crate::{Error, Modality, Result};

/// Which branch of the network a forward pass executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Path {
    Multi,
    Uni(Modality),
}

impl Path {
    /// Groups that receive gradient flow from the logits on this path.
    pub fn logit_mask(self) -> GroupMask {
        match self {
            Path::Multi => GroupMask::ALL,
            Path::Uni(m) => GroupMask {
                fusion_bias: true,
                ..GroupMask::modality(m)
            },
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    path: Path,
    fingerprint: u64,
    batch: usize,
    enc_a: Option<EncoderCache>,
    enc_i: Option<EncoderCache>,
}

impl ForwardCache {
    pub fn path(&self) -> Path {
        self.path
    }
}

/// Output of a forward pass. `z_a` / `z_i` are present for the modalities
/// that were executed.
#[derive(Debug, Clone)]
pub struct Forward {
    pub z_a: Option<Matrix>,
    pub z_i: Option<Matrix>,
    pub logits: Matrix,
    pub cache: ForwardCache,
}

impl Forward {
    pub fn embedding(&self, modality: Modality) -> Option<&Matrix> {
        match modality {
            Modality::A => self.z_a.as_ref(),
            Modality::I => self.z_i.as_ref(),
        }
    }
}

fn encode(enc: &EncoderParams, x: &Matrix) -> Result<(Matrix, EncoderCache)> {
    if x.cols() != enc.input_dim() {
        return Err(Error::Dimension {
            op: "encoder input",
            left: x.shape(),
            right: (enc.input_dim(), enc.output_dim()),
        });
    }
    let last = enc.layers.len().saturating_sub(1);
    let mut h = x.clone();
    let mut cache = EncoderCache {
        inputs: Vec::with_capacity(enc.layers.len()),
        pre: Vec::with_capacity(enc.layers.len()),
    };
    for (l, DenseLayer { weight, bias }) in enc.layers.iter().enumerate() {
        let pre = matmul(&h, weight)?.add_row_broadcast(bias)?;
        let out = if l < last {
            pre.map(|v| v.max(0.0))?
        } else {
            pre.clone()
        };
        cache.inputs.push(h);
        cache.pre.push(pre);
        h = out;
    }
    Ok((h, cache))
}

fn encode_backward(enc: &EncoderParams, cache: &EncoderCache, dz: &Matrix) -> Result<EncoderParams> {
    let last = enc.layers.len().saturating_sub(1);
    let mut grads = Vec::with_capacity(enc.layers.len());
    let mut dh = dz.clone();
    for l in (0..enc.layers.len()).rev() {
        let dpre = if l < last {
            let gate = cache.pre[l].map(|v| if v > 0.0 { 1.0 } else { 0.0 })?;
            dh.hadamard(&gate)?
        } else {
            dh
        };
        let dw = matmul(&cache.inputs[l].transpose(), &dpre)?;
        let db = dpre.col_sums();
        dh = matmul(&dpre, &enc.layers[l].weight.transpose())?;
        grads.push(DenseLayer { weight: dw, bias: db });
    }
    grads.reverse();
    Ok(EncoderParams { layers: grads })
}

/// Multi-modal forward: `logits = [z_a ; z_i] · ω + b`.
pub fn forward_multi(params: &ModelParams, x_a: &Matrix, x_i: &Matrix) -> Result<Forward> {
    if x_a.rows() != x_i.rows() {
        return Err(Error::Dimension {
            op: "forward_multi batch",
            left: x_a.shape(),
            right: x_i.shape(),
        });
    }
    let (z_a, cache_a) = encode(&params.encoder_a, x_a)?;
    let (z_i, cache_i) = encode(&params.encoder_i, x_i)?;
    let logits = matmul(&z_a, &params.fusion.block(Modality::A))?
        .add(&matmul(&z_i, &params.fusion.block(Modality::I))?)?
        .add_row_broadcast(&params.fusion.bias)?;
    Ok(Forward {
        z_a: Some(z_a),
        z_i: Some(z_i),
        logits,
        cache: ForwardCache {
            path: Path::Multi,
            fingerprint: params.fingerprint(),
            batch: x_a.rows(),
            enc_a: Some(cache_a),
            enc_i: Some(cache_i),
        },
    })
}

/// Uni-modal forward through one encoder, that modality's fusion row block
/// and the full fusion bias.
pub fn forward_uni(params: &ModelParams, x: &Matrix, modality: Modality) -> Result<Forward> {
    let enc = params.encoder(modality);
    if enc.layers.is_empty() {
        return Err(Error::ModalityUnavailable(modality));
    }
    let (z, cache) = encode(enc, x)?;
    let logits = matmul(&z, &params.fusion.block(modality))?.add_row_broadcast(&params.fusion.bias)?;
    let (z_a, z_i, enc_a, enc_i) = match modality {
        Modality::A => (Some(z), None, Some(cache), None),
        Modality::I => (None, Some(z), None, Some(cache)),
    };
    Ok(Forward {
        z_a,
        z_i,
        logits,
        cache: ForwardCache {
            path: Path::Uni(modality),
            fingerprint: params.fingerprint(),
            batch: x.rows(),
            enc_a,
            enc_i,
        },
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Matrix::from_vec(logits.rows(), logits.cols(), out)
}

/// Mean cross-entropy and its gradient `(softmax − onehot) / batch`.
pub fn ce_loss_and_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "ce labels",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Label {
            label: bad,
            num_classes: classes,
        });
    }
    let batch = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (c, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            grad.push((p - if c == y { 1.0 } else { 0.0 }) / batch);
        }
    }
    Ok((loss / batch, Matrix::from_vec(logits.rows(), classes, grad)?))
}

/// Exact gradients of a loss w.r.t. every parameter group on `path`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dlogits: &Matrix, path: Path) -> Result<GradientVector> {
    backward_with_embeddings(params, cache, Some(dlogits), path, None, None)
}

/// Like [`backward`], with optional extra upstream gradients injected
/// directly at the embeddings (e.g. from the modal-enhancement loss).
///
/// Without `dlogits` the fusion groups receive no flow and stay absent.
pub fn backward_with_embeddings(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: Option<&Matrix>,
    path: Path,
    dz_a: Option<&Matrix>,
    dz_i: Option<&Matrix>,
) -> Result<GradientVector> {
    if cache.path != path {
        return Err(Error::Usage(format!(
            "backward on {path:?} with a cache from {:?}",
            cache.path
        )));
    }
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::Usage(
            "forward cache is stale: parameters changed since the forward pass".into(),
        ));
    }
    let e = params.embedding_dim();
    let y = params.num_classes();
    for (name, m, shape) in [
        ("dlogits", dlogits, (cache.batch, y)),
        ("dz_a", dz_a, (cache.batch, e)),
        ("dz_i", dz_i, (cache.batch, e)),
    ] {
        if let Some(m) = m {
            if m.shape() != shape {
                return Err(Error::Dimension {
                    op: name,
                    left: shape,
                    right: m.shape(),
                });
            }
        }
    }

    let mut grads = GroupedParams::default();
    let modality_grads = |modality: Modality,
                          enc_cache: &EncoderCache,
                          extra: Option<&Matrix>|
     -> Result<(Option<Matrix>, EncoderParams)> {
        let z = last_output(enc_cache)?;
        let (dw, mut dz) = match dlogits {
            Some(dl) => (
                Some(matmul(&z.transpose(), dl)?),
                matmul(dl, &params.fusion.block(modality).transpose())?,
            ),
            None => (None, Matrix::zeros(cache.batch, e)),
        };
        if let Some(extra) = extra {
            dz = dz.add(extra)?;
        }
        let enc_grad = encode_backward(params.encoder(modality), enc_cache, &dz)?;
        Ok((dw, enc_grad))
    };

    match (&cache.enc_a, path) {
        (Some(c), Path::Multi | Path::Uni(Modality::A)) => {
            let (dw, enc) = modality_grads(Modality::A, c, dz_a)?;
            grads.fusion_a = dw;
            grads.encoder_a = Some(enc);
        }
        (None, Path::Multi | Path::Uni(Modality::A)) => return Err(Error::Usage("missing encoder A cache".into())),
        _ => {
            if dz_a.is_some() {
                return Err(Error::Usage("dz_a supplied on a path without modality A".into()));
            }
        }
    }
    match (&cache.enc_i, path) {
        (Some(c), Path::Multi | Path::Uni(Modality::I)) => {
            let (dw, enc) = modality_grads(Modality::I, c, dz_i)?;
            grads.fusion_i = dw;
            grads.encoder_i = Some(enc);
        }
        (None, Path::Multi | Path::Uni(Modality::I)) => return Err(Error::Usage("missing encoder I cache".into())),
        _ => {
            if dz_i.is_some() {
                return Err(Error::Usage("dz_i supplied on a path without modality I".into()));
            }
        }
    }
    grads.fusion_bias = dlogits.map(Matrix::col_sums);
    Ok(grads)
}

fn last_output(cache: &EncoderCache) -> Result<Matrix> {
    let last = cache
        .pre
        .last()
        .ok_or_else(|| Error::Usage("empty encoder cache".into()))?;
    Ok(last.clone())
}

/// `p ← p − lr·g` for every populated group of `grads`.
pub fn sgd_step(params: &ModelParams, grads: &GradientVector, lr: f64) -> Result<ModelParams> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::param(format!("learning rate must be > 0, got {lr}")));
    }
    let current = params.groups(grads.mask());
    let updated = current.axpy(-lr, grads)?;
    let mut out = params.clone();
    out.assign_groups(&updated)?;
    Ok(out)
}
