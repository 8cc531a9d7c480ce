use crate::numkit::{Matrix, RngStream};
use crate::{Error, Modality, Result};

/// One fully-connected layer: `y = x · weight + bias`, weight shaped `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Stack of dense layers with a rectifier after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<DenseLayer>,
}

impl EncoderParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.shape() != (1, layer.weight.cols()) {
                return Err(Error::Dimension {
                    op: "encoder bias",
                    left: layer.weight.shape(),
                    right: layer.bias.shape(),
                });
            }
            if let Some(next) = layers.get(l + 1) {
                if next.weight.rows() != layer.weight.cols() {
                    return Err(Error::Dimension {
                        op: "encoder chain",
                        left: layer.weight.shape(),
                        right: next.weight.shape(),
                    });
                }
            }
        }
        Ok(EncoderParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn zeros_like(&self) -> EncoderParams {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Matrix::zeros(1, l.bias.cols()),
                })
                .collect(),
        }
    }

    fn combine(&self, other: &EncoderParams, f: impl Fn(&Matrix, &Matrix) -> Result<Matrix>) -> Result<EncoderParams> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Dimension {
                op: "encoder layer count",
                left: (self.layers.len(), 0),
                right: (other.layers.len(), 0),
            });
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                Ok(DenseLayer {
                    weight: f(&a.weight, &b.weight)?,
                    bias: f(&a.bias, &b.bias)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderParams { layers })
    }

    fn extend_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
    }
}

/// Concatenation-fusion classifier. Rows `[0, E)` of `weight` act on `z_a`,
/// rows `[E, 2E)` on `z_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl FusionParams {
    pub fn embedding_dim(&self) -> usize {
        self.weight.rows() / 2
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    /// The row block aligned with `modality`'s slot in `[z_a ; z_i]`.
    pub fn block(&self, modality: Modality) -> Matrix {
        let e = self.embedding_dim();
        match modality {
            Modality::A => self.weight.slice_rows(0, e),
            Modality::I => self.weight.slice_rows(e, 2 * e),
        }
    }

    pub fn set_block(&mut self, modality: Modality, block: &Matrix) -> Result<()> {
        let e = self.embedding_dim();
        if block.shape() != (e, self.num_classes()) {
            return Err(Error::Dimension {
                op: "fusion block",
                left: (e, self.num_classes()),
                right: block.shape(),
            });
        }
        let (top, bottom) = match modality {
            Modality::A => (block.clone(), self.block(Modality::I)),
            Modality::I => (self.block(Modality::A), block.clone()),
        };
        self.weight = top.vstack(&bottom)?;
        Ok(())
    }
}

/// Architecture of the two-encoder model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub dim_a: usize,
    pub dim_i: usize,
    /// Hidden widths; the encoder has `hidden.len() + 1` dense layers.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
}

/// `θ = {θ^A, θ^I, ω}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder_a: EncoderParams,
    pub encoder_i: EncoderParams,
    pub fusion: FusionParams,
}

fn init_encoder(input: usize, shape: &ModelShape, rng: &mut RngStream) -> Result<EncoderParams> {
    let mut widths = vec![input];
    widths.extend(&shape.hidden);
    widths.push(shape.embedding_dim);
    let layers = widths
        .windows(2)
        .map(|w| {
            Ok(DenseLayer {
                weight: rng.gaussian(w[0], w[1], 0.0, 1.0 / (w[0] as f64).sqrt())?,
                bias: Matrix::zeros(1, w[1]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EncoderParams::new(layers)
}

impl ModelParams {
    pub fn new(encoder_a: EncoderParams, encoder_i: EncoderParams, fusion: FusionParams) -> Result<Self> {
        let e = encoder_a.output_dim();
        if encoder_i.output_dim() != e
            || fusion.weight.rows() != 2 * e
            || fusion.bias.shape() != (1, fusion.weight.cols())
        {
            return Err(Error::Dimension {
                op: "model assembly",
                left: (encoder_a.output_dim(), encoder_i.output_dim()),
                right: fusion.weight.shape(),
            });
        }
        Ok(ModelParams {
            encoder_a,
            encoder_i,
            fusion,
        })
    }

    /// Gaussian weights with std `1/sqrt(fan_in)`, zero biases.
    pub fn init(shape: &ModelShape, rng: &mut RngStream) -> Result<Self> {
        if shape.embedding_dim == 0 || shape.num_classes < 2 {
            return Err(Error::param("embedding_dim must be > 0 and num_classes >= 2"));
        }
        let encoder_a = init_encoder(shape.dim_a, shape, rng)?;
        let encoder_i = init_encoder(shape.dim_i, shape, rng)?;
        let fan_in = 2 * shape.embedding_dim;
        let fusion = FusionParams {
            weight: rng.gaussian(fan_in, shape.num_classes, 0.0, 1.0 / (fan_in as f64).sqrt())?,
            bias: Matrix::zeros(1, shape.num_classes),
        };
        ModelParams::new(encoder_a, encoder_i, fusion)
    }

    pub fn encoder(&self, modality: Modality) -> &EncoderParams {
        match modality {
            Modality::A => &self.encoder_a,
            Modality::I => &self.encoder_i,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.fusion.embedding_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.fusion.num_classes()
    }

    pub fn num_params(&self) -> usize {
        self.encoder_a.num_params() + self.encoder_i.num_params() + self.fusion.weight.len() + self.fusion.bias.len()
    }

    /// Hash of every parameter's bit pattern. Used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |m: &Matrix| {
            for v in m.as_slice() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for enc in [&self.encoder_a, &self.encoder_i] {
            for l in &enc.layers {
                feed(&l.weight);
                feed(&l.bias);
            }
        }
        feed(&self.fusion.weight);
        feed(&self.fusion.bias);
        h
    }

    /// Copies out the values of the requested groups.
    pub fn groups(&self, mask: GroupMask) -> GroupedParams {
        GroupedParams {
            encoder_a: mask.encoder_a.then(|| self.encoder_a.clone()),
            encoder_i: mask.encoder_i.then(|| self.encoder_i.clone()),
            fusion_a: mask.fusion_a.then(|| self.fusion.block(Modality::A)),
            fusion_i: mask.fusion_i.then(|| self.fusion.block(Modality::I)),
            fusion_bias: mask.fusion_bias.then(|| self.fusion.bias.clone()),
        }
    }

    /// Overwrites every populated group of `values`; absent groups are left alone.
    pub fn assign_groups(&mut self, values: &GroupedParams) -> Result<()> {
        if let Some(enc) = &values.encoder_a {
            check_encoder_shape(&self.encoder_a, enc)?;
            self.encoder_a = enc.clone();
        }
        if let Some(enc) = &values.encoder_i {
            check_encoder_shape(&self.encoder_i, enc)?;
            self.encoder_i = enc.clone();
        }
        if let Some(block) = &values.fusion_a {
            self.fusion.set_block(Modality::A, block)?;
        }
        if let Some(block) = &values.fusion_i {
            self.fusion.set_block(Modality::I, block)?;
        }
        if let Some(bias) = &values.fusion_bias {
            if bias.shape() != self.fusion.bias.shape() {
                return Err(Error::Dimension {
                    op: "fusion bias",
                    left: self.fusion.bias.shape(),
                    right: bias.shape(),
                });
            }
            self.fusion.bias = bias.clone();
        }
        Ok(())
    }

    /// All groups flattened in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        self.groups(GroupMask::ALL).flatten_like(self, GroupMask::ALL)
    }
}

fn check_encoder_shape(expected: &EncoderParams, got: &EncoderParams) -> Result<()> {
    let same = expected.layers.len() == got.layers.len()
        && expected
            .layers
            .iter()
            .zip(&got.layers)
            .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape());
    if same {
        Ok(())
    } else {
        Err(Error::Dimension {
            op: "encoder shape",
            left: (expected.input_dim(), expected.output_dim()),
            right: (got.input_dim(), got.output_dim()),
        })
    }
}

/// Parameter groups that can be trained, uploaded or aggregated independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    EncoderA,
    EncoderI,
    FusionA,
    FusionI,
    FusionBias,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::EncoderA,
        Group::EncoderI,
        Group::FusionA,
        Group::FusionI,
        Group::FusionBias,
    ];
}

/// Which parameter groups are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GroupMask {
    pub encoder_a: bool,
    pub encoder_i: bool,
    pub fusion_a: bool,
    pub fusion_i: bool,
    pub fusion_bias: bool,
}

impl GroupMask {
    pub const ALL: GroupMask = GroupMask {
        encoder_a: true,
        encoder_i: true,
        fusion_a: true,
        fusion_i: true,
        fusion_bias: true,
    };
    pub const NONE: GroupMask = GroupMask {
        encoder_a: false,
        encoder_i: false,
        fusion_a: false,
        fusion_i: false,
        fusion_bias: false,
    };

    /// Encoder plus fusion row block of one modality.
    pub fn modality(modality: Modality) -> GroupMask {
        match modality {
            Modality::A => GroupMask {
                encoder_a: true,
                fusion_a: true,
                ..GroupMask::NONE
            },
            Modality::I => GroupMask {
                encoder_i: true,
                fusion_i: true,
                ..GroupMask::NONE
            },
        }
    }

    pub fn contains(&self, group: Group) -> bool {
        match group {
            Group::EncoderA => self.encoder_a,
            Group::EncoderI => self.encoder_i,
            Group::FusionA => self.fusion_a,
            Group::FusionI => self.fusion_i,
            Group::FusionBias => self.fusion_bias,
        }
    }

    /// This mask with `group` switched on.
    pub fn with(mut self, group: Group) -> GroupMask {
        match group {
            Group::EncoderA => self.encoder_a = true,
            Group::EncoderI => self.encoder_i = true,
            Group::FusionA => self.fusion_a = true,
            Group::FusionI => self.fusion_i = true,
            Group::FusionBias => self.fusion_bias = true,
        }
        self
    }

    pub fn intersect(&self, other: GroupMask) -> GroupMask {
        GroupMask {
            encoder_a: self.encoder_a && other.encoder_a,
            encoder_i: self.encoder_i && other.encoder_i,
            fusion_a: self.fusion_a && other.fusion_a,
            fusion_i: self.fusion_i && other.fusion_i,
            fusion_bias: self.fusion_bias && other.fusion_bias,
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == GroupMask::NONE
    }
}

/// The parameter tree with every group optional.
///
/// Serves both as a gradient (`GradientVector`) and as a partial parameter
/// upload. An absent group means "no contribution", which is distinct from a
/// populated group of zeros.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupedParams {
    pub encoder_a: Option<EncoderParams>,
    pub encoder_i: Option<EncoderParams>,
    pub fusion_a: Option<Matrix>,
    pub fusion_i: Option<Matrix>,
    pub fusion_bias: Option<Matrix>,
}

/// Gradient of a scalar loss w.r.t. the groups on the executed path.
pub type GradientVector = GroupedParams;

impl GroupedParams {
    /// Zeros shaped like `params` for the groups in `mask`.
    pub fn zeros_like(params: &ModelParams, mask: GroupMask) -> Self {
        let e = params.embedding_dim();
        let y = params.num_classes();
        GroupedParams {
            encoder_a: mask.encoder_a.then(|| params.encoder_a.zeros_like()),
            encoder_i: mask.encoder_i.then(|| params.encoder_i.zeros_like()),
            fusion_a: mask.fusion_a.then(|| Matrix::zeros(e, y)),
            fusion_i: mask.fusion_i.then(|| Matrix::zeros(e, y)),
            fusion_bias: mask.fusion_bias.then(|| Matrix::zeros(1, y)),
        }
    }

    pub fn mask(&self) -> GroupMask {
        GroupMask {
            encoder_a: self.encoder_a.is_some(),
            encoder_i: self.encoder_i.is_some(),
            fusion_a: self.fusion_a.is_some(),
            fusion_i: self.fusion_i.is_some(),
            fusion_bias: self.fusion_bias.is_some(),
        }
    }

    /// Drops every group outside `mask`.
    pub fn restrict(mut self, mask: GroupMask) -> Self {
        if !mask.encoder_a {
            self.encoder_a = None;
        }
        if !mask.encoder_i {
            self.encoder_i = None;
        }
        if !mask.fusion_a {
            self.fusion_a = None;
        }
        if !mask.fusion_i {
            self.fusion_i = None;
        }
        if !mask.fusion_bias {
            self.fusion_bias = None;
        }
        self
    }

    fn zip(
        &self,
        other: &GroupedParams,
        enc: impl Fn(&EncoderParams, &EncoderParams) -> Result<EncoderParams>,
        mat: impl Fn(&Matrix, &Matrix) -> Result<Matrix>,
    ) -> Result<GroupedParams> {
        fn both<T>(a: &Option<T>, b: &Option<T>, f: impl Fn(&T, &T) -> Result<T>) -> Result<Option<T>> {
            match (a, b) {
                (Some(x), Some(y)) => f(x, y).map(Some),
                (None, None) => Ok(None),
                _ => Err(Error::Usage("group masks differ".into())),
            }
        }
        Ok(GroupedParams {
            encoder_a: both(&self.encoder_a, &other.encoder_a, &enc)?,
            encoder_i: both(&self.encoder_i, &other.encoder_i, &enc)?,
            fusion_a: both(&self.fusion_a, &other.fusion_a, &mat)?,
            fusion_i: both(&self.fusion_i, &other.fusion_i, &mat)?,
            fusion_bias: both(&self.fusion_bias, &other.fusion_bias, &mat)?,
        })
    }

    /// `self + factor · other`; both must carry the same mask.
    pub fn axpy(&self, factor: f64, other: &GroupedParams) -> Result<GroupedParams> {
        self.zip(
            other,
            |a, b| a.combine(b, |x, y| x.axpy(factor, y)),
            |x, y| x.axpy(factor, y),
        )
    }

    pub fn sub(&self, other: &GroupedParams) -> Result<GroupedParams> {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, factor: f64) -> Result<GroupedParams> {
        let enc = |e: &EncoderParams| e.combine(e, |x, _| x.scale(factor));
        Ok(GroupedParams {
            encoder_a: self.encoder_a.as_ref().map(enc).transpose()?,
            encoder_i: self.encoder_i.as_ref().map(enc).transpose()?,
            fusion_a: self.fusion_a.as_ref().map(|m| m.scale(factor)).transpose()?,
            fusion_i: self.fusion_i.as_ref().map(|m| m.scale(factor)).transpose()?,
            fusion_bias: self.fusion_bias.as_ref().map(|m| m.scale(factor)).transpose()?,
        })
    }

    /// Flattens the groups in `groups` in a fixed order, writing zeros for
    /// groups that are requested but absent. `like` supplies the shapes.
    pub fn flatten_like(&self, like: &ModelParams, groups: GroupMask) -> Vec<f64> {
        let zeros = GroupedParams::zeros_like(like, groups);
        let mut out = Vec::new();
        for (mine, zero) in [(&self.encoder_a, &zeros.encoder_a), (&self.encoder_i, &zeros.encoder_i)] {
            if let Some(z) = zero {
                mine.as_ref().unwrap_or(z).extend_flat(&mut out);
            }
        }
        for (mine, zero) in [
            (&self.fusion_a, &zeros.fusion_a),
            (&self.fusion_i, &zeros.fusion_i),
            (&self.fusion_bias, &zeros.fusion_bias),
        ] {
            if let Some(z) = zero {
                out.extend_from_slice(mine.as_ref().unwrap_or(z).as_slice());
            }
        }
        out
    }

    /// Squared L2 norm over populated groups.
    pub fn norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for enc in [&self.encoder_a, &self.encoder_i].into_iter().flatten() {
            for l in &enc.layers {
                acc += l.weight.frobenius_norm().powi(2) + l.bias.frobenius_norm().powi(2);
            }
        }
        for m in [&self.fusion_a, &self.fusion_i, &self.fusion_bias]
            .into_iter()
            .flatten()
        {
            acc += m.frobenius_norm().powi(2);
        }
        acc
    }
}
