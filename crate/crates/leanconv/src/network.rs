//! Pre-activation residual network built from lean convolution operators:
//! batch normalization, residual blocks, channel-doubling downsampling,
//! linear classifier with softmax cross-entropy, reverse-mode gradients for
//! every parameter, and an SGD-momentum training loop.
//!
//! Stage transitions are rectangular residual blocks: the first convolution
//! doubles the channels at full resolution, the branch is average-pooled
//! before the second convolution, and the shortcut pools the concatenation of
//! the input with a depth-wise convolution of itself.

use crate::data::{augment_flip_crop, Dataset};
use crate::kernels::{apply, backward, KernelError, KernelPath, TileConfig};
use crate::ops::{choose_groups, Direction, LeanConvSpec, SpecError, StencilKind};
use crate::scalar::Scalar;
use crate::tensor::{
    avg_pool2, concat_channels, global_avg_pool, relu, residual_add, FeatureMap, TensorError,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no training samples")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// How each lean operator picks its group count from its channel pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRule {
    /// Largest feasible group count not exceeding the given value.
    Fixed(usize),
    /// As many groups as the channel pair allows.
    DepthWise,
    /// `c_in / n` groups (clamped to feasibility).
    CinOver(usize),
    /// Parameter-ratio rule via [`choose_groups`].
    Ratio(f64),
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn largest_divisor_leq(n: usize, limit: usize) -> usize {
    (1..=n).filter(|d| n % d == 0 && *d <= limit.max(1)).max().unwrap_or(1)
}

impl GroupRule {
    /// Group count for an operator with the given channel pair; always
    /// divides both `c_in` and `c_out`.
    pub fn groups_for(&self, c_in: usize, c_out: usize, stencil: StencilKind) -> usize {
        let base = gcd(c_in, c_out);
        match *self {
            GroupRule::Fixed(n) => largest_divisor_leq(base, n),
            GroupRule::DepthWise => base,
            GroupRule::CinOver(n) => largest_divisor_leq(base, (c_in / n.max(1)).max(1)),
            GroupRule::Ratio(r) => choose_groups(base, stencil.size(), r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    pub stage_steps: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub stencil: StencilKind,
    pub group_rule: GroupRule,
}

impl NetworkConfig {
    /// Res18-style configuration: widths 32-64-128-256, two blocks per stage,
    /// strides 1-2-2-2.
    pub fn res18(stencil: StencilKind, group_rule: GroupRule) -> Self {
        NetworkConfig {
            in_channels: 3,
            stage_widths: vec![32, 64, 128, 256],
            stage_steps: vec![2, 2, 2, 2],
            stage_strides: vec![1, 2, 2, 2],
            stencil,
            group_rule,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let n = self.stage_widths.len();
        if n == 0 || self.stage_steps.len() != n || self.stage_strides.len() != n {
            return Err(NetworkError::Config(
                "stage_widths, stage_steps and stage_strides must be equally sized and nonempty"
                    .into(),
            ));
        }
        if self.in_channels == 0
            || self.stage_widths.iter().any(|&w| w == 0)
            || self.stage_steps.iter().any(|&s| s == 0)
        {
            return Err(NetworkError::Config("channel and step counts must be positive".into()));
        }
        if self.stage_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(NetworkError::Config("strides must be 1 or 2".into()));
        }
        if self.stage_strides[0] != 1 {
            return Err(NetworkError::Config("the first stage cannot downsample".into()));
        }
        for s in 1..n {
            let (prev, cur) = (self.stage_widths[s - 1], self.stage_widths[s]);
            let ok = match self.stage_strides[s] {
                2 => cur == 2 * prev,
                _ => cur == prev,
            };
            if !ok {
                return Err(NetworkError::Config(format!(
                    "stage {s}: width {cur} incompatible with stride {} after width {prev} \
                     (stride-2 stages double the width, stride-1 stages keep it)",
                    self.stage_strides[s]
                )));
            }
        }
        Ok(())
    }
}

/// Per-channel affine normalization parameters plus running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams<S> {
    pub scale: Vec<S>,
    pub shift: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

impl<S: Scalar> NormParams<S> {
    pub fn new(channels: usize) -> Self {
        NormParams {
            scale: vec![S::one(); channels],
            shift: vec![S::zero(); channels],
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Everything the normalization backward pass needs.
pub struct BnCache<S> {
    x_hat: FeatureMap<S>,
    inv_std: Vec<S>,
}

fn batch_norm_train<S: Scalar>(
    x: &FeatureMap<S>,
    params: &mut NormParams<S>,
) -> (FeatureMap<S>, BnCache<S>) {
    let (b_n, c_n) = (x.batch(), x.channels());
    let n = (b_n * x.plane_len()) as f64;
    let momentum = S::from_f64(BN_MOMENTUM);
    let blend = S::from_f64(1.0 - BN_MOMENTUM);
    let mut x_hat = x.clone();
    let mut inv_std = Vec::with_capacity(c_n);
    for c in 0..c_n {
        let mut sum = S::zero();
        let mut sq = S::zero();
        for b in 0..b_n {
            for &v in x.plane(b, c) {
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / S::from_f64(n);
        let var = (sq / S::from_f64(n) - mean * mean).max(S::zero());
        let istd = S::one() / (var + S::from_f64(BN_EPS)).sqrt();
        inv_std.push(istd);
        params.running_mean[c] = momentum * params.running_mean[c] + blend * mean;
        params.running_var[c] = momentum * params.running_var[c] + blend * var;
        for b in 0..b_n {
            let off = x_hat.plane_offset(b, c);
            let len = x_hat.plane_len();
            for v in &mut x_hat.data_mut()[off..off + len] {
                *v = (*v - mean) * istd;
            }
        }
    }
    let mut out = x_hat.clone();
    for c in 0..c_n {
        let (g, s) = (params.scale[c], params.shift[c]);
        for b in 0..b_n {
            let off = out.plane_offset(b, c);
            let len = out.plane_len();
            for v in &mut out.data_mut()[off..off + len] {
                *v = g * *v + s;
            }
        }
    }
    (out, BnCache { x_hat, inv_std })
}

fn batch_norm_eval<S: Scalar>(x: &FeatureMap<S>, params: &NormParams<S>) -> FeatureMap<S> {
    let mut out = x.clone();
    let (b_n, c_n, len) = (x.batch(), x.channels(), x.plane_len());
    for c in 0..c_n {
        let istd = S::one() / (params.running_var[c] + S::from_f64(BN_EPS)).sqrt();
        let (m, g, s) = (params.running_mean[c], params.scale[c], params.shift[c]);
        for b in 0..b_n {
            let off = out.plane_offset(b, c);
            for v in &mut out.data_mut()[off..off + len] {
                *v = g * (*v - m) * istd + s;
            }
        }
    }
    out
}

/// Per-channel standardization over `(batch, spatial)` with affine scale and
/// shift. Train mode uses batch statistics and updates the running ones; eval
/// mode uses the running statistics.
pub fn batch_norm<S: Scalar>(
    x: &FeatureMap<S>,
    params: &mut NormParams<S>,
    train: bool,
) -> FeatureMap<S> {
    if train {
        batch_norm_train(x, params).0
    } else {
        batch_norm_eval(x, params)
    }
}

/// Returns `(d_input, d_scale, d_shift)`.
fn batch_norm_backward<S: Scalar>(
    params: &NormParams<S>,
    cache: &BnCache<S>,
    dy: &FeatureMap<S>,
) -> (FeatureMap<S>, Vec<S>, Vec<S>) {
    let x_hat = &cache.x_hat;
    let (b_n, c_n, len) = (x_hat.batch(), x_hat.channels(), x_hat.plane_len());
    let n = S::from_f64((b_n * len) as f64);
    let mut dx = dy.clone();
    let mut d_scale = vec![S::zero(); c_n];
    let mut d_shift = vec![S::zero(); c_n];
    for c in 0..c_n {
        let mut sum_dy = S::zero();
        let mut sum_dy_xhat = S::zero();
        for b in 0..b_n {
            for (&g, &xh) in dy.plane(b, c).iter().zip(x_hat.plane(b, c)) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        d_scale[c] = sum_dy_xhat;
        d_shift[c] = sum_dy;
        let k = params.scale[c] * cache.inv_std[c];
        let mean_dy = sum_dy / n;
        let mean_dy_xhat = sum_dy_xhat / n;
        for b in 0..b_n {
            let off = dx.plane_offset(b, c);
            let xh_plane = x_hat.plane(b, c);
            let (data, dst) = (dx.data_mut(), off);
            for (i, v) in data[dst..dst + len].iter_mut().enumerate() {
                *v = k * (*v - mean_dy - xh_plane[i] * mean_dy_xhat);
            }
        }
    }
    (dx, d_scale, d_shift)
}

fn relu_backward<S: Scalar>(z: &FeatureMap<S>, dy: &FeatureMap<S>) -> FeatureMap<S> {
    debug_assert_eq!(z.layout(), dy.layout());
    let mut out = dy.clone();
    for (o, &zv) in out.data_mut().iter_mut().zip(z.data()) {
        if zv <= S::zero() {
            *o = S::zero();
        }
    }
    out
}

fn avg_pool2_backward<S: Scalar>(d: &FeatureMap<S>) -> FeatureMap<S> {
    let quarter = S::from_f64(0.25);
    let mut out = FeatureMap::zeros_with_layout(
        d.batch(),
        d.channels(),
        d.height() * 2,
        d.width() * 2,
        d.layout(),
    );
    for b in 0..d.batch() {
        for c in 0..d.channels() {
            for y in 0..d.height() {
                for x in 0..d.width() {
                    let v = d.get(b, c, y, x) * quarter;
                    for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        out.set(b, c, 2 * y + i, 2 * x + j, v);
                    }
                }
            }
        }
    }
    out
}

fn split_channels<S: Scalar>(x: &FeatureMap<S>, first: usize) -> (FeatureMap<S>, FeatureMap<S>) {
    let rest = x.channels() - first;
    let plane = x.plane_len();
    let mut a = Vec::with_capacity(x.batch() * first * plane);
    let mut b = Vec::with_capacity(x.batch() * rest * plane);
    for bi in 0..x.batch() {
        for c in 0..first {
            a.extend_from_slice(x.plane(bi, c));
        }
        for c in first..x.channels() {
            b.extend_from_slice(x.plane(bi, c));
        }
    }
    (
        FeatureMap::from_vec(x.batch(), first, x.height(), x.width(), x.layout(), a).unwrap(),
        FeatureMap::from_vec(x.batch(), rest, x.height(), x.width(), x.layout(), b).unwrap(),
    )
}

/// Channel-doubling downsample: pool the concatenation of the input with a
/// depth-wise convolution of itself. Output shape `(B, 2C, H/2, W/2)`.
pub fn downsample<S: Scalar>(
    x: &FeatureMap<S>,
    dw_spec: &LeanConvSpec<S>,
) -> Result<FeatureMap<S>, NetworkError> {
    if dw_spec.groups != dw_spec.c_in
        || dw_spec.c_in != dw_spec.c_out
        || dw_spec.pointwise.is_some()
    {
        return Err(NetworkError::Config(
            "downsample requires a depth-wise spatial-only operator".into(),
        ));
    }
    // layout-preserving path so the two concat halves agree
    let dw = apply(dw_spec, x, KernelPath::ShiftIm2col, &TileConfig::default())?;
    Ok(avg_pool2(&concat_channels(x, &dw)?)?)
}

/// One pre-activation residual block. `dw` is present on stage-transition
/// blocks, whose first convolution doubles the channels and whose branch and
/// shortcut both halve the resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block<S> {
    pub norm1: NormParams<S>,
    pub k1: LeanConvSpec<S>,
    pub norm2: NormParams<S>,
    pub k2: LeanConvSpec<S>,
    pub dw: Option<LeanConvSpec<S>>,
}

impl<S: Scalar> Block<S> {
    pub fn is_transition(&self) -> bool {
        self.dw.is_some()
    }

    pub fn in_channels(&self) -> usize {
        self.k1.c_in
    }

    pub fn out_channels(&self) -> usize {
        self.k2.c_out
    }
}

pub struct BlockCache<S> {
    input: FeatureMap<S>,
    bn1: BnCache<S>,
    z1: FeatureMap<S>,
    bn2: BnCache<S>,
    z2: FeatureMap<S>,
}

fn block_forward_impl<S: Scalar>(
    block: &mut Block<S>,
    y: &FeatureMap<S>,
    train: bool,
    path: KernelPath,
    tile: &TileConfig,
    cache: Option<&mut Option<BlockCache<S>>>,
) -> Result<FeatureMap<S>, NetworkError> {
    let (a1, bn1_cache) = if train {
        let (a, c) = batch_norm_train(y, &mut block.norm1);
        (a, Some(c))
    } else {
        (batch_norm_eval(y, &block.norm1), None)
    };
    let z1 = relu(&a1);
    let x2 = apply(&block.k1, &z1, path, tile)?;
    let x2 = if block.is_transition() { avg_pool2(&x2)? } else { x2 };
    let (a2, bn2_cache) = if train {
        let (a, c) = batch_norm_train(&x2, &mut block.norm2);
        (a, Some(c))
    } else {
        (batch_norm_eval(&x2, &block.norm2), None)
    };
    let z2 = relu(&a2);
    let f = apply(&block.k2, &z2, path, tile)?;
    let shortcut = match &block.dw {
        Some(dw) => downsample(y, dw)?,
        None => y.clone(),
    };
    let out = residual_add(&shortcut, &f)?;
    if let Some(slot) = cache {
        *slot = Some(BlockCache {
            input: y.clone(),
            bn1: bn1_cache.expect("cache implies train mode"),
            z1,
            bn2: bn2_cache.expect("cache implies train mode"),
            z2,
        });
    }
    Ok(out)
}

/// `y + K2(relu(N2(K1(relu(N1(y))))))`, with pooling on transition blocks.
pub fn block_forward<S: Scalar>(
    block: &mut Block<S>,
    y: &FeatureMap<S>,
    train: bool,
    path: KernelPath,
    tile: &TileConfig,
) -> Result<FeatureMap<S>, NetworkError> {
    block_forward_impl(block, y, train, path, tile, None)
}

/// Propagate `dy` through a block; writes parameter gradients into the
/// matching slots of `grad` and returns the input gradient.
fn block_backward<S: Scalar>(
    block: &Block<S>,
    grad: &mut Block<S>,
    cache: &BlockCache<S>,
    dy: &FeatureMap<S>,
) -> Result<FeatureMap<S>, NetworkError> {
    // branch: K2
    let g2 = backward(&block.k2, &cache.z2, dy)?;
    if let (Some(gp), Some(dp)) = (grad.k2.pointwise.as_mut(), g2.d_pointwise) {
        for (a, b) in gp.iter_mut().zip(dp) {
            *a += b;
        }
    }
    for (a, b) in grad.k2.spatial.iter_mut().zip(g2.d_spatial) {
        *a += b;
    }
    let d_a2 = relu_backward(&cache.z2, &g2.d_input);
    let (d_x2, d_scale2, d_shift2) = batch_norm_backward(&block.norm2, &cache.bn2, &d_a2);
    for (a, b) in grad.norm2.scale.iter_mut().zip(d_scale2) {
        *a += b;
    }
    for (a, b) in grad.norm2.shift.iter_mut().zip(d_shift2) {
        *a += b;
    }
    let d_f1 = if block.is_transition() { avg_pool2_backward(&d_x2) } else { d_x2 };
    let g1 = backward(&block.k1, &cache.z1, &d_f1)?;
    if let (Some(gp), Some(dp)) = (grad.k1.pointwise.as_mut(), g1.d_pointwise) {
        for (a, b) in gp.iter_mut().zip(dp) {
            *a += b;
        }
    }
    for (a, b) in grad.k1.spatial.iter_mut().zip(g1.d_spatial) {
        *a += b;
    }
    let d_a1 = relu_backward(&cache.z1, &g1.d_input);
    let (d_branch, d_scale1, d_shift1) = batch_norm_backward(&block.norm1, &cache.bn1, &d_a1);
    for (a, b) in grad.norm1.scale.iter_mut().zip(d_scale1) {
        *a += b;
    }
    for (a, b) in grad.norm1.shift.iter_mut().zip(d_shift1) {
        *a += b;
    }

    // shortcut
    let d_shortcut_in = match &block.dw {
        None => dy.clone(),
        Some(dw) => {
            let d_concat = avg_pool2_backward(dy);
            let (d_direct, d_dw_out) = split_channels(&d_concat, block.in_channels());
            let gdw = backward(dw, &cache.input, &d_dw_out)?;
            let gslot = grad.dw.as_mut().expect("grad block mirrors structure");
            for (a, b) in gslot.spatial.iter_mut().zip(gdw.d_spatial) {
                *a += b;
            }
            residual_add(&d_direct, &gdw.d_input)?
        }
    };
    Ok(residual_add(&d_branch, &d_shortcut_in)?)
}

/// Linear classifier over pooled features: `softmax(W y + mu)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier<S> {
    /// Row-major `n_classes x n_features`.
    pub w: Vec<S>,
    pub mu: Vec<S>,
    pub n_features: usize,
}

impl<S: Scalar> Classifier<S> {
    pub fn n_classes(&self) -> usize {
        self.mu.len()
    }

    /// Batch-major logits for batch-major features.
    pub fn logits(&self, features: &[S]) -> Vec<S> {
        let nf = self.n_features;
        let nc = self.n_classes();
        let batch = features.len() / nf;
        let mut out = vec![S::zero(); batch * nc];
        for b in 0..batch {
            let f = &features[b * nf..(b + 1) * nf];
            for k in 0..nc {
                let mut acc = self.mu[k];
                for (wv, fv) in self.w[k * nf..(k + 1) * nf].iter().zip(f) {
                    acc += *wv * *fv;
                }
                out[b * nc + k] = acc;
            }
        }
        out
    }
}

/// Row-wise softmax with max subtraction. `width` is the row length.
pub fn softmax<S: Scalar>(logits: &[S], width: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
        let sum: S = exps.iter().fold(S::zero(), |a, &b| a + b);
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

/// Mean negative log-likelihood of the labels under row-major probabilities.
pub fn cross_entropy<S: Scalar>(
    probs: &[S],
    n_classes: usize,
    labels: &[usize],
) -> Result<f64, NetworkError> {
    let mut acc = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(NetworkError::LabelOutOfRange { label, n_classes });
        }
        acc -= probs[b * n_classes + label].to_f64().max(1e-300).ln();
    }
    Ok(acc / labels.len() as f64)
}

pub fn argmax_rows<S: Scalar>(values: &[S], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model<S> {
    pub config: NetworkConfig,
    pub n_classes: usize,
    /// Plain fully-coupled 3x3 opening convolution.
    pub opening: LeanConvSpec<S>,
    pub blocks: Vec<Block<S>>,
    pub classifier: Classifier<S>,
    pub path: KernelPath,
    pub tile: TileConfig,
}

fn block_stencils(stencil: StencilKind) -> (StencilKind, StencilKind) {
    match stencil {
        StencilKind::Three1D(_) => (
            StencilKind::Three1D(Direction::Horizontal),
            StencilKind::Three1D(Direction::Vertical),
        ),
        other => (other, other),
    }
}

impl<S: Scalar> Model<S> {
    /// Assemble the network with zero-valued convolution and classifier
    /// weights (identity residual blocks).
    pub fn build(config: &NetworkConfig, n_classes: usize) -> Result<Self, NetworkError> {
        config.validate()?;
        if n_classes < 2 {
            return Err(NetworkError::Config("need at least two classes".into()));
        }
        let (s1, s2) = block_stencils(config.stencil);
        let opening =
            LeanConvSpec::zeros(config.in_channels, config.stage_widths[0], 1, StencilKind::Full9, false)?;
        let mut blocks = Vec::new();
        for stage in 0..config.stage_widths.len() {
            let width = config.stage_widths[stage];
            for step in 0..config.stage_steps[stage] {
                let transition = step == 0 && config.stage_strides[stage] == 2;
                let c_in = if transition { width / 2 } else { width };
                let g1 = config.group_rule.groups_for(c_in, width, s1);
                let g2 = config.group_rule.groups_for(width, width, s2);
                blocks.push(Block {
                    norm1: NormParams::new(c_in),
                    k1: LeanConvSpec::zeros(c_in, width, g1, s1, true)?,
                    norm2: NormParams::new(width),
                    k2: LeanConvSpec::zeros(width, width, g2, s2, true)?,
                    dw: transition
                        .then(|| LeanConvSpec::zeros(c_in, c_in, c_in, config.stencil, false))
                        .transpose()?,
                });
            }
        }
        let n_features = *config.stage_widths.last().unwrap();
        Ok(Model {
            config: config.clone(),
            n_classes,
            opening,
            blocks,
            classifier: Classifier {
                w: vec![S::zero(); n_classes * n_features],
                mu: vec![S::zero(); n_classes],
                n_features,
            },
            path: KernelPath::Auto,
            tile: TileConfig::default(),
        })
    }

    /// Build and randomize: zero-mean Gaussians with variance
    /// `2 / (param_count / c_out)` per operator, the second convolution of
    /// each block damped by 0.1, classifier variance `1 / n_features`.
    pub fn init(config: &NetworkConfig, n_classes: usize, seed: u64) -> Result<Self, NetworkError> {
        let mut model = Self::build(config, n_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_spec = |spec: &mut LeanConvSpec<S>, damp: f64, rng: &mut ChaCha8Rng| {
            let fan_in = spec.param_count() as f64 / spec.c_out as f64;
            let std = S::from_f64(damp * (2.0 / fan_in).sqrt());
            if let Some(pw) = spec.pointwise.as_mut() {
                for v in pw.iter_mut() {
                    *v = S::sample_standard_normal(rng) * std;
                }
            }
            for v in spec.spatial.iter_mut() {
                *v = S::sample_standard_normal(rng) * std;
            }
        };
        init_spec(&mut model.opening, 1.0, &mut rng);
        for block in &mut model.blocks {
            init_spec(&mut block.k1, 1.0, &mut rng);
            init_spec(&mut block.k2, 0.1, &mut rng);
            if let Some(dw) = block.dw.as_mut() {
                init_spec(dw, 1.0, &mut rng);
            }
        }
        let cstd = S::from_f64((1.0 / model.classifier.n_features as f64).sqrt());
        for v in model.classifier.w.iter_mut() {
            *v = S::sample_standard_normal(&mut rng) * cstd;
        }
        Ok(model)
    }

    /// A structurally identical model with every parameter and statistic
    /// zeroed; used as the gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_vec_mut(&mut |_, v, _| v.fill(S::zero()));
        for block in &mut z.blocks {
            block.norm1.running_mean.fill(S::zero());
            block.norm1.running_var.fill(S::zero());
            block.norm2.running_mean.fill(S::zero());
            block.norm2.running_var.fill(S::zero());
        }
        z
    }

    fn for_each_param_vec(&self, f: &mut dyn FnMut(String, &[S], bool)) {
        f("opening.spatial".into(), &self.opening.spatial, true);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("block{i}.norm1.scale"), &b.norm1.scale, false);
            f(format!("block{i}.norm1.shift"), &b.norm1.shift, false);
            if let Some(pw) = &b.k1.pointwise {
                f(format!("block{i}.k1.pointwise"), pw, true);
            }
            f(format!("block{i}.k1.spatial"), &b.k1.spatial, true);
            f(format!("block{i}.norm2.scale"), &b.norm2.scale, false);
            f(format!("block{i}.norm2.shift"), &b.norm2.shift, false);
            if let Some(pw) = &b.k2.pointwise {
                f(format!("block{i}.k2.pointwise"), pw, true);
            }
            f(format!("block{i}.k2.spatial"), &b.k2.spatial, true);
            if let Some(dw) = &b.dw {
                f(format!("block{i}.dw.spatial"), &dw.spatial, true);
            }
        }
        f("classifier.w".into(), &self.classifier.w, true);
        f("classifier.mu".into(), &self.classifier.mu, false);
    }

    fn for_each_param_vec_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<S>, bool)) {
        f("opening.spatial".into(), &mut self.opening.spatial, true);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("block{i}.norm1.scale"), &mut b.norm1.scale, false);
            f(format!("block{i}.norm1.shift"), &mut b.norm1.shift, false);
            if let Some(pw) = b.k1.pointwise.as_mut() {
                f(format!("block{i}.k1.pointwise"), pw, true);
            }
            f(format!("block{i}.k1.spatial"), &mut b.k1.spatial, true);
            f(format!("block{i}.norm2.scale"), &mut b.norm2.scale, false);
            f(format!("block{i}.norm2.shift"), &mut b.norm2.shift, false);
            if let Some(pw) = b.k2.pointwise.as_mut() {
                f(format!("block{i}.k2.pointwise"), pw, true);
            }
            f(format!("block{i}.k2.spatial"), &mut b.k2.spatial, true);
            if let Some(dw) = b.dw.as_mut() {
                f(format!("block{i}.dw.spatial"), &mut dw.spatial, true);
            }
        }
        f("classifier.w".into(), &mut self.classifier.w, true);
        f("classifier.mu".into(), &mut self.classifier.mu, false);
    }

    /// Named sizes of every trainable parameter vector; `decay` marks the
    /// ones subject to weight decay.
    pub fn param_registry(&self) -> Vec<ParamEntry> {
        let mut out = Vec::new();
        self.for_each_param_vec(&mut |name, v, decay| {
            out.push(ParamEntry { name, len: v.len(), decay });
        });
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param_vec(&mut |_, v, _| n += v.len());
        n
    }

    pub fn params_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_param_vec(&mut |_, v, _| out.extend_from_slice(v));
        out
    }

    pub fn set_params_flat(&mut self, values: &[S]) {
        assert_eq!(values.len(), self.num_params(), "flat parameter length mismatch");
        let mut pos = 0;
        self.for_each_param_vec_mut(&mut |_, v, _| {
            let len = v.len();
            v.copy_from_slice(&values[pos..pos + len]);
            pos += len;
        });
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_param_vec(&mut |_, v, decay| out.extend(std::iter::repeat(decay).take(v.len())));
        out
    }

    /// Convolution operators in forward order with the resolution each one
    /// runs at, for cost accounting.
    pub fn conv_cost_table(&self, batch: usize, height: usize, width: usize) -> Vec<LayerCost> {
        let mut out = Vec::new();
        let (mut h, mut w) = (height, width);
        let mut push = |name: String, spec: &LeanConvSpec<S>, h: usize, w: usize| {
            out.push(LayerCost {
                name,
                c_in: spec.c_in,
                c_out: spec.c_out,
                groups: spec.groups,
                height: h,
                width: w,
                params: spec.param_count(),
                mults: spec.mult_count(batch, h, w),
            });
        };
        push("opening".into(), &self.opening, h, w);
        for (i, b) in self.blocks.iter().enumerate() {
            push(format!("block{i}.k1"), &b.k1, h, w);
            if let Some(dw) = &b.dw {
                push(format!("block{i}.dw"), dw, h, w);
                h /= 2;
                w /= 2;
            }
            push(format!("block{i}.k2"), &b.k2, h, w);
        }
        out
    }

    /// Total weights in convolution operators alone.
    pub fn conv_param_total(&self) -> u64 {
        let mut total = self.opening.param_count();
        for b in &self.blocks {
            total += b.k1.param_count() + b.k2.param_count();
            if let Some(dw) = &b.dw {
                total += dw.param_count();
            }
        }
        total
    }

    /// Total multiplications of one forward application.
    pub fn conv_mult_total(&self, batch: usize, height: usize, width: usize) -> u64 {
        self.conv_cost_table(batch, height, width).iter().map(|r| r.mults).sum()
    }

    fn features(&mut self, x: &FeatureMap<S>, train: bool) -> Result<FeatureMap<S>, NetworkError> {
        let path = self.path;
        let tile = self.tile;
        let mut y = apply(&self.opening, x, path, &tile)?;
        for block in &mut self.blocks {
            y = block_forward(block, &y, train, path, &tile)?;
        }
        Ok(y)
    }

    /// Batch-major logits. Train mode updates the running norm statistics.
    pub fn forward(&mut self, x: &FeatureMap<S>, train: bool) -> Result<Vec<S>, NetworkError> {
        let y = self.features(x, train)?;
        Ok(self.classifier.logits(&global_avg_pool(&y)))
    }

    /// Train-mode forward plus full backward pass. Returns the mean loss, the
    /// number of correct argmax predictions, and a structural clone holding
    /// the gradient of every parameter.
    pub fn loss_and_grads(
        &mut self,
        x: &FeatureMap<S>,
        labels: &[usize],
    ) -> Result<(f64, usize, Model<S>), NetworkError> {
        assert_eq!(x.batch(), labels.len(), "one label per sample");
        let path = self.path;
        let tile = self.tile;
        let mut caches: Vec<Option<BlockCache<S>>> = Vec::with_capacity(self.blocks.len());
        let opening_out = apply(&self.opening, x, path, &tile)?;
        let mut y = opening_out.clone();
        for block in &mut self.blocks {
            let mut cache = None;
            y = block_forward_impl(block, &y, true, path, &tile, Some(&mut cache))?;
            caches.push(cache);
        }
        let features = global_avg_pool(&y);
        let logits = self.classifier.logits(&features);
        let probs = softmax(&logits, self.n_classes);
        let loss = cross_entropy(&probs, self.n_classes, labels)?;
        let correct = argmax_rows(&logits, self.n_classes)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();

        let mut grad = self.zeros_like();
        let batch = x.batch();
        let (nc, nf) = (self.n_classes, self.classifier.n_features);
        let inv_b = S::from_f64(1.0 / batch as f64);
        // d logits = (p - onehot) / B
        let mut d_logits = probs;
        for (b, &label) in labels.iter().enumerate() {
            d_logits[b * nc + label] -= S::one();
        }
        for v in d_logits.iter_mut() {
            *v *= inv_b;
        }
        let mut d_features = vec![S::zero(); batch * nf];
        for b in 0..batch {
            for k in 0..nc {
                let dl = d_logits[b * nc + k];
                grad.classifier.mu[k] += dl;
                for f in 0..nf {
                    grad.classifier.w[k * nf + f] += dl * features[b * nf + f];
                    d_features[b * nf + f] += dl * self.classifier.w[k * nf + f];
                }
            }
        }
        // global average pool backward
        let inv_plane = S::from_f64(1.0 / y.plane_len() as f64);
        let mut dy = FeatureMap::zeros_with_layout(batch, y.channels(), y.height(), y.width(), y.layout());
        for b in 0..batch {
            for c in 0..y.channels() {
                let v = d_features[b * nf + c] * inv_plane;
                let off = dy.plane_offset(b, c);
                let len = dy.plane_len();
                dy.data_mut()[off..off + len].fill(v);
            }
        }
        for (i, cache) in caches.iter().enumerate().rev() {
            let cache = cache.as_ref().expect("train forward fills every cache");
            dy = block_backward(&self.blocks[i], &mut grad.blocks[i], cache, &dy)?;
        }
        let g_open = backward(&self.opening, x, &dy)?;
        grad.opening.spatial = g_open.d_spatial;
        Ok((loss, correct, grad))
    }

    /// Fraction of samples whose argmax logit matches the label, eval mode.
    pub fn accuracy(
        &mut self,
        images: &FeatureMap<S>,
        labels: &[usize],
        batch_size: usize,
    ) -> Result<f64, NetworkError> {
        let mut correct = 0usize;
        let total = labels.len();
        let mut start = 0;
        while start < total {
            let end = (start + batch_size).min(total);
            let idx: Vec<usize> = (start..end).collect();
            let batch = gather_into_batch(images, &idx);
            let logits = self.forward(&batch, false)?;
            correct += argmax_rows(&logits, self.n_classes)
                .iter()
                .zip(&labels[start..end])
                .filter(|(p, l)| p == l)
                .count();
            start = end;
        }
        Ok(correct as f64 / total as f64)
    }
}

fn gather_into_batch<S: Scalar>(pool: &FeatureMap<S>, indices: &[usize]) -> FeatureMap<S> {
    let plane = pool.plane_len();
    let mut data = Vec::with_capacity(indices.len() * pool.channels() * plane);
    for &i in indices {
        for c in 0..pool.channels() {
            data.extend_from_slice(pool.plane(i, c));
        }
    }
    FeatureMap::from_vec(
        indices.len(),
        pool.channels(),
        pool.height(),
        pool.width(),
        pool.layout(),
        data,
    )
    .expect("batch shape")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub len: usize,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub height: usize,
    pub width: usize,
    pub params: u64,
    pub mults: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub augment: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 10,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Momentum-SGD training over shuffled mini-batches; deterministic in `seed`.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    data: &Dataset<S>,
    hyper: &Hyper,
    seed: u64,
) -> Result<Vec<EpochStats>, TrainError> {
    if data.train_len() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.num_params();
    let mut velocity = vec![S::zero(); n];
    let mask = model.decay_mask();
    let mut trace = Vec::with_capacity(hyper.epochs);
    let mut indices: Vec<usize> = (0..data.train_len()).collect();
    for epoch in 0..hyper.epochs {
        let decays = hyper.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        let lr = hyper.lr * hyper.lr_decay_factor.powi(decays as i32);
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, chunk) in indices.chunks(hyper.batch_size.max(1)).enumerate() {
            let (mut batch, labels) = data.gather_train(chunk);
            if hyper.augment {
                batch = augment_flip_crop(&batch, &mut rng);
            }
            let (loss, batch_correct, grads) = model.loss_and_grads(&batch, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += batch_correct;
            let mut g = grads.params_flat();
            let mut p = model.params_flat();
            let (lr_s, mom, wd) =
                (S::from_f64(lr), S::from_f64(hyper.momentum), S::from_f64(hyper.weight_decay));
            for i in 0..n {
                if mask[i] {
                    g[i] += wd * p[i];
                }
                velocity[i] = mom * velocity[i] + g[i];
                p[i] -= lr_s * velocity[i];
            }
            model.set_params_flat(&p);
        }
        let val_acc = if data.val_len() > 0 {
            model.accuracy(&data.val_images, &data.val_labels, 256)?
        } else {
            f64::NAN
        };
        trace.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / data.train_len() as f64,
            train_acc: correct as f64 / data.train_len() as f64,
            val_acc,
        });
    }
    Ok(trace)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<S> {
    version: u32,
    model: Model<S>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

/// JSON checkpoint holding the config, every parameter array, and the running
/// norm statistics. Round-trips bit-exactly.
pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &std::path::Path) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &Checkpoint {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
    })?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &std::path::Path) -> Result<Model<S>, CheckpointError> {
    let file = std::fs::File::open(path)?;
    let ckpt: Checkpoint<S> = serde_json::from_reader(std::io::BufReader::new(file))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(ckpt.version));
    }
    Ok(ckpt.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::apply_reference;
    use crate::tensor::Layout;
    use rand::Rng;

    fn rand_map(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(b, c, h, w, Layout::WidthFastest, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn mono_config(stencil: StencilKind, rule: GroupRule) -> NetworkConfig {
        NetworkConfig { in_channels: 1, ..tiny_config(stencil, rule) }
    }

    fn tiny_config(stencil: StencilKind, rule: GroupRule) -> NetworkConfig {
        NetworkConfig {
            in_channels: 2,
            stage_widths: vec![4, 8],
            stage_steps: vec![1, 1],
            stage_strides: vec![1, 2],
            stencil,
            group_rule: rule,
        }
    }

    #[test]
    fn batch_norm_standardizes_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = rand_map(&mut rng, 4, 3, 5, 5);
        let mut p = NormParams::<f64>::new(3);
        let y = batch_norm(&x, &mut p, true);
        for c in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for b in 0..4 {
                for &v in y.plane(b, c) {
                    sum += v;
                    sq += v * v;
                }
            }
            let n = (4 * 25) as f64;
            let mean = sum / n;
            let var = sq / n - mean * mean;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_norm_constant_channel_returns_shift() {
        let x = FeatureMap::from_fn(2, 1, 3, 3, Layout::WidthFastest, |_, _, _, _| 7.5f64);
        let mut p = NormParams::<f64>::new(1);
        p.shift[0] = -2.0;
        let y = batch_norm(&x, &mut p, true);
        for &v in y.data() {
            assert!((v - -2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_eval_converges_to_train_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_map(&mut rng, 8, 2, 4, 4);
        let mut p = NormParams::<f64>::new(2);
        let mut train_out = batch_norm(&x, &mut p, true);
        for _ in 0..120 {
            train_out = batch_norm(&x, &mut p, true);
        }
        let eval_out = batch_norm(&x, &mut p, false);
        for (a, b) in eval_out.data().iter().zip(train_out.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_conv_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut block = Block {
            norm1: NormParams::<f64>::new(4),
            k1: LeanConvSpec::zeros(4, 4, 1, StencilKind::Five, true).unwrap(),
            norm2: NormParams::new(4),
            k2: LeanConvSpec::zeros(4, 4, 1, StencilKind::Five, true).unwrap(),
            dw: None,
        };
        let y = rand_map(&mut rng, 2, 4, 6, 6);
        let out =
            block_forward(&mut block, &y, true, KernelPath::Reference, &TileConfig::default())
                .unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn block_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut block = Block {
            norm1: NormParams::<f64>::new(4),
            k1: LeanConvSpec::random(&mut rng, 4, 4, 2, StencilKind::Full9, true).unwrap(),
            norm2: NormParams::new(4),
            k2: LeanConvSpec::random(&mut rng, 4, 4, 2, StencilKind::Full9, true).unwrap(),
            dw: None,
        };
        for c in 0..4 {
            block.norm1.scale[c] = rng.gen_range(0.5..1.5);
            block.norm1.shift[c] = rng.gen_range(-0.5..0.5);
            block.norm2.scale[c] = rng.gen_range(0.5..1.5);
            block.norm2.shift[c] = rng.gen_range(-0.5..0.5);
        }
        let y = rand_map(&mut rng, 3, 4, 5, 5);

        // naive oracle recomputed from parts
        let mut n1 = block.norm1.clone();
        let mut n2 = block.norm2.clone();
        let z1 = relu(&batch_norm(&y, &mut n1, true));
        let z2 = relu(&batch_norm(&apply_reference(&block.k1, &z1).unwrap(), &mut n2, true));
        let want = residual_add(&y, &apply_reference(&block.k2, &z2).unwrap()).unwrap();

        let got =
            block_forward(&mut block, &y, true, KernelPath::ShiftIm2col, &TileConfig::default())
                .unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn three1d_block_restores_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut block = Block {
            norm1: NormParams::<f64>::new(4),
            k1: LeanConvSpec::random(&mut rng, 4, 4, 4, StencilKind::Three1D(Direction::Horizontal), true)
                .unwrap(),
            norm2: NormParams::new(4),
            k2: LeanConvSpec::random(&mut rng, 4, 4, 4, StencilKind::Three1D(Direction::Vertical), true)
                .unwrap(),
            dw: None,
        };
        let y = rand_map(&mut rng, 2, 4, 6, 6);
        let fused =
            block_forward(&mut block, &y, false, KernelPath::FusedTiled, &TileConfig::default())
                .unwrap();
        assert_eq!(fused.layout(), y.layout());
        let reference =
            block_forward(&mut block, &y, false, KernelPath::Reference, &TileConfig::default())
                .unwrap();
        for (a, b) in fused.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn downsample_shape_and_zero_dw() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let x = rand_map(&mut rng, 2, 4, 6, 6);
        let dw = LeanConvSpec::<f64>::zeros(4, 4, 4, StencilKind::Five, false).unwrap();
        let out = downsample(&x, &dw).unwrap();
        assert_eq!(
            (out.batch(), out.channels(), out.height(), out.width()),
            (2, 8, 3, 3)
        );
        for c in 4..8 {
            for b in 0..2 {
                assert!(out.plane(b, c).iter().all(|v| *v == 0.0));
            }
        }
        // first half is the pooled input
        let pooled = avg_pool2(&x).unwrap();
        for c in 0..4 {
            assert_eq!(out.plane(0, c), pooled.plane(0, c));
        }
    }

    #[test]
    fn downsample_rejects_non_depthwise() {
        let x = FeatureMap::<f64>::zeros(1, 4, 4, 4);
        let bad = LeanConvSpec::<f64>::zeros(4, 4, 2, StencilKind::Five, false).unwrap();
        assert!(matches!(downsample(&x, &bad), Err(NetworkError::Config(_))));
    }

    #[test]
    fn softmax_and_loss_examples() {
        // zero weights: uniform probabilities, loss ln(n_c)
        let cls = Classifier::<f64> { w: vec![0.0; 4 * 6], mu: vec![0.0; 4], n_features: 6 };
        let logits = cls.logits(&vec![0.3; 2 * 6]);
        let probs = softmax(&logits, 4);
        for &p in &probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
        let loss = cross_entropy(&probs, 4, &[1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);

        // rows sum to one, matches naive oracle with max subtraction
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let probs = softmax(&logits, 4);
        for row in probs.chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for (r, row) in logits.chunks(4).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (k, &v) in row.iter().enumerate() {
                assert!((probs[r * 4 + k] - (v - m).exp() / z).abs() < 1e-12);
            }
        }

        // perfect one-hot: zero loss
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 3, &[1]).unwrap(), 0.0);
        // out-of-range label errors
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2, &[2]),
            Err(NetworkError::LabelOutOfRange { label: 2, n_classes: 2 })
        ));
    }

    #[test]
    fn res18_full9_conv_params_match_published_total() {
        let cfg = NetworkConfig::res18(StencilKind::Full9, GroupRule::Fixed(1));
        let model = Model::<f64>::build(&cfg, 10).unwrap();
        let total = model.conv_param_total();
        let rel = (total as f64 - 2.7e6).abs() / 2.7e6;
        assert!(rel < 0.02, "conv params {total} deviate {:.3}% from 2.7M", rel * 100.0);
        // depth of conv layers = 1 + 2 * sum(steps) + (#stride-2 stages)
        assert_eq!(model.conv_cost_table(1, 32, 32).len(), 1 + 2 * 8 + 3);
    }

    #[test]
    fn stencil_variants_preserve_cost_ordering() {
        let n_classes = 10;
        let p9 = Model::<f64>::build(&NetworkConfig::res18(StencilKind::Full9, GroupRule::Fixed(1)), n_classes)
            .unwrap();
        let p5 = Model::<f64>::build(&NetworkConfig::res18(StencilKind::Five, GroupRule::Fixed(1)), n_classes)
            .unwrap();
        let p3 = Model::<f64>::build(
            &NetworkConfig::res18(StencilKind::Three1D(Direction::Horizontal), GroupRule::Fixed(1)),
            n_classes,
        )
        .unwrap();
        assert!(p9.conv_param_total() > p5.conv_param_total());
        assert!(p5.conv_param_total() > p3.conv_param_total());
        let m = |m: &Model<f64>| m.conv_mult_total(1, 32, 32);
        assert!(m(&p9) > m(&p5) && m(&p5) > m(&p3));
    }

    #[test]
    fn registry_sum_matches_flat_params() {
        let cfg = tiny_config(StencilKind::Five, GroupRule::Fixed(2));
        let model = Model::<f64>::init(&cfg, 3, 1).unwrap();
        let registry = model.param_registry();
        let registry_total: usize = registry.iter().map(|e| e.len).sum();
        assert_eq!(registry_total, model.num_params());
        assert_eq!(model.params_flat().len(), registry_total);
        // conv operator params are a subset of the registry
        let conv_total: usize = registry
            .iter()
            .filter(|e| e.name.contains(".k1") || e.name.contains(".k2") || e.name.contains(".dw") || e.name.starts_with("opening"))
            .map(|e| e.len)
            .sum();
        assert_eq!(conv_total as u64, model.conv_param_total());
    }

    #[test]
    fn params_flat_round_trip() {
        let cfg = tiny_config(StencilKind::Full9, GroupRule::Fixed(1));
        let mut model = Model::<f64>::init(&cfg, 4, 2).unwrap();
        let p = model.params_flat();
        let mut shifted = p.clone();
        for v in shifted.iter_mut() {
            *v += 0.5;
        }
        model.set_params_flat(&shifted);
        assert_eq!(model.params_flat(), shifted);
        model.set_params_flat(&p);
        assert_eq!(model.params_flat(), p);
    }

    #[test]
    fn zero_init_network_features_are_pooled_opening_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let cfg = tiny_config(StencilKind::Five, GroupRule::Fixed(1));
        let mut model = Model::<f64>::build(&cfg, 3).unwrap();
        // randomize only the opening layer
        for v in model.opening.spatial.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x = rand_map(&mut rng, 2, 2, 8, 8);
        let y = model.features(&x, false).unwrap();
        let opening = apply_reference(&model.opening, &x).unwrap();
        let pooled = avg_pool2(&opening).unwrap();
        // first-stage channels survive the zero transition; new ones stay zero
        for b in 0..2 {
            for c in 0..4 {
                for (a, w) in y.plane(b, c).iter().zip(pooled.plane(b, c)) {
                    assert!((a - w).abs() < 1e-12);
                }
            }
            for c in 4..8 {
                assert!(y.plane(b, c).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_central_differences() {
        let cfg = NetworkConfig {
            in_channels: 2,
            stage_widths: vec![4],
            stage_steps: vec![1],
            stage_strides: vec![1],
            stencil: StencilKind::Full9,
            group_rule: GroupRule::Fixed(1),
        };
        let mut model = Model::<f64>::init(&cfg, 3, 5).unwrap();
        model.path = KernelPath::Reference;
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let x = rand_map(&mut rng, 2, 2, 6, 6);
        let labels = vec![0usize, 2];

        let (_, _, grads) = model.loss_and_grads(&x, &labels).unwrap();
        let g = grads.params_flat();
        let p = model.params_flat();
        let step = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus[i] += step;
            let mut minus = p.clone();
            minus[i] -= step;
            let eval = |params: &[f64], model: &mut Model<f64>| {
                model.set_params_flat(params);
                let mut probe = model.clone(); // keep running stats untouched
                let logits = probe.forward(&x, true).unwrap();
                let probs = softmax(&logits, 3);
                cross_entropy(&probs, 3, &labels).unwrap()
            };
            let fd = (eval(&plus, &mut model) - eval(&minus, &mut model)) / (2.0 * step);
            let rel = (g[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
            assert!(rel < 1e-6, "param {i}: analytic {} vs fd {fd}", g[i]);
        }
        model.set_params_flat(&p);
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn transition_gradients_match_central_differences() {
        let cfg = tiny_config(StencilKind::Five, GroupRule::Fixed(2));
        let mut model = Model::<f64>::init(&cfg, 3, 6).unwrap();
        model.path = KernelPath::ShiftIm2col;
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let x = rand_map(&mut rng, 2, 2, 6, 6);
        let labels = vec![1usize, 2];
        let (_, _, grads) = model.loss_and_grads(&x, &labels).unwrap();
        let g = grads.params_flat();
        let p = model.params_flat();
        let step = 1e-5;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus[i] += step;
            let mut minus = p.clone();
            minus[i] -= step;
            let eval = |params: &[f64], model: &mut Model<f64>| {
                model.set_params_flat(params);
                let mut probe = model.clone();
                let logits = probe.forward(&x, true).unwrap();
                let probs = softmax(&logits, 3);
                cross_entropy(&probs, 3, &labels).unwrap()
            };
            let fd = (eval(&plus, &mut model) - eval(&minus, &mut model)) / (2.0 * step);
            let rel = (g[i] - fd).abs() / fd.abs().max(1.0);
            assert!(rel < 1e-6, "param {i}: analytic {} vs fd {fd}", g[i]);
        }
        model.set_params_flat(&p);
    }

    #[test]
    fn zero_lr_training_is_a_no_op() {
        let cfg = mono_config(StencilKind::Five, GroupRule::DepthWise);
        let mut model = Model::<f64>::init(&cfg, 4, 7).unwrap();
        let data = crate::data::make_synthetic::<f64>(4, 40, 8, 3);
        let before = model.params_flat();
        // one full batch per epoch so the batch-norm statistics are identical
        // across epochs and the loss is exactly constant
        let hyper =
            Hyper { lr: 0.0, epochs: 3, batch_size: data.train_len(), augment: false, ..Hyper::default() };
        let trace = train(&mut model, &data, &hyper, 1).unwrap();
        assert_eq!(model.params_flat(), before);
        assert_eq!(trace.len(), 3);
        for w in trace.windows(2) {
            assert!((w[0].train_loss - w[1].train_loss).abs() < 1e-9);
        }
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let cfg = mono_config(StencilKind::Five, GroupRule::Fixed(2));
        let data = crate::data::make_synthetic::<f64>(4, 64, 8, 5);
        let hyper = Hyper { epochs: 2, batch_size: 16, lr: 0.02, ..Hyper::default() };
        let mut m1 = Model::<f64>::init(&cfg, 4, 9).unwrap();
        let mut m2 = Model::<f64>::init(&cfg, 4, 9).unwrap();
        let t1 = train(&mut m1, &data, &hyper, 11).unwrap();
        let t2 = train(&mut m2, &data, &hyper, 11).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1.params_flat(), m2.params_flat());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = mono_config(StencilKind::Three1D(Direction::Horizontal), GroupRule::DepthWise);
        let mut model = Model::<f64>::init(&cfg, 3, 13).unwrap();
        // give the running stats non-trivial values
        let data = crate::data::make_synthetic::<f64>(3, 24, 8, 2);
        let hyper = Hyper { epochs: 1, batch_size: 8, lr: 0.01, ..Hyper::default() };
        train(&mut model, &data, &hyper, 3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let back: Model<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = NetworkConfig::res18(StencilKind::Full9, GroupRule::Fixed(1));
        cfg.stage_strides[1] = 3;
        assert!(matches!(cfg.validate(), Err(NetworkError::Config(_))));
        let mut cfg = NetworkConfig::res18(StencilKind::Full9, GroupRule::Fixed(1));
        cfg.stage_widths[1] = 100; // not a doubling
        assert!(matches!(cfg.validate(), Err(NetworkError::Config(_))));
        let mut cfg = NetworkConfig::res18(StencilKind::Full9, GroupRule::Fixed(1));
        cfg.stage_steps.pop();
        assert!(matches!(cfg.validate(), Err(NetworkError::Config(_))));
    }

    #[test]
    fn group_rules_always_divide() {
        for rule in [
            GroupRule::Fixed(3),
            GroupRule::DepthWise,
            GroupRule::CinOver(4),
            GroupRule::Ratio(0.125),
        ] {
            for (ci, co) in [(8, 8), (8, 16), (12, 24), (16, 16), (32, 64)] {
                let g = rule.groups_for(ci, co, StencilKind::Five);
                assert!(g >= 1 && ci % g == 0 && co % g == 0, "{rule:?} ({ci},{co}) -> {g}");
            }
        }
        assert_eq!(GroupRule::DepthWise.groups_for(16, 16, StencilKind::Five), 16);
        assert_eq!(GroupRule::Fixed(1).groups_for(16, 32, StencilKind::Full9), 1);
        assert_eq!(GroupRule::CinOver(4).groups_for(16, 16, StencilKind::Five), 4);
    }
}
