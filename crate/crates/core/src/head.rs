//! The trainable head that sits on a frozen feature extractor:
//! linear bottleneck, batch normalization and a linear classifier.
//!
//! Parameters are kept in double precision. The wire payload stores them as
//! IEEE-754 singles in a fixed field order:
//!
//! ```text
//! "HEAD" | in_dim u32 | bottleneck u32 | classes u32 | mode u8
//! bottleneck_weight | bottleneck_bias | bn.gamma | bn.beta
//! bn.running_mean | bn.running_var | classifier_weight | classifier_bias
//! ```

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::math::{axpy, dot, sqrt, Matrix};
use crate::rng::{rng_from, stream};

pub const DEFAULT_BOTTLENECK: usize = 256;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
pub const WIRE_MAGIC: [u8; 4] = *b"HEAD";
pub const WIRE_HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierMode {
    Trainable,
    /// Rows are fixed simplex-ETF prototypes, bias fixed at zero.
    EtfFixed,
}

impl ClassifierMode {
    fn wire_tag(self) -> u8 {
        match self {
            Self::Trainable => 0,
            Self::EtfFixed => 1,
        }
    }
}

/// Which batch-norm statistics a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; requires at least two rows.
    Train,
    /// Running statistics only.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub in_dim: usize,
    pub bottleneck_dim: usize,
    pub num_classes: usize,
    /// `bottleneck_dim x in_dim`, row-major.
    pub bottleneck_weight: Vec<f64>,
    pub bottleneck_bias: Vec<f64>,
    pub bn: BatchNormState,
    /// `num_classes x bottleneck_dim`, row-major.
    pub classifier_weight: Vec<f64>,
    pub classifier_bias: Vec<f64>,
    pub classifier_mode: ClassifierMode,
}

/// Outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Post-batch-norm bottleneck features.
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
}

/// A train-mode forward pass with everything backward needs.
#[derive(Debug, Clone)]
pub struct TrainPass {
    input: Matrix,
    normalized: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    pub output: ForwardOutput,
}

/// Gradients congruent to the trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub bottleneck_weight: Vec<f64>,
    pub bottleneck_bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub classifier_weight: Vec<f64>,
    pub classifier_bias: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros_like(p: &HeadParams) -> Self {
        Self {
            bottleneck_weight: vec![0.0; p.bottleneck_weight.len()],
            bottleneck_bias: vec![0.0; p.bottleneck_dim],
            gamma: vec![0.0; p.bottleneck_dim],
            beta: vec![0.0; p.bottleneck_dim],
            classifier_weight: vec![0.0; p.classifier_weight.len()],
            classifier_bias: vec![0.0; p.num_classes],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.bottleneck_weight,
            &self.bottleneck_bias,
            &self.gamma,
            &self.beta,
            &self.classifier_weight,
            &self.classifier_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.bottleneck_weight,
            &mut self.bottleneck_bias,
            &mut self.gamma,
            &mut self.beta,
            &mut self.classifier_weight,
            &mut self.classifier_bias,
        ]
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &HeadGrads) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(alpha, src, dst);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `C` unit vectors in `dim` dimensions with pairwise inner products
/// `-1/(C-1)`, built from the Helmert basis of the sum-zero hyperplane and
/// embedded in the leading `C - 1` coordinates.
pub fn init_etf(num_classes: usize, dim: usize) -> Result<Matrix> {
    if num_classes == 0 {
        return Err(invalid("ETF needs at least one class"));
    }
    if dim + 1 < num_classes {
        return Err(invalid(alloc::format!(
            "ETF with {num_classes} classes needs dim >= {}, got {dim}",
            num_classes - 1
        )));
    }
    let mut out = Matrix::zeros(num_classes, dim);
    if num_classes == 1 {
        if dim > 0 {
            out.set(0, 0, 1.0);
        }
        return Ok(out);
    }
    let scale = sqrt(num_classes as f64 / (num_classes - 1) as f64);
    for k in 1..num_classes {
        // h_k = (1, .., 1, -k, 0, ..) / sqrt(k (k + 1)) with k leading ones
        let norm = sqrt((k * (k + 1)) as f64);
        for c in 0..num_classes {
            let h = match c.cmp(&k) {
                core::cmp::Ordering::Less => 1.0,
                core::cmp::Ordering::Equal => -(k as f64),
                core::cmp::Ordering::Greater => 0.0,
            };
            out.set(c, k - 1, scale * h / norm);
        }
    }
    Ok(out)
}

impl HeadParams {
    /// Fan-in uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(
        in_dim: usize,
        bottleneck_dim: usize,
        num_classes: usize,
        classifier_mode: ClassifierMode,
        seed: u64,
    ) -> Result<Self> {
        if in_dim == 0 || bottleneck_dim == 0 || num_classes == 0 {
            return Err(invalid("head dimensions must be positive"));
        }
        let mut rng = rng_from(seed, &[stream::HEAD_INIT]);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / sqrt(fan_in as f64);
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let bottleneck_weight = uniform(bottleneck_dim * in_dim, in_dim);
        let bottleneck_bias = uniform(bottleneck_dim, in_dim);
        let (classifier_weight, classifier_bias) = match classifier_mode {
            ClassifierMode::Trainable => (
                uniform(num_classes * bottleneck_dim, bottleneck_dim),
                uniform(num_classes, bottleneck_dim),
            ),
            ClassifierMode::EtfFixed => (
                init_etf(num_classes, bottleneck_dim)?.into_vec(),
                vec![0.0; num_classes],
            ),
        };
        Ok(Self {
            in_dim,
            bottleneck_dim,
            num_classes,
            bottleneck_weight,
            bottleneck_bias,
            bn: BatchNormState::new(bottleneck_dim),
            classifier_weight,
            classifier_bias,
            classifier_mode,
        })
    }

    /// Number of learnable scalars: both linear layers plus the batch-norm
    /// affine parameters. Running statistics are not counted.
    pub fn parameter_count(&self) -> usize {
        self.bottleneck_dim * self.in_dim
            + 2 * self.bottleneck_dim
            + self.bottleneck_dim
            + self.num_classes * self.bottleneck_dim
            + self.num_classes
    }

    /// Number of scalars in the wire payload (parameters + running statistics).
    pub fn state_len(&self) -> usize {
        self.parameter_count() + 2 * self.bottleneck_dim
    }

    pub fn payload_len(&self) -> usize {
        WIRE_HEADER_LEN + 4 * self.state_len()
    }

    /// All tensors in wire order.
    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.bottleneck_weight,
            &self.bottleneck_bias,
            &self.bn.gamma,
            &self.bn.beta,
            &self.bn.running_mean,
            &self.bn.running_var,
            &self.classifier_weight,
            &self.classifier_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.bottleneck_weight,
            &mut self.bottleneck_bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.bn.running_mean,
            &mut self.bn.running_var,
            &mut self.classifier_weight,
            &mut self.classifier_bias,
        ]
    }

    /// Trainable tensors in the same order as [`HeadGrads::tensors`].
    pub fn trainable(&self) -> [&[f64]; 6] {
        [
            &self.bottleneck_weight,
            &self.bottleneck_bias,
            &self.bn.gamma,
            &self.bn.beta,
            &self.classifier_weight,
            &self.classifier_bias,
        ]
    }

    pub fn classifier_is_frozen(&self) -> bool {
        self.classifier_mode == ClassifierMode::EtfFixed
    }

    pub fn same_shape(&self, other: &HeadParams) -> bool {
        self.in_dim == other.in_dim
            && self.bottleneck_dim == other.bottleneck_dim
            && self.num_classes == other.num_classes
            && self.classifier_mode == other.classifier_mode
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                actual: batch.cols(),
            });
        }
        if batch.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }

    fn bottleneck(&self, batch: &Matrix) -> Matrix {
        let mut z = Matrix::zeros(batch.rows(), self.bottleneck_dim);
        for b in 0..batch.rows() {
            let x = batch.row(b);
            for (j, out) in z.row_mut(b).iter_mut().enumerate() {
                let w = &self.bottleneck_weight[j * self.in_dim..(j + 1) * self.in_dim];
                *out = dot(w, x) + self.bottleneck_bias[j];
            }
        }
        z
    }

    fn classify(&self, features: Matrix) -> ForwardOutput {
        let d = self.bottleneck_dim;
        let mut logits = Matrix::zeros(features.rows(), self.num_classes);
        for b in 0..features.rows() {
            let f = features.row(b);
            for (c, out) in logits.row_mut(b).iter_mut().enumerate() {
                *out =
                    dot(&self.classifier_weight[c * d..(c + 1) * d], f) + self.classifier_bias[c];
            }
        }
        let probs = logits.softmax_rows();
        ForwardOutput {
            features,
            logits,
            probs,
        }
    }

    pub fn forward(&self, batch: &Matrix, mode: Mode) -> Result<ForwardOutput> {
        match mode {
            Mode::Train => Ok(self.forward_train(batch)?.output),
            Mode::Eval => {
                self.check_batch(batch)?;
                let mut z = self.bottleneck(batch);
                let bn = &self.bn;
                let scale: Vec<f64> = bn
                    .gamma
                    .iter()
                    .zip(&bn.running_var)
                    .map(|(g, v)| g / sqrt(v + bn.epsilon))
                    .collect();
                for b in 0..z.rows() {
                    for (j, v) in z.row_mut(b).iter_mut().enumerate() {
                        *v = (*v - bn.running_mean[j]) * scale[j] + bn.beta[j];
                    }
                }
                Ok(self.classify(z))
            }
        }
    }

    pub fn forward_train(&self, batch: &Matrix) -> Result<TrainPass> {
        self.check_batch(batch)?;
        if batch.rows() < 2 {
            return Err(invalid("train-mode batch norm needs at least two samples"));
        }
        let z = self.bottleneck(batch);
        let n = z.rows() as f64;
        let batch_mean = z.mean_rows();
        let mut batch_var = vec![0.0; self.bottleneck_dim];
        for r in z.row_iter() {
            for ((v, &x), &m) in batch_var.iter_mut().zip(r).zip(&batch_mean) {
                *v += (x - m) * (x - m);
            }
        }
        batch_var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = batch_var
            .iter()
            .map(|v| 1.0 / sqrt(v + self.bn.epsilon))
            .collect();
        let mut normalized = z;
        let mut features = Matrix::zeros(normalized.rows(), self.bottleneck_dim);
        for b in 0..normalized.rows() {
            let zr = normalized.row_mut(b);
            for j in 0..self.bottleneck_dim {
                zr[j] = (zr[j] - batch_mean[j]) * inv_std[j];
            }
            let fr = features.row_mut(b);
            for j in 0..self.bottleneck_dim {
                fr[j] = self.bn.gamma[j] * zr[j] + self.bn.beta[j];
            }
        }
        Ok(TrainPass {
            input: batch.clone(),
            normalized,
            inv_std,
            batch_mean,
            batch_var,
            output: self.classify(features),
        })
    }

    /// Recomputes a train-mode forward pass and backpropagates `grad_logits`.
    pub fn backward(&self, batch: &Matrix, grad_logits: &Matrix) -> Result<HeadGrads> {
        self.forward_train(batch)?.backward(self, grad_logits)
    }

    /// Folds the batch statistics of `pass` into the running statistics
    /// (unbiased variance, as in common frameworks).
    pub fn update_running_stats(&mut self, pass: &TrainPass) {
        let m = self.bn.momentum;
        let n = pass.input.rows() as f64;
        let unbias = n / (n - 1.0);
        for j in 0..self.bottleneck_dim {
            self.bn.running_mean[j] = (1.0 - m) * self.bn.running_mean[j] + m * pass.batch_mean[j];
            self.bn.running_var[j] =
                (1.0 - m) * self.bn.running_var[j] + m * pass.batch_var[j] * unbias;
        }
    }

    /// Rounds every tensor to single precision, as the wire does.
    pub fn quantize(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_len());
        out.extend_from_slice(&WIRE_MAGIC);
        out.extend_from_slice(&(self.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.bottleneck_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.push(self.classifier_mode.wire_tag());
        for t in self.tensors() {
            for &v in t {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < WIRE_HEADER_LEN {
            return Err(Error::Truncated {
                section: "head header",
                expected: WIRE_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != WIRE_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (in_dim, bottleneck_dim, num_classes) = (word(4), word(8), word(12));
        let classifier_mode = match bytes[16] {
            0 => ClassifierMode::Trainable,
            1 => ClassifierMode::EtfFixed,
            t => {
                return Err(Error::Malformed(alloc::format!(
                    "unknown classifier mode {t}"
                )))
            }
        };
        if in_dim == 0 || bottleneck_dim == 0 || num_classes == 0 {
            return Err(Error::Malformed("zero head dimension".into()));
        }
        let mut head = Self {
            in_dim,
            bottleneck_dim,
            num_classes,
            bottleneck_weight: vec![0.0; bottleneck_dim * in_dim],
            bottleneck_bias: vec![0.0; bottleneck_dim],
            bn: BatchNormState::new(bottleneck_dim),
            classifier_weight: vec![0.0; num_classes * bottleneck_dim],
            classifier_bias: vec![0.0; num_classes],
            classifier_mode,
        };
        let expected = head.payload_len();
        if bytes.len() != expected {
            return Err(if bytes.len() < expected {
                Error::Truncated {
                    section: "head parameters",
                    expected,
                    found: bytes.len(),
                }
            } else {
                Error::Malformed("trailing bytes after head parameters".into())
            });
        }
        let mut words = bytes[WIRE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
        for t in head.tensors_mut() {
            for v in t.iter_mut() {
                *v = words.next().expect("length checked");
            }
        }
        if !head.is_finite() {
            return Err(Error::NonFinite("head payload"));
        }
        if head.bn.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Malformed("negative running variance".into()));
        }
        Ok(head)
    }
}

impl TrainPass {
    pub fn rows(&self) -> usize {
        self.input.rows()
    }

    pub fn backward(&self, params: &HeadParams, grad_logits: &Matrix) -> Result<HeadGrads> {
        let b = self.input.rows();
        if grad_logits.rows() != b || grad_logits.cols() != params.num_classes {
            return Err(Error::DimensionMismatch {
                expected: b * params.num_classes,
                actual: grad_logits.rows() * grad_logits.cols(),
            });
        }
        let d = params.bottleneck_dim;
        let mut g = HeadGrads::zeros_like(params);
        let features = &self.output.features;

        // classifier
        let mut grad_features = Matrix::zeros(b, d);
        for i in 0..b {
            let gl = grad_logits.row(i);
            for (c, &gc) in gl.iter().enumerate() {
                if gc == 0.0 {
                    continue;
                }
                if !params.classifier_is_frozen() {
                    axpy(
                        gc,
                        features.row(i),
                        &mut g.classifier_weight[c * d..(c + 1) * d],
                    );
                    g.classifier_bias[c] += gc;
                }
                axpy(
                    gc,
                    &params.classifier_weight[c * d..(c + 1) * d],
                    grad_features.row_mut(i),
                );
            }
        }

        // batch norm
        let mut sum_g = vec![0.0; d];
        let mut sum_g_xhat = vec![0.0; d];
        for i in 0..b {
            let gf = grad_features.row(i);
            let xh = self.normalized.row(i);
            for j in 0..d {
                g.beta[j] += gf[j];
                g.gamma[j] += gf[j] * xh[j];
                let gx = gf[j] * params.bn.gamma[j];
                sum_g[j] += gx;
                sum_g_xhat[j] += gx * xh[j];
            }
        }
        let n = b as f64;
        let mut grad_z = grad_features;
        for i in 0..b {
            let xh = self.normalized.row(i);
            let gz = grad_z.row_mut(i);
            for j in 0..d {
                let gx = gz[j] * params.bn.gamma[j];
                gz[j] = self.inv_std[j] / n * (n * gx - sum_g[j] - xh[j] * sum_g_xhat[j]);
            }
        }

        // bottleneck
        let in_dim = params.in_dim;
        for i in 0..b {
            let x = self.input.row(i);
            let gz = grad_z.row(i);
            for (j, &gj) in gz.iter().enumerate().take(d) {
                if gj != 0.0 {
                    axpy(
                        gj,
                        x,
                        &mut g.bottleneck_weight[j * in_dim..(j + 1) * in_dim],
                    );
                }
                g.bottleneck_bias[j] += gj;
            }
        }
        Ok(g)
    }
}

/// Learning-rate schedule over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 + gamma * progress)^(-power)`, progress in `[0, 1]`.
    InverseDecay {
        gamma: f64,
        power: f64,
    },
}

impl LrSchedule {
    pub fn factor(&self, progress: f64) -> f64 {
        match *self {
            Self::Constant => 1.0,
            Self::InverseDecay { gamma, power } => libm::pow(1.0 + gamma * progress, -power),
        }
    }
}

/// Momentum SGD with coupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: HeadGrads,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &HeadParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: HeadGrads::zeros_like(params),
            learning_rate,
            momentum,
            weight_decay,
        }
    }
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
/// Fixed ETF classifier tensors are never touched.
pub fn sgd_step(params: &mut HeadParams, grads: &HeadGrads, opt: &mut OptimizerState) {
    let frozen = params.classifier_is_frozen();
    let (lr, mom, wd) = (opt.learning_rate, opt.momentum, opt.weight_decay);
    let targets: [&mut Vec<f64>; 6] = [
        &mut params.bottleneck_weight,
        &mut params.bottleneck_bias,
        &mut params.bn.gamma,
        &mut params.bn.beta,
        &mut params.classifier_weight,
        &mut params.classifier_bias,
    ];
    for (k, ((p, g), v)) in targets
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.velocity.tensors_mut())
        .enumerate()
    {
        if frozen && k >= 4 {
            continue;
        }
        for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mom * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
}
