//! Tiny fixed-architecture frame classifier with hand-derived backward pass.
//!
//! ```text
//! input HxW (1 channel, [0,1])
//!   -> conv 3x3, 8 filters, pad 1 -> relu -> maxpool 2x2
//!   -> conv 3x3, 16 filters, pad 1 -> relu -> global average pool
//!   -> linear 16 -> 2
//! ```
//!
//! Parameters live in one flat `f32` vector. The engine is generic over the
//! float type: training runs in `f32`, gradient checks in `f64`.

use num_traits::Float;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Checkpoint, DataError, Frame};
use crate::losses::{self, ClassWeights, LossConfig, LossError, LossKind, TargetDist};
use crate::rng::rng_for;

pub const CONV1_FILTERS: usize = 8;
pub const CONV2_FILTERS: usize = 16;
pub const KERNEL: usize = 3;
pub const CLASSES: usize = 2;

const K2: usize = KERNEL * KERNEL;
const C1W: usize = 0;
const C1B: usize = C1W + CONV1_FILTERS * K2;
const C2W: usize = C1B + CONV1_FILTERS;
const C2B: usize = C2W + CONV2_FILTERS * CONV1_FILTERS * K2;
const HW: usize = C2B + CONV2_FILTERS;
const HB: usize = HW + CLASSES * CONV2_FILTERS;
/// Total trainable parameter count.
pub const PARAM_COUNT: usize = HB + CLASSES;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("input is {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("input size must be even and at least 2, got {0}x{1}")]
    InvalidInputSize(usize, usize),
    #[error("gradient buffer has {found} entries, expected {expected}")]
    GradientLength { expected: usize, found: usize },
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
    #[error("stale forward cache: parameters changed since the forward pass")]
    StaleCache,
    #[error("logit gradient count {found} does not match batch size {expected}")]
    BatchMismatch { expected: usize, found: usize },
    #[error("epoch {epoch} out of range for a {epochs}-epoch schedule")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid augmentation config: {0}")]
    InvalidAugment(String),
    #[error("invalid training config: {0}")]
    InvalidTraining(String),
    #[error("checkpoint does not describe this architecture: {0}")]
    CheckpointShape(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    input_h: usize,
    input_w: usize,
    weights: Vec<f32>,
}

impl ModelParams {
    pub fn zeros(input_h: usize, input_w: usize) -> Result<Self, NnetError> {
        check_input_size(input_h, input_w)?;
        Ok(ModelParams {
            input_h,
            input_w,
            weights: vec![0.0; PARAM_COUNT],
        })
    }

    /// He-uniform conv weights; zero biases and a zero head, so every model
    /// starts at p = (0.5, 0.5). A random head can start the softmax deep in
    /// one class, where the bounded losses have almost no gradient.
    pub fn init(input_h: usize, input_w: usize, seed: u64) -> Result<Self, NnetError> {
        let mut params = Self::zeros(input_h, input_w)?;
        let mut rng = rng_for(seed, &[0x1417]);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut params.weights[range] {
                *w = dist.sample(&mut rng);
            }
        };
        fill(C1W..C1B, K2);
        fill(C2W..C2B, CONV1_FILTERS * K2);
        Ok(params)
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.input_w, self.input_h)
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn head_bias_mut(&mut self) -> &mut [f32] {
        &mut self.weights[HB..]
    }

    pub fn layer_shapes() -> Vec<Vec<usize>> {
        vec![
            vec![CONV1_FILTERS, 1, KERNEL, KERNEL],
            vec![CONV1_FILTERS],
            vec![CONV2_FILTERS, CONV1_FILTERS, KERNEL, KERNEL],
            vec![CONV2_FILTERS],
            vec![CLASSES, CONV2_FILTERS],
            vec![CLASSES],
        ]
    }

    /// Content hash, used to detect stale forward caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::fnv1a(&(self.input_h as u64).to_le_bytes());
        h ^= (self.input_w as u64).rotate_left(17);
        for w in &self.weights {
            h = (h ^ w.to_bits() as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// The trailing `[0, H, W]` shape entry carries the input geometry and
    /// owns no weights.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut layer_shapes = Self::layer_shapes();
        layer_shapes.push(vec![0, self.input_h, self.input_w]);
        Checkpoint {
            layer_shapes,
            weights: self.weights.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NnetError> {
        let expected = Self::layer_shapes();
        let n = expected.len();
        if ckpt.layer_shapes.len() != n + 1 || ckpt.layer_shapes[..n] != expected[..] {
            return Err(NnetError::CheckpointShape(format!(
                "layer shapes {:?}",
                ckpt.layer_shapes
            )));
        }
        let geometry = &ckpt.layer_shapes[n];
        if geometry.len() != 3 || geometry[0] != 0 {
            return Err(NnetError::CheckpointShape(format!(
                "input geometry {geometry:?}"
            )));
        }
        check_input_size(geometry[1], geometry[2])?;
        if ckpt.weights.len() != PARAM_COUNT {
            return Err(NnetError::CheckpointShape(format!(
                "{} weights",
                ckpt.weights.len()
            )));
        }
        Ok(ModelParams {
            input_h: geometry[1],
            input_w: geometry[2],
            weights: ckpt.weights.clone(),
        })
    }
}

fn check_input_size(h: usize, w: usize) -> Result<(), NnetError> {
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(NnetError::InvalidInputSize(w, h));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Engine

#[derive(Debug, Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
}

impl Geometry {
    fn ph(&self) -> usize {
        self.h / 2
    }
    fn pw(&self) -> usize {
        self.w / 2
    }
}

const NO_ARG: u32 = u32::MAX;

/// Fills `col[(c*9 + ky*3 + kx) * h*w + y*w + x] = src[c][y+ky-1][x+kx-1]`
/// (zero outside the image).
fn im2col<T: Float>(src: &[T], channels: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &src[c * hw..][..hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let dst = &mut col[(c * K2 + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let row = &mut dst[y * w..][..w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        row.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            row[0] = T::zero();
                            row[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => row.copy_from_slice(srow),
                        _ => {
                            row[..w - 1].copy_from_slice(&srow[1..]);
                            row[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters column gradients back onto the planes.
fn col2im_add<T: Float>(col: &[T], channels: usize, h: usize, w: usize, dst: &mut [T]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut dst[c * hw..][..hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let src = &col[(c * K2 + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let row = &src[y * w..][..w];
                    let prow = &mut plane[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            for (d, &s) in prow[..w - 1].iter_mut().zip(&row[1..]) {
                                *d = *d + s;
                            }
                        }
                        1 => {
                            for (d, &s) in prow.iter_mut().zip(row) {
                                *d = *d + s;
                            }
                        }
                        _ => {
                            for (d, &s) in prow[1..].iter_mut().zip(&row[..w - 1]) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Activations of one sample, kept for the backward pass.
#[derive(Debug, Clone)]
struct Activations<T> {
    col1: Vec<T>,
    a1: Vec<T>,
    p1: Vec<T>,
    pool_arg: Vec<u32>,
    col2: Vec<T>,
    a2: Vec<T>,
    gap: [T; CONV2_FILTERS],
    logits: [T; CLASSES],
}

impl<T: Float> Activations<T> {
    fn new(g: Geometry) -> Self {
        let (hw, phw) = (g.h * g.w, g.ph() * g.pw());
        Activations {
            col1: vec![T::zero(); K2 * hw],
            a1: vec![T::zero(); CONV1_FILTERS * hw],
            p1: vec![T::zero(); CONV1_FILTERS * phw],
            pool_arg: vec![NO_ARG; CONV1_FILTERS * phw],
            col2: vec![T::zero(); CONV1_FILTERS * K2 * phw],
            a2: vec![T::zero(); CONV2_FILTERS * phw],
            gap: [T::zero(); CONV2_FILTERS],
            logits: [T::zero(); CLASSES],
        }
    }
}

#[derive(Debug, Clone)]
struct Scratch<T> {
    da2: Vec<T>,
    dcol2: Vec<T>,
    dp1: Vec<T>,
    da1: Vec<T>,
}

impl<T: Float> Scratch<T> {
    fn new(g: Geometry) -> Self {
        let (hw, phw) = (g.h * g.w, g.ph() * g.pw());
        Scratch {
            da2: vec![T::zero(); CONV2_FILTERS * phw],
            dcol2: vec![T::zero(); CONV1_FILTERS * K2 * phw],
            dp1: vec![T::zero(); CONV1_FILTERS * phw],
            da1: vec![T::zero(); CONV1_FILTERS * hw],
        }
    }
}

#[inline]
fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
fn dot<T: Float>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

fn forward_sample<T: Float>(wts: &[T], g: Geometry, input: &[T], act: &mut Activations<T>) {
    let (h, w, ph, pw) = (g.h, g.w, g.ph(), g.pw());
    let (hw, phw) = (h * w, ph * pw);

    im2col(input, 1, h, w, &mut act.col1);
    for c in 0..CONV1_FILTERS {
        let plane = &mut act.a1[c * hw..][..hw];
        plane.fill(wts[C1B + c]);
        for k in 0..K2 {
            axpy(wts[C1W + c * K2 + k], &act.col1[k * hw..][..hw], plane);
        }
    }

    // relu + 2x2 max pool
    for c in 0..CONV1_FILTERS {
        let plane = &act.a1[c * hw..][..hw];
        for py in 0..ph {
            for px in 0..pw {
                let mut best = T::zero();
                let mut arg = NO_ARG;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (2 * py + dy) * w + 2 * px + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            arg = idx as u32;
                        }
                    }
                }
                act.p1[c * phw + py * pw + px] = best;
                act.pool_arg[c * phw + py * pw + px] = arg;
            }
        }
    }

    im2col(&act.p1, CONV1_FILTERS, ph, pw, &mut act.col2);
    let inv_area = T::one() / T::from(phw).expect("area");
    let fan = CONV1_FILTERS * K2;
    for o in 0..CONV2_FILTERS {
        let plane = &mut act.a2[o * phw..][..phw];
        plane.fill(wts[C2B + o]);
        for k in 0..fan {
            axpy(wts[C2W + o * fan + k], &act.col2[k * phw..][..phw], plane);
        }
        act.gap[o] = plane.iter().fold(T::zero(), |acc, &v| acc + v.max(T::zero())) * inv_area;
    }

    for j in 0..CLASSES {
        act.logits[j] = wts[HB + j] + dot(&wts[HW + j * CONV2_FILTERS..][..CONV2_FILTERS], &act.gap);
    }
}

/// Accumulates parameter gradients of one sample into `grad`.
fn backward_sample<T: Float>(
    wts: &[T],
    g: Geometry,
    act: &Activations<T>,
    dlogits: [T; CLASSES],
    grad: &mut [T],
    s: &mut Scratch<T>,
) {
    let (h, w, ph, pw) = (g.h, g.w, g.ph(), g.pw());
    let (hw, phw) = (h * w, ph * pw);
    let fan = CONV1_FILTERS * K2;

    let mut dgap = [T::zero(); CONV2_FILTERS];
    for j in 0..CLASSES {
        grad[HB + j] = grad[HB + j] + dlogits[j];
        for o in 0..CONV2_FILTERS {
            let i = HW + j * CONV2_FILTERS + o;
            grad[i] = grad[i] + dlogits[j] * act.gap[o];
            dgap[o] = dgap[o] + wts[i] * dlogits[j];
        }
    }

    let inv_area = T::one() / T::from(phw).expect("area");
    s.dcol2.fill(T::zero());
    for o in 0..CONV2_FILTERS {
        let d = dgap[o] * inv_area;
        let a2 = &act.a2[o * phw..][..phw];
        let da2 = &mut s.da2[o * phw..][..phw];
        let mut bias = T::zero();
        for (dv, &av) in da2.iter_mut().zip(a2) {
            *dv = if av > T::zero() { d } else { T::zero() };
            bias = bias + *dv;
        }
        grad[C2B + o] = grad[C2B + o] + bias;
        if bias == T::zero() {
            // no active unit or no incoming gradient
            continue;
        }
        let da2 = &s.da2[o * phw..][..phw];
        for k in 0..fan {
            let wi = C2W + o * fan + k;
            grad[wi] = grad[wi] + dot(da2, &act.col2[k * phw..][..phw]);
            axpy(wts[wi], da2, &mut s.dcol2[k * phw..][..phw]);
        }
    }
    s.dp1.fill(T::zero());
    col2im_add(&s.dcol2, CONV1_FILTERS, ph, pw, &mut s.dp1);

    // through the pool: only the winning, positive activation receives gradient
    s.da1.fill(T::zero());
    for c in 0..CONV1_FILTERS {
        for i in 0..phw {
            let arg = act.pool_arg[c * phw + i];
            if arg != NO_ARG {
                s.da1[c * hw + arg as usize] = s.dp1[c * phw + i];
            }
        }
    }

    for c in 0..CONV1_FILTERS {
        let da1 = &s.da1[c * hw..][..hw];
        grad[C1B + c] = grad[C1B + c] + da1.iter().fold(T::zero(), |a, &v| a + v);
        for k in 0..K2 {
            let wi = C1W + c * K2 + k;
            grad[wi] = grad[wi] + dot(da1, &act.col1[k * hw..][..hw]);
        }
    }
}

fn cast_weights<T: Float>(params: &ModelParams) -> Vec<T> {
    params
        .weights
        .iter()
        .map(|&w| T::from(w).expect("finite weight"))
        .collect()
}

/// Intensity scale of the network input.
const INPUT_SCALE: f64 = 1.0 / 32.0;

/// Network input: per-frame mean removed, fixed scale. The fixed scale keeps
/// the amount of dark structure visible to the network.
fn standardize(pixels: &[u8]) -> impl Iterator<Item = f64> + '_ {
    let mean = pixels.iter().map(|&p| p as f64).sum::<f64>() / pixels.len() as f64;
    pixels.iter().map(move |&p| (p as f64 - mean) * INPUT_SCALE)
}

fn frame_input<T: Float>(frame: &Frame) -> Vec<T> {
    standardize(frame.pixels())
        .map(|v| T::from(v).expect("pixel"))
        .collect()
}

fn check_frame(params: &ModelParams, frame: &Frame) -> Result<(), NnetError> {
    if frame.dims() != params.input_dims() {
        return Err(NnetError::ShapeMismatch {
            expected: params.input_dims(),
            found: frame.dims(),
        });
    }
    Ok(())
}

fn geometry(params: &ModelParams) -> Geometry {
    Geometry {
        h: params.input_h,
        w: params.input_w,
    }
}

/// Cached activations of a batch, tied to the parameters that produced them.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    logits: Vec<[f64; 2]>,
    acts: Vec<Activations<f64>>,
    fingerprint: u64,
}

impl ForwardPass {
    pub fn logits(&self) -> &[[f64; 2]] {
        &self.logits
    }
}

/// Batch forward pass in 64-bit, keeping activations for `backward`.
pub fn forward(params: &ModelParams, batch: &[Frame]) -> Result<ForwardPass, NnetError> {
    let g = geometry(params);
    let wts = cast_weights::<f64>(params);
    let mut acts = Vec::with_capacity(batch.len());
    let mut logits = Vec::with_capacity(batch.len());
    for frame in batch {
        check_frame(params, frame)?;
        let mut act = Activations::new(g);
        forward_sample(&wts, g, &frame_input(frame), &mut act);
        logits.push(act.logits);
        acts.push(act);
    }
    Ok(ForwardPass {
        logits,
        acts,
        fingerprint: params.fingerprint(),
    })
}

/// Parameter gradients (summed over the batch) for the given logit gradients.
pub fn backward(
    params: &ModelParams,
    pass: &ForwardPass,
    logit_grads: &[[f64; 2]],
) -> Result<Vec<f64>, NnetError> {
    if pass.fingerprint != params.fingerprint() {
        return Err(NnetError::StaleCache);
    }
    if logit_grads.len() != pass.acts.len() {
        return Err(NnetError::BatchMismatch {
            expected: pass.acts.len(),
            found: logit_grads.len(),
        });
    }
    let g = geometry(params);
    let wts = cast_weights::<f64>(params);
    let mut grad = vec![0.0; PARAM_COUNT];
    let mut scratch = Scratch::new(g);
    for (act, &dl) in pass.acts.iter().zip(logit_grads) {
        backward_sample(&wts, g, act, dl, &mut grad, &mut scratch);
    }
    Ok(grad)
}

/// Reusable single-precision inference/training engine.
pub struct Engine {
    g: Geometry,
    wts: Vec<f32>,
    act: Activations<f32>,
    scratch: Scratch<f32>,
    input: Vec<f32>,
}

impl Engine {
    pub fn new(params: &ModelParams) -> Self {
        let g = geometry(params);
        Engine {
            g,
            wts: params.weights.clone(),
            act: Activations::new(g),
            scratch: Scratch::new(g),
            input: vec![0.0; g.h * g.w],
        }
    }

    pub fn load(&mut self, params: &ModelParams) {
        self.wts.copy_from_slice(&params.weights);
    }

    fn set_input(&mut self, frame: &Frame) -> Result<(), NnetError> {
        if frame.dims() != (self.g.w, self.g.h) {
            return Err(NnetError::ShapeMismatch {
                expected: (self.g.w, self.g.h),
                found: frame.dims(),
            });
        }
        for (dst, v) in self.input.iter_mut().zip(standardize(frame.pixels())) {
            *dst = v as f32;
        }
        Ok(())
    }

    pub fn logits(&mut self, frame: &Frame) -> Result<[f64; 2], NnetError> {
        self.set_input(frame)?;
        forward_sample(&self.wts, self.g, &self.input, &mut self.act);
        Ok(self.act.logits.map(|v| v as f64))
    }

    /// Forward then backward for one sample; `dlogits` maps logits to their gradient.
    pub fn accumulate(
        &mut self,
        frame: &Frame,
        grad: &mut [f32],
        dlogits: impl FnOnce([f64; 2]) -> Result<[f64; 2], NnetError>,
    ) -> Result<[f64; 2], NnetError> {
        let logits = self.logits(frame)?;
        let dl = dlogits(logits)?;
        backward_sample(
            &self.wts,
            self.g,
            &self.act,
            dl.map(|v| v as f32),
            grad,
            &mut self.scratch,
        );
        Ok(logits)
    }
}

/// Logits for each frame (single precision, no caches).
pub fn predict_logits(params: &ModelParams, frames: &[&Frame]) -> Result<Vec<[f64; 2]>, NnetError> {
    let mut engine = Engine::new(params);
    frames.iter().map(|f| engine.logits(f)).collect()
}

// ---------------------------------------------------------------------------
// Optimizer and schedules

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(n_params: usize, config: AdamWConfig) -> Self {
        OptimizerState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            config,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p`.
pub fn adamw_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), NnetError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NnetError::GradientLength {
            expected: params.len(),
            found: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NnetError::NonFiniteGradient(i));
    }
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] as f64;
        let m = beta1 * state.m[i] as f64 + (1.0 - beta1) * g;
        let v = beta2 * state.v[i] as f64 + (1.0 - beta2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let p = params[i] as f64;
        let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        params[i] = (p - update - lr * weight_decay * p) as f32;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Warm-up learning rate for epoch 0, then constant peak.
    ConstantAfterWarmup,
    /// Warm-up for epoch 0, peak up to `decay_epoch`, then the decay rate.
    WarmupPeakDecay,
}

impl std::str::FromStr for ScheduleKind {
    type Err = NnetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant_after_warmup" | "ConstantAfterWarmup" | "convnext" => {
                Ok(ScheduleKind::ConstantAfterWarmup)
            }
            "warmup_peak_decay" | "WarmupPeakDecay" | "swin" => Ok(ScheduleKind::WarmupPeakDecay),
            other => Err(NnetError::InvalidSchedule(format!("unknown kind {other:?}"))),
        }
    }
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::ConstantAfterWarmup => "constant_after_warmup",
            ScheduleKind::WarmupPeakDecay => "warmup_peak_decay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub warmup_lr: f64,
    pub peak_lr: f64,
    pub decay_lr: f64,
    pub decay_epoch: usize,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn constant_after_warmup() -> Self {
        LrSchedule {
            kind: ScheduleKind::ConstantAfterWarmup,
            ..Self::warmup_peak_decay()
        }
    }

    pub fn warmup_peak_decay() -> Self {
        LrSchedule {
            kind: ScheduleKind::WarmupPeakDecay,
            warmup_lr: 1e-5,
            peak_lr: 1e-4,
            decay_lr: 5e-5,
            decay_epoch: 4,
            epochs: 7,
        }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        let lrs = [self.warmup_lr, self.peak_lr, self.decay_lr];
        if !lrs.iter().all(|&lr| lr > 0.0 && lr.is_finite()) {
            return Err(NnetError::InvalidSchedule("learning rates must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(NnetError::InvalidSchedule("epochs must be positive".into()));
        }
        if self.kind == ScheduleKind::WarmupPeakDecay && self.decay_epoch >= self.epochs {
            return Err(NnetError::InvalidSchedule(format!(
                "decay_epoch {} must be below epochs {}",
                self.decay_epoch, self.epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64, NnetError> {
        if epoch >= self.epochs {
            return Err(NnetError::EpochOutOfRange {
                epoch,
                epochs: self.epochs,
            });
        }
        Ok(match (self.kind, epoch) {
            (_, 0) => self.warmup_lr,
            (ScheduleKind::ConstantAfterWarmup, _) => self.peak_lr,
            (ScheduleKind::WarmupPeakDecay, e) if e <= self.decay_epoch => self.peak_lr,
            (ScheduleKind::WarmupPeakDecay, _) => self.decay_lr,
        })
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::constant_after_warmup()
    }
}

pub fn lr_at(epoch: usize, schedule: &LrSchedule) -> Result<f64, NnetError> {
    schedule.lr_at(epoch)
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub fill: FillMode,
}

/// Value given to pixels rotated in from outside the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    Zero,
    /// The frame's mean intensity, i.e. roughly its background.
    Mean,
}

impl std::str::FromStr for FillMode {
    type Err = NnetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(FillMode::Zero),
            "mean" => Ok(FillMode::Mean),
            other => Err(NnetError::InvalidAugment(format!(
                "unknown fill {other:?} (expected zero or mean)"
            ))),
        }
    }
}

impl FillMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FillMode::Zero => "zero",
            FillMode::Mean => "mean",
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_rotation_deg: 15.0,
            crop_scale: (0.8, 1.0),
            crop_ratio: (0.85, 1.15),
            fill: FillMode::Mean,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        let (s0, s1) = self.crop_scale;
        let (r0, r1) = self.crop_ratio;
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return Err(NnetError::InvalidAugment("rotation must be in [0,180]".into()));
        }
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(NnetError::InvalidAugment("crop scale must satisfy 0 < lo <= hi <= 1".into()));
        }
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(NnetError::InvalidAugment("crop ratio must satisfy 0 < lo <= hi".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn bilinear(frame: &Frame, sx: f64, sy: f64, fill: f64) -> f64 {
    let (w, h) = (frame.width() as isize, frame.height() as isize);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            fill
        } else {
            frame.pixel(x as usize, y as usize) as f64
        }
    };
    let mut v = 0.0;
    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let wgt = wx * wy;
            if wgt != 0.0 {
                v += wgt * at(x0 + dx, y0 + dy);
            }
        }
    }
    v
}

/// Random rotation (filled per `cfg.fill`) composed with a random resized crop, resampled
/// once with bilinear interpolation back to the input size.
pub fn augment(frame: &Frame, cfg: &AugmentConfig, rng: &mut impl RngCore) -> Frame {
    if !cfg.enabled {
        return frame.clone();
    }
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let angle = uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg).to_radians();

    let mut crop = None;
    for _ in 0..10 {
        let scale = uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let ratio = uniform(rng, cfg.crop_ratio.0, cfg.crop_ratio.1);
        let cw = w * (scale * ratio).sqrt();
        let ch = h * (scale / ratio).sqrt();
        if cw <= w && ch <= h {
            let x0 = uniform(rng, 0.0, w - cw);
            let y0 = uniform(rng, 0.0, h - ch);
            crop = Some((x0, y0, cw, ch));
            break;
        }
    }
    let (x0, y0, cw, ch) = crop.unwrap_or((0.0, 0.0, w, h));

    let fill = match cfg.fill {
        FillMode::Zero => 0.0,
        FillMode::Mean => frame.mean_intensity().round(),
    };
    let (sin, cos) = angle.sin_cos();
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let mut out = Vec::with_capacity(frame.pixels().len());
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            // output pixel -> rotated-image coordinates inside the crop
            let u = x0 + (x as f64 + 0.5) * cw / w - 0.5;
            let v = y0 + (y as f64 + 0.5) * ch / h - 0.5;
            // rotated image -> source image (inverse rotation about the centre)
            let (du, dv) = (u - cx, v - cy);
            let sx = cos * du + sin * dv + cx;
            let sy = -sin * du + cos * dv + cy;
            out.push(bilinear(frame, sx, sy, fill).round().clamp(0.0, 255.0) as u8);
        }
    }
    Frame::new(frame.width(), frame.height(), out).expect("same dimensions")
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
    pub loss: LossKind,
    pub loss_config: LossConfig,
    pub class_weights: ClassWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: LrSchedule::default(),
            batch_size: 100,
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossKind::Nsce,
            loss_config: LossConfig::default(),
            class_weights: ClassWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        self.schedule.validate()?;
        self.augment.validate()?;
        self.loss_config.validate()?;
        if self.batch_size == 0 {
            return Err(NnetError::InvalidTraining("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A training frame and its class index (0 or 1).
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub frame: &'a Frame,
    pub class: crate::dataio::Dominance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

/// Mini-batch AdamW training from a seeded initialization. Deterministic in
/// `(samples, cfg, seed)`.
pub fn train(
    samples: &[TrainSample<'_>],
    input_h: usize,
    input_w: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainLog), NnetError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(NnetError::InvalidTraining("no training samples".into()));
    }
    let mut params = ModelParams::init(input_h, input_w, seed)?;
    for s in samples {
        check_frame(&params, s.frame)?;
    }
    let mut state = OptimizerState::new(PARAM_COUNT, cfg.optimizer);
    let mut engine = Engine::new(&params);
    let mut grad = vec![0.0f32; PARAM_COUNT];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();
    let targets = [
        cfg.loss_config.target(crate::dataio::Dominance::Left),
        cfg.loss_config.target(crate::dataio::Dominance::Right),
    ];

    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        let mut rng = rng_for(seed, &[0xe90c, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let sample = samples[idx];
                let frame = augment(sample.frame, &cfg.augment, &mut rng);
                let q: TargetDist = targets[sample.class.index()];
                let mut loss = 0.0;
                engine.accumulate(&frame, &mut grad, |z| {
                    let p = losses::softmax(z)?;
                    loss = losses::loss_value(cfg.loss, &p, &q, &cfg.class_weights, &cfg.loss_config);
                    let g = losses::loss_grad(cfg.loss, z, &q, &cfg.class_weights, &cfg.loss_config)?;
                    Ok(g.map(|v| v * scale))
                })?;
                total += loss;
            }
            adamw_step(&mut params.weights, &grad, &mut state, lr)?;
            engine.load(&params);
        }
        log.epoch_loss.push(total / samples.len() as f64);
    }
    log.steps = state.step;
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Dominance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // init() leaves the head at zero; tests of the backward pass need every
    // layer to carry signal
    fn noisy_params(h: usize, w: usize, seed: u64) -> ModelParams {
        let mut params = ModelParams::init(h, w, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        for v in &mut params.weights_mut()[HW..] {
            *v = rng.random_range(-0.5..0.5);
        }
        params
    }

    #[test]
    fn init_starts_uniform() {
        let params = ModelParams::init(8, 8, 2).unwrap();
        assert!(params.weights()[HW..].iter().all(|&v| v == 0.0));
        assert!(params.weights()[..C1B].iter().any(|&v| v != 0.0));
        let z = predict_logits(&params, &[&random_frame(8, 8, 1)]).unwrap();
        assert_eq!(z, vec![[0.0, 0.0]]);
    }

    fn random_frame(w: usize, h: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(w, h, (0..w * h).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn parameter_count_matches_shapes() {
        assert_eq!(
            Checkpoint::implied_count(&ModelParams::layer_shapes()),
            PARAM_COUNT
        );
        assert_eq!(PARAM_COUNT, 1282);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let params = ModelParams::zeros(8, 8).unwrap();
        let pass = forward(&params, &[random_frame(8, 8, 1)]).unwrap();
        assert_eq!(pass.logits(), &[[0.0, 0.0]]);
    }

    #[test]
    fn head_bias_passes_through() {
        let mut params = ModelParams::zeros(8, 8).unwrap();
        params.head_bias_mut().copy_from_slice(&[0.25, -1.5]);
        let pass = forward(&params, &[random_frame(8, 8, 2)]).unwrap();
        assert_eq!(pass.logits(), &[[0.25, -1.5]]);
        let single = predict_logits(&params, &[&random_frame(8, 8, 3)]).unwrap();
        assert_eq!(single, vec![[0.25, -1.5]]);
    }

    #[test]
    fn forward_is_deterministic() {
        let params = noisy_params(16, 16, 11);
        let frame = random_frame(16, 16, 4);
        let a = predict_logits(&params, &[&frame]).unwrap();
        let b = predict_logits(&noisy_params(16, 16, 11), &[&frame]).unwrap();
        assert_eq!(a[0].map(f64::to_bits), b[0].map(f64::to_bits));
        assert!(forward(&params, &[random_frame(8, 16, 1)]).is_err());
    }

    #[test]
    fn backward_zero_and_linearity() {
        let params = noisy_params(8, 8, 5);
        let batch = [random_frame(8, 8, 6), random_frame(8, 8, 7)];
        let pass = forward(&params, &batch).unwrap();
        let zero = backward(&params, &pass, &[[0.0, 0.0]; 2]).unwrap();
        assert!(zero.iter().all(|&g| g == 0.0));
        let g1 = backward(&params, &pass, &[[0.3, -0.3], [-0.1, 0.2]]).unwrap();
        let g2 = backward(&params, &pass, &[[0.6, -0.6], [-0.2, 0.4]]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert!(backward(&params, &pass, &[[0.0, 0.0]]).is_err());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut params = ModelParams::init(8, 8, 5).unwrap();
        let pass = forward(&params, &[random_frame(8, 8, 6)]).unwrap();
        params.weights_mut()[3] += 0.5;
        assert!(matches!(
            backward(&params, &pass, &[[1.0, -1.0]]),
            Err(NnetError::StaleCache)
        ));
    }

    #[test]
    fn engine_matches_f64_path() {
        let params = noisy_params(16, 16, 9);
        let frame = random_frame(16, 16, 10);
        let a = forward(&params, std::slice::from_ref(&frame)).unwrap().logits()[0];
        let b = predict_logits(&params, &[&frame]).unwrap()[0];
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-4, "{a:?} vs {b:?}");
        }
        let pass = forward(&params, std::slice::from_ref(&frame)).unwrap();
        let g64 = backward(&params, &pass, &[[0.5, -0.5]]).unwrap();
        let mut g32 = vec![0.0f32; PARAM_COUNT];
        Engine::new(&params)
            .accumulate(&frame, &mut g32, |_| Ok([0.5, -0.5]))
            .unwrap();
        for (a, b) in g64.iter().zip(&g32) {
            assert!((a - *b as f64).abs() <= 1e-4 * a.abs().max(1e-2));
        }
    }

    #[test]
    fn adamw_pure_decay() {
        let mut p = [1.0f32];
        let mut state = OptimizerState::new(1, AdamWConfig::default());
        adamw_step(&mut p, &[0.0], &mut state, 0.1).unwrap();
        assert_eq!(p[0], 0.995);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adamw_geometric_decay() {
        let (lr, wd) = (0.01, 0.05);
        let mut p = [3.0f32, -0.5];
        let mut expected = [3.0f64, -0.5];
        let mut state = OptimizerState::new(2, AdamWConfig::default());
        for _ in 0..200 {
            adamw_step(&mut p, &[0.0, 0.0], &mut state, lr).unwrap();
            for e in &mut expected {
                *e = (*e - lr * wd * *e) as f32 as f64;
            }
        }
        assert_eq!(p.map(|v| v as f64), expected);
        let closed = 3.0 * (1.0 - lr * wd).powi(200);
        assert!((p[0] as f64 - closed).abs() < 1e-5);
    }

    #[test]
    fn adamw_constant_gradient_step_size() {
        let config = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut state = OptimizerState::new(1, config);
        let mut p = [0.0f32];
        let lr = 1e-3;
        let mut last = 0.0;
        for _ in 0..500 {
            let before = p[0];
            adamw_step(&mut p, &[0.37], &mut state, lr).unwrap();
            last = (before - p[0]) as f64;
        }
        assert!((last - lr).abs() / lr < 0.01, "{last}");
        assert!(adamw_step(&mut p, &[f32::NAN], &mut state, lr).is_err());
    }

    #[test]
    fn adamw_repeatable() {
        let mut s1 = OptimizerState::new(2, AdamWConfig::default());
        let mut s2 = s1.clone();
        let mut p1 = [0.3f32, -0.2];
        let mut p2 = p1;
        adamw_step(&mut p1, &[0.1, 0.4], &mut s1, 0.01).unwrap();
        adamw_step(&mut p2, &[0.1, 0.4], &mut s2, 0.01).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn schedules() {
        let c = LrSchedule::constant_after_warmup();
        assert_eq!(c.lr_at(0).unwrap(), 1e-5);
        assert_eq!(c.lr_at(3).unwrap(), 1e-4);
        assert_eq!(c.lr_at(6).unwrap(), 1e-4);
        let s = LrSchedule::warmup_peak_decay();
        assert_eq!(s.lr_at(0).unwrap(), 1e-5);
        assert_eq!(s.lr_at(4).unwrap(), 1e-4);
        assert_eq!(s.lr_at(5).unwrap(), 5e-5);
        assert_eq!(lr_at(6, &s).unwrap(), 5e-5);
        assert!(matches!(s.lr_at(7), Err(NnetError::EpochOutOfRange { .. })));
        let bad = LrSchedule {
            decay_epoch: 7,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn augment_disabled_and_identity() {
        let frame = random_frame(16, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&frame, &AugmentConfig::disabled(), &mut rng), frame);
        let identity = AugmentConfig {
            enabled: true,
            max_rotation_deg: 0.0,
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            fill: FillMode::Zero,
        };
        assert_eq!(augment(&frame, &identity, &mut rng), frame);
    }

    #[test]
    fn mean_fill_uses_frame_background() {
        let frame = Frame::filled(12, 12, 170);
        let cfg = AugmentConfig {
            max_rotation_deg: 45.0,
            ..AugmentConfig::default()
        };
        let out = augment(&frame, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert!(out.pixels().iter().all(|&p| p == 170));
        let zero = augment(&frame, &AugmentConfig { fill: FillMode::Zero, ..cfg }, &mut ChaCha8Rng::seed_from_u64(4));
        assert!(zero.pixels().iter().any(|&p| p < 170));
    }

    #[test]
    fn augment_deterministic_and_shape_preserving() {
        let frame = random_frame(20, 20, 8);
        let cfg = AugmentConfig::default();
        let a = augment(&frame, &cfg, &mut ChaCha8Rng::seed_from_u64(42));
        let b = augment(&frame, &cfg, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        assert_eq!(a.dims(), frame.dims());
        assert_ne!(a, frame);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = ModelParams::init(32, 24, 3).unwrap();
        let back = ModelParams::from_checkpoint(&params.to_checkpoint()).unwrap();
        assert_eq!(back, params);
        let mut ckpt = params.to_checkpoint();
        ckpt.layer_shapes[0][0] = 4;
        assert!(ModelParams::from_checkpoint(&ckpt).is_err());
    }

    #[test]
    fn training_learns_orientation_and_is_deterministic() {
        // a dark bar on a noisy background: vertical for one class, horizontal for the other
        let bar = |seed: u64, vertical: bool| {
            let noise = random_frame(8, 8, seed);
            let px = (0..64)
                .map(|i| {
                    let (x, y) = (i % 8, i / 8);
                    let on = if vertical { x == 3 || x == 4 } else { y == 3 || y == 4 };
                    let base = if on { 60 } else { 170 };
                    base + noise.pixels()[i] / 16
                })
                .collect();
            Frame::new(8, 8, px).unwrap()
        };
        let dark: Vec<Frame> = (0..20).map(|i| bar(i, true)).collect();
        let bright: Vec<Frame> = (0..20).map(|i| bar(100 + i, false)).collect();
        let samples: Vec<TrainSample> = dark
            .iter()
            .map(|f| TrainSample { frame: f, class: Dominance::Left })
            .chain(bright.iter().map(|f| TrainSample { frame: f, class: Dominance::Right }))
            .collect();
        let cfg = TrainConfig {
            schedule: LrSchedule {
                warmup_lr: 1e-2,
                peak_lr: 2e-2,
                epochs: 15,
                ..LrSchedule::constant_after_warmup()
            },
            batch_size: 8,
            augment: AugmentConfig::disabled(),
            loss: LossKind::Ce,
            ..TrainConfig::default()
        };
        let (params, log) = train(&samples, 8, 8, &cfg, 1).unwrap();
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0]);
        let (again, _) = train(&samples, 8, 8, &cfg, 1).unwrap();
        assert_eq!(params.to_checkpoint().weights, again.to_checkpoint().weights);
        let correct = samples
            .iter()
            .filter(|s| {
                let z = predict_logits(&params, &[s.frame]).unwrap()[0];
                crate::aggregate::decide(z) == s.class
            })
            .count();
        assert!(correct >= 36, "{correct}/40");
    }
}
