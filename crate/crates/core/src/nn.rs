//! Masked autoencoder over ±1 inputs with hand-derived reverse mode, the
//! Adam optimizer with step decay, and checkpoint files.
//!
//! The network is `{Linear → LayerNorm → act} × depth → Linear(|V|)` with
//! residual connections between equal-width blocks. All parameters live in
//! one flat `Vec<f64>`; [`Mae`] only describes the layout. The flat vector
//! also carries a per-variable root logit block used for parentless
//! conditionals and an optional scalar flow head on the trunk.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Elu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub num_vars: usize,
    /// Extra conditioning inputs appended after the variable block.
    #[serde(default)]
    pub cond_dim: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Adds a scalar output on the trunk used as a learned log-flow.
    #[serde(default)]
    pub flow_head: bool,
}

fn default_width() -> usize {
    512
}

fn default_depth() -> usize {
    3
}

impl MaeConfig {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            cond_dim: 0,
            width: default_width(),
            depth: default_depth(),
            activation: Activation::Relu,
            flow_head: false,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_cond_dim(mut self, cond_dim: usize) -> Self {
        self.cond_dim = cond_dim;
        self
    }

    pub fn with_flow_head(mut self, flow_head: bool) -> Self {
        self.flow_head = flow_head;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    fan_in: usize,
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    residual: bool,
}

/// Parameter layout and forward/backward passes of the MAE.
#[derive(Debug, Clone, PartialEq)]
pub struct Mae {
    pub config: MaeConfig,
    blocks: Vec<Block>,
    w_out: usize,
    b_out: usize,
    flow_w: usize,
    flow_b: usize,
    root: usize,
    num_params: usize,
}

/// Activations of one trunk evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MaeTrace {
    input: Vec<(usize, f64)>,
    xhat: Vec<Vec<f64>>,
    rstd: Vec<f64>,
    pre_act: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

impl MaeTrace {
    /// Output of the last block.
    pub fn features(&self) -> &[f64] {
        self.hidden.last().expect("at least one block")
    }
}

impl Mae {
    pub fn new(config: MaeConfig) -> Result<Self> {
        if config.num_vars == 0 || config.width == 0 || config.depth == 0 {
            return Err(Error::Config(
                "MAE needs at least one variable, one unit and one block".into(),
            ));
        }
        let n_in = config.num_vars + config.cond_dim;
        let width = config.width;
        let mut next = 0;
        let mut take = |len: usize| {
            let at = next;
            next += len;
            at
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let fan_in = if l == 0 { n_in } else { width };
            blocks.push(Block {
                fan_in,
                w: take(fan_in * width),
                b: take(width),
                gamma: take(width),
                beta: take(width),
                residual: l > 0,
            });
        }
        let w_out = take(config.num_vars * width);
        let b_out = take(config.num_vars);
        let (flow_w, flow_b) = if config.flow_head {
            (take(width), take(1))
        } else {
            (usize::MAX, usize::MAX)
        };
        let root = take(config.num_vars);
        Ok(Self {
            config,
            blocks,
            w_out,
            b_out,
            flow_w,
            flow_b,
            root,
            num_params: next,
        })
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn num_vars(&self) -> usize {
        self.config.num_vars
    }

    pub fn input_dim(&self) -> usize {
        self.config.num_vars + self.config.cond_dim
    }

    /// Indices of the root-logit block.
    pub fn root_range(&self) -> Range<usize> {
        self.root..self.root + self.config.num_vars
    }

    /// Uniform fan-in initialization, unit layer-norm scales, zero biases and
    /// zero root logits.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.num_params];
        let width = self.config.width;
        for blk in &self.blocks {
            let bound = 1.0 / (blk.fan_in as f64).sqrt();
            for w in &mut p[blk.w..blk.w + blk.fan_in * width] {
                *w = rng.gen_range(-bound..bound);
            }
            for g in &mut p[blk.gamma..blk.gamma + width] {
                *g = 1.0;
            }
        }
        let bound = 1.0 / (width as f64).sqrt();
        for w in &mut p[self.w_out..self.w_out + self.config.num_vars * width] {
            *w = rng.gen_range(-bound..bound);
        }
        if self.config.flow_head {
            for w in &mut p[self.flow_w..self.flow_w + width] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    /// Runs the shared trunk on a sparse input given as `(index, value)`
    /// pairs; absent indices are zero.
    pub fn trunk(&self, params: &[f64], input: &[(usize, f64)]) -> MaeTrace {
        debug_assert_eq!(params.len(), self.num_params);
        let width = self.config.width;
        let act = self.config.activation;
        let depth = self.blocks.len();
        let mut trace = MaeTrace {
            input: input.to_vec(),
            xhat: Vec::with_capacity(depth),
            rstd: Vec::with_capacity(depth),
            pre_act: Vec::with_capacity(depth),
            hidden: Vec::with_capacity(depth),
        };
        for (l, blk) in self.blocks.iter().enumerate() {
            let mut a = params[blk.b..blk.b + width].to_vec();
            if l == 0 {
                for &(i, x) in input {
                    debug_assert!(i < blk.fan_in);
                    if x != 0.0 {
                        let row = &params[blk.w + i * width..blk.w + (i + 1) * width];
                        for (aj, &w) in a.iter_mut().zip(row) {
                            *aj += w * x;
                        }
                    }
                }
            } else {
                let h = &trace.hidden[l - 1];
                for (j, aj) in a.iter_mut().enumerate() {
                    let row = &params[blk.w + j * width..blk.w + (j + 1) * width];
                    *aj += row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>();
                }
            }
            let mean = a.iter().sum::<f64>() / width as f64;
            let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let xhat: Vec<f64> = a.iter().map(|v| (v - mean) * rstd).collect();
            let n: Vec<f64> = (0..width)
                .map(|j| params[blk.gamma + j] * xhat[j] + params[blk.beta + j])
                .collect();
            let mut h: Vec<f64> = n.iter().map(|&z| act.apply(z)).collect();
            if blk.residual {
                for (hj, prev) in h.iter_mut().zip(&trace.hidden[l - 1]) {
                    *hj += prev;
                }
            }
            trace.xhat.push(xhat);
            trace.rstd.push(rstd);
            trace.pre_act.push(n);
            trace.hidden.push(h);
        }
        trace
    }

    /// Logit of output `k` read from a trunk evaluation.
    pub fn logit(&self, params: &[f64], trace: &MaeTrace, k: usize) -> f64 {
        let width = self.config.width;
        let row = &params[self.w_out + k * width..self.w_out + (k + 1) * width];
        params[self.b_out + k]
            + row
                .iter()
                .zip(trace.features())
                .map(|(w, h)| w * h)
                .sum::<f64>()
    }

    /// Scalar flow-head output read from a trunk evaluation.
    pub fn flow(&self, params: &[f64], trace: &MaeTrace) -> f64 {
        assert!(self.config.flow_head, "MAE built without a flow head");
        let width = self.config.width;
        let row = &params[self.flow_w..self.flow_w + width];
        params[self.flow_b]
            + row
                .iter()
                .zip(trace.features())
                .map(|(w, h)| w * h)
                .sum::<f64>()
    }

    pub fn root_logit(&self, params: &[f64], v: usize) -> f64 {
        params[self.root + v]
    }

    pub fn add_root_grad(&self, v: usize, d: f64, grad: &mut [f64]) {
        grad[self.root + v] += d;
    }

    /// Dense forward pass returning every output logit.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        let sparse: Vec<(usize, f64)> = input
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(|(i, &x)| (i, x))
            .collect();
        let trace = self.trunk(params, &sparse);
        (0..self.config.num_vars)
            .map(|k| self.logit(params, &trace, k))
            .collect()
    }

    /// Accumulates into `grad` the gradient of `Σ_k d_logits[k]·logit_k +
    /// d_flow·flow` for one trunk evaluation.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &MaeTrace,
        d_logits: &[(usize, f64)],
        d_flow: f64,
        grad: &mut [f64],
    ) {
        let width = self.config.width;
        let act = self.config.activation;
        let mut dh = vec![0.0; width];
        let feats = trace.features();
        for &(k, d) in d_logits {
            if d == 0.0 {
                continue;
            }
            grad[self.b_out + k] += d;
            let w = self.w_out + k * width;
            for j in 0..width {
                grad[w + j] += d * feats[j];
                dh[j] += d * params[w + j];
            }
        }
        if d_flow != 0.0 {
            grad[self.flow_b] += d_flow;
            for j in 0..width {
                grad[self.flow_w + j] += d_flow * feats[j];
                dh[j] += d_flow * params[self.flow_w + j];
            }
        }
        for l in (0..self.blocks.len()).rev() {
            let blk = &self.blocks[l];
            let xhat = &trace.xhat[l];
            let n = &trace.pre_act[l];
            let mut dxhat = vec![0.0; width];
            for j in 0..width {
                let dn = dh[j] * act.derivative(n[j]);
                grad[blk.gamma + j] += dn * xhat[j];
                grad[blk.beta + j] += dn;
                dxhat[j] = dn * params[blk.gamma + j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / width as f64;
            let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / width as f64;
            let rstd = trace.rstd[l];
            let da: Vec<f64> = (0..width)
                .map(|j| rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx))
                .collect();
            for j in 0..width {
                grad[blk.b + j] += da[j];
            }
            if l == 0 {
                for &(i, x) in &trace.input {
                    if x != 0.0 {
                        let w = blk.w + i * width;
                        for j in 0..width {
                            grad[w + j] += da[j] * x;
                        }
                    }
                }
            } else {
                let h_prev = &trace.hidden[l - 1];
                let mut dprev = if blk.residual {
                    dh.clone()
                } else {
                    vec![0.0; width]
                };
                for (j, &daj) in da.iter().enumerate().take(width) {
                    let w = blk.w + j * width;
                    if daj == 0.0 {
                        continue;
                    }
                    for i in 0..width {
                        grad[w + i] += daj * h_prev[i];
                        dprev[i] += daj * params[w + i];
                    }
                }
                dh = dprev;
            }
        }
    }
}

/// Errors with [`Error::NonFiniteLoss`] unless `loss` is finite.
pub fn ensure_finite(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss(loss))
    }
}

/// Fractions of the total step count at which the learning rate is
/// multiplied by [`DECAY_FACTOR`].
pub const DECAY_MILESTONES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 0.9];
pub const DECAY_FACTOR: f64 = 0.1;

/// Adam with bias correction, per-coordinate learning-rate multipliers and
/// milestone step decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Total planned steps; `None` disables decay.
    pub total_steps: Option<u64>,
    lr_scale: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, base_lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: None,
            lr_scale: vec![1.0; num_params],
        }
    }

    pub fn with_schedule(mut self, total_steps: u64) -> Self {
        self.total_steps = Some(total_steps);
        self
    }

    /// Multiplies the learning rate of `range` by `mult`.
    pub fn set_scale(&mut self, range: Range<usize>, mult: f64) {
        for s in &mut self.lr_scale[range] {
            *s = mult;
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Learning rate for the next update.
    pub fn current_lr(&self) -> f64 {
        let passed = match self.total_steps {
            Some(total) => DECAY_MILESTONES
                .iter()
                .filter(|&&f| self.step as f64 >= f * total as f64)
                .count(),
            None => 0,
        };
        self.base_lr * DECAY_FACTOR.powi(passed as i32)
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grad.len()
                },
            });
        }
        if let Some(&bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss(bad));
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * self.lr_scale[i] * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 4] = b"DMAE";
const CKPT_VERSION: u32 = 1;

/// Network configuration, flat parameters and optional optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: MaeConfig,
    pub params: Vec<f64>,
    pub optimizer: Option<AdamState>,
}

fn put_u32<W: Write>(w: &mut W, x: u32) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_u64<W: Write>(w: &mut W, x: u64) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_floats<W: Write>(w: &mut W, xs: &[f64], bits: u32) -> Result<()> {
    for &x in xs {
        if bits == 32 {
            w.write_all(&(x as f32).to_le_bytes())?;
        } else {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn get<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_floats<R: Read>(r: &mut R, n: usize, bits: u32) -> Result<Vec<f64>> {
    (0..n)
        .map(|_| {
            Ok(if bits == 32 {
                f32::from_le_bytes(get(r)?) as f64
            } else {
                f64::from_le_bytes(get(r)?)
            })
        })
        .collect()
}

impl Checkpoint {
    /// Header: magic `DMAE`, version, |V|, width, block count, float width,
    /// conditioning width, activation, flow-head flag, parameter count. Then
    /// the little-endian parameters and the optimizer state.
    pub fn write<W: Write>(&self, mut w: W, float_bits: u32) -> Result<()> {
        if float_bits != 32 && float_bits != 64 {
            return Err(Error::Config(format!(
                "float width must be 32 or 64, got {float_bits}"
            )));
        }
        let c = &self.config;
        w.write_all(CKPT_MAGIC)?;
        put_u32(&mut w, CKPT_VERSION)?;
        put_u64(&mut w, c.num_vars as u64)?;
        put_u64(&mut w, c.width as u64)?;
        put_u64(&mut w, c.depth as u64)?;
        put_u32(&mut w, float_bits)?;
        put_u64(&mut w, c.cond_dim as u64)?;
        w.write_all(&[
            matches!(c.activation, Activation::Elu) as u8,
            c.flow_head as u8,
        ])?;
        put_u64(&mut w, self.params.len() as u64)?;
        put_floats(&mut w, &self.params, float_bits)?;
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(opt) => {
                w.write_all(&[1])?;
                put_u64(&mut w, opt.step)?;
                put_u64(&mut w, opt.total_steps.unwrap_or(0))?;
                w.write_all(&opt.base_lr.to_le_bytes())?;
                put_floats(&mut w, &opt.lr_scale, 64)?;
                put_floats(&mut w, &opt.m, 64)?;
                put_floats(&mut w, &opt.v, 64)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let magic: [u8; 4] = get(&mut r)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = get_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let num_vars = get_u64(&mut r)? as usize;
        let width = get_u64(&mut r)? as usize;
        let depth = get_u64(&mut r)? as usize;
        let bits = get_u32(&mut r)?;
        if bits != 32 && bits != 64 {
            return Err(Error::Format(format!("bad float width {bits}")));
        }
        let cond_dim = get_u64(&mut r)? as usize;
        let [elu, flow]: [u8; 2] = get(&mut r)?;
        let config = MaeConfig {
            num_vars,
            cond_dim,
            width,
            depth,
            activation: if elu == 1 {
                Activation::Elu
            } else {
                Activation::Relu
            },
            flow_head: flow == 1,
        };
        let count = get_u64(&mut r)? as usize;
        let expected = Mae::new(config.clone())?.num_params();
        if count != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: count,
            });
        }
        let params = get_floats(&mut r, count, bits)?;
        let [has_opt]: [u8; 1] = get(&mut r)?;
        let optimizer = if has_opt == 1 {
            let step = get_u64(&mut r)?;
            let total = get_u64(&mut r)?;
            let base_lr = f64::from_le_bytes(get(&mut r)?);
            let mut opt = AdamState::new(count, base_lr);
            opt.step = step;
            opt.total_steps = (total > 0).then_some(total);
            opt.lr_scale = get_floats(&mut r, count, 64)?;
            opt.m = get_floats(&mut r, count, 64)?;
            opt.v = get_floats(&mut r, count, 64)?;
            Some(opt)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write(&mut w, 64)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num_vars: usize, act: Activation, flow: bool) -> Mae {
        Mae::new(
            MaeConfig::new(num_vars)
                .with_width(8)
                .with_activation(act)
                .with_flow_head(flow),
        )
        .unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mae = small(4, Activation::Relu, false);
        let p = vec![0.0; mae.num_params()];
        assert_eq!(mae.forward(&p, &[1.0, -1.0, 0.0, 1.0]), vec![0.0; 4]);
    }

    #[test]
    fn masked_coordinates_do_not_matter_and_forward_is_deterministic() {
        let mae = small(5, Activation::Relu, false);
        let p = mae.init_params(3);
        let a = mae.forward(&p, &[1.0, 0.0, -1.0, 0.0, 0.0]);
        let b = mae.forward(&p, &[1.0, 0.0, -1.0, 0.0, 0.0]);
        assert_eq!(a, b);
        let c = mae.forward(&p, &[1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_ne!(a, c);
    }

    fn fd_check(mae: &Mae, seed: u64) {
        let mut p = mae.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in &mut p {
            *x += 0.1 * rng.gen_range(-1.0..1.0);
        }
        let input = [(0usize, 1.0), (2, -1.0)];
        let weights = [(1usize, 0.7), (3, -1.3)];
        let loss = |p: &[f64]| {
            let t = mae.trunk(p, &input);
            let mut l: f64 = weights.iter().map(|&(k, w)| w * mae.logit(p, &t, k)).sum();
            l = l * l;
            if mae.config.flow_head {
                l += 0.5 * mae.flow(p, &t);
            }
            l
        };
        let t = mae.trunk(&p, &input);
        let s: f64 = weights.iter().map(|&(k, w)| w * mae.logit(&p, &t, k)).sum();
        let d: Vec<(usize, f64)> = weights.iter().map(|&(k, w)| (k, 2.0 * s * w)).collect();
        let mut grad = vec![0.0; p.len()];
        mae.backward(
            &p,
            &t,
            &d,
            if mae.config.flow_head { 0.5 } else { 0.0 },
            &mut grad,
        );
        let h = 1e-5;
        for i in 0..p.len() {
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(
                err < 1e-5,
                "coordinate {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(&small(4, Activation::Elu, true), 1);
        fd_check(&small(4, Activation::Relu, false), 2);
    }

    #[test]
    fn one_variable_logit_squared_gradient() {
        let mae = Mae::new(
            MaeConfig::new(1)
                .with_width(4)
                .with_activation(Activation::Elu),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p: Vec<f64> = mae
            .init_params(11)
            .iter()
            .map(|x| x + rng.gen_range(-0.5..0.5))
            .collect();
        let t = mae.trunk(&p, &[]);
        let z = mae.logit(&p, &t, 0);
        let mut grad = vec![0.0; p.len()];
        mae.backward(&p, &t, &[(0, 2.0 * z)], 0.0, &mut grad);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let la = mae.logit(&a, &mae.trunk(&a, &[]), 0).powi(2);
            let lb = mae.logit(&b, &mae.trunk(&b, &[]), 0).powi(2);
            let fd = (la - lb) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "{i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mae = small(3, Activation::Relu, false);
        let p = mae.init_params(0);
        let t = mae.trunk(&p, &[(0, 1.0)]);
        let mut grad = vec![0.0; p.len()];
        mae.backward(&p, &t, &[], 0.0, &mut grad);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut opt = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, 2.0, 3.0];
        opt.update(&mut p, &[0.5, -2.0, 0.0]).unwrap();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[2], 3.0);
        let before = p.clone();
        let m_before = opt.m.clone();
        let mut zero = AdamState::new(3, 1e-3);
        zero.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, before);
        opt.update(&mut p, &[0.0; 3]).unwrap();
        assert!(opt.m.iter().zip(&m_before).all(|(a, b)| a.abs() <= b.abs()));
        assert!(matches!(
            opt.update(&mut p, &[0.0; 2]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn adam_step_decay() {
        let mut opt = AdamState::new(1, 1e-3).with_schedule(100);
        let mut p = vec![0.0];
        assert_eq!(opt.current_lr(), 1e-3);
        for _ in 0..20 {
            opt.update(&mut p, &[1.0]).unwrap();
        }
        assert!((opt.current_lr() - 1e-4).abs() < 1e-18);
        opt.step = 95;
        assert!((opt.current_lr() - 1e-8).abs() < 1e-20);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mae = small(5, Activation::Elu, true);
        let p = mae.init_params(4);
        let mut opt = AdamState::new(p.len(), 1e-3).with_schedule(10);
        opt.set_scale(mae.root_range(), 100.0);
        let mut q = p.clone();
        opt.update(&mut q, &vec![0.1; p.len()]).unwrap();
        let ck = Checkpoint {
            config: mae.config.clone(),
            params: q.clone(),
            optimizer: Some(opt),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dmae");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mae2 = Mae::new(back.config.clone()).unwrap();
        let x = [1.0, 0.0, -1.0, 1.0, 0.0];
        assert_eq!(mae2.forward(&back.params, &x), mae.forward(&q, &x));
        let mut bytes = Vec::new();
        ck.write(&mut bytes, 32).unwrap();
        assert_eq!(&bytes[..4], b"DMAE");
        let narrow = Checkpoint::read(&bytes[..]).unwrap();
        assert!(narrow
            .params
            .iter()
            .zip(&q)
            .all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
