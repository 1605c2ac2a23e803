//! Training objectives: the local flip-consistency loss and its
//! single-child stochastic gradient, trajectory balance, detailed balance,
//! sub-trajectory balance and forward-looking flows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{Assignment, EnergyModel, PartialRewardMode};
use crate::error::{Error, Result};
use crate::graph::Imap;
use crate::nn::AdamState;
use crate::sampler::{log_prob_of_logit, ConditionalModel};

/// Gradient buffers for sampler parameters and the log-partition estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub params: Vec<f64>,
    pub log_z: f64,
}

impl Grads {
    pub fn zeros(num_params: usize) -> Self {
        Self {
            params: vec![0.0; num_params],
            log_z: 0.0,
        }
    }

    pub fn clear(&mut self) {
        self.params.iter_mut().for_each(|g| *g = 0.0);
        self.log_z = 0.0;
    }

    pub fn scale(&mut self, c: f64) {
        self.params.iter_mut().for_each(|g| *g *= c);
        self.log_z *= c;
    }
}

/// Learnable scalar `log Z_θ` with its own optimizer.
#[derive(Debug, Clone)]
pub struct LogZEstimate {
    pub value: f64,
    opt: AdamState,
}

impl LogZEstimate {
    pub fn new(value: f64, lr: f64, total_steps: Option<u64>) -> Self {
        let mut opt = AdamState::new(1, lr);
        opt.total_steps = total_steps;
        Self { value, opt }
    }

    pub fn update(&mut self, grad: f64) -> Result<()> {
        let mut v = [self.value];
        self.opt.update(&mut v, &[grad])?;
        self.value = v[0];
        Ok(())
    }
}

/// How a learned log-flow is turned into `log F` of a partial assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "mode", rename_all = "kebab-case")]
pub enum FlowHead {
    /// `log F = NN(x)`.
    Raw,
    /// `log F = NN(x) + log R̃(x)`.
    ForwardLooking(PartialRewardMode),
}

/// One conditional evaluated for the loss, kept for backprop.
struct Term<T> {
    trace: T,
    /// `∂ log q / ∂ logit`.
    dlogit: f64,
    coef: f64,
}

fn eval_logq<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    v: usize,
    x: &Assignment,
    coef: f64,
    terms: &mut Vec<Term<S::Trace>>,
) -> f64 {
    let (z, trace) = s.logit(imap, v, x);
    let (lp, dlogit) = log_prob_of_logit(z, x.get(v));
    terms.push(Term {
        trace,
        dlogit,
        coef,
    });
    lp
}

fn backprop<S: ConditionalModel>(s: &S, terms: &[Term<S::Trace>], outer: f64, grad: &mut [f64]) {
    for t in terms {
        let d = outer * t.coef * t.dlogit;
        if d != 0.0 {
            s.backprop_logit(&t.trace, d, grad);
        }
    }
}

fn check_blanket(imap: &Imap, x: &Assignment, u: usize) -> Result<()> {
    if !x.is_set(u) {
        return Err(Error::MissingBlanket { var: u, missing: u });
    }
    match imap.blanket(u).iter().find(|&&w| !x.is_set(w)) {
        Some(&missing) => Err(Error::MissingBlanket { var: u, missing }),
        None => Ok(()),
    }
}

/// `log q(x_v | pa) − log q(x'_v | pa')` for `v = u` or a child of `u`,
/// where `x'` is `x` with `x_u` replaced.
fn flip_ratio<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    v: usize,
    x: &Assignment,
    x_new: &Assignment,
    coef: f64,
    terms: &mut Vec<Term<S::Trace>>,
) -> f64 {
    eval_logq(s, imap, v, x, coef, terms) - eval_logq(s, imap, v, x_new, -coef, terms)
}

/// Squared flip-consistency residual
/// `(log R(x)/R(x') − Σ_{v ∈ {u} ∪ Ch(u)} log q(x_v|pa)/q(x'_v|pa'))²`
/// where `x'` is `x` with `x_u = new_value`. Only `u` and its blanket under
/// `imap` are read. Adds the parameter gradient to `grad` when given.
pub fn delta_loss<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    m: &EnergyModel,
    x: &Assignment,
    u: usize,
    new_value: i8,
    grad: Option<&mut Grads>,
) -> Result<f64> {
    let r = delta_residual_terms(s, imap, m, x, u, new_value, grad.is_some())?;
    if let (Some(g), Some(terms)) = (grad, r.1) {
        backprop(s, &terms, -2.0 * r.0, &mut g.params);
    }
    Ok(r.0 * r.0)
}

/// Unsquared flip-consistency residual; adds `∂r/∂θ` to `grad` when given.
pub fn delta_residual<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    m: &EnergyModel,
    x: &Assignment,
    u: usize,
    new_value: i8,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let (r, terms) = delta_residual_terms(s, imap, m, x, u, new_value, grad.is_some())?;
    if let (Some(g), Some(terms)) = (grad, terms) {
        backprop(s, &terms, -1.0, g);
    }
    Ok(r)
}

#[allow(clippy::type_complexity)]
fn delta_residual_terms<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    m: &EnergyModel,
    x: &Assignment,
    u: usize,
    new_value: i8,
    keep: bool,
) -> Result<(f64, Option<Vec<Term<S::Trace>>>)> {
    if x.get(u) == new_value {
        return Err(Error::SameValue(u));
    }
    check_blanket(imap, x, u)?;
    let delta_r = m.delta_log_reward(x, u, new_value)?;
    let x_new = x.with(u, new_value);
    let mut terms = Vec::new();
    let mut sum = flip_ratio(s, imap, u, x, &x_new, 1.0, &mut terms);
    for &c in imap.children(u) {
        sum += flip_ratio(s, imap, c, x, &x_new, 1.0, &mut terms);
    }
    Ok((delta_r - sum, keep.then_some(terms)))
}

/// Single-draw stochastic gradient of [`delta_loss`] that evaluates only
/// three children of `u`. With `g = Δlog R − log q(x_u)/q(x'_u)` and
/// `f_k = −log q(x_{c_k})/q(x'_{c_k})` for the children `c_1..c_n`, it adds
/// the gradients of `(g + n·f̄_i)²` and `n·(ḡ + (n−1)·f̄_a + f_b)²`, where
/// bars block gradients. Averaging over uniform `i` and uniform ordered pairs
/// `a ≠ b` gives the exact gradient of [`delta_loss`]. Returns the sum of
/// the two partial losses.
#[allow(clippy::too_many_arguments)]
pub fn delta_loss_stochastic_grad<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    m: &EnergyModel,
    x: &Assignment,
    u: usize,
    new_value: i8,
    i: usize,
    pair: (usize, usize),
    grad: &mut Grads,
) -> Result<f64> {
    let children = imap.children(u);
    let n = children.len();
    if n <= 1 {
        return Err(Error::TooFewChildren {
            var: u,
            children: n,
        });
    }
    let (a, b) = pair;
    if i >= n || a >= n || b >= n || a == b {
        return Err(Error::Config(format!(
            "stochastic indices ({i}, {a}, {b}) invalid for {n} children"
        )));
    }
    if x.get(u) == new_value {
        return Err(Error::SameValue(u));
    }
    check_blanket(imap, x, u)?;
    let delta_r = m.delta_log_reward(x, u, new_value)?;
    let x_new = x.with(u, new_value);
    let nf = n as f64;

    let mut g_terms = Vec::new();
    let g = delta_r - flip_ratio(s, imap, u, x, &x_new, 1.0, &mut g_terms);
    let mut scratch = Vec::new();
    let f_i = -flip_ratio(s, imap, children[i], x, &x_new, 1.0, &mut scratch);
    let f_a = if a == i {
        f_i
    } else {
        -flip_ratio(s, imap, children[a], x, &x_new, 1.0, &mut scratch)
    };
    let mut b_terms = Vec::new();
    let f_b = -flip_ratio(s, imap, children[b], x, &x_new, 1.0, &mut b_terms);

    let ri = g + nf * f_i;
    let rab = g + (nf - 1.0) * f_a + f_b;
    // ∂g = −Σ ∂(log q ratio of u); ∂f_b = −∂(log q ratio of c_b)
    backprop(s, &g_terms, -2.0 * ri, &mut grad.params);
    backprop(s, &b_terms, -2.0 * nf * rab, &mut grad.params);
    Ok(ri * ri + nf * rab * rab)
}

/// Draws the indices of [`delta_loss_stochastic_grad`] uniformly.
#[allow(clippy::too_many_arguments)]
pub fn delta_loss_stochastic_grad_sampled<S: ConditionalModel, R: Rng>(
    s: &S,
    imap: &Imap,
    m: &EnergyModel,
    x: &Assignment,
    u: usize,
    new_value: i8,
    rng: &mut R,
    grad: &mut Grads,
) -> Result<f64> {
    let n = imap.children(u).len();
    if n <= 1 {
        return Err(Error::TooFewChildren {
            var: u,
            children: n,
        });
    }
    let i = rng.gen_range(0..n);
    let a = rng.gen_range(0..n);
    let b = (a + rng.gen_range(1..n)) % n;
    delta_loss_stochastic_grad(s, imap, m, x, u, new_value, i, (a, b), grad)
}

/// `(log Z_θ + log q(x) − log R(x))²`; adds gradients for θ and `log Z_θ`.
pub fn tb_loss<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    m: &EnergyModel,
    x: &Assignment,
    log_z: f64,
    grad: Option<&mut Grads>,
) -> Result<f64> {
    let log_r = m.log_reward(x)?;
    let mut terms = Vec::new();
    let log_q: f64 = imap
        .order()
        .iter()
        .map(|&v| eval_logq(s, imap, v, x, 1.0, &mut terms))
        .sum();
    let r = log_z + log_q - log_r;
    if let Some(g) = grad {
        g.log_z += 2.0 * r;
        backprop(s, &terms, 2.0 * r, &mut g.params);
    }
    Ok(r * r)
}

/// `log F` of a partial assignment. Full assignments are pinned to `log R`
/// and carry no trace. Errors if the model has no flow head.
pub fn fl_flow<S: ConditionalModel>(
    s: &S,
    head: FlowHead,
    m: &EnergyModel,
    x: &Assignment,
) -> Result<(f64, Option<S::Trace>)> {
    if x.is_full() {
        return Ok((m.log_reward(x)?, None));
    }
    let (net, trace) = s
        .log_flow(x)
        .ok_or_else(|| Error::Config("sampler has no flow head".into()))?;
    let base = match head {
        FlowHead::Raw => 0.0,
        FlowHead::ForwardLooking(mode) => m.partial_reward(x, mode),
    };
    Ok((net + base, Some(trace)))
}

fn prefix(x: &Assignment, order: &[usize], i: usize) -> Assignment {
    x.restricted(&order[..i])
}

/// Detailed-balance residual squared for step `step` (0-based) of the
/// trajectory in `x`: `(log F(x_{<i}) + log q(x_{v_i}|pa) − log F(x_{≤i}))²`.
#[allow(clippy::too_many_arguments)]
pub fn db_loss<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    m: &EnergyModel,
    x: &Assignment,
    step: usize,
    next_var: usize,
    head: FlowHead,
    grad: Option<&mut Grads>,
) -> Result<f64> {
    let order = imap.order();
    let expected = *order.get(step).ok_or(Error::OrderViolation {
        expected: usize::MAX,
        got: next_var,
    })?;
    if expected != next_var {
        return Err(Error::OrderViolation {
            expected,
            got: next_var,
        });
    }
    if let Some(&missing) = order[..=step].iter().find(|&&v| !x.is_set(v)) {
        return Err(Error::MissingParent {
            var: next_var,
            parent: missing,
        });
    }
    let before = prefix(x, order, step);
    let after = prefix(x, order, step + 1);
    let (f0, t0) = fl_flow(s, head, m, &before)?;
    let (f1, t1) = fl_flow(s, head, m, &after)?;
    let mut terms = Vec::new();
    let lq = eval_logq(s, imap, next_var, &after, 1.0, &mut terms);
    let r = f0 + lq - f1;
    if let Some(g) = grad {
        backprop(s, &terms, 2.0 * r, &mut g.params);
        if let Some(t) = t0 {
            s.backprop_flow(&t, 2.0 * r, &mut g.params);
        }
        if let Some(t) = t1 {
            s.backprop_flow(&t, -2.0 * r, &mut g.params);
        }
    }
    Ok(r * r)
}

/// Sum of the detailed-balance losses over every step of a full trajectory.
pub fn db_trajectory_loss<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    m: &EnergyModel,
    x: &Assignment,
    head: FlowHead,
    mut grad: Option<&mut Grads>,
) -> Result<f64> {
    if !x.is_full() {
        return Err(Error::PartialAssignment);
    }
    let mut total = 0.0;
    for (i, &v) in imap.order().iter().enumerate() {
        total += db_loss(s, imap, m, x, i, v, head, grad.as_deref_mut())?;
    }
    Ok(total)
}

/// `Σ_{i<j} λ^{j−i} r_{ij}² / Σ_{i<j} λ^{j−i}` with
/// `r_{ij} = log F(x_{<i}) + Σ_{i≤k<j} log q(x_{v_k}|pa) − log F(x_{<j})`.
pub fn subtb_loss<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    m: &EnergyModel,
    x: &Assignment,
    head: FlowHead,
    lambda: f64,
    grad: Option<&mut Grads>,
) -> Result<f64> {
    if !x.is_full() {
        return Err(Error::PartialAssignment);
    }
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::Config(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let order = imap.order();
    let n = order.len();
    let mut flows = Vec::with_capacity(n + 1);
    let mut flow_traces = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let (f, t) = fl_flow(s, head, m, &prefix(x, order, i))?;
        flows.push(f);
        flow_traces.push(t);
    }
    let mut q_terms: Vec<Vec<Term<S::Trace>>> = Vec::with_capacity(n);
    let mut cum = vec![0.0; n + 1];
    for (k, &v) in order.iter().enumerate() {
        let mut t = Vec::with_capacity(1);
        cum[k + 1] = cum[k] + eval_logq(s, imap, v, x, 1.0, &mut t);
        q_terms.push(t);
    }
    // λ^{j−i} relative to the largest weight, for stability at small λ
    let mut weight_sum = 0.0;
    let mut loss = 0.0;
    let mut d_flow = vec![0.0; n + 1];
    let mut d_q = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..=n {
            let w = lambda.powi((j - i - 1) as i32);
            let r = flows[i] + cum[j] - cum[i] - flows[j];
            weight_sum += w;
            loss += w * r * r;
            d_flow[i] += 2.0 * w * r;
            d_flow[j] -= 2.0 * w * r;
            for dq in &mut d_q[i..j] {
                *dq += 2.0 * w * r;
            }
        }
    }
    if let Some(g) = grad {
        let inv = 1.0 / weight_sum;
        for (k, terms) in q_terms.iter().enumerate() {
            backprop(s, terms, d_q[k] * inv, &mut g.params);
        }
        for (i, t) in flow_traces.iter().enumerate() {
            if let Some(t) = t {
                s.backprop_flow(t, d_flow[i] * inv, &mut g.params);
            }
        }
    }
    Ok(loss / weight_sum)
}
