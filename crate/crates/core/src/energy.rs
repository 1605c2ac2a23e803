//! Factorized unnormalized densities over ±1 variables, the exact
//! enumeration oracle, and partial rewards for forward-looking flows.
//!
//! A model is a list of factors `φ_k(x_{S_k}) > 0`; everything is stored and
//! evaluated as `log φ_k`. The unnormalized log-density (log reward) is
//! `Σ_k log φ_k` and the energy is its negation.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::UndirectedGraph;
use crate::math::{log_sigmoid, log_sum_exp, sigmoid};

/// Largest model accepted by [`enumerate_exact`].
pub const MAX_EXACT_VARS: usize = 20;

/// Hidden width of MLP factors.
pub const MLP_HIDDEN: usize = 10;

/// Full or partial configuration of ±1 variables; `0` marks a variable that
/// is not instantiated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    values: Vec<i8>,
}

impl Assignment {
    /// Nothing instantiated.
    pub fn masked(num_vars: usize) -> Self {
        Self {
            values: vec![0; num_vars],
        }
    }

    pub fn from_values(values: Vec<i8>) -> Result<Self> {
        if let Some(bad) = values.iter().position(|v| !matches!(v, -1..=1)) {
            return Err(Error::Parse(format!(
                "value {} at position {bad} is not in {{-1, 0, +1}}",
                values[bad]
            )));
        }
        Ok(Self { values })
    }

    /// Full assignment whose bit `i` set means `x_i = +1`.
    pub fn from_index(num_vars: usize, index: usize) -> Self {
        Self {
            values: (0..num_vars)
                .map(|i| if index >> i & 1 == 1 { 1 } else { -1 })
                .collect(),
        }
    }

    /// Inverse of [`Assignment::from_index`]; masked entries count as `-1`.
    pub fn index(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .fold(0, |acc, (i, _)| acc | 1 << i)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn get(&self, v: usize) -> i8 {
        self.values[v]
    }

    pub fn set(&mut self, v: usize, value: i8) {
        debug_assert!(value == 1 || value == -1);
        self.values[v] = value;
    }

    pub fn unset(&mut self, v: usize) {
        self.values[v] = 0;
    }

    pub fn is_set(&self, v: usize) -> bool {
        self.values[v] != 0
    }

    pub fn is_full(&self) -> bool {
        self.values.iter().all(|&v| v != 0)
    }

    pub fn num_set(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    /// Instantiated variables in increasing order.
    pub fn mask(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| self.is_set(v)).collect()
    }

    /// Copy keeping only the entries in `vars`.
    pub fn restricted(&self, vars: &[usize]) -> Self {
        let mut out = Self::masked(self.len());
        for &v in vars {
            out.values[v] = self.values[v];
        }
        out
    }

    pub fn with(&self, v: usize, value: i8) -> Self {
        let mut out = self.clone();
        out.values[v] = value;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Ising,
    FactorGraph,
    BayesNet,
}

/// How factors with not-yet-instantiated arguments enter a partial reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PartialRewardMode {
    /// Only factors whose whole scope is instantiated.
    CompletedFactors,
    /// Every factor, with `0` fed for masked arguments.
    #[default]
    ZeroMasked,
}

/// One factor. Parameters live in the model's flat vector `params`.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// `log φ = σ · b · x_v`
    Unary { var: usize, param: usize },
    /// `log φ = 2σ · J_uv · x_u x_v` (both triangle entries of the symmetric J).
    Pair { u: usize, v: usize, param: usize },
    /// `log φ = w2 · tanh(W1 x_S + b1) + b2`, hidden width [`MLP_HIDDEN`].
    Mlp { scope: Vec<usize>, offset: usize },
    /// `log φ = log σ(x_child · (b + Σ_i w_i x_{pa_i}))`, a logistic
    /// conditional of a Bayesian network.
    Logistic {
        child: usize,
        parents: Vec<usize>,
        offset: usize,
    },
}

impl Factor {
    pub fn scope(&self) -> Vec<usize> {
        match self {
            Factor::Unary { var, .. } => vec![*var],
            Factor::Pair { u, v, .. } => vec![*u, *v],
            Factor::Mlp { scope, .. } => scope.clone(),
            Factor::Logistic { child, parents, .. } => {
                let mut s = parents.clone();
                s.push(*child);
                s
            }
        }
    }

    pub fn contains(&self, x: usize) -> bool {
        match self {
            Factor::Unary { var, .. } => *var == x,
            Factor::Pair { u, v, .. } => *u == x || *v == x,
            Factor::Mlp { scope, .. } => scope.contains(&x),
            Factor::Logistic { child, parents, .. } => *child == x || parents.contains(&x),
        }
    }
}

fn mlp_param_count(arity: usize) -> usize {
    MLP_HIDDEN * arity + 2 * MLP_HIDDEN + 1
}

/// Factorized density `p(x) ∝ Π_k φ_k(x_{S_k})` over ±1 variables.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    pub kind: ModelKind,
    num_vars: usize,
    /// Ising sharpness; `1.0` for the other kinds.
    pub sigma: f64,
    factors: Vec<Factor>,
    /// Learnable factor parameters ψ.
    pub params: Vec<f64>,
    graph: UndirectedGraph,
    touching: Vec<Vec<usize>>,
    pub seed: u64,
}

impl EnergyModel {
    fn assemble(
        kind: ModelKind,
        num_vars: usize,
        sigma: f64,
        factors: Vec<Factor>,
        params: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let mut graph = UndirectedGraph::empty(num_vars);
        let mut touching = vec![Vec::new(); num_vars];
        for (k, f) in factors.iter().enumerate() {
            let scope = f.scope();
            if let Some(&bad) = scope.iter().find(|&&a| a >= num_vars) {
                return Err(Error::VariableOutOfRange(bad));
            }
            for (i, &a) in scope.iter().enumerate() {
                touching[a].push(k);
                for &b in &scope[i + 1..] {
                    if a == b {
                        return Err(Error::InvalidGraph(format!(
                            "repeated variable {a} in factor {k}"
                        )));
                    }
                    graph.insert_edge(a, b);
                }
            }
        }
        Ok(Self {
            kind,
            num_vars,
            sigma,
            factors,
            params,
            graph,
            touching,
            seed,
        })
    }

    /// Ising model `E(x) = σ(−xᵀJx − xᵀb)` with `J` supported on `couplings`
    /// (each pair listed once, diagonal forced to zero) and one unary factor
    /// per variable.
    pub fn ising(
        num_vars: usize,
        couplings: &[(usize, usize, f64)],
        bias: &[f64],
        sigma: f64,
    ) -> Result<Self> {
        if bias.len() != num_vars {
            return Err(Error::ShapeMismatch {
                expected: num_vars,
                got: bias.len(),
            });
        }
        let mut factors = Vec::with_capacity(couplings.len() + num_vars);
        let mut params = Vec::with_capacity(couplings.len() + num_vars);
        for &(u, v, j) in couplings {
            if u == v {
                return Err(Error::InvalidGraph(format!("diagonal coupling at {u}")));
            }
            factors.push(Factor::Pair {
                u,
                v,
                param: params.len(),
            });
            params.push(j);
        }
        for (v, &b) in bias.iter().enumerate() {
            factors.push(Factor::Unary {
                var: v,
                param: params.len(),
            });
            params.push(b);
        }
        Self::assemble(ModelKind::Ising, num_vars, sigma, factors, params, 0)
    }

    /// Ising model on `graph` with every coupling and bias drawn uniformly
    /// from `{−1, +1}`.
    pub fn random_ising(graph: &UndirectedGraph, sigma: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sign = || if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let couplings: Vec<(usize, usize, f64)> = graph
            .edges()
            .into_iter()
            .map(|(u, v)| (u, v, sign()))
            .collect();
        let bias: Vec<f64> = (0..graph.num_vars()).map(|_| sign()).collect();
        let mut m = Self::ising(graph.num_vars(), &couplings, &bias, sigma)?;
        m.seed = seed;
        Ok(m)
    }

    /// Factor graph of tiny MLP factors with weights drawn from `N(0, init_std²)`.
    pub fn factor_graph(
        num_vars: usize,
        scopes: &[Vec<usize>],
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut factors = Vec::with_capacity(scopes.len());
        let mut params = Vec::new();
        for scope in scopes {
            factors.push(Factor::Mlp {
                scope: scope.clone(),
                offset: params.len(),
            });
            for _ in 0..mlp_param_count(scope.len()) {
                params.push(init_std * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Self::assemble(ModelKind::FactorGraph, num_vars, 1.0, factors, params, seed)
    }

    /// One 4-ary MLP factor per 2×2 window of a `rows × cols` lattice.
    pub fn factor_lattice(rows: usize, cols: usize, init_std: f64, seed: u64) -> Result<Self> {
        let id = |r: usize, c: usize| r * cols + c;
        let mut scopes = Vec::new();
        for r in 0..rows.saturating_sub(1) {
            for c in 0..cols.saturating_sub(1) {
                scopes.push(vec![id(r, c), id(r, c + 1), id(r + 1, c), id(r + 1, c + 1)]);
            }
        }
        Self::factor_graph(rows * cols, &scopes, init_std, seed)
    }

    /// Bayesian network of logistic conditionals. `parents[v]` lists the
    /// parents of `v`; parameters are `[b, w_1..w_k]` per variable in index
    /// order and start at `params` (or zero when `None`).
    pub fn bayes_net(parents: &[Vec<usize>], params: Option<Vec<f64>>) -> Result<Self> {
        let n = parents.len();
        let mut factors = Vec::with_capacity(n);
        let mut offset = 0;
        for (v, pa) in parents.iter().enumerate() {
            factors.push(Factor::Logistic {
                child: v,
                parents: pa.clone(),
                offset,
            });
            offset += 1 + pa.len();
        }
        let params = params.unwrap_or_else(|| vec![0.0; offset]);
        if params.len() != offset {
            return Err(Error::ShapeMismatch {
                expected: offset,
                got: params.len(),
            });
        }
        Self::assemble(ModelKind::BayesNet, n, 1.0, factors, params, 0)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Markov-network structure: an edge for every pair sharing a factor.
    pub fn graph(&self) -> &UndirectedGraph {
        &self.graph
    }

    /// Indices of the factors whose scope contains `u`.
    pub fn factors_touching(&self, u: usize) -> &[usize] {
        &self.touching[u]
    }

    /// `log φ_k` with arguments read through `value`, which may return any
    /// real number (0 for masked inputs).
    pub fn log_factor<F: Fn(usize) -> f64>(&self, k: usize, value: F) -> f64 {
        let p = &self.params;
        match &self.factors[k] {
            Factor::Unary { var, param } => self.sigma * p[*param] * value(*var),
            Factor::Pair { u, v, param } => 2.0 * self.sigma * p[*param] * value(*u) * value(*v),
            Factor::Mlp { scope, offset } => {
                let k = scope.len();
                let w1 = &p[*offset..*offset + MLP_HIDDEN * k];
                let b1 = &p[*offset + MLP_HIDDEN * k..*offset + MLP_HIDDEN * (k + 1)];
                let w2 = &p[*offset + MLP_HIDDEN * (k + 1)..*offset + MLP_HIDDEN * (k + 2)];
                let b2 = p[*offset + MLP_HIDDEN * (k + 2)];
                let mut out = b2;
                for h in 0..MLP_HIDDEN {
                    let mut z = b1[h];
                    for (i, &s) in scope.iter().enumerate() {
                        z += w1[h * k + i] * value(s);
                    }
                    out += w2[h] * z.tanh();
                }
                out
            }
            Factor::Logistic {
                child,
                parents,
                offset,
            } => log_sigmoid(value(*child) * self.logistic_score(parents, *offset, &value)),
        }
    }

    fn logistic_score<F: Fn(usize) -> f64>(
        &self,
        parents: &[usize],
        offset: usize,
        value: &F,
    ) -> f64 {
        let p = &self.params;
        p[offset]
            + parents
                .iter()
                .enumerate()
                .map(|(i, &q)| p[offset + 1 + i] * value(q))
                .sum::<f64>()
    }

    /// Adds `scale · ∇_ψ log φ_k` to `grad`.
    pub fn add_log_factor_grad<F: Fn(usize) -> f64>(
        &self,
        k: usize,
        value: F,
        scale: f64,
        grad: &mut [f64],
    ) {
        let p = &self.params;
        match &self.factors[k] {
            Factor::Unary { var, param } => grad[*param] += scale * self.sigma * value(*var),
            Factor::Pair { u, v, param } => {
                grad[*param] += scale * 2.0 * self.sigma * value(*u) * value(*v)
            }
            Factor::Mlp { scope, offset } => {
                let k = scope.len();
                let o_b1 = *offset + MLP_HIDDEN * k;
                let o_w2 = o_b1 + MLP_HIDDEN;
                let o_b2 = o_w2 + MLP_HIDDEN;
                grad[o_b2] += scale;
                for h in 0..MLP_HIDDEN {
                    let mut z = p[o_b1 + h];
                    for (i, &s) in scope.iter().enumerate() {
                        z += p[*offset + h * k + i] * value(s);
                    }
                    let t = z.tanh();
                    grad[o_w2 + h] += scale * t;
                    let dz = scale * p[o_w2 + h] * (1.0 - t * t);
                    grad[o_b1 + h] += dz;
                    for (i, &s) in scope.iter().enumerate() {
                        grad[*offset + h * k + i] += dz * value(s);
                    }
                }
            }
            Factor::Logistic {
                child,
                parents,
                offset,
            } => {
                let xc = value(*child);
                let s = self.logistic_score(parents, *offset, &value);
                // d/ds log σ(xc·s) = xc · σ(−xc·s)
                let d = scale * xc * sigmoid(-xc * s);
                grad[*offset] += d;
                for (i, &q) in parents.iter().enumerate() {
                    grad[offset + 1 + i] += d * value(q);
                }
            }
        }
    }

    /// `Σ_k log φ_k(x)` for a full assignment.
    pub fn log_reward(&self, x: &Assignment) -> Result<f64> {
        if !x.is_full() || x.len() != self.num_vars {
            return Err(Error::PartialAssignment);
        }
        Ok(self.log_reward_unchecked(x))
    }

    fn log_reward_unchecked(&self, x: &Assignment) -> f64 {
        let vals = x.values();
        (0..self.factors.len())
            .map(|k| self.log_factor(k, |v| vals[v] as f64))
            .sum()
    }

    /// Energy `−Σ_k log φ_k(x)`.
    pub fn energy(&self, x: &Assignment) -> Result<f64> {
        self.log_reward(x).map(|r| -r)
    }

    /// `log p(x) − log p(x')` where `x'` is `x` with `x_u` replaced by
    /// `new_value`. Only the factors containing `u` are evaluated, so only
    /// `u` and its graph neighbours need to be instantiated.
    pub fn delta_log_reward(&self, x: &Assignment, u: usize, new_value: i8) -> Result<f64> {
        if x.get(u) == new_value {
            return Err(Error::SameValue(u));
        }
        let vals = x.values();
        let old = vals[u];
        if old == 0 {
            return Err(Error::MissingBlanket { var: u, missing: u });
        }
        let mut delta = 0.0;
        for &k in &self.touching[u] {
            for s in self.factors[k].scope() {
                if vals[s] == 0 {
                    return Err(Error::MissingBlanket { var: u, missing: s });
                }
            }
            let here = self.log_factor(k, |v| vals[v] as f64);
            let there = self.log_factor(k, |v| {
                if v == u {
                    new_value as f64
                } else {
                    vals[v] as f64
                }
            });
            delta += here - there;
        }
        Ok(delta)
    }

    /// Log of the partial reward of a partially instantiated sample.
    pub fn partial_reward(&self, x: &Assignment, mode: PartialRewardMode) -> f64 {
        let vals = x.values();
        match mode {
            PartialRewardMode::CompletedFactors => (0..self.factors.len())
                .filter(|&k| self.factors[k].scope().iter().all(|&v| vals[v] != 0))
                .map(|k| self.log_factor(k, |v| vals[v] as f64))
                .sum(),
            PartialRewardMode::ZeroMasked => (0..self.factors.len())
                .map(|k| self.log_factor(k, |v| vals[v] as f64))
                .sum(),
        }
    }

    /// Adds `scale · ∇_ψ Σ_k log φ_k(x)` to `grad`.
    pub fn add_log_reward_grad(&self, x: &Assignment, scale: f64, grad: &mut [f64]) {
        let vals = x.values();
        for k in 0..self.factors.len() {
            self.add_log_factor_grad(k, |v| vals[v] as f64, scale, grad);
        }
    }

    /// Positive minus negative phase of the log-likelihood gradient:
    /// `mean_data ∇ψ Σ log φ − mean_model ∇ψ Σ log φ`.
    pub fn ebm_param_grad(
        &self,
        data: &[Assignment],
        model_samples: &[Assignment],
    ) -> Result<Vec<f64>> {
        if data.is_empty() || model_samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut grad = vec![0.0; self.params.len()];
        let pos = 1.0 / data.len() as f64;
        let neg = -1.0 / model_samples.len() as f64;
        for x in data {
            if !x.is_full() {
                return Err(Error::PartialAssignment);
            }
            self.add_log_reward_grad(x, pos, &mut grad);
        }
        for x in model_samples {
            if !x.is_full() {
                return Err(Error::PartialAssignment);
            }
            self.add_log_reward_grad(x, neg, &mut grad);
        }
        Ok(grad)
    }

    /// Exact gradient of the mean data log-likelihood, with the model
    /// expectation taken by enumeration.
    pub fn log_likelihood_grad(&self, data: &[Assignment]) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let table = enumerate_exact(self)?;
        let mut grad = vec![0.0; self.params.len()];
        let pos = 1.0 / data.len() as f64;
        for x in data {
            if !x.is_full() {
                return Err(Error::PartialAssignment);
            }
            self.add_log_reward_grad(x, pos, &mut grad);
        }
        for (i, &p) in table.full_probs.iter().enumerate() {
            self.add_log_reward_grad(&Assignment::from_index(self.num_vars(), i), -p, &mut grad);
        }
        Ok(grad)
    }

    /// Log-odds of `x_u = +1` against `x_u = −1` given all other entries of
    /// `x`, scaled by the inverse temperature `beta`.
    pub fn local_logit(&self, x: &Assignment, u: usize, beta: f64) -> f64 {
        let vals = x.values();
        let mut d = 0.0;
        for &k in &self.touching[u] {
            let plus = self.log_factor(k, |v| if v == u { 1.0 } else { vals[v] as f64 });
            let minus = self.log_factor(k, |v| if v == u { -1.0 } else { vals[v] as f64 });
            d += plus - minus;
        }
        beta * d
    }
}

/// Exact quantities of a small model obtained by summing over all states.
#[derive(Debug, Clone)]
pub struct ExactTable {
    pub num_vars: usize,
    pub log_z: f64,
    /// `P(x_v = +1)` per variable.
    pub marginals: Vec<f64>,
    /// Probability of every state, indexed as in [`Assignment::from_index`].
    pub full_probs: Vec<f64>,
    blankets: Vec<Vec<usize>>,
}

/// Enumerates all `2^|V|` states of `m` (at most [`MAX_EXACT_VARS`] variables).
pub fn enumerate_exact(m: &EnergyModel) -> Result<ExactTable> {
    let n = m.num_vars();
    if n > MAX_EXACT_VARS {
        return Err(Error::TooLarge(n, MAX_EXACT_VARS));
    }
    let states = 1usize << n;
    let log_r: Vec<f64> = (0..states)
        .map(|i| m.log_reward_unchecked(&Assignment::from_index(n, i)))
        .collect();
    let log_z = log_sum_exp(&log_r);
    let full_probs: Vec<f64> = log_r.iter().map(|&l| (l - log_z).exp()).collect();
    let mut marginals = vec![0.0; n];
    for (i, &p) in full_probs.iter().enumerate() {
        for (v, mv) in marginals.iter_mut().enumerate() {
            if i >> v & 1 == 1 {
                *mv += p;
            }
        }
    }
    let blankets = (0..n).map(|v| m.graph().neighbors(v).collect()).collect();
    Ok(ExactTable {
        num_vars: n,
        log_z,
        marginals,
        full_probs,
        blankets,
    })
}

impl ExactTable {
    pub fn prob(&self, x: &Assignment) -> f64 {
        self.full_probs[x.index()]
    }

    pub fn log_prob(&self, x: &Assignment) -> f64 {
        self.prob(x).ln()
    }

    /// Entropy `H(p)` in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .full_probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Markov blanket of `v` in the model's graph.
    pub fn blanket(&self, v: usize) -> &[usize] {
        &self.blankets[v]
    }

    /// Joint marginal table over `vars`; entry bit `i` set means
    /// `x_{vars[i]} = +1`.
    pub fn joint_marginal(&self, vars: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; 1 << vars.len()];
        for (s, &p) in self.full_probs.iter().enumerate() {
            let mut j = 0;
            for (i, &v) in vars.iter().enumerate() {
                j |= (s >> v & 1) << i;
            }
            out[j] += p;
        }
        out
    }

    /// Marginal probability of the instantiated entries of `x`.
    pub fn partial_prob(&self, x: &Assignment) -> f64 {
        let vars = x.mask();
        let table = self.joint_marginal(&vars);
        let j = vars
            .iter()
            .enumerate()
            .filter(|(_, &v)| x.get(v) == 1)
            .fold(0, |acc, (i, _)| acc | 1 << i);
        table[j]
    }

    /// `P(x_v = +1 | instantiated entries of given, other than v)`.
    pub fn conditional(&self, v: usize, given: &Assignment) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        'states: for (s, &p) in self.full_probs.iter().enumerate() {
            for (w, &val) in given.values().iter().enumerate() {
                if w == v || val == 0 {
                    continue;
                }
                if (s >> w & 1 == 1) != (val == 1) {
                    continue 'states;
                }
            }
            den += p;
            if s >> v & 1 == 1 {
                num += p;
            }
        }
        num / den
    }

    /// `P(x_v = +1 | x_{blanket(v)})`, reading only the blanket entries of `x`.
    pub fn blanket_conditional(&self, v: usize, x: &Assignment) -> f64 {
        self.conditional(v, &x.restricted(&self.blankets[v]))
    }
}

/// Independent samples from the exact distribution.
pub fn exact_sample(table: &ExactTable, n: usize, seed: u64) -> Vec<Assignment> {
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(&table.full_probs).expect("probabilities are valid weights");
    (0..n)
        .map(|_| Assignment::from_index(table.num_vars, dist.sample(&mut rng)))
        .collect()
}

/// On-disk description of a model. Ising couplings and biases are inline;
/// other kinds keep their parameters in a binary sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub num_vars: usize,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Ising: `[u, v]` pairs carrying a coupling.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub couplings: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bias: Vec<f64>,
    /// Factor graph: MLP factor scopes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scopes: Vec<Vec<usize>>,
    /// Bayes net: parent lists.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parents: Vec<Vec<usize>>,
    /// Sidecar with the flat parameter vector, relative to the JSON file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<String>,
}

fn one() -> f64 {
    1.0
}

const PARAM_MAGIC: &[u8; 4] = b"DPGM";
const PARAM_VERSION: u32 = 1;

/// Writes `params` as a `DPGM` sidecar: 16-byte header (magic, version,
/// count) followed by little-endian `f32` values.
pub fn write_param_sidecar<W: Write>(mut w: W, params: &[f64]) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&PARAM_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for &p in params {
        w.write_all(&(p as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_param_sidecar<R: Read>(mut r: R) -> Result<Vec<f64>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != PARAM_MAGIC {
        return Err(Error::Format("bad sidecar magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != PARAM_VERSION {
        return Err(Error::Format(format!(
            "unsupported sidecar version {version}"
        )));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes")) as usize;
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

impl EnergyModel {
    pub fn to_file(&self, weights_file: Option<String>) -> ModelFile {
        let mut f = ModelFile {
            kind: self.kind,
            num_vars: self.num_vars,
            sigma: self.sigma,
            seed: self.seed,
            edges: Vec::new(),
            couplings: Vec::new(),
            bias: vec![],
            scopes: Vec::new(),
            parents: Vec::new(),
            weights_file: None,
        };
        match self.kind {
            ModelKind::Ising => {
                f.bias = vec![0.0; self.num_vars];
                for factor in &self.factors {
                    match factor {
                        Factor::Pair { u, v, param } => {
                            f.edges.push([*u, *v]);
                            f.couplings.push(self.params[*param]);
                        }
                        Factor::Unary { var, param } => f.bias[*var] = self.params[*param],
                        _ => unreachable!("Ising models hold only unary and pair factors"),
                    }
                }
            }
            ModelKind::FactorGraph => {
                f.scopes = self.factors.iter().map(Factor::scope).collect();
                f.weights_file = weights_file;
            }
            ModelKind::BayesNet => {
                f.parents = vec![Vec::new(); self.num_vars];
                for factor in &self.factors {
                    if let Factor::Logistic { child, parents, .. } = factor {
                        f.parents[*child] = parents.clone();
                    }
                }
                f.weights_file = weights_file;
            }
        }
        f
    }

    /// Builds a model from its description; `params` supplies the sidecar
    /// contents for non-Ising kinds.
    pub fn from_file(f: &ModelFile, params: Option<Vec<f64>>) -> Result<Self> {
        let mut m = match f.kind {
            ModelKind::Ising => {
                if f.edges.len() != f.couplings.len() {
                    return Err(Error::ShapeMismatch {
                        expected: f.edges.len(),
                        got: f.couplings.len(),
                    });
                }
                let couplings: Vec<(usize, usize, f64)> = f
                    .edges
                    .iter()
                    .zip(&f.couplings)
                    .map(|(e, &j)| (e[0], e[1], j))
                    .collect();
                let bias = if f.bias.is_empty() {
                    vec![0.0; f.num_vars]
                } else {
                    f.bias.clone()
                };
                EnergyModel::ising(f.num_vars, &couplings, &bias, f.sigma)?
            }
            ModelKind::FactorGraph => {
                let mut m = EnergyModel::factor_graph(f.num_vars, &f.scopes, 0.5, f.seed)?;
                if let Some(p) = params {
                    if p.len() != m.params.len() {
                        return Err(Error::ShapeMismatch {
                            expected: m.params.len(),
                            got: p.len(),
                        });
                    }
                    m.params = p;
                }
                m
            }
            ModelKind::BayesNet => {
                if f.parents.len() != f.num_vars {
                    return Err(Error::ShapeMismatch {
                        expected: f.num_vars,
                        got: f.parents.len(),
                    });
                }
                EnergyModel::bayes_net(&f.parents, params)?
            }
        };
        m.seed = f.seed;
        Ok(m)
    }

    /// Saves the JSON description to `path` and, for non-Ising kinds, the
    /// parameter sidecar next to it with extension `.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let sidecar = (self.kind != ModelKind::Ising).then(|| path.with_extension("bin"));
        let name = sidecar
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned());
        let desc = self.to_file(name);
        fs::write(path, serde_json::to_string_pretty(&desc)?)?;
        if let Some(sc) = sidecar {
            write_param_sidecar(fs::File::create(sc)?, &self.params)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let desc: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let params = match &desc.weights_file {
            Some(name) => {
                let p: PathBuf = path.parent().unwrap_or(Path::new(".")).join(name);
                Some(read_param_sidecar(fs::File::open(p)?)?)
            }
            None => None,
        };
        Self::from_file(&desc, params)
    }
}
