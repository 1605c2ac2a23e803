//! Bayesian-network samplers `q(x) = Π_v q(x_v | x_{Pa(v)})` over any I-map,
//! exploration policies, ancestral and partial sampling, and Gibbs chains.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{Assignment, EnergyModel, ExactTable};
use crate::error::{Error, Result};
use crate::graph::Imap;
use crate::math::{log_sigmoid, sigmoid};
use crate::nn::{Mae, MaeConfig, MaeTrace};

/// Floor applied to conditional log-probabilities.
pub const LOG_PROB_FLOOR: f64 = -30.0;

/// A family of per-variable Bernoulli conditionals `q(x_v = +1 | x_{Pa(v)})`
/// given as logits, with reverse-mode access to its parameters.
pub trait ConditionalModel {
    type Trace;

    fn num_vars(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Logit of `x_v = +1` given the parents of `v` under `imap`; reads only
    /// those parents of `x`.
    fn logit(&self, imap: &Imap, v: usize, x: &Assignment) -> (f64, Self::Trace);

    /// Adds `d · ∂logit/∂θ` to `grad`.
    fn backprop_logit(&self, trace: &Self::Trace, d: f64, grad: &mut [f64]);

    /// Learned log-flow of a partial assignment, when the model has a flow head.
    fn log_flow(&self, _x: &Assignment) -> Option<(f64, Self::Trace)> {
        None
    }

    /// Adds `d · ∂log_flow/∂θ` to `grad`.
    fn backprop_flow(&self, _trace: &Self::Trace, _d: f64, _grad: &mut [f64]) {}

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Parameters trained with the boosted root learning rate.
    fn root_range(&self) -> Option<Range<usize>> {
        None
    }
}

/// `log q(x_v | pa)` from a logit, with its derivative wrt the logit.
pub fn log_prob_of_logit(logit: f64, value: i8) -> (f64, f64) {
    let s = value as f64;
    let lp = log_sigmoid(s * logit);
    if lp < LOG_PROB_FLOOR {
        (LOG_PROB_FLOOR, 0.0)
    } else {
        (lp, s * sigmoid(-s * logit))
    }
}

fn check_parents(imap: &Imap, v: usize, x: &Assignment) -> Result<()> {
    match imap.parents(v).iter().find(|&&p| !x.is_set(p)) {
        Some(&parent) => Err(Error::MissingParent { var: v, parent }),
        None => Ok(()),
    }
}

/// `log q(x_v | x_{Pa(v)})`.
pub fn conditional_logprob<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    v: usize,
    x: &Assignment,
) -> Result<f64> {
    check_parents(imap, v, x)?;
    if !x.is_set(v) {
        return Err(Error::MissingParent { var: v, parent: v });
    }
    let (z, _) = s.logit(imap, v, x);
    Ok(log_prob_of_logit(z, x.get(v)).0)
}

/// `Σ_v log q(x_v | x_{Pa(v)})` over the variables of `imap`.
pub fn log_prob<S: ConditionalModel>(s: &S, imap: &Imap, x: &Assignment) -> Result<f64> {
    if !x.is_full() {
        return Err(Error::PartialAssignment);
    }
    Ok(imap
        .order()
        .iter()
        .map(|&v| log_prob_of_logit(s.logit(imap, v, x).0, x.get(v)).0)
        .sum())
}

/// MAE-backed amortized sampler. Without a conditioning block, parentless
/// conditionals read the root-logit block; every other conditional feeds the
/// parent values (and the conditioning block) to the MAE and reads output `v`.
#[derive(Debug, Clone)]
pub struct AmortizedSampler {
    pub mae: Mae,
    pub params: Vec<f64>,
    /// Values of the conditioning inputs, appended after the variable block.
    pub condition: Vec<f64>,
}

/// Reverse-mode record of one sampler evaluation.
#[derive(Debug, Clone)]
pub enum SamplerTrace {
    Root(usize),
    Net(usize, MaeTrace),
    Flow(MaeTrace),
}

impl AmortizedSampler {
    pub fn new(config: MaeConfig, seed: u64) -> Result<Self> {
        let mae = Mae::new(config)?;
        let params = mae.init_params(seed);
        let condition = vec![0.0; mae.config.cond_dim];
        Ok(Self {
            mae,
            params,
            condition,
        })
    }

    /// All parameters zero: every conditional is uniform.
    pub fn zeroed(config: MaeConfig) -> Result<Self> {
        let mut s = Self::new(config, 0)?;
        s.params.iter_mut().for_each(|p| *p = 0.0);
        Ok(s)
    }

    pub fn set_condition(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.condition.len() {
            return Err(Error::ShapeMismatch {
                expected: self.condition.len(),
                got: values.len(),
            });
        }
        self.condition.copy_from_slice(values);
        Ok(())
    }

    fn input(&self, vars: impl Iterator<Item = (usize, f64)>) -> Vec<(usize, f64)> {
        let n = self.mae.num_vars();
        let mut input: Vec<(usize, f64)> = vars.collect();
        input.extend(
            self.condition
                .iter()
                .enumerate()
                .filter(|(_, &c)| c != 0.0)
                .map(|(i, &c)| (n + i, c)),
        );
        input
    }
}

impl ConditionalModel for AmortizedSampler {
    type Trace = SamplerTrace;

    fn num_vars(&self) -> usize {
        self.mae.num_vars()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn logit(&self, imap: &Imap, v: usize, x: &Assignment) -> (f64, SamplerTrace) {
        let parents = imap.parents(v);
        if parents.is_empty() && self.condition.is_empty() {
            return (self.mae.root_logit(&self.params, v), SamplerTrace::Root(v));
        }
        let input = self.input(parents.iter().map(|&p| (p, x.get(p) as f64)));
        let trace = self.mae.trunk(&self.params, &input);
        (
            self.mae.logit(&self.params, &trace, v),
            SamplerTrace::Net(v, trace),
        )
    }

    fn backprop_logit(&self, trace: &SamplerTrace, d: f64, grad: &mut [f64]) {
        match trace {
            SamplerTrace::Root(v) => self.mae.add_root_grad(*v, d, grad),
            SamplerTrace::Net(v, t) => self.mae.backward(&self.params, t, &[(*v, d)], 0.0, grad),
            SamplerTrace::Flow(_) => unreachable!("flow trace passed to logit backprop"),
        }
    }

    fn log_flow(&self, x: &Assignment) -> Option<(f64, SamplerTrace)> {
        if !self.mae.config.flow_head {
            return None;
        }
        let input = self.input(
            x.values()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(i, &v)| (i, v as f64)),
        );
        let trace = self.mae.trunk(&self.params, &input);
        Some((
            self.mae.flow(&self.params, &trace),
            SamplerTrace::Flow(trace),
        ))
    }

    fn backprop_flow(&self, trace: &SamplerTrace, d: f64, grad: &mut [f64]) {
        if let SamplerTrace::Flow(t) = trace {
            self.mae.backward(&self.params, t, &[], d, grad);
        }
    }

    fn root_range(&self) -> Option<Range<usize>> {
        self.condition.is_empty().then(|| self.mae.root_range())
    }
}

/// One free logit per (variable, parent configuration) under a fixed I-map,
/// and optionally one free log-flow per topological prefix.
#[derive(Debug, Clone)]
pub struct TabularConditionals {
    imap: Imap,
    offsets: Vec<usize>,
    flow_offsets: Option<Vec<usize>>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TableEntry(pub usize);

impl TabularConditionals {
    /// Uniform conditionals (all logits zero) for `imap`.
    pub fn uniform(imap: &Imap, with_flows: bool) -> Self {
        let n = imap.num_vars();
        let mut offsets = vec![usize::MAX; n];
        let mut next = 0;
        for &v in imap.order() {
            offsets[v] = next;
            next += 1 << imap.parents(v).len();
        }
        let flow_offsets = with_flows.then(|| {
            (0..=imap.len())
                .map(|i| {
                    let at = next;
                    next += 1 << i;
                    at
                })
                .collect()
        });
        Self {
            imap: imap.clone(),
            offsets,
            flow_offsets,
            params: vec![0.0; next],
        }
    }

    /// Exact conditionals `p(x_v | x_{Pa(v)})` of the enumerated target.
    pub fn from_exact(table: &ExactTable, imap: &Imap) -> Self {
        let mut t = Self::uniform(imap, false);
        for &v in imap.order() {
            let pa = imap.parents(v);
            let mut vars = pa.to_vec();
            vars.push(v);
            let joint = table.joint_marginal(&vars);
            let k = pa.len();
            for c in 0..1usize << k {
                let plus = joint[c | 1 << k];
                let minus = joint[c];
                t.params[t.offsets[v] + c] = (plus / minus).ln();
            }
        }
        t
    }

    /// Like [`TabularConditionals::from_exact`] plus the true log-flows
    /// `log Z + log p(prefix)`, minus `baseline(prefix)` when given.
    pub fn from_exact_with_flows(
        table: &ExactTable,
        imap: &Imap,
        baseline: Option<&dyn Fn(&Assignment) -> f64>,
    ) -> Self {
        let cond = Self::from_exact(table, imap);
        let mut t = Self::uniform(imap, true);
        t.params[..cond.params.len()].copy_from_slice(&cond.params);
        let order = imap.order().to_vec();
        let flow = t.flow_offsets.clone().expect("flows requested");
        for i in 0..=order.len() {
            let prefix = &order[..i];
            let joint = table.joint_marginal(prefix);
            for (c, &p) in joint.iter().enumerate() {
                let mut x = Assignment::masked(imap.num_vars());
                for (b, &v) in prefix.iter().enumerate() {
                    x.set(v, if c >> b & 1 == 1 { 1 } else { -1 });
                }
                let base = baseline.map_or(0.0, |f| f(&x));
                t.params[flow[i] + c] = table.log_z + p.ln() - base;
            }
        }
        t
    }

    pub fn imap(&self) -> &Imap {
        &self.imap
    }

    fn config_index(&self, vars: &[usize], x: &Assignment) -> usize {
        vars.iter()
            .enumerate()
            .filter(|(_, &p)| x.get(p) == 1)
            .fold(0, |acc, (b, _)| acc | 1 << b)
    }

    /// Sets the logit of `v` for every parent configuration from `f(config)`.
    pub fn set_logits(&mut self, v: usize, f: impl Fn(usize) -> f64) {
        let k = self.imap.parents(v).len();
        for c in 0..1usize << k {
            self.params[self.offsets[v] + c] = f(c);
        }
    }
}

impl ConditionalModel for TabularConditionals {
    type Trace = TableEntry;

    fn num_vars(&self) -> usize {
        self.imap.num_vars()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn logit(&self, _imap: &Imap, v: usize, x: &Assignment) -> (f64, TableEntry) {
        let i = self.offsets[v] + self.config_index(self.imap.parents(v), x);
        (self.params[i], TableEntry(i))
    }

    fn backprop_logit(&self, trace: &TableEntry, d: f64, grad: &mut [f64]) {
        grad[trace.0] += d;
    }

    fn log_flow(&self, x: &Assignment) -> Option<(f64, TableEntry)> {
        let flow = self.flow_offsets.as_ref()?;
        let order = self.imap.order();
        let i = order.iter().take_while(|&&v| x.is_set(v)).count();
        let at = flow[i] + self.config_index(&order[..i], x);
        Some((self.params[at], TableEntry(at)))
    }

    fn backprop_flow(&self, trace: &TableEntry, d: f64, grad: &mut [f64]) {
        grad[trace.0] += d;
    }
}

/// How the training policy modifies each conditional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    #[default]
    OnPolicy,
    /// Logits divided by `temperature`.
    Tempered { temperature: f64 },
    /// `(1 − ε)·p_on + ε·uniform`.
    EpsUniform { epsilon: f64 },
}

impl Policy {
    /// Probability of `+1` under the policy given the model logit.
    pub fn prob_plus(&self, logit: f64) -> f64 {
        match *self {
            Policy::OnPolicy => sigmoid(logit),
            Policy::Tempered { temperature } => sigmoid(logit / temperature),
            Policy::EpsUniform { epsilon } => (1.0 - epsilon) * sigmoid(logit) + 0.5 * epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::Tempered { temperature } if temperature.is_nan() || temperature <= 0.0 => Err(
                Error::Config(format!("temperature must be positive, got {temperature}")),
            ),
            Policy::EpsUniform { epsilon } if !(0.0..=1.0).contains(&epsilon) => Err(
                Error::Config(format!("epsilon must be in [0, 1], got {epsilon}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Samples the variables of `imap` in topological order into `x`, leaving
/// other entries untouched, and returns the unmodified model's log-probability
/// of the drawn values.
pub fn sample_into<S: ConditionalModel, R: Rng>(
    s: &S,
    imap: &Imap,
    policy: Policy,
    x: &mut Assignment,
    rng: &mut R,
) -> f64 {
    let mut log_q = 0.0;
    for &v in imap.order() {
        let (z, _) = s.logit(imap, v, x);
        let value = if rng.gen::<f64>() < policy.prob_plus(z) {
            1
        } else {
            -1
        };
        x.set(v, value);
        log_q += log_prob_of_logit(z, value).0;
    }
    log_q
}

/// `n` ancestral samples with their on-policy log-probabilities.
pub fn ancestral_sample<S: ConditionalModel>(
    s: &S,
    imap: &Imap,
    policy: Policy,
    n: usize,
    seed: u64,
) -> Vec<(Assignment, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut x = Assignment::masked(s.num_vars());
            let lq = sample_into(s, imap, policy, &mut x, &mut rng);
            (x, lq)
        })
        .collect()
}

/// One sample over the variables of a sub-I-map; all others stay masked.
pub fn partial_sample<S: ConditionalModel>(
    s: &S,
    sub: &Imap,
    policy: Policy,
    seed: u64,
) -> Assignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Assignment::masked(s.num_vars());
    sample_into(s, sub, policy, &mut x, &mut rng);
    x
}

/// Inverse-temperature ramp for Gibbs chains: `β` goes linearly from
/// `start_beta` to 1 over the first `sweeps` sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anneal {
    pub start_beta: f64,
    pub sweeps: usize,
}

impl Anneal {
    pub const NONE: Anneal = Anneal {
        start_beta: 1.0,
        sweeps: 0,
    };

    pub fn beta(&self, sweep: usize) -> f64 {
        if sweep >= self.sweeps {
            1.0
        } else {
            self.start_beta + (1.0 - self.start_beta) * sweep as f64 / self.sweeps as f64
        }
    }
}

/// Independent systematic-scan Gibbs chains from uniform random starts; one
/// step is a full sweep over the variables.
pub fn gibbs_chain(
    m: &EnergyModel,
    n_chains: usize,
    n_steps: usize,
    anneal: Anneal,
    seed: u64,
) -> Vec<Assignment> {
    let n = m.num_vars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chains: Vec<Assignment> = (0..n_chains)
        .map(|_| Assignment::from_index(n, 0).with_random(&mut rng))
        .collect();
    for sweep in 0..n_steps {
        let beta = anneal.beta(sweep);
        for x in &mut chains {
            for u in 0..n {
                let p = sigmoid(m.local_logit(x, u, beta));
                x.set(u, if rng.gen::<f64>() < p { 1 } else { -1 });
            }
        }
    }
    chains
}

impl Assignment {
    fn with_random<R: Rng>(mut self, rng: &mut R) -> Self {
        for v in 0..self.len() {
            self.set(v, if rng.gen::<bool>() { 1 } else { -1 });
        }
        self
    }
}

/// Writes one assignment per line as whitespace-separated ±1 (0 if masked).
pub fn write_samples<W: Write>(mut w: W, xs: &[Assignment]) -> Result<()> {
    for x in xs {
        let line: Vec<String> = x.values().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| {
                t.parse::<i8>()
                    .map_err(|e| Error::Parse(format!("{t:?}: {e}")))
            })
            .collect::<Result<Vec<i8>>>()?;
        out.push(Assignment::from_values(vals)?);
    }
    Ok(out)
}
