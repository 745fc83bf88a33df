//! Gated recurrent controller that emits one token per searched parameter.
//!
//! Step `t` feeds the embedding of token `t-1` (a learned start vector at
//! `t = 0`) through a single GRU cell and a per-step linear head over that
//! parameter's grid. All parameters live in one flat vector so the optimizer
//! and finite-difference checks can treat them uniformly.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::N_PARAMS;
use crate::util::{self, Rng};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerShape {
    pub hidden: usize,
    pub embed: usize,
    pub grid_sizes: Vec<usize>,
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    start: usize,
    /// Embedding table feeding step `i + 1`, rows = grid_sizes[i].
    tables: Vec<usize>,
    /// Input weights for z, r, n gates: 3h × e.
    w_in: usize,
    /// Recurrent weights for z, r, n gates: 3h × h.
    w_rec: usize,
    /// Gate biases: 3h.
    bias: usize,
    head_w: Vec<usize>,
    head_b: Vec<usize>,
    len: usize,
}

impl Layout {
    fn new(s: &ControllerShape) -> Self {
        let (h, e) = (s.hidden, s.embed);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let start = take(e);
        let tables = s.grid_sizes[..s.grid_sizes.len() - 1].iter().map(|&g| take(g * e)).collect();
        let w_in = take(3 * h * e);
        let w_rec = take(3 * h * h);
        let bias = take(3 * h);
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for &g in &s.grid_sizes {
            head_w.push(take(g * h));
            head_b.push(take(g));
        }
        Layout {
            start,
            tables,
            w_in,
            w_rec,
            bias,
            head_w,
            head_b,
            len: off,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerPolicy {
    pub shape: ControllerShape,
    pub params: Vec<f64>,
    layout: Layout,
}

/// Everything one teacher-forced pass records for backpropagation.
#[derive(Clone, Debug)]
pub struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rec_n: Vec<f64>,
    h: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    pub steps: Vec<StepCache>,
}

impl Rollout {
    /// Log-probability of the chosen token at every step.
    pub fn token_log_probs(&self) -> Vec<f64> {
        self.steps.iter().zip(&self.tokens).map(|(s, &t)| s.log_probs[t]).collect()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| -s.probs.iter().zip(&s.log_probs).map(|(p, l)| p * l).sum::<f64>())
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

enum Choice<'a> {
    Forced(&'a [usize]),
    Sample(&'a mut Rng),
    Greedy,
}

impl ControllerPolicy {
    /// Uniform(−0.1, 0.1) initialization.
    pub fn new(shape: ControllerShape, seed: u64) -> Result<Self> {
        if shape.hidden == 0 || shape.embed == 0 || shape.grid_sizes.is_empty() || shape.grid_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid controller shape {shape:?}")));
        }
        let layout = Layout::new(&shape);
        let mut rng = util::rng(seed);
        let params = (0..layout.len).map(|_| rng.random_range(-0.1..0.1)).collect();
        Ok(Self { shape, params, layout })
    }

    pub fn for_grids(grid_sizes: &[usize], hidden: usize, seed: u64) -> Result<Self> {
        Self::new(
            ControllerShape {
                hidden,
                embed: hidden,
                grid_sizes: grid_sizes.to_vec(),
            },
            seed,
        )
    }

    pub fn from_params(shape: ControllerShape, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&shape);
        if params.len() != layout.len {
            return Err(Error::Shape(format!(
                "controller expects {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Self { shape, params, layout })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len
    }

    pub fn n_steps(&self) -> usize {
        self.shape.grid_sizes.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn run(&self, mut choice: Choice<'_>) -> Rollout {
        let (h, e) = (self.shape.hidden, self.shape.embed);
        let p = &self.params;
        let l = &self.layout;
        let mut state = vec![0.0; h];
        let mut tokens = Vec::with_capacity(self.n_steps());
        let mut steps = Vec::with_capacity(self.n_steps());
        for (t, &g) in self.shape.grid_sizes.iter().enumerate() {
            let x: Vec<f64> = if t == 0 {
                p[l.start..l.start + e].to_vec()
            } else {
                let row = l.tables[t - 1] + tokens[t - 1] * e;
                p[row..row + e].to_vec()
            };
            let mut pre = [vec![0.0; h], vec![0.0; h], vec![0.0; h]];
            let mut rec_n = vec![0.0; h];
            for gate in 0..3 {
                for i in 0..h {
                    let wi = l.w_in + (gate * h + i) * e;
                    let wr = l.w_rec + (gate * h + i) * h;
                    let input = p[l.bias + gate * h + i] + util::dot(&p[wi..wi + e], &x);
                    let rec = util::dot(&p[wr..wr + h], &state);
                    if gate == 2 {
                        pre[gate][i] = input;
                        rec_n[i] = rec;
                    } else {
                        pre[gate][i] = input + rec;
                    }
                }
            }
            let z: Vec<f64> = pre[0].iter().map(|&v| sigmoid(v)).collect();
            let r: Vec<f64> = pre[1].iter().map(|&v| sigmoid(v)).collect();
            let n: Vec<f64> = (0..h).map(|i| (pre[2][i] + r[i] * rec_n[i]).tanh()).collect();
            let new_state: Vec<f64> = (0..h).map(|i| (1.0 - z[i]) * n[i] + z[i] * state[i]).collect();

            let logits: Vec<f64> = (0..g)
                .map(|k| {
                    let w = l.head_w[t] + k * h;
                    p[l.head_b[t] + k] + util::dot(&p[w..w + h], &new_state)
                })
                .collect();
            let log_probs = log_softmax(&logits);
            let probs: Vec<f64> = log_probs.iter().map(|v| v.exp()).collect();
            let token = match &mut choice {
                Choice::Forced(ts) => ts[t],
                Choice::Sample(rng) => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = g - 1;
                    for (k, &pk) in probs.iter().enumerate() {
                        acc += pk;
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    pick
                }
                Choice::Greedy => {
                    let mut best = 0;
                    for k in 1..g {
                        if probs[k] > probs[best] {
                            best = k;
                        }
                    }
                    best
                }
            };
            tokens.push(token);
            steps.push(StepCache {
                x,
                h_prev: std::mem::replace(&mut state, new_state.clone()),
                z,
                r,
                n,
                rec_n,
                h: new_state,
                probs,
                log_probs,
            });
        }
        Rollout { tokens, steps }
    }

    pub fn sample(&self, rng: &mut Rng) -> Rollout {
        self.run(Choice::Sample(rng))
    }

    pub fn greedy(&self) -> Rollout {
        self.run(Choice::Greedy)
    }

    /// Teacher-forced pass over a fixed token sequence.
    pub fn evaluate(&self, tokens: &[usize]) -> Result<Rollout> {
        if tokens.len() != self.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tokens, got {}",
                self.n_steps(),
                tokens.len()
            )));
        }
        for (t, (&tok, &g)) in tokens.iter().zip(&self.shape.grid_sizes).enumerate() {
            if tok >= g {
                return Err(Error::TokenOutOfRange {
                    param: crate::searchspace::PARAM_NAMES.get(t).copied().unwrap_or("token"),
                    token: tok,
                    len: g,
                });
            }
        }
        Ok(self.run(Choice::Forced(tokens)))
    }

    /// Log-probability of a whole token sequence.
    pub fn log_prob(&self, tokens: &[usize]) -> Result<f64> {
        Ok(self.evaluate(tokens)?.token_log_probs().iter().sum())
    }

    /// Backpropagates per-step logit gradients through heads, GRU and embeddings,
    /// accumulating into `grad`.
    pub fn backward(&self, rollout: &Rollout, dlogits: &[Vec<f64>], grad: &mut [f64]) {
        let (h, e) = (self.shape.hidden, self.shape.embed);
        let p = &self.params;
        let l = &self.layout;
        let mut dh_next = vec![0.0; h];
        for t in (0..rollout.steps.len()).rev() {
            let s = &rollout.steps[t];
            let g = self.shape.grid_sizes[t];
            let mut dh = dh_next.clone();
            for k in 0..g {
                let d = dlogits[t][k];
                if d == 0.0 {
                    continue;
                }
                grad[l.head_b[t] + k] += d;
                let w = l.head_w[t] + k * h;
                for i in 0..h {
                    grad[w + i] += d * s.h[i];
                    dh[i] += d * p[w + i];
                }
            }
            let mut dh_prev = vec![0.0; h];
            let mut dx = vec![0.0; e];
            let mut da = [vec![0.0; h], vec![0.0; h], vec![0.0; h]];
            for i in 0..h {
                let dn = dh[i] * (1.0 - s.z[i]);
                let dz = dh[i] * (s.h_prev[i] - s.n[i]);
                dh_prev[i] += dh[i] * s.z[i];
                let dan = dn * (1.0 - s.n[i] * s.n[i]);
                let dr = dan * s.rec_n[i];
                da[0][i] = dz * s.z[i] * (1.0 - s.z[i]);
                da[1][i] = dr * s.r[i] * (1.0 - s.r[i]);
                da[2][i] = dan;
            }
            for gate in 0..3 {
                for i in 0..h {
                    let d = da[gate][i];
                    grad[l.bias + gate * h + i] += d;
                    let wi = l.w_in + (gate * h + i) * e;
                    for j in 0..e {
                        grad[wi + j] += d * s.x[j];
                        dx[j] += d * p[wi + j];
                    }
                    // The candidate gate sees the recurrent term through r.
                    let d_rec = if gate == 2 { d * s.r[i] } else { d };
                    let wr = l.w_rec + (gate * h + i) * h;
                    for j in 0..h {
                        grad[wr + j] += d_rec * s.h_prev[j];
                        dh_prev[j] += d_rec * p[wr + j];
                    }
                }
            }
            let row = if t == 0 {
                l.start
            } else {
                l.tables[t - 1] + rollout.tokens[t - 1] * e
            };
            for j in 0..e {
                grad[row + j] += dx[j];
            }
            dh_next = dh_prev;
        }
    }

    /// Probability of a whole sequence.
    pub fn sequence_probability(&self, tokens: &[usize]) -> Result<f64> {
        self.log_prob(tokens).map(f64::exp)
    }
}

/// Grid sizes of the standard nine-parameter chain.
pub fn shape_for(grid_sizes: [usize; N_PARAMS], hidden: usize) -> ControllerShape {
    ControllerShape {
        hidden,
        embed: hidden,
        grid_sizes: grid_sizes.to_vec(),
    }
}
