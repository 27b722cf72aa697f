//! The differentiable recommender.
//!
//! All vectors are rows: a batch of `k` logic vectors is a `[k, d]` matrix and a
//! layer is `x W` with `W` stored as `[fan_in, fan_out]`. A predicate-style
//! network computes `relu(x H1 + b) H2`.
//!
//! Histories of different lengths are handled by grouping a batch by history
//! length and running each group as one dense sub-batch, so no padding or
//! masking is needed.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::{ModelConfig, Variant};
use crate::data::TrainingInstance;
use crate::error::{Error, Result};
use crate::logic::{Literal, Polarity};
use crate::params::{normal, xavier_uniform, ParamId, ParamStore};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;

/// Embedding initialisation standard deviation.
pub const EMBEDDING_STD: f64 = 0.01;

/// Lower bound on vector norms inside the similarity, so a vector whose ReLU
/// units all died scores 0.5 instead of aborting training.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
struct NetIds {
    h1: ParamId,
    b: ParamId,
    h2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttentionIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    wr: ParamId,
    wz: ParamId,
    wh: ParamId,
    w0: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    num_users: usize,
    num_items: usize,
    users: Option<ParamId>,
    items: ParamId,
    pos: Option<NetIds>,
    neg: Option<NetIds>,
    not: Option<NetIds>,
    or: NetIds,
    attention: Vec<AttentionIds>,
    gru: Option<GruIds>,
    anchor: Option<ParamId>,
}

/// Values of the four loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ranking: f64,
    pub rule: f64,
    pub length: f64,
    pub params: f64,
    pub total: f64,
}

/// Tape nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ranking: Var,
    pub rule: Var,
    pub length: Var,
    pub params: Var,
    pub total: Var,
}

/// Query vectors for a batch plus every intermediate logic vector behind them.
#[derive(Clone, Debug)]
pub struct QueryOutput {
    /// `[k, d]`, row `i` for instance `i`.
    pub query: Var,
    pub logic: Vec<Var>,
    /// `(user, item)` of every literal encoded by the predicate networks.
    pub literal_pairs: Vec<(usize, usize)>,
}

fn add_net<T: Scalar>(
    p: &mut ParamStore<T>,
    rng: &mut rand_chacha::ChaCha8Rng,
    name: &str,
    fan_in: usize,
    d: usize,
) -> Result<NetIds> {
    Ok(NetIds {
        h1: p.add(format!("{name}.h1"), xavier_uniform(rng, fan_in, d), true)?,
        b: p.add(format!("{name}.b"), Tensor::zeros([d]), true)?,
        h2: p.add(format!("{name}.h2"), xavier_uniform(rng, d, d), true)?,
    })
}

fn to_t<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, num_users: usize, num_items: usize) -> Result<Self> {
        config.validate()?;
        if num_users == 0 || num_items == 0 {
            return Err(Error::Config("model needs at least one user and one item".into()));
        }
        let d = config.d;
        let variant = config.variant;
        let mut rng = rng::stream(config.seed, Purpose::Init, 0, 0);
        let mut p = ParamStore::new();

        let users = if variant == Variant::NoPredicate {
            None
        } else {
            Some(p.add("user_emb", normal(&mut rng, vec![num_users, d], EMBEDDING_STD), true)?)
        };
        let items = p.add("item_emb", normal(&mut rng, vec![num_items, d], EMBEDDING_STD), true)?;
        let (pos, neg, not) = if variant == Variant::NoPredicate {
            (None, None, Some(add_net(&mut p, &mut rng, "not", d, d)?))
        } else {
            (
                Some(add_net(&mut p, &mut rng, "pos", 2 * d, d)?),
                Some(add_net(&mut p, &mut rng, "neg", 2 * d, d)?),
                None,
            )
        };
        let mut attention = Vec::new();
        let mut gru = None;
        if variant != Variant::NoEncoder {
            for l in 0..config.layers {
                attention.push(AttentionIds {
                    wq: p.add(format!("attn{l}.wq"), xavier_uniform(&mut rng, d, d), true)?,
                    wk: p.add(format!("attn{l}.wk"), xavier_uniform(&mut rng, d, d), true)?,
                    wv: p.add(format!("attn{l}.wv"), xavier_uniform(&mut rng, d, d), true)?,
                    wo: p.add(format!("attn{l}.wo"), xavier_uniform(&mut rng, d, d), true)?,
                });
            }
            gru = Some(GruIds {
                wr: p.add("gru.wr", xavier_uniform(&mut rng, 2 * d, d), true)?,
                wz: p.add("gru.wz", xavier_uniform(&mut rng, 2 * d, d), true)?,
                wh: p.add("gru.wh", xavier_uniform(&mut rng, 2 * d, d), true)?,
                w0: p.add("gru.w0", xavier_uniform(&mut rng, d, d), true)?,
            });
        }
        let or = add_net(&mut p, &mut rng, "or", 2 * d, d)?;
        let anchor = if variant == Variant::NoQuery {
            let mut arng = rng::stream(config.seed, Purpose::Anchor, 0, 0);
            Some(p.add("anchor", normal(&mut arng, vec![1, d], 1.0), false)?)
        } else {
            None
        };
        Ok(Model {
            config,
            params: p,
            num_users,
            num_items,
            users,
            items,
            pos,
            neg,
            not,
            or,
            attention,
            gru,
            anchor,
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match
    /// what `config` and the dataset size imply.
    pub fn from_params(config: ModelConfig, num_users: usize, num_items: usize, stored: ParamStore<T>) -> Result<Self> {
        let mut model = Model::new(config, num_users, num_items)?;
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for (_, p) in stored.iter() {
            let target = model
                .params
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", p.name)))?;
            let slot = model.params.value_mut(target);
            if slot.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    p.value.shape(),
                    slot.shape()
                )));
            }
            *slot = p.value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn item_embedding(&self, item: usize) -> &[T] {
        self.params.value(self.items).row(item)
    }

    /// Same architecture and dataset size, different scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            num_users: self.num_users,
            num_items: self.num_items,
            users: self.users,
            items: self.items,
            pos: self.pos,
            neg: self.neg,
            not: self.not,
            or: self.or,
            attention: self.attention.clone(),
            gru: self.gru,
            anchor: self.anchor,
        }
    }

    fn p(&self, tape: &mut Tape<T>, id: ParamId) -> Result<Var> {
        tape.param(&self.params, id)
    }

    fn check_ids(&self, users: &[usize], items: &[usize]) -> Result<()> {
        if let Some(&u) = users.iter().find(|&&u| u >= self.num_users) {
            return Err(Error::contract(format!(
                "user id {u} out of bounds ({} users)",
                self.num_users
            )));
        }
        if let Some(&v) = items.iter().find(|&&v| v >= self.num_items) {
            return Err(Error::contract(format!(
                "item id {v} out of bounds ({} items)",
                self.num_items
            )));
        }
        Ok(())
    }

    fn apply_net(&self, tape: &mut Tape<T>, net: NetIds, x: Var) -> Result<Var> {
        let h1 = self.p(tape, net.h1)?;
        let b = self.p(tape, net.b)?;
        let h2 = self.p(tape, net.h2)?;
        let pre = tape.matmul(x, h1)?;
        let pre = tape.add_bias(pre, b)?;
        let hidden = tape.relu(pre)?;
        tape.matmul(hidden, h2)
    }

    /// `OR(a, b)` row-wise.
    pub fn or_apply(&self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        let x = tape.concat_cols(a, b)?;
        self.apply_net(tape, self.or, x)
    }

    /// Encodes literals that all share one polarity; `[m, d]`.
    fn encode_uniform(&self, tape: &mut Tape<T>, users: &[usize], items: &[usize], polarity: Polarity) -> Result<Var> {
        let emb = self.p(tape, self.items)?;
        let ve = tape.gather_rows(emb, items)?;
        match (self.config.variant, polarity) {
            (Variant::NoPredicate, Polarity::Pos) => Ok(ve),
            (Variant::NoPredicate, Polarity::Neg) => {
                let not = self.not.ok_or_else(|| Error::contract("model has no NOT network"))?;
                self.apply_net(tape, not, ve)
            }
            (_, polarity) => {
                let users_id = self
                    .users
                    .ok_or_else(|| Error::contract("model has no user embeddings"))?;
                let table = self.p(tape, users_id)?;
                let ue = tape.gather_rows(table, users)?;
                let x = tape.concat_cols(ue, ve)?;
                let net = match polarity {
                    Polarity::Pos => self.pos,
                    Polarity::Neg => self.neg,
                }
                .ok_or_else(|| Error::contract("model has no predicate networks"))?;
                self.apply_net(tape, net, x)
            }
        }
    }

    /// Encodes a mixed-polarity list of literals, preserving row order; `[m, d]`.
    pub fn encode_literals(&self, tape: &mut Tape<T>, literals: &[Literal]) -> Result<Var> {
        if literals.is_empty() {
            return Err(Error::contract("no literals to encode"));
        }
        let users: Vec<usize> = literals.iter().map(|l| l.user).collect();
        let items: Vec<usize> = literals.iter().map(|l| l.item).collect();
        self.check_ids(&users, &items)?;
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(literals.len());
        for polarity in [Polarity::Pos, Polarity::Neg] {
            let rows: Vec<usize> = (0..literals.len())
                .filter(|&i| literals[i].polarity == polarity)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let u: Vec<usize> = rows.iter().map(|&i| users[i]).collect();
            let v: Vec<usize> = rows.iter().map(|&i| items[i]).collect();
            parts.push(self.encode_uniform(tape, &u, &v, polarity)?);
            order.extend(rows);
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            tape.stack_rows(&parts)?
        };
        reorder(tape, stacked, &order)
    }

    /// One self-attention layer over `k` sequences of length `seq` stored as
    /// `[k * seq, d]`, with a residual connection. Returns the output and the
    /// `[k * heads, seq, seq]` weights.
    fn attention_layer(&self, tape: &mut Tape<T>, ids: AttentionIds, x: Var, seq: usize) -> Result<(Var, Var)> {
        let heads = self.config.heads;
        let scale = to_t::<T>(1.0 / (self.config.d_k() as f64).sqrt());
        let mut proj = |w| -> Result<Var> {
            let w = self.p(tape, w)?;
            let y = tape.matmul(x, w)?;
            tape.split_heads(y, heads, seq)
        };
        let q = proj(ids.wq)?;
        let k = proj(ids.wk)?;
        let v = proj(ids.wv)?;
        let scores = tape.batched_matmul(q, k, true)?;
        let scores = tape.scalar_mul(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        let mixed = tape.batched_matmul(weights, v, false)?;
        let merged = tape.merge_heads(mixed, heads, seq)?;
        let wo = self.p(tape, ids.wo)?;
        let mixed = tape.matmul(merged, wo)?;
        // residual path: without it, near-uniform attention at small initial
        // scale averages every position into the same vector
        Ok((tape.add(x, mixed)?, weights))
    }

    /// Stacked self-attention; also returns each layer's attention weights.
    pub fn attention_stack(&self, tape: &mut Tape<T>, x: Var, seq: usize) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut weights = Vec::with_capacity(self.attention.len());
        for &ids in &self.attention {
            let (out, w) = self.attention_layer(tape, ids, h, seq)?;
            h = out;
            weights.push(w);
        }
        Ok((h, weights))
    }

    /// `h_t = (1 - z) * h_{t-1} + z * h̃`.
    pub fn gru_update(tape: &mut Tape<T>, h_prev: Var, z: Var, h_tilde: Var) -> Result<Var> {
        let neg_z = tape.scalar_mul(z, -T::one())?;
        let keep = tape.scalar_add(neg_z, T::one())?;
        let old = tape.mul(keep, h_prev)?;
        let new = tape.mul(z, h_tilde)?;
        tape.add(old, new)
    }

    /// Runs the GRU over `k` sequences of length `seq` (`[k * seq, d]`, sequence
    /// major) from a zero state and returns the output `[k, d]` of every step.
    pub fn gru_encode(&self, tape: &mut Tape<T>, x: Var, seq: usize) -> Result<Vec<Var>> {
        let ids = self.gru.ok_or_else(|| Error::contract("model has no encoder"))?;
        let rows = tape.value(x).rows();
        if seq == 0 || !rows.is_multiple_of(seq) {
            return Err(Error::shape("gru_encode", format!("{rows} rows with seq = {seq}")));
        }
        let k = rows / seq;
        let (wr, wz, wh, w0) = (
            self.p(tape, ids.wr)?,
            self.p(tape, ids.wz)?,
            self.p(tape, ids.wh)?,
            self.p(tape, ids.w0)?,
        );
        let mut h = tape.constant(Tensor::zeros([k, self.config.d]))?;
        let mut outputs = Vec::with_capacity(seq);
        for t in 0..seq {
            let xt = step_rows(tape, x, k, seq, t)?;
            let hx = tape.concat_cols(h, xt)?;
            let r = tape.matmul(hx, wr)?;
            let r = tape.sigmoid(r)?;
            let z = tape.matmul(hx, wz)?;
            let z = tape.sigmoid(z)?;
            let rh = tape.mul(r, h)?;
            let rhx = tape.concat_cols(rh, xt)?;
            let cand = tape.matmul(rhx, wh)?;
            let cand = tape.tanh(cand)?;
            h = Self::gru_update(tape, h, z, cand)?;
            let y = tape.matmul(h, w0)?;
            outputs.push(tape.sigmoid(y)?);
        }
        Ok(outputs)
    }

    /// Left fold with OR; a single step is returned unchanged. Also returns
    /// every OR output.
    pub fn or_fold(&self, tape: &mut Tape<T>, steps: &[Var]) -> Result<(Var, Vec<Var>)> {
        let (&first, rest) = steps
            .split_first()
            .ok_or_else(|| Error::contract("or_fold needs at least one vector"))?;
        let mut q = first;
        let mut outs = Vec::with_capacity(rest.len());
        for &s in rest {
            q = self.or_apply(tape, q, s)?;
            outs.push(q);
        }
        Ok((q, outs))
    }

    /// Queries for `k` histories of the same length `n`.
    fn group_query(
        &self,
        tape: &mut Tape<T>,
        users: &[usize],
        histories: &[&[(usize, Polarity)]],
        n: usize,
    ) -> Result<QueryOutput> {
        let k = users.len();
        let literals: Vec<Literal> = users
            .iter()
            .zip(histories)
            .flat_map(|(&user, h)| h.iter().map(move |&(item, polarity)| Literal { user, item, polarity }))
            .collect();
        let lits = self.encode_literals(tape, &literals)?;
        let mut logic = vec![lits];
        let steps = if self.config.variant == Variant::NoEncoder {
            (0..n)
                .map(|t| step_rows(tape, lits, k, n, t))
                .collect::<Result<Vec<_>>>()?
        } else {
            let (att, _) = self.attention_stack(tape, lits, n)?;
            let ys = self.gru_encode(tape, att, n)?;
            logic.extend(&ys);
            ys
        };
        let (query, ors) = self.or_fold(tape, &steps)?;
        logic.extend(ors);
        Ok(QueryOutput {
            query,
            logic,
            literal_pairs: literals.iter().map(|l| (l.user, l.item)).collect(),
        })
    }

    /// Query vectors for a batch of histories of any lengths in `1..=n_max`.
    pub fn queries(
        &self,
        tape: &mut Tape<T>,
        users: &[usize],
        histories: &[&[(usize, Polarity)]],
    ) -> Result<QueryOutput> {
        if users.len() != histories.len() || users.is_empty() {
            return Err(Error::contract(
                "queries needs one history per user and at least one of each",
            ));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, h) in histories.iter().enumerate() {
            if h.is_empty() || h.len() > self.config.n_max {
                return Err(Error::contract(format!(
                    "history length {} outside 1..={}",
                    h.len(),
                    self.config.n_max
                )));
            }
            groups.entry(h.len()).or_default().push(i);
        }
        let mut parts = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(users.len());
        let mut logic = Vec::new();
        let mut literal_pairs = Vec::new();
        for (n, idx) in groups {
            let u: Vec<usize> = idx.iter().map(|&i| users[i]).collect();
            let h: Vec<&[(usize, Polarity)]> = idx.iter().map(|&i| histories[i]).collect();
            let out = self.group_query(tape, &u, &h, n)?;
            parts.push(out.query);
            logic.extend(out.logic);
            literal_pairs.extend(out.literal_pairs);
            order.extend(idx);
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            tape.stack_rows(&parts)?
        };
        Ok(QueryOutput {
            query: reorder(tape, stacked, &order)?,
            logic,
            literal_pairs,
        })
    }

    /// `sigmoid(phi * cos(a, b))` row-wise; `[m]`.
    pub fn similarity(&self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        let cos = tape.cosine_rows_clamped(a, b, to_t(NORM_EPS))?;
        let scaled = tape.scalar_mul(cos, to_t(self.config.phi))?;
        tape.sigmoid(scaled)
    }

    /// Scores item `items[i]` against query row `i`; `[m]`. Also returns any
    /// logic vectors created on the way.
    pub fn score(&self, tape: &mut Tape<T>, query: Var, users: &[usize], items: &[usize]) -> Result<(Var, Vec<Var>)> {
        self.check_ids(users, items)?;
        match self.anchor {
            Some(anchor) => {
                let pv = self.encode_uniform(tape, users, items, Polarity::Pos)?;
                let implied = self.or_apply(tape, query, pv)?;
                let a = self.p(tape, anchor)?;
                let a = tape.gather_rows(a, &vec![0; items.len()])?;
                Ok((self.similarity(tape, implied, a)?, vec![pv, implied]))
            }
            None => {
                let emb = self.p(tape, self.items)?;
                let e = tape.gather_rows(emb, items)?;
                Ok((self.similarity(tape, query, e)?, Vec::new()))
            }
        }
    }

    /// Similarity between the positive and negative encodings of each distinct
    /// probed `(user, item)` pair, summed.
    fn rule_term(&self, tape: &mut Tape<T>, pairs: &[(usize, usize)]) -> Result<Var> {
        let (a, b) = if self.config.variant == Variant::NoPredicate {
            let items: Vec<usize> = pairs.iter().map(|p| p.1).collect::<BTreeSet<_>>().into_iter().collect();
            let u = vec![0; items.len()];
            (
                self.encode_uniform(tape, &u, &items, Polarity::Pos)?,
                self.encode_uniform(tape, &u, &items, Polarity::Neg)?,
            )
        } else {
            let distinct: Vec<(usize, usize)> = pairs.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            let u: Vec<usize> = distinct.iter().map(|p| p.0).collect();
            let v: Vec<usize> = distinct.iter().map(|p| p.1).collect();
            (
                self.encode_uniform(tape, &u, &v, Polarity::Pos)?,
                self.encode_uniform(tape, &u, &v, Polarity::Neg)?,
            )
        };
        let sim = self.similarity(tape, a, b)?;
        tape.sum(sim)
    }

    fn squared_norm(tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let sq = tape.mul(x, x)?;
        tape.sum(sq)
    }

    fn sum_vars(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
        let mut acc = match terms.first() {
            Some(&v) => v,
            None => return tape.constant(Tensor::scalar(T::zero())),
        };
        for &v in &terms[1..] {
            acc = tape.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Squared Frobenius norm of every trainable parameter, summed.
    pub fn params_term(&self, tape: &mut Tape<T>) -> Result<Var> {
        let ids: Vec<ParamId> = self.params.trainable_ids().collect();
        let mut norms = Vec::with_capacity(ids.len());
        for id in ids {
            let v = self.p(tape, id)?;
            norms.push(Self::squared_norm(tape, v)?);
        }
        Self::sum_vars(tape, &norms)
    }

    /// Builds the training objective for one batch on `tape`.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &[&TrainingInstance]) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        let users: Vec<usize> = batch.iter().map(|b| b.user).collect();
        let histories: Vec<&[(usize, Polarity)]> = batch.iter().map(|b| b.history.as_slice()).collect();
        let targets: Vec<usize> = batch.iter().map(|b| b.positive_target).collect();
        let negatives: Vec<usize> = batch.iter().map(|b| b.negative_sample).collect();

        let out = self.queries(tape, &users, &histories)?;
        let mut logic = out.logic;
        let (p_pos, extra) = self.score(tape, out.query, &users, &targets)?;
        logic.extend(extra);
        let (p_neg, extra) = self.score(tape, out.query, &users, &negatives)?;
        logic.extend(extra);

        let diff = tape.sub(p_pos, p_neg)?;
        let sig = tape.sigmoid(diff)?;
        let log = tape.log(sig)?;
        let total_log = tape.sum(log)?;
        let ranking = tape.scalar_mul(total_log, -T::one())?;

        let rule = self.rule_term(tape, &out.literal_pairs)?;

        let norms = logic
            .iter()
            .map(|&v| Self::squared_norm(tape, v))
            .collect::<Result<Vec<_>>>()?;
        let length = Self::sum_vars(tape, &norms)?;

        let params = self.params_term(tape)?;

        let c = &self.config;
        let weighted = [
            ranking,
            tape.scalar_mul(rule, to_t(c.lambda_p))?,
            tape.scalar_mul(length, to_t(c.lambda_len))?,
            tape.scalar_mul(params, to_t(c.lambda_theta))?,
        ];
        let total = Self::sum_vars(tape, &weighted)?;
        Ok(LossVars {
            ranking,
            rule,
            length,
            params,
            total,
        })
    }

    /// Reads the loss terms off a tape, failing on the first non-finite term.
    pub fn breakdown(tape: &Tape<T>, vars: &LossVars) -> Result<LossBreakdown> {
        let read = |v: Var, term: &str| -> Result<f64> {
            let x = tape.value(v).item().as_f64();
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::NonFinite { term: term.into() })
            }
        };
        Ok(LossBreakdown {
            ranking: read(vars.ranking, "ranking loss")?,
            rule: read(vars.rule, "rule loss")?,
            length: read(vars.length, "vector length loss")?,
            params: read(vars.params, "parameter loss")?,
            total: read(vars.total, "total loss")?,
        })
    }

    /// Scores every candidate list against its history's query. `candidates[i]`
    /// belongs to `users[i]` / `histories[i]`.
    pub fn score_candidates(
        &self,
        users: &[usize],
        histories: &[&[(usize, Polarity)]],
        candidates: &[&[usize]],
    ) -> Result<Vec<Vec<T>>> {
        if candidates.len() != users.len() {
            return Err(Error::contract("one candidate list per user required"));
        }
        let mut tape = Tape::new();
        let out = self.queries(&mut tape, users, histories)?;
        if self.anchor.is_none() {
            let q = tape.value(out.query);
            let emb = self.params.value(self.items);
            let phi = to_t::<T>(self.config.phi);
            let eps = to_t::<T>(NORM_EPS);
            return candidates
                .iter()
                .enumerate()
                .map(|(i, cands)| {
                    self.check_ids(&[], cands)?;
                    cands
                        .iter()
                        .map(|&v| Ok(tape::sigmoid(phi * tape::cosine_clamped(q.row(i), emb.row(v), eps)?)))
                        .collect()
                })
                .collect();
        }
        let rows: Vec<usize> = candidates
            .iter()
            .enumerate()
            .flat_map(|(i, c)| std::iter::repeat_n(i, c.len()))
            .collect();
        let u: Vec<usize> = rows.iter().map(|&i| users[i]).collect();
        let items: Vec<usize> = candidates.iter().flat_map(|c| c.iter().copied()).collect();
        let q = tape.gather_rows(out.query, &rows)?;
        let (s, _) = self.score(&mut tape, q, &u, &items)?;
        let flat = tape.value(s).data();
        let mut at = 0;
        Ok(candidates
            .iter()
            .map(|c| {
                let v = flat[at..at + c.len()].to_vec();
                at += c.len();
                v
            })
            .collect())
    }
}

/// Rows `t, seq + t, 2 seq + t, ...` of a `[k * seq, d]` matrix.
fn step_rows<T: Scalar>(tape: &mut Tape<T>, x: Var, k: usize, seq: usize, t: usize) -> Result<Var> {
    if seq == 1 {
        return Ok(x);
    }
    let idx: Vec<usize> = (0..k).map(|i| i * seq + t).collect();
    tape.gather_rows(x, &idx)
}

/// `stacked` holds rows in `order`; put row `order[j]` back at position `order[j]`.
fn reorder<T: Scalar>(tape: &mut Tape<T>, stacked: Var, order: &[usize]) -> Result<Var> {
    if order.iter().enumerate().all(|(j, &i)| i == j) {
        return Ok(stacked);
    }
    let mut inverse = vec![0; order.len()];
    for (j, &i) in order.iter().enumerate() {
        inverse[i] = j;
    }
    tape.gather_rows(stacked, &inverse)
}
