//! Future-conditioned sequence model.
//!
//! A window is encoded in three stages. First a GRU over the history items,
//! a user embedding and one tanh-projected token per objective feed a small
//! unmasked transformer over four tokens. Its outputs are concatenated
//! into the control signal, and the GRU state is refined into the initial
//! state. Finally a causal transformer reads `[control, state, item₁ …
//! item_{H−1}]` and decodes H next-item distributions.
//!
//! Every graph builder works on a batch of B windows at once. Rows are laid
//! out position-major (row `p·B + b` is token `p` of window `b`), and
//! attention is masked block-diagonally so windows never see each other.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemId, UserId};
use crate::diffcore::{Array, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::objectives::ObjectivePoint;
use crate::train::TrainingWindow;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const NUM_OBJECTIVES: usize = 2;

/// Additive attention mask value; `exp` of it underflows to exactly zero.
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Layer count shared by both transformers.
    pub layers: usize,
    pub heads: usize,
    pub horizon: usize,
    pub vocab: usize,
    pub num_users: usize,
    pub max_hist: usize,
    pub seed: u64,
    /// 1-based step-transformer layer feeding the control signal; `None`
    /// taps the final layer.
    #[serde(default)]
    pub control_layer: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: field.into(), message });
        if self.d_model == 0 {
            return bad("d_model", "must be >= 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads", format!("must divide d_model = {}", self.d_model));
        }
        if self.layers == 0 {
            return bad("layers", "must be >= 1".into());
        }
        if self.horizon < 2 {
            return bad("horizon", format!("must be >= 2, got {}", self.horizon));
        }
        if self.vocab == 0 || self.num_users == 0 {
            return bad("vocab", "vocabulary and user count must be non-zero".into());
        }
        if self.max_hist == 0 {
            return bad("max_hist", "must be >= 1".into());
        }
        if let Some(l) = self.control_layer {
            if l == 0 || l > self.layers {
                return bad("control_layer", format!("must be in 1..={}", self.layers));
            }
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, l, h, v, u) = (self.d_model, self.layers, self.horizon, self.vocab, self.num_users);
        let block = 12 * d * d + 13 * d;
        u * d
            + v * d
            + 2 * NUM_OBJECTIVES * d
            + (6 * d * d + 6 * d)
            + l * block
            + (5 * d * d + 2 * d)
            + (2 * d * d + 2 * d)
            + l * block
            + (h + 2) * d
            + 2 * d
            + (d * v + v)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_ff1: ParamId,
    b_ff1: ParamId,
    w_ff2: ParamId,
    b_ff2: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    user: ParamId,
    item: ParamId,
    obj_w: Vec<ParamId>,
    obj_b: Vec<ParamId>,
    gru_w: ParamId,
    gru_u: ParamId,
    gru_bx: ParamId,
    gru_bh: ParamId,
    step: Vec<Block>,
    ctrl_w1: ParamId,
    ctrl_b1: ParamId,
    ctrl_w2: ParamId,
    ctrl_b2: ParamId,
    state_w1: ParamId,
    state_b1: ParamId,
    state_w2: ParamId,
    state_b2: ParamId,
    pos: ParamId,
    seq: Vec<Block>,
    final_g: ParamId,
    final_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

struct Init {
    rng: ChaCha8Rng,
    bound: f64,
    store: ParamStore,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let b = self.bound;
        let data = (0..n).map(|_| self.rng.gen_range(-b..=b)).collect();
        self.store.add(name, Array::new(shape.to_vec(), data).expect("shape matches data"))
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Array::full(shape, value))
    }

    fn block(&mut self, prefix: &str, d: usize) -> Block {
        Block {
            ln1_g: self.fill(format!("{prefix}.ln1.gain"), &[d], 1.0),
            ln1_b: self.fill(format!("{prefix}.ln1.bias"), &[d], 0.0),
            w_qkv: self.uniform(format!("{prefix}.attn.qkv.weight"), &[d, 3 * d]),
            b_qkv: self.fill(format!("{prefix}.attn.qkv.bias"), &[3 * d], 0.0),
            w_o: self.uniform(format!("{prefix}.attn.out.weight"), &[d, d]),
            b_o: self.fill(format!("{prefix}.attn.out.bias"), &[d], 0.0),
            ln2_g: self.fill(format!("{prefix}.ln2.gain"), &[d], 1.0),
            ln2_b: self.fill(format!("{prefix}.ln2.bias"), &[d], 0.0),
            w_ff1: self.uniform(format!("{prefix}.ff1.weight"), &[d, 4 * d]),
            b_ff1: self.fill(format!("{prefix}.ff1.bias"), &[4 * d], 0.0),
            w_ff2: self.uniform(format!("{prefix}.ff2.weight"), &[4 * d, d]),
            b_ff2: self.fill(format!("{prefix}.ff2.bias"), &[d], 0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MocdtModel {
    config: ModelConfig,
    store: ParamStore,
    ids: Ids,
}

impl PartialEq for MocdtModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.store == other.store
    }
}

fn col(values: impl Iterator<Item = f64>) -> Array {
    let data: Vec<f64> = values.collect();
    let n = data.len();
    Array::new(vec![n, 1], data).expect("column shape")
}

/// `[n·B, n·B]` additive mask over position-major rows: row `i` may attend
/// to row `j` only within the same window and, if `causal`, at an earlier
/// or equal position.
fn block_mask(batch: usize, n: usize, causal: bool) -> Array {
    let rows = n * batch;
    let mut data = vec![MASKED; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            if i % batch == j % batch && (!causal || j / batch <= i / batch) {
                data[i * rows + j] = 0.0;
            }
        }
    }
    Array::new(vec![rows, rows], data).expect("square mask")
}

impl MocdtModel {
    /// Seeded initialization: uniform `±1/√d` for embedding tables and
    /// weights, zero biases, unit layer-norm gains, and a zero decoder.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            bound: 1.0 / (d as f64).sqrt(),
            store: ParamStore::new(),
        };
        let user = init.uniform("user_table".into(), &[config.num_users, d]);
        let item = init.uniform("item_table".into(), &[config.vocab, d]);
        let obj_w = (0..NUM_OBJECTIVES)
            .map(|k| init.uniform(format!("objective.{k}.weight"), &[1, d]))
            .collect();
        let obj_b = (0..NUM_OBJECTIVES)
            .map(|k| init.fill(format!("objective.{k}.bias"), &[d], 0.0))
            .collect();
        let gru_w = init.uniform("gru.input.weight".into(), &[d, 3 * d]);
        let gru_u = init.uniform("gru.hidden.weight".into(), &[d, 3 * d]);
        let gru_bx = init.fill("gru.input.bias".into(), &[3 * d], 0.0);
        let gru_bh = init.fill("gru.hidden.bias".into(), &[3 * d], 0.0);
        let step = (0..config.layers).map(|l| init.block(&format!("step.{l}"), d)).collect();
        let ctrl_w1 = init.uniform("control.fc1.weight".into(), &[(NUM_OBJECTIVES + 2) * d, d]);
        let ctrl_b1 = init.fill("control.fc1.bias".into(), &[d], 0.0);
        let ctrl_w2 = init.uniform("control.fc2.weight".into(), &[d, d]);
        let ctrl_b2 = init.fill("control.fc2.bias".into(), &[d], 0.0);
        let state_w1 = init.uniform("state.fc1.weight".into(), &[d, d]);
        let state_b1 = init.fill("state.fc1.bias".into(), &[d], 0.0);
        let state_w2 = init.uniform("state.fc2.weight".into(), &[d, d]);
        let state_b2 = init.fill("state.fc2.bias".into(), &[d], 0.0);
        let pos = init.uniform("seq.positions".into(), &[config.horizon + 2, d]);
        let seq = (0..config.layers).map(|l| init.block(&format!("seq.{l}"), d)).collect();
        let final_g = init.fill("seq.final_ln.gain".into(), &[d], 1.0);
        let final_b = init.fill("seq.final_ln.bias".into(), &[d], 0.0);
        let dec_w = init.fill("decoder.weight".into(), &[d, config.vocab], 0.0);
        let dec_b = init.fill("decoder.bias".into(), &[config.vocab], 0.0);
        let ids = Ids {
            user,
            item,
            obj_w,
            obj_b,
            gru_w,
            gru_u,
            gru_bx,
            gru_bh,
            step,
            ctrl_w1,
            ctrl_b1,
            ctrl_w2,
            ctrl_b2,
            state_w1,
            state_b1,
            state_w2,
            state_b2,
            pos,
            seq,
            final_g,
            final_b,
            dec_w,
            dec_b,
        };
        Ok(MocdtModel { config, store: init.store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// A fresh tape over this model's parameters.
    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.store)
    }

    fn check_items(&self, items: &[ItemId]) -> Result<()> {
        match items.iter().find(|&&i| i >= self.config.vocab) {
            Some(bad) => Err(Error::Lookup(format!(
                "item {bad} outside vocabulary of {}",
                self.config.vocab
            ))),
            None => Ok(()),
        }
    }

    fn check_user(&self, user: UserId) -> Result<()> {
        if user >= self.config.num_users {
            return Err(Error::Lookup(format!(
                "user {user} outside {} known users",
                self.config.num_users
            )));
        }
        Ok(())
    }

    /// Batched GRU over histories of possibly different lengths, `[B, d]`.
    ///
    /// Histories are left-aligned in time so that each ends at the last
    /// step; a row is frozen at its zero start state until its first item.
    pub fn encode_histories(&self, g: &mut Graph<'_>, histories: &[&[ItemId]]) -> Result<Var> {
        let d = self.config.d_model;
        let b = histories.len();
        let steps = histories.iter().map(|h| h.len()).max().unwrap_or(0);
        for h in histories {
            if h.len() > self.config.max_hist {
                return Err(Error::Domain(format!(
                    "history of {} items exceeds max_hist {}",
                    h.len(),
                    self.config.max_hist
                )));
            }
            self.check_items(h)?;
        }
        let mut h = g.constant(Array::zeros(&[b, d]));
        if steps == 0 {
            return Ok(h);
        }
        let mut ids = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for hist in histories {
                let start = steps - hist.len();
                ids.push(if t >= start { hist[t - start] } else { 0 });
            }
        }
        let table = g.param(self.ids.item);
        let emb = g.row_select(table, &ids)?;
        let (w, bx) = (g.param(self.ids.gru_w), g.param(self.ids.gru_bx));
        let xw_all = g.affine(emb, w, bx)?;
        let (u, bh) = (g.param(self.ids.gru_u), g.param(self.ids.gru_bh));
        for t in 0..steps {
            let rows: Vec<usize> = (t * b..(t + 1) * b).collect();
            let xw = g.row_select(xw_all, &rows)?;
            let hu = g.affine(h, u, bh)?;
            let gate = |g: &mut Graph<'_>, k: usize| -> Result<Var> {
                let x = g.slice_cols(xw, k * d, d)?;
                let y = g.slice_cols(hu, k * d, d)?;
                let s = g.add(x, y)?;
                g.sigmoid(s)
            };
            let r = gate(g, 0)?;
            let z = gate(g, 1)?;
            let xn = g.slice_cols(xw, 2 * d, d)?;
            let hn = g.slice_cols(hu, 2 * d, d)?;
            let rhn = g.mul(r, hn)?;
            let pre = g.add(xn, rhn)?;
            let n = g.tanh(pre)?;
            let diff = g.sub(h, n)?;
            let zd = g.mul(z, diff)?;
            let next = g.add(n, zd)?;
            let active: Vec<bool> = histories.iter().map(|hist| t >= steps - hist.len()).collect();
            h = if active.iter().all(|&a| a) {
                next
            } else {
                // exact select: 1·next + 0·h and 0·next + 1·h
                let on: Vec<f64> = active
                    .iter()
                    .flat_map(|&a| std::iter::repeat(if a { 1.0 } else { 0.0 }).take(d))
                    .collect();
                let off: Vec<f64> = on.iter().map(|m| 1.0 - m).collect();
                let on = g.constant(Array::new(vec![b, d], on)?);
                let off = g.constant(Array::new(vec![b, d], off)?);
                let keep_new = g.mul(next, on)?;
                let keep_old = g.mul(h, off)?;
                g.add(keep_new, keep_old)?
            };
        }
        Ok(h)
    }

    fn block(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        blk: &Block,
        mask: Option<Var>,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let (g1, b1) = (g.param(blk.ln1_g), g.param(blk.ln1_b));
        let a = g.layer_norm(x, g1, b1)?;
        let (w, b) = (g.param(blk.w_qkv), g.param(blk.b_qkv));
        let qkv = g.affine(a, w, b)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, d + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let mut s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let p = g.softmax(s)?;
            outs.push(g.matmul(p, v)?);
        }
        let o = if heads == 1 { outs[0] } else { g.concat(&outs)? };
        let (wo, bo) = (g.param(blk.w_o), g.param(blk.b_o));
        let proj = g.affine(o, wo, bo)?;
        let x = g.add(x, proj)?;
        let (g2, b2) = (g.param(blk.ln2_g), g.param(blk.ln2_b));
        let f = g.layer_norm(x, g2, b2)?;
        let (w1, bf1) = (g.param(blk.w_ff1), g.param(blk.b_ff1));
        let f = g.affine(f, w1, bf1)?;
        let f = g.tanh(f)?;
        let (w2, bf2) = (g.param(blk.w_ff2), g.param(blk.b_ff2));
        let f = g.affine(f, w2, bf2)?;
        g.add(x, f)
    }

    /// Step-transformer input `[4B, d]`: user, one token per objective, history.
    pub fn step_tokens(
        &self,
        g: &mut Graph<'_>,
        users: &[UserId],
        points: &[ObjectivePoint],
        hist: Var,
    ) -> Result<Var> {
        for &u in users {
            self.check_user(u)?;
        }
        let table = g.param(self.ids.user);
        let mut parts = vec![g.row_select(table, users)?];
        for k in 0..NUM_OBJECTIVES {
            let o = g.constant(col(points.iter().map(|p| p.as_array()[k])));
            let (w, b) = (g.param(self.ids.obj_w[k]), g.param(self.ids.obj_b[k]));
            let pre = g.affine(o, w, b)?;
            parts.push(g.tanh(pre)?);
        }
        parts.push(hist);
        g.concat_rows(&parts)
    }

    /// Outputs of every step-transformer layer, each `[4B, d]`.
    pub fn step_layers(&self, g: &mut Graph<'_>, tokens: Var, batch: usize) -> Result<Vec<Var>> {
        let mask = if batch > 1 {
            Some(g.constant(block_mask(batch, NUM_OBJECTIVES + 2, false)))
        } else {
            None
        };
        let mut x = tokens;
        let mut outs = Vec::with_capacity(self.config.layers);
        for blk in &self.ids.step {
            x = self.block(g, x, blk, mask)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// `[B, d]` control signal from one layer's `[4B, d]` step outputs.
    pub fn control_from(&self, g: &mut Graph<'_>, step_out: Var, batch: usize) -> Result<Var> {
        let n = NUM_OBJECTIVES + 2;
        if g.shape(step_out) != [n * batch, self.config.d_model] {
            return Err(Error::Shape {
                op: "control_signal",
                left: g.shape(step_out).to_vec(),
                right: vec![n * batch, self.config.d_model],
            });
        }
        let mut parts = Vec::with_capacity(n);
        for p in 0..n {
            let rows: Vec<usize> = (p * batch..(p + 1) * batch).collect();
            parts.push(g.row_select(step_out, &rows)?);
        }
        let x = g.concat(&parts)?;
        let (w1, b1) = (g.param(self.ids.ctrl_w1), g.param(self.ids.ctrl_b1));
        let hdn = g.affine(x, w1, b1)?;
        let hdn = g.tanh(hdn)?;
        let (w2, b2) = (g.param(self.ids.ctrl_w2), g.param(self.ids.ctrl_b2));
        g.affine(hdn, w2, b2)
    }

    pub fn state_from(&self, g: &mut Graph<'_>, hist: Var) -> Result<Var> {
        let (w1, b1) = (g.param(self.ids.state_w1), g.param(self.ids.state_b1));
        let hdn = g.affine(hist, w1, b1)?;
        let hdn = g.tanh(hdn)?;
        let (w2, b2) = (g.param(self.ids.state_w2), g.param(self.ids.state_b2));
        g.affine(hdn, w2, b2)
    }

    /// Control signal and initial state for a batch, each `[B, d]`.
    pub fn context(
        &self,
        g: &mut Graph<'_>,
        users: &[UserId],
        histories: &[&[ItemId]],
        points: &[ObjectivePoint],
    ) -> Result<(Var, Var)> {
        let b = users.len();
        if histories.len() != b || points.len() != b {
            return Err(Error::Shape {
                op: "context",
                left: vec![b],
                right: vec![histories.len(), points.len()],
            });
        }
        let hist = self.encode_histories(g, histories)?;
        let tokens = self.step_tokens(g, users, points, hist)?;
        let layers = self.step_layers(g, tokens, b)?;
        let tap = self.config.control_layer.unwrap_or(self.config.layers) - 1;
        let ctrl = self.control_from(g, layers[tap], b)?;
        let state = self.state_from(g, hist)?;
        Ok((ctrl, state))
    }

    /// Final-normalized hidden states `[(m + 2)·B, d]` for the token stream
    /// `[ctrl, state, inputs…]`, where every input list has the same length m.
    pub fn sequence_hidden(
        &self,
        g: &mut Graph<'_>,
        ctrl: Var,
        state: Var,
        inputs: &[&[ItemId]],
    ) -> Result<Var> {
        let b = inputs.len();
        let m = inputs.first().map_or(0, |s| s.len());
        if inputs.iter().any(|s| s.len() != m) {
            return Err(Error::Domain("ragged sequence inputs".into()));
        }
        if m + 2 > self.config.horizon + 2 {
            return Err(Error::Domain(format!(
                "sequence of {} inputs exceeds the positional table for H = {}",
                m, self.config.horizon
            )));
        }
        let mut parts = vec![ctrl, state];
        if m > 0 {
            let ids: Vec<ItemId> = (0..m).flat_map(|p| inputs.iter().map(move |s| s[p])).collect();
            self.check_items(&ids)?;
            let table = g.param(self.ids.item);
            parts.push(g.row_select(table, &ids)?);
        }
        let x = g.concat_rows(&parts)?;
        let n = m + 2;
        let pos_ids: Vec<usize> = (0..n).flat_map(|p| std::iter::repeat(p).take(b)).collect();
        let table = g.param(self.ids.pos);
        let pos = g.row_select(table, &pos_ids)?;
        let mut x = g.add(x, pos)?;
        let mask = g.constant(block_mask(b, n, true));
        for blk in &self.ids.seq {
            x = self.block(g, x, blk, Some(mask))?;
        }
        let (fg, fb) = (g.param(self.ids.final_g), g.param(self.ids.final_b));
        g.layer_norm(x, fg, fb)
    }

    pub fn decode(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        let (w, b) = (g.param(self.ids.dec_w), g.param(self.ids.dec_b));
        g.affine(hidden, w, b)
    }

    /// Teacher-forced logits `[H·B, vocab]`, position-major: row
    /// `k·B + b` predicts target `k` of window `b`.
    pub fn window_logits(&self, g: &mut Graph<'_>, windows: &[&TrainingWindow]) -> Result<Var> {
        let h = self.config.horizon;
        for w in windows {
            if w.targets.len() != h {
                return Err(Error::Shape {
                    op: "forward_window",
                    left: vec![w.targets.len()],
                    right: vec![h],
                });
            }
        }
        let b = windows.len();
        let users: Vec<UserId> = windows.iter().map(|w| w.user).collect();
        let hists: Vec<&[ItemId]> = windows.iter().map(|w| w.history.as_slice()).collect();
        let points: Vec<ObjectivePoint> = windows.iter().map(|w| w.point).collect();
        let (ctrl, state) = self.context(g, &users, &hists, &points)?;
        let inputs: Vec<&[ItemId]> = windows.iter().map(|w| &w.targets[..h - 1]).collect();
        let hidden = self.sequence_hidden(g, ctrl, state, &inputs)?;
        let rows: Vec<usize> = (b..(h + 1) * b).collect();
        let out = g.row_select(hidden, &rows)?;
        self.decode(g, out)
    }

    /// Mean next-item negative log-likelihood over all windows and positions.
    pub fn batch_loss(&self, g: &mut Graph<'_>, windows: &[&TrainingWindow]) -> Result<Var> {
        if windows.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let logits = self.window_logits(g, windows)?;
        let labels: Vec<ItemId> = (0..self.config.horizon)
            .flat_map(|k| windows.iter().map(move |w| w.targets[k]))
            .collect();
        g.cross_entropy_logits(logits, &labels)
    }

    pub fn nll_loss(&self, g: &mut Graph<'_>, window: &TrainingWindow) -> Result<Var> {
        self.batch_loss(g, &[window])
    }

    /// Final GRU state over `items`; the zero vector for an empty history.
    pub fn encode_history(&self, items: &[ItemId]) -> Result<Array> {
        let mut g = self.graph().checked(false);
        let h = self.encode_histories(&mut g, &[items])?;
        Ok(g.value(h).clone().reshape(vec![self.config.d_model])?)
    }

    /// Final-layer step-transformer outputs `[4, d]` for one window.
    pub fn step_transform(&self, user: UserId, point: ObjectivePoint, hist_vec: &Array) -> Result<Array> {
        let d = self.config.d_model;
        let mut g = self.graph().checked(false);
        let hist = g.constant(hist_vec.clone().reshape(vec![1, d])?);
        let tokens = self.step_tokens(&mut g, &[user], &[point], hist)?;
        let layers = self.step_layers(&mut g, tokens, 1)?;
        Ok(g.value(*layers.last().expect("layers >= 1")).clone())
    }

    pub fn control_signal(&self, step_outputs: &Array) -> Result<Array> {
        let mut g = self.graph().checked(false);
        let x = g.constant(step_outputs.clone());
        let c = self.control_from(&mut g, x, 1)?;
        Ok(g.value(c).clone().reshape(vec![self.config.d_model])?)
    }

    pub fn init_state(&self, hist_vec: &Array) -> Result<Array> {
        let d = self.config.d_model;
        let mut g = self.graph().checked(false);
        let x = g.constant(hist_vec.clone().reshape(vec![1, d])?);
        let s = self.state_from(&mut g, x)?;
        Ok(g.value(s).clone().reshape(vec![d])?)
    }

    /// Teacher-forced logits `[H, vocab]` for one window.
    pub fn forward_window(
        &self,
        user: UserId,
        history: &[ItemId],
        point: ObjectivePoint,
        targets: &[ItemId],
    ) -> Result<Array> {
        let window = TrainingWindow {
            user,
            history: history.to_vec(),
            targets: targets.to_vec(),
            point,
        };
        let mut g = self.graph().checked(false);
        let logits = self.window_logits(&mut g, &[&window])?;
        Ok(g.value(logits).clone())
    }
}
