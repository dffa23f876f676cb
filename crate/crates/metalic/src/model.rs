//! The in-context axial-attention regressor. A context batch becomes a
//! (rows x positions) token grid: per-residue embeddings plus a fitness
//! token column (true value for support rows, zero for query rows) and an
//! optional auxiliary-score column, with a learned support/query flag added
//! to every cell. Axial blocks attend along each row and down each column;
//! a pooled MLP head emits one score per query row.

use crate::autodiff::{AttnBatch, AttnPlan, Tape, Var};
use crate::embed::Provider;
use crate::tasks::{ContextBatch, Sequence};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite activation (divergence)")]
    NonFiniteActivation,
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub axial_ffn_dim: usize,
    pub mlp_layers: Vec<usize>,
    pub attention_dropout: f64,
    pub dropout: f64,
    pub use_aux_channel: bool,
    /// false = the NoICL ablation: no attention across context rows.
    pub column_attention_enabled: bool,
    /// Maximum residue positions the learned positional table covers.
    pub max_len: usize,
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn full_scale() -> Self {
        ModelConfig {
            embed_dim: 768,
            n_layers: 5,
            n_heads: 4,
            axial_ffn_dim: 400,
            mlp_layers: vec![768, 768, 768, 768],
            attention_dropout: 0.1,
            dropout: 0.0,
            use_aux_channel: false,
            column_attention_enabled: true,
            max_len: 750,
        }
    }

    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk_scale() -> Self {
        ModelConfig {
            embed_dim: 32,
            n_layers: 2,
            n_heads: 4,
            axial_ffn_dim: 64,
            mlp_layers: vec![32, 32],
            attention_dropout: 0.1,
            dropout: 0.0,
            use_aux_channel: false,
            column_attention_enabled: true,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(ModelError::InvalidConfig("dims must be positive".into()));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) || !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Extra (non-residue) grid columns: fitness token, plus aux token.
    pub fn t_extra(&self) -> usize {
        if self.use_aux_channel {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub bo: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub row_attn: AttnParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub col_attn: AttnParams,
    pub ln3_gamma: Tensor,
    pub ln3_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub fitness_w: Tensor,
    pub fitness_b: Tensor,
    pub aux_w: Option<Tensor>,
    pub aux_b: Option<Tensor>,
    /// Row 0: support flag, row 1: query flag.
    pub flags: Tensor,
    /// Residue positions 0..max_len, then one row each for the fitness and
    /// aux columns.
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    /// MLP head: (w, b) per layer, last layer emits one scalar.
    pub head: Vec<(Tensor, Tensor)>,
    /// Token embedding rows for the learned-table provider.
    pub token_table: Option<Tensor>,
}

fn attn_init(d: usize, rng: &mut impl Rng) -> AttnParams {
    AttnParams {
        wq: Tensor::glorot(d, d, rng),
        wk: Tensor::glorot(d, d, rng),
        wv: Tensor::glorot(d, d, rng),
        wo: Tensor::glorot(d, d, rng),
        bq: Tensor::zeros(1, d),
        bk: Tensor::zeros(1, d),
        bv: Tensor::zeros(1, d),
        bo: Tensor::zeros(1, d),
    }
}

/// Deterministic parameter initialization: projections scaled-uniform, flag
/// and positional embeddings small-random, biases zero.
pub fn init_model(
    config: &ModelConfig,
    d_in: usize,
    learned_vocab: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let d = config.embed_dim;
    let blocks = (0..config.n_layers)
        .map(|_| BlockParams {
            ln1_gamma: ones(d),
            ln1_beta: Tensor::zeros(1, d),
            row_attn: attn_init(d, rng),
            ln2_gamma: ones(d),
            ln2_beta: Tensor::zeros(1, d),
            col_attn: attn_init(d, rng),
            ln3_gamma: ones(d),
            ln3_beta: Tensor::zeros(1, d),
            ffn_w1: Tensor::glorot(d, config.axial_ffn_dim, rng),
            ffn_b1: Tensor::zeros(1, config.axial_ffn_dim),
            ffn_w2: Tensor::glorot(config.axial_ffn_dim, d, rng),
            ffn_b2: Tensor::zeros(1, d),
        })
        .collect();
    let mut head = Vec::new();
    let mut prev = d * (2 + config.use_aux_channel as usize);
    for &h in &config.mlp_layers {
        head.push((Tensor::glorot(prev, h, rng), Tensor::zeros(1, h)));
        prev = h;
    }
    head.push((Tensor::glorot(prev, 1, rng), Tensor::zeros(1, 1)));
    Ok(ModelParams {
        input_w: Tensor::glorot(d_in, d, rng),
        input_b: Tensor::zeros(1, d),
        fitness_w: Tensor::glorot(1, d, rng),
        fitness_b: Tensor::zeros(1, d),
        aux_w: config.use_aux_channel.then(|| Tensor::glorot(1, d, rng)),
        aux_b: config.use_aux_channel.then(|| Tensor::zeros(1, d)),
        flags: Tensor::uniform(2, d, 0.02, rng),
        pos: Tensor::uniform(config.max_len + 2, d, 0.02, rng),
        blocks,
        final_gamma: ones(d),
        final_beta: Tensor::zeros(1, d),
        head,
        token_table: learned_vocab.map(|v| Tensor::uniform(v, d_in, 0.5, rng)),
    })
}

fn ones(d: usize) -> Tensor {
    Tensor::from_vec(1, d, vec![1.0; d])
}

impl ModelParams {
    /// Enumerate every tensor with a stable name and a bias flag (bias and
    /// layer-norm shift vectors are exempt from weight decay).
    pub fn for_each(&self, f: &mut dyn FnMut(&str, bool, &Tensor)) {
        f("input.w", false, &self.input_w);
        f("input.bias", true, &self.input_b);
        f("fitness.w", false, &self.fitness_w);
        f("fitness.bias", true, &self.fitness_b);
        if let Some(w) = &self.aux_w {
            f("aux.w", false, w);
        }
        if let Some(b) = &self.aux_b {
            f("aux.bias", true, b);
        }
        f("flags", false, &self.flags);
        f("pos", false, &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            f(&format!("{p}.ln1.gamma"), false, &b.ln1_gamma);
            f(&format!("{p}.ln1.beta"), true, &b.ln1_beta);
            for (tag, a) in [("row", &b.row_attn), ("col", &b.col_attn)] {
                f(&format!("{p}.{tag}.wq"), false, &a.wq);
                f(&format!("{p}.{tag}.wk"), false, &a.wk);
                f(&format!("{p}.{tag}.wv"), false, &a.wv);
                f(&format!("{p}.{tag}.wo"), false, &a.wo);
                f(&format!("{p}.{tag}.bq.bias"), true, &a.bq);
                f(&format!("{p}.{tag}.bk.bias"), true, &a.bk);
                f(&format!("{p}.{tag}.bv.bias"), true, &a.bv);
                f(&format!("{p}.{tag}.bo.bias"), true, &a.bo);
            }
            f(&format!("{p}.ln2.gamma"), false, &b.ln2_gamma);
            f(&format!("{p}.ln2.beta"), true, &b.ln2_beta);
            f(&format!("{p}.ln3.gamma"), false, &b.ln3_gamma);
            f(&format!("{p}.ln3.beta"), true, &b.ln3_beta);
            f(&format!("{p}.ffn.w1"), false, &b.ffn_w1);
            f(&format!("{p}.ffn.b1.bias"), true, &b.ffn_b1);
            f(&format!("{p}.ffn.w2"), false, &b.ffn_w2);
            f(&format!("{p}.ffn.b2.bias"), true, &b.ffn_b2);
        }
        f("final.gamma", false, &self.final_gamma);
        f("final.beta", true, &self.final_beta);
        for (i, (w, b)) in self.head.iter().enumerate() {
            f(&format!("head{i}.w"), false, w);
            f(&format!("head{i}.bias"), true, b);
        }
        if let Some(t) = &self.token_table {
            f("token_table", false, t);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, bool, &mut Tensor)) {
        f("input.w", false, &mut self.input_w);
        f("input.bias", true, &mut self.input_b);
        f("fitness.w", false, &mut self.fitness_w);
        f("fitness.bias", true, &mut self.fitness_b);
        if let Some(w) = &mut self.aux_w {
            f("aux.w", false, w);
        }
        if let Some(b) = &mut self.aux_b {
            f("aux.bias", true, b);
        }
        f("flags", false, &mut self.flags);
        f("pos", false, &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i}");
            f(&format!("{p}.ln1.gamma"), false, &mut b.ln1_gamma);
            f(&format!("{p}.ln1.beta"), true, &mut b.ln1_beta);
            for (tag, a) in [("row", &mut b.row_attn), ("col", &mut b.col_attn)] {
                f(&format!("{p}.{tag}.wq"), false, &mut a.wq);
                f(&format!("{p}.{tag}.wk"), false, &mut a.wk);
                f(&format!("{p}.{tag}.wv"), false, &mut a.wv);
                f(&format!("{p}.{tag}.wo"), false, &mut a.wo);
                f(&format!("{p}.{tag}.bq.bias"), true, &mut a.bq);
                f(&format!("{p}.{tag}.bk.bias"), true, &mut a.bk);
                f(&format!("{p}.{tag}.bv.bias"), true, &mut a.bv);
                f(&format!("{p}.{tag}.bo.bias"), true, &mut a.bo);
            }
            f(&format!("{p}.ln2.gamma"), false, &mut b.ln2_gamma);
            f(&format!("{p}.ln2.beta"), true, &mut b.ln2_beta);
            f(&format!("{p}.ln3.gamma"), false, &mut b.ln3_gamma);
            f(&format!("{p}.ln3.beta"), true, &mut b.ln3_beta);
            f(&format!("{p}.ffn.w1"), false, &mut b.ffn_w1);
            f(&format!("{p}.ffn.b1.bias"), true, &mut b.ffn_b1);
            f(&format!("{p}.ffn.w2"), false, &mut b.ffn_w2);
            f(&format!("{p}.ffn.b2.bias"), true, &mut b.ffn_b2);
        }
        f("final.gamma", false, &mut self.final_gamma);
        f("final.beta", true, &mut self.final_beta);
        for (i, (w, b)) in self.head.iter_mut().enumerate() {
            f(&format!("head{i}.w"), false, w);
            f(&format!("head{i}.bias"), true, b);
        }
        if let Some(t) = &mut self.token_table {
            f("token_table", false, t);
        }
    }

    pub fn named(&self) -> Vec<(String, bool, Tensor)> {
        let mut out = Vec::new();
        self.for_each(&mut |n, b, t| out.push((n.to_string(), b, t.clone())));
        out
    }

    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, _, t| ok &= t.all_finite());
        ok
    }
}

/// Parameter leaves registered on a tape, addressable by name.
pub struct ParamVars {
    map: HashMap<String, Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut map = HashMap::new();
        params.for_each(&mut |name, _, t| {
            map.insert(name.to_string(), tape.leaf(t.clone()));
        });
        ParamVars { map }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.map.get(name).unwrap_or_else(|| panic!("no param var {name}"))
    }

    /// Collect gradients keyed by parameter name.
    pub fn gradients(
        &self,
        params: &ModelParams,
        grads: &[Option<Tensor>],
    ) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        params.for_each(&mut |name, _, t| {
            let v = self.map[name];
            let g = grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
            out.insert(name.to_string(), g);
        });
        out
    }
}

/// Assembled token grid: a (K*Lt, D) node plus its geometry and masks.
pub struct Grid {
    pub x: Var,
    pub k_rows: usize,
    pub n_support: usize,
    pub n_query: usize,
    pub l_max: usize,
    pub lt: usize,
    /// Validity per grid cell, row-major (K*Lt). Padding cells are invalid.
    pub valid: Vec<bool>,
}

impl Grid {
    fn cell(&self, k: usize, c: usize) -> usize {
        k * self.lt + c
    }
}

pub struct ForwardOutput {
    pub scores: Var,
    /// Column-attention nodes per layer (empty when column attention is off
    /// or capture was not requested).
    pub col_attn_nodes: Vec<Var>,
    /// Attention-cell count for this forward pass.
    pub attn_cells: u64,
}

/// Per-layer, per-head row-normalized column-attention weights over context
/// rows, averaged over grid columns: (layers, heads, K, K).
pub struct AttentionMap {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionMap {
    /// Average over layers and heads: one (K, K) row-stochastic matrix.
    pub fn mean_over_layers_heads(&self) -> Tensor {
        let first = &self.layers[0][0];
        let mut out = Tensor::zeros(first.rows, first.cols);
        let mut n = 0.0;
        for layer in &self.layers {
            for h in layer {
                out.add_assign(h);
                n += 1.0;
            }
        }
        out.scale_assign(1.0 / n);
        out
    }
}

/// Closed-form attention-cell count per axial block.
pub fn attn_cells_closed_form(k_rows: usize, lt: usize, column_attention: bool) -> u64 {
    let row = (k_rows * lt * lt) as u64;
    let col = if column_attention { (lt * k_rows * k_rows) as u64 } else { 0 };
    row + col
}

/// Build the token grid for a context batch.
pub fn assemble_grid(
    tape: &mut Tape,
    _params: &ModelParams,
    vars: &ParamVars,
    config: &ModelConfig,
    provider: &Provider,
    context: &ContextBatch,
) -> Result<Grid, ModelError> {
    let n_support = context.n_support();
    let n_query = context.n_query();
    let k_rows = n_support + n_query;
    assert!(k_rows >= 1, "empty context");
    let t_extra = config.t_extra();

    struct RowInput<'a> {
        seq: &'a Sequence,
        fitness_in: f64,
        aux_in: f64,
        is_query: bool,
    }
    let rows: Vec<RowInput> = context
        .support
        .iter()
        .map(|(s, y, a)| RowInput { seq: s, fitness_in: *y, aux_in: a.unwrap_or(0.0), is_query: false })
        .chain(context.query.iter().map(|(s, a)| RowInput {
            seq: s,
            // Query fitness inputs are zeroed; true labels never enter the grid.
            fitness_in: 0.0,
            aux_in: a.unwrap_or(0.0),
            is_query: true,
        }))
        .collect();

    let l_max = rows.iter().map(|r| r.seq.len()).max().unwrap();
    if l_max > config.max_len {
        return Err(ModelError::InvalidConfig(format!(
            "sequence length {l_max} exceeds configured max_len {}",
            config.max_len
        )));
    }
    let lt = l_max + t_extra;

    // Residue embeddings for all rows, concatenated: (sum L, D_in) -> (sum L, D).
    let emb = if matches!(provider, Provider::LearnedTable { .. }) {
        let mut idx = Vec::new();
        for r in &rows {
            idx.extend(r.seq.tokens().iter().map(|&t| t as usize));
        }
        let table = vars.get("token_table");
        tape.gather_rows(table, idx)
    } else {
        let mut total = 0;
        for r in &rows {
            total += r.seq.len();
        }
        let d_in = provider.d_in();
        let mut m = Tensor::zeros(total, d_in);
        let mut off = 0;
        for r in &rows {
            let e = provider.embed(r.seq, None)?;
            m.data[off * d_in..(off + e.rows) * d_in].copy_from_slice(&e.data);
            off += e.rows;
        }
        tape.constant(m)
    };
    let projected = {
        let w = vars.get("input.w");
        let b = vars.get("input.bias");
        let h = tape.matmul(emb, w);
        tape.add_bias(h, b)
    };

    // Fitness token column: scalar inputs projected to D.
    let fit_in = Tensor::from_vec(k_rows, 1, rows.iter().map(|r| r.fitness_in).collect());
    let fit_col = {
        let c = tape.constant(fit_in);
        let w = vars.get("fitness.w");
        let b = vars.get("fitness.bias");
        let h = tape.matmul(c, w);
        tape.add_bias(h, b)
    };
    let aux_col = if config.use_aux_channel {
        let aux_in = Tensor::from_vec(k_rows, 1, rows.iter().map(|r| r.aux_in).collect());
        let c = tape.constant(aux_in);
        let w = vars.get("aux.w");
        let b = vars.get("aux.bias");
        let h = tape.matmul(c, w);
        Some(tape.add_bias(h, b))
    } else {
        None
    };

    // One zero row for padding cells.
    let zero_row = tape.constant(Tensor::zeros(1, config.embed_dim));
    let mut parts = vec![projected, fit_col];
    if let Some(a) = aux_col {
        parts.push(a);
    }
    parts.push(zero_row);
    let source = tape.concat_rows(parts);

    // Map every grid cell to a source row.
    let mut seq_offsets = Vec::with_capacity(k_rows);
    let mut off = 0;
    for r in &rows {
        seq_offsets.push(off);
        off += r.seq.len();
    }
    let total_res = off;
    let zero_idx = total_res + k_rows * (1 + config.use_aux_channel as usize);
    let mut grid_idx = Vec::with_capacity(k_rows * lt);
    let mut pos_idx = Vec::with_capacity(k_rows * lt);
    let mut flag_idx = Vec::with_capacity(k_rows * lt);
    let mut valid = Vec::with_capacity(k_rows * lt);
    for (k, r) in rows.iter().enumerate() {
        for c in 0..lt {
            let (src, pos, ok) = if c < r.seq.len() {
                (seq_offsets[k] + c, c, true)
            } else if c < l_max {
                (zero_idx, c, false) // padding cell
            } else if c == l_max {
                (total_res + k, config.max_len, true) // fitness column
            } else {
                (total_res + k_rows + k, config.max_len + 1, true) // aux column
            };
            grid_idx.push(src);
            pos_idx.push(pos);
            flag_idx.push(r.is_query as usize);
            valid.push(ok);
        }
    }
    let base = tape.gather_rows(source, grid_idx);
    let pos = {
        let p = vars.get("pos");
        tape.gather_rows(p, pos_idx)
    };
    let flags = {
        let fvar = vars.get("flags");
        tape.gather_rows(fvar, flag_idx)
    };
    let x = tape.add(base, pos);
    let x = tape.add(x, flags);
    Ok(Grid { x, k_rows, n_support, n_query, l_max, lt, valid })
}

fn attn_sublayer(
    tape: &mut Tape,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    ln_gamma: &str,
    ln_beta: &str,
    plan: &AttnPlan,
    rng: Option<&mut ChaCha8Rng>,
) -> (Var, Var) {
    let g = vars.get(ln_gamma);
    let b = vars.get(ln_beta);
    let h = tape.layer_norm(x, g, b);
    let q = {
        let w = vars.get(&format!("{prefix}.wq"));
        let bq = vars.get(&format!("{prefix}.bq.bias"));
        let t = tape.matmul(h, w);
        tape.add_bias(t, bq)
    };
    let k = {
        let w = vars.get(&format!("{prefix}.wk"));
        let bk = vars.get(&format!("{prefix}.bk.bias"));
        let t = tape.matmul(h, w);
        tape.add_bias(t, bk)
    };
    let v = {
        let w = vars.get(&format!("{prefix}.wv"));
        let bv = vars.get(&format!("{prefix}.bv.bias"));
        let t = tape.matmul(h, w);
        tape.add_bias(t, bv)
    };
    let attn = tape.attention(q, k, v, plan.clone(), rng.map(|r| r as &mut dyn rand::RngCore));
    let out = {
        let w = vars.get(&format!("{prefix}.wo"));
        let bo = vars.get(&format!("{prefix}.bo.bias"));
        let t = tape.matmul(attn, w);
        tape.add_bias(t, bo)
    };
    (tape.add(x, out), attn)
}

/// Run the axial blocks and the pooled head. Dropout is active only when an
/// rng is supplied (training mode).
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    config: &ModelConfig,
    grid: &Grid,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    capture_attention: bool,
) -> Result<ForwardOutput, ModelError> {
    let cells_before = tape.attn_cells;
    let heads = config.n_heads;
    let head_dim = config.head_dim();
    let dropout_p = if dropout_rng.is_some() { config.attention_dropout } else { 0.0 };

    // Row plan: one batch per context row across its Lt columns.
    let row_plan = AttnPlan {
        heads,
        head_dim,
        batches: (0..grid.k_rows)
            .map(|k| AttnBatch {
                rows: (0..grid.lt).map(|c| grid.cell(k, c)).collect(),
                key_valid: (0..grid.lt).map(|c| grid.valid[grid.cell(k, c)]).collect(),
            })
            .collect(),
        dropout_p,
    };
    // Column plan: one batch per grid column across the K context rows.
    let col_plan = AttnPlan {
        heads,
        head_dim,
        batches: (0..grid.lt)
            .map(|c| AttnBatch {
                rows: (0..grid.k_rows).map(|k| grid.cell(k, c)).collect(),
                key_valid: (0..grid.k_rows).map(|k| grid.valid[grid.cell(k, c)]).collect(),
            })
            .collect(),
        dropout_p,
    };

    let mut x = grid.x;
    let mut col_attn_nodes = Vec::new();
    for i in 0..config.n_layers {
        let p = format!("block{i}");
        let (nx, _) = attn_sublayer(
            tape,
            vars,
            &format!("{p}.row"),
            x,
            &format!("{p}.ln1.gamma"),
            &format!("{p}.ln1.beta"),
            &row_plan,
            dropout_rng.as_deref_mut(),
        );
        x = nx;
        if config.column_attention_enabled {
            let (nx, attn) = attn_sublayer(
                tape,
                vars,
                &format!("{p}.col"),
                x,
                &format!("{p}.ln2.gamma"),
                &format!("{p}.ln2.beta"),
                &col_plan,
                dropout_rng.as_deref_mut(),
            );
            x = nx;
            if capture_attention {
                col_attn_nodes.push(attn);
            }
        }
        // feed-forward
        let g = vars.get(&format!("{p}.ln3.gamma"));
        let b = vars.get(&format!("{p}.ln3.beta"));
        let h = tape.layer_norm(x, g, b);
        let h = {
            let w = vars.get(&format!("{p}.ffn.w1"));
            let bb = vars.get(&format!("{p}.ffn.b1.bias"));
            let t = tape.matmul(h, w);
            tape.add_bias(t, bb)
        };
        let h = tape.relu(h);
        let h = {
            let w = vars.get(&format!("{p}.ffn.w2"));
            let bb = vars.get(&format!("{p}.ffn.b2.bias"));
            let t = tape.matmul(h, w);
            tape.add_bias(t, bb)
        };
        x = tape.add(x, h);
    }
    let g = vars.get("final.gamma");
    let b = vars.get("final.beta");
    let x = tape.layer_norm(x, g, b);

    // Mask-aware mean pool over residue columns, per context row.
    let groups: Vec<Vec<usize>> = (0..grid.k_rows)
        .map(|k| {
            (0..grid.l_max)
                .map(|c| grid.cell(k, c))
                .filter(|&cell| grid.valid[cell])
                .collect()
        })
        .collect();
    let pooled = tape.mean_pool_rows(x, groups);
    let fit_cells: Vec<usize> = (0..grid.k_rows).map(|k| grid.cell(k, grid.l_max)).collect();
    let fit_emb = tape.gather_rows(x, fit_cells);
    let mut parts = vec![pooled, fit_emb];
    if config.use_aux_channel {
        let aux_cells: Vec<usize> =
            (0..grid.k_rows).map(|k| grid.cell(k, grid.l_max + 1)).collect();
        parts.push(tape.gather_rows(x, aux_cells));
    }
    let head_in = tape.concat_cols(parts);
    let query_rows: Vec<usize> = (grid.n_support..grid.k_rows).collect();
    let mut h = tape.gather_rows(head_in, query_rows);
    let n_head = params.head.len();
    for i in 0..n_head {
        let w = vars.get(&format!("head{i}.w"));
        let bb = vars.get(&format!("head{i}.bias"));
        h = tape.matmul(h, w);
        h = tape.add_bias(h, bb);
        if i + 1 < n_head {
            h = tape.relu(h);
        }
    }
    if !tape.value(h).all_finite() {
        return Err(ModelError::NonFiniteActivation);
    }
    Ok(ForwardOutput { scores: h, col_attn_nodes, attn_cells: tape.attn_cells - cells_before })
}

/// Assemble column-attention weights over context rows from a completed
/// forward pass, averaged over grid columns.
pub fn attention_map(tape: &Tape, out: &ForwardOutput, heads: usize) -> Option<AttentionMap> {
    if out.col_attn_nodes.is_empty() {
        return None;
    }
    let mut layers = Vec::new();
    for &node in &out.col_attn_nodes {
        let weights = tape.attention_weights(node)?;
        let n_cols = weights.len() / heads;
        let k = weights[0].rows;
        let mut per_head = vec![Tensor::zeros(k, k); heads];
        for (i, w) in weights.iter().enumerate() {
            per_head[i % heads].add_assign(w);
        }
        for h in &mut per_head {
            h.scale_assign(1.0 / n_cols as f64);
        }
        layers.push(per_head);
    }
    Some(AttentionMap { layers })
}

/// Single evaluation-mode pass: assemble, forward, return query scores.
pub fn predict(
    params: &ModelParams,
    config: &ModelConfig,
    provider: &Provider,
    context: &ContextBatch,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let grid = assemble_grid(&mut tape, params, &vars, config, provider, context)?;
    let out = forward(&mut tape, params, &vars, config, &grid, None, false)?;
    Ok(tape.value(out.scores).data.clone())
}

/// predict + attention capture, for analysis dumps.
pub fn predict_with_attention(
    params: &ModelParams,
    config: &ModelConfig,
    provider: &Provider,
    context: &ContextBatch,
) -> Result<(Vec<f64>, Option<AttentionMap>), ModelError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let grid = assemble_grid(&mut tape, params, &vars, config, provider, context)?;
    let out = forward(&mut tape, params, &vars, config, &grid, None, true)?;
    let map = attention_map(&tape, &out, config.n_heads);
    Ok((tape.value(out.scores).data.clone(), map))
}
