//! The COR network: embedding + sinusoidal positions, parallel forward and
//! backward transformer stacks, feature concatenation into a fusion block
//! over two key banks, and a per-position softmax over the vocabulary.
//! The UniCOR ablation keeps only the forward (causal) stack.
//!
//! Input is x_1..x_{T-1}; output position t scores the target x_{t+1}.

use crate::autodiff::{Tape, Var};
use crate::block::{sinusoidal_positions, BlockParams, BlockVars, init_matrix, transformer_block};
use crate::error::{Error, Result};
use crate::mask::{build_backward_mask, build_forward_mask, build_fusion_mask};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorVariant {
    Cor,
    UniCor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub head_count: usize,
    pub inner_dim: usize,
    /// Blocks per directional stack.
    pub stack_depth: usize,
    pub fusion_depth: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub variant: CorVariant,
}

impl CorConfig {
    /// Desk-scale defaults; full-scale values (512/5/8/1024) remain expressible.
    pub fn desk(vocab_size: usize, variant: CorVariant) -> Self {
        CorConfig {
            vocab_size,
            model_dim: 64,
            head_count: 4,
            inner_dim: 128,
            stack_depth: 2,
            fusion_depth: 1,
            max_len: 64,
            dropout_rate: 0.0,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.model_dim.is_multiple_of(self.head_count) {
            return Err(Error::Contract(
                "model_dim must be divisible by head_count".into(),
            ));
        }
        if self.stack_depth < 1 || self.fusion_depth < 1 {
            return Err(Error::Contract("stack depths must be >= 1".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Contract(
                "vocab must hold the reserved symbols plus at least one token".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CorModel {
    pub config: CorConfig,
    /// [K x D]
    pub embedding: Tensor,
    pub forward_stack: Vec<BlockParams>,
    pub backward_stack: Vec<BlockParams>,
    /// [2D x D]
    pub fusion_input_proj: Tensor,
    pub fusion_stack: Vec<BlockParams>,
    /// [D x K]
    pub output_proj: Tensor,
}

impl CorModel {
    pub fn init(config: &CorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let block =
            |rng: &mut ChaCha8Rng| BlockParams::init(rng, d, config.head_count, config.inner_dim);
        let forward_stack = (0..config.stack_depth).map(|_| block(&mut rng)).collect();
        let (backward_stack, fusion_input_proj, fusion_stack) = match config.variant {
            CorVariant::Cor => (
                (0..config.stack_depth).map(|_| block(&mut rng)).collect(),
                init_matrix(&mut rng, 2 * d, d),
                (0..config.fusion_depth).map(|_| block(&mut rng)).collect(),
            ),
            CorVariant::UniCor => (Vec::new(), Tensor::zeros(vec![0]), Vec::new()),
        };
        Ok(CorModel {
            config: config.clone(),
            embedding: init_matrix(&mut rng, config.vocab_size, d),
            forward_stack,
            backward_stack,
            fusion_input_proj,
            fusion_stack,
            output_proj: init_matrix(&mut rng, d, config.vocab_size),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("embedding".to_string(), &self.embedding));
        for (i, b) in self.forward_stack.iter().enumerate() {
            b.collect(&format!("fwd{i}"), &mut out);
        }
        for (i, b) in self.backward_stack.iter().enumerate() {
            b.collect(&format!("bwd{i}"), &mut out);
        }
        if self.config.variant == CorVariant::Cor {
            out.push(("fusion_proj".to_string(), &self.fusion_input_proj));
            for (i, b) in self.fusion_stack.iter().enumerate() {
                b.collect(&format!("fuse{i}"), &mut out);
            }
        }
        out.push(("output_proj".to_string(), &self.output_proj));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("embedding".to_string(), &mut self.embedding));
        for (i, b) in self.forward_stack.iter_mut().enumerate() {
            b.collect_mut(&format!("fwd{i}"), &mut out);
        }
        for (i, b) in self.backward_stack.iter_mut().enumerate() {
            b.collect_mut(&format!("bwd{i}"), &mut out);
        }
        if self.config.variant == CorVariant::Cor {
            out.push(("fusion_proj".to_string(), &mut self.fusion_input_proj));
            for (i, b) in self.fusion_stack.iter_mut().enumerate() {
                b.collect_mut(&format!("fuse{i}"), &mut out);
            }
        }
        out.push(("output_proj".to_string(), &mut self.output_proj));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Tape handles for one forward build of the model.
pub struct CorTapeVars {
    /// All parameter leaves in `named_tensors` order.
    pub flat: Vec<Var>,
    /// The embedded input node (gather + positions [+ perturbation]);
    /// its gradient rows are per-position embedding sensitivities.
    pub embedded: Var,
    pub logits: Var,
}

/// Embedding gather plus sinusoidal position encoding (positions from 0).
pub fn embed_with_positions(tokens: &[usize], model: &CorModel) -> Result<Tensor> {
    let mut tape = Tape::new();
    let table = tape.leaf(model.embedding.clone());
    let emb = embed_on_tape(&mut tape, table, tokens, model)?;
    Ok(tape.value(emb).clone())
}

fn embed_on_tape(
    tape: &mut Tape,
    table: Var,
    tokens: &[usize],
    model: &CorModel,
) -> Result<Var> {
    let k = model.config.vocab_size;
    if tokens.len() > model.config.max_len {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds max_len {}",
            tokens.len(),
            model.config.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= k) {
        return Err(Error::Contract(format!(
            "token index {bad} out of vocabulary (K={k})"
        )));
    }
    let gathered = tape.gather_rows(table, tokens);
    let pos = tape.leaf(sinusoidal_positions(tokens.len(), model.config.model_dim));
    Ok(tape.add(gathered, pos))
}

/// Build the full COR (or UniCOR) forward pass on a tape.
/// `perturb` is an optional additive offset on the embedded input, used by
/// the finite-difference side of the leak probe.
pub fn cor_forward_on_tape(
    tape: &mut Tape,
    tokens: &[usize],
    model: &CorModel,
    perturb: Option<&Tensor>,
) -> Result<CorTapeVars> {
    let n = tokens.len();
    if n < 1 {
        return Err(Error::Contract("input must hold at least one token".into()));
    }
    let mut flat = Vec::new();
    let table = tape.leaf(model.embedding.clone());
    flat.push(table);
    let fwd_vars: Vec<BlockVars> = model
        .forward_stack
        .iter()
        .map(|b| b.on_tape(tape, &mut flat))
        .collect();
    let bwd_vars: Vec<BlockVars> = model
        .backward_stack
        .iter()
        .map(|b| b.on_tape(tape, &mut flat))
        .collect();
    let (proj_var, fuse_vars) = if model.config.variant == CorVariant::Cor {
        let p = tape.leaf(model.fusion_input_proj.clone());
        flat.push(p);
        let f: Vec<BlockVars> = model
            .fusion_stack
            .iter()
            .map(|b| b.on_tape(tape, &mut flat))
            .collect();
        (Some(p), f)
    } else {
        (None, Vec::new())
    };
    let out_proj = tape.leaf(model.output_proj.clone());
    flat.push(out_proj);

    let mut embedded = embed_on_tape(tape, table, tokens, model)?;
    if let Some(delta) = perturb {
        let d = tape.leaf(delta.clone());
        embedded = tape.add(embedded, d);
    }

    let fwd_mask = build_forward_mask(n)?;
    let mut fwd = embedded;
    for vars in &fwd_vars {
        fwd = transformer_block(tape, fwd, &[fwd], &fwd_mask, vars)?;
    }

    let top = match model.config.variant {
        CorVariant::UniCor => fwd,
        CorVariant::Cor => {
            let bwd_mask = build_backward_mask(n)?;
            let mut bwd = embedded;
            for vars in &bwd_vars {
                bwd = transformer_block(tape, bwd, &[bwd], &bwd_mask, vars)?;
            }
            let fusion_mask = build_fusion_mask(n)?;
            let concat = tape.concat_cols(&[fwd, bwd]);
            let mut x = tape.matmul(concat, proj_var.expect("fusion projection present"));
            for vars in &fuse_vars {
                x = transformer_block(tape, x, &[fwd, bwd], &fusion_mask, vars)?;
            }
            x
        }
    };
    let logits = tape.matmul(top, out_proj);
    Ok(CorTapeVars {
        flat,
        embedded,
        logits,
    })
}

/// Per-position logits over the vocabulary for input x_1..x_{T-1}.
/// T >= 2, i.e. at least one input token and one target.
pub fn cor_forward(tokens: &[usize], model: &CorModel) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Contract(
            "no target exists for an empty input (T < 2)".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars = cor_forward_on_tape(&mut tape, tokens, model, None)?;
    Ok(tape.value(vars.logits).clone())
}

/// Per-position probability rows over the vocabulary; row t is the
/// distribution for the target x_{t+1}.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    /// [T-1 x K]
    pub probs: Tensor,
}

/// Temperature-softened per-position distributions, softmax(logits / tau).
pub fn teacher_distributions(
    tokens: &[usize],
    model: &CorModel,
    temperature: f64,
) -> Result<TeacherOutput> {
    if temperature <= 0.0 {
        return Err(Error::Contract("temperature must be positive".into()));
    }
    let logits = cor_forward(tokens, model)?;
    Ok(TeacherOutput {
        probs: softmax_rows_with_temperature(&logits, temperature),
    })
}

pub fn softmax_rows_with_temperature(logits: &Tensor, temperature: f64) -> Tensor {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] / temperature - max).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Argmax with deterministic tie-break by lowest token index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
