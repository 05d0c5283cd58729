//! Attention mask construction and the symbolic visibility oracle.
//!
//! Convention, fixed here and enforced by the leak probes: output position
//! t in 1..=n predicts the token x_{t+1}; input bank position j carries the
//! token x_j. The forward rule allows j <= t, the backward rule allows
//! j >= t+2 (j = t+1 is the prediction target itself and must stay hidden).

use crate::error::{Error, Result};
use std::collections::BTreeSet;

/// One bank of keys with a boolean allow matrix over (query, key) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBank {
    pub n_key: usize,
    /// Row-major [n_query x n_key], true = attention permitted.
    pub allow: Vec<bool>,
}

impl MaskBank {
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.n_key + k]
    }
}

/// A per-(query, key) allow/deny matrix, possibly spanning several key banks.
/// Fully-denied query rows are legal; `masked_softmax` maps them to zero rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub n_query: usize,
    pub banks: Vec<MaskBank>,
}

impl AttentionMask {
    pub fn total_keys(&self) -> usize {
        self.banks.iter().map(|b| b.n_key).sum()
    }

    /// Flattened allow matrix across all banks, [n_query x total_keys].
    pub fn flat_allow(&self) -> Vec<bool> {
        let total = self.total_keys();
        let mut flat = vec![false; self.n_query * total];
        for q in 0..self.n_query {
            let mut off = 0;
            for bank in &self.banks {
                for k in 0..bank.n_key {
                    flat[q * total + off + k] = bank.allows(q, k);
                }
                off += bank.n_key;
            }
        }
        flat
    }

    /// Plain-text dump: one `1`/`.` grid per bank, query rows top to bottom.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (bi, bank) in self.banks.iter().enumerate() {
            if bi > 0 {
                out.push('\n');
            }
            for q in 0..self.n_query {
                for k in 0..bank.n_key {
                    out.push(if bank.allows(q, k) { '1' } else { '.' });
                }
                out.push('\n');
            }
        }
        out
    }
}

fn build_single_bank(n: usize, rule: impl Fn(usize, usize) -> bool) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::Contract("mask size must be >= 1".into()));
    }
    let mut allow = vec![false; n * n];
    for t in 1..=n {
        for j in 1..=n {
            allow[(t - 1) * n + (j - 1)] = rule(t, j);
        }
    }
    Ok(AttentionMask {
        n_query: n,
        banks: vec![MaskBank { n_key: n, allow }],
    })
}

/// Causal mask: output t sees x_1..x_t, the full left context of x_{t+1}.
pub fn build_forward_mask(n: usize) -> Result<AttentionMask> {
    build_single_bank(n, |t, j| j <= t)
}

/// Anti-causal mask with the target offset: output t sees x_{t+2}..x_{n}.
/// The last two query rows are fully denied.
pub fn build_backward_mask(n: usize) -> Result<AttentionMask> {
    build_single_bank(n, |t, j| j >= t + 2)
}

/// Two-bank fusion mask. Bank F carries forward-stack outputs (allow j <= t),
/// bank B carries backward-stack outputs (allow j >= t+2). Net token
/// visibility at output t is the whole sequence minus the target x_{t+1}.
///
/// Bank B must skip j = t+1: stack outputs carry their own position's token
/// through the residual path, so attending to backward position t+1 would
/// leak the target. The visibility oracle and the leak probe both pin this.
pub fn build_fusion_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::Contract("mask size must be >= 1".into()));
    }
    let mut fwd = vec![false; n * n];
    let mut bwd = vec![false; n * n];
    for t in 1..=n {
        for j in 1..=n {
            fwd[(t - 1) * n + (j - 1)] = j <= t;
            bwd[(t - 1) * n + (j - 1)] = j >= t + 2;
        }
    }
    Ok(AttentionMask {
        n_query: n,
        banks: vec![
            MaskBank { n_key: n, allow: fwd },
            MaskBank { n_key: n, allow: bwd },
        ],
    })
}

/// Per output position, the set of input token positions (1-based) whose
/// value can influence that output. Monotone under stacking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilitySet {
    pub sets: Vec<BTreeSet<usize>>,
}

impl VisibilitySet {
    pub fn at(&self, t: usize) -> &BTreeSet<usize> {
        &self.sets[t - 1]
    }
}

/// Description of a stack of attention layers, for symbolic reachability.
#[derive(Debug, Clone)]
pub enum StackDesc {
    /// No mixing: visibility(t) = {x_t}.
    Identity { n: usize },
    /// Residual attention layer over the base stack's outputs under a
    /// single-bank mask.
    Attend {
        base: Box<StackDesc>,
        mask: AttentionMask,
    },
    /// Feature concatenation of several stacks at the same positions.
    Concat { parts: Vec<StackDesc> },
    /// Fusion layer: residual queries from `query`, keys/values from each
    /// bank's stack, gated by the corresponding mask bank.
    Fuse {
        query: Box<StackDesc>,
        bank_stacks: Vec<StackDesc>,
        mask: AttentionMask,
    },
}

impl StackDesc {
    pub fn positions(&self) -> usize {
        match self {
            StackDesc::Identity { n } => *n,
            StackDesc::Attend { base, .. } => base.positions(),
            StackDesc::Concat { parts } => parts[0].positions(),
            StackDesc::Fuse { query, .. } => query.positions(),
        }
    }
}

/// Exact reachable-token sets per output position, by boolean composition
/// of allow matrices through the stack description.
pub fn visibility_oracle(stack: &StackDesc) -> Result<VisibilitySet> {
    let sets = visibility_bits(stack)?;
    Ok(VisibilitySet {
        sets: sets
            .into_iter()
            .map(|bits| {
                (1..=64)
                    .filter(|j| bits & (1u64 << (j - 1)) != 0)
                    .collect()
            })
            .collect(),
    })
}

fn visibility_bits(stack: &StackDesc) -> Result<Vec<u64>> {
    match stack {
        StackDesc::Identity { n } => {
            if *n == 0 || *n > 64 {
                return Err(Error::Contract("identity stack size must be in 1..=64".into()));
            }
            Ok((1..=*n).map(|t| 1u64 << (t - 1)).collect())
        }
        StackDesc::Attend { base, mask } => {
            let below = visibility_bits(base)?;
            if mask.banks.len() != 1 || mask.banks[0].n_key != below.len() {
                return Err(Error::ShapeMismatch(
                    "attend layer expects a single bank matching the base stack".into(),
                ));
            }
            if mask.n_query != below.len() {
                return Err(Error::ShapeMismatch("query count mismatch".into()));
            }
            let bank = &mask.banks[0];
            let mut out = Vec::with_capacity(below.len());
            for q in 0..mask.n_query {
                let mut bits = below[q]; // residual path
                for (k, &b) in below.iter().enumerate() {
                    if bank.allows(q, k) {
                        bits |= b;
                    }
                }
                out.push(bits);
            }
            Ok(out)
        }
        StackDesc::Concat { parts } => {
            let mut acc: Option<Vec<u64>> = None;
            for part in parts {
                let v = visibility_bits(part)?;
                match &mut acc {
                    None => acc = Some(v),
                    Some(a) => {
                        if a.len() != v.len() {
                            return Err(Error::ShapeMismatch("concat size mismatch".into()));
                        }
                        for (x, y) in a.iter_mut().zip(v) {
                            *x |= y;
                        }
                    }
                }
            }
            acc.ok_or_else(|| Error::Contract("empty concat".into()))
        }
        StackDesc::Fuse {
            query,
            bank_stacks,
            mask,
        } => {
            if bank_stacks.len() != mask.banks.len() {
                return Err(Error::ShapeMismatch(
                    "fusion bank count must match mask bank count".into(),
                ));
            }
            let query_vis = visibility_bits(query)?;
            if query_vis.len() != mask.n_query {
                return Err(Error::ShapeMismatch("fusion query count mismatch".into()));
            }
            let mut bank_vis = Vec::with_capacity(bank_stacks.len());
            for (stack, bank) in bank_stacks.iter().zip(&mask.banks) {
                let v = visibility_bits(stack)?;
                if v.len() != bank.n_key {
                    return Err(Error::ShapeMismatch("fusion bank size mismatch".into()));
                }
                bank_vis.push(v);
            }
            let mut out = Vec::with_capacity(mask.n_query);
            for q in 0..mask.n_query {
                let mut bits = query_vis[q]; // residual path
                for (bank, vis) in mask.banks.iter().zip(&bank_vis) {
                    for (k, &b) in vis.iter().enumerate() {
                        if bank.allows(q, k) {
                            bits |= b;
                        }
                    }
                }
                out.push(bits);
            }
            Ok(out)
        }
    }
}

/// Visibility of the full COR network: `depth`-deep forward and backward
/// stacks fused by the two-bank mask.
pub fn cor_stack_desc(n: usize, depth: usize, fusion_depth: usize) -> Result<StackDesc> {
    let mut fwd = StackDesc::Identity { n };
    let mut bwd = StackDesc::Identity { n };
    for _ in 0..depth {
        fwd = StackDesc::Attend {
            base: Box::new(fwd),
            mask: build_forward_mask(n)?,
        };
        bwd = StackDesc::Attend {
            base: Box::new(bwd),
            mask: build_backward_mask(n)?,
        };
    }
    let mut stack = StackDesc::Concat {
        parts: vec![fwd.clone(), bwd.clone()],
    };
    for _ in 0..fusion_depth.max(1) {
        stack = StackDesc::Fuse {
            query: Box::new(stack),
            bank_stacks: vec![fwd.clone(), bwd.clone()],
            mask: build_fusion_mask(n)?,
        };
    }
    Ok(stack)
}
