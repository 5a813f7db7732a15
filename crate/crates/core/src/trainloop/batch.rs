use std::collections::{BTreeSet, HashMap};

use crate::aggregator::FrameBatch;
use crate::featstore::FrameFeatureMatrix;
use crate::numkern::{Graph, Gradients, Real, Var};

use super::{Model, TrainError};

/// Sorted union of every item in the given sequences.
pub fn candidate_set(sequences: &[&[usize]]) -> Vec<usize> {
    sequences.iter().flat_map(|s| s.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Next-item training batch. Sequence `u` occupies rows `u·len .. (u+1)·len`
/// of the input/target grids, left-padded with `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n_users: usize,
    pub len: usize,
    pub inputs: Vec<Option<usize>>,
    pub targets: Vec<Option<usize>>,
    /// Distinct items of each user's (truncated) sequence, sorted.
    pub history: Vec<Vec<usize>>,
    /// In-batch candidates: every item appearing in the batch, sorted.
    pub candidates: Vec<usize>,
}

impl Batch {
    /// Scored positions as `(grid row, user)`.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.targets.len()).filter(|&r| self.targets[r].is_some()).map(|r| (r, r / self.len.max(1))).collect()
    }

    /// Whether candidate `c` may appear in the softmax of a position of
    /// user `u` whose target is `target`: the target itself, or any
    /// candidate outside the user's history.
    pub fn allowed(&self, u: usize, target: usize, c: usize) -> bool {
        c == target || self.history[u].binary_search(&c).is_err()
    }
}

/// Builds a batch from training sequences, each cut to its last
/// `max_seq_len + 1` items: inputs are all but the last item, targets all
/// but the first. Empty sequences are allowed and contribute nothing.
pub fn build_batch(sequences: &[&[usize]], max_seq_len: usize, n_items: usize) -> Result<Batch, TrainError> {
    let cut: Vec<&[usize]> = sequences.iter().map(|s| &s[s.len().saturating_sub(max_seq_len + 1)..]).collect();
    if let Some(&bad) = cut.iter().flat_map(|s| s.iter()).find(|&&i| i >= n_items) {
        return Err(TrainError::MissingFeatures(bad));
    }
    let len = cut.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0);
    let n_users = cut.len();
    let mut inputs = vec![None; n_users * len];
    let mut targets = vec![None; n_users * len];
    for (u, s) in cut.iter().enumerate() {
        let n = s.len().saturating_sub(1);
        let base = u * len + (len - n);
        for t in 0..n {
            inputs[base + t] = Some(s[t]);
            targets[base + t] = Some(s[t + 1]);
        }
    }
    let history: Vec<Vec<usize>> = cut.iter().map(|s| candidate_set(&[s])).collect();
    let candidates = candidate_set(&cut);
    let batch = Batch { n_users, len, inputs, targets, history, candidates };
    let has_negative = batch
        .positions()
        .iter()
        .any(|&(_, u)| batch.candidates.iter().any(|c| batch.history[u].binary_search(c).is_err()));
    if !has_negative {
        return Err(TrainError::DegenerateBatch);
    }
    Ok(batch)
}

/// In-batch sampled softmax: for every scored position the target competes
/// against the batch candidates outside the user's history. Returns the
/// mean negative log-likelihood over positions.
pub fn loss_graph<T: Real>(g: &mut Graph<'_, T>, model: &Model<T>, batch: &Batch, features: &[FrameFeatureMatrix]) -> Result<Var, TrainError> {
    let mats: Vec<&FrameFeatureMatrix> = batch
        .candidates
        .iter()
        .map(|&i| features.get(i).ok_or(TrainError::MissingFeatures(i)))
        .collect::<Result<_, _>>()?;
    let fb = FrameBatch::<T>::new(&mats, None)?;
    let frames = g.constant(fb.frames);
    let emb = model.aggregator.forward(g, frames, fb.segments)?;

    let col: HashMap<usize, usize> = batch.candidates.iter().enumerate().map(|(c, &i)| (i, c)).collect();
    let idx = batch.inputs.iter().map(|i| i.map(|i| col[&i])).collect();
    let x = g.gather_rows(emb, idx)?;
    let valid = batch.inputs.iter().map(Option::is_some).collect();
    let p = model.user.forward(g, x, batch.n_users, batch.len, valid)?;

    let positions = batch.positions();
    let p = g.select_rows(p, positions.iter().map(|&(r, _)| r).collect())?;
    let logits = g.matmul_nt(p, emb)?;
    let mut target_cols = Vec::with_capacity(positions.len());
    let mut allowed = Vec::with_capacity(positions.len() * batch.candidates.len());
    for &(r, u) in &positions {
        let t = batch.targets[r].expect("scored positions have targets");
        target_cols.push(col[&t]);
        allowed.extend(batch.candidates.iter().map(|&c| batch.allowed(u, t, c)));
    }
    Ok(g.cross_entropy(logits, target_cols, allowed)?)
}

pub struct StepOutput<T> {
    pub loss: f64,
    pub grads: Gradients<T>,
}

/// Loss and parameter gradients of one batch.
pub fn loss_step<T: Real>(model: &Model<T>, batch: &Batch, features: &[FrameFeatureMatrix]) -> Result<StepOutput<T>, TrainError> {
    let mut g = Graph::with_params(&model.store);
    let loss = loss_graph(&mut g, model, batch, features)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(TrainError::NonFinite(format!("loss is {value}")));
    }
    let grads = g.backward(loss)?;
    Ok(StepOutput { loss: value, grads })
}
