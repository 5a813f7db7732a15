//! Finite-difference audit of every differentiable kernel and of the full
//! training objective, at 64-bit.

use crate::aggregator::{Aggregator, AggregatorKind, CvaConfig};
use crate::featstore::FrameFeatureMatrix;
use crate::numkern::nn::{LayerNorm, Linear, SeqShape, TransformerBlock};
use crate::numkern::{grad_check, grad_check_with_params, AttnShape, GradCheckReport, Graph, NumError, ParamStore, Prng, Tensor, Var};
use crate::seqrec::SeqEncoderConfig;
use crate::trainloop::{build_batch, loss_graph, Model, ModelConfig, TrainError};

/// Tolerance for kernels that act independently on each element.
pub const ELEMENTWISE_TOL: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<22} {:>8} {:>12} {:>10} {:>7}\n", "check", "coords", "max_rel", "tol", "result");
        for r in &self.rows {
            s += &format!(
                "{:<22} {:>8} {:>12.3e} {:>10.0e} {:>7}\n",
                r.name,
                r.report.coords_checked,
                r.report.max_rel_err,
                r.tolerance,
                if r.passed() { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

fn rand_tensor(rng: &mut Prng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// Adds `N(0, scale²)` to every parameter so checks run away from the init.
fn jitter(store: &mut ParamStore<f64>, rng: &mut Prng, scale: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += scale * rng.normal();
        }
    }
}

struct Suite {
    fault: Option<&'static str>,
    rng: Prng,
    rows: Vec<CheckRow>,
}

impl Suite {
    fn record(&mut self, name: &'static str, tolerance: f64, report: GradCheckReport) {
        self.rows.push(CheckRow { name, tolerance, report });
    }

    /// Checks `op(inputs)` read out through a random weighting.
    fn op<F>(&mut self, name: &'static str, tol: f64, shapes: &[&[usize]], out_shape: &[usize], op: F) -> Result<(), NumError>
    where
        F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, NumError>,
    {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut self.rng, s)).collect();
        let w = rand_tensor(&mut self.rng, out_shape);
        let fault = self.fault;
        let report = grad_check(
            |g, xs| {
                if let Some(f) = fault {
                    g.inject_fault(f);
                }
                let y = op(g, xs)?;
                g.weighted_sum(y, w.clone())
            },
            &inputs,
            EPS,
            None,
            0,
        )?;
        self.record(name, tol, report);
        Ok(())
    }

    fn with_params<F>(&mut self, name: &'static str, store: &ParamStore<f64>, shapes: &[&[usize]], out_shape: &[usize], op: F) -> Result<(), NumError>
    where
        F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, NumError>,
    {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut self.rng, s)).collect();
        let w = rand_tensor(&mut self.rng, out_shape);
        let fault = self.fault;
        let report = grad_check_with_params(
            store,
            |g, xs| {
                if let Some(f) = fault {
                    g.inject_fault(f);
                }
                let y = op(g, xs)?;
                g.weighted_sum(y, w.clone())
            },
            &inputs,
            EPS,
            None,
            0,
        )?;
        self.record(name, DEFAULT_TOL, report);
        Ok(())
    }
}

fn agg_err(e: crate::aggregator::AggError) -> NumError {
    match e {
        crate::aggregator::AggError::Num(n) => n,
        other => NumError::Config(other.to_string()),
    }
}

/// Runs every check. With `fault = Some(op)` the backward pass of kernel
/// `op` is deliberately broken, which the table must expose.
pub fn run_suite(fault: Option<&'static str>, seed: u64) -> Result<SuiteReport, TrainError> {
    let mut s = Suite { fault, rng: Prng::new(seed).fork("gradsuite"), rows: Vec::new() };
    let e = ELEMENTWISE_TOL;
    let d = DEFAULT_TOL;

    s.op("add", e, &[&[3, 4], &[3, 4]], &[3, 4], |g, x| g.add(x[0], x[1]))?;
    s.op("add_row", e, &[&[3, 4], &[4]], &[3, 4], |g, x| g.add_row(x[0], x[1]))?;
    s.op("add_tiled", e, &[&[6, 4], &[2, 4]], &[6, 4], |g, x| g.add_tiled(x[0], x[1]))?;
    s.op("mul", e, &[&[3, 4], &[3, 4]], &[3, 4], |g, x| g.mul(x[0], x[1]))?;
    s.op("scale", e, &[&[3, 4]], &[3, 4], |g, x| g.scale(x[0], -1.7))?;
    s.op("gelu", e, &[&[3, 4]], &[3, 4], |g, x| g.gelu(x[0]))?;
    s.op("geglu", e, &[&[3, 8]], &[3, 4], |g, x| g.geglu(x[0]))?;
    s.op("sum_all", e, &[&[3, 4]], &[1], |g, x| g.sum_all(x[0]))?;

    s.op("matmul", d, &[&[4, 5], &[5, 3]], &[4, 3], |g, x| g.matmul(x[0], x[1]))?;
    s.op("matmul_nt", d, &[&[3, 4], &[5, 4]], &[3, 5], |g, x| g.matmul_nt(x[0], x[1]))?;
    s.op("layernorm", d, &[&[3, 6], &[6], &[6]], &[3, 6], |g, x| g.layernorm(x[0], x[1], x[2], 1e-5))?;
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3 || i == 3).collect();
    s.op("softmax_rows", d, &[&[3, 4]], &[3, 4], move |g, x| g.softmax_rows(x[0], Some(mask.clone())))?;
    let valid = vec![false, true, true, true, true, true];
    s.op("attention", d, &[&[6, 4], &[6, 4], &[6, 4]], &[6, 4], move |g, x| {
        g.attention(x[0], x[1], x[2], AttnShape { batch: 2, len: 3, heads: 2, causal: true, key_valid: Some(valid.clone()) })
    })?;
    s.op("segment_mean", d, &[&[5, 3]], &[2, 3], |g, x| g.segment_mean(x[0], vec![vec![0, 2], vec![1, 3, 4]]))?;
    s.op("repeat_rows", d, &[&[2, 3]], &[6, 3], |g, x| g.repeat_rows(x[0], 3))?;
    s.op("group_mean", d, &[&[6, 3]], &[2, 3], |g, x| g.group_mean(x[0], 3))?;
    s.op("gather_rows", d, &[&[3, 4]], &[4, 4], |g, x| g.gather_rows(x[0], vec![Some(2), None, Some(0), Some(2)]))?;
    s.op("select_rows", d, &[&[3, 4]], &[4, 4], |g, x| g.select_rows(x[0], vec![1, 1, 0, 2]))?;
    let allowed = vec![true, true, false, true, true, false, true, true];
    s.op("cross_entropy", d, &[&[2, 4]], &[1], move |g, x| g.cross_entropy(x[0], vec![1, 3], allowed.clone()))?;

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, true, &mut s.rng.fork("lin"));
    let ln = LayerNorm::new(&mut store, "ln", 3);
    jitter(&mut store, &mut s.rng.fork("jitter/lin"), 0.5);
    s.with_params("linear+layernorm", &store, &[&[5, 4]], &[5, 3], |g, x| {
        let y = lin.forward(g, x[0])?;
        ln.forward(g, y)
    })?;

    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "block", 4, 2, 2.0, &mut s.rng.fork("block"))?;
    jitter(&mut store, &mut s.rng.fork("jitter/block"), 0.3);
    s.with_params("transformer_block", &store, &[&[6, 4]], &[6, 4], |g, x| block.forward(g, x[0], &SeqShape::dense(2, 3, true)))?;

    let cva_cfg = CvaConfig { dim_in: 6, dim_latent: 8, n_latents: 2, depth: 2, heads: 2, ffn_mult: 2.0 };
    for (name, kind) in [("cva_forward", AggregatorKind::Cva), ("pool_linear", AggregatorKind::PoolLinear), ("mlp", AggregatorKind::Mlp)] {
        let mut store = ParamStore::new();
        let agg = Aggregator::new(kind, &cva_cfg, &mut store, &mut s.rng.fork(name)).map_err(TrainError::Aggregator)?;
        jitter(&mut store, &mut s.rng.fork("jitter/agg"), 0.3);
        s.with_params(name, &store, &[&[5, 6]], &[2, 6], |g, x| agg.forward(g, x[0], vec![vec![0, 1, 4], vec![2, 3]]).map_err(agg_err))?;
    }

    composite(&mut s)?;
    Ok(SuiteReport { rows: s.rows })
}

/// The whole objective: frames through the aggregator, sequences through
/// the user encoder, in-batch softmax loss. Two users, three items.
fn composite(s: &mut Suite) -> Result<(), TrainError> {
    let config = ModelConfig {
        aggregator: AggregatorKind::Cva,
        cva: CvaConfig { dim_in: 6, dim_latent: 8, n_latents: 2, depth: 2, heads: 2, ffn_mult: 2.0 },
        seq: SeqEncoderConfig { max_seq_len: 4, dim: 6, depth: 1, heads: 2, ffn_mult: 2.0 },
    };
    let mut model = Model::<f64>::new(&config, 7)?;
    jitter(&mut model.store, &mut s.rng.fork("jitter/model"), 0.3);
    let features: Vec<FrameFeatureMatrix> = (0..3)
        .map(|i| {
            let n = 2 + i;
            let data = (0..n * 6).map(|_| s.rng.normal() as f32).collect();
            FrameFeatureMatrix::new(format!("v{i}"), 6, (0..n as u32).collect(), data).expect("valid synthetic matrix")
        })
        .collect();
    let seqs: [&[usize]; 2] = [&[0, 1, 0, 2], &[2, 0]];
    let batch = build_batch(&seqs, config.seq.max_seq_len, features.len())?;
    // Frames enter as constants inside `loss_graph`; only parameters are probed.
    let fault = s.fault;
    let report = grad_check_with_params(
        &model.store,
        |g, _| {
            if let Some(f) = fault {
                g.inject_fault(f);
            }
            loss_graph(g, &model, &batch, &features).map_err(|e| match e {
                TrainError::Num(n) => n,
                other => NumError::Config(other.to_string()),
            })
        },
        &[],
        EPS,
        None,
        0,
    )?;
    s.record("composite_loss", DEFAULT_TOL, report);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let r = run_suite(None, 1).unwrap();
        assert!(r.all_passed(), "{}", r.to_table());
        assert!(r.rows.iter().any(|c| c.name == "composite_loss"));
    }

    #[test]
    fn broken_kernel_is_flagged() {
        let r = run_suite(Some("layernorm"), 1).unwrap();
        let failed: Vec<_> = r.rows.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
        assert!(failed.contains(&"layernorm") && failed.contains(&"composite_loss"), "{failed:?}");
        assert!(!failed.contains(&"matmul"));
    }
}
