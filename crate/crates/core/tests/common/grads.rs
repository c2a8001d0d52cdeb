//! Finite-difference checks for every differentiable op and for the full
//! training objective. Each group returns `(case, max relative error)`.

use dg_core::featurizers::ModelParams;
use dg_core::losses::{self, LossConfig, LossError, Regularizer};
use dg_core::tensor::gradcheck::{grad_check_many, max_relative_error};
use dg_core::tensor::{ConvSpec, Graph, HeadPool, ReduceOp, Result, Tensor, TensorError, Var};
use dg_core::training::loss_and_grads;

use super::{rng, tie_free, tiny_batch, tiny_config, tiny_params};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Errors = Vec<(String, f64)>;

/// Contracts `x` with fixed random weights so every output coordinate
/// matters and a plain sum cannot hide a wrong gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(tie_free(&shape, &mut rng(seed)));
    let p = g.mul(x, w)?;
    g.sum_all(p)
}

fn check(out: &mut Errors, name: &str, shapes: &[&[usize]], seed: u64, op: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let mut r = rng(seed);
    let xs: Vec<Tensor> = shapes.iter().map(|s| tie_free(s, &mut r)).collect();
    let err = grad_check_many(
        |g, vs| {
            let y = op(g, vs)?;
            project(g, y, seed + 1)
        },
        &xs,
        H,
    )
    .unwrap();
    out.push((name.to_string(), err));
}

/// Like [`check`] for ops that already return a scalar loss.
fn check_loss(out: &mut Errors, name: &str, shapes: &[&[usize]], seed: u64, f: impl Fn(&mut Graph, &[Var]) -> std::result::Result<Var, LossError>) {
    let mut r = rng(seed);
    let xs: Vec<Tensor> = shapes.iter().map(|s| tie_free(s, &mut r)).collect();
    let err = grad_check_many(|g, v| f(g, v).map_err(|e| TensorError::Invalid(e.to_string())), &xs, H).unwrap();
    out.push((name.to_string(), err));
}

pub fn elementwise() -> Errors {
    let mut out = Vec::new();
    let s: &[usize] = &[3, 4];
    check(&mut out, "abs", &[s], 1, |g, x| Ok(g.abs(x[0])));
    check(&mut out, "square", &[s], 2, |g, x| Ok(g.square(x[0])));
    check(&mut out, "relu", &[s], 3, |g, x| Ok(g.relu(x[0])));
    check(&mut out, "min_with_zero", &[s], 4, |g, x| Ok(g.min_with_zero(x[0])));
    check(&mut out, "exp", &[s], 5, |g, x| Ok(g.exp(x[0])));
    check(&mut out, "scale", &[s], 6, |g, x| Ok(g.scale(x[0], -2.5)));
    out
}

pub fn binary() -> Errors {
    let mut out = Vec::new();
    let pairs: [(&[usize], &[usize]); 3] = [(&[3, 4], &[3, 4]), (&[2, 3, 4], &[4]), (&[3, 1], &[1, 5])];
    for (i, (a, b)) in pairs.into_iter().enumerate() {
        let seed = 10 + i as u64 * 3;
        check(&mut out, &format!("add {a:?} {b:?}"), &[a, b], seed, |g, v| g.add(v[0], v[1]));
        check(&mut out, &format!("sub {a:?} {b:?}"), &[a, b], seed + 1, |g, v| g.sub(v[0], v[1]));
        check(&mut out, &format!("mul {a:?} {b:?}"), &[a, b], seed + 2, |g, v| g.mul(v[0], v[1]));
    }
    check(&mut out, "matmul", &[&[3, 4], &[4, 2]], 20, |g, v| g.matmul(v[0], v[1]));
    out
}

pub fn convolutions() -> Errors {
    let mut out = Vec::new();
    check(&mut out, "conv1d same", &[&[2, 3, 7], &[4, 3, 3]], 30, |g, v| g.conv(v[0], v[1], ConvSpec::same()));
    check(&mut out, "conv1d valid", &[&[3, 7], &[2, 3, 3]], 31, |g, v| g.conv(v[0], v[1], ConvSpec::valid()));
    check(&mut out, "conv1d strided", &[&[2, 3, 8], &[2, 3, 3]], 32, |g, v| g.conv(v[0], v[1], ConvSpec::strided(2)));
    check(&mut out, "conv2d same", &[&[2, 2, 5, 4], &[3, 2, 3, 3]], 33, |g, v| g.conv(v[0], v[1], ConvSpec::same()));
    check(&mut out, "conv2d strided", &[&[1, 2, 6, 6], &[2, 2, 3, 3]], 34, |g, v| g.conv(v[0], v[1], ConvSpec::strided(2)));
    check(&mut out, "conv2d valid", &[&[2, 5, 5], &[2, 2, 3, 3]], 35, |g, v| g.conv(v[0], v[1], ConvSpec::valid()));
    out
}

pub fn normalization_and_shape() -> Errors {
    let mut out = Vec::new();
    check(&mut out, "layer_norm", &[&[2, 4, 5], &[4], &[4]], 40, |g, v| g.layer_norm(v[0], v[1], v[2], 1, 1e-5));
    check(&mut out, "layer_norm last axis", &[&[3, 6], &[6], &[6]], 41, |g, v| g.layer_norm(v[0], v[1], v[2], 1, 1e-5));
    for (i, op) in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Max].into_iter().enumerate() {
        let seed = 50 + i as u64 * 2;
        check(&mut out, &format!("reduce {op:?} axis 1"), &[&[3, 4, 2]], seed, |g, x| g.reduce(x[0], op, &[1]));
        check(&mut out, &format!("reduce {op:?} axes 0,2"), &[&[3, 4, 2]], seed + 1, |g, x| g.reduce(x[0], op, &[0, 2]));
    }
    check(&mut out, "sum_all", &[&[3, 4]], 60, |g, x| {
        let s = g.sum_all(x[0])?;
        Ok(g.square(s))
    });
    check(&mut out, "mean_all", &[&[3, 4]], 61, |g, x| {
        let s = g.mean_all(x[0])?;
        Ok(g.square(s))
    });
    check(&mut out, "reshape", &[&[3, 4]], 62, |g, x| g.reshape(x[0], &[2, 6]));
    check(&mut out, "narrow", &[&[3, 5, 2]], 63, |g, x| g.narrow(x[0], 1, 1, 3));
    check(&mut out, "index_select", &[&[4, 3]], 64, |g, x| g.index_select(x[0], &[2, 0, 2, 3]));
    check(&mut out, "transpose", &[&[3, 5]], 21, |g, x| g.transpose(x[0]));
    check(&mut out, "log_softmax", &[&[3, 5]], 65, |g, x| g.log_softmax(x[0]));
    out
}

pub fn similarity() -> Errors {
    let mut out = Vec::new();
    check(&mut out, "pair_volumes", &[&[2, 3, 2, 1, 4], &[3, 3, 2, 2, 2]], 70, |g, v| g.pair_volumes(v[0], v[1]));
    check(&mut out, "similarity_volume", &[&[3, 2, 1, 4], &[3, 2, 2, 3]], 71, |g, v| g.similarity_volume(v[0], v[1]));
    check(&mut out, "aggregate max", &[&[2, 3, 2, 1, 4, 2, 2]], 72, |g, x| g.aggregate(x[0], HeadPool::Max));
    check(&mut out, "aggregate mean", &[&[2, 3, 2, 1, 4, 2, 2]], 73, |g, x| g.aggregate(x[0], HeadPool::Mean));
    check(&mut out, "per_head_scores", &[&[2, 2, 1, 4, 3, 2]], 74, |g, x| g.per_head_scores(x[0]));
    // Score gradient with respect to the features that feed the volume.
    for pool in [HeadPool::Max, HeadPool::Mean] {
        check(&mut out, &format!("score of features {pool:?}"), &[&[3, 2, 1, 5], &[3, 2, 2, 2]], 75, |g, v| {
            let vol = g.similarity_volume(v[0], v[1])?;
            let s = g.aggregate(vol, pool)?;
            g.reshape(s, &[1])
        });
    }
    out
}

pub fn loss_terms() -> Errors {
    let mut out = Vec::new();
    check_loss(&mut out, "info_nce", &[&[4, 4], &[1]], 80, |g, v| {
        let (a, b) = losses::info_nce(g, v[0], v[1])?;
        let b = g.scale(b, 0.7);
        Ok(g.add(a, b)?)
    });
    check_loss(&mut out, "l_dis", &[&[2, 2, 1, 3, 2, 2]], 81, |g, v| losses::l_dis(g, v[0]));
    check_loss(&mut out, "l_dis three heads", &[&[3, 1, 3, 2, 1]], 82, |g, v| losses::l_dis(g, v[0]));
    let mask = Tensor::new([2, 3], vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.25]).unwrap();
    check_loss(&mut out, "l_splice", &[&[2, 2, 1, 3, 2, 2]], 83, |g, v| losses::l_splice(g, v[0], &mask));
    check_loss(&mut out, "l_cal", &[&[1]], 84, |g, v| {
        // Shifted below zero so the penalty is active.
        let shift = g.constant(Tensor::new([1], vec![-1.5]).unwrap());
        let lg = g.add(v[0], shift)?;
        losses::l_cal(g, lg)
    });
    check_loss(&mut out, "l_nonneg", &[&[2, 2, 1, 3, 2, 2]], 85, |g, v| {
        losses::l_nonneg(g, v[0], &[0, 3, 3, 7, 11, 20, 40, 47])
    });
    check_loss(&mut out, "l_tv", &[&[2, 2, 1, 4, 2, 2]], 86, |g, v| losses::l_tv(g, v[0]));
    out
}

/// The full objective through a tiny model, one case per weight tensor.
pub fn total_loss() -> Errors {
    let cfg = tiny_config();
    let params = tiny_params(&cfg, 3);
    let batch = tiny_batch(&cfg, 3, 4);
    let mut loss = LossConfig::default();
    // Larger weights so every regularizer moves the gradient noticeably.
    for r in Regularizer::ALL {
        loss.weights.set(r, 0.5);
    }
    let nonneg = || dg_core::rng::stream(9, "nonneg", 1);
    let (breakdown, grads) = loss_and_grads(&params, &batch, &loss, |_| true, &mut nonneg()).unwrap();
    for r in Regularizer::ALL {
        assert!(breakdown.component(r) > 0.0, "{r} inactive in the check");
    }
    let value = |p: &ModelParams| {
        let (b, _) = loss_and_grads(p, &batch, &loss, |_| false, &mut nonneg()).unwrap();
        b.total
    };
    params
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let err = max_relative_error(
                |probe| {
                    let mut p = params.clone();
                    p.tensors_mut()[i] = probe.clone();
                    value(&p)
                },
                &grads[i],
                &params.tensors()[i],
                H,
            );
            (format!("total_loss d/{name}"), err)
        })
        .collect()
}

pub fn all() -> Errors {
    [elementwise(), binary(), convolutions(), normalization_and_shape(), similarity(), loss_terms(), total_loss()]
        .concat()
}
