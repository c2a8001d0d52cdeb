//! Central-difference gradient checking.

use super::{Graph, Result, Tensor, Var};

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
/// where `numeric` is the central difference of `f` with step `h`.
pub fn max_relative_error(
    mut f: impl FnMut(&Tensor) -> f64,
    analytic: &Tensor,
    x: &Tensor,
    h: f64,
) -> f64 {
    assert_eq!(analytic.shape(), x.shape(), "gradient shape");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Checks the graph gradient of a scalar function of one tensor.
pub fn grad_check(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

/// Checks the graph gradient of a scalar function of several tensors; the
/// result is the worst error over all of them.
pub fn grad_check_many(
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    xs: &[Tensor],
    h: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let root = f(&mut g, &vars).expect("forward succeeded once already");
        g.value(root).item()
    };
    let mut worst: f64 = 0.0;
    for (j, x) in xs.iter().enumerate() {
        let analytic = grads.get(vars[j]).expect("leaf gradient");
        let mut inputs = xs.to_vec();
        let err = max_relative_error(
            |probe| {
                inputs[j] = probe.clone();
                eval(&inputs)
            },
            analytic,
            x,
            h,
        );
        worst = worst.max(err);
    }
    Ok(worst)
}
