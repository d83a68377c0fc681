//! Finite-difference and closed-form checks of the differentiation engine.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every vector-Jacobian product it checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{self, BackwardOptions, ParamSet, Result, Tensor, UpdateOrder};
use crate::config::{DepthReadout, LossWeights};
use crate::model::{self, loss_concentration, loss_query, loss_support, KeypointOutput, Targets};
use crate::rng::{stream, StreamRng};

pub const FD_STEP: f64 = 1e-6;

/// Normwise relative error `max|a-n| / max(max|a|, max|n|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}

/// Central differences of a scalar function with respect to `inputs[which]`.
pub fn central_difference(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    which: usize,
    step: f64,
) -> Result<Vec<f64>> {
    let base = &inputs[which];
    let mut out = Vec::with_capacity(base.numel());
    let mut args = inputs.to_vec();
    for i in 0..base.numel() {
        let mut plus = base.to_vec();
        plus[i] += step;
        args[which] = Tensor::new(base.shape(), plus)?;
        let fp = f(&args)?;
        let mut minus = base.to_vec();
        minus[i] -= step;
        args[which] = Tensor::new(base.shape(), minus)?;
        let fm = f(&args)?;
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

/// Worst relative error between analytic and central-difference gradients of
/// `f` over all inputs.
pub fn check_function(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor]) -> Result<f64> {
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().into_leaf()).collect();
    let loss = f(&leaves)?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let grads = autodiff::grad(&loss, &refs, BackwardOptions::default())?;
    let value = |args: &[Tensor]| f(args)?.item();
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let numeric = central_difference(&value, inputs, i, FD_STEP)?;
        worst = worst.max(relative_error(g.values(), &numeric));
    }
    Ok(worst)
}

/// Checks the gradient of `<grad f, probe>` against central differences, which
/// exercises the vector-Jacobian products of the backward pass itself.
pub fn check_second_order(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor], seed: u64) -> Result<f64> {
    let mut rng = stream(seed, "gradcheck/probe", &[]);
    let probes: Vec<Tensor> = inputs.iter().map(|t| normal(&mut rng, t.shape(), 1.0)).collect::<Result<_>>()?;
    let directional = |args: &[Tensor], create: bool| -> Result<Tensor> {
        let loss = f(args)?;
        let refs: Vec<&Tensor> = args.iter().collect();
        let opts = if create { BackwardOptions::HIGHER_ORDER } else { BackwardOptions::default() };
        let grads = autodiff::grad(&loss, &refs, opts)?;
        let mut total = Tensor::scalar(0.0);
        for (g, p) in grads.iter().zip(&probes) {
            total = total.add(&g.mul(p)?.sum()?)?;
        }
        Ok(total)
    };
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().into_leaf()).collect();
    let s = directional(&leaves, true)?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let hvp = autodiff::grad(&s, &refs, BackwardOptions::default())?;
    let value = |args: &[Tensor]| {
        let fresh: Vec<Tensor> = args.iter().map(|t| t.detach().into_leaf()).collect();
        directional(&fresh, false)?.item()
    };
    let mut worst = 0.0f64;
    for (i, h) in hvp.iter().enumerate() {
        let numeric = central_difference(&value, inputs, i, FD_STEP)?;
        worst = worst.max(relative_error(h.values(), &numeric));
    }
    Ok(worst)
}

pub fn normal(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape, v)
}

fn uniform(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub trials: usize,
    pub worst_first_order: f64,
    /// `None` for operations whose second derivative is zero almost everywhere
    /// or that are not checked at second order.
    pub worst_second_order: Option<f64>,
}

type Composite = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Builds a random scalar composition exercising one op kind; the random
/// weights make every output element matter.
fn op_case(name: &str, rng: &mut StreamRng) -> Result<(Composite, Vec<Tensor>, bool)> {
    let w = |rng: &mut StreamRng, shape: &[usize]| normal(rng, shape, 1.0);
    let weigh = |weights: Tensor| move |t: Tensor| -> Result<Tensor> { t.mul(&weights)?.sum() };
    Ok(match name {
        "add" => {
            let wt = weigh(w(rng, &[3, 4])?);
            (
                Box::new(move |a: &[Tensor]| wt(a[0].add(&a[1])?.mul(&a[0])?)),
                vec![w(rng, &[3, 4])?, w(rng, &[3, 4])?],
                true,
            )
        }
        "sub" => {
            let wt = weigh(w(rng, &[5])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].sub(&a[1])?.mul(&a[1])?)), vec![w(rng, &[5])?, w(rng, &[5])?], true)
        }
        "mul" => {
            let wt = weigh(w(rng, &[2, 3])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].mul(&a[1])?)), vec![w(rng, &[2, 3])?, w(rng, &[2, 3])?], true)
        }
        "div" => {
            let wt = weigh(w(rng, &[4])?);
            (
                Box::new(move |a: &[Tensor]| wt(a[0].div(&a[1])?)),
                vec![w(rng, &[4])?, uniform(rng, &[4], 0.5, 2.0)?],
                true,
            )
        }
        "scale" => {
            let s: f64 = rng.random_range(-2.0..2.0);
            let wt = weigh(w(rng, &[6])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].scale(s)?.mul(&a[0])?)), vec![w(rng, &[6])?], true)
        }
        "matmul" => {
            let wt = weigh(w(rng, &[3, 2])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].matmul(&a[1])?)), vec![w(rng, &[3, 4])?, w(rng, &[4, 2])?], true)
        }
        "conv2d" => {
            let stride = rng.random_range(1..=2);
            let spec = autodiff::Conv2dSpec { stride, pad: 1 };
            let out_hw = (5 + 2 - 3) / stride + 1;
            let wt = weigh(w(rng, &[2, 3, out_hw, out_hw])?);
            (
                Box::new(move |a: &[Tensor]| wt(a[0].conv2d(&a[1], spec)?)),
                vec![w(rng, &[2, 2, 5, 5])?, w(rng, &[3, 2, 3, 3])?],
                true,
            )
        }
        "relu" => {
            let wt = weigh(w(rng, &[8])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].relu()?)), vec![w(rng, &[8])?], false)
        }
        "exp" => {
            let wt = weigh(w(rng, &[5])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].exp()?)), vec![w(rng, &[5])?], true)
        }
        "log" => {
            let wt = weigh(w(rng, &[5])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].log()?)), vec![uniform(rng, &[5], 0.3, 3.0)?], true)
        }
        "sum" => (Box::new(|a: &[Tensor]| a[0].mul(&a[0])?.sum()), vec![w(rng, &[3, 3])?], true),
        "mean" => (Box::new(|a: &[Tensor]| a[0].exp()?.mean()), vec![w(rng, &[7])?], true),
        "power" => {
            let p: f64 = rng.random_range(-1.5..2.5);
            let wt = weigh(w(rng, &[5])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].powf(p)?)), vec![uniform(rng, &[5], 0.5, 2.0)?], true)
        }
        "softmax" => {
            let wt = weigh(w(rng, &[2, 3, 4])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].softmax_trailing(2)?)), vec![w(rng, &[2, 3, 4])?], true)
        }
        "l2_norm" => {
            let wt = weigh(w(rng, &[3])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].l2_norm()?)), vec![w(rng, &[3, 2])?], true)
        }
        "sum_trailing" => {
            let wt = weigh(w(rng, &[2])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].mul(&a[0])?.sum_trailing(2)?)), vec![w(rng, &[2, 3, 2])?], true)
        }
        "expand_trailing" => {
            let wt = weigh(w(rng, &[3, 2, 2])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].expand_trailing(&[2, 2])?.exp()?)), vec![w(rng, &[3])?], true)
        }
        "tile_leading" => {
            let wt = weigh(w(rng, &[3, 4])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].tile_leading(3)?.exp()?)), vec![w(rng, &[4])?], true)
        }
        "sum_leading" => {
            let wt = weigh(w(rng, &[4])?);
            (Box::new(move |a: &[Tensor]| wt(a[0].exp()?.sum_leading()?)), vec![w(rng, &[3, 4])?], true)
        }
        "concat_slice" => {
            let wt = weigh(w(rng, &[2, 2, 3])?);
            (
                Box::new(move |a: &[Tensor]| {
                    let c = Tensor::concat(&[a[0].clone(), a[1].exp()?], 1)?;
                    wt(c.slice_axis(1, 1, 2)?.mul(&c.slice_axis(1, 0, 2)?)?)
                }),
                vec![w(rng, &[2, 1, 3])?, w(rng, &[2, 2, 3])?],
                true,
            )
        }
        other => return Err(autodiff::AutodiffError::Invalid(format!("unknown op case `{other}`"))),
    })
}

pub const OP_CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "conv2d",
    "relu",
    "exp",
    "log",
    "sum",
    "mean",
    "power",
    "softmax",
    "l2_norm",
    "sum_trailing",
    "expand_trailing",
    "tile_leading",
    "sum_leading",
    "concat_slice",
];

/// Finite-difference check of every op kind over `trials` random instances.
pub fn check_ops(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for (k, &name) in OP_CASES.iter().enumerate() {
        let mut rng = stream(seed, "gradcheck/op", &[k as u64]);
        let mut worst1 = 0.0f64;
        let mut worst2: Option<f64> = None;
        for t in 0..trials {
            let (f, inputs, second) = op_case(name, &mut rng)?;
            worst1 = worst1.max(check_function(&*f, &inputs)?);
            if second {
                let e = check_second_order(&*f, &inputs, seed ^ (t as u64) << 8 ^ k as u64)?;
                worst2 = Some(worst2.unwrap_or(0.0).max(e));
            }
        }
        reports.push(OpReport { name: name.to_owned(), trials, worst_first_order: worst1, worst_second_order: worst2 });
    }
    Ok(reports)
}

type LossCase = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

fn random_targets(rng: &mut StreamRng, n: usize, k: usize, hw: [usize; 2]) -> Result<Targets> {
    let hi = (hw[0].min(hw[1]) - 1) as f64;
    Ok(Targets {
        u: uniform(rng, &[n, k], 0.0, hi)?,
        v: uniform(rng, &[n, k], 0.0, hi)?,
        x: normal(rng, &[n, k], 0.5)?,
        y: normal(rng, &[n, k], 0.5)?,
        z: normal(rng, &[n, k], 0.5)?,
        d: normal(rng, &[n, k], 0.5)?,
    })
}

/// Readouts from five raw maps `[logits, c, m^x, m^y, m^z]`.
fn maps_readout(a: &[Tensor], mode: DepthReadout) -> Result<KeypointOutput> {
    model::readout(&a[0], &a[1], [&a[2], &a[3], &a[4]], mode)
}

/// Builds a random instance of one readout or loss; inputs are raw detector
/// maps, or for `network` the category and detector parameters.
fn loss_case(name: &str, rng: &mut StreamRng) -> Result<(LossCase, Vec<Tensor>)> {
    let (n, k, hw) = (2, 3, [3, 4]);
    let shape = [n, k, hw[0], hw[1]];
    let maps = |rng: &mut StreamRng| -> Result<Vec<Tensor>> { (0..5).map(|_| normal(rng, &shape, 1.0)).collect() };
    let t = random_targets(rng, n, k, hw)?;
    let w = LossWeights {
        l2d: rng.random_range(0.5..2.0),
        l3d: rng.random_range(0.5..2.0),
        ld: rng.random_range(0.5..2.0),
        lcon: rng.random_range(0.5..2.0),
    };
    let wts: Vec<Tensor> = (0..6).map(|_| normal(rng, &[n, k], 1.0)).collect::<Result<_>>()?;
    Ok(match name {
        "readout_2d" => (
            Box::new(move |a: &[Tensor]| {
                let o = maps_readout(a, DepthReadout::Weighted)?;
                o.u.mul(&wts[0])?.add(&o.v.mul(&wts[1])?)?.sum()
            }),
            maps(rng)?,
        ),
        "readout_3d" => (
            Box::new(move |a: &[Tensor]| {
                let o = maps_readout(a, DepthReadout::Weighted)?;
                let parts = [&o.x, &o.y, &o.z, &o.d];
                let mut acc = Tensor::scalar(0.0);
                for (p, wt) in parts.iter().zip(&wts) {
                    acc = acc.add(&p.mul(wt)?.sum()?)?;
                }
                Ok(acc)
            }),
            maps(rng)?,
        ),
        "readout_depth_literal" => {
            (Box::new(move |a: &[Tensor]| maps_readout(a, DepthReadout::Literal)?.d.mul(&wts[0])?.sum()), maps(rng)?)
        }
        "loss_support" => (
            Box::new(move |a: &[Tensor]| loss_support(&maps_readout(a, DepthReadout::Weighted)?, &t, &w, false)),
            maps(rng)?,
        ),
        "loss_support_unsquared" => (
            Box::new(move |a: &[Tensor]| loss_support(&maps_readout(a, DepthReadout::Weighted)?, &t, &w, true)),
            maps(rng)?,
        ),
        "loss_concentration" => {
            (Box::new(move |a: &[Tensor]| loss_concentration(&maps_readout(a, DepthReadout::Weighted)?)), maps(rng)?)
        }
        "loss_query" => (
            Box::new(move |a: &[Tensor]| loss_query(&maps_readout(a, DepthReadout::Weighted)?, &t, &w, false)),
            maps(rng)?,
        ),
        "network" => {
            let (f, c) = (3, 2);
            let feats = uniform(rng, &[n, f, hw[0], hw[1]], 0.0, 1.0)?;
            let names = model::detector_names("key", k);
            let inputs = vec![normal(rng, &[c, f, 3, 3], 0.5)?, normal(rng, &[c], 0.5)?]
                .into_iter()
                .chain(
                    (0..k)
                        .flat_map(|_| [normal(rng, &[5, c, 3, 3], 0.5), normal(rng, &[5], 0.5)])
                        .collect::<Result<Vec<_>>>()?,
                )
                .collect();
            (
                Box::new(move |a: &[Tensor]| {
                    let mut p = ParamSet::new();
                    p.insert(model::CAT_W, a[0].clone())?;
                    p.insert(model::CAT_B, a[1].clone())?;
                    for (j, name) in names.iter().enumerate() {
                        p.insert(format!("{name}.w"), a[2 + 2 * j].clone())?;
                        p.insert(format!("{name}.b"), a[3 + 2 * j].clone())?;
                    }
                    let o = model::head_forward(&feats, &p, &names, DepthReadout::Weighted)?;
                    loss_query(&o, &t, &w, false)
                }),
                inputs,
            )
        }
        other => return Err(autodiff::AutodiffError::Invalid(format!("unknown loss case `{other}`"))),
    })
}

pub const LOSS_CASES: &[&str] = &[
    "readout_2d",
    "readout_3d",
    "readout_depth_literal",
    "loss_support",
    "loss_support_unsquared",
    "loss_concentration",
    "loss_query",
    "network",
];

/// Finite-difference check of every readout and loss, first and second order.
pub fn check_losses(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for (k, &name) in LOSS_CASES.iter().enumerate() {
        let mut rng = stream(seed, "gradcheck/loss", &[k as u64]);
        let (mut worst1, mut worst2) = (0.0f64, 0.0f64);
        for t in 0..trials {
            let (f, inputs) = loss_case(name, &mut rng)?;
            worst1 = worst1.max(check_function(&*f, &inputs)?);
            worst2 = worst2.max(check_second_order(&*f, &inputs, seed ^ (t as u64) << 8 ^ (k as u64 + 100))?);
        }
        reports.push(OpReport {
            name: name.to_owned(),
            trials,
            worst_first_order: worst1,
            worst_second_order: Some(worst2),
        });
    }
    Ok(reports)
}

/// Meta-gradient on the bilevel quadratic: support loss `a/2 θ²`, one SGD step
/// at rate `alpha`, query loss `b/2 θ'²`.
pub fn bilevel_quadratic(a: f64, b: f64, alpha: f64, theta: f64, order: UpdateOrder) -> Result<f64> {
    let mut params = ParamSet::new();
    params.insert("theta", Tensor::param(&[], vec![theta])?)?;
    let th = params.get("theta")?.clone();
    let support = th.mul(&th)?.scale(0.5 * a)?;
    let opts = match order {
        UpdateOrder::SecondOrder => BackwardOptions::HIGHER_ORDER,
        UpdateOrder::FirstOrder => BackwardOptions::default(),
    };
    let grads = autodiff::backward_with(&support, &params, opts)?;
    let adapted = params.sgd_step(&grads, alpha)?;
    let tp = adapted.get("theta")?;
    let query = tp.mul(tp)?.scale(0.5 * b)?;
    let meta = autodiff::backward_through_update(&query, &params, order)?;
    meta.get("theta")?.item()
}

/// Closed form of [`bilevel_quadratic`].
pub fn bilevel_closed_form(a: f64, b: f64, alpha: f64, theta: f64, order: UpdateOrder) -> f64 {
    let shrink = 1.0 - alpha * a;
    match order {
        UpdateOrder::SecondOrder => b * shrink * shrink * theta,
        UpdateOrder::FirstOrder => b * shrink * theta,
    }
}

/// Worst absolute deviation from the closed form over random quadratics.
pub fn check_bilevel(trials: usize, seed: u64, order: UpdateOrder) -> Result<f64> {
    let mut rng = stream(seed, "gradcheck/bilevel", &[order as u64]);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = rng.random_range(0.1..5.0);
        let b = rng.random_range(0.1..5.0);
        let alpha = rng.random_range(0.0..0.3);
        let theta = rng.random_range(-3.0..3.0);
        let got = bilevel_quadratic(a, b, alpha, theta, order)?;
        worst = worst.max((got - bilevel_closed_form(a, b, alpha, theta, order)).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_a_cubic() {
        let f = |a: &[Tensor]| Ok(a[0].values().iter().map(|v| v * v * v).sum());
        let x = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let g = central_difference(&f, &[x], 0, FD_STEP).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 12.0).abs() < 1e-8);
    }

    #[test]
    fn losses_pass_fd() {
        let t = std::time::Instant::now();
        for r in check_losses(3, 11).unwrap() {
            eprintln!("{} {:.2e} {:.2e}", r.name, r.worst_first_order, r.worst_second_order.unwrap());
            assert!(r.worst_first_order < 1e-5, "{}: {}", r.name, r.worst_first_order);
            assert!(r.worst_second_order.unwrap() < 1e-4, "{}", r.name);
        }
        eprintln!("{:?}", t.elapsed());
    }

    #[test]
    fn bilevel_examples() {
        let so = bilevel_quadratic(2.0, 3.0, 0.1, 1.5, UpdateOrder::SecondOrder).unwrap();
        assert!((so - 3.0 * 0.8 * 0.8 * 1.5).abs() < 1e-12);
        let fo = bilevel_quadratic(2.0, 3.0, 0.1, 1.5, UpdateOrder::FirstOrder).unwrap();
        assert!((fo - 3.0 * 0.8 * 1.5).abs() < 1e-12);
        // no inner step: plain query gradient b*theta
        let zero = bilevel_quadratic(2.0, 3.0, 0.0, 1.5, UpdateOrder::SecondOrder).unwrap();
        assert!((zero - 4.5).abs() < 1e-12);
    }

    #[test]
    fn second_order_assertion_on_first_order_step_fails() {
        let mut params = ParamSet::new();
        params.insert("t", Tensor::param(&[], vec![1.0]).unwrap()).unwrap();
        let t = params.get("t").unwrap().clone();
        let grads = autodiff::backward(&t.mul(&t).unwrap(), &params).unwrap();
        let adapted = params.sgd_step(&grads, 0.1).unwrap();
        let q = adapted.get("t").unwrap().mul(adapted.get("t").unwrap()).unwrap();
        let err = autodiff::backward_through_update(&q, &params, UpdateOrder::SecondOrder).unwrap_err();
        assert!(matches!(err, autodiff::AutodiffError::Invalid(_)));
    }

    #[test]
    fn missing_inner_step_is_reported() {
        let mut params = ParamSet::new();
        params.insert("t", Tensor::param(&[], vec![1.0]).unwrap()).unwrap();
        let t = params.get("t").unwrap();
        let q = t.mul(t).unwrap();
        let err = autodiff::backward_through_update(&q, &params, UpdateOrder::FirstOrder).unwrap_err();
        assert_eq!(err, autodiff::AutodiffError::InnerStepNotRecorded);
    }
}
