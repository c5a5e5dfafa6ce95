//! Central finite-difference verification of every differentiable operator at `f64`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BackwardFn, Tape, Var};
use crate::error::TensorError;
use crate::loss::{self, LossConfig};
use crate::tensor::{Binary, Reduce, Tensor};

type TResult<T> = Result<T, TensorError>;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Maximum accepted relative error between reverse-mode and finite-difference gradients.
pub const TOLERANCE: f64 = 1e-4;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Reduces a non-scalar output to a scalar with a fixed pseudo-random projection, so every
/// output element contributes a distinct weight.
fn scalarize<'t>(out: Var<'t, f64>) -> TResult<Var<'t, f64>> {
    let shape = out.shape();
    if shape.iter().product::<usize>() == 1 {
        return out.reshape(&[]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ shape.iter().product::<usize>() as u64);
    let proj = Tensor::new(
        shape.clone(),
        (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(0.5..1.5))
            .collect(),
    )?;
    out.mul(out.tape().constant(proj))?.sum()
}

/// Worst relative error over all inputs between reverse-mode gradients of `f` and central
/// finite differences with step [`STEP`].
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> TResult<f64>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> TResult<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let root = scalarize(f(&vars)?)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> TResult<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(scalarize(f(&vars)?)?.value().item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.numel()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *n = (plus - minus) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic[i].data(), &numeric));
    }
    Ok(worst)
}

/// Outcome of one operator's checks.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub error: Option<String>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst_rel_err <= TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[lo, hi]` and random sign, keeping clear of kinks at zero.
fn signed_away(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Pairwise-distinct values (gaps ≥ 0.05) in random order, so maxima are unique.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    let jitter: Vec<f64> = (0..n).map(|_| rng.random_range(-0.02..0.02)).collect();
    Tensor::new(shape.to_vec(), vals.iter().zip(jitter).map(|(v, j)| v + j).collect()).unwrap()
}

type CaseFn = Box<dyn Fn(&mut ChaCha8Rng) -> TResult<f64>>;

fn unary_case(name: &'static str, f: fn(Var<'_, f64>) -> TResult<Var<'_, f64>>, gen: fn(&mut ChaCha8Rng) -> Tensor<f64>) -> (&'static str, CaseFn) {
    (name, Box::new(move |rng| check_gradients(&[gen(rng)], |v| f(v[0]))))
}

fn binary_case(
    name: &'static str,
    kind: Binary,
    gen_b: fn(&mut ChaCha8Rng) -> Tensor<f64>,
) -> (&'static str, CaseFn) {
    (
        name,
        Box::new(move |rng| {
            let a = uniform(rng, &[3, 4], -1.0, 1.0);
            check_gradients(&[a, gen_b(rng)], |v| v[0].binary(kind, v[1]))
        }),
    )
}

fn cases() -> Vec<(&'static str, CaseFn)> {
    let mut list: Vec<(&'static str, CaseFn)> = vec![
        binary_case("add", Binary::Add, |r| uniform(r, &[3, 4], -1.0, 1.0)),
        binary_case("sub", Binary::Sub, |r| uniform(r, &[3, 4], -1.0, 1.0)),
        binary_case("mul", Binary::Mul, |r| uniform(r, &[3, 4], -1.0, 1.0)),
        binary_case("div", Binary::Div, |r| signed_away(r, &[3, 4], 0.5, 2.0)),
        (
            "scalar_broadcast",
            Box::new(|rng| {
                let (s1, s2, s3) = (rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..2.0));
                check_gradients(&[uniform(rng, &[5], -1.0, 1.0)], move |v| {
                    v[0].add_scalar(s1)?.mul_scalar(s2)?.binary_scalar(Binary::Div, s3)
                })
            }),
        ),
        unary_case("neg", |x| x.neg(), |r| uniform(r, &[6], -1.0, 1.0)),
        unary_case("relu", |x| x.relu(), |r| signed_away(r, &[8], 0.05, 1.0)),
        unary_case("abs", |x| x.abs(), |r| signed_away(r, &[8], 0.05, 1.0)),
        unary_case("exp", |x| x.exp(), |r| uniform(r, &[6], -2.0, 2.0)),
        unary_case("log", |x| x.log(), |r| uniform(r, &[6], 0.5, 2.0)),
        unary_case("tanh", |x| x.tanh(), |r| uniform(r, &[6], -2.0, 2.0)),
        unary_case("cos", |x| x.cos(), |r| uniform(r, &[6], -3.0, 3.0)),
        unary_case("acos", |x| x.acos(), |r| uniform(r, &[6], -0.9, 0.9)),
        unary_case("sqrt", |x| x.sqrt(), |r| uniform(r, &[6], 0.5, 2.0)),
        unary_case(
            "clamp",
            |x| x.clamp(-0.5, 0.5),
            |r| uniform(r, &[8], -1.0, 1.0).map(|v| if (v.abs() - 0.5).abs() < 0.02 { v * 0.8 } else { v }),
        ),
        unary_case("sum", |x| x.reduce(Reduce::Sum, None), |r| uniform(r, &[2, 3, 4], -1.0, 1.0)),
        unary_case("sum_axes", |x| x.reduce(Reduce::Sum, Some(&[1])), |r| uniform(r, &[2, 3, 4], -1.0, 1.0)),
        unary_case("mean", |x| x.reduce(Reduce::Mean, None), |r| uniform(r, &[2, 3, 4], -1.0, 1.0)),
        unary_case("mean_axes", |x| x.reduce(Reduce::Mean, Some(&[0, 2])), |r| uniform(r, &[2, 3, 4], -1.0, 1.0)),
        unary_case("max", |x| x.reduce(Reduce::Max, None), |r| distinct(r, &[3, 4])),
        unary_case("max_axes", |x| x.reduce(Reduce::Max, Some(&[1])), |r| distinct(r, &[2, 3, 4])),
        unary_case("reshape", |x| x.reshape(&[4, 3])?.tanh(), |r| uniform(r, &[3, 4], -1.0, 1.0)),
        unary_case("transpose", |x| x.transpose()?.tanh(), |r| uniform(r, &[3, 4], -1.0, 1.0)),
        (
            "matmul",
            Box::new(|rng| {
                let a = uniform(rng, &[3, 4], -1.0, 1.0);
                let b = uniform(rng, &[4, 5], -1.0, 1.0);
                check_gradients(&[a, b], |v| v[0].matmul(v[1]))
            }),
        ),
        unary_case("l2_normalize_rows", |x| x.l2_normalize_rows(), |r| signed_away(r, &[3, 5], 0.1, 1.0)),
        (
            "cross_entropy",
            Box::new(|rng| {
                let z = uniform(rng, &[4, 5], -2.0, 2.0);
                let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
                check_gradients(&[z], move |v| v[0].cross_entropy(&labels))
            }),
        ),
        (
            "conv2d",
            Box::new(|rng| {
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=1);
                let x = uniform(rng, &[1, 2, 5, 5], -1.0, 1.0);
                let w = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
                let b = uniform(rng, &[3], -1.0, 1.0);
                check_gradients(&[x, w, b], move |v| v[0].conv2d(v[1], v[2], stride, pad))
            }),
        ),
        (
            "conv_transpose2d",
            Box::new(|rng| {
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=1);
                let x = uniform(rng, &[2, 3, 3, 3], -1.0, 1.0);
                let w = uniform(rng, &[3, 2, 4, 4], -1.0, 1.0);
                let b = uniform(rng, &[2], -1.0, 1.0);
                check_gradients(&[x, w, b], move |v| v[0].conv_transpose2d(v[1], v[2], stride, pad))
            }),
        ),
        unary_case("global_max_pool", |x| x.global_max_pool(), |r| distinct(r, &[2, 3, 3, 3])),
        (
            "chain",
            Box::new(|rng| {
                let a = uniform(rng, &[6], -1.0, 1.0);
                let b = uniform(rng, &[6], -1.0, 1.0);
                check_gradients(&[a, b], |v| v[0].mul(v[1])?.tanh()?.mul(v[0].exp()?))
            }),
        ),
        (
            "arcface_loss",
            Box::new(|rng| {
                let f = uniform(rng, &[4, 6], 0.05, 1.0);
                let w = uniform(rng, &[3, 6], -1.0, 1.0);
                let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
                let cfg = LossConfig::default();
                check_gradients(&[f, w], move |v| loss::arcface_loss(v[0], v[1], &labels, &cfg))
            }),
        ),
        (
            "mse_loss",
            Box::new(|rng| {
                let a = uniform(rng, &[2, 1, 3, 3], -1.0, 1.0);
                let b = uniform(rng, &[2, 1, 3, 3], -1.0, 1.0);
                check_gradients(&[a, b], |v| loss::mse_loss(v[0], v[1]))
            }),
        ),
        (
            "total_loss",
            Box::new(|rng| {
                let lambda = rng.random_range(0.0..2.0);
                let a = uniform(rng, &[4], -1.0, 1.0);
                let b = uniform(rng, &[4], -1.0, 1.0);
                check_gradients(&[a, b], move |v| {
                    loss::total_loss(v[0].square()?.sum()?, v[1].exp()?.mean()?, lambda)
                })
            }),
        ),
    ];
    list.shrink_to_fit();
    list
}

/// ReLU whose backward rule forgets to gate the gradient; used to show that the suite
/// rejects a broken operator.
fn faulty_relu<'t>(x: Var<'t, f64>) -> TResult<Var<'t, f64>> {
    let value = x.value().relu();
    let rule: BackwardFn<f64> = Box::new(|g| Ok(vec![g.clone()]));
    x.tape().custom(&[x], value, rule)
}

/// Runs every operator case on `instances` random inputs. With `inject_fault`, a
/// deliberately broken operator is added and the report must fail.
pub fn run_suite(instances: usize, seed: u64, inject_fault: bool) -> GradcheckReport {
    let start = Instant::now();
    let mut all = cases();
    if inject_fault {
        all.push(unary_case("faulty_relu", faulty_relu, |r| signed_away(r, &[8], 0.05, 1.0)));
    }
    let mut reports = Vec::with_capacity(all.len());
    for (k, (name, case)) in all.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 7919));
        let mut report = CaseReport {
            name,
            instances,
            worst_rel_err: 0.0,
            error: None,
        };
        for _ in 0..instances {
            match case(&mut rng) {
                Ok(err) => report.worst_rel_err = report.worst_rel_err.max(err),
                Err(e) => {
                    report.error = Some(e.to_string());
                    break;
                }
            }
        }
        reports.push(report);
    }
    GradcheckReport {
        cases: reports,
        elapsed: start.elapsed(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_handles_zero_vectors() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn suite_passes_and_fault_is_detected() {
        let ok = run_suite(3, 1, false);
        for c in &ok.cases {
            assert!(c.passed(), "{}: {:?} {}", c.name, c.error, c.worst_rel_err);
        }
        let bad = run_suite(2, 1, true);
        assert!(!bad.passed());
        assert!(!bad.cases.last().unwrap().passed());
    }
}
