//! Fast invariant suite: finite-difference gradient checks and the property
//! groups behind the `selftest` CLI command. The checks here are shared by
//! the unit/acceptance tests so there is exactly one oracle implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::{Real, GRAD_CHECK_RTOL};

/// Central finite-difference gradient of `f` at `x`, one coordinate at a time.
/// `f` must rebuild its graph from scratch on every call.
pub fn finite_difference_grad<F>(f: &F, x: &Tensor, h: Real) -> Vec<Real>
where
    F: Fn(&Tensor) -> Result<Real>,
{
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = f(&plus).expect("finite-difference forward failed");
        let fm = f(&minus).expect("finite-difference forward failed");
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Step size for central differences under the current build width.
#[cfg(not(feature = "f64"))]
pub const FD_STEP: Real = 1e-3;
#[cfg(feature = "f64")]
pub const FD_STEP: Real = 1e-6;

/// Maximum relative error between analytic and numeric gradients.
/// Relative error uses `|a-n| / max(|a|, |n|, 1)` so near-zero entries are
/// compared absolutely.
pub fn max_relative_error(analytic: &[Real], numeric: &[Real]) -> Real {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, Real::max)
}

/// Check the analytic gradient of a scalar-valued graph function against
/// central finite differences at `points` random inputs of the given shape.
///
/// `build` receives a graph plus the input variable and returns the scalar
/// loss variable. Returns the worst relative error seen.
pub fn grad_check<F>(shape: &[usize], points: usize, seed: u64, build: F) -> Result<Real>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Real = 0.0;
    for _ in 0..points {
        let n: usize = shape.iter().product();
        let data: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0) as Real).collect();
        let x = Tensor::new(shape.to_vec(), data)?;

        let mut g = Graph::new();
        let xv = g.input_grad(x.clone());
        let loss = build(&mut g, xv)?;
        g.backward(loss)?;
        let analytic = g.grad(xv).expect("input unreachable from loss").to_vec();

        let eval = |t: &Tensor| -> Result<Real> {
            let mut g = Graph::new();
            let xv = g.input(t.clone());
            let loss = build(&mut g, xv)?;
            Ok(g.value(loss).item())
        };
        let numeric = finite_difference_grad(&eval, &x, FD_STEP);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// One named group of the invariant suite.
pub struct GroupResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Run every fast invariant group. `inject_fault` flips the softmax group's
/// expectation, exercising the failure path (hidden test hook).
pub fn run_all(inject_fault: bool) -> Vec<GroupResult> {
    let mut out = Vec::new();

    out.push(group_gradient_checks());
    out.push(group_softmax_properties(inject_fault));
    out.push(group_duration_properties());
    out.push(group_alignment_loss_properties());
    out.push(group_no_nan_properties());
    out
}

fn group_gradient_checks() -> GroupResult {
    let tol = GRAD_CHECK_RTOL;
    let mut worst: Real = 0.0;
    let mut run = |name: &str, r: Result<Real>| match r {
        Ok(e) => worst = worst.max(e),
        Err(err) => panic!("gradient check {name} failed to run: {err}"),
    };

    run(
        "matmul",
        grad_check(&[3, 4], 5, 11, |g, x| {
            let w = g.input(Tensor::new(vec![4, 2], (0..8).map(|i| (i as Real * 0.31).sin()).collect()).unwrap());
            let y = g.matmul(x, w)?;
            g.sum_all(y)
        }),
    );
    run(
        "softmax",
        grad_check(&[2, 5], 5, 12, |g, x| {
            let s = g.softmax_rows(x)?;
            let sq = g.mul(s, s)?;
            g.sum_all(sq)
        }),
    );
    run(
        "layer_norm",
        grad_check(&[2, 6], 5, 13, |g, x| {
            let n = g.layer_norm_rows(x)?;
            let t = g.tanh(n)?;
            g.sum_all(t)
        }),
    );
    run(
        "conv1d",
        grad_check(&[5, 3], 5, 14, |g, x| {
            let w = g.input(Tensor::new(vec![2, 3, 3], (0..18).map(|i| (i as Real * 0.17).cos()).collect()).unwrap());
            let y = g.conv1d_same(x, w, None, 3)?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
    );
    run(
        "softplus",
        grad_check(&[7], 5, 15, |g, x| {
            let y = g.softplus(x)?;
            g.sum_all(y)
        }),
    );
    run(
        "avg_pool",
        grad_check(&[5, 2], 5, 16, |g, x| {
            let y = g.avg_pool1d_ceil(x, 2)?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
    );
    run(
        "attention_composite",
        grad_check(&[4, 8], 5, 17, |g, x| {
            let k = g.input(Tensor::new(vec![3, 8], (0..24).map(|i| (i as Real * 0.29).sin()).collect()).unwrap());
            let scores = g.matmul_trans_b(x, k)?;
            let scores = g.scale(scores, 1.0 / (8.0 as Real).sqrt())?;
            let attn = g.softmax_rows(scores)?;
            let ctx = g.matmul(attn, k)?;
            let sq = g.mul(ctx, ctx)?;
            g.sum_all(sq)
        }),
    );

    GroupResult {
        name: "gradient_checks",
        passed: worst < tol,
        detail: format!("worst relative error {worst:.2e} (tolerance {tol:.0e})"),
    }
}

fn group_softmax_properties(inject_fault: bool) -> GroupResult {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut ok = true;
    for _ in 0..50 {
        let cols = rng.gen_range(1..12);
        let rows = rng.gen_range(1..6);
        let data: Vec<Real> = (0..rows * cols)
            .map(|_| rng.gen_range(-50.0..50.0) as Real)
            .collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            let s: Real = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                ok = false;
            }
        }
    }
    if inject_fault {
        ok = false;
    }
    GroupResult {
        name: "softmax_properties",
        passed: ok,
        detail: "rows sum to 1 +- 1e-5, entries in [0,1]".into(),
    }
}

fn group_duration_properties() -> GroupResult {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut ok = true;
    let mut detail = String::from("floor + largest remainder, min 1, exact totals");
    for _ in 0..200 {
        let n = rng.gen_range(1..20);
        let total = rng.gen_range(n..n * 20);
        let raw: Vec<Real> = (0..n).map(|_| rng.gen_range(0.01..10.0) as Real).collect();
        let sum: Real = raw.iter().sum();
        let scaled: Vec<Real> = raw.iter().map(|v| v * total as Real / sum).collect();
        match crate::pla::integerize_durations(&scaled, total) {
            Ok(ints) => {
                if ints.iter().sum::<usize>() != total || ints.iter().any(|&d| d == 0) {
                    ok = false;
                    detail = format!("bad allocation for total {total}: {ints:?}");
                }
            }
            Err(e) => {
                ok = false;
                detail = format!("unexpected error: {e}");
            }
        }
    }
    GroupResult {
        name: "duration_properties",
        passed: ok,
        detail,
    }
}

fn group_alignment_loss_properties() -> GroupResult {
    use crate::pla::{band_mask, mal_from_weights, MalConfig};
    let cfg = MalConfig::default();
    let mut ok = true;
    let mut detail = String::from("0 in-band, ln 2 at half mass, monotone");

    // all mass inside the band -> loss 0
    let p = 4;
    let l = 12;
    let mask = band_mask(p, l, cfg.band_half_width);
    let mut m = vec![0.0 as Real; p * l];
    for (i, v) in m.iter_mut().enumerate() {
        if mask.data()[i] > 0.5 {
            *v = 1.0;
        }
    }
    let loss = mal_from_weights(&m, p, l, &cfg).unwrap();
    if loss.abs() > 1e-6 {
        ok = false;
        detail = format!("in-band loss {loss}");
    }

    // half mass -> ln 2
    let inside = mask.data().iter().filter(|&&v| v > 0.5).count();
    let outside = p * l - inside;
    let mut m = vec![0.0 as Real; p * l];
    for (i, v) in m.iter_mut().enumerate() {
        *v = if mask.data()[i] > 0.5 {
            0.5 / inside as Real
        } else {
            0.5 / outside as Real
        };
    }
    let loss = mal_from_weights(&m, p, l, &cfg).unwrap();
    if (loss - (2.0 as Real).ln()).abs() > 1e-5 {
        ok = false;
        detail = format!("half-mass loss {loss}");
    }

    // strictly increasing as band mass decreases
    let mut last = -1.0;
    for step in 0..20 {
        let band_fraction = 1.0 - step as Real / 20.0 * 0.9;
        let mut m = vec![0.0 as Real; p * l];
        for (i, v) in m.iter_mut().enumerate() {
            *v = if mask.data()[i] > 0.5 {
                band_fraction / inside as Real
            } else {
                (1.0 - band_fraction) / outside as Real
            };
        }
        let loss = mal_from_weights(&m, p, l, &cfg).unwrap();
        if loss <= last {
            ok = false;
            detail = format!("not monotone at sweep step {step}");
        }
        last = loss;
    }

    GroupResult {
        name: "alignment_loss_properties",
        passed: ok,
        detail,
    }
}

fn group_no_nan_properties() -> GroupResult {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut ok = true;
    for _ in 0..30 {
        let rows = rng.gen_range(1..6);
        let cols = rng.gen_range(1..10);
        let data: Vec<Real> = (0..rows * cols)
            .map(|_| rng.gen_range(-100.0..100.0) as Real)
            .collect();
        let mut g = Graph::new();
        let x = g.input_grad(Tensor::new(vec![rows, cols], data).unwrap());
        let a = g.softmax_rows(x).unwrap();
        let b = g.layer_norm_rows(x).unwrap();
        let c = g.softplus(x).unwrap();
        let d = g.tanh(b).unwrap();
        let e = g.sigmoid(x).unwrap();
        let cat = g.concat_cols(&[a, c, d, e]).unwrap();
        let pooled = g.avg_pool1d_ceil(cat, 2).unwrap();
        let loss = g.mean_all(pooled).unwrap();
        g.backward(loss).unwrap();
        if g.find_non_finite().is_some() {
            ok = false;
        }
    }
    GroupResult {
        name: "no_nan_properties",
        passed: ok,
        detail: "finite forward and backward on random finite inputs".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_checks_pass() {
        let r = group_gradient_checks();
        assert!(r.passed, "{}", r.detail);
    }

    #[test]
    fn fault_injection_fails_softmax_group() {
        assert!(!group_softmax_properties(true).passed);
        assert!(group_softmax_properties(false).passed);
    }
}
