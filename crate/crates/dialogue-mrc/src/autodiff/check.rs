//! Finite-difference gradient verification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{precision, set_precision, Precision, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over every sampled coordinate.
    pub max_rel_err: f64,
    /// Worst relative error per parameter, in input order.
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

/// Compare analytic gradients of `f` (a deterministic, re-runnable closure
/// producing a scalar loss from the current parameter values) against central
/// finite differences on up to `samples_per_param` coordinates of each listed
/// parameter. Relative error is |a - n| / max(1e-8, |a| + |n|), except that
/// absolute differences under 1e-8 count as zero: coordinates whose true
/// gradient vanishes (a logit shift that cancels inside softmax, say)
/// otherwise measure nothing but round-off divided by 2*eps. Forces 64-bit
/// precision for the duration of the check.
pub fn grad_check(
    params: &[(String, Tensor)],
    eps: f64,
    samples_per_param: usize,
    seed: u64,
    mut f: impl FnMut() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let saved = precision();
    set_precision(Precision::F64);
    let result = run(params, eps, samples_per_param, seed, &mut f);
    set_precision(saved);
    result
}

fn run(
    params: &[(String, Tensor)],
    eps: f64,
    samples_per_param: usize,
    seed: u64,
    f: &mut impl FnMut() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for (_, p) in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad()).collect();

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    let mut coords_checked = 0;

    for (pi, (name, p)) in params.iter().enumerate() {
        let (_, cols) = p.shape();
        let numel = p.numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        if numel > samples_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(samples_per_param);
        }
        let mut worst = 0.0f64;
        for &idx in &coords {
            let (r, c) = (idx / cols, idx % cols);
            let orig = p.get(r, c);
            p.set(r, c, orig + eps);
            let up = f()?.item();
            p.set(r, c, orig - eps);
            let down = f()?.item();
            p.set(r, c, orig);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][idx];
            let diff = (a - numeric).abs();
            let rel = if diff < 1e-8 {
                0.0
            } else {
                diff / (a.abs() + numeric.abs()).max(1e-8)
            };
            worst = worst.max(rel);
            coords_checked += 1;
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.push((name.clone(), worst));
    }

    Ok(GradCheckReport {
        max_rel_err,
        per_param,
        coords_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_correct_gradients() {
        let w = Tensor::from_vec(2, 2, vec![0.5, -0.3, 0.2, 0.7]);
        let x = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let params = vec![("w".to_string(), w.clone())];
        let report = grad_check(&params, 1e-5, 8, 0, || {
            Ok(w.matmul(&x)?.relu().sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 4);
    }

    // An op whose forward computes 2x but whose backward claims the factor
    // is 3. The checker must flag it: |3 - 2| / (3 + 2) = 0.2.
    fn broken_double(x: &Tensor) -> Tensor {
        let (m, n) = x.shape();
        let out = x.value().iter().map(|&v| 2.0 * v).collect();
        let pa = x.clone();
        Tensor::new_node(
            m,
            n,
            out,
            vec![x.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = g.iter().map(|&v| 3.0 * v).collect();
                pa.accumulate_grad(&da);
            }),
        )
    }

    #[test]
    fn flags_wrong_backward() {
        let x = Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let params = vec![("x".to_string(), x.clone())];
        let report =
            grad_check(&params, 1e-5, 8, 0, || Ok(broken_double(&x).sum())).unwrap();
        assert!((report.max_rel_err - 0.2).abs() < 1e-3);
    }

    #[test]
    fn unused_parameter_reports_zero_error() {
        let w = Tensor::from_vec(1, 2, vec![0.4, -0.6]);
        let unused = Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let params = vec![
            ("w".to_string(), w.clone()),
            ("unused".to_string(), unused.clone()),
        ];
        let report = grad_check(&params, 1e-5, 2, 0, || Ok(w.sum())).unwrap();
        assert_eq!(report.per_param[1], ("unused".to_string(), 0.0));
        assert_eq!(report.coords_checked, 4);
    }
}
