//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor: gradients with norm below this are compared absolutely,
/// since central differences carry ~1e-10 of rounding noise.
const NORM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub numel: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-3)`.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::InvalidValue {
            op: "grad_check",
            detail: format!("loss evaluated to {v}"),
        });
    }
    Ok(v)
}

/// Compares autodiff gradients of the scalar `f` against central differences
/// with step `eps`, one parameter tensor at a time.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::config(format!("finite-difference step {eps} outside [1e-7, 1e-4]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::InvalidValue {
            op: "grad_check",
            detail: "non-finite loss".into(),
        });
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (index, var) in vars.iter().enumerate() {
        let numel = params[index].numel();
        let analytic = grads
            .get_slice(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut numeric = vec![0.0; numel];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[index].data()[j];
            work[index].data_mut()[j] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[index].data_mut()[j] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[index].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let (na, nn, nd) = (norm(&analytic), norm(&numeric), norm(&diff));
        let denom = na.max(nn);
        let rel_error = nd / denom.max(NORM_FLOOR);
        checks.push(ParamCheck {
            index,
            numel,
            rel_error,
            analytic_norm: na,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let report = grad_check(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn layer_norm_gelu_composite_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let gamma = Tensor::randn(&[6], 1.0, &mut rng);
        let beta = Tensor::randn(&[6], 0.5, &mut rng);
        let w = Tensor::randn(&[6, 4], 0.5, &mut rng);
        let report = grad_check(
            |t, p| {
                let h = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
                let a = t.gelu(h);
                let y = t.matmul(a, p[3])?;
                let l = t.log_softmax_rows(y)?;
                Ok(t.mean(l))
            },
            &[x, gamma, beta, w],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn every_op_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let a = Tensor::randn(&[2, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let bias = Tensor::randn(&[4], 1.0, &mut rng);
        let table = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let report = grad_check(
            |t, p| {
                let y = t.kron_matmul(p[0], p[1], p[2])?; // 4x4
                let k = t.kron(p[1], p[2])?; // 6x4
                let z = t.matmul(p[0], k)?; // 4x4
                let y = t.add(y, z)?;
                let y = t.add_bias(y, p[3])?;
                let y = t.activation(y, crate::tensor::Activation::Relu);
                let e = t.gather_rows(p[4], &[0, 3, 3, 1])?;
                let y = t.mul(y, e)?;
                let s = t.softmax_rows(y)?;
                let left = t.slice_cols(s, 0, 2)?;
                let right = t.slice_cols(s, 2, 4)?;
                let cat = t.concat_cols(&[right, left])?;
                let tr = t.transpose(cat)?;
                let n = t.row_normalize(tr)?;
                let sq = t.matmul(n, cat)?;
                let d = t.diag(sq)?;
                let r0 = t.select_row(e, 1)?;
                let mr = t.mean_rows(e)?;
                let c = t.cosine_sim(r0, mr)?;
                let both = t.concat_rows(&[r0, mr])?;
                let flat = t.reshape(both, &[8])?;
                let f = t.sum(flat);
                let scaled = t.scale(c, 3.0);
                let s1 = t.sum(d);
                let acc = t.add(s1, scaled)?;
                let acc = t.sub(acc, f)?;
                Ok(acc)
            },
            &[x, a, b, bias, table],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let err = grad_check(|t, p| Ok(t.sum(p[0])), &[Tensor::ones(&[2])], 1e-2, 1e-4);
        assert!(err.is_err());
    }
}
