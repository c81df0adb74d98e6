//! Central finite-difference gradient checking against the tape.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{rope_table, row_positions};
use crate::tape::{AttnShape, Tape, Var};
use crate::tensor::Tensor;

/// Compare the tape gradient of a scalar function with central differences
/// `(f(x+h·e) − f(x−h·e)) / 2h` on every coordinate of `x`, returning the worst
/// relative error.
///
/// The relative error of coordinate `i` is `|g_i − fd_i| / max(|g_i|, |fd_i|, τ)`
/// where `τ = 1e-6 · max_j |g_j|`, so coordinates whose true gradient is
/// essentially zero are judged against the gradient's overall scale.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Precondition(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let y0 = tape.value(y).data()[0];
    if !y0.is_finite() {
        return Err(Error::NonFinite("objective at base point".into()));
    }
    tape.backward(y)?;
    let analytic = match tape.grad(xv) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(p.clone());
        let out = f(&mut t, v)?;
        let val = t.value(out).data()[0];
        if val.is_finite() {
            Ok(val)
        } else {
            Err(Error::NonFinite("objective at perturbed point".into()))
        }
    };

    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let tau = (1e-6 * scale).max(1e-300);
    let mut worst = 0.0f64;
    let mut p = x.clone();
    for i in 0..x.len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + h;
        let fp = eval(&p)?;
        p.data_mut()[i] = orig - h;
        let fm = eval(&p)?;
        p.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let g = analytic[i];
        let err = (g - fd).abs() / g.abs().max(fd.abs()).max(tau);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Finite-difference step used by [`primitive_suite`].
pub const PRIMITIVE_STEP: f64 = 1e-5;

/// Worst relative gradient error of every tape primitive, one entry per
/// (primitive, differentiated input). Non-scalar outputs are reduced with a
/// fixed random weighting so every output element contributes.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize], std: f64| Tensor::<f64>::randn(shape, std, &mut rng);
    let (m, k, n) = (4, 5, 3);
    let a = randn(&[m, k], 1.0);
    let b = Arc::new(randn(&[k, n], 1.0));
    let same = Arc::new(randn(&[m, k], 1.0));
    let w_mk = Arc::new(randn(&[m, k], 1.0));
    let w_mn = Arc::new(randn(&[m, n], 1.0));
    let gain = randn(&[k], 1.0);
    let table = randn(&[7, k], 1.0);
    let ids = [3usize, 0, 6, 3];

    let shape = AttnShape {
        batch: 2,
        seq: 3,
        heads: 2,
        d_head: 4,
    };
    let (rows, width) = (shape.batch * shape.seq, shape.heads * shape.d_head);
    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| randn(&[rows, width], 1.0)).collect();
    let w_attn = Arc::new(randn(&[rows, width], 1.0));
    let cos_sin = Arc::new(rope_table::<f64>(&row_positions(shape.batch, shape.seq), shape.d_head, 10_000.0));

    let mut causal = Tensor::zeros(&[m, m]);
    for r in 0..m {
        for c in r + 1..m {
            causal.data_mut()[r * m + c] = f64::NEG_INFINITY;
        }
    }
    let w_mm = Arc::new(randn(&[m, m], 1.0));
    let sq = randn(&[m, m], 1.0);
    let logits = randn(&[m, 9], 1.0);
    let targets = [2usize, 8, 0, 5];
    let loss_mask = [true, false, true, true];
    let cols = [4usize, 1, 3];
    let w_cols = Arc::new(randn(&[m, cols.len()], 1.0));
    let narrow = randn(&[m, cols.len()], 1.0);
    let other = Arc::new(randn(&[2, k], 1.0));
    let w_rows = Arc::new(randn(&[6, k], 1.0));

    // Weighted sum of an output against a fixed tensor.
    fn reduce(t: &mut Tape<f64>, y: Var, w: &Arc<Tensor<f64>>) -> Result<Var> {
        let wv = t.constant(Arc::clone(w));
        let p = t.mul(y, wv)?;
        Ok(t.sum(p))
    }

    let h = PRIMITIVE_STEP;
    let mut out = Vec::new();
    out.push((
        "matmul/a",
        grad_check(
            |t, x| {
                let bv = t.constant(Arc::clone(&b));
                let y = t.matmul(x, bv)?;
                reduce(t, y, &w_mn)
            },
            &a,
            h,
        )?,
    ));
    out.push((
        "matmul/b",
        grad_check(
            |t, x| {
                let av = t.constant(Arc::new(a.clone()));
                let y = t.matmul(av, x)?;
                reduce(t, y, &w_mn)
            },
            &b,
            h,
        )?,
    ));
    out.push((
        "add",
        grad_check(
            |t, x| {
                let c = t.constant(Arc::clone(&same));
                let y = t.add(x, c)?;
                reduce(t, y, &w_mk)
            },
            &a,
            h,
        )?,
    ));
    out.push((
        "mul",
        grad_check(
            |t, x| {
                let c = t.constant(Arc::clone(&same));
                let y = t.mul(x, c)?;
                let y = t.mul(y, x)?;
                reduce(t, y, &w_mk)
            },
            &a,
            h,
        )?,
    ));
    out.push((
        "scale",
        grad_check(
            |t, x| {
                let y = t.scale(x, -1.7);
                reduce(t, y, &w_mk)
            },
            &a,
            h,
        )?,
    ));
    out.push((
        "silu",
        grad_check(
            |t, x| {
                let y = t.silu(x);
                reduce(t, y, &w_mk)
            },
            &a,
            h,
        )?,
    ));
    out.push(("sum", grad_check(|t, x| Ok(t.sum(x)), &a, h)?));
    out.push((
        "softmax_rows",
        grad_check(
            |t, x| {
                let y = t.softmax_rows(x, None)?;
                reduce(t, y, &w_mm)
            },
            &sq,
            h,
        )?,
    ));
    out.push((
        "softmax_rows/masked",
        grad_check(
            |t, x| {
                let y = t.softmax_rows(x, Some(&causal))?;
                reduce(t, y, &w_mm)
            },
            &sq,
            h,
        )?,
    ));
    out.push((
        "rmsnorm/x",
        grad_check(
            |t, x| {
                let g = t.constant(Arc::new(gain.clone()));
                let y = t.rmsnorm(x, g, 1e-6)?;
                reduce(t, y, &w_mk)
            },
            &a,
            h,
        )?,
    ));
    out.push((
        "rmsnorm/gain",
        grad_check(
            |t, g| {
                let x = t.constant(Arc::new(a.clone()));
                let y = t.rmsnorm(x, g, 1e-6)?;
                reduce(t, y, &w_mk)
            },
            &gain,
            h,
        )?,
    ));
    out.push((
        "embedding",
        grad_check(
            |t, x| {
                let y = t.embedding(x, &ids)?;
                reduce(t, y, &w_mk)
            },
            &table,
            h,
        )?,
    ));
    out.push((
        "rope",
        grad_check(
            |t, x| {
                let y = t.rope(x, Arc::clone(&cos_sin), shape.d_head)?;
                reduce(t, y, &w_attn)
            },
            &qkv[0],
            h,
        )?,
    ));
    for (i, name) in ["attention/q", "attention/k", "attention/v"].into_iter().enumerate() {
        let e = grad_check(
            |t, x| {
                let mut args: Vec<Var> = qkv.iter().map(|m| t.constant(Arc::new(m.clone()))).collect();
                args[i] = x;
                let y = t.attention(args[0], args[1], args[2], shape)?;
                reduce(t, y, &w_attn)
            },
            &qkv[i],
            h,
        )?;
        out.push((name, e));
    }
    out.push((
        "cross_entropy",
        grad_check(|t, x| t.cross_entropy_masked(x, &targets, &loss_mask), &logits, h)?,
    ));
    out.push((
        "gather_rows",
        grad_check(
            |t, x| {
                let y = t.gather_rows(x, &[3, 1, 3, 0])?;
                reduce(t, y, &w_mk)
            },
            &a,
            h,
        )?,
    ));
    out.push((
        "scatter_rows",
        grad_check(
            |t, x| {
                let o = t.param(other.as_ref().clone());
                let y = t.scatter_rows(&[(x, vec![5, 0, 2, 3]), (o, vec![1, 4])], 6)?;
                reduce(t, y, &w_rows)
            },
            &a,
            h,
        )?,
    ));
    out.push((
        "gather_cols",
        grad_check(
            |t, x| {
                let y = t.gather_cols(x, &cols)?;
                reduce(t, y, &w_cols)
            },
            &a,
            h,
        )?,
    ));
    out.push((
        "scatter_cols",
        grad_check(
            |t, x| {
                let y = t.scatter_cols(x, &cols, k)?;
                reduce(t, y, &w_mk)
            },
            &narrow,
            h,
        )?,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: Var| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let y = f(&mut tape, v).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[2.0, 4.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn every_primitive_passes() {
        for (name, e) in primitive_suite(0).unwrap() {
            assert!(e < 1e-5, "{name}: rel err {e:e}");
        }
    }

    #[test]
    fn zero_step_is_rejected() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let r = grad_check(|t, v| Ok(t.sum(v)), &x, 0.0);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let r = grad_check(|t, v| Ok(t.scale(v, f64::INFINITY)), &x, 1e-3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
