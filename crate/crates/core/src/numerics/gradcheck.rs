//! Central finite-difference oracle for tape gradients.

use rand::Rng as _;

use super::{rng, Bound, ParamSet, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` over sampled coordinates.
    pub max_rel_err: f64,
    /// Name of the tensor attaining `max_rel_err`.
    pub worst: String,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Compare analytic gradients of `loss` against central differences.
///
/// Up to `per_tensor` coordinates of each tensor are sampled. Coordinates of a
/// tensor are compared jointly (L2 norm of the difference over L2 norm of the
/// larger vector); tensors whose sampled gradients are both below `1e-9` in
/// norm are compared absolutely.
pub fn check_gradients<F>(params: &ParamSet, loss: F, per_tensor: usize, step: f64, seed: u64) -> GradCheckReport
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = loss(&mut tape, &bound);
    let grads = bound.grads(&tape.backward(out).expect("scalar loss"));

    let eval = |p: &ParamSet| -> f64 {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let v = loss(&mut t, &b);
        t.scalar(v)
    };

    let mut r = rng::rng(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut work = params.clone();
    for (ti, tensor) in params.tensors().iter().enumerate() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..n)).collect()
        };
        let (mut diff, mut an, mut nu) = (0.0f64, 0.0f64, 0.0f64);
        for &c in &coords {
            let orig = tensor.data()[c];
            work.tensors_mut()[ti].data_mut()[c] = orig + step;
            let up = eval(&work);
            work.tensors_mut()[ti].data_mut()[c] = orig - step;
            let down = eval(&work);
            work.tensors_mut()[ti].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[ti].data()[c];
            diff += (analytic - numeric).powi(2);
            an += analytic * analytic;
            nu += numeric * numeric;
            report.checked += 1;
        }
        let scale = an.sqrt().max(nu.sqrt());
        let err = if scale < 1e-9 { diff.sqrt() } else { diff.sqrt() / scale };
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst = params.names()[ti].clone();
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn rand_params(shapes: &[(&str, &[usize])], seed: u64) -> ParamSet {
        let mut r = rng::rng(seed);
        let mut p = ParamSet::new();
        for (name, shape) in shapes {
            p.add(*name, Tensor::randn(shape, 0.7, &mut r));
        }
        p
    }

    fn assert_close(report: GradCheckReport) {
        assert!(
            report.max_rel_err < 1e-6,
            "rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let p = rand_params(&[("p", &[5])], 1);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let sq = tape.square(b.vars()[0]);
        let loss = tape.sum(sq);
        let g = b.grads(&tape.backward(loss).unwrap());
        for (gi, pi) in g[0].data().iter().zip(p.tensors()[0].data()) {
            assert!((gi - 2.0 * pi).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = rand_params(&[("p", &[4])], 2);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.scale(c, 2.0);
        let g = b.grads(&tape.backward(loss).unwrap());
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(v),
            Err(crate::numerics::NumericsError::NonScalarLoss(_))
        ));
        let mut other = Tape::new();
        let w = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(
            tape.backward(w),
            Err(crate::numerics::NumericsError::ForeignVar)
        ));
    }

    #[test]
    fn each_op_is_visited_once() {
        let p = rand_params(&[("a", &[3, 3])], 3);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let a = b.vars()[0];
        let x = tape.matmul(a, a);
        let y = tape.tanh(x);
        let z = tape.add(y, x);
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.visited(), 4);
    }

    #[test]
    fn matmul_family() {
        let p = rand_params(&[("a", &[3, 4]), ("b", &[4, 5]), ("c", &[5, 4]), ("r", &[5])], 10);
        assert_close(check_gradients(
            &p,
            |t, b| {
                let v = b.vars();
                let ab = t.matmul(v[0], v[1]);
                let abr = t.add_row(ab, v[3]);
                let x = t.matmul_nt(v[0], v[2]); // [3,4] x [5,4]^T = [3,5]
                let y = t.mul(x, abr);
                let s = t.square(y);
                t.mean(s)
            },
            100,
            1e-5,
            0,
        ));
    }

    #[test]
    fn elementwise_family() {
        let p = rand_params(&[("a", &[2, 6]), ("b", &[2, 6])], 11);
        assert_close(check_gradients(
            &p,
            |t, b| {
                let v = b.vars();
                let e = t.exp(v[0]);
                let th = t.tanh(v[1]);
                let g = t.gelu(v[0]);
                let sp = t.softplus(v[1]);
                let sg = t.sigmoid(v[0]);
                let m = t.minimum(e, th);
                let d = t.sub(g, sp);
                let c = t.clamp(v[1], -0.5, 0.5);
                let x = t.mul(m, d);
                let y = t.add(x, sg);
                let y = t.mul(y, c);
                let y = t.add_scalar(y, 0.3);
                let y = t.scale(y, -1.7);
                t.sum(y)
            },
            100,
            1e-6,
            0,
        ));
    }

    #[test]
    fn normalisation_and_softmax_family() {
        let p = rand_params(&[("x", &[4, 6]), ("g", &[6]), ("b", &[6])], 12);
        assert_close(check_gradients(
            &p,
            |t, b| {
                let v = b.vars();
                let ln = t.layer_norm(v[0], v[1], v[2]);
                let sq = t.slice_cols(ln, 0, 4); // [4,4]
                let cs = t.causal_softmax(sq);
                let ls = t.log_softmax(ln);
                let pick = t.gather(ls, &[0, 5, 2, 3]);
                let a = t.sum(pick);
                let w = t.matmul(cs, sq);
                let w2 = t.square(w);
                let bsum = t.sum(w2);
                t.add(a, bsum)
            },
            100,
            1e-5,
            0,
        ));
    }

    #[test]
    fn structural_family() {
        let p = rand_params(&[("table", &[7, 3]), ("x", &[3, 3])], 13);
        assert_close(check_gradients(
            &p,
            |t, b| {
                let v = b.vars();
                let e = t.embedding(v[0], &[1, 4, 4, 6]);
                let s = t.slice_rows(e, 1, 3);
                let c = t.concat_cols(&[s, v[1]]);
                let st = t.stack_rows(&[c, c]);
                let pr = t.permute_rows(st, &[5, 4, 3, 2, 1, 0]);
                let mr = t.mean_rows(pr);
                let r = t.reshape(mr, &[2, 3]);
                let sq = t.square(r);
                let m2 = t.mul(pr, st);
                let a = t.sum(sq);
                let bb = t.mean(m2);
                t.add_all(&[a, bb])
            },
            100,
            1e-5,
            0,
        ));
    }
}
