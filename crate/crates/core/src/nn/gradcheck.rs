//! Central finite-difference checks of tape gradients in 64-bit precision.

use rand::Rng;

use super::tape::{Graph, ParamVars, Var};
use super::{value_and_grad, NnError, Params};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// Coordinates redrawn because the probe interval straddled a kink.
    pub kinks: usize,
    /// (parameter name, analytic, numeric) at the worst probe.
    pub worst: Option<(String, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Disagreement between the `h` and `h/2` estimates that marks a kink. On a
/// smooth loss the two differ by O(h^2), far below this.
const KINK_REL: f64 = 1e-3;
/// Same test on the extrapolated estimates at `(h, h/2)` and `(h/2, h/4)`.
const RICHARDSON_REL: f64 = 1e-5;

/// Relative error with a floor on the denominator so that two gradients that
/// are both numerically zero compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients with central differences `(f(θ+h) − f(θ−h)) / 2h`,
/// Richardson-extrapolated over `h` and `h/2`, at `probes`
/// randomly chosen coordinates. Each probe first picks a parameter array
/// uniformly, then an element within it, so small arrays (biases, log-std)
/// are exercised as often as large weight matrices.
///
/// A probe whose estimates at `step`, `step / 2` and `step / 4` are
/// mutually inconsistent straddles a non-differentiable point (rectifier, clamp or min
/// kink); it is redrawn, up to `probes` times in total, and counted in
/// [`GradCheckReport::kinks`]. Once the redraw budget is spent every probe
/// is scored as drawn.
pub fn check_gradients<F, R>(
    params: &Params<f64>,
    loss_fn: F,
    probes: usize,
    step: f64,
    rng: &mut R,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var, NnError>,
    R: Rng + ?Sized,
{
    let (_, grads) = value_and_grad(params, &loss_fn)?;
    let eval = |p: &Params<f64>| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let pv = g.params(p);
        let loss = loss_fn(&mut g, &pv)?;
        Ok(g.scalar(loss))
    };
    let sizes: Vec<(String, usize)> = params
        .iter()
        .map(|(n, a)| (n.to_string(), a.len()))
        .collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, (_, n)| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();

    let mut report = GradCheckReport {
        probes,
        max_rel_err: 0.0,
        kinks: 0,
        worst: None,
    };
    let mut work = params.clone();
    let mut probe = |flat: usize, h: f64| -> Result<(f64, f64), NnError> {
        let orig = work.get_flat(flat);
        let mid = eval(&work)?;
        work.set_flat(flat, orig + h);
        let plus = eval(&work)?;
        work.set_flat(flat, orig - h);
        let minus = eval(&work)?;
        work.set_flat(flat, orig);
        // Central estimate and forward-minus-backward gap.
        Ok(((plus - minus) / (2.0 * h), (plus - 2.0 * mid + minus) / h))
    };
    let mut done = 0;
    while done < probes {
        let a = rng.random_range(0..sizes.len());
        let flat = offsets[a] + rng.random_range(0..sizes[a].1);
        let (numeric, gap) = probe(flat, step)?;
        let (half, gap_half) = probe(flat, step / 2.0)?;
        let (quarter, _) = probe(flat, step / 4.0)?;
        // Richardson extrapolation of two central estimates cancels the
        // O(h^2) truncation term.
        let coarse = (4.0 * half - numeric) / 3.0;
        let fine = (4.0 * quarter - half) / 3.0;
        // On a smooth loss the gap shrinks linearly with h and the two
        // extrapolations agree to O(h^4); across a kink neither holds.
        let kink = rel_err(numeric, half) > KINK_REL
            || rel_err(coarse, fine) > RICHARDSON_REL
            || (gap.abs() > 1e-8 && gap_half.abs() > 0.75 * gap.abs());
        if report.kinks < probes && kink {
            report.kinks += 1;
            continue;
        }
        done += 1;
        let numeric = coarse;
        let analytic = grads.get_flat(flat);
        let err = rel_err(analytic, numeric);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst = Some((sizes[a].0.clone(), analytic, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> Params<f64> {
        let mut p = Params::new();
        p.insert("a", array![[0.3, -1.2], [0.7, 2.0]]).unwrap();
        p.insert("b", array![[0.5, -0.1]]).unwrap();
        p
    }

    #[test]
    fn half_squared_norm_gradient_is_params() {
        let p = params();
        let (val, g) = value_and_grad(&p, |g, pv| {
            let a = g.square(pv.get("a"));
            let b = g.square(pv.get("b"));
            let sa = g.sum(a);
            let sb = g.sum(b);
            let s = g.add(sa, sb);
            Ok(g.scale(s, 0.5))
        })
        .unwrap();
        let expect = 0.5 * p.flatten().iter().map(|x| x * x).sum::<f64>();
        assert!((val - expect).abs() < 1e-12);
        assert_eq!(g, p);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = params();
        let (_, g) = value_and_grad(&p, |g, _| Ok(g.constant(4.0))).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_loss_is_flagged() {
        let p = params();
        let err = value_and_grad(&p, |g, pv| {
            let neg = g.scale(pv.get("b"), -1.0);
            let l = g.log(neg);
            Ok(g.sum(l))
        })
        .unwrap_err();
        assert!(matches!(err, NnError::NonFiniteLoss(_)));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let p = params();
        let x = Array2::from_shape_vec((3, 2), vec![0.2, -0.4, 1.1, 0.3, -0.8, 0.9]).unwrap();
        let loss = |g: &mut Graph<f64>, pv: &ParamVars| -> Result<Var, NnError> {
            let xi = g.input(x.clone());
            let h = g.matmul(xi, pv.get("a"));
            let h = g.add_row(h, pv.get("b"));
            let r = g.relu(h);
            let t = g.tanh(h);
            let s = g.sigmoid(h);
            let e = g.exp(t);
            let sq = g.square(s);
            let c = g.clamp(h, -0.5, 0.6);
            let l = g.add_scalar(sq, 1.0);
            let l = g.log(l);
            let q = g.sqrt(l);
            let m = g.min(r, c);
            let d = g.div(e, l);
            let sm = g.softmax_rows(h);
            let n = g.normalize_rows(t);
            let dr = g.dot_rows(n, sm);
            let mc = g.mul_col(q, dr);
            let mt = g.matmul_t(mc, pv.get("a"));
            let cc = g.concat_cols(&[mt, m, d]);
            let sl = g.slice_cols(cc, 1, 5);
            let mr = g.mean_rows(sl);
            let rep = g.repeat_rows(mr, 2);
            let sub = g.sub(rep, rep);
            let s1 = g.sum(rep);
            let s2 = g.mean(sl);
            let s3 = g.sum(sub);
            let tot = g.add(s1, s2);
            let tot = g.add(tot, s3);
            let sc = g.sum_cols(cc);
            let sc = g.mean(sc);
            Ok(g.add(tot, sc))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rep = check_gradients(&p, loss, 100, 1e-5, &mut rng).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn input_gradient_expression_matches_finite_differences() {
        use crate::nn::{Mlp, MlpSpec};
        let mlp = Mlp::new(MlpSpec::new(3, &[6, 5], 1), "d").unwrap();
        let mut p32 = Params::new();
        mlp.init(&mut p32, &mut ChaCha8Rng::seed_from_u64(3), 1.0).unwrap();
        let p = p32.cast::<f64>();
        let x = array![[0.3, -0.2, 0.9], [-1.0, 0.4, 0.1]];
        let mut g = Graph::new();
        let pv = g.params(&p);
        let xv = g.input(x.clone());
        let (_, dx) = mlp.graph_with_input_grad(&mut g, &pv, xv);
        let dx = g.value(dx).clone();
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fp = mlp.forward_batch(&p, xp.view()).unwrap()[[r, 0]];
                let fm = mlp.forward_batch(&p, xm.view()).unwrap()[[r, 0]];
                let num = (fp - fm) / (2.0 * h);
                assert!(rel_err(dx[[r, c]], num) < 1e-6, "{} vs {}", dx[[r, c]], num);
            }
        }
    }
}
