//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare the analytic gradient of a scalar-valued graph function against
/// central differences, coordinate by coordinate.
///
/// `f` must build the function deterministically from a fresh graph and the
/// leaf it is handed (dropout stays inactive or uses a fixed mask seed so the
/// three evaluations see the same function). The relative error uses
/// max(|analytic|, |numeric|) as the scale and falls back to absolute error
/// below 1e-6 so zero gradients do not blow up the ratio.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, VarId) -> Result<VarId>,
{
    let eval = |t: &Tensor, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let xid = g.leaf(t.clone(), want_grad);
        let y = f(&mut g, xid)?;
        let yv = g.value(y);
        if !yv.is_scalar() {
            return Err(Error::LossNotScalar(yv.shape().to_vec()));
        }
        let out = yv.item();
        if want_grad {
            let grads = g.backward(y)?;
            let grad = match &grads[xid] {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; t.numel()],
            };
            Ok((out, Some(grad)))
        } else {
            Ok((out, None))
        }
    };

    let (_, analytic) = eval(x, true)?;
    let analytic = analytic.unwrap();

    let mut max_rel_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let (fp, _) = eval(&plus, false)?;
        let (fm, _) = eval(&minus, false)?;
        if !fp.is_finite() || !fm.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite {
                coord: i,
                context: "finite-difference check".into(),
            });
        }
        let numeric = (fp - fm) / (2.0 * step);
        let diff = (analytic[i] - numeric).abs();
        let scale = analytic[i].abs().max(numeric.abs());
        let rel = if scale > 1e-6 { diff / scale } else { diff };
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(FdReport {
        max_rel_err,
        pass: max_rel_err <= tol,
    })
}
