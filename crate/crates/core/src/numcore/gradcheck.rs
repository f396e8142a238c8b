use crate::error::{Error, Result};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Compare reverse-mode gradients against central finite differences with
/// base step `eps`.
///
/// `build` constructs the scalar loss from leaves inserted in the order of
/// `inputs`; it is called once per perturbed element, so it must be a pure
/// function of the leaf values. Returns the worst relative error
/// |analytic - numeric| / max(1, |analytic|, |numeric|) over every element
/// of every input.
///
/// Central differences on f64 bottom out around 1e-7 relative error for
/// well-scaled smooth functions; callers assert against a tolerance a bit
/// above that.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let eval = |tensors: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar loss, got shape {:?}",
                g.value(loss).shape()
            )));
        }
        Ok((g, ids, loss))
    };

    let (mut g, ids, loss) = eval(inputs)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        ids.iter().map(|id| g.grad(*id).expect("leaf marked with_grad").to_vec()).collect();

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let x = t.data()[ei];
            let h = eps * x.abs().max(1.0);

            perturbed[ti].data_mut()[ei] = x + h;
            let (gp, _, lp) = eval(&perturbed)?;
            let fp = gp.scalar_value(lp)?;

            perturbed[ti].data_mut()[ei] = x - h;
            let (gm, _, lm) = eval(&perturbed)?;
            let fm = gm.scalar_value(lm)?;

            perturbed[ti].data_mut()[ei] = x;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ei];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at input {ti} element {ei}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
