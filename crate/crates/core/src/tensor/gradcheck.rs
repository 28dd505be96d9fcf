//! Finite-difference validation of autodiff gradients, evaluated in `f64`.

use super::{Graph, NodeId, Result, Tensor};

/// Max relative error between autodiff and central differences for a
/// single input. See [`grad_check_params`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    grad_check_params(|g, ids| f(g, ids[0]), std::slice::from_ref(x), h)
}

/// Builds the scalar loss `f` over leaves holding `inputs`, back-propagates,
/// and compares every coordinate of every input gradient with the central
/// difference `(f(x+h) - f(x-h)) / 2h`.
///
/// Returns `max |autodiff - fd| / (|fd| + 1e-8)`.
pub fn grad_check_params<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values
            .iter()
            .map(|v| {
                if with_grad {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        let loss = f(&mut g, &ids)?;
        let value = g.value(loss).data()[0];
        let mut grads = Vec::new();
        if with_grad {
            g.backward(loss)?;
            for id in &ids {
                grads.push(g.grad(*id).map(<[f64]>::to_vec).unwrap_or_default());
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let (plus, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = orig - h;
            let (minus, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let err = (analytic[i][j] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
