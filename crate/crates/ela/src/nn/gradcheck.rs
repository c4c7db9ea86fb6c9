//! Central finite-difference verification of analytic gradients.

use super::DenseNet;
use crate::error::{ElaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub pass: bool,
    pub tolerance: f64,
}

/// Compare an analytic parameter gradient against central finite differences
/// of `loss_fn` over the net's flat parameter vector.
///
/// `loss_fn` gets the net and must return a scalar loss; `analytic_grad` is
/// the flat gradient claimed for the current parameters.
pub fn grad_check<F>(
    net: &DenseNet,
    loss_fn: F,
    analytic_grad: &[f64],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&DenseNet) -> Result<f64>,
{
    let base = loss_fn(net)?;
    if !base.is_finite() {
        return Err(ElaError::Numeric("non-finite loss at probe point".into()));
    }
    if analytic_grad.len() != net.param_count() {
        return Err(ElaError::Shape(format!(
            "gradient length {} != param count {}",
            analytic_grad.len(),
            net.param_count()
        )));
    }
    let params = net.params_flat();
    let mut probe = net.clone();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += h;
        probe.set_params_flat(&p)?;
        let fp = loss_fn(&probe)?;
        p[i] = params[i] - h;
        probe.set_params_flat(&p)?;
        let fm = loss_fn(&probe)?;
        let fd = (fp - fm) / (2.0 * h);
        let denom = analytic_grad[i].abs().max(fd.abs()).max(1e-8);
        let rel = (analytic_grad[i] - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_index: worst,
        pass: max_rel < tolerance,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::SeedNode;

    fn quadratic_loss(net: &DenseNet, input: &[f64]) -> Result<f64> {
        let y = net.forward(input)?;
        Ok(0.5 * y.iter().map(|v| v * v).sum::<f64>())
    }

    fn analytic_quadratic_grad(net: &DenseNet, input: &[f64]) -> Vec<f64> {
        let (y, cache) = net.forward_cached(input).unwrap();
        let (grads, _) = net.backward(&cache, &y).unwrap();
        grads.flat()
    }

    #[test]
    fn linear_net_passes_tight() {
        let net = DenseNet::new(&[3, 2], &[Activation::Identity], SeedNode::new(1)).unwrap();
        let input = [0.5, -1.0, 2.0];
        let grad = analytic_quadratic_grad(&net, &input);
        let report = grad_check(&net, |n| quadratic_loss(n, &input), &grad, 1e-5, 1e-7).unwrap();
        assert!(report.pass, "max rel {}", report.max_rel_error);
    }

    #[test]
    fn relu_net_passes_off_kink() {
        let net = DenseNet::new(
            &[3, 8, 2],
            &[Activation::Relu, Activation::Identity],
            SeedNode::new(42),
        )
        .unwrap();
        let input = [0.37, -0.81, 1.22];
        let grad = analytic_quadratic_grad(&net, &input);
        let report = grad_check(&net, |n| quadratic_loss(n, &input), &grad, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "max rel {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let net = DenseNet::new(&[3, 2], &[Activation::Identity], SeedNode::new(1)).unwrap();
        let input = [0.5, -1.0, 2.0];
        let mut grad = analytic_quadratic_grad(&net, &input);
        grad[2] *= 2.0;
        let report = grad_check(&net, |n| quadratic_loss(n, &input), &grad, 1e-5, 1e-7).unwrap();
        assert!(!report.pass);
    }
}
