//! Central-difference verification of every differentiable operation, in
//! the compositions the training code actually uses.

use rand::Rng;

use super::tape::Activation;
use super::{Network, NetworkSpec, NnError, NodeId, Parameterized, Tape, Tensor};

const H: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.cases.is_empty() && self.max_rel_err() <= tol
    }
}

fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

type LossBuilder<'a> = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NnError> + 'a;

/// Compares analytic gradients of `analytic` against central differences of
/// `numeric` at the same parameter point. The two builders are normally the
/// same closure; they differ only when checking gradient-blocking, where the
/// numeric side must hold the blocked branch at its base value.
fn check_pair(
    name: &str,
    params: &[Tensor],
    analytic: &LossBuilder,
    numeric: &LossBuilder,
) -> Result<GradCheckCase, NnError> {
    let eval = |ps: &[Tensor], build: &LossBuilder| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &ids)?;
        if !tape.value(loss).is_scalar() {
            return Err(NnError::NonScalarLoss(tape.value(loss).shape().to_vec()));
        }
        Ok(tape.value(loss).scalar_value())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<_, _>>()?;
    let loss = analytic(&mut tape, &ids)?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = ids.iter().map(|id| tape.grad(*id).to_vec()).collect();

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + H;
            let up = eval(&work, numeric)?;
            work[pi].data_mut()[j] = orig - H;
            let down = eval(&work, numeric)?;
            work[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * H);
            let a = grad[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(GradCheckCase { name: name.to_string(), max_rel_err: max_rel })
}

fn net_params(net: &Network, extra: Vec<Tensor>) -> Vec<Tensor> {
    let mut ps: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
    ps.extend(extra);
    ps
}

/// Forwards `net` on a tape where the first `k` ids are its parameters and
/// `ids[k]` is the (differentiable) input.
fn net_forward(
    net: &Network,
    tape: &mut Tape,
    ids: &[NodeId],
) -> Result<(NodeId, usize), NnError> {
    let k = net.parameters().len();
    let binding = super::NetworkBinding::from_nodes(ids[..k].to_vec());
    let out = net.forward_with(tape, &binding, ids[k])?;
    Ok((out, k))
}

/// Runs the full battery: dense/conv/normalize networks under both loss
/// heads, action selection, per-action affine maps, and gradient blocking.
pub fn run_all(rng: &mut impl Rng) -> Result<GradCheckReport, NnError> {
    let mut report = GradCheckReport::default();

    // Dense relu stack with mean-squared-error loss; input also checked.
    {
        let spec = NetworkSpec::new(vec![5])?
            .dense(7, Activation::Relu)?
            .dense(3, Activation::Linear)?;
        let net = Network::new(spec, rng)?;
        let input = rand_tensor(rng, vec![4, 5]);
        let target = rand_tensor(rng, vec![4, 3]);
        let params = net_params(&net, vec![input]);
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let (out, _) = net_forward(&net, tape, ids)?;
            let t = tape.constant(target.clone())?;
            tape.mse(out, t)
        };
        report
            .cases
            .push(check_pair("dense_relu_mse", &params, &build, &build)?);
    }

    // Tanh + unit normalization under the summed-square residual loss.
    {
        let spec = NetworkSpec::new(vec![6])?
            .dense(4, Activation::Tanh)?
            .unit_normalize()?;
        let net = Network::new(spec, rng)?;
        let input = rand_tensor(rng, vec![3, 6]);
        let target = rand_tensor(rng, vec![3, 4]);
        let params = net_params(&net, vec![input]);
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let (out, _) = net_forward(&net, tape, ids)?;
            let t = tape.constant(target.clone())?;
            let diff = tape.sub(out, t)?;
            tape.row_sum_square_mean(diff)
        };
        report.cases.push(check_pair(
            "tanh_unit_normalize_row_sum_square",
            &params,
            &build,
            &build,
        )?);
    }

    // Convolutional encoder shape: conv-conv-flatten-dense-normalize.
    {
        let spec = NetworkSpec::new(vec![2, 6, 6])?
            .conv2d(3, 3, 1, Activation::Relu)?
            .conv2d(4, 3, 2, Activation::Relu)?
            .flatten()?
            .dense(5, Activation::Linear)?
            .unit_normalize()?;
        let net = Network::new(spec, rng)?;
        let input = rand_tensor(rng, vec![2, 2, 6, 6]);
        let target = rand_tensor(rng, vec![2, 5]);
        let params = net_params(&net, vec![input]);
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let (out, _) = net_forward(&net, tape, ids)?;
            let t = tape.constant(target.clone())?;
            tape.mse(out, t)
        };
        report
            .cases
            .push(check_pair("conv_encoder_mse", &params, &build, &build)?);
    }

    // Per-row action selection out of a value head.
    {
        let spec = NetworkSpec::new(vec![4])?
            .dense(6, Activation::Relu)?
            .dense(3, Activation::Linear)?;
        let net = Network::new(spec, rng)?;
        let input = rand_tensor(rng, vec![5, 4]);
        let actions = vec![0usize, 2, 1, 1, 0];
        let target = rand_tensor(rng, vec![5]);
        let params = net_params(&net, vec![input]);
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let (out, _) = net_forward(&net, tape, ids)?;
            let q = tape.select_actions(out, &actions)?;
            let t = tape.constant(target.clone())?;
            tape.mse(q, t)
        };
        report
            .cases
            .push(check_pair("select_actions_mse", &params, &build, &build)?);
    }

    // Per-action affine map: grads w.r.t. input, all weights, all biases.
    {
        let d = 3;
        let w0 = rand_tensor(rng, vec![d, d]);
        let w1 = rand_tensor(rng, vec![d, d]);
        let b0 = rand_tensor(rng, vec![d]);
        let b1 = rand_tensor(rng, vec![d]);
        let input = rand_tensor(rng, vec![4, d]);
        let actions = vec![0usize, 1, 1, 0];
        let target = rand_tensor(rng, vec![4, d]);
        let params = vec![w0, w1, b0, b1, input];
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let pred = tape.per_action_affine(ids[4], &ids[0..2], &ids[2..4], &actions)?;
            let t = tape.constant(target.clone())?;
            let diff = tape.sub(pred, t)?;
            tape.row_sum_square_mean(diff)
        };
        report
            .cases
            .push(check_pair("per_action_affine", &params, &build, &build)?);
    }

    // Gradient blocking: the analytic loss regresses a prediction onto a
    // gradient-blocked copy of an output that shares parameters with it.
    // The numeric oracle holds that branch at its base value, which is
    // exactly what a correct blocking implementation must reduce to.
    {
        let spec = NetworkSpec::new(vec![4])?
            .dense(5, Activation::Tanh)?
            .unit_normalize()?;
        let net = Network::new(spec, rng)?;
        let input = rand_tensor(rng, vec![3, 4]);
        let next_input = rand_tensor(rng, vec![3, 4]);
        let frozen_target = net.forward_no_grad(&next_input)?;
        let params = net_params(&net, vec![input]);
        let analytic = |tape: &mut Tape, ids: &[NodeId]| {
            let k = net.parameters().len();
            let binding = super::NetworkBinding::from_nodes(ids[..k].to_vec());
            let out = net.forward_with(tape, &binding, ids[k])?;
            let nx = tape.constant(next_input.clone())?;
            let out_next = net.forward_with(tape, &binding, nx)?;
            let blocked = tape.stop_gradient(out_next)?;
            let diff = tape.sub(out, blocked)?;
            tape.row_sum_square_mean(diff)
        };
        let numeric = |tape: &mut Tape, ids: &[NodeId]| {
            let (out, _) = net_forward(&net, tape, ids)?;
            let t = tape.constant(frozen_target.clone())?;
            let diff = tape.sub(out, t)?;
            tape.row_sum_square_mean(diff)
        };
        report
            .cases
            .push(check_pair("stop_gradient_regression", &params, &analytic, &numeric)?);
    }

    // Scalar loss combination, as used when mixing base and model losses.
    {
        let spec = NetworkSpec::new(vec![3])?.dense(2, Activation::Relu)?;
        let net = Network::new(spec, rng)?;
        let input = rand_tensor(rng, vec![2, 3]);
        let t1 = rand_tensor(rng, vec![2, 2]);
        let params = net_params(&net, vec![input]);
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let (out, _) = net_forward(&net, tape, ids)?;
            let t = tape.constant(t1.clone())?;
            let l1 = tape.mse(out, t)?;
            let tt = tape.constant(t1.clone())?;
            let diff = tape.sub(out, tt)?;
            let l2 = tape.row_sum_square_mean(diff)?;
            tape.add_scaled(l1, l2, 0.7)
        };
        report
            .cases
            .push(check_pair("combined_scalar_loss", &params, &build, &build)?);
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;

    #[test]
    fn full_battery_under_tolerance() {
        let report = run_all(&mut derive_rng(11, "gradcheck")).unwrap();
        assert_eq!(report.cases.len(), 7);
        for case in &report.cases {
            assert!(
                case.max_rel_err < 1e-4,
                "{} rel err {}",
                case.name,
                case.max_rel_err
            );
        }
        assert!(report.passed(1e-4));
    }

    #[test]
    fn battery_is_deterministic() {
        let a = run_all(&mut derive_rng(3, "gc")).unwrap();
        let b = run_all(&mut derive_rng(3, "gc")).unwrap();
        let ra: Vec<f64> = a.cases.iter().map(|c| c.max_rel_err).collect();
        let rb: Vec<f64> = b.cases.iter().map(|c| c.max_rel_err).collect();
        assert_eq!(ra, rb);
    }
}
