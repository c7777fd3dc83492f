//! Central finite-difference verification of the hand-written backward passes.

use super::nn::{cross_entropy, softmax2, Cnn3, Mlp, Network};
use super::{ProbeError, ProbeKind};
use crate::rng::{domain, keyed};

/// Denominator floor of the relative error, so parameters whose gradient is
/// (numerically) zero compare on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-4;

fn batch_loss<N: Network<f64>>(
    net: &N,
    xs: &[Vec<f64>],
    labels: &[usize],
    cache: &mut N::Cache,
) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(labels)
        .map(|(x, &y)| cross_entropy(net.forward(x, cache), y))
        .sum();
    total / xs.len() as f64
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`
/// over every parameter of `net`, for the mean cross-entropy of the batch.
pub fn check_network<N: Network<f64>>(
    net: &mut N,
    xs: &[Vec<f64>],
    labels: &[usize],
    epsilon: f64,
) -> Result<f64, ProbeError> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(ProbeError::GradCheck(format!(
            "epsilon {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    if xs.is_empty() || xs.len() != labels.len() || xs.iter().any(|x| x.len() != net.input_len()) {
        return Err(ProbeError::GradCheck(
            "batch does not match the network input".into(),
        ));
    }
    let mut cache = net.new_cache();
    let n = xs.len() as f64;
    let mut analytic = vec![0.0; net.params().len()];
    for (x, &y) in xs.iter().zip(labels) {
        let p = softmax2(net.forward(x, &mut cache));
        let d = [
            (p[0] - f64::from(u8::from(y == 0))) / n,
            (p[1] - f64::from(u8::from(y == 1))) / n,
        ];
        net.backward(&mut cache, d, &mut analytic);
    }
    let base = batch_loss(net, xs, labels, &mut cache);
    if !base.is_finite() {
        return Err(ProbeError::GradCheck("non-finite loss".into()));
    }
    let mut worst = 0.0f64;
    for j in 0..analytic.len() {
        let orig = net.params()[j];
        net.params_mut()[j] = orig + epsilon;
        let up = batch_loss(net, xs, labels, &mut cache);
        net.params_mut()[j] = orig - epsilon;
        let down = batch_loss(net, xs, labels, &mut cache);
        net.params_mut()[j] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(ProbeError::GradCheck(format!(
                "non-finite loss at parameter {j}"
            )));
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check of a small randomly initialized instance of `kind`.
///
/// The MLP takes its input width from the batch (hidden width 8); the CNN
/// expects square inputs of side `√len` (widths 2/3/4).
pub fn gradient_check(
    kind: ProbeKind,
    xs: &[Vec<f64>],
    labels: &[usize],
    epsilon: f64,
    seed: u64,
) -> Result<f64, ProbeError> {
    let first = xs
        .first()
        .ok_or_else(|| ProbeError::GradCheck("empty batch".into()))?;
    let mut rng = keyed(seed, domain::INIT, 0);
    match kind {
        ProbeKind::FeatureMlp => check_network(
            &mut Mlp::<f64>::init(first.len(), 8, &mut rng),
            xs,
            labels,
            epsilon,
        ),
        ProbeKind::DepthCnn3 | ProbeKind::AppearanceCnn => {
            let side = (first.len() as f64).sqrt().round() as usize;
            if side * side != first.len() || side % 8 != 0 {
                return Err(ProbeError::GradCheck(format!(
                    "input of {} values is not a square with side a multiple of 8",
                    first.len()
                )));
            }
            check_network(
                &mut Cnn3::<f64>::init(side, [2, 3, 4], &mut rng),
                xs,
                labels,
                epsilon,
            )
        }
        ProbeKind::HeuristicApparent | ProbeKind::HeuristicPhysics => Err(ProbeError::GradCheck(
            format!("{} has no gradient", kind.name()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch(n: usize, len: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = keyed(seed, 0, 0);
        (0..n)
            .map(|i| ((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), i % 2))
            .unzip()
    }

    #[test]
    fn mlp_gradients() {
        let (x, y) = batch(4, 8, 1);
        let err = gradient_check(ProbeKind::FeatureMlp, &x, &y, 1e-6, 3).unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn cnn_gradients() {
        let (x, y) = batch(2, 256, 2);
        let err = gradient_check(ProbeKind::DepthCnn3, &x, &y, 1e-6, 4).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn zero_weight_network_bias_gradients() {
        let mut net = Mlp::<f64>::zeros(4, 6);
        let x = vec![vec![0.5, -0.5, 0.5, -0.5], vec![-0.5, 0.5, -0.5, 0.5]];
        let err = check_network(&mut net, &x, &[0, 1], 1e-6).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn rejects_bad_epsilon_and_heuristics() {
        let (x, y) = batch(2, 8, 1);
        assert!(gradient_check(ProbeKind::FeatureMlp, &x, &y, 1e-2, 0).is_err());
        assert!(gradient_check(ProbeKind::HeuristicPhysics, &x, &y, 1e-6, 0).is_err());
    }
}
