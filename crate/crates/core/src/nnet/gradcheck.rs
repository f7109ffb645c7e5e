use super::loss::{batch_loss, Objective};
use super::network::Network;
use super::tensor::{Real, Tensor};
use super::train::gradients;
use super::NnetError;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (parameter tensor, element) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences
/// `(L(p + h) - L(p - h)) / 2h` for every parameter. The network is promoted to
/// f64 so rounding in the loss does not swamp the difference quotient.
pub fn grad_check<T: Real, O: Objective>(
    net: &Network<T>,
    objective: &O,
    inputs: &Tensor<T>,
    targets: &[&O::Target],
    h: f64,
) -> Result<GradCheckReport, NnetError> {
    let all: Vec<Vec<usize>> = net.params().iter().map(|p| (0..p.len()).collect()).collect();
    check_elements(net, objective, inputs, targets, h, &all)
}

/// Like [`grad_check`] but on at most `per_tensor` randomly chosen elements of
/// each parameter tensor.
pub fn grad_check_sampled<T: Real, O: Objective>(
    net: &Network<T>,
    objective: &O,
    inputs: &Tensor<T>,
    targets: &[&O::Target],
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, NnetError> {
    let mut rng = crate::rng::stream(seed, 0, "grad-check");
    let picks: Vec<Vec<usize>> = net
        .params()
        .iter()
        .map(|p| {
            let mut idx = rand::seq::index::sample(&mut rng, p.len(), per_tensor.min(p.len())).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_elements(net, objective, inputs, targets, h, &picks)
}

fn check_elements<T: Real, O: Objective>(
    net: &Network<T>,
    objective: &O,
    inputs: &Tensor<T>,
    targets: &[&O::Target],
    h: f64,
    elements: &[Vec<usize>],
) -> Result<GradCheckReport, NnetError> {
    let mut net64: Network<f64> = net.cast();
    let x64: Tensor<f64> = inputs.cast();
    let (_, analytic) = gradients(&net64, objective, &x64, targets)?;
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, checked: 0 };
    for (ti, picks) in elements.iter().enumerate() {
        for &ei in picks {
            let orig = net64.params()[ti][ei];
            net64.params_mut()[ti][ei] = orig + h;
            let plus = batch_loss(objective, &net64.forward(&x64)?, targets, false).0;
            net64.params_mut()[ti][ei] = orig - h;
            let minus = batch_loss(objective, &net64.forward(&x64)?, targets, false).0;
            net64.params_mut()[ti][ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[ti][ei], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}
