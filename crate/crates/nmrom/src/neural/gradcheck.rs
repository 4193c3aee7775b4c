//! Central finite-difference verification of reverse-mode gradients.

/// Compares analytic gradients against central differences of `loss`.
///
/// `params`/`set_param` expose the flattened parameter vector, `grads` the
/// analytic gradient at the unperturbed point. Returns the maximum guarded
/// relative error `|a - fd| / max(|a|, |fd|, 1)`.
pub fn gradient_check(
    params: &[f64],
    grads: &[f64],
    set_param: &mut dyn FnMut(usize, f64),
    loss: &mut dyn FnMut() -> f64,
    step: f64,
) -> f64 {
    assert_eq!(params.len(), grads.len());
    let mut max_err: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params[i];
        set_param(i, orig + step);
        let lp = loss();
        set_param(i, orig - step);
        let lm = loss();
        set_param(i, orig);
        let fd = (lp - lm) / (2.0 * step);
        let denom = grads[i].abs().max(fd.abs()).max(1.0);
        max_err = max_err.max((grads[i] - fd).abs() / denom);
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic_gradient_passes() {
        // f(p) = sum p_i^2, grad = 2p
        let params = vec![0.3, -1.2, 2.0];
        let grads: Vec<f64> = params.iter().map(|v| 2.0 * v).collect();
        let p = std::cell::RefCell::new(params.clone());
        let mut set_param = |i: usize, v: f64| p.borrow_mut()[i] = v;
        let mut loss = || p.borrow().iter().map(|v| v * v).sum::<f64>();
        let err = gradient_check(&params, &grads, &mut set_param, &mut loss, 1e-6);
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let params = vec![1.0, 2.0];
        let grads = vec![2.0, 5.0]; // second entry wrong (true 4.0)
        let p = std::cell::RefCell::new(params.clone());
        let mut set_param = |i: usize, v: f64| p.borrow_mut()[i] = v;
        let mut loss = || p.borrow().iter().map(|v| v * v).sum::<f64>();
        let err = gradient_check(&params, &grads, &mut set_param, &mut loss, 1e-6);
        assert!(err > 0.1, "error {err}");
    }
}
