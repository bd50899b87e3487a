//! Scalar forward pass and losses over the flat parameter layout, with a
//! central-difference gradient.

/// Plain loops over the documented parameter layout: per layer an `out x in`
/// row-major weight matrix followed by `out` biases.
pub fn reference_logits(sizes: &[usize], params: &[f64], input: &[f64]) -> Vec<f64> {
    let mut act = input.to_vec();
    let mut offset = 0;
    let layers = sizes.len() - 1;
    for (l, w) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut z = vec![0.0; fan_out];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut sum = params[offset + fan_in * fan_out + j];
            for (i, a) in act.iter().enumerate() {
                sum += params[offset + j * fan_in + i] * a;
            }
            *zj = if l + 1 == layers { sum } else { sum.tanh() };
        }
        offset += fan_in * fan_out + fan_out;
        act = z;
    }
    act
}

pub fn reference_bce(sizes: &[usize], params: &[f64], rows: &[(Vec<f64>, usize, bool)]) -> f64 {
    let total: f64 = rows
        .iter()
        .map(|(x, a, y)| {
            let z = reference_logits(sizes, params, x)[*a];
            let p = 1.0 / (1.0 + (-z).exp());
            if *y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / rows.len() as f64
}

pub fn reference_mse(sizes: &[usize], params: &[f64], rows: &[(Vec<f64>, usize, f64)]) -> f64 {
    let total: f64 = rows
        .iter()
        .map(|(x, a, y)| {
            let q = reference_logits(sizes, params, x)[*a];
            0.5 * (q - y).powi(2)
        })
        .sum();
    total / rows.len() as f64
}

pub fn central_difference(params: &[f64], loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    const H: f64 = 1e-5;
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|k| {
            probe[k] = params[k] + H;
            let up = loss(&probe);
            probe[k] = params[k] - H;
            let down = loss(&probe);
            probe[k] = params[k];
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Largest `|g - fd| / max(|g|, |fd|, 1e-6)` over all parameters.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(g, f)| (g - f).abs() / g.abs().max(f.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
