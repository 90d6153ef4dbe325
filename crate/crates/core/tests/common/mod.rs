#![allow(dead_code)]

use recall::nn::{Layer, Mode, Param, Sequential, Tensor};

/// `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Central difference of `f` with respect to `x[i]`.
pub fn central(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let keep = x[i];
    x[i] = keep + h;
    let up = f(x);
    x[i] = keep - h;
    let down = f(x);
    x[i] = keep;
    (up - down) / (2.0 * h)
}

/// Worst relative error between the parameter gradients left by `analytic`
/// and central differences of `loss`, over every parameter of `net`.
pub fn check_params<N>(
    net: &mut N,
    params: fn(&mut N) -> Vec<&mut Param<f64>>,
    mut analytic: impl FnMut(&mut N),
    mut loss: impl FnMut(&mut N) -> f64,
) -> f64 {
    analytic(net);
    let grads: Vec<Vec<f64>> = params(net).iter().map(|p| p.grad.clone()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let keep = params(net)[pi].value[i];
            params(net)[pi].value[i] = keep + h;
            let up = loss(net);
            params(net)[pi].value[i] = keep - h;
            let down = loss(net);
            params(net)[pi].value[i] = keep;
            worst = worst.max(rel_err(g[i], (up - down) / (2.0 * h)));
        }
    }
    worst
}

/// Sum of `w * y` for a fixed random `w`, so every output element matters.
pub fn probe(y: &Tensor<f64>, w: &[f64]) -> (f64, Tensor<f64>) {
    let v = y.data().iter().zip(w).map(|(a, b)| a * b).sum();
    (v, Tensor::from_vec(y.shape(), w[..y.len()].to_vec()).unwrap())
}

/// Worst relative error of a single layer's input and parameter gradients.
pub fn check_layer(layer: Layer<f64>, x: &Tensor<f64>, mode: Mode, w: &[f64]) -> f64 {
    let mut net = Sequential::new(vec![layer]);
    let analytic_dx = {
        net.zero_grad();
        let y = net.forward(x, mode).unwrap();
        let (_, dy) = probe(&y, w);
        net.backward(&dy).unwrap()
    };
    let mut worst = check_params(
        &mut net,
        |n| n.params_mut(),
        |n| {
            n.zero_grad();
            let y = n.forward(x, mode).unwrap();
            let (_, dy) = probe(&y, w);
            n.backward(&dy).unwrap();
        },
        |n| probe(&n.forward(x, mode).unwrap(), w).0,
    );
    let mut xs = x.data().to_vec();
    for i in 0..xs.len() {
        let num = central(&mut xs, i, 1e-5, |v| {
            let t = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            probe(&net.forward(&t, mode).unwrap(), w).0
        });
        worst = worst.max(rel_err(analytic_dx.data()[i], num));
    }
    worst
}
