#![allow(dead_code)]

use heritage_fusion::{Tape, Tensor, Var};
use proptest::prelude::*;

/// Central-difference gradient of a scalar function of several tensors,
/// evaluated element by element.
pub fn numeric_gradients(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, h: f64) -> Vec<Tensor> {
    let mut grads = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        for e in 0..inputs[i].len() {
            let mut up = inputs.to_vec();
            up[i].data_mut()[e] += h;
            let mut down = inputs.to_vec();
            down[i].data_mut()[e] -= h;
            g.data_mut()[e] = (f(&up) - f(&down)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Builds `op` on fresh leaves, contracts its output with fixed weights
/// into a scalar, and compares backprop against finite differences.
/// Returns the worst relative error.
pub fn fd_check(inputs: &[Tensor], op: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let forward = |xs: &[Tensor], tape: &mut Tape| -> (Var, Vec<Var>) {
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = op(tape, &vars);
        let (r, c) = tape.value(out).shape();
        // Distinct weights so that symmetric errors cannot cancel.
        let w: Vec<f64> = (0..r * c).map(|k| 0.3 + 0.7 * ((k * 7 + 3) % 11) as f64 / 11.0).collect();
        let w = tape.constant(Tensor::from_vec(r, c, w).unwrap());
        let prod = tape.mul(out, w).unwrap();
        (tape.sum(prod), vars)
    };
    let mut tape = Tape::new();
    let (loss, vars) = forward(inputs, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let value = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let (l, _) = forward(xs, &mut t);
        t.value(l).item().unwrap()
    };
    let numeric = numeric_gradients(inputs, &value, 1e-5);
    let mut worst: f64 = 0.0;
    for (v, n) in vars.iter().zip(&numeric) {
        let a = grads.wrt(*v).unwrap();
        for (x, y) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_err(*x, *y));
        }
    }
    worst
}

pub fn tensor(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
}

/// Values bounded away from zero (for ReLU kinks and divisors).
pub fn tensor_away_from_zero(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec((0.05f64..2.0, any::<bool>()), rows * cols).prop_map(move |d| {
        let data = d.into_iter().map(|(v, neg)| if neg { -v } else { v }).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    })
}

pub fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..5)
}

/// Which inputs a linear probe sees.
#[derive(Clone, Copy, Debug)]
pub enum View {
    Sensor,
    Image,
    Fused,
}

fn features(s: &heritage_fusion::dataset::Sample, view: View) -> Vec<f64> {
    let image = || s.image.clone().expect("probe data has all images");
    match view {
        View::Sensor => s.sensor.clone(),
        View::Image => image(),
        View::Fused => s.sensor.iter().copied().chain(image()).collect(),
    }
}

/// Multinomial logistic regression fitted by full-batch gradient descent
/// with a small ridge penalty, on features standardized with training
/// statistics.
pub struct LinearProbe {
    view: View,
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(train: &[heritage_fusion::dataset::Sample], view: View, classes: usize) -> Self {
        let raw: Vec<Vec<f64>> = train.iter().map(|s| features(s, view)).collect();
        let d = raw[0].len();
        let n = raw.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| raw.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| (raw.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
            .collect();
        let mut probe = Self { view, mean, scale, w: vec![vec![0.0; d]; classes], b: vec![0.0; classes] };
        let x: Vec<Vec<f64>> = raw.iter().map(|r| probe.normalize(r)).collect();
        let (lr, ridge) = (0.5, 1e-3);
        for _ in 0..400 {
            let mut gw = vec![vec![0.0; d]; classes];
            let mut gb = vec![0.0; classes];
            for (xi, s) in x.iter().zip(train) {
                let p = probe.proba_normalized(xi);
                for c in 0..classes {
                    let err = p[c] - f64::from(u8::from(c == s.label));
                    gb[c] += err / n;
                    for (g, v) in gw[c].iter_mut().zip(xi) {
                        *g += err * v / n;
                    }
                }
            }
            for c in 0..classes {
                probe.b[c] -= lr * gb[c];
                for (w, g) in probe.w[c].iter_mut().zip(&gw[c]) {
                    *w -= lr * (g + ridge * *w);
                }
            }
        }
        probe
    }

    fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn proba_normalized(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = self.w.iter().zip(&self.b).map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    }

    pub fn accuracy(&self, samples: &[heritage_fusion::dataset::Sample]) -> f64 {
        let correct = samples
            .iter()
            .filter(|s| {
                let p = self.proba_normalized(&self.normalize(&features(s, self.view)));
                let best = (0..p.len()).fold(0, |b, c| if p[c] > p[b] { c } else { b });
                best == s.label
            })
            .count();
        correct as f64 / samples.len() as f64
    }
}
