//! Minimal dense networks over a flat parameter vector, with hand-written
//! backpropagation and the Adam optimizer.

use nalgebra::DMatrix;
use rand::Rng;

use crate::rng::normal_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    /// Sigmoid-weighted linear unit, `x * sigmoid(x)`.
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    /// Derivative given the pre-activation and the activation output.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - post * post,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-pre).exp());
                s * (1.0 + pre * (1.0 - s))
            }
        }
    }
}

/// Location of one dense layer inside the flat parameter vector.
/// Weights are stored row-major as `out x in`, followed by `out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl LayerSpec {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerSpec>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(|v| v.as_slice()).unwrap_or(&self.input)
    }
}

impl Mlp {
    /// Zero-initialized network with layer widths `dims[0] -> dims[1] -> ...`.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        let mut layers = Vec::with_capacity(activations.len());
        let mut offset = 0;
        for w in dims.windows(2) {
            let spec = LayerSpec { inputs: w[0], outputs: w[1], offset };
            offset += w[0] * w[1] + w[1];
            layers.push(spec);
        }
        Self { layers, activations: activations.to_vec(), params: vec![0.0; offset] }
    }

    pub fn from_parts(dims: &[usize], activations: &[Activation], params: Vec<f64>) -> Option<Self> {
        let mut net = Self::zeros(dims, activations);
        if net.params.len() != params.len() {
            return None;
        }
        net.params = params;
        Some(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layer_weights(&self, k: usize) -> &[f64] {
        &self.params[self.layers[k].weight_range()]
    }

    pub fn layer_bias(&self, k: usize) -> &[f64] {
        &self.params[self.layers[k].bias_range()]
    }

    pub fn set_layer_weights(&mut self, k: usize, w: &[f64]) {
        let r = self.layers[k].weight_range();
        self.params[r].copy_from_slice(w);
    }

    pub fn set_layer_bias(&mut self, k: usize, b: &[f64]) {
        let r = self.layers[k].bias_range();
        self.params[r].copy_from_slice(b);
    }

    pub fn forward(&self, x: &[f64]) -> ForwardTrace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (k, spec) in self.layers.iter().enumerate() {
            let input = if k == 0 { x } else { post[k - 1].as_slice() };
            let z = affine(&self.params, spec, input);
            let act = self.activations[k];
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        ForwardTrace { input: x.to_vec(), pre, post }
    }

    /// Output only, without keeping intermediates.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (k, spec) in self.layers.iter().enumerate() {
            let act = self.activations[k];
            h = affine(&self.params, spec, &h).into_iter().map(|v| act.apply(v)).collect();
        }
        h
    }

    /// Reverse-mode pass.
    ///
    /// `post_grads[k]` is the loss gradient with respect to the output of layer
    /// `k` coming from outside the network (any layer may be tapped). Parameter
    /// gradients are accumulated into `param_grads` when given; the gradient with
    /// respect to the network input is returned.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        post_grads: &[Option<&[f64]>],
        mut param_grads: Option<&mut [f64]>,
    ) -> Vec<f64> {
        assert_eq!(post_grads.len(), self.layers.len());
        let mut carry: Option<Vec<f64>> = None;
        for k in (0..self.layers.len()).rev() {
            let spec = &self.layers[k];
            let mut g = match carry.take() {
                Some(c) => c,
                None => vec![0.0; spec.outputs],
            };
            if let Some(ext) = post_grads[k] {
                for (gi, e) in g.iter_mut().zip(ext) {
                    *gi += e;
                }
            }
            let act = self.activations[k];
            for (i, gi) in g.iter_mut().enumerate() {
                *gi *= act.derivative(trace.pre[k][i], trace.post[k][i]);
            }
            let input = if k == 0 { &trace.input } else { &trace.post[k - 1] };
            if let Some(pg) = param_grads.as_deref_mut() {
                let w = &mut pg[spec.weight_range()];
                for (o, go) in g.iter().enumerate() {
                    if *go == 0.0 {
                        continue;
                    }
                    let row = &mut w[o * spec.inputs..(o + 1) * spec.inputs];
                    for (wr, xi) in row.iter_mut().zip(input) {
                        *wr += go * xi;
                    }
                }
                let b = &mut pg[spec.bias_range()];
                for (bi, go) in b.iter_mut().zip(&g) {
                    *bi += go;
                }
            }
            let w = &self.params[spec.weight_range()];
            let mut gin = vec![0.0; spec.inputs];
            for (o, go) in g.iter().enumerate() {
                if *go == 0.0 {
                    continue;
                }
                let row = &w[o * spec.inputs..(o + 1) * spec.inputs];
                for (gi, wr) in gin.iter_mut().zip(row) {
                    *gi += go * wr;
                }
            }
            carry = Some(gin);
        }
        carry.unwrap_or_default()
    }
}

fn affine(params: &[f64], spec: &LayerSpec, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), spec.inputs);
    let w = &params[spec.weight_range()];
    let b = &params[spec.bias_range()];
    (0..spec.outputs)
        .map(|o| {
            let row = &w[o * spec.inputs..(o + 1) * spec.inputs];
            b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

/// Random (semi-)orthogonal `rows x cols` matrix scaled by `gain`, row-major.
///
/// Rows are orthonormal when `rows <= cols`, columns otherwise.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::from_vec(big, small, normal_vec(rng, big * small));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out[i * cols + j] = gain * v;
        }
    }
    out
}

/// Adam with bias correction over a flat parameter slice.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self { learning_rate, beta1, beta2, epsilon: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = seeded(3);
        let (r, c) = (8, 20);
        let w = orthogonal(&mut rng, r, c, 1.0);
        for i in 0..r {
            for j in 0..r {
                let dot: f64 = (0..c).map(|k| w[i * c + k] * w[j * c + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        let w = orthogonal(&mut rng, 12, 5, 2.0);
        for i in 0..5 {
            let n: f64 = (0..12).map(|k| w[k * 5 + i].powi(2)).sum();
            assert!((n - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(8);
        let mut net = Mlp::zeros(&[3, 5, 4, 2], &[Activation::Silu, Activation::Tanh, Activation::Identity]);
        let p = normal_vec(&mut rng, net.params().len());
        net.params_mut().copy_from_slice(&p);
        let x = vec![0.3, -0.8, 0.5];
        // loss = sum(c . out) + sum(d . hidden1)
        let c = [0.7, -1.3];
        let d = [0.2, 0.1, -0.4, 0.9];
        let loss = |n: &Mlp, x: &[f64]| {
            let t = n.forward(x);
            t.post[2].iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
                + t.post[1].iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()
        };
        let tr = net.forward(&x);
        let mut pg = vec![0.0; net.params().len()];
        let gx = net.backward(&tr, &[None, Some(&d), Some(&c)], Some(&mut pg));
        let h = 1e-6;
        for i in 0..pg.len() {
            let mut a = net.clone();
            a.params_mut()[i] += h;
            let mut b = net.clone();
            b.params_mut()[i] -= h;
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert!((fd - pg[i]).abs() < 1e-7, "param {i}: {fd} vs {}", pg[i]);
        }
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = Adam::new(2, 0.01, 0.9, 0.99);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 0.99).abs() < 1e-9);
    }
}
