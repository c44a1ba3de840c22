//! Fully connected layers and networks.

use crate::rng::Rng;
use crate::{Error, Real, Result};

/// Elementwise activation. The leaky slope is fixed at 0.01.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply<R: Real>(self, x: R) -> R {
        match self {
            Activation::Relu => {
                if x > R::zero() {
                    x
                } else {
                    R::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > R::zero() {
                    x
                } else {
                    R::of(0.01) * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative as a function of the pre-activation.
    fn derivative<R: Real>(self, pre: R) -> R {
        match self {
            Activation::Relu => {
                if pre > R::zero() {
                    R::one()
                } else {
                    R::zero()
                }
            }
            Activation::LeakyRelu => {
                if pre > R::zero() {
                    R::one()
                } else {
                    R::of(0.01)
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                R::one() - t * t
            }
            Activation::Linear => R::one(),
        }
    }
}

/// One affine layer with activation: `y = act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<R> {
    weight: Vec<R>, // row-major, out_dim x in_dim
    bias: Vec<R>,
    act: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl<R: Real> DenseLayer<R> {
    pub fn zeros(in_dim: usize, out_dim: usize, act: Activation) -> Self {
        DenseLayer {
            weight: vec![R::zero(); in_dim * out_dim],
            bias: vec![R::zero(); out_dim],
            act,
            in_dim,
            out_dim,
        }
    }

    /// He-uniform for relu/leaky layers, Xavier-uniform for tanh/linear.
    pub fn init(&mut self, rng: &mut Rng) {
        self.init_scaled(rng, 1.0);
    }

    /// Standard init with the weight limit scaled; RNG consumption is
    /// identical to `init` for any scale.
    pub fn init_scaled(&mut self, rng: &mut Rng, scale: f64) {
        let limit = match self.act {
            Activation::Relu | Activation::LeakyRelu => (6.0 / self.in_dim as f64).sqrt(),
            Activation::Tanh | Activation::Linear => {
                (6.0 / (self.in_dim + self.out_dim) as f64).sqrt()
            }
        };
        let limit = limit * scale;
        for w in &mut self.weight {
            *w = R::of(rng.uniform(-limit, limit));
        }
        for b in &mut self.bias {
            *b = R::zero();
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.act
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bias_mut(&mut self) -> &mut [R] {
        &mut self.bias
    }

    pub(crate) fn forward_into(&self, x: &[R], pre: &mut Vec<R>, out: &mut Vec<R>) {
        pre.clear();
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc = acc + *w * *xi;
            }
            pre.push(acc);
            out.push(self.act.apply(acc));
        }
    }

    /// Accumulate parameter gradients into `grads` (layout: W row-major then
    /// b) and return the gradient with respect to the input.
    pub(crate) fn backward_into(&self, input: &[R], pre: &[R], upstream: &[R], grads: &mut [R]) -> Vec<R> {
        debug_assert_eq!(grads.len(), self.param_count());
        let (gw, gb) = grads.split_at_mut(self.weight.len());
        let mut dx = vec![R::zero(); self.in_dim];
        for o in 0..self.out_dim {
            let dpre = upstream[o] * self.act.derivative(pre[o]);
            if dpre == R::zero() {
                continue;
            }
            gb[o] += dpre;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += dpre * input[i];
                dx[i] += row[i] * dpre;
            }
        }
        dx
    }

    pub fn write_params(&self, out: &mut Vec<R>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    pub fn read_params(&mut self, src: &[R]) {
        let (w, b) = src.split_at(self.weight.len());
        self.weight.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }
}

/// Cached activations of one forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct DenseCache<R> {
    inputs: Vec<Vec<R>>, // input to each layer
    pres: Vec<Vec<R>>,   // pre-activation of each layer
}

impl<R> DenseCache<R> {
    pub fn output_len(&self) -> usize {
        self.pres.last().map(|p| p.len()).unwrap_or(0)
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<R> {
    layers: Vec<DenseLayer<R>>,
}

impl<R: Real> DenseNet<R> {
    /// Build from a dimension chain `[in, h1, ..., out]` with `hidden`
    /// activation on all but the last layer and `output` on the last.
    pub fn from_dims(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("dense net needs at least an input and an output dim"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract("dense net dims must be positive"));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::zeros(w[0], w[1], if i == last { output } else { hidden }))
            .collect();
        Ok(DenseNet { layers })
    }

    pub fn init(&mut self, rng: &mut Rng) {
        for layer in &mut self.layers {
            layer.init(rng);
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim()).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn layers(&self) -> &[DenseLayer<R>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<R>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn forward(&self, x: &[R]) -> Result<(Vec<R>, DenseCache<R>)> {
        if x.len() != self.in_dim() {
            return Err(Error::dim(format!(
                "dense net input has {} entries (expected {})",
                x.len(),
                self.in_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::new();
            let mut out = Vec::new();
            layer.forward_into(&current, &mut pre, &mut out);
            inputs.push(std::mem::replace(&mut current, out));
            pres.push(pre);
        }
        Ok((current, DenseCache { inputs, pres }))
    }

    /// Forward pass without retaining the cache.
    pub fn output(&self, x: &[R]) -> Result<Vec<R>> {
        self.forward(x).map(|(out, _)| out)
    }

    /// Reverse pass: accumulates parameter gradients into `grads` (net
    /// layout: layer 0 W,b then layer 1 W,b ...) and returns dL/dx.
    pub fn backward(&self, cache: &DenseCache<R>, upstream: &[R], grads: &mut [R]) -> Result<Vec<R>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::contract("forward cache does not match this net"));
        }
        if upstream.len() != self.out_dim() {
            return Err(Error::dim(format!(
                "upstream gradient has {} entries (expected {})",
                upstream.len(),
                self.out_dim()
            )));
        }
        if grads.len() != self.param_count() {
            return Err(Error::dim("gradient buffer does not match parameter count"));
        }
        let mut delta = upstream.to_vec();
        let mut offset = self.param_count();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            offset -= layer.param_count();
            let slice = &mut grads[offset..offset + layer.param_count()];
            delta = layer.backward_into(&cache.inputs[i], &cache.pres[i], &delta, slice);
        }
        Ok(delta)
    }

    pub fn write_params(&self, out: &mut Vec<R>) {
        for layer in &self.layers {
            layer.write_params(out);
        }
    }

    pub fn read_params(&mut self, src: &[R]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::dim("parameter slice does not match net"));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.param_count();
            layer.read_params(&src[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, b: f64, act: Activation) -> DenseNet<f64> {
        let mut net = DenseNet::from_dims(&[1, 1], Activation::Relu, act).unwrap();
        net.read_params(&[w, b]).unwrap();
        net
    }

    #[test]
    fn scalar_linear_layer() {
        let net = single(2.0, 0.0, Activation::Linear);
        assert_eq!(net.output(&[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn relu_clips_negative_preactivations() {
        let net = single(1.0, 0.0, Activation::Relu);
        assert_eq!(net.output(&[-1.0]).unwrap(), vec![0.0]);
        assert_eq!(net.output(&[2.5]).unwrap(), vec![2.5]);
    }

    #[test]
    fn identity_init_passes_input_through() {
        let mut net = DenseNet::from_dims(&[3, 3], Activation::Relu, Activation::Linear).unwrap();
        let mut params = Vec::new();
        for o in 0..3 {
            for i in 0..3 {
                params.push(if i == o { 1.0 } else { 0.0 });
            }
        }
        params.extend([0.0; 3]);
        net.read_params(&params).unwrap();
        let x = [0.3, -0.7, 1.1];
        assert_eq!(net.output(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn backward_on_scalar_linear_net() {
        // loss = output, x = 3: dL/dw = 3, dL/db = 1, dL/dx = w = 2
        let net = single(2.0, 0.0, Activation::Linear);
        let (out, cache) = net.forward(&[3.0]).unwrap();
        assert_eq!(out, vec![6.0]);
        let mut grads = vec![0.0; net.param_count()];
        let dx = net.backward(&cache, &[1.0], &mut grads).unwrap();
        assert_eq!(grads, vec![3.0, 1.0]);
        assert_eq!(dx, vec![2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = DenseNet::from_dims(&[2, 4, 2], Activation::Tanh, Activation::Linear).unwrap();
        net.init(&mut crate::rng::Rng::seeded(1));
        let (_, cache) = net.forward(&[0.5, -0.5]).unwrap();
        let mut grads = vec![0.0; net.param_count()];
        let dx = net.backward(&cache, &[0.0, 0.0], &mut grads).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
        assert!(dx.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut net =
            DenseNet::from_dims(&[3, 5, 2], Activation::LeakyRelu, Activation::Linear).unwrap();
        net.init(&mut crate::rng::Rng::seeded(7));
        let x = [0.4, -1.2, 0.9];
        // loss = sum of outputs
        let loss = |net: &DenseNet<f64>| -> f64 { net.output(&x).unwrap().iter().sum() };

        let (_, cache) = net.forward(&x).unwrap();
        let mut analytic = vec![0.0; net.param_count()];
        net.backward(&cache, &[1.0, 1.0], &mut analytic).unwrap();

        let mut params = Vec::new();
        net.write_params(&mut params);
        let h = 1e-5;
        for idx in 0..params.len() {
            let mut probe = net.clone();
            let mut p = params.clone();
            p[idx] += h;
            probe.read_params(&p).unwrap();
            let up = loss(&probe);
            p[idx] -= 2.0 * h;
            probe.read_params(&p).unwrap();
            let down = loss(&probe);
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic[idx] - numeric).abs() / denom < 1e-6,
                "param {idx}: analytic {} vs numeric {numeric}",
                analytic[idx]
            );
        }
    }

    #[test]
    fn dimension_contracts() {
        let net = single(1.0, 0.0, Activation::Linear);
        assert!(net.output(&[1.0, 2.0]).is_err());
        let (_, cache) = net.forward(&[1.0]).unwrap();
        let mut grads = vec![0.0; 2];
        assert!(net.backward(&cache, &[1.0, 1.0], &mut grads).is_err());
        assert!(DenseNet::<f64>::from_dims(&[3], Activation::Relu, Activation::Linear).is_err());
    }
}
