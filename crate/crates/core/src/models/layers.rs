use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Multiplies `input` by a `[1, 1, H, W]` mask, then convolves. Masked
/// points therefore behave exactly like zero padding.
pub fn masked_conv(g: &mut Graph, input: Var, mask: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
    let masked = g.mul_broadcast(input, mask)?;
    g.conv2d(masked, weight, stride, pad)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let w = store.add(format!("{name}.w"), uniform(rng, &[cout, cin, k, k], cin * k * k));
        let b = store.add(format!("{name}.b"), Tensor::zeros([1, cout, 1, 1]));
        Self { w, b, stride, pad: if stride == 1 { k / 2 } else { 0 } }
    }

    /// Masked convolution plus bias.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mask: Var) -> Result<Var> {
        let y = masked_conv(g, x, mask, p.var(self.w), self.stride, self.pad)?;
        g.add_broadcast(y, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.add(format!("{name}.w"), uniform(rng, &[cin, cout], cin));
        let b = store.add(format!("{name}.b"), Tensor::zeros([1, cout]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add_broadcast(y, p.var(self.b))
    }
}

/// `x + conv(gelu(conv(x) [+ t]))`, masked at input and output.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    c1: Conv,
    c2: Conv,
    time: Option<Linear>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ch: usize, time_dim: Option<usize>) -> Self {
        Self {
            c1: Conv::new(store, rng, &format!("{name}.c1"), ch, ch, 3, 1),
            c2: Conv::new(store, rng, &format!("{name}.c2"), ch, ch, 3, 1),
            time: time_dim.map(|d| Linear::new(store, rng, &format!("{name}.t"), d, ch)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mask: Var, temb: Option<Var>) -> Result<Var> {
        let mut h = self.c1.forward(g, p, x, mask)?;
        if let (Some(lin), Some(t)) = (&self.time, temb) {
            let tc = lin.forward(g, p, t)?;
            let [n, c] = [g.shape(tc)[0], g.shape(tc)[1]];
            let tc = g.reshape(tc, &[n, c, 1, 1])?;
            h = g.add_broadcast(h, tc)?;
        }
        let h = g.gelu(h);
        let h = self.c2.forward(g, p, h, mask)?;
        let sum = g.add(x, h)?;
        g.mul_broadcast(sum, mask)
    }
}
