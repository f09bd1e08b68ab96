use rand::Rng;

use crate::error::Result;
use crate::nn::{Binder, ParamStore};
use crate::tensor::{SparseMat, Tape, Tensor, Var};
use std::rc::Rc;

/// Glorot-uniform initialization over the given fan-in/fan-out.
pub fn glorot_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(data, shape).expect("shape/product checked by caller")
}

/// One graph convolution layer: `propagate(h) * W + b`.
///
/// Parameters live in the [`ParamStore`]; the layer itself only remembers
/// their names and dimensions.
#[derive(Debug, Clone)]
pub struct GraphConvLayer {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl GraphConvLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.register(&weight, glorot_uniform(rng, &[d_in, d_out], d_in, d_out))?;
        store.register(&bias, Tensor::zeros(&[d_out]))?;
        Ok(GraphConvLayer {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// `a_hat * h * W + b`; activation is applied by the caller.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        a_hat: &Rc<SparseMat>,
        h: Var,
    ) -> Result<Var> {
        let w = binder.bind(tape, store, &self.weight)?;
        let b = binder.bind(tape, store, &self.bias)?;
        let propagated = tape.spmm(a_hat, h)?;
        let projected = tape.matmul(propagated, w)?;
        tape.add_rows(projected, b)
    }
}

/// A conv2d + channel-bias layer with fixed stride and padding.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub kernel: String,
    pub bias: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let kernel = format!("{prefix}.kernel");
        let bias = format!("{prefix}.bias");
        let fan_in = c_in * ksize * ksize;
        let fan_out = c_out * ksize * ksize;
        store.register(
            &kernel,
            glorot_uniform(rng, &[c_out, c_in, ksize, ksize], fan_in, fan_out),
        )?;
        store.register(&bias, Tensor::zeros(&[c_out]))?;
        Ok(Conv2dLayer {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let k = binder.bind(tape, store, &self.kernel)?;
        let b = binder.bind(tape, store, &self.bias)?;
        let y = tape.conv2d(x, k, self.stride, self.padding)?;
        tape.add_channel_bias(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn graph_conv_identity_propagation() {
        // a_hat = I (self-loops only), W = I, b = 0 -> output == h
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let layer = GraphConvLayer::new(&mut store, &mut rng, "gc", 2, 2).unwrap();
        store
            .set("gc.weight", Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap())
            .unwrap();

        let mut a_hat = SparseMat::new(3);
        for i in 0..3 {
            a_hat.push(i, i, 1.0);
        }
        let a_hat = Rc::new(a_hat);

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let h = tape.leaf_parts(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2], false);
        let out = layer
            .forward(&mut tape, &mut binder, &store, &a_hat, h)
            .unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn graph_conv_two_node_symmetric_normalization() {
        // Fully connected 2-node graph with self-loops under symmetric
        // normalization: every a_hat entry is 0.5, so with W = I and h = I
        // both output rows are [0.5, 0.5].
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let layer = GraphConvLayer::new(&mut store, &mut rng, "gc", 2, 2).unwrap();
        store
            .set("gc.weight", Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap())
            .unwrap();

        let mut a_hat = SparseMat::new(2);
        for i in 0..2 {
            for j in 0..2 {
                a_hat.push(i, j, 0.5);
            }
        }
        let a_hat = Rc::new(a_hat);

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let h = tape.leaf_parts(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false);
        let out = layer
            .forward(&mut tape, &mut binder, &store, &a_hat, h)
            .unwrap();
        assert_eq!(tape.value(out), &[0.5, 0.5, 0.5, 0.5]);
    }
}
