//! Parameterized building blocks over [`Graph`] operations.

use rand::Rng;

use super::{xavier_uniform, Bound, ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{ensure, Result};

/// Convolution whose weight (and optional bias) live in a [`ParamStore`]
/// under `<name>/w` and `<name>/b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl ConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel_volume();
        let w = xavier_uniform(&spec.weight_shape(), spec.in_channels * k, spec.out_channels * k, rng);
        let w = store.add(format!("{name}/w"), w)?;
        let b = if bias {
            Some(store.add(format!("{name}/b"), Tensor::zeros(&[spec.out_channels]))?)
        } else {
            None
        };
        Ok(Self { spec, w, b })
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv(x, p[self.w], self.b.map(|b| p[b]), &self.spec)
    }
}

/// Three chained 3D convolutions with kernels `1x1x3`, `1x3x1`, `3x1x1`, each
/// padded to preserve extent.
pub fn ddr_conv3d(g: &mut Graph, x: Var, w1: Var, w2: Var, w3: Var) -> Result<Var> {
    let mut h = x;
    for (stage, (w, k)) in [(w1, [1, 1, 3]), (w2, [1, 3, 1]), (w3, [3, 1, 1])].into_iter().enumerate() {
        let s = g.value(w).shape().to_vec();
        ensure!(
            s.len() == 5 && s[2..] == k,
            "DDR stage {} weight has shape {s:?}, expected [out, in, {}, {}, {}]",
            stage + 1,
            k[0],
            k[1],
            k[2]
        );
        let c = g.value(h).channels();
        ensure!(
            s[1] == c,
            "DDR stage {} expects {} input channels but receives {c}",
            stage + 1,
            s[1]
        );
        let spec = ConvSpec::new(s[1], s[0], &k).same_padding();
        h = g.conv(h, w, None, &spec)?;
    }
    Ok(h)
}

/// Hidden width of the attention MLP for `c` channels.
pub fn mlp_hidden(c: usize) -> usize {
    (c / 8).max(1)
}

/// `w_out relu(w_hidden x)` on a vector.
pub fn mlp2(g: &mut Graph, x: Var, w_hidden: Var, w_out: Var) -> Result<Var> {
    let c = g.value(x).numel();
    ensure!(c > 0, "MLP input is empty");
    let h = g.matvec(w_hidden, x)?;
    let h = g.relu(h);
    g.matvec(w_out, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv::conv_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn ddr_identity_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 4, 5, 6], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ws = Vec::new();
        for k in [[1, 1, 3], [1, 3, 1], [3, 1, 1]] {
            let mut w = Tensor::zeros(&[1, 1, k[0], k[1], k[2]]);
            w.data_mut()[1] = 1.0;
            ws.push(g.constant(w));
        }
        let y = ddr_conv3d(&mut g, xv, ws[0], ws[1], ws[2]).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ddr_separable_equals_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = random(&[1, 5, 4, 6], &mut rng);
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let w1 = g.constant(Tensor::new(vec![1, 1, 1, 1, 3], c.clone()).unwrap());
            let w2 = g.constant(Tensor::new(vec![1, 1, 1, 3, 1], b.clone()).unwrap());
            let w3 = g.constant(Tensor::new(vec![1, 1, 3, 1, 1], a.clone()).unwrap());
            let y = ddr_conv3d(&mut g, xv, w1, w2, w3).unwrap();
            let dense = Tensor::from_fn(&[1, 1, 3, 3, 3], |i| a[i / 9] * b[(i / 3) % 3] * c[i % 3]);
            let spec = ConvSpec::new(1, 1, &[3, 3, 3]).same_padding();
            let expect = conv_forward(&x, &dense, None, &spec).unwrap();
            assert!(g.value(y).max_abs_diff(&expect) < 1e-9);
        }
    }

    #[test]
    fn ddr_parameter_count() {
        let c = 4;
        let ddr: usize = [[1, 1, 3], [1, 3, 1], [3, 1, 1]]
            .iter()
            .map(|k| ConvSpec::new(c, c, k).weight_count())
            .sum();
        assert_eq!(ddr, 144);
        assert_eq!(ConvSpec::new(c, c, &[3, 3, 3]).weight_count(), 432);
    }

    #[test]
    fn ddr_channel_chain_checked() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let w1 = g.constant(Tensor::zeros(&[3, 2, 1, 1, 3]));
        let w2 = g.constant(Tensor::zeros(&[3, 4, 1, 3, 1]));
        let w3 = g.constant(Tensor::zeros(&[3, 3, 3, 1, 1]));
        let err = ddr_conv3d(&mut g, x, w1, w2, w3).unwrap_err();
        assert!(err.to_string().contains("stage 2"), "{err}");
    }

    #[test]
    fn mlp_hidden_sizes() {
        assert_eq!(mlp_hidden(8), 1);
        assert_eq!(mlp_hidden(4), 1);
        assert_eq!(mlp_hidden(16), 2);
    }

    #[test]
    fn mlp_matches_matrix_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[16], &mut rng);
        let wh = random(&[2, 16], &mut rng);
        let wo = random(&[16, 2], &mut rng);
        let mut g = Graph::new();
        let (xv, hv, ov) = (g.constant(x.clone()), g.constant(wh.clone()), g.constant(wo.clone()));
        let y = mlp2(&mut g, xv, hv, ov).unwrap();
        let h: Vec<f64> = (0..2)
            .map(|j| (0..16).map(|i| wh.data()[j * 16 + i] * x.data()[i]).sum::<f64>().max(0.0))
            .collect();
        for i in 0..16 {
            let e = wo.data()[i * 2] * h[0] + wo.data()[i * 2 + 1] * h[1];
            assert!((g.value(y).data()[i] - e).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let (xv, hv, ov) = (g.constant(x), g.constant(Tensor::zeros(&[2, 16])), g.constant(Tensor::zeros(&[16, 2])));
        let y = mlp2(&mut g, xv, hv, ov).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
