//! Toy per-element encoders and the attention-pooling baseline aggregation.

use crate::error::Result;
use crate::numkit::ops::{affine, affine_vjp, gelu, gelu_vjp};
use crate::numkit::tensor::{dot, Tensor};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::simplex::{softmax, softmax_vjp};

/// One fully connected layer: `y = x·weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Uniform `±1/√input` weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| T::lit(rng.uniform_in(-bound, bound)))
            .collect();
        Self {
            weight: Tensor::from_parts(vec![input, output], data).expect("sized"),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        affine(x, &self.weight, &self.bias)
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(&self, x: &Tensor<T>, upstream: &Tensor<T>, grad: &mut Affine<T>) -> Result<Tensor<T>> {
        let (gx, gw, gb) = affine_vjp(x, &self.weight, upstream)?;
        grad.weight.add_assign(&gw);
        grad.bias.add_assign(&gb);
        Ok(gx)
    }
}

/// Two-layer MLP applied independently to every element of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub hidden: Affine<T>,
    pub output: Affine<T>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    pub input: Tensor<T>,
    pub hidden_pre: Tensor<T>,
    pub hidden: Tensor<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// `input_dim → hidden_dim → embed_dim`.
    pub fn init(input_dim: usize, hidden_dim: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Affine::init(input_dim, hidden_dim, rng),
            output: Affine::init(hidden_dim, embed_dim, rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, embed_dim: usize) -> Self {
        Self {
            hidden: Affine::zeros(input_dim, hidden_dim),
            output: Affine::zeros(hidden_dim, embed_dim),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn forward_traced(&self, raw: &Tensor<T>) -> Result<(Tensor<T>, EncoderTrace<T>)> {
        let hidden_pre = self.hidden.forward(raw)?;
        let hidden = gelu(&hidden_pre);
        let out = self.output.forward(&hidden)?;
        Ok((
            out,
            EncoderTrace {
                input: raw.clone(),
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn backward(
        &self,
        trace: &EncoderTrace<T>,
        upstream: &Tensor<T>,
        grad: &mut EncoderParams<T>,
    ) -> Result<Tensor<T>> {
        let g_hidden = self.output.backward(&trace.hidden, upstream, &mut grad.output)?;
        let g_pre = gelu_vjp(&trace.hidden_pre, &g_hidden);
        self.hidden.backward(&trace.input, &g_pre, &mut grad.hidden)
    }
}

/// Rowwise `affine → gelu → affine`.
pub fn encode_elements<T: Scalar>(raw: &Tensor<T>, params: &EncoderParams<T>) -> Result<Tensor<T>> {
    params.forward_traced(raw).map(|(out, _)| out)
}

/// One image-text pair after encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair<T> {
    pub patches: Tensor<T>,
    pub tokens: Tensor<T>,
    pub pair_id: usize,
}

/// Trace of [`attention_pool`].
#[derive(Clone, Debug)]
pub struct PoolTrace<T> {
    pub query: Vec<T>,
    pub weights: Vec<T>,
}

/// Attention pooling with the row mean as query:
/// `w = softmax_i <mean, f_i>`, output `Σ w_i f_i`.
pub fn attention_pool_traced<T: Scalar>(features: &Tensor<T>) -> (Tensor<T>, PoolTrace<T>) {
    let (n, d) = (features.rows(), features.cols());
    assert!(n >= 1, "attention_pool needs at least one row");
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut query = vec![T::zero(); d];
    for i in 0..n {
        for (q, &v) in query.iter_mut().zip(features.row(i)) {
            *q += v * inv_n;
        }
    }
    let scores: Vec<T> = (0..n).map(|i| dot(&query, features.row(i))).collect();
    let weights = softmax(&scores).probs;
    let mut out = vec![T::zero(); d];
    for (i, &w) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(features.row(i)) {
            *o += w * v;
        }
    }
    (Tensor::vector(out), PoolTrace { query, weights })
}

pub fn attention_pool<T: Scalar>(features: &Tensor<T>) -> Tensor<T> {
    attention_pool_traced(features).0
}

pub fn attention_pool_vjp<T: Scalar>(
    features: &Tensor<T>,
    trace: &PoolTrace<T>,
    upstream: &[T],
) -> Tensor<T> {
    let (n, d) = (features.rows(), features.cols());
    let mut grad = Tensor::zeros(&[n, d]);
    // Direct path through the weighted sum.
    let g_w: Vec<T> = (0..n).map(|i| dot(upstream, features.row(i))).collect();
    for i in 0..n {
        let wi = trace.weights[i];
        for (g, &u) in grad.row_mut(i).iter_mut().zip(upstream) {
            *g = wi * u;
        }
    }
    // Through the scores <query, f_i>.
    let g_scores = softmax_vjp(&trace.weights, &g_w);
    let mut g_query = vec![T::zero(); d];
    for i in 0..n {
        let gs = g_scores[i];
        for (gq, &v) in g_query.iter_mut().zip(features.row(i)) {
            *gq += gs * v;
        }
        for (g, &q) in grad.row_mut(i).iter_mut().zip(&trace.query) {
            *g += gs * q;
        }
    }
    // Through the mean query.
    let inv_n = T::one() / T::from_usize_lossy(n);
    for i in 0..n {
        for (g, &gq) in grad.row_mut(i).iter_mut().zip(&g_query) {
            *g += gq * inv_n;
        }
    }
    grad
}

/// Baseline pair representation: attention pooling on both modalities.
pub fn clip_pair_features<T: Scalar>(pair: &EncodedPair<T>) -> (Tensor<T>, Tensor<T>) {
    (attention_pool(&pair.patches), attention_pool(&pair.tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::gradcheck::{finite_diff_check, FnMap};

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_parts(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn encoder(seed: u64) -> EncoderParams<f64> {
        let mut rng = Rng::new(seed);
        let mut p = EncoderParams::init(5, 8, 4, &mut rng);
        p.hidden.bias = Tensor::vector((0..8).map(|_| 0.1 * rng.normal()).collect());
        p.output.bias = Tensor::vector((0..4).map(|_| 0.1 * rng.normal()).collect());
        p
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = Rng::new(1);
        let p = EncoderParams::<f64>::init(5, 8, 4, &mut rng);
        let out = encode_elements(&Tensor::zeros(&[3, 5]), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_and_permutation_consistency() {
        let p = encoder(2);
        let mut rng = Rng::new(3);
        let x = random(&mut rng, 4, 5);
        let all = encode_elements(&x, &p).unwrap();
        for i in 0..4 {
            let single = Tensor::from_parts(vec![1, 5], x.row(i).to_vec()).unwrap();
            assert_eq!(encode_elements(&single, &p).unwrap().data(), all.row(i));
        }
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let outp = encode_elements(&xp, &p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(outp.row(k), all.row(i));
        }
        assert!(encode_elements(&random(&mut rng, 2, 3), &p).is_err());
    }

    #[test]
    fn pool_examples() {
        let same = Tensor::<f64>::from_f64_rows(&[&[1.0, -2.0], &[1.0, -2.0], &[1.0, -2.0]]).unwrap();
        let out: Tensor<f64> = attention_pool(&same);
        assert!((out.data()[0] - 1.0).abs() < 1e-15 && (out.data()[1] + 2.0).abs() < 1e-15);
        // f_g = [0.5, 0.5]; both dots equal 0.5 → uniform weights.
        let e = Tensor::<f64>::from_f64_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(attention_pool(&e).data(), &[0.5, 0.5]);
    }

    #[test]
    fn pool_is_convex_and_permutation_invariant() {
        let mut rng = Rng::new(4);
        let x = random(&mut rng, 5, 3);
        let (out, trace) = attention_pool_traced(&x);
        let s: f64 = trace.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12 && trace.weights.iter().all(|&w| w >= 0.0));
        let rev = Tensor::from_rows(&(0..5).rev().map(|i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let out2 = attention_pool(&rev);
        for (a, b) in out.data().iter().zip(out2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_pair_features_cases() {
        let p = Tensor::<f64>::from_f64_rows(&[&[1.0, 2.0]]).unwrap();
        let t = Tensor::from_f64_rows(&[&[-3.0, 0.5]]).unwrap();
        let pair = EncodedPair { patches: p.clone(), tokens: t.clone(), pair_id: 0 };
        let (fv, ft) = clip_pair_features(&pair);
        assert_eq!(fv.data(), p.data());
        assert_eq!(ft.data(), t.data());
        let swapped = EncodedPair { patches: t, tokens: p, pair_id: 0 };
        let (sv, st) = clip_pair_features(&swapped);
        assert_eq!((sv, st), (ft, fv));
    }

    #[test]
    fn pool_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let x = random(&mut rng, 4, 3);
            let map = FnMap {
                name: "attention_pool".into(),
                forward: |x: &Tensor<f64>| attention_pool(x),
                vjp: |x: &Tensor<f64>, g: &Tensor<f64>| {
                    let (_, tr) = attention_pool_traced(x);
                    attention_pool_vjp(x, &tr, g.data())
                },
            };
            assert!(finite_diff_check(&map, &x, 1e-4).passed);
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let p = encoder(5);
        let mut rng = Rng::new(6);
        let x = random(&mut rng, 3, 5);
        let map = FnMap {
            name: "encoder".into(),
            forward: |x: &Tensor<f64>| encode_elements(x, &p).unwrap(),
            vjp: |x: &Tensor<f64>, g: &Tensor<f64>| {
                let (_, tr) = p.forward_traced(x).unwrap();
                let mut grad = EncoderParams::zeros(5, 8, 4);
                p.backward(&tr, g, &mut grad).unwrap()
            },
        };
        assert!(finite_diff_check(&map, &x, 1e-6).passed);
    }
}
