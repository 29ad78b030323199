//! Self-checks run by the command line: the finite-difference suite over
//! every differentiable op and the composed losses, and the cross-check of
//! sparsemax against the exhaustive simplex oracle.

use serde::Serialize;

use crate::contrastive::{cosine_sim_matrix, cosine_sim_matrix_vjp, infonce, SimilarityMatrix, Temperature};
use crate::encoders::{attention_pool, attention_pool_traced, attention_pool_vjp, encode_elements, Affine, EncoderParams};
use crate::error::Result;
use crate::fdt::{ground_backward, ground_traced, Codebook, GroundingOptions, Modality, NormalizerMode};
use crate::model::{batch_loss, batch_regime, loss_and_grad, Dims, ForwardOptions, Mode, PairInputs, Params};
use crate::numkit::gradcheck::{finite_diff_check, regime_stable, DifferentiableMap, GradCheckReport};
use crate::numkit::ops::{
    affine, affine_vjp, gelu, gelu_vjp, l2_normalize_rows, l2_normalize_rows_vjp, matmul, matmul_vjp, max_reduce_rows,
    max_reduce_rows_vjp, weighted_sum_rows, weighted_sum_rows_vjp,
};
use crate::numkit::tensor::Tensor;
use crate::rng::Rng;
use crate::simplex::{simplex_project_oracle, softmax, softmax_vjp, sparsemax, sparsemax_vjp, ORACLE_MAX_DIM};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_POINTS: usize = 100;
pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const ORACLE_VECTORS: usize = 1000;

/// Draws beyond `points × this` without enough stable points fail the op.
const MAX_DRAWS_PER_POINT: usize = 20;

type Fwd = Box<dyn Fn(&Tensor<f64>) -> Tensor<f64>>;
type Vjp = Box<dyn Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>>;
type Regime = Box<dyn Fn(&Tensor<f64>) -> Vec<usize>>;
type Sampler = Box<dyn Fn(&mut Rng) -> Tensor<f64>>;

struct Op {
    name: String,
    forward: Fwd,
    vjp: Vjp,
    regime: Option<Regime>,
    sample: Sampler,
}

impl DifferentiableMap<f64> for Op {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        (self.forward)(x)
    }

    fn vjp(&self, x: &Tensor<f64>, upstream: &Tensor<f64>) -> Tensor<f64> {
        (self.vjp)(x, upstream)
    }

    fn regime(&self, x: &Tensor<f64>) -> Vec<usize> {
        self.regime.as_ref().map(|r| r(x)).unwrap_or_default()
    }
}

fn gaussian(rng: &mut Rng, n: usize, scale: f64) -> Tensor<f64> {
    Tensor::vector((0..n).map(|_| scale * rng.normal()).collect())
}

/// Splits a flat vector into tensors of the given shapes.
fn split(x: &Tensor<f64>, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::from_parts(s.to_vec(), x.data()[offset..offset + n].to_vec()).expect("sized split");
            offset += n;
            t
        })
        .collect()
}

fn concat(parts: &[&Tensor<f64>]) -> Tensor<f64> {
    Tensor::vector(parts.iter().flat_map(|t| t.data().to_vec()).collect())
}

fn flat_len(shapes: &[&[usize]]) -> usize {
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

fn elementary_ops() -> Vec<Op> {
    const MM: [&[usize]; 2] = [&[3, 4], &[4, 2]];
    const AF: [&[usize]; 3] = [&[3, 4], &[4, 2], &[2]];
    const WS: [&[usize]; 2] = [&[4], &[4, 3]];
    const CS: [&[usize]; 2] = [&[3, 4], &[3, 4]];
    let eps = crate::contrastive::COSINE_EPS;
    vec![
        Op {
            name: "matmul".into(),
            forward: Box::new(|x| {
                let p = split(x, &MM);
                matmul(&p[0], &p[1]).expect("shapes")
            }),
            vjp: Box::new(|x, g| {
                let p = split(x, &MM);
                let (ga, gb) = matmul_vjp(&p[0], &p[1], g).expect("shapes");
                concat(&[&ga, &gb])
            }),
            regime: None,
            sample: Box::new(|rng| gaussian(rng, flat_len(&MM), 1.0)),
        },
        Op {
            name: "affine".into(),
            forward: Box::new(|x| {
                let p = split(x, &AF);
                affine(&p[0], &p[1], &p[2]).expect("shapes")
            }),
            vjp: Box::new(|x, g| {
                let p = split(x, &AF);
                let (gx, gw, gb) = affine_vjp(&p[0], &p[1], g).expect("shapes");
                concat(&[&gx, &gw, &gb])
            }),
            regime: None,
            sample: Box::new(|rng| gaussian(rng, flat_len(&AF), 1.0)),
        },
        Op {
            name: "gelu".into(),
            forward: Box::new(gelu),
            vjp: Box::new(gelu_vjp),
            regime: None,
            sample: Box::new(|rng| gaussian(rng, 12, 2.0)),
        },
        Op {
            name: "l2_normalize_rows".into(),
            forward: Box::new(move |x| l2_normalize_rows(&x.clone().reshaped(vec![3, 4]).expect("12"), eps).reshaped(vec![12]).expect("12")),
            vjp: Box::new(move |x, g| {
                let x = x.clone().reshaped(vec![3, 4]).expect("12");
                let g = g.clone().reshaped(vec![3, 4]).expect("12");
                l2_normalize_rows_vjp(&x, eps, &g).reshaped(vec![12]).expect("12")
            }),
            regime: None,
            sample: Box::new(|rng| gaussian(rng, 12, 1.0)),
        },
        Op {
            name: "max_reduce_rows".into(),
            forward: Box::new(|x| max_reduce_rows(&x.clone().reshaped(vec![4, 3]).expect("12")).expect("non-empty").0),
            vjp: Box::new(|x, g| {
                let (_, arg) = max_reduce_rows(&x.clone().reshaped(vec![4, 3]).expect("12")).expect("non-empty");
                max_reduce_rows_vjp(4, &arg, g).reshaped(vec![12]).expect("12")
            }),
            regime: Some(Box::new(|x| max_reduce_rows(&x.clone().reshaped(vec![4, 3]).expect("12")).expect("non-empty").1)),
            sample: Box::new(|rng| gaussian(rng, 12, 1.0)),
        },
        Op {
            name: "weighted_sum_rows".into(),
            forward: Box::new(|x| {
                let p = split(x, &WS);
                weighted_sum_rows(p[0].data(), &p[1]).expect("shapes")
            }),
            vjp: Box::new(|x, g| {
                let p = split(x, &WS);
                let (gw, gm) = weighted_sum_rows_vjp(p[0].data(), &p[1], g.data());
                concat(&[&Tensor::vector(gw), &gm])
            }),
            regime: None,
            sample: Box::new(|rng| gaussian(rng, flat_len(&WS), 1.0)),
        },
        Op {
            name: "softmax".into(),
            forward: Box::new(|x| Tensor::vector(softmax(x.data()).probs)),
            vjp: Box::new(|x, g| Tensor::vector(softmax_vjp(&softmax(x.data()).probs, g.data()))),
            regime: None,
            sample: Box::new(|rng| gaussian(rng, 8, 2.0)),
        },
        Op {
            name: "sparsemax".into(),
            forward: Box::new(|x| Tensor::vector(sparsemax(x.data()).probs)),
            vjp: Box::new(|x, g| Tensor::vector(sparsemax_vjp(x.data(), g.data()))),
            regime: Some(Box::new(|x| sparsemax(x.data()).support)),
            sample: Box::new(|rng| gaussian(rng, 8, 1.0)),
        },
        Op {
            name: "attention_pool".into(),
            forward: Box::new(|x| attention_pool(&x.clone().reshaped(vec![4, 3]).expect("12"))),
            vjp: Box::new(|x, g| {
                let x = x.clone().reshaped(vec![4, 3]).expect("12");
                let (_, tr) = attention_pool_traced(&x);
                attention_pool_vjp(&x, &tr, g.data()).reshaped(vec![12]).expect("12")
            }),
            regime: None,
            sample: Box::new(|rng| gaussian(rng, 12, 1.0)),
        },
        Op {
            name: "cosine_sim_matrix".into(),
            forward: Box::new(|x| {
                let p = split(x, &CS);
                cosine_sim_matrix(&p[0], &p[1]).expect("shapes").s
            }),
            vjp: Box::new(|x, g| {
                let p = split(x, &CS);
                let (gv, gt) = cosine_sim_matrix_vjp(&p[0], &p[1], g).expect("shapes");
                concat(&[&gv, &gt])
            }),
            regime: None,
            sample: Box::new(|rng| gaussian(rng, flat_len(&CS), 1.0)),
        },
        Op {
            // Point layout: 4×4 similarities, then log τ.
            name: "infonce".into(),
            forward: Box::new(|x| {
                let p = split(x, &[&[4, 4], &[1]]);
                let tau = Temperature { log_tau: p[1].data()[0], learnable: true };
                Tensor::scalar(infonce(&SimilarityMatrix { s: p[0].clone() }, &tau).loss)
            }),
            vjp: Box::new(|x, g| {
                let p = split(x, &[&[4, 4], &[1]]);
                let tau = Temperature { log_tau: p[1].data()[0], learnable: true };
                let out = infonce(&SimilarityMatrix { s: p[0].clone() }, &tau);
                let u = g.data()[0];
                concat(&[&out.grad_s.scaled(u), &Tensor::vector(vec![u * out.grad_log_tau])])
            }),
            regime: Some(Box::new(|x| {
                let tau = Temperature { log_tau: x.data()[16], learnable: true };
                vec![tau.is_free() as usize]
            })),
            sample: Box::new(|rng| {
                let mut x = gaussian(rng, 17, 0.5);
                x.data_mut()[16] = 0.07f64.ln() + 0.5 * rng.normal();
                x
            }),
        },
    ]
}

/// Encoder MLP and FDT grounding with respect to every input and parameter.
fn module_ops() -> Vec<Op> {
    const ENC: [&[usize]; 5] = [&[3, 5], &[5, 8], &[8], &[8, 4], &[4]];
    let mut ops = vec![Op {
        name: "encoder".into(),
        forward: Box::new(|x| {
            let p = split(x, &ENC);
            let enc = EncoderParams {
                hidden: Affine { weight: p[1].clone(), bias: p[2].clone() },
                output: Affine { weight: p[3].clone(), bias: p[4].clone() },
            };
            encode_elements(&p[0], &enc).expect("shapes")
        }),
        vjp: Box::new(|x, g| {
            let p = split(x, &ENC);
            let enc = EncoderParams {
                hidden: Affine { weight: p[1].clone(), bias: p[2].clone() },
                output: Affine { weight: p[3].clone(), bias: p[4].clone() },
            };
            let (_, tr) = enc.forward_traced(&p[0]).expect("shapes");
            let mut grad = EncoderParams::zeros(5, 8, 4);
            let gx = enc.backward(&tr, g, &mut grad).expect("shapes");
            concat(&[&gx, &grad.hidden.weight, &grad.hidden.bias, &grad.output.weight, &grad.output.bias])
        }),
        regime: None,
        sample: Box::new(|rng| gaussian(rng, flat_len(&ENC), 0.7)),
    }];

    // Elements 3×4, projection 4×3 + 3, codebook 6×3.
    const GR: [&[usize]; 4] = [&[3, 4], &[4, 3], &[3], &[6, 3]];
    for mode in [NormalizerMode::Softmax, NormalizerMode::Sparsemax] {
        for normalize in [false, true] {
            let opts = GroundingOptions { mode, scale: 1.5, normalize };
            let run = move |x: &Tensor<f64>| {
                let p = split(x, &GR);
                let proj = Affine { weight: p[1].clone(), bias: p[2].clone() };
                let cb = Codebook { tokens: p[3].clone() };
                let (f, tr) = ground_traced(&p[0], &proj, &cb, &opts, Modality::Image).expect("shapes");
                (p, proj, cb, f, tr)
            };
            ops.push(Op {
                name: format!("ground[{mode:?}{}]", if normalize { ",normalized" } else { "" }).to_lowercase(),
                forward: Box::new(move |x| run(x).3.vector),
                vjp: Box::new(move |x, g| {
                    let (p, proj, cb, _, tr) = run(x);
                    let mut gp = Affine::zeros(4, 3);
                    let mut gc = Tensor::zeros(p[3].shape());
                    let ge = ground_backward(&tr, &proj, &cb, &opts, g.data(), &mut gp, &mut gc).expect("shapes");
                    concat(&[&ge, &gp.weight, &gp.bias, &gc])
                }),
                regime: Some(Box::new(move |x| {
                    let tr = run(x).4;
                    let mut sig = tr.weights.argmax_patch.clone();
                    sig.push(usize::MAX);
                    sig.extend(tr.weights.weights.support.iter().copied());
                    sig
                })),
                sample: Box::new(|rng| gaussian(rng, flat_len(&GR), 1.0)),
            });
        }
    }
    ops
}

/// Full InfoNCE loss through encoders, head and temperature, with respect to
/// the flattened parameter vector; the batch is fixed per op.
fn loss_ops() -> Vec<Op> {
    let dims = Dims { input_dim: 4, embed_dim: 3, hidden_dim: 5, fdt_dim: 3, codebook_size: 6 };
    let mut data_rng = Rng::new(0x0062_6174_6368);
    let batch: Vec<PairInputs<f64>> = (0..3)
        .map(|i| PairInputs {
            patches: gaussian(&mut data_rng, (2 + i) * 4, 1.0).reshaped(vec![2 + i, 4]).expect("sized"),
            tokens: gaussian(&mut data_rng, (3 - i % 2) * 4, 1.0).reshaped(vec![3 - i % 2, 4]).expect("sized"),
        })
        .collect();
    let batch = std::rc::Rc::new(batch);
    let template = std::rc::Rc::new(Params::<f64>::zeros(&dims));

    let mut ops = Vec::new();
    for (mode, normalize) in [(Mode::Sparsemax, true), (Mode::Sparsemax, false), (Mode::Softmax, true), (Mode::Clip, false)] {
        let opts = ForwardOptions { mode, scale: 1.0, normalize, tau_learnable: true };
        let unpack = {
            let template = template.clone();
            move |x: &Tensor<f64>| {
                let mut p = (*template).clone();
                p.unflatten(x.data());
                p
            }
        };
        let (u1, u2, u3) = (unpack.clone(), unpack.clone(), unpack);
        let (b1, b2, b3) = (batch.clone(), batch.clone(), batch.clone());
        ops.push(Op {
            name: format!("loss[{}{}]", mode.as_str(), if normalize { ",normalized" } else { "" }),
            forward: Box::new(move |x| {
                let refs: Vec<&PairInputs<f64>> = b1.iter().collect();
                Tensor::scalar(batch_loss(&u1(x), &opts, &refs).expect("batch"))
            }),
            vjp: Box::new(move |x, g| {
                let refs: Vec<&PairInputs<f64>> = b2.iter().collect();
                let out = loss_and_grad(&u2(x), &opts, &refs, 1).expect("batch");
                Tensor::vector(out.grads.flatten()).scaled(g.data()[0])
            }),
            regime: Some(Box::new(move |x| {
                let refs: Vec<&PairInputs<f64>> = b3.iter().collect();
                batch_regime(&u3(x), &opts, &refs).expect("batch")
            })),
            sample: Box::new(move |rng| {
                let mut p = Params::init(&dims, 0.07, rng);
                p.log_tau.data_mut()[0] += 0.3 * rng.normal();
                Tensor::vector(p.flatten())
            }),
        });
    }
    ops
}

fn check_op(op: &Op, points: usize, tol: f64, rng: &mut Rng) -> GradCheckReport {
    let mut reports = Vec::with_capacity(points);
    let mut draws = 0;
    while reports.len() < points && draws < points * MAX_DRAWS_PER_POINT {
        draws += 1;
        let x = (op.sample)(rng);
        if regime_stable(op, &x) {
            reports.push(finite_diff_check(op, &x, tol));
        }
    }
    let mut merged = GradCheckReport::merge(op.name(), tol, &reports);
    if reports.len() < points {
        merged.passed = false;
    }
    merged
}

/// Checks every op's VJP, and the composed losses, at `points` regime-stable
/// random points each.
pub fn gradcheck_suite(seed: u64, points: usize) -> Vec<GradCheckReport> {
    let mut rng = Rng::stream(seed, 0x6763);
    elementary_ops()
        .into_iter()
        .chain(module_ops())
        .chain(loss_ops())
        .map(|op| check_op(&op, points, GRADCHECK_TOLERANCE, &mut rng))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub vectors: usize,
    pub min_dim: usize,
    pub max_dim: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Sort-threshold sparsemax against the exhaustive oracle on `count` random
/// vectors of dimension 2..=16 and mixed scales.
pub fn oracle_check(seed: u64, count: usize) -> Result<OracleReport> {
    let mut rng = Rng::stream(seed, 0x6f72_6163_6c65);
    let mut max_abs_error = 0.0f64;
    for _ in 0..count {
        let k = rng.range_inclusive(2, ORACLE_MAX_DIM);
        let scale = 10f64.powf(rng.uniform_in(-1.0, 1.0));
        let r: Vec<f64> = (0..k).map(|_| scale * rng.normal()).collect();
        let fast = sparsemax(&r);
        let oracle = simplex_project_oracle(&r)?;
        for (a, b) in fast.probs.iter().zip(&oracle.probs) {
            max_abs_error = max_abs_error.max((a - b).abs());
        }
    }
    Ok(OracleReport {
        vectors: count,
        min_dim: 2,
        max_dim: ORACLE_MAX_DIM,
        max_abs_error,
        tolerance: ORACLE_TOLERANCE,
        passed: max_abs_error <= ORACLE_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_few_points() {
        let reports = gradcheck_suite(3, 5);
        assert!(reports.len() >= 17);
        for r in &reports {
            assert!(r.passed, "{r:?}");
            assert_eq!(r.point_count, 5);
        }
    }

    #[test]
    fn wrong_vjp_is_caught() {
        let op = Op {
            name: "bad".into(),
            forward: Box::new(gelu),
            vjp: Box::new(|_, g| g.clone()),
            regime: None,
            sample: Box::new(|rng| gaussian(rng, 4, 2.0)),
        };
        assert!(!check_op(&op, 3, GRADCHECK_TOLERANCE, &mut Rng::new(1)).passed);
    }

    #[test]
    fn oracle_agrees() {
        let r = oracle_check(1, 100).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
