//! Full parameter set, batched forward pass and backpropagation through
//! encoders, grounding (or attention pooling), cosine similarity and InfoNCE.

use serde::{Deserialize, Serialize};

use crate::contrastive::{cosine_sim_matrix, cosine_sim_matrix_vjp, infonce, Temperature};
use crate::encoders::{attention_pool_traced, attention_pool_vjp, EncoderParams, EncoderTrace, PoolTrace};
use crate::error::{Error, Result};
use crate::fdt::{
    ground_backward, ground_traced, Codebook, GroundingOptions, GroundingTrace, Modality, NormalizerMode,
    ProjectionParams,
};
use crate::numkit::tensor::Tensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Which representation feeds the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Softmax,
    Sparsemax,
    Clip,
}

impl Mode {
    pub fn normalizer(self) -> Option<NormalizerMode> {
        match self {
            Mode::Softmax => Some(NormalizerMode::Softmax),
            Mode::Sparsemax => Some(NormalizerMode::Sparsemax),
            Mode::Clip => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Softmax => "softmax",
            Mode::Sparsemax => "sparsemax",
            Mode::Clip => "clip",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Mode::Softmax),
            "sparsemax" => Ok(Mode::Sparsemax),
            "clip" | "clip-baseline" => Ok(Mode::Clip),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Weight-decay group of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayGroup {
    Codebook,
    Weights,
    None,
}

/// Model architecture sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub fdt_dim: usize,
    pub codebook_size: usize,
}

/// Every trainable tensor. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub image_encoder: EncoderParams<T>,
    pub text_encoder: EncoderParams<T>,
    pub projection: ProjectionParams<T>,
    pub codebook: Codebook<T>,
    /// Shape `[1]`.
    pub log_tau: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    pub fn init(dims: &Dims, tau_init: f64, rng: &mut Rng) -> Self {
        let image_encoder = EncoderParams::init(dims.input_dim, dims.hidden_dim, dims.embed_dim, rng);
        let text_encoder = EncoderParams::init(dims.input_dim, dims.hidden_dim, dims.embed_dim, rng);
        let projection = ProjectionParams::init(dims.embed_dim, dims.fdt_dim, rng);
        let codebook = Codebook::init(dims.codebook_size, dims.fdt_dim, rng);
        let mut t = Temperature::new(T::lit(tau_init), true);
        t.clamp();
        Self {
            image_encoder,
            text_encoder,
            projection,
            codebook,
            log_tau: Tensor::scalar(t.log_tau),
        }
    }

    pub fn zeros(dims: &Dims) -> Self {
        Self {
            image_encoder: EncoderParams::zeros(dims.input_dim, dims.hidden_dim, dims.embed_dim),
            text_encoder: EncoderParams::zeros(dims.input_dim, dims.hidden_dim, dims.embed_dim),
            projection: ProjectionParams::zeros(dims.embed_dim, dims.fdt_dim),
            codebook: Codebook {
                tokens: Tensor::zeros(&[dims.codebook_size, dims.fdt_dim]),
            },
            log_tau: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn dims(&self) -> Dims {
        Dims {
            input_dim: self.image_encoder.hidden.input_dim(),
            embed_dim: self.image_encoder.embed_dim(),
            hidden_dim: self.image_encoder.hidden.output_dim(),
            fdt_dim: self.codebook.dim(),
            codebook_size: self.codebook.size(),
        }
    }

    pub fn temperature(&self, learnable: bool) -> Temperature<T> {
        Temperature {
            log_tau: self.log_tau.data()[0],
            learnable,
        }
    }

    pub fn encoder(&self, modality: Modality) -> &EncoderParams<T> {
        match modality {
            Modality::Image => &self.image_encoder,
            Modality::Text => &self.text_encoder,
        }
    }

    fn map(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        let mut out = self.clone();
        for ((_, _, dst), (_, _, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = f(src);
        }
        out
    }

    /// Named tensors in a fixed order with their decay groups.
    pub fn tensors(&self) -> Vec<(&'static str, DecayGroup, &Tensor<T>)> {
        use DecayGroup::*;
        vec![
            ("image_encoder.hidden.weight", Weights, &self.image_encoder.hidden.weight),
            ("image_encoder.hidden.bias", None, &self.image_encoder.hidden.bias),
            ("image_encoder.output.weight", Weights, &self.image_encoder.output.weight),
            ("image_encoder.output.bias", None, &self.image_encoder.output.bias),
            ("text_encoder.hidden.weight", Weights, &self.text_encoder.hidden.weight),
            ("text_encoder.hidden.bias", None, &self.text_encoder.hidden.bias),
            ("text_encoder.output.weight", Weights, &self.text_encoder.output.weight),
            ("text_encoder.output.bias", None, &self.text_encoder.output.bias),
            ("projection.image.weight", Weights, &self.projection.image.weight),
            ("projection.image.bias", None, &self.projection.image.bias),
            ("projection.text.weight", Weights, &self.projection.text.weight),
            ("projection.text.bias", None, &self.projection.text.bias),
            ("codebook", Codebook, &self.codebook.tokens),
            ("log_tau", None, &self.log_tau),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, DecayGroup, &mut Tensor<T>)> {
        use DecayGroup::*;
        vec![
            ("image_encoder.hidden.weight", Weights, &mut self.image_encoder.hidden.weight),
            ("image_encoder.hidden.bias", None, &mut self.image_encoder.hidden.bias),
            ("image_encoder.output.weight", Weights, &mut self.image_encoder.output.weight),
            ("image_encoder.output.bias", None, &mut self.image_encoder.output.bias),
            ("text_encoder.hidden.weight", Weights, &mut self.text_encoder.hidden.weight),
            ("text_encoder.hidden.bias", None, &mut self.text_encoder.hidden.bias),
            ("text_encoder.output.weight", Weights, &mut self.text_encoder.output.weight),
            ("text_encoder.output.bias", None, &mut self.text_encoder.output.bias),
            ("projection.image.weight", Weights, &mut self.projection.image.weight),
            ("projection.image.bias", None, &mut self.projection.image.bias),
            ("projection.text.weight", Weights, &mut self.projection.text.weight),
            ("projection.text.bias", None, &mut self.projection.text.bias),
            ("codebook", Codebook, &mut self.codebook.tokens),
            ("log_tau", None, &mut self.log_tau),
        ]
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, _, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    /// Flattened copy of all tensors in [`Params::tensors`] order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().into_iter().flat_map(|(_, _, t)| t.data().to_vec()).collect()
    }

    /// Inverse of [`Params::flatten`].
    pub fn unflatten(&mut self, flat: &[T]) {
        let mut offset = 0;
        for (_, _, t) in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }
}

/// Static choices of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions<T> {
    pub mode: Mode,
    pub scale: T,
    pub normalize: bool,
    pub tau_learnable: bool,
}

impl<T: Scalar> ForwardOptions<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            scale: T::one(),
            normalize: false,
            tau_learnable: true,
        }
    }

    pub fn grounding(&self) -> Option<GroundingOptions<T>> {
        self.mode.normalizer().map(|mode| GroundingOptions {
            mode,
            scale: self.scale,
            normalize: self.normalize,
        })
    }
}

/// Element inputs of one pair in model precision.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInputs<T> {
    pub patches: Tensor<T>,
    pub tokens: Tensor<T>,
}

enum HeadTrace<T> {
    Fdt(GroundingTrace<T>),
    Pool(Tensor<T>, PoolTrace<T>),
}

struct ModalityTrace<T> {
    encoder: EncoderTrace<T>,
    head: HeadTrace<T>,
}

/// Representation of one modality of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityOutput<T> {
    pub feature: Vec<T>,
    /// FDT weights over the codebook; `None` for the pooling baseline.
    pub weights: Option<Vec<T>>,
    pub support: Option<usize>,
}

fn forward_modality<T: Scalar>(
    params: &Params<T>,
    opts: &ForwardOptions<T>,
    modality: Modality,
    inputs: &Tensor<T>,
) -> Result<(ModalityOutput<T>, ModalityTrace<T>)> {
    let (embedded, encoder) = params.encoder(modality).forward_traced(inputs)?;
    match opts.grounding() {
        Some(g) => {
            let (feature, trace) = ground_traced(&embedded, params.projection.for_modality(modality), &params.codebook, &g, modality)?;
            let out = ModalityOutput {
                feature: feature.vector.into_data(),
                weights: Some(trace.weights.weights.probs.clone()),
                support: Some(trace.weights.weights.support.len()),
            };
            Ok((out, ModalityTrace { encoder, head: HeadTrace::Fdt(trace) }))
        }
        None => {
            if embedded.rows() == 0 {
                return Err(Error::Empty { op: "attention_pool" });
            }
            let (pooled, trace) = attention_pool_traced(&embedded);
            let out = ModalityOutput {
                feature: pooled.into_data(),
                weights: None,
                support: None,
            };
            Ok((out, ModalityTrace { encoder, head: HeadTrace::Pool(embedded, trace) }))
        }
    }
}

fn backward_modality<T: Scalar>(
    params: &Params<T>,
    opts: &ForwardOptions<T>,
    modality: Modality,
    trace: &ModalityTrace<T>,
    upstream: &[T],
    grads: &mut Params<T>,
) -> Result<()> {
    let g_embedded = match &trace.head {
        HeadTrace::Fdt(gt) => {
            let g = opts.grounding().expect("fdt trace implies grounding");
            let proj = params.projection.for_modality(modality);
            let Params { projection, codebook, .. } = grads;
            ground_backward(gt, proj, &params.codebook, &g, upstream, projection.for_modality_mut(modality), &mut codebook.tokens)?
        }
        HeadTrace::Pool(embedded, pt) => attention_pool_vjp(embedded, pt, upstream),
    };
    let grad_enc = match modality {
        Modality::Image => &mut grads.image_encoder,
        Modality::Text => &mut grads.text_encoder,
    };
    params.encoder(modality).backward(&trace.encoder, &g_embedded, grad_enc)?;
    Ok(())
}

/// Image and text representation of a single pair.
pub fn pair_outputs<T: Scalar>(
    params: &Params<T>,
    opts: &ForwardOptions<T>,
    pair: &PairInputs<T>,
) -> Result<(ModalityOutput<T>, ModalityOutput<T>)> {
    Ok((
        forward_modality(params, opts, Modality::Image, &pair.patches)?.0,
        forward_modality(params, opts, Modality::Text, &pair.tokens)?.0,
    ))
}

/// Representation of a single element set of one modality.
pub fn modality_output<T: Scalar>(
    params: &Params<T>,
    opts: &ForwardOptions<T>,
    modality: Modality,
    inputs: &Tensor<T>,
) -> Result<ModalityOutput<T>> {
    Ok(forward_modality(params, opts, modality, inputs)?.0)
}

/// Loss, gradients and batch statistics of one step.
#[derive(Clone, Debug)]
pub struct BatchResult<T> {
    pub loss: T,
    pub grads: Params<T>,
    /// Mean `|support| / C` over both modalities; 1 for dense heads.
    pub support_fraction: f64,
}

/// Forward and backward over a batch of pairs. Work on pairs is split into
/// `threads` contiguous chunks whose gradients are summed in chunk order, so
/// results are deterministic for a fixed thread count.
pub fn loss_and_grad<S: Scalar>(
    params: &Params<S>,
    opts: &ForwardOptions<S>,
    batch: &[&PairInputs<S>],
    threads: usize,
) -> Result<BatchResult<S>> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty { op: "loss_and_grad" });
    }
    let threads = threads.clamp(1, n);
    let chunk = n.div_ceil(threads);

    type Fwd<S> = (ModalityOutput<S>, ModalityTrace<S>, ModalityOutput<S>, ModalityTrace<S>);
    let forward_one = |p: &PairInputs<S>| -> Result<Fwd<S>> {
        let (io, it) = forward_modality(params, opts, Modality::Image, &p.patches)?;
        let (to, tt) = forward_modality(params, opts, Modality::Text, &p.tokens)?;
        Ok((io, it, to, tt))
    };
    let forwards: Vec<Fwd<S>> = if threads == 1 {
        batch.iter().map(|p| forward_one(p)).collect::<Result<_>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|c| scope.spawn(move || c.iter().map(|p| forward_one(p)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(n);
            for h in handles {
                all.extend(h.join().expect("forward worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };

    let dim = forwards[0].0.feature.len();
    let mut fv = Tensor::<S>::zeros(&[n, dim]);
    let mut ft = Tensor::<S>::zeros(&[n, dim]);
    let mut support_total = 0usize;
    let mut support_count = 0usize;
    for (i, (io, _, to, _)) in forwards.iter().enumerate() {
        fv.row_mut(i).copy_from_slice(&io.feature);
        ft.row_mut(i).copy_from_slice(&to.feature);
        for s in [io.support, to.support].into_iter().flatten() {
            support_total += s;
            support_count += 1;
        }
    }
    let support_fraction = if support_count == 0 {
        1.0
    } else {
        support_total as f64 / (support_count * params.codebook.size()) as f64
    };

    let sim = cosine_sim_matrix(&fv, &ft)?;
    let tau = params.temperature(opts.tau_learnable);
    let out = infonce(&sim, &tau);
    let (g_fv, g_ft) = cosine_sim_matrix_vjp(&fv, &ft, &out.grad_s)?;

    let backward_range = |start: usize, items: &[Fwd<S>]| -> Result<Params<S>> {
        let mut grads = params.zeros_like();
        for (k, (_, it, _, tt)) in items.iter().enumerate() {
            let i = start + k;
            backward_modality(params, opts, Modality::Image, it, g_fv.row(i), &mut grads)?;
            backward_modality(params, opts, Modality::Text, tt, g_ft.row(i), &mut grads)?;
        }
        Ok(grads)
    };
    let mut grads = if threads == 1 {
        backward_range(0, &forwards)?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = forwards
                .chunks(chunk)
                .enumerate()
                .map(|(ci, items)| {
                    let f = &backward_range;
                    scope.spawn(move || f(ci * chunk, items))
                })
                .collect();
            let mut total = params.zeros_like();
            for h in handles {
                total.add_assign(&h.join().expect("backward worker panicked")?);
            }
            Ok::<_, Error>(total)
        })?
    };
    grads.log_tau.data_mut()[0] = out.grad_log_tau;

    Ok(BatchResult {
        loss: out.loss,
        grads,
        support_fraction,
    })
}

/// Loss only, for finite-difference checks.
pub fn batch_loss<S: Scalar>(params: &Params<S>, opts: &ForwardOptions<S>, batch: &[&PairInputs<S>]) -> Result<S> {
    let mut fv = Vec::with_capacity(batch.len());
    let mut ft = Vec::with_capacity(batch.len());
    for p in batch {
        let (io, to) = pair_outputs(params, opts, p)?;
        fv.push(io.feature);
        ft.push(to.feature);
    }
    let fv = Tensor::from_rows(&fv)?;
    let ft = Tensor::from_rows(&ft)?;
    let sim = cosine_sim_matrix(&fv, &ft)?;
    Ok(infonce(&sim, &params.temperature(opts.tau_learnable)).loss)
}

/// Discrete state (argmax rows and sparsemax supports) of a batch forward
/// pass; the loss is smooth while this stays fixed.
pub fn batch_regime<S: Scalar>(params: &Params<S>, opts: &ForwardOptions<S>, batch: &[&PairInputs<S>]) -> Result<Vec<usize>> {
    let mut sig = Vec::new();
    for p in batch {
        for (m, x) in [(Modality::Image, &p.patches), (Modality::Text, &p.tokens)] {
            let (_, tr) = forward_modality(params, opts, m, x)?;
            if let HeadTrace::Fdt(g) = tr.head {
                sig.extend(g.weights.argmax_patch.iter().copied());
                sig.push(usize::MAX);
                sig.extend(g.weights.weights.support.iter().copied());
                sig.push(usize::MAX);
            }
        }
    }
    sig.push(params.temperature(opts.tau_learnable).is_free() as usize);
    Ok(sig)
}
