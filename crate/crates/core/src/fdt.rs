//! Grounding of element embeddings onto a shared codebook of discrete tokens.
//!
//! Per modality: project elements into token space (affine + GELU), score
//! every token by its best-matching element (max over elements of the inner
//! product), normalize the scores onto the simplex, and emit the weighted sum
//! of codebook rows. Both modalities use the same codebook.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::encoders::{Affine, EncodedPair};
use crate::error::{Error, Result};
use crate::numkit::ops::{
    gelu, gelu_vjp, l2_normalize_rows, l2_normalize_rows_vjp, matmul, matmul_nt, matmul_tn,
    max_reduce_rows, weighted_sum_rows, weighted_sum_rows_vjp,
};
use crate::numkit::tensor::{dot, Tensor};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::simplex::{softmax, softmax_vjp, sparsemax, sparsemax_vjp_on_support, SimplexVector};

/// Guard for row normalization of projected elements and codebook rows.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizerMode {
    Softmax,
    Sparsemax,
}

/// Learnable token matrix, `C × d_fdt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub tokens: Tensor<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(tokens: Tensor<T>) -> Result<Self> {
        if !tokens.is_matrix() || tokens.rows() < 2 {
            return Err(Error::Shape {
                op: "codebook",
                left: tokens.shape().to_vec(),
                right: vec![2, tokens.cols()],
            });
        }
        if let Some(index) = tokens.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { tokens })
    }

    /// Entries i.i.d. `N(0, 1/d_fdt)`.
    pub fn init(size: usize, dim: usize, rng: &mut Rng) -> Self {
        let sd = 1.0 / (dim as f64).sqrt();
        let data = (0..size * dim).map(|_| T::lit(sd * rng.normal())).collect();
        Self {
            tokens: Tensor::from_parts(vec![size, dim], data).expect("sized"),
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn max_row_norm(&self) -> T {
        (0..self.size())
            .map(|i| dot(self.tokens.row(i), self.tokens.row(i)).sqrt())
            .fold(T::zero(), T::max)
    }
}

/// Separate projection layers for image patches and text tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<T> {
    pub image: Affine<T>,
    pub text: Affine<T>,
}

impl<T: Scalar> ProjectionParams<T> {
    pub fn init(embed_dim: usize, fdt_dim: usize, rng: &mut Rng) -> Self {
        Self {
            image: Affine::init(embed_dim, fdt_dim, rng),
            text: Affine::init(embed_dim, fdt_dim, rng),
        }
    }

    pub fn zeros(embed_dim: usize, fdt_dim: usize) -> Self {
        Self {
            image: Affine::zeros(embed_dim, fdt_dim),
            text: Affine::zeros(embed_dim, fdt_dim),
        }
    }

    pub fn for_modality(&self, modality: Modality) -> &Affine<T> {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn for_modality_mut(&mut self, modality: Modality) -> &mut Affine<T> {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }
}

/// How relevance scores are computed and normalized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundingOptions<T> {
    pub mode: NormalizerMode,
    /// Multiplies relevance before the normalizer.
    pub scale: T,
    /// L2-normalize projected elements and codebook rows before scoring.
    pub normalize: bool,
}

impl<T: Scalar> GroundingOptions<T> {
    pub fn new(mode: NormalizerMode) -> Self {
        Self {
            mode,
            scale: T::one(),
            normalize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FDTWeights<T> {
    pub weights: SimplexVector<T>,
    /// Unscaled max-pooled relevance per token.
    pub relevance: Vec<T>,
    /// Element row that attains each token's relevance.
    pub argmax_patch: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FDTFeature<T> {
    pub vector: Tensor<T>,
    pub modality: Modality,
}

/// Rowwise `gelu(x·w + b)`.
pub fn project_to_fdt<T: Scalar>(elements: &Tensor<T>, proj: &Affine<T>) -> Result<Tensor<T>> {
    Ok(gelu(&proj.forward(elements)?))
}

/// Token-by-element inner products, `n × C`.
pub fn relevance_scores<T: Scalar>(
    projected: &Tensor<T>,
    codebook: &Codebook<T>,
    normalize: bool,
) -> Result<Tensor<T>> {
    if normalize {
        let eps = T::lit(NORMALIZE_EPS);
        matmul_nt(
            &l2_normalize_rows(projected, eps),
            &l2_normalize_rows(&codebook.tokens, eps),
        )
    } else {
        matmul_nt(projected, &codebook.tokens)
    }
}

/// `r_i = max_j <p_j, c_i>` with the attaining element index per token.
pub fn relevance<T: Scalar>(
    projected: &Tensor<T>,
    codebook: &Codebook<T>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if projected.rows() == 0 {
        return Err(Error::Empty { op: "relevance" });
    }
    max_reduce_rows(&relevance_scores(projected, codebook, false)?)
}

pub fn fdt_weights<T: Scalar>(r: &[T], mode: NormalizerMode, scale: T) -> FDTWeights<T> {
    let scaled: Vec<T> = r.iter().map(|&v| v * scale).collect();
    let weights = match mode {
        NormalizerMode::Softmax => softmax(&scaled),
        NormalizerMode::Sparsemax => sparsemax(&scaled),
    };
    FDTWeights {
        weights,
        relevance: r.to_vec(),
        argmax_patch: Vec::new(),
    }
}

pub fn fdt_feature<T: Scalar>(
    w: &FDTWeights<T>,
    codebook: &Codebook<T>,
    modality: Modality,
) -> Result<FDTFeature<T>> {
    Ok(FDTFeature {
        vector: weighted_sum_rows(&w.weights.probs, &codebook.tokens)?,
        modality,
    })
}

/// Intermediate values of one modality's grounding pass.
#[derive(Clone, Debug)]
pub struct GroundingTrace<T> {
    pub elements: Tensor<T>,
    pub projected_pre: Tensor<T>,
    pub projected: Tensor<T>,
    pub weights: FDTWeights<T>,
}

/// Forward pass for one modality, keeping what the backward pass needs.
pub fn ground_traced<T: Scalar>(
    elements: &Tensor<T>,
    proj: &Affine<T>,
    codebook: &Codebook<T>,
    opts: &GroundingOptions<T>,
    modality: Modality,
) -> Result<(FDTFeature<T>, GroundingTrace<T>)> {
    if elements.rows() == 0 {
        return Err(Error::Empty { op: "ground" });
    }
    let projected_pre = proj.forward(elements)?;
    let projected = gelu(&projected_pre);
    let scores = relevance_scores(&projected, codebook, opts.normalize)?;
    let (r, argmax) = max_reduce_rows(&scores)?;
    let mut weights = fdt_weights(r.data(), opts.mode, opts.scale);
    weights.argmax_patch = argmax;
    let feature = fdt_feature(&weights, codebook, modality)?;
    Ok((
        feature,
        GroundingTrace {
            elements: elements.clone(),
            projected_pre,
            projected,
            weights,
        },
    ))
}

/// Backward pass of [`ground_traced`]. Accumulates into `grad_proj` and
/// `grad_codebook` and returns the gradient with respect to the elements.
pub fn ground_backward<T: Scalar>(
    trace: &GroundingTrace<T>,
    proj: &Affine<T>,
    codebook: &Codebook<T>,
    opts: &GroundingOptions<T>,
    upstream: &[T],
    grad_proj: &mut Affine<T>,
    grad_codebook: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let w = &trace.weights;
    let (g_w, g_tokens) = weighted_sum_rows_vjp(&w.weights.probs, &codebook.tokens, upstream);
    grad_codebook.add_assign(&g_tokens);

    let g_scaled = match opts.mode {
        NormalizerMode::Softmax => softmax_vjp(&w.weights.probs, &g_w),
        NormalizerMode::Sparsemax => sparsemax_vjp_on_support(&w.weights.support, &g_w),
    };
    let n = trace.projected.rows();
    let c = codebook.size();
    // Only the argmax element of each token column receives gradient.
    let mut g_scores = Tensor::zeros(&[n, c]);
    for (i, &row) in w.argmax_patch.iter().enumerate() {
        g_scores.set(row, i, g_scaled[i] * opts.scale);
    }

    let g_projected = if opts.normalize {
        let eps = T::lit(NORMALIZE_EPS);
        let q = l2_normalize_rows(&trace.projected, eps);
        let k = l2_normalize_rows(&codebook.tokens, eps);
        let g_q = matmul(&g_scores, &k)?;
        let g_k = matmul_tn(&g_scores, &q)?;
        grad_codebook.add_assign(&l2_normalize_rows_vjp(&codebook.tokens, eps, &g_k));
        l2_normalize_rows_vjp(&trace.projected, eps, &g_q)
    } else {
        grad_codebook.add_assign(&matmul_tn(&g_scores, &trace.projected)?);
        matmul(&g_scores, &codebook.tokens)?
    };
    let g_pre = gelu_vjp(&trace.projected_pre, &g_projected);
    proj.backward(&trace.elements, &g_pre, grad_proj)
}

/// Both modalities of one pair grounded onto the shared codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct FdtEncoding<T> {
    pub image_feature: FDTFeature<T>,
    pub text_feature: FDTFeature<T>,
    pub image_weights: FDTWeights<T>,
    pub text_weights: FDTWeights<T>,
}

pub fn encode_fdt<T: Scalar>(
    pair: &EncodedPair<T>,
    proj: &ProjectionParams<T>,
    codebook: &Codebook<T>,
    opts: &GroundingOptions<T>,
) -> Result<FdtEncoding<T>> {
    let (image_feature, it) = ground_traced(&pair.patches, &proj.image, codebook, opts, Modality::Image)?;
    let (text_feature, tt) = ground_traced(&pair.tokens, &proj.text, codebook, opts, Modality::Text)?;
    Ok(FdtEncoding {
        image_feature,
        text_feature,
        image_weights: it.weights,
        text_weights: tt.weights,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageHit {
    pub pair_id: usize,
    pub patch_idx: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextHit {
    pub pair_id: usize,
    pub token_idx: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCorrespondence {
    pub token_id: usize,
    pub image_hits: Vec<ImageHit>,
    pub text_hits: Vec<TextHit>,
}

/// `(pair_id, element_idx, score)` candidates ranked by score descending,
/// ties by `(pair_id, element_idx)` ascending.
fn top_k(mut hits: Vec<(usize, usize, f64)>, k: usize) -> Vec<(usize, usize, f64)> {
    hits.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    hits.truncate(k);
    hits
}

/// For every codebook token, the `k` elements with the highest
/// pre-max-pooling relevance in each modality across the whole dataset.
pub fn topk_correspondence<T: Scalar>(
    dataset: &[EncodedPair<T>],
    codebook: &Codebook<T>,
    proj: &ProjectionParams<T>,
    opts: &GroundingOptions<T>,
    k: usize,
) -> Result<Vec<TokenCorrespondence>> {
    if dataset.is_empty() {
        return Err(Error::Empty {
            op: "topk_correspondence",
        });
    }
    let c = codebook.size();
    let mut image: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); c];
    let mut text: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); c];
    for pair in dataset {
        for (modality, elements, bucket) in [
            (Modality::Image, &pair.patches, &mut image),
            (Modality::Text, &pair.tokens, &mut text),
        ] {
            let projected = project_to_fdt(elements, proj.for_modality(modality))?;
            let scores = relevance_scores(&projected, codebook, opts.normalize)?;
            for e in 0..scores.rows() {
                for (token, &s) in scores.row(e).iter().enumerate() {
                    bucket[token].push((pair.pair_id, e, s.to_f64_lossy()));
                }
            }
        }
    }
    Ok(image
        .into_iter()
        .zip(text)
        .enumerate()
        .map(|(token_id, (ih, th))| TokenCorrespondence {
            token_id,
            image_hits: top_k(ih, k)
                .into_iter()
                .map(|(pair_id, patch_idx, score)| ImageHit { pair_id, patch_idx, score })
                .collect(),
            text_hits: top_k(th, k)
                .into_iter()
                .map(|(pair_id, token_idx, score)| TextHit { pair_id, token_idx, score })
                .collect(),
        })
        .collect())
}
