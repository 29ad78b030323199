//! Retrieval recall, the weight-as-feature ablation, the completeness probe
//! and support statistics.

use std::str::FromStr;

use serde::Serialize;

use crate::contrastive::COSINE_EPS;
use crate::error::{Error, Result};
use crate::fdt::Modality;
use crate::model::{modality_output, pair_outputs, ForwardOptions, Mode, PairInputs, Params};
use crate::numkit::tensor::{dot, Tensor};
use crate::synthworld::{ProbeItem, RawPair};

/// Smallest pool accepted by [`evaluate_retrieval`].
pub const MIN_EVAL_POOL: usize = 10;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

pub type FeatureRows = Vec<Vec<f64>>;
/// `(image, matched text, partial texts)` features of one probe item.
pub type ProbeFeatures = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

/// Which vector represents an element set during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// FDT feature `wᵀC`.
    Fdt,
    /// Attention-pooled encoder output.
    Clip,
    /// Raw FDT weight vector.
    Weights,
}

impl FeatureSource {
    /// Feature path a model trained in `mode` uses.
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Clip => FeatureSource::Clip,
            _ => FeatureSource::Fdt,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSource::Fdt => "fdt",
            FeatureSource::Clip => "clip",
            FeatureSource::Weights => "weights",
        }
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fdt" => Ok(FeatureSource::Fdt),
            "clip" => Ok(FeatureSource::Clip),
            "weights" => Ok(FeatureSource::Weights),
            _ => Err(Error::Config(format!("unknown feature source `{s}` (fdt|clip|weights)"))),
        }
    }
}

/// Recalls in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub rsum: f64,
}

impl RetrievalMetrics {
    pub fn recalls(&self) -> [f64; 6] {
        [self.i2t_r1, self.i2t_r5, self.i2t_r10, self.t2i_r1, self.t2i_r5, self.t2i_r10]
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt().max(COSINE_EPS);
    let nb = dot(b, b).sqrt().max(COSINE_EPS);
    dot(a, b) / (na * nb)
}

/// Rank of the correct item `i` in row `i` of `sim`: entries strictly above
/// it count, equal entries count when their index is smaller.
fn rank_of_diagonal(sim: &Tensor<f64>, i: usize) -> usize {
    let row = sim.row(i);
    let target = row[i];
    row.iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < i))
        .count()
}

fn recalls(sim: &Tensor<f64>) -> [f64; 3] {
    let n = sim.rows();
    let ranks: Vec<usize> = (0..n).map(|i| rank_of_diagonal(sim, i)).collect();
    RECALL_KS.map(|k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
}

/// Bidirectional recall@{1,5,10} of matching row `i` of `images` to row `i`
/// of `texts` by cosine similarity.
pub fn retrieval_from_features(images: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<RetrievalMetrics> {
    let n = images.len();
    if n != texts.len() {
        return Err(Error::Shape {
            op: "retrieval",
            left: vec![n],
            right: vec![texts.len()],
        });
    }
    if n < MIN_EVAL_POOL {
        return Err(Error::TooLarge {
            op: "retrieval pool (minimum)",
            size: n,
            limit: MIN_EVAL_POOL,
        });
    }
    let mut sim = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            sim.set(i, j, cosine(&images[i], &texts[j]));
        }
    }
    let [i1, i5, i10] = recalls(&sim);
    let [t1, t5, t10] = recalls(&sim.transpose());
    Ok(RetrievalMetrics {
        i2t_r1: i1,
        i2t_r5: i5,
        i2t_r10: i10,
        t2i_r1: t1,
        t2i_r5: t5,
        t2i_r10: t10,
        rsum: i1 + i5 + i10 + t1 + t5 + t10,
    })
}

/// Forward options that produce `source` features from `params`.
fn source_options(base: &ForwardOptions<f64>, source: FeatureSource) -> Result<ForwardOptions<f64>> {
    let mut opts = *base;
    match source {
        FeatureSource::Clip => opts.mode = Mode::Clip,
        FeatureSource::Fdt | FeatureSource::Weights => {
            if base.mode == Mode::Clip {
                return Err(Error::Config(format!(
                    "feature source `{}` needs an FDT model (softmax or sparsemax)",
                    source.as_str()
                )));
            }
        }
    }
    Ok(opts)
}

fn pick(out: crate::model::ModalityOutput<f64>, source: FeatureSource) -> Vec<f64> {
    match source {
        FeatureSource::Weights => out.weights.expect("FDT path yields weights"),
        _ => out.feature,
    }
}

/// Image and text representations of every pair for `source`.
pub fn pair_features(
    params: &Params<f64>,
    opts: &ForwardOptions<f64>,
    pairs: &[PairInputs<f64>],
    source: FeatureSource,
) -> Result<(FeatureRows, FeatureRows)> {
    let opts = source_options(opts, source)?;
    let mut images = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (io, to) = pair_outputs(params, &opts, p)?;
        images.push(pick(io, source));
        texts.push(pick(to, source));
    }
    Ok((images, texts))
}

pub fn evaluate_retrieval(
    params: &Params<f64>,
    opts: &ForwardOptions<f64>,
    pairs: &[PairInputs<f64>],
    source: FeatureSource,
) -> Result<RetrievalMetrics> {
    let (images, texts) = pair_features(params, opts, pairs, source)?;
    retrieval_from_features(&images, &texts)
}

/// One image with its matched text and the partial texts.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeInputs {
    pub patches: Tensor<f64>,
    pub matched: Tensor<f64>,
    pub partials: Vec<Tensor<f64>>,
}

impl From<&ProbeItem> for ProbeInputs {
    fn from(item: &ProbeItem) -> Self {
        ProbeInputs {
            patches: item.image.patch_inputs.clone(),
            matched: item.matched_text.clone(),
            partials: item.partial_texts.iter().map(|(_, t)| t.clone()).collect(),
        }
    }
}

/// Fraction of (matched, partial) comparisons with
/// `cos(image, matched) > cos(image, partial)`; ties count as failures.
pub fn completeness_from_features(items: &[ProbeFeatures]) -> Result<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (image, matched, partials) in items {
        let s_matched = cosine(image, matched);
        for p in partials {
            total += 1;
            if s_matched > cosine(image, p) {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty { op: "evaluate_completeness" });
    }
    Ok(correct as f64 / total as f64)
}

/// Completeness probe using the model's own feature path.
pub fn evaluate_completeness(params: &Params<f64>, opts: &ForwardOptions<f64>, probe: &[ProbeInputs]) -> Result<f64> {
    let feats = probe
        .iter()
        .map(|item| {
            let image = modality_output(params, opts, Modality::Image, &item.patches)?.feature;
            let matched = modality_output(params, opts, Modality::Text, &item.matched)?.feature;
            let partials = item
                .partials
                .iter()
                .map(|t| Ok(modality_output(params, opts, Modality::Text, t)?.feature))
                .collect::<Result<Vec<_>>>()?;
            Ok((image, matched, partials))
        })
        .collect::<Result<Vec<_>>>()?;
    completeness_from_features(&feats)
}

/// Mean `|support| / C` over both modalities of every pair; `None` for the
/// pooling baseline.
pub fn mean_support_fraction(params: &Params<f64>, opts: &ForwardOptions<f64>, pairs: &[PairInputs<f64>]) -> Result<Option<f64>> {
    if opts.mode == Mode::Clip || pairs.is_empty() {
        return Ok(None);
    }
    let c = params.codebook.size() as f64;
    let mut sum = 0.0;
    for p in pairs {
        let (io, to) = pair_outputs(params, opts, p)?;
        for s in [io.support, to.support] {
            sum += s.expect("FDT path reports support") as f64 / c;
        }
    }
    Ok(Some(sum / (2 * pairs.len()) as f64))
}

pub fn pair_inputs(raw: &RawPair) -> PairInputs<f64> {
    PairInputs {
        patches: raw.patch_inputs.clone(),
        tokens: raw.token_inputs.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_vectors(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn identical_features_are_perfect() {
        let mut rng = Rng::new(3);
        let f = random_vectors(&mut rng, 20, 6);
        let m = retrieval_from_features(&f, &f).unwrap();
        assert_eq!(m.recalls(), [100.0; 6]);
        assert_eq!(m.rsum, 600.0);
    }

    #[test]
    fn rsum_is_sum_of_recalls() {
        let mut rng = Rng::new(4);
        let a = random_vectors(&mut rng, 40, 5);
        let b = random_vectors(&mut rng, 40, 5);
        let m = retrieval_from_features(&a, &b).unwrap();
        let s: f64 = m.recalls().iter().sum();
        assert_eq!(m.rsum, s);
    }

    #[test]
    fn random_features_r1_near_chance() {
        let n = 128;
        let seeds = 20;
        let mut hits = 0.0;
        for seed in 0..seeds {
            let mut rng = Rng::new(100 + seed);
            let a = random_vectors(&mut rng, n, 8);
            let b = random_vectors(&mut rng, n, 8);
            hits += retrieval_from_features(&a, &b).unwrap().i2t_r1 / 100.0 * n as f64;
        }
        let trials = (n * seeds as usize) as f64;
        let p = 1.0 / n as f64;
        let sd = (trials * p * (1.0 - p)).sqrt();
        assert!((hits - trials * p).abs() <= 3.0 * sd, "hits {hits}");
    }

    #[test]
    fn ties_resolve_by_index() {
        // All-equal similarities: only the first item is ranked first.
        let f = vec![vec![1.0, 0.0]; 10];
        let m = retrieval_from_features(&f, &f).unwrap();
        assert_eq!(m.i2t_r1, 10.0);
        assert_eq!(m.i2t_r5, 50.0);
        assert_eq!(m.i2t_r10, 100.0);
    }

    #[test]
    fn small_pool_rejected() {
        let f = vec![vec![1.0]; 9];
        assert!(retrieval_from_features(&f, &f).is_err());
    }

    #[test]
    fn completeness_ties_count_as_failures() {
        let v = vec![1.0, 2.0];
        let items = vec![(v.clone(), v.clone(), vec![v.clone(), v.clone()])];
        assert_eq!(completeness_from_features(&items).unwrap(), 0.0);
    }

    #[test]
    fn completeness_counts_each_partial() {
        let items = vec![(vec![1.0, 0.0], vec![1.0, 0.0], vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]])];
        assert!((completeness_from_features(&items).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn feature_source_parse() {
        assert_eq!("weights".parse::<FeatureSource>().unwrap(), FeatureSource::Weights);
        assert!("pixels".parse::<FeatureSource>().is_err());
        assert_eq!(FeatureSource::for_mode(Mode::Clip), FeatureSource::Clip);
    }
}
