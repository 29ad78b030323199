//! Synthetic concept world: latent concepts with one emitter vector per
//! modality, noisy element sampling, completeness probes and concept-recovery
//! scoring against the known ground truth.

use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::fdt::{project_to_fdt, relevance_scores, Codebook, Modality, NORMALIZE_EPS};
use crate::model::Params;
use crate::numkit::ops::max_reduce_rows;
use crate::numkit::tensor::Tensor;
use crate::rng::Rng;

/// Emitter regeneration attempts before giving up on the separation invariant.
pub const MAX_REJECTIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptWorld {
    pub k_true: usize,
    pub input_dim: usize,
    /// `k_true × input_dim`.
    pub image_emitters: Tensor<f64>,
    /// `k_true × input_dim`.
    pub text_emitters: Tensor<f64>,
    pub noise_sigma: f64,
    pub distractor_rate: f64,
    /// Per-pair concept amplitude is drawn from `[1 − j, 1 + j]` and shared by
    /// both modalities of the pair.
    pub salience_jitter: f64,
    pub rng_seed: u64,
}

/// Concept id of one element, or a distractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementLabel {
    Concept(usize),
    Distractor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawPair {
    pub patch_inputs: Tensor<f64>,
    pub token_inputs: Tensor<f64>,
    /// Sorted concept ids present in both modalities.
    pub concept_set: Vec<usize>,
    /// Amplitude of each concept in `concept_set`, same order.
    pub saliences: Vec<f64>,
    pub patch_labels: Vec<ElementLabel>,
    pub token_labels: Vec<ElementLabel>,
}

/// Element-count ranges used when sampling pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingRanges {
    pub concepts_per_pair: RangeInclusive<usize>,
    pub elements_per_concept: RangeInclusive<usize>,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        Self {
            concepts_per_pair: 2..=4,
            elements_per_concept: 1..=3,
        }
    }
}

/// An image with one fully matched text and one partial text per concept.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeItem {
    pub image: RawPair,
    pub matched_text: Tensor<f64>,
    /// `(omitted concept, token inputs without it)`.
    pub partial_texts: Vec<(usize, Tensor<f64>)>,
}

fn min_pairwise_distance(m: &Tensor<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            let d: f64 = m
                .row(i)
                .iter()
                .zip(m.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_parts(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect())
        .expect("sized")
}

impl ConceptWorld {
    /// Smallest pairwise emitter distance over both modalities.
    pub fn min_separation(&self) -> f64 {
        min_pairwise_distance(&self.image_emitters).min(min_pairwise_distance(&self.text_emitters))
    }
}

/// Emitters are i.i.d. standard normal, redrawn until every pair of emitter
/// rows (per modality) is farther apart than `4·noise_sigma`.
pub fn generate_world(
    seed: u64,
    k_true: usize,
    input_dim: usize,
    noise_sigma: f64,
    distractor_rate: f64,
    salience_jitter: f64,
) -> Result<ConceptWorld> {
    if k_true < 1 || input_dim < k_true {
        return Err(Error::Config(format!(
            "world needs 1 <= k_true <= input_dim, got k_true={k_true}, input_dim={input_dim}"
        )));
    }
    if !(0.0..=1.0).contains(&distractor_rate) {
        return Err(Error::Config(format!("distractor_rate {distractor_rate} outside [0, 1]")));
    }
    if !(0.0..1.0).contains(&salience_jitter) || noise_sigma < 0.0 {
        return Err(Error::Config(format!(
            "need noise_sigma >= 0 and salience_jitter in [0, 1), got {noise_sigma}, {salience_jitter}"
        )));
    }
    let mut rng = Rng::stream(seed, 0x0077_6f72_6c64);
    for _ in 0..MAX_REJECTIONS {
        let world = ConceptWorld {
            k_true,
            input_dim,
            image_emitters: gaussian_matrix(&mut rng, k_true, input_dim),
            text_emitters: gaussian_matrix(&mut rng, k_true, input_dim),
            noise_sigma,
            distractor_rate,
            salience_jitter,
            rng_seed: seed,
        };
        if world.min_separation() > 4.0 * noise_sigma {
            return Ok(world);
        }
    }
    Err(Error::Config(format!(
        "emitter separation > 4·noise_sigma = {} not reached after {MAX_REJECTIONS} draws",
        4.0 * noise_sigma
    )))
}

fn check_ranges(ranges: &SamplingRanges, min_concepts: usize) -> Result<()> {
    let c = &ranges.concepts_per_pair;
    let e = &ranges.elements_per_concept;
    if c.is_empty() || e.is_empty() || *c.start() < min_concepts || *e.start() < 1 {
        return Err(Error::Config(format!(
            "invalid sampling ranges: concepts {c:?} (min {min_concepts}), elements {e:?} (min 1)"
        )));
    }
    Ok(())
}

/// Emits the elements of one modality for the given concepts and amplitudes.
/// Distractors (unit-variance noise) are added per concept element with
/// probability `distractor_rate`; rows are shuffled.
fn emit(
    world: &ConceptWorld,
    emitters: &Tensor<f64>,
    concepts: &[usize],
    saliences: &[f64],
    elements: &RangeInclusive<usize>,
    rng: &mut Rng,
) -> (Tensor<f64>, Vec<ElementLabel>) {
    let d = world.input_dim;
    let mut rows: Vec<(Vec<f64>, ElementLabel)> = Vec::new();
    for (&c, &a) in concepts.iter().zip(saliences) {
        let count = rng.range_inclusive(*elements.start(), *elements.end());
        for _ in 0..count {
            let row = emitters
                .row(c)
                .iter()
                .map(|&e| a * e + world.noise_sigma * rng.normal())
                .collect();
            rows.push((row, ElementLabel::Concept(c)));
        }
    }
    let concept_rows = rows.len();
    for _ in 0..concept_rows {
        if rng.bernoulli(world.distractor_rate) {
            let row = (0..d).map(|_| rng.normal()).collect();
            rows.push((row, ElementLabel::Distractor));
        }
    }
    rng.shuffle(&mut rows);
    let labels = rows.iter().map(|(_, l)| *l).collect();
    let data: Vec<f64> = rows.into_iter().flat_map(|(r, _)| r).collect();
    let n = data.len() / d;
    (Tensor::from_parts(vec![n, d], data).expect("sized"), labels)
}

fn draw_concepts(world: &ConceptWorld, ranges: &SamplingRanges, rng: &mut Rng) -> (Vec<usize>, Vec<f64>) {
    let hi = (*ranges.concepts_per_pair.end()).min(world.k_true);
    let lo = (*ranges.concepts_per_pair.start()).min(hi);
    let count = rng.range_inclusive(lo, hi);
    let mut concepts = rng.sample_indices(world.k_true, count);
    concepts.sort_unstable();
    let j = world.salience_jitter;
    let saliences = concepts
        .iter()
        .map(|_| if j > 0.0 { rng.uniform_in(1.0 - j, 1.0 + j) } else { 1.0 })
        .collect();
    (concepts, saliences)
}

pub fn sample_pair(world: &ConceptWorld, ranges: &SamplingRanges, rng: &mut Rng) -> Result<RawPair> {
    check_ranges(ranges, 1)?;
    let (concept_set, saliences) = draw_concepts(world, ranges, rng);
    let e = &ranges.elements_per_concept;
    let (patch_inputs, patch_labels) = emit(world, &world.image_emitters, &concept_set, &saliences, e, rng);
    let (token_inputs, token_labels) = emit(world, &world.text_emitters, &concept_set, &saliences, e, rng);
    Ok(RawPair {
        patch_inputs,
        token_inputs,
        concept_set,
        saliences,
        patch_labels,
        token_labels,
    })
}

/// `count` pairs from a dedicated stream of `seed`.
pub fn sample_dataset(world: &ConceptWorld, ranges: &SamplingRanges, count: usize, seed: u64) -> Result<Vec<RawPair>> {
    let mut rng = Rng::stream(seed, 0x6461_7461);
    (0..count).map(|_| sample_pair(world, ranges, &mut rng)).collect()
}

/// Completeness probe: each image is paired with a text covering all of its
/// concepts and, for every concept, a text that omits exactly that concept.
/// Every text is emitted with fresh noise. Images carry at least two
/// concepts so that every partial text is non-empty.
pub fn make_probe_set(
    world: &ConceptWorld,
    ranges: &SamplingRanges,
    n_items: usize,
    seed: u64,
) -> Result<Vec<ProbeItem>> {
    if n_items == 0 {
        return Err(Error::Config("probe set needs at least one item".into()));
    }
    if world.k_true < 2 {
        return Err(Error::Config("probe set needs at least two concepts".into()));
    }
    let probe_ranges = SamplingRanges {
        concepts_per_pair: (*ranges.concepts_per_pair.start()).max(2)..=(*ranges.concepts_per_pair.end()).max(2),
        elements_per_concept: ranges.elements_per_concept.clone(),
    };
    check_ranges(&probe_ranges, 2)?;
    let mut rng = Rng::stream(seed, 0x0070_726f_6265);
    let e = &probe_ranges.elements_per_concept;
    (0..n_items)
        .map(|_| {
            let image = sample_pair(world, &probe_ranges, &mut rng)?;
            let (matched_text, _) = emit(world, &world.text_emitters, &image.concept_set, &image.saliences, e, &mut rng);
            let partial_texts = image
                .concept_set
                .iter()
                .enumerate()
                .map(|(skip, &omitted)| {
                    let (concepts, sal): (Vec<usize>, Vec<f64>) = image
                        .concept_set
                        .iter()
                        .zip(&image.saliences)
                        .enumerate()
                        .filter(|(i, _)| *i != skip)
                        .map(|(_, (&c, &s))| (c, s))
                        .unzip();
                    let (t, _) = emit(world, &world.text_emitters, &concepts, &sal, e, &mut rng);
                    (omitted, t)
                })
                .collect();
            Ok(ProbeItem {
                image,
                matched_text,
                partial_texts,
            })
        })
        .collect()
}

/// Top-1 relevance token of every clean single-concept input, per modality.
pub fn concept_top_tokens(params: &Params<f64>, codebook: &Codebook<f64>, normalize: bool, world: &ConceptWorld) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut image_top = Vec::with_capacity(world.k_true);
    let mut text_top = Vec::with_capacity(world.k_true);
    for k in 0..world.k_true {
        for (m, out) in [(Modality::Image, &mut image_top), (Modality::Text, &mut text_top)] {
            let projected = projected_emitter(params, world, m, k)?;
            let (r, _) = max_reduce_rows(&relevance_scores(&projected, codebook, normalize)?)?;
            let (_, top) = max_reduce_rows(&r.reshaped(vec![codebook.size(), 1])?)?;
            out.push(top[0]);
        }
    }
    Ok((image_top, text_top))
}

/// Projection of concept `k`'s clean emitter in `modality`, one `1 × d_fdt` row.
fn projected_emitter(params: &Params<f64>, world: &ConceptWorld, modality: Modality, k: usize) -> Result<Tensor<f64>> {
    let emitters = match modality {
        Modality::Image => &world.image_emitters,
        Modality::Text => &world.text_emitters,
    };
    let raw = Tensor::vector(emitters.row(k).to_vec()).reshaped(vec![1, world.input_dim])?;
    let embedded = params.encoder(modality).forward_traced(&raw)?.0;
    project_to_fdt(&embedded, params.projection.for_modality(modality))
}

/// Codebook whose row `k` is the sum of the unit-normalized image and text
/// projections of concept `k`. A single-concept world gets a second, negated
/// row so the codebook keeps two tokens.
pub fn oracle_codebook(params: &Params<f64>, world: &ConceptWorld) -> Result<Codebook<f64>> {
    let mut rows = Vec::with_capacity(world.k_true.max(2));
    for k in 0..world.k_true {
        let mut row = vec![0.0; params.codebook.dim()];
        for m in [Modality::Image, Modality::Text] {
            let p = projected_emitter(params, world, m, k)?;
            let norm = p.norm().max(NORMALIZE_EPS);
            for (r, v) in row.iter_mut().zip(p.data()) {
                *r += v / norm;
            }
        }
        rows.push(row);
    }
    if rows.len() == 1 {
        rows.push(rows[0].iter().map(|v| -v).collect());
    }
    Codebook::new(Tensor::from_rows(&rows)?)
}

/// Fraction of concepts whose image and text forms share a top-1 token that
/// no other concept claims in either modality.
pub fn recovery_from_tops(image_top: &[usize], text_top: &[usize]) -> f64 {
    let k = image_top.len();
    if k == 0 {
        return 0.0;
    }
    let recovered = (0..k)
        .filter(|&c| {
            let tok = image_top[c];
            tok == text_top[c] && (0..k).all(|o| o == c || (image_top[o] != tok && text_top[o] != tok))
        })
        .count();
    recovered as f64 / k as f64
}

pub fn concept_recovery_score(params: &Params<f64>, normalize: bool, world: &ConceptWorld) -> Result<f64> {
    let (i, t) = concept_top_tokens(params, &params.codebook, normalize, world)?;
    Ok(recovery_from_tops(&i, &t))
}

/// Null distribution of the recovery score: each trial replaces the codebook
/// with a fresh `N(0, 1/d_fdt)` draw and randomly permutes the text-side
/// concept labels.
pub fn recovery_permutation_baseline(
    params: &Params<f64>,
    normalize: bool,
    world: &ConceptWorld,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = Rng::stream(seed, 0x6e75_6c6c);
    let (c, d) = (params.codebook.size(), params.codebook.dim());
    (0..trials)
        .map(|_| {
            let cb = Codebook::init(c, d, &mut rng);
            let (image_top, text_top) = concept_top_tokens(params, &cb, normalize, world)?;
            let mut perm: Vec<usize> = (0..world.k_true).collect();
            rng.shuffle(&mut perm);
            let permuted: Vec<usize> = perm.iter().map(|&p| text_top[p]).collect();
            Ok(recovery_from_tops(&image_top, &permuted))
        })
        .collect()
}

/// Nearest-rank percentile (`q` in `[0, 1]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    fn world(seed: u64) -> ConceptWorld {
        generate_world(seed, 8, 24, 0.1, 0.2, 0.5).unwrap()
    }

    fn clean_world(seed: u64) -> ConceptWorld {
        generate_world(seed, 8, 24, 0.0, 0.0, 0.0).unwrap()
    }

    fn rank(m: &Tensor<f64>) -> usize {
        // Gaussian elimination with partial pivoting.
        let mut a: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
        let (rows, cols) = (m.rows(), m.cols());
        let mut r = 0;
        for c in 0..cols {
            let Some(p) = (r..rows).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()) else {
                break;
            };
            if a[p][c].abs() < 1e-9 {
                continue;
            }
            a.swap(r, p);
            for i in r + 1..rows {
                let f = a[i][c] / a[r][c];
                for k in c..cols {
                    a[i][k] -= f * a[r][k];
                }
            }
            r += 1;
        }
        r
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(world(5), world(5));
        assert_ne!(world(5).image_emitters, world(6).image_emitters);
        let r = SamplingRanges::default();
        assert_eq!(sample_dataset(&world(5), &r, 20, 9).unwrap(), sample_dataset(&world(5), &r, 20, 9).unwrap());
    }

    #[test]
    fn emitters_are_separated() {
        for seed in 0..50 {
            let w = world(seed);
            assert!(w.min_separation() > 4.0 * w.noise_sigma);
        }
    }

    #[test]
    fn invalid_world_rejected() {
        assert!(generate_world(0, 0, 24, 0.1, 0.2, 0.0).is_err());
        assert!(generate_world(0, 30, 24, 0.1, 0.2, 0.0).is_err());
        assert!(generate_world(0, 8, 24, 0.1, 1.5, 0.0).is_err());
        assert!(generate_world(0, 8, 24, 100.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn noiseless_elements_equal_emitters() {
        let w = clean_world(2);
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let p = sample_pair(&w, &SamplingRanges::default(), &mut rng).unwrap();
            for (i, label) in p.patch_labels.iter().enumerate() {
                let ElementLabel::Concept(c) = *label else { panic!("distractor at rate 0") };
                assert_eq!(p.patch_inputs.row(i), w.image_emitters.row(c));
            }
            for (i, label) in p.token_labels.iter().enumerate() {
                let ElementLabel::Concept(c) = *label else { panic!("distractor at rate 0") };
                assert_eq!(p.token_inputs.row(i), w.text_emitters.row(c));
            }
            assert!(rank(&p.patch_inputs) <= p.concept_set.len());
        }
    }

    #[test]
    fn counts_within_bounds() {
        let w = world(3);
        let ranges = SamplingRanges::default();
        let mut rng = Rng::new(4);
        let mut distractors = 0;
        for _ in 0..1000 {
            let p = sample_pair(&w, &ranges, &mut rng).unwrap();
            assert!(ranges.concepts_per_pair.contains(&p.concept_set.len()));
            assert!(p.concept_set.windows(2).all(|x| x[0] < x[1]));
            for labels in [&p.patch_labels, &p.token_labels] {
                for &c in &p.concept_set {
                    let n = labels.iter().filter(|&&l| l == ElementLabel::Concept(c)).count();
                    assert!(ranges.elements_per_concept.contains(&n));
                }
                let concept_rows = labels.iter().filter(|&&l| l != ElementLabel::Distractor).count();
                let d = labels.len() - concept_rows;
                assert!(d <= concept_rows);
                distractors += d;
            }
            for &a in &p.saliences {
                assert!((0.5..=1.5).contains(&a));
            }
        }
        assert!(distractors > 0);
    }

    #[test]
    fn probe_partials_omit_their_concept() {
        let w = clean_world(7);
        let items = make_probe_set(&w, &SamplingRanges::default(), 30, 11).unwrap();
        assert_eq!(items, make_probe_set(&w, &SamplingRanges::default(), 30, 11).unwrap());
        for item in &items {
            let n = item.image.concept_set.len();
            assert!(n >= 2);
            assert_eq!(item.partial_texts.len(), n);
            for (omitted, text) in &item.partial_texts {
                let e = w.text_emitters.row(*omitted);
                for i in 0..text.rows() {
                    assert_ne!(text.row(i), e);
                }
            }
        }
    }

    fn mirrored(k: usize) -> (ConceptWorld, Params<f64>) {
        let mut w = generate_world(3, k, 12, 0.0, 0.0, 0.0).unwrap();
        w.text_emitters = w.image_emitters.clone();
        let dims = Dims { input_dim: 12, embed_dim: 8, hidden_dim: 16, fdt_dim: 8, codebook_size: 16 };
        let mut p = Params::init(&dims, 0.07, &mut Rng::new(9));
        p.text_encoder = p.image_encoder.clone();
        p.projection.text = p.projection.image.clone();
        (w, p)
    }

    #[test]
    fn oracle_codebook_recovers_every_concept() {
        let (w, mut p) = mirrored(8);
        p.codebook = oracle_codebook(&p, &w).unwrap();
        for normalize in [false, true] {
            assert_eq!(concept_recovery_score(&p, normalize, &w).unwrap(), 1.0);
        }
    }

    #[test]
    fn single_concept_score_is_binary() {
        let (w, p) = mirrored(1);
        let s = concept_recovery_score(&p, true, &w).unwrap();
        assert!(s == 0.0 || s == 1.0);
    }

    #[test]
    fn recovery_rules() {
        assert_eq!(recovery_from_tops(&[0, 1, 2], &[0, 1, 2]), 1.0);
        // Token 1 is claimed by two concepts in the image modality.
        assert_eq!(recovery_from_tops(&[0, 1, 1], &[0, 1, 2]), 1.0 / 3.0);
        assert_eq!(recovery_from_tops(&[0, 1], &[1, 0]), 0.0);
    }

    #[test]
    fn random_baseline_is_low() {
        let (w, p) = mirrored(8);
        let base = recovery_permutation_baseline(&p, true, &w, 200, 1).unwrap();
        assert_eq!(base.len(), 200);
        let mean = base.iter().sum::<f64>() / base.len() as f64;
        assert!(mean < 0.3, "mean {mean}");
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&v, 1.0), 100.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }
}
