use fdt_core::encoders::{encode_elements, EncodedPair};
use fdt_core::model::Mode;
use fdt_core::synthworld::{concept_top_tokens, generate_world, make_probe_set, sample_dataset, ElementLabel, SamplingRanges};
use fdt_core::fdt::topk_correspondence;
use fdt_core::trainer::eval::{completeness_from_features, evaluate_completeness, evaluate_retrieval, FeatureSource};
use fdt_core::trainer::train::{init_checkpoint, train, DeskData};
use fdt_core::trainer::TrainConfig;

#[test]
fn default_run_learns_concepts() {
    let cfg = TrainConfig::default();
    let data = DeskData::build(&cfg).unwrap();
    let out = train(&cfg, &data, |_| {}).unwrap();
    let params = &out.checkpoint.params;
    let opts = cfg.forward_options();

    let last = out.metrics.last().unwrap();
    assert!(last.loss < (cfg.batch_size as f64).ln(), "loss {}", last.loss);

    let init = init_checkpoint(&cfg).unwrap();
    let before = evaluate_retrieval(&init.params, &opts, &data.eval, FeatureSource::Fdt).unwrap();
    let after = evaluate_retrieval(params, &opts, &data.eval, FeatureSource::Fdt).unwrap();
    assert!(after.rsum > before.rsum);
    assert!(after.i2t_r1 > before.i2t_r1);

    // Elements most relevant to a concept's token mostly belong to that concept.
    let raw = sample_dataset(&data.world, &cfg.sampling(), cfg.train_pairs + cfg.eval_pairs, cfg.data_seed).unwrap();
    let eval_raw = &raw[cfg.train_pairs..];
    let encoded: Vec<EncodedPair<f64>> = eval_raw
        .iter()
        .enumerate()
        .map(|(pair_id, p)| EncodedPair {
            patches: encode_elements(&p.patch_inputs, &params.image_encoder).unwrap(),
            tokens: encode_elements(&p.token_inputs, &params.text_encoder).unwrap(),
            pair_id,
        })
        .collect();
    let k = 10;
    let corr = topk_correspondence(&encoded, &params.codebook, &params.projection, &opts.grounding().unwrap(), k).unwrap();
    let (image_top, _) = concept_top_tokens(params, &params.codebook, cfg.normalize_grounding, &data.world).unwrap();
    for (concept, &token) in image_top.iter().enumerate() {
        let tc = &corr[token];
        let image_hits = tc
            .image_hits
            .iter()
            .filter(|h| eval_raw[h.pair_id].patch_labels[h.patch_idx] == ElementLabel::Concept(concept))
            .count();
        let text_hits = tc
            .text_hits
            .iter()
            .filter(|h| eval_raw[h.pair_id].token_labels[h.token_idx] == ElementLabel::Concept(concept))
            .count();
        assert!(2 * image_hits > k && 2 * text_hits > k, "concept {concept}: {image_hits}/{text_hits} of {k}");
    }
}

#[test]
fn untrained_completeness_is_near_chance() {
    let cfg = TrainConfig::default();
    let data = DeskData::build(&cfg).unwrap();
    let probe = data.probe();
    let n: usize = probe.iter().map(|p| p.partials.len()).sum();
    let sd = (0.25 / n as f64).sqrt();
    for mode in [Mode::Sparsemax, Mode::Clip] {
        let mut c = cfg.clone();
        c.mode = mode;
        let init = init_checkpoint(&c).unwrap();
        let score = evaluate_completeness(&init.params, &c.forward_options(), &probe).unwrap();
        assert!((score - 0.5).abs() <= 3.0 * sd, "{mode:?}: {score} (3 sd = {})", 3.0 * sd);
    }
}

#[test]
fn oracle_features_complete_every_probe() {
    let mut world = generate_world(4, 8, 24, 0.0, 0.0, 0.0).unwrap();
    world.text_emitters = world.image_emitters.clone();
    let probe = make_probe_set(&world, &SamplingRanges::default(), 100, 2).unwrap();
    let sum = |concepts: &[usize]| -> Vec<f64> {
        let mut v = vec![0.0; world.input_dim];
        for &c in concepts {
            for (a, b) in v.iter_mut().zip(world.image_emitters.row(c)) {
                *a += b;
            }
        }
        v
    };
    let feats: Vec<_> = probe
        .iter()
        .map(|item| {
            let all = &item.image.concept_set;
            let partials = item
                .partial_texts
                .iter()
                .map(|(omitted, _)| sum(&all.iter().copied().filter(|c| c != omitted).collect::<Vec<_>>()))
                .collect();
            (sum(all), sum(all), partials)
        })
        .collect();
    assert_eq!(completeness_from_features(&feats).unwrap(), 1.0);
}

#[test]
fn f32_checkpoint_storage_round_trips() {
    use fdt_core::trainer::checkpoint::{decode, encode};
    use fdt_core::trainer::StorageDtype;
    let mut cfg = TrainConfig::default();
    cfg.total_steps = 0;
    cfg.warmup_steps = 0;
    cfg.checkpoint_dtype = StorageDtype::F32;
    let ckpt = init_checkpoint(&cfg).unwrap();
    let bytes = encode(&ckpt);
    let f64_len = {
        let mut c = ckpt.clone();
        c.config.checkpoint_dtype = StorageDtype::F64;
        encode(&c).len()
    };
    assert!(bytes.len() < f64_len);
    let back = decode(&bytes).unwrap();
    assert_eq!(encode(&back), bytes);
    for ((_, _, a), (_, _, b)) in ckpt.params.tensors().into_iter().zip(back.params.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }
}
