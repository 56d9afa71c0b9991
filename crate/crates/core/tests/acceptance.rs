//! Acceptance suite. Every test writes one `criterion N: PASS|FAIL` line to
//! stderr, visible without `--nocapture`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segal_core::acquisition::{
    bvsb, estimate_class_distribution, score_bvsb, score_classbal, score_margin, score_pixbal, score_random,
    select_batch, AcquisitionScore, Sampler,
};
use segal_core::dataio::{
    generate_synthetic, load_dataset, mask_id, model_index, results_csv, write_manifest, write_mask, write_ppm, Image,
    Mask, SyntheticSpec, UNDEF,
};
use segal_core::evalrun::{
    mean_miou_at, mean_round_average, miou, pool_path, run_experiment, run_experiment_on, run_seed, ExperimentConfig,
    RoundReport, RunState, Variant, Workspace,
};
use segal_core::model::{embed, embed_map, featurize, forward, predict_map, predict_probs, ModelDims, ModelParams};
use segal_core::oracle::{
    dominant_label, multiclass_label, query_batch, LabelMode, LabeledPool, MultiClassLabel, Oracle, RegionRef,
};
use segal_core::pseudolabel::{
    build_pseudo_dataset, expand, localize, median, pseudo_labels_for_image, thresholds,
    PseudoLabel, PseudoOptions, PseudoSource, RegionPrototypes,
};
use segal_core::superpixel::{grid_partition, region_adjacency, slic_partition, Partition, SlicParams};
use segal_core::training::{
    adamw_update, batch_prototypes, loss_ce, loss_mp, loss_pp, prototypical_pixels, total_loss_and_grad,
    total_loss_with_prototypes, train_stage1, train_stage2, AdamWConfig, Batch, LossBreakdown, LossWeights,
    RegionSample, TrainConfig, TrainSet,
};
use segal_core::Error;

/// Written straight to the stderr handle so the line survives output capture.
fn verdict(criterion: u32, pass: bool, detail: &str) {
    use std::io::Write;
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion}: {status} {detail}");
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

// ---------------------------------------------------------------------------
// criterion 1: analytic gradient vs central differences
// ---------------------------------------------------------------------------

fn random_params(rng: &mut ChaCha8Rng, dims: ModelDims) -> ModelParams {
    let mut p = ModelParams::init(dims, rng.random_range(0.1..1.0), rng.random()).unwrap();
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    p
}

fn random_batch(rng: &mut ChaCha8Rng, features: usize, classes: usize) -> Batch {
    let n = rng.random_range(2..=10);
    let x = Array2::from_shape_simple_fn((n, features), || rng.random_range(-1.0..1.0));
    let mut regions = Vec::new();
    let mut start = 0;
    while start < n {
        let len = rng.random_range(1..=(n - start).min(4));
        let mut set: Vec<usize> = (0..classes).filter(|_| rng.random_bool(0.5)).collect();
        if set.is_empty() {
            set.push(rng.random_range(0..classes));
        }
        regions.push(RegionSample {
            rows: start..start + len,
            classes: set,
        });
        start += len;
    }
    Batch { features: x, regions }
}

#[test]
fn criterion_1_gradient_matches_finite_differences() {
    let started = Instant::now();
    let h = 1e-5;
    let weights = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let batches = 120;
    for _ in 0..batches {
        let classes = rng.random_range(2..=4);
        let dims = ModelDims {
            features: rng.random_range(2..=5),
            hidden: rng.random_range(2..=5),
            embed: rng.random_range(2..=4),
            classes,
        };
        let params = random_params(&mut rng, dims);
        let batch = random_batch(&mut rng, dims.features, classes);
        let (_, grads) = total_loss_and_grad(&params, &batch, weights).unwrap();
        let fwd = forward(batch.features.view(), &params).unwrap();
        let protos = batch_prototypes(&batch.regions, fwd.probs.view());
        let loss_at = |p: &ModelParams| total_loss_with_prototypes(p, &batch, weights, &protos).unwrap().total;
        for (t, analytic) in grads.tensors().iter().enumerate() {
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = params.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[t][i] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                worst = worst.max(rel);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && secs < 10.0;
    verdict(1, pass, &format!("batches={batches} max_rel_err={worst:.3e} runtime={secs:.2}s"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 2: worked examples and identities
// ---------------------------------------------------------------------------

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_text(
        "rounds = 2
         budget = 12
         region_size = 8
         hidden = 8
         embed = 4
         stage1_iterations = 15
         stage2_iterations = 15
         stage1_regions = 8
         stage1_pixels = 16
         stage2_batch = 64
         synthetic_width = 32
         synthetic_height = 32
         synthetic_classes = 3
         synthetic_sites = 12
         synthetic_noise = 0.05
         train_count = 4
         val_count = 2",
    )
    .unwrap()
}

fn report_stub(round: usize, miou: f64) -> RoundReport {
    RoundReport {
        round,
        cum_clicks: 10 * round,
        clicks: 10,
        overshoot: 0,
        regions_labeled: 10,
        miou,
        per_class_iou: vec![miou, miou],
        stage1_loss: None,
        stage2_loss: None,
        localized_pixels: 0,
        expanded_pixels: 0,
    }
}

fn counts_mask(counts: &[(u8, usize)]) -> (Mask, Vec<u32>) {
    let data: Vec<u8> = counts.iter().flat_map(|&(id, n)| std::iter::repeat_n(id, n)).collect();
    let n = data.len();
    (Mask::new(n, 1, 6, data).unwrap(), (0..n as u32).collect())
}

fn params_2d(tau: f64) -> ModelParams {
    ModelParams {
        hidden_w: Array2::eye(2),
        hidden_b: Array1::zeros(2),
        out_w: Array2::eye(2),
        out_b: Array1::zeros(2),
        classifier: array![[1.0, 0.0], [0.0, 1.0]],
        temperature: tau,
    }
}

fn single(rows: std::ops::Range<usize>, c: usize) -> RegionSample {
    RegionSample { rows, classes: vec![c] }
}

fn protos_from(vectors: Vec<Array1<f64>>) -> RegionPrototypes {
    RegionPrototypes {
        classes: (0..vectors.len()).collect(),
        pixels: vec![0; vectors.len()],
        vectors,
    }
}

fn strip_world(strips: &[&[u8]]) -> (Vec<Mask>, Vec<Partition>) {
    // regions are 12×12 blocks side by side; each block's interior carries
    // its class list in vertical bands
    let (bw, h) = (12, 12);
    let w = bw * strips.len();
    let mut labels = vec![0u32; w * h];
    let mut mask = vec![0u8; w * h];
    for (k, classes) in strips.iter().enumerate() {
        for y in 0..h {
            for x in 0..bw {
                let p = y * w + k * bw + x;
                labels[p] = k as u32;
                let band = if (3..9).contains(&x) { (x - 3) * classes.len() / 6 } else { 0 };
                mask[p] = classes[band];
            }
        }
    }
    (
        vec![Mask::new(w, h, 4, mask).unwrap()],
        vec![Partition::from_labels(w, h, &labels)],
    )
}

fn scores_in_order(n: usize, predicted: &[u8]) -> Vec<AcquisitionScore> {
    (0..n)
        .map(|i| AcquisitionScore {
            region: RegionRef::new(0, i),
            score: 1.0 - i as f64 / n as f64,
            predicted: Some(predicted[i]),
        })
        .collect()
}

fn worked_examples() -> Vec<(&'static str, bool)> {
    let mut checks: Vec<(&'static str, bool)> = Vec::new();
    let mut check = |name: &'static str, ok: bool| checks.push((name, ok));
    let tmp = tempfile::tempdir().unwrap();

    // data loading and generation
    {
        let (a, b) = (tmp.path().join("e_img"), tmp.path().join("e_msk"));
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        check("empty directories load as empty", load_dataset(&a, &b).map(|s| s.is_empty()).unwrap_or(false));

        let (img, msk) = (tmp.path().join("img"), tmp.path().join("msk"));
        std::fs::create_dir_all(&img).unwrap();
        std::fs::create_dir_all(&msk).unwrap();
        write_ppm(&img.join("a.ppm"), &Image::filled(4, 4, [0.2, 0.4, 0.6])).unwrap();
        let ids: Vec<u8> = (0..16).map(|i| if i == 5 { UNDEF } else { (i % 2) as u8 }).collect();
        write_mask(&msk.join("a.pgm"), &Mask::new(4, 4, 6, ids).unwrap()).unwrap();
        write_manifest(&msk, 6).unwrap();
        let loaded = load_dataset(&img, &msk).unwrap();
        check("one 4x4 pair loads with manifest class count", loaded.len() == 1 && loaded[0].mask.class_count() == 6);
        check("UNDEF pixel survives loading", loaded[0].mask.at(5) == UNDEF);

        let spec = SyntheticSpec {
            width: 20,
            height: 16,
            class_count: 3,
            site_count: 6,
            noise_std: 0.1,
            class_frequency_skew: 1.0,
        };
        let (i1, m1) = generate_synthetic(&spec, 4).unwrap();
        let (i2, m2) = generate_synthetic(&spec, 4).unwrap();
        check("synthetic generation is deterministic", i1 == i2 && m1 == m2);
        check("synthetic ids stay below class_count", m1.data().iter().all(|&v| v < 3));
        let clean = SyntheticSpec { noise_std: 0.0, ..spec };
        let (img, m) = generate_synthetic(&clean, 9).unwrap();
        let mut color_of: BTreeMap<u8, [f64; 3]> = BTreeMap::new();
        let mut same = true;
        for p in 0..m.data().len() {
            let c = img.rgb(p % 20, p / 20);
            same &= *color_of.entry(m.at(p)).or_insert(c) == c;
        }
        check("zero noise gives identical colors within a class", same);

        let reports: Vec<_> = (1..=5).map(|t| report_stub(t, 0.7321)).collect();
        let csv = results_csv(&reports);
        check("5 reports give header plus 5 lines", csv.lines().count() == 6);
        check("mIoU rendered with 6 decimals", csv.lines().nth(1).unwrap().split(',').nth(2) == Some("0.732100"));
        check("identical reports give identical CSV", csv == results_csv(&reports));
    }

    // partitions and adjacency
    {
        let p = grid_partition(&Image::filled(64, 64, [0.0; 3]), 32);
        check("64x64 grid of 32 gives 4 regions of 1024", p.region_count() == 4 && p.areas().iter().all(|&a| a == 1024));
        let p = grid_partition(&Image::filled(65, 64, [0.0; 3]), 32);
        check("65x64 grid of 32 gives 6 regions, width-1 edge", p.region_count() == 6 && p.areas()[2] == 32);
        check("oversized cell gives one region", grid_partition(&Image::filled(9, 5, [0.0; 3]), 10).region_count() == 1);
        let (img, _) = generate_synthetic(
            &SyntheticSpec {
                width: 40,
                height: 30,
                class_count: 3,
                site_count: 5,
                noise_std: 0.05,
                class_frequency_skew: 0.5,
            },
            1,
        )
        .unwrap();
        let slic = slic_partition(&img, &SlicParams { target_size: 8, ..SlicParams::default() }).unwrap();
        check("SLIC output satisfies partition invariants", slic.check_invariants().is_ok());
        let g = region_adjacency(&grid_partition(&Image::filled(8, 8, [0.0; 3]), 4));
        check("2x2 grid: every region has 2 neighbours", (0..4).all(|r| g.neighbors(r).len() == 2));
        let g = region_adjacency(&grid_partition(&Image::filled(8, 8, [0.0; 3]), 8));
        check("single region has no neighbours", g.neighbors(0).is_empty());
    }

    // oracle
    {
        let (m, px) = counts_mask(&[(0, 6), (1, 4)]);
        check("majority wins", dominant_label(&px, &m) == 0);
        let (m, px) = counts_mask(&[(3, 5), (1, 5)]);
        check("ties go to the lower id", dominant_label(&px, &m) == 1);
        let (m, px) = counts_mask(&[(UNDEF, 6), (2, 4)]);
        check("UNDEF can be the majority", dominant_label(&px, &m) == UNDEF);
        let image = Image::filled(8, 4, [0.0; 3]);
        let part = grid_partition(&image, 4);
        let ids: Vec<u8> = (0..32).map(|p| if p % 8 < 4 && p / 8 == 1 { 2 } else { 1 }).collect();
        let mask = Mask::new(8, 4, 3, ids).unwrap();
        let label = multiclass_label(0, &mask, &part);
        check("thin region falls back to the dominant class", label.classes() == [1]);

        let (masks, parts) = strip_world(&[&[0], &[0, 1], &[0, 1, 2]]);
        let refs = [RegionRef::new(0, 0), RegionRef::new(0, 1), RegionRef::new(0, 2)];
        let pool = LabeledPool::new();
        let mut dom = Oracle::new(&masks, &parts, LabelMode::Dominant);
        check("dominant mode: 3 regions cost 3", query_batch(&refs, &mut dom, &pool).unwrap().1 == 3);
        let mut mul = Oracle::new(&masks, &parts, LabelMode::MultiClass);
        let (labels, clicks) = query_batch(&refs, &mut mul, &pool).unwrap();
        let sizes: Vec<usize> = labels.iter().map(|(_, l)| l.len()).collect();
        check("multiclass mode: sizes 1,2,3 cost 6", sizes == [1, 2, 3] && clicks == 6);
        let (labels, clicks) = query_batch(&[], &mut mul, &pool).unwrap();
        check("empty query costs nothing", labels.is_empty() && clicks == 0);
    }

    // features and model
    {
        let f = featurize(&Image::filled(6, 5, [0.3, 0.6, 0.9]));
        check("constant image: window std features are 0", f.data.outer_iter().all(|r| r[8] == 0.0 && r[9] == 0.0 && r[10] == 0.0));
        let last = f.data.row(29);
        check("coordinate features run from (0,0) to (1,1)", f.data[[0, 3]] == 0.0 && f.data[[0, 4]] == 0.0 && last[3] == 1.0 && last[4] == 1.0);
        check("11 features per pixel", f.data.ncols() == 11 && f.data.nrows() == 30);
        let mut zero = ModelParams::init(
            ModelDims {
                features: 11,
                hidden: 4,
                embed: 3,
                classes: 3,
            },
            0.1,
            0,
        )
        .unwrap();
        zero.hidden_w.fill(0.0);
        zero.hidden_b.fill(0.0);
        zero.out_w.fill(0.0);
        zero.out_b.fill(0.0);
        let e = embed(f.data.view(), &zero).unwrap();
        check("zero weights give zero embeddings", e.iter().all(|&v| v == 0.0));
        check(
            "zero embeddings are rejected by the classifier",
            matches!(predict_probs(e.view(), &zero), Err(Error::DegenerateDirection(_))),
        );
        let x = array![[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]];
        let p = params_2d(1.0);
        let e = embed(x.view(), &p).unwrap();
        let each: Vec<_> = (0..3).map(|i| embed(x.slice(ndarray::s![i..i + 1, ..]), &p).unwrap()).collect();
        check("N pixels give N embeddings in order", e.nrows() == 3 && (0..3).all(|i| e.row(i) == each[i].row(0)));
        let f1 = array![[1.0, 0.0]];
        let probs = predict_probs(f1.view(), &p).unwrap();
        check("softmax(1,0)", close(probs[[0, 0]], 0.7310585786300049) && close(probs[[0, 1]], 0.2689414213699951));
        let f10 = array![[10.0, 0.0]];
        check("scaled embedding gives identical probabilities", {
            let q = predict_probs(f10.view(), &p).unwrap();
            close(q[[0, 0]], probs[[0, 0]]) && close(q[[0, 1]], probs[[0, 1]])
        });
        let q = predict_probs(f1.view(), &params_2d(0.1)).unwrap();
        check("softmax(10,0)", close(q[[0, 0]], 0.9999546021312976) && close(q[[0, 1]], 4.5397868702434395e-5));
    }

    // losses and optimizer
    {
        let ones = array![[1.0, 0.0], [1.0, 0.0]];
        check("perfect prediction: zero CE", loss_ce(&[single(0..2, 0)], ones.view()) == 0.0);
        let q = array![[0.25, 0.75]];
        check("CE of 0.25", close(loss_ce(&[single(0..1, 0)], q.view()), 1.3862943611198906));
        let two = array![[(-1.0f64).exp(), 0.0], [(-2.0f64).exp(), 0.0]];
        check("CE averages over regions", close(loss_ce(&[single(0..1, 0), single(1..2, 0)], two.view()), 1.5));
        let p3 = array![[0.1, 0.3, 0.6]];
        let all = RegionSample {
            rows: 0..1,
            classes: vec![0, 1, 2],
        };
        check("MP over every class is 0", loss_mp(&[all], p3.view()).abs() <= 1e-12);
        let y12 = RegionSample {
            rows: 0..1,
            classes: vec![1, 2],
        };
        check("MP of mass 0.9", close(loss_mp(&[y12], p3.view()), 0.10536051565782628));
        let pr = array![[0.3, 0.7], [0.2, 0.8], [0.9, 0.1], [0.5, 0.5]];
        check("MP with one candidate equals CE", loss_mp(&[single(0..4, 1)], pr.view()) == loss_ce(&[single(0..4, 1)], pr.view()));
        let col = array![[0.2], [0.9], [0.5]];
        check("prototype is the argmax pixel", prototypical_pixels(&[0], col.view()) == [(0, 1)]);
        let tie = array![[0.5], [0.5]];
        check("prototype ties go to the first pixel", prototypical_pixels(&[0], tie.view()) == [(0, 0)]);
        let both = array![[0.6, 0.4], [0.2, 0.3]];
        let pp = prototypical_pixels(&[0, 1], both.view());
        check("two candidates give two prototypes", pp == [(0, 0), (1, 0)]);
        let ab = array![[0.9, 0.1], [0.2, 0.8]];
        let r = RegionSample {
            rows: 0..2,
            classes: vec![0, 1],
        };
        check("PP arithmetic", (loss_pp(&[r.clone()], ab.view()) - 0.164252033486018).abs() <= 1e-12);
        let perfect = array![[1.0, 0.0], [0.0, 1.0]];
        check("PP perfect case", loss_pp(&[r], perfect.view()) == 0.0);
        let third = Array2::from_elem((2, 3), 1.0 / 3.0);
        let r3 = RegionSample {
            rows: 0..2,
            classes: vec![0, 1, 2],
        };
        check("PP with equal probabilities", close(loss_pp(&[r3], third.view()), 1.0986122886681098));
        let b = LossBreakdown::compose(0.1, 0.2, 0.3, LossWeights::default());
        check("total composition 3.5", close(b.total, 3.5));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = ModelDims {
            features: 3,
            hidden: 4,
            embed: 3,
            classes: 3,
        };
        let params = random_params(&mut rng, dims);
        let batch = Batch {
            features: Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0)),
            regions: vec![single(0..2, 0), single(2..5, 2)],
        };
        let (full, g_full) = total_loss_and_grad(&params, &batch, LossWeights::default()).unwrap();
        let ce_only = LossWeights {
            ce: 16.0,
            mp: 0.0,
            pp: 0.0,
        };
        let (_, g_ce) = total_loss_and_grad(&params, &batch, ce_only).unwrap();
        check(
            "single-class batch: no MP/PP and CE-only gradient",
            full.l_mp == 0.0 && full.l_pp == 0.0 && g_full.tensors() == g_ce.tensors(),
        );

        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0,
            weight_decay: 0.0,
        };
        let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &cfg);
        check("first AdamW step moves by lr", close(p[0], -0.1));
        let decay = AdamWConfig {
            eps: 1e-8,
            weight_decay: 0.1,
            ..cfg
        };
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, &decay);
        check("decoupled weight decay only", close(p[0], 0.99));
        let run = || {
            let (mut p, mut m, mut v) = ([0.3, -0.2], [0.1, 0.0], [0.01, 0.02]);
            adamw_update(&mut p, &[0.5, -1.5], &mut m, &mut v, 4, &decay);
            (p, m, v)
        };
        check("AdamW is deterministic", run() == run());

        let image = Image::filled(8, 8, [0.5, 0.2, 0.1]);
        let feats = vec![featurize(&image)];
        let parts = vec![grid_partition(&image, 4)];
        let mut pool = LabeledPool::new();
        pool.insert(RegionRef::new(0, 0), MultiClassLabel::single(0), 1).unwrap();
        pool.insert(RegionRef::new(0, 1), MultiClassLabel::new(vec![0, 1]).unwrap(), 1).unwrap();
        let data = TrainSet {
            features: &feats,
            partitions: &parts,
            class_count: 2,
        };
        let init = ModelParams::init(
            ModelDims {
                features: 11,
                hidden: 5,
                embed: 3,
                classes: 3,
            },
            0.1,
            8,
        )
        .unwrap();
        let zero_cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        check("zero stage-1 iterations keep the init", train_stage1(&pool, data, init.clone(), &zero_cfg).unwrap().params == init);
        let cfg = TrainConfig {
            iterations: 5,
            regions_per_batch: 2,
            pixels_per_region: 4,
            ..TrainConfig::default()
        };
        let a = train_stage1(&pool, data, init.clone(), &cfg).unwrap().params;
        let b = train_stage1(&pool, data, init.clone(), &cfg).unwrap().params;
        check("stage 1 is deterministic per seed", a.to_bytes() == b.to_bytes());
        let pseudo = vec![(0u32, 3u32, 1usize), (0, 9, 0)];
        check("zero stage-2 iterations keep the params", train_stage2(a.clone(), &pseudo, &feats, &zero_cfg).unwrap().params == a);
        let s1 = train_stage2(a.clone(), &pseudo, &feats, &cfg).unwrap().params;
        let s2 = train_stage2(a.clone(), &pseudo, &feats, &cfg).unwrap().params;
        check("stage 2 is deterministic per seed", s1.to_bytes() == s2.to_bytes());
    }

    // pseudo labels
    {
        let emb = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]];
        let protos = protos_from(vec![array![0.3, 0.3]]);
        check("single candidate labels every pixel", localize(&[0, 1, 2], &protos, &emb).iter().all(|l| l.0 == 0));
        let emb = array![[0.6, 0.8], [0.7, 0.7]];
        let protos = protos_from(vec![array![1.0, 0.0], array![0.6, 0.8]]);
        let loc = localize(&[0], &protos, &emb);
        check("pixel equal to a prototype takes its class", loc[0].0 == 1 && close(loc[0].1, 1.0));
        let protos = protos_from(vec![array![1.0, 0.0], array![0.0, 1.0]]);
        check("equal cosines go to the lower class", localize(&[1], &protos, &emb)[0].0 == 0);
        check("odd median", median(&mut [0.2, 0.5, 0.8]) == Some(0.5));
        check("even median", close(median(&mut [0.2, 0.4, 0.6, 0.8]).unwrap(), 0.5));
        let emb = array![[0.3, 0.4], [1.0, 0.0], [0.9, 0.1]];
        let protos = RegionPrototypes {
            classes: vec![0, 1],
            pixels: vec![0, 1],
            vectors: vec![emb.row(0).to_owned(), emb.row(1).to_owned()],
        };
        let loc = localize(&[0, 1, 2], &protos, &emb);
        check("prototype-only class has threshold 1", close(thresholds(&protos, &loc)[0], 1.0));
        let protos = protos_from(vec![array![1.0, 0.0], array![0.0, 1.0]]);
        let emb = array![[0.5, 0.5]];
        check("cosines at or below thresholds stay unlabeled", expand(&[0], &protos, &[0.8, 0.8], &emb)[0].is_none());
        let emb = array![[0.9, (1.0f64 - 0.81).sqrt()]];
        let out = expand(&[0], &protos, &[0.5, 0.95], &emb)[0];
        check("single passing class", out.is_some_and(|(k, s)| k == 0 && (s - 0.9).abs() < 1e-12));
        let emb = array![[0.7, 0.6]];
        let n = (0.49f64 + 0.36).sqrt();
        let out = expand(&[0], &protos, &[0.1, 0.1], &emb)[0];
        check("two passing classes: higher cosine wins", out.is_some_and(|(k, s)| k == 0 && (s - 0.7 / n).abs() < 1e-12));

        // one region, no neighbours
        let part = Partition::from_labels(2, 2, &[0, 0, 0, 0]);
        let adj = region_adjacency(&part);
        let mut pool = LabeledPool::new();
        pool.insert(RegionRef::new(0, 0), MultiClassLabel::single(1), 1).unwrap();
        let emb = Array2::from_shape_fn((4, 2), |(i, j)| (i + j + 1) as f64);
        let probs = Array2::from_elem((4, 3), 1.0 / 3.0);
        let labels = pseudo_labels_for_image(0, &pool, &part, &adj, &emb, &probs, 2, PseudoOptions::default());
        check(
            "lone single-class region labels exactly its pixels",
            labels.iter().all(|l| l.is_some_and(|l| l.class == 1 && l.source == PseudoSource::Single)),
        );

        // a middle pixel claimed by two labeled neighbours
        let part = Partition::from_labels(7, 1, &[0, 0, 0, 1, 2, 2, 2]);
        let adj = region_adjacency(&part);
        let s = 3f64.sqrt() / 2.0;
        let emb = array![[1.0, 0.0], [0.5, s], [0.0, 1.0], [0.8, 0.6], [0.0, 1.0], [s, 0.5], [1.0, 0.0]];
        let mut probs = Array2::from_elem((7, 4), 0.25);
        probs.row_mut(0).assign(&array![0.7, 0.1, 0.1, 0.1]);
        probs.row_mut(4).assign(&array![0.1, 0.7, 0.1, 0.1]);
        let mut pool = LabeledPool::new();
        pool.insert(RegionRef::new(0, 0), MultiClassLabel::single(0), 1).unwrap();
        pool.insert(RegionRef::new(0, 2), MultiClassLabel::single(1), 1).unwrap();
        let labels = pseudo_labels_for_image(0, &pool, &part, &adj, &emb, &probs, 3, PseudoOptions::default());
        check(
            "conflict resolved by the higher proposal",
            labels[3].is_some_and(|l| l.class == 0 && l.origin == 0 && close(l.score, 0.8)),
        );
    }

    // acquisition
    {
        check("bvsb (0.5,0.3,0.2)", close(bvsb(array![0.5, 0.3, 0.2].view()), 0.6));
        check("bvsb uniform", close(bvsb(Array1::from_elem(4, 0.25).view()), 1.0));
        check("bvsb near one-hot", bvsb(array![1.0 - 2e-12, 1e-12, 1e-12].view()) < 1e-11);
        let d = estimate_class_distribution(&[array![[1.0, 0.0], [0.0, 1.0]].view()]).unwrap();
        check("distribution of two one-hot pixels", d.probs() == [0.5, 0.5]);
        let same = Array2::from_shape_fn((4, 3), |(_, j)| [0.2, 0.3, 0.5][j]);
        let d = estimate_class_distribution(&[same.view()]).unwrap();
        check("distribution of identical pixels", d.probs().iter().zip([0.2, 0.3, 0.5]).all(|(a, b)| close(*a, b)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut raw = Array2::from_shape_simple_fn((7, 5), || rng.random::<f64>());
        for mut row in raw.outer_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let d = estimate_class_distribution(&[raw.view()]).unwrap();
        check("distribution sums to 1", (d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let region = array![[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]];
        check("PixBal at nu=0 is mean BvSB", close(score_pixbal(region.view(), &d, 0.0), score_bvsb(region.view())));
        let half = estimate_class_distribution(&[array![[0.5, 0.5]].view()]).unwrap();
        let one = array![[0.625, 0.375]];
        check("PixBal single pixel arithmetic", close(score_pixbal(one.view(), &half, 6.0), 0.0375));
        let onehot = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        check("PixBal of one-hot pixels is 0", score_pixbal(onehot.view(), &d, 6.0) == 0.0);
        check(
            "ClassBal equals PixBal at nu=0",
            close(score_classbal(region.view(), &d, 0.0), score_pixbal(region.view(), &d, 0.0)),
        );
        let agree = array![[0.5, 0.3, 0.2], [0.45, 0.35, 0.2]];
        check(
            "single predicted class: ClassBal equals PixBal",
            close(score_classbal(agree.view(), &d, 6.0), score_pixbal(agree.view(), &d, 6.0)),
        );
        check("margin of one-hot pixels", score_margin(onehot.view()) == 0.0);
        check("margin of uniform pixels", close(score_margin(Array2::from_elem((2, 4), 0.25).view()), 1.0));
        check("margin of (0.6,0.4)", close(score_margin(array![[0.6, 0.4]].view()), 0.8));
        let r = RegionRef::new(2, 5);
        check("random score is deterministic", score_random(r, 3, 7) == score_random(r, 3, 7));
        let distinct: std::collections::BTreeSet<u64> =
            (0..5000).map(|i| score_random(RegionRef::new(i / 50, i % 50), 1, 0).to_bits()).collect();
        check("random scores do not collide", distinct.len() == 5000);

        let (masks, parts) = strip_world(&[&[0, 1], &[1, 2], &[0, 1, 2], &[0], &[1]]);
        let mut oracle = Oracle::new(&masks, &parts, LabelMode::MultiClass);
        let sel = select_batch(&scores_in_order(5, &[0; 5]), &LabeledPool::new(), 5, &mut oracle).unwrap();
        check("multiclass budget crossing: 3 regions, 7 clicks, overshoot 2", (sel.labels.len(), sel.clicks, sel.overshoot) == (3, 7, 2));
        let mut oracle = Oracle::new(&masks, &parts, LabelMode::Dominant);
        let sel = select_batch(&scores_in_order(5, &[0; 5]), &LabeledPool::new(), 5, &mut oracle).unwrap();
        check("dominant budget: 5 regions, 5 clicks", (sel.labels.len(), sel.clicks) == (5, 5));
        let mut oracle = Oracle::new(&masks, &parts, LabelMode::Dominant);
        let sel = select_batch(&scores_in_order(5, &[UNDEF, 0, 0, 0, 0]), &LabeledPool::new(), 1, &mut oracle).unwrap();
        check("top region predicted UNDEF is skipped", sel.labels[0].0 == RegionRef::new(0, 1));
    }

    // evaluation and protocol
    {
        let gt = Mask::new(2, 2, 2, vec![0, 0, 1, 1]).unwrap();
        check("prediction equal to ground truth gives 1", miou(&gt, &gt).unwrap().0 == 1.0);
        let (m, ious) = miou(&Mask::new(2, 2, 2, vec![0; 4]).unwrap(), &gt).unwrap();
        check("half/half vs all-0 gives 0.25", close(m, 0.25) && close(ious[0], 0.5) && ious[1] == 0.0);
        let undef = Mask::new(2, 2, 2, vec![UNDEF; 4]).unwrap();
        check("all-UNDEF ground truth is an error", matches!(miou(&gt, &undef), Err(Error::NoEvaluableClass)));

        let mut cfg = tiny_config();
        let ws = Workspace::load(&cfg).unwrap();
        cfg.rounds = 1;
        cfg.budget = 1_000_000;
        let (reports, state) = run_seed(&ws, &cfg, 0, None).unwrap();
        check("one round with unlimited budget labels every region", state.pool.len() == ws.region_count() && reports.len() == 1);

        let cfg = tiny_config();
        let mut log_a = Vec::new();
        let mut log_b = Vec::new();
        let mut dom_cfg = cfg.clone();
        dom_cfg.mode = LabelMode::Dominant;
        let mut log_c = Vec::new();
        let (_, sa) = segal_core::evalrun::run_round(&ws, &mut RunState::new(4), &cfg, &mut log_a).unwrap();
        let (_, sb) = segal_core::evalrun::run_round(&ws, &mut RunState::new(4), &cfg, &mut log_b).unwrap();
        let (_, sc) = segal_core::evalrun::run_round(&ws, &mut RunState::new(4), &dom_cfg, &mut log_c).unwrap();
        let order = |s: &[AcquisitionScore]| {
            let mut v: Vec<_> = s.iter().map(|x| (x.score.to_bits(), x.region)).collect();
            v.sort();
            v
        };
        check("round-1 ordering depends only on the seed", order(&sa) == order(&sb));
        check("round-1 ordering is the same in both modes", order(&sa) == order(&sc));

        let mut log = Vec::new();
        let mut state = RunState::new(1);
        let mut cfg3 = cfg.clone();
        cfg3.rounds = 3;
        for _ in 0..3 {
            segal_core::evalrun::run_round(&ws, &mut state, &cfg3, &mut log).unwrap();
        }
        let ids = |event: &str, key: &str| -> Vec<(u64, String)> {
            log.iter()
                .filter(|e| e["event"] == event)
                .map(|e| (e["round"].as_u64().unwrap(), e[key].as_str().unwrap().to_string()))
                .collect()
        };
        let stage1 = ids("stage1", "model_id");
        let pseudo = ids("pseudo_labels", "source_model_id");
        check("pseudo labels come from the same round's stage-1 model", stage1.len() == 3 && stage1 == pseudo);

        let mut cfg5 = cfg.clone();
        cfg5.rounds = 5;
        cfg5.budget = 6;
        let (reports, _) = run_seed(&ws, &cfg5, 0, None).unwrap();
        check(
            "5 rounds give 5 reports with increasing clicks",
            reports.len() == 5 && reports.windows(2).all(|w| w[1].cum_clicks > w[0].cum_clicks),
        );
    }
    checks
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((n, c), || rng.random_range(1e-3..1.0));
    for mut row in m.outer_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

#[test]
fn criterion_2_worked_examples_and_identities() {
    let checks = worked_examples();
    let failed: Vec<_> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut degeneration_fail = 0;
    let mut equivalence_fail = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..12);
        let c = rng.random_range(2..8);
        let probs = random_probs(&mut rng, n, c);
        let k = rng.random_range(0..c);
        let mut regions = Vec::new();
        let mut start = 0;
        while start < n {
            let len = rng.random_range(1..=n - start);
            regions.push(single(start..start + len, k));
            start += len;
        }
        if loss_mp(&regions, probs.view()) != loss_ce(&regions, probs.view()) {
            degeneration_fail += 1;
        }
        let d = estimate_class_distribution(&[random_probs(&mut rng, 20, c).view()]).unwrap();
        if (score_pixbal(probs.view(), &d, 0.0) - score_classbal(probs.view(), &d, 0.0)).abs() > 1e-12 {
            equivalence_fail += 1;
        }
    }
    let pass = failed.is_empty() && degeneration_fail == 0 && equivalence_fail == 0;
    verdict(
        2,
        pass,
        &format!(
            "examples={}/{} mp_to_ce_fail={degeneration_fail}/1000 pixbal_classbal_fail={equivalence_fail}/1000 failed={failed:?}",
            checks.len() - failed.len(),
            checks.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 3: pseudo labels vs brute force
// ---------------------------------------------------------------------------

fn voronoi_labels(rng: &mut ChaCha8Rng, w: usize, h: usize, sites: usize) -> Vec<u32> {
    let pts: Vec<(f64, f64)> = (0..sites)
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    (0..w * h)
        .map(|p| {
            let (x, y) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (i, &(sx, sy)) in pts.iter().enumerate() {
                let d = (sx - x).powi(2) + (sy - y).powi(2);
                if d < best.0 {
                    best = (d, i as u32);
                }
            }
            best.1
        })
        .collect()
}

fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

fn brute_median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Straight from the definitions: every pixel against every labeled region
/// and every candidate class.
fn brute_pseudo(
    image: u32,
    region_of: &[u32],
    w: usize,
    pool: &LabeledPool,
    emb: &Array2<f64>,
    probs: &Array2<f64>,
    class_count: usize,
    expansion: bool,
) -> Vec<Option<PseudoLabel>> {
    let n = region_of.len();
    let row = |p: usize| emb.row(p).to_vec();
    let adjacent = |a: u32, b: u32| {
        (0..n).any(|p| {
            region_of[p] == a
                && [(p % w > 0).then(|| p - 1), (p % w + 1 < w).then(|| p + 1), p.checked_sub(w), (p + w < n).then(|| p + w)]
                    .into_iter()
                    .flatten()
                    .any(|q| region_of[q] == b)
        })
    };
    let mut out: Vec<Option<PseudoLabel>> = vec![None; n];
    for (r, entry) in pool.iter().filter(|(r, _)| r.image == image) {
        let classes: Vec<usize> = entry.label.classes().iter().map(|&id| model_index(id, class_count)).collect();
        let members: Vec<usize> = (0..n).filter(|&p| region_of[p] == r.region).collect();
        let proto: Vec<usize> = classes
            .iter()
            .map(|&c| {
                let mut best = members[0];
                for &p in &members {
                    if probs[[p, c]] > probs[[best, c]] {
                        best = p;
                    }
                }
                best
            })
            .collect();
        let nearest = |p: usize, alpha: Option<&[f64]>| -> Option<(usize, f64)> {
            let mut best: Option<(usize, f64)> = None;
            for k in 0..classes.len() {
                let cos = brute_cos(&row(p), &row(proto[k]));
                if let Some(a) = alpha {
                    if cos <= a[k] {
                        continue;
                    }
                }
                if best.map_or(true, |(_, b)| cos > b) {
                    best = Some((k, cos));
                }
            }
            best
        };
        let source = if classes.len() == 1 {
            PseudoSource::Single
        } else {
            PseudoSource::Localized
        };
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); classes.len()];
        for &p in &members {
            let (k, cos) = nearest(p, None).unwrap();
            per_class[k].push(cos);
            out[p] = Some(PseudoLabel {
                class: classes[k],
                source,
                origin: r.region,
                score: cos,
            });
        }
        if !expansion {
            continue;
        }
        let alpha: Vec<f64> = per_class.into_iter().map(brute_median).collect();
        for p in 0..n {
            let q = region_of[p];
            if q == r.region || pool.contains(&RegionRef { image, region: q }) || !adjacent(r.region, q) {
                continue;
            }
            if let Some((k, cos)) = nearest(p, Some(&alpha)) {
                if out[p].map_or(true, |cur| cos > cur.score) {
                    out[p] = Some(PseudoLabel {
                        class: classes[k],
                        source: PseudoSource::Expanded,
                        origin: r.region,
                        score: cos,
                    });
                }
            }
        }
    }
    out
}

fn same_label(a: &Option<PseudoLabel>, b: &Option<PseudoLabel>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => {
            a.class == b.class && a.source == b.source && a.origin == b.origin && (a.score - b.score).abs() <= 1e-12
        }
        _ => false,
    }
}

#[test]
fn criterion_3_pseudo_labels_match_brute_force() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut mismatched_fixtures = 0;
    let mut pixels_checked = 0usize;
    for fixture in 0..20 {
        let (w, h) = (rng.random_range(8..=64), rng.random_range(8..=64));
        let class_count = rng.random_range(2..=6);
        let images = 2;
        let mut partitions = Vec::new();
        let mut features = Vec::new();
        for _ in 0..images {
            let data: Vec<f64> = (0..w * h * 3).map(|_| rng.random::<f64>()).collect();
            features.push(featurize(&Image::new(w, h, data).unwrap()));
            let sites = rng.random_range(3..=20);
            partitions.push(Partition::from_labels(w, h, &voronoi_labels(&mut rng, w, h, sites)));
        }
        let adjacency: Vec<_> = partitions.iter().map(region_adjacency).collect();
        let params = ModelParams::init(
            ModelDims {
                features: 11,
                hidden: 6,
                embed: 4,
                classes: class_count + 1,
            },
            0.1,
            fixture,
        )
        .unwrap();
        let mut pool = LabeledPool::new();
        for (i, p) in partitions.iter().enumerate() {
            for r in 0..p.region_count() {
                if rng.random_bool(0.4) {
                    let ids: Vec<u8> = (0..=class_count)
                        .filter(|_| rng.random_bool(0.35))
                        .map(|k| mask_id(k, class_count))
                        .collect();
                    let label = MultiClassLabel::new(ids)
                        .unwrap_or_else(|| MultiClassLabel::single(rng.random_range(0..class_count) as u8));
                    pool.insert(RegionRef::new(i, r), label, 1).unwrap();
                }
            }
        }
        let expansion = fixture % 4 != 3;
        let options = PseudoOptions {
            localization: true,
            expansion,
        };
        let map = build_pseudo_dataset(&pool, &partitions, &adjacency, &features, &params, class_count, options).unwrap();
        let mut ok = true;
        for i in 0..images {
            let emb = embed_map(&features[i], &params).unwrap();
            let probs = predict_map(&features[i], &params).unwrap();
            let brute = brute_pseudo(i as u32, partitions[i].region_of(), w, &pool, &emb, &probs, class_count, expansion);
            pixels_checked += brute.len();
            ok &= brute.iter().zip(&map.images[i]).all(|(a, b)| same_label(a, b));
        }
        if !ok {
            mismatched_fixtures += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = mismatched_fixtures == 0 && secs < 30.0;
    verdict(
        3,
        pass,
        &format!("fixtures=20 mismatched={mismatched_fixtures} pixels={pixels_checked} runtime={secs:.2}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 4: oracle dilation vs brute force
// ---------------------------------------------------------------------------

fn brute_multiclass(region: u32, region_of: &[u32], w: usize, h: usize, mask: &Mask) -> Vec<u8> {
    let members: Vec<usize> = (0..w * h).filter(|&p| region_of[p] == region).collect();
    let is_boundary = |p: usize| {
        let (x, y) = (p % w, p / w);
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            return true;
        }
        [p - 1, p + 1, p - w, p + w].iter().any(|&q| region_of[q] != region)
    };
    let boundary: Vec<usize> = members.iter().copied().filter(|&p| is_boundary(p)).collect();
    let mut classes: Vec<u8> = members
        .iter()
        .filter(|&&p| {
            !boundary.iter().any(|&b| {
                let dx = (p % w) as i64 - (b % w) as i64;
                let dy = (p / w) as i64 - (b / w) as i64;
                dx.abs() <= 2 && dy.abs() <= 2
            })
        })
        .map(|&p| mask.at(p))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        let mut counts = BTreeMap::new();
        for &p in &members {
            *counts.entry(mask.at(p)).or_insert(0usize) += 1;
        }
        let max = *counts.values().max().unwrap();
        classes.push(*counts.iter().find(|(_, &n)| n == max).unwrap().0);
    }
    classes
}

#[test]
fn criterion_4_multiclass_labels_match_brute_dilation() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut mismatches = 0;
    let mut single_cost_violations = 0;
    let mut regions_checked = 0;
    let mut single_regions = 0;
    for _ in 0..50 {
        let (w, h) = (rng.random_range(10..=48), rng.random_range(10..=48));
        let sites = rng.random_range(2..=12);
        let part = Partition::from_labels(w, h, &voronoi_labels(&mut rng, w, h, sites));
        let class_count = rng.random_range(2..=5);
        let mask_sites = rng.random_range(1..=15);
        let cells = voronoi_labels(&mut rng, w, h, mask_sites);
        let cell_class: Vec<u8> = (0..mask_sites)
            .map(|_| {
                if rng.random_bool(0.1) {
                    UNDEF
                } else {
                    rng.random_range(0..class_count) as u8
                }
            })
            .collect();
        let mask = Mask::new(w, h, class_count, cells.iter().map(|&c| cell_class[c as usize]).collect()).unwrap();
        let masks = vec![mask.clone()];
        let parts = vec![part.clone()];
        for r in 0..part.region_count() as u32 {
            regions_checked += 1;
            let got = multiclass_label(r, &mask, &part);
            if got.classes() != brute_multiclass(r, part.region_of(), w, h, &mask) {
                mismatches += 1;
            }
            let mut present: Vec<u8> = part.pixels(r).iter().map(|&p| mask.at(p as usize)).collect();
            present.sort_unstable();
            present.dedup();
            if present.len() == 1 {
                single_regions += 1;
                for mode in [LabelMode::Dominant, LabelMode::MultiClass] {
                    let mut oracle = Oracle::new(&masks, &parts, mode);
                    let label = oracle.label(RegionRef::new(0, r as usize));
                    if oracle.clicks() != 1 || label.classes() != present {
                        single_cost_violations += 1;
                    }
                }
            }
        }
    }
    let pass = mismatches == 0 && single_cost_violations == 0 && single_regions > 0;
    verdict(
        4,
        pass,
        &format!(
            "partitions=50 regions={regions_checked} mismatches={mismatches} single_class_regions={single_regions} single_cost_violations={single_cost_violations}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criteria 5 and 6: synthetic benchmark
// ---------------------------------------------------------------------------

/// Fixed benchmark setup: 50 train + 20 val images of 128×128 with 6 skewed
/// classes, SLIC target 16, 5 rounds of 600 clicks, seeds 0..=2. The model
/// and generator settings come from the defaults.
fn benchmark_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(
        "rounds = 5
         budget = 600
         partitioner = slic
         region_size = 16
         seeds = 0,1,2
         synthetic_width = 128
         synthetic_height = 128
         synthetic_classes = 6
         train_count = 50
         val_count = 20",
    )
    .unwrap();
    cfg
}

struct Benchmark {
    mul_pixbal: Vec<Vec<RoundReport>>,
    dom_pixbal: Vec<Vec<RoundReport>>,
    mul_random: Vec<Vec<RoundReport>>,
    main_secs: f64,
    ablation: Vec<(Variant, Vec<Vec<RoundReport>>)>,
}

fn benchmark() -> &'static Benchmark {
    static BENCH: OnceLock<Benchmark> = OnceLock::new();
    BENCH.get_or_init(|| {
        let base = benchmark_config();
        let started = Instant::now();
        let ws = Workspace::load(&base).unwrap();
        let run = |mode: LabelMode, sampler: Sampler| {
            let mut cfg = base.clone();
            cfg.mode = mode;
            cfg.sampler = sampler;
            run_experiment_on(&ws, &cfg, None).unwrap()
        };
        let mul_pixbal = run(LabelMode::MultiClass, Sampler::PixBal);
        let dom_pixbal = run(LabelMode::Dominant, Sampler::PixBal);
        let mul_random = run(LabelMode::MultiClass, Sampler::Random);
        let main_secs = started.elapsed().as_secs_f64();
        let ablation = Variant::ALL
            .iter()
            .map(|&v| {
                let runs = if v == Variant::Full {
                    mul_pixbal.clone()
                } else {
                    run_experiment_on(&ws, &v.apply(&base), None).unwrap()
                };
                (v, runs)
            })
            .collect();
        Benchmark {
            mul_pixbal,
            dom_pixbal,
            mul_random,
            main_secs,
            ablation,
        }
    })
}

#[test]
fn criterion_5_multiclass_pixbal_leads() {
    let b = benchmark();
    let last = b.mul_pixbal[0].len() - 1;
    let [mp, dp, mr] = [&b.mul_pixbal, &b.dom_pixbal, &b.mul_random].map(|r| 100.0 * mean_miou_at(r, last));
    let pass = mp >= dp + 1.0 && mp >= mr + 1.0 && b.main_secs < 900.0;
    verdict(
        5,
        pass,
        &format!(
            "final mIoU mul+pixbal={mp:.2} dom+pixbal={dp:.2} mul+random={mr:.2} margins=({:+.2},{:+.2}) runtime={:.0}s",
            mp - dp,
            mp - mr,
            b.main_secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_ablation_rows_are_ordered() {
    let b = benchmark();
    let avg: BTreeMap<char, f64> = b.ablation.iter().map(|(v, r)| (v.row(), 100.0 * mean_round_average(r))).collect();
    let tol = 0.5;
    let weakest = avg[&'d'].min(avg[&'e']);
    let pass = weakest <= avg[&'c'] + tol && avg[&'c'] <= avg[&'b'] + tol && avg[&'b'] <= avg[&'a'] + tol;
    let rows: Vec<String> = avg.iter().map(|(r, m)| format!("({r})={m:.2}")).collect();
    verdict(6, pass, &format!("5-round-average mIoU {}", rows.join(" ")));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 7: byte-identical reruns through the CLI
// ---------------------------------------------------------------------------

fn run_cli(config: &Path, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_segal"))
        .args(["run", "--seed", "0", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("spawn segal");
    assert!(status.success(), "segal run failed: {status}");
}

#[test]
fn criterion_7_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.txt");
    std::fs::write(&config, tiny_config().to_text()).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_cli(&config, &a);
    run_cli(&config, &b);
    let same = |name: &str| std::fs::read(a.join(name)).unwrap() == std::fs::read(b.join(name)).unwrap();
    let csv = same("results_seed0.csv");
    let ckpt = same("model_seed0.bin");
    let pass = csv && ckpt;
    verdict(7, pass, &format!("results_csv_identical={csv} checkpoint_identical={ckpt}"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 8: partition and adjacency properties
// ---------------------------------------------------------------------------

fn brute_adjacency(part: &Partition) -> Vec<Vec<u32>> {
    let (w, h) = (part.width(), part.height());
    let mut sets = vec![std::collections::BTreeSet::new(); part.region_count()];
    for y in 0..h {
        for x in 0..w {
            for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                    continue;
                }
                let a = part.region_at(y * w + x);
                let b = part.region_at(qy as usize * w + qx as usize);
                if a != b {
                    sets[a as usize].insert(b);
                }
            }
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

fn connected(part: &Partition, region: u32) -> bool {
    let w = part.width();
    let pixels = part.pixels(region);
    let mut seen = std::collections::HashSet::from([pixels[0] as usize]);
    let mut stack = vec![pixels[0] as usize];
    while let Some(p) = stack.pop() {
        let (x, y) = (p % w, p / w);
        let mut nb = Vec::new();
        if x > 0 {
            nb.push(p - 1);
        }
        if x + 1 < w {
            nb.push(p + 1);
        }
        if y > 0 {
            nb.push(p - w);
        }
        if y + 1 < part.height() {
            nb.push(p + w);
        }
        for q in nb {
            if part.region_at(q) == region && seen.insert(q) {
                stack.push(q);
            }
        }
    }
    seen.len() == pixels.len()
}

#[test]
fn criterion_8_partition_and_adjacency_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut failures = Vec::new();
    for i in 0..100 {
        let spec = SyntheticSpec {
            width: rng.random_range(12..=72),
            height: rng.random_range(12..=72),
            class_count: rng.random_range(2..=6),
            site_count: rng.random_range(6..=40),
            noise_std: rng.random_range(0.0..0.3),
            class_frequency_skew: rng.random_range(0.0..2.0),
        };
        let (img, _) = generate_synthetic(&spec, i).unwrap();
        let part = if i % 5 == 4 {
            grid_partition(&img, rng.random_range(3..=20))
        } else {
            let params = SlicParams {
                target_size: rng.random_range(4..=20),
                compactness: rng.random_range(1.0..30.0),
                iterations: rng.random_range(1..=10),
            };
            slic_partition(&img, &params).unwrap()
        };
        let n = img.width() * img.height();
        let cover = part.region_of().len() == n
            && (0..part.region_count() as u32).map(|r| part.pixels(r).len()).sum::<usize>() == n
            && (0..n).all(|p| part.pixels(part.region_at(p)).contains(&(p as u32)));
        let conn = (0..part.region_count() as u32).all(|r| connected(&part, r));
        let adj = region_adjacency(&part);
        let brute = brute_adjacency(&part);
        let equal = (0..part.region_count() as u32).all(|r| adj.neighbors(r) == brute[r as usize].as_slice());
        let symmetric = (0..part.region_count() as u32)
            .all(|r| adj.neighbors(r).iter().all(|&q| q != r && adj.neighbors(q).contains(&r)));
        if !(cover && conn && equal && symmetric && part.check_invariants().is_ok()) {
            failures.push(i);
        }
    }
    let pass = failures.is_empty();
    verdict(8, pass, &format!("images=100 failures={failures:?}"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 9: click accounting from the serialized pool
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_clicks_recomputed_from_pool() {
    let tmp = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for mode in [LabelMode::MultiClass, LabelMode::Dominant] {
        let mut cfg = tiny_config();
        cfg.mode = mode;
        cfg.rounds = 3;
        cfg.seeds = vec![0, 1];
        let out = tmp.path().join(mode.to_string());
        let runs = run_experiment(&cfg, Some(&out)).unwrap();
        for (seed, reports) in cfg.seeds.iter().zip(&runs) {
            let pool = LabeledPool::read_jsonl(&pool_path(&out, *seed)).unwrap();
            for r in reports {
                let entries: Vec<_> = pool.iter().filter(|(_, e)| e.round <= r.round).collect();
                let expected = match mode {
                    LabelMode::MultiClass => entries.iter().map(|(_, e)| e.label.len()).sum::<usize>(),
                    LabelMode::Dominant => entries.len(),
                };
                pass &= expected == r.cum_clicks;
            }
            let last = reports.last().unwrap();
            details.push(format!("{mode}/seed{seed}: reported={} pool={}", last.cum_clicks, pool.clicks()));
            if mode == LabelMode::Dominant {
                pass &= pool.iter().all(|(_, e)| e.label.is_single());
            }
        }
    }
    verdict(9, pass, &details.join(" "));
    assert!(pass);
}
