//! Acceptance criteria 1–10. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line; exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdmesh::body_model::{forward, make_toy_model, BodyParams, Vec3};
use crowdmesh::camera::NormBox;
use crowdmesh::decoder::{
    decoder_layer, enumerate_pairs, init_weights, interaction_guided_refiner, update_ref_box, DecoderConfig,
    HumanQueryState, InteractionTokenSet, RefinerBlock,
};
use crowdmesh::interaction::ZeroProvider;
use crowdmesh::losses::LossWeights;
use crowdmesh::matching::{confidence_cost, CostWeights};
use crowdmesh::metrics::{giou, mpjpe, pa_mpjpe};
use crowdmesh::numerics::Matrix;
use crowdmesh::pipeline::{
    batch_equivalence_suite, evaluate, gen_scenes, hungarian_suite, lbs_rigid_suite, mask_isolation_suite,
    procrustes_suite, ragged_batches, run_forward, run_forward_all, selftest, Fault, ModelConfig, RunConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> NormBox {
    NormBox::clamped(
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.001..1.0),
        rng.gen_range(0.001..1.0),
    )
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}

fn small_config() -> RunConfig {
    RunConfig {
        scene_count: 4,
        model: ModelConfig {
            toy_vertices: 96,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    }
}

fn c1_hungarian() -> Outcome {
    let start = Instant::now();
    let (cases, failures, detail) = hungarian_suite(20_240_601, 1000);
    let secs = start.elapsed().as_secs_f64();
    ensure(failures == 0, || format!("{failures}/{cases} mismatches: {detail}"))?;
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("{cases} matrices up to 7x7 match brute force in {secs:.2} s"))
}

fn c2_mask_isolation() -> Outcome {
    let example = &ragged_batches(11, 1, 16).map_err(|e| e.to_string())?[0];
    ensure(example.tokens.group_sizes == [3, 3, 2, 2, 4, 4], || {
        format!("worked example groups {:?}", example.tokens.group_sizes)
    })?;
    let (cases, failures, detail) = mask_isolation_suite(11, 200, None);
    ensure(failures == 0, || format!("{failures}/{cases} leaks: {detail}"))?;
    let (_, caught, _) = mask_isolation_suite(11, 200, Some(Fault::MaskBit));
    ensure(caught > 0, || "flipped mask bit went unnoticed".into())?;
    Ok(format!("{cases} ragged batches isolated bit-exactly; injected fault caught in {caught}"))
}

fn c3_batch_equivalence() -> Outcome {
    let (cases, failures, detail) = batch_equivalence_suite(11, 200);
    ensure(failures == 0, || format!("{failures}/{cases}: {detail}"))?;
    Ok(format!("{cases} batches, {detail}"))
}

fn c4_pair_count() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 1..=8usize {
        for r in 0..=8usize {
            let humans: Vec<NormBox> = (0..n).map(|_| random_box(&mut rng)).collect();
            let objects: Vec<NormBox> = (0..r).map(|_| random_box(&mut rng)).collect();
            let got = enumerate_pairs(&humans, &objects).len();
            ensure(got == n * (n + r - 1), || format!("n={n} r={r}: {got} pairs"))?;
        }
    }
    Ok("n*(n+r-1) pairs for n in 1..=8, r in 0..=8".into())
}

fn c5_ref_box_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let b = random_box(&mut rng);
        let u = update_ref_box(&b, [0.0; 4]);
        for (x, y) in u.to_array().iter().zip(b.to_array()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("zero delta moved a box by {worst:e}"))?;

    let cfg = DecoderConfig { joint_count: 6, shape_count: 3, ..DecoderConfig::desk() };
    let w = init_weights(&cfg, 5).map_err(|e| e.to_string())?;
    let image = Matrix::uniform(10, cfg.d_model, 1.0, &mut rng);
    let state = HumanQueryState { queries: w.query_embed.clone(), ref_boxes: w.ref_boxes.clone(), layer: 0 };
    let provider = ZeroProvider { feature_dim: cfg.interaction_dim };
    let (next, _) = decoder_layer(&state, &image, &[], &provider, &w).map_err(|e| e.to_string())?;
    let mut layer0 = 0.0f64;
    for (a, b) in next.ref_boxes.iter().zip(&w.ref_boxes) {
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            layer0 = layer0.max((x - y).abs());
        }
    }
    ensure(layer0 <= 1e-9, || format!("zero-initialized box head moved layer-0 boxes by {layer0:e}"))?;
    Ok(format!("10000 boxes within {worst:.1e}; layer-0 boxes within {layer0:.1e}"))
}

fn c6_body_model() -> Outcome {
    let model = make_toy_model(6, 120, 24, 10).map_err(|e| e.to_string())?;
    let rest = forward(&model, &BodyParams::zeros(24, 10)).map_err(|e| e.to_string())?;
    ensure(rest.vertices == model.template(), || "rest pose differs from template".into())?;

    let (cases, failures, detail) = lbs_rigid_suite(6, 100);
    ensure(failures == 0, || format!("rigid equivariance: {detail}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let b1: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b2: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let at = |shape: Vec<f64>| forward(&model, &BodyParams::new(vec![[0.0; 3]; 24], shape).unwrap()).unwrap();
        let (o1, o2, o12) = (at(b1), at(b2), at(sum));
        for (((v1, v2), v12), t) in o1.vertices.iter().zip(&o2.vertices).zip(&o12.vertices).zip(model.template()) {
            worst = worst.max(((v12 - t) - ((v1 - t) + (v2 - t))).amax());
        }
    }
    ensure(worst <= 1e-12, || format!("shape linearity off by {worst:e}"))?;
    Ok(format!("template exact; {} rigid motions; shape linearity {worst:.1e}", cases - 1))
}

fn c7_metrics() -> Outcome {
    let (_, failures, detail) = procrustes_suite(7, 100);
    ensure(failures == 0, || format!("similarity invariance: {detail}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let a = random_points(&mut rng, 17);
        let b = random_points(&mut rng, 17);
        let (pa, m) = (pa_mpjpe(&a, &b).map_err(|e| e.to_string())?, mpjpe(&a, &b).map_err(|e| e.to_string())?);
        ensure(pa <= m + 1e-9, || format!("pair {i}: PA-MPJPE {pa} > MPJPE {m}"))?;
    }
    for i in 0..10_000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        ensure(giou(&a, &a) == 1.0, || format!("pair {i}: GIoU(b, b) = {}", giou(&a, &a)))?;
        ensure((giou(&a, &b) - giou(&b, &a)).abs() <= 1e-15, || format!("pair {i}: GIoU asymmetric"))?;
    }
    let gt = random_points(&mut rng, 24);
    let moved: Vec<Vec3> = gt
        .iter()
        .map(|p| {
            let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            p + d.normalize() * 0.030
        })
        .collect();
    let e = mpjpe(&moved, &gt).map_err(|e| e.to_string())?;
    ensure((e - 30.0).abs() <= 1e-6, || format!("+30 mm perturbation gives {e}"))?;
    Ok(format!("similarity invariance, PA<=MPJPE x1000, GIoU x10000, +30 mm -> {e:.9}"))
}

fn c8_spot_values() -> Outcome {
    let c = confidence_cost(0.5, 2.0).0;
    ensure((c - 0.173287).abs() <= 1e-6, || format!("c_conf(0.5, 2) = {c}"))?;
    let cw = CostWeights::default();
    ensure([cw.conf, cw.bbox, cw.giou, cw.kpts] == [0.25, 1.0, 1.0, 20.0], || format!("{cw:?}"))?;
    let cw_json = serde_json::to_string(&cw).map_err(|e| e.to_string())?;
    ensure(cw_json.starts_with(r#"{"conf":0.25,"bbox":1.0,"giou":1.0,"kpts":20.0"#), || cw_json.clone())?;
    let lw = LossWeights::default();
    ensure(lw.active() == [0.5, 5.0, 3.0, 8.0, 40.0, 2.0, 1.0] && lw.map == 0.0, || format!("{lw:?}"))?;
    let lw_json = serde_json::to_string(&lw).map_err(|e| e.to_string())?;
    ensure(
        lw_json == r#"{"map":0.0,"depth":0.5,"pose":5.0,"shape":3.0,"j3ds":8.0,"j2ds":40.0,"box":2.0,"det":1.0}"#,
        || lw_json.clone(),
    )?;
    ensure(LossWeights { map: 4.0, ..lw }.validate().is_err(), || "nonzero map weight accepted".into())?;
    Ok(format!("c_conf = {c:.6}; weights {cw_json} / {lw_json}"))
}

fn c9_determinism() -> Outcome {
    let cfg = small_config();
    let model = cfg.body_model().map_err(|e| e.to_string())?;
    let report = || -> Result<String, String> {
        let scenes = gen_scenes(&cfg, cfg.scene_count).map_err(|e| e.to_string())?;
        let w = cfg.init_weights().map_err(|e| e.to_string())?;
        let p = run_forward_all(&scenes, &w, &model, &cfg).map_err(|e| e.to_string())?;
        evaluate(&scenes, &p, &model, &cfg)
            .and_then(|r| r.to_json_string())
            .map_err(|e| e.to_string())
    };
    let pool = |n: usize| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let a = report()?;
    ensure(a == report()?, || "two runs differ".into())?;
    ensure(a == pool(1).install(report)?, || "single-thread run differs".into())?;
    ensure(a == pool(4).install(report)?, || "four-thread run differs".into())?;

    let start = Instant::now();
    let st = selftest(0, None);
    let secs = start.elapsed().as_secs_f64();
    ensure(st.passed(), || st.table())?;
    ensure(secs < 60.0, || format!("selftest took {secs:.1} s"))?;
    Ok(format!("report bytes identical across runs and 1/4 threads; selftest {secs:.2} s"))
}

fn c10_degenerate() -> Outcome {
    let mut cfg = RunConfig { persons: [1, 1], objects: [0, 0], scene_count: 1, ..small_config() };
    cfg.decoder.n_queries = 1;
    let model = cfg.body_model().map_err(|e| e.to_string())?;
    let scenes = gen_scenes(&cfg, 1).map_err(|e| e.to_string())?;
    let w = cfg.init_weights().map_err(|e| e.to_string())?;
    let preds = run_forward_all(&scenes, &w, &model, &cfg).map_err(|e| e.to_string())?;
    evaluate(&scenes, &preds, &model, &cfg).map_err(|e| e.to_string())?;
    ensure(preds[0].token_counts.iter().all(|&t| t == 0), || "n=1, r=0 produced tokens".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let block = RefinerBlock::init(&cfg.decoder, &mut rng);
    let q = Matrix::uniform(1, cfg.decoder.d_model, 1.0, &mut rng);
    let empty = InteractionTokenSet::new(Matrix::zeros(0, cfg.decoder.d_model), vec![0]).map_err(|e| e.to_string())?;
    let refined = interaction_guided_refiner(&q, &empty, &block).map_err(|e| e.to_string())?;
    ensure(refined == q, || "empty group changed the query".into())?;

    let mut hi = cfg.clone();
    hi.conf_threshold = 1.0;
    let none = run_forward(&scenes[0], 0, &w, &model, &hi).map_err(|e| e.to_string())?;
    let mut lo = cfg.clone();
    lo.conf_threshold = 0.0;
    let all = run_forward(&scenes[0], 0, &w, &model, &lo).map_err(|e| e.to_string())?;
    ensure(none.kept.is_empty(), || format!("threshold 1.0 kept {}", none.kept.len()))?;
    ensure(all.kept.len() == 1, || format!("threshold 0.0 kept {}", all.kept.len()))?;
    Ok("n=1, r=0 runs end to end; empty group passes queries through; thresholds 1.0/0.0 keep 0/1".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("hungarian matches brute force", c1_hungarian),
        ("mask isolation", c2_mask_isolation),
        ("batch equivalence", c3_batch_equivalence),
        ("pair-count law", c4_pair_count),
        ("reference-box identity", c5_ref_box_identity),
        ("body model invariants", c6_body_model),
        ("metric invariants", c7_metrics),
        ("cost and loss spot values", c8_spot_values),
        ("end-to-end determinism", c9_determinism),
        ("degenerate paths", c10_degenerate),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({ms} ms): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({ms} ms): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
