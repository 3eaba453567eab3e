//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Tolerances are pinned below.

use std::path::Path;
use std::time::{Duration, Instant};

use basn::analysis::Detector;
use basn::codec::{
    bser, build_plan, bytes_to_bits, embed, embed_bits, extract_with_plan, read_bits, received_bits, CapacityMap,
    PayloadFrame, PlanConfig,
};
use basn::image::{AttentionMap, FloatImage, ImageTensor};
use basn::itc::{itc_loss, itc_loss_with_grad, ItcTrainConfig};
use basn::mfd::{mfd_loss, mfd_loss_with_grad};
use basn::penalty::{itc_area_penalty, mfd_area_penalty};
use basn::pipeline::data::load_corpus;
use basn::pipeline::evaluate::{SCENARIO_LSB_FULL, SCENARIO_NULL};
use basn::pipeline::stego::{load_attention_models, plan_for, resolve_codec};
use basn::pipeline::{
    cmd_embed, cmd_evaluate, cmd_train, CodecOverrides, EmbedRequest, EvaluateRequest, ModelSet, RunConfig, Stage,
};
use basn::rng::stage_rng;
use basn::texture::{texture_loss, texture_loss_with_grad, var_pool_2d};
use basn::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

const VARPOOL_TOL: f64 = 1e-6;
const VARPOOL_BUDGET: Duration = Duration::from_secs(10);
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_COORDS: usize = 50;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const FD_STEP: f64 = 1e-6;
const PENALTY_TOL: f64 = 1e-9;
const ROUND_TRIP_CASES: usize = 1000;
const ROUND_TRIP_BUDGET: Duration = Duration::from_secs(120);
const LSM_IMAGES: usize = 20;
const PS_LIMITS: [f64; 3] = [0.6, 0.8, 1.2];
const TRAIN_BUDGET: Duration = Duration::from_secs(4 * 3600);
const TEXTURE_DROP: f64 = 0.5;
const FMRL_DROP: f64 = 0.3;
const DETECTOR_AUC_MIN: f64 = 0.9;
const NULL_AUC: (f64, f64) = (0.4, 0.6);

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.failures += (!ok) as usize;
    }

    fn info(&self, name: &str, detail: String) {
        println!("INFO {name}: {detail}");
    }
}

fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Direct windowed population variance with replicate padding.
fn naive_var_pool(x: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let at = |y: isize, c: isize| x[y.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for c in 0..w as isize {
            let vals: Vec<f64> = (-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| at(y + dy, c + dx))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            out.push(vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64);
        }
    }
    out
}

fn varpool_oracle(rep: &mut Report) {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut r = rng(11);
    for _ in 0..100 {
        let x: Vec<f64> = (0..256).map(|_| r.gen()).collect();
        let got = var_pool_2d(&Tensor::new(vec![16, 16], x.clone()).unwrap(), 7).unwrap();
        for (a, b) in got.data().iter().zip(naive_var_pool(&x, 16, 16, 7)) {
            worst = worst.max((a - b).abs());
        }
    }
    let dt = t0.elapsed();
    rep.check(
        "varpool2d_oracle",
        worst <= VARPOOL_TOL && dt < VARPOOL_BUDGET,
        format!("100 maps 16x16 k=7, max deviation {worst:.3e} (tol {VARPOOL_TOL:.0e}), {dt:.2?}"),
    );
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Worst relative error at `GRAD_COORDS` coordinates of `x` between the
/// analytic gradient and central differences of `f`.
fn fd_check(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_COORDS {
        let i = r.gen_range(0..x.len());
        let mut p = x.to_vec();
        p[i] += FD_STEP;
        let up = f(&p);
        p[i] -= 2.0 * FD_STEP;
        let down = f(&p);
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn interior(n: usize, r: &mut Xoshiro256StarStar) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(0.05..0.95)).collect()
}

fn gradient_checks(rep: &mut Report) {
    let t0 = Instant::now();
    let mut r = rng(21);
    let img = FloatImage::new(3, 8, 8, interior(192, &mut r)).unwrap();
    let (_, g) = texture_loss_with_grad(&img, 7).unwrap();
    let tex = fd_check(img.data(), g.data(), |x| texture_loss(&FloatImage::new(3, 8, 8, x.to_vec()).unwrap(), 7).unwrap(), 1);

    let cfg = ItcTrainConfig::default();
    let cover = FloatImage::new(3, 8, 8, interior(192, &mut r)).unwrap();
    let att = AttentionMap::new(8, 8, interior(64, &mut r)).unwrap();
    let (_, ga) = itc_loss_with_grad(&cover, &att, &cfg).unwrap();
    let itc = fd_check(att.values(), &ga, |a| itc_loss(&cover, &AttentionMap::new(8, 8, a.to_vec()).unwrap(), &cfg).unwrap().total, 2);

    let c = FloatImage::new(3, 8, 8, interior(192, &mut r)).unwrap();
    let s = FloatImage::new(3, 8, 8, interior(192, &mut r)).unwrap();
    let a_c = AttentionMap::new(8, 8, interior(64, &mut r)).unwrap();
    let a_s = AttentionMap::new(8, 8, interior(64, &mut r)).unwrap();
    let f_c = Tensor::new(vec![1, 4, 2, 2], interior(16, &mut r)).unwrap();
    let f_s = Tensor::new(vec![1, 4, 2, 2], interior(16, &mut r)).unwrap();
    let (_, gm) = mfd_loss_with_grad(&c, &s, &a_c, &a_s, &f_c, &f_s).unwrap();
    // one flat vector over every differentiable input
    let x: Vec<f64> = [s.data(), a_c.values(), a_s.values(), f_s.data()].concat();
    let g: Vec<f64> = [gm.stego, gm.a_c, gm.a_s, gm.f_s].concat();
    let eval = |x: &[f64]| {
        let s = FloatImage::new(3, 8, 8, x[..192].to_vec()).unwrap();
        let a1 = AttentionMap::new(8, 8, x[192..256].to_vec()).unwrap();
        let a2 = AttentionMap::new(8, 8, x[256..320].to_vec()).unwrap();
        let fs = Tensor::new(vec![1, 4, 2, 2], x[320..].to_vec()).unwrap();
        mfd_loss(&c, &s, &a1, &a2, &f_c, &fs).unwrap().total
    };
    let mfd = fd_check(&x, &g, eval, 3);
    let dt = t0.elapsed();
    for (name, e) in [("gradcheck_texture_loss", tex), ("gradcheck_itc_loss", itc), ("gradcheck_mfd_loss", mfd)] {
        rep.check(
            name,
            e < GRAD_REL_TOL && dt < GRAD_BUDGET,
            format!("8x8, {GRAD_COORDS} coords, worst rel err {e:.2e} (tol {GRAD_REL_TOL:.0e}), all checks {dt:.2?}"),
        );
    }
}

fn penalties(rep: &mut Report) {
    let vals = [0.0, 0.5, 1.0].map(|e| itc_area_penalty(e).unwrap());
    rep.check(
        "itc_penalty_values",
        vals == [0.0, 0.25, 1.0],
        format!("E=(0,0.5,1) -> {vals:?}, exact"),
    );
    let p = mfd_area_penalty(0.0125);
    rep.check(
        "mfd_penalty_at_0.0125",
        (p - 0.5).abs() <= PENALTY_TOL,
        format!("{p:.12} (tol {PENALTY_TOL:.0e})"),
    );
    let (argmin, _) = (1..10_000)
        .map(|i| i as f64 / 10_000.0)
        .map(|e| (e, mfd_area_penalty(e)))
        .fold((0.0, f64::INFINITY), |b, (e, v)| if v < b.1 { (e, v) } else { b });
    rep.check(
        "mfd_penalty_minimum",
        argmin > 0.0 && argmin < 0.5,
        format!("grid argmin E = {argmin:.4}, required in (0, 0.5)"),
    );
}

fn random_cap(r: &mut Xoshiro256StarStar, h: usize, w: usize) -> CapacityMap {
    let bits = (0..h * w).flat_map(|_| [r.gen_range(0..=4u8); 3]).collect();
    CapacityMap::new(h, w, 3, 4, bits).unwrap()
}

fn random_image(r: &mut Xoshiro256StarStar, h: usize, w: usize) -> ImageTensor {
    let mut b = vec![0u8; h * w * 3];
    r.fill_bytes(&mut b);
    ImageTensor::new(h, w, 3, b).unwrap()
}

fn round_trip(rep: &mut Report) {
    let t0 = Instant::now();
    let mut r = rng(31);
    let (mut ok, mut run) = (0usize, 0usize);
    let mut worst_bser = 0.0f64;
    while run < ROUND_TRIP_CASES {
        let (h, w) = (r.gen_range(8..=32), r.gen_range(8..=32));
        let cap = random_cap(&mut r, h, w);
        let lsm_k = r.gen_range(0..=2u8);
        let ps = r.gen_bool(0.5);
        let cfg = PlanConfig {
            lsm_k,
            ps_seed: ps.then(|| r.gen()),
            ps_limit_bpp: (ps && r.gen_bool(0.5)).then(|| r.gen_range(0.3..2.0)),
        };
        let plan = build_plan(&cap, cfg).unwrap();
        if plan.payload_capacity() == 0 {
            continue;
        }
        run += 1;
        let n = r.gen_range(1..=plan.payload_capacity());
        let body: Vec<bool> = (0..n).map(|_| r.gen()).collect();
        let cover = random_image(&mut r, h, w);
        let stego = embed(&cover, &plan, &PayloadFrame::from_bits(body.clone())).unwrap();
        let back = extract_with_plan(&stego, &plan).unwrap();
        let b = bser(&body, back.body()).unwrap();
        worst_bser = worst_bser.max(b);
        ok += (back.body() == body.as_slice() && b == 0.0) as usize;
    }
    let dt = t0.elapsed();
    rep.check(
        "oracle_round_trip",
        ok == ROUND_TRIP_CASES && dt < ROUND_TRIP_BUDGET,
        format!("{ok}/{ROUND_TRIP_CASES} bit-exact, worst BSER {worst_bser}%, {dt:.2?}"),
    );
}

fn lsm_restoration(rep: &mut Report) {
    let mut r = rng(41);
    let mut violations = 0usize;
    let mut checked = 0usize;
    for k in [1u8, 2] {
        for _ in 0..LSM_IMAGES {
            let cap = random_cap(&mut r, 24, 24);
            let plan = build_plan(&cap, PlanConfig::plain(k)).unwrap();
            let cover = random_image(&mut r, 24, 24);
            let bits: Vec<bool> = (0..plan.len()).map(|_| r.gen()).collect();
            let stego = embed_bits(&cover, &plan, &bits).unwrap();
            let mask = (1u8 << k) - 1;
            for (a, b) in cover.bytes().iter().zip(stego.bytes()) {
                checked += 1;
                violations += ((a & mask) != (b & mask)) as usize;
            }
        }
    }
    rep.check(
        "lsm_restoration",
        violations == 0,
        format!("lsm_k in {{1,2}}, {LSM_IMAGES} images each, {checked} bytes checked, {violations} low-plane changes"),
    );
}

fn ps_budget(rep: &mut Report) {
    let mut r = rng(51);
    let mut worst = Vec::new();
    let mut ok = true;
    for limit in PS_LIMITS {
        let mut max_bpp = 0.0f64;
        for _ in 0..20 {
            let cap = random_cap(&mut r, 32, 32);
            let cfg = PlanConfig {
                lsm_k: r.gen_range(0..=1),
                ps_seed: Some(r.gen()),
                ps_limit_bpp: Some(limit),
            };
            let plan = build_plan(&cap, cfg).unwrap();
            let cover = random_image(&mut r, 32, 32);
            let bits: Vec<bool> = (0..plan.len()).map(|_| r.gen()).collect();
            let stego = embed_bits(&cover, &plan, &bits).unwrap();
            ok &= read_bits(&stego, &plan, plan.len()).unwrap() == bits;
            max_bpp = max_bpp.max(plan.bpp());
        }
        ok &= max_bpp <= limit;
        worst.push(format!("{limit}: max {max_bpp:.4}"));
    }
    rep.check("ps_budget", ok, format!("bpp <= limit, {}", worst.join(", ")));
}

/// Mean BSER of base and finetuned models on the held-out covers where both
/// can carry a payload, each cover carrying the same payload under both.
fn bser_pre_post(cfg: &RunConfig) -> (f64, f64, usize) {
    let rc = resolve_codec(cfg, &cfg.codec.strategy, &CodecOverrides::default()).unwrap();
    let base = load_attention_models(cfg, ModelSet::Base).unwrap();
    let ft = load_attention_models(cfg, ModelSet::Finetuned).unwrap();
    let covers = load_corpus(cfg).unwrap().holdout;
    let (mut pre, mut post, mut n) = (0.0, 0.0, 0usize);
    for (i, cover) in covers.iter().enumerate() {
        let (_, pb) = plan_for(cover, &base, &rc.codec).unwrap();
        let (_, pf) = plan_for(cover, &ft, &rc.codec).unwrap();
        let bytes = pb.payload_capacity().min(pf.payload_capacity()) / 8;
        if bytes == 0 {
            continue;
        }
        let mut payload = vec![0u8; bytes];
        stage_rng(cfg.seed, &format!("acceptance/payload/{i}")).fill_bytes(&mut payload);
        let sent = bytes_to_bits(&payload);
        let measure = |plan, models| {
            let stego = embed(cover, plan, &PayloadFrame::from_bytes(&payload)).unwrap();
            let (_, rplan) = plan_for(&stego, models, &rc.codec).unwrap();
            bser(&sent, &received_bits(&stego, &rplan, sent.len()).unwrap()).unwrap()
        };
        pre += measure(&pb, &base);
        post += measure(&pf, &ft);
        n += 1;
    }
    let d = n.max(1) as f64;
    (pre / d, post / d, n)
}

fn log_bytes(cfg: &RunConfig) -> Vec<Vec<u8>> {
    Stage::ALL
        .iter()
        .map(|s| std::fs::read(s.log_path(cfg)).unwrap())
        .collect()
}

fn embed_sample(cfg: &RunConfig, dir: &Path) -> Vec<u8> {
    let cover = dir.join("cover.png");
    load_corpus(cfg).unwrap().holdout[0].save_png(&cover).unwrap();
    let payload = dir.join("payload.bin");
    std::fs::write(&payload, b"determinism").unwrap();
    let out = dir.join("stego.png");
    cmd_embed(
        cfg,
        &EmbedRequest {
            cover,
            payload,
            output: out.clone(),
            overrides: CodecOverrides::default(),
            models: ModelSet::Auto,
        },
    )
    .unwrap();
    std::fs::read(out).unwrap()
}

fn toy_pipeline(rep: &mut Report) {
    let root = tempfile::tempdir().unwrap();
    let cfg = RunConfig::toy(root.path().join("run-a"));
    let t0 = Instant::now();
    let train = cmd_train(&cfg, &Stage::ALL);
    let dt = t0.elapsed();
    let train = match train {
        Ok(t) => t,
        Err(e) => {
            rep.check("toy_training", false, format!("pipeline failed: {e}"));
            return;
        }
    };
    rep.check(
        "toy_training_time",
        dt < TRAIN_BUDGET,
        format!(
            "{} images {}x{}, all stages in {dt:.1?}",
            cfg.dataset.train_images, cfg.dataset.image_size, cfg.dataset.image_size
        ),
    );
    let itc = train.log(Stage::Itc).unwrap();
    let weighted = |e: f64| cfg.itc.lambda * e;
    let (v0, v1) = (weighted(itc.first("var_loss").unwrap()), weighted(itc.last("var_loss").unwrap()));
    let drop = 1.0 - v1 / v0;
    rep.check(
        "toy_texture_loss_drop",
        drop >= TEXTURE_DROP,
        format!("weighted texture loss {v0:.4e} -> {v1:.4e}, drop {:.1}% (need >= {:.0}%)", 100.0 * drop, 100.0 * TEXTURE_DROP),
    );
    let mfd = train.log(Stage::MfdPhase2).unwrap();
    let (f0, f1) = (mfd.first("fmrl").unwrap(), mfd.last("fmrl").unwrap());
    let drop = 1.0 - f1 / f0;
    rep.check(
        "toy_fmrl_drop",
        drop >= FMRL_DROP,
        format!("L_fmrl {f0:.4e} -> {f1:.4e}, drop {:.1}% (need >= {:.0}%)", 100.0 * drop, 100.0 * FMRL_DROP),
    );
    let (pre, post, n) = bser_pre_post(&cfg);
    rep.check(
        "finetune_bser",
        n > 0 && post <= pre,
        format!("{} held-out covers with capacity, {}: BSER pre {pre:.3}% post {post:.3}%", n, cfg.codec.strategy),
    );

    let eval = cmd_evaluate(&cfg, &EvaluateRequest::default()).unwrap();
    for det in [Detector::ChiSquare, Detector::Rs, Detector::SamplePairs] {
        let auc = eval.auc(SCENARIO_LSB_FULL, det).unwrap();
        rep.check(
            &format!("detector_auc_{}", det.name()),
            auc >= DETECTOR_AUC_MIN,
            format!("clean vs 100% LSB, {} images, AUC {auc:.4} (need >= {DETECTOR_AUC_MIN})", cfg.evaluate.detector_images),
        );
    }
    let nulls: Vec<f64> = Detector::ALL.iter().map(|&d| eval.auc(SCENARIO_NULL, d).unwrap()).collect();
    rep.check(
        "detector_null_auc",
        nulls.iter().all(|a| (NULL_AUC.0..=NULL_AUC.1).contains(a)),
        format!(
            "{0} vs {0} clean, AUC {nulls:.4?} (need within [{1}, {2}])",
            cfg.evaluate.null_images, NULL_AUC.0, NULL_AUC.1
        ),
    );
    for row in eval.detectors.iter().filter(|r| r.scenario.starts_with("basn:")) {
        rep.info(
            &format!("detector_basn_{}", row.detector.name()),
            format!("{} AUC {:.4} ({} pairs)", row.scenario, row.auc, row.stego),
        );
    }
    for row in &eval.strategies {
        rep.info(
            "strategy",
            format!(
                "{} {}: BSER {:.3}% payload {:.4} bpp, {} skipped, feature distortion {}",
                row.models,
                row.strategy,
                row.bser_pct,
                row.payload_bpp,
                row.skipped,
                row.feature_distortion_pct.map_or("NA".into(), |v| format!("{v:.4}%"))
            ),
        );
    }

    let stego_a = embed_sample(&cfg, root.path());
    let logs_a = log_bytes(&cfg);
    let cfg_b = RunConfig::toy(root.path().join("run-b"));
    cmd_train(&cfg_b, &Stage::ALL).unwrap();
    let dir_b = root.path().join("b");
    std::fs::create_dir_all(&dir_b).unwrap();
    let stego_b = embed_sample(&cfg_b, &dir_b);
    let logs_b = log_bytes(&cfg_b);
    rep.check(
        "determinism",
        stego_a == stego_b && logs_a == logs_b,
        format!(
            "stego PNG identical: {}, {} metric logs identical: {}",
            stego_a == stego_b,
            logs_a.len(),
            logs_a == logs_b
        ),
    );
}

fn main() {
    let mut rep = Report { failures: 0 };
    varpool_oracle(&mut rep);
    gradient_checks(&mut rep);
    penalties(&mut rep);
    round_trip(&mut rep);
    lsm_restoration(&mut rep);
    ps_budget(&mut rep);
    toy_pipeline(&mut rep);
    println!("acceptance: {} failure(s)", rep.failures);
    if rep.failures > 0 {
        std::process::exit(1);
    }
}
