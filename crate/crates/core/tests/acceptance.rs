//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dilated_seg::data::{split, Pnm, SamplePair, SplitSpec, SynthConfig};
use dilated_seg::explain::{bottleneck_heatmap, color, write_heatmaps};
use dilated_seg::gradsuite;
use dilated_seg::metrics::*;
use dilated_seg::model::*;
use dilated_seg::tensor::kernels::{conv2d_forward, conv2d_reference};
use dilated_seg::tensor::{ConvGeometry, Execution, Graph};
use dilated_seg::training::{train, AugmentConfig, History, TrainConfig, Trainer};
use dilated_seg::{Result, Rng, Shape, Tensor};

const PAPER_PARAMS: f64 = 18.11e6;
const PAPER_MACS: f64 = 27.1e9;
const DESK_DSC: f64 = 0.85;
const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);
const OVERFIT_LOSS: f64 = 0.1;
const OVERFIT_STEPS: usize = 200;
const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

struct Bench {
    train: Vec<SamplePair>,
    val: Vec<SamplePair>,
    test: Vec<SamplePair>,
}

impl Bench {
    /// 200 synthetic 64×64 samples split 160/20/20 with seed 42.
    fn new() -> Result<Self> {
        let samples = SynthConfig::default().samples();
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let s = split(&ids, &SplitSpec::ratios(0.8, 0.1, 0.1), 42)?;
        let pick = |v: &[String]| samples.iter().filter(|p| v.contains(&p.id)).cloned().collect::<Vec<_>>();
        Ok(Bench {
            train: pick(&s.train),
            val: pick(&s.val),
            test: pick(&s.test),
        })
    }
}

struct Arm {
    history: History,
    elapsed: Duration,
}

impl Arm {
    fn dsc(&self) -> f64 {
        self.history.best_record().map_or(0.0, |r| r.val_dsc)
    }
}

fn train_arm(bench: &Bench, use_dcp: bool, use_cbam: bool) -> Result<Arm> {
    let cfg = ModelConfig::desk().with_ablation(use_dcp, use_cbam);
    let mut net = DilatedSegNet::new_initialized(cfg, 42)?;
    let start = Instant::now();
    let history = train(&mut net, &bench.train, &bench.val, &TrainConfig::for_preset(Preset::Desk), None)?;
    Ok(Arm {
        history,
        elapsed: start.elapsed(),
    })
}

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let results = gradsuite::run_all(true)?;
    let elapsed = start.elapsed();
    let failed: Vec<_> = results.iter().filter(|r| !r.pass()).map(|r| r.line()).collect();
    let few: Vec<_> = results
        .iter()
        .filter(|r| !r.name.starts_with("network") && r.instances < gradsuite::INSTANCES)
        .map(|r| r.name.clone())
        .collect();
    let net = results.iter().find(|r| r.name.starts_with("network"));
    outcome(
        failed.is_empty() && few.is_empty() && net.is_some() && elapsed <= GRAD_BUDGET,
        format!(
            "{} suites, failed {:?}, under-sampled {:?}, network {}, {:.0}s",
            results.len(),
            failed,
            few,
            net.map_or("missing".into(), |r| format!("{:.2e}", r.max_rel_err)),
            elapsed.as_secs_f64()
        ),
    )
}

fn dilation_oracle() -> Result<Outcome> {
    let mut rng = Rng::new(2);
    let mut worst = 0f32;
    for case in 0..50 {
        let d = [2, 3, 6, 9][case % 4];
        let (c, co) = (rng.int_in(1, 4), rng.int_in(1, 4));
        let (h, w) = (rng.int_in(2 * d + 1, 2 * d + 12), rng.int_in(2 * d + 1, 2 * d + 12));
        let padding = rng.int_in(0, d);
        let stride = rng.int_in(1, 2);
        let x = Tensor::from_fn(Shape::new(1, c, h, w), |_, _, _, _| rng.uniform_in(-1.0, 1.0) as f32);
        let k = Tensor::from_fn(Shape::new(co, c, 3, 3), |_, _, _, _| rng.uniform_in(-1.0, 1.0) as f32);
        let span = 2 * d + 1;
        let inflated = Tensor::from_fn(Shape::new(co, c, span, span), |o, j, u, v| {
            if u % d == 0 && v % d == 0 {
                k.get(o, j, u / d, v / d)
            } else {
                0.0
            }
        });
        let a = conv2d_forward(&x, &k, None, ConvGeometry::new(stride, padding, d), Execution::Parallel)?;
        let b = conv2d_reference(&x, &inflated, None, ConvGeometry::new(stride, padding, 1))?;
        if a.shape() != b.shape() {
            return outcome(false, format!("case {case}: shape {} vs {}", a.shape(), b.shape()));
        }
        worst = worst.max(a.max_abs_diff(&b));
    }
    outcome(worst <= 1e-5, format!("50 cases, max abs err {worst:.2e}"))
}

fn shape_law() -> Result<Outcome> {
    let net = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk(), 3)?;
    let sizes = [64, 96, 128, 256];
    let mut bad = Vec::new();
    for &h in &sizes {
        for &w in &sizes {
            let mut rng = Rng::new((h * w) as u64);
            let x = Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.uniform() as f32);
            let mut g = Graph::new();
            let xn = g.constant(x);
            let out = {
                let mut b = GraphBuilder::new(&mut g, Mode::Eval, false);
                net.forward(&mut b, xn)?
            };
            let mask = g.value(out.mask);
            let mut ok = mask.shape() == Shape::new(1, 1, h, w) && mask.data().iter().all(|&v| v > 0.0 && v < 1.0);
            ok &= out.levels.iter().all(|&l| (g.shape(l).h, g.shape(l).w) == (h / 32, w / 32));
            ok &= out
                .features
                .iter()
                .enumerate()
                .all(|(k, &f)| (g.shape(f).h, g.shape(f).w) == (h >> (k + 1), w >> (k + 1)));
            if !ok {
                bad.push(format!("{h}x{w}"));
            }
        }
    }
    outcome(bad.is_empty(), format!("16 sizes, failing {bad:?}"))
}

fn overfit() -> Result<(bool, String)> {
    let batch: Vec<_> = SynthConfig::default().samples().into_iter().take(16).collect();
    let images: Vec<&Tensor> = batch.iter().map(|p| &p.image).collect();
    let masks: Vec<&Tensor> = batch.iter().map(|p| &p.mask).collect();
    let (x, y) = (Tensor::stack(&images)?, Tensor::stack(&masks)?);
    let cfg = TrainConfig::for_preset(Preset::Desk);
    let mut net = DilatedSegNet::new_initialized(ModelConfig::desk(), 42)?;
    let mut trainer = Trainer::new(&mut net, &cfg);
    for step in 1..=OVERFIT_STEPS {
        let loss = trainer.step(&x, &y, cfg.lr, 1)?;
        if loss < OVERFIT_LOSS {
            return Ok((true, format!("overfit loss {loss:.4} at step {step}")));
        }
    }
    Ok((false, format!("overfit loss above {OVERFIT_LOSS} after {OVERFIT_STEPS} steps")))
}

fn desk_training(full: &Arm) -> Result<Outcome> {
    let best = full.history.best_record();
    let peak = full.history.epochs.iter().map(|e| e.val_dsc).fold(0.0, f64::max);
    let trained = full.dsc() >= DESK_DSC && full.history.len() <= 30 && full.elapsed <= DESK_BUDGET;
    let (fit, fit_detail) = overfit()?;
    outcome(
        trained && fit,
        format!(
            "val DSC {:.4} at epoch {} (peak {peak:.4}) in {:.0}s; {fit_detail}",
            full.dsc(),
            best.map_or(0, |r| r.epoch),
            full.elapsed.as_secs_f64()
        ),
    )
}

fn metric_oracle() -> Result<Outcome> {
    let mut rng = Rng::new(5);
    let mut worst = 0f64;
    for _ in 0..500 {
        let shape = Shape::new(1, 1, rng.int_in(1, 32), rng.int_in(1, 32));
        let (pp, pg) = (rng.uniform(), rng.uniform());
        let pred = Tensor::from_fn(shape, |_, _, _, _| rng.uniform() as f32 * if rng.coin(pp) { 1.0 } else { 0.4 });
        let gt = Tensor::from_fn(shape, |_, _, _, _| if rng.coin(pg) { 1.0 } else { 0.0 });
        let (mut a, mut b, mut inter) = (0f64, 0f64, 0f64);
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let (p, g) = (p >= 0.5, g == 1.0);
            a += p as u8 as f64;
            b += g as u8 as f64;
            inter += (p && g) as u8 as f64;
        }
        let e = METRIC_EPS;
        let m = metrics_from_counts(&confusion(&pred, &gt, THRESHOLD)?, e);
        let want = [
            (2.0 * inter + e) / (a + b + e),
            (inter + e) / (a + b - inter + e),
            (inter + e) / (b + e),
            (inter + e) / (a + e),
        ];
        let got = [m.dsc, m.iou, m.recall, m.precision];
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
        worst = worst.max((m.dsc - 2.0 * m.iou / (1.0 + m.iou)).abs());
    }
    let f2 = f2_score(0.5, 1.0, METRIC_EPS);
    outcome(
        worst <= 1e-6 && format!("{f2:.4}") == "0.8333",
        format!("500 pairs, max err {worst:.2e}, F2(0.5, 1.0) = {f2:.4}"),
    )
}

fn complexity() -> Result<Outcome> {
    let paper = DilatedSegNet::<f32>::new(ModelConfig::paper())?;
    let params = count_params(&paper) as f64;
    let macs = count_macs(&paper, Shape::new(1, 3, 256, 256))?.total as f64;
    let dp = params / PAPER_PARAMS - 1.0;
    let dm = macs / PAPER_MACS - 1.0;

    let mut store = ParamStore::<f32>::new();
    let conv = Conv::new(&mut store, "toy", 3, 16, 3, ConvGeometry::new(1, 1, 1), true);
    let mut counter = MacCounter::new();
    conv.forward(&mut counter, &store, Shape::new(1, 3, 64, 64))?;
    let toy = (store.trainable_count(), counter.total);
    outcome(
        dp.abs() <= 0.20 && dm.abs() <= 0.25 && toy == (448, 1_769_472),
        format!(
            "paper {:.3} M params ({:+.1}%), {:.3} GMac ({:+.1}%); toy {} params, {} MACs",
            params / 1e6,
            100.0 * dp,
            macs / 1e9,
            100.0 * dm,
            toy.0,
            toy.1
        ),
    )
}

fn ablation(bench: &Bench, full: &Arm) -> Result<Outcome> {
    let mut structural = true;
    for base in [ModelConfig::desk(), ModelConfig::paper()] {
        let arm = |d, c| DilatedSegNet::<f32>::new(base.clone().with_ablation(d, c));
        let (f, nd, nc, nn) = (arm(true, true)?, arm(false, true)?, arm(true, false)?, arm(false, false)?);
        let level = f.level_param_count();
        structural &= count_params(&f) - count_params(&nc) == f.cbam_param_count();
        structural &= count_params(&f) - count_params(&nd) == level - nd.level_param_count();
        structural &= count_params(&f) - count_params(&nn) == f.cbam_param_count() + level - nn.level_param_count();
    }
    let mut dscs = vec![("full", full.dsc())];
    let mut ordered = true;
    for (label, d, c) in [("no-dcp", false, true), ("no-attention", true, false), ("neither", false, false)] {
        let a = train_arm(bench, d, c)?;
        ordered &= full.dsc() >= a.dsc();
        dscs.push((label, a.dsc()));
    }
    let listed: Vec<_> = dscs.iter().map(|(l, v)| format!("{l} {v:.4}")).collect();
    outcome(
        structural && ordered,
        format!("param deltas exact: {structural}; val DSC {}", listed.join(", ")),
    )
}

fn determinism(bench: &Bench) -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| dilated_seg::Error::io("tempdir", e))?;
    let cfg = TrainConfig {
        max_epochs: 2,
        augment: AugmentConfig::default(),
        ..TrainConfig::for_preset(Preset::Desk)
    };
    let run = |exec| -> Result<_> {
        let mut net = DilatedSegNet::new_initialized(ModelConfig::desk(), 7)?;
        let history = train(&mut net, &bench.train[..48], &bench.val, &TrainConfig { exec, ..cfg.clone() }, None)?;
        let masks: Vec<Tensor> = bench.test.iter().map(|p| net.predict(&p.image)).collect::<Result<_>>()?;
        Ok((net, history, masks))
    };
    let (a, ha, ma) = run(Execution::Parallel)?;
    let (b, hb, mb) = run(Execution::Sequential)?;
    let weights_same = a.params.bits_eq(&b.params);
    let history_same = ha == hb;
    let masks_same = ma.iter().zip(&mb).all(|(x, y)| x.bits_eq(y));

    let path = dir.path().join("w.dsgw");
    save_weights(&a.params, &path)?;
    let mut back = DilatedSegNet::<f32>::new(ModelConfig::desk())?;
    load_weights(&mut back.params, &path)?;
    let again = dir.path().join("again.dsgw");
    save_weights(&back.params, &again)?;
    let read = |p: &std::path::Path| std::fs::read(p).map_err(|e| dilated_seg::Error::io(p, e));
    let weights_io = read(&path)? == read(&again)?;

    let mut pnm_io = true;
    for p in &bench.test {
        for (t, c) in [(&p.image, 3), (&p.mask, 1)] {
            let bytes = Pnm::from_tensor(t).encode();
            let decoded = Pnm::decode(&bytes, c).map_err(|e| dilated_seg::Error::Pnm {
                path: "memory".into(),
                kind: e,
            })?;
            pnm_io &= decoded.encode() == bytes;
        }
    }

    let image = &bench.test[0].image;
    let (h1, o1) = write_heatmaps(&a, image, "x", dir.path().join("one"))?;
    let (h2, o2) = write_heatmaps(&a, image, "x", dir.path().join("two"))?;
    let heat_same = read(&h1)? == read(&h2)? && read(&o1)? == read(&o2)?;

    let all = [weights_same, history_same, masks_same, weights_io, pnm_io, heat_same];
    outcome(
        all.iter().all(|&v| v),
        format!(
            "weights {weights_same}, history {history_same}, masks {masks_same}, weight file {weights_io}, pnm {pnm_io}, heatmaps {heat_same}"
        ),
    )
}

fn heatmap_contract(bench: &Bench) -> Result<Outcome> {
    let net = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk(), 9)?;
    let image = &bench.test[0].image;
    let heat = bottleneck_heatmap(&net, image)?;
    let (lo, hi) = heat.min_max();
    let s = image.shape();
    let res = heat.shape() == Shape::new(1, 1, s.h, s.w);
    let ends = (color(0.0), color(1.0));
    outcome(
        res && (lo, hi) == (0.0, 1.0) && ends == ([0, 0, 255], [255, 0, 0]),
        format!("shape {}, range [{lo}, {hi}], endpoints {:?} {:?}", heat.shape(), ends.0, ends.1),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let bench = Bench::new().expect("synthetic benchmark");

    let mut full: Option<Arm> = None;
    let mut full_arm = |bench: &Bench| -> Result<Arm> {
        if full.is_none() {
            full = Some(train_arm(bench, true, true)?);
        }
        let f = full.as_ref().expect("trained");
        Ok(Arm {
            history: f.history.clone(),
            elapsed: f.elapsed,
        })
    };

    let mut failures = 0;
    let mut check = |n: usize, name: &str, f: &mut dyn FnMut() -> Result<Outcome>| {
        if !wanted(n) {
            return;
        }
        let o = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome {
                pass: false,
                detail: format!("error: {e}"),
            },
            Err(_) => Outcome {
                pass: false,
                detail: "panicked".into(),
            },
        };
        failures += usize::from(!o.pass);
        println!("{} {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };

    check(1, "gradient suites", &mut gradients);
    check(2, "dilation oracle", &mut dilation_oracle);
    check(3, "shape law", &mut shape_law);
    check(4, "desk training", &mut || desk_training(&full_arm(&bench)?));
    check(5, "metric oracle", &mut metric_oracle);
    check(6, "complexity", &mut complexity);
    check(7, "ablation", &mut || ablation(&bench, &full_arm(&bench)?));
    check(8, "determinism and io", &mut || determinism(&bench));
    check(9, "heatmap contract", &mut || heatmap_contract(&bench));

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
