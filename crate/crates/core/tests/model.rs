use dilated_seg::metrics::count_params;
use dilated_seg::model::*;
use dilated_seg::tensor::{random_tensor, Execution, Graph};
use dilated_seg::{Rng, Shape, Tensor};

fn input(shape: Shape, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform() as f32)
}

fn eval_forward<F>(f: F, x: &Tensor) -> Tensor
where
    F: FnOnce(&mut GraphBuilder<f32>, dilated_seg::NodeId) -> dilated_seg::NodeId,
{
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let out = {
        let mut b = GraphBuilder::new(&mut g, Mode::Eval, false);
        f(&mut b, xn)
    };
    g.value(out).clone()
}

#[test]
fn shape_law_across_input_sizes() {
    let net = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk(), 3).unwrap();
    for &h in &[64, 96, 128, 256] {
        for &w in &[64, 96, 128, 256] {
            let x = input(Shape::new(1, 3, h, w), 1);
            let mut g = Graph::new();
            let xn = g.constant(x);
            let out = {
                let mut b = GraphBuilder::new(&mut g, Mode::Eval, false);
                net.forward(&mut b, xn).unwrap()
            };
            let mask = g.value(out.mask);
            assert_eq!(mask.shape(), Shape::new(1, 1, h, w));
            assert!(mask.data().iter().all(|&v| v > 0.0 && v < 1.0));
            for (k, &f) in out.features.iter().enumerate() {
                let s = g.shape(f);
                assert_eq!((s.h, s.w), (h >> (k + 1), w >> (k + 1)), "feature {k} at {h}x{w}");
            }
            for &l in &out.levels {
                let s = g.shape(l);
                assert_eq!((s.c, s.h, s.w), (16, h / 32, w / 32));
            }
            let s = g.shape(out.bottleneck);
            assert_eq!((s.c, s.h, s.w), (64, h / 32, w / 32));
        }
    }
}

#[test]
fn forward_rejects_bad_extents_and_channels() {
    let net = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk(), 3).unwrap();
    assert!(net.predict(&Tensor::zeros(Shape::new(1, 3, 80, 64))).is_err());
    assert!(net.predict(&Tensor::zeros(Shape::new(1, 1, 64, 64))).is_err());
}

#[test]
fn zeroed_residual_block_is_relu() {
    let mut store = ParamStore::<f32>::new();
    let block = ResidualBlock::new(&mut store, "r", 4, 4, 1, BlockStyle::Basic);
    assert!(block.shortcut.is_none());
    let x = input(Shape::new(2, 4, 6, 5), 7).map(|v| v - 0.5);
    let y = eval_forward(|b, xn| block.forward(b, &store, xn).unwrap(), &x);
    assert!(y.bits_eq(&x.map(|v| v.max(0.0))));
}

#[test]
fn zeroed_cbam_quarters_input() {
    let mut store = ParamStore::<f32>::new();
    let cbam = Cbam::new(&mut store, "a", 8, 4).unwrap();
    let x = input(Shape::new(1, 8, 5, 5), 9);
    let y = eval_forward(|b, xn| cbam.forward(b, &store, xn).unwrap(), &x);
    assert!(y.bits_eq(&x.map(|v| v * 0.25)));
}

#[test]
fn ablation_deltas_equal_removed_blocks() {
    for base in [ModelConfig::desk(), ModelConfig::paper()] {
        let full = DilatedSegNet::<f32>::new(base.clone()).unwrap();
        let no_cbam = DilatedSegNet::<f32>::new(base.clone().with_ablation(true, false)).unwrap();
        let no_dcp = DilatedSegNet::<f32>::new(base.clone().with_ablation(false, true)).unwrap();
        let neither = DilatedSegNet::<f32>::new(base.clone().with_ablation(false, false)).unwrap();
        assert_eq!(count_params(&full) - count_params(&no_cbam), full.cbam_param_count());
        assert_eq!(no_cbam.cbam_param_count(), 0);
        assert_eq!(
            count_params(&full) - count_params(&no_dcp),
            full.level_param_count() - no_dcp.level_param_count()
        );
        assert_eq!(
            count_params(&full) - count_params(&neither),
            full.cbam_param_count() + full.level_param_count() - neither.level_param_count()
        );
        let labels: Vec<_> = [&full, &no_dcp, &no_cbam, &neither]
            .iter()
            .map(|n| n.config.arm_label())
            .collect();
        assert_eq!(labels, ["full", "no-dcp", "no-attention", "no-dcp-no-attention"]);
    }
}

#[test]
fn weights_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dsgw");
    let net = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk(), 11).unwrap();
    save_weights(&net.params, &path).unwrap();
    let mut back = DilatedSegNet::<f32>::new(ModelConfig::desk()).unwrap();
    load_weights(&mut back.params, &path).unwrap();
    assert!(back.params.bits_eq(&net.params));
    let again = dir.path().join("again.dsgw");
    save_weights(&back.params, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn desk_weights_do_not_load_into_paper() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.dsgw");
    let desk = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk(), 1).unwrap();
    save_weights(&desk.params, &path).unwrap();
    let mut paper = DilatedSegNet::<f32>::new(ModelConfig::paper()).unwrap();
    assert!(load_weights(&mut paper.params, &path).is_err());
}

#[test]
fn init_variance_matches_fan_in() {
    let net = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk(), 5).unwrap();
    let mut checked = 0;
    for (_, p) in net.params.iter() {
        let ParamKind::ConvWeight { fan_in } = p.kind else { continue };
        let n = p.value.len();
        if n < 4096 {
            continue;
        }
        let mean = p.value.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = p.value.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let want = 2.0 / fan_in as f64;
        assert!((var / want - 1.0).abs() < 0.1, "{}: var {var} want {want}", p.name);
        checked += 1;
    }
    assert!(checked >= 5);
}

#[test]
fn eval_is_deterministic_across_execution_modes() {
    let net = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk(), 2).unwrap();
    let x = input(Shape::new(2, 3, 64, 96), 4);
    let a = net.predict_full(&x, Execution::Sequential).unwrap();
    let b = net.predict_full(&x, Execution::Parallel).unwrap();
    let c = net.predict_full(&x, Execution::Parallel).unwrap();
    assert!(a.mask.bits_eq(&b.mask) && b.mask.bits_eq(&c.mask));
    assert!(a.bottleneck.bits_eq(&b.bottleneck));
}

#[test]
fn cast_to_f64_tracks_f32_predictions() {
    let net = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk(), 8).unwrap();
    let wide = net.cast::<f64>();
    let mut rng = Rng::new(3);
    let x = random_tensor(Shape::new(1, 3, 64, 64), &mut rng);
    let p64 = wide.predict(&x).unwrap();
    let p32 = net.predict(&x.cast()).unwrap();
    assert!(p64.cast::<f32>().max_abs_diff(&p32) < 1e-4);
}
