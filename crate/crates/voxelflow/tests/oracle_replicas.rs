use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxelflow::oracle::{dense_dffm, dense_fsm, dense_head};
use voxelflow::selfcheck::random_sparse;
use voxelflow_core::autodiff::Activation;
use voxelflow_core::detector::{head_forward, HeadParams};
use voxelflow_core::dffm::{decouple_kernel, dffm_forward_full, DffmParams};
use voxelflow_core::fsm::{predict_importance, FsmParams};

fn close(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fusion_module_matches_dense_replica() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (i, rf) in [3, 5, 7, 9].into_iter().enumerate() {
        let x = random_sparse(&mut rng, [9, 8, 7], 1 + i);
        let spec = decouple_kernel(rf).unwrap();
        let act = [Activation::Silu, Activation::Tanh][i % 2];
        let p = DffmParams::random(1 + i, &spec, act, 0.7, &mut rng);
        let got = dffm_forward_full(&x, &p).unwrap();
        let (want, gates) = dense_dffm(&x, &p);
        assert_eq!(got.output.coords(), want.coords());
        assert!(close(got.output.features(), want.features()) < 1e-10);
        assert!(close(&got.gates, &gates) < 1e-12);
        assert!(gates.iter().all(|&g| g > 0.0 && g < 1.0));
    }
}

#[test]
fn importance_head_matches_dense_replica() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for c in [1, 4, 8] {
        let x = random_sparse(&mut rng, [10, 6, 5], c);
        let p = FsmParams::random(c, 5, Activation::Silu, 0.6, &mut rng);
        assert!(close(&predict_importance(&x, &p).unwrap(), &dense_fsm(&x, &p)) < 1e-12);
    }
}

#[test]
fn detection_head_matches_dense_replica() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for c in [2, 6] {
        let bev = random_sparse(&mut rng, [12, 9, 1], c);
        let p = HeadParams::random(c, 7, 1, Activation::Silu, 0.6, &mut rng);
        let out = head_forward(&bev, &p).unwrap();
        let (logits, reg) = dense_head(&bev, &p);
        assert!(close(&out.logits, &logits) < 1e-12);
        assert!(close(&out.reg, &reg) < 1e-12);
    }
}
