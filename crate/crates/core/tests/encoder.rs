use voxelbridge::encoder::{
    alignment_loss, gradient_check, probe_samples, train_alignment, AlignSchedule, EncoderConfig, EncoderState,
};

fn config() -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        hidden: 8,
        n_heads: 2,
        mlp_ratio: 2.0,
        patch_dim: 8,
        pos_table_size: 6,
        d_c: 4,
        d_v: 6,
        head_hidden: 8,
        alpha: 1.0 / 64.0,
        dropout: 0.0,
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let enc = EncoderState::init(config(), 5).unwrap();
    let samples = probe_samples(&enc.config, 3, 6).unwrap();
    let (_, grads) = enc.batch_gradients(&samples).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for (p, g) in grads.iter().enumerate() {
        for k in (0..g.len()).step_by(7) {
            let mut plus = enc.clone();
            plus.params_mut().get_mut(p).data_mut()[k] += h;
            let mut minus = enc.clone();
            minus.params_mut().get_mut(p).data_mut()[k] -= h;
            let fd = (plus.batch_loss(&samples).unwrap() - minus.batch_loss(&samples).unwrap()) / (2.0 * h);
            let an = g.data()[k];
            let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-4);
            assert!(err < 1e-4, "param {p}[{k}]: analytic {an}, numeric {fd}");
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn library_gradient_check_meets_tolerance() {
    let report = gradient_check(&config(), 1).unwrap();
    assert!(report.checked >= 200);
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn loss_is_mse_plus_weighted_latent_mse() {
    let enc = EncoderState::init(config(), 2).unwrap();
    let s = &probe_samples(&enc.config, 1, 3).unwrap()[0];
    let t = enc.forward(&s.signal, false).unwrap();
    let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let want = mse(&t.pred_c, &s.z_c) + mse(&t.pred_v, &s.z_v) / 64.0;
    let got = alignment_loss(&t, &s.z_c, &s.z_v, 1.0 / 64.0).unwrap();
    assert!((got.total - want).abs() < 1e-12);
    assert!((enc.batch_loss(std::slice::from_ref(s)).unwrap() - want).abs() < 1e-9);
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let samples = probe_samples(&config(), 16, 9).unwrap();
    let sched = AlignSchedule {
        lr: 3e-3,
        epochs: 15,
        batch: 4,
        seed: 1,
        mixup: false,
    };
    let (a, rep) = train_alignment(config(), &samples, &[], &sched).unwrap();
    assert!(rep.final_loss < rep.initial_loss, "{rep:?}");
    let (b, _) = train_alignment(config(), &samples, &[], &sched).unwrap();
    assert_eq!(a.params().bits(), b.params().bits());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let enc = EncoderState::init(config(), 8).unwrap();
    enc.save(dir.path().join("e"), serde_json::json!({ "note": "x" })).unwrap();
    let (back, meta) = EncoderState::load(dir.path().join("e")).unwrap();
    assert_eq!(back.params().bits(), enc.params().bits());
    assert_eq!(meta["note"], "x");
}

#[test]
fn wrong_patch_width_is_a_shape_error() {
    let enc = EncoderState::init(config(), 8).unwrap();
    let mut other = config();
    other.patch_dim = 27;
    let s = &probe_samples(&other, 1, 0).unwrap()[0];
    assert_eq!(enc.forward(&s.signal, false).unwrap_err().category(), "shape");
}
