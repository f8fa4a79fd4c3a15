use voxelbridge::bridge::BridgeSchedule;
use voxelbridge::config::{Preset, RunConfig};
use voxelbridge::seed::stage_seed;

#[test]
fn published_settings() {
    let c = RunConfig::full();
    assert_eq!(c.canonical_dims, [83, 104, 81]);
    assert_eq!(c.patch_r, 14);
    assert_eq!(c.scales, vec![14, 12, 10]);
    assert_eq!((c.enc_layers, c.enc_hidden, c.head_hidden), (16, 768, 1024));
    assert_eq!(c.alpha, 1.0 / 64.0);
    assert_eq!((c.align_lr, c.align_epochs, c.align_batch), (5e-4, 30, 32));
    assert_eq!((c.bridge_lr, c.bridge_epochs), (2e-5, 1));
    assert_eq!((c.bridge_batch_stage1, c.bridge_batch_stage2), (32, 24));
    assert_eq!(c.beta, 0.93);
    let s = BridgeSchedule::full(2, 0);
    assert_eq!((s.lr, s.epochs, s.batch), (2e-5, 1, 24));
}

#[test]
fn text_round_trip_and_overrides() {
    let mut c = RunConfig::parse_text("preset = desk\nseed = 3 # comment\n").unwrap();
    assert_eq!(c.preset, Preset::Desk);
    assert_eq!(c.seed, 3);
    c.apply("beta=0.5").unwrap();
    assert_eq!(RunConfig::parse_text(&c.to_text()).unwrap(), c);
    assert_eq!(c.apply("beta=1.5").unwrap_err().category(), "config");
    assert_eq!(c.apply("preset=full").unwrap_err().category(), "config");
    assert_eq!(c.apply("no_such_key=1").unwrap_err().category(), "config");
    assert!(RunConfig::parse_text("just words").is_err());
}

#[test]
fn stage_seeds_are_stable_and_distinct() {
    assert_eq!(stage_seed(7, "synth"), stage_seed(7, "synth"));
    assert_ne!(stage_seed(7, "synth"), stage_seed(7, "train-align"));
    assert_ne!(stage_seed(7, "synth"), stage_seed(8, "synth"));
}
