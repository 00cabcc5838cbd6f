//! Save a training state to the binary checkpoint format and load it back,
//! showing that models, schedule, and optimizer moments all survive.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rawglow::color_corrector::ColorCorrector;
use rawglow::denoiser::{DenoiserConfig, DenoiserModel};
use rawglow::noisespace::{partition, NoiseSpace};
use rawglow::scenes::gen_corpus;
use rawglow::schedule::ScheduleSpec;
use rawglow::trainer::{pretrain_step, Adam, CheckpointBundle, TrainConfig};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let cfg = DenoiserConfig { base_width: 8, time_dim: 16, n_cameras: 5 };
    let mut model = DenoiserModel::new_pretrain(cfg, &mut rng);
    let mut cc = ColorCorrector::new(&mut rng);
    let spec = ScheduleSpec::default();
    let sched = spec.build().unwrap();
    let space = NoiseSpace::default_space();
    let cameras = partition(&space, 5).unwrap();
    let scenes = gen_corpus(4, 32, &mut rng).unwrap();
    let tc = TrainConfig::default();
    let mut opt = Adam::new(&tc);
    for _ in 0..5 {
        pretrain_step(
            &mut model, &mut cc, &scenes[..2], &sched, &space, &cameras, tc.lambda_img, &mut opt,
            &mut rng,
        )
        .unwrap();
    }

    let dir = std::env::temp_dir().join("rawglow_ckpt_example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("state.ckpt");
    let bundle = CheckpointBundle::from_models(&model, &cc, Some(&opt), spec.clone(), 5);
    bundle.save(&path).unwrap();
    let bytes = std::fs::metadata(&path).unwrap().len();
    println!("saved {} tensors, {} bytes", bundle.tensors.len(), bytes);

    let loaded = CheckpointBundle::load(&path).unwrap();
    let (m2, c2) = loaded.to_models().unwrap();
    let mut opt2 = Adam::new(&tc);
    loaded.restore_optimizer(&mut opt2);
    assert_eq!(loaded.iteration, 5);
    for (k, t) in model.params() {
        assert_eq!(t.data(), m2.param(k).unwrap().data(), "mismatch in {k}");
    }
    for (k, t) in cc.params() {
        assert_eq!(t.data(), c2.param(k).unwrap().data(), "mismatch in {k}");
    }
    assert_eq!(opt.step_count(), opt2.step_count());
    println!(
        "roundtrip ok: mode {}, iteration {}, opt step {}",
        loaded.mode.as_str(),
        loaded.iteration,
        opt2.step_count()
    );
    std::fs::remove_file(&path).ok();
}
