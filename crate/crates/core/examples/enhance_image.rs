//! Run the full reverse process on a synthesized low-light frame with an
//! untrained (identity-input) model and report PSNR/SSIM against the clean
//! scene, next to the plain amplification baseline. With random weights the
//! scores are poor; the point is the moving parts, not the numbers — see
//! the pretrain/align examples and the CLI for actual training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rawglow::color_corrector::ColorCorrector;
use rawglow::denoiser::{DenoiserConfig, DenoiserModel};
use rawglow::noisespace::{partition, sample_params, synthesize, NoiseSpace};
use rawglow::sampler_eval::{enhance, psnr, ssim};
use rawglow::scenes::gen_scene;
use rawglow::schedule::DiffusionSchedule;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let clean = gen_scene(64, &mut rng).unwrap();
    let space = NoiseSpace::default_space();
    let cam = &partition(&space, 5).unwrap()[4];
    let params = sample_params(cam, &space, &mut rng);
    let noisy = synthesize(&clean, &params, &mut rng).unwrap();

    let amp = noisy.amplified();
    println!(
        "amplified baseline: psnr {:.2} dB  ssim {:.4}",
        psnr(&amp, &clean).unwrap(),
        ssim(&amp, &clean).unwrap()
    );

    let cfg = DenoiserConfig { base_width: 8, time_dim: 16, n_cameras: 5 };
    let mut model = DenoiserModel::new_pretrain(cfg, &mut rng);
    model.average_cfis().unwrap();
    let cc = ColorCorrector::new(&mut rng);
    let sched = DiffusionSchedule::build(50, 0.999, 0.99, 0.0).unwrap();
    let out = enhance(&noisy, params.ratio as f32, &model, &cc, &sched, None, &mut rng).unwrap();
    println!(
        "untrained model:    psnr {:.2} dB  ssim {:.4}",
        psnr(&out, &clean).unwrap(),
        ssim(&out, &clean).unwrap()
    );
}
