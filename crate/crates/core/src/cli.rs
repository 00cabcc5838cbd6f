//! Command-line surface: scene generation, noise synthesis, the two training
//! stages, reparameterization, enhancement, and evaluation.

use crate::color_corrector::ColorCorrector;
use crate::config::RunConfig;
use crate::denoiser::{DenoiserModel, Mode};
use crate::error::{Error, Result};
use crate::noisespace::{
    partition, read_space_file, sample_params, synthesize, write_space_file, NoiseSpace,
};
use crate::rawproc::{crop, pack, read_r4, unpack, write_r4, CropMode, PackedRaw};
use crate::sampler_eval::{enhance, evaluate};
use crate::scenes::gen_scene;
use crate::schedule::DiffusionSchedule;
use crate::trainer::{align_step, pretrain_step, Adam, CheckpointBundle};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "rawglow", version, about = "Two-stage diffusion enhancement for low-light RAW frames")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate procedural clean scenes as `.r4` files.
    GenScenes {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a noisy low-light frame from a clean `.r4`.
    Synth {
        /// Noise space description file (created with defaults if missing).
        #[arg(long)]
        space: PathBuf,
        /// Virtual camera index (1-based); omitted = sample the full space.
        #[arg(long)]
        camera: Option<usize>,
        /// How many virtual cameras the space is split into.
        #[arg(long, default_value_t = 5)]
        cameras: usize,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage one: train denoiser + corrector on synthetic virtual cameras.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint instead of fresh weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage two: freeze convolutions, fit CFI^T + corrector on real pairs.
    Align {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Pretrain checkpoint (or an aligned one to resume).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold CFI^T into the convolutions; emits a merged checkpoint.
    Reparam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance one noisy `.r4` through the reverse process.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Amplification ratio; defaults to the one in the input header.
        #[arg(long)]
        ratio: Option<f32>,
        /// Stochasticity of the reverse steps, 0 (deterministic) to 1.
        #[arg(long)]
        eta: Option<f64>,
        /// Route through one virtual-camera pathway (pretrain checkpoints).
        #[arg(long)]
        camera: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a manifest of (noisy, clean, ratio) triples.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest file; lines of `noisy.r4 clean.r4 ratio`.
        #[arg(long)]
        manifest: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_packed(path: &Path) -> Result<PackedRaw> {
    pack(&read_r4(path)?)
}

fn save_packed(path: &Path, p: &PackedRaw) -> Result<()> {
    write_r4(path, &unpack(p))
}

/// Load the noise space, writing the default one first if the file is new.
fn load_or_init_space(path: &Path) -> Result<NoiseSpace> {
    if !path.exists() {
        let space = NoiseSpace::default_space();
        write_space_file(path, &space)?;
        println!("wrote default noise space to {}", path.display());
        return Ok(space);
    }
    read_space_file(path)
}

fn load_bundle(path: &Path) -> Result<CheckpointBundle> {
    CheckpointBundle::load(path)
}

/// Read `noisy clean ratio` triples, paths relative to the manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<(PackedRaw, PackedRaw, f32)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                detail: format!("expected `noisy clean ratio`, got {} fields", parts.len()),
            });
        }
        let ratio: f32 = parts[2].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            detail: format!("bad ratio {:?}", parts[2]),
        })?;
        out.push((load_packed(&base.join(parts[0]))?, load_packed(&base.join(parts[1]))?, ratio));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no usable entries", path.display())));
    }
    Ok(out)
}

fn load_clean_dir(dir: &Path) -> Result<Vec<PackedRaw>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "r4"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .r4 scenes in {}", dir.display())));
    }
    paths.iter().map(|p| load_packed(p)).collect()
}

fn schedule_with_eta(bundle: &CheckpointBundle, eta: Option<f64>) -> Result<DiffusionSchedule> {
    let mut spec = bundle.schedule;
    if let Some(e) = eta {
        spec.eta = e;
    }
    spec.build()
}

fn sample_crops<R: Rng>(scenes: &[PackedRaw], batch: usize, size: usize, rng: &mut R) -> Result<Vec<PackedRaw>> {
    (0..batch)
        .map(|_| {
            let s = &scenes[rng.random_range(0..scenes.len())];
            crop(s, size, CropMode::Random(rng))
        })
        .collect()
}

fn cmd_pretrain(config: &Path, seed: Option<u64>, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let space = load_or_init_space(&cfg.paths.space_file)?;
    let cameras = partition(&space, cfg.denoiser.n_cameras)?;
    let sched = cfg.schedule.build()?;
    let scenes = load_clean_dir(&cfg.paths.data_dir.join("clean"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(&cfg.train);
    let (mut model, mut cc, start) = match checkpoint {
        Some(p) => {
            let bundle = load_bundle(p)?;
            if bundle.mode != Mode::Pretrain {
                return Err(Error::ModeMismatch {
                    expected: "pretrain checkpoint (run `align`/`reparam` outputs elsewhere)".into(),
                    found: bundle.mode.as_str().into(),
                });
            }
            bundle.restore_optimizer(&mut opt);
            let (m, c) = bundle.to_models()?;
            // replay the RNG to where the interrupted run left off
            for _ in 0..bundle.iteration {
                let _ = rng.random::<u64>();
            }
            (m, c, bundle.iteration)
        }
        None => (
            DenoiserModel::new_pretrain(cfg.denoiser.clone(), &mut rng),
            ColorCorrector::new(&mut rng),
            0,
        ),
    };
    for iter in start..cfg.train.pretrain_iters {
        let mut step_rng = ChaCha8Rng::seed_from_u64(rng.random::<u64>());
        let batch = sample_crops(&scenes, cfg.train.batch, cfg.train.crop, &mut step_rng)?;
        let stats = pretrain_step(
            &mut model, &mut cc, &batch, &sched, &space, &cameras, cfg.train.lambda_img, &mut opt,
            &mut step_rng,
        )?;
        if iter % 50 == 0 || iter + 1 == cfg.train.pretrain_iters {
            println!(
                "iter={iter} loss={:.5} eps={:.5} img={:.5} lr={:.2e} camera={} t={}",
                stats.loss, stats.eps_loss, stats.img_loss, opt.effective_lr(), stats.camera, stats.t
            );
        }
    }
    let dest = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.checkpoint_dir.join("pretrain.ckpt"));
    if let Some(parent) = dest.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    CheckpointBundle::from_models(&model, &cc, Some(&opt), cfg.schedule, cfg.train.pretrain_iters)
        .save(&dest)?;
    println!("saved {}", dest.display());
    Ok(())
}

fn cmd_align(config: &Path, seed: Option<u64>, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let bundle = load_bundle(checkpoint)?;
    let mut opt = Adam::new(&cfg.train);
    let (mut model, mut cc, start) = match bundle.mode {
        Mode::Pretrain => {
            let (mut m, c) = bundle.to_models()?;
            m.average_cfis()?;
            m.freeze_convs()?;
            (m, c, 0)
        }
        Mode::Aligned => {
            bundle.restore_optimizer(&mut opt);
            let (m, c) = bundle.to_models()?;
            (m, c, bundle.iteration)
        }
        Mode::Merged => {
            return Err(Error::ModeMismatch {
                expected: "pretrain or aligned checkpoint (a merged model cannot be aligned; rerun from the aligned checkpoint)".into(),
                found: "merged".into(),
            })
        }
    };
    let sched = cfg.schedule.build()?;
    let pairs = read_manifest(&cfg.paths.data_dir.join("manifest.txt"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11c);
    for _ in 0..start {
        let _ = rng.random::<u64>();
    }
    for iter in start..cfg.train.align_iters {
        let mut step_rng = ChaCha8Rng::seed_from_u64(rng.random::<u64>());
        let k = cfg.train.batch.min(pairs.len());
        let mut batch = Vec::with_capacity(k);
        for _ in 0..k {
            batch.push(pairs[step_rng.random_range(0..pairs.len())].clone());
        }
        let batch: Vec<(PackedRaw, PackedRaw)> =
            batch.into_iter().map(|(n, c, _)| (n, c)).collect();
        let stats =
            align_step(&mut model, &mut cc, &batch, &sched, cfg.train.lambda_img, &mut opt, &mut step_rng)?;
        if iter % 20 == 0 || iter + 1 == cfg.train.align_iters {
            println!("iter={iter} loss={:.5} eps={:.5} img={:.5} t={}", stats.loss, stats.eps_loss, stats.img_loss, stats.t);
        }
    }
    let dest = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.checkpoint_dir.join("aligned.ckpt"));
    if let Some(parent) = dest.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    CheckpointBundle::from_models(&model, &cc, Some(&opt), cfg.schedule, cfg.train.align_iters)
        .save(&dest)?;
    println!("saved {}", dest.display());
    Ok(())
}

fn cmd_reparam(checkpoint: &Path, out: &Path) -> Result<()> {
    let bundle = load_bundle(checkpoint)?;
    if bundle.mode != Mode::Aligned {
        return Err(Error::ModeMismatch {
            expected: "aligned checkpoint (run `align` first)".into(),
            found: bundle.mode.as_str().into(),
        });
    }
    let (mut model, cc) = bundle.to_models()?;
    model.reparameterize()?;
    CheckpointBundle::from_models(&model, &cc, None, bundle.schedule, bundle.iteration).save(out)?;
    println!("saved {}", out.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenScenes { count, size, seed, out } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..count {
                let scene = gen_scene(size, &mut rng)?;
                save_packed(&out.join(format!("scene_{i:04}.r4")), &scene)?;
            }
            println!("wrote {count} scenes to {}", out.display());
            Ok(())
        }
        Cmd::Synth { space, camera, cameras, ratio, input, out, seed } => {
            let space = load_or_init_space(&space)?;
            let clean = load_packed(&input)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = match camera {
                Some(i) => {
                    let cams = partition(&space, cameras)?;
                    let vc = cams.get(i.wrapping_sub(1)).ok_or_else(|| {
                        Error::invalid("synth", format!("camera {i} out of range 1..={cameras}"))
                    })?;
                    sample_params(vc, &space, &mut rng)
                }
                None => {
                    let cams = partition(&space, 1)?;
                    sample_params(&cams[0], &space, &mut rng)
                }
            };
            params.ratio = ratio;
            let noisy = synthesize(&clean, &params, &mut rng)?;
            save_packed(&out, &noisy)?;
            println!("wrote {} (ratio {ratio})", out.display());
            Ok(())
        }
        Cmd::Pretrain { config, seed, checkpoint, out } => {
            cmd_pretrain(&config, seed, checkpoint.as_deref(), out.as_deref())
        }
        Cmd::Align { config, seed, checkpoint, out } => {
            cmd_align(&config, seed, &checkpoint, out.as_deref())
        }
        Cmd::Reparam { checkpoint, out } => cmd_reparam(&checkpoint, &out),
        Cmd::Enhance { checkpoint, input, out, ratio, eta, camera, seed } => {
            let bundle = load_bundle(&checkpoint)?;
            let (model, cc) = bundle.to_models()?;
            let sched = schedule_with_eta(&bundle, eta)?;
            let noisy = load_packed(&input)?;
            let ratio = ratio.unwrap_or(noisy.meta.exposure_ratio);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let result = enhance(&noisy, ratio, &model, &cc, &sched, camera, &mut rng)?;
            save_packed(&out, &result)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Eval { checkpoint, manifest, out, eta, seed } => {
            let bundle = load_bundle(&checkpoint)?;
            let (model, cc) = bundle.to_models()?;
            let sched = schedule_with_eta(&bundle, eta)?;
            let dataset = read_manifest(&manifest)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = evaluate(&dataset, &model, &cc, &sched, &mut rng)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, report.text()).map_err(|e| Error::io(&p, e))?;
                    println!("wrote {}", p.display());
                }
                None => print!("{}", report.text()),
            }
            Ok(())
        }
    }
}

/// Entry point used by the binary: parse, run, map errors to exit codes.
pub fn main_impl<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version via "error" variants with code 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
