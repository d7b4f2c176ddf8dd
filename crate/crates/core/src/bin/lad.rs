use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lad::codec::train_codec;
use lad::config::{validate_config, RunConfig};
use lad::diffusion::{train_diffusion, SampleOptions};
use lad::error::LadError;
use lad::metrics::evaluate;
use lad::pipeline::{self, ARTIFACT_ROOT_ENV};
use lad::volume::Dims;
use lad::{dataset, topo};

#[derive(Parser)]
#[command(name = "lad", version, about = "Locality-aware latent diffusion for 3D volumes")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact root; relative paths resolve under it. Defaults to $LAD_ARTIFACT_ROOT.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// DxHxW
        #[arg(long)]
        shape: Option<Dims>,
    },
    /// Train the vector-quantized codec.
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lambda_loc: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the conditional denoiser on codec latents.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        p_uncond: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Expand a maskset with label-preserving transforms.
    AugmentMasks {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw guided samples steered by masks.
    Sample {
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Decode the raw latent instead of its codebook projection.
        #[arg(long)]
        no_quantize: bool,
    },
    /// Compare a synthetic set with a real one.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        emit_embedding: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every stage, skipping the up-to-date ones.
    Run {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the per-slice Betti vector of one mask file.
    Topo {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// DxHxW; read from the sibling manifest when omitted.
        #[arg(long)]
        shape: Option<Dims>,
    },
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<LadError> for Failure {
    fn from(e: LadError) -> Self {
        match e {
            LadError::Config(m) => Failure::Config(m),
            other => Failure::Stage(other.to_string()),
        }
    }
}

struct Ctx {
    root: Option<PathBuf>,
    config: RunConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn check(&self) -> Result<(), Failure> {
        let v = validate_config(&self.config, self.root.as_deref());
        if v.is_empty() {
            Ok(())
        } else {
            Err(Failure::Config(v.join("; ")))
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let root = cli
        .root
        .clone()
        .or_else(|| std::env::var_os(ARTIFACT_ROOT_ENV).map(PathBuf::from));
    let seed_override = |config: &mut RunConfig, seed: Option<u64>| {
        if let Some(s) = seed {
            config.seed = s;
        }
    };
    match cli.command {
        Command::GenData { seed, count, out, shape } => {
            seed_override(&mut config, seed);
            if let Some(c) = count {
                config.data.count = c;
            }
            if let Some(s) = shape {
                config.data.shape = s;
            }
            let ctx = Ctx { root, config };
            ctx.check()?;
            let c = &ctx.config;
            let m = pipeline::gen_data(&ctx.path(&out), c.data_seed(), c.data.count, &c.data.phantom_spec(), Some(&c.hash()))?;
            println!("wrote {} volumes of {} to {}", m.count, m.dims, ctx.path(&out).display());
        }
        Command::TrainCodec { data, out, steps, lambda_loc, seed } => {
            seed_override(&mut config, seed);
            if let Some(s) = steps {
                config.codec.steps = s;
            }
            if let Some(l) = lambda_loc {
                config.codec.lambda_loc = l;
            }
            let ctx = Ctx { root, config };
            config_only(&ctx)?;
            let c = ctx.config.with_derived_seeds();
            let ck = train_codec(&ctx.path(&data), &ctx.path(&out), &c.codec)?;
            println!("codec trained to step {} ({})", ck.step, ctx.path(&out).display());
        }
        Command::TrainDiffusion { data, masks, codec, out, steps, p_uncond, seed } => {
            seed_override(&mut config, seed);
            if let Some(s) = steps {
                config.diffusion.steps = s;
            }
            if let Some(p) = p_uncond {
                config.diffusion.p_uncond = p;
            }
            let ctx = Ctx { root, config };
            config_only(&ctx)?;
            let c = ctx.config.with_derived_seeds();
            let ck = train_diffusion(&ctx.path(&data), &ctx.path(&masks), &ctx.path(&codec), &ctx.path(&out), &c.diffusion)?;
            println!("denoiser trained to step {} ({})", ck.step, ctx.path(&out).display());
        }
        Command::AugmentMasks { input, out, count, seed } => {
            seed_override(&mut config, seed);
            if let Some(n) = count {
                config.augment.count = n;
            }
            let ctx = Ctx { root, config };
            config_only(&ctx)?;
            let c = ctx.config.with_derived_seeds();
            let masks = pipeline::augment_masks(&ctx.path(&input), &ctx.path(&out), c.augment.count, &c.augment.params, Some(&c.hash()))?;
            println!("wrote {} masks to {}", masks.len(), ctx.path(&out).display());
        }
        Command::Sample { diffusion, codec, masks, w, count, out, seed, no_quantize } => {
            seed_override(&mut config, seed);
            if let Some(w) = w {
                config.sample.guidance = w;
            }
            if let Some(n) = count {
                config.sample.count = n;
            }
            if no_quantize {
                config.sample.quantize = false;
            }
            let ctx = Ctx { root, config };
            config_only(&ctx)?;
            let c = &ctx.config;
            let opts = SampleOptions {
                guidance: c.sample.guidance,
                seed: c.sample_seed(),
                quantize: c.sample.quantize,
                batch: c.sample.batch,
                variance: None,
            };
            let m = pipeline::sample_dataset(
                &ctx.path(&diffusion),
                &ctx.path(&codec),
                &ctx.path(&masks),
                &ctx.path(&out),
                c.sample.count,
                c.diffusion.structure_norm,
                &opts,
                Some(&c.hash()),
            )?;
            println!("wrote {} samples to {}", m.count, ctx.path(&out).display());
        }
        Command::Evaluate { real, synth, masks, out, emit_embedding, seed } => {
            seed_override(&mut config, seed);
            let ctx = Ctx { root, config };
            config_only(&ctx)?;
            let c = ctx.config.with_derived_seeds();
            let emb = emit_embedding.map(|p| ctx.path(&p));
            let out = ctx.path(&out);
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(LadError::from)?;
            }
            let r = evaluate(&ctx.path(&real), &ctx.path(&synth), &ctx.path(&masks), &c.eval, &out, emb.as_deref())?;
            println!("{}", r.to_json()?);
        }
        Command::Run { seed } => {
            seed_override(&mut config, seed);
            let root = pipeline::artifact_root(root.as_deref());
            let outcome = pipeline::run_pipeline(&config, &root)?;
            for (name, ran) in &outcome.stages {
                println!("{name}: {}", if *ran { "ran" } else { "skipped" });
            }
            println!("{}", outcome.report.to_json()?);
        }
        Command::Topo { mask, out, shape } => {
            let ctx = Ctx { root, config };
            let mask = ctx.path(&mask);
            let dims = match shape {
                Some(d) => d,
                None => {
                    let dir = mask.parent().unwrap_or(Path::new("."));
                    dataset::read_manifest(dir)
                        .map_err(|e| Failure::Config(format!("no --shape and no readable manifest: {e}")))?
                        .dims
                }
            };
            let bytes = std::fs::read(&mask).map_err(LadError::from)?;
            let m = dataset::decode_mask(&bytes, dims)?;
            let text: String = topo::structure_vector_volume(&m).0.iter().map(|v| format!("{v}\n")).collect();
            match out {
                Some(p) => std::fs::write(ctx.path(&p), text).map_err(LadError::from)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Validation without the writability probe for stages that take explicit
/// paths.
fn config_only(ctx: &Ctx) -> Result<(), Failure> {
    let v = validate_config(&ctx.config, None);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Failure::Config(v.join("; ")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
