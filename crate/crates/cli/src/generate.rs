use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use quasar_core::store::synth::{generate, LabelScheme, SynthSpec, ValueModel};
use quasar_core::theory::LabelDistribution;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LabelKind {
    /// Label of a row is its plate of origin.
    Plate,
    /// Plates carry sliding windows of classes; the last plate sees all.
    Windowed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ValueKind {
    /// Sparse uniform-noise rows, payload for throughput work.
    Noise,
    /// Dense class templates plus plate offsets plus Gaussian noise.
    Signal,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 196_608)]
    rows: u64,
    #[arg(long, default_value_t = 256)]
    cols: u64,
    /// Shard count. The layout is a fixed fourteen-plate mix, so this
    /// exists to make the geometry explicit in scripts.
    #[arg(long, default_value_t = 14)]
    shards: u64,
    #[arg(long, value_enum, default_value_t = LabelKind::Plate)]
    labels: LabelKind,
    /// Class count for windowed labels.
    #[arg(long, default_value_t = 27)]
    classes: u16,
    /// Classes per training plate for windowed labels.
    #[arg(long, default_value_t = 9)]
    window: u16,
    #[arg(long, value_enum, default_value_t = ValueKind::Noise)]
    values: ValueKind,
    #[arg(long, default_value_t = 4)]
    nnz_min: u32,
    #[arg(long, default_value_t = 8)]
    nnz_max: u32,
    #[arg(long, default_value_t = 0.3)]
    class_scale: f64,
    #[arg(long, default_value_t = 1.2)]
    plate_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    /// Preset mimicking the screen the plate mix was measured from:
    /// plate labels over the fixed mix, noise values. Prints the label
    /// distribution entropy.
    #[arg(long)]
    tahoe_like: bool,
}

pub fn run(cli: &crate::Cli, args: &GenerateArgs) -> Result<serde_json::Value> {
    cli.single_rank_only("generate")?;
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| anyhow::anyhow!("generate writes a store; pass --out DIR"))?;
    if args.rows == 0 {
        bail!("--rows must be positive");
    }
    if args.cols == 0 {
        bail!("--cols must be positive");
    }
    if args.shards != 14 {
        bail!("--shards: the store layout is a fixed fourteen-plate mix; only 14 is supported");
    }
    let labels = if args.tahoe_like {
        if args.labels == LabelKind::Windowed {
            bail!("--tahoe-like fixes --labels plate");
        }
        LabelScheme::Plate
    } else {
        match args.labels {
            LabelKind::Plate => LabelScheme::Plate,
            LabelKind::Windowed => {
                if args.classes == 0 {
                    bail!("--classes must be positive");
                }
                if args.window == 0 || args.window > args.classes {
                    bail!("--window must lie in 1..=--classes ({})", args.classes);
                }
                LabelScheme::PlateWindowedClasses {
                    n_classes: args.classes,
                    window: args.window,
                }
            }
        }
    };
    let values = match args.values {
        ValueKind::Noise => {
            if args.nnz_min > args.nnz_max {
                bail!(
                    "--nnz-min ({}) exceeds --nnz-max ({})",
                    args.nnz_min,
                    args.nnz_max
                );
            }
            if u64::from(args.nnz_max) > args.cols {
                bail!(
                    "--nnz-max ({}) exceeds --cols ({}); rows cannot hold that many nonzeros",
                    args.nnz_max,
                    args.cols
                );
            }
            ValueModel::UniformNoise {
                nnz_min: args.nnz_min,
                nnz_max: args.nnz_max,
            }
        }
        ValueKind::Signal => {
            for (flag, v) in [
                ("--class-scale", args.class_scale),
                ("--plate-scale", args.plate_scale),
                ("--noise-scale", args.noise_scale),
            ] {
                if !v.is_finite() || v < 0.0 {
                    bail!("{flag} must be finite and non-negative, got {v}");
                }
            }
            ValueModel::ClassSignal {
                class_scale: args.class_scale,
                plate_scale: args.plate_scale,
                noise: args.noise_scale,
            }
        }
    };
    let spec = SynthSpec {
        total_rows: args.rows,
        n_cols: args.cols,
        seed: cli.seed,
        labels,
        values,
    };
    let manifest = generate(out, &spec)
        .with_context(|| format!("generating store under {}", out.display()))?;
    println!("{}", manifest.display());
    let mix_entropy = LabelDistribution::plate_mix().entropy_bits();
    if args.tahoe_like {
        println!("plate mix entropy: {mix_entropy:.3} bits");
    }
    Ok(serde_json::json!({
        "command": "generate",
        "manifest": manifest.display().to_string(),
        "rows": args.rows,
        "cols": args.cols,
        "shards": args.shards,
        "plate_mix_entropy_bits": mix_entropy,
    }))
}
