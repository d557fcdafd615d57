//! Weights-file tools.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::Subcommand;
use lopt_core::engine::{LoptWeights, DEFAULT_HIDDEN};
use lopt_core::features::FeatureSetId;
use lopt_core::tensors::{NamedTensorFile, FORMAT_VERSION};

use crate::parse_feature_set;

#[derive(Subcommand, Debug, Clone)]
pub enum WeightsCommand {
    /// Print layer shapes, feature set and accumulator decay rates.
    Inspect {
        path: PathBuf,
    },
    /// Re-serialize a weights file into the given container version.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = FORMAT_VERSION)]
        to_version: u32,
    },
    /// Write a fresh weights file.
    Init {
        #[arg(long, default_value = "small_fc_lopt", value_parser = parse_feature_set)]
        feature_set: FeatureSetId,
        /// Hidden layer widths.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HIDDEN)]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// All-zero layers instead of a seeded random init.
        #[arg(long)]
        zero: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<LoptWeights> {
    let file = NamedTensorFile::load(path).with_context(|| format!("reading {}", path.display()))?;
    LoptWeights::from_file(&file).with_context(|| format!("{} is not a weights file", path.display()))
}

pub fn report(w: &LoptWeights) -> String {
    let mut s = String::new();
    let topology: Vec<String> = w.topology().iter().map(ToString::to_string).collect();
    let _ = writeln!(s, "container version: {FORMAT_VERSION}");
    let _ = writeln!(s, "feature set: {} (d_feat {})", w.feature_set(), w.feature_set().d_feat());
    let _ = writeln!(s, "topology: {}", topology.join(" -> "));
    for (i, layer) in w.layers().iter().enumerate() {
        let (rows, cols) = layer.weight().shape();
        let _ = writeln!(s, "layer {i}: weight {rows}x{cols}, bias {}", layer.bias().len());
    }
    let _ = writeln!(s, "alpha: {}", w.alpha);
    let _ = writeln!(s, "beta_out: {}", w.beta_out);
    let _ = writeln!(s, "update sign: {:?}", w.update_sign);
    let b = &w.betas;
    let _ = writeln!(s, "momentum betas: {:?}", b.momentum);
    let _ = writeln!(s, "second moment beta: {}", b.second_moment);
    let _ = writeln!(s, "adafactor betas: {:?}", b.adafactor);
    s
}

pub fn run(cmd: &WeightsCommand) -> Result<()> {
    match cmd {
        WeightsCommand::Inspect { path } => print!("{}", report(&load(path)?)),
        WeightsCommand::Convert {
            input,
            output,
            to_version,
        } => {
            ensure!(
                *to_version == FORMAT_VERSION,
                "cannot write container version {to_version} (supported: {FORMAT_VERSION})"
            );
            load(input)?.to_file().save(output)?;
            eprintln!("wrote {} (container version {to_version})", output.display());
        }
        WeightsCommand::Init {
            feature_set,
            hidden,
            seed,
            zero,
            out,
        } => {
            let w = if *zero {
                LoptWeights::zeros(*feature_set, hidden)?
            } else {
                LoptWeights::random(*feature_set, hidden, *seed)?
            };
            w.to_file().save(out)?;
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}
