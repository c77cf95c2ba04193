use serde::Serialize;
use subalign_core::dataio::{
    gen_synthetic, read_embeddings, read_labels, read_subspace, write_embeddings, write_labels,
    write_subspace, SynthConfig,
};
use subalign_core::model::{save_checkpoint, train_source as fit_source, load_checkpoint};
use subalign_core::subspace::{covariance_spectrum, fit_pca, select_dim, DimSelection};
use subalign_core::{evaluate, DimSelectConfig, Error, Rng, SubDim, TrainConfig};

use super::{create_dir, parse_sub_dim, print_json, print_text, read_config};
use crate::failure::{CmdResult, Failure, WithContext};
use crate::manifest::{write_json, sidecar, ManifestBuilder, MANIFEST_FILE};
use crate::{EstimateDimArgs, GenSynthArgs, TrainSourceArgs};

pub fn gen_synth(args: &GenSynthArgs) -> CmdResult<()> {
    let cfg: SynthConfig = read_config(args.config.as_deref())?;
    let data = gen_synthetic(&cfg).ctx("generating synthetic data")?;
    create_dir(&args.out_dir)?;

    let mut manifest = ManifestBuilder::new("gen-synth", Some(cfg.seed), &cfg);
    if let Some(path) = &args.config {
        manifest.input(path)?;
    }
    let dir = &args.out_dir;
    let mut written = vec![
        (dir.join("source_features.emb"), Some(&data.source.features), None),
        (dir.join("source_labels.lbl"), None, Some(&data.source.labels)),
        (dir.join("target_features.emb"), Some(&data.target.features), None),
        (dir.join("target_labels.lbl"), None, Some(&data.target.labels)),
    ];
    if let Some(h) = &data.source_heldout {
        written.push((dir.join("heldout_features.emb"), Some(&h.features), None));
        written.push((dir.join("heldout_labels.lbl"), None, Some(&h.labels)));
    }
    let shift = data.shift.augmented();
    written.push((dir.join("shift.emb"), Some(&shift), None));
    for (path, features, labels) in written {
        match (features, labels) {
            (Some(m), _) => write_embeddings(&path, m).ctx("writing features")?,
            (_, Some(l)) => write_labels(&path, l).ctx("writing labels")?,
            _ => unreachable!(),
        }
        manifest.output(&path)?;
    }
    let path = manifest.write(&dir.join(MANIFEST_FILE))?;
    print_text(&format!("{}\n", path.display()))
}

#[derive(Debug, Serialize)]
struct TrainEcho<'a> {
    train: &'a TrainConfig,
    sub_dim: SubDim,
    delta: f64,
    epsilon: f64,
}

#[derive(Debug, Serialize)]
struct TrainMetrics {
    train_accuracy: f64,
    train_ece: f64,
    sub_dim: usize,
    latent_dim: usize,
}

pub fn train_source(args: &TrainSourceArgs) -> CmdResult<()> {
    let cfg: TrainConfig = read_config(args.config.as_deref())?;
    let sub_dim = parse_sub_dim(&args.sub_dim)?;
    let select = DimSelectConfig {
        delta: args.delta,
        epsilon: args.epsilon,
        d_max: cfg.latent_dim.saturating_sub(1).max(1),
    };
    select.validate()?;
    if let SubDim::Fixed(d) = sub_dim {
        if d == 0 || d > cfg.latent_dim {
            return Err(Failure::usage(anyhow::anyhow!(
                "--sub-dim {d} must lie in 1..={}",
                cfg.latent_dim
            )));
        }
    }

    let features = read_embeddings(&args.features).ctx("reading source features")?;
    let labels = read_labels(&args.labels).ctx("reading source labels")?;
    let model = fit_source(&features, &labels, &cfg, &mut Rng::new(args.seed)).ctx("training source model")?;
    let latent = model.latent_full_pass(&features)?;
    let d = match sub_dim {
        SubDim::Fixed(d) => d,
        // Without target data the source spectrum stands in for both.
        SubDim::Auto(_) => {
            let spectrum = covariance_spectrum(&latent)?;
            select_dim(&spectrum, &spectrum, latent.rows(), &select)
                .ctx("selecting the source subspace dimension")?
                .d
        }
    };
    let basis = fit_pca(&latent, d)?;
    let report = evaluate(&model, None, &features, &labels)?;

    save_checkpoint(&model, &args.out_model).ctx("writing checkpoint")?;
    write_subspace(&args.out_subspace, &basis).ctx("writing subspace")?;

    let echo = TrainEcho {
        train: &cfg,
        sub_dim,
        delta: args.delta,
        epsilon: args.epsilon,
    };
    let mut manifest = ManifestBuilder::new("train-source", Some(args.seed), &echo);
    for p in [Some(&args.features), Some(&args.labels), args.config.as_ref()].into_iter().flatten() {
        manifest.input(p)?;
    }
    manifest.output(&args.out_model)?;
    manifest.output(&args.out_subspace)?;
    let metrics = TrainMetrics {
        train_accuracy: report.accuracy,
        train_ece: report.ece,
        sub_dim: d,
        latent_dim: model.latent_dim(),
    };
    manifest.metrics(&metrics);
    manifest.write(&sidecar(&args.out_model))?;
    print_json(&metrics)
}

pub fn estimate_dim(args: &EstimateDimArgs) -> CmdResult<()> {
    let model = load_checkpoint(&args.model).ctx("reading model")?;
    let w_s = read_subspace(&args.source_subspace).ctx("reading source subspace")?;
    let target = read_embeddings(&args.target_features).ctx("reading target features")?;
    let cfg = DimSelectConfig {
        delta: args.delta,
        epsilon: args.epsilon,
        d_max: w_s.sub_dim(),
    };
    cfg.validate()?;
    let latent = model.latent_full_pass(&target)?;
    let spectrum = covariance_spectrum(&latent)?;
    let selection = match select_dim(w_s.eigenvalues(), &spectrum, latent.rows(), &cfg) {
        Ok(s) => s,
        Err(Error::NoStableDimension { curve }) => {
            print_json(&DimSelection { d: 0, curve: curve.clone() })?;
            return Err(Failure::from(Error::NoStableDimension { curve }));
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(out) = &args.out {
        write_json(out, &selection)?;
        let mut manifest = ManifestBuilder::new("estimate-dim", None, cfg);
        for p in [&args.model, &args.source_subspace, &args.target_features] {
            manifest.input(p)?;
        }
        manifest.output(out)?;
        manifest.write(&sidecar(out))?;
    }
    print_json(&selection)
}
