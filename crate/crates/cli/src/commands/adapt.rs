use serde::Serialize;
use subalign_core::adapt::Alignment;
use subalign_core::dataio::{read_embeddings, read_labels, read_subspace, write_embeddings, write_subspace};
use subalign_core::model::{load_checkpoint, save_checkpoint};
use subalign_core::{
    adapt as run_method, evaluate, AdaptConfig, AlignmentTransform, EvalReport, LossReport, Method, Rng, SubspaceBasis,
};

use super::{create_dir, parse_sub_dim, print_json, read_config};
use crate::failure::{CmdResult, Failure, WithContext};
use crate::manifest::{sidecar, write_json, ManifestBuilder, MANIFEST_FILE};
use crate::{AdaptArgs, EvalArgs};

pub const MODEL_FILE: &str = "model.ckp";
pub const PHI_FILE: &str = "phi.emb";
pub const TARGET_SUBSPACE_FILE: &str = "target_subspace.sub";
pub const SOURCE_SUBSPACE_FILE: &str = "source_subspace.sub";
pub const REPORT_FILE: &str = "report.json";

/// Loads the adaptation config and applies flag overrides.
pub fn resolve_config(
    path: Option<&std::path::Path>,
    method: Option<&str>,
    seed: Option<u64>,
    sub_dim: Option<&str>,
) -> CmdResult<AdaptConfig> {
    let mut cfg: AdaptConfig = read_config(path)?;
    if let Some(m) = method {
        cfg.method = m.parse::<Method>().map_err(Failure::from)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = sub_dim {
        cfg.sub_dim = parse_sub_dim(d)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct AdaptReport<'a> {
    config: &'a AdaptConfig,
    trainable: Vec<&'static str>,
    sub_dim: Option<usize>,
    initial_loss: LossReport,
    epochs: &'a [LossReport],
    updates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_only: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adapted: Option<EvalReport>,
}

pub fn adapt(args: &AdaptArgs) -> CmdResult<()> {
    let cfg = resolve_config(
        args.config.as_deref(),
        args.method.as_deref(),
        args.seed,
        args.sub_dim.as_deref(),
    )?;
    let w_s = match (&args.source_subspace, cfg.method.uses_alignment()) {
        (Some(p), _) => Some(read_subspace(p).ctx("reading source subspace")?),
        (None, true) => {
            return Err(Failure::usage(anyhow::anyhow!(
                "--source-subspace is required for method cattan"
            )))
        }
        (None, false) => None,
    };
    let model = load_checkpoint(&args.model).ctx("reading model")?;
    let target = read_embeddings(&args.target_features).ctx("reading target features")?;
    let labels = args
        .target_labels
        .as_ref()
        .map(|p| read_labels(p).ctx("reading target labels"))
        .transpose()?;

    let result = run_method(&model, w_s.as_ref(), &target, &cfg, &mut Rng::new(cfg.seed)).ctx("adapting")?;

    create_dir(&args.out)?;
    let model_path = args.out.join(MODEL_FILE);
    save_checkpoint(&result.model, &model_path).ctx("writing adapted model")?;
    let mut outputs = vec![model_path];
    if let (Some(phi), Some(w_t), Some(w_s)) = (&result.alignment, &result.w_t, &result.w_s) {
        let paths = [
            args.out.join(PHI_FILE),
            args.out.join(TARGET_SUBSPACE_FILE),
            args.out.join(SOURCE_SUBSPACE_FILE),
        ];
        write_embeddings(&paths[0], &phi.phi).ctx("writing alignment")?;
        write_subspace(&paths[1], w_t).ctx("writing target subspace")?;
        write_subspace(&paths[2], w_s).ctx("writing source subspace")?;
        outputs.extend(paths);
    }

    let (source_only, adapted) = match &labels {
        Some(y) => (
            Some(evaluate(&model, None, &target, y)?),
            Some(evaluate(&result.model, result.alignment(), &target, y)?),
        ),
        None => (None, None),
    };
    let report = AdaptReport {
        config: &cfg,
        trainable: if result.alignment.is_some() {
            vec!["bn_gamma", "bn_beta", "phi"]
        } else {
            vec!["bn_gamma", "bn_beta"]
        },
        sub_dim: result.w_t.as_ref().map(SubspaceBasis::sub_dim),
        initial_loss: result.initial,
        epochs: &result.trace,
        updates: result.batch_losses.len(),
        source_only,
        adapted,
    };
    let report_path = args.out.join(REPORT_FILE);
    write_json(&report_path, &report)?;
    outputs.push(report_path);

    let mut manifest = ManifestBuilder::new("adapt", Some(cfg.seed), &cfg);
    for p in [Some(&args.model), args.source_subspace.as_ref(), Some(&args.target_features), args.target_labels.as_ref(), args.config.as_ref()]
        .into_iter()
        .flatten()
    {
        manifest.input(p)?;
    }
    for p in &outputs {
        manifest.output(p)?;
    }
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    print_json(&serde_json::json!({
        "method": cfg.method,
        "final_loss": result.trace.last().map(|r| r.total),
        "accuracy": report.adapted.as_ref().map(|r| r.accuracy),
        "source_only_accuracy": report.source_only.as_ref().map(|r| r.accuracy),
    }))
}

pub fn eval(args: &EvalArgs) -> CmdResult<()> {
    let model = load_checkpoint(&args.model).ctx("reading model")?;
    let features = read_embeddings(&args.features).ctx("reading features")?;
    let labels = read_labels(&args.labels).ctx("reading labels")?;
    let aligned = match (&args.alignment, &args.source_subspace, &args.target_subspace) {
        (Some(a), Some(s), Some(t)) => {
            let phi = AlignmentTransform::new(read_embeddings(a).ctx("reading alignment")?)?;
            let w_t = read_subspace(t).ctx("reading target subspace")?;
            let w_s = read_subspace(s).ctx("reading source subspace")?;
            let w_s = if w_s.sub_dim() > phi.dim() { w_s.truncate(phi.dim())? } else { w_s };
            Some((phi, w_t, w_s))
        }
        (None, None, None) => None,
        _ => {
            return Err(Failure::usage(anyhow::anyhow!(
                "--alignment, --source-subspace and --target-subspace go together"
            )))
        }
    };
    let alignment = aligned.as_ref().map(|(phi, w_t, w_s)| Alignment { phi, w_t, w_s });
    let report = evaluate(&model, alignment, &features, &labels).ctx("evaluating")?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
        let mut manifest = ManifestBuilder::new("eval", None, serde_json::json!({ "aligned": aligned.is_some() }));
        for p in [Some(&args.model), Some(&args.features), Some(&args.labels), args.alignment.as_ref(), args.source_subspace.as_ref(), args.target_subspace.as_ref()]
            .into_iter()
            .flatten()
        {
            manifest.input(p)?;
        }
        manifest.output(out)?;
        manifest.write(&sidecar(out))?;
    }
    print_json(&report)
}
