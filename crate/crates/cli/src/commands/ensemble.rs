use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subalign_core::adapt::score_probabilities;
use subalign_core::dataio::{read_embeddings, read_labels, read_subspace, write_embeddings, write_subspace};
use subalign_core::detector::{Hypothesis, SubsetStrategy};
use subalign_core::model::{load_checkpoint, save_checkpoint};
use subalign_core::{build_hypotheses, AlignmentTransform, EnsembleConfig, Error, HypothesisEnsemble, Rng};

use super::adapt::{resolve_config, MODEL_FILE, PHI_FILE, SOURCE_SUBSPACE_FILE, TARGET_SUBSPACE_FILE};
use super::{create_dir, print_json, print_text, read_config};
use crate::failure::{CmdResult, Failure, WithContext};
use crate::manifest::{sidecar, write_json, ManifestBuilder, MANIFEST_FILE};
use crate::{BuildEnsembleArgs, DetectArgs};

const ENSEMBLE_FILE: &str = "ensemble.json";

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleIndex {
    tau: f64,
    sub_dim: usize,
    strategies: Vec<SubsetStrategy>,
}

fn hypothesis_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("hypothesis_{k}"))
}

pub fn build_ensemble(args: &BuildEnsembleArgs) -> CmdResult<()> {
    let cfg = resolve_config(args.config.as_deref(), None, args.seed, args.sub_dim.as_deref())?;
    let mut ens_cfg: EnsembleConfig = read_config(args.ensemble_config.as_deref())?;
    if let Some(tau) = args.tau {
        ens_cfg.tau = tau;
    }
    ens_cfg.validate()?;
    let model = load_checkpoint(&args.model).ctx("reading model")?;
    let w_s = read_subspace(&args.source_subspace).ctx("reading source subspace")?;
    let target = read_embeddings(&args.target_features).ctx("reading target features")?;

    let ensemble = build_hypotheses(&model, &w_s, &target, &cfg, &ens_cfg, &mut Rng::new(cfg.seed))
        .ctx("building hypotheses")?;

    let root = &args.out_dir;
    create_dir(root)?;
    let mut outputs = Vec::new();
    for (k, h) in ensemble.hypotheses().iter().enumerate() {
        let dir = hypothesis_dir(root, k);
        create_dir(&dir)?;
        let paths = [dir.join(MODEL_FILE), dir.join(PHI_FILE), dir.join(TARGET_SUBSPACE_FILE)];
        save_checkpoint(&h.model, &paths[0]).ctx("writing hypothesis model")?;
        write_embeddings(&paths[1], &h.phi.phi).ctx("writing hypothesis alignment")?;
        write_subspace(&paths[2], &h.w_t).ctx("writing hypothesis subspace")?;
        outputs.extend(paths);
    }
    let source_path = root.join(SOURCE_SUBSPACE_FILE);
    write_subspace(&source_path, ensemble.source_basis()).ctx("writing source subspace")?;
    outputs.push(source_path);
    let index_path = root.join(ENSEMBLE_FILE);
    write_json(
        &index_path,
        &EnsembleIndex {
            tau: ens_cfg.tau,
            sub_dim: ensemble.source_basis().sub_dim(),
            strategies: ens_cfg.strategies.clone(),
        },
    )?;
    outputs.push(index_path);

    let mut manifest = ManifestBuilder::new(
        "build-ensemble",
        Some(cfg.seed),
        serde_json::json!({ "adapt": &cfg, "ensemble": &ens_cfg }),
    );
    for p in [Some(&args.model), Some(&args.source_subspace), Some(&args.target_features), args.config.as_ref(), args.ensemble_config.as_ref()]
        .into_iter()
        .flatten()
    {
        manifest.input(p)?;
    }
    for p in &outputs {
        manifest.output(p)?;
    }
    manifest.write(&root.join(MANIFEST_FILE))?;
    print_json(&serde_json::json!({ "hypotheses": ensemble.k(), "sub_dim": ensemble.source_basis().sub_dim() }))
}

fn load_ensemble(root: &Path) -> CmdResult<HypothesisEnsemble> {
    let index_path = root.join(ENSEMBLE_FILE);
    let text = std::fs::read_to_string(&index_path).map_err(|source| {
        Failure::from(Error::Io {
            path: index_path.clone(),
            source,
        })
    })?;
    let index: EnsembleIndex = serde_json::from_str(&text).map_err(Failure::data)?;
    let mut hypotheses = Vec::with_capacity(index.strategies.len());
    for k in 0..index.strategies.len() {
        let dir = hypothesis_dir(root, k);
        hypotheses.push(Hypothesis {
            model: load_checkpoint(&dir.join(MODEL_FILE)).ctx(format!("reading hypothesis {k} model"))?,
            phi: AlignmentTransform::new(read_embeddings(&dir.join(PHI_FILE)).ctx(format!("reading hypothesis {k} alignment"))?)
                .map_err(Failure::data)?,
            w_t: read_subspace(&dir.join(TARGET_SUBSPACE_FILE)).ctx(format!("reading hypothesis {k} subspace"))?,
        });
    }
    let w_s = read_subspace(&root.join(SOURCE_SUBSPACE_FILE)).ctx("reading source subspace")?;
    HypothesisEnsemble::new(hypotheses, w_s, index.tau).map_err(Failure::data)
}

#[derive(Debug, Serialize)]
struct SampleLine {
    q_bar: f64,
    gated: bool,
    prediction: usize,
}

#[derive(Debug, Serialize)]
struct DetectSummary {
    samples: usize,
    tau: f64,
    mean_q_bar: f64,
    gated_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ece: Option<f64>,
}

pub fn detect(args: &DetectArgs) -> CmdResult<()> {
    let mut ensemble = load_ensemble(&args.ensemble_dir)?;
    if let Some(tau) = args.tau {
        ensemble = ensemble.with_tau(tau)?;
    }
    let features = read_embeddings(&args.features).ctx("reading features")?;
    let labels = args.labels.as_ref().map(|p| read_labels(p).ctx("reading labels")).transpose()?;
    let out = ensemble.decide(&features).ctx("scoring samples")?;
    let report = labels
        .as_ref()
        .map(|y| score_probabilities(&out.probabilities, y))
        .transpose()?;

    let n = out.decisions.len();
    let summary = DetectSummary {
        samples: n,
        tau: ensemble.tau(),
        mean_q_bar: out.decisions.iter().map(|d| d.q_bar).sum::<f64>() / n as f64,
        gated_fraction: out.decisions.iter().filter(|d| !d.used_alignment).count() as f64 / n as f64,
        accuracy: report.as_ref().map(|r| r.accuracy),
        ece: report.as_ref().map(|r| r.ece),
    };

    let mut lines = String::new();
    for d in &out.decisions {
        let line = SampleLine {
            q_bar: d.q_bar,
            gated: !d.used_alignment,
            prediction: d.prediction,
        };
        lines.push_str(&serde_json::to_string(&line).map_err(Failure::data)?);
        lines.push('\n');
    }
    let summary_line = serde_json::to_string(&serde_json::json!({ "summary": &summary })).map_err(Failure::data)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &lines).map_err(|source| {
                Failure::from(Error::Io {
                    path: path.clone(),
                    source,
                })
            })?;
            let mut manifest = ManifestBuilder::new("detect", None, serde_json::json!({ "tau": ensemble.tau() }));
            manifest.input(&args.features)?;
            if let Some(l) = &args.labels {
                manifest.input(l)?;
            }
            manifest.input(&args.ensemble_dir.join(ENSEMBLE_FILE))?;
            manifest.output(path)?;
            manifest.metrics(&summary);
            manifest.write(&sidecar(path))?;
            print_text(&format!("{summary_line}\n"))
        }
        None => print_text(&format!("{lines}{summary_line}\n")),
    }
}
