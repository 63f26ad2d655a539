//! The eight pipeline stages plus the `all` composition.
//!
//! Stage outputs live under the work directory:
//!
//! ```text
//! panels/<figure>.json    consolidated panel proposals
//! raw/<figure>.json       raw per-view proposals (only with --keep-raw)
//! assoc/<figure>.json     panels with routed caption text
//! regions/<figure>.json   mined regions before cleanup
//! clean/<figure>.json     regions after cleanup, with per-panel stats
//! corpus.manifest         validated line-delimited corpus
//! features.json           feature tables keyed by record id
//! eval_texts.json         retrieval-protocol text features
//! latents.json            ground-truth codes (synthetic corpora only)
//! model.ckpt              encoder + optimizer state
//! loss_history.csv        one row per training step
//! train_summary.json      final per-level losses
//! retrieval.json          recall@k results
//! retrieval.txt           the same results as an aligned table
//! report.json, report.txt aggregated run summary
//! run-manifest.json       config digest, seeds, artifact digests
//! ```
//!
//! Per-figure files are skipped when present (resume) unless `force` is set.
//! Every write goes through a temp-file rename, so a killed run never leaves
//! a half-written artifact behind.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use figmine_core::corpus::{
    read_manifest, validate_hierarchy, write_manifest, CorpusManifest, FigureRecord, PanelRecord,
    RegionRecord,
};
use figmine_core::eval::{
    build_eval_split, cross_modal_results, format_results_table, panel_eval_text, region_eval_text,
    EvalLevel, RetrievalResult,
};
use figmine_core::geometry::BBox;
use figmine_core::lvlm::{HttpConfig, HttpResponder, LvlmClient, MockStore, Responder};
use figmine_core::panels::{
    associate_text as associate_panels, consolidate, default_photographic_predicate,
    filter_photographic, propose_panels, AssociateStats, ConsolidateOutcome,
};
use figmine_core::postprocess::{cleanup, CleanupStats};
use figmine_core::regions::{mine_regions as mine_panel_regions, MineStats};
use figmine_core::synth::{self, SynthSpec};
use figmine_core::train::{
    crop_image, encode_forward, image_features, load_checkpoint, load_rgb, loss_history_csv,
    panel_feature_map, run_schedule, save_checkpoint, text_features, EncoderParams, Level,
    LossReport, Mat, ModelDims, RunScheduleConfig, Tower, TrainConfig, TrainingSet,
};

use crate::config::{LvlmMode, RunConfig, SeedsSection};
use crate::{log_event, sha256_hex, CliError};

// ---------------------------------------------------------------------------
// Sidecar and artifact shapes
// ---------------------------------------------------------------------------

/// Text-association output for one figure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssocSidecar {
    pub panels: Vec<PanelRecord>,
    pub stats: AssociateStats,
    pub duplicate_identifiers: Vec<String>,
}

/// Region-mining output for one figure, before cleanup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionsSidecar {
    pub regions: Vec<RegionRecord>,
    /// Per-panel mining stats, keyed by panel id.
    pub stats: BTreeMap<String, MineStats>,
}

/// Cleanup output for one figure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanSidecar {
    pub regions: Vec<RegionRecord>,
    /// Per-panel cleanup stats, keyed by panel id.
    pub stats: BTreeMap<String, CleanupStats>,
}

/// Featurized corpus plus the record id behind every row. Panel rows cover
/// photographic panels only: plots and schematics stay in the manifest but
/// contribute no image-text pairs, so the id lists are the join keys between
/// manifest records and feature rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureTable {
    pub training: TrainingSet,
    pub figure_ids: Vec<String>,
    pub panel_ids: Vec<String>,
    pub region_ids: Vec<String>,
}

/// Retrieval-protocol text features, row-aligned with [`FeatureTable`].
/// Panel rows use the assigned fragments without the generated description;
/// region rows prefer the model-written caption over the grounded fragment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalTexts {
    pub panel: Vec<Vec<f64>>,
    pub region: Vec<Vec<f64>>,
}

/// Written by `pretrain`, echoed verbatim by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    /// Last total loss observed at each level.
    pub final_loss: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
pub struct RunManifestFile {
    pub config_sha256: String,
    pub seeds: SeedsSection,
    /// Relative artifact path to SHA-256, sorted by path.
    pub artifacts: BTreeMap<String, String>,
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn work(cfg: &RunConfig) -> &Path {
    &cfg.paths.work_dir
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Data(format!("cannot finalize {}: {e}", path.display())))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("cannot serialize {}: {e}", path.display())))?;
    json.push('\n');
    write_bytes_atomic(path, json.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Prerequisite check with the stage that produces the file in the message.
fn require(path: &Path, produced_by: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "missing prerequisite {} (run `{produced_by}` first)",
            path.display()
        )))
    }
}

/// File stem for a figure's sidecar; non-portable characters collapse to
/// underscores, and `load_figures` rejects id sets that collide after this.
fn sidecar_stem(figure_id: &str) -> String {
    figure_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '.' | '_') { c } else { '_' })
        .collect()
}

fn sidecar_path(dir: &Path, figure_id: &str) -> PathBuf {
    dir.join(format!("{}.json", sidecar_stem(figure_id)))
}

pub fn load_figures(cfg: &RunConfig) -> Result<Vec<FigureRecord>, CliError> {
    let path = &cfg.paths.figures;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("figure list {} unreadable: {e}", path.display())))?;
    let mut figures = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: FigureRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        figures.push(record);
    }
    if figures.is_empty() {
        return Err(CliError::Data(format!("figure list {} has no records", path.display())));
    }
    let mut stems: BTreeMap<String, &str> = BTreeMap::new();
    for f in &figures {
        if let Some(other) = stems.insert(sidecar_stem(&f.figure_id), &f.figure_id) {
            return Err(CliError::Data(format!(
                "figure ids {other:?} and {:?} collide in sidecar naming",
                f.figure_id
            )));
        }
    }
    Ok(figures)
}

fn resolve_image(cfg: &RunConfig, figure: &FigureRecord) -> PathBuf {
    cfg.paths.images_dir.join(&figure.image_path)
}

pub fn build_client(cfg: &RunConfig) -> Result<LvlmClient, CliError> {
    let responder: Box<dyn Responder> = match cfg.lvlm.mode {
        LvlmMode::Mock => {
            let dir = cfg.lvlm.mock_dir.as_ref().expect("validated: mock mode has mock_dir");
            if !dir.is_dir() {
                return Err(CliError::Config(format!(
                    "lvlm.mock_dir {} does not exist",
                    dir.display()
                )));
            }
            Box::new(MockStore::new(dir, cfg.lvlm.strict_mock))
        }
        LvlmMode::Http => {
            let http = HttpConfig {
                endpoint: cfg.lvlm.endpoint.clone().expect("validated: http mode has endpoint"),
                model: cfg.lvlm.model.clone().expect("validated: http mode has model"),
                api_key_env: cfg.lvlm.api_key_env.clone(),
                timeout_secs: cfg.lvlm.timeout_secs,
            };
            Box::new(HttpResponder::new(http)?)
        }
    };
    Ok(LvlmClient::with_limits(responder, cfg.lvlm.retry_limit, cfg.lvlm.max_in_flight))
}

/// Per-figure generator derived from the pipeline seed and the figure id,
/// so results do not depend on worker scheduling or figure order.
pub fn figure_rng(seed: u64, figure_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(figure_id.as_bytes());
    let digest = hasher.finalize();
    let mut eight = [0u8; 8];
    eight.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(eight))
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))
}

/// Rewrite `run-manifest.json`: config digest, seeds, and a SHA-256 for
/// every artifact under the work directory. No timestamps, so reruns that
/// produce identical artifacts produce an identical manifest.
pub fn write_run_manifest(cfg: &RunConfig) -> Result<(), CliError> {
    let root = work(cfg);
    ensure_dir(root)?;
    let mut artifacts = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir)
            .map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
        for entry in entries {
            let entry =
                entry.map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .expect("walk stays under the work dir")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if rel == "run-manifest.json" || rel.ends_with(".tmp") {
                continue;
            }
            let bytes = std::fs::read(&path)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
            artifacts.insert(rel, sha256_hex(&bytes));
        }
    }
    let manifest = RunManifestFile {
        config_sha256: cfg.config_digest.clone(),
        seeds: cfg.seeds,
        artifacts,
    };
    write_json_atomic(&root.join("run-manifest.json"), &manifest)
}

// ---------------------------------------------------------------------------
// Stage: parse-panels
// ---------------------------------------------------------------------------

pub fn parse_panels(cfg: &RunConfig, force: bool, keep_raw: bool) -> Result<(), CliError> {
    const STAGE: &str = "parse-panels";
    if !cfg.paths.images_dir.is_dir() {
        return Err(CliError::Config(format!(
            "paths.images_dir {} does not exist",
            cfg.paths.images_dir.display()
        )));
    }
    let figures = load_figures(cfg)?;
    let client = build_client(cfg)?;
    let out_dir = work(cfg).join("panels");
    ensure_dir(&out_dir)?;
    let raw_dir = work(cfg).join("raw");
    if keep_raw {
        ensure_dir(&raw_dir)?;
    }
    let consolidate_cfg = cfg.panels.consolidate();
    pool(cfg)?.install(|| {
        figures.par_iter().try_for_each(|figure| -> Result<(), CliError> {
            let out = sidecar_path(&out_dir, &figure.figure_id);
            if out.exists() && !force {
                log_event(STAGE, Some(&figure.figure_id), "skip", Some("output present"), None);
                return Ok(());
            }
            let t0 = Instant::now();
            let mut rng = figure_rng(cfg.seeds.pipeline, &figure.figure_id);
            let image = resolve_image(cfg, figure);
            let batch = propose_panels(&client, figure, &image, cfg.panels.n_views, &mut rng)?;
            if keep_raw {
                write_json_atomic(&sidecar_path(&raw_dir, &figure.figure_id), &batch)?;
            }
            let mut outcome = consolidate(figure, &batch.proposals, &consolidate_cfg);
            filter_photographic(&mut outcome.panels, default_photographic_predicate);
            write_json_atomic(&out, &outcome)?;
            log_event(
                STAGE,
                Some(&figure.figure_id),
                "done",
                Some(&format!("{} panels", outcome.panels.len())),
                Some(t0.elapsed().as_millis()),
            );
            Ok(())
        })
    })?;
    write_run_manifest(cfg)
}

// ---------------------------------------------------------------------------
// Stage: associate-text
// ---------------------------------------------------------------------------

pub fn associate_text(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    const STAGE: &str = "associate-text";
    let figures = load_figures(cfg)?;
    let client = build_client(cfg)?;
    let in_dir = work(cfg).join("panels");
    let out_dir = work(cfg).join("assoc");
    ensure_dir(&out_dir)?;
    pool(cfg)?.install(|| {
        figures.par_iter().try_for_each(|figure| -> Result<(), CliError> {
            let out = sidecar_path(&out_dir, &figure.figure_id);
            if out.exists() && !force {
                log_event(STAGE, Some(&figure.figure_id), "skip", Some("output present"), None);
                return Ok(());
            }
            let input = sidecar_path(&in_dir, &figure.figure_id);
            require(&input, "parse-panels")?;
            let t0 = Instant::now();
            let outcome: ConsolidateOutcome = read_json(&input)?;
            let mut panels = outcome.panels;
            let image = resolve_image(cfg, figure);
            let stats = associate_panels(&client, figure, &image, &mut panels)?;
            let sidecar = AssocSidecar {
                panels: panels.into_iter().map(|p| p.record).collect(),
                stats,
                duplicate_identifiers: outcome.duplicate_identifiers,
            };
            write_json_atomic(&out, &sidecar)?;
            log_event(
                STAGE,
                Some(&figure.figure_id),
                "done",
                Some(&format!("{} orphans", sidecar.stats.orphans.len())),
                Some(t0.elapsed().as_millis()),
            );
            Ok(())
        })
    })?;
    write_run_manifest(cfg)
}

// ---------------------------------------------------------------------------
// Stage: mine-regions
// ---------------------------------------------------------------------------

pub fn mine_regions(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    const STAGE: &str = "mine-regions";
    let figures = load_figures(cfg)?;
    let client = build_client(cfg)?;
    let in_dir = work(cfg).join("assoc");
    let out_dir = work(cfg).join("regions");
    ensure_dir(&out_dir)?;
    pool(cfg)?.install(|| {
        figures.par_iter().try_for_each(|figure| -> Result<(), CliError> {
            let out = sidecar_path(&out_dir, &figure.figure_id);
            if out.exists() && !force {
                log_event(STAGE, Some(&figure.figure_id), "skip", Some("output present"), None);
                return Ok(());
            }
            let input = sidecar_path(&in_dir, &figure.figure_id);
            require(&input, "associate-text")?;
            let t0 = Instant::now();
            let assoc: AssocSidecar = read_json(&input)?;
            let image = resolve_image(cfg, figure);
            let mut regions = Vec::new();
            let mut stats = BTreeMap::new();
            for panel in &assoc.panels {
                let outcome = mine_panel_regions(&client, figure, &image, panel, &cfg.regions)?;
                regions.extend(outcome.regions);
                stats.insert(panel.panel_id.clone(), outcome.stats);
            }
            let sidecar = RegionsSidecar { regions, stats };
            write_json_atomic(&out, &sidecar)?;
            log_event(
                STAGE,
                Some(&figure.figure_id),
                "done",
                Some(&format!("{} regions", sidecar.regions.len())),
                Some(t0.elapsed().as_millis()),
            );
            Ok(())
        })
    })?;
    write_run_manifest(cfg)
}

// ---------------------------------------------------------------------------
// Stage: postprocess-boxes
// ---------------------------------------------------------------------------

pub fn postprocess_boxes(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    const STAGE: &str = "postprocess-boxes";
    let figures = load_figures(cfg)?;
    let assoc_dir = work(cfg).join("assoc");
    let in_dir = work(cfg).join("regions");
    let out_dir = work(cfg).join("clean");
    ensure_dir(&out_dir)?;
    pool(cfg)?.install(|| {
        figures.par_iter().try_for_each(|figure| -> Result<(), CliError> {
            let out = sidecar_path(&out_dir, &figure.figure_id);
            if out.exists() && !force {
                log_event(STAGE, Some(&figure.figure_id), "skip", Some("output present"), None);
                return Ok(());
            }
            let assoc_path = sidecar_path(&assoc_dir, &figure.figure_id);
            require(&assoc_path, "associate-text")?;
            let input = sidecar_path(&in_dir, &figure.figure_id);
            require(&input, "mine-regions")?;
            let t0 = Instant::now();
            let assoc: AssocSidecar = read_json(&assoc_path)?;
            let mined: RegionsSidecar = read_json(&input)?;
            let mut regions = Vec::new();
            let mut stats = BTreeMap::new();
            for panel in &assoc.panels {
                let of_panel: Vec<RegionRecord> = mined
                    .regions
                    .iter()
                    .filter(|r| r.parent_panel == panel.panel_id)
                    .cloned()
                    .collect();
                if of_panel.is_empty() {
                    continue;
                }
                let (clean, panel_stats) =
                    cleanup(&of_panel, panel.bbox.width(), panel.bbox.height(), &cfg.cleanup);
                regions.extend(clean);
                stats.insert(panel.panel_id.clone(), panel_stats);
            }
            let sidecar = CleanSidecar { regions, stats };
            write_json_atomic(&out, &sidecar)?;
            log_event(
                STAGE,
                Some(&figure.figure_id),
                "done",
                Some(&format!("{} regions kept", sidecar.regions.len())),
                Some(t0.elapsed().as_millis()),
            );
            Ok(())
        })
    })?;
    write_run_manifest(cfg)
}

// ---------------------------------------------------------------------------
// Stage: build-corpus
// ---------------------------------------------------------------------------

/// Training text for a panel: assigned fragments plus the generated
/// description. The retrieval protocol drops the description; see
/// [`EvalTexts`].
fn panel_train_text(panel: &PanelRecord) -> String {
    let mut text = panel.fragments.join(" ");
    if let Some(d) = &panel.generated_description {
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(d);
    }
    text
}

fn normalized_region_box(region: &RegionRecord, pw: f64, ph: f64) -> Result<BBox, CliError> {
    BBox::normalized(
        (region.bbox.x_min / pw).clamp(0.0, 1.0),
        (region.bbox.y_min / ph).clamp(0.0, 1.0),
        (region.bbox.x_max / pw).clamp(0.0, 1.0),
        (region.bbox.y_max / ph).clamp(0.0, 1.0),
    )
    .map_err(|e| CliError::Data(format!("region {} box: {e}", region.region_id)))
}

pub fn build_corpus(cfg: &RunConfig, force: bool, synthetic: Option<&Path>) -> Result<(), CliError> {
    const STAGE: &str = "build-corpus";
    let root = work(cfg);
    ensure_dir(root)?;
    let manifest_path = root.join("corpus.manifest");
    let features_path = root.join("features.json");
    let eval_texts_path = root.join("eval_texts.json");
    if manifest_path.exists() && features_path.exists() && eval_texts_path.exists() && !force {
        log_event(STAGE, None, "skip", Some("outputs present"), None);
        return write_run_manifest(cfg);
    }
    let t0 = Instant::now();

    let (manifest, table, eval_texts) = match synthetic {
        Some(spec_path) => {
            let text = std::fs::read_to_string(spec_path).map_err(|e| {
                CliError::Config(format!("synthetic spec {} unreadable: {e}", spec_path.display()))
            })?;
            let spec: SynthSpec = toml::from_str(&text).map_err(|e| {
                CliError::Config(format!("synthetic spec {}: {e}", spec_path.display()))
            })?;
            let corpus = synth::generate(&spec)?;
            write_json_atomic(&root.join("latents.json"), &corpus.latents)?;
            let eval_texts = synth_eval_texts(&corpus.training);
            let table = FeatureTable {
                figure_ids: corpus.manifest.figures.iter().map(|f| f.figure_id.clone()).collect(),
                panel_ids: corpus.manifest.panels.iter().map(|p| p.panel_id.clone()).collect(),
                region_ids: corpus.manifest.regions.iter().map(|r| r.region_id.clone()).collect(),
                training: corpus.training,
            };
            (corpus.manifest, table, eval_texts)
        }
        None => assemble_corpus(cfg)?,
    };

    let violations = validate_hierarchy(&manifest);
    if !violations.is_empty() {
        let shown: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
        return Err(CliError::Data(format!(
            "corpus fails validation with {} violations, first: {}",
            violations.len(),
            shown.join("; ")
        )));
    }
    table.training.validate()?;
    write_manifest(&manifest, &manifest_path)?;
    write_json_atomic(&features_path, &table)?;
    write_json_atomic(&eval_texts_path, &eval_texts)?;
    let (m, p, r) = table.training.counts();
    log_event(
        STAGE,
        None,
        "done",
        Some(&format!("{m} figures, {p} panels, {r} regions featurized")),
        Some(t0.elapsed().as_millis()),
    );
    write_run_manifest(cfg)
}

/// Synthetic features are views of latent codes, not strings, so the
/// retrieval protocol is applied at the feature level: panel rows are the
/// panel text views, region rows prefer the model-caption view.
fn synth_eval_texts(training: &TrainingSet) -> EvalTexts {
    let region = training
        .region_text_lvlm
        .iter()
        .zip(&training.region_text_sub)
        .map(|(lvlm, sub)| {
            lvlm.clone()
                .or_else(|| sub.clone())
                .expect("synthetic regions carry both text views")
        })
        .collect();
    EvalTexts { panel: training.panel_texts.clone(), region }
}

/// Gather sidecars for every figure, assemble the manifest, and featurize
/// images and texts into index-aligned tables.
fn assemble_corpus(cfg: &RunConfig) -> Result<(CorpusManifest, FeatureTable, EvalTexts), CliError> {
    let figures = load_figures(cfg)?;
    let assoc_dir = work(cfg).join("assoc");
    let clean_dir = work(cfg).join("clean");

    let mut panels: Vec<PanelRecord> = Vec::new();
    let mut regions: Vec<RegionRecord> = Vec::new();
    for figure in &figures {
        let assoc_path = sidecar_path(&assoc_dir, &figure.figure_id);
        require(&assoc_path, "associate-text")?;
        let clean_path = sidecar_path(&clean_dir, &figure.figure_id);
        require(&clean_path, "postprocess-boxes")?;
        let assoc: AssocSidecar = read_json(&assoc_path)?;
        let clean: CleanSidecar = read_json(&clean_path)?;
        // Regions grouped in panel order keeps the manifest independent of
        // how the clean sidecar happened to store them.
        for panel in &assoc.panels {
            regions.extend(clean.regions.iter().filter(|r| r.parent_panel == panel.panel_id).cloned());
        }
        panels.extend(assoc.panels);
    }

    let mut training = TrainingSet::default();
    let mut table_ids: (Vec<String>, Vec<String>, Vec<String>) = Default::default();
    let mut eval_panel: Vec<Vec<f64>> = Vec::new();
    let mut eval_region: Vec<Vec<f64>> = Vec::new();

    let mut panel_row: HashMap<&str, usize> = HashMap::new();
    for (fig_idx, figure) in figures.iter().enumerate() {
        let img = load_rgb(&resolve_image(cfg, figure))?;
        training.figure_images.push(image_features(&img));
        training.figure_texts.push(text_features(&figure.caption));
        table_ids.0.push(figure.figure_id.clone());

        for panel in panels.iter().filter(|p| p.parent_figure == figure.figure_id) {
            if !panel.is_photographic {
                continue;
            }
            let panel_img = crop_image(&img, &panel.bbox)?;
            let row = training.panel_images.len();
            panel_row.insert(panel.panel_id.as_str(), row);
            training.panel_images.push(image_features(&panel_img));
            training.panel_texts.push(text_features(&panel_train_text(panel)));
            training.panel_parent.push(fig_idx);
            training.panel_maps.push(panel_feature_map(&panel_img));
            table_ids.1.push(panel.panel_id.clone());
            eval_panel.push(text_features(&panel_eval_text(panel)));

            let (pw, ph) = (panel.bbox.width(), panel.bbox.height());
            for region in regions.iter().filter(|r| r.parent_panel == panel.panel_id) {
                let region_img = crop_image(&panel_img, &region.bbox)?;
                training.region_images.push(image_features(&region_img));
                training.region_text_lvlm.push(region.lvlm_caption.as_deref().map(text_features));
                training
                    .region_text_sub
                    .push(region.grounded_subcaption.as_deref().map(text_features));
                training.region_parent.push(row);
                training.region_boxes.push(normalized_region_box(region, pw, ph)?);
                table_ids.2.push(region.region_id.clone());
                let eval_text = region_eval_text(region).unwrap_or_default();
                eval_region.push(text_features(&eval_text));
            }
        }
    }

    let manifest = CorpusManifest::new(figures, panels, regions);
    let table = FeatureTable {
        training,
        figure_ids: table_ids.0,
        panel_ids: table_ids.1,
        region_ids: table_ids.2,
    };
    Ok((manifest, table, EvalTexts { panel: eval_panel, region: eval_region }))
}

// ---------------------------------------------------------------------------
// Stage: pretrain
// ---------------------------------------------------------------------------

/// Restrict the feature table to rows whose records appear in `keep`,
/// remapping parent indices. Row order follows the table, not the split.
pub fn filter_training(table: &FeatureTable, keep: &CorpusManifest) -> TrainingSet {
    let keep_figures: std::collections::BTreeSet<&str> =
        keep.figures.iter().map(|f| f.figure_id.as_str()).collect();
    let keep_panels: std::collections::BTreeSet<&str> =
        keep.panels.iter().map(|p| p.panel_id.as_str()).collect();
    let keep_regions: std::collections::BTreeSet<&str> =
        keep.regions.iter().map(|r| r.region_id.as_str()).collect();

    let t = &table.training;
    let mut out = TrainingSet::default();
    let mut fig_map: HashMap<usize, usize> = HashMap::new();
    for (i, id) in table.figure_ids.iter().enumerate() {
        if keep_figures.contains(id.as_str()) {
            fig_map.insert(i, out.figure_images.len());
            out.figure_images.push(t.figure_images[i].clone());
            out.figure_texts.push(t.figure_texts[i].clone());
        }
    }
    let mut panel_map: HashMap<usize, usize> = HashMap::new();
    for (i, id) in table.panel_ids.iter().enumerate() {
        let Some(&new_parent) = fig_map.get(&t.panel_parent[i]) else { continue };
        if keep_panels.contains(id.as_str()) {
            panel_map.insert(i, out.panel_images.len());
            out.panel_images.push(t.panel_images[i].clone());
            out.panel_texts.push(t.panel_texts[i].clone());
            out.panel_parent.push(new_parent);
            out.panel_maps.push(t.panel_maps[i].clone());
        }
    }
    for (i, id) in table.region_ids.iter().enumerate() {
        let Some(&new_parent) = panel_map.get(&t.region_parent[i]) else { continue };
        if keep_regions.contains(id.as_str()) {
            out.region_images.push(t.region_images[i].clone());
            out.region_text_lvlm.push(t.region_text_lvlm[i].clone());
            out.region_text_sub.push(t.region_text_sub[i].clone());
            out.region_parent.push(new_parent);
            out.region_boxes.push(t.region_boxes[i]);
        }
    }
    out
}

fn infer_dims(cfg: &RunConfig, table: &FeatureTable) -> Result<ModelDims, CliError> {
    let d_in_v = table
        .training
        .figure_images
        .first()
        .map(Vec::len)
        .ok_or_else(|| CliError::Data("feature table holds no figures".to_string()))?;
    let d_in_t = table
        .training
        .figure_texts
        .first()
        .map(Vec::len)
        .expect("validated: text rows match image rows");
    let c = table.training.panel_maps.first().map(|m| m.c).unwrap_or(3);
    Ok(ModelDims {
        d_in_v,
        d_in_t,
        hidden: cfg.train.hidden,
        d: cfg.train.d,
        g: cfg.train.g,
        c,
    })
}

pub fn pretrain(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    const STAGE: &str = "pretrain";
    let root = work(cfg);
    let ckpt_path = root.join("model.ckpt");
    if ckpt_path.exists() && !force {
        log_event(STAGE, None, "skip", Some("checkpoint present"), None);
        return write_run_manifest(cfg);
    }
    let manifest_path = root.join("corpus.manifest");
    require(&manifest_path, "build-corpus")?;
    let features_path = root.join("features.json");
    require(&features_path, "build-corpus")?;
    let t0 = Instant::now();

    let manifest = read_manifest(&manifest_path)?;
    let table: FeatureTable = read_json(&features_path)?;
    let (train_side, _held_out) =
        build_eval_split(&manifest, cfg.eval.holdout_fraction, cfg.seeds.split)?;
    let set = filter_training(&table, &train_side);
    let dims = infer_dims(cfg, &table)?;
    let params = EncoderParams::init(dims, cfg.seeds.train)?;
    let train_cfg = TrainConfig {
        optimizer: cfg.train.optimizer(),
        renormalize_aggregates: cfg.train.renormalize_aggregates,
        ..TrainConfig::default()
    };
    let sched = RunScheduleConfig {
        steps: cfg.train.steps,
        cycle: cfg.train.cycle.clone(),
        batch_m: cfg.train.batch_m,
        batch_p: cfg.train.batch_p,
        batch_r: cfg.train.batch_r,
        seed: cfg.seeds.train,
    };
    let (state, reports) = run_schedule(params, &set, &train_cfg, &sched)?;

    save_checkpoint(&ckpt_path, &state)?;
    write_bytes_atomic(&root.join("loss_history.csv"), loss_history_csv(&reports).as_bytes())?;
    write_json_atomic(&root.join("train_summary.json"), &train_summary(&reports))?;
    log_event(
        STAGE,
        None,
        "done",
        Some(&format!("{} steps", reports.len())),
        Some(t0.elapsed().as_millis()),
    );
    write_run_manifest(cfg)
}

fn train_summary(reports: &[LossReport]) -> TrainSummary {
    let mut final_loss = BTreeMap::new();
    for r in reports {
        final_loss.insert(r.level.to_string(), r.total);
    }
    TrainSummary { steps: reports.len() as u64, final_loss }
}

// ---------------------------------------------------------------------------
// Stage: eval-retrieval
// ---------------------------------------------------------------------------

/// Encode feature rows through one tower at the given level head.
pub fn embed(
    params: &EncoderParams,
    rows: &[Vec<f64>],
    tower: Tower,
    level: Level,
) -> Result<Vec<Vec<f64>>, CliError> {
    let cache = encode_forward(params, &Mat::from_rows(rows), tower, level)?;
    Ok(cache.e.to_rows())
}

pub fn eval_retrieval(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    const STAGE: &str = "eval-retrieval";
    let root = work(cfg);
    let out_path = root.join("retrieval.json");
    if out_path.exists() && !force {
        log_event(STAGE, None, "skip", Some("results present"), None);
        return write_run_manifest(cfg);
    }
    let manifest_path = root.join("corpus.manifest");
    require(&manifest_path, "build-corpus")?;
    let features_path = root.join("features.json");
    require(&features_path, "build-corpus")?;
    let eval_texts_path = root.join("eval_texts.json");
    require(&eval_texts_path, "build-corpus")?;
    let ckpt_path = root.join("model.ckpt");
    require(&ckpt_path, "pretrain")?;
    let t0 = Instant::now();

    let manifest = read_manifest(&manifest_path)?;
    let table: FeatureTable = read_json(&features_path)?;
    let eval_texts: EvalTexts = read_json(&eval_texts_path)?;
    if eval_texts.panel.len() != table.panel_ids.len()
        || eval_texts.region.len() != table.region_ids.len()
    {
        return Err(CliError::Data(
            "eval_texts.json rows do not match features.json; rebuild the corpus".to_string(),
        ));
    }
    let state = load_checkpoint(&ckpt_path)?;
    let (_train_side, held_out) =
        build_eval_split(&manifest, cfg.eval.holdout_fraction, cfg.seeds.split)?;

    let panel_row: HashMap<&str, usize> =
        table.panel_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let region_row: HashMap<&str, usize> =
        table.region_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    // Held-out rows in manifest order; panels without feature rows (plots,
    // schematics) stay out of the gallery.
    let panel_rows: Vec<usize> = held_out
        .panels
        .iter()
        .filter_map(|p| panel_row.get(p.panel_id.as_str()).copied())
        .collect();
    let region_rows: Vec<usize> = held_out
        .regions
        .iter()
        .filter_map(|r| region_row.get(r.region_id.as_str()).copied())
        .collect();

    let gather = |rows: &[usize], source: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter().map(|&i| source[i].clone()).collect()
    };

    let mut results: Vec<RetrievalResult> = Vec::new();
    let panel_images = embed(
        &state.params,
        &gather(&panel_rows, &table.training.panel_images),
        Tower::Image,
        Level::P,
    )?;
    let panel_texts =
        embed(&state.params, &gather(&panel_rows, &eval_texts.panel), Tower::Text, Level::P)?;
    results.extend(cross_modal_results(&panel_images, &panel_texts, EvalLevel::Panel, &cfg.eval.ks)?);

    let region_images = embed(
        &state.params,
        &gather(&region_rows, &table.training.region_images),
        Tower::Image,
        Level::R,
    )?;
    let region_texts =
        embed(&state.params, &gather(&region_rows, &eval_texts.region), Tower::Text, Level::R)?;
    results.extend(cross_modal_results(
        &region_images,
        &region_texts,
        EvalLevel::Region,
        &cfg.eval.ks,
    )?);

    let table_text = format_results_table(&results);
    write_json_atomic(&out_path, &results)?;
    write_bytes_atomic(&root.join("retrieval.txt"), table_text.as_bytes())?;
    println!("{table_text}");
    log_event(
        STAGE,
        None,
        "done",
        Some(&format!("{} panels, {} regions held out", panel_rows.len(), region_rows.len())),
        Some(t0.elapsed().as_millis()),
    );
    write_run_manifest(cfg)
}

// ---------------------------------------------------------------------------
// Stage: report
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct AssociateSummary {
    pub ambiguous_fragments: usize,
    pub rerouted_fragments: usize,
    pub describe_failures: usize,
    pub orphans: usize,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct MineSummary {
    pub caption_boxes_in: usize,
    pub markers_in: usize,
    pub gated_out: usize,
    pub inflated_markers: usize,
    pub nms_suppressed: usize,
    pub dropped_textless: usize,
    pub caption_call_failures: usize,
    pub rejected_entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub figures: usize,
    pub panels: usize,
    pub regions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub associate: Option<AssociateSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mine: Option<MineSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cleanup: Option<CleanupStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<Vec<RetrievalResult>>,
}

fn read_sidecars<T: DeserializeOwned>(dir: &Path) -> Result<Vec<T>, CliError> {
    let mut names: Vec<PathBuf> = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
    for entry in entries {
        let entry =
            entry.map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "json") {
            names.push(path);
        }
    }
    names.sort();
    names.iter().map(|p| read_json(p)).collect()
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    const STAGE: &str = "report";
    let root = work(cfg);
    let manifest_path = root.join("corpus.manifest");
    require(&manifest_path, "build-corpus")?;
    let manifest = read_manifest(&manifest_path)?;

    let associate = if root.join("assoc").is_dir() {
        let mut sum = AssociateSummary::default();
        for sc in read_sidecars::<AssocSidecar>(&root.join("assoc"))? {
            sum.ambiguous_fragments += sc.stats.ambiguous_fragments;
            sum.rerouted_fragments += sc.stats.rerouted_fragments;
            sum.describe_failures += sc.stats.describe_failures;
            sum.orphans += sc.stats.orphans.len();
        }
        Some(sum)
    } else {
        None
    };

    let mine = if root.join("regions").is_dir() {
        let mut sum = MineSummary::default();
        for sc in read_sidecars::<RegionsSidecar>(&root.join("regions"))? {
            for stats in sc.stats.values() {
                sum.caption_boxes_in += stats.fuse.caption_boxes_in;
                sum.markers_in += stats.fuse.markers_in;
                sum.gated_out += stats.fuse.gated_out;
                sum.inflated_markers += stats.fuse.inflated_markers;
                sum.nms_suppressed += stats.fuse.nms_suppressed;
                sum.dropped_textless += stats.attach.dropped_textless;
                sum.caption_call_failures += stats.attach.caption_call_failures;
                sum.rejected_entries += stats.rejected_entries;
            }
        }
        Some(sum)
    } else {
        None
    };

    let cleanup_total = if root.join("clean").is_dir() {
        let mut total = CleanupStats::default();
        for sc in read_sidecars::<CleanSidecar>(&root.join("clean"))? {
            for stats in sc.stats.values() {
                total.accumulate(stats);
            }
        }
        Some(total)
    } else {
        None
    };

    let train: Option<TrainSummary> = {
        let path = root.join("train_summary.json");
        if path.exists() { Some(read_json(&path)?) } else { None }
    };
    let retrieval: Option<Vec<RetrievalResult>> = {
        let path = root.join("retrieval.json");
        if path.exists() { Some(read_json(&path)?) } else { None }
    };

    let run_report = RunReport {
        figures: manifest.figures.len(),
        panels: manifest.panels.len(),
        regions: manifest.regions.len(),
        associate,
        mine,
        cleanup: cleanup_total,
        train,
        retrieval,
    };
    write_json_atomic(&root.join("report.json"), &run_report)?;
    let text = render_report(&run_report);
    write_bytes_atomic(&root.join("report.txt"), text.as_bytes())?;
    println!("{text}");
    log_event(STAGE, None, "done", None, None);
    write_run_manifest(cfg)
}

fn render_report(r: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "corpus: {} figures, {} panels, {} regions\n",
        r.figures, r.panels, r.regions
    ));
    if let Some(a) = &r.associate {
        out.push_str(&format!(
            "text routing: {} ambiguous, {} rerouted, {} describe failures, {} orphans\n",
            a.ambiguous_fragments, a.rerouted_fragments, a.describe_failures, a.orphans
        ));
    }
    if let Some(m) = &r.mine {
        out.push_str(&format!(
            "mining: {} caption boxes, {} markers in; {} gated out, {} inflated, {} suppressed, {} dropped textless\n",
            m.caption_boxes_in, m.markers_in, m.gated_out, m.inflated_markers, m.nms_suppressed,
            m.dropped_textless
        ));
    }
    if let Some(c) = &r.cleanup {
        out.push_str(&format!(
            "cleanup: {} in, {} out ({} clipped away, {} degenerate, {} suppressed, {} merged)\n",
            c.input, c.output, c.clipped_away, c.degenerate, c.nms_suppressed, c.merged_away
        ));
    }
    if let Some(t) = &r.train {
        let losses: Vec<String> =
            t.final_loss.iter().map(|(level, loss)| format!("{level}={loss:.6}")).collect();
        out.push_str(&format!("training: {} steps, final losses {}\n", t.steps, losses.join(" ")));
    }
    if let Some(results) = &r.retrieval {
        out.push('\n');
        out.push_str(&format_results_table(results));
    }
    out
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Run every stage in order. Identical to invoking the stages one at a time:
/// each reads only files the previous one left on disk.
pub fn run_all(
    cfg: &RunConfig,
    force: bool,
    keep_raw: bool,
    synthetic: Option<&Path>,
) -> Result<(), CliError> {
    if let Some(spec) = synthetic {
        build_corpus(cfg, force, Some(spec))?;
    } else {
        parse_panels(cfg, force, keep_raw)?;
        associate_text(cfg, force)?;
        mine_regions(cfg, force)?;
        postprocess_boxes(cfg, force)?;
        build_corpus(cfg, force, None)?;
    }
    pretrain(cfg, force)?;
    eval_retrieval(cfg, force)?;
    report(cfg)
}
