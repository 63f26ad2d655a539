//! Cross-modal retrieval evaluation.
//!
//! Scores a trained encoder by ranking a gallery against each query under
//! cosine similarity and reporting recall at fixed cutoffs, in both
//! directions (image-to-text and text-to-image) and at both evaluation
//! granularities (panel and region). Ground truth is one-to-one: each query
//! has exactly one matching gallery index.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, PanelRecord, RegionRecord};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("retrieval needs at least one query and one gallery item")]
    Empty,
    #[error("query and truth lists differ in length: {queries} vs {truths}")]
    TruthLengthMismatch { queries: usize, truths: usize },
    #[error("truth index {index} out of range for gallery of {len}")]
    TruthOutOfRange { index: usize, len: usize },
    #[error("embedding widths differ: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },
    #[error("holdout fraction must be strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("holdout fraction {fraction} leaves an empty {side} side ({n} figures total)")]
    EmptySide { fraction: f64, side: &'static str, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    I2T,
    T2I,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::I2T => "I2T",
            Direction::T2I => "T2I",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalLevel {
    Panel,
    Region,
}

impl std::fmt::Display for EvalLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalLevel::Panel => "panel",
            EvalLevel::Region => "region",
        })
    }
}

/// Recall percentages at the requested cutoffs for one direction and level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    pub level: EvalLevel,
    /// Cutoff -> recall percentage, rounded to two decimals.
    pub r_at: BTreeMap<usize, f64>,
    /// Gallery size.
    pub n: usize,
    /// True when some requested cutoff exceeded the gallery and was clamped.
    pub clamped: bool,
}

impl RetrievalResult {
    /// Recall must grow with the cutoff and stay within [0, 100].
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut prev = 0.0;
        for (k, v) in &self.r_at {
            if *v < prev - 1e-9 {
                return Err(format!("recall@{k} = {v} dropped below a smaller cutoff's {prev}"));
            }
            if !(0.0..=100.0).contains(v) {
                return Err(format!("recall@{k} = {v} outside [0, 100]"));
            }
            prev = *v;
        }
        if self.n == 0 {
            return Err("gallery size must be at least 1".to_string());
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        // A zero vector carries no direction; score it as orthogonal.
        return 0.0;
    }
    dot / (na * nb)
}

/// 1-based rank of each query's ground-truth gallery item under cosine
/// similarity. Exact score ties resolve in favor of the smaller gallery
/// index, so the truth item loses ties only to lower-indexed rivals.
pub fn retrieval_ranks(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    truth: &[usize],
) -> Result<Vec<usize>, EvalError> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(EvalError::Empty);
    }
    if queries.len() != truth.len() {
        return Err(EvalError::TruthLengthMismatch { queries: queries.len(), truths: truth.len() });
    }
    let width = gallery[0].len();
    for row in queries.iter().chain(gallery.iter()) {
        if row.len() != width {
            return Err(EvalError::WidthMismatch { left: width, right: row.len() });
        }
    }
    for &t in truth {
        if t >= gallery.len() {
            return Err(EvalError::TruthOutOfRange { index: t, len: gallery.len() });
        }
    }
    // Parallel over queries; collect preserves order, so the merge is
    // deterministic.
    let ranks: Vec<usize> = queries
        .par_iter()
        .zip(truth.par_iter())
        .map(|(query, &t)| {
            let target = cosine(query, &gallery[t]);
            let mut rank = 1usize;
            for (j, item) in gallery.iter().enumerate() {
                if j == t {
                    continue;
                }
                let score = cosine(query, item);
                if score > target || (score == target && j < t) {
                    rank += 1;
                }
            }
            rank
        })
        .collect();
    Ok(ranks)
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Recall@k for each requested cutoff, as percentages rounded to two
/// decimals. Cutoffs beyond the gallery size clamp to it (flagged).
pub fn recall_at_k(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    truth: &[usize],
    ks: &[usize],
    direction: Direction,
    level: EvalLevel,
) -> Result<RetrievalResult, EvalError> {
    let ranks = retrieval_ranks(queries, gallery, truth)?;
    let n = gallery.len();
    let mut r_at = BTreeMap::new();
    let mut clamped = false;
    for &k in ks {
        let effective = if k > n {
            clamped = true;
            n
        } else {
            k
        };
        let hits = ranks.iter().filter(|&&r| r <= effective).count();
        r_at.insert(k, round2(hits as f64 / ranks.len() as f64 * 100.0));
    }
    Ok(RetrievalResult { direction, level, r_at, n, clamped })
}

/// Both retrieval directions for one level of index-paired embeddings.
pub fn cross_modal_results(
    image_embeddings: &[Vec<f64>],
    text_embeddings: &[Vec<f64>],
    level: EvalLevel,
    ks: &[usize],
) -> Result<Vec<RetrievalResult>, EvalError> {
    if image_embeddings.len() != text_embeddings.len() {
        return Err(EvalError::TruthLengthMismatch {
            queries: image_embeddings.len(),
            truths: text_embeddings.len(),
        });
    }
    let truth: Vec<usize> = (0..image_embeddings.len()).collect();
    Ok(vec![
        recall_at_k(image_embeddings, text_embeddings, &truth, ks, Direction::I2T, level)?,
        recall_at_k(text_embeddings, image_embeddings, &truth, ks, Direction::T2I, level)?,
    ])
}

// ---------------------------------------------------------------------------
// Evaluation split
// ---------------------------------------------------------------------------

/// Split a corpus at figure granularity: a held-out figure takes all of its
/// panels and regions with it, so no image or text leaks across the split at
/// any level. Deterministic under the seed.
pub fn build_eval_split(
    manifest: &CorpusManifest,
    fraction: f64,
    seed: u64,
) -> Result<(CorpusManifest, CorpusManifest), EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::BadFraction(fraction));
    }
    let n = manifest.figures.len();
    let n_eval = (n as f64 * fraction).round() as usize;
    if n_eval == 0 {
        return Err(EvalError::EmptySide { fraction, side: "evaluation", n });
    }
    if n_eval >= n {
        return Err(EvalError::EmptySide { fraction, side: "training", n });
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, n, n_eval);
    let eval_figures: BTreeSet<&str> =
        picks.iter().map(|i| manifest.figures[i].figure_id.as_str()).collect();
    let eval_panels: BTreeSet<&str> = manifest
        .panels
        .iter()
        .filter(|p| eval_figures.contains(p.parent_figure.as_str()))
        .map(|p| p.panel_id.as_str())
        .collect();

    let split_figures = |held_out: bool| {
        manifest
            .figures
            .iter()
            .filter(|f| eval_figures.contains(f.figure_id.as_str()) == held_out)
            .cloned()
            .collect::<Vec<_>>()
    };
    let split_panels = |held_out: bool| {
        manifest
            .panels
            .iter()
            .filter(|p| eval_figures.contains(p.parent_figure.as_str()) == held_out)
            .cloned()
            .collect::<Vec<_>>()
    };
    let split_regions = |held_out: bool| {
        manifest
            .regions
            .iter()
            .filter(|r| eval_panels.contains(r.parent_panel.as_str()) == held_out)
            .cloned()
            .collect::<Vec<_>>()
    };
    let train =
        CorpusManifest::new(split_figures(false), split_panels(false), split_regions(false));
    let eval = CorpusManifest::new(split_figures(true), split_panels(true), split_regions(true));
    Ok((train, eval))
}

// ---------------------------------------------------------------------------
// Evaluation text protocol
// ---------------------------------------------------------------------------

/// Panel-side retrieval text: the assigned caption fragments joined, without
/// the generated description (protocol choice: the short context is what the
/// source caption says about the panel).
pub fn panel_eval_text(panel: &PanelRecord) -> String {
    panel.fragments.join(" ")
}

/// Region-side retrieval text: the model-written caption when present,
/// otherwise the grounded subcaption.
pub fn region_eval_text(region: &RegionRecord) -> Option<String> {
    region
        .lvlm_caption
        .clone()
        .or_else(|| region.grounded_subcaption.clone())
}

/// Aligned-column text table over result rows, one line per (level,
/// direction) pair.
pub fn format_results_table(results: &[RetrievalResult]) -> String {
    let mut ks: BTreeSet<usize> = BTreeSet::new();
    for r in results {
        ks.extend(r.r_at.keys().copied());
    }
    let mut header = format!("{:<8} {:<5} {:>6}", "level", "dir", "N");
    for k in &ks {
        header.push_str(&format!(" {:>8}", format!("R@{k}")));
    }
    let mut out = header;
    out.push('\n');
    for r in results {
        let mut line = format!("{:<8} {:<5} {:>6}", r.level.to_string(), r.direction.to_string(), r.n);
        for k in &ks {
            match r.r_at.get(k) {
                Some(v) => line.push_str(&format!(" {:>8.2}", v)),
                None => line.push_str(&format!(" {:>8}", "-")),
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FigureRecord, Provenance};
    use crate::geometry::BBox;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / norm).collect()
            })
            .collect()
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = unit_rows(&mut rng, 12, 6);
        let truth: Vec<usize> = (0..12).collect();
        let result = recall_at_k(&rows, &rows, &truth, &[1, 5, 10], Direction::I2T, EvalLevel::Panel)
            .expect("recall");
        assert_eq!(result.r_at[&1], 100.0, "every distinct vector retrieves itself first");
        assert_eq!(result.r_at[&10], 100.0);
        assert!(!result.clamped);
        result.check_invariants().expect("invariants");
    }

    #[test]
    fn orthonormal_queries_survive_gallery_shuffle() {
        let d = 8;
        let queries: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut row = vec![0.0; d];
                row[i] = 1.0;
                row
            })
            .collect();
        let perm = [5usize, 2, 7, 0, 4, 6, 1, 3];
        let gallery: Vec<Vec<f64>> = perm.iter().map(|&i| queries[i].clone()).collect();
        // truth[q] = position of q's vector in the shuffled gallery.
        let truth: Vec<usize> =
            (0..d).map(|q| perm.iter().position(|&p| p == q).expect("present")).collect();
        let result =
            recall_at_k(&queries, &gallery, &truth, &[1], Direction::T2I, EvalLevel::Panel)
                .expect("recall");
        assert_eq!(result.r_at[&1], 100.0, "unique maxima are shuffle-invariant");
    }

    #[test]
    fn exact_ties_resolve_toward_lower_gallery_index() {
        let v = vec![1.0, 0.0];
        let w = vec![0.0, 1.0];
        // Gallery holds the same vector at indices 0 and 1; truth is index 1,
        // so the tie at index 0 outranks it.
        let gallery = vec![v.clone(), v.clone(), w];
        let ranks = retrieval_ranks(&[v], &gallery, &[1]).expect("ranks");
        assert_eq!(ranks, vec![2], "equal score at a lower index wins the tie");
    }

    #[test]
    fn matches_independent_sort_based_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200;
        let queries = unit_rows(&mut rng, n, 5);
        let gallery = unit_rows(&mut rng, n, 5);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let ranks = retrieval_ranks(&queries, &gallery, &truth).expect("ranks");
        for (q, (&t, &got)) in truth.iter().zip(&ranks).enumerate() {
            // Reference: full stable sort by (score desc, index asc).
            let mut scored: Vec<(usize, f64)> = gallery
                .iter()
                .enumerate()
                .map(|(j, item)| (j, cosine(&queries[q], item)))
                .collect();
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0))
            });
            let want = scored.iter().position(|(j, _)| *j == t).expect("present") + 1;
            assert_eq!(got, want, "query {q}: counting rank differs from sorted rank");
        }
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let queries = unit_rows(&mut rng, 60, 4);
        let gallery = unit_rows(&mut rng, 60, 4);
        let truth: Vec<usize> = (0..60).collect();
        let result = recall_at_k(
            &queries,
            &gallery,
            &truth,
            &[1, 5, 10, 60],
            Direction::I2T,
            EvalLevel::Region,
        )
        .expect("recall");
        result.check_invariants().expect("monotone");
        assert_eq!(result.r_at[&60], 100.0, "recall at the full gallery is total");
    }

    #[test]
    fn oversized_cutoff_clamps_with_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = unit_rows(&mut rng, 3, 4);
        let truth = vec![0, 1, 2];
        let result = recall_at_k(&rows, &rows, &truth, &[1, 10], Direction::I2T, EvalLevel::Panel)
            .expect("recall");
        assert!(result.clamped, "k = 10 exceeds a gallery of 3");
        assert_eq!(result.r_at[&10], 100.0);
    }

    #[test]
    fn percentages_round_to_two_decimals() {
        // One hit out of three queries: 33.333... -> 33.33.
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let queries = vec![e1.clone(), e1.clone(), e1.clone()];
        let gallery = vec![e1, e2];
        // Only the first query's truth is the top-ranked item.
        let truth = vec![0, 1, 1];
        let result = recall_at_k(&queries, &gallery, &truth, &[1], Direction::I2T, EvalLevel::Panel)
            .expect("recall");
        assert_eq!(result.r_at[&1], 33.33);
    }

    #[test]
    fn rejects_bad_inputs() {
        let rows = vec![vec![1.0, 0.0]];
        assert!(matches!(
            retrieval_ranks(&[], &rows, &[]),
            Err(EvalError::Empty)
        ));
        assert!(matches!(
            retrieval_ranks(&rows, &rows, &[0, 1]),
            Err(EvalError::TruthLengthMismatch { .. })
        ));
        assert!(matches!(
            retrieval_ranks(&rows, &rows, &[5]),
            Err(EvalError::TruthOutOfRange { .. })
        ));
        let wide = vec![vec![1.0, 0.0, 0.0]];
        assert!(matches!(
            retrieval_ranks(&wide, &rows, &[0]),
            Err(EvalError::WidthMismatch { .. })
        ));
    }

    // -- split ---------------------------------------------------------------

    fn tiny_manifest(n_figures: usize) -> CorpusManifest {
        let mut figures = Vec::new();
        let mut panels = Vec::new();
        let mut regions = Vec::new();
        for f in 0..n_figures {
            let figure_id = format!("fig{f:03}");
            figures.push(FigureRecord {
                figure_id: figure_id.clone(),
                image_path: format!("images/{figure_id}.png"),
                caption: format!("Caption for figure {f}. Arrows indicate findings."),
                article_title: None,
                width_px: 400,
                height_px: 300,
                license_tag: "CC-BY".to_string(),
            });
            for p in 0..2 {
                let panel_id = format!("{figure_id}/p{p}");
                panels.push(PanelRecord {
                    panel_id: panel_id.clone(),
                    parent_figure: figure_id.clone(),
                    identifier: Some(((b'A' + p as u8) as char).to_string()),
                    bbox: BBox::pixel(
                        p as f64 * 200.0,
                        0.0,
                        p as f64 * 200.0 + 200.0,
                        300.0,
                    )
                    .expect("box"),
                    fragments: vec![format!("Panel {p} of figure {f}.")],
                    generated_description: None,
                    is_photographic: true,
                });
                regions.push(RegionRecord {
                    region_id: format!("{panel_id}/r0"),
                    parent_panel: panel_id,
                    bbox: BBox::pixel(10.0, 10.0, 60.0, 60.0).expect("box"),
                    provenance: Provenance::Caption,
                    grounded_subcaption: Some("a marked region".to_string()),
                    lvlm_caption: None,
                });
            }
        }
        CorpusManifest::new(figures, panels, regions)
    }

    #[test]
    fn split_halves_twenty_figures_with_consistent_children() {
        let manifest = tiny_manifest(20);
        let (train, eval) = build_eval_split(&manifest, 0.5, 3).expect("split");
        assert_eq!(train.figures.len(), 10);
        assert_eq!(eval.figures.len(), 10);
        assert_eq!(train.panels.len(), 20, "two panels per training figure");
        assert_eq!(eval.panels.len(), 20);
        assert_eq!(train.regions.len(), 20);
        assert_eq!(eval.regions.len(), 20);
    }

    #[test]
    fn split_is_deterministic_and_leak_free() {
        let manifest = tiny_manifest(13);
        let (train1, eval1) = build_eval_split(&manifest, 0.3, 42).expect("split");
        let (train2, eval2) = build_eval_split(&manifest, 0.3, 42).expect("split");
        let ids = |m: &CorpusManifest| {
            m.figures.iter().map(|f| f.figure_id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&train1), ids(&train2), "same seed, same split");
        assert_eq!(ids(&eval1), ids(&eval2));

        let train_panels: BTreeSet<_> = train1.panels.iter().map(|p| &p.panel_id).collect();
        let eval_panels: BTreeSet<_> = eval1.panels.iter().map(|p| &p.panel_id).collect();
        assert!(
            train_panels.is_disjoint(&eval_panels),
            "no panel may appear on both sides"
        );
        let (other_train, other_eval) = build_eval_split(&manifest, 0.3, 43).expect("split");
        let _ = (other_train, other_eval);
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let manifest = tiny_manifest(4);
        assert!(matches!(build_eval_split(&manifest, 0.0, 1), Err(EvalError::BadFraction(_))));
        assert!(matches!(build_eval_split(&manifest, 1.0, 1), Err(EvalError::BadFraction(_))));
        assert!(matches!(
            build_eval_split(&manifest, 0.01, 1),
            Err(EvalError::EmptySide { side: "evaluation", .. })
        ));
        assert!(matches!(
            build_eval_split(&manifest, 0.99, 1),
            Err(EvalError::EmptySide { side: "training", .. })
        ));
    }

    #[test]
    fn eval_texts_follow_the_protocol() {
        let manifest = tiny_manifest(1);
        let panel = &manifest.panels[0];
        assert_eq!(panel_eval_text(panel), "Panel 0 of figure 0.");
        let region = &manifest.regions[0];
        assert_eq!(region_eval_text(region).as_deref(), Some("a marked region"));
        let mut with_caption = region.clone();
        with_caption.lvlm_caption = Some("necrotic area".to_string());
        assert_eq!(
            region_eval_text(&with_caption).as_deref(),
            Some("necrotic area"),
            "model caption takes precedence over the subcaption"
        );
    }

    #[test]
    fn table_renders_all_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let images = unit_rows(&mut rng, 10, 4);
        let texts = unit_rows(&mut rng, 10, 4);
        let results =
            cross_modal_results(&images, &texts, EvalLevel::Panel, &[1, 5, 10]).expect("results");
        assert_eq!(results.len(), 2, "one row per direction");
        let table = format_results_table(&results);
        assert!(table.contains("I2T") && table.contains("T2I"), "both directions listed");
        assert!(table.contains("R@1") && table.contains("R@10"));
        assert_eq!(table.lines().count(), 3, "header plus two rows");
    }
}
