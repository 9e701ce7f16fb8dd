//! End-to-end run on the mock backend: caption → detect → annotate →
//! features → train → decode → CHAIR.

use crate::config::PipelineConfig;
use crate::{write_json, write_jsonl};
use anyhow::{anyhow, Context};
use halu_core::annotate::{annotate_corpus, AnnotationSummary, CaptionRecord, Lexicon, LexiconExtractor, ObjectExtractor};
use halu_core::chair::{evaluate_chair, ChairCaption, ChairResult, GroundTruth, SynonymMap};
use halu_core::classifier::{build_features, train, EvalReport};
use halu_core::decoder::{sentence_level_decode, DecodeConfig, DecodeRun};
use halu_core::fusion::{DetectionScoreRecord, FusionModel};
use halu_core::mock::{generate_scenes, MockLvlm, SceneGenerator, SceneSpec};
use halu_core::protocol::{hidden_state_pairs, LvlmBackend, SequenceContext};
use halu_core::text::{Token, TokenId, TokenLabel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// A failure inside one named stage.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {source:#}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: anyhow::Error,
}

trait InStage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> InStage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError { stage, source: e.into() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChairRow {
    pub label: String,
    pub threshold: Option<f64>,
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub length: f64,
    /// INACCURATE share of kept tokens, judged against the scene truth.
    pub token_hallucination_rate: f64,
    pub kept_tokens: usize,
}

impl ChairRow {
    fn new(label: String, threshold: Option<f64>, r: &ChairResult, bad: usize, kept: usize) -> Self {
        Self {
            label,
            threshold,
            chair_s: r.chair_s,
            chair_i: r.chair_i,
            recall: r.recall,
            length: r.length,
            token_hallucination_rate: if kept == 0 { 0.0 } else { bad as f64 / kept as f64 },
            kept_tokens: kept,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub annotation: AnnotationSummary,
    pub classifier_test: EvalReport,
    pub rows: Vec<ChairRow>,
}

#[derive(Serialize)]
struct SceneSplit<'a> {
    train: &'a [SceneSpec],
    eval: &'a [SceneSpec],
}

#[derive(Serialize)]
struct FilteredCaption<'a> {
    caption_id: &'a str,
    image_id: &'a str,
    threshold: f64,
    text: String,
}

/// Runs every stage, writing outputs into `dir` and listing them in
/// `files` as they appear, so a failed run keeps its partial outputs.
pub fn run_pipeline(cfg: &PipelineConfig, dir: &Path, files: &mut Vec<PathBuf>) -> Result<PipelineSummary, StageError> {
    let cfg = cfg.clone().with_derived_seeds();
    let seeds = cfg.seeds();
    let mut out = |name: &str| -> PathBuf {
        let p = dir.join(name);
        files.push(p.clone());
        p
    };

    // Scenes.
    let gen = SceneGenerator {
        count: cfg.scenes.count,
        seed: seeds["scenes"],
        min_objects: cfg.scenes.min_objects,
        max_objects: cfg.scenes.max_objects,
        id_prefix: "scene".into(),
    };
    let scenes = generate_scenes(&gen, &cfg.mock.objects).stage("scenes")?;
    let n_eval = ((scenes.len() as f64 * cfg.scenes.eval_fraction).round() as usize).max(1);
    if scenes.len() <= n_eval {
        return Err(StageError {
            stage: "scenes",
            source: anyhow!("{} scenes leave nothing to train on", scenes.len()),
        });
    }
    let (train_scenes, eval_scenes) = scenes.split_at(scenes.len() - n_eval);
    let mock = MockLvlm::new(scenes.clone(), cfg.mock.clone()).stage("scenes")?;
    write_json(&out("scenes.json"), &SceneSplit { train: train_scenes, eval: eval_scenes }).stage("scenes")?;
    let info = mock.model_info().stage("scenes")?;

    // Captions.
    let mut captions = Vec::with_capacity(train_scenes.len());
    for s in train_scenes {
        let c = mock.greedy_caption(&s.scene_id).stage("caption")?;
        captions.push(CaptionRecord {
            caption_id: s.scene_id.clone(),
            image_id: Some(s.scene_id.clone()),
            text: c.text,
            tokens: Some(c.tokens.iter().map(|&t| Token::new(t, info.token_text(t))).collect()),
        });
    }
    write_jsonl(&out("captions.jsonl"), &captions).stage("caption")?;

    // Detector scores for every extracted object.
    let lexicon = Lexicon::from_lemmas(cfg.mock.objects.iter(), &Lexicon::shipped());
    let extractor = LexiconExtractor::new(lexicon.clone());
    let mut detections: Vec<DetectionScoreRecord> = Vec::new();
    for c in &captions {
        let found = extractor.extract(&c.text).map_err(|e| anyhow!("{e}")).stage("detect")?;
        let objects: BTreeSet<String> = found.into_iter().map(|o| o.object).collect();
        for o in objects {
            detections.push(mock.detector_record(&c.caption_id, &c.caption_id, &o).stage("detect")?);
        }
    }
    write_jsonl(&out("detections.jsonl"), &detections).stage("detect")?;

    // Annotation.
    let corpus = annotate_corpus(
        &captions,
        &extractor,
        &Lexicon::shipped(),
        &FusionModel::PUBLISHED,
        &detections,
        cfg.annotate.threshold,
    )
    .stage("annotate")?;
    write_jsonl(&out("annotations.jsonl"), &corpus.captions).stage("annotate")?;
    write_json(&out("annotation_summary.json"), &corpus.summary).stage("annotate")?;

    // Features.
    let mut pairs = Vec::new();
    let mut labels: Vec<TokenLabel> = Vec::new();
    for a in &corpus.captions {
        let ids: Vec<TokenId> = a.tokens.iter().map(|t| t.id).collect();
        let ctx = SequenceContext::caption(a.caption_id.as_str(), Vec::new());
        pairs.extend(hidden_state_pairs(&mock, &ctx, &ids).stage("features")?);
        labels.extend(&a.labels);
    }
    let dataset = build_features(&pairs, &labels, cfg.classifier.mode).stage("features")?;
    let f = out("features.hsd1");
    let w = std::io::BufWriter::new(std::fs::File::create(&f).stage("features")?);
    dataset.write_hsd1(w).stage("features")?;

    // Classifier.
    let (ensemble, report) = train(&dataset, cfg.classifier.mode, &cfg.classifier.train).stage("train")?;
    write_json(&out("classifier.json"), &ensemble.to_file()).stage("train")?;
    write_json(&out("train_report.json"), &report).stage("train")?;

    // Decoding: one transcript per scene, filtered at every threshold.
    let dcfg = DecodeConfig {
        k: cfg.decode.k,
        threshold: cfg.decode.thresholds[0],
        break_on_selected_eos: cfg.decode.break_on_selected_eos,
        ..DecodeConfig::default()
    };
    let mut runs: Vec<DecodeRun> = Vec::with_capacity(eval_scenes.len());
    for s in eval_scenes {
        runs.push(sentence_level_decode(&mock, &ensemble, &s.scene_id, &dcfg).stage("decode")?);
    }
    write_jsonl(&out("decode_runs.jsonl"), &runs).stage("decode")?;

    // CHAIR.
    let gt: GroundTruth = eval_scenes
        .iter()
        .map(|s| (s.scene_id.clone(), s.true_objects.clone()))
        .collect();
    let syn = SynonymMap::default().with_identity(cfg.mock.objects.iter());
    let mentions = |text: &str| -> anyhow::Result<Vec<String>> {
        Ok(extractor
            .extract(text)
            .map_err(|e| anyhow!("{e}"))?
            .into_iter()
            .map(|o| o.object)
            .collect())
    };
    let mut rows = Vec::new();
    let mut greedy_caps = Vec::new();
    let (mut bad, mut kept) = (0usize, 0usize);
    for s in eval_scenes {
        let g = mock.greedy_caption(&s.scene_id).stage("chair")?;
        bad += g.truth.labels.iter().filter(|l| !l.is_accurate()).count();
        kept += g.tokens.len();
        greedy_caps.push(ChairCaption {
            caption_id: s.scene_id.clone(),
            image_id: s.scene_id.clone(),
            mentions: mentions(&g.text).stage("chair")?,
            text: g.text,
        });
    }
    let greedy = evaluate_chair(&greedy_caps, &gt, &syn);
    rows.push(ChairRow::new("greedy".into(), None, &greedy, bad, kept));
    let mut reports = vec![("greedy".to_string(), greedy)];
    for &t in &cfg.decode.thresholds {
        let (mut bad, mut kept) = (0usize, 0usize);
        let mut caps = Vec::with_capacity(runs.len());
        let mut filtered = Vec::with_capacity(runs.len());
        for run in &runs {
            let truth = mock.export_ground_truth(&run.image_ref, &run.tokens()).stage("chair")?;
            let mut offset = 0;
            for (i, toks) in run.sent_tokens.iter().enumerate() {
                if run.accu[i] >= t {
                    bad += truth.labels[offset..offset + toks.len()].iter().filter(|l| !l.is_accurate()).count();
                    kept += toks.len();
                }
                offset += toks.len();
            }
            let text = run.caption_at(t);
            caps.push(ChairCaption {
                caption_id: run.image_ref.clone(),
                image_id: run.image_ref.clone(),
                mentions: mentions(&text).stage("chair")?,
                text: text.clone(),
            });
            filtered.push(FilteredCaption {
                caption_id: &run.image_ref,
                image_id: &run.image_ref,
                threshold: t,
                text,
            });
        }
        write_jsonl(&out(&format!("captions_t{t:.2}.jsonl")), &filtered).stage("chair")?;
        let r = evaluate_chair(&caps, &gt, &syn);
        rows.push(ChairRow::new(format!("t={t:.2}"), Some(t), &r, bad, kept));
        reports.push((format!("t={t:.2}"), r));
    }
    write_json(&out("chair.json"), &reports).context("writing CHAIR report").stage("chair")?;

    let summary = PipelineSummary {
        train_scenes: train_scenes.len(),
        eval_scenes: eval_scenes.len(),
        annotation: corpus.summary,
        classifier_test: report.test,
        rows,
    };
    write_json(&out("summary.json"), &summary).stage("summary")?;
    Ok(summary)
}
