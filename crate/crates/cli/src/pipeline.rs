//! One function per subcommand.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use scenic::curation::{self, decode_rgb, scan_directory, Status};
use scenic::evaluation::{ablation_labels, ablation_table, compute_metrics, AblationRow, MetricsReport};
use scenic::io::{read_csv, write_csv, write_json, write_jsonl, write_text};
use scenic::model::{ModelBundle, Stage};
use scenic::ratings::{self, LabeledImage, RatingRecord, Role, SplitManifest};
use scenic::retrieval::{ConvExtractor, FeatureExtractor, FeatureTable, FeatureVector, IndexEntry, ReferenceIndex};
use scenic::rng::stream;
use scenic::scoring::{self, ablation_scores, Combine, RankedRow, ScoreRecord, Scorer};
use scenic::training::{holdout, train_stage, TrainData, TrainSample};
use scenic::Dimension;

use crate::artifacts::{require, write_run_manifest, Layout};
use crate::config::{PipelineConfig, ReferenceSet};

pub struct Ctx<'a> {
    pub cfg: &'a PipelineConfig,
    pub layout: Layout,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a PipelineConfig) -> Self {
        Self {
            cfg,
            layout: Layout::new(&cfg.paths.work),
        }
    }

    fn corpus(&self) -> &Path {
        &self.cfg.paths.corpus
    }

    fn image_path(&self, id: &str) -> PathBuf {
        self.corpus().join(id)
    }

    fn labels(&self) -> Result<BTreeMap<String, LabeledImage>> {
        let path = self.layout.labels();
        require(&path, "clean")?;
        Ok(ratings::read_labels(&path)?
            .into_iter()
            .map(|l| (l.image_id.clone(), l))
            .collect())
    }

    fn splits(&self, dim: Dimension) -> Result<SplitManifest> {
        let path = self.layout.split(dim);
        require(&path, format!("split --dimension {dim}"))?;
        Ok(SplitManifest::read(&path)?)
    }

    fn index(&self, dim: Dimension, set: ReferenceSet) -> Result<ReferenceIndex> {
        let path = self.layout.index(dim, set);
        require(&path, format!("index --dimension {dim}"))?;
        Ok(ReferenceIndex::load(&path)?)
    }

    fn final_model(&self, dim: Dimension) -> Result<ModelBundle> {
        let dir = self.layout.checkpoint(dim, Stage::Emotion);
        require(&dir.join("manifest.json"), format!("train --stage 3 --dimension {dim}"))?;
        let model = ModelBundle::load(&dir)?;
        if model.dimension != dim {
            bail!("{} holds a {} model", dir.display(), model.dimension);
        }
        Ok(model)
    }

    fn extractor(&self) -> Result<Box<dyn FeatureExtractor>> {
        let r = &self.cfg.retrieval;
        Ok(match &r.features {
            Some(path) => Box::new(
                FeatureTable::load(path).with_context(|| format!("loading features from {}", path.display()))?,
            ),
            None => Box::new(ConvExtractor::new(&r.backbone, r.geometry.clone(), self.cfg.seed)?),
        })
    }

    fn manifest(&self, subcommand: &str, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
        let path = write_run_manifest(subcommand, self.cfg, inputs, outputs)?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

pub fn curate(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus();
    if !corpus.is_dir() {
        bail!("corpus directory {} does not exist (set paths.corpus or pass --corpus)", corpus.display());
    }
    let mut rng = stream(ctx.cfg.seed, "curation");
    let entries = curation::curate_directory(corpus, &ctx.cfg.curation, &mut rng)?;
    let out = ctx.layout.curation_manifest();
    curation::write_manifest(&out, &entries)?;
    let kept = entries.iter().filter(|e| e.status == Status::Kept).count();
    info!("curation: {kept} kept, {} dropped", entries.len() - kept);
    ctx.manifest("curate", &[corpus], &[&out])
}

pub fn ingest(ctx: &Ctx) -> Result<()> {
    let Some(src) = &ctx.cfg.paths.ratings else {
        bail!("no rating table given (set paths.ratings or pass --ratings)");
    };
    let report = ratings::ingest_ratings(src)?;
    let (out, rej) = (ctx.layout.ratings(), ctx.layout.rejects());
    write_csv(&out, &report.records)?;
    write_csv(&rej, &report.rejects)?;
    info!("ingest: {} ratings accepted, {} rows rejected", report.records.len(), report.rejects.len());
    ctx.manifest("ingest", &[src], &[&out, &rej])
}

pub fn clean(ctx: &Ctx) -> Result<()> {
    let src = ctx.layout.ratings();
    require(&src, "ingest")?;
    let records: Vec<RatingRecord> = read_csv(&src)?;
    let result = ratings::clean_ratings(&records, &ctx.cfg.cleaning)?;
    let (labels, clean) = (ctx.layout.labels(), ctx.layout.clean());
    ratings::write_labels(&labels, &result.labels)?;
    write_csv(&clean, &result.clean)?;
    info!("clean: {} labelled images", result.labels.len());
    ctx.manifest("clean", &[&src], &[&labels, &clean])
}

pub fn stats(ctx: &Ctx) -> Result<()> {
    let src = match &ctx.cfg.paths.scores {
        Some(p) => p.clone(),
        None => {
            let p = ctx.layout.labels();
            require(&p, "clean")?;
            p
        }
    };
    let labels = ratings::read_labels(&src)?;
    let report = ratings::score_statistics(&labels)?;
    let (json, txt) = (ctx.layout.stats("json"), ctx.layout.stats("txt"));
    write_json(&json, &report)?;
    let text = report.render();
    write_text(&txt, &text)?;
    print!("{text}");
    let rpath = ctx.layout.ratings();
    let mut inputs: Vec<&Path> = vec![&src];
    let mut outputs: Vec<PathBuf> = vec![json, txt];
    if let Some(profiles) = &ctx.cfg.paths.profiles {
        require(&rpath, "ingest")?;
        let records: Vec<RatingRecord> = read_csv(&rpath)?;
        let (names, profs) = ratings::read_profiles(profiles)?;
        let attr = ratings::rater_attribute_breakdown(&records, &names, &profs);
        let (aj, at) = (ctx.layout.attributes("json"), ctx.layout.attributes("txt"));
        write_json(&aj, &attr)?;
        write_text(&at, &attr.render())?;
        outputs.extend([aj, at]);
        inputs.push(profiles);
        inputs.push(&rpath);
    }
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ctx.manifest("stats", &inputs, &outs)
}

pub fn split(ctx: &Ctx) -> Result<()> {
    let dim = ctx.cfg.scoring.dimension;
    let mpath = ctx.layout.curation_manifest();
    require(&mpath, "curate")?;
    let kept: BTreeSet<String> = curation::read_manifest(&mpath)?
        .into_iter()
        .filter(|e| e.status == Status::Kept)
        .map(|e| e.id)
        .collect();
    let all = ctx.labels()?;
    let labels: Vec<LabeledImage> = all.values().filter(|l| kept.contains(&l.image_id)).cloned().collect();
    if labels.len() < all.len() {
        info!("split: {} labelled images are not in the curated corpus", all.len() - labels.len());
    }
    let mut rng = stream(ctx.cfg.seed, &format!("split/{dim}"));
    let manifest = ratings::make_splits(&labels, &ctx.cfg.split.params(dim), &mut rng)?;
    let out = ctx.layout.split(dim);
    manifest.write(&out)?;
    for role in [Role::RefTrain, Role::RefTest, Role::InputTrain, Role::InputTest] {
        info!("split {dim}: {role:?} {}", manifest.count(role));
    }
    ctx.manifest("split", &[&mpath, &ctx.layout.labels()], &[&out])
}

/// Features of each id, decoded from the corpus in parallel. Order follows `ids`.
fn features_for(ctx: &Ctx, ids: &[String], extractor: &dyn FeatureExtractor) -> Result<Vec<FeatureVector>> {
    ids.par_iter()
        .map(|id| {
            let img = decode_rgb(&ctx.image_path(id))?;
            Ok(extractor.features(id, &img)?)
        })
        .collect()
}

pub fn index(ctx: &Ctx) -> Result<()> {
    let dim = ctx.cfg.scoring.dimension;
    let splits = ctx.splits(dim)?;
    let labels = ctx.labels()?;
    let extractor = ctx.extractor()?;
    let refs: Vec<String> = splits
        .entries
        .iter()
        .filter(|e| e.role.is_reference())
        .map(|e| e.image_id.clone())
        .collect();
    let feats = features_for(ctx, &refs, extractor.as_ref())?;
    let entries = refs
        .iter()
        .zip(feats)
        .map(|(id, features)| {
            let label = labels.get(id).with_context(|| format!("reference {id} has no label"))?;
            Ok(IndexEntry {
                image_id: id.clone(),
                score: dim.score(label),
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let full = ReferenceIndex::from_entries(extractor.identifier(), ctx.cfg.retrieval.metric, dim, entries)?;
    let train_ids: BTreeSet<String> = splits.ids(Role::RefTrain).map(str::to_string).collect();
    let train = full.subset(&train_ids)?;
    let (fp, tp) = (ctx.layout.index(dim, ReferenceSet::Full), ctx.layout.index(dim, ReferenceSet::Train));
    full.save(&fp)?;
    train.save(&tp)?;
    info!("index {dim}: {} references ({} train), dim {}", full.len(), train.len(), full.dim);
    let split_path = ctx.layout.split(dim);
    let mut inputs: Vec<&Path> = vec![&split_path];
    if let Some(f) = &ctx.cfg.retrieval.features {
        inputs.push(f);
    }
    ctx.manifest("index", &inputs, &[&fp, &tp])
}

pub fn train(ctx: &Ctx, stage: Stage) -> Result<()> {
    let cfg = ctx.cfg;
    let dim = cfg.scoring.dimension;
    let splits = ctx.splits(dim)?;
    let labels = ctx.labels()?;
    let index = ctx.index(dim, cfg.retrieval.training_references)?;
    let extractor = ctx.extractor()?;
    if extractor.identifier() != index.backbone {
        bail!(
            "index was built with '{}' but the configured extractor is '{}'; rerun `scenic index`",
            index.backbone,
            extractor.identifier()
        );
    }

    let mut model = match stage {
        Stage::Global => ModelBundle::new(dim, cfg.model.clone(), cfg.seed)?,
        _ => {
            let prev = Stage::try_from(stage.number() - 1)?;
            let dir = ctx.layout.checkpoint(dim, prev);
            require(&dir.join("manifest.json"), format!("train --stage {} --dimension {dim}", prev.number()))?;
            ModelBundle::load(&dir)?
        }
    };
    let mut tcfg = match stage {
        Stage::Global => cfg.train.global.clone(),
        Stage::Local => cfg.train.local.clone(),
        Stage::Emotion => cfg.train.emotion.clone(),
    };
    tcfg.seed = cfg.seed;

    let inputs: Vec<String> = splits.ids(Role::InputTrain).map(str::to_string).collect();
    let (train_ids, val_ids) = holdout(
        &inputs,
        cfg.train.validation_fraction,
        &mut stream(cfg.seed, &format!("train/validation/{dim}")),
    );
    let mut ids: Vec<String> = inputs.clone();
    ids.extend(index.entries().iter().map(|e| e.image_id.clone()));
    let input_set: BTreeSet<&String> = inputs.iter().collect();
    let geometry = model.config.geometry.clone();
    let loaded: Vec<(TrainSample, Option<FeatureVector>)> = ids
        .par_iter()
        .map(|id| {
            let label = labels.get(id).with_context(|| format!("{id} has no label"))?;
            let image = decode_rgb(&ctx.image_path(id))?;
            let feats = if input_set.contains(id) {
                Some(extractor.features(id, &image)?)
            } else {
                None
            };
            let sample = TrainSample {
                image_id: id.clone(),
                image,
                target: dim.score(label),
                assistant: dim.other().score(label),
            }
            .shrink(&geometry, &tcfg);
            Ok((sample, feats))
        })
        .collect::<Result<_>>()?;
    let mut features = BTreeMap::new();
    let mut samples = Vec::with_capacity(loaded.len());
    for (s, f) in loaded {
        if let Some(f) = f {
            features.insert(s.image_id.clone(), f);
        }
        samples.push(s);
    }
    let data = TrainData::pair_with_features(samples, &train_ids, &val_ids, &index, &features)?;
    info!(
        "train {dim} stage {stage}: {} train pairs, {} validation pairs",
        data.train.len(),
        data.validation.len()
    );
    let history = train_stage(stage, &mut model, &data, &tcfg)?;
    for h in &history {
        match h.validation_loss {
            Some(v) => info!("epoch {:>3}  loss {:.6}  validation {:.6}", h.epoch, h.loss, v),
            None => info!("epoch {:>3}  loss {:.6}", h.epoch, h.loss),
        }
    }
    let dir = ctx.layout.checkpoint(dim, stage);
    model.save(&dir)?;
    let hpath = ctx.layout.history(dim, stage);
    write_jsonl(&hpath, &history)?;
    let outs: Vec<PathBuf> = ["manifest.json", "global.json", "local.json", "emotion.json", "history.jsonl"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    let outs: Vec<&Path> = outs.iter().map(PathBuf::as_path).collect();
    let inputs = [ctx.layout.split(dim), ctx.layout.index(dim, cfg.retrieval.training_references)];
    ctx.manifest("train", &[&inputs[0], &inputs[1]], &outs)
}

/// One evaluated test image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub image_id: String,
    pub truth: f64,
    pub calibrated: f64,
    pub z: f64,
    pub z_cr: f64,
    pub z_ea: f64,
    pub reference_id: String,
    pub reference_score: f64,
    pub reference_distance: f64,
    pub global_input: f64,
    pub global_reference: f64,
    pub global_relative: f64,
    pub local_relative: f64,
    pub emotion_target: f64,
    pub emotion_assistant: f64,
    pub emotion_difference: f64,
}

impl EvalRow {
    fn new(s: &ScoreRecord, truth: f64) -> Self {
        Self {
            image_id: s.image_id.clone(),
            truth,
            calibrated: s.calibrated,
            z: s.z,
            z_cr: s.z_cr,
            z_ea: s.z_ea,
            reference_id: s.reference_id.clone(),
            reference_score: s.reference_score,
            reference_distance: s.reference_distance,
            global_input: s.global_input,
            global_reference: s.global_reference,
            global_relative: s.global_relative,
            local_relative: s.local_relative,
            emotion_target: s.emotion_target,
            emotion_assistant: s.emotion_assistant,
            emotion_difference: s.emotion_difference,
        }
    }
}

pub fn render_metrics(title: &str, m: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    format!(
        "{title}\nn     {}\nACC   {:.2}%\nMSE   {:.4}\nSRCC  {}\nLCC   {}\n",
        m.n,
        m.acc * 100.0,
        m.mse,
        opt(m.srcc),
        opt(m.lcc)
    )
}

pub fn evaluate(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let dim = cfg.scoring.dimension;
    let model = ctx.final_model(dim)?;
    let index = ctx.index(dim, cfg.retrieval.inference_references)?;
    let splits = ctx.splits(dim)?;
    let labels = ctx.labels()?;
    let extractor = ctx.extractor()?;
    let scorer = Scorer::new(&model, &index, extractor.as_ref(), ctx.corpus())?;

    let tests: Vec<String> = splits.ids(Role::InputTest).map(str::to_string).collect();
    if tests.len() < 2 {
        bail!("evaluation needs at least two input-test images, the split has {}", tests.len());
    }
    // random references for the no-retrieval comparison, drawn up front so the
    // stream does not depend on scheduling
    let mut rng = stream(cfg.seed, &format!("evaluate/{dim}"));
    let random_refs: Vec<&IndexEntry> = tests
        .iter()
        .map(|_| &index.entries()[rng.random_range(0..index.len())])
        .collect();

    let results: Vec<(EvalRow, [f64; 6])> = tests
        .par_iter()
        .zip(random_refs.par_iter())
        .map(|(id, rand_ref)| {
            let truth = dim.score(labels.get(id).with_context(|| format!("{id} has no label"))?);
            let image = decode_rgb(&ctx.image_path(id))?;
            let retrieved = scorer.score_image(id, &image)?;
            let rimg = decode_rgb(&ctx.image_path(&rand_ref.image_id))?;
            let random = scorer.score_with_reference(id, &image, &rand_ref.image_id, &rimg, rand_ref.score, f64::NAN)?;
            let ablation = ablation_scores(&retrieved.breakdown(), &random.breakdown())?;
            Ok((EvalRow::new(&retrieved, truth), ablation))
        })
        .collect::<Result<_>>()?;

    let truth: Vec<f64> = results.iter().map(|(r, _)| r.truth).collect();
    let pred: Vec<f64> = results.iter().map(|(r, _)| r.calibrated).collect();
    let metrics = compute_metrics(&pred, &truth, cfg.scoring.threshold)?;
    let rows = ablation_labels(dim)
        .iter()
        .enumerate()
        .map(|(k, label)| {
            let p: Vec<f64> = results.iter().map(|(_, a)| a[k]).collect();
            Ok(AblationRow {
                label: label.to_string(),
                metrics: compute_metrics(&p, &truth, cfg.scoring.threshold)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = ablation_table(format!("{dim} prediction"), rows)?;

    let eval_rows: Vec<EvalRow> = results.into_iter().map(|(r, _)| r).collect();
    let paths = [
        ctx.layout.eval(dim, "predictions.csv"),
        ctx.layout.eval(dim, "metrics.json"),
        ctx.layout.eval(dim, "metrics.txt"),
        ctx.layout.eval(dim, "ablation.json"),
        ctx.layout.eval(dim, "ablation.txt"),
    ];
    write_csv(&paths[0], &eval_rows)?;
    write_json(&paths[1], &metrics)?;
    let text = render_metrics(&format!("{dim} on {} test images", metrics.n), &metrics);
    write_text(&paths[2], &text)?;
    write_text(&paths[3], &table.to_json()?)?;
    write_text(&paths[4], &table.render())?;
    print!("{text}\n{}", table.render());
    let outs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let inputs = [
        ctx.layout.checkpoint(dim, Stage::Emotion).join("manifest.json"),
        ctx.layout.index(dim, cfg.retrieval.inference_references),
        ctx.layout.split(dim),
    ];
    ctx.manifest("evaluate", &[&inputs[0], &inputs[1], &inputs[2]], &outs)
}

/// Image files named on the command line; directories are expanded.
fn collect_images(inputs: &[PathBuf]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let (records, rejects) = scan_directory(p)?;
            for r in rejects {
                warn!("skipping {}: {}", r.path.display(), r.reason);
            }
            out.extend(records.into_iter().map(|r| (r.path.display().to_string(), r.path)));
        } else if p.is_file() {
            out.push((p.display().to_string(), p.clone()));
        } else {
            bail!("{} does not exist", p.display());
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn score(ctx: &Ctx, images: &[PathBuf]) -> Result<()> {
    let cfg = ctx.cfg;
    let dim = cfg.scoring.dimension;
    let model = ctx.final_model(dim)?;
    let index = ctx.index(dim, cfg.retrieval.inference_references)?;
    let extractor = ctx.extractor()?;
    let scorer = Scorer::new(&model, &index, extractor.as_ref(), ctx.corpus())?;
    let files = collect_images(images)?;
    let records: Vec<ScoreRecord> = files
        .par_iter()
        .map(|(id, path)| Ok(scorer.score_image(id, &decode_rgb(path)?)?))
        .collect::<Result<_>>()?;
    for r in &records {
        println!("{:.4}\t{:.4}\t{}\t(ref {})", r.calibrated, r.z, r.image_id, r.reference_id);
    }
    let out = ctx.layout.scores(dim);
    write_jsonl(&out, &records)?;
    let ckpt = ctx.layout.checkpoint(dim, Stage::Emotion).join("manifest.json");
    let mut inputs: Vec<&Path> = vec![&ckpt];
    inputs.extend(files.iter().map(|(_, p)| p.as_path()));
    ctx.manifest("score", &inputs, &[&out])
}

fn scorer_for<'a>(
    loaded: &'a Option<(ModelBundle, ReferenceIndex)>,
    extractor: &'a dyn FeatureExtractor,
    corpus: &'a Path,
) -> Result<Option<Scorer<'a>>> {
    match loaded {
        Some((m, i)) => Ok(Some(Scorer::new(m, i, extractor, corpus)?)),
        None => Ok(None),
    }
}

pub fn rank(ctx: &Ctx, dir: &Path) -> Result<()> {
    let cfg = ctx.cfg;
    let combine = cfg.scoring.combine;
    let set = cfg.retrieval.inference_references;
    let extractor = ctx.extractor()?;
    let wants = |d: Dimension| match combine {
        Combine::Both => true,
        Combine::Beauty => d == Dimension::Beauty,
        Combine::Happy => d == Dimension::Happy,
    };
    let load = |d: Dimension| -> Result<Option<(ModelBundle, ReferenceIndex)>> {
        if wants(d) {
            Ok(Some((ctx.final_model(d)?, ctx.index(d, set)?)))
        } else {
            Ok(None)
        }
    };
    let beauty = load(Dimension::Beauty)?;
    let happy = load(Dimension::Happy)?;
    let (bs, hs) = (
        scorer_for(&beauty, extractor.as_ref(), ctx.corpus())?,
        scorer_for(&happy, extractor.as_ref(), ctx.corpus())?,
    );
    let outcome = scoring::rank_directory(dir, bs.as_ref(), hs.as_ref(), cfg.scoring.top_k, combine)?;
    for w in &outcome.warnings {
        warn!("{w}");
    }
    for s in &outcome.skipped {
        warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    for r in &outcome.ranked {
        println!("{:>3}  {:.4}  {}", r.rank, r.key, r.image_id);
    }
    let (csv, jsonl) = (ctx.layout.ranked("csv"), ctx.layout.ranked("jsonl"));
    let rows: Vec<RankedRow> = outcome.ranked.iter().map(RankedRow::from).collect();
    write_csv(&csv, &rows)?;
    write_jsonl(&jsonl, &outcome.ranked)?;
    ctx.manifest("rank", &[dir], &[&csv, &jsonl])
}
