use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vimi_core::conditioning::{Conditioning, ConditioningEncoder, EncoderSpec};
use vimi_core::diffusion::{
    train_toy, Checkpoint, DenoiserConfig, ToyDenoiser, TrainConfig, TrainExample, TrainReport, VideoShape,
    VideoTensor,
};
use vimi_core::metrics::{feature_extract, fit_gaussian, frechet_distance, MetricReport};
use vimi_core::prompt::{
    build_instructed_t2v_prompt, build_pretraining_prompt, build_prediction_prompt, curate_subject_prompt,
    extract_entities, DictionaryExtractor, InstructionTask, MultimodalPrompt, SyntheticCropSegmenter,
};
use vimi_core::retrieval::{read_corpus, write_corpus, ImageTextPair, IndexBuilder, RetrievalIndex, RetrievalResult};
use vimi_core::sampler::{cascade_sample, GuidanceConfig};
use vimi_core::synth::CLASSES;

use crate::config::{PromptTask, RunConfig};
use crate::records::{absolute, read_jsonl, resolve, write_jsonl, AugmentedRecord, PromptRecord, VideoRecord};
use crate::CliError;

const BASE: &str = "base";
const UPSAMPLER: &str = "up";
const ENCODER_BLOCK: &str = "encoder";

fn io_err(path: &Path, what: &str) -> impl FnOnce(std::io::Error) -> CliError {
    let context = format!("{what} {}", path.display());
    move |e| CliError::io(context, e)
}

fn load_index(path: &Path) -> Result<RetrievalIndex, CliError> {
    if !path.exists() {
        return Err(CliError::MissingIndex(path.to_path_buf()));
    }
    Ok(RetrievalIndex::load(path)?)
}

fn empty_result(query: &str) -> RetrievalResult {
    RetrievalResult {
        query: query.to_owned(),
        pairs: Vec::new(),
    }
}

fn retrieve_or_empty(index: Option<&RetrievalIndex>, caption: &str, k: usize) -> Result<RetrievalResult, CliError> {
    match index {
        Some(index) if k > 0 => Ok(index.retrieve(caption, k)?),
        _ => Ok(empty_result(caption)),
    }
}

/// Image reference for the first frame of a dataset video. Keyed by record
/// id so embeddings do not depend on where files live.
fn first_frame_ref(id: &str) -> String {
    format!("video:{id}#frame=0")
}

fn subject_prompt(caption: &str, id: &str, entities: &DictionaryExtractor) -> MultimodalPrompt {
    let spans = extract_entities(caption, entities);
    curate_subject_prompt(caption, &spans, &SyntheticCropSegmenter::new(format!("video:{id}")))
}

fn task_prompt(
    task: PromptTask,
    caption: &str,
    id: &str,
    retrieved: &RetrievalResult,
    entities: &DictionaryExtractor,
) -> Result<MultimodalPrompt, CliError> {
    Ok(match task {
        PromptTask::Pretrain => build_pretraining_prompt(caption, retrieved),
        PromptTask::TextToVideo => build_instructed_t2v_prompt(caption, retrieved),
        PromptTask::VideoPrediction => build_prediction_prompt(caption, &first_frame_ref(id))?,
        PromptTask::SubjectDriven => subject_prompt(caption, id, entities),
    })
}

pub fn build_index(cfg: &RunConfig) -> Result<Value, CliError> {
    let corpus = RunConfig::require(&cfg.paths.corpus, "corpus")?;
    let index_path = RunConfig::require(&cfg.paths.index, "index")?;
    let file = File::open(&corpus).map_err(io_err(&corpus, "opening"))?;
    let mut builder = IndexBuilder::new(cfg.bm25);
    for pair in read_corpus(BufReader::new(file)) {
        builder.add(pair.map_err(|e| CliError::input(format!("{}: {e}", corpus.display())))?)?;
    }
    let (index, skipped) = builder.finish();
    index.save(&index_path)?;
    Ok(json!({
        "command": "build-index",
        "doc_count": index.doc_count(),
        "avg_doc_len": index.avg_doc_len(),
        "skipped": skipped.len(),
        "config_hash": cfg.config_hash(),
    }))
}

pub fn retrieve(cfg: &RunConfig, query: &str, exclude_self: Option<&str>) -> Result<Value, CliError> {
    let index = load_index(&RunConfig::require(&cfg.paths.index, "index")?)?;
    let result = index.retrieve_excluding(query, cfg.top_k, exclude_self)?;
    let results: Vec<Value> = result
        .pairs
        .iter()
        .map(|s| json!({"id": s.pair.id, "caption": s.pair.caption, "image_ref": s.pair.image_ref, "score": s.score}))
        .collect();
    Ok(json!({
        "command": "retrieve",
        "query": query,
        "k": cfg.top_k,
        "results": results,
        "config_hash": cfg.config_hash(),
    }))
}

pub fn augment(cfg: &RunConfig) -> Result<Value, CliError> {
    let dataset = RunConfig::require(&cfg.paths.dataset, "dataset")?;
    let out = RunConfig::require(&cfg.paths.output, "output")?;
    let index = if cfg.top_k > 0 {
        let path = cfg
            .paths
            .index
            .clone()
            .ok_or_else(|| CliError::MissingIndex(PathBuf::from("<unset>")))?;
        Some(load_index(&path)?)
    } else {
        None
    };
    let records: Vec<VideoRecord> = read_jsonl(&dataset)?;
    let mut augmented = Vec::with_capacity(records.len());
    let mut retrieved_total = 0;
    for r in records {
        let retrieved = retrieve_or_empty(index.as_ref(), &r.caption, cfg.top_k)?;
        retrieved_total += retrieved.len();
        let video = absolute(&resolve(&dataset, &r.video))?;
        augmented.push(AugmentedRecord {
            prompt: build_pretraining_prompt(&r.caption, &retrieved),
            id: r.id,
            caption: r.caption,
            video: video.to_string_lossy().into_owned(),
        });
    }
    write_jsonl(&out, &augmented)?;
    Ok(json!({
        "command": "augment",
        "records": augmented.len(),
        "k": cfg.top_k,
        "retrieved": retrieved_total,
        "config_hash": cfg.config_hash(),
    }))
}

pub fn curate(cfg: &RunConfig, caption: Option<&str>) -> Result<Value, CliError> {
    let dict = DictionaryExtractor::new(cfg.entities.iter().cloned());
    if let Some(caption) = caption {
        let prompt = subject_prompt(caption, "prompt", &dict);
        return Ok(json!({
            "command": "curate",
            "prompt": prompt,
            "images": prompt.image_count(),
            "config_hash": cfg.config_hash(),
        }));
    }
    let dataset = RunConfig::require(&cfg.paths.dataset, "dataset")?;
    let out = RunConfig::require(&cfg.paths.output, "output")?;
    let records: Vec<VideoRecord> = read_jsonl(&dataset)?;
    let curated: Vec<PromptRecord> = records
        .into_iter()
        .map(|r| PromptRecord {
            prompt: subject_prompt(&r.caption, &r.id, &dict),
            id: r.id,
            caption: r.caption,
        })
        .collect();
    write_jsonl(&out, &curated)?;
    Ok(json!({
        "command": "curate",
        "records": curated.len(),
        "images": curated.iter().map(|r| r.prompt.image_count()).sum::<usize>(),
        "config_hash": cfg.config_hash(),
    }))
}

fn scene_words(j: usize) -> &'static str {
    const SCENES: [&str; 4] = ["on a sunny day", "in soft light", "close up", "seen from above"];
    SCENES[j % SCENES.len()]
}

/// Writes a small class-structured corpus, dataset and held-out set.
pub fn synth(cfg: &RunConfig, records: usize, heldout: usize, classes: usize) -> Result<Value, CliError> {
    if !(1..=CLASSES.len()).contains(&classes) {
        return Err(CliError::input(format!("classes must be in 1..={}", CLASSES.len())));
    }
    let out = RunConfig::require(&cfg.paths.output, "output")?;
    let videos = out.join("videos");
    std::fs::create_dir_all(&videos).map_err(io_err(&videos, "creating"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let shape = cfg.cascade.stage2_shape;

    let mut pairs = Vec::new();
    for class in &CLASSES[..classes] {
        let slug = class.subject.replace(' ', "-");
        for j in 0..8 {
            pairs.push(ImageTextPair {
                id: format!("{slug}-{j}"),
                caption: format!("a photo of a {} {}", class.subject, scene_words(j)),
                image_ref: format!("synth://{slug}/{j}"),
            });
        }
    }
    for (j, caption) in ["a busy city street at night", "a bowl of fruit on a table", "mountains under a cloudy sky"]
        .iter()
        .enumerate()
    {
        pairs.push(ImageTextPair {
            id: format!("misc-{j}"),
            caption: (*caption).to_owned(),
            image_ref: format!("synth://misc/{j}"),
        });
    }
    let corpus = out.join("corpus.jsonl");
    let file = File::create(&corpus).map_err(io_err(&corpus, "creating"))?;
    write_corpus(std::io::BufWriter::new(file), &pairs).map_err(io_err(&corpus, "writing"))?;

    let mut make = |prefix: &str, n: usize| -> Result<Vec<VideoRecord>, CliError> {
        (0..n)
            .map(|i| {
                let class = &CLASSES[i % classes];
                let id = format!("{prefix}-{i:04}");
                let rel = format!("videos/{id}.vid");
                class.video(shape, cfg.framerate, &mut rng).save(&out.join(&rel))?;
                Ok(VideoRecord {
                    caption: class.caption(i / classes),
                    id,
                    video: rel,
                })
            })
            .collect()
    };
    let train = make("train", records)?;
    let held = make("heldout", heldout)?;
    write_jsonl(&out.join("dataset.jsonl"), &train)?;
    write_jsonl(&out.join("heldout.jsonl"), &held)?;
    Ok(json!({
        "command": "synth",
        "corpus_pairs": pairs.len(),
        "records": train.len(),
        "heldout": held.len(),
        "config_hash": cfg.config_hash(),
    }))
}

fn encoder_for(spec: EncoderSpec, seed: u64) -> Result<ConditioningEncoder, CliError> {
    Ok(ConditioningEncoder::new(spec, seed)?)
}

fn store_encoder(ckpt: &mut Checkpoint, spec: &EncoderSpec, seed: u64) {
    let values = vec![
        spec.d_model as f64,
        spec.d_feature as f64,
        spec.max_tokens as f64,
        spec.image_patch_tokens as f64,
        // Stored as two 32-bit halves so every seed survives f64.
        (seed >> 32) as f64,
        (seed & 0xffff_ffff) as f64,
    ];
    ckpt.insert(ENCODER_BLOCK, vec![values.len()], values);
}

fn load_encoder(ckpt: &Checkpoint) -> Result<ConditioningEncoder, CliError> {
    let (_, v) = ckpt
        .get(ENCODER_BLOCK)
        .filter(|(_, v)| v.len() == 6)
        .ok_or_else(|| CliError::input("checkpoint has no encoder block"))?;
    let spec = EncoderSpec {
        d_model: v[0] as usize,
        d_feature: v[1] as usize,
        max_tokens: v[2] as usize,
        image_patch_tokens: v[3] as usize,
    };
    encoder_for(spec, ((v[4] as u64) << 32) | v[5] as u64)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

fn resolution(shape: VideoShape) -> (u32, u32) {
    (shape.height as u32, shape.width as u32)
}

struct LoadedRecord {
    record: AugmentedRecord,
    high: VideoTensor,
    low: VideoTensor,
}

fn load_training_records(cfg: &RunConfig, dataset: &Path) -> Result<Vec<LoadedRecord>, CliError> {
    let (fy, fx) = cfg.cascade.factors()?;
    let records: Vec<AugmentedRecord> = read_jsonl(dataset)?;
    if records.is_empty() {
        return Err(CliError::input(format!("{}: no records", dataset.display())));
    }
    records
        .into_iter()
        .map(|record| {
            let high = VideoTensor::load(&resolve(dataset, &record.video))?;
            if high.shape() != cfg.cascade.stage2_shape {
                return Err(CliError::input(format!(
                    "video {} has shape {}, expected {}",
                    record.video,
                    high.shape(),
                    cfg.cascade.stage2_shape
                )));
            }
            let low = high.downsample_mean(fy, fx)?;
            Ok(LoadedRecord { record, high, low })
        })
        .collect()
}

fn train_config(cfg: &RunConfig, steps: usize, freeze_steps: usize, seed: u64) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        steps,
        lr: t.lr,
        batch_size: t.batch_size,
        freeze_steps,
        cond_drop_prob: t.cond_drop_prob,
        optimizer: t.optimizer,
        chunk_size: t.chunk_size,
        seed,
        diffusion: cfg.diffusion,
    }
}

fn loss_summary(report: &TrainReport) -> Value {
    let w = (report.losses.len() / 10).max(1);
    json!({"initial": report.initial_window(w), "final": report.final_window(w)})
}

pub fn train(cfg: &RunConfig, stage: u8) -> Result<Value, CliError> {
    match stage {
        1 => train_stage1(cfg),
        2 => train_stage2(cfg),
        other => Err(CliError::input(format!("stage must be 1 or 2, got {other}"))),
    }
}

fn train_stage1(cfg: &RunConfig) -> Result<Value, CliError> {
    let dataset = RunConfig::require(&cfg.paths.dataset, "dataset")?;
    let ckpt_path = RunConfig::require(&cfg.paths.checkpoint, "checkpoint")?;
    let seed = cfg.seed();
    let encoder = encoder_for(cfg.encoder, seed)?;
    let loaded = load_training_records(cfg, &dataset)?;
    let (s1, s2) = (cfg.cascade.stage1_shape, cfg.cascade.stage2_shape);

    let mut base_data = Vec::with_capacity(loaded.len());
    let mut up_data = Vec::with_capacity(loaded.len());
    for l in loaded {
        let cond = encoder.conditioning(&l.record.prompt, cfg.framerate, resolution(s1))?;
        let (fy, fx) = cfg.cascade.factors()?;
        up_data.push(TrainExample {
            video: l.high,
            cond: cond.with_resolution(resolution(s2)),
            aux: Some(l.low.upsample_nearest(fy, fx)),
        });
        base_data.push(TrainExample { video: l.low, cond, aux: None });
    }

    let d_cond = cfg.encoder.d_model;
    let sigma_data = cfg.diffusion.sigma_data;
    let mut base = ToyDenoiser::new(
        DenoiserConfig { video: s1, aux_channels: 0, d_cond, hidden: cfg.train.hidden, sigma_data },
        seed,
    );
    let mut up = ToyDenoiser::new(
        DenoiserConfig {
            video: s2,
            aux_channels: s1.channels,
            d_cond,
            hidden: cfg.train.upsampler_hidden,
            sigma_data,
        },
        seed.wrapping_add(1),
    );
    let steps = cfg.train.stage1_steps;
    let freeze = cfg.train.freeze_steps();
    log::info!("stage 1: training base model for {steps} steps on {} records", base_data.len());
    let base_report = train_toy(&mut base, &base_data, &train_config(cfg, steps, freeze, seed))?;
    log::info!("stage 1: training upsampler for {steps} steps");
    let up_report = train_toy(&mut up, &up_data, &train_config(cfg, steps, freeze, seed.wrapping_add(1)))?;

    let mut ckpt = Checkpoint::new();
    store_encoder(&mut ckpt, &cfg.encoder, seed);
    ckpt.insert_model(BASE, &base);
    ckpt.insert_model(UPSAMPLER, &up);
    ckpt.save(&ckpt_path)?;
    Ok(json!({
        "command": "train",
        "stage": 1,
        "records": base_data.len(),
        "steps": steps,
        "freeze_steps": freeze,
        "base_loss": loss_summary(&base_report),
        "upsampler_loss": loss_summary(&up_report),
        "config_hash": cfg.config_hash(),
    }))
}

fn train_stage2(cfg: &RunConfig) -> Result<Value, CliError> {
    let from = RunConfig::require(&cfg.paths.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(&from)?;
    let dataset = RunConfig::require(&cfg.paths.dataset, "dataset")?;
    let out = RunConfig::require(&cfg.paths.output, "output")?;
    let seed = cfg.seed();
    let encoder = load_encoder(&ckpt)?;
    let mut base = ckpt.model(BASE)?;
    let s1 = base.config().video;
    if s1 != cfg.cascade.stage1_shape {
        return Err(CliError::input(format!(
            "checkpoint base model is {s1}, config expects {}",
            cfg.cascade.stage1_shape
        )));
    }
    let loaded = load_training_records(cfg, &dataset)?;

    let weights = cfg.train.task_weights.as_array();
    let picker = WeightedIndex::new(weights.iter().map(|w| w.1))
        .map_err(|e| CliError::input(format!("task weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let dict = DictionaryExtractor::new(cfg.entities.iter().cloned());
    let mut counts = [0usize; 3];
    let mut data = Vec::with_capacity(loaded.len());
    for l in loaded {
        let slot = picker.sample(&mut rng);
        counts[slot] += 1;
        let r = &l.record;
        let prompt = match weights[slot].0 {
            InstructionTask::TextToVideo => MultimodalPrompt::new(Some(InstructionTask::TextToVideo), r.prompt.units().to_vec())?,
            InstructionTask::VideoPrediction => build_prediction_prompt(&r.caption, &first_frame_ref(&r.id))?,
            InstructionTask::SubjectDriven => subject_prompt(&r.caption, &r.id, &dict),
        };
        let cond = encoder.conditioning(&prompt, cfg.framerate, resolution(s1))?;
        data.push(TrainExample { video: l.low, cond, aux: None });
    }

    let steps = cfg.train.stage2_steps;
    log::info!("stage 2: instruction tuning for {steps} steps on {} records", data.len());
    let report = train_toy(&mut base, &data, &train_config(cfg, steps, 0, seed.wrapping_add(2)))?;
    let mut tuned = ckpt.clone();
    tuned.insert_model(BASE, &base);
    tuned.save(&out)?;
    Ok(json!({
        "command": "train",
        "stage": 2,
        "records": data.len(),
        "steps": steps,
        "tasks": {"subject_driven": counts[0], "video_prediction": counts[1], "text_to_video": counts[2]},
        "base_loss": loss_summary(&report),
        "config_hash": cfg.config_hash(),
    }))
}

pub fn sample(cfg: &RunConfig) -> Result<Value, CliError> {
    let ckpt = load_checkpoint(&RunConfig::require(&cfg.paths.checkpoint, "checkpoint")?)?;
    let dataset = RunConfig::require(&cfg.paths.dataset, "dataset")?;
    let out = RunConfig::require(&cfg.paths.output, "output")?;
    let encoder = load_encoder(&ckpt)?;
    let base = ckpt.model(BASE)?;
    let up = ckpt.model(UPSAMPLER)?;
    let index = match (&cfg.paths.index, cfg.top_k) {
        (Some(path), k) if k > 0 => Some(load_index(path)?),
        _ => None,
    };
    let records: Vec<VideoRecord> = read_jsonl(&dataset)?;
    if records.is_empty() {
        return Err(CliError::input(format!("{}: no records", dataset.display())));
    }
    let guidance = GuidanceConfig::new(cfg.sample.cfg_scale, base.config().d_cond)?;
    let dict = DictionaryExtractor::new(cfg.entities.iter().cloned());
    std::fs::create_dir_all(&out).map_err(io_err(&out, "creating"))?;

    let seed = cfg.seed();
    let mut manifest = Vec::with_capacity(cfg.sample.num_samples);
    for i in 0..cfg.sample.num_samples {
        let r = &records[i % records.len()];
        let retrieved = retrieve_or_empty(index.as_ref(), &r.caption, cfg.top_k)?;
        let prompt = task_prompt(cfg.task, &r.caption, &r.id, &retrieved, &dict)?;
        let cond: Conditioning =
            encoder.conditioning(&prompt, cfg.framerate, resolution(cfg.cascade.stage1_shape))?;
        let video = cascade_sample(&base, &up, &cond, &cfg.cascade, &cfg.diffusion, &guidance, seed.wrapping_add(i as u64))?;
        let name = format!("sample-{i:04}.vid");
        video.high.save(&out.join(&name))?;
        manifest.push(VideoRecord {
            id: format!("sample-{i:04}"),
            caption: r.caption.clone(),
            video: name,
        });
    }
    write_jsonl(&out.join("samples.jsonl"), &manifest)?;
    Ok(json!({
        "command": "sample",
        "samples": manifest.len(),
        "task": cfg.task,
        "config_hash": cfg.config_hash(),
    }))
}

fn features_of(list: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let records: Vec<VideoRecord> = read_jsonl(list)?;
    records
        .iter()
        .map(|r| Ok(feature_extract(&VideoTensor::load(&resolve(list, &r.video))?)))
        .collect()
}

/// Accepts a record list or a sample directory containing `samples.jsonl`.
fn record_list(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("samples.jsonl")
    } else {
        path.to_path_buf()
    }
}

pub fn eval(cfg: &RunConfig) -> Result<Value, CliError> {
    let generated = record_list(&RunConfig::require(&cfg.paths.generated, "generated")?);
    let reference = record_list(&RunConfig::require(&cfg.paths.reference, "reference")?);
    let gen = features_of(&generated)?;
    let refs = features_of(&reference)?;
    let value = frechet_distance(&fit_gaussian(&gen)?, &fit_gaussian(&refs)?)?;
    let report = MetricReport {
        metric: "frechet_distance".into(),
        value,
        n_samples: gen.len(),
        config_hash: cfg.config_hash(),
    };
    Ok(serde_json::to_value(report).expect("report serializes"))
}
