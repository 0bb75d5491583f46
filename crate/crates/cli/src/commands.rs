use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use kprompt::encoder::{DualEncoder, HttpClientConfig, HttpEncoder, MatchConfig, ToyEncoder};
use kprompt::fewshot::{
    derive_seed, evaluate, read_split, sample_episode, sparse_sample, EvalProtocol, EvalReport, ImportanceEntry,
    Manifest, SamplingMode, DEFAULT_SEGMENTS,
};
use kprompt::kb::{
    build_kb, filter_proposals, generate_template_proposals, read_nouns, read_proposals_jsonl, read_states,
    FilterThreshold, HttpMaskScorer, KnowledgeBase, MaskedTokenScorer, Source, UnigramScorer,
};
use kprompt::pipeline::{check_class_count, TmnLearner, VideoSequences, ZeroShotLearner};
use kprompt::semantics::{raw_frames_hash, CacheKey, SemanticsCache, SemanticsExtractor, SemanticsStore, ALL_FRAMES};
use kprompt::synthetic::{named_token, order_coded, order_coded_corpus, write_corpus, NamedTokenSpec, OrderCodedSpec};
use kprompt::text::fnv1a64;
use kprompt::tmn::{train_base, Checkpoint, CheckpointMeta, InputKind, TmnConfig, TmnModel, Variant};
use kprompt::tpn::{
    extract_all, read_annotations, read_caption_file, train_tagger, HashedWindowFeatures, Tagger, TaggerTraining,
    TokenFeatureProvider,
};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use crate::args::*;
use crate::config::FileConfig;
use crate::{runlog, usage};

const DEFAULT_SEED: u64 = 17;
const DEFAULT_LAMBDA: f64 = 1e-4;
const DEFAULT_HASH_DIM: usize = 256;
const DEFAULT_SAMPLINGS: usize = 10;
const IMPORTANCE_EPISODES: usize = 10;

struct Ctx {
    cfg: FileConfig,
    seed: u64,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let cfg = FileConfig::load(cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let ctx = Ctx { cfg, seed };
    match cli.command {
        Command::Kb(KbCommand::Build(a)) => ctx.kb_build(a),
        Command::Tpn(TpnCommand::Train(a)) => ctx.tpn_train(a),
        Command::Tpn(TpnCommand::Extract(a)) => ctx.tpn_extract(a),
        Command::Semantics(SemanticsCommand::Extract(a)) => ctx.semantics_extract(a),
        Command::Train(a) => ctx.train(a),
        Command::Eval(a) => ctx.eval(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => ctx.synth(a),
    }
}

fn required<T>(value: Option<T>, flag: &str) -> anyhow::Result<T> {
    value.ok_or_else(|| usage(format!("missing required {flag}")))
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Full => "full",
        Variant::Linear => "linear",
    }
}

fn input_name(k: InputKind) -> &'static str {
    match k {
        InputKind::Knowledge => "knowledge",
        InputKind::RawFrames => "raw_frames",
    }
}

fn parse_hash(hex_str: &str) -> anyhow::Result<[u8; 32]> {
    let bytes = hex::decode(hex_str).map_err(|e| anyhow!("bad hash {hex_str:?}: {e}"))?;
    bytes.try_into().map_err(|_| anyhow!("hash {hex_str:?} is not 32 bytes"))
}

impl Ctx {
    fn encoder(&self, a: &EncoderArgs) -> anyhow::Result<(Box<dyn DualEncoder>, MatchConfig)> {
        let t = a.temperature.or(self.cfg.temperature);
        let mc = match t {
            Some(t) => MatchConfig::new(t).map_err(|e| usage(e.to_string()))?,
            None => MatchConfig::default(),
        };
        let enc: Box<dyn DualEncoder> = match a.scorer.or(self.cfg.scorer).unwrap_or(ScorerKind::Toy) {
            ScorerKind::Toy => Box::new(ToyEncoder::default()),
            ScorerKind::Http => {
                let endpoint = required(a.endpoint.clone().or(self.cfg.endpoint.clone()), "--endpoint")?;
                Box::new(HttpEncoder::connect(&endpoint, HttpClientConfig::default())?)
            }
        };
        Ok((enc, mc))
    }

    fn manifest_path(&self, d: &DataArgs) -> anyhow::Result<PathBuf> {
        if let Some(p) = d.manifest.clone().or(self.cfg.data.manifest.clone()) {
            return Ok(p);
        }
        let dir = required(d.videos.clone().or(self.cfg.data.videos.clone()), "--videos or --manifest")?;
        Ok(if dir.is_dir() { dir.join("manifest.jsonl") } else { dir })
    }

    /// Reads the manifest and keeps the classes of the split, if any: the
    /// flag, then the config entry, then `<name>` beside the manifest.
    fn load_manifest(
        &self,
        d: &DataArgs,
        configured: Option<&PathBuf>,
        name: Option<&str>,
    ) -> anyhow::Result<(Manifest, Vec<PathBuf>)> {
        let path = self.manifest_path(d)?;
        let full = Manifest::read_jsonl(&path)?;
        let beside = name
            .and_then(|n| path.parent().map(|p| p.join(n)))
            .filter(|p| p.is_file());
        let mut inputs = vec![path];
        let split = d.split.clone().or(configured.cloned()).or(beside);
        let manifest = match split {
            Some(s) => {
                let classes = read_split(&s)?;
                inputs.push(s);
                full.restrict(&classes)?
            }
            None => full,
        };
        Ok((manifest, inputs))
    }

    fn segments(&self, d: &DataArgs) -> anyhow::Result<usize> {
        let n = d.frames.or(self.cfg.data.frames).unwrap_or(DEFAULT_SEGMENTS);
        if n == 0 {
            return Err(usage("--frames must be at least 1"));
        }
        Ok(n)
    }

    fn kb_path(&self, flag: &Option<PathBuf>) -> Option<PathBuf> {
        flag.clone().or(self.cfg.kb.path.clone())
    }

    fn load_kb(&self, path: &Path, no_tpn: bool) -> anyhow::Result<KnowledgeBase> {
        let kb = KnowledgeBase::read_jsonl(path)?;
        let kb = if no_tpn { kb.only_source(Source::Template) } else { kb };
        if kb.is_empty() {
            bail!("knowledge base {} has no usable proposals", path.display());
        }
        Ok(kb)
    }

    fn cache(&self, flag: &Option<PathBuf>) -> Option<PathBuf> {
        flag.clone().or(self.cfg.data.cache.clone())
    }

    fn kb_build(&self, a: KbBuildArgs) -> anyhow::Result<()> {
        let states_path = required(a.states.or(self.cfg.kb.states.clone()), "--states")?;
        let nouns_path = required(a.nouns.or(self.cfg.kb.nouns.clone()), "--nouns")?;
        let out = required(a.out.or(self.cfg.kb.path.clone()), "--out")?;
        let lambda = a.lambda.or(self.cfg.kb.lambda).unwrap_or(DEFAULT_LAMBDA);
        let threshold = FilterThreshold::new(lambda).map_err(|e| usage(e.to_string()))?;
        let states = read_states(&states_path)?;
        let nouns = read_nouns(&nouns_path)?;
        let templates = generate_template_proposals(&states, &nouns)?;

        let mut inputs = vec![states_path.clone(), nouns_path.clone()];
        let scorer_kind = a.encoder.scorer.or(self.cfg.scorer).unwrap_or(ScorerKind::Toy);
        let scorer: Box<dyn MaskedTokenScorer> = match scorer_kind {
            ScorerKind::Toy => {
                let text = match a.lm_corpus.or(self.cfg.kb.lm_corpus.clone()) {
                    Some(p) => {
                        let t = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                        inputs.push(p);
                        t
                    }
                    None => {
                        let s = std::fs::read_to_string(&states_path)?;
                        let n = std::fs::read_to_string(&nouns_path)?;
                        format!("{s}\n{n}")
                    }
                };
                Box::new(UnigramScorer::from_corpus(&text))
            }
            ScorerKind::Http => {
                let endpoint = required(a.encoder.endpoint.or(self.cfg.endpoint.clone()), "--endpoint")?;
                Box::new(HttpMaskScorer::new(&endpoint, HttpClientConfig::default()))
            }
        };
        let kept = filter_proposals(&templates, scorer.as_ref(), threshold)?;
        let mut sets = vec![kept.clone()];
        for p in &a.tpn {
            sets.push(read_proposals_jsonl(p)?);
            inputs.push(p.clone());
        }
        let kb = build_kb(sets.iter().map(Vec::as_slice));
        kb.write_jsonl(&out)?;
        let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        runlog::write(
            &out,
            "kb build",
            &json!({ "lambda": lambda, "scorer": scorer_kind, "tpn": a.tpn, "kb_hash": kb.hash_hex() }),
            &input_refs,
        )?;
        println!(
            "{} templates, {} kept at lambda {lambda}, {} proposals in {} ({})",
            templates.len(),
            kept.len(),
            kb.len(),
            out.display(),
            kb.hash_hex()
        );
        Ok(())
    }

    fn tpn_train(&self, a: TpnTrainArgs) -> anyhow::Result<()> {
        let path = required(a.annotations, "--annotations")?;
        let out = required(a.out, "--out")?;
        let hash_dim = a.hash_dim.unwrap_or(DEFAULT_HASH_DIM);
        if hash_dim == 0 {
            return Err(usage("--hash-dim must be at least 1"));
        }
        let defaults = TaggerTraining::default();
        let hyper = TaggerTraining {
            epochs: a.epochs.unwrap_or(defaults.epochs),
            lr: a.lr.unwrap_or(defaults.lr),
            seed: self.seed,
        };
        let docs = read_annotations(&path)?;
        let features = HashedWindowFeatures::new(hash_dim);
        let (tagger, rep) = train_tagger(&docs, &features, hyper)?;
        tagger.save(&out)?;
        runlog::write(
            &out,
            "tpn train",
            &json!({ "epochs": hyper.epochs, "lr": hyper.lr, "seed": hyper.seed, "features": features.id() }),
            &[&path],
        )?;
        println!(
            "{} documents: loss {:.4} -> {:.4}, token accuracy {:.1}%",
            docs.len(),
            rep.initial_loss,
            rep.final_loss,
            100.0 * rep.train_accuracy
        );
        Ok(())
    }

    fn tpn_extract(&self, a: TpnExtractArgs) -> anyhow::Result<()> {
        let tagger_path = required(a.tagger, "--tagger")?;
        let out = required(a.out, "--out")?;
        let tagger = Tagger::load(&tagger_path)?;
        let features = HashedWindowFeatures::from_id(tagger.feature_provider_id())
            .ok_or_else(|| anyhow!("unknown feature provider {:?}", tagger.feature_provider_id()))?;
        let mut files = Vec::new();
        for c in &a.captions {
            if c.is_dir() {
                let mut found: Vec<PathBuf> = std::fs::read_dir(c)
                    .with_context(|| format!("listing {}", c.display()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                    .collect();
                found.sort();
                files.extend(found);
            } else {
                files.push(c.clone());
            }
        }
        let docs = files.iter().map(|f| read_caption_file(f)).collect::<Result<Vec<_>, _>>()?;
        let proposals = extract_all(&docs, &tagger, &features)?;
        let kb = build_kb([proposals.as_slice()]);
        kb.write_jsonl(&out)?;
        let mut inputs: Vec<&Path> = vec![&tagger_path];
        inputs.extend(a.captions.iter().map(PathBuf::as_path));
        runlog::write(&out, "tpn extract", &json!({ "kb_hash": kb.hash_hex() }), &inputs)?;
        println!(
            "{} captions, {} spans, {} distinct proposals in {}",
            docs.len(),
            proposals.len(),
            kb.len(),
            out.display()
        );
        Ok(())
    }

    fn semantics_extract(&self, a: SemanticsExtractArgs) -> anyhow::Result<()> {
        let (manifest, mut inputs) = self.load_manifest(&a.data, None, None)?;
        let segments = self.segments(&a.data)?;
        let cache_dir = required(self.cache(&a.cache), "--cache")?;
        let (enc, mc) = self.encoder(&a.encoder)?;
        let kb = match a.ablation.no_knowledge {
            true => None,
            false => {
                let p = required(self.kb_path(&a.kb), "--kb")?;
                inputs.push(p.clone());
                Some(self.load_kb(&p, a.ablation.no_tpn)?)
            }
        };
        let extractor = match &kb {
            Some(kb) => SemanticsExtractor::new(kb, enc.as_ref(), mc)?,
            None => SemanticsExtractor::raw_frames(enc.as_ref()),
        };
        let (kb_hash, cols) = (extractor.kb_hash(), extractor.cols());
        let cache = SemanticsCache::open(&cache_dir)?;
        let store = SemanticsStore::new(Some(cache.clone()), extractor);
        manifest.videos().par_iter().try_for_each(|v| -> anyhow::Result<()> {
            let dense = store.dense(v)?;
            let mode = SamplingMode::Random(derive_seed(self.seed, &[fnv1a64(&v.video_id)]));
            let sampled = dense.select_rows(&sparse_sample(v.frame_count, segments, mode), self.seed)?;
            cache.put(&CacheKey::new(&v.video_id, kb_hash, store.encoder_id(), self.seed)?, &sampled)?;
            Ok(())
        })?;
        let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        runlog::write(
            &cache_dir,
            "semantics extract",
            &json!({
                "seed": self.seed,
                "frames": segments,
                "encoder": store.encoder_id(),
                "kb_hash": hex::encode(kb_hash),
                "input": if kb.is_some() { "knowledge" } else { "raw_frames" },
                "all_frames_seed": ALL_FRAMES,
            }),
            &refs,
        )?;
        println!(
            "{} videos x {cols} columns cached under {}",
            manifest.len(),
            cache.root().join(hex::encode(kb_hash)).display()
        );
        Ok(())
    }

    fn train(&self, a: TrainArgs) -> anyhow::Result<()> {
        let out = required(a.out, "--out")?;
        let (manifest, mut inputs) = self.load_manifest(&a.data, self.cfg.data.base_split.as_ref(), Some("base.txt"))?;
        let segments = self.segments(&a.data)?;
        let (enc, mc) = self.encoder(&a.encoder)?;
        let kb = match a.ablation.no_knowledge {
            true => None,
            false => {
                let p = required(self.kb_path(&a.kb), "--kb")?;
                inputs.push(p.clone());
                Some(self.load_kb(&p, a.ablation.no_tpn)?)
            }
        };
        let extractor = match &kb {
            Some(kb) => SemanticsExtractor::new(kb, enc.as_ref(), mc)?,
            None => SemanticsExtractor::raw_frames(enc.as_ref()),
        };
        let input_dim = extractor.cols();
        let cache = self.cache(&a.cache).map(|p| SemanticsCache::open(&p)).transpose()?;
        let store = SemanticsStore::new(cache, extractor);

        let m = &self.cfg.model;
        let defaults = TmnConfig::default();
        let config = TmnConfig {
            input_dim,
            hidden_dim: a.hidden_dim.or(m.hidden_dim).unwrap_or(defaults.hidden_dim),
            blocks: m.blocks.unwrap_or(defaults.blocks),
            kernel: m.kernel.unwrap_or(defaults.kernel),
            heads: m.heads.unwrap_or(defaults.heads),
            dropout: m.dropout.unwrap_or(defaults.dropout),
            classes: manifest.classes().len(),
            frames: segments,
            variant: if a.ablation.no_tmn { Variant::Linear } else { Variant::Full },
        };
        let mut schedule = self.cfg.schedule.clone();
        if let Some(e) = a.epochs {
            schedule.base.epochs = e;
        }
        if let Some(lr) = a.lr {
            schedule.base.lr = lr;
        }
        schedule.base.validate().map_err(|e| usage(e.to_string()))?;
        let mut model = TmnModel::new(config.clone(), self.seed).map_err(|e| usage(e.to_string()))?;
        check_class_count(&manifest, config.classes)?;

        let data = VideoSequences::new(&manifest, &store, segments);
        data.warm()?;
        info!("training on {} videos of {} classes", manifest.len(), config.classes);
        let log = train_base(&mut model, &data, &schedule.base, self.seed)?;

        let input = if kb.is_some() { InputKind::Knowledge } else { InputKind::RawFrames };
        let kb_hash = kb.as_ref().map(|k| k.hash_hex()).unwrap_or_else(|| hex::encode(raw_frames_hash()));
        let settings = json!({
            "seed": self.seed,
            "segments": segments,
            "no_tpn": a.ablation.no_tpn,
            "base_classes": manifest.classes(),
            "schedule": schedule,
            "epoch_losses": log.epoch_losses,
            "train_accuracy": log.train_accuracy,
            "flops_per_video": config.flops(segments),
        });
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                config: config.clone(),
                input,
                kb_hash,
                encoder_id: store.encoder_id().to_owned(),
                seed: self.seed,
                extra: settings.clone(),
            },
            model,
            optimizer: log.velocity,
        };
        ckpt.save(&out)?;
        let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        runlog::write(&out, "train", &json!({ "config": config, "input": input, "settings": settings }), &refs)?;
        println!(
            "{} model on {} videos / {} classes: loss {:.4} -> {:.4}, train accuracy {:.1}%",
            variant_name(config.variant),
            manifest.len(),
            config.classes,
            log.epoch_losses.first().copied().unwrap_or(f64::NAN),
            log.epoch_losses.last().copied().unwrap_or(f64::NAN),
            100.0 * log.train_accuracy
        );
        Ok(())
    }

    fn eval(&self, a: EvalArgs) -> anyhow::Result<()> {
        let mode = a.mode.or(self.cfg.eval.mode).unwrap_or_default();
        let e = &self.cfg.eval;
        let defaults = EvalProtocol::default();
        let protocol = EvalProtocol {
            ways: a.ways.or(e.ways).unwrap_or(defaults.ways),
            shots: a.shots.or(e.shots).unwrap_or(defaults.shots),
            queries: a.queries.or(e.queries).unwrap_or(defaults.queries),
            tasks: a.tasks.or(e.tasks).unwrap_or(defaults.tasks),
            seed: self.seed,
        };
        if protocol.ways < 2 || protocol.shots == 0 || protocol.queries == 0 || protocol.tasks == 0 {
            return Err(usage("need at least 2 ways and one shot, query and task"));
        }
        let samplings = a.samplings.or(e.samplings).unwrap_or(DEFAULT_SAMPLINGS);
        if samplings == 0 {
            return Err(usage("--samplings must be at least 1"));
        }
        let ckpt_path = match mode {
            EvalMode::Tmn => Some(required(a.ckpt.clone(), "--ckpt (tmn mode)")?),
            EvalMode::Zeroshot => None,
        };
        let (manifest, mut inputs) = self.load_manifest(&a.data, self.cfg.data.test_split.as_ref(), Some("test.txt"))?;
        let (enc, mc) = self.encoder(&a.encoder)?;

        let (report, settings) = match ckpt_path {
            None => {
                let segments = self.segments(&a.data)?;
                let learner = ZeroShotLearner {
                    encoder: enc.as_ref(),
                    cfg: mc,
                    segments,
                    samplings,
                };
                let report = evaluate(&learner, &manifest, protocol)?;
                let settings = json!({
                    "mode": "zeroshot",
                    "encoder": enc.id(),
                    "segments": segments,
                    "samplings": samplings,
                });
                (report, settings)
            }
            Some(path) => {
                let ckpt = Checkpoint::load(&path)?;
                inputs.push(path.clone());
                let meta = &ckpt.meta;
                let want_variant = if a.ablation.no_tmn { Variant::Linear } else { Variant::Full };
                if meta.config.variant != want_variant {
                    bail!(
                        "checkpoint {} holds a {} model, flags ask for {}",
                        path.display(),
                        variant_name(meta.config.variant),
                        variant_name(want_variant)
                    );
                }
                let want_input = if a.ablation.no_knowledge { InputKind::RawFrames } else { InputKind::Knowledge };
                if meta.input != want_input {
                    bail!(
                        "checkpoint {} was trained on {} input, flags ask for {}",
                        path.display(),
                        input_name(meta.input),
                        input_name(want_input)
                    );
                }
                if enc.id() != meta.encoder_id {
                    bail!(
                        "checkpoint {} was trained with encoder {}, not {}",
                        path.display(),
                        meta.encoder_id,
                        enc.id()
                    );
                }
                let ckpt_no_tpn = meta.extra.get("no_tpn").and_then(|v| v.as_bool()).unwrap_or(false);
                if ckpt_no_tpn != a.ablation.no_tpn {
                    bail!(
                        "checkpoint {} was trained {} extracted proposals",
                        path.display(),
                        if ckpt_no_tpn { "without" } else { "with" }
                    );
                }
                let segments = match a.data.frames.or(self.cfg.data.frames) {
                    Some(n) if n > 0 => n,
                    Some(_) => return Err(usage("--frames must be at least 1")),
                    None => meta
                        .extra
                        .get("segments")
                        .and_then(|v| v.as_u64())
                        .map(|n| n as usize)
                        .unwrap_or(DEFAULT_SEGMENTS),
                };
                let cache = self.cache(&a.cache).map(|p| SemanticsCache::open(&p)).transpose()?;
                let mut names = Vec::new();
                let store = match meta.input {
                    InputKind::RawFrames => SemanticsStore::new(cache, SemanticsExtractor::raw_frames(enc.as_ref())),
                    InputKind::Knowledge => match self.kb_path(&a.kb) {
                        Some(p) => {
                            let kb = self.load_kb(&p, a.ablation.no_tpn)?;
                            if kb.hash_hex() != meta.kb_hash {
                                bail!(
                                    "knowledge base {} has hash {}, checkpoint was trained on {}",
                                    p.display(),
                                    kb.hash_hex(),
                                    meta.kb_hash
                                );
                            }
                            inputs.push(p);
                            names = kb.texts();
                            SemanticsStore::new(cache, SemanticsExtractor::new(&kb, enc.as_ref(), mc)?)
                        }
                        None => {
                            let cache = cache.ok_or_else(|| usage("missing required --kb or --cache"))?;
                            SemanticsStore::cache_only(cache, parse_hash(&meta.kb_hash)?, &meta.encoder_id)
                        }
                    },
                };
                let learner = TmnLearner {
                    model: &ckpt.model,
                    store: &store,
                    schedule: self.cfg.schedule.episode.clone(),
                    segments,
                    samplings,
                    resample_support: a.resample_support,
                };
                let mut report = evaluate(&learner, &manifest, protocol)?;
                if let Some(k) = a.importance.filter(|&k| k > 0) {
                    report.importance = importance(&learner, &manifest, protocol, &names, k)?;
                }
                let settings = json!({
                    "mode": "tmn",
                    "variant": variant_name(meta.config.variant),
                    "input": input_name(meta.input),
                    "no_tpn": a.ablation.no_tpn,
                    "encoder": meta.encoder_id,
                    "kb_hash": meta.kb_hash,
                    "segments": segments,
                    "samplings": samplings,
                    "resample_support": a.resample_support,
                    "episode_schedule": self.cfg.schedule.episode,
                });
                (report, settings)
            }
        };
        let report = EvalReport {
            config: settings.clone(),
            ..report
        };
        let text = serde_json::to_string_pretty(&report)? + "\n";
        match &a.report {
            Some(out) => {
                std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
                let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
                runlog::write(out, "eval", &json!({ "protocol": protocol, "settings": settings }), &refs)?;
                println!(
                    "{}-way {}-shot over {} tasks: {:.2}% +/- {:.2}",
                    protocol.ways,
                    protocol.shots,
                    protocol.tasks,
                    100.0 * report.mean_accuracy,
                    100.0 * report.ci95
                );
            }
            None => print!("{text}"),
        }
        Ok(())
    }

    fn synth(&self, a: SynthArgs) -> anyhow::Result<()> {
        let out = required(a.out, "--out")?;
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let ds = match a.kind {
            SynthKind::Order => {
                let d = OrderCodedSpec::default();
                order_coded(&OrderCodedSpec {
                    base_classes: a.base_classes.unwrap_or(65),
                    videos_per_class: a.videos_per_class.unwrap_or(d.videos_per_class),
                    seed: self.seed,
                    ..d
                })
                .map_err(|e| usage(e.to_string()))?
            }
            SynthKind::Named => {
                let d = NamedTokenSpec::default();
                named_token(
                    &NamedTokenSpec {
                        base_classes: a.base_classes.unwrap_or(d.base_classes),
                        videos_per_class: a.videos_per_class.unwrap_or(d.videos_per_class),
                        seed: self.seed,
                        ..d
                    },
                    &ToyEncoder::default(),
                )
                .map_err(|e| usage(e.to_string()))?
            }
        };
        ds.write(&out)?;
        let (states, nouns) = order_coded_corpus();
        write_corpus(&states, &nouns, &out)?;
        let config = format!(
            "seed = {seed}\nscorer = \"toy\"\n\n\
             [data]\nvideos = \".\"\nbase_split = \"base.txt\"\ntest_split = \"test.txt\"\ncache = \"cache\"\nframes = 16\n\n\
             [kb]\npath = \"kb.jsonl\"\nstates = \"states.tsv\"\nnouns = \"nouns.txt\"\n\n\
             [model]\nhidden_dim = 32\n\n\
             [schedule.base]\nlr = 0.01\n",
            seed = self.seed
        );
        let cfg_path = out.join("config.toml");
        std::fs::write(&cfg_path, config).with_context(|| format!("writing {}", cfg_path.display()))?;
        runlog::write(
            &out,
            "synth",
            &json!({ "kind": format!("{:?}", a.kind).to_lowercase(), "seed": self.seed }),
            &[],
        )?;
        println!(
            "{} videos, {} base and {} test classes in {}",
            ds.manifest.len(),
            ds.base_classes.len(),
            ds.test_classes.len(),
            out.display()
        );
        Ok(())
    }
}

/// Mean input-gradient magnitude per column over the first few evaluation
/// episodes, top `k` first.
fn importance(
    learner: &TmnLearner,
    manifest: &Manifest,
    protocol: EvalProtocol,
    names: &[String],
    k: usize,
) -> anyhow::Result<Vec<ImportanceEntry>> {
    let episodes = protocol.tasks.min(IMPORTANCE_EPISODES);
    let per: Vec<_> = (0..episodes as u64)
        .into_par_iter()
        .map(|t| {
            let ep = sample_episode(
                manifest,
                protocol.ways,
                protocol.shots,
                protocol.queries,
                protocol.seed.wrapping_add(t),
            )?;
            learner.importance(manifest, &ep)
        })
        .collect::<Result<_, _>>()?;
    let mut total = per[0].clone();
    for p in &per[1..] {
        total += p;
    }
    total /= episodes as f64;
    let mut order: Vec<usize> = (0..total.len()).collect();
    order.sort_by(|&i, &j| total[j].total_cmp(&total[i]).then(i.cmp(&j)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|j| ImportanceEntry {
            proposal: names.get(j).cloned().unwrap_or_else(|| format!("column {j}")),
            score: total[j],
        })
        .collect())
}

fn method_label(config: &serde_json::Value) -> String {
    if config.get("mode").and_then(|v| v.as_str()) == Some("zeroshot") {
        return "zero-shot".into();
    }
    let mut parts = Vec::new();
    if config.get("input").and_then(|v| v.as_str()) == Some("raw_frames") {
        parts.push("w/o knowledge");
    }
    if config.get("no_tpn").and_then(|v| v.as_bool()) == Some(true) {
        parts.push("w/o TPN");
    }
    if config.get("variant").and_then(|v| v.as_str()) == Some("linear") {
        parts.push("w/o TMN");
    }
    if parts.is_empty() {
        "full".into()
    } else {
        parts.join(", ")
    }
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let header = ["report", "method", "setting", "tasks", "accuracy", "ci95"];
    let mut rows = Vec::new();
    for p in &a.inputs {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push([
            name,
            method_label(&r.config),
            format!("{}-way {}-shot", r.protocol.ways, r.protocol.shots),
            r.protocol.tasks.to_string(),
            format!("{:.2}", 100.0 * r.mean_accuracy),
            format!("{:.2}", 100.0 * r.ci95),
        ]);
    }
    match a.format {
        ReportFormat::Csv => {
            println!("{}", header.join(","));
            for r in &rows {
                let cells: Vec<String> = r
                    .iter()
                    .map(|c| {
                        if c.contains([',', '"']) {
                            format!("\"{}\"", c.replace('"', "\"\""))
                        } else {
                            c.clone()
                        }
                    })
                    .collect();
                println!("{}", cells.join(","));
            }
        }
        ReportFormat::Md => {
            println!("| {} |", header.join(" | "));
            println!("|{}", "---|".repeat(header.len()));
            for r in &rows {
                println!("| {} |", r.join(" | "));
            }
        }
        ReportFormat::Text => {
            let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for r in &rows {
                for (w, c) in widths.iter_mut().zip(r) {
                    *w = (*w).max(c.len());
                }
            }
            let line = |cells: Vec<&str>| {
                let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
                println!("{}", padded.join("  ").trim_end());
            };
            line(header.to_vec());
            for r in &rows {
                line(r.iter().map(String::as_str).collect());
            }
        }
    }
    Ok(())
}
