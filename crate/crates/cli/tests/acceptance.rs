//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kprompt::encoder::{DualEncoder, MatchConfig, ToyEncoder};
use kprompt::fewshot::{evaluate, sample_episode, EvalProtocol, Manifest};
use kprompt::kb::{
    build_kb, filter_proposals, generate_template_proposals, BodyPartState, FilterThreshold, Level, ObjectNoun,
    UnigramScorer,
};
use kprompt::nn::gradcheck::{grad_check, GradCheckOptions};
use kprompt::nn::{
    Adam, BatchNorm, DepthwiseConv, Dropout, Layer, Linear, MeanPool, Mode, MultiHeadSelfAttention, NnError, Param,
    PositionalEmbedding, Relu, SgdMomentum, Tensor3,
};
use kprompt::pipeline::{TmnLearner, VideoSequences, ZeroShotLearner};
use kprompt::semantics::{CacheKey, SemanticsCache, SemanticsExtractor, SemanticsMatrix, SemanticsStore};
use kprompt::synthetic::{named_token, order_coded, order_coded_corpus, NamedTokenSpec, OrderCodedSpec};
use kprompt::tmn::{train_base, BaseSchedule, EpisodeSchedule, TmnConfig, TmnModel, Variant};
use kprompt::tpn::{decode_bio, encode_spans, BioLabel};
use kprompt::Error;
use ndarray::arr1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Tensor3 {
    Tensor3::from_shape_simple_fn(shape, || rng.random_range(-1.5..1.5))
}

fn worst_error(layer: &mut dyn Layer, x: &Tensor3, mode: Mode, seed: u64, max_coords: Option<usize>) -> f64 {
    let opts = GradCheckOptions {
        eps: 1e-5,
        mode,
        seed,
        max_coords,
    };
    grad_check(layer, x, opts).expect("grad check").max_rel_error
}

#[derive(Clone)]
struct SignFlipped(Linear);

impl Layer for SignFlipped {
    fn forward(&mut self, x: &Tensor3, mode: Mode) -> Result<Tensor3, NnError> {
        self.0.forward(x, mode)
    }
    fn backward(&mut self, g: &Tensor3) -> Result<Tensor3, NnError> {
        Ok(-self.0.backward(g)?)
    }
    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        self.0.infer(x)
    }
    fn params(&self) -> Vec<&Param> {
        self.0.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.0.params_mut()
    }
    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut note = |name: &str, seed: u64, e: f64| -> Result<(), String> {
        worst = worst.max(e);
        ensure(e <= GRAD_TOL, || format!("{name} seed {seed}: {e:.3e}"))
    };
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (b, t, c) = (2, rng.random_range(1..6), rng.random_range(1..6));
        let x = rand_tensor(&mut rng, (b, t, c));

        let mut lin = Linear::new("lin", c, 4, &mut rng);
        note("linear", seed, worst_error(&mut lin, &x, Mode::Train, seed, None))?;

        let mut bn = BatchNorm::new("bn", c);
        bn.gamma.value.mapv_inplace(|_| rng.random_range(0.5..2.0));
        note("batchnorm/train", seed, worst_error(&mut bn, &x, Mode::Train, seed, None))?;
        bn.running_var.value.mapv_inplace(|_| rng.random_range(0.5..2.0));
        note("batchnorm/eval", seed, worst_error(&mut bn, &x, Mode::Eval, seed, None))?;

        let k = [1, 3, 5][seed as usize % 3];
        let mut conv = DepthwiseConv::new("conv", k, c, &mut rng).unwrap();
        note("depthwise conv", seed, worst_error(&mut conv, &x, Mode::Train, seed, None))?;

        let (d, h) = [(4, 2), (6, 3), (8, 4), (4, 1)][seed as usize % 4];
        let xa = rand_tensor(&mut rng, (2, t, d));
        let mut attn = MultiHeadSelfAttention::new("attn", d, h, &mut rng).unwrap();
        note("attention", seed, worst_error(&mut attn, &xa, Mode::Train, seed, None))?;

        let mut pe = PositionalEmbedding::new("pos", 3, c, &mut rng);
        note("positional", seed, worst_error(&mut pe, &x, Mode::Train, seed, None))?;
        note("relu", seed, worst_error(&mut Relu::new(), &x, Mode::Train, seed, None))?;
        note("meanpool", seed, worst_error(&mut MeanPool::new(), &x, Mode::Train, seed, None))?;
        let mut drop = Dropout::new(0.3, seed).unwrap();
        note("dropout", seed, worst_error(&mut drop, &x, Mode::Train, seed, None))?;
    }
    let (mut checked, mut redrawn) = (0, 0);
    for seed in 0..20u64 {
        let cfg = TmnConfig {
            input_dim: 40,
            hidden_dim: 32,
            classes: 5,
            frames: 8,
            ..Default::default()
        };
        let mut model = TmnModel::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let opts = GradCheckOptions {
            eps: 1e-5,
            mode: Mode::Train,
            seed,
            max_coords: Some(600),
        };
        // A draw with a ReLU or max boundary inside the eps window has no
        // derivative there; take the next input instead.
        let mut rep = grad_check(&mut model, &rand_tensor(&mut rng, (2, 8, 40)), opts).unwrap();
        let mut draws = 1;
        while rep.kinks > 0 && draws < 10 {
            rep = grad_check(&mut model, &rand_tensor(&mut rng, (2, 8, 40)), opts).unwrap();
            draws += 1;
            redrawn += 1;
        }
        ensure(rep.kinks == 0, || format!("toy TMN seed {seed}: no kink-free input in {draws} draws"))?;
        checked += rep.checked;
        note(&format!("toy TMN ({})", rep.worst), seed, rep.max_rel_error)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = SignFlipped(Linear::new("lin", 3, 2, &mut rng));
    let x = rand_tensor(&mut rng, (2, 2, 3));
    let control = worst_error(&mut bad, &x, Mode::Train, 1, None);
    ensure(control > 0.1, || format!("corrupted backward not caught: {control:.3e}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max rel error {worst:.2e} over 20 seeds ({checked} TMN coordinates, {redrawn} inputs redrawn at kinks), control {control:.2}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

/// Brute-force template enumeration, independent of the library.
fn oracle_templates(states: &[(String, String, bool)], nouns: &[String]) -> Vec<(String, Option<String>)> {
    let mut out = Vec::new();
    for (part, phrase, transitive) in states {
        if *transitive {
            for n in nouns {
                out.push((
                    format!("Human's {part} {phrase} the {n}"),
                    Some(format!("Human's {part} {phrase} the [MASK]")),
                ));
            }
        } else {
            out.push((format!("Human's {part} {phrase}"), None));
        }
    }
    out
}

/// Relative-frequency scorer written from scratch: lowercase, keep
/// alphanumerics, whitespace and apostrophes, split on whitespace.
fn oracle_probability(counts: &HashMap<String, u64>, total: u64, target: &str) -> f64 {
    let cleaned: String = target
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || *c == '\'')
        .flat_map(char::to_lowercase)
        .collect();
    let mut p = 1.0;
    for tok in cleaned.split_whitespace().filter(|t| t.chars().any(|c| c != '\'')) {
        p *= *counts.get(tok).unwrap_or(&0) as f64 / total as f64;
    }
    p
}

fn criterion_2() -> Outcome {
    let parts = ["hand", "foot", "arm", "head", "leg", "body", "finger"];
    let mut total_props = 0;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_states = rng.random_range(1..=50);
        let n_nouns = rng.random_range(0..=200);
        let vocab: Vec<String> = (0..120).map(|i| format!("w{i}")).collect();
        let mut states = Vec::new();
        for i in 0..n_states {
            let part = parts[rng.random_range(0..parts.len())].to_owned();
            let phrase = format!("s{i} {}", vocab[rng.random_range(0..vocab.len())]);
            states.push((part, phrase, rng.random_bool(0.7)));
        }
        let mut nouns: Vec<String> = (0..n_nouns)
            .map(|i| {
                let head = &vocab[rng.random_range(0..vocab.len())];
                if rng.random_bool(0.3) {
                    format!("{head} {}", vocab[rng.random_range(0..vocab.len())])
                } else if i % 2 == 0 {
                    head.clone()
                } else {
                    format!("n{i}")
                }
            })
            .collect();
        let mut seen = BTreeSet::new();
        nouns.retain(|n| seen.insert(n.clone()));
        nouns.shuffle(&mut rng);

        let lib_states: Vec<BodyPartState> = states
            .iter()
            .map(|(p, s, t)| BodyPartState::new(p, s, *t).unwrap())
            .collect();
        let lib_nouns: Vec<ObjectNoun> = nouns.iter().map(|n| ObjectNoun::new(n).unwrap()).collect();
        let got = generate_template_proposals(&lib_states, &lib_nouns).unwrap();
        let want = oracle_templates(&states, &nouns);
        let got_pairs: Vec<(String, Option<String>)> =
            got.iter().map(|p| (p.text.clone(), p.masked_text.clone())).collect();
        ensure(got_pairs == want, || format!("seed {seed}: template output differs from enumeration"))?;
        total_props += got.len();

        let corpus: Vec<&str> = (0..2000).map(|_| vocab[rng.random_range(0..vocab.len() / 2)].as_str()).collect();
        let text = corpus.join(" ");
        let mut counts = HashMap::new();
        for w in &corpus {
            *counts.entry(w.to_string()).or_insert(0u64) += 1;
        }
        let scorer = UnigramScorer::from_corpus(&text);
        let probs: Vec<Option<f64>> = want
            .iter()
            .map(|(text, masked)| {
                masked.as_ref().map(|m| {
                    let prefix = m.strip_suffix("[MASK]").unwrap();
                    oracle_probability(&counts, corpus.len() as u64, text.strip_prefix(prefix).unwrap())
                })
            })
            .collect();
        // thresholds include exact observed probabilities to exercise ties
        let mut lambdas = vec![0.0, 1e-4, 1e-2, 0.5, 1.0];
        lambdas.extend(probs.iter().flatten().take(5).copied());
        lambdas.sort_by(f64::total_cmp);
        let mut previous: Option<BTreeSet<String>> = None;
        for &lambda in &lambdas {
            let kept = filter_proposals(&got, &scorer, FilterThreshold::new(lambda).unwrap()).unwrap();
            let kept_texts: Vec<String> = kept.iter().map(|p| p.text.clone()).collect();
            let oracle: Vec<String> = want
                .iter()
                .zip(&probs)
                .filter(|(_, p)| p.is_none_or(|p| p >= lambda))
                .map(|((t, _), _)| t.clone())
                .collect();
            ensure(kept_texts == oracle, || format!("seed {seed}, lambda {lambda}: filter differs from oracle"))?;
            let set: BTreeSet<String> = kept_texts.into_iter().collect();
            if let Some(prev) = &previous {
                ensure(set.is_subset(prev), || format!("seed {seed}: raising lambda to {lambda} added proposals"))?;
            }
            previous = Some(set);
        }
    }
    Ok(format!("30 corpora, {total_props} template proposals, filter and monotonicity exact"))
}

/// Hand-written BIO decoder: a span opens on B, or on an I that does not
/// continue an open span of the same type (a repair); anything else closes.
fn oracle_bio(labels: &[&str]) -> (Vec<(usize, usize, &'static str)>, Vec<usize>) {
    let mut spans = Vec::new();
    let mut repairs = Vec::new();
    let mut cur: Option<(usize, &'static str)> = None;
    for (i, l) in labels.iter().enumerate() {
        let (kind, ty) = match *l {
            "O" => ('O', ""),
            "B-INST" => ('B', "inst"),
            "I-INST" => ('I', "inst"),
            "B-PART" => ('B', "part"),
            _ => ('I', "part"),
        };
        let continues = kind == 'I' && matches!(cur, Some((_, t)) if t == ty);
        if continues {
            continue;
        }
        if let Some((s, t)) = cur.take() {
            spans.push((s, i, t));
        }
        if kind == 'I' {
            repairs.push(i);
        }
        if kind != 'O' {
            cur = Some((i, if ty == "inst" { "inst" } else { "part" }));
        }
    }
    if let Some((s, t)) = cur {
        spans.push((s, labels.len(), t));
    }
    (spans, repairs)
}

fn criterion_3() -> Outcome {
    let names = ["O", "B-INST", "I-INST", "B-PART", "I-PART"];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut repaired = 0;
    for case in 0..200 {
        let len = rng.random_range(0..=30);
        let tags: Vec<&str> = (0..len).map(|_| names[rng.random_range(0..5)]).collect();
        let tokens: Vec<String> = (0..len).map(|i| format!("t{i}")).collect();
        let labels: Vec<BioLabel> = tags.iter().map(|t| BioLabel::parse(t).unwrap()).collect();
        let got = decode_bio(&labels, &tokens).unwrap();
        let (want, want_repairs) = oracle_bio(&tags);
        let got_spans: Vec<(usize, usize, &str)> = got
            .spans
            .iter()
            .map(|s| (s.start, s.end, if s.level == Level::Instance { "inst" } else { "part" }))
            .collect();
        ensure(got_spans == want, || format!("case {case} {tags:?}: spans {got_spans:?} vs {want:?}"))?;
        ensure(got.repairs == want_repairs, || format!("case {case}: repairs differ"))?;
        for s in &got.spans {
            ensure(s.text == tokens[s.start..s.end].join(" "), || format!("case {case}: span text"))?;
        }
        repaired += usize::from(!want_repairs.is_empty());
        let again = decode_bio(&encode_spans(&got.spans, len), &tokens).unwrap();
        ensure(again.repairs.is_empty(), || format!("case {case}: round trip repaired"))?;
        ensure(again.spans == got.spans, || format!("case {case}: round trip changed spans"))?;
    }
    ensure(repaired > 20, || format!("only {repaired} repair cases generated"))?;
    Ok(format!("200 sequences ({repaired} with repairs), round trip clean"))
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache = SemanticsCache::open(dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..50 {
        let (n, m) = (rng.random_range(1..20), rng.random_range(1..70));
        let data: Vec<f32> = (0..n * m).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        let hash: [u8; 32] = rng.random();
        let seed: u64 = rng.random();
        let mat = SemanticsMatrix::new(n, m, data.clone(), hash, "toy-fnv1a-d256", seed).unwrap();
        let key = CacheKey::new(&format!("video{i}"), hash, "toy-fnv1a-d256", seed).unwrap();
        cache.put(&key, &mat).unwrap();
        let back = cache.get(&key).unwrap().ok_or("missing entry")?;
        let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(back.data()) == bits(&data), || format!("matrix {i} changed"))?;
        ensure(back == mat, || format!("matrix {i} metadata changed"))?;
    }

    let hash = [7u8; 32];
    let mat = SemanticsMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], hash, "toy", 1).unwrap();
    let key = CacheKey::new("fixture", hash, "toy", 1).unwrap();
    let path = cache.put(&key, &mat).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let is_integrity = |r: Result<Option<SemanticsMatrix>, Error>| matches!(r, Err(Error::Integrity { .. }));

    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    ensure(is_integrity(cache.get(&key)), || "truncated file accepted".into())?;
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x01;
    std::fs::write(&path, &flipped).unwrap();
    ensure(is_integrity(cache.get(&key)), || "checksum mismatch accepted".into())?;
    // a valid file whose stored KB hash differs from its key
    let other = SemanticsMatrix::new(2, 3, vec![0.0; 6], [8u8; 32], "toy", 1).unwrap();
    std::fs::write(&path, other.encode()).unwrap();
    ensure(is_integrity(cache.get(&key)), || "KB hash mismatch accepted".into())?;

    let ds = order_coded(&OrderCodedSpec {
        base_classes: 2,
        videos_per_class: 3,
        ..Default::default()
    })
    .unwrap();
    let (states, nouns) = order_coded_corpus();
    let kb = build_kb([generate_template_proposals(&states, &nouns).unwrap().as_slice()]);
    let enc = ToyEncoder::default();
    let root = dir.path().join("store");
    let writer = SemanticsStore::new(
        Some(SemanticsCache::open(&root).unwrap()),
        SemanticsExtractor::new(&kb, &enc, MatchConfig::default()).unwrap(),
    );
    let fresh = SemanticsStore::new(None, SemanticsExtractor::new(&kb, &enc, MatchConfig::default()).unwrap());
    let reader = SemanticsStore::cache_only(SemanticsCache::open(&root).unwrap(), *kb.content_hash(), &enc.id());
    for v in ds.manifest.videos() {
        writer.dense(v).unwrap();
        let cached = reader.dense(v).unwrap();
        let computed = fresh.dense(v).unwrap();
        ensure(cached.encode() == computed.encode(), || format!("{}: cache differs from recompute", v.video_id))?;
    }
    Ok(format!(
        "50 round trips bit-exact, 3 corruptions rejected, {} videos recompute == cache",
        ds.manifest.len()
    ))
}

struct AblationResult {
    full: f64,
    linear: f64,
    zeroshot: f64,
    seconds: f64,
}

fn run_ablation() -> AblationResult {
    let start = Instant::now();
    let ds = order_coded(&OrderCodedSpec {
        base_classes: 65,
        ..Default::default()
    })
    .unwrap();
    let (states, nouns) = order_coded_corpus();
    let kb = build_kb([generate_template_proposals(&states, &nouns).unwrap().as_slice()]);
    assert_eq!(kb.len(), 60);
    let enc = ToyEncoder::default();
    let store = SemanticsStore::new(None, SemanticsExtractor::new(&kb, &enc, MatchConfig::default()).unwrap());
    let base = ds.base().unwrap();
    let test = ds.test().unwrap();
    assert_eq!(test.classes().len(), 5);
    assert!(test.classes().iter().all(|c| test.videos_of(c).len() == 40));
    let data = VideoSequences::new(&base, &store, 16);
    data.warm().unwrap();
    let protocol = EvalProtocol {
        tasks: 100,
        ..Default::default()
    };
    let mut acc = Vec::new();
    for variant in [Variant::Full, Variant::Linear] {
        let cfg = TmnConfig {
            input_dim: kb.len(),
            hidden_dim: 32,
            classes: base.classes().len(),
            variant,
            ..Default::default()
        };
        let mut model = TmnModel::new(cfg, 17).unwrap();
        let schedule = BaseSchedule {
            lr: 0.01,
            ..Default::default()
        };
        train_base(&mut model, &data, &schedule, 17).unwrap();
        let learner = TmnLearner {
            model: &model,
            store: &store,
            schedule: EpisodeSchedule::default(),
            segments: 16,
            samplings: 10,
            resample_support: false,
        };
        acc.push(evaluate(&learner, &test, protocol).unwrap().mean_accuracy);
    }
    let zs = ZeroShotLearner {
        encoder: &enc,
        cfg: MatchConfig::default(),
        segments: 16,
        samplings: 10,
    };
    let zeroshot = evaluate(&zs, &test, protocol).unwrap().mean_accuracy;
    AblationResult {
        full: acc[0],
        linear: acc[1],
        zeroshot,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_5(r: &AblationResult) -> Outcome {
    let detail = format!(
        "full {:.1}%, w/o TMN {:.1}%, gap {:.1} points, {:.0}s single-threaded",
        100.0 * r.full,
        100.0 * r.linear,
        100.0 * (r.full - r.linear),
        r.seconds
    );
    ensure(r.full >= 0.90, || format!("full below 90%: {detail}"))?;
    ensure(r.linear <= 0.35, || format!("linear above 35%: {detail}"))?;
    ensure(r.full - r.linear >= 0.40, || format!("gap below 40 points: {detail}"))?;
    ensure(r.seconds < 600.0, || format!("over 10 minutes: {detail}"))?;
    Ok(detail)
}

fn criterion_6(order: &AblationResult) -> Outcome {
    let enc = ToyEncoder::default();
    let ds = named_token(&NamedTokenSpec::default(), &enc).unwrap();
    let test = ds.test().unwrap();
    let zs = ZeroShotLearner {
        encoder: &enc,
        cfg: MatchConfig::default(),
        segments: 16,
        samplings: 10,
    };
    let named = evaluate(
        &zs,
        &test,
        EvalProtocol {
            tasks: 50,
            ..Default::default()
        },
    )
    .unwrap()
    .mean_accuracy;
    let detail = format!(
        "named-token {:.1}% over 50 tasks, order-coded {:.1}%",
        100.0 * named,
        100.0 * order.zeroshot
    );
    ensure(named == 1.0, || format!("named-token below 100%: {detail}"))?;
    ensure(order.zeroshot <= 0.30, || format!("order-coded above chance + 10: {detail}"))?;
    Ok(detail)
}

fn kprompt(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_kprompt"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("kprompt {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    kprompt(dir, &["synth", "order", "--base-classes", "10", "--videos-per-class", "12", "--out", "."])?;
    kprompt(dir, &["--config", "config.toml", "kb", "build"])?;
    kprompt(dir, &["--config", "config.toml", "semantics", "extract"])?;
    kprompt(dir, &["--config", "config.toml", "train", "--epochs", "3", "--out", "model.ckpt"])?;
    let mut reports = Vec::new();
    for name in ["a.json", "b.json"] {
        kprompt(
            dir,
            &[
                "--config", "config.toml", "eval", "--ckpt", "model.ckpt", "--seed", "17", "--tasks", "100", "--report",
                name,
            ],
        )?;
        reports.push(std::fs::read(dir.join(name)).map_err(|e| e.to_string())?);
    }
    ensure(reports[0] == reports[1], || "reports differ between runs".into())?;

    // 2 classes x 2 videos, 2-way 1-shot 1-query: 8 equally likely episodes
    let videos = (0..4)
        .map(|i| {
            kprompt::fewshot::VideoRecord::in_memory(
                &format!("v{i}"),
                &format!("c{}", i / 2),
                vec![kprompt::encoder::FrameContent::tokens(&["x"])],
            )
            .unwrap()
        })
        .collect();
    let m = Manifest::new(videos).unwrap();
    let mut counts: HashMap<(String, usize, usize), u64> = HashMap::new();
    let n = 10_000u64;
    for seed in 0..n {
        let e = sample_episode(&m, 2, 1, 1, seed).unwrap();
        *counts
            .entry((e.classes[0].clone(), e.support[0].video, e.support[1].video))
            .or_default() += 1;
    }
    ensure(counts.len() == 8, || format!("{} distinct episodes, expected 8", counts.len()))?;
    let expected = n as f64 / 8.0;
    let sigma = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    ensure(
        counts.values().all(|&c| (c as f64 - expected).abs() <= 3.0 * sigma),
        || format!("episode counts outside 3 sigma: {counts:?}"),
    )?;
    // 7 degrees of freedom at p = 0.001
    ensure(chi2 < 24.32, || format!("chi-square {chi2:.2}"))?;
    Ok(format!(
        "two eval runs byte-identical ({} bytes), episode chi-square {chi2:.2} (7 dof)",
        reports[0].len()
    ))
}

fn scalar(v: f64) -> Param {
    Param::new("theta", arr1(&[v]).into_dyn())
}

/// `f(theta) = a/2 (theta - c)^2`.
fn quad_grad(a: f64, c: f64, theta: f64) -> f64 {
    a * (theta - c)
}

fn criterion_8() -> Outcome {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-10;
    // hand-computed: theta0 = 1, a = 1, c = 0, lr = 0.1, momentum 0.9
    let hand_sgd = [0.9, 0.72, 0.486, 0.2268, -0.02916];
    let mut p = scalar(1.0);
    let mut opt = SgdMomentum::new(0.1, 0.9, 0.0);
    for (step, want) in hand_sgd.iter().enumerate() {
        let theta = p.value[[0]];
        p.grad[[0]] = quad_grad(1.0, 0.0, theta);
        opt.step(&mut [&mut p]).unwrap();
        ensure(close(p.value[[0]], *want), || format!("SGD hand step {}: {} vs {want}", step + 1, p.value[[0]]))?;
    }
    // hand-computed first Adam step: m_hat = g, v_hat = g^2
    let mut p = scalar(1.0);
    let mut adam = Adam::new(0.1, 0.9, 0.999);
    p.grad[[0]] = 2.0;
    adam.step(&mut [&mut p]).unwrap();
    let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
    ensure(close(p.value[[0]], want), || format!("Adam hand step: {} vs {want}", p.value[[0]]))?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..20 {
        let a = rng.random_range(0.1..5.0);
        let c = rng.random_range(-2.0..2.0);
        let theta0 = rng.random_range(-3.0..3.0);
        let lr = rng.random_range(0.001..0.2);
        let mu = rng.random_range(0.0..0.99);
        let wd = if case % 2 == 0 { 0.0 } else { rng.random_range(0.0..0.1) };

        let mut p = scalar(theta0);
        let mut opt = SgdMomentum::new(lr, mu, wd);
        let (mut theta, mut v) = (theta0, 0.0);
        for step in 1..=5 {
            p.grad[[0]] = quad_grad(a, c, p.value[[0]]);
            opt.step(&mut [&mut p]).unwrap();
            v = mu * v + (quad_grad(a, c, theta) + wd * theta);
            theta -= lr * v;
            ensure(close(p.value[[0]], theta), || format!("SGD case {case} step {step}"))?;
        }

        let (b1, b2) = (rng.random_range(0.0..0.95), rng.random_range(0.9..0.9999));
        let mut p = scalar(theta0);
        let mut opt = Adam::new(lr, b1, b2);
        let (mut theta, mut m, mut s) = (theta0, 0.0, 0.0);
        for step in 1..=5 {
            p.grad[[0]] = quad_grad(a, c, p.value[[0]]);
            opt.step(&mut [&mut p]).unwrap();
            let g = quad_grad(a, c, theta);
            m = b1 * m + (1.0 - b1) * g;
            s = b2 * s + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(step));
            let s_hat = s / (1.0 - b2.powi(step));
            theta -= lr * m_hat / (s_hat.sqrt() + 1e-8);
            ensure(close(p.value[[0]], theta), || format!("Adam case {case} step {step}"))?;
        }
    }
    Ok("SGD-momentum and Adam match hand values and 20 closed-form trajectories to 1e-10".into())
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(msg)
    });
    match result {
        Ok(detail) => {
            println!("criterion {name}: PASS  {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {name}: FAIL  {detail}");
            false
        }
    }
}

fn main() {
    let ablation = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(|| catch_unwind(run_ablation));
    let mut ok = true;
    ok &= run("1 (gradient suite)", criterion_1);
    ok &= run("2 (KB oracles)", criterion_2);
    ok &= run("3 (BIO decode)", criterion_3);
    ok &= run("4 (semantics cache)", criterion_4);
    match &ablation {
        Ok(r) => {
            ok &= run("5 (ablation)", || criterion_5(r));
            ok &= run("6 (zero-shot)", || criterion_6(r));
        }
        Err(_) => {
            ok &= run("5 (ablation)", || Err("ablation run panicked".into()));
            ok &= run("6 (zero-shot)", || Err("ablation run panicked".into()));
        }
    }
    ok &= run("7 (determinism)", criterion_7);
    ok &= run("8 (optimizers)", criterion_8);
    if !ok {
        std::process::exit(1);
    }
}
