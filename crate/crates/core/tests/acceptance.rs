//! Acceptance suite. Runs every criterion against the stub backend and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.

#[path = "support/bleu_oracle.rs"]
mod bleu_oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use komt::backend::{Backend, FinetuneExample, StubBackend};
use komt::corpus::{build_corpus, cap_indices, normalize_text, CorpusConfig, LeakageFilter, ResolvedConfig};
use komt::denoise::{make_training_example, pack_demonstrations, sample_mask, TokenBudget, MAX_DEMO_CANDIDATES};
use komt::metrics::self_bleu;
use komt::pipeline::data::read_train_data;
use komt::pipeline::{
    consistency_filter, record_placeholder_rewrite, run_pipeline, shipped, PromptLogEntry, RunOptions, StageMode,
    SyntheticInstance, TaskPipeline, SHIPPED,
};
use komt::record::{parse_rendered, render_record, substitute_targets, KeyValueRecord, TaskSchema};
use komt::seed::{self, derive_rng};
use komt::seqlabel::{
    align_entities, check_bio, conll, iterate_selftrain, parse_entity_output, tokenize, EntityMention, LabelSet,
    SelfTrainConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

// ---------------------------------------------------------------- masking

fn mask_uniformity() -> Outcome {
    const DRAWS: usize = 100_000;
    let start = Instant::now();
    let mut notes = Vec::new();
    for n in [2usize, 3, 5, 8] {
        let mut rng = seed::rng(1000 + n as u64);
        let mut counts = vec![0usize; n + 1];
        for _ in 0..DRAWS {
            let plan = sample_mask(n, &mut rng).map_err(|e| e.to_string())?;
            ensure(plan.indices.len() == plan.k && plan.indices.iter().all(|&i| i < n), || {
                format!("n={n}: bad plan {plan:?}")
            })?;
            counts[plan.k] += 1;
        }
        let expected = DRAWS as f64 / n as f64;
        let mut chi2 = 0.0;
        let mut worst = 0.0f64;
        for &c in &counts[1..] {
            worst = worst.max((c as f64 / DRAWS as f64 - 1.0 / n as f64).abs());
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        let p = ChiSquared::new((n - 1) as f64).unwrap().sf(chi2);
        ensure(worst <= 0.01, || format!("n={n}: max |P(K=k) - 1/n| = {worst:.4}"))?;
        ensure(p > 0.001, || format!("n={n}: chi-square p = {p:.2e}"))?;
        notes.push(format!("n={n} dev={worst:.4} p={p:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} ({secs:.2}s)", notes.join(", ")))
}

// ------------------------------------------------------------ fuzz helpers

const WORDS: &[&str] = &[
    "the", "a", "river", "bank", "Paris", "said", "of", "42", "over", "quick", "fox", "*", "@placeholder", "don't",
    "e.g.", "U.S.", "(note)", "[ref]", "x-ray", "<tag>", ";", "well,", "yes!", "no?", "Mr.", "café",
];

fn fuzz_value(rng: &mut impl Rng, max_words: usize) -> String {
    let n = rng.gen_range(0..=max_words);
    let mut words: Vec<String> = (0..n).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    if rng.gen_bool(0.1) {
        words.push(String::new());
    }
    words.join(if rng.gen_bool(0.9) { " " } else { "  " })
}

fn fuzz_schema(rng: &mut impl Rng) -> TaskSchema {
    const KEYS: &[&str] = &[
        "Premise", "Hypothesis", "Question", "Answer", "Text", "Entity Labels", "Output Tags", "Sentence", "Word",
        "Passage", "Query", "Label",
    ];
    let n = rng.gen_range(1..=6);
    let keys: Vec<&str> = KEYS.choose_multiple(rng, n).copied().collect();
    let output = rng.gen_bool(0.7).then(|| *keys.choose(rng).unwrap());
    let task = format!("task{}", rng.gen_range(0..1000));
    TaskSchema::new(task, &keys, output)
}

fn fuzz_record(rng: &mut impl Rng, schema: &TaskSchema, max_words: usize) -> KeyValueRecord {
    loop {
        let values: Vec<String> = schema.keys.iter().map(|_| fuzz_value(rng, max_words)).collect();
        let pairs: Vec<(&str, &str)> =
            schema.keys.iter().map(String::as_str).zip(values.iter().map(String::as_str)).collect();
        if let Ok(r) = schema.record(&pairs) {
            return r;
        }
    }
}

fn random_mask(rng: &mut impl Rng, n: usize) -> BTreeSet<usize> {
    (0..n).filter(|_| rng.gen_bool(0.5)).collect()
}

// --------------------------------------------------------------- round trip

fn render_round_trip() -> Outcome {
    let mut rng = seed::rng(2024);
    let mut masked_total = 0;
    for case in 0..1000 {
        let schema = fuzz_schema(&mut rng);
        let record = fuzz_record(&mut rng, &schema, 12);
        let demos: Vec<KeyValueRecord> =
            (0..rng.gen_range(0..=3)).map(|_| fuzz_record(&mut rng, &schema, 8)).collect();
        let mask = random_mask(&mut rng, schema.keys.len());
        masked_total += mask.len();
        let pair = render_record(&schema, &record, &mask, &demos).map_err(|e| format!("case {case}: {e}"))?;
        let parsed = parse_rendered(&pair.input_text, &schema).map_err(|e| format!("case {case}: {e}"))?;
        ensure(parsed.demo_count() == demos.len() && parsed.demonstrations == demos, || {
            format!("case {case}: demonstrations differ in {:?}", pair.input_text)
        })?;
        ensure(parsed.record.len() == record.len(), || format!("case {case}: pair count"))?;
        for (i, (got, want)) in parsed.record.pairs().iter().zip(record.pairs()).enumerate() {
            ensure(got.key == want.key, || format!("case {case}: key {i}"))?;
            ensure(got.value.masked == mask.contains(&i), || format!("case {case}: mask {i}"))?;
            if !got.value.masked {
                ensure(got.value.text.as_bytes() == want.value.text.as_bytes(), || {
                    format!("case {case}: value {:?} != {:?}", got.value.text, want.value.text)
                })?;
            }
        }
        let filled = substitute_targets(&schema, &pair, &pair.target_text).map_err(|e| format!("case {case}: {e}"))?;
        ensure(filled == record, || format!("case {case}: target substitution"))?;
    }
    Ok(format!("1000/1000 records recovered ({masked_total} masked values)"))
}

// ------------------------------------------------------------ packing budget

fn demonstration_budget() -> Outcome {
    let mut rng = seed::rng(77);
    let (mut packed, mut truncated, mut max_selected) = (0, 0, 0);
    for case in 0..10_000 {
        let schema = fuzz_schema(&mut rng);
        let record = fuzz_record(&mut rng, &schema, 20);
        let pool: Vec<KeyValueRecord> =
            (0..rng.gen_range(0..=20)).map(|_| fuzz_record(&mut rng, &schema, 20)).collect();
        let budget = TokenBudget::new(rng.gen_range(8..=400)).unwrap();
        let limit = budget.max_tokens();

        let mut mask = random_mask(&mut rng, schema.keys.len());
        if mask.is_empty() {
            mask.insert(0);
        }
        let base = render_record(&schema, &record, &mask, &[]).map_err(|e| e.to_string())?;
        let base_tokens = budget.count(&base.input_text);
        let candidates: Vec<KeyValueRecord> = pool.iter().take(MAX_DEMO_CANDIDATES).cloned().collect();
        let plan = pack_demonstrations(&schema, &candidates, base_tokens, &budget, &mut rng).map_err(|e| e.to_string())?;
        let (l, m) = (plan.selected, plan.max_fit);
        ensure(l <= m && m <= plan.candidates.len() && plan.candidates.len() <= MAX_DEMO_CANDIDATES, || {
            format!("case {case}: L={l} m={m} candidates={}", plan.candidates.len())
        })?;
        // actual rendered size of every prefix: fits(j) must imply fits(j - 1)
        let sizes: Vec<usize> = (0..=plan.candidates.len())
            .map(|j| {
                render_record(&schema, &record, &mask, &plan.candidates[..j])
                    .map(|p| budget.count(&p.input_text))
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        for j in 1..sizes.len() {
            ensure(!(sizes[j] <= limit && sizes[j - 1] > limit), || format!("case {case}: prefix {j} fits, {} not", j - 1))?;
        }
        if base_tokens <= limit {
            ensure(sizes[l] <= limit, || format!("case {case}: {} tokens > {limit} with L={l}", sizes[l]))?;
            let fit = sizes.iter().take_while(|&&s| s <= limit).count() - 1;
            ensure(fit == m, || format!("case {case}: m={m} but {fit} demonstrations fit"))?;
            packed += 1;
        }

        let pair = make_training_example(&record, &schema, &pool, &budget, &mut rng).map_err(|e| e.to_string())?;
        max_selected = max_selected.max(pair.demo_count);
        ensure(pair.demo_count <= MAX_DEMO_CANDIDATES, || format!("case {case}: {} demos", pair.demo_count))?;
        if pair.truncated {
            truncated += 1;
            ensure(pair.demo_count == 0, || format!("case {case}: truncated pair with demos"))?;
        } else {
            let n = budget.count(&pair.input_text);
            ensure(n <= limit, || format!("case {case}: training example {n} > {limit}"))?;
        }
    }
    Ok(format!(
        "10000 packings, 0 violations ({packed} within budget, {truncated} oversize records, max L {max_selected})"
    ))
}

// ------------------------------------------------------------------ corpus

fn toy(cap: Option<usize>) -> ResolvedConfig {
    let mut c = CorpusConfig::load(&root().join("assets/toy/config.json")).unwrap();
    c.mixture.cap_per_dataset = cap;
    c.raw.mixture.cap_per_dataset = cap;
    c
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect()
}

fn corpus_determinism_and_cap() -> Outcome {
    const SIZES: [usize; 3] = [15, 120, 400];
    const PLANTED: [&[usize]; 3] = [&[], &[3, 17, 44, 80, 119], &[0, 250, 399]];
    let forbidden: Vec<String> = fs::read_to_string(root().join("assets/toy/eval.jsonl"))
        .unwrap()
        .lines()
        .map(|l| normalize_text(serde_json::from_str::<KeyValueRecord>(l).unwrap().get("Text").unwrap()))
        .collect();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for cap in [Some(10), Some(300), None] {
        let cfg = toy(cap);
        let mut runs = Vec::new();
        for (run, jobs) in [1usize, 1, 4].into_iter().enumerate() {
            let out = tmp.path().join(format!("{cap:?}-{run}"));
            let m = build_corpus(&cfg, &out, jobs).map_err(|e| e.to_string())?;
            runs.push((m, dir_bytes(&out)));
        }
        ensure(runs[0].1 == runs[1].1, || format!("cap {cap:?}: repeated run differs"))?;
        ensure(runs[0].1 == runs[2].1, || format!("cap {cap:?}: jobs 4 differs from jobs 1"))?;
        let (m, files) = &runs[0];
        let mut planted_drawn = 0;
        for (i, s) in m.sources.iter().enumerate() {
            let want = cap.map_or(SIZES[i], |c| c.min(SIZES[i]));
            ensure(s.contributed == want, || format!("cap {cap:?}: {} contributed {} != {want}", s.task, s.contributed))?;
            let drawn = cap_indices(SIZES[i], cap, cfg.mixture.seed, i);
            ensure(drawn.len() == want, || format!("cap {cap:?}: oracle drew {}", drawn.len()))?;
            let hits = drawn.iter().filter(|p| PLANTED[i].contains(p)).count();
            ensure(s.leakage_dropped == hits, || {
                format!("cap {cap:?}: {} dropped {} of {hits} planted", s.task, s.leakage_dropped)
            })?;
            planted_drawn += hits;
        }
        for (name, bytes) in files.iter().filter(|(n, _)| n.starts_with("shard-")) {
            let text = normalize_text(&String::from_utf8_lossy(bytes));
            if let Some(f) = forbidden.iter().find(|f| text.contains(f.as_str())) {
                return Err(format!("cap {cap:?}: {name} still contains {f:?}"));
            }
        }
        notes.push(format!("cap {}: {} pairs, {planted_drawn} planted removed", cap.map_or("inf".into(), |c| c.to_string()), m.total));
    }

    let mut control = toy(None);
    control.leakage = LeakageFilter::new(&[
        "Quartz number 1 drifted past the amber canal near Heron Bay.",
        "Quartz number 2 drifted past the amber canal near Heron Bay.",
    ])
    .map_err(|e| e.to_string())?;
    let m = build_corpus(&control, &tmp.path().join("control"), 2).map_err(|e| e.to_string())?;
    ensure(m.leakage.dropped == 0 && m.total == SIZES.iter().sum::<usize>(), || {
        format!("control set dropped {}", m.leakage.dropped)
    })?;
    notes.push("control: 0 drops".into());
    Ok(notes.join("; "))
}

// --------------------------------------------------------------- pipelines

fn fixture(task: &str) -> PathBuf {
    root().join(format!("tests/fixtures/fewglue/{task}.jsonl"))
}

fn load(task: &str) -> (TaskPipeline, Vec<KeyValueRecord>) {
    let p = shipped(task).unwrap();
    let train = read_train_data(&fixture(task), &p.task).unwrap();
    (p, train)
}

fn marked_spans(text: &str) -> usize {
    let stars = text.matches('*').count();
    if stars % 2 == 1 {
        return usize::MAX;
    }
    text.split('*').skip(1).step_by(2).filter(|s| !s.trim().is_empty()).count()
}

fn pipeline_structure() -> Outcome {
    let mut counts = Vec::new();
    for (task, _) in SHIPPED {
        let (p, train) = load(task);
        let opts = RunOptions {
            n_target: 50,
            seed: 17,
            ..RunOptions::default()
        };
        let out = run_pipeline(&p, &train, &StubBackend::new(1), &opts).map_err(|e| format!("{task}: {e}"))?;
        let complete = out
            .instances
            .iter()
            .filter(|i| p.task.keys.iter().all(|k| i.record.get(k).is_some_and(|v| !v.is_empty())))
            .count();
        ensure(complete >= 50, || format!("{task}: {complete} complete instances"))?;
        if let (Some(vocab), Some(key)) = (&p.task.label_vocab, &p.task.output_key) {
            for inst in &out.instances {
                let label = inst.record.get(key).unwrap();
                ensure(vocab.iter().any(|v| v == label), || format!("{task}: label {label:?} not in vocab"))?;
            }
        }
        if task == "wsc" {
            for inst in &out.instances {
                let premise = inst.record.get("Premise").unwrap();
                ensure(marked_spans(premise) == 2, || format!("wsc: {premise:?}"))?;
            }
        }
        if task == "record" {
            for inst in &out.instances {
                let query = inst.record.get("Query").unwrap();
                ensure(query.matches("@placeholder").count() == 1, || format!("record: {query:?}"))?;
            }
        }
        counts.push(format!("{task}={complete}"));
    }

    let query = "Mr Putin is not allowed to hold talks with the opposition in Chechnya because it would violate the ceasefire, Yuriy Yatsenyuk said.";
    let entities = ["Ukraine", "Vladimir Putin", "Putin", "Chechnya", "Russia", "Kiev", "Shenyang"];
    let r = record_placeholder_rewrite(query, &entities, "@placeholder");
    ensure(r.answer.as_deref() == Some("Chechnya"), || format!("golden answer {:?}", r.answer))?;
    ensure(
        r.query
            == "Mr Putin is not allowed to hold talks with the opposition in @placeholder because it would violate the ceasefire, Yuriy Yatsenyuk said.",
        || format!("golden query {:?}", r.query),
    )?;
    Ok(format!("{}; ReCoRD golden ok; WSC two spans", counts.join(" ")))
}

// ----------------------------------------------------------------- filter

fn consistency_filter_exact() -> Outcome {
    let (p, train) = load("rte");
    let stub = StubBackend::new(4);
    let answer_at = p.task.keys.iter().position(|k| k == "Answer").unwrap();
    let examples: Vec<FinetuneExample> = train
        .iter()
        .map(|r| {
            let pair = render_record(&p.task, r, &[answer_at].into(), &[]).unwrap();
            FinetuneExample {
                input: pair.input_text,
                target: pair.target_text,
            }
        })
        .collect();
    let handle = stub.finetune(&p.classifier.request(examples)).map_err(|e| e.to_string())?;
    let planted: Vec<bool> = (0..50).map(|i| i % 5 < 2).collect();
    let mut instances: Vec<SyntheticInstance> = planted
        .iter()
        .enumerate()
        .map(|(i, &flip)| {
            let mut rec = train[i % train.len()].clone();
            if flip {
                let flipped = if rec.get("Answer") == Some("entailment") { "not_entailment" } else { "entailment" };
                rec.set("Answer", flipped).unwrap();
            }
            SyntheticInstance {
                record: rec,
                provenance: Default::default(),
                filtered: false,
                classifier_label: None,
            }
        })
        .collect();
    let stats = consistency_filter(&mut instances, &p.task, &stub, Some(&handle)).map_err(|e| e.to_string())?;
    stub.release(&handle);
    let flagged: Vec<bool> = instances.iter().map(|i| i.filtered).collect();
    let wrong = flagged.iter().zip(&planted).filter(|(a, b)| a != b).count();
    ensure(wrong == 0, || format!("{wrong} instances misclassified by the filter"))?;
    Ok(format!("{} of {} filtered (planted 40%)", stats.filtered, stats.checked))
}

// --------------------------------------------------------------- seqlabel

const BOSE: &str = "All Fishermen 's Association secretary N.J. Bose said the strike would continue indefinitely.";

fn seqlabel_goldens() -> Outcome {
    let labels = LabelSet::conll();
    let parsed = parse_entity_output("Organization All Fishermen 's Association; Person N.J. Bose.", &labels);
    ensure(
        parsed.mentions
            == vec![
                EntityMention::new("Organization", "All Fishermen 's Association"),
                EntityMention::new("Person", "N.J. Bose"),
            ]
            && parsed.skipped == 0,
        || format!("parsed {parsed:?}"),
    )?;
    let aligned = align_entities(&tokenize(BOSE), &parsed.mentions, &labels).map_err(|e| e.to_string())?;
    let tags = aligned.sentence.tags().join(" ");
    ensure(tags == "B-ORG I-ORG I-ORG I-ORG O B-PER I-PER O O O O O O", || format!("tags {tags}"))?;

    let mut rng = seed::rng(404);
    let vocab = ["John", "Smith", "New", "York", "the", "bank", "of", "Acme", "Corp", "said", "."];
    let names: Vec<&str> = labels.names().collect();
    let mut placed = 0;
    for case in 0..10_000 {
        let tokens: Vec<String> = (0..rng.gen_range(1..=15)).map(|_| vocab.choose(&mut rng).unwrap().to_string()).collect();
        let mentions: Vec<EntityMention> = (0..rng.gen_range(0..=5))
            .map(|_| {
                let start = rng.gen_range(0..tokens.len());
                let end = rng.gen_range(start + 1..=tokens.len().min(start + 3));
                let surface = if rng.gen_bool(0.8) {
                    tokens[start..end].join(" ")
                } else {
                    vocab.choose(&mut rng).unwrap().to_string() + " Zed"
                };
                let label = if rng.gen_bool(0.9) { names.choose(&mut rng).unwrap().to_string() } else { "Animal".into() };
                EntityMention::new(label, surface)
            })
            .collect();
        let a = align_entities(&tokens, &mentions, &labels).map_err(|e| format!("case {case}: {e}"))?;
        check_bio(a.sentence.tags()).map_err(|e| format!("case {case}: {e}"))?;
        ensure(a.sentence.tokens() == tokens.as_slice(), || format!("case {case}: tokens changed"))?;
        let spans = a.sentence.spans().len();
        ensure(spans + a.dropped == mentions.len(), || {
            format!("case {case}: {spans} spans + {} dropped != {}", a.dropped, mentions.len())
        })?;
        placed += spans;
    }

    let seed_data = conll::read_path(&root().join("tests/fixtures/conll/train.txt")).map_err(|e| e.to_string())?;
    let config = SelfTrainConfig {
        rounds: 4,
        n_sentences: 20,
        seed: 9,
        ..SelfTrainConfig::default()
    };
    let state = iterate_selftrain(&seed_data, &StubBackend::new(2), &config).map_err(|e| e.to_string())?;
    ensure(state.failure.is_none() && state.rounds.len() == 4, || {
        format!("{} rounds, failure {:?}", state.rounds.len(), state.failure)
    })?;
    for round in &state.rounds {
        let texts: Vec<String> = round.annotations.iter().map(|s| s.text()).collect();
        ensure(texts == state.sentences, || format!("round {} changed the sentences", round.manifest.round))?;
        ensure(round.manifest.sentences_sha256 == state.rounds[0].manifest.sentences_sha256, || {
            format!("round {} sentence hash", round.manifest.round)
        })?;
    }
    Ok(format!(
        "entity output golden ok; 10000 alignments BIO-valid ({placed} spans); 4 rounds over {} frozen sentences",
        state.sentences.len()
    ))
}

// ------------------------------------------------------------ Self-BLEU

fn self_bleu_oracle() -> Outcome {
    let start = Instant::now();
    let vocab: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
    let mut worst = 0.0f64;
    for corpus in 0..100 {
        let mut rng = derive_rng(31, &[corpus]);
        let samples: Vec<String> = (0..50)
            .map(|_| {
                let len = rng.gen_range(1..=14);
                (0..len).map(|_| vocab.choose(&mut rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let got = self_bleu(&samples, 4).map_err(|e| e.to_string())?;
        let want = bleu_oracle::self_bleu(&samples, 4);
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    let same = vec!["the cat sat on the mat".to_string(); 20];
    let identical = self_bleu(&same, 4).map_err(|e| e.to_string())?;
    ensure((identical - 100.0).abs() < 1e-9, || format!("identical corpus {identical}"))?;
    let disjoint: Vec<String> = (0..20).map(|i| format!("a{i} b{i} c{i} d{i}")).collect();
    let zero = self_bleu(&disjoint, 4).map_err(|e| e.to_string())?;
    ensure(zero == 0.0, || format!("disjoint corpus {zero}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("max |lib - oracle| = {worst:.1e} over 100 corpora; identical=100; disjoint=0 ({secs:.2}s)"))
}

// ---------------------------------------------------------- demo sweep

fn exemplar_sweep() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for task in ["cb", "rte", "boolq"] {
        let p = shipped(task).unwrap();
        for k in 0..=3usize {
            let out = tmp.path().join(format!("{task}-{k}"));
            let status = Command::new(env!("CARGO_BIN_EXE_komt"))
                .args(["augment", "--pipeline", task, "--train"])
                .arg(fixture(task))
                .args(["--n", "4", "--seed", "5", "--log-prompts", "--demo-count", &k.to_string(), "--out"])
                .arg(&out)
                .env_remove("KOMT_BACKEND_URL")
                .output()
                .map_err(|e| e.to_string())?;
            ensure(status.status.success(), || format!("{task} k={k}: {}", String::from_utf8_lossy(&status.stderr)))?;
            let log = fs::read_to_string(out.join("prompts.jsonl")).map_err(|e| e.to_string())?;
            let mut seen = 0;
            for line in log.lines() {
                let entry: PromptLogEntry = serde_json::from_str(line).map_err(|e| e.to_string())?;
                let stage = p.stages.iter().find(|s| s.name == entry.stage).unwrap();
                if stage.mode != StageMode::ZeroShot {
                    continue;
                }
                let parsed = parse_rendered(&entry.prompt, &stage.view(&p.task)).map_err(|e| e.to_string())?;
                ensure(parsed.demo_count() == k, || {
                    format!("{task} k={k}: prompt has {} demonstrations", parsed.demo_count())
                })?;
                seen += 1;
            }
            ensure(seen > 0, || format!("{task} k={k}: no zero-shot prompts logged"))?;
            checked += seen;
        }
    }
    Ok(format!("{checked} zero-shot prompts across cb/rte/boolq, k in 0..=3"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("mask-law uniformity", mask_uniformity),
        ("render/parse round trip", render_round_trip),
        ("demonstration budget", demonstration_budget),
        ("corpus determinism and cap", corpus_determinism_and_cap),
        ("pipeline structural validation", pipeline_structure),
        ("consistency filter", consistency_filter_exact),
        ("sequence-labeling goldens", seqlabel_goldens),
        ("Self-BLEU oracle", self_bleu_oracle),
        ("exemplar sweep plumbing", exemplar_sweep),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{secs:.2}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
