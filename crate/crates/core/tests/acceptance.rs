//! Acceptance checks AC-1 to AC-9, run in order with one PASS/FAIL line
//! each. Arguments that do not start with `-` select checks by name, e.g.
//! `cargo test --test acceptance -- AC-5`.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use chatguard::encoder::{save_params, EncoderParams};
use chatguard::evalharness::{evaluate, regex_baseline, Confusion, Gold, LabeledChat};
use chatguard::fixtures::{
    edit_distance_capped, generate_chats, generate_corpus, variant_space, ChatSpec, Corpus,
    CorpusSpec, ProfaneStyle,
};
use chatguard::latentindex::{HnswParams, LatentIndex};
use chatguard::normalizer::{is_normalized, normalize, NormalizationConfig, Normalizer, RawChat};
use chatguard::pipeline::{
    Detector, Engine, InProcQueue, InboundMessage, Model, OutboundRecord, Service, WireLabel,
};
use chatguard::tokenizer::{merge_suspicious, tokenize, Lexicon, TokenClass, VocabKind, Vocabulary};
use chatguard::trainer::{
    cosine_lr, fit_with_progress, split_dataset, FitOutcome, TrainPlan, ValidationSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, Duration, fn() -> Check); 9] = [
        ("AC-1", Duration::from_secs(5), ac1_normalization),
        ("AC-2", Duration::from_secs(5), ac2_merge),
        ("AC-3", Duration::from_secs(120), ac3_gradients),
        ("AC-4", Duration::from_secs(30 * 60), ac4_contrastive_matching),
        ("AC-5", Duration::from_secs(120), ac5_hnsw),
        ("AC-6", Duration::MAX, ac6_dynamic_vocabulary),
        ("AC-7", Duration::MAX, ac7_training_discipline),
        ("AC-8", Duration::MAX, ac8_metrics),
        ("AC-9", Duration::MAX, ac9_service),
    ];
    let mut failed = 0;
    for (name, limit, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("{name} PASS ({elapsed:.1?}) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{name} FAIL ({elapsed:.1?}) {detail}");
            }
        }
        let _ = std::io::stdout().flush();
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ac1_normalization() -> Check {
    let cfg = NormalizationConfig::default();
    let n = |s: &str| normalize(&RawChat::new("", s), &cfg);
    for (input, want) in [
        ("cla$$", "class"),
        ("cooooool", "cool"),
        ("f!!k", "f*k"),
        ("Visit http://x.yz NOW 123", "visit now"),
    ] {
        ensure(n(input) == want, || format!("{input:?} gave {:?}, want {want:?}", n(input)))?;
    }
    for (input, want) in [("class", true), ("Class", false), ("a  b", false)] {
        ensure(is_normalized(input) == want, || format!("is_normalized({input:?}) != {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xac1);
    let in_domain = |c: char| c.is_ascii_lowercase() || matches!(c, ' ' | '*' | '-');
    for _ in 0..10_000 {
        let s = common::random_unicode(&mut rng);
        let once = n(&s);
        ensure(n(&once) == once, || format!("not idempotent on {s:?}: {once:?}"))?;
        ensure(once.chars().all(in_domain), || format!("{s:?} gave out-of-alphabet {once:?}"))?;
        let longest = longest_run(&once);
        ensure(longest <= cfg.repeat_cap, || format!("{once:?} has a run of {longest}"))?;
    }
    Ok("4 examples, 3 fixed-point checks, 10000 random strings".into())
}

fn longest_run(s: &str) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev = None;
    for c in s.chars() {
        run = if Some(c) == prev { run + 1 } else { 1 };
        best = best.max(run);
        prev = Some(c);
    }
    best
}

fn merged(text: &str, lexicon: &Lexicon) -> Vec<(String, TokenClass)> {
    merge_suspicious(tokenize(text, lexicon), lexicon)
        .into_iter()
        .map(|t| (t.text, t.class))
        .collect()
}

fn ac2_merge() -> Check {
    let abuse = Lexicon::new(
        vec![],
        Vocabulary::from_entries(VocabKind::Profane, ["abuse"]).unwrap(),
    )
    .unwrap();
    let got = merged("a b u s e", &abuse);
    ensure(got == [("abuse".to_string(), TokenClass::ProfaneDirect)], || {
        format!("\"a b u s e\" gave {got:?}")
    })?;

    let corpus = generate_corpus(&CorpusSpec::default()).map_err(|e| e.to_string())?;
    let lexicon = fixture_lexicon(&corpus);
    for key in &corpus.profane {
        let spaced = key.chars().map(String::from).collect::<Vec<_>>().join(" ");
        let got = merged(&spaced, &lexicon);
        ensure(got == [(key.clone(), TokenClass::ProfaneDirect)], || {
            format!("{spaced:?} gave {got:?}")
        })?;
    }
    Ok(format!("{} spaced keys recovered", corpus.profane.len()))
}

fn ac3_gradients() -> Check {
    let enc = common::encoder_gradcheck(1);
    ensure(enc.passed(), || format!("encoder: {enc:?}"))?;
    let loss = common::ntxent_gradcheck(2);
    ensure(loss.passed(), || format!("nt-xent: {loss:?}"))?;
    let (got, want) = common::two_pair_loss();
    ensure((got - want).abs() < 1e-6, || format!("two-pair loss {got}, want {want}"))?;
    Ok(format!(
        "{} encoder and {} loss gradients; worst error {:.2} and {:.2} of tolerance; two-pair loss {got:.6}",
        enc.checked, loss.checked, enc.worst_excess, loss.worst_excess
    ))
}

/// The corpus, the trained encoder and the wall time of training, shared by
/// every check that needs a trained model.
struct Trained {
    corpus: Corpus,
    outcome: FitOutcome,
    elapsed: Duration,
}

fn fixture_lexicon(corpus: &Corpus) -> Lexicon {
    Lexicon::new(
        vec![Vocabulary::from_entries(VocabKind::SafePlatform, corpus.safe.iter()).unwrap()],
        Vocabulary::from_entries(VocabKind::Profane, corpus.profane.iter()).unwrap(),
    )
    .unwrap()
}

fn trained() -> Result<&'static Trained, String> {
    static MODEL: OnceLock<Result<Trained, String>> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let corpus = generate_corpus(&CorpusSpec::default()).map_err(|e| e.to_string())?;
            let plan = TrainPlan::desk();
            let start = Instant::now();
            let outcome = fit_with_progress(&corpus.all_tokens(), &plan.encoder, &plan.train, |r| {
                if r.epoch % 100 == 0 {
                    eprintln!("  epoch {}: train {:.4} valid {:.4}", r.epoch, r.train_loss, r.val_loss);
                }
            })
            .map_err(|e| e.to_string())?;
            Ok(Trained {
                corpus,
                outcome,
                elapsed: start.elapsed(),
            })
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn trained_engine(t: &Trained) -> Engine {
    let params = Arc::new(t.outcome.params.clone());
    let model = Model::build(params, t.corpus.profane.iter().map(String::as_str), HnswParams::default())
        .unwrap();
    Engine::new(Normalizer::default(), fixture_lexicon(&t.corpus), Some(model), 0.8, 500).unwrap()
}

fn ac4_contrastive_matching() -> Check {
    let t = trained()?;
    let plan = TrainPlan::desk();
    ensure(t.corpus.safe.len() == 450 && t.corpus.profane.len() == 50, || "corpus size".into())?;
    ensure(plan.train.batch_size == 256 && plan.train.epochs <= 1000, || "plan".into())?;
    ensure(t.elapsed <= Duration::from_secs(30 * 60), || format!("training took {:?}", t.elapsed))?;
    let q = common::match_quality(&t.outcome.params, &t.corpus, 0.8);
    let detail = format!(
        "{} epochs in {:.0?}; {} variants: recall {:.3}, attribution {:.3}; safe false-match rate {:.3}",
        plan.train.epochs,
        t.elapsed,
        q.variants,
        q.recall(),
        q.attribution(),
        q.false_match_rate()
    );
    ensure(q.recall() >= 0.85 && q.attribution() >= 0.95 && q.false_match_rate() <= 0.05, || detail.clone())?;
    Ok(detail)
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn ac5_hnsw() -> Check {
    let dim = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(0xac5);

    let mut checked = LatentIndex::new(dim, HnswParams::default()).map_err(|e| e.to_string())?;
    for i in 0..10_000 {
        checked.insert(&format!("k{i}"), &unit_vector(&mut rng, dim)).map_err(|e| e.to_string())?;
        checked
            .check_integrity()
            .map_err(|e| format!("integrity after insert {i}: {e}"))?;
    }

    let params = HnswParams {
        ef_search: 64,
        ..HnswParams::with_m(48)
    };
    let mut index = LatentIndex::new(dim, params).map_err(|e| e.to_string())?;
    for i in 0..10_000 {
        index.insert(&format!("k{i}"), &unit_vector(&mut rng, dim)).map_err(|e| e.to_string())?;
    }
    index.check_integrity()?;
    let mut agree = 0;
    for _ in 0..1000 {
        let q = unit_vector(&mut rng, dim);
        let approx = index.search(&q, 1).map_err(|e| e.to_string())?;
        let exact = index.exact_search(&q, 1).map_err(|e| e.to_string())?;
        if approx[0].key == exact[0].key {
            agree += 1;
        }
    }
    let recall = agree as f64 / 1000.0;
    let detail = format!("integrity held after each of 10000 inserts (M=16); recall@1 {recall:.3} (M=48, ef_search=64)");
    ensure(recall >= 0.95, || detail.clone())?;
    Ok(detail)
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chatguard"))
}

fn run_cli(args: &[&str], config: &Path, stdin: &str) -> Result<String, String> {
    let mut child = cli()
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("RUST_LOG")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).map_err(|e| e.to_string())?;
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(String::from_utf8(out.stdout).unwrap())
}

fn write_lines(path: &Path, lines: &[String]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

/// A key at least three edits from, and sharing no prefix relation with,
/// every corpus token.
fn fresh_key(corpus: &Corpus) -> String {
    let all = corpus.all_tokens();
    let pool = generate_corpus(&CorpusSpec {
        seed: 99,
        len_range: (6, 10),
        ..CorpusSpec::default()
    })
    .unwrap()
    .profane;
    pool.into_iter()
        .find(|k| {
            all.iter().all(|t| {
                edit_distance_capped(k, t, 3) >= 3 && !k.starts_with(t.as_str()) && !t.starts_with(k.as_str())
            })
        })
        .expect("a fresh key")
}

fn ac6_dynamic_vocabulary() -> Check {
    let t = trained()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    write_lines(&d.join("safe.txt"), &t.corpus.safe);
    write_lines(&d.join("profane.txt"), &t.corpus.profane);
    let weights = d.join("encoder.cgw");
    save_params(&t.outcome.params, &weights).map_err(|e| e.to_string())?;
    let config = d.join("chatguard.toml");
    std::fs::write(
        &config,
        "[vocab]\nsafe_platform = \"safe.txt\"\nprofane = \"profane.txt\"\n[model]\nweights = \"encoder.cgw\"\n",
    )
    .unwrap();
    let before = std::fs::read(&weights).unwrap();

    let key = fresh_key(&t.corpus);
    let variants: Vec<String> = variant_space(&key, 1).unwrap().into_iter().collect();
    let records = |out: String| -> Vec<OutboundRecord> {
        out.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    let pre = records(run_cli(&["detect"], &config, &format!("{key}\n"))?);
    ensure(pre[0].label != WireLabel::ProfaneDirect, || format!("{key} flagged before vocab-add"))?;

    run_cli(&["vocab-add", &key], &config, "")?;
    let input = std::iter::once(key.clone()).chain(variants.iter().cloned()).collect::<Vec<_>>().join("\n") + "\n";
    let out = records(run_cli(&["detect"], &config, &input)?);
    ensure(out.len() == variants.len() + 1, || "one verdict per line".into())?;
    ensure(
        out[0].label == WireLabel::ProfaneDirect && out[0].key.as_deref() == Some(key.as_str()),
        || format!("{key} after vocab-add: {:?}", out[0]),
    )?;
    let missed: Vec<&str> = out[1..]
        .iter()
        .zip(&variants)
        .filter(|(r, _)| !(r.label == WireLabel::ProfaneLatent && r.key.as_deref() == Some(key.as_str())))
        .map(|(_, v)| v.as_str())
        .collect();
    let unchanged = std::fs::read(&weights).unwrap() == before;
    ensure(unchanged, || "weights file changed".into())?;
    let detail = format!(
        "key {key:?}: direct hit; {}/{} one-edit variants matched latently; weights byte-identical",
        variants.len() - missed.len(),
        variants.len()
    );
    ensure(missed.is_empty(), || format!("{detail}; missed {missed:?}"))?;
    Ok(detail)
}

fn ac7_training_discipline() -> Check {
    let corpus = generate_corpus(&CorpusSpec {
        n_safe: 80,
        n_profane: 10,
        seed: 7,
        ..CorpusSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let tokens = d.join("tokens.txt");
    write_lines(&tokens, &corpus.all_tokens());
    let config = d.join("empty.toml");
    std::fs::write(&config, "").unwrap();
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let w = d.join(format!("{run}.cgw"));
        let h = d.join(format!("{run}.csv"));
        run_cli(
            &[
                "train", "--desk", "--epochs", "12", "--seed", "5",
                "--tokens", tokens.to_str().unwrap(),
                "--out", w.to_str().unwrap(),
                "--history", h.to_str().unwrap(),
            ],
            &config,
            "",
        )?;
        runs.push((std::fs::read(&w).unwrap(), std::fs::read_to_string(&h).unwrap()));
    }
    ensure(runs[0].1 == runs[1].1, || "history CSVs differ".into())?;
    ensure(runs[0].0 == runs[1].0, || "weights differ".into())?;

    // re-evaluate the saved checkpoint on the validation set the trainer used
    let mut plan = TrainPlan::desk();
    plan.train.epochs = 12;
    plan.train.seed = 5;
    let rows: Vec<Vec<f64>> = runs[0]
        .1
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    let best_val = rows.iter().map(|r| r[2]).fold(f64::INFINITY, f64::min);
    let mut unique = corpus.all_tokens();
    unique.sort();
    unique.dedup();
    let (_, valid) = split_dataset(&unique, plan.train.split_fraction, plan.train.seed).map_err(|e| e.to_string())?;
    let valid = ValidationSet::build(&valid, &plan.train.policy_valid).map_err(|e| e.to_string())?;
    let params: EncoderParams<f32> = chatguard::encoder::load_params(&d.join("a.cgw")).map_err(|e| e.to_string())?;
    let again = valid
        .loss(&params, plan.train.batch_size, plan.train.temperature)
        .map_err(|e| e.to_string())?;
    ensure((again - best_val).abs() <= 1e-12 * best_val.abs().max(1.0), || {
        format!("re-evaluated {again}, recorded best {best_val}")
    })?;

    let lr0 = plan.train.lr0;
    let total = rows.len() as u64; // one batch per epoch at this corpus size
    ensure(cosine_lr(lr0, 0, total) == lr0, || "schedule does not start at lr0".into())?;
    let last_lr = rows.last().unwrap()[3];
    ensure(last_lr.abs() <= 1e-12 * lr0, || format!("final lr {last_lr}"))?;
    ensure(rows.windows(2).all(|w| w[1][3] <= w[0][3]), || "lr increased".into())?;
    Ok(format!(
        "identical histories over {} epochs; best validation loss {best_val:.6} reproduced; lr {lr0:e} -> {last_lr:e}",
        rows.len()
    ))
}

fn ac8_metrics() -> Check {
    use Gold::*;
    let lex = Lexicon::new(
        vec![Vocabulary::from_entries(VocabKind::SafeEnglish, ["you", "are", "nice", "hello"]).unwrap()],
        Vocabulary::from_entries(VocabKind::Profane, ["crap", "fuck"]).unwrap(),
    )
    .unwrap();
    let engine = Engine::new(Normalizer::default(), lex, None, 0.8, 500).unwrap();
    let fixture: Vec<LabeledChat> = [
        ("you crap", Profane),
        ("fuck", Profane),
        ("crap", NotProfane),
        ("you are nice", Profane),
        ("hello", NotProfane),
        ("you", NotProfane),
        ("are", NotProfane),
        ("nice", NotProfane),
        ("hello you", NotProfane),
        ("you are", NotProfane),
    ]
    .into_iter()
    .map(|(t, g)| LabeledChat::new(t, g))
    .collect();
    let r = evaluate(&fixture, &engine, 0.8).map_err(|e| e.to_string())?;
    ensure(r.counts == Confusion { tp: 2, fp: 1, fn_: 1, tn: 6 }, || format!("{:?}", r.counts))?;
    let third = 2.0 / 3.0;
    for (name, v) in [("P", r.profane.precision), ("R", r.profane.recall), ("F1", r.profane.f1)] {
        ensure((v - third).abs() < 1e-12, || format!("{name} = {v}"))?;
    }

    let t = trained()?;
    let engine = trained_engine(t);
    let censored = generate_chats(
        &t.corpus,
        &ChatSpec {
            n: 400,
            style: ProfaneStyle::Starred,
            ..ChatSpec::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let base = regex_baseline(&censored, engine.normalizer(), engine.lexicon().profane()).map_err(|e| e.to_string())?;
    let full = evaluate(&censored, &engine, 0.8).map_err(|e| e.to_string())?;
    let detail = format!(
        "fixture P=R=F1=2/3; censored corpus recall: baseline {:.3}, pipeline {:.3}",
        base.profane.recall, full.profane.recall
    );
    ensure(base.profane.recall == 0.0 && full.profane.recall > 0.0, || detail.clone())?;
    Ok(detail)
}

fn ac9_service() -> Check {
    let t = trained()?;
    let engine = trained_engine(t);
    let chats = generate_chats(&t.corpus, &ChatSpec::default()).map_err(|e| e.to_string())?;
    let messages: Vec<InboundMessage> = chats
        .iter()
        .enumerate()
        .map(|(i, c)| InboundMessage {
            chat_id: format!("chat-{i}"),
            text: c.text.clone(),
            meta: serde_json::json!({ "seq": i }),
        })
        .collect();

    let mut latencies: Vec<Duration> = messages
        .iter()
        .map(|m| {
            let start = Instant::now();
            engine.detect(&RawChat::new(m.chat_id.as_str(), m.text.as_str())).unwrap();
            start.elapsed()
        })
        .collect();
    latencies.sort();
    let median = latencies[latencies.len() / 2];

    let service = Service::new(Arc::new(Detector::new(engine)), 2, 10_000);
    let pass = |msgs: &[InboundMessage]| -> Vec<OutboundRecord> {
        let inbound = InProcQueue::new(64);
        let outbound = InProcQueue::new(msgs.len() + 1);
        std::thread::scope(|s| {
            s.spawn(|| {
                for m in msgs {
                    inbound.push(serde_json::to_string(m).unwrap()).unwrap();
                }
                inbound.close();
            });
            service.run(&inbound, &outbound);
        });
        outbound.drain()
    };
    let first = pass(&messages);
    ensure(first.len() == messages.len(), || format!("{} verdicts for {} chats", first.len(), messages.len()))?;
    let by_id: BTreeMap<&str, &OutboundRecord> = first.iter().map(|r| (r.chat_id.as_str(), r)).collect();
    ensure(by_id.len() == messages.len(), || "duplicate chat ids in output".into())?;
    for (i, m) in messages.iter().enumerate() {
        let r = by_id.get(m.chat_id.as_str()).ok_or_else(|| format!("{} lost", m.chat_id))?;
        ensure(r.meta == m.meta, || format!("{} meta not preserved", m.chat_id))?;
        ensure(r.label != WireLabel::ServiceError, || format!("{}: {:?}", m.chat_id, r.error))?;
        let _ = i;
    }
    let second = pass(&messages);
    let again: BTreeMap<&str, &OutboundRecord> = second.iter().map(|r| (r.chat_id.as_str(), r)).collect();
    ensure(again == by_id, || "redelivered chats got different verdicts".into())?;
    let flagged: HashSet<&str> = first
        .iter()
        .filter(|r| matches!(r.label, WireLabel::ProfaneDirect | WireLabel::ProfaneLatent))
        .map(|r| r.chat_id.as_str())
        .collect();
    let detail = format!(
        "{} verdicts ({} flagged), redelivery identical; median detect latency {:.2?}",
        first.len(),
        flagged.len(),
        median
    );
    ensure(median < Duration::from_millis(50), || detail.clone())?;
    Ok(detail)
}
