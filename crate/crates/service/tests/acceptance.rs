//! Acceptance suite: one check per criterion, each printing a PASS/FAIL
//! line. Runs without the libtest harness so the lines always reach stdout.
//! `ACCEPTANCE_ONLY=3,7` restricts the run to the listed criteria.

mod common;

use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use adrag_core::corpus::{bulk_corpus, coverage_corpus, mismatch_corpus, GuardCorpusConfig};
use adrag_core::ekb::{confidence, FeedbackSource, FeedbackStore};
use adrag_core::encoder::{cosine, dot, jaccard, EncoderConfig, Metric};
use adrag_core::eval::{analyze_context_distribution, context_coverage_ratio};
use adrag_core::experiment::{distillation_trial, prepare_corpus, robustness_trial, ExperimentConfig};
use adrag_core::guard::{
    gradients, FeatureLayout, FeatureVector, GuardCapacity, GuardParams, LossMix, PredictionDistribution, Target,
};
use adrag_core::kb::{ContextItem, KbSnapshot, KnowledgeBase, NewEntry};
use adrag_core::par::ExecMode;
use adrag_core::perturbation::attack_reward;
use adrag_core::training::{
    build_training_kb, raft_losses, raft_train, raft_train_observed, skd_train, supervised_contextual_finetune,
    EpochRow, Schedule, SkdConfig, TrainConfig,
};
use adrag_core::Label;
use adrag_service::config::ServiceSection;
use adrag_service::loadgen::LoadReport;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn oracle_scores(snap: &KbSnapshot, probe: &str) -> Vec<ContextItem> {
    let q = snap.encoder().encode(probe);
    let metric = snap.encoder().metric();
    snap.entries()
        .map(|e| ContextItem {
            entry_id: e.id,
            score: match metric {
                Metric::Cosine => cosine(&q.embedding, &e.embedding).unwrap(),
                Metric::Dot => dot(&q.embedding, &e.embedding).unwrap(),
                Metric::Lexical => jaccard(&q.tokens, &e.token_set),
            },
        })
        .collect()
}

fn filtered(all: &[ContextItem], lo: f64, hi: f64, k: Option<usize>) -> Vec<ContextItem> {
    let mut v: Vec<ContextItem> = all.iter().copied().filter(|i| i.score >= lo && i.score <= hi).collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry_id.cmp(&b.entry_id)));
    if let Some(k) = k {
        v.truncate(k);
    }
    v
}

fn same(got: &[ContextItem], want: &[ContextItem], max_diff: &mut f64) -> bool {
    got.len() == want.len()
        && got.iter().zip(want).all(|(g, w)| {
            let d = (g.score - w.score).abs();
            *max_diff = max_diff.max(d);
            g.entry_id == w.entry_id && d <= 1e-9
        })
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut probes, mut max_diff) = (0usize, 0.0f64);
    for kb_i in 0..50 {
        let metric = [Metric::Cosine, Metric::Cosine, Metric::Dot, Metric::Lexical][kb_i % 4];
        let cfg = EncoderConfig {
            metric,
            dimension: *[16usize, 32, 64].choose(&mut rng).unwrap(),
            normalize: metric != Metric::Dot || rng.gen_bool(0.5),
            ..Default::default()
        };
        let vocab: Vec<String> = (0..rng.gen_range(30..2000)).map(|i| format!("v{i}")).collect();
        let text = |rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..=10);
            (0..n).map(|_| vocab.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
        };
        let n = rng.gen_range(0..=10_000);
        let kb = KnowledgeBase::new(cfg).unwrap();
        kb.insert_many((0..n).map(|_| {
            let l = if rng.gen_bool(0.5) { Label::Safe } else { Label::Unsafe };
            NewEntry::new(text(&mut rng), l).timestamp(0)
        }))
        .unwrap();
        kb.publish_snapshot();
        let snap = kb.snapshot();
        for _ in 0..100 {
            let probe = if n > 0 && rng.gen_bool(0.3) {
                snap.get(rng.gen_range(0..n as u64)).unwrap().text.clone()
            } else {
                text(&mut rng)
            };
            let all = oracle_scores(&snap, &probe);
            let eps = *[0.0, 1.0, rng.gen::<f64>(), rng.gen::<f64>()].choose(&mut rng).unwrap();
            let k = rng.gen_range(0..=30);
            let got = snap.retrieve_topk(&probe, k, eps).unwrap();
            if !same(&got.items, &filtered(&all, 1.0 - eps, f64::INFINITY, Some(k)), &mut max_diff) {
                return Err(format!("topk mismatch: KB {kb_i}, probe {probe:?}, k {k}, eps {eps}"));
            }
            let delta = rng.gen::<f64>() * 0.9;
            let eps2 = rng.gen_range(delta + 1e-9..=1.0);
            let got = snap.retrieve_relaxed(&probe, delta, eps2).unwrap();
            if !same(&got.items, &filtered(&all, delta, 1.0 - eps2, None), &mut max_diff) {
                return Err(format!("relaxed mismatch: KB {kb_i}, probe {probe:?}, band [{delta}, {}]", 1.0 - eps2));
            }
            probes += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("50 KBs, {probes} probes, top-K and band exact, max |Δscore| {max_diff:e}, {secs:.1} s"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    const H: f64 = 1e-5;
    let layout = FeatureLayout::new(64, 5);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (cap, seed) in [(GuardCapacity::teacher(), 11u64), (GuardCapacity::student(), 12)] {
        let params = GuardParams::init(cap, layout, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<FeatureVector> = (0..4)
            .map(|_| FeatureVector((0..layout.input_len()).map(|_| rng.gen_range(-0.3..0.3)).collect()))
            .collect();
        let lbl = |rng: &mut ChaCha8Rng| Label::from_index(rng.gen_range(0..2));
        let losses = [
            ("CE", None),
            ("KL", Some(LossMix { kl: 1.0, ce: 0.0, reward: 0.0 })),
            ("mixed", Some(LossMix { kl: 0.6, ce: 0.4, reward: 0.0 })),
        ];
        for (name, mix) in losses {
            let batch: Vec<(&FeatureVector, Target)> = feats
                .iter()
                .map(|f| {
                    let y = lbl(&mut rng);
                    let t = match mix {
                        None => Target::Hard(y),
                        Some(mix) => Target::Distill {
                            teacher: PredictionDistribution::from_logits([rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]),
                            label: y,
                            mix,
                        },
                    };
                    (f, t)
                })
                .collect();
            let (_, grad) = gradients(&params, &batch, ExecMode::Sequential).unwrap();
            let mut p = params.clone();
            for _ in 0..50 {
                let i = rng.gen_range(0..p.num_params());
                let orig = p.as_slice()[i];
                p.as_mut_slice()[i] = orig + H;
                let up = gradients(&p, &batch, ExecMode::Sequential).unwrap().0;
                p.as_mut_slice()[i] = orig - H;
                let down = gradients(&p, &batch, ExecMode::Sequential).unwrap().0;
                p.as_mut_slice()[i] = orig;
                let fd = (up - down) / (2.0 * H);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
                worst = worst.max(rel);
                checked += 1;
                if rel >= 1e-4 {
                    return Err(format!("{:?} {name}: coordinate {i} fd {fd:e} analytic {:e}", cap.role, grad[i]));
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{checked} coordinates (teacher+student × CE/KL/mixed), max rel err {worst:.2e}, {secs:.1} s"))
}

// ---------------------------------------------------------------- 3

fn arithmetic_config() -> ExperimentConfig {
    ExperimentConfig {
        corpus: GuardCorpusConfig {
            families: 120,
            cue_vocab: 6,
            plants_per_query: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn criterion_3() -> Outcome {
    let cfg = arithmetic_config();
    let pc = prepare_corpus(&cfg, 1, ExecMode::default()).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 4,
        lambda: 0.0,
        ..cfg.train
    };
    let init = GuardParams::init(GuardCapacity::teacher(), pc.layout, 1).unwrap();
    let (sft, r_sft) = supervised_contextual_finetune(init.clone(), &pc.features, &tc, ExecMode::default()).unwrap();
    let (raft0, r_raft0) = raft_train(init.clone(), &pc.features, &tc, ExecMode::default()).unwrap();
    ensure(sft.to_bytes() == raft0.to_bytes(), || "λ=0 RAFT params differ from supervised params".into())?;
    let hashes = |r: &adrag_core::training::TrainReport| r.epochs.iter().map(|e| e.teacher_hash.clone()).collect::<Vec<_>>();
    ensure(hashes(&r_sft) == hashes(&r_raft0), || "per-epoch hashes differ".into())?;

    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for lambda in [0.5, 1.0, 2.0] {
        let tc = TrainConfig { lambda, ..tc };
        let mut seen: Vec<(EpochRow, f64, f64)> = Vec::new();
        let mut obs = |row: &EpochRow, p: &GuardParams| {
            let l = raft_losses(p, &pc.features, lambda, ExecMode::Sequential).unwrap();
            seen.push((row.clone(), l.l_train, l.l_adv));
        };
        raft_train_observed(init.clone(), &pc.features, &tc, ExecMode::default(), Some(&mut obs)).unwrap();
        for (row, l_train, l_adv) in seen {
            let recomputed = l_train + lambda * l_adv;
            for d in [
                (row.l_total - recomputed).abs(),
                (row.l_total - (row.l_train + lambda * row.l_adv)).abs(),
                (row.l_train - l_train).abs(),
                (row.l_adv - l_adv).abs(),
            ] {
                worst = worst.max(d);
            }
            rows += 1;
        }
    }
    ensure(worst <= 1e-9, || format!("max loss discrepancy {worst:e}"))?;
    Ok(format!(
        "λ=0 RAFT bit-identical to supervised ({} epochs); {rows} epoch rows satisfy L_total = L_train + λ·L_adv, max |Δ| {worst:e}",
        r_sft.epochs.len()
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let cfg = arithmetic_config();
    let pc = prepare_corpus(&cfg, 2, ExecMode::default()).map_err(|e| e.to_string())?;
    let teacher = GuardParams::init(GuardCapacity::teacher(), pc.layout, 1).unwrap();
    let student = GuardParams::init(GuardCapacity::student(), pc.layout, 2).unwrap();
    let skd = SkdConfig {
        train: TrainConfig { epochs: 0, ..cfg.train },
        ..Default::default()
    };
    let run = |s: Schedule| skd_train(teacher.clone(), student.clone(), &pc.features, &s, &skd, ExecMode::default()).unwrap();

    let zeros = run(Schedule::new(vec![0; 3]).unwrap());
    ensure(zeros.student.fingerprint() == student.fingerprint(), || "all-0 schedule changed the student".into())?;
    ensure(zeros.teacher.fingerprint() != teacher.fingerprint(), || "all-0 schedule left the teacher unchanged".into())?;
    let ones = run(Schedule::new(vec![1; 3]).unwrap());
    ensure(ones.teacher.fingerprint() == teacher.fingerprint(), || "all-1 schedule changed the teacher".into())?;
    ensure(ones.student.fingerprint() != student.fingerprint(), || "all-1 schedule left the student unchanged".into())?;

    let canon = run(Schedule::canonical(9).unwrap());
    canon.report.audit_modes()?;
    let mut t_prev = canon.report.initial_teacher_hash.clone();
    let mut s_prev = canon.report.initial_student_hash.clone();
    let mut modes = Vec::new();
    for row in &canon.report.epochs {
        let mode = row.mode.ok_or("epoch row without mode")?;
        modes.push(mode);
        let t_changed = row.teacher_hash != t_prev;
        let s_changed = row.student_hash != s_prev;
        let expect = match mode {
            0 => (true, false),
            1 => (false, true),
            _ => (true, true),
        };
        ensure((t_changed, s_changed) == expect, || {
            format!("epoch {} mode {mode}: teacher changed {t_changed}, student changed {s_changed}", row.epoch)
        })?;
        t_prev = row.teacher_hash.clone();
        s_prev = row.student_hash.clone();
    }
    ensure(modes == vec![0, 0, 0, 2, 2, 2, 1, 1, 1], || format!("canonical modes {modes:?}"))?;
    Ok(format!("all-0 keeps student, all-1 keeps teacher; canonical {modes:?} hash audit matches the mode table"))
}

// ---------------------------------------------------------------- 5, 6

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::default();
    let (mut rft, mut raft) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in SEEDS {
        let o = robustness_trial(&cfg, seed, ExecMode::default()).map_err(|e| e.to_string())?;
        println!(
            "    seed {seed}: RFT clean {:.4} planted {:.4} | RAFT clean {:.4} planted {:.4} | plant top-1 {:.3}",
            o.rft_clean_f1, o.rft_planted_f1, o.raft_clean_f1, o.raft_planted_f1, o.plant_top1_fraction
        );
        rft += o.rft_drop() / SEEDS.len() as f64;
        raft += o.raft_drop() / SEEDS.len() as f64;
        per_seed.push(o);
    }
    let secs = t0.elapsed().as_secs_f64();
    let n_train = cfg.corpus.families * cfg.corpus.train_per_family;
    let n_test = cfg.corpus.families * cfg.corpus.test_per_family;
    ensure(rft > 0.0, || format!("RFT shows no drop ({rft:.4}); planted contexts are not misleading"))?;
    ensure(raft <= 0.5 * rft, || format!("mean RAFT drop {raft:.4} > 0.5 × mean RFT drop {rft:.4}"))?;
    ensure(secs < 600.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "{n_train} train / {n_test} test, 70% planted; mean drop RFT {rft:.4} vs RAFT {raft:.4} (ratio {:.3} ≤ 0.5), {secs:.0} s",
        raft / rft
    ))
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::default();
    let (mut t_f1, mut s_f1) = (0.0, 0.0);
    let mut ratio_params = 0.0;
    for seed in SEEDS {
        let o = distillation_trial(&cfg, seed, ExecMode::default()).map_err(|e| e.to_string())?;
        o.report.audit_modes()?;
        println!("    seed {seed}: teacher {:.4} student {:.4}", o.teacher_f1, o.student_f1);
        t_f1 += o.teacher_f1 / SEEDS.len() as f64;
        s_f1 += o.student_f1 / SEEDS.len() as f64;
        ratio_params = o.student_params as f64 / o.teacher_params as f64;
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(s_f1 >= 0.95 * t_f1, || format!("mean student F1 {s_f1:.4} < 0.95 × teacher {t_f1:.4}"))?;
    ensure(ratio_params <= 0.30, || format!("student/teacher params {ratio_params:.3}"))?;
    ensure(secs < 600.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "mean weighted F1 teacher {t_f1:.4}, student {s_f1:.4} (retention {:.3} ≥ 0.95), params ratio {ratio_params:.3}, {secs:.0} s",
        s_f1 / t_f1
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut cases = 0;
    for n in 0..=5usize {
        for n_unsafe in 0..=n {
            let labels: Vec<Label> = (0..n).map(|i| if i < n_unsafe { Label::Unsafe } else { Label::Safe }).collect();
            for k in 1..=5usize {
                let agree = n_unsafe == 0 || n_unsafe == n;
                let expected = n >= k && n > 0 && agree;
                // Order of arrival must not matter.
                let mut rev = labels.clone();
                rev.reverse();
                ensure(confidence(&labels, k) == expected && confidence(&rev, k) == expected, || {
                    format!("Conf({labels:?}, k={k}) != {expected}")
                })?;
                let kb = KnowledgeBase::new(EncoderConfig::default()).unwrap();
                let store = FeedbackStore::new(k).unwrap();
                for l in &labels {
                    store.submit("probe query", *l, FeedbackSource::Operator).unwrap();
                }
                let promoted = n > 0 && store.promote("probe query", &kb).is_ok();
                ensure(promoted == expected, || format!("promote for {labels:?}, k={k}: {promoted}"))?;
                cases += 1;
            }
        }
    }

    let fx = common::toy_fixture();
    let state = common::fixture_state(&fx, ServiceSection::default());
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let (id, ctx) = rt.block_on(async {
        let srv = common::spawn(state.clone()).await;
        let c = reqwest::Client::new();
        let u = |p: &str| format!("{}{}", srv.url, p);
        let q = "qx never seen request about something new";
        for src in ["end_user", "operator", "grader_model"] {
            c.post(u("/v1/feedback")).json(&json!({ "text": q, "label": "unsafe", "source": src })).send().await.unwrap();
        }
        let p: Value = c.post(u("/v1/kb/promote")).json(&json!({ "text": q })).send().await.unwrap().json().await.unwrap();
        c.post(u("/v1/kb/refresh")).send().await.unwrap();
        let r: Value = c.post(u("/v1/classify")).json(&json!({ "text": q })).send().await.unwrap().json().await.unwrap();
        (p["entry_id"].as_u64(), r["context"].clone())
    });
    let id = id.ok_or("promotion failed")?;
    let cited: Vec<u64> = ctx.as_array().unwrap().iter().filter_map(|c| c["entry_id"].as_u64()).collect();
    ensure(cited.contains(&id), || format!("classify context {cited:?} does not cite entry {id}"))?;
    state.feedback.audit(&state.kb)?;
    Ok(format!("{cases} (multiset, k) cases match; 3 labels → promote → refresh → classify cites entry {id}"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..10_000 {
        let p = rng.gen::<f64>();
        let d = PredictionDistribution::new(1.0 - p, p);
        let y_star = Label::from_index(rng.gen_range(0..2));
        let y_hat = Label::from_index(rng.gen_range(0..2));
        let r = attack_reward(&d, y_star, y_hat);
        let direct = if y_hat == y_star { 0.0 } else { 1.0 - d.as_array()[y_star.index()] };
        ensure(r == direct, || format!("case {i}: reward {r} vs {direct}"))?;
        // Raising the guard's confidence in the true label never raises the reward.
        let q = rng.gen::<f64>();
        let (lo, hi) = (p.min(q), p.max(q));
        let toward = |s: f64| match y_star {
            Label::Unsafe => PredictionDistribution::new(1.0 - s, s),
            Label::Safe => PredictionDistribution::new(s, 1.0 - s),
        };
        let (r_lo, r_hi) = (
            attack_reward(&toward(lo), y_star, y_star.flip()),
            attack_reward(&toward(hi), y_star, y_star.flip()),
        );
        ensure(r_hi <= r_lo, || format!("case {i}: not monotone ({r_lo} → {r_hi})"))?;
    }
    Ok("10000 random cases: zero when correct, 1 − s[y*] when wrong, monotone in guard confidence".into())
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let mut worst: f64 = 0.0;
    for (seed, frac) in [(1u64, 0.15), (2, 0.4), (3, 0.7)] {
        let c = mismatch_corpus(1000, frac, 8, seed);
        let kb = build_training_kb(&c.kb, EncoderConfig::default()).unwrap();
        let d = analyze_context_distribution(&c.queries, &kb.snapshot(), 0.6, ExecMode::default()).unwrap();
        worst = worst.max((d.mismatch() - frac).abs());
        ensure((d.mismatch() - frac).abs() <= 0.02, || format!("mismatch planted {frac}, measured {:.4}", d.mismatch()))?;
    }
    for (seed, frac) in [(4u64, 0.25), (5, 0.5), (6, 0.85)] {
        let c = coverage_corpus(1000, frac, 3000, 8, seed);
        let kb = build_training_kb(&c.kb, EncoderConfig::default()).unwrap();
        let r = context_coverage_ratio(&c.queries, &kb.snapshot(), 0.6, ExecMode::default());
        worst = worst.max((r - frac).abs());
        ensure((r - frac).abs() <= 0.02, || format!("coverage planted {frac}, measured {r:.4}"))?;
    }
    Ok(format!("mismatch and coverage recovered at 6 planted levels, max error {:.2} points", worst * 100.0))
}

// ---------------------------------------------------------------- 10, 11

struct ServeProc(Child);

impl Drop for ServeProc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn adrag() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adrag"));
    c.env_remove("ADRAG_LOG");
    c
}

fn start_server(config: &Path) -> Result<(ServeProc, String), String> {
    let mut child = adrag()
        .args(["--config", config.to_str().unwrap(), "serve", "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .map_err(|e| e.to_string())?;
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| format!("unexpected server output {line:?}"))?
        .to_string();
    Ok((ServeProc(child), url))
}

fn criterion_10(work: &Path) -> Outcome {
    let (entries, queries) = bulk_corpus(100_000, 5_000, 10);
    let kb = build_training_kb(&entries, EncoderConfig::default()).unwrap();
    kb.persist(work.join("kb100k.jsonl")).unwrap();
    let layout = FeatureLayout::new(64, 5);
    GuardParams::init(GuardCapacity::student(), layout, 1)
        .unwrap()
        .save(work.join("student.bin"), &json!({}))
        .unwrap();
    std::fs::write(work.join("queries.txt"), queries.join("\n")).unwrap();
    std::fs::write(
        work.join("serve.toml"),
        "[kb]\npath = \"kb100k.jsonl\"\n[model]\nparams = \"student.bin\"\nk = 5\n[service]\ntau_ms = 10.0\n",
    )
    .unwrap();
    let cwd = std::env::current_dir().unwrap();
    std::env::set_current_dir(work).unwrap();
    let started = start_server(Path::new("serve.toml"));
    std::env::set_current_dir(cwd).unwrap();
    let (_server, url) = started?;

    // Operator refreshes during the run must not stall classification.
    let refresher = {
        let url = url.clone();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
            rt.block_on(async {
                let c = reqwest::Client::new();
                for _ in 0..3 {
                    tokio::time::sleep(Duration::from_secs(15)).await;
                    let _ = c.post(format!("{url}/v1/kb/refresh")).send().await;
                }
            })
        })
    };
    let out = adrag()
        .current_dir(work)
        .args(["bench", "--url", &url, "--qps", "300", "--duration", "60", "--queries", "queries.txt", "--out", "bench"])
        .output()
        .map_err(|e| e.to_string())?;
    let _ = refresher.join();
    ensure(out.status.success(), || format!("bench failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    let report: LoadReport = serde_json::from_slice(&std::fs::read(work.join("bench/report.json")).unwrap()).unwrap();
    let s = &report.server;
    println!(
        "    retrieval p50 {:.3} p90 {:.3} p99 {:.3} ms | inference p50 {:.3} p99 {:.3} ms | total p50 {:.3} p90 {:.3} p95 {:.3} p99 {:.3} ms",
        s.retrieval.p50_ms, s.retrieval.p90_ms, s.retrieval.p99_ms, s.inference.p50_ms, s.inference.p99_ms,
        s.total.p50_ms, s.total.p90_ms, s.total.p95_ms, s.total.p99_ms
    );
    println!(
        "    client p50 {:.3} p99 {:.3} ms | achieved {:.1} qps{} | {} budget overruns | max send lag {:.2} ms",
        report.client.p50_ms,
        report.client.p99_ms,
        report.achieved_qps,
        if report.saturated { " (saturated)" } else { "" },
        report.budget_exceeded,
        report.max_send_lag_ms
    );
    ensure(report.completed + report.errors == 18_000, || format!("scheduled {}", report.scheduled))?;
    ensure(report.errors == 0, || format!("{} failed requests", report.errors))?;
    ensure(s.total.p99_ms <= 10.0, || format!("p99 total {:.3} ms > 10 ms", s.total.p99_ms))?;
    Ok(format!(
        "100k-entry KB, K=5, 300 QPS × 60 s open loop: p99 total {:.3} ms ≤ 10 ms (retrieval {:.3} + inference {:.3} at p99), achieved {:.1} qps",
        s.total.p99_ms, s.retrieval.p99_ms, s.inference.p99_ms, report.achieved_qps
    ))
}

fn criterion_11(work: &Path) -> Outcome {
    let run = |args: &[&str]| -> Result<(), String> {
        let out = adrag().current_dir(work).args(args).output().map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("adrag {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
        })
    };
    let same = |a: &str, b: &str| -> Result<(), String> {
        let (x, y) = (std::fs::read(work.join(a)).map_err(|e| e.to_string())?, std::fs::read(work.join(b)).unwrap());
        ensure(x == y, || format!("{a} and {b} differ"))
    };
    run(&["corpus", "--out", "repro.jsonl", "--families", "60", "--seed", "3"])?;
    std::fs::write(
        work.join("repro.toml"),
        "[data]\npath = \"repro.jsonl\"\n[training]\nepochs = 3\nseed = 5\nskd_epochs = 3\n",
    )
    .unwrap();
    let c = ["--config", "repro.toml"];
    let mut checked = 0;
    for dir in ["r_train_a", "r_train_b"] {
        run(&[c[0], c[1], "train", "--out", dir])?;
    }
    for f in ["report.json", "metrics.json", "model.bin", "manifest.json"] {
        same(&format!("r_train_a/{f}"), &format!("r_train_b/{f}"))?;
        checked += 1;
    }
    for dir in ["r_distill_a", "r_distill_b"] {
        run(&[c[0], c[1], "distill", "--out", dir])?;
    }
    for f in ["report.json", "metrics.json", "student.bin", "manifest.json"] {
        same(&format!("r_distill_a/{f}"), &format!("r_distill_b/{f}"))?;
        checked += 1;
    }
    for dir in ["r_eval_a", "r_eval_b"] {
        run(&[c[0], c[1], "eval", "--params", "r_train_a/model.bin", "--out", dir])?;
    }
    same("r_eval_a/metrics.json", "r_eval_b/metrics.json")?;
    checked += 1;

    let bench_note = if work.join("bench/samples.jsonl").exists() {
        for dir in ["r_bench_a", "r_bench_b"] {
            run(&["bench", "--from-samples", "bench/samples.jsonl", "--out", dir])?;
        }
        same("r_bench_a/report.json", "r_bench_b/report.json")?;
        same("r_bench_a/report.json", "bench/report.json")?;
        checked += 2;
        "bench report recomputed from its sample dump byte-identically"
    } else {
        "bench reproducibility not checked (criterion 10 did not run)"
    };
    Ok(format!("{checked} output files byte-identical across repeated train/distill/eval runs; {bench_note}"))
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let work = tempfile::tempdir().unwrap();
    let w = work.path().to_path_buf();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "retrieval oracle equivalence", Box::new(criterion_1)),
        (2, "gradient correctness", Box::new(criterion_2)),
        (3, "loss arithmetic", Box::new(criterion_3)),
        (4, "scheduler mode semantics", Box::new(criterion_4)),
        (5, "adversarial training robustness", Box::new(criterion_5)),
        (6, "distillation retention", Box::new(criterion_6)),
        (7, "confidence gate", Box::new(criterion_7)),
        (8, "attack reward", Box::new(criterion_8)),
        (9, "diagnostics recovery", Box::new(criterion_9)),
        (10, "latency budget", Box::new({
            let w = w.clone();
            move || criterion_10(&w)
        })),
        (11, "reproducibility", Box::new(move || criterion_11(&w))),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n:>2} [{name}]: PASS — {msg} ({secs:.1} s)"),
            Err(msg) => {
                println!("criterion {n:>2} [{name}]: FAIL — {msg} ({secs:.1} s)");
                failed.push(*n);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} criterion(s) failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
