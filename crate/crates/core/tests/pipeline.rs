//! Behavioural checks on a small model trained on a tightly constrained
//! grammar. One model is trained per test binary and shared.

use std::sync::OnceLock;

use nullgec::baselines::{score_no_mask, Method, ScoreOptions};
use nullgec::corpus::{generate_corpus, Grammar, GrammarConfig};
use nullgec::corruption::CorruptionConfig;
use nullgec::dataset::{build_eval_set, inject_errors, Task};
use nullgec::eval::{detection_metrics, evaluate_scores, score_eval_set, sweep_thresholds};
use nullgec::inference::{
    correct_insertion, deletion_scores, detect_deletions, detect_insertions, insertion_scores,
    sentence_error_score, DetectorConfig,
};
use nullgec::model::{mlm_probabilities, ModelConfig, ModelState, Objective};
use nullgec::trainer::{train, TrainConfig};
use nullgec::vocab::{build_vocab, TokenId, NULL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Toy {
    grammar: Grammar,
    model: ModelState,
    first_loss: f64,
    last_loss: f64,
}

fn grammar_config() -> GrammarConfig {
    GrammarConfig {
        vocab_size: 16,
        successors_per_symbol: 2,
        pair_head_fraction: 0.25,
        length_range: (6, 14),
        seed: 3,
    }
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let gc = grammar_config();
        let grammar = Grammar::new(gc.clone()).unwrap();
        let corpus = generate_corpus(&gc, 3000).unwrap();
        let vocab = build_vocab(gc.vocab_size).unwrap();
        let mc = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size: vocab.len(),
            max_len: 32,
            seed: 1,
        };
        let tc = TrainConfig {
            batch_size: 16,
            total_steps: 2000,
            warmup_steps: 100,
            base_lr: 3e-3,
            seed: 2,
            objective: Objective::NullMlm,
            corruption: CorruptionConfig {
                mag_enabled: false,
                ..CorruptionConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(&corpus, &vocab, &mc, &tc, None).unwrap();
        let mean = |h: &[nullgec::model::LossBreakdown]| h.iter().map(|l| l.total).sum::<f64>() / h.len() as f64;
        Toy {
            grammar,
            first_loss: mean(&out.history[..20]),
            last_loss: mean(&out.history[out.history.len() - 100..]),
            model: out.checkpoint.model,
        }
    })
}

fn cfg() -> DetectorConfig {
    DetectorConfig {
        insertion_threshold: 0.5,
        deletion_threshold: 0.5,
        ..DetectorConfig::default()
    }
}

fn random_content(rng: &mut ChaCha8Rng) -> TokenId {
    rng.random_range(4..4 + grammar_config().vocab_size as TokenId)
}

#[test]
fn training_halves_the_loss() {
    let t = toy();
    assert!(t.last_loss <= 0.5 * t.first_loss, "{} -> {}", t.first_loss, t.last_loss);
}

#[test]
fn null_is_argmax_at_spurious_tokens() {
    let t = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut hits, mut total) = (0, 0);
    for s in t.grammar.sample(200, 11) {
        let pos = rng.random_range(1..s.len());
        let w = random_content(&mut rng);
        if t.grammar.is_permitted(s[pos - 1], w) || w == s[pos] {
            continue;
        }
        let mut bad = s.clone();
        bad.insert(pos, w);
        let probs = mlm_probabilities(&t.model, &bad).unwrap();
        let argmax = (0..probs[pos].len())
            .max_by(|&a, &b| probs[pos][a].total_cmp(&probs[pos][b]))
            .unwrap();
        hits += usize::from(argmax == NULL as usize);
        total += 1;
    }
    assert!(total > 50);
    assert!(hits as f64 >= 0.8 * total as f64, "{hits}/{total}");
}

#[test]
fn missing_pair_partner_is_flagged_and_restored() {
    let t = toy();
    let (mut hits, mut total) = (0, 0);
    for s in t.grammar.sample(300, 12) {
        let Some(i) = (0..s.len() - 1).find(|&i| t.grammar.is_pair_head(s[i])) else {
            continue;
        };
        let partner = s[i + 1];
        assert_eq!(t.grammar.partner(s[i]), Some(partner));
        let mut bad = s.clone();
        bad.remove(i + 1);
        let report = detect_insertions(&bad, &t.model, &cfg()).unwrap();
        let gap = i + 1;
        let top = report.corrections.get(&gap).and_then(|c| c.first()).map(|c| c.token);
        hits += usize::from(report.flagged.contains(&gap) && top == Some(partner));
        total += 1;
    }
    assert!(total > 50);
    assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
}

#[test]
fn spurious_tokens_are_flagged_with_few_false_alarms() {
    let t = toy();
    let vocab_size = t.grammar.total_vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sentences = t.grammar.sample(1000, 13);
    let (mut hits, mut total) = (0, 0);
    for s in &sentences {
        let (bad, gold) = inject_errors(s, Task::Deletion, 1, rng.random(), vocab_size, None).unwrap();
        let pos = gold[0].index();
        // Tokens before the first word never occur in training, and a permitted
        // successor of the left neighbour is indistinguishable from a real word.
        if pos == 0 || t.grammar.is_permitted(bad[pos - 1], bad[pos]) {
            continue;
        }
        total += 1;
        let report = detect_deletions(&bad, &t.model, &cfg()).unwrap();
        // The following word often breaks the grammar too, so one extra flag is tolerated.
        hits += usize::from(report.flagged.contains(&pos) && report.flagged.len() <= 2);
    }
    assert!(total > 500);
    assert!(hits as f64 >= 0.7 * total as f64, "{hits}/{total}");
}

#[test]
fn top_correction_usually_restores_the_missing_word() {
    let t = toy();
    let records = build_eval_set(&t.grammar, Task::Insertion, 300, 14).unwrap();
    let scores = score_eval_set(&records, Method::Main, Task::Insertion, &t.model, &ScoreOptions::default()).unwrap();
    let (det, corr) = evaluate_scores(&scores, &records, Task::Insertion, 0.5).unwrap();
    let corr = corr.unwrap();
    assert!(det.true_positives > 0);
    assert!(
        2 * corr.true_positives > det.true_positives,
        "{} of {} correct detections carry the right word",
        corr.true_positives,
        det.true_positives
    );
    for r in records.iter().take(20) {
        let report = detect_insertions(&r.source, &t.model, &cfg()).unwrap();
        for (&gap, cands) in &report.corrections {
            assert_eq!(cands, &correct_insertion(&r.source, gap, &t.model, 5).unwrap());
        }
    }
}

#[test]
fn erroneous_sentences_outrank_their_clean_originals() {
    let t = toy();
    let vocab_size = t.grammar.total_vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut wins = 0;
    for s in t.grammar.sample(1000, 15) {
        let task = if rng.random_bool(0.5) { Task::Insertion } else { Task::Deletion };
        let (bad, _) = inject_errors(&s, task, 1, rng.random(), vocab_size, None).unwrap();
        let score = |x: &[TokenId]| {
            let ins = insertion_scores(x, &t.model, 1, false).unwrap();
            let del = deletion_scores(x, &t.model).unwrap();
            sentence_error_score(&ins, &del, &cfg())
        };
        wins += usize::from(score(&bad) > score(&s));
    }
    assert!(wins >= 750, "{wins}/1000");
}

#[test]
fn no_mask_scores_spurious_tokens_below_clean_ones() {
    let t = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut lower, mut total) = (0, 0);
    for s in t.grammar.sample(1000, 16) {
        let pos = rng.random_range(1..s.len());
        let w = random_content(&mut rng);
        if w == s[pos] {
            continue;
        }
        let mut bad = s.clone();
        bad[pos] = w;
        total += 1;
        let clean = score_no_mask(&s, pos, &t.model).unwrap();
        let spurious = score_no_mask(&bad, pos, &t.model).unwrap();
        lower += usize::from(spurious < clean);
    }
    assert!(2 * lower > total, "{lower}/{total}");
}

#[test]
fn sweep_recall_is_monotone_on_model_output() {
    let t = toy();
    let grid = [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 0.95];
    for task in [Task::Insertion, Task::Deletion] {
        let dev = build_eval_set(&t.grammar, task, 150, 17).unwrap();
        let res = sweep_thresholds(&t.model, &dev, task, Method::Main, &ScoreOptions::default(), &grid).unwrap();
        let recalls: Vec<f64> = res.points.iter().map(|p| p.metrics.recall).collect();
        let ok = recalls.windows(2).all(|w| match task {
            Task::Insertion => w[0] <= w[1],
            Task::Deletion => w[0] >= w[1],
        });
        assert!(ok, "{task}: {recalls:?}");
        let best = res.best_point().metrics.f1;
        assert!(res.points.iter().all(|p| p.metrics.f1 <= best));

        let scores = score_eval_set(&dev, Method::Main, task, &t.model, &ScoreOptions::default()).unwrap();
        let golds: Vec<Vec<usize>> = dev.iter().map(|r| r.gold_indices(task)).collect();
        let preds: Vec<Vec<usize>> = scores.iter().map(|s| s.flagged(res.best_threshold())).collect();
        assert_eq!(detection_metrics(&preds, &golds).unwrap(), res.best_point().metrics);
    }
}
