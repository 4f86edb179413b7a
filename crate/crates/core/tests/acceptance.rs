//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.
//!
//! Run a subset with `cargo test -p emulab --test acceptance -- 1 4 10`.

mod common;

use std::collections::HashSet;
use std::time::Instant;

use emulab::corpus::{
    closure_violations, generate_pretraining_corpus, generate_probe_data, parse_sentence, parse_sequence, CorpusConfig,
    ProbeData, ProbeDataConfig, SplitSpec,
};
use emulab::directeval::direct_eval_alm;
use emulab::grammar::{parse_str, tokenize, ExpansionCounts, Pcfg, Sampler, SynTree, Variant, DEFAULT_MAX_TOKENS};
use emulab::neural::model::Batch;
use emulab::neural::train::{alm_targets, loss_and_grad, loss_only, mlm_corrupt};
use emulab::neural::{random_init_model, train_model, vocab, Arch, Checkpoint, ModelConfig, TrainConfig, Transformer};
use emulab::opacity::{
    split_dataset, Clause, FactEntry, Frame, Generator, OpacityPair, Pronoun, TemplateRegistry, VerbClass, VerbInventory,
};
use emulab::probe::{eval_probe_on_bank, train_probe_on_bank, FeatureBank, MeanStd, Pooling, ProbeConfig};
use emulab::rng;
use emulab::semantics::{
    assertion_oracle, check_tree_transparency, denotations, eval, mark_binders, transparency_check, TruthValue,
};
use emulab::stats::{bootstrap_test, permutation_test, TestMethod, VerbGroupStats};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: &str = "(((!T)|F)|(!T))";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn c1_golden_semantics() -> Outcome {
    let tree = parse_str(GOLDEN).unwrap();
    let lt = denotations(&tree, Variant::Lt);
    let ln = denotations(&tree, Variant::Ln);
    // (token span, is leaf, Lt, Ln) for every marked node, root first.
    let marks: [(usize, usize, bool, char, char); 8] = [
        (0, 15, false, 'F', 'T'),
        (1, 9, false, 'F', 'T'),
        (2, 6, false, 'F', 'T'),
        (4, 5, false, 'T', 'F'),
        (4, 5, true, 'T', 'F'),
        (7, 8, false, 'F', 'F'),
        (10, 14, false, 'F', 'F'),
        (12, 13, false, 'T', 'T'),
    ];
    let mut bad = Vec::new();
    for (start, end, leaf, want_lt, want_ln) in marks {
        let id = tree
            .ids()
            .find(|&id| {
                let n = tree.node(id).unwrap();
                n.span == (start..end) && n.is_leaf() == leaf
            })
            .unwrap();
        let got = (
            lt.get(id).map(|v| v.token().to_char()),
            ln.get(id).map(|v| v.token().to_char()),
        );
        let got = if leaf {
            let inverted = mark_binders(&tree).is_inverted(id);
            let surface = tree.node(id).unwrap().token().unwrap().to_char();
            let flipped = if surface == 'T' { 'F' } else { 'T' };
            (Some(surface), Some(if inverted { flipped } else { surface }))
        } else {
            got
        };
        if got != (Some(want_lt), Some(want_ln)) {
            bad.push(format!("{start}..{end}: {got:?}"));
        }
    }
    let root_ok = eval(&tree, Variant::Lt) == TruthValue::F && eval(&tree, Variant::Ln) == TruthValue::T;
    outcome(
        root_ok && bad.is_empty(),
        format!("Lt {} Ln {}; 8 marked nodes, {} mismatches {:?}", lt.root(), ln.root(), bad.len(), bad),
    )
}

fn c2_oracle_equivalence() -> Outcome {
    let all = common::all_sentences(16);
    let mut lt_bad = 0;
    for s in &all {
        let tree = parse_str(s).unwrap();
        if Some(eval(&tree, Variant::Lt).token().to_char()) != common::rewrite_eval(s) {
            lt_bad += 1;
        }
    }
    let mut sampled_lt_bad = 0;
    let mut ln_bad = 0;
    for (variant, stream) in [(Variant::Lt, 1), (Variant::Ln, 2)] {
        let pcfg = Pcfg::default_for(variant);
        let sampler = Sampler::new(&pcfg, DEFAULT_MAX_TOKENS).unwrap();
        let mut r = rng::stream(2024, stream);
        for _ in 0..10_000 {
            let tree = sampler.sample(&mut r).unwrap();
            match variant {
                Variant::Lt => {
                    if Some(eval(&tree, Variant::Lt).token().to_char()) != common::rewrite_eval(&tree.surface()) {
                        sampled_lt_bad += 1;
                    }
                }
                Variant::Ln => {
                    if eval(&tree, Variant::Ln).token().to_char() != common::ln_reference(&tree) {
                        ln_bad += 1;
                    }
                }
            }
        }
    }
    outcome(
        lt_bad + sampled_lt_bad + ln_bad == 0,
        format!(
            "{} exhaustive sentences <= 16 tokens: {lt_bad} Lt disagreements; 10000 Lt samples: {sampled_lt_bad}; 10000 Ln samples vs c-command reference: {ln_bad}",
            all.len()
        ),
    )
}

fn c3_transparency() -> Outcome {
    let lt = transparency_check(Variant::Lt, &Pcfg::default_for(Variant::Lt), 10_000, DEFAULT_MAX_TOKENS, &mut rng::seeded(3))
        .unwrap();
    let ln = transparency_check(Variant::Ln, &Pcfg::default_for(Variant::Ln), 10_000, DEFAULT_MAX_TOKENS, &mut rng::seeded(3))
        .unwrap();
    let fig = check_tree_transparency(&parse_str(GOLDEN).unwrap(), Variant::Ln).unwrap();
    let fig_hit = fig
        .violations
        .iter()
        .any(|v| v.expression == "T" && v.in_situ_value == TruthValue::F && v.standalone_value == TruthValue::T);
    outcome(
        lt.violations.is_empty() && !ln.violations.is_empty() && fig_hit,
        format!(
            "Lt: {} violations over {} subexpressions; Ln: {} violations over {}; golden sentence flagged at the inverted T: {fig_hit}",
            lt.violations.len(),
            lt.nodes_checked,
            ln.violations.len(),
            ln.nodes_checked
        ),
    )
}

fn c4_pcfg_fidelity() -> Outcome {
    let pcfg = Pcfg::default_for(Variant::Lt);
    let sampler = Sampler::new(&pcfg, DEFAULT_MAX_TOKENS).unwrap();
    let mut counts = ExpansionCounts::default();
    let mut r = rng::seeded(4);
    let mut distinct = HashSet::new();
    let mut draws = 0usize;
    let mut draw_tokens = 0usize;
    while distinct.len() < 100_000 {
        let tree = sampler.sample_counted(&mut r, Some(&mut counts)).unwrap();
        draws += 1;
        draw_tokens += tree.token_len();
        distinct.insert(tree.surface());
    }
    let mean_distinct = distinct.iter().map(String::len).sum::<usize>() as f64 / distinct.len() as f64;
    let mean_draws = draw_tokens as f64 / draws as f64;
    let freqs = counts.e_frequencies();
    let want = [0.06, 0.06, 0.44, 0.22, 0.22];
    let freq_ok = freqs.iter().zip(want).all(|(f, w)| (f - w).abs() <= 0.01);
    let len_ok = (43.6..=53.6).contains(&mean_distinct);
    outcome(
        freq_ok && len_ok,
        format!(
            "mean length {mean_distinct:.1} over 100000 distinct sentences (target [43.6, 53.6]); {mean_draws:.1} over all {draws} draws; e-rule frequencies {:?}",
            freqs.map(|f| (f * 1000.0).round() / 1000.0)
        ),
    )
}

fn c5_corpus_closure() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (refl, sym) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = CorpusConfig::new(Variant::Lt, 100_000, 5).with_closure(refl, sym);
        let corpus = generate_pretraining_corpus(&cfg).unwrap();
        let violations = closure_violations(&corpus.lines, sym, refl, corpus.truncated_tail).len();
        // The absent property must really be absent.
        let reflexive_lines = corpus
            .lines
            .iter()
            .filter(|l| l.split_once('=').is_some_and(|(a, b)| a == b))
            .count();
        let mut oracle_failures = 0;
        for line in &corpus.lines {
            let (a, b) = parse_sequence(line).unwrap();
            if !assertion_oracle(&a, &b, Variant::Lt) {
                oracle_failures += 1;
            }
        }
        let ok = corpus.lines.len() == 100_000 && violations == 0 && oracle_failures == 0 && (refl || reflexive_lines == 0);
        pass &= ok;
        details.push(format!(
            "{}refl{}sym: {} closure, {} oracle",
            if refl { '+' } else { '-' },
            if sym { '+' } else { '-' },
            violations,
            oracle_failures
        ));
    }
    outcome(pass, details.join("; "))
}

fn c9_gradients() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for arch in [Arch::Alm, Arch::Mlm] {
        let model = Transformer::<f64>::init(&ModelConfig::tiny(arch, 9)).unwrap();
        let mut r = rng::seeded(99);
        let seqs: Vec<Vec<u32>> = (0..4)
            .map(|k| {
                let mut s = vec![vocab::BOS];
                s.extend((0..5 + k).map(|_| r.random_range(0..8u32)));
                s.push(vocab::EOS);
                s
            })
            .collect();
        let (batch, targets) = match arch {
            Arch::Alm => {
                let b = Batch::new(&seqs);
                let t = alm_targets(&b);
                (b, t)
            }
            Arch::Mlm => mlm_corrupt(&seqs, 0.4, &mut r),
        };
        let (_, grads) = loss_and_grad(&model, &batch, &targets, None).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let i = r.random_range(0..model.params.len());
            let mut plus = model.clone();
            plus.params[i] += h;
            let mut minus = model.clone();
            minus.params[i] -= h;
            let fd = (loss_only(&plus, &batch, &targets).unwrap() - loss_only(&minus, &batch, &targets).unwrap()) / (2.0 * h);
            worst = worst.max((fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6));
        }
        pass &= worst < 1e-3;
        details.push(format!("{arch}: worst relative error {worst:.2e} over 100 coordinates"));
    }
    outcome(pass, details.join("; "))
}

fn groups(t: &[f64], o: &[f64]) -> Vec<VerbGroupStats> {
    let mk = |name: String, m: f64, class| VerbGroupStats {
        verb: name,
        class,
        mean_cosine: m,
        n_pairs: 10,
    };
    t.iter()
        .enumerate()
        .map(|(i, &m)| mk(format!("t{i}"), m, VerbClass::Transparent))
        .chain(o.iter().enumerate().map(|(i, &m)| mk(format!("o{i}"), m, VerbClass::Opaque)))
        .collect()
}

fn c10_statistics() -> Outcome {
    let planted = groups(&[0.91, 0.92, 0.93, 0.94, 0.95, 0.96], &[0.51, 0.52, 0.53, 0.54, 0.55, 0.56]);
    let exact = permutation_test(&planted, 0).unwrap();
    let exact_ok = exact.method == TestMethod::ExactPermutation && exact.n_resamples == 924 && exact.p_two_sided == 2.0 / 924.0;

    let mut rejections = 0;
    for i in 0..200 {
        let mut r = rng::stream(10, i);
        let mut draw = || -> Vec<f64> { (0..6).map(|_| StandardNormal.sample(&mut r)).collect() };
        let (t, o) = (draw(), draw());
        if permutation_test(&groups(&t, &o), i).unwrap().p_two_sided <= 0.05 {
            rejections += 1;
        }
    }
    let fraction = rejections as f64 / 200.0;
    let calibrated = (0.01..=0.10).contains(&fraction);

    let a = bootstrap_test(&planted, 2000, 17).unwrap();
    let b = bootstrap_test(&planted, 2000, 17).unwrap();
    let reproducible = a == b;
    outcome(
        exact_ok && calibrated && reproducible,
        format!(
            "{} relabelings, p = {:.6} (2/924 = {:.6}); null rejection rate {fraction:.3} over 200 datasets; bootstrap p {} reproducible: {reproducible}",
            exact.n_resamples,
            exact.p_two_sided,
            2.0 / 924.0,
            a.p_two_sided
        ),
    )
}

fn c11_opacity() -> Outcome {
    let inv = VerbInventory::default();
    let reg = TemplateRegistry::default();
    let g = Generator::new(&inv, &reg).unwrap();
    let yuri = FactEntry::new("Yuri Gagarin", "the first person in space", "person");
    let lao = FactEntry::new("Lao", "the official language of Laos", "official-language");
    let wants = Clause {
        fact: &yuri,
        pronoun: Pronoun::She,
        frame: Frame::Embedded("wants".into()),
    };
    let speaks = Clause {
        fact: &lao,
        pronoun: Pronoun::He,
        frame: Frame::MainTransparent,
    };
    let mut problems = Vec::new();
    let mut expect = |p: &OpacityPair, a: &str, b: &str, label: &str| {
        if p.a != a || p.b != b || p.label.as_str() != label {
            problems.push(format!("{:?} / {:?} / {}", p.a, p.b, p.label));
        }
    };
    let ex2 = g.simple_pair(&wants).unwrap();
    expect(&ex2, "She wants to meet Yuri Gagarin.", "She wants to meet the first person in space.", "non_equivalent");
    let ex3 = g.simple_pair(&speaks).unwrap();
    expect(&ex3, "He speaks Lao.", "He speaks the official language of Laos.", "equivalent");
    let ex5 = g.coordinated_pair(&speaks, &wants, 0).unwrap();
    expect(
        &ex5,
        "He speaks Lao and she wants to meet Yuri Gagarin.",
        "He speaks the official language of Laos and she wants to meet Yuri Gagarin.",
        "equivalent",
    );
    let ex6 = g.coordinated_pair(&speaks, &wants, 1).unwrap();
    expect(
        &ex6,
        "He speaks Lao and she wants to meet Yuri Gagarin.",
        "He speaks Lao and she wants to meet the first person in space.",
        "non_equivalent",
    );

    let facts = vec![yuri.clone(), lao.clone()];
    let simple = g.generate_simple_pairs(&facts).unwrap();
    let emitted = [&ex2, &ex3].iter().all(|e| simple.iter().any(|p| p.a == e.a && p.b == e.b && p.label == e.label));

    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let inventory_ok = inv.transparent == s(&["starts", "begins", "ceases", "stops", "managed", "failed"])
        && inv.opaque == s(&["wants", "intends", "hopes", "begs", "preferred", "suggested"])
        && inv.mainclause_opaque == "dislikes";

    let coordinated = g.generate_coordinated_pairs(&facts, &mut rng::seeded(11), 100).unwrap();
    let split = split_dataset(&coordinated, [8.0, 1.0, 1.0], 11);
    let split_ok = (split.train.len(), split.valid.len(), split.test.len()) == (80, 10, 10);
    let n = simple.len();
    let simple_split = split_dataset(&simple, [8.0, 1.0, 1.0], 11);
    let sizes = [simple_split.train.len(), simple_split.valid.len(), simple_split.test.len()];
    let simple_split_ok = sizes.iter().sum::<usize>() == n
        && sizes.iter().zip([0.8, 0.1, 0.1]).all(|(&k, r)| (k as f64 - r * n as f64).abs() < 1.0);

    outcome(
        problems.is_empty() && emitted && inventory_ok && split_ok && simple_split_ok,
        format!(
            "examples 2/3/5/6 mismatches: {problems:?}; simple generator emits 2/3: {emitted}; inventories: {inventory_ok}; 100 coordinated -> {}/{}/{}; {n} simple -> {sizes:?}",
            split.train.len(),
            split.valid.len(),
            split.test.len()
        ),
    )
}

/// Desk-scale runs shared by the training criteria.
struct Lab {
    lt_probe: ProbeData,
    ln_probe: ProbeData,
    random: Option<Checkpoint>,
    lt_full: Option<(Checkpoint, f64)>,
}

const SENTENCE_CAP: usize = 32;
const CORPUS_LINES: usize = 200_000;
const EVAL_SENTENCES: usize = 1000;
const PROBE_SEEDS: u64 = 5;

fn corpus_config(variant: Variant, closure: bool) -> CorpusConfig {
    CorpusConfig::new(variant, CORPUS_LINES, 100)
        .with_closure(closure, closure)
        .with_sentence_cap(SENTENCE_CAP)
}

impl Lab {
    fn new() -> Lab {
        let mut exclude = HashSet::new();
        for closure in [true, false] {
            exclude.extend(generate_pretraining_corpus(&corpus_config(Variant::Lt, closure)).unwrap().sentences);
        }
        let lt_probe = generate_probe_data(
            &ProbeDataConfig::new(Variant::Lt, 200).with_sentence_cap(SENTENCE_CAP),
            SplitSpec::new(10_000, 1_000, 2_000),
            &exclude,
        )
        .unwrap();
        let ln_exclude = generate_pretraining_corpus(&corpus_config(Variant::Ln, true)).unwrap().sentence_set();
        let ln_probe = generate_probe_data(
            &ProbeDataConfig::new(Variant::Ln, 201).with_sentence_cap(SENTENCE_CAP),
            SplitSpec::new(0, 0, 2_000),
            &ln_exclude,
        )
        .unwrap();
        Lab {
            lt_probe,
            ln_probe,
            random: None,
            lt_full: None,
        }
    }

    fn random(&mut self) -> &Checkpoint {
        self.random
            .get_or_insert_with(|| random_init_model(&ModelConfig::desk(Arch::Alm, 0), 0).unwrap())
    }

    /// Trained Lt ALM with reflexivity and symmetry, and its training time.
    fn lt_full(&mut self) -> (&Checkpoint, f64) {
        if self.lt_full.is_none() {
            self.lt_full = Some(pretrain(Variant::Lt, true));
        }
        let (c, s) = self.lt_full.as_ref().unwrap();
        (c, *s)
    }
}

fn pretrain(variant: Variant, closure: bool) -> (Checkpoint, f64) {
    let t = Instant::now();
    let corpus = generate_pretraining_corpus(&corpus_config(variant, closure)).unwrap();
    let data: Vec<Vec<u32>> = corpus
        .lines
        .iter()
        .map(|l| vocab::with_specials(&tokenize(l).unwrap()))
        .collect();
    let mut model = Transformer::<f32>::init(&ModelConfig::desk(Arch::Alm, 0)).unwrap();
    let cfg = TrainConfig::desk(Arch::Alm, 0);
    let report = train_model(&mut model, &data, &cfg, |_, _| {}).unwrap();
    eprintln!(
        "  pretrained {variant} {} in {:.0}s: loss {:.3} -> {:.3}",
        if closure { "+refl+sym" } else { "-refl-sym" },
        t.elapsed().as_secs_f64(),
        report.first_loss.unwrap_or(f64::NAN),
        report.final_loss.unwrap_or(f64::NAN)
    );
    (Checkpoint::new(model), t.elapsed().as_secs_f64())
}

fn eval_sentences(data: &ProbeData) -> Vec<SynTree> {
    let mut seen = HashSet::new();
    data.test
        .iter()
        .flat_map(|r| [r.a.clone(), r.b.clone()])
        .filter(|s| seen.insert(s.clone()))
        .take(EVAL_SENTENCES)
        .map(|s| parse_sentence(&s).unwrap())
        .collect()
}

fn probe_accuracy(encoder: &Checkpoint, data: &ProbeData) -> MeanStd {
    let bank = FeatureBank::from_encoder(encoder, Pooling::MinusAttn, &[&data.train, &data.valid, &data.test]).unwrap();
    let accs: Vec<f64> = (0..PROBE_SEEDS)
        .map(|seed| {
            let cfg = ProbeConfig::desk(Pooling::MinusAttn, seed);
            let (probe, _) = train_probe_on_bank(&bank, &data.train, &data.valid, &cfg).unwrap();
            eval_probe_on_bank(&bank, &probe, &data.test).unwrap().accuracy
        })
        .collect();
    MeanStd::of(&accs)
}

fn c6_emulation_trend(lab: &mut Lab) -> Outcome {
    let t = Instant::now();
    let lt_sents = eval_sentences(&lab.lt_probe);
    let ln_sents = eval_sentences(&lab.ln_probe);
    let random = direct_eval_alm(lab.random(), &lt_sents, Variant::Lt).unwrap();
    let (lt_ckpt, _) = lab.lt_full();
    let lt = direct_eval_alm(lt_ckpt, &lt_sents, Variant::Lt).unwrap();
    let (ln_ckpt, _) = pretrain(Variant::Ln, true);
    let ln = direct_eval_alm(&ln_ckpt, &ln_sents, Variant::Ln).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let gap = 100.0 * (lt.mean - random.mean);
    let pass = lt.mean >= 0.70
        && (random.mean - 0.5).abs() <= 0.03
        && gap >= 20.0
        && lt.mean >= ln.mean
        && secs <= 45.0 * 60.0;
    outcome(
        pass,
        format!(
            "ALM Lt {} (target >= 70), random {} (target 50 ± 3), gap {gap:.1} (target >= 20), ALM Ln {}; {:.1} min (limit 45)",
            lt.summary(),
            random.summary(),
            ln.summary(),
            secs / 60.0
        ),
    )
}

fn c7_probe_controls(lab: &mut Lab) -> Outcome {
    let t = Instant::now();
    let data = lab.lt_probe.clone();
    let random = probe_accuracy(lab.random(), &data);

    let mut r = rng::seeded(7);
    let d = 16;
    let mut vecs = Vec::new();
    let mut pairs = Vec::new();
    while pairs.len() < 6000 {
        let a: Vec<f32> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let dot: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        if dot.abs() < 0.3 {
            continue;
        }
        let k = pairs.len();
        let (sa, sb) = (format!("a{k}"), format!("b{k}"));
        pairs.push(Planted(sa.clone(), sb.clone(), emulab::corpus::PairLabel::from_equal(dot > 0.0)));
        vecs.push((sa, a));
        vecs.push((sb, b));
    }
    let bank = FeatureBank::from_vectors(vecs).unwrap();
    let mut cfg = ProbeConfig::desk(Pooling::MinusAttn, 0);
    cfg.lr = 1e-2;
    cfg.epochs = 40;
    let (probe, _) = train_probe_on_bank(&bank, &pairs[..4800], &pairs[4800..5400], &cfg).unwrap();
    let planted = eval_probe_on_bank(&bank, &probe, &pairs[5400..]).unwrap().accuracy;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        (random.mean - 0.5).abs() <= 0.02 && planted >= 0.99 && secs < 600.0,
        format!(
            "random-init encoder {} over {} seeds (target 50 ± 2); planted {:.1}% (target >= 99); {:.1} min (limit 10)",
            random,
            random.n,
            100.0 * planted,
            secs / 60.0
        ),
    )
}

#[derive(Clone)]
struct Planted(String, String, emulab::corpus::PairLabel);

impl emulab::corpus::LabeledPair for Planted {
    fn sentence_a(&self) -> &str {
        &self.0
    }

    fn sentence_b(&self) -> &str {
        &self.1
    }

    fn label(&self) -> emulab::corpus::PairLabel {
        self.2
    }
}

fn c8_grounding_ablation(lab: &mut Lab) -> Outcome {
    let t = Instant::now();
    let data = lab.lt_probe.clone();
    let (full, full_train) = lab.lt_full();
    let with = probe_accuracy(full, &data);
    let (bare, _) = pretrain(Variant::Lt, false);
    let without = probe_accuracy(&bare, &data);
    let secs = t.elapsed().as_secs_f64() + full_train;
    let diff = 100.0 * (with.mean - without.mean);
    outcome(
        diff >= 10.0 && secs <= 90.0 * 60.0,
        format!(
            "probe +refl+sym {with}, -refl-sym {without}, difference {diff:.1} points (target >= 10); {:.1} min (limit 90)",
            secs / 60.0
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.trim_start_matches(['c', 'C']).parse().ok())
        .collect();
    let run = |k: usize| wanted.is_empty() || wanted.contains(&k);

    type Check = fn() -> Outcome;
    let quick: [(usize, &str, f64, Check); 8] = [
        (1, "golden semantics", 1.0, c1_golden_semantics),
        (2, "oracle equivalence", 60.0, c2_oracle_equivalence),
        (3, "transparency dichotomy", 60.0, c3_transparency),
        (4, "PCFG fidelity", 120.0, c4_pcfg_fidelity),
        (5, "corpus closure", 300.0, c5_corpus_closure),
        (9, "gradient correctness", 120.0, c9_gradients),
        (10, "statistics", 120.0, c10_statistics),
        (11, "opacity generator goldens", 1.0, c11_opacity),
    ];
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    for (k, name, limit, f) in quick {
        if !run(k) {
            continue;
        }
        let t = Instant::now();
        let mut o = f();
        let secs = t.elapsed().as_secs_f64();
        if secs > limit {
            o.pass = false;
            o.detail.push_str(&format!("; over the {limit}s limit"));
        }
        report(k, name, &o, secs);
        results.push((k, name, o, secs));
    }

    type Heavy = fn(&mut Lab) -> Outcome;
    let heavy: [(usize, &str, Heavy); 3] = [
        (7, "probe controls", c7_probe_controls),
        (6, "desk-scale emulation trend", c6_emulation_trend),
        (8, "grounding ablation trend", c8_grounding_ablation),
    ];
    if heavy.iter().any(|(k, _, _)| run(*k)) {
        let mut lab = Lab::new();
        for (k, name, f) in heavy {
            if !run(k) {
                continue;
            }
            let t = Instant::now();
            let o = f(&mut lab);
            let secs = t.elapsed().as_secs_f64();
            report(k, name, &o, secs);
            results.push((k, name, o, secs));
        }
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!();
    println!("acceptance summary: {} passed, {} failed", results.len() - failed.len(), failed.len());
    for (k, name, o, secs) in &results {
        println!("{} criterion {k:>2} {name} ({secs:.1}s)", if o.pass { "PASS" } else { "FAIL" });
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn report(k: usize, name: &str, o: &Outcome, secs: f64) {
    println!("{} criterion {k:>2} {name}: {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}
