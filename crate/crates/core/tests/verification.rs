//! Consistency scoring, candidate selection and the two-phase protocol.

use std::sync::Arc;

use bpo_core::endpoint::{LocalEndpoint, ModelEndpoint};
use bpo_core::model_sim::{default_family, ModelRegistry, DEFAULT_FAMILY_SEED};
use bpo_core::rng::KeyedRng;
use bpo_core::suffix_opt::{baseline_random, AttackConfig};
use bpo_core::verify::{
    consistency_from_counts, consistency_score, decide, evaluate_prompt, metrics, owner_phase, run_benchmark, select_best_candidate,
    user_phase, Candidate, Method, PromptKind, Verdict, VerificationPackage, VerifyConfig,
};
use bpo_core::Prompt;
use proptest::prelude::*;

fn family() -> ModelRegistry {
    default_family(DEFAULT_FAMILY_SEED).unwrap()
}

fn binomial(n: u64, k: u64, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// A random-suffix prompt whose retain probability on `model_idx` is close
/// to `want`.
fn prompt_with_retain(f: &ModelRegistry, model_idx: usize, want: f64) -> (Prompt, f64) {
    let benign = f.tokenize("a photo of a corgi").unwrap();
    let model = &f.models[model_idx];
    let mut best: Option<(Prompt, f64)> = None;
    for i in 0..20_000u64 {
        let p = baseline_random(&benign, 8, f.vocab.len(), &mut KeyedRng::new(&[99, i])).unwrap();
        let r = f.retain_probability(model, &model.encode(&p).unwrap(), 0).unwrap();
        if best.as_ref().is_none_or(|b| (r - want).abs() < (b.1 - want).abs()) {
            best = Some((p, r));
        }
    }
    best.unwrap()
}

#[test]
fn consistency_on_tenths() {
    for k in 0..=10 {
        let r = k as f64 / 10.0;
        assert_eq!(consistency_score(r).unwrap(), (2.0 * r - 1.0).abs());
    }
}

#[test]
fn table_one_arithmetic() {
    let mut outcomes = vec![(true, Verdict::Target)];
    outcomes.extend(std::iter::repeat_n((false, Verdict::Target), 5));
    let m = metrics(&outcomes).unwrap();
    let r2 = |x: f64| (x * 100.0).round() / 100.0;
    assert_eq!((r2(m.accuracy), r2(m.precision), r2(m.recall), r2(m.f1)), (0.17, 0.17, 1.0, 0.29));
    let mut perfect = vec![(true, Verdict::Target)];
    perfect.extend(std::iter::repeat_n((false, Verdict::NotTarget), 4));
    let m = metrics(&perfect).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
}

proptest! {
    #[test]
    fn decide_is_monotone(c_v in 0.0f64..=1.0, c_t in 0.0f64..=1.0, shrink in 0.0f64..=1.0) {
        if decide(c_v, c_t).unwrap() == Verdict::Target {
            prop_assert_eq!(decide(c_v * shrink, c_t).unwrap(), Verdict::Target);
        }
    }

    #[test]
    fn metrics_ignore_order(flags in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40), seed in any::<u64>()) {
        let outcomes: Vec<(bool, Verdict)> = flags
            .iter()
            .map(|&(t, v)| (t, if v { Verdict::Target } else { Verdict::NotTarget }))
            .collect();
        let mut shuffled = outcomes.clone();
        let mut rng = KeyedRng::from_seed(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        prop_assert_eq!(metrics(&outcomes).unwrap(), metrics(&shuffled).unwrap());
        let m = metrics(&outcomes).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if m.precision + m.recall > 0.0 {
            prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
        }
    }
}

#[test]
fn reports_are_consistent_and_endpoint_agnostic() {
    let f = Arc::new(family());
    let (prompt, _) = prompt_with_retain(&f, 1, 0.5);
    let text = prompt.render(&f.vocab);
    let local = LocalEndpoint::for_model(f.clone(), "model-1").unwrap();
    let borrowed = ModelEndpoint::new(&f, &f.models[1]);
    let a = evaluate_prompt(&local, &f, &text, "corgi", 50, 123).unwrap();
    let b = evaluate_prompt(&borrowed, &f, &text, "corgi", 50, 123).unwrap();
    assert_eq!(a, b);
    let deviating = a.judgments.iter().filter(|&&d| d).count();
    assert_eq!(a.r, deviating as f64 / 50.0);
    assert!((a.c - (2.0 * a.r - 1.0).abs()).abs() < 1e-15);
    assert_eq!(a.seed_schedule, (123..173).collect::<Vec<u64>>());
    assert_eq!(a.alignment_scores.len(), 50);
    assert!(deviating > 0 && deviating < 50);
}

#[test]
fn selection_prefers_the_unstable_candidate() {
    let f = family();
    let benign = f.tokenize("a photo of a corgi").unwrap();
    let (unstable, p) = prompt_with_retain(&f, 0, 0.5);
    assert!((p - 0.5).abs() < 0.1, "{p}");
    let stable = Candidate { benign: benign.clone(), prompt: benign.clone(), origin: 0 };
    let shaky = Candidate { benign: benign.clone(), prompt: unstable, origin: 0 };
    let s = select_best_candidate(&f, &f.models[0], &[stable.clone(), shaky.clone()], 10_000, 5).unwrap();
    assert_eq!(s.index, 1);
    let s = select_best_candidate(&f, &f.models[0], &[shaky, stable.clone()], 10_000, 5).unwrap();
    assert_eq!(s.index, 0);
    let single = select_best_candidate(&f, &f.models[0], &[stable.clone()], 10, 5).unwrap();
    assert_eq!(single.index, 0);
    // identical candidates tie; the first wins
    let s = select_best_candidate(&f, &f.models[0], &[stable.clone(), stable], 10, 5).unwrap();
    assert_eq!(s.index, 0);
    assert!(select_best_candidate(&f, &f.models[0], &[], 10, 5).is_err());
}

#[test]
fn normal_package_is_the_benign_prompt() {
    let f = family();
    let cfg = VerifyConfig::default();
    let pkg = owner_phase(&f, &f.models[2], Method::Normal, &["a photo of a corgi".to_string()], &cfg).unwrap();
    assert_eq!(pkg.verification_prompt.text, "a photo of a corgi");
    assert_eq!(pkg.c_t, 1.0);
    assert_eq!(pkg.origin_concept, "corgi");
    let again = owner_phase(&f, &f.models[2], Method::Normal, &["a photo of a corgi".to_string()], &cfg).unwrap();
    assert_eq!(pkg.to_json().unwrap(), again.to_json().unwrap());
    assert_eq!(VerificationPackage::from_json(&pkg.to_json().unwrap()).unwrap(), pkg);
}

#[test]
fn bpo_package_is_unstable_on_its_target() {
    let f = family();
    let cfg = VerifyConfig { per_prompt_candidates: 3, ..VerifyConfig::default() };
    let prompts: Vec<String> = f.benign_prompts[..3].to_vec();
    let pkg = owner_phase(&f, &f.models[0], Method::Bpo, &prompts, &cfg).unwrap();
    eprintln!("bpo package on model-0: C_t = {} prompt {:?}", pkg.c_t, pkg.verification_prompt.text);
    assert!(pkg.c_t < 1.0);
    assert_eq!(pkg.prompt_kind, PromptKind::PV);
    let again = owner_phase(&f, &f.models[0], Method::Bpo, &prompts, &cfg).unwrap();
    assert_eq!(pkg.to_json().unwrap(), again.to_json().unwrap());
}

fn package_for(f: &ModelRegistry, target: usize, prompt: &Prompt, c_t: f64) -> VerificationPackage {
    VerificationPackage {
        target_model_id: f.models[target].id.clone(),
        method: Method::Bpo,
        prompt_kind: PromptKind::PV,
        benign_prompt: "a photo of a corgi".into(),
        origin_concept: "corgi".into(),
        verification_prompt: bpo_core::pipeline::PromptRecord::new(prompt, &f.vocab),
        c_t,
        n_images: 10,
        seed_schedule: (0..10).collect(),
        selection_std: 0.0,
        pool_size: 1,
    }
}

#[test]
fn stable_endpoint_is_rejected() {
    let f = family();
    let (prompt, p) = prompt_with_retain(&f, 0, 0.5);
    // find a model that is decisive at this prompt
    let stable = (1..f.models.len())
        .find(|&i| {
            let r = f.retain_probability(&f.models[i], &f.models[i].encode(&prompt).unwrap(), 0).unwrap();
            !(0.001..=0.999).contains(&r)
        })
        .expect("some model is decisive");
    eprintln!("target retain {p:.3}, stable model {stable}");
    let pkg = package_for(&f, 0, &prompt, consistency_from_counts(1, 10).unwrap());
    let ep = ModelEndpoint::new(&f, &f.models[stable]);
    for s in 0..100 {
        let (verdict, report) = user_phase(&pkg, &ep, &f, 10_000 + 10 * s).unwrap();
        assert_eq!(report.c, 1.0);
        assert_eq!(verdict, Verdict::NotTarget);
    }
}

#[test]
fn self_acceptance_follows_the_closed_form() {
    let f = family();
    let (prompt, p) = prompt_with_retain(&f, 3, 0.5);
    let ep = ModelEndpoint::new(&f, &f.models[3]);
    // C_t as the owner would compute it from k of 10 deviating images.
    for k in [5, 4, 3, 2] {
        let c_t = consistency_from_counts(k, 10).unwrap();
        let pkg = package_for(&f, 3, &prompt, c_t);
        let runs = 400;
        let accepted = (0..runs)
            .filter(|&s| user_phase(&pkg, &ep, &f, 5_000_000 + 10 * s).unwrap().0 == Verdict::Target)
            .count();
        let freq = accepted as f64 / runs as f64;
        let expected: f64 = (0..=10u64)
            .filter(|&j| (5i64 - j as i64).abs() <= 5 - k as i64)
            .map(|k| binomial(10, k, 1.0 - p))
            .sum();
        let sd = (expected * (1.0 - expected) / runs as f64).sqrt();
        eprintln!("retain {p:.3} C_t {c_t}: accepted {freq:.3}, closed form {expected:.3}");
        assert!((freq - expected).abs() <= 4.0 * sd + 1e-9);
    }
}

#[test]
fn identical_models_do_not_crash_the_benchmark() {
    let mut f = family();
    f.models.truncate(1);
    let mut twin = f.models[0].clone();
    twin.id = "model-twin".into();
    f.models.push(twin);
    let cfg = VerifyConfig { per_prompt_candidates: 2, ..VerifyConfig::default() };
    let rep = run_benchmark(&f, Method::Random, PromptKind::PV, &cfg).unwrap();
    assert_eq!(rep.rows.len(), 2);
    let avg = rep.average.unwrap();
    assert!((0.0..=1.0).contains(&avg.accuracy));
}

#[test]
fn benchmark_rows_are_reproducible_and_recall_tracks_self_acceptance() {
    let f = family();
    let cfg = VerifyConfig { attack: AttackConfig { max_iters: 5, ..AttackConfig::default() }, ..VerifyConfig::default() };
    for method in [Method::Normal, Method::Random, Method::Greedy] {
        let a = run_benchmark(&f, method, PromptKind::PV, &cfg).unwrap();
        let b = run_benchmark(&f, method, PromptKind::PV, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        for row in &a.rows {
            let m = row.metrics.unwrap();
            let own = row.evaluations.iter().find(|e| e.is_target).unwrap();
            assert_eq!(m.recall == 1.0, own.verdict == Verdict::Target);
        }
    }
}
