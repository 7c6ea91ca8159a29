mod common;

use std::collections::BTreeSet;
use std::path::Path;

use driverforge::bank::{dedup_key, Admission, SeedBank};
use driverforge::config::CampaignConfig;
use driverforge::constraints::{infer_static, InferenceConfig};
use driverforge::coverage::{Branch, BranchSet};
use driverforge::gateway::{default_models, CostLedger};
use driverforge::prompt::{build_prompt, PromptLimits, PromptSpec, DEFAULT_TEMPLATE};
use driverforge::scheduler::{choose_by_energy, crossover_at, energy, ApiCombination, ApiStats};
use proptest::prelude::*;
use rand::SeedableRng;

fn branch_set() -> impl Strategy<Value = BranchSet> {
    prop::collection::vec((0usize..3, 0u32..20), 0..25)
        .prop_map(|v| v.into_iter().map(|(f, id)| Branch { func: ["f", "g", "h"][f].into(), id }).collect())
}

fn names() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0usize..8, 1..8).prop_map(|v| v.into_iter().map(|i| format!("a{i}")).collect())
}

proptest! {
    #[test]
    fn energy_is_bounded_and_vanishes_at_full_coverage(
        cov in 0.0f64..=1.0, s in 0u64..10_000, p in 0u64..10_000, e in 0.0f64..4.0,
    ) {
        let v = energy(cov, s, p, e);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(v <= 1.0 - cov + 1e-15);
        prop_assert_eq!(energy(1.0, s, p, e), 0.0);
        prop_assert!(energy(cov, s + 1, p, e) <= v);
    }

    #[test]
    fn crossover_stays_in_bounds(a in names(), b in names(), c1 in 0usize..8, c2 in 0usize..8, max in 1usize..10) {
        let mut first: Vec<String> = Vec::new();
        for x in a {
            if !first.contains(&x) {
                first.push(x);
            }
        }
        let cut1 = 1 + c1 % first.len();
        let out = crossover_at(&first, &b, cut1, c2 % b.len(), max);
        let distinct: BTreeSet<&String> = out.iter().collect();
        prop_assert_eq!(distinct.len(), out.len());
        prop_assert!(!out.is_empty() && out.len() <= max);
        prop_assert!(out.iter().all(|x| first.contains(x) || b.contains(x)));
        prop_assert_eq!(&out[0], &first[0]);
        prop_assert!(ApiCombination::new(out).is_ok());
    }

    #[test]
    fn combinations_reject_duplicates(v in names()) {
        let distinct: BTreeSet<&String> = v.iter().collect();
        prop_assert_eq!(ApiCombination::new(v.clone()).is_ok(), distinct.len() == v.len());
    }

    #[test]
    fn zero_energy_is_never_drawn_beside_positive(energies in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..3.0], 1..8), seed in any::<u64>()) {
        let stats: Vec<ApiStats> =
            energies.iter().enumerate().map(|(i, &e)| ApiStats { energy: e, ..ApiStats::new(format!("a{i}")) }).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let any_positive = energies.iter().any(|&e| e > 0.0);
        for _ in 0..20 {
            let pick = choose_by_energy(&stats, &mut rng).unwrap();
            let e = stats.iter().find(|s| s.api == pick).unwrap().energy;
            prop_assert!(!any_positive || e > 0.0);
        }
    }

    #[test]
    fn merge_is_union(a in branch_set(), b in branch_set()) {
        let mut ab = a.clone();
        let new = ab.merge(&b);
        let union: BTreeSet<Branch> = a.covered.union(&b.covered).cloned().collect();
        prop_assert_eq!(&ab.covered, &union);
        prop_assert_eq!(new, union.len() - a.len());
        let mut ba = b.clone();
        ba.merge(&a);
        prop_assert_eq!(&ab, &ba);
        prop_assert_eq!(ab.clone().merge(&b), 0);
    }

    #[test]
    fn admission_marks_unique_and_scores_quality(
        covs in prop::collection::vec((branch_set(), 0u64..6), 1..12),
    ) {
        let mut bank = SeedBank::new("lib");
        let mut seen = BranchSet::new();
        for (i, (cov, density)) in covs.iter().enumerate() {
            let fresh = cov.difference(&seen).len() as u64;
            let s = bank
                .admit(Admission {
                    source: format!("int s{i};"),
                    ast_json: "{}".into(),
                    combination: ApiCombination::new(vec!["f".into()]).unwrap(),
                    coverage: cov.clone(),
                    density: *density,
                    critical: Vec::new(),
                    apis_called: vec!["f".into()],
                    iteration: i as u64,
                })
                .unwrap();
            seen.merge(cov);
            prop_assert_eq!(s.unique_branches, fresh);
            prop_assert_eq!(s.is_unique, fresh > 0);
            prop_assert_eq!(s.quality, density * (1 + fresh));
        }
        bank.update_qualities();
        prop_assert!(bank.unique_seeds().all(|s| s.quality == s.density * (1 + s.unique_branches)));
        prop_assert_eq!(bank.global(), &seen);
        prop_assert_eq!(bank.pivots().len(), bank.unique_seeds().count());
    }

    #[test]
    fn ledger_total_is_the_sum_of_entries(calls in prop::collection::vec((0usize..2, 0u64..20_000, 0u64..20_000), 0..40)) {
        let models = default_models();
        let mut l = CostLedger::default();
        for &(m, p, c) in &calls {
            l.record(&models[m], p, c);
        }
        prop_assert_eq!(l.total.0, l.entries.iter().map(|e| e.cost.0).sum::<u128>());
        prop_assert_eq!(l.entries.len(), calls.len());
    }

    #[test]
    fn same_frames_share_a_dedup_key(pid in 1u32..99_999, a1 in any::<u32>(), a2 in any::<u32>(), line in 1u32..500) {
        let report = |pid: u32, addr: u32, line: u32| format!(
            "=={pid}==ERROR: AddressSanitizer: heap-buffer-overflow on address 0x{addr:x}\n\
             #0 0x{addr:x} in __asan_memcpy (/x/libasan.so+0x1)\n\
             #1 0x{:x} in tc_feed /src/toycodec.c:{line}:5\n\
             #2 0x{:x} in LLVMFuzzerTestOneInput /work/it3-s1/prog.c:9:3\n",
            addr ^ 0x40, addr ^ 0x80,
        );
        let (k1, f1) = dedup_key(&report(pid, a1, line));
        let (k2, f2) = dedup_key(&report(pid.wrapping_add(7), a2, line + 1));
        prop_assert!(!f1 && !f2);
        prop_assert_eq!(k1, k2);
    }

    #[test]
    fn prompt_shows_every_combination_signature(pick in prop::collection::btree_set(0usize..18, 1..8), pad in 0usize..18) {
        static MODEL: std::sync::OnceLock<driverforge::library::LibraryModel> = std::sync::OnceLock::new();
        let m = MODEL.get_or_init(common::toycodec_model);
        let apis: Vec<_> = pick.iter().filter_map(|&i| m.apis.get(i).cloned()).collect();
        prop_assume!(!apis.is_empty());
        let comb = ApiCombination::new(apis.iter().map(|a| a.name.clone()).collect()).unwrap();
        let mut spec = PromptSpec::new(comb, apis.clone());
        spec.padding = m.apis.iter().take(pad).cloned().collect();
        spec.context_types = m.types_for(&apis).unwrap();
        let limits = PromptLimits { padding_budget: 400, ..PromptLimits::default() };
        let text = build_prompt(DEFAULT_TEMPLATE, &spec, limits).unwrap();
        for a in &apis {
            prop_assert!(text.contains(&a.signature()), "missing {}", a.name);
        }
        prop_assert_eq!(text.clone(), build_prompt(DEFAULT_TEMPLATE, &spec, limits).unwrap());
    }

    #[test]
    fn config_validation_enforces_ranges(n in 0u32..3, temp in -1.0f64..3.0, budget in -1.0f64..2.0, patience in 0u64..3) {
        let mut c = CampaignConfig::parse(
            "[library]\nsources = [\"a.c\"]\nheaders = [\"a.h\"]\n[generator.backend]\nkind = \"stub\"\npool = \"p.toml\"\n",
            Path::new("/"),
        )
        .unwrap();
        c.generator.n_samples = n;
        c.generator.temperature = temp;
        c.generator.gateway.budget = Some(budget);
        c.patience = patience;
        let ok = n >= 1 && (0.0..=2.0).contains(&temp) && budget > 0.0 && patience >= 1;
        prop_assert_eq!(c.validate().is_ok(), ok);
    }
}

/// Relational kinds carry their array argument; the others never do.
#[test]
fn related_arg_only_on_relational_kinds() {
    let progs: Vec<_> = common::seed_programs().into_iter().map(|(_, p)| p).collect();
    let cs = infer_static(&progs, &InferenceConfig::default());
    assert!(!cs.is_empty());
    for c in &cs {
        assert_eq!(c.related_arg.is_some(), c.kind.is_relational(), "{c:?}");
        assert!(c.support >= 1);
    }
}

/// Every API's signature appears in the library model exactly once, with
/// its parameters in declaration order.
#[test]
fn fixture_model_has_unique_ordered_apis() {
    let m = common::toycodec_model();
    let names: Vec<String> = m.apis.iter().map(|a| a.name.clone()).collect();
    let distinct: BTreeSet<&String> = names.iter().collect();
    assert_eq!(distinct.len(), names.len());
    let feed = m.api("tc_feed").unwrap();
    let params: Vec<&str> = feed.params.iter().map(|p| p.name.as_deref().unwrap_or("")).collect();
    assert_eq!(params, ["c", "buf", "len"]);
    assert!(m.branch_totals.keys().all(|f| m.call_graph.contains_key(f)));
}
