mod common;

use common::{gen_header, gen_world, oracle_decide, Outcome};
use dada_core::compiler::{compile, diff_rulesets, lookup, Decision};
use dada_core::mud::{
    canonicalize, content_hash, parse_mud, to_json_string, validate_profile, Ace, AceAction, MatchCriteria,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_profiles_are_valid(seed in any::<u64>()) {
        let w = gen_world(seed, true);
        prop_assert_eq!(validate_profile(&w.profile), vec![]);
    }

    #[test]
    fn mud_round_trip(seed in any::<u64>()) {
        let w = gen_world(seed, true);
        let text = to_json_string(&w.profile);
        let back = parse_mud(&text).unwrap();
        prop_assert_eq!(back, w.profile);
    }

    #[test]
    fn canonicalize_idempotent_and_order_insensitive(seed in any::<u64>(), rot in 0usize..8) {
        let w = gen_world(seed, true);
        let once = canonicalize(&w.profile);
        prop_assert_eq!(canonicalize(&once), once.clone());
        let mut shuffled = w.profile.clone();
        if !shuffled.acls.is_empty() {
            let k = rot % shuffled.acls.len();
            shuffled.acls.rotate_left(k);
        }
        prop_assert_eq!(canonicalize(&shuffled), once);
        prop_assert_eq!(content_hash(&shuffled), content_hash(&w.profile));
    }

    #[test]
    fn lookup_matches_interpreter(seed in any::<u64>()) {
        let w = gen_world(seed, true);
        let (rs, _) = compile(&w.profile, &w.ctx, &w.device).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..500 {
            let h = gen_header(&mut rng, &w);
            let got = Outcome::from(lookup(&rs, &h).unwrap());
            prop_assert_eq!(got, oracle_decide(&w.profile, &w.ctx, &w.device, &h), "{:?}", h);
        }
    }

    #[test]
    fn compile_is_deterministic(seed in any::<u64>()) {
        let w = gen_world(seed, true);
        let (a, wa) = compile(&w.profile, &w.ctx, &w.device).unwrap();
        let (b, wb) = compile(&w.profile.clone(), &w.ctx.clone(), &w.device.clone()).unwrap();
        prop_assert_eq!(a.canonical_bytes(), b.canonical_bytes());
        prop_assert_eq!(wa, wb);
        for (i, r) in a.rules.iter().enumerate() {
            prop_assert!(a.rules[..i].iter().all(|q| q.priority < r.priority));
        }
    }

    #[test]
    fn adding_accept_ace_never_drops_accepted(seed in any::<u64>()) {
        let w = gen_world(seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
        let mut grown = w.profile.clone();
        if grown.acls.is_empty() {
            return Ok(());
        }
        let acl = rng.gen_range(0..grown.acls.len());
        let pos = rng.gen_range(0..=grown.acls[acl].aces.len());
        let matches: MatchCriteria = common::gen_matches(&mut rng, &w.ctx);
        grown.acls[acl].aces.insert(pos, Ace {
            name: "inserted".into(),
            matches,
            action: AceAction::Accept,
            rate_limit: None,
        });
        let (before, _) = compile(&w.profile, &w.ctx, &w.device).unwrap();
        let (after, _) = compile(&grown, &w.ctx, &w.device).unwrap();
        for _ in 0..500 {
            let h = gen_header(&mut rng, &w);
            if lookup(&before, &h).unwrap().is_accept() {
                prop_assert!(lookup(&after, &h).unwrap().is_accept(), "{:?}", h);
            }
        }
    }

    #[test]
    fn diff_then_apply_reaches_new_ruleset(a in any::<u64>(), b in any::<u64>()) {
        let wa = gen_world(a, true);
        let mut wb = gen_world(b, true);
        wb.ctx = wa.ctx.clone();
        wb.device = wa.device.clone();
        let (old, _) = compile(&wa.profile, &wa.ctx, &wa.device).unwrap();
        let (new, _) = compile(&wb.profile, &wb.ctx, &wb.device).unwrap();
        let delta = diff_rulesets(&old, &new).unwrap();
        prop_assert_eq!(delta.apply(&old), new.canonical_keys());
        prop_assert!(diff_rulesets(&new, &new).unwrap().is_empty());
    }

    #[test]
    fn every_header_gets_exactly_one_decision(seed in any::<u64>()) {
        let w = gen_world(seed, true);
        let (rs, _) = compile(&w.profile, &w.ctx, &w.device).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(!seed);
        for _ in 0..200 {
            let h = gen_header(&mut rng, &w);
            let d = lookup(&rs, &h).unwrap();
            let any_accept = rs.rules.iter().any(|r| r.matches(&h) && r.action.is_accept());
            if !any_accept {
                prop_assert!(!d.is_accept());
            }
            if !rs.rules.iter().any(|r| r.matches(&h)) {
                prop_assert_eq!(d, Decision::DefaultDrop);
            }
        }
    }
}
