use super::*;
use crate::encoding::{encode, EncodingSpec};
use crate::ring_crypto::{AddMode, PrfKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn master(name: &str, seed: u8) -> MasterSecret {
    MasterSecret::new([seed; 16], StreamId::new(name))
}

fn release(n: usize) -> Vec<ElementDirective> {
    vec![ElementDirective::Release; n]
}

fn rng() -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(42)
}

/// Encrypts `values` as a chain starting at `t0` with spacing 1.
fn chain(cipher: &StreamCipher, m: &MasterSecret, t0: u64, values: &[Vec<RingElement>]) -> StreamCiphertext {
    let mut acc: Option<StreamCiphertext> = None;
    for (i, v) in values.iter().enumerate() {
        let t = t0 + i as u64;
        let ct = cipher.encrypt(m, Timestamp(t), Timestamp(t + 1), v).unwrap();
        acc = Some(match acc {
            None => ct,
            Some(a) => cipher.add_ciphertexts(&a, &ct, AddMode::Chain).unwrap(),
        });
    }
    acc.unwrap()
}

#[test]
fn counter_prf_window_token() {
    let c = StreamCipher::new(Modulus::default(), PrfKind::Counter);
    let t = single_stream_token(&c, &master("s", 0), (Timestamp(0), Timestamp(2)), &release(1), &mut rng()).unwrap();
    assert_eq!(t.elements, vec![Some(RingElement(2000u64.wrapping_neg()))]);
    assert!(!t.noised);
}

#[test]
fn empty_directives_and_windows_are_rejected() {
    let c = StreamCipher::default();
    let m = master("s", 1);
    assert_eq!(
        single_stream_token(&c, &m, (Timestamp(0), Timestamp(2)), &[], &mut rng()).unwrap_err(),
        TokenError::EmptyDirectives
    );
    assert!(matches!(
        single_stream_token(&c, &m, (Timestamp(2), Timestamp(2)), &release(1), &mut rng()),
        Err(TokenError::EmptyWindow { .. })
    ));
    assert_eq!(
        single_stream_token(&c, &m, (Timestamp(0), Timestamp(2)), &[ElementDirective::Withhold], &mut rng())
            .unwrap_err(),
        TokenError::NothingReleased
    );
}

#[test]
fn field_redaction_releases_only_selected_bucket() {
    let c = StreamCipher::default();
    let mut d = vec![ElementDirective::Withhold; 4];
    d[0] = ElementDirective::Release;
    let t = single_stream_token(&c, &master("s", 2), (Timestamp(0), Timestamp(5)), &d, &mut rng()).unwrap();
    assert_eq!(t.released_count(), 1);
    assert!(t.elements[0].is_some());
    assert_eq!(wire::encoded_len(&t), wire::HEADER_LEN + wire::PAIR_LEN);
}

#[test]
fn bucketing_merges_bins_into_coarser_histogram() {
    let c = StreamCipher::default();
    let m = master("s", 3);
    let spec = EncodingSpec::one_hot(0, 3);
    let data = [0.0, 1.0, 1.0, 2.0, 3.0, 3.0, 3.0];
    let enc: Vec<_> = data.iter().map(|x| encode(*x, &spec, c.modulus).unwrap().elements).collect();
    let ct = chain(&c, &m, 10, &enc);
    let directives = vec![
        ElementDirective::Merge(0),
        ElementDirective::Merge(0),
        ElementDirective::Merge(1),
        ElementDirective::Merge(1),
    ];
    let layout = OutputLayout::from_directives(&directives).unwrap();
    let token = single_stream_token(&c, &m, (ct.t_prev, ct.t_curr), &directives, &mut rng()).unwrap();
    assert_eq!(token.elements.len(), 2);
    let projected = layout.project_ciphertext(&ct, c.modulus);
    let out = c.apply_token(&projected, &token.stream_set_id, &token).unwrap();
    assert_eq!(out, vec![Some(RingElement(3)), Some(RingElement(4))]);
}

#[test]
fn apply_token_reveals_plaintext_sum_and_marks_withheld() {
    let c = StreamCipher::default();
    let m = master("s", 4);
    let vals: Vec<Vec<RingElement>> = (1..=5).map(|i| vec![RingElement(i), RingElement(10 * i)]).collect();
    let ct = chain(&c, &m, 0, &vals);
    let sid = StreamSetId::single(m.stream_id());
    let t = single_stream_token(&c, &m, (ct.t_prev, ct.t_curr), &release(2), &mut rng()).unwrap();
    assert_eq!(c.apply_token(&ct, &sid, &t).unwrap(), vec![Some(RingElement(15)), Some(RingElement(150))]);

    let d = vec![ElementDirective::Release, ElementDirective::Withhold];
    let t = single_stream_token(&c, &m, (ct.t_prev, ct.t_curr), &d, &mut rng()).unwrap();
    assert_eq!(c.apply_token(&ct, &sid, &t).unwrap(), vec![Some(RingElement(15)), None]);
}

#[test]
fn zero_token_leaves_zero_key_ciphertext_unchanged() {
    let c = StreamCipher::new(Modulus::default(), PrfKind::Zero);
    let m = master("s", 0);
    let ct = c.encrypt(&m, Timestamp(0), Timestamp(1), &[RingElement(77)]).unwrap();
    let t = single_stream_token(&c, &m, (Timestamp(0), Timestamp(1)), &release(1), &mut rng()).unwrap();
    assert_eq!(t.elements, vec![Some(RingElement(0))]);
    let sid = StreamSetId::single(m.stream_id());
    assert_eq!(c.apply_token(&ct, &sid, &t).unwrap(), vec![Some(RingElement(77))]);
}

#[test]
fn apply_token_refuses_mismatched_provenance() {
    let c = StreamCipher::default();
    let m = master("s", 5);
    let ct = c.encrypt(&m, Timestamp(0), Timestamp(1), &[RingElement(1)]).unwrap();
    let sid = StreamSetId::single(m.stream_id());
    let t = single_stream_token(&c, &m, (Timestamp(0), Timestamp(2)), &release(1), &mut rng()).unwrap();
    assert_eq!(c.apply_token(&ct, &sid, &t).unwrap_err(), crate::ring_crypto::CryptoError::WindowMismatch);
    let t = single_stream_token(&c, &m, (Timestamp(0), Timestamp(1)), &release(1), &mut rng()).unwrap();
    let other = StreamSetId::single(&StreamId::new("other"));
    assert_eq!(c.apply_token(&ct, &other, &t).unwrap_err(), crate::ring_crypto::CryptoError::StreamSetMismatch);
}

#[test]
fn shift_offsets_the_released_value() {
    let c = StreamCipher::default();
    let m = master("s", 6);
    let ct = chain(&c, &m, 0, &[vec![RingElement(40)], vec![RingElement(2)]]);
    let t = single_stream_token(&c, &m, (ct.t_prev, ct.t_curr), &[ElementDirective::Shift(-7)], &mut rng()).unwrap();
    let sid = StreamSetId::single(m.stream_id());
    assert_eq!(c.apply_token(&ct, &sid, &t).unwrap(), vec![Some(RingElement(35))]);
}

#[test]
fn partial_of_one_stream_is_identity() {
    let c = StreamCipher::default();
    let t = single_stream_token(&c, &master("a", 1), (Timestamp(0), Timestamp(3)), &release(2), &mut rng()).unwrap();
    let p = multi_stream_partial(std::slice::from_ref(&t), c.modulus).unwrap();
    assert_eq!(p, t);
}

#[test]
fn partial_of_two_counter_streams() {
    let c = StreamCipher::new(Modulus::default(), PrfKind::Counter);
    let w = (Timestamp(1), Timestamp(3));
    let a = single_stream_token(&c, &master("a", 1), w, &release(1), &mut rng()).unwrap();
    let b = single_stream_token(&c, &master("b", 2), w, &release(1), &mut rng()).unwrap();
    let p = multi_stream_partial(&[a, b], c.modulus).unwrap();
    // each stream contributes k1 - k3 = 1000 - 3000
    assert_eq!(p.elements, vec![Some(RingElement(4000u64.wrapping_neg()))]);
    assert_eq!(p.stream_set_id, StreamSetId::of([&StreamId::new("a"), &StreamId::new("b")]));
}

#[test]
fn partial_rejects_mismatches() {
    let c = StreamCipher::default();
    let a = single_stream_token(&c, &master("a", 1), (Timestamp(0), Timestamp(3)), &release(1), &mut rng()).unwrap();
    let b = single_stream_token(&c, &master("b", 1), (Timestamp(0), Timestamp(4)), &release(1), &mut rng()).unwrap();
    assert_eq!(multi_stream_partial(&[a.clone(), b], c.modulus).unwrap_err(), TokenError::WindowMismatch);
    assert_eq!(
        multi_stream_partial(&[a.clone(), a.clone()], c.modulus).unwrap_err(),
        TokenError::OverlappingMembers(StreamId::new("a"))
    );
    let d = [ElementDirective::Release, ElementDirective::Withhold];
    let x = single_stream_token(&c, &master("x", 1), (Timestamp(0), Timestamp(3)), &d, &mut rng()).unwrap();
    let y = single_stream_token(&c, &master("y", 1), (Timestamp(0), Timestamp(3)), &release(2), &mut rng()).unwrap();
    assert_eq!(multi_stream_partial(&[x, y], c.modulus).unwrap_err(), TokenError::PatternMismatch);
    assert_eq!(multi_stream_partial(&[], c.modulus).unwrap_err(), TokenError::NoTokens);
}

#[test]
fn partial_is_associative_over_five_streams() {
    let c = StreamCipher::default();
    let w = (Timestamp(100), Timestamp(200));
    let toks: Vec<_> = (0..5)
        .map(|i| single_stream_token(&c, &master(&format!("s{i}"), i as u8), w, &release(3), &mut rng()).unwrap())
        .collect();
    let left = multi_stream_partial(&toks[..2], c.modulus).unwrap();
    let right = multi_stream_partial(&toks[2..], c.modulus).unwrap();
    let nested = multi_stream_partial(&[left, right], c.modulus).unwrap();
    assert_eq!(nested, multi_stream_partial(&toks, c.modulus).unwrap());
}

#[test]
fn dp_zero_sigma_charges_budget_only() {
    let c = StreamCipher::default();
    let t = single_stream_token(&c, &master("a", 1), (Timestamp(0), Timestamp(3)), &release(2), &mut rng()).unwrap();
    let mut budget = PrivacyBudget::new(1.0);
    let spec = NoiseSpec::gaussian(0.0, 0.5, 10, 100);
    let NoiseOutcome::Noised(n) = add_dp_noise(&t, &spec, &mut budget, 0.25, c.modulus, &mut rng()).unwrap() else {
        panic!("suppressed")
    };
    assert_eq!(n.elements, t.elements);
    assert!(n.noised);
    assert_eq!(budget.epsilon_spent, 0.25);
    assert_eq!(
        add_dp_noise(&n, &spec, &mut budget, 0.25, c.modulus, &mut rng()).unwrap_err(),
        TokenError::AlreadyNoised
    );
    assert_eq!(
        add_dp_noise(&t, &spec, &mut budget, 0.0, c.modulus, &mut rng()).unwrap_err(),
        TokenError::NonPositiveCost(0.0)
    );
}

#[test]
fn exhausted_budget_suppresses() {
    let c = StreamCipher::default();
    let t = single_stream_token(&c, &master("a", 1), (Timestamp(0), Timestamp(3)), &release(1), &mut rng()).unwrap();
    let mut budget = PrivacyBudget {
        epsilon_total: 1.0,
        epsilon_spent: 0.9,
    };
    let spec = NoiseSpec::gaussian(1.0, 1.0, 1, 1);
    assert_eq!(
        add_dp_noise(&t, &spec, &mut budget, 0.2, c.modulus, &mut rng()).unwrap(),
        NoiseOutcome::Suppressed
    );
    assert_eq!(budget.epsilon_spent, 0.9);
}

#[test]
fn per_party_sigma_calibration() {
    let spec = NoiseSpec::gaussian(10.0, 0.5, 100, 100);
    assert!((spec.per_party_sigma() - 10.0 / 50f64.sqrt()).abs() < 1e-12);
    assert!(NoiseSpec::gaussian(1.0, 0.0, 10, 1).validate().is_err());
    assert!(NoiseSpec::gaussian(-1.0, 0.5, 10, 1).validate().is_err());
}

#[test]
fn budget_ledger_charges_atomically() {
    let ledger = BudgetLedger::new();
    ledger.register("s/hr", 1.0);
    assert!(ledger.try_charge("s/hr", 0.6));
    assert!(!ledger.try_charge("s/hr", 0.6));
    assert!(ledger.try_charge("s/hr", 0.4));
    assert!(!ledger.try_charge("unknown", 0.1));
    assert_eq!(ledger.get("s/hr").unwrap().remaining(), 0.0);
}

#[test]
fn token_store_enforces_one_token_per_window() {
    let c = StreamCipher::default();
    let m = master("a", 1);
    let w = (Timestamp(0), Timestamp(3));
    let t = single_stream_token(&c, &m, w, &release(2), &mut rng()).unwrap();
    let key = TokenKey {
        stream: StreamId::new("a"),
        attribute: "hr".into(),
        window_start: w.0,
        window_end: w.1,
    };
    let store = TokenStore::new();
    assert_eq!(store.issue(key.clone(), t.clone()).unwrap(), t);
    assert_eq!(store.issue(key.clone(), t.clone()).unwrap(), t);
    let other = single_stream_token(&c, &m, w, &[ElementDirective::Release, ElementDirective::Withhold], &mut rng())
        .unwrap();
    assert_eq!(store.issue(key, other).unwrap_err(), TokenError::AlreadyIssued);
    assert_eq!(store.len(), 1);
}

#[test]
fn wire_rejects_malformed_input() {
    assert!(wire::decode(&[0u8; 10]).is_err());
    let c = StreamCipher::default();
    let t = single_stream_token(&c, &master("a", 1), (Timestamp(0), Timestamp(3)), &release(2), &mut rng()).unwrap();
    let mut bytes = wire::encode(&t).unwrap();
    bytes.pop();
    assert!(wire::decode(&bytes).is_err());
}

proptest! {
    #[test]
    fn wire_round_trip(start in 0u64..1000, len in 1u64..1000, vals in prop::collection::vec(prop::option::of(any::<u64>()), 1..40)) {
        prop_assume!(vals.iter().any(Option::is_some));
        let t = TransformationToken {
            window_start: Timestamp(start),
            window_end: Timestamp(start + len),
            stream_set_id: StreamSetId::single(&StreamId::new("x")),
            members: BTreeSet::new(),
            elements: vals.into_iter().map(|v| v.map(RingElement)).collect(),
            noised: false,
        };
        let bytes = wire::encode(&t).unwrap();
        prop_assert_eq!(bytes.len(), wire::encoded_len(&t));
        prop_assert_eq!(wire::decode(&bytes).unwrap(), t);
    }

    /// Applying window sums, element merges and cross-stream sums to
    /// ciphertexts, and the matching token to the result, equals the same
    /// operations on plaintexts.
    #[test]
    fn token_ciphertext_duality(
        seed in any::<u64>(),
        streams in 1usize..5,
        events in 1usize..8,
        width in 1usize..6,
        merge_mask in any::<u8>(),
    ) {
        use rand::Rng;
        let c = StreamCipher::new(Modulus::default(), PrfKind::Mix);
        let mut r = ChaCha20Rng::seed_from_u64(seed);
        let directives: Vec<ElementDirective> = (0..width)
            .map(|j| if merge_mask >> j & 1 == 1 { ElementDirective::Merge(7) } else { ElementDirective::Release })
            .collect();
        let layout = OutputLayout::from_directives(&directives).unwrap();
        let mut cts = Vec::new();
        let mut toks = Vec::new();
        let mut plain = vec![RingElement(0); width];
        for s in 0..streams {
            let m = MasterSecret::generate(&mut r, StreamId::new(format!("s{s}")));
            let vals: Vec<Vec<RingElement>> = (0..events)
                .map(|_| (0..width).map(|_| RingElement(r.gen())).collect())
                .collect();
            for v in &vals {
                c.modulus.add_assign_vec(&mut plain, v);
            }
            let ct = chain(&c, &m, 50, &vals);
            toks.push(single_stream_token(&c, &m, (ct.t_prev, ct.t_curr), &directives, &mut r).unwrap());
            cts.push(ct);
        }
        let mut total = cts[0].clone();
        for ct in &cts[1..] {
            total = c.add_ciphertexts(&total, ct, AddMode::CrossStream).unwrap();
        }
        let token = multi_stream_partial(&toks, c.modulus).unwrap();
        let projected = layout.project_ciphertext(&total, c.modulus);
        let out = c.apply_token(&projected, &token.stream_set_id, &token).unwrap();
        prop_assert_eq!(out, layout.project_plain(&plain, c.modulus));
    }
}
