mod common;

use common::control_model::{gen_reader_events, run_sequence, setup_events, MAC_A};
use dada_core::control::{
    decode_reader_message, decode_tag_payload, encode_reader_event, encode_tag_payload, tag_payload_len, Category,
    ControlAction, ControlPlane, ReaderEvent, TAG_CAPACITY,
};
use dada_core::MacAddr;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn generated_sequences_respect_semantics(seed in any::<u64>()) {
        let events = gen_reader_events(seed, 50);
        if let Err(msg) = run_sequence(&events) {
            prop_assert!(false, "{}", msg);
        }
    }

    #[test]
    fn tag_payload_round_trip(macs in prop::collection::vec(any::<[u8; 6]>(), 0..200)) {
        let macs: Vec<MacAddr> = macs.into_iter().map(MacAddr::new).collect();
        match encode_tag_payload(&macs) {
            Ok(bytes) => {
                prop_assert!(bytes.len() <= TAG_CAPACITY);
                prop_assert_eq!(bytes.len(), tag_payload_len(macs.len()));
                prop_assert_eq!(decode_tag_payload(&bytes).unwrap(), macs);
            }
            Err(_) => prop_assert!(tag_payload_len(macs.len()) > TAG_CAPACITY),
        }
    }

    #[test]
    fn bus_reader_messages_round_trip(seed in any::<u64>()) {
        for e in gen_reader_events(seed, 10) {
            let back = decode_reader_message(&encode_reader_event(&e)).unwrap();
            prop_assert_eq!(back, e);
        }
    }
}

#[test]
fn removing_the_token_revokes_continuous_isolation() {
    let mut plane = ControlPlane::new();
    for e in setup_events() {
        plane.apply(e).unwrap();
    }
    let ev = |ts, tokens: &[&str]| ReaderEvent {
        reader_id: "hall".into(),
        ts,
        pot_tag: Some("pot-isolate".into()),
        token_tags: tokens.iter().map(|t| t.to_string()).collect(),
    };
    plane.reader_event(ev(1, &["tok-a"]));
    assert_eq!(
        plane.active()[&(MAC_A, Category::Connectivity)].action,
        ControlAction::RemoveFromNetwork
    );
    plane.reader_event(ev(2, &[]));
    assert!(plane.active().is_empty());
}
