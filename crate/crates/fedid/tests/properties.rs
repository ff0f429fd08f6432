//! Property tests for the module-level invariants.

use fedid::hdkeys::{self, ChildNumber, DerivationMode};
use fedid::ibcpre::{self, CiphertextEnvelope, ConditionTag};
use fedid::trust::{self, TrustParams, TrustScore};
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn arb_mode() -> impl Strategy<Value = DerivationMode> {
    prop_oneof![Just(DerivationMode::Additive), Just(DerivationMode::Multiplicative)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // neuter . ckd_priv == ckd_pub . neuter for any seed, mode, index.
    #[test]
    fn commutation(seed in proptest::array::uniform32(any::<u8>()),
                   index in 0u32..hdkeys::HARDENED_OFFSET,
                   mode in arb_mode()) {
        let key = hdkeys::master_from_seed(&seed, mode).unwrap();
        let child = ChildNumber::normal(index).unwrap();
        prop_assert_eq!(
            key.ckd_priv(child).unwrap().neuter(),
            key.neuter().ckd_pub(child).unwrap()
        );
    }

    // Extended-key serialization round-trips through bytes and base58.
    #[test]
    fn key_codec_round_trip(seed in proptest::array::uniform32(any::<u8>()),
                            hardened in any::<bool>(),
                            index in 0u32..hdkeys::HARDENED_OFFSET,
                            mode in arb_mode()) {
        let child = ChildNumber { index, hardened };
        let key = hdkeys::master_from_seed(&seed, mode).unwrap().ckd_priv(child).unwrap();
        prop_assert_eq!(&hdkeys::ExtendedPrivateKey::from_bytes(&key.to_bytes()).unwrap(), &key);
        prop_assert_eq!(&hdkeys::ExtendedPrivateKey::from_base58(&key.to_base58()).unwrap(), &key);
        let xpub = key.neuter();
        prop_assert_eq!(&hdkeys::ExtendedPublicKey::from_base58(&xpub.to_base58()).unwrap(), &xpub);
    }

    // Signatures verify and do not survive message or signer change.
    #[test]
    fn signature_soundness(seed in proptest::array::uniform32(any::<u8>()),
                           message in proptest::collection::vec(any::<u8>(), 0..256),
                           flip in any::<u8>()) {
        let key = hdkeys::master_from_seed(&seed, DerivationMode::Multiplicative).unwrap();
        let sig = key.sign(&message);
        prop_assert!(key.neuter().verify(&message, &sig));
        prop_assert!(sig.is_low_s());
        let mut other = message.clone();
        other.push(flip);
        prop_assert!(!key.neuter().verify(&other, &sig));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // Round trip through encrypt/decrypt for arbitrary payloads, plus
    // delegation to a second identity under the same condition.
    #[test]
    fn ibcpre_round_trips(payload in proptest::collection::vec(any::<u8>(), 0..2048),
                          rng_seed in any::<u64>(),
                          condition in "[a-z0-9:._-]{1,48}") {
        let (params, master) = ibcpre::setup(128, &[5u8; 32]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
        let condition = ConditionTag::new(condition).unwrap();
        let alice = ibcpre::extract(&master, "alice").unwrap();
        let dmv = ibcpre::extract(&master, "dmv").unwrap();

        let envelope = ibcpre::encrypt(&params, "alice", &condition, &payload, &mut rng).unwrap();
        prop_assert_eq!(&ibcpre::decrypt(&alice, &envelope, &condition).unwrap(), &payload);

        // Codec round trip.
        let decoded = CiphertextEnvelope::from_bytes(&envelope.to_bytes()).unwrap();
        prop_assert_eq!(&decoded, &envelope);

        let rekey = ibcpre::rkgen(&alice, "dmv", &condition).unwrap();
        let translated = ibcpre::reencrypt(&rekey, &envelope).unwrap();
        prop_assert_eq!(&translated.payload, &envelope.payload);
        prop_assert_eq!(&ibcpre::decrypt(&dmv, &translated, &condition).unwrap(), &payload);

        // Single hop.
        let again = ibcpre::rkgen(&dmv, "irs", &condition).unwrap();
        prop_assert!(ibcpre::reencrypt(&again, &translated).is_err());
    }
}

proptest! {
    // Trust-score invariants: bounds, monotone decay, re-certification
    // dominance, and aggregation monotonicity.
    #[test]
    fn trust_bounds_and_decay(weight in 0.01f64..=1.0,
                              age_a in 0u64..4_000_000_000,
                              age_b in 0u64..4_000_000_000,
                              available in any::<bool>()) {
        let params = TrustParams::default();
        let (younger, older) = if age_a <= age_b { (age_a, age_b) } else { (age_b, age_a) };
        let fresh = trust::single_source_score(weight, 0, younger, &params, available).unwrap();
        let stale = trust::single_source_score(weight, 0, older, &params, available).unwrap();
        prop_assert!((0.0..=1.0).contains(&fresh.value()));
        prop_assert!((0.0..=1.0).contains(&stale.value()));
        // More recent re-certification never scores lower.
        prop_assert!(fresh.value() >= stale.value());
    }

    #[test]
    fn aggregation_monotone(scores in proptest::collection::vec(0.0f64..=1.0, 1..8),
                            extra in 0.0f64..=1.0) {
        let base: Vec<TrustScore> = scores.iter().map(|s| TrustScore::new(*s).unwrap()).collect();
        let combined = trust::aggregate(&base).unwrap();
        prop_assert!((0.0..=1.0).contains(&combined.value()));
        let max = scores.iter().cloned().fold(0.0f64, f64::max);
        prop_assert!(combined.value() >= max - 1e-12);

        let mut extended = base.clone();
        extended.push(TrustScore::new(extra).unwrap());
        let larger = trust::aggregate(&extended).unwrap();
        prop_assert!(larger.value() >= combined.value() - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Ledger persist/load is lossless and the loaded chain verifies, for
    // arbitrary record shapes including non-ASCII ids and empty claim lists.
    #[test]
    fn ledger_persistence_round_trips(
        owner_ids in proptest::collection::vec("[a-zA-Zа-я0-9_.-]{1,24}", 1..3),
        attr_sets in proptest::collection::vec(
            proptest::collection::vec("[a-z_]{1,16}", 0..4), 1..4),
        timestamps in proptest::collection::vec(0u64..1_000_000, 1..4),
    ) {
        use fedid::ledger;
        let member = hdkeys::master_from_seed(&[0x70; 32], DerivationMode::Multiplicative).unwrap();
        let cfg = ledger::ChannelConfig {
            channel_id: "prop-channel".into(),
            members: vec![ledger::Member { id: "member-0".into(), key: member.neuter() }],
            quorum: 1,
        };
        let mut chain = ledger::genesis(cfg, 0).unwrap();
        let owner_key = hdkeys::master_from_seed(&[0x71; 32], DerivationMode::Multiplicative)
            .unwrap()
            .ckd_priv(ChildNumber::hardened(0).unwrap())
            .unwrap()
            .neuter();
        let mut index = 0u32;
        for (block, timestamp) in timestamps.iter().enumerate() {
            let attrs = &attr_sets[block % attr_sets.len()];
            let owner = &owner_ids[block % owner_ids.len()];
            if attrs.is_empty() {
                chain
                    .record_recertification(&owner_key, index, owner, "dob", *timestamp)
                    .unwrap();
            } else {
                chain
                    .record_data_access(
                        &owner_key,
                        index,
                        owner,
                        "idp-1",
                        "sp-1",
                        attrs.clone(),
                        ledger::AccessOutcome::Verified,
                        *timestamp,
                    )
                    .unwrap();
            }
            index += 1;
            chain.commit_block(&[("member-0", &member)], *timestamp).unwrap();
        }

        let mut bytes = Vec::new();
        chain.persist(&mut bytes).unwrap();
        let loaded = ledger::Ledger::load(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(loaded.blocks(), chain.blocks());
        prop_assert!(loaded.verify_chain());
    }
}

// The two master roots never mint colliding keys: 10,000 derived public
// keys across both trees and two owners' subtrees are pairwise distinct.
#[test]
fn tree_separation_over_ten_thousand_keys() {
    use sha2::Digest;
    let seed = [0x42u8; 32];
    let access_seed: [u8; 32] = sha2::Sha256::digest([&seed[..], b"/data-access"].concat()).into();
    let auth_seed: [u8; 32] =
        sha2::Sha256::digest([&seed[..], b"/data-authorization"].concat()).into();
    let access = hdkeys::master_from_seed(&access_seed, DerivationMode::Multiplicative).unwrap();
    let auth = hdkeys::master_from_seed(&auth_seed, DerivationMode::Multiplicative).unwrap();

    let mut seen = std::collections::BTreeSet::new();
    let mut total = 0u32;
    for root in [&access, &auth] {
        for subtree in 0..2u32 {
            let parent = root.ckd_priv(ChildNumber::hardened(subtree).unwrap()).unwrap().neuter();
            for index in 0..2_500u32 {
                let child = parent.ckd_pub(ChildNumber::normal(index).unwrap()).unwrap();
                assert!(seen.insert(child.point_bytes()), "collision at subtree {subtree} index {index}");
                total += 1;
            }
        }
    }
    assert_eq!(total, 10_000);
}
