use ciffreeda_core::fedf::{decode, encode};
use ciffreeda_core::head::{ClassifierMode, HeadParams};
use ciffreeda_core::{Error, FeatureDataset};
use proptest::prelude::*;

fn hand_encoded() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"FEDF");
    b.extend_from_slice(&[1, 0, 0, 0]);
    b.extend_from_slice(&[2, 0, 0, 0]);
    b.extend_from_slice(&[3, 0, 0, 0]);
    b.extend_from_slice(&[2, 0]);
    b.extend_from_slice(b"cl");
    b.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
    b.extend_from_slice(&[2, 0, 0, 0]);
    b.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]); // 1.0
    b.extend_from_slice(&[0x00, 0x00, 0x00, 0xc0]); // -2.0
    b.extend_from_slice(&[0, 0, 0, 0]);
    b.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f]); // 0.5
    b.extend_from_slice(&[0x00, 0x00, 0x00, 0x00]);
    b
}

#[test]
fn fedf_matches_hand_assembled_bytes() {
    let ds = FeatureDataset::new(2, 3, "cl", vec![1.0, -2.0, 0.5, 0.0], vec![2, 0]).unwrap();
    assert_eq!(encode(&ds).unwrap(), hand_encoded());
    let back = decode(&hand_encoded()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.domain_id(), "cl");
}

#[test]
fn fedf_rejects_damage() {
    let good = hand_encoded();
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic), Err(Error::BadMagic(_))));
    let mut version = good.clone();
    version[4] = 2;
    assert!(matches!(
        decode(&version),
        Err(Error::UnsupportedVersion(2))
    ));
    assert!(matches!(
        decode(&good[..good.len() - 1]),
        Err(Error::Truncated { .. })
    ));
    let mut label = good.clone();
    label[28] = 3;
    assert!(matches!(
        decode(&label),
        Err(Error::LabelOutOfRange { label: 3, .. })
    ));
    let mut trailing = good;
    trailing.push(0);
    assert!(decode(&trailing).is_err());
}

#[test]
fn head_payload_layout() {
    let h = HeadParams::init(3, 4, 2, ClassifierMode::Trainable, 5).unwrap();
    let bytes = h.serialize();
    assert_eq!(&bytes[..4], b"HEAD");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
    assert_eq!(bytes[16], 0);
    // 12 + 4 + 4 * 4 (gamma, beta, mean, var) + 8 + 2 scalars
    assert_eq!(bytes.len(), 17 + 4 * (12 + 4 + 16 + 8 + 2));
    let first = f32::from_le_bytes(bytes[17..21].try_into().unwrap());
    assert_eq!(first, h.bottleneck_weight[0] as f32);
}

proptest! {
    #[test]
    fn fedf_round_trips(
        dim in 1usize..6,
        classes in 1usize..5,
        rows in prop::collection::vec((0u32..100, prop::collection::vec(-1e6f32..1e6, 6)), 0..20),
        id in "[a-z]{0,8}",
    ) {
        let labels: Vec<u32> = rows.iter().map(|(l, _)| l % classes as u32).collect();
        let features: Vec<f32> = rows.iter().flat_map(|(_, v)| v[..dim].to_vec()).collect();
        let ds = FeatureDataset::new(dim, classes, id, features, labels).unwrap();
        let bytes = encode(&ds).unwrap();
        prop_assert_eq!(bytes.len(), 26 + ds.domain_id().len() + ds.len() * (4 + 4 * dim));
        prop_assert_eq!(decode(&bytes).unwrap(), ds);
    }

    #[test]
    fn head_round_trip_is_f32_exact(seed in any::<u64>(), etf in any::<bool>()) {
        let mode = if etf { ClassifierMode::EtfFixed } else { ClassifierMode::Trainable };
        let mut h = HeadParams::init(5, 4, 3, mode, seed).unwrap();
        h.quantize();
        let back = HeadParams::deserialize(&h.serialize()).unwrap();
        prop_assert_eq!(back, h);
    }
}
