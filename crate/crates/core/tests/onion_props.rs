use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spores::crypto::{message_encrypt, message_decrypt, KeyPair, ENVELOPE_ENTRY_LEN};
use spores::por::{peel, Peeled, Plaintext, PorMessage};
use spores::{Address, Descriptor, Layer};

struct Stack {
    keys: Vec<Vec<KeyPair>>,
    layers: Vec<Layer>,
}

fn stack(rng: &mut ChaCha8Rng, widths: &[usize]) -> Stack {
    let keys: Vec<Vec<KeyPair>> = widths
        .iter()
        .map(|&w| (0..w).map(|_| KeyPair::generate(rng)).collect())
        .collect();
    let layers = keys
        .iter()
        .enumerate()
        .map(|(i, ks)| {
            Layer::new(
                ks.iter()
                    .enumerate()
                    .map(|(j, k)| Descriptor::new(Address::new(format!("l{i}m{j}")), k.pk, 0.5, 0.0))
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    Stack { keys, layers }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn peeling_recovers_payload(
        seed in any::<u64>(),
        widths in prop::collection::vec(1usize..=20, 1..=6),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 6),
        payload in prop::collection::vec(any::<u8>(), 0..512),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = stack(&mut rng, &widths);
        let mut m = message_encrypt(&payload, &s.layers, &mut rng).unwrap();
        for (i, ks) in s.keys.iter().enumerate() {
            prop_assert_eq!(m.addrs.clone(), s.layers[i].addresses());
            let wire = m.encode().unwrap();
            let m2 = PorMessage::decode(&wire).unwrap();
            let k = &ks[picks[i].index(ks.len())];
            match peel(&m2, &k.sk) {
                Peeled::Relay(inner) => {
                    prop_assert!(i + 1 < s.keys.len());
                    m = inner;
                }
                Peeled::Payload(p) => {
                    prop_assert_eq!(i + 1, s.keys.len());
                    prop_assert_eq!(&p, &payload);
                }
                Peeled::Failed => prop_assert!(false, "member of layer {} failed", i),
            }
        }
    }

    #[test]
    fn non_member_cannot_open_any_level(
        seed in any::<u64>(),
        widths in prop::collection::vec(1usize..=8, 1..=4),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = stack(&mut rng, &widths);
        let outsider = KeyPair::generate(&mut rng);
        let mut m = message_encrypt(b"p", &s.layers, &mut rng).unwrap();
        for ks in &s.keys {
            prop_assert!(message_decrypt(&m, &outsider.sk).is_none());
            match Plaintext::decode(&message_decrypt(&m, &ks[0].sk).unwrap()).unwrap() {
                Plaintext::Inner(inner) => m = inner,
                Plaintext::App(_) => {}
            }
        }
    }
}

#[test]
fn header_grows_by_one_entry_per_member() {
    // Growing one layer by one member must add exactly one envelope entry at
    // its own level, plus the framing it causes in every enclosing level.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut sizes = Vec::new();
    for w in 1..=10 {
        let s = stack(&mut rng, &[w]);
        let m = message_encrypt(b"body", &s.layers, &mut rng).unwrap();
        sizes.push(m.encode().unwrap().len());
    }
    let addr_len = 2 + "l0m0".len();
    for pair in sizes.windows(2) {
        assert_eq!(pair[1] - pair[0], ENVELOPE_ENTRY_LEN + addr_len);
    }

    let mut by_width = Vec::new();
    for w in 1..=10usize {
        let s = stack(&mut rng, &[w, w, w, w]);
        let m = message_encrypt(b"body", &s.layers, &mut rng).unwrap();
        by_width.push(m.encode().unwrap().len() as i64);
    }
    let d: Vec<i64> = by_width.windows(2).map(|p| p[1] - p[0]).collect();
    assert!(d.windows(2).all(|p| p[0] == p[1]), "non-linear growth {d:?}");
}
