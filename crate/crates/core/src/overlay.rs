//! Global random peer sampling: descriptors and a Cyclon-style view.
//!
//! A device calls [`rps_tick`] once per gossip period. The oldest entry is
//! popped and becomes the exchange partner; if the partner answers with
//! [`rps_respond`], both sides fold the other's entries in with [`rps_merge`].
//! An unreachable partner is simply forgotten.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::crypto::{PublicKey, PUBLIC_KEY_LEN};
use crate::por::Address;
use crate::wire::{put_short_bytes, Reader, WireError};

pub const DEFAULT_VIEW_CAPACITY: usize = 20;
pub const DEFAULT_GOSSIP_LEN: usize = 8;
pub const DEFAULT_BOOTSTRAP_LEN: usize = 5;

/// What a device publishes about itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub addr: Address,
    pub pk: PublicKey,
    /// Self-reported, never verified by readers.
    pub p_online: f64,
    pub issued_at: f64,
}

impl Descriptor {
    pub fn new(addr: Address, pk: PublicKey, p_online: f64, issued_at: f64) -> Self {
        Self {
            addr,
            pk,
            p_online: p_online.clamp(0.0, 1.0),
            issued_at,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::with_capacity(2 + self.addr.as_str().len() + 2 + PUBLIC_KEY_LEN + 16);
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub(crate) fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), WireError> {
        self.addr.encode_into(out)?;
        put_short_bytes(out, "pk", self.pk.as_bytes())?;
        out.extend_from_slice(&self.p_online.to_be_bytes());
        out.extend_from_slice(&self.issued_at.to_be_bytes());
        Ok(())
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let d = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(d)
    }

    pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let addr = Address::decode_from(r)?;
        let pk: [u8; PUBLIC_KEY_LEN] = r
            .short_bytes()?
            .try_into()
            .map_err(|_| WireError::invalid("pk", format!("expected {PUBLIC_KEY_LEN} bytes")))?;
        let p_online = r.f64()?;
        if !(0.0..=1.0).contains(&p_online) {
            return Err(WireError::invalid("p_online", format!("{p_online} outside [0, 1]")));
        }
        let issued_at = r.f64()?;
        if !issued_at.is_finite() {
            return Err(WireError::invalid("issued_at", "not finite"));
        }
        Ok(Self {
            addr,
            pk: PublicKey::from_bytes(pk),
            p_online,
            issued_at,
        })
    }
}

/// A descriptor together with the number of ticks it has spent in views.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub desc: Descriptor,
    pub age: u32,
}

impl ViewEntry {
    pub fn fresh(desc: Descriptor) -> Self {
        Self { desc, age: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct RpsView {
    owner: Address,
    capacity: usize,
    entries: Vec<ViewEntry>,
}

impl RpsView {
    pub fn new(owner: Address, capacity: usize) -> Self {
        assert!(capacity > 0, "view capacity must be positive");
        Self {
            owner,
            capacity,
            entries: Vec::with_capacity(capacity),
        }
    }

    /// Seeds an empty (or depleted) view, e.g. from a bootstrap list.
    pub fn bootstrap(&mut self, seeds: impl IntoIterator<Item = Descriptor>) {
        let seeds: Vec<_> = seeds.into_iter().map(ViewEntry::fresh).collect();
        rps_merge(self, seeds, &[]);
    }

    pub fn owner(&self) -> &Address {
        &self.owner
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ViewEntry] {
        &self.entries
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &Descriptor> {
        self.entries.iter().map(|e| &e.desc)
    }

    pub fn contains(&self, addr: &Address) -> bool {
        self.position(addr).is_some()
    }

    pub fn remove(&mut self, addr: &Address) -> Option<ViewEntry> {
        self.position(addr).map(|i| self.entries.remove(i))
    }

    fn position(&self, addr: &Address) -> Option<usize> {
        self.entries.iter().position(|e| e.desc.addr == *addr)
    }

    fn random_subset<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<ViewEntry> {
        self.entries.choose_multiple(rng, n).cloned().collect()
    }
}

/// One side of an exchange: the chosen partner and what we offer it.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub partner: Descriptor,
    pub proposal: Vec<ViewEntry>,
}

/// Ages the view, pops the oldest entry and builds the proposal for it.
///
/// Returns `None` on an empty view; the caller should re-bootstrap.
pub fn rps_tick<R: Rng + ?Sized>(
    view: &mut RpsView,
    fresh_self: Descriptor,
    gossip_len: usize,
    rng: &mut R,
) -> Option<Exchange> {
    for e in &mut view.entries {
        e.age = e.age.saturating_add(1);
    }
    // First-in-order wins ties so the choice does not consume randomness.
    let oldest = view
        .entries
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.age.cmp(&b.age).then(j.cmp(i)))
        .map(|(i, _)| i)?;
    let partner = view.entries.remove(oldest).desc;
    let mut proposal = view.random_subset(gossip_len, rng);
    proposal.push(ViewEntry::fresh(fresh_self));
    Some(Exchange { partner, proposal })
}

/// Reply of a contacted device: `gossip_len` of its entries plus itself.
/// The responder must then call [`rps_merge`] with the received proposal
/// and this reply as `sent`.
pub fn rps_respond<R: Rng + ?Sized>(
    view: &RpsView,
    fresh_self: Descriptor,
    gossip_len: usize,
    rng: &mut R,
) -> Vec<ViewEntry> {
    let mut reply = view.random_subset(gossip_len, rng);
    reply.push(ViewEntry::fresh(fresh_self));
    reply
}

/// Folds `received` into `view`, evicting entries we `sent` first, then the
/// oldest, when over capacity. Self-descriptors are ignored, and for a device
/// already present the descriptor with the later `issued_at` is kept.
pub fn rps_merge(view: &mut RpsView, received: Vec<ViewEntry>, sent: &[ViewEntry]) {
    let mut incoming: Vec<usize> = Vec::new();
    for r in received {
        if r.desc.addr == view.owner {
            continue;
        }
        match view.position(&r.desc.addr) {
            Some(i) => {
                let cur = &mut view.entries[i];
                let fresher = r.desc.issued_at > cur.desc.issued_at
                    || (r.desc.issued_at == cur.desc.issued_at && r.age < cur.age);
                if fresher {
                    *cur = r;
                    if !incoming.contains(&i) {
                        incoming.push(i);
                    }
                }
            }
            None => {
                view.entries.push(r);
                incoming.push(view.entries.len() - 1);
            }
        }
    }
    while view.entries.len() > view.capacity {
        let is_incoming = |i: usize| incoming.contains(&i);
        let victim = view
            .entries
            .iter()
            .enumerate()
            .filter(|(i, e)| !is_incoming(*i) && sent.iter().any(|s| s.desc.addr == e.desc.addr))
            .map(|(i, _)| i)
            .next()
            .or_else(|| oldest_index(&view.entries, |i| !is_incoming(i)))
            .or_else(|| oldest_index(&view.entries, |_| true))
            .expect("view over capacity is non-empty");
        view.entries.remove(victim);
        incoming.retain(|&i| i != victim);
        for i in &mut incoming {
            if *i > victim {
                *i -= 1;
            }
        }
    }
}

fn oldest_index(entries: &[ViewEntry], keep: impl Fn(usize) -> bool) -> Option<usize> {
    entries
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .max_by(|(i, a), (j, b)| a.age.cmp(&b.age).then(j.cmp(i)))
        .map(|(i, _)| i)
}

/// The view's descriptors in uniformly random order.
pub fn sample_candidates<R: Rng + ?Sized>(view: &RpsView, rng: &mut R) -> Vec<Descriptor> {
    let mut out: Vec<Descriptor> = view.descriptors().cloned().collect();
    out.shuffle(rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desc(rng: &mut ChaCha8Rng, name: &str, issued_at: f64) -> Descriptor {
        Descriptor::new(Address::new(name), KeyPair::generate(rng).pk, 0.5, issued_at)
    }

    fn view_with(rng: &mut ChaCha8Rng, n: usize, cap: usize) -> RpsView {
        let mut v = RpsView::new(Address::new("me"), cap);
        for i in 0..n {
            let d = desc(rng, &format!("n{i}"), 0.0);
            v.entries.push(ViewEntry { desc: d, age: i as u32 });
        }
        v
    }

    #[test]
    fn descriptor_wire_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Descriptor::new(Address::new("u01.d3"), KeyPair::generate(&mut rng).pk, 0.25, 42.5);
        let bytes = d.encode().unwrap();
        assert_eq!(bytes.len(), 2 + 6 + 2 + 32 + 8 + 8);
        assert_eq!(&bytes[8..10], &[0, 32]);
        assert_eq!(Descriptor::decode(&bytes).unwrap(), d);
    }

    #[test]
    fn descriptor_rejects_bad_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = desc(&mut rng, "a", 1.0);
        let mut bytes = d.encode().unwrap();
        let p_at = 2 + 1 + 2 + 32;
        bytes[p_at..p_at + 8].copy_from_slice(&1.5f64.to_be_bytes());
        assert!(matches!(
            Descriptor::decode(&bytes),
            Err(WireError::Invalid { field: "p_online", .. })
        ));
        let mut short_pk = vec![0, 1, b'a', 0, 31];
        short_pk.extend_from_slice(&[0u8; 31 + 16]);
        assert!(matches!(
            Descriptor::decode(&short_pk),
            Err(WireError::Invalid { field: "pk", .. })
        ));
    }

    #[test]
    fn single_entry_tick_proposes_only_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = view_with(&mut rng, 1, 20);
        let me = desc(&mut rng, "me", 5.0);
        let ex = rps_tick(&mut v, me.clone(), 8, &mut rng).unwrap();
        assert_eq!(ex.partner.addr, Address::new("n0"));
        assert_eq!(ex.proposal, vec![ViewEntry::fresh(me)]);
        assert!(v.is_empty());
    }

    #[test]
    fn tick_on_empty_view_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut v = RpsView::new(Address::new("me"), 4);
        let me = desc(&mut rng, "me", 0.0);
        assert!(rps_tick(&mut v, me, 8, &mut rng).is_none());
    }

    #[test]
    fn tick_pops_oldest_and_ages_the_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v = view_with(&mut rng, 5, 20);
        let me = desc(&mut rng, "me", 0.0);
        let ex = rps_tick(&mut v, me, 2, &mut rng).unwrap();
        assert_eq!(ex.partner.addr, Address::new("n4"));
        assert_eq!(ex.proposal.len(), 3);
        let ages: Vec<u32> = v.entries().iter().map(|e| e.age).collect();
        assert_eq!(ages, vec![1, 2, 3, 4]);
    }

    #[test]
    fn offline_partner_is_just_forgotten() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut v = view_with(&mut rng, 6, 20);
        let before: Vec<Address> = v.descriptors().map(|d| d.addr.clone()).collect();
        let me = desc(&mut rng, "me", 0.0);
        let ex = rps_tick(&mut v, me, 3, &mut rng).unwrap();
        let after: Vec<Address> = v.descriptors().map(|d| d.addr.clone()).collect();
        let expected: Vec<Address> = before.into_iter().filter(|a| *a != ex.partner.addr).collect();
        assert_eq!(after, expected);
    }

    #[test]
    fn merge_drops_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut v = view_with(&mut rng, 2, 20);
        let me = desc(&mut rng, "me", 9.0);
        rps_merge(&mut v, vec![ViewEntry::fresh(me)], &[]);
        assert_eq!(v.len(), 2);
        assert!(!v.contains(&Address::new("me")));
    }

    #[test]
    fn merge_keeps_freshest_descriptor() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut v = view_with(&mut rng, 3, 20);
        let mut newer = v.entries()[1].desc.clone();
        newer.issued_at = 10.0;
        newer.p_online = 0.9;
        rps_merge(&mut v, vec![ViewEntry::fresh(newer.clone())], &[]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.entries()[1].desc, newer);
        let mut stale = newer.clone();
        stale.issued_at = 3.0;
        stale.p_online = 0.1;
        rps_merge(&mut v, vec![ViewEntry::fresh(stale)], &[]);
        assert_eq!(v.entries()[1].desc, newer);
    }

    #[test]
    fn overflow_evicts_sent_then_oldest() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = view_with(&mut rng, 4, 4);
        let sent = vec![v.entries()[0].clone()];
        let a = desc(&mut rng, "x", 1.0);
        let b = desc(&mut rng, "y", 1.0);
        rps_merge(&mut v, vec![ViewEntry::fresh(a), ViewEntry::fresh(b)], &sent);
        let names: Vec<&str> = v.descriptors().map(|d| d.addr.as_str()).collect();
        // n0 went out in the swap, n3 is the oldest remaining.
        assert_eq!(names, vec!["n1", "n2", "x", "y"]);
    }

    #[test]
    fn isolated_stale_entry_leaves_within_capacity_ticks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut v = view_with(&mut rng, 20, 20);
        let dead = Address::new("n0");
        let me = desc(&mut rng, "me", 0.0);
        for _ in 0..20 {
            rps_tick(&mut v, me.clone(), 8, &mut rng);
        }
        assert!(!v.contains(&dead));
    }

    #[test]
    fn sample_candidates_never_returns_self_and_covers_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v = view_with(&mut rng, 5, 20);
        let me = desc(&mut rng, "me", 0.0);
        v.bootstrap([me]);
        let c = sample_candidates(&v, &mut rng);
        assert_eq!(c.len(), 5);
        assert!(c.iter().all(|d| d.addr.as_str() != "me"));
        assert!(sample_candidates(&RpsView::new(Address::new("me"), 3), &mut rng).is_empty());
    }

    #[test]
    fn sample_candidates_positions_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = view_with(&mut rng, 4, 20);
        let draws = 100_000;
        let mut counts = [[0usize; 4]; 4];
        for _ in 0..draws {
            for (pos, d) in sample_candidates(&v, &mut rng).iter().enumerate() {
                let idx: usize = d.addr.as_str()[1..].parse().unwrap();
                counts[idx][pos] += 1;
            }
        }
        let p = 0.25;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for row in counts {
            for c in row {
                assert!((c as f64 - draws as f64 * p).abs() < 3.5 * sigma, "{counts:?}");
            }
        }
    }
}
