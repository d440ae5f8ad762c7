use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spores::overlay::{rps_merge, rps_respond, rps_tick, DEFAULT_GOSSIP_LEN, DEFAULT_VIEW_CAPACITY};
use spores::{Address, Descriptor, KeyPair, RpsView};
use std::collections::{HashMap, HashSet};

struct Net {
    descs: Vec<Descriptor>,
    views: Vec<RpsView>,
    offline: HashSet<usize>,
    index: HashMap<Address, usize>,
}

impl Net {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let descs: Vec<Descriptor> = (0..n)
            .map(|i| Descriptor::new(Address::new(format!("n{i}")), KeyPair::generate(rng).pk, 0.5, 0.0))
            .collect();
        let index = descs.iter().enumerate().map(|(i, d)| (d.addr.clone(), i)).collect();
        let mut views: Vec<RpsView> = descs
            .iter()
            .map(|d| RpsView::new(d.addr.clone(), DEFAULT_VIEW_CAPACITY))
            .collect();
        for (i, v) in views.iter_mut().enumerate() {
            let others: Vec<&Descriptor> = descs.iter().filter(|d| d.addr != descs[i].addr).collect();
            v.bootstrap(others.choose_multiple(rng, 5).map(|d| (*d).clone()));
        }
        Net { descs, views, offline: HashSet::new(), index }
    }

    fn fresh(&self, i: usize, now: f64) -> Descriptor {
        let mut d = self.descs[i].clone();
        d.issued_at = now;
        d
    }

    fn round(&mut self, now: f64, rng: &mut ChaCha8Rng) {
        for i in 0..self.views.len() {
            if self.offline.contains(&i) {
                continue;
            }
            let me = self.fresh(i, now);
            let Some(ex) = rps_tick(&mut self.views[i], me, DEFAULT_GOSSIP_LEN, rng) else {
                continue;
            };
            let j = self.index[&ex.partner.addr];
            if self.offline.contains(&j) {
                continue;
            }
            let reply = rps_respond(&self.views[j], self.fresh(j, now), DEFAULT_GOSSIP_LEN, rng);
            rps_merge(&mut self.views[j], ex.proposal.clone(), &reply);
            rps_merge(&mut self.views[i], reply, &ex.proposal);
        }
    }

    fn indegrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.views.len()];
        for v in &self.views {
            for d in v.descriptors() {
                deg[self.index[&d.addr]] += 1;
            }
        }
        deg
    }
}

fn cv(xs: &[usize]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<usize>() as f64 / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[test]
fn views_stay_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = Net::new(150, &mut rng);
    for t in 0..100 {
        net.round(t as f64, &mut rng);
        for v in &net.views {
            assert!(v.len() <= DEFAULT_VIEW_CAPACITY);
            let addrs: HashSet<_> = v.descriptors().map(|d| &d.addr).collect();
            assert_eq!(addrs.len(), v.len());
            assert!(!addrs.contains(v.owner()));
        }
    }
    assert!(net.views.iter().all(|v| v.len() == DEFAULT_VIEW_CAPACITY));
}

#[test]
fn indegree_is_balanced_in_steady_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = Net::new(150, &mut rng);
    for t in 0..200 {
        net.round(t as f64, &mut rng);
    }
    let c = cv(&net.indegrees());
    assert!(c < 0.5, "indegree coefficient of variation {c}");
}

#[test]
fn presence_is_near_uniform_over_time() {
    // Appearances of each device across all views, sampled once per
    // view-lifetime so successive samples are close to independent.
    let n = 150;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = Net::new(n, &mut rng);
    for t in 0..100 {
        net.round(t as f64, &mut rng);
    }
    let mut counts = vec![0usize; n];
    let samples = 50;
    for s in 0..samples {
        for t in 0..DEFAULT_VIEW_CAPACITY {
            net.round((100 + s * DEFAULT_VIEW_CAPACITY + t) as f64, &mut rng);
        }
        for (i, c) in net.indegrees().into_iter().enumerate() {
            counts[i] += c;
        }
    }
    let total: usize = counts.iter().sum();
    let expected = total as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // chi-square with n-1 dof has mean n-1 and sd sqrt(2(n-1)).
    let dof = (n - 1) as f64;
    assert!(chi2 < dof + 3.0 * (2.0 * dof).sqrt(), "chi2 {chi2} for {dof} dof");
}

#[test]
fn dead_device_is_forgotten() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = Net::new(150, &mut rng);
    for t in 0..50 {
        net.round(t as f64, &mut rng);
    }
    net.offline.insert(0);
    let dead = net.descs[0].addr.clone();
    let mut gone_at = None;
    for t in 50..50 + 3 * DEFAULT_VIEW_CAPACITY {
        net.round(t as f64, &mut rng);
        if net.views.iter().enumerate().all(|(i, v)| i == 0 || !v.contains(&dead)) {
            gone_at = Some(t - 50);
            break;
        }
    }
    assert!(gone_at.is_some(), "descriptor of a dead device survived {} rounds", 3 * DEFAULT_VIEW_CAPACITY);
}
