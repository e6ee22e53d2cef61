use iotcloud_core::balance::*;
use proptest::prelude::*;

fn pool(weights: &[u32]) -> Vec<BackendState> {
    weights.iter().map(|&w| BackendState::new(w)).collect()
}

#[test]
fn two_to_one_interleaves_for_a_hundred_cycles() {
    let pool = pool(&[2, 1]);
    let mut wrr = SmoothWrr::new();
    for _ in 0..100 {
        let cycle: Vec<usize> = (0..3).map(|_| wrr.next(&pool).unwrap()).collect();
        assert_eq!(cycle, vec![0, 1, 0]);
    }
}

#[test]
fn least_conn_examples() {
    let mut p = pool(&[1, 1, 1]);
    for (b, n) in p.iter_mut().zip([3, 1, 2]) {
        b.active_connections = n;
    }
    assert_eq!(least_conn_next(&p), Ok(1));
    let mut p = pool(&[1, 1]);
    p[0].active_connections = 1;
    p[1].active_connections = 1;
    assert_eq!(least_conn_next(&p), Ok(0));
    p[0].active_connections = 0;
    p[0].healthy = false;
    p[1].active_connections = 5;
    assert_eq!(least_conn_next(&p), Ok(1));
    p[1].healthy = false;
    assert_eq!(least_conn_next(&p), Err(NoBackend));
}

#[test]
fn ten_long_lived_connections_split_evenly() {
    let mut p = pool(&[1, 1]);
    for _ in 0..10 {
        let i = least_conn_next(&p).unwrap();
        p[i].active_connections += 1;
    }
    assert_eq!((p[0].active_connections, p[1].active_connections), (5, 5));
}

proptest! {
    #[test]
    fn every_window_has_exact_counts(
        weights in prop::collection::vec(1u32..6, 1..6),
        warmup in 0usize..40,
    ) {
        let p = pool(&weights);
        let total: u32 = weights.iter().sum();
        let mut wrr = SmoothWrr::new();
        for _ in 0..warmup {
            wrr.next(&p).unwrap();
        }
        // Check several consecutive, overlapping windows.
        let picks: Vec<usize> = (0..total as usize * 3).map(|_| wrr.next(&p).unwrap()).collect();
        for window in picks.windows(total as usize) {
            for (i, &w) in weights.iter().enumerate() {
                prop_assert_eq!(window.iter().filter(|&&x| x == i).count() as u32, w);
            }
        }
    }

    #[test]
    fn unhealthy_backends_are_never_picked(
        weights in prop::collection::vec(1u32..6, 1..6),
        health in prop::collection::vec(any::<bool>(), 6),
    ) {
        let mut p = pool(&weights);
        for (b, h) in p.iter_mut().zip(&health) {
            b.healthy = *h;
        }
        let mut wrr = SmoothWrr::new();
        for _ in 0..20 {
            match wrr.next(&p) {
                Ok(i) => prop_assert!(p[i].healthy),
                Err(NoBackend) => prop_assert!(p.iter().all(|b| !b.healthy)),
            }
        }
    }

    #[test]
    fn least_conn_picks_a_minimum(
        counts in prop::collection::vec((0u32..10, any::<bool>()), 1..8),
    ) {
        let p: Vec<BackendState> = counts
            .iter()
            .map(|&(n, healthy)| BackendState { weight: 1, active_connections: n, healthy })
            .collect();
        match least_conn_next(&p) {
            Ok(i) => {
                prop_assert!(p[i].healthy);
                for (j, b) in p.iter().enumerate() {
                    if b.healthy {
                        prop_assert!(b.active_connections > p[i].active_connections
                            || (b.active_connections == p[i].active_connections && j >= i));
                    }
                }
            }
            Err(NoBackend) => prop_assert!(p.iter().all(|b| !b.healthy)),
        }
    }

    #[test]
    fn health_flips_only_after_two_agreeing_probes(probes in prop::collection::vec(any::<bool>(), 0..40)) {
        let mut tracker = HealthTracker::default();
        let mut model = true;
        let mut history: Vec<bool> = Vec::new();
        for p in probes {
            history.push(p);
            let got = tracker.observe(p);
            let n = history.len();
            if n >= 2 && history[n - 1] == history[n - 2] && history[n - 1] != model {
                model = history[n - 1];
                // A flip consumes the streak.
                history.clear();
            }
            prop_assert_eq!(got, model);
        }
    }
}
