use std::collections::BTreeSet;

use tmd_core::env::{generate_dataset, reachable_from, sample_batch, sample_offset, Dataset, GoalOffset};
use tmd_core::mdp::Trajectory;
use tmd_core::presets::preset;
use tmd_core::rng::seeded;

fn long_walks() -> Dataset {
    let p = preset("corridor").unwrap();
    let world = p.build().unwrap();
    generate_dataset(&world, &p.dataset).unwrap()
}

#[test]
fn tiny_discount_picks_next_state() {
    let data = long_walks();
    let mut rng = seeded(1);
    let b = sample_batch(&data, 20_000, 0.01, GoalOffset::StrictlyFuture, &mut rng).unwrap();
    let hits = b.goals.iter().zip(&b.next_states).filter(|(g, n)| g == n).count();
    assert!(hits as f64 / b.len() as f64 >= 0.98, "{hits}");
}

#[test]
fn offset_mean_matches_geometric() {
    let mut rng = seeded(2);
    for gamma in [0.5, 0.9, 0.95] {
        let n = 100_000;
        let mean = (0..n).map(|_| sample_offset(gamma, GoalOffset::StrictlyFuture, &mut rng) as f64).sum::<f64>() / n as f64;
        let want = 1.0 / (1.0 - gamma);
        assert!((mean - want).abs() <= 0.05 * want, "γ={gamma}: {mean} vs {want}");
    }
}

#[test]
fn offset_distribution_matches_geometric() {
    let mut rng = seeded(3);
    let gamma: f64 = 0.8;
    let n = 100_000;
    let mut counts = [0usize; 12];
    for _ in 0..n {
        let k = sample_offset(gamma, GoalOffset::StrictlyFuture, &mut rng);
        assert!(k >= 1);
        if k < counts.len() {
            counts[k] += 1;
        }
    }
    for (k, &c) in counts.iter().enumerate().take(11).skip(1) {
        let want = (1.0 - gamma) * gamma.powi(k as i32 - 1);
        assert!((c as f64 / n as f64 - want).abs() < 0.01, "k={k}");
    }
    let zeros = (0..10_000).filter(|_| sample_offset(gamma, GoalOffset::IncludeCurrent, &mut rng) == 0).count();
    assert!((zeros as f64 / 10_000.0 - 0.2).abs() < 0.02);
}

#[test]
fn single_trajectory_batches_follow_it() {
    let t = Trajectory {
        states: vec![0, 1, 2, 3, 4],
        actions: vec![1, 1, 1, 1],
    };
    let data = Dataset { trajectories: vec![t] };
    let mut rng = seeded(4);
    let b = sample_batch(&data, 500, 0.9, GoalOffset::StrictlyFuture, &mut rng).unwrap();
    for i in 0..b.len() {
        assert_eq!(b.next_states[i], b.states[i] + 1);
        assert!(b.goals[i] > b.states[i]);
        assert!(b.goals[i] <= 4);
    }
}

#[test]
fn random_walk_covers_reachable_pairs() {
    let p = preset("teleport").unwrap();
    let world = p.build().unwrap();
    let data = generate_dataset(&world, &p.dataset).unwrap();
    let na = world.mdp.n_actions();
    let starts: Vec<usize> = (0..world.n_states()).filter(|&s| !world.is_teleport(s)).collect();
    let reach = reachable_from(&world.mdp, &starts);
    let want: BTreeSet<(usize, usize)> = (0..world.n_states())
        .filter(|&s| reach[s])
        .flat_map(|s| (0..na).map(move |a| (s, a)))
        .collect();
    assert_eq!(data.visited_pairs(), want);
    // the teleporter itself is never occupied
    assert!(want.len() < world.n_states() * na);
}
