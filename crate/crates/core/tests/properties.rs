use proptest::prelude::*;
use tmd_core::critic::{EncoderConfig, EncoderParams, Features};
use tmd_core::distance::{
    action_relaxation, bellman_backup, is_quasimetric, path_relaxation, quasimetric_closure, DistanceTable,
    WaypointDomain,
};
use tmd_core::env::{generate_dataset, sample_batch, Behavior, Dataset, DatasetSpec, GoalOffset, GridSpec};
use tmd_core::loss::{divergence_term, Divergence};
use tmd_core::mdp::{TabularMdp, TabularPolicy};
use tmd_core::nn::{mrn_distance, MrnConfig};
use tmd_core::oracle::{d_sd_pi, d_sd_star};
use tmd_core::rng::seeded;
use tmd_core::verify::{random_mdp, random_table};

fn table(seed: u64) -> DistanceTable {
    let mut rng = seeded(seed);
    let ns = 1 + (seed % 4) as usize;
    let na = 1 + (seed / 4 % 3) as usize;
    random_table(&mut rng, ns, na, 4.0)
}

fn mdp(seed: u64) -> TabularMdp {
    let mut rng = seeded(seed);
    random_mdp(&mut rng, 2 + (seed % 6) as usize, 1 + (seed / 6 % 3) as usize, seed % 2 == 0, 0.8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mrn_is_a_quasimetric(
        x in prop::collection::vec(-3.0f64..3.0, 12),
        y in prop::collection::vec(-3.0f64..3.0, 12),
        z in prop::collection::vec(-3.0f64..3.0, 12),
    ) {
        let cfg = MrnConfig::new(3, 4).unwrap();
        let d = |a: &[f64], b: &[f64]| mrn_distance(a, b, cfg).unwrap();
        prop_assert_eq!(d(&x, &x), 0.0);
        prop_assert!(d(&x, &y) >= 0.0);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
    }

    #[test]
    fn path_relaxation_only_shrinks(seed in any::<u64>()) {
        let d = table(seed);
        for domain in [WaypointDomain::Joint, WaypointDomain::StatesOnly] {
            let p = path_relaxation(&d, domain);
            prop_assert!(p.le(&d, 0.0));
            let c = quasimetric_closure(&d, domain);
            prop_assert!(c.le(&p, 0.0));
            prop_assert_eq!(quasimetric_closure(&c, domain), c);
        }
        prop_assert!(is_quasimetric(&quasimetric_closure(&d, WaypointDomain::Joint), 1e-12));
    }

    #[test]
    fn action_relaxation_is_idempotent(seed in any::<u64>()) {
        let d = table(seed);
        let once = action_relaxation(&d);
        prop_assert!(once.le(&d, 0.0));
        prop_assert_eq!(action_relaxation(&once), once);
    }

    #[test]
    fn bellman_backup_is_monotone(seed in any::<u64>(), shift in 0.0f64..2.0) {
        let m = mdp(seed);
        let mut rng = seeded(seed ^ 0x55);
        let lo = random_table(&mut rng, m.n_states(), m.n_actions(), 3.0);
        let mut hi = lo.clone();
        for x in 0..hi.size() {
            for y in 0..hi.size() {
                if x != y {
                    hi.set(x, y, lo.get(x, y) + shift);
                }
            }
        }
        let (a, b) = (bellman_backup(&m, &lo).unwrap(), bellman_backup(&m, &hi).unwrap());
        prop_assert!(a.le(&b, 1e-12));
    }

    #[test]
    fn optimal_distance_is_a_lower_bound(seed in any::<u64>()) {
        let m = mdp(seed);
        let star = d_sd_star(&m);
        prop_assert!(is_quasimetric(&star, 1e-7));
        let d_pi = d_sd_pi(&m, &TabularPolicy::uniform(m.n_states(), m.n_actions())).unwrap().table;
        prop_assert!(star.le(&d_pi, 1e-7));
    }

    #[test]
    fn bregman_minimum_at_target(d in -5.0f64..10.0, t in -5.0f64..10.0) {
        let (v, dd, _) = divergence_term(Divergence::Bregman, d, t);
        let (v0, dd0, _) = divergence_term(Divergence::Bregman, t, t);
        prop_assert!(v >= v0 - 1e-9);
        prop_assert!(dd0.abs() < 1e-12);
        prop_assert_eq!(dd > 0.0, d > t);
    }

    #[test]
    fn divergence_derivatives(d in 0.05f64..6.0, t in 0.05f64..6.0) {
        for kind in [Divergence::Bregman, Divergence::L2, Divergence::Bce] {
            let (_, dd, dt) = divergence_term(kind, d, t);
            let h = 1e-6;
            let fd = (divergence_term(kind, d + h, t).0 - divergence_term(kind, d - h, t).0) / (2.0 * h);
            let ft = (divergence_term(kind, d, t + h).0 - divergence_term(kind, d, t - h).0) / (2.0 * h);
            prop_assert!((fd - dd).abs() <= 1e-5 * dd.abs().max(1.0));
            prop_assert!((ft - dt).abs() <= 1e-5 * dt.abs().max(1.0));
        }
    }

    #[test]
    fn critic_table_is_a_quasimetric(seed in any::<u64>(), ln in any::<bool>()) {
        let cfg = EncoderConfig { hidden: vec![8], layer_norm: ln, ..EncoderConfig::default() };
        let params = EncoderParams::init(&cfg, Features::one_hot(4, 2), &mut seeded(seed));
        let d = params.distance_table();
        prop_assert!(is_quasimetric(&d, 1e-9));
    }

    #[test]
    fn batches_follow_their_trajectories(seed in any::<u64>(), gamma in 0.05f64..0.99, n in 1usize..40) {
        let spec = GridSpec::from_ascii(&["...", ".#.", "..."], gamma);
        let world = tmd_core::env::build_gridworld(&spec).unwrap();
        let data = generate_dataset(&world, &DatasetSpec {
            behavior: Behavior::UniformRandomWalk,
            n_trajectories: 3,
            trajectory_len: 4,
            seed,
        }).unwrap();
        let b = sample_batch(&data, n, gamma, GoalOffset::StrictlyFuture, &mut seeded(seed)).unwrap();
        prop_assert_eq!(b.len(), n);
        for i in 0..n {
            let ok = data.trajectories.iter().any(|t| {
                (0..t.n_transitions()).any(|k| {
                    t.states[k] == b.states[i]
                        && t.actions[k] == b.actions[i]
                        && t.states[k + 1] == b.next_states[i]
                        && t.states[k + 1..].contains(&b.goals[i])
                })
            });
            prop_assert!(ok);
            prop_assert!(world.mdp.prob(b.states[i], b.actions[i], b.next_states[i]) > 0.0);
        }
    }

    #[test]
    fn dataset_jsonl_round_trip(seed in any::<u64>()) {
        let world = tmd_core::env::build_gridworld(&GridSpec::from_ascii(&["....", "...."], 0.9)).unwrap();
        let data = generate_dataset(&world, &DatasetSpec {
            behavior: Behavior::NoisyExpert { epsilon: 0.3 },
            n_trajectories: 4,
            trajectory_len: 3,
            seed,
        }).unwrap();
        let mut buf = Vec::new();
        data.write_jsonl(&mut buf).unwrap();
        prop_assert_eq!(Dataset::read_jsonl(&buf[..]).unwrap(), data);
    }
}
