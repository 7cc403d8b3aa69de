use tmd_core::distance::DistanceTable;
use tmd_core::mdp::TabularMdp;
use tmd_core::oracle::{d_sd_star, q_star};
use tmd_core::policy::{evaluate, extract_tabular_policy, EvalTask, GoalPolicy, TabularGoalPolicy};
use tmd_core::presets::preset;

/// Actions 0 = left, 1 = stay, 2 = right on a line of `n` states.
fn chain(n: usize) -> TabularMdp {
    let next: Vec<Vec<usize>> = (0..n).map(|s| vec![s.saturating_sub(1), s, (s + 1).min(n - 1)]).collect();
    TabularMdp::deterministic(0.9, &next).unwrap()
}

#[test]
fn chain_policy_is_shortest_path() {
    let mdp = chain(5);
    let d = d_sd_star(&mdp);
    let pi = extract_tabular_policy(&d);
    assert!(pi.unreachable.is_empty());
    for g in 0..5 {
        let q = q_star(&mdp, g).unwrap();
        for s in 0..5 {
            let a = pi.act(s, g);
            if s == g {
                assert_eq!(a, 0, "tie-break at the goal");
                continue;
            }
            assert_eq!(a, if g > s { 2 } else { 0 }, "s={s} g={g}");
            assert_eq!(a, q.greedy_action(s));
        }
    }
}

#[test]
fn extraction_invariant_under_monotone_maps() {
    let mdp = chain(5);
    let d = d_sd_star(&mdp);
    let base = extract_tabular_policy(&d);
    for f in [|v: f64| v + 3.0, |v: f64| v.exp(), |v: f64| 2.0 * v * v * v + v] {
        let vals: Vec<f64> = d.values().iter().map(|&v| f(v)).collect();
        let t = DistanceTable::from_values(d.n_states(), d.n_actions(), vals).unwrap();
        assert_eq!(extract_tabular_policy(&t).actions, base.actions);
    }
}

/// Probability of reaching `goal` within `horizon` steps under `pi`.
fn reach_probability(mdp: &TabularMdp, pi: &TabularGoalPolicy, start: usize, goal: usize, horizon: usize) -> f64 {
    let mut mass = vec![0.0; mdp.n_states()];
    mass[start] = 1.0;
    let mut hit = 0.0;
    for _ in 0..horizon {
        let mut next = vec![0.0; mdp.n_states()];
        for (s, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for &(sp, p) in mdp.successors(s, pi.act(s, goal)) {
                next[sp] += m * p;
            }
        }
        hit += next[goal];
        next[goal] = 0.0;
        mass = next;
    }
    hit
}

#[test]
fn teleport_success_matches_dynamic_programming() {
    let p = preset("teleport").unwrap();
    let world = p.build().unwrap();
    let pi = extract_tabular_policy(&d_sd_star(&world.mdp));
    let tasks = p.eval_tasks(&world, 2000);
    let report = evaluate(&world.mdp, &pi, &tasks, 7);
    for (task, res) in tasks.iter().zip(&report.tasks) {
        let exact = reach_probability(&world.mdp, &pi, task.start, task.goal, task.horizon);
        assert!((res.rate - exact).abs() <= 0.03, "task {}: {} vs {}", res.task_id, res.rate, exact);
    }
}

#[test]
fn optimal_policy_solves_deterministic_maze() {
    let p = preset("stitch-7x7").unwrap();
    let world = p.build().unwrap();
    let pi = extract_tabular_policy(&d_sd_star(&world.mdp));
    let report = evaluate(&world.mdp, &pi, &p.eval_tasks(&world, 5), 0);
    assert_eq!(report.aggregate, 1.0);
}

#[test]
fn evaluation_is_seed_deterministic() {
    let p = preset("teleport").unwrap();
    let world = p.build().unwrap();
    let pi = extract_tabular_policy(&d_sd_star(&world.mdp));
    let tasks = p.eval_tasks(&world, 50);
    assert_eq!(evaluate(&world.mdp, &pi, &tasks, 3), evaluate(&world.mdp, &pi, &tasks, 3));
    let single = evaluate(&world.mdp, &pi, &tasks[..1], 3);
    assert_eq!(single.tasks[0], evaluate(&world.mdp, &pi, &tasks, 3).tasks[0]);
}

#[test]
fn empty_task_list() {
    let mdp = chain(3);
    let pi = extract_tabular_policy(&d_sd_star(&mdp));
    let r = evaluate(&mdp, &pi, &[], 0);
    assert_eq!(r.aggregate, 0.0);
    let r = evaluate(
        &mdp,
        &pi,
        &[EvalTask {
            start: 0,
            goal: 2,
            horizon: 2,
            episodes: 10,
        }],
        0,
    );
    assert_eq!(r.aggregate, 1.0);
}
