use proptest::prelude::*;
use radt::envs::{optimal_return, task_split, Action, GridEnv, GridTask, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

/// Finite-horizon dynamic program over (position, key flag), written
/// independently of the environment's own transition code.
fn dp_optimal(task: &GridTask) -> u64 {
    let (w, h) = (task.width as i64, task.height as i64);
    let n = (w * h) as usize;
    let idx = |x: i64, y: i64| (y * w + x) as usize;
    let mut v = vec![0u64; n * 2];
    for _ in 0..task.episode_len {
        let mut nv = vec![0u64; n * 2];
        for y in 0..h {
            for x in 0..w {
                for k in 0..2 {
                    let mut best = 0;
                    for (dx, dy) in [(0, -1), (0, 1), (-1, 0), (1, 0), (0, 0)] {
                        let nx = (x + dx).clamp(0, w - 1);
                        let ny = (y + dy).clamp(0, h - 1);
                        let here = (nx as usize, ny as usize);
                        let (r, nk) = match task.key {
                            None => ((here == task.goal) as u64, 0),
                            Some(key) => {
                                if (k == 0 && here == key) || (k == 1 && here == task.goal) {
                                    (1, 1)
                                } else {
                                    (0, k)
                                }
                            }
                        };
                        best = best.max(r + v[idx(nx, ny) * 2 + nk]);
                    }
                    nv[idx(x, y) * 2 + k] = best;
                }
            }
        }
        v = nv;
    }
    v[0]
}

fn rollout(task: &GridTask, actions: &[Action]) -> Vec<u8> {
    let mut env = GridEnv::new(task.clone()).unwrap();
    env.reset();
    actions.iter().map(|&a| env.step(a).unwrap().reward).collect()
}

#[test]
fn walking_down_to_goal_then_staying() {
    let task = GridTask::dark_room(10, 10, (0, 3));
    let mut acts = vec![Action::Down; 3];
    acts.extend(vec![Action::Stay; 97]);
    let ret: u64 = rollout(&task, &acts).iter().map(|&r| r as u64).sum();
    // arrival on the third move is rewarded, then 97 more steps on the goal
    assert_eq!(ret, 98);
    assert_eq!(optimal_return(&task).unwrap(), 98);
    assert_eq!(dp_optimal(&task), 98);
    let near = GridTask::dark_room(10, 10, (0, 1));
    assert_eq!(optimal_return(&near).unwrap(), 100);
    assert_eq!(dp_optimal(&near), 100);
}

#[test]
fn key_then_door_rewards() {
    let task = GridTask::key_door(10, 10, (0, 1), (0, 2));
    let r = rollout(&task, &[Action::Down, Action::Down, Action::Stay, Action::Stay]);
    assert_eq!(r, vec![1, 1, 1, 1]);
    // revisiting the key cell pays nothing
    let r = rollout(&task, &[Action::Down, Action::Up, Action::Down, Action::Down]);
    assert_eq!(r, vec![1, 0, 0, 1]);
    // door without key pays nothing
    let far = GridTask::key_door(10, 10, (5, 5), (0, 1));
    assert_eq!(rollout(&far, &[Action::Down, Action::Stay]), vec![0, 0]);
    assert_eq!(optimal_return(&task).unwrap(), 100);
    assert_eq!(dp_optimal(&task), 100);
}

#[test]
fn optimal_return_matches_dynamic_program() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..40 {
        let w = rng.gen_range(2..8);
        let h = rng.gen_range(2..8);
        let cell = |rng: &mut ChaCha8Rng| (rng.gen_range(0..w), rng.gen_range(0..h));
        let goal = cell(&mut rng);
        let mut task = if rng.gen_bool(0.5) {
            GridTask::dark_room(w, h, goal)
        } else {
            let mut key = cell(&mut rng);
            while key == goal {
                key = cell(&mut rng);
            }
            GridTask::key_door(w, h, key, goal)
        };
        task.episode_len = rng.gen_range(1..2 * w * h);
        assert_eq!(optimal_return(&task).unwrap(), dp_optimal(&task), "{task:?}");
    }
}

#[test]
fn dark_room_split_uses_every_cell_for_100_goals() {
    let (train, eval) = task_split(TaskKind::DarkRoom, 10, 10, 80, 20, 0).unwrap();
    assert_eq!((train.len(), eval.len()), (80, 20));
    let goals: HashSet<_> = train.iter().chain(&eval).map(|t| t.goal).collect();
    assert_eq!(goals.len(), 100);
    let again = task_split(TaskKind::DarkRoom, 10, 10, 80, 20, 0).unwrap();
    assert_eq!(again, (train, eval));
    let (small, _) = task_split(TaskKind::DarkRoom, 10, 10, 50, 20, 3).unwrap();
    assert!(small.iter().all(|t| t.goal != (0, 0)));
    assert!(task_split(TaskKind::DarkRoom, 10, 10, 90, 20, 0).is_err());
}

#[test]
fn key_door_split_is_disjoint() {
    let (train, eval) = task_split(TaskKind::DarkKeyDoor, 10, 10, 80, 20, 1).unwrap();
    let all: HashSet<_> = train.iter().chain(&eval).map(|t| (t.key.unwrap(), t.goal)).collect();
    assert_eq!(all.len(), 100);
    for t in train.iter().chain(&eval) {
        assert_ne!(t.key.unwrap(), t.goal);
        assert_ne!(t.key.unwrap(), (0, 0));
        assert_ne!(t.goal, (0, 0));
    }
    assert_ne!(train, task_split(TaskKind::DarkKeyDoor, 10, 10, 80, 20, 2).unwrap().0);
}

fn arb_task() -> impl Strategy<Value = GridTask> {
    (1usize..12, 1usize..12, any::<u64>(), any::<bool>()).prop_filter_map("needs two cells", |(w, h, s, kd)| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let goal = (rng.gen_range(0..w), rng.gen_range(0..h));
        if !kd {
            return Some(GridTask::dark_room(w, h, goal));
        }
        if w * h < 2 {
            return None;
        }
        let mut key = goal;
        while key == goal {
            key = (rng.gen_range(0..w), rng.gen_range(0..h));
        }
        Some(GridTask::key_door(w, h, key, goal))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_action_streams_stay_in_bounds(task in arb_task(), seed in any::<u64>()) {
        let mut env = GridEnv::new(task.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        env.reset();
        let mut ret = 0u64;
        let mut visited_key = false;
        let mut had_key = false;
        for _ in 0..10_000 {
            let a = Action::from_index(rng.gen_range(0..5)).unwrap();
            let r = env.step(a).unwrap();
            let s = env.state();
            prop_assert!(task.contains(s.pos));
            prop_assert!(r.reward <= 1);
            prop_assert!(s.has_key || !had_key);
            had_key = s.has_key;
            visited_key |= Some(s.pos) == task.key;
            ret += r.reward as u64;
            if r.done {
                prop_assert_eq!(s.t, task.episode_len);
                prop_assert!(ret <= optimal_return(&task).unwrap());
                if task.kind == TaskKind::DarkKeyDoor && !visited_key {
                    prop_assert_eq!(ret, 0);
                }
                env.reset();
                ret = 0;
                visited_key = false;
                had_key = false;
            }
        }
    }

    #[test]
    fn identical_action_streams_give_identical_results(task in arb_task(), seed in any::<u64>()) {
        let acts: Vec<Action> = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..task.episode_len).map(|_| Action::from_index(rng.gen_range(0..5)).unwrap()).collect()
        };
        let run = || {
            let mut env = GridEnv::new(task.clone()).unwrap();
            env.reset();
            acts.iter().map(|&a| env.step(a).unwrap()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
