use charctl_core::sim::{CharacterState, SimObject, WorldState};
use charctl_core::tasks::{
    goal_features, reward_facing, reward_location, reward_strike, sample_goal, task_reward, Goal, TaskKind,
    STRIKE_SATURATED,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn xy(r: f64) -> impl Strategy<Value = [f64; 2]> {
    (-r..r, -r..r).prop_map(|(a, b)| [a, b])
}

prop_compose! {
    fn scene()(p in xy(10.0), theta in -3.14f64..3.14, v in xy(3.0), obj in xy(10.0), tilt in 0.0f64..1.5707, tilt_rate in -2.0f64..2.0) -> WorldState {
        let mut c = CharacterState::at_rest(theta);
        c.p = p;
        c.v = v;
        let mut o = SimObject::upright("red", "red", obj);
        o.tilt = tilt;
        o.tilt_rate = tilt_rate;
        o.toppled = o.updot() < 0.3;
        WorldState::new(c, vec![o]).unwrap()
    }
}

fn rot(a: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = a.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rewards_and_features_ignore_global_frame(w in scene(), dir_angle in -3.14f64..3.14, angle in -3.14f64..3.14, shift in xy(100.0)) {
        let moved = w.transformed(angle, shift);
        let dir = [dir_angle.cos(), dir_angle.sin()];
        let target = w.objects[0].p;
        let goals = [
            (Goal::Facing { dir }, Goal::Facing { dir: rot(angle, dir) }),
            (
                Goal::Location { target, object_id: "red".into() },
                Goal::Location { target: moved.objects[0].p, object_id: "red".into() },
            ),
            (Goal::Strike { object_id: "red".into() }, Goal::Strike { object_id: "red".into() }),
        ];
        for (g, gm) in goals {
            let (a, b) = (task_reward(&w, &g).unwrap(), task_reward(&moved, &gm).unwrap());
            prop_assert!((a - b).abs() <= 1e-9, "{:?}: {a} vs {b}", g.kind());
            let (fa, fb) = (goal_features(&w, &g).unwrap(), goal_features(&moved, &gm).unwrap());
            for (x, y) in fa.iter().zip(fb) {
                prop_assert!((x - y).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn facing_is_capped_at_half(w in scene(), dir_angle in -3.14f64..3.14) {
        let dir = [dir_angle.cos(), dir_angle.sin()];
        let r = reward_facing(&w, dir);
        let h = w.character.heading();
        let dot = h[0] * dir[0] + h[1] * dir[1];
        prop_assert!(r <= 0.5);
        prop_assert_eq!(r == 0.5, dot >= 0.5);
    }

    #[test]
    fn location_reward_in_range(w in scene(), target in xy(20.0)) {
        // The far branch peaks just outside 2 m: 0.2 e^-1 + 0.8.
        let r = reward_location(&w, target);
        let p = w.character.p;
        if (target[0] - p[0]).hypot(target[1] - p[1]) <= 2.0 {
            prop_assert_eq!(r, 0.8);
        } else {
            prop_assert!(r > 0.0 && r <= 0.2 * (-1.0f64).exp() + 0.8);
        }
    }

    #[test]
    fn strike_saturates_exactly_when_toppled(w in scene()) {
        let r = reward_strike(&w, "red").unwrap();
        if w.objects[0].updot() < 0.3 {
            prop_assert_eq!(r, STRIKE_SATURATED);
        } else {
            prop_assert!(r > 0.0 && r != STRIKE_SATURATED);
        }
    }
}

#[test]
fn sampled_facing_directions_are_balanced() {
    let w = WorldState::new(CharacterState::at_rest(0.7), vec![]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 4000;
    let mut sum = [0.0; 2];
    for _ in 0..n {
        let Goal::Facing { dir } = sample_goal(TaskKind::Facing, &w, &mut rng).unwrap() else {
            panic!("facing goal expected");
        };
        assert!((dir[0].hypot(dir[1]) - 1.0).abs() < 1e-12);
        sum[0] += dir[0];
        sum[1] += dir[1];
    }
    assert!((sum[0] / n as f64).hypot(sum[1] / n as f64) < 0.05);
}

#[test]
fn object_goals_reference_existing_blocks() {
    let w = WorldState::new(
        CharacterState::at_rest(0.0),
        vec![SimObject::upright("a", "red", [3.0, 0.0]), SimObject::upright("b", "blue", [0.0, 4.0])],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for task in [TaskKind::Location, TaskKind::Strike] {
        for _ in 0..20 {
            let g = sample_goal(task, &w, &mut rng).unwrap();
            assert!(w.object(g.object_id().unwrap()).is_some());
        }
    }
    let empty = WorldState::new(CharacterState::at_rest(0.0), vec![]).unwrap();
    assert!(sample_goal(TaskKind::Strike, &empty, &mut rng).is_err());
    assert!(reward_strike(&w, "missing").is_err());
}
