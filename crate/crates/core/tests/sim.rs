use charctl_core::sim::{
    observe, reset, step, Action, CharacterState, EnvConfig, SimObject, WorldState, H_MAX, H_MIN, OMEGA_LIMIT, SUBSTEPS,
    V_MAX,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn action() -> impl Strategy<Value = Action> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(f, t, h, a)| Action::new(f, t, h, a))
}

fn world(seed: u64) -> WorldState {
    reset(&EnvConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn run(mut w: WorldState, actions: &[Action]) -> Vec<WorldState> {
    let mut out = Vec::with_capacity(actions.len());
    for &a in actions {
        w = step(&w, a, SUBSTEPS).unwrap();
        out.push(w.clone());
    }
    out
}

/// A character aimed at the red block from 4 m away.
fn facing_block() -> WorldState {
    WorldState::new(
        CharacterState::at_rest(0.0),
        vec![SimObject::upright("red", "red", [4.0, 0.0]), SimObject::upright("blue", "blue", [0.0, 2.5])],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stepping_is_deterministic(seed in 0u64..1000, actions in prop::collection::vec(action(), 1..60)) {
        let a = run(world(seed), &actions);
        let b = run(world(seed), &actions);
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn observation_ignores_global_frame(
        seed in 0u64..1000,
        angle in -3.14f64..3.14,
        shift in (-50.0f64..50.0, -50.0f64..50.0),
        actions in prop::collection::vec(action(), 1..60),
    ) {
        let w = world(seed);
        let moved = w.transformed(angle, [shift.0, shift.1]);
        for (a, b) in run(w, &actions).iter().zip(run(moved, &actions)) {
            for (x, y) in observe(a).iter().zip(observe(&b)) {
                prop_assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn state_stays_within_limits(seed in 0u64..1000, actions in prop::collection::vec(action(), 1..120)) {
        for w in run(world(seed), &actions) {
            let c = &w.character;
            prop_assert!((H_MIN..=H_MAX).contains(&c.h));
            prop_assert!(c.speed() <= V_MAX + 1e-12);
            prop_assert!(c.omega.abs() <= OMEGA_LIMIT + 1e-12);
            for o in &w.objects {
                prop_assert!((0.0..=std::f64::consts::FRAC_PI_2).contains(&o.tilt));
                prop_assert_eq!(o.toppled, o.toppled || o.updot() < 0.3);
            }
        }
    }

    #[test]
    fn toppled_latch_never_clears(actions in prop::collection::vec((0.5f64..1.0, -0.3f64..0.3, -1.0f64..1.0, -1.0f64..1.0), 30..150)) {
        let actions: Vec<Action> = actions.into_iter().map(|(f, t, h, a)| Action::new(f, t, h, a)).collect();
        let mut seen = vec![false; 2];
        for w in run(facing_block(), &actions) {
            for (s, o) in seen.iter_mut().zip(&w.objects) {
                prop_assert!(!*s || o.toppled, "{} recovered", o.id);
                *s |= o.toppled;
            }
        }
    }

    #[test]
    fn zero_action_only_loses_speed(
        v in (-5.0f64..5.0, -5.0f64..5.0),
        omega in -6.0f64..6.0,
        h in 0.3f64..1.2,
        arm in -1.0f64..1.0,
        arm_rate in -3.0f64..3.0,
    ) {
        let mut c = CharacterState::at_rest(0.3);
        c.v = [v.0, v.1];
        if c.speed() > V_MAX {
            let k = V_MAX / c.speed();
            c.v = [c.v[0] * k, c.v[1] * k];
        }
        c.omega = omega;
        c.h = h;
        c.arm = arm;
        c.arm_rate = arm_rate;
        let mut w = WorldState::new(c, vec![]).unwrap();
        let mut prev = w.character.speed();
        for _ in 0..90 {
            w = step(&w, Action::default(), SUBSTEPS).unwrap();
            let s = w.character.speed();
            prop_assert!(s <= prev + 1e-12, "{s} > {prev}");
            prev = s;
        }
    }
}

#[test]
fn charging_a_block_topples_it_for_good() {
    let actions = vec![Action::new(1.0, 0.0, 0.0, 0.0); 120];
    let traj = run(facing_block(), &actions);
    let first = traj.iter().position(|w| w.objects[0].toppled).expect("block toppled");
    assert!(traj[first..].iter().all(|w| w.objects[0].toppled));
    assert!(traj.iter().all(|w| !w.objects[1].toppled));
}
