use iet_core::model::{Adam, ModelConfig, TrainState};
use iet_core::params::Parameters;
use iet_core::pipeline::{bicubic_resize, synthetic_texture};

fn flat(p: &impl Parameters) -> Vec<f64> {
    p.named().into_iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn same_seed_gives_identical_states() {
    let hr = synthetic_texture(16, 16, 1).unwrap();
    let lr = bicubic_resize(&hr, 1, 2).unwrap();
    let run = || {
        let mut s = TrainState::new(ModelConfig::toy(), 9, Adam::default()).unwrap();
        let losses: Vec<f64> = (0..3).map(|_| s.train_step(lr.pixels(), hr.pixels()).unwrap()).collect();
        (s, losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(flat(&a.params), flat(&b.params));
    assert_eq!(flat(&a.m), flat(&b.m));
    assert_eq!(flat(&a.v), flat(&b.v));
    assert_eq!(a.step, 3);
}

#[test]
fn zero_gradients_leave_parameters_alone() {
    let mut s = TrainState::new(ModelConfig::toy(), 2, Adam::default()).unwrap();
    let before = flat(&s.params);
    let zero = s.params.zeroed();
    s.apply(&zero).unwrap();
    s.apply(&zero).unwrap();
    assert_eq!(flat(&s.params), before);
}

#[test]
fn non_finite_gradients_are_rejected() {
    let mut s = TrainState::new(ModelConfig::toy(), 2, Adam::default()).unwrap();
    let mut g = s.params.zeroed();
    g.head_b.data_mut()[0] = f64::NAN;
    assert!(s.apply(&g).is_err());
    assert_eq!(s.step, 0);
}

