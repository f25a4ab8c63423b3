mod common;

use peerbnn::data::{self, Batch, Dataset};
use peerbnn::rng;
use peerbnn::trainer::{self, AdamConfig, AdamState, Hyperparams, Method, PeerPair, Schedule, StepSettings};
use peerbnn::variational::{self, Architecture, BnnModel, PriorSpec, SamplingMode};
use peerbnn::Tensor;

fn moons(n: usize) -> Dataset {
    data::two_moons(n, 0.1, 0.0, &mut rng::stream(51, 0)).unwrap()
}

fn batches(set: &Dataset, size: usize) -> Vec<Batch> {
    (0..set.len() / size).map(|k| set.batch(&(k * size..(k + 1) * size).collect::<Vec<_>>())).collect()
}

fn pair(hyper: &Hyperparams, arch: &[usize]) -> PeerPair {
    let arch = Architecture::mlp(arch).unwrap();
    trainer::init_peers(&arch, SamplingMode::Bbb, PriorSpec::default(), hyper, None, &mut rng::stream(51, 1)).unwrap()
}

#[test]
fn zero_diversity_weights_reduce_to_plain_mutual_learning() {
    let set = moons(96);
    let bs = batches(&set, 16);
    let hyper = Hyperparams { alpha: 0.0, beta: 0.0, ..Hyperparams::small_dataset() };
    for method in [Method::Ours, Method::Dml] {
        let mut p = pair(&hyper, &[2, 6, 6, 2]);
        let mut r1 = common::RefNet::new(p.b1.model.clone());
        let mut r2 = common::RefNet::new(p.b2.model.clone());
        let (mut ra, mut rb) = (rng::stream(51, 2), rng::stream(51, 2));
        for step in 0..50 {
            let s = StepSettings::for_method(&hyper, method, 2, 5e-3);
            trainer::train_step(&mut p, &bs[step % bs.len()], &s, hyper.fusion.tokens, set.len(), &mut ra).unwrap();
            common::dml_step(&mut r1, &mut r2, &bs[step % bs.len()], hyper.temperature, 5e-3, set.len(), &mut rb);
            assert_eq!(p.b1.model.layers, r1.model.layers, "{} b1 step {step}", method.as_str());
            assert_eq!(p.b2.model.layers, r2.model.layers, "{} b2 step {step}", method.as_str());
        }
    }
}

#[test]
fn adam_matches_a_scalar_reference() {
    let cfg = AdamConfig::default();
    let mut x = Tensor::scalar(1.5);
    let mut st = AdamState::new(cfg, [&x]);
    let (mut m, mut v, mut want) = (0.0f64, 0.0f64, 1.5f64);
    for t in 1..=20 {
        // gradient of (x - 0.5)^2
        let g = 2.0 * (want - 0.5);
        let grad = Tensor::scalar(2.0 * (x.item() - 0.5));
        st.update(&mut [&mut x], &[grad], 0.05).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        want -= 0.05 * mh / (vh.sqrt() + 1e-8);
        approx::assert_abs_diff_eq!(x.item(), want, epsilon = 1e-12);
    }
}

#[test]
fn pretrained_means_with_vanishing_sigma_reproduce_the_deterministic_logits() {
    let arch = Architecture::mlp(&[2, 8, 2]).unwrap();
    let mut det = BnnModel::new(arch.clone(), SamplingMode::Bbb, PriorSpec::default(), &mut rng::stream(51, 3)).unwrap();
    let set = moons(64);
    trainer::train_deterministic(&mut det, &set, 3, 1e-2, 16, AdamConfig::default(), &mut rng::stream(51, 4)).unwrap();
    let hyper = Hyperparams::small_dataset();
    let mut p =
        trainer::init_peers(&arch, SamplingMode::Bbb, PriorSpec::default(), &hyper, Some(&det), &mut rng::stream(51, 5)).unwrap();
    for l in &mut p.b2.model.layers {
        l.rho_w.data_mut().iter_mut().for_each(|r| *r = -60.0);
        l.rho_b.data_mut().iter_mut().for_each(|r| *r = -60.0);
    }
    let noise = p.b2.model.sample_noise(&mut rng::stream(51, 6));
    let (z, _) = variational::forward_values(&p.b2.model, &set.x, &noise).unwrap();
    let (want, _) = variational::forward_values(&det, &set.x, &det.mean_noise()).unwrap();
    for (a, b) in z.data().iter().zip(want.data()) {
        approx::assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn both_halves_see_the_same_parameter_diversity() {
    let set = moons(32);
    let hyper = Hyperparams::small_dataset();
    let mut p = pair(&hyper, &[2, 8, 8, 2]);
    let s = StepSettings::for_method(&hyper, Method::Ours, 2, 1e-3);
    let m = trainer::train_step(&mut p, &set.as_batch(), &s, hyper.fusion.tokens, set.len(), &mut rng::stream(51, 7)).unwrap();
    assert_eq!(m.l_diverse_param[0], m.l_diverse_param[1]);
    approx::assert_abs_diff_eq!(m.l_diverse_param[0], (1.0 + (-m.d_param).exp()).ln(), epsilon = 1e-15);
    assert!(m.logit_kl.iter().all(Option::is_some));
    assert!(m.feat_kl.iter().all(Option::is_some));
}

#[test]
fn vanilla_peers_train_independently() {
    let set = moons(32);
    let hyper = Hyperparams::small_dataset();
    let base = pair(&hyper, &[2, 8, 8, 2]);
    let s = StepSettings::for_method(&hyper, Method::Vanilla, 2, 1e-2);
    let mut a = base.clone();
    let m = trainer::train_step(&mut a, &set.as_batch(), &s, hyper.fusion.tokens, set.len(), &mut rng::stream(51, 8)).unwrap();
    assert!(m.logit_kl.iter().all(Option::is_none) && m.feat_kl.iter().all(Option::is_none));
    // swapping B2 for another network must leave B1's update alone
    let mut b = base.clone();
    b.b2.model.layers[0].mu_w.data_mut()[0] += 3.0;
    trainer::train_step(&mut b, &set.as_batch(), &s, hyper.fusion.tokens, set.len(), &mut rng::stream(51, 8)).unwrap();
    assert_eq!(a.b1, b.b1);
}

#[test]
fn mutual_term_couples_the_peers() {
    let set = moons(32);
    let hyper = Hyperparams { alpha: 0.0, beta: 0.0, ..Hyperparams::small_dataset() };
    let base = pair(&hyper, &[2, 8, 8, 2]);
    let s = StepSettings::for_method(&hyper, Method::Dml, 2, 1e-2);
    let mut a = base.clone();
    trainer::train_step(&mut a, &set.as_batch(), &s, hyper.fusion.tokens, set.len(), &mut rng::stream(51, 9)).unwrap();
    let mut b = base.clone();
    b.b2.model.layers[0].mu_w.data_mut()[0] += 3.0;
    trainer::train_step(&mut b, &set.as_batch(), &s, hyper.fusion.tokens, set.len(), &mut rng::stream(51, 9)).unwrap();
    assert_ne!(a.b1, b.b1);
}

#[test]
fn non_finite_loss_leaves_the_pair_untouched() {
    let set = moons(16);
    let hyper = Hyperparams::small_dataset();
    let mut p = pair(&hyper, &[2, 4, 2]);
    p.b1.model.layers[0].mu_w.data_mut()[0] = f64::NAN;
    let before = format!("{p:?}");
    let s = StepSettings::for_method(&hyper, Method::Ours, 2, 1e-2);
    assert!(trainer::train_step(&mut p, &set.as_batch(), &s, hyper.fusion.tokens, set.len(), &mut rng::stream(51, 10)).is_err());
    assert_eq!(format!("{p:?}"), before);
}

#[test]
fn stage_one_disables_feature_diversity_and_stage_two_restores_it() {
    let h = Hyperparams::small_dataset();
    assert_eq!(StepSettings::for_method(&h, Method::Ours, 1, 1e-3).beta, 0.0);
    assert_eq!(StepSettings::for_method(&h, Method::Ours, 2, 1e-3).beta, 2.0);
    let v = StepSettings::for_method(&h, Method::Vanilla, 2, 1e-3);
    assert!(!v.mutual && v.alpha == 0.0 && v.beta == 0.0);
}

#[test]
fn schedule_resets_the_rate_at_stage_two() {
    let s = Schedule::default();
    assert_eq!(s.lr_at(1, 0), 1e-3);
    assert_eq!(s.lr_at(1, 15), 1e-3);
    approx::assert_relative_eq!(s.lr_at(1, 16), 1e-4, max_relative = 1e-15);
    approx::assert_relative_eq!(s.lr_at(1, 39), 1e-7, max_relative = 1e-15);
    assert_eq!(s.lr_at(2, 0), 1e-3);
    approx::assert_relative_eq!(s.lr_at(2, 19), 1e-6, max_relative = 1e-15);
    assert_eq!(s.total_epochs(), 60);
}

#[test]
fn training_runs_replay_exactly_and_record_every_epoch() {
    let set = moons(80);
    let (train, val) = (set.subset(&(0..64).collect::<Vec<_>>()), set.subset(&(64..80).collect::<Vec<_>>()));
    let hyper = Hyperparams::small_dataset();
    let sched = Schedule { stage1_epochs: 2, stage2_epochs: 2, stage1_decay: vec![1], stage2_decay: vec![1], batch_size: 16, lr: 1e-2, ..Schedule::default() };
    let go = || {
        let mut p = pair(&hyper, &[2, 8, 8, 2]);
        let run = trainer::run_training(&mut p, &train, &val, &hyper, &sched, Method::Ours, &mut rng::stream(51, 11)).unwrap();
        (p, run)
    };
    let (p1, r1) = go();
    let (p2, r2) = go();
    assert_eq!(p1, p2);
    assert_eq!(r1.history, r2.history);
    assert!(r1.failure.is_none());
    assert_eq!(r1.history.len(), 4);
    assert_eq!(r1.history.iter().map(|h| h.stage).collect::<Vec<_>>(), vec![1, 1, 2, 2]);
    assert!(r1.history[..2].iter().all(|h| h.feat_kl_b1.is_some()));
    assert_eq!(r1.history[2].lr, 1e-2);
}
