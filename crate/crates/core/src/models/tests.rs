use proptest::prelude::*;

use super::*;

fn batch(rows: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = component_rng(seed, 99);
    Tensor::matrix(rows, INPUT_DIM, (0..rows * INPUT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn init_is_deterministic_per_seed() {
    for mode in Mode::ALL {
        assert_eq!(init_bundle(mode, 7), init_bundle(mode, 7));
        assert_ne!(init_bundle(mode, 7).encoder, init_bundle(mode, 8).encoder);
    }
    // the encoder does not depend on which other parts the mode builds
    assert_eq!(init_bundle(Mode::Ae, 3).encoder, init_bundle(Mode::SLsslNode, 3).encoder);
}

#[test]
fn mode_structure() {
    for mode in Mode::ALL {
        let b = init_bundle(mode, 0);
        assert_eq!(b.decoder.is_some(), mode.has_decoder(), "{mode}");
        assert_eq!(b.direction.is_some(), mode.has_direction(), "{mode}");
        assert_eq!(b.dynamics.is_some(), mode.is_node(), "{mode}");
    }
    assert!(init_bundle(Mode::Ae, 0).direction.is_none());
    assert!(init_bundle(Mode::SLssl, 0).decoder.is_none());
    assert!(init_bundle(Mode::SLsslNode, 0).decoder.is_none());
}

#[test]
fn mode_names_and_weights() {
    for mode in Mode::ALL {
        assert_eq!(mode.name().parse::<Mode>().unwrap(), mode);
        let (r, d) = mode.default_weights();
        assert_eq!(Mode::from_weights(r, d, mode.is_node()).unwrap(), mode);
        mode.check_weights(r, d).unwrap();
    }
    assert_eq!("S_LSSL+NODE".parse::<Mode>().unwrap(), Mode::SLsslNode);
    assert!("vae".parse::<Mode>().is_err());
    assert!(Mode::from_weights(0.0, 0.0, false).is_err());
    assert!(Mode::from_weights(-1.0, 1.0, false).is_err());
    assert!(Mode::SLssl.check_weights(1.0, 1.0).is_err());
    assert_eq!(Mode::from_weights(0.5, 2.0, true).unwrap(), Mode::LsslNode);
}

#[test]
fn architecture_sizes() {
    let b = init_bundle(Mode::LsslNode, 0);
    assert_eq!((b.encoder.in_dim(), b.encoder.out_dim()), (INPUT_DIM, LATENT_DIM));
    assert_eq!(b.decoder.as_ref().unwrap().out_dim(), INPUT_DIM);
    assert_eq!(b.dynamics.as_ref().unwrap().n_params(), (65 * 64 + 64) + (64 * 64 + 64));
    assert_eq!(b.named_params()[0].0, "encoder.0.weight");
    assert_eq!(b.named_params().len(), b.params().len());
}

#[test]
fn tau_is_nonzero_after_init() {
    for seed in 0..100 {
        let tau = init_bundle(Mode::Lssl, seed).tau_values().unwrap();
        assert_eq!(tau.shape(), &[LATENT_DIM]);
        assert!(tau.norm() > 0.0, "seed {seed}");
    }
}

#[test]
fn encode_pair_identities() {
    let b = init_bundle(Mode::Lssl, 1);
    let g = Graph::new();
    let v = b.bind(&g, false).unwrap();
    let x = g.constant(batch(4, 0)).unwrap();
    let y = g.constant(batch(4, 1)).unwrap();
    let (_, _, dz) = b.encode_pair(&g, &v, x, x).unwrap();
    assert!(g.data(dz).iter().all(|d| *d == 0.0));

    let (zi, zj, dz) = b.encode_pair(&g, &v, x, y).unwrap();
    let (zi, zj, dz) = (g.data(zi), g.data(zj), g.data(dz));
    for k in 0..dz.len() {
        // the rounding of one subtraction is the only slack
        assert!((dz[k] + zi[k] - zj[k]).abs() <= f64::EPSILON * zj[k].abs().max(zi[k].abs()));
    }
    let (_, _, back) = b.encode_pair(&g, &v, y, x).unwrap();
    assert!(g.data(back).iter().zip(&dz).all(|(a, b)| *a == -b));

    let short = g.constant(Tensor::matrix(4, 3, vec![0.0; 12]).unwrap()).unwrap();
    assert!(b.encode_pair(&g, &v, x, short).is_err());
}

#[test]
fn zero_encoder_maps_to_origin() {
    let mut b = init_bundle(Mode::Ae, 2);
    b.encoder.params.iter_mut().for_each(|p| p.data_mut().fill(0.0));
    let z = b.encode_values(&batch(3, 5)).unwrap();
    assert!(z.data().iter().all(|v| *v == 0.0));
}

#[test]
fn fresh_dynamics_is_the_identity_flow() {
    let b = init_bundle(Mode::LsslNode, 4);
    let g = Graph::new();
    let v = b.bind(&g, false).unwrap();
    let x = g.constant(batch(3, 2)).unwrap();
    let (zi, zn, dz, _) = b.encode_predict_next(&g, &v, x, &[0.0, 1.3, 2.4], &SolverConfig::default(), GradientMode::Adjoint).unwrap();
    assert_eq!(g.data(zi), g.data(zn));
    assert!(g.data(dz).iter().all(|d| *d == 0.0));
    assert!(matches!(
        init_bundle(Mode::Lssl, 0).encode_predict_next(&g, &b.bind(&g, false).unwrap(), x, &[1.0; 3], &SolverConfig::default(), GradientMode::Adjoint),
        Err(ModelError::ModeMismatch { .. })
    ));
}

#[test]
fn zero_horizon_leaves_latent_unchanged() {
    let mut b = init_bundle(Mode::SLsslNode, 4);
    // give the flow a nonzero field
    let d = b.dynamics.as_mut().unwrap();
    let n = d.mlp.params.len();
    d.mlp.params[n - 1].data_mut().fill(0.5);
    let g = Graph::new();
    let v = b.bind(&g, false).unwrap();
    let x = g.constant(batch(2, 2)).unwrap();
    let (zi, zn, _, _) = b.encode_predict_next(&g, &v, x, &[0.0, 0.0], &SolverConfig::default(), GradientMode::Adjoint).unwrap();
    assert_eq!(g.data(zi), g.data(zn));
    let (_, zn, _, _) = b.encode_predict_next(&g, &v, x, &[0.0, 1.0], &SolverConfig::default(), GradientMode::Adjoint).unwrap();
    assert_ne!(g.data(zi)[LATENT_DIM..], g.data(zn)[LATENT_DIM..]);
}

#[test]
fn linear_scalar_flow_matches_exponential() {
    // u(t, z) = −0.7·z on a one-dimensional latent
    struct Decay(Vec<Tensor>);
    impl Dynamics for Decay {
        fn state_dim(&self) -> usize {
            1
        }
        fn params(&self) -> &[Tensor] {
            &self.0
        }
        fn build(&self, g: &Graph, _t: Var, z: Var, p: &[Var]) -> Result<Var, AutodiffError> {
            g.matmul(z, p[0])
        }
    }
    let f = Decay(vec![Tensor::matrix(1, 1, vec![-0.7]).unwrap()]);
    let cfg = SolverConfig::default();
    let g = Graph::new();
    let p = bind(&g, f.params(), false).unwrap();
    let z0 = g.constant(Tensor::matrix(2, 1, vec![1.0, -2.0]).unwrap()).unwrap();
    let (z1, _) = predict_next(&g, Rc::new(f), z0, &p, &[1.0, 3.0], &cfg, GradientMode::Adjoint).unwrap();
    let out = g.data(z1);
    for (got, want) in out.iter().zip([(-0.7f64).exp(), -2.0 * (-2.1f64).exp()]) {
        assert!((got - want).abs() <= 10.0 * cfg.mixed_tolerance(want));
    }
}

#[test]
fn node_classifier_identities() {
    let cfg = SolverConfig::default();
    let x = batch(3, 6);
    let run = |m: &NodeClassifier, dts: &[f64]| {
        let g = Graph::new();
        let v = m.bind(&g, false).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let (logits, _) = m.forward(&g, &v, xv, dts, &cfg, GradientMode::Adjoint).unwrap();
        g.value(logits)
    };
    let mut m = NodeClassifier::scratch(3);
    let direct = m.head.apply(&m.encoder.apply(&x).unwrap()).unwrap();
    // zero-initialized output layer: logits do not depend on Δt
    assert_eq!(run(&m, &[0.0, 0.0, 0.0]), direct);
    assert_eq!(run(&m, &[0.5, 1.0, 2.0]), direct);
    let n = m.dynamics.mlp.params.len();
    m.dynamics.mlp.params[n - 2].data_mut().iter_mut().enumerate().for_each(|(i, w)| *w = 0.01 * ((i % 7) as f64 - 3.0));
    let direct = m.head.apply(&m.encoder.apply(&x).unwrap()).unwrap();
    assert_eq!(run(&m, &[0.0, 0.0, 0.0]), direct);
    assert_ne!(run(&m, &[0.5, 1.0, 2.0]), direct);
    assert_eq!(run(&m, &[0.0; 3]).shape(), &[3, N_GRADES]);

    assert!(NodeClassifier::from_bundle(&init_bundle(Mode::Lssl, 0), 0).is_err());
    let b = init_bundle(Mode::SLsslNode, 9);
    let c = NodeClassifier::from_bundle(&b, 9).unwrap();
    assert_eq!(c.encoder, b.encoder);
}

#[test]
fn head_shapes() {
    let x = batch(2, 1);
    let age = AgeRegressor::new(new_encoder(0), 0);
    let g = Graph::new();
    let v = age.bind(&g, false).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    assert_eq!(g.shape(age.forward(&g, &v, xv).unwrap()), vec![2, 1]);
    let nv = NextVisitModel::new(new_encoder(0), 0);
    let v = nv.bind(&g, false).unwrap();
    assert_eq!(g.shape(nv.forward(&g, &v, &[xv, xv, xv]).unwrap()), vec![2, N_GRADES]);
    assert_eq!(age.param_sizes().len(), 4 + 6);
}

#[test]
fn named_tensors_round_trip() {
    let a = init_bundle(Mode::LsslNode, 1);
    let mut b = init_bundle(Mode::LsslNode, 2);
    let map: std::collections::HashMap<String, Tensor> = a.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    b.load_named(|n| map.get(n).cloned()).unwrap();
    assert_eq!(a, b);
    let mut c = init_bundle(Mode::LsslNode, 2);
    assert!(matches!(c.load_named(|n| if n.starts_with("dynamics") { None } else { map.get(n).cloned() }), Err(ModelError::MissingTensor(_))));
    assert!(c.load_named(|_| Some(Tensor::zeros(&[1]))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_passes_are_pure(seed in 0u64..10_000, rows in 1usize..5) {
        let b = init_bundle(Mode::Lssl, seed);
        let x = batch(rows, seed);
        prop_assert_eq!(b.encode_values(&x).unwrap(), b.encode_values(&x).unwrap());
    }

    #[test]
    fn swapping_a_pair_negates_the_trajectory(seed in 0u64..10_000) {
        let b = init_bundle(Mode::SLssl, seed);
        let g = Graph::new();
        let v = b.bind(&g, false).unwrap();
        let x = g.constant(batch(2, seed)).unwrap();
        let y = g.constant(batch(2, seed + 1)).unwrap();
        let (_, _, d1) = b.encode_pair(&g, &v, x, y).unwrap();
        let (_, _, d2) = b.encode_pair(&g, &v, y, x).unwrap();
        prop_assert!(g.data(d1).iter().zip(g.data(d2)).all(|(a, b)| *a == -b));
    }
}
