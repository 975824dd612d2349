use proptest::prelude::*;

use salient_core::losses::{
    mmd_squared, similarity_loss, total_objective, Kernel, KernelConfig, ObjectiveSpec, ObjectiveWeights,
    SimilarityVariant,
};
use salient_core::nn::{encode, reparameterize, standard_normal, Activation, EncoderParams, LayerSpec};
use salient_core::toydata::{sample_batch, FormantWorld, SampleOptions, WorldConfig};
use salient_core::{Graph, NodeId, Rng, Tensor};

fn randn(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    standard_normal(&[rows, cols], rng)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

/// `f = Σ (x·W)²`, `g = Σ tanh(x)·x`
fn two_losses(g: &mut Graph, x: NodeId, w: NodeId) -> (NodeId, NodeId) {
    let xw = g.matmul(x, w).unwrap();
    let sq = g.square(xw).unwrap();
    let f = g.sum(sq).unwrap();
    let t = g.tanh(x).unwrap();
    let tx = g.mul(t, x).unwrap();
    let h = g.sum(tx).unwrap();
    (f, h)
}

fn grad_of(x: &Tensor, w: &Tensor, build: impl Fn(&mut Graph, NodeId, NodeId) -> NodeId) -> Tensor {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let wi = g.constant(w.clone());
    let root = build(&mut g, xi, wi);
    g.backward(root).unwrap().get_or_zeros(xi, x)
}

fn small_encoder(seed: u64) -> EncoderParams {
    EncoderParams::init(&LayerSpec::mlp(6, &[8, 8], 2, Activation::Relu), &mut Rng::seed(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(seed: u64, a in -3.0f64..3.0, b in -3.0f64..3.0, m in 1usize..6, k in 1usize..5) {
        let mut rng = Rng::seed(seed);
        let x = randn(m, k, &mut rng);
        let w = randn(k, 3, &mut rng);
        let gf = grad_of(&x, &w, |g, x, w| two_losses(g, x, w).0);
        let gg = grad_of(&x, &w, |g, x, w| two_losses(g, x, w).1);
        let gh = grad_of(&x, &w, |g, x, w| {
            let (f, h) = two_losses(g, x, w);
            let f = g.scale(f, a).unwrap();
            let h = g.scale(h, b).unwrap();
            g.add(f, h).unwrap()
        });
        let expect: Vec<f64> = gf.data().iter().zip(gg.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(close(gh.data(), &expect, 1e-12));
    }

    #[test]
    fn replay_is_bitwise_identical(seed: u64) {
        let run = || {
            let mut rng = Rng::seed(seed);
            let enc = small_encoder(seed ^ 1);
            let x = randn(5, 6, &mut rng);
            let mut g = Graph::new();
            let net = enc.net.bind(&mut g);
            let xi = g.input(x);
            let z = net.forward(&mut g, xi).unwrap();
            let s = g.square(z).unwrap();
            let s = g.sum(s).unwrap();
            let grads = g.backward(s).unwrap();
            let mut bits: Vec<u64> = g.value(s).data().iter().map(|v| v.to_bits()).collect();
            for id in net.param_ids().into_iter().chain([xi]) {
                bits.extend(grads.get(id).unwrap().data().iter().map(|v| v.to_bits()));
            }
            bits
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn encoding_is_deterministic_and_noise_free_at_zero_sigma(seed: u64, rows in 1usize..20) {
        let enc = small_encoder(seed);
        let x = randn(rows, 6, &mut Rng::seed(seed.wrapping_add(1)));
        let u = encode(&enc, &x).unwrap();
        prop_assert_eq!(&u, &encode(&enc, &x).unwrap());
        prop_assert_eq!(&u, &reparameterize(&u, 0.0, &mut Rng::seed(seed)).unwrap());
    }

    #[test]
    fn similarity_vanishes_only_for_equal_clones(
        seed: u64,
        q in 2usize..5,
        variant in prop_oneof![
            Just(SimilarityVariant::AnchoredL2),
            Just(SimilarityVariant::AnchoredL1),
            Just(SimilarityVariant::AllPairsL2),
        ],
        clone in 1usize..5,
        delta in prop_oneof![1e-6f64..1.0, -1.0f64..-1e-6],
    ) {
        let mut rng = Rng::seed(seed);
        let z = randn(4, 3, &mut rng);
        let mut clones = vec![z.clone(); q];
        prop_assert_eq!(similarity_loss(&clones, variant).unwrap(), 0.0);
        let mut data = z.into_data();
        let i = rng.below(data.len());
        data[i] += delta;
        clones[clone % q] = Tensor::matrix(4, 3, data).unwrap();
        prop_assert!(similarity_loss(&clones, variant).unwrap() > 0.0);
    }

    #[test]
    fn mmd_is_symmetric(seed: u64, m in 2usize..40, d in 1usize..5) {
        let mut rng = Rng::seed(seed);
        let z = randn(m, d, &mut rng);
        let v = randn(m, d, &mut rng).map(|x| 2.0 * x + 0.5);
        let kernel = KernelConfig::default().kernel(d).unwrap();
        let a = mmd_squared(&z, &v, &kernel).unwrap();
        let b = mmd_squared(&v, &z, &kernel).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn objective_components_add_up(seed: u64, q in 2usize..5, lambda_f in 0.0f64..20.0, lambda_d in 0.0f64..20.0) {
        let mut rng = Rng::seed(seed);
        let clones: Vec<Tensor> = (0..q).map(|_| randn(6, 2, &mut rng)).collect();
        let prior = randn(6, 2, &mut rng);
        let outputs: Vec<Tensor> = (0..q).map(|_| randn(6, 3, &mut rng)).collect();
        let target = randn(6, 3, &mut rng);
        let kernel = Kernel::gaussian(vec![0.5, 1.0, 2.0]).unwrap();
        let spec = ObjectiveSpec {
            weights: ObjectiveWeights { lambda_f, lambda_d },
            kernel: &kernel,
            mmd_clone_count: q,
            similarity: SimilarityVariant::AnchoredL2,
        };
        let (outs, y) = if lambda_d > 0.0 { (Some(outputs.as_slice()), Some(&target)) } else { (None, None) };
        let b = total_objective(&clones, &prior, outs, y, &spec).unwrap();
        let sum = b.d_s + lambda_f * b.d_f + lambda_d * b.d_d;
        prop_assert!((b.total - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
    }

    #[test]
    fn clones_share_gains_and_batches_replay(seed: u64, world_seed: u64, clones in 1usize..5, batch in 1usize..6) {
        let world = FormantWorld::new(WorldConfig { seed: world_seed, ..WorldConfig::default() }).unwrap();
        let a = sample_batch(&world, clones, batch, &mut Rng::seed(seed), SampleOptions::default()).unwrap();
        let b = sample_batch(&world, clones, batch, &mut Rng::seed(seed), SampleOptions::default()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.psi.data().iter().all(|&p| (0.0..=1.0).contains(&p)));

        // without jitter and with shared excitations the clones only see the gains
        let quiet = FormantWorld::new(WorldConfig { seed: world_seed, gamma_bounds: vec![0.0, 0.0], ..WorldConfig::default() }).unwrap();
        let options = SampleOptions { share_excitation: true, ..SampleOptions::default() };
        let c = sample_batch(&quiet, clones, batch, &mut Rng::seed(seed), options).unwrap();
        for q in 1..clones {
            prop_assert_eq!(c.clone_obs(q), c.clone_obs(0));
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
fn same_distribution_mmd_shrinks_with_sample_size() {
    let kernel = KernelConfig::default().kernel(2).unwrap();
    let mut rng = Rng::seed(5);
    let mut med = |m: usize| {
        median(
            (0..100)
                .map(|_| {
                    let z = randn(m, 2, &mut rng);
                    let v = randn(m, 2, &mut rng);
                    mmd_squared(&z, &v, &kernel).unwrap().abs()
                })
                .collect(),
        )
    };
    let (small, large) = (med(10), med(1000));
    assert!(large < small, "median |MMD²| at M=1000 {large} vs M=10 {small}");
}

#[test]
fn formant_one_jitter_varies_four_times_more() {
    // at zero gain each observation is Σ γ·w·v; recover the coefficients by
    // least squares on the frozen basis and compare their spread per formant
    let world = FormantWorld::new(WorldConfig::default()).unwrap();
    let (np, nl, d) = (world.formants(), world.components(), world.dim());
    let mut basis = nalgebra::DMatrix::zeros(d, np * nl);
    for p in 0..np {
        for l in 0..nl {
            for (k, &v) in world.basis_vector(p, l).iter().enumerate() {
                basis[(k, p * nl + l)] = v;
            }
        }
    }
    let pinv = basis.clone().pseudo_inverse(1e-12).unwrap();
    let reps = 100_000;
    let x = world
        .observe_at(&Tensor::zeros(&[1, np]), reps, &mut Rng::seed(3))
        .unwrap();
    let mut var = vec![0.0; np];
    for r in 0..reps {
        let c = &pinv * nalgebra::DVector::from_column_slice(x.row(r));
        for p in 0..np {
            var[p] += (0..nl).map(|l| c[p * nl + l].powi(2)).sum::<f64>();
        }
    }
    let ratio = var[0] / var[1];
    assert!((ratio / 4.0 - 1.0).abs() < 0.1, "jitter variance ratio {ratio}");
}
