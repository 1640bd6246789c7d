//! Acceptance suite: property checks plus desk-scale trend reproduction.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see one
//! PASS/FAIL line per criterion. The trend and transfer criteria drive full
//! HPO comparisons on a generated 50-configuration hub and dominate the
//! runtime.

use std::path::PathBuf;
use std::sync::{Arc, LazyLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fms_core::acquisition::expected_improvement;
use fms_core::benchhub::{evaluate_accuracy, generate_hub, BenchmarkTable, HubSpec, TargetArch};
use fms_core::checkpoint::{CheckpointedWeights, LayerWeights};
use fms_core::hpo::{pretrain_surrogate, run, MethodConfig, MethodId};
use fms_core::metrics::kendall_tau;
use fms_core::report::{mean_regret_at, taus_at_snapshot};
use fms_core::space::LearningCurve;
use fms_core::surrogate::{
    feature_mean_gradients, state_param_tensors_mut, ExtractorConfig, PreparedWeights, RowInput,
    SurrogateState, WeightEncoder,
};
use fms_core::tape::{EdgeSet, Tape, Var};
use fms_core::tensor::Tensor;
use fms_core::trace::HpoTrace;
use fms_core::weightgraph::{
    build_graph, gmn_batch_forward, gmn_encode, permute_hidden, GmnParams,
    GraphBatch,
};

// Tolerances and scales, pinned here.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_MIN_INSTANCES: usize = 100;
const PERM_REL_TOL: f64 = 1e-9;
const PERM_MIN_PAIRS: usize = 50;
const NLML_IDENTITY_TOL: f64 = 1e-12;
const EI_TRIPLES: usize = 20;
const EI_MC_SAMPLES: usize = 1_000_000;
const TAU_INSTANCES: usize = 100;
const REPLAY_TOL: f64 = 1e-6;
const TREND_N_CFG: usize = 50;
const TREND_B_MAX: usize = 20;
const TREND_BUDGET: u64 = 200;
const TREND_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TAU_NON_INFERIORITY_MARGIN: f64 = 0.05;
const TRANSFER_BUDGET: u64 = 60;
const TRANSFER_TICK: usize = 15; // 25% of the transfer budget

fn tmp_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

// ── Shared fixtures ──────────────────────────────────────────────────────

static TREND_HUB: LazyLock<BenchmarkTable> = LazyLock::new(|| {
    let spec = HubSpec {
        n_cfg: TREND_N_CFG,
        b_max: TREND_B_MAX,
        task_seed: 1,
        ..HubSpec::desk_default()
    };
    generate_hub(&spec, 101, &tmp_root().join("hub_trend")).expect("trend hub")
});

struct TrendRuns {
    traces: Vec<HpoTrace>,
}

impl TrendRuns {
    fn for_method(&self, method: MethodId) -> Vec<&HpoTrace> {
        self.traces
            .iter()
            .filter(|t| t.header.method == method.as_str())
            .collect()
    }

    fn mean_final_regret(&self, method: MethodId) -> f64 {
        let traces = self.for_method(method);
        mean_regret_at(&traces, TREND_BUDGET as usize)
    }

    fn mean_final_tau(&self, method: MethodId) -> Option<f64> {
        let by_method = taus_at_snapshot(&self.traces, TREND_BUDGET);
        by_method.get(method.as_str()).map(|taus| {
            assert_eq!(taus.len(), TREND_SEEDS.len(), "τ undefined for some seed");
            taus.iter().sum::<f64>() / taus.len() as f64
        })
    }
}

static TREND_RUNS: LazyLock<TrendRuns> = LazyLock::new(|| {
    let bench = &*TREND_HUB;
    let methods = [MethodId::FmsGmn, MethodId::Dyhpo, MethodId::Random];
    let pairs: Vec<(MethodId, u64)> = methods
        .iter()
        .flat_map(|&m| TREND_SEEDS.iter().map(move |&s| (m, s)))
        .collect();
    let traces = fms_core::exec::try_map_indexed(pairs.len(), |i| {
        let (method, seed) = pairs[i];
        run(&MethodConfig::new(method, TREND_BUDGET), bench, seed)
    })
    .expect("trend runs");
    for t in &traces {
        t.validate().expect("trace invariants");
    }
    TrendRuns { traces }
});

// ── Gradient suite ───────────────────────────────────────────────────────

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// One gradient-suite instance: builds a scalar loss, compares the backward
/// gradients of every listed parameter against central finite differences at
/// a few coordinates.
fn fd_check_instance<F>(build: F, params: &[Tensor], coords_per_tensor: usize)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let register = |tape: &mut Tape, values: &[Tensor]| -> Vec<Var> {
        values.iter().map(|t| tape.param(t.clone())).collect()
    };
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars = register(&mut tape, values);
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars = register(&mut tape, params);
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("backward");

    let h = 1e-5;
    for (ti, (&var, tensor)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.get_or_zeros(var, tensor.shape());
        for c in 0..coords_per_tensor.min(tensor.numel()) {
            let idx = (c * 2654435761) % tensor.numel();
            let mut plus = params.to_vec();
            plus[ti].data_mut()[idx] += h;
            let mut minus = params.to_vec();
            minus[ti].data_mut()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[idx];
            assert!(
                rel_err(fd, a) < GRAD_REL_TOL,
                "tensor {ti} coord {idx}: fd={fd} analytic={a}"
            );
        }
    }
}

fn random_checkpoint(rng: &mut ChaCha8Rng, arch: &TargetArch) -> CheckpointedWeights {
    let desc = arch.descriptor();
    let layers = desc
        .layers
        .iter()
        .map(|spec| LayerWeights {
            weights: (0..spec.weight_len())
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
            bias: (0..spec.fan_out)
                .map(|_| rng.random_range(-0.5f32..0.5))
                .collect(),
        })
        .collect();
    CheckpointedWeights { arch: desc, layers }
}

fn random_gmn_row(
    rng: &mut ChaCha8Rng,
    spec: &HubSpec,
    config: &ExtractorConfig,
) -> RowInput {
    let hp = spec.space.sample(rng);
    let budget = rng.random_range(1..=config.b_max);
    let curve = LearningCurve((0..budget - 1).map(|_| rng.random_range(0.0..1.0)).collect());
    let arch = &spec.roster[hp.model_index];
    let ckpt = random_checkpoint(rng, arch);
    RowInput::build(
        config,
        &spec.space,
        &hp,
        &curve,
        budget,
        Some(Arc::new(PreparedWeights::from_checkpoint(&ckpt).unwrap())),
    )
    .unwrap()
}

#[test]
fn criterion_gradient_suite() {
    let started = Instant::now();
    let mut instances = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(1000);

    // Dense chain: matmul, affine, leaky rectifier, elementwise mul,
    // exp/log, axis reduction.
    for _ in 0..40 {
        let m = rng.random_range(2..4usize);
        let k = rng.random_range(2..4usize);
        let n = rng.random_range(2..4usize);
        let params = vec![
            Tensor::matrix(m, k, (0..m * k).map(|_| rng.random_range(0.2..1.2)).collect()),
            Tensor::matrix(k, n, (0..k * n).map(|_| rng.random_range(-0.9..0.9)).collect()),
            Tensor::vector((0..n).map(|_| rng.random_range(-0.4..0.4)).collect()),
        ];
        fd_check_instance(
            |tape, v| {
                let mm = tape.matmul(v[0], v[1]).unwrap();
                let aff = tape.affine(mm, v[2]).unwrap();
                let act = tape.leaky_relu(aff, 0.01);
                let sq = tape.mul(act, act).unwrap();
                let e = tape.exp(sq);
                let l = tape.log(e);
                let s = tape.mean_axis(l, 1).unwrap();
                tape.sum_all(s)
            },
            &params,
            3,
        );
        instances += 1;
    }

    // Pairwise squared distances, scaling, concatenation.
    for _ in 0..15 {
        let m = rng.random_range(2..4usize);
        let d = rng.random_range(2..4usize);
        let params = vec![
            Tensor::matrix(m, d, (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()),
            Tensor::matrix(m, d, (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()),
        ];
        fd_check_instance(
            |tape, v| {
                let d2 = tape.sqdist(v[0], v[1]).unwrap();
                let sc = tape.scale(d2, -0.3);
                let e = tape.exp(sc);
                let cat = tape.concat(&[d2, e], 1).unwrap();
                tape.mean_all(cat)
            },
            &params,
            3,
        );
        instances += 1;
    }

    // 1-D convolution with channel bias and mean pooling.
    for _ in 0..15 {
        let len = rng.random_range(6..9usize);
        let params = vec![
            Tensor::new(vec![1, 2, len], (0..2 * len).map(|_| rng.random_range(-1.0..1.0)).collect()),
            Tensor::new(vec![2, 2, 3], (0..12).map(|_| rng.random_range(-0.8..0.8)).collect()),
            Tensor::vector((0..2).map(|_| rng.random_range(0.05..0.3)).collect()),
        ];
        fd_check_instance(
            |tape, v| {
                let c = tape.conv1d(v[0], v[1]).unwrap();
                let c = tape.channel_bias(c, v[2]).unwrap();
                let c = tape.leaky_relu(c, 0.01);
                let pooled = tape.mean_axis(c, 2).unwrap();
                tape.sum_all(pooled)
            },
            &params,
            3,
        );
        instances += 1;
    }

    // Fused dual matmul, edge gather, segment mean, row scatter, scalar ops.
    let edges = Arc::new(EdgeSet {
        src: vec![0, 1, 2, 0],
        dst: vec![2, 2, 3, 3],
        weight: vec![0.7, -0.4, 1.1, 0.3],
    });
    let segments: Arc<Vec<(usize, usize)>> = Arc::new(vec![(0, 2), (2, 4)]);
    let mapping: Arc<Vec<Option<usize>>> = Arc::new(vec![Some(1), None, Some(0)]);
    for _ in 0..15 {
        let params = vec![
            Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()),
            Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-0.8..0.8)).collect()),
            Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-0.8..0.8)).collect()),
            Tensor::vector((0..3).map(|_| rng.random_range(-0.5..0.5)).collect()),
            Tensor::vector(vec![rng.random_range(0.1..0.9)]),
        ];
        let edges = Arc::clone(&edges);
        let segments = Arc::clone(&segments);
        let mapping = Arc::clone(&mapping);
        fd_check_instance(
            move |tape, v| {
                let msg = tape.edge_gather(v[0], Arc::clone(&edges)).unwrap();
                let mixed = tape.dual_matmul(v[0], v[1], msg, v[2]).unwrap();
                let act = tape.leaky_relu(mixed, 0.01);
                let pooled = tape.segment_mean(act, Arc::clone(&segments)).unwrap();
                let scattered = tape.row_scatter(pooled, v[3], Arc::clone(&mapping)).unwrap();
                let scaled = tape.mul_scalar(scattered, v[4]).unwrap();
                let d2 = tape.sqdist(scaled, scaled).unwrap();
                let noisy = tape.add_diag(d2, v[4]).unwrap();
                tape.mean_all(noisy)
            },
            &params,
            3,
        );
        instances += 1;
    }

    // gp_nlml through the squared-exponential kernel map: gradients reach
    // the feature rows, the observations and all three kernel scalars.
    for _ in 0..10 {
        let n = rng.random_range(3..5usize);
        let params = vec![
            Tensor::matrix(n, 2, (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect()),
            Tensor::vector((0..n).map(|_| rng.random_range(-0.8..0.8)).collect()),
            Tensor::scalar(rng.random_range(-0.3..0.3)),
            Tensor::scalar(rng.random_range(-0.3..0.3)),
            Tensor::scalar(rng.random_range(-2.0..-1.0)),
        ];
        fd_check_instance(
            |tape, v| {
                let d2 = tape.sqdist(v[0], v[0]).unwrap();
                let inv_ell2 = tape.scale(v[2], -2.0);
                let inv_ell2 = tape.exp(inv_ell2);
                let scaled = tape.mul_scalar(d2, inv_ell2).unwrap();
                let scaled = tape.scale(scaled, -0.5);
                let k = tape.exp(scaled);
                let sf2 = tape.scale(v[3], 2.0);
                let sf2 = tape.exp(sf2);
                let k = tape.mul_scalar(k, sf2).unwrap();
                let sn2 = tape.scale(v[4], 2.0);
                let sn2 = tape.exp(sn2);
                let kn = tape.add_diag(k, sn2).unwrap();
                tape.gp_nlml(kn, v[1]).unwrap()
            },
            &params,
            3,
        );
        instances += 1;
    }

    // gmn_encode gradients w.r.t. the metanetwork parameters.
    let spec = HubSpec::desk_default();
    for i in 0..10u64 {
        let mut prng = ChaCha8Rng::seed_from_u64(2000 + i);
        let arch = &spec.roster[(i as usize) % spec.roster.len()];
        let ckpt = random_checkpoint(&mut prng, arch);
        let graph = build_graph(&ckpt).unwrap();
        let batch = GraphBatch::from_graphs([&graph]).unwrap();
        let mut gmn = GmnParams::init(&mut prng);
        for t in gmn.tensors_mut() {
            for v in t.data_mut() {
                *v += prng.random_range(0.003..0.015);
            }
        }
        let flat: Vec<Tensor> = gmn.tensors().into_iter().cloned().collect();
        fd_check_instance(
            |tape, v| {
                let tensors: Vec<Tensor> =
                    v.iter().map(|&var| tape.value(var).clone()).collect();
                let params = GmnParams::from_tensors(&tensors);
                // Re-register through the standard entry point is not
                // possible with existing vars; wire the forward manually.
                let vars = fms_core::weightgraph::GmnVars {
                    embed: v[0],
                    layers: vec![
                        (v[1], v[2], v[3]),
                        (v[4], v[5], v[6]),
                        (v[7], v[8], v[9]),
                    ],
                };
                let _ = params;
                let xi = gmn_batch_forward(tape, &vars, &batch).unwrap();
                tape.mean_all(xi)
            },
            &flat,
            2,
        );
        instances += 1;
    }

    // extract_features: end-to-end feature-map gradients over all branches.
    for i in 0..10u64 {
        let mut prng = ChaCha8Rng::seed_from_u64(3000 + i);
        let config = ExtractorConfig::new(spec.space.encoded_dim(true), 8, true, WeightEncoder::Gmn);
        let mut state = SurrogateState::init(config.clone(), 3000 + i);
        // Zero-padded curves put conv pre-activations exactly at the leaky
        // rectifier kink with zero biases; nudge off it.
        for t in state_param_tensors_mut(&mut state) {
            for v in t.data_mut() {
                *v += prng.random_range(0.003..0.012);
            }
        }
        let rows: Vec<RowInput> =
            (0..3).map(|_| random_gmn_row(&mut prng, &spec, &config)).collect();

        let eval = |s: &SurrogateState| -> f64 {
            let z = s.features_batch(&rows).unwrap();
            z.data().iter().sum::<f64>() / z.numel() as f64
        };
        let grads = feature_mean_gradients(&state, &rows).unwrap();
        let n_tensors = grads.len();
        let h = 1e-5;
        // Spread checks across tensors (kernel scalars carry no gradient
        // for a pure feature readout; start from the extractor tensors).
        for ti in (3..n_tensors).step_by(3) {
            let idx = (ti * 7919) % grads[ti].numel();
            let mut plus = state.clone();
            state_param_tensors_mut(&mut plus)[ti].data_mut()[idx] += h;
            let mut minus = state.clone();
            state_param_tensors_mut(&mut minus)[ti].data_mut()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = grads[ti].data()[idx];
            assert!(
                rel_err(fd, a) < GRAD_REL_TOL,
                "extract_features {i} tensor {ti} coord {idx}: fd={fd} analytic={a}"
            );
        }
        instances += 1;
    }

    assert!(instances >= GRAD_MIN_INSTANCES, "only {instances} instances");
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "gradient suite took {elapsed:?}, budget is 2 minutes"
    );
    println!("PASS: gradient suite ({instances} instances, rel tol {GRAD_REL_TOL}, {elapsed:.2?})");
}

// ── Permutation invariance ───────────────────────────────────────────────

#[test]
fn criterion_permutation_invariance_suite() {
    let spec = HubSpec::desk_default();
    let space = &spec.space;
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let params = GmnParams::init(&mut rng);

    let mut pairs = 0usize;
    while pairs < PERM_MIN_PAIRS {
        let arch = &spec.roster[pairs % spec.roster.len()];
        let ckpt = random_checkpoint(&mut rng, arch);
        let boundary = rng.random_range(0..ckpt.arch.layers.len() - 1);
        let width = ckpt.arch.layers[boundary].fan_out;
        let mut perm: Vec<usize> = (0..width).collect();
        for i in (1..width).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let permuted = permute_hidden(&ckpt, boundary, &perm).unwrap();

        let a = gmn_encode(&build_graph(&ckpt).unwrap(), &params).unwrap();
        let b = gmn_encode(&build_graph(&permuted).unwrap(), &params).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(rel_err(*x, *y) < PERM_REL_TOL, "ξ mismatch: {x} vs {y}");
        }
        pairs += 1;
    }

    // End to end: swapping one stored checkpoint for a hidden-permuted
    // equivalent leaves predictions unchanged.
    let config = ExtractorConfig::new(space.encoded_dim(true), 8, true, WeightEncoder::Gmn);
    let state = SurrogateState::init(config.clone(), 4001);
    for trial in 0..5usize {
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        let mut swap = None;
        for r in 0..4usize {
            let hp = space.sample(&mut rng);
            let budget = rng.random_range(1..=8usize);
            let curve =
                LearningCurve((0..budget - 1).map(|_| rng.random_range(0.0..1.0)).collect());
            let arch = &spec.roster[hp.model_index];
            let ckpt = random_checkpoint(&mut rng, arch);
            if r == trial % 4 {
                swap = Some((r, hp.clone(), curve.clone(), budget, ckpt.clone()));
            }
            rows.push(
                RowInput::build(
                    &config,
                    space,
                    &hp,
                    &curve,
                    budget,
                    Some(Arc::new(PreparedWeights::from_checkpoint(&ckpt).unwrap())),
                )
                .unwrap(),
            );
            ys.push(rng.random_range(0.0..1.0));
        }
        let query = rows[0].clone();
        let (mu1, var1) = state.predict(&rows, &ys, &query).unwrap();

        let (r, hp, curve, budget, ckpt) = swap.unwrap();
        let width = ckpt.arch.layers[0].fan_out;
        let mut perm: Vec<usize> = (0..width).collect();
        perm.reverse();
        let permuted = permute_hidden(&ckpt, 0, &perm).unwrap();
        rows[r] = RowInput::build(
            &config,
            space,
            &hp,
            &curve,
            budget,
            Some(Arc::new(PreparedWeights::from_checkpoint(&permuted).unwrap())),
        )
        .unwrap();
        let (mu2, var2) = state.predict(&rows, &ys, &query).unwrap();
        assert!(rel_err(mu1, mu2) < PERM_REL_TOL, "mean moved: {mu1} vs {mu2}");
        assert!(rel_err(var1, var2) < PERM_REL_TOL, "variance moved");
    }

    println!(
        "PASS: permutation invariance ({pairs} encode pairs + 5 end-to-end predicts, tol {PERM_REL_TOL})"
    );
}

// ── GP algebra ───────────────────────────────────────────────────────────

#[test]
fn criterion_gp_algebra_suite() {
    let spec = HubSpec::desk_default();
    let space = &spec.space;
    let config = ExtractorConfig::new(space.encoded_dim(true), 8, true, WeightEncoder::None);
    let state = SurrogateState::init(config.clone(), 5000);
    let mut rng = ChaCha8Rng::seed_from_u64(5001);
    let random_row = |rng: &mut ChaCha8Rng| {
        let hp = space.sample(rng);
        let budget = rng.random_range(1..=8usize);
        let curve = LearningCurve((0..budget - 1).map(|_| rng.random_range(0.0..1.0)).collect());
        RowInput::build(&config, space, &hp, &curve, budget, None).unwrap()
    };

    // Prior recovery on an empty dataset.
    let q = random_row(&mut rng);
    let (mu, var) = state.predict(&[], &[], &q).unwrap();
    assert_eq!(mu, 0.0);
    assert!((var - state.kernel.sf2()).abs() < 1e-12);

    // Interpolation limit as the noise vanishes.
    let mut quiet = state.clone();
    quiet.kernel.log_sn.data_mut()[0] = (1e-6f64).ln();
    let rows: Vec<RowInput> = (0..5).map(|_| random_row(&mut rng)).collect();
    let ys = [0.2, 0.9, 0.4, 0.6, 0.8];
    let (mu, var) = quiet.predict(&rows, &ys, &rows[1]).unwrap();
    assert!((mu - 0.9).abs() < 1e-6, "interpolation mean {mu}");
    assert!(var < 1e-6, "interpolation variance {var}");

    // Variance dominance and dataset-order invariance on random datasets.
    for _ in 0..10 {
        let n = rng.random_range(2..7usize);
        let rows: Vec<RowInput> = (0..n).map(|_| random_row(&mut rng)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let q = random_row(&mut rng);
        let (mu1, var1) = state.predict(&rows, &ys, &q).unwrap();
        assert!(var1 <= state.kernel.sf2() + 1e-9, "variance dominance");

        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let rows_p: Vec<RowInput> = order.iter().map(|&i| rows[i].clone()).collect();
        let ys_p: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
        let (mu2, var2) = state.predict(&rows_p, &ys_p, &q).unwrap();
        assert!(
            rel_err(mu1, mu2) < 1e-9 && rel_err(var1, var2) < 1e-9,
            "order invariance"
        );
    }

    // NLML identities, exact to 1e-12.
    let mut tape = Tape::new();
    let k = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let y = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
    let v = tape.gp_nlml(k, y).unwrap();
    assert!(
        (tape.value(v).item() - (2.0 * std::f64::consts::PI).ln()).abs() < NLML_IDENTITY_TOL
    );
    let mut tape = Tape::new();
    let k = tape.leaf(Tensor::matrix(1, 1, vec![1.0]));
    let y = tape.leaf(Tensor::vector(vec![2.0]));
    let v = tape.gp_nlml(k, y).unwrap();
    let expected = 2.0 + 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((tape.value(v).item() - expected).abs() < NLML_IDENTITY_TOL);

    println!("PASS: GP algebra (prior, interpolation, dominance, order, NLML identities)");
}

// ── Acquisition oracle ───────────────────────────────────────────────────

#[test]
fn criterion_ei_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6000);
    for trial in 0..EI_TRIPLES {
        let mu: f64 = rng.random_range(-0.5..1.5);
        let sigma: f64 = rng.random_range(0.01..0.6);
        let y_star: f64 = rng.random_range(-0.5..1.5);
        let closed = expected_improvement(mu, sigma, y_star);

        let mut mc_rng = ChaCha8Rng::seed_from_u64(6100 + trial as u64);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..EI_MC_SAMPLES {
            let z: f64 = StandardNormal.sample(&mut mc_rng);
            let v = (mu + sigma * z - y_star).max(0.0);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / EI_MC_SAMPLES as f64;
        let var = (sum_sq / EI_MC_SAMPLES as f64 - mean * mean).max(0.0);
        let se = (var / EI_MC_SAMPLES as f64).sqrt();
        assert!(
            (closed - mean).abs() <= 3.0 * se.max(1e-12),
            "triple {trial} (mu={mu}, sigma={sigma}, y*={y_star}): closed={closed} mc={mean} se={se}"
        );
    }
    println!(
        "PASS: EI closed form vs {EI_MC_SAMPLES}-sample Monte Carlo on {EI_TRIPLES} triples (3 standard errors)"
    );
}

// ── Kendall τ oracle ─────────────────────────────────────────────────────

/// Independent pair-enumeration oracle for τ-b, written from the definition.
fn tau_b_pair_oracle(x: &[i64], y: &[i64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let sx = (x[i] - x[j]).signum();
            let sy = (y[i] - y[j]).signum();
            if sx == 0 {
                tx += 1;
            }
            if sy == 0 {
                ty += 1;
            }
            if sx != 0 && sy != 0 {
                if sx == sy {
                    c += 1;
                } else {
                    d += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some((c - d) as f64 / denom)
}

#[test]
fn criterion_kendall_tau_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7000);
    for trial in 0..TAU_INSTANCES {
        let n = rng.random_range(2..40usize);
        // Small integer range to force plenty of ties.
        let x: Vec<i64> = (0..n).map(|_| rng.random_range(0..8i64)).collect();
        let y: Vec<i64> = (0..n).map(|_| rng.random_range(0..8i64)).collect();
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let ours = kendall_tau(&xf, &yf);
        let oracle = tau_b_pair_oracle(&x, &y);
        match (ours, oracle) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}")
            }
            (a, b) => assert_eq!(a.is_some(), b.is_some(), "trial {trial}: {a:?} vs {b:?}"),
        }
    }
    println!("PASS: Kendall τ-b matches pair enumeration on {TAU_INSTANCES} tied instances");
}

// ── Benchmark consistency ────────────────────────────────────────────────

#[test]
fn criterion_benchmark_consistency() {
    let bench = &*TREND_HUB;
    let task = bench.task();
    let mut rng = ChaCha8Rng::seed_from_u64(8000);
    for check in 0..5 {
        let config = rng.random_range(0..bench.n_configs());
        let epoch = rng.random_range(1..=bench.b_max());
        let ckpt = bench.raw_checkpoint(config, epoch).unwrap();
        let val = task.val_for(bench.arch_for_config(config));
        let replay = evaluate_accuracy(&ckpt, val);
        let cached = bench.accuracy(config, epoch).unwrap();
        assert!(
            (replay - cached).abs() < REPLAY_TOL,
            "check {check}: config {config} epoch {epoch}: replay {replay} vs cached {cached}"
        );
    }
    println!("PASS: checkpoint replay reproduces cached curves (5 spot checks, tol {REPLAY_TOL})");
}

// ── Trend reproduction ───────────────────────────────────────────────────

#[test]
fn criterion_trend_reproduction() {
    let runs = &*TREND_RUNS;

    let fms_regret = runs.mean_final_regret(MethodId::FmsGmn);
    let random_regret = runs.mean_final_regret(MethodId::Random);
    println!(
        "trend: mean final regret fms-gmn={fms_regret:.4} dyhpo={:.4} random={random_regret:.4}",
        runs.mean_final_regret(MethodId::Dyhpo)
    );
    assert!(
        fms_regret <= random_regret,
        "(a) FAIL: fms-gmn mean final regret {fms_regret} > random {random_regret}"
    );
    println!("PASS: trend (a) fms-gmn mean final regret <= random search");

    let fms_tau = runs.mean_final_tau(MethodId::FmsGmn).expect("fms τ defined");
    let dyhpo_tau = runs.mean_final_tau(MethodId::Dyhpo).expect("dyhpo τ defined");
    let random_tau = runs.mean_final_tau(MethodId::Random).expect("random τ defined");
    println!(
        "trend: mean final τ fms-gmn={fms_tau:.4} dyhpo={dyhpo_tau:.4} random={random_tau:.4}"
    );
    assert!(
        fms_tau >= dyhpo_tau - TAU_NON_INFERIORITY_MARGIN,
        "(b) FAIL: fms-gmn τ {fms_tau} < dyhpo τ {dyhpo_tau} - {TAU_NON_INFERIORITY_MARGIN}"
    );
    println!(
        "PASS: trend (b) fms-gmn τ within {TAU_NON_INFERIORITY_MARGIN} of dyhpo (non-inferiority)"
    );

    for method in [MethodId::FmsGmn, MethodId::Dyhpo] {
        let tau = runs.mean_final_tau(method).unwrap();
        assert!(
            tau > random_tau,
            "(c) FAIL: {method} mean τ {tau} does not beat random {random_tau}"
        );
    }
    println!("PASS: trend (c) every surrogate method beats random search in mean final τ");
}

// ── Transfer trend ───────────────────────────────────────────────────────

#[test]
fn criterion_transfer_trend() {
    // Two other hubs (different tasks and sampling seeds) provide the
    // pretraining histories.
    let spec_b = HubSpec {
        n_cfg: 25,
        b_max: TREND_B_MAX,
        task_seed: 2,
        ..HubSpec::desk_default()
    };
    let spec_c = HubSpec {
        n_cfg: 25,
        b_max: TREND_B_MAX,
        task_seed: 3,
        ..HubSpec::desk_default()
    };
    let hub_b = generate_hub(&spec_b, 202, &tmp_root().join("hub_transfer_b")).unwrap();
    let hub_c = generate_hub(&spec_c, 303, &tmp_root().join("hub_transfer_c")).unwrap();
    let state = pretrain_surrogate(MethodId::FmsGmn, &[&hub_b, &hub_c], 30, 1000, 777).unwrap();
    let state_path = tmp_root().join("warm_start.fmsr");
    state.save(&state_path).unwrap();

    let bench = &*TREND_HUB;
    let arms: Vec<(bool, u64)> = TREND_SEEDS
        .iter()
        .flat_map(|&s| [(false, s), (true, s)])
        .collect();
    let traces = fms_core::exec::try_map_indexed(arms.len(), |i| {
        let (warm, seed) = arms[i];
        let mut cfg = MethodConfig::new(MethodId::FmsGmn, TRANSFER_BUDGET);
        if warm {
            cfg.warm_start = Some(state_path.clone());
        }
        run(&cfg, bench, seed)
    })
    .unwrap();

    let cold: Vec<&HpoTrace> = traces
        .iter()
        .zip(&arms)
        .filter_map(|(t, &(warm, _))| (!warm).then_some(t))
        .collect();
    let warm: Vec<&HpoTrace> = traces
        .iter()
        .zip(&arms)
        .filter_map(|(t, &(warm, _))| warm.then_some(t))
        .collect();
    let cold_mean = mean_regret_at(&cold, TRANSFER_TICK);
    let warm_mean = mean_regret_at(&warm, TRANSFER_TICK);
    println!(
        "transfer: mean regret at {TRANSFER_TICK}/{TRANSFER_BUDGET} epochs: warm={warm_mean:.4} cold={cold_mean:.4}"
    );
    assert!(
        warm_mean <= cold_mean,
        "transfer FAIL: warm-start regret {warm_mean} > cold-start {cold_mean}"
    );
    println!("PASS: transfer warm start no worse than cold start at 25% budget");
}

// ── Determinism ──────────────────────────────────────────────────────────

#[test]
fn criterion_determinism() {
    let bench = &*TREND_HUB;
    // A weight-free run and a checkpoint-conditioned run, both repeated.
    for (method, budget) in [(MethodId::Dyhpo, 30u64), (MethodId::FmsGmn, 6u64)] {
        let cfg = MethodConfig::new(method, budget);
        let a = run(&cfg, bench, 99).unwrap().to_jsonl().unwrap();
        let b = run(&cfg, bench, 99).unwrap().to_jsonl().unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes(), "{method} trace not byte-identical");
    }
    println!("PASS: repeated runs produce byte-identical traces");
}
