use fftat::config::{Datasets, RunConfig};
use fftat::data::{gen_synthetic_pair, gen_synthetic_split, load_folder, write_folder, BatchStream, Split};
use fftat::model::{FftatModel, ModelConfig};
use fftat::numerics::{Precision, Tape, Tensor};
use fftat::params::ParamStore;
use fftat::trainer::{evaluate, evaluate_target, train_run, train_step, TrainConfig, TrainState};
use fftat::transferability::TransferabilityGraph;
use fftat::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig {
        precision: Precision::F64,
        ..RunConfig::default()
    };
    cfg.model = ModelConfig {
        image_side: 16,
        patch: 4,
        dim: 16,
        heads: 2,
        layers: 2,
        classes: 3,
    };
    cfg.train.steps = 12;
    cfg.train.warmup_steps = 3;
    cfg.train.eval_every = 6;
    cfg.train.batch_size = 4;
    cfg.dataset.n_per_class = 6;
    cfg.dataset.test_per_class = 3;
    cfg
}

fn small_data(cfg: &RunConfig) -> Datasets {
    cfg.dataset.load(&cfg.model).unwrap()
}

#[test]
fn resume_equals_uninterrupted_run() {
    let cfg = small_config();
    let data = small_data(&cfg);
    let a = tempfile::tempdir().unwrap();
    let model = FftatModel::<f64>::init(cfg.model, 0).unwrap();
    let (full, _) = train_run(TrainState::new(model), &cfg, &data, a.path()).unwrap();

    let b = tempfile::tempdir().unwrap();
    let (half, _) = TrainState::<f64>::load(a.path().join("ckpt_6.bin")).unwrap();
    assert_eq!(half.step, 6);
    assert_eq!(half.graph.iteration_built, Some(5));
    let (resumed, _) = train_run(half, &cfg, &data, b.path()).unwrap();

    assert_eq!(resumed.model.params.tensors(), full.model.params.tensors());
    assert_eq!(resumed.velocity.tensors(), full.velocity.tensors());
    assert_eq!(resumed.graph, full.graph);
    let tail: Vec<String> = std::fs::read_to_string(a.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .skip(6)
        .map(String::from)
        .collect();
    let resumed_lines: Vec<String> = std::fs::read_to_string(b.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(tail, resumed_lines);
}

#[test]
fn zero_lr_keeps_params_but_refreshes_graph() {
    let cfg = small_config();
    let data = small_data(&cfg);
    let tc = TrainConfig {
        peak_lr: 0.0,
        ..cfg.train.clone()
    };
    let mut state = TrainState::new(FftatModel::<f64>::init(cfg.model, 3).unwrap());
    assert_eq!(state.graph, TransferabilityGraph::unweighted(16));
    let before = state.model.params.clone();
    let mut stream = BatchStream::new(&data.source, &data.target, 4, 0).unwrap();
    for step in 0..3 {
        train_step(&mut state, &stream.batch_at(step), &tc).unwrap();
        assert_eq!(state.graph.iteration_built, Some(step));
    }
    assert_eq!(state.model.params.tensors(), before.tensors());
    assert_ne!(state.graph.matrix, Tensor::ones([16, 16]));
}

#[test]
fn stale_graph_is_rejected() {
    let cfg = small_config();
    let data = small_data(&cfg);
    let mut state = TrainState::new(FftatModel::<f64>::init(cfg.model, 3).unwrap());
    let mut stream = BatchStream::new(&data.source, &data.target, 4, 0).unwrap();
    train_step(&mut state, &stream.batch_at(0), &cfg.train).unwrap();
    state.graph.iteration_built = None;
    assert!(train_step(&mut state, &stream.batch_at(1), &cfg.train).is_err());
}

#[test]
fn non_finite_input_aborts_with_numerical_error() {
    let cfg = small_config();
    let data = small_data(&cfg);
    let mut state = TrainState::new(FftatModel::<f64>::init(cfg.model, 1).unwrap());
    let mut stream = BatchStream::new(&data.source, &data.target, 4, 0).unwrap();
    let mut batch = stream.batch_at(0);
    batch.source_images[5] = f32::NAN;
    let err = train_step(&mut state, &batch, &cfg.train).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    assert!(matches!(err, Error::NonFinite(_)));
}

#[test]
fn untrained_models_score_near_chance() {
    let cfg = RunConfig::default();
    let (_, target) = gen_synthetic_split(0, 25, 4, 32, Split::Test).unwrap();
    let target = target.into_eval();
    let graph = TransferabilityGraph::unweighted(16);
    let mean: f64 = (0..10)
        .map(|seed| {
            let m = FftatModel::<f32>::init(cfg.model, seed).unwrap();
            evaluate_target(&m, &graph, &target, true).unwrap()
        })
        .sum::<f64>()
        / 10.0;
    assert!((mean - 0.25).abs() <= 0.05, "mean accuracy {mean}");
}

#[test]
fn memorized_set_scores_one() {
    let cfg = small_config();
    let data = small_data(&cfg);
    let model = FftatModel::<f64>::init(cfg.model, 7).unwrap();
    let graph = TransferabilityGraph::unweighted(16);
    let mut set = data.source_eval.clone();
    set.labels = model.predict(&set.images, &graph, true).unwrap();
    assert_eq!(evaluate(&model, &graph, &set, true).unwrap(), 1.0);
    set.labels = set.labels.iter().map(|l| (l + 1) % 3).collect();
    assert_eq!(evaluate(&model, &graph, &set, true).unwrap(), 0.0);
}

#[test]
fn folder_round_trip() {
    let (source, _) = gen_synthetic_pair(4, 3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_folder(&source, dir.path()).unwrap();
    let a = load_folder(dir.path(), 32).unwrap();
    let b = load_folder(dir.path(), 32).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a.histogram(), vec![3, 3]);
    assert_eq!(a.images, b.images);
    assert_eq!(a.labels, b.labels);
    let len = source.image_len();
    let mut max_err = 0.0f32;
    for (k, &label) in a.labels.iter().enumerate() {
        let nth = a.labels[..k].iter().filter(|&&l| l == label).count();
        let i = (0..source.len())
            .filter(|&i| source.labels[i] == label)
            .nth(nth)
            .unwrap();
        for (x, y) in a.images[k * len..(k + 1) * len].iter().zip(source.image(i)) {
            max_err = max_err.max((x - y).abs());
        }
    }
    assert!(max_err <= 0.5 / 255.0 + 1e-6, "8-bit quantization error {max_err}");
}

/// Plain `3·32·32 → 64 → K` MLP trained on 500 source images per class,
/// evaluated on the held-out source and target splits.
fn mlp_gap(seed: u64) -> (f64, f64) {
    let (source, target) = gen_synthetic_split(seed, 500, 4, 32, Split::Train).unwrap();
    let (source_test, target_test) = gen_synthetic_split(seed, 50, 4, 32, Split::Test).unwrap();
    let dim = source.image_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: [usize; 2]| {
        let bound = 1.0 / (shape[0] as f32).sqrt();
        Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
    };
    let mut store = ParamStore::<f32>::new();
    store.insert("w1", uniform([dim, 64]));
    store.insert("b1", Tensor::zeros([64]));
    store.insert("w2", uniform([64, 4]));
    store.insert("b2", Tensor::zeros([4]));

    let forward = |tape: &mut Tape<f32>, store: &ParamStore<f32>, images: &[f32], train: bool| {
        let bound = store.bind(tape, train);
        let v = bound.vars().to_vec();
        let n = images.len() / dim;
        let x = tape.constant(Tensor::new([n, dim], images.iter().map(|&p| p - 0.5).collect()).unwrap());
        let h = tape.matmul(x, v[0]).unwrap();
        let h = tape.add_broadcast(h, v[1]).unwrap();
        let h = tape.gelu(h);
        let o = tape.matmul(h, v[2]).unwrap();
        (tape.add_broadcast(o, v[3]).unwrap(), v)
    };
    let accuracy = |store: &ParamStore<f32>, images: &[f32], labels: &[usize]| {
        let mut tape = Tape::new();
        let (logits, _) = forward(&mut tape, store, images, false);
        let correct = tape
            .value(logits)
            .rows()
            .zip(labels)
            .filter(|(row, &l)| fftat::model::argmax(row) == l)
            .count();
        correct as f64 / labels.len() as f64
    };

    let target = target.unlabeled();
    let mut stream = BatchStream::new(&source, &target, 32, seed).unwrap();
    let mut velocity = store.zeros_like();
    for step in 0..1500 {
        let batch = stream.batch_at(step);
        let mut tape = Tape::new();
        let (logits, vars) = forward(&mut tape, &store, &batch.source_images, true);
        let loss = tape.cross_entropy(logits, &batch.source_labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        for ((p, v), &var) in store.tensors_mut().iter_mut().zip(velocity.tensors_mut()).zip(&vars) {
            let g = grads.wrt(var);
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = 0.9 * *vi + gi;
                *pi -= 0.02 * *vi;
            }
        }
    }
    (
        accuracy(&store, &source_test.images, &source_test.labels),
        accuracy(&store, &target_test.images, &target_test.labels),
    )
}

#[test]
fn generator_has_a_domain_gap() {
    for seed in 0..2 {
        let (src, tgt) = mlp_gap(seed);
        println!("seed {seed}: MLP source-test acc {src:.4}, target-test acc {tgt:.4}");
        assert!(src >= 0.95, "source accuracy {src}");
        assert!(tgt <= 0.75, "target accuracy {tgt}");
    }
}
