use super::*;
use crate::autodiff::{ParamStore, Tensor};
use crate::model::{decode_checkpoint, encode_checkpoint};
use crate::synth::{generate, SynthConfig};
use crate::tabular::{read_csv, Dataset, SplitFractions};

fn scalar_store(v: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("theta", Tensor::scalar(v)).unwrap();
    s
}

fn grads_of(store: &ParamStore, g: f64) -> crate::autodiff::Grads {
    let mut grads = crate::autodiff::Grads::zeros_like(store);
    let id = store.id("theta").unwrap();
    grads.get_mut(id).data_mut()[0] = g;
    grads
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = scalar_store(0.5);
    let mut state = AdamState::new(&store);
    let g = grads_of(&store, 1.0);
    adam_step(&mut store, &g, &mut state, 0.01, 0.0).unwrap();
    let theta = store.by_name("theta").unwrap().item();
    assert!((theta - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    assert_eq!(state.step_count(), 1);
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let mut store = scalar_store(0.7);
    let mut state = AdamState::new(&store);
    for step in 1..=50 {
        let g = grads_of(&store, 0.0);
        adam_step(&mut store, &g, &mut state, 0.1, 0.0).unwrap();
        assert_eq!(state.step_count(), step);
    }
    assert_eq!(store.by_name("theta").unwrap().item(), 0.7);
}

#[test]
fn l2_decays_positive_weights() {
    let mut store = scalar_store(0.7);
    let mut state = AdamState::new(&store);
    let mut prev = 0.7;
    for _ in 0..10 {
        let g = grads_of(&store, 0.0);
        adam_step(&mut store, &g, &mut state, 0.01, 1e-3).unwrap();
        let now = store.by_name("theta").unwrap().item();
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn nan_gradient_aborts_untouched() {
    let mut store = scalar_store(0.7);
    store
        .insert("other", Tensor::from_vec(1, 2, vec![1.0, 2.0]))
        .unwrap();
    let mut state = AdamState::new(&store);
    let mut grads = crate::autodiff::Grads::zeros_like(&store);
    grads.get_mut(store.id("other").unwrap()).data_mut()[1] = f64::NAN;
    let before = store.clone();
    assert_eq!(
        adam_step(&mut store, &grads, &mut state, 0.1, 0.0),
        Err(TrainError::NanGradient("other".into()))
    );
    assert_eq!(store, before);
    assert_eq!(state.step_count(), 0);
}

fn tiny_dataset(seed: u64) -> (Dataset, InvertedIndex) {
    let sc = SynthConfig {
        rows: 300,
        fields: 4,
        vocab: 6,
        seed,
        ..Default::default()
    };
    let csv = generate(&sc).unwrap().to_csv();
    let raw = read_csv(csv.as_bytes(), &sc.schema()).unwrap();
    let ds = Dataset::from_raw(&raw, SplitFractions::default()).unwrap();
    let index = InvertedIndex::build(ds.table.rows_of(&ds.split.retrieval)).unwrap();
    (ds, index)
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        embed_dim: 8,
        layers: 2,
        mlp_hidden: vec![16],
        k: 5,
        batch_size: 32,
        lr: 5e-3,
        max_epochs: 4,
        ..Default::default()
    }
}

#[test]
fn retrieval_cache_is_transparent() {
    let (ds, index) = tiny_dataset(1);
    for scheme in [RetrievalScheme::Relevance, RetrievalScheme::Random] {
        let settings = RetrievalSettings {
            k: 5,
            scheme,
            seed: 3,
        };
        let cache = retrieval_cache_build(&ds.split.train, &ds.table, &index, &settings);
        assert_eq!(cache.len(), ds.split.train.len());
        let again = retrieval_cache_build(&ds.split.train, &ds.table, &index, &settings);
        assert_eq!(cache, again);
        for &id in &ds.split.train {
            let fresh = index.retrieve(ds.table.row(id), 5, scheme, 3);
            assert_eq!(cache[&id], fresh);
        }
    }
}

#[test]
fn validation_is_latest_tenth() {
    let (ds, _) = tiny_dataset(1);
    let (fit, val) = validation_split(&ds.table, &ds.split.train, 0.1);
    assert_eq!(val.len(), 12);
    assert_eq!(fit.len() + val.len(), ds.split.train.len());
    let last_fit = fit
        .iter()
        .map(|&i| ds.table.row(i).timestamp)
        .max()
        .unwrap();
    assert!(val.iter().all(|&i| ds.table.row(i).timestamp > last_fit));
}

#[test]
fn training_is_deterministic() {
    let (ds, index) = tiny_dataset(2);
    let cfg = tiny_config();
    let a = train(&ds.table, &ds.split, &index, &cfg, &mut |_| {}).unwrap();
    let b = train(&ds.table, &ds.split, &index, &cfg, &mut |_| {}).unwrap();
    let losses = |o: &TrainOutcome| {
        o.records
            .iter()
            .map(|r| (r.epoch, r.mean_loss, r.val_auc))
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(
        encode_checkpoint(&a.model, &cfg.to_toml()),
        encode_checkpoint(&b.model, &cfg.to_toml())
    );
    assert!(a.records.iter().all(|r| r.mean_loss.is_finite()));
}

#[test]
fn patience_zero_stops_one_epoch_past_best() {
    let (ds, index) = tiny_dataset(4);
    let cfg = TrainConfig {
        patience: 0,
        max_epochs: 30,
        lr: 0.05,
        ..tiny_config()
    };
    let mut seen = 0;
    let out = train(&ds.table, &ds.split, &index, &cfg, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, out.records.len());
    assert!(out.records.len() < 30, "never plateaued");
    assert_eq!(out.records.len(), out.best_epoch + 1);
}

#[test]
fn checkpoint_reload_reproduces_validation_auc() {
    let (ds, index) = tiny_dataset(5);
    let cfg = tiny_config();
    let out = train(&ds.table, &ds.split, &index, &cfg, &mut |_| {}).unwrap();
    let bytes = encode_checkpoint(&out.model, &cfg.to_toml());
    let ck = decode_checkpoint(&bytes, None).unwrap();
    assert_eq!(toml::from_str::<TrainConfig>(&ck.metadata).unwrap(), cfg);
    let (_, val) = validation_split(&ds.table, &ds.split.train, cfg.val_fraction);
    let rows: Vec<&Row> = ds.table.rows_of(&val).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let settings = cfg.retrieval_settings();
    let reloaded = auc(
        &score_rows(&ck.model, &ds.table, &index, &rows, &settings).unwrap(),
        &labels,
    )
    .unwrap();
    assert!((reloaded - out.best_val_auc).abs() < 1e-12);
}

#[test]
fn one_small_step_lowers_first_batch_loss() {
    let (ds, index) = tiny_dataset(6);
    let settings = RetrievalSettings {
        k: 5,
        scheme: RetrievalScheme::Relevance,
        seed: 0,
    };
    let ids = &ds.split.train[..32];
    let graphs = graphs_for(ids, &ds.table, &index, &settings).unwrap();
    let batch = batch_graphs(&graphs).unwrap();
    let y: Vec<f64> = ids.iter().map(|&i| ds.table.row(i).label as f64).collect();
    let mut decreased = 0;
    for seed in 0..20 {
        let cfg = TrainConfig {
            seed,
            ..tiny_config()
        };
        let mut model = PetModel::new(cfg.model_config(ds.table.vocab.sizes()), seed).unwrap();
        let mut adam = AdamState::new(model.store());
        let (before, grads) = model.loss_and_grads(&batch, &y).unwrap();
        adam_step(model.store_mut(), &grads, &mut adam, 1e-5, cfg.l2).unwrap();
        let (after, _) = model.loss_and_grads(&batch, &y).unwrap();
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 18, "{decreased}/20");
}

#[test]
fn invalid_configs_rejected() {
    let (ds, index) = tiny_dataset(1);
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..tiny_config()
        },
        TrainConfig {
            lr: 0.0,
            ..tiny_config()
        },
        TrainConfig {
            val_fraction: 1.0,
            ..tiny_config()
        },
    ] {
        assert!(matches!(
            train(&ds.table, &ds.split, &index, &cfg, &mut |_| {}),
            Err(TrainError::Config(_))
        ));
    }
}

#[test]
fn record_line_format() {
    let r = EpochRecord {
        epoch: 3,
        mean_loss: 0.5,
        val_auc: 0.75,
        train_auc: None,
        elapsed_seconds: 1.23456,
    };
    assert_eq!(
        r.to_line(),
        "epoch=3 mean_loss=0.5 val_auc=0.75 elapsed_seconds=1.235"
    );
}
