mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;

use alure::config::RunConfig;
use alure::encoder::{
    decode_checkpoint, encode_checkpoint, evaluation_loss, forward_user, train, training_examples, ModelConfig,
    ModelParams,
};
use alure::event_model::{synth_generate, SynthConfig, UserHistory};
use alure::graph::normalize;
use alure::tensor::l2_norm;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn unit(params: &ModelParams, cfg: &ModelConfig, h: &UserHistory) -> Vec<f64> {
    let e = forward_user(&params.encoder, cfg, h).unwrap();
    let mut mean = vec![0.0; e.vectors.cols];
    for r in 0..e.vectors.rows {
        for (m, v) in mean.iter_mut().zip(e.vectors.row(r)) {
            *m += v;
        }
    }
    normalize(&mean).unwrap()
}

/// Mean cosine within ground-truth clusters minus mean cosine across them.
fn cluster_margin(params: &ModelParams, cfg: &ModelConfig, histories: &[UserHistory], truth: &BTreeMap<u64, usize>) -> f64 {
    let units: Vec<(usize, Vec<f64>)> = histories.iter().take(200).map(|h| (truth[&h.user_id], unit(params, cfg, h))).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0, 0.0, 0);
    for (i, (ci, a)) in units.iter().enumerate() {
        for (cj, b) in &units[i + 1..] {
            let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            if ci == cj {
                intra += s;
                n_intra += 1;
            } else {
                inter += s;
                n_inter += 1;
            }
        }
    }
    intra / n_intra as f64 - inter / n_inter as f64
}

#[test]
fn training_separates_interest_clusters() {
    let mut cfg = RunConfig::default().with_seed(7);
    cfg.synth = SynthConfig {
        n_users: 500,
        n_clusters: 5,
        ..cfg.synth
    };
    let data = synth_generate(&cfg.synth).unwrap();
    let examples = training_examples(&data.histories, cfg.model.n_sources);
    let mut params = ModelParams::init(&cfg.model);
    let before_loss = evaluation_loss(&params, &cfg.model, &examples).unwrap();
    let before_margin = cluster_margin(&params, &cfg.model, &data.histories, &data.ground_truth);
    let losses = train(&mut params, &cfg.model, &examples, 200).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    let after_loss = evaluation_loss(&params, &cfg.model, &examples).unwrap();
    let after_margin = cluster_margin(&params, &cfg.model, &data.histories, &data.ground_truth);
    println!("loss {before_loss:.4} → {after_loss:.4}; cosine margin {before_margin:.4} → {after_margin:.4}");
    assert!(after_loss < before_loss);
    assert!(after_margin > before_margin);
    assert!(after_margin > 0.1);
}

#[test]
fn training_is_reproducible() {
    let mut cfg = RunConfig::default().with_seed(3);
    cfg.synth.n_users = 120;
    let data = synth_generate(&cfg.synth).unwrap();
    let examples = training_examples(&data.histories, cfg.model.n_sources);
    let run = || {
        let mut p = ModelParams::init(&cfg.model);
        let losses = train(&mut p, &cfg.model, &examples, 5).unwrap();
        (encode_checkpoint(&p, &cfg.model).unwrap(), losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg);
    let bytes = encode_checkpoint(&params, &cfg).unwrap();
    assert!(bytes.starts_with(b"ALURECKPT"));
    let (p2, c2) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(c2, cfg);
    for ((_, a), (_, b)) in params.tensors().iter().zip(p2.tensors()) {
        let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(encode_checkpoint(&p2, &c2).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.alckpt");
    alure::encoder::save_checkpoint(&params, &cfg, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(alure::encoder::load_checkpoint(&path).unwrap().0, params);
}

/// A checked-in toy checkpoint and the embeddings it produced when recorded.
/// Set `ALURE_BLESS=1` to regenerate both after an intentional format or
/// numerics change.
#[test]
fn golden_checkpoint_still_decodes_to_the_same_embeddings() {
    let ckpt_path = data_dir().join("golden.alckpt");
    let out_path = data_dir().join("golden_embeddings.json");
    let synth = SynthConfig {
        n_users: 8,
        seed: 5,
        ..SynthConfig::default()
    };
    let histories = synth_generate(&synth).unwrap().histories;
    if std::env::var_os("ALURE_BLESS").is_some() {
        let mut cfg = ModelConfig::toy();
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.cfee = alure::cfee::CfeeConfig::new(8, 2);
        cfg.n_accounts = 16;
        let params = ModelParams::init(&cfg);
        std::fs::create_dir_all(data_dir()).unwrap();
        std::fs::write(&ckpt_path, encode_checkpoint(&params, &cfg).unwrap()).unwrap();
        let recorded: BTreeMap<u64, Vec<f64>> = histories
            .iter()
            .map(|h| (h.user_id, forward_user(&params.encoder, &cfg, h).unwrap().vectors.data))
            .collect();
        std::fs::write(&out_path, serde_json::to_string_pretty(&recorded).unwrap()).unwrap();
    }
    let (params, cfg) = decode_checkpoint(&std::fs::read(&ckpt_path).unwrap()).unwrap();
    let recorded: BTreeMap<u64, Vec<f64>> =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(recorded.len(), histories.len());
    for h in &histories {
        let got = forward_user(&params.encoder, &cfg, h).unwrap().vectors.data;
        let want = &recorded[&h.user_id];
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "user {}: {g} vs {w}", h.user_id);
        }
        assert!(l2_norm(&got) > 0.0);
    }
}
