//! Trainer-level behaviour: lazy adapter switch, degenerate patterns, mask
//! diagnostics, report determinism and checkpoints.

use std::sync::Arc;

use nmslope::nm::format;
use nmslope::train::report::{decode_dense, report_csv, write_checkpoint, Manifest};
use nmslope::train::{train, Dataset, TrainConfig, Trainer};
use nmslope::DenseMatrix;

fn cfg(text: &str) -> TrainConfig {
    TrainConfig::parse(text).unwrap()
}

fn data64(c: &TrainConfig) -> Arc<Dataset<f64>> {
    Arc::new(Dataset::for_config(c).unwrap())
}

const MLP: &str = "model.kind = mlp\nmodel.layers = 3\nmodel.input_dim = 8\nmodel.hidden = 16\nmodel.output_dim = 4\nsparsity.dense_head = false\ntrain.batch = 16\ndata.samples = 256\noptimizer.lr = 0.01\n";
const LM: &str = "model.kind = lm\nmodel.layers = 2\nmodel.hidden = 16\nmodel.heads = 2\nmodel.context = 8\nsparsity.modules = mlp+attention\ntrain.batch = 4\n";

fn max_abs_diff(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn adapter_switch_is_loss_continuous() {
    for base in [MLP, LM] {
        let c = cfg(&format!("{base}train.iterations = 100\nadapter.rank_ratio = 0.125\nadapter.lazy_fraction = 0.05\ntrain.dtype = f64\n"));
        let start = c.adapter_start().unwrap();
        assert_eq!(start, 95);
        let mut t = Trainer::new(c.clone(), data64(&c)).unwrap();
        t.run_until(start).unwrap();
        let batch = t.dataset().sample_train(4, c.model.context, &mut nmslope::rng::rng_from_seed(9)).unwrap();
        let before = t.model().predict(&batch).unwrap();
        assert!(t.activate_adapters().unwrap() > 0);
        let after = t.model().predict(&batch).unwrap();
        assert!(max_abs_diff(&before, &after) <= 1e-6);
        let r = t.run().unwrap();
        assert!(r.adapters_used);
        assert!(r.adapter_cosine[start].is_some() && r.adapter_cosine[start - 1].is_none());
        assert!((r.adapter_cosine[99].unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn full_pattern_reproduces_dense_training() {
    for base in [MLP, LM] {
        let mut sparse = cfg(&format!("{base}train.iterations = 100\ntrain.dtype = f64\nsparsity.pattern = 4:4\n"));
        let mut dense = sparse.clone();
        dense.sparsity.first_half = None;
        dense.sparsity.second_half = None;
        for c in [&mut sparse, &mut dense] {
            c.optimizer.weight_decay = 0.01;
        }
        let a = train(&sparse, data64(&sparse)).unwrap();
        let b = train(&dense, data64(&dense)).unwrap();
        for (x, y) in a.losses.iter().zip(&b.losses) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn static_masks_never_change() {
    for mask in ["static-random", "static-magnitude"] {
        let c = cfg(&format!("{MLP}train.iterations = 50\nsparsity.mask = {mask}\n"));
        let r = train(&c, Arc::new(Dataset::<f32>::for_config(&c).unwrap())).unwrap();
        assert!(r.mask_diff.iter().all(|&d| d == 0.0));
        assert!(r.mask_stasis);
    }
}

fn window_mean(s: &[f64], from: usize, len: usize) -> f64 {
    s[from..from + len].iter().sum::<f64>() / len as f64
}

#[test]
fn dynamic_mask_churn_settles() {
    let c = cfg(&format!("{MLP}train.iterations = 400\nsparsity.mask = dynamic\nsparsity.decay = 0.0002\n"));
    let r = train(&c, Arc::new(Dataset::<f32>::for_config(&c).unwrap())).unwrap();
    let w = r.mask_diff.len() / 10;
    let start = window_mean(&r.mask_diff, 0, w);
    let end = window_mean(&r.mask_diff, r.mask_diff.len() - w, w);
    assert!(start > 0.0);
    assert!(end < start, "{end} >= {start}");
    assert_eq!(*r.mask_diff.last().unwrap(), 0.0);
}

#[test]
fn csv_is_reproducible() {
    let c = cfg(&format!("{LM}train.iterations = 30\nadapter.rank_ratio = 0.125\nadapter.lazy_fraction = 0.2\n"));
    let run = || report_csv(&train(&c, Arc::new(Dataset::<f32>::for_config(&c).unwrap())).unwrap());
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.starts_with("iteration,loss,lr,adapter_cosine,mask_diff\n"));
    assert!(a.trim_end().ends_with(&c.hash()));
    assert_eq!(a.lines().count(), 32);
}

#[test]
fn checkpoint_round_trip() {
    let c = cfg(&format!("{LM}train.iterations = 20\nadapter.rank_ratio = 0.125\nadapter.lazy_fraction = 0.5\n"));
    let mut t = Trainer::<f32>::new(c.clone(), Arc::new(Dataset::for_config(&c).unwrap())).unwrap();
    t.run_until(20).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_checkpoint(t.model(), &c.hash(), 20, dir.path()).unwrap();
    let json: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(json, manifest);
    assert!(manifest.tensors.iter().any(|e| e.name.ends_with("adapter_up")));
    let linears = t.model().linears();
    let up0 = linears[4].as_sparse().unwrap();
    let entry = manifest.tensors.iter().find(|e| e.name == "block0.up.weight").unwrap();
    assert_eq!(entry.format, "NMC1");
    let bytes = std::fs::read(dir.path().join(&entry.file)).unwrap();
    assert_eq!(&format::decode::<f32>(&bytes).unwrap(), up0.w_fwd());
    let tok = manifest.tensors.iter().find(|e| e.name == "tok").unwrap();
    let table = decode_dense::<f32>(&std::fs::read(dir.path().join(&tok.file)).unwrap()).unwrap();
    assert_eq!((table.rows(), table.cols()), (tok.rows, tok.cols));
}
