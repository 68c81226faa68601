use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tost_core::coding_rate::oracle_bases;
use tost_core::linalg::Matrix;
use tost_core::model::{
    init_model, layer_norm, load_model, model_forward, save_model, InitMode, ModelParams,
};
use tost_core::tssa::{estimate_membership, tssa_attention};

fn tokens(d: usize, n: usize, seed: u64) -> Matrix {
    Matrix::gaussian(d, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn saved_model_reproduces_forward_pass() {
    let mut model = init_model(6, 2, 3, 10, 3, 5, InitMode::Random).unwrap();
    model.make_causal(Some(12));
    let path = std::env::temp_dir().join(format!("tost-model-{}.bin", std::process::id()));
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(loaded, model);
    let z = tokens(6, 12, 1);
    let a = model_forward(&z, &model, true).unwrap();
    let b = model_forward(&z, &loaded, true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn attention_only_stack_is_residual_compression() {
    let model = init_model(5, 2, 2, 4, 2, 9, InitMode::OracleReady).unwrap();
    let z = tokens(5, 7, 2);
    let (out, _) = model_forward(&z, &model, false).unwrap();
    let mut want = z;
    for block in &model.layers {
        let x = layer_norm(&want, &block.norm1).unwrap();
        want = want.add(&tssa_attention(&x, &block.bank, block.attention.base()).unwrap()).unwrap();
    }
    assert!(out.max_abs_diff(&want) <= 1e-13);
}

#[test]
fn causal_model_is_causal_end_to_end() {
    let mut model: ModelParams = init_model(6, 3, 2, 8, 3, 4, InitMode::Random).unwrap();
    model.make_causal(None);
    let z = tokens(6, 10, 3);
    let (base, _) = model_forward(&z, &model, false).unwrap();
    let mut perturbed = z.clone();
    for j in 6..10 {
        perturbed.set_col(j, &[9.0, -3.0, 0.5, 1.0, 2.0, -7.0]);
    }
    let (out, _) = model_forward(&perturbed, &model, false).unwrap();
    assert_eq!(base.cols_range(0, 6), out.cols_range(0, 6));
}

#[test]
fn recorded_trace_uses_attention_input() {
    let mut model = init_model(4, 2, 2, 3, 1, 6, InitMode::OracleReady).unwrap();
    let z = tokens(4, 9, 4);
    let x = layer_norm(&z, &model.layers[0].norm1).unwrap();
    let pi = estimate_membership(&x, &model.layers[0].bank, model.layers[0].attention.base()).unwrap();
    model.layers[0].bank = oracle_bases(&x, &pi, 2).unwrap();
    let (_, trace) = model_forward(&z, &model, true).unwrap();
    let trace = trace.unwrap();
    assert_eq!(trace.len(), 1);
    assert!(trace[0].compression_var > 0.0 && trace[0].expansion > 0.0);
}
