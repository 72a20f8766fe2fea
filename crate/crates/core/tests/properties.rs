//! Randomized identities: metrics, losses, residual pass-through and
//! checkpoint persistence.

use proptest::prelude::*;
use vig_unet::blocks::{Ffn, ForwardCtx, Grapher};
use vig_unet::checkpoint::{save_checkpoint, Checkpoint};
use vig_unet::tensor::{ParamKind, ParamStore, Tape};
use vig_unet::training::metrics::{dice, iou};
use vig_unet::training::{bce_loss, dice_loss, mixed_loss};
use vig_unet::{Mode, ModelConfig, RngState, Tensor, VigUnet};

fn random_mask(rng: &mut RngState, n: usize, p: f64) -> Vec<u8> {
    (0..n).map(|_| rng.bernoulli(p) as u8).collect()
}

#[test]
fn dice_is_a_function_of_iou() {
    let mut rng = RngState::new(11);
    for _ in 0..1000 {
        let n = 1 + rng.below(200);
        // mix dense, sparse and all-zero masks
        let (pa, pb) = (rng.uniform() * rng.uniform(), rng.uniform());
        let a = random_mask(&mut rng, n, pa);
        let b = random_mask(&mut rng, n, pb);
        let j = iou(&a, &b).unwrap();
        let d = dice(&a, &b).unwrap();
        assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12, "iou {j} dice {d}");
        assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&d));
    }
}

/// Direct f64 formulas, independent of the tape.
fn loss_oracle(z: &[f64], y: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let bce = z
        .iter()
        .zip(y)
        .map(|(&z, &y)| z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln())
        .sum::<f64>()
        / n;
    let p: Vec<f64> = z.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
    let inter: f64 = p.iter().zip(y).map(|(p, y)| p * y).sum();
    let dice = 1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + y.iter().sum::<f64>() + 1.0);
    (bce, dice)
}

proptest! {
    #[test]
    fn mixed_loss_recomposes(seed in 0u64..100_000, n in 1usize..300, scale in 0.1f64..20.0) {
        let mut rng = RngState::new(seed);
        let z = Tensor::from_fn(vec![1, 1, n], |_| rng.uniform_range(-scale, scale));
        let y = Tensor::from_fn(vec![1, 1, n], |_| rng.bernoulli(0.4) as u8 as f64);
        let (bce, dl) = (bce_loss(&z, &y).unwrap(), dice_loss(&z, &y).unwrap());
        let total = mixed_loss(&z, &y).unwrap();
        prop_assert!((total - (0.5 * bce + dl)).abs() < 1e-12);
        let (ob, od) = loss_oracle(z.data(), y.data());
        prop_assert!((bce - ob).abs() < 1e-10 * ob.max(1.0));
        prop_assert!((dl - od).abs() < 1e-10);
        prop_assert!(bce >= 0.0 && (0.0..=1.0).contains(&dl));
    }

    /// With a zero output projection a block is the identity on any input.
    #[test]
    fn zeroed_projections_give_identity(seed in 0u64..10_000, b in 1usize..3, hw in 2usize..6) {
        let mut rng = RngState::new(seed);
        let mut store = ParamStore::<f64>::new();
        let g = Grapher::new(&mut store, "g", 8, 1 + rng.below(9), 2, 1, 0.0, &mut rng).unwrap();
        let f = Ffn::new(&mut store, "f", 8, 4, 0.0, &mut rng).unwrap();
        for id in [g.fc_out.conv.weight, g.fc_out.conv.bias, f.fc2.conv.weight, f.fc2.conv.bias] {
            let zeros = Tensor::zeros(store.get(id).shape().to_vec());
            store.set_values(id, zeros).unwrap();
        }
        let x = Tensor::from_fn(vec![b, 8, hw, hw], |_| rng.uniform_range(-3.0, 3.0));
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let mut fwd_rng = RngState::new(seed + 1);
            let mut ctx = ForwardCtx { tape: &mut tape, store: &mut store, mode, rng: &mut fwd_rng, graphs: None };
            let y = g.forward(&mut ctx, v).unwrap();
            let y = f.forward(&mut ctx, y).unwrap();
            prop_assert_eq!(tape.value(y), &x);
        }
    }
}

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::tiny();
    c.input_height = 32;
    c.input_width = 32;
    c
}

#[test]
fn parameter_count_matches_checkpoint_entries() {
    let model = VigUnet::<f32>::new(small_config(), &mut RngState::new(3)).unwrap();
    let ck = Checkpoint::from_model(&model);
    let learnable: usize = ck
        .entries
        .iter()
        .filter(|e| e.kind == ParamKind::Learnable)
        .map(|e| e.tensor.numel())
        .sum();
    assert_eq!(model.count_parameters(), learnable);
    let table: usize = model.module_table().iter().map(|r| r.params).sum();
    assert_eq!(table, learnable);
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let mut model = VigUnet::<f32>::new(small_config(), &mut RngState::new(4)).unwrap();
    // move the running statistics away from their initial values
    let x = Tensor::from_fn(vec![2, 3, 32, 32], |i| (i % 17) as f32 / 17.0);
    model.predict(&x, Mode::Train, &mut RngState::new(0)).unwrap();
    save_checkpoint(&model, &a).unwrap();
    let mut restored = Checkpoint::load(&a).unwrap().to_model::<f32>().unwrap();
    save_checkpoint(&restored, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut rng = RngState::new(0);
    let before = model.predict(&x, Mode::Eval, &mut rng).unwrap();
    let after = restored.predict(&x, Mode::Eval, &mut rng).unwrap();
    assert_eq!(before, after);
}
