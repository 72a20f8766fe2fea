//! Central-difference gradient checks at 64-bit precision.

use crate::blocks::GraphLog;
use crate::error::Result;
use crate::model::{Hooks, VigUnet};
use crate::tensor::{Mode, ParamId, ParamStore, RngState, Tape, Tensor, Var};
use crate::training::mixed_loss_on;

/// Perturbation used for every central difference.
pub const STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Reduces `out` to a scalar through BCE against soft targets drawn from
/// `seed`. Smooth, and its gradient reaches every element.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = RngState::new(seed);
    let target = Tensor::from_fn(tape.shape(out).to_vec(), |_| rng.uniform());
    tape.bce_with_logits(out, &target)
}

/// Largest relative error between tape gradients of every element of
/// `inputs` and central differences of `build`.
pub fn check_inputs(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut vals = inputs.to_vec();
        for (e, &a) in g.iter().enumerate() {
            let orig = vals[k].data()[e];
            vals[k].data_mut()[e] = orig + STEP;
            let plus = eval(&vals)?;
            vals[k].data_mut()[e] = orig - STEP;
            let minus = eval(&vals)?;
            vals[k].data_mut()[e] = orig;
            worst = worst.max(rel_err(a, (plus - minus) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

/// Largest relative error of d(loss)/d(param) at the `picks` (parameter,
/// element) pairs. `forward` must build the same loss on any tape.
pub fn check_params(
    store: &mut ParamStore<f64>,
    picks: &[(ParamId, usize)],
    mut forward: impl FnMut(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    store.zero_grad();
    grads.accumulate_into(store)?;
    let analytic: Vec<f64> = picks
        .iter()
        .map(|&(id, e)| store.get(id).grad().map_or(0.0, |g| g[e]))
        .collect();
    let mut worst: f64 = 0.0;
    for (&(id, e), &a) in picks.iter().zip(&analytic) {
        let orig = store.get(id).data()[e];
        let mut at = |v: f64, store: &mut ParamStore<f64>| -> Result<f64> {
            store.get_mut(id).data_mut()[e] = v;
            let mut tape = Tape::no_grad();
            let l = forward(&mut tape, store)?;
            tape.value(l).item()
        };
        let plus = at(orig + STEP, store)?;
        let minus = at(orig - STEP, store)?;
        store.get_mut(id).data_mut()[e] = orig;
        worst = worst.max(rel_err(a, (plus - minus) / (2.0 * STEP)));
    }
    store.zero_grad();
    Ok(worst)
}

/// Checks the mixed loss of the whole network in train mode against
/// `per_tensor` randomly chosen elements of every learnable tensor.
///
/// The analytic pass records its KNN graphs and max-relative selections and
/// every perturbed pass replays them. Neighbour search is piecewise constant
/// and the max is piecewise linear, so with thousands of nodes a 1e-5
/// perturbation would otherwise cross jumps and kinks and measure those
/// instead of the derivative.
pub fn model_gradient_error(
    model: &mut VigUnet<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = RngState::new(seed);
    let picks: Vec<(ParamId, usize)> = {
        let store = model.store();
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        ids.into_iter()
            .flat_map(|id| {
                let n = store.get(id).numel();
                (0..per_tensor).map(|_| (id, rng.below(n))).collect::<Vec<_>>()
            })
            .collect()
    };
    let mut log = GraphLog::recording();
    let mut recorded = false;
    // the closure needs the model's forward and a separate store to perturb
    let mut store = model.store().clone();
    let err = check_params(&mut store, &picks, |tape, store| {
        *model.store_mut() = store.clone();
        let x = tape.constant(input.clone());
        if recorded {
            log = std::mem::take(&mut log).into_replay();
        }
        let hooks = Hooks {
            trace: None,
            graphs: Some(&mut log),
        };
        let logits = model.forward_on(tape, x, Mode::Train, &mut RngState::new(0), hooks)?;
        recorded = true;
        Ok(mixed_loss_on(tape, logits, target)?.0)
    })?;
    *model.store_mut() = store;
    Ok(err)
}
