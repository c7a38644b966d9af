use rand::seq::index::sample;

use super::autodiff::{Backend, ParamStore, Tape, Var};
use super::las::LasModel;
use super::NeuralError;
use crate::corpus::FeatureSequence;
use crate::seed::rng_for;
use crate::units::UnitId;

const STEP: f64 = 1e-5;

/// Largest relative gap between reverse-mode gradients and central
/// differences (step 1e-5) over `count` randomly chosen scalars.
/// A gap within the rounding error of the difference itself,
/// `ε·max(|f(x+h)|, |f(x−h)|)/h`, counts as zero: near-zero gradients
/// cannot be resolved any finer at this step.
pub fn finite_difference_check(
    store: &ParamStore,
    loss: impl Fn(&mut Tape, &ParamStore) -> Var,
    count: usize,
    seed: u64,
) -> f64 {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    let grads = tape.backward(l).0;
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let v = loss(&mut t, s);
        t.value(&v).get(0, 0)
    };
    // flat index over (param, entry)
    let sizes: Vec<usize> = grads.iter().map(|(_, g)| g.data().len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = rng_for(seed, "grad-check");
    let picks = sample(&mut rng, total, count.min(total));
    let mut worst: f64 = 0.0;
    let mut perturbed = store.clone();
    for flat in picks.iter() {
        let (mut p, mut k) = (0, flat);
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        let (id, g) = &grads[p];
        let orig = store.get(*id).data()[k];
        perturbed.get_mut(*id).data_mut()[k] = orig + STEP;
        let up = eval(&perturbed);
        perturbed.get_mut(*id).data_mut()[k] = orig - STEP;
        let down = eval(&perturbed);
        perturbed.get_mut(*id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = g.data()[k];
        let gap = (numeric - analytic).abs();
        if gap <= f64::EPSILON * up.abs().max(down.abs()) / STEP {
            continue;
        }
        worst = worst.max(gap / numeric.abs().max(analytic.abs()));
    }
    worst
}

/// Gradient check of the teacher-forced sequence NLL of a LAS model.
pub fn grad_check(
    model: &LasModel,
    features: &FeatureSequence,
    units: &[UnitId],
    count: usize,
    seed: u64,
) -> Result<f64, NeuralError> {
    model.check_features(features)?;
    model.check_units(units)?;
    Ok(finite_difference_check(
        model.params(),
        |tape, store| model.sequence_nll(tape, store, features, units),
        count,
        seed,
    ))
}

impl LasModel {
    /// −log P(units, EOS | features) on any backend.
    pub(crate) fn sequence_nll<B: Backend>(
        &self,
        be: &mut B,
        store: &ParamStore,
        features: &FeatureSequence,
        units: &[UnitId],
    ) -> B::V {
        use super::layers::{pad_targets, Memory};
        use std::sync::Arc;
        let x = be.constant(self.batch_input(&[features]));
        let steps = self.encoder_steps(features.num_frames());
        let values = self.encoder.forward(be, store, &x, steps, 1);
        let memory = Memory::new(be, store, &self.decoder.attention, values, steps);
        let target: Vec<usize> = units
            .iter()
            .map(|&u| u as usize)
            .chain([crate::units::EOS as usize])
            .collect();
        let (inputs, flat, mask) = pad_targets(&[target], crate::units::SOS as usize);
        let groups: Arc<[usize]> = Arc::from(vec![0]);
        let init = self.decoder.zero_state(be, 1);
        let (feats, _) = self.decoder.teacher_force(be, store, &memory, &groups, init, &inputs);
        let logits = self.decoder.output.apply(be, store, &feats);
        be.cross_entropy(&logits, &flat, &mask)
    }
}
