//! Language-model checks for the `selftest` command.

use lavo::autodiff::Tape;
use lavo::selftest::Check;

use crate::checkpoint::{from_bytes, to_bytes};
use crate::config::{LmConfig, VOCAB_SIZE};
use crate::corpus::synthetic_text;
use crate::model::LmModel;
use crate::Result;

fn tiny(seed: u64) -> LmConfig {
    LmConfig { d_model: 16, heads: 2, num_bases: 4, window: 4, ctx_len: 16, batch: 2, seed, ..LmConfig::default() }
}

pub fn run(seed: u64) -> Result<Vec<Check>> {
    let config = tiny(seed);
    let model = LmModel::init(&config)?;
    let text = synthetic_text(64, seed);
    let ids: Vec<usize> = text.iter().map(|&b| b as usize).collect();

    let mut tape = Tape::new();
    let loss = model.loss_tape(&mut tape, &[ids[..32].to_vec()], &[ids[1..33].to_vec()])?;
    let init_gap = (tape.value(loss).data()[0] - (VOCAB_SIZE as f64).ln()).abs();

    let bytes = to_bytes(&model)?;
    let round_trip = if to_bytes(&from_bytes(&bytes)?)? == bytes { 0.0 } else { 1.0 };

    // decoding and the batch forward see the same model after a perturbation
    let mut trained = model.clone();
    for id in trained.store().ids().collect::<Vec<_>>() {
        let store = trained.store_mut();
        if store.is_trainable(id) {
            store.value_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * ((i % 7) as f64 - 3.0));
        }
    }
    let mut tape = Tape::new();
    let logits = trained.logits_tape(&mut tape, &[ids[..40].to_vec()])?;
    let full = tape.value(logits).clone();
    let mut dec = trained.decoder()?;
    let mut decode_gap = 0.0f64;
    for (t, &id) in ids[..40].iter().enumerate() {
        let row = dec.step(id)?;
        decode_gap = row.iter().zip(full.row(t)).fold(decode_gap, |m, (a, b)| m.max((a - b).abs()));
    }

    Ok(vec![
        check("initial loss is ln(257)", init_gap, 1e-12),
        check("checkpoint round trip is bitwise", round_trip, 0.0),
        check("decoded logits equal batch logits", decode_gap, 1e-8),
    ])
}

fn check(name: &'static str, measured: f64, tolerance: f64) -> Check {
    Check { name, passed: measured <= tolerance, measured, tolerance }
}
