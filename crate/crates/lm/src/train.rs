use lavo::autodiff::{Adam, Tape};

use crate::config::LmConfig;
use crate::corpus::CorpusStream;
use crate::model::LmModel;
use crate::{LmError, Result};

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LmModel,
    /// Loss of every step, measured before that step's update.
    pub losses: Vec<f64>,
}

/// Adam on next-byte cross entropy for `config.steps` steps. `on_step`
/// sees the step index and its loss.
pub fn train(config: &LmConfig, corpus: &mut CorpusStream, mut on_step: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.len() < 10 * config.ctx_len {
        return Err(LmError::Data(format!(
            "corpus has {} bytes, need at least 10 x ctx_len = {}",
            corpus.len(),
            10 * config.ctx_len
        )));
    }
    let mut model = LmModel::init(config)?;
    let mut adam = Adam::with_lr(config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (inputs, targets) = corpus.sample_batch(config.batch, config.ctx_len)?;
        let mut tape = Tape::new();
        let loss = model.loss_tape(&mut tape, &inputs, &targets)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(LmError::NonFiniteLoss { step, value });
        }
        model.store_mut().zero_grad();
        tape.backward(loss, model.store_mut())?;
        adam.step(model.store_mut());
        losses.push(value);
        on_step(step, value);
    }
    Ok(TrainOutcome { model, losses })
}
