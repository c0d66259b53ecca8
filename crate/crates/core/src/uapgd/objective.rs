use super::Objective;
use crate::dataset::epoch_batches;
use crate::detector::DetectorContract;
use crate::error::{Error, Result};
use crate::losses::{BatchEvaluation, LossContext};
use crate::trigger::TriggerImage;

/// The attack loss over the target-bearing samples of a dataset, reshuffled
/// into batches every epoch.
pub struct DatasetObjective<'a, D: DetectorContract> {
    context: LossContext<'a, D>,
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
    batches: Vec<Vec<usize>>,
}

impl<'a, D: DetectorContract> DatasetObjective<'a, D> {
    pub fn new(context: LossContext<'a, D>, batch_size: usize, seed: u64) -> Result<Self> {
        let indices: Vec<usize> = context
            .dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.has_class(context.target_class))
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return Err(Error::Config(format!(
                "no sample contains the target class {}",
                context.target_class
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            context,
            indices,
            batch_size,
            seed,
            batches: Vec::new(),
        })
    }

    pub fn context(&self) -> &LossContext<'a, D> {
        &self.context
    }
}

impl<D: DetectorContract> Objective for DatasetObjective<'_, D> {
    fn begin_epoch(&mut self, epoch: usize) -> Result<usize> {
        self.batches = epoch_batches(self.indices.len(), self.batch_size, self.seed, epoch as u64)?
            .into_iter()
            .map(|b| b.into_iter().map(|i| self.indices[i]).collect())
            .collect();
        Ok(self.batches.len())
    }

    fn evaluate(&mut self, epoch: usize, batch: usize, trigger: &TriggerImage) -> Result<BatchEvaluation> {
        let indices = self
            .batches
            .get(batch)
            .ok_or_else(|| Error::argument(format!("batch {batch} not prepared for epoch {epoch}")))?;
        self.context.evaluate(indices, trigger, epoch as u64)
    }
}
