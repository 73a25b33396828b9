use crate::error::{Error, Result};
use crate::search::Evaluator;
use crate::task::{linear_probe_train, seg_metrics, Dataset, ProbeConfig};
use crate::vit::{ArchDescriptor, MiniViT};

/// Scores a subnet by the validation mIoU (in percent) of a linear probe
/// trained on its frozen final features.
pub struct ProbeEvaluator<'a> {
    model: &'a MiniViT<f32>,
    train: &'a Dataset,
    val: &'a Dataset,
    probe: &'a ProbeConfig,
}

impl<'a> ProbeEvaluator<'a> {
    pub fn new(model: &'a MiniViT<f32>, train: &'a Dataset, val: &'a Dataset, probe: &'a ProbeConfig) -> Self {
        Self { model, train, val, probe }
    }
}

impl Evaluator for ProbeEvaluator<'_> {
    fn score(&mut self, arch: &ArchDescriptor) -> Result<f64> {
        let wrap = |e: Error| match e {
            e @ (Error::State(_) | Error::Config(_)) => e,
            e => Error::Evaluator(format!("{arch}: {e}")),
        };
        self.model.check_arch(arch)?;
        let train = self.model.forward(arch, &self.train.images).map_err(wrap)?;
        let head = linear_probe_train(&train.features, &self.train.labels, self.probe).map_err(wrap)?;
        let val = self.model.forward(arch, &self.val.images).map_err(wrap)?;
        let pred = head.predict(&val.features).map_err(wrap)?;
        let m = seg_metrics(&pred, &self.val.labels, self.probe.classes).map_err(wrap)?;
        if !m.miou.is_finite() {
            return Err(Error::Evaluator(format!("{arch}: non-finite mIoU")));
        }
        Ok(m.miou * 100.0)
    }

    fn metric_name(&self) -> &str {
        "probe-miou"
    }
}
