use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::GradTape;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::task::{Dataset, TaskSpec};
use crate::tensor::Tensor;
use crate::vit::{forward_tape, unfold_patches, MiniViT, ViTConfig};

const INIT_STREAM: u64 = 0x7EAC_0001;
const DATA_STREAM: u64 = 0x7EAC_1000_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Trains an all-Full backbone jointly with a linear patch classifier
/// (discarded afterwards) on freshly drawn batches.
pub fn train_teacher(vit: &ViTConfig, task: &TaskSpec, cfg: &TeacherConfig) -> Result<(MiniViT<f32>, Vec<TeacherRecord>)> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Config("teacher training needs positive steps and batch".into()));
    }
    let mut rng = Rng::with_stream(cfg.seed, INIT_STREAM);
    let mut model = MiniViT::<f32>::init(vit.clone(), &mut rng)?;
    let last = vec![model.depth() - 1];
    let mut head_w = Tensor::<f32>::zeros(&[vit.d_model, task.classes]);
    let mut head_b = Tensor::<f32>::zeros(&[task.classes]);
    let mut state = {
        let mut all: Vec<&Tensor<f32>> = model.params.named().iter().map(|(_, p)| *p).collect();
        all.extend([&head_w, &head_b]);
        AdamState::new(&all)
    };
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let started = Instant::now();
        let data = Dataset::generate(task, cfg.seed, DATA_STREAM + step as u64, cfg.batch)?;
        let mut tape = GradTape::new();
        let patches = tape.constant(unfold_patches(&data.images, vit.patch)?);
        let params = model.bind(&mut tape, true);
        let (hw, hb) = (tape.param(head_w.clone()), tape.param(head_b.clone()));
        let out = forward_tape(&mut tape, vit, &params, &model.arch, &last, patches, cfg.batch)?;
        let logits = tape.matmul(out.features, hw)?;
        let logits = tape.add_tiled(logits, hb)?;
        let loss = tape.cross_entropy(logits, &data.labels)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("teacher loss became {value} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let mut vars: Vec<_> = params.named().iter().map(|(_, &v)| v).collect();
        vars.extend([hw, hb]);
        let g: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.reached(v).then(|| grads.get(v))).collect();
        let mut slots = model.params.named_mut();
        let mut refs: Vec<&mut Tensor<f32>> = slots.iter_mut().map(|(_, p)| &mut **p).collect();
        refs.extend([&mut head_w, &mut head_b]);
        adam_step(&mut refs, &g, &mut state, &cfg.adam)?;
        log.push(TeacherRecord { step, loss: value, wall_ms: started.elapsed().as_secs_f64() * 1e3 });
    }
    Ok((model, log))
}
