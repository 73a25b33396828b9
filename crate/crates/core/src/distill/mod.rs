//! Weight-sharing supernet trained by feature distillation from a frozen
//! full-attention teacher.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::autograd::{GradTape, Var};
use crate::error::{dim_err, Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::task::{Dataset, TaskSpec};
use crate::tensor::{Element, Tensor};
use crate::vit::{forward_tape, load_checkpoint, save_checkpoint, unfold_patches, ArchDescriptor, InheritMode, MiniViT};

/// Stream ids keeping the data and subnet-sampling draws independent.
const DATA_STREAM: u64 = 0x0D15_7111;
const SAMPLE_STREAM: u64 = 0x5A3B_1E00;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }
}

/// One shared trunk with a set of attention kinds per layer. Every choice
/// in a layer reads the same trunk tensors; Linear choices add that
/// layer's squeeze-conv parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperNet<T> {
    pub model: MiniViT<T>,
    pub choices: Vec<Vec<AttentionKind>>,
    pub stage: Stage,
}

impl<T: Element> SuperNet<T> {
    /// Stage 1: every layer chooses between Linear and Window, all inherited
    /// from `teacher`.
    pub fn stage1(teacher: &MiniViT<T>, rng: &mut Rng, mode: InheritMode) -> Result<Self> {
        let depth = teacher.depth();
        let model = MiniViT::inherit_weights(teacher, &ArchDescriptor::uniform(AttentionKind::Linear, depth), rng, mode)?;
        Self::new(model, vec![vec![AttentionKind::Linear, AttentionKind::Window]; depth], Stage::Stage1)
    }

    /// Stage 2: layer `i` chooses between `stage1_arch[i]` and Full. The
    /// trunk and squeeze-conv weights continue from `trained`.
    pub fn stage2(trained: &SuperNet<T>, stage1_arch: &ArchDescriptor) -> Result<Self> {
        trained.model.check_arch(stage1_arch)?;
        let choices = stage1_arch
            .kinds
            .iter()
            .map(|&k| if k == AttentionKind::Full { vec![k] } else { vec![k, AttentionKind::Full] })
            .collect();
        let mut model = trained.model.clone();
        model.arch = stage1_arch.clone();
        Self::new(model, choices, Stage::Stage2)
    }

    pub fn new(model: MiniViT<T>, choices: Vec<Vec<AttentionKind>>, stage: Stage) -> Result<Self> {
        if choices.len() != model.depth() {
            return Err(Error::Config(format!("{} choice sets for depth {}", choices.len(), model.depth())));
        }
        for (i, c) in choices.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Config(format!("layer {i} has an empty choice set")));
            }
            if c.contains(&AttentionKind::Linear) && model.params.layers[i].squeeze.is_none() {
                return Err(Error::State(format!("layer {i} offers Linear but has no squeeze-conv parameters")));
            }
        }
        Ok(Self { model, choices, stage })
    }

    /// Independent uniform draw per layer over its choice set.
    pub fn sample_subnet(&self, rng: &mut Rng) -> Result<ArchDescriptor> {
        sample_subnet(&self.choices, rng)
    }

    /// True when `arch` picks an allowed kind in every layer.
    pub fn contains(&self, arch: &ArchDescriptor) -> bool {
        arch.depth() == self.choices.len() && arch.kinds.iter().zip(&self.choices).all(|(k, c)| c.contains(k))
    }

    pub fn choice_codes(&self) -> Vec<String> {
        self.choices.iter().map(|c| c.iter().map(|k| k.code()).collect()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("choices".to_string(), serde_json::to_value(self.choice_codes())?);
        meta.insert("stage".to_string(), serde_json::to_value(self.stage)?);
        save_checkpoint(&self.model, dir, meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (model, manifest) = load_checkpoint::<T>(dir)?;
        let missing = || Error::Format(format!("{} is not a supernet checkpoint", dir.display()));
        let codes: Vec<String> = serde_json::from_value(manifest.meta.get("choices").ok_or_else(missing)?.clone())?;
        let stage: Stage = serde_json::from_value(manifest.meta.get("stage").ok_or_else(missing)?.clone())?;
        let choices = codes
            .iter()
            .map(|c| c.parse::<ArchDescriptor>().map(|a| a.kinds))
            .collect::<Result<_>>()?;
        Self::new(model, choices, stage)
    }
}

pub fn sample_subnet(choices: &[Vec<AttentionKind>], rng: &mut Rng) -> Result<ArchDescriptor> {
    let kinds = choices
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c.is_empty() {
                Err(Error::Config(format!("layer {i} has an empty choice set")))
            } else {
                Ok(c[rng.below(c.len())])
            }
        })
        .collect::<Result<_>>()?;
    Ok(ArchDescriptor::new(kinds))
}

/// Mean over taps of the elementwise mean-squared error.
pub fn distill_loss<T: Element>(student: &[Tensor<T>], teacher: &[Tensor<T>]) -> Result<f64> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(dim_err!("{} student taps vs {} teacher taps", student.len(), teacher.len()));
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        if s.shape() != t.shape() {
            return Err(dim_err!("tap shapes {:?} vs {:?}", s.shape(), t.shape()));
        }
        let sq: f64 = s.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).to_f64().powi(2)).sum();
        total += sq / s.len() as f64;
    }
    Ok(total / student.len() as f64)
}

/// Tape form of [`distill_loss`].
pub fn distill_loss_tape<T: Element>(tape: &mut GradTape<T>, student: &[Var], teacher: &[Var]) -> Result<Var> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(dim_err!("{} student taps vs {} teacher taps", student.len(), teacher.len()));
    }
    let mut total: Option<Var> = None;
    for (&s, &t) in student.iter().zip(teacher) {
        let l = tape.mse(s, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, T::from_f64(1.0 / student.len() as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Layers whose outputs are matched; empty means the last layer.
    #[serde(default)]
    pub taps: Vec<usize>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            adam: AdamConfig::default(),
            taps: Vec::new(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn resolved_taps(&self, depth: usize) -> Result<Vec<usize>> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("distillation needs positive steps and batch".into()));
        }
        let mut taps = if self.taps.is_empty() { vec![depth - 1] } else { self.taps.clone() };
        taps.sort_unstable();
        taps.dedup();
        if taps.iter().any(|&t| t >= depth) {
            return Err(Error::Config(format!("taps {taps:?} invalid for depth {depth}")));
        }
        Ok(taps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub arch: String,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillLog {
    pub records: Vec<StepRecord>,
}

impl DistillLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss of the first and last `k` steps.
    pub fn head_tail_means(&self, k: usize) -> (f64, f64) {
        let l = self.losses();
        let k = k.min(l.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&l[..k]), mean(&l[l.len() - k..]))
    }
}

/// Distillation loss of `arch` on one batch, without updating anything.
pub fn eval_distill_loss<T: Element>(
    teacher: &MiniViT<T>,
    student: &MiniViT<T>,
    arch: &ArchDescriptor,
    images: &Tensor<T>,
    taps: &[usize],
) -> Result<f64> {
    let t = teacher.clone().with_taps(taps.to_vec())?;
    let s = student.clone().with_taps(taps.to_vec())?;
    let (a, b) = (s.forward(arch, images)?, t.forward(&t.arch, images)?);
    distill_loss(&a.taps, &b.taps)
}

/// Trains all student parameters (trunk and extras) on freshly drawn
/// batches; the teacher is only read. On a non-finite loss the step is not
/// applied, so `supernet` keeps its last good state, and a numeric error is
/// returned.
pub fn train_supernet<T: Element>(
    teacher: &MiniViT<T>,
    supernet: &mut SuperNet<T>,
    task: &TaskSpec,
    cfg: &DistillConfig,
) -> Result<DistillLog> {
    train_supernet_with(teacher, supernet, task, cfg, |_, _| {})
}

/// [`train_supernet`] with a callback after every applied step.
pub fn train_supernet_with<T: Element>(
    teacher: &MiniViT<T>,
    supernet: &mut SuperNet<T>,
    task: &TaskSpec,
    cfg: &DistillConfig,
    mut on_step: impl FnMut(&SuperNet<T>, &StepRecord),
) -> Result<DistillLog> {
    let depth = supernet.model.depth();
    if teacher.depth() != depth || teacher.config != supernet.model.config {
        return Err(Error::Config("teacher and supernet configurations differ".into()));
    }
    let taps = cfg.resolved_taps(depth)?;
    let teacher = teacher.clone().with_taps(taps.clone())?;
    let vit = supernet.model.config.clone();
    let mut sampler = Rng::with_stream(cfg.seed, SAMPLE_STREAM);
    let mut state = AdamState::new(&supernet.model.params.named().iter().map(|(_, p)| *p).collect::<Vec<_>>());
    let mut log = DistillLog::default();
    for step in 0..cfg.steps {
        let started = Instant::now();
        let arch = supernet.sample_subnet(&mut sampler)?;
        let data = Dataset::generate(task, cfg.seed, DATA_STREAM + step as u64, cfg.batch)?;
        let images: Tensor<T> = data.images.cast();
        let target = teacher.forward(&teacher.arch, &images)?;

        let mut tape = GradTape::new();
        let patches = tape.constant(unfold_patches(&images, vit.patch)?);
        let params = supernet.model.bind(&mut tape, true);
        let out = forward_tape(&mut tape, &vit, &params, &arch, &taps, patches, cfg.batch)?;
        let targets: Vec<Var> = target.taps.into_iter().map(|t| tape.constant(t)).collect();
        let loss = distill_loss_tape(&mut tape, &out.taps, &targets)?;
        let value = tape.value(loss).data()[0].to_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "distillation loss became {value} at step {step} (arch {arch}); parameters hold the state after step {}",
                step as i64 - 1
            )));
        }
        let grads = tape.backward(loss)?;
        let mut slots = supernet.model.params.named_mut();
        let g: Vec<Option<Tensor<T>>> = params
            .named()
            .iter()
            .map(|(_, &v)| grads.reached(v).then(|| grads.get(v)))
            .collect();
        let mut refs: Vec<&mut Tensor<T>> = slots.iter_mut().map(|(_, p)| &mut **p).collect();
        adam_step(&mut refs, &g, &mut state, &cfg.adam)?;
        drop(slots);
        let record = StepRecord {
            step,
            arch: arch.to_string(),
            loss: value,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_step(supernet, &record);
        log.records.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::vit::ViTConfig;

    pub(crate) fn tiny() -> (ViTConfig, TaskSpec) {
        let vit = ViTConfig {
            image_size: [16, 16],
            channels: 3,
            patch: 4,
            depth: 3,
            d_model: 16,
            heads: 2,
            mlp_ratio: 2,
            window: 2,
            squeeze_kernel: 3,
            squeeze_hidden: 8,
            ..Default::default()
        };
        let task = TaskSpec { image_size: [16, 16], patch: 4, ..Default::default() };
        (vit, task)
    }

    #[test]
    fn singleton_choices_give_constant_arch() {
        let choices = vec![vec![AttentionKind::Window], vec![AttentionKind::Full]];
        let mut rng = Rng::new(1);
        for _ in 0..10 {
            assert_eq!(sample_subnet(&choices, &mut rng).unwrap().to_string(), "WF");
        }
        assert!(sample_subnet(&[vec![]], &mut rng).is_err());
    }

    #[test]
    fn sampling_is_reproducible_and_balanced() {
        let choices = vec![vec![AttentionKind::Linear, AttentionKind::Window]; 4];
        let draw = |seed| {
            let mut r = Rng::new(seed);
            (0..10_000).map(|_| sample_subnet(&choices, &mut r).unwrap()).collect::<Vec<_>>()
        };
        let a = draw(3);
        assert_eq!(a, draw(3));
        for layer in 0..4 {
            let f = a.iter().filter(|x| x.kinds[layer] == AttentionKind::Linear).count() as f64 / 1e4;
            assert!((0.47..=0.53).contains(&f), "layer {layer}: {f}");
        }
    }

    #[test]
    fn distill_loss_examples() {
        let mut rng = Rng::new(2);
        let a: Vec<Tensor<f64>> = (0..3).map(|_| rng.normal_tensor(&[5, 4], 1.0)).collect();
        let b: Vec<Tensor<f64>> = (0..3).map(|_| rng.normal_tensor(&[5, 4], 1.0)).collect();
        assert_eq!(distill_loss(&a, &a).unwrap(), 0.0);
        let shifted: Vec<_> = a.iter().map(|t| t.map(|x| x + 0.3)).collect();
        assert!((distill_loss(&a, &shifted).unwrap() - 0.09).abs() < 1e-12);
        assert!((distill_loss(&a, &b).unwrap() - oracle::naive_distill_loss(&a, &b)).abs() < 1e-10);
        let mut tape = GradTape::new();
        let sa: Vec<Var> = a.iter().map(|t| tape.constant(t.clone())).collect();
        let sb: Vec<Var> = b.iter().map(|t| tape.constant(t.clone())).collect();
        let l = distill_loss_tape(&mut tape, &sa, &sb).unwrap();
        assert!((tape.value(l).data()[0] - oracle::naive_distill_loss(&a, &b)).abs() < 1e-12);
        assert!(matches!(distill_loss(&a[..1], &[Tensor::zeros(&[4, 5])]), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (vit, task) = tiny();
        let mut rng = Rng::new(4);
        let teacher = MiniViT::<f32>::init(vit, &mut rng).unwrap();
        let mut sn = SuperNet::stage1(&teacher, &mut rng, InheritMode::All).unwrap();
        let before = sn.clone();
        let teacher_before = teacher.clone();
        let cfg = DistillConfig { steps: 3, batch: 2, adam: AdamConfig { lr: 0.0, ..Default::default() }, ..Default::default() };
        let log = train_supernet(&teacher, &mut sn, &task, &cfg).unwrap();
        assert_eq!(log.records.len(), 3);
        for ((_, a), (_, b)) in before.model.params.named().into_iter().zip(sn.model.params.named()) {
            assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        }
        assert_eq!(teacher, teacher_before);
    }

    #[test]
    fn training_is_reproducible_and_shares_the_trunk() {
        let (vit, task) = tiny();
        let mut rng = Rng::new(5);
        let teacher = MiniViT::<f32>::init(vit, &mut rng).unwrap();
        let base = SuperNet::stage1(&teacher, &mut rng, InheritMode::All).unwrap();
        let cfg = DistillConfig { steps: 4, batch: 2, adam: AdamConfig { lr: 1e-3, ..Default::default() }, ..Default::default() };
        let (mut a, mut b) = (base.clone(), base.clone());
        let la = train_supernet(&teacher, &mut a, &task, &cfg).unwrap();
        let lb = train_supernet(&teacher, &mut b, &task, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.losses(), lb.losses());
        assert!(la.losses().iter().all(|l| l.is_finite()));
        assert_ne!(a.model.params.layers[0].w_q, teacher.params.layers[0].w_q);
        // both kinds of a layer read the one updated trunk
        let x: Tensor<f32> = Dataset::generate(&task, 1, 0, 1).unwrap().images;
        let w = a.model.forward(&"WWW".parse().unwrap(), &x).unwrap();
        let mut stale = a.clone();
        stale.model.params.layers[2].w_v = base.model.params.layers[2].w_v.clone();
        assert_ne!(w, stale.model.forward(&"WWW".parse().unwrap(), &x).unwrap());
    }

    #[test]
    fn nan_aborts_with_last_good_state() {
        let (vit, task) = tiny();
        let mut rng = Rng::new(6);
        let teacher = MiniViT::<f32>::init(vit, &mut rng).unwrap();
        let mut sn = SuperNet::stage1(&teacher, &mut rng, InheritMode::All).unwrap();
        // a poisoned generator weight only matters when layer 1 runs Linear
        let sq = sn.model.params.layers[1].squeeze.as_mut().unwrap();
        sq.w2.data_mut()[0] = f32::NAN;
        let cfg = DistillConfig { steps: 50, batch: 2, adam: AdamConfig { lr: 1e-3, ..Default::default() }, ..Default::default() };
        let start = sn.clone();
        let mut applied = 0;
        let err = train_supernet_with(&teacher, &mut sn, &task, &cfg, |_, r| applied = r.step + 1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        let mut replay = start;
        if applied > 0 {
            let short = DistillConfig { steps: applied, ..cfg.clone() };
            train_supernet(&teacher, &mut replay, &task, &short).unwrap();
        }
        assert_eq!(sn.model.params.layers[0].w_q.to_le_bytes(), replay.model.params.layers[0].w_q.to_le_bytes());
    }

    #[test]
    fn stage2_choice_sets_and_checkpoint() {
        let (vit, _) = tiny();
        let mut rng = Rng::new(7);
        let teacher = MiniViT::<f32>::init(vit, &mut rng).unwrap();
        let s1 = SuperNet::stage1(&teacher, &mut rng, InheritMode::All).unwrap();
        let s2 = SuperNet::stage2(&s1, &"LWL".parse().unwrap()).unwrap();
        assert_eq!(s2.choice_codes(), ["LF", "WF", "LF"]);
        assert!(s2.contains(&"FWL".parse().unwrap()) && !s2.contains(&"WWL".parse().unwrap()));
        let dir = tempfile::tempdir().unwrap();
        s2.save(dir.path()).unwrap();
        assert_eq!(SuperNet::<f32>::load(dir.path()).unwrap(), s2);
    }
}
