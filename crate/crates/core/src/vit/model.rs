use serde::{Deserialize, Serialize};

use super::{ArchDescriptor, LayerParams, ModelParams, ViTConfig, LN_EPS};
use crate::attention::{attention_tape, AttentionKind, SqueezeConvParams};
use crate::autograd::{GradTape, Var};
use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Activation, Element, Tensor};

/// Images per tape in [`MiniViT::forward`]; bounds peak memory.
const FORWARD_CHUNK: usize = 16;

/// Which teacher weights a student keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InheritMode {
    /// Every trunk parameter, attention projections included.
    All,
    /// Everything except `W_Q`, `W_K`, `W_V`, `W_O` (re-drawn) and `b_o`
    /// (zeroed).
    MlpOnly,
}

/// Output of a forward pass over a batch: `[B·N × d_model]` features and
/// one tensor of the same shape per tap layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub features: Tensor<T>,
    pub taps: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct TapeForward {
    pub features: Var,
    pub taps: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniViT<T> {
    pub config: ViTConfig,
    /// Native arch of this model (all-Full for a teacher).
    pub arch: ArchDescriptor,
    /// Sorted layer indices whose outputs are exported.
    pub taps: Vec<usize>,
    pub params: ModelParams<Tensor<T>>,
}

fn dense<T: Element>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    rng.normal_tensor(&[fan_in, fan_out], (fan_in as f64).powf(-0.5))
}

fn init_layer<T: Element>(cfg: &ViTConfig, rng: &mut Rng) -> LayerParams<Tensor<T>> {
    let (d, hid) = (cfg.d_model, cfg.mlp_hidden());
    LayerParams {
        ln1_g: Tensor::full(&[d], T::one()),
        ln1_b: Tensor::zeros(&[d]),
        w_q: dense(rng, d, d),
        w_k: dense(rng, d, d),
        w_v: dense(rng, d, d),
        w_o: dense(rng, d, d),
        b_o: Tensor::zeros(&[d]),
        ln2_g: Tensor::full(&[d], T::one()),
        ln2_b: Tensor::zeros(&[d]),
        mlp_w1: dense(rng, d, hid),
        mlp_b1: Tensor::zeros(&[hid]),
        mlp_w2: dense(rng, hid, d),
        mlp_b2: Tensor::zeros(&[d]),
        squeeze: None,
    }
}

/// Splits `[B×H×W×C]` images into `[B·N × P²·C]` patch rows in raster
/// order, each patch flattened as `(dy, dx, channel)`.
pub fn unfold_patches<T: Element>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(dim_err!("expected [B×H×W×C] images, got {:?}", s));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("image {h}×{w} not divisible by patch {patch}")));
    }
    let (gh, gw, run) = (h / patch, w / patch, patch * c);
    let mut out = Vec::with_capacity(images.len());
    let d = images.data();
    for img in 0..b {
        let base = img * h * w * c;
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let start = base + ((py * patch + dy) * w + px * patch) * c;
                    out.extend_from_slice(&d[start..start + run]);
                }
            }
        }
    }
    Tensor::new(vec![b * gh * gw, patch * run], out)
}

/// Records a forward pass of `patches` (`[batch·N × P²·C]`) on `tape`.
pub fn forward_tape<T: Element>(
    tape: &mut GradTape<T>,
    cfg: &ViTConfig,
    p: &ModelParams<Var>,
    arch: &ArchDescriptor,
    taps: &[usize],
    patches: Var,
    batch: usize,
) -> Result<TapeForward> {
    if arch.depth() != p.layers.len() {
        return Err(Error::Config(format!("arch {arch} has {} layers, model has {}", arch.depth(), p.layers.len())));
    }
    let eps = T::from_f64(LN_EPS);
    let fmap = cfg.linear_feature.feature_map();
    let mut x = tape.matmul(patches, p.patch_w)?;
    x = tape.add_tiled(x, p.patch_b)?;
    x = tape.add_tiled(x, p.pos)?;
    let mut tapped = Vec::with_capacity(taps.len());
    for (i, (l, &kind)) in p.layers.iter().zip(&arch.kinds).enumerate() {
        let h = tape.layer_norm(x, l.ln1_g, l.ln1_b, eps)?;
        let q = tape.matmul(h, l.w_q)?;
        let k = tape.matmul(h, l.w_k)?;
        let v = tape.matmul(h, l.w_v)?;
        let linear = l.squeeze.as_ref().map(|s| (s, fmap));
        let a = attention_tape(tape, kind, q, k, v, batch, cfg.heads, cfg.grid(), cfg.window, linear)
            .map_err(|e| match e {
                Error::State(m) => Error::State(format!("layer {i}: {m}")),
                e => e,
            })?;
        let a = tape.matmul(a, l.w_o)?;
        let a = tape.add_tiled(a, l.b_o)?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, l.ln2_g, l.ln2_b, eps)?;
        let h = tape.matmul(h, l.mlp_w1)?;
        let h = tape.add_tiled(h, l.mlp_b1)?;
        let h = tape.activation(h, Activation::Gelu);
        let h = tape.matmul(h, l.mlp_w2)?;
        let h = tape.add_tiled(h, l.mlp_b2)?;
        x = tape.add(x, h)?;
        if taps.contains(&i) {
            tapped.push(x);
        }
    }
    Ok(TapeForward { features: x, taps: tapped })
}

impl<T: Element> MiniViT<T> {
    /// Fresh all-Full model tapping the last layer.
    pub fn init(config: ViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, n) = (config.d_model, config.tokens());
        let params = ModelParams {
            patch_w: dense(rng, config.patch_dim(), d),
            patch_b: Tensor::zeros(&[d]),
            pos: rng.normal_tensor(&[n, d], 0.02),
            layers: (0..config.depth).map(|_| init_layer(&config, rng)).collect(),
        };
        Ok(Self {
            arch: ArchDescriptor::uniform(AttentionKind::Full, config.depth),
            taps: vec![config.depth - 1],
            config,
            params,
        })
    }

    pub fn with_taps(mut self, mut taps: Vec<usize>) -> Result<Self> {
        taps.sort_unstable();
        taps.dedup();
        if taps.is_empty() || taps.iter().any(|&t| t >= self.config.depth) {
            return Err(Error::Config(format!("taps {taps:?} invalid for depth {}", self.config.depth)));
        }
        self.taps = taps;
        Ok(self)
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    /// Checks that `arch` can run on this model.
    pub fn check_arch(&self, arch: &ArchDescriptor) -> Result<()> {
        if arch.depth() != self.depth() {
            return Err(Error::Config(format!("arch {arch} has {} layers, model has {}", arch.depth(), self.depth())));
        }
        for (i, (&k, l)) in arch.kinds.iter().zip(&self.params.layers).enumerate() {
            if k == AttentionKind::Linear && l.squeeze.is_none() {
                return Err(Error::State(format!("layer {i} is Linear but has no squeeze-conv parameters")));
            }
        }
        Ok(())
    }

    /// Adds squeeze-conv parameters at their documented init to layer `i`
    /// if it has none.
    pub fn ensure_squeeze(&mut self, i: usize, rng: &mut Rng) -> Result<()> {
        let cfg = &self.config;
        let layer = &mut self.params.layers[i];
        if layer.squeeze.is_none() {
            layer.squeeze = Some(SqueezeConvParams::init(cfg.d_model, cfg.squeeze_kernel, cfg.squeeze_hidden, rng)?);
        }
        Ok(())
    }

    /// Patch projection of one `[H×W×C]` image, without the positional
    /// table: `[N × d_model]`.
    pub fn patch_embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        let cfg = &self.config;
        if s != [cfg.image_size[0], cfg.image_size[1], cfg.channels] {
            return Err(Error::Config(format!(
                "image {:?} does not match configured {:?}×{}",
                s, cfg.image_size, cfg.channels
            )));
        }
        let patches = unfold_patches(&image.reshape(&[1, s[0], s[1], s[2]])?, cfg.patch)?;
        let mut tape = GradTape::new();
        let x = tape.constant(patches);
        let w = tape.constant(self.params.patch_w.clone());
        let b = tape.constant(self.params.patch_b.clone());
        let y = tape.matmul(x, w)?;
        let y = tape.add_tiled(y, b)?;
        Ok(tape.value(y).clone())
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut GradTape<T>, trainable: bool) -> ModelParams<Var> {
        self.params.map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
    }

    fn image_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let s = images.shape();
        let img = [cfg.image_size[0], cfg.image_size[1], cfg.channels];
        match s.len() {
            3 if s == img => images.reshape(&[1, s[0], s[1], s[2]]),
            4 if s[1..] == img => Ok(images.clone()),
            _ => Err(Error::Config(format!("images {:?} do not match configured {:?}", s, img))),
        }
    }

    /// Deterministic forward of `[B×H×W×C]` (or a single `[H×W×C]`) images.
    pub fn forward(&self, arch: &ArchDescriptor, images: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.check_arch(arch)?;
        let images = self.image_batch(images)?;
        let cfg = &self.config;
        let (b, n, d) = (images.shape()[0], cfg.tokens(), cfg.d_model);
        let per_image = images.len() / b.max(1);
        let mut features = Vec::with_capacity(b * n * d);
        let mut taps: Vec<Vec<T>> = vec![Vec::with_capacity(b * n * d); self.taps.len()];
        for start in (0..b).step_by(FORWARD_CHUNK) {
            let cb = FORWARD_CHUNK.min(b - start);
            let chunk = Tensor::new(
                vec![cb, images.shape()[1], images.shape()[2], images.shape()[3]],
                images.data()[start * per_image..(start + cb) * per_image].to_vec(),
            )?;
            let mut tape = GradTape::new();
            let patches = tape.constant(unfold_patches(&chunk, cfg.patch)?);
            let p = self.bind(&mut tape, false);
            let out = forward_tape(&mut tape, cfg, &p, arch, &self.taps, patches, cb)?;
            features.extend_from_slice(tape.value(out.features).data());
            for (dst, &t) in taps.iter_mut().zip(&out.taps) {
                dst.extend_from_slice(tape.value(t).data());
            }
        }
        let features = Tensor::new(vec![b * n, d], features)?;
        features.ensure_finite("features")?;
        let taps = taps.into_iter().map(|t| Tensor::new(vec![b * n, d], t)).collect::<Result<_>>()?;
        Ok(ForwardOutput { features, taps })
    }

    /// Student for `arch` built from an all-Full teacher. Trunk tensors are
    /// shared with the teacher (copy-on-write), so they are bit-identical;
    /// Linear layers get fresh squeeze-conv parameters from `rng`.
    pub fn inherit_weights(teacher: &Self, arch: &ArchDescriptor, rng: &mut Rng, mode: InheritMode) -> Result<Self> {
        if arch.depth() != teacher.depth() {
            return Err(Error::Config(format!(
                "arch {arch} has {} layers, teacher has {}",
                arch.depth(),
                teacher.depth()
            )));
        }
        let mut student = teacher.clone();
        student.arch = arch.clone();
        let d = student.config.d_model;
        for (i, layer) in student.params.layers.iter_mut().enumerate() {
            layer.squeeze = None;
            if mode == InheritMode::MlpOnly {
                let mut r = rng.split(1000 + i as u64);
                layer.w_q = dense(&mut r, d, d);
                layer.w_k = dense(&mut r, d, d);
                layer.w_v = dense(&mut r, d, d);
                layer.w_o = dense(&mut r, d, d);
                layer.b_o = Tensor::zeros(&[d]);
            }
        }
        for (i, &k) in arch.kinds.iter().enumerate() {
            if k == AttentionKind::Linear {
                student.ensure_squeeze(i, &mut rng.split(i as u64))?;
            }
        }
        Ok(student)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn tiny() -> ViTConfig {
        ViTConfig {
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
        }
    }

    fn images(rng: &mut Rng, b: usize) -> Tensor<f64> {
        rng.uniform_tensor(&[b, 16, 16, 3], 0.0, 1.0)
    }

    #[test]
    fn patch_embed_matches_unfold_oracle() {
        let mut rng = Rng::new(3);
        let m = MiniViT::<f64>::init(tiny(), &mut rng).unwrap();
        let img: Tensor<f64> = rng.uniform_tensor(&[16, 16, 3], 0.0, 1.0);
        let e = m.patch_embed(&img).unwrap();
        assert_eq!(e.shape(), [16, 16]);
        let want = oracle::naive_matmul(&oracle::unfold_patches(&img, 4), &m.params.patch_w);
        assert!(e.max_abs_diff(&want).unwrap() < 1e-6);
    }

    #[test]
    fn whole_image_patch_is_one_token() {
        let cfg = ViTConfig { patch: 16, window: 1, ..tiny() };
        let m = MiniViT::<f64>::init(cfg, &mut Rng::new(1)).unwrap();
        let img = Tensor::zeros(&[16, 16, 3]);
        assert_eq!(m.patch_embed(&img).unwrap().shape(), [1, 16]);
        assert!(m.patch_embed(&Tensor::zeros(&[8, 16, 3])).is_err());
    }

    #[test]
    fn single_tap_is_final_features_and_runs_repeat() {
        let mut rng = Rng::new(4);
        let m = MiniViT::<f64>::init(tiny(), &mut rng).unwrap();
        let x = images(&mut rng, 2);
        let a = m.forward(&m.arch, &x).unwrap();
        assert_eq!(a.taps.len(), 1);
        assert_eq!(a.taps[0], a.features);
        assert_eq!(a, m.forward(&m.arch, &x).unwrap());
    }

    #[test]
    fn inherited_all_full_is_identical() {
        let mut rng = Rng::new(5);
        let t = MiniViT::<f64>::init(tiny(), &mut rng).unwrap();
        let s = MiniViT::inherit_weights(&t, &t.arch, &mut rng, InheritMode::All).unwrap();
        let x = images(&mut rng, 3);
        let (a, b) = (t.forward(&t.arch, &x).unwrap(), s.forward(&s.arch, &x).unwrap());
        assert_eq!(a.features.max_abs_diff(&b.features).unwrap(), 0.0);
    }

    #[test]
    fn inheritance_copies_projections_for_any_arch() {
        let mut rng = Rng::new(6);
        let t = MiniViT::<f32>::init(tiny(), &mut rng).unwrap();
        let arch: ArchDescriptor = "LWF".parse().unwrap();
        let s = MiniViT::inherit_weights(&t, &arch, &mut rng, InheritMode::All).unwrap();
        for (a, b) in t.params.layers.iter().zip(&s.params.layers) {
            assert_eq!(a.w_q.to_le_bytes(), b.w_q.to_le_bytes());
            assert_eq!(a.mlp_w2.to_le_bytes(), b.mlp_w2.to_le_bytes());
        }
        assert!(s.params.layers[0].squeeze.is_some());
        assert!(s.params.layers[1].squeeze.is_none() && s.params.layers[2].squeeze.is_none());
        let m = MiniViT::inherit_weights(&t, &arch, &mut rng, InheritMode::MlpOnly).unwrap();
        assert_ne!(m.params.layers[0].w_q, t.params.layers[0].w_q);
        assert_eq!(m.params.layers[0].mlp_w1, t.params.layers[0].mlp_w1);
        assert!(MiniViT::inherit_weights(&t, &"LW".parse().unwrap(), &mut rng, InheritMode::All).is_err());
    }

    #[test]
    fn linear_layer_without_extras_is_a_state_error() {
        let mut rng = Rng::new(7);
        let t = MiniViT::<f64>::init(tiny(), &mut rng).unwrap();
        let x = images(&mut rng, 1);
        let r = t.forward(&"FLF".parse().unwrap(), &x);
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn changing_a_layer_kind_leaves_earlier_taps() {
        let mut rng = Rng::new(8);
        let t = MiniViT::<f64>::init(tiny(), &mut rng).unwrap().with_taps(vec![0, 1, 2]).unwrap();
        let all_l = ArchDescriptor::uniform(AttentionKind::Linear, 3);
        let s = MiniViT::inherit_weights(&t, &all_l, &mut rng, InheritMode::All).unwrap();
        let x = images(&mut rng, 2);
        let a = s.forward(&"FFF".parse().unwrap(), &x).unwrap();
        let b = s.forward(&"FFL".parse().unwrap(), &x).unwrap();
        let c = s.forward(&"FWL".parse().unwrap(), &x).unwrap();
        assert_eq!(a.taps[..2], b.taps[..2]);
        assert_eq!(b.taps[0], c.taps[0]);
        assert_ne!(a.taps[2], b.taps[2]);
    }

    #[test]
    fn taps_match_instrumented_reference() {
        let mut rng = Rng::new(9);
        let t = MiniViT::<f64>::init(tiny(), &mut rng).unwrap().with_taps(vec![1, 0]).unwrap();
        assert_eq!(t.taps, [0, 1]);
        let x = images(&mut rng, 1);
        let out = t.forward(&t.arch, &x).unwrap();
        // truncated models expose the same intermediate values
        for (j, &layer) in t.taps.iter().enumerate() {
            let mut cut = t.clone();
            cut.config.depth = layer + 1;
            cut.params.layers.truncate(layer + 1);
            cut.taps = vec![layer];
            let arch = ArchDescriptor::uniform(AttentionKind::Full, layer + 1);
            assert_eq!(cut.forward(&arch, &x).unwrap().features, out.taps[j]);
        }
        assert!(t.clone().with_taps(vec![3]).is_err());
    }

    #[test]
    fn chunked_forward_matches_per_image() {
        let mut rng = Rng::new(10);
        let t = MiniViT::<f64>::init(tiny(), &mut rng).unwrap();
        let x = images(&mut rng, FORWARD_CHUNK + 2);
        let all = t.forward(&t.arch, &x).unwrap().features;
        let per = 16 * 16 * 3;
        let last = Tensor::new(vec![16, 16, 3], x.data()[(FORWARD_CHUNK + 1) * per..].to_vec()).unwrap();
        let one = t.forward(&t.arch, &last).unwrap().features;
        let rows = &all.data()[(FORWARD_CHUNK + 1) * 16 * 16..];
        let diff = rows.iter().zip(one.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}
