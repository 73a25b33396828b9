use crate::attention::SqueezeConvParams;

/// One transformer block. Projection matrices act on row vectors:
/// `y = x·W`, so `W` is `[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<P> {
    pub ln1_g: P,
    pub ln1_b: P,
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
    pub b_o: P,
    pub ln2_g: P,
    pub ln2_b: P,
    /// `[d_model × mlp_hidden]`
    pub mlp_w1: P,
    pub mlp_b1: P,
    /// `[mlp_hidden × d_model]`
    pub mlp_w2: P,
    pub mlp_b2: P,
    /// Present on layers that can run linear attention.
    pub squeeze: Option<SqueezeConvParams<P>>,
}

/// Parameter tree of a whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    /// `[P²·C × d_model]`
    pub patch_w: P,
    pub patch_b: P,
    /// Learned additive positional table `[N × d_model]`.
    pub pos: P,
    pub layers: Vec<LayerParams<P>>,
}

impl<P> LayerParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> LayerParams<Q> {
        LayerParams {
            ln1_g: f(&self.ln1_g),
            ln1_b: f(&self.ln1_b),
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
            ln2_g: f(&self.ln2_g),
            ln2_b: f(&self.ln2_b),
            mlp_w1: f(&self.mlp_w1),
            mlp_b1: f(&self.mlp_b1),
            mlp_w2: f(&self.mlp_w2),
            mlp_b2: f(&self.mlp_b2),
            squeeze: self.squeeze.as_ref().map(|s| s.map(&mut f)),
        }
    }

    fn trunk(&self) -> [(&'static str, &P); 13] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ]
    }
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            pos: f(&self.pos),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
        }
    }

    /// Every parameter with its dot-path name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("patch.w".to_string(), &self.patch_w),
            ("patch.b".to_string(), &self.patch_b),
            ("pos".to_string(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.trunk().into_iter().map(|(n, p)| (format!("layers.{i}.{n}"), p)));
            if let Some(s) = &l.squeeze {
                out.extend(s.named().into_iter().map(|(n, p)| (format!("layers.{i}.squeeze.{n}"), p)));
            }
        }
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = vec![
            ("patch.w".to_string(), &mut self.patch_w),
            ("patch.b".to_string(), &mut self.patch_b),
            ("pos".to_string(), &mut self.pos),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let LayerParams {
                ln1_g,
                ln1_b,
                w_q,
                w_k,
                w_v,
                w_o,
                b_o,
                ln2_g,
                ln2_b,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
                squeeze,
            } = l;
            let trunk = [
                ("ln1_g", ln1_g),
                ("ln1_b", ln1_b),
                ("w_q", w_q),
                ("w_k", w_k),
                ("w_v", w_v),
                ("w_o", w_o),
                ("b_o", b_o),
                ("ln2_g", ln2_g),
                ("ln2_b", ln2_b),
                ("mlp_w1", mlp_w1),
                ("mlp_b1", mlp_b1),
                ("mlp_w2", mlp_w2),
                ("mlp_b2", mlp_b2),
            ];
            out.extend(trunk.into_iter().map(|(n, p)| (format!("layers.{i}.{n}"), p)));
            if let Some(s) = squeeze {
                out.extend(s.named_mut().into_iter().map(|(n, p)| (format!("layers.{i}.squeeze.{n}"), p)));
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.named().len()
    }
}
