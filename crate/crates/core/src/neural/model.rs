use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub num_segments: usize,
    /// Causal self-attention (generation) versus bidirectional (encoders).
    pub causal: bool,
    pub init_std: f64,
}

impl SequenceModelConfig {
    /// 2 layers, d=128, 4 heads, 256 positions.
    pub fn desk(vocab_size: usize, causal: bool) -> Self {
        SequenceModelConfig {
            num_layers: 2,
            model_dim: 128,
            num_heads: 4,
            ff_dim: 512,
            max_positions: 256,
            vocab_size,
            num_segments: 4,
            causal,
            init_std: 0.02,
        }
    }

    /// The 12-layer GPT-sized layout; far too slow to train here but kept as a preset.
    pub fn gpt_scale(vocab_size: usize, causal: bool) -> Self {
        SequenceModelConfig {
            num_layers: 12,
            model_dim: 768,
            num_heads: 12,
            ff_dim: 3072,
            max_positions: 512,
            vocab_size,
            num_segments: 4,
            causal,
            init_std: 0.02,
        }
    }

    pub fn tiny(vocab_size: usize, causal: bool) -> Self {
        SequenceModelConfig {
            num_layers: 2,
            model_dim: 32,
            num_heads: 2,
            ff_dim: 64,
            max_positions: 128,
            vocab_size,
            num_segments: 4,
            causal,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.num_segments == 0 {
            return bad("vocab_size, max_positions and num_segments must be positive".into());
        }
        if self.ff_dim == 0 || self.num_layers == 0 {
            return bad("ff_dim and num_layers must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

struct LayerIds {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    attn_out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Pre-norm transformer with token, segment and learned absolute position
/// embeddings, plus a vocabulary projection.
///
/// Wrappers may register extra heads in the same store via [`Self::add_param`]
/// so optimisation and checkpointing stay uniform.
pub struct SequenceModel {
    config: SequenceModelConfig,
    params: ParamStore,
    tok_emb: ParamId,
    seg_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
    lm_head: (ParamId, ParamId),
}

impl Clone for SequenceModel {
    fn clone(&self) -> Self {
        let params = self.params.clone();
        Self::bind(self.config.clone(), params).expect("layout of a valid model")
    }
}

impl std::fmt::Debug for SequenceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SequenceModel")
            .field("config", &self.config)
            .field("num_params", &self.params.num_scalars())
            .finish()
    }
}

fn layer_names(i: usize) -> [String; 12] {
    let p = format!("layers.{i}");
    [
        format!("{p}.ln1.gain"),
        format!("{p}.ln1.bias"),
        format!("{p}.attn.qkv.weight"),
        format!("{p}.attn.qkv.bias"),
        format!("{p}.attn.out.weight"),
        format!("{p}.attn.out.bias"),
        format!("{p}.ln2.gain"),
        format!("{p}.ln2.bias"),
        format!("{p}.ff1.weight"),
        format!("{p}.ff1.bias"),
        format!("{p}.ff2.weight"),
        format!("{p}.ff2.bias"),
    ]
}

impl SequenceModel {
    /// Fresh model with `N(0, init_std)` weights, unit layer-norm gains and zero biases.
    pub fn new(config: SequenceModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::InvalidArgument(format!("init_std: {e}")))?;
        let mut rand = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| normal.sample(&mut rng));
        let (d, f, v) = (config.model_dim, config.ff_dim, config.vocab_size);

        let mut ps = ParamStore::new();
        ps.add("tok_emb", rand(v, d));
        ps.add("seg_emb", rand(config.num_segments, d));
        ps.add("pos_emb", rand(config.max_positions, d));
        for i in 0..config.num_layers {
            let n = layer_names(i);
            ps.add(n[0].clone(), Matrix::ones((1, d)));
            ps.add(n[1].clone(), Matrix::zeros((1, d)));
            ps.add(n[2].clone(), rand(d, 3 * d));
            ps.add(n[3].clone(), Matrix::zeros((1, 3 * d)));
            ps.add(n[4].clone(), rand(d, d));
            ps.add(n[5].clone(), Matrix::zeros((1, d)));
            ps.add(n[6].clone(), Matrix::ones((1, d)));
            ps.add(n[7].clone(), Matrix::zeros((1, d)));
            ps.add(n[8].clone(), rand(d, f));
            ps.add(n[9].clone(), Matrix::zeros((1, f)));
            ps.add(n[10].clone(), rand(f, d));
            ps.add(n[11].clone(), Matrix::zeros((1, d)));
        }
        ps.add("final_ln.gain", Matrix::ones((1, d)));
        ps.add("final_ln.bias", Matrix::zeros((1, d)));
        ps.add("lm_head.weight", rand(d, v));
        ps.add("lm_head.bias", Matrix::zeros((1, v)));
        Self::bind(config, ps)
    }

    /// Attaches a config to an existing store, checking every tensor shape.
    pub fn bind(config: SequenceModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.model_dim, config.ff_dim, config.vocab_size);
        let lookup = |name: &str, shape: (usize, usize)| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            let got = params.get(id).dim();
            if got != shape {
                return Err(Error::Shape(format!("tensor '{name}' is {got:?}, expected {shape:?}")));
            }
            Ok(id)
        };
        let tok_emb = lookup("tok_emb", (v, d))?;
        let seg_emb = lookup("seg_emb", (config.num_segments, d))?;
        let pos_emb = lookup("pos_emb", (config.max_positions, d))?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let n = layer_names(i);
            layers.push(LayerIds {
                ln1: (lookup(&n[0], (1, d))?, lookup(&n[1], (1, d))?),
                qkv: (lookup(&n[2], (d, 3 * d))?, lookup(&n[3], (1, 3 * d))?),
                attn_out: (lookup(&n[4], (d, d))?, lookup(&n[5], (1, d))?),
                ln2: (lookup(&n[6], (1, d))?, lookup(&n[7], (1, d))?),
                ff1: (lookup(&n[8], (d, f))?, lookup(&n[9], (1, f))?),
                ff2: (lookup(&n[10], (f, d))?, lookup(&n[11], (1, d))?),
            });
        }
        let final_ln = (lookup("final_ln.gain", (1, d))?, lookup("final_ln.bias", (1, d))?);
        let lm_head = (lookup("lm_head.weight", (d, v))?, lookup("lm_head.bias", (1, v))?);
        Ok(SequenceModel {
            config,
            params,
            tok_emb,
            seg_emb,
            pos_emb,
            layers,
            final_ln,
            lm_head,
        })
    }

    pub fn config(&self) -> &SequenceModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Registers an extra tensor (for example a classifier head), or returns
    /// the existing one when a restored store already holds it.
    pub fn add_param(&mut self, name: &str, init: Matrix) -> Result<ParamId> {
        match self.params.id(name) {
            Some(id) if self.params.get(id).dim() == init.dim() => Ok(id),
            Some(id) => Err(Error::Shape(format!(
                "tensor '{name}' is {:?}, expected {:?}",
                self.params.get(id).dim(),
                init.dim()
            ))),
            None => Ok(self.params.add(name, init)),
        }
    }

    pub fn check_input(&self, tokens: &[usize], segments: &[usize], positions: &[usize]) -> Result<()> {
        let n = tokens.len();
        if segments.len() != n || positions.len() != n {
            return Err(Error::Shape(format!(
                "{n} tokens, {} segments, {} positions",
                segments.len(),
                positions.len()
            )));
        }
        if n == 0 {
            return Err(Error::Shape("empty input".into()));
        }
        if n > self.config.max_positions {
            return Err(Error::TooLong {
                len: n,
                max: self.config.max_positions,
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::TooLong {
                len: p + 1,
                max: self.config.max_positions,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {t} out of range for vocab of {}",
                self.config.vocab_size
            )));
        }
        if let Some(&s) = segments.iter().find(|&&s| s >= self.config.num_segments) {
            return Err(Error::Shape(format!("segment id {s} out of range")));
        }
        Ok(())
    }

    /// Final-layer hidden states, one `d`-row per input position.
    pub fn hidden<'p>(
        &'p self,
        g: &mut Graph<'p>,
        tokens: &[usize],
        segments: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        self.check_input(tokens, segments, positions)?;
        let p = &self.params;
        let tok = g.param(p, self.tok_emb);
        let seg = g.param(p, self.seg_emb);
        let pos = g.param(p, self.pos_emb);
        let t = g.gather(tok, tokens);
        let s = g.gather(seg, segments);
        let q = g.gather(pos, positions);
        let ts = g.add(t, s);
        let mut x = g.add(ts, q);

        let d = self.config.model_dim;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for layer in &self.layers {
            let h = self.norm(g, x, layer.ln1);
            let qkv = self.linear(g, h, layer.qkv);
            let mut heads = Vec::with_capacity(self.config.num_heads);
            for head in 0..self.config.num_heads {
                let q = g.slice_cols(qkv, head * hd, hd);
                let k = g.slice_cols(qkv, d + head * hd, hd);
                let v = g.slice_cols(qkv, 2 * d + head * hd, hd);
                let scores = g.matmul_bt(q, k);
                let scores = g.scale(scores, scale);
                let attn = g.softmax(scores, self.config.causal);
                heads.push(g.matmul(attn, v));
            }
            let ctx = g.concat_cols(&heads);
            let attn_out = self.linear(g, ctx, layer.attn_out);
            x = g.add(x, attn_out);

            let h = self.norm(g, x, layer.ln2);
            let ff = self.linear(g, h, layer.ff1);
            let ff = g.gelu(ff);
            let ff = self.linear(g, ff, layer.ff2);
            x = g.add(x, ff);
        }
        Ok(self.norm(g, x, self.final_ln))
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn lm_logits<'p>(&'p self, g: &mut Graph<'p>, hidden: Var) -> Var {
        self.linear(g, hidden, self.lm_head)
    }

    /// Per-position vocabulary logits, shape `(len, vocab_size)`.
    pub fn forward_logits(&self, tokens: &[usize], segments: &[usize], positions: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, tokens, segments, positions)?;
        let logits = self.lm_logits(&mut g, h);
        Ok(g.value(logits).clone())
    }

    pub fn linear<'p>(&'p self, g: &mut Graph<'p>, x: Var, (w, b): (ParamId, ParamId)) -> Var {
        let w = g.param(&self.params, w);
        let b = g.param(&self.params, b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm<'p>(&'p self, g: &mut Graph<'p>, x: Var, (gain, bias): (ParamId, ParamId)) -> Var {
        let gain = g.param(&self.params, gain);
        let bias = g.param(&self.params, bias);
        g.layer_norm(x, gain, bias)
    }

    /// Overwrites parameters from externally exported tensors.
    ///
    /// The import file is JSON: an object mapping tensor names (as in
    /// [`ParamStore::iter`]) to `{"rows": r, "cols": c, "data": [row-major f64]}`.
    /// Names absent from the file keep their current values; unknown names and
    /// shape mismatches are errors. Returns the number of tensors replaced.
    pub fn import_tensors(&mut self, json: &str) -> Result<usize> {
        #[derive(Deserialize)]
        struct Exported {
            rows: usize,
            cols: usize,
            data: Vec<f64>,
        }
        let map: HashMap<String, Exported> = serde_json::from_str(json)?;
        let mut staged = Vec::with_capacity(map.len());
        for (name, t) in map {
            let id = self
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{name}' in import")))?;
            let shape = self.params.get(id).dim();
            if (t.rows, t.cols) != shape || t.data.len() != t.rows * t.cols {
                return Err(Error::Shape(format!(
                    "import '{name}': {}x{} with {} values, model expects {shape:?}",
                    t.rows,
                    t.cols,
                    t.data.len()
                )));
            }
            let m = Matrix::from_shape_vec(shape, t.data).expect("length checked");
            staged.push((id, m));
        }
        let n = staged.len();
        for (id, m) in staged {
            *self.params.get_mut(id) = m;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(causal: bool) -> SequenceModel {
        SequenceModel::new(SequenceModelConfig::tiny(20, causal), 3).unwrap()
    }

    fn input(tokens: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let n = tokens.len();
        (tokens.to_vec(), vec![0; n], (0..n).collect())
    }

    #[test]
    fn logits_shape_and_normalization() {
        let m = model(true);
        let (t, s, p) = input(&[7, 8, 9, 10, 11, 12, 13]);
        let logits = m.forward_logits(&t, &s, &p).unwrap();
        assert_eq!(logits.dim(), (7, 20));
        for row in logits.rows() {
            let (probs, _) = crate::neural::softmax_row(row.iter().copied());
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_prefix_unaffected_by_future_edits() {
        let m = model(true);
        let (t, s, p) = input(&[7, 8, 9, 10, 11]);
        let base = m.forward_logits(&t, &s, &p).unwrap();
        let mut edited = t.clone();
        edited[3] = 15;
        edited[4] = 19;
        let after = m.forward_logits(&edited, &s, &p).unwrap();
        for r in 0..3 {
            assert_eq!(base.row(r), after.row(r));
        }
        assert_ne!(base.row(3), after.row(3));
    }

    #[test]
    fn bidirectional_sees_future() {
        let m = model(false);
        let (t, s, p) = input(&[7, 8, 9]);
        let base = m.forward_logits(&t, &s, &p).unwrap();
        let after = m.forward_logits(&[7, 8, 10], &s, &p).unwrap();
        assert_ne!(base.row(0), after.row(0));
    }

    #[test]
    fn deterministic_forward_and_init() {
        let (a, b) = (model(true), model(true));
        let (t, s, p) = input(&[1, 2, 3]);
        assert_eq!(a.forward_logits(&t, &s, &p).unwrap(), b.forward_logits(&t, &s, &p).unwrap());
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = model(true);
        let n = m.config().max_positions + 1;
        let (t, s, p) = input(&vec![1; n]);
        assert!(matches!(m.forward_logits(&t, &s, &p), Err(Error::TooLong { .. })));
        assert!(m.forward_logits(&[1, 2], &[0], &[0, 1]).is_err());
        assert!(m.forward_logits(&[25], &[0], &[0]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SequenceModelConfig::desk(10, true);
        c.validate().unwrap();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        assert!(SequenceModelConfig::gpt_scale(10, true).validate().is_ok());
    }

    #[test]
    fn import_hook_replaces_named_tensors() {
        let mut m = model(true);
        let json = r#"{"final_ln.bias": {"rows": 1, "cols": 32, "data": [0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5]}}"#;
        assert_eq!(m.import_tensors(json).unwrap(), 1);
        let id = m.params().id("final_ln.bias").unwrap();
        assert!(m.params().get(id).iter().all(|&v| v == 0.5));
        assert!(m.import_tensors(r#"{"nope": {"rows":1,"cols":1,"data":[0]}}"#).is_err());
        assert!(m.import_tensors(r#"{"final_ln.bias": {"rows":1,"cols":2,"data":[0,0]}}"#).is_err());
    }
}
