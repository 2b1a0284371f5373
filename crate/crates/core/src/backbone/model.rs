//! U-shaped ViT noise predictor.
//!
//! Wiring, for image-branch blocks `1..=D` with `half = D / 2`:
//!
//! ```text
//! image ─ patchify ─ linear ─┐
//! t ─ sinusoid ─ MLP ────────┴─ [time, patches] + pos ─ block 1 … block D ─ norm ─ head ─ unpatchify
//! text ─ linear ─ text blocks ─┘ (joined at joint blocks only)
//! ```
//!
//! The output of block `i <= half` (time and image tokens only) is
//! concatenated channel-wise with the input of block `D + 1 - i` and merged
//! back to width `d` by a linear map. Joint blocks either splice text tokens
//! into the sequence (`[time, text, image]`) or add image-to-text attention
//! computed with the block's own projections to the self-attention result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, RngState, Tape, Tensor, Var};

use super::config::{Conditioning, ModelConfig};
use super::record::{AttentionKind, AttentionRecord, TokenPartition};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Image,
    Text,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub branch: Branch,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct NamedParam<F: Real> {
    pub name: String,
    pub branch: Branch,
    pub value: Tensor<F>,
}

#[derive(Clone, Copy, Debug)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    norm1: NormIdx,
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    o: LinearIdx,
    norm2: NormIdx,
    fc1: LinearIdx,
    fc2: LinearIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    patch: LinearIdx,
    pos: usize,
    time1: LinearIdx,
    time2: LinearIdx,
    text_proj: LinearIdx,
    text_blocks: Vec<BlockIdx>,
    blocks: Vec<BlockIdx>,
    skips: Vec<LinearIdx>,
    final_norm: NormIdx,
    head: LinearIdx,
}

struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn add(&mut self, name: String, branch: Branch, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            branch,
            shape,
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, branch: Branch, din: usize, dout: usize, init: Init) -> LinearIdx {
        let w = self.add(format!("{prefix}.weight"), branch, vec![din, dout], init);
        let b = self.add(format!("{prefix}.bias"), branch, vec![dout], Init::Zeros);
        LinearIdx { w, b }
    }

    fn norm(&mut self, prefix: &str, branch: Branch, d: usize) -> NormIdx {
        let gain = self.add(format!("{prefix}.gain"), branch, vec![d], Init::Ones);
        let bias = self.add(format!("{prefix}.bias"), branch, vec![d], Init::Zeros);
        NormIdx { gain, bias }
    }

    fn block(&mut self, prefix: &str, branch: Branch, d: usize, hidden: usize) -> BlockIdx {
        let tn = Init::TruncNormal;
        BlockIdx {
            norm1: self.norm(&format!("{prefix}.norm1"), branch, d),
            q: self.linear(&format!("{prefix}.attn.q"), branch, d, d, tn),
            k: self.linear(&format!("{prefix}.attn.k"), branch, d, d, tn),
            v: self.linear(&format!("{prefix}.attn.v"), branch, d, d, tn),
            o: self.linear(&format!("{prefix}.attn.o"), branch, d, d, tn),
            norm2: self.norm(&format!("{prefix}.norm2"), branch, d),
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), branch, d, hidden, tn),
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), branch, hidden, d, tn),
        }
    }
}

fn layout_for(config: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let tn = Init::TruncNormal;
    let mut sb = SpecBuilder { specs: Vec::new() };

    let patch = sb.linear("patch_embed", Branch::Image, config.patch_dim(), d, tn);
    let pos = sb.add(
        "pos_embed".into(),
        Branch::Image,
        vec![config.image_stream_len(), d],
        tn,
    );
    let time1 = sb.linear("time_mlp.0", Branch::Shared, d, d, tn);
    let time2 = sb.linear("time_mlp.2", Branch::Shared, d, d, tn);
    let text_proj = sb.linear("text_proj", Branch::Text, config.text_in_dim, d, tn);
    let text_blocks = (0..config.n_text)
        .map(|i| sb.block(&format!("text_blocks.{i}"), Branch::Text, d, hidden))
        .collect();
    let blocks = (1..=config.depth)
        .map(|i| sb.block(&format!("blocks.{i}"), Branch::Image, d, hidden))
        .collect();
    let skips = (0..config.n_skips())
        .map(|i| sb.linear(&format!("skips.{i}"), Branch::Image, 2 * d, d, tn))
        .collect();
    let final_norm = sb.norm("final_norm", Branch::Image, d);
    let head = sb.linear("head", Branch::Image, d, config.patch_dim(), Init::Zeros);

    let layout = Layout {
        patch,
        pos,
        time1,
        time2,
        text_proj,
        text_blocks,
        blocks,
        skips,
        final_norm,
        head,
    };
    (sb.specs, layout)
}

/// Parameter manifest for `config`, in registration order, without
/// allocating any tensors.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    layout_for(config).0
}

#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    config: ModelConfig,
    params: Vec<NamedParam<F>>,
    layout: Layout,
}

/// Allocates and initializes every parameter: truncated normal (std 0.02)
/// weights, zero biases, unit norm gains, and a zero output head.
pub fn build_model<F: Real>(config: &ModelConfig, rng: &mut RngState) -> Result<Model<F>> {
    config.validate()?;
    let (specs, layout) = layout_for(config);
    let params = specs
        .into_iter()
        .map(|spec| {
            let value = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, F::one()),
                Init::TruncNormal => Tensor::from_fn(&spec.shape, |_| {
                    F::from_f64_lossy(rng.truncated_normal(INIT_STD))
                }),
            };
            NamedParam {
                name: spec.name,
                branch: spec.branch,
                value,
            }
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        params,
        layout,
    })
}

struct Captured<F> {
    self_probs: Option<Tensor<F>>,
    cross_probs: Option<Tensor<F>>,
}

impl<F: Real> Model<F> {
    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against the manifest for `config`.
    pub fn from_params(config: &ModelConfig, params: Vec<NamedParam<F>>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = layout_for(config);
        if specs.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(&params) {
            if spec.name != p.name || spec.shape != p.value.shape() || spec.branch != p.branch {
                return Err(Error::Data(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(Model {
            config: config.clone(),
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&NamedParam<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut NamedParam<F>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn count_branch(&self, branch: Branch) -> usize {
        self.params
            .iter()
            .filter(|p| p.branch == branch)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    branch: p.branch,
                    value: p.value.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Places every parameter on `tape`, tracked when `trainable`.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Predicted noise for `x_t` (`[B, C, S, S]`) at timesteps `t` given
    /// text features `text` (`[B, L_txt, d_txt]`, already on the tape).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x_t: &Tensor<F>,
        t: &[usize],
        text: Var,
        capture: bool,
    ) -> Result<(Var, Vec<AttentionRecord>)> {
        let c = &self.config;
        let batch = x_t.shape().first().copied().unwrap_or(0);
        let expect = [batch, c.img_channels, c.img_size, c.img_size];
        if batch == 0 || x_t.shape() != expect {
            return Err(Error::dim("forward image", x_t.shape(), &expect));
        }
        if t.len() != batch {
            return Err(Error::dim("forward timesteps", &[t.len()], &[batch]));
        }
        let text_expect = [batch, c.text_len, c.text_in_dim];
        if tape.shape(text) != text_expect {
            return Err(Error::dim("forward text", tape.shape(text), &text_expect));
        }
        if vars.len() != self.params.len() {
            return Err(Error::dim("forward params", &[vars.len()], &[self.params.len()]));
        }

        let l = &self.layout;
        let n = c.n_patches();
        let lt = c.text_len;
        let half = c.n_skips();
        let mut records = Vec::new();

        let patches = tape.constant(patchify(x_t, c.patch_size)?);
        let tokens = self.linear(tape, vars, patches, l.patch)?;
        let temb = tape.constant(timestep_embedding(t, c.embed_dim));
        let th = self.linear(tape, vars, temb, l.time1)?;
        let th = tape.gelu(th);
        let time_tok = self.linear(tape, vars, th, l.time2)?;
        let x = tape.concat(&[time_tok, tokens], 1)?;
        let mut x = tape.add_broadcast(x, vars[l.pos])?;

        let mut txt = self.linear(tape, vars, text, l.text_proj)?;
        for blk in &l.text_blocks {
            txt = self.block(tape, vars, blk, txt, None, false)?.0;
        }

        let mut skips: Vec<Var> = Vec::with_capacity(half);
        for (i, blk) in (1..=c.depth).zip(&l.blocks) {
            if i > c.depth - half {
                let skip = skips.pop().expect("skip pushed by mirrored block");
                let merged = tape.concat(&[x, skip], 2)?;
                x = self.linear(tape, vars, merged, l.skips[i - (c.depth - half) - 1])?;
            }
            let joint = c.is_joint(i);
            match (joint, c.conditioning) {
                (true, Conditioning::Concat) => {
                    let time = tape.narrow(x, 1, 0, 1)?;
                    let img = tape.narrow(x, 1, 1, n)?;
                    let seq = tape.concat(&[time, txt, img], 1)?;
                    let (out, cap) = self.block(tape, vars, blk, seq, None, capture)?;
                    let time = tape.narrow(out, 1, 0, 1)?;
                    txt = tape.narrow(out, 1, 1, lt)?;
                    let img = tape.narrow(out, 1, 1 + lt, n)?;
                    x = tape.concat(&[time, img], 1)?;
                    if let Some(p) = cap.self_probs {
                        let part = TokenPartition::time_text_image(lt, c.grid_side());
                        records.push(record(i, AttentionKind::SelfAttn, &p, part.clone(), part));
                    }
                }
                (true, Conditioning::CrossAttn) => {
                    let (out, cap) = self.block(tape, vars, blk, x, Some(txt), capture)?;
                    x = out;
                    let part = TokenPartition::time_image(c.grid_side());
                    if let Some(p) = cap.self_probs {
                        records.push(record(i, AttentionKind::SelfAttn, &p, part.clone(), part.clone()));
                    }
                    if let Some(p) = cap.cross_probs {
                        records.push(record(i, AttentionKind::Cross, &p, part, TokenPartition::text_only(lt)));
                    }
                }
                (false, _) => {
                    let (out, cap) = self.block(tape, vars, blk, x, None, capture)?;
                    x = out;
                    if let Some(p) = cap.self_probs {
                        let part = TokenPartition::time_image(c.grid_side());
                        records.push(record(i, AttentionKind::SelfAttn, &p, part.clone(), part));
                    }
                }
            }
            if i <= half {
                skips.push(x);
            }
        }

        let x = tape.layer_norm(x, vars[l.final_norm.gain], vars[l.final_norm.bias])?;
        let img = tape.narrow(x, 1, 1, n)?;
        let out = self.linear(tape, vars, img, l.head)?;
        let out = tape.permute(out, unpatchify_index(c, batch), &expect)?;
        Ok((out, records))
    }

    /// Forward pass with frozen parameters.
    pub fn forward(
        &self,
        x_t: &Tensor<F>,
        t: &[usize],
        text: &Tensor<F>,
        capture: bool,
    ) -> Result<(Tensor<F>, Vec<AttentionRecord>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let text = tape.constant(text.clone());
        let (out, records) = self.forward_on_tape(&mut tape, &vars, x_t, t, text, capture)?;
        Ok((tape.value(out).clone(), records))
    }

    fn linear(&self, tape: &mut Tape<F>, vars: &[Var], x: Var, idx: LinearIdx) -> Result<Var> {
        tape.linear(x, vars[idx.w], Some(vars[idx.b]))
    }

    /// Pre-norm transformer block. With `cross_text`, image-to-text
    /// attention (same projections) is added to the self-attention mix
    /// before the output projection.
    fn block(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        blk: &BlockIdx,
        x: Var,
        cross_text: Option<Var>,
        capture: bool,
    ) -> Result<(Var, Captured<F>)> {
        let heads = self.config.heads;
        let h = tape.layer_norm(x, vars[blk.norm1.gain], vars[blk.norm1.bias])?;
        let q = self.linear(tape, vars, h, blk.q)?;
        let k = self.linear(tape, vars, h, blk.k)?;
        let v = self.linear(tape, vars, h, blk.v)?;
        let mut mixed = tape.attention(q, k, v, heads)?;
        let mut cap = Captured {
            self_probs: capture.then(|| tape.attention_probs(mixed)).flatten(),
            cross_probs: None,
        };
        if let Some(txt) = cross_text {
            let ht = tape.layer_norm(txt, vars[blk.norm1.gain], vars[blk.norm1.bias])?;
            let kt = self.linear(tape, vars, ht, blk.k)?;
            let vt = self.linear(tape, vars, ht, blk.v)?;
            let cross = tape.attention(q, kt, vt, heads)?;
            if capture {
                cap.cross_probs = tape.attention_probs(cross);
            }
            mixed = tape.add(mixed, cross)?;
        }
        let attn_out = self.linear(tape, vars, mixed, blk.o)?;
        let x = tape.add(x, attn_out)?;
        let h = tape.layer_norm(x, vars[blk.norm2.gain], vars[blk.norm2.bias])?;
        let f = self.linear(tape, vars, h, blk.fc1)?;
        let f = tape.gelu(f);
        let f = self.linear(tape, vars, f, blk.fc2)?;
        Ok((tape.add(x, f)?, cap))
    }
}

/// Batch-averaged `[heads, Lq, Lk]` record from `[B, heads, Lq, Lk]` weights.
fn record<F: Real>(
    layer_index: usize,
    kind: AttentionKind,
    probs: &Tensor<F>,
    queries: TokenPartition,
    keys: TokenPartition,
) -> AttentionRecord {
    let s = probs.shape();
    let (batch, per) = (s[0], s[1] * s[2] * s[3]);
    let mut acc = vec![0.0f64; per];
    for item in probs.data().chunks(per) {
        for (a, v) in acc.iter_mut().zip(item) {
            *a += v.as_f64();
        }
    }
    for a in acc.iter_mut() {
        *a /= batch as f64;
    }
    AttentionRecord {
        layer_index,
        kind,
        matrix: Tensor::new(vec![s[1], s[2], s[3]], acc).expect("record shape"),
        queries,
        keys,
        timesteps: 1,
    }
}

/// `[B, C, S, S]` image to `[B, (S/p)^2, p*p*C]` patch rows, patch vectors
/// ordered `(row-in-patch, col-in-patch, channel)`.
pub fn patchify<F: Real>(x: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() != 4 || s[2] != s[3] || p == 0 || s[2] % p != 0 {
        return Err(Error::dim("patchify", s, &[p]));
    }
    let (b, c, size) = (s[0], s[1], s[2]);
    let g = size / p;
    let pd = p * p * c;
    let mut out = vec![F::zero(); x.numel()];
    let src = x.data();
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..size {
                for xx in 0..size {
                    let n = (y / p) * g + xx / p;
                    let within = ((y % p) * p + xx % p) * c + ci;
                    out[(bi * g * g + n) * pd + within] = src[((bi * c + ci) * size + y) * size + xx];
                }
            }
        }
    }
    Tensor::new(vec![b, g * g, pd], out)
}

/// For each element of the `[B, C, S, S]` output, its source position in
/// the `[B, N, p*p*C]` head output.
fn unpatchify_index(c: &ModelConfig, batch: usize) -> Vec<usize> {
    let (p, ch, size, g) = (c.patch_size, c.img_channels, c.img_size, c.grid_side());
    let pd = c.patch_dim();
    let mut index = Vec::with_capacity(batch * ch * size * size);
    for bi in 0..batch {
        for ci in 0..ch {
            for y in 0..size {
                for xx in 0..size {
                    let n = (y / p) * g + xx / p;
                    let within = ((y % p) * p + xx % p) * ch + ci;
                    index.push((bi * g * g + n) * pd + within);
                }
            }
        }
    }
    index
}

/// Sinusoidal timestep features `[B, 1, dim]`: cosines then sines over
/// geometrically spaced frequencies.
pub fn timestep_embedding<F: Real>(t: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); t.len() * dim];
    for (row, &step) in out.chunks_mut(dim).zip(t) {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            row[i] = F::from_f64_lossy(arg.cos());
            row[half + i] = F::from_f64_lossy(arg.sin());
        }
    }
    Tensor::new(vec![t.len(), 1, dim], out).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::config::Fusion;

    fn tiny(fusion: Fusion, conditioning: Conditioning) -> ModelConfig {
        let (n_image, n_text) = match fusion {
            Fusion::Early => (0, 0),
            Fusion::Intermediate => (1, 1),
        };
        ModelConfig {
            fusion,
            conditioning,
            depth: 5,
            n_image,
            n_text,
            embed_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 2,
            img_channels: 3,
            img_size: 8,
            text_len: 3,
            text_in_dim: 6,
            vocab_size: 17,
        }
    }

    #[test]
    fn patchify_inverts_unpatchify() {
        let c = tiny(Fusion::Early, Conditioning::Concat);
        let x = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |i| i as f64);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[2, 16, 12]);
        let index = unpatchify_index(&c, 2);
        let back: Vec<f64> = index.iter().map(|&i| p.data()[i]).collect();
        assert_eq!(back, x.data());
    }

    #[test]
    fn output_shape_matches_input_for_all_settings() {
        for f in [Fusion::Early, Fusion::Intermediate] {
            for cond in [Conditioning::Concat, Conditioning::CrossAttn] {
                let c = tiny(f, cond);
                let m: Model<f32> = build_model(&c, &mut RngState::new(1)).unwrap();
                let x = Tensor::full(&[1, 3, 8, 8], 0.1);
                let text = Tensor::full(&[1, 3, 6], 0.2);
                let (out, rec) = m.forward(&x, &[5], &text, false).unwrap();
                assert_eq!(out.shape(), x.shape());
                assert!(rec.is_empty());
            }
        }
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let c = tiny(Fusion::Intermediate, Conditioning::CrossAttn);
        let m: Model<f64> = build_model(&c, &mut RngState::new(2)).unwrap();
        let x = Tensor::full(&[2, 3, 8, 8], 0.3);
        let text = Tensor::full(&[2, 3, 6], -0.4);
        let (out, _) = m.forward(&x, &[1, 7], &text, false).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_are_reported() {
        let c = tiny(Fusion::Early, Conditioning::Concat);
        let m: Model<f32> = build_model(&c, &mut RngState::new(1)).unwrap();
        let x = Tensor::full(&[1, 3, 8, 8], 0.0);
        let bad_text = Tensor::full(&[1, 4, 6], 0.0);
        assert!(matches!(
            m.forward(&x, &[1], &bad_text, false),
            Err(Error::Dimension { .. })
        ));
        let text = Tensor::full(&[1, 3, 6], 0.0);
        assert!(m.forward(&x, &[1, 2], &text, false).is_err());
        let bad_x = Tensor::full(&[1, 3, 6, 6], 0.0);
        assert!(m.forward(&bad_x, &[1], &text, false).is_err());
    }

    #[test]
    fn every_param_has_one_branch_and_unique_name() {
        let c = tiny(Fusion::Intermediate, Conditioning::Concat);
        let specs = param_specs(&c);
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
    }

    #[test]
    fn timestep_embedding_is_bounded() {
        let e: Tensor<f64> = timestep_embedding(&[0, 999], 8);
        assert_eq!(&e.data()[..4], &[1.0; 4]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
    }
}
