//! Mask-classification network: pixel encoder, transformer decoder over
//! query slots, class head and dot-product mask head.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::kv::KvDoc;
use crate::tensor::{BoundParams, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Learned free queries per frame.
    pub free_queries: usize,
    pub patch: usize,
    pub encoder_layers: usize,
    pub ffn_dim: usize,
    /// Real classes; the head has one extra no-object output.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            decoder_layers: 2,
            heads: 4,
            free_queries: 8,
            patch: 1,
            encoder_layers: 2,
            ffn_dim: 64,
            num_classes: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.free_queries == 0 {
            return bad("at least one free query is required".into());
        }
        if self.num_classes == 0 {
            return bad("at least one class is required".into());
        }
        if self.patch == 0 || self.ffn_dim == 0 || self.embed_dim == 0 {
            return bad("patch, ffn_dim and embed_dim must be positive".into());
        }
        Ok(())
    }

    pub fn no_object(&self) -> usize {
        self.num_classes
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("model.embed_dim", self.embed_dim);
        doc.set("model.decoder_layers", self.decoder_layers);
        doc.set("model.heads", self.heads);
        doc.set("model.free_queries", self.free_queries);
        doc.set("model.patch", self.patch);
        doc.set("model.encoder_layers", self.encoder_layers);
        doc.set("model.ffn_dim", self.ffn_dim);
    }

    /// Reads `model.*` keys over defaults; `num_classes` comes from the
    /// class table, not the file.
    pub fn from_kv(doc: &KvDoc, num_classes: usize) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            embed_dim: doc.get_or("model.embed_dim", d.embed_dim)?,
            decoder_layers: doc.get_or("model.decoder_layers", d.decoder_layers)?,
            heads: doc.get_or("model.heads", d.heads)?,
            free_queries: doc.get_or("model.free_queries", d.free_queries)?,
            patch: doc.get_or("model.patch", d.patch)?,
            encoder_layers: doc.get_or("model.encoder_layers", d.encoder_layers)?,
            ffn_dim: doc.get_or("model.ffn_dim", d.ffn_dim)?,
            num_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub const KEYS: &'static [&'static str] = &[
        "model.embed_dim",
        "model.decoder_layers",
        "model.heads",
        "model.free_queries",
        "model.patch",
        "model.encoder_layers",
        "model.ffn_dim",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryRole {
    Free,
    /// Propagated embedding of an identity.
    Track(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySlot {
    pub embedding: Vec<f32>,
    pub role: QueryRole,
}

/// Per-query outputs of one frame, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub roles: Vec<QueryRole>,
    /// `[queries, num_classes + 1]`
    pub class_logits: Vec<f32>,
    /// `[queries, height * width]`
    pub mask_logits: Vec<f32>,
    /// `[queries, embed_dim]`
    pub embeddings: Vec<f32>,
    pub num_labels: usize,
    pub embed_dim: usize,
    pub width: usize,
    pub height: usize,
}

impl Prediction {
    pub fn num_queries(&self) -> usize {
        self.roles.len()
    }

    pub fn class_logits_row(&self, q: usize) -> &[f32] {
        &self.class_logits[q * self.num_labels..(q + 1) * self.num_labels]
    }

    pub fn class_probs(&self, q: usize) -> Vec<f32> {
        let row = self.class_logits_row(q);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| (e / total) as f32).collect()
    }

    pub fn mask_logits_row(&self, q: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.mask_logits[q * n..(q + 1) * n]
    }

    pub fn embedding(&self, q: usize) -> &[f32] {
        &self.embeddings[q * self.embed_dim..(q + 1) * self.embed_dim]
    }
}

/// Tape handles of one frame's prediction.
#[derive(Debug, Clone, Copy)]
pub struct FrameVars {
    pub class_logits: Var,
    pub mask_logits: Var,
    pub embeddings: Var,
}

/// Pixel embeddings of one frame on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PixelFeatures {
    /// `[grid_h * grid_w, embed_dim]`
    pub embeddings: Var,
    /// Embeddings plus the fixed positional encoding; cross-attention keys and values.
    pub keyed: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ffn1: Linear,
    ffn2: Linear,
    norm3: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    patch: Linear,
    encoder: Vec<(Linear, Linear)>,
    queries: ParamId,
    decoder: Vec<DecoderLayer>,
    class_head: Linear,
    mask_head: (Linear, Linear),
}

/// Intermediate values of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub after_self: Var,
    pub after_cross: Var,
    pub out: Var,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w: Vec<f32> =
            (0..fan_in * fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        Linear {
            w: store.add(format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], w).unwrap()),
            b: store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
        }
    }

    fn norm(store: &mut ParamStore, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::new(vec![dim], vec![1.0; dim]).unwrap()),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    fn attention(&mut self, store: &mut ParamStore, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(store, &format!("{name}.q"), d, d),
            k: self.linear(store, &format!("{name}.k"), d, d),
            v: self.linear(store, &format!("{name}.v"), d, d),
            o: self.linear(store, &format!("{name}.o"), d, d),
        }
    }
}

/// 2-D sinusoidal encoding: the first half of the channels encodes the row,
/// the second half the column.
pub fn positional_encoding(grid_h: usize, grid_w: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    // Per-axis tables; each cell is the concatenation of its row and column codes.
    let table = |len: usize, channels: usize| -> Vec<f32> {
        let freqs: Vec<f64> = (0..channels)
            .map(|c| 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / channels.max(1) as f64))
            .collect();
        (0..len)
            .flat_map(|pos| {
                freqs.iter().enumerate().map(move |(c, &freq)| {
                    let angle = pos as f64 * freq;
                    (if c % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
                })
            })
            .collect()
    };
    let (rows, cols) = (table(grid_h, half), table(grid_w, dim - half));
    let mut out = Vec::with_capacity(grid_h * grid_w * dim);
    for y in 0..grid_h {
        for x in 0..grid_w {
            out.extend_from_slice(&rows[y * half..(y + 1) * half]);
            out.extend_from_slice(&cols[x * (dim - half)..(x + 1) * (dim - half)]);
        }
    }
    out
}

fn apply_linear(tape: &mut Tape, bound: &BoundParams, l: Linear, x: Var) -> Result<Var> {
    let y = tape.matmul(x, bound.var(l.w))?;
    tape.add_row(y, bound.var(l.b))
}

fn apply_norm(tape: &mut Tape, bound: &BoundParams, n: Norm, x: Var) -> Result<Var> {
    tape.layer_norm(x, bound.var(n.gamma), bound.var(n.beta), LN_EPS)
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let d = config.embed_dim;
        let patch_in = 3 * config.patch * config.patch;
        let patch = init.linear(&mut store, "encoder.patch", patch_in, d);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                (
                    init.linear(&mut store, &format!("encoder.block{i}.fc1"), d, d),
                    init.linear(&mut store, &format!("encoder.block{i}.fc2"), d, d),
                )
            })
            .collect();
        let normal = Normal::new(0.0f32, 1.0).expect("valid normal");
        let q: Vec<f32> =
            (0..config.free_queries * d).map(|_| normal.sample(&mut init.rng)).collect();
        let queries =
            store.add("queries.free", Tensor::new(vec![config.free_queries, d], q)?);
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: init.attention(&mut store, &format!("{p}.self_attn"), d),
                    norm1: Init::norm(&mut store, &format!("{p}.norm1"), d),
                    cross_attn: init.attention(&mut store, &format!("{p}.cross_attn"), d),
                    norm2: Init::norm(&mut store, &format!("{p}.norm2"), d),
                    ffn1: init.linear(&mut store, &format!("{p}.ffn1"), d, config.ffn_dim),
                    ffn2: init.linear(&mut store, &format!("{p}.ffn2"), config.ffn_dim, d),
                    norm3: Init::norm(&mut store, &format!("{p}.norm3"), d),
                }
            })
            .collect();
        let class_head = init.linear(&mut store, "head.class", d, config.num_classes + 1);
        let mask_head = (
            init.linear(&mut store, "head.mask.fc1", d, d),
            init.linear(&mut store, "head.mask.fc2", d, d),
        );
        Ok(Network {
            config,
            params: store,
            layout: Layout { patch, encoder, queries, decoder, class_head, mask_head },
        })
    }

    /// Rows of the learned free-query table.
    pub fn free_query_slots(&self) -> Vec<QuerySlot> {
        let d = self.config.embed_dim;
        self.params
            .get(self.layout.queries)
            .data()
            .chunks(d)
            .map(|row| QuerySlot { embedding: row.to_vec(), role: QueryRole::Free })
            .collect()
    }

    pub fn free_query_param(&self) -> ParamId {
        self.layout.queries
    }

    /// Parameter ids of the feed-forward block of decoder layer `layer`.
    pub fn ffn_params(&self, layer: usize) -> [ParamId; 4] {
        let l = &self.layout.decoder[layer];
        [l.ffn1.w, l.ffn1.b, l.ffn2.w, l.ffn2.b]
    }

    pub fn patch_params(&self) -> [ParamId; 2] {
        [self.layout.patch.w, self.layout.patch.b]
    }

    fn check_frame(&self, frame: &RgbImage) -> Result<(usize, usize)> {
        let (w, h) = (frame.width() as usize, frame.height() as usize);
        let p = self.config.patch;
        if w == 0 || h == 0 || w % p != 0 || h % p != 0 {
            return Err(Error::shape(
                "encode_pixels",
                format!("frame {w}x{h} not divisible by patch size {p}"),
            ));
        }
        Ok((w, h))
    }

    /// Linear patch embedding followed by residual pointwise blocks.
    pub fn encode_pixels(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        frame: &RgbImage,
    ) -> Result<PixelFeatures> {
        let (w, h) = self.check_frame(frame)?;
        let p = self.config.patch;
        let (gh, gw) = (h / p, w / p);
        let patch_len = 3 * p * p;
        let mut patches = Vec::with_capacity(gh * gw * patch_len);
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let px = frame.get_pixel((gx * p + dx) as u32, (gy * p + dy) as u32);
                        patches.extend(px.0.iter().map(|&c| c as f32 / 255.0 - 0.5));
                    }
                }
            }
        }
        let input = tape.constant(vec![gh * gw, patch_len], patches)?;
        let mut x = apply_linear(tape, bound, self.layout.patch, input)?;
        for &(fc1, fc2) in &self.layout.encoder {
            let hdn = apply_linear(tape, bound, fc1, x)?;
            let hdn = tape.gelu(hdn);
            let hdn = apply_linear(tape, bound, fc2, hdn)?;
            x = tape.add(x, hdn)?;
        }
        let pe = tape.constant(
            vec![gh * gw, self.config.embed_dim],
            positional_encoding(gh, gw, self.config.embed_dim),
        )?;
        let keyed = tape.add(x, pe)?;
        Ok(PixelFeatures { embeddings: x, keyed, grid_h: gh, grid_w: gw, height: h, width: w })
    }

    fn attention(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        a: Attention,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.embed_dim / heads;
        let q = apply_linear(tape, bound, a.q, queries)?;
        let k = apply_linear(tape, bound, a.k, keys)?;
        let v = apply_linear(tape, bound, a.v, values)?;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.narrow_cols(q, h * dh, dh)?;
            let kh = tape.narrow_cols(k, h * dh, dh)?;
            let vh = tape.narrow_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let joined = tape.concat(&outs, 1)?;
        apply_linear(tape, bound, a.o, joined)
    }

    /// One post-norm decoder layer, exposing intermediate values.
    pub fn decoder_layer(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        layer: usize,
        x: Var,
        pixels: &PixelFeatures,
    ) -> Result<LayerTrace> {
        let l = self.layout.decoder[layer];
        let sa = self.attention(tape, bound, l.self_attn, x, x, x)?;
        let x1 = tape.add(x, sa)?;
        let after_self = apply_norm(tape, bound, l.norm1, x1)?;
        let ca = self.attention(tape, bound, l.cross_attn, after_self, pixels.keyed, pixels.keyed)?;
        let x2 = tape.add(after_self, ca)?;
        let after_cross = apply_norm(tape, bound, l.norm2, x2)?;
        let f = apply_linear(tape, bound, l.ffn1, after_cross)?;
        let f = tape.gelu(f);
        let f = apply_linear(tape, bound, l.ffn2, f)?;
        let x3 = tape.add(after_cross, f)?;
        let out = apply_norm(tape, bound, l.norm3, x3)?;
        Ok(LayerTrace { after_self, after_cross, out })
    }

    /// Runs every decoder layer over a `[queries, embed_dim]` matrix.
    /// No positional information is attached to query order.
    pub fn run_decoder(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        pixels: &PixelFeatures,
        queries: Var,
    ) -> Result<Var> {
        match tape.shape(queries) {
            [n, d] if *n > 0 && *d == self.config.embed_dim => {}
            s => {
                return Err(Error::shape(
                    "run_decoder",
                    format!("queries {s:?}, expected [n>0, {}]", self.config.embed_dim),
                ))
            }
        }
        let mut x = queries;
        for layer in 0..self.layout.decoder.len() {
            x = self.decoder_layer(tape, bound, layer, x, pixels)?.out;
        }
        Ok(x)
    }

    /// Class and mask heads on decoder outputs.
    pub fn heads(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        pixels: &PixelFeatures,
        outputs: Var,
    ) -> Result<FrameVars> {
        let class_logits = apply_linear(tape, bound, self.layout.class_head, outputs)?;
        let (fc1, fc2) = self.layout.mask_head;
        let m = apply_linear(tape, bound, fc1, outputs)?;
        let m = tape.gelu(m);
        let m = apply_linear(tape, bound, fc2, m)?;
        let pix_t = tape.transpose(pixels.embeddings)?;
        let low = tape.matmul(m, pix_t)?;
        let mask_logits = if pixels.grid_h == pixels.height && pixels.grid_w == pixels.width {
            low
        } else {
            tape.upsample_bilinear(low, pixels.grid_h, pixels.grid_w, pixels.height, pixels.width)?
        };
        Ok(FrameVars { class_logits, mask_logits, embeddings: outputs })
    }

    /// Full frame forward on a tape given a query matrix.
    pub fn forward_frame(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        frame: &RgbImage,
        queries: Var,
    ) -> Result<FrameVars> {
        let pixels = self.encode_pixels(tape, bound, frame)?;
        let out = self.run_decoder(tape, bound, &pixels, queries)?;
        self.heads(tape, bound, &pixels, out)
    }

    /// Inference on one frame. Query order is preserved in the output.
    pub fn predict(&self, frame: &RgbImage, queries: &[QuerySlot]) -> Result<Prediction> {
        if queries.is_empty() {
            return Err(Error::shape("predict", "empty query list"));
        }
        let d = self.config.embed_dim;
        if let Some(bad) = queries.iter().find(|q| q.embedding.len() != d) {
            return Err(Error::shape(
                "predict",
                format!("query embedding of length {}, expected {d}", bad.embedding.len()),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let rows: Vec<f32> = queries.iter().flat_map(|q| q.embedding.iter().copied()).collect();
        let qv = tape.constant(vec![queries.len(), d], rows)?;
        let vars = self.forward_frame(&mut tape, &bound, frame, qv)?;
        let mask_logits = tape.value(vars.mask_logits).to_vec();
        if mask_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite mask logits".into()));
        }
        Ok(Prediction {
            roles: queries.iter().map(|q| q.role).collect(),
            class_logits: tape.value(vars.class_logits).to_vec(),
            mask_logits,
            embeddings: tape.value(vars.embeddings).to_vec(),
            num_labels: self.config.num_classes + 1,
            embed_dim: d,
            width: frame.width() as usize,
            height: frame.height() as usize,
        })
    }
}
