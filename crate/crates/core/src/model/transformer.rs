use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{patchify, positional_encoding, ModelConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Affine,
    down: Affine,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    ln_attn: Norm,
    attn: Attention,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ff: Norm,
    ff: FeedForward,
}

/// Positions of every named parameter inside the model's [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamLayout {
    enc_embed: Affine,
    enc: Vec<EncoderBlock>,
    enc_norm: Norm,
    dec_embed: Affine,
    dec: Vec<DecoderBlock>,
    dec_norm: Norm,
    head: Affine,
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    /// Xavier-uniform weight `[fan_in x fan_out]` and zero bias.
    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Affine {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..a)).collect();
        let w = self
            .store
            .push(format!("{name}.w"), Tensor::from_f64(&[fan_in, fan_out], &data).expect("sized"));
        let b = self.store.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Affine { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.store.push(format!("{name}.g"), Tensor::full(&[d], T::ONE));
        let b = self.store.push(format!("{name}.b"), Tensor::zeros(&[d]));
        Norm { g, b }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.affine(&format!("{name}.q"), d, d),
            k: self.affine(&format!("{name}.k"), d, d),
            v: self.affine(&format!("{name}.v"), d, d),
            o: self.affine(&format!("{name}.o"), d, d),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.affine(&format!("{name}.up"), d, d_ff),
            down: self.affine(&format!("{name}.down"), d_ff, d),
        }
    }
}

fn build<T: Scalar>(cfg: &ModelConfig, tok: &dyn Tokenizer, seed: u64) -> (ParamStore<T>, ParamLayout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    let token_in = tok.width() * cfg.channels;
    let enc_embed = b.affine("enc.embed", token_in, d);
    let enc = (0..cfg.n_enc_layers)
        .map(|i| EncoderBlock {
            ln_attn: b.norm(&format!("enc.{i}.ln_attn"), d),
            attn: b.attention(&format!("enc.{i}.attn"), d),
            ln_ff: b.norm(&format!("enc.{i}.ln_ff"), d),
            ff: b.feed_forward(&format!("enc.{i}.ff"), d, ff),
        })
        .collect();
    let enc_norm = b.norm("enc.norm", d);
    let dec_embed = b.affine("dec.embed", token_in, d);
    let dec = (0..cfg.n_dec_layers)
        .map(|i| DecoderBlock {
            ln_self: b.norm(&format!("dec.{i}.ln_self"), d),
            self_attn: b.attention(&format!("dec.{i}.self_attn"), d),
            ln_cross: b.norm(&format!("dec.{i}.ln_cross"), d),
            cross_attn: b.attention(&format!("dec.{i}.cross_attn"), d),
            ln_ff: b.norm(&format!("dec.{i}.ln_ff"), d),
            ff: b.feed_forward(&format!("dec.{i}.ff"), d, ff),
        })
        .collect();
    let dec_norm = b.norm("dec.norm", d);
    let head = b.affine("head", d, tok.width());
    let layout = ParamLayout {
        enc_embed,
        enc,
        enc_norm,
        dec_embed,
        dec,
        dec_norm,
        head,
    };
    (b.store, layout)
}

/// Parameters plus the structure needed to run them.
#[derive(Debug)]
pub struct Model<T> {
    config: ModelConfig,
    tokenizer: Box<dyn Tokenizer>,
    layout: ParamLayout,
    pub params: ParamStore<T>,
    starts: Vec<usize>,
    pos: Tensor<T>,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone()).expect("valid model")
    }
}

/// Optional dropout randomness; `None` runs the deterministic forward.
type TrainRng<'a> = Option<&'a mut ChaCha8Rng>;

impl<T: Scalar> Model<T> {
    /// A freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tokenizer = config.tokenizer()?;
        let (params, layout) = build(&config, tokenizer.as_ref(), seed);
        Ok(Self::assemble(config, tokenizer, layout, params))
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let tokenizer = config.tokenizer()?;
        let (template, layout) = build::<T>(&config, tokenizer.as_ref(), 0);
        if template.names() != params.names() {
            return Err(Error::Config("parameter names do not match the model config".into()));
        }
        for i in 0..params.len() {
            if template.value(i).shape() != params.value(i).shape() {
                return Err(Error::shape(
                    "load parameters",
                    template.value(i).shape(),
                    params.value(i).shape(),
                ));
            }
        }
        Ok(Self::assemble(config, tokenizer, layout, params))
    }

    fn assemble(config: ModelConfig, tokenizer: Box<dyn Tokenizer>, layout: ParamLayout, params: ParamStore<T>) -> Self {
        let starts = tokenizer.starts();
        let pos = Tensor::from_f64(
            &[starts.len(), config.d_model],
            &positional_encoding(starts.len(), config.d_model),
        )
        .expect("sized");
        Self {
            config,
            tokenizer,
            layout,
            params,
            starts,
            pos,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn n_tokens(&self) -> usize {
        self.starts.len()
    }

    pub fn seq_len(&self) -> usize {
        self.tokenizer.seq_len()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model::from_params(self.config.clone(), self.params.cast()).expect("same config")
    }

    /// Puts the parameters on `tape`, as gradient-receiving variables when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        if trainable {
            tape.bind_params(&self.params)
        } else {
            (0..self.params.len())
                .map(|i| tape.constant(self.params.value(i).clone()))
                .collect()
        }
    }

    fn drop(&self, tape: &mut Tape<T>, x: Var, rng: &mut TrainRng<'_>) -> Result<Var> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => tape.dropout(x, self.config.dropout, *r),
            _ => Ok(x),
        }
    }

    fn affine(&self, tape: &mut Tape<T>, p: &[Var], a: Affine, x: Var) -> Result<Var> {
        tape.linear(x, p[a.w], Some(p[a.b]))
    }

    fn norm(&self, tape: &mut Tape<T>, p: &[Var], n: Norm, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[n.g], p[n.b], 1, LN_EPS)
    }

    fn attention(&self, tape: &mut Tape<T>, p: &[Var], a: Attention, x: Var, ctx: Var) -> Result<Var> {
        let q = self.affine(tape, p, a.q, x)?;
        let k = self.affine(tape, p, a.k, ctx)?;
        let v = self.affine(tape, p, a.v, ctx)?;
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let out = if h == 1 {
            tape.scaled_dot_attention(q, k, v, scale)?
        } else {
            let mut heads = Vec::with_capacity(h);
            for i in 0..h {
                let (a, b) = (i * dh, (i + 1) * dh);
                let qi = tape.slice(q, 1, a, b)?;
                let ki = tape.slice(k, 1, a, b)?;
                let vi = tape.slice(v, 1, a, b)?;
                heads.push(tape.scaled_dot_attention(qi, ki, vi, scale)?);
            }
            tape.concat(&heads, 1)?
        };
        self.affine(tape, p, a.o, out)
    }

    fn feed_forward(&self, tape: &mut Tape<T>, p: &[Var], f: FeedForward, x: Var, rng: &mut TrainRng<'_>) -> Result<Var> {
        let h = self.affine(tape, p, f.up, x)?;
        let h = tape.gelu(h);
        let h = self.drop(tape, h, rng)?;
        self.affine(tape, p, f.down, h)
    }

    fn embed(&self, tape: &mut Tape<T>, p: &[Var], a: Affine, seq: &[T], rng: &mut TrainRng<'_>) -> Result<Var> {
        let patches = patchify(seq, self.config.channels, self.tokenizer.as_ref())?;
        let x = tape.constant(patches);
        let tokens = self.affine(tape, p, a, x)?;
        let pos = tape.constant(self.pos.clone());
        let x = tape.add(tokens, pos)?;
        self.drop(tape, x, rng)
    }

    /// Latent state `[n_tokens x d_model]` of an encoder window `[l x D]`.
    pub fn encode(&self, tape: &mut Tape<T>, p: &[Var], x_enc: &[T], mut rng: TrainRng<'_>) -> Result<Var> {
        let lay = &self.layout;
        let mut x = self.embed(tape, p, lay.enc_embed, x_enc, &mut rng)?;
        for blk in &lay.enc {
            let h = self.norm(tape, p, blk.ln_attn, x)?;
            let h = self.attention(tape, p, blk.attn, h, h)?;
            let h = self.drop(tape, h, &mut rng)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, p, blk.ln_ff, x)?;
            let h = self.feed_forward(tape, p, blk.ff, h, &mut rng)?;
            let h = self.drop(tape, h, &mut rng)?;
            x = tape.add(x, h)?;
        }
        self.norm(tape, p, lay.enc_norm, x)
    }

    /// Reconstructed target channel `[l x 1]` for decoder input `x_dec`
    /// conditioned on latent `z`.
    pub fn decode(&self, tape: &mut Tape<T>, p: &[Var], x_dec: &[T], z: Var, mut rng: TrainRng<'_>) -> Result<Var> {
        let want = [self.n_tokens(), self.config.d_model];
        if tape.shape(z) != want {
            return Err(Error::shape("decode(latent)", tape.shape(z), &want));
        }
        let lay = &self.layout;
        let mut x = self.embed(tape, p, lay.dec_embed, x_dec, &mut rng)?;
        for blk in &lay.dec {
            let h = self.norm(tape, p, blk.ln_self, x)?;
            let h = self.attention(tape, p, blk.self_attn, h, h)?;
            let h = self.drop(tape, h, &mut rng)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, p, blk.ln_cross, x)?;
            let h = self.attention(tape, p, blk.cross_attn, h, z)?;
            let h = self.drop(tape, h, &mut rng)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, p, blk.ln_ff, x)?;
            let h = self.feed_forward(tape, p, blk.ff, h, &mut rng)?;
            let h = self.drop(tape, h, &mut rng)?;
            x = tape.add(x, h)?;
        }
        let x = self.norm(tape, p, lay.dec_norm, x)?;
        let per_token = self.affine(tape, p, lay.head, x)?;
        tape.overlap_average(per_token, &self.starts, self.seq_len())
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], x_enc: &[T], x_dec: &[T], mut rng: TrainRng<'_>) -> Result<Var> {
        let z = self.encode(tape, p, x_enc, rng.as_deref_mut())?;
        self.decode(tape, p, x_dec, z, rng)
    }

    /// Masked MSE of one sample with trainable parameters bound on `tape`.
    pub fn sample_loss(
        &self,
        tape: &mut Tape<T>,
        x_enc: &[T],
        x_dec: &[T],
        y: &[T],
        mask: Option<&[T]>,
        rng: TrainRng<'_>,
    ) -> Result<Var> {
        let p = self.bind(tape, true);
        let pred = self.forward(tape, &p, x_enc, x_dec, rng)?;
        tape.mse_loss(pred, y, mask)
    }

    /// Inference: `[l]` predictions.
    pub fn predict(&self, x_enc: &[T], x_dec: &[T]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, x_enc, x_dec, None)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn latent(&self, x_enc: &[T]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let z = self.encode(&mut tape, &p, x_enc, None)?;
        Ok(tape.value(z).clone())
    }

    /// Token embeddings plus position encoding of one window, as fed to the
    /// first encoder (`decoder == false`) or decoder block.
    pub fn embed_tokens(&self, seq: &[T], decoder: bool) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let a = if decoder { self.layout.dec_embed } else { self.layout.enc_embed };
        let x = self.embed(&mut tape, &p, a, seq, &mut None)?;
        Ok(tape.value(x).clone())
    }

    /// Decodes every window in `x_decs` against one latent state.
    pub fn decode_latent(&self, z: &Tensor<T>, x_decs: &[&[T]]) -> Result<Vec<Vec<T>>> {
        x_decs
            .iter()
            .map(|x| {
                let mut tape = Tape::new();
                let p = self.bind(&mut tape, false);
                let zv = tape.constant(z.clone());
                let out = self.decode(&mut tape, &p, x, zv, None)?;
                Ok(tape.value(out).data().to_vec())
            })
            .collect()
    }
}
