//! Cross-channel attention across the four encoder scales.
//!
//! Each scale `Y_t` is brought to the coarsest grid by a strided
//! convolution and flattened into `s` tokens of width `C` (plus a learned
//! positional embedding). The four sequences are concatenated channel-wise
//! into a `4C`-wide pool that supplies keys and values; every scale issues
//! its own queries.
//!
//! Attention runs across feature channels rather than tokens: per head the
//! logits are `Q_hᵀ K_h / (2√C)`, a `d_h × d_h` matrix squashed by an
//! elementwise sigmoid, and the head output is `V_h A_hᵀ` (`s × d_h`). Heads
//! are averaged and mapped back to width `C` by an output projection, then
//! refined by a residual MLP. After the last block each sequence is folded
//! back into a map, upsampled to its scale and added onto `Y_t`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hourglass::PyramidFeatures;
use crate::layers::{BatchNorm2d, Conv2d, Forward, Init, LayerNorm, Linear};
use crate::numerics::{init, ParamId, ParamStore, Tape, Tensor, Var};

pub const SCALES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CcaConfig {
    pub heads: usize,
    /// Number of stacked attention + MLP blocks.
    pub depth: usize,
    pub head_dim: usize,
}

impl CcaConfig {
    /// Four heads, three blocks, head width equal to the channel count.
    pub fn with_channels(channels: usize) -> Self {
        Self {
            heads: 4,
            depth: 3,
            head_dim: channels,
        }
    }

    pub fn projection_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.depth == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!(
                "attention heads, depth and head width must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One scale's token rows, `[N, s, C]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub scale: usize,
}

/// Channel-wise concatenation of all scales, `[N, s, 4C]`.
#[derive(Clone, Copy, Debug)]
pub struct ConcatSequence {
    pub tokens: Var,
}

/// Queries for one scale and the shared keys and values, split per head.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct CcaBlock {
    pub ln_q: Vec<LayerNorm>,
    pub wq: Vec<ParamId>,
    pub ln_kv: LayerNorm,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: Vec<ParamId>,
    pub ln_mlp: Vec<LayerNorm>,
    pub fc1: Vec<Linear>,
    pub fc2: Vec<Linear>,
}

#[derive(Clone, Debug)]
struct Reconstruction {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct CrossChannelAttention {
    pub cfg: CcaConfig,
    pub channels: usize,
    /// Token grid `(rows, cols)`, i.e. the coarsest scale's extent.
    pub grid: (usize, usize),
    pub dropout: f64,
    tokenizers: Vec<Conv2d>,
    pos: Vec<ParamId>,
    pub blocks: Vec<CcaBlock>,
    recon: Vec<Reconstruction>,
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize, head_dim: usize) -> Result<Vec<Var>> {
    (0..heads)
        .map(|h| tape.slice_last(x, h * head_dim, head_dim))
        .collect()
}

/// Channel-wise concatenation in scale order.
pub fn concat_scales(tape: &mut Tape, z: &[TokenSequence]) -> Result<ConcatSequence> {
    if z.len() != SCALES {
        return Err(Error::Contract(format!(
            "expected {SCALES} scales, got {}",
            z.len()
        )));
    }
    let tokens: Vec<Var> = z.iter().map(|t| t.tokens).collect();
    Ok(ConcatSequence {
        tokens: tape.concat_last(&tokens)?,
    })
}

/// Sigmoid cross-channel attention averaged over heads: `[N, s, d_h]`.
///
/// Per head `A = σ(Qᵀ K / (2√C))` and the contribution is `V Aᵀ`, i.e.
/// `(A Vᵀ)ᵀ`, so the token axis is preserved.
pub fn cross_channel_attention(
    tape: &mut Tape,
    heads: &HeadProjections,
    channels: usize,
) -> Result<Var> {
    let n_heads = heads.q.len();
    if n_heads == 0 || heads.k.len() != n_heads || heads.v.len() != n_heads {
        return Err(Error::Contract("query/key/value head counts differ".into()));
    }
    let temperature = 1.0 / (2.0 * (channels as f64).sqrt());
    let mut outputs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let logits = tape.bmm(heads.q[h], heads.k[h], true, false)?;
        if !tape.value(logits).is_finite() {
            return Err(Error::NonFinite("cross-channel attention logits".into()));
        }
        let logits = tape.scale(logits, temperature);
        let attn = tape.sigmoid(logits);
        outputs.push(tape.bmm(heads.v[h], attn, false, true)?);
    }
    let total = tape.add_all(&outputs)?;
    Ok(tape.scale(total, 1.0 / n_heads as f64))
}

impl CcaBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &CcaConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = channels;
        let p = cfg.projection_width();
        let mut block = Self {
            ln_q: Vec::new(),
            wq: Vec::new(),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), SCALES * c)?,
            wk: store.add(
                format!("{name}.wk"),
                init::lecun_normal(&[SCALES * c, p], SCALES * c, rng),
            )?,
            wv: store.add(
                format!("{name}.wv"),
                init::lecun_normal(&[SCALES * c, p], SCALES * c, rng),
            )?,
            wo: Vec::new(),
            ln_mlp: Vec::new(),
            fc1: Vec::new(),
            fc2: Vec::new(),
        };
        for t in 0..SCALES {
            block
                .ln_q
                .push(LayerNorm::new(store, &format!("{name}.ln_q{t}"), c)?);
            block
                .wq
                .push(store.add(format!("{name}.wq{t}"), init::lecun_normal(&[c, p], c, rng))?);
            block.wo.push(store.add(
                format!("{name}.wo{t}"),
                init::lecun_normal(&[cfg.head_dim, c], cfg.head_dim, rng),
            )?);
            block
                .ln_mlp
                .push(LayerNorm::new(store, &format!("{name}.ln_mlp{t}"), c)?);
            block.fc1.push(Linear::new(
                store,
                &format!("{name}.mlp{t}.fc1"),
                c,
                2 * c,
                true,
                Init::He,
                rng,
            )?);
            block.fc2.push(Linear::new(
                store,
                &format!("{name}.mlp{t}.fc2"),
                2 * c,
                c,
                true,
                Init::Lecun,
                rng,
            )?);
        }
        Ok(block)
    }

    /// Keys and values from the concatenated pool, split per head.
    pub fn project_kv(
        &self,
        f: &mut Forward<'_>,
        z_all: &ConcatSequence,
        cfg: &CcaConfig,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let normed = self.ln_kv.forward(f, z_all.tokens)?;
        let wk = f.param(self.wk);
        let wv = f.param(self.wv);
        let k = f.tape.linear(normed, wk)?;
        let v = f.tape.linear(normed, wv)?;
        Ok((
            split_heads(&mut f.tape, k, cfg.heads, cfg.head_dim)?,
            split_heads(&mut f.tape, v, cfg.heads, cfg.head_dim)?,
        ))
    }

    /// Queries of one scale, split per head.
    pub fn project_q(
        &self,
        f: &mut Forward<'_>,
        z_t: &TokenSequence,
        cfg: &CcaConfig,
    ) -> Result<Vec<Var>> {
        let t = z_t.scale;
        let normed = self.ln_q[t].forward(f, z_t.tokens)?;
        let wq = f.param(self.wq[t]);
        let q = f.tape.linear(normed, wq)?;
        split_heads(&mut f.tape, q, cfg.heads, cfg.head_dim)
    }

    pub fn project_qkv(
        &self,
        f: &mut Forward<'_>,
        z_t: &TokenSequence,
        z_all: &ConcatSequence,
        cfg: &CcaConfig,
    ) -> Result<HeadProjections> {
        let q = self.project_q(f, z_t, cfg)?;
        let (k, v) = self.project_kv(f, z_all, cfg)?;
        Ok(HeadProjections { q, k, v })
    }

    /// Head mean projected back to width `C`.
    pub fn attend(
        &self,
        f: &mut Forward<'_>,
        t: usize,
        heads: &HeadProjections,
        channels: usize,
    ) -> Result<Var> {
        let mean = cross_channel_attention(&mut f.tape, heads, channels)?;
        let wo = f.param(self.wo[t]);
        f.tape.linear(mean, wo)
    }

    /// `Z̄_t = Z_t + MLP(LN(Z_t + Q̄_t))`.
    pub fn mlp_residual(
        &self,
        f: &mut Forward<'_>,
        z_t: &TokenSequence,
        q_bar: Var,
    ) -> Result<Var> {
        let t = z_t.scale;
        let sum = f.tape.add(z_t.tokens, q_bar)?;
        let h = self.ln_mlp[t].forward(f, sum)?;
        let h = self.fc1[t].forward(f, h)?;
        let h = f.tape.relu(h);
        let h = self.fc2[t].forward(f, h)?;
        f.tape.add(z_t.tokens, h)
    }

    /// One attention + MLP update of all four sequences.
    pub fn forward(
        &self,
        f: &mut Forward<'_>,
        z: &[TokenSequence],
        cfg: &CcaConfig,
        channels: usize,
    ) -> Result<Vec<TokenSequence>> {
        let z_all = concat_scales(&mut f.tape, z)?;
        let (k, v) = self.project_kv(f, &z_all, cfg)?;
        let mut out = Vec::with_capacity(SCALES);
        for z_t in z {
            let q = self.project_q(f, z_t, cfg)?;
            let heads = HeadProjections {
                q,
                k: k.clone(),
                v: v.clone(),
            };
            let q_bar = self.attend(f, z_t.scale, &heads, channels)?;
            out.push(TokenSequence {
                tokens: self.mlp_residual(f, z_t, q_bar)?,
                scale: z_t.scale,
            });
        }
        Ok(out)
    }
}

impl CrossChannelAttention {
    /// `grid` is the token grid (the coarsest scale's `(rows, cols)`).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        grid: (usize, usize),
        cfg: CcaConfig,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = channels;
        let s = grid.0 * grid.1;
        let mut tokenizers = Vec::with_capacity(SCALES);
        let mut pos = Vec::with_capacity(SCALES);
        for t in 0..SCALES {
            let k = 1 << (SCALES - 1 - t);
            tokenizers.push(Conv2d::new(
                store,
                &format!("{name}.tok{t}"),
                c,
                c,
                k,
                k,
                0,
                Init::He,
                rng,
            )?);
            pos.push(store.add(format!("{name}.pos{t}"), Tensor::zeros(&[s, c]))?);
        }
        let blocks = (0..cfg.depth)
            .map(|b| CcaBlock::new(store, &format!("{name}.block{b}"), c, &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let recon = (0..SCALES)
            .map(|t| {
                Ok(Reconstruction {
                    conv: Conv2d::new(
                        store,
                        &format!("{name}.recon{t}.conv"),
                        c,
                        c,
                        3,
                        1,
                        1,
                        Init::He,
                        rng,
                    )?,
                    bn: BatchNorm2d::new(store, &format!("{name}.recon{t}.bn"), c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            channels,
            grid,
            dropout,
            tokenizers,
            pos,
            blocks,
            recon,
        })
    }

    /// Zeroes the output projections, the MLP output layers and the
    /// reconstruction convolutions, which makes the module an exact identity
    /// on the pyramid.
    pub fn zero_residual_paths(&self, store: &mut ParamStore) {
        let mut ids = Vec::new();
        for block in &self.blocks {
            ids.extend(block.wo.iter().copied());
            for fc in &block.fc2 {
                ids.push(fc.weight);
                ids.extend(fc.bias);
            }
        }
        ids.extend(self.recon.iter().map(|r| r.conv.weight));
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn positional_embedding(&self, t: usize) -> ParamId {
        self.pos[t]
    }

    /// Strided convolution to the token grid, flatten, positional embedding
    /// and dropout for each scale.
    pub fn tokenize(&self, f: &mut Forward<'_>, y: &PyramidFeatures) -> Result<Vec<TokenSequence>> {
        let mut out = Vec::with_capacity(SCALES);
        for t in 0..SCALES {
            let x = self.tokenizers[t].forward(f, y.scales[t])?;
            let shape = f.tape.shape(x);
            if (shape[2], shape[3]) != self.grid {
                return Err(Error::Config(format!(
                    "scale {t} maps to a {}x{} token grid, expected {:?}",
                    shape[2], shape[3], self.grid
                )));
            }
            let tokens = f.tape.to_tokens(x)?;
            let pos = f.param(self.pos[t]);
            let tokens = f.tape.add_broadcast_leading(tokens, pos)?;
            let tokens = f.dropout(tokens, self.dropout)?;
            out.push(TokenSequence { tokens, scale: t });
        }
        Ok(out)
    }

    /// `D̄_t = Y_t + ReLU(BN(conv(UP(Trans(Z̄_t)))))` with upsampling factor
    /// `2^(3-t)`.
    pub fn reconstruct(
        &self,
        f: &mut Forward<'_>,
        z_bar: &[TokenSequence],
        y: &PyramidFeatures,
    ) -> Result<[Var; SCALES]> {
        let mut out = [y.scales[0]; SCALES];
        for (t, z) in z_bar.iter().enumerate() {
            let map = f.tape.from_tokens(z.tokens, self.grid.0, self.grid.1)?;
            let up = f.tape.upsample_nearest(map, 1 << (SCALES - 1 - t))?;
            if f.tape.shape(up) != f.tape.shape(y.scales[t]) {
                return Err(Error::Dimension {
                    op: "reconstruct",
                    left: f.tape.shape(up).to_vec(),
                    right: f.tape.shape(y.scales[t]).to_vec(),
                });
            }
            let h = self.recon[t].conv.forward(f, up)?;
            let h = self.recon[t].bn.forward(f, h)?;
            let h = f.tape.relu(h);
            out[t] = f.tape.add(y.scales[t], h)?;
        }
        Ok(out)
    }

    pub fn forward(&self, f: &mut Forward<'_>, y: &PyramidFeatures) -> Result<[Var; SCALES]> {
        let mut z = self.tokenize(f, y)?;
        for block in &self.blocks {
            z = block.forward(f, &z, &self.cfg, self.channels)?;
        }
        self.reconstruct(f, &z, y)
    }
}
