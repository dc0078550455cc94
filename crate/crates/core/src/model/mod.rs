//! The paired denoiser: two weight-shared U-Net streams over neighbouring
//! noisy frames, a pose encoder, an appearance encoder and attention blocks
//! that let each stream read the condition image and the other stream.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{film_modulate, multi_head_attention};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use layers::{conv, layer_norm, linear, resblock, sinusoidal, Init};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Frame channels.
    pub channels: usize,
    /// Frame height and width.
    pub size: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    /// Feature-map sizes that get attention blocks. The bottleneck (size
    /// divided by `2^levels`) counts as a level.
    pub attention_sizes: Vec<usize>,
    pub heads: usize,
    pub pose_channels: usize,
    pub embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: 3,
            size: 32,
            base_channels: 32,
            channel_mult: vec![1, 2, 4],
            attention_sizes: vec![8, 4],
            heads: 4,
            pose_channels: 3,
            embed_dim: 128,
            norm_groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels * self.channel_mult[l]
    }

    pub fn level_size(&self, l: usize) -> usize {
        self.size >> l
    }

    pub fn bottleneck_size(&self) -> usize {
        self.size >> self.levels()
    }

    /// Width of the appearance tokens.
    pub fn token_dim(&self) -> usize {
        self.level_channels(self.levels() - 1)
    }

    /// Number of appearance tokens for an image condition.
    pub fn token_count(&self) -> usize {
        self.bottleneck_size() * self.bottleneck_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let levels = self.levels();
        if levels == 0 || self.channels == 0 || self.pose_channels == 0 || self.base_channels == 0 {
            return bad("channel counts and level count must be positive".into());
        }
        if self.channel_mult.contains(&0) {
            return bad("channel multipliers must be positive".into());
        }
        if !self.size.is_multiple_of(1 << levels) || self.size >> levels < 1 {
            return bad(format!("size {} not divisible by 2^{levels}", self.size));
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return bad(format!("embedding dimension {} must be even", self.embed_dim));
        }
        for l in 0..levels {
            let c = self.level_channels(l);
            if self.norm_groups == 0 || !c.is_multiple_of(self.norm_groups) {
                return bad(format!("{c} channels not divisible into {} groups", self.norm_groups));
            }
        }
        for &s in &self.attention_sizes {
            let width = if s == self.bottleneck_size() {
                self.token_dim()
            } else if let Some(l) = (0..levels).find(|&l| self.level_size(l) == s) {
                self.level_channels(l)
            } else {
                return bad(format!("attention size {s} is not a trunk level"));
            };
            if self.heads == 0 || width % self.heads != 0 {
                return bad(format!("width {width} at size {s} not divisible by {} heads", self.heads));
            }
        }
        Ok(())
    }

    fn attends(&self, size: usize) -> bool {
        self.attention_sizes.contains(&size)
    }
}

/// Which neighbour the target stream is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Stream a is frame t, stream b is frame t-1.
    Forward,
    /// Stream a is frame t-1, stream b is frame t.
    Backward,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }
}

/// The appearance input `c`.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition<T> {
    /// No appearance pathway at all: the appearance blocks are skipped.
    Absent,
    /// The learned null token.
    Null,
    /// `[1, C, H, W]` (shared by the batch) or `[N, C, H, W]`.
    Image(Tensor<T>),
    /// Per-sample image or null token, `images: [N, C, H, W]`.
    Mixed { images: Tensor<T>, null: Vec<bool> },
}

/// Inputs of one paired forward pass. Frames `[N,C,H,W]`, poses `[N,P,H,W]`,
/// one log-SNR per sample.
pub struct PairInput<'a, T> {
    pub y_a: Var,
    pub y_b: Var,
    pub s_a: Var,
    pub s_b: Var,
    pub lambdas: &'a [f64],
    pub cond: &'a Condition<T>,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<T> {
    pub config: DenoiserConfig,
    pub params: ParamStore<T>,
}

pub type Model32 = DenoiserModel<f32>;
pub type Model64 = DenoiserModel<f64>;

impl<T: Scalar> DenoiserModel<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let cfg = &config;
        let levels = cfg.levels();
        let e = cfg.embed_dim;
        let da = cfg.token_dim();

        init.conv("ep.in", cfg.pose_channels, cfg.level_channels(0), 3)?;
        for l in 1..levels {
            init.conv(&format!("ep.down{l}"), cfg.level_channels(l - 1), cfg.level_channels(l), 3)?;
        }

        init.conv("ea.in", cfg.channels, cfg.level_channels(0), 3)?;
        for i in 1..=levels {
            let c_in = cfg.level_channels((i - 1).min(levels - 1));
            let c_out = cfg.level_channels(i.min(levels - 1));
            init.conv(&format!("ea.down{i}"), c_in, c_out, 3)?;
        }
        init.tensor("ea.null".into(), &[1, da], 1.0)?;

        init.tensor("dir.f".into(), &[1, e], 1.0)?;
        init.tensor("dir.b".into(), &[1, e], 1.0)?;
        init.linear("lam.l1", e, e, None)?;
        init.linear("lam.l2", e, e, None)?;
        init.linear("pose_vec", cfg.token_dim(), e, None)?;

        init.conv("in", cfg.channels, cfg.level_channels(0), 3)?;
        let mut c = cfg.level_channels(0);
        for l in 0..levels {
            let cl = cfg.level_channels(l);
            init.resblock(&format!("down{l}.res"), c, cl, e)?;
            init_attention(&mut init, cfg, &format!("down{l}"), cfg.level_size(l), cl)?;
            init.conv(&format!("down{l}.ds"), cl, cl, 3)?;
            c = cl;
        }
        init.resblock("mid.res", c, c, e)?;
        init_attention(&mut init, cfg, "mid", cfg.bottleneck_size(), c)?;
        for l in (0..levels).rev() {
            let cl = cfg.level_channels(l);
            init.resblock(&format!("up{l}.res"), c + cl, cl, e)?;
            init_attention(&mut init, cfg, &format!("up{l}"), cfg.level_size(l), cl)?;
            c = cl;
        }
        init.norm("out.norm", c)?;
        init.conv("out.conv", c, cfg.channels, 3)?;

        Ok(DenoiserModel { config, params })
    }

    /// Pose feature pyramid, one map per trunk level with that level's
    /// channel count and spatial size.
    pub fn encode_pose(&self, t: &mut Tape<T>, s: Var) -> Result<Vec<Var>> {
        self.check_input(t, s, self.config.pose_channels, "encode_pose")?;
        let p = &self.params;
        let h = conv(t, p, "ep.in", s, 1)?;
        let mut h = t.silu(h)?;
        let mut out = vec![h];
        for l in 1..self.config.levels() {
            let x = conv(t, p, &format!("ep.down{l}"), h, 2)?;
            h = t.silu(x)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Appearance tokens `[N, L, D]` for a batch of `n`; `None` when the
    /// condition is absent. The null token yields `L = 1`.
    pub fn encode_appearance(&self, t: &mut Tape<T>, cond: &Condition<T>, n: usize) -> Result<Option<Var>> {
        let p = &self.params;
        match cond {
            Condition::Absent => Ok(None),
            Condition::Null => {
                let null = t.param(p, "ea.null")?;
                let rows = t.repeat_batch(null, n)?;
                Ok(Some(t.reshape(rows, &[n, 1, self.config.token_dim()])?))
            }
            Condition::Image(img) => {
                let b = img.batch();
                if b != 1 && b != n {
                    return Err(Error::shape("encode_appearance", format!("condition batch {b} for {n} samples")));
                }
                let x = t.constant(img.clone());
                let tok = self.image_tokens(t, x)?;
                Ok(Some(if b == 1 { t.repeat_batch(tok, n)? } else { tok }))
            }
            Condition::Mixed { images, null } => {
                if images.batch() != n || null.len() != n {
                    return Err(Error::shape(
                        "encode_appearance",
                        format!("{} images / {} flags for {n} samples", images.batch(), null.len()),
                    ));
                }
                let x = t.constant(images.clone());
                let tok = self.image_tokens(t, x)?;
                let null_row = t.param(p, "ea.null")?;
                let l = self.config.token_count();
                let null_tok = t.repeat_batch(null_row, l)?;
                let d = self.config.token_dim();
                let null_tok = t.reshape(null_tok, &[1, l, d])?;
                let rows = (0..n)
                    .map(|i| if null[i] { Ok(null_tok) } else { t.slice_batch(tok, i, 1) })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Some(t.concat_batch(&rows)?))
            }
        }
    }

    /// Both streams' clean-frame predictions from one joint pass.
    pub fn forward_pair(&self, t: &mut Tape<T>, input: &PairInput<'_, T>) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let p = &self.params;
        let n = self.check_input(t, input.y_a, cfg.channels, "denoise_pair")?;
        for (v, c) in [(input.y_b, cfg.channels), (input.s_a, cfg.pose_channels), (input.s_b, cfg.pose_channels)] {
            if self.check_input(t, v, c, "denoise_pair")? != n {
                return Err(Error::shape("denoise_pair", "streams have different batch sizes"));
            }
        }
        if input.lambdas.len() != n {
            return Err(Error::shape("denoise_pair", format!("{} noise levels for {n} samples", input.lambdas.len())));
        }

        let y = t.concat_batch(&[input.y_a, input.y_b])?;
        let s = t.concat_batch(&[input.s_a, input.s_b])?;
        let pose = self.encode_pose(t, s)?;
        let app = match self.encode_appearance(t, input.cond, n)? {
            Some(a) => Some(t.concat_batch(&[a, a])?),
            None => None,
        };

        // Conditioning vector per stream: noise level + direction + pose.
        let mut lam = input.lambdas.to_vec();
        lam.extend_from_slice(input.lambdas);
        let emb = t.constant(sinusoidal(&lam, cfg.embed_dim));
        let emb = linear(t, p, "lam.l1", emb)?;
        let emb = t.silu(emb)?;
        let emb = linear(t, p, "lam.l2", emb)?;
        let (first, second) = match input.direction {
            Direction::Forward => ("dir.f", "dir.b"),
            Direction::Backward => ("dir.b", "dir.f"),
        };
        let da = t.param(p, first)?;
        let db = t.param(p, second)?;
        let da = t.repeat_batch(da, n)?;
        let db = t.repeat_batch(db, n)?;
        let dir = t.concat_batch(&[da, db])?;
        let pv = t.mean_spatial(*pose.last().expect("at least one level"))?;
        let pv = linear(t, p, "pose_vec", pv)?;
        let cond = t.add(emb, dir)?;
        let cond = t.add(cond, pv)?;
        let cond = t.silu(cond)?;

        let g = cfg.norm_groups;
        let mut h = conv(t, p, "in", y, 1)?;
        let mut skips = Vec::with_capacity(cfg.levels());
        for l in 0..cfg.levels() {
            let name = format!("down{l}");
            h = resblock(t, p, &format!("{name}.res"), h, Some(pose[l]), cond, g)?;
            h = self.attention(t, &name, cfg.level_size(l), h, app, n)?;
            skips.push(h);
            h = conv(t, p, &format!("{name}.ds"), h, 2)?;
        }
        h = resblock(t, p, "mid.res", h, None, cond, g)?;
        h = self.attention(t, "mid", cfg.bottleneck_size(), h, app, n)?;
        for l in (0..cfg.levels()).rev() {
            let name = format!("up{l}");
            let up = t.upsample2x(h)?;
            let x = t.concat_channels(up, skips[l])?;
            h = resblock(t, p, &format!("{name}.res"), x, Some(pose[l]), cond, g)?;
            h = self.attention(t, &name, cfg.level_size(l), h, app, n)?;
        }
        let h = layers::group_norm(t, p, "out.norm", h, g)?;
        let h = t.silu(h)?;
        let out = conv(t, p, "out.conv", h, 1)?;
        let a = t.slice_batch(out, 0, n)?;
        let b = t.slice_batch(out, n, n)?;
        Ok((a, b))
    }

    /// Inference-only paired prediction at training step `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise_pair(
        &self,
        y_a: &Tensor<T>,
        y_b: &Tensor<T>,
        k: usize,
        s_a: &Tensor<T>,
        s_b: &Tensor<T>,
        cond: &Condition<T>,
        direction: Direction,
        sched: &NoiseSchedule,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let lambda = sched.lambda(k)?;
        self.predict(y_a, y_b, s_a, s_b, lambda, cond, direction)
    }

    /// Inference-only paired prediction at log-SNR `lambda`.
    #[allow(clippy::too_many_arguments)]
    pub fn predict(
        &self,
        y_a: &Tensor<T>,
        y_b: &Tensor<T>,
        s_a: &Tensor<T>,
        s_b: &Tensor<T>,
        lambda: f64,
        cond: &Condition<T>,
        direction: Direction,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut t = Tape::inference();
        let lambdas = vec![lambda; y_a.batch()];
        let input = PairInput {
            y_a: t.constant(y_a.clone()),
            y_b: t.constant(y_b.clone()),
            s_a: t.constant(s_a.clone()),
            s_b: t.constant(s_b.clone()),
            lambdas: &lambdas,
            cond,
            direction,
        };
        let (a, b) = self.forward_pair(&mut t, &input)?;
        Ok((t.value(a).clone(), t.value(b).clone()))
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Names of the attention sites (`down{l}`, `mid`, `up{l}`) with their
    /// feature-map size, in forward order.
    pub fn attention_sites(&self) -> Vec<(String, usize)> {
        let cfg = &self.config;
        let mut sites: Vec<(String, usize)> = (0..cfg.levels())
            .map(|l| (format!("down{l}"), cfg.level_size(l)))
            .collect();
        sites.push(("mid".into(), cfg.bottleneck_size()));
        sites.extend((0..cfg.levels()).rev().map(|l| (format!("up{l}"), cfg.level_size(l))));
        sites.retain(|(_, s)| cfg.attends(*s));
        sites
    }

    /// Appearance block at `site`: both streams `[N,L,D]` attend to the
    /// appearance tokens with the same weights.
    pub fn appearance_block(&self, t: &mut Tape<T>, site: &str, h_a: Var, h_b: Var, app: Var) -> Result<(Var, Var)> {
        let n = self.pair_rows(t, h_a, h_b, "appearance_block")?;
        let x = t.concat_batch(&[h_a, h_b])?;
        let app = t.concat_batch(&[app, app])?;
        let y = appearance_stacked(t, &self.params, &format!("{site}.app"), x, app, self.config.heads)?;
        Ok((t.slice_batch(y, 0, n)?, t.slice_batch(y, n, n)?))
    }

    /// Spatiotemporal block at `site`: each stream attends to the other.
    pub fn spatiotemporal_block(&self, t: &mut Tape<T>, site: &str, h_a: Var, h_b: Var) -> Result<(Var, Var)> {
        let n = self.pair_rows(t, h_a, h_b, "spatiotemporal_block")?;
        let x = t.concat_batch(&[h_a, h_b])?;
        let y = spatiotemporal_stacked(t, &self.params, &format!("{site}.st"), x, n, self.config.heads)?;
        Ok((t.slice_batch(y, 0, n)?, t.slice_batch(y, n, n)?))
    }

    fn pair_rows(&self, t: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<usize> {
        if t.shape(a) != t.shape(b) || t.shape(a).len() != 3 {
            return Err(Error::shape(op, format!("{:?} vs {:?}", t.shape(a), t.shape(b))));
        }
        Ok(t.shape(a)[0])
    }

    fn attention(&self, t: &mut Tape<T>, name: &str, size: usize, h: Var, app: Option<Var>, n: usize) -> Result<Var> {
        if !self.config.attends(size) {
            return Ok(h);
        }
        let mut x = t.to_tokens(h)?;
        if let Some(app) = app {
            x = appearance_stacked(t, &self.params, &format!("{name}.app"), x, app, self.config.heads)?;
        }
        x = spatiotemporal_stacked(t, &self.params, &format!("{name}.st"), x, n, self.config.heads)?;
        t.from_tokens(x, size, size)
    }

    fn check_input(&self, t: &Tape<T>, v: Var, channels: usize, op: &'static str) -> Result<usize> {
        let s = self.config.size;
        match *t.shape(v) {
            [n, c, h, w] if c == channels && h == s && w == s => Ok(n),
            ref other => Err(Error::shape(op, format!("expected [N,{channels},{s},{s}], got {other:?}"))),
        }
    }

    fn image_tokens(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(t, x, self.config.channels, "encode_appearance")?;
        let p = &self.params;
        let h = conv(t, p, "ea.in", x, 1)?;
        let mut h = t.silu(h)?;
        let levels = self.config.levels();
        for i in 1..=levels {
            h = conv(t, p, &format!("ea.down{i}"), h, 2)?;
            if i < levels {
                h = t.silu(h)?;
            }
        }
        t.to_tokens(h)
    }
}

fn init_attention<T: Scalar, R: rand::Rng>(
    init: &mut Init<'_, T, R>,
    cfg: &DenoiserConfig,
    name: &str,
    size: usize,
    width: usize,
) -> Result<()> {
    if !cfg.attends(size) {
        return Ok(());
    }
    init.norm(&format!("{name}.app.ln"), width)?;
    init.attention(&format!("{name}.app.attn"), width, cfg.token_dim())?;
    init.norm(&format!("{name}.st.ln"), width)?;
    init.attention(&format!("{name}.st.attn"), width, width)
}

/// Stacked `[2N, L, D]` form of the appearance block.
fn appearance_stacked<T: Scalar>(
    t: &mut Tape<T>,
    p: &ParamStore<T>,
    name: &str,
    x: Var,
    app: Var,
    heads: usize,
) -> Result<Var> {
    let q = layer_norm(t, p, &format!("{name}.ln"), x)?;
    let a = multi_head_attention(t, p, &format!("{name}.attn"), q, app, app, heads)?;
    t.add(x, a)
}

/// Stacked `[2N, L, D]` form of the spatiotemporal block: the first `n` rows
/// attend to the last `n` and vice versa.
fn spatiotemporal_stacked<T: Scalar>(
    t: &mut Tape<T>,
    p: &ParamStore<T>,
    name: &str,
    x: Var,
    n: usize,
    heads: usize,
) -> Result<Var> {
    let q = layer_norm(t, p, &format!("{name}.ln"), x)?;
    let first = t.slice_batch(q, 0, n)?;
    let second = t.slice_batch(q, n, n)?;
    let kv = t.concat_batch(&[second, first])?;
    let a = multi_head_attention(t, p, &format!("{name}.attn"), q, kv, kv, heads)?;
    t.add(x, a)
}

#[cfg(test)]
mod tests;
