//! Cascaded long/short temporal convolutions per view, self-attention across
//! views, and the linear fusion into the final representation.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mere::EndogenousViews;
use crate::numerics::{multihead_self_attention, Module, Padding, Param, ParamKind, Tape, Var};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

/// Per-view encodings: `c_long[B, F_l, S / p]` and `c_short[B, F_s]`.
#[derive(Clone, Copy, Debug)]
pub struct ViewEncoding {
    pub c_long: Var,
    pub c_short: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FusedRepresentation {
    /// Concatenated attended views `[B, N_v * F_s]` (view-major).
    pub attended: Var,
    /// `[B, D_proj]`
    pub z: Var,
}

/// Intermediates of a full pass, kept for shape inspection.
#[derive(Clone, Copy, Debug)]
pub struct CdtaTrace {
    /// All views encoded as one batch: `[B * N_v, F_l, S / p]`.
    pub c_long: Var,
    /// `[B, N_v, F_s]`
    pub c_short: Var,
    /// `[B, N_v, F_s]` after attention and the residual.
    pub attended_tokens: Var,
    pub fused: FusedRepresentation,
}

#[derive(Clone, Debug)]
pub struct CdtaLayer<T> {
    n_views: usize,
    pool: usize,
    heads: usize,
    long_w: Param<T>,
    long_b: Param<T>,
    short_w: Param<T>,
    short_b: Param<T>,
    wq: Param<T>,
    wk: Param<T>,
    wv: Param<T>,
    fuse_w: Param<T>,
    fuse_b: Param<T>,
}

impl<T: Scalar> CdtaLayer<T> {
    pub fn init(config: &ModelConfig, view_dim: usize, n_views: usize, seed: u64) -> Result<Self> {
        Self::init_with(config, view_dim, n_views, &mut rng::from_seed(seed))
    }

    /// `view_dim` and `n_views` come from the view generator (or its bypass);
    /// everything else from `config`.
    pub fn init_with(
        config: &ModelConfig,
        view_dim: usize,
        n_views: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (fl, fs, k1, k2, dp) = (
            config.f_long,
            config.f_short,
            config.k1,
            config.k2,
            config.d_proj,
        );
        let u = |n: usize| (1.0 / n as f64).sqrt();
        Ok(Self {
            n_views,
            pool: config.pool_stride,
            heads: config.heads,
            long_w: Param::uniform("cdta.long.kernel", ParamKind::Weight, &[fl, view_dim, k1], u(view_dim * k1), rng),
            long_b: Param::zeros("cdta.long.bias", ParamKind::Bias, &[fl]),
            short_w: Param::uniform("cdta.short.kernel", ParamKind::Weight, &[fs, fl, k2], u(fl * k2), rng),
            short_b: Param::zeros("cdta.short.bias", ParamKind::Bias, &[fs]),
            wq: Param::uniform("cdta.attn.wq", ParamKind::Weight, &[fs, fs], u(fs), rng),
            wk: Param::uniform("cdta.attn.wk", ParamKind::Weight, &[fs, fs], u(fs), rng),
            wv: Param::uniform("cdta.attn.wv", ParamKind::Weight, &[fs, fs], u(fs), rng),
            fuse_w: Param::uniform("cdta.fuse.weight", ParamKind::Weight, &[n_views * fs, dp], u(n_views * fs), rng),
            fuse_b: Param::zeros("cdta.fuse.bias", ParamKind::Bias, &[dp]),
        })
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn f_short(&self) -> usize {
        self.short_w.tensor.shape()[0]
    }

    pub fn attention_mut(&mut self) -> [&mut Param<T>; 3] {
        [&mut self.wq, &mut self.wk, &mut self.wv]
    }

    pub fn fusion_mut(&mut self) -> (&mut Param<T>, &mut Param<T>) {
        (&mut self.fuse_w, &mut self.fuse_b)
    }

    /// Long conv + GELU + max-pool, then short conv + GELU + global average.
    /// `view[B, S, V_d]`.
    pub fn encode_view(&self, tape: &mut Tape<T>, view: Var) -> Result<ViewEncoding> {
        let shape = tape.shape(view).to_vec();
        let vd = self.long_w.tensor.shape()[1];
        if shape.len() != 3 || shape[2] != vd {
            return Err(Error::dim(format!("view must be [B, S, {vd}], got {shape:?}")));
        }
        if shape[1] < self.pool {
            return Err(Error::dim(format!(
                "sequence shorter than pool stride: {} < {}",
                shape[1], self.pool
            )));
        }
        let x = tape.permute(view, &[0, 2, 1])?;
        let (lw, lb) = (tape.param(&self.long_w)?, tape.param(&self.long_b)?);
        let y = tape.conv1d(x, lw, lb, Padding::Same)?;
        let y = tape.gelu(y)?;
        let c_long = tape.maxpool1d(y, self.pool, self.pool)?;
        let (sw, sb) = (tape.param(&self.short_w)?, tape.param(&self.short_b)?);
        let y = tape.conv1d(c_long, sw, sb, Padding::Same)?;
        let y = tape.gelu(y)?;
        let c_short = tape.adaptive_avg_pool(y)?;
        Ok(ViewEncoding { c_long, c_short })
    }

    /// Attention across views: each view's pooled vector is one token.
    /// Returns `[B, N_v, F_s]` including the residual.
    pub fn attend(&self, tape: &mut Tape<T>, shorts: &[Var]) -> Result<Var> {
        if shorts.len() != self.n_views {
            return Err(Error::InvalidArgument(format!(
                "expected {} view encodings, got {}",
                self.n_views,
                shorts.len()
            )));
        }
        let tokens = tape.stack(shorts, 1)?;
        self.attend_tokens(tape, tokens)
    }

    pub fn attend_tokens(&self, tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 3 || shape[1] != self.n_views || shape[2] != self.f_short() {
            return Err(Error::dim(format!(
                "attention tokens must be [B, {}, {}], got {shape:?}",
                self.n_views,
                self.f_short()
            )));
        }
        let wq = tape.param(&self.wq)?;
        let wk = tape.param(&self.wk)?;
        let wv = tape.param(&self.wv)?;
        let out = multihead_self_attention(tape, tokens, wq, wk, wv, self.heads)?;
        tape.add(out.output, tokens)
    }

    /// Flattens `[B, N_v, F_s]` view-major and projects to `D_proj`.
    pub fn fuse(&self, tape: &mut Tape<T>, attended: Var) -> Result<FusedRepresentation> {
        let shape = tape.shape(attended).to_vec();
        let width = self.fuse_w.tensor.shape()[0];
        if shape.len() != 3 || shape[1] * shape[2] != width {
            return Err(Error::dim(format!(
                "fusion expects {width} features per sample, got {shape:?}"
            )));
        }
        let flat = tape.reshape(attended, &[shape[0], width])?;
        let (w, b) = (tape.param(&self.fuse_w)?, tape.param(&self.fuse_b)?);
        let z = tape.linear(flat, w, b)?;
        Ok(FusedRepresentation { attended: flat, z })
    }

    /// Full pass over `views[B, N_v, S, V_d]`. The shared convolutions are
    /// applied to all views at once by folding the view axis into the batch.
    pub fn forward(&self, tape: &mut Tape<T>, views: EndogenousViews) -> Result<CdtaTrace> {
        let shape = tape.shape(views.var).to_vec();
        if shape.len() != 4 || shape[1] != self.n_views {
            return Err(Error::dim(format!(
                "expected [B, {}, S, V_d] views, got {shape:?}",
                self.n_views
            )));
        }
        let (b, nv, s, vd) = (shape[0], shape[1], shape[2], shape[3]);
        let folded = tape.reshape(views.var, &[b * nv, s, vd])?;
        let enc = self.encode_view(tape, folded)?;
        let c_short = tape.reshape(enc.c_short, &[b, nv, self.f_short()])?;
        let attended_tokens = self.attend_tokens(tape, c_short)?;
        let fused = self.fuse(tape, attended_tokens)?;
        Ok(CdtaTrace {
            c_long: enc.c_long,
            c_short,
            attended_tokens,
            fused,
        })
    }
}

impl<T: Scalar> Module<T> for CdtaLayer<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for p in [
            &self.long_w,
            &self.long_b,
            &self.short_w,
            &self.short_b,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.fuse_w,
            &self.fuse_b,
        ] {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in [
            &mut self.long_w,
            &mut self.long_b,
            &mut self.short_w,
            &mut self.short_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.fuse_w,
            &mut self.fuse_b,
        ] {
            f(p);
        }
    }
}

/// Stand-in without convolutions or attention: time-mean per view, flattened,
/// then one linear layer to `D_proj`.
#[derive(Clone, Debug)]
pub struct CdtaBypass<T> {
    weight: Param<T>,
    bias: Param<T>,
}

impl<T: Scalar> CdtaBypass<T> {
    pub fn init_with(config: &ModelConfig, view_dim: usize, n_views: usize, rng: &mut Rng) -> Self {
        let width = view_dim * n_views;
        Self {
            weight: Param::uniform(
                "bypass.fuse.weight",
                ParamKind::Weight,
                &[width, config.d_proj],
                (1.0 / width as f64).sqrt(),
                rng,
            ),
            bias: Param::zeros("bypass.fuse.bias", ParamKind::Bias, &[config.d_proj]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, views: EndogenousViews) -> Result<FusedRepresentation> {
        let shape = tape.shape(views.var).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("expected [B, N_v, S, V_d], got {shape:?}")));
        }
        let (b, nv, s, vd) = (shape[0], shape[1], shape[2], shape[3]);
        let width = self.weight.tensor.shape()[0];
        if nv * vd != width {
            return Err(Error::dim(format!(
                "bypass expects {width} view features, got {nv} x {vd}"
            )));
        }
        let x = tape.permute(views.var, &[0, 1, 3, 2])?;
        let x = tape.reshape(x, &[b, nv * vd, s])?;
        let attended = tape.adaptive_avg_pool(x)?;
        let (w, bias) = (tape.param(&self.weight)?, tape.param(&self.bias)?);
        let z = tape.linear(attended, w, bias)?;
        Ok(FusedRepresentation { attended, z })
    }
}

impl<T: Scalar> Module<T> for CdtaBypass<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
