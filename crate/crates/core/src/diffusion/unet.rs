//! Text-conditioned denoiser over VAE latents: a small U-Net with two
//! down blocks, a bottleneck, and two up blocks fed by skip connections.
//! Timesteps enter through a sinusoidal embedding, the text class through
//! feature-wise affine modulation. The down path exposes its skip
//! activations so a control adapter can tap into them.

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::graph::{Ctx, Eval, ParamSet};
use crate::numerics::store::{Init, ParamStore};
use crate::numerics::{RngState, Tensor};
use crate::vae::LATENT_CHANNELS;

pub const TEXT_DIM: usize = 512;
pub const TIME_DIM: usize = 128;
const TIME_HIDDEN: usize = 256;
const GROUPS: usize = 8;
pub const UNET_WIDTHS: [usize; 3] = [64, 128, 256];

/// Text conditioning: a learned class row or the learned null row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    Class(usize),
    Null,
}

pub struct DenoiserModel {
    pub store: ParamStore,
    pub num_classes: usize,
}

fn init_resblock(
    store: &mut ParamStore,
    root: &RngState,
    name: &str,
    cin: usize,
    cout: usize,
) -> Result<()> {
    nn::init_group_norm(store, root, &format!("{name}.gn1"), cin)?;
    nn::init_conv(store, root, &format!("{name}.conv1"), cin, cout, 3)?;
    nn::init_linear(store, root, &format!("{name}.temb"), TIME_HIDDEN, cout)?;
    // FiLM starts as the identity modulation.
    store.init(root, &format!("{name}.film.w"), &[TEXT_DIM, 2 * cout], Init::Zeros)?;
    store.init(root, &format!("{name}.film.b"), &[2 * cout], Init::Zeros)?;
    nn::init_group_norm(store, root, &format!("{name}.gn2"), cout)?;
    nn::init_conv(store, root, &format!("{name}.conv2"), cout, cout, 3)?;
    if cin != cout {
        nn::init_conv(store, root, &format!("{name}.skip"), cin, cout, 1)?;
    }
    Ok(())
}

/// Registers every parameter of the down path (conv_in, two down blocks,
/// bottleneck). Shared with the adapter, which clones this structure.
pub fn init_down_path(store: &mut ParamStore, root: &RngState) -> Result<()> {
    nn::init_conv(store, root, "conv_in", LATENT_CHANNELS, UNET_WIDTHS[0], 3)?;
    init_resblock(store, root, "down1", UNET_WIDTHS[0], UNET_WIDTHS[1])?;
    nn::init_conv(store, root, "ds1", UNET_WIDTHS[1], UNET_WIDTHS[1], 3)?;
    init_resblock(store, root, "down2", UNET_WIDTHS[1], UNET_WIDTHS[2])?;
    nn::init_conv(store, root, "ds2", UNET_WIDTHS[2], UNET_WIDTHS[2], 3)?;
    init_resblock(store, root, "mid", UNET_WIDTHS[2], UNET_WIDTHS[2])
}

impl DenoiserModel {
    pub fn init(seed: u64, num_classes: usize) -> Result<DenoiserModel> {
        let root = RngState::new(seed).derive("denoiser");
        let mut store = ParamStore::new();
        // Class table plus a dedicated trainable null row (last), which
        // starts at zero.
        store.init(
            &root,
            "text.table",
            &[num_classes + 1, TEXT_DIM],
            Init::Normal { std: 0.02 },
        )?;
        {
            let table = store.get("text.table")?.clone();
            let mut data = table.to_vec();
            for v in &mut data[num_classes * TEXT_DIM..] {
                *v = 0.0;
            }
            store.set("text.table", Tensor::from_parts(table.shape().to_vec(), data))?;
        }
        nn::init_linear(&mut store, &root, "temb.fc0", TIME_DIM, TIME_HIDDEN)?;
        nn::init_linear(&mut store, &root, "temb.fc1", TIME_HIDDEN, TIME_HIDDEN)?;
        init_down_path(&mut store, &root)?;
        nn::init_conv(&mut store, &root, "us1", UNET_WIDTHS[2], UNET_WIDTHS[2], 3)?;
        init_resblock(&mut store, &root, "up1", 2 * UNET_WIDTHS[2], UNET_WIDTHS[1])?;
        nn::init_conv(&mut store, &root, "us2", UNET_WIDTHS[1], UNET_WIDTHS[1], 3)?;
        init_resblock(&mut store, &root, "up2", 2 * UNET_WIDTHS[1], UNET_WIDTHS[0])?;
        nn::init_group_norm(&mut store, &root, "gn_out", UNET_WIDTHS[0])?;
        nn::init_conv(&mut store, &root, "conv_out", UNET_WIDTHS[0], LATENT_CHANNELS, 3)?;
        Ok(DenoiserModel { store, num_classes })
    }

    pub fn load(path: &std::path::Path, num_classes: usize) -> Result<DenoiserModel> {
        Ok(DenoiserModel { store: ParamStore::load(path)?, num_classes })
    }

    /// Eval-mode noise prediction without adapter taps.
    pub fn eps(&self, z_t: &Tensor, t: usize, cond: &Cond) -> Result<Tensor> {
        let mut ctx = Eval::new();
        let set = ParamSet::frozen(&self.store);
        let z = ctx.constant(z_t.clone());
        let temb = time_embedding(&mut ctx, &set, t)?;
        let text = text_embedding(&mut ctx, &set, self.num_classes, cond)?;
        denoiser_eps(&mut ctx, &set, &z, &temb, &text, None)
    }
}

/// Sinusoidal timestep features through the shared two-layer MLP.
pub fn time_embedding<C: Ctx>(ctx: &mut C, set: &ParamSet<'_>, t: usize) -> Result<C::T> {
    let sin = ctx.constant(nn::sinusoidal_embedding(t as f64, TIME_DIM));
    let h = nn::linear_vec(ctx, set, "temb.fc0", &sin)?;
    let h = ctx.silu(&h)?;
    nn::linear_vec(ctx, set, "temb.fc1", &h)
}

/// Row lookup in the class table; the null row is the last one.
pub fn text_embedding<C: Ctx>(
    ctx: &mut C,
    set: &ParamSet<'_>,
    num_classes: usize,
    cond: &Cond,
) -> Result<C::T> {
    let idx = match cond {
        Cond::Class(c) => {
            if *c >= num_classes {
                return Err(Error::config(format!(
                    "class id {c} outside 0..{num_classes}"
                )));
            }
            *c
        }
        Cond::Null => num_classes,
    };
    let table = ctx.param(set, "text.table")?;
    let row = ctx.slice_first(&table, idx, idx + 1)?;
    ctx.reshape(&row, &[TEXT_DIM])
}

fn resblock<C: Ctx>(
    ctx: &mut C,
    set: &ParamSet<'_>,
    name: &str,
    x: &C::T,
    temb: &C::T,
    text: &C::T,
) -> Result<C::T> {
    let cin = ctx.shape_of(x)[0];
    let h = nn::group_norm(ctx, set, &format!("{name}.gn1"), x, GROUPS)?;
    let h = ctx.silu(&h)?;
    let h = nn::conv2d(ctx, set, &format!("{name}.conv1"), &h, 1, 1)?;
    let cout = ctx.shape_of(&h)[0];
    let tproj = nn::linear_vec(ctx, set, &format!("{name}.temb"), temb)?;
    let h = ctx.add_channels(&h, &tproj)?;
    let film = nn::linear_vec(ctx, set, &format!("{name}.film"), text)?;
    let scale = ctx.slice_last(&film, 0, cout)?;
    let shift = ctx.slice_last(&film, cout, 2 * cout)?;
    let h = ctx.film(&h, &scale, &shift)?;
    let h = nn::group_norm(ctx, set, &format!("{name}.gn2"), &h, GROUPS)?;
    let h = ctx.silu(&h)?;
    let h = nn::conv2d(ctx, set, &format!("{name}.conv2"), &h, 1, 1)?;
    let skip = if cin == cout {
        x.clone()
    } else {
        nn::conv2d(ctx, set, &format!("{name}.skip"), x, 1, 0)?
    };
    ctx.add(&h, &skip)
}

/// Skip activations of the down path and the bottleneck output.
pub struct UnetTaps<T> {
    pub s1: T,
    pub s2: T,
    pub mid: T,
}

/// Down path over latents: conv_in, two down blocks, bottleneck.
pub fn down_path<C: Ctx>(
    ctx: &mut C,
    set: &ParamSet<'_>,
    x: &C::T,
    temb: &C::T,
    text: &C::T,
) -> Result<UnetTaps<C::T>> {
    let x0 = nn::conv2d(ctx, set, "conv_in", x, 1, 1)?;
    let s1 = resblock(ctx, set, "down1", &x0, temb, text)?;
    let d1 = nn::conv2d(ctx, set, "ds1", &s1, 2, 1)?;
    let s2 = resblock(ctx, set, "down2", &d1, temb, text)?;
    let d2 = nn::conv2d(ctx, set, "ds2", &s2, 2, 1)?;
    let mid = resblock(ctx, set, "mid", &d2, temb, text)?;
    Ok(UnetTaps { s1, s2, mid })
}

/// Full noise prediction. When `taps_add` is given (the adapter's
/// zero-convolved activations), each entry is added to the matching skip
/// before the up path consumes it.
pub fn denoiser_eps<C: Ctx>(
    ctx: &mut C,
    set: &ParamSet<'_>,
    z_t: &C::T,
    temb: &C::T,
    text: &C::T,
    taps_add: Option<&UnetTaps<C::T>>,
) -> Result<C::T> {
    let mut taps = down_path(ctx, set, z_t, temb, text)?;
    if let Some(add) = taps_add {
        taps.s1 = ctx.add(&taps.s1, &add.s1)?;
        taps.s2 = ctx.add(&taps.s2, &add.s2)?;
        taps.mid = ctx.add(&taps.mid, &add.mid)?;
    }
    let s2_shape = ctx.shape_of(&taps.s2);
    let u = ctx.nearest_resize(&taps.mid, s2_shape[1], s2_shape[2])?;
    let u = nn::conv2d(ctx, set, "us1", &u, 1, 1)?;
    let cat = ctx.concat_first(&[u, taps.s2.clone()])?;
    let u = resblock(ctx, set, "up1", &cat, temb, text)?;
    let s1_shape = ctx.shape_of(&taps.s1);
    let u = ctx.nearest_resize(&u, s1_shape[1], s1_shape[2])?;
    let u = nn::conv2d(ctx, set, "us2", &u, 1, 1)?;
    let cat = ctx.concat_first(&[u, taps.s1.clone()])?;
    let u = resblock(ctx, set, "up2", &cat, temb, text)?;
    let h = nn::group_norm(ctx, set, "gn_out", &u, GROUPS)?;
    let h = ctx.silu(&h)?;
    nn::conv2d(ctx, set, "conv_out", &h, 1, 1)
}
