use super::{global_row, maybe_dropout, Model, ParamVars, TrainMode};
use crate::error::Result;
use crate::image::ImageFeatures;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Scaled dot-product attention of every position in `z` `[T×H]` over the
/// region features `[R×F]`.
///
/// Returns the projected context `[T×H]` and the attention weights `[T×R]`.
pub fn attention_layer<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    regions: Var,
    query: Var,
    value: Var,
) -> Result<(Var, Var)> {
    let f = g.shape(regions)[1];
    let q = g.matmul(z, query)?;
    let rt = g.transpose(regions)?;
    let raw = g.matmul(q, rt)?;
    let scores = g.scale(raw, 1.0 / (f as f64).sqrt());
    let alpha = g.softmax(scores);
    let pooled = g.matmul(alpha, regions)?;
    let ctx = g.matmul(pooled, value)?;
    Ok((ctx, alpha))
}

fn regions_const<T: Element>(g: &mut Graph<T>, features: &ImageFeatures) -> Var {
    let data = features.regions().iter().map(|&v| T::from_f64(v as f64)).collect();
    g.constant(Tensor::new(vec![features.num_regions(), features.dim()], data).expect("feature dims are validated"))
}

pub(super) fn forward<T: Element>(
    model: &Model<T>,
    g: &mut Graph<T>,
    vars: &ParamVars,
    features: &ImageFeatures,
    tokens: &[usize],
    mut train: Option<&mut TrainMode<'_>>,
) -> Result<Var> {
    let cfg = model.config();
    let steps = tokens.len();

    let words = g.gather_rows(model.var(vars, "embed"), tokens)?;
    let global = global_row(g, features);
    let img = g.matmul(global, model.var(vars, "img_proj"))?;
    let img = g.repeat_rows(img, steps)?;
    let mut h = g.concat(words, img)?;
    h = maybe_dropout(g, h, cfg.dropout, &mut train)?;

    let regions = match cfg.decoder {
        super::DecoderKind::ConvAttention => Some(regions_const(g, features)),
        _ => None,
    };

    for l in 0..cfg.num_layers {
        let w = model.var(vars, &format!("conv{l}.weight"));
        let b = model.var(vars, &format!("conv{l}.bias"));
        let pre = g.conv1d_causal(h, w, b)?;
        let mut z = g.glu(pre)?;
        if let Some(regions) = regions {
            let q = model.var(vars, &format!("attn{l}.query"));
            let v = model.var(vars, &format!("attn{l}.value"));
            let (ctx, _) = attention_layer(g, z, regions, q, v)?;
            z = g.add(z, ctx)?;
        }
        if l > 0 {
            z = g.add(z, h)?;
        }
        h = maybe_dropout(g, z, cfg.dropout, &mut train)?;
    }

    let proj = g.matmul(h, model.var(vars, "out.weight"))?;
    g.add_bias(proj, model.var(vars, "out.bias"))
}
