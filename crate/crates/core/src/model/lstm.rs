use super::{global_row, maybe_dropout, Model, ParamVars, TrainMode};
use crate::error::Result;
use crate::image::ImageFeatures;
use crate::tensor::{Element, Graph, Var};

/// Gate layout along the `4H` axis: input, forget, output, candidate.
pub(super) fn forward<T: Element>(
    model: &Model<T>,
    g: &mut Graph<T>,
    vars: &ParamVars,
    features: &ImageFeatures,
    tokens: &[usize],
    mut train: Option<&mut TrainMode<'_>>,
) -> Result<Var> {
    let cfg = model.config();
    let hid = cfg.hidden;

    let global = global_row(g, features);
    let h_pre = g.matmul(global, model.var(vars, "init.h"))?;
    let h0 = g.tanh(h_pre);
    let c_pre = g.matmul(global, model.var(vars, "init.c"))?;
    let c0 = g.tanh(c_pre);

    let mut seq = g.gather_rows(model.var(vars, "embed"), tokens)?;
    seq = maybe_dropout(g, seq, cfg.dropout, &mut train)?;

    for l in 0..cfg.num_layers {
        let w_in = model.var(vars, &format!("lstm{l}.input"));
        let w_h = model.var(vars, &format!("lstm{l}.hidden"));
        let bias = model.var(vars, &format!("lstm{l}.bias"));
        let xw = g.matmul(seq, w_in)?;
        let xw = g.add_bias(xw, bias)?;

        let (mut h, mut c) = (h0, c0);
        let mut outputs = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            let row = g.slice_rows(xw, t, 1)?;
            let rec = g.matmul(h, w_h)?;
            let pre = g.add(row, rec)?;
            let i_pre = g.slice_cols(pre, 0, hid)?;
            let f_pre = g.slice_cols(pre, hid, hid)?;
            let o_pre = g.slice_cols(pre, 2 * hid, hid)?;
            let g_pre = g.slice_cols(pre, 3 * hid, hid)?;
            let i = g.sigmoid(i_pre);
            let f = g.sigmoid(f_pre);
            let o = g.sigmoid(o_pre);
            let cand = g.tanh(g_pre);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let squashed = g.tanh(c);
            h = g.mul(o, squashed)?;
            outputs.push(h);
        }
        seq = g.stack_rows(&outputs)?;
        seq = maybe_dropout(g, seq, cfg.dropout, &mut train)?;
    }

    let proj = g.matmul(seq, model.var(vars, "out.weight"))?;
    g.add_bias(proj, model.var(vars, "out.bias"))
}
