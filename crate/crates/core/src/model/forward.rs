//! Pre-norm encoder forward pass with cached activations, and the matching
//! hand-written backward pass.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::params::{Layout, TensorId};
use crate::peft::{Composed, PeftKind, PeftParams};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Row-wise layer norm; returns `(y, xhat, 1/std)`.
pub fn layer_norm(
    x: &Array2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (rows, d) = x.dim();
    let mut xhat = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        Zip::from(xhat.row_mut(i)).and(row).for_each(|o, &v| *o = (v - mean) * r);
    }
    let y = &xhat * &gain + &bias;
    (y, xhat, rstd)
}

/// Backward of [`layer_norm`]; accumulates gain/bias gradients when given.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &Array1<f64>,
    gain: ArrayView1<f64>,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Array2<f64> {
    if let Some((dg, db)) = grads {
        for (row_dy, row_xh) in dy.outer_iter().zip(xhat.outer_iter()) {
            for j in 0..row_dy.len() {
                dg[j] += row_dy[j] * row_xh[j];
                db[j] += row_dy[j];
            }
        }
    }
    let (rows, d) = dy.dim();
    let dxhat = dy * &gain;
    let mut dx = Array2::zeros((rows, d));
    for i in 0..rows {
        let dxh = dxhat.row(i);
        let xh = xhat.row(i);
        let m1 = dxh.sum() / d as f64;
        let m2 = dxh.dot(&xh) / d as f64;
        let r = rstd[i];
        Zip::from(dx.row_mut(i))
            .and(dxh)
            .and(xh)
            .for_each(|o, &g, &h| *o = r * (g - m1 - h * m2));
    }
    dx
}

/// In-place row softmax; `-inf` entries become exact zeros.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn add_rows_into(dst: &mut [f64], m: &Array2<f64>) {
    for row in m.outer_iter() {
        for (d, v) in dst.iter_mut().zip(row.iter()) {
            *d += v;
        }
    }
}

fn add_into(dst: &mut [f64], m: &Array2<f64>) {
    for (d, v) in dst.iter_mut().zip(m.iter()) {
        *d += v;
    }
}

pub(crate) struct LayerCache {
    xhat1: Array2<f64>,
    rstd1: Array1<f64>,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    q_low: Option<Array2<f64>>,
    v_low: Option<Array2<f64>>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    xhat2: Array2<f64>,
    rstd2: Array1<f64>,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    x2: Array2<f64>,
    adapter_pre: Option<Array2<f64>>,
    adapter_act: Option<Array2<f64>>,
}

pub(crate) struct SeqCache {
    pub ids: Vec<TokenId>,
    pub prompt_len: usize,
    pub positions: Vec<usize>,
    layers: Vec<LayerCache>,
    xhatf: Array2<f64>,
    rstdf: Array1<f64>,
    /// Final normalized hidden states, one row per position (prompts first).
    pub hidden: Array2<f64>,
}

/// Gradient buffers for one backward pass.
pub(crate) struct GradBuffers {
    pub backbone: Option<Vec<f64>>,
    pub peft: Option<Vec<f64>>,
}

/// The forward/backward engine over a composed view.
pub(crate) struct Net<'a> {
    view: &'a Composed<'a>,
    layout: &'a Layout,
    w: &'a [f64],
    peft: Option<&'a PeftParams>,
}

impl<'a> Net<'a> {
    pub fn new(view: &'a Composed<'a>) -> Self {
        Self {
            view,
            layout: &view.backbone.layout,
            w: view.effective_weights(),
            peft: view.peft,
        }
    }

    fn m(&self, id: TensorId) -> ArrayView2<'a, f64> {
        self.layout.mat(self.w, id)
    }

    fn v(&self, id: TensorId) -> ArrayView1<'a, f64> {
        self.layout.vec(self.w, id)
    }

    fn pm(&self, id: TensorId) -> ArrayView2<'a, f64> {
        let p = self.peft.expect("peft present");
        p.layout.mat(&p.data, id)
    }

    fn pv(&self, id: TensorId) -> ArrayView1<'a, f64> {
        let p = self.peft.expect("peft present");
        p.layout.vec(&p.data, id)
    }

    fn peft_kind(&self) -> PeftKind {
        self.peft.map_or(PeftKind::None, |p| p.kind)
    }

    pub fn prompt_len(&self) -> usize {
        self.view.prompt_len()
    }

    pub fn validate_ids(&self, ids: &[TokenId]) -> Result<()> {
        let cfg = self.view.config();
        let total = ids.len() + self.prompt_len();
        if ids.is_empty() {
            return Err(Error::Shape("empty sequence".into()));
        }
        if total > cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence of {} tokens plus {} prompts exceeds {} positions",
                ids.len(),
                self.prompt_len(),
                cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        Ok(())
    }

    pub fn forward(&self, ids: &[TokenId]) -> Result<SeqCache> {
        self.validate_ids(ids)?;
        let cfg = self.view.config();
        let d = cfg.hidden;
        let bids = &self.view.backbone.ids;
        let p = self.prompt_len();
        let isolate = self.view.isolate_prompt;
        let t = p + ids.len();

        let tok = self.m(bids.tok_emb);
        let pos = self.m(bids.pos_emb);
        let mut positions = Vec::with_capacity(t);
        let mut x = Array2::zeros((t, d));
        if p > 0 {
            let prompts = self.peft.expect("prompt").prompts();
            for i in 0..p {
                positions.push(i);
                let mut row = x.row_mut(i);
                row.assign(&prompts.row(i));
                row += &pos.row(i);
            }
        }
        for (j, &id) in ids.iter().enumerate() {
            let at = if isolate { j } else { p + j };
            positions.push(at);
            let mut row = x.row_mut(p + j);
            row.assign(&tok.row(id as usize));
            row += &pos.row(at);
        }

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let (out, cache) = self.layer_forward(l, x, p, isolate);
            layers.push(cache);
            x = out;
        }
        let (hidden, xhatf, rstdf) = layer_norm(&x, self.v(bids.lnf_g), self.v(bids.lnf_b));
        Ok(SeqCache {
            ids: ids.to_vec(),
            prompt_len: p,
            positions,
            layers,
            xhatf,
            rstdf,
            hidden,
        })
    }

    fn layer_forward(&self, l: usize, x: Array2<f64>, p: usize, isolate: bool) -> (Array2<f64>, LayerCache) {
        let cfg = self.view.config();
        let li = &self.view.backbone.ids.layers[l];
        let (t, d) = x.dim();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (h1, xhat1, rstd1) = layer_norm(&x, self.v(li.ln1_g), self.v(li.ln1_b));
        let mut q = h1.dot(&self.m(li.wq));
        let k = h1.dot(&self.m(li.wk));
        let mut v = h1.dot(&self.m(li.wv));
        let (mut q_low, mut v_low) = (None, None);
        if self.peft_kind() == PeftKind::LoRA {
            let lo = self.peft.unwrap().lora_ids(l);
            let sc = self.peft.unwrap().lora_scale();
            let ql = h1.dot(&self.pm(lo.q_a));
            q = q + ql.dot(&self.pm(lo.q_b)) * sc;
            let vl = h1.dot(&self.pm(lo.v_a));
            v = v + vl.dot(&self.pm(lo.v_b)) * sc;
            q_low = Some(ql);
            v_low = Some(vl);
        }

        let mut ctx = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let r = h * dh..(h + 1) * dh;
            let qs = q.slice(s![.., r.clone()]);
            let ks = k.slice(s![.., r.clone()]);
            let vs = v.slice(s![.., r.clone()]);
            let mut scores = qs.dot(&ks.t()) * scale;
            if isolate && p > 0 {
                scores.slice_mut(s![.., ..p]).fill(f64::NEG_INFINITY);
            }
            softmax_rows(&mut scores);
            ctx.slice_mut(s![.., r]).assign(&scores.dot(&vs));
            probs.push(scores);
        }
        let x1 = &x + &ctx.dot(&self.m(li.wo));

        let (h2, xhat2, rstd2) = layer_norm(&x1, self.v(li.ln2_g), self.v(li.ln2_b));
        let pre_act = h2.dot(&self.m(li.w1)) + &self.v(li.b1);
        let act = pre_act.mapv(gelu);
        let x2 = &x1 + &(act.dot(&self.m(li.w2)) + &self.v(li.b2));

        let (out, adapter_pre, adapter_act) = if self.peft_kind() == PeftKind::Adapter {
            let ai = self.peft.unwrap().adapter_ids(l);
            let z = x2.dot(&self.pm(ai.down)) + &self.pv(ai.down_b);
            let r = z.mapv(|v| v.max(0.0));
            let out = &x2 + &(r.dot(&self.pm(ai.up)) + &self.pv(ai.up_b));
            (out, Some(z), Some(r))
        } else {
            (x2.clone(), None, None)
        };

        (
            out,
            LayerCache {
                xhat1,
                rstd1,
                h1,
                q,
                k,
                v,
                q_low,
                v_low,
                probs,
                ctx,
                xhat2,
                rstd2,
                h2,
                pre_act,
                act,
                x2,
                adapter_pre,
                adapter_act,
            },
        )
    }

    /// MLM logits for the given token rows (indices into `ids`).
    pub fn mlm_logits(&self, cache: &SeqCache, rows: &[usize]) -> Array2<f64> {
        let bids = &self.view.backbone.ids;
        let d = self.view.config().hidden;
        let mut h = Array2::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            h.row_mut(i).assign(&cache.hidden.row(cache.prompt_len + r));
        }
        h.dot(&self.m(bids.tok_emb).t()) + &self.v(bids.mlm_bias)
    }

    pub fn cls_logits(&self, cache: &SeqCache) -> Array1<f64> {
        let bids = &self.view.backbone.ids;
        cache.hidden.row(cache.prompt_len).dot(&self.m(bids.cls_w)) + &self.v(bids.cls_b)
    }

    /// Backprop of MLM logit gradients at `rows`; accumulates into `grads`.
    pub fn backward_mlm(&self, cache: &SeqCache, rows: &[usize], dlogits: &Array2<f64>, grads: &mut GradBuffers) {
        let bids = &self.view.backbone.ids;
        let d = self.view.config().hidden;
        let t = cache.hidden.nrows();
        let mut h = Array2::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            h.row_mut(i).assign(&cache.hidden.row(cache.prompt_len + r));
        }
        let dh_rows = dlogits.dot(&self.m(bids.tok_emb));
        if let Some(gb) = grads.backbone.as_mut() {
            let demb = dlogits.t().dot(&h);
            add_into(&mut gb[self.layout.range(bids.tok_emb)], &demb);
            add_rows_into(&mut gb[self.layout.range(bids.mlm_bias)], dlogits);
        }
        let mut dhidden = Array2::zeros((t, d));
        for (i, &r) in rows.iter().enumerate() {
            let mut row = dhidden.row_mut(cache.prompt_len + r);
            row += &dh_rows.row(i);
        }
        self.backward_hidden(cache, dhidden, grads);
    }

    pub fn backward_cls(&self, cache: &SeqCache, dlogits: &Array1<f64>, grads: &mut GradBuffers) {
        let bids = &self.view.backbone.ids;
        let d = self.view.config().hidden;
        let t = cache.hidden.nrows();
        let hrow = cache.hidden.row(cache.prompt_len);
        if let Some(gb) = grads.backbone.as_mut() {
            let c = dlogits.len();
            let gw = &mut gb[self.layout.range(bids.cls_w)];
            for i in 0..d {
                for j in 0..c {
                    gw[i * c + j] += hrow[i] * dlogits[j];
                }
            }
            for (g, v) in gb[self.layout.range(bids.cls_b)].iter_mut().zip(dlogits.iter()) {
                *g += v;
            }
        }
        let mut dhidden = Array2::zeros((t, d));
        dhidden
            .row_mut(cache.prompt_len)
            .assign(&self.m(bids.cls_w).dot(dlogits));
        self.backward_hidden(cache, dhidden, grads);
    }

    fn backward_hidden(&self, cache: &SeqCache, dhidden: Array2<f64>, grads: &mut GradBuffers) {
        let cfg = self.view.config();
        let bids = &self.view.backbone.ids;
        let d = cfg.hidden;
        let mut dx = {
            let ln_grads = grads.backbone.as_mut().map(|gb| {
                let (a, b) = split_two(gb, self.layout.range(bids.lnf_g), self.layout.range(bids.lnf_b));
                (a, b)
            });
            layer_norm_backward(&dhidden, &cache.xhatf, &cache.rstdf, self.v(bids.lnf_g), ln_grads)
        };
        for l in (0..cfg.num_layers).rev() {
            dx = self.layer_backward(l, &cache.layers[l], dx, grads);
        }
        // embeddings
        let p = cache.prompt_len;
        if let Some(gb) = grads.backbone.as_mut() {
            let pos_off = self.layout.spec(bids.pos_emb).offset;
            let tok_off = self.layout.spec(bids.tok_emb).offset;
            for (i, &at) in cache.positions.iter().enumerate() {
                let row = dx.row(i);
                for j in 0..d {
                    gb[pos_off + at * d + j] += row[j];
                }
                if i >= p {
                    let id = cache.ids[i - p] as usize;
                    for j in 0..d {
                        gb[tok_off + id * d + j] += row[j];
                    }
                }
            }
        }
        if p > 0 {
            if let Some(gp) = grads.peft.as_mut() {
                for i in 0..p {
                    for j in 0..d {
                        gp[i * d + j] += dx[[i, j]];
                    }
                }
            }
        }
    }

    fn layer_backward(
        &self,
        l: usize,
        c: &LayerCache,
        dout: Array2<f64>,
        grads: &mut GradBuffers,
    ) -> Array2<f64> {
        let cfg = self.view.config();
        let li = &self.view.backbone.ids.layers[l];
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (t, d) = dout.dim();
        let lay = self.layout;

        // adapter
        let mut dx2 = dout.clone();
        if self.peft_kind() == PeftKind::Adapter {
            let ai = self.peft.unwrap().adapter_ids(l);
            let z = c.adapter_pre.as_ref().unwrap();
            let r = c.adapter_act.as_ref().unwrap();
            let mut dz = dout.dot(&self.pm(ai.up).t());
            Zip::from(&mut dz).and(z).for_each(|g, &zv| {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            });
            if let Some(gp) = grads.peft.as_mut() {
                let pl = &self.peft.unwrap().layout;
                add_into(&mut gp[pl.range(ai.up)], &r.t().dot(&dout));
                add_rows_into(&mut gp[pl.range(ai.up_b)], &dout);
                add_into(&mut gp[pl.range(ai.down)], &c.x2.t().dot(&dz));
                add_rows_into(&mut gp[pl.range(ai.down_b)], &dz);
            }
            dx2 = dx2 + dz.dot(&self.pm(ai.down).t());
        }

        // feed-forward
        let dact = dx2.dot(&self.m(li.w2).t());
        let mut dpre = dact;
        Zip::from(&mut dpre).and(&c.pre_act).for_each(|g, &u| *g *= gelu_grad(u));
        if let Some(gb) = grads.backbone.as_mut() {
            add_into(&mut gb[lay.range(li.w2)], &c.act.t().dot(&dx2));
            add_rows_into(&mut gb[lay.range(li.b2)], &dx2);
            add_into(&mut gb[lay.range(li.w1)], &c.h2.t().dot(&dpre));
            add_rows_into(&mut gb[lay.range(li.b1)], &dpre);
        }
        let dh2 = dpre.dot(&self.m(li.w1).t());
        let dx1 = {
            let g = grads
                .backbone
                .as_mut()
                .map(|gb| split_two(gb, lay.range(li.ln2_g), lay.range(li.ln2_b)));
            dx2 + layer_norm_backward(&dh2, &c.xhat2, &c.rstd2, self.v(li.ln2_g), g)
        };

        // attention
        let dctx = dx1.dot(&self.m(li.wo).t());
        if let Some(gb) = grads.backbone.as_mut() {
            add_into(&mut gb[lay.range(li.wo)], &c.ctx.t().dot(&dx1));
        }
        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for h in 0..cfg.heads {
            let r = h * dh..(h + 1) * dh;
            let probs = &c.probs[h];
            let d_o = dctx.slice(s![.., r.clone()]);
            let vs = c.v.slice(s![.., r.clone()]);
            let qs = c.q.slice(s![.., r.clone()]);
            let ks = c.k.slice(s![.., r.clone()]);
            let dprobs = d_o.dot(&vs.t());
            dv.slice_mut(s![.., r.clone()]).assign(&probs.t().dot(&d_o));
            let mut dscores = &dprobs * probs;
            let row_sums = dscores.sum_axis(Axis(1));
            for (i, mut row) in dscores.outer_iter_mut().enumerate() {
                let pr = probs.row(i);
                Zip::from(&mut row).and(&pr).for_each(|g, &pv| *g -= pv * row_sums[i]);
            }
            dscores *= scale;
            dq.slice_mut(s![.., r.clone()]).assign(&dscores.dot(&ks));
            dk.slice_mut(s![.., r]).assign(&dscores.t().dot(&qs));
        }
        if let Some(gb) = grads.backbone.as_mut() {
            add_into(&mut gb[lay.range(li.wq)], &c.h1.t().dot(&dq));
            add_into(&mut gb[lay.range(li.wk)], &c.h1.t().dot(&dk));
            add_into(&mut gb[lay.range(li.wv)], &c.h1.t().dot(&dv));
        }
        let mut dh1 = dq.dot(&self.m(li.wq).t()) + dk.dot(&self.m(li.wk).t()) + dv.dot(&self.m(li.wv).t());
        if self.peft_kind() == PeftKind::LoRA {
            let peft = self.peft.unwrap();
            let lo = peft.lora_ids(l);
            let sc = peft.lora_scale();
            for (dproj, low, a_id, b_id) in [
                (&dq, c.q_low.as_ref().unwrap(), lo.q_a, lo.q_b),
                (&dv, c.v_low.as_ref().unwrap(), lo.v_a, lo.v_b),
            ] {
                let dlow = dproj.dot(&self.pm(b_id).t()) * sc;
                if let Some(gp) = grads.peft.as_mut() {
                    add_into(&mut gp[peft.layout.range(b_id)], &(low.t().dot(dproj) * sc));
                    add_into(&mut gp[peft.layout.range(a_id)], &c.h1.t().dot(&dlow));
                }
                dh1 = dh1 + dlow.dot(&self.pm(a_id).t());
            }
        }
        let g = grads
            .backbone
            .as_mut()
            .map(|gb| split_two(gb, lay.range(li.ln1_g), lay.range(li.ln1_b)));
        dx1 + layer_norm_backward(&dh1, &c.xhat1, &c.rstd1, self.v(li.ln1_g), g)
    }
}

/// Two disjoint mutable sub-slices, `a` before `b`.
fn split_two(
    buf: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}
