use super::{ModelConfig, ModelState, ParamGrads};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::text::TokenSequence;

/// Pixel logits are clamped to `±LOGIT_CLAMP` before the sigmoid, which
/// keeps every probability strictly inside `(0, 1)` in `f64`.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Per-pixel foreground probabilities, with `ln p` and `ln(1 − p)` kept
/// alongside so losses need no further logarithms.
#[derive(Clone, Debug, PartialEq)]
pub struct PredMask {
    height: usize,
    width: usize,
    probs: Vec<f64>,
    log_p: Vec<f64>,
    log_q: Vec<f64>,
}

impl PredMask {
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::invalid("prediction length does not match dimensions"));
        }
        if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::invalid("predicted probabilities must lie strictly inside (0, 1)"));
        }
        let log_p = probs.iter().map(|p| p.ln()).collect();
        let log_q = probs.iter().map(|p| (-p).ln_1p()).collect();
        Ok(Self {
            height,
            width,
            probs,
            log_p,
            log_q,
        })
    }

    pub fn filled(height: usize, width: usize, p: f64) -> Result<Self> {
        Self::new(height, width, vec![p; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `ln p` per pixel.
    pub fn log_probs(&self) -> &[f64] {
        &self.log_p
    }

    /// `ln(1 − p)` per pixel.
    pub fn log_complements(&self) -> &[f64] {
        &self.log_q
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

struct LayerCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    nbr: Vec<f64>,
    /// Half-plane means: left/right per column, above/below per row.
    agg: [Vec<f64>; 4],
    /// `direction[k] · agg[k]`, same indexing as `agg`.
    dir_out: [Vec<f64>; 4],
    gates: [f64; 4],
}

/// Intermediates of one forward pass, consumed by [`backward`].
pub struct ForwardCache {
    config: ModelConfig,
    step: u64,
    pixels: Vec<f64>,
    /// Pooled patch inputs, `patches × patch_len`.
    pooled: Vec<f64>,
    /// Patches whose pixels are all zero.
    blank: Vec<bool>,
    ids: Vec<u16>,
    words: Vec<f64>,
    sentence: Vec<f64>,
    /// `hidden[l]` is the input of fusion layer `l`; the last entry feeds the head.
    hidden: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    raw_logits: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[cfg(test)]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `(σ(z), ln σ(z), ln(1 − σ(z)))` with one exponential and one `ln_1p`.
fn logistic(z: f64) -> (f64, f64, f64) {
    if z >= 0.0 {
        let e = (-z).exp();
        let lp = -e.ln_1p();
        (1.0 / (1.0 + e), lp, lp - z)
    } else {
        let e = z.exp();
        let lq = -e.ln_1p();
        (e / (1.0 + e), lq + z, lq)
    }
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out = W x` for row-major `W`.
fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o = dot(row, x);
    }
}

/// `out += Wᵀ y`.
fn matvec_t_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (&yi, row) in y.iter().zip(w.chunks_exact(n)) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += yi * a;
        }
    }
}

/// `dw += y xᵀ`.
fn outer_acc(dw: &mut [f64], y: &[f64], x: &[f64]) {
    let n = x.len();
    for (&yi, row) in y.iter().zip(dw.chunks_exact_mut(n)) {
        for (r, xv) in row.iter_mut().zip(x) {
            *r += yi * xv;
        }
    }
}

/// Indices of the 3×3 neighborhood of patch `(r, c)` inside the grid.
fn neighbors(rows: usize, cols: usize, r: usize, c: usize) -> impl Iterator<Item = usize> {
    let rs = r.saturating_sub(1)..(r + 2).min(rows);
    rs.flat_map(move |rr| (c.saturating_sub(1)..(c + 2).min(cols)).map(move |cc| rr * cols + cc))
}

fn neighbor_count(rows: usize, cols: usize, r: usize, c: usize) -> f64 {
    let h = (r + 2).min(rows) - r.saturating_sub(1);
    let w = (c + 2).min(cols) - c.saturating_sub(1);
    (h * w) as f64
}

/// Averages `pool × pool` pixel blocks; row `i` holds patch `i`'s cells in
/// row-major order, channels innermost.
fn pool_patches(cfg: &ModelConfig, pixels: &[f64]) -> Vec<f64> {
    let (rows, cols, ps, pool) = (cfg.grid_rows(), cfg.grid_cols(), cfg.patch_size, cfg.pool);
    let side = cfg.cells_per_side();
    let plen = cfg.patch_len();
    let w_img = cfg.image_width;
    let norm = 1.0 / (pool * pool) as f64;
    let mut out = vec![0.0; rows * cols * plen];
    for y in 0..cfg.image_height {
        let (pr, cy) = (y / ps, (y % ps) / pool);
        let line = &pixels[y * w_img * 3..(y + 1) * w_img * 3];
        for (pc, seg) in line.chunks_exact(ps * 3).enumerate() {
            let row = &mut out[(pr * cols + pc) * plen + cy * side * 3..][..side * 3];
            for (cell, block) in row.chunks_exact_mut(3).zip(seg.chunks_exact(pool * 3)) {
                for px in block.chunks_exact(3) {
                    cell[0] += px[0];
                    cell[1] += px[1];
                    cell[2] += px[2];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

/// Mean hidden state over the patches strictly left of, right of, above
/// and below each column or row, normalized by the total patch count.
/// Entries 0 and 1 are indexed by column, 2 and 3 by row.
fn half_plane_means(h: &[f64], rows: usize, cols: usize, d: usize) -> [Vec<f64>; 4] {
    let norm = 1.0 / (rows * cols) as f64;
    let mut col_sum = vec![0.0; cols * d];
    let mut row_sum = vec![0.0; rows * d];
    for r in 0..rows {
        for c in 0..cols {
            let hi = &h[(r * cols + c) * d..][..d];
            for t in 0..d {
                col_sum[c * d + t] += hi[t];
                row_sum[r * d + t] += hi[t];
            }
        }
    }
    let before = |sums: &[f64], n: usize| {
        let mut out = vec![0.0; n * d];
        for i in 1..n {
            for t in 0..d {
                out[i * d + t] = out[(i - 1) * d + t] + sums[(i - 1) * d + t] * norm;
            }
        }
        out
    };
    let after = |sums: &[f64], n: usize| {
        let mut out = vec![0.0; n * d];
        for i in (0..n.saturating_sub(1)).rev() {
            for t in 0..d {
                out[i * d + t] = out[(i + 1) * d + t] + sums[(i + 1) * d + t] * norm;
            }
        }
        out
    };
    [before(&col_sum, cols), after(&col_sum, cols), before(&row_sum, rows), after(&row_sum, rows)]
}

/// Adjoint of [`half_plane_means`], accumulated into `dh`.
fn half_plane_means_backward(dagg: &[Vec<f64>; 4], rows: usize, cols: usize, d: usize, dh: &mut [f64]) {
    let norm = 1.0 / (rows * cols) as f64;
    // d sum[j] = Σ_{i > j} d before[i] + Σ_{i < j} d after[i]
    let sums = |dbefore: &[f64], dafter: &[f64], n: usize| {
        let mut out = vec![0.0; n * d];
        let mut run = vec![0.0; d];
        for j in (0..n).rev() {
            for t in 0..d {
                out[j * d + t] += run[t] * norm;
                run[t] += dbefore[j * d + t];
            }
        }
        run.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..n {
            for t in 0..d {
                out[j * d + t] += run[t] * norm;
                run[t] += dafter[j * d + t];
            }
        }
        out
    };
    let dcol = sums(&dagg[0], &dagg[1], cols);
    let drow = sums(&dagg[2], &dagg[3], rows);
    for r in 0..rows {
        for c in 0..cols {
            let di = &mut dh[(r * cols + c) * d..][..d];
            for t in 0..d {
                di[t] += dcol[c * d + t] + drow[r * d + t];
            }
        }
    }
}

/// Computes the predicted mask for `(image, tokens)`.
///
/// Pipeline: each patch is average-pooled in `pool × pool` blocks, linearly
/// projected to `D` dims and offset by a learned position embedding and the
/// mean of the valid word embeddings. Each fusion layer lets patches attend
/// to the words (single-head cross-attention), mixes in the 3×3 patch
/// neighborhood and the four half-plane means (each scaled by a gate that
/// is linear in the sentence vector), and applies `tanh` to the residual
/// sum. The head emits a patch logit, nearest-
/// upsampled to the patch's pixels, plus a patch-conditioned linear
/// function of each pixel's color.
pub fn forward(state: &ModelState, image: &ImageBuffer, tokens: &TokenSequence) -> Result<(PredMask, ForwardCache)> {
    let cfg = state.config;
    if image.height() != cfg.image_height || image.width() != cfg.image_width {
        return Err(Error::invalid(format!(
            "image {}x{} does not match model input {}x{}",
            image.height(),
            image.width(),
            cfg.image_height,
            cfg.image_width
        )));
    }
    if tokens.valid_len() == 0 {
        return Err(Error::invalid("expression has no valid tokens"));
    }
    if let Some(&bad) = tokens.valid().iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let p = &state.params;
    let lay = &state.layout;
    let d = cfg.embed_dim;
    let (rows, cols, ps) = (cfg.grid_rows(), cfg.grid_cols(), cfg.patch_size);
    let g = rows * cols;
    let w_img = cfg.image_width;
    let pixels: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();

    let ids: Vec<u16> = tokens.valid().to_vec();
    let l = ids.len();
    let mut words = vec![0.0; l * d];
    for (j, &id) in ids.iter().enumerate() {
        let row = &p[lay.word_emb.start + id as usize * d..][..d];
        words[j * d..(j + 1) * d].copy_from_slice(row);
    }
    let mut sentence = vec![0.0; d];
    for row in words.chunks_exact(d) {
        for (s, w) in sentence.iter_mut().zip(row) {
            *s += w;
        }
    }
    sentence.iter_mut().for_each(|s| *s /= l as f64);

    // Pooling and patch projection.
    let pooled = pool_patches(&cfg, &pixels);
    let patch_w = &p[lay.patch_w.clone()];
    let patch_b = &p[lay.patch_b.clone()];
    let pos = &p[lay.pos.clone()];
    let plen = cfg.patch_len();
    let mut h0 = vec![0.0; g * d];
    for i in 0..g {
        let u = &mut h0[i * d..(i + 1) * d];
        for t in 0..d {
            u[t] = patch_b[t] + pos[i * d + t] + sentence[t];
        }
        for (&xv, wrow) in pooled[i * plen..(i + 1) * plen].iter().zip(patch_w.chunks_exact(d)) {
            if xv == 0.0 {
                continue;
            }
            for (ut, wt) in u.iter_mut().zip(wrow) {
                *ut += xv * wt;
            }
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut hidden = vec![h0];
    let mut layers = Vec::with_capacity(cfg.fusion_layers);
    for ll in &lay.layers {
        let h = hidden.last().unwrap();
        let (wq, wk, wv) = (&p[ll.query.clone()], &p[ll.key.clone()], &p[ll.value.clone()]);
        let (wo, wn, b) = (&p[ll.output.clone()], &p[ll.neighbor.clone()], &p[ll.bias.clone()]);
        let mut k = vec![0.0; l * d];
        let mut v = vec![0.0; l * d];
        for j in 0..l {
            let e = &words[j * d..(j + 1) * d];
            matvec(wk, e, &mut k[j * d..(j + 1) * d]);
            matvec(wv, e, &mut v[j * d..(j + 1) * d]);
        }
        let mut q = vec![0.0; g * d];
        let mut attn = vec![0.0; g * l];
        let mut ctx = vec![0.0; g * d];
        let mut nbr = vec![0.0; g * d];
        let mut out = vec![0.0; g * d];
        let mut tmp = vec![0.0; d];
        let agg = half_plane_means(h, rows, cols, d);
        let wdir = &p[ll.direction.clone()];
        let dir_out: [Vec<f64>; 4] = std::array::from_fn(|k| {
            let wk = &wdir[k * d * d..(k + 1) * d * d];
            let mut y = vec![0.0; agg[k].len()];
            for (src, dst) in agg[k].chunks_exact(d).zip(y.chunks_exact_mut(d)) {
                matvec(wk, src, dst);
            }
            y
        });
        let (gu, gc) = (&p[ll.gate_u.clone()], &p[ll.gate_c.clone()]);
        let gates: [f64; 4] =
            std::array::from_fn(|k| gc[k] + dot(&gu[k * d..(k + 1) * d], &sentence));
        for i in 0..g {
            let hi = &h[i * d..(i + 1) * d];
            let qi = &mut q[i * d..(i + 1) * d];
            matvec(wq, hi, qi);
            let a = &mut attn[i * l..(i + 1) * l];
            for j in 0..l {
                a[j] = scale * dot(qi, &k[j * d..(j + 1) * d]);
            }
            let m = a.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
            let mut z = 0.0;
            for s in a.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            a.iter_mut().for_each(|s| *s /= z);
            let ci = &mut ctx[i * d..(i + 1) * d];
            for j in 0..l {
                for (c, vv) in ci.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *c += a[j] * vv;
                }
            }
            let (r, c) = (i / cols, i % cols);
            let ni = &mut nbr[i * d..(i + 1) * d];
            for nb in neighbors(rows, cols, r, c) {
                for (x, y) in ni.iter_mut().zip(&h[nb * d..(nb + 1) * d]) {
                    *x += y;
                }
            }
            let cnt = neighbor_count(rows, cols, r, c);
            ni.iter_mut().for_each(|x| *x /= cnt);

            let oi = &mut out[i * d..(i + 1) * d];
            for t in 0..d {
                oi[t] = hi[t] + b[t];
            }
            for (k, at) in [c, c, r, r].into_iter().enumerate() {
                let y = &dir_out[k][at * d..(at + 1) * d];
                oi.iter_mut().zip(y).for_each(|(o, v)| *o += gates[k] * v);
            }
            matvec(wo, &ctx[i * d..(i + 1) * d], &mut tmp);
            oi.iter_mut().zip(&tmp).for_each(|(o, x)| *o += x);
            matvec(wn, &nbr[i * d..(i + 1) * d], &mut tmp);
            oi.iter_mut().zip(&tmp).for_each(|(o, x)| *o = (*o + x).tanh());
        }
        layers.push(LayerCache {
            q,
            k,
            v,
            attn,
            ctx,
            nbr,
            agg,
            dir_out,
            gates,
        });
        hidden.push(out);
    }

    // Head.
    let h = hidden.last().unwrap();
    let head_w = &p[lay.head_w.clone()];
    let head_b = p[lay.head_b.start];
    let gate_w = &p[lay.gate_w.clone()];
    let gate_b = &p[lay.gate_b.clone()];
    let n_pix = cfg.image_height * cfg.image_width;
    let mut raw_logits = vec![0.0; n_pix];
    let mut probs = vec![0.0; n_pix];
    let mut log_p = vec![0.0; n_pix];
    let mut log_q = vec![0.0; n_pix];
    let mut gate = [0.0; 3];
    let blank: Vec<bool> = pooled.chunks_exact(plen).map(|c| c.iter().all(|&v| v == 0.0)).collect();
    for i in 0..g {
        let hi = &h[i * d..(i + 1) * d];
        let zi = head_b + dot(hi, head_w);
        matvec(gate_w, hi, &mut gate);
        for (gc, bc) in gate.iter_mut().zip(gate_b) {
            *gc += bc;
        }
        let (pr, pc) = (i / cols, i % cols);
        if blank[i] {
            // Every pixel is black, so every pixel gets the same logit.
            let z = zi + gate[0] * 0.0 + gate[1] * 0.0 + gate[2] * 0.0;
            let out = logistic(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
            for py in 0..ps {
                let row = (pr * ps + py) * w_img + pc * ps;
                raw_logits[row..row + ps].fill(z);
                probs[row..row + ps].fill(out.0);
                log_p[row..row + ps].fill(out.1);
                log_q[row..row + ps].fill(out.2);
            }
            continue;
        }
        for py in 0..ps {
            for px in 0..ps {
                let pix = (pr * ps + py) * w_img + pc * ps + px;
                let rgb = &pixels[pix * 3..pix * 3 + 3];
                let z = zi + gate[0] * rgb[0] + gate[1] * rgb[1] + gate[2] * rgb[2];
                raw_logits[pix] = z;
                (probs[pix], log_p[pix], log_q[pix]) = logistic(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
            }
        }
    }

    let pred = PredMask {
        height: cfg.image_height,
        width: cfg.image_width,
        probs: probs.clone(),
        log_p,
        log_q,
    };
    let cache = ForwardCache {
        config: cfg,
        step: state.step,
        pixels,
        pooled,
        blank,
        ids,
        words,
        sentence,
        hidden,
        layers,
        raw_logits,
        probs,
    };
    Ok((pred, cache))
}

/// Exact reverse-mode gradient of `Σ grad_wrt_pred[i] · pred[i]` with
/// respect to every parameter.
pub fn backward(state: &ModelState, cache: &ForwardCache, grad_wrt_pred: &[f64]) -> Result<ParamGrads> {
    let mut grads = ParamGrads::zeros(state.num_params());
    backward_into(state, cache, grad_wrt_pred, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into `grads`.
pub fn backward_into(state: &ModelState, cache: &ForwardCache, grad_wrt_pred: &[f64], grads: &mut ParamGrads) -> Result<()> {
    if cache.step != state.step || cache.config != state.config {
        return Err(Error::InvalidState(format!(
            "forward cache from step {} used with state at step {}",
            cache.step, state.step
        )));
    }
    if grad_wrt_pred.len() != cache.probs.len() {
        return Err(Error::invalid("upstream gradient length does not match prediction"));
    }
    if grads.0.len() != state.num_params() {
        return Err(Error::invalid("gradient buffer does not match parameter count"));
    }
    let cfg = state.config;
    let p = &state.params;
    let lay = &state.layout;
    let gr = &mut grads.0;
    let d = cfg.embed_dim;
    let (rows, cols, ps) = (cfg.grid_rows(), cfg.grid_cols(), cfg.patch_size);
    let g = rows * cols;
    let w_img = cfg.image_width;
    let l = cache.ids.len();

    // Head.
    let h_last = cache.hidden.last().unwrap();
    let head_w = &p[lay.head_w.clone()];
    let gate_w = &p[lay.gate_w.clone()];
    let mut dh = vec![0.0; g * d];
    for i in 0..g {
        let (pr, pc) = (i / cols, i % cols);
        let mut dz = 0.0;
        let mut dgate = [0.0; 3];
        for py in 0..ps {
            for px in 0..ps {
                let pix = (pr * ps + py) * w_img + pc * ps + px;
                let raw = cache.raw_logits[pix];
                if raw.abs() > LOGIT_CLAMP {
                    continue;
                }
                let pv = cache.probs[pix];
                let dl = grad_wrt_pred[pix] * pv * (1.0 - pv);
                dz += dl;
                if cache.blank[i] {
                    continue;
                }
                let rgb = &cache.pixels[pix * 3..pix * 3 + 3];
                for c in 0..3 {
                    dgate[c] += dl * rgb[c];
                }
            }
        }
        let hi = &h_last[i * d..(i + 1) * d];
        for t in 0..d {
            gr[lay.head_w.start + t] += dz * hi[t];
        }
        gr[lay.head_b.start] += dz;
        outer_acc(&mut gr[lay.gate_w.clone()], &dgate, hi);
        for c in 0..3 {
            gr[lay.gate_b.start + c] += dgate[c];
        }
        let dhi = &mut dh[i * d..(i + 1) * d];
        for t in 0..d {
            dhi[t] += dz * head_w[t];
        }
        matvec_t_acc(gate_w, &dgate, dhi);
    }

    // Fusion layers, last to first.
    let scale = 1.0 / (d as f64).sqrt();
    let mut dwords = vec![0.0; l * d];
    let mut dsent = vec![0.0; d];
    for (li, ll) in lay.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let h_in = &cache.hidden[li];
        let h_out = &cache.hidden[li + 1];
        let (wq, wk, wv) = (&p[ll.query.clone()], &p[ll.key.clone()], &p[ll.value.clone()]);
        let (wo, wn) = (&p[ll.output.clone()], &p[ll.neighbor.clone()]);
        let mut dh_in = vec![0.0; g * d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        let mut dpre = vec![0.0; d];
        let mut dctx = vec![0.0; d];
        let mut dnbr = vec![0.0; d];
        let mut dq = vec![0.0; d];
        let mut da = vec![0.0; l];
        let mut dy: [Vec<f64>; 4] = std::array::from_fn(|k| vec![0.0; lc.agg[k].len()]);
        let mut dgates = [0.0; 4];
        for i in 0..g {
            let seg = i * d..(i + 1) * d;
            for t in 0..d {
                let o = h_out[i * d + t];
                dpre[t] = dh[i * d + t] * (1.0 - o * o);
            }
            for t in 0..d {
                dh_in[i * d + t] += dpre[t];
                gr[ll.bias.start + t] += dpre[t];
            }
            let (r, c) = (i / cols, i % cols);
            for (k, at) in [c, c, r, r].into_iter().enumerate() {
                let y = &lc.dir_out[k][at * d..(at + 1) * d];
                dgates[k] += dot(&dpre, y);
                let dyk = &mut dy[k][at * d..(at + 1) * d];
                dyk.iter_mut().zip(&dpre).for_each(|(x, v)| *x += lc.gates[k] * v);
            }
            outer_acc(&mut gr[ll.output.clone()], &dpre, &lc.ctx[seg.clone()]);
            dctx.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_acc(wo, &dpre, &mut dctx);
            outer_acc(&mut gr[ll.neighbor.clone()], &dpre, &lc.nbr[seg.clone()]);
            dnbr.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_acc(wn, &dpre, &mut dnbr);
            let cnt = neighbor_count(rows, cols, r, c);
            for nb in neighbors(rows, cols, r, c) {
                for t in 0..d {
                    dh_in[nb * d + t] += dnbr[t] / cnt;
                }
            }

            let a = &lc.attn[i * l..(i + 1) * l];
            for j in 0..l {
                let vj = &lc.v[j * d..(j + 1) * d];
                da[j] = dot(&dctx, vj);
                for t in 0..d {
                    dv[j * d + t] += a[j] * dctx[t];
                }
            }
            let a_da = dot(a, &da);
            dq.iter_mut().for_each(|x| *x = 0.0);
            let qi = &lc.q[seg.clone()];
            for j in 0..l {
                let ds = a[j] * (da[j] - a_da) * scale;
                for t in 0..d {
                    dq[t] += ds * lc.k[j * d + t];
                    dk[j * d + t] += ds * qi[t];
                }
            }
            outer_acc(&mut gr[ll.query.clone()], &dq, &h_in[seg.clone()]);
            matvec_t_acc(wq, &dq, &mut dh_in[seg]);
        }
        let wdir = &p[ll.direction.clone()];
        let mut dagg: [Vec<f64>; 4] = std::array::from_fn(|k| vec![0.0; lc.agg[k].len()]);
        for k in 0..4 {
            let wk = &wdir[k * d * d..(k + 1) * d * d];
            let base = ll.direction.start + k * d * d;
            for ((dyv, src), dst) in dy[k].chunks_exact(d).zip(lc.agg[k].chunks_exact(d)).zip(dagg[k].chunks_exact_mut(d)) {
                outer_acc(&mut gr[base..base + d * d], dyv, src);
                matvec_t_acc(wk, dyv, dst);
            }
            let gu = &p[ll.gate_u.start + k * d..ll.gate_u.start + (k + 1) * d];
            for t in 0..d {
                gr[ll.gate_u.start + k * d + t] += dgates[k] * cache.sentence[t];
                dsent[t] += dgates[k] * gu[t];
            }
            gr[ll.gate_c.start + k] += dgates[k];
        }
        half_plane_means_backward(&dagg, rows, cols, d, &mut dh_in);
        for j in 0..l {
            let e = &cache.words[j * d..(j + 1) * d];
            outer_acc(&mut gr[ll.key.clone()], &dk[j * d..(j + 1) * d], e);
            outer_acc(&mut gr[ll.value.clone()], &dv[j * d..(j + 1) * d], e);
            matvec_t_acc(wk, &dk[j * d..(j + 1) * d], &mut dwords[j * d..(j + 1) * d]);
            matvec_t_acc(wv, &dv[j * d..(j + 1) * d], &mut dwords[j * d..(j + 1) * d]);
        }
        dh = dh_in;
    }

    // Patch projection, positions and the mean-pooled sentence offset.
    let plen = cfg.patch_len();
    for i in 0..g {
        let du = &dh[i * d..(i + 1) * d];
        for t in 0..d {
            gr[lay.patch_b.start + t] += du[t];
            gr[lay.pos.start + i * d + t] += du[t];
            dsent[t] += du[t];
        }
        let wgrad = &mut gr[lay.patch_w.clone()];
        for (&xv, wrow) in cache.pooled[i * plen..(i + 1) * plen].iter().zip(wgrad.chunks_exact_mut(d)) {
            if xv == 0.0 {
                continue;
            }
            for (wt, dt) in wrow.iter_mut().zip(du) {
                *wt += xv * dt;
            }
        }
    }
    for j in 0..l {
        for t in 0..d {
            dwords[j * d + t] += dsent[t] / l as f64;
        }
        let id = cache.ids[j] as usize;
        for t in 0..d {
            gr[lay.word_emb.start + id * d + t] += dwords[j * d + t];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::rng::RngStream;
    use crate::text::{tokenize, Vocabulary, PAD};

    fn small() -> (ModelState, ImageBuffer, TokenSequence) {
        let cfg = ModelConfig {
            image_height: 16,
            image_width: 16,
            ..Default::default()
        };
        let state = init_params(cfg, &mut RngStream::new(0, "init")).unwrap();
        let mut rng = RngStream::new(1, "img");
        let data = (0..16 * 16 * 3).map(|_| rng.uniform() as f32).collect();
        let img = ImageBuffer::from_raw(16, 16, data).unwrap();
        let toks = tokenize("second red circle left", &Vocabulary::standard(), 20);
        (state, img, toks)
    }

    #[test]
    fn output_shape_and_range() {
        let (s, img, t) = small();
        let (pred, _) = forward(&s, &img, &t).unwrap();
        assert_eq!((pred.height(), pred.width()), (16, 16));
        let lo = sigmoid(-LOGIT_CLAMP);
        let hi = sigmoid(LOGIT_CLAMP);
        assert!(pred.probs().iter().all(|&p| p >= lo && p <= hi && p > 0.0 && p < 1.0));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let (s, _, t) = small();
        assert!(forward(&s, &ImageBuffer::new(8, 16), &t).is_err());
        let img = ImageBuffer::new(16, 16);
        let empty = tokenize("", &Vocabulary::standard(), 20);
        assert!(forward(&s, &img, &empty).is_err());
        let oov = TokenSequence::new(vec![200, PAD], 1).unwrap();
        assert!(forward(&s, &img, &oov).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (s, img, t) = small();
        let (_, cache) = forward(&s, &img, &t).unwrap();
        let g = backward(&s, &cache, &vec![0.0; 256]).unwrap();
        assert!(g.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let (mut s, img, t) = small();
        let (_, cache) = forward(&s, &img, &t).unwrap();
        s.step += 1;
        assert!(matches!(backward(&s, &cache, &vec![1.0; 256]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn pad_rows_receive_no_gradient() {
        let (s, img, t) = small();
        let (_, cache) = forward(&s, &img, &t).unwrap();
        let g = backward(&s, &cache, &vec![0.3; 256]).unwrap();
        let d = s.config.embed_dim;
        let row = s.layout.word_emb.start + PAD as usize * d;
        assert!(g.0[row..row + d].iter().all(|&x| x == 0.0));
        let used = s.layout.word_emb.start + t.ids()[0] as usize * d;
        assert!(g.0[used..used + d].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn deterministic_forward() {
        let (s, img, t) = small();
        let (a, _) = forward(&s, &img, &t).unwrap();
        let (b, _) = forward(&s, &img, &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn neighbor_counts() {
        assert_eq!(neighbor_count(8, 8, 0, 0), 4.0);
        assert_eq!(neighbor_count(8, 8, 0, 3), 6.0);
        assert_eq!(neighbor_count(8, 8, 4, 4), 9.0);
        assert_eq!(neighbors(8, 8, 7, 7).count(), 4);
        assert_eq!(neighbor_count(1, 1, 0, 0), 1.0);
    }
}
