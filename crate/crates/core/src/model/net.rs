use super::{conv_out, Activation, ArchKind, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::image::Image;

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// (pre-activation, post-activation) of every hidden layer.
    hidden: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ForwardCache {
    /// Pre-activations of the hidden layers, in order.
    pub fn pre_activations(&self) -> impl Iterator<Item = &[f64]> {
        self.hidden.iter().map(|(pre, _)| pre.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Vec<f64>,
    pub cache: ForwardCache,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Activation {
    fn apply(self, pre: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => pre.iter().map(|&x| x.max(0.0)).collect(),
            Activation::Tanh => pre.iter().map(|&x| x.tanh()).collect(),
        }
    }

    fn backprop(self, pre: &[f64], post: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Relu => {
                for (g, &x) in grad.iter_mut().zip(pre) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (g, &y) in grad.iter_mut().zip(post) {
                    *g *= 1.0 - y * y;
                }
            }
        }
    }
}

/// 3×3 convolution, stride 2, zero padding 1, HWC layout, weights `[ky][kx][in][out]`.
fn conv_forward(input: &[f64], h: usize, w: usize, cin: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let (oh, ow) = (conv_out(h), conv_out(w));
    let mut out = Vec::with_capacity(oh * ow * cout);
    for oy in 0..oh {
        for ox in 0..ow {
            let start = out.len();
            out.extend_from_slice(bias);
            let acc = &mut out[start..];
            for ky in 0..3 {
                let iy = (2 * oy + ky).wrapping_sub(1);
                if iy >= h {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx).wrapping_sub(1);
                    if ix >= w {
                        continue;
                    }
                    let px = &input[(iy * w + ix) * cin..][..cin];
                    let wk = &weight[(ky * 3 + kx) * cin * cout..][..cin * cout];
                    for (ic, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for (a, &wv) in acc.iter_mut().zip(&wk[ic * cout..(ic + 1) * cout]) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient when requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_dinput: bool,
) -> Option<Vec<f64>> {
    let cout = dbias.len();
    let (oh, ow) = (conv_out(h), conv_out(w));
    let mut dinput = want_dinput.then(|| vec![0.0; input.len()]);
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &dout[(oy * ow + ox) * cout..][..cout];
            for (db, &gv) in dbias.iter_mut().zip(g) {
                *db += gv;
            }
            for ky in 0..3 {
                let iy = (2 * oy + ky).wrapping_sub(1);
                if iy >= h {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx).wrapping_sub(1);
                    if ix >= w {
                        continue;
                    }
                    let base = (iy * w + ix) * cin;
                    let koff = (ky * 3 + kx) * cin * cout;
                    for ic in 0..cin {
                        let v = input[base + ic];
                        let row = koff + ic * cout;
                        let dw = &mut dweight[row..row + cout];
                        for (d, &gv) in dw.iter_mut().zip(g) {
                            *d += v * gv;
                        }
                        if let Some(di) = dinput.as_mut() {
                            let wr = &weight[row..row + cout];
                            di[base + ic] += wr.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    dinput
}

fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = input.len();
    bias.iter()
        .enumerate()
        .map(|(k, b)| {
            b + weight[k * n..(k + 1) * n]
                .iter()
                .zip(input)
                .map(|(w, x)| w * x)
                .sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_dinput: bool,
) -> Option<Vec<f64>> {
    let n = input.len();
    let mut dinput = want_dinput.then(|| vec![0.0; n]);
    for (k, &g) in dout.iter().enumerate() {
        dbias[k] += g;
        if g == 0.0 {
            continue;
        }
        for (d, &x) in dweight[k * n..(k + 1) * n].iter_mut().zip(input) {
            *d += g * x;
        }
        if let Some(di) = dinput.as_mut() {
            for (d, &wv) in di.iter_mut().zip(&weight[k * n..(k + 1) * n]) {
                *d += g * wv;
            }
        }
    }
    dinput
}

impl ModelCheckpoint {
    fn normalized(&self, image: &Image) -> Result<Vec<f64>> {
        let a = &self.arch;
        if image.height() != a.height || image.width() != a.width || image.channels() != a.channels {
            return Err(Error::InvalidArgument(format!(
                "input {}x{}x{} does not match model input {}x{}x{}",
                image.height(),
                image.width(),
                image.channels(),
                a.height,
                a.width,
                a.channels
            )));
        }
        let c = a.channels;
        let mut x = image.data().to_vec();
        for px in x.chunks_exact_mut(c) {
            for (v, m) in px.iter_mut().zip(&a.input_mean) {
                *v -= m;
            }
        }
        Ok(x)
    }

    fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }

    /// Deterministic forward pass; `image` must already have the input extents.
    pub fn forward(&self, image: &Image) -> Result<ForwardResult> {
        let input = self.normalized(image)?;
        let act = self.arch.activation;
        let blocks = self.blocks();
        let mut hidden = Vec::new();
        let logits = match self.arch.kind {
            ArchKind::ConvNet => {
                let a = &self.arch;
                let (c1, c2) = (a.hidden[0], a.hidden[1]);
                let (h1, w1) = (conv_out(a.height), conv_out(a.width));
                let pre1 = conv_forward(
                    &input,
                    a.height,
                    a.width,
                    a.channels,
                    self.slice(blocks[0].offset, blocks[0].len),
                    self.slice(blocks[1].offset, c1),
                );
                let post1 = act.apply(&pre1);
                let pre2 = conv_forward(
                    &post1,
                    h1,
                    w1,
                    c1,
                    self.slice(blocks[2].offset, blocks[2].len),
                    self.slice(blocks[3].offset, c2),
                );
                let post2 = act.apply(&pre2);
                let logits = dense_forward(
                    &post2,
                    self.slice(blocks[4].offset, blocks[4].len),
                    self.slice(blocks[5].offset, blocks[5].len),
                );
                hidden.push((pre1, post1));
                hidden.push((pre2, post2));
                logits
            }
            ArchKind::Mlp => {
                let mut x = input.clone();
                let layers = blocks.len() / 2;
                for l in 0..layers {
                    let (wb, bb) = (&blocks[2 * l], &blocks[2 * l + 1]);
                    let pre = dense_forward(&x, self.slice(wb.offset, wb.len), self.slice(bb.offset, bb.len));
                    if l + 1 == layers {
                        x = pre;
                    } else {
                        let post = act.apply(&pre);
                        x = post.clone();
                        hidden.push((pre, post));
                    }
                }
                x
            }
        };
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::non_finite("model logits"));
        }
        Ok(ForwardResult {
            logits,
            cache: ForwardCache { input, hidden },
        })
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward(image)?.logits)
    }

    /// Gradient of `Σ_k dlogits_k · z_k` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_backward(cache, dlogits, &mut grad);
        grad
    }

    pub(crate) fn accumulate_backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        let blocks = self.blocks();
        let act = self.arch.activation;
        match self.arch.kind {
            ArchKind::ConvNet => {
                let a = &self.arch;
                let (h1, w1) = (conv_out(a.height), conv_out(a.width));
                let (pre1, post1) = &cache.hidden[0];
                let (pre2, post2) = &cache.hidden[1];

                let (g_head, g_dense) = grad.split_at_mut(blocks[4].offset);
                let (gw, gb) = g_dense.split_at_mut(blocks[4].len);
                let mut d2 = dense_backward(
                    post2,
                    self.slice(blocks[4].offset, blocks[4].len),
                    dlogits,
                    gw,
                    &mut gb[..blocks[5].len],
                    true,
                )
                .expect("input gradient requested");
                act.backprop(pre2, post2, &mut d2);

                let (g_conv1, g_conv2) = g_head.split_at_mut(blocks[2].offset);
                let (gw2, gb2) = g_conv2.split_at_mut(blocks[2].len);
                let mut d1 = conv_backward(
                    post1,
                    h1,
                    w1,
                    a.hidden[0],
                    self.slice(blocks[2].offset, blocks[2].len),
                    &d2,
                    gw2,
                    &mut gb2[..blocks[3].len],
                    true,
                )
                .expect("input gradient requested");
                act.backprop(pre1, post1, &mut d1);

                let (gw1, gb1) = g_conv1.split_at_mut(blocks[0].len);
                conv_backward(
                    &cache.input,
                    a.height,
                    a.width,
                    a.channels,
                    self.slice(blocks[0].offset, blocks[0].len),
                    &d1,
                    gw1,
                    &mut gb1[..blocks[1].len],
                    false,
                );
            }
            ArchKind::Mlp => {
                let layers = blocks.len() / 2;
                let mut dout = dlogits.to_vec();
                for l in (0..layers).rev() {
                    let (wb, bb) = (&blocks[2 * l], &blocks[2 * l + 1]);
                    let input = if l == 0 { &cache.input } else { &cache.hidden[l - 1].1 };
                    let g = &mut grad[wb.offset..bb.offset + bb.len];
                    let (gw, gb) = g.split_at_mut(wb.len);
                    let din = dense_backward(input, self.slice(wb.offset, wb.len), &dout, gw, gb, l > 0);
                    if let Some(mut din) = din {
                        let (pre, post) = &cache.hidden[l - 1];
                        act.backprop(pre, post, &mut din);
                        dout = din;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0, -1000.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
        let lp = log_softmax(&[1000.0, 0.0]);
        assert!(lp[0].abs() < 1e-12 && (lp[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn zero_model_gives_uniform_softmax() {
        let m = ModelCheckpoint::zeros(ArchSpec::convnet(8, 8, 1, [2, 3], 4)).unwrap();
        let img = Image::filled(8, 8, 1, 0.7);
        let p = softmax(&m.logits(&img).unwrap());
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn conv_matches_naive_reference() {
        let (h, w, cin, cout) = (5, 4, 2, 3);
        let input: Vec<f64> = (0..h * w * cin).map(|i| (i as f64 * 0.37).sin()).collect();
        let weight: Vec<f64> = (0..9 * cin * cout).map(|i| (i as f64 * 0.11).cos()).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let out = conv_forward(&input, h, w, cin, &weight, &bias);
        let (oh, ow) = (conv_out(h), conv_out(w));
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..cout {
                    let mut acc = bias[oc];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let iy = 2 * oy as i64 + ky - 1;
                            let ix = 2 * ox as i64 + kx - 1;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            for ic in 0..cin {
                                let wv = weight[((ky as usize * 3 + kx as usize) * cin + ic) * cout + oc];
                                acc += wv * input[(iy as usize * w + ix as usize) * cin + ic];
                            }
                        }
                    }
                    let got = out[(oy * ow + ox) * cout + oc];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = ModelCheckpoint::zeros(ArchSpec::mlp(2, 2, 1, &[3], 2)).unwrap();
        assert!(m.forward(&Image::filled(2, 3, 1, 0.0)).is_err());
    }
}
