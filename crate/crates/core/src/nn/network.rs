use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::layers::LayerSpec;
use crate::error::{Error, Result};
use crate::tensor::{SparsityMask, Tensor};

/// Weight and bias of one parametric layer. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Param {
    pub fn zeros_like(other: &Param) -> Self {
        Param {
            weight: Tensor::zeros(other.weight.shape()),
            bias: vec![0.0; other.bias.len()],
        }
    }
}

/// Gradients of every parametric layer, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Param>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net.params.iter().map(Param::zeros_like).collect(),
        }
    }
}

/// Zero every gradient entry at a pruned position.
pub fn apply_gradient_mask(grads: &mut Gradients, masks: &[Option<SparsityMask>]) -> Result<()> {
    if grads.layers.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} gradient layers but {} masks",
            grads.layers.len(),
            masks.len()
        )));
    }
    for (g, m) in grads.layers.iter_mut().zip(masks) {
        if let Some(m) = m {
            m.apply(&mut g.weight)?;
        }
    }
    Ok(())
}

/// A feed-forward network: ordered layers plus one [`Param`] and an optional
/// mask per parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// `shapes[l]` is the per-sample input shape of layer `l`; the last entry is the output.
    shapes: Vec<Vec<usize>>,
    /// Index into `layers` for each parametric layer.
    param_layers: Vec<usize>,
    params: Vec<Param>,
    masks: Vec<Option<SparsityMask>>,
}

struct LayerCache {
    input: Vec<f64>,
    /// im2col buffers for conv layers, one `[K, P]` block per sample.
    cols: Vec<f64>,
    /// Flat argmax positions for max-pool.
    argmax: Vec<usize>,
}

pub struct ForwardCache {
    n: usize,
    layers: Vec<LayerCache>,
}

impl Network {
    /// Build a network with He-uniform weights and zero biases.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        let params = layers
            .iter()
            .filter_map(|spec| {
                let shape = spec.weight_shape()?;
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Some(Param {
                    weight: Tensor::new(shape, data).expect("shape from spec"),
                    bias: vec![0.0; spec.bias_len().expect("parametric")],
                })
            })
            .collect();
        Self::from_params(input_shape, layers, params)
    }

    pub fn from_params(input_shape: Vec<usize>, layers: Vec<LayerSpec>, params: Vec<Param>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, spec) in layers.iter().enumerate() {
            let out = spec
                .output_shape(shapes.last().expect("nonempty"))
                .map_err(|e| Error::shape(format!("layer {i}: {e}")))?;
            shapes.push(out);
        }
        let param_layers: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_parametric())
            .map(|(i, _)| i)
            .collect();
        if params.len() != param_layers.len() {
            return Err(Error::shape(format!(
                "{} parametric layers but {} parameter sets",
                param_layers.len(),
                params.len()
            )));
        }
        for (p, &li) in params.iter().zip(&param_layers) {
            let spec = &layers[li];
            let ws = spec.weight_shape().expect("parametric");
            if p.weight.shape() != ws.as_slice() || p.bias.len() != spec.bias_len().expect("parametric") {
                return Err(Error::shape(format!(
                    "layer {li}: parameter shape {:?}/{} does not match {:?}",
                    p.weight.shape(),
                    p.bias.len(),
                    ws
                )));
            }
        }
        if shapes.last().expect("nonempty").len() != 1 {
            return Err(Error::shape("network must end in a flat logit vector"));
        }
        let masks = vec![None; params.len()];
        Ok(Self {
            input_shape,
            layers,
            shapes,
            param_layers,
            params,
            masks,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().expect("nonempty")[0]
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Number of parametric layers `N`.
    pub fn depth(&self) -> usize {
        self.params.len()
    }

    pub fn param_spec(&self, i: usize) -> &LayerSpec {
        &self.layers[self.param_layers[i]]
    }

    pub fn is_conv(&self, i: usize) -> bool {
        matches!(self.param_spec(i), LayerSpec::Conv2d { .. })
    }

    pub fn has_conv(&self) -> bool {
        (0..self.depth()).any(|i| self.is_conv(i))
    }

    /// Stable human-readable names: `conv1`, `conv2`, ..., `fc1`, `fc2`, ...
    pub fn layer_names(&self) -> Vec<String> {
        let (mut conv, mut fc) = (0, 0);
        (0..self.depth())
            .map(|i| {
                if self.is_conv(i) {
                    conv += 1;
                    format!("conv{conv}")
                } else {
                    fc += 1;
                    format!("fc{fc}")
                }
            })
            .collect()
    }

    pub fn masks(&self) -> &[Option<SparsityMask>] {
        &self.masks
    }

    /// Install (or replace) the mask of layer `i` and zero the pruned weights.
    pub fn set_mask(&mut self, i: usize, mask: SparsityMask) -> Result<()> {
        mask.apply(&mut self.params[i].weight)?;
        self.masks[i] = Some(mask);
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        self.masks.iter_mut().for_each(|m| *m = None);
    }

    /// Effective mask of layer `i` (all-ones when none is installed).
    pub fn mask_or_ones(&self, i: usize) -> SparsityMask {
        self.masks[i]
            .clone()
            .unwrap_or_else(|| SparsityMask::ones(self.params[i].weight.shape()))
    }

    pub(crate) fn enforce_masks(&mut self) {
        for (p, m) in self.params.iter_mut().zip(&self.masks) {
            if let Some(m) = m {
                m.apply(&mut p.weight).expect("mask shape checked on install");
            }
        }
    }

    fn check_batch(&self, inputs: &[f64], n: usize) -> Result<()> {
        if inputs.len() != n * self.input_len() {
            return Err(Error::shape(format!(
                "batch of {n} needs {} input values, got {}",
                n * self.input_len(),
                inputs.len()
            )));
        }
        Ok(())
    }

    /// Logits for `n` samples, row-major `[n, classes]`.
    pub fn logits(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_batch(inputs, n)?;
        let mut x = inputs.to_vec();
        let mut scratch = LayerCache {
            input: Vec::new(),
            cols: Vec::new(),
            argmax: Vec::new(),
        };
        for l in 0..self.layers.len() {
            x = self.layer_forward(l, &x, n, &mut scratch);
        }
        Ok(x)
    }

    pub fn forward(&self, inputs: &[f64], n: usize) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_batch(inputs, n)?;
        let mut x = inputs.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let mut cache = LayerCache {
                input: Vec::new(),
                cols: Vec::new(),
                argmax: Vec::new(),
            };
            let y = self.layer_forward(l, &x, n, &mut cache);
            cache.input = x;
            caches.push(cache);
            x = y;
        }
        Ok((x, ForwardCache { n, layers: caches }))
    }

    fn param_index(&self, layer: usize) -> usize {
        self.param_layers
            .iter()
            .position(|&l| l == layer)
            .expect("parametric layer")
    }

    fn layer_forward(&self, l: usize, x: &[f64], n: usize, cache: &mut LayerCache) -> Vec<f64> {
        let in_shape = &self.shapes[l];
        let out_len: usize = self.shapes[l + 1].iter().product();
        match self.layers[l] {
            LayerSpec::Dense { input, output } => {
                let p = &self.params[self.param_index(l)];
                let mut y = vec![0.0; n * output];
                for row in y.chunks_exact_mut(output) {
                    row.copy_from_slice(&p.bias);
                }
                gemm(n, input, output, x, false, p.weight.data(), true, 1.0, &mut y);
                y
            }
            LayerSpec::Conv2d {
                filters,
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => {
                let p = &self.params[self.param_index(l)];
                let geom = ConvGeom::new(in_shape, kernel_h, kernel_w, stride, padding);
                let (k, pos) = (geom.k(), geom.positions());
                let in_len: usize = in_shape.iter().product();
                cache.cols = vec![0.0; n * k * pos];
                let mut y = vec![0.0; n * out_len];
                for s in 0..n {
                    let cols = &mut cache.cols[s * k * pos..(s + 1) * k * pos];
                    geom.im2col(&x[s * in_len..(s + 1) * in_len], cols);
                    let ys = &mut y[s * out_len..(s + 1) * out_len];
                    for (f, row) in ys.chunks_exact_mut(pos).enumerate() {
                        row.iter_mut().for_each(|v| *v = p.bias[f]);
                    }
                    gemm(filters, k, pos, p.weight.data(), false, cols, false, 1.0, ys);
                }
                y
            }
            LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::MaxPool2x2 => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (ho, wo) = (h / 2, w / 2);
                let in_len = c * h * w;
                let mut y = vec![0.0; n * out_len];
                cache.argmax = vec![0; n * out_len];
                for s in 0..n {
                    let xs = &x[s * in_len..(s + 1) * in_len];
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut best = ch * h * w + (2 * oy) * w + 2 * ox;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                                    if xs[idx] > xs[best] {
                                        best = idx;
                                    }
                                }
                                let o = s * out_len + (ch * ho + oy) * wo + ox;
                                y[o] = xs[best];
                                cache.argmax[o] = s * in_len + best;
                            }
                        }
                    }
                }
                y
            }
            LayerSpec::Flatten => x.to_vec(),
        }
    }

    /// Backpropagate `dlogits` through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Gradients {
        let n = cache.n;
        let mut grads = Gradients::zeros_like(self);
        let mut dy = dlogits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let lc = &cache.layers[l];
            let in_shape = &self.shapes[l];
            let in_len: usize = in_shape.iter().product();
            let out_len: usize = self.shapes[l + 1].iter().product();
            let need_dx = l > 0;
            dy = match self.layers[l] {
                LayerSpec::Dense { input, output } => {
                    let pi = self.param_index(l);
                    let g = &mut grads.layers[pi];
                    gemm(output, n, input, &dy, true, &lc.input, false, 0.0, g.weight.data_mut());
                    for row in dy.chunks_exact(output) {
                        for (b, d) in g.bias.iter_mut().zip(row) {
                            *b += d;
                        }
                    }
                    if need_dx {
                        let mut dx = vec![0.0; n * input];
                        gemm(n, output, input, &dy, false, self.params[pi].weight.data(), false, 0.0, &mut dx);
                        dx
                    } else {
                        Vec::new()
                    }
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    ..
                } => {
                    let pi = self.param_index(l);
                    let geom = ConvGeom::new(in_shape, kernel_h, kernel_w, stride, padding);
                    let (k, pos) = (geom.k(), geom.positions());
                    let mut dx = if need_dx { vec![0.0; n * in_len] } else { Vec::new() };
                    let mut dcols = vec![0.0; k * pos];
                    let g = &mut grads.layers[pi];
                    for s in 0..n {
                        let cols = &lc.cols[s * k * pos..(s + 1) * k * pos];
                        let dys = &dy[s * out_len..(s + 1) * out_len];
                        gemm(filters, pos, k, dys, false, cols, true, 1.0, g.weight.data_mut());
                        for (f, row) in dys.chunks_exact(pos).enumerate() {
                            g.bias[f] += row.iter().sum::<f64>();
                        }
                        if need_dx {
                            gemm(k, filters, pos, self.params[pi].weight.data(), true, dys, false, 0.0, &mut dcols);
                            geom.col2im(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                        }
                    }
                    dx
                }
                LayerSpec::Relu => dy
                    .iter()
                    .zip(&lc.input)
                    .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                    .collect(),
                LayerSpec::MaxPool2x2 => {
                    let mut dx = vec![0.0; n * in_len];
                    for (o, &src) in lc.argmax.iter().enumerate() {
                        dx[src] += dy[o];
                    }
                    dx
                }
                LayerSpec::Flatten => dy,
            };
        }
        grads
    }

    /// Mean cross-entropy over the batch and its exact gradient.
    pub fn loss_and_gradients(&self, inputs: &[f64], labels: &[usize]) -> Result<(f64, Gradients)> {
        let n = labels.len();
        let (logits, cache) = self.forward(inputs, n)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels, self.classes())?;
        Ok((loss, self.backward(&cache, &dlogits)))
    }

    /// Mean cross-entropy and the logits for a batch.
    pub fn forward_loss(&self, inputs: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let logits = self.logits(inputs, labels.len())?;
        let (loss, _) = softmax_cross_entropy(&logits, labels, self.classes())?;
        Ok((loss, logits))
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    if n == 0 || logits.len() != n * classes {
        return Err(Error::shape(format!(
            "{} logits for {n} labels of {classes} classes",
            logits.len()
        )));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (s, (row, g)) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).enumerate() {
        let label = labels[s];
        if label >= classes {
            return Err(Error::invalid(format!("label {label} outside 0..{classes}")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln() + max;
        total += log_sum - row[label];
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - log_sum).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(in_shape: &[usize], kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for kernel offset `(ky, kx)` at output `(oy, ox)`, if inside the image.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let pos = self.positions();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * pos;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            cols[row + oy * self.wo + ox] = match self.source(ky, kx, oy, ox) {
                                Some((y, xx)) => x[(ch * self.h + y) * self.w + xx],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let pos = self.positions();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * pos;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, xx)) = self.source(ky, kx, oy, ox) {
                                dx[(ch * self.h + y) * self.w + xx] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
