//! Parameter layout, forward and backward passes for the four learner kinds.
//!
//! All kinds share one head: `out = head.weight . p + head.deep_weight . h + head.bias`
//! where `p` is the raw input (linear, wide & deep), the last hidden layer or the
//! raw input when there is none (deep), or the last cross layer (deep & cross),
//! and `h` is the deep tower output when it exists alongside `p`.
//!
//! Cross layer: `x_{l+1} = x_0 * (x_l . w_l) + b_l + x_l`.

use super::{LearnerConfig, LearnerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub kind: LearnerKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_cross: usize,
    pub slots: Vec<TensorSlot>,
    pub n_params: usize,
    cross: Vec<(usize, usize)>,
    deep: Vec<(usize, usize, usize, usize)>,
    head_weight: usize,
    head_width: usize,
    head_deep: Option<(usize, usize)>,
    head_bias: usize,
}

impl Layout {
    pub fn new(cfg: &LearnerConfig, input_dim: usize) -> Self {
        let hidden: Vec<usize> = match cfg.kind {
            LearnerKind::Linear => Vec::new(),
            _ => cfg.hidden_layers.clone(),
        };
        let n_cross = if cfg.kind == LearnerKind::DeepAndCross {
            cfg.n_cross_layers
        } else {
            0
        };
        let last_hidden = hidden.last().copied();
        // width of `p` and of the optional deep part of the head
        let (head_width, deep_width) = match cfg.kind {
            LearnerKind::Linear => (input_dim, None),
            LearnerKind::Deep => (last_hidden.unwrap_or(input_dim), None),
            LearnerKind::WideAndDeep | LearnerKind::DeepAndCross => (input_dim, last_hidden),
        };
        let head_fan_in = head_width + deep_width.unwrap_or(0);

        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize, is_bias: bool| {
            let slot = TensorSlot {
                name,
                shape,
                offset,
                fan_in,
                is_bias,
            };
            offset += slot.len();
            let at = slot.offset;
            slots.push(slot);
            at
        };
        let mut cross = Vec::new();
        for l in 0..n_cross {
            let w = push(format!("cross.{l}.weight"), vec![input_dim], input_dim, false);
            let b = push(format!("cross.{l}.bias"), vec![input_dim], input_dim, true);
            cross.push((w, b));
        }
        let mut deep = Vec::new();
        let mut width = input_dim;
        for (i, &h) in hidden.iter().enumerate() {
            let w = push(format!("deep.{i}.weight"), vec![h, width], width, false);
            let b = push(format!("deep.{i}.bias"), vec![h], width, true);
            deep.push((w, b, width, h));
            width = h;
        }
        let head_weight = push("head.weight".into(), vec![head_width], head_fan_in, false);
        let head_deep = deep_width.map(|w| (push("head.deep_weight".into(), vec![w], head_fan_in, false), w));
        let head_bias = push("head.bias".into(), vec![1], head_fan_in, true);
        Self {
            kind: cfg.kind,
            input_dim,
            hidden,
            n_cross,
            n_params: offset,
            slots,
            cross,
            deep,
            head_weight,
            head_width,
            head_deep,
            head_bias,
        }
    }

    /// Scratch buffers for one sample.
    pub fn workspace(&self) -> Workspace {
        Workspace {
            cross: vec![vec![0.0; self.input_dim]; self.n_cross + 1],
            pre: self.hidden.iter().map(|&h| vec![0.0; h]).collect(),
            act: self.hidden.iter().map(|&h| vec![0.0; h]).collect(),
            grad_x: vec![0.0; self.input_dim],
            grad_x_next: vec![0.0; self.input_dim],
            grad_act: self.hidden.iter().map(|&h| vec![0.0; h]).collect(),
        }
    }

    fn head_input<'a>(&self, x: &'a [f64], ws: &'a Workspace) -> &'a [f64] {
        match self.kind {
            LearnerKind::Linear | LearnerKind::WideAndDeep => x,
            LearnerKind::Deep => ws.act.last().map(|v| v.as_slice()).unwrap_or(x),
            LearnerKind::DeepAndCross if self.n_cross > 0 => &ws.cross[self.n_cross],
            LearnerKind::DeepAndCross => x,
        }
    }

    /// Raw output (logit for log loss).
    pub fn forward(&self, params: &[f64], x: &[f64], ws: &mut Workspace) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim);
        if self.n_cross > 0 {
            ws.cross[0].copy_from_slice(x);
            for (l, &(w, b)) in self.cross.iter().enumerate() {
                let (done, rest) = ws.cross.split_at_mut(l + 1);
                let xl = &done[l];
                let s = dot(xl, &params[w..w + self.input_dim]);
                let bias = &params[b..b + self.input_dim];
                for (i, out) in rest[0].iter_mut().enumerate() {
                    *out = x[i] * s + bias[i] + xl[i];
                }
            }
        }
        for (i, &(w, b, fan_in, width)) in self.deep.iter().enumerate() {
            let (before, after) = ws.act.split_at_mut(i);
            let input: &[f64] = if i == 0 { x } else { &before[i - 1] };
            let pre = &mut ws.pre[i];
            for (r, z) in pre.iter_mut().enumerate() {
                let row = &params[w + r * fan_in..w + (r + 1) * fan_in];
                *z = dot(row, input) + params[b + r];
            }
            for (a, z) in after[0].iter_mut().zip(pre.iter()) {
                *a = z.max(0.0);
            }
            debug_assert_eq!(pre.len(), width);
        }
        let p = self.head_input(x, ws);
        let mut out = dot(&params[self.head_weight..self.head_weight + self.head_width], p)
            + params[self.head_bias];
        if let Some((hd, w)) = self.head_deep {
            let h = ws.act.last().expect("deep head implies hidden layers");
            out += dot(&params[hd..hd + w], h);
        }
        out
    }

    /// Accumulates `d_out * d(out)/d(params)` into `grad`. Must follow `forward`
    /// on the same sample and workspace.
    pub fn backward(&self, params: &[f64], x: &[f64], ws: &mut Workspace, d_out: f64, grad: &mut [f64]) {
        grad[self.head_bias] += d_out;
        {
            let p = self.head_input(x, ws);
            for (g, v) in grad[self.head_weight..self.head_weight + self.head_width]
                .iter_mut()
                .zip(p)
            {
                *g += d_out * v;
            }
        }
        if let Some((hd, w)) = self.head_deep {
            let h = ws.act.last().expect("deep head implies hidden layers");
            for (g, v) in grad[hd..hd + w].iter_mut().zip(h) {
                *g += d_out * v;
            }
        }

        // deep tower: gradient w.r.t. the last activation
        if !self.deep.is_empty() {
            let last = self.deep.len() - 1;
            let seed: &[f64] = match self.kind {
                LearnerKind::Deep => &params[self.head_weight..self.head_weight + self.head_width],
                _ => {
                    let (hd, w) = self.head_deep.expect("deep head present");
                    &params[hd..hd + w]
                }
            };
            for (g, &v) in ws.grad_act[last].iter_mut().zip(seed) {
                *g = d_out * v;
            }
            for i in (0..self.deep.len()).rev() {
                let (w, b, fan_in, width) = self.deep[i];
                // through relu
                for r in 0..width {
                    if ws.pre[i][r] <= 0.0 {
                        ws.grad_act[i][r] = 0.0;
                    }
                }
                let (below, here) = ws.grad_act.split_at_mut(i);
                let dz = &here[0];
                let input: &[f64] = if i == 0 { x } else { &ws.act[i - 1] };
                for r in 0..width {
                    let d = dz[r];
                    if d == 0.0 {
                        continue;
                    }
                    grad[b + r] += d;
                    let row = &mut grad[w + r * fan_in..w + (r + 1) * fan_in];
                    for (g, v) in row.iter_mut().zip(input) {
                        *g += d * v;
                    }
                }
                if i > 0 {
                    let da = &mut below[i - 1];
                    da.iter_mut().for_each(|v| *v = 0.0);
                    for r in 0..width {
                        let d = dz[r];
                        if d == 0.0 {
                            continue;
                        }
                        let row = &params[w + r * fan_in..w + (r + 1) * fan_in];
                        for (g, v) in da.iter_mut().zip(row) {
                            *g += d * v;
                        }
                    }
                }
            }
        }

        // cross network, top layer first
        if self.n_cross > 0 {
            let d = self.input_dim;
            for (g, &v) in ws
                .grad_x
                .iter_mut()
                .zip(&params[self.head_weight..self.head_weight + d])
            {
                *g = d_out * v;
            }
            for l in (0..self.n_cross).rev() {
                let (w, b) = self.cross[l];
                let xl = &ws.cross[l];
                let g_next = &ws.grad_x;
                let ds = dot(g_next, x);
                for i in 0..d {
                    grad[b + i] += g_next[i];
                    grad[w + i] += ds * xl[i];
                }
                for i in 0..d {
                    ws.grad_x_next[i] = g_next[i] + ds * params[w + i];
                }
                std::mem::swap(&mut ws.grad_x, &mut ws.grad_x_next);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    cross: Vec<Vec<f64>>,
    pub(crate) pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    grad_x: Vec<f64>,
    grad_x_next: Vec<f64>,
    grad_act: Vec<Vec<f64>>,
}

impl Layout {
    /// Hidden pre-activations of the last forward pass, flattened with their
    /// (layer, unit) coordinates.
    pub(crate) fn pre_activations<'a>(&self, ws: &'a Workspace) -> impl Iterator<Item = (usize, usize, f64)> + 'a {
        ws.pre
            .iter()
            .enumerate()
            .flat_map(|(l, v)| v.iter().enumerate().map(move |(u, &z)| (l, u, z)))
    }

    pub(crate) fn deep_bias_offset(&self, layer: usize) -> usize {
        self.deep[layer].1
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
