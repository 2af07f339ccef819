//! Differentiable tensor operations recorded on a [`Tape`].

use crate::error::{shape_err, Result};
use crate::kernels::{col2im, col2im_lines, gemm, gemm_strided, im2col, im2col_lines, lines_per_chunk, ConvGeom};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor5;

impl<T: Scalar> Tape<T> {
    /// Strided, zero-padded 3D cross-correlation (no kernel flip).
    ///
    /// `w` is `(Cout, Cin, kd, kh, kw)`; `b`, when given, is `(Cout, 1, 1, 1, 1)`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws[1] != xs[1] {
            return shape_err(format!(
                "conv3d: input has {} channels, weight expects {}",
                xs[1], ws[1]
            ));
        }
        check_bias(self, b, ws[0], "conv3d")?;
        let Some(geom) = ConvGeom::new(xs[1], [xs[2], xs[3], xs[4]], [ws[2], ws[3], ws[4]], stride, pad)
        else {
            return shape_err(format!(
                "conv3d: kernel {:?} does not fit input {:?} with padding {:?}",
                &ws[2..],
                &xs[2..],
                pad
            ));
        };
        let (n, cout) = (xs[0], ws[0]);
        let [od, oh, ow] = geom.output;
        let p_out = geom.out_len();
        let k = geom.rows();
        let mut out = Tensor5::zeros([n, cout, od, oh, ow]);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let lines = od * oh;
            let chunk = lines_per_chunk(&geom);
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * chunk * ow] };
            for s in 0..n {
                let xs_n = xv.sample(s);
                let dst = &mut out.data_mut()[s * cout * p_out..(s + 1) * cout * p_out];
                if geom.is_pointwise() {
                    gemm(cout, k, p_out, wv, false, xs_n, false, T::zero(), dst);
                    continue;
                }
                for l0 in (0..lines).step_by(chunk) {
                    let l1 = (l0 + chunk).min(lines);
                    let width = (l1 - l0) * ow;
                    im2col_lines(xs_n, &geom, l0, l1, &mut cols);
                    gemm_strided(
                        cout,
                        k,
                        width,
                        wv,
                        [k, 1],
                        &cols,
                        [width, 1],
                        T::zero(),
                        &mut dst[l0 * ow..],
                        p_out,
                    );
                }
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, &inputs, Op::Conv3d { x, w, b, geom }))
    }

    /// Transposed 3D convolution, the adjoint of a strided [`Tape::conv3d`]
    /// without padding. `w` is `(Cin, Cout, kd, kh, kw)`; output spatial size
    /// is `(in - 1) * stride + k` per axis.
    pub fn conv3d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws[0] != xs[1] {
            return shape_err(format!(
                "conv3d_transpose: input has {} channels, weight expects {}",
                xs[1], ws[0]
            ));
        }
        if stride.contains(&0) {
            return shape_err("conv3d_transpose: zero stride");
        }
        let cout = ws[1];
        check_bias(self, b, cout, "conv3d_transpose")?;
        let kernel = [ws[2], ws[3], ws[4]];
        let mut out_dims = [0; 3];
        for a in 0..3 {
            out_dims[a] = (xs[2 + a] - 1) * stride[a] + kernel[a];
        }
        let geom = ConvGeom::new(cout, out_dims, kernel, stride, [0; 3])
            .expect("transposed geometry always fits");
        debug_assert_eq!(geom.output, [xs[2], xs[3], xs[4]]);
        let n = xs[0];
        let cin = xs[1];
        let p_in = geom.out_len();
        let rows = geom.rows();
        let out_len = geom.in_len();
        let mut out = Tensor5::zeros([n, cout, out_dims[0], out_dims[1], out_dims[2]]);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let mut cols = vec![T::zero(); rows * p_in];
            for s in 0..n {
                // cols (Cout·k³ × P_in) = Wᵀ (Cout·k³ × Cin) · X (Cin × P_in)
                gemm(rows, cin, p_in, wv, true, xv.sample(s), false, T::zero(), &mut cols);
                let dst = &mut out.data_mut()[s * cout * out_len..(s + 1) * cout * out_len];
                col2im(&cols, &geom, dst);
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, &inputs, Op::ConvTranspose3d { x, w, b, geom }))
    }

    /// Per-(sample, channel) standardization over `D·H·W` with population
    /// variance, followed by a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        let c = xs[1];
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).numel() != c {
                return shape_err(format!(
                    "instance_norm: {name} has {} elements for {c} channels",
                    self.value(v).numel()
                ));
            }
        }
        let m = xs[2] * xs[3] * xs[4];
        let mut out = Tensor5::zeros(xs);
        let mut means = Vec::with_capacity(xs[0] * c);
        let mut inv_stds = Vec::with_capacity(xs[0] * c);
        {
            let xv = self.value(x).data();
            let g = self.value(gamma).data();
            let bt = self.value(beta).data();
            let od = out.data_mut();
            for nc in 0..xs[0] * c {
                let ch = nc % c;
                let src = &xv[nc * m..(nc + 1) * m];
                let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
                let var = src
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / m as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let scale = T::from_f64(inv_std) * g[ch];
                let mean_t = T::from_f64(mean);
                for (o, &v) in od[nc * m..(nc + 1) * m].iter_mut().zip(src) {
                    *o = (v - mean_t) * scale + bt[ch];
                }
                means.push(mean);
                inv_stds.push(inv_std);
            }
        }
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64(slope);
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = *v * slope;
            }
        }
        self.push(out, &[x], Op::LeakyRelu { x, slope })
    }

    /// Stack channels `[a; b]`; all other dimensions must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return shape_err(format!("concat_channels: {sa:?} vs {sb:?}"));
        }
        let m = sa[2] * sa[3] * sa[4];
        let (ca, cb) = (sa[1], sb[1]);
        let mut data = Vec::with_capacity((ca + cb) * m * sa[0]);
        {
            let av = self.value(a);
            let bv = self.value(b);
            for n in 0..sa[0] {
                data.extend_from_slice(av.sample(n));
                data.extend_from_slice(bv.sample(n));
            }
        }
        let out = Tensor5::new([sa[0], ca + cb, sa[2], sa[3], sa[4]], data)?;
        Ok(self.push(out, &[a, b], Op::Concat { a, b }))
    }

    /// Per-voxel softmax over the channel axis (max-subtracted).
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs[1] < 2 {
            return shape_err("softmax_channels needs at least two channels");
        }
        let out = softmax_forward(self.value(x));
        Ok(self.push(out, &[x], Op::Softmax { x }))
    }

    /// Channel `channel` of `x` as a single-channel tensor.
    pub fn slice_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let xs = self.shape(x);
        if channel >= xs[1] {
            return shape_err(format!("slice_channel: channel {channel} of {}", xs[1]));
        }
        let m = xs[2] * xs[3] * xs[4];
        let mut data = Vec::with_capacity(xs[0] * m);
        {
            let xv = self.value(x).data();
            for n in 0..xs[0] {
                let o = (n * xs[1] + channel) * m;
                data.extend_from_slice(&xv[o..o + m]);
            }
        }
        let out = Tensor5::new([xs[0], 1, xs[2], xs[3], xs[4]], data)?;
        Ok(self.push(out, &[x], Op::SliceChannel { x, channel }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o + v;
        }
        Ok(self.push(out, &[a, b], Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = *v * factor;
        }
        self.push(out, &[x], Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Tensor5::scalar(T::from_f64(total)), &[x], Op::Sum { x })
    }

    /// `Σ wᵢ·xᵢ` against constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return shape_err("weighted_sum: weight count differs from element count");
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum::<f64>();
        Ok(self.push(
            Tensor5::scalar(T::from_f64(total)),
            &[x],
            Op::WeightedSum { x, weights },
        ))
    }

    pub(crate) fn backward_node(&self, i: usize, grad: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, grad, &mut out),
            Op::ConvTranspose3d { x, w, b, geom } => {
                self.conv_transpose_backward(*x, *w, *b, geom, grad, &mut out)
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => self.instance_norm_backward(*x, *gamma, *beta, mean, inv_std, grad, &mut out),
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let g = xv
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| if v < T::zero() { g * *slope } else { g })
                    .collect();
                out.push((*x, g));
            }
            Op::Concat { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let m = sa[2] * sa[3] * sa[4];
                let (la, lb) = (sa[1] * m, sb[1] * m);
                let mut ga = Vec::with_capacity(sa[0] * la);
                let mut gb = Vec::with_capacity(sa[0] * lb);
                for n in 0..sa[0] {
                    let base = n * (la + lb);
                    ga.extend_from_slice(&grad[base..base + la]);
                    gb.extend_from_slice(&grad[base + la..base + la + lb]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let s = y.shape();
                let m = s[2] * s[3] * s[4];
                let c = s[1];
                let yd = y.data();
                let mut g = vec![T::zero(); yd.len()];
                for n in 0..s[0] {
                    let base = n * c * m;
                    for v in 0..m {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let o = base + ch * m + v;
                            dot = dot + grad[o] * yd[o];
                        }
                        for ch in 0..c {
                            let o = base + ch * m + v;
                            g[o] = yd[o] * (grad[o] - dot);
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::SliceChannel { x, channel } => {
                let s = self.shape(*x);
                let m = s[2] * s[3] * s[4];
                let mut g = vec![T::zero(); s.iter().product()];
                for n in 0..s[0] {
                    let o = (n * s[1] + channel) * m;
                    g[o..o + m].copy_from_slice(&grad[n * m..(n + 1) * m]);
                }
                out.push((*x, g));
            }
            Op::Add { a, b } => {
                out.push((*a, grad.to_vec()));
                out.push((*b, grad.to_vec()));
            }
            Op::Scale { x, factor } => {
                out.push((*x, grad.iter().map(|&g| g * *factor).collect()));
            }
            Op::Sum { x } => {
                out.push((*x, vec![grad[0]; self.value(*x).numel()]));
            }
            Op::WeightedSum { x, weights } => {
                out.push((*x, weights.iter().map(|&w| w * grad[0]).collect()));
            }
            Op::Bce { p, target } => out.push((*p, self.bce_backward(*p, target, grad[0]))),
            Op::Dice { p, target, smooth } => {
                out.push((*p, self.dice_backward(*p, target, *smooth, grad[0])))
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        out
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        grad: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let xv = self.value(x);
        let wv = self.value(w).data();
        let n = xv.batch();
        let cout = self.shape(w)[0];
        let k = geom.rows();
        let p_out = geom.out_len();
        let in_len = geom.channels * geom.in_len();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut gx = if need_x { vec![T::zero(); xv.numel()] } else { Vec::new() };
        let mut gw = if need_w { vec![T::zero(); wv.len()] } else { Vec::new() };
        let ow = geom.output[2];
        let lines = geom.output[0] * geom.output[1];
        let chunk = lines_per_chunk(geom);
        let buf = if geom.is_pointwise() { 0 } else { k * chunk * ow };
        let mut cols = vec![T::zero(); if need_w { buf } else { 0 }];
        let mut dcols = vec![T::zero(); if need_x { buf } else { 0 }];
        for s in 0..n {
            let gy = &grad[s * cout * p_out..(s + 1) * cout * p_out];
            if geom.is_pointwise() {
                if need_w {
                    // dW (Cout × K) += dY (Cout × P) · Xᵀ (P × K)
                    gemm(cout, p_out, k, gy, false, xv.sample(s), true, T::one(), &mut gw);
                }
                if need_x {
                    let gx_s = &mut gx[s * in_len..(s + 1) * in_len];
                    gemm(k, cout, p_out, wv, true, gy, false, T::zero(), gx_s);
                }
                continue;
            }
            for l0 in (0..lines).step_by(chunk) {
                let l1 = (l0 + chunk).min(lines);
                let width = (l1 - l0) * ow;
                let gy_chunk = &gy[l0 * ow..];
                if need_w {
                    im2col_lines(xv.sample(s), geom, l0, l1, &mut cols);
                    // dW (Cout × K) += dY (Cout × L) · colsᵀ (L × K)
                    gemm_strided(cout, width, k, gy_chunk, [p_out, 1], &cols, [1, width], T::one(), &mut gw, k);
                }
                if need_x {
                    // dcols (K × L) = Wᵀ (K × Cout) · dY (Cout × L)
                    gemm_strided(k, cout, width, wv, [1, k], gy_chunk, [p_out, 1], T::zero(), &mut dcols, width);
                    col2im_lines(&dcols, geom, l0, l1, &mut gx[s * in_len..(s + 1) * in_len]);
                }
            }
        }
        if need_x {
            out.push((x, gx));
        }
        if need_w {
            out.push((w, gw));
        }
        if let Some(b) = b {
            out.push((b, channel_sums(grad, n, cout, p_out)));
        }
    }

    fn conv_transpose_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        grad: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let xv = self.value(x);
        let wv = self.value(w).data();
        let n = xv.batch();
        let cin = xv.channels();
        let cout = geom.channels;
        let rows = geom.rows();
        let p_in = geom.out_len();
        let out_len = geom.in_len();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut gx = if need_x { vec![T::zero(); xv.numel()] } else { Vec::new() };
        let mut gw = if need_w { vec![T::zero(); wv.len()] } else { Vec::new() };
        let mut dcols = vec![T::zero(); rows * p_in];
        for s in 0..n {
            let gy = &grad[s * cout * out_len..(s + 1) * cout * out_len];
            im2col(gy, geom, &mut dcols);
            if need_x {
                // dX (Cin × P_in) = W (Cin × Cout·k³) · dcols
                let gx_s = &mut gx[s * cin * p_in..(s + 1) * cin * p_in];
                gemm(cin, rows, p_in, wv, false, &dcols, false, T::zero(), gx_s);
            }
            if need_w {
                // dW (Cin × Cout·k³) += X (Cin × P_in) · dcolsᵀ
                gemm(cin, p_in, rows, xv.sample(s), false, &dcols, true, T::one(), &mut gw);
            }
        }
        if need_x {
            out.push((x, gx));
        }
        if need_w {
            out.push((w, gw));
        }
        if let Some(b) = b {
            out.push((b, channel_sums(grad, n, cout, out_len)));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn instance_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        grad: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let xs = self.shape(x);
        let c = xs[1];
        let m = xs[2] * xs[3] * xs[4];
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let mut gx = vec![T::zero(); xv.len()];
        let mut ggamma = vec![0.0f64; c];
        let mut gbeta = vec![0.0f64; c];
        for nc in 0..xs[0] * c {
            let ch = nc % c;
            let (mu, inv) = (mean[nc], inv_std[nc]);
            let src = &xv[nc * m..(nc + 1) * m];
            let dy = &grad[nc * m..(nc + 1) * m];
            let gch = g[ch].as_f64();
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for (&v, &d) in src.iter().zip(dy) {
                let xhat = (v.as_f64() - mu) * inv;
                let d = d.as_f64();
                ggamma[ch] += d * xhat;
                gbeta[ch] += d;
                sum_dxhat += d * gch;
                sum_dxhat_xhat += d * gch * xhat;
            }
            let mean_dxhat = sum_dxhat / m as f64;
            let mean_dxhat_xhat = sum_dxhat_xhat / m as f64;
            for ((o, &v), &d) in gx[nc * m..(nc + 1) * m].iter_mut().zip(src).zip(dy) {
                let xhat = (v.as_f64() - mu) * inv;
                let dxhat = d.as_f64() * gch;
                *o = T::from_f64(inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
            }
        }
        out.push((x, gx));
        out.push((gamma, ggamma.into_iter().map(T::from_f64).collect()));
        out.push((beta, gbeta.into_iter().map(T::from_f64).collect()));
    }
}

fn check_bias<T: Scalar>(tape: &Tape<T>, b: Option<Var>, cout: usize, op: &str) -> Result<()> {
    if let Some(b) = b {
        if tape.value(b).numel() != cout {
            return shape_err(format!(
                "{op}: bias has {} elements for {cout} output channels",
                tape.value(b).numel()
            ));
        }
    }
    Ok(())
}

fn add_channel_bias<T: Scalar>(out: &mut Tensor5<T>, bias: &[T]) {
    let s = out.shape();
    let m = s[2] * s[3] * s[4];
    let c = s[1];
    for (chunk_idx, chunk) in out.data_mut().chunks_mut(m).enumerate() {
        let b = bias[chunk_idx % c];
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn channel_sums<T: Scalar>(grad: &[T], n: usize, c: usize, m: usize) -> Vec<T> {
    let mut sums = vec![0.0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let o = (s * c + ch) * m;
            sums[ch] += grad[o..o + m].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    sums.into_iter().map(T::from_f64).collect()
}

pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor5<T>) -> Tensor5<T> {
    let s = x.shape();
    let m = s[2] * s[3] * s[4];
    let c = s[1];
    let xd = x.data();
    let mut out = Tensor5::zeros(s);
    let od = out.data_mut();
    for n in 0..s[0] {
        let base = n * c * m;
        for v in 0..m {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(xd[base + ch * m + v]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (xd[base + ch * m + v] - mx).exp();
                od[base + ch * m + v] = e;
                total = total + e;
            }
            for ch in 0..c {
                od[base + ch * m + v] = od[base + ch * m + v] / total;
            }
        }
    }
    out
}
