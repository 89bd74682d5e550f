//! Batched LSTM layer: forward pass with a stored trace, and backpropagation through time.
//!
//! Sequences are laid out time-major: the slab for step `t` holds `batch` rows of
//! `width` values, so a whole sequence batch is a `(steps * batch) x width` matrix.
//! Gate blocks inside a `4h` pre-activation row are ordered input, forget, cell, output.

use serde::{Deserialize, Serialize};

use super::activation::{sigmoid_inplace, tanh_inplace, tanh_into};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub input: usize,
    pub hidden: usize,
    /// `4h x input`, row-major.
    pub w: Vec<f64>,
    /// `4h x h`, row-major.
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

impl LstmLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayer {
            input,
            hidden,
            w: vec![0.0; 4 * hidden * input],
            u: vec![0.0; 4 * hidden * hidden],
            b: vec![0.0; 4 * hidden],
        }
    }

    pub fn shape_matches(&self, other: &LstmLayer) -> bool {
        self.input == other.input && self.hidden == other.hidden
    }

    pub(crate) fn shapes_consistent(&self) -> bool {
        let h = self.hidden;
        self.w.len() == 4 * h * self.input && self.u.len() == 4 * h * h && self.b.len() == 4 * h
    }
}

/// `c = a * b + beta * c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, a_strides) < a.len(), "gemm: a out of bounds");
        assert!(last(k, n, b_strides) < b.len(), "gemm: b out of bounds");
    }
    assert!(last(m, n, (c_row_stride, 1)) < c.len(), "gemm: c out of bounds");
    // SAFETY: every index touched by the kernel was bounds-checked above, and `c`
    // is an exclusive borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

/// Pre-activation gradients of one batch row at one step; updates the carried cell gradient.
#[inline(always)]
fn gate_grads_kernel(
    gates: &[f64],
    c_prev: &[f64],
    tanh_c: &[f64],
    dh: &[f64],
    dc_next: &mut [f64],
    dz: &mut [f64],
) {
    let h = c_prev.len();
    let (i, rest) = gates.split_at(h);
    let (f, rest) = rest.split_at(h);
    let (g, o) = rest.split_at(h);
    let (dzi, rest) = dz.split_at_mut(h);
    let (dzf, rest) = rest.split_at_mut(h);
    let (dzg, dzo) = rest.split_at_mut(h);
    for j in 0..h {
        let th = tanh_c[j];
        let dc = dc_next[j] + dh[j] * o[j] * (1.0 - th * th);
        dzi[j] = dc * g[j] * i[j] * (1.0 - i[j]);
        dzf[j] = dc * c_prev[j] * f[j] * (1.0 - f[j]);
        dzg[j] = dc * i[j] * (1.0 - g[j] * g[j]);
        dzo[j] = dh[j] * th * o[j] * (1.0 - o[j]);
        dc_next[j] = dc * f[j];
    }
}

fn gate_grads(gates: &[f64], c_prev: &[f64], tanh_c: &[f64], dh: &[f64], dc_next: &mut [f64], dz: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx512f")]
        unsafe fn wide(a: &[f64], b: &[f64], c: &[f64], d: &[f64], e: &mut [f64], f: &mut [f64]) {
            gate_grads_kernel(a, b, c, d, e, f)
        }
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { wide(gates, c_prev, tanh_c, dh, dc_next, dz) };
        }
    }
    gate_grads_kernel(gates, c_prev, tanh_c, dh, dc_next, dz)
}

/// Everything the backward pass needs from a forward run.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    /// Activated gates, `steps * batch * 4h`.
    pub gates: Vec<f64>,
    /// Cell states including the zero initial state, `(steps + 1) * batch * h`.
    pub cells: Vec<f64>,
    pub tanh_cells: Vec<f64>,
    /// Hidden states including the zero initial state, `(steps + 1) * batch * h`.
    pub states: Vec<f64>,
}

impl LayerTrace {
    /// Hidden outputs for steps 1..=steps, laid out as the next layer's input.
    pub fn outputs(&self) -> &[f64] {
        &self.states[self.batch * self.hidden..]
    }

    pub fn last_output(&self) -> &[f64] {
        &self.states[self.steps * self.batch * self.hidden..]
    }

    /// Keeps only the listed batch rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> LayerTrace {
        let h = self.hidden;
        LayerTrace {
            steps: self.steps,
            batch: rows.len(),
            hidden: h,
            gates: select_rows(&self.gates, self.steps, self.batch, 4 * h, rows),
            cells: select_rows(&self.cells, self.steps + 1, self.batch, h, rows),
            tanh_cells: select_rows(&self.tanh_cells, self.steps, self.batch, h, rows),
            states: select_rows(&self.states, self.steps + 1, self.batch, h, rows),
        }
    }
}

/// Gathers batch rows from a time-major `(slabs * batch) x width` buffer.
pub(crate) fn select_rows(
    src: &[f64],
    slabs: usize,
    batch: usize,
    width: usize,
    rows: &[usize],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(slabs * rows.len() * width);
    for s in 0..slabs {
        let slab = &src[s * batch * width..(s + 1) * batch * width];
        for &r in rows {
            out.extend_from_slice(&slab[r * width..(r + 1) * width]);
        }
    }
    out
}

pub fn forward(layer: &LstmLayer, x: &[f64], steps: usize, batch: usize) -> LayerTrace {
    let (p, h) = (layer.input, layer.hidden);
    let g4 = 4 * h;
    assert_eq!(x.len(), steps * batch * p, "lstm forward: input size");
    let rows = steps * batch;

    let mut gates = vec![0.0; rows * g4];
    let mut cells = vec![0.0; (steps + 1) * batch * h];
    let mut tanh_cells = vec![0.0; steps * batch * h];
    let mut states = vec![0.0; (steps + 1) * batch * h];
    let slab = batch * h;
    for t in 0..steps {
        let z = &mut gates[t * batch * g4..(t + 1) * batch * g4];
        // Bias and input projection one step at a time, so the slab stays in cache.
        for zr in z.chunks_exact_mut(g4) {
            zr.copy_from_slice(&layer.b);
        }
        gemm(batch, p, g4, &x[t * batch * p..(t + 1) * batch * p], (p, 1), &layer.w, (1, p), 1.0, z, g4);
        let (prev_states, next_states) = states.split_at_mut((t + 1) * slab);
        let h_prev = &prev_states[t * slab..];
        if t > 0 {
            gemm(batch, h, g4, h_prev, (h, 1), &layer.u, (1, h), 1.0, z, g4);
        }
        for zr in z.chunks_exact_mut(g4) {
            sigmoid_inplace(&mut zr[..2 * h]);
            tanh_inplace(&mut zr[2 * h..3 * h]);
            sigmoid_inplace(&mut zr[3 * h..]);
        }
        let (prev_cells, next_cells) = cells.split_at_mut((t + 1) * slab);
        let c_prev = &prev_cells[t * slab..];
        let c_next = &mut next_cells[..slab];
        for (r, zr) in z.chunks_exact(g4).enumerate() {
            let (i, f, g) = (&zr[..h], &zr[h..2 * h], &zr[2 * h..3 * h]);
            let cp = &c_prev[r * h..(r + 1) * h];
            let cn = &mut c_next[r * h..(r + 1) * h];
            for j in 0..h {
                cn[j] = f[j] * cp[j] + i[j] * g[j];
            }
        }
        let tc = &mut tanh_cells[t * slab..(t + 1) * slab];
        tanh_into(c_next, tc);
        let h_next = &mut next_states[..slab];
        for (r, zr) in z.chunks_exact(g4).enumerate() {
            let o = &zr[3 * h..];
            for j in 0..h {
                h_next[r * h + j] = o[j] * tc[r * h + j];
            }
        }
    }
    LayerTrace { steps, batch, hidden: h, gates, cells, tanh_cells, states }
}

/// Upstream gradient arriving at a layer's hidden outputs.
pub enum OutputGrad<'a> {
    /// Only the final hidden state feeds the loss (`batch x h`).
    Last(&'a [f64]),
    /// Every step's hidden output feeds the next layer (`steps * batch * h`).
    All(&'a [f64]),
}

/// Accumulates parameter gradients into `grad` and returns the gradient with respect to
/// the layer input when `want_input_grad` is set.
pub fn backward(
    layer: &LstmLayer,
    x: &[f64],
    trace: &LayerTrace,
    upstream: OutputGrad<'_>,
    grad: &mut LstmLayer,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let (p, h) = (layer.input, layer.hidden);
    let g4 = 4 * h;
    let (steps, batch) = (trace.steps, trace.batch);
    let slab = batch * h;
    assert_eq!(x.len(), steps * batch * p, "lstm backward: input size");

    let mut dz = vec![0.0; steps * batch * g4];
    let mut dh_next = vec![0.0; slab];
    let mut dc_next = vec![0.0; slab];
    let mut dh = vec![0.0; slab];
    for t in (0..steps).rev() {
        dh.copy_from_slice(&dh_next);
        match upstream {
            OutputGrad::Last(g) => {
                if t + 1 == steps {
                    for (a, b) in dh.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            OutputGrad::All(g) => {
                for (a, b) in dh.iter_mut().zip(&g[t * slab..(t + 1) * slab]) {
                    *a += b;
                }
            }
        }
        let gates = &trace.gates[t * batch * g4..(t + 1) * batch * g4];
        let c_prev = &trace.cells[t * slab..(t + 1) * slab];
        let tc = &trace.tanh_cells[t * slab..(t + 1) * slab];
        let dzt = &mut dz[t * batch * g4..(t + 1) * batch * g4];
        for r in 0..batch {
            let rows = r * h..(r + 1) * h;
            gate_grads(
                &gates[r * g4..(r + 1) * g4],
                &c_prev[rows.clone()],
                &tc[rows.clone()],
                &dh[rows.clone()],
                &mut dc_next[rows],
                &mut dzt[r * g4..(r + 1) * g4],
            );
        }
        if t > 0 {
            gemm(batch, g4, h, dzt, (g4, 1), &layer.u, (h, 1), 0.0, &mut dh_next, h);
        }
    }

    let rows = steps * batch;
    // dW += dZ^T X, dU += dZ^T H_prev (the initial state is zero, so step 0 drops out).
    gemm(g4, rows, p, &dz, (1, g4), x, (p, 1), 1.0, &mut grad.w, p);
    if steps > 1 {
        gemm(
            g4,
            rows - batch,
            h,
            &dz[batch * g4..],
            (1, g4),
            &trace.states[slab..steps * slab],
            (h, 1),
            1.0,
            &mut grad.u,
            h,
        );
    }
    for row in dz.chunks_exact(g4) {
        for (acc, v) in grad.b.iter_mut().zip(row) {
            *acc += v;
        }
    }
    want_input_grad.then(|| {
        let mut dx = vec![0.0; rows * p];
        gemm(rows, g4, p, &dz, (g4, 1), &layer.w, (p, 1), 0.0, &mut dx, p);
        dx
    })
}
