//! Dense tensor math with reverse-mode automatic differentiation.
//!
//! Everything is f32, row-major, single-threaded. Operations are recorded on
//! a [`Tape`]; calling [`Tape::backward`] on a scalar node fills the gradient
//! buffers of every `requires_grad` node reachable from it. Shapes are checked
//! on every primitive and there is no broadcasting beyond bias-over-rows.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("target id {id} out of vocabulary range {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("non-finite value detected in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    /// C[m,n] = A[m,k] · B[k,n]
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    /// C[m,n] = A[m,k] · B[n,k]ᵀ
    MatmulNT { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Add { a: TensorId, b: TensorId },
    /// rows of A[m,n] plus bias[n]
    AddBias { a: TensorId, bias: TensorId, m: usize, n: usize },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f32 },
    Silu { a: TensorId },
    /// Row softmax with a boolean mask; masked entries are exactly 0.
    MaskedSoftmaxRows { a: TensorId, rows: usize, cols: usize },
    LayerNormRows { x: TensorId, gamma: TensorId, beta: TensorId, rows: usize, cols: usize, eps: f32 },
    /// Row gather from an embedding table.
    Embed { table: TensorId, ids: Vec<usize>, dim: usize },
    SliceRows { a: TensorId, start: usize, len: usize, cols: usize },
    SliceCols { a: TensorId, start: usize, len: usize, rows: usize, cols: usize },
    ConcatCols { parts: Vec<(TensorId, usize)>, rows: usize },
    /// Scalar Σ_t w_t · (−log softmax(logits_t)[target_t]).
    CrossEntropyRows { logits: TensorId, targets: Vec<usize>, weights: Vec<f32>, rows: usize, cols: usize },
    SumAll { a: TensorId },
    /// Scalar Σ_j w_j · a_j.
    DotConst { a: TensorId, w: Vec<f32> },
    /// log softmax(logits[row_j])[action_j] per gathered position j.
    GatherLogSoftmax { logits: TensorId, rows: Vec<usize>, actions: Vec<usize>, cols: usize },
    /// exp(a_j − shift_j)
    ExpShift { a: TensorId },
    /// PPO-style pessimistic surrogate: min(r·A, clip(r, 1−ε, 1+ε)·A) per element.
    ClipSurrogate { ratio: TensorId, adv: Vec<f32>, eps: f32 },
    /// ρ − ln ρ − 1 with ρ = exp(lp_ref_j − a_j); `a` holds current log-probs.
    KlTerm { a: TensorId, lp_ref: Vec<f32> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Records primitive operations in topological order for a backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// C[m,n] += A[m,k] · B[k,n]
fn matmul_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ
fn matmul_nt_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
fn matmul_tn_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Softmax of one row into `out`; entries where `mask` is true become exactly 0.
fn softmax_row_masked(out: &mut [f32], row: &[f32], mask: Option<&[bool]>) {
    let mut mx = f32::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if mask.map_or(true, |m| !m[j]) && v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0f32;
    for j in 0..row.len() {
        if mask.map_or(true, |m| !m[j]) {
            let e = (row[j] - mx).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    if sum > 0.0 {
        for v in out.iter_mut() {
            *v /= sum;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { shape, data, grad, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record a leaf tensor. `requires_grad` leaves receive gradients in backward.
    pub fn leaf(&mut self, data: &[f32], shape: &[usize], requires_grad: bool) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        self.push(shape.to_vec(), data.to_vec(), requires_grad, Op::Leaf)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_acc(&mut data, self.data(a), self.data(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, rg, Op::Matmul { a, b, m, k, n }))
    }

    /// A[m,k] · B[n,k]ᵀ → [m,n]
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{sa:?} x {sb:?}ᵀ"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut data = vec![0.0; m * n];
        matmul_nt_acc(&mut data, self.data(a), self.data(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, rg, Op::MatmulNT { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, rg, Op::Add { a, b }))
    }

    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sa.len() != 2 || sb != vec![sa[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("{sa:?} + {sb:?}"),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let bd = self.data(bias).to_vec();
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bd[j];
            }
        }
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(vec![m, n], data, rg, Op::AddBias { a, bias, m, n }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * c).collect();
        let rg = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, rg, Op::Scale { a, c })
    }

    /// Elementwise x·sigmoid(x).
    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, rg, Op::Silu { a })
    }

    /// Row-wise softmax over the last axis; max-shifted for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let cols = *self.shape(a).last().ok_or(TensorError::ShapeMismatch {
            op: "softmax",
            detail: "rank-0 input".into(),
        })?;
        let rows = self.data(a).len() / cols;
        self.masked_softmax_rows(a, &vec![false; rows * cols])
    }

    /// Softmax per row where masked (true) entries produce exactly 0 and take
    /// no part in normalization.
    pub fn masked_softmax_rows(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || mask.len() != sa[0] * sa[1] {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax_rows",
                detail: format!("shape {sa:?}, mask len {}", mask.len()),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            softmax_row_masked(
                &mut data[i * cols..(i + 1) * cols],
                &self.data(a)[i * cols..(i + 1) * cols],
                Some(&mask[i * cols..(i + 1) * cols]),
            );
        }
        let rg = self.needs(a);
        Ok(self.push(
            vec![rows, cols],
            data,
            rg,
            Op::MaskedSoftmaxRows { a, rows, cols },
        ))
    }

    pub fn layer_norm_rows(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f32) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {sx:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let xr = &self.data(x)[i * cols..(i + 1) * cols];
            let mean = xr.iter().sum::<f32>() / cols as f32;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                data[i * cols + j] = (xr[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(vec![rows, cols], data, rg, Op::LayerNormRows { x, gamma, beta, rows, cols, eps }))
    }

    /// Gather rows `ids` from a [vocab, dim] table.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                detail: format!("table shape {st:?}"),
            });
        }
        let (vocab, dim) = (st[0], st[1]);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::TargetOutOfRange { id, vocab });
            }
        }
        let mut data = vec![0.0; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            data[i * dim..(i + 1) * dim].copy_from_slice(&self.data(table)[id * dim..(id + 1) * dim]);
        }
        let rg = self.needs(table);
        Ok(self.push(vec![ids.len(), dim], data, rg, Op::Embed { table, ids: ids.to_vec(), dim }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[0] {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{sa:?}, rows {start}..{}", start + len),
            });
        }
        let cols = sa[1];
        let data = self.data(a)[start * cols..(start + len) * cols].to_vec();
        let rg = self.needs(a);
        Ok(self.push(vec![len, cols], data, rg, Op::SliceRows { a, start, len, cols }))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[1] {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{sa:?}, cols {start}..{}", start + len),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = vec![0.0; rows * len];
        for i in 0..rows {
            data[i * len..(i + 1) * len].copy_from_slice(&self.data(a)[i * cols + start..i * cols + start + len]);
        }
        let rg = self.needs(a);
        Ok(self.push(vec![rows, len], data, rg, Op::SliceCols { a, start, len, rows, cols }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "concat_cols", detail: "no parts".into() });
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p).to_vec();
            if sp.len() != 2 || sp[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("part shape {sp:?}, expected {rows} rows"),
                });
            }
            widths.push((p, sp[1]));
            total += sp[1];
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &(p, w) in &widths {
            for i in 0..rows {
                data[i * total + off..i * total + off + w].copy_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = widths.iter().any(|&(p, _)| self.needs(p));
        Ok(self.push(vec![rows, total], data, rg, Op::ConcatCols { parts: widths, rows }))
    }

    /// Weighted sum of per-row cross entropies: Σ_t w_t · (−log softmax(l_t)[y_t]).
    /// Rows with weight 0 contribute nothing (and get no gradient).
    pub fn cross_entropy_rows(&mut self, logits: TensorId, targets: &[usize], weights: &[f32]) -> Result<TensorId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || targets.len() != sl[0] || weights.len() != sl[0] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {sl:?}, {} targets, {} weights", targets.len(), weights.len()),
            });
        }
        let (rows, cols) = (sl[0], sl[1]);
        for &t in targets {
            if t >= cols {
                return Err(TensorError::TargetOutOfRange { id: t, vocab: cols });
            }
        }
        // f64 accumulation keeps the scalar loss quiet enough for FD checks.
        let mut total = 0.0f64;
        for i in 0..rows {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &self.data(logits)[i * cols..(i + 1) * cols];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&v| ((v - mx) as f64).exp()).sum::<f64>().ln() + mx as f64;
            total += weights[i] as f64 * (lse - row[targets[i]] as f64);
        }
        let rg = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![total as f32],
            rg,
            Op::CrossEntropyRows { logits, targets: targets.to_vec(), weights: weights.to_vec(), rows, cols },
        ))
    }

    /// Weighted mean of per-position cross entropies; zero when all weights are 0.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: &[usize], weights: &[f32]) -> Result<TensorId> {
        let wsum: f32 = weights.iter().sum();
        if wsum == 0.0 {
            let rg = self.needs(logits);
            // Still validate inputs so error contracts hold.
            let _ = self.cross_entropy_rows(logits, targets, weights)?;
            return Ok(self.push(vec![1], vec![0.0], rg, Op::Leaf));
        }
        let norm: Vec<f32> = weights.iter().map(|w| w / wsum).collect();
        self.cross_entropy_rows(logits, targets, &norm)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        let rg = self.needs(a);
        self.push(vec![1], vec![total as f32], rg, Op::SumAll { a })
    }

    pub fn dot_const(&mut self, a: TensorId, w: &[f32]) -> Result<TensorId> {
        if self.data(a).len() != w.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dot_const",
                detail: format!("{} elements vs {} weights", self.data(a).len(), w.len()),
            });
        }
        let total: f64 = self.data(a).iter().zip(w).map(|(&v, &c)| v as f64 * c as f64).sum();
        let rg = self.needs(a);
        Ok(self.push(vec![1], vec![total as f32], rg, Op::DotConst { a, w: w.to_vec() }))
    }

    /// For each gathered (row, action): log softmax(logits[row])[action].
    pub fn gather_log_softmax(&mut self, logits: TensorId, rows: &[usize], actions: &[usize]) -> Result<TensorId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || rows.len() != actions.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather_log_softmax",
                detail: format!("logits {sl:?}, {} rows, {} actions", rows.len(), actions.len()),
            });
        }
        let cols = sl[1];
        let mut data = vec![0.0; rows.len()];
        for (j, (&r, &a)) in rows.iter().zip(actions).enumerate() {
            if r >= sl[0] {
                return Err(TensorError::TargetOutOfRange { id: r, vocab: sl[0] });
            }
            if a >= cols {
                return Err(TensorError::TargetOutOfRange { id: a, vocab: cols });
            }
            let row = &self.data(logits)[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&v| ((v - mx) as f64).exp()).sum::<f64>().ln() + mx as f64;
            data[j] = (row[a] as f64 - lse) as f32;
        }
        let rg = self.needs(logits);
        Ok(self.push(
            vec![rows.len()],
            data,
            rg,
            Op::GatherLogSoftmax { logits, rows: rows.to_vec(), actions: actions.to_vec(), cols },
        ))
    }

    /// exp(a − shift), elementwise with a constant shift vector (log-space ratios).
    pub fn exp_shift(&mut self, a: TensorId, shift: &[f32]) -> Result<TensorId> {
        if self.data(a).len() != shift.len() {
            return Err(TensorError::ShapeMismatch {
                op: "exp_shift",
                detail: format!("{} elements vs {} shifts", self.data(a).len(), shift.len()),
            });
        }
        let data: Vec<f32> = self.data(a).iter().zip(shift).map(|(&v, &s)| (v - s).exp()).collect();
        let rg = self.needs(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, rg, Op::ExpShift { a }))
    }

    /// min(r·A, clip(r, 1−ε, 1+ε)·A) per element. Gradient wrt r is exactly 0
    /// whenever the clipped branch is strictly smaller.
    pub fn clip_surrogate(&mut self, ratio: TensorId, adv: &[f32], eps: f32) -> Result<TensorId> {
        if self.data(ratio).len() != adv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "clip_surrogate",
                detail: format!("{} ratios vs {} advantages", self.data(ratio).len(), adv.len()),
            });
        }
        let data: Vec<f32> = self
            .data(ratio)
            .iter()
            .zip(adv)
            .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
            .collect();
        let rg = self.needs(ratio);
        let shape = self.shape(ratio).to_vec();
        Ok(self.push(shape, data, rg, Op::ClipSurrogate { ratio, adv: adv.to_vec(), eps }))
    }

    /// Unbiased nonnegative KL estimate ρ − ln ρ − 1, ρ = exp(lp_ref − lp_θ).
    pub fn kl_term(&mut self, lp_theta: TensorId, lp_ref: &[f32]) -> Result<TensorId> {
        if self.data(lp_theta).len() != lp_ref.len() {
            return Err(TensorError::ShapeMismatch {
                op: "kl_term",
                detail: format!("{} elements vs {} refs", self.data(lp_theta).len(), lp_ref.len()),
            });
        }
        let data: Vec<f32> = self
            .data(lp_theta)
            .iter()
            .zip(lp_ref)
            .map(|(&lt, &lr)| {
                let d = lr - lt;
                d.exp() - d - 1.0
            })
            .collect();
        let rg = self.needs(lp_theta);
        let shape = self.shape(lp_theta).to_vec();
        Ok(self.push(shape, data, rg, Op::KlTerm { a: lp_theta, lp_ref: lp_ref.to_vec() }))
    }

    /// Returns an error if any value or gradient on the tape is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        for node in &self.nodes {
            if node.data.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite("forward values"));
            }
            if node.grad.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite("gradients"));
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss. Fills `grad` of every requires_grad
    /// node reachable from `loss`; each node is visited exactly once.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let n = self.nodes[loss.0].data.len();
        if n != 1 {
            return Err(TensorError::NonScalarLoss { numel: n });
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if self.nodes[idx].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.step_backward(idx);
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize) {
        // Take the op out to appease the borrow checker; leaves stay leaves.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let dy = self.nodes[idx].grad.clone();
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let bd = self.nodes[b.0].data.clone();
                    matmul_nt_acc(&mut self.nodes[a.0].grad, &dy, &bd, m, n, k);
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].data.clone();
                    matmul_tn_acc(&mut self.nodes[b.0].grad, &ad, &dy, m, k, n);
                }
            }
            Op::MatmulNT { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let bd = self.nodes[b.0].data.clone();
                    matmul_acc(&mut self.nodes[a.0].grad, &dy, &bd, m, n, k);
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].data.clone();
                    matmul_tn_acc(&mut self.nodes[b.0].grad, &dy, &ad, m, n, k);
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if self.needs(id) {
                        for (g, &d) in self.nodes[id.0].grad.iter_mut().zip(&dy) {
                            *g += d;
                        }
                    }
                }
            }
            Op::AddBias { a, bias, m, n } => {
                if self.needs(*a) {
                    for (g, &d) in self.nodes[a.0].grad.iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                if self.needs(*bias) {
                    for i in 0..*m {
                        for j in 0..*n {
                            self.nodes[bias.0].grad[j] += dy[i * n + j];
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = self.nodes[b.0].data.clone();
                    for (j, g) in self.nodes[a.0].grad.iter_mut().enumerate() {
                        *g += dy[j] * bd[j];
                    }
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].data.clone();
                    for (j, g) in self.nodes[b.0].grad.iter_mut().enumerate() {
                        *g += dy[j] * ad[j];
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    for (g, &d) in self.nodes[a.0].grad.iter_mut().zip(&dy) {
                        *g += d * c;
                    }
                }
            }
            Op::Silu { a } => {
                if self.needs(*a) {
                    let ad = self.nodes[a.0].data.clone();
                    for (j, g) in self.nodes[a.0].grad.iter_mut().enumerate() {
                        let s = sigmoid(ad[j]);
                        *g += dy[j] * s * (1.0 + ad[j] * (1.0 - s));
                    }
                }
            }
            Op::MaskedSoftmaxRows { a, rows, cols, .. } => {
                if self.needs(*a) {
                    let p = self.nodes[idx].data.clone();
                    for i in 0..*rows {
                        let pr = &p[i * cols..(i + 1) * cols];
                        let dyr = &dy[i * cols..(i + 1) * cols];
                        let dot: f32 = pr.iter().zip(dyr).map(|(&pv, &dv)| pv * dv).sum();
                        let ga = &mut self.nodes[a.0].grad[i * cols..(i + 1) * cols];
                        for j in 0..*cols {
                            ga[j] += pr[j] * (dyr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows { x, gamma, beta, rows, cols, eps } => {
                let (rows, cols, eps) = (*rows, *cols, *eps);
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gamma.0].data.clone();
                for i in 0..rows {
                    let xr = &xd[i * cols..(i + 1) * cols];
                    let dyr = &dy[i * cols..(i + 1) * cols];
                    let mean = xr.iter().sum::<f32>() / cols as f32;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f32> = xr.iter().map(|&v| (v - mean) * inv).collect();
                    if self.needs(*gamma) {
                        for j in 0..cols {
                            self.nodes[gamma.0].grad[j] += dyr[j] * xhat[j];
                        }
                    }
                    if self.needs(*beta) {
                        for j in 0..cols {
                            self.nodes[beta.0].grad[j] += dyr[j];
                        }
                    }
                    if self.needs(*x) {
                        let dg: Vec<f32> = (0..cols).map(|j| dyr[j] * gd[j]).collect();
                        let m1 = dg.iter().sum::<f32>() / cols as f32;
                        let m2 = dg.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f32>() / cols as f32;
                        let gx = &mut self.nodes[x.0].grad[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            gx[j] += (dg[j] - m1 - xhat[j] * m2) * inv;
                        }
                    }
                }
            }
            Op::Embed { table, ids, dim } => {
                if self.needs(*table) {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &dy[i * dim..(i + 1) * dim];
                        let dst = &mut self.nodes[table.0].grad[id * dim..(id + 1) * dim];
                        for j in 0..*dim {
                            dst[j] += src[j];
                        }
                    }
                }
            }
            Op::SliceRows { a, start, len, cols } => {
                if self.needs(*a) {
                    let ga = &mut self.nodes[a.0].grad[start * cols..(start + len) * cols];
                    for (g, &d) in ga.iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
            }
            Op::SliceCols { a, start, len, rows, cols } => {
                if self.needs(*a) {
                    for i in 0..*rows {
                        for j in 0..*len {
                            self.nodes[a.0].grad[i * cols + start + j] += dy[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|&(_, w)| w).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    if self.needs(p) {
                        for i in 0..*rows {
                            for j in 0..w {
                                self.nodes[p.0].grad[i * w + j] += dy[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::CrossEntropyRows { logits, targets, weights, rows, cols } => {
                if self.needs(*logits) {
                    let d = dy[0];
                    let ld = self.nodes[logits.0].data.clone();
                    for i in 0..*rows {
                        let w = weights[i];
                        if w == 0.0 {
                            continue;
                        }
                        let row = &ld[i * cols..(i + 1) * cols];
                        let mut p = vec![0.0; *cols];
                        softmax_row_masked(&mut p, row, None);
                        let gl = &mut self.nodes[logits.0].grad[i * cols..(i + 1) * cols];
                        for j in 0..*cols {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            gl[j] += d * w * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    for g in self.nodes[a.0].grad.iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            Op::DotConst { a, w } => {
                if self.needs(*a) {
                    for (j, g) in self.nodes[a.0].grad.iter_mut().enumerate() {
                        *g += dy[0] * w[j];
                    }
                }
            }
            Op::GatherLogSoftmax { logits, rows, actions, cols } => {
                if self.needs(*logits) {
                    let ld = self.nodes[logits.0].data.clone();
                    for (j, (&r, &a)) in rows.iter().zip(actions).enumerate() {
                        let row = &ld[r * cols..(r + 1) * cols];
                        let mut p = vec![0.0; *cols];
                        softmax_row_masked(&mut p, row, None);
                        let gl = &mut self.nodes[logits.0].grad[r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            let onehot = if c == a { 1.0 } else { 0.0 };
                            gl[c] += dy[j] * (onehot - p[c]);
                        }
                    }
                }
            }
            Op::ExpShift { a, .. } => {
                if self.needs(*a) {
                    let out = self.nodes[idx].data.clone();
                    for (j, g) in self.nodes[a.0].grad.iter_mut().enumerate() {
                        *g += dy[j] * out[j];
                    }
                }
            }
            Op::ClipSurrogate { ratio, adv, eps } => {
                if self.needs(*ratio) {
                    let rd = self.nodes[ratio.0].data.clone();
                    for (j, g) in self.nodes[ratio.0].grad.iter_mut().enumerate() {
                        let r = rd[j];
                        let a = adv[j];
                        let unclipped = r * a;
                        let clipped = r.clamp(1.0 - eps, 1.0 + eps) * a;
                        // Gradient follows the selected branch; the clipped
                        // branch is flat outside [1−ε, 1+ε].
                        let dr = if unclipped <= clipped {
                            a
                        } else if r >= 1.0 - eps && r <= 1.0 + eps {
                            a
                        } else {
                            0.0
                        };
                        *g += dy[j] * dr;
                    }
                }
            }
            Op::KlTerm { a, lp_ref } => {
                if self.needs(*a) {
                    let ad = self.nodes[a.0].data.clone();
                    for (j, g) in self.nodes[a.0].grad.iter_mut().enumerate() {
                        let rho = (lp_ref[j] - ad[j]).exp();
                        *g += dy[j] * (1.0 - rho);
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

/// A named learnable parameter living outside any tape.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "param shape/data mismatch");
        Param { name: name.into(), shape, data }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Param::new(name, shape, vec![0.0; numel])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Serialize a tensor as (u32 rank, u32 extents..., f32 data), little-endian.
pub fn write_tensor(out: &mut Vec<u8>, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Inverse of [`write_tensor`]; returns (shape, data, bytes consumed).
pub fn read_tensor(bytes: &[u8]) -> Option<(Vec<usize>, Vec<f32>, usize)> {
    if bytes.len() < 4 {
        return None;
    }
    let rank = u32::from_le_bytes(bytes[0..4].try_into().ok()?) as usize;
    let mut off = 4;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if bytes.len() < off + 4 {
            return None;
        }
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().ok()?) as usize);
        off += 4;
    }
    let numel: usize = shape.iter().product();
    if bytes.len() < off + 4 * numel {
        return None;
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().ok()?));
        off += 4;
    }
    Some((shape, data, off))
}
