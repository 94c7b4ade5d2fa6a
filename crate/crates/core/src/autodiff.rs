//! Parameters, reverse-mode rules for the fixed network pipeline, Adam and
//! checkpoints.
//!
//! There is no general tape. Each stage of the pipeline (dense layers,
//! activations, output heads, compositing, losses) has a hand-written backward
//! rule, and [`forward_backward`] chains them for a batch of rays.

use std::fmt::Debug;
use std::path::Path;

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

pub mod pipeline;
pub use pipeline::{forward_backward, forward_only, LossParts, PreparedRay};

/// Scalar type the network runs in: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + NumCast + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).unwrap()
    }

    fn f64(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap()
    }

    /// `c = a * b + beta * c` with raw strides; see [`matrixmultiply`].
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `c (m×n) = op(a) (m×k) * op(b) (k×n) [+ c]`.
/// `a_t` means `a` is stored as k×m, `b_t` that `b` is stored as n×k.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "matmul shape");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above cover every addressed element.
    unsafe {
        T::gemm_raw(
            m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Adam first moment.
    pub m: Vec<T>,
    /// Adam second moment.
    pub v: Vec<T>,
}

/// Named dense arrays with mirrored gradient and optimizer buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
    /// Number of optimizer steps applied so far.
    pub step: u64,
}

/// Gradient buffers shaped like a [`ParamStore`], used for per-chunk partial sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub Vec<Vec<T>>);

impl<T: Real> Gradients<T> {
    pub fn add(mut self, other: Gradients<T>) -> Self {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        self
    }
}

impl<T: Real> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> usize {
        let n = value.len();
        assert_eq!(n, shape.iter().product::<usize>(), "param shape");
        self.params.push(Param {
            name: name.into(),
            shape,
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        self.params.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn new_gradients(&self) -> Gradients<T> {
        Gradients(self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect())
    }

    pub fn set_gradients(&mut self, g: Gradients<T>) {
        for (p, g) in self.params.iter_mut().zip(g.0) {
            assert_eq!(p.grad.len(), g.len());
            p.grad = g;
        }
    }

    /// Flat view of all values, in declaration order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Mutable access to the `i`-th scalar of the flattened parameter vector.
    pub fn flat_value_mut(&mut self, mut i: usize) -> &mut T {
        for p in &mut self.params {
            if i < p.value.len() {
                return &mut p.value[i];
            }
            i -= p.value.len();
        }
        panic!("flat index out of range")
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: conv(&p.value),
                    grad: conv(&p.grad),
                    m: conv(&p.m),
                    v: conv(&p.v),
                })
                .collect(),
            step: self.step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction. `step` is 1-based; moments live in
/// the store and `params.step` is set to `step`.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, lr: f64, cfg: &AdamConfig, step: u64) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidArgument("adam step is 1-based".into()));
    }
    for p in &params.params {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let step_size = T::of(lr / bc1);
    let bc2_sqrt = T::of(bc2.sqrt());
    let eps = T::of(cfg.eps);
    for p in &mut params.params {
        for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(&mut p.m).zip(&mut p.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *w = *w - step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
        }
    }
    params.step = step;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sine,
}

impl Activation {
    pub fn apply<T: Real>(self, pre: &[T], out: &mut [T]) {
        match self {
            Activation::Relu => pre.iter().zip(out).for_each(|(p, o)| *o = p.max(T::zero())),
            Activation::Sine => pre.iter().zip(out).for_each(|(p, o)| *o = p.sin()),
        }
    }

    /// `d_pre = d_out * f'(pre)`, written in place over `d_out`.
    pub fn backward<T: Real>(self, pre: &[T], d_out: &mut [T]) {
        match self {
            Activation::Relu => pre.iter().zip(d_out).for_each(|(p, d)| {
                if *p <= T::zero() {
                    *d = T::zero()
                }
            }),
            Activation::Sine => pre.iter().zip(d_out).for_each(|(p, d)| *d = *d * p.cos()),
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)`, stable for large |x|.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `y (rows×out) = x (rows×in) * w (in×out) + b`.
pub fn dense_forward<T: Real>(x: &[T], rows: usize, w: &[T], b: &[T], fan_in: usize, fan_out: usize, y: &mut [T]) {
    for r in y.chunks_exact_mut(fan_out).take(rows) {
        r.copy_from_slice(&b[..fan_out]);
    }
    matmul(rows, fan_in, fan_out, x, false, w, false, y, true);
}

/// Accumulates `dw += xᵀ dy`, `db += colsum(dy)` and, if requested, writes `dx = dy wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Real>(
    x: &[T],
    rows: usize,
    w: &[T],
    fan_in: usize,
    fan_out: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    matmul(fan_in, rows, fan_out, x, true, dy, false, dw, true);
    for r in dy.chunks_exact(fan_out).take(rows) {
        for (b, &d) in db.iter_mut().zip(r) {
            *b = *b + d;
        }
    }
    if let Some(dx) = dx {
        matmul(rows, fan_out, fan_in, dy, false, w, true, dx, false);
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPSC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, optimizer state and a free-form `key=value` metadata block.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub meta: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "array name is not UTF-8"))?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = self
            .take(len * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }
}

impl Checkpoint {
    /// Layout: magic, version (u32), optimizer step (u64), array count (u32),
    /// arrays (name length, name, ndim, dims, f32 LE payload; each parameter is
    /// followed by its `@adam_m` and `@adam_v` arrays), metadata length (u32),
    /// metadata UTF-8.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.extend_from_slice(&self.params.step.to_le_bytes());
        put_u32(&mut out, (self.params.params.len() * 3) as u32);
        for p in &self.params.params {
            put_array(&mut out, &p.name, &p.shape, &p.value);
            put_array(&mut out, &format!("{}@adam_m", p.name), &p.shape, &p.m);
            put_array(&mut out, &format!("{}@adam_v", p.name), &p.shape, &p.v);
        }
        put_u32(&mut out, self.meta.len() as u32);
        out.extend_from_slice(self.meta.as_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        if count % 3 != 0 {
            return Err(Error::format("checkpoint", "array count is not a multiple of 3"));
        }
        let mut params = ParamStore { params: Vec::new(), step };
        for _ in 0..count / 3 {
            let (name, shape, value) = r.array()?;
            let (mn, ms, m) = r.array()?;
            let (vn, vs, v) = r.array()?;
            if mn != format!("{name}@adam_m") || vn != format!("{name}@adam_v") || ms != shape || vs != shape {
                return Err(Error::format("checkpoint", format!("optimizer state missing for {name}")));
            }
            let idx = params.push(name, shape, value);
            params.params[idx].m = m;
            params.params[idx].v = v;
        }
        let n = r.u32()? as usize;
        let meta = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "metadata is not UTF-8"))?;
        if r.pos != buf.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { params, meta })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.push("w", vec![1], vec![w]);
        s
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn linear_layer_squared_loss_closed_form() {
        // L = |W x + b - y|², dL/dW = 2 (Wx + b - y) xᵀ
        let (fi, fo) = (3, 2);
        let x = [0.5, -1.0, 2.0];
        let w = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6]; // in×out
        let b = [0.05, -0.05];
        let y_t = [1.0, -1.0];
        let mut y = [0.0; 2];
        dense_forward(&x, 1, &w, &b, fi, fo, &mut y);
        let r: Vec<f64> = y.iter().zip(&y_t).map(|(a, t)| a - t).collect();
        let dy: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let (mut dw, mut db, mut dx) = ([0.0; 6], [0.0; 2], [0.0; 3]);
        dense_backward(&x, 1, &w, fi, fo, &dy, &mut dw, &mut db, Some(&mut dx));
        for i in 0..fi {
            for o in 0..fo {
                assert_abs_diff_eq!(dw[i * fo + o], 2.0 * r[o] * x[i], epsilon = 1e-14);
            }
        }
        assert_abs_diff_eq!(db[1], 2.0 * r[1], epsilon = 1e-14);
        assert_abs_diff_eq!(dx[2], 2.0 * (r[0] * w[4] + r[1] * w[5]), epsilon = 1e-14);
    }

    #[test]
    fn heads_are_stable() {
        assert_abs_diff_eq!(softplus(0.0f64), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert_abs_diff_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-1000.0f64).is_finite() && sigmoid(1000.0f32) == 1.0);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = scalar_store(1.5);
        for step in 1..=5 {
            adam_step(&mut s, 0.1, &AdamConfig::default(), step).unwrap();
        }
        assert_eq!(s.params[0].value[0], 1.5);
    }

    #[test]
    fn adam_moves_against_constant_gradient() {
        for g in [2.0, -0.3] {
            let mut s = scalar_store(0.0);
            for step in 1..=50 {
                s.params[0].grad[0] = g;
                adam_step(&mut s, 0.01, &AdamConfig::default(), step).unwrap();
            }
            assert!(s.params[0].value[0] * g < 0.0);
        }
    }

    #[test]
    fn adam_matches_hand_recurrence_on_quadratic() {
        // f(w) = (w - 3)², g = 2 (w - 3); three steps from w = 0, lr 0.1.
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let (mut w, mut m, mut v) = (0.0f64, 0.0, 0.0);
        let mut expect = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            expect.push(w);
        }
        // Each of the first steps moves by ~lr since |m̂|/sqrt(v̂) = 1 for a steady sign.
        assert_abs_diff_eq!(expect[0], 0.1, epsilon = 1e-6);
        let mut s = scalar_store(0.0);
        for t in 1..=3u64 {
            s.params[0].grad[0] = 2.0 * (s.params[0].value[0] - 3.0);
            adam_step(&mut s, lr, &AdamConfig { beta1: b1, beta2: b2, eps }, t).unwrap();
            assert_abs_diff_eq!(s.params[0].value[0], expect[t as usize - 1], epsilon = 1e-12);
        }
        assert_eq!(s.step, 3);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut s = scalar_store(0.0);
        s.params[0].grad[0] = f64::NAN;
        assert!(matches!(adam_step(&mut s, 0.1, &AdamConfig::default(), 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::<f32>::default();
        s.push("a.w", vec![2, 3], (0..6).map(|i| i as f32 * 0.25).collect());
        s.push("a.b", vec![3], vec![1.0, -1.0, 0.5]);
        s.params[1].m = vec![0.1, 0.2, 0.3];
        s.params[0].v = vec![9.0; 6];
        s.step = 42;
        // grads are not persisted
        let ck = Checkpoint { params: s, meta: "variant=full\n".into() };
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(&ck.encode()[..4], b"SPSC");
        let mut bytes = ck.encode();
        bytes.push(0);
        assert!(Checkpoint::decode(&bytes).is_err());
        assert!(Checkpoint::decode(&ck.encode()[..30]).is_err());
    }
}
