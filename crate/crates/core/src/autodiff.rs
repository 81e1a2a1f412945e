//! Minimal reverse-mode autodiff over f64 tensors.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients for
//! every node created with [`Tape::param`]. Nodes created with [`Tape::leaf`]
//! are constants: no gradient is ever accumulated for them or through paths
//! that only reach constants, which is how frozen components (v2l weights,
//! prompt bank, reference encoder outputs) are kept out of the update rule by
//! construction rather than by discarding gradients after the fact.
//!
//! Everything is f64. The op set is exactly what the detector, the mapper and
//! the loss kernels need; loss kernels are fused ops with hand-derived
//! backward rules, each checked against central finite differences in tests.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};

/// Handle to a tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// A proposal box mapped onto a batch image, in input-pixel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct RoiBox {
    pub image: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

type BackFn = Box<dyn Fn(&Tape, &ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)>>;

struct Node {
    value: ArrayD<f64>,
    needs_grad: bool,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct GradStore {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn clamp_norm(n: f64) -> f64 {
    n.max(1e-12)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().expect("empty tensor")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, back: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: receives no gradient and blocks gradient flow.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    /// Differentiable input: gradient is accumulated during backward.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, true, None)
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) + self.value(b);
        let needs = self.any_needs(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                vec![(a.0, g.clone()), (b.0, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) - self.value(b);
        let needs = self.any_needs(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                vec![(a.0, g.clone()), (b.0, -g)]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) * self.value(b);
        let needs = self.any_needs(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g| {
                vec![(a.0, g * t.value(b)), (b.0, g * t.value(a))]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| vec![(a.0, g * k)])),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g| {
                let mask = t.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a.0, g * &mask)]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig: Vec<usize> = self.value(a).shape().to_vec();
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(shape.to_vec())
            .expect("reshape: element count mismatch");
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                let back = g
                    .clone()
                    .into_shape_with_order(orig.clone())
                    .expect("reshape backward");
                vec![(a.0, back)]
            })),
        )
    }

    // ---- matrix ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let value = av.dot(&bv).into_dyn();
        let needs = self.any_needs(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = t.value(a).view().into_dimensionality::<Ix2>().unwrap();
                let bv = t.value(b).view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    (a.0, gv.dot(&bv.t()).into_dyn()),
                    (b.0, av.t().dot(&gv).into_dyn()),
                ]
            })),
        )
    }

    /// x: (R, D) plus a broadcast row bias b: (D,).
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.ncols(), bv.len());
        let value = (&xv + &bv).into_dyn();
        let needs = self.any_needs(&[x, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let db = gv.sum_axis(Axis(0)).into_dyn();
                vec![(x.0, g.clone()), (b.0, db)]
            })),
        )
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let needs = self.nodes[x.0].needs_grad;
        let value = out.into_dyn();
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g| {
                // recompute the softmax from x (cheaper than capturing it)
                let xv = t.value(x).view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut y = xv.to_owned();
                for mut row in y.rows_mut() {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - m).exp());
                    let s = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
                let mut dx = Array2::<f64>::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let dot: f64 = y.row(r).iter().zip(gv.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.ncols() {
                        dx[[r, c]] = y[[r, c]] * (gv[[r, c]] - dot);
                    }
                }
                vec![(x.0, dx.into_dyn())]
            })),
        )
    }

    /// Mean over rows: (T, D) -> (1, D).
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let t_rows = xv.nrows();
        let value = xv
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0))
            .into_dyn();
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let row = gv.row(0).to_owned() / t_rows as f64;
                let dx = Array2::from_shape_fn((t_rows, row.len()), |(_, c)| row[c]);
                vec![(x.0, dx.into_dyn())]
            })),
        )
    }

    /// Stack single-row (1, D) vars into (R, D).
    pub fn concat_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let d = self.value(rows[0]).shape()[1];
        let mut out = Array2::<f64>::zeros((rows.len(), d));
        for (i, v) in rows.iter().enumerate() {
            let rv = self.value(*v).view().into_dimensionality::<Ix2>().unwrap();
            out.row_mut(i).assign(&rv.row(0));
        }
        let needs = self.any_needs(rows);
        let rows_owned: Vec<Var> = rows.to_vec();
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                rows_owned
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        (v.0, gv.row(i).to_owned().insert_axis(Axis(0)).into_dyn())
                    })
                    .collect()
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.nodes[x.0].needs_grad;
        let shape: Vec<usize> = self.value(x).shape().to_vec();
        self.push(
            ndarray::arr0(s).into_dyn(),
            needs,
            Some(Box::new(move |_t, g| {
                let gs = *g.iter().next().unwrap();
                vec![(x.0, ArrayD::from_elem(shape.clone(), gs))]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ---- convolution ----

    /// 2-D convolution, NCHW layout, square kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let (n, ci, h, wd) = xv.dim();
        let (co, ciw, kh, kw) = wv.dim();
        assert_eq!(ci, ciw, "conv2d channel mismatch");
        assert_eq!(bv.len(), co);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;

        let w2 = wv.to_shape((co, ci * kh * kw)).unwrap().to_owned();
        let mut out = Array4::<f64>::zeros((n, co, ho, wo));
        let mut cols_cache: Vec<Array2<f64>> = Vec::with_capacity(n);
        for ni in 0..n {
            let cols = im2col(&xv.index_axis(Axis(0), ni).to_owned(), kh, kw, stride, pad);
            let y = w2.dot(&cols); // (co, ho*wo)
            let mut on = out.index_axis_mut(Axis(0), ni);
            for c in 0..co {
                for (p, val) in y.row(c).iter().enumerate() {
                    on[[c, p / wo, p % wo]] = val + bv[c];
                }
            }
            cols_cache.push(cols);
        }
        let needs = self.any_needs(&[x, w, b]);
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |t, g| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let wv = t.value(w).view().into_dimensionality::<Ix4>().unwrap();
                let w2 = wv.to_shape((co, ci * kh * kw)).unwrap().to_owned();
                let mut dw = Array2::<f64>::zeros((co, ci * kh * kw));
                let mut db = Array1::<f64>::zeros(co);
                let mut dx = Array4::<f64>::zeros((n, ci, h, wd));
                for ni in 0..n {
                    let gn = gv.index_axis(Axis(0), ni);
                    let g2 = gn.to_shape((co, ho * wo)).unwrap().to_owned();
                    dw = dw + g2.dot(&cols_cache[ni].t());
                    db = db + g2.sum_axis(Axis(1));
                    let dcols = w2.t().dot(&g2); // (ci*kh*kw, ho*wo)
                    let dxn = col2im(&dcols, ci, h, wd, kh, kw, stride, pad);
                    dx.index_axis_mut(Axis(0), ni).assign(&dxn);
                }
                vec![
                    (x.0, dx.into_dyn()),
                    (
                        w.0,
                        dw.into_shape_with_order((co, ci, kh, kw)).unwrap().into_dyn(),
                    ),
                    (b.0, db.into_dyn()),
                ]
            })),
        )
    }

    /// Adaptive average pooling of (N, C, H, W) down to (N, C, P, P).
    pub fn adaptive_avg_pool(&mut self, x: Var, p: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((n, c, p, p));
        let bounds = move |len: usize, i: usize| -> (usize, usize) {
            ((i * len) / p, ((i + 1) * len).div_ceil(p))
        };
        for ni in 0..n {
            for ci in 0..c {
                for pi in 0..p {
                    let (r0, r1) = bounds(h, pi);
                    for pj in 0..p {
                        let (c0, c1) = bounds(w, pj);
                        let mut acc = 0.0;
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                acc += xv[[ni, ci, r, cc]];
                            }
                        }
                        out[[ni, ci, pi, pj]] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                    }
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for pi in 0..p {
                            let (r0, r1) = bounds(h, pi);
                            for pj in 0..p {
                                let (c0, c1) = bounds(w, pj);
                                let share =
                                    gv[[ni, ci, pi, pj]] / ((r1 - r0) * (c1 - c0)) as f64;
                                for r in r0..r1 {
                                    for cc in c0..c1 {
                                        dx[[ni, ci, r, cc]] += share;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(x.0, dx.into_dyn())]
            })),
        )
    }

    /// RoIAlign with one bilinear sample per output cell, at the cell center.
    ///
    /// Boxes are in input-pixel coordinates; `stride` maps them onto the
    /// feature map, whose pixel (i, j) is centered at input pixel
    /// ((j + 0.5) * stride, (i + 0.5) * stride).
    pub fn roi_align(&mut self, fmap: Var, rois: &[RoiBox], stride: usize, p: usize) -> Var {
        let fv = self.value(fmap).view().into_dimensionality::<Ix4>().unwrap();
        let (_n, c, fh, fw) = fv.dim();
        let r = rois.len();
        let mut out = Array4::<f64>::zeros((r, c, p, p));
        let mut taps: Vec<(usize, usize, usize, usize, f64)> = Vec::new(); // roi-cell linear idx kept implicit by push order
        // taps entries: (image, row, col, cell_index, weight); cell_index = ((ri*p)+pi)*p+pj
        for (ri, roi) in rois.iter().enumerate() {
            let bw = roi.x1 - roi.x0;
            let bh = roi.y1 - roi.y0;
            for pi in 0..p {
                let cy = roi.y0 + (pi as f64 + 0.5) * bh / p as f64;
                let fy = (cy / stride as f64 - 0.5).clamp(0.0, (fh - 1) as f64);
                for pj in 0..p {
                    let cx = roi.x0 + (pj as f64 + 0.5) * bw / p as f64;
                    let fx = (cx / stride as f64 - 0.5).clamp(0.0, (fw - 1) as f64);
                    let y0 = fy.floor() as usize;
                    let x0 = fx.floor() as usize;
                    let y1 = (y0 + 1).min(fh - 1);
                    let x1 = (x0 + 1).min(fw - 1);
                    let dy = fy - y0 as f64;
                    let dx = fx - x0 as f64;
                    let cell = (ri * p + pi) * p + pj;
                    let w00 = (1.0 - dy) * (1.0 - dx);
                    let w01 = (1.0 - dy) * dx;
                    let w10 = dy * (1.0 - dx);
                    let w11 = dy * dx;
                    for (rr, cc, wt) in [
                        (y0, x0, w00),
                        (y0, x1, w01),
                        (y1, x0, w10),
                        (y1, x1, w11),
                    ] {
                        if wt != 0.0 {
                            taps.push((roi.image, rr, cc, cell, wt));
                        }
                        for ch in 0..c {
                            out[[ri, ch, pi, pj]] += wt * fv[[roi.image, ch, rr, cc]];
                        }
                    }
                }
            }
        }
        let needs = self.nodes[fmap.0].needs_grad;
        let fdim = fv.raw_dim();
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dfm = Array4::<f64>::zeros(fdim);
                for &(img, rr, cc, cell, wt) in &taps {
                    let pj = cell % p;
                    let pi = (cell / p) % p;
                    let ri = cell / (p * p);
                    for ch in 0..c {
                        dfm[[img, ch, rr, cc]] += wt * gv[[ri, ch, pi, pj]];
                    }
                }
                vec![(fmap.0, dfm.into_dyn())]
            })),
        )
    }

    /// Extract sample `idx` of (B, C, P, P) as a (P*P, C) token matrix.
    pub fn take_tokens(&mut self, x: Var, idx: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (_b, c, p, q) = xv.dim();
        let mut out = Array2::<f64>::zeros((p * q, c));
        for ch in 0..c {
            for pi in 0..p {
                for pj in 0..q {
                    out[[pi * q + pj, ch]] = xv[[idx, ch, pi, pj]];
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        let xdim = xv.raw_dim();
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array4::<f64>::zeros(xdim);
                for ch in 0..c {
                    for pi in 0..p {
                        for pj in 0..q {
                            dx[[idx, ch, pi, pj]] = gv[[pi * q + pj, ch]];
                        }
                    }
                }
                vec![(x.0, dx.into_dyn())]
            })),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let value = xv.t().to_owned().into_dyn();
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![(x.0, gv.t().to_owned().into_dyn())]
            })),
        )
    }

    /// Gather rows of a 2-D tensor: out[i] = x[indices[i]].
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let (r, d) = xv.dim();
        assert!(indices.iter().all(|&i| i < r), "row index out of range");
        let mut out = Array2::<f64>::zeros((indices.len(), d));
        for (o, &i) in indices.iter().enumerate() {
            out.row_mut(o).assign(&xv.row(i));
        }
        let needs = self.nodes[x.0].needs_grad;
        let idx = indices.to_vec();
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f64>::zeros((r, d));
                for (o, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[[i, c]] += gv[[o, c]];
                    }
                }
                vec![(x.0, dx.into_dyn())]
            })),
        )
    }

    /// Mean over the spatial dims of (R, C, P, Q) -> (R, C).
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (r, c, p, q) = xv.dim();
        let mut out = Array2::<f64>::zeros((r, c));
        for ri in 0..r {
            for ci in 0..c {
                let mut acc = 0.0;
                for pi in 0..p {
                    for qi in 0..q {
                        acc += xv[[ri, ci, pi, qi]];
                    }
                }
                out[[ri, ci]] = acc / (p * q) as f64;
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array4::<f64>::zeros((r, c, p, q));
                for ri in 0..r {
                    for ci in 0..c {
                        let share = gv[[ri, ci]] / (p * q) as f64;
                        for pi in 0..p {
                            for qi in 0..q {
                                dx[[ri, ci, pi, qi]] = share;
                            }
                        }
                    }
                }
                vec![(x.0, dx.into_dyn())]
            })),
        )
    }

    // ---- backward ----

    /// Accumulate gradients of a scalar `root` into every `param` node that
    /// feeds it. Constant leaves and subgraphs that reach no param are skipped.
    pub fn backward(&self, root: Var) -> GradStore {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_node = &self.nodes[root.0];
        grads[root.0] = Some(ArrayD::from_elem(root_node.value.raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(back) = self.nodes[i].back.as_ref() else {
                continue;
            };
            let g = grads[i].clone().unwrap();
            for (pid, contrib) in back(self, &g) {
                if !self.nodes[pid].needs_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        GradStore { grads }
    }
}

fn im2col(x: &ndarray::Array3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[[ci, ii as usize, jj as usize]] += dcols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    dx
}

// ---- fused loss kernels ----

impl Tape {
    /// One-directional InfoNCE over cosine similarities between row-aligned
    /// embedding matrices. Row i of `anchors` pairs with row i of
    /// `counterparts`; every other counterpart row is a negative. With
    /// `symmetric`, the reverse direction is averaged in.
    pub fn contrastive_pairs(&mut self, anchors: Var, counterparts: Var, tau: f64, symmetric: bool) -> Var {
        assert!(tau > 0.0, "temperature must be positive");
        let av = self.value(anchors).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self
            .value(counterparts)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        assert_eq!(av.dim(), bv.dim(), "pair batch rows must align");
        let (n, d) = av.dim();
        assert!(n >= 1);

        let a_norm: Vec<f64> = (0..n).map(|i| clamp_norm(av.row(i).dot(&av.row(i)).sqrt())).collect();
        let b_norm: Vec<f64> = (0..n).map(|i| clamp_norm(bv.row(i).dot(&bv.row(i)).sqrt())).collect();
        let mut sim = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                sim[[i, j]] = av.row(i).dot(&bv.row(j)) / (a_norm[i] * b_norm[j]);
            }
        }

        // softmax over scaled sims, row-wise (anchor direction) and, if
        // symmetric, column-wise (counterpart direction).
        let row_soft = |sim: &Array2<f64>| -> (f64, Array2<f64>) {
            let mut loss = 0.0;
            let mut probs = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                let m = (0..n).map(|j| sim[[i, j]] / tau).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (sim[[i, j]] / tau - m).exp();
                    probs[[i, j]] = e;
                    z += e;
                }
                for j in 0..n {
                    probs[[i, j]] /= z;
                }
                loss += -(probs[[i, i]].max(1e-300)).ln();
            }
            (loss / n as f64, probs)
        };

        let (loss_fwd, probs_fwd) = row_soft(&sim);
        let (loss_all, probs_rev) = if symmetric {
            let sim_t = sim.t().to_owned();
            let (loss_rev, probs_rev) = row_soft(&sim_t);
            ((loss_fwd + loss_rev) / 2.0, Some(probs_rev))
        } else {
            (loss_fwd, None)
        };

        let needs = self.any_needs(&[anchors, counterparts]);
        self.push(
            ndarray::arr0(loss_all).into_dyn(),
            needs,
            Some(Box::new(move |t, g| {
                let gs = *g.iter().next().unwrap();
                let av = t.value(anchors).view().into_dimensionality::<Ix2>().unwrap();
                let bv = t
                    .value(counterparts)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                // dL/dsim in the anchor direction: (P - I)/(N tau)
                let mut dsim = Array2::<f64>::zeros((n, n));
                let dir_weight = if probs_rev.is_some() { 0.5 } else { 1.0 };
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        dsim[[i, j]] += dir_weight * (probs_fwd[[i, j]] - delta) / (n as f64 * tau);
                    }
                }
                if let Some(pr) = &probs_rev {
                    // reverse direction: rows of simᵀ are columns of sim
                    for j in 0..n {
                        for i in 0..n {
                            let delta = if i == j { 1.0 } else { 0.0 };
                            dsim[[i, j]] += dir_weight * (pr[[j, i]] - delta) / (n as f64 * tau);
                        }
                    }
                }
                // chain through cosine
                let mut da = Array2::<f64>::zeros((n, d));
                let mut db = Array2::<f64>::zeros((n, d));
                for i in 0..n {
                    let na = clamp_norm(av.row(i).dot(&av.row(i)).sqrt());
                    let ahat = av.row(i).to_owned() / na;
                    for j in 0..n {
                        let w = dsim[[i, j]];
                        if w == 0.0 {
                            continue;
                        }
                        let nb = clamp_norm(bv.row(j).dot(&bv.row(j)).sqrt());
                        let bhat = bv.row(j).to_owned() / nb;
                        let s = ahat.dot(&bhat);
                        for k in 0..d {
                            da[[i, k]] += w * (bhat[k] - s * ahat[k]) / na;
                            db[[j, k]] += w * (ahat[k] - s * bhat[k]) / nb;
                        }
                    }
                }
                vec![
                    (anchors.0, (da * gs).into_dyn()),
                    (counterparts.0, (db * gs).into_dyn()),
                ]
            })),
        )
    }

    /// Mean over rows of the Manhattan distance between row-aligned matrices.
    pub fn l1_rows_mean(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.dim(), bv.dim());
        let n = av.nrows() as f64;
        let loss = (&av - &bv).mapv(f64::abs).sum() / n;
        let needs = self.any_needs(&[a, b]);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            needs,
            Some(Box::new(move |t, g| {
                let gs = *g.iter().next().unwrap();
                let av = t.value(a).view().into_dimensionality::<Ix2>().unwrap();
                let bv = t.value(b).view().into_dimensionality::<Ix2>().unwrap();
                let sign = (&av - &bv).mapv(|x| x.signum() * gs / n);
                vec![(a.0, sign.clone().into_dyn()), (b.0, (-sign).into_dyn())]
            })),
        )
    }

    /// Cosine-similarity logits of descriptive features against a prompt
    /// bank. Foreground rows of the bank are unit-norm; the final row is the
    /// all-zero background embedding, whose logit is exactly 0 before the
    /// temperature scaling (and therefore after it as well).
    pub fn prompt_logits(&mut self, z: Var, bank: &Array2<f64>, temp: f64) -> Var {
        assert!(temp > 0.0);
        let zv = self.value(z).view().into_dimensionality::<Ix2>().unwrap();
        let (r, d) = zv.dim();
        let (k, dbank) = bank.dim();
        assert_eq!(d, dbank, "feature dim must match bank dim");
        let mut out = Array2::<f64>::zeros((r, k));
        for ri in 0..r {
            let n = clamp_norm(zv.row(ri).dot(&zv.row(ri)).sqrt());
            for c in 0..k - 1 {
                out[[ri, c]] = zv.row(ri).dot(&bank.row(c)) / (n * temp);
            }
            // background row of the bank is all zeros
        }
        let needs = self.nodes[z.0].needs_grad;
        let bank_c = bank.clone();
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |t, g| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let zv = t.value(z).view().into_dimensionality::<Ix2>().unwrap();
                let mut dz = Array2::<f64>::zeros((r, d));
                for ri in 0..r {
                    let n = clamp_norm(zv.row(ri).dot(&zv.row(ri)).sqrt());
                    let zhat = zv.row(ri).to_owned() / n;
                    for c in 0..k - 1 {
                        let w = gv[[ri, c]];
                        if w == 0.0 {
                            continue;
                        }
                        let s = zhat.dot(&bank_c.row(c));
                        for kk in 0..d {
                            dz[[ri, kk]] += w * (bank_c[[c, kk]] - s * zhat[kk]) / (n * temp);
                        }
                    }
                }
                vec![(z.0, dz.into_dyn())]
            })),
        )
    }

    /// Cross-entropy with focal scaling, averaged over rows. The final class
    /// index is background and is weighted by `bg_weight`; all others get
    /// weight 1.
    pub fn focal_ce(&mut self, logits: Var, targets: &[usize], gamma: f64, bg_weight: f64) -> Var {
        assert!(gamma >= 0.0);
        let lv = self.value(logits).view().into_dimensionality::<Ix2>().unwrap();
        let (r, k) = lv.dim();
        assert_eq!(targets.len(), r);
        assert!(targets.iter().all(|&t| t < k), "target class out of range");
        assert!(lv.iter().all(|v| v.is_finite()), "non-finite logits");
        let bg = k - 1;
        let mut loss = 0.0;
        let mut probs = Array2::<f64>::zeros((r, k));
        for ri in 0..r {
            let m = lv.row(ri).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (lv[[ri, c]] - m).exp();
                probs[[ri, c]] = e;
                z += e;
            }
            for c in 0..k {
                probs[[ri, c]] /= z;
            }
            let t = targets[ri];
            let w = if t == bg { bg_weight } else { 1.0 };
            let u = probs[[ri, t]].clamp(1e-12, 1.0 - 1e-12);
            loss += w * (1.0 - u).powf(gamma) * (-u.ln());
        }
        loss /= r as f64;
        let needs = self.nodes[logits.0].needs_grad;
        let targets_c = targets.to_vec();
        self.push(
            ndarray::arr0(loss).into_dyn(),
            needs,
            Some(Box::new(move |_t, g| {
                let gs = *g.iter().next().unwrap();
                let mut dl = Array2::<f64>::zeros((r, k));
                for ri in 0..r {
                    let t = targets_c[ri];
                    let w = if t == bg { bg_weight } else { 1.0 };
                    let u = probs[[ri, t]].clamp(1e-12, 1.0 - 1e-12);
                    // dL/du for L = w (1-u)^gamma (-ln u)
                    let dldu = if gamma == 0.0 {
                        -w / u
                    } else {
                        w * (gamma * (1.0 - u).powf(gamma - 1.0) * u.ln()
                            - (1.0 - u).powf(gamma) / u)
                    };
                    for c in 0..k {
                        let delta = if c == t { 1.0 } else { 0.0 };
                        let dudc = u * (delta - probs[[ri, c]]);
                        dl[[ri, c]] = gs * dldu * dudc / (r as f64);
                    }
                }
                vec![(logits.0, dl.into_dyn())]
            })),
        )
    }

    /// Smooth-L1 (Huber) over row-aligned prediction/target matrices: summed
    /// across columns, averaged over rows.
    pub fn smooth_l1(&mut self, pred: Var, target: &Array2<f64>, beta: f64) -> Var {
        assert!(beta > 0.0);
        let pv = self.value(pred).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(pv.dim(), target.dim());
        let (r, _) = pv.dim();
        let mut loss = 0.0;
        for (p, t) in pv.iter().zip(target.iter()) {
            let d = (p - t).abs();
            loss += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
        }
        loss /= r as f64;
        let needs = self.nodes[pred.0].needs_grad;
        let target_c = target.clone();
        self.push(
            ndarray::arr0(loss).into_dyn(),
            needs,
            Some(Box::new(move |t, g| {
                let gs = *g.iter().next().unwrap();
                let pv = t.value(pred).view().into_dimensionality::<Ix2>().unwrap();
                let mut dp = Array2::<f64>::zeros(pv.raw_dim());
                for ((dpv, p), tv) in dp.iter_mut().zip(pv.iter()).zip(target_c.iter()) {
                    let d = p - tv;
                    *dpv = gs * (d / beta).clamp(-1.0, 1.0) / (r as f64);
                }
                vec![(pred.0, dp.into_dyn())]
            })),
        )
    }

    /// Binary cross-entropy on logits against fixed 0/1 targets, mean-reduced.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Array1<f64>) -> Var {
        let lv = self.value(logits).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(lv.len(), targets.len());
        let n = lv.len() as f64;
        let mut loss = 0.0;
        for (x, y) in lv.iter().zip(targets.iter()) {
            loss += x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).ln();
        }
        loss /= n;
        let needs = self.nodes[logits.0].needs_grad;
        let targets_c = targets.clone();
        self.push(
            ndarray::arr0(loss).into_dyn(),
            needs,
            Some(Box::new(move |t, g| {
                let gs = *g.iter().next().unwrap();
                let lv = t.value(logits).view().into_dimensionality::<Ix1>().unwrap();
                let mut dl = Array1::<f64>::zeros(lv.len());
                for i in 0..lv.len() {
                    let sig = 1.0 / (1.0 + (-lv[i]).exp());
                    dl[i] = gs * (sig - targets_c[i]) / n;
                }
                vec![(logits.0, dl.into_dyn())]
            })),
        )
    }

    /// Cross-entropy over code logits (negative Euclidean distance to each
    /// codebook row, scaled by 1/tau) against fixed pseudo-token targets.
    pub fn code_ce(&mut self, z: Var, codebook: &Array2<f64>, targets: &[usize], tau: f64) -> Var {
        assert!(tau > 0.0);
        let zv = self.value(z).view().into_dimensionality::<Ix2>().unwrap();
        let (r, d) = zv.dim();
        let (m, dc) = codebook.dim();
        assert_eq!(d, dc);
        assert_eq!(targets.len(), r);
        let mut dist = Array2::<f64>::zeros((r, m));
        let mut probs = Array2::<f64>::zeros((r, m));
        let mut loss = 0.0;
        for ri in 0..r {
            for mi in 0..m {
                let mut acc = 0.0;
                for k in 0..d {
                    let dd = zv[[ri, k]] - codebook[[mi, k]];
                    acc += dd * dd;
                }
                dist[[ri, mi]] = acc.sqrt();
            }
            let mx = (0..m).map(|mi| -dist[[ri, mi]] / tau).fold(f64::NEG_INFINITY, f64::max);
            let mut zsum = 0.0;
            for mi in 0..m {
                let e = (-dist[[ri, mi]] / tau - mx).exp();
                probs[[ri, mi]] = e;
                zsum += e;
            }
            for mi in 0..m {
                probs[[ri, mi]] /= zsum;
            }
            loss += -(probs[[ri, targets[ri]]].max(1e-300)).ln();
        }
        loss /= r as f64;
        let needs = self.nodes[z.0].needs_grad;
        let code_c = codebook.clone();
        let targets_c = targets.to_vec();
        self.push(
            ndarray::arr0(loss).into_dyn(),
            needs,
            Some(Box::new(move |t, g| {
                let gs = *g.iter().next().unwrap();
                let zv = t.value(z).view().into_dimensionality::<Ix2>().unwrap();
                let mut dz = Array2::<f64>::zeros((r, d));
                for ri in 0..r {
                    for mi in 0..m {
                        let delta = if mi == targets_c[ri] { 1.0 } else { 0.0 };
                        // dL/dlogit then dlogit/ddist = -1/tau
                        let dldist = (probs[[ri, mi]] - delta) / (r as f64) * (-1.0 / tau);
                        let dd = clamp_norm(dist[[ri, mi]]);
                        for k in 0..d {
                            dz[[ri, k]] +=
                                gs * dldist * (zv[[ri, k]] - code_c[[mi, k]]) / dd;
                        }
                    }
                }
                vec![(z.0, dz.into_dyn())]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;

    /// Central finite differences on a scalar function of one tensor input.
    fn fd_grad(
        f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
        x: &ArrayD<f64>,
        eps: f64,
    ) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = x.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    fn rand_arr(shape: &[usize], rng: &mut impl Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let mut rng = crate::rng::rng_from(1);
        let a0 = rand_arr(&[3, 4], &mut rng);
        let b0 = rand_arr(&[4, 2], &mut rng);

        let mut tape = Tape::new();
        let a = tape.param(a0.clone());
        let b = tape.param(b0.clone());
        let y = tape.matmul(a, b);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);

        let fd_a = fd_grad(
            &mut |x| {
                let mut t = Tape::new();
                let a = t.leaf(x.clone());
                let b = t.leaf(b0.clone());
                let y = t.matmul(a, b);
                t.value(y).sum()
            },
            &a0,
            1e-6,
        );
        assert!(max_rel_err(grads.get(a).unwrap(), &fd_a) < 1e-7);
    }

    #[test]
    fn conv2d_grad_matches_fd() {
        let mut rng = crate::rng::rng_from(2);
        let x0 = rand_arr(&[1, 2, 5, 5], &mut rng);
        let w0 = rand_arr(&[3, 2, 3, 3], &mut rng);
        let b0 = rand_arr(&[3], &mut rng);

        let run = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let y = t.conv2d(xv, wv, bv, 2, 1);
            // weight the sum so the gradient is not uniform
            t.value(y)
                .iter()
                .enumerate()
                .map(|(i, v)| v * ((i % 7) as f64 - 3.0))
                .sum()
        };

        let mut tape = Tape::new();
        let xv = tape.param(x0.clone());
        let wv = tape.param(w0.clone());
        let bv = tape.param(b0.clone());
        let y = tape.conv2d(xv, wv, bv, 2, 1);
        let weights = ArrayD::from_shape_fn(tape.value(y).raw_dim(), |_| 0.0);
        let mut weights = weights;
        for (i, v) in weights.iter_mut().enumerate() {
            *v = (i % 7) as f64 - 3.0;
        }
        let wnode = tape.leaf(weights);
        let prod = tape.mul(y, wnode);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);

        let fd_x = fd_grad(&mut |x| run(x, &w0, &b0), &x0, 1e-6);
        let fd_w = fd_grad(&mut |w| run(&x0, w, &b0), &w0, 1e-6);
        let fd_b = fd_grad(&mut |b| run(&x0, &w0, b), &b0, 1e-6);
        assert!(max_rel_err(grads.get(xv).unwrap(), &fd_x) < 1e-6);
        assert!(max_rel_err(grads.get(wv).unwrap(), &fd_w) < 1e-6);
        assert!(max_rel_err(grads.get(bv).unwrap(), &fd_b) < 1e-6);
    }

    #[test]
    fn softmax_grad_matches_fd() {
        let mut rng = crate::rng::rng_from(3);
        let x0 = rand_arr(&[3, 5], &mut rng);
        let run = |x: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = t.softmax_rows(xv);
            t.value(y)
                .iter()
                .enumerate()
                .map(|(i, v)| v * (i as f64).sin())
                .sum()
        };
        let mut tape = Tape::new();
        let xv = tape.param(x0.clone());
        let y = tape.softmax_rows(xv);
        let mut w = ArrayD::zeros(tape.value(y).raw_dim());
        for (i, v) in w.iter_mut().enumerate() {
            *v = (i as f64).sin();
        }
        let wnode = tape.leaf(w);
        let prod = tape.mul(y, wnode);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let fd = fd_grad(&mut |x| run(x), &x0, 1e-6);
        assert!(max_rel_err(grads.get(xv).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn roi_align_one_by_one_equals_center_bilinear_sample() {
        // 4x4 feature map with stride 1; a 1x1-pooled box centered between
        // pixels must reproduce the hand-computed bilinear interpolation.
        let mut fm = Array4::<f64>::zeros((1, 1, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                fm[[0, 0, i, j]] = (i * 4 + j) as f64;
            }
        }
        let mut tape = Tape::new();
        let f = tape.leaf(fm.into_dyn());
        // Box [1.0, 1.0, 2.0, 2.0] in input px, stride 1: center (1.5, 1.5),
        // continuous feature coords (1.0, 1.0) -> exactly pixel (1,1) = 5.0.
        let out = tape.roi_align(
            f,
            &[RoiBox { image: 0, x0: 1.0, y0: 1.0, x1: 2.0, y1: 2.0 }],
            1,
            1,
        );
        assert!((tape.value(out)[[0, 0, 0, 0]] - 5.0).abs() < 1e-12);

        // Box center (1.75, 2.25) -> coords (1.25, 1.75): interpolate
        // between rows 1..2 and cols 1..2 by hand:
        // (1-.75)(1-.25)*v(1,1) + (1-.75)(.25)*v(1,2)
        // + (.75)(1-.25)*v(2,1) + (.75)(.25)*v(2,2)
        // = .1875*5 + .0625*6 + .5625*9 + .1875*10 = 8.25
        let out2 = tape.roi_align(
            f,
            &[RoiBox { image: 0, x0: 1.25, y0: 1.75, x1: 2.25, y1: 2.75 }],
            1,
            1,
        );
        assert!((tape.value(out2)[[0, 0, 0, 0]] - 8.25).abs() < 1e-12);
    }

    #[test]
    fn roi_align_grad_matches_fd() {
        let mut rng = crate::rng::rng_from(4);
        let f0 = rand_arr(&[1, 2, 6, 6], &mut rng);
        let rois = vec![
            RoiBox { image: 0, x0: 2.0, y0: 3.0, x1: 9.0, y1: 10.0 },
            RoiBox { image: 0, x0: 0.5, y0: 0.5, x1: 4.0, y1: 6.0 },
        ];
        let run = |f: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let fv = t.leaf(f.clone());
            let y = t.roi_align(fv, &rois, 2, 3);
            t.value(y)
                .iter()
                .enumerate()
                .map(|(i, v)| v * ((i % 5) as f64 - 2.0))
                .sum()
        };
        let mut tape = Tape::new();
        let fv = tape.param(f0.clone());
        let y = tape.roi_align(fv, &rois, 2, 3);
        let mut w = ArrayD::zeros(tape.value(y).raw_dim());
        for (i, v) in w.iter_mut().enumerate() {
            *v = (i % 5) as f64 - 2.0;
        }
        let wnode = tape.leaf(w);
        let prod = tape.mul(y, wnode);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let fd = fd_grad(&mut |f| run(f), &f0, 1e-6);
        assert!(max_rel_err(grads.get(fv).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn constant_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(arr2(&[[1.0, 2.0]]).into_dyn());
        let frozen = tape.leaf(arr2(&[[3.0], [4.0]]).into_dyn());
        let y = tape.matmul(a, frozen);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(a).is_some());
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(y).is_some());
    }

    #[test]
    fn adaptive_pool_constant_map_is_identity_on_cells() {
        let fm = ArrayD::from_elem(vec![1, 3, 7, 5], 2.5);
        let mut tape = Tape::new();
        let f = tape.leaf(fm);
        let y = tape.adaptive_avg_pool(f, 2);
        assert!(tape.value(y).iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
