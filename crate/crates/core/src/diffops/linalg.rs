use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// `y = x·W + b` over the trailing axis of `x`; `W` is `[F_in, F_out]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (fin, fout) = match w.dims() {
        [a, b] => (*a, *b),
        d => return shape_err(format!("linear weight must be [F_in,F_out], got {d:?}")),
    };
    if x.last_dim() != fin {
        return shape_err(format!("linear: trailing dim {} != F_in {fin}", x.last_dim()));
    }
    if let Some(b) = b {
        if b.len() != fout {
            return shape_err(format!("linear: bias length {} != F_out {fout}", b.len()));
        }
    }
    let rows = x.len() / fin;
    let mut y = match b {
        Some(b) => b.data().repeat(rows),
        None => vec![T::zero(); rows * fout],
    };
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(rows, fin, fout, (x.data(), fin, 1), (w.data(), fout, 1), beta, (&mut y, fout, 1));
    let mut dims = x.dims().to_vec();
    *dims.last_mut().expect("rank >= 1") = fout;
    Tensor::new(dims, y)
}

pub(crate) fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (fin, fout) = (w.dims()[0], w.dims()[1]);
    let rows = x.len() / fin;
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        T::gemm(rows, fout, fin, (dy.data(), fout, 1), (w.data(), 1, fout), T::zero(), (&mut dx, fin, 1));
        Tensor::new(x.dims().to_vec(), dx).expect("dims")
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); w.len()];
        T::gemm(fin, rows, fout, (x.data(), 1, fin), (dy.data(), fout, 1), T::zero(), (&mut dw, fout, 1));
        Tensor::new(w.dims().to_vec(), dw).expect("dims")
    });
    let mut db = vec![T::zero(); fout];
    for row in dy.data().chunks(fout) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    (dx, dw, Tensor::new(vec![fout], db).expect("dims"))
}

/// Shapes of a batched product: (batch, m, k, n).
pub(crate) fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
    if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return shape_err(format!("matmul: incompatible batch shapes {a:?} and {b:?}"));
    }
    let r = a.len();
    let (m, k) = (a[r - 2], a[r - 1]);
    let (bk, n) = if trans_b { (b[r - 1], b[r - 2]) } else { (b[r - 2], b[r - 1]) };
    if bk != k {
        return shape_err(format!("matmul: inner dims {k} and {bk} differ"));
    }
    let batch = a[..r - 2].iter().product();
    let mut out = a[..r - 2].to_vec();
    out.extend([m, n]);
    Ok((batch, m, k, n, out))
}

/// Batched `a·b` (or `a·bᵀ` when `trans_b`) over identical leading dims.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (batch, m, k, n, dims) = matmul_dims(a.dims(), b.dims(), trans_b)?;
    let mut c = vec![T::zero(); batch * m * n];
    let (brs, bcs) = if trans_b { (1, k) } else { (n, 1) };
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            (&a.data()[i * m * k..], k, 1),
            (&b.data()[i * k * n..], brs, bcs),
            T::zero(),
            (&mut c[i * m * n..], n, 1),
        );
    }
    Tensor::new(dims, c)
}

pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
    dc: &Tensor<T>,
    need_da: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (batch, m, k, n, _) = matmul_dims(a.dims(), b.dims(), trans_b).expect("validated in forward");
    let g = dc.data();
    let da = need_da.then(|| {
        let mut da = vec![T::zero(); a.len()];
        // dA = dC·Bᵀ
        let (rs, cs) = if trans_b { (k, 1) } else { (1, n) };
        for i in 0..batch {
            T::gemm(
                m,
                n,
                k,
                (&g[i * m * n..], n, 1),
                (&b.data()[i * k * n..], rs, cs),
                T::zero(),
                (&mut da[i * m * k..], k, 1),
            );
        }
        Tensor::new(a.dims().to_vec(), da).expect("dims")
    });
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); b.len()];
        for i in 0..batch {
            let (ai, gi, out) = (&a.data()[i * m * k..], &g[i * m * n..], &mut db[i * k * n..]);
            if trans_b {
                // dB[n,k] = dCᵀ·A
                T::gemm(n, m, k, (gi, 1, n), (ai, k, 1), T::zero(), (out, k, 1));
            } else {
                // dB[k,n] = Aᵀ·dC
                T::gemm(k, m, n, (ai, 1, k), (gi, n, 1), T::zero(), (out, n, 1));
            }
        }
        Tensor::new(b.dims().to_vec(), db).expect("dims")
    });
    (da, db)
}
