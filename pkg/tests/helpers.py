"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, dense matrices)
so that it shares no code path with the library under test.
"""

import numpy as np

from winnet.linalg import Tensor, backward


def naive_conv2d(x, w, dilation=1, groups=1, offset=None):
    """Loop-based same-size zero-padded cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    cin, H, W = x.shape
    cout, cin_g, kh, kw = w.shape
    keff_y = dilation * (kh - 1) + 1
    keff_x = dilation * (kw - 1) + 1
    if offset is None:
        offset = ((keff_y - 1) // 2, (keff_x - 1) // 2)
    out = np.zeros((cout, H, W))
    cpg_in = cin // groups
    cpg_out = cout // groups
    for o in range(cout):
        g = o // cpg_out
        for i_local in range(cin_g):
            i = g * cpg_in + i_local
            for a in range(kh):
                for b in range(kw):
                    for y in range(H):
                        for xx in range(W):
                            yy = y + a * dilation - offset[0]
                            xx2 = xx + b * dilation - offset[1]
                            if 0 <= yy < H and 0 <= xx2 < W:
                                out[o, y, xx] += w[o, i_local, a, b] * x[i, yy, xx2]
    return out


def conv_matrix(w, in_shape, dilation=1, groups=1, offset=None):
    """Materialize the convolution as an explicit dense matrix."""
    cin, H, W = in_shape
    cout = w.shape[0]
    cols = []
    for i in range(cin * H * W):
        e = np.zeros(cin * H * W)
        e[i] = 1.0
        cols.append(naive_conv2d(e.reshape(in_shape), w, dilation, groups, offset).ravel())
    return np.stack(cols, axis=1)  # (cout*H*W, cin*H*W)


def materialize_operator(apply_fn, input_shape):
    """Dense matrix of an arbitrary linear map by probing basis vectors."""
    n = int(np.prod(input_shape))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        out = apply_fn(Tensor(e.reshape(input_shape))).data
        cols.append(np.asarray(out, dtype=np.float64).ravel())
    return np.stack(cols, axis=1)


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar-valued f at float64 array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def autodiff_grad(f, x):
    """Gradient of scalar-valued differentiable f at x via the library."""
    t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    loss = f(t)
    backward(loss)
    return t.grad


def check_grad(f_tensor, f_float, x, eps=1e-6, rtol=1e-5):
    """Compare autodiff and central-difference gradients; returns rel error."""
    ga = autodiff_grad(f_tensor, x)
    gn = numeric_grad(f_float, x, eps=eps)
    denom = max(np.linalg.norm(gn), 1e-12)
    rel = np.linalg.norm(ga - gn) / denom
    return rel, ga, gn


def naive_dictionary_gram(synthesis, analysis):
    """Brute-force channelwise spatial composition of two dictionaries."""
    Ws = np.asarray(synthesis, dtype=np.float64)
    Wa = np.asarray(analysis, dtype=np.float64)
    cd, n_atoms, r, _ = Ws.shape
    out = np.zeros((cd, cd, 2 * r - 1, 2 * r - 1))
    for i in range(cd):
        for j in range(cd):
            for m in range(n_atoms):
                for u in range(2 * r - 1):
                    for v in range(2 * r - 1):
                        acc = 0.0
                        for s in range(r):
                            for t in range(r):
                                us, vt = u - s, v - t
                                if 0 <= us < r and 0 <= vt < r:
                                    acc += Ws[i, m, s, t] * Wa[m, j, us, vt]
                        out[i, j, u, v] += acc
    return out


def charpoly_eigvals(A):
    """Eigenvalues via Faddeev-LeVerrier characteristic polynomial + companion roots.

    A genuinely different algorithm from LAPACK's symmetric eigensolver,
    adequate for small matrices.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    coeffs = np.zeros(n + 1)
    coeffs[0] = 1.0
    M = np.zeros_like(A)
    for k in range(1, n + 1):
        M = A @ M + coeffs[k - 1] * np.eye(n)
        coeffs[k] = -np.trace(A @ M) / k
    roots = np.roots(coeffs)
    return np.sort(roots.real)
