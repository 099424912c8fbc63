"""Hot numeric kernels.

Each kernel has a numba implementation and a pure-numpy (or scipy)
implementation with the same signature. The numba path is used when numba
imports and ``ANCHORINV_DISABLE_NUMBA`` is unset or ``0``; otherwise the
numpy path is used. :func:`set_backend` switches at runtime (tests and the
benchmark use it to compare both paths).

The numba kernels release the GIL, so thread pools over candidates get
real parallelism.
"""

import os

import numpy as np
import scipy.linalg

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

HAVE_NUMBA = numba is not None


def _env_backend():
    flag = os.environ.get("ANCHORINV_DISABLE_NUMBA", "0").strip().lower()
    if not HAVE_NUMBA or flag not in ("", "0", "false", "no"):
        return "numpy"
    return "numba"


BACKEND = _env_backend()


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous name."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    previous, BACKEND = BACKEND, name
    return previous


def get_backend():
    return BACKEND


# ---------------------------------------------------------------------------
# numpy implementations


def _np_pairwise_distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _np_kth_neighbor_distance(points, query, k):
    diff = points - query
    d2 = np.einsum("ij,ij->i", diff, diff)
    return float(np.sqrt(np.partition(d2, k - 1)[k - 1]))


def _np_band_matrix(K, df, ds, bc, source):
    """Assemble the lower band (bandwidth nf) of the 5-point FV matrix."""
    ns, nf = K.shape
    n = ns * nf
    tf = (ds / df) * 2.0 * K[:, :-1] * K[:, 1:] / (K[:, :-1] + K[:, 1:])
    ts = (df / ds) * 2.0 * K[:-1, :] * K[1:, :] / (K[:-1, :] + K[1:, :])
    diag = np.zeros((ns, nf))
    diag[:, :-1] += tf
    diag[:, 1:] += tf
    diag[:-1, :] += ts
    diag[1:, :] += ts
    rhs = np.zeros((ns, nf)) if source is None else source.reshape(ns, nf).astype(float).copy()
    f_lo, f_hi, s_lo, s_hi = bc
    if not np.isnan(f_lo):
        t = 2.0 * K[:, 0] * ds / df
        diag[:, 0] += t
        rhs[:, 0] += t * f_lo
    if not np.isnan(f_hi):
        t = 2.0 * K[:, -1] * ds / df
        diag[:, -1] += t
        rhs[:, -1] += t * f_hi
    if not np.isnan(s_lo):
        t = 2.0 * K[0, :] * df / ds
        diag[0, :] += t
        rhs[0, :] += t * s_lo
    if not np.isnan(s_hi):
        t = 2.0 * K[-1, :] * df / ds
        diag[-1, :] += t
        rhs[-1, :] += t * s_hi
    ab = np.zeros((nf + 1, n))
    ab[0] = diag.ravel()
    off1 = np.zeros((ns, nf))
    off1[:, :-1] = -tf
    ab[1, :] = off1.ravel()
    if ns > 1:
        ab[nf, : n - nf] = -ts.ravel()
    return ab, rhs.ravel()


def _np_darcy_solve_batch(K, df, ds, bc, source):
    m, ns, nf = K.shape
    out = np.empty((m, ns * nf))
    for i in range(m):
        ab, rhs = _np_band_matrix(K[i], df, ds, bc, source)
        try:
            out[i] = scipy.linalg.solveh_banded(ab, rhs, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            out[i] = np.nan
    return out.reshape(m, ns, nf)


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def _nb_pairwise_distances(a, b):
        na, d = a.shape
        nb = b.shape[0]
        out = np.empty((na, nb))
        for i in range(na):
            for j in range(nb):
                s = 0.0
                for c in range(d):
                    t = a[i, c] - b[j, c]
                    s += t * t
                out[i, j] = np.sqrt(s)
        return out

    @numba.njit(cache=True, nogil=True)
    def _nb_kth_neighbor_distance(points, query, k):
        n, d = points.shape
        d2 = np.empty(n)
        for i in range(n):
            s = 0.0
            for c in range(d):
                t = points[i, c] - query[c]
                s += t * t
            d2[i] = s
        return np.sqrt(np.partition(d2, k - 1)[k - 1])

    @numba.njit(cache=True, nogil=True)
    def _nb_darcy_one(K, df, ds, f_lo, f_hi, s_lo, s_hi, src, band, out):
        # band[i, t] holds row i of the lower band at column i - bw + t (t = bw is the diagonal)
        ns, nf = K.shape
        n = ns * nf
        bw = nf
        band[:, :] = 0.0
        for p in range(n):
            out[p] = src[p]
        for s in range(ns):
            for f in range(nf):
                p = s * nf + f
                k0 = K[s, f]
                if f + 1 < nf:
                    k1 = K[s, f + 1]
                    t = (ds / df) * 2.0 * k0 * k1 / (k0 + k1)
                    band[p, bw] += t
                    band[p + 1, bw] += t
                    band[p + 1, bw - 1] = -t
                if s + 1 < ns:
                    k1 = K[s + 1, f]
                    t = (df / ds) * 2.0 * k0 * k1 / (k0 + k1)
                    band[p, bw] += t
                    band[p + nf, bw] += t
                    band[p + nf, 0] = -t
                if f == 0 and not np.isnan(f_lo):
                    t = 2.0 * k0 * ds / df
                    band[p, bw] += t
                    out[p] += t * f_lo
                if f == nf - 1 and not np.isnan(f_hi):
                    t = 2.0 * k0 * ds / df
                    band[p, bw] += t
                    out[p] += t * f_hi
                if s == 0 and not np.isnan(s_lo):
                    t = 2.0 * k0 * df / ds
                    band[p, bw] += t
                    out[p] += t * s_lo
                if s == ns - 1 and not np.isnan(s_hi):
                    t = 2.0 * k0 * df / ds
                    band[p, bw] += t
                    out[p] += t * s_hi
        # row-oriented banded Cholesky, in place
        for i in range(n):
            k_lo = max(0, i - bw)
            for j in range(k_lo, i + 1):
                acc = band[i, j - i + bw]
                oi = bw - i
                oj = bw - j
                for k in range(k_lo, j):
                    acc -= band[i, k + oi] * band[j, k + oj]
                if j < i:
                    band[i, j - i + bw] = acc / band[j, bw]
                else:
                    if acc <= 0.0:
                        return False
                    band[i, bw] = np.sqrt(acc)
        for i in range(n):
            acc = out[i]
            for k in range(max(0, i - bw), i):
                acc -= band[i, k - i + bw] * out[k]
            out[i] = acc / band[i, bw]
        for i in range(n - 1, -1, -1):
            acc = out[i]
            for k in range(i + 1, min(n, i + bw + 1)):
                acc -= band[k, i - k + bw] * out[k]
            out[i] = acc / band[i, bw]
        return True

    @numba.njit(cache=True, nogil=True)
    def _nb_darcy_batch(K, df, ds, f_lo, f_hi, s_lo, s_hi, src):
        m, ns, nf = K.shape
        n = ns * nf
        band = np.empty((n, nf + 1))
        out = np.empty((m, n))
        for i in range(m):
            ok = _nb_darcy_one(K[i], df, ds, f_lo, f_hi, s_lo, s_hi, src, band, out[i])
            if not ok:
                out[i, :] = np.nan
        return out

    def _nb_darcy_solve_batch(K, df, ds, bc, source):
        m, ns, nf = K.shape
        src = np.zeros(ns * nf) if source is None else np.ascontiguousarray(source, dtype=np.float64).ravel()
        f_lo, f_hi, s_lo, s_hi = (float(v) for v in bc)
        out = _nb_darcy_batch(np.ascontiguousarray(K, dtype=np.float64), float(df), float(ds),
                              f_lo, f_hi, s_lo, s_hi, src)
        return out.reshape(m, ns, nf)


# ---------------------------------------------------------------------------
# dispatch


def pairwise_distances(a, b):
    """Euclidean distance matrix between rows of ``a`` (n, d) and ``b`` (m, d)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if BACKEND == "numba":
        return _nb_pairwise_distances(a, b)
    return _np_pairwise_distances(a, b)


def kth_neighbor_distance(points, query, k):
    """Distance from ``query`` to its ``k``-th nearest row of ``points`` (1-based k)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    query = np.ascontiguousarray(query, dtype=np.float64)
    if BACKEND == "numba":
        return float(_nb_kth_neighbor_distance(points, query, int(k)))
    return _np_kth_neighbor_distance(points, query, int(k))


def darcy_solve_batch(K, df, ds, bc, source=None):
    """Solve steady Darcy flow for a stack of conductivity arrays.

    ``K`` has shape (m, ns, nf); ``nf`` is the fast (contiguous) axis with
    spacing ``df``. ``bc`` = (head at f=0, head at f=end, head at s=0,
    head at s=end), NaN meaning no-flow. Rows that fail to factorize come
    back as NaN.
    """
    if BACKEND == "numba":
        return _nb_darcy_solve_batch(K, df, ds, bc, source)
    return _np_darcy_solve_batch(np.asarray(K, dtype=np.float64), df, ds, bc,
                                 None if source is None else np.asarray(source, dtype=np.float64))
