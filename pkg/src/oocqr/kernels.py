"""In-core kernels for the tiled QR factorization and solve.

All kernels operate on square b-by-b float64 tiles and are deterministic:
same inputs, same bits out.

Storage conventions
-------------------
* Dense QR of a tile A: R overwrites the upper triangle, Householder
  vectors (implicit unit diagonal) overwrite the strictly lower part.
* Triangular-on-dense (TD) QR of a stacked pair [T; D] with T upper
  triangular: the updated R overwrites the upper triangle of T (the
  strictly lower part of the T buffer is never read or written, so
  reflectors parked there by an earlier dense QR survive), and the
  reflectors occupy the full D tile.
* Accumulated transform factor S: for each inner panel p of width w the
  w-by-w upper triangular block-reflector factor is packed at rows
  ``p*w : p*w + w``, columns ``0 : w`` of a b-by-b tile; everything
  outside the packs is zero. Reflectors have unit diagonal, so S carries
  all remaining scaling. Applies must use the same inner width w that
  produced S.

The per-column panel loops are the hot non-BLAS part and ship as numba
and pure-numpy twins (see ``_accel``); the trailing block updates are
plain matrix products in both paths.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import compile_or_none, pick

DEFAULT_INNER_BLOCK = 128
_SINGULAR_FLOOR = 1e-300
_TRIANGULAR_RTOL = 1e-14


class KernelInputError(ValueError):
    """Shape, finiteness, or structure violation in a kernel input."""


class SingularMatrixError(RuntimeError):
    """Zero (or sub-threshold) diagonal entry met during a triangular solve."""

    def __init__(self, global_column: int):
        self.global_column = int(global_column)
        super().__init__(
            f"singular upper-triangular factor: zero pivot at global column "
            f"{self.global_column}"
        )


# -- small checks -------------------------------------------------------------


def _check_square(name: str, t: np.ndarray, b: int | None = None) -> int:
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise KernelInputError(f"{name} must be a square tile, got shape {t.shape}")
    if b is not None and t.shape[0] != b:
        raise KernelInputError(f"{name} must be {b}x{b}, got {t.shape}")
    return t.shape[0]


def _check_w(w: int, b: int) -> int:
    w = int(w)
    if not 1 <= w <= b:
        raise KernelInputError(f"inner block width must satisfy 1 <= w <= {b}, got {w}")
    return w


# -- panel factorization twins ------------------------------------------------
# Householder convention (as in dlarfg): for x = [alpha; x2],
#   beta = -sign(alpha) * sqrt(alpha^2 + ||x2||^2)
#   tau  = (beta - alpha) / beta,   v = [1; x2 / (alpha - beta)]
# and H = I - tau v v^T maps x to [beta; 0]. ||x2|| = 0 gives tau = 0 (H = I).


def _dense_panel_np(a, j0, pw):
    """Factor panel columns [j0, j0+pw) of a; vectorized numpy path."""
    taus = np.zeros(pw)
    pend = j0 + pw
    for k in range(pw):
        col = j0 + k
        alpha = a[col, col]
        x = a[col + 1 :, col]
        sigma = float(x @ x)
        if sigma == 0.0:
            continue
        beta = -math.copysign(math.sqrt(alpha * alpha + sigma), alpha)
        tau = (beta - alpha) / beta
        x *= 1.0 / (alpha - beta)
        a[col, col] = beta
        taus[k] = tau
        if col + 1 < pend:
            srow = a[col, col + 1 : pend] + x @ a[col + 1 :, col + 1 : pend]
            srow *= tau
            a[col, col + 1 : pend] -= srow
            a[col + 1 :, col + 1 : pend] -= np.outer(x, srow)
    return taus


def _dense_panel_loops(a, j0, pw):
    b = a.shape[0]
    taus = np.zeros(pw)
    pend = j0 + pw
    for k in range(pw):
        col = j0 + k
        alpha = a[col, col]
        sigma = 0.0
        for r in range(col + 1, b):
            sigma += a[r, col] * a[r, col]
        if sigma == 0.0:
            continue
        beta = -math.copysign(math.sqrt(alpha * alpha + sigma), alpha)
        tau = (beta - alpha) / beta
        inv = 1.0 / (alpha - beta)
        for r in range(col + 1, b):
            a[r, col] *= inv
        a[col, col] = beta
        taus[k] = tau
        for j in range(col + 1, pend):
            s = a[col, j]
            for r in range(col + 1, b):
                s += a[r, col] * a[r, j]
            s *= tau
            a[col, j] -= s
            for r in range(col + 1, b):
                a[r, j] -= s * a[r, col]
    return taus


def _dense_build_t_np(a, j0, pw, taus):
    """Accumulate the upper triangular block-reflector factor for a panel."""
    tf = np.zeros((pw, pw))
    b = a.shape[0]
    for k in range(pw):
        tau = taus[k]
        tf[k, k] = tau
        if k > 0 and tau != 0.0:
            col = j0 + k
            z = a[col, j0 : j0 + k].copy()
            if col + 1 < b:
                z += a[col + 1 :, j0 : j0 + k].T @ a[col + 1 :, col]
            tf[:k, k] = -tau * (tf[:k, :k] @ z)
    return tf


def _dense_build_t_loops(a, j0, pw, taus):
    tf = np.zeros((pw, pw))
    b = a.shape[0]
    z = np.zeros(pw)
    for k in range(pw):
        tau = taus[k]
        tf[k, k] = tau
        if k > 0 and tau != 0.0:
            col = j0 + k
            for i in range(k):
                acc = a[col, j0 + i]
                for r in range(col + 1, b):
                    acc += a[r, j0 + i] * a[r, col]
                z[i] = acc
            for i in range(k):
                acc = 0.0
                for j in range(i, k):
                    acc += tf[i, j] * z[j]
                tf[i, k] = -tau * acc
    return tf


def _td_panel_np(t, d, j0, pw):
    """Factor a TD panel: row j0+k of T stacked on all of D, per column."""
    taus = np.zeros(pw)
    pend = j0 + pw
    for k in range(pw):
        col = j0 + k
        alpha = t[col, col]
        x = d[:, col]
        sigma = float(x @ x)
        if sigma == 0.0:
            continue
        beta = -math.copysign(math.sqrt(alpha * alpha + sigma), alpha)
        tau = (beta - alpha) / beta
        x *= 1.0 / (alpha - beta)
        t[col, col] = beta
        taus[k] = tau
        if col + 1 < pend:
            srow = t[col, col + 1 : pend] + x @ d[:, col + 1 : pend]
            srow *= tau
            t[col, col + 1 : pend] -= srow
            d[:, col + 1 : pend] -= np.outer(x, srow)
    return taus


def _td_panel_loops(t, d, j0, pw):
    b = d.shape[0]
    taus = np.zeros(pw)
    pend = j0 + pw
    for k in range(pw):
        col = j0 + k
        alpha = t[col, col]
        sigma = 0.0
        for r in range(b):
            sigma += d[r, col] * d[r, col]
        if sigma == 0.0:
            continue
        beta = -math.copysign(math.sqrt(alpha * alpha + sigma), alpha)
        tau = (beta - alpha) / beta
        inv = 1.0 / (alpha - beta)
        for r in range(b):
            d[r, col] *= inv
        t[col, col] = beta
        taus[k] = tau
        for j in range(col + 1, pend):
            s = t[col, j]
            for r in range(b):
                s += d[r, col] * d[r, j]
            s *= tau
            t[col, j] -= s
            for r in range(b):
                d[r, j] -= s * d[r, col]
    return taus


def _td_build_t_np(d, j0, pw, taus):
    tf = np.zeros((pw, pw))
    for k in range(pw):
        tau = taus[k]
        tf[k, k] = tau
        if k > 0 and tau != 0.0:
            col = j0 + k
            z = d[:, j0:col].T @ d[:, col]
            tf[:k, k] = -tau * (tf[:k, :k] @ z)
    return tf


def _td_build_t_loops(d, j0, pw, taus):
    b = d.shape[0]
    tf = np.zeros((pw, pw))
    z = np.zeros(pw)
    for k in range(pw):
        tau = taus[k]
        tf[k, k] = tau
        if k > 0 and tau != 0.0:
            col = j0 + k
            for i in range(k):
                acc = 0.0
                for r in range(b):
                    acc += d[r, j0 + i] * d[r, col]
                z[i] = acc
            for i in range(k):
                acc = 0.0
                for j in range(i, k):
                    acc += tf[i, j] * z[j]
                tf[i, k] = -tau * acc
    return tf


_dense_panel_nb = compile_or_none(_dense_panel_loops)
_dense_build_t_nb = compile_or_none(_dense_build_t_loops)
_td_panel_nb = compile_or_none(_td_panel_loops)
_td_build_t_nb = compile_or_none(_td_build_t_loops)

_dense_panel = pick(_dense_panel_nb, _dense_panel_np)
_dense_build_t = pick(_dense_build_t_nb, _dense_build_t_np)
_td_panel = pick(_td_panel_nb, _td_panel_np)
_td_build_t = pick(_td_build_t_nb, _td_build_t_np)


def use_path(name: str) -> None:
    """Rebind panel twins to 'numba' or 'numpy'. Benchmarking hook."""
    global _dense_panel, _dense_build_t, _td_panel, _td_build_t
    if name == "numba":
        if _dense_panel_nb is None:
            raise RuntimeError("numba is not available")
        _dense_panel, _dense_build_t = _dense_panel_nb, _dense_build_t_nb
        _td_panel, _td_build_t = _td_panel_nb, _td_build_t_nb
    elif name == "numpy":
        _dense_panel, _dense_build_t = _dense_panel_np, _dense_build_t_np
        _td_panel, _td_build_t = _td_panel_np, _td_build_t_np
    else:
        raise ValueError(f"unknown path {name!r}")


def _unit_lower(a: np.ndarray, j0: int, pw: int) -> np.ndarray:
    """Materialize the unit-lower reflector panel V from stored columns."""
    v = np.tril(a[j0:, j0 : j0 + pw], -1)
    np.fill_diagonal(v, 1.0)
    return v


# -- public kernels -----------------------------------------------------------


def comp_dense_qr(a: np.ndarray, w: int = DEFAULT_INNER_BLOCK):
    """Householder QR of one tile, in place.

    Returns ``(a, s)``: a holds R in its upper triangle and the unit-diagonal
    reflectors below it; s is the packed accumulated-transform tile. Zero
    padded rows/columns pass through untouched (zero reflectors, zero R).
    """
    b = _check_square("a", a)
    w = _check_w(w, b)
    if not np.isfinite(a).all():
        raise KernelInputError("comp_dense_qr: input tile has non-finite entries")
    s = np.zeros((b, b))
    j0 = 0
    while j0 < b:
        pw = min(w, b - j0)
        taus = _dense_panel(a, j0, pw)
        tf = _dense_build_t(a, j0, pw, taus)
        s[j0 : j0 + pw, :pw] = tf
        pend = j0 + pw
        if pend < b:
            vmat = _unit_lower(a, j0, pw)
            wmat = vmat.T @ a[j0:, pend:]
            z = tf.T @ wmat
            a[j0:, pend:] -= vmat @ z
        j0 = pend
    return a, s


def apply_left_qt_dense(y: np.ndarray, s: np.ndarray, c: np.ndarray,
                        w: int = DEFAULT_INNER_BLOCK) -> np.ndarray:
    """Apply Q^T from a dense tile QR to c, in place (c <- Q^T c)."""
    b = _check_square("y", y)
    _check_square("s", s, b)
    w = _check_w(w, b)
    if c.ndim != 2 or c.shape[0] != b:
        raise KernelInputError(f"c must have {b} rows, got shape {c.shape}")
    j0 = 0
    while j0 < b:
        pw = min(w, b - j0)
        tf = s[j0 : j0 + pw, :pw]
        vmat = _unit_lower(y, j0, pw)
        wmat = vmat.T @ c[j0:, :]
        z = tf.T @ wmat
        c[j0:, :] -= vmat @ z
        j0 += pw
    return c


def comp_td_qr(t: np.ndarray, d: np.ndarray, w: int = DEFAULT_INNER_BLOCK,
               validate: bool = False):
    """QR of the stacked pair [upper(t); d], exploiting t's triangularity.

    Only the upper triangle of t is read or written (it becomes the updated
    R); reflectors fill d completely. Each column's reflector touches one
    row of t and every row of d, so the known zeros below t's diagonal cost
    nothing. With ``validate=True`` the buffer below t's diagonal must
    actually be zero; the pipeline leaves dense-QR reflectors parked there
    and calls with the default.
    """
    b = _check_square("t", t)
    _check_square("d", d, b)
    w = _check_w(w, b)
    if not np.isfinite(d).all():
        raise KernelInputError("comp_td_qr: dense tile has non-finite entries")
    if validate:
        lower = np.linalg.norm(np.tril(t, -1))
        if lower > _TRIANGULAR_RTOL * max(np.linalg.norm(t), 1e-300):
            raise KernelInputError(
                "comp_td_qr: t is not upper triangular "
                f"(subdiagonal norm {lower:.3e})"
            )
    s = np.zeros((b, b))
    j0 = 0
    while j0 < b:
        pw = min(w, b - j0)
        taus = _td_panel(t, d, j0, pw)
        tf = _td_build_t(d, j0, pw, taus)
        s[j0 : j0 + pw, :pw] = tf
        pend = j0 + pw
        if pend < b:
            vd = d[:, j0:pend]
            wmat = t[j0:pend, pend:] + vd.T @ d[:, pend:]
            z = tf.T @ wmat
            t[j0:pend, pend:] -= z
            d[:, pend:] -= vd @ z
        j0 = pend
    return t, d, s


def apply_left_qt_td(d: np.ndarray, s: np.ndarray, f: np.ndarray, g: np.ndarray,
                     w: int = DEFAULT_INNER_BLOCK):
    """Apply Q^T from a TD QR to the stacked pair [f; g], in place."""
    b = _check_square("d", d)
    _check_square("s", s, b)
    w = _check_w(w, b)
    if f.ndim != 2 or f.shape[0] != b:
        raise KernelInputError(f"f must have {b} rows, got shape {f.shape}")
    if g.shape != f.shape:
        raise KernelInputError(f"f and g must match, got {f.shape} vs {g.shape}")
    j0 = 0
    while j0 < b:
        pw = min(w, b - j0)
        tf = s[j0 : j0 + pw, :pw]
        vd = d[:, j0 : j0 + pw]
        wmat = f[j0 : j0 + pw, :] + vd.T @ g
        z = tf.T @ wmat
        f[j0 : j0 + pw, :] -= z
        g -= vd @ z
        j0 += pw
    return f, g


def trsm_lunn(rt: np.ndarray, bmat: np.ndarray, extent: int | None = None,
              col_offset: int = 0, block: int = DEFAULT_INNER_BLOCK) -> np.ndarray:
    """Backward substitution: bmat <- upper(rt)^-1 bmat, in place.

    ``extent`` limits the solve to the logical leading block of a padded
    diagonal tile (rows at and past it are zeroed); ``col_offset`` names
    the tile's first global column in singularity errors. A diagonal entry
    below 1e-300 in magnitude raises :class:`SingularMatrixError`.
    """
    b = _check_square("rt", rt)
    if bmat.ndim != 2 or bmat.shape[0] != b:
        raise KernelInputError(f"bmat must have {b} rows, got shape {bmat.shape}")
    n = b if extent is None else int(extent)
    if not 0 <= n <= b:
        raise KernelInputError(f"extent must be in [0, {b}], got {n}")
    diag = np.abs(np.diagonal(rt)[:n])
    bad = np.nonzero(~(diag >= _SINGULAR_FLOOR))[0]
    if bad.size:
        raise SingularMatrixError(col_offset + int(bad[0]))
    i1 = n
    while i1 > 0:
        i0 = max(0, i1 - block)
        for i in range(i1 - 1, i0 - 1, -1):
            if i + 1 < i1:
                bmat[i, :] -= rt[i, i + 1 : i1] @ bmat[i + 1 : i1, :]
            bmat[i, :] /= rt[i, i]
        if i0 > 0:
            bmat[:i0, :] -= rt[:i0, i0:i1] @ bmat[i0:i1, :]
        i1 = i0
    if n < b:
        bmat[n:, :] = 0.0
    return bmat


def gemm_nn_mo(c: np.ndarray, a: np.ndarray, bmat: np.ndarray) -> np.ndarray:
    """Multiply-subtract update: c <- c - a @ bmat, in place.

    Non-finite inputs propagate into c; there is no other failure mode.
    """
    b = _check_square("a", a)
    if bmat.ndim != 2 or bmat.shape[0] != b:
        raise KernelInputError(f"bmat must have {b} rows, got shape {bmat.shape}")
    if c.shape != (b, bmat.shape[1]):
        raise KernelInputError(
            f"c must be {b}x{bmat.shape[1]}, got {c.shape}"
        )
    c -= a @ bmat
    return c
