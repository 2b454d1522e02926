"""Shared test utilities: gradient checks and independent oracles."""

from __future__ import annotations

import numpy as np

from landgen.autodiff import Tape, Tensor


def rel_err(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a) + abs(b), floor)


def central_diff(f, flat: np.ndarray, i: int, h: float) -> float:
    old = flat[i]
    flat[i] = old + h
    fp = f()
    flat[i] = old - h
    fm = f()
    flat[i] = old
    return (fp - fm) / (2.0 * h)


def gradcheck(
    build,
    tensors: list[Tensor],
    h: float = 1e-3,
    tol: float = 1e-4,
    confirm_h: float | None = 1e-5,
    rng: np.random.Generator | None = None,
    max_per_tensor: int | None = None,
) -> float:
    """Compare tape gradients of the scalar `build()` against central
    differences at step `h`. Entries that miss `tol` are re-checked at
    `confirm_h` to separate finite-difference truncation error from a
    wrong backward rule (a wrong rule fails at every step size).
    Returns the worst confirmed relative error.
    """
    with Tape() as tape:
        loss = build()
    tape.backward(loss, params=tensors)
    grads = [t.grad.copy() for t in tensors]

    def f() -> float:
        return float(build().data)

    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.ravel()
        gflat = g.ravel()
        idxs = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            assert rng is not None
            idxs = rng.choice(flat.size, size=max_per_tensor, replace=False)
        for i in idxs:
            fd = central_diff(f, flat, i, h)
            err = rel_err(gflat[i], fd)
            if err > tol and confirm_h is not None:
                fd = central_diff(f, flat, i, confirm_h)
                err = rel_err(gflat[i], fd)
            assert err <= tol, (
                f"gradient mismatch in {t.name or 'tensor'}[{i}]: "
                f"analytic {gflat[i]:.6e} vs fd {fd:.6e} (rel err {err:.2e})"
            )
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Independent oracles (deliberately naive implementations)
# ---------------------------------------------------------------------------


def conv2d_loop_oracle(x, w, b, mask=None):
    """Nested-loop same-padded cross-correlation."""
    n, c, hh, ww = x.shape
    f, _, kh, kw = w.shape
    weff = w if mask is None else w * mask
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, f, hh, ww), dtype=np.float64)
    for ni in range(n):
        for fi in range(f):
            for i in range(hh):
                for j in range(ww):
                    acc = 0.0
                    for ci in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                ii, jj = i + p - ph, j + q - pw
                                if 0 <= ii < hh and 0 <= jj < ww:
                                    acc += weff[fi, ci, p, q] * x[ni, ci, ii, jj]
                    out[ni, fi, i, j] = acc + (b[fi] if b is not None else 0.0)
    return out


def adjacency_loop_oracle(data: np.ndarray) -> int:
    h, w = data.shape
    total = 0
    for r in range(h):
        for c in range(w):
            for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and data[r, c] == data[rr, cc]:
                    total += 1
    return total


def patch_count_floodfill_oracle(data: np.ndarray) -> int:
    h, w = data.shape
    seen = np.zeros((h, w), dtype=bool)
    patches = 0
    for r in range(h):
        for c in range(w):
            if seen[r, c]:
                continue
            patches += 1
            stack = [(r, c)]
            seen[r, c] = True
            cls = data[r, c]
            while stack:
                rr, cc = stack.pop()
                for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                    r2, c2 = rr + dr, cc + dc
                    if 0 <= r2 < h and 0 <= c2 < w and not seen[r2, c2] and data[r2, c2] == cls:
                        seen[r2, c2] = True
                        stack.append((r2, c2))
    return patches


def dense_sccar_oracle(params, x_flat, obs_flat, h, w):
    """Dense-matrix log posterior with explicit determinant and inverse."""
    n = h * w
    k = params.omega.shape[1]
    q = np.zeros((n, n))
    for r in range(h):
        for c in range(w):
            i = r * w + c
            for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w:
                    q[i, rr * w + cc] = 1.0
    d = np.diag(q.sum(axis=1))
    u = params.omega @ params.corr
    ll = 0.0
    for i in range(n):
        if obs_flat[i]:
            e = np.exp(u[i] - u[i].max())
            ll += float(np.log(e[x_flat[i]] / e.sum()))
    car = 0.0
    for j in range(k):
        prec = params.tau[j] * (d - params.rho[j] * q)
        _, logdet = np.linalg.slogdet(prec)
        wv = params.omega[:, j] - params.m[j]
        cov = np.linalg.inv(prec)
        car += 0.5 * logdet - 0.5 * wv @ np.linalg.inv(cov) @ wv - 0.5 * n * np.log(2 * np.pi)
    m_prior = -float((params.m**2).sum()) / 4.0
    tau_prior = float(np.log(2.0 / (np.pi * (4.0 + params.tau**2))).sum())
    return ll + car + m_prior + tau_prior
