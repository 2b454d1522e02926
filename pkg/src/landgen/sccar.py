"""Spatial categorical conditional autoregression benchmark model.

Per-pixel class logits are U = Omega @ A, where each column of Omega is a
latent Gaussian field with a conditional-autoregressive precision matrix
tau_k * D (I - rho_k D^-1 Q) = tau_k (D - rho_k Q) on the 4-adjacency
graph, and A is a correlation matrix coupling the K fields. Observed
pixels contribute a categorical likelihood through a row softmax of U;
missing pixels contribute nothing.

Priors: m_k ~ Normal(0, variance 2) (the -m^2/4 term), tau_k half-Cauchy
with scale 2 (the log(2 / (pi (4 + tau^2))) term), rho_k ~ Uniform(0, 1),
and A uniform over valid correlation matrices, realized through a
canonical-partial-correlation parameterization of its Cholesky factor
with the matching Jacobian.

The log determinant uses the eigenvalues of D^-1/2 Q D^-1/2 (computed
once per structure; they do not depend on tau or rho), making each
posterior evaluation O(N + E) after that precompute. Inference is
gradient-based MCMC in unconstrained coordinates: rho via logit, tau via
log, partial correlations via atanh, Omega and m as-is.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import log_softmax, softmax
from .errors import BadMagicError, BadVersionError, FormatError, TruncatedPayloadError
from .formats import atomic_write_bytes
from .hmc import ChainResult, HmcOptions, ess, run_chains, split_rhat
from .raster import CategoricalRaster, PixelMask

LOG_2PI = float(np.log(2.0 * np.pi))
RHO_EPS = 1e-6


@dataclass(frozen=True)
class CarStructure:
    """4-adjacency graph of an H x W grid with cached spectral data."""

    n_rows: int
    n_cols: int
    edges: np.ndarray  # (E, 2) int, undirected, i < j
    degrees: np.ndarray  # (N,) neighbor counts
    eigenvalues: np.ndarray  # (N,) eigenvalues of D^-1/2 Q D^-1/2

    @property
    def n(self) -> int:
        return self.n_rows * self.n_cols

    @classmethod
    def grid(cls, n_rows: int, n_cols: int) -> "CarStructure":
        if n_rows < 2 or n_cols < 2:
            raise ValueError("grid must be at least 2x2")
        edges = []
        for r in range(n_rows):
            for c in range(n_cols):
                i = r * n_cols + c
                if c + 1 < n_cols:
                    edges.append((i, i + 1))
                if r + 1 < n_rows:
                    edges.append((i, i + n_cols))
        e = np.asarray(edges, dtype=np.int64)
        n = n_rows * n_cols
        deg = np.bincount(e.ravel(), minlength=n).astype(np.float64)
        scale = 1.0 / np.sqrt(deg)
        s = np.zeros((n, n))
        s[e[:, 0], e[:, 1]] = scale[e[:, 0]] * scale[e[:, 1]]
        s += s.T
        eig = np.linalg.eigvalsh(s)
        e.setflags(write=False)
        deg.setflags(write=False)
        eig.setflags(write=False)
        return cls(n_rows, n_cols, e, deg, eig)

    def multiply_q(self, x: np.ndarray) -> np.ndarray:
        """Q @ x for (N,) or (N, K) arrays."""
        out = np.zeros_like(x, dtype=np.float64)
        np.add.at(out, self.edges[:, 0], x[self.edges[:, 1]])
        np.add.at(out, self.edges[:, 1], x[self.edges[:, 0]])
        return out


@dataclass(frozen=True)
class SccarParams:
    """One constrained parameter setting (or posterior draw)."""

    omega: np.ndarray  # (N, K)
    corr: np.ndarray  # (K, K) correlation matrix A
    m: np.ndarray  # (K,)
    tau: np.ndarray  # (K,)
    rho: np.ndarray  # (K,)

    def __post_init__(self):
        k = self.omega.shape[1]
        if self.corr.shape != (k, k):
            raise ValueError("corr shape does not match omega columns")
        if np.any(self.tau <= 0):
            raise ValueError("tau must be positive")
        object.__setattr__(self, "rho", np.clip(self.rho, RHO_EPS, 1.0 - RHO_EPS))
        if not np.allclose(np.diag(self.corr), 1.0, atol=1e-8):
            raise ValueError("corr must have unit diagonal")
        np.linalg.cholesky(self.corr)  # raises if not positive definite

    @property
    def logits(self) -> np.ndarray:
        return self.omega @ self.corr


# ---------------------------------------------------------------------------
# Unconstrained parameterization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateLayout:
    """Index map of the flat unconstrained vector."""

    n: int
    k: int

    @property
    def n_cpc(self) -> int:
        return self.k * (self.k - 1) // 2

    @property
    def dim(self) -> int:
        return self.n * self.k + 3 * self.k + self.n_cpc

    def split(self, theta: np.ndarray):
        n, k = self.n, self.k
        omega = theta[: n * k].reshape(n, k)
        m = theta[n * k : n * k + k]
        s = theta[n * k + k : n * k + 2 * k]  # log tau
        r = theta[n * k + 2 * k : n * k + 3 * k]  # logit rho
        y = theta[n * k + 3 * k :]  # atanh partial correlations
        return omega, m, s, r, y

    def join(self, omega, m, s, r, y) -> np.ndarray:
        return np.concatenate([np.ravel(omega), m, s, r, y])


def _tri_indices(k: int) -> tuple[np.ndarray, np.ndarray]:
    return np.tril_indices(k, k=-1)


def cholesky_from_cpcs(c_tri: np.ndarray, k: int) -> np.ndarray:
    """Unit-row-norm lower Cholesky factor from partial correlations
    (strict-lower entries in row-major order)."""
    rows, cols = _tri_indices(k)
    c = np.zeros((k, k))
    c[rows, cols] = c_tri
    ell = np.zeros((k, k))
    ell[0, 0] = 1.0
    for i in range(1, k):
        s = 1.0
        for j in range(i):
            ell[i, j] = c[i, j] * s
            s *= np.sqrt(1.0 - c[i, j] ** 2)
        ell[i, i] = s
    return ell


def _cholesky_backward_y(c: np.ndarray, ell: np.ndarray, g_ell: np.ndarray, k: int) -> np.ndarray:
    """d f / d y (the atanh coordinates) given d f / d L.

    The 1/(1-c^2) from the construction cancels the tanh Jacobian
    analytically, so saturated partial correlations stay finite.
    """
    out = np.zeros((k, k))
    for i in range(1, k):
        # suffix[j] = sum over j' in (j, i] of g_ell[i, j'] * ell[i, j']
        suffix = 0.0
        prods = np.empty(i)
        for j in range(i, -1, -1):
            if j < i:
                prods[j] = suffix
            suffix += g_ell[i, j] * ell[i, j]
        s = 1.0
        for j in range(i):
            cij = c[i, j]
            out[i, j] = g_ell[i, j] * s * (1.0 - cij**2) - cij * prods[j]
            s *= np.sqrt(1.0 - cij**2)
    rows, cols = _tri_indices(k)
    return out[rows, cols]


def _log_one_minus_tanh_sq(y: np.ndarray) -> np.ndarray:
    """log(1 - tanh(y)^2), stable for saturated y."""
    a = np.abs(y)
    return np.log(4.0) - 2.0 * a - 2.0 * np.log1p(np.exp(-2.0 * a))


def params_from_unconstrained(theta: np.ndarray, layout: StateLayout) -> SccarParams:
    omega, m, s, r, y = layout.split(np.asarray(theta, dtype=np.float64))
    c = np.tanh(y)
    ell = cholesky_from_cpcs(c, layout.k)
    return SccarParams(
        omega=omega.copy(),
        corr=ell @ ell.T,
        m=m.copy(),
        tau=np.exp(s),
        rho=_sigmoid(r),
    )


def unconstrained_from_params(params: SccarParams, layout: StateLayout) -> np.ndarray:
    ell = np.linalg.cholesky(params.corr)
    k = layout.k
    c = np.zeros((k, k))
    for i in range(1, k):
        s = 1.0
        for j in range(i):
            c[i, j] = ell[i, j] / s
            s *= np.sqrt(1.0 - c[i, j] ** 2)
    rows, cols = _tri_indices(k)
    y = np.arctanh(np.clip(c[rows, cols], -1 + 1e-15, 1 - 1e-15))
    rho = np.clip(params.rho, RHO_EPS, 1 - RHO_EPS)
    return layout.join(
        params.omega, params.m, np.log(params.tau), np.log(rho / (1 - rho)), y
    )


# ---------------------------------------------------------------------------
# Log posterior
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogPosteriorParts:
    likelihood: float
    car: float
    m_prior: float
    tau_prior: float
    corr_prior: float  # zero in constrained space for LKJ(1)

    @property
    def total(self) -> float:
        return self.likelihood + self.car + self.m_prior + self.tau_prior + self.corr_prior


def car_log_density(
    omega_col: np.ndarray, m: float, tau: float, rho: float, structure: CarStructure
) -> float:
    """Gaussian log density of one latent column under the CAR precision
    tau (D - rho Q); usable at rho = 0 where it factorizes."""
    n = structure.n
    w = omega_col - m
    quad_d = float((structure.degrees * w * w).sum())
    quad_q = float((w * structure.multiply_q(w)).sum())
    logdet = (
        n * np.log(tau)
        + float(np.log(structure.degrees).sum())
        + float(np.log1p(-rho * structure.eigenvalues).sum())
    )
    return 0.5 * logdet - 0.5 * tau * (quad_d - rho * quad_q) - 0.5 * n * LOG_2PI


def log_posterior(
    params: SccarParams,
    raster: CategoricalRaster,
    mask: PixelMask,
    structure: CarStructure,
) -> LogPosteriorParts:
    """Constrained-space log posterior, by component. Missing pixels
    contribute no likelihood term."""
    mask.check_matches(raster)
    n, k = params.omega.shape
    if n != structure.n:
        raise ValueError(f"omega has {n} rows, structure expects {structure.n}")
    if raster.data.size != n:
        raise ValueError("raster does not match structure")
    x = raster.data.ravel()
    obs = mask.observed.ravel()
    u = params.omega @ params.corr
    logp = log_softmax(u, axis=1)
    likelihood = float(logp[np.arange(n)[obs], x[obs]].sum())
    car = sum(
        car_log_density(params.omega[:, j], params.m[j], params.tau[j], params.rho[j], structure)
        for j in range(k)
    )
    m_prior = float(-(params.m**2).sum() / 4.0)
    tau_prior = float(np.log(2.0 / (np.pi * (4.0 + params.tau**2))).sum())
    parts = LogPosteriorParts(
        likelihood=likelihood,
        car=float(car),
        m_prior=m_prior,
        tau_prior=tau_prior,
        corr_prior=0.0,
    )
    if not np.isfinite(parts.total):
        bad = [
            name
            for name, v in (
                ("likelihood", parts.likelihood),
                ("car", parts.car),
                ("m_prior", parts.m_prior),
                ("tau_prior", parts.tau_prior),
            )
            if not np.isfinite(v)
        ]
        raise FloatingPointError(f"non-finite log posterior component(s): {', '.join(bad)}")
    return parts


def make_unconstrained_target(
    raster: CategoricalRaster, mask: PixelMask, structure: CarStructure, k: int
):
    """(logp, grad) closure over the flat unconstrained vector, including
    all transform Jacobians, for gradient-based MCMC."""
    mask.check_matches(raster)
    n = structure.n
    layout = StateLayout(n=n, k=k)
    x = raster.data.ravel()
    obs = mask.observed.ravel()
    obs_idx = np.flatnonzero(obs)
    deg = structure.degrees
    lam = structure.eigenvalues
    log_deg_sum = float(np.log(deg).sum())
    rows, cols = _tri_indices(k)
    # per-column LKJ(1) exponent plus the tanh Jacobian: (K - j) / 2 each
    alpha = (k - cols) / 2.0

    def logp_grad(theta: np.ndarray) -> tuple[float, np.ndarray]:
        omega, m, s, r, y = layout.split(np.asarray(theta, dtype=np.float64))
        tau = np.exp(s)
        rho = _sigmoid(r)
        rho_c = _sigmoid(-r)  # 1 - rho without float saturation
        c_tri = np.tanh(y)
        cmat = np.zeros((k, k))
        cmat[rows, cols] = c_tri
        ell = cholesky_from_cpcs(c_tri, k)
        corr = ell @ ell.T

        u = omega @ corr
        logp_rows = log_softmax(u, axis=1)
        likelihood = float(logp_rows[obs_idx, x[obs_idx]].sum())
        g_u = np.zeros((n, k))
        g_u[obs_idx] = -np.exp(logp_rows[obs_idx])
        g_u[obs_idx, x[obs_idx]] += 1.0

        w = omega - m[None, :]
        qw = structure.multiply_q(w)
        quad_d = (deg[:, None] * w * w).sum(axis=0)
        quad_q = (w * qw).sum(axis=0)
        # 1 - rho*lam rewritten as (1 - lam) + lam*(1 - rho): no cancellation
        # cliff when the logit saturates (lam_max = 1 on a connected grid)
        one_minus_rho_lam = (1.0 - lam)[None, :] + lam[None, :] * rho_c[:, None]
        with np.errstate(divide="ignore"):
            log1p_term = np.log(one_minus_rho_lam).sum(axis=1)
        logdets = layout.n * s + log_deg_sum + log1p_term
        car = float((0.5 * logdets - 0.5 * tau * (quad_d - rho * quad_q)).sum()) - 0.5 * k * n * LOG_2PI

        m_prior = float(-(m**2).sum() / 4.0)
        tau_prior = float(np.log(2.0 / (np.pi * (4.0 + tau**2))).sum())
        jac = float(s.sum() - (_softplus(r) + _softplus(-r)).sum())
        corr_term = float((alpha * _log_one_minus_tanh_sq(y)).sum())
        total = likelihood + car + m_prior + tau_prior + jac + corr_term

        # gradients
        prec_w = deg[:, None] * w - rho[None, :] * qw  # (D - rho Q) w, per class
        g_omega = g_u @ corr - tau[None, :] * prec_w
        g_m = tau * prec_w.sum(axis=0) - m / 2.0
        g_s = (
            0.5 * layout.n
            - 0.5 * tau * (quad_d - rho * quad_q)
            - 2.0 * tau**2 / (4.0 + tau**2)
            + 1.0
        )
        # rho*(1-rho) * lam / (1 - rho*lam), grouped to stay finite as the
        # logit saturates; 0/0 only occurs on -inf logp states (rejected)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = (lam[None, :] * (rho * rho_c)[:, None]) / one_minus_rho_lam
        ratio = np.nan_to_num(ratio, nan=0.0, posinf=0.0, neginf=0.0)
        g_r = -0.5 * ratio.sum(axis=1) + 0.5 * rho * rho_c * tau * quad_q + (rho_c - rho)
        g_a = omega.T @ g_u
        g_ell = (g_a + g_a.T) @ ell
        g_y = _cholesky_backward_y(cmat, ell, g_ell, k) - 2.0 * alpha * c_tri

        grad = layout.join(g_omega, g_m, g_s, g_r, g_y)
        if not np.isfinite(total):
            return -np.inf, grad
        return total, grad

    return logp_grad, layout


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


# ---------------------------------------------------------------------------
# Fitting and prediction
# ---------------------------------------------------------------------------


@dataclass
class SccarFit:
    layout: StateLayout
    n_rows: int
    n_cols: int
    chains: np.ndarray  # (C, D, dim) unconstrained draws
    accept_rates: tuple[float, ...] = ()
    divergences: tuple[int, ...] = ()
    step_sizes: tuple[float, ...] = ()

    @property
    def n_chains(self) -> int:
        return self.chains.shape[0]

    @property
    def n_draws(self) -> int:
        return self.chains.shape[1]

    def params_at(self, chain: int, draw: int) -> SccarParams:
        return params_from_unconstrained(self.chains[chain, draw], self.layout)

    def pooled(self) -> np.ndarray:
        return self.chains.reshape(-1, self.chains.shape[-1])

    def named_scalar_draws(self) -> dict[str, np.ndarray]:
        """Constrained (C, D) draw arrays for every scalar parameter."""
        n, k = self.layout.n, self.layout.k
        c, d, _ = self.chains.shape
        out: dict[str, np.ndarray] = {}
        omega = self.chains[:, :, : n * k].reshape(c, d, n, k)
        for i in range(n):
            for j in range(k):
                out[f"omega_{i}_{j}"] = omega[:, :, i, j]
        m = self.chains[:, :, n * k : n * k + k]
        s = self.chains[:, :, n * k + k : n * k + 2 * k]
        r = self.chains[:, :, n * k + 2 * k : n * k + 3 * k]
        for j in range(k):
            out[f"m_{j}"] = m[:, :, j]
            out[f"tau_{j}"] = np.exp(s[:, :, j])
            out[f"rho_{j}"] = _sigmoid(r[:, :, j])
        y = self.chains[:, :, n * k + 3 * k :]
        rows, cols = _tri_indices(k)
        corr = np.empty((c, d, rows.size))
        for ci in range(c):
            for di in range(d):
                ell = cholesky_from_cpcs(np.tanh(y[ci, di]), k)
                corr[ci, di] = (ell @ ell.T)[rows, cols]
        for t, (i, j) in enumerate(zip(rows, cols)):
            out[f"corr_{i}_{j}"] = corr[:, :, t]
        return out

    def rho_draws(self) -> np.ndarray:
        """(C, D, K) constrained spatial-correlation draws."""
        n, k = self.layout.n, self.layout.k
        r = self.chains[:, :, n * k + 2 * k : n * k + 3 * k]
        return _sigmoid(r)

    def diagnostics_rows(self) -> list[tuple[str, float, float, float, float]]:
        """(parameter, rhat, ess_proxy, mean, sd) per scalar parameter."""
        rows = []
        for name, draws in self.named_scalar_draws().items():
            r = float(split_rhat(draws)[0])
            e = float(np.mean([ess(ch) for ch in draws]))
            pooled = draws.ravel()
            rows.append((name, r, e, float(pooled.mean()), float(pooled.std())))
        return rows


def hmc_fit(
    raster: CategoricalRaster,
    mask: PixelMask,
    structure: CarStructure | None = None,
    k: int | None = None,
    chains: int = 4,
    tune: int = 2000,
    draws: int = 2000,
    target_accept: float = 0.9,
    seed: int = 0,
    leapfrog_steps: int = 32,
) -> SccarFit:
    """Posterior draws via HMC with dual-averaged step size."""
    if not mask.observed.any():
        raise ValueError("need at least one observed pixel")
    if structure is None:
        structure = CarStructure.grid(raster.height, raster.width)
    if k is None:
        k = raster.palette_K
    logp_grad, layout = make_unconstrained_target(raster, mask, structure, k)
    opts = HmcOptions(leapfrog_steps=leapfrog_steps, target_accept=target_accept)
    x0 = np.zeros(layout.dim)
    results: list[ChainResult] = run_chains(
        logp_grad, x0, chains, tune, draws, seed, opts, init_spread=0.1
    )
    return SccarFit(
        layout=layout,
        n_rows=structure.n_rows,
        n_cols=structure.n_cols,
        chains=np.stack([r.draws for r in results]),
        accept_rates=tuple(r.accept_rate for r in results),
        divergences=tuple(r.divergences for r in results),
        step_sizes=tuple(r.step_size for r in results),
    )


def predictive_inpaint(
    fit: SccarFit,
    raster: CategoricalRaster,
    mask: PixelMask,
    count: int,
    seed: int = 0,
) -> list[CategoricalRaster]:
    """Ancestral predictive completions: draw a posterior parameter set
    uniformly, then draw each missing pixel's class from its row softmax.
    Observed pixels are clamped."""
    mask.check_matches(raster)
    if fit.n_draws == 0:
        raise ValueError("fit has no draws")
    rng = np.random.default_rng(seed)
    missing = np.flatnonzero(~mask.observed.ravel())
    out = []
    for _ in range(count):
        c = int(rng.integers(0, fit.n_chains))
        d = int(rng.integers(0, fit.n_draws))
        params = fit.params_at(c, d)
        probs = softmax(params.logits, axis=1)
        data = raster.data.ravel().copy()
        for i in missing:
            u = rng.random()
            cum = np.cumsum(probs[i])
            cum[-1] = 1.0
            data[i] = min(int(np.searchsorted(cum, u, side="right")), probs.shape[1] - 1)
        out.append(raster.with_data(data.reshape(raster.data.shape)))
    return out


# ---------------------------------------------------------------------------
# Draw persistence (SCCD)
# ---------------------------------------------------------------------------

SCCD_MAGIC = b"SCCD"
SCCD_VERSION = 1


def encode_draws(fit: SccarFit) -> bytes:
    n, k = fit.layout.n, fit.layout.k
    header = {
        "chains": fit.n_chains,
        "draws": fit.n_draws,
        "dim": fit.layout.dim,
        "n_rows": fit.n_rows,
        "n_cols": fit.n_cols,
        "K": k,
        "parameters": [
            {"name": "omega", "shape": [n, k]},
            {"name": "m", "shape": [k]},
            {"name": "log_tau", "shape": [k]},
            {"name": "logit_rho", "shape": [k]},
            {"name": "corr_cpc_atanh", "shape": [k * (k - 1) // 2]},
        ],
        "accept_rates": list(fit.accept_rates),
        "divergences": list(fit.divergences),
        "step_sizes": list(fit.step_sizes),
    }
    enc = json.dumps(header).encode("utf-8")
    return (
        SCCD_MAGIC
        + bytes([SCCD_VERSION])
        + struct.pack("<I", len(enc))
        + enc
        + np.ascontiguousarray(fit.chains, dtype="<f8").tobytes()
    )


def decode_draws(buf: bytes) -> SccarFit:
    if len(buf) < 9:
        raise TruncatedPayloadError("file shorter than SCCD header")
    if buf[:4] != SCCD_MAGIC:
        raise BadMagicError(f"expected {SCCD_MAGIC!r}, got {buf[:4]!r}")
    if buf[4] != SCCD_VERSION:
        raise BadVersionError(f"unsupported SCCD version {buf[4]}")
    (jlen,) = struct.unpack_from("<I", buf, 5)
    try:
        header = json.loads(buf[9 : 9 + jlen].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad SCCD JSON: {exc}") from exc
    c, d, dim = int(header["chains"]), int(header["draws"]), int(header["dim"])
    need = 9 + jlen + 8 * c * d * dim
    if len(buf) < need:
        raise TruncatedPayloadError(f"SCCD payload holds {len(buf) - 9 - jlen} of {8*c*d*dim} bytes")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after SCCD payload")
    chains = np.frombuffer(buf, dtype="<f8", offset=9 + jlen).reshape(c, d, dim).copy()
    n = int(header["n_rows"]) * int(header["n_cols"])
    k = int(header["K"])
    layout = StateLayout(n=n, k=k)
    if layout.dim != dim:
        raise FormatError(f"SCCD dim {dim} inconsistent with N={n}, K={k}")
    return SccarFit(
        layout=layout,
        n_rows=int(header["n_rows"]),
        n_cols=int(header["n_cols"]),
        chains=chains,
        accept_rates=tuple(header.get("accept_rates", ())),
        divergences=tuple(header.get("divergences", ())),
        step_sizes=tuple(header.get("step_sizes", ())),
    )


def save_draws(path: str | Path, fit: SccarFit) -> None:
    atomic_write_bytes(path, encode_draws(fit))


def load_draws(path: str | Path) -> SccarFit:
    return decode_draws(Path(path).read_bytes())
