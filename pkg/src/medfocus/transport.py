"""Entropic unbalanced optimal transport between pixel distributions.

The solver minimizes

    <C, T> + eps * KL(T | a (x) b) + lam1 * KL(T 1 | a) + lam2 * KL(T' 1 | b)

with generalized KL divergences, using Sinkhorn scaling iterations carried out
on log-potentials.  With the Gibbs kernel taken relative to the product
measure, ``K_ij = a_i b_j exp(-C_ij / eps)``, the scaling updates are

    u <- (a / K v) ** (lam1 / (lam1 + eps))
    v <- (b / K' u) ** (lam2 / (lam2 + eps))

starting from ``u = v = 1``, and the plan is ``T_ij = u_i K_ij v_j``.

Two kernel back-ends are provided.  Distributions built from images live on
a regular grid, where the squared-distance kernel factorizes over the axes
and a kernel application costs ``O(h w (h + w))``.  Arbitrary point clouds use
a dense kernel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import logsumexp

from .core import as_image, resize_bilinear

__all__ = [
    "INTENSITY_FLOOR",
    "UotParams",
    "PixelDistribution",
    "TransportPlan",
    "DenseCore",
    "SolverError",
    "EmptyTransferError",
    "build_distribution",
    "solve_uot",
    "uot_objective",
    "transfer_region",
    "select_reference",
]

log = logging.getLogger(__name__)

INTENSITY_FLOOR = 1e-8

# Below this, a GEMM row sum may have lost precision to underflow and is
# recomputed with an exact log-sum-exp.
_GEMM_UNDERFLOW = 1e-250


class SolverError(ArithmeticError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class EmptyTransferError(ValueError):
    """No mass was transported out of the requested source pixels."""


@dataclass(frozen=True)
class UotParams:
    epsilon: float = 0.05
    lambda1: float = 0.1
    lambda2: float = 0.1
    max_iters: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("lambda1 and lambda2 must be positive")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError(f"max_iters must be a positive integer, got {self.max_iters}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")

    def swapped(self) -> "UotParams":
        return UotParams(self.epsilon, self.lambda2, self.lambda1, self.max_iters, self.tol)

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "lambda1": self.lambda1, "lambda2": self.lambda2,
                "max_iters": self.max_iters, "tol": self.tol}


@dataclass(frozen=True)
class PixelDistribution:
    """Weighted point cloud.  ``grid`` is set when the points form a pixel grid.

    For grid distributions ``grid = (height, width, pixel_size)`` and point
    ``j = y * width + x`` sits at ``((x + .5) * pixel_size, (y + .5) * pixel_size)``.
    """

    coords: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    grid: tuple[int, int, float] | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if len(coords) == 0:
            raise ValueError("empty distribution")
        if len(coords) != len(weights):
            raise ValueError(f"{len(coords)} coordinates but {len(weights)} weights")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be positive and finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_points(cls, coords, weights, normalize: bool = True) -> "PixelDistribution":
        w = np.maximum(np.asarray(weights, dtype=np.float64), INTENSITY_FLOOR)
        if normalize:
            w = w / w.sum()
        return cls(coords, w)

    def __len__(self) -> int:
        return len(self.weights)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        h, w, ps = self.grid
        return (np.arange(w) + 0.5) * ps, (np.arange(h) + 0.5) * ps


def build_distribution(img, extent: float | None = None) -> PixelDistribution:
    """Intensity-weighted distribution over pixel centers.

    Coordinates span ``[0, extent]`` along the longer image side; the default
    ``extent = max(h, w)`` puts pixel centers at integer-plus-half pixel units.
    """
    img = as_image(img)
    h, w = img.shape
    ps = 1.0 if extent is None else float(extent) / max(h, w)
    ys, xs = np.mgrid[0:h, 0:w]
    coords = np.stack([(xs.ravel() + 0.5) * ps, (ys.ravel() + 0.5) * ps], axis=1)
    inten = np.maximum(img.ravel().astype(np.float64), INTENSITY_FLOOR)
    return PixelDistribution(coords, inten / inten.sum(), grid=(h, w, ps))


# --- kernels -----------------------------------------------------------------
#
# Both kernels compute, for a log-vector h,
#     rows(h)_i = log sum_j exp(-C_ij / eps + h_j)
#     cols(h)_j = log sum_i exp(-C_ij / eps + h_i)
# and the cost-weighted variant with C_ij inserted as a factor.

class _DenseKernel:
    def __init__(self, X: np.ndarray, Y: np.ndarray, eps: float):
        self.cost = ((X[:, None, :] - Y[None, :, :]) ** 2).sum(axis=-1)
        self.eps = eps
        self.log_k = -self.cost / eps
        self.k = np.exp(self.log_k)

    def _apply(self, mat, log_mat, h, axis):
        finite = h[np.isfinite(h)]
        if finite.size == 0:
            return np.full(mat.shape[0] if axis == 1 else mat.shape[1], -np.inf)
        shift = finite.max()
        e = np.exp(h - shift)
        s = mat @ e if axis == 1 else e @ mat
        with np.errstate(divide="ignore"):
            out = np.log(s) + shift
        bad = s < _GEMM_UNDERFLOW
        if np.any(bad):
            if axis == 1:
                out[bad] = logsumexp(log_mat[bad] + h[None, :], axis=1)
            else:
                out[bad] = logsumexp(log_mat[:, bad] + h[:, None], axis=0)
        return out

    def rows(self, h):
        return self._apply(self.k, self.log_k, h, 1)

    def cols(self, h):
        return self._apply(self.k, self.log_k, h, 0)

    def cost_rows(self, h):
        with np.errstate(divide="ignore"):
            log_ck = np.log(self.cost) + self.log_k
        return self._apply(self.cost * self.k, log_ck, h, 1)

    def log_plan(self, f, g):
        return f[:, None] + self.log_k + g[None, :]

    def cost_matrix(self):
        return self.cost


class _GridKernel:
    """Separable kernel between two pixel grids."""

    def __init__(self, ref: PixelDistribution, tgt: PixelDistribution, eps: float):
        xr, yr = ref.axes()
        xt, yt = tgt.axes()
        self.shape_r = (len(yr), len(xr))
        self.shape_t = (len(yt), len(xt))
        self.eps = eps
        self.cx = (xr[:, None] - xt[None, :]) ** 2   # (Wr, Wt)
        self.cy = (yr[:, None] - yt[None, :]) ** 2   # (Hr, Ht)
        self.lkx = -self.cx / eps
        self.lky = -self.cy / eps
        with np.errstate(divide="ignore"):
            self.lcx = np.log(self.cx)
            self.lcy = np.log(self.cy)

    @staticmethod
    def _sep(h2d, lkx, lky):
        # h2d indexed (y_in, x_in); lkx (x_out, x_in); lky (y_out, y_in)
        a = logsumexp(lkx[None, :, :] + h2d[:, None, :], axis=2)       # (y_in, x_out)
        return logsumexp(lky[:, :, None] + a[None, :, :], axis=1)      # (y_out, x_out)

    def rows(self, h, lkx=None, lky=None):
        lkx = self.lkx if lkx is None else lkx
        lky = self.lky if lky is None else lky
        return self._sep(h.reshape(self.shape_t), lkx, lky).ravel()

    def cols(self, h):
        return self._sep(h.reshape(self.shape_r), self.lkx.T, self.lky.T).ravel()

    def cost_rows(self, h):
        # C = cx + cy, so the cost-weighted kernel splits into two separable terms
        with np.errstate(divide="ignore"):
            a = self.rows(h, lkx=self.lcx + self.lkx)
            b = self.rows(h, lky=self.lcy + self.lky)
        return np.logaddexp(a, b)

    def cost_matrix(self):
        cx = self.cx[None, :, None, :]
        cy = self.cy[:, None, :, None]
        n_r = self.shape_r[0] * self.shape_r[1]
        n_t = self.shape_t[0] * self.shape_t[1]
        return (cx + cy).reshape(n_r, n_t)

    def log_plan(self, f, g):
        return f[:, None] - self.cost_matrix() / self.eps + g[None, :]


def _make_kernel(ref: PixelDistribution, tgt: PixelDistribution, eps: float, backend: str):
    if backend not in ("auto", "grid", "dense"):
        raise ValueError(f"unknown kernel backend {backend!r}")
    if backend == "grid" or (backend == "auto" and ref.grid and tgt.grid):
        if not (ref.grid and tgt.grid):
            raise ValueError("grid backend needs grid distributions")
        return _GridKernel(ref, tgt, eps)
    return _DenseKernel(ref.coords, tgt.coords, eps)


# --- solver ------------------------------------------------------------------

@dataclass
class TransportPlan:
    """Converged scaling potentials; plan entries are computed on demand.

    ``log_u`` and ``log_v`` are the logs of the scaling vectors, so that
    ``log T_ij = log_u_i + log a_i - C_ij / eps + log b_j + log_v_j``.
    """

    mu_ref: PixelDistribution = field(repr=False)
    mu_tgt: PixelDistribution = field(repr=False)
    params: UotParams
    log_u: np.ndarray = field(repr=False)
    log_v: np.ndarray = field(repr=False)
    iterations_used: int
    converged: bool
    total_cost: float = 0.0
    _kernel: object = field(default=None, repr=False)

    @property
    def n_ref(self) -> int:
        return len(self.mu_ref)

    @property
    def n_tgt(self) -> int:
        return len(self.mu_tgt)

    def _row_log(self):
        return self.log_u + np.log(self.mu_ref.weights)

    def _col_log(self):
        return self.log_v + np.log(self.mu_tgt.weights)

    def dense(self) -> np.ndarray:
        """Full ``(n_ref, n_tgt)`` plan matrix."""
        return np.exp(self._kernel.log_plan(self._row_log(), self._col_log()))

    def row_sums(self) -> np.ndarray:
        return np.exp(self._row_log() + self._kernel.rows(self._col_log()))

    def col_sums(self) -> np.ndarray:
        return np.exp(self._col_log() + self._kernel.cols(self._row_log()))

    def received_mass(self, source_indices) -> np.ndarray:
        """``m_j = sum_{i in source} T_ij`` for every target pixel ``j``."""
        idx = np.asarray(source_indices, dtype=np.intp).ravel()
        h = np.full(self.n_ref, -np.inf)
        h[idx] = self._row_log()[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.exp(self._col_log() + self._kernel.cols(h))
        return np.nan_to_num(out, nan=0.0)

    def cost_matrix(self) -> np.ndarray:
        return self._kernel.cost_matrix()

    def _compute_total_cost(self) -> float:
        with np.errstate(divide="ignore"):
            lc = self._row_log() + self._kernel.cost_rows(self._col_log())
        return float(np.exp(lc).sum())

    def objective(self) -> float:
        return uot_objective(self.dense(), self.mu_ref.weights, self.mu_tgt.weights,
                             self.cost_matrix(), self.params)


def _kl(p, q):
    """Generalized KL divergence sum(p log(p/q) - p + q), with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(p / q), 0.0)
    return float(t.sum() - p.sum() + q.sum())


def uot_objective(plan, a, b, cost, params: UotParams) -> float:
    """Entropic UOT objective of an explicit plan matrix."""
    plan = np.asarray(plan, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return (float((np.asarray(cost) * plan).sum())
            + params.epsilon * _kl(plan, np.outer(a, b))
            + params.lambda1 * _kl(plan.sum(axis=1), a)
            + params.lambda2 * _kl(plan.sum(axis=0), b))


def solve_uot(mu_ref: PixelDistribution, mu_tgt: PixelDistribution,
              params: UotParams = UotParams(), backend: str = "auto") -> TransportPlan:
    """Run log-domain unbalanced Sinkhorn until the potentials stop moving.

    Stops after ``params.max_iters`` iterations or once a full (u, v) update
    changes every log-potential by less than ``params.tol``.
    """
    kernel = _make_kernel(mu_ref, mu_tgt, params.epsilon, backend)
    la = np.log(mu_ref.weights)
    lb = np.log(mu_tgt.weights)
    fi1 = params.lambda1 / (params.lambda1 + params.epsilon)
    fi2 = params.lambda2 / (params.lambda2 + params.epsilon)

    f = np.zeros(len(la))
    g = np.zeros(len(lb))
    converged = False
    it = 0
    for it in range(1, params.max_iters + 1):
        f_new = fi1 * (la - (la + kernel.rows(g + lb)))
        g_new = fi2 * (lb - (lb + kernel.cols(f_new + la)))
        if not (np.all(np.isfinite(f_new)) and np.all(np.isfinite(g_new))):
            raise SolverError("non-finite potential", it)
        change = max(np.abs(f_new - f).max(), np.abs(g_new - g).max())
        f, g = f_new, g_new
        if change < params.tol:
            converged = True
            break
    if not converged:
        log.debug("UOT stopped at the iteration cap (%d) before reaching tol", it)

    plan = TransportPlan(mu_ref, mu_tgt, params, f, g, it, converged, _kernel=kernel)
    plan.total_cost = plan._compute_total_cost()
    return plan


# --- region transfer ---------------------------------------------------------

@dataclass(frozen=True)
class DenseCore:
    concept_id: str
    pixel_indices: np.ndarray = field(repr=False)
    masses: np.ndarray = field(repr=False)
    coverage: float


def transfer_region(plan: TransportPlan, source_pixels, coverage: float = 0.75,
                    concept_id: str = "") -> DenseCore:
    """Smallest set of target pixels holding ``coverage`` of the mass sent from ``source_pixels``."""
    src = np.asarray(source_pixels, dtype=np.intp).ravel()
    if src.size == 0:
        raise ValueError("source_pixels is empty")
    if not 0 < coverage <= 1:
        raise ValueError(f"coverage must be in (0, 1], got {coverage}")
    return _dense_core(plan.received_mass(src), coverage, concept_id)


def _exact_prefix(sorted_m: np.ndarray, coverage: float) -> int:
    """Shortest prefix of ``sorted_m`` reaching ``coverage`` of the total, in rationals."""
    fr = [Fraction(float(v)) for v in sorted_m]
    target = Fraction(float(coverage)) * sum(fr)
    acc = Fraction(0)
    for k, v in enumerate(fr, 1):
        acc += v
        if acc >= target:
            return k
    return len(fr)


def _dense_core(m: np.ndarray, coverage: float, concept_id: str = "") -> DenseCore:
    m = np.asarray(m, dtype=np.float64)
    idx = np.arange(len(m))
    order = np.lexsort((idx, -m))   # descending mass, ties by ascending index
    sorted_m = m[order]
    csum = np.cumsum(sorted_m)
    total = csum[-1] if len(csum) else 0.0
    if not total > 0:
        raise EmptyTransferError(f"no mass transported for concept {concept_id!r}")
    if coverage >= 1.0:
        k = int(np.count_nonzero(sorted_m > 0))
    else:
        thr = coverage * total
        k = int(np.searchsorted(csum, thr, side="left")) + 1
        # cumsum rounding can move the boundary by a pixel; settle close calls exactly
        slack = 4 * len(m) * np.finfo(float).eps * total
        near = [csum[j] for j in (k - 2, k - 1) if 0 <= j < len(csum)]
        if any(abs(c - thr) <= slack for c in near):
            k = _exact_prefix(sorted_m, coverage)
    k = min(k, len(m))
    return DenseCore(concept_id, order[:k], sorted_m[:k], float(csum[k - 1] / total))


def select_reference(candidates, target, params: UotParams = UotParams(),
                     selection_resolution: tuple[int, int] = (14, 14),
                     extent: float | None = None) -> tuple[int, list[float]]:
    """Index of the candidate with the lowest total transport cost to ``target``."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no reference candidates")
    tgt = build_distribution(resize_bilinear(target, selection_resolution), extent)
    costs = []
    for cand in candidates:
        ref = build_distribution(resize_bilinear(cand, selection_resolution), extent)
        costs.append(solve_uot(ref, tgt, params).total_cost)
    return int(np.argmin(costs)), costs
