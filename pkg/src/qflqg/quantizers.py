"""Finite quantizer banks over Gaussian noise.

A quantizer is a finite partition of R^n into axis-aligned half-open boxes
``[lower, upper)`` together with one reproduction point per cell.  Points
are always *recomputed* as conditional means of the build distribution
N(0, cov) restricted to the cell, so the key moment identities hold:

    E[what]            = sum_j p_j q_j       = 0        (unbiasedness)
    Cov(what)          = sum_j p_j q_j q_j'  = F        (reduction matrix)
    Cov(w - what)      = cov - F                        (residual noise)

For diagonal covariance the cell moments factor per axis and use the
truncated-normal closed form  E[w | a <= w < b] = sigma * (pdf(a/sigma) -
pdf(b/sigma)) / (cdf(b/sigma) - cdf(a/sigma)).  General covariances fall
back to a fixed deterministic quasi-random quadrature (recentred Sobol
points, 2^16 samples, ~1e-4 relative accuracy).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm, qmc

from .errors import ConfigError, NumericalError

_MIN_CELL_PROB = 1e-12
_QMC_BUILD_POW = 16  # 2^16 quadrature points for non-diagonal covariances
_QMC_CHECK_POW = 12  # partition coverage check sample
_QMC_SEED = 0x51F1


@dataclass(frozen=True, eq=False)
class Cell:
    """Axis-aligned half-open box ``[lower, upper)``; infinities allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ConfigError("cell bounds have mismatched dimensions")
        if not np.all(lo < hi):
            raise ConfigError(f"cell bounds must satisfy lower < upper, got {lo} / {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Vectorized membership test for points of shape (..., n)."""
        pts = np.asarray(points, dtype=float)
        return np.all((pts >= self.lower) & (pts < self.upper), axis=-1)


@dataclass(frozen=True, eq=False)
class Quantizer:
    """One member of a bank: cells, conditional-mean points, and moments.

    Attributes:
        cells: the partition, one Cell per level.
        centroids: (levels, n) conditional means per cell.
        probs: (levels,) cell probabilities under the build distribution.
        cost: per-use price of selecting this quantizer.
        reduction: n x n covariance of the reproduced signal (PSD); the
            residual noise covariance after quantization is ``cov - reduction``.
        axis_breaks: per-axis breakpoints when the cells form a full grid
            (enables O(log levels) lookup); None for irregular partitions.
    """

    cells: tuple[Cell, ...]
    centroids: np.ndarray
    probs: np.ndarray
    cost: float
    reduction: np.ndarray
    axis_breaks: tuple[tuple[float, ...], ...] | None = None

    @property
    def levels(self) -> int:
        return len(self.cells)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def cell_index_batch(self, points: np.ndarray) -> np.ndarray:
        """Cell index for each row of ``points`` (shape (k, n)).

        Raises:
            NumericalError: if some point is covered by no cell ("partition
                gap") — impossible for grid-built quantizers.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.axis_breaks is not None:
            sizes = [len(b) + 1 for b in self.axis_breaks]
            per_axis = [
                np.searchsorted(np.asarray(breaks), pts[:, axis], side="right")
                for axis, breaks in enumerate(self.axis_breaks)
            ]
            return np.ravel_multi_index(per_axis, sizes)
        hits = np.stack([cell.contains(pts) for cell in self.cells], axis=0)
        counts = hits.sum(axis=0)
        if np.any(counts != 1):
            bad = pts[np.argmax(counts != 1)]
            raise NumericalError(f"partition gap at w={bad.tolist()}")
        return np.argmax(hits, axis=0)


@dataclass(frozen=True, eq=False)
class QuantizerBank:
    """Ordered collection of quantizers built against one noise covariance."""

    quantizers: tuple[Quantizer, ...]
    noise_cov: np.ndarray

    def __post_init__(self):
        if len(self.quantizers) < 1:
            raise ConfigError("bank: at least one quantizer required")

    def __len__(self) -> int:
        return len(self.quantizers)

    @property
    def costs(self) -> np.ndarray:
        return np.array([q.cost for q in self.quantizers])

    def reduction_stack(self) -> np.ndarray:
        return np.stack([q.reduction for q in self.quantizers])


def grid_cells(axis_breaks) -> list[Cell]:
    """Cells of the full grid induced by per-axis breakpoint lists.

    Cell enumeration follows row-major order over per-axis interval indices,
    matching :meth:`Quantizer.cell_index_batch`'s fast path.
    """
    edges = []
    for axis, breaks in enumerate(axis_breaks):
        b = sorted(float(x) for x in breaks)
        if len(set(b)) != len(b):
            raise ConfigError(f"axis {axis}: duplicate breakpoints {b}")
        edges.append([-np.inf, *b, np.inf])
    cells = []
    for combo in itertools.product(*[range(len(e) - 1) for e in edges]):
        lower = [edges[a][i] for a, i in enumerate(combo)]
        upper = [edges[a][i + 1] for a, i in enumerate(combo)]
        cells.append(Cell(np.array(lower), np.array(upper)))
    return cells


def _psd_root(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _coverage_check(cells, dim: int, root: np.ndarray) -> None:
    """Monte Carlo check that the cells tile R^n (gap/overlap detection)."""
    sampler = qmc.Sobol(d=dim, scramble=True, seed=_QMC_SEED + 1)
    pts = ndtri(sampler.random(2**_QMC_CHECK_POW)) @ root
    counts = np.zeros(len(pts), dtype=int)
    for cell in cells:
        counts += cell.contains(pts)
    if np.any(counts != 1):
        bad = pts[np.argmax(counts != 1)]
        raise ConfigError(f"cells do not partition the space near w={bad.tolist()}")


def _diagonal_moments(cells, variances: np.ndarray):
    """Closed-form per-cell probability and conditional mean, diagonal case."""
    sigma = np.sqrt(variances)
    lower = np.stack([c.lower for c in cells])  # (levels, n)
    upper = np.stack([c.upper for c in cells])
    probs = np.ones(len(cells))
    centroids = np.zeros_like(lower)
    for axis in range(len(variances)):
        lo, hi = lower[:, axis], upper[:, axis]
        if sigma[axis] == 0.0:
            covered = (lo <= 0.0) & (0.0 < hi)
            probs *= covered.astype(float)
            continue
        lo_z, hi_z = lo / sigma[axis], hi / sigma[axis]
        mass = norm.cdf(hi_z) - norm.cdf(lo_z)
        probs *= mass
        with np.errstate(divide="ignore", invalid="ignore"):
            mean = sigma[axis] * (norm.pdf(lo_z) - norm.pdf(hi_z)) / mass
        centroids[:, axis] = np.where(mass > 0, mean, 0.0)
    return probs, centroids


def _quadrature_moments(cells, noise_cov: np.ndarray):
    """Quasi-random estimate of per-cell probability and conditional mean."""
    dim = noise_cov.shape[0]
    sampler = qmc.Sobol(d=dim, scramble=True, seed=_QMC_SEED)
    pts = ndtri(sampler.random(2**_QMC_BUILD_POW)) @ _psd_root(noise_cov)
    pts -= pts.mean(axis=0)  # moment-match the mean so unbiasedness is exact
    probs = np.empty(len(cells))
    centroids = np.zeros((len(cells), dim))
    for j, cell in enumerate(cells):
        mask = cell.contains(pts)
        probs[j] = mask.mean()
        if probs[j] > 0:
            centroids[j] = pts[mask].mean(axis=0)
    return probs, centroids


def build_quantizer(cells, noise_cov, cost: float, _trusted_grid=None) -> Quantizer:
    """Construct a quantizer over N(0, noise_cov) from a list of cells.

    Args:
        cells: list of Cell objects partitioning R^n.
        noise_cov: build covariance; diagonal matrices use the exact
            truncated-normal path, others a deterministic quadrature.
        cost: per-use price.
        _trusted_grid: internal — per-axis breakpoints when the caller
            already knows the cells form a grid (skips the coverage check).

    Raises:
        ConfigError: degenerate cell (probability below 1e-12), bad bounds,
            or cells failing the partition coverage check.
    """
    cov = np.asarray(noise_cov, dtype=float)
    cells = tuple(cells)
    dim = cells[0].lower.size
    if cov.shape != (dim, dim):
        raise ConfigError(f"noise covariance shape {cov.shape} does not match cell dimension {dim}")
    diagonal = np.allclose(cov, np.diag(np.diag(cov)), atol=1e-12)
    if _trusted_grid is None:
        _coverage_check(cells, dim, _psd_root(cov))
    if diagonal:
        probs, centroids = _diagonal_moments(cells, np.diag(cov))
    else:
        probs, centroids = _quadrature_moments(cells, cov)
    if probs.min() < _MIN_CELL_PROB:
        j = int(np.argmin(probs))
        raise ConfigError(
            f"degenerate cell {j} (probability {probs[j]:.3e} < {_MIN_CELL_PROB:g})"
        )
    reduction = (centroids * probs[:, None]).T @ centroids
    reduction = 0.5 * (reduction + reduction.T)
    return Quantizer(
        cells=cells,
        centroids=centroids,
        probs=probs,
        cost=float(cost),
        reduction=reduction,
        axis_breaks=_trusted_grid,
    )


def build_grid_quantizer(axis_breaks, noise_cov, cost: float) -> Quantizer:
    """Grid quantizer from per-axis breakpoints (fast lookup path enabled)."""
    trusted = tuple(tuple(sorted(float(x) for x in b)) for b in axis_breaks)
    return build_quantizer(grid_cells(axis_breaks), noise_cov, cost, _trusted_grid=trusted)


def build_quantizer_on_support(cells, points, probs, cost: float, axis_breaks=None) -> Quantizer:
    """Quantizer moments rebuilt against a finite noise support.

    Used by the brute-force oracle: when the noise is discretized, the
    conditional means must be taken over the discrete distribution itself,
    otherwise the moment identities (and the resulting cost accounting)
    pick up discretization bias.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    wts = np.asarray(probs, dtype=float)
    cells = tuple(cells)
    cell_probs = np.zeros(len(cells))
    centroids = np.zeros((len(cells), pts.shape[1]))
    assigned = np.zeros(len(pts), dtype=bool)
    for j, cell in enumerate(cells):
        mask = cell.contains(pts)
        assigned |= mask
        cell_probs[j] = wts[mask].sum()
        if cell_probs[j] > 0:
            centroids[j] = (wts[mask] @ pts[mask]) / cell_probs[j]
    if not assigned.all():
        raise NumericalError(f"partition gap at w={pts[~assigned][0].tolist()}")
    keep = cell_probs > 0  # empty cells carry no mass on a finite support
    reduction = (centroids[keep] * cell_probs[keep, None]).T @ centroids[keep]
    return Quantizer(
        cells=cells,
        centroids=centroids,
        probs=cell_probs,
        cost=float(cost),
        reduction=0.5 * (reduction + reduction.T),
        axis_breaks=tuple(tuple(b) for b in axis_breaks) if axis_breaks is not None else None,
    )


def open_loop_quantizer(dim: int) -> Quantizer:
    """The free one-level quantizer: a single cell, zero point, zero reduction."""
    cell = Cell(np.full(dim, -np.inf), np.full(dim, np.inf))
    return Quantizer(
        cells=(cell,),
        centroids=np.zeros((1, dim)),
        probs=np.ones(1),
        cost=0.0,
        reduction=np.zeros((dim, dim)),
        axis_breaks=tuple(() for _ in range(dim)),
    )


def build_bank(breaks_per_quantizer, costs, noise_cov, include_open_loop: bool = False) -> QuantizerBank:
    """Build an ordered bank of grid quantizers over one covariance.

    Args:
        breaks_per_quantizer: list (one entry per quantizer) of per-axis
            breakpoint lists.
        costs: per-use price for each quantizer (same length).
        noise_cov: covariance the moments are computed against.
        include_open_loop: when True, prepend the free one-level quantizer
            at index 0.

    Notes:
        The conventional ordering (coarsest first, reduction matrices
        nondecreasing in trace) is checked and warned about, not enforced.
    """
    if len(breaks_per_quantizer) != len(costs):
        raise ConfigError(
            f"bank: {len(breaks_per_quantizer)} breakpoint groups but {len(costs)} costs"
        )
    cov = np.asarray(noise_cov, dtype=float)
    quantizers = []
    if include_open_loop:
        quantizers.append(open_loop_quantizer(cov.shape[0]))
    for breaks, cost in zip(breaks_per_quantizer, costs):
        quantizers.append(build_grid_quantizer(breaks, cov, cost))
    traces = [float(np.trace(q.reduction)) for q in quantizers]
    if any(b < a - 1e-12 for a, b in zip(traces, traces[1:])):
        warnings.warn(
            "bank ordering: reduction-matrix traces are not nondecreasing "
            f"({traces}); downstream algorithms do not rely on this, continuing",
            stacklevel=2,
        )
    return QuantizerBank(quantizers=tuple(quantizers), noise_cov=cov)


def quantize(quantizer: Quantizer, point) -> tuple[int, np.ndarray]:
    """Map one noise vector to its (cell index, reproduction point) pair."""
    pt = np.asarray(point, dtype=float).reshape(-1)
    if not np.all(np.isfinite(pt)):
        raise NumericalError(f"cannot quantize non-finite input {pt.tolist()}")
    index = int(quantizer.cell_index_batch(pt[None, :])[0])
    return index, quantizer.centroids[index].copy()


def channel_posterior_mean(quantizer: Quantizer, channel: np.ndarray, observed: int) -> np.ndarray:
    """Posterior-mean reconstruction through a noisy symbol channel.

    Args:
        quantizer: the transmitting quantizer (prior = its cell probabilities).
        channel: (levels, n_symbols) row-stochastic matrix of symbol
            likelihoods given the transmitted cell.
        observed: received symbol index.

    Returns:
        Posterior-weighted average of the cell reproduction points,
        E[w | observed symbol].

    Raises:
        ConfigError: malformed channel matrix.
        NumericalError: the observed symbol has zero marginal probability.
    """
    chan = np.asarray(channel, dtype=float)
    if chan.ndim != 2 or chan.shape[0] != quantizer.levels:
        raise ConfigError(
            f"channel: expected {quantizer.levels} rows, got shape {chan.shape}"
        )
    if np.any(chan < 0) or not np.allclose(chan.sum(axis=1), 1.0, atol=1e-9):
        raise ConfigError("channel: rows must be nonnegative and sum to 1")
    if not 0 <= observed < chan.shape[1]:
        raise ConfigError(f"channel: observed symbol {observed} out of range")
    joint = quantizer.probs * chan[:, observed]
    marginal = joint.sum()
    if marginal <= 0.0:
        raise NumericalError(f"impossible observation: symbol {observed} has zero probability")
    return (joint / marginal) @ quantizer.centroids
