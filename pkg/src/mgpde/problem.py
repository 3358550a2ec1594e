"""Parametric Poisson problem on the unit hypercube.

    -div(nu grad u) = 0,  u = 1 on x = 0,  u = 0 on x = 1,  zero flux elsewhere.

Fields are nodal on ``N`` nodes per axis (``h = 1/(N-1)``). Array layout is
``[..., z, y, x]``: the last axis is ``x``, so the Dirichlet faces are index 0
and index -1 of the last axis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.stats import qmc

from .tensor import ShapeError, Tensor, as_tensor, make_op

N_MODES = 4
A_COEFFS = np.array([1.72, 4.05, 6.85, 9.82])
OMEGA_LOW, OMEGA_HIGH = -3.0, 3.0


@dataclass(frozen=True)
class ProblemConstants:
    a: np.ndarray = field(default_factory=lambda: A_COEFFS.copy())
    omega_low: float = OMEGA_LOW
    omega_high: float = OMEGA_HIGH

    @property
    def m(self) -> int:
        return len(self.a)

    @property
    def lambdas(self) -> np.ndarray:
        return 1.0 / (1.0 + 0.25 * self.a**2)


CONSTANTS = ProblemConstants()


@dataclass(frozen=True)
class GridSpec:
    resolution: int
    rank: int = 2

    def __post_init__(self):
        n = self.resolution
        if n < 4 or n & (n - 1):
            raise ValueError(f"grid resolution must be a power of two >= 4, got {n}")
        if self.rank not in (2, 3):
            raise ValueError(f"grid rank must be 2 or 3, got {self.rank}")

    @property
    def h(self) -> float:
        return 1.0 / (self.resolution - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.resolution,) * self.rank

    @property
    def n_elements(self) -> int:
        return (self.resolution - 1) ** self.rank

    def coords(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.resolution)

    def coarser(self) -> "GridSpec":
        return GridSpec(self.resolution // 2, self.rank)


@dataclass(frozen=True)
class BoundaryMasks:
    grid: GridSpec

    @cached_property
    def chi_b(self) -> np.ndarray:
        m = np.zeros(self.grid.shape)
        m[..., 0] = 1.0
        m[..., -1] = 1.0
        return m

    @cached_property
    def chi_int(self) -> np.ndarray:
        return 1.0 - self.chi_b

    @cached_property
    def u_bc(self) -> np.ndarray:
        u = np.zeros(self.grid.shape)
        u[..., 0] = 1.0
        return u


def _mode(a: float, t: np.ndarray) -> np.ndarray:
    return 0.5 * a * np.cos(a * t) + np.sin(a * t)


def log_diffusivity(omega, grid: GridSpec, constants: ProblemConstants = CONSTANTS) -> np.ndarray:
    """Nodal ``log nu`` = sum_i omega_i lambda_i xi_i(x) eta_i(y) [zeta_i(z)]."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (constants.m,):
        raise ValueError(f"omega must have {constants.m} entries, got shape {omega.shape}")
    if np.any(omega < constants.omega_low) or np.any(omega > constants.omega_high):
        raise ValueError(
            f"omega {omega.tolist()} outside the box [{constants.omega_low}, {constants.omega_high}]^{constants.m}"
        )
    t = grid.coords()
    out = np.zeros(grid.shape)
    for w_i, lam, a in zip(omega, constants.lambdas, constants.a):
        if w_i == 0.0:
            continue
        f = _mode(a, t)
        term = f
        for _ in range(grid.rank - 1):
            term = np.multiply.outer(f, term)
        out += w_i * lam * term
    return out


def diffusivity_field(omega, grid: GridSpec, constants: ProblemConstants = CONSTANTS) -> np.ndarray:
    return np.exp(log_diffusivity(omega, grid, constants))


def diffusivity_batch(omegas, grid: GridSpec) -> np.ndarray:
    """Stack of fields shaped (count, 1, *grid.shape)."""
    return np.stack([diffusivity_field(w, grid) for w in omegas])[:, None]


def sample_omegas(count: int, seed: int | None = None, constants: ProblemConstants = CONSTANTS) -> np.ndarray:
    """Sobol points mapped to the omega box, shape (count, m).

    ``seed=None`` gives the plain (unscrambled) sequence; an integer seed
    selects an Owen-scrambled sequence.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    sampler = qmc.Sobol(d=constants.m, scramble=seed is not None, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # non power-of-two counts
        unit = sampler.random(count)
    return qmc.scale(unit, constants.omega_low, constants.omega_high)


def apply_bc(u_int: Tensor, masks: BoundaryMasks) -> Tensor:
    """Overwrite Dirichlet nodes: ``u_int * chi_int + u_bc * chi_b``."""
    u = as_tensor(u_int)
    if u.shape[-masks.grid.rank:] != masks.grid.shape:
        raise ShapeError(f"apply_bc: field shape {u.shape} does not end with grid shape {masks.grid.shape}")
    chi = masks.chi_int
    lift = masks.u_bc * masks.chi_b
    return make_op("apply_bc", u.data * chi + lift, (u,), lambda g: (g * chi,))


# two-point Gauss rule on [-1, 1]; weights of the lo/hi node at each point
_G = 1.0 / np.sqrt(3.0)
_GAUSS_W = np.array([[(1 + _G) / 2, (1 - _G) / 2], [(1 - _G) / 2, (1 + _G) / 2]])


def _shift_pad(v: np.ndarray, axis: int, before: int, after: int) -> np.ndarray:
    pad = [(0, 0)] * v.ndim
    pad[axis] = (before, after)
    return np.pad(v, pad)


def _interp_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """Nodal values -> the two Gauss points of each element along ``axis``.

    ``axis`` shrinks by one and a trailing axis of size 2 (the Gauss point) is appended.
    """
    n = a.shape[axis]
    lo = np.take(a, np.arange(n - 1), axis=axis)
    hi = np.take(a, np.arange(1, n), axis=axis)
    return np.stack([_GAUSS_W[q, 0] * lo + _GAUSS_W[q, 1] * hi for q in range(2)], axis=-1)


def _interp_axis_adj(v: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of :func:`_interp_axis`; consumes the trailing Gauss axis."""
    out = 0.0
    for q in range(2):
        part = v[..., q]
        out = out + _shift_pad(_GAUSS_W[q, 0] * part, axis, 0, 1) + _shift_pad(_GAUSS_W[q, 1] * part, axis, 1, 0)
    return out


def _to_quadrature(a: np.ndarray, rank: int) -> np.ndarray:
    """Nodal field -> Gauss-point values, shape (..., *(N-1,)*rank, *(2,)*rank)."""
    first = a.ndim - rank
    for j in range(rank):
        a = _interp_axis(a, first + j)
    return a


def _from_quadrature(v: np.ndarray, rank: int) -> np.ndarray:
    """Adjoint of :func:`_to_quadrature`."""
    first = v.ndim - 2 * rank
    for j in reversed(range(rank)):
        v = _interp_axis_adj(v, first + j)
    return v


def _partial(u: np.ndarray, rank: int, d: int) -> np.ndarray:
    """Reference-coordinate derivative along spatial axis ``d`` at every Gauss point."""
    first = u.ndim - rank
    out = u
    for j in range(rank):
        if j == d:
            out = 0.5 * np.diff(out, axis=first + j)
            out = np.stack([out, out], axis=-1)
        else:
            out = _interp_axis(out, first + j)
    return out


def _partial_adj(v: np.ndarray, rank: int, d: int) -> np.ndarray:
    first = v.ndim - 2 * rank
    for j in reversed(range(rank)):
        ax = first + j
        if j == d:
            w = 0.5 * (v[..., 0] + v[..., 1])
            v = _shift_pad(w, ax, 1, 0) - _shift_pad(w, ax, 0, 1)
        else:
            v = _interp_axis_adj(v, ax)
    return v


def _volume_factor(grid: GridSpec) -> float:
    # (h/2)^r from the element Jacobian, (2/h)^2 from the squared chain rule
    return (grid.h / 2.0) ** (grid.rank - 2)


def energy_density_sum(u: np.ndarray, nu: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Per-sample ``0.5 * int nu |grad u|^2`` for arrays shaped (..., *grid.shape)."""
    r = grid.rank
    nu_q = _to_quadrature(nu, r)
    sq = sum(_partial(u, r, d) ** 2 for d in range(r))
    dens = nu_q * sq
    return 0.5 * _volume_factor(grid) * dens.sum(axis=tuple(range(dens.ndim - 2 * r, dens.ndim)))


def energy_gradient(u: np.ndarray, nu: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Gradient of the per-sample energy w.r.t. nodal ``u`` (the unreduced stiffness times u)."""
    r = grid.rank
    nu_q = _to_quadrature(nu, r) * _volume_factor(grid)
    out = 0.0
    for d in range(r):
        out = out + _partial_adj(nu_q * _partial(u, r, d), r, d)
    return out


def _check_grid(shape: tuple[int, ...], grid: GridSpec, what: str):
    if shape[-grid.rank:] != grid.shape:
        raise ShapeError(f"energy_loss: {what} spatial shape {shape[-grid.rank:]} does not match grid {grid.shape}")


def energy_loss(
    u: Tensor,
    nu,
    grid: GridSpec,
    forcing: np.ndarray | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Variational energy ``J(u) = 0.5 B(u, u) - L(u)`` on bilinear/trilinear elements.

    ``u`` and ``nu`` are nodal fields shaped (batch, 1, *grid.shape) (or just
    *grid.shape). Integration uses the 2-point Gauss rule per axis with ``nu``
    interpolated to the Gauss points. ``forcing`` is an optional nodal source
    ``f`` giving ``L(u) = int f u``. Returns the batch mean (``reduction="mean"``)
    or per-sample energies (``"none"``).
    """
    u = as_tensor(u)
    nu_arr = nu.data if isinstance(nu, Tensor) else np.asarray(nu, dtype=np.float64)
    _check_grid(u.shape, grid, "u")
    _check_grid(nu_arr.shape, grid, "nu")
    if u.ndim != nu_arr.ndim and nu_arr.ndim != grid.rank:
        raise ShapeError(f"energy_loss: u shape {u.shape} and nu shape {nu_arr.shape} disagree")
    J = energy_density_sum(u.data, nu_arr, grid)
    fterm = None
    if forcing is not None:
        f = np.asarray(forcing, dtype=np.float64)
        _check_grid(f.shape, grid, "forcing")
        fterm = mass_apply(f, grid)
        J = J - (fterm * u.data).sum(axis=tuple(range(u.ndim - grid.rank, u.ndim)))
    J = np.asarray(J)
    if reduction == "none":
        out_data = J
        scale = np.ones_like(J)
    elif reduction == "mean":
        out_data = np.asarray(J.mean())
        scale = None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    count = J.size
    rank = grid.rank
    ud = u.data

    def bw(g):
        gu = energy_gradient(ud, nu_arr, grid)
        if fterm is not None:
            gu = gu - fterm
        if scale is None:
            w = np.full(J.shape, float(g) / count)
        else:
            w = g
        return (gu * np.reshape(w, np.shape(w) + (1,) * rank),)

    return make_op("energy_loss", out_data, (u,), bw)


def mass_apply(f: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Consistent load vector ``int f phi_i`` for a nodal source ``f`` (same Gauss rule)."""
    fq = _to_quadrature(np.asarray(f, dtype=np.float64), grid.rank) * (grid.h / 2.0) ** grid.rank
    return _from_quadrature(fq, grid.rank)


def _interp_1d_weights(src: np.ndarray, dst: np.ndarray):
    idx = np.clip(np.searchsorted(src, dst, side="right") - 1, 0, len(src) - 2)
    t = (dst - src[idx]) / (src[idx + 1] - src[idx])
    return idx, t


def resample_field(field: np.ndarray, src: GridSpec, dst: GridSpec) -> np.ndarray:
    """Multilinear interpolation of a nodal field onto another grid of the unit domain."""
    if src.rank != dst.rank:
        raise ValueError(f"resample_field: rank mismatch {src.rank} vs {dst.rank}")
    a = np.asarray(field, dtype=np.float64)
    _check_grid(a.shape, src, "field")
    idx, t = _interp_1d_weights(src.coords(), dst.coords())
    for j in range(src.rank):
        ax = a.ndim - src.rank + j
        lo = np.take(a, idx, axis=ax)
        hi = np.take(a, idx + 1, axis=ax)
        shape = [1] * a.ndim
        shape[ax] = len(t)
        tt = t.reshape(shape)
        a = lo + tt * (hi - lo)
    return a


__all__ = [
    "A_COEFFS",
    "BoundaryMasks",
    "CONSTANTS",
    "GridSpec",
    "ProblemConstants",
    "apply_bc",
    "diffusivity_batch",
    "diffusivity_field",
    "energy_gradient",
    "energy_loss",
    "log_diffusivity",
    "mass_apply",
    "resample_field",
    "sample_omegas",
]

