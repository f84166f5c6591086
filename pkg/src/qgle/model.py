"""Extended-phase-space model: domains, forces, coefficient fields.

The model is the Ito diffusion

    dq = M^-1 p dt
    dp = [F(q) - G11(q) M^-1 p - G12(q) s] dt + beta^-1/2 S1(q) dW
    ds = [-G21(q) M^-1 p - G22(q) s] dt + beta^-1/2 S2(q) dW

with friction blocks G assembled into the (n+m)x(n+m) matrix Gamma(q) and
noise rows S into Sigma(q).  The fluctuation-dissipation relation ties the
two through an SPD matrix Q:

    Gamma(q) diag(I, Q) + diag(I, Q) Gamma(q)^T = Sigma(q) Sigma(q)^T,

which for a conservative force makes exp(-beta [U + p'M^-1 p/2 + s'Q^-1 s/2])
invariant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    InconsistentError,
    NonConservativeError,
    NoSolutionError,
    NotPositiveError,
    NumericalFailureError,
)
from .expressions import BinOp, Call, Num, Var, parse_expr

__all__ = [
    "Domain",
    "ForceField",
    "CoefficientField",
    "ModelSpec",
    "ExtendedState",
    "FdtResult",
    "NOT_APPLICABLE",
    "default_grid",
    "solve_fdt_Q",
    "verify_fdt",
    "purecolor_check",
    "stability_margin",
    "gibbs_log_density",
]

PD_EIG_TOL = 1e-12  # relative to the matrix max-norm


def _as_matrix(a, shape=None, name="matrix"):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if shape is not None and a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
    return a


def _check_spd(a, name):
    a = _as_matrix(a, name=name)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > 1e-10 * scale:
        raise ValueError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh(0.5 * (a + a.T))
    if eigs.min() <= PD_EIG_TOL * scale:
        raise NotPositiveError(f"{name} must be positive definite (min eig {eigs.min():.3e})")
    return a


def wrap_torus(q):
    """Reduce torus coordinates to [0, 1)^n."""
    return np.mod(q, 1.0)


@dataclass(frozen=True)
class Domain:
    """Configuration domain: flat torus [0,1)^n or R^n."""

    kind: str  # "torus" | "euclidean"
    dim: int

    def __post_init__(self):
        if self.kind not in ("torus", "euclidean"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("domain dimension must be >= 1")

    @property
    def is_torus(self):
        return self.kind == "torus"

    def reduce(self, q):
        return wrap_torus(q) if self.is_torus else np.asarray(q, dtype=float)


def _batched(fn, q):
    """Call fn on (R, n) input; accept (n,) and return matching shape."""
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    out = fn(q[None, :] if single else q)
    out = np.asarray(out, dtype=float)
    return out[0] if single else out


class ForceField:
    """Force on the configuration variable, conservative or not.

    ``force`` maps an ``(R, n)`` batch of points to an ``(R, n)`` batch of
    forces.  Conservative fields carry the potential and its gradient and are
    checked once at construction: a central finite difference of the
    potential must match the stated gradient to 1e-5 relative at sampled
    points.
    """

    def __init__(self, kind, n, force, potential=None, grad_potential=None,
                 linear_part=None, bounded_part=False, _check=True):
        if kind not in ("conservative", "nonconservative"):
            raise ValueError(f"unknown force kind {kind!r}")
        self.kind = kind
        self.n = n
        self._force = force
        self._potential = potential
        self._grad = grad_potential
        self.linear_part = None if linear_part is None else _check_spd(
            _as_matrix(linear_part, (n, n), "linear_part"), "linear_part")
        self.bounded_part = bounded_part
        if kind == "conservative":
            if potential is None or grad_potential is None:
                raise ValueError("conservative forces need potential and gradient")
            if _check:
                self._check_gradient()

    def __call__(self, q):
        return _batched(self._force, q)

    def potential(self, q):
        if self._potential is None:
            raise NonConservativeError("force has no potential")
        q = np.asarray(q, dtype=float)
        single = q.ndim == 1
        out = np.asarray(self._potential(q[None, :] if single else q), dtype=float)
        return float(out[0]) if single else out

    def grad_potential(self, q):
        if self._grad is None:
            raise NonConservativeError("force has no potential gradient")
        return _batched(self._grad, q)

    @property
    def is_conservative(self):
        return self.kind == "conservative"

    def _check_gradient(self, n_points=16, h=1e-5, rtol=1e-5):
        rng = np.random.Generator(np.random.Philox(key=12345))
        pts = rng.uniform(-1.0, 2.0, size=(n_points, self.n))
        grad = self.grad_potential(pts)
        fd = np.empty_like(grad)
        for j in range(self.n):
            shift = np.zeros(self.n)
            shift[j] = h
            fd[:, j] = (self.potential(pts + shift) - self.potential(pts - shift)) / (2 * h)
        scale = np.maximum(np.abs(grad), 1.0)
        if np.max(np.abs(fd - grad) / scale) > rtol:
            raise ValueError("gradient is inconsistent with the potential")
        force = self(pts)
        if np.max(np.abs(force + grad) / scale) > rtol:
            raise ValueError("conservative force must equal -grad potential")

    # ---- constructors -----------------------------------------------------

    @classmethod
    def zero(cls, n):
        return cls("conservative", n,
                   force=lambda q: np.zeros_like(q),
                   potential=lambda q: np.zeros(q.shape[0]),
                   grad_potential=lambda q: np.zeros_like(q),
                   _check=False)

    @classmethod
    def conservative(cls, n, potential, grad_potential, linear_part=None,
                     bounded_part=False):
        return cls("conservative", n,
                   force=lambda q: -np.asarray(grad_potential(q), dtype=float),
                   potential=potential, grad_potential=grad_potential,
                   linear_part=linear_part, bounded_part=bounded_part)

    @classmethod
    def harmonic(cls, stiffness):
        """U(q) = q' H q / 2 for SPD H."""
        h = _check_spd(np.atleast_2d(np.asarray(stiffness, dtype=float)), "stiffness")
        n = h.shape[0]
        return cls("conservative", n,
                   force=lambda q: -q @ h.T,
                   potential=lambda q: 0.5 * np.einsum("ri,ij,rj->r", q, h, q),
                   grad_potential=lambda q: q @ h.T,
                   linear_part=h, bounded_part=False, _check=False)

    @classmethod
    def from_potential_expr(cls, expr, n, linear_part=None, bounded_part=False):
        """Conservative force from a potential in the closed expression family.

        The gradient is the symbolic derivative of the tree (the family is
        closed under differentiation), compiled to vectorized callables.
        """
        tree = parse_expr(expr) if isinstance(expr, str) else expr
        from .expressions import compile_expr, diff_expr
        u_fn = compile_expr(tree)
        grad_fns = [compile_expr(diff_expr(tree, j)) for j in range(n)]

        def potential(q):
            return np.broadcast_to(np.asarray(u_fn(q), dtype=float),
                                   (q.shape[0],))

        def grad(q):
            return np.stack([np.broadcast_to(g(q), (q.shape[0],))
                             for g in grad_fns], axis=-1)

        return cls("conservative", n, force=lambda q: -grad(q),
                   potential=potential, grad_potential=grad,
                   linear_part=linear_part, bounded_part=bounded_part)

    @classmethod
    def nonconservative(cls, n, force, linear_part=None, bounded_part=False):
        return cls("nonconservative", n, force=force,
                   linear_part=linear_part, bounded_part=bounded_part)


class CoefficientField:
    """Friction matrix Gamma(q) and noise factor Sigma(q), constant or not.

    Position-dependent fields store one entry per matrix element, each either
    a float or an expression tree from the closed family, so smoothness is
    guaranteed by construction.  ``gamma(q)``/``sigma(q)`` evaluate to
    ``(n+m, n+m)`` at a point or ``(R, n+m, n+m)`` on a batch.
    """

    def __init__(self, n, m, gamma=None, sigma=None,
                 gamma_entries=None, sigma_entries=None):
        if m < 1:
            raise ValueError("auxiliary dimension m must be >= 1")
        self.n = n
        self.m = m
        dim = n + m
        if gamma is not None:
            self.kind = "constant"
            self._gamma = _as_matrix(gamma, (dim, dim), "Gamma")
            self._sigma = _as_matrix(sigma, (dim, dim), "Sigma")
        else:
            self.kind = "position_dependent"
            self._gamma_entries = self._check_entries(gamma_entries, dim, "Gamma")
            self._sigma_entries = self._check_entries(sigma_entries, dim, "Sigma")
            self._gamma_fns = self._compile_entries(self._gamma_entries)
            self._sigma_fns = self._compile_entries(self._sigma_entries)

    @staticmethod
    def _check_entries(entries, dim, name):
        if entries is None:
            raise ValueError(f"{name} entries missing")
        rows = list(entries)
        if len(rows) != dim or any(len(row) != dim for row in rows):
            raise ValueError(f"{name} entries must form a {dim}x{dim} matrix")
        out = np.empty((dim, dim), dtype=object)
        for i, row in enumerate(rows):
            for j, entry in enumerate(row):
                if isinstance(entry, str):
                    entry = parse_expr(entry)
                elif isinstance(entry, (int, float)):
                    entry = float(entry)
                elif not isinstance(entry, (Num, Var, Call, BinOp)):
                    raise ValueError(f"{name}[{i}][{j}] must be a number or expression")
                out[i, j] = entry
        return out

    @property
    def constant(self):
        return self.kind == "constant"

    @staticmethod
    def _compile_entries(entries):
        from .expressions import compile_expr
        dim = entries.shape[0]
        fns = []
        for i in range(dim):
            for j in range(dim):
                entry = entries[i, j]
                if isinstance(entry, float):
                    if entry != 0.0:
                        fns.append((i, j, entry, None))
                else:
                    fns.append((i, j, None, compile_expr(entry)))
        return fns

    def _eval_entries(self, fns, q):
        q = np.asarray(q, dtype=float)
        single = q.ndim == 1
        batch = q[None, :] if single else q
        dim = self.n + self.m
        out = np.zeros((batch.shape[0], dim, dim))
        for i, j, value, fn in fns:
            out[:, i, j] = value if fn is None else fn(batch)
        return out[0] if single else out

    def gamma(self, q=None):
        if self.constant:
            if q is None or np.asarray(q).ndim <= 1:
                return self._gamma
            return np.broadcast_to(self._gamma, (np.asarray(q).shape[0],) + self._gamma.shape)
        if q is None:
            raise ValueError("position-dependent field needs q")
        return self._eval_entries(self._gamma_fns, q)

    def sigma(self, q=None):
        if self.constant:
            if q is None or np.asarray(q).ndim <= 1:
                return self._sigma
            return np.broadcast_to(self._sigma, (np.asarray(q).shape[0],) + self._sigma.shape)
        if q is None:
            raise ValueError("position-dependent field needs q")
        return self._eval_entries(self._sigma_fns, q)

    # block accessors on an evaluated matrix
    def blocks(self, mat):
        n = self.n
        return (mat[..., :n, :n], mat[..., :n, n:],
                mat[..., n:, :n], mat[..., n:, n:])

    def sigma_rows(self, mat):
        n = self.n
        return mat[..., :n, :], mat[..., n:, :]


@dataclass(frozen=True)
class ExtendedState:
    """One point (q, p, s) of the extended phase space at time t."""

    q: np.ndarray
    p: np.ndarray
    s: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        for name in ("q", "p", "s"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)

    @property
    def z(self):
        return np.concatenate([self.p, self.s])


@dataclass(frozen=True)
class ModelSpec:
    """Full model instance: domain, mass, temperature, force, coefficients."""

    domain: Domain
    mass: np.ndarray
    beta: float
    force: ForceField
    coeffs: CoefficientField
    Q: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.domain.dim
        mass = _check_spd(_as_matrix(self.mass, (n, n), "mass"), "mass")
        object.__setattr__(self, "mass", mass)
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.force.n != n:
            raise ValueError("force dimension does not match the domain")
        if self.coeffs.n != n:
            raise ValueError("coefficient field n does not match the domain")
        if self.Q is not None:
            q = _check_spd(_as_matrix(self.Q, (self.coeffs.m, self.coeffs.m), "Q"), "Q")
            object.__setattr__(self, "Q", q)

    @property
    def n(self):
        return self.domain.dim

    @property
    def m(self):
        return self.coeffs.m

    @property
    def mass_inv(self):
        return np.linalg.inv(self.mass)


def default_grid(domain, points=None):
    """Uniform evaluation grid on the torus (101 points for n=1, 21 per dim
    for n=2); a single origin point on euclidean domains or for constants."""
    n = domain.dim
    if not domain.is_torus:
        return np.zeros((1, n))
    if points is None:
        points = 101 if n == 1 else 21
    axes = [np.linspace(0.0, 1.0, points, endpoint=False) for _ in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([ax.ravel() for ax in mesh], axis=-1)


def _grid_array(coeffs, grid):
    if grid is None:
        grid = np.zeros((1, coeffs.n))
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 0:
        raise ValueError("grid must be nonempty")
    if grid.shape[1] != coeffs.n:
        raise ValueError("grid dimension does not match the coefficient field")
    return grid


@dataclass(frozen=True)
class FdtResult:
    """Solved auxiliary covariance plus per-block defects (max-norm)."""

    Q: np.ndarray
    residual_white: float      # G11 + G11' - S1 S1'
    residual_coupling: float   # G12 Q + G21' - S1 S2'
    residual_aux: float        # G22 Q + Q G22' - S2 S2'

    @property
    def max_residual(self):
        return max(self.residual_white, self.residual_coupling, self.residual_aux)


def solve_fdt_Q(coeffs, rtol=1e-9):
    """Solve the block fluctuation-dissipation equations for Q.

    The auxiliary block ``G22 Q + Q G22' = S2 S2'`` is solved as a dense
    linear system over vec(Q) and symmetrized; the white block
    ``G11 + G11' = S1 S1'`` and coupling block ``G12 Q + G21' = S1 S2'`` are
    then verified.  Stability of -Gamma is not required here.

    Raises NoSolutionError, InconsistentError or NotPositiveError.
    """
    if not coeffs.constant:
        raise ValueError("solve_fdt_Q needs constant coefficients")
    n, m = coeffs.n, coeffs.m
    g = coeffs.gamma()
    s = coeffs.sigma()
    g11, g12, g21, g22 = coeffs.blocks(g)
    s1, s2 = coeffs.sigma_rows(s)

    lhs = np.kron(np.eye(m), g22) + np.kron(g22, np.eye(m))
    rhs = (s2 @ s2.T).reshape(-1)
    scale = max(1.0, np.abs(g).max(), np.abs(s @ s.T).max())
    if np.linalg.matrix_rank(lhs, tol=1e-12 * max(1.0, np.abs(lhs).max()) * lhs.shape[0]) < lhs.shape[0]:
        raise NoSolutionError("auxiliary-block Lyapunov system for Q is singular")
    q = np.linalg.solve(lhs, rhs).reshape(m, m)
    q = 0.5 * (q + q.T)

    res_white = np.abs(g11 + g11.T - s1 @ s1.T).max() if n else 0.0
    res_coupling = np.abs(g12 @ q + g21.T - s1 @ s2.T).max()
    res_aux = np.abs(g22 @ q + q @ g22.T - s2 @ s2.T).max()
    if res_white > rtol * scale or res_coupling > rtol * scale:
        raise InconsistentError(
            "fluctuation-dissipation blocks are inconsistent: white defect "
            f"{res_white:.3e}, coupling defect {res_coupling:.3e}")
    eigs = np.linalg.eigvalsh(q)
    if eigs.min() <= PD_EIG_TOL * max(1.0, np.abs(q).max()):
        raise NotPositiveError(f"solved Q is not positive definite (min eig {eigs.min():.3e})")
    return FdtResult(q, res_white, res_coupling, res_aux)


def verify_fdt(coeffs, Q, grid=None):
    """Max over the grid of the max-norm defect of the full relation
    Gamma(q) diag(I,Q) + diag(I,Q) Gamma(q)' - Sigma(q) Sigma(q)'."""
    grid = _grid_array(coeffs, grid)
    Q = _as_matrix(Q, (coeffs.m, coeffs.m), "Q")
    d = np.zeros((coeffs.n + coeffs.m,) * 2)
    d[:coeffs.n, :coeffs.n] = np.eye(coeffs.n)
    d[coeffs.n:, coeffs.n:] = Q
    g = coeffs.gamma(grid)
    s = coeffs.sigma(grid)
    defect = g @ d + d @ np.swapaxes(g, -1, -2) - s @ np.swapaxes(s, -1, -2)
    return float(np.abs(defect).max())


NOT_APPLICABLE = object()
"""Marker returned by purecolor_check when G11 does not vanish."""


def purecolor_check(coeffs, Q, grid=None, tol=1e-12):
    """Constraint forced by FDT in the absence of a white-noise block.

    With G11 = 0 everywhere, positive semidefiniteness of the block relation
    forces G12(q) Q = -G21(q)' for all q; returns the max violation, or the
    NOT_APPLICABLE marker when some G11(q) is nonzero on the grid.
    """
    grid = _grid_array(coeffs, grid)
    Q = _as_matrix(Q, (coeffs.m, coeffs.m), "Q")
    g = coeffs.gamma(grid)
    g11, g12, g21, _ = coeffs.blocks(g)
    if np.abs(g11).max() > tol * max(1.0, np.abs(g).max()):
        return NOT_APPLICABLE
    violation = g12 @ Q + np.swapaxes(g21, -1, -2)
    return float(np.abs(violation).max())


def stability_margin(coeffs, grid=None):
    """Min over the grid of the smallest real part of the spectrum of
    Gamma(q); positive return certifies -Gamma(q) stable on the grid."""
    grid = _grid_array(coeffs, grid)
    g = coeffs.gamma(grid)
    if g.ndim == 2:
        g = g[None]
    try:
        eigs = np.linalg.eigvals(g)
    except np.linalg.LinAlgError as err:
        raise NumericalFailureError(f"eigenvalue iteration failed: {err}") from err
    return float(eigs.real.min())


def gibbs_log_density(state, model):
    """Unnormalized log of the invariant density,
    -beta [U(q) + p' M^-1 p / 2 + s' Q^-1 s / 2]."""
    if not model.force.is_conservative:
        raise NonConservativeError("Gibbs density needs a conservative force")
    if model.Q is None:
        raise ValueError("model has no auxiliary covariance Q")
    q = model.domain.reduce(state.q)
    u = model.force.potential(q)
    kinetic = 0.5 * state.p @ model.mass_inv @ state.p
    aux = 0.5 * state.s @ np.linalg.solve(model.Q, state.s)
    return float(-model.beta * (u + kinetic + aux))
