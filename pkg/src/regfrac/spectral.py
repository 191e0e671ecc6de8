"""Smallest eigenpair of the regional form under the lumped mass matrix.

The mass matrix is diagonal (each node owns the fraction of its incident
active cells), so the generalized problem A u = lambda M u reduces
cleanly.  The solver is blocked inverse iteration with two Ritz vectors:
the extra vector tracks the next eigenvalue for gap diagnostics and
keeps the iteration robust when the leading eigenvalues cluster.  Inner
solves are Jacobi-preconditioned conjugate gradients with a fixed
operation order, so equal seeds reproduce results bit for bit.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .gagliardo import RegionalForm


@dataclass(frozen=True)
class EigenResult:
    """Converged (or best-effort) smallest eigenpair.

    ``vector`` is normalized to unit lumped-L2 norm and sign-fixed to
    nonnegative mean; ``residual`` is the mass-weighted defect
    ||A u - lambda M u||_{M^-1}.  ``second_estimate`` is the Ritz value
    of the companion block vector — an estimate of the next eigenvalue,
    reported for gap diagnostics.  ``quotient_history`` records the
    leading Ritz value after each outer step.
    """

    eigenvalue: float
    vector: np.ndarray
    residual: float
    iterations: int
    converged: bool
    second_estimate: float
    quotient_history: tuple


@dataclass(frozen=True)
class ResidualReport:
    """Eigen-equation defect split across the eigenvector's support.

    ``support_residual`` is the mass-weighted residual norm over nodes
    with u > threshold; ``complement_defect`` is the largest signed
    value of (A u - lambda M u) on the remaining nodes, which should be
    nonpositive up to roundoff for a true ground state.
    """

    threshold: float
    support_count: int
    support_residual: float
    complement_defect: float


def mass_diagonal(form: RegionalForm) -> np.ndarray:
    """Lumped mass diagonal over the degrees of freedom (a copy)."""
    return form.node_weights.copy()


def rayleigh_quotient(form: RegionalForm, u: np.ndarray) -> float:
    """energy(u) / <M u, u>; rejects the zero vector."""
    u = np.asarray(u, dtype=float)
    mass = float(np.dot(form.node_weights * u, u))
    if not mass > 0.0:
        raise ValueError("rayleigh quotient requires a nonzero vector")
    return form.energy(u) / mass


def _pcg(apply_a, pre_inv: np.ndarray, b: np.ndarray, threshold: float,
         max_steps: int) -> np.ndarray:
    """Conjugate gradients with a diagonal preconditioner.

    Hand-rolled so the operation order is fixed: library solvers do not
    promise bit-identical reductions across versions.  Stops once the
    residual drops below ``threshold`` times the current solution norm,
    so the accuracy of the returned direction does not degrade with the
    scale of the solution.
    """
    x = np.zeros_like(b)
    r = b.copy()
    z = pre_inv * r
    p = z.copy()
    rz = float(np.dot(r, z))
    for _ in range(max_steps):
        ap = apply_a(p)
        denom = float(np.dot(p, ap))
        if denom <= 0.0:
            break
        alpha = rz / denom
        x = x + alpha * p
        r = r - alpha * ap
        if float(np.linalg.norm(r)) <= threshold * float(np.linalg.norm(x)):
            break
        z = pre_inv * r
        rz_next = float(np.dot(r, z))
        beta = rz_next / rz
        rz = rz_next
        p = z + beta * p
    return x


def _orthonormalize(block: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(block)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return q * signs[None, :]


def solve_pencil(apply_a, a_diag: np.ndarray, mass_diag: np.ndarray, *,
                 tol: float = 1e-8, max_iter: int = 200, seed: int = 0,
                 start: np.ndarray | None = None) -> EigenResult:
    """Smallest eigenpair of A u = lambda M u for diagonal M.

    ``apply_a`` is the operator, ``a_diag`` its diagonal (Jacobi
    preconditioner), ``mass_diag`` the positive mass diagonal. ``tol``
    bounds the mass-weighted residual; inner solves run at a tenth of
    it.  ``start`` seeds the first block column (warm start).
    """
    if not tol > 0.0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    m = np.asarray(mass_diag, dtype=float)
    n = len(m)
    if n == 0:
        raise ValueError("no interior nodes")
    if np.any(m <= 0.0):
        raise ValueError("mass diagonal must be positive")
    # work in mass-symmetrized coordinates: the pencil (A, M) becomes the
    # plain symmetric problem with operator M^(-1/2) A M^(-1/2), and the
    # 2-norm residual there is exactly the mass-weighted defect norm
    sqrt_m = np.sqrt(m)

    def apply_sym(v: np.ndarray) -> np.ndarray:
        return apply_a(v / sqrt_m) / sqrt_m

    a_diag = np.asarray(a_diag, dtype=float)
    sym_diag = a_diag / m
    pre_inv = np.where(sym_diag > 0.0,
                       1.0 / np.where(sym_diag > 0.0, sym_diag, 1.0), 1.0)
    rng = np.random.default_rng(seed)
    width = 2 if n >= 2 else 1
    block = rng.standard_normal((n, width))
    if start is not None:
        block[:, 0] = np.asarray(start, dtype=float) * sqrt_m
    block = _orthonormalize(block)

    inner = 0.1 * tol
    cg_cap = n + 100
    history: list[float] = []
    lam = float("inf")
    second = float("inf")
    residual = float("inf")
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        solved = np.column_stack([
            _pcg(apply_sym, pre_inv, block[:, j], inner, cg_cap)
            for j in range(width)])
        block = _orthonormalize(solved)
        images = np.column_stack([apply_sym(block[:, j]) for j in range(width)])
        gram = block.T @ images
        gram = 0.5 * (gram + gram.T)
        theta, ritz = np.linalg.eigh(gram)
        block = block @ ritz
        images = images @ ritz
        lam = float(theta[0])
        second = float(theta[-1]) if width > 1 else lam
        residual = float(np.linalg.norm(images[:, 0] - lam * block[:, 0]))
        history.append(lam)
        if residual <= tol:
            converged = True
            break

    # sign convention: nonnegative lumped mean, then clamp roundoff-size
    # negative entries to zero and renormalize
    u = block[:, 0] / sqrt_m
    if float(np.sum(u * m)) < 0.0:
        u = -u
    worst = float(u.min())
    if worst < -1e-8:
        warnings.warn(
            f"eigenvector negativity {worst:.3e} exceeds clamp tolerance",
            RuntimeWarning, stacklevel=2)
    u = np.where((u < 0.0) & (u > -1e-12), 0.0, u)
    u = u / np.sqrt(float(np.sum(m * u * u)))
    defect = apply_a(u) - lam * (m * u)
    residual = float(np.sqrt(np.sum(defect * defect / m)))
    return EigenResult(eigenvalue=lam, vector=u, residual=residual,
                       iterations=iterations, converged=converged,
                       second_estimate=second,
                       quotient_history=tuple(history))


def smallest_eigenpair(form: RegionalForm, *, tol: float = 1e-8,
                       max_iter: int = 200, seed: int = 0,
                       start: np.ndarray | None = None) -> EigenResult:
    """Ground eigenpair of the assembled regional form."""
    if form.size == 0:
        raise ValueError("no interior nodes")
    return solve_pencil(form.apply, form.diagonal(), form.node_weights,
                        tol=tol, max_iter=max_iter, seed=seed, start=start)


def eigen_residual_report(form: RegionalForm, result: EigenResult,
                          threshold: float = 0.0) -> ResidualReport:
    """Split the eigen-equation defect across the support of the vector.

    Restricting to nodes with u > threshold mirrors testing the
    eigen-equation against functions supported where u is positive; on
    the remaining nodes only a one-sided (subsolution) bound is
    meaningful, so the largest signed defect is reported instead.
    """
    if not result.converged:
        raise ValueError("residual report requires a converged result")
    u = np.asarray(result.vector, dtype=float)
    if u.shape != (form.size,):
        raise ValueError(f"vector length {u.shape} != {form.size}")
    m = form.node_weights
    defect = form.apply(u) - result.eigenvalue * (m * u)
    support = u > threshold
    inside = defect[support]
    m_in = m[support]
    support_residual = float(np.sqrt(np.sum(inside * inside / m_in))) \
        if support.any() else 0.0
    outside = defect[~support]
    complement_defect = float(outside.max()) if outside.size else 0.0
    return ResidualReport(threshold=threshold,
                          support_count=int(support.sum()),
                          support_residual=support_residual,
                          complement_defect=complement_defect)
