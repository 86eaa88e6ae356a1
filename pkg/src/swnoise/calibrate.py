"""Training-data extraction: residuals between a fine run and its
mollification, and per-step least-squares inversion of the transport
relation  delta = -grad(eta_c) . perp_grad(N~)  for the streamfunction N~.

The transport operator annihilates streamfunction components aligned with
the eta_c contours (any function of eta_c maps to zero), so the inversion is
ridge-regularised and gauge-fixed to zero mean; the conjugate-gradient solve
of the normal equations starts from zero, which keeps the iterates inside
the row space and selects the minimum-norm representative.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .grid import Grid, ScalarField
from .operators import gradient, lowpass_filter, subsample
from .rsw import WALL_CLAMP_ROWS, FlowState, wall_clamp

log = logging.getLogger(__name__)

CG_RTOL = 1e-10


class DegenerateOperator(ValueError):
    """grad(eta_c) vanishes and no ridge term is present."""


@dataclass
class CalibrationSample:
    stream: ScalarField
    step_index: int
    residual_norm: float
    degenerate: bool = False


@dataclass
class CalibrationDataset:
    samples: list[CalibrationSample]
    grid: Grid
    provenance: str = ""

    def __post_init__(self):
        if self.samples and any(s.stream.grid != self.grid for s in self.samples):
            raise ValueError("samples live on mixed grids")

    def __len__(self) -> int:
        return len(self.samples)

    def to_array(self) -> np.ndarray:
        """(n_samples, nx*ny) matrix of flattened streamfunction values."""
        return np.stack([s.stream.values.ravel() for s in self.samples])


def _d1_periodic(n: int, h: float) -> sp.csr_matrix:
    main = np.zeros(n)
    upper = np.full(n - 1, 1.0)
    lower = np.full(n - 1, -1.0)
    m = sp.diags([lower, main, upper], [-1, 0, 1], format="lil")
    m[0, n - 1] = -1.0
    m[n - 1, 0] = 1.0
    return (m / (2.0 * h)).tocsr()


def _d1_wall(n: int, h: float) -> sp.csr_matrix:
    m = sp.diags(
        [np.full(n - 1, -1.0), np.zeros(n), np.full(n - 1, 1.0)], [-1, 0, 1], format="lil"
    )
    m[0, 0], m[0, 1], m[0, 2] = -3.0, 4.0, -1.0
    m[n - 1, n - 1], m[n - 1, n - 2], m[n - 1, n - 3] = 3.0, -4.0, 1.0
    return (m / (2.0 * h)).tocsr()


def _fv_dy(n: int, h: float) -> sp.csr_matrix:
    """Face-flux y-divergence row block: centred in the interior, half-sum
    faces with zero outer flux at the walls (what the stepper applies)."""
    m = sp.lil_matrix((n, n))
    for j in range(1, n - 1):
        m[j, j - 1], m[j, j + 1] = -1.0, 1.0
    m[0, 0], m[0, 1] = 1.0, 1.0
    m[n - 1, n - 1], m[n - 1, n - 2] = -1.0, -1.0
    return (m / (2.0 * h)).tocsr()


def _clamp_matrix(grid: Grid, rows: int) -> sp.csr_matrix:
    """Sparse projection replacing the `rows` rows nearest each wall by their
    per-wall mean (matches rsw.wall_clamp)."""
    ny = grid.ny
    p1 = sp.lil_matrix((ny, ny))
    for j in range(rows, ny - rows):
        p1[j, j] = 1.0
    blk = 1.0 / (grid.nx * rows)
    p = sp.kron(sp.identity(grid.nx, format="csr"), p1.tocsr(), format="lil")
    idx = np.arange(grid.nx * ny).reshape(grid.shape)
    for block in (idx[:, :rows].ravel(), idx[:, ny - rows:].ravel()):
        for i in block:
            p[i, block] = blk
    return p.tocsr()


def stencil_matrices(grid: Grid) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """(Dx, Dy) acting on C-order flattened (nx, ny) fields; the same stencils
    as :mod:`swnoise.operators`."""
    dx1 = _d1_periodic(grid.nx, grid.dx)
    dy1 = _d1_wall(grid.ny, grid.dy)
    ix = sp.identity(grid.nx, format="csr")
    iy = sp.identity(grid.ny, format="csr")
    return sp.kron(dx1, iy, format="csr"), sp.kron(ix, dy1, format="csr")


def transport_matrix(eta_c: ScalarField) -> sp.csr_matrix:
    """Sparse forward model of the stochastic step's noise increment: the
    flux-form divergence div_fv(eta_c * perp_grad(wall_clamp(N~))).

    This is exactly the linear-in-noise part of the perturbed continuity
    update, so fitted streamfunctions reproduce their target increment when
    fed back through the stepper.  For constant eta_c the operator vanishes
    identically (the clamp removes every wall term the commuting interior
    stencils do not cancel)."""
    grid = eta_c.grid
    dxm, dym = stencil_matrices(grid)
    clamp = _clamp_matrix(grid, WALL_CLAMP_ROWS)
    eta_diag = sp.diags(eta_c.values.ravel())
    fv_y = sp.kron(
        sp.identity(grid.nx, format="csr"), _fv_dy(grid.ny, grid.dy), format="csr"
    )
    lift_u = -dym @ clamp
    lift_v = dxm @ clamp
    return (dxm @ eta_diag @ lift_u + fv_y @ eta_diag @ lift_v).tocsr()


def transport_apply(eta_c: ScalarField, stream: ScalarField) -> ScalarField:
    """Forward model inverted by solve_stream (matrix path, see
    transport_matrix)."""
    out = transport_matrix(eta_c) @ stream.values.ravel()
    return ScalarField(eta_c.grid, out.reshape(eta_c.grid.shape))


def default_ridge(eta_c: ScalarField) -> float:
    # 1e-4 (not the minimum-norm-ish 1e-8): weaker ridges let the solve pump
    # amplitude into near-null directions, and the resulting velocity kicks
    # blow up downstream ensemble runs within tens of coarse steps
    grad = gradient(eta_c)
    gmax = max(np.abs(grad.u.values).max(), np.abs(grad.v.values).max())
    return 1e-4 * gmax**2


def solve_stream(
    delta: ScalarField,
    eta_c: ScalarField,
    reg: float | None = None,
    step_index: int = 0,
) -> CalibrationSample:
    """Minimise ||grad(eta_c).perp_grad(N~) + delta||^2 + reg*||grad(N~)||^2
    over mean-zero N~ via a conjugate-gradient solve of the normal equations."""
    if delta.grid != eta_c.grid:
        raise ValueError("delta and eta_c live on different grids")
    grid = eta_c.grid
    grad = gradient(eta_c)
    gmax = max(np.abs(grad.u.values).max(), np.abs(grad.v.values).max())
    if reg is None:
        reg = default_ridge(eta_c)
    if reg < 0:
        raise ValueError("ridge weight must be non-negative")
    if gmax < 1e-12:
        if reg == 0.0:
            raise DegenerateOperator("grad(eta_c) vanishes and reg = 0")
        log.warning("degenerate transport operator at step %d; returning N~ = 0", step_index)
        return CalibrationSample(
            stream=ScalarField.zeros(grid),
            step_index=step_index,
            residual_norm=float(np.linalg.norm(delta.values)),
            degenerate=True,
        )

    G = transport_matrix(eta_c)
    dxm, dym = stencil_matrices(grid)
    normal = (G.T @ G + reg * (dxm.T @ dxm + dym.T @ dym)).tocsr()

    def project(vec: np.ndarray) -> np.ndarray:
        return wall_clamp(vec.reshape(grid.shape)).ravel()

    op = LinearOperator(
        (grid.size, grid.size),
        matvec=lambda v: project(normal @ project(v)),
        dtype=np.float64,
    )
    diag = normal.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.maximum(diag, 1e-300), 1.0)
    precond = LinearOperator(
        (grid.size, grid.size),
        matvec=lambda v: project(inv_diag * project(v)),
        dtype=np.float64,
    )
    rhs = project(-G.T @ delta.values.ravel())
    x, info = cg(op, rhs, rtol=CG_RTOL, atol=0.0, maxiter=20 * grid.size, M=precond)
    if info != 0:
        log.warning("CG did not reach rtol=%g at step %d (info=%d)", CG_RTOL, step_index, info)
    if not np.isfinite(x).all():
        raise FloatingPointError(f"stream solve diverged at step {step_index}")
    x = project(x)
    x = x - x.mean()
    residual = float(np.linalg.norm(G @ x + delta.values.ravel()))
    return CalibrationSample(
        stream=ScalarField(grid, x.reshape(grid.shape)),
        step_index=step_index,
        residual_norm=residual,
    )


def objective(delta: ScalarField, eta_c: ScalarField, stream: ScalarField, reg: float) -> float:
    """The least-squares objective solve_stream minimises (for tests)."""
    misfit = transport_apply(eta_c, stream).values + delta.values
    grad = gradient(stream)
    return float(
        np.sum(misfit**2) + reg * np.sum(grad.u.values**2 + grad.v.values**2)
    )


def residual_increment(
    fine_prev: FlowState, fine_next: FlowState, coarse_grid: Grid
) -> ScalarField:
    """High-pass part of the fine eta increment over one coarse step,
    decimated onto the coarse grid.

    The residual eta - lowpass(eta) lives above the filter cutoff, so the
    restriction is plain decimation: projecting with the low-pass itself
    would annihilate the signal.
    """
    if fine_prev.grid != fine_next.grid:
        raise ValueError("fine states live on different grids")
    fine_prev.grid.refinement_ratio(coarse_grid)

    def residual(eta: ScalarField) -> ScalarField:
        return ScalarField(eta.grid, eta.values - lowpass_filter(eta, coarse_grid).values)

    diff = ScalarField(
        fine_prev.grid,
        residual(fine_next.eta).values - residual(fine_prev.eta).values,
    )
    return subsample(diff, coarse_grid)


def build_dataset(
    fine_traj: list[FlowState],
    coarse_grid: Grid,
    reg: float | None = None,
    provenance: str = "",
) -> CalibrationDataset:
    """One streamfunction sample per coarse step of a fine trajectory stored
    at coarse-step cadence."""
    if len(fine_traj) < 2:
        raise ValueError("trajectory must span at least two coarse steps")
    from .operators import coarse_project

    samples = []
    for n in range(len(fine_traj) - 1):
        delta = residual_increment(fine_traj[n], fine_traj[n + 1], coarse_grid)
        eta_c = coarse_project(fine_traj[n].eta, coarse_grid)
        try:
            sample = solve_stream(delta, eta_c, reg=reg, step_index=n)
        except (DegenerateOperator, FloatingPointError) as exc:
            raise type(exc)(f"step {n}: {exc}") from exc
        samples.append(sample)
    return CalibrationDataset(samples=samples, grid=coarse_grid, provenance=provenance)


def dataset_digest(dataset: CalibrationDataset) -> str:
    h = hashlib.sha256()
    for s in dataset.samples:
        h.update(s.stream.values.tobytes())
    return h.hexdigest()[:16]
