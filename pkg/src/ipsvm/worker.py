"""Per-observation side of the interior-point iteration.

Everything here is sized by the local row count ``n_i``: the positive variables
``s, u, v, z``, the diagonal ``omega = z/u + s/v``, the residuals, and the local
pieces of the Newton direction.  A worker only ever ships the fixed-size
:class:`WorkerReduction` (plus a handful of scalars) to the coordinator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .comm import CommError, Communicator, Tag
from .dataio import TrainingPartition
from .densela import SymMatrix, packed_size, syrk_block

log = logging.getLogger(__name__)

__all__ = [
    "WorkerIterate",
    "WorkerReduction",
    "WorkerDirection",
    "InteriorViolation",
    "init_iterate",
    "compute_residuals",
    "local_reduction",
    "back_substitute",
    "max_step",
    "apply_step",
    "extract_support_vectors",
    "step_polynomial",
    "run_worker",
    "UPSTREAM_SCALARS",
]

# Scalars a worker sends each iteration beyond the m x m / m-vector blocks of the
# reduction: 4 reduction scalars + count, sum(v), sum(z); 4 residual maxima;
# local step bound and smallest variable; 2 gap-polynomial coefficients;
# direction max-norm.
UPSTREAM_SCALARS = 16


class InteriorViolation(ArithmeticError):
    """A positive variable left the interior or a quantity became non-finite."""


@dataclass
class WorkerIterate:
    s: np.ndarray
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    omega: np.ndarray
    r_z: np.ndarray
    r_v: np.ndarray
    r_u: np.ndarray
    r_s: np.ndarray
    rhat_z: np.ndarray
    rhat_v: np.ndarray
    r_omega: np.ndarray

    def refresh_omega(self) -> None:
        self.omega = self.z / self.u + self.s / self.v

    def min_variable(self) -> float:
        if self.s.size == 0:
            return np.inf
        return float(min(self.s.min(), self.u.min(), self.v.min(), self.z.min()))


@dataclass
class WorkerReduction:
    """One worker's contribution to the all-reduce.  Sums of these are again reductions."""

    YtWY: SymMatrix
    YtWd: np.ndarray
    YtWr: np.ndarray
    Ytv: np.ndarray
    dtWd: float
    dtWr: float
    dtv: float
    comp_gap_local: float
    n_local: int

    @property
    def m(self) -> int:
        return self.YtWY.order

    @staticmethod
    def buffer_size(m: int) -> int:
        return packed_size(m) + 3 * m + 5

    def to_buffer(self) -> np.ndarray:
        return np.concatenate([
            self.YtWY.packed, self.YtWd, self.YtWr, self.Ytv,
            [self.dtWd, self.dtWr, self.dtv, self.comp_gap_local, float(self.n_local)],
        ])

    @classmethod
    def from_buffer(cls, buf, m: int) -> WorkerReduction:
        buf = np.asarray(buf, dtype=np.float64)
        if buf.shape != (cls.buffer_size(m),):
            raise ValueError(f"reduction buffer for m={m} needs {cls.buffer_size(m)} values, got {buf.shape}")
        k = packed_size(m)
        return cls(
            YtWY=SymMatrix(m, buf[:k]),
            YtWd=buf[k:k + m].copy(),
            YtWr=buf[k + m:k + 2 * m].copy(),
            Ytv=buf[k + 2 * m:k + 3 * m].copy(),
            dtWd=float(buf[k + 3 * m]),
            dtWr=float(buf[k + 3 * m + 1]),
            dtv=float(buf[k + 3 * m + 2]),
            comp_gap_local=float(buf[k + 3 * m + 3]),
            n_local=int(round(buf[k + 3 * m + 4])),
        )

    def __add__(self, other: WorkerReduction) -> WorkerReduction:
        return WorkerReduction.from_buffer(self.to_buffer() + other.to_buffer(), self.m)


@dataclass
class WorkerDirection:
    dv: np.ndarray
    du: np.ndarray
    ds: np.ndarray
    dz: np.ndarray

    def max_abs(self) -> float:
        if self.dv.size == 0:
            return 0.0
        return float(max(np.abs(a).max() for a in (self.dv, self.du, self.ds, self.dz)))


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InteriorViolation("non-finite value in worker quantities (iteration diverged)")


def init_iterate(part: TrainingPartition, tau: float, mu_target: float = 0.0) -> WorkerIterate:
    """Starting point ``v = u = tau/2``, ``s = z = 1`` with residuals at ``w = 0, beta = 0``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    n = part.n_local
    v = np.full(n, tau / 2.0)
    u = tau - v
    empty = np.zeros(n)
    it = WorkerIterate(
        s=np.ones(n), u=u, v=v, z=np.ones(n), omega=empty.copy(),
        r_z=empty.copy(), r_v=empty.copy(), r_u=empty.copy(), r_s=empty.copy(),
        rhat_z=empty.copy(), rhat_v=empty.copy(), r_omega=empty.copy(),
    )
    return compute_residuals(part, it, np.zeros(part.m), 0.0, tau, mu_target)


def compute_residuals(part: TrainingPartition, it: WorkerIterate, w, beta: float, tau: float,
                      mu_target: float) -> WorkerIterate:
    """Refresh omega and all local residuals in place for the perturbed system."""
    s, u, v, z = it.s, it.u, it.v, it.z
    it.r_z = tau - v - u
    it.r_v = part.Y @ w - beta * part.d - 1.0 + z - s
    it.r_u = z * u - mu_target
    it.r_s = s * v - mu_target
    it.rhat_z = it.r_z + it.r_u / z
    it.rhat_v = it.r_v + it.r_s / v
    it.r_omega = it.rhat_v - (z / u) * it.rhat_z
    it.refresh_omega()
    _check_finite(it.r_v, it.r_omega, it.omega)
    return it


def local_reduction(part: TrainingPartition, it: WorkerIterate) -> WorkerReduction:
    Y, d = part.Y, part.d
    winv = 1.0 / it.omega
    wd = winv * d
    wr = winv * it.r_omega
    yty = syrk_block(SymMatrix(part.m), Y, winv)
    return WorkerReduction(
        YtWY=yty,
        YtWd=Y.T @ wd,
        YtWr=Y.T @ wr,
        Ytv=Y.T @ it.v,
        dtWd=float(d @ wd),
        dtWr=float(d @ wr),
        dtv=float(d @ it.v),
        comp_gap_local=float(it.z @ it.u + it.s @ it.v),
        n_local=part.n_local,
    )


def back_substitute(part: TrainingPartition, it: WorkerIterate, dw, dbeta: float) -> WorkerDirection:
    """Recover the local direction from the broadcast ``(dw, dbeta)``.

    Order is fixed: dv, then dz from the u/z complementarity row, du from
    ``u + v = tau``, ds from the s/v complementarity row.
    """
    dw = np.asarray(dw, dtype=np.float64)
    if dw.shape != (part.m,):
        raise ValueError(f"dw has shape {dw.shape}, expected ({part.m},)")
    dv = (-it.r_omega + part.d * dbeta - part.Y @ dw) / it.omega
    dz = (it.z / it.u) * (dv - it.rhat_z)
    du = it.r_z - dv
    ds = -(it.r_s + it.s * dv) / it.v
    _check_finite(dv, dz, du, ds)
    return WorkerDirection(dv=dv, du=du, ds=ds, dz=dz)


def max_step(it: WorkerIterate, direction: WorkerDirection, eta: float) -> float:
    """Fraction-to-boundary step: ``min(1, eta * min(-x/dx over dx < 0))``."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    best = np.inf
    for x, dx in ((it.s, direction.ds), (it.u, direction.du), (it.v, direction.dv), (it.z, direction.dz)):
        neg = dx < 0
        if np.any(neg):
            best = min(best, float(np.min(-x[neg] / dx[neg])))
    return min(1.0, eta * best)


def apply_step(it: WorkerIterate, direction: WorkerDirection, alpha: float) -> WorkerIterate:
    s = it.s + alpha * direction.ds
    u = it.u + alpha * direction.du
    v = it.v + alpha * direction.dv
    z = it.z + alpha * direction.dz
    for name, x in (("s", s), ("u", u), ("v", v), ("z", z)):
        if x.size and not x.min() > 0:
            raise InteriorViolation(f"step {alpha:g} drives {name} out of the positive orthant")
    it.s, it.u, it.v, it.z = s, u, v, z
    it.refresh_omega()
    return it


def step_polynomial(it: WorkerIterate, direction: WorkerDirection) -> tuple[float, float]:
    """Linear and quadratic coefficients of the local gap ``z'u + s'v`` along the direction."""
    lin = (it.z @ direction.du + it.u @ direction.dz + it.s @ direction.dv + it.v @ direction.ds)
    quad = direction.dz @ direction.du + direction.ds @ direction.dv
    return float(lin), float(quad)


def extract_support_vectors(part: TrainingPartition, it: WorkerIterate, tau: float,
                            threshold: float = 1e-6) -> list[tuple[int, float]]:
    """Rows whose multiplier exceeds ``threshold * tau``, with global row indices."""
    idx = np.flatnonzero(it.v > threshold * tau)
    return [(part.global_offset + int(j), float(it.v[j])) for j in idx]


def residual_maxima(it: WorkerIterate) -> np.ndarray:
    def amax(a):
        return float(np.abs(a).max()) if a.size else 0.0
    return np.array([amax(it.r_v), amax(it.r_z), amax(it.r_u), amax(it.r_s)])


def run_worker(comm: Communicator, part: TrainingPartition) -> None:
    """Worker half of the training loop; returns after the support-vector report.

    The coordinator drives: CONFIG once, then per iteration the worker sends its
    reduction and residual maxima, and either receives STOP or a BCAST of
    ``(dw, dbeta, sigma)``, answers with its step bound and gap polynomial, and
    applies the STEP ``(alpha, mu_target)`` it is sent back.
    """
    try:
        _, cfg = comm.recv_values(0, Tag.CONFIG)
        tau, eta, mu_target, sv_threshold = (float(x) for x in cfg[:4])
        m = part.m
        it = init_iterate(part, tau, mu_target)
        w = np.zeros(m)
        beta = 0.0
        while True:
            compute_residuals(part, it, w, beta, tau, mu_target)
            red = local_reduction(part, it)
            comm.all_reduce_sum(np.concatenate([red.to_buffer(), [it.v.sum(), it.z.sum()]]))
            comm.all_reduce_max(residual_maxima(it))
            tag, msg = comm.recv_values(0, (Tag.BCAST, Tag.STOP))
            if tag is Tag.STOP:
                break
            dw, dbeta, sigma = msg[:m], float(msg[m]), float(msg[m + 1])
            direction = back_substitute(part, it, dw, dbeta)
            comm.all_reduce_min([max_step(it, direction, eta), it.min_variable()], reply=False)
            comm.all_reduce_sum(step_polynomial(it, direction))
            comm.all_reduce_max([direction.max_abs()])
            _, step = comm.recv_values(0, Tag.STEP)
            alpha, mu_target = float(step[0]), float(step[1])
            apply_step(it, direction, alpha)
            w = w + alpha * dw
            beta = beta + alpha * dbeta
            log.debug("rank %d: alpha=%.3g sigma=%.6g", comm.rank, alpha, sigma)
        svs = extract_support_vectors(part, it, tau, sv_threshold)
        comm.send_values(0, Tag.SV, np.asarray(svs, dtype=np.float64).ravel())
    except CommError:
        raise
    except Exception as exc:
        comm.abort(f"{type(exc).__name__}: {exc}")
        raise
