"""Coordinator side of the distributed interior-point solver.

The coordinator never sees a training row.  Each iteration it receives the summed
worker reductions, forms the m x m matrix

    M = I + Y'W Y - (1/sigma) (Y'W d)(Y'W d)'      with W = Omega^-1, sigma = d'W d,

solves ``M dw = -rhat_M`` by Cholesky, recovers ``dbeta``, broadcasts
``(dw, dbeta, sigma)``, and picks one step length for every block of every worker.
"""

from __future__ import annotations

import logging
import threading
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .comm import DEFAULT_TIMEOUT, CommError, Communicator, SocketListener, Tag, inprocess_group
from .dataio import FeatureCodec, TrainingPartition
from .densela import NotPositiveDefinite, SymMatrix, cholesky_solve, rank1_downdate
from .model import SvmModel
from .worker import InteriorViolation, WorkerReduction, run_worker

log = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "CoordinatorState",
    "IterationRecord",
    "SolveReport",
    "ConvergenceWarning",
    "assemble",
    "newton_solve",
    "barrier_schedule",
    "check_convergence",
    "train",
    "train_inprocess",
    "train_socket",
    "hello_values",
]


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SolverConfig:
    tau: float = 1.0
    tol_feas: float = 1e-8
    tol_comp: float = 1e-8
    max_iter: int = 200
    eta: float = 0.995
    centering: float = 0.1
    sv_threshold: float = 1e-6
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if not 0 <= self.centering < 1:
            raise ValueError("centering must lie in [0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not (self.tol_feas > 0 and self.tol_comp > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class CoordinatorState:
    w: np.ndarray
    beta: float
    tau: float
    M: SymMatrix
    rhat_M: np.ndarray
    sigma: float
    YtWd: np.ndarray
    rho_beta: float
    rhat_beta: float
    r_w: np.ndarray
    rhat_w: np.ndarray
    mu: float = np.nan
    iteration: int = 0


@dataclass
class IterationRecord:
    iteration: int
    mu: float
    mu_target: float
    alpha: float
    r_w: float
    rho_beta: float
    r_v: float
    r_z: float
    primal_objective: float
    dual_objective: float
    seconds: float
    bytes_up: tuple[int, ...]
    bytes_down: tuple[int, ...]
    bytes_control: tuple[int, ...]


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    mu: float
    r_w: float
    rho_beta: float
    r_v: float
    r_z: float
    n: int
    m: int
    p: int
    history: list[IterationRecord] = field(default_factory=list)
    mu_trace: list[float] = field(default_factory=list)
    support_vectors: list[tuple[int, float]] = field(default_factory=list)
    seconds: float = 0.0
    bytes_setup: int = 0
    bytes_final_check: tuple[int, ...] = ()
    bytes_support: tuple[int, ...] = ()

    @property
    def kkt_residual(self) -> float:
        return max(self.r_w, abs(self.rho_beta), self.r_v, self.r_z)


def assemble(red: WorkerReduction, w, beta: float, tau: float) -> CoordinatorState:
    """Form the reduced system from the summed reduction and the current ``(w, beta)``."""
    w = np.asarray(w, dtype=np.float64)
    sigma = red.dtWd
    if not sigma > 0 or not np.isfinite(sigma):
        raise InteriorViolation(f"sigma = {sigma!r}; the iterate is no longer interior")
    rho_beta = red.dtv
    r_w = w - red.Ytv
    rhat_w = r_w + red.YtWr
    rhat_beta = rho_beta - red.dtWr
    M = red.YtWY.copy().add_identity()
    rank1_downdate(M, red.YtWd, sigma)
    # plus sign: eliminating dbeta from the w-row moves +(1/sigma) Y'W d rhat_beta to the rhs
    rhat_M = rhat_w + red.YtWd * (rhat_beta / sigma)
    return CoordinatorState(
        w=w, beta=float(beta), tau=tau, M=M, rhat_M=rhat_M, sigma=sigma, YtWd=red.YtWd,
        rho_beta=rho_beta, rhat_beta=rhat_beta, r_w=r_w, rhat_w=rhat_w,
    )


def newton_solve(state: CoordinatorState) -> tuple[np.ndarray, float]:
    try:
        dw = cholesky_solve(state.M, -state.rhat_M)
    except NotPositiveDefinite as exc:
        raise InteriorViolation(f"iteration {state.iteration}: {exc}; interior lost") from exc
    dbeta = (-state.rhat_beta + state.YtWd @ dw) / state.sigma
    return dw, float(dbeta)


def barrier_schedule(mu: float, centering: float = 0.1) -> float:
    if mu < 0:
        raise ValueError("mu must be non-negative")
    return centering * mu


def check_convergence(r_w: float, rho_beta: float, r_v: float, r_z: float, *, w, beta: float,
                      tau: float, mu: float, tol_feas: float = 1e-8, tol_comp: float = 1e-8) -> bool:
    """Scaled infinity-norm feasibility plus average complementarity test."""
    w_inf = float(np.abs(w).max()) if np.size(w) else 0.0
    feas = max(r_w, abs(rho_beta), r_v, r_z)
    return feas <= tol_feas * (1.0 + w_inf + abs(beta) + tau) and mu <= tol_comp


def hello_values(rank: int, part: TrainingPartition) -> list[float]:
    return [rank, part.n_local, part.m, part.global_offset]


def _gather_hello(comm: Communicator) -> dict[int, np.ndarray]:
    return {r: comm.recv_values(r, Tag.HELLO)[1] for r in comm.worker_ranks}


def _choose_step(alpha_max: float, gap: float, lin: float, quad: float) -> float:
    """Largest step not above ``alpha_max`` (halving) along which the total gap drops."""
    alpha = alpha_max
    for _ in range(60):
        if gap + alpha * (lin + alpha * quad) < gap:
            return alpha
        alpha *= 0.5
    return alpha


def _per_worker(counter: Counter, ranks, tags=None) -> tuple[int, ...]:
    return tuple(
        sum(v for (peer, tag), v in counter.items() if peer == r and (tags is None or tag in tags))
        for r in ranks
    )


def train(
    comm: Communicator,
    config: SolverConfig = SolverConfig(),
    *,
    hello: dict[int, np.ndarray] | None = None,
    codec: FeatureCodec | None = None,
    classes: tuple[str, str] = ("+1", "-1"),
    callback=None,
) -> tuple[SvmModel, SolveReport]:
    """Run the coordinator loop against ``comm.size`` registered workers.

    ``callback(record, state, dw, dbeta)`` is called after every accepted step.
    A run that hits ``max_iter`` returns its last iterate with a
    :class:`ConvergenceWarning`.
    """
    if comm.rank != 0:
        raise ValueError("train() runs on the coordinator endpoint")
    t_start = time.perf_counter()
    try:
        if hello is None:
            hello = _gather_hello(comm)
        ms = {int(h[2]) for h in hello.values()}
        if len(ms) != 1:
            raise CommError(f"workers disagree on the feature count: {sorted(ms)}")
        m = ms.pop()
        n = int(sum(h[1] for h in hello.values()))
        if codec is not None and codec.m != m:
            raise ValueError(f"codec encodes {codec.m} features but workers hold {m}")
        ranks = list(comm.worker_ranks)
        tau = config.tau

        # at the fixed starting point every product z_j u_j and s_j v_j equals tau/2
        mu_target = barrier_schedule(tau / 2.0, config.centering)
        for r in ranks:
            comm.send_values(r, Tag.CONFIG, [tau, config.eta, mu_target, config.sv_threshold])
        setup_bytes = comm.bytes_sent + comm.bytes_received

        w = np.zeros(m)
        beta = 0.0
        history: list[IterationRecord] = []
        mu_trace: list[float] = []
        converged = False
        k = 0
        while True:
            t0 = time.perf_counter()
            snap_in, snap_out = comm.received.copy(), comm.sent.copy()
            buf = comm.all_reduce_sum()
            maxima = comm.all_reduce_max()
            if not (np.all(np.isfinite(buf)) and np.all(np.isfinite(maxima))):
                raise InteriorViolation(f"iteration {k}: non-finite reduction (diverged)")
            red = WorkerReduction.from_buffer(buf[:-2], m)
            sum_v, sum_z = float(buf[-2]), float(buf[-1])
            mu = red.comp_gap_local / (2.0 * n)
            mu_trace.append(mu)
            state = assemble(red, w, beta, tau)
            state.mu, state.iteration = mu, k
            r_w_inf = float(np.abs(state.r_w).max()) if m else 0.0
            r_v_inf, r_z_inf = float(maxima[0]), float(maxima[1])
            primal = 0.5 * float(w @ w) + tau * sum_z
            dual = sum_v - 0.5 * float(red.Ytv @ red.Ytv)

            converged = check_convergence(
                r_w_inf, state.rho_beta, r_v_inf, r_z_inf, w=w, beta=beta, tau=tau, mu=mu,
                tol_feas=config.tol_feas, tol_comp=config.tol_comp,
            )
            if converged or k >= config.max_iter:
                for r in ranks:
                    comm.send(r, Tag.STOP)
                final_check = _per_worker(comm.received - snap_in, ranks)
                break

            dw, dbeta = newton_solve(state)
            comm.broadcast(np.concatenate([dw, [dbeta, state.sigma]]))
            mins = comm.all_reduce_min(reply=False)
            poly = comm.all_reduce_sum()
            comm.all_reduce_max()
            alpha = _choose_step(float(mins[0]), red.comp_gap_local, float(poly[0]), float(poly[1]))
            if not alpha > 0:
                raise InteriorViolation(f"iteration {k}: no admissible step")
            gap_next = red.comp_gap_local + alpha * (poly[0] + alpha * poly[1])
            next_target = barrier_schedule(max(gap_next, 0.0) / (2.0 * n), config.centering)
            for r in ranks:
                comm.send_values(r, Tag.STEP, [alpha, next_target])
            w = w + alpha * dw
            beta = beta + alpha * dbeta

            got, put = comm.received - snap_in, comm.sent - snap_out
            rec = IterationRecord(
                iteration=k, mu=mu, mu_target=mu_target, alpha=alpha, r_w=r_w_inf,
                rho_beta=state.rho_beta, r_v=r_v_inf, r_z=r_z_inf,
                primal_objective=primal, dual_objective=dual,
                seconds=time.perf_counter() - t0,
                bytes_up=_per_worker(got, ranks),
                bytes_down=_per_worker(put, ranks, {Tag.BCAST}),
                bytes_control=_per_worker(put, ranks, {Tag.STEP}),
            )
            history.append(rec)
            log.info("iter %3d  mu=%.3e  alpha=%.4f  feas=%.3e", k, mu, alpha,
                     max(r_w_inf, abs(state.rho_beta), r_v_inf, r_z_inf))
            if callback is not None:
                callback(rec, state, dw, dbeta)
            mu_target = next_target
            k += 1

        before_sv = comm.received.copy()
        svs: list[tuple[int, float]] = []
        for r in ranks:
            vals = comm.recv_values(r, Tag.SV)[1]
            svs.extend((int(i), float(v)) for i, v in vals.reshape(-1, 2))
        sv_bytes = _per_worker(comm.received - before_sv, ranks)
    except BaseException as exc:
        comm.abort(f"coordinator failed: {exc}")
        raise

    report = SolveReport(
        converged=converged, iterations=k, mu=mu, r_w=r_w_inf, rho_beta=state.rho_beta,
        r_v=r_v_inf, r_z=r_z_inf, n=n, m=m, p=comm.size, history=history, mu_trace=mu_trace,
        support_vectors=svs, seconds=time.perf_counter() - t_start, bytes_setup=setup_bytes,
        bytes_final_check=final_check, bytes_support=sv_bytes,
    )
    if not converged:
        warnings.warn(
            f"no convergence after {k} iterations (mu={mu:.3e}, feasibility={report.kkt_residual:.3e})",
            ConvergenceWarning, stacklevel=2,
        )
    model = SvmModel(
        w=w, beta=beta, tau=tau, codec=codec, classes=tuple(classes),
        diagnostics={
            "converged": converged, "iterations": k, "mu": mu,
            "kkt_residual": report.kkt_residual, "support_vectors": len(svs),
            "n": n, "workers": comm.size,
        },
    )
    return model, report


def _worker_thread(comm: Communicator, part: TrainingPartition, errors: list):
    try:
        comm.send_values(0, Tag.HELLO, hello_values(comm.rank, part))
        run_worker(comm, part)
    except BaseException as exc:  # surfaced by the launcher
        errors.append((comm.rank, exc))


def _limit_blas(threads: int | None):
    if threads is None:
        from contextlib import nullcontext
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def _raise_worker_error(errors) -> None:
    if errors:
        rank, exc = errors[0]
        raise CommError(f"worker rank {rank} failed: {exc}") from exc


def train_inprocess(
    partitions: list[TrainingPartition],
    config: SolverConfig = SolverConfig(),
    *,
    codec: FeatureCodec | None = None,
    classes: tuple[str, str] = ("+1", "-1"),
    threads: int | None = None,
    callback=None,
) -> tuple[SvmModel, SolveReport]:
    """SMP mode: one worker thread per partition, coordinator on the calling thread.

    ``threads`` caps the BLAS thread pool used inside each worker.
    """
    if not partitions:
        raise ValueError("at least one partition is required")
    comms = inprocess_group(len(partitions), timeout=config.timeout)
    errors: list = []
    with _limit_blas(threads):
        workers = [
            threading.Thread(target=_worker_thread, args=(c, part, errors), daemon=True,
                             name=f"ipsvm-worker-{c.rank}")
            for c, part in zip(comms[1:], partitions)
        ]
        for t in workers:
            t.start()
        try:
            result = train(comms[0], config, codec=codec, classes=classes, callback=callback)
        finally:
            for t in workers:
                t.join(config.timeout)
    _raise_worker_error(errors)
    return result


def train_socket(
    partitions: list[TrainingPartition],
    config: SolverConfig = SolverConfig(),
    *,
    codec: FeatureCodec | None = None,
    classes: tuple[str, str] = ("+1", "-1"),
    host: str = "127.0.0.1",
    port: int = 0,
    threads: int | None = None,
) -> tuple[SvmModel, SolveReport]:
    """MPP wire protocol on localhost, with the workers run as threads of this process."""
    from .comm import connect_worker

    listener = SocketListener(len(partitions), port=port, host=host, timeout=config.timeout)
    errors: list = []

    def work(rank, part):
        try:
            comm = connect_worker(host, listener.port, rank, hello_values(rank, part), config.timeout)
            try:
                run_worker(comm, part)
            finally:
                comm.close()
        except BaseException as exc:
            errors.append((rank, exc))

    with _limit_blas(threads):
        workers = [threading.Thread(target=work, args=(r, part), daemon=True)
                   for r, part in enumerate(partitions, start=1)]
        for t in workers:
            t.start()
        comm, hello = listener.accept()
        try:
            result = train(comm, config, hello=hello, codec=codec, classes=classes)
        finally:
            for t in workers:
                t.join(config.timeout)
            comm.close()
    _raise_worker_error(errors)
    return result
