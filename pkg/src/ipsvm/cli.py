"""Command-line front end: ``ipsvm train | predict | evaluate | bench | partition | worker``.

Reports are comma-delimited text.  A train report is a ``key,value`` block, a
blank line, then one row per iteration; bench writes one row per worker count.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import subprocess
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import comm as commlib
from .coordinator import ConvergenceWarning, SolverConfig, train, train_inprocess
from .dataio import (
    CATEGORICAL, NUMERIC, CategoricalColumn, DataFormatError, RawDataset, encode_and_partition, fit_codec,
    load_partition, parse_dense, parse_sparse, save_partition, split_signed,
)
from .datasets import gaussian_clouds, train_test_split
from .model import ModelFormatError, evaluate, load, predict, save
from .worker import UPSTREAM_SCALARS, run_worker

log = logging.getLogger("ipsvm")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3

ITERATION_FIELDS = [
    "iteration", "mu", "mu_target", "alpha", "r_w", "rho_beta", "r_v", "r_z",
    "primal_objective", "dual_objective", "seconds", "bytes_up", "bytes_down", "bytes_control",
]
BENCH_FIELDS = [
    "p", "n", "m", "iterations", "converged", "wall_seconds", "seconds_per_iteration",
    "bytes_up_per_iteration", "bytes_down_per_iteration", "expected_up", "expected_down", "seed",
]


class ConfigError(ValueError):
    """A flag value or flag combination is invalid; the message names the flag."""


@dataclass(frozen=True)
class RunConfig:
    command: str
    data: Path | None = None
    test_data: Path | None = None
    fmt: str = "dense"
    label: str | None = "0"
    features: int | None = None
    delimiter: str = ","
    header: bool = False
    comment: str | None = None
    label_strip: str = ""
    holdout: float = 0.0
    tau: float = 1.0
    tol: float = 1e-8
    max_iter: int = 200
    workers: int = 1
    transport: str = "inprocess"
    host: str = "127.0.0.1"
    port: int = 0
    spawn: bool = False
    partition_dir: Path | None = None
    model: Path | None = None
    out: Path | None = None
    report_out: Path | None = None
    figures_dir: Path | None = None
    unknown: str = "error"
    seed: int = 0
    threads: int | None = None
    timeout: float = commlib.DEFAULT_TIMEOUT


def _validate(cfg: RunConfig) -> None:
    if cfg.workers < 1:
        raise ConfigError(f"--workers must be at least 1, got {cfg.workers}")
    if not cfg.tau > 0:
        raise ConfigError(f"--tau must be positive, got {cfg.tau}")
    if not cfg.tol > 0:
        raise ConfigError(f"--tol must be positive, got {cfg.tol}")
    if cfg.max_iter < 1:
        raise ConfigError(f"--max-iter must be at least 1, got {cfg.max_iter}")
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError(f"--threads must be at least 1, got {cfg.threads}")
    if not 0 <= cfg.holdout < 1:
        raise ConfigError(f"--holdout must lie in [0, 1), got {cfg.holdout}")
    if not 0 <= cfg.port < 65536:
        raise ConfigError(f"--port out of range: {cfg.port}")
    if cfg.fmt == "sparse" and cfg.features is None and cfg.command in ("train", "partition"):
        raise ConfigError("--format sparse needs --features (the declared feature count)")
    if cfg.spawn and cfg.transport != "socket":
        raise ConfigError("--spawn only applies to --transport socket")
    if cfg.command in ("train", "predict", "evaluate", "partition") and cfg.data is None:
        raise ConfigError(f"{cfg.command} needs --data")
    if cfg.command in ("predict", "evaluate") and cfg.model is None:
        raise ConfigError(f"{cfg.command} needs --model")
    if cfg.command == "train" and cfg.model is None:
        raise ConfigError("train needs --model-out")
    if cfg.command == "evaluate" and cfg.label is None:
        raise ConfigError("evaluate needs --label")


def _label_arg(text: str | None):
    if text is None or text.lower() == "none":
        return None
    return int(text) if text.lstrip("-").isdigit() else text


def _strip_labels(data: RawDataset, chars: str) -> RawDataset:
    if chars:
        data.labels = [t.rstrip(chars) for t in data.labels]
        data.classes = tuple(t.rstrip(chars) for t in data.classes)
    return data


def _read(cfg: RunConfig, path: Path, *, schema=None, classes=None, labelled=True) -> RawDataset:
    label = _label_arg(cfg.label) if labelled else None
    if cfg.fmt == "sparse":
        m = cfg.features if cfg.features is not None else (len(schema) if schema else 0)
        return parse_sparse(path, m)
    return _strip_labels(
        parse_dense(path, label=label, schema=schema, delimiter=cfg.delimiter, header=cfg.header,
                    comment=cfg.comment, classes=classes,
                    require_two_classes=classes is None and label is not None),
        cfg.label_strip,
    )


def _model_schema(model) -> list[str] | None:
    if model.codec is None:
        return [NUMERIC] * model.m
    return [CATEGORICAL if isinstance(c, CategoricalColumn) else NUMERIC for c in model.codec.columns]


def _is_blank(path: Path, comment: str | None) -> bool:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.strip()
            if s and not (comment and s.startswith(comment)):
                return False
    return True


def _write_rows(path: Path | None, blocks: list[list[list]]) -> None:
    """Write delimited blocks separated by blank lines (stdout when ``path`` is None)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for i, block in enumerate(blocks):
        if i:
            buf.write("\n")
        writer.writerows(block)
    text = buf.getvalue()
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, tuple):
        return ";".join(str(v) for v in x)
    return str(x)


def _train_report(report, model, extra: list[tuple[str, object]]) -> list[list[list]]:
    m = report.m
    summary = [
        ["key", "value"],
        ["converged", report.converged],
        ["iterations", report.iterations],
        ["n", report.n],
        ["m", m],
        ["workers", report.p],
        ["tau", model.tau],
        ["mu", report.mu],
        ["r_w", report.r_w],
        ["rho_beta", report.rho_beta],
        ["r_v", report.r_v],
        ["r_z", report.r_z],
        ["kkt_residual", report.kkt_residual],
        ["beta", model.beta],
        ["w_norm_inf", float(np.abs(model.w).max()) if m else 0.0],
        ["support_vectors", len(report.support_vectors)],
        ["bytes_up_expected", (m * (m + 1) // 2 + 3 * m + UPSTREAM_SCALARS) * 8],
        ["bytes_down_expected", (m + 2) * 8],
        ["bytes_setup", report.bytes_setup],
        ["seconds", report.seconds],
    ] + [[k, v] for k, v in extra]
    table = [ITERATION_FIELDS] + [[getattr(h, f) for f in ITERATION_FIELDS] for h in report.history]
    return [[[_fmt(v) for v in row] for row in summary], [[_fmt(v) for v in row] for row in table]]


def _solver_config(cfg: RunConfig) -> SolverConfig:
    return SolverConfig(tau=cfg.tau, tol_feas=cfg.tol, tol_comp=cfg.tol, max_iter=cfg.max_iter,
                        timeout=cfg.timeout)


def _socket_train(cfg: RunConfig, parts, codec, classes):
    """Coordinator over TCP; workers are external processes reading partition files."""
    pdir = cfg.partition_dir or Path(str(cfg.model) + ".parts")
    pdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r, part in enumerate(parts, start=1):
        path = pdir / f"part-{r}.npz"
        save_partition(part, path)
        paths.append(path)
    listener = commlib.SocketListener(len(parts), port=cfg.port, host=cfg.host, timeout=cfg.timeout)
    procs = []
    try:
        for r, path in enumerate(paths, start=1):
            args = ["worker", "--connect", f"{cfg.host}:{listener.port}", "--rank", str(r),
                    "--partition", str(path)]
            if cfg.threads is not None:
                args += ["--threads", str(cfg.threads)]
            print("launch: ipsvm " + " ".join(args), file=sys.stderr)
            if cfg.spawn:
                procs.append(subprocess.Popen([sys.executable, "-m", "ipsvm.cli"] + args))
        comm, hello = listener.accept()
        try:
            result = train(comm, _solver_config(cfg), hello=hello, codec=codec, classes=classes)
        finally:
            comm.close()
        for proc in procs:
            if proc.wait(cfg.timeout) != 0:
                raise commlib.CommError(f"worker process exited with status {proc.returncode}")
        return result
    finally:
        for proc in procs:
            if proc.poll() is None:
                proc.kill()


def cmd_train(cfg: RunConfig) -> int:
    data = _read(cfg, cfg.data)
    extra: list[tuple[str, object]] = []
    test = None
    if cfg.holdout > 0:
        data, test = train_test_split(data, cfg.holdout, cfg.seed)
        extra += [("holdout", cfg.holdout), ("seed", cfg.seed)]
    if cfg.test_data is not None:
        test = _read(cfg, cfg.test_data, schema=data.schema, classes=data.classes)
    codec = fit_codec(data)
    parts = encode_and_partition(data, codec, cfg.workers)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        if cfg.transport == "socket":
            model, report = _socket_train(cfg, parts, codec, data.classes)
        else:
            model, report = train_inprocess(parts, _solver_config(cfg), codec=codec, classes=data.classes,
                                            threads=cfg.threads)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save(model, cfg.model)
    extra.append(("train_accuracy", evaluate(model, data).accuracy))
    if test is not None:
        extra.append(("test_accuracy", evaluate(model, test, unknown=cfg.unknown).accuracy))
    _write_rows(cfg.report_out, _train_report(report, model, extra))
    if cfg.figures_dir is not None:
        from .plotting import plot_convergence
        cfg.figures_dir.mkdir(parents=True, exist_ok=True)
        plot_convergence(report, cfg.figures_dir / "convergence.png")
    if not report.converged:
        print(f"error: no convergence within {cfg.max_iter} iterations; partial model written",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    model = load(cfg.model)
    rows = [["label", "margin"]]
    if not _is_blank(cfg.data, cfg.comment):
        try:
            data = _read(cfg, cfg.data, schema=_model_schema(model), classes=model.classes,
                         labelled=_label_arg(cfg.label) is not None)
        except DataFormatError as exc:
            if _label_arg(cfg.label) is None and "fields" in str(exc):
                raise DataFormatError(f"{exc} (pass --label if the file has a label column)") from None
            raise
        tokens, margins = predict(model, data, unknown=cfg.unknown)
        rows += [[t, repr(float(g))] for t, g in zip(tokens, margins)]
    _write_rows(cfg.out, [rows])
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    model = load(cfg.model)
    data = _read(cfg, cfg.data, schema=_model_schema(model), classes=model.classes)
    result = evaluate(model, data, unknown=cfg.unknown)
    _write_rows(cfg.report_out, [[["metric", "value"]] + [list(r) for r in result.rows()]])
    return EXIT_OK


def cmd_bench(cfg: RunConfig, worker_counts: list[int], n: int, m: int, separation: float) -> int:
    if cfg.data is not None:
        data = _read(cfg, cfg.data)
        codec = fit_codec(data)
        Y = codec.encode(data)
        d = data.signs()
        Y = Y * d[:, None]
        source = str(cfg.data)
    else:
        X, d = gaussian_clouds(n, m, separation, cfg.seed)
        Y = X * d[:, None]
        source = f"gaussian_clouds(n={n},m={m},separation={separation!r},seed={cfg.seed})"
    m = Y.shape[1]
    table = [BENCH_FIELDS]
    rows = []
    for p in worker_counts:
        parts = split_signed(Y, d, p)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            t0 = time.perf_counter()
            _, report = train_inprocess(parts, _solver_config(cfg), threads=cfg.threads)
            wall = time.perf_counter() - t0
        hist = report.history
        per_iter = float(np.mean([h.seconds for h in hist])) if hist else float("nan")
        row = {
            "p": p, "n": Y.shape[0], "m": m, "iterations": report.iterations, "converged": report.converged,
            "wall_seconds": wall, "seconds_per_iteration": per_iter,
            "bytes_up_per_iteration": hist[0].bytes_up[0] if hist else 0,
            "bytes_down_per_iteration": hist[0].bytes_down[0] if hist else 0,
            "expected_up": (m * (m + 1) // 2 + 3 * m + UPSTREAM_SCALARS) * 8,
            "expected_down": (m + 2) * 8, "seed": cfg.seed,
        }
        rows.append(row)
        table.append([_fmt(row[f]) for f in BENCH_FIELDS])
        print(f"p={p}: {report.iterations} iterations, {per_iter:.4f} s/iteration", file=sys.stderr)
    _write_rows(cfg.report_out, [[["key", "value"], ["source", source]], table])
    if cfg.figures_dir is not None:
        from .plotting import plot_scaling
        cfg.figures_dir.mkdir(parents=True, exist_ok=True)
        plot_scaling(rows, cfg.figures_dir / "scaling.png")
    return EXIT_OK


def cmd_partition(cfg: RunConfig) -> int:
    data = _read(cfg, cfg.data)
    codec = fit_codec(data)
    out = cfg.partition_dir or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    for r, part in enumerate(encode_and_partition(data, codec, cfg.workers), start=1):
        save_partition(part, out / f"part-{r}.npz")
        print(out / f"part-{r}.npz")
    return EXIT_OK


def cmd_worker(connect: str, rank: int, partition: Path, threads: int | None, timeout: float) -> int:
    from .coordinator import _limit_blas, hello_values

    host, _, port = connect.rpartition(":")
    part = load_partition(partition)
    comm = commlib.connect_worker(host or "127.0.0.1", int(port), rank, hello_values(rank, part), timeout)
    try:
        with _limit_blas(threads):
            run_worker(comm, part)
    finally:
        comm.close()
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ipsvm", description="Distributed interior-point linear SVM.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = ap.add_subparsers(dest="command", required=True)

    def data_flags(p, label_default="0"):
        p.add_argument("--data", type=Path)
        p.add_argument("--format", dest="fmt", choices=["dense", "sparse"], default="dense")
        p.add_argument("--label", default=label_default,
                       help="label column index or header name ('none' for unlabelled input)")
        p.add_argument("--features", type=int, help="declared feature count for sparse input")
        p.add_argument("--delimiter", default=",")
        p.add_argument("--header", action="store_true")
        p.add_argument("--comment", help="lines starting with this prefix are skipped")
        p.add_argument("--label-strip", default="", help="characters stripped from the end of labels")
        p.add_argument("--unknown", choices=["error", "zeros"], default="error",
                       help="policy for categories not seen in training")

    def solver_flags(p):
        p.add_argument("--tau", type=float, default=1.0)
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--max-iter", type=int, default=200)
        p.add_argument("--threads", type=int, help="BLAS threads per worker")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--timeout", type=float, default=commlib.DEFAULT_TIMEOUT)

    p = sub.add_parser("train", help="train a model and write a report")
    data_flags(p)
    solver_flags(p)
    p.add_argument("--test-data", type=Path)
    p.add_argument("--holdout", type=float, default=0.0, help="seeded fraction held out for testing")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--transport", choices=["inprocess", "socket"], default="inprocess")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--spawn", action="store_true", help="launch socket workers as child processes")
    p.add_argument("--partition-dir", type=Path)
    p.add_argument("--model-out", dest="model", type=Path)
    p.add_argument("--report-out", type=Path)
    p.add_argument("--figures-dir", type=Path)

    p = sub.add_parser("predict", help="score rows with a saved model")
    data_flags(p, label_default="none")
    p.add_argument("--model", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("evaluate", help="accuracy and confusion counts of a saved model")
    data_flags(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--report-out", type=Path)

    p = sub.add_parser("bench", help="per-iteration time against worker count")
    data_flags(p)
    solver_flags(p)
    p.add_argument("--workers", default="1,2,4", help="comma-separated worker counts")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--report-out", type=Path)
    p.add_argument("--figures-dir", type=Path)

    p = sub.add_parser("partition", help="encode data and write one file per worker")
    data_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--partition-dir", type=Path)

    p = sub.add_parser("worker", help="run one socket worker")
    p.add_argument("--connect", required=True, help="coordinator HOST:PORT")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--partition", type=Path, required=True)
    p.add_argument("--threads", type=int)
    p.add_argument("--timeout", type=float, default=commlib.DEFAULT_TIMEOUT)
    return ap


_CONFIG_KEYS = set(RunConfig.__dataclass_fields__)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "worker":
            return cmd_worker(args.connect, args.rank, args.partition, args.threads, args.timeout)
        values = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS}
        worker_counts = None
        if args.command == "bench":
            try:
                worker_counts = [int(x) for x in str(args.workers).split(",") if x.strip()]
            except ValueError:
                raise ConfigError(f"--workers must be a comma-separated list of integers, got {args.workers!r}")
            if not worker_counts or min(worker_counts) < 1:
                raise ConfigError("--workers values must be at least 1")
            values["workers"] = max(worker_counts)
        cfg = RunConfig(**values)
        _validate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "bench":
            if args.n < 2 or args.m < 1:
                raise ConfigError("--n must be at least 2 and --m at least 1")
            return cmd_bench(cfg, worker_counts, args.n, args.m, args.separation)
        return cmd_partition(cfg)
    except ConfigError as exc:
        print(f"ipsvm: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"ipsvm: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return EXIT_FAILURE
    except (DataFormatError, ModelFormatError, commlib.CommError, ValueError, ArithmeticError,
            np.linalg.LinAlgError) as exc:
        print(f"ipsvm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
