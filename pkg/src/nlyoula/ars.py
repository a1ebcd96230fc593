"""Augmented random search (basic variant, no state normalization) with Adam.

The training objective is anything with the :class:`Objective` interface:
``train_costs(thetas, seed, epoch)`` returns one mean cost per row of
``thetas`` using initial conditions and noise that depend only on
``(seed, epoch)``, so every perturbation of an epoch sees the same
scenarios (common random numbers).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .dynamics import ConfigurationError, stream, stream_digest

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_cost", "test_cost", "normalized_test_cost", "grad_norm", "lr",
               "wall_ms")


@dataclass(frozen=True)
class ArsConfig:
    epochs: int = 200
    num_directions: int = 16
    sigma: float = 0.01
    lr: float = 0.005
    train_batch: int = 50
    test_batch: int = 100
    grad_clip: float = 10.0
    clip_raw: bool = True          # clip the raw estimate (True) or the Adam step (False)
    lr_drop_fraction: float = 0.7
    lr_drop_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        for name in ("num_directions", "train_batch", "test_batch"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("sigma", "lr", "grad_clip", "lr_drop_factor"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 <= self.lr_drop_fraction <= 1.0:
            raise ConfigurationError("lr_drop_fraction must lie in [0, 1]")

    @property
    def lr_drop_epoch(self) -> int:
        return int(math.floor(self.lr_drop_fraction * self.epochs))

    def lr_at(self, epoch: int) -> float:
        """Learning rate used for the update made during ``epoch`` (0-based)."""
        return self.lr * (self.lr_drop_factor if epoch >= self.lr_drop_epoch else 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


class Objective(Protocol):
    dim: int

    def initial_params(self, seed: int) -> np.ndarray: ...

    def train_costs(self, thetas: np.ndarray, seed: int, epoch: int) -> np.ndarray: ...

    def test_cost(self, theta: np.ndarray) -> float: ...

    def base_test_cost(self) -> float: ...


# ---------------------------------------------------------------------------
# Gradient estimate
# ---------------------------------------------------------------------------

def directions(seed: int, epoch: int, num_directions: int, dim: int) -> np.ndarray:
    return stream(seed, "directions", epoch).standard_normal((num_directions, dim))


def ars_gradient(objective: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, sigma: float,
                 deltas: np.ndarray):
    """Antithetic finite-difference estimate.

    ``objective`` maps a ``(2N, dim)`` stack ``[theta + s d_1, theta - s d_1, ...]``
    to costs.  Returns ``(g, costs)`` with
    ``g = 1 / (N s) * sum_i (J+_i - J-_i) / 2 * d_i`` summed in direction order.
    """
    if not sigma > 0:
        raise ConfigurationError("sigma must be positive")
    theta = np.asarray(theta, dtype=float)
    N = deltas.shape[0]
    cands = np.empty((2 * N, theta.size))
    cands[0::2] = theta + sigma * deltas
    cands[1::2] = theta - sigma * deltas
    costs = np.asarray(objective(cands), dtype=float)
    if costs.shape != (2 * N,):
        raise ConfigurationError(f"objective returned shape {costs.shape}, expected {(2 * N,)}")
    g = np.zeros_like(theta)
    for i in range(N):
        g = g + (0.5 * (costs[2 * i] - costs[2 * i + 1])) * deltas[i]
    return g / (N * sigma), costs


def clip_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    n = float(np.linalg.norm(g))
    if n > max_norm:
        return g * (max_norm / n)
    return g


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    def step(self, g: np.ndarray, lr: Optional[float] = None) -> np.ndarray:
        """Return the parameter increment for gradient ``g`` (to be subtracted)."""
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return (self.lr if lr is None else lr) * mh / (np.sqrt(vh) + self.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_cost: float
    test_cost: float
    normalized_test_cost: float
    grad_norm: float
    lr: float
    wall_ms: float
    rng_digest: str = ""


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    base_test_cost: float = float("nan")
    seed: int = 0

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, *, include_wall: bool = True) -> str:
        cols = LOG_COLUMNS if include_wall else LOG_COLUMNS[:-1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in cols[1:]])
        return buf.getvalue()

    def deterministic_digest(self) -> str:
        """Digest of everything except wall-clock times."""
        import hashlib
        blob = self.to_csv(include_wall=False) + "".join(r.rng_digest for r in self.records)
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                out.records.append(EpochRecord(
                    int(row["epoch"]), float(row["train_cost"]), float(row["test_cost"]),
                    float(row["normalized_test_cost"]), float(row["grad_norm"]), float(row["lr"]),
                    float(row.get("wall_ms") or "nan")))
        return out


@dataclass
class TrainResult:
    log: TrainLog
    best_params: np.ndarray
    best_epoch: int
    final_params: np.ndarray


def train(objective: Objective, cfg: ArsConfig, seed: int, *, theta0: Optional[np.ndarray] = None,
          progress: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """ARS + Adam; returns the log and the checkpoint with the lowest test cost."""
    theta = objective.initial_params(seed) if theta0 is None else np.array(theta0, dtype=float)
    base = float(objective.base_test_cost())
    tlog = TrainLog(base_test_cost=base, seed=seed)
    t0 = time.perf_counter()
    test = float(objective.test_cost(theta))
    tlog.records.append(EpochRecord(0, float("nan"), test, test / base, 0.0, cfg.lr_at(0),
                                    (time.perf_counter() - t0) * 1e3, stream_digest(seed, "init")))
    best, best_test, best_epoch = theta.copy(), test, 0
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        deltas = directions(seed, epoch, cfg.num_directions, theta.size)
        g, costs = ars_gradient(lambda th: objective.train_costs(th, seed, epoch), theta,
                                cfg.sigma, deltas)
        gnorm = float(np.linalg.norm(g))
        if cfg.clip_raw:
            g = clip_norm(g, cfg.grad_clip)
        step = opt.step(g, lr)
        if not cfg.clip_raw:
            step = clip_norm(step, cfg.grad_clip)
        new = theta - step
        if not np.all(np.isfinite(new)):
            new = theta - 0.5 * step
            tlog.events.append({"epoch": epoch + 1, "event": "non-finite update, step halved"})
            if not np.all(np.isfinite(new)):
                new = theta.copy()
                tlog.events.append({"epoch": epoch + 1, "event": "update rejected"})
        theta = new
        test = float(objective.test_cost(theta))
        rec = EpochRecord(epoch + 1, float(np.mean(costs)), test, test / base, gnorm, lr,
                          (time.perf_counter() - t0) * 1e3,
                          stream_digest(seed, "directions", epoch))
        tlog.records.append(rec)
        if progress is not None:
            progress(rec)
        if test < best_test:
            best, best_test, best_epoch = theta.copy(), test, epoch + 1
    return TrainResult(tlog, best, best_epoch, theta)


# ---------------------------------------------------------------------------
# Multi-seed campaigns
# ---------------------------------------------------------------------------

def worker_count(default: int = 1) -> int:
    val = os.environ.get("NLYOULA_WORKERS")
    if not val:
        return default
    try:
        n = int(val)
    except ValueError as exc:
        raise ConfigurationError(f"NLYOULA_WORKERS must be an integer, got {val!r}") from exc
    return max(1, n)


def map_ordered(fn: Callable, items: Sequence, workers: Optional[int] = None) -> list:
    """``[fn(x) for x in items]``, possibly in worker processes; order preserved.

    Exceptions are returned in place of results rather than raised.
    """
    workers = worker_count() if workers is None else workers

    def safe_serial(x):
        try:
            return fn(x)
        except Exception as exc:  # reported per item by the caller
            return exc

    if workers <= 1 or len(items) <= 1:
        return [safe_serial(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        futs = [pool.submit(fn, x) for x in items]
        out = []
        for f in futs:
            try:
                out.append(f.result())
            except Exception as exc:
                out.append(exc)
        return out


@dataclass
class CampaignResult:
    seeds: list
    results: dict            # seed -> TrainResult
    failures: dict           # seed -> error message
    aggregate: dict          # column -> {"mean", "min", "max"} arrays over epochs


def aggregate_logs(logs: Sequence[TrainLog], column: str = "normalized_test_cost") -> dict:
    if not logs:
        return {"epoch": np.zeros(0), "mean": np.zeros(0), "min": np.zeros(0), "max": np.zeros(0)}
    n = min(len(l.records) for l in logs)
    data = np.array([[getattr(r, column) for r in l.records[:n]] for l in logs])
    return {"epoch": np.arange(n), "mean": data.mean(axis=0), "min": data.min(axis=0),
            "max": data.max(axis=0)}


def aggregate_csv(agg: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean", "min", "max", "band"])
    for i in range(len(agg["epoch"])):
        w.writerow([int(agg["epoch"][i]), repr(float(agg["mean"][i])), repr(float(agg["min"][i])),
                    repr(float(agg["max"][i])), repr(float(agg["max"][i] - agg["min"][i]))])
    return buf.getvalue()


def multi_seed_campaign(run: Callable[[int], TrainResult], seeds: Sequence[int],
                        workers: Optional[int] = None) -> CampaignResult:
    """Run ``run(seed)`` for each seed; aggregate over the seeds that completed."""
    outs = map_ordered(run, list(seeds), workers)
    results, failures = {}, {}
    for s, o in zip(seeds, outs):
        if isinstance(o, Exception):
            failures[s] = f"{type(o).__name__}: {o}"
        else:
            results[s] = o
    if failures:
        warnings.warn(f"{len(failures)} of {len(seeds)} seed runs failed; "
                      f"aggregating over {len(results)}", RuntimeWarning)
    agg = aggregate_logs([results[s].log for s in seeds if s in results])
    return CampaignResult(list(seeds), results, failures, agg)
