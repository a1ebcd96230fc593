"""Experiment configs, run directories and the train/eval/attack/verify/report jobs.

Every job writes into a fresh directory and never touches an earlier one.
Artifacts are plain files (CSV, JSON, little-endian float64 checkpoints)
that each carry the hash of the experiment config that produced them.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import functools
import hashlib
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .ars import ArsConfig, EpochRecord, TrainLog, aggregate_csv, aggregate_logs, multi_seed_campaign, train
from .dynamics import ConfigurationError
from .environments import make_environment
from .policies import EVAL_SEED, POLICY_CLASSES, PolicyFactory, PolicyTask, build_model, \
    innovation_observer
from .qmodels import load_params, save_params
from .robustness import SpsaConfig, critical_attack_size, sweep

EXIT_OK, EXIT_VALIDATION, EXIT_AUDIT, EXIT_PARTIAL = 0, 2, 3, 4


class ValidationError(ConfigurationError):
    """Invalid config or inconsistent inputs (exit code 2)."""


class AuditFailure(RuntimeError):
    """A required behavioral audit failed (exit code 3)."""

    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["experiment"],
    "additionalProperties": False,
    "properties": {
        "experiment": {
            "type": "object",
            "required": ["name", "environment", "policy"],
            "additionalProperties": False,
            "properties": {
                "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                "environment": {"type": "string", "minLength": 1},
                "policy": {"type": "string", "enum": list(POLICY_CLASSES)},
                "alpha_bar": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "gamma": _POS,
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0},
                          "minItems": 1, "uniqueItems": True},
                "output_dir": {"type": "string"},
            },
        },
        "ars": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _INT1, "num_directions": _INT1, "sigma": _POS, "lr": _POS,
                "train_batch": _INT1, "test_batch": _INT1, "grad_clip": _POS,
                "clip_raw": {"type": "boolean"},
                "lr_drop_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "lr_drop_factor": _POS, "beta1": _NUM, "beta2": _NUM, "adam_eps": _POS,
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"state_dim": _INT1, "hidden_dim": _INT1, "lstm_units": _INT1},
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eps_range": {"type": "array", "items": {"type": "number", "minimum": 0},
                              "minItems": 2, "maxItems": 2},
                "eps_list": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "iterations": _INT1,
                "expand": {"type": "integer", "minimum": 0},
                "batch": _INT1,
                "seed": {"type": "integer", "minimum": 0},
                "window": _INT1,
                "spsa_iterations": _INT1,
                "perturbation": _POS,
                "step": _POS,
            },
        },
        "overrides": {"type": "object"},
    },
}

_DEFAULTS = {
    "experiment": {"alpha_bar": 0.95, "gamma": math.inf, "seeds": [0, 1, 2, 3, 4, 5],
                   "output_dir": "runs"},
    "ars": {},
    "model": {"state_dim": 32, "hidden_dim": 64, "lstm_units": 28},
    "attack": {"eps_range": [0.0, 0.1], "eps_list": [], "iterations": 8, "expand": 4,
               "batch": 20, "seed": 0, "window": 10, "spsa_iterations": 4,
               "perturbation": 0.5, "step": 0.5},
    "overrides": {},
}


def _jsonable(obj):
    """Floats that JSON cannot carry become strings (``inf``)."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        return {k: _unjson(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unjson(v) for v in obj]
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


@dataclass(frozen=True)
class ExperimentConfig:
    """One training experiment: environment, policy class, hyperparameters, seeds."""

    name: str
    environment: str
    policy: str
    alpha_bar: float
    gamma: float
    ars: ArsConfig
    seeds: tuple
    output_dir: str
    model: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "experiment": {"name": self.name, "environment": self.environment,
                           "policy": self.policy, "alpha_bar": self.alpha_bar,
                           "gamma": self.gamma, "seeds": list(self.seeds),
                           "output_dir": self.output_dir},
            "ars": self.ars.to_dict(),
            "model": dict(self.model),
            "attack": copy.deepcopy(self.attack),
            "overrides": copy.deepcopy(self.overrides),
        }

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]

    @property
    def policy_id(self) -> str:
        return self.name

    def environment_instance(self):
        return make_environment(self.environment, self.overrides or None)

    def spsa(self) -> SpsaConfig:
        a = self.attack
        return SpsaConfig(window=a["window"], iterations=a["spsa_iterations"],
                          perturbation=a["perturbation"], step=a["step"], seed=a["seed"])


def _fill(raw: dict) -> dict:
    out = copy.deepcopy(_DEFAULTS)
    for key, val in raw.items():
        if isinstance(val, dict):
            out.setdefault(key, {}).update(copy.deepcopy(val))
        else:
            out[key] = val
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw config mapping and fill in defaults.

    Validation errors name the offending field as ``table.key``.
    """
    raw = _unjson(copy.deepcopy(raw))
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"invalid config field {where}: {exc.message}") from exc
    c = _fill(raw)
    e = c["experiment"]
    gamma = float(e["gamma"])
    if e["policy"] == "youla-gamma" and not math.isfinite(gamma):
        raise ValidationError("invalid config field experiment.gamma: youla-gamma needs a finite gamma")
    if e["policy"] == "youla-contracting" and math.isfinite(gamma):
        raise ValidationError("invalid config field experiment.gamma: youla-contracting is "
                              "unconstrained in gain; use youla-gamma for a finite gamma")
    lo, hi = c["attack"]["eps_range"]
    if not hi > lo:
        raise ValidationError("invalid config field attack.eps_range: upper end must exceed lower")
    try:
        ars = ArsConfig(**c["ars"])
    except (TypeError, ValueError, ConfigurationError) as exc:
        raise ValidationError(f"invalid config field ars: {exc}") from exc
    return ExperimentConfig(e["name"], e["environment"], e["policy"], float(e["alpha_bar"]), gamma,
                            ars, tuple(int(s) for s in e["seeds"]), e["output_dir"],
                            dict(c["model"]), c["attack"], c["overrides"])


def load_config(path) -> ExperimentConfig:
    """Read a TOML experiment file, a JSON config dump or a bundled preset name."""
    p = Path(path)
    if p.exists():
        text = p.read_text()
        if p.suffix == ".json":
            return config_from_dict(json.loads(text))
    else:
        try:
            text = resources.files("nlyoula").joinpath("presets", f"{path}.toml").read_text()
        except FileNotFoundError as exc:
            raise ValidationError(f"config file {path!s} not found") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"config {path!s} is not valid TOML: {exc}") from exc
    return config_from_dict(raw)


def list_presets() -> list:
    root = resources.files("nlyoula").joinpath("presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------

def fresh_dir(parent, stem: str) -> Path:
    """Create ``parent/stem``, or ``stem-1``, ``stem-2`` ... if taken."""
    parent = Path(parent)
    parent.mkdir(parents=True, exist_ok=True)
    k = 0
    while True:
        d = parent / (stem if k == 0 else f"{stem}-{k}")
        try:
            d.mkdir()
            return d
        except FileExistsError:
            k += 1


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _model_for(cfg: ExperimentConfig, env):
    m = cfg.model
    return build_model(env, cfg.policy, gamma=cfg.gamma, alpha_bar=cfg.alpha_bar,
                       state_dim=m["state_dim"], hidden_dim=m["hidden_dim"],
                       lstm_units=m["lstm_units"])


def make_task(cfg: ExperimentConfig, env=None) -> PolicyTask:
    env = cfg.environment_instance() if env is None else env
    factory = PolicyFactory(env, cfg.policy, _model_for(cfg, env))
    return PolicyTask(factory, train_batch=cfg.ars.train_batch, test_batch=cfg.ars.test_batch)


def run_audit(cfg: ExperimentConfig, env=None) -> dict:
    from .verification import environment_audit
    env = cfg.environment_instance() if env is None else env
    innov = innovation_observer(env) if cfg.policy.startswith("youla") else None
    return environment_audit(env, innovation_observer=innov)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _train_seed(cfg_dict: dict, seed: int):
    """Worker entry point; picklable through ``functools.partial``."""
    cfg = config_from_dict(cfg_dict)
    return train(make_task(cfg), cfg.ars, seed)


def _log_csv(log: TrainLog, config_hash: str) -> str:
    return f"# config_hash={config_hash} seed={log.seed}\n" + log.to_csv(include_wall=False)


def _timing_csv(log: TrainLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "wall_ms"])
    for r in log.records:
        w.writerow([r.epoch, repr(float(r.wall_ms))])
    return buf.getvalue()


def read_log(path) -> TrainLog:
    with open(path) as fh:
        body = "".join(line for line in fh if not line.startswith("#"))
    tmp = io.StringIO(body)
    out = TrainLog()
    for row in csv.DictReader(tmp):
        out.records.append(EpochRecord(
            int(row["epoch"]), float(row["train_cost"]), float(row["test_cost"]),
            float(row["normalized_test_cost"]), float(row["grad_norm"]), float(row["lr"]),
            float(row.get("wall_ms") or "nan")))
    return out


@dataclass
class TrainOutcome:
    run_dir: Path
    manifest: dict
    failures: dict
    audit: Optional[dict] = None

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failures else EXIT_OK


def cmd_train(cfg: ExperimentConfig, *, out=None, seeds: Optional[Sequence[int]] = None,
              skip_audit: bool = False, workers: Optional[int] = None) -> TrainOutcome:
    """Train every seed, write logs, checkpoints and the manifest.

    Raises :class:`AuditFailure` before any training when the environment
    audit fails (unless ``skip_audit``).
    """
    env = cfg.environment_instance()
    audit = None
    if not skip_audit:
        audit = run_audit(cfg, env)
        if not audit["passed"]:
            raise AuditFailure(f"environment audit failed for {env.name}", audit)
    seeds = list(cfg.seeds if seeds is None else seeds)
    h = cfg.hash
    run_dir = fresh_dir(cfg.output_dir if out is None else out, f"{cfg.name}-{h}")
    _write(run_dir / "config.json", dump_json({"config_hash": h, **cfg.to_dict()}))
    if audit is not None:
        _write(run_dir / "audit.json", dump_json({"config_hash": h, **audit}))

    camp = multi_seed_campaign(functools.partial(_train_seed, _jsonable(cfg.to_dict())), seeds,
                               workers)
    task = make_task(cfg, env) if cfg.policy != "base-only" else None
    layout = None if task is None else task.factory.model.layout

    entries, failures, logs = {}, dict(camp.failures), []
    for s in seeds:
        sd = run_dir / f"seed_{s}"
        if s in failures:
            entries[str(s)] = {"status": "failed", "error": failures[s]}
            continue
        res = camp.results[s]
        sd.mkdir()
        _write(sd / "train_log.csv", _log_csv(res.log, h))
        _write(sd / "timing.csv", _timing_csv(res.log))
        _write(sd / "events.json", dump_json({"config_hash": h, "events": res.log.events}))
        entry = {"status": "ok", "log": f"seed_{s}/train_log.csv",
                 "log_digest": res.log.deterministic_digest(), "best_epoch": res.best_epoch,
                 "best_normalized_test_cost": float(min(r.normalized_test_cost
                                                        for r in res.log.records)),
                 "final_normalized_test_cost": float(res.log.records[-1].normalized_test_cost),
                 "base_test_cost": res.log.base_test_cost}
        if layout is not None:
            meta = {"config_hash": h, "seed": s, "policy": cfg.policy, "environment": env.name,
                    "gamma": cfg.gamma, "alpha_bar": cfg.alpha_bar}
            save_params(sd / "best.bin", sd / "best.json", res.best_params, layout,
                        {**_jsonable(meta), "epoch": res.best_epoch})
            save_params(sd / "final.bin", sd / "final.json", res.final_params, layout,
                        {**_jsonable(meta), "epoch": len(res.log.records) - 1})
            entry["checkpoint"] = f"seed_{s}/best.json"
            entry["final_checkpoint"] = f"seed_{s}/final.json"
        entries[str(s)] = entry
        logs.append(res.log)
    _write(run_dir / "curve.csv", aggregate_csv(aggregate_logs(logs)))
    manifest = {"kind": "train", "config_hash": h, "name": cfg.name, "policy": cfg.policy,
                "environment": cfg.environment, "gamma": cfg.gamma, "seeds": entries,
                "failures": {str(k): v for k, v in failures.items()}, "version": __version__}
    _write(run_dir / "manifest.json", dump_json(manifest))
    return TrainOutcome(run_dir, manifest, failures, audit)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def read_manifest(run_dir) -> dict:
    p = Path(run_dir) / "manifest.json"
    if not p.exists():
        raise ValidationError(f"no manifest.json in {run_dir}")
    return _unjson(json.loads(p.read_text()))


def run_config(run_dir) -> ExperimentConfig:
    raw = json.loads((Path(run_dir) / "config.json").read_text())
    raw.pop("config_hash", None)
    return config_from_dict(raw)


def check_hash(cfg: ExperimentConfig, found: str, what: str, force: bool) -> Optional[str]:
    """Refuse a hash mismatch unless forced; returns a warning string when forced."""
    if found == cfg.hash:
        return None
    msg = f"{what} was produced by config {found}, not {cfg.hash}"
    if not force:
        raise ValidationError(msg + " (use --force to override)")
    warnings.warn(msg, RuntimeWarning)
    return msg


def load_checkpoint(path, cfg: ExperimentConfig, *, force: bool = False):
    """``(params, meta)`` from a checkpoint JSON path; verifies the config hash."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    vec, layout, meta = load_params(path.with_suffix(".bin"), path)
    check_hash(cfg, meta.get("config_hash", ""), f"checkpoint {path}", force)
    return vec, meta


def checkpoints_of(cfg: ExperimentConfig, run_dir=None, checkpoint=None, seeds=None, *,
                   force: bool = False):
    """``[(seed, params or None)]`` for the requested source.

    With a run directory every successful seed's best checkpoint is used;
    with neither a run nor a checkpoint the untrained initial parameters of
    each seed are returned.
    """
    if checkpoint is not None:
        vec, meta = load_checkpoint(checkpoint, cfg, force=force)
        return [(int(meta.get("seed", 0)), vec)]
    if run_dir is not None:
        man = read_manifest(run_dir)
        check_hash(cfg, man["config_hash"], f"run {run_dir}", force)
        out = []
        for s, entry in man["seeds"].items():
            if seeds is not None and int(s) not in seeds:
                continue
            if entry.get("status") != "ok":
                continue
            if "checkpoint" not in entry:
                out.append((int(s), None))
                continue
            vec, _ = load_checkpoint(Path(run_dir) / entry["checkpoint"], cfg, force=force)
            out.append((int(s), vec))
        return out
    task = make_task(cfg)
    return [(s, None if cfg.policy == "base-only" else task.initial_params(s))
            for s in (cfg.seeds if seeds is None else seeds)]


# ---------------------------------------------------------------------------
# Evaluation and attacks
# ---------------------------------------------------------------------------

def cmd_eval(cfg: ExperimentConfig, *, run_dir=None, checkpoint=None, seeds=None, out=None,
             force: bool = False) -> tuple:
    """Normalized test cost of each checkpoint on the evaluation seed."""
    task = make_task(cfg)
    base = task.base_test_cost()
    rows = []
    for s, vec in checkpoints_of(cfg, run_dir, checkpoint, seeds, force=force):
        cost = base if vec is None else task.test_cost(vec)
        rows.append({"seed": s, "test_cost": cost, "normalized_test_cost": cost / base})
    norm = [r["normalized_test_cost"] for r in rows]
    report = {"kind": "eval", "config_hash": cfg.hash, "name": cfg.name, "eval_seed": EVAL_SEED,
              "test_batch": cfg.ars.test_batch, "base_test_cost": base, "rows": rows,
              "mean_normalized_test_cost": float(np.mean(norm)) if norm else float("nan")}
    d = fresh_dir(cfg.output_dir if out is None else out, f"{cfg.name}-{cfg.hash}-eval")
    _write(d / "eval.json", dump_json(report))
    return d, report


ROBUSTNESS_COLUMNS = ("policy_id", "gamma", "epsilon", "mean_norm_cost", "mean_deviation",
                      "criterion_hit")


def _robustness_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROBUSTNESS_COLUMNS)
    for r in rows:
        w.writerow([r[0], repr(float(r[1])), repr(float(r[2])), repr(float(r[3])),
                    repr(float(r[4])), int(bool(r[5]))])
    return buf.getvalue()


def cmd_attack(cfg: ExperimentConfig, *, run_dir=None, checkpoint=None, seeds=None, out=None,
               eps_list: Optional[Sequence[float]] = None, force: bool = False) -> tuple:
    """Sweep an attack-size list, or bisect for the critical size when no list is given."""
    env = cfg.environment_instance()
    task = make_task(cfg, env)
    factory = task.factory
    a = cfg.attack
    eps_list = list(a["eps_list"]) if eps_list is None else list(eps_list)
    spsa = cfg.spsa()
    ckpts = checkpoints_of(cfg, run_dir, checkpoint, seeds, force=force)
    rows, critical = [], []
    for s, vec in ckpts:
        policy = factory(vec)
        pid = f"{cfg.name}/seed_{s}"
        if eps_list:
            for e, nc, dev, hit in sweep(env, policy, eps_list, batch=a["batch"], seed=a["seed"],
                                         cfg=spsa):
                rows.append((pid, cfg.gamma, e, nc, dev, hit))
        else:
            res = critical_attack_size(env, policy, policy_id=pid, eps_range=a["eps_range"],
                                       iterations=a["iterations"], batch=a["batch"],
                                       seed=a["seed"], cfg=spsa, expand=a["expand"])
            for e, nc, dev, _, hit in res.curve:
                rows.append((pid, cfg.gamma, e, nc, dev, hit))
            critical.append({"seed": s, "policy_id": pid, "critical_eps": res.critical_eps,
                             "censored": res.censored})
            crit_name, thr = res.criterion, res.threshold
    d = fresh_dir(cfg.output_dir if out is None else out, f"{cfg.name}-{cfg.hash}-attack")
    _write(d / "robustness.csv", _robustness_csv(rows))
    report = {"kind": "attack", "config_hash": cfg.hash, "name": cfg.name, "policy": cfg.policy,
              "gamma": cfg.gamma, "mode": "sweep" if eps_list else "bisection",
              "spsa": dataclasses.asdict(spsa), "batch": a["batch"]}
    if critical:
        vals = np.array([c["critical_eps"] for c in critical])
        report.update({"criterion": crit_name, "threshold": thr, "critical": critical,
                       "mean_critical_eps": float(vals.mean()),
                       "min_critical_eps": float(vals.min()),
                       "max_critical_eps": float(vals.max())})
    if run_dir is not None:
        report["run"] = Path(run_dir).name
    _write(d / "critical.json" if critical else d / "attack.json", dump_json(report))
    _write(d / "manifest.json", dump_json({**report, "files": sorted(
        p.name for p in d.iterdir())}))
    return d, report


# ---------------------------------------------------------------------------
# Verification suite
# ---------------------------------------------------------------------------

def cmd_verify(cfg: Optional[ExperimentConfig] = None, *, out=None, seed: int = 0) -> tuple:
    """Run the audit suite on the shipped fixtures and both environments.

    Positive fixtures must pass and negative controls must be flagged; the
    returned report has ``passed`` false otherwise.
    """
    from .fixtures import scalar_fixture, step_criterion
    from .qmodels import ContractingCell
    from .robustness import bisect_threshold
    from .verification import audit_contraction, audit_lemma2_boundedness, \
        audit_lemma3_convergence, environment_audit, example1_counterexample, map_runner
    from .dynamics import stream

    checks = []

    def record(name, expect, got, detail):
        checks.append({"check": name, "expected": expect, "observed": bool(got),
                       "ok": bool(got) == expect, "detail": detail})

    rng = stream(seed, "verify")
    T = 60
    for a, expect in ((0.5, True), (0.9, True), (1.1, False)):
        fx = scalar_fixture(a)
        inputs = rng.uniform(-1, 1, size=(8, T, 1))
        pairs = rng.uniform(-1, 1, size=(8, 2, 1))
        rep = audit_contraction(map_runner(fx.step, inputs), pairs)
        record(f"contraction scalar a={a}", expect, rep.passed, {"rate": rep.rate})

    cell = ContractingCell(2, 1, state_dim=8, hidden_dim=16, alpha_bar=0.9, gamma=5.0)
    params = cell.prepare(rng.normal(0.0, 1.0, cell.num_params))
    inputs = rng.uniform(-1, 1, size=(4, 300, 2))
    rep2 = audit_lemma2_boundedness(lambda q, u: cell.step(params, q, u)[0],
                                    np.zeros((4, cell.state_dim)), inputs)
    record("boundedness certified cell", True, rep2.passed, {"slope": rep2.slope})
    neg = scalar_fixture(1.1)
    rep2n = audit_lemma2_boundedness(neg.step, np.zeros((4, 1)), inputs[..., :1])
    record("boundedness gain-1.1 control", False, rep2n.passed, {"slope": rep2n.slope})

    for a, alpha in ((0.5, 0.8), (0.8, 0.5), (0.7, 0.7)):
        fx = scalar_fixture(a)
        u1 = alpha ** np.arange(200)[:, None]
        rep3 = audit_lemma3_convergence(fx.step, lambda x, u, f=fx: f.measure(x), np.array([[0.0], [1.0]]),
                                        u1, np.zeros_like(u1), declared_rate=a, input_rate=alpha)
        record(f"input-convergence a={a} input rate={alpha}", True, rep3.passed,
               {"state_rate": rep3.state_rate, "output_rate": rep3.output_rate})

    est, censored, _ = bisect_threshold(step_criterion(0.37), 0.0, 1.0, iterations=20)
    record("bisection synthetic threshold 0.37", True, abs(est - 0.37) < 1e-5 and not censored,
           {"estimate": est})

    ex = example1_counterexample()
    record("disturbed observer-loop counterexample", True, ex.passed,
           {"gap": ex.converged_gap, "separation": ex.separation})

    envs = ["maglev", "pendulum"] if cfg is None else [cfg.environment]
    for name in envs:
        env = make_environment(name) if cfg is None else cfg.environment_instance()
        aud = environment_audit(env, innovation_observer=innovation_observer(env))
        record(f"environment audit {env.name}", True, aud["passed"], aud)

    passed = all(c["ok"] for c in checks)
    report = {"kind": "verify", "passed": passed, "checks": checks}
    if cfg is not None:
        report["config_hash"] = cfg.hash
    parent = (cfg.output_dir if cfg is not None else "runs") if out is None else out
    d = fresh_dir(parent, "verify" if cfg is None else f"{cfg.name}-{cfg.hash}-verify")
    _write(d / "verify.json", dump_json(report))
    return d, report


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _runs_in(campaign) -> list:
    campaign = Path(campaign)
    if (campaign / "manifest.json").exists():
        return [campaign]
    return sorted(p.parent for p in campaign.glob("*/manifest.json"))


def _fmt(x) -> str:
    return repr(float(x))


def cmd_report(campaign, *, out=None, plots: bool = True) -> tuple:
    """Aggregate every run and attack found under ``campaign``.

    Writes ``curves.csv`` (per model and epoch: mean, min, max, band),
    ``eps_sweep.csv`` (per model and attack size: mean over seeds),
    ``critical_scatter.csv`` (one row per model with per-seed error-bar
    fields) and, optionally, PNG figures.  Missing seed files are skipped
    with a warning.
    """
    runs = _runs_in(campaign)
    if not runs:
        raise ValidationError(f"no manifest.json found under {campaign}")
    notes = []
    models = {}
    attacks = {}
    for rd in runs:
        man = read_manifest(rd)
        if man.get("kind") == "train":
            logs, finals = {}, {}
            for s, entry in man["seeds"].items():
                if entry.get("status") != "ok":
                    notes.append(f"{rd.name}: seed {s} failed in training")
                    continue
                p = rd / entry["log"]
                if not p.exists():
                    notes.append(f"{rd.name}: missing {entry['log']}")
                    continue
                logs[int(s)] = read_log(p)
            models[man["config_hash"]] = {"name": man["name"], "policy": man["policy"],
                                          "gamma": man["gamma"], "logs": logs,
                                          "expected": len(man["seeds"])}
        elif man.get("kind") == "attack":
            attacks.setdefault(man["config_hash"], []).append(rd)
    for n in notes:
        warnings.warn(n, RuntimeWarning)

    order = sorted(models, key=lambda h: (models[h]["name"], h))
    # curves
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "policy", "gamma", "epoch", "mean", "min", "max", "band", "seeds"])
    for h in order:
        m = models[h]
        logs = [m["logs"][s] for s in sorted(m["logs"])]
        agg = aggregate_logs(logs)
        for i in range(len(agg["epoch"])):
            w.writerow([m["name"], m["policy"], _fmt(m["gamma"]), int(agg["epoch"][i]),
                        _fmt(agg["mean"][i]), _fmt(agg["min"][i]), _fmt(agg["max"][i]),
                        _fmt(agg["max"][i] - agg["min"][i]), len(logs)])
    curves = buf.getvalue()

    # eps sweeps and critical sizes
    sweep_rows = {}
    crit = {}
    for h, dirs in attacks.items():
        for d in sorted(dirs):
            rob = d / "robustness.csv"
            if rob.exists():
                with open(rob) as fh:
                    for r in csv.DictReader(fh):
                        key = (h, float(r["epsilon"]))
                        sweep_rows.setdefault(key, []).append(
                            (float(r["mean_norm_cost"]), float(r["mean_deviation"])))
            cj = d / "critical.json"
            if cj.exists():
                rep = _unjson(json.loads(cj.read_text()))
                for c in rep["critical"]:
                    crit.setdefault(h, {})[int(c["seed"])] = (float(c["critical_eps"]),
                                                              bool(c["censored"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "gamma", "epsilon", "mean_norm_cost", "min_norm_cost", "max_norm_cost",
                "mean_deviation", "count"])
    for (h, e) in sorted(sweep_rows, key=lambda k: (models.get(k[0], {}).get("name", k[0]), k[1])):
        vals = np.array(sweep_rows[(h, e)])
        name = models.get(h, {}).get("name", h)
        gamma = models.get(h, {}).get("gamma", float("nan"))
        w.writerow([name, _fmt(gamma), _fmt(e), _fmt(vals[:, 0].mean()), _fmt(vals[:, 0].min()),
                    _fmt(vals[:, 0].max()), _fmt(vals[:, 1].mean()), len(vals)])
    eps_csv = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "policy", "gamma", "seeds", "cost_mean", "cost_min", "cost_max",
                "cost_std", "critical_mean", "critical_min", "critical_max", "critical_std",
                "critical_seeds", "censored"])
    scatter = []
    for h in order:
        m = models[h]
        finals = np.array([m["logs"][s].records[-1].normalized_test_cost
                           for s in sorted(m["logs"])])
        cs = crit.get(h, {})
        ce = np.array([cs[s][0] for s in sorted(cs)]) if cs else np.array([np.nan])
        cens = sum(int(cs[s][1]) for s in cs)
        stat = lambda a, f: _fmt(f(a)) if a.size else "nan"
        w.writerow([m["name"], m["policy"], _fmt(m["gamma"]), len(finals),
                    stat(finals, np.mean), stat(finals, np.min), stat(finals, np.max),
                    stat(finals, np.std), _fmt(np.mean(ce)), _fmt(np.min(ce)), _fmt(np.max(ce)),
                    _fmt(np.std(ce)), len(cs), cens])
        scatter.append((m["name"], finals, ce))
        if len(m["logs"]) < m["expected"]:
            notes.append(f"{m['name']}: {len(m['logs'])} of {m['expected']} seeds available")
    scatter_csv = buf.getvalue()

    out = Path(campaign) / "report" if out is None else Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "curves.csv", curves)
    _write(out / "eps_sweep.csv", eps_csv)
    _write(out / "critical_scatter.csv", scatter_csv)
    _write(out / "report.json", dump_json({"kind": "report", "runs": [r.name for r in runs],
                                           "models": [models[h]["name"] for h in order],
                                           "warnings": notes}))
    if plots:
        _plots(out, models, order, sweep_rows, scatter)
    return out, notes


def _plots(out: Path, models, order, sweep_rows, scatter) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    meta = {"Software": None}
    fig, ax = plt.subplots(figsize=(6, 4))
    for h in order:
        logs = [models[h]["logs"][s] for s in sorted(models[h]["logs"])]
        if not logs:
            continue
        agg = aggregate_logs(logs)
        ax.plot(agg["epoch"], agg["mean"], label=models[h]["name"])
        ax.fill_between(agg["epoch"], agg["min"], agg["max"], alpha=0.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("normalized test cost")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=100, metadata=meta)
    plt.close(fig)

    if sweep_rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        for h in sorted({k[0] for k in sweep_rows}):
            es = sorted(e for (hh, e) in sweep_rows if hh == h)
            ys = [np.mean([v[0] for v in sweep_rows[(h, e)]]) for e in es]
            ax.plot(es, ys, marker="o", label=models.get(h, {}).get("name", h))
        ax.set_xlabel("attack size")
        ax.set_ylabel("normalized test cost")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "eps_sweep.png", dpi=100, metadata=meta)
        plt.close(fig)

    pts = [(n, f, c) for n, f, c in scatter if f.size and np.all(np.isfinite(c))]
    if pts:
        fig, ax = plt.subplots(figsize=(6, 4))
        for n, f, c in pts:
            ax.errorbar(f.mean(), c.mean(), xerr=f.std(), yerr=c.std(), fmt="o", label=n)
        ax.set_xlabel("normalized test cost")
        ax.set_ylabel("critical attack size")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "critical_scatter.png", dpi=100, metadata=meta)
        plt.close(fig)
