"""Experiment configuration, train/eval/compare orchestration and metric files.

Config files are flat TOML: top-level keys plus dotted keys per section,
e.g. ``sac.gamma = 0.99`` or ``env.base_delay = 50.0``. See ``key_table()``.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Iterable

import numpy as np
import tomli

from .baselines import (BbrLikeController, DqnController, DqnSettings, DqnTeam, GccLikeController,
                        RandomController, UniformController, dqn_train)
from .qoe import QoeWeights, RewardWeights, normalize_series
from .sacgcn import SacController, SacHyper, SacLearner, learner_from_checkpoint, rollout, train
from .simenv import ConfigError, EnvConfig
from .tensornet import CheckpointFormatError, load_checkpoint, save_checkpoint

METHODS = ("sac-gcn", "isac", "dqn", "gcc-g", "bbr-g", "uniform", "random")
LEARNABLE = ("sac-gcn", "isac", "dqn")

SWEEPS = {
    "delay": (10.0, 50.0, 100.0, 200.0),       # ms
    "loss": (0.5, 2.0, 4.0, 8.0),              # percent
    "bandwidth": (50.0, 100.0, 200.0, 400.0),  # Mbps, cpu held at 90%
    "cpu": (10.0, 40.0, 60.0, 90.0),           # percent, bandwidth held at 400 Mbps
}
SWEEP_UNITS = {"delay": "ms", "loss": "%", "bandwidth": "Mbps", "cpu": "%"}
EVAL_METRICS = ("overall_qoe", "v_comm", "v_comp", "util_comm", "util_comp", "reward")

SECTIONS = {"env": EnvConfig, "qoe": QoeWeights, "reward": RewardWeights,
            "sac": SacHyper, "dqn": DqnSettings}
TOP_LEVEL = ("method", "episodes", "eval_episodes", "seed", "output_dir")
# env.seed is driven by the experiment seed, not configured separately
HIDDEN_KEYS = {("env", "seed")}


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    qoe: QoeWeights = field(default_factory=QoeWeights)
    reward: RewardWeights = field(default_factory=RewardWeights)
    sac: SacHyper = field(default_factory=SacHyper)
    dqn: DqnSettings = field(default_factory=DqnSettings)
    method: str = "sac-gcn"
    episodes: int = 300
    eval_episodes: int = 10
    seed: int = 0
    output_dir: str = "runs"

    def violations(self) -> list[str]:
        errs = []
        if self.method not in METHODS:
            errs.append(f"method must be one of {', '.join(METHODS)} (got {self.method!r})")
        if self.episodes < 1:
            errs.append(f"episodes must be >= 1 (got {self.episodes})")
        if self.eval_episodes < 1:
            errs.append(f"eval_episodes must be >= 1 (got {self.eval_episodes})")
        if not 0 <= self.seed < 2 ** 64:
            errs.append(f"seed must be a u64 (got {self.seed})")
        for name in SECTIONS:
            errs += [f"{name}.{e}" for e in getattr(self, name).violations()]
        return errs

    def to_flat(self) -> dict:
        out = {k: getattr(self, k) for k in TOP_LEVEL}
        for name in SECTIONS:
            for k, v in getattr(self, name).to_dict().items():
                if (name, k) not in HIDDEN_KEYS:
                    out[f"{name}.{k}"] = v
        return out

    def with_env(self, **changes) -> "ExperimentConfig":
        env = EnvConfig(**{**self.env.to_dict(), **changes})
        return ExperimentConfig(env, self.qoe, self.reward, self.sac, self.dqn, self.method,
                                self.episodes, self.eval_episodes, self.seed, self.output_dir)


def key_table() -> list[tuple[str, object]]:
    """Every accepted key with its default."""
    return list(ExperimentConfig().to_flat().items())


def _key_lines(text: str) -> dict[str, int]:
    """Map dotted key -> 1-based line number, honouring [section] headers."""
    lines, section = {}, ""
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.split("#", 1)[0].strip()
        m = re.match(r"^\[([\w.\-]+)\]$", s)
        if m:
            section = m.group(1) + "."
            continue
        m = re.match(r"^([\w.\-\"]+)\s*=", s)
        if m:
            lines[section + m.group(1).replace('"', "")] = n
    return lines


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"{key} expects a boolean")
        return value
    if isinstance(default, int) or (default is None and isinstance(value, int)):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{key} expects an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{key} expects a number")
        return float(value)
    if isinstance(default, (tuple, list)):
        if not isinstance(value, list) or len(value) != len(default):
            raise TypeError(f"{key} expects a list of {len(default)} numbers")
        return tuple(_coerce(v, d, key) for v, d in zip(value, default))
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError(f"{key} expects a string")
        return value
    return value


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse config text; raises ConfigError listing every problem with line context."""
    try:
        raw = _flatten(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"{source}: {exc}"]) from None
    lines = _key_lines(text)
    where = lambda k: f"{source}:{lines[k]}" if k in lines else source
    defaults = ExperimentConfig().to_flat()
    errs, values = [], {}
    for key, value in raw.items():
        if key not in defaults:
            errs.append(f"{where(key)}: unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(value, defaults[key], key)
        except TypeError as exc:
            errs.append(f"{where(key)}: {exc}")
    cfg = ExperimentConfig()
    for name, cls in SECTIONS.items():
        sect = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(name + ".")}
        base = getattr(cfg, name).to_dict()
        if name == "env":
            base["neighbor_k"] = None    # re-derive from n_users unless given
        setattr(cfg, name, cls(**{**base, **sect}))
    for k in TOP_LEVEL:
        if k in values:
            setattr(cfg, k, values[k])
    cfg.env.seed = cfg.seed
    for msg in cfg.violations():
        key = _violation_key(msg)
        errs.append(f"{where(key)}: {msg}" if key else f"{source}: {msg}")
    if errs:
        raise ConfigError(errs)
    return cfg


def _violation_key(msg: str) -> str | None:
    m = re.match(r"^(\w+)\.(\w+)", msg)
    if m and m.group(1) in SECTIONS:
        return f"{m.group(1)}.{m.group(2)}"
    m = re.match(r"^(\w+)", msg)
    return m.group(1) if m and m.group(1) in TOP_LEVEL else None


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def serialize_config(cfg: ExperimentConfig) -> str:
    rows = []
    for k, v in cfg.to_flat().items():
        if v is None:
            rows.append(f"# {k} unset (derived)")
        else:
            rows.append(f"{k} = {_toml_value(v)}")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# metric files


@dataclass
class MetricRecord:
    run_id: str
    episode: int
    metric: str
    value: float


RECORD_FIELDS = ("run_id", "episode", "metric", "value")
SUMMARY_FIELDS = ("run_id", "metric", "count", "mean", "stddev", "min", "max")


def _sig9(x: float) -> float:
    return float(f"{x:.9g}") if math.isfinite(x) else x


def _json_num(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


def summary_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + "_summary.csv")


def emit_metrics(records: Iterable[MetricRecord], path: str | Path) -> None:
    """JSONL data file (one record per line) plus a CSV summary beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = list(records)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            obj = {"run_id": r.run_id, "episode": int(r.episode), "metric": r.metric,
                   "value": _json_num(_sig9(float(r.value)))}
            fh.write(json.dumps(obj) + "\n")
    groups: dict[tuple[str, str], list[float]] = {}
    for r in records:
        groups.setdefault((r.run_id, r.metric), []).append(float(r.value))
    with summary_path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for (run, metric), vals in groups.items():
            v = np.array(vals)
            w.writerow([run, metric, len(v)] + [f"{_sig9(float(x)):.9g}" for x in
                                                  (v.mean(), v.std(), v.min(), v.max())])


def read_metrics(path: str | Path) -> list[MetricRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                v = math.nan if d["value"] is None else float(d["value"])
                out.append(MetricRecord(d["run_id"], d["episode"], d["metric"], v))
    return out


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps({k: _json_num(v) for k, v in row.items()}) + "\n")


# ---------------------------------------------------------------------------
# train / eval


@dataclass
class TrainOutcome:
    run_dir: Path
    log: list
    model: object            # SacLearner, DqnTeam or None
    checkpoint: Path | None


def run_id(cfg: ExperimentConfig) -> str:
    return f"{cfg.method}-seed{cfg.seed}"


def _fit(cfg: ExperimentConfig, progress=None):
    if cfg.method == "sac-gcn":
        return train(cfg.env, cfg.sac, cfg.episodes, cfg.seed, cfg.qoe, cfg.reward,
                     critic_input="graph", progress=progress)
    if cfg.method == "isac":
        return train(cfg.env, cfg.sac, cfg.episodes, cfg.seed, cfg.qoe, cfg.reward,
                     critic_input="local", progress=progress)
    if cfg.method == "dqn":
        return dqn_train(cfg.env, cfg.sac, cfg.dqn, cfg.episodes, cfg.seed, cfg.qoe, cfg.reward,
                         progress=progress)
    raise ValueError(f"{cfg.method} is not learnable")


def _checkpoint_meta(cfg: ExperimentConfig, model) -> dict:
    meta = {"method": cfg.method, "version": code_version(), "seed": cfg.seed,
            "n_users": cfg.env.n_users, "neighbor_k": cfg.env.neighbor_k,
            "hidden": cfg.sac.hidden}
    if isinstance(model, SacLearner):
        meta["critic_input"] = model.critic_input
    else:
        meta["levels"] = cfg.dqn.levels
    return meta


def cmd_train(cfg: ExperimentConfig, out_dir: str | Path | None = None, progress=None) -> TrainOutcome:
    """Train (learnable methods) or just record the rule method; writes a run directory.

    The run directory holds config.toml, manifest.json, train_log.jsonl and,
    for learnable methods, model.ckpt. Wall-clock times go to timing.jsonl so
    the training log itself is reproducible byte for byte.
    """
    run_dir = Path(out_dir or cfg.output_dir) / run_id(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(serialize_config(cfg), encoding="utf-8")
    manifest = {"run_id": run_id(cfg), "method": cfg.method, "seed": cfg.seed,
                "version": code_version(), "episodes": cfg.episodes}
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    if cfg.method not in LEARNABLE:
        _write_jsonl(run_dir / "train_log.jsonl", [])
        return TrainOutcome(run_dir, [], None, None)
    result = _fit(cfg, progress)
    _write_jsonl(run_dir / "train_log.jsonl", (r.as_dict() for r in result.log))
    _write_jsonl(run_dir / "timing.jsonl",
                 ({"episode": r.episode, "wall_time": t} for r, t in zip(result.log, result.wall_times)))
    ckpt = run_dir / "model.ckpt"
    save_checkpoint(ckpt, result.learner.state_entries(), _checkpoint_meta(cfg, result.learner))
    return TrainOutcome(run_dir, result.log, result.learner, ckpt)


def model_from_checkpoint(path: str | Path, cfg: ExperimentConfig):
    """Rebuild a trained model; raises CheckpointFormatError on config mismatch."""
    meta, arrays = load_checkpoint(path)
    expected = {"n_users": cfg.env.n_users, "neighbor_k": cfg.env.neighbor_k, "hidden": cfg.sac.hidden}
    for key, want in expected.items():
        if meta.get(key) != want:
            raise CheckpointFormatError(
                f"checkpoint {key}={meta.get(key)!r} does not match config {want!r}")
    method = meta.get("method")
    try:
        if method == "dqn":
            if meta.get("levels") != cfg.dqn.levels:
                raise CheckpointFormatError("checkpoint grid levels do not match config")
            team = DqnTeam(cfg.env, cfg.sac, cfg.dqn, 0)
            team.load_arrays(arrays)
            return method, team
        if method in ("sac-gcn", "isac"):
            return method, learner_from_checkpoint(arrays, meta, cfg.env, cfg.sac)
    except KeyError as exc:
        raise CheckpointFormatError(f"checkpoint is missing array {exc}") from None
    raise CheckpointFormatError(f"unknown checkpoint method {method!r}")


def controller_for(method: str, model=None):
    if method in ("sac-gcn", "isac"):
        return SacController(model)
    if method == "dqn":
        return DqnController(model)
    rules = {"gcc-g": GccLikeController, "bbr-g": BbrLikeController,
             "uniform": UniformController, "random": RandomController}
    if method not in rules:
        raise ValueError(f"unknown method {method!r}")
    return rules[method]()


@dataclass
class EvalReport:
    method: str
    per_episode: dict[str, list[float]]       # metric -> per-episode mean
    normalized_qoe: list[float]
    util_range: tuple[float, float]           # min/max over every step of both utilizations

    def mean(self, metric: str) -> float:
        return float(np.mean(self.per_episode[metric]))

    def std(self, metric: str) -> float:
        return float(np.std(self.per_episode[metric]))

    def records(self, run: str) -> list[MetricRecord]:
        out = []
        for metric, vals in self.per_episode.items():
            out += [MetricRecord(run, ep, metric, v) for ep, v in enumerate(vals)]
        out += [MetricRecord(run, ep, "overall_qoe_normalized", v)
                for ep, v in enumerate(self.normalized_qoe)]
        return out


def evaluate_controller(controller, method: str, cfg: ExperimentConfig, seed: int | None = None) -> EvalReport:
    seed = cfg.seed if seed is None else seed
    episodes = rollout(controller, cfg.env, cfg.eval_episodes, seed, cfg.qoe, cfg.reward)
    per = {m: [float(np.mean([getattr(s, m) for s in ep])) for ep in episodes] for m in EVAL_METRICS}
    utils = [u for ep in episodes for s in ep for u in (s.util_comm, s.util_comp)]
    return EvalReport(method, per, normalize_series(per["overall_qoe"]), (min(utils), max(utils)))


def cmd_eval(cfg: ExperimentConfig, checkpoint: str | Path | None = None,
             out_dir: str | Path | None = None) -> EvalReport:
    """Evaluate a checkpoint, or the configured rule method when none is given."""
    if checkpoint is not None:
        method, model = model_from_checkpoint(checkpoint, cfg)
    else:
        method, model = cfg.method, None
        if method in LEARNABLE:
            raise ConfigError([f"method {method} needs --checkpoint for evaluation"])
    report = evaluate_controller(controller_for(method, model), method, cfg)
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        emit_metrics(report.records(f"{method}-seed{cfg.seed}"), d / "eval_metrics.jsonl")
    return report


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSpec:
    parameter: str
    values: tuple = ()

    def __post_init__(self):
        if self.parameter not in SWEEPS:
            raise ConfigError([f"sweep must be one of {', '.join(SWEEPS)} (got {self.parameter!r})"])
        if not self.values:
            self.values = SWEEPS[self.parameter]
        errs = [f"{self.parameter} value {v} outside sanity bounds"
                for v in self.values if not _sweep_sane(self.parameter, v)]
        if errs:
            raise ConfigError(errs)


def _sweep_sane(parameter: str, v: float) -> bool:
    if parameter == "delay":
        return 0 <= v <= 5000
    if parameter in ("loss", "cpu"):
        return 0 < v <= 100
    return v > 0


def sweep_config(cfg: ExperimentConfig, parameter: str, value: float, seed: int) -> ExperimentConfig:
    if parameter == "delay":
        out = cfg.with_env(base_delay=float(value))
    elif parameter == "loss":
        out = cfg.with_env(base_loss_rate=float(value) / 100.0)
    elif parameter == "bandwidth":
        out = cfg.with_env(total_bandwidth=float(value), available_cpu=0.9)
    elif parameter == "cpu":
        out = cfg.with_env(available_cpu=float(value) / 100.0, total_bandwidth=400.0)
    else:
        raise ConfigError([f"unknown sweep parameter {parameter!r}"])
    out.seed = seed
    out.env.seed = seed
    return out


@dataclass
class CompareRow:
    method: str
    parameter: str
    value: float
    metric: str
    mean: float
    stddev: float


@dataclass
class CompareResult:
    rows: list[CompareRow]
    failures: list[tuple[str, float, str]]
    warnings: list[str]
    util_range: tuple[float, float]
    reports: dict = field(default_factory=dict)   # (method, value) -> EvalReport


def trend_warnings(rows: list[CompareRow], metric: str = "overall_qoe") -> list[str]:
    """Methods whose mean metric rises anywhere along the swept axis."""
    out = []
    for method in dict.fromkeys(r.method for r in rows):
        pts = sorted((r.value, r.mean) for r in rows if r.method == method and r.metric == metric)
        for (v0, m0), (v1, m1) in zip(pts, pts[1:]):
            if m1 > m0:
                out.append(f"{method}: {metric} rises from {m0:.4g} at {v0:g} to {m1:.4g} at {v1:g}")
    return out


def cmd_compare(cfg: ExperimentConfig, sweep: SweepSpec, methods: Iterable[str],
                out_dir: str | Path | None = None, progress=None) -> CompareResult:
    """Train (if learnable) and evaluate every (method, value) cell.

    Cell ``c`` uses seed ``cfg.seed + c``. A failing cell is recorded and
    the sweep carries on.
    """
    methods = list(methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError([f"unknown method {m!r}" for m in bad])
    rows, failures, reports = [], [], {}
    lo, hi = math.inf, -math.inf
    cell = 0
    for method in methods:
        for value in sweep.values:
            ccfg = sweep_config(cfg, sweep.parameter, value, cfg.seed + cell)
            ccfg.method = method
            cell += 1
            try:
                model = _fit(ccfg).learner if method in LEARNABLE else None
                rep = evaluate_controller(controller_for(method, model), method, ccfg)
            except Exception as exc:  # noqa: BLE001 - per-cell isolation
                failures.append((method, float(value), f"{type(exc).__name__}: {exc}"))
                continue
            reports[(method, float(value))] = rep
            lo, hi = min(lo, rep.util_range[0]), max(hi, rep.util_range[1])
            for metric in EVAL_METRICS:
                rows.append(CompareRow(method, sweep.parameter, float(value), metric,
                                       rep.mean(metric), rep.std(metric)))
            if progress:
                progress(method, value, rep)
    warnings = trend_warnings(rows) if sweep.parameter == "delay" else []
    result = CompareResult(rows, failures, warnings, (lo, hi), reports)
    if out_dir is not None:
        write_compare(result, sweep, Path(out_dir))
    return result


COMPARE_FIELDS = ("method", "parameter", "value", "metric", "mean", "stddev")


def write_compare(result: CompareResult, sweep: SweepSpec, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"compare_{sweep.parameter}.csv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_FIELDS)
        for r in result.rows:
            w.writerow([r.method, r.parameter, f"{r.value:g}", r.metric,
                        f"{r.mean:.9g}", f"{r.stddev:.9g}"])
    if result.failures:
        with (out_dir / f"compare_{sweep.parameter}_failures.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("method", "value", "error"))
            w.writerows(result.failures)
    return path


def read_compare(path: str | Path) -> list[CompareRow]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return [CompareRow(r["method"], r["parameter"], float(r["value"]), r["metric"],
                           float(r["mean"]), float(r["stddev"])) for r in csv.DictReader(fh)]
