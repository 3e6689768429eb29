"""Experiment pipelines, metrics and sweeps.

One run = one (method, seed): generate data, build the oracle, cache its
zero-shot labels, train if the method trains, then score the ID and OOD
test splits. Rows are emitted in a canonical order so that results do not
depend on how runs were scheduled.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datagen import BiasSpec, Dataset, generate
from .losses import DEFAULT_ALPHA, LossMode
from .model import LinearModel, TrainConfig, init_ft, init_ft_plus, predict, train
from .oracle import ZeroShotOracle, build_oracle, cache_zero_shot_labels
from .probs import DEFAULT_TEMPERATURE, InvalidInputError, InvalidParameterError

SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "schema_version", "row_type", "method", "param_name", "param_value", "seed",
    "n_seeds", "id_accuracy", "ood_accuracy", "harmonic_mean",
)
METHODS = ("zero_shot", "ft", "ft_plus", "kd", "ensemble", "proreg")
_PARAM_NAMES = {"kd": "lambda", "ensemble": "lambda", "proreg": "alpha"}
SWEEP_PARAMETERS = {"alpha": "proreg", "kd_lambda": "kd", "ensemble_lambda": "ensemble"}

ENV_OUTPUT_DIR = "PROREG_OUTPUT_DIR"
ENV_JOBS = "PROREG_JOBS"


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, seed, cause: BaseException, partial_rows=()):
        super().__init__(f"[stage={stage} seed={seed}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.seed = seed
        self.partial_rows = list(partial_rows)


# --- metrics ---------------------------------------------------------------

def accuracy(probs, labels) -> float:
    """Top-1 accuracy; ties resolve to the lowest class index."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InvalidInputError("cannot score an empty split")
    return float(np.mean(np.argmax(probs, axis=-1) == labels))


def harmonic_mean(id_acc: float, ood_acc: float) -> float:
    for v in (id_acc, ood_acc):
        if not 0.0 <= v <= 1.0:
            raise InvalidParameterError(f"accuracy {v} outside [0, 1]")
    if id_acc + ood_acc == 0:
        return 0.0
    return 2.0 * id_acc * ood_acc / (id_acc + ood_acc)


def ensemble_predict(f_ft, y_zs, lam: float) -> np.ndarray:
    """``(1 - lam) * f_ft + lam * y_zs``."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameterError(f"ensemble lambda must be in [0, 1], got {lam}")
    f_ft = np.asarray(f_ft, dtype=np.float64)
    y_zs = np.asarray(y_zs, dtype=np.float64)
    if f_ft.shape != y_zs.shape:
        raise InvalidInputError("prediction shapes differ")
    return (1.0 - lam) * f_ft + lam * y_zs


# --- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class Method:
    name: str
    param: float | None = None
    # kd / proreg only: "prompt" starts from the zero-shot head, "random" from the FT init.
    init: str = "prompt"

    def __post_init__(self):
        if self.name not in METHODS:
            raise InvalidParameterError(f"unknown method {self.name!r}")
        if self.name in _PARAM_NAMES:
            if self.param is None:
                object.__setattr__(self, "param", DEFAULT_ALPHA if self.name == "proreg" else 0.5)
            if self.name == "proreg":
                LossMode.proreg(self.param)
            elif not 0.0 <= self.param <= 1.0:
                raise InvalidParameterError(f"{self.name} lambda must be in [0, 1]")
        elif self.param is not None:
            raise InvalidParameterError(f"method {self.name} takes no parameter")
        if self.init not in ("prompt", "random"):
            raise InvalidParameterError(f"unknown init {self.init!r}")

    @property
    def param_name(self) -> str:
        return _PARAM_NAMES.get(self.name, "")

    def loss_mode(self) -> LossMode:
        if self.name == "kd":
            return LossMode.kd(self.param)
        if self.name == "proreg":
            return LossMode.proreg(self.param)
        return LossMode.ft()

    def to_dict(self) -> dict:
        d = {"name": self.name}
        if self.param_name:
            d[self.param_name] = self.param
        if self.name in ("kd", "proreg"):
            d["init"] = self.init
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Method:
        d = dict(d)
        name = d.pop("name")
        init = d.pop("init", "prompt")
        key = _PARAM_NAMES.get(name)
        param = d.pop(key, None) if key else None
        if d:
            raise InvalidParameterError(f"unexpected method fields: {sorted(d)}")
        return cls(name, None if param is None else float(param), init)

    def __str__(self) -> str:
        return self.name if not self.param_name else f"{self.name}({self.param_name}={self.param:g})"


@dataclass(frozen=True)
class OracleConfig:
    # Puts the oracle ~7 points below FT in-domain on the reference task.
    sigma: float = 0.2
    # None: use the model temperature.
    temperature: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    bias: BiasSpec = field(default_factory=BiasSpec)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    method: Method = field(default_factory=lambda: Method("proreg"))
    train: TrainConfig = field(default_factory=TrainConfig)
    temperature: float = DEFAULT_TEMPERATURE
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise InvalidParameterError("need at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def oracle_temperature(self) -> float:
        return self.temperature if self.oracle.temperature is None else self.oracle.temperature

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        del train["mode"], train["seed"]
        return {
            "schema_version": SCHEMA_VERSION,
            "bias": {k: v for k, v in self.bias.to_dict().items() if k != "seed"},
            "oracle": asdict(self.oracle),
            "method": self.method.to_dict(),
            "train": train,
            "temperature": self.temperature,
            "seeds": list(self.seeds),
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise InvalidParameterError(f"unsupported config schema_version {version!r}")
        known = {"schema_version", "bias", "oracle", "method", "train", "temperature", "seeds", "output"}
        extra = set(d) - known
        if extra:
            raise InvalidParameterError(f"unknown config keys: {sorted(extra)}")
        train = dict(d.get("train", {}))
        for key in ("mode", "seed"):
            if key in train:
                raise InvalidParameterError(f"train.{key} is set per run; use method / seeds instead")
        oracle = d.get("oracle", {})
        unknown = set(oracle) - {f.name for f in fields(OracleConfig)}
        if unknown:
            raise InvalidParameterError(f"unknown oracle keys: {sorted(unknown)}")
        return cls(
            bias=BiasSpec.from_dict(d.get("bias", {})),
            oracle=OracleConfig(**oracle),
            method=Method.from_dict(d.get("method", {"name": "proreg"})),
            train=TrainConfig(**train),
            temperature=float(d.get("temperature", DEFAULT_TEMPERATURE)),
            seeds=tuple(d.get("seeds", (0, 1, 2, 3, 4))),
            output=d.get("output"),
        )

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_method(self, method: Method) -> ExperimentConfig:
        return replace(self, method=method)


def default_config(**overrides) -> ExperimentConfig:
    """The reference synthetic task: K=5, 10+10 dims, 2000/1000/1000 samples."""
    return replace(ExperimentConfig(), **overrides)


# --- single runs -----------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    method: str
    param_name: str
    param_value: float | None
    seed: int
    id_accuracy: float
    ood_accuracy: float
    harmonic_mean: float
    wall_time: float = field(default=0.0, compare=False)

    def sort_key(self):
        return (METHODS.index(self.method),
                -math.inf if self.param_value is None else self.param_value, self.seed)


@dataclass(frozen=True, eq=False)
class RunArtifacts:
    dataset: Dataset
    oracle: ZeroShotOracle
    model: LinearModel | None


def prepare_data(config: ExperimentConfig, seed: int) -> tuple[Dataset, ZeroShotOracle]:
    spec = replace(config.bias, seed=seed)
    oracle = build_oracle(spec, config.oracle.sigma, seed, config.oracle_temperature)
    return cache_zero_shot_labels(oracle, generate(spec)), oracle


def _initial_model(config: ExperimentConfig, method: Method, oracle: ZeroShotOracle, seed: int) -> LinearModel:
    prompt_init = method.name == "ft_plus" or (method.name in ("kd", "proreg") and method.init == "prompt")
    if prompt_init:
        return init_ft_plus(oracle.class_embeddings, config.temperature, oracle.class_count)
    return init_ft(oracle.feature_dim, oracle.class_count, seed, config.temperature)


def fit(config: ExperimentConfig, dataset: Dataset, oracle: ZeroShotOracle, seed: int,
        method: Method | None = None) -> LinearModel:
    """Train the head for ``method`` (defaults to the config's) on the train split."""
    method = method or config.method
    if method.name == "ensemble":
        method = Method("ft")
    model = _initial_model(config, method, oracle, seed)
    tc = replace(config.train, mode=method.loss_mode(), seed=seed)
    tr = dataset.split("train")
    model, _ = train(model, tr.x, tr.labels, tr.y_zs, tc)
    return model


def split_predictions(method: Method, dataset: Dataset, model: LinearModel | None, split: str) -> np.ndarray:
    view = dataset.split(split)
    if method.name == "zero_shot":
        return view.y_zs
    probs = predict(model, view.x)
    if method.name == "ensemble":
        return ensemble_predict(probs, view.y_zs, method.param)
    return probs


def run_seed(config: ExperimentConfig, seed: int, keep: bool = False):
    """Run one seed. Returns a MetricsRow, or ``(row, RunArtifacts)`` if ``keep``."""
    start = time.perf_counter()
    method = config.method
    stage = "data"
    try:
        dataset, oracle = prepare_data(config, seed)
        stage = "train"
        model = None if method.name == "zero_shot" else fit(config, dataset, oracle, seed)
        stage = "evaluate"
        id_acc = accuracy(split_predictions(method, dataset, model, "id_test"),
                          dataset.split("id_test").labels)
        ood_acc = accuracy(split_predictions(method, dataset, model, "ood_test"),
                           dataset.split("ood_test").labels)
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(stage, seed, exc) from exc
    row = MetricsRow(method.name, method.param_name, method.param, seed, id_acc, ood_acc,
                     harmonic_mean(id_acc, ood_acc), time.perf_counter() - start)
    if keep:
        return row, RunArtifacts(dataset, oracle, model)
    return row


def _run_job(job):
    config, seed = job
    return run_seed(config, seed)


def jobs_from_env(default: int = 1) -> int:
    raw = os.environ.get(ENV_JOBS)
    if not raw:
        return default
    jobs = int(raw)
    if jobs < 1:
        raise InvalidParameterError(f"{ENV_JOBS} must be >= 1")
    return jobs


def run_many(configs: Iterable[ExperimentConfig], jobs: int | None = None) -> list[MetricsRow]:
    """All seeds of all configs, independent jobs, merged in canonical order."""
    work = [(cfg, seed) for cfg in configs for seed in cfg.seeds]
    jobs = jobs_from_env() if jobs is None else jobs
    rows: list[MetricsRow] = []
    if jobs <= 1:
        try:
            for job in work:
                rows.append(_run_job(job))
        except ExperimentError as exc:
            exc.partial_rows = sorted(rows, key=MetricsRow.sort_key)
            raise
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_job, job) for job in work]
            error = None
            for fut in futures:
                try:
                    rows.append(fut.result())
                except ExperimentError as exc:
                    error = error or exc
            if error is not None:
                error.partial_rows = sorted(rows, key=MetricsRow.sort_key)
                raise error
    return sorted(rows, key=MetricsRow.sort_key)


def run_experiment(config: ExperimentConfig, jobs: int | None = None) -> list[MetricsRow]:
    return run_many([config], jobs)


def sweep(template: ExperimentConfig, parameter: str, grid: Sequence[float],
          jobs: int | None = None) -> list[MetricsRow]:
    """One run per grid value per seed, varying ProReg alpha, KD lambda or ensemble lambda."""
    if parameter not in SWEEP_PARAMETERS:
        raise InvalidParameterError(f"unknown sweep parameter {parameter!r}; use one of {sorted(SWEEP_PARAMETERS)}")
    if not grid:
        raise InvalidParameterError("empty grid")
    name = SWEEP_PARAMETERS[parameter]
    init = template.method.init
    configs = [template.with_method(Method(name, float(v), init)) for v in grid]
    return run_many(configs, jobs)


KD_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
ENSEMBLE_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
ALPHA_GRID = (0.5, 1.0, 2.0, 4.0, 8.0)


def compare_methods(template: ExperimentConfig, alpha: float = DEFAULT_ALPHA,
                    kd_grid: Sequence[float] = KD_GRID, ensemble_grid: Sequence[float] = ENSEMBLE_GRID,
                    jobs: int | None = None) -> list[MetricsRow]:
    """Zero-shot, FT, FT++, the KD and ensemble grids and ProReg on shared seeds."""
    init = template.method.init
    methods = [Method("zero_shot"), Method("ft"), Method("ft_plus")]
    methods += [Method("kd", float(v), init) for v in kd_grid]
    methods += [Method("ensemble", float(v)) for v in ensemble_grid]
    methods.append(Method("proreg", float(alpha), init))
    return run_many([template.with_method(m) for m in methods], jobs)


# --- aggregation and CSV ---------------------------------------------------

@dataclass(frozen=True)
class GroupStats:
    method: str
    param_name: str
    param_value: float | None
    n_seeds: int
    mean: dict
    std: dict

    @property
    def label(self) -> str:
        return self.method if not self.param_name else f"{self.method}({self.param_name}={self.param_value:g})"


_METRICS = ("id_accuracy", "ood_accuracy", "harmonic_mean")


def aggregate(rows: Sequence[MetricsRow]) -> list[GroupStats]:
    """Mean and sample standard deviation per (method, param) over seeds."""
    groups: dict = {}
    for r in sorted(rows, key=MetricsRow.sort_key):
        groups.setdefault((r.method, r.param_name, r.param_value), []).append(r)
    out = []
    for (method, pname, pval), members in groups.items():
        mean, std = {}, {}
        for m in _METRICS:
            vals = np.array([getattr(r, m) for r in members])
            mean[m] = float(vals.mean())
            std[m] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(GroupStats(method, pname, pval, len(members), mean, std))
    return out


def best_in_grid(stats: Sequence[GroupStats], method: str, metric: str = "harmonic_mean") -> GroupStats:
    """Grid point with the highest mean ``metric``; ties keep the smallest parameter."""
    candidates = [s for s in stats if s.method == method]
    if not candidates:
        raise InvalidParameterError(f"no rows for method {method!r}")
    best = candidates[0]
    for s in candidates[1:]:
        if s.mean[metric] > best.mean[metric]:
            best = s
    return best


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(rows: Sequence[MetricsRow], with_aggregates: bool = True,
                truncated: str | None = None) -> str:
    """CSV text for ``rows`` (canonical order) plus optional mean/std rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    rows = sorted(rows, key=MetricsRow.sort_key)
    for r in rows:
        w.writerow([SCHEMA_VERSION, "run", r.method, r.param_name, _fmt(r.param_value), r.seed, 1,
                    _fmt(r.id_accuracy), _fmt(r.ood_accuracy), _fmt(r.harmonic_mean)])
    if with_aggregates:
        for s in aggregate(rows):
            for kind, values in (("mean", s.mean), ("std", s.std)):
                w.writerow([SCHEMA_VERSION, kind, s.method, s.param_name, _fmt(s.param_value), "",
                            s.n_seeds, *(_fmt(values[m]) for m in _METRICS)])
    if truncated is not None:
        buf.write(f"# TRUNCATED: {truncated}\n")
    return buf.getvalue()


def write_results(path, rows: Sequence[MetricsRow], with_aggregates: bool = True,
                  truncated: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(results_csv(rows, with_aggregates, truncated))
    return path


def write_timings(path, rows: Sequence[MetricsRow]) -> None:
    """Wall times live in a separate file so result CSVs stay byte-reproducible."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "param_name", "param_value", "seed", "wall_time"))
        for r in sorted(rows, key=MetricsRow.sort_key):
            w.writerow((r.method, r.param_name, _fmt(r.param_value), r.seed, f"{r.wall_time:.6f}"))


def read_results(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def resolve_output(path: str | os.PathLike | None, default_name: str) -> Path:
    """Relative outputs land under $PROREG_OUTPUT_DIR when it is set."""
    p = Path(path) if path else Path(default_name)
    base = os.environ.get(ENV_OUTPUT_DIR)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p
