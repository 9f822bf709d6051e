"""Experiment orchestration: protocol loops, result tables, and report files.

Runs are deterministic functions of (config, seed): per-cell training and
evaluation seeds are derived from the master seed and the cell coordinates,
and the results CSV contains no timing, so two identical runs produce byte
identical CSV files. Wall-clock timings go to the JSON report only.
"""
from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .adapt import AdaptConfig, EvalConfig, evofa_test
from .autodiff import Tensor
from .backbone import BackboneConfig, Model
from .data import (
    DatasetIndex,
    DriftConfig,
    LabeledSample,
    generate_synthetic_drift,
    import_features,
    make_inter_split,
    make_intra_split,
)
from .errors import ConfigError, ProtocolError
from .fsl import (
    SupervisedConfig,
    TrainConfig,
    classify_pool,
    meta_train,
    train_supervised_baseline,
)
from .mmd import KernelSpec

METHODS = ("supervised", "fsl", "fsl+evofa")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: dataset, protocol, training recipe, adaptation recipe."""

    dataset: DriftConfig | str  # synthetic generator config or a manifest path
    protocol: str = "intra"
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    supervised: SupervisedConfig | None = None
    eval_episodes: int = 200
    seed: int = 0
    subjects: tuple[int, ...] = ()  # empty: every subject in the dataset
    sessions: tuple[int, ...] = ()  # inter protocol; empty: every session
    persist_adaptation: bool = False
    include_supervised: bool = True

    def __post_init__(self):
        if self.protocol not in ("intra", "inter"):
            raise ConfigError(f"protocol must be intra or inter, got {self.protocol!r}")
        if self.eval_episodes < 1:
            raise ConfigError(f"eval_episodes must be positive, got {self.eval_episodes}")


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from the master seed and cell coordinates."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def load_dataset(cfg: ExperimentConfig) -> DatasetIndex:
    if isinstance(cfg.dataset, DriftConfig):
        return generate_synthetic_drift(cfg.dataset)
    return import_features(cfg.dataset)


def _check_compatible(cfg: ExperimentConfig, ds: DatasetIndex) -> None:
    if cfg.train.way > ds.num_classes:
        raise ConfigError(
            f"{cfg.train.way}-way episodes need at least that many classes, "
            f"dataset has {ds.num_classes}"
        )
    schema = (cfg.train.backbone.n_electrodes, cfg.train.backbone.d_bands)
    if schema != ds.schema:
        raise ConfigError(f"backbone expects features {schema}, dataset provides {ds.schema}")


# -- result table -----------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    """One evaluated cell (or the aggregate across cells, subject == 'all')."""

    protocol: str
    subject: str
    session: str
    method: str
    shots: int
    way: int
    queries: int
    episodes: int
    mean_accuracy: float
    std_accuracy: float
    std_over: str  # episodes | subjects | pool
    wall_clock_seconds: float

    def __post_init__(self):
        if not (0.0 <= self.mean_accuracy <= 1.0):
            raise ConfigError(f"accuracy {self.mean_accuracy} outside [0, 1]")
        if self.std_accuracy < 0.0:
            raise ConfigError(f"negative std {self.std_accuracy}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")


CSV_COLUMNS = (
    "protocol",
    "subject",
    "session",
    "method",
    "shots",
    "way",
    "queries",
    "episodes",
    "mean_accuracy",
    "std_accuracy",
    "std_over",
)


def _fmt(value) -> str:
    return f"{value:.12g}" if isinstance(value, float) else str(value)


@dataclass
class ResultTable:
    """Per-cell rows followed by aggregate rows; CSV omits wall-clock for determinism."""

    rows: list[ResultRow]

    def cell_rows(self) -> list[ResultRow]:
        return [r for r in self.rows if r.subject != "all"]

    def aggregate_rows(self) -> list[ResultRow]:
        return [r for r in self.rows if r.subject == "all"]

    @staticmethod
    def aggregate(cell_rows: list[ResultRow]) -> list[ResultRow]:
        """Mean and across-subject std per (method, shots), in first-seen order."""
        order: list[tuple[str, int]] = []
        groups: dict[tuple[str, int], list[ResultRow]] = {}
        for row in cell_rows:
            key = (row.method, row.shots)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(row)
        out = []
        for key in order:
            members = groups[key]
            means = np.array([r.mean_accuracy for r in members])
            out.append(
                ResultRow(
                    protocol=members[0].protocol,
                    subject="all",
                    session="all",
                    method=key[0],
                    shots=key[1],
                    way=members[0].way,
                    queries=members[0].queries,
                    episodes=sum(r.episodes for r in members),
                    mean_accuracy=float(means.mean()),
                    std_accuracy=float(means.std()),
                    std_over="subjects",
                    wall_clock_seconds=sum(r.wall_clock_seconds for r in members),
                )
            )
        return out

    def with_aggregates(self) -> "ResultTable":
        return ResultTable(self.cell_rows() + ResultTable.aggregate(self.cell_rows()))

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([_fmt(getattr(row, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_json_obj(self) -> dict:
        return {
            "version": f"evofa-{__version__}",
            "std_semantics": {
                "episodes": "population std of per-episode accuracy",
                "subjects": "population std of per-subject mean accuracy",
                "pool": "single whole-pool evaluation, std not defined (0)",
            },
            "rows": [asdict(r) for r in self.rows],
        }

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        csv_path = out / "results.csv"
        json_path = out / "results.json"
        _atomic_write_text(csv_path, self.to_csv_text())
        _atomic_write_text(json_path, json.dumps(self.to_json_obj(), indent=2) + "\n")
        return csv_path, json_path


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_run_manifest(out_dir: str | Path, cfg: ExperimentConfig) -> Path:
    path = Path(out_dir) / "run-manifest.json"
    manifest = {
        "version": f"evofa-{__version__}",
        "seed": cfg.seed,
        "config": config_to_obj(cfg),
        "created_unix": time.time(),
    }
    _atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")
    return path


# -- protocol execution ----------------------------------------------------------------


def _thread_count() -> int:
    raw = os.environ.get("EVOFA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"EVOFA_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"EVOFA_THREADS must be at least 1, got {n}")
    return n


def _plan_cells(cfg: ExperimentConfig, ds: DatasetIndex) -> list[tuple[int, int | None]]:
    subjects = list(cfg.subjects) if cfg.subjects else ds.subjects()
    for s in subjects:
        if s not in ds.subjects():
            raise ProtocolError(f"subject {s} not in dataset")
    if cfg.protocol == "intra":
        return [(s, None) for s in subjects]
    sessions = list(cfg.sessions) if cfg.sessions else sorted(
        {s.session_id for s in ds.samples}
    )
    return [(subj, sess) for sess in sessions for subj in subjects]


def _split_for_cell(cfg, ds, subject, session):
    if cfg.protocol == "intra":
        return make_intra_split(ds, subject)
    rng = np.random.default_rng([cfg.seed, 3, session, subject])
    return make_inter_split(ds, session, subject, rng)


def _train_models(cfg, ds, pools, subject, session):
    """Meta-trained episodic model plus (optionally) the supervised baseline."""
    train, val, _ = pools
    sess = 0 if session is None else 1 + session
    tcfg = replace(cfg.train, rng_seed=derive_seed(cfg.seed, 1, subject, sess))
    t0 = time.perf_counter()
    model = meta_train(train, val, tcfg)
    train_seconds = time.perf_counter() - t0
    supervised = None
    sup_seconds = 0.0
    if cfg.include_supervised:
        base = cfg.supervised if cfg.supervised is not None else SupervisedConfig(
            backbone=cfg.train.backbone, num_classes=ds.num_classes
        )
        scfg = replace(base, rng_seed=derive_seed(cfg.seed, 4, subject, sess))
        t0 = time.perf_counter()
        supervised = train_supervised_baseline(train, val, scfg)
        sup_seconds = time.perf_counter() - t0
    return model, train_seconds, supervised, sup_seconds


def _run_cell(cfg: ExperimentConfig, ds: DatasetIndex, subject: int, session: int | None):
    split = _split_for_cell(cfg, ds, subject, session)
    pools = tuple(split.select(ds, part) for part in ("train", "val", "test"))
    train, _, test = pools
    model, train_seconds, supervised, sup_seconds = _train_models(
        cfg, ds, pools, subject, session
    )
    sess = 0 if session is None else 1 + session
    eval_cfg = EvalConfig(
        episodes=cfg.eval_episodes,
        way=cfg.train.way,
        shot=cfg.train.shot,
        queries=cfg.train.queries,
        rng_seed=derive_seed(cfg.seed, 2, subject, sess),
        persist_adaptation=cfg.persist_adaptation,
    )
    session_label = str(session) if session is not None else "3"  # intra tests session 3
    common = dict(
        protocol=cfg.protocol,
        subject=str(subject),
        session=session_label,
        way=eval_cfg.way,
        queries=eval_cfg.queries,
    )
    rows = []
    if supervised is not None:
        t0 = time.perf_counter()
        _, acc = classify_pool(supervised, test)
        rows.append(
            ResultRow(
                method="supervised",
                shots=0,
                episodes=0,
                mean_accuracy=acc,
                std_accuracy=0.0,
                std_over="pool",
                wall_clock_seconds=sup_seconds + time.perf_counter() - t0,
                **common,
            )
        )
    t0 = time.perf_counter()
    base = evofa_test(model, test, train, cfg.protocol, eval_cfg, None)
    base_seconds = time.perf_counter() - t0
    rows.append(
        ResultRow(
            method="fsl",
            shots=eval_cfg.shot,
            episodes=base.episodes,
            mean_accuracy=base.mean_accuracy,
            std_accuracy=base.std_accuracy,
            std_over="episodes",
            wall_clock_seconds=train_seconds + base_seconds,
            **common,
        )
    )
    t0 = time.perf_counter()
    adapted = evofa_test(model, test, train, cfg.protocol, eval_cfg, cfg.adapt)
    rows.append(
        ResultRow(
            method="fsl+evofa",
            shots=eval_cfg.shot,
            episodes=adapted.episodes,
            mean_accuracy=adapted.mean_accuracy,
            std_accuracy=adapted.std_accuracy,
            std_over="episodes",
            wall_clock_seconds=time.perf_counter() - t0,
            **common,
        )
    )
    return rows


def _run_cells(worker, cells) -> list:
    threads = min(_thread_count(), len(cells)) if cells else 1
    if threads <= 1:
        return [worker(*cell) for cell in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(worker, *cell) for cell in cells]
        return [f.result() for f in futures]  # submission order keeps output stable


def run_protocol(cfg: ExperimentConfig, ds: DatasetIndex | None = None) -> ResultTable:
    """Train and evaluate every protocol cell; baseline and adapted runs share episodes."""
    if ds is None:
        ds = load_dataset(cfg)
    _check_compatible(cfg, ds)
    cells = _plan_cells(cfg, ds)
    per_cell = _run_cells(lambda subj, sess: _run_cell(cfg, ds, subj, sess), cells)
    rows = [row for rows in per_cell for row in rows]
    return ResultTable(rows).with_aggregates()


def shot_sweep(
    cfg: ExperimentConfig,
    shots: list[int],
    ds: DatasetIndex | None = None,
    include_adapted: bool = False,
) -> ResultTable:
    """Evaluate each cell's trained model at several support sizes K."""
    if not shots:
        raise ConfigError("shot sweep needs at least one shot count")
    if any(k < 1 for k in shots):
        raise ConfigError(f"shot counts must be positive, got {shots}")
    if ds is None:
        ds = load_dataset(cfg)
    _check_compatible(cfg, ds)
    cells = _plan_cells(cfg, ds)

    def sweep_cell(subject, session):
        split = _split_for_cell(cfg, ds, subject, session)
        pools = tuple(split.select(ds, part) for part in ("train", "val", "test"))
        train, _, test = pools
        model, train_seconds, _, _ = _train_models(
            replace(cfg, include_supervised=False), ds, pools, subject, session
        )
        sess = 0 if session is None else 1 + session
        rows = []
        for k in shots:
            eval_cfg = EvalConfig(
                episodes=cfg.eval_episodes,
                way=cfg.train.way,
                shot=k,
                queries=cfg.train.queries,
                rng_seed=derive_seed(cfg.seed, 2, subject, sess, k),
                persist_adaptation=cfg.persist_adaptation,
            )
            plans = [("fsl", None)] + ([("fsl+evofa", cfg.adapt)] if include_adapted else [])
            for method, adapt_cfg in plans:
                t0 = time.perf_counter()
                report = evofa_test(model, test, train, cfg.protocol, eval_cfg, adapt_cfg)
                rows.append(
                    ResultRow(
                        protocol=cfg.protocol,
                        subject=str(subject),
                        session=str(session) if session is not None else "3",
                        method=method,
                        shots=k,
                        way=eval_cfg.way,
                        queries=eval_cfg.queries,
                        episodes=report.episodes,
                        mean_accuracy=report.mean_accuracy,
                        std_accuracy=report.std_accuracy,
                        std_over="episodes",
                        wall_clock_seconds=train_seconds + time.perf_counter() - t0,
                    )
                )
        return rows

    per_cell = _run_cells(sweep_cell, cells)
    rows = [row for rows in per_cell for row in rows]
    return ResultTable(rows).with_aggregates()


def export_embeddings(model: Model, pool: list[LabeledSample], path: str | Path) -> Path:
    """Write one CSV row per sample: identity columns, label, then the embedding."""
    dim = model.config.embedding_dim
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["subject", "session", "trial", "time_index", "label"] + [f"e{i + 1}" for i in range(dim)]
    )
    for start in range(0, len(pool), 64):
        chunk = pool[start : start + 64]
        feats = np.stack([s.features for s in chunk])
        with ad.no_grad():
            emb = model.embed(Tensor(feats), mode="eval").data
        for s, row in zip(chunk, emb):
            writer.writerow(
                [s.subject_id, s.session_id, s.trial_id, s.time_index, s.label]
                + [f"{v:.12g}" for v in row]
            )
    path = Path(path)
    _atomic_write_text(path, buf.getvalue())
    return path


# -- config (de)serialization ------------------------------------------------------


def config_to_obj(cfg: ExperimentConfig) -> dict:
    """JSON-ready dict mirroring experiment_config_from_obj."""
    if isinstance(cfg.dataset, DriftConfig):
        dataset = {"synthetic": asdict(cfg.dataset)}
    else:
        dataset = {"import": str(cfg.dataset)}
    train = asdict(cfg.train)
    backbone = train.pop("backbone")
    backbone["conv_channels"] = list(backbone["conv_channels"])
    adapt = asdict(cfg.adapt)
    if isinstance(cfg.adapt.kernel, KernelSpec):
        adapt["kernel"] = {
            "bandwidths": list(cfg.adapt.kernel.bandwidths),
            "weights": list(cfg.adapt.kernel.weights),
        }
    supervised = None
    if cfg.supervised is not None:
        supervised = asdict(cfg.supervised)
        supervised.pop("backbone")  # the experiment backbone is shared
    return {
        "dataset": dataset,
        "protocol": cfg.protocol,
        "backbone": backbone,
        "train": train,
        "adapt": adapt,
        "supervised": supervised,
        "eval_episodes": cfg.eval_episodes,
        "seed": cfg.seed,
        "subjects": list(cfg.subjects),
        "sessions": list(cfg.sessions),
        "persist_adaptation": cfg.persist_adaptation,
        "include_supervised": cfg.include_supervised,
    }


def _take(obj: dict, what: str, allowed: set[str]) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")


def experiment_config_from_obj(obj: dict) -> ExperimentConfig:
    """Parse a config dict (from JSON); unknown keys are rejected."""
    if not isinstance(obj, dict):
        raise ConfigError(f"experiment config must be an object, got {type(obj).__name__}")
    allowed = {
        "dataset",
        "protocol",
        "backbone",
        "train",
        "adapt",
        "supervised",
        "eval_episodes",
        "seed",
        "subjects",
        "sessions",
        "persist_adaptation",
        "include_supervised",
    }
    _take(obj, "config", allowed)
    try:
        dataset_obj = obj["dataset"]
    except KeyError:
        raise ConfigError("config needs a dataset entry")
    if not isinstance(dataset_obj, dict) or len(dataset_obj) != 1:
        raise ConfigError('dataset must be {"synthetic": {...}} or {"import": "path"}')

    def build(factory, what, **kwargs):
        try:
            return factory(**kwargs)
        except TypeError as e:
            raise ConfigError(f"bad {what} config: {e}") from e

    if "synthetic" in dataset_obj:
        dataset = build(DriftConfig, "synthetic dataset", **dataset_obj["synthetic"])
    elif "import" in dataset_obj:
        dataset = str(dataset_obj["import"])
    else:
        raise ConfigError('dataset must be {"synthetic": {...}} or {"import": "path"}')
    backbone_obj = dict(obj.get("backbone", {}))
    if "conv_channels" in backbone_obj:
        backbone_obj["conv_channels"] = tuple(backbone_obj["conv_channels"])
    backbone = build(BackboneConfig, "backbone", **backbone_obj)
    train_obj = dict(obj.get("train", {}))
    train_obj.pop("backbone", None)
    train = build(TrainConfig, "train", backbone=backbone, **train_obj)
    adapt_obj = dict(obj.get("adapt", {}))
    kernel = adapt_obj.get("kernel")
    if isinstance(kernel, dict):
        adapt_obj["kernel"] = KernelSpec(
            bandwidths=tuple(kernel.get("bandwidths", ())),
            weights=tuple(kernel.get("weights", ())),
        )
    adapt = build(AdaptConfig, "adapt", **adapt_obj)
    supervised = None
    if obj.get("supervised") is not None:
        sup_obj = dict(obj["supervised"])
        sup_obj.pop("backbone", None)
        supervised = build(SupervisedConfig, "supervised", backbone=backbone, **sup_obj)
    try:
        return ExperimentConfig(
            dataset=dataset,
            protocol=obj.get("protocol", "intra"),
            train=train,
            adapt=adapt,
            supervised=supervised,
            eval_episodes=obj.get("eval_episodes", 200),
            seed=obj.get("seed", 0),
            subjects=tuple(obj.get("subjects", ())),
            sessions=tuple(obj.get("sessions", ())),
            persist_adaptation=bool(obj.get("persist_adaptation", False)),
            include_supervised=bool(obj.get("include_supervised", True)),
        )
    except TypeError as e:
        raise ConfigError(f"bad experiment config: {e}") from e


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return experiment_config_from_obj(obj)
