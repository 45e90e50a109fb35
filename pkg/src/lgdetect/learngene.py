"""Sequential collective training, gradient significance, learngene extraction and expansion.

Significant layers are the middle convolutions ``conv1..conv{n_conv}`` of an
SDNet; id 1 is nearest the input and id ``n_conv`` nearest the output
("bottom"). A learngene unit is a contiguous run of those layers' kernels and
biases. BatchNorm parameters are never part of a unit.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .channel import TaskDataset
from .errors import EmptyLog, ShapeMismatch, StrategyUnavailable
from .neuralnet import Model, ModelSpec, count_params
from .numerics import rng_stream
from .sdnet import GradRecord, TrainConfig, TrainResult, build_sdnet, train_on_task

log = logging.getLogger(__name__)


def gradient_significance(record: GradRecord, tau: float, layers: list[str]) -> np.ndarray:
    """Fraction of each layer's parameters whose mean |gradient| exceeds ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return np.array([float(np.mean(record.layer(name) > tau)) for name in layers])


@dataclass
class GradSigLog:
    """``rho[l, k]`` for significant layer ``l + 1`` after task column ``k``."""

    rho: np.ndarray  # (n_conv, K)
    tau: float
    epochs_per_task: int
    task_ids: list[int] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return self.rho.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.rho.shape[1]

    def append(self, column: np.ndarray, task_id: int) -> None:
        self.rho = np.concatenate([self.rho, np.asarray(column, dtype=np.float64)[:, None]], axis=1)
        self.task_ids.append(int(task_id))

    def to_csv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        for key, value in (header or {}).items():
            buf.write(f"# {key}: {value}\n")
        buf.write(f"# tau: {self.tau!r}\n# epochs_per_task: {self.epochs_per_task}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer"] + [f"task_{t}" for t in self.task_ids])
        for layer in range(self.n_layers):
            writer.writerow([layer + 1] + [repr(float(v)) for v in self.rho[layer]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GradSigLog":
        meta = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            elif line.strip():
                rows.append(line)
        table = list(csv.reader(rows))
        task_ids = [int(c.split("_", 1)[1]) for c in table[0][1:]]
        rho = np.array([[float(v) for v in r[1:]] for r in table[1:]]).reshape(len(table) - 1, len(task_ids))
        return cls(rho, float(meta.get("tau", "nan")), int(meta.get("epochs_per_task", 0)), task_ids)


@dataclass
class CollectiveResult:
    model: Model
    gradsig: GradSigLog
    logs: list[dict]
    records: list[GradRecord]


def train_collective(
    tasks: list[TaskDataset],
    cfg: TrainConfig,
    n_conv: int = 12,
    tau: float = 1e-4,
    init_seed: int = 0,
) -> CollectiveResult:
    """Train one SDNet on ``tasks`` in order, carrying parameters across tasks.

    Optimizer state restarts at every task boundary (each task is a fresh
    :func:`train_on_task` call). A significance column is appended per task from
    that task's final-epoch gradient record.
    """
    if not tasks:
        raise ValueError("need at least one task")
    nt = tasks[0].channel_cfg.nt
    nr = tasks[0].channel_cfg.nr
    spec = build_sdnet(n_conv, nt, nr)
    spec.meta["role"] = "collective"
    model = Model.initialize(spec, rng_stream(init_seed, "init-collective"))
    layers = [f"conv{i}" for i in range(1, n_conv + 1)]
    gradsig = GradSigLog(np.zeros((n_conv, 0)), tau, cfg.epochs)
    logs: list[dict] = []
    records: list[GradRecord] = []
    for k, task in enumerate(tasks):
        result: TrainResult = train_on_task(model, task, replace(cfg, seed=cfg.seed + k), scheme="collective")
        model = result.model
        logs.extend(result.log)
        if result.grad_record is not None:
            records.append(result.grad_record)
            gradsig.append(gradient_significance(result.grad_record, tau, layers), task.task_id)
        log.info("collective task %d/%d (id %d) done", k + 1, len(tasks), task.task_id)
    return CollectiveResult(model, gradsig, logs, records)


@dataclass
class ExtractionPolicy:
    tau: float = 1e-4
    window: int | None = None  # defaults to max(3, K // 2)
    rho_sel: float = 0.05
    m_max: int = 4


def _slope(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    x = np.arange(values.size, dtype=np.float64)
    x -= x.mean()
    return float(np.dot(x, values - values.mean()) / np.dot(x, x))


@dataclass
class LearngeneUnit:
    layer_ids: list[int]
    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    source_hash: str = ""
    policy: dict = field(default_factory=dict)
    history: list[list[float]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.layer_ids)

    @property
    def n_params(self) -> int:
        return int(sum(k.size + b.size for k, b in zip(self.kernels, self.biases)))

    def manifest(self) -> dict:
        return {
            "layer_ids": self.layer_ids,
            "n_params": self.n_params,
            "source_hash": self.source_hash,
            "policy": self.policy,
            "history": self.history,
            "warnings": self.warnings,
            "bn_blocks": 0,
            **self.meta,
        }


def extract_learngene(model: Model, gradsig: GradSigLog, policy: ExtractionPolicy = ExtractionPolicy()) -> LearngeneUnit:
    """Select the learngene layers from the significance history and copy them out.

    A layer is eligible when the least-squares slope of its significance over
    the last ``window`` tasks is not positive and its final value is at most
    ``rho_sel``. The unit is the longest run of eligible layers ending at the
    deepest significant layer, keeping at most ``m_max`` of the deepest. When
    that run is empty, the ``m_max`` deepest layers are taken and a warning is
    recorded, so the unit is always a contiguous suffix.
    """
    if gradsig.n_tasks == 0:
        raise EmptyLog("gradient-significance log has no task columns")
    n, k = gradsig.n_layers, gradsig.n_tasks
    window = policy.window or max(3, k // 2)
    window = min(window, k)
    recent = gradsig.rho[:, k - window :]
    slopes = np.array([_slope(row) for row in recent])
    final = gradsig.rho[:, -1]
    eligible = (slopes <= 0) & (final <= policy.rho_sel)
    ids: list[int] = []
    for layer in range(n, 0, -1):
        if not eligible[layer - 1] or len(ids) == policy.m_max:
            break
        ids.insert(0, layer)
    warnings = []
    if not ids:
        m = min(policy.m_max, n)
        ids = list(range(n - m + 1, n + 1))
        warnings.append(f"no eligible suffix (rho_sel={policy.rho_sel}); fell back to layers {ids[0]}-{ids[-1]}")
        log.warning(warnings[-1])
    return LearngeneUnit(
        layer_ids=ids,
        kernels=[model.params[f"conv{i}/kernel"].copy() for i in ids],
        biases=[model.params[f"conv{i}/bias"].copy() for i in ids],
        source_hash=model.content_hash(),
        policy={**asdict(policy), "window": window},
        history=[[float(v) for v in gradsig.rho[i - 1]] for i in ids],
        warnings=warnings,
        meta={"n_conv_source": n, "slopes": [float(s) for s in slopes], "final_rho": [float(v) for v in final]},
    )


def save_unit(unit: LearngeneUnit, path: str | Path, extra: dict | None = None) -> dict:
    arrays = []
    for lid, kern, bias in zip(unit.layer_ids, unit.kernels, unit.biases):
        arrays += [(f"sig{lid}/kernel", kern), (f"sig{lid}/bias", bias)]
    manifest = unit.manifest()
    if extra:
        manifest.update(extra)
    return container.write_container(path, "learngene", manifest, arrays)


def load_unit(path: str | Path) -> LearngeneUnit:
    manifest, arrays = container.read_container(path, kind="learngene")
    ids = [int(i) for i in manifest["layer_ids"]]
    known = {"layer_ids", "n_params", "source_hash", "policy", "history", "warnings", "bn_blocks"}
    names = {f"sig{i}/{g}" for i in ids for g in ("kernel", "bias")}
    if set(arrays) != names:
        raise container.ContainerError(f"{path}: unit arrays {sorted(arrays)} do not match layer ids {ids}")
    return LearngeneUnit(
        layer_ids=ids,
        kernels=[arrays[f"sig{i}/kernel"] for i in ids],
        biases=[arrays[f"sig{i}/bias"] for i in ids],
        source_hash=manifest["source_hash"],
        policy=manifest["policy"],
        history=manifest["history"],
        warnings=manifest["warnings"],
        meta={k: v for k, v in manifest.items() if k not in known and not k.startswith(("format", "blob", "arrays", "dtype", "kind"))},
    )


# --- expansion ------------------------------------------------------------------

FAMILIES = ("embedding", "inheriting")
POSITIONS = ("top", "middle", "bottom")


@dataclass(frozen=True)
class ExpansionStrategy:
    family: str
    position: str

    def __post_init__(self):
        if self.family not in FAMILIES or self.position not in POSITIONS:
            raise ValueError(f"unknown strategy {self.family}/{self.position}")

    def canonical(self) -> "ExpansionStrategy":
        # bottom embedding and bottom inheriting are the same operation
        if self.position == "bottom":
            return ExpansionStrategy("embedding", "bottom")
        return self

    @property
    def label(self) -> str:
        c = self.canonical()
        return "bottom" if c.position == "bottom" else f"{c.family}-{c.position}"

    @classmethod
    def parse(cls, text: str) -> "ExpansionStrategy":
        """Accepts ``bottom``, ``embedding-top``, ``inheriting/middle`` and similar."""
        text = text.strip().lower().replace("/", "-").replace("_", "-")
        if text in POSITIONS:
            family, position = "embedding", text
        else:
            family, _, position = text.partition("-")
        return cls(family, position)


CANONICAL_STRATEGIES = tuple(
    dict.fromkeys(ExpansionStrategy(f, p).canonical() for f in FAMILIES for p in POSITIONS)
)


def slot_ids(n_conv: int, size: int, position: str) -> list[int]:
    """Significant-layer ids for a ``size``-long block at ``position`` in an ``n_conv`` stack."""
    if size > n_conv:
        raise ShapeMismatch(f"block of {size} layers does not fit {n_conv} significant layers")
    start = {"top": 1, "middle": (n_conv - size) // 2 + 1, "bottom": n_conv - size + 1}[position]
    return list(range(start, start + size))


@dataclass
class Expansion:
    model: Model
    anchor: dict[str, np.ndarray]
    copies: list[dict]

    @property
    def copied_params(self) -> int:
        return int(sum(c["params"] for c in self.copies))

    @property
    def transferred_ratio(self) -> float:
        return self.copied_params / count_params(self.model.spec)["total"]


def expand(
    individual_spec: ModelSpec,
    source: Model | None,
    unit: LearngeneUnit,
    strategy: ExpansionStrategy,
    rng: np.random.Generator,
) -> Expansion:
    """Initialize an individual model and copy conv blocks into it.

    Embedding copies the extracted unit into the individual's top/middle/bottom
    slot. Inheriting copies the collective's top/middle/bottom segment (same
    length as the unit) into the individual's bottom slot; it needs ``source``
    unless the requested segment is exactly the unit. Everything else, including
    every BatchNorm layer, keeps its fresh initialization.
    """
    model = Model.initialize(individual_spec, rng)
    n_ind = individual_spec.meta["n_conv"]
    m = len(unit)
    if strategy.canonical().family == "embedding":
        dst = slot_ids(n_ind, m, strategy.position)
        blocks = [(f"unit:sig{i}", k, b) for i, k, b in zip(unit.layer_ids, unit.kernels, unit.biases)]
    else:
        dst = slot_ids(n_ind, m, "bottom")
        if source is not None:
            src = slot_ids(source.spec.meta["n_conv"], m, strategy.position)
            blocks = [
                (f"collective:sig{i}", source.params[f"conv{i}/kernel"], source.params[f"conv{i}/bias"]) for i in src
            ]
        else:
            n_col = unit.meta.get("n_conv_source")
            src = slot_ids(n_col, m, strategy.position) if n_col else None
            if src != unit.layer_ids:
                raise StrategyUnavailable(
                    f"{strategy.family}/{strategy.position} needs collective segment {src}, "
                    f"but only unit layers {unit.layer_ids} are available"
                )
            blocks = [(f"unit:sig{i}", k, b) for i, k, b in zip(unit.layer_ids, unit.kernels, unit.biases)]
    anchor: dict[str, np.ndarray] = {}
    copies = []
    for d, (origin, kern, bias) in zip(dst, blocks):
        for group, value in (("kernel", kern), ("bias", bias)):
            name = f"conv{d}/{group}"
            if model.params[name].shape != value.shape:
                raise ShapeMismatch(f"{origin}/{group} {value.shape} vs individual {name} {model.params[name].shape}")
            model.params[name] = np.array(value, dtype=np.float64, copy=True)
            anchor[name] = model.params[name].copy()
        copies.append({"src": origin, "dst": f"conv{d}", "params": int(kern.size + bias.size), "bn": False})
    model.spec.meta["expansion"] = {"strategy": strategy.label, "copies": copies}
    return Expansion(model, anchor, copies)


def adapt_individual(expansion: Expansion, target: TaskDataset, cfg: TrainConfig, scheme: str = "learngene") -> TrainResult:
    """Train an expanded model on the target task with the anchored loss on copied layers."""
    return train_on_task(expansion.model, target, cfg, anchor=expansion.anchor, scheme=scheme)
