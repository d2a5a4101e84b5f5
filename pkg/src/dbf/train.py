"""Training loop with early stopping, checkpoints and the ablation matrix."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dbf import checkpoint
from dbf.config import TrainConfig
from dbf.data import Dataset, batch_iter
from dbf.errors import ConfigError, DBFError, NonFiniteError
from dbf.metrics import MetricsReport, compute_metrics
from dbf.model import DBFModel
from dbf.nn import component_rng
from dbf.optim import AdamState, adam_step, lr_schedule

log = logging.getLogger(__name__)


class TrainingError(DBFError, RuntimeError):
    pass


@dataclass
class StepLog:
    epoch: int
    step: int
    total: float
    task: float
    mimax: float


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_task: float
    train_mimax: float
    val: MetricsReport
    lr_new: float
    lr_backbone: float

    HEADER = "epoch\ttrain_loss\ttrain_task\ttrain_mimax\tval_mae\tval_corr\tval_acc7\tlr_new\tlr_backbone"

    def to_line(self) -> str:
        vals = [self.train_loss, self.train_task, self.train_mimax, self.val.mae,
                self.val.corr, self.val.acc7, self.lr_new, self.lr_backbone]
        return "\t".join([str(self.epoch)] + [repr(float(v)) for v in vals])


@dataclass
class TrainResult:
    model: DBFModel
    best_epoch: int
    best_val_mae: float
    metrics: dict[str, MetricsReport]
    history: list[EpochLog] = field(default_factory=list)
    steps: list[StepLog] = field(default_factory=list)

    def log_text(self) -> str:
        return "\n".join([EpochLog.HEADER] + [e.to_line() for e in self.history]) + "\n"


def build_model(config: TrainConfig, dataset: Dataset) -> DBFModel:
    return DBFModel(config.validate(), dataset.dims, dataset.lengths)


def predict_dataset(model: DBFModel, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        inputs, _ = dataset.batch(idx)
        out.append(model.predict_array(inputs))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: DBFModel, dataset: Dataset, batch_size: int = 256) -> MetricsReport:
    return compute_metrics(predict_dataset(model, dataset, batch_size), dataset.labels())


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, 0xBA7C]).generate_state(1)[0])


def train(config: TrainConfig, train_set: Dataset, val_set: Dataset,
          test_set: Dataset | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Adam with warmup on MAE + MI-Max; keeps the best epoch by validation MAE."""
    config.validate()
    if len(train_set) < 2 or len(val_set) < 2:
        raise ConfigError("train and validation sets need at least 2 samples each")
    model = build_model(config, train_set)
    new_params, backbone_params = model.parameter_groups()
    groups = [(new_params, AdamState(), config.lr_new),
              (backbone_params, AdamState(), config.lr_backbone)]
    mimax_on = config.ablation.mimax_on
    steps_per_epoch = len(list(batch_iter(train_set, config.batch_size, None, mimax_on)))
    warmup = config.warmup_steps
    if warmup is None:
        warmup = math.ceil(0.1 * steps_per_epoch)
    dropout_rng = component_rng(config.seed, "dropout") if config.dropout > 0 else None

    best_state = model.state_dict()
    best_mae = math.inf
    best_epoch = 0
    stale = 0
    history: list[EpochLog] = []
    steps: list[StepLog] = []
    step = 0
    lrs = (0.0, 0.0)
    for epoch in range(1, config.max_epochs + 1):
        totals = []
        for idx in batch_iter(train_set, config.batch_size, _epoch_seed(config.seed, epoch),
                              mimax_on):
            inputs, labels = train_set.batch(idx)
            step += 1
            try:
                parts = model.loss(inputs, labels, dropout_rng)
                model.zero_grad()
                parts.total.backward()
                lrs = tuple(lr_schedule(step, peak, warmup) for _, _, peak in groups)
                for (params, state, _), lr in zip(groups, lrs):
                    adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
            steps.append(StepLog(epoch, step, parts.total.item(), parts.task, parts.mimax))
            totals.append((parts.total.item(), parts.task, parts.mimax))

        val = evaluate(model, val_set, config.eval_batch_size)
        mean = np.mean(totals, axis=0) if totals else np.zeros(3)
        entry = EpochLog(epoch, *map(float, mean), val, *lrs)
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.debug(entry.to_line())
        if val.mae < best_mae:
            best_mae, best_epoch, stale = val.mae, epoch, 0
            best_state = model.state_dict()
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.load_state_dict(best_state)
    metrics = {"train": evaluate(model, train_set, config.eval_batch_size),
               "val": evaluate(model, val_set, config.eval_batch_size)}
    if test_set is not None and len(test_set):
        metrics["test"] = evaluate(model, test_set, config.eval_batch_size)
    return TrainResult(model, best_epoch, best_mae, metrics, history, steps)


# checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model: DBFModel, extra: dict | None = None) -> None:
    manifest = {
        "format": "dbf-checkpoint",
        "config": model.config.to_dict(),
        "dims": dict(model.stack.dims),
        "lengths": dict(model.stack.lengths),
        **(extra or {}),
    }
    checkpoint.save(path, model.state_dict(), manifest)


def load_checkpoint(path) -> tuple[DBFModel, dict]:
    tensors, manifest = checkpoint.load(path)
    config = TrainConfig.from_dict(manifest["config"])
    dims = {"t": 1, "v": 1, "a": 1, **manifest["dims"]}
    lengths = {"t": 1, "v": 1, "a": 1, **manifest["lengths"]}
    model = DBFModel(config, dims, lengths)
    model.load_state_dict(tensors)
    return model, manifest


# ablation matrix -----------------------------------------------------------


def ablation_configs(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """The eight ablation rows: full model, two module removals, three modality
    removals and two alternative center modalities."""
    def drop(m):
        keep = tuple(x for x in ("t", "v", "a") if x != m)
        center = base.ablation.center_modality
        return {"use_modalities": keep, "center_modality": center if center in keep else keep[0]}

    rows = [
        ("full", {}),
        ("-mimax", {"mimax_on": False}),
        ("-bottleneck", {"bottleneck_on": False}),
        ("-language", drop("t")),
        ("-visual", drop("v")),
        ("-audio", drop("a")),
        ("visual-based", {"center_modality": "v"}),
        ("audio-based", {"center_modality": "a"}),
    ]
    full = base.replace(ablation={"mimax_on": True, "bottleneck_on": True,
                                  "use_modalities": ("t", "v", "a"), "center_modality": "t"})
    return [(name, full.replace(ablation=changes) if changes else full) for name, changes in rows]


@dataclass
class AblationCell:
    name: str
    seed: int
    report: MetricsReport | None
    error: str | None = None


@dataclass
class AblationTable:
    cells: list[AblationCell]
    seeds: list[int]

    METRICS = ("mae", "corr", "acc7", "acc2_neg_nonneg", "acc2_neg_pos",
               "f1_neg_nonneg", "f1_neg_pos")

    def names(self) -> list[str]:
        seen = []
        for c in self.cells:
            if c.name not in seen:
                seen.append(c.name)
        return seen

    def median(self, name: str, metric: str = "mae") -> float:
        vals = [getattr(c.report, metric) for c in self.cells
                if c.name == name and c.report is not None]
        return float(np.median(vals)) if vals else math.nan

    def to_tsv(self) -> str:
        lines = ["config\t" + "\t".join(self.METRICS) + "\truns_ok\truns_failed"]
        for name in self.names():
            cells = [c for c in self.cells if c.name == name]
            ok = sum(c.report is not None for c in cells)
            vals = [repr(self.median(name, m)) for m in self.METRICS]
            lines.append("\t".join([name, *vals, str(ok), str(len(cells) - ok)]))
        return "\n".join(lines) + "\n"


def run_ablation_matrix(
    base: TrainConfig,
    datasets: tuple[Dataset, Dataset, Dataset] | Callable[[int], tuple[Dataset, Dataset, Dataset]],
    seeds: Sequence[int],
    split: str = "test",
    configs: Sequence[str] | None = None,
    on_result: Callable[[str, int, TrainResult, Dataset], None] | None = None,
) -> AblationTable:
    """Train every ablation row under every seed; a failing cell is recorded, not raised.

    ``on_result(name, seed, result, test_set)`` is called after each successful
    cell, e.g. to analyse the trained model before it is discarded.
    """
    if len(seeds) < 3:
        raise ConfigError("the ablation matrix needs at least 3 seeds for median reporting")
    rows = ablation_configs(base)
    if configs is not None:
        rows = [(n, c) for n, c in rows if n in configs]
    cells = []
    for seed in seeds:
        train_set, val_set, test_set = datasets(seed) if callable(datasets) else datasets
        for name, cfg in rows:
            try:
                result = train(cfg.replace(seed=seed), train_set, val_set, test_set)
                cells.append(AblationCell(name, seed, result.metrics[split]))
                if on_result is not None:
                    on_result(name, seed, result, test_set)
            except DBFError as exc:
                log.warning("ablation cell %s seed %d failed: %s", name, seed, exc)
                cells.append(AblationCell(name, seed, None, str(exc)))
    return AblationTable(cells, list(seeds))


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
