"""The full hierarchical model, training loop and evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Dataset, Graph, make_splits
from .layers import GcnLayer, MLPHead, Module, gcn_forward, readout
from .pooling import LayerState, SpgpLayer, spgp_forward
from .structure import KINDS, PrototypeSet, extract_all, structure_features

log = logging.getLogger(__name__)

MULTICLASS = "multiclass"
MULTILABEL = "multilabel"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    hidden_dim: int = 64
    num_layers: int = 2
    pooling_ratio: float = 0.8
    dropout_rate: float = 0.0
    lam: float = 0.8
    decay_step: int = 25
    decay_rate: float = 0.1
    weight_decay: float = 5e-4
    epochs: int = 100
    patience: int = 30
    seed: int = 0
    prototype_kinds: tuple[str, ...] = KINDS
    task_mode: str = MULTICLASS
    folds: int = 10
    batching: str = "block"

    def __post_init__(self):
        self.prototype_kinds = tuple(self.prototype_kinds)
        if not 0.0 < self.pooling_ratio <= 1.0:
            raise ValueError("pooling_ratio must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        for name in ("batch_size", "hidden_dim", "num_layers", "decay_step", "patience", "folds"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.task_mode not in (MULTICLASS, MULTILABEL):
            raise ValueError(f"unknown task_mode {self.task_mode!r}")
        if self.batching not in ("block", "loop"):
            raise ValueError(f"unknown batching {self.batching!r}")
        unknown = set(self.prototype_kinds) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown prototype kinds {sorted(unknown)}")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TrainConfig":
        raw = dict(raw)
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(raw) - names
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prototype_kinds"] = list(self.prototype_kinds)
        return d

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_rate ** (epoch // self.decay_step)


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------- model


@dataclass
class Prepared:
    """A graph with its prototypes and structure-augmented features."""

    graph: Graph
    prototypes: dict[str, PrototypeSet]
    features: np.ndarray


def prepare(graph: Graph, prototypes: Mapping[str, PrototypeSet] | None = None,
            kinds: Sequence[str] = KINDS) -> Prepared:
    if prototypes is None:
        prototypes = extract_all(graph, kinds)
    protos = {k: prototypes.get(k, PrototypeSet(k)) for k in kinds}
    extra = structure_features(graph.num_nodes, prototypes.get("bcc", PrototypeSet("bcc")),
                               prototypes.get("clique", PrototypeSet("clique")))
    return Prepared(graph, protos, np.hstack([graph.features, extra]))


class SPGPModel(Module):
    _fields = ("gcn", "ln_gain", "ln_bias", "pool", "head")

    def __init__(self, config: TrainConfig, in_dim: int, num_outputs: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        d = config.hidden_dim
        self.config = config
        self.in_dim = in_dim
        self.num_outputs = num_outputs
        self.gcn = [GcnLayer(in_dim + 3 if i == 0 else d, d, rng) for i in range(config.num_layers)]
        self.ln_gain = {str(i): ad.parameter(np.ones(d)) for i in range(config.num_layers)}
        self.ln_bias = {str(i): ad.parameter(np.zeros(d)) for i in range(config.num_layers)}
        self.pool = [
            SpgpLayer(d, config.prototype_kinds, rng, lam=config.lam, ratio=config.pooling_ratio)
            for _ in range(config.num_layers)
        ]
        self.head = MLPHead(2 * d, d, num_outputs, rng)

    def forward(self, items: Sequence[Prepared], training: bool = False,
                rng: np.random.Generator | None = None, trace: list | None = None) -> Tensor:
        """Logits of shape (len(items), num_outputs) for a block-diagonal batch."""
        graphs = [it.graph for it in items]
        H = Tensor(np.vstack([it.features for it in items]))
        if H.shape[1] != self.in_dim + 3:
            raise ad.DimensionError(f"model expects {self.in_dim} raw features, got {H.shape[1] - 3}")
        state = LayerState.from_graphs(graphs, [it.prototypes for it in items], H)
        HS = None
        for i in range(self.config.num_layers):
            h = ad.layer_norm(gcn_forward(self.gcn[i], state.H, state.topology))
            state.H = h * self.ln_gain[str(i)] + self.ln_bias[str(i)]
            state, scores = spgp_forward(self.pool[i], state)
            if trace is not None:
                trace.append(scores)
            r = readout(state.H, state.graph_ids, state.num_graphs)
            HS = r if HS is None else HS + r
        return self.head(HS, self.config.dropout_rate, training, rng)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(values)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            v = np.asarray(values[name])
            if v.shape != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {v.shape} != model shape {p.shape}")
            p.data = v.astype(p.data.dtype).copy()

    def save(self, path: str | Path) -> None:
        meta = {"config": self.config.to_dict(), "in_dim": self.in_dim, "num_outputs": self.num_outputs}
        ad.save_checkpoint(path, self.named_parameters(), meta)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "SPGPModel":
        values, meta = ad.load_checkpoint(path)
        model = cls(TrainConfig.from_dict(meta["config"]), meta["in_dim"], meta["num_outputs"])
        model.load(values)
        return model


def model_forward(model: SPGPModel, graph: Graph, prototypes: Mapping[str, PrototypeSet] | None = None) -> np.ndarray:
    """Eval-mode logits for one graph, shape (num_outputs,)."""
    item = prepare(graph, prototypes, model.config.prototype_kinds)
    return model.forward([item]).data[0]


def predict(model: SPGPModel, graph: Graph, prototypes=None) -> int:
    return int(np.argmax(model_forward(model, graph, prototypes)))


# ----------------------------------------------------------------- metrics


def _loss(model: SPGPModel, logits: Tensor, items: Sequence[Prepared]) -> Tensor:
    if model.config.task_mode == MULTILABEL:
        y = np.stack([np.asarray(it.graph.label, dtype=np.float64) for it in items])
        return ad.binary_cross_entropy_with_logits(logits, y)
    y = np.array([it.graph.label for it in items], dtype=np.int64)
    return ad.softmax_cross_entropy(logits, y)


def batch_loss(model: SPGPModel, items: Sequence[Prepared], training: bool = False,
               rng: np.random.Generator | None = None, batching: str | None = None) -> Tensor:
    """Mean loss over ``items``; ``loop`` is the per-graph reference path."""
    batching = batching or model.config.batching
    if batching == "block":
        return _loss(model, model.forward(items, training, rng), items)
    if model.config.task_mode == MULTILABEL:
        # each graph's mean is over its labelled tasks; reweight to the batch mean
        counts = [int((~np.isnan(np.asarray(it.graph.label, dtype=np.float64))).sum()) for it in items]
    else:
        counts = [1] * len(items)
    denom = max(sum(counts), 1)
    total = None
    for it, c in zip(items, counts):
        part = ad.mul(_loss(model, model.forward([it], training, rng), [it]), c / denom)
        total = part if total is None else total + part
    return total


def mean_average_precision(y_true: np.ndarray, scores: np.ndarray) -> float:
    from sklearn.metrics import average_precision_score

    aps = []
    for t in range(y_true.shape[1]):
        mask = ~np.isnan(y_true[:, t])
        yt = y_true[mask, t]
        if yt.size and 0 < yt.sum() < yt.size:
            aps.append(average_precision_score(yt, scores[mask, t]))
    return float(np.mean(aps)) if aps else float("nan")


def mean_roc_auc(y_true: np.ndarray, scores: np.ndarray) -> float:
    from sklearn.metrics import roc_auc_score

    aucs = []
    for t in range(y_true.shape[1]):
        mask = ~np.isnan(y_true[:, t])
        yt = y_true[mask, t]
        if yt.size and 0 < yt.sum() < yt.size:
            aucs.append(roc_auc_score(yt, scores[mask, t]))
    return float(np.mean(aucs)) if aucs else float("nan")


def _logits(model: SPGPModel, items: Sequence[Prepared], batch_size: int = 64) -> np.ndarray:
    out = [model.forward(items[i:i + batch_size]).data for i in range(0, len(items), batch_size)]
    return np.vstack(out) if out else np.zeros((0, model.num_outputs))


def score_items(model: SPGPModel, items: Sequence[Prepared]) -> dict[str, float]:
    """Eval-mode metrics: accuracy for multiclass, AP and ROC-AUC for multilabel."""
    if not items:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = _logits(model, items)
    if model.config.task_mode == MULTILABEL:
        y = np.stack([np.asarray(it.graph.label, dtype=np.float64) for it in items])
        return {"metric": mean_average_precision(y, logits), "roc_auc": mean_roc_auc(y, logits)}
    y = np.array([it.graph.label for it in items])
    return {"metric": float(np.mean(np.argmax(logits, axis=1) == y))}


# ----------------------------------------------------------------- reports


@dataclass
class RunReport:
    metric_name: str
    fold_metrics: list[float] = field(default_factory=list)
    fold_ids: list[int] = field(default_factory=list)
    best_epochs: list[int] = field(default_factory=list)
    train_loss: list[list[float]] = field(default_factory=list)
    val_metric: list[list[float]] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    test_indices: list[list[int]] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_metrics)) if self.fold_metrics else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.fold_metrics)) if self.fold_metrics else float("nan")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mean"], d["std"] = self.mean, self.std
        return d

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def prepare_dataset(dataset: Dataset, prototypes: Sequence[Mapping[str, PrototypeSet]] | None,
                    kinds: Sequence[str]) -> list[Prepared]:
    if prototypes is not None and len(prototypes) != len(dataset):
        raise ValueError(f"{len(prototypes)} prototype entries for {len(dataset)} graphs")
    return [prepare(g, None if prototypes is None else prototypes[i], kinds) for i, g in enumerate(dataset.graphs)]


def num_outputs_for(dataset: Dataset, config: TrainConfig) -> int:
    if config.task_mode == MULTILABEL:
        return len(dataset.graphs[0].label)
    return dataset.num_classes


def train_fold(config: TrainConfig, items: Sequence[Prepared], train_idx, val_idx, in_dim: int,
               num_outputs: int, fold: int = 0) -> tuple[SPGPModel, dict]:
    """Train one model; the returned model holds the best-validation parameters."""
    rng = np.random.default_rng([config.seed, fold])
    model = SPGPModel(config, in_dim, num_outputs, rng)
    opt = ad.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    val_items = [items[i] for i in val_idx]
    best = model.snapshot()
    best_metric = score_items(model, val_items)["metric"] if val_items else float("-inf")
    best_epoch = -1
    history = {"train_loss": [], "val_metric": [], "lr": []}
    stale = 0
    train_idx = np.asarray(train_idx)
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(train_idx)
        losses = []
        for s in range(0, len(order), config.batch_size):
            batch = [items[i] for i in order[s:s + config.batch_size]]
            loss = batch_loss(model, batch, training=True, rng=rng)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"fold {fold} epoch {epoch}: non-finite loss {loss.item()}")
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(batch))
        history["train_loss"].append(float(np.sum(losses) / max(len(order), 1)))
        history["lr"].append(opt.lr)
        metric = score_items(model, val_items)["metric"] if val_items else float("nan")
        history["val_metric"].append(metric)
        if metric > best_metric:
            best_metric, best, best_epoch, stale = metric, model.snapshot(), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("fold %d: early stop at epoch %d", fold, epoch)
                break
    model.load(best)
    history["best_epoch"] = best_epoch
    return model, history


def train(config: TrainConfig, dataset: Dataset,
          prototypes: Sequence[Mapping[str, PrototypeSet]] | None = None,
          run_folds: Sequence[int] | None = None, keep_models: list | None = None) -> RunReport:
    """k-fold training: fold i tests, fold i+1 validates, the rest trains."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    start = time.perf_counter()
    items = prepare_dataset(dataset, prototypes, config.prototype_kinds)
    plan = make_splits(dataset, config.folds, config.seed)
    n_out = num_outputs_for(dataset, config)
    report = RunReport("average_precision" if config.task_mode == MULTILABEL else "accuracy")
    for fold in (range(plan.k) if run_folds is None else run_folds):
        tr, va, te = plan.fold(fold)
        model, hist = train_fold(config, items, tr, va, dataset.feature_dim, n_out, fold)
        test_metric = score_items(model, [items[i] for i in te])["metric"]
        log.info("fold %d: best epoch %d, test %s %.4f", fold, hist["best_epoch"], report.metric_name, test_metric)
        report.fold_ids.append(int(fold))
        report.fold_metrics.append(test_metric)
        report.best_epochs.append(hist["best_epoch"])
        report.train_loss.append(hist["train_loss"])
        report.val_metric.append(hist["val_metric"])
        report.learning_rates = hist["lr"]
        report.test_indices.append([int(i) for i in te])
        if keep_models is not None:
            keep_models.append(model)
    report.wall_clock = time.perf_counter() - start
    return report


def evaluate(model: SPGPModel | str | Path, dataset: Dataset,
             prototypes: Sequence[Mapping[str, PrototypeSet]] | None = None) -> RunReport:
    """Deterministic eval-mode metrics of a model or checkpoint on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if not isinstance(model, SPGPModel):
        model = SPGPModel.from_checkpoint(model)
    if dataset.feature_dim != model.in_dim:
        raise ValueError(f"dataset has {dataset.feature_dim} features, checkpoint expects {model.in_dim}")
    start = time.perf_counter()
    items = prepare_dataset(dataset, prototypes, model.config.prototype_kinds)
    scores = score_items(model, items)
    report = RunReport("average_precision" if model.config.task_mode == MULTILABEL else "accuracy")
    report.fold_metrics.append(scores["metric"])
    report.fold_ids.append(0)
    report.test_indices.append(list(range(len(dataset))))
    report.wall_clock = time.perf_counter() - start
    return report
