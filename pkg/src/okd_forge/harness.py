"""Training loop, optimizers, cosine schedule, model selection, and run comparison."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import nets
from . import rng as rngmod
from . import tensor as T
from .distill import DistillConfig, cross_entropy, kd_aug_loss, kd_loss, okd_loss
from .errors import ConfigError, DataError, NonFiniteError, ParameterError, UsageError
from .oodgen import Augmentor

METHODS = ("erm", "kd", "kd_aug", "okd", "teacher")
DISTILL_METHODS = ("kd", "kd_aug", "okd")


# -- schedule and optimizers ----------------------------------------------
def cosine_lr(epoch: int, max_epochs: int, lr0: float) -> float:
    """``0.5 * lr0 * (1 + cos(pi * epoch / max_epochs))``."""
    if max_epochs < 1:
        raise ParameterError("max_epochs must be >= 1")
    if not 0 <= epoch <= max_epochs:
        raise UsageError(f"epoch {epoch} outside [0, {max_epochs}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / max_epochs))


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float):
    """``v <- momentum * v + g``; ``p <- p - lr * v``.  Returns new lists."""
    new_v = [momentum * v + g for v, g in zip(velocity, grads)]
    new_p = [p - lr * v for p, v in zip(params, new_v)]
    return new_p, new_v


@dataclass
class AdamState:
    t: int
    m: list
    v: list

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update.  Returns ``(new_params, new_state)``."""
    t = state.t + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    new_p = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(params, m, v)]
    return new_p, AdamState(t, m, v)


# -- configuration --------------------------------------------------------
def _strict(cls, d: dict, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return d


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "sgd_momentum"
    lr0: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.name not in ("sgd_momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.name!r}")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "erm"
    student: str = "student2d"
    teacher: str | None = "teacher2d"
    teacher_checkpoint: str | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    max_epochs: int = 40
    distill: DistillConfig = field(default_factory=DistillConfig)
    aug: Augmentor = field(default_factory=lambda: Augmentor("cutmix_mixup"))
    seed: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if self.method == "erm" and self.teacher_checkpoint:
            raise ConfigError("method 'erm' does not take a teacher")

    @property
    def model_name(self) -> str:
        return self.teacher if self.method == "teacher" else self.student

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"] = self.distill.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(_strict(cls, d, "train config"))
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig(**_strict(OptimizerConfig, d["optimizer"], "optimizer"))
        if "distill" in d:
            unknown = set(d["distill"]) - {"lambda", "pi_ce", "pi_kl"}
            if unknown:
                raise ConfigError(f"unknown distill keys: {sorted(unknown)}")
            d["distill"] = DistillConfig.from_dict(d["distill"])
        if "aug" in d:
            d["aug"] = Augmentor.from_dict(d["aug"])
        return cls(**d)


# -- run records ----------------------------------------------------------
@dataclass
class RunRecord:
    config: dict
    method: str
    seed: int
    epochs: list = field(default_factory=list)
    selected_epoch: int = -1
    id_accuracy: float = float("nan")
    ood_accuracy: float = float("nan")
    param_count: int = 0
    status: str = "ok"
    diagnostic: str = ""
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, include_wall_clock: bool = True) -> str:
        d = self.to_dict()
        if not include_wall_clock:
            d.pop("wall_clock")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**_strict(cls, d, "run record"))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path} is not a run record: {exc}") from None
        return cls.from_dict(d)


class NonFiniteLossError(NonFiniteError):
    """Training hit a NaN/Inf loss; ``record`` holds the partial run."""

    def __init__(self, message: str, record: RunRecord):
        super().__init__(message)
        self.record = record


def select_epoch(val_accuracies: Iterable[float]) -> int:
    """Index of the best validation accuracy, earliest on ties."""
    vals = list(val_accuracies)
    if not vals:
        raise UsageError("no epochs to select from")
    return int(np.argmax(vals))


def accuracy(net: nets.Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    if len(y) == 0:
        return float("nan")
    return float((nets.predict(net, x, batch_size) == y).mean())


# -- training -------------------------------------------------------------
class _Optimizer:
    def __init__(self, cfg: OptimizerConfig, params: list[np.ndarray]):
        self.cfg = cfg
        if cfg.name == "adam":
            self.state = AdamState.zeros(params)
        else:
            self.state = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr):
        if self.cfg.weight_decay:
            grads = [g + self.cfg.weight_decay * p for p, g in zip(params, grads)]
        if self.cfg.name == "adam":
            new, self.state = adam_step(params, grads, self.state, lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps)
        else:
            new, self.state = sgd_momentum_step(params, grads, self.state, lr, self.cfg.momentum)
        return new


def _step_loss(cfg: TrainConfig, xb, yb, student, teacher, aug_rng, pt=None):
    method = cfg.method
    if method in ("erm", "teacher"):
        return cross_entropy(yb, student(T.Tensor(xb)), cfg.distill.pi_ce)
    if method == "kd":
        return kd_loss(xb, yb, student, teacher, cfg.distill, pt)
    if method == "okd":
        return okd_loss(xb, yb, student, teacher, cfg.aug, cfg.distill, aug_rng, pt)
    return kd_aug_loss(xb, yb, student, teacher, cfg.aug, cfg.distill, aug_rng, pt)


def _teacher_table(teacher, x, rows, pi, batch_size):
    """Tempered teacher probabilities on clean rows, computed once per run."""
    table = None
    with T.no_grad():
        for start in range(0, len(rows), batch_size):
            idx = rows[start : start + batch_size]
            p = T.softmax_temp(teacher(T.Tensor(x[idx])), pi).data
            if table is None:
                table = np.zeros((len(x), p.shape[1]))
            table[idx] = p
    return table


def train(
    cfg: TrainConfig,
    dataset,
    split,
    teacher: nets.Network | None = None,
    evaluator: Callable[[nets.Network, int], float] | None = None,
    on_step: Callable[[int, int, float], None] | None = None,
) -> tuple[RunRecord, nets.Network]:
    """Train one model and return its record plus the selected checkpoint.

    ``evaluator(net, epoch)`` replaces the validation-accuracy computation, and
    ``on_step(epoch, step, loss)`` observes every minibatch loss.
    """
    started = time.perf_counter()
    if cfg.method in DISTILL_METHODS and teacher is None:
        raise ConfigError(f"method {cfg.method!r} needs a teacher network")
    if cfg.method in ("erm", "teacher") and teacher is not None:
        raise ConfigError(f"method {cfg.method!r} does not take a teacher")

    x_all, y_all = dataset.x, dataset.labels
    roles = split.roles_for(dataset.ids)
    tr, va, te = (np.flatnonzero(roles == r) for r in ("train", "val", "test"))
    if len(tr) == 0:
        raise ConfigError("split has no train-role examples")

    spec = nets.preset(cfg.model_name, dataset.num_classes, dataset.input_shape, seed=cfg.seed)
    net = nets.build(spec)
    names = list(net.params)
    opt = _Optimizer(cfg.optimizer, [net.params[n].data for n in names])
    table = None
    if teacher is not None:
        teacher = teacher.clone(requires_grad=False)
        table = _teacher_table(teacher, x_all, tr, cfg.distill.pi_kl, cfg.eval_batch_size)

    record = RunRecord(config=cfg.to_dict(), method=cfg.method, seed=cfg.seed, param_count=net.param_count)
    best_acc, best_state = -1.0, None
    for epoch in range(cfg.max_epochs):
        lr = cosine_lr(epoch, cfg.max_epochs, cfg.optimizer.lr0)
        order = tr[rngmod.stream(cfg.seed, rngmod.SHUFFLE, epoch).permutation(len(tr))]
        aug_rng = rngmod.stream(cfg.seed, rngmod.AUG, epoch)
        total, seen = 0.0, 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            try:
                pt = None if table is None else table[idx]
                loss = _step_loss(cfg, x_all[idx], y_all[idx], net, teacher, aug_rng, pt)
            except NonFiniteError as exc:
                record.status = "non_finite_loss"
                record.diagnostic = f"epoch {epoch} step {step}: {exc}"
                record.wall_clock = time.perf_counter() - started
                raise NonFiniteLossError(record.diagnostic, record) from exc
            net.zero_grad()
            loss.backward()
            params = [net.params[n].data for n in names]
            grads = [net.params[n].grad if net.params[n].grad is not None else np.zeros_like(p)
                     for n, p in zip(names, params)]
            for n, p in zip(names, opt.step(params, grads, lr)):
                net.params[n] = T.Tensor(p, requires_grad=True)
            value = loss.item()
            total += value * len(idx)
            seen += len(idx)
            if on_step is not None:
                on_step(epoch, step, value)

        if evaluator is not None:
            val_acc = float(evaluator(net, epoch))
        else:
            val_acc = accuracy(net, x_all[va], y_all[va], cfg.eval_batch_size)
        record.epochs.append({"epoch": epoch, "lr": lr, "train_loss": total / seen, "val_accuracy": val_acc})
        if val_acc > best_acc:
            best_acc, best_state = val_acc, net.state()

    record.selected_epoch = select_epoch(e["val_accuracy"] for e in record.epochs)
    net.load_state(best_state)
    net.requires_grad_(False)
    record.id_accuracy = accuracy(net, x_all[va], y_all[va], cfg.eval_batch_size)
    record.ood_accuracy = accuracy(net, x_all[te], y_all[te], cfg.eval_batch_size)
    record.wall_clock = time.perf_counter() - started
    return record, net


def train_teacher(cfg: TrainConfig, dataset, split) -> tuple[RunRecord, nets.Network]:
    """ERM training of the teacher preset named in ``cfg.teacher``."""
    if not cfg.teacher:
        raise ConfigError("no teacher preset configured")
    tcfg = TrainConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)},
                          "method": "teacher", "teacher_checkpoint": None})
    return train(tcfg, dataset, split)


# -- comparison -----------------------------------------------------------
COLUMNS = (
    "method", "n", "id_mean", "id_std", "ood_mean", "ood_std",
    "id_gap_mean", "id_gap_std", "ood_gap_mean", "ood_gap_std",
)


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


@dataclass
class ComparisonReport:
    """Per-method mean and population std over seeds.

    Gaps are teacher minus student accuracy, paired by seed with the
    ``teacher`` record of the same seed.
    """

    rows: list[dict]

    def row(self, method: str) -> dict:
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: r[k] for k in COLUMNS})
        return buf.getvalue()

    def to_text(self) -> str:
        def fmt(v):
            if isinstance(v, float):
                return "-" if math.isnan(v) else f"{100 * v:.2f}"
            return str(v)

        header = ["method", "n", "ID acc", "OOD acc", "T-S ID gap", "T-S OOD gap"]
        body = []
        for r in self.rows:
            body.append([
                r["method"], str(r["n"]),
                f"{fmt(r['id_mean'])} ± {fmt(r['id_std'])}",
                f"{fmt(r['ood_mean'])} ± {fmt(r['ood_std'])}",
                f"{fmt(r['id_gap_mean'])} ± {fmt(r['id_gap_std'])}",
                f"{fmt(r['ood_gap_mean'])} ± {fmt(r['ood_gap_std'])}",
            ])
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
        return "\n".join(lines) + "\n"


def _label(rec: RunRecord) -> str:
    """Method label, qualified by augmentor for the augmentation-based methods."""
    if rec.method in ("okd", "kd_aug"):
        aug = rec.config.get("aug", {})
        kind = aug.get("kind", "identity")
        suffix = f"{kind}-k{aug.get('k')}" if kind == "jigsaw" else kind
        return f"{rec.method}[{suffix}]"
    return rec.method


def compare(records: Iterable) -> ComparisonReport:
    recs = [r if isinstance(r, RunRecord) else RunRecord.from_dict(r) for r in records]
    teachers = {r.seed: r for r in recs if r.method == "teacher"}
    groups: dict[str, list[RunRecord]] = {}
    for r in recs:
        groups.setdefault(_label(r), []).append(r)
    rows = []
    for label in sorted(groups, key=lambda k: (k != "teacher", k)):
        g = groups[label]
        idm, ids = _mean_std([r.id_accuracy for r in g])
        oodm, oods = _mean_std([r.ood_accuracy for r in g])
        paired = [(teachers[r.seed], r) for r in g if r.seed in teachers]
        igm, igs = _mean_std([t.id_accuracy - r.id_accuracy for t, r in paired])
        ogm, ogs = _mean_std([t.ood_accuracy - r.ood_accuracy for t, r in paired])
        rows.append({
            "method": label, "n": len(g), "id_mean": idm, "id_std": ids, "ood_mean": oodm, "ood_std": oods,
            "id_gap_mean": igm, "id_gap_std": igs, "ood_gap_mean": ogm, "ood_gap_std": ogs,
        })
    return ComparisonReport(rows)
