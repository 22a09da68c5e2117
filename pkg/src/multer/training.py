"""SGD with momentum, step schedule, training loop, evaluation and cross-validation."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg.blas import daxpy

from . import autodiff as ad
from .autodiff import ContractError, NonFiniteError
from .data import FoldPlan, PatchSet, flip_batch, iter_batches, plan_folds, standardize
from .network import MulterConfig, MulterNet, argmax_lowest


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, lr: float, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch} (lr={lr:g}){': ' + detail if detail else ''}")
        self.epoch, self.lr = epoch, lr


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.01
    step: int = 10
    gamma: float = 0.1
    total_epochs: int = 30

    def __post_init__(self):
        if self.step < 1 or self.total_epochs < 1 or self.base_lr < 0 or self.gamma <= 0:
            raise ContractError(f"invalid schedule {self}")

    @classmethod
    def paper(cls) -> "Schedule":
        return cls(base_lr=0.1)


def lr_at(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    # rounding at 15 places turns 0.1 * 0.1**2 into the literal 0.001
    return round(schedule.base_lr * schedule.gamma ** (epoch // schedule.step), 15)


@dataclass
class OptimState:
    momentum: float = 0.9
    lr: float = 0.0
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)


def sgd_step(params: list[ad.Tensor], grads: list[np.ndarray], state: OptimState, consume: bool = False) -> None:
    """Classical momentum, in place: v <- mu v + g (+ wd p); p <- p - lr v.

    With ``consume`` the gradient buffers may be overwritten and kept as the
    new velocity, which saves two passes over each parameter.
    """
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    owners: dict[int, int] = {}
    for g in grads:
        owners[id(g)] = owners.get(id(g), 0) + 1
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocity)):
        if g.shape != p.shape or v.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if consume and _blas_ready(g) and _blas_ready(v) and owners.get(id(g)) == 1 and g.flags.owndata:
            # g <- mu v + g, then g becomes the velocity
            daxpy(v.reshape(-1), g.reshape(-1), a=state.momentum)
            state.velocity[i] = v = g
        else:
            v *= state.momentum
            v += g
        if not state.lr:
            continue
        if _blas_ready(p.data):
            # in-place p += (-lr) v without a temporary
            daxpy(v.reshape(-1), p.data.reshape(-1), a=-state.lr)
        else:
            p.data -= state.lr * v


def _blas_ready(a: np.ndarray) -> bool:
    return a.flags.c_contiguous and a.dtype == np.float64


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    train_acc: float


def network_input(pixels: np.ndarray) -> np.ndarray:
    """``N x S x S`` patches -> standardized ``N x 1 x S x S`` batch."""
    x = standardize(pixels)
    return x[:, None] if x.ndim == 3 else x


def train(
    model: MulterNet,
    trainset: PatchSet,
    schedule: Schedule,
    batch_size: int = 32,
    seed: int = 0,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    augment: bool = True,
    on_epoch=None,
) -> list[EpochLog]:
    """Fit ``model`` in place; returns one log row per epoch.

    Labels are levels 1..n; the network sees them as classes 0..n-1.
    """
    if len(trainset) == 0:
        raise ContractError("training set is empty")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    state = OptimState(momentum=momentum, weight_decay=weight_decay)
    history = []
    for epoch in range(schedule.total_epochs):
        state.lr = lr_at(schedule, epoch)
        total, correct, n = 0.0, 0, 0
        for idx in iter_batches(len(trainset), batch_size, rng):
            pixels, levels = trainset.batch(idx, "train")
            if augment:
                pixels = flip_batch(pixels, rng)
            target = levels - 1
            # overflow surfaces as NonFiniteError; numpy's own warnings add nothing
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    logits = model(network_input(pixels))
                    loss = ad.cross_entropy(logits, target)
                    model.zero_grad()
                    ad.backward(loss, inputs=params)
                except NonFiniteError as exc:
                    raise DivergenceError(epoch, state.lr, str(exc)) from exc
                sgd_step(params, [p.grad for p in params], state, consume=True)
            model.clamp()
            total += loss.item() * len(idx)
            correct += int((argmax_lowest(logits.data) == target).sum())
            n += len(idx)
        mean_loss = total / n
        if not math.isfinite(mean_loss):
            raise DivergenceError(epoch, state.lr, "non-finite epoch loss")
        row = EpochLog(epoch, state.lr, mean_loss, 100.0 * correct / n)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return history


def predict_levels(model: MulterNet, patches: PatchSet, batch_size: int = 64, purpose: str = "evaluate") -> np.ndarray:
    preds = []
    for idx in iter_batches(len(patches), batch_size):
        pixels, _ = patches.batch(idx, purpose)
        preds.append(argmax_lowest(model(network_input(pixels)).data) + 1)
    return np.concatenate(preds)


def accuracy(predicted, actual) -> float:
    predicted, actual = np.asarray(predicted), np.asarray(actual)
    if len(actual) == 0:
        raise ContractError("cannot score an empty test set")
    return 100.0 * float((predicted == actual).sum()) / len(actual)


def evaluate(model: MulterNet, testset: PatchSet, batch_size: int = 64) -> float:
    if len(testset) == 0:
        raise ContractError("test set is empty")
    return accuracy(predict_levels(model, testset, batch_size), testset.labels)


def confusion_matrix(predicted, actual, n_classes: int) -> list[list[int]]:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, a in zip(predicted, actual):
        m[a - 1, p - 1] += 1
    return m.tolist()


# ---------------------------------------------------------------------------
# reporting


def population_std(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(((v - v.mean()) ** 2).mean()))


def round1(x: float) -> float:
    """Round half away from zero at one decimal, on the decimal representation."""
    from decimal import ROUND_HALF_UP, Decimal

    return float(Decimal(repr(float(x))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass
class RunReport:
    accuracies: list[float]
    config: dict = field(default_factory=dict)
    seed: int = 0
    confusion: list = field(default_factory=list)
    history: list = field(default_factory=list)
    test_reads_during_training: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.accuracies:
            raise ContractError("a report needs at least one split")
        self.accuracies = [round1(a) for a in self.accuracies]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return population_std(self.accuracies)

    def summary(self) -> str:
        return f"{round1(self.mean):.1f}±{round1(self.std):.1f}"

    def to_dict(self) -> dict:
        return {
            "splits": self.accuracies,
            "mean": self.mean,
            "std": self.std,
            "average": self.summary(),
            "seed": self.seed,
            "config": self.config,
            "confusion": self.confusion,
            "history": self.history,
            "test_reads_during_training": self.test_reads_during_training,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            accuracies=list(d["splits"]),
            config=d.get("config", {}),
            seed=d.get("seed", 0),
            confusion=d.get("confusion", []),
            history=d.get("history", []),
            test_reads_during_training=d.get("test_reads_during_training", []),
        )

    def table_rows(self) -> list[tuple[str, str]]:
        rows = [(f"Split {i}", f"{a:.1f}") for i, a in enumerate(self.accuracies, start=1)]
        rows.append(("Average", self.summary()))
        return rows


def aggregate(accuracies) -> RunReport:
    return RunReport(list(accuracies))


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class TrainConfig:
    schedule: Schedule = Schedule()
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("schedule"), dict):
            d["schedule"] = Schedule(**d["schedule"])
        return cls(**d)


def fold_seeds(seed: int, n: int) -> list[tuple[int, int]]:
    """Independent (init, train) seeds per fold derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [tuple(int(v) for v in c.generate_state(2, dtype=np.uint64)) for c in children]


def run_fold(model_cfg: MulterConfig, train_cfg: TrainConfig, train_set: PatchSet, test_set: PatchSet, seeds):
    init_seed, train_seed = seeds
    model = MulterNet.init(model_cfg, init_seed)
    history = train(
        model,
        train_set,
        train_cfg.schedule,
        train_cfg.batch_size,
        train_seed,
        train_cfg.momentum,
        train_cfg.weight_decay,
        train_cfg.augment,
    )
    leaked = len(test_set.access_log)
    preds = predict_levels(model, test_set)
    acc = accuracy(preds, test_set.labels)
    return acc, confusion_matrix(preds, test_set.labels, model_cfg.n_classes), [asdict(h) for h in history], leaked


def _run_fold_job(args):
    return run_fold(*args)


def cross_validate(
    model_cfg: MulterConfig,
    train_cfg: TrainConfig,
    patches: PatchSet,
    seed: int = 0,
    plan: FoldPlan | None = None,
    workers: int = 1,
    extra_config: dict | None = None,
) -> RunReport:
    """Train one freshly initialized model per fold and score it on the held-out location."""
    plan = plan or plan_folds(patches)
    seeds = fold_seeds(seed, len(plan))
    jobs = []
    for fold, s in zip(plan, seeds):
        tr, te = plan.split(patches, fold)
        jobs.append((model_cfg, train_cfg, tr, te, s))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold_job, jobs))
    else:
        results = [run_fold(*job) for job in jobs]
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    if extra_config:
        config.update(extra_config)
    return RunReport(
        accuracies=[r[0] for r in results],
        config=config,
        seed=seed,
        confusion=[r[1] for r in results],
        history=[r[2] for r in results],
        test_reads_during_training=[r[3] for r in results],
    )
