"""Distance-based one-shot classification: metric, loss, episodes, trainers, evaluation."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .dataset import Dataset, ProtocolError
from .model import Model
from .optim import OptimizerState, adam_step
from .skeleton import TARGET_FRAMES, preprocess, stack_sequences
from .tensor import ContractError, NonFiniteError, Tensor

log = logging.getLogger(__name__)

TRAIN_MODES = ("episodic", "traditional")


class SamplingError(ContractError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, metrics: list[dict]):
        super().__init__(message)
        self.metrics = metrics


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------

def pairwise_distance(gq, gs, mask_q=None, mask_s=None) -> float:
    """Sum of per-unit Euclidean distances over units valid in both representations."""
    gq, gs = np.asarray(gq, dtype=np.float64), np.asarray(gs, dtype=np.float64)
    if gq.shape != gs.shape or gq.ndim != 2:
        raise ContractError(f"representations must share a (J, D) shape, got {gq.shape} and {gs.shape}")
    valid = np.ones(gq.shape[0], bool)
    if mask_q is not None:
        valid &= np.asarray(mask_q, bool)
    if mask_s is not None:
        valid &= np.asarray(mask_s, bool)
    return float(np.linalg.norm(gq - gs, axis=1)[valid].sum())


def distance_matrix(q: Tensor, s: Tensor, mask_q: np.ndarray, mask_s: np.ndarray) -> Tensor:
    """Differentiable (Q, S) distances between representations q (Q, J, D) and s (S, J, D)."""
    if q.shape[1:] != s.shape[1:]:
        raise ContractError(f"unit layout mismatch: {q.shape} vs {s.shape}")
    nq, j, d = q.shape
    ns = s.shape[0]
    diff = T.reshape(q, (nq, 1, j, d)) - T.reshape(s, (1, ns, j, d))
    norms = T.norm_lastdim(diff)
    both = (np.asarray(mask_q, bool)[:, None, :] & np.asarray(mask_s, bool)[None, :, :]).astype(T.default_dtype())
    return T.sum_(norms * Tensor(both), axis=-1)


def distance_matrix_numpy(q: np.ndarray, s: np.ndarray, mask_q: np.ndarray, mask_s: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    both = np.asarray(mask_q, bool)[:, None, :] & np.asarray(mask_s, bool)[None, :, :]
    out = np.empty((len(q), len(s)))
    for i in range(len(q)):
        out[i] = (np.linalg.norm(q[i][None] - s, axis=-1) * both[i]).sum(axis=-1)
    return out


def class_probabilities(distances) -> np.ndarray:
    """Softmax over negated distances along the last axis."""
    d = -np.asarray(distances, dtype=np.float64)
    d -= d.max(axis=-1, keepdims=True)
    e = np.exp(d)
    return e / e.sum(axis=-1, keepdims=True)


def predict(distances: np.ndarray, classes: Iterable[int]) -> np.ndarray:
    """Nearest support per row; exact ties go to the lowest class id."""
    classes = np.asarray(list(classes))
    order = np.argsort(classes, kind="stable")
    d = np.asarray(distances)[..., order]
    return classes[order][np.argmin(d, axis=-1)]


def nll_from_distances(distances: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-probability of the target column (log-sum-exp form)."""
    logp = T.log_softmax_lastdim(-distances)
    onehot = np.zeros(distances.shape, dtype=T.default_dtype())
    onehot[np.arange(len(targets)), targets] = 1.0
    return -T.sum_(logp * Tensor(onehot)) * (1.0 / len(targets))


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Episode:
    classes: tuple[int, ...]
    support: tuple[int, ...]          # dataset index per class, aligned with ``classes``
    queries: tuple[int, ...]
    query_classes: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise SamplingError("support classes must be distinct")
        if not set(self.query_classes) <= set(self.classes):
            raise SamplingError("query class outside the support set")
        if set(self.support) & set(self.queries):
            raise SamplingError("a support sample is also a query")

    @property
    def n_way(self) -> int:
        return len(self.classes)

    def query_targets(self) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.classes)}
        return np.array([pos[c] for c in self.query_classes], dtype=np.int64)


def sample_episode(by_class: dict[int, list[int]], n_way: int, queries_per_class: int,
                   rng: np.random.Generator) -> Episode:
    """Draw ``n_way`` classes, one support and ``queries_per_class`` queries from each."""
    need = 1 + queries_per_class
    eligible = sorted(c for c, idx in by_class.items() if len(idx) >= need)
    if n_way > len(eligible):
        raise SamplingError(f"{n_way}-way episode needs {n_way} classes with >= {need} samples; have {len(eligible)}")
    classes = sorted(int(c) for c in rng.choice(eligible, size=n_way, replace=False))
    support, queries, qcls = [], [], []
    for c in classes:
        pick = rng.choice(by_class[c], size=need, replace=False)
        support.append(int(pick[0]))
        queries.extend(int(i) for i in pick[1:])
        qcls.extend([c] * queries_per_class)
    return Episode(tuple(classes), tuple(support), tuple(queries), tuple(qcls))


# ---------------------------------------------------------------------------
# configuration / reports
# ---------------------------------------------------------------------------

@dataclass
class TrainRunConfig:
    mode: str = "episodic"
    epochs: int = 100
    episodes_per_epoch: int = 200
    n_way: int = 20
    queries_per_class: int = 1
    batch_size: int = 64
    patience: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-6
    val_episodes: int = 100
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ContractError(f"unknown training mode {self.mode!r}")
        if self.epochs < 1 or self.patience < 1:
            raise ContractError("epochs and patience must be >= 1")


@dataclass
class TrainResult:
    metrics: list[dict]
    best_epoch: int
    best_val_accuracy: float
    stopped_early: bool


@dataclass
class EvalReport:
    predictions: list[int]
    targets: list[int]
    sample_indices: list[int]
    classes: list[int]
    accuracy: float
    per_class_accuracy: dict[str, float]
    confusion: list[list[int]]
    distances: list[list[float]] | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------

def dataset_arrays(ds: Dataset, target: int = TARGET_FRAMES) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (n, 3, T, U, M) inputs.

    Raw datasets are aligned and length-normalised here; containers whose
    ``meta["preprocessed"]`` records the same frame count are used as stored.
    """
    if ds.meta.get("preprocessed") == target:
        return stack_sequences(ds.sequences)
    return stack_sequences(preprocess(s, target) for s in ds.sequences)


def _split_by_class(ds: Dataset, split: str) -> dict[int, list[int]]:
    return ds.by_class(split)


def episode_loss(model: Model, x: np.ndarray, mask: np.ndarray, episode: Episode, training: bool,
                 rng: np.random.Generator | None) -> tuple[Tensor, np.ndarray]:
    """Episode loss (one joint forward pass over supports and queries) and the distances."""
    idx = list(episode.support) + list(episode.queries)
    reps, umask = model.represent(x[idx], mask[idx], training=training, rng=rng)
    n = episode.n_way
    s = reps[:n]
    q = reps[n:]
    d = distance_matrix(q, s, umask[n:], umask[:n])
    return nll_from_distances(d, episode.query_targets()), d.data


def _episodes_accuracy(reps: np.ndarray, umask: np.ndarray, episodes: list[Episode], pos: dict[int, int]) -> float:
    correct = total = 0
    for ep in episodes:
        s = [pos[i] for i in ep.support]
        q = [pos[i] for i in ep.queries]
        d = distance_matrix_numpy(reps[q], reps[s], umask[q], umask[s])
        pred = predict(d, ep.classes)
        correct += int((pred == np.array(ep.query_classes)).sum())
        total += len(q)
    return correct / total


class _EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.best_state = None

    def update(self, epoch: int, score: float, model: Model) -> bool:
        """Record a validation score; True when training should stop."""
        if score > self.best:
            self.best, self.best_epoch = score, epoch
            self.best_state = model.state()
        return epoch - self.best_epoch >= self.patience


Validator = Callable[[Model, int], float]


def _run(model: Model, cfg: TrainRunConfig, step_fn, validator: Validator, on_epoch) -> TrainResult:
    state = OptimizerState(base_lr=cfg.lr, weight_decay=cfg.weight_decay, total_epochs=cfg.epochs,
                           current_lr=cfg.lr)
    stopper = _EarlyStopper(cfg.patience)
    metrics: list[dict] = []
    stopped = False
    last_good = model.state()
    for epoch in range(cfg.epochs):
        lr = state.set_epoch(epoch)
        losses = []
        for loss_value in step_fn(epoch, state):
            if not math.isfinite(loss_value):
                model.load_state(last_good)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", metrics)
            losses.append(loss_value)
        last_good = model.state()
        val = float(validator(model, epoch))
        record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_accuracy": val}
        metrics.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.info("epoch %d lr %.2e loss %.4f val %.4f", epoch, lr, record["train_loss"], val)
        if stopper.update(epoch, val, model):
            stopped = True
            break
    if stopper.best_state is not None:
        model.load_state(stopper.best_state)
    return TrainResult(metrics, stopper.best_epoch, stopper.best, stopped)


def _optimizer_update(model: Model, tape: T.Tape, loss: Tensor, state: OptimizerState) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        tape.clear()
        return value
    model.zero_grad()
    T.backward(loss, tape)
    try:
        adam_step(model.trainable(), state)
    except NonFiniteError:
        return math.nan
    return value


def episodic_validator(ds: Dataset, x: np.ndarray, mask: np.ndarray, cfg: TrainRunConfig) -> Validator:
    """Accuracy over fixed validation episodes (representations cached per epoch).

    Each episode takes its one support per class from the training samples of
    that class and its query from the held-out samples, so a single held-out
    sample per class is enough.
    """
    held_out = _split_by_class(ds, "val")
    train_side = _split_by_class(ds, "aux")
    classes = sorted(c for c in held_out if c in train_side)
    if len(classes) < 2:
        return lambda model, epoch: 0.0
    n_way = min(cfg.n_way, len(classes))
    rng = np.random.default_rng([cfg.seed, 424242])
    episodes = []
    for _ in range(cfg.val_episodes):
        chosen = sorted(int(c) for c in rng.choice(classes, size=n_way, replace=False))
        support = tuple(int(rng.choice(train_side[c])) for c in chosen)
        queries = tuple(int(rng.choice(held_out[c])) for c in chosen)
        episodes.append(Episode(tuple(chosen), support, queries, tuple(chosen)))
    used = sorted({i for ep in episodes for i in ep.support + ep.queries})
    pos = {i: k for k, i in enumerate(used)}

    def validate(model: Model, epoch: int) -> float:
        reps, umask = model.represent_numpy(x[used], mask[used])
        return _episodes_accuracy(reps, umask, episodes, pos)

    return validate


def train_episodic(model: Model, ds: Dataset, cfg: TrainRunConfig, validator: Validator | None = None,
                   on_epoch=None, arrays=None) -> TrainResult:
    """Episodic meta-training on the ``aux`` split with cosine-annealed Adam and early stopping."""
    x, mask = arrays if arrays is not None else dataset_arrays(ds)
    by_class = _split_by_class(ds, "aux")
    n_way = min(cfg.n_way, len(by_class))
    if n_way < 2:
        raise SamplingError("episodic training needs at least 2 auxiliary classes")
    if validator is None:
        validator = episodic_validator(ds, x, mask, cfg)
    rng = np.random.default_rng([cfg.seed, 1])

    def steps(epoch, state):
        for _ in range(cfg.episodes_per_epoch):
            ep = sample_episode(by_class, n_way, cfg.queries_per_class, rng)
            with T.Tape() as tape:
                loss, _ = episode_loss(model, x, mask, ep, True, rng)
            yield _optimizer_update(model, tape, loss, state)

    return _run(model, cfg, steps, validator, on_epoch)


# ---------------------------------------------------------------------------
# traditional (batch classification) training
# ---------------------------------------------------------------------------

HEAD_W = "head.W"
HEAD_B = "head.b"


def attach_classifier(model: Model, n_classes: int, rng: np.random.Generator) -> None:
    d = model.config.encoder.out_channels
    lim = 1.0 / math.sqrt(d)
    model.extra[HEAD_W] = Tensor(rng.uniform(-lim, lim, (n_classes, d)), requires_grad=True)
    model.extra[HEAD_B] = Tensor(np.zeros(n_classes), requires_grad=True)


def detach_classifier(model: Model) -> None:
    model.extra.pop(HEAD_W, None)
    model.extra.pop(HEAD_B, None)


def classifier_logits(model: Model, reps: Tensor, umask: np.ndarray) -> Tensor:
    """Average the valid units of G' into one vector per sample and apply the linear head."""
    w = umask / umask.sum(axis=1, keepdims=True)
    pooled = T.einsum("bjd,bj->bd", reps, Tensor(w))
    return T.einsum("bd,cd->bc", pooled, model.extra[HEAD_W]) + model.extra[HEAD_B]


def train_traditional(model: Model, ds: Dataset, cfg: TrainRunConfig, validator: Validator | None = None,
                      on_epoch=None, arrays=None, keep_head: bool = False) -> TrainResult:
    """Cross-entropy training of a linear head over the pooled representation.

    The head is removed afterwards (unless ``keep_head``); evaluation then uses
    nearest-neighbour matching exactly as after episodic training.
    """
    x, mask = arrays if arrays is not None else dataset_arrays(ds)
    aux = ds.indices("aux")
    classes = ds.classes_in("aux")
    if len(classes) < 2:
        raise SamplingError("traditional training needs at least 2 auxiliary classes")
    col = {c: i for i, c in enumerate(classes)}
    y = np.array([col.get(s.label, -1) for s in ds.sequences])
    rng = np.random.default_rng([cfg.seed, 2])
    attach_classifier(model, len(classes), rng)
    val_idx = [i for i in ds.indices("val") if y[i] >= 0]

    if validator is None:
        def validator(model, epoch):
            if not val_idx:
                return 0.0
            reps, umask = model.represent_numpy(x[val_idx], mask[val_idx])
            with T.no_grad():
                logits = classifier_logits(model, Tensor(reps), umask).data
            return float((logits.argmax(1) == y[val_idx]).mean())

    def steps(epoch, state):
        order = rng.permutation(aux)
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            with T.Tape() as tape:
                reps, umask = model.represent(x[batch], mask[batch], training=True, rng=rng)
                logits = classifier_logits(model, reps, umask)
                loss = nll_from_distances(-logits, y[batch])
            yield _optimizer_update(model, tape, loss, state)

    result = _run(model, cfg, steps, validator, on_epoch)
    if not keep_head:
        detach_classifier(model)
    return result


def train(model: Model, ds: Dataset, cfg: TrainRunConfig, **kw) -> TrainResult:
    if cfg.mode == "episodic":
        return train_episodic(model, ds, cfg, **kw)
    return train_traditional(model, ds, cfg, **kw)


# ---------------------------------------------------------------------------
# one-shot evaluation
# ---------------------------------------------------------------------------

def evaluate_oneshot(model: Model, ds: Dataset, include_references: bool = False, dump_distances: bool = False,
                     arrays=None, batch_size: int = 64) -> EvalReport:
    """Classify every evaluation sample by its nearest class reference."""
    refs = ds.reference_of()
    if not refs:
        raise ProtocolError("dataset has no evaluation split")
    classes = sorted(refs)
    x, mask = arrays if arrays is not None else dataset_arrays(ds)
    queries = sorted(i for i in ds.indices("eval") if include_references or not ds.references[i])
    ref_idx = [refs[c] for c in classes]
    r_reps, r_mask = model.represent_numpy(x[ref_idx], mask[ref_idx], batch_size)
    q_reps, q_mask = model.represent_numpy(x[queries], mask[queries], batch_size)
    d = distance_matrix_numpy(q_reps, r_reps, q_mask, r_mask)
    pred = predict(d, classes)
    targets = np.array([ds.sequences[i].label for i in queries])
    pos = {c: k for k, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=int)
    for t_, p_ in zip(targets, pred):
        confusion[pos[int(t_)], pos[int(p_)]] += 1
    per_class = {}
    for c in classes:
        sel = targets == c
        per_class[str(c)] = float((pred[sel] == c).mean()) if sel.any() else float("nan")
    correct = int((pred == targets).sum())
    return EvalReport(
        predictions=[int(p) for p in pred],
        targets=[int(t) for t in targets],
        sample_indices=[int(i) for i in queries],
        classes=[int(c) for c in classes],
        accuracy=correct / len(queries) if queries else float("nan"),
        per_class_accuracy=per_class,
        confusion=confusion.tolist(),
        distances=d.tolist() if dump_distances else None,
    )
