"""Query sampling, in-batch listwise loss, AdamW and the training loop."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import Corpus
from .encoders import EncoderConfig, Matcher, Vocab, build_model, save_checkpoint
from .encoders.checkpoint import atomic_write_bytes
from .labeler import PassageLabels
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingPair:
    entity: str
    aspect: str
    labels: PassageLabels

    @property
    def query(self) -> tuple[str, str]:
        return (self.entity, self.aspect)

    @property
    def passage_id(self) -> str:
        return self.labels.passage_id


def sample_epoch(labels: Sequence[PassageLabels], rng: np.random.Generator) -> list[TrainingPair]:
    """One pair per labeled passage, uniform entity choice, shuffled order."""
    pairs = []
    for i in rng.permutation(len(labels)):
        lab = labels[int(i)]
        entities = sorted(lab.entities)
        pairs.append(TrainingPair(entities[int(rng.integers(len(entities)))], lab.aspect, lab))
    return pairs


def sample_pairs(labels: Sequence[PassageLabels], seed: int, epochs: Optional[int] = None) -> Iterator[TrainingPair]:
    if not labels:
        raise ValueError("no labeled passages to sample from")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        yield from sample_epoch(labels, rng)
        epoch += 1


@dataclass
class Batch:
    queries: list[tuple[str, str]]
    passage_ids: list[str]
    targets: np.ndarray
    mask: np.ndarray


def build_batch(pairs: Sequence[TrainingPair]) -> Batch:
    """In-batch targets: passage i is the positive for query i, the rest negatives.

    Other passages carrying exactly the query's entity and aspect are false
    negatives and are masked out of that query's softmax row.
    """
    if len(pairs) < 2:
        raise ValueError("a batch needs at least two pairs")
    ids = [p.passage_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("passages within a batch must be distinct")
    n = len(pairs)
    mask = np.ones((n, n), dtype=bool)
    for i, p in enumerate(pairs):
        for j, other in enumerate(pairs):
            if i != j and p.entity in other.labels.entities and p.aspect == other.labels.aspect:
                mask[i, j] = False
    return Batch([p.query for p in pairs], ids, np.eye(n), mask)


def make_batches(pairs: Sequence[TrainingPair], batch_size: int) -> list[list[TrainingPair]]:
    """Pack pairs into batches of distinct passages.

    A pair whose passage already occurs in the open batch is deferred to the
    next one.  A trailing batch smaller than two pairs is dropped.
    """
    batches: list[list[TrainingPair]] = []
    current: list[TrainingPair] = []
    seen: set[str] = set()
    deferred: list[TrainingPair] = []
    queue = list(pairs)
    while queue or deferred:
        if not queue:
            if current:
                batches.append(current)
                current, seen = [], set()
            queue, deferred = deferred, []
            continue
        pair = queue.pop(0)
        if pair.passage_id in seen:
            deferred.append(pair)
            continue
        current.append(pair)
        seen.add(pair.passage_id)
        if len(current) == batch_size:
            batches.append(current)
            current, seen = [], set()
            queue, deferred = deferred + queue, []
    if current:
        batches.append(current)
    return [b for b in batches if len(b) >= 2]


def listwise_loss(scores: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over passages per query, mean negative log-likelihood of the positives."""
    if scores.shape != np.shape(targets):
        raise ValueError(f"scores {scores.shape} and targets {np.shape(targets)} differ in shape")
    return T.cross_entropy_rows(scores, targets, mask)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def adamw_step(weight: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step_index: int,
               lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place AdamW update; ``step_index`` counts from 1."""
    b1, b2 = betas
    weight *= 1.0 - lr * weight_decay
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step_index)
    v_hat = v / (1.0 - b2 ** step_index)
    weight -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = [0] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.steps[i] += 1
            adamw_step(p.data, p.grad, self.m[i], self.v[i], self.steps[i],
                       self.lr, self.weight_decay, self.betas, self.eps)
        T.current_tape().clear()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    architecture: str = "bi"
    batch_size: int = 32
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    cdv_freeze_epochs: int = 5
    # 0 disables the plateau detector for the frozen CDV phase
    cdv_plateau_patience: int = 5
    cdv_plateau_tol: float = 1e-4
    # stop once an epoch's mean loss falls below this value
    target_loss: Optional[float] = None
    eval_every: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (in-batch negatives)")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    step: int
    loss: float
    phase: str


@dataclass
class TrainResult:
    model: Matcher
    trace: list[EpochRecord]
    best_epoch: Optional[int] = None
    best_metric: Optional[float] = None
    phase_switch_epoch: Optional[int] = None
    checkpoint: Optional[Path] = None

    @property
    def final_loss(self) -> float:
        return self.trace[-1].loss


def build_vocab(corpus: Corpus, labels: Sequence[PassageLabels], min_freq: int = 1) -> Vocab:
    texts = [p.text for p in corpus.passages]
    texts += [e for lab in labels for e in sorted(lab.entities)] + [lab.aspect for lab in labels]
    return Vocab.build(texts, min_freq)


def trace_csv(trace: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "step", "loss", "phase"])
    for r in trace:
        writer.writerow([r.epoch, r.step, repr(r.loss), r.phase])
    return buf.getvalue()


def _plateaued(losses: Sequence[float], patience: int, tol: float) -> bool:
    if patience <= 0 or len(losses) <= patience:
        return False
    return losses[-patience - 1] - min(losses[-patience:]) < tol


def train(corpus: Corpus, labels: Sequence[PassageLabels], config: TrainConfig,
          encoder_config: EncoderConfig, vocab: Optional[Vocab] = None,
          eval_fn: Optional[Callable[[Matcher], float]] = None, out_dir=None,
          model: Optional[Matcher] = None) -> TrainResult:
    """Train one architecture on self-supervised (entity, aspect) -> passage pairs.

    ``eval_fn`` (higher is better) is called every ``eval_every`` epochs and
    at the end; the best model is checkpointed to ``out_dir/best.npz``.
    The loss trace and final checkpoint go to ``out_dir`` as well.
    """
    config.validate()
    if not labels:
        raise ValueError("no labeled passages; annotate the corpus first")
    vocab = vocab or build_vocab(corpus, labels)
    if model is None:
        model = build_model(config.architecture, vocab, replace(encoder_config, seed=encoder_config.seed))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    opt = AdamW(model.parameters(), config.learning_rate, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    is_cdv = config.architecture == "cdv"
    if is_cdv:
        model.phase = "frozen"
    result = TrainResult(model, [])
    step = 0
    losses: list[float] = []
    for epoch in range(1, config.epochs + 1):
        if is_cdv and model.phase == "frozen":
            if epoch > config.cdv_freeze_epochs or _plateaued(losses, config.cdv_plateau_patience, config.cdv_plateau_tol):
                model.phase = "finetune"
                result.phase_switch_epoch = epoch
                logger.info("CDV switches to finetune phase at epoch %d", epoch)
        batch_losses = []
        for pairs in make_batches(sample_epoch(labels, rng), config.batch_size):
            batch = build_batch(pairs)
            passages = [corpus.passage(pid) for pid in batch.passage_ids]
            scores = model.score_matrix(batch.queries, passages)
            if model.logit_scale != 1.0:
                scores = T.scale(scores, model.logit_scale)
            loss = listwise_loss(scores, batch.targets, batch.mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, step {step + 1} "
                    f"(lr={config.learning_rate}, arch={config.architecture})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            batch_losses.append(value)
        if not batch_losses:
            raise ValueError("not enough distinct labeled passages for a single batch")
        epoch_loss = float(np.mean(batch_losses))
        losses.append(epoch_loss)
        phase = model.phase if is_cdv else "train"
        result.trace.append(EpochRecord(epoch, step, epoch_loss, phase))
        logger.debug("epoch %d loss %.6f", epoch, epoch_loss)
        done = config.target_loss is not None and epoch_loss < config.target_loss
        last = done or epoch == config.epochs
        if eval_fn is not None and ((config.eval_every and epoch % config.eval_every == 0) or last):
            metric = float(eval_fn(model))
            if result.best_metric is None or metric > result.best_metric:
                result.best_metric, result.best_epoch = metric, epoch
                if out is not None:
                    save_checkpoint(model, out / "best.npz", {"epoch": epoch, "metric": metric})
        if done:
            break
    if out is not None:
        atomic_write_bytes(out / "loss_trace.csv", trace_csv(result.trace).encode())
        payload = {"train": asdict(config), "encoder": model.config.to_dict()}
        atomic_write_bytes(out / "train_config.json", (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())
        result.checkpoint = out / "model.npz"
        save_checkpoint(model, result.checkpoint, {"epoch": result.trace[-1].epoch})
    return result
