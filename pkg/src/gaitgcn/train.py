"""Identity-classification training with a stepped learning-rate schedule,
plus embedding extraction for the retrieval protocol."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import skeleton
from . import tensor as tz
from .model import EmbeddingRecord, MultiStreamModel
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 65
    batch_size: int = 128
    lr_init: float = 0.1
    decay_epochs: tuple = (45, 55)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.epochs < 1 or self.batch_size < 1 or self.lr_init <= 0:
            raise ValueError("epochs, batch_size and lr_init must be positive")

    @classmethod
    def scaled(cls, epochs: int, reference_epochs: int = 65,
               reference_decay=(45, 55), **kw) -> "TrainConfig":
        """Shift the decay points proportionally for a different run length."""
        decay = tuple(int(round(d * epochs / reference_epochs))
                      for d in reference_decay)
        return cls(epochs=epochs, decay_epochs=decay, **kw)

    def learning_rate(self, epoch: int) -> float:
        drops = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.lr_init * self.decay_factor ** drops


class SGD:
    """Momentum descent: v = mu v + g + wd p; p <- p - lr v."""

    def __init__(self, params, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    acc: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "lr": self.lr,
                           "loss": self.loss, "acc": self.acc},
                          sort_keys=True)


def subject_labels(sequences) -> dict[str, int]:
    """Stable class ids: subjects sorted by id."""
    return {s: i for i, s in enumerate(sorted({q.subject_id
                                               for q in sequences}))}


def train(model: MultiStreamModel, sequences, config: TrainConfig,
          topo: skeleton.SkeletonTopology | None = None,
          log_path: str | None = None,
          stop_accuracy: float | None = None) -> list[EpochMetrics]:
    """Optimize subject-identity cross-entropy over all model streams.

    Per-sample losses are averaged within each minibatch; every stream of
    the model contributes its own classifier loss on its own input. A
    non-finite loss aborts immediately rather than training through it.
    When stop_accuracy is set, training ends after the first epoch whose
    training accuracy reaches it.
    """
    sequences = list(sequences)
    labels = subject_labels(sequences)
    if len(labels) < 2:
        raise ValueError(f"need at least 2 subjects to train, got {len(labels)}")
    if len(labels) != model.config.n_classes:
        raise ValueError(f"model has {model.config.n_classes} classes but the "
                         f"training split has {len(labels)} subjects")
    if config.batch_size > len(sequences):
        raise ValueError(f"batch size {config.batch_size} exceeds training "
                         f"set size {len(sequences)}")
    topo = topo or skeleton.topology_from_parents(model.config.parents)
    bundles = [(skeleton.derive_streams(q.coords, topo), labels[q.subject_id])
               for q in sequences]

    opt = SGD(model.parameters(), config.lr_init, config.momentum,
              config.weight_decay)
    history = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            opt.lr = config.learning_rate(epoch)
            order = np.random.default_rng(
                np.random.SeedSequence([config.seed, epoch])
            ).permutation(len(bundles))
            total_loss = 0.0
            correct = 0
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                opt.zero_grad()
                for idx in batch:
                    bundle, label = bundles[idx]
                    out = model.forward(bundle, training=True)
                    losses = [tz.softmax_cross_entropy(
                        out["streams"][name]["logits"], label)
                        for name in model.stream_names()]
                    sample_loss = losses[0]
                    for extra in losses[1:]:
                        sample_loss = tz.add(sample_loss, extra)
                    loss_value = float(sample_loss.data)
                    if not np.isfinite(loss_value):
                        raise RuntimeError(
                            f"training diverged: non-finite loss at epoch "
                            f"{epoch} (lr {opt.lr})")
                    total_loss += loss_value
                    combined = np.sum([out["streams"][n]["logits"].data
                                       for n in model.stream_names()], axis=0)
                    correct += int(np.argmax(combined)) == label
                    sample_loss.scale(1.0 / len(batch)).backward()
                opt.step()
            metrics = EpochMetrics(
                epoch=epoch, lr=opt.lr,
                loss=total_loss / len(bundles),
                acc=correct / len(bundles))
            history.append(metrics)
            if log_fh:
                log_fh.write(metrics.to_json() + "\n")
            if stop_accuracy is not None and metrics.acc >= stop_accuracy:
                break
    finally:
        if log_fh:
            log_fh.close()
    return history


def extract_embeddings(model: MultiStreamModel, sequences,
                       topo: skeleton.SkeletonTopology | None = None
                       ) -> list[EmbeddingRecord]:
    """Evaluation-mode embeddings, one record per sequence."""
    topo = topo or skeleton.topology_from_parents(model.config.parents)
    out = []
    for q in sequences:
        bundle = skeleton.derive_streams(q.coords, topo)
        out.append(EmbeddingRecord(
            subject_id=q.subject_id, condition=q.condition,
            seq_index=q.seq_index, view_deg=q.view_deg,
            vector=model.embed_bundle(bundle), source="model"))
    return out
