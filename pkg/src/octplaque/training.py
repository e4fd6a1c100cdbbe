"""Weighted cross-entropy training loop with momentum SGD.

The loss weights each example by the inverse frequency of its class so rare
classes are not drowned out.  Two momentum variants are supported:

  standard  v <- momentum * v - lr * grad;  theta <- theta + v
  convex    theta <- momentum * theta + (1 - momentum) * (-lr * grad)

"standard" is classical momentum SGD and the default.  "convex" blends the
parameter itself with the scaled negative gradient; it shrinks parameters
toward zero every step and is kept as an explicit, selectable variant so the
two behaviors can be compared.  Model selection keeps the parameters with the
best accuracy on a fixed validation pool.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, TrainingDivergenceError
from .network import NUM_CLASSES, PlaqueNet, save_checkpoint
from .preprocess import TissueScene
from .sampling import (
    batch_arrays,
    build_validation_set,
    class_weights,
    eligible_centers,
    rotate_patch,
    sample_training_batch,
)

LOG_PROB_FLOOR = 1e-12


def weighted_cross_entropy(
    probs: np.ndarray, labels: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Class-weighted cross entropy and its gradient w.r.t. the logits.

    loss = -(1/N) sum_i w[y_i] * ln(p_i[y_i])
    dL/dlogits_i = w[y_i] * (p_i - onehot(y_i)) / N

    The probability floor guards ln(0); rows are checked to sum to ~1 so a
    caller passing raw logits fails loudly instead of training on garbage.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    n = probs.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
    row_sums = probs.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-4):
        raise ValueError("probability rows do not sum to 1; pass softmax output")
    picked = np.clip(probs[np.arange(n), labels], LOG_PROB_FLOOR, None)
    w = weights[labels]
    loss = float(-(w * np.log(picked)).sum() / n)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    dlogits = w[:, None] * (probs - onehot) / n
    return loss, dlogits


class MomentumSGD:
    """Per-parameter momentum optimizer; see module docstring for the modes."""

    MODES = ("standard", "convex")

    def __init__(self, net: PlaqueNet, learning_rate: float, momentum: float,
                 mode: str = "standard"):
        if mode not in self.MODES:
            raise ConfigError(f"unknown optimizer mode {mode!r}; choose from {self.MODES}")
        if not learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < momentum <= 1:
            raise ConfigError("momentum must be in (0, 1]")
        self.net = net
        self.lr = learning_rate
        self.momentum = momentum
        self.mode = mode
        self.iteration = 0
        self.velocity = {}
        if mode == "standard":
            for name, p in net.named_params():
                self.velocity[name] = np.zeros_like(p.value)

    def step(self) -> None:
        for name, p in self.net.named_params():
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(
                    f"non-finite gradient in {name}", iteration=self.iteration
                )
            if self.mode == "standard":
                v = self.velocity[name]
                v *= self.momentum
                v -= (self.lr * g).astype(v.dtype)
                p.value += v
            else:
                p.value *= self.momentum
                p.value += ((1.0 - self.momentum) * (-self.lr * g)).astype(p.value.dtype)
        self.iteration += 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.0001
    momentum: float = 0.9
    batch_size: int = 216
    max_iterations: int = 20000
    augmentation_period: int = 200
    validation_period: int = 500
    optimizer_mode: str = "standard"
    augmentation_max_angle: float = 50.0
    val_patches_per_image: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.momentum <= 1:
            raise ConfigError("momentum must be in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.augmentation_period < 1 or self.validation_period < 1:
            raise ConfigError("periods must be >= 1")
        if self.optimizer_mode not in MomentumSGD.MODES:
            raise ConfigError(
                f"optimizer_mode must be one of {MomentumSGD.MODES}"
            )


_CONFIG_FIELDS = {f: t for f, t in [
    ("learning_rate", float), ("momentum", float), ("batch_size", int),
    ("max_iterations", int), ("augmentation_period", int),
    ("validation_period", int), ("optimizer_mode", str),
    ("augmentation_max_angle", float), ("val_patches_per_image", int),
    ("seed", int),
]}


def load_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read ``key = value`` lines; '#' starts a comment; unknown keys fail."""
    cfg = base if base is not None else TrainConfig()
    updates = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            updates[key] = _CONFIG_FIELDS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


@dataclass
class TrainResult:
    best_iteration: int
    best_val_accuracy: float
    final_loss: float
    log_rows: list[dict] = field(repr=False, default_factory=list)
    weights: np.ndarray | None = None


def _snapshot(net: PlaqueNet) -> dict[str, np.ndarray]:
    state = {name: p.value.copy() for name, p in net.named_params()}
    state.update({name: a.copy() for name, a in net.named_stats()})
    return state


def _restore(net: PlaqueNet, state: dict[str, np.ndarray]) -> None:
    for name, p in net.named_params():
        p.value[...] = state[name]
    for name, a in net.named_stats():
        a[...] = state[name]


def evaluate_accuracy(net: PlaqueNet, x: np.ndarray, y: np.ndarray,
                      batch_size: int = 216) -> float:
    """Top-1 accuracy in inference mode, processed in bounded batches."""
    hits = 0
    for start in range(0, x.shape[0], batch_size):
        probs = net.forward(x[start : start + batch_size], mode="inference")
        hits += int((np.argmax(probs, axis=1) == y[start : start + batch_size]).sum())
    return hits / x.shape[0]


def scene_label_counts(scenes: list[TissueScene]) -> np.ndarray:
    """Per-class pixel counts inside the tissue masks of the training scenes."""
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for scene in scenes:
        counts += np.bincount(
            scene.labels[scene.mask].ravel(), minlength=NUM_CLASSES
        )[:NUM_CLASSES]
    return counts


def train(
    net: PlaqueNet,
    train_scenes: list[TissueScene],
    val_scenes: list[TissueScene],
    config: TrainConfig,
    checkpoint_path=None,
    log_path=None,
    progress=None,
) -> TrainResult:
    """Run the full loop; the returned/saved parameters are the best-validation
    snapshot, not the last iterate."""
    config.validate()
    if not train_scenes or not val_scenes:
        raise ValueError("need at least one training and one validation scene")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 1])))
    dropout_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 2])))
    val_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 3])))

    weights = class_weights(scene_label_counts(train_scenes))
    centers = [eligible_centers(s) for s in train_scenes]
    val_x, val_y = build_validation_set(
        val_scenes, val_rng, per_image=config.val_patches_per_image
    )
    opt = MomentumSGD(net, config.learning_rate, config.momentum, config.optimizer_mode)

    best_state = _snapshot(net)
    best_acc = -1.0
    best_iter = 0
    loss = float("nan")
    log_rows = []
    augment = config.augmentation_max_angle > 0

    for it in range(config.max_iterations):
        samples = sample_training_batch(train_scenes, config.batch_size, rng, centers)
        # a fresh table of rotation angles is drawn once per augmentation period
        # and reused for every batch inside the period
        if augment:
            if it % config.augmentation_period == 0:
                angles = rng.uniform(0.0, config.augmentation_max_angle,
                                     size=config.batch_size)
            samples = [
                replace(s, patch=rotate_patch(s.patch, a))
                for s, a in zip(samples, angles)
            ]
        x, y = batch_arrays(samples)

        net.zero_grads()
        probs = net.forward(x, mode="train", dropout_rng=dropout_rng)
        loss, dlogits = weighted_cross_entropy(probs, y, weights)
        if not np.isfinite(loss):
            raise TrainingDivergenceError("non-finite loss", iteration=it)
        net.backward(dlogits.astype(probs.dtype, copy=False))
        opt.step()

        row = {"iteration": it, "loss": loss,
               "batch_accuracy": float((np.argmax(probs, axis=1) == y).mean()),
               "val_accuracy": ""}
        if (it + 1) % config.validation_period == 0 or it + 1 == config.max_iterations:
            acc = evaluate_accuracy(net, val_x, val_y, config.batch_size)
            row["val_accuracy"] = acc
            if acc > best_acc:
                best_acc = acc
                best_iter = it + 1
                best_state = _snapshot(net)
        log_rows.append(row)
        if progress is not None:
            progress(row)

    _restore(net, best_state)

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["iteration", "loss", "batch_accuracy", "val_accuracy"]
            )
            writer.writeheader()
            writer.writerows(log_rows)
    if checkpoint_path is not None:
        save_checkpoint(
            net,
            {"iteration": best_iter, "best_val_accuracy": best_acc,
             "seed": config.seed},
            checkpoint_path,
        )
    return TrainResult(
        best_iteration=best_iter,
        best_val_accuracy=best_acc,
        final_loss=loss,
        log_rows=log_rows,
        weights=weights,
    )
