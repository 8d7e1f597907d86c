"""SGD training loop for the two-stream model.

One step samples a batch of clip tuples, augments both modalities, runs both
encoder streams, applies the selected loss, and updates every parameter with
momentum SGD under a one-drop learning-rate schedule.  Each step also logs a
row of geometry measurements so collapse and convergence are observable from
the metrics file alone.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import Dataset, SamplerConfig, augment_pair, sample_tuple_batch
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    NumericsError,
    TrainingDiverged,
)
from .losses import (
    MEASUREMENT_EPSILON,
    TupleBatch,
    loss_combined,
    loss_concat,
    loss_cross,
    loss_div,
)
from .model import (
    ConcatHead,
    TwoStreamModel,
    init_concat_head,
    rng_streams,
    save_checkpoint,
    save_head,
)
from .tensor import Tape, Tensor, concat, narrow

LOSS_MODES = ("full", "cross_only", "div_only", "concat")
COLLAPSE_THRESHOLD = 0.05
COLLAPSE_WINDOW = 100


@dataclass(frozen=True)
class TrainingConfig:
    B: int = 30  # tuples per batch; the batch holds 2B clip windows
    epsilon: float = 1e-5
    lr_initial: float = 0.01
    lr_drop_factor: float = 0.1
    lr_drop_iteration: int = 3000
    total_iterations: int = 4000
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss_mode: str = "full"
    loss_weights: tuple = (1.0, 1.0)
    distance: str = "cosine"
    seed: int = 0
    checkpoint_every: int = 0  # 0 writes the final checkpoint only
    concat_hidden: int = 64
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self):
        if self.B < 1:
            raise ConfigError(f"B must be >= 1, got {self.B}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        for name in ("lr_initial", "lr_drop_factor", "momentum"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr_initial == 0:
            raise ConfigError("lr_initial must be positive")
        if self.total_iterations < 0 or self.lr_drop_iteration < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(
                f"loss_mode must be one of {', '.join(LOSS_MODES)}, "
                f"got {self.loss_mode!r}"
            )
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


def lr_at(config: TrainingConfig, iteration: int) -> float:
    if iteration >= config.lr_drop_iteration:
        return config.lr_initial * config.lr_drop_factor
    return config.lr_initial


@dataclass
class MetricsRecord:
    iteration: int
    loss_total: float
    loss_cross: float
    loss_div: float
    mean_cross_modal_distance: float
    mean_cross_pair_distance_f: float
    mean_cross_pair_distance_g: float
    feature_spread: float
    lr: float


CSV_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


def write_metrics(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [r.iteration] + [repr(getattr(r, c)) for c in CSV_COLUMNS[1:]]
            )


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(CSV_COLUMNS):
            raise FormatError("header", f"expected {list(CSV_COLUMNS)}, got {header}")
        out = []
        for row in reader:
            if len(row) != len(CSV_COLUMNS):
                raise FormatError("row", f"expected {len(CSV_COLUMNS)} fields, "
                                         f"got {len(row)}")
            out.append(
                MetricsRecord(int(row[0]), *(float(v) for v in row[1:]))
            )
    return out


def sgd_step(param, grad, velocity, lr, momentum, weight_decay):
    """One momentum update; returns (new_param, new_velocity).

    v <- momentum*v + grad + weight_decay*param; p <- p - lr*v.
    """
    param = np.asarray(param)
    grad = np.asarray(grad)
    velocity = np.asarray(velocity)
    if not (param.shape == grad.shape == velocity.shape):
        raise DimensionError(
            f"param {param.shape}, grad {grad.shape}, velocity "
            f"{velocity.shape} must match"
        )
    v = momentum * velocity + grad + weight_decay * param
    return param - lr * v, v


class MomentumSGD:
    """Per-parameter velocity slots; decay-exempt params skip weight decay."""

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = {}

    def step(self, params, lr: float):
        for p in params:
            grad = p.tensor.grad
            if grad is None:
                # a parameter off the loss path has an exactly-zero gradient
                grad = np.zeros_like(p.tensor.data)
            v = self.velocities.get(p.name)
            if v is None:
                v = np.zeros_like(p.tensor.data)
            wd = self.weight_decay if p.decay else 0.0
            new_p, new_v = sgd_step(p.tensor.data, grad, v, lr,
                                    self.momentum, wd)
            p.tensor.data[...] = new_p
            self.velocities[p.name] = new_v


def _eps_norms(x, eps):
    return np.sqrt((x * x).sum(axis=1) + eps)


def _row_distances(a, b, eps):
    """Bounded cosine distance per aligned row pair."""
    dots = (a * b).sum(axis=1)
    return 1.0 - dots / (_eps_norms(a, eps) * _eps_norms(b, eps))


def mean_pairwise_distance(x, eps=MEASUREMENT_EPSILON) -> float:
    """Mean bounded cosine distance over all unordered row pairs."""
    n = x.shape[0]
    if n < 2:
        raise DimensionError(f"need at least 2 rows, got {n}")
    u = x / _eps_norms(x, eps)[:, None]
    sim = u @ u.T
    iu = np.triu_indices(n, k=1)
    return float(np.mean(1.0 - sim[iu]))


def measure_batch(f_rows, g_rows, b: int, eps=MEASUREMENT_EPSILON):
    """Geometry measurements on detached (2B, D) feature blocks."""
    return {
        "mean_cross_modal_distance": float(
            _row_distances(f_rows, g_rows, eps).mean()
        ),
        "mean_cross_pair_distance_f": float(
            _row_distances(f_rows[:b], f_rows[b:], eps).mean()
        ),
        "mean_cross_pair_distance_g": float(
            _row_distances(g_rows[:b], g_rows[b:], eps).mean()
        ),
        "feature_spread": mean_pairwise_distance(f_rows, eps),
    }


def detect_collapse(records, window: int = COLLAPSE_WINDOW,
                    threshold: float = COLLAPSE_THRESHOLD) -> bool:
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    if len(records) < window:
        raise ConfigError(
            f"need at least {window} records, got {len(records)}"
        )
    tail = records[-window:]
    return float(np.mean([r.feature_spread for r in tail])) < threshold


def _effective_weights(config: TrainingConfig):
    w0, w1 = config.loss_weights
    if config.loss_mode == "cross_only":
        return (w0, 0.0)
    if config.loss_mode == "div_only":
        return (0.0, w1)
    return (float(w0), float(w1))


def _assemble_rows(batch, sampler, rng):
    aug = [
        (augment_pair(pa, sampler, rng), augment_pair(pb, sampler, rng))
        for pa, pb in batch
    ]
    rgb = np.stack([p.rgb for p, _ in aug] + [p.rgb for _, p in aug])
    sod = np.stack([p.sod for p, _ in aug] + [p.sod for _, p in aug])
    return rgb, sod


def _component_losses(f_rows, g_rows, b, config):
    """Unweighted L_cross and L_div values at the training epsilon."""
    batch = TupleBatch(f_i=Tensor(f_rows[:b]), f_j=Tensor(f_rows[b:]),
                       g_i=Tensor(g_rows[:b]), g_j=Tensor(g_rows[b:]))
    c = loss_cross(batch, epsilon=config.epsilon, distance=config.distance)
    d = loss_div(batch, epsilon=config.epsilon, distance=config.distance)
    return float(c.data), float(d.data)


def train(dataset: Dataset, model: TwoStreamModel, config: TrainingConfig,
          head: ConcatHead | None = None, checkpoint_dir=None, progress=None):
    """Run the configured number of steps, mutating the model in place.

    Returns (records, head); head is None unless loss_mode is concat.  The
    loop is deterministic given the config seed.  A non-finite value anywhere
    in a step raises TrainingDiverged carrying the last complete record.
    ``progress`` is called with each fresh record; it must not mutate it.
    """
    config.validate()
    if config.loss_mode == "concat" and head is None:
        head = init_concat_head(model.f.spec.feature_dim, config.concat_hidden,
                                config.seed)
    rng = rng_streams(config.seed)["train"]
    sampler = replace(config.sampler, tuple_count=config.B)
    optimizer = MomentumSGD(config.momentum, config.weight_decay)
    params = model.parameters()
    if config.loss_mode == "concat":
        params = params + head.parameters()
    records = []
    b = config.B
    dropout_rng = rng  # single stream keeps draw order reproducible
    for it in range(config.total_iterations):
        lr = lr_at(config, it)
        try:
            batch = sample_tuple_batch(dataset, sampler, rng)
            rgb, sod = _assemble_rows(batch, sampler, rng)
            for p in params:
                p.tensor.zero_grad()
            with Tape() as tape:
                feats_f = model.forward_f(Tensor(rgb), "train", rng=dropout_rng)
                feats_g = model.forward_g(Tensor(sod), "train", rng=dropout_rng)
                if config.loss_mode == "concat":
                    g_swapped = concat(
                        [narrow(feats_g, 0, b, b), narrow(feats_g, 0, 0, b)],
                        axis=0,
                    )
                    logits = concat(
                        [head.logits(feats_f, feats_g),
                         head.logits(feats_f, g_swapped)],
                        axis=0,
                    )
                    labels = np.array([1] * (2 * b) + [0] * (2 * b))
                    loss = loss_concat(logits, labels)
                else:
                    tuples = TupleBatch(
                        f_i=narrow(feats_f, 0, 0, b),
                        f_j=narrow(feats_f, 0, b, b),
                        g_i=narrow(feats_g, 0, 0, b),
                        g_j=narrow(feats_g, 0, b, b),
                    )
                    loss = loss_combined(
                        tuples,
                        weights=_effective_weights(config),
                        epsilon=config.epsilon,
                        distance=config.distance,
                    )
                tape.backward(loss)
            optimizer.step(params, lr)
            f_rows, g_rows = feats_f.data, feats_g.data
            lc, ld = _component_losses(f_rows, g_rows, b, config)
            records.append(MetricsRecord(
                iteration=it,
                loss_total=float(loss.data),
                loss_cross=lc,
                loss_div=ld,
                lr=lr,
                **measure_batch(f_rows, g_rows, b),
            ))
        except NumericsError as e:
            raise TrainingDiverged(it, records[-1] if records else None) from e
        if progress:
            progress(records[-1])
        if (checkpoint_dir and config.checkpoint_every
                and (it + 1) % config.checkpoint_every == 0
                and it + 1 < config.total_iterations):
            save_checkpoint(
                model, os.path.join(checkpoint_dir, f"model_{it + 1:06d}.xmck")
            )
    if checkpoint_dir:
        save_checkpoint(model, os.path.join(checkpoint_dir, "model_final.xmck"))
        if head is not None:
            save_head(head, os.path.join(checkpoint_dir, "head_final.xmck"))
    return records, head
