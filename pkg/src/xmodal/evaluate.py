"""Frozen-feature evaluation: linear probes, retrieval, saliency, ablations.

Nothing here updates encoder weights.  Probes train a single affine softmax
classifier on standardized eval-mode features; retrieval ranks features of the
opposite stream by bounded cosine distance; saliency differentiates a sum of
strong final-conv activations back to the input.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, ModalityPair, centered_pair
from .errors import (
    ConfigError,
    FormatError,
    NumericsError,
    ProtocolError,
    TrainingDiverged,
)
from .losses import MEASUREMENT_EPSILON
from .model import TwoStreamModel, init_model
from .tensor import Tape, Tensor, gather_flat, tsum
from .trainer import TrainingConfig, train

TASKS = ("shape_class", "motion_class")
MODALITIES = ("rgb", "sod")
ABLATION_ARMS = ("full", "cross_only", "div_only", "concat", "random_init")
SWEEP_WEIGHTS = ((2.0, 1.0), (1.0, 1.0), (1.0, 2.0))

REPORT_HEADER = "xmodal-ablation v1"


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1.0
    momentum: float = 0.9
    max_epochs: int = 3000
    grad_tol: float = 1e-6
    test_fraction: float = 0.3
    min_per_class: int = 10
    seed: int = 0


@dataclass(frozen=True)
class ProbeResult:
    task: str
    modality: str
    accuracy: float
    n_train: int
    n_test: int
    seed: int


@dataclass(frozen=True)
class RetrievalResult:
    k: int
    n: int
    recall_rgb_to_sod: float
    recall_sod_to_rgb: float


@dataclass
class ArmResult:
    arm: str
    failed: bool = False
    fail_reason: str = ""
    probes: list = field(default_factory=list)


@dataclass
class AblationReport:
    seed: int
    n_train_clips: int
    n_test_clips: int
    arms: list = field(default_factory=list)
    sweep: list = field(default_factory=list)  # (w_cross, w_div, ProbeResult)

    def arm(self, name: str) -> ArmResult:
        for a in self.arms:
            if a.arm == name:
                return a
        raise ConfigError(f"no arm named {name} in report")

    def probe(self, arm: str, task: str, modality: str) -> ProbeResult:
        for p in self.arm(arm).probes:
            if p.task == task and p.modality == modality:
                return p
        raise ConfigError(f"no {task}/{modality} probe for arm {arm}")


# ---------------------------------------------------------------------------
# feature extraction

def center_frame(dataset: Dataset) -> int:
    """Deterministic evaluation window: the middle candidate center."""
    centers = dataset.candidate_centers()
    return centers.start + (len(centers) - 1) // 2


def extract_features(model: TwoStreamModel, dataset: Dataset, modality: str,
                     indices=None, crop_size: int = 32,
                     batch_size: int = 64) -> np.ndarray:
    """Eval-mode features for the centered window of each requested clip."""
    if modality not in MODALITIES:
        raise ConfigError(f"modality must be one of {MODALITIES}, got {modality!r}")
    if indices is None:
        indices = np.arange(len(dataset))
    indices = np.asarray(indices, dtype=np.intp)
    center = center_frame(dataset)
    forward = model.forward_f if modality == "rgb" else model.forward_g
    rows = []
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo : lo + batch_size]
        stack = []
        for i in chunk:
            pair = centered_pair(dataset.pair(int(i), center), crop_size)
            stack.append(pair.rgb if modality == "rgb" else pair.sod)
        x = Tensor(np.ascontiguousarray(np.stack(stack), dtype=np.float64))
        rows.append(forward(x, "eval").data)
    return np.concatenate(rows, axis=0)


def split_clips(n_clips: int, test_fraction: float, seed: int):
    """Disjoint (train, test) index arrays; sorted for stable iteration."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(round(n_clips * test_fraction))
    if n_test < 1 or n_test >= n_clips:
        raise ConfigError(
            f"split leaves no data: {n_clips} clips, test_fraction {test_fraction}"
        )
    perm = np.random.default_rng(seed).permutation(n_clips)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ---------------------------------------------------------------------------
# linear probe

def fit_softmax_probe(train_x, train_y, test_x, test_y, n_classes: int,
                      config: ProbeConfig) -> float:
    """Multinomial logistic regression by full-batch gradient descent.

    Deterministic: zero init, no sampling.  Stops at grad norm below
    ``grad_tol`` or after ``max_epochs``.  Returns held-out accuracy.
    """
    train_y = np.asarray(train_y, dtype=np.intp)
    test_y = np.asarray(test_y, dtype=np.intp)
    missing = sorted(set(range(n_classes)) - set(np.unique(train_y).tolist()))
    if missing:
        raise ProtocolError(
            f"classes {missing} absent from the probe train split"
        )
    mu = train_x.mean(axis=0)
    sd = np.maximum(train_x.std(axis=0), 1e-8)
    xt = np.hstack([(train_x - mu) / sd, np.ones((len(train_x), 1))])
    xs = np.hstack([(test_x - mu) / sd, np.ones((len(test_x), 1))])
    n = len(xt)
    w = np.zeros((xt.shape[1], n_classes))
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), train_y] = 1.0
    velocity = np.zeros_like(w)
    for _ in range(config.max_epochs):
        z = xt @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        grad = xt.T @ (p - onehot) / n
        if float(np.sqrt((grad * grad).sum())) < config.grad_tol:
            break
        velocity = config.momentum * velocity + grad
        w -= config.lr * velocity
    pred = (xs @ w).argmax(axis=1)
    return float((pred == test_y).mean())


def _task_labels(dataset: Dataset, task: str):
    if task == "shape_class":
        return dataset.shape_labels, dataset.shape_classes
    if task == "motion_class":
        return dataset.motion_labels, dataset.motion_classes
    raise ConfigError(f"task must be one of {TASKS}, got {task!r}")


def linear_probe(model: TwoStreamModel, dataset: Dataset, task: str,
                 modality: str, config: ProbeConfig | None = None,
                 split=None) -> ProbeResult:
    """Accuracy of an affine classifier on frozen features of one stream."""
    config = config or ProbeConfig()
    labels, n_classes = _task_labels(dataset, task)
    if split is None:
        split = split_clips(len(dataset), config.test_fraction, config.seed)
    train_idx, test_idx = split
    counts = np.bincount(labels[train_idx], minlength=n_classes)
    if counts.min() == 0:
        raise ProtocolError(
            f"classes {np.flatnonzero(counts == 0).tolist()} absent from the "
            f"probe train split"
        )
    if counts.min() < config.min_per_class:
        raise ProtocolError(
            f"probe needs >= {config.min_per_class} train clips per class, "
            f"worst class has {int(counts.min())}"
        )
    train_x = extract_features(model, dataset, modality, train_idx)
    test_x = extract_features(model, dataset, modality, test_idx)
    acc = fit_softmax_probe(train_x, labels[train_idx], test_x,
                            labels[test_idx], n_classes, config)
    return ProbeResult(task, modality, acc, len(train_idx), len(test_idx),
                       config.seed)


# ---------------------------------------------------------------------------
# cross-modal retrieval

def _recall_at_k(queries, candidates, clip_ids, k: int) -> float:
    """Fraction of queries whose aligned candidate ranks in the top k.

    Rank counts candidates strictly closer, plus equally-close ones with a
    lower clip id; with all distances tied this reduces to rank-by-id.
    """
    eps = MEASUREMENT_EPSILON
    qn = queries / np.sqrt((queries * queries).sum(axis=1, keepdims=True) + eps)
    cn = candidates / np.sqrt(
        (candidates * candidates).sum(axis=1, keepdims=True) + eps
    )
    dist = 1.0 - qn @ cn.T
    true_d = np.diag(dist)[:, None]
    lower_id = clip_ids[None, :] < clip_ids[:, None]
    rank = ((dist < true_d) | ((dist == true_d) & lower_id)).sum(axis=1)
    return float((rank < k).mean())


def crossmodal_retrieval(model: TwoStreamModel, dataset: Dataset, k: int,
                         crop_size: int = 32) -> RetrievalResult:
    """recall@k of each stream's features against the other stream's."""
    n = len(dataset)
    if not 1 <= k < n:
        raise ProtocolError(f"k must be in [1, {n - 1}] for {n} pairs, got {k}")
    f = extract_features(model, dataset, "rgb", crop_size=crop_size)
    g = extract_features(model, dataset, "sod", crop_size=crop_size)
    ids = dataset.clip_ids.astype(np.int64)
    return RetrievalResult(
        k=k,
        n=n,
        recall_rgb_to_sod=_recall_at_k(f, g, ids, k),
        recall_sod_to_rgb=_recall_at_k(g, f, ids, k),
    )


# ---------------------------------------------------------------------------
# saliency

def saliency(model: TwoStreamModel, pair: ModalityPair, top_n: int,
             guided: bool = False, crop_size: int = 32) -> np.ndarray:
    """|input gradient| of the sum of the top_n strongest final-conv
    activations, shape (3, h, w).  ``guided`` zeroes negative gradients at
    every ReLU on the way back."""
    cropped = centered_pair(pair, crop_size)
    x = Tensor(np.ascontiguousarray(cropped.rgb[None], dtype=np.float64),
               requires_grad=True)
    with Tape() as tape:
        _, conv = model.forward_f(x, "eval", guided=guided, return_conv=True)
        flat = conv.data.reshape(-1)
        if not 1 <= top_n <= flat.size:
            raise ProtocolError(
                f"top_n must be in [1, {flat.size}], got {top_n}"
            )
        strongest = np.argsort(-flat, kind="stable")[:top_n]
        tape.backward(tsum(gather_flat(conv, strongest)))
    if x.grad is None:
        return np.zeros(x.data.shape[1:])
    return np.abs(x.grad[0])


def motion_bbox(pair: ModalityPair, crop_size: int = 32, level: float = 0.05):
    """Bounding box (y0, y1, x0, x1) of the moving region, from SOD energy."""
    cropped = centered_pair(pair, crop_size)
    energy = np.abs(cropped.sod).sum(axis=0)
    peak = energy.max()
    if peak <= 0:
        return None
    ys, xs = np.nonzero(energy > level * peak)
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def saliency_mass_ratio(sal: np.ndarray, pair: ModalityPair,
                        crop_size: int = 32) -> float:
    """Mean saliency inside the moving-region bbox over mean outside."""
    box = motion_bbox(pair, crop_size)
    if box is None:
        raise ProtocolError("pair has no motion energy to locate")
    y0, y1, x0, x1 = box
    mean_map = sal.mean(axis=0)
    mask = np.zeros(mean_map.shape, dtype=bool)
    mask[y0:y1, x0:x1] = True
    if mask.all():
        raise ProtocolError("moving region covers the whole crop")
    inside = float(mean_map[mask].mean())
    outside = float(mean_map[~mask].mean())
    return inside / max(outside, 1e-12)


# ---------------------------------------------------------------------------
# ablation runner

def _probe_all(model, dataset, probe_config, split):
    return [
        linear_probe(model, dataset, task, modality, probe_config, split)
        for task in TASKS
        for modality in MODALITIES
    ]


def run_ablation(dataset: Dataset, base_config: TrainingConfig,
                 probe_config: ProbeConfig | None = None,
                 arms=ABLATION_ARMS, sweep: bool = False,
                 progress=None) -> AblationReport:
    """Train every arm from one shared init and probe on one shared split.

    Pretraining sees only the probe train clips; any arm that diverges is
    marked failed and the rest proceed.
    """
    probe_config = probe_config or ProbeConfig()
    train_idx, test_idx = split_clips(len(dataset), probe_config.test_fraction,
                                      probe_config.seed)
    split = (train_idx, test_idx)
    pretrain = dataset.subset(train_idx)
    report = AblationReport(
        seed=base_config.seed,
        n_train_clips=len(train_idx),
        n_test_clips=len(test_idx),
    )

    def pretrained(config, mode):
        # mode None leaves the shared init untouched
        model = init_model(seed=config.seed)
        if mode is not None:
            train(pretrain, model, replace(config, loss_mode=mode))
        return model

    for name in arms:
        if progress:
            progress(f"arm {name}")
        result = ArmResult(arm=name)
        try:
            model = pretrained(base_config,
                               None if name == "random_init" else name)
        except (TrainingDiverged, NumericsError) as e:
            result.failed = True
            result.fail_reason = str(e)
        else:
            result.probes = _probe_all(model, dataset, probe_config, split)
        report.arms.append(result)

    if sweep:
        for w_cross, w_div in SWEEP_WEIGHTS:
            if progress:
                progress(f"sweep ({w_cross:g}, {w_div:g})")
            config = replace(base_config, loss_weights=(w_cross, w_div))
            try:
                model = pretrained(config, "full")
            except (TrainingDiverged, NumericsError):
                continue
            probe = linear_probe(model, dataset, "shape_class", "rgb",
                                 probe_config, split)
            report.sweep.append((w_cross, w_div, probe))
    return report


# ---------------------------------------------------------------------------
# report serialization

def _probe_line(kind, prefix, p: ProbeResult) -> str:
    return (f"{kind} {prefix}task={p.task} modality={p.modality} "
            f"accuracy={p.accuracy!r} n_train={p.n_train} n_test={p.n_test} "
            f"seed={p.seed}")


def report_to_text(report: AblationReport) -> str:
    lines = [
        REPORT_HEADER,
        f"seed {report.seed}",
        f"split train={report.n_train_clips} test={report.n_test_clips}",
    ]
    for arm in report.arms:
        if arm.failed:
            reason = arm.fail_reason.replace("\n", " ")
            lines.append(f"arm {arm.arm} status=failed reason={reason}")
        else:
            lines.append(f"arm {arm.arm} status=ok")
        for p in arm.probes:
            lines.append(_probe_line("probe", f"arm={arm.arm} ", p))
    for w_cross, w_div, p in report.sweep:
        lines.append(
            _probe_line("sweep", f"w_cross={w_cross!r} w_div={w_div!r} ", p)
        )
    return "\n".join(lines) + "\n"


def _parse_fields(rest: str, lineno: int) -> dict:
    out = {}
    for token in rest.split():
        if "=" not in token:
            raise FormatError("record", f"line {lineno}: bad token {token!r}")
        key, value = token.split("=", 1)
        out[key] = value
    return out


def _parse_probe(fields: dict, lineno: int) -> ProbeResult:
    try:
        return ProbeResult(
            task=fields["task"],
            modality=fields["modality"],
            accuracy=float(fields["accuracy"]),
            n_train=int(fields["n_train"]),
            n_test=int(fields["n_test"]),
            seed=int(fields["seed"]),
        )
    except (KeyError, ValueError) as e:
        raise FormatError("record", f"line {lineno}: {e}") from e


def report_from_text(text: str) -> AblationReport:
    lines = text.splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise FormatError("header", f"expected {REPORT_HEADER!r}")
    report = AblationReport(seed=0, n_train_clips=0, n_test_clips=0)
    current = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        if kind == "seed":
            try:
                report.seed = int(rest)
            except ValueError as e:
                raise FormatError("record", f"line {lineno}: {e}") from e
        elif kind == "split":
            fields = _parse_fields(rest, lineno)
            try:
                report.n_train_clips = int(fields["train"])
                report.n_test_clips = int(fields["test"])
            except (KeyError, ValueError) as e:
                raise FormatError("record", f"line {lineno}: {e}") from e
        elif kind == "arm":
            name, _, rest = rest.partition(" ")
            # reason is free text; it is always the last field on the line
            rest, _, reason = rest.partition(" reason=")
            fields = _parse_fields(rest, lineno) if rest else {}
            current = ArmResult(
                arm=name,
                failed=fields.get("status") == "failed",
                fail_reason=reason,
            )
            report.arms.append(current)
        elif kind == "probe":
            fields = _parse_fields(rest, lineno)
            arm_name = fields.pop("arm", None)
            if current is None or arm_name != current.arm:
                raise FormatError(
                    "record", f"line {lineno}: probe outside its arm block"
                )
            current.probes.append(_parse_probe(fields, lineno))
        elif kind == "sweep":
            fields = _parse_fields(rest, lineno)
            try:
                w_cross = float(fields.pop("w_cross"))
                w_div = float(fields.pop("w_div"))
            except (KeyError, ValueError) as e:
                raise FormatError("record", f"line {lineno}: {e}") from e
            report.sweep.append((w_cross, w_div, _parse_probe(fields, lineno)))
        else:
            raise FormatError("record", f"line {lineno}: unknown kind {kind!r}")
    return report


def save_report(report: AblationReport, path):
    with open(path, "w") as fh:
        fh.write(report_to_text(report))


def load_report(path) -> AblationReport:
    with open(path) as fh:
        return report_from_text(fh.read())
