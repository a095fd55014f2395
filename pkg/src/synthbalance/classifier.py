"""GAP-headed convolutional classifier trained with the focal loss.

The backbone is a stack of 3x3 conv + ReLU blocks, each closed by 2x2 max
pooling; global average pooling then feeds a single linear layer to two
softmax units. Layer names follow the ``block{i}_conv{j}`` convention so that
VGG-16 weights exported under those names can be imported by name.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import read_container, write_container
from .data import ImageTensor, LabelledDataset, standardize
from .errors import CheckpointError, DataError, TrainingError
from .nn_utils import (
    cpu_math,
    load_module_arrays,
    load_optimizer_arrays,
    module_arrays,
    optimizer_arrays,
    seeded_generator,
    to_batch,
)

log = logging.getLogger(__name__)

EPS = 1e-7
IMPROVEMENT_TOL = 1e-4
CHECKPOINT_KIND = "classifier"

BACKBONES: dict[str, tuple[tuple[int, int], ...]] = {
    # (convs in block, filters)
    "vgg16_gap": ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)),
    "small_cnn_gap": ((2, 16), (2, 32), (2, 64)),
}


@dataclass(frozen=True)
class ClassifierSpec:
    backbone: str = "vgg16_gap"
    channels: int = 3
    pretrained_weights: str | None = None
    bias: bool = True

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")

    @property
    def blocks(self) -> tuple[tuple[int, int], ...]:
        return BACKBONES[self.backbone]


@dataclass(frozen=True)
class FocalLossParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass(frozen=True)
class ClassifierTrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    early_stop_patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-7

    def __post_init__(self) -> None:
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("learning_rate > 0, batch_size >= 1, max_epochs >= 0 required")


# ---------------------------------------------------------------------------
# Focal loss


def focal_loss(p, y, params: FocalLossParams = FocalLossParams(), reduction: str = "mean") -> torch.Tensor:
    """-alpha_t (1 - p_t)**gamma log(p_t) for the positive-class probability ``p``.

    ``y`` may use {0, 1} or {-1, 1}; only ``y == 1`` counts as positive.
    """
    p = p if torch.is_tensor(p) else torch.as_tensor(p, dtype=torch.float64)
    y = y if torch.is_tensor(y) else torch.as_tensor(y)
    if torch.any(p < 0) or torch.any(p > 1) or torch.any(torch.isnan(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    p = p.clamp(EPS, 1 - EPS)
    pos = y == 1
    p_t = torch.where(pos, p, 1 - p)
    alpha_t = torch.where(pos, torch.full_like(p, params.alpha), torch.full_like(p, 1 - params.alpha))
    loss = -alpha_t * (1 - p_t) ** params.gamma * torch.log(p_t)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


# ---------------------------------------------------------------------------
# Network


class GapClassifier(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        layers: OrderedDict[str, nn.Module] = OrderedDict()
        c = spec.channels
        for i, (n_conv, width) in enumerate(spec.blocks, start=1):
            for j in range(1, n_conv + 1):
                layers[f"block{i}_conv{j}"] = nn.Conv2d(c, width, 3, padding=1, bias=spec.bias)
                layers[f"block{i}_relu{j}"] = nn.ReLU()
                c = width
            if i < len(spec.blocks):
                layers[f"block{i}_pool"] = nn.MaxPool2d(2)
        # the last block's pool is kept apart so its input (the last conv
        # activation) stays reachable for saliency maps
        self.features = nn.Sequential(layers)
        self.final_pool = nn.MaxPool2d(2)
        self.head = nn.Linear(c, 2, bias=spec.bias)
        self.n_features = c
        self.last_conv_layer = f"block{len(spec.blocks)}_conv{spec.blocks[-1][0]}"

    def forward_parts(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(logits, GAP features, last conv activation)."""
        act = self.features(x)
        pooled = self.final_pool(act).mean(dim=(2, 3))
        return self.head(pooled), pooled, act

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_parts(x)[0]


def _init_classifier(model: GapClassifier, seed: int) -> None:
    gen = seeded_generator(seed)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
        elif isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight, generator=gen)
        if isinstance(m, (nn.Conv2d, nn.Linear)) and m.bias is not None:
            nn.init.zeros_(m.bias)


def load_backbone_weights(model: GapClassifier, path: str | Path) -> None:
    """Copy ``block*_conv*.{weight,bias}`` arrays from a weight container."""
    arrays, _ = read_container(path)
    with torch.no_grad():
        for name, module in model.features.named_children():
            if not isinstance(module, nn.Conv2d):
                continue
            for pname, param in module.named_parameters():
                key = f"{name}.{pname}"
                if key not in arrays:
                    raise CheckpointError(f"weight container lacks layer {key!r}")
                arr = arrays[key]
                if tuple(arr.shape) != tuple(param.shape):
                    raise CheckpointError(
                        f"layer {key!r}: container shape {tuple(arr.shape)} != model shape {tuple(param.shape)}"
                    )
                param.copy_(torch.from_numpy(arr.astype(np.float32)))


def export_backbone_weights(model: GapClassifier, path: str | Path) -> Path:
    arrays = {}
    for name, module in model.features.named_children():
        if isinstance(module, nn.Conv2d):
            for pname, param in module.named_parameters():
                arrays[f"{name}.{pname}"] = param.detach().numpy().copy()
    return write_container(path, arrays, {"kind": "backbone_weights", "backbone": model.spec.backbone})


# ---------------------------------------------------------------------------
# State


@dataclass
class ClassifierState:
    spec: ClassifierSpec
    input_side: int
    seed: int
    model: GapClassifier
    optimizer: torch.optim.Optimizer | None = None
    train_config: ClassifierTrainConfig | None = None
    focal: FocalLossParams | None = None
    learning_rate: float | None = None
    epoch: int = 0
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_loss: float | None = None
    best_epoch: int | None = None


def build_classifier(spec: ClassifierSpec, input_side: int, seed: int) -> ClassifierState:
    stride = 2 ** len(spec.blocks)
    if input_side < stride or input_side % stride:
        raise ValueError(f"input side {input_side} not divisible by {stride} ({len(spec.blocks)} pooling blocks)")
    model = GapClassifier(spec)
    _init_classifier(model, seed)
    if spec.pretrained_weights:
        load_backbone_weights(model, spec.pretrained_weights)
    return ClassifierState(spec=spec, input_side=input_side, seed=seed, model=model)


def _make_optimizer(model: nn.Module, config: ClassifierTrainConfig, lr: float) -> torch.optim.Adadelta:
    return torch.optim.Adadelta(model.parameters(), lr=lr, rho=config.rho, eps=config.eps)


def images_tensor(images: Sequence[ImageTensor], side: int, channels: int) -> torch.Tensor:
    """Stack images as an (N, C, H, W) batch, standardizing raw intensities."""
    out = []
    for i, im in enumerate(images):
        if (im.height, im.width, im.channels) != (side, side, channels):
            raise DataError(f"image {i} is {im.height}x{im.width}x{im.channels}, classifier expects {side}x{side}x{channels}")
        if im.range_tag == "tanh_m1_1":
            raise DataError(f"image {i} is in the tanh range; classifier expects standardized input")
        out.append(im if im.range_tag == "standardized_0_1" else standardize(im))
    return to_batch(out)


# ---------------------------------------------------------------------------
# Training and inference


def train_classifier(
    state: ClassifierState,
    train: LabelledDataset,
    params: FocalLossParams,
    config: ClassifierTrainConfig,
) -> ClassifierState:
    """Minimize the batch-mean focal loss with Adadelta.

    The learning rate drops by ``plateau_factor`` after ``plateau_patience``
    epochs without an improvement larger than ``IMPROVEMENT_TOL``; training
    stops after ``early_stop_patience`` such epochs or at ``max_epochs``. The
    weights of the lowest-loss epoch are restored at the end.
    """
    if len(train) == 0:
        raise DataError("cannot train on an empty dataset")
    x_all = images_tensor(train.images, state.input_side, state.spec.channels)
    y_all = torch.from_numpy(train.labels)
    model = state.model
    lr = state.learning_rate if state.learning_rate is not None else config.learning_rate
    if state.optimizer is None:
        state.optimizer = _make_optimizer(model, config, lr)
    state.train_config, state.focal = config, params
    opt = state.optimizer
    n, bs = len(train), config.batch_size
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    best = state.best_loss if state.best_loss is not None else math.inf
    reference = best
    stale = wait = 0
    model.train()
    with cpu_math():
        for _ in range(config.max_epochs):
            epoch = state.epoch
            perm = torch.from_numpy(np.random.default_rng([config.seed, epoch]).permutation(n))
            total = 0.0
            for step, lo in enumerate(range(0, n, bs)):
                idx = perm[lo: lo + bs]
                logits = model(x_all[idx])
                p = torch.softmax(logits, dim=1)[:, 1]
                loss = focal_loss(p, y_all[idx], params)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite focal loss at epoch {epoch + 1}, step {step + 1}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            mean_loss = total / n
            state.epoch += 1
            state.history.append((state.epoch, mean_loss, lr))
            log.info("classifier epoch %d loss=%.6f lr=%.3g", state.epoch, mean_loss, lr)
            if mean_loss < best:
                best, state.best_epoch = mean_loss, state.epoch
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            if mean_loss < reference - IMPROVEMENT_TOL:
                reference, stale, wait = mean_loss, 0, 0
                continue
            stale += 1
            wait += 1
            if stale >= config.early_stop_patience:
                log.info("classifier: no improvement for %d epochs, stopping", stale)
                break
            if wait >= config.plateau_patience:
                lr *= config.plateau_factor
                for group in opt.param_groups:
                    group["lr"] = lr
                wait = 0
    model.load_state_dict(best_state)
    model.eval()
    state.learning_rate = lr
    state.best_loss = best if math.isfinite(best) else None
    return state


def predict_proba(state: ClassifierState, images: Sequence[ImageTensor], batch_size: int = 64) -> np.ndarray:
    """(N, 2) array of (p_benign, p_malignant) rows."""
    if len(images) == 0:
        return np.zeros((0, 2))
    x = images_tensor(images, state.input_side, state.spec.channels)
    model = state.model
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad(), cpu_math():
            for lo in range(0, len(x), batch_size):
                out.append(model(x[lo: lo + batch_size]).double())
    finally:
        model.train(was_training)
    return torch.softmax(torch.cat(out), dim=1).numpy()


def classify(probas, threshold: float = 0.5) -> np.ndarray:
    """1 (malignant) where p_malignant >= threshold, else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    probas = np.asarray(probas, dtype=np.float64).reshape(-1, 2)
    return (probas[:, 1] >= threshold).astype(np.int64)


# ---------------------------------------------------------------------------
# Persistence


def save_classifier(state: ClassifierState, path: str | Path) -> Path:
    arrays = module_arrays(state.model, "model")
    meta = {
        "kind": CHECKPOINT_KIND,
        "spec": asdict(state.spec),
        "input_side": state.input_side,
        "seed": state.seed,
        "epoch": state.epoch,
        "history": [list(h) for h in state.history],
        "best_loss": state.best_loss,
        "best_epoch": state.best_epoch,
        "learning_rate": state.learning_rate,
        "train_config": asdict(state.train_config) if state.train_config else None,
        "focal": asdict(state.focal) if state.focal else None,
        "last_conv_layer": state.model.last_conv_layer,
    }
    if state.optimizer is not None:
        opt_arrays, opt_meta = optimizer_arrays(state.optimizer, "optim")
        arrays.update(opt_arrays)
        meta["optim"] = opt_meta
    return write_container(path, arrays, meta)


def load_classifier(path: str | Path) -> ClassifierState:
    arrays, meta = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: field 'kind' is {meta.get('kind')!r}, expected {CHECKPOINT_KIND!r}")
    try:
        spec = ClassifierSpec(**{**meta["spec"], "pretrained_weights": None})
        state = build_classifier(spec, int(meta["input_side"]), int(meta["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad field 'spec': {exc}") from exc
    state.spec = ClassifierSpec(**meta["spec"])
    load_module_arrays(state.model, arrays, "model")
    state.epoch = int(meta["epoch"])
    state.history = [(int(e), float(l), float(r)) for e, l, r in meta["history"]]
    state.best_loss, state.best_epoch = meta["best_loss"], meta["best_epoch"]
    state.learning_rate = meta["learning_rate"]
    state.train_config = ClassifierTrainConfig(**meta["train_config"]) if meta.get("train_config") else None
    state.focal = FocalLossParams(**meta["focal"]) if meta.get("focal") else None
    if "optim" in meta and state.train_config is not None:
        state.optimizer = _make_optimizer(state.model, state.train_config, state.learning_rate)
        load_optimizer_arrays(state.optimizer, arrays, meta["optim"], "optim")
    state.model.eval()
    return state


def write_training_log(state: ClassifierState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "mean_focal_loss", "learning_rate"))
        for e, loss, lr in state.history:
            w.writerow((e, repr(loss), repr(lr)))
    return path
