"""Grad-CAM saliency maps and GAP feature export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .classifier import ClassifierState, images_tensor
from .data import ImageTensor, LABEL_NAMES, LabelledDataset, to_uint8
from .nn_utils import cpu_math

OVERLAY_OPACITY = 0.4
CAM_TARGET = "pre-softmax logit"


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray  # (H, W) in [0, 1]
    class_index: int
    source_id: str = ""


@dataclass(frozen=True)
class FeatureMatrix:
    ids: list[str]
    labels: list[int]
    provenance: list[str]
    features: np.ndarray  # (N, n_features)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "label", "provenance"] + [f"f_{i}" for i in range(self.features.shape[1])])
            for i, lab, prov, row in zip(self.ids, self.labels, self.provenance, self.features):
                w.writerow([i, LABEL_NAMES[lab], prov] + [repr(float(v)) for v in row])
        return path


def cam_from_gradients(activations, gradients, out_size: tuple[int, int]) -> np.ndarray:
    """Channel weights = spatial mean of gradients; map = ReLU(sum_c w_c A_c).

    ``activations`` and ``gradients`` are (C, h, w). The map is bilinearly
    resized to ``out_size`` and divided by its maximum; an all-zero map stays
    all zero.
    """
    a = torch.as_tensor(np.asarray(activations, dtype=np.float64))
    g = torch.as_tensor(np.asarray(gradients, dtype=np.float64))
    if a.shape != g.shape or a.ndim != 3:
        raise ValueError(f"activations {tuple(a.shape)} and gradients {tuple(g.shape)} must both be (C, h, w)")
    weights = g.mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * a).sum(dim=0))
    if tuple(cam.shape) != tuple(out_size):
        cam = F.interpolate(cam[None, None], size=out_size, mode="bilinear", align_corners=False)[0, 0]
        cam = cam.clamp_min(0.0)
    peak = cam.max()
    return (cam / peak if peak > 0 else torch.zeros_like(cam)).numpy()


def grad_cam(state: ClassifierState, image: ImageTensor, class_index: int, source_id: str = "") -> SaliencyMap:
    """Saliency of ``class_index`` (0 benign, 1 malignant) over the last conv layer."""
    if class_index not in (0, 1):
        raise ValueError(f"class_index must be 0 or 1, got {class_index!r}")
    x = images_tensor([image], state.input_side, state.spec.channels)
    model = state.model
    was_training = model.training
    model.eval()
    try:
        with cpu_math():
            logits, _, act = model.forward_parts(x)
            (grad,) = torch.autograd.grad(logits[0, class_index], act)
    finally:
        model.train(was_training)
    values = cam_from_gradients(act[0].detach().numpy(), grad[0].numpy(), (image.height, image.width))
    return SaliencyMap(values, class_index, source_id)


def export_features(state: ClassifierState, dataset: LabelledDataset, batch_size: int = 64) -> FeatureMatrix:
    """GAP-layer activations, one row per sample, for an external 2-D embedding."""
    model = state.model
    was_training = model.training
    model.eval()
    rows = []
    try:
        with torch.no_grad(), cpu_math():
            for lo in range(0, len(dataset), batch_size):
                chunk = dataset.samples[lo: lo + batch_size]
                x = images_tensor([s.image for s in chunk], state.input_side, state.spec.channels)
                rows.append(model.forward_parts(x)[1].double().numpy())
    finally:
        model.train(was_training)
    feats = np.concatenate(rows) if rows else np.zeros((0, model.n_features))
    return FeatureMatrix(dataset.ids, dataset.labels.tolist(), [s.provenance for s in dataset], feats)


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Blue-cyan-yellow-red ramp for values in [0, 1]; returns (H, W, 3) uint8."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return (np.concatenate([r, g, b], axis=-1) * 255).round().astype(np.uint8)


def write_saliency(saliency: SaliencyMap, image: ImageTensor, directory: str | Path, stem: str) -> list[Path]:
    """Heat map PNG, overlay PNG and raw-value CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    heat = heat_colormap(saliency.values)
    base = to_uint8(image)
    if base.shape[2] == 1:
        base = np.repeat(base, 3, axis=2)
    overlay = ((1 - OVERLAY_OPACITY) * base + OVERLAY_OPACITY * heat).round().astype(np.uint8)
    paths = [directory / f"{stem}_heatmap.png", directory / f"{stem}_overlay.png", directory / f"{stem}_values.csv"]
    Image.fromarray(heat).save(paths[0])
    Image.fromarray(overlay).save(paths[1])
    np.savetxt(paths[2], saliency.values, delimiter=",", fmt="%.8f")
    return paths
