"""Deterministic two-domain toy lesion images.

Benign samples are near-smooth ellipses; malignant samples get a wobbly
boundary, a softer edge and a lesion hue rotated away from the benign hue. All
three differences scale with ``domain_gap`` times a per-sample severity drawn
uniformly from [0, 1], so mild malignant samples overlap the benign class and
``domain_gap=0`` yields two classes drawn from one distribution.

Every per-sample random draw is made regardless of class and gap, keyed by
(seed, class, index). Changing ``domain_gap`` therefore moves each sample along
a fixed path instead of resampling it.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import ImageTensor, LabelledDataset, LabelledSample, save_snapshot

BENIGN_HUE = 28.0  # degrees
MAX_HUE_SHIFT = -70.0  # malignant hue shift at domain_gap=1 and full severity
HUE_JITTER = 9.0
MAX_IRREGULARITY = 0.28
BASE_IRREGULARITY = 0.04  # natural boundary wobble shared by both classes
SOFTNESS_JITTER = 0.5
PIXEL_NOISE = 0.5  # per-pixel sensor noise sigma, 0..255 scale
SHADING = 0.15  # peak relative strength of a smooth illumination gradient
N_HARMONICS = 5


@dataclass(frozen=True)
class BenchmarkConfig:
    image_side: int = 64
    n_majority: int = 400
    n_minority: int = 100
    domain_gap: float = 0.5
    seed: int = 0
    train_fraction: float = 0.7

    def __post_init__(self) -> None:
        if not self.n_majority >= self.n_minority >= 1:
            raise ValueError("need n_majority >= n_minority >= 1")
        if not 0.0 <= self.domain_gap <= 1.0:
            raise ValueError("domain_gap must lie in [0, 1]")
        if self.image_side < 8:
            raise ValueError("image_side must be >= 8")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")


def _hsv(h_deg: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((h_deg % 360.0) / 360.0, s, v))


def render_lesion(label: int, index: int, config: BenchmarkConfig) -> np.ndarray:
    """One (side, side, 3) image in 0..255 for class ``label``."""
    rng = np.random.default_rng([config.seed, label, index])
    side = config.image_side
    severity = rng.uniform(0.0, 1.0)
    gap = config.domain_gap * severity if label == 1 else 0.0

    bg = _hsv(25.0 + rng.normal(0, 3), 0.12 + rng.uniform(-0.03, 0.03), 0.85 + rng.uniform(-0.05, 0.05))
    cy, cx = (side - 1) / 2.0 + rng.uniform(-0.08, 0.08, size=2) * side
    radius = rng.uniform(0.20, 0.30) * side
    aspect = rng.uniform(0.7, 1.0)
    theta0 = rng.uniform(0, math.pi)
    amps = rng.uniform(0, 1, size=N_HARMONICS)
    phases = rng.uniform(0, 2 * math.pi, size=N_HARMONICS)
    hue = BENIGN_HUE + rng.normal(0, HUE_JITTER) + gap * MAX_HUE_SHIFT
    lesion = _hsv(hue, rng.uniform(0.5, 0.7), rng.uniform(0.35, 0.55))
    soft_jitter = rng.uniform(0.0, SOFTNESS_JITTER)
    noise = rng.normal(0, 1.0, size=(side, side, 3)) * PIXEL_NOISE
    shade_angle = rng.uniform(0, 2 * math.pi)
    shade_strength = rng.uniform(0.0, SHADING)

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta0), math.sin(theta0)
    u = c * dx + s * dy
    w = (-s * dx + c * dy) / aspect
    dist = np.hypot(u, w)
    ang = np.arctan2(w, u)
    wobble = sum(a * np.sin((k + 2) * ang + p) for k, (a, p) in enumerate(zip(amps, phases)))
    irregularity = BASE_IRREGULARITY + gap * MAX_IRREGULARITY
    boundary = radius * (1.0 + irregularity * wobble / N_HARMONICS * 2.0)
    softness = 1.0 + soft_jitter + 2.0 * gap
    alpha = 1.0 / (1.0 + np.exp((dist - boundary) / softness))

    ramp = (math.cos(shade_angle) * (xx - (side - 1) / 2.0) + math.sin(shade_angle) * (yy - (side - 1) / 2.0)) / side
    shade = 1.0 + shade_strength * 2.0 * ramp
    img = (bg * (1 - alpha[..., None]) + lesion * alpha[..., None]) * shade[..., None] * 255.0 + noise
    return np.clip(img, 0.0, 255.0)


def generate(config: BenchmarkConfig) -> tuple[LabelledDataset, LabelledDataset]:
    """Stratified, seeded train/test split of benign (majority) and malignant samples."""
    train: list[LabelledSample] = []
    test: list[LabelledSample] = []
    split_rng = np.random.default_rng([config.seed, 2])
    for label, n, tag in ((0, config.n_majority, "b"), (1, config.n_minority, "m")):
        samples = [
            LabelledSample(
                id=f"bench-{tag}{i:05d}",
                image=ImageTensor(render_lesion(label, i, config), "raw_0_255"),
                label=label,
            )
            for i in range(n)
        ]
        order = split_rng.permutation(n)
        n_train = int(round(config.train_fraction * n))
        train.extend(samples[i] for i in sorted(order[:n_train]))
        test.extend(samples[i] for i in sorted(order[n_train:]))
    shuffle_rng = np.random.default_rng([config.seed, 3])
    train = [train[i] for i in shuffle_rng.permutation(len(train))]
    return LabelledDataset(tuple(train)), LabelledDataset(tuple(test))


def write_benchmark(config: BenchmarkConfig, out_dir: str | Path) -> tuple[Path, Path]:
    train, test = generate(config)
    out_dir = Path(out_dir)
    meta = {"source": "synthetic_benchmark", "benchmark": asdict(config)}
    return (
        save_snapshot(train, out_dir / "train", {**meta, "split": "train"}),
        save_snapshot(test, out_dir / "test", {**meta, "split": "test"}),
    )


def mean_hue(values: np.ndarray) -> float:
    """Chroma-weighted circular mean hue, in degrees, of an (H, W, 3) image.

    Uses the opponent-axis hue approximation, so every pixel contributes in
    proportion to its chroma and grey pixels contribute nothing. Any intensity
    scale works since only the angle is returned.
    """
    v = np.asarray(values, dtype=np.float64)
    r, g, b = v[..., 0], v[..., 1], v[..., 2]
    a = (r - 0.5 * (g + b)).sum()
    bb = (math.sqrt(3) / 2.0 * (g - b)).sum()
    return math.degrees(math.atan2(bb, a))


def hue_distance(h1: float, h2: float) -> float:
    """Absolute angular difference in degrees, in [0, 180]."""
    d = (h1 - h2) % 360.0
    return min(d, 360.0 - d)
