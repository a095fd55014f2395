"""Unpaired benign <-> malignant image translation with cycle consistency.

Two U-Net generators (``g_b``: benign -> malignant, ``g_m``: malignant -> benign)
and two PatchGAN discriminators (``d_m`` scores malignant realism, ``d_b``
benign realism). Each training step updates the discriminators first on
detached fakes, then the generators with discriminator weights frozen.

Images enter the networks in the tanh range: per-image min-max standardized,
then mapped z -> 2z - 1.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .container import read_container, write_container
from .data import ImageTensor, LabelledDataset, LabelledSample, to_tanh_range
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
GAN_LOSS_FORMS = ("log", "least_squares")
CHECKPOINT_KIND = "cyclegan"
INPUT_MAPPING = "per-image min-max standardize, then 2z-1"


@dataclass(frozen=True)
class GeneratorSpec:
    depth: int = 4
    base_filters: int = 64
    normalization: str = "instance"
    channels: int = 3

    def __post_init__(self) -> None:
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be positive")
        if self.normalization not in ("instance", "batch"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    """PatchGAN. ``receptive_field`` must be one of 16, 34, 70, 142, 286...,
    i.e. 1..n stride-2 layers followed by two stride-1 layers."""

    receptive_field: int = 70
    base_filters: int = 64
    channels: int = 3
    normalization: str = "instance"

    def __post_init__(self) -> None:
        self.n_layers  # validates

    @property
    def n_layers(self) -> int:
        for n in range(1, 9):
            if patch_receptive_field(n) == self.receptive_field:
                return n
        valid = [patch_receptive_field(n) for n in range(1, 6)]
        raise ValueError(f"receptive_field must be one of {valid}, got {self.receptive_field}")


def patch_receptive_field(n_layers: int) -> int:
    rf = 1
    for k, s in [(4, 1), (4, 1)] + [(4, 2)] * n_layers:
        rf = (rf - 1) * s + k
    return rf


@dataclass(frozen=True)
class CycleGanConfig:
    lambda_cyc: float = 10.0
    learning_rate: float = 2e-4
    batch_size: int = 1
    epochs: int = 500
    beta1: float = 0.5
    beta2: float = 0.999
    gan_loss_form: str = "log"
    seed: int = 0
    checkpoint_every: int = 0
    lr_decay_epochs: int = 0  # final epochs over which the rate falls linearly to 0

    def __post_init__(self) -> None:
        if self.lr_decay_epochs < 0 or self.lr_decay_epochs > self.epochs:
            raise ValueError("lr_decay_epochs must lie in [0, epochs]")
        if self.lambda_cyc < 0:
            raise ValueError("lambda_cyc must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("batch_size >= 1, epochs >= 0, checkpoint_every >= 0 required")
        if self.gan_loss_form not in GAN_LOSS_FORMS:
            raise ValueError(f"gan_loss_form must be one of {GAN_LOSS_FORMS}")


# ---------------------------------------------------------------------------
# Networks


def _norm(kind: str, ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch) if kind == "instance" else nn.BatchNorm2d(ch)


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections, 4x4 stride-2 (de)convolutions."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        widths = [min(spec.base_filters * 2**i, spec.base_filters * 8) for i in range(spec.depth)]
        self.down = nn.ModuleList()
        c_in = spec.channels
        for i, w in enumerate(widths):
            layers = [nn.Conv2d(c_in, w, 4, 2, 1)]
            if 0 < i < spec.depth - 1:
                layers.append(_norm(spec.normalization, w))
            layers.append(nn.LeakyReLU(0.2))
            self.down.append(nn.Sequential(*layers))
            c_in = w
        self.up = nn.ModuleList()
        for i in reversed(range(1, spec.depth)):
            c_in = widths[i] if i == spec.depth - 1 else 2 * widths[i]
            self.up.append(
                nn.Sequential(
                    nn.ConvTranspose2d(c_in, widths[i - 1], 4, 2, 1),
                    _norm(spec.normalization, widths[i - 1]),
                    nn.ReLU(),
                )
            )
        c_in = widths[0] if spec.depth == 1 else 2 * widths[0]
        self.out = nn.Sequential(nn.ConvTranspose2d(c_in, spec.channels, 4, 2, 1), nn.Tanh())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        skips.pop()
        for layer in self.up:
            x = layer(x)
            x = torch.cat([x, skips.pop()], dim=1)
        return self.out(x)


class PatchDiscriminator(nn.Module):
    """Stacked stride-2 convolutions ending in a one-channel logit map."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        n, base = spec.n_layers, spec.base_filters
        layers: list[nn.Module] = [nn.Conv2d(spec.channels, base, 4, 2, 1), nn.LeakyReLU(0.2)]
        c = base
        for i in range(1, n + 1):
            w = min(base * 2**i, base * 8)
            layers += [
                nn.Conv2d(c, w, 4, 2 if i < n else 1, 1),
                _norm(spec.normalization, w),
                nn.LeakyReLU(0.2),
            ]
            c = w
        layers.append(nn.Conv2d(c, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        """Per-patch probabilities in (0, 1)."""
        return torch.sigmoid(self.net(x))


def _init_weights(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02, generator=gen)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02, generator=gen)
            nn.init.zeros_(m.bias)


def _check_side(side: int, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec) -> None:
    if side % (2**gen_spec.depth):
        raise ValueError(f"image side {side} not divisible by 2**depth={2**gen_spec.depth}")
    out = side
    for _ in range(disc_spec.n_layers - 1):
        out //= 2
    out = out // 2 - 1 - 1  # one stride-2 conv then two 4x4 stride-1 convs
    if out < 1:
        raise ValueError(f"image side {side} too small for receptive field {disc_spec.receptive_field}")


# ---------------------------------------------------------------------------
# Loss terms


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, ImageTensor):
        return torch.from_numpy(x.values.astype(np.float64))
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _same_shape(*xs: torch.Tensor) -> None:
    if len({tuple(x.shape) for x in xs}) != 1:
        raise ValueError(f"shape mismatch: {[tuple(x.shape) for x in xs]}")


def adversarial_loss(disc_scores_real, disc_scores_fake, eps: float = EPS) -> torch.Tensor:
    """mean log D(real) + mean log(1 - D(fake)); the discriminator maximizes this."""
    real, fake = _as_tensor(disc_scores_real), _as_tensor(disc_scores_fake)
    _same_shape(real, fake)
    return torch.log(real.clamp(eps, 1 - eps)).mean() + torch.log1p(-fake.clamp(eps, 1 - eps)).mean()


def generator_adversarial_loss(disc_scores_fake, eps: float = EPS) -> torch.Tensor:
    """-mean log D(fake): the generator's minimized (non-saturating) fake term."""
    fake = _as_tensor(disc_scores_fake)
    return -torch.log(fake.clamp(eps, 1 - eps)).mean()


def discriminator_loss(real: torch.Tensor, fake: torch.Tensor, form: str = "log") -> torch.Tensor:
    if form == "log":
        return -adversarial_loss(real, fake)
    _same_shape(real, fake)
    return ((real - 1) ** 2).mean() + (fake**2).mean()


def generator_loss(fake: torch.Tensor, form: str = "log") -> torch.Tensor:
    if form == "log":
        return generator_adversarial_loss(fake)
    return ((fake - 1) ** 2).mean()


def cycle_consistency_loss(original_b, reconstructed_b, original_m, reconstructed_m) -> torch.Tensor:
    """Mean absolute reconstruction error, summed over both cycle directions."""
    ob, rb = _as_tensor(original_b), _as_tensor(reconstructed_b)
    om, rm = _as_tensor(original_m), _as_tensor(reconstructed_m)
    _same_shape(ob, rb)
    _same_shape(om, rm)
    return (rb - ob).abs().mean() + (rm - om).abs().mean()


def total_objective(adv_bm, adv_mb, cyc, lambda_cyc: float):
    return adv_bm + adv_mb + lambda_cyc * cyc


# ---------------------------------------------------------------------------
# State


HISTORY_KEYS = ("adv_BM", "adv_MB", "cycle", "total", "disc_M", "disc_B")


@dataclass
class CycleGanState:
    gen_spec: GeneratorSpec
    disc_spec: DiscriminatorSpec
    config: CycleGanConfig
    image_side: int
    g_b: UNetGenerator
    g_m: UNetGenerator
    d_m: PatchDiscriminator
    d_b: PatchDiscriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    epoch: int = 0
    history: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in HISTORY_KEYS})

    def networks(self) -> dict[str, nn.Module]:
        return {"g_b": self.g_b, "g_m": self.g_m, "d_m": self.d_m, "d_b": self.d_b}


def learning_rate_at(config: CycleGanConfig, epoch: int) -> float:
    """Constant rate, then a linear ramp to zero over the last ``lr_decay_epochs``."""
    start = config.epochs - config.lr_decay_epochs
    if config.lr_decay_epochs == 0 or epoch < start:
        return config.learning_rate
    return config.learning_rate * (config.epochs - epoch) / (config.lr_decay_epochs + 1)


def _optimizers(g_b, g_m, d_m, d_b, config: CycleGanConfig):
    kw = dict(lr=config.learning_rate, betas=(config.beta1, config.beta2))
    opt_g = torch.optim.Adam(list(g_b.parameters()) + list(g_m.parameters()), **kw)
    opt_d = torch.optim.Adam(list(d_m.parameters()) + list(d_b.parameters()), **kw)
    return opt_g, opt_d


def init_state(
    gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec, config: CycleGanConfig, image_side: int
) -> CycleGanState:
    if gen_spec.channels != disc_spec.channels:
        raise ValueError("generator and discriminator channel counts differ")
    _check_side(image_side, gen_spec, disc_spec)
    gen = seeded_generator(config.seed)
    nets = [UNetGenerator(gen_spec), UNetGenerator(gen_spec), PatchDiscriminator(disc_spec), PatchDiscriminator(disc_spec)]
    for net in nets:
        _init_weights(net, gen)
    g_b, g_m, d_m, d_b = nets
    opt_g, opt_d = _optimizers(g_b, g_m, d_m, d_b, config)
    return CycleGanState(gen_spec, disc_spec, config, image_side, g_b, g_m, d_m, d_b, opt_g, opt_d)


# ---------------------------------------------------------------------------
# Training


def discriminator_update(state: CycleGanState, b, m, fake_m, fake_b) -> tuple[float, float]:
    """One optimizer step on ``d_m`` and ``d_b``; fakes are detached."""
    form = state.config.gan_loss_form
    n = b.shape[0]
    state.opt_d.zero_grad(set_to_none=True)
    s_m = state.d_m.scores(torch.cat([m, fake_m.detach()]))
    s_b = state.d_b.scores(torch.cat([b, fake_b.detach()]))
    loss_m = discriminator_loss(s_m[:n], s_m[n:], form)
    loss_b = discriminator_loss(s_b[:n], s_b[n:], form)
    (loss_m + loss_b).backward()
    state.opt_d.step()
    return loss_m.item(), loss_b.item()


def generator_update(state: CycleGanState, b, m, fake_m, fake_b) -> dict[str, float]:
    """One optimizer step on ``g_b`` and ``g_m`` with discriminator weights frozen."""
    form = state.config.gan_loss_form
    disc_params = list(state.d_m.parameters()) + list(state.d_b.parameters())
    for p in disc_params:
        p.requires_grad_(False)
    try:
        state.opt_g.zero_grad(set_to_none=True)
        adv_bm = generator_loss(state.d_m.scores(fake_m), form)
        adv_mb = generator_loss(state.d_b.scores(fake_b), form)
        cyc = cycle_consistency_loss(b, state.g_m(fake_m), m, state.g_b(fake_b))
        total = total_objective(adv_bm, adv_mb, cyc, state.config.lambda_cyc)
        total.backward()
        state.opt_g.step()
    finally:
        for p in disc_params:
            p.requires_grad_(True)
    return {"adv_BM": adv_bm.item(), "adv_MB": adv_mb.item(), "cycle": cyc.item(), "total": total.item()}


def train_step(state: CycleGanState, b: torch.Tensor, m: torch.Tensor) -> dict[str, float]:
    fake_m = state.g_b(b)
    fake_b = state.g_m(m)
    disc_m, disc_b = discriminator_update(state, b, m, fake_m, fake_b)
    terms = generator_update(state, b, m, fake_m, fake_b)
    return {**terms, "disc_M": disc_m, "disc_B": disc_b}


def _tanh_tensor(dataset: LabelledDataset, side: int, channels: int) -> torch.Tensor:
    images = []
    for s in dataset:
        im = s.image
        if (im.height, im.width, im.channels) != (side, side, channels):
            raise DataError(f"sample {s.id!r} is {im.height}x{im.width}x{im.channels}, expected {side}x{side}x{channels}")
        images.append(im if im.range_tag == "tanh_m1_1" else to_tanh_range(im))
    return to_batch(images)


def train_cyclegan(
    benign: LabelledDataset,
    malignant: LabelledDataset,
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    config: CycleGanConfig,
    *,
    state: CycleGanState | None = None,
    checkpoint_dir: str | Path | None = None,
    on_checkpoint: Callable[[CycleGanState], None] | None = None,
) -> CycleGanState:
    """Train until ``state.epoch == config.epochs``.

    Passing a ``state`` (e.g. from :func:`load_checkpoint`) resumes it. The data
    order of epoch ``e`` depends only on ``(config.seed, e)``, so a resumed run
    replays the same steps as an uninterrupted one.
    """
    if len(benign) == 0 or len(malignant) == 0:
        raise DataError("both translation domains need samples")
    if len(benign) != len(malignant):
        raise DataError(f"translation domains must be balanced, got {len(benign)} vs {len(malignant)}")
    side = benign[0].image.height
    if state is None:
        state = init_state(gen_spec, disc_spec, config, side)
    else:
        state.config = config
    if side != state.image_side:
        raise DataError(f"images are {side}px, state was built for {state.image_side}px")
    b_all = _tanh_tensor(benign, side, gen_spec.channels)
    m_all = _tanh_tensor(malignant, side, gen_spec.channels)
    n, bs = len(benign), config.batch_size
    for net in state.networks().values():
        net.train()
    with cpu_math():
        while state.epoch < config.epochs:
            epoch = state.epoch
            lr = learning_rate_at(config, epoch)
            for opt in (state.opt_g, state.opt_d):
                for group in opt.param_groups:
                    group["lr"] = lr
            rng = np.random.default_rng([config.seed, epoch])
            perm_b, perm_m = rng.permutation(n), rng.permutation(n)
            sums = {k: 0.0 for k in HISTORY_KEYS}
            steps = math.ceil(n / bs)
            for step in range(steps):
                idx = slice(step * bs, (step + 1) * bs)
                terms = train_step(state, b_all[perm_b[idx]], m_all[perm_m[idx]])
                if not all(math.isfinite(v) for v in terms.values()):
                    raise TrainingError(f"non-finite translation loss at epoch {epoch + 1}, step {step + 1}: {terms}")
                for k in HISTORY_KEYS:
                    sums[k] += terms[k]
            for k in HISTORY_KEYS:
                state.history[k].append(sums[k] / steps)
            state.epoch += 1
            log.info(
                "translator epoch %d/%d cycle=%.4f total=%.4f",
                state.epoch, config.epochs, state.history["cycle"][-1], state.history["total"][-1],
            )
            if config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                if checkpoint_dir is not None:
                    save_checkpoint(state, Path(checkpoint_dir) / f"translator_epoch{state.epoch:04d}.ckpt")
                if on_checkpoint is not None:
                    on_checkpoint(state)
    return state


# ---------------------------------------------------------------------------
# Inference


def translate(
    state: CycleGanState, images: Sequence[ImageTensor], direction: str, batch_size: int = 32
) -> list[ImageTensor]:
    """Apply ``g_b`` (``B_to_M``) or ``g_m`` (``M_to_B``) to tanh-range images."""
    if direction not in ("B_to_M", "M_to_B"):
        raise ValueError(f"direction must be B_to_M or M_to_B, got {direction!r}")
    net = state.g_b if direction == "B_to_M" else state.g_m
    side, ch = state.image_side, state.gen_spec.channels
    for i, im in enumerate(images):
        if (im.height, im.width, im.channels) != (side, side, ch):
            raise DataError(f"image {i} is {im.height}x{im.width}x{im.channels}, translator expects {side}x{side}x{ch}")
        if im.range_tag != "tanh_m1_1":
            raise DataError(f"image {i} must be in the tanh range, got {im.range_tag}")
    was_training = net.training
    net.eval()
    out: list[ImageTensor] = []
    try:
        with torch.no_grad(), cpu_math():
            for lo in range(0, len(images), batch_size):
                y = net(to_batch(images[lo: lo + batch_size])).clamp(-1.0, 1.0)
                out.extend(ImageTensor(a.transpose(1, 2, 0), "tanh_m1_1") for a in y.numpy())
    finally:
        net.train(was_training)
    return out


def synthesize(state: CycleGanState, dataset: LabelledDataset, prefix: str = "syn-") -> LabelledDataset:
    """Translate every benign sample to a synthetic malignant one.

    Outputs are quantized to 8-bit raw intensities, exactly what a PNG
    round-trip would give back.
    """
    sources = dataset.with_label(0)
    translated = translate(state, [to_tanh_range(s.image) for s in sources], "B_to_M")
    samples = []
    for src, im in zip(sources, translated):
        raw = np.clip(np.rint((im.values.astype(np.float64) + 1.0) * 127.5), 0, 255)
        samples.append(LabelledSample(prefix + src.id, ImageTensor(raw, "raw_0_255"), 1, "synthetic", src.id))
    return LabelledDataset(tuple(samples))


# ---------------------------------------------------------------------------
# Persistence


def spec_hash(gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec) -> str:
    blob = json.dumps({"generator": asdict(gen_spec), "discriminator": asdict(disc_spec)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(state: CycleGanState, path: str | Path) -> Path:
    arrays = {}
    for name, net in state.networks().items():
        arrays.update(module_arrays(net, f"net/{name}"))
    ga, gm = optimizer_arrays(state.opt_g, "optim/g")
    da, dm = optimizer_arrays(state.opt_d, "optim/d")
    arrays.update(ga)
    arrays.update(da)
    meta = {
        "kind": CHECKPOINT_KIND,
        "epoch": state.epoch,
        "seed": state.config.seed,
        "image_side": state.image_side,
        "generator": asdict(state.gen_spec),
        "discriminator": asdict(state.disc_spec),
        "config": asdict(state.config),
        "spec_hash": spec_hash(state.gen_spec, state.disc_spec),
        "history": state.history,
        "optim_g": gm,
        "optim_d": dm,
        "input_mapping": INPUT_MAPPING,
    }
    return write_container(path, arrays, meta)


def load_checkpoint(path: str | Path) -> CycleGanState:
    arrays, meta = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: field 'kind' is {meta.get('kind')!r}, expected {CHECKPOINT_KIND!r}")
    try:
        gen_spec = GeneratorSpec(**meta["generator"])
        disc_spec = DiscriminatorSpec(**meta["discriminator"])
        config = CycleGanConfig(**meta["config"])
        side = int(meta["image_side"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad spec/config field: {exc}") from exc
    if meta.get("spec_hash") != spec_hash(gen_spec, disc_spec):
        raise CheckpointError(f"{path}: field 'spec_hash' does not match the stored specs")
    state = init_state(gen_spec, disc_spec, config, side)
    for name, net in state.networks().items():
        load_module_arrays(net, arrays, f"net/{name}")
    load_optimizer_arrays(state.opt_g, arrays, meta["optim_g"], "optim/g")
    load_optimizer_arrays(state.opt_d, arrays, meta["optim_d"], "optim/d")
    state.epoch = int(meta["epoch"])
    state.history = {k: [float(v) for v in meta["history"].get(k, [])] for k in HISTORY_KEYS}
    if any(len(v) != state.epoch for v in state.history.values()):
        raise CheckpointError(f"{path}: field 'history' length differs from epoch {state.epoch}")
    return state


def write_loss_history(state: CycleGanState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "adv_BM", "adv_MB", "cycle", "total"))
        h = state.history
        for e in range(state.epoch):
            w.writerow((e + 1, repr(h["adv_BM"][e]), repr(h["adv_MB"][e]), repr(h["cycle"][e]), repr(h["total"][e])))
    return path
