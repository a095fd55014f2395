"""Torch plumbing shared by the translation and classification engines."""

from __future__ import annotations

import contextlib
from typing import Any, Iterator, Sequence

import numpy as np
import torch
from torch import nn

from .data import ImageTensor, stack_images


@contextlib.contextmanager
def cpu_math() -> Iterator[None]:
    """Fixed math settings for training and inference.

    The oneDNN path is slower than the reference kernels for the small channel
    counts used at desk scale; pinning one path also keeps results identical
    between runs.
    """
    previous = torch.backends.mkldnn.enabled
    torch.backends.mkldnn.enabled = False
    try:
        yield
    finally:
        torch.backends.mkldnn.enabled = previous


def to_batch(images: Sequence[ImageTensor]) -> torch.Tensor:
    return torch.from_numpy(stack_images(images))


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    from .errors import CheckpointError

    state = {}
    for key, ref in module.state_dict().items():
        name = f"{prefix}/{key}"
        if name not in arrays:
            raise CheckpointError(f"missing array {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {tuple(ref.shape)}")
        state[key] = torch.from_numpy(arr.copy()).to(ref.dtype)
    module.load_state_dict(state)


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    sd = opt.state_dict()
    arrays = {}
    for idx, slots in sd["state"].items():
        for key, val in slots.items():
            arrays[f"{prefix}/state/{idx}/{key}"] = (
                val.detach().cpu().numpy().copy() if torch.is_tensor(val) else np.asarray(val)
            )
    return arrays, {"param_groups": sd["param_groups"]}


def load_optimizer_arrays(
    opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], meta: dict[str, Any], prefix: str
) -> None:
    state: dict[int, dict[str, torch.Tensor]] = {}
    head = f"{prefix}/state/"
    for name, arr in arrays.items():
        if name.startswith(head):
            idx, key = name[len(head):].split("/", 1)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def n_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
