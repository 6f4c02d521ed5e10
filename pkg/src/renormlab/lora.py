"""Low-rank adapters whose combined weight keeps the frozen base norm.

An adapter owns a frozen base matrix W and trainable factors A (down,
``r x k``) and B (up, ``d x r``).  The low-rank update is
``dW = (alpha / rank) * B @ A`` and the published weight is

    off         W' = W + dW
    functional  W' = (W + dW) * ||W|| / ||W + dW||, ratio on the tape
    detached    same rescaling, ratio treated as a constant

The rescaling is recomputed at every forward pass, so the norm identity
holds at all times regardless of optimizer state.  ``norm_kind`` selects the
matrix norm (Frobenius by default, spectral via power iteration).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DegenerateWeightError, ShapeError
from .ften import read_ften, write_ften


class RenormMode(str, Enum):
    OFF = "off"
    FUNCTIONAL = "functional"
    DETACHED = "detached"


NORM_KINDS = ("frobenius", "spectral")


@dataclass
class LoraAdapter:
    base: tc.Tensor      # frozen W, (d, k)
    down: tc.Tensor      # A, (rank, k), trainable
    up: tc.Tensor        # B, (d, rank), trainable
    rank: int
    alpha: float
    mode: RenormMode = RenormMode.FUNCTIONAL
    norm_kind: str = "frobenius"
    base_norm: float = 0.0  # cached ||W|| under norm_kind

    def __post_init__(self):
        d, k = self.base.shape
        if self.rank > min(d, k) or self.rank < 1:
            raise ConfigError(f"rank {self.rank} outside [1, min{(d, k)}]")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.down.shape != (self.rank, k) or self.up.shape != (d, self.rank):
            raise ShapeError(
                f"factor shapes {self.down.shape}/{self.up.shape} inconsistent "
                f"with base {self.base.shape} rank {self.rank}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        self.mode = RenormMode(self.mode)
        self.base.requires_grad = False
        if self.base_norm == 0.0:
            self.base_norm = _norm_value(self.base.array, self.norm_kind)

    def trainable(self) -> list[tc.Tensor]:
        return [self.down, self.up]


def _norm_value(arr: np.ndarray, kind: str) -> float:
    if kind == "frobenius":
        return float(np.sqrt(np.sum(arr * arr)))
    sigma, _ = tc.spectral_norm(tc.Tensor(arr))
    return sigma.item()


def _norm_tensor(t: tc.Tensor, kind: str) -> tc.Tensor:
    if kind == "frobenius":
        return tc.frobenius_norm(t)
    sigma, _ = tc.spectral_norm(t)
    return sigma


def init_adapter(base: tc.Tensor, rank: int = 8, alpha: float = 8.0,
                 mode: RenormMode = RenormMode.FUNCTIONAL,
                 norm_kind: str = "frobenius", seed: int = 0) -> LoraAdapter:
    """Fresh adapter: A ~ N(0, 1/k), B = 0, so W' starts exactly at W."""
    d, k = base.shape
    rng = np.random.default_rng(seed)
    down = tc.Tensor(rng.normal(0.0, 1.0 / np.sqrt(k), size=(rank, k)), requires_grad=True)
    up = tc.Tensor(np.zeros((d, rank)), requires_grad=True)
    return LoraAdapter(base=base, down=down, up=up, rank=rank, alpha=alpha,
                       mode=mode, norm_kind=norm_kind)


def delta_weight(adapter: LoraAdapter) -> tc.Tensor:
    return tc.mul(tc.matmul(adapter.up, adapter.down), adapter.alpha / adapter.rank)


def effective_weight(adapter: LoraAdapter) -> tc.Tensor:
    """Published weight W'; rescaled to the cached base norm unless mode off."""
    combined = tc.add(adapter.base, delta_weight(adapter))
    if adapter.mode is RenormMode.OFF:
        return combined
    norm_c = _norm_tensor(combined, adapter.norm_kind)
    if norm_c.item() == 0.0:
        raise DegenerateWeightError("adapter update exactly cancels the base weight")
    if adapter.mode is RenormMode.FUNCTIONAL:
        scale = tc.mul(tc.reciprocal(norm_c), adapter.base_norm)
        return tc.mul(combined, scale)
    return tc.mul(combined, adapter.base_norm / norm_c.item())


def lora_forward(x: tc.Tensor, adapter: LoraAdapter) -> tc.Tensor:
    """``x @ W'.T``; gradients flow to the factors only."""
    if x.shape[-1] != adapter.base.shape[1]:
        raise ShapeError(f"input features {x.shape} vs adapter k={adapter.base.shape[1]}")
    return tc.matmul(x, tc.transpose(effective_weight(adapter)))


def norm_preservation_report(adapter: LoraAdapter) -> dict:
    """Norms of W, W + dW, and W', plus the relative drift of W' from W."""
    base_norm = _norm_value(adapter.base.array, adapter.norm_kind)
    combined = adapter.base.array + (adapter.alpha / adapter.rank) * (
        adapter.up.array @ adapter.down.array)
    combined_norm = _norm_value(combined, adapter.norm_kind)
    effective_norm = _norm_value(effective_weight(adapter).array, adapter.norm_kind)
    return {
        "base_norm": base_norm,
        "combined_norm": combined_norm,
        "effective_norm": effective_norm,
        "relative_drift": abs(effective_norm - base_norm) / base_norm,
    }


def save_adapter(adapter: LoraAdapter, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ften(out / "base.ften", adapter.base.array)
    write_ften(out / "down.ften", adapter.down.array)
    write_ften(out / "up.ften", adapter.up.array)
    manifest = {
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "mode": adapter.mode.value,
        "norm_kind": adapter.norm_kind,
    }
    (out / "adapter.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_adapter(in_dir: str | Path) -> LoraAdapter:
    src = Path(in_dir)
    manifest = json.loads((src / "adapter.json").read_text())
    return LoraAdapter(
        base=tc.Tensor(read_ften(src / "base.ften")),
        down=tc.Tensor(read_ften(src / "down.ften"), requires_grad=True),
        up=tc.Tensor(read_ften(src / "up.ften"), requires_grad=True),
        rank=int(manifest["rank"]),
        alpha=float(manifest["alpha"]),
        mode=RenormMode(manifest["mode"]),
        norm_kind=manifest["norm_kind"],
    )
