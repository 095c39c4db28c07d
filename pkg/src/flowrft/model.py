"""
Velocity network for the toy flow models.

A small feed-forward field v_θ(x, t, c) over (state, sinusoidal time
embedding, learned condition embedding). Everything runs in float64 so the
verification suite can assert identities to tight tolerances. θ, θ_old and
θ_ref are three instances of the same class.
"""

import copy
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Tuple

import numpy as np
import torch
from torch import nn

from .constants import (
    DEFAULT_COND_DIM,
    DEFAULT_HIDDEN_WIDTHS,
    DEFAULT_N_MODES,
    DEFAULT_TIME_EMBED_DIM,
    SUPPORTED_ACTIVATIONS,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64

_ACTIVATIONS = {
    "silu": nn.SiLU,
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
}

# Highest time-embedding frequency; kept low so the field stays smooth in t.
_MAX_TIME_FREQ = 10.0


@dataclass(frozen=True)
class ModelArch:
    """Architecture descriptor stored in checkpoint headers."""
    data_dim: int = 2
    hidden_widths: Tuple[int, ...] = DEFAULT_HIDDEN_WIDTHS
    activation: str = "silu"
    time_embed_dim: int = DEFAULT_TIME_EMBED_DIM
    cond_dim: int = DEFAULT_COND_DIM
    n_conditions: int = DEFAULT_N_MODES

    def __post_init__(self):
        if self.activation not in SUPPORTED_ACTIVATIONS:
            raise ValueError(
                f"Unknown activation '{self.activation}'. "
                f"Available: {', '.join(SUPPORTED_ACTIVATIONS)}"
            )
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be an even number >= 2, got {self.time_embed_dim}")
        if self.data_dim < 1 or self.n_conditions < 1 or self.cond_dim < 1:
            raise ValueError("data_dim, cond_dim and n_conditions must be positive")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelArch":
        return cls(**{**data, "hidden_widths": tuple(data.get("hidden_widths", DEFAULT_HIDDEN_WIDTHS))})


class SinusoidalTimeEmbedding(nn.Module):
    """Fixed sin/cos features of t with geometric frequencies in [1, _MAX_TIME_FREQ]."""

    def __init__(self, dim: int):
        super().__init__()
        half = dim // 2
        freqs = torch.exp(torch.linspace(0.0, math.log(_MAX_TIME_FREQ), half, dtype=DTYPE))
        self.register_buffer("freqs", freqs, persistent=False)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        angles = t[:, None] * self.freqs[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class VelocityModel(nn.Module):
    """
    Conditional velocity field v_θ(x, t, c).

    forward() takes batched tensors; velocity() is the per-sample numpy
    convenience used by samplers. Evaluation never mutates parameters.
    """

    def __init__(self, arch: ModelArch):
        super().__init__()
        self.arch = arch
        self.time_embed = SinusoidalTimeEmbedding(arch.time_embed_dim)
        self.cond_embed = nn.Embedding(arch.n_conditions, arch.cond_dim)

        layers = []
        width_in = arch.data_dim + arch.time_embed_dim + arch.cond_dim
        for width in arch.hidden_widths:
            layers.append(nn.Linear(width_in, width))
            layers.append(_ACTIVATIONS[arch.activation]())
            width_in = width
        layers.append(nn.Linear(width_in, arch.data_dim))
        self.net = nn.Sequential(*layers)
        self.to(DTYPE)

    @classmethod
    def from_arch(cls, arch: ModelArch, seed: int) -> "VelocityModel":
        """Build a model with initialization fully determined by ``seed``."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(arch)
        return model

    def forward(self, x: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        h = torch.cat([x, self.time_embed(t), self.cond_embed(c)], dim=-1)
        return self.net(h)

    @torch.no_grad()
    def velocity(self, x: np.ndarray, t: float, c: int) -> np.ndarray:
        """Evaluate v_θ at a single state; returns a float64 numpy vector."""
        xt = torch.as_tensor(np.asarray(x, dtype=np.float64)).reshape(1, -1)
        tt = torch.tensor([float(t)], dtype=DTYPE)
        ct = torch.tensor([int(c)], dtype=torch.long)
        return self(xt, tt, ct)[0].numpy().copy()

    @property
    def data_dim(self) -> int:
        return self.arch.data_dim

    @property
    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_params(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.parameters()).detach().numpy().copy()

    def set_flat_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got shape {values.shape}")
        with torch.no_grad():
            nn.utils.vector_to_parameters(torch.from_numpy(values.copy()), self.parameters())

    def frozen_copy(self) -> "VelocityModel":
        """Deep copy with gradients disabled, used for θ_old and θ_ref."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.requires_grad_(False)
        return clone


def flat_grad(loss: torch.Tensor, model: nn.Module) -> np.ndarray:
    """
    Gradient of a scalar loss w.r.t. every parameter, flattened.

    Parameters the loss does not depend on (including frozen ones) get exact
    zeros.
    """
    params = list(model.parameters())
    live = [p for p in params if p.requires_grad]
    grads = {}
    if loss.requires_grad and live:
        found = torch.autograd.grad(loss, live, allow_unused=True, retain_graph=True)
        grads = {id(p): g for p, g in zip(live, found) if g is not None}
    parts = [grads.get(id(p), torch.zeros_like(p)).reshape(-1) for p in params]
    return torch.cat(parts).detach().numpy().copy()
