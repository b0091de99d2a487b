"""Per-instance style statistics and the per-device shared style vector."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, safe_sqrt, spatial_var
from .errors import ConfigError, InputError, ShapeError

EPS_VAR = 1e-5


@dataclass
class InstanceStats:
    mu: Tensor  # (B, C)
    sigma: Tensor  # (B, C)


def instance_stats(x: Tensor, eps_var: float = EPS_VAR) -> InstanceStats:
    """Spatial mean and (population) standard deviation per instance and channel.

    ``sigma = sqrt(var + eps_var)``; pass ``eps_var=0`` for the raw statistic.
    Both outputs stay on the graph.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {x.shape}")
    return InstanceStats(x.mean(axis=(2, 3)), safe_sqrt(spatial_var(x), eps_var))


def batch_variance(s: Tensor) -> Tensor:
    """Population variance over the batch axis of a (B, C) statistic."""
    return (s - s.mean(axis=0, keepdims=True)).square().mean(axis=0)


def second_order_stats(s: InstanceStats) -> tuple[Tensor, Tensor]:
    """Across-batch variances of ``mu`` and ``sigma``, each of length C."""
    return batch_variance(s.mu), batch_variance(s.sigma)


@dataclass
class LayerStyle:
    """The four per-channel statistics one layer contributes to a style vector."""

    mu_bar: np.ndarray
    sigma_bar: np.ndarray
    var_mu: np.ndarray
    var_sigma: np.ndarray

    @property
    def channels(self) -> int:
        return self.mu_bar.shape[0]

    def as_array(self) -> np.ndarray:
        return np.stack([self.mu_bar, self.sigma_bar, self.var_mu, self.var_sigma])


@dataclass
class StyleVector:
    """Detached per-layer style statistics a device shares with its neighbours."""

    layers: list[LayerStyle] = field(default_factory=list)

    @property
    def channels(self) -> list[int]:
        return [ls.channels for ls in self.layers]

    @property
    def size(self) -> int:
        return sum(4 * c for c in self.channels)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> LayerStyle:
        return self.layers[i]

    def flat(self) -> np.ndarray:
        return np.concatenate([ls.as_array().ravel() for ls in self.layers]) if self.layers else np.zeros(0)

    def to_bytes(self) -> bytes:
        """Header ``(L, C_1..C_L)`` as little-endian int64, then little-endian doubles.

        Each layer is laid out as (mu_bar, sigma_bar, var_mu, var_sigma).
        """
        chans = self.channels
        header = struct.pack(f"<{len(chans) + 1}q", len(chans), *chans)
        return header + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "StyleVector":
        (n_layers,) = struct.unpack_from("<q", buf, 0)
        chans = struct.unpack_from(f"<{n_layers}q", buf, 8)
        off = 8 * (n_layers + 1)
        payload = np.frombuffer(buf, dtype="<f8", offset=off).astype(np.float64)
        if payload.size != sum(4 * c for c in chans):
            raise InputError("style vector payload length does not match its header")
        layers, pos = [], 0
        for c in chans:
            block = payload[pos : pos + 4 * c].reshape(4, c)
            layers.append(LayerStyle(*(row.copy() for row in block)))
            pos += 4 * c
        return cls(layers)

    @classmethod
    def from_activations(cls, acts: Sequence[np.ndarray], eps_var: float = 0.0) -> "StyleVector":
        layers = []
        for h in acts:
            st = instance_stats(Tensor(h), eps_var)
            vm, vs = second_order_stats(st)
            layers.append(
                LayerStyle(
                    st.mu.data.mean(axis=0),
                    st.sigma.data.mean(axis=0),
                    vm.data.copy(),
                    vs.data.copy(),
                )
            )
        return cls(layers)


def style_vector_size(channels: Sequence[int]) -> int:
    return sum(4 * int(c) for c in channels)


def device_style_vector(model, params: np.ndarray, x: np.ndarray, layers=None, eps_var: float = 0.0) -> StyleVector:
    """Style vector of a device's batch under the plain (unaugmented) forward pass.

    ``layers`` selects hooked blocks (1-based); default is every hook of the model.
    """
    hooks = list(model.spec.hooks) if layers is None else list(layers)
    for ell in hooks:
        if ell not in model.spec.hooks:
            raise ConfigError(f"layer {ell} is not a hook point of this model (hooks {model.spec.hooks})")
    _, _, acts = model.forward(params, x, capture=True, requires_grad=False, upto=max(hooks))
    return StyleVector.from_activations([acts[ell].data for ell in hooks], eps_var)


@dataclass
class BoundReport:
    layer: int
    U: float
    mu_bar_max: float
    sigma_bar_max: float
    passed: bool

    @property
    def mu_margin(self) -> float:
        return self.U - self.mu_bar_max

    @property
    def sigma_margin(self) -> float:
        return np.sqrt(2.0) * self.U - self.sigma_bar_max


def check_lemma1_bounds(sv: StyleVector, U_per_layer: Sequence[float], rtol: float = 1e-12) -> list[BoundReport]:
    """Check ``|mu_bar| <= U`` and ``|sigma_bar| <= sqrt(2) U`` per layer.

    ``rtol`` absorbs floating-point rounding of the statistics themselves.
    """
    if len(U_per_layer) != len(sv):
        raise InputError("need one U per layer")
    out = []
    for ell, (ls, U) in enumerate(zip(sv.layers, U_per_layer), start=1):
        m = float(np.max(np.abs(ls.mu_bar))) if ls.channels else 0.0
        s = float(np.max(np.abs(ls.sigma_bar))) if ls.channels else 0.0
        slack = rtol * max(U, 1.0)
        ok = m <= U + slack and s <= np.sqrt(2.0) * U + slack
        out.append(BoundReport(ell, float(U), m, s, bool(ok)))
    return out
