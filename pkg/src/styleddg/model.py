"""Small CNN: L conv blocks with style hook points, global pooling and a linear head.

Parameters live in one flat float64 vector ordered ``[block_1, ..., block_L, head]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, avg_pool2d, conv2d, global_avg_pool, linear, relu, softmax_cross_entropy
from .errors import ConfigError, InputError, ShapeError


@dataclass(frozen=True)
class ModelSpec:
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    pool: int = 2  # average pool applied before every block but the first
    num_classes: int = 5
    input_dims: tuple[int, int, int] = (3, 16, 16)
    hooks: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ConfigError("need at least one conv block")
        if any(h < 1 or h > len(self.channels) for h in self.hooks):
            raise ConfigError(f"hooks {self.hooks} must lie in 1..{len(self.channels)}")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel size must be odd (same padding)")
        h, w = self.input_dims[1:]
        for _ in self.channels[1:]:
            h, w = h // self.pool, w // self.pool
        if h < 1 or w < 1:
            raise ConfigError("too many pooling stages for the input size")

    @property
    def depth(self) -> int:
        return len(self.channels)

    @property
    def hook_channels(self) -> list[int]:
        return [self.channels[h - 1] for h in self.hooks]


@dataclass(frozen=True)
class ParamBlock:
    name: str
    start: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.start + self.size


def _layout(spec: ModelSpec) -> list[ParamBlock]:
    blocks, pos = [], 0
    cin = spec.input_dims[0]
    for ell, cout in enumerate(spec.channels, start=1):
        for name, shape in ((f"block{ell}.weight", (cout, cin, spec.kernel, spec.kernel)), (f"block{ell}.bias", (cout,))):
            blocks.append(ParamBlock(name, pos, shape))
            pos += int(np.prod(shape))
        cin = cout
    for name, shape in (("head.weight", (spec.num_classes, cin)), ("head.bias", (spec.num_classes,))):
        blocks.append(ParamBlock(name, pos, shape))
        pos += int(np.prod(shape))
    return blocks


class CNN:
    def __init__(self, spec: Optional[ModelSpec] = None):
        self.spec = spec or ModelSpec()
        self.layout = _layout(self.spec)
        self.n_params = self.layout[-1].stop
        self._by_name = {b.name: b for b in self.layout}

    # -- parameters ------------------------------------------------------
    def block_range(self, ell: int) -> tuple[int, int]:
        """Index range of the parameters of conv block ``ell`` (1-based)."""
        return self._by_name[f"block{ell}.weight"].start, self._by_name[f"block{ell}.bias"].stop

    def unflatten(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        theta = self._check_theta(theta)
        return {b.name: theta[b.start : b.stop].reshape(b.shape).copy() for b in self.layout}

    def flatten(self, named: dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.n_params)
        for b in self.layout:
            arr = np.asarray(named[b.name], dtype=np.float64)
            if arr.shape != b.shape:
                raise ShapeError(f"{b.name}: expected {b.shape}, got {arr.shape}")
            out[b.start : b.stop] = arr.ravel()
        return out

    def init_params(self, seed: int) -> np.ndarray:
        """Fan-in scaled uniform init (He-uniform for conv, LeCun-uniform for the head)."""
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.n_params)
        for b in self.layout:
            if b.name.endswith("bias"):
                continue
            fan_in = int(np.prod(b.shape[1:]))
            gain = 6.0 if b.name.startswith("block") else 3.0
            a = np.sqrt(gain / fan_in)
            theta[b.start : b.stop] = rng.uniform(-a, a, size=b.size)
        return theta

    def _check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected a flat parameter vector of length {self.n_params}, got {theta.shape}")
        return theta

    # -- forward ---------------------------------------------------------
    def forward(
        self,
        theta,
        x,
        plan: Optional[dict] = None,
        capture: bool = False,
        requires_grad: bool = True,
        upto: Optional[int] = None,
    ):
        """Run the network.

        ``plan`` maps hook layer -> callable applied to that block's output
        (after its ReLU).  Returns ``(logits, theta_leaf, captured)`` where
        ``captured`` maps hook layer -> the block output *before* any style
        operator.  With ``capture`` the captured dict is filled; the leaf is
        the flat parameter tensor that receives gradients.  ``upto`` stops
        after that block and returns ``None`` logits.
        """
        theta_leaf = theta if isinstance(theta, Tensor) else Tensor(self._check_theta(theta), requires_grad=requires_grad)
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if xt.ndim != 4 or xt.shape[1:] != tuple(self.spec.input_dims):
            raise ShapeError(f"input must be (B, {', '.join(map(str, self.spec.input_dims))}), got {xt.shape}")
        plan = plan or {}
        stray = set(plan) - set(self.spec.hooks)
        if stray:
            raise InputError(f"plan targets layer(s) {sorted(stray)}, which are not hook points")
        captured: dict[int, Tensor] = {}
        p = self._by_name
        h = xt
        pad = self.spec.kernel // 2
        for ell in range(1, self.spec.depth + 1):
            if ell > 1:
                h = avg_pool2d(h, self.spec.pool)
            w = self._param(theta_leaf, p[f"block{ell}.weight"])
            b = self._param(theta_leaf, p[f"block{ell}.bias"])
            h = relu(conv2d(h, w, b, stride=1, pad=pad))
            if capture and ell in self.spec.hooks:
                captured[ell] = h
            if ell in plan:
                h = plan[ell](h)
            if upto == ell:
                return None, theta_leaf, captured
        feats = global_avg_pool(h).reshape(h.shape[0], h.shape[1])
        logits = linear(feats, self._param(theta_leaf, p["head.weight"]), self._param(theta_leaf, p["head.bias"]))
        return logits, theta_leaf, captured

    @staticmethod
    def _param(leaf: Tensor, b: ParamBlock) -> Tensor:
        return leaf[b.start : b.stop].reshape(b.shape)

    def logits(self, theta, x, plan=None) -> np.ndarray:
        return self.forward(theta, x, plan, requires_grad=False)[0].data

    def loss_and_grad(self, theta, x, y, plan=None) -> tuple[float, np.ndarray]:
        logits, leaf, _ = self.forward(theta, x, plan)
        loss = softmax_cross_entropy(logits, y)
        loss.backward()
        return float(loss.data), leaf.grad

    def loss(self, theta, x, y, plan=None) -> float:
        logits, _, _ = self.forward(theta, x, plan, requires_grad=False)
        return float(softmax_cross_entropy(logits, y).data)

    def predict(self, theta, x, chunk: int = 512) -> np.ndarray:
        x = np.asarray(x)
        out = [self.logits(theta, x[i : i + chunk]).argmax(axis=1) for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # -- checkpoints -----------------------------------------------------
    def save_checkpoint(self, theta, path) -> None:
        """Flat little-endian doubles plus a JSON sidecar with the block index map."""
        path = Path(path)
        theta = self._check_theta(theta)
        path.write_bytes(theta.astype("<f8").tobytes())
        meta = {
            "n_params": self.n_params,
            "spec": {
                "channels": list(self.spec.channels),
                "kernel": self.spec.kernel,
                "pool": self.spec.pool,
                "num_classes": self.spec.num_classes,
                "input_dims": list(self.spec.input_dims),
                "hooks": list(self.spec.hooks),
            },
            "blocks": [{"name": b.name, "start": b.start, "stop": b.stop, "shape": list(b.shape)} for b in self.layout],
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))

    @staticmethod
    def load_checkpoint(path) -> tuple["CNN", np.ndarray]:
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        s = meta["spec"]
        model = CNN(
            ModelSpec(
                channels=tuple(s["channels"]),
                kernel=s["kernel"],
                pool=s["pool"],
                num_classes=s["num_classes"],
                input_dims=tuple(s["input_dims"]),
                hooks=tuple(s["hooks"]),
            )
        )
        theta = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
        if theta.size != model.n_params:
            raise ShapeError("checkpoint length does not match its sidecar")
        return model, theta


def hook_outputs(model: CNN, theta, x) -> list[np.ndarray]:
    """Plain-forward activations at every hook, in hook order."""
    _, _, acts = model.forward(theta, x, capture=True, requires_grad=False)
    return [acts[ell].data for ell in model.spec.hooks]


def spec_from_channels(channels: Sequence[int], **kw) -> ModelSpec:
    channels = tuple(int(c) for c in channels)
    return ModelSpec(channels=channels, hooks=tuple(range(1, len(channels) + 1)), **kw)
