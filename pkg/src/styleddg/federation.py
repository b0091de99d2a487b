"""Decentralized training engine: style exchange, local gradient, gossip update.

One iteration ``k`` runs in two phases separated by exchange barriers:

1. every device samples a mini-batch, computes its style vector on it, and
   publishes ``(theta_i, psi_i)`` tagged with ``(k, batch hash)``;
2. every device computes its stochastic gradient on the *same* batch using
   neighbour styles from this iteration, then all devices apply the
   Metropolis consensus step simultaneously from the iteration-k snapshot.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .data import Shard
from .errors import ConfigError, ProtocolError
from .graph import DeviceGraph
from .layers import StyleLayerConfig, build_plan
from .model import CNN
from .stats import StyleVector, device_style_vector

log = logging.getLogger(__name__)

BYTES_PER_SCALAR = 8


@dataclass
class Payload:
    sender: int
    k: int
    batch_hash: str
    theta: np.ndarray
    style: Optional[StyleVector]


@dataclass
class DeviceState:
    id: int
    theta: np.ndarray
    shard: Shard
    neighbors: list[int]
    data_rng: np.random.Generator
    style_rng: np.random.Generator
    inbox: dict[int, Payload] = field(default_factory=dict)
    batch: Optional[tuple[np.ndarray, np.ndarray]] = None
    batch_hash: str = ""
    _order: np.ndarray = field(default=None, repr=False)
    _pos: int = 0

    @property
    def inbox_styles(self) -> dict[int, StyleVector]:
        return {j: p.style for j, p in self.inbox.items() if p.style is not None}

    @property
    def inbox_models(self) -> dict[int, np.ndarray]:
        return {j: p.theta for j, p in self.inbox.items()}

    def sample_batch(self, B: int) -> tuple[np.ndarray, np.ndarray]:
        """Without-replacement epochs over the shard, wrapping around (reshuffled)."""
        n = len(self.shard.y)
        take = []
        while len(take) < B:
            if self._order is None or self._pos >= n:
                self._order = self.data_rng.permutation(n)
                self._pos = 0
            step = min(B - len(take), n - self._pos)
            take.extend(self._order[self._pos : self._pos + step].tolist())
            self._pos += step
        idx = np.asarray(take)
        x, y = self.shard.x[idx], self.shard.y[idx]
        self.batch = (x, y)
        self.batch_hash = hashlib.sha1(x.tobytes() + y.tobytes()).hexdigest()[:16]
        return x, y


@dataclass
class IterationRecord:
    k: int
    lr: float
    losses: list[float]
    disagreement: float
    grad_norm_sq: float  # NaN when the probe was not evaluated this step
    wall_time: float
    bytes_model: int
    bytes_style: int
    active_layers: int = 0

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses))


def lr_schedule(kind: str, lr0: float, K: int) -> Callable[[int], float]:
    """``theorem``: alpha0 / sqrt(K + 1); ``cosine``: half-cosine decay; ``constant``."""
    if kind == "theorem":
        a = lr0 / math.sqrt(K + 1)
        return lambda k: a
    if kind == "cosine":
        return lambda k: lr0 * 0.5 * (1.0 + math.cos(math.pi * k / max(K, 1)))
    if kind == "constant":
        return lambda k: lr0
    raise ConfigError(f"unknown lr schedule {kind!r}")


def disagreement(thetas: Sequence[np.ndarray]) -> float:
    """``sum_i ||theta_i - mean||^2 / m``."""
    T = np.stack(thetas)
    return float(((T - T.mean(axis=0)) ** 2).sum() / len(thetas))


def consensus_step(thetas: Sequence[np.ndarray], W: np.ndarray, lr: float, grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Simultaneous gossip update from one snapshot of all models."""
    m = len(thetas)
    out = []
    for i in range(m):
        agg = np.zeros_like(thetas[i])
        for j in range(m):
            if j != i and W[i, j] != 0.0:
                agg += W[i, j] * (thetas[j] - thetas[i])
        out.append(thetas[i] + agg - lr * grads[i])
    return out


def local_gradient(
    model: CNN,
    dev: DeviceState,
    cfg: StyleLayerConfig,
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[float, np.ndarray, list[int]]:
    """One stochastic sample of the device's style-augmented loss gradient."""
    styles = None
    if cfg.mode == "styleddg":
        styles = dev.inbox_styles
        if not styles:
            raise ProtocolError(f"device {dev.id} has no neighbour styles in styleddg mode")
    plan, draw = build_plan(cfg, dev.style_rng, model.spec.hooks, model.spec.hook_channels, len(y), styles)
    loss, grad = model.loss_and_grad(dev.theta, x, y, plan)
    return loss, grad, draw.active


class Simulation:
    """Holds device states and advances them one synchronous iteration at a time."""

    def __init__(
        self,
        model: CNN,
        graph: DeviceGraph,
        W: np.ndarray,
        shards: Sequence[Shard],
        style_cfg: StyleLayerConfig,
        batch_size: int,
        seed: int,
        theta0: Optional[np.ndarray] = None,
        probe: Optional[tuple[np.ndarray, np.ndarray]] = None,
        threads: int = 1,
    ):
        if len(shards) != graph.m:
            raise ConfigError(f"{len(shards)} shards for {graph.m} devices")
        if style_cfg.mode == "styleddg" and batch_size % 2:
            raise ConfigError(f"batch size must be even in styleddg mode, got {batch_size}")
        self.model = model
        self.graph = graph
        self.W = np.asarray(W, dtype=np.float64)
        self.cfg = style_cfg
        self.B = batch_size
        self.probe = probe
        self.threads = max(1, int(threads))
        theta0 = model.init_params(seed) if theta0 is None else np.asarray(theta0, dtype=np.float64)
        ss = np.random.SeedSequence(seed)
        streams = ss.spawn(graph.m)
        self.devices = []
        for i, sh in enumerate(shards):
            d_ss, s_ss = streams[i].spawn(2)
            self.devices.append(
                DeviceState(
                    id=i,
                    theta=theta0.copy(),
                    shard=sh,
                    neighbors=graph.neighbors(i),
                    data_rng=np.random.default_rng(d_ss),
                    style_rng=np.random.default_rng(s_ss),
                )
            )
        self.k = 0
        n_style = sum(4 * c for c in model.spec.hook_channels) if style_cfg.mode == "styleddg" else 0
        n_links = int(graph.adjacency.sum())
        self.bytes_model = n_links * model.n_params * BYTES_PER_SCALAR
        self.bytes_style = n_links * n_style * BYTES_PER_SCALAR

    # -- phases ----------------------------------------------------------
    def _map(self, fn, items):
        if self.threads == 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(fn, items))

    def _publish(self, dev: DeviceState) -> Payload:
        x, _ = dev.sample_batch(self.B)
        style = device_style_vector(self.model, dev.theta, x) if self.cfg.mode == "styleddg" else None
        return Payload(dev.id, self.k, dev.batch_hash, dev.theta, style)

    def _gradient(self, dev: DeviceState):
        for j, p in dev.inbox.items():
            if p.k != self.k:
                raise ProtocolError(f"device {dev.id} holds a stale payload from {j} (k={p.k}, now {self.k})")
        x, y = dev.batch
        return local_gradient(self.model, dev, self.cfg, x, y)

    def step(self, lr: float, probe: bool = False) -> IterationRecord:
        t0 = time.perf_counter()
        payloads = self._map(self._publish, self.devices)
        # barrier 1: deliver every payload of iteration k to each neighbour
        for dev in self.devices:
            dev.inbox = {j: payloads[j] for j in dev.neighbors}
        results = self._map(self._gradient, self.devices)
        # barrier 2: simultaneous update from the iteration-k snapshot
        thetas = [d.theta for d in self.devices]
        new = consensus_step(thetas, self.W, lr, [r[1] for r in results])
        gn = self.probe_grad_norm_sq(thetas) if probe else float("nan")
        for dev, th in zip(self.devices, new):
            dev.theta = th
        rec = IterationRecord(
            k=self.k,
            lr=lr,
            losses=[r[0] for r in results],
            disagreement=disagreement(thetas),
            grad_norm_sq=gn,
            wall_time=time.perf_counter() - t0,
            bytes_model=self.bytes_model,
            bytes_style=self.bytes_style,
            active_layers=sum(len(r[2]) for r in results),
        )
        self.k += 1
        return rec

    def probe_grad_norm_sq(self, thetas: Optional[Sequence[np.ndarray]] = None) -> float:
        """``||grad F(theta_bar)||^2`` on the fixed probe batch, style layers off."""
        if self.probe is None:
            return float("nan")
        thetas = [d.theta for d in self.devices] if thetas is None else thetas
        bar = np.mean(np.stack(thetas), axis=0)
        _, g = self.model.loss_and_grad(bar, *self.probe)
        return float(g @ g)

    def run(self, K: int, schedule: Callable[[int], float], probe_every: int = 0) -> Iterator[IterationRecord]:
        """Yield one record per iteration for ``k = 0..K-1``."""
        for _ in range(K):
            probe = probe_every > 0 and self.k % probe_every == 0
            yield self.step(schedule(self.k), probe)

    @property
    def thetas(self) -> list[np.ndarray]:
        return [d.theta for d in self.devices]

    def average_model(self) -> np.ndarray:
        return np.mean(np.stack(self.thetas), axis=0)


def evaluate(model: CNN, thetas: Sequence[np.ndarray], x: np.ndarray, y: np.ndarray) -> dict:
    """Top-1 accuracy of each device model and of the average model (no style layers)."""
    per_device = [float((model.predict(th, x) == y).mean()) for th in thetas]
    bar = np.mean(np.stack(thetas), axis=0)
    return {"per_device": per_device, "average_model": float((model.predict(bar, x) == y).mean())}
