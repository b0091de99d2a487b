"""Synthetic multi-domain images: shared class content, domain-specific style.

Each sample renders a class-dependent grey-level pattern, which a domain then
colours with a per-channel gain and offset and overlays with a
domain-specific texture grating.  Content depends only on ``(class,
instance seed)``, so two domains with equal style parameters yield equal
images.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InputError

MAGIC = b"SDDG0001"


@dataclass(frozen=True)
class DomainSpec:
    scale: tuple[float, ...] = (1.0, 1.0, 1.0)
    shift: tuple[float, ...] = (0.0, 0.0, 0.0)
    texture_freq: float = 0.0  # cycles per image
    texture_angle: float = 0.0  # radians
    texture_amp: float = 0.0
    noise: float = 0.0


DEFAULT_DOMAINS: tuple[DomainSpec, ...] = (
    DomainSpec((1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.0, 0.0, 0.0, 0.05),
    DomainSpec((2.5, 0.6, 1.4), (-0.8, 0.5, 0.2), 3.0, 0.0, 0.4, 0.05),
    DomainSpec((0.4, 1.8, 0.9), (0.6, -0.7, 0.9), 5.0, np.pi / 2, 0.4, 0.05),
    DomainSpec((1.6, 0.3, 2.2), (1.0, 0.3, -0.6), 4.0, np.pi / 4, 0.5, 0.05),
)


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W)
    y: np.ndarray  # (N,)
    domain: np.ndarray  # (N,)
    split: np.ndarray = field(default=None)  # (N,) 0 = train, 1 = test

    def __post_init__(self):
        if self.split is None:
            self.split = np.zeros(len(self.y), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], self.domain[idx], self.split[idx])

    def save(self, path) -> None:
        """Header (magic, N, C, H, W) then little-endian doubles and int64 labels/domains/splits."""
        n, c, h, w = self.x.shape
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<4q", n, c, h, w))
            fh.write(self.x.astype("<f8").tobytes())
            for arr in (self.y, self.domain, self.split):
                fh.write(np.asarray(arr).astype("<i8").tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        buf = Path(path).read_bytes()
        if buf[:8] != MAGIC:
            raise InputError(f"{path}: not a dataset file")
        n, c, h, w = struct.unpack_from("<4q", buf, 8)
        off = 8 + 32
        size = n * c * h * w
        x = np.frombuffer(buf, "<f8", size, off).reshape(n, c, h, w).astype(np.float64)
        off += 8 * size
        ints = [np.frombuffer(buf, "<i8", n, off + 8 * n * k).astype(np.int64) for k in range(3)]
        return cls(x, *ints)


def _shape_mask(cls: int, rng: np.random.Generator, hw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    c = hw / 2 - 0.5
    cy, cx = c + rng.uniform(-2, 2), c + rng.uniform(-2, 2)
    s = hw * rng.uniform(0.22, 0.32)
    t = max(1.0, hw * rng.uniform(0.08, 0.14))
    if cls == 0:  # disk
        m = ((yy - cy) ** 2 + (xx - cx) ** 2) <= s**2
    elif cls == 1:  # horizontal bar
        m = (np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= s * 1.3)
    elif cls == 2:  # vertical bar
        m = (np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= s * 1.3)
    elif cls == 3:  # plus
        m = ((np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= s * 1.2)) | ((np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= s * 1.2))
    elif cls == 4:  # hollow square
        d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        m = (d <= s * 1.1) & (d >= s * 1.1 - t)
    elif cls == 5:  # diagonal bar
        m = (np.abs((yy - cy) - (xx - cx)) <= t * 1.2) & (np.abs(yy - cy) <= s * 1.1)
    elif cls == 6:  # ring
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        m = (r <= s * 1.1) & (r >= s * 1.1 - t)
    else:
        raise InputError(f"no content pattern for class {cls}")
    return m.astype(np.float64)


def render_content(cls: int, instance_seed: int, hw: int = 16) -> np.ndarray:
    """Grey-level content in [0, 1] for one (class, instance)."""
    rng = np.random.default_rng([int(cls), int(instance_seed)])
    return _shape_mask(cls, rng, hw)


def apply_style(content: np.ndarray, d: DomainSpec, rng: Optional[np.random.Generator] = None, channels: int = 3) -> np.ndarray:
    hw = content.shape[-1]
    scale = np.asarray(d.scale, dtype=np.float64)[:channels, None, None]
    shift = np.asarray(d.shift, dtype=np.float64)[:channels, None, None]
    img = scale * content[None] + shift
    if d.texture_amp:
        yy, xx = np.mgrid[0:hw, 0:hw] / hw
        phase = 2 * np.pi * d.texture_freq * (np.cos(d.texture_angle) * xx + np.sin(d.texture_angle) * yy)
        img = img + d.texture_amp * np.sin(phase)[None] * np.sign(scale)
    if d.noise and rng is not None:
        img = img + d.noise * rng.standard_normal(img.shape)
    return img


def generate(
    domains: Sequence[DomainSpec] = DEFAULT_DOMAINS,
    classes: int = 5,
    train_per_domain: int = 600,
    test_per_domain: int = 300,
    hw: int = 16,
    channels: int = 3,
    seed: int = 0,
) -> Dataset:
    """Balanced labels, content shared across domains via instance seeds."""
    if classes < 2 or len(domains) < 2:
        raise InputError("need at least two classes and two domains")
    if classes > 7:
        raise InputError("at most 7 content classes are defined")
    per = train_per_domain + test_per_domain
    xs, ys, ds, sp = [], [], [], []
    for d_id, d in enumerate(domains):
        rng = np.random.default_rng([seed, d_id])
        for k in range(per):
            cls = k % classes
            inst = int(rng.integers(2**31))
            xs.append(apply_style(render_content(cls, inst, hw), d, rng, channels))
            ys.append(cls)
            ds.append(d_id)
            sp.append(0 if k < train_per_domain else 1)
    return Dataset(np.stack(xs), np.asarray(ys, dtype=np.int64), np.asarray(ds, dtype=np.int64), np.asarray(sp, dtype=np.int64))


@dataclass
class Shard:
    device: int
    domain: int
    x: np.ndarray
    y: np.ndarray
    index: np.ndarray  # positions in the parent dataset


def split_leave_one_domain_out(ds: Dataset, target: int, m: int, seed: int = 0, split: Optional[int] = 0):
    """Hold out ``target``; give each device one source domain round-robin.

    Devices sharing a domain get disjoint, near-equal sample subsets.  Only
    rows with the requested ``split`` (train by default) are sharded; the
    target set keeps every row of the held-out domain with that split.
    """
    doms = sorted(set(ds.domain.tolist()))
    if target not in doms:
        raise InputError(f"target domain {target} not in dataset domains {doms}")
    sources = [d for d in doms if d != target]
    if m < len(sources):
        raise InputError(f"need m >= {len(sources)} devices to cover every source domain")
    rows = np.ones(len(ds), dtype=bool) if split is None else ds.split == split
    assign = [sources[i % len(sources)] for i in range(m)]
    rng = np.random.default_rng([seed, target])
    shards = []
    for d in sources:
        devs = [i for i, a in enumerate(assign) if a == d]
        idx = np.flatnonzero(rows & (ds.domain == d))
        idx = idx[rng.permutation(len(idx))]
        for dev, part in zip(devs, np.array_split(idx, len(devs))):
            part = np.sort(part)
            shards.append(Shard(dev, d, ds.x[part], ds.y[part], part))
    shards.sort(key=lambda s: s.device)
    tgt = np.flatnonzero(rows & (ds.domain == target))
    return shards, ds.subset(tgt)


def input_style_gap(ds: Dataset, a: int, b: int) -> float:
    """Distance between two domains' mean per-channel (mu, sigma) at the input."""

    def stats(d):
        x = ds.x[ds.domain == d]
        return np.concatenate([x.mean(axis=(2, 3)).mean(axis=0), x.std(axis=(2, 3)).mean(axis=0)])

    return float(np.linalg.norm(stats(a) - stats(b)))
