"""Feature-level style operators: AdaIN, MixStyle, DSU, StyleShift, StyleExplore.

Every operator is built from differentiable primitives, so gradients reach
the layer input (and through it the model parameters) without custom
backward code.  Randomness is always passed in; operators own no RNG state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, concat, restyle, safe_sqrt
from .errors import ConfigError, InputError, ShapeError
from .stats import EPS_VAR, InstanceStats, LayerStyle, StyleVector, instance_stats, second_order_stats

MODES = ("none", "dsgd", "mixstyle", "dsu", "styleddg")


def _check_target(x: Tensor, t, name: str) -> None:
    shape = t.shape
    B, C = x.shape[:2]
    if shape not in ((B, C), (C,)):
        raise ShapeError(f"{name} has shape {shape}, expected ({B}, {C}) or ({C},)")


def _adain(x: Tensor, st: InstanceStats, mu_t, sigma_t) -> Tensor:
    return restyle(x, st.mu, st.sigma, mu_t, sigma_t)


def adain(x: Tensor, mu_t, sigma_t, eps_var: float = EPS_VAR) -> Tensor:
    """Normalize each (instance, channel) map by its own stats, then restyle."""
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {x.shape}")
    _check_target(x, mu_t, "mu_t")
    _check_target(x, sigma_t, "sigma_t")
    return _adain(x, instance_stats(x, eps_var), mu_t, sigma_t)


def _mix(st: InstanceStats, mu_t, sigma_t, lam: float) -> tuple[Tensor, Tensor]:
    beta = st.mu * lam + _as_t(mu_t) * (1.0 - lam)
    gamma = st.sigma * lam + _as_t(sigma_t) * (1.0 - lam)
    return beta, gamma


def _as_t(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def mixstyle(x: Tensor, mu_t, sigma_t, lam: float, eps_var: float = EPS_VAR) -> Tensor:
    """AdaIN onto the convex combination ``lam * own + (1 - lam) * target``."""
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {x.shape}")
    _check_target(x, mu_t, "mu_t")
    _check_target(x, sigma_t, "sigma_t")
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"lambda must lie in [0, 1], got {lam}")
    st = instance_stats(x, eps_var)
    beta, gamma = _mix(st, mu_t, sigma_t, lam)
    return _adain(x, st, beta, gamma)


def _check_perm(perm, n: int, name: str = "permutation") -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.issubdtype(perm.dtype, np.integer):
        raise InputError(f"{name} must be {n} integers")
    if not np.array_equal(np.sort(perm), np.arange(n)):
        raise InputError(f"{name} is not a bijection on 0..{n - 1}")
    return perm


def _check_half_mask(mask, n: int, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (n,) or not np.isin(mask, (0, 1)).all() or int(mask.sum()) * 2 != n:
        raise InputError(f"{name} must be a 0-1 vector of length {n} with exactly {n // 2} ones")
    return mask.astype(np.int64)


def mixstyle_shuffle_forward(x: Tensor, perm, lam: float, eps_var: float = EPS_VAR) -> Tensor:
    """MixStyle against the styles of a batch permutation of ``x`` itself."""
    perm = _check_perm(perm, x.shape[0])
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"lambda must lie in [0, 1], got {lam}")
    st = instance_stats(x, eps_var)
    beta, gamma = _mix(st, st.mu[perm], st.sigma[perm], lam)
    return _adain(x, st, beta, gamma)


def dsu(x: Tensor, eps_mu, eps_sigma, eps_var: float = EPS_VAR) -> Tensor:
    """Perturb own styles by Gaussian noise scaled with the batch's style spread.

    ``eps_mu``/``eps_sigma`` may be (B, C) or (C,).
    """
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {x.shape}")
    _check_target(x, np.asarray(eps_mu), "eps_mu")
    _check_target(x, np.asarray(eps_sigma), "eps_sigma")
    st = instance_stats(x, eps_var)
    var_mu, var_sigma = second_order_stats(st)
    beta = st.mu + safe_sqrt(var_mu) * np.asarray(eps_mu, dtype=np.float64)
    gamma = st.sigma + safe_sqrt(var_sigma) * np.asarray(eps_sigma, dtype=np.float64)
    return _adain(x, st, beta, gamma)


def shifted_targets(ls: LayerStyle, eps_mu, eps_sigma) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour batch-level style perturbed by its own across-batch spread."""
    mu_t = ls.mu_bar + np.asarray(eps_mu) * np.sqrt(np.maximum(ls.var_mu, 0.0))
    sigma_t = ls.sigma_bar + np.asarray(eps_sigma) * np.sqrt(np.maximum(ls.var_sigma, 0.0))
    return mu_t, sigma_t


def style_shift(x_s: Tensor, x_sc: Tensor, ls: LayerStyle, eps_mu, eps_sigma, eps_var: float = EPS_VAR) -> Tensor:
    """Move ``x_s`` onto a neighbour's style; return ``[shifted x_s; x_sc]``."""
    if x_s.ndim != 4 or x_sc.ndim != 4:
        raise ShapeError("style_shift expects rank-4 halves")
    if x_s.shape[0] != x_sc.shape[0]:
        raise ConfigError("style_shift needs an even batch split into equal halves")
    if x_s.shape[1:] != x_sc.shape[1:]:
        raise ShapeError(f"halves disagree: {x_s.shape} vs {x_sc.shape}")
    C = x_s.shape[1]
    if ls.channels != C:
        raise ShapeError(f"neighbour style has {ls.channels} channels, activation has {C}")
    mu_t, sigma_t = shifted_targets(ls, eps_mu, eps_sigma)
    half = x_s.shape[0]
    shifted = adain(x_s, np.broadcast_to(mu_t, (half, C)), np.broadcast_to(sigma_t, (half, C)), eps_var)
    return concat([shifted, x_sc], axis=0)


def style_explore(x: Tensor, I_e, I_m, lam: float, alpha: float, eps_var: float = EPS_VAR) -> Tensor:
    """Extrapolate half the instance styles away from the batch mean, then MixStyle.

    Rows with ``I_e == 1`` get ``s + alpha (s - mean_b s)`` for ``s`` in
    (mu, sigma); the rest keep their own statistics.  Targets are then
    reordered by the permutation ``I_m``.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {x.shape}")
    B = x.shape[0]
    mask = _check_half_mask(I_e, B, "I_e").astype(np.float64)[:, None]
    perm = _check_perm(I_m, B, "I_m")
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"lambda must lie in [0, 1], got {lam}")
    st = instance_stats(x, eps_var)
    mu_e = st.mu + (st.mu - st.mu.mean(axis=0, keepdims=True)) * (alpha * mask)
    sigma_e = st.sigma + (st.sigma - st.sigma.mean(axis=0, keepdims=True)) * (alpha * mask)
    beta, gamma = _mix(st, mu_e[perm], sigma_e[perm], lam)
    return _adain(x, st, beta, gamma)


# ---------------------------------------------------------------------------
# randomness and configuration


@dataclass
class StyleLayerConfig:
    mode: str = "none"
    p_ell: float = 0.5
    alpha_explore: float = 3.0
    lambda_dist: tuple[float, float] = (0.1, 0.1)
    lambda_fixed: Optional[float] = None  # overrides the Beta draw when set
    noise_scale: float = 1.0  # multiplies the DSU / StyleShift Gaussian draws
    eps_var: float = EPS_VAR

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown style mode {self.mode!r}; choose from {MODES}")
        if not 0.0 <= self.p_ell <= 1.0:
            raise ConfigError(f"p_ell must lie in [0, 1], got {self.p_ell}")
        if self.alpha_explore < 0:
            raise ConfigError("alpha_explore must be >= 0")
        if self.lambda_fixed is not None and not 0.0 <= self.lambda_fixed <= 1.0:
            raise ConfigError("lambda_fixed must lie in [0, 1]")

    def draw_lambda(self, rng: np.random.Generator) -> float:
        lam = float(rng.beta(*self.lambda_dist))
        return lam if self.lambda_fixed is None else float(self.lambda_fixed)


@dataclass
class LayerRandomness:
    """One layer's draw of the random variables of the StyleDDG transform."""

    eps_mu: np.ndarray
    eps_sigma: np.ndarray
    lam: float
    I_s: np.ndarray
    I_e: np.ndarray
    I_m: np.ndarray
    neighbor: int = -1


def random_half_mask(rng: np.random.Generator, B: int) -> np.ndarray:
    mask = np.zeros(B, dtype=np.int64)
    mask[rng.permutation(B)[: B // 2]] = 1
    return mask


def sample_layer_randomness(
    rng: np.random.Generator,
    B: int,
    C: int,
    neighbors: Sequence[int] = (),
    lambda_dist: tuple[float, float] = (0.1, 0.1),
) -> LayerRandomness:
    if B % 2:
        raise ConfigError(f"batch size must be even for StyleDDG, got {B}")
    neighbor = int(neighbors[rng.integers(len(neighbors))]) if len(neighbors) else -1
    return LayerRandomness(
        eps_mu=rng.standard_normal(C),
        eps_sigma=rng.standard_normal(C),
        lam=float(rng.beta(*lambda_dist)),
        I_s=random_half_mask(rng, B),
        I_e=random_half_mask(rng, B),
        I_m=rng.permutation(B),
        neighbor=neighbor,
    )


def styleddg_layer(
    h: Tensor,
    ls: Optional[LayerStyle],
    r: Optional[LayerRandomness],
    cfg: StyleLayerConfig,
    active: bool = True,
) -> Tensor:
    """StyleShift on the ``I_s`` half, then StyleExplore on the whole batch.

    The shift stage emits ``[shifted; untouched]``; after exploration the rows
    are put back in their original batch positions so labels stay aligned.
    """
    if not active:
        return h
    B = h.shape[0]
    if B % 2:
        raise ConfigError(f"batch size must be even for StyleDDG, got {B}")
    if ls is None or r is None:
        raise InputError("an active StyleDDG layer needs a neighbour style and randomness")
    I_s = _check_half_mask(r.I_s, B, "I_s")
    idx_s, idx_c = np.flatnonzero(I_s == 1), np.flatnonzero(I_s == 0)
    shifted = style_shift(h[idx_s], h[idx_c], ls, r.eps_mu, r.eps_sigma, cfg.eps_var)
    explored = style_explore(shifted, r.I_e, r.I_m, r.lam, cfg.alpha_explore, cfg.eps_var)
    return explored[np.argsort(np.concatenate([idx_s, idx_c]))]


# ---------------------------------------------------------------------------
# per-forward plans

Plan = dict  # hook layer (1-based) -> Callable[[Tensor], Tensor]


@dataclass
class PlanDraw:
    """What was sampled for one forward pass; kept for logging and replay."""

    active: list[int]
    records: dict


def build_plan(
    cfg: StyleLayerConfig,
    rng: np.random.Generator,
    hooks: Sequence[int],
    channels: Sequence[int],
    batch: int,
    neighbor_styles: Optional[dict[int, StyleVector]] = None,
) -> tuple[Plan, PlanDraw]:
    """Sample which hooked layers fire and their randomness for one forward pass.

    Each hook fires independently with probability ``cfg.p_ell``.  Draws whose
    operator is the identity in exact arithmetic (MixStyle at lambda = 1, DSU
    at zero noise) are left out of the plan so that such runs stay
    bit-identical to the unaugmented model.
    """
    plan: Plan = {}
    draw = PlanDraw([], {})
    if cfg.mode in ("none", "dsgd"):
        return plan, draw
    if cfg.mode == "styleddg":
        if not neighbor_styles:
            raise InputError("styleddg mode needs at least one neighbour style vector")
        if batch % 2:
            raise ConfigError(f"batch size must be even for StyleDDG, got {batch}")
    nbrs = sorted(neighbor_styles) if neighbor_styles else []
    for pos, (ell, C) in enumerate(zip(hooks, channels)):
        if not rng.random() < cfg.p_ell:
            continue
        if cfg.mode == "mixstyle":
            perm = rng.permutation(batch)
            lam = cfg.draw_lambda(rng)
            draw.records[ell] = (perm, lam)
            if lam == 1.0:
                continue
            plan[ell] = _bind(mixstyle_shuffle_forward, perm=perm, lam=lam, eps_var=cfg.eps_var)
        elif cfg.mode == "dsu":
            e_mu = rng.standard_normal((batch, C)) * cfg.noise_scale
            e_sig = rng.standard_normal((batch, C)) * cfg.noise_scale
            draw.records[ell] = (e_mu, e_sig)
            if not (e_mu.any() or e_sig.any()):
                continue
            plan[ell] = _bind(dsu, eps_mu=e_mu, eps_sigma=e_sig, eps_var=cfg.eps_var)
        else:
            r = sample_layer_randomness(rng, batch, C, nbrs, cfg.lambda_dist)
            r.eps_mu = r.eps_mu * cfg.noise_scale
            r.eps_sigma = r.eps_sigma * cfg.noise_scale
            if cfg.lambda_fixed is not None:
                r.lam = float(cfg.lambda_fixed)
            ls = neighbor_styles[r.neighbor][pos]
            draw.records[ell] = r
            plan[ell] = _bind(styleddg_layer, ls=ls, r=r, cfg=cfg)
        draw.active.append(ell)
    return plan, draw


def _bind(fn: Callable, **kw) -> Callable[[Tensor], Tensor]:
    return lambda h: fn(h, **kw)
