"""Executable acceptance checks shared by ``styleddg verify`` and the test suite.

Each check returns a :class:`CheckResult` whose ``lines`` hold deterministic
margins.  Wall-clock times are kept out of the report text so that two runs
with the same seeds print byte-identical reports; only the verdict on the
runtime budget appears.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import graph as graph_mod
from .autodiff import Tensor
from .data import DomainSpec, generate, split_leave_one_domain_out
from .federation import Simulation, evaluate, lr_schedule
from .gradcheck import max_rel_error, numeric_grad
from .layers import (
    StyleLayerConfig,
    adain,
    build_plan,
    dsu,
    mixstyle,
    mixstyle_shuffle_forward,
    random_half_mask,
    sample_layer_randomness,
    style_explore,
    style_shift,
    styleddg_layer,
)
from .model import CNN, ModelSpec, spec_from_channels
from .stats import StyleVector, check_lemma1_bounds, instance_stats, style_vector_size

log = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    lines: list[str] = field(default_factory=list)
    seconds: float = 0.0
    budget: Optional[float] = None

    @property
    def within_budget(self) -> bool:
        return self.budget is None or self.seconds < self.budget

    @property
    def ok(self) -> bool:
        return self.passed and self.within_budget

    def summary(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}"


def _fmt(v: float) -> str:
    return f"{v:.3e}"


# ---------------------------------------------------------------------------
# gradient correctness

GRAD_VARIANTS = ("plain", "mixstyle", "dsu", "styleshift", "styleexplore", "styleddg")
GRAD_TOL = 1e-4


def _tiny_problem(rng: np.random.Generator):
    B = int(rng.choice([2, 4]))
    cin = int(rng.integers(1, 4))
    hw = int(rng.choice([4, 6]))
    c1, c2 = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    spec = ModelSpec(channels=(c1, c2), num_classes=3, input_dims=(cin, hw, hw), hooks=(1, 2))
    model = CNN(spec)
    theta = model.init_params(int(rng.integers(2**31)))
    # non-zero biases keep ReLU patterns generic
    theta = theta + 0.1 * rng.standard_normal(theta.size)
    x = rng.standard_normal((B, cin, hw, hw))
    y = rng.integers(0, 3, size=B)
    return model, theta, x, y


def _frozen_op(variant: str, rng: np.random.Generator, B: int, C: int, own_style) -> Callable[[Tensor], Tensor]:
    """One style operator with all its randomness drawn up front."""
    if variant == "mixstyle":
        perm, lam = rng.permutation(B), float(rng.uniform(0.1, 0.9))
        return lambda h: mixstyle_shuffle_forward(h, perm, lam)
    if variant == "dsu":
        e_mu, e_sig = rng.standard_normal((B, C)), rng.standard_normal((B, C))
        return lambda h: dsu(h, e_mu, e_sig)
    ls = own_style
    r = sample_layer_randomness(rng, B, C, [1])
    r.lam = float(rng.uniform(0.1, 0.9))
    if variant == "styleshift":
        idx_s, idx_c = np.flatnonzero(r.I_s == 1), np.flatnonzero(r.I_s == 0)
        return lambda h: style_shift(h[idx_s], h[idx_c], ls, r.eps_mu, r.eps_sigma)
    if variant == "styleexplore":
        return lambda h: style_explore(h, r.I_e, r.I_m, r.lam, 3.0)
    cfg = StyleLayerConfig(mode="styleddg")
    return lambda h: styleddg_layer(h, ls, r, cfg)


def gradient_instance(variant: str, seed: int) -> float:
    """Max per-coordinate relative error of one randomized instance."""
    rng = np.random.default_rng([seed, GRAD_VARIANTS.index(variant)])
    model, theta, x, y = _tiny_problem(rng)
    plan = {}
    if variant != "plain":
        # a style vector from another random batch plays the neighbour's role
        other = rng.standard_normal(x.shape)
        _, _, acts = model.forward(theta, other, capture=True, requires_grad=False)
        sv = StyleVector.from_activations([acts[ell].data for ell in model.spec.hooks])
        for pos, ell in enumerate(model.spec.hooks):
            plan[ell] = _frozen_op(variant, rng, x.shape[0], model.spec.hook_channels[pos], sv[pos])
    _, g = model.loss_and_grad(theta, x, y, plan)
    num = numeric_grad(lambda t: model.loss(t, x, y, plan), theta)
    return max_rel_error(g, num)


def check_gradients(instances: int = 20) -> CheckResult:
    lines, ok = [], True
    for v in GRAD_VARIANTS:
        errs = [gradient_instance(v, s) for s in range(instances)]
        worst = max(errs)
        ok &= worst < GRAD_TOL
        lines.append(f"{v:13s} instances={instances} max_rel_err={_fmt(worst)} (tol {GRAD_TOL:g})")
    return CheckResult("gradient correctness", ok, lines, budget=120.0)


# ---------------------------------------------------------------------------
# operator identities


def _random_activation(rng: np.random.Generator, even: bool = False) -> np.ndarray:
    B = int(rng.integers(1, 4)) * 2 if even else int(rng.integers(1, 7))
    C, H = int(rng.integers(1, 5)), int(rng.integers(3, 7))
    scale = float(np.exp(rng.uniform(-1, 1.5)))
    return rng.standard_normal((B, C, H, H)) * scale + rng.uniform(-2, 2)


def check_identities(instances: int = 100, tol: float = 1e-9) -> CheckResult:
    worst = dict.fromkeys(["adain_own_stats", "mixstyle_lambda1", "dsu_eps0", "explore_alpha0_idperm", "styleddg_inactive"], 0.0)
    for i in range(instances):
        rng = np.random.default_rng([7, i])
        x = _random_activation(rng, even=True)
        B, C = x.shape[:2]
        xt = Tensor(x)
        st = instance_stats(xt, 0.0)
        out = adain(xt, st.mu.data, st.sigma.data, eps_var=0.0).data
        worst["adain_own_stats"] = max(worst["adain_own_stats"], float(np.abs(out - x).max()))
        tgt = rng.standard_normal((B, C))
        out = mixstyle(xt, tgt, np.abs(tgt) + 0.1, 1.0).data
        worst["mixstyle_lambda1"] = max(worst["mixstyle_lambda1"], float(np.abs(out - x).max()))
        out = dsu(xt, np.zeros((B, C)), np.zeros((B, C))).data
        worst["dsu_eps0"] = max(worst["dsu_eps0"], float(np.abs(out - x).max()))
        out = style_explore(xt, random_half_mask(rng, B), np.arange(B), float(rng.uniform()), 0.0).data
        worst["explore_alpha0_idperm"] = max(worst["explore_alpha0_idperm"], float(np.abs(out - x).max()))
        same = styleddg_layer(xt, None, None, StyleLayerConfig("styleddg"), active=False)
        if not np.array_equal(same.data, x):
            worst["styleddg_inactive"] = math.inf
    lines = [f"{k:22s} instances={instances} max_abs_dev={_fmt(v)} (tol {tol:g})" for k, v in worst.items()]
    ok = all(v <= tol for k, v in worst.items() if k != "styleddg_inactive") and worst["styleddg_inactive"] == 0.0
    lines[-1] = f"{'styleddg_inactive':22s} instances={instances} bit_exact={worst['styleddg_inactive'] == 0.0}"
    return CheckResult("operator identities", ok, lines)


# ---------------------------------------------------------------------------
# style statistic and Lipschitz bounds on measured activations


def _random_model_batch(rng: np.random.Generator):
    spec = ModelSpec(channels=tuple(int(c) for c in rng.choice([4, 8, 16], size=3)))
    model = CNN(spec)
    theta = model.init_params(int(rng.integers(2**31)))
    B = int(rng.integers(1, 9))
    x = rng.standard_normal((B,) + spec.input_dims) * float(np.exp(rng.uniform(-2, 2)))
    return model, theta, x


def _acts(model: CNN, theta, x) -> list[np.ndarray]:
    _, _, cap = model.forward(theta, x, capture=True, requires_grad=False)
    return [cap[ell].data for ell in model.spec.hooks]


def check_lemma1(draws: int = 1000) -> CheckResult:
    violations = 0
    min_mu, min_sig = math.inf, math.inf  # smallest slack relative to the bound
    for i in range(draws):
        rng = np.random.default_rng([11, i])
        model, theta, x = _random_model_batch(rng)
        acts = _acts(model, theta, x)
        U = [float(np.abs(h).max()) for h in acts]
        for h, u in zip(acts, U):
            st = instance_stats(Tensor(h), 0.0)
            violations += int((np.abs(st.mu.data) > u).sum() + (np.abs(st.sigma.data) > math.sqrt(2) * u).sum())
            if u > 0:
                min_mu = min(min_mu, (u - np.abs(st.mu.data).max()) / u)
                min_sig = min(min_sig, (math.sqrt(2) * u - st.sigma.data.max()) / (math.sqrt(2) * u))
        for r in check_lemma1_bounds(StyleVector.from_activations(acts), U):
            violations += int(not r.passed)
    lines = [
        f"draws={draws} violations={violations}",
        f"min relative slack: |mu| vs U {min_mu:.4f}, |sigma| vs sqrt(2)U {min_sig:.4f}",
    ]
    return CheckResult("style statistic bounds", violations == 0, lines)


def _layer_stats(h: np.ndarray):
    st = instance_stats(Tensor(h), 0.0)
    mu, sig = st.mu.data, st.sigma.data
    return mu.mean(axis=0), sig.mean(axis=0), mu.var(axis=0), sig.var(axis=0), sig.min(axis=0)


def prop1_trial(i: int) -> dict:
    """One perturbation trial; returns the worst ratio change/bound per part.

    ``U`` and ``D`` are measured per layer over both parameter points;
    ``gamma`` per channel (the argument is channel-wise, and a channel's own
    minimum is at least the layer minimum, so this bound is the tighter one).
    Channels with ``gamma == 0`` fall outside the positivity assumption and
    only enter parts (a) and (c).
    """
    rng = np.random.default_rng([13, i])
    spec = ModelSpec(channels=(8, 16, 32))
    model = CNN(spec)
    theta = model.init_params(int(rng.integers(2**31)))
    x = rng.standard_normal((int(rng.integers(2, 9)),) + spec.input_dims)
    delta = rng.standard_normal(theta.size)
    delta *= (1e-3 if i % 2 == 0 else 1e-2) / np.linalg.norm(delta)
    dn = float(np.linalg.norm(delta))
    A, Bp = _acts(model, theta, x), _acts(model, theta + delta, x)
    worst = {"a": 0.0, "b": 0.0, "c": 0.0, "d": 0.0, "gamma_zero": 0, "channels": 0}
    for h, hp in zip(A, Bp):
        U = max(float(np.abs(h).max()), float(np.abs(hp).max()))
        D = float(np.abs(h - hp).max()) / dn
        s, sp = _layer_stats(h), _layer_stats(hp)
        gamma = np.minimum(s[4], sp[4])
        live = gamma > 0
        worst["gamma_zero"] += int((~live).sum())
        worst["channels"] += gamma.size
        g = np.where(live, gamma, 1.0)
        bounds = [
            np.full(gamma.shape, D * dn),
            4 * U * D / g * dn,
            np.full(gamma.shape, 4 * U * D * dn),
            4 * U * D * (1 + 2 * math.sqrt(2) * U / g) * dn,
        ]
        for k, idx in zip("abcd", range(4)):
            diff = np.abs(s[idx] - sp[idx])
            if not np.isfinite(diff).all():
                worst[k] = math.inf
                continue
            mask = live if k in "bd" else np.ones_like(live)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(bounds[idx] > 0, diff / bounds[idx], np.where(diff > 0, np.inf, 0.0))
            if mask.any():
                worst[k] = max(worst[k], float(ratio[mask].max()))
    return worst


def check_prop1(trials: int = 200) -> CheckResult:
    agg = {"a": 0.0, "b": 0.0, "c": 0.0, "d": 0.0}
    violations, gz, nch = 0, 0, 0
    for i in range(trials):
        w = prop1_trial(i)
        gz += w["gamma_zero"]
        nch += w["channels"]
        for k in agg:
            agg[k] = max(agg[k], w[k])
            violations += int(w[k] > 1.0)
    names = {"a": "mu_bar <= D", "b": "sigma_bar <= 4UD/gamma", "c": "Var mu <= 4UD", "d": "Var sigma <= 4UD(1+2sqrt2 U/gamma)"}
    lines = [f"trials={trials} violations={violations} channels_checked={nch} channels_with_gamma_0={gz}"]
    lines += [f"({k}) {names[k]:36s} max observed/bound = {agg[k]:.4f}" for k in agg]
    return CheckResult("Lipschitz bounds", violations == 0, lines, budget=300.0)


def check_style_size() -> CheckResult:
    n = style_vector_size([64, 128, 256])
    model = CNN(spec_from_channels([64, 128, 256], input_dims=(3, 8, 8)))
    from .stats import device_style_vector

    sv = device_style_vector(model, model.init_params(0), np.random.default_rng(0).standard_normal((2, 3, 8, 8)))
    ok = n == 1792 and sv.size == 1792 and sv.flat().size == 1792
    return CheckResult("style-vector size", ok, [f"channels (64,128,256): formula={n} measured={sv.size} expected=1792"])


# ---------------------------------------------------------------------------
# consensus and mode nesting

CONSENSUS_GRAPHS = (("complete", 3, 0.0), ("ring", 4, 0.0), ("random_geometric", 9, 0.8))
ROUNDOFF_FLOOR = 1e-20  # below this the disagreement is accumulated round-off


def consensus_run(kind: str, m: int, radius: float, steps: int = 500, seed: int = 0, W_fn=None) -> dict:
    from .federation import consensus_step, disagreement

    g = graph_mod.build_graph(kind, m, seed=seed, radius=radius)
    W = (W_fn or graph_mod.metropolis_weights)(g)
    problems = graph_mod.check_mixing_matrix(W, g)
    rho, _ = graph_mod.spectral_gap(W)
    model = CNN()
    thetas = [model.init_params(seed * 100 + i) for i in range(m)]
    zero = np.zeros(model.n_params)
    prev = disagreement(thetas)
    worst_ratio, reached = 0.0, None
    for k in range(1, steps + 1):
        thetas = consensus_step(thetas, W, 0.0, [zero] * m)
        cur = disagreement(thetas)
        if prev > ROUNDOFF_FLOOR:
            worst_ratio = max(worst_ratio, cur / prev)
        if reached is None and cur < 1e-12:
            reached = k
        prev = cur
    return {"problems": problems, "rho": rho, "worst_ratio": worst_ratio, "reached": reached, "final": prev}


def check_consensus(W_fn=None) -> CheckResult:
    lines, ok = [], True
    for kind, m, r in CONSENSUS_GRAPHS:
        res = consensus_run(kind, m, r, W_fn=W_fn)
        bound = res["rho"] ** 2 + 1e-6
        good = not res["problems"] and res["rho"] < 1 and res["worst_ratio"] <= bound and res["reached"] is not None
        ok &= good
        label = f"{kind}(m={m}{', r=' + str(r) if r else ''})"
        lines.append(
            f"{label:30s} rho={res['rho']:.6f} worst_contraction={res['worst_ratio']:.3e} bound={bound:.3e} "
            f"steps_to_1e-12={res['reached']} mixing={'ok' if not res['problems'] else '; '.join(res['problems'])}"
        )
    return CheckResult("consensus", ok, lines)


def _nesting_sims(mode: str, iters: int, **cfg):
    ds = generate(train_per_domain=200, test_per_domain=0, seed=0)
    g = graph_mod.build_graph("complete", 3)
    shards, _ = split_leave_one_domain_out(ds, 3, 3)
    sim = Simulation(CNN(), g, graph_mod.metropolis_weights(g), shards, StyleLayerConfig(mode, **cfg), 32, seed=0)
    traj = []
    for _ in sim.run(iters, lr_schedule("constant", 0.05, iters)):
        traj.append(np.stack(sim.thetas).copy())
    return traj


def check_nesting(iters: int = 50) -> CheckResult:
    base = _nesting_sims("dsgd", iters)
    lines, ok = [], True
    for mode, cfg, label in (
        ("styleddg", {"p_ell": 0.0}, "styleddg(p_ell=0)"),
        ("mixstyle", {"lambda_fixed": 1.0}, "mixstyle(lambda=1)"),
        ("dsu", {"noise_scale": 0.0}, "dsu(eps=0)"),
    ):
        other = _nesting_sims(mode, iters, **cfg)
        same = all(np.array_equal(a, b) for a, b in zip(base, other))
        ok &= same
        lines.append(f"{label:20s} == dsgd for {iters} iterations, bit-exact: {same}")
    return CheckResult("mode nesting", ok, lines)


# ---------------------------------------------------------------------------
# convergence trend

THEOREM_KS = (250, 500, 1000, 2000)
THEOREM_SPEC = ModelSpec(channels=(4, 8, 16), input_dims=(3, 8, 8))
THEOREM_LR0 = 0.25
THEOREM_TRAIN = 1000  # per domain; enough data that the held-out probe does not see overfitting


def theorem_run(K: int, seed: int, lr0: float = THEOREM_LR0, batch: int = 16) -> float:
    """Running average of the probe gradient norm over ``k = 0..K``."""
    ds = generate(train_per_domain=THEOREM_TRAIN, test_per_domain=100, hw=8, seed=0)
    g = graph_mod.build_graph("complete", 3)
    shards, _ = split_leave_one_domain_out(ds, 3, 3, seed=seed)
    probe_rows = np.flatnonzero((ds.domain != 3) & (ds.split == 1))[::3]
    probe = (ds.x[probe_rows], ds.y[probe_rows])
    sim = Simulation(CNN(THEOREM_SPEC), g, graph_mod.metropolis_weights(g), shards, StyleLayerConfig("styleddg"), batch, seed, probe=probe)
    vals = [rec.grad_norm_sq for rec in sim.run(K, lr_schedule("theorem", lr0, K), probe_every=1)]
    vals.append(sim.probe_grad_norm_sq())
    return float(np.mean(vals))


def check_theorem(seeds: Sequence[int] = (0, 1, 2), Ks: Sequence[int] = THEOREM_KS) -> CheckResult:
    table = np.array([[theorem_run(K, s) for K in Ks] for s in seeds])
    med = np.median(table, axis=0)
    ok = bool(np.all(np.diff(med) <= 0))
    lines = [f"K={list(Ks)} lr=alpha0/sqrt(K+1) alpha0={THEOREM_LR0}, m=3 complete, styleddg, held-out probe"]
    for s, row in zip(seeds, table):
        lines.append(f"seed {s}: " + " ".join(f"{v:.5f}" for v in row))
    lines.append("median: " + " ".join(f"{v:.5f}" for v in med) + f"  non-increasing: {ok}")
    return CheckResult("convergence trend", ok, lines, budget=600.0)


# ---------------------------------------------------------------------------
# domain generalization behaviour and radius sweep

DG_OVERRIDES: dict = {}  # the default experiment config
DG_METHODS = ("dsgd", "mixstyle", "dsu", "styleddg")
DG_MARGIN = 0.02
SWEEP_RADII = (0.5, 0.8, 1.2)
# 9 devices x 200 steps see as many samples as the 3-device default of 600 steps
SWEEP_OVERRIDES = {"K": 200, "m": 9, "graph": "random_geometric"}


def _matrix(cfg, methods, progress=None) -> dict:
    from .experiment import build_dataset, run_cell

    ds = build_dataset(cfg)
    accs = {}
    for m in methods:
        for t in cfg.targets:
            for s in cfg.seeds:
                accs[(m, t, s)] = run_cell(cfg, ds, m, t, s).target_acc
                if progress:
                    progress(f"  {m} target {t} seed {s}: {accs[(m, t, s)]:.4f}")
    return accs


def _method_avgs(accs: dict, methods, targets, seeds) -> dict:
    return {m: float(np.mean([np.mean([accs[(m, t, s)] for s in seeds]) for t in targets])) for m in methods}


def check_dg(progress=None) -> CheckResult:
    from .config import ExperimentConfig

    cfg = ExperimentConfig(mode=DG_METHODS, **DG_OVERRIDES)
    accs = _matrix(cfg, DG_METHODS, progress)
    avg = _method_avgs(accs, DG_METHODS, cfg.targets, cfg.seeds)
    margin = avg["styleddg"] - avg["dsgd"]
    best = max(avg, key=avg.get)
    ok = margin >= DG_MARGIN and best == "styleddg"
    lines = [f"m=3 complete, K={cfg.K}, lr={cfg.lr} {cfg.lr_schedule}, seeds {list(cfg.seeds)}, targets {list(cfg.targets)}"]
    for m in DG_METHODS:
        per_t = [np.mean([accs[(m, t, s)] for s in cfg.seeds]) for t in cfg.targets]
        lines.append(f"{m:10s} " + " ".join(f"{100 * a:5.1f}" for a in per_t) + f"  avg {100 * avg[m]:5.1f}")
    lines.append(f"styleddg - dsgd = {100 * margin:+.1f} points (need >= {100 * DG_MARGIN:.0f}); first: {best}")
    return CheckResult("DG behaviour", ok, lines, budget=1200.0)


def check_radius(progress=None) -> CheckResult:
    from .config import ExperimentConfig

    base = ExperimentConfig(mode=("dsgd", "styleddg"), **SWEEP_OVERRIDES)
    lines = [f"m={base.m} random geometric, K={base.K}, lr={base.lr}, seeds {list(base.seeds)}, targets {list(base.targets)}"]
    margins, ok = [], True
    for r in SWEEP_RADII:
        cfg = base.replace(radius=r)
        accs = _matrix(cfg, base.mode, progress)
        avg = _method_avgs(accs, base.mode, cfg.targets, cfg.seeds)
        margin = avg["styleddg"] - avg["dsgd"]
        margins.append(margin)
        ok &= margin >= 0
        lines.append(f"r={r:<4g} dsgd {100 * avg['dsgd']:5.1f} styleddg {100 * avg['styleddg']:5.1f} margin {100 * margin:+5.1f}")
    trend = margins[-1] >= margins[0]
    lines.append(f"hard: styleddg >= dsgd at every radius: {ok}")
    lines.append(f"soft: margin at r={SWEEP_RADII[-1]} >= margin at r={SWEEP_RADII[0]}: {trend}")
    return CheckResult("radius sweep", ok, lines)


# ---------------------------------------------------------------------------
# registry and report

CHECKS: dict[str, Callable[..., CheckResult]] = {
    "gradients": lambda progress=None: check_gradients(),
    "identities": lambda progress=None: check_identities(),
    "lemma1": lambda progress=None: check_lemma1(),
    "prop1": lambda progress=None: check_prop1(),
    "style-size": lambda progress=None: check_style_size(),
    "consensus": lambda progress=None: check_consensus(),
    "nesting": lambda progress=None: check_nesting(),
    "theorem": lambda progress=None: check_theorem(),
    "dg": check_dg,
    "radius": check_radius,
}
DEFAULT_BUDGETS = {"gradients": 120.0, "prop1": 300.0, "theorem": 600.0, "dg": 1200.0}


def run_check(name: str, progress=None) -> CheckResult:
    t0 = time.perf_counter()
    res = CHECKS[name](progress=progress)
    res.seconds = time.perf_counter() - t0
    if res.budget is None:
        res.budget = DEFAULT_BUDGETS.get(name)
    return res


def run_checks(names: Optional[Sequence[str]] = None, progress=None) -> list[CheckResult]:
    out = []
    for name in names or list(CHECKS):
        if progress:
            progress(f"running {name}")
        out.append(run_check(name, progress))
    return out


def format_report(results: Sequence[CheckResult]) -> str:
    """Deterministic text: margins and budget verdicts, never raw timings."""
    lines = []
    for r in results:
        lines.append(r.summary())
        lines.extend("    " + ln for ln in r.lines)
        if r.budget is not None:
            lines.append(f"    runtime budget {r.budget:.0f}s: {'met' if r.within_budget else 'EXCEEDED'}")
    n_ok = sum(r.ok for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)
