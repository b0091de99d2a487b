"""Run matrix cells (method x target x seed), log iterations, aggregate results."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, dump_config
from .data import DEFAULT_DOMAINS, Dataset, generate, split_leave_one_domain_out
from .errors import ConfigError
from .federation import Simulation, disagreement, evaluate, lr_schedule
from .graph import DeviceGraph, build_graph, metropolis_weights, read_edge_list, spectral_gap
from .layers import StyleLayerConfig
from .model import CNN, ModelSpec

log = logging.getLogger(__name__)

CSV_VERSION = 1
OUT_ENV = "STYLEDDG_OUT"


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


@dataclass
class CellResult:
    method: str
    target: int
    seed: int
    radius: float
    rho: float
    target_acc: float  # average model on the held-out domain
    target_acc_devices: list
    source_acc: float  # average model on the source domains' test split
    final_loss: float
    final_disagreement: float
    bytes_style_over_model: float
    iterations: int

    @property
    def key(self) -> str:
        return cell_name(self.method, self.target, self.seed)


def cell_name(method: str, target: int, seed: int) -> str:
    return f"{method}_t{target}_s{seed}"


# -- builders -----------------------------------------------------------------

def model_spec(cfg: ExperimentConfig) -> ModelSpec:
    return ModelSpec(
        channels=tuple(cfg.channels),
        kernel=cfg.kernel,
        pool=cfg.pool,
        num_classes=cfg.classes,
        input_dims=(3, cfg.image_size, cfg.image_size),
        hooks=tuple(cfg.hooks),
    )


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset:
        return Dataset.load(cfg.dataset)
    return generate(
        DEFAULT_DOMAINS,
        classes=cfg.classes,
        train_per_domain=cfg.train_per_domain,
        test_per_domain=cfg.test_per_domain,
        hw=cfg.image_size,
        seed=cfg.data_seed,
    )


def build_cell_graph(cfg: ExperimentConfig, seed: int) -> DeviceGraph:
    """Random geometric graphs are drawn per seed, so seeds also vary the topology."""
    edges = read_edge_list(cfg.edges_file) if cfg.graph == "custom" else None
    return build_graph(cfg.graph, cfg.m, seed=seed, radius=cfg.radius, edges=edges)


def style_config(cfg: ExperimentConfig, method: str) -> StyleLayerConfig:
    return StyleLayerConfig(
        mode=method,
        p_ell=cfg.p_ell,
        alpha_explore=cfg.alpha_explore,
        lambda_dist=(cfg.lambda_a, cfg.lambda_b),
        noise_scale=cfg.noise_scale,
        eps_var=cfg.eps_var,
    )


# -- one cell -------------------------------------------------------------------

def _g(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def csv_columns(m: int) -> list[str]:
    return (
        ["k", "lr", "loss_mean"]
        + [f"loss_dev{i}" for i in range(m)]
        + ["disagreement", "grad_norm_sq", "active_layers", "bytes_model", "bytes_style", "target_acc", "source_acc"]
    )


def csv_header_comment(m: int) -> str:
    return (
        f"# styleddg iteration log v{CSV_VERSION}; accuracies are measured after the update of their row "
        f"and left empty between evaluations; columns: {','.join(csv_columns(m))}"
    )


def run_cell(
    cfg: ExperimentConfig,
    ds: Dataset,
    method: str,
    target: int,
    seed: int,
    out_dir: Optional[Path] = None,
    threads: int = 1,
) -> CellResult:
    g = build_cell_graph(cfg, seed)
    W = metropolis_weights(g)
    rho = spectral_gap(W)[0]
    shards, _ = split_leave_one_domain_out(ds, target, cfg.m, seed=seed, split=0)
    tgt = ds.domain == target
    src_test = (ds.domain != target) & (ds.split == 1)
    model = CNN(model_spec(cfg))
    probe = None
    if cfg.probe_every:
        rows = np.concatenate([s.index for s in shards])
        rows = rows[np.random.default_rng([seed, 99]).permutation(len(rows))[: cfg.probe_size]]
        probe = (ds.x[rows], ds.y[rows])
    sim = Simulation(model, g, W, shards, style_config(cfg, method), cfg.batch_size, seed, probe=probe, threads=threads)
    sched = lr_schedule(cfg.lr_schedule, cfg.lr, cfg.K)

    writer = timing = None
    fh = th = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        name = cell_name(method, target, seed)
        fh = open(out_dir / f"{name}.csv", "w", newline="")
        th = open(out_dir / f"{name}.timing.csv", "w", newline="")
        fh.write(csv_header_comment(g.m) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_columns(g.m))
        timing = csv.writer(th, lineterminator="\n")
        timing.writerow(["k", "wall_time"])
    rec = None
    acc = None
    try:
        for rec in sim.run(cfg.K, sched, cfg.probe_every):
            last = rec.k == cfg.K - 1
            t_acc = s_acc = float("nan")
            if last or (cfg.eval_every and (rec.k + 1) % cfg.eval_every == 0):
                acc = evaluate(model, sim.thetas, ds.x[tgt], ds.y[tgt])
                t_acc = acc["average_model"]
                s_acc = evaluate(model, sim.thetas, ds.x[src_test], ds.y[src_test])["average_model"] if src_test.any() else float("nan")
            if writer is not None:
                writer.writerow(
                    [rec.k, _g(rec.lr), _g(rec.mean_loss)]
                    + [_g(v) for v in rec.losses]
                    + [_g(rec.disagreement), _g(rec.grad_norm_sq), rec.active_layers, rec.bytes_model, rec.bytes_style, _g(t_acc), _g(s_acc)]
                )
                timing.writerow([rec.k, f"{rec.wall_time:.6f}"])
                fh.flush()
                th.flush()
    finally:
        if fh is not None:
            fh.close()
            th.close()
    if rec is None:  # K == 0
        acc = evaluate(model, sim.thetas, ds.x[tgt], ds.y[tgt])
        s_acc = evaluate(model, sim.thetas, ds.x[src_test], ds.y[src_test])["average_model"] if src_test.any() else float("nan")
    if out_dir is not None and cfg.checkpoints:
        ck = out_dir / "checkpoints" / cell_name(method, target, seed)
        ck.mkdir(parents=True, exist_ok=True)
        for i, th_i in enumerate(sim.thetas):
            model.save_checkpoint(th_i, ck / f"device{i}.bin")
    return CellResult(
        method=method,
        target=target,
        seed=seed,
        radius=float(cfg.radius),
        rho=float(rho),
        target_acc=float(acc["average_model"]),
        target_acc_devices=[float(a) for a in acc["per_device"]],
        source_acc=float(s_acc),
        final_loss=float(rec.mean_loss) if rec else float("nan"),
        final_disagreement=disagreement(sim.thetas),
        bytes_style_over_model=(sim.bytes_style / sim.bytes_model) if sim.bytes_model else 0.0,
        iterations=cfg.K,
    )


# -- aggregation ----------------------------------------------------------------

def aggregate(cells: Sequence[CellResult]) -> list[dict]:
    """Mean and population std of target accuracy over seeds, per (method, target)."""
    groups: dict = {}
    for c in cells:
        groups.setdefault((c.method, c.target, c.radius), []).append(c)
    rows = []
    for (method, target, radius), cs in groups.items():
        accs = np.array([c.target_acc for c in sorted(cs, key=lambda c: c.seed)])
        rows.append(
            {
                "method": method,
                "target": target,
                "radius": radius,
                "seeds": sorted(c.seed for c in cs),
                "target_acc_mean": float(accs.mean()),
                "target_acc_std": float(accs.std(ddof=0)),
                "rho_median": float(np.median([c.rho for c in cs])),
            }
        )
    return rows


def format_table(rows: Sequence[dict], methods: Sequence[str], targets: Sequence[int]) -> str:
    """Methods as rows, target domains as columns, plus the row-mean Avg column."""
    by = {(r["method"], r["target"]): r for r in rows}
    head = f"{'method':10s}" + "".join(f"{'target ' + str(t):>16s}" for t in targets) + f"{'Avg':>10s}"
    out = [head]
    for m in methods:
        cells = [by[(m, t)] for t in targets if (m, t) in by]
        line = f"{m:10s}"
        for t in targets:
            r = by.get((m, t))
            line += f"{100 * r['target_acc_mean']:9.1f} ± {100 * r['target_acc_std']:4.1f}" if r else f"{'-':>16s}"
        avg = np.mean([r["target_acc_mean"] for r in cells]) if cells else float("nan")
        out.append(line + f"{100 * avg:10.1f}")
    return "\n".join(out)


def method_means(rows: Sequence[dict]) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(r["method"], []).append(r["target_acc_mean"])
    return {m: float(np.mean(v)) for m, v in out.items()}


# -- run directories ---------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def load_cells(run_dir: Path) -> list[CellResult]:
    cells = []
    for p in sorted((run_dir / "cells").glob("*.json")):
        cells.append(CellResult(**json.loads(p.read_text())))
    return cells


def run_matrix(
    cfg: ExperimentConfig,
    out: Path,
    threads: int = 1,
    progress: Optional[Callable[[str], None]] = None,
) -> dict:
    """Run every (method, target, seed) cell into ``out``; skip cells already done.

    An interrupt leaves finished cells, a flushed partial CSV and a
    ``status.json`` with ``resumable: true``; rerunning with the same
    directory resumes at the first unfinished cell.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    snap = dump_config(cfg)
    snap_path = out / "config.snapshot"
    if snap_path.exists() and snap_path.read_text() != snap:
        raise ConfigError(f"{out} holds a run with a different config; choose another --out")
    snap_path.write_text(snap)
    (out / "cells").mkdir(exist_ok=True)
    ds = build_dataset(cfg)
    todo = [(m, t, s) for m in cfg.mode for t in cfg.targets for s in cfg.seeds]
    done = {p.stem for p in (out / "cells").glob("*.json")}
    status = {"state": "running", "resumable": True, "completed": sorted(done), "total": len(todo)}
    _write_json(out / "status.json", status)
    try:
        for m, t, s in todo:
            name = cell_name(m, t, s)
            if name in done:
                continue
            t0 = time.perf_counter()
            res = run_cell(cfg, ds, m, t, s, out_dir=out / "iterations", threads=threads)
            _write_json(out / "cells" / f"{name}.json", asdict(res))
            done.add(name)
            status["completed"] = sorted(done)
            _write_json(out / "status.json", status)
            if progress:
                progress(f"{name}: target acc {res.target_acc:.4f} ({time.perf_counter() - t0:.1f}s)")
    except KeyboardInterrupt:
        status["state"] = "interrupted"
        _write_json(out / "status.json", status)
        raise
    cells = [c for c in load_cells(out) if c.key in {cell_name(*x) for x in todo}]
    rows = aggregate(cells)
    summary = {
        "config_version": 1,
        "std": "population (ddof=0) over seeds",
        "methods": list(cfg.mode),
        "targets": list(cfg.targets),
        "seeds": list(cfg.seeds),
        "graph": cfg.graph,
        "m": cfg.m,
        "radius": float(cfg.radius),
        "rho": sorted({c.rho for c in cells}),
        "bytes_style_over_model": {c.method: c.bytes_style_over_model for c in cells},
        "rows": rows,
        "method_avg": method_means(rows),
        "cells": [asdict(c) for c in cells],
    }
    _write_json(out / "summary.json", summary)
    (out / "table.txt").write_text(format_table(rows, cfg.mode, cfg.targets) + "\n")
    status["state"] = "complete"
    status["resumable"] = False
    _write_json(out / "status.json", status)
    return summary


def reconstruct_from_csv(path: Path) -> float:
    """Final target accuracy as logged in an iteration CSV."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header, body = rows[0], rows[1:]
    col = header.index("target_acc")
    return float(body[-1][col])


def radius_dir(r: float) -> str:
    return f"radius_{r:g}"


def sweep_radius(
    cfg: ExperimentConfig,
    out: Path,
    radii: Optional[Sequence[float]] = None,
    threads: int = 1,
    progress: Optional[Callable[[str], None]] = None,
) -> dict:
    """One full matrix per radius on random geometric graphs, plus a combined summary.

    Each radius directory is exactly what ``run_matrix`` writes for the same
    config with ``radius`` set, so a one-radius sweep equals a plain run.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    radii = tuple(cfg.radii if radii is None else radii)
    per = []
    for r in radii:
        sub = cfg.replace(graph="random_geometric", radius=float(r))
        s = run_matrix(sub, out / radius_dir(r), threads=threads, progress=progress)
        rho_seed = {c["seed"]: c["rho"] for c in s["cells"]}  # the graph depends on the seed only
        per.append(
            {
                "radius": float(r),
                "rho_median": float(np.median(list(rho_seed.values()))),
                "rho_per_seed": {str(k): v for k, v in sorted(rho_seed.items())},
                "method_avg": s["method_avg"],
            }
        )
    summary = {"m": cfg.m, "methods": list(cfg.mode), "radii": [float(r) for r in radii], "per_radius": per}
    _write_json(out / "sweep.json", summary)
    (out / "sweep.txt").write_text(format_sweep(per, cfg.mode) + "\n")
    return summary


def format_sweep(per: Sequence[dict], methods: Sequence[str]) -> str:
    head = f"{'radius':>8s}{'rho':>10s}" + "".join(f"{m:>11s}" for m in methods)
    lines = [head]
    for p in per:
        lines.append(
            f"{p['radius']:8.3g}{p['rho_median']:10.4f}" + "".join(f"{100 * p['method_avg'].get(m, float('nan')):11.1f}" for m in methods)
        )
    return "\n".join(lines)
