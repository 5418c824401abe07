"""Architecture and loss ablation tables over several seeds."""
from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path
from typing import Callable

from .train import TOGGLES, TrainConfig, resolve_path, train

# (row id, toggles); rows follow the component and loss ablation tables
ARCH_ROWS = (
    (1, {"use_ct": True, "use_aux_depth_head": False, "use_dt": False}),
    (2, {"use_ct": True, "use_aux_depth_head": True, "use_dt": False}),
    (3, {"use_ct": False, "use_aux_depth_head": True, "use_dt": True}),
    (4, {"use_ct": True, "use_aux_depth_head": True, "use_dt": True}),
)
LOSS_ROWS = (
    (1, {"use_smoothness": False, "use_tau_filter": False}),
    (2, {"use_smoothness": True, "use_tau_filter": False}),
    (3, {"use_smoothness": False, "use_tau_filter": True}),
    (4, {"use_smoothness": True, "use_tau_filter": True}),
)
METRICS = ("mIoU", "depth_log_rmse", "depth_log_rmse_adverse", "depth_mae", "condition_accuracy")
MIOU_TOLERANCE = 0.0025  # a quarter of an mIoU point


def row_configs(base: TrainConfig) -> dict[str, list[tuple[int, TrainConfig]]]:
    """Architecture rows use the full loss; loss rows use the full architecture."""
    full_loss = {"use_smoothness": True, "use_tau_filter": True}
    full_arch = dict(ARCH_ROWS[-1][1])
    return {
        "architecture": [(i, base.with_toggles(**t, **full_loss)) for i, t in ARCH_ROWS],
        "loss": [(i, base.with_toggles(**full_arch, **t)) for i, t in LOSS_ROWS],
    }


def mean_std(values: list[float | None]) -> tuple[float | None, float | None]:
    xs = [v for v in values if v is not None]
    if not xs:
        return None, None
    m = sum(xs) / len(xs)
    if len(xs) < 2:
        return m, 0.0
    return m, math.sqrt(sum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def run_ablation_suite(base: TrainConfig, seeds: list[int],
                       log: Callable[[str], None] | None = None) -> dict:
    if len(seeds) < 3:
        raise ValueError("the ablation suite needs at least 3 seeds")
    cache: dict[str, dict] = {}  # identical (config, seed) pairs train once

    def run(cfg: TrainConfig) -> dict:
        key = cfg.hash()
        if key not in cache:
            if log:
                on = ",".join(k for k in TOGGLES if getattr(cfg, k)) or "-"
                log(f"training seed={cfg.seed} toggles={on}")
            res = train(cfg)
            cache[key] = {"seed": cfg.seed, "config_hash": key, "initial_loss": res.loss_curve[0],
                          "final_loss": res.loss_curve[-1],
                          **{m: getattr(res.val, m) for m in METRICS}}
        return cache[key]

    tables = {}
    for table, rows in row_configs(replace(base, out_dir="")).items():
        out_rows = []
        for row_id, cfg in rows:
            runs = [run(replace(cfg, seed=s)) for s in seeds]
            stats = {m: mean_std([r[m] for r in runs]) for m in METRICS}
            out_rows.append({
                "id": row_id,
                "toggles": {k: getattr(cfg, k) for k in TOGGLES},
                "config_hash": cfg.hash(),
                "runs": runs,
                "mean": {m: s[0] for m, s in stats.items()},
                "std": {m: s[1] for m, s in stats.items()},
            })
        tables[table] = out_rows
    report = {"seeds": list(seeds), "steps": base.steps, "tables": tables}
    report["checks"] = directional_checks(report)
    return report


def _row(report: dict, table: str, row_id: int) -> dict:
    return next(r for r in report["tables"][table] if r["id"] == row_id)


def directional_checks(report: dict) -> dict[str, dict]:
    """Non-inferiority of the full and aux-head rows in mIoU; full loss vs plain L1 on adverse depth."""
    base = _row(report, "architecture", 1)["mean"]["mIoU"]
    full = _row(report, "architecture", 4)["mean"]["mIoU"]
    aux = _row(report, "architecture", 2)["mean"]["mIoU"]
    plain = _row(report, "loss", 1)["mean"]["depth_log_rmse_adverse"]
    full_loss = _row(report, "loss", 4)["mean"]["depth_log_rmse_adverse"]
    return {
        "full_vs_baseline_miou": {"lhs": full, "rhs": base - MIOU_TOLERANCE,
                                  "passed": full >= base - MIOU_TOLERANCE},
        "aux_vs_baseline_miou": {"lhs": aux, "rhs": base - MIOU_TOLERANCE,
                                 "passed": aux >= base - MIOU_TOLERANCE},
        "full_loss_vs_plain_l1_depth": {"lhs": full_loss, "rhs": plain,
                                        "passed": full_loss <= plain},
    }


def format_table(report: dict) -> str:
    lines = []
    for table, rows in report["tables"].items():
        lines.append(f"[{table}]")
        for r in rows:
            on = ",".join(k[4:] for k, v in r["toggles"].items() if v) or "-"
            mi, si = r["mean"]["mIoU"], r["std"]["mIoU"]
            md, sd = r["mean"]["depth_log_rmse_adverse"], r["std"]["depth_log_rmse_adverse"]
            depth = "n/a" if md is None else f"{md:.4f} ± {sd:.4f}"
            lines.append(f"  {r['id']}  mIoU {100 * mi:6.2f} ± {100 * si:5.2f}  adverse log-RMSE {depth}  [{on}]")
    for name, c in report["checks"].items():
        lines.append(f"{'PASS' if c['passed'] else 'FAIL'}  {name}: {c['lhs']} vs {c['rhs']}")
    return "\n".join(lines)


def write_report(report: dict, path: str | Path) -> Path:
    path = resolve_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path
