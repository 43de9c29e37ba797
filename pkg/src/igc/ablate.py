"""Ablation matrix: architecture arms, codec alignment and insertion-layer sweep.

Each (arm, seed) run writes its metrics under ``runs/<arm>-s<seed>-<hash>`` and
a ``done.json`` marker, so an interrupted matrix resumes where it stopped and a
finished one is only re-read.
"""
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import HostModel
from .train import MetricsLog, read_metrics, train_igc

log = logging.getLogger(__name__)

BASE_ARMS = ("igc", "igc+shortcut", "shortcut-only", "right-aligned")


@dataclass(frozen=True)
class Arm:
    name: str
    igc: dict


def arm_matrix(cfg, arms=BASE_ARMS, layers=()):
    """Expand arm names plus a layer sweep into igc-section overrides."""
    out = []
    for name in arms:
        if name == "right-aligned":
            out.append(Arm(name, {"mode": "igc", "alignment": "right"}))
        elif name in ("igc", "igc+shortcut", "shortcut-only"):
            out.append(Arm(name, {"mode": name, "alignment": "left"}))
        else:
            raise ValueError(f"unknown ablation arm {name!r}; expected one of {BASE_ARMS}")
    for layer in layers:
        if layer != cfg.igc.insertion_layer:
            out.append(Arm(f"igc@L{layer}", {"mode": "igc", "alignment": "left", "insertion_layer": layer}))
    return out


def run_dir(root, cfg, arm, seed, base_hash=""):
    """Run directory keyed by the arm config and the base checkpoint hash."""
    sub = cfg.with_overrides(igc=arm.igc)
    digest = hashlib.sha256((sub.digest("data", "igc", "train") + base_hash).encode()).hexdigest()[:12]
    return Path(root) / "runs" / f"{arm.name}-s{seed}-{digest}", sub


def _run_one(job):
    cfg, arm, seed, base_path, splits, directory = job
    directory = Path(directory)
    done = directory / "done.json"
    if done.exists():
        return read_metrics(directory / "metrics.csv")
    if directory.exists():
        for f in ("metrics.csv", "metrics.jsonl"):
            (directory / f).unlink(missing_ok=True)
    directory.mkdir(parents=True, exist_ok=True)
    cfg.save(directory / "config.json")
    host = HostModel.load(base_path)
    metrics = MetricsLog(directory)
    model, rows = train_igc(cfg, host, splits, seed, arm=arm.name, metrics=metrics,
                            progress=lambda r: log.info("%s seed %d epoch %d overall %.3f", r.arm, r.seed, r.epoch,
                                                        r.overall))
    model.save(directory / "igc.ckpt", meta={"arm": arm.name, "seed": seed, "epochs": cfg.train.epochs})
    done.write_text(json.dumps({"arm": arm.name, "seed": seed, "epochs": len(rows)}) + "\n")
    return rows


def ablate(cfg, base_path, splits, out_dir, arms=BASE_ARMS, layers=(), seeds=None, jobs=1):
    """Run every (arm, seed) pair; returns all MetricsRows and writes the report."""
    seeds = list(seeds if seeds is not None else cfg.train.seeds)
    if len(seeds) < 3:
        log.warning("ablation with %d seeds; at least 3 are recommended", len(seeds))
    base_hash = hashlib.sha256(Path(base_path).read_bytes()).hexdigest()
    jobs_list = []
    for arm in arm_matrix(cfg, arms, layers):
        for seed in seeds:
            d, sub = run_dir(out_dir, cfg, arm, seed, base_hash)
            jobs_list.append((sub, arm, seed, str(base_path), splits, str(d)))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_one, jobs_list))
    else:
        results = [_run_one(j) for j in jobs_list]
    rows = [r for rs in results for r in rs]
    write_report(rows, out_dir)
    return rows


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def final_rows(rows):
    """Last logged row per (arm, seed)."""
    last = {}
    for r in rows:
        key = (r.arm, r.seed)
        if key not in last or r.epoch > last[key].epoch:
            last[key] = r
    return last


def _fmt(vals):
    vals = [v for v in vals if not math.isnan(v)]
    if not vals:
        return "n/a"
    return f"{np.mean(vals):.3f} [{min(vals):.3f}, {max(vals):.3f}]"


def summary_table(rows):
    last = final_rows(rows)
    arms = sorted({a for a, _ in last}, key=lambda a: (a not in BASE_ARMS, BASE_ARMS.index(a) if a in BASE_ARMS else a))
    cols = ("overall", "acc_ADD", "acc_SUB", "acc_MUL", "acc_DIV", "gate_distractor")
    lines = ["| arm | seeds | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 2)]
    for a in arms:
        rs = [r for (arm, _), r in sorted(last.items()) if arm == a]
        lines.append(f"| {a} | {len(rs)} | " + " | ".join(_fmt([getattr(r, c) for r in rs]) for c in cols) + " |")
    return "\n".join(lines)


def per_seed_table(rows):
    last = final_rows(rows)
    lines = ["| arm | seed | epoch | overall | ADD | MUL | MUL gap |", "|---|---|---|---|---|---|---|"]
    for (a, s), r in sorted(last.items()):
        lines.append(f"| {a} | {s} | {r.epoch} | {r.overall:.3f} | {r.acc_ADD:.3f} | {r.acc_MUL:.3f} "
                     f"| {r.acc_ADD - r.acc_MUL:+.3f} |")
    return "\n".join(lines)


def ordering_checks(rows):
    """Directional checks over final rows, each evaluated for every seed."""
    last = final_rows(rows)

    def by_seed(arm):
        return {s: r for (a, s), r in last.items() if a == arm}

    igc, hyb, sc, right = (by_seed(a) for a in BASE_ARMS)
    checks = {}
    if igc:
        checks["igc overall >= 0.95"] = all(r.overall >= 0.95 for r in igc.values())
        checks["igc |ADD - MUL| <= 0.03"] = all(abs(r.acc_ADD - r.acc_MUL) <= 0.03 for r in igc.values())
    if sc:
        checks["shortcut-only ADD - MUL >= 0.4"] = all(r.acc_ADD - r.acc_MUL >= 0.4 for r in sc.values())
    if igc and hyb:
        common = igc.keys() & hyb.keys()
        checks["igc >= igc+shortcut"] = bool(common) and all(igc[s].overall >= hyb[s].overall for s in common)
    if igc and right:
        common = igc.keys() & right.keys()
        checks["left - right MUL >= 0.2"] = bool(common) and all(igc[s].acc_MUL - right[s].acc_MUL >= 0.2 for s in common)
    return checks


def write_report(rows, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "arm", "seed", "accuracy"])
        for r in sorted(rows, key=lambda r: (r.arm, r.seed, r.epoch)):
            w.writerow([r.epoch, r.arm, r.seed, r.overall])
    checks = ordering_checks(rows)
    text = ["# Ablation report", "", "Final exact-match accuracy, mean [min, max] over seeds.", "",
            summary_table(rows), "", "## Per seed", "", per_seed_table(rows), "", "## Ordering checks", ""]
    text += [f"- {'PASS' if ok else 'FAIL'}: {name}" for name, ok in checks.items()]
    (out / "report.md").write_text("\n".join(text) + "\n")
    return out / "report.md"
