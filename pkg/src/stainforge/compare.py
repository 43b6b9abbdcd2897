"""Repeated training of several modes on one dataset, with a significance-marked report.

A run is one (mode, repetition) pair. Its seed is derived from the master
seed, the mode name and the repetition index, so adding a mode never
changes the runs of the others. Every finished run is stored as JSON next to
a hash of everything that determines it; rerunning with the same config
skips those runs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .errors import InsufficientSamples, StainforgeError, UndefinedKappa, ValidationError
from .metrics import quadratic_kappa, stain_invariance_probe, wilcoxon_rank_sum
from .model import extract_features
from .synth import PatchSet, read_dataset
from .training import MODES, TrainConfig, evaluate, prepare_images, train

log = logging.getLogger(__name__)

__all__ = ["RunConfig", "RUN_CONFIG_SCHEMA", "run_seed", "RunResult", "compare", "format_report", "SPLITS"]

SPLITS = ("internal", "external", "cumulative")

_TRAIN_KEYS = sorted(set(TrainConfig.__dataclass_fields__) - {"mode", "seed"})

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["data", "modes"],
    "additionalProperties": False,
    "properties": {
        "data": {"type": "string", "minLength": 1},
        "modes": {"type": "array", "items": {"enum": list(MODES)}},
        "repetitions": {"type": "integer", "minimum": 1},
        "master_seed": {"type": "integer", "minimum": 0},
        "proposed": {"enum": list(MODES)},
        "workers": {"type": "integer", "minimum": 1},
        "probe": {"type": "boolean"},
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {} for k in _TRAIN_KEYS},
        },
    },
}


@dataclass
class RunConfig:
    data: str
    modes: list
    repetitions: int = 10
    master_seed: int = 0
    proposed: str = "he_adv"
    workers: int = 1
    probe: bool = True
    train: dict = field(default_factory=dict)  # TrainConfig overrides shared by every run

    def __post_init__(self):
        self.modes = list(self.modes)
        if len(self.modes) < 2:
            raise ValidationError("compare needs at least 2 modes")
        # fail early on bad training options
        TrainConfig(mode=self.modes[0], **self.train)

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        try:
            jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ValidationError(f"invalid run config: {exc.message}") from None
        return cls(**doc)

    def to_json(self) -> dict:
        return asdict(self)


def run_seed(master: int, mode: str, index: int) -> int:
    digest = hashlib.sha256(f"{master}/{mode}/{index}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class RunResult:
    mode: str
    index: int
    seed: int
    kappa: dict  # split -> kappa
    probe_accuracy: float | None
    best_epoch: int
    epochs: int
    config_hash: str = ""


def _kappa(model, data: PatchSet) -> tuple[float, np.ndarray]:
    res = evaluate(model, data)
    return res["kappa"], res["predictions"]


def _pooled_kappa(preds, truths, k) -> float:
    try:
        return quadratic_kappa(preds, truths, k)
    except UndefinedKappa:
        return float("nan")


def _data_digest(data_dir: Path) -> str:
    return hashlib.sha256((Path(data_dir) / "manifest.csv").read_bytes()).hexdigest()


def _run_hash(cfg: RunConfig, mode: str, index: int, digest: str) -> str:
    doc = {"data": digest, "mode": mode, "index": index, "seed": run_seed(cfg.master_seed, mode, index),
           "train": cfg.train, "probe": cfg.probe}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _execute(args) -> RunResult:
    cfg, mode, index, splits, chash = args
    seed = run_seed(cfg.master_seed, mode, index)
    tcfg = TrainConfig(mode=mode, seed=seed, **cfg.train)
    n_classes = int(max(ps.y.max() for _, ps in splits.items() if len(ps))) + 1
    model, hist = train(splits.train, splits.val, tcfg, n_classes=n_classes)
    k_int, p_int = _kappa(model, splits.internal_test)
    k_ext, p_ext = _kappa(model, splits.external_test)
    truths = np.concatenate([splits.internal_test.y, splits.external_test.y])
    k_cum = _pooled_kappa(np.concatenate([p_int, p_ext]), truths, n_classes)
    probe = None
    if cfg.probe:
        cumulative = PatchSet.concat([splits.internal_test, splits.external_test])
        feats = extract_features(model, prepare_images(model, cumulative.images))
        try:
            probe = stain_invariance_probe(feats, cumulative.center).accuracy
        except InsufficientSamples as exc:
            log.warning("probe skipped: %s", exc)
    log.info("%s #%d seed=%d kappa int=%.3f ext=%.3f cum=%.3f", mode, index, seed, k_int, k_ext, k_cum)
    kappa = {"internal": k_int, "external": k_ext, "cumulative": k_cum}
    return RunResult(mode, index, seed, kappa, probe, hist.best_epoch, len(hist.epochs), chash)


def _load_done(path: Path, chash: str) -> RunResult | None:
    if not path.exists():
        return None
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError:
        return None
    if doc.get("config_hash") != chash:
        return None
    return RunResult(**doc)


def compare(cfg: RunConfig, out_dir, splits=None) -> dict:
    """Train every (mode, repetition) not already on disk and write the report.

    Returns ``{"runs": {mode: [RunResult, ...]}, "rows": [...], "text": str}``.
    ``splits`` may be passed to reuse an already loaded dataset.
    """
    out = Path(out_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    if splits is None:
        if not (Path(cfg.data) / "manifest.csv").exists():
            raise ValidationError(f"no dataset manifest under {cfg.data}")
        splits = read_dataset(cfg.data)
    digest = _data_digest(cfg.data) if (Path(cfg.data) / "manifest.csv").exists() else "in-memory"

    unique_modes = list(dict.fromkeys(cfg.modes))
    results: dict = {m: [None] * cfg.repetitions for m in unique_modes}
    todo = []
    for mode in unique_modes:
        for i in range(cfg.repetitions):
            chash = _run_hash(cfg, mode, i, digest)
            done = _load_done(runs_dir / f"{mode}_{i:02d}.json", chash)
            if done is not None:
                results[mode][i] = done
            else:
                todo.append((cfg, mode, i, splits, chash))

    def persist(res: RunResult):
        path = runs_dir / f"{res.mode}_{res.index:02d}.json"
        path.write_text(json.dumps(asdict(res), indent=2, sort_keys=True) + "\n")
        results[res.mode][res.index] = res

    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            for res in pool.map(_execute, todo):
                persist(res)
    else:
        for job in todo:
            persist(_execute(job))

    rows = _report_rows(cfg, results)
    text = format_report(rows)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(_report_csv(rows))
    return {"runs": results, "rows": rows, "text": text}


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def _report_rows(cfg: RunConfig, results: dict) -> list:
    """One row per requested mode; the proposed mode is starred where it beats the best other mode."""
    proposed_pos = cfg.modes.index(cfg.proposed) if cfg.proposed in cfg.modes else 0
    rows = []
    for pos, mode in enumerate(cfg.modes):
        runs = results[mode]
        row = {"mode": mode, "n": len(runs)}
        for split in SPLITS:
            row[split] = _mean_std(r.kappa[split] for r in runs)
            row[split + "_p"] = None
            row[split + "_star"] = False
        probes = [r.probe_accuracy for r in runs if r.probe_accuracy is not None]
        row["probe"] = _mean_std(probes) if probes else (float("nan"), float("nan"))
        rows.append(row)

    proposed = rows[proposed_pos]
    for split in SPLITS:
        others = [(r[split][0], pos) for pos, r in enumerate(rows) if pos != proposed_pos and np.isfinite(r[split][0])]
        if not others:
            continue
        best_pos = max(others)[1]
        a = [r.kappa[split] for r in results[cfg.modes[proposed_pos]]]
        b = [r.kappa[split] for r in results[cfg.modes[best_pos]]]
        try:
            p = wilcoxon_rank_sum(a, b).pvalue
        except StainforgeError:
            continue
        proposed[split + "_p"] = p
        proposed[split + "_star"] = p < 0.05 and proposed[split][0] > rows[best_pos][split][0]
    return rows


def _cell(ms, star=False) -> str:
    mean, std = ms
    if not np.isfinite(mean):
        return "n/a"
    return f"{mean:.3f} ± {std:.3f}" + ("*" if star else "")


def format_report(rows: list) -> str:
    header = ["mode", "n"] + list(SPLITS) + ["probe"]
    body = [
        [r["mode"], str(r["n"])] + [_cell(r[s], r[s + "_star"]) for s in SPLITS] + [_cell(r["probe"])]
        for r in rows
    ]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header] + body]
    lines.append("* p < 0.05 (two-sided Wilcoxon rank-sum against the best other mode)")
    return "\n".join(lines) + "\n"


def _report_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "n"] + [f"{s}_{k}" for s in SPLITS for k in ("mean", "std", "p", "star")]
               + ["probe_mean", "probe_std"])
    for r in rows:
        cells = [r["mode"], r["n"]]
        for s in SPLITS:
            p = r[s + "_p"]
            cells += [f"{r[s][0]:.6f}", f"{r[s][1]:.6f}", "" if p is None else f"{p:.6g}", int(r[s + "_star"])]
        cells += [f"{r['probe'][0]:.6f}", f"{r['probe'][1]:.6f}"]
        w.writerow(cells)
    return buf.getvalue()
