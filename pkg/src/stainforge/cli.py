"""Command-line entry point: ``stainforge <command> ... --out DIR``.

Every command writes only under ``--out``. Exit status is 0 on success,
2 on invalid input or configuration, 1 on any other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import HSV_PRESETS, StainAugConfig, geometric_augment, hsv_augment, make_rng, stain_augment
from .color import read_patch, write_patch
from .deconv import estimate_he_matrix, normalize_to_target, stain_target, write_stain_matrix
from .errors import StainforgeError, ValidationError

log = logging.getLogger("stainforge")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_deconv(args) -> None:
    m = estimate_he_matrix(read_patch(args.image))
    write_stain_matrix(_out_dir(args) / "matrix.csv", m)


def cmd_normalize(args) -> None:
    target_m, target_maxc = stain_target(read_patch(args.target))
    out = normalize_to_target(read_patch(args.image), target_m, target_maxc)
    d = _out_dir(args)
    write_patch(d / "normalized.png", out)
    write_stain_matrix(d / "target_matrix.csv", target_m)


def cmd_augment(args) -> None:
    patch = read_patch(args.image)
    rng = make_rng(args.seed)
    if args.mode == "stain":
        out = stain_augment(patch, estimate_he_matrix(patch), StainAugConfig(args.sigma1, args.sigma2), rng)
    elif args.mode == "hsv":
        out = hsv_augment(patch, HSV_PRESETS[args.preset], rng)
    else:
        out = geometric_augment(patch, rng)
    write_patch(_out_dir(args) / "augmented.png", out)


def cmd_gen_data(args) -> None:
    from .synth import SynthConfig, build_dataset, default_synth_config, write_dataset

    if args.config:
        doc = _read_json(args.config)
        if args.seed is not None:
            doc["seed"] = args.seed
        try:
            cfg = SynthConfig.from_json(doc)
        except TypeError as exc:
            raise ValidationError(f"invalid dataset config: {exc}") from None
    else:
        cfg = default_synth_config(args.per_class, args.patch_size, 0 if args.seed is None else args.seed)
    write_dataset(build_dataset(cfg), _out_dir(args), cfg)


def _train_config(args):
    from .training import TrainConfig

    doc = _read_json(args.config) if args.config else {}
    overrides = {"mode": args.mode, "lam": args.lam, "seed": args.seed, "max_epochs": args.epochs,
                 "learning_rate": args.lr, "batch_size": args.batch_size}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**doc)
    except TypeError as exc:
        raise ValidationError(f"invalid training config: {exc}") from None


def cmd_train(args) -> None:
    from .model import save_checkpoint
    from .training import evaluate, train

    cfg = _train_config(args)
    splits = _load_data(args.data)
    model, hist = train(splits.train, splits.val, cfg)
    d = _out_dir(args)
    save_checkpoint(d / "model.ckpt", model, {"train_config": cfg.to_json(), "best_epoch": hist.best_epoch})
    hist.write_csv(d / "history.csv")
    summary = {"best_epoch": hist.best_epoch, "epochs": len(hist.epochs)}
    for name in ("internal_test", "external_test"):
        ps = getattr(splits, name)
        if len(ps):
            summary[f"{name}_kappa"] = evaluate(model, ps)["kappa"]
    _write_json(d / "summary.json", summary)


def _load_data(path):
    from .synth import read_dataset

    if not (Path(path) / "manifest.csv").exists():
        raise ValidationError(f"no manifest.csv under {path}")
    return read_dataset(path)


def cmd_predict(args) -> None:
    from .model import load_checkpoint, predict
    from .training import prepare_images

    model, _ = load_checkpoint(args.model)
    src = Path(args.input)
    if src.is_dir():
        rows = []
        with open(src / "manifest.csv", newline="") as fh:
            rows = [r["path"] for r in csv.DictReader(fh)]
        paths = [src / r for r in rows]
    else:
        rows, paths = [src.name], [src]
    images = np.stack([read_patch(p) for p in paths])
    probs = predict(model, prepare_images(model, images))
    with open(_out_dir(args) / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "pred"] + [f"p{k}" for k in range(probs.shape[1])])
        for name, p in zip(rows, probs):
            w.writerow([name, int(np.argmax(p))] + [f"{v:.9g}" for v in p])


def _label_column(path, preferred) -> tuple[list, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"{path} has no rows")
    cols = list(rows[0].keys())
    col = next((c for c in preferred if c in cols), cols[-1])
    keys = [r["path"] for r in rows] if "path" in cols else list(range(len(rows)))
    try:
        return keys, np.array([int(r[col]) for r in rows])
    except ValueError:
        raise ValidationError(f"{path}: column {col!r} must hold integer class ids") from None


def cmd_eval(args) -> None:
    from .metrics import quadratic_kappa

    pk, pred = _label_column(args.pred, ("pred", "prediction", "y"))
    tk, truth = _label_column(args.truth, ("y", "truth", "label"))
    if isinstance(pk[0], str) and isinstance(tk[0], str):
        lookup = dict(zip(tk, truth))
        missing = [k for k in pk if k not in lookup]
        if missing:
            raise ValidationError(f"{len(missing)} predictions have no ground truth (e.g. {missing[0]})")
        truth = np.array([lookup[k] for k in pk])
    elif len(pred) != len(truth):
        raise ValidationError("prediction and truth files differ in length")
    k = args.classes or int(max(pred.max(), truth.max())) + 1
    kappa = quadratic_kappa(pred, truth, k)
    _write_json(_out_dir(args) / "metrics.json", {"kappa": kappa, "n": int(len(pred)), "n_classes": k,
                                                  "accuracy": float(np.mean(pred == truth))})


def _svg_scatter(coords, labels, size=480, pad=40) -> str:
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    xy = pad + (coords - lo) / span * (size - 2 * pad)
    xy[:, 1] = size - xy[:, 1]  # svg y grows downwards
    names = sorted(set(labels))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<text x="{size / 2:.1f}" y="{size - 8}" font-size="12" text-anchor="middle">PC1</text>',
        f'<text x="12" y="{size / 2:.1f}" font-size="12" transform="rotate(-90 12 {size / 2:.1f})" '
        'text-anchor="middle">PC2</text>',
    ]
    for (x, y), lab in zip(xy, labels):
        colour = palette[names.index(lab) % len(palette)]
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{colour}" fill-opacity="0.7"/>')
    for i, lab in enumerate(names):
        colour = palette[i % len(palette)]
        parts.append(f'<rect x="{size - 110}" y="{12 + 16 * i}" width="10" height="10" fill="{colour}"/>')
        parts.append(f'<text x="{size - 95}" y="{21 + 16 * i}" font-size="11">{lab}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_project(args) -> None:
    from .metrics import pca_project

    with open(args.input, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"{args.input} has no rows")
    label_col = args.label_column
    if label_col is None and "label" in rows[0]:
        label_col = "label"
    if label_col is not None and label_col not in rows[0]:
        raise ValidationError(f"label column {label_col!r} not found")
    cols = [c for c in rows[0] if c != label_col]
    try:
        vectors = np.array([[float(r[c]) for c in cols] for r in rows])
    except ValueError:
        raise ValidationError("vector columns must be numeric") from None
    labels = [r[label_col] for r in rows] if label_col else ["all"] * len(rows)
    res = pca_project(vectors)
    d = _out_dir(args)
    with open(d / "coords.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pc1", "pc2", "label"])
        for (a, b), lab in zip(res.coordinates, labels):
            w.writerow([f"{a:.9g}", f"{b:.9g}", lab])
    _write_json(d / "projection.json", {"explained": res.explained.tolist(), "components": res.components.tolist()})
    (d / "scatter.svg").write_text(_svg_scatter(res.coordinates, labels))


def cmd_compare(args) -> None:
    from .compare import RunConfig, compare

    doc = _read_json(args.config)
    if args.seed is not None:
        doc["master_seed"] = args.seed
    if args.workers is not None:
        doc["workers"] = args.workers
    cfg = RunConfig.from_json(doc)
    d = _out_dir(args)
    _write_json(d / "run_config.json", cfg.to_json())
    print(compare(cfg, d)["text"], end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stainforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("deconv", cmd_deconv, "estimate the H&E matrix of an image (matrix.csv)")
    sp.add_argument("image")
    sp = add("normalize", cmd_normalize, "normalize an image to a target's stain (normalized.png)")
    sp.add_argument("image")
    sp.add_argument("--target", required=True)
    sp = add("augment", cmd_augment, "randomly augment an image (augmented.png)")
    sp.add_argument("image")
    sp.add_argument("--mode", choices=("stain", "hsv", "geom"), required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--preset", choices=sorted(HSV_PRESETS), default="colon")
    sp.add_argument("--sigma1", type=float, default=0.2)
    sp.add_argument("--sigma2", type=float, default=0.2)
    sp = add("gen-data", cmd_gen_data, "render a synthetic multi-center dataset")
    sp.add_argument("--config", help="dataset config JSON (default: built-in 4-center design)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--per-class", type=int, default=200)
    sp.add_argument("--patch-size", type=int, default=64)
    sp = add("train", cmd_train, "train one model (model.ckpt, history.csv, summary.json)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", help="TrainConfig JSON; flags override it")
    sp.add_argument("--mode")
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp = add("predict", cmd_predict, "class probabilities for an image or a dataset (predictions.csv)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="image file or dataset directory")
    sp = add("eval", cmd_eval, "quadratic kappa of predictions against ground truth (metrics.json)")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--classes", type=int)
    sp = add("project", cmd_project, "2-D PCA of vectors (coords.csv, scatter.svg)")
    sp.add_argument("--input", required=True)
    sp.add_argument("--label-column", help="column used to colour points (default: 'label' if present)")
    sp = add("compare", cmd_compare, "repeated training of several modes with a report")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
    sp.add_argument("--workers", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except ValidationError as exc:
        print(f"stainforge: error: {exc}", file=sys.stderr)
        return 2
    except (StainforgeError, OSError, ValueError) as exc:
        print(f"stainforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
