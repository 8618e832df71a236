"""Command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric
divergence, 4 insufficient data. Set HYPS_LOG_LEVEL (DEBUG, INFO, ...) for
progress logging on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import AdapterSpec, Variant, encode_adapters
from .classify import (
    Task,
    classification_report,
    cross_validate,
    format_report,
    read_subject_table,
    synth_cohort,
    write_subject_table,
)
from .errors import (
    DataError,
    HypsError,
    InsufficientDataError,
    NumericError,
    UndefinedMetricError,
)
from .experiments import SWEEP_RANKS, SWEEP_VARIANTS, finetune, pretrain, rank_sweep, task_b_split
from .linalg import make_rng
from .metrics import BinaryMask, dice_score, filter_small_components, hd95, measure_volume
from .model import ToyModelConfig, load_model, save_model
from .synth import generate_dataset, task_a, task_b
from .train import TrainConfig
from .volume_io import LabelVolume, read_volume, write_volume

log = logging.getLogger("hyps")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INSUFFICIENT = 0, 2, 3, 4
LEFT_LABEL, RIGHT_LABEL = 1, 2


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


class Run:
    """Collects outputs for one command and writes its manifest."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.start = time.perf_counter()

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self) -> None:
        config = {k: str(v) if isinstance(v, Path) else v for k, v in sorted(vars(self.args).items()) if k != "func"}
        manifest = {
            "command": self.args.command,
            "config": config,
            "seed": getattr(self.args, "seed", None),
            "version": __version__,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "duration_s": round(time.perf_counter() - self.start, 3),
        }
        _write_json(self.out / "manifest.json", manifest)


# -- pretrain / fine-tune -------------------------------------------------


def _get_base(args, run: Run):
    if args.base:
        run.inputs.append(str(args.base))
        model = load_model(args.base)
        if model.spec.variant is not Variant.FULL:
            raise DataError(f"{args.base} holds an adapted model; a plain pretrained model is required")
        return model
    if not args.pretrain:
        raise DataError("give --base CHECKPOINT or --pretrain")
    config = ToyModelConfig(embed_dim=args.embed_dim)
    model, result = pretrain(config, task_a(seed=args.seed), n=args.pretrain_n, epochs=args.pretrain_epochs, seed=args.seed)
    save_model(run.path("base.ckpt"), model)
    _write_text(run.path("pretrain_history.csv"), result.history_csv())
    return model


def cmd_pretrain(args) -> int:
    run = Run(args)
    config = ToyModelConfig(embed_dim=args.embed_dim)
    model, result = pretrain(config, task_a(seed=args.seed), n=args.n, epochs=args.epochs, seed=args.seed)
    save_model(run.path("base.ckpt"), model)
    _write_text(run.path("history.csv"), result.history_csv())
    run.finish()
    print(f"pretrained {args.epochs} epochs on {args.n} task-A volumes; final loss {result.history[-1].loss:.4f}"
          if result.history else "no epochs run")
    return EXIT_OK


def _report(summary) -> dict:
    return {
        "dice": summary.dice,
        "hd95": None if math.isnan(summary.hd95) else summary.hd95,
        "hd95_undefined": summary.hd95_undefined,
        "cases": [
            {"index": c.index, "dice": c.dice, "hd95": None if math.isnan(c.hd95) else c.hd95,
             "pred_voxels": c.pred_voxels, "true_voxels": c.true_voxels}
            for c in summary.cases
        ],
    }


def cmd_finetune(args) -> int:
    spec = AdapterSpec(args.variant, args.rank)
    run = Run(args)
    base = _get_base(args, run)
    for name, _, (m, n) in base.registry():
        spec.check_shape(m, n, name)
    train_set, test_set = task_b_split(args.train_n, args.test_n, args.seed)
    config = TrainConfig(epochs=args.epochs, lr0=args.lr, seed=args.seed)
    res = finetune(base, spec, train_set, test_set, config, min_component=args.filter_cc or 0)
    save_model(run.path("model.ckpt"), res.model)
    with open(run.path("adapters.ckpt"), "wb") as fh:
        fh.write(encode_adapters(res.model.layers[name] for name, _, _ in res.model.registry()))
    _write_text(run.path("history.csv"), res.train.history_csv())
    report = {"variant": spec.variant.value, "rank": spec.rank_a, "trainable_params": res.trainable,
              **_report(res.summary)}
    _write_json(run.path("report.json"), report)
    text = (f"variant\trank\tparams\tdice\thd95\n"
            f"{spec.variant.value}\t{spec.rank_a}\t{res.trainable}\t{res.summary.dice:.2f}\t{_fmt(res.summary.hd95)}\n")
    _write_text(run.path("report.txt"), text)
    run.finish()
    sys.stdout.write(text)
    return EXIT_OK


def cmd_rank_sweep(args) -> int:
    variants = [Variant.parse(v).value for v in args.variants.split(",") if v]
    ranks = [int(r) for r in args.ranks.split(",") if r]
    for r in ranks:
        AdapterSpec(Variant.LORA, r)
    run = Run(args)
    base = _get_base(args, run)
    for v in variants:
        for r in ranks:
            spec = AdapterSpec(v, r)
            for name, _, (m, n) in base.registry():
                spec.check_shape(m, n, name)
    train_set, test_set = task_b_split(args.train_n, args.test_n, args.seed)
    config = TrainConfig(epochs=args.epochs, lr0=args.lr, seed=args.seed)
    rows = rank_sweep(base, train_set, test_set, config, variants, ranks)
    table = _csv_text(
        ["variant", "rank", "dice", "hd95", "params", "params_enumerated", "adapter_params"],
        [[r.variant, r.rank, f"{r.dice:.6f}", _fmt(r.hd95), r.trainable_params, r.enumerated_params, r.adapter_params]
         for r in rows],
    )
    _write_text(run.path("sweep.csv"), table)
    lines = ["method\t" + "\t".join(f"r={r} Dice/HD95" for r in ranks)]
    for v in variants:
        cells = [f"{row.dice:.2f}/{_fmt(row.hd95)}" for row in rows if row.variant == v]
        lines.append(v + "\t" + "\t".join(cells))
    _write_text(run.path("sweep.txt"), "\n".join(lines) + "\n")
    run.finish()
    sys.stdout.write(table)
    return EXIT_OK


# -- volumes --------------------------------------------------------------


def _volume_pairs(pred: Path, gt: Path) -> list[tuple[str, Path, Path]]:
    if pred.is_dir() != gt.is_dir():
        raise DataError("--pred and --gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred.name.split(".")[0], pred, gt)]
    names = sorted(p.name for p in pred.iterdir() if p.is_file())
    missing = [n for n in names if not (gt / n).is_file()]
    if missing:
        raise DataError(f"no ground truth for {missing[:3]}")
    if not names:
        raise DataError(f"no prediction files in {pred}")
    return [(n.split(".")[0], pred / n, gt / n) for n in names]


def _binary(vol: LabelVolume, min_component: int) -> np.ndarray:
    fg = vol.data > 0
    if min_component > 0:
        fg = filter_small_components(BinaryMask(fg, vol.spacing), min_component).voxels
    return fg


def cmd_eval(args) -> int:
    run = Run(args)
    rows = []
    for sid, p, g in _volume_pairs(Path(args.pred), Path(args.gt)):
        run.inputs += [str(p), str(g)]
        pv, gv = read_volume(p), read_volume(g)
        if pv.data.shape != gv.data.shape or pv.spacing != gv.spacing:
            raise DataError(f"{sid}: prediction {pv.data.shape}@{pv.spacing} vs truth {gv.data.shape}@{gv.spacing}")
        pred = _binary(pv, args.filter_cc)
        truth = gv.data > 0
        d = dice_score(BinaryMask(pred, pv.spacing), BinaryMask(truth, gv.spacing))
        try:
            h = hd95(BinaryMask(pred, pv.spacing), BinaryMask(truth, gv.spacing))
        except UndefinedMetricError:
            h = float("nan")
        labels = np.where(pred, pv.data, 0)
        left = measure_volume(BinaryMask(labels == LEFT_LABEL, pv.spacing))
        right = measure_volume(BinaryMask(labels == RIGHT_LABEL, pv.spacing))
        rows.append((sid, d, h, left, right))
    text = _csv_text(
        ["id", "dice", "hd95", "left_volume_cm3", "right_volume_cm3"],
        [[sid, _fmt(d), _fmt(h), _fmt(l), _fmt(r)] for sid, d, h, l, r in rows],
    )
    _write_text(run.path("metrics.csv"), text)
    hds = [r[2] for r in rows if not math.isnan(r[2])]
    summary = {
        "n": len(rows),
        "mean_dice": float(np.mean([r[1] for r in rows])),
        "mean_hd95": float(np.mean(hds)) if hds else None,
        "hd95_undefined": len(rows) - len(hds),
        "filter_cc": args.filter_cc,
    }
    _write_json(run.path("summary.json"), summary)
    run.finish()
    sys.stdout.write(text)
    return EXIT_OK


def cmd_postprocess(args) -> int:
    run = Run(args)
    run.inputs.append(str(args.input))
    vol = read_volume(args.input)
    keep = _binary(vol, args.min_voxels)
    data = np.where(keep, vol.data, 0).astype(vol.data.dtype)
    name = Path(args.input).name
    write_volume(LabelVolume(data, vol.spacing), run.path(name))
    removed = int((vol.data > 0).sum() - keep.sum())
    run.finish()
    print(f"{name}: removed {removed} voxels in components smaller than {args.min_voxels}")
    return EXIT_OK


def cmd_synth_volumes(args) -> int:
    run = Run(args)
    task = (task_a if args.task == "a" else task_b)(seed=args.seed)
    for i, (img, lab) in enumerate(generate_dataset(task, args.n)):
        write_volume(LabelVolume(img.astype(np.float32)), run.path(f"image_{i:03d}.vol"))
        write_volume(LabelVolume(lab.astype(np.uint8)), run.path(f"label_{i:03d}.vol"))
    run.finish()
    print(f"wrote {args.n} task-{args.task.upper()} image/label pairs to {args.out}")
    return EXIT_OK


# -- classification -------------------------------------------------------


def cmd_classify(args) -> int:
    task = Task.parse(args.task)
    run = Run(args)
    run.inputs.append(str(args.table))
    records = read_subject_table(args.table)
    pos, neg = task.classes
    records = [r for r in records if r.diagnosis in (pos, neg)]
    if not records:
        raise InsufficientDataError(f"no {pos}/{neg} subjects in {args.table}")
    cv = cross_validate(records, task, k=args.folds, seed=args.seed)
    report = classification_report(cv.scores, cv.labels)
    title = f"{pos} vs {neg} ({len(records)} subjects, {args.folds}-fold CV)"
    text = format_report(report, title)
    _write_text(run.path("report.txt"), text)
    _write_json(run.path("report.json"), {"task": task.value, **report.as_dict()})
    _write_text(
        run.path("scores.csv"),
        _csv_text(["id", "fold", "label", "score"],
                  [[i, int(f), int(y), repr(float(s))] for i, f, y, s in zip(cv.ids, cv.folds, cv.labels, cv.scores)]),
    )
    run.finish()
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth_cohort(args) -> int:
    run = Run(args)
    records = synth_cohort(args.n, args.task, (args.pos_mean, args.neg_mean), args.std, args.seed)
    if args.permute:
        rng = make_rng(args.seed + 1)
        diag = [records[i].diagnosis for i in rng.permutation(len(records))]
        records = [type(r)(r.id, r.left_volume, r.right_volume, r.age, r.sex, d) for r, d in zip(records, diag)]
    write_subject_table(records, run.path("subjects.csv"))
    run.finish()
    print(f"wrote {len(records)} subjects to {run.out / 'subjects.csv'}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_base(p: argparse.ArgumentParser, embed_dim: int) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--base", type=Path, help="pretrained model checkpoint")
    g.add_argument("--pretrain", action="store_true", help="pretrain a base model on task A first")
    p.add_argument("--pretrain-n", type=_positive, default=200)
    p.add_argument("--pretrain-epochs", type=int, default=20)
    p.add_argument("--embed-dim", type=_positive, default=embed_dim)
    p.add_argument("--train-n", type=_positive, default=10)
    p.add_argument("--test-n", type=_positive, default=50)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyps", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--out", type=Path, default=Path("out") / name)
        return p

    p = cmd("pretrain", cmd_pretrain, "train a toy model from scratch on task A")
    p.add_argument("--n", type=_positive, default=200)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--embed-dim", type=_positive, default=16)

    p = cmd("finetune", cmd_finetune, "adapt a pretrained model to task B")
    p.add_argument("--variant", default="hyps", help="full, linear-probe, lora, seqlora, cps, pissa, hyps")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--filter-cc", type=int, default=0, metavar="N")
    _add_base(p, 16)

    p = cmd("rank-sweep", cmd_rank_sweep, "fine-tune every (variant, rank) pair")
    p.add_argument("--variants", default=",".join(SWEEP_VARIANTS))
    p.add_argument("--ranks", default=",".join(map(str, SWEEP_RANKS)))
    _add_base(p, 32)

    p = cmd("eval", cmd_eval, "score predicted label volumes against ground truth")
    p.add_argument("--pred", required=True, help="volume file or directory")
    p.add_argument("--gt", required=True, help="volume file or directory (same file names)")
    p.add_argument("--filter-cc", type=int, nargs="?", const=1000, default=0, metavar="N",
                   help="drop components below N voxels (default 1000) before scoring")

    p = cmd("postprocess", cmd_postprocess, "remove small connected components")
    p.add_argument("input", type=Path)
    p.add_argument("--min-voxels", type=int, default=1000)

    p = cmd("synth-volumes", cmd_synth_volumes, "write synthetic image/label volumes")
    p.add_argument("--task", choices=("a", "b"), default="b")
    p.add_argument("--n", type=_positive, default=10)

    p = cmd("classify", cmd_classify, "cross-validated SVM diagnosis from a subject table")
    p.add_argument("table", type=Path)
    p.add_argument("--task", default="ad-cn", help="ad-cn or emci-lmci")
    p.add_argument("--folds", type=_positive, default=5)

    p = cmd("synth-cohort", cmd_synth_cohort, "write a synthetic subject table")
    p.add_argument("--task", default="ad-cn")
    p.add_argument("--n", type=_positive, default=100, help="subjects per class")
    p.add_argument("--pos-mean", type=float, default=2.28)
    p.add_argument("--neg-mean", type=float, default=2.70)
    p.add_argument("--std", type=float, default=0.15)
    p.add_argument("--permute", action="store_true", help="shuffle diagnoses across subjects")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("HYPS_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except InsufficientDataError as exc:
        print(f"error: insufficient data: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except (HypsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
