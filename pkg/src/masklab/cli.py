"""Command-line entry points: dataset generation, training, evaluation,
mask inspection, gradient checking, and trace rendering."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import charts
from . import colearning as cl
from . import data as dt
from . import evaluation as ev
from . import masking as mk
from . import numerics as nm
from .errors import InputError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="masklab",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic video-caption "
                       "dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=6)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)

    t = sub.add_parser("train", help="run dual-mask co-learning over a "
                       "dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON training config; flags below "
                   "override its fields")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--mask-strategy",
                   choices=["attention", "random", "random_tube"])
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--baseline", action="store_true",
                   help="plain contrastive training, no masked branches")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset and "
                       "write report.json plus charts")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="directory for report files "
                   "(default: beside the checkpoint)")
    e.add_argument("--tau-dsl", type=float)

    m = sub.add_parser("maskgen", help="derive an informed mask from a "
                       "saved attention tensor")
    m.add_argument("--attention", required=True,
                   help=".tns dump shaped [M, H, T, T]")
    m.add_argument("--kind", choices=["high", "low"], required=True)
    m.add_argument("--r", type=float, required=True)
    m.add_argument("--a-s", type=int, required=True)
    m.add_argument("--a-e", type=int, required=True)
    m.add_argument("--out", help="write the JSON record here instead of "
                   "stdout")
    m.add_argument("--heatmap", help="optional SVG of the weight grid")

    c = sub.add_parser("gradcheck", help="compare tape gradients of the "
                       "full objective against finite differences")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--coords", type=int, default=6)
    c.add_argument("--batch", type=int, default=2)

    r = sub.add_parser("report", help="render loss and attention traces "
                       "from a run directory to SVG")
    r.add_argument("--run", required=True)
    r.add_argument("--out", help="chart directory (default: the run dir)")
    return p


def _cmd_gen_data(args) -> int:
    out = dt.gen_dataset(args.count, args.seed, args.out, m=args.frames,
                         h=args.height, w=args.width)
    manifest = json.loads((Path(out) / "manifest.json").read_text())
    print(f"wrote {args.count} pairs to {out} "
          f"(config_hash {manifest['config_hash']})")
    return 0


def _load_train_config(args) -> cl.TrainConfig:
    if args.config:
        payload = json.loads(Path(args.config).read_text())
        config = cl.TrainConfig.from_dict(payload)
    else:
        config = cl.TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.mask_strategy is not None:
        overrides["mask_strategy"] = args.mask_strategy
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def _cmd_train(args) -> int:
    config = _load_train_config(args)
    dataset = dt.load_dataset(args.data)
    step_fn = cl.baseline_contrastive_step if args.baseline else None
    cl.run_training(dataset, config, args.out, resume_from=args.resume,
                    step_fn=step_fn)
    rows = (Path(args.out) / "loss.jsonl").read_text().splitlines()
    last = json.loads(rows[-1])
    print(f"trained {config.steps} steps (seed {config.seed}); "
          f"final total loss {last['total']:.4f}; run dir {args.out}")
    return 0


def _cmd_eval(args) -> int:
    params, _, step, _ = cl.load_checkpoint(args.ckpt)
    dataset = dt.load_dataset(args.data)
    report = ev.evaluate(params, dataset, tau_dsl=args.tau_dsl)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2,
                                                sort_keys=True) + "\n")
    labels, plain, dsl = [], [], []
    for direction in ("t2v", "v2t"):
        for k in ("1", "5", "10"):
            labels.append(f"{direction} R@{k}")
            plain.append(report[direction]["r_at"][k])
            dsl.append(report[direction + "_dsl"]["r_at"][k])
    charts.bar_chart(labels, plain, "retrieval recall", out / "recall.svg")
    charts.bar_chart(labels, dsl, "retrieval recall, dual-softmax",
                     out / "recall_dsl.svg")
    print(f"checkpoint step {step}: t2v R@1 {report['t2v']['r_at']['1']:.2f}"
          f"  v2t R@1 {report['v2t']['r_at']['1']:.2f}"
          f"  rsum {report['rsum']:.2f}")
    print(f"report written to {out / 'report.json'}")
    return 0


def _cmd_maskgen(args) -> int:
    _, att = nm.load_tensor(args.attention)
    weights = mk.extract_cls_weights(att, args.a_s, args.a_e)
    order = "descending" if args.kind == "high" else "ascending"
    mask = mk.informed_mask(weights, args.r, order)
    record = {"kind": mask.kind, "r": mask.ratio, "a_s": mask.a_s,
              "a_e": mask.a_e, "patch_indices": list(mask.patch_indices)}
    text = json.dumps(record, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"mask record written to {args.out}")
    else:
        print(text)
    if args.heatmap:
        n = weights.w.shape[0]
        side = int(round(n ** 0.5))
        grid = (weights.w.reshape(side, side)
                if side * side == n else weights.w.reshape(1, n))
        charts.heatmap(grid, "CLS attention weights", args.heatmap)
    return 0


def _cmd_gradcheck(args) -> int:
    config = cl.TrainConfig(batch_size=args.batch, steps=1)
    worst, cases = cl.gradcheck_objective(seed=args.seed,
                                          coords_per_tensor=args.coords,
                                          config=config)
    for err, name, coord in cases[:3]:
        print(f"  {err:.3e}  {name}{coord}")
    print(f"max rel err {worst:.3e}")
    return 0 if worst <= 1e-4 else 1


def _read_loss_rows(run: Path) -> list:
    path = run / "loss.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines()
            if line.strip()]


def _read_attention_rows(run: Path) -> list:
    path = run / "attention.csv"
    if not path.exists():
        return []
    lines = path.read_text().splitlines()
    return [tuple(float(v) for v in line.split(","))
            for line in lines[1:] if line.strip()]


def _cmd_report(args) -> int:
    run = Path(args.run)
    out = Path(args.out) if args.out else run
    loss_rows = _read_loss_rows(run)
    att_rows = _read_attention_rows(run)
    if not loss_rows and not att_rows:
        print("no data in run directory", file=sys.stderr)
        return 1
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if loss_rows:
        steps = [r["step"] for r in loss_rows]
        charts.line_chart({"total": list(zip(steps,
                                             (r["total"]
                                              for r in loss_rows)))},
                          "training loss", out / "loss_total.svg",
                          y_label="loss")
        parts = {}
        for key in ("L_vtc", "L_vtc_H", "L_vvc_H", "L_vtc_L", "L_vvc_L",
                    "L_adv"):
            parts[key] = [(s, r[key]) for s, r in zip(steps, loss_rows)]
        charts.line_chart(parts, "loss components",
                          out / "loss_components.svg", y_label="loss")
        written += ["loss_total.svg", "loss_components.svg"]
    if att_rows:
        series = {"top 30%": [(r[0], r[1]) for r in att_rows],
                  "bottom 30%": [(r[0], r[2]) for r in att_rows]}
        charts.line_chart(series, "CLS attention mass",
                          out / "attention_shift.svg", y_label="mean weight")
        written.append("attention_shift.svg")
    print(f"wrote {', '.join(written)} to {out}")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "maskgen": _cmd_maskgen,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.cmd](args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
