"""Command-line entry point.

Every subcommand prints its resolved configuration and writes it into its
output artifact. Settings resolve as: command-line flag, then the JSON file
given with ``--config``, then the built-in default. Exit status is 0 on
success, 1 for usage errors and 2 for bad input data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zipfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .data_io import (
    AnnotationError,
    SyntheticConfig,
    generate_synthetic,
    histogram_csv,
    load_annotations,
    read_meta,
    save_annotations,
    stats_report,
)
from .evaluation import (
    EvalConfig,
    GTTriplet,
    MapMode,
    Task,
    ap_role,
    filter_predicate_top_k,
    group_by_image,
    gt_triplets,
    hico_map,
    metrics_report,
    recall_at_n,
)
from .geometry import InvalidBoxError
from .numeric import load_arrays
from .pipeline import ModelConfig, RelationModel, TrainConfig, TripletPrediction, infer, prepare_scene, train
from .proposals import ProposalClass
from .sampling import NoPositivesError, SamplerConfig, Strategy, assign_weights, sample_batch


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- argument definitions ------------------------------------------------------------

def _common(p: argparse.ArgumentParser, inp=True, out=True):
    p.add_argument("--config", help="JSON file of defaults; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="scene-level worker threads")
    if inp:
        p.add_argument("--in", dest="inp", required=False, help="annotation file")
    if out:
        p.add_argument("--out", required=False, help="output path")


def _sampler_flags(p):
    p.add_argument("--strategy", default="bnps", help="rs, bnps, bnps_2cls, bnps_3cls, bnps_3cls_hn, ohem")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--pos-ratio", type=float, default=0.25)


def _top_k(p, default=100):
    p.add_argument("--top-k", type=int, default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vrdlab", description="Relationship-proposal sampling lab.")
    parser.add_argument("--version", action="version", version=f"vrdlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic annotation file")
    _common(p, inp=False)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--mode", choices=["general", "hoi"], default="general")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--num-predicates", type=int, default=3)
    p.add_argument("--jitter", type=float, default=0.05)
    p.add_argument("--drop-prob", type=float, default=0.05)
    p.add_argument("--spurious-rate", type=float, default=0.9)
    p.add_argument("--max-detections", type=int, default=130)
    _top_k(p)

    p = sub.add_parser("stats", help="proposal class distribution (JSON, optional CSV)")
    _common(p)
    _top_k(p)
    p.add_argument("--csv", help="also write the class,count histogram here")

    p = sub.add_parser("classify", help="dump the class of every proposal as JSON lines")
    _common(p)
    _top_k(p)

    p = sub.add_parser("sample", help="draw batches from one scene and tally classes")
    _common(p)
    _top_k(p)
    _sampler_flags(p)
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--scene", type=int, default=0, help="index of the scene to sample from")

    p = sub.add_parser("train", help="train the toy model; writes a checkpoint and a loss trace")
    _common(p)
    _top_k(p)
    _sampler_flags(p)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--decay-epochs", default="", help="comma-separated epochs where lr drops")
    p.add_argument("--decay-rate", type=float, default=0.1)
    p.add_argument("--loss", choices=["bce", "focal"], default="bce")
    p.add_argument("--focal-alpha", type=float, default=0.25)
    p.add_argument("--focal-gamma", type=float, default=2.0)
    p.add_argument("--lp", type=int, default=7)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--no-gnn", action="store_true")
    p.add_argument("--trace", help="loss trace path (default: <out>.trace.json)")

    p = sub.add_parser("infer", help="score every proposal; writes prediction JSON lines")
    _common(p)
    _top_k(p)
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--predicate-top-k", type=int, default=1)

    p = sub.add_parser("eval", help="Recall@N, AP_role or HICO-style mAP")
    _common(p)
    p.add_argument("--predictions", required=False)
    p.add_argument("--task", choices=["relationship", "phrase", "ap_role", "hico"], default="relationship")
    p.add_argument("--recall", default="50,100", help="comma-separated N values")
    p.add_argument("--predicate-top-k", type=int, default=1)
    p.add_argument("--mode", choices=["default", "known_objects"], default="default")
    return parser


# -- config resolution -----------------------------------------------------------------

_NOT_SETTINGS = {"command", "config"}


def parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: not valid JSON ({exc.msg})") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        cfg = {("inp" if k == "in" else k): v for k, v in cfg.items()}
        known = set(vars(args)) - _NOT_SETTINGS
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"{args.config}: unknown settings for {args.command}: {', '.join(unknown)}")
        subparser = _subparser(parser, args.command)
        subparser.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)  # pragma: no cover


def resolved(args: argparse.Namespace) -> dict:
    out = {k: v for k, v in vars(args).items() if k not in _NOT_SETTINGS}
    if "inp" in out:
        out["in"] = out.pop("inp")
    return {"command": args.command, **dict(sorted(out.items()))}


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            flag = "--in" if n == "inp" else "--" + n.replace("_", "-")
            raise UsageError(f"{args.command} needs {flag}")


def _positive(args, *names):
    for n in names:
        if getattr(args, n) < 1:
            raise UsageError(f"--{n.replace('_', '-')} must be >= 1")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _load(args):
    try:
        return load_annotations(args.inp)
    except FileNotFoundError:
        raise DataError(f"no such annotation file: {args.inp}") from None


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- subcommands -------------------------------------------------------------------------

def cmd_gen(args, config):
    _require(args, "out")
    try:
        syn = SyntheticConfig(scenes=args.scenes, num_classes=args.num_classes,
                              num_predicates=args.num_predicates, jitter=args.jitter,
                              drop_prob=args.drop_prob, spurious_rate=args.spurious_rate,
                              max_detections=args.max_detections, top_k=args.top_k,
                              mode=args.mode, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    scenes = generate_synthetic(syn)
    save_annotations(args.out, scenes, {"num_classes": syn.num_classes, "num_predicates": syn.num_predicates,
                                        "generator": syn.to_json(), "cli_config": config})
    return {"scenes": len(scenes)}


def cmd_stats(args, config):
    _require(args, "inp", "out")
    _positive(args, "top_k")
    scenes = _load(args)
    report = stats_report(scenes, args.top_k)
    _write_json(args.out, {"config": config, **report})
    if args.csv:
        Path(args.csv).write_text(histogram_csv(report))
    return {"aggregate": report["aggregate"]["counts"]}


def cmd_classify(args, config):
    _require(args, "inp", "out")
    _positive(args, "top_k")
    scenes = _load(args)

    def rows(scene):
        prep = prepare_scene(scene, args.top_k)
        return [{"image_id": scene.image_id, "subject": int(s), "object": int(o),
                 "class": ProposalClass(int(c)).name}
                for (s, o), c in zip(prep.proposals, prep.labels)]

    n = 0
    with open(args.out, "w") as fh:
        fh.write(json.dumps({"config": config}) + "\n")
        for chunk in _pmap(rows, scenes, args.threads):
            for r in chunk:
                fh.write(json.dumps(r) + "\n")
                n += 1
    return {"proposals": n}


def _sampler(args) -> SamplerConfig:
    try:
        return SamplerConfig(Strategy.parse(args.strategy), batch_size=args.batch_size,
                             positive_ratio=args.pos_ratio, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_sample(args, config):
    _require(args, "inp", "out")
    _positive(args, "top_k", "draws")
    sampler = _sampler(args)
    if sampler.strategy is Strategy.OHEM:
        raise UsageError("ohem selects by loss and needs a model; use train --strategy ohem")
    scenes = _load(args)
    if not 0 <= args.scene < len(scenes):
        raise UsageError(f"--scene {args.scene} outside 0..{len(scenes) - 1}")
    prep = prepare_scene(scenes[args.scene], args.top_k)
    try:
        pw = assign_weights(prep.labels, sampler.strategy, sampler.positive_ratio)
    except NoPositivesError as exc:
        raise DataError(f"scene {scenes[args.scene].image_id}: {exc}") from None
    batches, drawn = [], 0
    while drawn < args.draws:
        idx = sample_batch(pw, sampler, stream=len(batches))[: args.draws - drawn]
        batches.append(idx)
        drawn += len(idx)
    all_idx = np.concatenate(batches)
    counts = np.bincount(prep.labels[all_idx], minlength=len(ProposalClass))
    masses = pw.class_masses(prep.labels)
    first = [{"subject": int(prep.proposals[i][0]), "object": int(prep.proposals[i][1]),
              "class": ProposalClass(int(prep.labels[i])).name} for i in batches[0]]
    table = {c.name: {"count": int(counts[c]), "frequency": counts[c] / drawn, "expected": float(masses[c])}
             for c in ProposalClass}
    _write_json(args.out, {"config": config, "image_id": scenes[args.scene].image_id, "draws": drawn,
                           "population": {c.name: int((prep.labels == c).sum()) for c in ProposalClass},
                           "classes": table, "first_batch": first})
    return {c: round(v["frequency"], 4) for c, v in table.items()}


def cmd_train(args, config):
    _require(args, "inp", "out")
    _positive(args, "top_k", "epochs", "lp", "heads", "head_dim", "feature_dim", "hidden_dim")
    sampler = _sampler(args)
    try:
        decay = tuple(int(e) for e in args.decay_epochs.split(",") if e.strip())
        tc = TrainConfig(epochs=args.epochs, lr=args.lr, momentum=args.momentum, decay_epochs=decay,
                         decay_rate=args.decay_rate, top_k=args.top_k, loss=args.loss,
                         focal_alpha=args.focal_alpha, focal_gamma=args.focal_gamma,
                         init_seed=args.seed, feature_seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.lr < 0:
        raise UsageError("--lr must be >= 0")
    scenes = _load(args)
    meta = read_meta(args.inp)
    num_predicates = int(meta.get("num_predicates") or 1 + max(
        (r.predicate for s in scenes for r in s.ground_truth.relationships), default=0))
    mc = ModelConfig(feature_dim=args.feature_dim, heads=args.heads, head_dim=args.head_dim,
                     hidden_dim=args.hidden_dim, num_predicates=num_predicates, lp=args.lp,
                     use_gnn=not args.no_gnn)
    result = train(scenes, sampler, tc, mc)
    result.model.save(args.out, {"cli_config": config, "feature_seed": tc.feature_seed})
    _write_json(args.trace or f"{args.out}.trace.json",
                {"config": config, "losses": result.losses, "steps": result.steps,
                 "skipped_scenes": result.skipped_scenes})
    first = float(np.mean(result.losses[:10])) if result.losses else None
    last = float(np.mean(result.losses[-10:])) if result.losses else None
    return {"steps": result.steps, "skipped_scenes": result.skipped_scenes,
            "loss_first10": first, "loss_last10": last}


def _load_model(path):
    """Model plus the feature seed it was trained with."""
    try:
        return RelationModel.load(path), int(load_arrays(path)[1].get("feature_seed", 0))
    except FileNotFoundError:
        raise DataError(f"no such checkpoint: {path}") from None
    except (KeyError, ValueError, OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"{path}: not a usable checkpoint ({exc})") from None


def cmd_infer(args, config):
    _require(args, "inp", "out", "checkpoint")
    _positive(args, "top_k", "predicate_top_k")
    scenes = _load(args)
    model, feature_seed = _load_model(args.checkpoint)
    preds = _pmap(lambda s: infer(model, s, args.predicate_top_k, args.top_k, feature_seed),
                  scenes, args.threads)
    n = 0
    with open(args.out, "w") as fh:
        fh.write(json.dumps({"config": config}) + "\n")
        for per_image in preds:
            for p in per_image:
                fh.write(json.dumps(p.to_json()) + "\n")
                n += 1
    return {"predictions": n}


def read_predictions(path) -> list[TripletPrediction]:
    out = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "config" in rec and "predicate" not in rec:
                    continue
                out.append(TripletPrediction.from_json(rec))
    except FileNotFoundError:
        raise DataError(f"no such prediction file: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, InvalidBoxError) as exc:
        raise DataError(f"{path}:{lineno}: bad prediction record ({exc})") from None
    return out


def cmd_eval(args, config):
    _require(args, "inp", "out", "predictions")
    _positive(args, "predicate_top_k")
    scenes = _load(args)
    preds = filter_predicate_top_k(read_predictions(args.predictions), args.predicate_top_k)
    gts: dict[str, list[GTTriplet]] = {s.image_id: gt_triplets(s) for s in scenes}
    metrics = []
    if args.task in ("relationship", "phrase"):
        try:
            ns = sorted({int(n) for n in args.recall.split(",") if n.strip()})
        except ValueError:
            raise UsageError(f"--recall expects comma-separated integers, got {args.recall!r}") from None
        if not ns or ns[0] < 1:
            raise UsageError("--recall values must be >= 1")
        by_image = group_by_image(preds)
        for n in ns:
            ec = EvalConfig(Task(args.task), n, args.predicate_top_k)
            metrics.append(metrics_report(f"recall@{n}", ec, recall_at_n(by_image, gts, n, ec.task)))
    elif args.task == "ap_role":
        r = ap_role(preds, gts)
        metrics.append(metrics_report("ap_role", EvalConfig(predicate_top_k=args.predicate_top_k), r.mean,
                                      per_verb={str(k): v for k, v in r.per_class.items()},
                                      excluded_verbs=list(r.excluded)))
    else:
        ec = EvalConfig(predicate_top_k=args.predicate_top_k, mode=MapMode(args.mode))
        r = hico_map(preds, gts, ec.mode)
        metrics.append(metrics_report(f"hico_map_{ec.mode.value}", ec, r.mean,
                                      per_pair={f"{v},{c}": ap for (v, c), ap in r.per_class.items()}))
    _write_json(args.out, {"config": config, "metrics": metrics})
    return {m["metric"]: m["value"] for m in metrics}


COMMANDS = {"gen": cmd_gen, "stats": cmd_stats, "classify": cmd_classify, "sample": cmd_sample,
            "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def run(argv: Sequence[str]) -> int:
    try:
        args = parse(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        config = resolved(args)
        print(json.dumps({"resolved_config": config}, sort_keys=True))
        summary = COMMANDS[args.command](args, config)
        print(json.dumps({"result": summary}, sort_keys=True, default=float))
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, AnnotationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
