"""Command-line front end: dataset generation and preprocessing, training,
embedding extraction, retrieval evaluation, fusion sweeps, and the
verification suites. Every artifact-writing run echoes its resolved
configuration and seed into the output directory."""

from __future__ import annotations

import argparse
import os
import sys

from . import config as cfg
from . import skeleton, synthetic, verify
from .evaluate import (EvalProtocol, dump_report_json, evaluate_rank1,
                       format_accuracy_report, format_sweep_report,
                       lambda_sweep)
from .model import (MultiStreamModel, load_checkpoint, load_embeddings,
                    save_checkpoint, save_embeddings)
from .train import extract_embeddings, subject_labels, train

ECHO_NAME = "config.yaml"


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _str_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _require_out(args) -> str:
    if not args.out:
        raise ValueError(f"--out is required for {args.command}")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _echo(args, doc: dict) -> None:
    doc = dict(doc)
    doc["command"] = args.command
    doc["seed"] = args.seed
    cfg.dump_config(doc, os.path.join(args.out, ECHO_NAME))


def _resolved(args) -> dict:
    path = cfg.find_config(args.config) if args.config else None
    return cfg.resolve_config(path, args.set or (), precision=args.precision)


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _require_out(args)
    views = tuple(args.views)
    conditions = tuple(args.conditions)
    sequences = synthetic.generate_synthetic_dataset(
        args.subjects, args.seqs, views, args.frames, seed=args.seed,
        conditions=conditions)
    train_ids = {f"S{i + 1:03d}" for i in range(args.subjects)} \
        if args.train_subjects is None else \
        {f"S{i + 1:03d}" for i in range(args.train_subjects)}

    def split_of(seq):
        if seq.subject_id in train_ids:
            return "train"
        if seq.condition == "NM" and seq.seq_index <= 4:
            return "gallery"
        return "probe"

    skeleton.write_dataset(sequences, out, split_of)
    _echo(args, {"gen_data": {
        "subjects": args.subjects, "seqs": args.seqs,
        "views": list(views), "frames": args.frames,
        "conditions": list(conditions),
        "train_subjects": args.train_subjects}})
    print(f"wrote {len(sequences)} sequences to {out}")
    return 0


def cmd_preprocess(args) -> int:
    out = _require_out(args)
    entries = skeleton.load_manifest(args.data)
    split_by_key = {}
    resampled = []
    for entry in entries:
        seq = skeleton.load_sequence(os.path.join(args.data, entry["path"]))
        seq = skeleton.normalize_coords(
            skeleton.resample_to_length(seq, args.frames))
        split_by_key[seq.key()] = entry["split"]
        resampled.append(seq)
    skeleton.write_dataset(resampled, out,
                           lambda s: split_by_key[s.key()])
    _echo(args, {"preprocess": {"frames": args.frames}})
    print(f"wrote {len(resampled)} resampled sequences to {out}")
    return 0


def cmd_train(args) -> int:
    out = _require_out(args)
    doc = _resolved(args)
    sequences = skeleton.load_dataset(args.data, split="train")
    if not sequences:
        raise ValueError(f"{args.data}: train split is empty")
    labels = subject_labels(sequences)
    doc["model"]["n_classes"] = len(labels)
    model_config = cfg.build_model_config(doc)
    train_config = cfg.build_train_config(doc, seed=args.seed)
    _echo(args, doc)

    model = MultiStreamModel(model_config, seed=args.seed)
    history = train(model, sequences, train_config,
                    log_path=os.path.join(out, "loss.log"))
    save_checkpoint(model, os.path.join(out, "model.ckpt"),
                    extra={"epochs": len(history),
                           "final_loss": history[-1].loss,
                           "final_acc": history[-1].acc})
    print(history[-1].to_json())
    return 0


def cmd_embed(args) -> int:
    out = _require_out(args)
    model, _ = load_checkpoint(args.ckpt)
    splits = ("train", "gallery", "probe") if args.split == "all" \
        else (args.split,)
    written = []
    for split in splits:
        sequences = skeleton.load_dataset(args.data, split=split)
        if not sequences:
            if args.split != "all":
                raise ValueError(f"{args.data}: split {split!r} is empty")
            continue
        records = extract_embeddings(model, sequences)
        path = os.path.join(out, f"{split}.emb")
        save_embeddings(records, path)
        written.append((split, len(records)))
    if not written:
        raise ValueError(f"{args.data}: no sequences in any split")
    _echo(args, {"embed": {"split": args.split}})
    for split, count in written:
        print(f"{split}: {count} embeddings")
    return 0


def cmd_eval(args) -> int:
    out = _require_out(args)
    gallery = load_embeddings(args.gallery)
    probe = load_embeddings(args.probe)
    table = evaluate_rank1(gallery, probe, EvalProtocol())
    report = format_accuracy_report(table)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report)
    doc = table.to_dict()
    defined = [m for m in table.means.values() if m is not None]
    doc["overall_mean"] = float(sum(defined) / len(defined)) \
        if defined else None
    dump_report_json(doc, os.path.join(out, "report.json"))
    _echo(args, {"eval": {"gallery_records": len(gallery),
                          "probe_records": len(probe)}})
    print(report, end="")
    return 0


def cmd_fuse_sweep(args) -> int:
    out = _require_out(args)
    f_m = load_embeddings(args.model_emb)
    f_a = load_embeddings(args.appearance_emb)
    rows = lambda_sweep(f_m, f_a, args.lambdas, EvalProtocol())
    report = format_sweep_report(rows)
    with open(os.path.join(out, "sweep.txt"), "w", encoding="utf-8") as fh:
        fh.write(report)
    dump_report_json({"rows": rows}, os.path.join(out, "sweep.json"))
    _echo(args, {"fuse_sweep": {"lambdas": [float(v) for v in args.lambdas]}})
    print(report, end="")
    return 0


def cmd_gradcheck(args) -> int:
    results = verify.gradcheck_suite(seeds=args.seeds, base_seed=args.seed)
    text = verify.format_results(results)
    print(text, end="")
    if args.out:
        _require_out(args)
        with open(os.path.join(args.out, "gradcheck.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
        _echo(args, {"gradcheck": {"seeds": args.seeds,
                                   "threshold": verify.GRADCHECK_THRESHOLD}})
    return 0 if all(r.passed for r in results) else 1


def cmd_selftest(args) -> int:
    results = verify.selftest_suite(seed=args.seed)
    text = verify.format_results(results, show_value=False)
    print(text, end="")
    if args.out:
        _require_out(args)
        with open(os.path.join(args.out, "selftest.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
        _echo(args, {"selftest": {}})
    return 0 if all(r.passed for r in results) else 1


# -- wiring ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file path or preset name")
    common.add_argument("--out", help="output directory for artifacts")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("--precision", choices=("single", "double"))

    parser = argparse.ArgumentParser(
        prog="gaitgcn",
        description="Skeleton-sequence gait recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic walking dataset")
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--seqs", type=int, default=4)
    p.add_argument("--views", type=_int_list,
                   default=list(skeleton.VIEWS_DEG), metavar="DEG,DEG,...")
    p.add_argument("--frames", type=int, default=skeleton.DEFAULT_FRAMES)
    p.add_argument("--conditions", type=_str_list, default=["NM"],
                   metavar="NM,BG,CL")
    p.add_argument("--train-subjects", type=int, default=None,
                   help="first N subjects go to the train split; the rest "
                        "split into gallery and probe (default: all train)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", parents=[common],
                       help="resample and renormalize a dataset")
    p.add_argument("--data", required=True, help="input dataset directory")
    p.add_argument("--frames", type=int, required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common],
                       help="train on the train split of a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common],
                       help="extract embeddings with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="all",
                   choices=("train", "gallery", "probe", "all"))
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", parents=[common],
                       help="cross-view rank-1 accuracy from embedding files")
    p.add_argument("--gallery", required=True, help="gallery embedding file")
    p.add_argument("--probe", required=True, help="probe embedding file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse-sweep", parents=[common],
                       help="two-branch fusion weight sweep")
    p.add_argument("--model-emb", required=True)
    p.add_argument("--appearance-emb", required=True)
    p.add_argument("--lambdas", type=_float_list,
                   default=[300.0, 350.0, 400.0, 450.0, 500.0],
                   metavar="L,L,...")
    p.set_defaults(func=cmd_fuse_sweep)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference checks for every layer kind")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", parents=[common],
                       help="property checks against brute-force oracles")
    p.set_defaults(func=cmd_selftest)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"missing-file: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        print(f"invalid-input: {e}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"runtime-error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
