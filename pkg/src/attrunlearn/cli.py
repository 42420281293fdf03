"""Command-line entry point: ``attrunlearn <command> [options]``.

Commands:
    prepare        load raw interactions and attributes, filter, split, persist
    train          fit an MF recommender and write an EMB1 embedding file
    unlearn        remove one or two attributes from trained user embeddings
    attack         run the k-fold MLP attribute-inference attack
    evaluate       full-ranking HR@K / NDCG@K, optionally RBO@10 vs a reference
    perturb-study  random user-embedding perturbations vs. both regularizers

Every command accepts ``--config FILE`` (JSON) whose keys, spelled like the
long options with underscores, provide defaults that explicit flags override.
Exit status is 0 on success, 2 on usage errors and 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .attacker import AttackerConfig, evaluate_attack, parse_arch
from .cfmodel import EmbeddingTable, TrainConfig, TrainingDivergedError, config_dict, load_embeddings, save_embeddings, train_model
from .dataset import DatasetError, FORMATS, load_prepared, prepare, save_prepared
from .metrics import eval_ranking, pearson, wbacc
from .mmd import GroupIndex
from .rankreg import RegConfig, mean_rbo, perturbation_study, topk_lists
from .unlearn import UnlearnConfig, unlearn, unlearn_multi, write_trace

log = logging.getLogger("attrunlearn")

# plain-SGD step sizes that suit the two objectives' very different scales
SINGLE_ATTR_LR = 20.0
MULTI_ATTR_LR = 3.5e-3


def _arch(text: str):
    try:
        return parse_arch(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _ks(text: str) -> List[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}; expected e.g. 5,10") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return ks


def _write_json(path: Optional[str], payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _load_data(args):
    split, attrs = load_prepared(args.data)
    return split, attrs


def _need_attrs(attrs, names: Sequence[str]):
    if attrs is None:
        raise DatasetError("the prepared directory has no attributes.csv; rerun prepare with --attributes")
    for n in names:
        if n not in attrs:
            raise DatasetError(f"unknown attribute {n!r}; available: {', '.join(attrs.names)}")


# -- commands ------------------------------------------------------------------

def cmd_prepare(args) -> int:
    data, split, attrs = prepare(args.interactions, args.attributes, args.format, args.min_user, args.min_item)
    save_prepared(args.out, data, split, attrs)
    print(f"users={data.n_users} items={data.n_items} interactions={len(data)}")
    return 0


def cmd_train(args) -> int:
    split, _ = _load_data(args)
    cfg = TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, neg_per_pos=args.neg_per_pos,
        seed=args.seed, loss=args.loss, weight_decay=args.weight_decay, dim=args.dim,
    )
    table, history = train_model(split.train, cfg)
    save_embeddings(args.out, table, {"train_config": config_dict(cfg), "history": history})
    rep = eval_ranking(table.as_float32(), split, (10,))
    print(f"saved {args.out}  M={table.M} N={table.N} d={table.d}  "
          f"final loss={history[-1]['loss']:.5f}  NDCG@10={rep.ndcg[10]:.4f} HR@10={rep.hr[10]:.4f}")
    return 0


def cmd_unlearn(args) -> int:
    split, attrs = _load_data(args)
    names = args.attr
    _need_attrs(attrs, names)
    if len(names) > 2:
        raise DatasetError("at most two attributes can be unlearned together")
    table = load_embeddings(args.emb)
    multi = len(names) == 2
    lr = args.lr if args.lr is not None else (MULTI_ATTR_LR if multi else SINGLE_ATTR_LR)
    cfg = UnlearnConfig(
        method=args.method, alpha=args.alpha, learning_rate=lr, epochs=args.epochs, seed=args.seed,
        reg=RegConfig(k=args.k, margin=args.margin, tau=args.tau), optimizer=args.optimizer,
        anchor_size=args.anchor_size, max_group_members=args.max_group_members, bandwidth=args.bandwidth,
        pairwise=args.pairwise, freeze_items=args.freeze_items,
    )
    groups = [GroupIndex.from_labels(attrs[n], attrs.cardinalities[n]) for n in names]
    if multi:
        res = unlearn_multi(table, groups, [args.alpha1, args.alpha2], cfg, train=split.train)
    else:
        res = unlearn(table, groups[0], cfg, train=split.train)
    meta = {"unlearn_config": config_dict(cfg), "attributes": names, "bandwidth": res.kernel.bandwidth,
            "mmd_evals": res.counter.mmd_evals, "diverged": res.diverged}
    if multi:
        meta["alphas"] = [args.alpha1, args.alpha2]
    save_embeddings(args.out, res.table, meta)
    trace_path = args.trace or str(args.out) + ".trace.csv"
    write_trace(trace_path, res.trace)
    last = res.trace[-1]
    summary = "  ".join(f"{k}={v:.6g}" for k, v in last.items() if k != "epoch")
    print(f"saved {args.out} and {trace_path} ({len(res.trace)} epochs)  {summary}")
    if res.diverged:
        print(f"error: {res.diagnostic}; wrote the last finite state", file=sys.stderr)
        return 1
    return 0


def cmd_attack(args) -> int:
    split, attrs = _load_data(args)
    names = args.attr
    _need_attrs(attrs, names)
    table = load_embeddings(args.emb)
    cfg = AttackerConfig(hidden=args.arch, optimizer=args.optimizer, class_balanced=not args.unbalanced)
    reports = []
    for n in names:
        rep = evaluate_attack(table, attrs[n], folds=args.folds, seed=args.seed, attribute=n, cfg=cfg,
                              repeats=args.repeats)
        reports.append(rep)
        print(f"{n:<10} F1={rep.f1_mean:.4f}  BAcc={rep.bacc_mean:.4f}", file=sys.stderr)
    payload = reports[0].to_dict() if len(reports) == 1 else {"reports": [r.to_dict() for r in reports]}
    if len(reports) > 1:
        baccs = [r.bacc_mean for r in reports]
        by_card = wbacc(baccs, [attrs.cardinalities[n] for n in names])
        by_users = wbacc(baccs, [len(attrs[n]) for n in names])
        payload["wbacc"] = by_card
        # the alternative weighting is reported only when it actually matters
        if abs(by_card - by_users) > 0.01:
            payload["wbacc_user_count_weights"] = by_users
        print(f"wBAcc={by_card:.4f}", file=sys.stderr)
    _write_json(args.out, payload)
    return 0


def cmd_evaluate(args) -> int:
    split, _ = _load_data(args)
    table = load_embeddings(args.emb)
    rep = eval_ranking(table, split, args.ks)
    if args.reference:
        ref = load_embeddings(args.reference)
        excl = split.train.user_items()
        rep.rbo10_vs_original = mean_rbo(topk_lists(ref, excl, 10), topk_lists(table, excl, 10), 0.9)
    print(rep.table(), file=sys.stderr)
    _write_json(args.out, rep.to_dict())
    return 0


def cmd_perturb_study(args) -> int:
    split, _ = _load_data(args)
    table = load_embeddings(args.emb)
    rows = perturbation_study(table, split.train, trials=args.trials, budget=args.budget, seed=args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "l2", "l_r", "rbo10"])
        for t, (l2, lr, r) in enumerate(rows):
            w.writerow([t, f"{l2:.10g}", f"{lr:.10g}", f"{r:.10g}"])
    arr = np.asarray(rows)
    summary = {"trials": len(rows), "budget": args.budget}
    try:
        summary["corr_l2_rbo"] = pearson(arr[:, 0], arr[:, 2])
        summary["corr_lr_rbo"] = pearson(arr[:, 1], arr[:, 2])
        summary["degenerate"] = False
        summary["ordering_holds"] = summary["corr_lr_rbo"] < summary["corr_l2_rbo"] < 0
    except ValueError:
        summary["degenerate"] = True
    _write_json(args.summary, summary)
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrunlearn", description="Attribute unlearning for MF recommenders.")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="filter and split raw data")
    sp.add_argument("--interactions", required=True)
    sp.add_argument("--attributes")
    sp.add_argument("--format", choices=FORMATS, default="ml100k")
    sp.add_argument("--min-user", type=int, default=5)
    sp.add_argument("--min-item", type=int, default=5)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_prepare)

    defaults = TrainConfig()
    sp = sub.add_parser("train", help="train MF embeddings")
    sp.add_argument("--data", required=True, help="prepared directory")
    sp.add_argument("--out", required=True, help="EMB1 output path")
    sp.add_argument("--loss", choices=("bpr", "ce"), default=defaults.loss)
    sp.add_argument("--dim", type=int, default=defaults.dim)
    sp.add_argument("--epochs", type=int, default=defaults.epochs)
    sp.add_argument("--lr", type=float, default=defaults.learning_rate)
    sp.add_argument("--batch-size", type=int, default=defaults.batch_size)
    sp.add_argument("--neg-per-pos", type=int, default=defaults.neg_per_pos)
    sp.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    udef = UnlearnConfig()
    sp = sub.add_parser("unlearn", help="unlearn attribute(s) from user embeddings")
    sp.add_argument("--data", required=True)
    sp.add_argument("--emb", required=True, help="trained EMB1 file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    sp.add_argument("--method", choices=("d2d_fr", "d2d_pr"), default=udef.method)
    sp.add_argument("--attr", action="append", required=True, help="attribute name; give twice for two")
    sp.add_argument("--alpha", type=float, default=udef.alpha)
    sp.add_argument("--alpha1", type=float, default=1e4)
    sp.add_argument("--alpha2", type=float, default=5e3)
    sp.add_argument("--lr", type=float, default=None,
                    help=f"step size (default {SINGLE_ATTR_LR:g} single, {MULTI_ATTR_LR:g} two attributes)")
    sp.add_argument("--epochs", type=int, default=udef.epochs)
    sp.add_argument("--optimizer", choices=("sgd", "adam"), default=udef.optimizer)
    sp.add_argument("--k", type=int, default=udef.reg.k)
    sp.add_argument("--margin", type=float, default=udef.reg.margin)
    sp.add_argument("--tau", type=float, default=udef.reg.tau)
    sp.add_argument("--anchor-size", type=int, default=udef.anchor_size)
    sp.add_argument("--max-group-members", type=int, default=udef.max_group_members)
    sp.add_argument("--bandwidth", type=float, default=None)
    sp.add_argument("--pairwise", action="store_true", help="direct class-vs-class MMD instead of the anchor")
    sp.add_argument("--freeze-items", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_unlearn)

    sp = sub.add_parser("attack", help="attribute-inference attack")
    sp.add_argument("--data", required=True)
    sp.add_argument("--emb", required=True)
    sp.add_argument("--attr", action="append", required=True)
    sp.add_argument("--arch", type=_arch, default=(100,), help="hidden widths, e.g. 100 or 100,64; empty for none")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    sp.add_argument("--unbalanced", action="store_true", help="do not reweight classes")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="JSON report path (default: stdout)")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("evaluate", help="full-ranking recommendation quality")
    sp.add_argument("--data", required=True)
    sp.add_argument("--emb", required=True)
    sp.add_argument("--ks", type=_ks, default=[5, 10])
    sp.add_argument("--reference", help="EMB1 file to compare top-10 lists against (RBO)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("perturb-study", help="regularizer vs. list-similarity correlation study")
    sp.add_argument("--data", required=True)
    sp.add_argument("--emb", required=True)
    sp.add_argument("--trials", type=int, default=300)
    sp.add_argument("--budget", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="per-trial CSV")
    sp.add_argument("--summary", help="JSON summary path (default: stdout)")
    sp.set_defaults(func=cmd_perturb_study)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = json.loads(Path(known.config).read_text())
    except FileNotFoundError:
        parser.error(f"config file not found: {known.config}")
    except json.JSONDecodeError as exc:
        parser.error(f"config file {known.config} is not valid JSON: {exc}")
    if not isinstance(values, dict):
        parser.error("config file must hold a JSON object")
    cmd = next((a for a in rest if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if cmd in subparsers.choices:
        target = subparsers.choices[cmd]
        known_dests = {a.dest for a in target._actions}
        unknown = sorted(set(values) - known_dests)
        if unknown:
            parser.error(f"unknown config key(s) for {cmd}: {', '.join(unknown)}")
        for action in target._actions:
            if action.dest in values:
                action.required = False
        target.set_defaults(**values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, DatasetError, ValueError, TrainingDivergedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
