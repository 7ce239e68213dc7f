"""Command-line entry point: ``signa <command> ...``.

Every command that writes files also writes ``manifest.json`` next to them.
Options may come from ``--config file.json`` (keys are the long flag names
with dashes replaced by underscores); explicit flags win over the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ablation, data, gradcheck, metrics, model
from .semantics import DEFAULT_Q, LabelGraph, load_word_embeddings

log = logging.getLogger("signa")

# fallbacks used when neither the flag nor the config file sets a value
DEFAULTS = {
    "q": DEFAULT_Q, "signa": "on", "heads": 6, "layer": 2, "gnn": "sage", "gate": "sigmoid", "residual": "on",
    "seed": 0, "epochs": model.TrainConfig.epochs, "batch_size": model.TrainConfig.batch_size,
    "lr": model.TrainConfig.lr, "split": "test", "seeds": 3, "threshold": 0.5,
}


def _merge(args: argparse.Namespace) -> argparse.Namespace:
    cfg = {}
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
        unknown = set(cfg) - set(vars(args))
        if unknown:
            raise SystemExit(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key, value in vars(args).items():
        if value is None:
            setattr(args, key, cfg.get(key, DEFAULTS.get(key)))
    return args


def _echo(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _on(flag: str) -> bool:
    return flag == "on"


# ----------------------------------------------------------------- commands


def cmd_graph_build(args) -> int:
    Y, vocab, _ = data.load_label_csv(args.labels)
    graph = LabelGraph.from_label_matrix(vocab, Y, args.q)
    paths = data.export_graph_artifacts(graph, args.out)
    data.write_manifest(args.out, "graph build", _echo(args), None, list(paths.values()))
    print(json.dumps(graph.summary()))
    return 0


def cmd_data_synth(args) -> int:
    spec = data.SynthSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else data.default_spec()
    if args.seed is not None:
        spec.seed = args.seed
    ds = data.synthesize_dataset(spec)
    paths = data.save_dataset(ds, args.out, spec)
    data.write_manifest(args.out, "data synth", {**_echo(args), "spec": spec.to_dict()}, spec.seed,
                        list(paths.values()))
    print(f"{len(ds)} images, {len(ds.vocabulary)} labels, digest {ds.digest()}")
    return 0


def _load_embeddings(args, vocabulary):
    if getattr(args, "embeddings", None):
        return load_word_embeddings(args.embeddings, vocabulary)
    return None


def cmd_train(args) -> int:
    ds = data.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    backbone = model.BackboneConfig(input_shape=ds.images.shape[1:], num_classes=len(ds.vocabulary))
    signa = None
    if _on(args.signa):
        signa = ablation.signa_for(backbone, len(ds.vocabulary), heads=args.heads, insertion_layer=args.layer,
                                   gnn=args.gnn, gate_mode=args.gate, residual=_on(args.residual), Q=args.q)
    tc = model.TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    run = ablation.train_and_evaluate(ds, signa, tc, backbone, _load_embeddings(args, ds.vocabulary),
                                      progress=lambda r: log.info("epoch %d loss %.5f val F1_e %.4f",
                                                                  r.epoch, r.train_loss, r.val_f1_example))
    res = run.result
    paths = [out / "history.csv", out / "best.ckpt", out / "last.ckpt"]
    model.write_history(paths[0], res.history)
    model.save_checkpoint(paths[1], res.model, res.best_epoch, res.rng_state, {"selected": "best_val"})
    last = model.clone_model(res.model)
    last.load_state_dict(res.last_state)
    model.save_checkpoint(paths[2], last, len(res.history) - 1, res.rng_state, {"selected": "last"})
    paths += metrics.write_report(out / "report", run.report)
    data.write_manifest(out, "train", _echo(args), args.seed, paths)
    print(f"best epoch {res.best_epoch}, test F1_e {run.report.F1_e:.4f}")
    return 0


def cmd_eval(args) -> int:
    net, header = model.load_checkpoint(args.checkpoint)
    ds = data.load_dataset(args.data)
    x, y = ds.part(args.split)
    rep = metrics.evaluate(model.predict(net, x, args.threshold), y, ds.vocabulary)
    baseline = None
    if args.baseline:
        base_net, _ = model.load_checkpoint(args.baseline)
        baseline = metrics.evaluate(model.predict(base_net, x, args.threshold), y, ds.vocabulary)
    paths = metrics.write_report(args.report, rep, baseline)
    data.write_manifest(args.report, "eval", _echo(args), None, paths)
    print(" ".join(f"{k}={100 * v:.2f}" for k, v in rep.aggregates().items()))
    return 0


def cmd_gradcheck(args) -> int:
    results, seconds = gradcheck.run_all(full=args.full)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.1f}s")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    ds = data.load_dataset(args.data)
    grid = ablation.AblationGrid(args.axis, seeds=tuple(range(args.seeds)))
    tc = model.TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs)
    ablation.run_ablation(grid, ds, tc, report=print)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "ablation.md", out / "ablation.json"]
    paths[0].write_text(ablation.ablation_table(grid))
    rows = [{"value": c.value, "mean_F1_e": c.mean if c.per_seed else None, "per_seed": c.per_seed,
             "error": c.error} for c in grid.rows()]
    paths[1].write_text(json.dumps({"axis": grid.axis, "seeds": list(grid.seeds), "cells": rows}, indent=2))
    data.write_manifest(out, "ablate", _echo(args), None, paths)
    print(paths[0].read_text(), end="")
    return 0


def cmd_report(args) -> int:
    lines = ["| run | epochs | best val F1_e | P_e | R_e | F1_e | F2_e | P_l | R_l | F1_l | F2_l |",
             "|---|---|---|---|---|---|---|---|---|---|---|"]
    for run in args.runs:
        d = Path(run)
        hist = model.read_history(d / "history.csv") if (d / "history.csv").exists() else []
        best = max((r.val_f1_example for r in hist), default=float("nan"))
        mpath = d / "report" / "metrics.json"
        if not mpath.exists():
            mpath = d / "metrics.json"
        agg = json.loads(mpath.read_text()) if mpath.exists() else {}
        keys = ("P_e", "R_e", "F1_e", "F2_e", "P_l", "R_l", "F1_l", "F2_l")
        cells = [f"{100 * agg[k]:.2f}" if k in agg else "-" for k in keys]
        lines.append(f"| {d.name} | {len(hist)} | {100 * best:.2f} | " + " | ".join(cells) + " |")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.md").write_text(text)
        data.write_manifest(out, "report", _echo(args), None, [out / "comparison.md"])
    print(text, end="")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="signa", description="Label-relation channel attention toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file supplying defaults for any flag")

    g = sub.add_parser("graph", help="label co-occurrence graphs").add_subparsers(dest="action", required=True)
    gb = g.add_parser("build", help="build N, P, G and the normalised adjacency from a label CSV")
    common(gb)
    gb.add_argument("--labels")
    gb.add_argument("--q", type=float)
    gb.add_argument("--out")
    gb.set_defaults(func=cmd_graph_build, required=("labels", "out"))

    d = sub.add_parser("data", help="synthetic datasets").add_subparsers(dest="action", required=True)
    ds = d.add_parser("synth", help="render a planted co-occurrence dataset")
    common(ds)
    ds.add_argument("--spec", help="SynthSpec JSON; the built-in default when omitted")
    ds.add_argument("--seed", type=int)
    ds.add_argument("--out")
    ds.set_defaults(func=cmd_data_synth, required=("out",))

    t = sub.add_parser("train", help="train a baseline or SIGNA model")
    common(t)
    t.add_argument("--data")
    t.add_argument("--signa", choices=("on", "off"))
    t.add_argument("--heads", type=int)
    t.add_argument("--layer", type=int)
    t.add_argument("--gnn", choices=("gcn", "sage", "gat"))
    t.add_argument("--gate", choices=("sigmoid", "linear"))
    t.add_argument("--residual", choices=("on", "off"))
    t.add_argument("--q", type=float)
    t.add_argument("--embeddings", help="GloVe-format text file; seeded random vectors when omitted")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train, required=("data", "out"))

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", help="second checkpoint reported alongside")
    e.add_argument("--data")
    e.add_argument("--split", choices=data.SPLITS)
    e.add_argument("--threshold", type=float)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval, required=("checkpoint", "data", "report"))

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gc.add_argument("--full", action="store_true", help="include every instance and the end-to-end model")
    gc.set_defaults(func=cmd_gradcheck, required=())

    a = sub.add_parser("ablate", help="sweep one SIGNA setting over several seeds")
    common(a)
    a.add_argument("--axis", choices=tuple(ablation.AXES))
    a.add_argument("--seeds", type=int)
    a.add_argument("--data")
    a.add_argument("--epochs", type=int)
    a.add_argument("--batch-size", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate, required=("axis", "data", "out"))

    r = sub.add_parser("report", help="compare finished runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report, required=())
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    func, required = args.func, args.required
    del args.func, args.required, args.verbose, args.command
    if hasattr(args, "action"):
        del args.action
    args = _merge(args)
    missing = [k for k in required if getattr(args, k) is None]
    if missing:
        parser.error("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    try:
        return func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
