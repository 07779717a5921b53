"""Command line entry point.

Exit status: 0 success, 1 validation error (bad flags, config, inputs), 2 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attacks import AttackDiverged, AttackBudget, save_attacked
from .data import generate_dataset
from .experiments import STRATEGIES, ExperimentConfig, SweepConfig, evaluate, from_dict, \
    make_manifest, merge_reports, offline_attack_sets, run_robustness_sweep, splits_for, strategy_comparison, \
    sweep_checks, sweep_metrics, train_strategy, write_manifest
from .fusion import ArchSpec
from .gradcheck import TOLERANCE, run_suite
from .io import CheckpointError, dumps_json, encode_tensors, load_checkpoint, read_json, save_checkpoint, \
    store_digest, write_json
from .model import Composite
from .search import SearchConfig, SearchDiverged, hds_search, search_report
from .training import TrainingDiverged

log = logging.getLogger("robustfuse")

CONFIG_SECTIONS = ("experiment", "search", "sweep")
SWEEP_KEYS = ("ops", "rules", "backbone", "op_rule", "budgets")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def load_config(path: str | None, seed: int | None) -> dict:
    raw = read_json(path) if path else {}
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config sections: {unknown}")
    exp = ExperimentConfig.from_json(raw.get("experiment", {}))
    search = from_dict(SearchConfig, raw.get("search", {}))
    sweep = dict(raw.get("sweep", {}))
    bad = sorted(set(sweep) - set(SWEEP_KEYS))
    if bad:
        raise ValueError(f"unknown sweep keys: {bad}")
    if seed is not None:
        exp = replace(exp, scene=replace(exp.scene, seed=seed), seeds=(seed,))
        search = replace(search, seed=seed)
    return {"experiment": exp, "search": search, "sweep": sweep}


def config_json(cfg: dict) -> dict:
    return {"experiment": cfg["experiment"].to_json(), "search": cfg["search"].to_json(), "sweep": cfg["sweep"]}


# --------------------------------------------------------------------------
# commands; each returns a manifest whose "metrics" must replay bit-exactly
# --------------------------------------------------------------------------


def cmd_gen_data(cfg, args, out: Path) -> dict:
    exp = cfg["experiment"]
    data = generate_dataset(exp.scene, args.n)
    (out / "dataset.bin").write_bytes(encode_tensors({"x": data.x, "y": data.y, "z": data.z.astype(np.float32)}))
    h = data.hash()
    print(f"dataset {args.n} samples sha256 {h}")
    return {"dataset_hash": h, "n": args.n, "scene": exp.scene.to_json()}


def cmd_grad_check(cfg, args, out: Path) -> dict:
    errors = run_suite(args.seeds, args.coords)
    for name, err in errors.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:28s} {err:.3e} {status}")
    ok = all(v <= TOLERANCE for v in errors.values())
    if not ok:
        raise ValidationFailure("gradient check exceeded tolerance", {"errors": errors, "passed": False})
    return {"errors": errors, "passed": ok, "tolerance": TOLERANCE}


def _sweep_budgets(cfg) -> list:
    raw = cfg["sweep"].get("budgets")
    if raw is None:
        return cfg["experiment"].budgets()
    return [AttackBudget(e, steps=s) for e, s in raw]


def cmd_analyze(cfg, args, out: Path) -> dict:
    sw = cfg["sweep"]
    sc = SweepConfig(cfg["experiment"], sw.get("backbone", "3-RB"), sw.get("op_rule", "CC"))
    ops = sw.get("ops", ["3-C", "3-DC", "3-RB", "3-DB", "SA", "CA"])
    rules = sw.get("rules", ["MAX", "WA", "AA", "SUM", "CC", "DIRECT"])
    budgets = _sweep_budgets(cfg)
    report = run_robustness_sweep(ops, rules, budgets, sc)
    key = "clean" if not budgets else f"eps={budgets[0].epsilon:.6g},steps={budgets[0].steps}"
    checks = sweep_checks(report, key)
    for k, v in checks.items():
        print(f"{k}: {'pass' if v else 'fail'}")
    return {"metrics": sweep_metrics(report), "checks": checks, "failures": report["failures"]}


def cmd_attack_gen(cfg, args, out: Path) -> dict:
    exp = cfg["experiment"]
    splits = splits_for(exp)
    seed = exp.seeds[0]
    _, sets, src = offline_attack_sets(exp, splits["train"], seed)
    save_checkpoint(out / "source.ckpt", src.params,
                    {"arch": exp.source_arch().to_json(), "seg_width": exp.seg_width})
    hashes = {}
    for s in sets:
        save_attacked(s, out / "attacked")
        hashes[f"level{s.level}_{s.split}"] = s.data.hash()
        print(f"level {s.level} {s.split:5s} eps {s.budget.epsilon:.6f} n={len(s.data)} {s.data.hash()[:16]}")
    return {"attacked_hashes": hashes, "source_checkpoint": store_digest(src.params)}


def cmd_search(cfg, args, out: Path) -> dict:
    exp, sc = cfg["experiment"], cfg["search"]
    splits = splits_for(exp)
    relax, history = hds_search(sc, splits["train"], splits["val"])
    report = search_report(relax, history, sc)
    write_json(out / "search_report.json", report)
    print("selected:", " ".join(report["choice"]))
    return {"choice": report["choice"], "alpha": report["relaxation"]["alpha"], "arch": report["arch"],
            "final_val_loss": history["val"][-1] if history["val"] else None}


def _strategy(name: str) -> str:
    table = {s.lower(): s for s in STRATEGIES}
    if name.lower() not in table:
        raise ValueError(f"unknown strategy {name!r}; expected one of normal, sat, aat")
    return table[name.lower()]


def cmd_train(cfg, args, out: Path) -> dict:
    exp = cfg["experiment"]
    strategy = _strategy(args.strategy)
    splits = splits_for(exp)
    seed = exp.seeds[0]
    run = train_strategy(strategy, exp, splits, seed)
    run.save(out / f"run_{strategy.lower()}")
    meta = {"arch": exp.arch.to_json(), "seg_width": exp.seg_width, "strategy": strategy}
    save_checkpoint(out / "model.ckpt", run.params, meta)
    digest = store_digest(run.params)
    print(f"trained {strategy}: checkpoint {out / 'model.ckpt'} digest {digest}")
    return {"strategy": strategy, "checkpoint_digest": digest,
            "final_loss": run.curves["joint"]["loss"][-1]}


def model_from_checkpoint(path) -> tuple[Composite, object, dict]:
    store, meta = load_checkpoint(path)
    if "arch" not in meta:
        raise CheckpointError(f"{path}: checkpoint does not record its architecture")
    model = Composite.from_arch(ArchSpec.from_json(meta["arch"]), seg_width=meta.get("seg_width", 16))
    model.check_params(store)
    return model, store, meta


def cmd_eval(cfg, args, out: Path) -> dict:
    exp = cfg["experiment"]
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    args.checkpoint = str(ckpt.resolve())  # recorded so a replay finds the same file
    model, store, meta = model_from_checkpoint(ckpt)
    test = splits_for(exp)["test"]
    seed = exp.seeds[0]
    result = {"checkpoint_digest": store_digest(store), "clean": evaluate(model, store, test, None, seed=seed)}
    if args.eps is not None:
        budget = AttackBudget(args.eps, steps=args.steps)
        result["attacked"] = evaluate(model, store, test, budget, seed=seed)
    write_json(out / "metrics.json", result)
    line = f"clean mIoU {result['clean']['miou']:.4f}"
    if "attacked" in result:
        line += f"  attacked mIoU {result['attacked']['miou']:.4f}"
    print(line)
    return result


def cmd_compare(cfg, args, out: Path) -> dict:
    r = strategy_comparison(cfg["experiment"])
    return {"metrics": r["metrics"], "dataset_hashes": r["dataset_hashes"]}


def cmd_report(cfg, args, out: Path) -> dict:
    text = merge_reports(args.manifests)
    target = out / "report.csv"
    target.write_text(text)
    print(f"wrote {target} ({max(text.count(chr(10)) - 1, 0)} rows)")
    return {"rows": max(text.count("\n") - 1, 0)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "grad-check": cmd_grad_check,
    "analyze": cmd_analyze,
    "attack-gen": cmd_attack_gen,
    "search": cmd_search,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "report": cmd_report,
}


class ValidationFailure(Exception):
    def __init__(self, msg, metrics=None):
        super().__init__(msg)
        self.metrics = metrics


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robustfuse", description="Robust fusion/segmentation experiments")
    p.add_argument("--config", help="JSON config with sections experiment, search, sweep")
    p.add_argument("--seed", type=int, help="overrides data, training and search seeds")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--n", type=int, default=64)
    g = sub.add_parser("grad-check", help="finite-difference suite")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--coords", type=int, default=24)
    sub.add_parser("analyze", help="operation/rule robustness sweep")
    sub.add_parser("attack-gen", help="offline multi-level attacked datasets")
    sub.add_parser("search", help="architecture search")
    g = sub.add_parser("train", help="train with one strategy")
    g.add_argument("--strategy", required=True)
    g = sub.add_parser("eval", help="clean and attacked metrics of a checkpoint")
    g.add_argument("--checkpoint")
    g.add_argument("--eps", type=str, help="l-inf budget, float or fraction such as 4/255")
    g.add_argument("--steps", type=int, default=5)
    sub.add_parser("compare", help="normal / SAT / AAT on identical data and seeds")
    g = sub.add_parser("report", help="merge manifests into a CSV")
    g.add_argument("manifests", nargs="+")
    g = sub.add_parser("replay", help="re-run a manifest and compare its metrics")
    g.add_argument("manifest")
    return p


def _args_json(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("config", "out", "verbose", "threads")}


def execute(command: str, cfg: dict, args, out: Path, threads: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=threads):
        metrics = COMMANDS[command](cfg, args, out)
    extra = {"command": command, "args": _args_json(args), "threads": threads}
    manifest = make_manifest(command, config_json(cfg), metrics, extra)
    write_manifest(out / f"{command}_manifest.json", manifest)
    return manifest


def replay(manifest_path, out: Path | None = None) -> tuple[bool, dict, dict]:
    """Re-run the command recorded in a manifest single-threaded; compare metrics JSON."""
    m = read_json(manifest_path)
    extra = m.get("extra", {})
    command = extra.get("command")
    if command not in COMMANDS:
        raise ValueError(f"{manifest_path}: manifest does not record a replayable command")
    raw = m["config"]
    cfg = {
        "experiment": ExperimentConfig.from_json(raw["experiment"]),
        "search": from_dict(SearchConfig, raw["search"]),
        "sweep": raw.get("sweep", {}),
    }
    args = argparse.Namespace(**extra.get("args", {}))
    out = out or Path(manifest_path).parent / "replay"
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        metrics = COMMANDS[command](cfg, args, out)
    fresh = json.loads(dumps_json(metrics))
    return dumps_json(fresh) == dumps_json(m["metrics"]), m["metrics"], fresh


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        out = Path(args.out)
        if args.command == "replay":
            same, _, _ = replay(args.manifest)
            print("replay: identical metrics" if same else "replay: metrics differ")
            return 0 if same else 1
        if args.threads < 1:
            raise ValueError("--threads must be at least 1")
        cfg = load_config(args.config, args.seed)
        execute(args.command, cfg, args, out, args.threads)
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, SearchDiverged, AttackDiverged, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 2
    except ValidationFailure as e:
        print(f"failed: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
