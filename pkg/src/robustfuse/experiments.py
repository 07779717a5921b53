"""Evaluation, strategy comparison, operation/rule sweeps and replayable manifests."""
from __future__ import annotations

import csv
import hashlib
import io as _io
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import SOURCE_ARCH, AttackBudget, attack_batch, by_level, generate_offline_attack_set, \
    sample_seed, verify_attacked
from .autodiff import Tape
from .data import CLASS_NAMES, Dataset, SceneSpec, make_splits
from .fusion import ArchSpec, FusionRule, OpCode
from .io import SCHEMA_VERSION, read_json, write_json
from .model import Composite
from .seg import confusion_matrix, cross_entropy, iou_from_confusion
from .training import AATConfig, TrainingRun, adaptive_adversarial_train, normal_training, \
    standard_adversarial_train

STRATEGIES = ("normal", "SAT", "AAT")


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def from_dict(cls, d: dict | None):
    """Build a dataclass from a dict, rejecting unknown keys."""
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(**d)


@dataclass
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    n_train: int = 256
    n_val: int = 64
    n_test: int = 64
    arch: ArchSpec = field(default_factory=lambda: ArchSpec.uniform("3-DC", FusionRule("AA")))
    seg_width: int = 16
    aat: AATConfig = field(default_factory=AATConfig)
    # offline attacked sets: a SAT-trained source model, attacked at every level
    source_steps: int = 300
    source_base_channels: int = 16
    attack_samples: int = 64
    split_seed: int = 0
    eval_budgets: tuple = (("4/255", 5),)
    seeds: tuple = (0,)

    def __post_init__(self):
        for k in ("n_train", "n_val", "n_test", "attack_samples", "seg_width"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def budgets(self) -> list:
        return [AttackBudget(e, steps=s) for e, s in self.eval_budgets]

    def source_arch(self) -> ArchSpec:
        return ArchSpec(SOURCE_ARCH.slots, SOURCE_ARCH.rule, self.source_base_channels)

    def to_json(self) -> dict:
        return {
            "scene": self.scene.to_json(),
            "n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test,
            "arch": self.arch.to_json(),
            "seg_width": self.seg_width,
            "aat": self.aat.to_json(),
            "source_steps": self.source_steps,
            "source_base_channels": self.source_base_channels,
            "attack_samples": self.attack_samples,
            "split_seed": self.split_seed,
            "eval_budgets": [list(b) for b in self.eval_budgets],
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown experiment keys: {unknown}")
        if "scene" in d:
            d["scene"] = from_dict(SceneSpec, d["scene"])
        if "arch" in d:
            d["arch"] = ArchSpec.from_json(d["arch"])
        if "aat" in d:
            d["aat"] = from_dict(AATConfig, d["aat"])
        if "eval_budgets" in d:
            d["eval_budgets"] = tuple(tuple(b) for b in d["eval_budgets"])
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)


def splits_for(cfg: ExperimentConfig) -> dict:
    return make_splits(cfg.scene, cfg.n_train, cfg.n_val, cfg.n_test)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate(model: Composite, store, data: Dataset, budget: AttackBudget | None = None,
             chunk: int = 8, seed: int = 0) -> dict:
    """Per-class IoU, mIoU and mean cross-entropy, optionally under PGD."""
    model.check_params(store)
    K = model.head.K
    cm = np.zeros((K, K), dtype=np.int64)
    loss_sum = 0.0
    for start in range(0, len(data), chunk):
        b = data.batch(np.arange(start, min(start + chunk, len(data))))
        if budget is not None:
            b = attack_batch(model, store, b, AttackBudget(budget.epsilon, budget.eta, budget.steps,
                                                           sample_seed(seed, start), budget.random_start))
        tape = Tape()
        p = tape.bind(store, trainable=False)
        _, logits = model.forward(p, tape.const(b.x), tape.const(b.y))
        loss_sum += float(cross_entropy(logits, b.z).value) * len(b)
        cm += confusion_matrix(logits.value.argmax(axis=1), b.z, K)
    per_class, m = iou_from_confusion(cm)
    return {
        "per_class_iou": per_class,
        "miou": m,
        "loss": loss_sum / len(data),
        "epsilon": 0.0 if budget is None else budget.epsilon,
        "steps": 0 if budget is None else budget.steps,
    }


def evaluate_all(model, store, data, budgets: list, seed: int = 0) -> dict:
    out = {"clean": evaluate(model, store, data, None, seed=seed)}
    for b in budgets:
        out[f"eps={b.epsilon:.6g},steps={b.steps}"] = evaluate(model, store, data, b, seed=seed)
    return out


# --------------------------------------------------------------------------
# training strategies
# --------------------------------------------------------------------------


def offline_attack_sets(cfg: ExperimentConfig, train: Dataset, seed: int) -> tuple[dict, list, TrainingRun]:
    """SAT-train the source model and attack a fixed subset of the train split at every level."""
    src_model = Composite.from_arch(cfg.source_arch(), seg_width=cfg.seg_width)
    src_cfg = AATConfig(**{**asdict(cfg.aat), "joint_steps": cfg.source_steps, "seed": seed + 7919})
    src_run = standard_adversarial_train(src_model, train, src_cfg)
    subset = train.subset(np.arange(min(cfg.attack_samples, len(train))))
    levels = [AttackBudget(e, steps=cfg.aat.level_steps) for e in cfg.aat.levels]
    sets = generate_offline_attack_set(src_model, src_run.params, subset, levels, cfg.split_seed + seed,
                                       source_arch=cfg.source_arch())
    if not verify_attacked(sets, subset):
        raise AssertionError("offline attacked samples violate their budget")
    return by_level(sets), sets, src_run


def train_strategy(strategy: str, cfg: ExperimentConfig, splits: dict, seed: int, attacked=None) -> TrainingRun:
    model = Composite.from_arch(cfg.arch, seg_width=cfg.seg_width)
    aat = AATConfig(**{**asdict(cfg.aat), "seed": seed})
    if strategy == "normal":
        return normal_training(model, splits["train"], aat)
    if strategy == "SAT":
        return standard_adversarial_train(model, splits["train"], aat)
    if strategy == "AAT":
        if attacked is None:
            attacked, _, _ = offline_attack_sets(cfg, splits["train"], seed)
        return adaptive_adversarial_train(model, splits["train"], attacked, aat)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def strategy_comparison(cfg: ExperimentConfig, strategies=STRATEGIES, log=print) -> dict:
    """Train each strategy per seed on identical data and evaluate clean and attacked mIoU."""
    splits = splits_for(cfg)
    model = Composite.from_arch(cfg.arch, seg_width=cfg.seg_width)
    results: dict = {s: {} for s in strategies}
    provenance: dict = {}
    for seed in cfg.seeds:
        attacked = None
        if "AAT" in strategies:
            attacked, sets, src = offline_attack_sets(cfg, splits["train"], seed)
            provenance[str(seed)] = [s.manifest()["provenance"] | {"level": s.level, "split": s.split,
                                                                   "dataset_hash": s.data.hash()} for s in sets]
        for strat in strategies:
            t0 = time.perf_counter()
            run = train_strategy(strat, cfg, splits, seed, attacked)
            metrics = evaluate_all(model, run.params, splits["test"], cfg.budgets(), seed)
            results[strat][str(seed)] = metrics
            if log:
                summary = ", ".join(f"{k}: {v['miou']:.4f}" for k, v in metrics.items())
                log(f"[seed {seed}] {strat:6s} {summary} ({time.perf_counter() - t0:.0f}s)")
    return {"metrics": results, "provenance": provenance,
            "dataset_hashes": {k: v.hash() for k, v in splits.items()}}


def median_miou(results: dict, strategy: str, key: str) -> float:
    return float(np.median([m[key]["miou"] for m in results[strategy].values()]))


# --------------------------------------------------------------------------
# operation / rule sweep
# --------------------------------------------------------------------------


@dataclass
class SweepConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    backbone: str = "3-RB"  # operation used when comparing rules
    op_rule: str = "CC"  # rule used when comparing operations


def variant_arch(kind: str, value, sc: SweepConfig) -> ArchSpec:
    C = sc.experiment.arch.base_channels
    if kind == "op":
        return ArchSpec.uniform(value, FusionRule(sc.op_rule), C)
    rule = value if isinstance(value, FusionRule) else FusionRule(value)
    return ArchSpec.uniform(sc.backbone, rule, C)


def run_robustness_sweep(ops: list, rules: list, budgets: list, sc: SweepConfig, log=print) -> dict:
    """SAT-train every operation (with the concatenation rule) and every rule (with
    the backbone operation); evaluate clean and attacked mIoU per budget and seed."""
    cfg = sc.experiment
    splits = splits_for(cfg)
    variants = [("op", OpCode.parse(o) if isinstance(o, str) else o) for o in ops]
    variants += [("rule", FusionRule(r) if isinstance(r, str) else r) for r in rules]
    rows, failures = [], []
    for kind, value in variants:
        vid = f"{kind}:{value.name}"
        arch = variant_arch(kind, value, sc)
        model = Composite.from_arch(arch, seg_width=cfg.seg_width)
        per_seed = {}
        for seed in cfg.seeds:
            try:
                aat = AATConfig(**{**asdict(cfg.aat), "seed": seed})
                run = standard_adversarial_train(model, splits["train"], aat)
                per_seed[str(seed)] = evaluate_all(model, run.params, splits["test"], budgets, seed)
            except Exception as e:  # recorded, sweep continues
                failures.append({"variant": vid, "seed": seed, "error": f"{type(e).__name__}: {e}"})
        rows.append({"variant": vid, "kind": kind, "arch": arch.to_json(), "metrics": per_seed})
        if log and per_seed:
            meds = {k: np.median([m[k]["miou"] for m in per_seed.values()]) for k in next(iter(per_seed.values()))}
            log(f"{vid:12s} " + ", ".join(f"{k}: {v:.4f}" for k, v in meds.items()))
    return {"rows": rows, "failures": failures, "budgets": [b.to_json() for b in budgets]}


def sweep_median(report: dict, variant: str, key: str) -> float:
    row = next(r for r in report["rows"] if r["variant"] == variant)
    return float(np.median([m[key]["miou"] for m in row["metrics"].values()]))


def sweep_checks(report: dict, key: str) -> dict:
    """Directional checks: dilated >= plain conv; AA >= each of MAX, WA, SUM (attacked mIoU)."""
    have = {r["variant"] for r in report["rows"] if r["metrics"]}
    out = {}
    if {"op:3-DC", "op:3-C"} <= have:
        out["3-DC>=3-C"] = sweep_median(report, "op:3-DC", key) >= sweep_median(report, "op:3-C", key)
    for r in ("MAX", "WA", "SUM"):
        if {"rule:AA", f"rule:{r}"} <= have:
            out[f"AA>={r}"] = sweep_median(report, "rule:AA", key) >= sweep_median(report, f"rule:{r}", key)
    return out


# --------------------------------------------------------------------------
# manifests, reports, replay
# --------------------------------------------------------------------------


def make_manifest(kind: str, config: dict, metrics: dict, extra: dict | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "code_version": code_version(),
        "config": config,
        "metrics": metrics,
        "extra": extra or {},
        "timestamps": {"created": time.strftime("%Y-%m-%dT%H:%M:%S")},
    }


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(path, manifest)
    write_json(path.with_name(path.stem + "_metrics.json"), manifest["metrics"])
    return path


def metric_table(manifest: dict) -> dict:
    """variant -> seed -> budget -> metrics, for comparison, sweep and eval manifests."""
    m = manifest["metrics"]
    if isinstance(m.get("metrics"), dict):
        return m["metrics"]
    if "clean" in m:
        variant = manifest.get("extra", {}).get("args", {}).get("checkpoint") or manifest["kind"]
        seed = str(manifest["config"]["experiment"]["seeds"][0])
        return {variant: {seed: {k: m[k] for k in ("clean", "attacked") if k in m}}}
    return {}


def metric_rows(manifest: dict) -> list[dict]:
    """Long-format rows: one per variant x budget x seed."""
    rows = []
    for variant, per_seed in metric_table(manifest).items():
        for seed, by_budget in per_seed.items():
            for m in by_budget.values():
                row = {"schema_version": manifest["schema_version"], "kind": manifest["kind"],
                       "variant": variant, "epsilon": m["epsilon"], "steps": m["steps"], "seed": seed}
                for name, v in zip(CLASS_NAMES, m["per_class_iou"]):
                    row[f"iou_{name}"] = "" if v is None else v
                row["miou"] = m["miou"]
                rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def merge_reports(paths: list) -> str:
    """Merge manifests into one CSV; every manifest must carry the current schema version."""
    rows = []
    for p in paths:
        m = read_json(p)
        if m.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{p}: schema version {m.get('schema_version')} != {SCHEMA_VERSION}")
        rows.extend(metric_rows(m))
    return rows_to_csv(rows)


def sweep_metrics(report: dict) -> dict:
    return {r["variant"]: r["metrics"] for r in report["rows"]}
