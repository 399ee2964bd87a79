"""Command-line front end: ``ccpalab <subcommand> ...``.

Defaults come from an optional JSON run config (``--config`` or the
``CCPALAB_CONFIG`` environment variable); explicit flags override it. Every
command that writes an artifact also writes ``<artifact>.provenance.json``
with the resolved config, seeds, grid fingerprint and artifact digests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .case_model import build_measurement_model, load_case, to_native
from .datagen import GenConfig, generate_dataset, generate_meta_tasks, load_dataset, save_dataset
from .errors import CcpaError, ConfigError, DataError
from .evaluation import APPROACHES, VARIANTS, ExperimentConfig, metrics, run_comparison
from .meta import MetaConfig, MetaInit, fine_tune, maml_pretrain
from .mtd import DEFAULT_CANDIDATES, DEFAULT_ETA, apply_mtd, place_dfacts, plan_report, select_perturbation
from .neuralnet import TrainConfig, init_model, load_checkpoint, predict, save_checkpoint, train

CONFIG_ENV = "CCPALAB_CONFIG"


# -- run config ------------------------------------------------------------------


@dataclass(frozen=True)
class MtdSettings:
    eta: float = DEFAULT_ETA
    n_candidates: int = DEFAULT_CANDIDATES
    dfacts_lines: list | None = None

    def __post_init__(self):
        if not 0 <= self.eta < 1:
            raise ConfigError("mtd.eta must lie in [0, 1)")
        if self.n_candidates < 1:
            raise ConfigError("mtd.n_candidates must be positive")


@dataclass(frozen=True)
class RunConfig:
    case: str = "ieee14"
    gen: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    mtd: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)

    def gen_config(self, **kw) -> GenConfig:
        return GenConfig(**{**self.gen, **kw})

    def train_config(self, **kw) -> TrainConfig:
        return TrainConfig(**{**self.train, **kw})

    def meta_config(self, **kw) -> MetaConfig:
        return MetaConfig(**{**self.meta, **kw})

    def mtd_settings(self, **kw) -> MtdSettings:
        return MtdSettings(**{**self.mtd, **kw})

    def experiment_config(self, **kw) -> ExperimentConfig:
        doc = {**self.experiment, **kw}
        doc.setdefault("meta", self.meta_config())
        return ExperimentConfig(**doc)

    def validate(self) -> None:
        """Build every section once so bad values fail before any work starts."""
        self.gen_config()
        self.train_config()
        self.meta_config()
        self.mtd_settings()
        self.experiment_config()


_SECTIONS = {
    "gen": GenConfig,
    "train": TrainConfig,
    "meta": MetaConfig,
    "mtd": MtdSettings,
    "experiment": ExperimentConfig,
}


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for section, cls in _SECTIONS.items():
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        allowed = {f.name for f in fields(cls)}
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
    cfg = RunConfig(**doc)
    try:
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid run config: {exc}") from exc
    return cfg


def load_run_config(path: str | None) -> RunConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return parse_run_config(doc)


# -- provenance ------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_provenance(out: Path, command: str, args: argparse.Namespace, record: dict, artifacts=()) -> Path:
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "artifacts": {str(p): _sha256(Path(p)) for p in artifacts if Path(p).exists()},
        **record,
    }
    path = out.with_name(out.name + ".provenance.json")
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
    return path


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


# -- subcommands -----------------------------------------------------------------


def _mtd_grid(grid, mtd: MtdSettings, seed: int):
    plan = place_dfacts(grid, mtd.dfacts_lines)
    pert = select_perturbation(grid, plan, mtd.eta, mtd.n_candidates, np.random.default_rng(seed))
    return apply_mtd(grid, pert), plan, pert


def cmd_parse_case(args, rc: RunConfig) -> int:
    grid = load_case(args.case or rc.case)
    model = build_measurement_model(grid)
    summary = {
        "N": grid.n_bus,
        "L": grid.n_branch,
        "m": model.m,
        "n_states": model.n,
        "slack_bus": grid.slack_id,
        "bridge_lines": sorted(grid.bridges()),
        "fingerprint": grid.fingerprint(),
    }
    print(f"N={grid.n_bus} L={grid.n_branch} m={model.m}")
    _emit(summary)
    if args.out:
        out = Path(args.out)
        out.write_text(to_native(grid))
        write_provenance(out, "parse-case", args, {"summary": summary}, [out])
    return 0


def cmd_gen_data(args, rc: RunConfig) -> int:
    grid = load_case(args.case or rc.case)
    overrides = {"master_seed": args.seed, "mtd_active": args.mtd}
    if args.n is not None:
        overrides["n_samples"] = args.n
    if args.variant:
        overrides["attack_mix"] = {args.variant: 1.0}
    cfg = rc.gen_config(**overrides)
    record = {"gen_config": cfg.to_dict(), "grid_fingerprint": grid.fingerprint()}
    if args.mtd:
        mtd = rc.mtd_settings(**_mtd_flags(args))
        physical, plan, pert = _mtd_grid(grid, mtd, args.seed)
        ds = generate_dataset(physical, None, cfg, attacker_view=grid, topology_id="mtd")
        record["mtd"] = {"settings": asdict(mtd), "plan": plan.to_dict(), "perturbation": pert.to_dict()}
    else:
        ds = generate_dataset(grid, None, cfg)
    out = save_dataset(ds, args.out)
    sidecar = out.with_name(out.stem + ".manifest.json")
    write_provenance(out, "gen-data", args, record, [out, sidecar])
    _emit({"out": str(out), "n_samples": len(ds), "data_sha256": _sha256(out)})
    return 0


def _mtd_flags(args) -> dict:
    kw = {}
    if getattr(args, "eta", None) is not None:
        kw["eta"] = args.eta
    if getattr(args, "candidates", None) is not None:
        kw["n_candidates"] = args.candidates
    if getattr(args, "dfacts", None):
        kw["dfacts_lines"] = [int(x) for x in args.dfacts.split(",")]
    return kw


def cmd_mtd_plan(args, rc: RunConfig) -> int:
    grid = load_case(args.case or rc.case)
    mtd = rc.mtd_settings(**_mtd_flags(args))
    _, plan, pert = _mtd_grid(grid, mtd, args.seed)
    report = plan_report(grid, plan, pert)
    print(report)
    if args.out:
        out = Path(args.out)
        out.write_text(report)
        write_provenance(out, "mtd-plan", args, {"settings": asdict(mtd), "seed": args.seed}, [out])
    return 0


def _train_overrides(args) -> dict:
    kw = {}
    for name in ("epochs", "lr", "batch_size", "seed", "weight_decay"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return kw


def cmd_train(args, rc: RunConfig) -> int:
    ds = load_dataset(args.data)
    cfg = rc.train_config(**_train_overrides(args))
    model = init_model(np.random.default_rng(cfg.seed), ds.z.shape[1], ds.y.shape[1])
    model, losses = train(model, ds, cfg)
    out = Path(args.out)
    save_checkpoint(model, out, cfg, seed=cfg.seed, loss_curve=losses, data_manifest=ds.manifest.get("manifest_sha256"))
    write_provenance(out, "train", args, {"train_config": asdict(cfg)}, [out, Path(args.data)])
    _emit({"out": str(out), "final_loss": losses[-1] if losses else None})
    return 0


def cmd_meta_train(args, rc: RunConfig) -> int:
    grid = load_case(args.case or rc.case)
    kw = {k: v for k, v in {"outer_iterations": args.iterations, "seed": args.seed}.items() if v is not None}
    mcfg = rc.meta_config(**kw)
    gen = rc.gen_config(attack_mix={args.variant: 1.0}, mtd_active=True)
    rng = np.random.default_rng(mcfg.seed)
    tasks = generate_meta_tasks(grid, args.topologies, args.per_topology, gen, rng, args.width)
    init = init_model(rng, grid.n_measurements, grid.n_branch)
    meta = maml_pretrain(tasks, mcfg, init)
    meta.provenance.update(variant=args.variant, grid_fingerprint=grid.fingerprint(), width=args.width)
    out = Path(args.out)
    meta.save(out)
    write_provenance(out, "meta-train", args, {"meta_config": asdict(mcfg), "gen_config": gen.to_dict()}, [out])
    _emit({"out": str(out), "final_query_loss": meta.provenance["query_loss_curve"][-1] if mcfg.outer_iterations else None})
    return 0


def cmd_fine_tune(args, rc: RunConfig) -> int:
    init = MetaInit.load(args.init)
    ds = load_dataset(args.data)
    if args.n is not None:
        ds = ds.subset(np.arange(min(args.n, len(ds))))
    cfg = rc.train_config(**_train_overrides(args))
    model, losses = fine_tune(
        init, ds, cfg.epochs, cfg.lr, batch_size=cfg.batch_size, weight_decay=cfg.weight_decay, seed=cfg.seed
    )
    out = Path(args.out)
    save_checkpoint(model, out, cfg, seed=cfg.seed, loss_curve=losses, meta=init.provenance)
    write_provenance(out, "fine-tune", args, {"train_config": asdict(cfg)}, [out, Path(args.init), Path(args.data)])
    _emit({"out": str(out), "final_loss": losses[-1] if losses else None})
    return 0


def cmd_evaluate(args, rc: RunConfig) -> int:
    model, _ = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    report = metrics(predict(model, ds.z), ds.y, args.threshold)
    report.config = {"model": args.model, "data": args.data}
    doc = report.to_dict()
    print(f"recall={report.recall:.2f}% precision={report.precision:.2f}%")
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps(doc, indent=1, sort_keys=True))
        write_provenance(out, "evaluate", args, {}, [out, Path(args.model), Path(args.data)])
    return 0


FAST_PROFILE = {
    "n_train": 1000,
    "n_test": 1000,
    "epochs": 20,
    "n_topologies": 10,
    "n_per_topology": 200,
    "meta": {
        "support_size": 64,
        "query_size": 128,
        "inner_steps": 3,
        "meta_batch_size": 4,
        "outer_iterations": 50,
    },
}


def cmd_reproduce_table2(args, rc: RunConfig) -> int:
    grid = load_case(args.case or rc.case)
    doc = dict(rc.experiment)
    if args.fast:
        fast = dict(FAST_PROFILE)
        fast["meta"] = MetaConfig(**{**rc.meta, **fast["meta"]})
        doc = {**fast, **doc}
    cfg = rc.experiment_config(**doc)
    seeds = [int(s) for s in args.seeds.split(",")]
    approaches = args.approaches.split(",") if args.approaches else list(APPROACHES)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)

    def progress(a, v, s, r):
        print(f"[{a} {v} seed={s}] recall={r.recall:.2f} precision={r.precision:.2f}", file=sys.stderr, flush=True)

    table = run_comparison(grid, cfg, seeds, approaches, variants, progress)
    print(table.text_table())
    out = Path(args.out)
    out.write_text(table.to_json())
    txt = out.with_suffix(".txt")
    txt.write_text(table.text_table() + "\n")
    write_provenance(out, "reproduce-table2", args, {"experiment": cfg.to_dict(), "seeds": seeds}, [out, txt])
    return 0


# -- parser ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        _diagnose("UsageError", message, 1)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccpalab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help=f"JSON run config (default: ${CONFIG_ENV})")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("parse-case", help="summarize a MATPOWER or native case")
    s.add_argument("case", nargs="?")
    s.add_argument("--out", help="write the case in native JSON form")
    s.set_defaults(func=cmd_parse_case)

    s = sub.add_parser("gen-data", help="generate a labeled attack dataset")
    s.add_argument("--case")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--mtd", action="store_true", help="attacker keeps the pre-MTD model")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eta", type=float)
    s.add_argument("--candidates", type=int)
    s.add_argument("--dfacts", help="comma-separated D-FACTS lines (default: spanning-tree complement)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("mtd-plan", help="place D-FACTS and pick a perturbation")
    s.add_argument("--case")
    s.add_argument("--eta", type=float)
    s.add_argument("--candidates", type=int)
    s.add_argument("--dfacts")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_mtd_plan)

    def train_flags(s):
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--weight-decay", type=float)
        s.add_argument("--seed", type=int)

    s = sub.add_parser("train", help="train the CNN from scratch")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("meta-train", help="MAML pretraining on randomized topologies")
    s.add_argument("--case")
    s.add_argument("--variant", choices=VARIANTS, default="full")
    s.add_argument("--topologies", type=int, default=100)
    s.add_argument("--per-topology", type=int, default=1000)
    s.add_argument("--width", type=float, default=0.2, help="relative reactance spread of the task topologies")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_meta_train)

    s = sub.add_parser("fine-tune", help="adapt a MAML initialization to new data")
    s.add_argument("--init", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--n", type=int, help="use only the first N samples")
    s.add_argument("--out", required=True)
    train_flags(s)
    s.set_defaults(func=cmd_fine_tune)

    s = sub.add_parser("evaluate", help="precision/recall of a checkpoint on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("reproduce-table2", help="run every approach/attack cell")
    s.add_argument("--case")
    s.add_argument("--fast", action="store_true", help="1000 training samples, 20 epochs, short MAML")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--approaches")
    s.add_argument("--variants")
    s.add_argument("--out", default="table2.json")
    s.set_defaults(func=cmd_reproduce_table2)
    return p


def _diagnose(kind: str, message: str, code: int) -> None:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = load_run_config(args.config)
        return args.func(args, rc)
    except CcpaError as exc:
        _diagnose(type(exc).__name__, str(exc), exc.exit_code)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        _diagnose("DataError", str(exc), DataError.exit_code)
        return DataError.exit_code
    except (TypeError, ValueError) as exc:
        _diagnose("ConfigError", str(exc), ConfigError.exit_code)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
