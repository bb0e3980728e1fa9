"""Command-line driver: ``posfuse {env,gen,train,eval,matrix}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .channel_sim import Dataset, Environment, ScenarioSpec, default_environment, gen_dataset, load_environment, save_environment
from .errors import ConfigError, DataError, PosfuseError, TrainingError
from .evaluation import FUSION_METHODS, EvalConfig, Report, evaluate
from .fusion import DEFAULT_LAMBDA
from .training import MODES, ModelBundle, TrainConfig, train

logger = logging.getLogger("posfuse")

SUMMARY_COLUMNS = ["mode", "loss", "fusion", "scenario", "n_train", "seed", "ME", "AUSE", "IR", "runtime", "status"]


def _read_json(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return doc


def _environment(path: str | None) -> Environment:
    return default_environment() if path is None else load_environment(path)


def write_outputs(report: Report, out: Path) -> None:
    """report.json plus one sparsification CSV per method with curves."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    for name, res in report.methods.items():
        if res.curves is not None:
            (out / f"sparsification_{name}_{report.scenario}.csv").write_text(res.curves.to_csv())


# -- subcommands ----------------------------------------------------------------


def cmd_env(args) -> int:
    env = default_environment(seed=args.seed, n_antennas=args.antennas, n_subcarriers=args.subcarriers)
    save_environment(env, args.out)
    print(f"wrote {args.out}: {env.n_anchors} anchors, N_R={args.antennas}, N_C={args.subcarriers}")
    return 0


def cmd_gen(args) -> int:
    env = _environment(args.env)
    scenario = ScenarioSpec.parse(args.scenario)
    ds = gen_dataset(env, args.n_samples, scenario, seed=args.seed, test_fraction=args.test_fraction,
                     val_fraction=args.val_fraction)
    ds.save(args.out)
    n_tr, n_va, n_te = (len(ds.splits[k]) for k in ("train", "val", "test"))
    print(f"wrote {args.out}: {len(ds)} samples, train {n_tr}, val {n_va}, test {n_te}, "
          f"scenario {scenario.name}, sha256 {ds.content_hash()}")
    return 0


def _train_config(args) -> TrainConfig:
    doc = _read_json(args.config) if args.config else {}
    for key in ("mode", "loss", "epochs", "seed"):
        val = getattr(args, key)
        if val is not None:
            doc[key] = val
    if "epochs" in doc and "patience" not in doc:
        doc["patience"] = min(TrainConfig.patience, int(doc["epochs"]) - 1)
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = Dataset.load(args.dataset)
    bundle = train(ds, cfg)
    bundle.save(args.out)
    history = Path(args.history) if args.history else Path(str(args.out) + ".history.csv")
    history.write_text(bundle.history_csv())
    print(f"wrote {args.out} ({cfg.mode}/{cfg.loss}, {len(bundle.trunks)} trunk(s), {len(bundle.heads)} head(s), "
          f"{bundle.n_params} parameters) and {history}")
    print(f"final validation loss: {bundle.val_loss:.6g}")
    return 0


def cmd_eval(args) -> int:
    cfg = EvalConfig(tuple(args.fusion), args.T, args.lam, args.alert_limit, args.seed, not args.no_ir)
    bundle = ModelBundle.load(args.bundle)
    ds = Dataset.load(args.dataset)
    ref = Dataset.load(args.static) if args.static else None
    report = evaluate(bundle, ds, cfg, ref)
    write_outputs(report, Path(args.out))
    print(f"{report.mode}/{report.loss} on {report.scenario} (blocked {list(report.blocked) or 'none'})")
    for name, res in report.methods.items():
        print(f"  {name:5s} ME {res.me:.4f}  AUSE {_fmt(res.ause)}  gamma {_fmt(res.gamma)}  IR {_fmt(res.ir)}")
    print(f"wrote {Path(args.out) / 'report.json'}")
    return 0


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


# -- experiment matrix ---------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """Cross-product of training regimes, losses, scenarios, sizes and seeds.

    ``n_train`` counts the training pool (train plus validation); every size
    shares the same ``n_test`` test positions.
    """

    output_dir: str
    environment: str | None = None
    scenarios: tuple[str, ...] = ("static",)
    modes: tuple[str, ...] = ("stl", "mtl")
    losses: tuple[str, ...] = ("nll",)
    fusions: tuple[str, ...] = FUSION_METHODS
    n_train: tuple[int, ...] = (1000, 2000, 5000)
    seeds: tuple[int, ...] = (0,)
    n_test: int = 500
    train: dict = field(default_factory=dict)
    T: int = 30
    lam: float = DEFAULT_LAMBDA
    alert_limit: float = 1.0

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> ExperimentSpec:
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment options: {sorted(unknown)}")
        if "output_dir" not in doc:
            raise ConfigError("experiment spec needs an output_dir")
        doc = dict(doc)
        for key in ("scenarios", "modes", "losses", "fusions", "n_train", "seeds"):
            if key in doc:
                if not isinstance(doc[key], list):
                    raise ConfigError(f"{key} must be a list")
                doc[key] = tuple(doc[key])
        if base is not None:
            for key in ("output_dir", "environment"):
                if doc.get(key) is not None and not Path(doc[key]).is_absolute():
                    doc[key] = str(base / doc[key])
        spec = cls(**doc)
        spec.validate()
        return spec

    def validate(self) -> None:
        if not self.modes or not self.fusions or not self.losses or not self.scenarios:
            raise ConfigError("modes, losses, fusions and scenarios must be non-empty")
        if not self.n_train or not self.seeds:
            raise ConfigError("n_train and seeds must be non-empty")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}")
        EvalConfig(self.fusions, self.T, self.lam, self.alert_limit)
        if "mode" in self.train or "loss" in self.train or "seed" in self.train:
            raise ConfigError("mode, loss and seed are matrix axes, not training options")
        for mode in self.modes:
            for loss in self.losses:
                self.train_config(mode, loss, self.seeds[0])
        if self.n_test < 2 or any(n < 2 for n in self.n_train):
            raise ConfigError("n_train and n_test must be at least 2")
        for s in self.scenarios:
            ScenarioSpec.parse(s)

    def train_config(self, mode: str, loss: str, seed: int) -> TrainConfig:
        doc = {"epochs": TrainConfig.epochs, **self.train, "mode": mode, "loss": loss, "seed": seed}
        if "patience" not in self.train:
            doc["patience"] = min(TrainConfig.patience, int(doc["epochs"]) - 1)
        return TrainConfig.from_dict(doc)


def _hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


class _Matrix:
    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.out = Path(spec.output_dir)
        self.env = _environment(spec.environment)
        for s in spec.scenarios:
            ScenarioSpec.parse(s).validate(self.env)
        self.rows: list[dict] = []
        self.failures: list[PosfuseError] = []

    def dataset(self, scenario: str, n_train: int, seed: int) -> Dataset:
        key = _hash(["dataset", self.env.digest().hex(), scenario, n_train, self.spec.n_test, seed, __version__])[:16]
        path = self.out / "datasets" / f"{key}.pfds"
        if path.exists():
            return Dataset.load(path)
        n = n_train + self.spec.n_test
        ds = gen_dataset(self.env, n, ScenarioSpec.parse(scenario), seed=seed, test_fraction=self.spec.n_test / n)
        path.parent.mkdir(parents=True, exist_ok=True)
        ds.save(path)
        return ds

    def bundle(self, cfg: TrainConfig, ds: Dataset) -> tuple[ModelBundle, float]:
        key = _hash(["bundle", cfg.to_dict(), ds.content_hash(), __version__])[:16]
        path = self.out / "models" / f"{key}.pfmb"
        timing = path.with_suffix(".timing.json")
        if path.exists() and timing.exists():
            return ModelBundle.load(path), json.loads(timing.read_text())["seconds"]
        t0 = time.perf_counter()
        b = train(ds, cfg)
        seconds = time.perf_counter() - t0
        path.parent.mkdir(parents=True, exist_ok=True)
        b.save(path)
        path.with_suffix(".history.csv").write_text(b.history_csv())
        timing.write_text(json.dumps({"seconds": seconds}))
        return b, seconds

    def run(self) -> int:
        spec = self.spec
        for n_train in spec.n_train:
            for seed in spec.seeds:
                for mode in spec.modes:
                    for loss in spec.losses:
                        for scenario in spec.scenarios:
                            self.cell(mode, loss, scenario, n_train, seed)
        self.write_summary()
        return self.failures[0].exit_code if self.failures else 0

    def cell(self, mode: str, loss: str, scenario: str, n_train: int, seed: int) -> None:
        spec = self.spec
        name = f"{mode}-{loss}-{ScenarioSpec.parse(scenario).name}-n{n_train}-s{seed}"
        cell_dir = self.out / "cells" / name
        eval_cfg = EvalConfig(spec.fusions, spec.T, spec.lam, spec.alert_limit, seed)
        cfg = spec.train_config(mode, loss, seed)
        cell_hash = _hash([name, cfg.to_dict(), eval_cfg.__dict__, self.env.digest().hex(), spec.n_test, __version__])
        report_path = cell_dir / "report.json"
        timing_path = cell_dir / "timing.json"
        if report_path.exists() and timing_path.exists():
            doc = json.loads(report_path.read_text())
            if doc.get("provenance", {}).get("cell_hash") == cell_hash:
                logger.info("skipping completed cell %s", name)
                self.add_rows(doc, mode, loss, scenario, n_train, seed, json.loads(timing_path.read_text())["seconds"])
                return
        logger.info("running cell %s", name)
        try:
            static = self.dataset("static", n_train, seed)
            ds = static if ScenarioSpec.parse(scenario).is_static else self.dataset(scenario, n_train, seed)
            bundle, train_s = self.bundle(cfg, static)
            t0 = time.perf_counter()
            report = evaluate(bundle, ds, eval_cfg, static)
            runtime = train_s + time.perf_counter() - t0
        except PosfuseError as exc:
            logger.error("cell %s failed: %s", name, exc)
            self.failures.append(exc)
            for method in eval_cfg.methods_for(mode):
                self.rows.append(self.row(mode, loss, method, scenario, n_train, seed, None, None, None, None,
                                          f"failed ({type(exc).__name__}): {exc}"))
            return
        report.provenance["cell_hash"] = cell_hash
        write_outputs(report, cell_dir)
        timing_path.write_text(json.dumps({"seconds": runtime}))
        self.add_rows(report.to_dict(), mode, loss, scenario, n_train, seed, runtime)

    def add_rows(self, doc, mode, loss, scenario, n_train, seed, runtime) -> None:
        for method, res in sorted(doc["methods"].items()):
            self.rows.append(self.row(mode, loss, method, scenario, n_train, seed, res["me"], res["ause"], res["ir"],
                                      runtime, "ok"))

    @staticmethod
    def row(mode, loss, fusion, scenario, n_train, seed, me, au, ir, runtime, status) -> dict:
        def num(v):
            return "" if v is None else repr(float(v))
        return {"mode": mode, "loss": loss, "fusion": fusion, "scenario": scenario, "n_train": n_train, "seed": seed,
                "ME": num(me), "AUSE": num(au), "IR": num(ir),
                "runtime": "" if runtime is None else f"{runtime:.3f}", "status": status}

    def write_summary(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)


def cmd_matrix(args) -> int:
    path = Path(args.spec)
    spec = ExperimentSpec.from_dict(_read_json(path), base=path.parent)
    m = _Matrix(spec)
    code = m.run()
    ok = sum(r["status"] == "ok" for r in m.rows)
    print(f"wrote {m.out / 'summary.csv'}: {len(m.rows)} rows, {ok} ok, {len(m.rows) - ok} failed")
    return code


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posfuse", description="CSI fingerprint positioning with uncertainty-aware fusion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug output")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("env", help="write the default four-anchor environment as JSON")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=2024)
    e.add_argument("--antennas", type=int, default=8)
    e.add_argument("--subcarriers", type=int, default=64)
    e.set_defaults(func=cmd_env)

    g = sub.add_parser("gen", help="simulate a fingerprint dataset")
    g.add_argument("--env", help="environment JSON (default: built-in four-anchor room)")
    g.add_argument("--n-samples", type=int, required=True)
    g.add_argument("--scenario", default="static", help="'static' or 'dynamic:ID[,ID...]'")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--val-fraction", type=float, default=0.1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train an early, STL or MTL bundle")
    t.add_argument("dataset")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--loss", choices=("mse", "nll"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--history", help="history CSV path (default: OUT.history.csv)")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a bundle on a dataset's test split")
    v.add_argument("bundle")
    v.add_argument("dataset")
    v.add_argument("--static", help="static reference dataset for the integrity threshold")
    v.add_argument("--fusion", nargs="+", default=list(FUSION_METHODS), choices=FUSION_METHODS)
    v.add_argument("-T", "--T", type=int, default=30, dest="T", help="MC dropout passes")
    v.add_argument("--lam", type=float, default=DEFAULT_LAMBDA)
    v.add_argument("--alert-limit", type=float, default=1.0)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--no-ir", action="store_true", help="skip the threshold fit and integrity risk")
    v.add_argument("--out", required=True, help="output directory")
    v.set_defaults(func=cmd_eval)

    m = sub.add_parser("matrix", help="run an experiment matrix")
    m.add_argument("spec", help="experiment spec JSON")
    m.set_defaults(func=cmd_matrix)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        where = f" (last good epoch {exc.last_good_epoch})" if exc.last_good_epoch is not None else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return exc.exit_code
    except PosfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
