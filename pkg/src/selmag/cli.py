"""``selmag`` command line: generate, pretrain, train, evaluate, ablate.

Every command reads an optional JSON config (flat keys), applies flag
overrides, validates the result and echoes it to ``run_config_resolved.json``
in its output directory. Exit codes: 0 success, 2 config error, 3 missing
artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import TrainConfig
from .evaluation import (EPSILON_GRID, LAMBDA_GRID, SWEEP_HEADER, VARIANTS, EvalReport, Experiment,
                         run_ablation, run_baseline, selector_analysis, sweep, variant_config)
from .graph import DatasetError, load_domain_set, read_labels
from .meta import final_adapt, hypothesis_of, meta_train, selection_weights, target_context, theta_of
from .models import (encode_np, load_params, save_params, source_params, source_result_from_params,
                     train_source_models)
from .ot import solve_selective_plan
from .pipeline import (SCORES_FILE, SOURCE_FILE, all_graphs, load_pretrain, load_ssl_model,
                       prepare_domains, pretrain_probes, save_scores, save_ssl_model, score_rows,
                       score_table, ssl_path)
from .synth import default_base_params, default_schedule, generate_suite

log = logging.getLogger("selmag")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
LABELS_FILE = "target_labels_eval.tsv"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Run-level settings on top of :class:`TrainConfig`."""

    train: TrainConfig = field(default_factory=TrainConfig)
    suite_dir: str = "suite"
    out_dir: str = "runs"
    num_sources: int = 5
    num_nodes: int = 300
    num_classes: int = 4
    feature_dim: int = 16
    mean_radius: float = 0.8
    min_angle: float = 0.6
    max_angle: float = 1.2
    max_translation: float = 1.0
    ablation: str = "full"
    baseline: str | None = None
    sweep: bool = False
    dump_plans: bool = False
    resume: bool = False

    RUN_KEYS = ("suite_dir", "out_dir", "num_sources", "num_nodes", "num_classes", "feature_dim",
                "mean_radius", "min_angle", "max_angle", "max_translation", "ablation", "baseline",
                "sweep", "dump_plans", "resume")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        train_keys = {f.name for f in fields(TrainConfig)}
        unknown = set(data) - train_keys - set(cls.RUN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            train = TrainConfig.from_dict({k: v for k, v in data.items() if k in train_keys})
            run = cls(train=train, **{k: v for k, v in data.items() if k in cls.RUN_KEYS})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return run.validate()

    def validate(self) -> "RunConfig":
        if self.num_sources < 2:
            raise ConfigError("meta-training needs at least two sources")
        if self.num_nodes < 2 or self.num_classes < 2 or self.feature_dim < 2:
            raise ConfigError("suite sizes out of range")
        if self.ablation not in VARIANTS:
            raise ConfigError(f"ablation must be one of {VARIANTS}")
        if self.baseline not in (None, "direct", "uniform_ot", "selmag"):
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        return self

    def to_dict(self) -> dict:
        out = self.train.to_dict()
        out.update({k: getattr(self, k) for k in self.RUN_KEYS})
        return out


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{p}: config file not found")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_resolved(out: Path, rc: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config_resolved.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True) + "\n")


def _fmt(x) -> str:
    return "" if isinstance(x, float) and np.isnan(x) else repr(float(x))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(rc: RunConfig) -> int:
    out = Path(rc.suite_dir)
    schedule = default_schedule(rc.num_sources, rc.max_angle, rc.min_angle, rc.max_translation)
    base = default_base_params(rc.train.seed, rc.num_nodes, rc.num_classes, rc.feature_dim, rc.mean_radius)
    ds, manifest, _ = generate_suite(schedule, base, out)
    write_resolved(out, rc)
    print(f"{'domain':<10}{'nodes':>7}{'edges':>8}{'angle':>8}{'shift':>8}")
    for k, (g, p) in enumerate(zip(ds.sources, manifest["sources"])):
        print(f"{'source' + str(k):<10}{g.num_nodes:>7}{len(g.edges):>8}"
              f"{p['feature_rotation_angle']:>8.2f}{p['feature_translation']:>8.2f}")
    print(f"{'target':<10}{ds.target.num_nodes:>7}{len(ds.target.edges):>8}{0.0:>8.2f}{0.0:>8.2f}")
    return EXIT_OK


def _domains(rc: RunConfig):
    suite = Path(rc.suite_dir)
    if not (suite / "suite.json").exists():
        raise FileNotFoundError(f"no suite at {suite}")
    return prepare_domains(load_domain_set(suite), rc.train)


def cmd_pretrain(rc: RunConfig) -> int:
    cfg = rc.train
    ds = _domains(rc)
    out = Path(rc.out_dir) / "pretrain"
    write_resolved(out, rc)
    graphs = all_graphs(ds)
    if rc.resume and (out / SOURCE_FILE).exists():
        log.info("resume: reusing %s", out / SOURCE_FILE)
        source = source_result_from_params(load_params(out / SOURCE_FILE))
    else:
        source = train_source_models(ds, cfg)
        save_params(out / SOURCE_FILE, source_params(source))
    if rc.resume and all(ssl_path(out, g).exists() for g in range(len(graphs))):
        log.info("resume: reusing probe modules")
        models = [load_ssl_model(ssl_path(out, g)) for g in range(len(graphs))]
    else:
        models, _ = pretrain_probes(ds, cfg, source.encoder)
        for g, m in enumerate(models):
            save_ssl_model(ssl_path(out, g), m)
    if rc.resume and (out / SCORES_FILE).exists():
        scores = load_params(out / SCORES_FILE)["scores"]
    else:
        scores = score_table(models, graphs, cfg)
        save_scores(out / SCORES_FILE, scores)
    target_rows, pair_rows = score_rows(scores, ds.num_sources)
    write_csv(out / "transfer_scores.csv", ("task", "source", "loss", "self_reference_loss"), target_rows)
    write_csv(out / "pairwise_transfer_scores.csv",
              ("task", "source", "target", "loss", "self_reference_loss"), pair_rows)
    print(f"pretraining artifacts in {out}")
    return EXIT_OK


def _experiment(rc: RunConfig, labels: np.ndarray | None = None) -> Experiment:
    ds = _domains(rc)
    arts = load_pretrain(Path(rc.out_dir) / "pretrain", ds.num_sources + 1)
    if labels is None:
        labels = np.zeros(ds.target.num_nodes, dtype=np.int64)
    return Experiment(ds, rc.train, labels, arts)


def train_dir(rc: RunConfig) -> Path:
    return Path(rc.out_dir) / "train" / rc.ablation


def cmd_train(rc: RunConfig) -> int:
    exp = _experiment(rc)
    cfg = variant_config(rc.train, rc.ablation)
    out = train_dir(rc)
    write_resolved(out, rc)
    log_rows: list[list] = []
    try:
        selectors, logbook = meta_train(exp.ds, exp.pre, cfg)
        log_rows = logbook.rows(exp.ds.num_sources)
        hyp, losses = final_adapt(exp.ds, exp.pre, selectors, cfg)
    finally:
        header = ["epoch", "outer_loss", *(f"s_global_{k}" for k in range(exp.ds.num_sources))]
        write_csv(out / "training_log.csv", header,
                  [[r[0], *(_fmt(x) for x in r[1:])] for r in log_rows])
    write_csv(out / "adapt_log.csv", ("step", "loss"), [[i, repr(v)] for i, v in enumerate(losses)])
    save_params(out / "selectors.json", selectors)
    save_params(out / "target_model.json", theta_of(hyp))
    if rc.dump_plans and cfg.lam > 0:
        ctx = target_context(exp.ds, exp.pre)
        _, _, w = selection_weights(selectors, ctx, cfg)
        x = encode_np(hyp.encoder, exp.ds.target)
        plan = solve_selective_plan(ctx.xs, x, w.value / ctx.scale, cfg.epsilon, cfg.sinkhorn_tol,
                                    cfg.sinkhorn_max_iter)
        i, j = np.nonzero(plan.gamma)
        write_csv(out / "plan.csv", ("i", "j", "gamma"),
                  [[a, b, repr(float(plan.gamma[a, b]))] for a, b in zip(i, j)])
    print(f"trained {rc.ablation}: {len(log_rows)} meta epochs, {len(losses)} adaptation steps -> {out}")
    return EXIT_OK


def _target_labels(rc: RunConfig, n: int, num_classes: int) -> np.ndarray:
    path = Path(rc.suite_dir) / LABELS_FILE
    if not path.exists():
        raise FileNotFoundError(f"missing evaluation labels {path}")
    return read_labels(path, n, num_classes)


def cmd_evaluate(rc: RunConfig) -> int:
    ds = _domains(rc)
    labels = _target_labels(rc, ds.target.num_nodes, ds.num_classes)
    exp = _experiment(rc, labels)
    out = Path(rc.out_dir) / "evaluate"
    write_resolved(out, rc)
    if rc.baseline is not None:
        report = run_baseline(rc.baseline, exp)
        write_csv(out / f"baseline_{rc.baseline}.csv", EvalReport.HEADER, [report.row()])
        print(f"{rc.baseline}: acc={report.accuracy:.4f}")
        return EXIT_OK
    tdir = train_dir(rc)
    model_path, sel_path = tdir / "target_model.json", tdir / "selectors.json"
    for p in (model_path, sel_path):
        if not p.exists():
            raise FileNotFoundError(f"missing training artifact {p}")
    cfg = variant_config(rc.train, rc.ablation)
    hyp = hypothesis_of(load_params(model_path))
    report = exp.report(hyp, rc.ablation, cfg)
    write_csv(out / "eval_report.csv", EvalReport.HEADER, [report.row()])
    analysis = selector_analysis(exp, load_params(sel_path), cfg)
    write_csv(out / "selector_analysis.csv", analysis.HEADER, analysis.rows())
    print(f"{rc.ablation}: acc={report.accuracy:.4f} auroc={report.macro_auroc:.4f} "
          f"macro_f1={report.macro_f1:.4f} spearman={analysis.spearman:.3f}")
    if rc.sweep:
        write_csv(out / "sweep.csv", SWEEP_HEADER, sweep(exp, LAMBDA_GRID, EPSILON_GRID))
    return EXIT_OK


def cmd_ablate(rc: RunConfig) -> int:
    ds = _domains(rc)
    labels = _target_labels(rc, ds.target.num_nodes, ds.num_classes)
    exp = _experiment(rc, labels)
    out = Path(rc.out_dir) / "ablate"
    write_resolved(out, rc)
    rows = []
    for variant in VARIANTS:
        rows.append(run_ablation(variant, exp).row())
    for name in ("direct", "uniform_ot"):
        rows.append(run_baseline(name, exp).row())
    write_csv(out / "ablation.csv", EvalReport.HEADER, rows)
    for r in rows:
        print(f"{r[1]:<12} acc={r[3]}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selmag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--suite", dest="suite_dir", help="suite directory")
        p.add_argument("--out", dest="out_dir", help="run output directory")
        p.add_argument("--resume", action="store_true", default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "evaluate"):
            p.add_argument("--ablation", choices=VARIANTS)
            p.add_argument("--dump-plans", dest="dump_plans", action="store_true", default=None)
        if name == "evaluate":
            p.add_argument("--sweep", action="store_true", default=None)
            p.add_argument("--baseline", choices=("direct", "uniform_ot", "selmag"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_set(args.set)
        for key in ("seed", "suite_dir", "out_dir", "resume", "ablation", "dump_plans", "sweep", "baseline"):
            value = getattr(args, key, None)
            if value is not None:
                overrides[key] = value
        rc = load_config(args.config, overrides)
        start = time.time()
        code = COMMANDS[args.command](rc)
        log.info("%s finished in %.1fs", args.command, time.time() - start)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DatasetError) as exc:
        print(f"missing or invalid artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
