"""Experiment configuration, run cells, metrics CSV rows and seed-level summaries."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from . import adaptation as ad
from .data import AugmentationConfig, ClientDataset, GeometryConfig, LabeledDataset, build_federation, make_domain_specs
from .federation import FederationConfig, RoundRecord, ServerState, load_checkpoint, run_federation
from .metrics import SupervisionCounts, evaluate_accuracy, mean_std, pseudo_label_accuracy, supervision_counts
from .model import ModelParams, pretrain_source
from .numerics import RngStream

OUTPUT_ENV = "FEDSCAL_OUTPUT"
CSV_HEADER = ("run_id", "seed", "method", "round", "scope", "metric", "value")

STREAM_DATA = 3
STREAM_PRETRAIN = 4

SCAL_ARMS = ("scal-none", "scal-local", "scal-global", "scal-both")
THRESHOLD_ARMS = ("tau-fixed", "tau-adaptive")
ABLATION_ARMS = SCAL_ARMS + THRESHOLD_ARMS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 5
    lr: float = 0.1
    batch_size: int = 32
    hidden: int = 64


@dataclass
class ExperimentConfig:
    name: str = "demo"
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    methods: tuple[str, ...] = ("loa", "fedloa", "fedscal")
    ablation: tuple[str, ...] = ()
    output_dir: str = "runs"
    checkpoint_every: int = 0
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.methods = tuple(self.methods)
        self.ablation = tuple(self.ablation)
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        bad = [a for a in self.ablation if a not in ABLATION_ARMS]
        if bad:
            raise ConfigError(f"ablation: unknown arm(s) {bad}; choose from {list(ABLATION_ARMS)}")
        bad = [m for m in self.methods if m not in ("loa", "fedloa", "fedscal")]
        if bad:
            raise ConfigError(f"methods: unknown method(s) {bad}")

    def to_dict(self) -> dict:
        fed = asdict(self.federation)
        scal = fed.pop("scal")
        aug = fed.pop("aug")
        return {
            "name": self.name,
            "seeds": list(self.seeds),
            "methods": list(self.methods),
            "ablation": list(self.ablation),
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
            "geometry": asdict(self.geometry),
            "pretrain": asdict(self.pretrain),
            "federation": fed,
            "scal": scal,
            "augmentation": aug,
        }


# ---------------------------------------------------------------- config loading

_SECTIONS = {
    "geometry": GeometryConfig,
    "pretrain": PretrainConfig,
    "federation": FederationConfig,
    "scal": ad.SCAlConfig,
    "augmentation": AugmentationConfig,
}
_SCALARS = {"name": str, "output_dir": str, "checkpoint_every": int, "seeds": list, "methods": list, "ablation": list}
_NESTED = {"scal", "aug"}  # FederationConfig fields configured through their own sections


def _key_lines(node, prefix: str = "") -> dict[str, int]:
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = f"{prefix}{key.value}"
            lines[path] = key.start_mark.line + 1
            lines.update(_key_lines(value, path + "."))
    return lines


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if default is None and value is None:
        return None
    if isinstance(default, int) or default is None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build_section(cls, raw, section: str, lines: dict[str, int], source: str, extra: dict | None = None):
    where = f"{source}:{lines.get(section, '?')}: {section}"
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in _NESTED}
    kwargs = {}
    for key, value in raw.items():
        kw = f"{source}:{lines.get(f'{section}.{key}', '?')}: {section}.{key}"
        if key not in defaults:
            raise ConfigError(f"{kw}: unknown field; expected one of {sorted(defaults)}")
        kwargs[key] = _coerce(value, defaults[key], kw)
    kwargs.update(extra or {})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse a YAML experiment config. Errors carry ``source:line: field`` diagnostics."""
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"{source}:{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    lines = _key_lines(root)
    for key in raw:
        if key not in _SECTIONS and key not in _SCALARS:
            raise ConfigError(
                f"{source}:{lines.get(key, '?')}: {key}: unknown field; expected one of {sorted({**_SECTIONS, **_SCALARS})}"
            )
    top = {}
    base = ExperimentConfig()
    for key, typ in _SCALARS.items():
        if key not in raw:
            continue
        where = f"{source}:{lines.get(key, '?')}: {key}"
        value = raw[key]
        if typ is list:
            if isinstance(value, (str, int)):
                value = [value]
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected a list")
            if key == "seeds" and any(isinstance(v, bool) or not isinstance(v, int) for v in value):
                raise ConfigError(f"{where}: seeds must be integers")
            top[key] = tuple(value)
        else:
            top[key] = _coerce(value, getattr(base, key), where)
    geometry = _build_section(GeometryConfig, raw.get("geometry"), "geometry", lines, source)
    pretrain = _build_section(PretrainConfig, raw.get("pretrain"), "pretrain", lines, source)
    scal = _build_section(ad.SCAlConfig, raw.get("scal"), "scal", lines, source)
    aug = _build_section(AugmentationConfig, raw.get("augmentation"), "augmentation", lines, source)
    fed = _build_section(
        FederationConfig, raw.get("federation"), "federation", lines, source, extra={"scal": scal, "aug": aug}
    )
    try:
        return ExperimentConfig(geometry=geometry, pretrain=pretrain, federation=fed, **top)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


BUILTIN_CONFIGS = {
    "demo": "name: demo\n",
    "smoke": (
        "name: smoke\n"
        "seeds: [1]\n"
        "methods: [loa, fedloa, fedscal]\n"
        "geometry: {samples_per_class: 20, num_targets: 2, clients_per_domain: 2}\n"
        "pretrain: {hidden: 16}\n"
        "federation: {rounds: 3, local_epochs: 2, batch_size: 16, participation: 0.5}\n"
    ),
}


def load_config(name_or_path: str) -> ExperimentConfig:
    """A built-in config name (``demo``, ``smoke``) or a path to a YAML file."""
    if name_or_path in BUILTIN_CONFIGS:
        return parse_config(BUILTIN_CONFIGS[name_or_path], source=name_or_path)
    path = Path(name_or_path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    return parse_config(text, source=str(path))


def output_root(explicit: str | None, cfg: ExperimentConfig) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ENV) or cfg.output_dir)


# ---------------------------------------------------------------- arms and cells


@dataclass(frozen=True)
class Arm:
    name: str
    federation: FederationConfig

    @property
    def method(self) -> str:
        return self.federation.method


def method_arms(cfg: ExperimentConfig) -> list[Arm]:
    return [Arm(m, replace(cfg.federation, method=m)) for m in cfg.methods]


def ablation_arm(cfg: ExperimentConfig, name: str) -> Arm:
    """FedSCAl variants: alignment terms switched off individually, or the threshold held at tau_init."""
    base = replace(cfg.federation, method="fedscal")
    s = base.scal
    variants = {
        "scal-none": replace(s, lambda_local=0.0, lambda_global=0.0),
        "scal-local": replace(s, lambda_global=0.0),
        "scal-global": replace(s, lambda_local=0.0),
        "scal-both": s,
        "tau-fixed": replace(s, adaptive_threshold=False),
        "tau-adaptive": replace(s, adaptive_threshold=True),
    }
    if name not in variants:
        raise ConfigError(f"unknown ablation arm {name!r}")
    return Arm(name, replace(base, scal=variants[name]))


def experiment_arms(cfg: ExperimentConfig) -> list[Arm]:
    return method_arms(cfg) + [ablation_arm(cfg, a) for a in cfg.ablation]


@dataclass
class SeedSetup:
    seed: int
    source: LabeledDataset
    clients: list[ClientDataset]
    init: ModelParams
    source_accuracy: float


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedSetup:
    """Sample the federation for ``seed`` and pretrain the source model on it."""
    geo = cfg.geometry
    src, targets = make_domain_specs(geo)
    source, clients = build_federation(
        src, targets, geo.clients_per_domain, RngStream(seed, (STREAM_DATA, 0)), cfg.federation.batch_size
    )
    pre = cfg.pretrain
    init, acc = pretrain_source(
        source.features,
        source.labels,
        pre.epochs,
        pre.lr,
        pre.batch_size,
        RngStream(seed, (STREAM_PRETRAIN, 0)),
        hidden=pre.hidden,
        num_classes=geo.num_classes,
    )
    return SeedSetup(seed, source, clients, init, acc)


def make_evaluator(method: str, clients: Sequence[ClientDataset]):
    """Attach label-dependent metrics to each round record."""
    by_id = {c.client_id: c for c in clients}

    def evaluate(record: RoundRecord, global_params: ModelParams, local_params: dict, results: dict) -> None:
        client_pacc = {}
        counts = SupervisionCounts(0, 0, 0, 0, 0)
        violations = 0
        for cid, res in sorted(results.items()):
            y = by_id[cid].labels
            if res.pseudo_labels:
                client_pacc[str(cid)] = float(np.mean([pseudo_label_accuracy(l, y) for l in res.pseudo_labels]))
            for b in res.batches:
                if b.local_targets is None:
                    continue
                c = supervision_counts(b.local_targets, b.global_targets, y[b.indices])
                violations += int(not c.consistent)
                counts = counts + c
        target = local_params if method == "loa" else global_params
        acc = evaluate_accuracy(target, clients)
        m = record.metrics
        m["acc"] = acc.average
        for dom, v in acc.per_domain.items():
            m[f"acc_domain{dom}"] = v
        if client_pacc:
            m["pacc"] = float(np.mean(list(client_pacc.values())))
        m["client_pacc"] = client_pacc
        if method == "fedscal":
            m.update(
                local_wrong=counts.local_wrong,
                global_wrong=counts.global_wrong,
                both_wrong=counts.both_wrong,
                local_gated=counts.local_gated,
                global_gated=counts.global_gated,
                inclusion_violations=violations,
            )

    return evaluate


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    seed: int
    method: str
    round: int
    scope: str  # client id or "global"
    metric: str
    value: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite metric {self.metric}={self.value} in {self.run_id} round {self.round}")

    def cells(self) -> list[str]:
        return [self.run_id, str(self.seed), self.method, str(self.round), self.scope, self.metric, format_float(self.value)]


def format_float(v: float) -> str:
    return format(float(v), ".17g")


_GLOBAL_SKIP = {"client_pacc"}


def history_rows(run_id: str, seed: int, method: str, history: Iterable[RoundRecord]) -> list[MetricsRow]:
    rows = []
    for rec in history:
        r = rec.round
        for name in sorted(rec.metrics):
            if name in _GLOBAL_SKIP:
                continue
            rows.append(MetricsRow(run_id, seed, method, r, "global", name, float(rec.metrics[name])))
        rows.append(MetricsRow(run_id, seed, method, r, "global", "drift", rec.drift))
        if rec.tau:
            rows.append(MetricsRow(run_id, seed, method, r, "global", "tau_mean", float(np.mean(list(rec.tau.values())))))
        pacc = rec.metrics.get("client_pacc", {})
        for cid in sorted(rec.sampled):
            scope = str(cid)
            if scope in pacc:
                rows.append(MetricsRow(run_id, seed, method, r, scope, "pacc", pacc[scope]))
            rows.append(MetricsRow(run_id, seed, method, r, scope, "tau", rec.tau[cid]))
            rows.append(MetricsRow(run_id, seed, method, r, scope, "gamma", rec.gamma[cid]))
            for name, v in sorted(rec.losses[cid].items()):
                rows.append(MetricsRow(run_id, seed, method, r, scope, f"loss_{name}", v))
    return rows


def rows_to_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow(row.cells())
    return buf.getvalue()


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [MetricsRow(a, int(b), c, int(d), e, f, float(g)) for a, b, c, d, e, f, g in reader]


@dataclass
class CellResult:
    run_id: str
    arm: str
    method: str
    seed: int
    history: list[RoundRecord]
    rows: list[MetricsRow]
    final: ModelParams
    source_accuracy: float
    directory: Path | None = None

    def series(self, metric: str) -> list[float]:
        return [rec.metrics[metric] for rec in self.history]


def run_cell(
    cfg: ExperimentConfig,
    arm: Arm,
    setup: SeedSetup,
    directory: str | Path | None = None,
    resume: bool = False,
) -> CellResult:
    """One (arm, seed) federation run; writes metrics.csv and history.json when ``directory`` is given."""
    run_id = f"{arm.name}-s{setup.seed}"
    fed = replace(arm.federation, seed=setup.seed)
    directory = Path(directory) if directory is not None else None
    ckpt = directory / "checkpoint" if directory is not None and cfg.checkpoint_every > 0 else None
    state: ServerState | None = None
    if resume and ckpt is not None and (ckpt / "checkpoint.json").exists():
        state = load_checkpoint(ckpt)
    views = [c.unlabeled() for c in setup.clients]
    final = run_federation(
        fed,
        views,
        setup.init,
        evaluator=make_evaluator(fed.method, setup.clients),
        checkpoint_dir=ckpt,
        checkpoint_every=cfg.checkpoint_every,
        state=state,
    )
    rows = history_rows(run_id, setup.seed, arm.name, final.history)
    cell = CellResult(run_id, arm.name, fed.method, setup.seed, final.history, rows, final.params, setup.source_accuracy)
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "metrics.csv").write_text(rows_to_csv(rows))
        manifest = {
            "run_id": run_id,
            "arm": arm.name,
            "method": fed.method,
            "seed": setup.seed,
            "source_accuracy": setup.source_accuracy,
            "init_sha256": setup.init.content_hash(),
            "final_sha256": final.params.content_hash(),
            "config": cfg.to_dict(),
            "history": [rec.to_json() for rec in final.history],
        }
        (directory / "history.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        cell.directory = directory
    return cell


def run_experiment(
    cfg: ExperimentConfig, root: str | Path | None = None, resume: bool = False, log=None
) -> list[CellResult]:
    """Every (arm x seed) cell, then a summary table over seeds."""
    arms = experiment_arms(cfg)
    if not arms:
        raise ConfigError("nothing to run: no methods and no ablation arms")
    base = Path(root) / cfg.name if root is not None else None
    cells = []
    for seed in cfg.seeds:
        setup = prepare_seed(cfg, seed)
        for arm in arms:
            cell = run_cell(cfg, arm, setup, base / f"{arm.name}-s{seed}" if base else None, resume=resume)
            cells.append(cell)
            if log is not None:
                final = cell.history[-1].metrics if cell.history else {}
                log(f"{cell.run_id}: acc={final.get('acc', float('nan')):.4f} pacc={final.get('pacc', float('nan')):.4f}")
    if base is not None:
        summary = summarize([r for c in cells for r in c.rows])
        (base / "summary.csv").write_text(summary_csv(summary))
        (base / "summary.md").write_text(summary_table(summary))
    return cells


# ---------------------------------------------------------------- summaries


@dataclass(frozen=True)
class SummaryRow:
    arm: str
    column: str  # acc_domain<d>, acc, best_acc, pacc
    mean: float
    std: float
    n: int


def summarize(rows: Sequence[MetricsRow]) -> list[SummaryRow]:
    """Per-arm mean and population std over seeds, computed from metrics rows alone.

    Final-round values for per-domain accuracy, average accuracy and pAcc; ``best_acc``
    is the maximum average accuracy over rounds.
    """
    last: dict[tuple[str, int], int] = {}
    for r in rows:
        key = (r.method, r.seed)
        last[key] = max(last.get(key, 0), r.round)
    final: dict[tuple[str, str], dict[int, float]] = {}
    best: dict[str, dict[int, float]] = {}
    for r in rows:
        if r.scope != "global":
            continue
        if r.metric == "acc":
            cur = best.setdefault(r.method, {})
            cur[r.seed] = max(cur.get(r.seed, -np.inf), r.value)
        if r.round == last[(r.method, r.seed)] and (r.metric.startswith("acc") or r.metric == "pacc"):
            final.setdefault((r.method, r.metric), {})[r.seed] = r.value
    out = []
    arms = sorted({m for m, _ in final}, key=_arm_order)
    for arm in arms:
        cols = sorted(c for m, c in final if m == arm and c.startswith("acc_domain"))
        for col in cols + ["acc"]:
            vals = final.get((arm, col))
            if vals:
                out.append(SummaryRow(arm, col, *mean_std([vals[s] for s in sorted(vals)]), len(vals)))
        if arm in best:
            vals = best[arm]
            out.append(SummaryRow(arm, "best_acc", *mean_std([vals[s] for s in sorted(vals)]), len(vals)))
        if (arm, "pacc") in final:
            vals = final[(arm, "pacc")]
            out.append(SummaryRow(arm, "pacc", *mean_std([vals[s] for s in sorted(vals)]), len(vals)))
    return out


def _arm_order(name: str):
    order = ("loa", "fedloa", "fedscal") + ABLATION_ARMS
    return (order.index(name) if name in order else len(order), name)


def summary_csv(summary: Sequence[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("arm", "column", "mean", "std", "n"))
    for s in summary:
        w.writerow((s.arm, s.column, format_float(s.mean), format_float(s.std), s.n))
    return buf.getvalue()


def summary_table(summary: Sequence[SummaryRow]) -> str:
    """Markdown table: one row per arm, accuracy columns in percent as mean ± std over seeds."""
    arms = []
    cols: list[str] = []
    cell = {}
    for s in summary:
        if s.arm not in arms:
            arms.append(s.arm)
        if s.column not in cols:
            cols.append(s.column)
        cell[(s.arm, s.column)] = f"{100 * s.mean:.2f} ± {100 * s.std:.2f}"
    domain_cols = [c for c in cols if c.startswith("acc_domain")]
    ordered = domain_cols + [c for c in ("acc", "best_acc", "pacc") if c in cols]
    titles = {"acc": "Avg (final)", "best_acc": "Avg (best round)", "pacc": "pAcc (final)"}
    head = ["Method"] + [titles.get(c, c.replace("acc_domain", "Target ")) for c in ordered]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for arm in arms:
        lines.append("| " + " | ".join([arm] + [cell.get((arm, c), "") for c in ordered]) + " |")
    return "\n".join(lines) + "\n"


def pacc_series(rows: Sequence[MetricsRow], metric: str = "pacc") -> dict[int, float]:
    return {r.round: r.value for r in rows if r.scope == "global" and r.metric == metric}


def compare_runs(rows_a: Sequence[MetricsRow], rows_b: Sequence[MetricsRow], metric: str = "pacc") -> str:
    """CSV of round, value in A, value in B, and A - B for rounds present in both runs."""
    a = pacc_series(rows_a, metric)
    b = pacc_series(rows_b, metric)
    shared = sorted(set(a) & set(b))
    if not shared:
        raise ValueError(f"runs share no rounds with metric {metric!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("round", "a", "b", "delta"))
    for r in shared:
        w.writerow((r, format_float(a[r]), format_float(b[r]), format_float(a[r] - b[r])))
    return buf.getvalue()
