"""Command-line front end: corpus synthesis, training, exemplar selection, evaluation, reports.

Every command reads the same INI experiment config, writes its artifacts under
the output root and leaves a ``manifest.json`` next to them. A command whose
manifest matches the current inputs is skipped unless ``--force`` is given.

Exit codes: 0 success, 2 config error (including conflicts with existing
output), 3 missing upstream artifact, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import ast
import configparser
import hashlib
import io
import json
import logging
import math
import multiprocessing
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .dataset import DatasetError, ScenarioConfig, build_scenario, load_volumes
from .exemplar import AEISEG, CORISEG, AffinityCache, ExemplarError, load_store, save_store
from .metrics import EvalReport, MetricError, read_report_csv, retention_report, write_report_csv
from .network import CheckpointError, load, save
from .synthdata import SynthConfig, SynthError, generate_scenario_corpus
from .trainer import (
    FINETUNE,
    LWFSEG,
    METHODS,
    IncrementalRun,
    TrainConfig,
    TrainingError,
    build_exemplar_store,
    desk_profile,
    evaluate,
    full_profile,
    read_epoch_csv,
    train_incremental,
    train_initial,
    write_epoch_csv,
)

log = logging.getLogger("incseg")

MANIFEST_VERSION = 1
OUTPUT_ENV = "INCSEG_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
EXEMPLAR_METHODS = (AEISEG, CORISEG)


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# -- configuration --------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    case: int = 1
    seed: int = 0
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    output: str = "runs/case1"
    profile: str = "desk"
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=desk_profile)

    def validate(self):
        if not self.methods:
            raise ConfigError("method list is empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; expected a subset of {list(METHODS)}")
        if self.case not in (1, 2, 3):
            raise ConfigError(f"unknown case {self.case}; expected 1, 2 or 3")

    @property
    def root(self) -> Path:
        return Path(self.output)

    def to_dict(self) -> dict:
        return {
            "experiment": {"case": self.case, "seed": self.seed, "methods": list(self.methods),
                           "output": self.output, "profile": self.profile},
            "synth": _jsonable(asdict(self.synth)),
            "train": _jsonable(self.train.to_dict()),
        }


def _jsonable(obj):
    return json.loads(json.dumps(obj))


def _parse_value(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _known(section: str, values: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {unknown}")
    return values


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI experiment config; missing keys take the profile defaults."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    extra = sorted(set(parser.sections()) - {"experiment", "synth", "train"})
    if extra:
        raise ConfigError(f"unknown config sections {extra}")
    sect = {s: {k: _parse_value(v) for k, v in parser.items(s)} if parser.has_section(s) else {}
            for s in ("experiment", "synth", "train")}
    for key, value in (overrides or {}).items():
        if value is not None:
            sect["experiment"][key] = value

    exp = sect["experiment"]
    known = {"case", "seed", "methods", "output", "profile"}
    if set(exp) - known:
        raise ConfigError(f"unknown keys in [experiment]: {sorted(set(exp) - known)}")
    case = int(exp.get("case", 1))
    seed = int(exp.get("seed", 0))
    methods = exp.get("methods", list(METHODS))
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    methods = list(methods or [])
    profile = exp.get("profile", "desk")
    if profile not in ("desk", "full"):
        raise ConfigError(f"profile must be 'desk' or 'full', got {profile!r}")
    output = os.environ.get(OUTPUT_ENV) or str(exp.get("output", f"runs/case{case}"))

    try:
        synth_kw = {"seed": seed, **_known("synth", sect["synth"], SynthConfig)}
        synth = SynthConfig(**synth_kw)
        train_kw = {"seed": seed, **_known("train", sect["train"], TrainConfig)}
        train = (desk_profile if profile == "desk" else full_profile)(**train_kw)
    except (TypeError, SynthError, TrainingError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig(case, seed, methods, output, profile, synth, train)
    cfg.validate()
    return cfg


def format_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    for section, values in cfg.to_dict().items():
        parser[section] = {k: (",".join(v) if section == "experiment" and k == "methods" else
                               "none" if v is None else str(v)) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# -- manifests and idempotence --------------------------------------------------------


def code_version() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _output_hashes(directory: Path, exclude=("manifest.json",)) -> dict[str, str]:
    return {str(p.relative_to(directory)): file_hash(p) for p in sorted(directory.rglob("*"))
            if p.is_file() and not (p.parent == directory and p.name in exclude)}


def fingerprint(command: str, config: dict, inputs: dict) -> str:
    blob = json.dumps({"command": command, "config": config, "inputs": inputs}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def read_manifest(path: Path) -> dict | None:
    try:
        return json.loads(path.read_text())
    except (FileNotFoundError, NotADirectoryError):
        return None
    except (json.JSONDecodeError, OSError) as exc:
        raise TrainingError(f"unreadable manifest {path}: {exc}") from exc


def up_to_date(directory: Path, fp: str, force: bool) -> bool:
    """True if ``directory`` already holds the outputs for fingerprint ``fp``."""
    man = read_manifest(directory / "manifest.json")
    if man is None or force:
        return False
    if man.get("fingerprint") != fp:
        raise ConfigError(f"{directory} holds output from different inputs or config; use --force to overwrite")
    current = _output_hashes(directory)
    if current != man.get("outputs"):
        raise ConfigError(f"outputs under {directory} do not match their manifest hashes; use --force to rebuild")
    return True


def write_manifest(directory: Path, command: str, cfg: ExperimentConfig, config_part: dict, inputs: dict,
                   fp: str, started: float, **extra) -> dict:
    man = {
        "format_version": MANIFEST_VERSION,
        "command": command,
        "code_version": code_version(),
        "config": cfg.to_dict(),
        "command_config": config_part,
        "seeds": {"experiment": cfg.seed, "synth": cfg.synth.seed, "train": cfg.train.seed},
        "inputs": inputs,
        "fingerprint": fp,
        "outputs": _output_hashes(directory),
        "runtime_s": round(time.time() - started, 3),
        **extra,
    }
    (directory / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def _prepare(directory: Path, force: bool):
    import shutil

    if force and directory.exists():
        shutil.rmtree(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc.strerror}") from exc


# -- artifact locations ---------------------------------------------------------------


def corpus_dir(cfg):
    return cfg.root / "corpus"


def init_dir(cfg):
    return cfg.root / "init"


def exemplar_dir(cfg, method):
    return cfg.root / "exemplars" / method


def inc_dir(cfg, method):
    return cfg.root / "inc" / method


def eval_dir(cfg, name):
    return cfg.root / "eval" / name


def _require(path: Path, what: str, hint: str):
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path} (run `{hint}` first)")


def load_corpus(cfg):
    d = corpus_dir(cfg)
    _require(d / "manifest.json", "synthetic corpus", "incseg synth")
    scen = ScenarioConfig.from_dict(json.loads((d / "scenario.json").read_text()))
    return scen, build_scenario(load_volumes(d / "volumes"), scen)


def _corpus_hash(cfg) -> str:
    return file_hash(corpus_dir(cfg) / "corpus_manifest.json")


# -- commands -------------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, force: bool = False) -> str:
    d = corpus_dir(cfg)
    part = {"case": cfg.case, "synth": _jsonable(asdict(cfg.synth))}
    fp = fingerprint("synth", part, {})
    if up_to_date(d, fp, force):
        log.info("corpus at %s is up to date", d)
        return "skipped"
    t0 = time.time()
    _prepare(d, force)
    _, _, corpus = generate_scenario_corpus(cfg.synth, cfg.case, d)
    write_manifest(d, "synth", cfg, part, {}, fp, t0, volumes=corpus["volumes"])
    log.info("wrote %d volumes to %s", len(corpus["volumes"]), d)
    return "done"


def cmd_train_init(cfg: ExperimentConfig, force: bool = False) -> str:
    d = init_dir(cfg)
    _require(corpus_dir(cfg) / "manifest.json", "synthetic corpus", "incseg synth")
    part = {"train": _jsonable(replace(cfg.train, method=FINETUNE, workers=1).to_dict())}
    inputs = {"corpus": _corpus_hash(cfg)}
    fp = fingerprint("train-init", part, inputs)
    if up_to_date(d, fp, force):
        log.info("initial checkpoint at %s is up to date", d)
        return "skipped"
    t0 = time.time()
    scen, (d_init, _, val, _) = load_corpus(cfg)
    _prepare(d, force)
    res = train_initial(d_init, cfg.train, val, scen.eval_contrast)
    save(res.best, d / "checkpoint.zip")
    save(res.checkpoint, d / "final.zip")
    write_epoch_csv(res.epoch_log, d / "epochs.csv")
    write_manifest(d, "train-init", cfg, part, inputs, fp, t0, best_validation_dice=res.best_val_dice,
                   checkpoint_hash=res.best.content_hash(), dataset_hash=d_init.content_hash(),
                   epoch_csv="epochs.csv")
    return "done"


def _init_checkpoint(cfg):
    path = init_dir(cfg) / "checkpoint.zip"
    _require(path, "initial checkpoint", "incseg train-init")
    return path


def cmd_select_exemplars(cfg: ExperimentConfig, method: str, force: bool = False) -> str:
    if method not in EXEMPLAR_METHODS:
        raise ConfigError(f"select-exemplars needs one of {list(EXEMPLAR_METHODS)}, got {method!r}")
    d = exemplar_dir(cfg, method)
    ckpt_path = _init_checkpoint(cfg)
    tc = replace(cfg.train, method=method)
    # worker count does not change the selection, so it stays out of the fingerprint
    part = {"method": method, "train": _jsonable(replace(tc, workers=1).to_dict())}
    inputs = {"corpus": _corpus_hash(cfg), "checkpoint": file_hash(ckpt_path)}
    fp = fingerprint("select-exemplars", part, inputs)
    if up_to_date(d, fp, force):
        log.info("%s exemplars at %s are up to date", method, d)
        return "skipped"
    t0 = time.time()
    _, (d_init, _, _, _) = load_corpus(cfg)
    _prepare(d, force)
    cache = AffinityCache(cfg.root / "cache") if method == CORISEG else None
    store = build_exemplar_store(load(ckpt_path), d_init, method, tc, cache)
    store_hash = save_store(store, d / "store")
    write_manifest(d, "select-exemplars", cfg, part, inputs, fp, t0, method=method, store_hash=store_hash,
                   exemplars={c: [r.sample.key for r in rs] for c, rs in store.entries.items()})
    return "done"


def cmd_train_inc(cfg: ExperimentConfig, method: str, force: bool = False) -> str:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    d = inc_dir(cfg, method)
    ckpt_path = _init_checkpoint(cfg)
    tc = replace(cfg.train, method=method)
    part = {"method": method, "train": _jsonable(replace(tc, workers=1).to_dict())}
    inputs = {"corpus": _corpus_hash(cfg), "checkpoint": file_hash(ckpt_path)}
    store_dir = exemplar_dir(cfg, method) / "store"
    if method in EXEMPLAR_METHODS:
        _require(store_dir / "manifest.json", f"{method} exemplar store",
                 f"incseg select-exemplars --method {method}")
        inputs["store"] = file_hash(store_dir / "manifest.json")
    fp = fingerprint("train-inc", part, inputs)
    if up_to_date(d, fp, force):
        log.info("%s run at %s is up to date", method, d)
        return "skipped"
    t0 = time.time()
    scen, (_, d_inc, val, _) = load_corpus(cfg)
    old = load(ckpt_path)
    run = IncrementalRun(old, scen.inc_classes, d_inc)
    if method in EXEMPLAR_METHODS:
        run.store = load_store(store_dir)
    _prepare(d, force)
    res = train_incremental(run, tc, val, scen.eval_contrast)
    save(res.best, d / "checkpoint.zip")
    save(res.checkpoint, d / "final.zip")
    write_epoch_csv(res.epoch_log, d / "epochs.csv")
    write_manifest(d, "train-inc", cfg, part, inputs, fp, t0, method=method,
                   best_validation_dice=res.best_val_dice, checkpoint_hash=res.best.content_hash(),
                   store_hash=run.store.content_hash(), dataset_hash=d_inc.content_hash(),
                   epoch_csv="epochs.csv")
    return "done"


def _train_inc_worker(cfg_dict: dict, method: str, force: bool) -> str:
    cfg = config_from_dict(cfg_dict)
    return cmd_train_inc(cfg, method, force)


def config_from_dict(d: dict) -> ExperimentConfig:
    e = d["experiment"]
    synth = SynthConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["synth"].items()})
    return ExperimentConfig(e["case"], e["seed"], list(e["methods"]), e["output"], e["profile"], synth,
                            TrainConfig.from_dict(d["train"]))


def cmd_train_inc_all(cfg: ExperimentConfig, methods, force: bool = False, parallel_methods: int = 1):
    if parallel_methods <= 1 or len(methods) <= 1:
        return {m: cmd_train_inc(cfg, m, force) for m in methods}
    # separate processes keep each run's torch state isolated
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=parallel_methods, mp_context=ctx) as pool:
        futures = {m: pool.submit(_train_inc_worker, cfg.to_dict(), m, force) for m in methods}
        return {m: f.result() for m, f in futures.items()}


def _eval_targets(cfg, only=None, extra=None) -> dict[str, Path]:
    targets = {}
    if only is None or "initial" in only:
        targets["initial"] = init_dir(cfg) / "checkpoint.zip"
    for m in cfg.methods:
        if only is None or m in only:
            targets[m] = inc_dir(cfg, m) / "checkpoint.zip"
    targets.update(extra or {})
    return targets


def cmd_evaluate(cfg: ExperimentConfig, force: bool = False, only=None, extra=None) -> dict:
    targets = _eval_targets(cfg, only, extra)
    for name, path in targets.items():
        hint = "incseg train-init" if name == "initial" else f"incseg train-inc --method {name}"
        _require(path, f"checkpoint for {name}", hint)
    scen, (_, _, _, test) = load_corpus(cfg)
    status = {}
    for name, path in targets.items():
        d = eval_dir(cfg, name)
        inputs = {"corpus": _corpus_hash(cfg), "checkpoint": file_hash(path)}
        part = {"name": name, "case": cfg.case, "eval_contrast": scen.eval_contrast}
        fp = fingerprint("evaluate", part, inputs)
        if up_to_date(d, fp, force):
            status[name] = "skipped"
            continue
        t0 = time.time()
        _prepare(d, force)
        rep = evaluate(load(path).to_network(), test, eval_contrast=scen.eval_contrast,
                       method=name, case=f"case{cfg.case}")
        write_report_csv([rep], d / "report.csv")
        write_manifest(d, "evaluate", cfg, part, inputs, fp, t0, method=name, checkpoint=str(path),
                       report_csv="report.csv", old_classes=scen.init_classes, new_classes=scen.inc_classes,
                       dice=rep.dice, assd={k: (None if math.isnan(v) else v) for k, v in rep.assd.items()})
        status[name] = "done"
    return status


# -- report ---------------------------------------------------------------------------

METHOD_ORDER = {m: i for i, m in enumerate(METHODS)}


def collect_manifests(paths) -> list[tuple[Path, dict]]:
    found = []
    for p in map(Path, paths):
        if not p.exists():
            raise MissingArtifact(f"no such manifest or directory: {p}")
        files = [p] if p.is_file() else sorted(p.rglob("manifest.json"))
        for f in files:
            man = read_manifest(f)
            if man and "command" in man:
                found.append((f.parent, man))
    return found


def _fmt(v, digits=1):
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def render_table(reports: list[EvalReport]) -> str:
    """Plain-text grid: one row per (case, method), Dice % and ASSD mm per class."""
    cases = sorted({r.case for r in reports})
    lines = []
    for case in cases:
        reps = sorted((r for r in reports if r.case == case), key=lambda r: (METHOD_ORDER.get(r.method, 99), r.method))
        classes = list(dict.fromkeys(c for r in reps for c in r.dice))
        head = ["method"] + [f"{c} Dice%" for c in classes] + [f"{c} ASSD" for c in classes]
        rows = [[r.method] + [_fmt(r.dice.get(c)) for c in classes] + [_fmt(r.assd.get(c), 2) for c in classes]
                for r in reps]
        widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
        lines.append(f"[{case}]")
        for row in [head] + rows:
            lines.append("  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip())
        lines.append("")
    return "\n".join(lines)


def _plot_curves(train_runs: list[tuple[str, str, list[dict]]], out: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for case in sorted({c for c, _, _ in train_runs}):
        runs = sorted((r for r in train_runs if r[0] == case), key=lambda r: (METHOD_ORDER.get(r[1], 99), r[1]))
        fig, (ax_d, ax_l) = plt.subplots(1, 2, figsize=(11, 4))
        for _, method, rows in runs:
            val = [r for r in rows if r["split"] == "validation"]
            for cls in dict.fromkeys(r["class"] for r in val):
                pts = [(r["epoch"], r["dice"]) for r in val if r["class"] == cls]
                ax_d.plot(*zip(*pts), marker="o", label=f"{method} / {cls}")
            tr = [(r["epoch"], r["loss_total"]) for r in rows if r["split"] == "train" and r["loss_total"] is not None]
            if tr:
                ax_l.plot(*zip(*tr), label=method)
        ax_d.set(xlabel="epoch", ylabel="validation Dice", ylim=(0, 1), title=f"{case}: per-class validation Dice")
        ax_l.set(xlabel="epoch", ylabel="training loss", yscale="log", title=f"{case}: training loss")
        for ax in (ax_d, ax_l):
            ax.grid(alpha=0.3)
            ax.legend(fontsize=7)
        fig.tight_layout()
        name = f"curves_{case}.png"
        fig.savefig(out / name, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(name)
    return written


def cmd_report(cfg: ExperimentConfig, sources, plots: bool = True) -> dict:
    manifests = collect_manifests(sources)
    evals = [(d, m) for d, m in manifests if m["command"] == "evaluate"]
    if not evals:
        raise MissingArtifact(f"no evaluation manifests found under {[str(s) for s in sources]} "
                              "(run `incseg evaluate` first)")
    t0 = time.time()
    reports, baselines, old_classes = [], {}, {}
    for d, man in evals:
        for rep in read_report_csv(d / man["report_csv"]):
            if man["method"] == "initial":
                baselines[rep.case] = rep
            else:
                reports.append(rep)
            old_classes[rep.case] = man.get("old_classes", [])
    out = cfg.root / "report"
    out.mkdir(parents=True, exist_ok=True)
    reports.sort(key=lambda r: (r.case, METHOD_ORDER.get(r.method, 99), r.method))
    write_report_csv(reports, out / "table.csv")
    text = render_table(reports)
    (out / "table.txt").write_text(text)

    retention_rows = []
    for case, base in sorted(baselines.items()):
        after = [r for r in reports if r.case == case]
        if not after:
            continue
        ret = retention_report(base, after, old_classes[case])
        for method, deltas in ret.deltas.items():
            for cls, delta in deltas.items():
                retention_rows.append(f"{case},{method},{cls},{base.dice[cls]!r},{delta!r}")
    (out / "retention.csv").write_text("case,method,class,dice_before,dice_delta\n" + "".join(
        r + "\n" for r in retention_rows))

    images = []
    if plots:
        train_runs = []
        for d, man in manifests:
            if man["command"] in ("train-init", "train-inc") and man.get("epoch_csv"):
                label = man.get("method") or "initial"
                train_runs.append((f"case{man['config']['experiment']['case']}", label,
                                   read_epoch_csv(d / man["epoch_csv"])))
        if train_runs:
            images = _plot_curves(train_runs, out)
    summary = {"rows": len(reports), "cases": sorted({r.case for r in reports}), "images": images,
               "sources": [str(d) for d, _ in evals], "runtime_s": round(time.time() - t0, 3),
               "code_version": code_version(), "format_version": MANIFEST_VERSION, "command": "report"}
    (out / "report_manifest.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(text)
    return summary


def cmd_run(cfg: ExperimentConfig, force: bool = False, parallel_methods: int = 1, plots: bool = True) -> dict:
    """Whole pipeline for one case: synth, initial training, exemplars, incremental runs, evaluation, report."""
    cmd_synth(cfg, force)
    cmd_train_init(cfg, force)
    for m in cfg.methods:
        if m in EXEMPLAR_METHODS:
            cmd_select_exemplars(cfg, m, force)
    cmd_train_inc_all(cfg, cfg.methods, force, parallel_methods)
    cmd_evaluate(cfg, force)
    return cmd_report(cfg, [cfg.root / "eval", cfg.root / "init", cfg.root / "inc"], plots)


# -- entry point ----------------------------------------------------------------------


COMMON_DEFAULTS = {"config": None, "print_config": False, "output": None, "seed": None, "case": None,
                   "parallel": None, "force": False, "verbose": False}


def _common_options() -> argparse.ArgumentParser:
    # accepted before or after the subcommand
    c = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    c.add_argument("-c", "--config", help="INI experiment config")
    c.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    c.add_argument("--output", help=f"output root (env {OUTPUT_ENV} takes precedence)")
    c.add_argument("--seed", type=int, help="master seed override")
    c.add_argument("--case", type=int, help="scenario case override (1, 2 or 3)")
    c.add_argument("--parallel", type=int, metavar="N", help="worker threads for MC inference and distance matrices")
    c.add_argument("--force", action="store_true", help="recompute even if outputs are up to date")
    c.add_argument("-v", "--verbose", action="store_true")
    return c


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    p = argparse.ArgumentParser(prog="incseg", description="Class-incremental segmentation experiments.",
                                parents=[common])
    sub = p.add_subparsers(dest="command")

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    add("synth", help="generate the synthetic corpus")
    add("train-init", help="train the initial network")
    s = add("select-exemplars", help="select and store exemplars")
    s.add_argument("--method", action="append", choices=EXEMPLAR_METHODS,
                   help="repeatable; default: the exemplar methods in the config")
    s = add("train-inc", help="incremental training")
    s.add_argument("--method", action="append", choices=METHODS, help="repeatable; default: config methods")
    s.add_argument("--parallel-methods", type=int, default=1, metavar="N")
    s = add("evaluate", help="evaluate checkpoints on the test volumes")
    s.add_argument("--only", action="append", help="restrict to 'initial' or method names")
    s.add_argument("--checkpoint", action="append", default=[], metavar="NAME=PATH",
                   help="evaluate an extra checkpoint under NAME")
    s = add("report", help="comparison table and curves from run manifests")
    s.add_argument("sources", nargs="*", help="manifest files or directories (default: output root)")
    s.add_argument("--no-plots", action="store_true")
    s = add("run", help="full pipeline for one case")
    s.add_argument("--parallel-methods", type=int, default=1, metavar="N")
    s.add_argument("--no-plots", action="store_true")
    return p


def _dispatch(args, cfg: ExperimentConfig):
    if args.command == "synth":
        return cmd_synth(cfg, args.force)
    if args.command == "train-init":
        return cmd_train_init(cfg, args.force)
    if args.command == "select-exemplars":
        methods = args.method or [m for m in cfg.methods if m in EXEMPLAR_METHODS]
        if not methods:
            raise ConfigError("no exemplar methods requested or configured")
        return {m: cmd_select_exemplars(cfg, m, args.force) for m in methods}
    if args.command == "train-inc":
        return cmd_train_inc_all(cfg, args.method or cfg.methods, args.force, args.parallel_methods)
    if args.command == "evaluate":
        extra = {}
        for item in args.checkpoint:
            name, sep, path = item.partition("=")
            if not sep or not name or not path:
                raise ConfigError(f"--checkpoint expects NAME=PATH, got {item!r}")
            extra[name] = Path(path)
        only = args.only if args.only is not None else ([] if extra else None)
        return cmd_evaluate(cfg, args.force, only, extra)
    if args.command == "report":
        return cmd_report(cfg, args.sources or [cfg.root], not args.no_plots)
    if args.command == "run":
        return cmd_run(cfg, args.force, args.parallel_methods, not args.no_plots)
    raise ConfigError("no command given")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, value in COMMON_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"output": args.output, "seed": args.seed, "case": args.case})
        if args.parallel is not None:
            if args.parallel < 1:
                raise ConfigError("--parallel must be >= 1")
            cfg.train = replace(cfg.train, workers=args.parallel)
        if args.print_config:
            sys.stdout.write(format_config(cfg))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise ConfigError("no command given")
        result = _dispatch(args, cfg)
        if args.command != "report" and args.command != "run":
            print(json.dumps(result) if isinstance(result, dict) else result)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingError, CheckpointError, DatasetError, ExemplarError, MetricError, SynthError,
            OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
