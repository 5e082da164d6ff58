"""Grid experiments: every (strategy, n, eta, alpha, seed) cell trained and evaluated.

Layout under ``output_dir``::

    data/n{n}_eta{eta}/         synthetic benchmark, written once, then loaded
    cells/<cell>/checkpoint.bin
    cells/<cell>/history.tsv
    cells/<cell>/disc_*         critic checkpoint, loss history, score range (vluu-adv)
    cells/<cell>/result.tsv     one results row; its presence marks the cell done
    <name>.tsv                  results table, one section per (n, eta, alpha)
    <name>_summary.txt          ranking of strategies per section and seed
    <name>.json                 all finished cells, machine readable

Cells are independent, so a rerun skips finished cells and a failed cell does
not lose the others.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vluu.checkpoint import write_checkpoint, write_disc_logs, write_history
from vluu.data import load_dataset, read_manifest, save_dataset
from vluu.errors import ConfigError, VluuError
from vluu.evaluate import evaluate, footer, header, parse_row, result_row
from vluu.synth import SynthConfig, make_benchmark
from vluu.train import STRATEGIES, TrainConfig, train

log = logging.getLogger(__name__)

VICINAL = ("vluu", "vluu-adv")


@dataclass
class ExperimentSpec:
    benchmark: dict | str = field(default_factory=dict)
    strategies: list = field(default_factory=lambda: ["mbg", "imbp", "vluu", "oracle"])
    n: list = field(default_factory=lambda: [10])
    eta: list = field(default_factory=lambda: [1])
    alpha: list = field(default_factory=lambda: [0.1])
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "experiment"
    name: str = "results"
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ("strategies", "n", "eta", "alpha", "seeds"):
            if not getattr(self, key):
                raise ConfigError(f"experiment grid '{key}' is empty")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}")
        if any(int(n) < 1 for n in self.n) or any(e <= 0 for e in self.eta):
            raise ConfigError("n must be >= 1 and eta > 0")
        forbidden = {"strategy", "seed", "alpha"} & set(self.train)
        if forbidden:
            raise ConfigError(f"set {sorted(forbidden)} through the grid, not 'train'")
        TrainConfig.from_dict(self.train)  # validates keys

    @classmethod
    def from_dict(cls, d, base_dir=None):
        import dataclasses
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("benchmark"), str) and base_dir is not None:
            d["benchmark"] = str(Path(base_dir) / d["benchmark"])
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read experiment spec {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("experiment spec must be a JSON object")
        return cls.from_dict(d, base_dir=Path(path).parent)

    def synth_config(self):
        if isinstance(self.benchmark, str):
            return SynthConfig.from_file(self.benchmark)
        return SynthConfig.from_dict(self.benchmark)


@dataclass(frozen=True)
class Cell:
    strategy: str
    n: int
    eta: float
    alpha: float | None  # None for strategies that never sample Dirichlet weights
    seed: int

    @property
    def key(self):
        a = "na" if self.alpha is None else f"{self.alpha:g}"
        return f"{self.strategy}_n{self.n}_eta{self.eta:g}_a{a}_s{self.seed}"

    @property
    def group(self):
        return (self.n, self.eta, self.alpha)


def class_counts(n, eta, k):
    """The last class keeps ``n`` images; the other K-1 get ``eta * n``."""
    return [int(round(eta * n))] * (k - 1) + [int(n)]


def cells(spec):
    seen = []
    for s, n, eta, a, seed in itertools.product(
            spec.strategies, spec.n, spec.eta, spec.alpha, spec.seeds):
        cell = Cell(s, int(n), float(eta), float(a) if s in VICINAL else None, int(seed))
        if cell not in seen:
            seen.append(cell)
    return seen


def data_dir(output_dir, n, eta):
    return Path(output_dir) / "data" / f"n{n}_eta{eta:g}"


def write_benchmark(config, directory, n_per_class=None, n_test=None):
    """Generate a benchmark and write class_j/, test/ and oracle/ under ``directory``."""
    bm = make_benchmark(config, n_per_class, n_test)
    echo = config.to_dict()
    if n_per_class is not None:
        echo["n_per_class"] = list(n_per_class)
    directory = Path(directory)
    for d in bm.partial:
        save_dataset(d, directory / f"class_{d.class_index}", echo)
    save_dataset(bm.test, directory / "test", echo)
    save_dataset(bm.oracle, directory / "oracle", echo)
    return bm


def load_benchmark(directory):
    """(partial datasets in class order, test set, oracle set) from a synth directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise VluuError(f"data directory {directory} does not exist")
    classes = sorted((p for p in directory.glob("class_*") if p.is_dir()),
                     key=lambda p: int(p.name.split("_")[1]))
    partial = [load_dataset(p) for p in classes]
    test = load_dataset(directory / "test") if (directory / "test").is_dir() else None
    oracle = load_dataset(directory / "oracle") if (directory / "oracle").is_dir() else None
    return partial, test, oracle


def ensure_benchmark(spec, n, eta):
    config = spec.synth_config()
    counts = class_counts(n, eta, config.k)
    d = data_dir(spec.output_dir, n, eta)
    if not (d / "test" / "manifest.json").exists():
        write_benchmark(config, d, counts)
    else:
        echo = read_manifest(d / "class_1").get("config", {})
        if echo.get("n_per_class") != counts:
            raise ConfigError(f"{d} holds a benchmark with different class counts")
    return d


def run_cell(spec, cell, on_progress=None):
    """Train and evaluate one cell; returns its parsed results row."""
    out = Path(spec.output_dir) / "cells" / cell.key
    done = out / "result.tsv"
    if done.exists():
        return parse_row(done.read_text().splitlines()[-1])
    out.mkdir(parents=True, exist_ok=True)
    partial, test, oracle = load_benchmark(ensure_benchmark(spec, cell.n, cell.eta))
    params = dict(spec.train, strategy=cell.strategy, seed=cell.seed)
    if cell.alpha is not None:
        params["alpha"] = cell.alpha
    config = TrainConfig.from_dict(params)
    meta = {"strategy": cell.strategy, "seed": cell.seed, "train_config": config.to_dict()}

    def checkpoint(step, model, history):
        write_checkpoint(out / "checkpoint.bin", model, step, meta)
        if on_progress is not None:
            on_progress(cell, step)

    result = train(oracle if cell.strategy == "oracle" else partial, config, checkpoint)
    write_history(out / "history.tsv", result.history)
    if result.disc is not None:
        write_checkpoint(out / "disc_checkpoint.bin", result.disc, config.total_steps, meta)
        write_disc_logs(out, result.history)
    row = result_row(cell.strategy, cell.seed, evaluate(result.model, test))
    done.write_text(row + "\n")
    return parse_row(row)


def _run_cell_safe(spec, cell):
    try:
        return cell, run_cell(spec, cell), None
    except Exception as exc:  # reported by the caller, other cells keep going
        return cell, None, f"{type(exc).__name__}: {exc}"


def run_experiment(spec, jobs=1):
    """Run every cell (skipping finished ones) and write the table and summary."""
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    todo = cells(spec)
    for n, eta in sorted({(c.n, c.eta) for c in todo}):
        ensure_benchmark(spec, n, eta)
    results, failures = {}, {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell_safe, [spec] * len(todo), todo))
    else:
        outcomes = [_run_cell_safe(spec, c) for c in todo]
    for cell, row, err in outcomes:
        if err is None:
            results[cell] = row
            log.info("%s miou=%.4f", cell.key, row["miou"])
        else:
            failures[cell] = err
            log.error("%s failed: %s", cell.key, err)
    k = spec.synth_config().k
    (out / f"{spec.name}.tsv").write_text(format_table(todo, results, k))
    (out / f"{spec.name}_summary.txt").write_text(format_summary(todo, results))
    (out / f"{spec.name}.json").write_text(json.dumps(
        [dict(results[c], cell=c.key, n=c.n, eta=c.eta, alpha=c.alpha)
         for c in todo if c in results], indent=1) + "\n")
    if failures:
        msg = "; ".join(f"{c.key}: {e}" for c, e in failures.items())
        raise VluuError(f"{len(failures)} of {len(todo)} cells failed: {msg}")
    return results


def _groups(todo):
    """Sections keyed by (n, eta, alpha); alpha-free strategies join every alpha section."""
    alphas = sorted({c.alpha for c in todo if c.alpha is not None}) or [None]
    sections = {}
    for c in todo:
        for a in ([c.alpha] if c.alpha is not None else alphas):
            sections.setdefault((c.n, c.eta, a), []).append(c)
    return sections


def _label(group):
    n, eta, a = group
    return f"n={n} eta={eta:g} alpha={'-' if a is None else f'{a:g}'}"


def format_table(todo, results, k):
    lines = []
    for group, members in _groups(todo).items():
        lines.append(f"# {_label(group)}")
        lines.append(header(k))
        rows = []
        for c in members:
            if c in results:
                r = results[c]
                lines.append(result_row(r["strategy"], r["seed"],
                                        _Metrics(r["ious"], r["miou"])))
                rows.append(r)
            else:
                lines.append(f"# {c.strategy}\t{c.seed}\tmissing")
        lines += footer(rows)
        lines.append("")
    return "\n".join(lines)


@dataclass
class _Metrics:
    ious: list
    miou: float


def format_summary(todo, results):
    lines = []
    for group, members in _groups(todo).items():
        lines.append(f"[{_label(group)}]")
        by_seed = {}
        for c in members:
            if c in results:
                by_seed.setdefault(c.seed, []).append((results[c]["miou"], c.strategy))
        for seed, entries in sorted(by_seed.items()):
            ranked = sorted(entries, key=lambda e: (-e[0], e[1]))
            order = " > ".join(f"{s} ({m:.4f})" for m, s in ranked)
            lines.append(f"seed {seed}: winner {ranked[0][1]}; {order}")
        means = {}
        for c in members:
            if c in results:
                means.setdefault(c.strategy, []).append(results[c]["miou"])
        if means:
            best = max(means, key=lambda s: np.mean(means[s]))
            lines.append(f"mean winner: {best} ({np.mean(means[best]):.4f})")
        lines.append("")
    return "\n".join(lines)
