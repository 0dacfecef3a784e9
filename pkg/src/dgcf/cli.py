"""Command-line front end: build graphs, run static/dynamic sweeps, compare, export filters.

An experiment is described by one JSON document (see ``README.md``);
command-line flags override values from the file, which override defaults.

Exit codes: 0 success, 2 configuration/data error, 3 partial sweep failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .builders import correlation_graph, cosine_similarity_graph, distance_matrix_graph, synthetic_dataset
from .dataset import Dataset, load_dataset, save_dataset
from .dynamic import ClassFilters
from .errors import DGCFError, InvalidConfig, MissingCell, MissingDumps, ParseError
from .graph import Graph, build_neighborhood_table
from .stats import compare_models, mann_whitney_u, shapiro_wilk, student_t_test
from .training import ExperimentResult, ModelConfig, TrainResult, train

log = logging.getLogger("dgcf")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_IO = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "DGCF_OUTPUT_ROOT"
SIDES = ("static", "dynamic")
HIST_BINS = 20


# --- experiment spec ------------------------------------------------------------


@dataclass
class ExperimentSpec:
    dataset: dict[str, Any]
    graph_builder: dict[str, Any] | None = None
    k: int = 4
    filter_counts: list[int] = field(default_factory=lambda: [2, 4])
    second_layer: str = "Pooling"
    model: dict[str, Any] = field(default_factory=dict)
    repetitions: int = 10
    alpha: float = 0.05
    output_dir: str | None = None
    base_seed: int = 0
    dump_repetitions: int = 1

    @classmethod
    def from_json(cls, obj: dict) -> ExperimentSpec:
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown experiment keys: {sorted(unknown)}")
        if "dataset" not in obj:
            raise InvalidConfig("experiment spec needs a 'dataset' entry")
        spec = cls(**obj)
        spec.validate()
        return spec

    def to_json(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def validate(self) -> None:
        if not self.filter_counts or any(int(t) < 1 for t in self.filter_counts):
            raise InvalidConfig(f"filter_counts must be positive integers, got {self.filter_counts}")
        if len(set(self.filter_counts)) != len(self.filter_counts):
            raise InvalidConfig("filter_counts must be distinct")
        if self.repetitions < 1:
            raise InvalidConfig("repetitions must be >= 1")
        if not 0 < self.alpha < 1:
            raise InvalidConfig("alpha must be in (0, 1)")
        if "layer_spec" in self.model or "seed" in self.model or "k" in self.model:
            raise InvalidConfig("model may not set layer_spec, seed or k; use filter_counts, base_seed and k")
        kinds = set(self.dataset) & {"synthetic", "files"}
        if len(kinds) != 1:
            raise InvalidConfig("dataset must contain exactly one of 'synthetic' or 'files'")
        referenced = list(self.dataset.get("files", {}).values())
        if self.graph_builder and "input" in self.graph_builder:
            referenced.append(self.graph_builder["input"])
        for path in referenced:
            if isinstance(path, str) and not Path(path).exists():
                raise InvalidConfig(f"referenced file does not exist: {path}")
        for t in self.filter_counts:
            for side in SIDES:
                self.model_config(t, side)

    def model_config(self, t: int, side: str) -> ModelConfig:
        first = f"DC{t}" if side == "dynamic" else f"C{t}"
        spec = f"{first}-{self.second_layer}" if self.second_layer else first
        return ModelConfig.from_json({**self.model, "layer_spec": spec, "k": self.k, "seed": self.base_seed})


def _cell_name(t: int, side: str) -> str:
    return f"{side}_t{t}"


def _read_matrix(path: str | Path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def build_graph_from_spec(spec: ExperimentSpec) -> Graph:
    """Graph named by ``graph_builder``, or the synthetic dataset's own graph."""
    gb = spec.graph_builder
    if gb is None:
        if "synthetic" in spec.dataset:
            return load_spec_dataset(spec).graph
        path = spec.dataset["files"].get("graph")
        if path is None:
            raise InvalidConfig("file dataset without 'graph' needs a graph_builder")
        return Graph.load(path)
    kind = gb.get("kind")
    source = gb.get("input")
    if source is None:
        raise InvalidConfig("graph_builder needs an 'input' matrix file")
    try:
        matrix = _read_matrix(source)
        if kind == "correlation":
            return correlation_graph(matrix, float(gb["threshold"]))[0]
        if kind == "cosine":
            return cosine_similarity_graph(matrix, int(gb.get("q", spec.k - 1)))
        if kind == "distance":
            return distance_matrix_graph(matrix, int(gb.get("q", spec.k - 1)))
    except KeyError as exc:
        raise InvalidConfig(f"graph_builder {kind!r} is missing {exc}") from exc
    except DGCFError as exc:
        exc.args = (f"{source}: {exc}",)
        raise
    raise InvalidConfig(f"unknown graph_builder kind {kind!r}")


def load_spec_dataset(spec: ExperimentSpec) -> Dataset:
    if "synthetic" in spec.dataset:
        cfg = dict(spec.dataset["synthetic"])
        cfg.setdefault("k", spec.k)
        try:
            return synthetic_dataset(**cfg)
        except TypeError as exc:
            raise InvalidConfig(f"bad synthetic dataset config: {exc}") from exc
    files = spec.dataset["files"]
    graph = files["graph"] if "graph" in files and spec.graph_builder is None else build_graph_from_spec(spec)
    return load_dataset(files["features"], files["labels"], graph, n_classes=files.get("n_classes"),
                        k=spec.k, split_path=files.get("split"))


def load_spec(path: str | Path | None, overrides: dict[str, Any]) -> ExperimentSpec:
    obj: dict[str, Any] = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    obj.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec.from_json(obj)


def _output_dir(spec: ExperimentSpec, flag: str | None) -> Path:
    if flag:
        return Path(flag)
    if spec.output_dir:
        return Path(spec.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / "experiment"


# --- serialisation helpers ----------------------------------------------------------


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n")


def _arr(a: np.ndarray) -> list:
    return np.asarray(a).tolist()


def dump_to_json(dump: dict) -> dict:
    out: dict[str, Any] = {"epoch": dump["epoch"]}
    if "filters" in dump:
        out["filters"] = _arr(dump["filters"])
        return out
    classes = {}
    for c, cf in dump["classes"].items():
        cf: ClassFilters
        classes[str(c)] = {"count": cf.count, "mean": None if cf.empty else _arr(cf.mean),
                           "std": None if cf.empty else _arr(cf.std)}
    out["classes"] = classes
    return out


# --- build-graph ------------------------------------------------------------------


def cmd_build_graph(spec: ExperimentSpec, out: Path) -> dict:
    graph = build_graph_from_spec(spec)
    table = build_neighborhood_table(graph, spec.k)
    out.mkdir(parents=True, exist_ok=True)
    graph.save(out / "graph.json")
    table.to_csv(out / "table.csv")
    info = {"n_nodes": graph.n_nodes, "n_edges": graph.n_edges, "k": spec.k}
    print(f"graph: {graph.n_nodes} nodes, {graph.n_edges} edges -> {out / 'graph.json'}")
    return info


# --- run ----------------------------------------------------------------------------


def _train_task(args):
    dataset, config = args
    try:
        return train(dataset, config), None
    except Exception as exc:  # recorded per cell, the sweep continues
        return None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"


def cmd_run(spec: ExperimentSpec, out: Path, jobs: int = 1) -> int:
    """Run every (filter count, side) cell; returns the exit code."""
    dataset = load_spec_dataset(spec).with_k(spec.k)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    _write_json(out / "spec.json", spec.to_json())
    save_dataset(dataset, out / "dataset")

    tasks, keys = [], []
    for t in spec.filter_counts:
        for side in SIDES:
            base = spec.model_config(t, side)
            for r in range(spec.repetitions):
                cfg = replace(base, seed=spec.base_seed + r, record_filters=r < spec.dump_repetitions)
                tasks.append((dataset, cfg))
                keys.append((t, side, r))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_train_task, tasks))
    else:
        outcomes = [_train_task(task) for task in tasks]

    by_cell: dict[tuple[int, str], list] = {}
    for (t, side, r), outcome in zip(keys, outcomes):
        by_cell.setdefault((t, side), []).append((r, outcome))

    failed = []
    summary_rows = []
    for t in spec.filter_counts:
        for side in SIDES:
            cell_dir = out / "cells" / _cell_name(t, side)
            cell_dir.mkdir(parents=True, exist_ok=True)
            runs: list[TrainResult] = []
            errors = []
            for r, (result, err) in by_cell[(t, side)]:
                if err is not None:
                    errors.append({"repetition": r, "error": err})
                    continue
                runs.append(result)
                result.write_history_csv(cell_dir / f"history_rep{r:02d}.csv")
                result.checkpoint.save(cell_dir / f"checkpoint_rep{r:02d}.json")
                if result.filter_dumps:
                    _write_json(cell_dir / f"filters_rep{r:02d}.json",
                                {"side": side, "t": t, "n_classes": dataset.n_classes,
                                 "dumps": [dump_to_json(d) for d in result.filter_dumps]})
            if errors:
                failed.append((t, side))
                _write_json(cell_dir / "errors.json", errors)
                log.error("cell %s: %d repetition(s) failed", _cell_name(t, side), len(errors))
                continue
            exp = ExperimentResult(spec.model_config(t, side), runs)
            exp.save(cell_dir / "result.json")
            s = exp.summary()
            summary_rows.append({"t": t, "side": side, **s})
            print(f"{_cell_name(t, side):>12}: accuracy {s['accuracy_mean']:.4f} +/- {s['accuracy_std']:.4f}, "
                  f"epochs {s['epochs_mean']:.1f}")

    write_summaries(out / "summary", summary_rows)
    _write_json(out / "metadata.json", {
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "elapsed_seconds": round(time.time() - started, 3),
        "failed_cells": [_cell_name(t, s) for t, s in failed],
    })
    return EXIT_PARTIAL if failed else EXIT_OK


def write_summaries(directory: Path, rows: list[dict]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, keys in (("accuracy", ("accuracy_mean", "accuracy_std")), ("epochs", ("epochs_mean", "epochs_std"))):
        with open(directory / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "side", "n", "mean", "std"])
            for row in rows:
                w.writerow([row["t"], row["side"], row["n"], repr(row[keys[0]]), repr(row[keys[1]])])
    _write_json(directory / "summary.json", rows)


# --- compare ------------------------------------------------------------------------


def _cell_accuracies(results_dir: Path, t: int, side: str) -> np.ndarray:
    path = results_dir / "cells" / _cell_name(t, side) / "result.json"
    if not path.exists():
        raise MissingCell(t, side)
    return ExperimentResult.load(path).accuracies


def _filter_counts(results_dir: Path) -> list[int]:
    spec_path = results_dir / "spec.json"
    if spec_path.exists():
        return [int(t) for t in json.loads(spec_path.read_text())["filter_counts"]]
    counts = set()
    for d in (results_dir / "cells").glob("*_t*"):
        counts.add(int(d.name.rsplit("_t", 1)[1]))
    return sorted(counts)


def cmd_compare(results_dir: Path, alpha: float = 0.05) -> list[dict]:
    rows = []
    for t in _filter_counts(results_dir):
        static = _cell_accuracies(results_dir, t, "static")
        dynamic = _cell_accuracies(results_dir, t, "dynamic")
        verdict = compare_models(static, dynamic, alpha)
        rows.append({"t": t, "configuration": f"C{t} vs DC{t}", **verdict.to_json()})
    _write_json(results_dir / "comparison.json", rows)
    print(f"{'configuration':<14} {'test':<13} {'p-value':>10}  conclusion")
    for row in rows:
        p = row["main"]["p_value"]
        ptxt = "< 0.0001" if p < 1e-4 else f"{p:.4f}"
        print(f"{row['configuration']:<14} {row['chosen_test']:<13} {ptxt:>10}  {row['conclusion']}")
    return rows


# --- export-filters -----------------------------------------------------------------


def _histograms(records: list[tuple[dict, np.ndarray]]) -> list[dict]:
    """One histogram per record over bins shared by every record of the series."""
    if not records:
        return []
    values = np.concatenate([v.ravel() for _, v in records])
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, HIST_BINS + 1)
    out = []
    for key, v in records:
        counts, _ = np.histogram(v.ravel(), bins=edges)
        out.append({**key, "bin_edges": _arr(edges), "counts": counts.tolist()})
    return out


def cmd_export_filters(run_dir: Path, repetition: int = 0) -> dict:
    """Ridgeplot histograms and final heatmaps for every cell with filter dumps."""
    files = sorted((run_dir / "cells").glob(f"*/filters_rep{repetition:02d}.json"))
    if not files:
        raise MissingDumps(f"no filters_rep{repetition:02d}.json under {run_dir / 'cells'}")
    analysis = run_dir / "analysis"
    index = {}
    for path in files:
        cell = path.parent.name
        data = json.loads(path.read_text())
        epochs = [d for d in data["dumps"] if d["epoch"] != "final"]
        final = next(d for d in data["dumps"] if d["epoch"] == "final")
        out_dir = analysis / cell
        out_dir.mkdir(parents=True, exist_ok=True)

        records = []
        heatmaps = []
        empty: list[int] = []  # classes without a correctly classified training sample
        if data["side"] == "static":
            for d in epochs:
                F = np.array(d["filters"])
                for m in range(F.shape[2]):
                    records.append(({"epoch": d["epoch"], "filter_index": m}, F[:, :, m]))
            F = np.array(final["filters"])
            for m in range(F.shape[2]):
                heatmaps.append({"filter_index": m, "class": None, "mean": _arr(F[:, :, m])})
            separation = None
        else:
            for d in epochs:
                for c, cf in d["classes"].items():
                    if cf["mean"] is None:
                        continue
                    F = np.array(cf["mean"])
                    for m in range(F.shape[2]):
                        records.append(({"epoch": d["epoch"], "filter_index": m, "class": int(c)}, F[:, :, m]))
            means, stds = {}, {}
            for c, cf in final["classes"].items():
                if cf["mean"] is None:
                    empty.append(int(c))
                    continue
                means[int(c)], stds[int(c)] = np.array(cf["mean"]), np.array(cf["std"])
                for m in range(means[int(c)].shape[2]):
                    heatmaps.append({"filter_index": m, "class": int(c), "count": cf["count"],
                                     "mean": _arr(means[int(c)][:, :, m]), "std": _arr(stds[int(c)][:, :, m])})
            separation = class_separation(means, stds)

        _write_json(out_dir / "ridgeplot.json", _histograms(records))
        _write_json(out_dir / "heatmaps.json", {"side": data["side"], "t": data["t"], "heatmaps": heatmaps,
                                                "class_separation": separation, "empty_classes": empty})
        index[cell] = {"heatmaps": len(heatmaps), "histograms": len(records), "class_separation": separation,
                       "empty_classes": empty}
        print(f"{cell:>12}: {len(heatmaps)} heatmaps, {len(records)} histograms -> {out_dir}")
    _write_json(analysis / "index.json", index)
    return index


def class_separation(means: dict[int, np.ndarray], stds: dict[int, np.ndarray]) -> dict:
    """Pairwise L2 distances between class mean filters against the mean within-class std."""
    classes = sorted(means)
    pairs = {f"{a}-{b}": float(np.linalg.norm(means[a] - means[b]))
             for i, a in enumerate(classes) for b in classes[i + 1:]}
    within = float(np.mean([stds[c].mean() for c in classes])) if classes else float("nan")
    return {"pairwise_l2": pairs, "mean_within_class_std": within,
            "min_pairwise_l2": min(pairs.values()) if pairs else None}


# --- stats --------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ParseError(f"not a list of numbers: {text!r}") from exc


def cmd_stats(test: str, a: list[float], b: list[float] | None, alpha: float) -> dict:
    if test == "shapiro":
        result = shapiro_wilk(a, alpha).to_json()
    elif b is None:
        raise InvalidConfig(f"{test} needs both --a and --b")
    elif test == "ttest":
        result = student_t_test(a, b, alpha).to_json()
    elif test == "mwu":
        result = mann_whitney_u(a, b, alpha).to_json()
    else:
        result = compare_models(a, b, alpha).to_json()
    print(json.dumps(result, indent=1))
    return result


# --- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgcf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def spec_args(sp):
        sp.add_argument("--config", help="experiment spec JSON")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="base seed")
        sp.add_argument("--k", type=int, help="filter size K")

    sp = sub.add_parser("build-graph", help="build a graph and its neighbourhood table")
    spec_args(sp)

    sp = sub.add_parser("run", help="run the static/dynamic sweep")
    spec_args(sp)
    sp.add_argument("--repetitions", type=int)
    sp.add_argument("--filter-counts", type=lambda s: [int(v) for v in s.split(",")])
    sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("compare", help="hypothesis tests on a results directory")
    sp.add_argument("results_dir")
    sp.add_argument("--alpha", type=float, default=0.05)

    sp = sub.add_parser("export-filters", help="ridgeplot/heatmap data from filter dumps")
    sp.add_argument("run_dir")
    sp.add_argument("--repetition", type=int, default=0)

    sp = sub.add_parser("stats", help="run a test on number lists")
    sp.add_argument("test", choices=["shapiro", "ttest", "mwu", "compare"])
    sp.add_argument("--a", required=True, type=_floats, help="first sample (static for compare)")
    sp.add_argument("--b", type=_floats, help="second sample (dynamic for compare)")
    sp.add_argument("--alpha", type=float, default=0.05)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command in ("build-graph", "run"):
            overrides = {"base_seed": args.seed, "k": args.k}
            if args.command == "run":
                overrides.update(repetitions=args.repetitions, filter_counts=args.filter_counts)
            spec = load_spec(args.config, overrides)
            out = _output_dir(spec, args.out)
            if args.command == "build-graph":
                cmd_build_graph(spec, out)
                return EXIT_OK
            return cmd_run(spec, out, args.jobs)
        if args.command == "compare":
            cmd_compare(Path(args.results_dir), args.alpha)
        elif args.command == "export-filters":
            cmd_export_filters(Path(args.run_dir), args.repetition)
        else:
            cmd_stats(args.test, args.a, args.b, args.alpha)
        return EXIT_OK
    except (MissingCell, MissingDumps) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DGCFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
