"""Command-line surface: model building, inference, evaluation, synthetic

data generation and latency benchmarking.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error. Every
run emits machine-readable JSON (stdout) or a diagnostic line (stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import synth as synth_mod
from .errors import CprError
from .local_retrieval import set_row_parallelism
from .metrics import evaluate
from .pipeline import CprConfig, build_model, infer, load_model, save_model
from .tensor_io import FeatureTensor, load_manifest, read_tensor, write_tensor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config(args) -> CprConfig:
    doc: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CprError(f"config file not found: {path}")
        doc = json.loads(path.read_text())
    flag_map = {
        "k_neighbors": "k_neighbors",
        "grid_s": "grid_s",
        "n_clusters": "n_clusters",
        "tau": "tau",
        "top_t": "top_t",
    }
    for field, flag in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[field] = value
    if getattr(args, "feb", None) is not None:
        doc["feb_enabled"] = args.feb
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    elif "seed" not in doc and os.environ.get("CPR_SEED"):
        doc["seed"] = int(os.environ["CPR_SEED"])
    try:
        return CprConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise CprError(f"bad config: {e}") from e


def _write_pgm(values: np.ndarray, path: Path) -> None:
    """P5 grayscale, min-max normalized to [0, 255]."""
    lo, hi = float(values.min()), float(values.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = ((values - lo) * scale).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def cmd_build(args) -> int:
    config = _load_config(args)
    t0 = time.perf_counter()
    manifest = load_manifest(args.manifest)
    model = build_model(manifest, config)
    save_model(model, args.out)
    summary = {
        "n_references": model.n_references,
        "shapes": {str(s): list(model.banks[s].grid_shape) for s in model.scales},
        "feb": model.feb is not None,
        "seed": model.config.seed,
        "build_seconds": round(time.perf_counter() - t0, 6),
        "out": str(args.out),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _query_tensors(entry) -> dict[int, FeatureTensor]:
    return {s: read_tensor(p) for s, p in entry.tensor_paths.items()}


def cmd_infer(args) -> int:
    model = load_model(args.model)
    manifest = load_manifest(args.query)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run_one(entry):
        result = infer(model, _query_tensors(entry))
        map_path = out_dir / f"{entry.image_id}.cprt"
        write_tensor(
            FeatureTensor(result.anomaly_map.values[:, :, None], scale_id=1), map_path
        )
        if args.pgm:
            _write_pgm(result.anomaly_map.values, out_dir / f"{entry.image_id}.pgm")
        return {
            "image_id": entry.image_id,
            "image_score": result.image_score,
            "map_path": map_path.name,
            "neighbor_ids": result.neighbor_ids,
            "neighbor_image_ids": [
                model.global_index.image_ids[i] for i in result.neighbor_ids
            ],
        }

    if args.workers > 1:
        set_row_parallelism(False)
        try:
            # single-threaded BLAS: worker threads already saturate the cores
            with threadpool_limits(limits=1, user_api="blas"):
                with ThreadPoolExecutor(max_workers=args.workers) as pool:
                    lines = list(pool.map(run_one, manifest.entries))
        finally:
            set_row_parallelism(True)
    else:
        lines = [run_one(e) for e in manifest.entries]

    with open(out_dir / "index.jsonl", "w") as f:
        for line in lines:
            f.write(json.dumps(line, sort_keys=True) + "\n")
    print(json.dumps({"n_queries": len(lines), "out": str(out_dir)}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    truth = load_manifest(args.truth)
    pred_dir = Path(args.pred)
    index_path = pred_dir / "index.jsonl"
    if not index_path.is_file():
        raise CprError(f"prediction index not found: {index_path}")
    by_id = {}
    with open(index_path) as f:
        for line in f:
            doc = json.loads(line)
            by_id[doc["image_id"]] = doc

    scores, labels, maps, masks = [], [], [], []
    for entry in truth.entries:
        if entry.image_id not in by_id:
            raise CprError(f"missing prediction for {entry.image_id!r}")
        if entry.label == "unknown":
            raise CprError(f"entry {entry.image_id!r} has unknown label")
        doc = by_id[entry.image_id]
        amap = read_tensor(pred_dir / doc["map_path"]).data[:, :, 0]
        scores.append(doc["image_score"])
        labels.append(1 if entry.label == "anomalous" else 0)
        if entry.ground_truth_mask_path is not None:
            mask = read_tensor(entry.ground_truth_mask_path).data[:, :, 0]
        elif entry.label == "normal":
            mask = np.zeros_like(amap)
        else:
            raise CprError(f"anomalous entry {entry.image_id!r} lacks a mask")
        if mask.shape != amap.shape:
            raise CprError(
                f"mask shape {mask.shape} != map shape {amap.shape} for {entry.image_id!r}"
            )
        maps.append(amap)
        masks.append(mask.astype(np.int64))

    report = evaluate(scores, labels, maps, masks, fpr_limit=args.fpr_limit)
    print(json.dumps(report.to_dict(), sort_keys=True))
    if args.per_image_csv:
        with open(args.per_image_csv, "w") as f:
            f.write("image_id,label,image_score\n")
            for entry, score, label in zip(truth.entries, scores, labels):
                f.write(f"{entry.image_id},{label},{score}\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = synth_mod.SynthSpec(
            n_normal=args.n_normal,
            n_anomalous=args.n_anomalous,
            grid_h=args.grid[0],
            grid_w=args.grid[1],
            dim=args.dim,
            seed=args.seed if args.seed is not None else int(os.environ.get("CPR_SEED", 0)),
        )
    except ValueError as e:
        raise _UsageError(str(e)) from e
    summary = synth_mod.generate_dataset(spec, args.out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _percentiles(samples: list[float]) -> dict:
    arr = np.asarray(samples) * 1000.0  # ms
    return {
        "p50_ms": float(np.percentile(arr, 50)),
        "p90_ms": float(np.percentile(arr, 90)),
        "p99_ms": float(np.percentile(arr, 99)),
        "mean_ms": float(arr.mean()),
        "min_ms": float(arr.min()),
        "max_ms": float(arr.max()),
    }


def cmd_bench(args) -> int:
    try:
        model = load_model(args.model)
        manifest = load_manifest(args.query)
    except CprError:
        raise
    entry = manifest.entries[0]
    query = _query_tensors(entry)
    if args.iters <= args.warmup:
        raise _UsageError("iters must exceed warmup")

    stage_samples: dict[str, list[float]] = {}

    def run_once():
        timings: dict = {}
        infer(model, query, timings=timings)
        return timings

    def record(timings):
        for k, v in timings.items():
            stage_samples.setdefault(k, []).append(v)

    measured = args.iters - args.warmup
    with threadpool_limits(limits=1, user_api="blas"):
        if args.threads > 1:
            set_row_parallelism(False)
            try:
                with ThreadPoolExecutor(max_workers=args.threads) as pool:
                    list(pool.map(lambda _: run_once(), range(args.warmup)))
                    wall0 = time.perf_counter()
                    for timings in pool.map(lambda _: run_once(), range(measured)):
                        record(timings)
                    wall = time.perf_counter() - wall0
            finally:
                set_row_parallelism(True)
        else:
            for _ in range(args.warmup):
                run_once()
            wall0 = time.perf_counter()
            for _ in range(measured):
                record(run_once())
            wall = time.perf_counter() - wall0

    report = {
        "iters": args.iters,
        "warmup": args.warmup,
        "measured": measured,
        "threads": args.threads,
        "image_id": entry.image_id,
        "stages": {k: _percentiles(v) for k, v in sorted(stage_samples.items())},
        "effective_per_query_ms": wall / measured * 1000.0,
        "throughput_qps": measured / wall if wall > 0 else float("inf"),
    }
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="cpr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--k-neighbors", dest="k_neighbors", type=int, default=None)
        p.add_argument("--grid-s", dest="grid_s", type=int, default=None)
        p.add_argument("--n-clusters", dest="n_clusters", type=int, default=None)
        p.add_argument("--tau", type=int, default=None)
        p.add_argument("--top-t", dest="top_t", type=int, default=None)
        feb = p.add_mutually_exclusive_group()
        feb.add_argument("--feb", dest="feb", action="store_true", default=None)
        feb.add_argument("--no-feb", dest="feb", action="store_false", default=None)

    p_build = sub.add_parser("build", help="build a model bundle from a normal-only manifest")
    p_build.add_argument("--manifest", required=True)
    p_build.add_argument("--out", required=True)
    add_config_flags(p_build)
    p_build.set_defaults(func=cmd_build)

    p_infer = sub.add_parser("infer", help="run inference for every manifest entry")
    p_infer.add_argument("--model", required=True)
    p_infer.add_argument("--query", required=True, help="query manifest JSON")
    p_infer.add_argument("--out", required=True, help="output directory")
    p_infer.add_argument("--workers", type=int, default=1)
    p_infer.add_argument("--pgm", action="store_true", help="also write PGM previews")
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--pred", required=True, help="directory written by infer")
    p_eval.add_argument("--truth", required=True, help="manifest with labels and masks")
    p_eval.add_argument("--fpr-limit", dest="fpr_limit", type=float, default=0.3)
    p_eval.add_argument("--per-image-csv", dest="per_image_csv", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n-normal", dest="n_normal", type=int, required=True)
    p_synth.add_argument("--n-anomalous", dest="n_anomalous", type=int, required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--grid", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))
    p_synth.add_argument("--dim", type=int, default=16)
    p_synth.set_defaults(func=cmd_synth)

    p_bench = sub.add_parser("bench", help="measure per-stage inference latency")
    p_bench.add_argument("--model", required=True)
    p_bench.add_argument("--query", required=True, help="manifest; first entry is used")
    p_bench.add_argument("--iters", type=int, default=2000)
    p_bench.add_argument("--warmup", type=int, default=1000)
    p_bench.add_argument("--threads", type=int, default=1)
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CprError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # pragma: no cover - defensive
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
