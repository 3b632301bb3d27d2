"""Command-line interface: quantize, eval, bench, inspect.

Exit codes: 0 success, 1 usage error (bad arguments or config values), 2 data
error (missing or malformed files), 3 numerical failure. The ARBQ_THREADS
environment variable caps both the layer worker pool and the BLAS thread
count; it is applied before numpy is first imported, which is why the heavy
imports in this module sit inside the handlers.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from .errors import DataFormatError, NumericalError, ValidationError

__all__ = ["main", "build_parser"]

EVAL_COLUMNS = (
    "name", "n", "m", "method", "order", "block_k", "cgb", "salient_count",
    "l1", "l2", "output_mse", "shift_post", "col_dev_corr", "plane_bits",
    "bitmap_bits", "scale_bits", "total_bytes", "avg_weight_bits",
)

BENCH_COLUMNS = (
    "n", "m", "samples", "iterations", "block_k", "direct_macs",
    "reform_macs", "direct_seconds", "reform_seconds", "counted_eta",
    "measured_eta", "modelled_eta",
)


def _apply_thread_cap() -> int | None:
    """Honor ARBQ_THREADS; returns the cap (None = hardware default)."""
    raw = os.environ.get("ARBQ_THREADS")
    if raw is None:
        return None
    try:
        threads = int(raw)
    except ValueError:
        raise ValidationError(f"ARBQ_THREADS must be an integer, got {raw!r}")
    if threads <= 0:
        raise ValidationError(f"ARBQ_THREADS must be positive, got {threads}")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))
    return threads


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arbq",
        description="Binary weight quantization: quantize layers, re-evaluate "
        "artifacts, benchmark the calibration error paths, inspect containers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize weight layers to .arbq artifacts")
    q.add_argument("--weights", required=True,
                   help=".arbt file, directory of .arbt files, or manifest .txt")
    q.add_argument("--calib", required=True,
                   help="directory with <name>.calib.arbt files, or 'synthetic'")
    q.add_argument("--config", help="key=value config file (defaults when omitted)")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--seed", type=int, help="override the config seed")

    e = sub.add_parser("eval", help="recompute metrics from quantized artifacts")
    e.add_argument("--weights", required=True,
                   help=".arbt file, directory of .arbt files, or manifest .txt")
    e.add_argument("--quant", required=True, help="directory with .arbq artifacts")
    e.add_argument("--calib", required=True,
                   help="directory with <name>.calib.arbt files, or 'synthetic'")
    e.add_argument("--config", help="key=value config file (defaults when omitted)")
    e.add_argument("--out", required=True,
                   help="report path (.csv) or directory for eval_report.csv")
    e.add_argument("--seed", type=int, help="override the config seed")

    b = sub.add_parser("bench", help="time the direct vs reformulated error paths")
    b.add_argument("--n", type=int, default=1024, help="rows (default 1024)")
    b.add_argument("--m", type=int, default=1024, help="columns (default 1024)")
    b.add_argument("--samples", type=int, default=65536,
                   help="calibration rows B*L (default 65536)")
    b.add_argument("--iterations", type=int, default=15)
    b.add_argument("--block", type=int, default=128, help="column block size")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True,
                   help="report path (.csv) or directory for bench.csv")

    i = sub.add_parser("inspect", help="print a container file's header")
    i.add_argument("path", help=".arbt or .arbq file")
    return parser


def _discover_layers(weights: str) -> list[tuple[str, str]]:
    """Resolve --weights to an ordered [(layer name, .arbt path)] list."""
    if os.path.isdir(weights):
        names = sorted(f for f in os.listdir(weights) if f.endswith(".arbt"))
        if not names:
            raise DataFormatError(f"no .arbt files in {weights}")
        return [(os.path.splitext(f)[0], os.path.join(weights, f)) for f in names]
    if not os.path.exists(weights):
        raise DataFormatError(f"weights path {weights} does not exist")
    if weights.endswith(".arbt"):
        name = os.path.splitext(os.path.basename(weights))[0]
        return [(name, weights)]
    # manifest: one .arbt filename per line, resolved against the manifest dir
    base = os.path.dirname(os.path.abspath(weights))
    out = []
    with open(weights, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            path = line if os.path.isabs(line) else os.path.join(base, line)
            if not path.endswith(".arbt"):
                raise DataFormatError(f"manifest entry {line!r} is not an .arbt file")
            if not os.path.exists(path):
                raise DataFormatError(f"manifest entry {line!r} not found at {path}")
            out.append((os.path.splitext(os.path.basename(path))[0], path))
    if not out:
        raise DataFormatError(f"manifest {weights} lists no layers")
    return out


def _load_config(path: str | None, seed_override: int | None):
    from .configfile import read_config
    from .pipeline import QuantConfig

    config = read_config(path) if path else QuantConfig()
    if seed_override is not None:
        from dataclasses import replace

        config = replace(config, seed=seed_override)
    return config


def _calib_batches(calib: str, name: str, m: int, config):
    from .containers import read_tensor
    from .pipeline import synth_calib_batches

    if calib == "synthetic":
        return synth_calib_batches(m, config, name)
    path = os.path.join(calib, f"{name}.calib.arbt")
    if not os.path.exists(path):
        raise DataFormatError(f"no calibration file {path}")
    stack = read_tensor(path)
    if stack.ndim != 3:
        raise DataFormatError(f"{path}: expected a rank-3 batch stack")
    return [stack[i] for i in range(stack.shape[0])]


def _report_path(out: str, default_name: str) -> str:
    if out.endswith(".csv"):
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        return out
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, default_name)


def _cmd_quantize(args) -> int:
    workers = _apply_thread_cap()
    from concurrent.futures import ThreadPoolExecutor

    from .containers import read_tensor, write_quant
    from .pipeline import REPORT_COLUMNS, quantize_layer, report_row

    config = _load_config(args.config, args.seed)
    layers = _discover_layers(args.weights)
    os.makedirs(args.out, exist_ok=True)

    def run(item):
        name, path = item
        w = read_tensor(path)
        if w.ndim != 2:
            raise DataFormatError(f"{path}: expected a rank-2 weight matrix")
        batches = _calib_batches(args.calib, name, w.shape[1], config)
        return quantize_layer(w, batches, config, name=name)

    max_workers = workers or os.cpu_count() or 1
    if max_workers > 1 and len(layers) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run, layers))
    else:
        results = [run(item) for item in layers]

    report_file = os.path.join(args.out, "report.csv")
    with open(report_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for (layer, report), (name, _) in zip(results, layers):
            write_quant(os.path.join(args.out, f"{name}.arbq"), layer)
            writer.writerow(report_row(report))
    print(f"quantized {len(layers)} layer(s) -> {args.out}")
    return 0


def _eval_layer(name: str, w, layer, batches) -> dict:
    import numpy as np

    from .calib import accumulate_second_moment, l2_error
    from .pipeline import (
        column_deviation_profile,
        output_mse,
        residual_shift_profile,
        split_holdout,
    )

    if (layer.n, layer.m) != w.shape:
        raise DataFormatError(
            f"{name}: artifact shape {(layer.n, layer.m)} != weights {w.shape}"
        )
    calib, holdout = split_holdout(batches)
    stats = accumulate_second_moment(calib)
    recon = layer.reconstruct()
    resid = w - recon
    prof_w = column_deviation_profile(w)
    prof_q = column_deviation_profile(recon)
    if prof_w.std() > 0 and prof_q.std() > 0:
        corr = float(np.corrcoef(prof_w, prof_q)[0, 1])
    else:
        corr = 1.0 if np.allclose(prof_w, prof_q) else 0.0
    b = layer.budget
    return {
        "name": name,
        "n": layer.n,
        "m": layer.m,
        "method": layer.method,
        "order": layer.order,
        "block_k": layer.block_k,
        "cgb": int(layer.cgb),
        "salient_count": int(layer.maps.salient_cols.sum()),
        "l1": repr(float((resid * resid).sum())),
        "l2": repr(l2_error(resid, stats)),
        "output_mse": repr(output_mse(w, recon, holdout)),
        "shift_post": repr(float(np.abs(residual_shift_profile(w, recon)).mean())),
        "col_dev_corr": repr(corr),
        "plane_bits": b.plane_bits,
        "bitmap_bits": b.bitmap_bits,
        "scale_bits": b.scale_bits,
        "total_bytes": b.total_bytes,
        "avg_weight_bits": repr(b.avg_weight_bits),
    }


def _cmd_eval(args) -> int:
    _apply_thread_cap()
    from .containers import read_quant, read_tensor

    config = _load_config(args.config, args.seed)
    layers = _discover_layers(args.weights)
    rows = []
    for name, path in layers:
        quant_path = os.path.join(args.quant, f"{name}.arbq")
        if not os.path.exists(quant_path):
            raise DataFormatError(f"no artifact {quant_path}")
        w = read_tensor(path)
        layer = read_quant(quant_path, name=name)
        batches = _calib_batches(args.calib, name, w.shape[1], config)
        rows.append(_eval_layer(name, w, layer, batches))

    report_file = _report_path(args.out, "eval_report.csv")
    with open(report_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"evaluated {len(rows)} layer(s) -> {report_file}")
    return 0


def _cmd_bench(args) -> int:
    _apply_thread_cap()
    from .calib import bench_l2_paths

    result = bench_l2_paths(
        args.n, args.m, args.samples, args.iterations, args.block, seed=args.seed
    )
    report_file = _report_path(args.out, "bench.csv")
    with open(report_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        writer.writerow([
            args.n, args.m, args.samples, args.iterations, args.block,
            result.direct.multiply_accumulate_count,
            result.reformulated.multiply_accumulate_count,
            repr(result.direct.wall_time),
            repr(result.reformulated.wall_time),
            repr(result.counted_eta),
            repr(result.measured_eta) if result.measured_eta is not None else "",
            repr(result.modelled_eta),
        ])
    print(
        f"bench n={args.n} samples={args.samples} block={args.block}: "
        f"counted eta {result.counted_eta:.2f}, measured eta "
        f"{result.measured_eta:.2f}, modelled {result.modelled_eta:.2f} "
        f"-> {report_file}"
    )
    return 0


def _cmd_inspect(args) -> int:
    from .containers import inspect_header

    if not os.path.exists(args.path):
        raise DataFormatError(f"{args.path} does not exist")
    with open(args.path, "rb") as fh:
        print(inspect_header(fh.read()))
    return 0


_HANDLERS = {
    "quantize": _cmd_quantize,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 on --help
        return 0 if exc.code == 0 else 1
    try:
        return _HANDLERS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
