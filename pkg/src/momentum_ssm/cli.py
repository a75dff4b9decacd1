"""``momentum-ssm`` command line: scan-bench, check, gradflow, train, sweep.

Every command accepts ``--seed``, ``--out`` and ``--config``. The config file
holds ``key = value`` lines (``#`` starts a comment); keys are the long flag
names with dashes or underscores. Explicit flags override the file, which
overrides the defaults. Each run writes ``resolved_config.txt`` in the output
directory; feeding it back through ``--config`` repeats the run.

Exit codes: 0 success, 1 failed check or diverged training, 2 usage error,
3 unreadable or malformed data.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import math
import statistics
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import checks as chk
from .affine_scan import (
    AffineElement,
    Dense,
    Diagonal,
    HeavyBallBlock,
    MomentumBlock,
    scan_parallel,
    scan_sequential,
)
from .gradient_lab import gradient_heatmap
from .har_pipeline import (
    DataFormatError,
    DivergenceError,
    Model,
    ModelConfig,
    TaskData,
    TrainConfig,
    WindowConfig,
    channel_stats,
    grid_search,
    make_recall_task,
    read_dataset_csv,
    save_checkpoint,
    train,
    window_stream,
    write_metrics_csv,
    write_stats_csv,
    zscore,
)
from .momentum_variants import MomentumParams, momentum_forward
from .numkit import ContractError, Rng, flop_counter
from .selective_ssm import init_selective_params, ssm_forward

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

GRID_BETAS = (0.0, 0.1, 0.3, 0.6, 0.9, 0.99, 0.999)
GRID_ALPHAS = (0.0, 0.1, 0.3, 0.6, 0.9, 1.0, 2.0)


class UsageError(ValueError):
    pass


# --- option tables ----------------------------------------------------------
# name -> (type, default, help); types: int float str bool ints floats strs

MODEL_OPTS = {
    "d_model": ("int", 32, "model width"),
    "n_layers": ("int", 2, "stacked SSM blocks"),
    "d_state": ("int", 16, "state size per channel"),
    "variant": ("str", "momentum", "vanilla, momentum, complex or adam"),
    "dropout": ("float", 0.1, "front-end dropout probability"),
    "pool": ("str", "mean", "temporal pooling: mean or last"),
    "kernel": ("int", 3, "front-end convolution kernel"),
    "stride": ("int", 1, "front-end convolution stride"),
    "alpha": ("float", 0.6, "momentum step size"),
    "beta": ("float", 0.9, "momentum decay"),
    "rho": ("float", 0.9, "complex momentum magnitude"),
    "phase": ("float", 0.0, "complex momentum phase (radians)"),
    "gamma_var": ("float", 0.99, "second-moment decay (adam variant)"),
    "eps": ("float", 1e-8, "normalizer floor (adam variant)"),
    "dt_min": ("float", 1e-3, "lower end of the initial step-size range"),
    "dt_max": ("float", 1e-1, "upper end of the initial step-size range"),
    "exact_zoh": ("bool", False, "exact zero-order-hold input scaling"),
}
TRAIN_OPTS = {
    "lr": ("float", 1e-3, "peak learning rate"),
    "weight_decay": ("float", 1e-4, "L2 weight decay"),
    "batch": ("int", 16, "mini-batch size"),
    "max_epochs": ("int", 10, "maximum epochs"),
    "patience": ("int", 10, "early-stopping patience (epochs)"),
    "clip_norm": ("float", 1.0, "global gradient-norm clip"),
}
TASK_OPTS = {
    "seq_len": ("int", 64, "sequence (window) length"),
    "delay": ("int", 16, "steps between pattern and final step"),
    "classes": ("int", 4, "number of classes"),
    "n_train": ("int", 256, "training windows"),
    "n_val": ("int", 128, "validation windows"),
    "noise": ("float", 0.3, "noise standard deviation"),
    "amplitude": ("float", 3.0, "pattern amplitude"),
}


def _override(table, **defaults):
    return {k: (t, defaults.get(k, d), h) for k, (t, d, h) in table.items()}


COMMANDS = {
    "scan-bench": {
        "lengths": ("ints", [1, 2, 3, 7, 64, 1000, 4096], "sequence lengths"),
        "n_state": ("int", 16, "state width for diagonal and block kinds"),
        "kinds": ("strs", ["dense", "diagonal", "momentum", "heavyball"], "transition kinds"),
        "repeats": ("int", 3, "timing repeats (median reported)"),
        "ratio": ("bool", True, "also time momentum vs vanilla layer forward"),
        "ratio_d_model": ("int", 128, "layer width for the forward ratio"),
        "ratio_d_state": ("int", 64, "state size for the forward ratio"),
        "ratio_len": ("int", 512, "sequence length for the forward ratio"),
    },
    "check": {
        "props": ("strs", list(chk.CHECKS), "checks to run (comma separated)"),
        "mutate_schur_sign": ("bool", False, "flip the lower-left sign of the Schur inverse"),
    },
    "gradflow": {
        **_override(MODEL_OPTS, d_model=16, d_state=8, beta=0.99, dt_min=0.1, dt_max=1.0,
                    dropout=0.0, pool="last"),
        **_override(TASK_OPTS, seq_len=128, delay=64, n_train=128, n_val=64),
        **_override(TRAIN_OPTS, max_epochs=5),
        "epochs": ("int", 5, "training epochs recorded after the initial column"),
    },
    "train": {
        **MODEL_OPTS,
        **TRAIN_OPTS,
        **TASK_OPTS,
        "num_classes": ("int", 0, "classes in the dataset (0: infer from labels)"),
        "train_csv": ("str", "", "training split CSV (empty: synthetic task)"),
        "val_csv": ("str", "", "validation split CSV"),
        "overlap": ("float", 0.5, "window overlap for CSV datasets"),
    },
    "sweep": {
        **_override(MODEL_OPTS, d_model=16, d_state=8, dt_min=0.01, dt_max=0.1, dropout=0.0,
                    pool="last"),
        **_override(TASK_OPTS, seq_len=32, delay=8, n_train=256, n_val=256),
        **_override(TRAIN_OPTS, max_epochs=5, lr=1e-2),
        "beta_grid": ("floats", list(GRID_BETAS), "beta values (rows)"),
        "alpha_grid": ("floats", list(GRID_ALPHAS), "alpha values (columns)"),
    },
}
COMMON = {"seed": ("int", 0, "random seed"), "out": ("str", "out", "output directory")}


def _parse_value(kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("ints", "floats", "strs"):
            items = [p.strip() for p in raw.split(",") if p.strip()]
            conv = {"ints": int, "floats": float, "strs": str}[kind]
            return [conv(p) for p in items]
        return raw
    except ValueError:
        raise UsageError(f"cannot parse {raw!r} as {kind}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def read_config(path, table) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in table:
            raise UsageError(f"{path}:{no}: unknown key {key!r}")
        out[key] = _parse_value(table[key][0], value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="momentum-ssm", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="key = value config file")
        for key, (kind, default, help_) in {**COMMON, **opts}.items():
            flag = "--" + key.replace("_", "-")
            help_ = f"{help_} (default: {_format_value(default)})"
            if kind == "bool":
                sp.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction,
                                default=argparse.SUPPRESS, help=help_)
            else:
                sp.add_argument(flag, dest=key, default=argparse.SUPPRESS, help=help_,
                                type=lambda raw, kind=kind: _parse_value(kind, raw))
    return parser


def resolve(args: argparse.Namespace) -> dict:
    table = {**COMMON, **COMMANDS[args.command]}
    cfg = {k: d for k, (_, d, _) in table.items()}
    if args.config:
        cfg.update(read_config(args.config, table))
    for k in table:
        if hasattr(args, k):
            cfg[k] = getattr(args, k)
    return cfg


def write_resolved(out: Path, cfg: dict) -> None:
    lines = [f"{k} = {_format_value(v)}" for k, v in cfg.items()]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _model_config(cfg: dict, num_classes: int) -> ModelConfig:
    keys = set(MODEL_OPTS)
    return ModelConfig(num_classes=num_classes, **{k: cfg[k] for k in keys})


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **{k: cfg[k] for k in TRAIN_OPTS})


def _task(cfg: dict, rng: Rng) -> TaskData:
    return make_recall_task(rng, cfg["seq_len"], cfg["delay"], cfg["classes"], cfg["n_train"],
                            cfg["n_val"], cfg["noise"], cfg["amplitude"])


def _fmt(v: float) -> str:
    return f"{v:.17g}"


# --- scan-bench -----------------------------------------------------------------


def bench_elements(kind: str, L: int, n: int, rng: Rng) -> AffineElement:
    if kind == "dense":
        w = min(n, 8)
        m = rng.normal((L, w, w), 0.9 / math.sqrt(w))
        return AffineElement(Dense(m), rng.normal((L, w)))
    if kind == "diagonal":
        return AffineElement(Diagonal(rng.uniform(0.5, 1.0, (L, n))), rng.normal((L, n)))
    if kind == "momentum":
        t = MomentumBlock.from_momentum(rng.uniform(0.5, 1.0, (L, n)), 0.9)
        return AffineElement(t, rng.normal((L, 2 * n)))
    if kind == "heavyball":
        from .heavyball_s4 import inverse_blocks

        blocks = inverse_blocks(0.5, rng.uniform(0.01, 0.5, (L, n)), rng.uniform(0.0, 4.0, (L, n)))
        return AffineElement(HeavyBallBlock(blocks), rng.normal((L, 2 * n)))
    raise UsageError(f"unknown scan kind {kind!r}")


def _median_ns(fn, repeats: int) -> tuple[float, object]:
    times, result = [], None
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter_ns()
        result = fn()
        times.append(time.perf_counter_ns() - t0)
    return float(statistics.median(times)), result


def forward_ratio(d_model: int, d_state: int, L: int, rng: Rng, repeats: int = 1) -> dict:
    """Wall-time and FLOP ratios of momentum vs vanilla layer forward."""
    p = init_selective_params(d_model, d_state, rng.child(0))
    x = rng.child(1).normal((L, d_model))
    mp = MomentumParams.from_beta(0.6, 0.9)
    out = {}
    for parallel in (False, True):
        tag = "par" if parallel else "seq"
        with flop_counter() as fv:
            tv, _ = _median_ns(lambda: ssm_forward(p, x, parallel=parallel), repeats)
        with flop_counter() as fm:
            tm, _ = _median_ns(lambda: momentum_forward(p, mp, x, parallel=parallel), repeats)
        out[f"wall_{tag}"] = tm / tv
        out[f"flops_{tag}"] = fm.total / max(fv.total, 1)
    return out


def cmd_scan_bench(cfg: dict, out: Path) -> int:
    rng = Rng(cfg["seed"])
    rows, digests = [], []
    for ki, kind in enumerate(cfg["kinds"]):
        for L in cfg["lengths"]:
            if L < 1:
                raise UsageError("lengths must be positive")
            elems = bench_elements(kind, L, cfg["n_state"], rng.child(1000 * ki + L))
            seq_ns, seq = _median_ns(lambda: scan_sequential(elems), cfg["repeats"])
            par_ns, par = _median_ns(lambda: scan_parallel(elems), cfg["repeats"])
            expected = math.ceil(math.log2(L)) + 1 if L > 1 else 1
            if par.combine_depth != expected:
                raise ContractError(f"{kind} L={L}: depth {par.combine_depth} != {expected}")
            n = elems.offset.shape[-1]
            rows.append([kind, L, n, _fmt(seq_ns), _fmt(par_ns), _fmt(seq_ns / par_ns), par.combine_depth])
            digest = hashlib.blake2b(np.ascontiguousarray(par.states).tobytes(), digest_size=16)
            digests.append([kind, L, n, par.combine_depth, digest.hexdigest()])
    with open(out / "scan_bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "L", "N", "seq_ns", "par_ns", "speedup", "combine_depth"])
        w.writerows(rows)
        if cfg["ratio"]:
            r = forward_ratio(cfg["ratio_d_model"], cfg["ratio_d_state"], cfg["ratio_len"],
                              rng.child(7), repeats=1)
            dims = f"d_model={cfg['ratio_d_model']} d_state={cfg['ratio_d_state']} L={cfg['ratio_len']}"
            fh.write(f"# momentum/vanilla forward ({dims}): wall_seq={r['wall_seq']:.4g} "
                     f"wall_par={r['wall_par']:.4g} flops_seq={r['flops_seq']:.4g} "
                     f"flops_par={r['flops_par']:.4g}\n")
            fh.write("# expected wall-time ratio band 1.0-2.5; reference measurement 1.35\n")
            print(f"forward ratio momentum/vanilla: wall {r['wall_seq']:.3f} (sequential), "
                  f"{r['wall_par']:.3f} (parallel)")
    with open(out / "scan_bench_digest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "L", "N", "combine_depth", "state_digest"])
        w.writerows(digests)
    for row in rows:
        print(f"{row[0]:>9} L={row[1]:<5} depth={row[6]:<3} speedup={float(row[5]):.3g}")
    return EXIT_OK


# --- check ------------------------------------------------------------------


def cmd_check(cfg: dict, out: Path) -> int:
    unknown = [p for p in cfg["props"] if p not in chk.CHECKS]
    if unknown:
        raise UsageError(f"unknown checks {unknown}; choose from {', '.join(chk.CHECKS)}")
    summary = []
    failed = False
    for name in cfg["props"]:
        try:
            rows = chk.run_check(name, cfg["seed"], cfg["mutate_schur_sign"])
        except Exception as exc:  # a crashing check is a failed check
            rows = [chk.CheckRow(f"error: {type(exc).__name__}: {exc}", math.nan, 0.0)]
        ok = all(r.passed for r in rows if r.gating)
        failed |= not ok
        with open(out / f"check_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "worst_error", "tolerance", "gating", "passed"])
            for r in rows:
                w.writerow([r.metric, _fmt(r.worst), _fmt(r.tolerance), int(r.gating), int(r.passed)])
        for r in rows:
            summary.append([name, r.metric, _fmt(r.worst), _fmt(r.tolerance), int(r.gating), int(r.passed)])
        print(f"{'PASS' if ok else 'FAIL'} {name}: " +
              "; ".join(f"{r.metric} = {r.worst:.3e} (tol {r.tolerance:.1e}"
                        f"{'' if r.gating else ', info'})" for r in rows))
    with open(out / "check_report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "metric", "worst_error", "tolerance", "gating", "passed"])
        w.writerows(summary)
    return EXIT_FAIL if failed else EXIT_OK


# --- gradflow ---------------------------------------------------------------


def cmd_gradflow(cfg: dict, out: Path) -> int:
    if cfg["variant"] not in ("vanilla", "momentum"):
        raise UsageError("gradflow variant must be vanilla or momentum")
    rng = Rng(cfg["seed"])
    task = _task(cfg, rng.child(100))
    mc = _model_config(cfg, cfg["classes"])
    report = gradient_heatmap(mc, task, cfg["epochs"], rng, _train_config(cfg))
    report.to_csv(out / f"gradflow_{cfg['variant']}.csv")
    line = (f"variant={cfg['variant']} L={cfg['seq_len']} epochs={cfg['epochs']} "
            f"ratio_first_over_last={_fmt(report.ratio(-1))}")
    (out / f"gradflow_{cfg['variant']}_summary.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


# --- train ------------------------------------------------------------------


def _windows_from_csv(path, wc: WindowConfig):
    xs, ys = [], []
    for rec in read_dataset_csv(path):
        if rec.signals.shape[0] < wc.length:
            continue
        for i, w in enumerate(window_stream(rec.signals, wc)):
            xs.append(w)
            counts = Counter(rec.labels[i * wc.stride : i * wc.stride + wc.length].tolist())
            ys.append(min(k for k, c in counts.items() if c == max(counts.values())))
    if not xs:
        raise DataFormatError(path, 0, f"no recording is at least {wc.length} samples long")
    return np.stack(xs), np.array(ys, dtype=np.int64)


def load_task(cfg: dict, out: Path, rng: Rng) -> tuple[TaskData, int]:
    if not cfg["train_csv"]:
        return _task(cfg, rng), cfg["classes"]
    if not cfg["val_csv"]:
        raise UsageError("--val-csv is required with --train-csv")
    wc = WindowConfig(cfg["seq_len"], cfg["overlap"], 6)
    tx, ty = _windows_from_csv(cfg["train_csv"], wc)
    vx, vy = _windows_from_csv(cfg["val_csv"], wc)
    mean, std = channel_stats(tx)
    write_stats_csv(out / "stats.csv", mean, std)
    classes = cfg["num_classes"] or int(max(ty.max(), vy.max())) + 1
    return TaskData(zscore(tx, mean, std), ty, zscore(vx, mean, std), vy), classes


def cmd_train(cfg: dict, out: Path) -> int:
    rng = Rng(cfg["seed"])
    task, classes = load_task(cfg, out, rng.child(100))
    model = Model.init(_model_config(cfg, classes), rng.child(0))
    result = train(model, task, _train_config(cfg), rng=rng.child(1))
    write_metrics_csv(out / "metrics.csv", result.history)
    save_checkpoint(out / "checkpoint.mssm", model.params, model.buffers)
    if result.history:
        best = result.history[result.best_epoch - 1]
        print(f"best epoch {result.best_epoch}: val_loss={best['val_loss']:.6g} val_acc={best['val_acc']:.4f}")
    else:
        print("no epochs run; checkpoint holds the initialization")
    return EXIT_OK


# --- sweep ------------------------------------------------------------------


def cmd_sweep(cfg: dict, out: Path) -> int:
    if cfg["variant"] != "momentum":
        raise UsageError("sweep runs the momentum variant")
    if not cfg["beta_grid"] or not cfg["alpha_grid"]:
        raise UsageError("grids must be non-empty")
    rng = Rng(cfg["seed"])
    task = _task(cfg, rng.child(100))
    acc = grid_search(cfg["beta_grid"], cfg["alpha_grid"], task, _train_config(cfg),
                      _model_config(cfg, cfg["classes"]), rng.child(0))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beta"] + [f"alpha={_fmt(a)}" for a in cfg["alpha_grid"]])
        for b, row in zip(cfg["beta_grid"], acc):
            w.writerow([_fmt(b)] + [_fmt(v) for v in row])
    print(f"{acc.size} cells; chance = {1.0 / cfg['classes']:.3f}; best accuracy = {np.nanmax(acc) if np.any(np.isfinite(acc)) else math.nan:.4f}")
    return EXIT_OK


HANDLERS = {
    "scan-bench": cmd_scan_bench,
    "check": cmd_check,
    "gradflow": cmd_gradflow,
    "train": cmd_train,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(out, cfg)
        return HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
