"""Command-line entry point: train, eval, export, inspect, simulate, bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""
import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dvfs, plots, runtime, store
from .config import ExperimentConfig, load_config
from .data import load_dataset
from .errors import AllInOneError, ConfigError, IngestionError
from .trainer import evaluate, round_weights_to_storage, train

log = logging.getLogger("allinone")

TRAIN_LOG_COLUMNS = ("epoch", "iteration", "switch", "ce", "l_reg", "gamma", "total", "current_macs", "target_macs")
EVAL_LOG_COLUMNS = ("epoch", "switch", "accuracy", "macs", "target_macs", "macs_ratio", "connectivity_error")


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "out", None):
        cfg.output = args.out
    return cfg


def _out_dir(cfg):
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(cfg, split):
    d = cfg.data
    ds = load_dataset(cfg.train.dataset, d.root, split, d.per_class)
    n = d.train_subset if split == "train" else d.test_subset
    return ds.subset(n) if n else ds


def _write_rows(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


def _fmt(x):
    return f"{x:.6g}" if isinstance(x, float) else x


def _eval_row(epoch, r):
    return {"epoch": epoch, "switch": r.switch, "accuracy": _fmt(r.accuracy), "macs": r.macs,
            "target_macs": r.target_macs, "macs_ratio": _fmt(r.macs / r.target_macs),
            "connectivity_error": _fmt(r.connectivity_error)}


def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    train_data = _load_split(cfg, "train")
    test_data = _load_split(cfg, "test")
    started = time.time()
    log_fh = open(out / "train_log.csv", "w", newline="", encoding="utf-8")
    writer = csv.DictWriter(log_fh, fieldnames=TRAIN_LOG_COLUMNS)
    writer.writeheader()
    eval_rows = []

    def on_iteration(state, reports):
        for rep in reports:
            row = rep.row()
            writer.writerow({"epoch": state.epoch, "iteration": state.iteration, "switch": rep.switch,
                             "ce": _fmt(rep.ce), "l_reg": _fmt(rep.l_reg), "gamma": rep.gamma,
                             "total": _fmt(row["total"]), "current_macs": row["current_macs"],
                             "target_macs": state.targets[rep.switch - 1]})

    def on_eval(state, results):
        eval_rows.extend(_eval_row(state.epoch, r) for r in results)
        log.info("epoch %d: %s", state.epoch,
                 "  ".join(f"n={r.switch} acc={r.accuracy:.4f} macs={r.macs / r.target_macs:.3f}xC" for r in results))

    def on_warmup(state, epoch, loss):
        log.info("warm-up epoch %d: loss %.4f", epoch, loss)

    try:
        state = train(cfg.train, train_data, test_data, on_iteration, on_eval, on_warmup)
    finally:
        log_fh.close()
    round_weights_to_storage(state)
    final = [evaluate(state, test_data, n) for n in range(1, state.n_switches + 1)]
    eval_rows.extend(_eval_row("final", r) for r in final)
    _write_rows(out / "eval_log.csv", EVAL_LOG_COLUMNS, eval_rows)
    store.save_checkpoint(state, out / "checkpoint.npz")
    model = store.from_state(state)
    size = store.save(model, out / "model.aio")
    summary = {
        "config": cfg.to_dict(),
        "switches": [{"switch": r.switch, "accuracy": r.accuracy, "macs": r.macs, "target_macs": r.target_macs,
                      "connectivity_error": r.connectivity_error} for r in final],
        "model_bytes": size,
        "elapsed_s": round(time.time() - started, 1),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    if cfg.plots:
        plots.accuracy_curves(state.history, out / "accuracy.svg")
    for r in final:
        print(f"switch {r.switch}: accuracy {r.accuracy:.4f}  MACs {r.macs} (target {r.target_macs})")
    print(f"wrote {out / 'model.aio'} ({size} bytes)")
    return 0


def _model_accuracy(model, data, n, batch=1000):
    plan = runtime.build_plan(model, n)
    correct = 0
    for i in range(0, len(data), batch):
        x, y = data.batch(np.arange(i, min(i + batch, len(data))))
        correct += int((runtime.infer(plan, x).argmax(axis=1) == y).sum())
    return correct / max(len(data), 1), runtime.count_work(plan)


def _switches(args, model):
    if getattr(args, "switch", None) is not None:
        if not 1 <= args.switch <= model.n_switches:
            raise ConfigError(f"--switch {args.switch} outside 1..{model.n_switches}")
        return [args.switch]
    return list(range(1, model.n_switches + 1))


def cmd_eval(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    model = store.load(args.model)
    data = _load_split(cfg, "test")
    rows = []
    for n in _switches(args, model):
        acc, macs = _model_accuracy(model, data, n)
        rows.append({"switch": n, "accuracy": _fmt(acc), "macs": macs})
        print(f"switch {n}: accuracy {acc:.4f}  MACs {macs}")
    _write_rows(out / "eval.csv", ("switch", "accuracy", "macs"), rows)
    return 0


def cmd_export(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    state = store.load_checkpoint(args.checkpoint)
    if state.scores is None:
        raise ConfigError("checkpoint has no soft mask (saved before pruning was set up)")
    size = store.save(store.from_state(state), out / "model.aio")
    print(f"wrote {out / 'model.aio'} ({size} bytes)")
    return 0


def _print_report(report, header):
    print(header)
    for name, nbytes in report.rows():
        print(f"  {name:<18} {nbytes:>14.1f} bytes")
    print(f"  mask fraction      {100 * report.mask_fraction:.3f}%")
    print(f"  extra BN fraction  {100 * report.extra_bn_fraction:.3f}%")
    print(f"  extra fraction     {100 * report.extra_fraction:.3f}%")
    print(f"  saving vs dense    {100 * report.saving:.2f}%")


def cmd_inspect(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    if args.model:
        model = store.load(args.model)
        total = sum(v.size for v in model.weights.values())
        kept = sum(int(np.count_nonzero(v)) for v in model.weights.values())
        blocks = next((b for b in model.layers.values() if b), (4, 16))
        report = store.memory_report(model.descriptor, model.n_switches, model.scheme, 1.0 - kept / total, *blocks)
        _print_report(report, f"{args.model}: {model.scheme} scheme, N={model.n_switches}, "
                              f"thresholds {np.round(model.thresholds, 4).tolist()}, "
                              f"{Path(args.model).stat().st_size} bytes on disk")
        hist = model.codes.histogram()
        print("mask code histogram (0 = not stored, v+1 otherwise):")
        for code, count in enumerate(hist):
            print(f"  code {code}: {count}")
        for n in range(1, model.n_switches + 1):
            print(f"  switch {n}: {runtime.count_work(runtime.build_plan(model, n))} MACs")
    else:
        report = store.memory_report(args.arch, args.switches, args.scheme, args.compression)
        _print_report(report, f"{args.arch}: {args.scheme} scheme, N={args.switches}, "
                              f"compression {args.compression:.0%}")
        counts = store.stored_model_counts(args.switches)
        print("stored models / masks:")
        for k, (m, k2) in counts.items():
            print(f"  {k:<16} {m} model(s), {k2} mask(s)")
    _write_rows(out / "memory.csv", ("item", "bytes"),
                [{"item": k, "bytes": _fmt(float(v))} for k, v in report.rows()]
                + [{"item": "extra_fraction", "bytes": _fmt(report.extra_fraction)},
                   {"item": "saving", "bytes": _fmt(report.saving)}])
    return 0


def cmd_simulate(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    d = cfg.dvfs
    for key, fname in (("n2", "table_n2.csv"), ("n3", "table_n3.csv")):
        table = dvfs.latency_tables()[key]
        rows = dvfs.table_csv_rows(table)
        dvfs.write_csv(rows, out / fname)
        print(f"{key}: " + ", ".join(f"{r['method']}/{r['scheme'] or '-'} {r['mmacs']} var={r['variance']:.4g}"
                                    f" {r['reduction_rate']}".rstrip() for r in rows))
    profile = dvfs.calibrate(d.calibration)
    print(f"calibrated latency model: t0={profile.t0:.4f} ms, kappa={profile.kappa:.4f}")
    trace = dvfs.read_trace(args.trace or d.trace) if (args.trace or d.trace) else dvfs.sweep_trace(d.clocks)
    policies = [dvfs.SwitchPolicy.all_in_one(d.switch_mmacs, d.clocks)]
    singles = sorted(set(d.switch_mmacs) | ({d.dense_mmacs} if d.dense_mmacs else set()), reverse=True)
    policies += [dvfs.SwitchPolicy.fixed(m, d.clocks) for m in singles]
    results = {p.name: dvfs.simulate(p, profile, trace, backend=d.backend) for p in policies}
    rows = []
    base = results[policies[0].name].variance
    for name, table in results.items():
        for ts, clock, m, ms in table.events:
            rows.append({"policy": name, "timestamp_ms": _fmt(float(ts)), "clock_mhz": clock, "mmacs": m,
                         "latency_ms": _fmt(ms)})
        rate = dvfs.reduction_rate(table.variance, base)
        print(f"{name:<16} variance {table.variance:.4f}  rate {dvfs.format_rate(rate)}")
    dvfs.write_csv(rows, out / "policy_latency.csv")
    (out / "calibration.json").write_text(json.dumps({"t0_ms": profile.t0, "kappa": profile.kappa}, indent=2),
                                          encoding="utf-8")
    if cfg.plots:
        plots.latency_lines(results, out / "policy_latency.svg")
        plots.variance_bars(list(results), [t.variance for t in results.values()], out / "policy_variance.svg")
    return 0


def cmd_bench(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    model = store.load(args.model)
    rng = np.random.default_rng(cfg.train.seed)
    x = rng.uniform(0, 1, (cfg.bench.batch, *model.descriptor["input"]))
    rows = runtime.benchmark(model, x, cfg.bench.repetitions, check=not cfg.bench.float32,
                             switches=_switches(args, model))
    runtime.write_benchmark_csv(rows, out / "bench.csv")
    for r in rows:
        print(f"switch {r['switch']}: median {r['median_ns'] / 1e6:.3f} ms over {r['repetitions']} runs, "
              f"{r['macs']} MACs/sample")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="allinone", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    common(sub.add_parser("train", help="warm-up, pattern assignment and joint training"))
    sp = common(sub.add_parser("eval", help="per-switch accuracy of a compact model"))
    sp.add_argument("model")
    sp.add_argument("--switch", type=int)
    sp = common(sub.add_parser("export", help="write a compact model from a checkpoint"))
    sp.add_argument("checkpoint")
    sp = common(sub.add_parser("inspect", help="memory report and mask histogram"))
    sp.add_argument("model", nargs="?")
    sp.add_argument("--arch", default="resnet18")
    sp.add_argument("--switches", type=int, default=3)
    sp.add_argument("--scheme", choices=("pattern", "block"), default="pattern")
    sp.add_argument("--compression", type=float, default=0.55)
    sp = common(sub.add_parser("simulate", help="latency variance under frequency changes"))
    sp.add_argument("--trace", help="trace file of 'timestamp_ms,clock_mhz' lines")
    sp = common(sub.add_parser("bench", help="time the sparse runtime per switch"))
    sp.add_argument("model")
    sp.add_argument("--switch", type=int)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export, "inspect": cmd_inspect,
            "simulate": cmd_simulate, "bench": cmd_bench}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except AllInOneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IngestionError.exit_code


if __name__ == "__main__":
    sys.exit(main())
