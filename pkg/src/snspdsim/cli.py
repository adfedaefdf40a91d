"""Command-line entry point: ``snspdsim <subcommand> [options]``.

Every output file is written to a temporary sibling and renamed into place,
so a failed run never leaves a partial file behind. Exit codes: 0 success,
1 runtime failure, 2 validation or usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

from . import experiments as ex
from . import fcnn
from .config import ConfigError, PipelineConfig, load_config
from .physics import EventKind
from .rng import MAX_SEED, derive_seed, substream
from .synth import (EventStream, ScenarioSpec, bias_sweep, generate_event_stream, render_stream,
                    select_optimal_bias, write_events_csv, write_trace_csv)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


# ---------------------------------------------------------------- file output

def _check_writable(*paths) -> None:
    for p in paths:
        if p is None:
            continue
        parent = Path(p).resolve().parent
        if not parent.is_dir():
            raise OSError(f"cannot write {p}: directory {parent} does not exist")
        if not os.access(parent, os.W_OK):
            raise OSError(f"cannot write {p}: directory {parent} is not writable")
        if Path(p).is_dir():
            raise OSError(f"cannot write {p}: is a directory")


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def _commit(path, writer) -> None:
    """Run ``writer(tmp_path)`` and atomically move the result to ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.resolve().parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_text(path, text: str) -> None:
    def w(tmp):
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
    _commit(path, w)


def _write_json(path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _summary_path(out, explicit):
    if explicit:
        return explicit
    p = Path(out)
    return str(p.with_name(p.stem + ".summary.json"))


def _meta_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + ".meta.json")


def _summary(cfg: PipelineConfig, seed: int, metrics: dict) -> dict:
    return {"config_hash": cfg.digest(), "seed": int(seed), "metrics": metrics}


# ---------------------------------------------------------------- subcommands

def cmd_simulate(cfg: PipelineConfig, args) -> str:
    out = args.out or "trace.csv"
    _check_writable(out, args.events)
    sc = cfg.scenario
    signal_rate = sc.signal_rate if args.signal_rate is None else args.signal_rate
    dark_rate = sc.dark_rate if args.dark_rate is None else args.dark_rate
    if not args.duration > 0 or not args.trace_window > 0:
        raise ValueError("duration and trace window must be positive")
    spec = ScenarioSpec.dark_vs_photon(sc.signal_wavelength_nm, signal_rate=signal_rate, dark_rate=dark_rate)
    stream = generate_event_stream(spec, args.duration, args.seed, cfg.dark)
    # The rendered trace covers only the leading window; the full stream would not fit in memory.
    window = min(args.trace_window, args.duration)
    head = [e for e in stream.events if e.arrival < window]
    rendered = render_stream(EventStream(window, head, stream.seed), cfg.physics, cfg.chain, args.seed)
    if args.events:
        _commit(args.events, lambda tmp: write_events_csv(stream, tmp))
    _commit(out, lambda tmp: write_trace_csv(rendered.trace, tmp))
    return (f"events={len(stream)} signal={stream.count(EventKind.SIGNAL)} dark={stream.count(EventKind.DARK)} "
            f"trace_samples={len(rendered.trace)} overlaps={len(rendered.overlaps)}")


def cmd_sweep_bias(cfg: PipelineConfig, args) -> str:
    out = args.out or "bias_sweep.csv"
    _check_writable(out)
    b = cfg.bias
    sweep = bias_sweep(b.grid(), b.flux, cfg.physics, b, substream(args.seed, "bias-sweep"))
    best = select_optimal_bias(sweep)
    text = "bias_a,count_rate_hz\n" + "".join(f"{i!r},{c!r}\n" for i, c in sweep.bias_points)
    _write_text(out, text)
    return f"selected_bias_mA={best * 1e3:.4f}"


_SCENARIOS = ("dark-vs-photon", "wavelength", "polarization")


def _scenario(cfg: PipelineConfig, args) -> ScenarioSpec:
    sc = cfg.scenario
    kw = dict(n_per_class=args.n_per_class or sc.n_per_class, signal_rate=sc.signal_rate)
    if args.scenario == "dark-vs-photon":
        return ScenarioSpec.dark_vs_photon(sc.signal_wavelength_nm, dark_rate=sc.dark_rate, **kw)
    if args.scenario == "wavelength":
        return ScenarioSpec.wavelength_pair(sc.signal_wavelength_nm, sc.signal_wavelength_nm + args.delta_nm,
                                            dark_rate=0.0, **kw)
    return ScenarioSpec.polarization_pair(sc.signal_wavelength_nm, dark_rate=0.0, **kw)


def cmd_dataset(cfg: PipelineConfig, args) -> str:
    out = args.out or "train.csv"
    _check_writable(out, _meta_path(out), args.test_out, args.test_out and _meta_path(args.test_out))
    spec = _scenario(cfg, args)
    ds = ex.build_dataset(spec, cfg.physics, cfg.chain, args.seed, cfg.features, cfg.dark, cfg.nn.test_fraction)
    mask = ds.meta["train_mask"]
    _commit(out, lambda tmp: ex.write_feature_csv(ds, tmp, mask))
    if args.test_out:
        _commit(args.test_out, lambda tmp: ex.write_feature_csv(ds, tmp, ~mask))
    meta = {"scenario": spec.kind.value, "class_names": list(spec.class_names), "seed": args.seed,
            "config_hash": cfg.digest(), "reference": ds.meta["reference"],
            "class_references": ds.meta["class_references"]}
    _write_json(_meta_path(out), meta)
    if args.test_out:
        _write_json(_meta_path(args.test_out), meta)
    return f"rows={len(ds)} train={int(mask.sum())} test={int((~mask).sum())} mode={ds.meta['reference']['mode_value']:g}"


def _read_dataset(path) -> fcnn.LabeledDataset:
    names = ("class0", "class1")
    meta_file = _meta_path(path)
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    ds = ex.read_feature_csv(path, tuple(meta.get("class_names", names)))
    ds.meta.update(meta)
    if len(ds) == 0:
        raise ValueError(f"{path}: dataset is empty")
    return ds


def cmd_train(cfg: PipelineConfig, args) -> str:
    out = args.out or "model.json"
    _check_writable(out)
    ds = _read_dataset(args.dataset)
    nn = cfg.nn
    res = fcnn.train(ds, nn.arch(ds.inputs.shape[1]), nn.lr, nn.epochs, nn.batch, nn.init_scale,
                     derive_seed(args.seed, "train"))
    res.model.calibration = ds.meta.get("reference")
    _commit(out, lambda tmp: fcnn.save_model(res.model, tmp))
    final = res.loss_curve[-1] if res.loss_curve else float("nan")
    return f"epochs={nn.epochs} final_loss={final:.6g}"


def cmd_eval(cfg: PipelineConfig, args) -> str:
    _check_writable(args.out)
    model = fcnn.load_model(args.model)
    ev = fcnn.evaluate(model, _read_dataset(args.dataset))
    if args.out:
        _write_json(args.out, _summary(cfg, args.seed, ev.to_dict()))
    return f"accuracy={ev.accuracy:.6f}"


def cmd_wavelength_study(cfg: PipelineConfig, args) -> str:
    out = args.out or "wavelength_study.csv"
    summary = _summary_path(out, args.summary)
    _check_writable(out, summary)
    deltas = args.deltas or list(cfg.scenario.wavelength_deltas_nm)
    table = ex.wavelength_study(deltas, cfg, args.seed, args.n_per_class)
    _write_text(out, "delta_nm,accuracy\n" + "".join(f"{d!r},{a!r}\n" for d, a in table))
    _write_json(summary, _summary(cfg, args.seed, {"accuracy": {f"{d:g}": a for d, a in table}}))
    return " ".join(f"{d:g}nm={a:.4f}" for d, a in table)


def cmd_polarization_study(cfg: PipelineConfig, args) -> str:
    out = args.out or "polarization_features.csv"
    summary = _summary_path(out, args.summary)
    _check_writable(out, summary)
    holder = {}

    def run(tmp):
        holder["res"] = ex.polarization_study(cfg, args.seed, tmp, args.n_per_class)
    _commit(out, run)
    res = holder["res"]
    between, within = ex.centroid_separation(res.hidden, res.labels)
    metrics = dict(res.evaluation.to_dict(), centroid_distance=between, within_class_spread=within)
    _write_json(summary, _summary(cfg, args.seed, metrics))
    return f"accuracy={res.accuracy:.6f}"


def cmd_emitter(cfg: PipelineConfig, args) -> str:
    out = args.out or "emitter_histogram.csv"
    summary = _summary_path(out, args.summary)
    _check_writable(out, summary)
    exp = cfg.emitter
    if args.cycles:
        from dataclasses import replace
        exp = replace(exp, n_cycles=args.cycles)
    classifier = None
    model = None
    if args.classifier == "oracle":
        classifier = ex.oracle_classifier
    elif args.model:
        model = fcnn.load_model(args.model)
    else:
        spec = ScenarioSpec.dark_vs_photon(cfg.scenario.signal_wavelength_nm,
                                           n_per_class=args.n_per_class or cfg.scenario.n_per_class)
        ds = ex.build_dataset(spec, cfg.physics, cfg.chain, derive_seed(args.seed, "emitter-model"),
                              cfg.features, cfg.dark, cfg.nn.test_fraction)
        model = ex.train_and_evaluate(ds, cfg.nn, args.seed).model
    res = ex.dark_elimination_study(exp, model, cfg.physics, cfg.chain, args.seed, cfg.features, cfg.dark,
                                    classifier, cfg.scenario.signal_wavelength_nm)
    fa, ff = res.fit_all.curve(res.centers), res.fit_filtered.curve(res.centers)
    rows = "".join(f"{c!r},{int(a)},{int(f)},{x!r},{y!r}\n"
                   for c, a, f, x, y in zip(res.centers.tolist(), res.counts_all, res.counts_filtered,
                                            fa.tolist(), ff.tolist()))
    _write_text(out, "bin_center_s,counts_all,counts_filtered,fit_all,fit_filtered\n" + rows)
    _write_json(summary, _summary(cfg, args.seed, res.metrics()))
    return (f"improvement_ratio={res.improvement_ratio:.4f} rms_all={res.rms_with_dark:.4f} "
            f"rms_filtered={res.rms_filtered:.4f}")


def cmd_export_features(cfg: PipelineConfig, args) -> str:
    out = args.out or "penultimate.csv"
    _check_writable(out)
    model = fcnn.load_model(args.model)
    ds = _read_dataset(args.dataset)
    holder = {}

    def run(tmp):
        holder["acts"] = fcnn.export_penultimate_features(model, ds, tmp)
    _commit(out, run)
    return f"rows={holder['acts'].shape[0]} width={holder['acts'].shape[1]}"


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="pipeline config JSON (default: shipped)")
    common.add_argument("--seed", type=_seed, default=argparse.SUPPRESS, help="run seed (default: config seed)")
    common.add_argument("--out", default=None, help="primary output path")

    p = _Parser(prog="snspdsim", description="SNSPD pulse simulation and classification pipeline.")
    p.add_argument("--config", default=None, help="pipeline config JSON (default: shipped)")
    p.add_argument("--seed", type=_seed, default=None, help="run seed (default: config seed)")
    p.add_argument("--print-config", action="store_true", help="print the resolved config as JSON")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="event stream and rendered ADC trace")
    s.add_argument("--events", default=None, help="event list CSV")
    s.add_argument("--duration", type=float, default=0.01, help="stream duration in s")
    s.add_argument("--signal-rate", type=float, default=None)
    s.add_argument("--dark-rate", type=float, default=None)
    s.add_argument("--trace-window", type=float, default=100e-6,
                   help="length of the rendered trace in s, from t=0")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep-bias", parents=[common], help="count rate versus bias current")
    s.set_defaults(func=cmd_sweep_bias)

    s = sub.add_parser("dataset", parents=[common], help="labelled feature files for one scenario")
    s.add_argument("--scenario", choices=_SCENARIOS, default="dark-vs-photon")
    s.add_argument("--delta-nm", type=float, default=1.0, help="wavelength offset of the second class")
    s.add_argument("--n-per-class", type=int, default=None)
    s.add_argument("--test-out", default=None, help="held-out rows CSV")
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", parents=[common], help="train a classifier on a feature file")
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="accuracy of a model on a feature file")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("wavelength-study", parents=[common], help="accuracy versus wavelength offset")
    s.add_argument("--deltas", type=float, nargs="+", default=None)
    s.add_argument("--n-per-class", type=int, default=None)
    s.add_argument("--summary", default=None)
    s.set_defaults(func=cmd_wavelength_study)

    s = sub.add_parser("polarization-study", parents=[common], help="vertical versus horizontal photons")
    s.add_argument("--n-per-class", type=int, default=None)
    s.add_argument("--summary", default=None)
    s.set_defaults(func=cmd_polarization_study)

    s = sub.add_parser("emitter", parents=[common], help="dark-count elimination on a decay histogram")
    s.add_argument("--model", default=None, help="dark-vs-photon model (trained on the fly if absent)")
    s.add_argument("--classifier", choices=("model", "oracle"), default="model")
    s.add_argument("--cycles", type=int, default=None)
    s.add_argument("--n-per-class", type=int, default=None, help="training set size when no model is given")
    s.add_argument("--summary", default=None)
    s.set_defaults(func=cmd_emitter)

    s = sub.add_parser("export-features", parents=[common], help="last hidden layer activations")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = cfg.seed
        if args.print_config:
            sys.stdout.write(cfg.to_json())
        if args.command is None:
            if args.print_config:
                return 0
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        print(f"{args.command}: {args.func(cfg, args)}")
        return 0
    except (UsageError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
