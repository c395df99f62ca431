"""Command line entry points.

Subcommands:

* ``synth``   generate a synthetic labeled cohort file from a spec
* ``train``   run an evaluation scenario over a directory of subjects
* ``explain`` export the filter atlas (spectra, patterns, SVG) of a model
* ``plan``    smallest causal kernel reaching a target receptive field
* ``stats``   compare two accuracy tables with a paired one-sided test

Configuration files are flat ``key=value`` text: the training config uses
``train.`` and ``arch.`` prefixes, the synthesis spec uses plain keys plus
``classK.sourceJ.field`` entries.  Unknown keys are hard errors; flags
override file values; the effective configuration is echoed into the
output directory.

Exit codes: 0 success, 2 usage or configuration error, 3 data or format
error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys

from .data import SourceSpec, SynthSpec, load_epochs, save_epochs, synth_generate
from .errors import FormatError
from .explain import build_atlas, export_atlas
from .fileio import atomic_write
from .model import (arch_config_from_items, arch_config_to_items, load_model,
                    plan_kernel, receptive_field_blocks, save_model)
from .stats import paired_t_right, wilcoxon_one_sided
from .training import (TrainConfig, default_train_config, history_csv_text,
                       report_csv_text, run_scenario, summary_text)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

_SCENARIO_FLAGS = {"within": "within", "cross": "cross", "cross-ft": "cross_finetuned"}

_TRAIN_TYPES = {
    "max_epochs_cv": int, "patience": int, "extra_epochs_max": int,
    "extra_lr": float, "base_lr": float, "batch_size": int,
    "folds": int, "seed": int,
}

_DATA_DERIVED_ARCH = ("n_channels", "n_samples", "n_classes")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _read_kv(path):
    """Flat key=value file -> ordered dict; comments (#) and blanks skipped."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise CliError(EXIT_USAGE, f"cannot read config {path}: {exc}") from None
    items = {}
    for ln, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(EXIT_USAGE, f"{path}:{ln}: expected key=value, got {line!r}")
        key = key.strip()
        if key in items:
            raise CliError(EXIT_USAGE, f"{path}:{ln}: duplicate key {key!r}")
        items[key] = value.strip()
    return items


# ----------------------------------------------------------------------
# synth

_SOURCE_KEY = re.compile(r"^class(\d+)\.source(\d+)\.(center_freq|bandwidth|amplitude|mixing)$")

_SYNTH_SCALARS = {
    "n_trials": int, "n_channels": int, "n_classes": int,
    "fs": float, "duration_s": float, "noise_sigma": float, "seed": int,
}


def _parse_synth_spec(items):
    scalars = {}
    per_source = {}
    for key, raw in items.items():
        if key in _SYNTH_SCALARS:
            try:
                scalars[key] = _SYNTH_SCALARS[key](raw)
            except ValueError:
                raise CliError(EXIT_USAGE, f"synth key {key}: bad value {raw!r}") from None
            continue
        m = _SOURCE_KEY.match(key)
        if not m:
            raise CliError(EXIT_USAGE, f"unknown synth key {key!r}")
        cls, src, fieldname = int(m.group(1)), int(m.group(2)), m.group(3)
        per_source.setdefault((cls, src), {})[fieldname] = raw
    for required in ("n_trials", "n_channels", "n_classes", "fs", "duration_s"):
        if required not in scalars:
            raise CliError(EXIT_USAGE, f"synth spec is missing {required}")
    n_classes = scalars["n_classes"]
    sources = []
    for cls in range(n_classes):
        src_ids = sorted(s for (c, s) in per_source if c == cls)
        if not src_ids:
            raise CliError(EXIT_USAGE, f"class {cls} has no sources")
        if src_ids != list(range(len(src_ids))):
            raise CliError(EXIT_USAGE, f"class {cls} source indices must be 0..{len(src_ids) - 1}")
        cls_sources = []
        for s in src_ids:
            entry = per_source.pop((cls, s))
            missing = [f for f in ("center_freq", "bandwidth", "amplitude", "mixing")
                       if f not in entry]
            if missing:
                raise CliError(EXIT_USAGE,
                               f"class{cls}.source{s} is missing {', '.join(missing)}")
            try:
                mixing = tuple(float(v) for v in entry["mixing"].split(","))
                cls_sources.append(SourceSpec(float(entry["center_freq"]),
                                              float(entry["bandwidth"]),
                                              float(entry["amplitude"]), mixing))
            except ValueError as exc:
                raise CliError(EXIT_USAGE, f"class{cls}.source{s}: {exc}") from None
        sources.append(cls_sources)
    if per_source:
        extra = ", ".join(f"class{c}.source{s}" for c, s in sorted(per_source))
        raise CliError(EXIT_USAGE, f"sources outside class range: {extra}")
    try:
        return SynthSpec(sources=sources, **scalars)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"invalid synth spec: {exc}") from None


def cmd_synth(args):
    spec = _parse_synth_spec(_read_kv(args.spec))
    epochs = synth_generate(spec)
    try:
        save_epochs(epochs, args.out)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot write {args.out}: {exc}") from None
    print(f"wrote {args.out}: {epochs.n_trials} trials, {epochs.n_channels} channels, "
          f"{epochs.n_samples} samples, {epochs.n_classes} classes, fs={epochs.fs:g} Hz")
    return 0


# ----------------------------------------------------------------------
# train

def _scan_subjects(data_dir):
    try:
        names = sorted(os.listdir(data_dir))
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot list {data_dir}: {exc}") from None
    stems = [n[:-len(".train.eegepoch")] for n in names if n.endswith(".train.eegepoch")]
    if not stems:
        raise CliError(EXIT_DATA, f"no *.train.eegepoch files in {data_dir}")
    pairs = []
    for stem in stems:
        test_path = os.path.join(data_dir, stem + ".test.eegepoch")
        if not os.path.exists(test_path):
            raise CliError(EXIT_DATA, f"{stem}.train.eegepoch has no matching "
                                      f"{stem}.test.eegepoch")
        train_path = os.path.join(data_dir, stem + ".train.eegepoch")
        try:
            pairs.append((stem, load_epochs(train_path), load_epochs(test_path)))
        except FormatError as exc:
            raise CliError(EXIT_DATA, f"bad epoch file for subject {stem}: {exc}") from None
    return pairs


def _split_train_config(items, path):
    train_items, arch_items = {}, {}
    for key, value in items.items():
        prefix, _, rest = key.partition(".")
        if prefix == "train" and rest:
            train_items[rest] = value
        elif prefix == "arch" and rest:
            arch_items[rest] = value
        else:
            raise CliError(EXIT_USAGE,
                           f"{path}: keys must start with train. or arch., got {key!r}")
    unknown = sorted(set(train_items) - set(_TRAIN_TYPES))
    if unknown:
        raise CliError(EXIT_USAGE, f"{path}: unknown train keys: {', '.join(unknown)}")
    derived = sorted(set(arch_items) & set(_DATA_DERIVED_ARCH))
    if derived:
        raise CliError(EXIT_USAGE,
                       f"{path}: {', '.join(derived)} are derived from the data; "
                       "remove them from the config")
    overrides = {}
    for key, raw in train_items.items():
        try:
            overrides[key] = _TRAIN_TYPES[key](raw)
        except ValueError:
            raise CliError(EXIT_USAGE, f"{path}: train.{key}: bad value {raw!r}") from None
    return overrides, arch_items


def _effective_config_text(train_config: TrainConfig, arch_items):
    lines = [f"train.{k}={getattr(train_config, k)!r}"
             if isinstance(getattr(train_config, k), float)
             else f"train.{k}={getattr(train_config, k)}"
             for k in _TRAIN_TYPES]
    lines += [f"arch.{k}={v}" for k, v in arch_items.items()]
    return "\n".join(lines) + "\n"


def cmd_train(args):
    scenario = _SCENARIO_FLAGS[args.scenario]
    train_overrides, arch_items = ({}, {})
    if args.config:
        train_overrides, arch_items = _split_train_config(_read_kv(args.config), args.config)
    if args.seed is not None:
        train_overrides["seed"] = args.seed
    try:
        train_config = default_train_config(scenario, **train_overrides)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"bad training config: {exc}") from None

    pairs = _scan_subjects(args.data)
    names = [stem for stem, _, _ in pairs]
    subjects = [(train, test) for _, train, test in pairs]
    first = subjects[0][0]
    if scenario == "within" or "dropout_rate" in arch_items:
        pass
    else:
        arch_items["dropout_rate"] = "0.2"
    arch_items.update(n_channels=str(first.n_channels), n_samples=str(first.n_samples),
                      n_classes=str(first.n_classes))
    try:
        arch = arch_config_from_items(arch_items)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"bad architecture config: {exc}") from None

    os.makedirs(args.out, exist_ok=True)
    atomic_write(os.path.join(args.out, "config.effective"),
                 _effective_config_text(train_config,
                                        arch_config_to_items(arch)).encode("utf-8"))
    try:
        report = run_scenario(scenario, subjects, arch, train_config,
                              names=names, jobs=args.jobs)
    except ValueError as exc:
        raise CliError(EXIT_DATA, f"scenario failed: {exc}") from None

    atomic_write(os.path.join(args.out, "table.csv"),
                 report_csv_text(report).encode("utf-8"))
    atomic_write(os.path.join(args.out, "summary.txt"),
                 summary_text(report).encode("utf-8"))
    for r in report.subjects:
        atomic_write(os.path.join(args.out, f"history_{r.subject}.csv"),
                     history_csv_text(r.history).encode("utf-8"))
        if r.pretrain_history:
            atomic_write(os.path.join(args.out, f"history_{r.subject}_pretrain.csv"),
                         history_csv_text(r.pretrain_history).encode("utf-8"))
        save_model(r.model, os.path.join(args.out, f"model_{r.subject}.itnetmdl"))
        print(json.dumps({"subject": r.subject, "scenario": r.scenario,
                          "accuracy": r.accuracy}))
    print(json.dumps({"scenario": report.scenario, "mean_accuracy": report.mean,
                      "std_accuracy": report.std}))
    return 0


# ----------------------------------------------------------------------
# explain

def cmd_explain(args):
    if args.fs <= 0:
        raise CliError(EXIT_USAGE, "--fs must be positive")
    try:
        model = load_model(args.model)
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    except FormatError as exc:
        raise CliError(EXIT_DATA, f"bad model file: {exc}") from None
    try:
        atlas = build_atlas(model, fs=args.fs, savgol_half_width=args.savgol_l,
                            savgol_order=args.savgol_p, pad_to=args.pad_to)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    paths = export_atlas(atlas, args.out)
    spectra = sum(os.path.basename(p).startswith("spectrum") for p in paths)
    patterns = sum(os.path.basename(p).startswith("pattern") for p in paths)
    print(f"wrote {spectra} spectrum CSVs, {patterns} pattern CSVs and atlas.svg "
          f"to {args.out} (spectra valid below {atlas.nyquist_hz:g} Hz)")
    return 0


# ----------------------------------------------------------------------
# plan

def cmd_plan(args):
    try:
        t = plan_kernel(args.target_r, args.layers_per_block, args.dilation_base,
                        args.blocks)
        reach = receptive_field_blocks(args.layers_per_block, t, args.dilation_base,
                                       args.blocks)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    print(f"kernel_extent={t}")
    print(f"receptive_field={reach}")
    return 0


# ----------------------------------------------------------------------
# stats

def _read_accuracy_table(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln.strip() for ln in f if ln.strip()]
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot read table {path}: {exc}") from None
    if not lines:
        raise CliError(EXIT_DATA, f"{path}: empty table")
    header = lines[0].split(",")
    try:
        subject_col = header.index("subject")
        acc_col = header.index("accuracy")
    except ValueError:
        raise CliError(EXIT_DATA,
                       f"{path}: header must contain subject and accuracy columns") from None
    rows = {}
    for ln, line in enumerate(lines[1:], 2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise CliError(EXIT_DATA, f"{path}:{ln}: expected {len(header)} cells")
        subject = cells[subject_col]
        if subject in rows:
            raise CliError(EXIT_DATA, f"{path}:{ln}: duplicate subject {subject!r}")
        try:
            rows[subject] = float(cells[acc_col])
        except ValueError:
            raise CliError(EXIT_DATA,
                           f"{path}:{ln}: bad accuracy {cells[acc_col]!r}") from None
    return rows


def cmd_stats(args):
    table_a = _read_accuracy_table(args.table)
    table_b = _read_accuracy_table(args.vs)
    if set(table_a) != set(table_b):
        only_a = sorted(set(table_a) - set(table_b))
        only_b = sorted(set(table_b) - set(table_a))
        raise CliError(EXIT_DATA, "tables cover different subjects"
                       + (f"; only in {args.table}: {', '.join(only_a)}" if only_a else "")
                       + (f"; only in {args.vs}: {', '.join(only_b)}" if only_b else ""))
    subjects = sorted(table_a)
    a = [table_a[s] for s in subjects]
    b = [table_b[s] for s in subjects]
    try:
        if args.test == "wilcoxon":
            res = wilcoxon_one_sided(a, b)
            print("test=wilcoxon_one_sided")
            print(f"n_pairs={len(a)}")
            print(f"n_effective={res.n_effective}")
            print(f"statistic={res.statistic!r}")
            print(f"p_value={res.p_value!r}")
            p = res.p_value
        else:
            res = paired_t_right(a, b)
            print("test=paired_t_right")
            print(f"n_pairs={len(a)}")
            print(f"df={res.df}")
            print(f"statistic={res.statistic!r}")
            print(f"p_value={res.p_value!r}")
            p = res.p_value
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    print(f"significant_at_0.05={'yes' if p < 0.05 else 'no'}")
    return 0


# ----------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="eegitnet",
        description="Inception temporal convolutional network for EEG epochs",
        epilog="exit codes: 0 success, 2 usage/config error, 3 data/format error, "
               "4 runtime failure")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort file")
    p.add_argument("--spec", required=True, help="key=value synthesis spec")
    p.add_argument("--out", required=True, help="output .eegepoch path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and evaluate one scenario")
    p.add_argument("--scenario", required=True, choices=sorted(_SCENARIO_FLAGS))
    p.add_argument("--data", required=True,
                   help="directory of <subject>.train.eegepoch / <subject>.test.eegepoch")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value file with train. and arch. keys")
    p.add_argument("--jobs", type=int, default=1, help="parallel subject workers")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="export a trained model's filter atlas")
    p.add_argument("--model", required=True, help=".itnetmdl path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fs", type=float, required=True, help="sampling rate in Hz")
    p.add_argument("--pad-to", type=int, default=512, help="DFT length (default 512)")
    p.add_argument("--savgol-l", type=int, default=5,
                   help="smoothing window half-width (default 5)")
    p.add_argument("--savgol-p", type=int, default=3,
                   help="smoothing polynomial order (default 3)")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("plan", help="smallest kernel reaching a receptive field")
    p.add_argument("--target-r", type=int, required=True)
    p.add_argument("--layers-per-block", type=int, default=2)
    p.add_argument("--dilation-base", type=int, default=2)
    p.add_argument("--blocks", type=int, default=4)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("stats", help="paired one-sided comparison of two tables")
    p.add_argument("--table", required=True, help="accuracy table (claimed better)")
    p.add_argument("--vs", required=True, help="accuracy table to compare against")
    p.add_argument("--test", required=True, choices=["wilcoxon", "ttest"])
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
