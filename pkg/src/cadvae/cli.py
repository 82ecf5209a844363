"""``cadvae`` command-line entry point.

Exit codes: 0 success, 2 bad flags or config, 3 I/O error, 4 training
divergence, 5 malformed input file.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .data import BiasSpec, LabeledDataset, generate_colored_digits, load_dataset, save_dataset
from .errors import CadVaeError, ConfigError, DivergenceError, FormatError
from .trainer import TrainConfig, fit, load_checkpoint

log = logging.getLogger("cadvae")

EXIT_OK, EXIT_FLAGS, EXIT_IO, EXIT_DIVERGENCE, EXIT_FORMAT = 0, 2, 3, 4, 5
PATH_KEYS = ("data_path", "test_data_path", "out_dir")
DROPS = {
    "cmi": {"lambda_cmi": 0.0},
    "lri": {"lambda_lri": 0.0},
    "tc": {"gamma_tc": 0.0},
    "all": {"lambda_cmi": 0.0, "lambda_lri": 0.0, "gamma_tc": 0.0},
}


# ---------------------------------------------------------------------------
# key=value configs


def _convert(key, raw, default):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def _pairs(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _build(cls, pairs):
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: _convert(k, v, getattr(defaults, k)) for k, v in pairs.items() if k in names}
    return cls(**kwargs)


def parse_config_text(text, cls=TrainConfig):
    """Parse ``key=value`` lines into ``cls``; unknown keys are rejected."""
    pairs = _pairs(text)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(pairs) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return _build(cls, pairs)


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    bias: BiasSpec
    paths: dict


def parse_run_config(text) -> RunConfig:
    """Keys may name TrainConfig or BiasSpec fields (shared names such as
    ``seed`` and ``image_size`` feed both) or one of the path keys."""
    pairs = _pairs(text)
    known = {f.name for f in dataclasses.fields(TrainConfig)} | {f.name for f in dataclasses.fields(BiasSpec)}
    unknown = sorted(set(pairs) - known - set(PATH_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    bias = _build(BiasSpec, pairs).validate()
    return RunConfig(_build(TrainConfig, pairs), bias, {k: pairs[k] for k in PATH_KEYS if k in pairs})


def read_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())


# ---------------------------------------------------------------------------
# shared helpers


def _threads():
    raw = os.environ.get("CADVAE_THREADS")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"CADVAE_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("CADVAE_THREADS must be >= 1")
    return n


def _index(ds: LabeledDataset, idx, flag):
    if not 0 <= idx < len(ds):
        raise ConfigError(f"{flag} {idx} out of range for {len(ds)} samples")
    return idx


def default_test_set(rc: RunConfig, n_train) -> LabeledDataset:
    spec = dataclasses.replace(rc.bias, seed=rc.bias.seed + 1)
    return generate_colored_digits(max(200, min(n_train // 4, 5000)), spec, unbiased=True)


def evaluate(model, test: LabeledDataset, train: LabeledDataset = None, probe_seed=0,
             delta_mode="permute_ys", extractor_epochs=3, workers=1):
    """Probe metrics plus ΔFID/ΔIS as a MetricsReport.

    Without ``train`` the probe is fitted on the first half of ``test`` and
    scored on the second half.
    """
    from .metrics import MetricsReport, delta_metrics, probe_eval, train_feature_extractor

    if train is None:
        half = len(test) // 2
        train, test = test.subset(np.arange(half)), test.subset(np.arange(half, len(test)))
    probe = probe_eval(model, train, test, ("Y",), seed=probe_seed)
    extractor = train_feature_extractor(test, seed=probe_seed, epochs=extractor_epochs)
    delta = delta_metrics(model, test, extractor, mode=delta_mode, seed=probe_seed, workers=workers)
    return MetricsReport(probe.accuracy, probe.dp, probe.eod, delta.delta_fid, delta.delta_is,
                         probe_seed, len(test))


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_data(args, rc: RunConfig = None):
    path = args.data or (rc.paths.get("data_path") if rc else None)
    if not path:
        raise ConfigError("no dataset given (--data or data_path)")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    spec = BiasSpec(bias_rate=args.bias_rate, image_size=args.size, seed=args.seed,
                    max_shift=args.max_shift, stroke_dropout=args.stroke_dropout,
                    jitter_std=args.jitter).validate()
    ds = generate_colored_digits(args.n, spec, unbiased=args.unbiased)
    save_dataset(args.out, ds)
    print(f"wrote {len(ds)} samples to {args.out}")
    print(f"empirical bias rate: {ds.bias_rate():.4f}")
    return EXIT_OK


def _train_one(cfg: TrainConfig, ds, out_dir, test=None):
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    state, history = fit(ds, cfg, val=test, out_dir=out_dir,
                         progress=lambda rec: print(json.dumps(rec, sort_keys=True), flush=True))
    return state, history


def cmd_train(args):
    rc = read_run_config(args.config)
    ds = _load_data(args, rc)
    out = args.out or rc.paths.get("out_dir")
    if not out:
        raise ConfigError("no output directory given (--out or out_dir)")
    test = load_dataset(args.val_data) if args.val_data else None
    _train_one(rc.train, ds, out, test)
    print(f"checkpoint: {os.path.join(out, 'checkpoint.cadc')}")
    return EXIT_OK


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    test = load_dataset(args.test_data)
    train = load_dataset(args.train_data) if args.train_data else None
    report = evaluate(state.model, test, train, probe_seed=args.probe_seed, delta_mode=args.delta_mode,
                      workers=_threads())
    print(report.to_json())
    if args.out:
        _write_json(args.out, dataclasses.asdict(report))
    return EXIT_OK


def cmd_counterfactual(args):
    from .editing import counterfactual, grid_filename, render_grid

    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    src = _index(ds, args.source_idx, "--source-idx")
    ref = _index(ds, args.ref_idx, "--ref-idx")
    grid = counterfactual(state.model, ds.images[src], ds.images[ref])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, grid_filename("counterfactual", f"{src}-{ref}"))
    render_grid(grid, path)
    print(path)
    return EXIT_OK


def cmd_traverse(args):
    from .editing import grid_filename, render_grid, traversal_grid

    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    src = _index(ds, args.source_idx, "--source-idx")
    ref = _index(ds, args.ref_idx, "--ref-idx")
    grid = traversal_grid(state.model, ds.images[src], ds.images[ref], s_replaced=args.mode == "red")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, grid_filename("traverse", f"{src}-{ref}", mode=args.mode))
    render_grid(grid, path)
    print(f"{path} ({grid.rows}x{grid.cols})")
    return EXIT_OK


def cmd_export_latents(args):
    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    mu = state.model.posterior_means(ds.images)
    lay = state.model.layout
    header = ["index", "y", "s"]
    for comp, d in zip("XYSR", lay.sizes):
        header += [f"z{comp}_{j}" for j in range(d)]
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(ds)):
            writer.writerow([i, int(ds.y[i]), int(ds.s[i]), *(repr(float(v)) for v in mu[i])])
    print(f"wrote {len(ds)} rows to {args.out}")
    return EXIT_OK


def run_ablation(rc: RunConfig, ds, out, drop, test=None, probe_seed=0, workers=1):
    """Train the full and the ablated model and compare their metrics."""
    if test is None:
        test = load_dataset(rc.paths["test_data_path"]) if "test_data_path" in rc.paths else default_test_set(rc, len(ds))
    variants = {"full": rc.train, f"drop_{drop}": dataclasses.replace(rc.train, **DROPS[drop])}
    result = {"drop": drop}
    for name, cfg in variants.items():
        state, history = _train_one(cfg, ds, os.path.join(out, name), test)
        report = evaluate(state.model, test, ds, probe_seed=probe_seed, workers=workers)
        last = history["epochs"][-1] if history["epochs"] else {}
        result["full" if name == "full" else "ablated"] = {
            **dataclasses.asdict(report),
            "opponent_acc_s_from_zY": last.get("val_acc_s_from_zY"),
            "opponent_acc_y_from_zS": last.get("val_acc_y_from_zS"),
            "lambda_cmi": cfg.lambda_cmi,
            "lambda_lri": cfg.lambda_lri,
            "gamma_tc": cfg.gamma_tc,
        }
    _write_json(os.path.join(out, "ablation.json"), result)
    return result


def cmd_ablate(args):
    rc = read_run_config(args.config)
    ds = _load_data(args, rc)
    out = args.out or rc.paths.get("out_dir")
    if not out:
        raise ConfigError("no output directory given (--out or out_dir)")
    os.makedirs(out, exist_ok=True)
    test = load_dataset(args.test_data) if args.test_data else None
    result = run_ablation(rc, ds, out, args.drop, test=test, workers=_threads())
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FLAGS, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="cadvae", description="Correlation-aware disentangled VAE toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a colored-digit dataset file")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--bias-rate", type=float, default=0.7)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--unbiased", action="store_true")
    g.add_argument("--max-shift", type=int, default=0)
    g.add_argument("--stroke-dropout", type=float, default=0.0)
    g.add_argument("--jitter", type=float, default=0.05)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--val-data", help="held-out set for per-epoch leakage probes")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="write a MetricsReport for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test-data", required=True)
    e.add_argument("--train-data", help="probe training split (default: first half of the test data)")
    e.add_argument("--probe-seed", type=int, default=0)
    e.add_argument("--delta-mode", choices=("permute_ys", "traverse"), default="permute_ys")
    e.add_argument("--out", help="JSON output path")
    e.set_defaults(func=cmd_eval)

    for name, func, help_text in (("counterfactual", cmd_counterfactual, "render a code-swap grid"),
                                  ("traverse", cmd_traverse, "render an interpolation grid")):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--source-idx", type=int, default=0)
        c.add_argument("--ref-idx", type=int, default=1)
        c.add_argument("--out", required=True, help="output directory")
        if name == "traverse":
            c.add_argument("--mode", choices=("blue", "red"), default="blue")
        c.set_defaults(func=func)

    x = sub.add_parser("export-latents", help="write posterior means as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_latents)

    a = sub.add_parser("ablate", help="compare the full objective with one term removed")
    a.add_argument("--config", required=True)
    a.add_argument("--data")
    a.add_argument("--test-data")
    a.add_argument("--out")
    a.add_argument("--drop", choices=tuple(DROPS), required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"cadvae: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DivergenceError as exc:
        print(f"cadvae: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"cadvae: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CadVaeError, ValueError) as exc:
        print(f"cadvae: {exc}", file=sys.stderr)
        return EXIT_FLAGS


if __name__ == "__main__":
    sys.exit(main())
