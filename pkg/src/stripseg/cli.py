"""Command-line interface: dataset synthesis, training, evaluation,
gradient checking, and ablation batches.

Config files are flat `key = value` text with `#` comments; unknown keys are
rejected. Exit codes: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional

import numpy as np

from . import gradcheck as gradcheck_mod
from . import metrics as metrics_mod
from . import net, synthdata
from .errors import (CheckpointError, ConfigError, ContractViolation,
                     NonFiniteLossError, PgmError)
from .net import NetConfig
from .precision import real_dtype
from .synthdata import SynthConfig

_BOOL_LITERALS = {"true": True, "false": False, "1": True, "0": False,
                  "yes": True, "no": False}

# key -> (section, field, parser)
_CONFIG_KEYS = {
    "levels": ("net", "levels", int),
    "base_channels": ("net", "base_channels", int),
    "conv_kind": ("net", "conv_kind", str),
    "offset_mode": ("net", "offset_mode", str),
    "strip_length": ("net", "strip_length", int),
    "use_cl": ("net", "use_cl", "bool"),
    "use_nc": ("net", "use_nc", "bool"),
    "skeleton_iterations": ("net", "skeleton_iterations", int),
    "connectivity_mode": ("net", "connectivity_mode", str),
    "w_mask": ("net", "w_mask", float),
    "w_cl": ("net", "w_cl", float),
    "w_con": ("net", "w_con", float),
    "optimizer": ("net", "optimizer", str),
    "learning_rate": ("net", "learning_rate", float),
    "batch_size": ("net", "batch_size", int),
    "epochs": ("net", "epochs", int),
    "threshold": ("net", "threshold", float),
    "seed": ("net", "seed", int),
    "image_size": ("synth", "size", int),
    "branch_depth": ("synth", "depth", int),
    "root_width": ("synth", "root_width", float),
    "width_decay": ("synth", "width_decay", float),
    "angle_jitter": ("synth", "angle_jitter", float),
    "vessel_intensity": ("synth", "vessel_intensity", float),
    "background_intensity": ("synth", "background_intensity", float),
    "noise_sigma": ("synth", "noise_sigma", float),
    "blur": ("synth", "blur", "bool"),
    "train_count": ("corpus", "train", int),
    "val_count": ("corpus", "val", int),
    "test_count": ("corpus", "test", int),
}

ABLATION_GRID = (
    ("square", "square", False, False),
    ("xy", "ssl_xy", False, False),
    ("zw", "ssl_zw", False, False),
    ("xyzw", "ssl_xyzw", False, False),
    ("xyzw_nc", "ssl_xyzw", True, False),
    ("xyzw_nc_cl", "ssl_xyzw", True, True),
)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {"net": {}, "synth": {}, "corpus": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, literal = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section, field, kind = _CONFIG_KEYS[key]
        try:
            if kind == "bool":
                value = _BOOL_LITERALS[literal.lower()]
            else:
                value = kind(literal)
        except (KeyError, ValueError):
            raise ConfigError(
                f"{source}:{lineno}: bad value {literal!r} for {key}") from None
        values[section][field] = value
    return values


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {"net": {}, "synth": {}, "corpus": {}}
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read(), source=path)


def make_configs(cfg: dict, seed: Optional[int]):
    net_kw = dict(cfg["net"])
    synth_kw = dict(cfg["synth"])
    if seed is not None:
        net_kw["seed"] = seed
    try:
        net_config = NetConfig(**net_kw)
        synth_kw.setdefault("seed", net_config.seed)
        synth_config = SynthConfig(**synth_kw)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from None
    counts = (cfg["corpus"].get("train", 64), cfg["corpus"].get("val", 16),
              cfg["corpus"].get("test", 0))
    return net_config, synth_config, counts


# ---------------------------------------------------------------------------
# shared run helpers
# ---------------------------------------------------------------------------

def _stack_batch(samples: List[synthdata.Sample]):
    dt = real_dtype()
    images = np.stack([s.image for s in samples]).astype(dt)[:, None]
    masks = np.stack([s.mask for s in samples]).astype(np.uint8)
    return images, masks


def train_model(samples: List[synthdata.Sample], config: NetConfig,
                log_path: Optional[str] = None, verbose: bool = False) -> net.NetParams:
    """Trains a fresh model on the given samples; optionally logs per-step losses."""
    if not samples:
        raise ContractViolation("training split is empty")
    params = net.init_params(config)
    order_rng = np.random.default_rng(config.seed)
    log = None
    if log_path:
        log = open(log_path, "w", encoding="utf-8")
        log.write("epoch\tstep\tl_mask\tl_cl\tl_con\ttotal\n")
    try:
        for epoch in range(config.epochs):
            order = order_rng.permutation(len(samples))
            for step, lo in enumerate(range(0, len(samples), config.batch_size)):
                batch = [samples[i] for i in order[lo:lo + config.batch_size]]
                images, masks = _stack_batch(batch)
                br = net.train_step(images, masks, params, config)
                if log:
                    log.write(f"{epoch}\t{step}\t{br.l_mask:.6f}\t{br.l_cl:.6f}"
                              f"\t{br.l_con:.6f}\t{br.total:.6f}\n")
            if verbose:
                print(f"epoch {epoch}: total={br.total:.4f}", file=sys.stderr)
    finally:
        if log:
            log.close()
    return params


def predict_masks(params: net.NetParams, config: NetConfig,
                  samples: List[synthdata.Sample]) -> List[np.ndarray]:
    preds = []
    for lo in range(0, len(samples), max(1, config.batch_size)):
        chunk = samples[lo:lo + max(1, config.batch_size)]
        images, _ = _stack_batch(chunk)
        seg, _ = net.forward(images, params, config)
        for i in range(len(chunk)):
            preds.append((seg[i, 0] >= config.threshold).astype(np.uint8))
    return preds


def evaluate_samples(preds: List[np.ndarray],
                     samples: List[synthdata.Sample]) -> metrics_mod.MetricsReport:
    rows = [metrics_mod.evaluate_pair(p, s.mask, s.id)
            for p, s in zip(preds, samples)]
    return metrics_mod.build_report(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    cfg = load_config(args.config)
    net_config, synth_config, counts = make_configs(cfg, args.seed)
    seed = net_config.seed if args.seed is None else args.seed
    rows = synthdata.write_dataset(args.out, synth_config, seed, counts)
    print(f"wrote {len(rows)} samples to {args.out} "
          f"(train/val/test = {counts[0]}/{counts[1]}/{counts[2]})")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    net_config, _, _ = make_configs(cfg, args.seed)
    samples = synthdata.load_split(args.dataset, "train")
    log_path = args.out or (os.path.splitext(args.checkpoint)[0] + "_losslog.tsv")
    params = train_model(samples, net_config, log_path, verbose=args.verbose)
    net.save_checkpoint(params, args.checkpoint)
    print(f"trained {net_config.epochs} epochs on {len(samples)} samples; "
          f"checkpoint -> {args.checkpoint}, loss log -> {log_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    net_config, _, _ = make_configs(cfg, args.seed)
    samples = synthdata.load_split(args.dataset, args.split)
    if not samples:
        raise ContractViolation(f"no samples in split {args.split!r}")
    if (args.checkpoint is None) == (args.pred_dir is None):
        raise ConfigError("eval needs exactly one of --checkpoint or --pred-dir")
    if args.checkpoint:
        expect = net.init_params(net_config)
        params = net.load_checkpoint(args.checkpoint, expect)
        preds = predict_masks(params, net_config, samples)
    else:
        preds = []
        for s in samples:
            plane = synthdata.read_pgm(os.path.join(args.pred_dir, f"{s.id}.pgm"))
            preds.append((plane > 0.5).astype(np.uint8))
    report = evaluate_samples(preds, samples)
    out = args.out or os.path.join(args.dataset, f"metrics_{args.split}.tsv")
    metrics_mod.report_to_tsv(report, out)
    means = "  ".join(f"{k}={report.mean[k]:.4f}" for k in metrics_mod.METRIC_NAMES)
    print(f"{len(report.rows)} samples: {means}")
    print(f"metrics -> {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all(seed=args.seed or 0)
    ok = True
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{res.name:18s} max_rel_err={res.max_rel_err:.3e} "
              f"tol={res.tol:.0e} {status}")
        ok &= res.passed
    return 0 if ok else 1


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    base_config, _, _ = make_configs(cfg, args.seed)
    train_samples = synthdata.load_split(args.dataset, "train")
    held_out = synthdata.load_split(args.dataset, "val")
    if not held_out:
        held_out = synthdata.load_split(args.dataset, "test")
    if not train_samples or not held_out:
        raise ContractViolation("ablate needs non-empty train and held-out splits")
    lines = []
    for label, kind, use_nc, use_cl in ABLATION_GRID:
        config = base_config.with_overrides(conv_kind=kind, use_nc=use_nc,
                                            use_cl=use_cl)
        params = train_model(train_samples, config, verbose=args.verbose)
        report = evaluate_samples(predict_masks(params, config, held_out), held_out)
        cells = [label, kind, str(int(use_nc)), str(int(use_cl))]
        for k in metrics_mod.METRIC_NAMES:
            cells.append(f"{report.mean[k]:.6f}")
            cells.append(f"{report.se[k]:.6f}")
        lines.append("\t".join(cells))
        print(f"{label:12s} dice={report.mean['dice']:.4f} "
              f"cl_dice={report.mean['cl_dice']:.4f}")
    header = ["config", "conv_kind", "nc", "cl"]
    for k in metrics_mod.METRIC_NAMES:
        header += [k, f"{k}_se"]
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        f.write("\n".join(lines) + "\n")
    print(f"ablation table -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stripseg",
        description="Strip-convolution segmentation toolkit: synthesize vessel "
                    "corpora, train, evaluate, gradient-check, and ablate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="master seed override")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset's train split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="loss log TSV path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or predicted masks")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=synthdata.SPLITS)
    p.add_argument("--checkpoint")
    p.add_argument("--pred-dir", help="directory of predicted mask PGMs")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="metrics TSV path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="run all finite-difference suites in 64-bit mode")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate",
                       help="train/evaluate the conv-kind x loss-flag grid")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="combined TSV path")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_ablate)
    return parser


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ContractViolation, CheckpointError, PgmError,
            NonFiniteLossError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
