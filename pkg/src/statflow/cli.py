"""Command-line surface: stats -> distill -> eval plus theory and viz.

Commands
    stats     encode the original dataset once, cache class statistics
    distill   optimize synthetic images (sfm | tcdd | ncdd | lgm)
    eval      train probes / projectors and report validation accuracy
    baseline  select one real image per class (random | centroids | neighbors)
    theory    run the Monte-Carlo checks and emit a report table
    viz       PCA flow plot comparing statistical and synthetic flows

Builtin encoders: "toy-conv-32" (seeded random conv net, 32x32, F=128)
and "identity-<F>" (feature-space passthrough); anything else is read
as a path to a weight file. Artifacts land under --out and carry the
effective config fingerprint.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import distill as distill_mod
from . import evaluate as eval_mod
from . import statistics as stats_mod
from .config import RunConfig, echo_config, load_config
from .data import Dataset, load_dataset_npz, make_toy_dataset
from .distill import SyntheticDataset
from .encoders import Encoder, load_encoder
from .errors import FingerprintMismatch, ValidationError
from .tensorio import atomic_write_text
from .theory import (McConfig, check_exchangeability, check_gradient_degeneration,
                     check_lognormal, check_softmax_variance, unit_norm_feature)
from .viz import emit_flow_plot


def _build_encoder(cfg: RunConfig, which: str = "distill") -> Encoder:
    enc = cfg.encoder
    if which == "eval" and enc.eval_name is not None:
        return load_encoder(enc.eval_name,
                            enc.eval_seed if enc.eval_seed is not None else enc.seed)
    return load_encoder(enc.name, enc.seed)


def _build_dataset(cfg: RunConfig, split: str) -> Dataset:
    ds = cfg.dataset
    if ds.name == "toy":
        per = ds.per_class if split == "train" else ds.val_per_class
        return make_toy_dataset(ds.num_classes, per, ds.resolution, ds.seed,
                                split, ds.hue_jitter, ds.noise_sigma)
    if ds.name == "npz":
        if not ds.path:
            raise ValidationError("dataset.path required for npz datasets")
        path = ds.path if split == "train" else _sibling_split(ds.path, split)
        return load_dataset_npz(path, ds.resolution)
    raise ValidationError(f"unknown dataset {ds.name!r}")


def _sibling_split(path: str, split: str) -> str:
    root, ext = os.path.splitext(path)
    cand = f"{root}.{split}{ext}"
    if os.path.exists(cand):
        return cand
    raise FileNotFoundError(
        f"no {split} split next to {path}; expected {cand}"
    )


def _stats_path(out: str) -> str:
    return os.path.join(out, "stats.sfmstats")


def _load_stats_or_fail(out: str):
    path = _stats_path(out)
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"statistics cache not found at {path}; run `statflow stats` first"
        )
    return stats_mod.load_statistics(path)


def _load_train_dir(path: str):
    """A training set is either a synthetic directory or a baseline npz dir."""
    if os.path.exists(os.path.join(path, "pyramids.tnsr")):
        return SyntheticDataset.load(path)
    npz = os.path.join(path, "data.npz")
    if os.path.exists(npz):
        return load_dataset_npz(npz)
    raise FileNotFoundError(f"no synthetic dataset or baseline data under {path}")


# -- command handlers ---------------------------------------------------------


def cmd_stats(cfg: RunConfig, args) -> int:
    out = cfg.output.dir
    encoder = _build_encoder(cfg)
    train = _build_dataset(cfg, "train")
    stats = stats_mod.compute_class_statistics(encoder, train)
    stats_mod.save_statistics(stats, _stats_path(out))
    echo_config(cfg, out)
    print(f"[stats] {stats.total_count} images, C={stats.num_classes}, "
          f"F={stats.feature_dim} -> {_stats_path(out)}")
    print(f"[stats] encoder fingerprint {encoder.fingerprint}, "
          f"stats fingerprint {stats.fingerprint}")
    return 0


def cmd_distill(cfg: RunConfig, args) -> int:
    out = cfg.output.dir
    encoder = _build_encoder(cfg)
    dc = cfg.distill
    if args.method:
        dc = _replace_dataclass(dc, method=args.method)
    if args.w_mode:
        dc = _replace_dataclass(dc, lgm_w_mode=args.w_mode)
    if dc.method in ("sfm", "tcdd", "ncdd"):
        stats = _load_stats_or_fail(out)
        if stats.encoder_fingerprint != encoder.fingerprint:
            raise FingerprintMismatch(
                f"stats cache {_stats_path(out)} was built with encoder "
                f"{stats.encoder_fingerprint}, current encoder is "
                f"{encoder.fingerprint}; refusing to distill"
            )
        if dc.method == "sfm":
            flow = stats_mod.build_statistical_flow(stats)
            ds = distill_mod.distill_sfm(dc, encoder, flow)
        else:
            ds = distill_mod.distill_ablation(dc, encoder, stats)
    else:
        train = _build_dataset(cfg, "train")
        ds = distill_mod.distill_lgm(dc, encoder, train)
    syn_dir = os.path.join(out, f"synthetic-{dc.method}"
                           + (f"-{dc.lgm_w_mode}" if dc.method == "lgm" else ""))
    ds.save(syn_dir)
    echo_config(cfg, out)
    final = ds.provenance.get("final_loss", float("nan"))
    print(f"[distill] {dc.method}: {ds.provenance['iterations_run']} steps, "
          f"final loss {final:.4f} -> {syn_dir}")
    return 0


def cmd_baseline(cfg: RunConfig, args) -> int:
    out = cfg.output.dir
    encoder = _build_encoder(cfg)
    train = _build_dataset(cfg, "train")
    method = args.method or "random"
    synthetic = None
    if method == "neighbors":
        synthetic = _load_train_dir(args.synthetic or os.path.join(out, "synthetic-sfm"))
        if not isinstance(synthetic, SyntheticDataset):
            raise ValidationError("neighbors baseline needs a synthetic directory")
    sel = eval_mod.select_baseline(method, train, encoder, synthetic,
                                   seed=cfg.dataset.seed)
    bdir = os.path.join(out, f"baseline-{method}")
    os.makedirs(bdir, exist_ok=True)
    np.savez(os.path.join(bdir, "data.npz"), images=sel.images, labels=sel.labels)
    atomic_write_text(os.path.join(bdir, "meta.json"), json.dumps({
        "kind": "real-selection",
        "method": method,
        "encoder_fingerprint": encoder.fingerprint,
        "config_fingerprint": cfg.fingerprint(),
    }, indent=2, sort_keys=True))
    echo_config(cfg, out)
    print(f"[baseline] {method}: one image per class -> {bdir}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = cfg.output.dir
    encoder_d = _build_encoder(cfg, "distill")
    encoder_e = _build_encoder(cfg, "eval")
    ec = cfg.eval
    if args.strategy:
        ec = _replace_dataclass(ec, strategy=args.strategy)
    if args.alpha is not None:
        ec = _replace_dataclass(ec, soft_label_alpha=args.alpha)
    if args.ip:
        ec = _replace_dataclass(ec, inherit_initial_parameters=True)

    train_dir = args.synthetic or os.path.join(out, "synthetic-sfm")
    train_set = _load_train_dir(train_dir)
    if isinstance(train_set, SyntheticDataset):
        enc_fp = train_set.provenance.get("encoder_fingerprint")
        if enc_fp and enc_fp != encoder_d.fingerprint:
            raise FingerprintMismatch(
                f"synthetic dataset {train_dir} was distilled under encoder "
                f"{enc_fp}, current distillation encoder is {encoder_d.fingerprint}"
            )

    original = _build_dataset(cfg, "train")
    validation = _build_dataset(cfg, "val")
    golden = eval_mod.train_golden_classifier(encoder_d, original, ec)

    if ec.strategy == "vanilla":
        teacher = (encoder_d, golden) if ec.soft_label_alpha > 0 else None
        _, report = eval_mod.train_linear_probe(train_set, encoder_e, ec,
                                                validation, teacher)
    elif ec.strategy == "ci":
        report = eval_mod.evaluate_ci(train_set, encoder_e, encoder_d, golden,
                                      ec, validation)
    else:
        report = eval_mod.evaluate_strategy(train_set, encoder_e, encoder_d,
                                            golden, ec, validation)

    rep_dir = os.path.join(out, "reports")
    os.makedirs(rep_dir, exist_ok=True)
    jsonl = os.path.join(rep_dir, "eval.jsonl")
    existing = ""
    if os.path.exists(jsonl):
        with open(jsonl) as f:
            existing = f.read()
    atomic_write_text(jsonl,
                      existing + json.dumps(report.to_record(), sort_keys=True) + "\n")
    _write_summary(rep_dir)
    echo_config(cfg, out)
    print(f"[eval] {ec.strategy}: top-1 accuracy {report.accuracy:.4f} "
          f"(fingerprint {report.fingerprint()}) -> {jsonl}")
    return 0


def _write_summary(rep_dir: str) -> None:
    jsonl = os.path.join(rep_dir, "eval.jsonl")
    rows = []
    with open(jsonl) as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    header = f"{'strategy':<10} {'accuracy':>9} {'params':>8} {'fingerprint':>18}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['strategy']:<10} {r['accuracy']:>9.4f} "
                     f"{r['param_count']:>8d} {r['fingerprint']:>18}")
    atomic_write_text(os.path.join(rep_dir, "summary.txt"), "\n".join(lines) + "\n")


def cmd_theory(cfg: RunConfig, args) -> int:
    out = cfg.output.dir
    mc = cfg.theory
    feature = unit_norm_feature(mc)
    rng = np.random.default_rng(np.random.SeedSequence([0x7E0, mc.seed]))
    c_small = min(mc.num_classes, 10)
    feats = rng.normal(0.0, 1.0, size=(4 * c_small, 32))
    labels = np.tile(np.arange(c_small), 4)
    results = [
        check_exchangeability(mc, feature),
        # scalar sampling is cheap; keep enough trials for the 2% threshold
        check_lognormal(0.0, 0.5, max(mc.trials, 200_000), mc.seed),
        check_softmax_variance(mc, feature),
        check_gradient_degeneration(
            McConfig(num_classes=c_small, feature_dim=32, sigma_w=mc.sigma_w,
                     trials=min(mc.trials, 1000), seed=mc.seed),
            feats, labels),
    ]
    tdir = os.path.join(out, "theory")
    os.makedirs(tdir, exist_ok=True)
    lines = ["check,statistic,stderr,threshold,passed"]
    text = []
    for r in results:
        lines.append(f"{r.name},{r.statistic!r},{r.stderr!r},{r.threshold!r},{r.passed}")
        text.append(f"{r.name:<24} stat={r.statistic:.6g} se={r.stderr:.3g} "
                    f"thr={r.threshold:g} {'PASS' if r.passed else 'FAIL'}")
    atomic_write_text(os.path.join(tdir, "report.csv"), "\n".join(lines) + "\n")
    atomic_write_text(os.path.join(tdir, "report.txt"), "\n".join(text) + "\n")
    echo_config(cfg, out)
    print("\n".join(text))
    return 0 if all(r.passed for r in results) else 1


def cmd_viz(cfg: RunConfig, args) -> int:
    out = cfg.output.dir
    encoder = _build_encoder(cfg)
    stats = _load_stats_or_fail(out)
    if stats.encoder_fingerprint != encoder.fingerprint:
        raise FingerprintMismatch("stats cache does not match the encoder")
    flow = stats_mod.build_statistical_flow(stats)
    train_dir = args.synthetic or os.path.join(out, "synthetic-sfm")
    syn = _load_train_dir(train_dir)
    if not isinstance(syn, SyntheticDataset):
        raise ValidationError("viz needs a synthetic dataset directory")
    from . import flows as flows_mod
    from .encoders import encode_batch

    feats = encode_batch(encoder, syn.compose_all())
    syn_flow = flows_mod.analytic_flow(feats, flows_mod.one_hot(
        syn.labels, syn.num_classes))
    vdir = os.path.join(out, "viz")
    os.makedirs(vdir, exist_ok=True)
    res = emit_flow_plot(flow, syn_flow, cfg.viz.k_classes,
                         os.path.join(vdir, "flows"))
    echo_config(cfg, out)
    print(f"[viz] mean cosine {res['mean_cosine']:.4f} -> {res['png']}")
    return 0


def _replace_dataclass(dc, **kw):
    import dataclasses

    return dataclasses.replace(dc, **kw)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="statflow",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", default=None, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None,
                        help="override distill/eval/theory seeds at once")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--encoder", default=None,
                        help="builtin encoder name or weight file path")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="compute and cache class statistics")
    p = sub.add_parser("distill", help="synthesize one image per class")
    p.add_argument("--method", choices=list(distill_mod.METHODS), default=None)
    p.add_argument("--w-mode", dest="w_mode", choices=list(distill_mod.W_MODES),
                   default=None)
    p = sub.add_parser("baseline", help="select real images per class")
    p.add_argument("--method", choices=["random", "centroids", "neighbors"],
                   default="random")
    p.add_argument("--synthetic", default=None,
                   help="synthetic dir (for the neighbors baseline)")
    p = sub.add_parser("eval", help="evaluate a train set on the validation split")
    p.add_argument("--strategy", choices=["vanilla", "ci", "jt", "st"], default=None)
    p.add_argument("--alpha", type=float, default=None,
                   help="soft-label KL weight (vanilla/jt/st)")
    p.add_argument("--ip", action="store_true",
                   help="inherit golden initial parameters (jt/st)")
    p.add_argument("--synthetic", default=None,
                   help="directory of the train set to evaluate")
    p = sub.add_parser("theory", help="run the Monte-Carlo checks")
    p = sub.add_parser("viz", help="plot statistical vs synthetic flows")
    p.add_argument("--synthetic", default=None)

    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.output.dir = args.out
        if args.encoder:
            cfg.encoder.name = args.encoder
        if args.seed is not None:
            cfg.distill = _replace_dataclass(cfg.distill, seed=args.seed)
            cfg.eval = _replace_dataclass(cfg.eval, seed=args.seed)
            cfg.theory = _replace_dataclass(cfg.theory, seed=args.seed)
        handlers = {
            "stats": cmd_stats,
            "distill": cmd_distill,
            "baseline": cmd_baseline,
            "eval": cmd_eval,
            "theory": cmd_theory,
            "viz": cmd_viz,
        }
        return handlers[args.command](cfg, args)
    except (ValidationError, FingerprintMismatch, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
