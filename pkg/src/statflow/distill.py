"""Distillation loops: statistical flow matching, its target/non-target
ablations, and the linear-gradient-matching baseline.

All methods share one optimization skeleton: compose every pyramid,
run the per-step augmentation pass(es), encode, compute a matching loss
on the feature batch, and backpropagate through encoder, augmentation
and pyramid composition to the level tensors. Flow matching needs no
real images at any step -- its target is the cached statistical flow.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import flows
from .data import Dataset
from .encoders import Encoder, encode_batch
from .errors import FingerprintMismatch, ValidationError
from .optim import Adam
from .statistics import ClassStatistics, StatFlow, nontarget_centers
from .synthesis import AugmentParams, PyramidImage, apply_transform, \
    apply_transform_vjp, default_base_resolution, sample_transform
from .tensorio import atomic_write_text, save_tensors, load_tensors

METHODS = ("sfm", "tcdd", "ncdd", "lgm")
W_MODES = ("random", "fixed", "analytic")


@dataclass
class DistillConfig:
    method: str = "sfm"
    lgm_w_mode: str = "random"
    iterations: int = 5000
    level_interval: int = 200
    learning_rate: float = 0.002
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    augmentations_per_batch: int = 1
    real_batch_per_class: int = 16
    seed: int = 0
    aggregation: str = "flatten"
    augment: AugmentParams | None = None
    base_resolution: int | None = None
    init_std: float = 0.1
    # optional plateau early stop (used by the acceptance runs)
    plateau_patience: int | None = None
    plateau_tol: float = 1e-4

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.lgm_w_mode not in W_MODES:
            raise ValidationError(f"unknown W mode {self.lgm_w_mode!r}")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.augmentations_per_batch < 1:
            raise ValidationError("augmentations_per_batch must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.aggregation not in ("flatten", "per_class_mean"):
            raise ValidationError(f"unknown aggregation {self.aggregation!r}")

    def fingerprint(self) -> str:
        d = asdict(self)
        if self.augment is not None:
            d["augment"] = asdict(self.augment)
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class SyntheticDataset:
    """One pyramid image per class plus provenance of the run."""

    pyramids: list
    labels: np.ndarray
    provenance: dict
    trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        c = len(self.pyramids)
        if sorted(self.labels.tolist()) != list(range(c)):
            raise ValidationError("labels must cover [0, C) exactly once")

    @property
    def num_classes(self) -> int:
        return len(self.pyramids)

    def compose_all(self) -> np.ndarray:
        return np.stack([p.compose() for p in self.pyramids])

    # -- persistence -------------------------------------------------------

    def save(self, dirpath: str) -> None:
        from PIL import Image

        os.makedirs(dirpath, exist_ok=True)
        tensors = {}
        shapes = []
        for ci, p in enumerate(self.pyramids):
            for li, lv in enumerate(p.levels):
                tensors[f"c{ci}_l{li}"] = np.asarray(lv, dtype=np.float32)
            shapes.append({
                "levels": len(p.levels),
                "target_resolution": p.target_resolution,
            })
        save_tensors(
            os.path.join(dirpath, "pyramids.tnsr"),
            {"content": "pyramid-levels", "structure": shapes},
            tensors,
        )
        meta = {
            "labels": self.labels.tolist(),
            "provenance": self.provenance,
            "trace_steps": int(self.trace.shape[0]),
        }
        atomic_write_text(os.path.join(dirpath, "meta.json"),
                          json.dumps(meta, indent=2, sort_keys=True))
        if self.trace.size:
            lines = ["step,loss,cosine_similarity"]
            for i, (loss, cos) in enumerate(self.trace):
                lines.append(f"{i},{float(loss)!r},{float(cos)!r}")
            atomic_write_text(os.path.join(dirpath, "trace.csv"),
                              "\n".join(lines) + "\n")
        if self.pyramids[0].channels not in (1, 3):
            return  # feature-space pyramids have no pixel rendering
        imgdir = os.path.join(dirpath, "images")
        os.makedirs(imgdir, exist_ok=True)
        for ci, p in enumerate(self.pyramids):
            img = np.clip(p.compose(), 0.0, 1.0)
            arr = (img.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
            if arr.shape[2] == 1:
                arr = arr[:, :, 0]
            dest = os.path.join(imgdir, f"class_{ci:03d}.png")
            Image.fromarray(arr).save(dest + ".part", format="PNG")
            os.replace(dest + ".part", dest)

    @classmethod
    def load(cls, dirpath: str) -> "SyntheticDataset":
        with open(os.path.join(dirpath, "meta.json")) as f:
            meta = json.load(f)
        header, tensors = load_tensors(os.path.join(dirpath, "pyramids.tnsr"))
        pyramids = []
        for ci, entry in enumerate(header["structure"]):
            levels = [tensors[f"c{ci}_l{li}"] for li in range(entry["levels"])]
            pyramids.append(PyramidImage(levels, entry["target_resolution"]))
        trace_path = os.path.join(dirpath, "trace.csv")
        trace = np.zeros((0, 2))
        if os.path.exists(trace_path):
            rows = np.genfromtxt(trace_path, delimiter=",", skip_header=1)
            if rows.size:
                rows = np.atleast_2d(rows)
                trace = rows[:, 1:3]
        return cls(pyramids=pyramids, labels=np.asarray(meta["labels"]),
                   provenance=meta["provenance"], trace=trace)


# -- shared loop machinery ---------------------------------------------------


def _make_pyramids(config: DistillConfig, encoder: Encoder, num_classes: int):
    spec = encoder.spec
    target = spec.input_resolution
    base = config.base_resolution or default_base_resolution(target)
    rng = np.random.default_rng(np.random.SeedSequence([0x5E, config.seed]))
    return [
        PyramidImage.create(spec.channels, base, target, rng, config.init_std)
        for _ in range(num_classes)
    ]


def _aug_params(config: DistillConfig) -> AugmentParams:
    if config.augment is not None:
        return config.augment
    return AugmentParams(seed=config.seed)


class _Loop:
    """Owns pyramids, the optimizer and the add-level schedule."""

    def __init__(self, config: DistillConfig, encoder: Encoder, num_classes: int):
        self.config = config
        self.encoder = encoder
        self.num_classes = num_classes
        self.pyramids = _make_pyramids(config, encoder, num_classes)
        self.adam = Adam(config.learning_rate, config.adam_betas, config.adam_eps)
        # slots are level-major (all class pyramids' level 0, then level 1,
        # ...) so appended levels extend the slot list in step order
        for li in range(len(self.pyramids[0].levels)):
            for p in self.pyramids:
                self.adam.add_param(p.levels[li])
        self.aug = _aug_params(config)
        self.labels = np.arange(num_classes, dtype=np.int64)
        self.onehot = flows.one_hot(self.labels, num_classes)

    def maybe_add_levels(self, step: int) -> None:
        cfg = self.config
        if step > 0 and cfg.level_interval > 0 and step % cfg.level_interval == 0:
            if self.pyramids[0].top_resolution < self.pyramids[0].target_resolution:
                for p in self.pyramids:
                    p.add_level()
                    self.adam.add_param(p.levels[-1])

    def forward(self, step: int):
        """Compose + augment + encode; returns (features, labels_onehot,
        backward) where backward(dfeatures) applies one Adam step."""
        cfg = self.config
        composed = []
        compose_vjps = []
        for p in self.pyramids:
            img, vjp = p.compose_vjp()
            composed.append(img)
            compose_vjps.append(vjp)
        batch_imgs = np.stack(composed)

        feats_parts = []
        pass_vjps = []
        for a in range(cfg.augmentations_per_batch):
            t = sample_transform(self.aug, batch_imgs.shape[-1], step, a)
            aug_imgs, aug_vjp = apply_transform_vjp(batch_imgs, t)
            f, enc_vjp = encode_batch(self.encoder, aug_imgs, want_vjp=True)
            feats_parts.append(f)
            pass_vjps.append((aug_vjp, enc_vjp))
        features = np.concatenate(feats_parts, axis=0)
        y = np.tile(self.onehot, (cfg.augmentations_per_batch, 1))

        def backward(dfeatures: np.ndarray) -> None:
            c = self.num_classes
            dimgs = np.zeros_like(batch_imgs)
            for a, (aug_vjp, enc_vjp) in enumerate(pass_vjps):
                dpass = np.asarray(dfeatures[a * c:(a + 1) * c],
                                   dtype=batch_imgs.dtype)
                dimgs += aug_vjp(enc_vjp(dpass))
            per_pyr = [vjp(dimgs[ci]) for ci, vjp in enumerate(compose_vjps)]
            # flatten level-major to match the optimizer slot order
            grads = [per_pyr[ci][li]
                     for li in range(len(per_pyr[0]))
                     for ci in range(c)]
            self.adam.step(grads)

        return features, y, backward

    def result(self, method: str, trace: list, extra: dict | None = None,
               started: float = 0.0) -> SyntheticDataset:
        prov = {
            "method": method,
            "config_fingerprint": self.config.fingerprint(),
            "encoder_fingerprint": self.encoder.fingerprint,
            "iterations_run": len(trace),
            "wall_clock_s": time.time() - started if started else 0.0,
        }
        if trace:
            prov["final_loss"] = float(trace[-1][0])
            prov["final_cosine"] = float(trace[-1][1])
        if extra:
            prov.update(extra)
        return SyntheticDataset(
            pyramids=self.pyramids,
            labels=self.labels.copy(),
            provenance=prov,
            trace=np.asarray(trace, dtype=np.float64).reshape(-1, 2),
        )


class _PlateauDetector:
    """Stops when the best loss in the trailing window no longer improves
    on the best loss seen before the window, beyond a relative tolerance."""

    def __init__(self, patience: int | None, tol: float):
        self.patience = patience
        self.tol = tol
        self.window: list = []
        self.best_prefix = np.inf

    def update(self, loss: float) -> bool:
        if self.patience is None:
            return False
        self.window.append(loss)
        if len(self.window) <= self.patience:
            return False
        self.best_prefix = min(self.best_prefix, self.window.pop(0))
        margin = self.tol * max(1.0, abs(self.best_prefix))
        return min(self.window) > self.best_prefix - margin


def _check_finite(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite loss at step {step}")


# -- flow/center matching (sfm, tcdd, ncdd) ----------------------------------

_COEFS = {"sfm": (-1.0, 1.0), "tcdd": (1.0, 0.0), "ncdd": (0.0, 1.0)}


def _run_matching(config: DistillConfig, encoder: Encoder, target: np.ndarray,
                  method: str) -> SyntheticDataset:
    started = time.time()
    tcoef, ncoef = _COEFS[method]
    c = target.shape[0]
    loop = _Loop(config, encoder, c)
    target64 = np.asarray(target, dtype=np.float64)
    row_norms = np.linalg.norm(target64, axis=1)
    if (row_norms == 0).any():
        dead = int(np.argmin(row_norms))
        raise ValidationError(
            f"target flow for class {dead} is a zero vector; its cosine "
            "distance is undefined"
        )
    trace: list = []
    plateau = _PlateauDetector(config.plateau_patience, config.plateau_tol)
    for step in range(config.iterations):
        loop.maybe_add_levels(step)
        features, y, backward = loop.forward(step)
        syn = flows.class_aggregate(features, y, tcoef, ncoef)
        try:
            loss, dsyn = flows.cosine_distance_with_grad(
                target64, syn, config.aggregation
            )
        except ValidationError as e:
            raise ValidationError(f"{e} (step {step})")
        _check_finite(loss, step)
        dfeat = flows.class_aggregate_vjp(y, tcoef, ncoef, dsyn)
        backward(dfeat)
        cos = float(np.mean(flows.per_class_cosine(target64, syn)))
        trace.append((loss, cos))
        if plateau.update(loss):
            break
    return loop.result(method, trace, started=started)


def distill_sfm(config: DistillConfig, encoder: Encoder,
                flow: StatFlow) -> SyntheticDataset:
    """Optimize pyramids so their batch flow matches the statistical flow.

    Takes no real images: the statistical flow is the entire supervision
    signal. Returns the synthetic dataset with its per-step loss trace.
    """
    if config.method != "sfm":
        raise ValidationError("config.method must be 'sfm'")
    if flow.encoder_fingerprint != encoder.fingerprint:
        raise FingerprintMismatch(
            "statistical flow was computed under a different encoder "
            f"({flow.encoder_fingerprint} != {encoder.fingerprint})"
        )
    ds = _run_matching(config, encoder, flow.matrix, "sfm")
    ds.provenance["stats_fingerprint"] = flow.stats_fingerprint
    return ds


def distill_ablation(config: DistillConfig, encoder: Encoder,
                     stats: ClassStatistics) -> SyntheticDataset:
    """Match only the class centers (tcdd) or only the pooled non-target
    centers (ncdd); loop mechanics identical to distill_sfm."""
    if config.method not in ("tcdd", "ncdd"):
        raise ValidationError("config.method must be 'tcdd' or 'ncdd'")
    if stats.encoder_fingerprint != encoder.fingerprint:
        raise FingerprintMismatch("statistics computed under a different encoder")
    if config.method == "tcdd":
        target = stats.centers()
    else:
        target = nontarget_centers(stats)
    ds = _run_matching(config, encoder, target, config.method)
    ds.provenance["stats_fingerprint"] = stats.fingerprint
    return ds


# -- linear gradient matching -------------------------------------------------


class _RealSampler:
    """Per-class reservoirs that reshuffle on exhaustion."""

    def __init__(self, dataset: Dataset, per_class: int, rng: np.random.Generator):
        self.dataset = dataset
        self.per_class = per_class
        self.rng = rng
        self.indices = dataset.class_indices()
        self.pools = [list(rng.permutation(idx)) for idx in self.indices]
        for c, pool in enumerate(self.pools):
            if not pool:
                raise ValidationError(f"class {c} has no real samples")

    def sample(self):
        picks = []
        for c, pool in enumerate(self.pools):
            while len(pool) < self.per_class:
                pool.extend(self.rng.permutation(self.indices[c]))
            picks.extend(pool[:self.per_class])
            del pool[:self.per_class]
        sel = np.asarray(picks)
        return self.dataset.images[sel], self.dataset.labels[sel]


def distill_lgm(config: DistillConfig, encoder: Encoder,
                real_data: Dataset) -> SyntheticDataset:
    """Gradient-matching baseline: per step, match the CE gradient (or
    its analytic expectation) induced by a real batch.

    Gradients flow through the synthetic branch only; the same sampled
    transform is applied to real and synthetic images in each pass.
    """
    if config.method != "lgm":
        raise ValidationError("config.method must be 'lgm'")
    if config.real_batch_per_class < 1:
        raise ValidationError("real_batch_per_class must be >= 1")
    started = time.time()
    c = real_data.num_classes
    f = encoder.spec.feature_dim
    loop = _Loop(config, encoder, c)
    rng_w = np.random.default_rng(np.random.SeedSequence([0x1163, config.seed]))
    rng_real = np.random.default_rng(np.random.SeedSequence([0x4EA1, config.seed]))
    sampler = _RealSampler(real_data, config.real_batch_per_class, rng_real)

    mode = config.lgm_w_mode
    fixed_head = None
    if mode == "fixed":
        fixed_head = flows.LinearHead(
            mode="fixed", init_sigma=0.01,
            weight=rng_w.normal(0.0, 0.01, size=(c, f)),
        )

    trace: list = []
    plateau = _PlateauDetector(config.plateau_patience, config.plateau_tol)
    for step in range(config.iterations):
        loop.maybe_add_levels(step)
        if mode == "random":
            head = flows.LinearHead(
                mode="random", init_sigma=0.01,
                weight=rng_w.normal(0.0, 0.01, size=(c, f)),
            )
        else:
            head = fixed_head

        real_imgs, real_labels = sampler.sample()
        real_y = flows.one_hot(real_labels, c)

        # apply the same per-pass transforms to the real branch (no grads)
        real_feats = []
        for a in range(config.augmentations_per_batch):
            t = sample_transform(loop.aug, real_imgs.shape[-1], step, a)
            real_feats.append(encode_batch(encoder, apply_transform(real_imgs, t)))
        real_features = np.concatenate(real_feats, axis=0)
        real_y_full = np.tile(real_y, (config.augmentations_per_batch, 1))

        syn_features, syn_y, backward = loop.forward(step)

        if mode == "analytic":
            g_real = flows.analytic_flow(real_features, real_y_full)
            g_syn = flows.analytic_flow(syn_features, syn_y)
        else:
            g_real = flows.ce_linear_gradient(real_features, real_y_full, head)
            g_syn = flows.ce_linear_gradient(syn_features, syn_y, head)

        loss, dg = flows.cosine_distance_with_grad(g_real, g_syn, config.aggregation)
        _check_finite(loss, step)
        if mode == "analytic":
            dfeat = flows.class_aggregate_vjp(syn_y, -1.0, 1.0, dg)
        else:
            dfeat = flows.ce_linear_gradient_feature_vjp(syn_features, syn_y, head, dg)
        backward(dfeat)
        cos = float(np.mean(flows.per_class_cosine(g_real, g_syn)))
        trace.append((loss, cos))
        if plateau.update(loss):
            break
    return loop.result("lgm", trace, extra={"w_mode": mode}, started=started)
