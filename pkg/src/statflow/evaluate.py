"""Downstream evaluation of synthetic datasets.

Paths implemented here:

* golden classifier -- linear head trained on the full original dataset
  over frozen distillation-encoder features; immutable once used for
  inheritance.
* vanilla linear probe on the synthetic (or selected-real) images, with
  optional soft-label weighting alpha*KL(student||teacher) + (1-alpha)*CE.
* classifier inheritance (CI) -- train a single linear projector to align
  evaluation-encoder features to distillation-encoder features on the
  synthetic images only (no labels), then predict through the golden
  classifier.
* joint/sequential projector+classifier training (JT/ST), with or
  without inheriting the golden classifier's initial parameters (IP).
* real-image selection baselines: random, centroids, neighbors.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import flows
from .data import Dataset
from .distill import SyntheticDataset
from .encoders import Encoder, encode_batch
from .errors import ShapeError, ValidationError
from .optim import Adam
from .synthesis import AugmentParams, apply_transform, sample_transform
from .tensorio import load_tensors, save_tensors

# fixed default magnitudes for probe-time augmentation (shared with the
# synthesis module's op set)
PROBE_AUGMENT = dict(brightness=0.25, saturation=0.5, contrast=0.25,
                     translate=0.125, cutout=0.25, flip=True)


@dataclass
class EvalConfig:
    strategy: str = "vanilla"  # vanilla | ci | jt | st
    inherit_initial_parameters: bool = False
    soft_label_alpha: float = 0.0
    iterations: int = 1000
    probe_lr: float = 0.001
    projector_lr: float = 0.01
    seed: int = 0
    golden_lr: float = 0.01
    train_augment: bool = True

    def __post_init__(self):
        if self.strategy not in ("vanilla", "ci", "jt", "st"):
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.soft_label_alpha <= 1.0:
            raise ValidationError("soft_label_alpha must lie in [0, 1]")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.strategy == "ci" and self.soft_label_alpha > 0.0:
            raise ValidationError("soft labels apply to vanilla/jt/st only")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Classifier:
    weight: np.ndarray  # (C, F)
    bias: np.ndarray    # (C,)
    provenance: str     # "golden" | "probe"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.provenance not in ("golden", "probe"):
            raise ValidationError(f"unknown provenance {self.provenance!r}")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, features: np.ndarray) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"features dim {f.shape[1]} != classifier dim {self.weight.shape[1]}"
            )
        return f @ self.weight.T + self.bias

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.weight.tobytes())
        h.update(self.bias.tobytes())
        return h.hexdigest()[:16]

    def copy(self, provenance: str | None = None) -> "Classifier":
        return Classifier(self.weight.copy(), self.bias.copy(),
                          provenance or self.provenance)

    def num_parameters(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class Projector:
    """The single linear layer of classifier inheritance: F_e -> F_d."""

    weight: np.ndarray  # (F_d, F_e)
    bias: np.ndarray    # (F_d,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)

    @classmethod
    def identity(cls, dim: int) -> "Projector":
        return cls(np.eye(dim), np.zeros(dim))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weight.T + self.bias

    def num_parameters(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class EvalReport:
    accuracy: float
    strategy: str
    settings: dict
    config_fingerprint: str
    loss_curve: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    param_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError("accuracy must lie in [0, 1]")

    def fingerprint(self) -> str:
        blob = json.dumps(
            {
                "accuracy": round(self.accuracy, 12),
                "strategy": self.strategy,
                "settings": self.settings,
                "config": self.config_fingerprint,
                "params": self.param_count,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_record(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "strategy": self.strategy,
            "settings": self.settings,
            "config_fingerprint": self.config_fingerprint,
            "param_count": self.param_count,
            "wall_clock_s": self.wall_clock_s,
            "fingerprint": self.fingerprint(),
            "final_loss": self.loss_curve[-1] if self.loss_curve else None,
            "loss_curve": [float(v) for v in self.loss_curve],
        }


# -- feature caching --------------------------------------------------------


class FeatureCache:
    """Read-mostly cache of encoded features keyed by (encoder, images)."""

    def __init__(self):
        self._store: dict = {}

    @staticmethod
    def _key(encoder: Encoder, images: np.ndarray) -> tuple:
        h = hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest()[:16]
        return encoder.fingerprint, h

    def features(self, encoder: Encoder, images: np.ndarray,
                 batch_size: int = 256) -> np.ndarray:
        key = self._key(encoder, images)
        if key not in self._store:
            self._store[key] = encode_dataset(encoder, images, batch_size)
        return self._store[key]

    def save(self, path: str) -> None:
        header = {"content": "feature-cache",
                  "keys": [list(k) for k in self._store]}
        tensors = {f"feat{i}": v for i, (k, v) in enumerate(self._store.items())}
        save_tensors(path, header, tensors)

    @classmethod
    def load(cls, path: str) -> "FeatureCache":
        header, tensors = load_tensors(path)
        cache = cls()
        for i, key in enumerate(header.get("keys", [])):
            cache._store[tuple(key)] = tensors[f"feat{i}"]
        return cache


_CACHE = FeatureCache()


def encode_dataset(encoder: Encoder, images: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    parts = []
    for i in range(0, len(images), batch_size):
        parts.append(encode_batch(encoder, images[i:i + batch_size]))
    return np.concatenate(parts, axis=0).astype(np.float64)


def _train_arrays(train_set) -> tuple:
    """Accept a SyntheticDataset or a plain Dataset."""
    if isinstance(train_set, SyntheticDataset):
        return train_set.compose_all(), train_set.labels, train_set.num_classes
    if isinstance(train_set, Dataset):
        return train_set.images, train_set.labels, train_set.num_classes
    raise ValidationError(f"cannot train on {type(train_set).__name__}")


def _iter_transform(config: EvalConfig, resolution: int, iteration: int):
    params = AugmentParams(seed=config.seed, **PROBE_AUGMENT)
    return sample_transform(params, resolution, step=iteration)


# -- classifier training ------------------------------------------------------


def _ce_grad(logits, onehot, alpha=0.0, teacher_logits=None):
    """Mean loss and d(loss)/d(logits) for the weighted CE/KL objective."""
    p = flows.softmax_probs(logits)
    b = logits.shape[0]
    logp = np.log(np.maximum(p, 1e-300))
    ce = -float((onehot * logp).sum() / b)
    dz = (p - onehot) / b
    if alpha == 0.0:
        return ce, dz
    q = flows.softmax_probs(teacher_logits)
    logq = np.log(np.maximum(q, 1e-300))
    u = logp - logq
    kl = float((p * u).sum() / b)
    dz_kl = (p * (u - (p * u).sum(axis=1, keepdims=True))) / b
    loss = alpha * kl + (1.0 - alpha) * ce
    return loss, alpha * dz_kl + (1.0 - alpha) * dz


def _init_classifier(rng: np.random.Generator, c: int, f: int,
                     provenance: str) -> Classifier:
    return Classifier(rng.normal(0.0, 0.01, size=(c, f)), np.zeros(c), provenance)


def train_golden_classifier(encoder_d: Encoder, original: Dataset,
                            config: EvalConfig) -> Classifier:
    """Full-batch CE training of a linear head on frozen features of the
    whole original dataset."""
    if len(original) == 0:
        raise ValidationError("original dataset is empty")
    feats = _CACHE.features(encoder_d, original.images)
    y = flows.one_hot(original.labels, original.num_classes)
    rng = np.random.default_rng(np.random.SeedSequence([0x601D, config.seed]))
    clf = _init_classifier(rng, original.num_classes,
                           encoder_d.spec.feature_dim, "golden")
    opt = Adam(config.golden_lr)
    opt.add_param(clf.weight)
    opt.add_param(clf.bias)
    for _ in range(config.iterations):
        _, dz = _ce_grad(clf.logits(feats), y)
        opt.step([dz.T @ feats, dz.sum(axis=0)])
    return clf


def classifier_accuracy(clf: Classifier, features: np.ndarray,
                        labels: np.ndarray) -> float:
    pred = clf.logits(features).argmax(axis=1)
    return float((pred == labels).mean())


def train_linear_probe(train_set, encoder_e: Encoder, config: EvalConfig,
                       validation: Dataset, teacher=None):
    """Train a probe on the (few) training images, report validation top-1.

    teacher is the (distillation encoder, golden classifier) pair and is
    required when soft_label_alpha > 0.
    """
    alpha = config.soft_label_alpha
    if alpha > 0.0 and teacher is None:
        raise ValidationError("soft_label_alpha > 0 requires a teacher")
    started = time.time()
    images, labels, c = _train_arrays(train_set)
    y = flows.one_hot(labels, c)
    rng = np.random.default_rng(np.random.SeedSequence([0x9B0E, config.seed]))
    clf = _init_classifier(rng, c, encoder_e.spec.feature_dim, "probe")
    opt = Adam(config.probe_lr)
    opt.add_param(clf.weight)
    opt.add_param(clf.bias)

    clean_feats = None if config.train_augment else encode_dataset(encoder_e, images)
    teacher_clean = None
    if teacher is not None and not config.train_augment:
        teacher_clean = teacher[1].logits(encode_dataset(teacher[0], images))

    curve = []
    for it in range(config.iterations):
        if config.train_augment:
            t = _iter_transform(config, images.shape[-1], it)
            batch = apply_transform(images, t)
            feats = encode_dataset(encoder_e, batch)
            tlog = teacher[1].logits(encode_dataset(teacher[0], batch)) \
                if alpha > 0.0 else None
        else:
            feats = clean_feats
            tlog = teacher_clean
        loss, dz = _ce_grad(clf.logits(feats), y, alpha, tlog)
        curve.append(loss)
        opt.step([dz.T @ feats, dz.sum(axis=0)])

    val_feats = _CACHE.features(encoder_e, validation.images)
    acc = classifier_accuracy(clf, val_feats, validation.labels)
    report = EvalReport(
        accuracy=acc,
        strategy="vanilla",
        settings={
            "alpha": alpha,
            "train_augment": config.train_augment,
            "eval_encoder": encoder_e.fingerprint,
            "train_size": int(len(labels)),
        },
        config_fingerprint=config.fingerprint(),
        loss_curve=curve,
        wall_clock_s=time.time() - started,
        param_count=clf.num_parameters(),
    )
    return clf, report


# -- classifier inheritance ----------------------------------------------------


def _default_projector(f_e: int, f_d: int) -> Projector:
    # identity warm start when the dims match, zeros otherwise
    if f_e == f_d:
        return Projector.identity(f_d)
    return Projector(np.zeros((f_d, f_e)), np.zeros(f_d))


def projector_alignment_loss(projector: Projector, synthetic, encoder_e: Encoder,
                             encoder_d: Encoder) -> float:
    """Mean squared feature-alignment error on the synthetic images."""
    images, _, _ = _train_arrays(synthetic)
    fe = encode_dataset(encoder_e, images)
    fd = encode_dataset(encoder_d, images)
    err = projector.apply(fe) - fd
    return float((err ** 2).sum(axis=1).mean())


def train_projector_ci(synthetic, encoder_e: Encoder, encoder_d: Encoder,
                       config: EvalConfig) -> Projector:
    """Minimize ||phi_d(x) - P(phi_e(x))||^2 over the synthetic images.

    Labels never enter the loss; permuting them cannot change the result.
    """
    images, _, _ = _train_arrays(synthetic)
    proj = _default_projector(encoder_e.spec.feature_dim,
                              encoder_d.spec.feature_dim)
    opt = Adam(config.projector_lr)
    opt.add_param(proj.weight)
    opt.add_param(proj.bias)
    clean_fe = clean_fd = None
    if not config.train_augment:
        clean_fe = encode_dataset(encoder_e, images)
        clean_fd = encode_dataset(encoder_d, images)
    for it in range(config.iterations):
        if config.train_augment:
            t = _iter_transform(config, images.shape[-1], it)
            batch = apply_transform(images, t)
            fe = encode_dataset(encoder_e, batch)
            fd = encode_dataset(encoder_d, batch)
        else:
            fe, fd = clean_fe, clean_fd
        err = proj.apply(fe) - fd  # (B, F_d)
        b = err.shape[0]
        opt.step([2.0 / b * err.T @ fe, 2.0 / b * err.sum(axis=0)])
    return proj


def infer_inherited(images: np.ndarray, encoder_e: Encoder, projector: Projector,
                    golden: Classifier) -> np.ndarray:
    """Predict classes through the frozen golden classifier: argmax of
    golden(P(phi_e(x)))."""
    if golden.provenance != "golden":
        raise ValidationError(
            "inheritance requires a golden classifier, got provenance "
            f"{golden.provenance!r}"
        )
    feats = encode_dataset(encoder_e, images)
    return golden.logits(projector.apply(feats)).argmax(axis=1)


def evaluate_ci(synthetic, encoder_e: Encoder, encoder_d: Encoder,
                golden: Classifier, config: EvalConfig,
                validation: Dataset) -> EvalReport:
    """Train the projector and report inherited-classifier accuracy."""
    started = time.time()
    before = golden.checksum()
    proj = train_projector_ci(synthetic, encoder_e, encoder_d, config)
    pred = infer_inherited(validation.images, encoder_e, proj, golden)
    acc = float((pred == validation.labels).mean())
    assert golden.checksum() == before, "golden classifier was mutated"
    final = projector_alignment_loss(proj, synthetic, encoder_e, encoder_d)
    return EvalReport(
        accuracy=acc,
        strategy="ci",
        settings={
            "eval_encoder": encoder_e.fingerprint,
            "distill_encoder": encoder_d.fingerprint,
        },
        config_fingerprint=config.fingerprint(),
        loss_curve=[final],
        wall_clock_s=time.time() - started,
        param_count=proj.num_parameters(),
    )


def evaluate_strategy(synthetic, encoder_e: Encoder, encoder_d: Encoder,
                      golden: Classifier, config: EvalConfig,
                      validation: Dataset, classifier_iterations: int | None = None,
                      projector: Projector | None = None) -> EvalReport:
    """Joint (jt) or sequential (st) projector+classifier training.

    jt optimizes CE on the synthetic labels plus the alignment loss in
    one loop; st trains the projector first (alignment only), freezes
    it, then trains the classifier on projected features. With
    inherit_initial_parameters the classifier starts from the golden
    weights instead of a fresh draw. A pretrained projector can be
    passed in to share the st alignment phase across runs.
    """
    if config.strategy not in ("jt", "st"):
        raise ValidationError("evaluate_strategy handles jt/st only")
    if golden.provenance != "golden":
        raise ValidationError("strategies need the golden classifier")
    started = time.time()
    images, labels, c = _train_arrays(synthetic)
    y = flows.one_hot(labels, c)
    f_e = encoder_e.spec.feature_dim
    f_d = encoder_d.spec.feature_dim
    rng = np.random.default_rng(np.random.SeedSequence([0x57A7, config.seed]))
    if config.inherit_initial_parameters:
        clf = golden.copy(provenance="probe")
    else:
        clf = _init_classifier(rng, c, f_d, "probe")
    clf_iters = config.iterations if classifier_iterations is None \
        else classifier_iterations
    curve: list = []

    if config.strategy == "st":
        if projector is None:
            projector = train_projector_ci(synthetic, encoder_e, encoder_d, config)
        frozen_w = projector.weight.copy()
        opt = Adam(config.probe_lr)
        opt.add_param(clf.weight)
        opt.add_param(clf.bias)
        for it in range(clf_iters):
            if config.train_augment:
                t = _iter_transform(config, images.shape[-1], it)
                feats = encode_dataset(encoder_e, apply_transform(images, t))
            else:
                feats = encode_dataset(encoder_e, images)
            proj_feats = projector.apply(feats)
            loss, dz = _ce_grad(clf.logits(proj_feats), y)
            curve.append(loss)
            opt.step([dz.T @ proj_feats, dz.sum(axis=0)])
        if not np.array_equal(frozen_w, projector.weight):
            raise RuntimeError("projector changed during ST classifier phase")
    else:  # jt
        projector = projector or _default_projector(f_e, f_d)
        opt_p = Adam(config.projector_lr)
        opt_p.add_param(projector.weight)
        opt_p.add_param(projector.bias)
        opt_c = Adam(config.probe_lr)
        opt_c.add_param(clf.weight)
        opt_c.add_param(clf.bias)
        for it in range(clf_iters):
            if config.train_augment:
                t = _iter_transform(config, images.shape[-1], it)
                batch = apply_transform(images, t)
            else:
                batch = images
            fe = encode_dataset(encoder_e, batch)
            fd = encode_dataset(encoder_d, batch)
            pf = projector.apply(fe)
            b = fe.shape[0]
            ce, dz = _ce_grad(clf.logits(pf), y)
            err = pf - fd
            align = float((err ** 2).sum(axis=1).mean())
            curve.append(ce + align)
            dpf = dz @ clf.weight + 2.0 / b * err
            opt_c.step([dz.T @ pf, dz.sum(axis=0)])
            opt_p.step([dpf.T @ fe, dpf.sum(axis=0)])

    val_feats = _CACHE.features(encoder_e, validation.images)
    pred = clf.logits(projector.apply(val_feats)).argmax(axis=1)
    acc = float((pred == validation.labels).mean())
    return EvalReport(
        accuracy=acc,
        strategy=config.strategy,
        settings={
            "inherit_initial_parameters": config.inherit_initial_parameters,
            "eval_encoder": encoder_e.fingerprint,
            "distill_encoder": encoder_d.fingerprint,
            "classifier_iterations": clf_iters,
        },
        config_fingerprint=config.fingerprint(),
        loss_curve=curve,
        wall_clock_s=time.time() - started,
        param_count=clf.num_parameters() + projector.num_parameters(),
    )


# -- real-image selection baselines --------------------------------------------


def select_baseline(method: str, original: Dataset, encoder_d: Encoder,
                    synthetic: SyntheticDataset | None = None,
                    seed: int = 0) -> Dataset:
    """Pick one real image per class: uniformly (random), nearest to the
    class feature mean (centroids), or nearest to the class's synthetic
    image in feature space (neighbors). Distances are squared Euclidean."""
    if method not in ("random", "centroids", "neighbors"):
        raise ValidationError(f"unknown baseline {method!r}")
    if method == "neighbors" and synthetic is None:
        raise ValidationError("neighbors baseline needs a synthetic dataset")
    indices = original.class_indices()
    for ci, idx in enumerate(indices):
        if len(idx) == 0:
            raise ValidationError(f"class {ci} has no samples")
    picks = []
    if method == "random":
        rng = np.random.default_rng(np.random.SeedSequence([0xBA5E, seed]))
        picks = [int(rng.choice(idx)) for idx in indices]
    else:
        feats = _CACHE.features(encoder_d, original.images)
        if method == "centroids":
            for idx in indices:
                fc = feats[idx]
                mu = fc.mean(axis=0)
                picks.append(int(idx[np.argmin(((fc - mu) ** 2).sum(axis=1))]))
        else:
            syn_feats = encode_dataset(encoder_d, synthetic.compose_all())
            for ci, idx in enumerate(indices):
                fc = feats[idx]
                d = ((fc - syn_feats[ci]) ** 2).sum(axis=1)
                picks.append(int(idx[np.argmin(d)]))
    sel = np.asarray(picks)
    return Dataset(original.images[sel], original.labels[sel],
                   original.num_classes)
