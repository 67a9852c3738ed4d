"""Monte-Carlo checks of the closed-form claims behind flow matching.

Four checks, all seeded and reported as (statistic, standard error,
threshold) triples:

* exchangeability -- with W rows drawn i.i.d. zero-mean Gaussian, every
  class probability has expectation 1/C for any fixed feature vector.
* lognormal moments -- exp of a Gaussian has mean exp(mu + s^2/2) and
  variance exp(2mu + s^2)(exp(s^2) - 1).
* softmax variance collapse -- for large C the variance of one softmax
  output approaches (exp(s^2) - 1)/C^2 with s^2 the logit variance.
* gradient degeneration -- the CE gradient averaged over W draws lines
  up, per class, with the analytic flow direction.

The logit spread admits two conventions, so both are reported: the
variance reading s^2 = sigma_w^2 * ||phi||^2 (used by the checks) and
the alternative that sets the standard deviation itself to
sigma_w^2 * ||phi||^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flows
from .errors import ValidationError

_TRIAL_CHUNK = 256


@dataclass
class McConfig:
    num_classes: int = 100
    feature_dim: int = 768
    sigma_w: float = 0.01
    trials: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        if self.sigma_w < 0:
            raise ValidationError("sigma_w must be >= 0")


@dataclass
class CheckResult:
    name: str
    statistic: float
    stderr: float
    threshold: float
    passed: bool
    details: dict = field(default_factory=dict)


def unit_norm_feature(cfg: McConfig) -> np.ndarray:
    """A layernormed-scale feature: norm sqrt(F), mean 0, var 1."""
    rng = np.random.default_rng(np.random.SeedSequence([0xFEA7, cfg.seed]))
    v = rng.normal(0.0, 1.0, size=cfg.feature_dim)
    v = v - v.mean()
    return v / v.std()


def _prob_moments(cfg: McConfig, feature: np.ndarray, sample_logits: bool = False):
    """Per-class mean/variance of softmax probabilities over W draws.

    With sample_logits=True the logits are drawn from their exact induced
    law z ~ N(0, sigma_w^2 ||phi||^2 I_C) instead of materializing W;
    this is the same distribution (each z_c is an independent Gaussian
    sum over W_c entries) and keeps large trial counts affordable.
    """
    phi = np.asarray(feature, dtype=np.float64)
    c = cfg.num_classes
    scale = cfg.sigma_w * float(np.linalg.norm(phi))
    rng = np.random.default_rng(np.random.SeedSequence([0x77C, cfg.seed]))
    s1 = np.zeros(c)
    s2 = np.zeros(c)
    done = 0
    while done < cfg.trials:
        n = min(_TRIAL_CHUNK, cfg.trials - done)
        if cfg.sigma_w == 0.0:
            z = np.zeros((n, c))
        elif sample_logits:
            z = rng.normal(0.0, scale, size=(n, c))
        else:
            w = rng.normal(0.0, cfg.sigma_w, size=(n, c, len(phi)))
            z = w @ phi
        p = flows.softmax_probs(z)
        s1 += p.sum(axis=0)
        s2 += (p * p).sum(axis=0)
        done += n
    mean = s1 / cfg.trials
    var = np.maximum(s2 / cfg.trials - mean**2, 0.0)
    return mean, var


def check_exchangeability(cfg: McConfig, feature: np.ndarray,
                          threshold_se: float = 3.0) -> CheckResult:
    """Max deviation of the empirical E[p_c] from 1/C, in standard errors."""
    mean, var = _prob_moments(cfg, feature)
    c = cfg.num_classes
    se = np.sqrt(var / cfg.trials)
    dev = np.abs(mean - 1.0 / c)
    worst = int(np.argmax(dev))
    if cfg.sigma_w == 0.0:
        # every trial yields exactly 1/C; only mean-accumulation rounding remains
        passed = bool(dev.max() <= 1e-12)
    else:
        passed = bool((dev <= threshold_se * se).all())
    return CheckResult(
        name="exchangeability",
        statistic=float(dev.max()),
        stderr=float(se[worst]),
        threshold=threshold_se,
        passed=passed,
        details={
            "per_class_deviation": dev,
            "per_class_stderr": se,
            "max_se_ratio": float((dev / np.maximum(se, 1e-300)).max())
            if cfg.sigma_w > 0 else 0.0,
        },
    )


def lognormal_closed_form(mu: float, sigma: float) -> tuple:
    mean = np.exp(mu + sigma**2 / 2.0)
    var = np.exp(2.0 * mu + sigma**2) * (np.exp(sigma**2) - 1.0)
    return float(mean), float(var)


def check_lognormal(mu: float, sigma: float, trials: int, seed: int = 0,
                    rel_threshold: float = 0.02) -> CheckResult:
    """Empirical mean/variance of exp(N(mu, sigma^2)) vs closed form."""
    if trials < 1000:
        raise ValidationError("lognormal check needs >= 1000 trials")
    rng = np.random.default_rng(np.random.SeedSequence([0x106, seed]))
    x = np.exp(rng.normal(mu, sigma, size=trials))
    emp_mean = float(x.mean())
    emp_var = float(x.var())
    cf_mean, cf_var = lognormal_closed_form(mu, sigma)
    if sigma == 0.0:
        rel_mean = abs(emp_mean - cf_mean)
        rel_var = abs(emp_var - cf_var)
    else:
        rel_mean = abs(emp_mean - cf_mean) / cf_mean
        rel_var = abs(emp_var - cf_var) / cf_var
    return CheckResult(
        name="lognormal",
        statistic=float(max(rel_mean, rel_var)),
        stderr=float(x.std() / np.sqrt(trials)),
        threshold=rel_threshold,
        passed=bool(max(rel_mean, rel_var) <= rel_threshold),
        details={
            "empirical_mean": emp_mean,
            "empirical_var": emp_var,
            "closed_form_mean": cf_mean,
            "closed_form_var": cf_var,
            "rel_err_mean": float(rel_mean),
            "rel_err_var": float(rel_var),
        },
    )


def check_softmax_variance(cfg: McConfig, feature: np.ndarray,
                           rel_threshold: float = 0.20) -> CheckResult:
    """Empirical Var[p_c] against the large-C prediction (exp(s^2)-1)/C^2."""
    if cfg.num_classes < 50:
        raise ValidationError("the large-C approximation needs C >= 50")
    phi = np.asarray(feature, dtype=np.float64)
    norm_sq = float(phi @ phi)
    sigma_sq = cfg.sigma_w**2 * norm_sq          # variance reading (used)
    sigma_literal = cfg.sigma_w**2 * norm_sq     # prose reading: sd itself
    predicted = (np.exp(sigma_sq) - 1.0) / cfg.num_classes**2
    predicted_literal = (np.exp(sigma_literal**2) - 1.0) / cfg.num_classes**2
    mean, var = _prob_moments(cfg, feature, sample_logits=True)
    emp = float(var.mean())  # classes are exchangeable; average tightens it
    if cfg.sigma_w == 0.0:
        rel = abs(emp - predicted)
        passed = emp == 0.0 and predicted == 0.0
    else:
        rel = abs(emp - predicted) / predicted
        passed = bool(rel <= rel_threshold)
    return CheckResult(
        name="softmax_variance",
        statistic=float(rel),
        stderr=float(var.std() / np.sqrt(cfg.num_classes)),
        threshold=rel_threshold,
        passed=passed,
        details={
            "empirical_var": emp,
            "predicted_var": float(predicted),
            "predicted_var_literal_sigma": float(predicted_literal),
            "logit_variance": float(sigma_sq),
        },
    )


def check_gradient_degeneration(cfg: McConfig, features: np.ndarray,
                                labels: np.ndarray,
                                cos_threshold: float = 0.999) -> CheckResult:
    """Cosine, per class, between the W-averaged CE gradient and the
    analytic flow direction; both use the same feature batch."""
    phi = np.asarray(features, dtype=np.float64)
    b, f = phi.shape
    c = int(np.max(labels)) + 1
    y = flows.one_hot(labels, c)
    counts = y.sum(axis=0)
    if not np.allclose(counts, counts[0]):
        raise ValidationError("gradient degeneration check needs balanced labels")
    rng = np.random.default_rng(np.random.SeedSequence([0xDE6, cfg.seed]))
    acc = np.zeros((c, f))
    for _ in range(cfg.trials):
        if cfg.sigma_w == 0.0:
            w = np.zeros((c, f))
        else:
            w = rng.normal(0.0, cfg.sigma_w, size=(c, f))
        head = flows.LinearHead(mode="fixed", init_sigma=cfg.sigma_w, weight=w)
        acc += flows.ce_linear_gradient(phi, y, head)
    mean_grad = acc / cfg.trials
    flow = flows.analytic_flow(phi, y)
    # for balanced labels the expected gradient is (C-1)/C^2 times the flow
    cos = flows.per_class_cosine(mean_grad, flow)
    return CheckResult(
        name="gradient_degeneration",
        statistic=float(cos.mean()),
        stderr=float(cos.std() / np.sqrt(c)),
        threshold=cos_threshold,
        passed=bool(cos.mean() >= cos_threshold),
        details={"per_class_cosine": cos, "trials": cfg.trials},
    )
