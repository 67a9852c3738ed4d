"""Brief supervised pretraining of the toy conv encoder.

Not part of the distillation pipeline (which never touches encoder
weights); this exists so the bundled toy encoder can be used either
random-frozen or lightly pretrained, without downloads. The CLI wrapper
lives in scripts/pretrain_toy_encoder.py.
"""

from __future__ import annotations

import numpy as np

from .data import make_toy_dataset
from .encoders import Encoder, load_encoder
from .flows import one_hot, softmax_probs
from .optim import Adam


def pretrain_toy_encoder(seed: int = 7, epochs: int = 3, batch_size: int = 64,
                         lr: float = 3e-3, num_classes: int = 10,
                         per_class: int = 200, data_seed: int = 0,
                         verbose: bool = False) -> Encoder:
    """Train encoder + throwaway head with cross-entropy; returns a fresh
    frozen encoder holding the trained weights."""
    enc = load_encoder("toy-conv-32", seed=seed)
    train = make_toy_dataset(num_classes, per_class, 32, seed=data_seed,
                             split="train")

    rng = np.random.default_rng(np.random.SeedSequence([0x93E7, seed]))
    f = enc.spec.feature_dim
    head_w = rng.normal(0.0, 0.01, size=(num_classes, f))
    head_b = np.zeros(num_classes)

    mutable = {k: v.copy() for k, v in enc.params.items()}
    opt = Adam(lr)
    for k in sorted(mutable):
        opt.add_param(mutable[k])
    opt.add_param(head_w)
    opt.add_param(head_b)

    for epoch in range(epochs):
        order = rng.permutation(len(train))
        total, correct, losses = 0, 0, []
        for i in range(0, len(order), batch_size):
            sel = order[i:i + batch_size]
            imgs, labels = train.images[sel], train.labels[sel]
            y = one_hot(labels, num_classes)
            # rebuild so the frozen-parameter contract of Encoder holds;
            # the working copies in `mutable` carry the training state
            work = Encoder(enc.spec, {k: v.copy() for k, v in mutable.items()})
            feats, vjp = work.forward_param_vjp(imgs)
            logits = feats @ head_w.T + head_b
            p = softmax_probs(logits)
            losses.append(-float(np.log(np.maximum(
                p[np.arange(len(sel)), labels], 1e-300)).mean()))
            correct += int((logits.argmax(axis=1) == labels).sum())
            total += len(sel)
            dz = (p - y) / len(sel)
            _, gparams = vjp((dz @ head_w).astype(np.float32))
            grads = [gparams[k].astype(np.float64) for k in sorted(mutable)]
            grads += [dz.T @ feats, dz.sum(axis=0)]
            opt.step(grads)
        if verbose:
            print(f"epoch {epoch}: loss {np.mean(losses):.3f} "
                  f"train acc {correct / total:.3f}")

    return Encoder(enc.spec, {k: v.astype(np.float32) for k, v in mutable.items()})
