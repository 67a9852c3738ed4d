#!/usr/bin/env python3
"""Briefly pretrain the toy conv encoder on the bundled toy dataset.

Trains encoder weights jointly with a throwaway linear head for a few
epochs of supervised cross-entropy, then saves the encoder weights (the
head is discarded) in the weight-file format that `statflow --encoder
<path>` accepts. Everything is seeded; no downloads.

Usage:
    python scripts/pretrain_toy_encoder.py --out toy-pretrained.tnsr \
        --epochs 3 --seed 7
"""

from __future__ import annotations

import argparse
import sys
import time

from statflow.encoders import save_encoder
from statflow.pretrain import pretrain_toy_encoder


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="weight file to write")
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=3e-3)
    args = ap.parse_args(argv)
    t0 = time.time()
    enc = pretrain_toy_encoder(seed=args.seed, epochs=args.epochs, lr=args.lr,
                               data_seed=args.data_seed, verbose=True)
    save_encoder(enc, args.out)
    print(f"saved pretrained encoder ({enc.fingerprint}) to {args.out} "
          f"in {time.time() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
