"""statflow: dataset distillation by statistical flow matching.

Synthesizes one image per class by aligning the flow of a small
synthetic batch (per-class direction from target to non-target feature
centers) with the constant flow computed once from the original
dataset's class statistics, all through a frozen encoder. Evaluation
covers linear probes, soft labels, and classifier inheritance, where
only a single linear projector is trained and the classifier fitted on
the original dataset is reused for inference.
"""

__version__ = "0.1.0"
