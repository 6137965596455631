"""Soft-label contrastive training on synthetic clinical report/image pairs,
with negation-derived hard negatives and a negation alignment benchmark."""

__version__ = "0.1.0"
