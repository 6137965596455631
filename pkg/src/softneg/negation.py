"""Hard negatives built by negating one finding of a report.

A negated variant flips exactly one present fact to an absent one (severity
and location dropped, phrased through the negation lexicon) and keeps every
other sentence untouched.  Variants are appended to a training batch as extra
text candidates only; the image side of the batch is never extended.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .reports import ABSENT, Fact, PRESENT, Report, ReportPair, Sentence, make_sentence


def negate_report(report: Report, seed: int, *, n_flips: int = 1) -> Report | None:
    """Flip ``n_flips`` seeded-uniformly chosen present facts to absent.

    Returns None when the report states nothing to negate (no present facts).
    The output never equals the input text: each flipped sentence is replaced
    by its negated phrasing.
    """
    present_at = [i for i, s in enumerate(report.sentences) if s.fact.polarity == PRESENT]
    if not present_at:
        return None
    rng = np.random.default_rng(seed)
    k = min(n_flips, len(present_at))
    chosen = rng.choice(len(present_at), size=k, replace=False)
    flip = {present_at[int(i)] for i in chosen}
    sentences: list[Sentence] = []
    for i, s in enumerate(report.sentences):
        if i in flip:
            fact = Fact(s.fact.entity, ABSENT, negation_phrase="no")
            sentences.append(make_sentence(fact, "abs_no"))
        else:
            sentences.append(s)
    return Report(sentences)


@dataclass
class HardNegatives:
    """Negated text candidates for one batch and the rows they came from."""

    extras: list[Report]
    sources: list[int]

    @property
    def h(self) -> int:
        return len(self.extras)


def attach_hard_negatives(batch: list[ReportPair], rate: float, seed: int,
                          *, n_flips: int = 1) -> HardNegatives:
    """Independently select rows at ``rate`` and negate their reports."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    extras: list[Report] = []
    sources: list[int] = []
    for i, (report, _) in enumerate(batch):
        if rng.random() < rate:
            variant = negate_report(report, int(rng.integers(2**63)), n_flips=n_flips)
            if variant is not None:
                extras.append(variant)
                sources.append(i)
    return HardNegatives(extras, sources)
