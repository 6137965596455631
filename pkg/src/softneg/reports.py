"""Synthetic clinical reports: a closed sentence grammar, a corpus generator,
and exact parse/render round-tripping.

Every sentence states exactly one fact about one entity: either a finding is
present (optionally with a severity adjective and a laterality/zone location)
or it is absent, phrased through a small negation lexicon.  The grammar is
closed so that parsing is table-driven and loss-free: for any report built
from the grammar, ``render_report(parse_report(render_report(r)))`` equals
``render_report(r)`` byte for byte.

Each generated report is paired with a synthetic image feature vector, a noisy
linear function of the report's presence pattern with severity scaling and
location offsets, so image/text alignment is learnable but not trivial.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

ENTITIES: tuple[str, ...] = (
    "Cardiomegaly",
    "Lung Opacity",
    "Atelectasis",
    "Lung Lesion",
    "Pleural Effusion",
    "Fracture",
    "Support Devices",
    "Enlarged Cardiomediastinum",
    "Pleural Other",
    "Consolidation",
    "Edema",
    "Pneumothorax",
    "Pneumonia",
    "No Findings",
)

NO_FINDINGS = 13
N_ENTITIES = len(ENTITIES)
# Entities that can appear in authored sentences; "No Findings" is derived.
AUTHORABLE = tuple(range(NO_FINDINGS))

SEVERITIES: tuple[str, ...] = ("mild", "moderate", "severe")
LOCATIONS: tuple[str, ...] = ("left", "right", "bilateral", "upper", "lower")

PRESENT = "present"
ABSENT = "absent"

NEGATION_PHRASES: tuple[str, ...] = (
    "no",
    "not",
    "without",
    "resolved",
    "removed",
    "rule out",
    "free of",
    "absence of",
)


class ParseError(ValueError):
    """A sentence does not belong to the report grammar."""


def entity_index(name: str) -> int:
    try:
        return ENTITIES.index(name)
    except ValueError:
        raise ValueError(f"unknown entity name: {name!r}") from None


@dataclass(frozen=True)
class Fact:
    """One statement about one entity."""

    entity: int
    polarity: str
    severity: str | None = None
    location: str | None = None
    negation_phrase: str | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.entity < NO_FINDINGS:
            raise ValueError(f"entity index out of range: {self.entity}")
        if self.polarity not in (PRESENT, ABSENT):
            raise ValueError(f"bad polarity: {self.polarity!r}")
        if self.severity is not None and self.severity not in SEVERITIES:
            raise ValueError(f"bad severity: {self.severity!r}")
        if self.location is not None and self.location not in LOCATIONS:
            raise ValueError(f"bad location: {self.location!r}")
        if self.polarity == ABSENT and (self.severity or self.location):
            raise ValueError("absent facts carry no severity or location")
        if self.polarity == PRESENT and self.negation_phrase is not None:
            raise ValueError("present facts carry no negation phrase")
        if self.negation_phrase is not None and self.negation_phrase not in NEGATION_PHRASES:
            raise ValueError(f"phrase not in lexicon: {self.negation_phrase!r}")

    def to_dict(self) -> dict:
        return {
            "entity": ENTITIES[self.entity],
            "polarity": self.polarity,
            "severity": self.severity,
            "location": self.location,
            "negation_phrase": self.negation_phrase,
        }

    @staticmethod
    def from_dict(d: dict) -> "Fact":
        return Fact(
            entity=entity_index(d["entity"]),
            polarity=d["polarity"],
            severity=d.get("severity"),
            location=d.get("location"),
            negation_phrase=d.get("negation_phrase"),
        )


class Sentence(NamedTuple):
    text: str
    fact: Fact


@dataclass
class Report:
    """An ordered list of single-fact sentences."""

    sentences: list[Sentence]
    is_templated_normal: bool = False

    def facts(self) -> list[Fact]:
        return [s.fact for s in self.sentences]

    def present_entities(self) -> list[int]:
        return [f.entity for f in self.facts() if f.polarity == PRESENT]

    def text(self) -> str:
        return " ".join(s.text for s in self.sentences)


def render_report(report: Report) -> str:
    return report.text()


# --- grammar tables -------------------------------------------------------

_ENT_ALT = "|".join(sorted((e.lower() for e in ENTITIES[:NO_FINDINGS]), key=len, reverse=True))
_SEV_ALT = "|".join(SEVERITIES)
_LOC_ALT = "|".join(LOCATIONS)
_E = f"(?P<ent>{_ENT_ALT})"
_S = f"(?P<sev>{_SEV_ALT})"
_L = f"(?P<loc>{_LOC_ALT})"


def _loc_tail(location: str | None) -> str:
    return f" in the {location}" if location else ""


def _sev_head(severity: str | None) -> str:
    return f"{severity} " if severity else ""


# Present templates: id -> (needs_severity_ok, formatter, compiled pattern).
# Formatters emit lowercase sentence bodies; capitalisation happens last.
PRESENT_TEMPLATES: dict[str, tuple[bool, object, re.Pattern]] = {
    "there_is": (
        False,
        lambda e, s, l: f"there is {_sev_head(s)}{e}{_loc_tail(l)}.",
        re.compile(rf"there is (?:{_S} )?{_E}(?: in the {_L})?\."),
    ),
    "bare": (
        True,
        lambda e, s, l: f"{s} {e}{_loc_tail(l)}.",
        re.compile(rf"{_S} {_E}(?: in the {_L})?\."),
    ),
    "is_present": (
        False,
        lambda e, s, l: f"{_sev_head(s)}{e} is present{_loc_tail(l)}.",
        re.compile(rf"(?:{_S} )?{_E} is present(?: in the {_L})?\."),
    ),
    "is_seen": (
        False,
        lambda e, s, l: f"{_sev_head(s)}{e} is seen{_loc_tail(l)}.",
        re.compile(rf"(?:{_S} )?{_E} is seen(?: in the {_L})?\."),
    ),
}

# Absent templates: id -> (lexicon phrase, formatter, compiled pattern).
ABSENT_TEMPLATES: dict[str, tuple[str, object, re.Pattern]] = {
    "abs_no": ("no", lambda e: f"no {e}.", re.compile(rf"no {_E}\.")),
    "abs_there_no": ("no", lambda e: f"there is no {e}.", re.compile(rf"there is no {_E}\.")),
    "abs_no_seen": ("no", lambda e: f"no {e} is seen.", re.compile(rf"no {_E} is seen\.")),
    "abs_no_observed": (
        "no",
        lambda e: f"no {e} is observed.",
        re.compile(rf"no {_E} is observed\."),
    ),
    "abs_no_evidence": (
        "no",
        lambda e: f"no evidence of {e}.",
        re.compile(rf"no evidence of {_E}\."),
    ),
    "abs_not_seen": ("not", lambda e: f"{e} is not seen.", re.compile(rf"{_E} is not seen\.")),
    "abs_without": ("without", lambda e: f"without {e}.", re.compile(rf"without {_E}\.")),
    "abs_resolved": ("resolved", lambda e: f"{e} has resolved.", re.compile(rf"{_E} has resolved\.")),
    "abs_removed": (
        "removed",
        lambda e: f"{e} has been removed.",
        re.compile(rf"{_E} has been removed\."),
    ),
    "abs_rule_out": ("rule out", lambda e: f"rule out {e}.", re.compile(rf"rule out {_E}\.")),
    "abs_free_of": ("free of", lambda e: f"free of {e}.", re.compile(rf"free of {_E}\.")),
    "abs_absence_of": (
        "absence of",
        lambda e: f"absence of {e}.",
        re.compile(rf"absence of {_E}\."),
    ),
}

# Fixed mediastinal normal sentences.  The heart/cardiac phrasings are mapped
# to Cardiomegaly and the silhouette phrasings to Enlarged Cardiomediastinum;
# all are absent facts, so label vectors are unaffected by the mapping.
MEDIASTINAL_SENTENCES: tuple[tuple[str, int], ...] = (
    ("The cardiomediastinal silhouette is normal.", entity_index("Enlarged Cardiomediastinum")),
    ("The cardiac silhouette is unremarkable.", entity_index("Cardiomegaly")),
    ("The heart size is normal.", entity_index("Cardiomegaly")),
    (
        "The cardiomediastinal silhouette is within normal limits.",
        entity_index("Enlarged Cardiomediastinum"),
    ),
    ("No cardiomegaly.", entity_index("Cardiomegaly")),
)

_MEDIASTINAL_BY_TEXT = {text.lower(): ent for text, ent in MEDIASTINAL_SENTENCES}


def _capitalize(s: str) -> str:
    return s[0].upper() + s[1:] if s else s


def render_fact(fact: Fact, template: str) -> str:
    """Render one fact through a named template; returns a capitalised sentence."""
    if fact.polarity == PRESENT:
        needs_sev, fmt, _ = PRESENT_TEMPLATES[template]
        if needs_sev and fact.severity is None:
            raise ValueError(f"template {template!r} requires a severity")
        body = fmt(ENTITIES[fact.entity].lower(), fact.severity, fact.location)
    else:
        phrase, fmt, _ = ABSENT_TEMPLATES[template]
        if fact.negation_phrase is not None and fact.negation_phrase != phrase:
            raise ValueError(f"template {template!r} uses phrase {phrase!r}")
        body = fmt(ENTITIES[fact.entity].lower())
    return _capitalize(body)


def make_sentence(fact: Fact, template: str) -> Sentence:
    return Sentence(render_fact(fact, template), fact)


def parse_sentence(sentence: str) -> Fact:
    """Parse one sentence into its fact, or raise ParseError naming it."""
    low = sentence.lower()
    if low in _MEDIASTINAL_BY_TEXT:
        ent = _MEDIASTINAL_BY_TEXT[low]
        phrase = "no" if low.startswith("no ") else None
        return Fact(ent, ABSENT, negation_phrase=phrase)
    for phrase, _, pat in ABSENT_TEMPLATES.values():
        m = pat.fullmatch(low)
        if m:
            return Fact(entity_index(_title(m.group("ent"))), ABSENT, negation_phrase=phrase)
    for _, _, pat in PRESENT_TEMPLATES.values():
        m = pat.fullmatch(low)
        if m:
            return Fact(
                entity_index(_title(m.group("ent"))),
                PRESENT,
                severity=m.group("sev") if "sev" in m.groupdict() else None,
                location=m.group("loc") if "loc" in m.groupdict() else None,
            )
    raise ParseError(f"unrecognized sentence: {sentence!r}")


_LOWER_TO_NAME = {e.lower(): e for e in ENTITIES}


def _title(lowered: str) -> str:
    return _LOWER_TO_NAME[lowered]


_SENT_SPLIT = re.compile(r"(?<=\.)\s+")


def split_sentences(text: str) -> list[str]:
    text = text.strip()
    return _SENT_SPLIT.split(text) if text else []


def parse_report(text: str) -> Report:
    """Parse a full report string. Unparseable sentences raise ParseError."""
    chunks = split_sentences(text)
    sentences = []
    for chunk in chunks:
        if not chunk.endswith("."):
            raise ParseError(f"unrecognized sentence: {chunk!r}")
        sentences.append(Sentence(chunk, parse_sentence(chunk)))
    report = Report(sentences)
    report.is_templated_normal = report.text() in _TEMPLATED_NORMAL_TEXTS
    return report


def shuffle_sentences(report: Report, seed: int) -> Report:
    """Reorder sentences with a seeded permutation; the fact multiset is kept."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(report.sentences))
    return Report(
        [report.sentences[i] for i in order],
        is_templated_normal=report.is_templated_normal,
    )


# --- templated normal reports --------------------------------------------

def _mediastinal_sentence(idx: int) -> Sentence:
    text, ent = MEDIASTINAL_SENTENCES[idx]
    phrase = "no" if text.lower().startswith("no ") else None
    return Sentence(text, Fact(ent, ABSENT, negation_phrase=phrase))


def _templated_normals() -> tuple[Report, ...]:
    def absent(name: str, template: str) -> Sentence:
        phrase = ABSENT_TEMPLATES[template][0]
        return make_sentence(Fact(entity_index(name), ABSENT, negation_phrase=phrase), template)

    a = Report(
        [
            _mediastinal_sentence(2),
            absent("Pleural Effusion", "abs_there_no"),
            absent("Pneumothorax", "abs_no_seen"),
        ],
        is_templated_normal=True,
    )
    b = Report(
        [
            _mediastinal_sentence(0),
            absent("Consolidation", "abs_no_observed"),
            absent("Pleural Effusion", "abs_no"),
            absent("Pneumothorax", "abs_there_no"),
        ],
        is_templated_normal=True,
    )
    c = Report(
        [
            absent("Pneumonia", "abs_no_evidence"),
            _mediastinal_sentence(1),
            absent("Edema", "abs_there_no"),
        ],
        is_templated_normal=True,
    )
    return (a, b, c)


TEMPLATED_NORMALS: tuple[Report, ...] = _templated_normals()
_TEMPLATED_NORMAL_TEXTS = frozenset(r.text() for r in TEMPLATED_NORMALS)


# --- image feature model ---------------------------------------------------

IMAGE_DIM = 16
_BASIS_SEED = 1470
_SEVERITY_SCALE = {None: 1.0, "mild": 0.6, "moderate": 1.0, "severe": 1.4}
_LOCATION_SCALE = 0.25


def image_basis(dim: int = IMAGE_DIM) -> np.ndarray:
    """Fixed orthonormal rows, one direction per entity. Shape (14, dim)."""
    if dim < N_ENTITIES:
        raise ValueError(f"image dim {dim} < {N_ENTITIES}")
    rng = np.random.default_rng(_BASIS_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return np.ascontiguousarray(q.T[:N_ENTITIES])


def location_offsets(dim: int = IMAGE_DIM) -> np.ndarray:
    rng = np.random.default_rng(_BASIS_SEED + 1)
    v = rng.standard_normal((len(LOCATIONS), dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def render_image(report: Report, rng: np.random.Generator, *, dim: int = IMAGE_DIM,
                 noise_sigma: float = 0.1) -> np.ndarray:
    """Noisy feature vector for a report: severity-scaled presence directions
    plus location offsets, or the no-findings direction for normal reports."""
    basis = image_basis(dim)
    offs = location_offsets(dim)
    x = np.zeros(dim)
    present = [f for f in report.facts() if f.polarity == PRESENT]
    for f in present:
        x += _SEVERITY_SCALE[f.severity] * basis[f.entity]
        if f.location is not None:
            x += _LOCATION_SCALE * offs[LOCATIONS.index(f.location)]
    if not present:
        x += basis[NO_FINDINGS]
    return x + noise_sigma * rng.standard_normal(dim)


# --- corpus generation ------------------------------------------------------

DEFAULT_ENTITY_FREQUENCY: tuple[float, ...] = (
    0.14,  # Cardiomegaly
    0.18,  # Lung Opacity
    0.12,  # Atelectasis
    0.02,  # Lung Lesion
    0.15,  # Pleural Effusion
    0.03,  # Fracture
    0.08,  # Support Devices
    0.02,  # Enlarged Cardiomediastinum
    0.01,  # Pleural Other
    0.05,  # Consolidation
    0.10,  # Edema
    0.06,  # Pneumothorax
    0.04,  # Pneumonia
)


class ReportPair(NamedTuple):
    report: Report
    image: np.ndarray


class EmptyCorpusError(ValueError):
    """Raised when a corpus of zero reports is requested."""


@dataclass
class CorpusSpec:
    """Knobs for the synthetic corpus generator."""

    n_reports: int
    normal_fraction: float = 0.4
    duplicate_mass: float = 0.6
    entity_frequency: tuple[float, ...] = DEFAULT_ENTITY_FREQUENCY
    seed: int = 0
    noise_sigma: float = 0.1
    image_dim: int = IMAGE_DIM

    def __post_init__(self) -> None:
        if len(self.entity_frequency) != NO_FINDINGS:
            raise ValueError("entity_frequency needs 13 weights")
        freq = np.asarray(self.entity_frequency, dtype=float)
        if np.any(freq < 0) or freq.sum() <= 0:
            raise ValueError("entity_frequency weights must be non-negative")
        self.entity_frequency = tuple(freq / freq.sum())
        for name in ("normal_fraction", "duplicate_mass"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


_TEMPLATED_WEIGHTS = (0.6, 0.25, 0.15)
_PRESENT_COUNT = ((1, 2, 3), (0.72, 0.23, 0.05))
_DECORATION_COUNT = ((0, 1, 2), (0.5, 0.35, 0.15))

_SEV_TEMPLATES = ("there_is", "bare", "is_present", "is_seen")
_NOSEV_TEMPLATES = ("there_is", "is_present", "is_seen")
_ABSENT_IDS = tuple(ABSENT_TEMPLATES)


def _copy_report(report: Report) -> Report:
    return Report(list(report.sentences), report.is_templated_normal)


def _random_present_fact(rng: np.random.Generator, entity: int) -> Sentence:
    severity = str(rng.choice(SEVERITIES)) if rng.random() < 0.5 else None
    location = str(rng.choice(LOCATIONS)) if rng.random() < 0.5 else None
    pool = _SEV_TEMPLATES if severity else _NOSEV_TEMPLATES
    template = str(rng.choice(pool))
    return make_sentence(Fact(entity, PRESENT, severity, location), template)


def _random_absent_fact(rng: np.random.Generator, entity: int) -> Sentence:
    template = str(rng.choice(_ABSENT_IDS))
    phrase = ABSENT_TEMPLATES[template][0]
    return make_sentence(Fact(entity, ABSENT, negation_phrase=phrase), template)


def _varied_normal(rng: np.random.Generator) -> Report:
    k = int(rng.integers(2, 5))
    ents = rng.choice(NO_FINDINGS, size=k, replace=False)
    return Report([_random_absent_fact(rng, int(e)) for e in ents])


def _abnormal(rng: np.random.Generator, freq: np.ndarray) -> Report:
    counts, probs = _PRESENT_COUNT
    k = int(rng.choice(counts, p=probs))
    ents = rng.choice(NO_FINDINGS, size=k, replace=False, p=freq)
    sentences = [_random_present_fact(rng, int(e)) for e in ents]
    d_counts, d_probs = _DECORATION_COUNT
    n_abs = int(rng.choice(d_counts, p=d_probs))
    remaining = [e for e in AUTHORABLE if e not in set(int(x) for x in ents)]
    if n_abs:
        extra = rng.choice(len(remaining), size=n_abs, replace=False)
        sentences += [_random_absent_fact(rng, remaining[int(i)]) for i in extra]
    order = rng.permutation(len(sentences))
    return Report([sentences[i] for i in order])


def generate_corpus(spec: CorpusSpec) -> list[ReportPair]:
    """Deterministically generate ``spec.n_reports`` report/image pairs."""
    if spec.n_reports <= 0:
        raise EmptyCorpusError("n_reports must be positive")
    rng = np.random.default_rng(spec.seed)
    freq = np.asarray(spec.entity_frequency)
    pairs: list[ReportPair] = []
    for _ in range(spec.n_reports):
        if rng.random() < spec.normal_fraction:
            if rng.random() < spec.duplicate_mass:
                idx = int(rng.choice(len(TEMPLATED_NORMALS), p=_TEMPLATED_WEIGHTS))
                report = _copy_report(TEMPLATED_NORMALS[idx])
            else:
                report = _varied_normal(rng)
        else:
            report = _abnormal(rng, freq)
        image = render_image(report, rng, dim=spec.image_dim, noise_sigma=spec.noise_sigma)
        pairs.append(ReportPair(report, image))
    return pairs


def dedup_pairs(pairs: Iterable[ReportPair]) -> list[ReportPair]:
    """Keep the first pair per distinct report text.

    Models the classical remedy of discarding duplicated reports before
    contrastive training; the images of dropped pairs are discarded with them.
    """
    seen: set[str] = set()
    out = []
    for pair in pairs:
        text = render_report(pair.report)
        if text in seen:
            continue
        seen.add(text)
        out.append(pair)
    return out


# --- corpus serialization ---------------------------------------------------

def save_corpus_jsonl(pairs: Iterable[ReportPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, (report, image) in enumerate(pairs):
            record = {
                "report_text": render_report(report),
                "facts": [f.to_dict() for f in report.facts()],
                "image_feature": [float(v) for v in image],
                "id": i,
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_corpus_jsonl(path) -> list[ReportPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            report = parse_report(record["report_text"])
            image = np.asarray(record["image_feature"], dtype=np.float64)
            pairs.append(ReportPair(report, image))
    return pairs
