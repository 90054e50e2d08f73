"""CoT annotations, preference pairs and the JSONL corpus files.

File schemas (UTF-8, one JSON object per line, keys in the order listed):

``object-records.jsonl``
    id (str), category (str), image_ref (str), occlusion_ratio (float in [0, 1]),
    geometry_stats (null or {elongation, flatness, circularity})
``annotations.jsonl``
    sample_id (str), steps (list of 5 {stage, question, gold_answer})
``preference-pairs.jsonl``
    sample_id, query, chosen, rejected (str), corruption_kind
    (``wrong_object`` | ``flipped_attribute`` | ``flipped_reflection``)
``runs.jsonl``
    one serialized :class:`~occcot.pipeline.PipelineRun` per line
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .backends import STAGE_ORDER, Stage
from .pipeline import PipelineRun, QuestionTemplates, Sample

FULL_SCALE_N = 104_671
# Commonly rounded to "110k"; the generator always takes n explicitly.
ROUNDED_SCALE_N = 110_000

ROUND_CIRCULARITY = 0.8
LONG_ELONGATION = 2.0
THIN_FLATNESS = 2.0


class UnmappedCategoryError(KeyError):
    def __str__(self) -> str:
        return self.args[0]


class SchemaError(ValueError):
    def __init__(self, path: str, line: int, field: str | None, message: str):
        self.path = path
        self.line = line
        self.field = field
        where = f"field {field!r}: " if field else ""
        super().__init__(f"{path}:{line}: {where}{message}")


def load_category_table(path: str | os.PathLike | None = None) -> dict[str, dict[str, bool]]:
    if path is None:
        text = resources.files("occcot").joinpath("data/category_attributes.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    table = json.loads(text)
    for cat, attrs in table.items():
        if set(attrs) != {"round", "long", "thin"}:
            raise ValueError(f"category {cat!r}: expected keys round/long/thin")
    return table


DEFAULT_CATEGORIES = tuple(load_category_table())


def yes_no(flag: bool) -> str:
    return "yes" if flag else "no"


def flip(answer: str) -> str:
    if answer == "yes":
        return "no"
    if answer == "no":
        return "yes"
    raise ValueError(f"cannot flip non yes/no answer {answer!r}")


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeometryStats:
    elongation: float
    flatness: float
    circularity: float

    def __post_init__(self) -> None:
        if self.elongation < 0 or self.flatness < 0:
            raise ValueError("elongation and flatness must be >= 0")
        if not 0.0 <= self.circularity <= 1.0:
            raise ValueError("circularity must lie in [0, 1]")

    def to_dict(self) -> dict[str, float]:
        return {"elongation": self.elongation, "flatness": self.flatness, "circularity": self.circularity}


@dataclass(frozen=True)
class ObjectRecord:
    id: str
    category: str
    image_ref: str
    occlusion_ratio: float
    geometry_stats: GeometryStats | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("record id must be non-empty")
        if not self.category:
            raise ValueError(f"record {self.id!r}: category must be non-empty")
        if not 0.0 <= self.occlusion_ratio <= 1.0:
            raise ValueError(f"record {self.id!r}: occlusion_ratio outside [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "category": self.category,
            "image_ref": self.image_ref,
            "occlusion_ratio": self.occlusion_ratio,
            "geometry_stats": self.geometry_stats.to_dict() if self.geometry_stats else None,
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "ObjectRecord":
        geo = obj.get("geometry_stats")
        return cls(
            id=obj["id"],
            category=obj["category"],
            image_ref=obj["image_ref"],
            occlusion_ratio=float(obj["occlusion_ratio"]),
            geometry_stats=GeometryStats(**geo) if geo else None,
        )


@dataclass(frozen=True)
class Attributes:
    round: bool
    long: bool
    thin: bool

    def as_answers(self) -> dict[str, str]:
        return {"round": yes_no(self.round), "long": yes_no(self.long), "thin": yes_no(self.thin)}


def derive_attributes(
    record: ObjectRecord, table: Mapping[str, Mapping[str, bool]] | None = None
) -> Attributes:
    """Gold attribute labels from geometry thresholds, else from the category table."""
    g = record.geometry_stats
    if g is not None:
        return Attributes(
            round=g.circularity >= ROUND_CIRCULARITY,
            long=g.elongation >= LONG_ELONGATION,
            thin=g.flatness >= THIN_FLATNESS,
        )
    table = load_category_table() if table is None else table
    try:
        row = table[record.category]
    except KeyError:
        raise UnmappedCategoryError(
            f"category {record.category!r} has no attribute entry and record "
            f"{record.id!r} carries no geometry"
        ) from None
    return Attributes(bool(row["round"]), bool(row["long"]), bool(row["thin"]))


# ---------------------------------------------------------------------------
# Annotations and preference pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationStep:
    stage: Stage
    question: str
    gold_answer: str

    @property
    def phase(self) -> str:
        if self.stage is Stage.SELF_REFLECTION:
            return "self_reflection"
        if self.stage is Stage.FINAL_DECISION:
            return "final_decision"
        return "description"


@dataclass(frozen=True)
class CoTAnnotation:
    sample_id: str
    steps: tuple[AnnotationStep, ...]

    def __post_init__(self) -> None:
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        if [s.stage for s in steps] != list(STAGE_ORDER):
            raise ValueError(f"{self.sample_id}: annotation must have 5 steps in fixed stage order")
        for s in steps[:4]:
            if s.gold_answer not in ("yes", "no"):
                raise ValueError(f"{self.sample_id}: step {s.stage.value} gold must be yes/no")
        if not steps[4].gold_answer:
            raise ValueError(f"{self.sample_id}: final decision gold must be non-empty")

    def step(self, stage: Stage) -> AnnotationStep:
        return self.steps[Stage(stage).order]

    @property
    def gold_object(self) -> str:
        return self.steps[4].gold_answer

    @property
    def gold_clear(self) -> bool:
        return self.steps[3].gold_answer == "yes"

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "steps": [
                {"stage": s.stage.value, "question": s.question, "gold_answer": s.gold_answer}
                for s in self.steps
            ],
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "CoTAnnotation":
        return cls(
            sample_id=obj["sample_id"],
            steps=tuple(
                AnnotationStep(Stage(s["stage"]), s["question"], s["gold_answer"]) for s in obj["steps"]
            ),
        )


def build_annotation(
    record: ObjectRecord,
    attributes: Attributes,
    clarity_threshold: float = 0.5,
    templates: QuestionTemplates | None = None,
) -> CoTAnnotation:
    """Five-step annotation; the object counts as unclear once occlusion reaches the threshold."""
    if not 0.0 <= clarity_threshold <= 1.0:
        raise ValueError(f"clarity_threshold must lie in [0, 1], got {clarity_threshold!r}")
    t = templates or QuestionTemplates()
    answers = attributes.as_answers()
    clear = record.occlusion_ratio < clarity_threshold
    steps = (
        AnnotationStep(Stage.ROUNDNESS, t.roundness, answers["round"]),
        AnnotationStep(Stage.LENGTH, t.length, answers["long"]),
        AnnotationStep(Stage.THICKNESS, t.thickness, answers["thin"]),
        AnnotationStep(Stage.SELF_REFLECTION, t.self_reflection, yes_no(clear)),
        AnnotationStep(Stage.FINAL_DECISION, t.final_decision, record.category),
    )
    return CoTAnnotation(record.id, steps)


class CorruptionKind(str, enum.Enum):
    WRONG_OBJECT = "wrong_object"
    FLIPPED_ATTRIBUTE = "flipped_attribute"
    FLIPPED_REFLECTION = "flipped_reflection"


@dataclass(frozen=True)
class PreferencePair:
    sample_id: str
    query: str
    chosen: str
    rejected: str
    corruption_kind: CorruptionKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "corruption_kind", CorruptionKind(self.corruption_kind))
        if self.chosen == self.rejected:
            raise ValueError(f"{self.sample_id}: chosen and rejected responses are identical")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "query": self.query,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "corruption_kind": self.corruption_kind.value,
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "PreferencePair":
        return cls(**{k: obj[k] for k in ("sample_id", "query", "chosen", "rejected", "corruption_kind")})


def build_preference_pair(
    annotation: CoTAnnotation,
    corruption_kind: CorruptionKind | str,
    rng_seed: int,
    categories: Sequence[str] = DEFAULT_CATEGORIES,
) -> PreferencePair:
    """Gold answer of one step versus a corrupted answer, chosen seed-deterministically."""
    kind = CorruptionKind(corruption_kind)
    rng = np.random.default_rng(rng_seed)
    if kind is CorruptionKind.WRONG_OBJECT:
        step = annotation.steps[4]
        others = sorted(set(categories) - {step.gold_answer})
        if not others:
            raise ValueError("wrong-object corruption needs at least two categories")
        rejected = others[int(rng.integers(len(others)))]
    elif kind is CorruptionKind.FLIPPED_ATTRIBUTE:
        step = annotation.steps[int(rng.integers(3))]
        rejected = flip(step.gold_answer)
    else:
        step = annotation.steps[3]
        rejected = flip(step.gold_answer)
    return PreferencePair(annotation.sample_id, step.question, step.gold_answer, rejected, kind)


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    clarity_threshold: float = 0.5
    corruption_mix: tuple[float, float, float] = (1.0, 1.0, 1.0)
    geometry_fraction: float = 0.0
    image_prefix: str = "img/"

    def __post_init__(self) -> None:
        if not self.categories:
            raise ValueError("at least one category required")
        mix = np.asarray(self.corruption_mix, dtype=float)
        if mix.shape != (3,) or np.any(mix < 0) or mix.sum() <= 0:
            raise ValueError("corruption_mix must be three non-negative weights with positive sum")
        if not 0.0 <= self.geometry_fraction <= 1.0:
            raise ValueError("geometry_fraction must lie in [0, 1]")


@dataclass
class Corpus:
    records: list[ObjectRecord] = field(default_factory=list)
    annotations: list[CoTAnnotation] = field(default_factory=list)
    pairs: list[PreferencePair] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        kinds = {k.value: 0 for k in CorruptionKind}
        for p in self.pairs:
            kinds[p.corruption_kind.value] += 1
        return {
            "records": len(self.records),
            "annotations": len(self.annotations),
            "annotation_steps": sum(len(a.steps) for a in self.annotations),
            "pairs": len(self.pairs),
            **{f"pairs_{k}": v for k, v in kinds.items()},
        }


def _geometry_for(attrs: Mapping[str, bool], rng: np.random.Generator) -> GeometryStats:
    def pick(flag: bool, lo: float, cut: float, hi: float) -> float:
        return round(float(rng.uniform(cut, hi) if flag else rng.uniform(lo, cut * 0.99)), 4)

    return GeometryStats(
        elongation=pick(attrs["long"], 0.0, LONG_ELONGATION, 6.0),
        flatness=pick(attrs["thin"], 0.0, THIN_FLATNESS, 6.0),
        circularity=pick(attrs["round"], 0.0, ROUND_CIRCULARITY, 1.0),
    )


def generate_corpus(
    n: int,
    seed: int = 0,
    config: CorpusConfig | None = None,
    table: Mapping[str, Mapping[str, bool]] | None = None,
) -> Corpus:
    """``n`` records with annotations and one preference pair each; pure in ``(n, seed, config)``.

    Each record draws from its own ``default_rng([seed, i])`` stream, so record
    ``i`` is the same regardless of ``n``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    config = config or CorpusConfig()
    table = load_category_table() if table is None else table
    mix = np.asarray(config.corruption_mix, dtype=float)
    mix = mix / mix.sum()
    kinds = list(CorruptionKind)
    if len(set(config.categories)) < 2:
        # wrong-object pairs are impossible with a single category
        mix[0] = 0.0
        if mix.sum() == 0:
            raise ValueError("single-category corpus cannot use only wrong_object corruption")
        mix = mix / mix.sum()
    corpus = Corpus()
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        category = config.categories[int(rng.integers(len(config.categories)))]
        ratio = round(float(rng.random()), 4)
        geometry = None
        if rng.random() < config.geometry_fraction:
            geometry = _geometry_for(table[category], rng)
        sid = f"s{i:06d}"
        record = ObjectRecord(sid, category, f"{config.image_prefix}{sid}.png", ratio, geometry)
        ann = build_annotation(record, derive_attributes(record, table), config.clarity_threshold)
        kind = kinds[int(rng.choice(3, p=mix))]
        pair_seed = int(rng.integers(2**31))
        corpus.records.append(record)
        corpus.annotations.append(ann)
        corpus.pairs.append(build_preference_pair(ann, kind, pair_seed, config.categories))
    return corpus


def samples_from(records: Iterable[ObjectRecord], annotations: Iterable[CoTAnnotation]) -> list[Sample]:
    """Pipeline samples carrying the gold labels of their annotations."""
    by_id = {a.sample_id: a for a in annotations}
    out = []
    for r in records:
        ann = by_id.get(r.id)
        if ann is None:
            raise KeyError(f"no annotation for record {r.id!r}")
        gold = {k: ann.steps[i].gold_answer == "yes" for i, k in enumerate(("round", "long", "thin"))}
        out.append(Sample(r.id, r.image_ref, ann.gold_object, gold, r.occlusion_ratio))
    return out


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------

_STR = (str,)
_NUM = (int, float)
_SCHEMAS: dict[str, dict[str, tuple[type, ...]]] = {
    "records": {"id": _STR, "category": _STR, "image_ref": _STR, "occlusion_ratio": _NUM},
    "annotations": {"sample_id": _STR, "steps": (list,)},
    "pairs": {"sample_id": _STR, "query": _STR, "chosen": _STR, "rejected": _STR, "corruption_kind": _STR},
    "runs": {"sample_id": _STR, "interactions": (list,)},
}
_LOADERS: dict[str, Callable[[Mapping[str, Any]], Any]] = {
    "records": ObjectRecord.from_dict,
    "annotations": CoTAnnotation.from_dict,
    "pairs": PreferencePair.from_dict,
    "runs": PipelineRun.from_dict,
}
FILE_NAMES = {
    "records": "object-records.jsonl",
    "annotations": "annotations.jsonl",
    "pairs": "preference-pairs.jsonl",
    "runs": "runs.jsonl",
}


def dumps_line(obj: Mapping[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path: str | os.PathLike, items: Iterable[Any]) -> int:
    """Write objects with ``to_dict`` (or plain mappings) one per line; returns the count."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            obj = item.to_dict() if hasattr(item, "to_dict") else item
            fh.write(dumps_line(obj))
            fh.write("\n")
            count += 1
    return count


def read_jsonl(path: str | os.PathLike, kind: str) -> list[Any]:
    """Read and validate a corpus file; errors name the line and the offending field."""
    if kind not in _SCHEMAS:
        raise ValueError(f"unknown corpus kind {kind!r}; expected one of {sorted(_SCHEMAS)}")
    schema, loader = _SCHEMAS[kind], _LOADERS[kind]
    path_s = str(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(path_s, lineno, None, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise SchemaError(path_s, lineno, None, "expected a JSON object")
            for name, types in schema.items():
                if name not in obj:
                    raise SchemaError(path_s, lineno, name, "missing required field")
                value = obj[name]
                if isinstance(value, bool) or not isinstance(value, types):
                    raise SchemaError(path_s, lineno, name, f"wrong type {type(value).__name__}")
            try:
                out.append(loader(obj))
            except (KeyError, TypeError, ValueError) as exc:
                field_name = exc.args[0] if isinstance(exc, KeyError) else None
                raise SchemaError(path_s, lineno, field_name, str(exc)) from None
    return out


def write_corpus(corpus: Corpus, outdir: str | os.PathLike) -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {k: outdir / FILE_NAMES[k] for k in ("records", "annotations", "pairs")}
    write_jsonl(paths["records"], corpus.records)
    write_jsonl(paths["annotations"], corpus.annotations)
    write_jsonl(paths["pairs"], corpus.pairs)
    return paths


def read_corpus(indir: str | os.PathLike) -> Corpus:
    indir = Path(indir)
    return Corpus(
        records=read_jsonl(indir / FILE_NAMES["records"], "records"),
        annotations=read_jsonl(indir / FILE_NAMES["annotations"], "annotations"),
        pairs=read_jsonl(indir / FILE_NAMES["pairs"], "pairs"),
    )


def scripted_backend(
    corpus: Corpus,
    error_rate: float = 0.0,
    seed: int = 0,
    categories: Sequence[str] | None = None,
) -> "MockBackend":
    """Mock backend that answers from the gold annotations with seeded mistakes.

    Each answer is wrong with probability ``error_rate``; an unaided final
    decision on a gold-unclear sample is wrong with twice that probability,
    while the expert-assisted answer keeps the base rate.
    """
    from .backends import MockBackend

    if not 0.0 <= error_rate <= 1.0:
        raise ValueError("error_rate must lie in [0, 1]")
    categories = list(categories or DEFAULT_CATEGORIES)
    script: dict[tuple[str, Stage], str] = {}
    assisted: dict[str, str] = {}
    for i, ann in enumerate(corpus.annotations):
        rng = np.random.default_rng([seed, i, 1])
        for step in ann.steps[:4]:
            wrong = rng.random() < error_rate
            script[(ann.sample_id, step.stage)] = flip(step.gold_answer) if wrong else step.gold_answer
        others = [c for c in categories if c != ann.gold_object] or [ann.gold_object + "?"]
        decoy = others[int(rng.integers(len(others)))]
        unaided_rate = min(1.0, error_rate * (1 if ann.gold_clear else 2))
        script[(ann.sample_id, Stage.FINAL_DECISION)] = (
            decoy if rng.random() < unaided_rate else ann.gold_object
        )
        assisted[ann.sample_id] = decoy if rng.random() < error_rate else ann.gold_object
    return MockBackend(script, assisted=assisted)
