"""Build knowledge-aware question samples from captions and a triplet dump.

Inputs are a ``relation<TAB>head<TAB>tail`` triplet file and an
``image_ref<TAB>caption`` file. Each captioned image is paired with the
best caption-grounded triplet, which is rendered into a knowledge sentence;
one of the triplet's two concepts becomes the answer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .tokenizer import tokenize

logger = logging.getLogger(__name__)

TEMPLATES = {
    "UsedFor": "{head} is used for {tail}",
    "AtLocation": "{head} is at location {tail}",
    "HasProperty": "{head} has the property of being {tail}",
    "CapableOf": "{head} is capable of {tail}",
    "PartOf": "{head} is part of {tail}",
}
SUPPORTED_RELATIONS = frozenset(TEMPLATES)
_RELATION_KEYS = {r.lower(): r for r in SUPPORTED_RELATIONS}


class DatasetError(ValueError):
    pass


def normalize_concept(text: str) -> str:
    return " ".join(text.replace("_", " ").lower().split())


def canonical_relation(label: str) -> Optional[str]:
    """Map ``AtLocation``, ``/r/AtLocation``, ``at location`` or ``at_location`` to ``AtLocation``."""
    key = re.sub(r"[\s_]+", "", label.strip().rsplit("/", 1)[-1]).lower()
    return _RELATION_KEYS.get(key)


@dataclass(frozen=True, order=True)
class KnowledgeTriplet:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        if not self.head or not self.tail:
            raise DatasetError("triplet head and tail must be non-empty")
        if self.relation not in SUPPORTED_RELATIONS:
            raise DatasetError("unsupported relation %r" % self.relation)


@dataclass
class SampleRecord:
    image: str
    caption: str
    knowledge_sentence: str
    question: str
    answer: str
    triplet: KnowledgeTriplet

    def to_json(self) -> str:
        obj = {
            "image": self.image,
            "caption": self.caption,
            "knowledge_sentence": self.knowledge_sentence,
            "question": self.question,
            "answer": self.answer,
            "triplet": {"head": self.triplet.head, "relation": self.triplet.relation,
                        "tail": self.triplet.tail},
        }
        return json.dumps(obj, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SampleRecord":
        t = d["triplet"]
        return cls(d["image"], d["caption"], d["knowledge_sentence"], d["question"], d["answer"],
                   KnowledgeTriplet(t["head"], t["relation"], t["tail"]))

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TripletMatch:
    triplet: KnowledgeTriplet
    concept: str
    length: int


def load_triplets(dump, relation_filter: Optional[Iterable[str]] = None) -> list[KnowledgeTriplet]:
    """Parse a tab-separated triplet dump.

    Malformed lines are skipped with a warning carrying their line number;
    triplets whose relation is not in ``relation_filter`` are dropped.
    """
    allowed = SUPPORTED_RELATIONS if relation_filter is None else {
        canonical_relation(r) or r for r in relation_filter}
    lines = Path(dump).read_text(encoding="utf-8").splitlines()
    seen = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(p.strip() for p in parts):
            logger.warning("%s:%d: malformed triplet line skipped: %r", dump, lineno, line)
            continue
        relation = canonical_relation(parts[0])
        if relation is None or relation not in allowed:
            continue
        t = KnowledgeTriplet(normalize_concept(parts[1]), relation, normalize_concept(parts[2]))
        seen.setdefault(t, None)
    if not seen:
        raise DatasetError("no triplets left in %s after filtering" % dump)
    return list(seen)


def _occurs(concept_tokens: list[str], caption_tokens: list[str]) -> bool:
    n = len(concept_tokens)
    return any(caption_tokens[i:i + n] == concept_tokens for i in range(len(caption_tokens) - n + 1))


def match_triplets(caption: str, triplets: Sequence[KnowledgeTriplet]) -> list[TripletMatch]:
    """Triplets with a head or tail found in ``caption`` as a whole-word phrase.

    Ranked by matched phrase length (in words), longest first, then by
    (head, relation, tail).
    """
    if not caption.strip():
        raise DatasetError("caption must be non-empty")
    cap = tokenize(caption)
    matches = []
    for t in triplets:
        best = None
        for concept in (t.head, t.tail):
            toks = tokenize(concept)
            if toks and _occurs(toks, cap) and (best is None or len(toks) > best[1]):
                best = (concept, len(toks))
        if best:
            matches.append(TripletMatch(t, best[0], best[1]))
    matches.sort(key=lambda m: (-m.length, m.triplet))
    return matches


def triplet_to_sentence(triplet: KnowledgeTriplet) -> str:
    template = TEMPLATES.get(triplet.relation)
    if template is None:
        raise DatasetError("unsupported relation %r" % triplet.relation)
    text = template.format(head=triplet.head, tail=triplet.tail)
    return text[0].upper() + text[1:] + "."


def sample_answer(triplet: KnowledgeTriplet, seed) -> str:
    """Pick the head or the tail with equal probability, reproducibly for ``seed``."""
    return triplet.head if random.Random(seed).random() < 0.5 else triplet.tail


def template_question(triplet: KnowledgeTriplet, answer: str) -> str:
    """The knowledge sentence with the answer concept replaced by "what", as a question.

    Only used to synthesize questions for fixtures; real questions are
    human-written and passed in.
    """
    if answer == triplet.head:
        text = TEMPLATES[triplet.relation].format(head="what", tail=triplet.tail)
    elif answer == triplet.tail:
        text = TEMPLATES[triplet.relation].format(head=triplet.head, tail="what")
    else:
        raise DatasetError("answer %r is not part of %s" % (answer, triplet))
    return text[0].upper() + text[1:] + "?"


def split_dataset(records: Sequence, seed) -> tuple[list, list]:
    """Seeded shuffle, then a 4:1 train/validation split (validation gets floor(N/5))."""
    records = list(records)
    if len(records) < 5:
        raise DatasetError("need at least 5 records to split, got %d" % len(records))
    order = list(range(len(records)))
    random.Random(seed).shuffle(order)
    n_val = len(records) // 5
    val = [records[i] for i in order[:n_val]]
    train = [records[i] for i in order[n_val:]]
    return train, val


def read_captions(path) -> list[tuple[str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise DatasetError("%s:%d: expected 'image_ref<TAB>caption'" % (path, lineno))
        rows.append((parts[0].strip(), parts[1].strip()))
    return rows


def read_questions(path) -> dict[str, str]:
    """``image_ref<TAB>question`` lines for human-written questions."""
    return dict(read_captions(path))


def check_record(rec: SampleRecord) -> None:
    """Raise if ``rec`` breaks any of the sample invariants."""
    t = rec.triplet
    if rec.answer not in (t.head, t.tail):
        raise DatasetError("answer %r is neither head nor tail" % rec.answer)
    sentence = " ".join(tokenize(rec.knowledge_sentence))
    for concept in (t.head, t.tail):
        if " ".join(tokenize(concept)) not in sentence:
            raise DatasetError("knowledge sentence lacks %r" % concept)
    cap = tokenize(rec.caption)
    if not any(_occurs(tokenize(c), cap) for c in (t.head, t.tail)):
        raise DatasetError("no triplet concept appears in the caption of %s" % rec.image)


@dataclass
class BuildSummary:
    records: int = 0
    train: int = 0
    val: int = 0
    skipped_images: list = field(default_factory=list)
    relations: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def build_records(captions: Sequence[tuple[str, str]], triplets: Sequence[KnowledgeTriplet],
                  seed=0, questions: Optional[Mapping[str, str]] = None):
    """One record per image whose caption grounds at least one triplet.

    Returns (records, skipped image refs).
    """
    records, skipped = [], []
    for image_ref, caption in captions:
        matches = match_triplets(caption, triplets)
        if not matches:
            skipped.append(image_ref)
            continue
        t = matches[0].triplet
        sentence = triplet_to_sentence(t)
        answer = sample_answer(t, "%s:%s" % (seed, image_ref))
        if questions is not None and image_ref in questions:
            question = questions[image_ref]
        else:
            question = template_question(t, answer)
        rec = SampleRecord(image_ref, caption, sentence, question, answer, t)
        check_record(rec)
        records.append(rec)
    return records, skipped


def write_jsonl(path, records: Iterable[SampleRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def build_dataset(captions_path, triplets_path, out_dir, seed=0,
                  questions_path=None) -> BuildSummary:
    """Write ``train.jsonl``, ``val.jsonl`` and ``summary.json`` under ``out_dir``."""
    captions = read_captions(captions_path)
    triplets = load_triplets(triplets_path)
    questions = read_questions(questions_path) if questions_path else None
    records, skipped = build_records(captions, triplets, seed, questions)
    train, val = split_dataset(records, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "train.jsonl", train)
    write_jsonl(out / "val.jsonl", val)
    summary = BuildSummary(len(records), len(train), len(val), skipped,
                           dict(sorted(Counter(r.triplet.relation for r in records).items())))
    (out / "summary.json").write_text(summary.to_json() + "\n", encoding="utf-8")
    return summary


def record_digest(rec: SampleRecord) -> str:
    return hashlib.sha256(rec.to_json().encode("utf-8")).hexdigest()
