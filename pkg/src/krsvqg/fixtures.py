"""Synthetic stand-ins for the captioned image corpora and the triplet dump.

Two domains share the record schema: ``remote`` mimics overhead scenes,
``natural`` mimics everyday photos for general-domain pretraining. Images
are procedural textures whose colour and stripe pattern depend on the
scene object, so every image is distinct and learnable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from collections import Counter

from .dataset import (KnowledgeTriplet, SampleRecord, build_records, match_triplets,
                      sample_answer, template_question, triplet_to_sentence)
from .imageio import write_ppm

REMOTE_OBJECTS = ["basketball court", "river", "bridge", "storage tank", "airplane", "ship",
                  "parking lot", "tennis court", "farmland", "stadium", "harbor", "railway station"]
NATURAL_OBJECTS = ["dog", "cat", "bicycle", "umbrella", "pizza", "guitar", "car", "bench"]
CONTEXTS = {
    "remote": ["trees", "buildings", "a road", "green grass", "houses", "bare land"],
    "natural": ["a table", "the street", "a sofa", "the beach", "a park", "the floor"],
}

TRIPLETS = [
    ("UsedFor", "basketball court", "playing games"),
    ("AtLocation", "basketball court", "school"),
    ("UsedFor", "court", "legal trials"),
    ("HasProperty", "river", "dangerous to traverse"),
    ("CapableOf", "river", "flooding"),
    ("UsedFor", "bridge", "crossing water"),
    ("PartOf", "bridge", "road network"),
    ("UsedFor", "storage tank", "storing oil"),
    ("AtLocation", "storage tank", "industrial area"),
    ("CapableOf", "airplane", "flying"),
    ("AtLocation", "airplane", "airport"),
    ("UsedFor", "ship", "transporting goods"),
    ("AtLocation", "ship", "harbor"),
    ("UsedFor", "parking lot", "parking cars"),
    ("PartOf", "parking lot", "shopping mall"),
    ("UsedFor", "tennis court", "playing tennis"),
    ("HasProperty", "tennis court", "rectangular"),
    ("UsedFor", "farmland", "growing crops"),
    ("HasProperty", "farmland", "fertile"),
    ("UsedFor", "stadium", "hosting sports events"),
    ("CapableOf", "stadium", "holding many people"),
    ("UsedFor", "harbor", "mooring boats"),
    ("UsedFor", "railway station", "boarding trains"),
    ("CapableOf", "dog", "guarding a house"),
    ("HasProperty", "dog", "loyal"),
    ("CapableOf", "cat", "catching mice"),
    ("UsedFor", "bicycle", "riding"),
    ("PartOf", "umbrella", "rain gear"),
    ("UsedFor", "umbrella", "keeping dry"),
    ("HasProperty", "pizza", "delicious"),
    ("UsedFor", "guitar", "playing music"),
    ("CapableOf", "car", "driving fast"),
    ("AtLocation", "bench", "park"),
]


def triplet_lines() -> list[str]:
    return ["%s\t%s\t%s" % (r, h.replace(" ", "_"), t.replace(" ", "_")) for r, h, t in TRIPLETS]


def knowledge_triplets() -> list[KnowledgeTriplet]:
    return [KnowledgeTriplet(h, r, t) for r, h, t in TRIPLETS]


def alternate_triplets(obj: str) -> list[KnowledgeTriplet]:
    """All fixture triplets whose head is ``obj``."""
    return [t for t in knowledge_triplets() if t.head == obj]


def synthetic_image(index: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    hue = (index * 0.618) % 1.0
    base = np.array([hue, (hue + 0.33) % 1.0, (hue + 0.66) % 1.0])
    angle = np.pi * (index % 4) / 4
    freq = 2 + index % 5
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    img = 0.6 * base[None, None, :] * stripes[..., None] + 0.3 * rng.random((size, size, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def captions_for(domain: str, n: int, seed: int = 0, n_objects: int | None = None) -> list[tuple[str, str]]:
    objects = REMOTE_OBJECTS if domain == "remote" else NATURAL_OBJECTS
    objects = objects[:n_objects] if n_objects else objects
    contexts = CONTEXTS[domain]
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        obj = objects[i % len(objects)]
        ctx = contexts[int(rng.integers(len(contexts)))]
        verb = "surrounded by" if domain == "remote" else "on"
        out.append(("%s_%03d" % (domain, i), "a %s %s %s" % (obj, verb, ctx)))
    return out


def fixture_records(captions, seed: int = 0) -> list[SampleRecord]:
    """Records for ``captions``; the k-th image of an object gets its k-th ranked triplet."""
    records, skipped = build_records(captions, knowledge_triplets(), seed)
    if skipped:
        raise ValueError("fixture captions without a grounded triplet: %s" % skipped)
    seen = Counter()
    out = []
    for (ref, caption), rec in zip(captions, records):
        matches = match_triplets(caption, knowledge_triplets())
        obj = matches[0].triplet.head
        t = matches[seen[obj] % len(matches)].triplet
        seen[obj] += 1
        sentence = triplet_to_sentence(t)
        answer = sample_answer(t, "%s:%s" % (seed, ref))
        out.append(SampleRecord(ref, caption, sentence, template_question(t, answer), answer, t))
    return out


def make_fixture(n: int = 8, image_size: int = 32, seed: int = 0, domain: str = "remote",
                 n_objects: int | None = None):
    """Return (records as dicts, {image_ref: image array}) for ``n`` synthetic scenes.

    With ``n_objects < n`` scene objects repeat across images, each repeat
    carrying different knowledge, so questions cannot be predicted from
    the caption alone.
    """
    if domain not in CONTEXTS:
        raise ValueError("domain must be 'remote' or 'natural'")
    captions = captions_for(domain, n, seed, n_objects)
    records = fixture_records(captions, seed)
    rng = np.random.default_rng(seed + 1)
    offset = 0 if domain == "remote" else 100
    images = {ref: synthetic_image(i + offset, image_size, rng) for i, (ref, _) in enumerate(captions)}
    return [r.as_dict() for r in records], images


def write_fixture(out_dir, n: int = 8, image_size: int = 32, seed: int = 0,
                  domain: str = "remote", image_format: str = "npy") -> dict:
    """Write ``captions.tsv``, ``triplets.tsv`` and ``images/`` for the CLI pipeline."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    captions = captions_for(domain, n, seed)
    _, images = make_fixture(n, image_size, seed, domain)
    lines = []
    for ref, caption in captions:
        name = "images/%s.%s" % (ref, image_format)
        if image_format == "npy":
            np.save(out / name, images[ref])
        else:
            write_ppm(out / name, images[ref])
        lines.append("%s\t%s" % (name, caption))
    (out / "captions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "triplets.tsv").write_text("\n".join(triplet_lines()) + "\n", encoding="utf-8")
    return {"captions": out / "captions.tsv", "triplets": out / "triplets.tsv", "images": out / "images"}
