import hashlib
import json
import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krsvqg.dataset import (DatasetError, KnowledgeTriplet, SampleRecord, build_dataset,
                            build_records, canonical_relation, check_record, load_triplets,
                            match_triplets, read_jsonl, sample_answer, split_dataset,
                            template_question, triplet_to_sentence)
from krsvqg.fixtures import captions_for, knowledge_triplets, write_fixture
from krsvqg.tokenizer import tokenize


def test_load_single_line(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("AtLocation\tmobile_houses\tstreet\n")
    assert load_triplets(path) == [KnowledgeTriplet("mobile houses", "AtLocation", "street")]


def test_duplicates_collapse(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("UsedFor\tbridge\tcrossing\nUsedFor\tBridge\tcrossing\n/r/UsedFor\tbridge\tcrossing\n")
    assert len(load_triplets(path)) == 1


def test_fifty_line_dump(data_dir, caplog):
    with caplog.at_level(logging.WARNING, logger="krsvqg.dataset"):
        triplets = load_triplets(data_dir / "triplets_50.tsv")
    assert len(triplets) == 47
    warnings = [r for r in caplog.records if r.levelno == logging.WARNING]
    assert len(warnings) == 3
    for lineno in (11, 26, 41):
        assert any(":%d:" % lineno in w.getMessage() for w in warnings)


def test_relation_filter_and_empty(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("UsedFor\ta\tb\nIsA\tc\td\nat location\te\tf\n")
    assert [t.relation for t in load_triplets(path)] == ["UsedFor", "AtLocation"]
    assert [t.relation for t in load_triplets(path, {"at location"})] == ["AtLocation"]
    with pytest.raises(DatasetError):
        load_triplets(path, {"PartOf"})


def test_relation_spellings():
    for label in ("AtLocation", "/r/AtLocation", "at location", "at_location", "atlocation"):
        assert canonical_relation(label) == "AtLocation"
    assert canonical_relation("IsA") is None


def test_match_basketball_court():
    t = KnowledgeTriplet("basketball court", "UsedFor", "playing games")
    m = match_triplets("a basketball court surrounded by trees", [t])
    assert len(m) == 1 and m[0].concept == "basketball court"
    assert match_triplets("a lake with boats", [t]) == []


def test_match_word_boundaries():
    t = KnowledgeTriplet("court", "UsedFor", "legal trials")
    assert match_triplets("a courtyard near trees", [t]) == []


def _brute_force_rank(caption, triplets):
    words = caption.lower().split()
    phrases = {" ".join(words[i:j]) for i in range(len(words)) for j in range(i + 1, len(words) + 1)}
    scored = []
    for t in triplets:
        lengths = [len(c.split()) for c in (t.head, t.tail) if c in phrases]
        if lengths:
            scored.append((-max(lengths), t.head, t.relation, t.tail))
    return [KnowledgeTriplet(h, r, tl) for _, h, r, tl in sorted(scored)]


def test_longest_match_ranking():
    triplets = knowledge_triplets()
    for caption in ["a basketball court surrounded by trees", "a tennis court next to a river",
                    "a ship in the harbor", "a bridge over a river near a parking lot"]:
        got = [m.triplet for m in match_triplets(caption, triplets)]
        assert got == _brute_force_rank(caption, triplets)
    ranked = match_triplets("a basketball court surrounded by trees", triplets)
    assert ranked[0].triplet.head == "basketball court"
    assert ranked[-1].triplet.head == "court"


def test_sentences():
    assert triplet_to_sentence(KnowledgeTriplet("basketball court", "UsedFor", "playing games")) == \
        "Basketball court is used for playing games."
    assert triplet_to_sentence(KnowledgeTriplet("river", "HasProperty", "dangerous to traverse")) == \
        "River has the property of being dangerous to traverse."
    assert triplet_to_sentence(KnowledgeTriplet("mobile houses", "AtLocation", "street")) == \
        "Mobile houses is at location street."
    assert triplet_to_sentence(KnowledgeTriplet("a", "CapableOf", "b")) == "A is capable of b."
    assert triplet_to_sentence(KnowledgeTriplet("a", "PartOf", "b")) == "A is part of b."


def test_unsupported_relation():
    with pytest.raises(DatasetError, match="IsA"):
        KnowledgeTriplet("a", "IsA", "b")


def test_sample_answer():
    t = KnowledgeTriplet("river", "HasProperty", "wet")
    assert sample_answer(t, 7) == sample_answer(t, 7)
    heads = sum(sample_answer(t, s) == "river" for s in range(1000))
    assert 450 <= heads <= 550
    same = KnowledgeTriplet("x", "PartOf", "x")
    assert sample_answer(same, 3) == "x"


def test_template_question():
    t = KnowledgeTriplet("basketball court", "UsedFor", "court games")
    assert template_question(t, "court games") == "Basketball court is used for what?"
    assert template_question(t, "basketball court") == "What is used for court games?"


def test_split_sizes():
    train, val = split_dataset(range(300), seed=0)
    assert (len(train), len(val)) == (240, 60)
    assert sorted(train + val) == list(range(300))
    assert split_dataset(range(5), 1)[1].__len__() == 1
    assert split_dataset(range(23), 4) == split_dataset(range(23), 4)
    with pytest.raises(DatasetError):
        split_dataset(range(4), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 60), st.integers(0, 10_000))
def test_split_partition(n, seed):
    train, val = split_dataset(range(n), seed)
    assert len(val) == n // 5
    assert set(train).isdisjoint(val) and set(train) | set(val) == set(range(n))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(5, 30))
def test_built_records_satisfy_invariants(seed, n):
    records, skipped = build_records(captions_for("remote", n, seed), knowledge_triplets(), seed)
    assert not skipped
    for rec in records:
        check_record(rec)
        t = rec.triplet
        assert rec.answer in (t.head, t.tail)
        norm = " ".join(tokenize(rec.knowledge_sentence))
        assert " ".join(tokenize(t.head)) in norm and " ".join(tokenize(t.tail)) in norm


def test_check_record_rejects_ungrounded():
    t = KnowledgeTriplet("ship", "UsedFor", "transporting goods")
    rec = SampleRecord("x", "a lake", "Ship is used for transporting goods.", "q?", "ship", t)
    with pytest.raises(DatasetError):
        check_record(rec)


def test_human_questions_are_kept():
    caps = [("img1", "a ship surrounded by trees")]
    recs, _ = build_records(caps, knowledge_triplets(), 0, questions={"img1": "Why is the ship here?"})
    assert recs[0].question == "Why is the ship here?"


def test_pipeline_outputs(tmp_path):
    paths = write_fixture(tmp_path / "fx", n=12, image_size=16)
    summary = build_dataset(paths["captions"], paths["triplets"], tmp_path / "a", seed=3)
    assert (summary.train, summary.val) == (10, 2)
    build_dataset(paths["captions"], paths["triplets"], tmp_path / "b", seed=3)
    for name in ("train.jsonl", "val.jsonl", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    train, val = read_jsonl(tmp_path / "a" / "train.jsonl"), read_jsonl(tmp_path / "a" / "val.jsonl")
    assert list(train[0]) == ["image", "caption", "knowledge_sentence", "question", "answer", "triplet"]
    assert list(train[0]["triplet"]) == ["head", "relation", "tail"]
    assert {r["image"] for r in train}.isdisjoint(r["image"] for r in val)
    digest = lambda r: hashlib.sha256(json.dumps(r, sort_keys=True).encode()).hexdigest()
    assert {digest(r) for r in train}.isdisjoint(digest(r) for r in val)
    for r in train + val:
        check_record(SampleRecord.from_dict(r))
