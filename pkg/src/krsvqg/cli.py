"""Command-line entry point: ``krsvqg build-dataset | train | generate | evaluate``.

Exit codes: 0 success, 1 dataset-builder error, 2 I/O or usage error,
3 training precondition, 4 generation failure, 5 evaluation alignment.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import torch

from . import metrics
from .checkpoint import Checkpoint, CheckpointError, parse_key_values
from .dataset import DatasetError, build_dataset, read_jsonl
from .fixtures import write_fixture
from .imageio import load_image, resolve_image
from .model import KRSVQG, DecodingParams, ModelConfig
from .tokenizer import Vocabulary, build_vocab, decode, encode
from .training import (SchemaError, StagePlan, StagePreconditionError, TrainConfig,
                       encode_records, run_stage)

EXIT_DATASET, EXIT_IO, EXIT_PRECONDITION, EXIT_GENERATION, EXIT_EVALUATION = 1, 2, 3, 4, 5

logger = logging.getLogger("krsvqg")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError(EXIT_IO, "cannot read %s: %s" % (what, p))
    try:
        with open(p, "rb"):
            pass
    except OSError as exc:
        raise CommandError(EXIT_IO, "cannot read %s: %s (%s)" % (what, p, exc.strerror))
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_IO, "cannot create output directory %s (%s)" % (p, exc.strerror))
    return p


# -- build-dataset -------------------------------------------------------------

def cmd_build_dataset(args) -> int:
    captions = _require_file(args.captions, "captions file")
    triplets = _require_file(args.triplets, "triplets file")
    questions = _require_file(args.questions, "questions file") if args.questions else None
    out = _out_dir(args.out_dir)
    try:
        summary = build_dataset(captions, triplets, out, seed=args.seed, questions_path=questions)
    except DatasetError as exc:
        raise CommandError(EXIT_DATASET, str(exc))
    print(summary.to_json())
    return 0


# -- train ---------------------------------------------------------------------

MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "vocab_size"]
TRAIN_KEYS = [f.name for f in fields(TrainConfig)]


def _settings(args) -> tuple[dict, dict]:
    """Merge the config file with command-line overrides; flags win."""
    values = {}
    if args.config:
        values.update(parse_key_values(_require_file(args.config, "config file").read_text()))
    for key in MODEL_KEYS + TRAIN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if args.seed is not None:
        values["seed"] = args.seed
    unknown = set(values) - set(MODEL_KEYS) - set(TRAIN_KEYS)
    if unknown:
        raise CommandError(EXIT_IO, "unknown config keys: %s" % ", ".join(sorted(unknown)))
    model = {k: v for k, v in values.items() if k in MODEL_KEYS}
    train = {k: str(v) for k, v in values.items() if k in TRAIN_KEYS}
    return model, train


def _load_vocab(args, data_path: Path, out: Path) -> Vocabulary:
    if args.vocab and Path(args.vocab).is_file():
        return Vocabulary.load(args.vocab)
    corpus = []
    for path in [data_path] + [_require_file(p, "vocabulary corpus") for p in args.vocab_corpus]:
        for rec in read_jsonl(path):
            corpus += [rec.get(k, "") for k in ("caption", "knowledge_sentence", "question") if rec.get(k)]
    vocab = build_vocab(corpus)
    vocab.save(Path(args.vocab) if args.vocab else out / "vocab.txt")
    return vocab


def _load_images(records, image_dir: Path, size: int):
    images = []
    for rec in records:
        try:
            images.append(load_image(resolve_image(rec["image"], image_dir), size))
        except (FileNotFoundError, ValueError) as exc:
            raise CommandError(EXIT_IO, str(exc))
    return images


def cmd_train(args) -> int:
    data_path = _require_file(args.data, "training data")
    stage1 = _require_file(args.stage1_ckpt, "stage-1 checkpoint") if args.stage1_ckpt else None
    stage2 = _require_file(args.stage2_ckpt, "stage-2 checkpoint") if args.stage2_ckpt else None
    if args.stage == 3 and (stage1 is None or stage2 is None):
        missing = "--stage1-ckpt" if stage1 is None else "--stage2-ckpt"
        raise CommandError(EXIT_PRECONDITION, "stage 3 requires %s" % missing)
    out = _out_dir(args.out_dir)
    model_settings, train_settings = _settings(args)
    train_cfg = TrainConfig.from_dict(train_settings)
    vocab = _load_vocab(args, data_path, out)

    if args.stage == 3:
        try:
            base = Checkpoint.load(stage1)
        except CheckpointError as exc:
            raise CommandError(EXIT_PRECONDITION, "bad stage-1 checkpoint %s: %s" % (stage1, exc))
        cfg = base.config
        if cfg.vocab_size != len(vocab):
            raise CommandError(EXIT_PRECONDITION, "vocabulary has %d tokens but the stage-1 checkpoint "
                               "expects %d; pass the shared --vocab" % (len(vocab), cfg.vocab_size))
    else:
        cfg = ModelConfig.from_dict(dict(model_settings, vocab_size=len(vocab)))
    torch.manual_seed(train_cfg.seed)
    model = KRSVQG(cfg)
    if args.init_ckpt:
        Checkpoint.load(_require_file(args.init_ckpt, "initial checkpoint")).load_into(model)

    records = read_jsonl(data_path)
    image_dir = Path(args.image_dir) if args.image_dir else data_path.parent
    images = _load_images(records, image_dir, cfg.image_size)
    plan = StagePlan(args.stage, str(data_path), stage1, stage2)
    try:
        data = encode_records(records, images, vocab, cfg, stage=args.stage)
        result = run_stage(plan, model, data, train_cfg, out_dir=out)
    except (StagePreconditionError, SchemaError, CheckpointError) as exc:
        raise CommandError(EXIT_PRECONDITION, str(exc))
    final = result.losses[-1][2] if result.losses else float("nan")
    print("final loss: %.6f" % final)
    print("checkpoint: %s" % result.checkpoint_path)
    return 0


# -- generate ------------------------------------------------------------------

def _generate_one(model, vocab, image, knowledge, decoding):
    f_i = model.encode_image(image)
    caption, f_c = model.generate_caption(f_i, decoding)
    f_t = model.encode_knowledge(encode(knowledge, vocab, model.config.knowledge_max_len), f_i)
    question = model.generate_question(f_c, f_t, decoding)
    return decode(caption, vocab), decode(question, vocab), f_c, f_t


def cmd_generate(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    vocab_path = _require_file(args.vocab or ckpt_path.parent / "vocab.txt", "vocabulary")
    try:
        model = Checkpoint.load(ckpt_path).to_model().eval()
    except CheckpointError as exc:
        raise CommandError(EXIT_IO, "cannot load checkpoint %s: %s" % (ckpt_path, exc))
    vocab = Vocabulary.load(vocab_path)
    decoding = DecodingParams(beam_size=args.beam_size)
    size = model.config.image_size

    if args.dataset:
        data_path = _require_file(args.dataset, "dataset")
        records = read_jsonl(data_path)
        image_dir = Path(args.image_dir) if args.image_dir else data_path.parent
        images = _load_images(records, image_dir, size)
        lines = []
        try:
            for rec, img in zip(records, images):
                cap, q, _, _ = _generate_one(model, vocab, img, rec["knowledge_sentence"], decoding)
                lines.append(json.dumps({"image": rec["image"], "caption": cap, "question": q}))
        except (ValueError, RuntimeError) as exc:
            raise CommandError(EXIT_GENERATION, "generation failed: %s" % exc)
        text = "\n".join(lines) + "\n"
        if args.output:
            Path(args.output).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return 0

    image = _load_images([{"image": str(_require_file(args.image, "image"))}], Path("."), size)[0]
    try:
        cap, q, f_c, f_t = _generate_one(model, vocab, image, args.knowledge, decoding)
    except (ValueError, RuntimeError) as exc:
        raise CommandError(EXIT_GENERATION, "generation failed: %s" % exc)
    print("caption: %s" % cap)
    print("question: %s" % q)
    if args.show_shapes:
        print("f_C shape: %s" % (tuple(f_c.values.shape[1:]),))
        print("f_T shape: %s" % (tuple(f_t.values.shape[1:]),))
    return 0


# -- evaluate ------------------------------------------------------------------

def _questions_by_image(path, what):
    try:
        rows = read_jsonl(path)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CommandError(EXIT_EVALUATION, "cannot parse %s %s: %s" % (what, path, exc))
    grouped = {}
    for i, row in enumerate(rows):
        if "image" not in row or "question" not in row:
            raise CommandError(EXIT_EVALUATION, "%s line %d lacks image/question" % (what, i + 1))
        grouped.setdefault(row["image"], []).append(row["question"])
    return rows, grouped


def cmd_evaluate(args) -> int:
    pred_path = _require_file(args.predictions, "predictions")
    ref_path = _require_file(args.references, "references")
    pred_rows, preds = _questions_by_image(pred_path, "predictions")
    _, refs = _questions_by_image(ref_path, "references")
    if not pred_rows:
        raise CommandError(EXIT_EVALUATION, "predictions file is empty")
    if len(pred_rows) != len(preds):
        raise CommandError(EXIT_EVALUATION, "predictions contain duplicate image ids")
    if set(preds) != set(refs):
        missing = sorted(set(refs) ^ set(preds))[:3]
        raise CommandError(EXIT_EVALUATION, "predictions and references are not aligned "
                           "(e.g. %s)" % ", ".join(missing))
    images = sorted(preds)
    pairs = [metrics.EvalPair(preds[i][0], tuple(refs[i])) for i in images]
    try:
        report = metrics.evaluate(pairs)
    except ValueError as exc:
        raise CommandError(EXIT_EVALUATION, str(exc))
    print(report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    return 0


def cmd_make_fixture(args) -> int:
    out = _out_dir(args.out_dir)
    paths = write_fixture(out, n=args.count, image_size=args.image_size, seed=args.seed or 0,
                          domain=args.domain, image_format=args.format)
    for name, path in paths.items():
        print("%s: %s" % (name, path))
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out-dir", default=".", help="where outputs are written")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="krsvqg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", parents=[common], help="build train/val records")
    p.add_argument("--captions", required=True, help="image_ref<TAB>caption file")
    p.add_argument("--triplets", required=True, help="relation<TAB>head<TAB>tail file")
    p.add_argument("--questions", help="optional image_ref<TAB>question file")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--data", required=True, help="JSONL records")
    p.add_argument("--image-dir", help="directory image refs are relative to")
    p.add_argument("--vocab", help="vocabulary file; built and written here if missing")
    p.add_argument("--vocab-corpus", nargs="*", default=[], help="extra JSONL files for the vocabulary")
    p.add_argument("--stage1-ckpt", help="vision weights for stage 3")
    p.add_argument("--stage2-ckpt", help="language weights for stage 3")
    p.add_argument("--init-ckpt", help="initialize all weights from this checkpoint")
    kinds = {f.name: f.type for f in fields(ModelConfig)} | {f.name: f.type for f in fields(TrainConfig)}
    for key in MODEL_KEYS + TRAIN_KEYS:
        kind = kinds[key]
        if key == "seed":
            continue
        if "bool" in kind:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           type=lambda s: s.lower() in ("1", "true", "yes", "on"))
        elif "int" in kind:
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=int, default=None)
        elif "float" in kind:
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=float, default=None)
        else:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="generate a caption and a question")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="defaults to vocab.txt next to the checkpoint")
    p.add_argument("--image")
    p.add_argument("--knowledge", help="knowledge sentence")
    p.add_argument("--dataset", help="JSONL records to generate for, instead of --image")
    p.add_argument("--image-dir")
    p.add_argument("--output", help="write dataset predictions here")
    p.add_argument("--beam-size", type=int, default=1, help="1 means greedy")
    p.add_argument("--show-shapes", action="store_true", help="print f_C / f_T shapes")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against references")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--csv", help="also write a header + row CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-fixture", parents=[common], help="write synthetic fixture inputs")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--domain", choices=("remote", "natural"), default="remote")
    p.add_argument("--format", choices=("npy", "ppm"), default="npy")
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "generate" and not args.dataset:
        if not args.image:
            parser.error("generate needs --image (or --dataset)")
        if not args.knowledge:
            parser.error("generate needs --knowledge: a knowledge sentence is a required input")
    if args.command == "build-dataset" and args.seed is None:
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
