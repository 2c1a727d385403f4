"""scikit-learn style wrapper around the model and the staged trainer."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .checkpoint import Checkpoint
from .model import KRSVQG, DecodingParams, ModelConfig
from .tokenizer import build_vocab, decode, encode
from .training import StagePlan, TrainConfig, encode_records, run_stage
from .validation import check_image, check_records


class KnowledgeQuestionGenerator(BaseEstimator):
    """Generate knowledge-aware questions from (image, knowledge sentence) pairs.

    ``fit`` runs caption pretraining on the training samples, optional
    question pretraining on ``pretrain`` samples, then question fine-tuning
    starting from the composed checkpoints. Samples are dicts with an
    ``image`` array in [0, 1] and the text fields ``caption``,
    ``knowledge_sentence`` and ``question``; ``predict`` only needs
    ``image`` and ``knowledge_sentence``.
    """

    def __init__(self, image_size=64, patch_size=16, width=128, heads=4, blocks=2,
                 caption_max_len=40, knowledge_max_len=30, question_max_len=30,
                 learning_rate=1e-4, finetune_learning_rate=1e-5, weight_decay=0.05,
                 batch_size=8, caption_epochs=10, pretrain_epochs=10, question_epochs=10,
                 schedule="cosine", freeze_vision=False, beam_size=1, min_freq=1,
                 random_state=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.width = width
        self.heads = heads
        self.blocks = blocks
        self.caption_max_len = caption_max_len
        self.knowledge_max_len = knowledge_max_len
        self.question_max_len = question_max_len
        self.learning_rate = learning_rate
        self.finetune_learning_rate = finetune_learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.caption_epochs = caption_epochs
        self.pretrain_epochs = pretrain_epochs
        self.question_epochs = question_epochs
        self.schedule = schedule
        self.freeze_vision = freeze_vision
        self.beam_size = beam_size
        self.min_freq = min_freq
        self.random_state = random_state

    def _model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, image_size=self.image_size, patch_size=self.patch_size,
                           width=self.width, heads=self.heads, image_blocks=self.blocks,
                           caption_blocks=self.blocks, text_blocks=self.blocks,
                           question_blocks=self.blocks, caption_max_len=self.caption_max_len,
                           knowledge_max_len=self.knowledge_max_len,
                           question_max_len=self.question_max_len)

    def _train_config(self, lr: float, epochs: int) -> TrainConfig:
        return TrainConfig(learning_rate=lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           epochs=epochs, seed=self.random_state, schedule=self.schedule,
                           freeze_vision=self.freeze_vision)

    def _samples(self, X, y=None, fields=("caption", "knowledge_sentence", "question")):
        X = [dict(x) for x in X]
        if y is not None:
            if len(y) != len(X):
                raise ValueError("X has %d samples but y has %d" % (len(X), len(y)))
            for x, q in zip(X, y):
                x["question"] = q
        check_records(X, fields)
        images = [check_image(x["image"], self.image_size) for x in X]
        return X, images

    def fit(self, X, y=None, pretrain: Optional[Sequence[dict]] = None):
        samples, images = self._samples(X, y)
        extra, extra_images = self._samples(pretrain) if pretrain else ([], [])
        corpus = [s[k] for s in samples + extra for k in ("caption", "knowledge_sentence", "question")]
        self.vocab_ = build_vocab(corpus, self.min_freq)
        torch.manual_seed(self.random_state)
        cfg = self._model_config(len(self.vocab_))
        model = KRSVQG(cfg)
        self.loss_curves_ = {}

        caption_data = encode_records(samples, images, self.vocab_, cfg, stage=1)
        r1 = run_stage(StagePlan(1), model, caption_data,
                       self._train_config(self.learning_rate, self.caption_epochs))
        self.loss_curves_[1] = r1.losses
        if extra:
            r2 = run_stage(StagePlan(2), model, encode_records(extra, extra_images, self.vocab_, cfg),
                           self._train_config(self.learning_rate, self.pretrain_epochs))
            self.loss_curves_[2] = r2.losses
            stage2 = r2.checkpoint
        else:
            stage2 = Checkpoint.from_model(model)
        r3 = run_stage(StagePlan(3, stage1_checkpoint=r1.checkpoint, stage2_checkpoint=stage2),
                       model, encode_records(samples, images, self.vocab_, cfg),
                       self._train_config(self.finetune_learning_rate, self.question_epochs))
        self.loss_curves_[3] = r3.losses
        self.model_ = model.eval()
        return self

    def _generate(self, X):
        check_is_fitted(self, ["model_", "vocab_"])
        samples, images = self._samples(X, fields=("knowledge_sentence",))
        decoding = DecodingParams(beam_size=self.beam_size)
        cfg = self.model_.config
        out = []
        with torch.no_grad():
            for s, img in zip(samples, images):
                f_i = self.model_.encode_image(img)
                cap, f_c = self.model_.generate_caption(f_i, decoding)
                f_t = self.model_.encode_knowledge(
                    encode(s["knowledge_sentence"], self.vocab_, cfg.knowledge_max_len), f_i)
                q = self.model_.generate_question(f_c, f_t, decoding)
                out.append((decode(cap, self.vocab_), decode(q, self.vocab_)))
        return out

    def transform(self, X) -> list[str]:
        """Generated captions for the images in ``X``."""
        return [c for c, _ in self._generate(X)]

    def predict(self, X) -> list[str]:
        """Generated questions for the (image, knowledge sentence) pairs in ``X``."""
        return [q for _, q in self._generate(X)]

    def score(self, X, y=None) -> float:
        """Corpus BLEU-4 of the predicted questions against ``y`` (or X's ``question`` field)."""
        refs = list(y) if y is not None else [x["question"] for x in X]
        return metrics.bleu(metrics.make_pairs(self.predict(X), refs), 4)


def as_samples(records: Sequence[dict], images: dict) -> list[dict]:
    """Attach image arrays (keyed by the records' ``image`` field) to records."""
    return [dict(r, image=np.asarray(images[r["image"]])) for r in records]


__all__ = ["KnowledgeQuestionGenerator", "as_samples"]
