"""Token-level cross-entropy, decoupled-weight-decay Adam and the three-stage schedule.

Stage 1 trains the vision module on captions. Stage 2 trains the whole model
on question generation over general-domain data. Stage 3 starts from the
vision module of a stage-1 checkpoint and the language module of a stage-2
checkpoint and fine-tunes everything on question generation.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint, compose
from .model import COMPONENTS, KRSVQG, VISION_COMPONENTS
from .tokenizer import PAD, Vocabulary, encode

logger = logging.getLogger(__name__)

STAGE_NAMES = {1: "caption pretraining", 2: "general-domain question pretraining",
               3: "remote-sensing question fine-tuning"}
FULL_RECORD_FIELDS = ("image", "caption", "knowledge_sentence", "question")


class StagePreconditionError(RuntimeError):
    pass


class SchemaError(ValueError):
    pass


# -- losses -------------------------------------------------------------------

def sequence_loss(logits: torch.Tensor, target) -> torch.Tensor:
    """Mean negative log-likelihood of ``target`` ids over non-PAD positions.

    ``logits`` is (length, vocab) or (batch, length, vocab) and must align
    row-for-row with ``target``.
    """
    target = torch.as_tensor(list(target.ids) if hasattr(target, "ids") else target)
    target = target.to(logits.device).long()
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    if target.dim() == 1:
        target = target.unsqueeze(0)
    if logits.shape[:2] != target.shape:
        raise ValueError("logits rows %s do not match target shape %s"
                         % (tuple(logits.shape[:2]), tuple(target.shape)))
    keep = target != PAD
    if not keep.any():
        raise ValueError("empty target")
    logp = logits.log_softmax(-1).gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return -(logp * keep).sum() / keep.sum()


caption_loss = sequence_loss
question_loss = sequence_loss


def next_token_loss(logits: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """Loss of a teacher-forced pass: position n predicts token n + 1.

    ``ids`` may carry extra all-PAD columns beyond the logits' length.
    """
    ids = torch.as_tensor(list(ids.ids) if hasattr(ids, "ids") else ids).to(logits.device)
    if ids.dim() == 1:
        ids = ids.unsqueeze(0)
    if (ids[:, logits.shape[1]:] != PAD).any():
        raise ValueError("target ids extend beyond the logits")
    return sequence_loss(logits[:, :-1], ids[:, 1:logits.shape[1]])


# -- optimizer ----------------------------------------------------------------

def adamw_update(param: torch.Tensor, grad: torch.Tensor, state: dict, lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place AdamW update of ``param``; ``state`` holds step/exp_avg/exp_avg_sq."""
    if not state:
        state["step"] = 0
        state["exp_avg"] = torch.zeros_like(param)
        state["exp_avg_sq"] = torch.zeros_like(param)
    state["step"] += 1
    t = state["step"]
    beta1, beta2 = betas
    m, v = state["exp_avg"], state["exp_avg_sq"]
    m.mul_(beta1).add_(grad, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    if weight_decay:
        param.mul_(1 - lr * weight_decay)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class AdamW(torch.optim.Optimizer):
    """Adam with weight decay applied directly to the weights.

    Parameter groups may carry a ``names`` list, used to name the culprit
    when a gradient is not finite.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            names = group.get("names") or [None] * len(group["params"])
            for p, name in zip(group["params"], names):
                if p.grad is None:
                    continue
                if not torch.isfinite(p.grad).all():
                    raise FloatingPointError("non-finite gradient for parameter %s"
                                             % (name or tuple(p.shape),))
                adamw_update(p, p.grad, self.state[p], group["lr"], group["betas"],
                             group["eps"], group["weight_decay"])
        return loss


def decay_groups(named_params, weight_decay: float) -> list[dict]:
    """Split parameters into decayed weights and exempt biases / layer-norm terms."""
    decay, exempt = {"params": [], "names": []}, {"params": [], "names": []}
    for name, p in named_params:
        if not p.requires_grad:
            continue
        group = exempt if p.dim() <= 1 else decay
        group["params"].append(p)
        group["names"].append(name)
    decay["weight_decay"] = weight_decay
    exempt["weight_decay"] = 0.0
    return [g for g in (decay, exempt) if g["params"]]


# -- configuration ------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: Optional[float] = None
    weight_decay: float = 0.05
    batch_size: int = 8
    epochs: int = 10
    max_steps: Optional[int] = None
    seed: int = 0
    schedule: str = "cosine"
    grad_clip: float = 1.0
    freeze_vision: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")

    def lr_for(self, stage: int) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-5 if stage == 3 else 1e-4

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in d.items():
            if key not in kinds:
                raise KeyError("unknown training config key %r" % key)
            out[key] = _coerce(value, kinds[key])
        return cls(**out)


def _coerce(value, kind: str):
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", ""):
        return None
    if "bool" in kind:
        return value.lower() in ("1", "true", "yes", "on")
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return value


@dataclass
class StagePlan:
    stage: int
    dataset: Optional[str] = None
    stage1_checkpoint: Union[Checkpoint, str, Path, None] = None
    stage2_checkpoint: Union[Checkpoint, str, Path, None] = None

    def __post_init__(self):
        if self.stage not in STAGE_NAMES:
            raise ValueError("stage must be 1, 2 or 3, got %r" % (self.stage,))

    @property
    def loss(self) -> str:
        return "caption" if self.stage == 1 else "question"

    @property
    def components(self) -> tuple[str, ...]:
        return VISION_COMPONENTS if self.stage == 1 else COMPONENTS


# -- data ---------------------------------------------------------------------

@dataclass
class EncodedData:
    images: torch.Tensor
    captions: torch.Tensor
    knowledge: Optional[torch.Tensor] = None
    questions: Optional[torch.Tensor] = None

    def __len__(self):
        return self.images.shape[0]

    def batch(self, index: torch.Tensor) -> "EncodedData":
        def take(t):
            if t is None:
                return None
            t = t[index]
            # drop all-PAD columns beyond the longest sequence in the batch
            width = int((t != PAD).sum(1).max())
            return t[:, :width]

        return EncodedData(self.images[index], take(self.captions), take(self.knowledge),
                           take(self.questions))


def encode_records(records: Sequence[dict], images, vocab: Vocabulary, config,
                   stage: int = 3) -> EncodedData:
    """Tokenize records for ``stage``; ``images`` align with ``records``."""
    records = list(records)
    if not records:
        raise SchemaError("no training records")
    needed = ("caption",) if stage == 1 else FULL_RECORD_FIELDS[1:]
    for i, rec in enumerate(records):
        missing = [f for f in needed if not isinstance(rec.get(f), str) or not rec.get(f)]
        if missing:
            raise SchemaError("record %d lacks field(s) %s required by stage %d"
                              % (i, ", ".join(missing), stage))
    imgs = torch.as_tensor(np.stack([np.asarray(im, dtype=np.float32) for im in images]))
    if imgs.shape[0] != len(records):
        raise SchemaError("%d images for %d records" % (imgs.shape[0], len(records)))

    def tok(field_name, max_len):
        return torch.tensor([encode(r[field_name], vocab, max_len).ids for r in records])

    caps = tok("caption", config.caption_max_len)
    if stage == 1:
        return EncodedData(imgs, caps)
    return EncodedData(imgs, caps, tok("knowledge_sentence", config.knowledge_max_len),
                       tok("question", config.question_max_len))


# -- stages -------------------------------------------------------------------

@dataclass
class StageResult:
    checkpoint: Checkpoint
    losses: list = field(default_factory=list)
    checkpoint_path: Optional[Path] = None


def _as_checkpoint(ref, label: str) -> Checkpoint:
    if ref is None:
        raise StagePreconditionError("stage 3 requires a %s checkpoint" % label)
    if isinstance(ref, Checkpoint):
        return ref
    path = Path(ref)
    if not path.is_file():
        raise StagePreconditionError("%s checkpoint not found: %s" % (label, path))
    return Checkpoint.load(path)


def initialize_stage(plan: StagePlan, model: KRSVQG) -> None:
    """For stage 3, load vision weights from stage 1 and language weights from stage 2."""
    if plan.stage != 3:
        return
    ckpt1 = _as_checkpoint(plan.stage1_checkpoint, "stage-1")
    ckpt2 = _as_checkpoint(plan.stage2_checkpoint, "stage-2")
    compose(ckpt1, ckpt2).load_into(model)


def stage_loss(model: KRSVQG, batch: EncodedData, stage: int) -> torch.Tensor:
    f_i = model.encode_image(batch.images)
    f_c, cap_logits = model.caption_forward(f_i, batch.captions)
    if stage == 1:
        return next_token_loss(cap_logits, batch.captions)
    f_t = model.encode_knowledge(batch.knowledge, f_i)
    q_logits = model.question_forward(f_c, f_t, batch.questions)
    return next_token_loss(q_logits, batch.questions)


def write_loss_curve(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "stage", "loss"])
        for step, stage, loss in losses:
            writer.writerow([step, stage, repr(float(loss))])


def run_stage(plan: StagePlan, model: KRSVQG, data: EncodedData, config: TrainConfig,
              out_dir=None) -> StageResult:
    """Train ``model`` for one stage and return its final checkpoint and loss curve."""
    stage = plan.stage
    if stage != 1 and (data.knowledge is None or data.questions is None):
        raise SchemaError("stage %d needs knowledge sentences and questions" % stage)
    initialize_stage(plan, model)

    trainable = set(plan.components)
    if stage == 3 and config.freeze_vision:
        trainable -= set(VISION_COMPONENTS)
    for name, p in model.named_parameters():
        p.requires_grad_(name.split(".", 1)[0] in trainable)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    lr = config.lr_for(stage)
    optimizer = AdamW(decay_groups(named, config.weight_decay), lr=lr,
                      betas=(config.beta1, config.beta2), eps=config.eps,
                      weight_decay=config.weight_decay)

    n = len(data)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / ("stage%d.ckpt" % stage) if out_dir else None
    curve_path = out_dir / ("stage%d_loss.csv" % stage) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    logger.info("stage %d (%s): %d samples, %d steps, lr %g", stage, STAGE_NAMES[stage], n, total, lr)
    losses = []
    step = 0
    model.train()
    while step < total:
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            if step >= total:
                break
            batch = data.batch(order[start:start + config.batch_size])
            if config.schedule == "cosine":
                cur = lr * 0.5 * (1 + math.cos(math.pi * step / max(total, 1)))
            else:
                cur = lr
            for group in optimizer.param_groups:
                group["lr"] = cur
            optimizer.zero_grad(set_to_none=True)
            loss = stage_loss(model, batch, stage)
            loss.backward()
            if config.grad_clip:
                nn.utils.clip_grad_norm_([p for _, p in named], config.grad_clip)
            optimizer.step()
            step += 1
            losses.append((step, stage, float(loss.detach())))
        if out_dir:
            Checkpoint.from_model(model).save(ckpt_path)
            write_loss_curve(curve_path, losses)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    result = StageResult(Checkpoint.from_model(model), losses, ckpt_path)
    if out_dir:
        result.checkpoint.save(ckpt_path)
        write_loss_curve(curve_path, losses)
    return result
