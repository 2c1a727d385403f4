"""Input validation helpers shared by the model, trainer and estimator."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .tokenizer import PAD, TokenSequence


def check_image(image, image_size: int) -> np.ndarray:
    """Return ``image`` as a float array of shape (image_size, image_size, 3) in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape != (image_size, image_size, 3):
        raise ValueError("expected image of shape (%d, %d, 3), got %s"
                         % (image_size, image_size, arr.shape))
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def check_images(images, image_size: int) -> torch.Tensor:
    """Accept one image or a batch, as numpy or torch; return a (B, H, W, 3) tensor."""
    if isinstance(images, torch.Tensor):
        t = images
    else:
        t = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or tuple(t.shape[1:]) != (image_size, image_size, 3):
        raise ValueError("expected image of shape (%d, %d, 3), got %s"
                         % (image_size, image_size, tuple(t.shape)))
    if not torch.isfinite(t).all():
        raise ValueError("image contains non-finite values")
    if t.min() < 0 or t.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return t


def as_id_tensor(ids, max_len: int | None = None, name: str = "tokens") -> torch.Tensor:
    """Coerce a TokenSequence, id list or batch of them into a (B, L) long tensor."""
    if isinstance(ids, TokenSequence):
        t = torch.tensor([ids.ids], dtype=torch.long)
    elif isinstance(ids, torch.Tensor):
        t = ids.long()
    else:
        seqs = list(ids)
        if seqs and isinstance(seqs[0], TokenSequence):
            t = torch.tensor([s.ids for s in seqs], dtype=torch.long)
        elif seqs and isinstance(seqs[0], (list, tuple)):
            t = torch.tensor(seqs, dtype=torch.long)
        else:
            t = torch.tensor([seqs], dtype=torch.long)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if t.dim() != 2 or t.shape[1] == 0:
        raise ValueError("%s must be a non-empty (batch, length) id array" % name)
    if max_len is not None and t.shape[1] > max_len:
        raise ValueError("%s length %d exceeds maximum %d" % (name, t.shape[1], max_len))
    if (t < 0).any():
        raise ValueError("%s contain negative ids" % name)
    return t


def check_vocab_range(ids: torch.Tensor, vocab_size: int, name: str = "tokens") -> None:
    if (ids >= vocab_size).any():
        raise ValueError("%s contain an id out of range for vocabulary size %d" % (name, vocab_size))


def check_records(records: Sequence[dict], fields: Sequence[str]) -> list[dict]:
    """Verify each record carries the named non-empty string fields."""
    records = list(records)
    for i, rec in enumerate(records):
        for f in fields:
            value = rec.get(f) if isinstance(rec, dict) else getattr(rec, f, None)
            if not isinstance(value, str) or not value.strip():
                raise ValueError("record %d is missing field %r" % (i, f))
    return records


def padding_mask(ids: torch.Tensor) -> torch.Tensor:
    return ids == PAD
