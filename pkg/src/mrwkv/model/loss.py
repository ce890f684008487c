"""Teacher-forced cross-entropy and gradient collection.

The mask marks target positions: mask[t] true means token t is
predicted from the prefix before it. Position 0 has no prefix and is
always ignored.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from .rwkv7 import RWKV7, InitialState, ModelState


def span_mask(length: int, span: tuple[int, int]) -> Tensor:
    """Mask selecting the tokens inside an inclusive span, excluding the
    span's first token (it is input, not target)."""
    lo, hi = span
    if not 0 <= lo <= hi < length:
        raise ValueError(f"span {span} outside sequence of length {length}")
    mask = torch.zeros(length, dtype=torch.bool)
    mask[lo + 1 : hi + 1] = True
    return mask


def sequence_loss(
    model: RWKV7,
    ids: Tensor,
    mask: Tensor,
    state: ModelState | None = None,
) -> Tensor:
    """Mean cross-entropy over masked target positions."""
    if ids.shape != mask.shape:
        raise ValueError(f"ids {tuple(ids.shape)} and mask {tuple(mask.shape)} differ")
    effective = mask.clone()
    effective[:, 0] = False
    if not bool(effective.any()):
        raise ValueError("mask selects no predictable positions")
    logits, _ = model(ids, state)
    select = effective[:, 1:].reshape(-1)
    pred = logits[:, :-1].reshape(-1, logits.shape[-1])[select]
    target = ids[:, 1:].reshape(-1)[select]
    return F.cross_entropy(pred, target)


def loss_and_grads(
    model: RWKV7,
    ids: Tensor,
    mask: Tensor,
    initial_state: InitialState | None = None,
) -> tuple[float, dict[str, Tensor], dict[str, Tensor]]:
    """One backward pass; returns (loss, parameter grads, initial-state
    grads), with grads keyed by parameter name."""
    model.zero_grad(set_to_none=True)
    if initial_state is not None:
        initial_state.zero_grad(set_to_none=True)
    state = initial_state.state(ids.shape[0]) if initial_state is not None else None
    loss = sequence_loss(model, ids, mask, state)
    loss.backward()
    param_grads = {
        name: p.grad.detach().clone()
        for name, p in model.named_parameters()
        if p.grad is not None
    }
    state_grads = {}
    if initial_state is not None:
        state_grads = {
            name: p.grad.detach().clone()
            for name, p in initial_state.named_parameters()
            if p.grad is not None
        }
    return float(loss.detach()), param_grads, state_grads
