"""RWKV-7 network.

Linear-attention blocks keep a per-head matrix memory that is updated
each step by a diagonal decay plus a rank-1 delta-rule correction, and
are interleaved with squared-relu channel mixing. The recurrence is
evaluated one step at a time in both training and generation, so the
two paths share arithmetic and the state footprint is constant in
sequence length. The exact sublayer parametrization and initialization
are documented in docs/design-rwkv7.md.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig

# decay = exp(-exp(-1/2) * sigmoid(z)) lies in (exp(-0.6065), 1)
DECAY_SCALE = 0.606531


@dataclass
class ModelState:
    """Recurrent state: one token-shift vector per mixing sublayer and
    one matrix memory per head. Constant size in sequence length."""

    shift_att: Tensor  # [L, B, d]
    shift_ffn: Tensor  # [L, B, d]
    wkv: Tensor  # [L, B, H, N, N]

    @property
    def batch_size(self) -> int:
        return self.shift_att.shape[1]

    def detached(self) -> "ModelState":
        return ModelState(
            self.shift_att.detach(), self.shift_ffn.detach(), self.wkv.detach()
        )

    def clone(self) -> "ModelState":
        return ModelState(
            self.shift_att.detach().clone(),
            self.shift_ffn.detach().clone(),
            self.wkv.detach().clone(),
        )

    def require_finite(self) -> None:
        for name, t in (
            ("shift_att", self.shift_att),
            ("shift_ffn", self.shift_ffn),
            ("wkv", self.wkv),
        ):
            if not torch.isfinite(t).all():
                raise ValueError(f"non-finite entries in state tensor {name}")


def zero_state(
    cfg: ModelConfig,
    batch_size: int,
    *,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str = "cpu",
) -> ModelState:
    L, d, H, N = cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.head_size
    kw = {"dtype": dtype, "device": device}
    return ModelState(
        shift_att=torch.zeros(L, batch_size, d, **kw),
        shift_ffn=torch.zeros(L, batch_size, d, **kw),
        wkv=torch.zeros(L, batch_size, H, N, N, **kw),
    )


def _orthogonal(rows: int, cols: int, gain: float) -> Tensor:
    w = torch.empty(rows, cols)
    nn.init.orthogonal_(w, gain=gain)
    return w


class TimeMix(nn.Module):
    def __init__(self, cfg: ModelConfig, layer_id: int) -> None:
        super().__init__()
        d, H, N = cfg.d_model, cfg.n_heads, cfg.head_size
        self.layer_id = layer_id
        self.n_heads = H
        self.head_size = N

        depth = layer_id / max(1, cfg.n_layers - 1)  # 0 at first layer, 1 at last
        fade = 1.0 - layer_id / cfg.n_layers  # 1 at first layer, ~0 at last
        chan = torch.arange(d) / d
        self.x_r = nn.Parameter(1.0 - chan ** (0.2 * fade))
        self.x_w = nn.Parameter(1.0 - chan ** (0.9 * fade))
        self.x_k = nn.Parameter(1.0 - (chan ** (0.9 * fade) + 0.4 * depth))
        self.x_v = nn.Parameter(1.0 - (chan ** (0.4 * fade) + 0.6 * depth))
        self.x_a = nn.Parameter(1.0 - chan ** (0.9 * fade))
        self.x_g = nn.Parameter(1.0 - chan ** (0.2 * fade))

        decay = torch.tensor(
            [-7.0 + 5.0 * (n / max(1, d - 1)) ** (0.85 + depth**0.5) for n in range(d)]
        )
        self.w0 = nn.Parameter(decay + 0.5)
        self.w1 = nn.Parameter(torch.zeros(d, cfg.decay_rank))
        self.w2 = nn.Parameter(_orthogonal(cfg.decay_rank, d, 0.1))
        self.a0 = nn.Parameter(torch.zeros(d))
        self.a1 = nn.Parameter(torch.zeros(d, cfg.iclr_rank))
        self.a2 = nn.Parameter(_orthogonal(cfg.iclr_rank, d, 0.1))
        if layer_id > 0:
            self.v0 = nn.Parameter(torch.ones(d))
            self.v1 = nn.Parameter(torch.zeros(d, cfg.value_rank))
            self.v2 = nn.Parameter(_orthogonal(cfg.value_rank, d, 0.1))
        self.g1 = nn.Parameter(torch.zeros(d, cfg.gate_rank))
        self.g2 = nn.Parameter(_orthogonal(cfg.gate_rank, d, 0.1))
        self.k_k = nn.Parameter(torch.full((d,), 0.85))
        self.k_a = nn.Parameter(torch.ones(d))
        self.r_k = nn.Parameter(torch.zeros(H, N))

        self.receptance = nn.Linear(d, d, bias=False)
        self.key = nn.Linear(d, d, bias=False)
        self.value = nn.Linear(d, d, bias=False)
        self.output = nn.Linear(d, d, bias=False)
        self.ln_x = nn.GroupNorm(H, d, eps=64e-5)
        bound = 0.5 / d**0.5
        nn.init.uniform_(self.receptance.weight, -bound, bound)
        nn.init.uniform_(self.key.weight, -0.1 * bound, 0.1 * bound)
        nn.init.uniform_(self.value.weight, -bound, bound)
        nn.init.zeros_(self.output.weight)

    def forward(
        self, x: Tensor, shift_prev: Tensor, wkv: Tensor, v_first: Tensor | None
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        B, T, d = x.shape
        H, N = self.n_heads, self.head_size
        prev = torch.cat([shift_prev.unsqueeze(1), x[:, :-1]], dim=1)
        dx = prev - x
        xr = x + dx * self.x_r
        xw = x + dx * self.x_w
        xk = x + dx * self.x_k
        xv = x + dx * self.x_v
        xa = x + dx * self.x_a
        xg = x + dx * self.x_g

        r = self.receptance(xr)
        w = torch.exp(-DECAY_SCALE * torch.sigmoid(self.w0 + torch.tanh(xw @ self.w1) @ self.w2))
        k = self.key(xk)
        v = self.value(xv)
        if self.layer_id == 0:
            v_first = v
        else:
            v = v + (v_first - v) * torch.sigmoid(self.v0 + (xv @ self.v1) @ self.v2)
        iclr = torch.sigmoid(self.a0 + (xa @ self.a1) @ self.a2)
        g = torch.sigmoid(xg @ self.g1) @ self.g2
        kk = F.normalize((k * self.k_k).view(B, T, H, N), dim=-1).view(B, T, d)
        k = k * (1.0 + (iclr - 1.0) * self.k_a)

        rh = r.view(B, T, H, N)
        wh = w.view(B, T, H, N)
        kh = k.view(B, T, H, N)
        vh = v.view(B, T, H, N)
        kkh = kk.view(B, T, H, N)
        ah = iclr.view(B, T, H, N)
        outs = []
        for t in range(T):
            erase = kkh[:, t].unsqueeze(-1) @ (kkh[:, t] * ah[:, t]).unsqueeze(-2)
            write = vh[:, t].unsqueeze(-1) @ kh[:, t].unsqueeze(-2)
            wkv = wkv * wh[:, t].unsqueeze(-2) - wkv @ erase + write
            outs.append((wkv @ rh[:, t].unsqueeze(-1)).squeeze(-1))
        y = torch.stack(outs, dim=1)  # [B, T, H, N]
        y = self.ln_x(y.reshape(B * T, d)).view(B, T, d)
        y = y + ((rh * kh * self.r_k).sum(-1, keepdim=True) * vh).view(B, T, d)
        y = self.output(y * g)
        return y, x[:, -1], wkv, v_first


class ChannelMix(nn.Module):
    def __init__(self, cfg: ModelConfig, layer_id: int) -> None:
        super().__init__()
        fade = 1.0 - layer_id / cfg.n_layers
        chan = torch.arange(cfg.d_model) / cfg.d_model
        self.x_k = nn.Parameter(1.0 - chan ** (fade**4))
        self.key = nn.Linear(cfg.d_model, cfg.d_ffn, bias=False)
        self.value = nn.Linear(cfg.d_ffn, cfg.d_model, bias=False)
        bound = 0.5 / cfg.d_model**0.5
        nn.init.uniform_(self.key.weight, -bound, bound)
        nn.init.zeros_(self.value.weight)

    def forward(self, x: Tensor, shift_prev: Tensor) -> tuple[Tensor, Tensor]:
        prev = torch.cat([shift_prev.unsqueeze(1), x[:, :-1]], dim=1)
        kx = x + (prev - x) * self.x_k
        h = torch.relu(self.key(kx)) ** 2
        return self.value(h), x[:, -1]


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, layer_id: int) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.att = TimeMix(cfg, layer_id)
        self.ffn = ChannelMix(cfg, layer_id)

    def forward(
        self,
        x: Tensor,
        shift_att: Tensor,
        wkv: Tensor,
        shift_ffn: Tensor,
        v_first: Tensor | None,
    ) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        a, new_shift_att, new_wkv, v_first = self.att(self.ln1(x), shift_att, wkv, v_first)
        x = x + a
        f, new_shift_ffn = self.ffn(self.ln2(x), shift_ffn)
        x = x + f
        return x, new_shift_att, new_wkv, new_shift_ffn, v_first


class RWKV7(nn.Module):
    """Embedding, stacked mixing blocks, output head."""

    def __init__(
        self,
        cfg: ModelConfig,
        *,
        dtype: torch.dtype = torch.float32,
        seed: int | None = None,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        if seed is None:
            self._build(cfg)
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                self._build(cfg)
        self.to(dtype)

    def _build(self, cfg: ModelConfig) -> None:
        self.emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        nn.init.uniform_(self.emb.weight, -1e-4, 1e-4)
        self.ln0 = nn.LayerNorm(cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg, i) for i in range(cfg.n_layers))
        self.ln_out = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        gain = 0.5 * max(1.0, (cfg.vocab_size / cfg.d_model)) ** 0.5
        nn.init.orthogonal_(self.head.weight, gain=gain)

    @property
    def dtype(self) -> torch.dtype:
        return self.emb.weight.dtype

    @property
    def device(self) -> torch.device:
        return self.emb.weight.device

    def init_state(self, batch_size: int) -> ModelState:
        return zero_state(self.cfg, batch_size, dtype=self.dtype, device=self.device)

    def forward(
        self, ids: Tensor, state: ModelState | None = None
    ) -> tuple[Tensor, ModelState]:
        """Teacher-forced evaluation. ids is [B, T] integer; returns
        logits [B, T, vocab] and the state after the last token."""
        if ids.dim() != 2:
            raise ValueError(f"ids must be [batch, time], got shape {tuple(ids.shape)}")
        B, T = ids.shape
        if state is None:
            state = self.init_state(B)
        if state.batch_size != B:
            raise ValueError(f"state batch {state.batch_size} != input batch {B}")
        if T == 0:
            logits = torch.zeros(B, 0, self.cfg.vocab_size, dtype=self.dtype, device=self.device)
            return logits, state
        if bool((ids < 0).any()) or bool((ids >= self.cfg.vocab_size).any()):
            raise ValueError("token id out of range")

        x = self.ln0(self.emb(ids))
        v_first: Tensor | None = None
        shift_att, shift_ffn, wkvs = [], [], []
        for i, block in enumerate(self.blocks):
            x, sa, wkv, sf, v_first = block(
                x, state.shift_att[i], state.wkv[i], state.shift_ffn[i], v_first
            )
            shift_att.append(sa)
            shift_ffn.append(sf)
            wkvs.append(wkv)
        logits = self.head(self.ln_out(x))
        new_state = ModelState(
            torch.stack(shift_att), torch.stack(shift_ffn), torch.stack(wkvs)
        )
        return logits, new_state

    def forward_step(
        self, ids: Tensor, state: ModelState | None = None
    ) -> tuple[Tensor, ModelState]:
        """Single-token evaluation. ids is [B] integer; returns logits
        [B, vocab] and the advanced state."""
        if ids.dim() != 1:
            raise ValueError(f"ids must be [batch], got shape {tuple(ids.shape)}")
        logits, new_state = self.forward(ids.unsqueeze(1), state)
        return logits[:, 0], new_state


class InitialState(nn.Module):
    """Tunable initial recurrent state. Only the per-head matrix memory
    is trained by default; token-shift vectors opt in."""

    def __init__(
        self,
        cfg: ModelConfig,
        *,
        tune_shift: bool = False,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.tune_shift = tune_shift
        L, d, H, N = cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.head_size
        self.wkv = nn.Parameter(torch.zeros(L, 1, H, N, N, dtype=dtype))
        if tune_shift:
            self.shift_att = nn.Parameter(torch.zeros(L, 1, d, dtype=dtype))
            self.shift_ffn = nn.Parameter(torch.zeros(L, 1, d, dtype=dtype))

    def state(self, batch_size: int) -> ModelState:
        L, d = self.cfg.n_layers, self.cfg.d_model
        H, N = self.cfg.n_heads, self.cfg.head_size
        wkv = self.wkv.expand(L, batch_size, H, N, N)
        if self.tune_shift:
            shift_att = self.shift_att.expand(L, batch_size, d)
            shift_ffn = self.shift_ffn.expand(L, batch_size, d)
        else:
            zeros = torch.zeros(
                L, batch_size, d, dtype=self.wkv.dtype, device=self.wkv.device
            )
            shift_att = shift_ffn = zeros
        return ModelState(shift_att, shift_ffn, wkv)


def lora_target_shapes(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    """Adapter targets: every time-mix and channel-mix projection, as
    (qualified name, in features, out features)."""
    d, f = cfg.d_model, cfg.d_ffn
    out = []
    for i in range(cfg.n_layers):
        for name, m, n in (
            ("att.receptance", d, d),
            ("att.key", d, d),
            ("att.value", d, d),
            ("att.output", d, d),
            ("ffn.key", d, f),
            ("ffn.value", f, d),
        ):
            out.append((f"blocks.{i}.{name}", m, n))
    return out


def _resolve_cfg(obj) -> ModelConfig:
    if isinstance(obj, ModelConfig):
        return obj
    cfg = getattr(obj, "cfg", None)
    if isinstance(cfg, ModelConfig):
        return cfg
    raise TypeError(f"cannot derive a model config from {type(obj).__name__}")


def count_trainable(obj, mode: str = "full", *, rank: int | None = None) -> int:
    """Trainable parameter count for a training mode.

    full counts every network parameter; state counts the tunable
    initial-state entries; lora counts rank * (in + out) over the
    adapter targets.
    """
    if mode == "full":
        if isinstance(obj, nn.Module):
            return sum(p.numel() for p in obj.parameters())
        raise TypeError("full mode needs a module")
    if mode == "state":
        if isinstance(obj, InitialState):
            return sum(p.numel() for p in obj.parameters())
        cfg = _resolve_cfg(obj)
        return cfg.n_layers * cfg.n_heads * cfg.head_size * cfg.head_size
    if mode == "lora":
        if rank is None or rank < 1:
            raise ValueError("lora mode needs a positive rank")
        cfg = _resolve_cfg(obj)
        return sum(rank * (m + n) for _, m, n in lora_target_shapes(cfg))
    raise ValueError(f"unknown mode {mode!r}")
