"""Small pre-norm decoder-only transformer with residual-stream hooks.

The model is a plain ordered dict of tensors plus a config, so weights can be
edited (orthogonalization), serialized in a fixed order, and differentiated
in float64 for gradient checks. "Residual stream at layer l" always means the
stream after block ``l`` has added its attention and MLP outputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .harness import EOS_ID, PAD_ID, PromptBundle

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite values in a forward pass or training loss."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    max_seq_len: int = 128
    rng_seed: int = 0
    d_mlp: int = 0  # 0 -> 4 * d_model

    def __post_init__(self):
        if min(self.vocab_size, self.n_layers, self.d_model, self.n_heads, self.max_seq_len) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_mlp == 0:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def as_ints(self) -> list[int]:
        return [self.n_layers, self.d_model, self.n_heads, self.vocab_size, self.max_seq_len, self.rng_seed, self.d_mlp]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter, in the order used for initialization and serialization."""
    d, v, s, m = cfg.d_model, cfg.vocab_size, cfg.max_seq_len, cfg.d_mlp
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d), "pos_emb": (s, d)}
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1_w": (d,), p + "ln1_b": (d,),
            p + "W_Q": (d, d), p + "b_Q": (d,),
            p + "W_K": (d, d), p + "b_K": (d,),
            p + "W_V": (d, d), p + "b_V": (d,),
            p + "W_O": (d, d), p + "b_O": (d,),
            p + "ln2_w": (d,), p + "ln2_b": (d,),
            p + "W_in": (d, m), p + "b_in": (m,),
            p + "W_out": (m, d), p + "b_out": (d,),
        })
    shapes.update({"ln_f_w": (d,), "ln_f_b": (d,), "W_U": (d, v), "b_U": (v,)})
    return shapes


def residual_writers(cfg: ModelConfig) -> list[str]:
    """Names of every parameter that writes into the residual stream (rows live in R^d_model)."""
    names = ["tok_emb", "pos_emb"]
    for l in range(cfg.n_layers):
        names += [f"blocks.{l}.W_O", f"blocks.{l}.b_O", f"blocks.{l}.W_out", f"blocks.{l}.b_out"]
    return names


@dataclass(frozen=True)
class Checkpoint:
    config: ModelConfig
    params: dict[str, torch.Tensor]
    provenance: tuple[str, ...] = ("base",)

    @property
    def tag(self) -> str:
        return self.provenance[-1].split("(")[0]

    def with_params(self, params: dict[str, torch.Tensor], event: str) -> "Checkpoint":
        return Checkpoint(self.config, params, self.provenance + (event,))


def init_params(cfg: ModelConfig) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(cfg.rng_seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("ln") and leaf.endswith("_w"):
            t = torch.ones(shape)
        elif len(shape) == 1:
            t = torch.zeros(shape)
        else:
            std = 0.02
            if leaf in ("W_O", "W_out"):
                std /= math.sqrt(2 * cfg.n_layers)
            t = torch.randn(shape, generator=gen) * std
        params[name] = t
    return params


@dataclass
class HookSpec:
    """A position-wise transform of the residual stream after block ``layer``.

    ``kind`` is ``identity``, ``add_direction`` (adds ``alpha * direction``) or
    ``capture`` (records the stream). ``position=None`` applies to every
    position; an int restricts to that single position.
    """

    layer: int
    kind: str = "identity"
    direction: torch.Tensor | None = None
    alpha: float = 0.0
    position: int | None = None

    def apply(self, resid: torch.Tensor, captures: list) -> torch.Tensor:
        if self.kind == "identity":
            return resid
        if self.kind == "capture":
            captures.append((resid if self.position is None else resid[..., self.position, :]).detach().clone())
            return resid
        if self.kind == "add_direction":
            delta = (self.alpha * self.direction.double()).to(resid.dtype)
            if self.position is None:
                return resid + delta
            resid = resid.clone()
            resid[..., self.position, :] += delta
            return resid
        raise ValueError(f"unknown hook kind {self.kind!r}")


def _block(params, cfg: ModelConfig, l: int, x: torch.Tensor, want_attn: bool):
    p = f"blocks.{l}."
    B, T, d = x.shape
    H, dh = cfg.n_heads, cfg.d_head
    h = F.layer_norm(x, (d,), params[p + "ln1_w"], params[p + "ln1_b"])
    q = (h @ params[p + "W_Q"] + params[p + "b_Q"]).view(B, T, H, dh).transpose(1, 2)
    k = (h @ params[p + "W_K"] + params[p + "b_K"]).view(B, T, H, dh).transpose(1, 2)
    v = (h @ params[p + "W_V"] + params[p + "b_V"]).view(B, T, H, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    scores = scores.masked_fill(~causal, float("-inf"))
    pattern = scores.softmax(-1)
    z = (pattern @ v).transpose(1, 2).reshape(B, T, d)
    x = x + z @ params[p + "W_O"] + params[p + "b_O"]
    h = F.layer_norm(x, (d,), params[p + "ln2_w"], params[p + "ln2_b"])
    x = x + F.gelu(h @ params[p + "W_in"] + params[p + "b_in"]) @ params[p + "W_out"] + params[p + "b_out"]
    return x, (pattern if want_attn else None)


def run(params, cfg: ModelConfig, tokens: torch.Tensor, hooks: Sequence[HookSpec] = (),
        attn_layers: Sequence[int] = ()):
    """Batched forward over ``tokens`` of shape (B, T).

    Returns (logits (B, T, V), captures in hook order, {layer: attention (B, H, T, T)}).
    """
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len={cfg.max_seq_len}")
    by_layer: dict[int, list[HookSpec]] = {}
    for hk in hooks:
        if not 0 <= hk.layer < cfg.n_layers:
            raise ValueError(f"hook layer {hk.layer} out of range")
        by_layer.setdefault(hk.layer, []).append(hk)
    captures: list[torch.Tensor] = []
    attn = {}
    x = params["tok_emb"][tokens] + params["pos_emb"][:T]
    for l in range(cfg.n_layers):
        x, pattern = _block(params, cfg, l, x, l in attn_layers)
        if pattern is not None:
            attn[l] = pattern
        for hk in by_layer.get(l, ()):
            x = hk.apply(x, captures)
    x = F.layer_norm(x, (cfg.d_model,), params["ln_f_w"], params["ln_f_b"])
    logits = x @ params["W_U"] + params["b_U"]
    return logits, captures, attn


@torch.inference_mode()
def forward(ckpt: Checkpoint, tokens: Sequence[int], hooks: Sequence[HookSpec] = ()):
    """Single-sequence forward; returns (logits (T, V), captures without the batch axis)."""
    ids = torch.as_tensor(list(tokens), dtype=torch.long)[None]
    logits, captures, _ = run(ckpt.params, ckpt.config, ids, hooks)
    if not torch.isfinite(logits).all():
        raise NumericalError("non-finite logits in forward pass")
    return logits[0], [c[0] for c in captures]


def generate(ckpt: Checkpoint, prompt: PromptBundle | Sequence[int], temperature: float = 0.0,
             max_new: int = 16, hooks: Sequence[HookSpec] = (),
             generator: torch.Generator | None = None) -> list[int]:
    """Decode until EOS or ``max_new`` tokens; EOS itself is not returned.

    Temperature 0 is argmax with ties going to the lowest token id.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    seq = list(prompt.tokens if isinstance(prompt, PromptBundle) else prompt)
    if len(seq) > ckpt.config.max_seq_len:
        raise ValueError("prompt does not fit the context window")
    out: list[int] = []
    for _ in range(max_new):
        if len(seq) >= ckpt.config.max_seq_len:
            break
        logits = forward(ckpt, seq, hooks)[0][-1]
        if temperature == 0:
            nxt = int(torch.argmax(logits))
        else:
            probs = torch.softmax(logits.double() / temperature, -1)
            nxt = int(torch.multinomial(probs, 1, generator=generator))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


def lm_loss(params, cfg: ModelConfig, tokens: torch.Tensor, loss_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean next-token cross-entropy; PAD targets and masked targets are ignored."""
    logits, _, _ = run(params, cfg, tokens[:, :-1])
    targets = tokens[:, 1:].clone()
    if loss_mask is not None:
        targets[~loss_mask[:, 1:]] = PAD_ID
    return F.cross_entropy(logits.reshape(-1, cfg.vocab_size), targets.reshape(-1), ignore_index=PAD_ID)


def _pad_batch(seqs: Sequence[Sequence[int]], starts: Sequence[int] | None):
    T = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), T), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), T), dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.as_tensor(s)
        mask[i, (starts[i] if starts is not None else 0) : len(s)] = True
    return tokens, mask


def _fit(params: dict[str, torch.Tensor], cfg: ModelConfig, corpus, loss_from, steps: int, lr: float,
         batch_size: int, seed: int, warmup: int) -> dict[str, torch.Tensor]:
    params = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    opt = torch.optim.AdamW(params.values(), lr=lr, weight_decay=0.01)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        scale = min(1.0, (step + 1) / max(warmup, 1)) * 0.5 * (1 + math.cos(math.pi * step / steps))
        for g in opt.param_groups:
            g["lr"] = lr * max(scale, 0.05)
        idx = rng.integers(0, len(corpus), size=batch_size)
        tokens, mask = _pad_batch([corpus[i] for i in idx], [loss_from[i] for i in idx] if loss_from else None)
        loss = lm_loss(params, cfg, tokens, mask)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite training loss at step {step}: {loss.item()}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params.values(), 1.0)
        opt.step()
        if step % 500 == 0 or step == steps - 1:
            log.info("lm step %d loss %.4f", step, loss.item())
    return {k: v.detach().clone() for k, v in params.items()}


def train(config: ModelConfig, corpus: Sequence[Sequence[int]], steps: int, lr: float = 3e-3,
          batch_size: int = 64, warmup: int = 100) -> Checkpoint:
    """Train from scratch on next-token prediction; deterministic given ``config.rng_seed``."""
    if not corpus:
        raise ValueError("empty training corpus")
    torch.manual_seed(config.rng_seed)
    params = _fit(init_params(config), config, list(corpus), None, steps, lr, batch_size, config.rng_seed, warmup)
    return Checkpoint(config, params, (f"base(seed={config.rng_seed})",))


def fine_tune(ckpt: Checkpoint, corpus: Sequence[Sequence[int]], steps: int, lr: float = 1e-3,
              loss_from: Sequence[int] | None = None, batch_size: int = 64, seed: int = 0) -> Checkpoint:
    """Continue training a base checkpoint; ``loss_from[i]`` limits the loss to completion tokens."""
    if not ckpt.provenance[-1].startswith("base"):
        raise ValueError(f"fine_tune expects a base checkpoint, got provenance {ckpt.provenance}")
    if steps == 0:
        params = {k: v.clone() for k, v in ckpt.params.items()}
    else:
        if not corpus:
            raise ValueError("empty fine-tuning corpus")
        params = _fit(ckpt.params, ckpt.config, list(corpus), loss_from, steps, lr, batch_size, seed, warmup=20)
    return ckpt.with_params(params, f"fine_tuned(steps={steps},seed={seed})")


@dataclass
class ActivationRecord:
    problem_id: int
    layer: int
    vector: np.ndarray
    label: bool | None = None


def capture_final_token_residuals(ckpt: Checkpoint, prompts: Sequence[PromptBundle], layer: int | Sequence[int]):
    """Residual after block ``layer`` at each prompt's last token (before any generated token).

    With a list of layers, returns {layer: records} from one forward per prompt.
    """
    layers = [layer] if isinstance(layer, int) else list(layer)
    for l in layers:
        if not 0 <= l < ckpt.config.n_layers:
            raise ValueError(f"layer {l} out of range")
    out: dict[int, list[ActivationRecord]] = {l: [] for l in layers}
    for pr in prompts:
        hooks = [HookSpec(l, "capture", position=len(pr) - 1) for l in layers]
        _, caps = forward(ckpt, pr.tokens, hooks)
        for l, c in zip(layers, caps):
            out[l].append(ActivationRecord(pr.problem_id, l, c.numpy().astype(np.float32)))
    return out[layer] if isinstance(layer, int) else out


def capture_all_positions(ckpt: Checkpoint, tokens: Sequence[int], layers: Sequence[int], window: int = 64):
    """Residuals at every position of a long stream, processed in non-overlapping windows."""
    out = {l: [] for l in layers}
    for start in range(0, len(tokens), window):
        chunk = tokens[start : start + window]
        _, caps = forward(ckpt, chunk, [HookSpec(l, "capture") for l in layers])
        for l, c in zip(layers, caps):
            out[l].append(c.numpy())
    return {l: np.concatenate(v).astype(np.float32) for l, v in out.items()}


@dataclass
class AttentionTrace:
    layer: int
    weights: np.ndarray  # (n_heads, seq_len), query = final prompt token


@torch.inference_mode()
def attention_weights(ckpt: Checkpoint, prompt: PromptBundle | Sequence[int], layer: int,
                      hooks: Sequence[HookSpec] = ()) -> AttentionTrace:
    if not 0 <= layer < ckpt.config.n_layers:
        raise ValueError(f"layer {layer} out of range")
    toks = prompt.tokens if isinstance(prompt, PromptBundle) else prompt
    ids = torch.as_tensor(list(toks), dtype=torch.long)[None]
    _, _, attn = run(ckpt.params, ckpt.config, ids, hooks, attn_layers=(layer,))
    return AttentionTrace(layer, attn[layer][0, :, -1, :].double().numpy())


def orthogonalize_checkpoint(ckpt: Checkpoint, direction, label: str = "") -> Checkpoint:
    """Remove ``direction`` from every residual-writing matrix: W <- W - (W d^T) d."""
    d = torch.as_tensor(np.asarray(direction), dtype=torch.float64).reshape(-1)
    if d.shape[0] != ckpt.config.d_model:
        raise ValueError(f"direction has dim {d.shape[0]}, expected {ckpt.config.d_model}")
    norm = float(d.norm())
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"direction must be unit norm, got {norm}")
    params = dict(ckpt.params)
    for name in residual_writers(ckpt.config):
        W = params[name].double()
        W = W - torch.outer(W.reshape(-1, d.shape[0]) @ d, d).reshape(W.shape)
        params[name] = W.to(ckpt.params[name].dtype)
    return ckpt.with_params(params, f"orthogonalized({label})")


def writer_components(ckpt: Checkpoint, direction) -> float:
    """Largest |row . d| over all residual-writing matrices."""
    d = torch.as_tensor(np.asarray(direction), dtype=torch.float64).reshape(-1)
    return max(float((ckpt.params[n].double().reshape(-1, d.shape[0]) @ d).abs().max())
               for n in residual_writers(ckpt.config))
