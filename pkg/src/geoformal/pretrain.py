"""Pretraining and instruction-tuning objectives around a toy causal decoder.

Stage 1 objectives: masked patch reconstruction (MSE on masked positions
only) and autoregressive language modeling.  Stage 3: a projection head maps
query features into the decoder embedding space as visual tokens, the
instruction loss is the plain sum of target-position negative log-likelihoods,
and decoding is length-normalized beam search.

The decoder is a 2-layer pre-LN causal transformer with a tied embedding /
output head; anything with the same prefix-conditioned interface would do.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .gsformer import INIT_STD, _linear_init, _ln_init, ffn, linear, mha, norm
from .tensorcore import Rng, Tensor


class DegenerateRatioError(ValueError):
    def __init__(self, ratio: float, n: int):
        super().__init__(f"mask ratio {ratio} degenerates on {n} patches")


class SequenceTooShortError(ValueError):
    def __init__(self, length: int):
        super().__init__(f"language modeling needs >= 2 tokens, got {length}")


class EmptyTargetError(ValueError):
    def __init__(self):
        super().__init__("instruction loss needs a non-empty target sequence")


# ---------------------------------------------------------------------------
# Masked patch reconstruction
# ---------------------------------------------------------------------------

@dataclass
class MAEConfig:
    patch_dim: int = 64
    n_patches: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    mask_ratio: float = 0.75

    def to_json(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_json(cls, rec: dict) -> "MAEConfig":
        return cls(**rec)


@dataclass
class MAEBatch:
    patches: Tensor
    mask_indices: frozenset[int]
    ratio: float

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    def row_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_patches, 1))
        mask[sorted(self.mask_indices)] = 1.0
        return mask


def mae_mask(patches: Tensor, ratio: float, rng: Rng) -> MAEBatch:
    """Uniformly mask exactly round(ratio * N) patch positions."""
    n = patches.shape[0]
    n_masked = round(ratio * n)
    if n_masked <= 0 or n_masked >= n:
        raise DegenerateRatioError(ratio, n)
    order = rng.permutation(n)
    return MAEBatch(patches, frozenset(int(i) for i in order[:n_masked]), ratio)


def mae_loss(reconstructed: Tensor, original: Tensor, batch: MAEBatch) -> Tensor:
    """Mean squared error over masked positions only."""
    if reconstructed.shape != original.shape:
        raise tc.ShapeMismatchError("mae_loss", reconstructed.shape, original.shape)
    row_mask = Tensor(batch.row_mask())
    diff = tc.sub(reconstructed, original)
    masked_sq = tc.mul(tc.mul(diff, diff), row_mask)
    denom = len(batch.mask_indices) * reconstructed.shape[1]
    return tc.mul(tc.tsum(masked_sq), Tensor(1.0 / denom))


def init_mae_params(cfg: MAEConfig, rng: Rng) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    r = rng.split("mae")
    _linear_init(p, "embed", r.split("embed"), cfg.patch_dim, cfg.d_model)
    p["mask_token"] = Tensor(
        r.split("mask_token").normal((cfg.d_model,), std=INIT_STD), requires_grad=True
    )
    # masked rows carry no content, so positions need full-strength init to
    # differentiate reconstruction targets
    p["pos"] = Tensor(
        r.split("pos").normal((cfg.n_patches, cfg.d_model), std=0.5),
        requires_grad=True,
    )
    for i in range(cfg.n_layers):
        lr = r.split(f"enc{i}")
        _ln_init(p, f"enc{i}.ln1", cfg.d_model)
        for piece in ("sa_q", "sa_k", "sa_v", "sa_o"):
            _linear_init(p, f"enc{i}.{piece}", lr.split(piece), cfg.d_model, cfg.d_model)
        _ln_init(p, f"enc{i}.ln2", cfg.d_model)
        _linear_init(p, f"enc{i}.ffn1", lr.split("ffn1"), cfg.d_model, 4 * cfg.d_model)
        _linear_init(p, f"enc{i}.ffn2", lr.split("ffn2"), 4 * cfg.d_model, cfg.d_model)
    _ln_init(p, "ln_f", cfg.d_model)
    _linear_init(p, "head", r.split("head"), cfg.d_model, cfg.patch_dim)
    return p


def mae_forward(
    params: dict[str, Tensor], cfg: MAEConfig, batch: MAEBatch
) -> Tensor:
    """Reconstruct all patches: masked rows enter as a learned mask token."""
    n = batch.n_patches
    visible = Tensor(1.0 - batch.row_mask())
    masked = Tensor(batch.row_mask())
    emb = linear(params, "embed", batch.patches)
    token_row = tc.reshape(params["mask_token"], (1, cfg.d_model))
    x = tc.add(tc.mul(emb, visible), tc.mul(token_row, masked))
    x = tc.add(x, tc.narrow(params["pos"], 0, 0, n))
    for i in range(cfg.n_layers):
        h = norm(params, f"enc{i}.ln1", x)
        x = tc.add(x, mha(params, f"enc{i}.sa_", h, h, cfg.n_heads, None))
        x = tc.add(x, ffn(params, f"enc{i}.ffn", norm(params, f"enc{i}.ln2", x)))
    return linear(params, "head", norm(params, "ln_f", x))


# ---------------------------------------------------------------------------
# Toy causal decoder
# ---------------------------------------------------------------------------

@dataclass
class DecoderConfig:
    n_layers: int = 2
    d_lm: int = 128
    n_heads: int = 4
    vocab_size: int = 128
    max_len: int = 96
    n_vis: int = 8

    def to_json(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_json(cls, rec: dict) -> "DecoderConfig":
        return cls(**rec)


def init_decoder_params(cfg: DecoderConfig, rng: Rng) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    r = rng.split("decoder")
    p["tok_emb"] = Tensor(
        r.split("tok_emb").normal((cfg.vocab_size, cfg.d_lm), std=INIT_STD),
        requires_grad=True,
    )
    p["pos_emb"] = Tensor(
        r.split("pos_emb").normal((cfg.max_len, cfg.d_lm), std=INIT_STD),
        requires_grad=True,
    )
    for i in range(cfg.n_layers):
        lr = r.split(f"dec{i}")
        _ln_init(p, f"dec{i}.ln1", cfg.d_lm)
        for piece in ("sa_q", "sa_k", "sa_v", "sa_o"):
            _linear_init(p, f"dec{i}.{piece}", lr.split(piece), cfg.d_lm, cfg.d_lm)
        _ln_init(p, f"dec{i}.ln2", cfg.d_lm)
        _linear_init(p, f"dec{i}.ffn1", lr.split("ffn1"), cfg.d_lm, 4 * cfg.d_lm)
        _linear_init(p, f"dec{i}.ffn2", lr.split("ffn2"), 4 * cfg.d_lm, cfg.d_lm)
    _ln_init(p, "ln_f", cfg.d_lm)
    p["head_b"] = tc.zeros((cfg.vocab_size,), requires_grad=True)
    return p


def decoder_forward(
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    token_ids: Sequence[int],
    prefix_embeds: Tensor | None = None,
) -> Tensor:
    """Causal forward over [prefix_embeds || embedded token_ids]; returns
    next-token logits for every position (tied output head)."""
    parts: list[Tensor] = []
    n_prefix = 0
    if prefix_embeds is not None:
        if prefix_embeds.ndim != 2 or prefix_embeds.shape[1] != cfg.d_lm:
            raise tc.ShapeMismatchError("decoder prefix", prefix_embeds.shape,
                                        (-1, cfg.d_lm))
        parts.append(prefix_embeds)
        n_prefix = prefix_embeds.shape[0]
    ids = list(token_ids)
    if ids:
        parts.append(tc.embedding_lookup(params["tok_emb"], ids))
    if not parts:
        raise tc.ShapeMismatchError("decoder needs input", (0,))
    x = tc.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    total = x.shape[0]
    if total > cfg.max_len:
        raise tc.ShapeMismatchError("sequence too long", (total,), (cfg.max_len,))
    x = tc.add(x, tc.narrow(params["pos_emb"], 0, 0, total))
    causal = Tensor(np.tril(np.ones((total, total))))
    for i in range(cfg.n_layers):
        h = norm(params, f"dec{i}.ln1", x)
        x = tc.add(x, mha(params, f"dec{i}.sa_", h, h, cfg.n_heads, causal))
        x = tc.add(x, ffn(params, f"dec{i}.ffn", norm(params, f"dec{i}.ln2", x)))
    x = norm(params, "ln_f", x)
    return tc.add(tc.matmul(x, tc.transpose(params["tok_emb"])), params["head_b"])


def lm_loss(
    params: dict[str, Tensor], cfg: DecoderConfig, token_ids: Sequence[int]
) -> Tensor:
    """Mean next-token cross entropy with causal masking."""
    ids = list(token_ids)
    if len(ids) < 2:
        raise SequenceTooShortError(len(ids))
    logits = decoder_forward(params, cfg, ids[:-1])
    return tc.cross_entropy(logits, ids[1:], reduction="mean")


# ---------------------------------------------------------------------------
# Instruction tuning
# ---------------------------------------------------------------------------

def project_visual(f_g: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of query features into the decoder embedding space."""
    if f_g.ndim != 2 or f_g.shape[1] != w.shape[0]:
        raise tc.ShapeMismatchError("project_visual", f_g.shape, w.shape)
    return tc.add(tc.matmul(f_g, w), b)


def instruction_loss(
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    t_g: Tensor,
    t_p: Sequence[int],
    s: Sequence[int],
) -> Tensor:
    """Sum of negative log-likelihoods over target positions only.

    The visual tokens t_g and instruction tokens t_p are non-predicted prefix
    positions; position (|t_g| + |t_p| - 1 + l) predicts s[l].
    """
    target = list(s)
    if not target:
        raise EmptyTargetError()
    instr = list(t_p)
    n_prefix = t_g.shape[0] + len(instr)
    if n_prefix < 1:
        raise EmptyTargetError()
    logits = decoder_forward(params, cfg, instr + target[:-1], prefix_embeds=t_g)
    total = logits.shape[0]
    targets_full = [0] * total
    ignore = [True] * total
    for offset, tok in enumerate(target):
        position = n_prefix - 1 + offset
        targets_full[position] = tok
        ignore[position] = False
    return tc.cross_entropy(logits, targets_full, ignore, reduction="sum")


# ---------------------------------------------------------------------------
# Beam search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BeamHypothesis:
    token_ids: tuple[int, ...]
    log_prob: float
    normalized: float


def _log_softmax_row(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def beam_decode(
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    t_g: Tensor | None,
    t_p: Sequence[int],
    beam: int = 10,
    max_len: int = 24,
    eos_id: int = 2,
) -> list[BeamHypothesis]:
    """Length-normalized beam search; rng-free and deterministic.

    Candidates are ranked by log-prob divided by token count, ties broken by
    generation order.  Returns at most `beam` hypotheses; sequences that never
    emit EOS are cut at max_len.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    instr = list(t_p)
    live: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    with tc.no_grad():
        for _ in range(max_len):
            if not live:
                break
            expansions: list[tuple[list[int], float]] = []
            for tokens, score in live:
                logits = decoder_forward(params, cfg, instr + tokens, prefix_embeds=t_g)
                logp = _log_softmax_row(logits.data[-1])
                top = np.argsort(-logp, kind="stable")[:beam]
                for token_id in top:
                    expansions.append(
                        (tokens + [int(token_id)], score + float(logp[token_id]))
                    )
            expansions.sort(key=lambda e: -e[1])
            live = []
            for tokens, score in expansions:
                if tokens[-1] == eos_id:
                    finished.append((tokens, score))
                elif len(live) < beam:
                    live.append((tokens, score))
    pool = finished + live
    hypotheses = [
        BeamHypothesis(tuple(tokens), score, score / max(1, len(tokens)))
        for tokens, score in pool
    ]
    hypotheses.sort(key=lambda h: -h.normalized)
    return hypotheses[:beam]
