"""Query transformer with content-aware query generation and stochastic
patch pruning, plus its alignment training objectives.

Layer layout (pre-LN): shared self-attention over [queries || caption tokens],
cross-attention from queries to patch features gated by the current retention
mask, then a feed-forward block.  The self-attention mask is multimodal
causal: queries attend only queries, caption position l attends every query
plus caption positions <= l.  This keeps the caption-generation head causal
and makes the query outputs independent of the caption, so the same forward
serves caption-free decoding.

Mask stages: stage 0 is all ones; each sampler layer multiplies the previous
mask by the keep column of a Gumbel-Softmax sample over per-patch keep/drop
logits.  The sparsification loss is the mean L1 of all mask entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .formal_lang import OutOfVocabError
from .tensorcore import Rng, Tensor


class BatchTooSmallError(ValueError):
    def __init__(self, got: int, need: int = 2):
        super().__init__(f"alignment objectives need a batch of >= {need}, got {got}")


@dataclass
class GSFormerConfig:
    n_layers: int = 4
    n_queries: int = 8
    d_model: int = 32
    n_heads: int = 4
    d_in: int = 64
    n_patches: int = 64
    vocab_size: int = 128
    max_caption_len: int = 48
    embed_dim: int = 16
    sgs_layers: tuple[int, ...] = (2, 3)
    lam: float = 0.5
    tau: float = 1.0
    tau_final: float | None = None  # set to anneal linearly over a training run
    align_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def tau_at(self, step: int, total_steps: int) -> float:
        if self.tau_final is None or total_steps <= 1:
            return self.tau
        frac = min(1.0, step / (total_steps - 1))
        return self.tau + (self.tau_final - self.tau) * frac

    def validate(self) -> None:
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if self.lam < 0.0:
            raise ValueError("lambda must be >= 0")
        if self.tau <= 0.0 or (self.tau_final is not None and self.tau_final <= 0.0):
            raise ValueError("tau must be > 0")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        bad = [i for i in self.sgs_layers if not 1 <= i <= self.n_layers - 1]
        if bad:
            raise ValueError(f"sampler layers {bad} outside 1..{self.n_layers - 1}")

    def to_json(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_queries": self.n_queries,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_in": self.d_in,
            "n_patches": self.n_patches,
            "vocab_size": self.vocab_size,
            "max_caption_len": self.max_caption_len,
            "embed_dim": self.embed_dim,
            "sgs_layers": list(self.sgs_layers),
            "lam": self.lam,
            "tau": self.tau,
            "tau_final": self.tau_final,
            "align_weights": list(self.align_weights),
        }

    @classmethod
    def from_json(cls, rec: dict) -> "GSFormerConfig":
        cfg = cls(**{
            **rec,
            "sgs_layers": tuple(rec.get("sgs_layers", (2, 3))),
            "align_weights": tuple(rec.get("align_weights", (1.0, 1.0, 1.0))),
        })
        cfg.validate()
        return cfg


@dataclass
class SGSState:
    masks: list[Tensor]
    probs: list[Tensor] = field(default_factory=list)

    @property
    def n_stages(self) -> int:
        return len(self.masks)

    @property
    def n_patches(self) -> int:
        return int(self.masks[0].shape[0])

    def keep_rates(self) -> list[float]:
        return [float(m.data.mean()) for m in self.masks]


@dataclass
class AlignedFeatures:
    f_g: Tensor
    text_cls: Tensor | None


@dataclass
class LossBreakdown:
    l_contrast: float
    l_match: float
    l_caption: float
    l_align: float
    l_spr: float
    l_total: float
    keep_rates: list[float] = field(default_factory=list)
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "l_contrast": self.l_contrast,
            "l_match": self.l_match,
            "l_caption": self.l_caption,
            "l_align": self.l_align,
            "l_spr": self.l_spr,
            "l_total": self.l_total,
            "keep_rates": self.keep_rates,
        }


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

INIT_STD = 0.02


def _linear_init(params, name, rng, d_in, d_out):
    params[f"{name}_w"] = Tensor(rng.normal((d_in, d_out), std=INIT_STD), requires_grad=True)
    params[f"{name}_b"] = tc.zeros((d_out,), requires_grad=True)


def _ln_init(params, name, d):
    params[f"{name}_g"] = tc.ones((d,), requires_grad=True)
    params[f"{name}_b"] = tc.zeros((d,), requires_grad=True)


def init_params(cfg: GSFormerConfig, rng: Rng) -> dict[str, Tensor]:
    cfg.validate()
    d, e = cfg.d_model, cfg.embed_dim
    p: dict[str, Tensor] = {}
    r = rng.split("gsformer")
    _linear_init(p, "patch_proj", r.split("patch_proj"), cfg.d_in, d)
    p["pos_patch"] = Tensor(r.split("pos_patch").normal((cfg.n_patches, d), std=INIT_STD),
                            requires_grad=True)
    _ln_init(p, "ln_pf", d)
    p["queries"] = Tensor(r.split("queries").normal((cfg.n_queries, d), std=INIT_STD),
                          requires_grad=True)
    _linear_init(p, "gqg", r.split("gqg"), d, d)
    p["tok_emb"] = Tensor(r.split("tok_emb").normal((cfg.vocab_size, d), std=INIT_STD),
                          requires_grad=True)
    p["pos_caption"] = Tensor(
        r.split("pos_caption").normal((cfg.max_caption_len, d), std=INIT_STD),
        requires_grad=True)
    p["cap_head_b"] = tc.zeros((cfg.vocab_size,), requires_grad=True)
    for i in range(cfg.n_layers):
        lr = r.split(f"layer{i}")
        _ln_init(p, f"layer{i}.ln1", d)
        for piece in ("sa_q", "sa_k", "sa_v", "sa_o"):
            _linear_init(p, f"layer{i}.{piece}", lr.split(piece), d, d)
        _ln_init(p, f"layer{i}.ln2", d)
        for piece in ("ca_q", "ca_k", "ca_v", "ca_o"):
            _linear_init(p, f"layer{i}.{piece}", lr.split(piece), d, d)
        _ln_init(p, f"layer{i}.ln3", d)
        _linear_init(p, f"layer{i}.ffn1", lr.split("ffn1"), d, 4 * d)
        _linear_init(p, f"layer{i}.ffn2", lr.split("ffn2"), 4 * d, d)
    for i in cfg.sgs_layers:
        _linear_init(p, f"sgs{i}", r.split(f"sgs{i}"), d, 2)
    _ln_init(p, "ln_out", d)
    _linear_init(p, "vis_proj", r.split("vis_proj"), d, e)
    _linear_init(p, "txt_proj", r.split("txt_proj"), d, e)
    p["log_scale"] = Tensor(np.float64(math.log(1.0 / 0.07)), requires_grad=True)
    _linear_init(p, "match1", r.split("match1"), 2 * d, d)
    _linear_init(p, "match2", r.split("match2"), d, 2)
    return p


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def linear(params, name, x: Tensor) -> Tensor:
    return tc.add(tc.matmul(x, params[f"{name}_w"]), params[f"{name}_b"])


def norm(params, name, x: Tensor) -> Tensor:
    return tc.layer_norm(x, params[f"{name}_g"], params[f"{name}_b"])


def mha(params, prefix: str, x_q: Tensor, x_kv: Tensor, n_heads: int,
         mask: Tensor | None) -> Tensor:
    """Multi-head attention; mask is None, a (n_keys,) key mask, or a full
    (n_q, n_keys) allowed matrix (broadcast by masked_softmax either way)."""
    q = linear(params, f"{prefix}q", x_q)
    k = linear(params, f"{prefix}k", x_kv)
    v = linear(params, f"{prefix}v", x_kv)
    d = q.shape[1]
    dh = d // n_heads
    scale = Tensor(1.0 / math.sqrt(dh))
    heads = []
    for h in range(n_heads):
        qh = tc.narrow(q, 1, h * dh, dh)
        kh = tc.narrow(k, 1, h * dh, dh)
        vh = tc.narrow(v, 1, h * dh, dh)
        logits = tc.mul(tc.matmul(qh, tc.transpose(kh)), scale)
        if mask is None:
            probs = tc.softmax(logits, axis=-1)
        else:
            probs = tc.masked_softmax(logits, mask)
        heads.append(tc.matmul(probs, vh))
    return linear(params, f"{prefix}o", tc.concat(heads, axis=1))


def ffn(params, prefix: str, x: Tensor) -> Tensor:
    return linear(params, f"{prefix}2",
                  tc.gelu(linear(params, f"{prefix}1", x)))


def caption_attend_mask(n_queries: int, n_caption: int) -> Tensor:
    """Rows are caption positions: position l sees every query plus caption
    positions <= l (queries themselves attend only queries, handled by a
    separate query-block attention call)."""
    m = np.ones((n_caption, n_queries + n_caption))
    m[:, n_queries:] = np.tril(np.ones((n_caption, n_caption)))
    return Tensor(m)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def gqg_queries(patch_feats: Tensor, learned_queries: Tensor, params) -> Tensor:
    """Content-aware queries: pooled attention context, projected, added to
    the learned query bank (one shared context row per diagram)."""
    context = tc.mean_pool(
        tc.attention(learned_queries, patch_feats, patch_feats), axis=0
    )
    d = context.shape[0]
    projected = linear(params, "gqg", tc.reshape(context, (1, d)))
    return tc.add(learned_queries, projected)


def sgs_update_mask(
    prev_mask: Tensor,
    patch_feats: Tensor,
    w: Tensor,
    b: Tensor,
    tau: float,
    hard: bool,
    rng: Rng | None,
) -> tuple[Tensor, Tensor]:
    """One sampler stage: keep/drop logits from a linear layer, Gumbel-Softmax
    sample, Hadamard product with the previous mask.  Returns (new_mask,
    keep_probabilities) with the probabilities detached for logging."""
    logits = tc.add(tc.matmul(patch_feats, w), b)
    sample = tc.gumbel_softmax(logits, tau, hard, rng)
    keep = tc.reshape(tc.narrow(sample, 1, 0, 1), (prev_mask.shape[0],))
    new_mask = tc.mul(prev_mask, keep)
    with tc.no_grad():
        probs = tc.reshape(
            tc.narrow(tc.softmax(logits.detach(), axis=-1), 1, 0, 1),
            (prev_mask.shape[0],),
        )
    return new_mask, probs


def gs_former_forward(
    patches: Tensor,
    caption_ids: Sequence[int],
    cfg: GSFormerConfig,
    params: dict[str, Tensor],
    rng: Rng | None,
    hard: bool = False,
) -> tuple[AlignedFeatures, SGSState, Tensor | None]:
    """Full forward pass.

    Empty caption_ids run the caption-free path (text_cls and caption logits
    are None); the query outputs are identical either way.
    """
    n_patches = patches.shape[0]
    if patches.ndim != 2 or patches.shape[1] != cfg.d_in or n_patches > cfg.n_patches:
        raise tc.ShapeMismatchError("gs_former_forward patches", patches.shape,
                                    (cfg.n_patches, cfg.d_in))
    ids = list(caption_ids)
    if any(not 0 <= t < cfg.vocab_size for t in ids):
        raise OutOfVocabError(f"<caption id outside 0..{cfg.vocab_size - 1}>")
    if len(ids) > cfg.max_caption_len:
        raise tc.ShapeMismatchError("caption too long", (len(ids),),
                                    (cfg.max_caption_len,))

    pf = tc.add(linear(params, "patch_proj", patches),
                tc.narrow(params["pos_patch"], 0, 0, n_patches))
    pf = norm(params, "ln_pf", pf)

    xq = gqg_queries(pf, params["queries"], params)
    n_cap = len(ids)
    xc: Tensor | None = None
    if n_cap:
        xc = tc.add(tc.embedding_lookup(params["tok_emb"], ids),
                    tc.narrow(params["pos_caption"], 0, 0, n_cap))
    cap_mask = caption_attend_mask(cfg.n_queries, n_cap) if n_cap else None

    masks = [tc.ones((n_patches,))]
    probs: list[Tensor] = []
    for i in range(cfg.n_layers):
        if i in cfg.sgs_layers:
            stage_rng = rng.split(f"sgs{i}") if rng is not None else None
            new_mask, p = sgs_update_mask(
                masks[-1], pf, params[f"sgs{i}_w"], params[f"sgs{i}_b"],
                cfg.tau, hard, stage_rng,
            )
            masks.append(new_mask)
            probs.append(p)
        # shared self-attention block (queries see queries; captions see
        # queries plus earlier captions)
        h_q = norm(params, f"layer{i}.ln1", xq)
        xq = tc.add(xq, mha(params, f"layer{i}.sa_", h_q, h_q, cfg.n_heads, None))
        if n_cap:
            h_c = norm(params, f"layer{i}.ln1", xc)
            keys = tc.concat([h_q, h_c], axis=0)
            xc = tc.add(xc, mha(params, f"layer{i}.sa_", h_c, keys,
                                cfg.n_heads, cap_mask))
        # cross-attention from queries to patches gated by the current mask
        cross = mha(params, f"layer{i}.ca_",
                    norm(params, f"layer{i}.ln2", xq), pf,
                    cfg.n_heads, masks[-1])
        xq = tc.add(xq, cross)
        xq = tc.add(xq, ffn(params, f"layer{i}.ffn", norm(params, f"layer{i}.ln3", xq)))
        if n_cap:
            xc = tc.add(xc, ffn(params, f"layer{i}.ffn", norm(params, f"layer{i}.ln3", xc)))

    f_g = norm(params, "ln_out", xq)
    if n_cap:
        cap_states = norm(params, "ln_out", xc)
        caption_logits = tc.add(
            tc.matmul(cap_states, tc.transpose(params["tok_emb"])),
            params["cap_head_b"],
        )
        text_cls = tc.mean_pool(cap_states, axis=0)
    else:
        caption_logits = None
        text_cls = None
    return AlignedFeatures(f_g, text_cls), SGSState(masks, probs), caption_logits


def sparsification_loss(state: SGSState) -> Tensor:
    """Mean L1 of every mask entry across all stages; 1.0 iff all kept."""
    total = tc.tsum(tc.absval(state.masks[0]))
    for m in state.masks[1:]:
        total = tc.add(total, tc.tsum(tc.absval(m)))
    return tc.mul(total, Tensor(1.0 / (state.n_stages * state.n_patches)))


def _project_rows(params, name: str, rows: list[Tensor]) -> Tensor:
    projected = []
    for row in rows:
        d = row.shape[0]
        flat = tc.reshape(linear(params, name, tc.reshape(row, (1, d))), (-1,))
        projected.append(tc.l2_normalize(flat))
    return tc.stack_rows(projected)


def alignment_loss(
    features: list[AlignedFeatures],
    caption_logits: list[Tensor],
    caption_targets: list[Sequence[int]],
    cfg: GSFormerConfig,
    params: dict[str, Tensor],
) -> tuple[Tensor, Tensor, Tensor]:
    """(contrast, match, caption) losses over an aligned batch.

    Contrast: symmetric in-batch InfoNCE between pooled query features and
    text features, with a learnable temperature.  Match: binary CE on a fusion
    head, positives on-diagonal, negatives by +1 rotation.  Caption: mean
    next-token cross entropy of the caption logits.
    """
    batch = len(features)
    if batch < 2:
        raise BatchTooSmallError(batch)
    pooled = [tc.mean_pool(f.f_g, axis=0) for f in features]
    text = [f.text_cls for f in features]
    if any(t is None for t in text):
        raise ValueError("alignment batch requires captions")

    g_mat = _project_rows(params, "vis_proj", pooled)
    t_mat = _project_rows(params, "txt_proj", text)
    sim = tc.mul(tc.matmul(g_mat, tc.transpose(t_mat)), tc.exp(params["log_scale"]))
    diag = list(range(batch))
    l_contrast = tc.mul(
        tc.add(tc.cross_entropy(sim, diag), tc.cross_entropy(tc.transpose(sim), diag)),
        Tensor(0.5),
    )

    fused = []
    for i in range(batch):
        fused.append(tc.concat([pooled[i], text[i]], axis=0))
    for i in range(batch):
        fused.append(tc.concat([pooled[i], text[(i + 1) % batch]], axis=0))
    hidden = tc.gelu(linear(params, "match1", tc.stack_rows(fused)))
    match_logits = linear(params, "match2", hidden)
    labels = [1] * batch + [0] * batch
    l_match = tc.cross_entropy(match_logits, labels)

    rows = []
    targets: list[int] = []
    for logits, ids in zip(caption_logits, caption_targets):
        ids = list(ids)
        if len(ids) < 2:
            raise ValueError("caption needs >= 2 tokens for next-token loss")
        rows.append(tc.narrow(logits, 0, 0, len(ids) - 1))
        targets.extend(ids[1:])
    l_caption = tc.cross_entropy(tc.concat(rows, axis=0), targets)
    return l_contrast, l_match, l_caption


def pretrain_loss(
    batch: list[tuple[Tensor, Sequence[int]]],
    cfg: GSFormerConfig,
    params: dict[str, Tensor],
    rng: Rng | None,
    hard: bool = False,
) -> LossBreakdown:
    """Compose forward, alignment, and sparsification into the total loss."""
    features: list[AlignedFeatures] = []
    logits_list: list[Tensor] = []
    targets_list: list[Sequence[int]] = []
    spr_terms: list[Tensor] = []
    states: list[SGSState] = []
    for index, (patches, ids) in enumerate(batch):
        sample_rng = rng.split(f"sample{index}") if rng is not None else None
        feats, state, cap_logits = gs_former_forward(
            patches, ids, cfg, params, sample_rng, hard
        )
        features.append(feats)
        logits_list.append(cap_logits)
        targets_list.append(ids)
        spr_terms.append(sparsification_loss(state))
        states.append(state)

    l_contrast, l_match, l_caption = alignment_loss(
        features, logits_list, targets_list, cfg, params
    )
    w_c, w_m, w_cap = cfg.align_weights
    l_align = tc.add(
        tc.add(tc.mul(l_contrast, Tensor(w_c)), tc.mul(l_match, Tensor(w_m))),
        tc.mul(l_caption, Tensor(w_cap)),
    )
    l_spr = spr_terms[0]
    for term in spr_terms[1:]:
        l_spr = tc.add(l_spr, term)
    l_spr = tc.mul(l_spr, Tensor(1.0 / len(spr_terms)))
    l_total = tc.add(l_align, tc.mul(l_spr, Tensor(cfg.lam)))
    return LossBreakdown(
        l_contrast=l_contrast.item(),
        l_match=l_match.item(),
        l_caption=l_caption.item(),
        l_align=l_align.item(),
        l_spr=l_spr.item(),
        l_total=l_total.item(),
        keep_rates=mean_keep_rates(states),
        tensor=l_total,
    )


def mean_keep_rates(states: list[SGSState]) -> list[float]:
    """Per-stage mean keep rate across a batch of forward states."""
    if not states:
        return []
    stages = states[0].n_stages
    rates = []
    for stage in range(stages):
        rates.append(
            float(np.mean([s.masks[stage].data.mean() for s in states]))
        )
    return rates
