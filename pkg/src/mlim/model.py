"""The differentiable core: input assembly, transformer encoder, task heads.

A single pre-train item is assembled as [CLS] text [SEP] image; a pair item
as [CLS] textA [SEP] imageA [SEP] textB [SEP] imageB. [CLS]/[SEP] vectors
come from the word table and carry no positional rows; text and image
segments each use their own learned position table (both pair segments reuse
the same rows). There are no modality or segment embeddings anywhere.

Losses: mean negative log-likelihood over masked text steps (two-layer MLP
head over the vocabulary), full-image reconstruction error (per-pixel channel
SSE averaged over pixels then batch), a 2-way matched/mismatched head on
[CLS] used as an ablation baseline, and a single-logit pairwise head on [CLS]
for fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    check_finite,
    concat,
    embedding,
    gather_positions,
    index_select,
    layer_norm,
    log_softmax,
    matmul,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    softplus,
    square,
    tmean,
    transpose,
    tsum,
)
from .data import VOCAB, Vocab
from .embedding import add_positions, conv_block, deconv_block, embed_image, embed_text
from .masking import MaskPlan, MdoMode, PairInput, apply_masking, apply_mdo


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    dropout: float = 0.1
    vocab_size: int = VOCAB.size
    max_text_len: int = 16
    image_size: int = 64
    pre_norm: bool = True
    enc_channels: tuple[int, int] = (32, 64)
    dec_channels: tuple[int, int] = (64, 32)

    @property
    def grid_side(self) -> int:
        return self.image_size // 8

    @property
    def image_len(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def max_seq(self) -> int:
        return 2 + self.max_text_len + self.image_len

    @property
    def max_seq_pair(self) -> int:
        return 4 + 2 * self.max_text_len + 2 * self.image_len

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.n_heads}")
        if self.image_size % 8 != 0 or self.image_size < 8:
            raise ValueError(f"image_size {self.image_size} must be a positive multiple of 8")
        if self.n_layers < 0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("bad layer count or dropout rate")
        if len(self.enc_channels) != 2 or len(self.dec_channels) != 2:
            raise ValueError("embedder/decoder need exactly two hidden channel widths")


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """All learnable tensors, created in a fixed order (checkpoint layout
    and rng determinism both rely on it)."""
    cfg.validate()
    params: dict[str, Tensor] = {}

    def table(name, rows, cols):
        params[name] = Tensor(rng.normal(0.0, 0.02, (rows, cols)), requires_grad=True)

    def filt(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.w"] = Tensor(
            rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True
        )
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    def dense(name, n_in, n_out):
        params[f"{name}.w"] = Tensor(rng.normal(0.0, 0.02, (n_in, n_out)), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)

    def norm(name, width):
        params[f"{name}.g"] = Tensor(np.ones(width), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(width), requires_grad=True)

    d = cfg.d_model
    table("word_emb", cfg.vocab_size, d)
    table("pos_text", cfg.max_text_len, d)
    table("pos_img", cfg.image_len, d)

    c0, c1 = cfg.enc_channels
    filt("img_enc.c0", 4 * 3, c0)
    filt("img_enc.c1", 4 * c0, c1)
    filt("img_enc.c2", 4 * c1, d)

    d0, d1 = cfg.dec_channels
    filt("img_dec.d0", d, 4 * d0)
    filt("img_dec.d1", d0, 4 * d1)
    filt("img_dec.d2", d1, 4 * 3)

    for i in range(cfg.n_layers):
        pre = f"enc.{i}"
        norm(f"{pre}.ln1", d)
        for proj in ("q", "k", "v", "o"):
            params[f"{pre}.attn.w{proj}"] = Tensor(
                rng.normal(0.0, 0.02, (d, d)), requires_grad=True
            )
            params[f"{pre}.attn.b{proj}"] = Tensor(np.zeros(d), requires_grad=True)
        norm(f"{pre}.ln2", d)
        dense(f"{pre}.ffn.l1", d, cfg.d_ff)
        dense(f"{pre}.ffn.l2", cfg.d_ff, d)
    if cfg.pre_norm:
        norm("enc.final", d)

    dense("mlm.l1", d, d)
    dense("mlm.l2", d, cfg.vocab_size)
    dense("itm", d, 2)
    dense("pair", d, 1)
    return params


def count_params(params: dict[str, Tensor], prefix: str = "") -> int:
    return sum(t.data.size for name, t in params.items() if name.startswith(prefix))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Expected name -> shape map for a config (checkpoint compatibility checks)."""
    return {k: t.shape for k, t in init_params(cfg, np.random.default_rng(0)).items()}


FORBIDDEN_PARAM_WORDS = ("mask", "modality", "segment")


def audit_parameter_names(params: dict[str, Tensor]) -> list[str]:
    """Names suggesting a dedicated mask/modality/segment embedding (must be
    empty: the [MASK] row lives inside word_emb and nothing marks modality)."""
    return [
        name
        for name in params
        if any(word in name.lower() for word in FORBIDDEN_PARAM_WORDS)
    ]


# ---------------------------------------------------------------------------
# assembly


@dataclass(frozen=True)
class IndexMap:
    """Ordered (name, range) segments that exactly tile the sequence."""

    length: int
    segments: tuple[tuple[str, range], ...]

    def span(self, name: str) -> range:
        for seg, rng_ in self.segments:
            if seg == name:
                return rng_
        raise KeyError(f"no segment named {name!r}")

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.segments)

    def check_partition(self) -> None:
        pos = 0
        for name, rng_ in self.segments:
            if rng_.start != pos or rng_.step != 1:
                raise ValueError(f"segment {name!r} breaks the partition at {pos}")
            pos = rng_.stop
        if pos != self.length:
            raise ValueError(f"segments cover {pos} of {self.length} positions")


def _assemble_parts(parts, params, batch: int) -> tuple[Tensor, IndexMap]:
    """parts: ordered (name, Tensor | special token id) with Tensors (B, L, d)."""
    pieces, segments, pos = [], [], 0
    for name, part in parts:
        if isinstance(part, Tensor):
            pieces.append(part)
            length = part.shape[1]
        else:
            pieces.append(embedding(params["word_emb"], np.full((batch, 1), part)))
            length = 1
        segments.append((name, range(pos, pos + length)))
        pos += length
    seq = concat(pieces, axis=1)
    imap = IndexMap(pos, tuple(segments))
    imap.check_partition()
    return seq, imap


def assemble(
    text_emb: Tensor, image_emb: Tensor, params: dict, cfg: ModelConfig
) -> tuple[Tensor, IndexMap]:
    """[CLS] text [SEP] image for one pre-train micro-batch; adds positions."""
    batch = text_emb.shape[0]
    length = 2 + text_emb.shape[1] + image_emb.shape[1]
    if length > cfg.max_seq:
        raise ValueError(f"assembled length {length} exceeds max_seq {cfg.max_seq}")
    t = add_positions(text_emb, params["pos_text"])
    im = add_positions(image_emb, params["pos_img"])
    return _assemble_parts(
        [("cls", Vocab.CLS), ("text", t), ("sep", Vocab.SEP), ("image", im)], params, batch
    )


def assemble_pair(pair: PairInput, params: dict, cfg: ModelConfig) -> tuple[Tensor, IndexMap]:
    """[CLS] tA [SEP] imgA [SEP] tB [SEP] imgB; dropped segments are omitted
    while the separators stay, so every present segment keeps its delimiter."""
    present = [s for s in (pair.text_a, pair.image_a, pair.text_b, pair.image_b) if s is not None]
    if not present:
        raise ValueError("pair input has no segments")
    batch = present[0].shape[0]
    length = 4 + sum(s.shape[1] for s in present)
    if length > cfg.max_seq_pair:
        raise ValueError(f"assembled pair length {length} exceeds {cfg.max_seq_pair}")

    def with_pos(seg, table):
        return None if seg is None else add_positions(seg, params[table])

    parts = [("cls", Vocab.CLS)]
    for name, seg, table in (
        ("text_a", pair.text_a, "pos_text"),
        ("image_a", pair.image_a, "pos_img"),
        ("text_b", pair.text_b, "pos_text"),
        ("image_b", pair.image_b, "pos_img"),
    ):
        seg = with_pos(seg, table)
        if seg is not None:
            parts.append((name, seg))
        if name != "image_b":  # separator after each of the first three slots
            parts.append((f"sep_{name}", Vocab.SEP))
    return _assemble_parts(parts, params, batch)


# ---------------------------------------------------------------------------
# transformer encoder


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return x * Tensor(keep)


def _attention(x: Tensor, params: dict, prefix: str, cfg: ModelConfig, rng) -> Tensor:
    b, s, d = x.shape
    heads, dh = cfg.n_heads, d // cfg.n_heads

    def proj(name):
        t = matmul(x, params[f"{prefix}.w{name}"]) + params[f"{prefix}.b{name}"]
        return transpose(reshape(t, (b, s, heads, dh)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    att = _dropout(softmax(scores, axis=-1), cfg.dropout, rng)
    ctx = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (b, s, d))
    return matmul(ctx, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def _ffn(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = relu(matmul(x, params[f"{prefix}.l1.w"]) + params[f"{prefix}.l1.b"])
    return matmul(h, params[f"{prefix}.l2.w"]) + params[f"{prefix}.l2.b"]


def transformer_forward(
    seq: Tensor,
    params: dict,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encoder stack over an assembled sequence; rng=None disables dropout."""
    x = seq
    for i in range(cfg.n_layers):
        pre = f"enc.{i}"
        ln1 = (params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        ln2 = (params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        if cfg.pre_norm:
            a = _attention(layer_norm(x, *ln1), params, f"{pre}.attn", cfg, rng)
            x = x + _dropout(a, cfg.dropout, rng)
            f = _ffn(layer_norm(x, *ln2), params, f"{pre}.ffn")
            x = x + _dropout(f, cfg.dropout, rng)
        else:
            a = _attention(x, params, f"{pre}.attn", cfg, rng)
            x = layer_norm(x + _dropout(a, cfg.dropout, rng), *ln1)
            f = _ffn(x, params, f"{pre}.ffn")
            x = layer_norm(x + _dropout(f, cfg.dropout, rng), *ln2)
    if cfg.pre_norm:
        x = layer_norm(x, params["enc.final.g"], params["enc.final.b"])
    return check_finite(x, "transformer output")


# ---------------------------------------------------------------------------
# heads and losses


def mlm_logits(outputs: Tensor, rows, seq_cols, params: dict) -> Tensor:
    """Vocabulary logits at masked text steps (sequence coordinates)."""
    h = gather_positions(outputs, rows, seq_cols)  # (N, d)
    h = silu(matmul(h, params["mlm.l1.w"]) + params["mlm.l1.b"])
    return matmul(h, params["mlm.l2.w"]) + params["mlm.l2.b"]


def mlm_loss(logits: Tensor, target_ids, vocab_size: int) -> tuple[Tensor, bool]:
    """Mean NLL over masked steps; (0, skipped=True) when nothing was masked."""
    ids = np.asarray(target_ids, dtype=np.int64)
    n = len(ids)
    if n == 0:
        return Tensor(0.0), True
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError(f"target id out of range for vocab of {vocab_size}")
    logp = log_softmax(logits, axis=1)
    onehot = np.zeros((n, vocab_size))
    onehot[np.arange(n), ids] = 1.0
    return tsum(logp * Tensor(onehot)) * (-1.0 / n), False


def decode_image(outputs: Tensor, image_span, params: dict, cfg: ModelConfig) -> Tensor:
    """Transformer outputs at image steps -> reconstructed (B, H, W, 3) image.

    Row-major grid reshape, then three 2x upsampling stages (transposed convs
    realized as matmul + depth-to-space), sigmoid at the end.
    """
    idx = np.asarray(list(image_span), dtype=np.intp)
    if len(idx) != cfg.image_len:
        raise ValueError(f"expected {cfg.image_len} image steps, got {len(idx)}")
    g = cfg.grid_side
    h = index_select(outputs, 1, idx)
    h = reshape(h, (h.shape[0], g, g, h.shape[2]))
    h = relu(deconv_block(h, params["img_dec.d0.w"], params["img_dec.d0.b"]))
    h = relu(deconv_block(h, params["img_dec.d1.w"], params["img_dec.d1.b"]))
    return sigmoid(deconv_block(h, params["img_dec.d2.w"], params["img_dec.d2.b"]))


def recon_loss(recon: Tensor, original: np.ndarray) -> Tensor:
    """Per-pixel SSE over channels on the FULL image, averaged over pixels
    and batch (masked and unmasked regions both count)."""
    target = original.data if isinstance(original, Tensor) else np.asarray(original)
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: recon {recon.shape} vs original {target.shape}")
    sse = tsum(square(recon - Tensor(target)), axis=3)  # (B, H, W)
    return tmean(sse)


def _cls_vector(outputs: Tensor) -> Tensor:
    cls = index_select(outputs, 1, np.array([0]))
    return reshape(cls, (outputs.shape[0], outputs.shape[2]))


def itm_logits(outputs: Tensor, params: dict) -> Tensor:
    """2-class aligned/misaligned logits from the [CLS] vector."""
    return matmul(_cls_vector(outputs), params["itm.w"]) + params["itm.b"]


def itm_loss(logits: Tensor, labels) -> Tensor:
    """Cross-entropy against {aligned=1, misaligned=0}."""
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    logp = log_softmax(logits, axis=1)
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), y] = 1.0
    return tsum(logp * Tensor(onehot)) * (-1.0 / n)


def build_itm_negatives(
    images: np.ndarray, rng: np.random.Generator, rate: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """Misalign a Bernoulli(rate) subset by rotating its images one slot.

    Rotation guarantees every flagged item gets a different item's image; a
    singleton selection cannot be misaligned and stays positive.
    """
    batch = images.shape[0]
    if batch < 2 and rate > 0.0:
        raise ValueError("cannot build shuffled negatives from a batch of one")
    labels = np.ones(batch, dtype=np.int64)
    out = images.copy()
    sel = np.nonzero(rng.random(batch) < rate)[0]
    if len(sel) >= 2:
        out[sel] = images[np.roll(sel, 1)]
        labels[sel] = 0
    return out, labels


def pairwise_logit(outputs: Tensor, params: dict) -> Tensor:
    """Single match logit per pair item; sigmoid of it is the match score."""
    z = matmul(_cls_vector(outputs), params["pair.w"]) + params["pair.b"]
    return reshape(z, (outputs.shape[0],))


def pairwise_loss(logit: Tensor, labels) -> Tensor:
    """Binary cross-entropy on the match logit, computed via softplus."""
    y = Tensor(np.asarray(labels, dtype=np.float64))
    return tmean(softplus(logit) - logit * y)


def pairwise_score(logit: Tensor) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-logit.data))


# ---------------------------------------------------------------------------
# full forward passes


def pretrain_losses(
    params: dict,
    cfg: ModelConfig,
    token_ids: np.ndarray,
    images: np.ndarray,
    plan: MaskPlan,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, bool, Tensor]:
    """Masked forward for one micro-batch -> (mlm_loss, mlm_skipped, recon_loss).

    The reconstruction target is the original full image regardless of which
    grid steps were masked.
    """
    t = embed_text(token_ids, params["word_emb"])
    im = embed_image(Tensor(images), params)
    t_masked, im_masked, targets = apply_masking(t, im, plan, params, token_ids)
    seq, imap = assemble(t_masked, im_masked, params, cfg)
    out = transformer_forward(seq, params, cfg, rng)
    text_start = imap.span("text").start
    logits = mlm_logits(out, targets.rows, targets.cols + text_start, params)
    ml, skipped = mlm_loss(logits, targets.ids, cfg.vocab_size)
    recon = decode_image(out, imap.span("image"), params, cfg)
    return ml, skipped, recon_loss(recon, images)


def itm_forward(
    params: dict,
    cfg: ModelConfig,
    token_ids: np.ndarray,
    images: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Unmasked forward over a (partly shuffled) batch -> ITM loss.

    Runs separately from the masked pass so the MLM/RECON losses always see
    aligned image-text pairs.
    """
    t = embed_text(token_ids, params["word_emb"])
    im = embed_image(Tensor(images), params)
    seq, _ = assemble(t, im, params, cfg)
    out = transformer_forward(seq, params, cfg, rng)
    return itm_loss(itm_logits(out, params), labels)


def pair_forward(
    params: dict,
    cfg: ModelConfig,
    tokens_a: np.ndarray,
    images_a: np.ndarray,
    tokens_b: np.ndarray,
    images_b: np.ndarray,
    mode: MdoMode = MdoMode.IMAGE_TEXT,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pair-task forward -> (B,) match logits. Never constructs a mask plan;
    dropped modalities are omitted from the sequence entirely."""
    need_text = mode is not MdoMode.IMAGE_ONLY
    need_image = mode is not MdoMode.TEXT_ONLY
    w = params["word_emb"]
    pair = PairInput(
        text_a=embed_text(tokens_a, w) if need_text else None,
        image_a=embed_image(Tensor(images_a), params) if need_image else None,
        text_b=embed_text(tokens_b, w) if need_text else None,
        image_b=embed_image(Tensor(images_b), params) if need_image else None,
    )
    pair = apply_mdo(pair, mode)
    seq, _ = assemble_pair(pair, params, cfg)
    out = transformer_forward(seq, params, cfg, rng)
    return pairwise_logit(out, params)
