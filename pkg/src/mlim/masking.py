"""Masking for pre-training and segment dropout for fine-tuning.

Pre-training draws one masking mode per micro-batch: one modality is masked
heavily while the other stays lightly masked (or both light). Masking is pure
embedding substitution, applied before positional rows are added: a masked
step's embedding is replaced by the single shared [MASK] word embedding and
the original embedding is multiplied by exactly zero, so its value cannot
leak downstream. There is no separate image-mask vector and no 80/10/10
style random-token corruption.

Fine-tuning never masks; it drops whole segments per micro-batch instead
(text-only / image-only / both present). Dropped segments are omitted from
the assembled sequence, not mask-substituted.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .autodiff import Tensor, index_select, reshape
from .data import Vocab


class MaskMode(str, Enum):
    HEAVY_IMAGE = "heavy_image"  # image masked at p_heavy, text at p_light
    HEAVY_TEXT = "heavy_text"  # text masked at p_heavy, image at p_light
    LIGHT_LIGHT = "light_light"  # both modalities at p_light


MODE_ORDER = (MaskMode.HEAVY_IMAGE, MaskMode.HEAVY_TEXT, MaskMode.LIGHT_LIGHT)


@dataclass(frozen=True)
class MAMConfig:
    """Modality-aware masking: probabilities plus mode draw weights."""

    p_heavy: float = 0.6
    p_light: float = 0.15
    mode_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if not 0.0 <= self.p_light <= self.p_heavy <= 1.0:
            raise ValueError(
                f"need 0 <= p_light <= p_heavy <= 1, got ({self.p_light}, {self.p_heavy})"
            )
        if len(self.mode_weights) != 3 or min(self.mode_weights) < 0 or sum(self.mode_weights) <= 0:
            raise ValueError(f"bad mode weights {self.mode_weights}")


def sample_mode(rng: np.random.Generator, cfg: MAMConfig) -> MaskMode:
    w = np.asarray(cfg.mode_weights, dtype=np.float64)
    return MODE_ORDER[rng.choice(3, p=w / w.sum())]


def mode_probs(mode: MaskMode, cfg: MAMConfig) -> tuple[float, float]:
    """(text_prob, image_prob) for a mode."""
    if mode is MaskMode.HEAVY_IMAGE:
        return cfg.p_light, cfg.p_heavy
    if mode is MaskMode.HEAVY_TEXT:
        return cfg.p_heavy, cfg.p_light
    return cfg.p_light, cfg.p_light


@dataclass(frozen=True)
class MaskPlan:
    """Per-position Bernoulli masks for one micro-batch."""

    text_mask: np.ndarray  # (B, L_text) bool
    image_mask: np.ndarray  # (B, L_image) bool
    p_text: float
    p_img: float
    mode: MaskMode | None = None


def _bernoulli_plan(
    rng: np.random.Generator,
    p_text: float,
    p_img: float,
    batch: int,
    text_len: int,
    image_len: int,
    text_ids: np.ndarray | None,
    mode: MaskMode | None,
) -> MaskPlan:
    # text drawn first, then image; special tokens are never maskable
    tm = rng.random((batch, text_len)) < p_text
    im = rng.random((batch, image_len)) < p_img
    if text_ids is not None:
        tm &= np.asarray(text_ids) > Vocab.UNK
    return MaskPlan(tm, im, p_text, p_img, mode)


def make_plan(
    mode: MaskMode,
    text_len: int,
    image_len: int,
    rng: np.random.Generator,
    cfg: MAMConfig,
    batch: int = 1,
    text_ids: np.ndarray | None = None,
) -> MaskPlan:
    """Independent per-position Bernoulli masks at the mode's rates."""
    if text_len <= 0 or image_len <= 0:
        raise ValueError(f"lengths must be positive, got ({text_len}, {image_len})")
    pt, pi = mode_probs(mode, cfg)
    return _bernoulli_plan(rng, pt, pi, batch, text_len, image_len, text_ids, mode)


def naive_plan(
    p: float,
    text_len: int,
    image_len: int,
    rng: np.random.Generator,
    batch: int = 1,
    text_ids: np.ndarray | None = None,
) -> MaskPlan:
    """Fixed-probability baseline: both modalities masked at the same rate,
    no mode sampling."""
    return _bernoulli_plan(rng, p, p, batch, text_len, image_len, text_ids, None)


@dataclass(frozen=True)
class MlmTargets:
    """Original ids at masked text positions, with their (item, step) coords."""

    rows: np.ndarray  # (N,) batch index of each masked text position
    cols: np.ndarray  # (N,) text position index
    ids: np.ndarray  # (N,) original token id

    def __len__(self) -> int:
        return len(self.ids)


def substitute(emb: Tensor, mask: np.ndarray, mask_row: Tensor) -> Tensor:
    """Replace masked steps of (B, L, d) `emb` with `mask_row` (shape (d,)).

    Computed as emb * (1 - m) + mask_row * m with m in {0, 1}; at masked
    steps the original embedding contributes exactly 0 to both value and
    gradient, and gradient flows into the mask row instead.
    """
    m = Tensor(mask.astype(np.float64)[:, :, None])
    keep = Tensor(1.0 - m.data)
    return emb * keep + reshape(mask_row, (1, 1, mask_row.shape[0])) * m


def apply_masking(
    text_emb: Tensor,
    image_emb: Tensor,
    plan: MaskPlan,
    params: dict,
    text_ids: np.ndarray,
) -> tuple[Tensor, Tensor, MlmTargets]:
    """Apply a plan to both modality embeddings (positions not yet added).

    Both modalities receive the same shared [MASK] row: the word-embedding
    table's [MASK] entry. Returns the masked sequences and the MLM targets
    (ids the masked text steps originally carried).
    """
    if plan.text_mask.shape != text_emb.shape[:2] or plan.image_mask.shape != image_emb.shape[:2]:
        raise ValueError(
            f"plan shapes {plan.text_mask.shape}/{plan.image_mask.shape} do not match "
            f"embeddings {text_emb.shape[:2]}/{image_emb.shape[:2]}"
        )
    mask_row = reshape(index_select(params["word_emb"], 0, np.array([Vocab.MASK])), (-1,))
    rows, cols = np.nonzero(plan.text_mask)
    targets = MlmTargets(rows, cols, np.asarray(text_ids)[rows, cols])
    return (
        substitute(text_emb, plan.text_mask, mask_row),
        substitute(image_emb, plan.image_mask, mask_row),
        targets,
    )


# ---------------------------------------------------------------------------
# modality dropout (fine-tuning)


class MdoMode(str, Enum):
    TEXT_ONLY = "text_only"
    IMAGE_ONLY = "image_only"
    IMAGE_TEXT = "image_text"


MDO_ORDER = (MdoMode.TEXT_ONLY, MdoMode.IMAGE_ONLY, MdoMode.IMAGE_TEXT)


@dataclass(frozen=True)
class MdoConfig:
    """Modality dropout during fine-tuning: mode draw weights."""

    enabled: bool = True
    mode_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if len(self.mode_weights) != 3 or min(self.mode_weights) < 0 or sum(self.mode_weights) <= 0:
            raise ValueError(f"bad mode weights {self.mode_weights}")


def sample_mdo_mode(rng: np.random.Generator, cfg: MdoConfig) -> MdoMode:
    if not cfg.enabled:
        return MdoMode.IMAGE_TEXT
    w = np.asarray(cfg.mode_weights, dtype=np.float64)
    return MDO_ORDER[rng.choice(3, p=w / w.sum())]


@dataclass(frozen=True)
class PairInput:
    """Embedded pair segments prior to assembly; dropped segments are None."""

    text_a: Tensor | None
    image_a: Tensor | None
    text_b: Tensor | None
    image_b: Tensor | None


def apply_mdo(pair_input: PairInput, mode: MdoMode) -> PairInput:
    """Drop whole segments per the mode; segments are omitted, never masked."""
    if mode is MdoMode.TEXT_ONLY:
        return replace(pair_input, image_a=None, image_b=None)
    if mode is MdoMode.IMAGE_ONLY:
        return replace(pair_input, text_a=None, text_b=None)
    return pair_input
