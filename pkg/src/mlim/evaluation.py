"""Cross-modality probes, the PR-AUC metric, the ablation harness, reports.

Probes measure how much one modality helps the other: sweep a masking
probability on one modality while substituting the OTHER modality per
condition (original / random / blank). Masks are drawn once per (item,
sweep point) from a dedicated stream, so the masked modality's inputs are
bit-identical across conditions and only the substituted modality varies.

PR-AUC is Average Precision with descending-score tie groups. The ablation
harness pre-trains and fine-tunes a grid of loss/masking/dropout variants
under identical seeds, data order, and initial parameters (hash-audited).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .autodiff import Tensor, no_grad
from .data import Corpus
from .embedding import embed_image, embed_text
from .masking import MAMConfig, MaskPlan, MdoConfig, apply_masking
from .model import (
    ModelConfig,
    assemble,
    decode_image,
    mlm_logits,
    transformer_forward,
)
from .rng import stream_rng
from .training import (
    FinetuneSettings,
    PairArrays,
    PretrainSettings,
    TrainResult,
    finetune,
    load_checkpoint,
    pretrain,
    score_pairs,
)


class ImageCondition(str, Enum):
    ORIGINAL = "original"
    RANDOM_IMAGE = "random_image"
    GRAY_IMAGE = "gray_image"


class TextCondition(str, Enum):
    ORIGINAL = "original"
    RANDOM_TEXT = "random_text"
    EMPTY_TEXT = "empty_text"


@dataclass(frozen=True)
class ProbePoint:
    mask_prob: float
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class ProbeCurve:
    task: str  # "mlm" | "recon"
    condition: str
    points: tuple[ProbePoint, ...]
    skipped_probs: tuple[float, ...] = ()

    def mean_at(self, prob: float) -> float:
        for p in self.points:
            if p.mask_prob == prob:
                return p.mean
        raise KeyError(f"no probe point at mask_prob={prob}")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "condition": self.condition,
            "points": [vars(p) for p in self.points],
            "skipped_probs": list(self.skipped_probs),
        }

    @staticmethod
    def from_dict(d: dict) -> "ProbeCurve":
        return ProbeCurve(
            d["task"],
            d["condition"],
            tuple(ProbePoint(**p) for p in d["points"]),
            tuple(d.get("skipped_probs", ())),
        )


def draw_masks(rng: np.random.Generator, n: int, length: int, prob: float) -> np.ndarray:
    """Per-item Bernoulli masks, each row redrawn until it is non-empty so
    every item contributes at every sweep point."""
    masks = np.empty((n, length), dtype=bool)
    for i in range(n):
        row = rng.random(length) < prob
        while not row.any():
            row = rng.random(length) < prob
        masks[i] = row
    return masks


def _partner_indices(rng: np.random.Generator, n: int) -> np.ndarray:
    """A uniformly resampled OTHER item for each item."""
    if n < 2:
        raise ValueError("need at least two items to resample partners")
    partner = rng.integers(n, size=n)
    clash = partner == np.arange(n)
    while clash.any():
        partner[clash] = rng.integers(n, size=int(clash.sum()))
        clash = partner == np.arange(n)
    return partner


def _per_item_mlm(params, cfg, tokens, images, plan) -> np.ndarray:
    """Mean NLL over each item's masked text steps (no graph built)."""
    t = embed_text(tokens, params["word_emb"])
    im = embed_image(Tensor(images), params)
    t_m, im_m, targets = apply_masking(t, im, plan, params, tokens)
    seq, imap = assemble(t_m, im_m, params, cfg)
    out = transformer_forward(seq, params, cfg, rng=None)
    text_start = imap.span("text").start
    logits = mlm_logits(out, targets.rows, targets.cols + text_start, params)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(len(targets)), targets.ids]
    batch = tokens.shape[0]
    sums = np.bincount(targets.rows, weights=nll, minlength=batch)
    counts = np.bincount(targets.rows, minlength=batch)
    if (counts == 0).any():
        raise ValueError("an item had no masked text steps")
    return sums / counts


def _per_item_recon(params, cfg, tokens, images, plan) -> np.ndarray:
    """Per-item full-image reconstruction loss (channel SSE, pixel mean)."""
    t = embed_text(tokens, params["word_emb"])
    im = embed_image(Tensor(images), params)
    t_m, im_m, _ = apply_masking(t, im, plan, params, tokens)
    seq, imap = assemble(t_m, im_m, params, cfg)
    out = transformer_forward(seq, params, cfg, rng=None)
    recon = decode_image(out, imap.span("image"), params, cfg)
    sse = ((recon.data - images) ** 2).sum(axis=3)
    return sse.mean(axis=(1, 2))


def probe_mlm(
    params: dict,
    cfg: ModelConfig,
    corpus: Corpus,
    condition: ImageCondition,
    mask_probs,
    seed: int,
    gray_level: float = 0.5,
    batch: int = 32,
    n_items: int | None = None,
) -> ProbeCurve:
    """Masked-word loss vs text-mask probability under an image condition."""
    n = len(corpus) if n_items is None else min(n_items, len(corpus))
    if n == 0:
        raise ValueError("empty probe dataset")
    text_len = corpus.tokens.shape[1]
    points, skipped = [], []
    for pi, prob in enumerate(mask_probs):
        if prob <= 0.0:
            skipped.append(prob)
            continue
        masks = draw_masks(stream_rng(seed, "probe", 0, pi, 0), n, text_len, prob)
        partner = None
        if condition is ImageCondition.RANDOM_IMAGE:
            partner = _partner_indices(stream_rng(seed, "probe", 0, pi, 1), n)
        losses = np.empty(n)
        with no_grad():
            for lo in range(0, n, batch):
                idx = np.arange(lo, min(lo + batch, n))
                if condition is ImageCondition.ORIGINAL:
                    images = corpus.images_float(idx)
                elif condition is ImageCondition.RANDOM_IMAGE:
                    images = corpus.images_float(partner[idx])
                else:
                    images = np.full(
                        (len(idx), cfg.image_size, cfg.image_size, 3), gray_level
                    )
                plan = MaskPlan(
                    masks[idx], np.zeros((len(idx), cfg.image_len), dtype=bool), prob, 0.0
                )
                losses[idx] = _per_item_mlm(params, cfg, corpus.tokens[idx], images, plan)
        points.append(ProbePoint(float(prob), float(losses.mean()), float(losses.std()), n))
    return ProbeCurve("mlm", condition.value, tuple(points), tuple(skipped))


def probe_recon(
    params: dict,
    cfg: ModelConfig,
    corpus: Corpus,
    condition: TextCondition,
    mask_probs,
    seed: int,
    batch: int = 32,
    n_items: int | None = None,
) -> ProbeCurve:
    """Reconstruction loss vs image-mask probability under a text condition."""
    n = len(corpus) if n_items is None else min(n_items, len(corpus))
    if n == 0:
        raise ValueError("empty probe dataset")
    text_len = corpus.tokens.shape[1]
    points, skipped = [], []
    for pi, prob in enumerate(mask_probs):
        if prob <= 0.0:
            skipped.append(prob)
            continue
        masks = draw_masks(stream_rng(seed, "probe", 1, pi, 0), n, cfg.image_len, prob)
        partner = None
        if condition is TextCondition.RANDOM_TEXT:
            partner = _partner_indices(stream_rng(seed, "probe", 1, pi, 1), n)
        losses = np.empty(n)
        with no_grad():
            for lo in range(0, n, batch):
                idx = np.arange(lo, min(lo + batch, n))
                images = corpus.images_float(idx)
                if condition is TextCondition.ORIGINAL:
                    tokens = corpus.tokens[idx]
                elif condition is TextCondition.RANDOM_TEXT:
                    tokens = corpus.tokens[partner[idx]]
                else:  # specials-only input: the text segment is empty
                    tokens = np.zeros((len(idx), 0), dtype=np.int64)
                plan = MaskPlan(
                    np.zeros((len(idx), tokens.shape[1]), dtype=bool), masks[idx], 0.0, prob
                )
                losses[idx] = _per_item_recon(params, cfg, tokens, images, plan)
        points.append(ProbePoint(float(prob), float(losses.mean()), float(losses.std()), n))
    return ProbeCurve("recon", condition.value, tuple(points), tuple(skipped))


def relative_degradation(curve: ProbeCurve, baseline: ProbeCurve) -> float:
    """Mean over shared sweep points of (curve - baseline) / baseline."""
    probs = [p.mask_prob for p in baseline.points if any(
        q.mask_prob == p.mask_prob for q in curve.points
    )]
    if not probs:
        raise ValueError("curves share no sweep points")
    degs = [
        (curve.mean_at(p) - baseline.mean_at(p)) / baseline.mean_at(p) for p in probs
    ]
    return float(np.mean(degs))


def asymmetry_metric(
    mlm_original: ProbeCurve,
    mlm_random: ProbeCurve,
    recon_original: ProbeCurve,
    recon_random: ProbeCurve,
) -> float:
    """How much more random text degrades reconstruction than random images
    degrade masked-word prediction (report-only; positive = text matters more
    to the image side than vice versa)."""
    return relative_degradation(recon_random, recon_original) - relative_degradation(
        mlm_random, mlm_original
    )


# ---------------------------------------------------------------------------
# PR-AUC


def pr_auc(scores, labels) -> float:
    """Average Precision: sort by score descending, treat tied scores as one
    threshold group, AP = sum over groups of (R_n - R_{n-1}) * P_n."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal-length 1-D")
    if len(s) == 0 or not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be non-empty and binary")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # group boundaries: last index of each run of equal scores
    last = np.nonzero(np.diff(s_sorted))[0]
    bounds = np.concatenate([last, [len(s_sorted) - 1]])
    precision = tp[bounds] / (tp[bounds] + fp[bounds])
    recall = tp[bounds] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


# ---------------------------------------------------------------------------
# ablation harness


@dataclass(frozen=True)
class Variant:
    """One pre-train/fine-tune recipe; MLM is always on."""

    name: str
    recon: bool
    itm: bool
    masking: str  # "mam" | "naive"
    mdo: bool = True

    def pretrain_key(self, seed: int) -> tuple:
        return (self.recon, self.itm, self.masking, seed)


DEFAULT_VARIANTS = (
    Variant("RECON + MLM + MAM", recon=True, itm=False, masking="mam"),
    Variant("RECON + ITM + MLM + MAM", recon=True, itm=True, masking="mam"),
    Variant("RECON + MLM + naive", recon=True, itm=False, masking="naive"),
    Variant("ITM + MLM + MAM", recon=False, itm=True, masking="mam"),
    Variant("ITM + MLM + naive", recon=False, itm=True, masking="naive"),
    Variant("RECON + MLM + MAM (no MDO)", recon=True, itm=False, masking="mam", mdo=False),
)


@dataclass(frozen=True)
class AblationRow:
    name: str
    seed: str  # "0", "1", ... or "median"
    pr_auc: float


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name.lower()).strip("_")


def run_ablation(
    corpus: Corpus,
    pairs_train: PairArrays,
    pairs_test: PairArrays,
    model_cfg: ModelConfig,
    pre_base: PretrainSettings,
    ft_settings: FinetuneSettings,
    mam: MAMConfig,
    mdo: MdoConfig,
    seeds,
    out_dir,
    variants=DEFAULT_VARIANTS,
    naive_prob: float = 0.2,
) -> tuple[list[AblationRow], dict]:
    """Pre-train + fine-tune every variant over every seed.

    Per seed, every variant consumes the same initial parameters and data
    order (sha256-audited); pre-train runs are shared between variants that
    differ only at fine-tune time.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache: dict[tuple, TrainResult] = {}
    rows: list[AblationRow] = []
    audit: dict[int, dict[str, str]] = {}

    for variant in variants:
        per_seed = []
        for seed in seeds:
            key = variant.pretrain_key(seed)
            if key not in cache:
                settings = replace(
                    pre_base,
                    w_recon=1.0 if variant.recon else 0.0,
                    w_itm=1.0 if variant.itm else 0.0,
                    use_mam=variant.masking == "mam",
                    naive_prob=None if variant.masking == "mam" else naive_prob,
                )
                run_name = f"pre_{int(variant.recon)}{int(variant.itm)}_{variant.masking}_s{seed}"
                cache[key] = pretrain(
                    corpus, model_cfg, settings, mam, seed, out / run_name
                )
                seen = audit.setdefault(int(seed), {})
                for label, value in (
                    ("init", cache[key].init_hash),
                    ("data", cache[key].data_hash),
                ):
                    if seen.setdefault(label, value) != value:
                        raise RuntimeError(
                            f"fairness audit failed: {label} hash differs for seed {seed}"
                        )
            ft_mdo = mdo if variant.mdo else MdoConfig(enabled=False)
            ft_out = out / f"ft_{_slug(variant.name)}_s{seed}"
            result = finetune(
                pairs_train, cache[key].checkpoint, model_cfg, ft_settings,
                ft_mdo, seed, ft_out,
            )
            params, _, _ = load_checkpoint(result.checkpoint)
            scores = score_pairs(params, model_cfg, pairs_test)
            auc = pr_auc(scores, pairs_test.labels)
            rows.append(AblationRow(variant.name, str(seed), auc))
            per_seed.append(auc)
        rows.append(AblationRow(variant.name, "median", float(np.median(per_seed))))
    return rows, {str(k): v for k, v in audit.items()}


# ---------------------------------------------------------------------------
# report emission


def _svg_chart(title: str, xs, ys, x_label: str, y_label: str) -> str:
    """A fixed-size, self-contained line chart; byte-deterministic output."""
    width, height = 480, 320
    left, right, top, bottom = 60, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom
    x_min, x_max = min(xs), max(xs)
    x_span = (x_max - x_min) or 1.0
    y_max = max(max(ys), 1e-12) * 1.1
    px = [left + (x - x_min) / x_span * pw for x in xs]
    py = [top + ph - y / y_max * ph for y in ys]

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for x, xp in zip(xs, px):
        parts.append(
            f'<line x1="{xp:.2f}" y1="{top + ph}" x2="{xp:.2f}" y2="{top + ph + 4}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{xp:.2f}" y="{top + ph + 18}" text-anchor="middle" font-size="10" '
            f'font-family="sans-serif">{x:.6g}</text>'
        )
    for k in range(5):
        yv = y_max * k / 4
        yp = top + ph - yv / y_max * ph
        parts.append(
            f'<line x1="{left - 4}" y1="{yp:.2f}" x2="{left}" y2="{yp:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{left - 8}" y="{yp + 3:.2f}" text-anchor="end" font-size="10" '
            f'font-family="sans-serif">{yv:.4g}</text>'
        )
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    for x, y in zip(px, py):
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="#1f77b4"/>')
    parts.append(
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11" '
        f'font-family="sans-serif">{escape(x_label)}</text>'
    )
    parts.append(
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="11" '
        f'font-family="sans-serif" transform="rotate(-90 14 {top + ph / 2:.1f})">'
        f"{escape(y_label)}</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(curves, rows, out_dir) -> list[Path]:
    """CSV per probe curve and per ablation table, plus an SVG per curve."""
    curves = list(curves)
    rows = list(rows)
    if not curves and not rows:
        raise ValueError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for curve in curves:
        stem = f"probe_{curve.task}_{curve.condition}"
        csv_path = out / f"{stem}.csv"
        lines = ["mask_prob,mean,std,n"]
        for p in curve.points:
            lines.append(f"{p.mask_prob:.10g},{p.mean:.10g},{p.std:.10g},{p.n}")
        csv_path.write_text("\n".join(lines) + "\n", encoding="ascii")
        written.append(csv_path)
        xs = [p.mask_prob for p in curve.points]
        ys = [p.mean for p in curve.points]
        svg_path = out / f"{stem}.svg"
        loss_name = "MLM loss" if curve.task == "mlm" else "RECON loss"
        svg_path.write_text(
            _svg_chart(
                f"{curve.task} probe, {curve.condition}", xs, ys, "mask probability", loss_name
            ),
            encoding="ascii",
        )
        written.append(svg_path)
    if rows:
        csv_path = out / "ablation.csv"
        lines = ["name,seed,pr_auc"]
        for r in rows:
            lines.append(f"{r.name},{r.seed},{r.pr_auc:.10g}")
        csv_path.write_text("\n".join(lines) + "\n", encoding="ascii")
        written.append(csv_path)
    return written
