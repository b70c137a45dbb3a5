"""Optimization loops, optimizer, checkpointing.

Pre-training: per micro-batch, draw one masking mode, one forward/backward
over the weighted loss sum, one Adam update. Fine-tuning: binary
cross-entropy on the pairwise head with one modality-dropout mode per
micro-batch, no masking anywhere, and the image decoder dropped from the
parameter set before the first step.

Checkpoints are a JSON header (version, entry names/shapes/offsets, config
echo) followed by one contiguous little-endian float32 payload; loading and
re-saving reproduces the file bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NumericsError, Tensor, no_grad
from .data import Corpus, PairExample
from .masking import (
    MAMConfig,
    MdoConfig,
    MdoMode,
    make_plan,
    naive_plan,
    sample_mdo_mode,
    sample_mode,
)
from .model import (
    ModelConfig,
    build_itm_negatives,
    init_params,
    itm_forward,
    pair_forward,
    pairwise_loss,
    pretrain_losses,
)
from .rng import stream_rng


class CheckpointError(RuntimeError):
    """Corrupt, truncated, version- or shape-mismatched checkpoint file."""


class TrainingAborted(RuntimeError):
    """Non-finite loss; carries the last good checkpoint path (or None)."""

    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(
    params: dict[str, Tensor],
    lr: float = 8e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adam_update(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: AdamState
) -> None:
    """Standard bias-corrected Adam, epsilon added outside the square root."""
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p.data -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


# ---------------------------------------------------------------------------
# checkpoint format

CKPT_MAGIC = b"MLIMCKPT"
CKPT_VERSION = 1


def save_checkpoint(
    params: dict[str, Tensor], opt: AdamState, config: dict, path
) -> Path:
    """Write params + Adam moments as float32; header describes the layout."""
    path = Path(path)
    entries = []
    chunks = []
    offset = 0

    def put(role: str, name: str, arr: np.ndarray):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {"role": role, "name": name, "shape": list(arr.shape), "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)

    for name, t in params.items():
        put("param", name, t.data)
    for name in params:
        put("adam_m", name, opt.m[name])
    for name in params:
        put("adam_v", name, opt.v[name])

    header = {
        "version": CKPT_VERSION,
        "dtype": "<f4",
        "step": opt.step,
        "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        "entries": entries,
        "payload_bytes": offset,
        "config": config,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)
    return path


def load_checkpoint(
    path, expect_shapes: dict[str, tuple] | None = None
) -> tuple[dict[str, Tensor], AdamState, dict]:
    """Read a checkpoint back into float64 tensors plus optimizer state."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header_end = 16 + hlen
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[16:header_end].decode("utf-8"))
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: version {header.get('version')} != supported {CKPT_VERSION}"
        )
    if header.get("dtype") != "<f4":
        raise CheckpointError(f"{path}: unsupported dtype {header.get('dtype')}")
    payload = raw[header_end:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)"
        )

    expected_offset = 0
    arrays: dict[tuple[str, str], np.ndarray] = {}
    for e in header["entries"]:
        shape = tuple(e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if e["offset"] != expected_offset:
            raise CheckpointError(f"{path}: corrupt offsets at entry {e['name']!r}")
        expected_offset += nbytes
        buf = payload[e["offset"] : e["offset"] + nbytes]
        arrays[(e["role"], e["name"])] = (
            np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64)
        )
    if expected_offset != header["payload_bytes"]:
        raise CheckpointError(f"{path}: entries do not tile the payload")

    params = {
        name: Tensor(arr, requires_grad=True)
        for (role, name), arr in arrays.items()
        if role == "param"
    }
    if expect_shapes is not None:
        for name, shape in expect_shapes.items():
            if name not in params:
                raise CheckpointError(f"{path}: missing parameter {name!r}")
            if params[name].shape != tuple(shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {name!r}: "
                    f"file {params[name].shape} vs expected {tuple(shape)}"
                )
    adam = header["adam"]
    opt = AdamState(
        lr=adam["lr"],
        beta1=adam["beta1"],
        beta2=adam["beta2"],
        eps=adam["eps"],
        step=header["step"],
        m={name: arr for (role, name), arr in arrays.items() if role == "adam_m"},
        v={name: arr for (role, name), arr in arrays.items() if role == "adam_v"},
    )
    return params, opt, header["config"]


# ---------------------------------------------------------------------------
# batching


def micro_batches(n_items: int, micro: int, rng: np.random.Generator):
    """Endless stream of index arrays: epoch permutations sliced into
    micro-batches, remainder dropped."""
    if micro > n_items:
        raise ValueError(f"micro-batch {micro} exceeds dataset size {n_items}")
    while True:
        perm = rng.permutation(n_items)
        for i in range(0, n_items - micro + 1, micro):
            yield perm[i : i + micro]


# ---------------------------------------------------------------------------
# pre-training


@dataclass(frozen=True)
class PretrainSettings:
    """Optimization hyper-parameters for the pre-train loop."""

    steps: int = 2000
    batch_size: int = 32
    micro_batch: int = 8
    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    w_mlm: float = 1.0
    w_recon: float = 1.0
    w_itm: float = 0.0
    use_mam: bool = True
    naive_prob: float | None = None  # fixed-rate baseline; excludes use_mam
    checkpoint_every: int = 500

    def validate(self) -> None:
        if self.batch_size % self.micro_batch != 0:
            raise ValueError(
                f"micro-batch {self.micro_batch} must divide batch {self.batch_size}"
            )
        if self.use_mam and self.naive_prob is not None:
            raise ValueError("mode-aware masking and naive fixed-rate masking both enabled")
        if not self.use_mam and self.naive_prob is None:
            raise ValueError("naive_prob required when mode-aware masking is off")
        if self.steps < 1 or self.lr < 0:
            raise ValueError("bad steps or learning rate")


@dataclass
class StepLosses:
    step: int
    mode: str
    mlm: float
    recon: float
    itm: float
    total: float
    mlm_skipped: bool


def pretrain_step(
    params: dict[str, Tensor],
    model_cfg: ModelConfig,
    opt: AdamState,
    tokens: np.ndarray,
    images: np.ndarray,
    plan,
    settings: PretrainSettings,
    drop_rng: np.random.Generator | None = None,
    itm_rng: np.random.Generator | None = None,
) -> StepLosses:
    """One forward/backward over weighted MLM+RECON (+ITM) and one Adam update."""
    ml, skipped, rl = pretrain_losses(params, model_cfg, tokens, images, plan, drop_rng)
    total = ml * settings.w_mlm + rl * settings.w_recon
    il = 0.0
    if settings.w_itm > 0.0:
        if itm_rng is None:
            raise ValueError("ITM loss enabled but no rng for negatives")
        shuffled, labels = build_itm_negatives(images, itm_rng)
        itm = itm_forward(params, model_cfg, tokens, shuffled, labels, drop_rng)
        total = total + itm * settings.w_itm
        il = itm.item()
    if not np.isfinite(total.item()):
        raise NumericsError(f"non-finite total loss {total.item()}")
    total.backward()
    grads = collect_grads(params)
    zero_grads(params)
    clip_global_norm(grads, settings.grad_clip)
    adam_update(params, grads, opt)
    mode = plan.mode.value if plan.mode is not None else "naive"
    return StepLosses(opt.step, mode, ml.item(), rl.item(), il, total.item(), skipped)


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    losses: list[StepLosses]
    init_hash: str = ""  # sha256 of initial parameter bytes (fairness audits)
    data_hash: str = ""  # sha256 of the consumed micro-batch index order


def _hash_params(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def pretrain(
    corpus: Corpus,
    model_cfg: ModelConfig,
    settings: PretrainSettings,
    mam: MAMConfig,
    seed: int,
    out_dir,
    config_echo: dict | None = None,
) -> TrainResult:
    """Full pre-training run; writes checkpoints and a CSV loss log."""
    settings.validate()
    mam.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = init_params(model_cfg, stream_rng(seed, "init"))
    init_hash = _hash_params(params)
    opt = init_adam(params, settings.lr, settings.beta1, settings.beta2, settings.eps)
    data_rng = stream_rng(seed, "data")
    mask_rng = stream_rng(seed, "mask")
    drop_rng = stream_rng(seed, "dropout") if model_cfg.dropout > 0 else None
    itm_rng = stream_rng(seed, "itm") if settings.w_itm > 0 else None
    echo = config_echo or {}

    data_hash = hashlib.sha256()
    batches = micro_batches(len(corpus), settings.micro_batch, data_rng)
    text_len = corpus.tokens.shape[1]
    image_len = model_cfg.image_len
    log_path = out / "pretrain_log.csv"
    last_ckpt: Path | None = None
    losses: list[StepLosses] = []

    with open(log_path, "w", encoding="ascii") as log:
        log.write("step,mode,mlm_loss,recon_loss,total\n")
        for _ in range(settings.steps):
            idx = next(batches)
            data_hash.update(np.ascontiguousarray(idx).tobytes())
            tokens = corpus.tokens[idx]
            images = corpus.images_float(idx)
            if settings.use_mam:
                mode = sample_mode(mask_rng, mam)
                plan = make_plan(
                    mode, text_len, image_len, mask_rng, mam,
                    batch=len(idx), text_ids=tokens,
                )
            else:
                plan = naive_plan(
                    settings.naive_prob, text_len, image_len, mask_rng,
                    batch=len(idx), text_ids=tokens,
                )
            try:
                sl = pretrain_step(
                    params, model_cfg, opt, tokens, images, plan, settings,
                    drop_rng, itm_rng,
                )
            except NumericsError as e:
                raise TrainingAborted(
                    f"aborted at step {opt.step + 1}: {e}", last_ckpt
                ) from e
            losses.append(sl)
            log.write(
                f"{sl.step},{sl.mode},{sl.mlm:.10g},{sl.recon:.10g},{sl.total:.10g}\n"
            )
            if settings.checkpoint_every and sl.step % settings.checkpoint_every == 0:
                last_ckpt = save_checkpoint(
                    params, opt, echo, out / f"checkpoint_{sl.step:06d}.ckpt"
                )
    final = save_checkpoint(params, opt, echo, out / "checkpoint_final.ckpt")
    return TrainResult(final, log_path, losses, init_hash, data_hash.hexdigest())


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass(frozen=True)
class FinetuneSettings:
    steps: int = 400
    batch_size: int = 32
    micro_batch: int = 8
    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    checkpoint_every: int = 200

    def validate(self) -> None:
        if self.batch_size % self.micro_batch != 0:
            raise ValueError(
                f"micro-batch {self.micro_batch} must divide batch {self.batch_size}"
            )
        if self.steps < 1 or self.lr < 0:
            raise ValueError("bad steps or learning rate")


@dataclass
class PairArrays:
    """Pair dataset flattened to arrays for batched training."""

    tokens_a: np.ndarray  # (N, L) int64
    tokens_b: np.ndarray
    images_a: np.ndarray  # (N, H, W, 3) uint8
    images_b: np.ndarray
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    @staticmethod
    def from_pairs(pairs: list[PairExample]) -> "PairArrays":
        to_u8 = lambda item: np.round(item.image() * 255.0).astype(np.uint8)
        return PairArrays(
            tokens_a=np.array([p.a.tokens for p in pairs], dtype=np.int64),
            tokens_b=np.array([p.b.tokens for p in pairs], dtype=np.int64),
            images_a=np.stack([to_u8(p.a) for p in pairs]),
            images_b=np.stack([to_u8(p.b) for p in pairs]),
            labels=np.array([p.label for p in pairs], dtype=np.int64),
        )

    def images_float(self, idx, side: str) -> np.ndarray:
        arr = self.images_a if side == "a" else self.images_b
        return arr[idx].astype(np.float64) / 255.0


def strip_decoder(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Fine-tuning drops the image decoder from the graph entirely."""
    return {k: v for k, v in params.items() if not k.startswith("img_dec.")}


def finetune_step(
    params: dict[str, Tensor],
    model_cfg: ModelConfig,
    opt: AdamState,
    pairs: PairArrays,
    idx: np.ndarray,
    mode: MdoMode,
    settings: FinetuneSettings,
    drop_rng: np.random.Generator | None = None,
) -> tuple[float, MdoMode]:
    logits = pair_forward(
        params,
        model_cfg,
        pairs.tokens_a[idx],
        pairs.images_float(idx, "a"),
        pairs.tokens_b[idx],
        pairs.images_float(idx, "b"),
        mode,
        drop_rng,
    )
    loss = pairwise_loss(logits, pairs.labels[idx])
    if not np.isfinite(loss.item()):
        raise NumericsError(f"non-finite pair loss {loss.item()}")
    loss.backward()
    grads = collect_grads(params)
    zero_grads(params)
    clip_global_norm(grads, settings.grad_clip)
    adam_update(params, grads, opt)
    return loss.item(), mode


def finetune(
    pairs: PairArrays,
    pretrained: Path,
    model_cfg: ModelConfig,
    settings: FinetuneSettings,
    mdo: MdoConfig,
    seed: int,
    out_dir,
    config_echo: dict | None = None,
    expect_shapes: dict[str, tuple] | None = None,
) -> TrainResult:
    """Fine-tune the pairwise head (and encoder) from a pre-trained checkpoint."""
    settings.validate()
    mdo.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full_params, _, _ = load_checkpoint(pretrained, expect_shapes)
    params = strip_decoder(full_params)
    opt = init_adam(params, settings.lr, settings.beta1, settings.beta2, settings.eps)
    data_rng = stream_rng(seed, "data")
    mdo_rng = stream_rng(seed, "mdo")
    drop_rng = stream_rng(seed, "dropout") if model_cfg.dropout > 0 else None
    echo = config_echo or {}

    batches = micro_batches(len(pairs), settings.micro_batch, data_rng)
    log_path = out / "finetune_log.csv"
    last_ckpt: Path | None = None
    losses: list[StepLosses] = []
    with open(log_path, "w", encoding="ascii") as log:
        log.write("step,mode,loss\n")
        for _ in range(settings.steps):
            idx = next(batches)
            mode = sample_mdo_mode(mdo_rng, mdo)
            try:
                value, mode = finetune_step(
                    params, model_cfg, opt, pairs, idx, mode, settings, drop_rng
                )
            except NumericsError as e:
                raise TrainingAborted(
                    f"aborted at step {opt.step + 1}: {e}", last_ckpt
                ) from e
            losses.append(StepLosses(opt.step, mode.value, 0.0, 0.0, 0.0, value, False))
            log.write(f"{opt.step},{mode.value},{value:.10g}\n")
            if settings.checkpoint_every and opt.step % settings.checkpoint_every == 0:
                last_ckpt = save_checkpoint(
                    params, opt, echo, out / f"checkpoint_{opt.step:06d}.ckpt"
                )
    final = save_checkpoint(params, opt, echo, out / "checkpoint_final.ckpt")
    return TrainResult(final, log_path, losses)


def score_pairs(
    params: dict[str, Tensor],
    model_cfg: ModelConfig,
    pairs: PairArrays,
    batch: int = 32,
) -> np.ndarray:
    """Match scores for every pair item (full image-text mode, no dropout)."""
    scores = np.empty(len(pairs))
    with no_grad():
        for lo in range(0, len(pairs), batch):
            idx = np.arange(lo, min(lo + batch, len(pairs)))
            logits = pair_forward(
                params,
                model_cfg,
                pairs.tokens_a[idx],
                pairs.images_float(idx, "a"),
                pairs.tokens_b[idx],
                pairs.images_float(idx, "b"),
                MdoMode.IMAGE_TEXT,
            )
            scores[idx] = 1.0 / (1.0 + np.exp(-logits.data))
    return scores
