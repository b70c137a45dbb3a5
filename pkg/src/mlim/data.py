"""Synthetic image-caption corpus: single-shape scenes with templated captions.

Scenes are flat-background images containing one shape (circle, square, or
triangle) rasterized without anti-aliasing; the caption fully describes the
scene. Everything is a pure function of (spec | seed), so corpora and pair
datasets regenerate byte-identically.

On-disk formats: binary PPM (P6, maxval 255) per image, JSON-lines manifests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed file, invalid spec, or bad generator argument."""


# Named colors with fixed RGB intensities in [0, 1].
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (0.5, 0.5, 0.5),
}
COLORS = tuple(COLOR_RGB)
SHAPES = ("circle", "square", "triangle")
SIZE_RADIUS = {"small": 8, "medium": 12, "large": 16}
SIZES = tuple(SIZE_RADIUS)

IMAGE_SIZE = 64
CAPTION_LEN = 8  # "a <size> <fg> <shape> on a <bg> background"


@dataclass(frozen=True)
class SceneSpec:
    """One scene: a single `shape` of `fg_color` on a `bg_color` background.

    `center` is (x, y) with x the column and y the row; `size` maps to a
    radius in pixels (half-extent for square/triangle). `seed` records the
    sampling seed that produced the spec; rasterization ignores it.
    """

    shape: str
    fg_color: str
    bg_color: str
    size: str
    center: tuple[int, int]
    seed: int = 0

    @property
    def radius(self) -> int:
        return SIZE_RADIUS[self.size]

    def validate(self, image_size: int = IMAGE_SIZE) -> None:
        if self.shape not in SHAPES:
            raise DataError(f"unknown shape {self.shape!r}")
        if self.fg_color not in COLOR_RGB or self.bg_color not in COLOR_RGB:
            raise DataError(f"unknown color in {self.fg_color!r}/{self.bg_color!r}")
        if self.fg_color == self.bg_color:
            raise DataError("fg_color must differ from bg_color")
        if self.size not in SIZE_RADIUS:
            raise DataError(f"unknown size {self.size!r}")
        x, y = self.center
        r = self.radius
        if x - r < 0 or y - r < 0 or x + r > image_size - 1 or y + r > image_size - 1:
            raise DataError(
                f"shape out of bounds: center={self.center} radius={r} image_size={image_size}"
            )

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "fg_color": self.fg_color,
            "bg_color": self.bg_color,
            "size": self.size,
            "center": [int(self.center[0]), int(self.center[1])],
            "seed": int(self.seed),
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            shape=d["shape"],
            fg_color=d["fg_color"],
            bg_color=d["bg_color"],
            size=d["size"],
            center=(int(d["center"][0]), int(d["center"][1])),
            seed=int(d.get("seed", 0)),
        )


def shape_mask(spec: SceneSpec, image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean (H, W) membership mask, pixel centers tested exactly."""
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    cx, cy = spec.center
    r = spec.radius
    if spec.shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if spec.shape == "square":
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= r
    # upward triangle: apex (cx, cy-r), base corners (cx +/- r, cy+r)
    inside_rows = (yy >= cy - r) & (yy <= cy + r)
    return inside_rows & (2 * np.abs(xx - cx) <= (yy - (cy - r)))


def generate_scene(spec: SceneSpec, image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Rasterize `spec` to an (H, W, 3) float array with values in [0, 1]."""
    spec.validate(image_size)
    img = np.empty((image_size, image_size, 3), dtype=np.float64)
    img[:, :] = COLOR_RGB[spec.bg_color]
    img[shape_mask(spec, image_size)] = COLOR_RGB[spec.fg_color]
    return img


# ---------------------------------------------------------------------------
# vocabulary and captions


class Vocab:
    """Closed vocabulary: 5 specials plus every word the caption template emits."""

    PAD, MASK, CLS, SEP, UNK = 0, 1, 2, 3, 4
    SPECIALS = ("[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]")

    def __init__(self):
        words = ["a", "on", "background"] + list(SIZES) + list(COLORS) + list(SHAPES)
        self.id_to_token = list(self.SPECIALS) + words
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, words) -> list[int]:
        return [self.token_to_id.get(w, self.UNK) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


VOCAB = Vocab()


def caption_words(spec: SceneSpec) -> list[str]:
    return ["a", spec.size, spec.fg_color, spec.shape, "on", "a", spec.bg_color, "background"]


def caption_of(spec: SceneSpec) -> list[int]:
    """Token ids of the templated caption for `spec`."""
    spec.validate()
    return VOCAB.encode(caption_words(spec))


# ---------------------------------------------------------------------------
# PPM (P6) encode/decode


def encode_ppm(img: np.ndarray) -> bytes:
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise DataError("image values must lie in [0, 1]")
    h, w = img.shape[:2]
    payload = np.round(img * 255.0).astype(np.uint8).tobytes()
    return f"P6\n{w} {h}\n255\n".encode("ascii") + payload


def decode_ppm(blob: bytes) -> np.ndarray:
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(blob):
            c = blob[pos : pos + 1]
            if c == b"#":  # comment runs to end of line
                while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b""):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        return blob[start:pos]

    if next_token() != b"P6":
        raise DataError("not a binary PPM (missing P6 magic)")
    try:
        w, h, maxval = int(next_token()), int(next_token()), int(next_token())
    except ValueError as e:
        raise DataError(f"malformed PPM header: {e}") from e
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval} (expected 255)")
    pos += 1  # single whitespace byte after maxval
    payload = blob[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise DataError(f"truncated PPM payload: expected {w * h * 3} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


def save_image(img: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_ppm(img))


def load_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# corpus generation


def sample_spec(rng: np.random.Generator, image_size: int = IMAGE_SIZE) -> SceneSpec:
    """Uniform spec draw; center is resampled until the shape fits the frame."""
    r_max = max(SIZE_RADIUS.values())
    if image_size < 2 * r_max + 1:  # no valid center for the largest shape
        raise DataError(
            f"image_size {image_size} cannot fit a shape of radius {r_max} "
            f"(needs >= {2 * r_max + 1})"
        )
    shape = SHAPES[rng.integers(len(SHAPES))]
    size = SIZES[rng.integers(len(SIZES))]
    fg = COLORS[rng.integers(len(COLORS))]
    bg = fg
    while bg == fg:
        bg = COLORS[rng.integers(len(COLORS))]
    r = SIZE_RADIUS[size]
    while True:
        x = int(rng.integers(image_size))
        y = int(rng.integers(image_size))
        if x - r >= 0 and y - r >= 0 and x + r <= image_size - 1 and y + r <= image_size - 1:
            break
    seed = int(rng.integers(np.iinfo(np.int64).max))
    return SceneSpec(shape, fg, bg, size, (x, y), seed)


@dataclass
class Corpus:
    """In-memory corpus: uint8 images plus caption token ids."""

    images: np.ndarray  # (N, H, W, 3) uint8
    tokens: np.ndarray  # (N, L) int64
    specs: list[SceneSpec]

    def __len__(self) -> int:
        return len(self.specs)

    def images_float(self, idx) -> np.ndarray:
        return self.images[idx].astype(np.float64) / 255.0


def generate_corpus(n: int, seed: int, out_dir, image_size: int = IMAGE_SIZE) -> Path:
    """Write n images plus a JSONL manifest under out_dir; returns the manifest path."""
    if n < 1:
        raise DataError(f"corpus size must be >= 1, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        spec = sample_spec(rng, image_size)
        name = f"img_{i:06d}.ppm"
        save_image(generate_scene(spec, image_size), out / name)
        rec = {"image": name, "tokens": caption_of(spec), "spec": spec.to_dict()}
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="ascii")
    return manifest


def load_corpus(manifest_path) -> Corpus:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    images, tokens, specs = [], [], []
    for line in manifest_path.read_text(encoding="ascii").splitlines():
        rec = json.loads(line)
        img = load_image(base / rec["image"])
        images.append(np.round(img * 255.0).astype(np.uint8))
        tokens.append(rec["tokens"])
        specs.append(SceneSpec.from_dict(rec["spec"]))
    return Corpus(np.stack(images), np.asarray(tokens, dtype=np.int64), specs)


# ---------------------------------------------------------------------------
# pairwise downstream dataset


@dataclass(frozen=True)
class PairItem:
    spec: SceneSpec
    tokens: tuple[int, ...]
    image_size: int = IMAGE_SIZE

    def image(self) -> np.ndarray:
        return generate_scene(self.spec, self.image_size)


@dataclass(frozen=True)
class PairExample:
    a: PairItem
    b: PairItem
    label: int  # 1 = match (same shape AND fg color), 0 = mismatch


def pair_label(a: SceneSpec, b: SceneSpec) -> int:
    return int(a.shape == b.shape and a.fg_color == b.fg_color)


def _item(spec: SceneSpec, image_size: int) -> PairItem:
    return PairItem(spec, tuple(caption_of(spec)), image_size)


def generate_pairs(
    n: int,
    seed: int,
    match_fraction: float = 0.5,
    image_size: int = IMAGE_SIZE,
) -> list[PairExample]:
    """Sample n pair examples with an exact round(n * match_fraction) match count.

    Matched pairs share shape and fg color but differ in at least one of
    size / center / bg color; mismatched pairs differ in shape or fg color.
    """
    if not 0.0 < match_fraction < 1.0:
        raise DataError(f"match_fraction must be in (0, 1), got {match_fraction}")
    if n < 1:
        raise DataError(f"pair count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    n_match = int(round(n * match_fraction))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_match] = 1
    labels = labels[rng.permutation(n)]
    pairs = []
    for want in labels:
        a = sample_spec(rng, image_size)
        while True:
            if want == 1:
                b = sample_spec(rng, image_size)
                b = SceneSpec(a.shape, a.fg_color, b.bg_color, b.size, b.center, b.seed)
                if b.bg_color == a.fg_color:
                    continue
                if (b.size, b.center, b.bg_color) != (a.size, a.center, a.bg_color):
                    break
            else:
                b = sample_spec(rng, image_size)
                if b.shape != a.shape or b.fg_color != a.fg_color:
                    break
        pairs.append(PairExample(_item(a, image_size), _item(b, image_size), int(want)))
    return pairs


def save_pairs(pairs: list[PairExample], out_dir, name: str = "pairs") -> Path:
    """Write pair images and a JSONL pair file; returns the JSONL path."""
    out = Path(out_dir)
    img_dir = out / f"{name}_images"
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, p in enumerate(pairs):
        rec = {"label": p.label, "image_size": p.a.image_size}
        for side, item in (("a", p.a), ("b", p.b)):
            fname = f"{name}_images/p{i:06d}_{side}.ppm"
            save_image(item.image(), out / fname)
            rec[side] = {
                "image": fname,
                "tokens": list(item.tokens),
                "spec": item.spec.to_dict(),
            }
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    path = out / f"{name}.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def load_pairs(path) -> list[PairExample]:
    pairs = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        rec = json.loads(line)
        size = int(rec.get("image_size", IMAGE_SIZE))
        items = {}
        for side in ("a", "b"):
            items[side] = PairItem(
                SceneSpec.from_dict(rec[side]["spec"]), tuple(rec[side]["tokens"]), size
            )
        pairs.append(PairExample(items["a"], items["b"], int(rec["label"])))
    return pairs
