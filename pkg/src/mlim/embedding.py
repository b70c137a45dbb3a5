"""Token embedders: a shallow strided CNN for images, a table lookup for text.

Every conv stage uses a 2x2 kernel with stride 2, so receptive fields never
overlap and each stage is exactly a space-to-depth reshape followed by a
matmul. Three stages turn a 64x64x3 image into an 8x8 grid of d_model
vectors, flattened row-major into a 64-step sequence; each step is a pure
function of one 8x8 input block. The image decoder inverts the layout with
depth-to-space upsampling blocks.

Positional rows are NOT added here: masking substitutes embeddings first,
positions are added afterwards during sequence assembly.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, embedding, index_select, matmul, relu, reshape, transpose

GRID = 8  # output side of the encoder for a 64x64 input
PATCH = 8  # input pixels per output grid step (2^3 stages)
ENC_CHANNELS = (32, 64)  # hidden channels; final stage emits d_model
DEC_CHANNELS = (64, 32)  # mirror on the way back up to RGB


def space_to_depth(x: Tensor) -> Tensor:
    """(B, H, W, C) -> (B, H/2, W/2, 4C); 2x2 blocks flattened into channels."""
    b, h, w, c = x.shape
    x = reshape(x, (b, h // 2, 2, w // 2, 2, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, h // 2, w // 2, 4 * c))


def depth_to_space(x: Tensor) -> Tensor:
    """(B, H, W, 4C) -> (B, 2H, 2W, C); inverse of space_to_depth."""
    b, h, w, c4 = x.shape
    c = c4 // 4
    x = reshape(x, (b, h, w, 2, 2, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, 2 * h, 2 * w, c))


def conv_block(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """2x2 stride-2 conv: halves H and W. w is (4*C_in, C_out)."""
    return matmul(space_to_depth(x), w) + b


def deconv_block(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """2x2 stride-2 transposed conv: doubles H and W. w is (C_in, 4*C_out)."""
    return depth_to_space(matmul(x, w) + b)


def embed_image(img: Tensor, params: dict) -> Tensor:
    """(B, 64, 64, 3) pixels in [0, 1] -> (B, 64, d_model) grid sequence.

    Row-major flatten of the final grid; works for any input side divisible
    by 8 (the grid side scales with it).
    """
    h = relu(conv_block(img, params["img_enc.c0.w"], params["img_enc.c0.b"]))
    h = relu(conv_block(h, params["img_enc.c1.w"], params["img_enc.c1.b"]))
    h = conv_block(h, params["img_enc.c2.w"], params["img_enc.c2.b"])
    b, gh, gw, d = h.shape
    return reshape(h, (b, gh * gw, d))


def embed_text(ids: np.ndarray, word_table: Tensor) -> Tensor:
    """(B, L) int token ids -> (B, L, d_model) via the shared word table."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab_size = word_table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token id out of range for vocab of {vocab_size}")
    return embedding(word_table, ids)


def add_positions(seq: Tensor, table: Tensor) -> Tensor:
    """Add learned position rows 0..L-1 of a modality's table to (B, L, d).

    Called strictly after masking: masked steps all carry the same [MASK]
    embedding and are distinguished only by the row added here.
    """
    length = seq.shape[1]
    if length > table.shape[0]:
        raise ValueError(f"sequence length {length} exceeds position table {table.shape[0]}")
    rows = index_select(table, 0, np.arange(length))
    return seq + reshape(rows, (1, length, table.shape[1]))
