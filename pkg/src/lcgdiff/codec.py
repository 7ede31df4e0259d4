"""Exact latent codec: space-to-depth packing instead of a learned encoder.

Every pixel moves, none is transformed, so encode/decode roundtrips are
bit-exact by construction and the diffusion model's "latents" are just a
f-times-coarser grid with f*f-times more channels. The mask joins the latent
stack through f-by-f max-pooling (a cell is masked if any of its pixels is),
and final compositing happens back in pixel space where unmasked bits are
copied straight from the original.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "CodecError",
    "space_to_depth",
    "depth_to_space",
    "encode_image",
    "encode_mask",
    "encode_inputs",
    "decode_output",
    "composite",
]


class CodecError(ValueError):
    """Inputs violate the codec's divisibility or consistency contracts."""


def _check_divisible(shape: tuple[int, ...], f: int) -> None:
    if f < 1:
        raise CodecError(f"block factor must be >= 1, got {f}")
    h, w = shape[0], shape[1]
    if h % f or w % f:
        raise CodecError(f"spatial dims {h}x{w} are not divisible by the block factor {f}")


def space_to_depth(x: np.ndarray, f: int) -> np.ndarray:
    """(H, W, C) -> (H/f, W/f, C*f*f), pure data movement."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise CodecError(f"space_to_depth: expected (H, W, C), got shape {x.shape}")
    _check_divisible(x.shape, f)
    h, w, c = x.shape
    packed = x.reshape(h // f, f, w // f, f, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(packed.reshape(h // f, w // f, f * f * c))


def depth_to_space(z: np.ndarray, f: int) -> np.ndarray:
    """Inverse of :func:`space_to_depth`."""
    z = np.asarray(z)
    if z.ndim != 3:
        raise CodecError(f"depth_to_space: expected (h, w, C), got shape {z.shape}")
    h, w, packed = z.shape
    if f < 1 or packed % (f * f):
        raise CodecError(f"depth_to_space: channel count {packed} is not a multiple of f*f = {f * f}")
    c = packed // (f * f)
    unpacked = z.reshape(h, w, f, f, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(unpacked.reshape(h * f, w * f, c))


def encode_image(image: np.ndarray, f: int) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise CodecError(f"encode_image: expected (H, W, C), got shape {image.shape}")
    return space_to_depth(image, f)


def encode_mask(mask: np.ndarray, f: int) -> np.ndarray:
    """Binary (H, W) mask -> (H/f, W/f, 1) cell indicator via max-pooling."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise CodecError(f"encode_mask: expected (H, W), got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise CodecError("encode_mask: mask must be binary")
    _check_divisible(arr.shape, f)
    h, w = arr.shape
    pooled = arr.reshape(h // f, f, w // f, f).max(axis=(1, 3))
    return pooled.astype(np.float64)[..., None]


def encode_inputs(image: np.ndarray, mask: np.ndarray, masked_image: np.ndarray, f: int) -> np.ndarray:
    """Stack the three latent groups: image, pooled mask, masked image.

    ``masked_image`` must equal ``image * (1 - mask)`` bit-for-bit; anything
    else means the caller composed its inputs inconsistently.
    """
    image = np.asarray(image)
    masked = np.asarray(masked_image)
    if image.shape != masked.shape:
        raise CodecError(f"encode_inputs: image {image.shape} and masked image {masked.shape} disagree")
    mask_arr = np.asarray(mask)
    if mask_arr.shape != image.shape[:2]:
        raise CodecError(f"encode_inputs: mask {mask_arr.shape} does not cover image plane {image.shape[:2]}")
    mask_b = encode_mask(mask_arr, f)  # validates binarity and divisibility
    expected = image * (1 - mask_arr[..., None]).astype(image.dtype)
    if not np.array_equal(masked, expected):
        raise CodecError("encode_inputs: masked_image != image * (1 - mask); inputs are inconsistent")
    return np.concatenate([encode_image(image, f), mask_b, encode_image(masked, f)], axis=-1)


def decode_output(latent: np.ndarray, f: int) -> np.ndarray:
    """Unpack a single latent group back to pixel space."""
    return depth_to_space(latent, f)


def composite(original: np.ndarray, generated: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked pixels from ``generated``, the rest copied from ``original``.

    Selection, not arithmetic: unmasked pixels keep their exact bits.
    """
    original = np.asarray(original)
    generated = np.asarray(generated)
    arr = np.asarray(mask)
    if original.shape != generated.shape:
        raise CodecError(f"composite: original {original.shape} and generated {generated.shape} disagree")
    if arr.shape != original.shape[:2]:
        raise CodecError(f"composite: mask {arr.shape} does not cover image plane {original.shape[:2]}")
    if not np.isin(arr, (0, 1)).all():
        raise CodecError("composite: mask must be binary")
    return np.where(arr[..., None].astype(bool), generated, original)
