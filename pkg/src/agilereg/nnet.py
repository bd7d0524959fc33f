"""Inference-only convolutional feature extractor.

Nine 3x3 conv layers (ReLU after each) arranged in six blocks, each block
closed by a 2x2 max-pool. Activations after pools 4, 5 and 6 are the
descriptor taps. Feature tensors are plain ``(C, H, W)`` float64 arrays.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, WeightFormatError
from .imgio import ImageBuffer

MAGIC = b"MSRW"
VERSION = 1
NORM_TAG = b"NORM"

DEFAULT_BLOCKS = (
    ((3, 16),),
    ((16, 32),),
    ((32, 64),),
    ((64, 128), (128, 128)),
    ((128, 256), (256, 256)),
    ((256, 512), (512, 512)),
)


@dataclass(frozen=True)
class NetworkSpec:
    blocks: tuple = DEFAULT_BLOCKS
    input_size: int = 448
    tap_points: tuple = (4, 5, 6)

    def __post_init__(self):
        convs = self.conv_shapes
        if len(convs) != 9 or len(self.blocks) != 6:
            raise ConfigError(f"network needs 9 conv / 6 pool layers, got {len(convs)} / {len(self.blocks)}")
        for i, ((_, out_a), (in_b, _)) in enumerate(zip(convs, convs[1:])):
            if out_a != in_b:
                raise ConfigError(f"conv layer {i + 1} in_ch={in_b} does not follow out_ch={out_a}")
        if self.input_size % 64:
            raise ConfigError(f"input_size must be a multiple of 64, got {self.input_size}")

    @property
    def conv_shapes(self) -> list[tuple[int, int]]:
        """(in_ch, out_ch) of every conv layer in execution order."""
        return [layer for block in self.blocks for layer in block]

    def pool_channels(self, k: int) -> int:
        return self.blocks[k - 1][-1][1]


@dataclass(frozen=True, eq=False)
class WeightBundle:
    """Per-layer float32 kernels ``(out, in, 3, 3)`` and biases ``(out,)``."""

    kernels: tuple
    biases: tuple
    provenance: dict = field(default_factory=dict)
    norm: np.ndarray | None = None  # (mean[3], scale[3]) or None

    def check(self, spec: NetworkSpec) -> None:
        shapes = spec.conv_shapes
        if len(self.kernels) != len(shapes) or len(self.biases) != len(shapes):
            raise ConfigError(f"weight bundle has {len(self.kernels)} layers, network expects {len(shapes)}")
        for i, ((cin, cout), k, b) in enumerate(zip(shapes, self.kernels, self.biases)):
            if k.shape != (cout, cin, 3, 3) or b.shape != (cout,):
                raise ConfigError(
                    f"layer {i}: kernel {k.shape} / bias {b.shape} does not match expected "
                    f"({cout}, {cin}, 3, 3) / ({cout},)"
                )

    def same_as(self, other: "WeightBundle") -> bool:
        """Bit-level equality of all parameters."""
        if len(self.kernels) != len(other.kernels):
            return False
        pairs = list(zip(self.kernels, other.kernels)) + list(zip(self.biases, other.biases))
        return all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)


# ---------------------------------------------------------------------------
# deterministic initialisation

_M64 = 0xFFFFFFFFFFFFFFFF
LANES = 1024


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return state, z ^ (z >> 31)


class Xoshiro256ss:
    """xoshiro256** run as LANES independent streams in lockstep.

    Lane ``l`` is seeded with splitmix64 outputs ``4l .. 4l+3`` of ``seed``;
    draws are interleaved step-major, so draw ``i`` comes from lane
    ``i % LANES`` at step ``i // LANES``.
    """

    def __init__(self, seed: int, lanes: int = LANES):
        sm = seed & _M64
        words = []
        for _ in range(4 * lanes):
            sm, out = splitmix64(sm)
            words.append(out)
        self.s = np.array(words, dtype=np.uint64).reshape(lanes, 4).T.copy()
        self._buf = np.empty(0, dtype=np.uint64)

    @staticmethod
    def _rotl(x, k):
        return (x << np.uint64(k)) | (x >> np.uint64(64 - k))

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self.s
        out = self._rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self.s[3] = self._rotl(s3, 45)
        return out

    def next_u64(self, n: int) -> np.ndarray:
        chunks = [self._buf]
        have = len(self._buf)
        while have < n:
            chunk = self._step()
            chunks.append(chunk)
            have += len(chunk)
        flat = np.concatenate(chunks)
        self._buf = flat[n:]
        return flat[:n]

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def init_weights_seeded(spec: NetworkSpec, seed: int) -> WeightBundle:
    """He-scaled uniform kernels, zero biases; bit-identical for a given seed."""
    rng = Xoshiro256ss(seed)
    kernels, biases = [], []
    for cin, cout in spec.conv_shapes:
        n = cout * cin * 9
        he = np.sqrt(2.0 / (cin * 9))
        # uniform on [-sqrt(3), sqrt(3)) has unit variance
        w = (2.0 * rng.uniform(n) - 1.0) * np.sqrt(3.0) * he
        kernels.append(w.astype(np.float32).reshape(cout, cin, 3, 3))
        biases.append(np.zeros(cout, dtype=np.float32))
    return WeightBundle(tuple(kernels), tuple(biases), {"kind": "seeded", "seed": int(seed)})


# ---------------------------------------------------------------------------
# MSRW file format


def encode_weights(bundle: WeightBundle) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(bundle.kernels))]
    for k, b in zip(bundle.kernels, bundle.biases):
        cout, cin, kh, kw = k.shape
        parts.append(struct.pack("<IIII", cout, cin, kh, kw))
        parts.append(np.ascontiguousarray(k, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    if bundle.norm is not None:
        parts.append(NORM_TAG + np.asarray(bundle.norm, dtype="<f4").reshape(6).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_weights(bundle: WeightBundle, path) -> None:
    Path(path).write_bytes(encode_weights(bundle))


def decode_weights(raw: bytes, spec: NetworkSpec | None = None, source: str = "<bytes>") -> WeightBundle:
    if len(raw) < 16:
        raise WeightFormatError(f"{source}: file truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise WeightFormatError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    body, footer = raw[:-4], raw[-4:]
    crc = zlib.crc32(body) & 0xFFFFFFFF
    if struct.unpack("<I", footer)[0] != crc:
        raise WeightFormatError(f"{source}: CRC32 mismatch (file truncated or corrupt)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise WeightFormatError(f"{source}: unsupported version {version}")
    pos = 12
    kernels, biases = [], []
    for i in range(count):
        if pos + 16 > len(body):
            raise WeightFormatError(f"{source}: truncated in layer {i} header")
        cout, cin, kh, kw = struct.unpack_from("<IIII", body, pos)
        pos += 16
        if (kh, kw) != (3, 3):
            raise WeightFormatError(f"{source}: layer {i} kernel is {kh}x{kw}, only 3x3 supported")
        nk, nb = cout * cin * 9 * 4, cout * 4
        if pos + nk + nb > len(body):
            raise WeightFormatError(f"{source}: truncated in layer {i} data")
        kernels.append(np.frombuffer(body, "<f4", cout * cin * 9, pos).astype(np.float32).reshape(cout, cin, 3, 3))
        pos += nk
        biases.append(np.frombuffer(body, "<f4", cout, pos).astype(np.float32))
        pos += nb
    norm = None
    if pos < len(body):
        if body[pos : pos + 4] != NORM_TAG or len(body) - pos != 4 + 24:
            raise WeightFormatError(f"{source}: unexpected trailing data at byte {pos}")
        norm = np.frombuffer(body, "<f4", 6, pos + 4).astype(np.float32).reshape(2, 3)
    bundle = WeightBundle(tuple(kernels), tuple(biases), {"kind": "file", "path": source, "crc32": crc}, norm)
    if spec is not None:
        bundle.check(spec)
    return bundle


def load_weights(path, spec: NetworkSpec | None = None) -> WeightBundle:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read weight file {path}: {exc.strerror or exc}") from exc
    return decode_weights(raw, spec if spec is not None else NetworkSpec(), str(path))


# ---------------------------------------------------------------------------
# layers


def conv2d_relu(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3, stride 1, zero-pad 1 cross-correlation + bias, then ReLU."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"input must be (C, H, W), got {x.shape}")
    cout, cin, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"kernel must be 3x3, got {kh}x{kw}")
    if cin != x.shape[0]:
        raise ShapeError(f"kernel expects {cin} input channels, input has {x.shape[0]}")
    _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    # columns ordered (in_ch, ky, kx) to match the kernel's flattening
    cols = sliding_window_view(padded, (3, 3), axis=(1, 2)).transpose(0, 3, 4, 1, 2).reshape(cin * 9, h * w)
    out = kernel.reshape(cout, cin * 9).astype(np.float64) @ cols
    out += np.asarray(bias, dtype=np.float64)[:, None]
    np.maximum(out, 0.0, out=out)
    return out.reshape(cout, h, w)


def maxpool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def image_to_tensor(img: ImageBuffer, norm: np.ndarray | None = None) -> np.ndarray:
    x = img.data.transpose(2, 0, 1).astype(np.float64)
    if norm is not None:
        mean, scale = np.asarray(norm, dtype=np.float64).reshape(2, 3)
        x = (x - mean[:, None, None]) / scale[:, None, None]
    return x


def forward_taps(img: ImageBuffer, spec: NetworkSpec, weights: WeightBundle) -> dict[int, np.ndarray]:
    """Run the conv stack and return ``{pool_index: (C, H, W)}`` for the tap pools."""
    if img.channels != 3:
        raise ShapeError(f"network input must have 3 channels, got {img.channels}")
    if img.height % 64 or img.width % 64:
        raise ShapeError(f"network input dims must be multiples of 64, got {img.width}x{img.height}")
    weights.check(spec)
    x = image_to_tensor(img, weights.norm)
    taps = {}
    layer = 0
    for k, block in enumerate(spec.blocks, start=1):
        for _ in block:
            x = conv2d_relu(x, weights.kernels[layer], weights.biases[layer])
            layer += 1
        x = maxpool2(x)
        if k in spec.tap_points:
            taps[k] = x
    return taps
