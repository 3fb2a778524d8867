"""4-D tensors: weight folding, im2col convolution and the SVFT binary format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from svflab.validation import check_matrix, check_tensor4

MAGIC = b"SVFT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI4Q")


@dataclass(frozen=True)
class ConvGeometry:
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding"):
            val = getattr(self, name)
            if isinstance(val, int):
                val = (val, val)
            object.__setattr__(self, name, (int(val[0]), int(val[1])))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid conv geometry {self}")

    @classmethod
    def square(cls, k: int, stride: int = 1, pad: int = 0) -> "ConvGeometry":
        return cls((k, k), (stride, stride), (pad, pad))

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        num_h, num_w = h + 2 * ph - kh, w + 2 * pw - kw
        if num_h < 0 or num_w < 0 or num_h % sh or num_w % sw:
            raise ValueError(
                f"geometry {self} gives non-integral output for a {h}x{w} feature map"
            )
        return num_h // sh + 1, num_w // sw + 1


def fold_weights(w) -> np.ndarray:
    """(C_o, C_i, Kh, Kw) -> C_o x (C_i*Kh*Kw), columns in (ci, kh, kw) order."""
    w = check_tensor4(w, "w")
    return w.reshape(w.shape[0], -1).copy()


def unfold_weights(m, dims) -> np.ndarray:
    m = check_matrix(m, "m")
    co, ci, kh, kw = (int(d) for d in dims)
    if m.shape != (co, ci * kh * kw):
        raise ValueError(f"cannot unfold a {m.shape} matrix into dims {tuple(dims)}")
    return m.reshape(co, ci, kh, kw).copy()


def im2col(x: np.ndarray, g: ConvGeometry) -> np.ndarray:
    """(N, C, H, W) -> (N, C*Kh*Kw, Ho*Wo) patch stack; row order matches fold_weights."""
    n, c, h, w = x.shape
    ho, wo = g.output_hw(h, w)
    (kh, kw), (sh, sw), (ph, pw) = g.kernel, g.stride, g.padding
    if (kh, kw, sh, sw, ph, pw) == (1, 1, 1, 1, 0, 0):
        return x.reshape(n, c, h * w)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    # (N, C, Ho, Wo, Kh, Kw) -> (N, C, Kh, Kw, Ho, Wo); spatial stays innermost so the copy is cheap
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, x_shape, g: ConvGeometry) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch columns back into an (N, C, H, W) array."""
    n, c, h, w = x_shape
    ho, wo = g.output_hw(h, w)
    (kh, kw), (sh, sw), (ph, pw) = g.kernel, g.stride, g.padding
    if (kh, kw, sh, sw, ph, pw) == (1, 1, 1, 1, 0, 0):
        return cols.reshape(n, c, h, w)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += cols[:, :, i, j]
    return out[:, :, ph : ph + h, pw : pw + w]


def conv2d_cols(cols: np.ndarray, w: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    return np.matmul(w.reshape(w.shape[0], -1), cols).reshape(n, w.shape[0], ho, wo)


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 mean pooling with stride 2; H and W must be even."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"avgpool2 needs even spatial dims, got {x.shape[2:]}")
    s = x[:, :, 0::2, 0::2] + x[:, :, 1::2, 0::2]
    s += x[:, :, 0::2, 1::2]
    s += x[:, :, 1::2, 1::2]
    s *= 0.25
    return s


def conv2d(x, w, g: ConvGeometry) -> np.ndarray:
    """Zero-padded cross-correlation via im2col + matmul."""
    x = check_tensor4(x, "x")
    w = check_tensor4(w, "w")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    if tuple(w.shape[2:]) != g.kernel:
        raise ValueError(f"weight kernel {w.shape[2:]} does not match geometry {g.kernel}")
    ho, wo = g.output_hw(x.shape[2], x.shape[3])
    return conv2d_cols(im2col(x, g), w, x.shape[0], ho, wo)


def write_tensor(path, t) -> None:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim > 4:
        raise ValueError(f"tensor has {t.ndim} dims, format stores at most 4")
    dims = tuple(t.shape) + (1,) * (4 - t.ndim)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, *dims))
        fh.write(np.ascontiguousarray(t).astype("<f8").tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated tensor header")
    magic, version, *dims = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported tensor format version {version}")
    count = int(np.prod(dims))
    body = data[_HEADER.size :]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {count} float64 values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(dims).astype(np.float64)
