"""Order-3 real tensors, the seeded generator, and the ``ETEN`` binary format.

A tensor is a C-contiguous ``float64`` numpy array of shape ``(H, W, C)``.
Row-major order therefore means H slowest, then W, then C fastest, and
flat index ``(i * W + j) * C + c``.

Random numbers come from xoshiro256** seeded through SplitMix64, both as
published by Blackman and Vigna.  Reference vectors (checked by the tests):

* SplitMix64, state 1234567: 6457827717110365317, 3203168211198807973,
  9817491932198370423, 4593380528125082431, 16408922859458223821
* xoshiro256**, state (1, 2, 3, 4): 11520, 0, 1509978240,
  1215971899390074240

A real in [0, 1) is ``(next() >> 11) * 2**-53``.
"""

import math
import struct

import numpy as np

from .errors import DimensionError, FormatError, RangeError

MAGIC = b"ETEN"
VERSION = 1
DTYPE_F32 = 1
DTYPE_F64 = 2

_MASK = (1 << 64) - 1
_HEADER = struct.Struct("<4sBBBB3I")


def splitmix64(state):
    """Advance a SplitMix64 state; return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** generator whose 256-bit state is filled by SplitMix64."""

    def __init__(self, seed):
        seed = int(seed)
        if not 0 <= seed <= _MASK:
            raise RangeError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        sm = seed
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    @classmethod
    def from_state(cls, state):
        rng = cls.__new__(cls)
        rng.seed = None
        rng._s = [int(v) & _MASK for v in state]
        return rng

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self):
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo, hi):
        return lo + (hi - lo) * self.random()

    def randint(self, lo, hi):
        """Integer in ``[lo, hi]`` inclusive."""
        if hi < lo:
            raise RangeError(f"empty integer range [{lo}, {hi}]")
        return lo + int(self.random() * (hi - lo + 1))

    def normal(self):
        # Box-Muller, one output per call; 1 - u keeps the log argument in (0, 1]
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def fill(self, n, lo=0.0, hi=1.0):
        """``n`` sequential uniform draws as a float64 vector."""
        return np.array([self.uniform(lo, hi) for _ in range(n)], dtype=np.float64)

    def permutation(self, n):
        # Fisher-Yates from the top
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i)
            order[i], order[j] = order[j], order[i]
        return order


def check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise DimensionError(f"tensor must have 3 dims, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise DimensionError(f"all dims must be >= 1, got {dims}")
    return dims


def as_tensor(data):
    """Validate and return ``data`` as a contiguous float64 (H, W, C) array."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    check_dims(arr.shape)
    return arr


def tensor_new(dims, fill=0.0):
    return np.full(check_dims(dims), float(fill), dtype=np.float64)


def tensor_rand_uniform(dims, rng, lo=0.0, hi=1.0):
    dims = check_dims(dims)
    if not lo < hi:
        raise RangeError(f"need lo < hi, got [{lo}, {hi})")
    n = dims[0] * dims[1] * dims[2]
    return rng.fill(n, lo, hi).reshape(dims)


def tensor_write(t, sink):
    t = as_tensor(t)
    h, w, c = t.shape
    sink.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F64, 3, 0, h, w, c))
    sink.write(t.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(source, n, field):
    buf = source.read(n)
    if len(buf) != n:
        raise FormatError(field, f"truncated: expected {n} bytes, got {len(buf)}")
    return buf


def tensor_read(source):
    header = _read_exact(source, _HEADER.size, "header")
    magic, version, dtype, ndims, reserved, h, w, c = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if dtype not in (DTYPE_F32, DTYPE_F64):
        raise FormatError("dtype", f"unsupported dtype code {dtype}")
    if ndims != 3:
        raise FormatError("ndims", f"expected 3 dims, got {ndims}")
    if reserved != 0:
        raise FormatError("reserved", f"reserved byte must be 0, got {reserved}")
    if min(h, w, c) < 1:
        raise FormatError("dims", f"zero dimension in {(h, w, c)}")
    width = 8 if dtype == DTYPE_F64 else 4
    payload = _read_exact(source, h * w * c * width, "payload")
    arr = np.frombuffer(payload, dtype="<f8" if dtype == DTYPE_F64 else "<f4")
    return arr.astype(np.float64).reshape(h, w, c)


def save_tensor(path, t):
    with open(path, "wb") as fh:
        tensor_write(t, fh)


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_read(fh)
