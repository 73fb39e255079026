"""Scalar number formats and their quantization semantics.

The evaluators simulate what a synthesized datapath computes: every
multiply and every add is quantized to the active format before the next
operation sees it.  Fixed-point keeps the full double-width product and
rounds once (round-to-nearest-even); addition never rounds but overflow
is an error, not a saturation.  Reduced-precision floats are modelled by
rounding through the nearest representable value after each operation,
with subnormals flushed to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FixedOverflowError(ArithmeticError):
    """A fixed-point value left its representable range."""

    def __init__(self, msg: str, node: int | None = None, index=None):
        super().__init__(msg)
        self.node = node
        self.index = index


@dataclass(frozen=True)
class ScalarFormat:
    """Base for concrete formats. Instances are immutable and hashable."""

    @property
    def width_bits(self) -> int:
        raise NotImplementedError

    @property
    def key(self) -> str:
        """Short stable name used in cost tables and file formats."""
        raise NotImplementedError


@dataclass(frozen=True)
class Float64(ScalarFormat):
    @property
    def width_bits(self) -> int:
        return 64

    @property
    def key(self) -> str:
        return "f64"


@dataclass(frozen=True)
class Float32(ScalarFormat):
    @property
    def width_bits(self) -> int:
        return 32

    @property
    def key(self) -> str:
        return "f32"


@dataclass(frozen=True)
class Fixed(ScalarFormat):
    """Two's-complement fixed point: int_bits (sign included) + frac_bits."""

    int_bits: int
    frac_bits: int

    def __post_init__(self):
        if self.int_bits < 1:
            raise ValueError("fixed point needs at least the sign bit")
        if self.width_bits not in (8, 16, 32, 64):
            raise ValueError(f"unsupported fixed width {self.width_bits}")

    @property
    def width_bits(self) -> int:
        return self.int_bits + self.frac_bits

    @property
    def key(self) -> str:
        return f"fixed{self.width_bits}"

    @property
    def max_raw(self) -> int:
        return (1 << (self.width_bits - 1)) - 1

    @property
    def min_raw(self) -> int:
        return -(1 << (self.width_bits - 1))

    # Raw products of two w-bit values need 2w-1 magnitude bits, so up to
    # 32-bit formats run on int64; wider ones fall back to python
    # integers (exact, slower).
    @property
    def fits_int64(self) -> bool:
        return 2 * self.width_bits <= 64

    def encode(self, values) -> np.ndarray:
        """Quantize real values to raw integers, round-to-nearest-even."""
        arr = np.asarray(values, dtype=np.float64)
        scaled = arr * float(1 << self.frac_bits)
        raw = np.rint(scaled)  # rint is round-half-even
        if np.any(np.abs(raw) > self.max_raw) or np.any(raw < self.min_raw):
            bad = int(np.argmax(np.abs(raw)))
            raise FixedOverflowError(
                f"value {arr.flat[bad]} not representable in "
                f"fixed({self.width_bits},{self.int_bits},{self.frac_bits})",
                index=bad,
            )
        if self.fits_int64:
            return raw.astype(np.int64)
        out = np.empty(arr.shape, dtype=object)
        flat = out.reshape(-1)
        for i, v in enumerate(raw.reshape(-1)):
            flat[i] = int(v)
        return out

    def decode(self, raw) -> np.ndarray:
        if isinstance(raw, np.ndarray) and raw.dtype == object:
            return np.array(
                [float(v) for v in raw.reshape(-1)], dtype=np.float64
            ).reshape(raw.shape) / float(1 << self.frac_bits)
        return np.asarray(raw, dtype=np.float64) / float(1 << self.frac_bits)

    def round_shift(self, prod):
        """Drop frac_bits from a double-scale product, RNE.

        Works on int64 arrays, object arrays of python ints, and scalars.
        numpy's >> on negative ints is an arithmetic shift, i.e. floor
        division, so the remainder is always in [0, 2^f).
        """
        f = self.frac_bits
        half = 1 << (f - 1)
        floor = prod >> f
        rem = prod - (floor << f)
        up = (rem > half) | ((rem == half) & ((floor & 1) == 1))
        if isinstance(prod, np.ndarray):
            return floor + up.astype(floor.dtype if floor.dtype != object else object)
        return floor + (1 if up else 0)

    def check_range(self, raw, node: int | None = None):
        over = np.abs(raw) > self.max_raw
        if np.any(over):
            idx = int(np.argmax(over))
            raise FixedOverflowError(
                f"fixed-point overflow in node {node}", node=node, index=idx
            )


@dataclass(frozen=True)
class CustomFloat(ScalarFormat):
    """Sign + exp_bits + mantissa_bits reduced-precision binary float."""

    exp_bits: int
    mantissa_bits: int

    def __post_init__(self):
        if 1 + self.exp_bits + self.mantissa_bits > 64:
            raise ValueError("custom float wider than 64 bits")
        if self.exp_bits < 2:
            raise ValueError("need at least 2 exponent bits")

    @property
    def width_bits(self) -> int:
        return 1 + self.exp_bits + self.mantissa_bits

    @property
    def key(self) -> str:
        return f"cf{self.exp_bits}e{self.mantissa_bits}m"

    @property
    def bias(self) -> int:
        return (1 << (self.exp_bits - 1)) - 1

    def quantize(self, values) -> np.ndarray:
        """Round to the nearest representable value; subnormals -> 0."""
        x = np.asarray(values, dtype=np.float64)
        mant, exp = np.frexp(x)  # x = mant * 2^exp, |mant| in [0.5, 1)
        scale = float(1 << (self.mantissa_bits + 1))
        mant = np.rint(mant * scale) / scale
        y = np.ldexp(mant, exp)
        # re-derive the exponent after rounding (mantissa may carry)
        _, exp2 = np.frexp(y)
        e_norm = exp2 - 1  # value = 1.M * 2^e_norm
        emax = self.bias
        emin = 1 - self.bias
        y = np.where((e_norm < emin) & (y != 0.0), 0.0, y)
        y = np.where(e_norm > emax, np.copysign(np.inf, y), y)
        return y


def parse_format(spec: str) -> ScalarFormat:
    """Parse a format name: f64, f32, fixed64, fixed32, fixed:W:I, float:E:M."""
    s = spec.strip().lower()
    if s in ("f64", "double", "float64"):
        return Float64()
    if s in ("f32", "float", "float32"):
        return Float32()
    if s == "fixed64":
        return Fixed(int_bits=24, frac_bits=40)
    if s == "fixed32":
        return Fixed(int_bits=8, frac_bits=24)
    if s.startswith("fixed:"):
        parts = s.split(":")
        if len(parts) != 3:
            raise ValueError(f"bad fixed format spec {spec!r}, want fixed:W:I")
        width, int_bits = int(parts[1]), int(parts[2])
        return Fixed(int_bits=int_bits, frac_bits=width - int_bits)
    if s.startswith("float:"):
        parts = s.split(":")
        if len(parts) != 3:
            raise ValueError(f"bad float format spec {spec!r}, want float:E:M")
        return CustomFloat(exp_bits=int(parts[1]), mantissa_bits=int(parts[2]))
    raise ValueError(f"unknown scalar format {spec!r}")
