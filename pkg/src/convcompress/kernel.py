"""Dense 4-D convolution kernels, feature maps, and the MAC/parameter cost model.

Conventions used throughout the package:

* A kernel is stored as a ``(t, s, k, k)`` float64 array: ``t`` output
  channels, ``s`` input channels, square odd spatial size ``k``.
* A feature map is a plain ``(channels, h, w)`` float64 array.  The first
  spatial axis is called ``x`` and the second ``y``; "horizontal" (1xk)
  filters act along ``x``, "vertical" (kx1) filters along ``y``.
* All convolutions use stride 1 and zero padding of width ``delta=(k-1)/2``
  so the output spatial size equals the input spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

#: Decomposition methods known to the cost model, with their rank arity.
METHOD_RANK_ARITY = {
    "original": 0,
    "weight_svd": 1,
    "spatial_svd": 1,
    "cp": 1,
    "tucker": 2,
    "tt": 3,
}


def _require_finite(a: Array, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite entries")


@dataclass(frozen=True)
class Kernel4D:
    """A dense convolution kernel with optional per-output-channel bias.

    The bias is carried for the data-optimized methods, which read and
    rewrite it; the data-free decompositions and ``conv_direct`` ignore it.
    """

    data: Array
    bias: Array | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        object.__setattr__(self, "data", data)
        if data.ndim != 4:
            raise ValueError(f"kernel must be 4-D (t, s, k, k), got shape {data.shape}")
        t, s, kh, kw = data.shape
        if kh != kw:
            raise ValueError(f"kernel must be spatially square, got {kh}x{kw}")
        if kh < 1 or kh % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 1, got {kh}")
        if t < 1 or s < 1:
            raise ValueError(f"channel counts must be positive, got t={t}, s={s}")
        _require_finite(data, "kernel")
        if self.bias is not None:
            bias = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float64))
            if bias.shape != (t,):
                raise ValueError(f"bias must have shape ({t},), got {bias.shape}")
            _require_finite(bias, "bias")
            object.__setattr__(self, "bias", bias)

    @property
    def t(self) -> int:
        return self.data.shape[0]

    @property
    def s(self) -> int:
        return self.data.shape[1]

    @property
    def k(self) -> int:
        return self.data.shape[2]

    @property
    def delta(self) -> int:
        return (self.k - 1) // 2

    def as_matrix(self) -> Array:
        """Kernel as a ``(t, s*k*k)`` matrix acting on flattened patches.

        Row layout of a patch vector is channel-major ``(s, x, y)``, matching
        the patches produced by :func:`convcompress.dataopt.sample_patches`.
        """
        return self.data.reshape(self.t, self.s * self.k * self.k)


def feature_map(data) -> Array:
    """Validate and convert a ``(channels, h, w)`` feature map to float64."""
    x = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if x.ndim != 3:
        raise ValueError(f"feature map must be 3-D (channels, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"feature map dims must be positive, got {x.shape}")
    _require_finite(x, "feature map")
    return x


def conv_direct(kernel: Kernel4D, x: Array) -> Array:
    """Direct convolution of a feature map with a 4-D kernel.

    Stride 1, zero padding of width ``kernel.delta``, so the output has the
    same spatial dims as the input.  Bias is not applied.
    """
    x = feature_map(x)
    if x.shape[0] != kernel.s:
        raise ValueError(
            f"input has {x.shape[0]} channels, kernel expects {kernel.s}"
        )
    t, s, k, _ = kernel.data.shape
    d = kernel.delta
    _, h, w = x.shape
    xpad = np.zeros((s, h + 2 * d, w + 2 * d))
    xpad[:, d : d + h, d : d + w] = x
    out = np.zeros((t, h, w))
    for dx in range(k):
        for dy in range(k):
            out += np.einsum(
                "ts,shw->thw", kernel.data[:, :, dx, dy], xpad[:, dx : dx + h, dy : dy + w]
            )
    return out


def matricize_weight(kernel: Kernel4D) -> Array:
    """Reshape the kernel into a ``(k*k*s, t)`` matrix.

    Rows merge ``(x, y, s)`` in that order: row index ``(x*k + y)*s + s_i``.
    """
    t, s, k, _ = kernel.data.shape
    return kernel.data.transpose(2, 3, 1, 0).reshape(k * k * s, t).copy()


def unmatricize_weight(m: Array, t: int, s: int, k: int) -> Kernel4D:
    """Inverse of :func:`matricize_weight`."""
    if m.shape != (k * k * s, t):
        raise ValueError(f"expected shape {(k * k * s, t)}, got {m.shape}")
    return Kernel4D(m.reshape(k, k, s, t).transpose(3, 2, 0, 1))


def matricize_spatial(kernel: Kernel4D) -> Array:
    """Reshape the kernel into a ``(s*k, t*k)`` matrix.

    Rows merge ``(s, x)``, columns merge ``(t, y)``: row ``s_i*k + x``,
    column ``t_i*k + y``.
    """
    t, s, k, _ = kernel.data.shape
    return kernel.data.transpose(1, 2, 0, 3).reshape(s * k, t * k).copy()


def unmatricize_spatial(m: Array, t: int, s: int, k: int) -> Kernel4D:
    """Inverse of :func:`matricize_spatial`."""
    if m.shape != (s * k, t * k):
        raise ValueError(f"expected shape {(s * k, t * k)}, got {m.shape}")
    return Kernel4D(m.reshape(s, k, t, k).transpose(2, 0, 1, 3))


@dataclass(frozen=True)
class LayerCost:
    """MAC and parameter counts for one layer, original vs compressed.

    ``ratio`` is the fraction of MACs saved, ``1 - macs_compressed /
    macs_original``.  It is negative when a decomposition costs more than
    the original layer (possible at high ranks); it is reported as-is.
    """

    method: str
    ranks: tuple[int, ...]
    macs_original: int
    params_original: int
    macs_compressed: int
    params_compressed: int

    @property
    def ratio(self) -> float:
        return 1.0 - self.macs_compressed / self.macs_original

    @property
    def retained(self) -> float:
        """Retained MAC fraction ``macs_compressed / macs_original``."""
        return self.macs_compressed / self.macs_original


def _check_rank_bounds(method: str, ranks: tuple[int, ...], s: int, t: int, k: int) -> None:
    if any(r < 1 for r in ranks):
        raise ValueError(f"ranks must be >= 1, got {ranks}")
    if method == "weight_svd" and ranks[0] > min(k * k * s, t):
        raise ValueError(f"weight SVD rank {ranks[0]} exceeds min(k^2*s, t) = {min(k * k * s, t)}")
    if method == "spatial_svd" and ranks[0] > min(s * k, t * k):
        raise ValueError(f"spatial SVD rank {ranks[0]} exceeds min(s*k, t*k) = {min(s * k, t * k)}")
    if method == "tucker":
        if ranks[0] > s or ranks[1] > t:
            raise ValueError(f"tucker ranks {ranks} exceed (s, t) = ({s}, {t})")
    if method == "tt":
        if ranks[0] > s or ranks[2] > t:
            raise ValueError(f"tt ranks {ranks} violate r1 <= s = {s}, r3 <= t = {t}")


def mac_cost(
    s: int, t: int, k: int, h: int, w: int, method: str, ranks: tuple[int, ...] = ()
) -> LayerCost:
    """Exact integer MAC/parameter counts for a layer compressed by ``method``.

    ``ranks`` arity must match the method (0 for ``original``, 1 for the
    single-rank methods, 2 for ``tucker``, 3 for ``tt``).
    """
    if method not in METHOD_RANK_ARITY:
        raise ValueError(f"unknown method {method!r}")
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != METHOD_RANK_ARITY[method]:
        raise ValueError(
            f"method {method!r} takes {METHOD_RANK_ARITY[method]} rank(s), got {len(ranks)}"
        )
    _check_rank_bounds(method, ranks, s, t, k)

    macs_orig = k * k * s * t * h * w
    params_orig = k * k * s * t
    if method == "original":
        macs, params = macs_orig, params_orig
    elif method == "weight_svd":
        (r,) = ranks
        macs = (k * k * w * h * s + w * h * t) * r
        params = (k * k * s + t) * r
    elif method == "spatial_svd":
        (r,) = ranks
        macs = (k * w * h * s + k * w * h * t) * r
        params = (k * s + k * t) * r
    elif method == "cp":
        (r,) = ranks
        macs = (s * w * h + 2 * k * w * h + t * w * h) * r
        params = (2 * k + s + t) * r
    elif method == "tucker":
        r1, r2 = ranks
        macs = s * r1 * w * h + k * k * r1 * r2 * w * h + t * r2 * w * h
        params = s * r1 + k * k * r1 * r2 + t * r2
    else:  # tt
        r1, r2, r3 = ranks
        macs = s * r1 * w * h + k * r1 * r2 * w * h + k * r2 * r3 * w * h + r3 * t * w * h
        params = s * r1 + k * r1 * r2 + k * r2 * r3 + r3 * t

    return LayerCost(
        method=method,
        ranks=ranks,
        macs_original=macs_orig,
        params_original=params_orig,
        macs_compressed=macs,
        params_compressed=params,
    )


def max_ranks(method: str, s: int, t: int, k: int) -> tuple[int, ...]:
    """Largest rank vector each decomposition can use on a (t, s, k, k) kernel.

    For ``cp`` this is the generic representability bound (the smallest
    product of three of the four mode sizes); for ``tt`` the bounds chain
    through the sequential unfoldings.
    """
    if method == "weight_svd":
        return (min(k * k * s, t),)
    if method == "spatial_svd":
        return (min(s * k, t * k),)
    if method == "cp":
        return (min(k * k * t, s * k * t, s * k * k),)
    if method == "tucker":
        return (s, t)
    if method == "tt":
        r1 = min(s, k * k * t)
        r2 = min(r1 * k, k * t)
        r3 = min(r2 * k, t)
        return (r1, r2, r3)
    raise ValueError(f"unknown method {method!r}")


def aggregate_ratio(costs: list[LayerCost]) -> float:
    """Whole-model compression ratio ``1 - sum(c_hat) / sum(c)``."""
    if not costs:
        raise ValueError("no layer costs to aggregate")
    total = sum(c.macs_original for c in costs)
    compressed = sum(c.macs_compressed for c in costs)
    return 1.0 - compressed / total
