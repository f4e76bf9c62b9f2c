"""Counter-based random numbers for reproducible parallel path simulation.

Every path owns a 64-bit key derived from ``(master_seed, path_index)``.
A draw is ``threefry2x32(key, counter)``, so any increment of any path can
be regenerated without touching shared generator state.  The 64-bit counter
is split into lanes: lane 0 carries Gaussian increments, lane 1 the
uniforms used by the Brownian-bridge kill test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_ROTATIONS = (13, 15, 26, 6, 17, 29, 16, 24)
_PARITY = np.uint32(0x1BD11BDA)

GAUSSIAN_LANE = 0
BRIDGE_LANE = 1
_LANE_SHIFT = 62
_TWO_POW_32 = 4294967296.0


def _rotl(x: np.ndarray, r: int) -> np.ndarray:
    return (x << np.uint32(r)) | (x >> np.uint32(32 - r))


def threefry2x32(k0, k1, c0, c1, rounds: int = 20):
    """Threefry-2x32 block function (Random123 parameters).

    All four inputs are broadcast uint32 arrays; returns two uint32 arrays.
    """
    k0 = np.atleast_1d(np.asarray(k0, dtype=np.uint32))
    k1 = np.atleast_1d(np.asarray(k1, dtype=np.uint32))
    ks = (k0, k1, _PARITY ^ k0 ^ k1)
    with np.errstate(over="ignore"):
        x0 = np.atleast_1d(np.asarray(c0, dtype=np.uint32)) + k0
        x1 = np.atleast_1d(np.asarray(c1, dtype=np.uint32)) + k1
        for r in range(rounds):
            x0 = x0 + x1
            x1 = _rotl(x1, _ROTATIONS[r % 8])
            x1 = x1 ^ x0
            if r % 4 == 3:
                s = (r + 1) // 4
                x0 = x0 + ks[s % 3]
                x1 = x1 + ks[(s + 1) % 3] + np.uint32(s)
    return x0, x1


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def path_keys(master_seed: int, path_indices) -> tuple[np.ndarray, np.ndarray]:
    """Derive the per-path Threefry key words from the seed and path indices."""
    idx = np.atleast_1d(np.asarray(path_indices)).astype(np.uint64)
    seed = np.array([master_seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    key = _splitmix64(_splitmix64(seed) ^ _splitmix64(idx))
    return (key & _MASK32).astype(np.uint32), (key >> np.uint64(32)).astype(np.uint32)


def _counter_words(lane: int, index: int) -> tuple[np.uint32, np.uint32]:
    c = (lane << _LANE_SHIFT) | index
    return np.uint32(c & 0xFFFFFFFF), np.uint32(c >> 32)


def _unit_open(bits: np.ndarray) -> np.ndarray:
    # maps uint32 to (0, 1), never hitting either end
    return (bits.astype(np.float64) + 0.5) / _TWO_POW_32


def standard_normals(keys, first_step: int, n_steps: int, dim_noise: int) -> np.ndarray:
    """Standard normals for steps ``first_step .. first_step + n_steps - 1``.

    Coordinate ``j`` of step ``k`` is draw number ``k * dim_noise + j`` of
    the path; draws ``2m`` and ``2m + 1`` come from one Threefry block of
    lane 0 via Box-Muller.  The result depends only on the key and the draw
    number, never on how steps are grouped into calls.

    Returns shape ``(n_paths, n_steps, dim_noise)``.
    """
    k0, k1 = keys
    lo = first_step * dim_noise
    hi = (first_step + n_steps) * dim_noise
    b_lo, b_hi = lo // 2, (hi + 1) // 2
    pairs = []
    for b in range(b_lo, b_hi):
        c0, c1 = _counter_words(GAUSSIAN_LANE, b)
        w0, w1 = threefry2x32(k0, k1, c0, c1)
        radius = np.sqrt(-2.0 * np.log(_unit_open(w0)))
        angle = (2.0 * np.pi / _TWO_POW_32) * w1.astype(np.float64)
        pairs.append(radius * np.cos(angle))
        pairs.append(radius * np.sin(angle))
    flat = np.stack(pairs, axis=-1)[:, lo - 2 * b_lo : hi - 2 * b_lo]
    return flat.reshape(len(k0), n_steps, dim_noise)


def bridge_uniforms(keys, step: int) -> np.ndarray:
    """Uniforms on (0, 1) reserved for the bridge test of step ``step``."""
    k0, k1 = keys
    c0, c1 = _counter_words(BRIDGE_LANE, step)
    w0, _ = threefry2x32(k0, k1, c0, c1)
    return _unit_open(w0)


@dataclass(frozen=True)
class NoiseStream:
    """Handle on the increment sequence of one path.

    ``counter`` is the step offset at which the stream starts reading.
    """

    master_seed: int
    path_index: int
    counter: int = 0

    def keys(self):
        return path_keys(self.master_seed, [self.path_index])

    def increments(self, n_steps: int, dim_noise: int, dt) -> np.ndarray:
        return gaussian_increments(self, n_steps, dim_noise, dt)


def gaussian_increments(stream: NoiseStream, n_steps: int, dim_noise: int, dt) -> np.ndarray:
    """Brownian increments ``sqrt(dt_k) * N(0, I)`` for ``n_steps`` steps.

    ``dt`` may be a scalar or a length-``n_steps`` array of step sizes.
    Returns an array of shape ``(n_steps, dim_noise)``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    dts = np.broadcast_to(np.asarray(dt, dtype=float), (n_steps,))
    if np.any(dts <= 0):
        raise ValueError("dt must be positive")
    z = standard_normals(stream.keys(), stream.counter, n_steps, dim_noise)[0]
    return z * np.sqrt(dts)[:, None]
