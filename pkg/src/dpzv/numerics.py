"""Deterministic counter-based random sampling and the standard normal CDF.

Every random quantity in the simulator comes from a ``SeededStream``: a
Philox generator addressed by ``(seed, counter)``.  One logical draw (a
scalar, or a whole vector) consumes exactly one counter tick, and the bit
generator is repositioned to a counter-derived absolute offset before each
draw.  Replaying ``(seed, counter)`` therefore regenerates a draw
bit-for-bit, which is what lets perturbation directions be rebuilt from an
8-byte seed instead of being stored or transmitted.
"""

import hashlib
import math

import numpy as np

from . import alloctrack

_MASK64 = (1 << 64) - 1

# Each logical draw owns 2**32 Philox blocks (2**34 64-bit outputs), far more
# than any vector drawn here can consume, so consecutive ticks never overlap.
_BLOCKS_PER_TICK = 1 << 32

# Philox key lane 1 tags the keyspace: streams and direction regeneration
# can never collide even for equal 64-bit seeds.
_STREAM_TAG = 0
_DIRECTION_TAG = 1

# Chunk length for streaming direction regeneration (see sphere_scale /
# direction_chunks).  Small enough that temporaries stay negligible next to
# the model, large enough that the chunk loop is not the bottleneck.
DIRECTION_CHUNK = 4096


def _positioned(bitgen, key_lo, tag, counter):
    """Place ``bitgen`` at the absolute block offset of a logical draw."""
    block = (counter & _MASK64) * _BLOCKS_PER_TICK
    state = bitgen.state
    state["state"]["counter"] = np.array(
        [block & _MASK64, (block >> 64) & _MASK64, 0, 0], dtype=np.uint64
    )
    state["state"]["key"] = np.array([key_lo & _MASK64, tag], dtype=np.uint64)
    state["buffer_pos"] = 4
    state["has_uint32"] = 0
    state["uinteger"] = 0
    bitgen.state = state


class SeededStream:
    """Deterministic random source addressed by (seed, counter).

    Not shareable between concurrent executors: each logical actor owns its
    own stream, derived from the master seed via :func:`derive_seed`.
    """

    __slots__ = ("seed", "counter", "_bitgen", "_gen")

    def __init__(self, seed, counter=0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed)
        self._gen = np.random.Generator(self._bitgen)

    def _tick(self):
        _positioned(self._bitgen, self.seed, _STREAM_TAG, self.counter)
        self.counter = (self.counter + 1) & _MASK64
        return self._gen

    def advance(self, k):
        """Skip k logical draws."""
        if k < 0:
            raise ValueError("cannot advance a stream backwards")
        self.counter = (self.counter + int(k)) & _MASK64

    def clone(self):
        return SeededStream(self.seed, self.counter)

    # -- logical draws (one counter tick each) ------------------------------

    def gaussian(self, sigma):
        if sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {sigma}")
        z = self._tick().standard_normal()
        return float(sigma) * z

    def gaussians(self, n, sigma=1.0):
        if sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {sigma}")
        return float(sigma) * self._tick().standard_normal(n)

    def sphere(self, dim):
        if dim < 1:
            raise ValueError(f"dimension must be >= 1, got {dim}")
        gen = self._tick()
        g = gen.standard_normal(dim)
        norm = math.sqrt(float(g @ g))
        while norm == 0.0:  # probability zero, but keep the contract total
            g = gen.standard_normal(dim)
            norm = math.sqrt(float(g @ g))
        return g * (math.sqrt(dim) / norm)

    def uniform(self):
        return float(self._tick().random())

    def uniforms(self, n, low=0.0, high=1.0):
        return self._tick().uniform(low, high, size=n)

    def choice(self, n, k):
        """k distinct integers drawn uniformly without replacement from [0, n)."""
        return self._tick().choice(n, size=k, replace=False)

    def next_seed(self):
        """A fresh 64-bit seed, e.g. for a perturbation direction."""
        return int(self._tick().integers(0, 1 << 64, dtype=np.uint64))


def derive_seed(master_seed, label):
    """Derive an actor's 64-bit stream seed from the master seed.

    The rule is fixed and documented: blake2b over the little-endian master
    seed and the actor label, truncated to 8 bytes.  Distinct labels give
    statistically independent streams.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update((int(master_seed) & _MASK64).to_bytes(8, "little"))
    h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


# -- spec-level operations ---------------------------------------------------


def sample_sphere(dim, stream):
    """Uniform draw from the sphere of radius sqrt(dim).

    Gaussian draw, normalized, scaled by sqrt(dim); the returned norm is
    exact up to float rounding.
    """
    return stream.sphere(dim)


def sample_gaussian(sigma, stream):
    """One draw from N(0, sigma^2); sigma = 0 returns exactly 0.0."""
    return stream.gaussian(sigma)


def std_normal_cdf(x):
    """Standard normal CDF via the complementary error function.

    math.erfc is correctly rounded to ~1 ulp, so the absolute error is far
    below the 1e-12 budget the privacy accountant needs.
    """
    if math.isnan(x):
        raise ValueError("std_normal_cdf requires a finite argument")
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


# -- direction regeneration ---------------------------------------------------
#
# A perturbation direction u (uniform on the radius-sqrt(d) sphere) is defined
# entirely by a 64-bit seed.  The helpers below regenerate it in fixed-size
# chunks so that applying +/- lambda * u to a parameter vector never
# materializes a second model-sized buffer.


class DirectionSampler:
    """Regenerates sphere directions from 64-bit seeds, chunk by chunk.

    Owns a scratch bit generator; one instance per actor, never shared
    across concurrent executors.
    """

    __slots__ = ("_bitgen", "_gen")

    def __init__(self):
        self._bitgen = np.random.Philox(key=0)
        self._gen = np.random.Generator(self._bitgen)

    def _start(self, seed):
        _positioned(self._bitgen, seed, _DIRECTION_TAG, 0)
        return self._gen

    def raw_chunks(self, seed, dim, chunk=DIRECTION_CHUNK):
        """Yield (lo, hi, gaussians) covering [0, dim) in order."""
        gen = self._start(seed)
        lo = 0
        while lo < dim:
            hi = min(lo + chunk, dim)
            g = gen.standard_normal(hi - lo)
            alloctrack.record("direction.chunk", hi - lo)
            yield lo, hi, g
            lo = hi

    def scale(self, seed, dim, chunk=DIRECTION_CHUNK):
        """sqrt(dim) / ||g|| for the Gaussian vector keyed by ``seed``.

        Streaming pass: O(chunk) memory regardless of dim.
        """
        total = 0.0
        for _, _, g in self.raw_chunks(seed, dim, chunk):
            total += float(g @ g)
        if total == 0.0:
            raise ValueError("degenerate direction draw")
        return math.sqrt(dim) / math.sqrt(total)

    def add_scaled(self, seed, coeff, out, chunk=DIRECTION_CHUNK):
        """out += coeff * u(seed) without materializing u.

        Two streaming passes over the regenerated Gaussians: one for the
        norm, one to apply.  Peak temporary storage is one chunk.
        """
        dim = out.shape[0]
        c = coeff * self.scale(seed, dim, chunk)
        for lo, hi, g in self.raw_chunks(seed, dim, chunk):
            out[lo:hi] += (c * g).astype(out.dtype, copy=False)

    def direction(self, seed, dim, chunk=DIRECTION_CHUNK):
        """Materialize the full direction vector (library/test use)."""
        u = np.empty(dim, dtype=np.float64)
        alloctrack.record("direction.full", dim)
        s = self.scale(seed, dim, chunk)
        for lo, hi, g in self.raw_chunks(seed, dim, chunk):
            u[lo:hi] = s * g
        return u
