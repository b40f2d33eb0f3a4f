"""Splittable deterministic random streams.

Each stream wraps a Philox counter-based bit generator keyed by a hash
of (root seed, path of split labels). Splitting is cheap, collision-free
in practice, and independent of the order in which sibling streams are
consumed, which keeps parameter init reproducible even if module
construction order changes.
"""

import hashlib

import numpy as np

from ..errors import ContractError


def _derive_key(parent_digest, label):
    h = hashlib.blake2b(digest_size=32)
    h.update(parent_digest)
    h.update(label.encode("utf-8"))
    return h.digest()


class RngStream:
    """A named, splittable source of randomness."""

    __slots__ = ("_digest", "path", "_gen")

    def __init__(self, seed=None, _digest=None, path="root"):
        if _digest is None:
            if seed is None:
                raise ContractError("RngStream needs a seed")
            h = hashlib.blake2b(digest_size=32)
            h.update(b"todkat-rng-v1:")
            h.update(str(int(seed)).encode("ascii"))
            _digest = h.digest()
        self._digest = _digest
        self.path = path
        self._gen = None

    def split(self, label):
        """Child stream; same label always yields the same child."""
        if not label:
            raise ContractError("split label must be non-empty")
        return RngStream(
            _digest=_derive_key(self._digest, label),
            path=self.path + "/" + label,
        )

    @property
    def generator(self):
        if self._gen is None:
            key = np.frombuffer(self._digest[:16], dtype=np.uint64)
            bitgen = np.random.Philox(key=key)
            self._gen = np.random.Generator(bitgen)
        return self._gen

    def uniform(self, low, high, shape=None):
        return self.generator.uniform(low, high, size=shape)

    def normal(self, shape=None):
        return self.generator.standard_normal(size=shape)

    def gumbel(self, shape=None):
        return self.generator.gumbel(0.0, 1.0, size=shape)

    def integers(self, low, high, shape=None):
        return self.generator.integers(low, high, size=shape)

    def choice(self, n, size=None, replace=True, p=None):
        return self.generator.choice(n, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return "RngStream(%s)" % self.path
