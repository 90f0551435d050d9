"""
Counter-addressed noise streams.

Every block of random numbers is addressed by ``(seed, purpose, step)`` and
generated by a freshly keyed Philox bit generator, so the numbers a particle
receives at a given step depend only on its id and that address, never on the
order in which blocks were requested.
"""
from typing import Optional

import numpy as np

from kdsde.constants import MAX_SEED
from kdsde.components.exceptions import InvalidArgumentError

__all__ = ('NoiseStreams', 'Purpose')


class Purpose:
    BROWNIAN = 1
    BRIDGE = 2
    INITIAL = 3
    CALIBRATION = 4
    VALIDATION = 5
    COMPANION = 6


class NoiseStreams:
    def __init__(self, seed: int, n_particles: int, noise_dim: int = 1):
        if not 0 <= int(seed) < MAX_SEED:
            raise InvalidArgumentError(f"seed({seed}) is not a 64-bit value")
        if n_particles < 0:
            raise InvalidArgumentError("number of particles must be non-negative")
        self.seed = int(seed)
        self.n_particles = int(n_particles)
        self.noise_dim = int(noise_dim)

    def generator(self, purpose: int, step: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, int(purpose), int(step)])
        return np.random.Generator(np.random.Philox(seq))

    def normals(self, step: int, ids: Optional[np.ndarray] = None) -> np.ndarray:
        """
        standard normals of shape (len(ids), noise_dim) for the given step
        """
        block = self.generator(Purpose.BROWNIAN, step).standard_normal((self.n_particles, self.noise_dim))
        return block if ids is None else block[ids]

    def uniforms(self, step: int, ids: Optional[np.ndarray] = None, purpose: int = Purpose.BRIDGE) -> np.ndarray:
        block = self.generator(purpose, step).random(self.n_particles)
        return block if ids is None else block[ids]

    def with_size(self, n_particles: int, noise_dim: Optional[int] = None) -> 'NoiseStreams':
        return NoiseStreams(self.seed, n_particles,
                            self.noise_dim if noise_dim is None else noise_dim)

    def __eq__(self, other):
        return (isinstance(other, NoiseStreams)
                and (self.seed, self.n_particles, self.noise_dim)
                == (other.seed, other.n_particles, other.noise_dim))

    def __repr__(self):
        return f"NoiseStreams(seed={self.seed}, n_particles={self.n_particles}, noise_dim={self.noise_dim})"
