import numpy as np


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; the only entropy source in camtraj."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


def child_rng(rng: np.random.Generator, *keys) -> np.random.Generator:
    """Derive an independent stream from ``rng``'s seed sequence and integer keys.

    Derivation does not advance ``rng``, so adding a consumer never shifts the
    draws seen by existing ones.
    """
    seed_seq = rng.bit_generator.seed_seq
    entropy = seed_seq.entropy
    spawn_key = tuple(seed_seq.spawn_key) + tuple(int(k) for k in keys)
    ss = np.random.SeedSequence(entropy, spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))
