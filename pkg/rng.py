"""Named random substreams derived from one root seed.

Python's built-in hash() is salted per process, so seeds are derived from a
BLAKE2b digest over a tagged, length-prefixed encoding of the parts.
"""

import hashlib

import numpy as np
import torch

_MASK64 = 0xFFFFFFFFFFFFFFFF

# Stage streams used by the pipeline
DATA = "data"
TEXT_TRAIN = "text-train"
DIFF_TRAIN = "diff-train"
SAMPLING = "sampling"
PROBES = "probes"


def _encode(part: int | str | bytes) -> bytes:
    if isinstance(part, bytes):
        tag, payload = b"b", part
    elif isinstance(part, int):
        tag, payload = b"i", (int(part) & _MASK64).to_bytes(8, "little")
    else:
        tag, payload = b"s", str(part).encode("utf-8")
    return tag + len(payload).to_bytes(4, "little") + payload


def mix(base_seed: int, *parts: int | str | bytes) -> int:
    """Stable positive 31-bit seed for (base_seed, *parts); order matters."""
    digest = hashlib.blake2b(digest_size=8)
    for part in (base_seed, *parts):
        digest.update(_encode(part))
    return (int.from_bytes(digest.digest(), "little") & 0x7FFFFFFF) or 1


def numpy_rng(base_seed: int, *parts: int | str | bytes) -> np.random.Generator:
    return np.random.default_rng(mix(base_seed, *parts))


def torch_generator(base_seed: int, *parts: int | str | bytes) -> torch.Generator:
    return torch.Generator().manual_seed(mix(base_seed, *parts))


def seed_torch(base_seed: int, *parts: int | str | bytes) -> int:
    """Seed torch's global RNG (used by module initializers) from a substream."""
    seed = mix(base_seed, *parts)
    torch.manual_seed(seed)
    return seed
