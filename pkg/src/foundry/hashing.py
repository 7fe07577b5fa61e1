"""Content hashes shared by the catalog, the graph container and the manifest."""

import hashlib

# Archives declare this id so a reader can refuse an unknown algorithm.
HASH_ALGORITHM_ID = 1
HASH_ALGORITHM_NAME = "blake2b-64"


def content_hash(data) -> int:
    """64-bit content hash of a byte sequence, as an unsigned integer."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def digest128(data) -> bytes:
    return hashlib.blake2b(data, digest_size=16).digest()


def hex_hash(h: int) -> str:
    return f"{h:016x}"
