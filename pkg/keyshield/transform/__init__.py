"""Keyed block-wise pixel shuffling."""

from .keys import (
    PermutationVector,
    SecretKey,
    derive_permutation,
    generate_keys,
    load_key_file,
    save_key_file,
)
from .prng import SplitMix64
from .shuffle import (
    encrypt_dataset,
    shuffle_image,
    shuffle_tensor,
    unshuffle_image,
    unshuffle_tensor,
)

__all__ = [
    "PermutationVector",
    "SecretKey",
    "SplitMix64",
    "derive_permutation",
    "encrypt_dataset",
    "generate_keys",
    "load_key_file",
    "save_key_file",
    "shuffle_image",
    "shuffle_tensor",
    "unshuffle_image",
    "unshuffle_tensor",
]
