"""Key-based defense against adversarial examples for isotropic classifiers.

A secret key derives a block-wise pixel permutation; a pre-trained classifier's
patch embedding and head are fine-tuned on images shuffled with that key while
the backbone stays frozen. A pool of such keys is sampled per inference.
"""

from .errors import KeyShieldError

__version__ = "0.1.0"

__all__ = ["KeyShieldError", "__version__"]
