"""sdflab: neural implicit shape completion with exact procedural oracles.

Subpackages: `diffcore` (autodiff + Adam), `shapes` (CSG oracles, scanning,
marching cubes), `nets` (decoder / encoder / discriminator), `train`
(two-stage curriculum + fine-tuning), `recon` (latent optimization),
`metrics` (ACD / recall), `cli` + `runs` (commands, configs, manifests).
"""

__version__ = "0.1.0"

from . import diffcore, metrics, nets, recon, shapes, train  # noqa: F401

__all__ = ["diffcore", "metrics", "nets", "recon", "shapes", "train", "__version__"]
