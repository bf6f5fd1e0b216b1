"""Inference: latent-code optimization against partial observations.

One core loop (`optimize_latent`) serves three modes.  The baseline is the
plain auto-decoder objective (data + code norm) from a random init; the
regularized mode starts from the encoder's code and adds the discriminator
belief term; multi-code mode jointly optimizes several jittered codes whose
mid-decoder features fuse by columnwise max.  With the discriminator weight
at zero and a random init, the regularized path is step-for-step the
baseline under the same seed (bitwise energy traces); with one unjittered
code, multi-code is bitwise the single-code path.

Energies follow the 2:1:1 convention: the data term is the mean clamped-L1
over observation points, the regularizer is the squared code norm, and the
discriminator term is -log D on points resampled every few iterations from
the unit sphere plus the observation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .nets import Decoder, Discriminator, Encoder
from .shapes.csg import uniform_in_sphere
from .shapes.marching import TriangleMesh, VoxelGrid, marching_cubes
from .train import NumericAbort, clamped_l1

__all__ = [
    "Observation",
    "OptimConfig",
    "FusionConfig",
    "ReconResult",
    "e_data",
    "e_reg",
    "e_dis",
    "optimize_latent",
    "optimize_baseline",
    "optimize_regularized",
    "fuse_multicode",
    "extract_mesh",
]


@dataclass
class Observation:
    """On-surface points plus off-surface points with +-offset targets."""

    surf: np.ndarray
    off_points: np.ndarray
    off_targets: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.surf = np.asarray(self.surf, dtype=np.float64).reshape(-1, 3)
        self.off_points = np.asarray(self.off_points, dtype=np.float64).reshape(-1, 3)
        self.off_targets = np.asarray(self.off_targets, dtype=np.float64).reshape(-1)
        if len(self.surf) == 0:
            raise ValueError("observation needs at least one surface point")
        if len(self.off_points) != len(self.off_targets):
            raise ValueError("off-surface points and targets must align")

    @classmethod
    def from_scan(
        cls, points: np.ndarray, offset: float = 0.02, source_id: str = ""
    ) -> "Observation":
        """Surface points get SDF target 0; each also spawns two off-surface
        points at +-offset along the ray from the object center, with targets
        +-offset."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(points, axis=1)
        dirs = points / np.maximum(norms, 1e-9)[:, None]
        off = np.concatenate([points + offset * dirs, points - offset * dirs])
        targets = np.concatenate(
            [np.full(len(points), offset), np.full(len(points), -offset)]
        )
        return cls(points, off, targets, source_id)

    def all_points(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate([self.surf, self.off_points])
        targets = np.concatenate([np.zeros(len(self.surf)), self.off_targets])
        return pts, targets


@dataclass(frozen=True)
class OptimConfig:
    """Latent optimization settings (defaults mirror the training setup:
    800 iterations, 4096 discriminator points, 2:1:1 energy weights)."""

    iterations: int = 800
    w_data: float = 2.0
    lambda_reg: float = 1.0
    lambda_dis: float = 1.0
    clamp_delta: float = 0.1
    lr: float = 5e-3
    disc_points: int = 4096
    dis_resample_every: int = 50
    init_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if min(self.w_data, self.lambda_reg, self.lambda_dis) < 0:
            raise ValueError("energy weights must be >= 0")


@dataclass(frozen=True)
class FusionConfig:
    """Multi-code inference: jittered copies of the initial code, features
    fused by columnwise max at the split layer."""

    n_codes: int = 4
    split_layer: int = 4
    jitter_sigma: float = 0.05

    def __post_init__(self):
        if self.n_codes < 1:
            raise ValueError("need at least one code")


@dataclass
class ReconResult:
    codes: list[np.ndarray]
    trace: list[dict] = field(default_factory=list)

    @property
    def code(self) -> np.ndarray:
        return self.codes[0]


# ---------------------------------------------------------------------------
# Energy terms
# ---------------------------------------------------------------------------

def e_data(
    obs: Observation,
    decoder: Decoder,
    z: dc.Tensor | np.ndarray,
    delta: float = 0.1,
) -> dc.Tensor:
    """Mean clamped-L1 between predictions and observation targets."""
    if not isinstance(z, dc.Tensor):
        z = dc.Tensor(z)
    pts, targets = obs.all_points()
    pred = decoder.forward(z, pts)
    return clamped_l1(pred, targets, delta)


def e_reg(z: dc.Tensor | np.ndarray) -> dc.Tensor:
    """Squared Euclidean norm of the latent code."""
    if not isinstance(z, dc.Tensor):
        z = dc.Tensor(z)
    return dc.total(dc.square(z))


def e_dis(
    decoder: Decoder,
    disc: Discriminator,
    z: dc.Tensor | np.ndarray,
    x_dis: np.ndarray,
) -> dc.Tensor:
    """-log D on the sampled field; gradients reach z through both nets."""
    if not isinstance(z, dc.Tensor):
        z = dc.Tensor(z)
    s = decoder.forward(z, x_dis)
    return dc.neg(dc.log(disc.forward(x_dis, s, "fake", training=False)))


# ---------------------------------------------------------------------------
# Optimization core
# ---------------------------------------------------------------------------

def optimize_latent(
    decoder: Decoder,
    obs: Observation,
    cfg: OptimConfig,
    codes_init: list[np.ndarray],
    disc: Discriminator | None = None,
    split_layer: int | None = None,
    rng: np.random.Generator | None = None,
) -> ReconResult:
    """Gradient descent on the latent code(s); returns the best-energy iterate.

    The discriminator term is active only when `disc` is given and
    lambda_dis > 0; its sample set (uniform-in-sphere plus the observation
    surface points) is redrawn every `dis_resample_every` iterations.  When
    the term is inactive no discriminator samples are drawn, so the random
    stream matches a run without the term.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    split = decoder.spec.skip_layer if split_layer is None else split_layer
    codes = dc.ParamSet()
    tensors = [
        codes.add(f"z{k}", np.asarray(c, dtype=np.float64))
        for k, c in enumerate(codes_init)
    ]
    adam = dc.AdamState(cfg.lr)
    use_dis = disc is not None and cfg.lambda_dis > 0.0

    pts, targets = obs.all_points()
    best = {"energy": np.inf, "codes": [t.value.copy() for t in tensors]}
    trace = []
    x_dis = None
    for it in range(cfg.iterations):
        if use_dis and it % cfg.dis_resample_every == 0:
            n_fill = max(cfg.disc_points - len(obs.surf), 0)
            x_dis = np.concatenate([uniform_in_sphere(n_fill, rng), obs.surf])
        with dc.Tape() as tape:
            pred = decoder.forward_fused(tensors, pts, split)
            data = clamped_l1(pred, targets, cfg.clamp_delta)
            reg_term = dc.total(dc.square(tensors[0]))
            for t in tensors[1:]:
                reg_term = dc.add(reg_term, dc.total(dc.square(t)))
            energy = dc.add(
                dc.scale(data, cfg.w_data), dc.scale(reg_term, cfg.lambda_reg)
            )
            dis_val = 0.0
            if use_dis:
                s_dis = decoder.forward_fused(tensors, x_dis, split)
                d = disc.forward(x_dis, s_dis, "fake", training=False)
                dis = dc.neg(dc.log(d))
                dis_val = float(dis.value)
                energy = dc.add(energy, dc.scale(dis, cfg.lambda_dis))
        total = float(energy.value)
        if not np.isfinite(total):
            raise NumericAbort(f"non-finite reconstruction energy at iteration {it}")
        if total < best["energy"]:
            best = {"energy": total, "codes": [t.value.copy() for t in tensors]}
        trace.append(
            {
                "iter": it,
                "e_data": float(data.value),
                "e_reg": float(reg_term.value),
                "e_dis": dis_val,
                "total": total,
                "best_total": best["energy"],
            }
        )
        grads = dc.backward(tape, energy)
        dc.adam_step(adam, codes, codes.grads_from(grads))
    return ReconResult(codes=best["codes"], trace=trace)


def optimize_baseline(
    decoder: Decoder, obs: Observation, cfg: OptimConfig
) -> ReconResult:
    """Plain auto-decoder objective (data + code norm) from a random init."""
    rng = np.random.default_rng(cfg.seed)
    z0 = rng.normal(0.0, cfg.init_sigma, size=decoder.spec.code_dim)
    base_cfg = OptimConfig(**{**_cfg_dict(cfg), "lambda_dis": 0.0})
    return optimize_latent(decoder, obs, base_cfg, [z0], disc=None, rng=rng)


def optimize_regularized(
    decoder: Decoder,
    disc: Discriminator | None,
    encoder: Encoder | None,
    obs: Observation,
    cfg: OptimConfig,
    init: np.ndarray | None = None,
) -> ReconResult:
    """Full objective from the encoder's initialization.

    `init` overrides the encoder output; a None encoder with no init falls
    back to a random draw (that plus lambda_dis = 0 is exactly the baseline).
    """
    rng = np.random.default_rng(cfg.seed)
    if init is not None:
        z0 = np.asarray(init, dtype=np.float64)
    elif encoder is not None:
        with dc.no_tape():
            z0 = encoder.forward(obs.surf).value.copy()
    else:
        z0 = rng.normal(0.0, cfg.init_sigma, size=decoder.spec.code_dim)
    return optimize_latent(decoder, obs, cfg, [z0], disc=disc, rng=rng)


def fuse_multicode(
    decoder: Decoder,
    disc: Discriminator | None,
    obs: Observation,
    fusion: FusionConfig,
    cfg: OptimConfig,
    base_code: np.ndarray,
) -> ReconResult:
    """Jitter the initial code into n copies and optimize them jointly under
    max-fused features.  With n = 1 and zero jitter this is bitwise the
    single-code path (no jitter draw happens)."""
    rng = np.random.default_rng(cfg.seed)
    base = np.asarray(base_code, dtype=np.float64)
    inits = []
    for _ in range(fusion.n_codes):
        if fusion.jitter_sigma > 0.0:
            inits.append(base + rng.normal(0.0, fusion.jitter_sigma, size=base.shape))
        else:
            inits.append(base.copy())
    return optimize_latent(
        decoder,
        obs,
        cfg,
        inits,
        disc=disc,
        split_layer=fusion.split_layer,
        rng=rng,
    )


def extract_mesh(
    decoder: Decoder,
    codes: np.ndarray | list[np.ndarray],
    resolution: int = 64,
    split_layer: int | None = None,
) -> TriangleMesh:
    """Evaluate the (possibly fused) field on a lattice over [-1, 1]^3 and run
    marching cubes at iso 0.  A field with no zero crossing yields an empty
    mesh, not an error."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if isinstance(codes, np.ndarray) and codes.ndim == 1:
        codes = [codes]
    values = decoder.field_on_grid(list(codes), resolution, split=split_layer)
    grid = VoxelGrid(
        (resolution,) * 3, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), values
    )
    return marching_cubes(grid, iso=0.0)


def _cfg_dict(cfg: OptimConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)
