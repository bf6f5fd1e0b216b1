"""The three networks: SDF decoder, point-cloud encoder, shape discriminator.

Each network bundles an architecture spec with a ParamSet; forwards are pure
given the parameters (batch-norm running statistics are ParamSet entries and
only move when a training step explicitly asks for an update).  Checkpoints
are the ParamSet serialization plus an architecture descriptor; loading
validates shapes against the descriptor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc

__all__ = [
    "DecoderSpec",
    "EncoderSpec",
    "DiscriminatorSpec",
    "Decoder",
    "Encoder",
    "Discriminator",
    "save_checkpoint",
    "load_checkpoint",
]


def _kaiming(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = np.sqrt(6.0 / in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def _xavier(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def _add_affine(params, rng, name, in_dim, out_dim, init=_kaiming):
    params.add(f"{name}.W", init(rng, out_dim, in_dim))
    params.add(f"{name}.b", np.zeros(out_dim))


def _add_bn(params, name, dim):
    params.add(f"{name}.gamma", np.ones(dim))
    params.add(f"{name}.beta", np.zeros(dim))
    params.add(f"{name}.run_mean", np.zeros(dim), trainable=False)
    params.add(f"{name}.run_var", np.ones(dim), trainable=False)


def _bn_state(params, name) -> dc.BatchNormState:
    st = dc.BatchNormState.__new__(dc.BatchNormState)
    st.mean = params[f"{name}.run_mean"].value
    st.var = params[f"{name}.run_var"].value
    return st


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecoderSpec:
    """8-layer MLP over concat(z, x) with the input re-injected at the skip
    layer and a tanh head."""

    code_dim: int = 256
    hidden: int = 512
    depth: int = 8
    skip_layer: int = 4

    @property
    def in_dim(self) -> int:
        return self.code_dim + 3

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        cur = self.in_dim
        for layer in range(1, self.depth + 1):
            if layer == self.depth:
                out = 1
            elif layer == self.skip_layer and self.hidden > self.in_dim:
                out = self.hidden - self.in_dim  # keep width after the concat
            else:
                out = self.hidden
            dims.append((cur, out))
            cur = out + self.in_dim if layer == self.skip_layer else out
        return dims


@dataclass
class Decoder:
    spec: DecoderSpec
    params: dc.ParamSet

    @classmethod
    def init(cls, spec: DecoderSpec, rng: np.random.Generator) -> "Decoder":
        params = dc.ParamSet()
        for layer, (din, dout) in enumerate(spec.layer_dims(), start=1):
            init = _xavier if layer == spec.depth else _kaiming
            _add_affine(params, rng, f"dec.l{layer}", din, dout, init)
        return cls(spec, params)

    def _input_block(self, z: dc.Tensor, points: np.ndarray) -> dc.Tensor:
        n = len(points)
        zs = dc.expand_rows(z, n)
        xs = dc.Tensor(points)
        return dc.concat_cols([zs, xs])

    def features(self, z: dc.Tensor, points: np.ndarray, upto: int) -> dc.Tensor:
        """Activations after layer `upto` (including the skip concat if it
        lands there); the fusion split point for multi-code inference."""
        if not 1 <= upto < self.spec.depth:
            raise ValueError("split layer must satisfy 1 <= l < depth")
        if upto < self.spec.skip_layer:
            raise ValueError(
                "split layer must not precede the skip re-injection "
                f"(skip at {self.spec.skip_layer})"
            )
        inp = self._input_block(z, points)
        h = inp
        for layer in range(1, upto + 1):
            p = self.params
            h = dc.relu(dc.affine(p[f"dec.l{layer}.W"], p[f"dec.l{layer}.b"], h))
            if layer == self.spec.skip_layer:
                h = dc.concat_cols([h, inp])
        return h

    def head(self, feats: dc.Tensor, from_layer: int) -> dc.Tensor:
        """Run layers from_layer+1 .. depth on fused/raw features -> (n,)."""
        h = feats
        p = self.params
        for layer in range(from_layer + 1, self.spec.depth + 1):
            h = dc.affine(p[f"dec.l{layer}.W"], p[f"dec.l{layer}.b"], h)
            if layer < self.spec.depth:
                h = dc.relu(h)
        n = h.value.shape[0]
        return dc.reshape(dc.tanh(h), (n,))

    def forward(self, z: dc.Tensor | np.ndarray, points: np.ndarray) -> dc.Tensor:
        """Predicted SDF per query point, in [-1, 1]; points independent."""
        if not isinstance(z, dc.Tensor):
            z = dc.Tensor(z)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("decoder needs at least one query point")
        feats = self.features(z, points, self.spec.skip_layer)
        return self.head(feats, self.spec.skip_layer)

    def forward_fused(
        self, codes: list[dc.Tensor], points: np.ndarray, split: int
    ) -> dc.Tensor:
        """Multi-code forward: per-code features through the first block,
        columnwise max fusion, shared second block."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        feats = [self.features(z, points, split) for z in codes]
        return self.head(dc.fuse_max(feats), split)

    def field_on_grid(
        self,
        codes: list[np.ndarray] | np.ndarray,
        resolution: int | tuple[int, int, int],
        split: int | None = None,
        chunk: int = 16384,
    ) -> np.ndarray:
        """Untaped (pure) evaluation of the decoder field on a lattice."""
        from .shapes.marching import VoxelGrid

        if isinstance(resolution, int):
            resolution = (resolution,) * 3
        pts = VoxelGrid.grid_points(resolution)
        if isinstance(codes, np.ndarray) or isinstance(codes, dc.Tensor):
            codes = [codes]
        codes = [c if isinstance(c, dc.Tensor) else dc.Tensor(c) for c in codes]
        split = self.spec.skip_layer if split is None else split
        out = np.empty(len(pts))
        with dc.no_tape():
            for lo in range(0, len(pts), chunk):
                sub = pts[lo : lo + chunk]
                if len(codes) == 1:
                    out[lo : lo + chunk] = self.forward(codes[0], sub).value
                else:
                    out[lo : lo + chunk] = self.forward_fused(codes, sub, split).value
        return out

    def descriptor(self) -> dict:
        return {"kind": "decoder", **asdict(self.spec)}


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderSpec:
    """Stacked PointNet: block 128->256, pooled context, block 512->1024,
    then a 256-unit head with batch-norm and tanh."""

    block1: tuple[int, int] = (128, 256)
    block2: tuple[int, int] = (512, 1024)
    code_dim: int = 256
    max_points: int = 1024


@dataclass
class Encoder:
    spec: EncoderSpec
    params: dc.ParamSet

    @classmethod
    def init(cls, spec: EncoderSpec, rng: np.random.Generator) -> "Encoder":
        params = dc.ParamSet()
        _add_affine(params, rng, "enc.b1l1", 3, spec.block1[0])
        _add_affine(params, rng, "enc.b1l2", spec.block1[0], spec.block1[1])
        _add_affine(params, rng, "enc.b2l1", 2 * spec.block1[1], spec.block2[0])
        _add_affine(params, rng, "enc.b2l2", spec.block2[0], spec.block2[1])
        _add_affine(params, rng, "enc.head", spec.block2[1], spec.code_dim, _xavier)
        _add_bn(params, "enc.head.bn", spec.code_dim)
        return cls(spec, params)

    def forward(self, points: np.ndarray) -> dc.Tensor:
        """Latent code in [-1, 1]^code_dim for one point cloud.

        The head batch-norm always normalizes with its running statistics
        (per-cloud batches have n = 1, where batch statistics are undefined);
        gamma/beta remain trainable.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not 1 <= len(points) <= self.spec.max_points:
            raise ValueError(
                f"encoder expects 1..{self.spec.max_points} points, got {len(points)}"
            )
        p = self.params
        n = len(points)
        h = dc.relu(dc.affine(p["enc.b1l1.W"], p["enc.b1l1.b"], dc.Tensor(points)))
        h = dc.affine(p["enc.b1l2.W"], p["enc.b1l2.b"], h)
        g1 = dc.maxpool_set(h)
        h = dc.concat_cols([h, dc.expand_rows(g1, n)])
        h = dc.relu(dc.affine(p["enc.b2l1.W"], p["enc.b2l1.b"], h))
        h = dc.affine(p["enc.b2l2.W"], p["enc.b2l2.b"], h)
        g2 = dc.maxpool_set(h)
        code = dc.affine(p["enc.head.W"], p["enc.head.b"], g2)
        code = dc.reshape(code, (1, self.spec.code_dim))
        code = dc.batchnorm(
            code,
            p["enc.head.bn.gamma"],
            p["enc.head.bn.beta"],
            _bn_state(p, "enc.head.bn"),
            training=False,
        )
        return dc.tanh(dc.reshape(code, (self.spec.code_dim,)))

    def descriptor(self) -> dict:
        return {"kind": "encoder", **asdict(self.spec)}


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscriminatorSpec:
    """PointNet-style: per-point layers with dual batch-norm, global max
    pool, scalar sigmoid head."""

    per_point: tuple[int, ...] = (64, 64, 64, 128, 1024)
    in_dim: int = 4  # concat(x, s)


@dataclass
class Discriminator:
    spec: DiscriminatorSpec
    params: dc.ParamSet

    @classmethod
    def init(cls, spec: DiscriminatorSpec, rng: np.random.Generator) -> "Discriminator":
        params = dc.ParamSet()
        cur = spec.in_dim
        for i, width in enumerate(spec.per_point, start=1):
            _add_affine(params, rng, f"disc.l{i}", cur, width)
            for branch in ("real", "fake"):
                _add_bn(params, f"disc.l{i}.bn.{branch}", width)
            cur = width
        _add_affine(params, rng, "disc.head", cur, 1, _xavier)
        return cls(spec, params)

    def forward(
        self,
        points: np.ndarray,
        sdf: dc.Tensor | np.ndarray,
        branch: str = "real",
        training: bool = False,
        update_stats: bool = False,
    ) -> dc.Tensor:
        """Scalar naturalness probability in (0, 1) for a sampled SDF set.

        `branch` selects which running statistics the batch-norms use (and,
        when `training` and `update_stats`, update); real and fake never mix.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        if training and n < 2:
            raise ValueError("discriminator training mode needs >= 2 samples")
        if branch not in ("real", "fake"):
            raise ValueError(f"branch must be 'real' or 'fake', got {branch!r}")
        if not isinstance(sdf, dc.Tensor):
            sdf = dc.Tensor(sdf)
        p = self.params
        h = dc.concat_cols([dc.Tensor(points), dc.reshape(sdf, (n, 1))])
        for i in range(1, len(self.spec.per_point) + 1):
            h = dc.affine(p[f"disc.l{i}.W"], p[f"disc.l{i}.b"], h)
            h = dc.batchnorm(
                h,
                p[f"disc.l{i}.bn.{branch}.gamma"],
                p[f"disc.l{i}.bn.{branch}.beta"],
                _bn_state(p, f"disc.l{i}.bn.{branch}"),
                training=training,
                update_stats=update_stats,
            )
            h = dc.relu(h)
        g = dc.maxpool_set(h)
        out = dc.affine(p["disc.head.W"], p["disc.head.b"], g)
        return dc.reshape(dc.sigmoid(out), ())

    def descriptor(self) -> dict:
        return {"kind": "discriminator", **asdict(self.spec)}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_SPECS = {
    "decoder": (DecoderSpec, Decoder),
    "encoder": (EncoderSpec, Encoder),
    "discriminator": (DiscriminatorSpec, Discriminator),
}


def save_checkpoint(net, base: str | Path, extra: dict | None = None) -> None:
    """ParamSet blob + manifest carrying the architecture descriptor."""
    meta = {"arch": net.descriptor()}
    if extra:
        meta.update(extra)
    dc.save_params(net.params, base, extra=meta)


def _spec_from_descriptor(desc: dict):
    kind = desc["kind"]
    spec_cls, net_cls = _SPECS[kind]
    fields = {k: v for k, v in desc.items() if k != "kind"}
    for key, val in fields.items():
        if isinstance(val, list):
            fields[key] = tuple(val)
    return spec_cls(**fields), net_cls


def load_checkpoint(base: str | Path):
    """Load a network; shapes are validated against the descriptor."""
    params, manifest = dc.load_params(base)
    spec, net_cls = _spec_from_descriptor(manifest["arch"])
    reference = net_cls.init(spec, np.random.default_rng(0))
    if reference.params.names() != params.names():
        raise ValueError(
            "checkpoint does not match architecture descriptor: entry names differ"
        )
    for name, t in reference.params.items():
        got = params[name].value.shape
        want = t.value.shape
        if got != want:
            raise ValueError(
                f"checkpoint shape mismatch for {name!r}: descriptor wants "
                f"{want}, file has {got}"
            )
    net = net_cls(spec, params)
    return net, manifest
