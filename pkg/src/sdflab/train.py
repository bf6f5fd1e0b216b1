"""Two-stage curriculum training and sparse fine-tuning.

Stage 1 jointly optimizes the decoder and per-shape latent codes against
ground-truth SDF samples (clamped-L1 data term plus code norm penalty).
Stage 2 freezes the decoder and adversarially trains the encoder and
discriminator, supervised by Stage-1 pseudo-ground-truth codes and predicted
fields.  Fine-tuning adapts the encoder on sparse on-surface observations
with everything else frozen.

All loops are deterministic under a fixed seed; one Generator per run feeds
every draw, and its state is checkpointed so resumed runs continue the exact
trajectory.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .nets import (
    Decoder,
    DecoderSpec,
    Discriminator,
    DiscriminatorSpec,
    Encoder,
    EncoderSpec,
    load_checkpoint,
    save_checkpoint,
)
from .shapes.csg import uniform_in_sphere
from .shapes.dataset import ShapeRecord

__all__ = [
    "NumericAbort",
    "Stage1Config",
    "Stage2Config",
    "FinetuneConfig",
    "PseudoGroundTruth",
    "Stage1Run",
    "Stage2Run",
    "stage1_train",
    "build_disc_layouts",
    "build_pseudo_gt",
    "stage2_train",
    "finetune_encoder",
    "clamped_l1",
]


class NumericAbort(RuntimeError):
    """Raised when a loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def clamped_l1(pred: dc.Tensor, target: np.ndarray, delta: float) -> dc.Tensor:
    """mean |clamp(pred, +-delta) - clamp(target, +-delta)| — symmetric, <= 2*delta."""
    t = np.clip(np.asarray(target, dtype=np.float64), -delta, delta)
    return dc.mean(dc.abs_(dc.sub(dc.clamp(pred, -delta, delta), dc.Tensor(t))))


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Stage1Config:
    """Auto-decoder training: joint decoder + latent code optimization."""

    epochs: int = 500
    code_dim: int = 256
    lambda_reg: float = 1e-4
    clamp_delta: float = 0.1
    lr_decoder: float = 5e-4
    lr_codes: float = 1e-3
    code_init_sigma: float = 0.01
    samples_per_shape: int = 16384
    samples_per_step: int = 1024
    decoder: DecoderSpec = DecoderSpec()
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_decoder, self.lr_codes) <= 0:
            raise ValueError("learning rates must be positive")
        if self.samples_per_shape < 1:
            raise ValueError("samples_per_shape must be >= 1")


@dataclass(frozen=True)
class Stage2Config:
    """Adversarial encoder/discriminator training on a frozen decoder.

    Loss weights follow the 2:1:1 convention over the data, adversarial and
    code-matching terms.
    """

    epochs: int = 280
    w_dec: float = 2.0
    w_gan: float = 1.0
    w_z: float = 1.0
    disc_points: int = 4096
    dec_points_per_step: int = 512
    lr_encoder: float = 1e-4
    lr_disc: float = 1e-4
    clamp_delta: float = 0.1
    # when set, each step subsamples the scan to a size drawn from this
    # range, so the encoder sees the whole sparsity spectrum it will face
    scan_sparsify: tuple[int, int] | None = None
    encoder: EncoderSpec = EncoderSpec()
    discriminator: DiscriminatorSpec = DiscriminatorSpec()
    seed: int = 0

    def __post_init__(self):
        if min(self.w_dec, self.w_gan, self.w_z) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.disc_points < 2:
            raise ValueError("discriminator point count must be >= 2")


@dataclass(frozen=True)
class FinetuneConfig:
    """Encoder-only fine-tuning on sparse observations (no dense GT)."""

    epochs: int = 60
    w_data: float = 2.0
    w_anchor: float = 1.0
    w_dis: float = 1.0
    lr: float = 1e-4
    clamp_delta: float = 0.1
    seed: int = 0


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

@dataclass
class Stage1Run:
    """Mutable training state; `step_epoch` advances it deterministically."""

    config: Stage1Config
    decoder: Decoder
    codes: dc.ParamSet
    adam_decoder: dc.AdamState
    adam_codes: dc.AdamState
    rng: np.random.Generator
    epoch: int = 0
    log: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, records: list[ShapeRecord], cfg: Stage1Config) -> "Stage1Run":
        if not records:
            raise ValueError("dataset must be non-empty")
        rng = np.random.default_rng(cfg.seed)
        decoder = Decoder.init(cfg.decoder, rng)
        codes = dc.ParamSet()
        for rec in records:
            codes.add(
                f"code.{rec.shape_id}",
                rng.normal(0.0, cfg.code_init_sigma, size=cfg.code_dim),
            )
        return cls(
            config=cfg,
            decoder=decoder,
            codes=codes,
            adam_decoder=dc.AdamState(cfg.lr_decoder),
            adam_codes=dc.AdamState(cfg.lr_codes),
            rng=rng,
        )

    def step_epoch(self, records: list[ShapeRecord]) -> dict:
        cfg = self.config
        data_terms = []
        reg_terms = []
        for rec in records:
            samples = rec.samples
            k = min(cfg.samples_per_step, len(samples))
            idx = self.rng.choice(len(samples), size=k, replace=False)
            pts, s_gt = samples[idx, :3], samples[idx, 3]
            z = self.codes[f"code.{rec.shape_id}"]
            with dc.Tape() as tape:
                pred = self.decoder.forward(z, pts)
                data = clamped_l1(pred, s_gt, cfg.clamp_delta)
                reg = dc.total(dc.square(z))
                loss = dc.add(data, dc.scale(reg, cfg.lambda_reg))
            if not np.isfinite(float(loss.value)):
                raise NumericAbort(
                    f"non-finite stage-1 loss at epoch {self.epoch} "
                    f"(shape {rec.shape_id})"
                )
            grads = dc.backward(tape, loss)
            dc.adam_step(
                self.adam_decoder, self.decoder.params,
                self.decoder.params.grads_from(grads),
            )
            code_grads = {f"code.{rec.shape_id}": grads.get(z, np.zeros_like(z.value))}
            dc.adam_step(self.adam_codes, self.codes, code_grads)
            data_terms.append(float(data.value))
            reg_terms.append(float(reg.value))
        self.epoch += 1
        row = {
            "epoch": self.epoch,
            "data": float(np.mean(data_terms)),
            "reg": float(np.mean(reg_terms)),
            "loss": float(np.mean(data_terms) + cfg.lambda_reg * np.mean(reg_terms)),
        }
        self.log.append(row)
        return row

    def save(self, ckpt_dir: str | Path) -> None:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.decoder, ckpt_dir / "decoder", extra={"stage": "stage1"})
        dc.save_params(self.codes, ckpt_dir / "codes")
        _save_adam(self.adam_decoder, ckpt_dir / "optim_decoder")
        _save_adam(self.adam_codes, ckpt_dir / "optim_codes")
        state = {
            "stage": "stage1",
            "epoch": self.epoch,
            "rng": self.rng.bit_generator.state,
            "config": asdict(self.config),
            "log": self.log,
        }
        with open(ckpt_dir / "state.json", "w") as fh:
            json.dump(state, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, ckpt_dir: str | Path) -> "Stage1Run":
        ckpt_dir = Path(ckpt_dir)
        with open(ckpt_dir / "state.json") as fh:
            state = json.load(fh)
        cfg_dict = dict(state["config"])
        cfg_dict["decoder"] = DecoderSpec(**cfg_dict["decoder"])
        cfg = Stage1Config(**cfg_dict)
        decoder, _ = load_checkpoint(ckpt_dir / "decoder")
        codes, _ = dc.load_params(ckpt_dir / "codes")
        run = cls(
            config=cfg,
            decoder=decoder,
            codes=codes,
            adam_decoder=_load_adam(ckpt_dir / "optim_decoder"),
            adam_codes=_load_adam(ckpt_dir / "optim_codes"),
            rng=np.random.default_rng(0),
            epoch=int(state["epoch"]),
            log=list(state["log"]),
        )
        run.rng.bit_generator.state = state["rng"]
        return run


def stage1_train(
    records: list[ShapeRecord],
    cfg: Stage1Config,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    resume: Stage1Run | None = None,
) -> Stage1Run:
    """Run (or continue) Stage 1 to cfg.epochs; returns the final state."""
    run = resume if resume is not None else Stage1Run.fresh(records, cfg)
    last_ckpt = None
    while run.epoch < cfg.epochs:
        try:
            run.step_epoch(records)
        except NumericAbort as e:
            raise NumericAbort(str(e), last_checkpoint=last_ckpt) from None
        if (
            checkpoint_dir is not None
            and checkpoint_every > 0
            and run.epoch % checkpoint_every == 0
        ):
            run.save(checkpoint_dir)
            last_ckpt = str(checkpoint_dir)
    return run


def _save_adam(state: dc.AdamState, base: Path) -> None:
    ps = dc.ParamSet()
    for name, arr in state.m.items():
        ps.add(f"m.{name}", arr)
    for name, arr in state.v.items():
        ps.add(f"v.{name}", arr)
    dc.save_params(
        ps,
        base,
        extra={
            "adam": {
                "lr": state.lr,
                "beta1": state.beta1,
                "beta2": state.beta2,
                "eps": state.eps,
                "t": state.t,
            }
        },
    )


def _load_adam(base: Path) -> dc.AdamState:
    ps, manifest = dc.load_params(base)
    meta = manifest["adam"]
    state = dc.AdamState(meta["lr"], meta["beta1"], meta["beta2"], meta["eps"])
    state.t = int(meta["t"])
    for name, t in ps.items():
        kind, pname = name.split(".", 1)
        (state.m if kind == "m" else state.v)[pname] = t.value
    return state


# ---------------------------------------------------------------------------
# Pseudo ground truth
# ---------------------------------------------------------------------------

@dataclass
class PseudoGroundTruth:
    """Stage-1 code and predicted field at the fixed Stage-2 query layout."""

    shape_id: str
    z_prime: np.ndarray
    points: np.ndarray
    s_prime: np.ndarray


def build_disc_layouts(
    records: list[ShapeRecord], n_points: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    """Fixed per-shape discriminator point set: scan points (capped at half)
    plus uniform-in-sphere fill."""
    layouts = {}
    for rec in records:
        scan_pts = (
            np.concatenate([s.cloud.points for s in rec.scans])
            if rec.scans
            else np.zeros((0, 3))
        )
        k = min(len(scan_pts), n_points // 2)
        if len(scan_pts) > k:
            keep = np.sort(rng.choice(len(scan_pts), size=k, replace=False))
            scan_pts = scan_pts[keep]
        fill = uniform_in_sphere(n_points - len(scan_pts), rng)
        layouts[rec.shape_id] = np.concatenate([scan_pts, fill])
    return layouts


def build_pseudo_gt(
    decoder: Decoder,
    codes: dc.ParamSet,
    query_points: dict[str, np.ndarray],
) -> dict[str, PseudoGroundTruth]:
    """Evaluate the frozen decoder at each shape's fixed query layout."""
    out = {}
    with dc.no_tape():
        for shape_id, pts in query_points.items():
            z = codes[f"code.{shape_id}"]
            s = decoder.forward(z, pts).value
            out[shape_id] = PseudoGroundTruth(shape_id, z.value.copy(), pts, s)
    return out


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

@dataclass
class Stage2Run:
    config: Stage2Config
    encoder: Encoder
    disc: Discriminator
    adam_encoder: dc.AdamState
    adam_disc: dc.AdamState
    rng: np.random.Generator
    epoch: int = 0
    log: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: Stage2Config) -> "Stage2Run":
        rng = np.random.default_rng(cfg.seed)
        encoder = Encoder.init(cfg.encoder, rng)
        disc = Discriminator.init(cfg.discriminator, rng)
        return cls(
            config=cfg,
            encoder=encoder,
            disc=disc,
            adam_encoder=dc.AdamState(cfg.lr_encoder),
            adam_disc=dc.AdamState(cfg.lr_disc),
            rng=rng,
        )

    def save(self, ckpt_dir: str | Path, stage: str = "stage2") -> None:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.encoder, ckpt_dir / "encoder", extra={"stage": stage})
        save_checkpoint(self.disc, ckpt_dir / "discriminator", extra={"stage": stage})
        _save_adam(self.adam_encoder, ckpt_dir / "optim_encoder")
        _save_adam(self.adam_disc, ckpt_dir / "optim_disc")
        state = {
            "stage": stage,
            "epoch": self.epoch,
            "rng": self.rng.bit_generator.state,
            "config": asdict(self.config),
            "log": self.log,
        }
        with open(ckpt_dir / "state.json", "w") as fh:
            json.dump(state, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, ckpt_dir: str | Path) -> "Stage2Run":
        ckpt_dir = Path(ckpt_dir)
        with open(ckpt_dir / "state.json") as fh:
            state = json.load(fh)
        cfg_dict = dict(state["config"])
        cfg_dict["encoder"] = EncoderSpec(
            **{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in cfg_dict["encoder"].items()
            }
        )
        cfg_dict["discriminator"] = DiscriminatorSpec(
            **{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in cfg_dict["discriminator"].items()
            }
        )
        cfg = Stage2Config(**cfg_dict)
        encoder, _ = load_checkpoint(ckpt_dir / "encoder")
        disc, _ = load_checkpoint(ckpt_dir / "discriminator")
        run = cls(
            config=cfg,
            encoder=encoder,
            disc=disc,
            adam_encoder=_load_adam(ckpt_dir / "optim_encoder"),
            adam_disc=_load_adam(ckpt_dir / "optim_disc"),
            rng=np.random.default_rng(0),
            epoch=int(state["epoch"]),
            log=list(state["log"]),
        )
        run.rng.bit_generator.state = state["rng"]
        return run


def stage2_train(
    decoder: Decoder,
    pseudo: dict[str, PseudoGroundTruth],
    records: list[ShapeRecord],
    cfg: Stage2Config,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    resume: Stage2Run | None = None,
) -> Stage2Run:
    """Alternating encoder / discriminator steps; the decoder never moves.

    Per epoch each shape is visited once with one of its scans (rotating by
    epoch).  The encoder step minimizes
    w_dec * L_dec + w_z * ||z - z'|| + w_gan * (-log D(fake)); the
    discriminator step minimizes -[log D(real) + log(1 - D(fake))] on the
    shape's fixed query layout, updating only the matching branch statistics.
    """
    decoder.params.freeze_all()
    run = resume if resume is not None else Stage2Run.fresh(cfg)
    last_ckpt = None
    while run.epoch < cfg.epochs:
        try:
            _stage2_epoch(run, decoder, pseudo, records)
        except NumericAbort as e:
            raise NumericAbort(str(e), last_checkpoint=last_ckpt) from None
        if (
            checkpoint_dir is not None
            and checkpoint_every > 0
            and run.epoch % checkpoint_every == 0
        ):
            run.save(checkpoint_dir)
            last_ckpt = str(checkpoint_dir)
    return run


def _stage2_epoch(
    run: Stage2Run,
    decoder: Decoder,
    pseudo: dict[str, PseudoGroundTruth],
    records: list[ShapeRecord],
) -> dict:
    cfg = run.config
    terms = {"dec": [], "z": [], "gan_enc": [], "disc": []}
    d_real_vals, d_fake_vals = [], []
    order = run.rng.permutation(len(records))
    for rec_i in order:
        rec = records[rec_i]
        if not rec.scans:
            raise ValueError(f"shape {rec.shape_id} has no scans")
        scan = rec.scans[run.epoch % len(rec.scans)].cloud.points
        if cfg.scan_sparsify is not None:
            lo, hi = cfg.scan_sparsify
            k = int(run.rng.integers(lo, min(hi, len(scan)) + 1))
            keep = np.sort(run.rng.choice(len(scan), size=k, replace=False))
            scan = scan[keep]
        pg = pseudo[rec.shape_id]
        k = min(cfg.dec_points_per_step, len(rec.samples))
        idx = run.rng.choice(len(rec.samples), size=k, replace=False)
        gt_pts, gt_s = rec.samples[idx, :3], rec.samples[idx, 3]

        adversarial = cfg.w_gan > 0.0

        # (a) encoder step
        with dc.Tape() as tape:
            z = run.encoder.forward(scan)
            pred = decoder.forward(z, gt_pts)
            l_dec = clamped_l1(pred, gt_s, cfg.clamp_delta)
            l_z = dc.norm2(dc.sub(z, dc.Tensor(pg.z_prime)))
            loss = dc.add(dc.scale(l_dec, cfg.w_dec), dc.scale(l_z, cfg.w_z))
            if adversarial:
                fake_s = decoder.forward(z, pg.points)
                d_fake_enc = run.disc.forward(
                    pg.points, fake_s, "fake", training=True, update_stats=False
                )
                l_gan_enc = dc.neg(dc.log(d_fake_enc))
                loss = dc.add(loss, dc.scale(l_gan_enc, cfg.w_gan))
        if not np.isfinite(float(loss.value)):
            raise NumericAbort(f"non-finite stage-2 encoder loss at epoch {run.epoch}")
        grads = dc.backward(tape, loss)
        dc.adam_step(
            run.adam_encoder, run.encoder.params, run.encoder.params.grads_from(grads)
        )

        terms["dec"].append(float(l_dec.value))
        terms["z"].append(float(l_z.value))
        if not adversarial:
            # weight zero disables the whole adversarial half: the
            # discriminator is neither consulted nor trained
            terms["gan_enc"].append(0.0)
            terms["disc"].append(0.0)
            continue

        # (b) discriminator step on the same fixed layout, detached fake field
        with dc.no_tape():
            z_det = run.encoder.forward(scan).value
            fake_now = decoder.forward(dc.Tensor(z_det), pg.points).value
        with dc.Tape() as tape:
            d_real = run.disc.forward(
                pg.points, pg.s_prime, "real", training=True, update_stats=True
            )
            d_fake = run.disc.forward(
                pg.points, fake_now, "fake", training=True, update_stats=True
            )
            loss_d = dc.neg(
                dc.add(dc.log(d_real), dc.log(dc.add_scalar(dc.neg(d_fake), 1.0)))
            )
        if not np.isfinite(float(loss_d.value)):
            raise NumericAbort(
                f"non-finite stage-2 discriminator loss at epoch {run.epoch}"
            )
        grads_d = dc.backward(tape, loss_d)
        dc.adam_step(run.adam_disc, run.disc.params, run.disc.params.grads_from(grads_d))

        terms["gan_enc"].append(float(l_gan_enc.value))
        terms["disc"].append(float(loss_d.value))
        d_real_vals.append(float(d_real.value))
        d_fake_vals.append(float(d_fake.value))

    run.epoch += 1
    d_all = d_real_vals + d_fake_vals
    sat = (
        float(np.mean([(d < 1e-6) or (d > 1.0 - 1e-6) for d in d_all]))
        if d_all
        else 0.0
    )
    if sat > 0.99:
        warnings.warn(
            f"discriminator saturated on {sat * 100:.1f}% of batches in epoch "
            f"{run.epoch}",
            RuntimeWarning,
        )
    row = {
        "epoch": run.epoch,
        "loss_dec": float(np.mean(terms["dec"])),
        "loss_z": float(np.mean(terms["z"])),
        "loss_gan_enc": float(np.mean(terms["gan_enc"])),
        "loss_disc": float(np.mean(terms["disc"])),
        "d_real": float(np.mean(d_real_vals)) if d_real_vals else 0.5,
        "d_fake": float(np.mean(d_fake_vals)) if d_fake_vals else 0.5,
        "saturated_frac": sat,
    }
    run.log.append(row)
    return row


# ---------------------------------------------------------------------------
# Sparse fine-tuning
# ---------------------------------------------------------------------------

def finetune_encoder(
    encoder: Encoder,
    disc: Discriminator,
    decoder: Decoder,
    observations: list,
    cfg: FinetuneConfig,
) -> tuple[Encoder, list[dict]]:
    """Adapt the encoder on sparse scans; discriminator and decoder frozen.

    Each observation supplies on-surface points (target SDF 0) and off-surface
    points at +-0.02 along center rays.  The anchor term pins the code to the
    pre-finetune encoder output; the discriminator term (eval-mode, fake
    branch) keeps the decoded field natural.  Returns a tuned copy.
    """
    from .recon import Observation  # local import to avoid a cycle

    decoder.params.freeze_all()
    disc.params.freeze_all()
    tuned = Encoder(encoder.spec, encoder.params.copy())
    if cfg.epochs == 0:
        return tuned, []
    rng = np.random.default_rng(cfg.seed)
    adam = dc.AdamState(cfg.lr)

    anchors = []
    with dc.no_tape():
        for obs in observations:
            anchors.append(tuned.forward(obs.surf).value.copy())

    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(observations))
        terms = {"data": [], "anchor": [], "dis": []}
        for i in order:
            obs: Observation = observations[i]
            pts = np.concatenate([obs.surf, obs.off_points])
            targets = np.concatenate([np.zeros(len(obs.surf)), obs.off_targets])
            with dc.Tape() as tape:
                z = tuned.forward(obs.surf)
                pred = decoder.forward(z, pts)
                l_data = clamped_l1(pred, targets, cfg.clamp_delta)
                l_anchor = dc.norm2(dc.sub(z, dc.Tensor(anchors[i])))
                d = disc.forward(pts, pred, "fake", training=False)
                l_dis = dc.neg(dc.log(d))
                loss = dc.add(
                    dc.add(dc.scale(l_data, cfg.w_data), dc.scale(l_anchor, cfg.w_anchor)),
                    dc.scale(l_dis, cfg.w_dis),
                )
            if not np.isfinite(float(loss.value)):
                raise NumericAbort(f"non-finite finetune loss at epoch {epoch}")
            grads = dc.backward(tape, loss)
            dc.adam_step(adam, tuned.params, tuned.params.grads_from(grads))
            terms["data"].append(float(l_data.value))
            terms["anchor"].append(float(l_anchor.value))
            terms["dis"].append(float(l_dis.value))
        log.append(
            {
                "epoch": epoch + 1,
                "loss_data": float(np.mean(terms["data"])),
                "loss_anchor": float(np.mean(terms["anchor"])),
                "loss_dis": float(np.mean(terms["dis"])),
            }
        )
    return tuned, log
