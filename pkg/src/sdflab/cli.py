"""Command-line surface: dataset generation, training, reconstruction,
evaluation, and the ablation runner.

Subcommands: gen-data, train, reconstruct, evaluate, ablate, export-mesh.
Every command writes a RunManifest next to its artifacts and refuses to
overwrite existing outputs without --force.  Exit codes: 0 success, 2 usage,
3 I/O (including output collisions), 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .metrics import EvalPair, aggregate, cumulative_acd_curve, evaluate_pair, recall_fraction_curve
from .nets import load_checkpoint
from .recon import (
    FusionConfig,
    Observation,
    OptimConfig,
    extract_mesh,
    fuse_multicode,
    optimize_baseline,
    optimize_regularized,
)
from .runs import (
    TABLE5_ROWS,
    ExperimentConfig,
    RunManifest,
    config_hash,
    derive_seed,
    load_config,
    read_manifest,
)
from .shapes import (
    Scan,
    ScanConfig,
    ShapeRecord,
    load_dataset,
    make_vehicle,
    ring_viewpoints,
    sample_surface,
    sample_training_points,
    save_dataset,
    save_obj,
    symmetrize,
    virtual_scan,
)
from .shapes.sampling import PointCloud
from .train import (
    NumericAbort,
    Stage1Run,
    Stage2Run,
    build_disc_layouts,
    build_pseudo_gt,
    finetune_encoder,
    stage1_train,
    stage2_train,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(RuntimeError):
    pass


class OutputCollision(IOError):
    pass


def _resolve_out(path: str) -> Path:
    root = os.environ.get("SDFLAB_OUT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputCollision(
            f"output directory {path} is not empty; pass --force to overwrite"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(
    cfg: ExperimentConfig, out_dir: Path, force: bool = False, threads: int = 1
) -> Path:
    """Deterministic dataset: train and eval vehicle records with SDF samples
    and per-viewpoint scans, plus the JSON index.  Per-shape generation is
    independent (own derived seed), so the parallel path emits identical
    bytes."""
    out_dir = _prepare_out(out_dir, force)
    manifest = RunManifest.start("gen-data", cfg, root=cfg.seed)
    ds = cfg.dataset
    splits = {"train": [], "eval": []}
    plan = [("train", ds.train_seed0 + i, i) for i in range(ds.n_train)] + [
        ("eval", ds.eval_seed0 + i, i) for i in range(ds.n_eval)
    ]

    def build(item):
        split, seed, i = item
        sid = f"{split}{i:03d}"
        shape = make_vehicle(seed)
        rng = np.random.default_rng(derive_seed(cfg.seed, "data", sid))
        samples = sample_training_points(
            shape, ds.samples_per_shape, rng, near_fraction=ds.near_fraction
        )
        scans = []
        viewpoints = ring_viewpoints(ds.scans_per_shape, rng, distance=ds.scan_distance)
        for vp in viewpoints:
            cloud = virtual_scan(
                shape,
                ScanConfig(
                    viewpoint=tuple(vp),
                    azimuth_count=ds.scan_rays,
                    elevation_count=ds.scan_rays,
                ),
            )
            scans.append(Scan(tuple(vp), cloud.subsample(ds.scan_points, rng)))
        return ShapeRecord(sid, seed, samples, scans)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(build, plan))
    else:
        records = [build(item) for item in plan]
    for (split, _, _), rec in zip(plan, records):
        splits[split].append(rec.shape_id)
    meta = {
        "splits": splits,
        "config_hash": config_hash(cfg),
        "dataset_config": asdict(ds),
    }
    save_dataset(records, out_dir, meta=meta)
    manifest.add(out_dir, out_dir / "index.json")
    manifest.add(out_dir, out_dir / "data.bin")
    manifest.finish(out_dir)
    return out_dir


def _load_split(dataset_dir: Path, split: str) -> list[ShapeRecord]:
    records, meta = load_dataset(dataset_dir)
    ids = set(meta["splits"][split])
    return [r for r in records if r.shape_id in ids]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(
    cfg: ExperimentConfig,
    stage: str,
    dataset_dir: Path,
    out_dir: Path,
    stage1_ckpt: Path | None = None,
    stage2_ckpt: Path | None = None,
    resume: bool = False,
    checkpoint_every: int = 0,
    force: bool = False,
) -> Path:
    """Run one training stage; emits a checkpoint dir, loss CSV and manifest."""
    if not resume:
        out_dir = _prepare_out(out_dir, force)
    manifest = RunManifest.start(f"train-{stage}", cfg, stage_seed=_stage_seed(cfg, stage))
    records = _load_split(dataset_dir, "train")

    if stage == "1":
        prev = Stage1Run.load(out_dir) if resume else None
        run = stage1_train(
            records, cfg.stage1, checkpoint_dir=out_dir,
            checkpoint_every=checkpoint_every, resume=prev,
        )
        run.save(out_dir)
        log_cols = ["epoch", "data", "reg", "loss"]
        log = run.log
    elif stage == "2":
        if stage1_ckpt is None:
            raise UsageError("--stage1 checkpoint is required for stage 2")
        s1 = Stage1Run.load(stage1_ckpt)
        layouts = build_disc_layouts(
            records, cfg.stage2.disc_points,
            np.random.default_rng(derive_seed(cfg.seed, "layout")),
        )
        pseudo = build_pseudo_gt(s1.decoder, s1.codes, layouts)
        prev = Stage2Run.load(out_dir) if resume else None
        run = stage2_train(
            s1.decoder, pseudo, records, cfg.stage2, checkpoint_dir=out_dir,
            checkpoint_every=checkpoint_every, resume=prev,
        )
        run.save(out_dir)
        log_cols = [
            "epoch", "loss_dec", "loss_z", "loss_gan_enc", "loss_disc",
            "d_real", "d_fake", "saturated_frac",
        ]
        log = run.log
    elif stage == "finetune":
        if stage1_ckpt is None or stage2_ckpt is None:
            raise UsageError("finetune requires --stage1 and --stage2 checkpoints")
        s1 = Stage1Run.load(stage1_ckpt)
        s2 = Stage2Run.load(stage2_ckpt)
        observations = _finetune_observations(cfg, records)
        tuned, log = finetune_encoder(
            s2.encoder, s2.disc, s1.decoder, observations, cfg.finetune
        )
        from .nets import save_checkpoint

        save_checkpoint(tuned, out_dir / "encoder", extra={"stage": "finetune"})
        save_checkpoint(s2.disc, out_dir / "discriminator", extra={"stage": "finetune"})
        with open(out_dir / "state.json", "w") as fh:
            json.dump(
                {"stage": "finetune", "epoch": cfg.finetune.epochs, "log": log,
                 "config": asdict(cfg.finetune)},
                fh, indent=1, sort_keys=True,
            )
        log_cols = ["epoch", "loss_data", "loss_anchor", "loss_dis"]
    else:
        raise UsageError(f"unknown stage {stage!r}")

    _write_csv(out_dir / "loss.csv", log, log_cols)
    for f in sorted(out_dir.iterdir()):
        if f.name != "manifest.json":
            manifest.add(out_dir, f)
    manifest.finish(out_dir)
    return out_dir


def _stage_seed(cfg: ExperimentConfig, stage: str) -> int:
    return {"1": cfg.stage1.seed, "2": cfg.stage2.seed, "finetune": cfg.finetune.seed}[
        stage
    ]


def _finetune_observations(cfg: ExperimentConfig, records: list[ShapeRecord]):
    """Sparser re-scans of the training shapes, on-surface only."""
    k = cfg.ablation.finetune_scan_points
    out = []
    for rec in records:
        rng = np.random.default_rng(derive_seed(cfg.seed, "ft-obs", rec.shape_id))
        scan = rec.scans[0].cloud.subsample(k, rng)
        out.append(Observation.from_scan(scan.points, source_id=rec.shape_id))
    return out


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------

def _build_observation(
    cfg: ExperimentConfig, rec: ShapeRecord, scan_index: int, points: int
) -> Observation:
    cloud = rec.scans[scan_index % len(rec.scans)].cloud
    rng = np.random.default_rng(derive_seed(cfg.seed, "obs", rec.shape_id, scan_index, points))
    sub = cloud.subsample(points, rng)
    return Observation.from_scan(sub.points, source_id=rec.shape_id)


def _reconstruct_one(
    mode: str,
    decoder,
    encoder,
    disc,
    obs: Observation,
    cfg: ExperimentConfig,
    optim: OptimConfig,
):
    if mode == "baseline":
        result = optimize_baseline(decoder, obs, optim)
        codes = [result.codes[0]]
    elif mode == "regularized":
        result = optimize_regularized(decoder, disc, encoder, obs, optim)
        codes = [result.codes[0]]
    elif mode == "multicode":
        with dc.no_tape():
            z0 = encoder.forward(obs.surf).value.copy()
        result = fuse_multicode(decoder, disc, obs, cfg.fusion, optim, z0)
        codes = result.codes
    else:
        raise UsageError(f"unknown mode {mode!r}")
    split = cfg.fusion.split_layer if mode == "multicode" else None
    mesh = extract_mesh(decoder, codes, cfg.mesh_resolution, split_layer=split)
    return result, mesh


def cmd_reconstruct(
    cfg: ExperimentConfig,
    mode: str,
    stage1_ckpt: Path,
    dataset_dir: Path,
    out_dir: Path,
    stage2_ckpt: Path | None = None,
    split: str = "eval",
    scan_index: int = 0,
    points: int | None = None,
    ids: list[str] | None = None,
    optim_override: OptimConfig | None = None,
    threads: int = 1,
    force: bool = False,
) -> Path:
    """One OBJ mesh plus one energy-trace CSV per observation."""
    out_dir = _prepare_out(out_dir, force)
    manifest = RunManifest.start(
        "reconstruct", cfg, mode=mode, optim_seed=cfg.optim.seed
    )
    s1 = Stage1Run.load(stage1_ckpt)
    decoder = s1.decoder
    decoder.params.freeze_all()
    encoder = disc = None
    if mode != "baseline":
        if stage2_ckpt is None:
            raise UsageError(f"mode {mode} requires a --stage2 checkpoint")
        encoder, _ = load_checkpoint(Path(stage2_ckpt) / "encoder")
        disc, _ = load_checkpoint(Path(stage2_ckpt) / "discriminator")
        encoder.params.freeze_all()
        disc.params.freeze_all()

    records = _load_split(dataset_dir, split)
    if ids:
        wanted = set(ids)
        records = [r for r in records if r.shape_id in wanted]
        missing = wanted - {r.shape_id for r in records}
        if missing:
            raise UsageError(f"ids not in dataset split {split}: {sorted(missing)}")
    k = points if points is not None else cfg.dataset.eval_scan_points
    optim = optim_override if optim_override is not None else cfg.optim

    def job(rec: ShapeRecord):
        obs = _build_observation(cfg, rec, scan_index, k)
        result, mesh = _reconstruct_one(mode, decoder, encoder, disc, obs, cfg, optim)
        return rec.shape_id, result, mesh

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, records))
    else:
        results = [job(r) for r in records]

    for sid, result, mesh in results:
        mesh_path = out_dir / f"{sid}.obj"
        save_obj(mesh, mesh_path)
        manifest.add(out_dir, mesh_path)
        trace_path = out_dir / f"{sid}_trace.csv"
        _write_csv(
            trace_path, result.trace,
            ["iter", "e_data", "e_reg", "e_dis", "total", "best_total"],
        )
        manifest.add(out_dir, trace_path)
        np.save(out_dir / f"{sid}_codes.npy", np.stack(result.codes))
        manifest.add(out_dir, out_dir / f"{sid}_codes.npy")
    manifest.finish(out_dir, extra={"mode": mode, "count": len(results)})
    return out_dir


def cmd_reconstruct_job(job_path: Path, force: bool = False) -> Path:
    """Job-descriptor entry point: one observation, explicit paths."""
    with open(job_path) as fh:
        job = json.load(fh)
    cfg = load_config(None)
    optim = OptimConfig(**job.get("optim", {}))
    fusion = FusionConfig(**job.get("fusion", {}))
    cfg = replace(cfg, optim=optim)
    obs_spec = job["observation"]
    obs = Observation(
        surf=np.asarray(obs_spec["surface_points"]),
        off_points=np.asarray(obs_spec.get("off_points", np.zeros((0, 3)))),
        off_targets=np.asarray(obs_spec.get("off_targets", [])),
        source_id=obs_spec.get("id", "job"),
    )
    s1 = Stage1Run.load(job["checkpoints"]["stage1"])
    decoder = s1.decoder
    encoder = disc = None
    mode = job.get("mode", "baseline")
    if mode != "baseline":
        ck2 = Path(job["checkpoints"]["stage2"])
        encoder, _ = load_checkpoint(ck2 / "encoder")
        disc, _ = load_checkpoint(ck2 / "discriminator")
    mesh_out = Path(job["mesh_out"])
    if mesh_out.exists() and not force:
        raise OutputCollision(f"{mesh_out} exists; pass --force")
    if mode == "multicode":
        with dc.no_tape():
            z0 = encoder.forward(obs.surf).value.copy()
        result = fuse_multicode(decoder, disc, obs, fusion, optim, z0)
        mesh = extract_mesh(
            decoder, result.codes, job.get("resolution", 48),
            split_layer=fusion.split_layer,
        )
    elif mode == "regularized":
        result = optimize_regularized(decoder, disc, encoder, obs, optim)
        mesh = extract_mesh(decoder, result.codes, job.get("resolution", 48))
    else:
        result = optimize_baseline(decoder, obs, optim)
        mesh = extract_mesh(decoder, result.codes, job.get("resolution", 48))
    save_obj(mesh, mesh_out)
    if "trace_out" in job:
        _write_csv(
            Path(job["trace_out"]), result.trace,
            ["iter", "e_data", "e_reg", "e_dis", "total", "best_total"],
        )
    return mesh_out


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(
    cfg: ExperimentConfig,
    mesh_dir: Path,
    dataset_dir: Path,
    out_dir: Path,
    t: float | None = None,
    scale: float = 1.0,
    threads: int = 1,
    force: bool = False,
) -> dict:
    """ACD/recall per object against oracle surface samples, plus curves.

    `scale` converts unit-sphere lengths into a metric unit (e.g. mm); the
    recall threshold scales along with it."""
    from .shapes import load_obj

    out_dir = _prepare_out(out_dir, force)
    manifest = RunManifest.start("evaluate", cfg, gt_seed=cfg.seed)
    t = cfg.recall_threshold if t is None else t
    records, meta = load_dataset(dataset_dir)
    by_id = {r.shape_id: r for r in records}
    mesh_files = sorted(Path(mesh_dir).glob("*.obj"))
    if not mesh_files:
        raise UsageError(f"no .obj meshes found in {mesh_dir}")
    missing = [f.stem for f in mesh_files if f.stem not in by_id]
    if missing:
        raise UsageError(f"meshes without dataset records: {missing}")

    def job(f: Path):
        rec = by_id[f.stem]
        shape = make_vehicle(rec.seed)
        rng = np.random.default_rng(derive_seed(cfg.seed, "gt", rec.shape_id))
        gt = symmetrize(PointCloud(sample_surface(shape, cfg.dataset.gt_points, rng)))
        mesh = load_obj(f)
        return evaluate_pair(EvalPair(gt.points, mesh, f.stem), t=t, scale=scale)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(job, mesh_files))
    else:
        reports = [job(f) for f in mesh_files]

    rows = [
        {
            "object_id": r.object_id,
            "acd": r.acd,
            "acd_sq": r.acd_sq,
            "recall": r.recall,
            "empty": int(r.empty),
        }
        for r in reports
    ]
    _write_csv(out_dir / "per_object.csv", rows, ["object_id", "acd", "acd_sq", "recall", "empty"])
    agg = aggregate(reports)
    agg["threshold"] = t
    agg["scale"] = scale
    with open(out_dir / "aggregate.json", "w") as fh:
        json.dump(agg, fh, indent=1, sort_keys=True)
    _write_csv(
        out_dir / "cumulative_acd.csv",
        [{"k": k, "mean_acd_best_k": v} for k, v in cumulative_acd_curve(reports)],
        ["k", "mean_acd_best_k"],
    )
    _write_csv(
        out_dir / "recall_fraction.csv",
        [{"recall_level": r, "fraction_objects": f} for r, f in recall_fraction_curve(reports)],
        ["recall_level", "fraction_objects"],
    )
    for name in ("per_object.csv", "aggregate.json", "cumulative_acd.csv", "recall_fraction.csv"):
        manifest.add(out_dir, out_dir / name)
    manifest.finish(out_dir, extra={"aggregate": agg})
    return agg


# ---------------------------------------------------------------------------
# export-mesh
# ---------------------------------------------------------------------------

def cmd_export_mesh(
    stage1_ckpt: Path,
    shape_id: str,
    out_path: Path,
    resolution: int = 64,
    force: bool = False,
) -> Path:
    """Mesh a trained Stage-1 code through marching cubes to OBJ."""
    s1 = Stage1Run.load(stage1_ckpt)
    name = f"code.{shape_id}"
    if name not in s1.codes:
        raise UsageError(f"no trained code for shape id {shape_id!r}")
    if out_path.exists() and not force:
        raise OutputCollision(f"{out_path} exists; pass --force")
    mesh = extract_mesh(s1.decoder, s1.codes[name].value, resolution)
    save_obj(mesh, out_path)
    return out_path


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _cached(out_dir: Path, key: str) -> bool:
    mpath = out_dir / "manifest.json"
    if not mpath.exists():
        return False
    try:
        return read_manifest(mpath).get("cache_key") == key
    except Exception:
        return False


def _with_seed(cfg_obj, seed: int):
    return replace(cfg_obj, seed=seed)


def cmd_ablate(cfg: ExperimentConfig, out_dir: Path, force: bool = False) -> dict:
    """Run the Table-5-style switch grid over the configured seeds.

    Sub-runs cache by config hash: re-running with the same config re-emits
    the table from stored manifests without recomputation.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.start("ablate", cfg, seeds=list(cfg.ablation.seeds))
    dataset_dir = out_dir / "dataset"
    data_key = "gen:" + config_hash({"d": asdict(cfg.dataset), "seed": cfg.seed})
    if force or not _cached(dataset_dir, data_key):
        cmd_gen_data(cfg, dataset_dir, force=True)
        _stamp(dataset_dir, data_key)

    rows_by_name = {r["name"]: r for r in TABLE5_ROWS}
    table = []
    directions = {}
    extras = {"multicode": {}, "finetune": {}}
    for seed_idx, seed in enumerate(cfg.ablation.seeds):
        sdir = out_dir / f"seed{seed_idx}"
        paths = _ablate_train_seed(cfg, seed, sdir, dataset_dir, force)
        row_metrics = {}
        for row_name in cfg.ablation.rows:
            row = rows_by_name[row_name]
            agg = _ablate_row(cfg, seed, row, sdir, dataset_dir, paths, force)
            row_metrics[row_name] = agg
            table.append(
                {
                    "seed": seed,
                    "row": row_name,
                    "encoder": int(row["encoder"]),
                    "disc_train": int(row["disc_train"]),
                    "disc_opt": int(row["disc_opt"]),
                    "mean_acd": agg["mean_acd"],
                    "mean_recall": agg["mean_recall"],
                    "empty_count": agg["empty_count"],
                }
            )
        if cfg.ablation.multicode:
            agg = _ablate_multicode(cfg, seed, sdir, dataset_dir, paths, force)
            extras["multicode"][str(seed)] = agg
        if cfg.ablation.finetune:
            aggs = _ablate_finetune(cfg, seed, sdir, dataset_dir, paths, force)
            extras["finetune"][str(seed)] = aggs
        directions[str(seed)] = _directions_for_seed(
            cfg, row_metrics, extras, seed
        )

    table_path = out_dir / "table5.csv"
    _write_csv(
        table_path, table,
        ["seed", "row", "encoder", "disc_train", "disc_opt", "mean_acd",
         "mean_recall", "empty_count"],
    )
    summary = _summarize(cfg, table, directions, extras)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    manifest.add(out_dir, table_path)
    manifest.add(out_dir, out_dir / "summary.json")
    manifest.finish(out_dir, extra={"cache_key": "ablate"})
    return summary


def _stamp(out_dir: Path, key: str) -> None:
    mpath = out_dir / "manifest.json"
    data = read_manifest(mpath) if mpath.exists() else {}
    data["cache_key"] = key
    with open(mpath, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)


def _ablate_train_seed(
    cfg: ExperimentConfig, seed: int, sdir: Path, dataset_dir: Path, force: bool
) -> dict:
    """Train stage 1, both stage-2 variants, and the finetuned encoder."""
    paths = {}
    s1_cfg = _with_seed(cfg.stage1, derive_seed(cfg.seed, "stage1", seed))
    s1_dir = sdir / "stage1"
    key = "s1:" + config_hash({"c": asdict(s1_cfg)})
    cfg_s1 = replace(cfg, stage1=s1_cfg)
    if force or not _cached(s1_dir, key):
        cmd_train(cfg_s1, "1", dataset_dir, s1_dir, force=True)
        _stamp(s1_dir, key)
    paths["stage1"] = s1_dir

    for variant, gan in (("stage2_gan", True), ("stage2_nogan", False)):
        s2_cfg = _with_seed(cfg.stage2, derive_seed(cfg.seed, variant, seed))
        if not gan:
            s2_cfg = replace(s2_cfg, w_gan=0.0)
        s2_dir = sdir / variant
        key = "s2:" + config_hash({"c": asdict(s2_cfg), "s1": str(s1_dir)})
        cfg_s2 = replace(cfg, stage2=s2_cfg)
        if force or not _cached(s2_dir, key):
            cmd_train(cfg_s2, "2", dataset_dir, s2_dir, stage1_ckpt=s1_dir, force=True)
            _stamp(s2_dir, key)
        paths[variant] = s2_dir

    if cfg.ablation.finetune:
        ft_cfg = _with_seed(cfg.finetune, derive_seed(cfg.seed, "finetune", seed))
        ft_dir = sdir / "finetune"
        key = "ft:" + config_hash({"c": asdict(ft_cfg)})
        cfg_ft = replace(cfg, finetune=ft_cfg)
        if force or not _cached(ft_dir, key):
            cmd_train(
                cfg_ft, "finetune", dataset_dir, ft_dir,
                stage1_ckpt=paths["stage1"], stage2_ckpt=paths["stage2_gan"],
                force=True,
            )
            _stamp(ft_dir, key)
        paths["finetune"] = ft_dir
    return paths


def _recon_and_eval(
    cfg: ExperimentConfig,
    tag: str,
    mode: str,
    sdir: Path,
    dataset_dir: Path,
    stage1: Path,
    stage2: Path | None,
    optim: OptimConfig,
    force: bool,
    points: int | None = None,
) -> dict:
    rdir = sdir / tag / "meshes"
    edir = sdir / tag / "eval"
    key = f"{tag}:" + config_hash(
        {"o": asdict(optim), "mode": mode, "pts": points, "mesh": cfg.mesh_resolution}
    )
    if force or not _cached(edir, key):
        cmd_reconstruct(
            cfg, mode, stage1, dataset_dir, rdir, stage2_ckpt=stage2,
            points=points, optim_override=optim, force=True,
        )
        cmd_evaluate(cfg, rdir, dataset_dir, edir, force=True)
        _stamp(edir, key)
    with open(edir / "aggregate.json") as fh:
        return json.load(fh)


def _ablate_row(
    cfg: ExperimentConfig,
    seed: int,
    row: dict,
    sdir: Path,
    dataset_dir: Path,
    paths: dict,
    force: bool,
) -> dict:
    optim_seed = derive_seed(cfg.seed, "optim", seed, row["name"])
    optim = _with_seed(cfg.optim, optim_seed)
    if not row["disc_opt"]:
        optim = replace(optim, lambda_dis=0.0)
    if row["encoder"] or row["disc_train"]:
        stage2 = paths["stage2_gan"] if row["disc_train"] else paths["stage2_nogan"]
    else:
        stage2 = None
    if row["encoder"]:
        mode = "regularized"
    elif row["disc_opt"]:
        mode = "regularized"  # random init, discriminator term only
    else:
        mode = "baseline"
    if mode == "regularized" and not row["encoder"]:
        # row 4: discriminator at inference but random init
        return _recon_and_eval_row4(
            cfg, row["name"], sdir, dataset_dir, paths["stage1"], stage2, optim, force
        )
    return _recon_and_eval(
        cfg, row["name"], mode, sdir, dataset_dir, paths["stage1"], stage2, optim, force
    )


def _recon_and_eval_row4(
    cfg, tag, sdir, dataset_dir, stage1, stage2, optim, force
) -> dict:
    """Random init plus discriminator-regularized optimization (Table 5 row 4)."""
    rdir = sdir / tag / "meshes"
    edir = sdir / tag / "eval"
    key = f"{tag}:" + config_hash({"o": asdict(optim), "mesh": cfg.mesh_resolution})
    if force or not _cached(edir, key):
        rdir.mkdir(parents=True, exist_ok=True)
        s1 = Stage1Run.load(stage1)
        disc, _ = load_checkpoint(Path(stage2) / "discriminator")
        records = _load_split(dataset_dir, "eval")
        for rec in records:
            obs = _build_observation(cfg, rec, 0, cfg.dataset.eval_scan_points)
            rng = np.random.default_rng(optim.seed)
            z0 = rng.normal(0.0, optim.init_sigma, size=s1.decoder.spec.code_dim)
            result = optimize_regularized(s1.decoder, disc, None, obs, optim, init=z0)
            mesh = extract_mesh(s1.decoder, result.codes, cfg.mesh_resolution)
            save_obj(mesh, rdir / f"{rec.shape_id}.obj")
        cmd_evaluate(cfg, rdir, dataset_dir, edir, force=True)
        _stamp(edir, key)
    with open(edir / "aggregate.json") as fh:
        return json.load(fh)


def _ablate_multicode(cfg, seed, sdir, dataset_dir, paths, force) -> dict:
    optim = _with_seed(cfg.optim, derive_seed(cfg.seed, "optim", seed, "multicode"))
    return _recon_and_eval(
        cfg, "multicode", "multicode", sdir, dataset_dir,
        paths["stage1"], paths["stage2_gan"], optim, force,
    )


def _ablate_finetune(cfg, seed, sdir, dataset_dir, paths, force) -> dict:
    """Frozen vs fine-tuned encoder on sparser re-scans of the eval split."""
    optim = _with_seed(cfg.optim, derive_seed(cfg.seed, "optim", seed, "ft"))
    k = cfg.ablation.finetune_scan_points
    out = {}
    for arm, ckpt in (("frozen", paths["stage2_gan"]), ("tuned", paths["finetune"])):
        out[arm] = _recon_and_eval(
            cfg, f"ft_{arm}", "regularized", sdir, dataset_dir,
            paths["stage1"], ckpt, optim, force, points=k,
        )
    return out


def _directions_for_seed(cfg, row_metrics, extras, seed) -> dict:
    out = {}
    r = row_metrics
    if "row1_decoder_only" in r and "row2_encoder" in r:
        out["a_encoder_beats_random"] = bool(
            r["row2_encoder"]["mean_acd"] < r["row1_decoder_only"]["mean_acd"]
        )
    if "row1_decoder_only" in r and "row5_full" in r:
        out["b_full_beats_baseline"] = bool(
            r["row5_full"]["mean_acd"] < r["row1_decoder_only"]["mean_acd"]
        )
    mc = extras["multicode"].get(str(seed))
    if mc is not None and "row5_full" in r:
        out["c_multicode_le_single"] = bool(
            mc["mean_acd"] <= r["row5_full"]["mean_acd"]
        )
    ft = extras["finetune"].get(str(seed))
    if ft is not None:
        out["d_finetune_beats_frozen"] = bool(
            ft["tuned"]["mean_acd"] < ft["frozen"]["mean_acd"]
        )
    return out


def _summarize(cfg, table, directions, extras) -> dict:
    by_row: dict[str, list[float]] = {}
    for entry in table:
        by_row.setdefault(entry["row"], []).append(entry["mean_acd"])
    medians = {row: float(np.median(v)) for row, v in by_row.items()}
    checks = {}
    for key in (
        "a_encoder_beats_random",
        "b_full_beats_baseline",
        "c_multicode_le_single",
        "d_finetune_beats_frozen",
    ):
        votes = [d[key] for d in directions.values() if key in d]
        if votes:
            checks[key] = {
                "votes": votes,
                "holds": bool(sum(votes) >= max(2, (len(votes) + 1) // 2))
                if len(votes) >= 3
                else bool(all(votes)),
            }
    return {
        "median_acd_by_row": medians,
        "directions_by_seed": directions,
        "direction_checks": checks,
        "multicode": extras["multicode"],
        "finetune": extras["finetune"],
    }


# ---------------------------------------------------------------------------
# argparse plumbing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdflab", description=__doc__)
    p.add_argument("--config", help="experiment config JSON (defaults: desk profile)")
    p.add_argument("--seed", type=int, help="root seed override")
    p.add_argument("--out", help="output directory (SDFLAB_OUT prefixes relative paths)")
    p.add_argument("--force", action="store_true", help="allow overwriting outputs")
    p.add_argument("--threads", type=int, default=1, help="parallel per-object jobs")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the procedural dataset")

    tr = sub.add_parser("train", help="run a training stage")
    tr.add_argument("--stage", choices=["1", "2", "finetune"], required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--stage1", help="stage-1 checkpoint dir (stages 2/finetune)")
    tr.add_argument("--stage2", help="stage-2 checkpoint dir (finetune)")
    tr.add_argument("--resume", action="store_true")
    tr.add_argument("--checkpoint-every", type=int, default=0)

    rc = sub.add_parser("reconstruct", help="optimize latent codes and mesh them")
    rc.add_argument("--mode", choices=["baseline", "regularized", "multicode"],
                    default="regularized")
    rc.add_argument("--stage1")
    rc.add_argument("--stage2")
    rc.add_argument("--data")
    rc.add_argument("--split", default="eval")
    rc.add_argument("--scan-index", type=int, default=0)
    rc.add_argument("--points", type=int)
    rc.add_argument("--ids", help="comma-separated shape ids")
    rc.add_argument("--job", help="job descriptor JSON (overrides other flags)")

    ev = sub.add_parser("evaluate", help="ACD/recall against oracle samples")
    ev.add_argument("--meshes", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--t", type=float)
    ev.add_argument("--scale", type=float, default=1.0,
                    help="length-unit factor applied to reported distances")

    sub.add_parser("ablate", help="run the ablation switch grid")

    ex = sub.add_parser("export-mesh", help="mesh a trained stage-1 code")
    ex.add_argument("--stage1", required=True)
    ex.add_argument("--shape-id", required=True)
    ex.add_argument("--resolution", type=int, default=64)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "gen-data":
            if not args.out:
                raise UsageError("--out is required")
            path = cmd_gen_data(cfg, _resolve_out(args.out), force=args.force,
                                threads=args.threads)
            print(f"dataset written to {path}")
        elif args.command == "train":
            if not args.out:
                raise UsageError("--out is required")
            path = cmd_train(
                cfg, args.stage, _resolve_out(args.data), _resolve_out(args.out),
                stage1_ckpt=_resolve_out(args.stage1) if args.stage1 else None,
                stage2_ckpt=_resolve_out(args.stage2) if args.stage2 else None,
                resume=args.resume, checkpoint_every=args.checkpoint_every,
                force=args.force,
            )
            print(f"stage {args.stage} checkpoint at {path}")
        elif args.command == "reconstruct":
            if args.job:
                path = cmd_reconstruct_job(Path(args.job), force=args.force)
                print(f"mesh written to {path}")
            else:
                if not (args.stage1 and args.data and args.out):
                    raise UsageError("--stage1, --data and --out are required")
                path = cmd_reconstruct(
                    cfg, args.mode, _resolve_out(args.stage1), _resolve_out(args.data),
                    _resolve_out(args.out),
                    stage2_ckpt=_resolve_out(args.stage2) if args.stage2 else None,
                    split=args.split, scan_index=args.scan_index, points=args.points,
                    ids=args.ids.split(",") if args.ids else None,
                    threads=args.threads, force=args.force,
                )
                print(f"reconstructions in {path}")
        elif args.command == "evaluate":
            if not args.out:
                raise UsageError("--out is required")
            agg = cmd_evaluate(
                cfg, _resolve_out(args.meshes), _resolve_out(args.data),
                _resolve_out(args.out), t=args.t, scale=args.scale,
                threads=args.threads, force=args.force,
            )
            print(json.dumps(agg, indent=1, sort_keys=True))
        elif args.command == "ablate":
            if not args.out:
                raise UsageError("--out is required")
            summary = cmd_ablate(cfg, _resolve_out(args.out), force=args.force)
            print(json.dumps(summary["direction_checks"], indent=1, sort_keys=True))
        elif args.command == "export-mesh":
            if not args.out:
                raise UsageError("--out is required")
            path = cmd_export_mesh(
                _resolve_out(args.stage1), args.shape_id, _resolve_out(args.out),
                resolution=args.resolution, force=args.force,
            )
            print(f"mesh written to {path}")
        return EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OutputCollision, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        if e.last_checkpoint:
            print(f"last good checkpoint: {e.last_checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
