"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
The two long runs (ablation directions, fine-tuning direction) are marked
`slow` and share one cached pipeline under SDFLAB_ACCEPTANCE_OUT (default
/tmp/sdflab_acceptance); re-runs reuse finished sub-runs via their manifests.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from sdflab import diffcore as dc
from sdflab.cli import cmd_ablate, cmd_evaluate, cmd_gen_data, cmd_reconstruct, cmd_train
from sdflab.metrics import (
    EvalPair,
    acd,
    recall,
    surface_distances,
    surface_distances_brute,
)
from sdflab.nets import Decoder, DecoderSpec, Discriminator, DiscriminatorSpec, Encoder, EncoderSpec
from sdflab.recon import Observation, OptimConfig, extract_mesh, optimize_baseline, optimize_regularized
from sdflab.runs import desk_config
from sdflab.shapes import (
    CsgShape,
    ScanConfig,
    ShapeRecord,
    Sphere,
    TriangleMesh,
    VoxelGrid,
    load_obj,
    make_vehicle,
    marching_cubes,
    sample_surface,
    sample_training_points,
    virtual_scan,
    watertight_audit,
)
from sdflab.train import Stage1Config, Stage1Run, stage1_train

ACCEPT_DIR = Path(os.environ.get("SDFLAB_ACCEPTANCE_OUT", "/tmp/sdflab_acceptance"))


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Criterion 1: gradient integrity
# ---------------------------------------------------------------------------

def test_gradient_integrity():
    t0 = time.time()
    rng = np.random.default_rng(0)
    decoder = Decoder.init(DecoderSpec(), rng)
    encoder = Encoder.init(EncoderSpec(), rng)
    disc = Discriminator.init(DiscriminatorSpec(), rng)
    worst = {}

    z = dc.Tensor(rng.normal(0.0, 0.1, 256))
    pts = rng.uniform(-1, 1, (8, 3))
    worst["decoder"] = dc.gradcheck(
        lambda: dc.total(decoder.forward(z, pts)),
        [z, decoder.params["dec.l1.W"], decoder.params["dec.l5.W"],
         decoder.params["dec.l8.W"]],
        n_samples=100, rng=rng,
    )

    cloud = rng.uniform(-1, 1, (24, 3))
    worst["encoder"] = dc.gradcheck(
        lambda: dc.total(dc.square(encoder.forward(cloud))),
        [encoder.params["enc.b1l1.W"], encoder.params["enc.b2l2.W"],
         encoder.params["enc.head.W"], encoder.params["enc.head.bn.gamma"]],
        n_samples=100, rng=rng,
    )

    s = rng.uniform(-0.1, 0.1, 24)
    worst["discriminator"] = dc.gradcheck(
        lambda: dc.neg(dc.log(disc.forward(cloud, s, "real", training=True,
                                           update_stats=False))),
        [disc.params["disc.l1.W"], disc.params["disc.l4.W"],
         disc.params["disc.l2.bn.real.gamma"], disc.params["disc.head.W"]],
        n_samples=100, rng=rng,
    )

    # full Eq.-2-style energy with respect to the latent code
    obs = Observation.from_scan(rng.uniform(-0.5, 0.5, (16, 3)))
    obs_pts, obs_targets = obs.all_points()
    x_dis = rng.uniform(-1, 1, (32, 3))

    def energy():
        from sdflab.train import clamped_l1

        pred = decoder.forward(z, obs_pts)
        data = dc.scale(clamped_l1(pred, obs_targets, 0.1), 2.0 * len(obs_pts))
        reg = dc.total(dc.square(z))
        s_dis = decoder.forward(z, x_dis)
        dis = dc.neg(dc.log(disc.forward(x_dis, s_dis, "fake", training=False)))
        return dc.add(dc.add(data, reg), dis)

    # clamp/relu/max make the energy piecewise-smooth; the step must sit
    # below the distance to the nearest kink for central differences to
    # stay one-sided, hence the smaller eps here
    worst["energy_wrt_z"] = dc.gradcheck(energy, [z], eps=1e-7, n_samples=100, rng=rng)

    elapsed = time.time() - t0
    worst_err = max(worst.values())
    report(
        "gradient-integrity",
        worst_err < 1e-4 and elapsed < 60.0,
        f"(max rel err {worst_err:.2e} across {sorted(worst)}, {elapsed:.1f}s)",
    )


# ---------------------------------------------------------------------------
# Criterion 2: metric oracle equivalence
# ---------------------------------------------------------------------------

def test_metric_oracle_equivalence():
    rng = np.random.default_rng(1)
    exact = True
    for _ in range(50):
        nt = int(rng.integers(8, 120))
        mesh = TriangleMesh(
            rng.normal(size=(nt * 3, 3)), np.arange(nt * 3).reshape(nt, 3)
        )
        pts = rng.normal(size=(20, 3)) * 1.5
        if not np.array_equal(
            surface_distances(pts, mesh), surface_distances_brute(pts, mesh)
        ):
            exact = False
            break

    grid = VoxelGrid.from_function(lambda p: np.linalg.norm(p, axis=1) - 0.5, (24,) * 3)
    mesh = marching_cubes(grid)
    probe = rng.uniform(-1, 1, (200, 3))
    pair = EvalPair(probe, mesh)
    sweep = [recall(pair, t) for t in np.linspace(0.01, 0.3, 10)]
    monotone = all(b >= a for a, b in zip(sweep, sweep[1:]))

    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    t_vec = rng.normal(size=3)
    moved = TriangleMesh(mesh.vertices @ q.T + t_vec, mesh.triangles)
    d0 = surface_distances(probe, mesh)
    d1 = surface_distances(probe @ q.T + t_vec, moved)
    rigid_ok = np.max(np.abs(d0 - d1)) < 1e-9

    report(
        "metric-oracle-equivalence",
        exact and monotone and rigid_ok,
        f"(exact={exact}, monotone={monotone}, rigid drift "
        f"{np.max(np.abs(d0 - d1)):.2e})",
    )


# ---------------------------------------------------------------------------
# Criterion 3: marching-cubes fidelity
# ---------------------------------------------------------------------------

def test_marching_cubes_fidelity():
    t0 = time.time()
    grid = VoxelGrid.from_function(
        lambda p: np.linalg.norm(p, axis=1) - 0.5, (64, 64, 64)
    )
    mesh = marching_cubes(grid)
    elapsed = time.time() - t0
    r = np.linalg.norm(mesh.vertices, axis=1)
    h = 2.0 / 63.0
    tol = 1.5 * h * np.sqrt(3.0)
    radius_ok = bool(np.all(np.abs(r - 0.5) <= tol))
    audit = watertight_audit(mesh)
    watertight = set(audit["by_incidence"]) == {2}
    report(
        "marching-cubes-fidelity",
        radius_ok and watertight and elapsed < 10.0,
        f"(max radius err {np.max(np.abs(r - 0.5)):.4f} <= {tol:.4f}, "
        f"watertight={watertight}, {elapsed:.2f}s)",
    )


# ---------------------------------------------------------------------------
# Criterion 4: Stage-1 overfit on a sphere
# ---------------------------------------------------------------------------

def test_stage1_sphere_overfit():
    t0 = time.time()
    sphere = CsgShape(Sphere((0.0, 0.0, 0.0), 0.5))
    samples = sample_training_points(sphere, 4096, np.random.default_rng(0))
    rec = ShapeRecord("sphere", 0, samples)
    cfg = Stage1Config(epochs=500, samples_per_step=512, seed=0)
    run = stage1_train([rec], cfg)
    final_l1 = run.log[-1]["data"]
    mesh = extract_mesh(run.decoder, run.codes["code.sphere"].value, resolution=64)
    gt = sample_surface(sphere, 4096, np.random.default_rng(1))
    mesh_acd = acd(EvalPair(gt, mesh))
    elapsed = time.time() - t0
    report(
        "stage1-sphere-overfit",
        final_l1 < 0.02 and mesh_acd < 0.03 and elapsed < 300.0,
        f"(mean clamped-L1 {final_l1:.4f} < 0.02, mesh ACD {mesh_acd:.4f} < 0.03, "
        f"{elapsed:.0f}s)",
    )


# ---------------------------------------------------------------------------
# Criterion 5: reduction equivalence
# ---------------------------------------------------------------------------

def test_reduction_equivalence():
    rng = np.random.default_rng(2)
    decoder = Decoder.init(DecoderSpec(code_dim=24, hidden=48), rng)
    obs = Observation.from_scan(rng.uniform(-0.5, 0.5, (20, 3)))
    cfg = OptimConfig(iterations=40, lambda_dis=0.0, seed=9)
    base = optimize_baseline(decoder, obs, cfg)
    red = optimize_regularized(decoder, None, None, obs, cfg)
    traces_equal = base.trace == red.trace
    codes_equal = np.array_equal(base.code, red.code)
    report(
        "reduction-equivalence",
        traces_equal and codes_equal,
        f"(bitwise trace equality over {len(base.trace)} iterations)",
    )


# ---------------------------------------------------------------------------
# Criteria 6 + 7: ablation and fine-tuning directions (slow)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation_summary():
    cfg = desk_config()
    out = ACCEPT_DIR / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    summary = cmd_ablate(cfg, out)
    summary["_wall_seconds"] = time.time() - t0
    return summary


@pytest.mark.slow
def test_ablation_directions(ablation_summary):
    checks = ablation_summary["direction_checks"]
    elapsed = ablation_summary["_wall_seconds"]
    a = checks["a_encoder_beats_random"]
    b = checks["b_full_beats_baseline"]
    c = checks["c_multicode_le_single"]
    ok = a["holds"] and b["holds"] and c["holds"] and elapsed < 7200.0
    report(
        "ablation-directions",
        ok,
        f"(a: {a['votes']}, b: {b['votes']}, c: {c['votes']}, "
        f"medians {json.dumps(ablation_summary['median_acd_by_row'])}, "
        f"{elapsed:.0f}s cached-inclusive)",
    )


@pytest.mark.slow
def test_finetune_direction(ablation_summary):
    d = ablation_summary["direction_checks"]["d_finetune_beats_frozen"]
    detail = {
        seed: {arm: round(v["mean_acd"], 4) for arm, v in arms.items()}
        for seed, arms in ablation_summary["finetune"].items()
    }
    report("finetune-direction", d["holds"], f"(votes {d['votes']}, {detail})")


# ---------------------------------------------------------------------------
# Criterion 8: determinism of every command
# ---------------------------------------------------------------------------

def _artifact_bytes(out_dir: Path) -> dict:
    m = json.loads((out_dir / "manifest.json").read_text())
    return {a: (out_dir / a).read_bytes() for a in m["artifacts"]}


def test_command_determinism(tmp_path):
    from tests.test_cli import micro_config

    cfg = micro_config()
    outputs = {}
    for run in ("a", "b"):
        root = tmp_path / run
        cmd_gen_data(cfg, root / "ds")
        cmd_train(cfg, "1", root / "ds", root / "s1")
        cmd_train(cfg, "2", root / "ds", root / "s2", stage1_ckpt=root / "s1")
        cmd_train(cfg, "finetune", root / "ds", root / "ft",
                  stage1_ckpt=root / "s1", stage2_ckpt=root / "s2")
        for mode, ck2 in (("baseline", None), ("regularized", root / "s2"),
                          ("multicode", root / "s2")):
            cmd_reconstruct(cfg, mode, root / "s1", root / "ds",
                            root / f"rec_{mode}", stage2_ckpt=ck2)
        cmd_evaluate(cfg, root / "rec_regularized", root / "ds", root / "ev")
        blobs = {}
        for sub in ("ds", "s1", "s2", "ft", "rec_baseline", "rec_regularized",
                    "rec_multicode", "ev"):
            blobs[sub] = _artifact_bytes(root / sub)
        outputs[run] = blobs
    mismatches = []
    for sub, blobs in outputs["a"].items():
        for name, data in blobs.items():
            if outputs["b"][sub].get(name) != data:
                mismatches.append(f"{sub}/{name}")
    report(
        "command-determinism",
        not mismatches,
        f"({sum(len(b) for b in outputs['a'].values())} artifacts compared"
        + (f"; mismatches: {mismatches[:5]}" if mismatches else ")"),
    )


# ---------------------------------------------------------------------------
# Criterion 9: instability demonstration
# ---------------------------------------------------------------------------

def _mesh_difference(a: TriangleMesh, b: TriangleMesh) -> float:
    """Symmetric mean vertex-to-surface distance between two meshes."""
    if a.is_empty() or b.is_empty():
        return float("inf")
    d_ab = float(np.mean(surface_distances(a.vertices, b)))
    d_ba = float(np.mean(surface_distances(b.vertices, a)))
    return max(d_ab, d_ba)


@pytest.mark.slow
def test_instability_demonstration(ablation_summary):
    # reuse the seed-0 checkpoints from the ablation pipeline
    cfg = desk_config()
    s1 = Stage1Run.load(ACCEPT_DIR / "ablation" / "seed0" / "stage1")
    from sdflab.nets import load_checkpoint

    enc, _ = load_checkpoint(ACCEPT_DIR / "ablation" / "seed0" / "stage2_gan" / "encoder")
    disc, _ = load_checkpoint(
        ACCEPT_DIR / "ablation" / "seed0" / "stage2_gan" / "discriminator"
    )
    decoder = s1.decoder

    # crafted sparse scan: one low side view of an eval vehicle, 24 points
    shape = make_vehicle(9000)
    scan = virtual_scan(
        shape, ScanConfig(viewpoint=(0.3, 2.4, 0.35), azimuth_count=48, elevation_count=48)
    ).subsample(24, np.random.default_rng(3))
    obs = Observation.from_scan(scan.points, source_id="crafted")
    n_obs = len(obs.surf) + len(obs.off_points)
    res = cfg.mesh_resolution

    def run_mode(seed, mode):
        oc = OptimConfig(
            iterations=cfg.optim.iterations, disc_points=cfg.optim.disc_points,
            lambda_dis=0.0 if mode == "baseline" else 1.0, seed=seed,
        )
        if mode == "baseline":
            r = optimize_baseline(decoder, obs, oc)
        else:
            r = optimize_regularized(decoder, disc, enc, obs, oc)
        return extract_mesh(decoder, r.code, res)

    base_a = run_mode(11, "baseline")
    base_a2 = run_mode(11, "baseline")
    base_b = run_mode(77, "baseline")
    reg_a = run_mode(11, "regularized")
    reg_b = run_mode(77, "regularized")

    rerun_diff = _mesh_difference(base_a, base_a2)
    cross_base = _mesh_difference(base_a, base_b)
    cross_reg = _mesh_difference(reg_a, reg_b)
    ok = rerun_diff == 0.0 and cross_base > 5.0 * max(cross_reg, rerun_diff)
    report(
        "instability-demonstration",
        ok,
        f"(rerun diff {rerun_diff}, baseline cross-seed {cross_base:.4f} > "
        f"5 x regularized cross-seed {cross_reg:.4f})",
    )
