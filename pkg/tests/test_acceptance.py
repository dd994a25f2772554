"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also repeated in the pytest terminal summary.
"""

import hashlib
import math

import numpy as np

from herdsynth.background import find_connected_regions, recreate_background
from herdsynth.cli import main
from herdsynth.composer import ComposerConfig, generate_batch, write_scene
from herdsynth.dataset_io import (
    DatasetManifest,
    ManifestEntry,
    parse_labels,
    read_image,
    read_labels,
    split_dataset,
    write_labels,
)
from herdsynth.diffusion import AdamState, DenoiserConfig, forward_sample, init_params, make_schedule, train
from herdsynth.evaluation import f1_score
from herdsynth.geometry import OrientedBox, iou_oriented
from herdsynth.sprites import extract_sprites
from oracles import flood_fill_regions, monte_carlo_iou, recount_visibility
from scenekit import background, ellipse_sprite
from test_diffusion import TOY, gradient_check_errors

RESULTS: list[str] = []


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_criterion_1_f1_table_rows():
    rows = [(0.70, 0.588, 0.64), (0.5, 0.24, 0.32), (0.57, 0.355, 0.43)]
    got = [f1_score(p, r) for p, r, _ in rows]
    errs = [abs(g - want) for g, (_, _, want) in zip(got, rows)]
    detail = ", ".join(f"F1({p}, {r}) = {g:.4f} vs {want}" for (p, r, want), g in zip(rows, got))
    report(1, "F1 reproduces table rows within 0.005", max(errs) <= 0.005, detail)


def test_criterion_2_forward_statistics():
    s = make_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(0)
    x0 = np.array([-1.0, -0.3, 0.4, 1.0])
    n = 10_000
    worst = 0.0
    for t in (1, 250, 500, 1000):
        xt = forward_sample(np.broadcast_to(x0, (n, 4)), np.full(n, t), rng.standard_normal((n, 4)), s)
        ab = s.alpha_bar[t - 1]
        var = 1.0 - ab
        z_mean = np.abs(xt.mean(0) - math.sqrt(ab) * x0) / math.sqrt(var / n)
        z_var = np.abs(xt.var(0, ddof=1) - var) / (var * math.sqrt(2 / (n - 1)))
        worst = max(worst, z_mean.max(), z_var.max())
    report(2, "forward-process mean and variance within 3 standard errors", worst <= 3.0,
           f"largest deviation {worst:.2f} SE over 4 timesteps x 4 coordinates")


def test_criterion_3_gradient_check():
    assert TOY.resolution == 4
    errs = gradient_check_errors(seed=1)
    worst = max(errs, key=errs.get)
    report(3, "analytic gradients match central differences", max(errs.values()) <= 1e-3 and len(errs) > 0,
           f"{len(errs)} parameter groups, worst {worst} rel err {errs[worst]:.2e}")


def _blob_dataset(count: int, resolution: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:resolution, 0:resolution] + 0.5
    out = np.full((count, resolution, resolution, 3), -1.0)
    for i in range(count):
        cx, cy = rng.uniform(5, resolution - 5, 2)
        a, b = rng.uniform(2.5, 5.0, 2)
        ang = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(ang) + (yy - cy) * math.sin(ang)
        v = -(xx - cx) * math.sin(ang) + (yy - cy) * math.cos(ang)
        out[i][(u / a) ** 2 + (v / b) ** 2 <= 1] = rng.uniform(-0.5, 1.0, 3)
    return out


def test_criterion_4_training_smoke():
    data = _blob_dataset(200, 16, seed=0)
    cfg = DenoiserConfig(resolution=16)
    params = init_params(cfg, seed=0)
    adam = AdamState.zeros_like(params.weights, lr=2e-4)
    _, _, losses = train(params, adam, data, make_schedule(100), 500, 32, seed=0)
    first, last = float(np.mean(losses[:10])), float(np.mean(losses[-10:]))
    drop = 1 - last / first
    report(4, "loss falls at least 50% within 500 steps", drop >= 0.5,
           f"first-10 mean {first:.4f}, last-10 mean {last:.4f}, reduction {drop:.1%}")


def test_criterion_5_composition_sweep(tmp_path):
    cfg = ComposerConfig()
    bank = [ellipse_sprite(70 + 9 * k, 36 + 4 * k, (30 + 25 * k, 60, 40)) for k in range(8)]
    bgs = [background(1280, 960, seed=s, name=f"bg{s}") for s in range(3)]
    scenes = generate_batch(bgs, bank, 200, master_seed=2024, cfg=cfg)
    problems = []
    groups = occluded = labels_seen = 0
    for i, scene in enumerate(scenes):
        if isinstance(scene, str):
            problems.append(f"scene {i} rejected: {scene}")
            continue
        plan = scene.plan
        if plan.pattern == "group":
            groups += 1
            if not 6 <= len(plan.placements) <= 10:
                problems.append(f"scene {i}: group of {len(plan.placements)}")
        for p in plan.placements:
            f = cfg.field(p.field)
            if not f.min_scale <= p.scale <= f.max_scale:
                problems.append(f"scene {i}: scale {p.scale} outside {p.field}")
        full = [layer.full((plan.height, plan.width)) for layer in scene.layers]
        counted = recount_visibility(full)
        for v, c in zip(scene.visibility, counted):
            if v != c:
                problems.append(f"scene {i}: visibility {v} != counted {c}")
            elif c < 1.0:
                occluded += 1
                if not 0.10 <= c <= 0.90:
                    problems.append(f"scene {i}: occluded visibility {c}")
        write_scene(tmp_path, i, scene)
        stem = f"synth_{i:06d}"
        for sub, kind in (("labels", "axis"), ("labels_obb", "obb")):
            text = (tmp_path / sub / f"{stem}.txt").read_text()
            parsed = parse_labels(text, kind=kind)
            labels_seen += len(parsed)
            if write_labels(parsed, kind) != text or len(parsed) != len(scene.layers):
                problems.append(f"scene {i}: {sub} does not round-trip")
            for lab in parsed:
                pts = np.array(lab.box.corners() if kind == "obb" else
                               [(lab.box.x_min, lab.box.y_min), (lab.box.x_max, lab.box.y_max)])
                if pts.min() < 0 or pts.max() > 1:
                    problems.append(f"scene {i}: {sub} label out of bounds")
    report(5, "200 composed scenes satisfy count, scale, visibility and label checks", not problems,
           f"{groups} group scenes, {occluded} occluded survivors, {labels_seen} labels; "
           f"{len(problems)} problems{': ' + problems[0] if problems else ''}")


def test_criterion_6_inpainting_contract(pasture_root):
    img = read_image(pasture_root / "images" / "pasture_00.png")
    h, w = img.shape[:2]
    labels = read_labels(pasture_root / "labels" / "pasture_00.txt", w, h)
    _, scene = extract_sprites(img, labels, "pasture_00")
    regions = find_connected_regions(scene)
    got = sorted((set(map(tuple, r.tolist())) for r in regions), key=min)
    oracle = sorted(flood_fill_regions(scene.hole_mask()), key=min)
    regions_ok = got == oracle
    clustered = len(regions) < len(scene.holes)

    out = recreate_background(scene, seed=7, border_width=1, sigma=2.0, kernel_radius=6)
    holes = scene.hole_mask()
    black_left = int(np.count_nonzero(np.all(out.image[holes] == 0, axis=1)))
    near = out.region_mask(dilate=6)
    untouched_ok = np.array_equal(out.image[~near], scene.background[~near])

    const = scene.background.copy()
    const[:] = 97
    for x0, y0, x1, y1 in scene.holes:
        const[y0:y1, x0:x1] = 0
    const_scene = type(scene)(const, scene.holes, "constant")
    const_ok = bool((recreate_background(const_scene, seed=7).image == 97).all())

    ok = regions_ok and clustered and black_left == 0 and untouched_ok and const_ok
    report(6, "background recreation contract", ok,
           f"{len(scene.holes)} boxes -> {len(regions)} regions, flood fill agrees {regions_ok}, "
           f"black pixels left {black_left}, outside untouched {untouched_ok}, constant exact {const_ok}")


def test_criterion_7_oriented_iou_vs_monte_carlo():
    rng = np.random.default_rng(11)
    worst = 0.0
    for k in range(100):
        half_turn = (-math.pi / 2, math.pi / 2)
        a = OrientedBox(0.0, 0.0, *rng.uniform(1, 4, 2), rng.uniform(*half_turn))
        b = OrientedBox(*rng.uniform(-1.5, 1.5, 2), *rng.uniform(1, 4, 2), rng.uniform(*half_turn))
        exact = iou_oriented(a, b)
        mc = monte_carlo_iou(a.corners(), b.corners(), samples=1_000_000, seed=k)
        worst = max(worst, abs(exact - mc))
    sq = OrientedBox(0, 0, 1, 1, 0.0)
    diamond = iou_oriented(sq, OrientedBox(0, 0, 1, 1, math.pi / 4))
    ok = worst <= 0.005 and abs(diamond - 0.7071) <= 0.002
    report(7, "oriented IoU agrees with Monte Carlo", ok,
           f"worst |exact - MC| {worst:.4f} over 100 pairs, 45-degree square {diamond:.4f}")


def _tree_digest(root) -> tuple[str, int]:
    h = hashlib.sha256()
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.relative_to(root).parts[0] != "logs")
    for p in files:
        h.update(str(p.relative_to(root)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest(), len(files)


def test_criterion_8_end_to_end_determinism(tmp_path, pasture_root, capsys):
    digests = []
    for name, workers in (("a", 1), ("b", 1), ("c", 2)):
        code = main(["pipeline", "--preset", "desk", "--data", str(pasture_root), "--out", str(tmp_path / name),
                     "--seed", "11", "--count", "20", "--workers", str(workers)])
        assert code == 0, capsys.readouterr().err
        digests.append(_tree_digest(tmp_path / name))
    capsys.readouterr()
    ok = digests[0] == digests[1] == digests[2]
    report(8, "pipeline output identical across reruns and worker counts", ok,
           f"{digests[0][1]} files, digests {', '.join(d[:12] for d, _ in digests)}")


def test_criterion_9_split_counts():
    m = DatasetManifest(tuple(ManifestEntry(f"images/{i:03d}.png", f"labels/{i:03d}.txt") for i in range(137)))
    a, b = split_dataset(m, 0.1, seed=5), split_dataset(m, 0.1, seed=5)
    n_train, n_test = len(a.by_split("train")), len(a.by_split("test"))
    ok = (n_train, n_test) == (123, 14) and a == b
    report(9, "137 entries split 123/14, stable per seed", ok, f"train {n_train}, test {n_test}, rerun equal {a == b}")

