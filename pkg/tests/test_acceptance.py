"""Acceptance criteria, one pass/fail line each.

Criteria 7-12 read artifacts from a full curriculum run under ``runs/`` (or
``$KONTEXT_RUNS``). Missing artifacts are produced by ``kontext.pipeline``,
which takes a few hours on one CPU; an existing run is reused as is.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from kontext import cli, gradcheck, lora, pipeline
from kontext import autodiff as ad
from kontext import curriculum as C
from kontext.mmdit import param_ratio
from kontext.nn import Linear
from kontext.rope import SOURCE, TARGET, RopeFreqs, apply_rope, collision_report, coords_for_role, reference

RUNS = Path(os.environ.get("KONTEXT_RUNS", Path(__file__).resolve().parents[1] / "runs"))


def report(request, capsys, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def runs():
    pipeline.run_all(RUNS)
    return RUNS


def _json(runs: Path, name: str) -> dict:
    return json.loads((runs / "reports" / f"{name}.json").read_text())


def test_criterion_01_autodiff_gradchecks(request, capsys):
    t0 = time.perf_counter()
    worst = gradcheck.check_all(instances=20)
    secs = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v > 1e-3}
    report(request, capsys, not bad and secs < 120, f"{len(worst)} ops x 20 instances, worst rel err {max(worst.values()):.2e}, {secs:.1f}s, failing={sorted(bad)}")


def test_criterion_02_position_grids(request, capsys):
    ok = True
    for h, w in [(4, 4), (8, 8), (8, 16)]:
        tgt = coords_for_role(h, w, TARGET)
        i, j = tgt.coords[:, 0], tgt.coords[:, 1]
        src = coords_for_role(h, w, SOURCE)
        ok &= np.array_equal(src.coords, np.stack([-i, -j], 1))
        ok &= collision_report([tgt, src]) == {(0, 0)}
        for n in (1, 2):
            ref = coords_for_role(h, w, reference(n))
            ok &= np.array_equal(ref.coords, np.stack([i + w * n, j + h * n], 1))
            ok &= collision_report([tgt, ref]) == set()
    report(request, capsys, bool(ok), "reference/source coordinates exact, reference grids disjoint, source meets target only at (0,0)")


def test_criterion_03_rope_properties(request, capsys):
    rng = np.random.default_rng(0)
    f = RopeFreqs(16)
    norm_err = shift_err = 0.0
    for _ in range(100):
        q, k = rng.standard_normal((2, 1, 1, 16))
        c1, c2, d = rng.integers(-64, 64, size=(3, 2))
        rq = apply_rope(q, c1[None], f).data
        norm_err = max(norm_err, abs(np.linalg.norm(rq) - np.linalg.norm(q)))
        a = (rq * apply_rope(k, c2[None], f).data).sum()
        b = (apply_rope(q, (c1 + d)[None], f).data * apply_rope(k, (c2 + d)[None], f).data).sum()
        shift_err = max(shift_err, abs(a - b))
    report(request, capsys, norm_err <= 1e-5 and shift_err <= 1e-4, f"norm err {norm_err:.2e}, shift invariance err {shift_err:.2e}")


def test_criterion_04_lora(request, capsys):
    rng = np.random.default_rng(0)
    lin = Linear(rng, 64, 48)
    x = rng.standard_normal((5, 64)).astype(np.float32)
    base = lin(x).data
    lin.lora = lora.LoraAdapter.create(rng, 64, 48, 8, 16.0)
    noop = np.array_equal(lin(x).data, base)
    lin.lora.B.data = (rng.standard_normal(lin.lora.B.shape) * 0.1).astype(np.float32)
    w0 = lin.weight.data.copy()
    y_adapter = lin(x).data
    lora.merge(lin.lora, lin.weight)
    fwd = float(np.abs(ad.linear(x, lin.weight, lin.bias).data - y_adapter).max())
    lora.unmerge(lin.lora, lin.weight)
    restore = float(np.abs(lin.weight.data - w0).max())
    report(request, capsys, noop and fwd <= 1e-5 and restore <= 1e-6, f"B=0 exact no-op {noop}, merged forward diff {fwd:.2e}, unmerge diff {restore:.2e}")


TABLE_ROWS = {
    "S1": {"vlm.lora", "connector", "diffusion.head", "query_tokens"},
    "S2": {"connector", "diffusion.full", "query_tokens"},
    "S3": {"diffusion.lora", "connector", "query_tokens"},
}


def test_criterion_05_freeze_soundness(request, capsys):
    lines, ok = [], True
    s = C.new_state(0)
    s.stage = "warmup"
    C.begin_stage1(s, 0)
    for stage in C.STAGES:
        if stage == "S2":
            C.transition_s1_to_s2(s, 0)
        if stage == "S3":
            # zero-initialized gates and output of an untrained stage 2 would block every gradient
            rng = np.random.default_rng(0)
            for _, p in s.diffusion.named_parameters():
                if p.ndim == 2 and not p.data.any():
                    p.data = (rng.standard_normal(p.shape) * 0.02).astype(np.float32)
            C.transition_s2_to_s3(s, 0)
        plan = C.plan_for_stage(stage, steps=10, batch=2)
        before = C.group_hashes(s)
        C.run_stage(plan, s, seed=0)
        after = C.group_hashes(s)
        frozen = set(before) - set(plan.trainable)
        stable = all(before[g] == after[g] for g in frozen)
        rows = set(plan.trainable) == TABLE_ROWS[stage]
        ok &= stable and rows
        lines.append(f"{stage}: frozen {sorted(frozen)} unchanged={stable}, trainable matches={rows}")
    report(request, capsys, ok, "; ".join(lines))


def test_criterion_06_scale_ratio(request, capsys):
    r = param_ratio()
    report(request, capsys, 8 <= r <= 12, f"full/head parameter ratio {r:.2f}")


def test_criterion_07_desk_convergence(request, capsys, runs):
    losses = [json.loads(l)["loss"] for l in (runs / "ckpt" / "stage1.metrics.jsonl").read_text().splitlines()]
    sm = C.smoothed(losses, 100)
    at100, end = float(sm[99]), float(sm[-1])
    drop = 1 - end / at100
    timings = json.loads((runs / "timings.json").read_text())
    train = sum(v for k, v in timings.items() if k in ("codec", "warmup", "stage1", "stage2", "stage3"))
    report(request, capsys, drop >= 0.5, f"S1 smoothed loss {at100:.4f} at step 100 -> {end:.4f} at step {len(losses)} (drop {drop:.1%}); curriculum wall clock {train / 3600:.2f} h")


def test_criterion_08_generation_quality(request, capsys, runs):
    trained = _json(runs, "eval_t2i")["tasks"]["t2i"]
    base = _json(runs, "eval_t2i_baseline")["tasks"]["t2i"]
    a, b = trained["compliance"], base["compliance"]
    ok = a >= 0.8 and b < 0.2 and a - b >= 0.4
    report(request, capsys, ok, f"t2i compliance trained {a:.3f} (n={trained['n']}), untrained {b:.3f}, gap {a - b:.3f}")


def test_criterion_09_convergence_trend(request, capsys, runs):
    rep = _json(runs, "ablate_convergence")
    ratios = [r["ratio"] for r in rep["per_seed"]]
    report(request, capsys, rep["majority_faster"], f"kontext/text-only step ratios {[round(r, 3) for r in ratios]} (need <= 0.7 on a majority)")


def test_criterion_10_source_vs_reference(request, capsys, runs):
    rep = _json(runs, "ablate_rope")
    rows = [
        f"seed {r['seed']}: locality src {r['source']['locality_mse']:.5f} ref {r['reference1']['locality_mse']:.5f}, "
        f"variation src {r['source']['variation_compliance']:.3f} ref {r['reference1']['variation_compliance']:.3f}"
        for r in rep["per_seed"]
    ]
    ok = rep["source_lower_locality_majority"] and rep["reference_geq_variation_majority"]
    report(request, capsys, ok, "; ".join(rows))


def test_criterion_11_edit_locality(request, capsys, runs):
    rep = _json(runs, "edit_recolor")
    ok = rep["locality_over_floor"] <= 2.0 and rep["compliance"] >= 0.8
    report(request, capsys, ok, f"recolor preserved MSE {rep['locality_mse']:.5f} = {rep['locality_over_floor']:.2f}x codec floor {rep['codec_floor_mse']:.5f}; compliance {rep['compliance']:.3f}")


def test_criterion_12_multi_reference(request, capsys, runs):
    rep = _json(runs, "ablate_multiref")
    s, c = rep["shifted"]["compliance"], rep["collapsed"]["compliance"]
    report(request, capsys, rep["gap"] >= 0.15, f"two-reference compliance shifted {s:.3f} vs collapsed {c:.3f} (gap {rep['gap']:+.3f}, n={rep['n']})")


def test_criterion_13_determinism(request, capsys, tmp_path):
    root = tmp_path / "ckpt"
    base = ["--ckpt-root", str(root)]
    assert cli.main(["train", "--stage", "codec", "--steps", "20", *base]) == 0
    assert cli.main(["train", "--stage", "warmup", "--steps", "2", "--batch", "2", *base]) == 0
    arts = []
    for k in range(2):
        ck = tmp_path / f"s1_{k}.ckpt"
        img = tmp_path / f"g_{k}.png"
        assert cli.main(["train", "--stage", "1", "--steps", "3", "--batch", "2", "--seed", "4", *base, "--out", str(ck)]) == 0
        assert cli.main(["generate", "--checkpoint", str(ck), "--caption", "a green triangle above a red square", "--seed", "4", "--sample-steps", "3", "--out", str(img)]) == 0
        arts.append((ck.read_bytes(), ck.with_suffix(".metrics.jsonl").read_bytes(), img.read_bytes()))
    same = [a == b for a, b in zip(*arts)]
    report(request, capsys, all(same), f"checkpoint, metrics log, image identical across two runs: {same}")
