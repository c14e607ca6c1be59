"""End-to-end run of the curriculum and every report, driven through the CLI.

Each step is skipped when its artifact already exists, so an interrupted run
resumes and the acceptance suite can reuse a finished one. Wall-clock time
per step is appended to ``timings.json``.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

from kontext import cli
from kontext import curriculum as C
from kontext import evaluate as E
from kontext.checkpoint import file_sha256
from kontext.errors import KontextError

log = logging.getLogger(__name__)


def _steps(runs: Path) -> list[tuple[str, Path, list[str]]]:
    ck = runs / "ckpt"
    rep = runs / "reports"
    root = ["--ckpt-root", str(ck)]
    s3, s3c = str(ck / "stage3.ckpt"), str(ck / "stage3-collapsed.ckpt")
    return [
        ("codec", ck / "codec.ckpt", ["train", "--stage", "codec", *root]),
        ("warmup", ck / "warmup.ckpt", ["train", "--stage", "warmup", *root]),
        ("stage1", ck / "stage1.ckpt", ["train", "--stage", "1", *root]),
        ("stage2", ck / "stage2.ckpt", ["train", "--stage", "2", *root]),
        ("stage3", ck / "stage3.ckpt", ["train", "--stage", "3", *root]),
        ("stage3_collapsed", ck / "stage3-collapsed.ckpt", ["train", "--stage", "3", "--no-shifted-rope", "--tag", "collapsed", *root]),
        ("baseline", ck / "baseline.ckpt", []),
        ("manifest_t2i", runs / "manifests" / "t2i.jsonl", ["manifest", "--tasks", "t2i=100", "--out", str(runs / "manifests" / "t2i.jsonl")]),
        ("manifest_all", runs / "manifests" / "all.jsonl", ["manifest", "--tasks", "t2i=50,edit=50,customized=50,multisubject=50,reconstruction=50", "--out", str(runs / "manifests" / "all.jsonl")]),
        ("eval_t2i", rep / "eval_t2i.json", ["eval", "--checkpoint", s3, "--manifest", str(runs / "manifests" / "t2i.jsonl"), "--report", str(rep / "eval_t2i")]),
        ("eval_t2i_baseline", rep / "eval_t2i_baseline.json", ["eval", "--checkpoint", str(ck / "baseline.ckpt"), "--manifest", str(runs / "manifests" / "t2i.jsonl"), "--report", str(rep / "eval_t2i_baseline")]),
        ("eval_all", rep / "eval_all.json", ["eval", "--checkpoint", s3, "--manifest", str(runs / "manifests" / "all.jsonl"), "--report", str(rep / "eval_all")]),
        ("edit_recolor", rep / "edit_recolor.json", []),
        ("ablate_rope", rep / "ablate_rope.json", ["ablate-rope", "--checkpoint", s3, "--n", "50", "--seeds", "0", "1", "2", "--report", str(rep / "ablate_rope")]),
        ("ablate_multiref", rep / "ablate_multiref.json", ["ablate-multiref", "--checkpoint", s3, "--ablation-checkpoint", s3c, "--n", "50", "--report", str(rep / "ablate_multiref")]),
        ("ablate_convergence", rep / "ablate_convergence.json", ["ablate-convergence", *root, "--steps", "400", "--batch", "16", "--seeds", "0", "1", "2", "--report", str(rep / "ablate_convergence")]),
    ]


def write_baseline(path: Path, seed: int = 0) -> None:
    """Untrained model with the Stage-3 structure (trained codec, so only the generator is untrained)."""
    codec_state = C.load_state(path.parent / "codec.ckpt")
    state = C.new_state(seed)
    state.codec = codec_state.codec
    state.stage = "warmup"
    C.begin_stage1(state, seed)
    C.transition_s1_to_s2(state, seed)
    C.transition_s2_to_s3(state, seed)
    C.save_state(state, path)


def write_edit_recolor(path: Path, ckpt: Path, n: int = 50) -> dict:
    """Recolor edits from the Stage-3 model: preserved-region MSE against the codec's round-trip floor."""
    state = C.load_state(ckpt)
    samples = E.eval_samples("edit", n, E.EVAL_SEED_BASE, edit_category="recolor")
    res = E.evaluate(state, "edit", n, samples=samples)
    floor = E.codec_floor(state, samples)
    payload = {
        "checkpoint": str(ckpt),
        "checkpoint_sha256": file_sha256(ckpt),
        "n": n,
        "compliance": res.compliance,
        "locality_mse": res.locality_mse,
        "codec_floor_mse": floor,
        "locality_over_floor": res.locality_mse / floor if floor > 0 else float("inf"),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def run_all(runs: str | Path = "runs", only: set[str] | None = None) -> dict[str, float]:
    runs = Path(runs)
    runs.mkdir(parents=True, exist_ok=True)
    timing_path = runs / "timings.json"
    timings = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    for name, artifact, argv in _steps(runs):
        if only is not None and name not in only:
            continue
        if artifact.exists():
            continue
        log.info("== %s", name)
        t0 = time.perf_counter()
        if name == "baseline":
            write_baseline(artifact)
        elif name == "edit_recolor":
            write_edit_recolor(artifact, runs / "ckpt" / "stage3.ckpt")
        else:
            code = cli.main(argv)
            if code != 0:
                raise KontextError(f"pipeline step {name} failed with exit code {code}")
        timings[name] = round(time.perf_counter() - t0, 1)
        timing_path.write_text(json.dumps(timings, indent=2) + "\n")
    return timings


if __name__ == "__main__":
    import sys

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    run_all(sys.argv[1] if len(sys.argv) > 1 else "runs", set(sys.argv[2:]) or None)
