"""Command-line entry point: training stages, sampling, evaluation and ablation reports.

Every command resolves a RunConfig from flags, then lets an optional INI
config file (section ``[run]``) override them. Only the checkpoint root can
additionally come from the ``KONTEXT_CKPT_ROOT`` environment variable.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kontext import curriculum as C
from kontext import evaluate as E
from kontext import toyworld as tw
from kontext.checkpoint import file_sha256
from kontext.codec import train_codec
from kontext.errors import ConfigError, KontextError
from kontext.rope import TokenRole

log = logging.getLogger("kontext")

CKPT_ENV = "KONTEXT_CKPT_ROOT"
STAGE_FILES = {"codec": "codec", "warmup": "warmup", "1": "stage1", "2": "stage2", "3": "stage3"}
PREREQ = {"codec": None, "warmup": "codec", "1": "warmup", "2": "1", "3": "2"}
CODEC_STEPS = 2000
CODEC_LR = 1e-2
WARMUP_STEPS = 2000


@dataclass
class RunConfig:
    command: str = ""
    stage: str = "1"
    seed: int = 0
    steps: int | None = None
    batch: int | None = None
    lr_scale: float = C.DEFAULT_LR_SCALE
    cfg_scale: float = E.DEFAULT_CFG
    sample_steps: int = E.DEFAULT_STEPS
    no_kontext: bool = False
    no_shifted_rope: bool = False
    role_override: str | None = None
    ckpt_root: str = "checkpoints"
    checkpoint: str | None = None
    init: str | None = None
    tag: str | None = None
    out: str | None = None
    manifest: str | None = None
    report: str | None = None
    caption: str | None = None
    source: str | None = None
    references: list[str] = field(default_factory=list)
    tasks: str = "t2i=100"
    n: int = 50
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    ablation_checkpoint: str | None = None

    @property
    def flags(self) -> C.Flags:
        return C.Flags(
            no_kontext=self.no_kontext,
            rope_mode="collapsed" if self.no_shifted_rope else "shifted",
            role_override=self.role_override,
        )

    def digest(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    """Config-file values are JSON when they parse as JSON, bare strings otherwise."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if name == "stage" or name in ("caption", "role_override") and value is not None:
        return str(value)
    return value


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cp = configparser.ConfigParser()
    try:
        cp.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {p}: {exc}") from exc
    if cp.sections() != ["run"]:
        raise ConfigError(f"config file {p} must contain exactly one [run] section")
    out = {}
    for key, raw in cp["run"].items():
        if key not in FIELDS or key == "command":
            raise ConfigError(f"unknown config key {key!r} in {p}")
        out[key] = _coerce(key, raw)
    return out


def resolve_config(args: argparse.Namespace, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    values = {k: v for k, v in vars(args).items() if k in FIELDS and v is not None}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    if env.get(CKPT_ENV):
        values["ckpt_root"] = env[CKPT_ENV]
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.command == "train" and cfg.stage not in STAGE_FILES:
        raise ConfigError(f"unknown stage {cfg.stage!r}; expected one of {sorted(STAGE_FILES)}")
    for name in ("steps", "batch"):
        v = getattr(cfg, name)
        if v is not None and (not isinstance(v, int) or v < (0 if name == "steps" else 1)):
            raise ConfigError(f"{name} must be a {'non-negative' if name == 'steps' else 'positive'} integer, got {v!r}")
    if not isinstance(cfg.seed, int):
        raise ConfigError(f"seed must be an integer, got {cfg.seed!r}")
    if cfg.sample_steps < 1:
        raise ConfigError("sample_steps must be >= 1")
    if cfg.lr_scale <= 0:
        raise ConfigError("lr_scale must be positive")
    if cfg.role_override is not None:
        try:
            role = TokenRole.parse(cfg.role_override)
        except (ValueError, KontextError) as exc:
            raise ConfigError(f"bad role_override {cfg.role_override!r}: {exc}") from exc
        if role.kind not in ("source", "reference"):
            raise ConfigError("role_override must be 'source' or 'referenceN'")
    for name in ("checkpoint", "init", "manifest", "source", "ablation_checkpoint"):
        v = getattr(cfg, name)
        if v is not None and not Path(v).is_file():
            raise ConfigError(f"{name} path does not exist: {v}")
    for v in cfg.references:
        if not Path(v).is_file():
            raise ConfigError(f"reference image does not exist: {v}")
    parse_tasks(cfg.tasks)


def parse_tasks(spec: str) -> dict[str, int]:
    out = {}
    for part in filter(None, (p.strip() for p in str(spec).split(","))):
        name, _, count = part.partition("=")
        if name not in tw.TASKS:
            raise ConfigError(f"unknown task {name!r}; expected one of {tw.TASKS}")
        try:
            out[name] = int(count) if count else 100
        except ValueError as exc:
            raise ConfigError(f"bad task count in {part!r}") from exc
    return out


# ---------------------------------------------------------------------------
# helpers


def stage_path(cfg: RunConfig, stage: str, tag: str | None = None) -> Path:
    name = STAGE_FILES[stage] + (f"-{tag}" if tag else "")
    return Path(cfg.ckpt_root) / f"{name}.ckpt"


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_checkpoint(cfg: RunConfig) -> tuple[C.ModelState, Path]:
    path = Path(cfg.checkpoint) if cfg.checkpoint else stage_path(cfg, "3")
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path} (train stage 3 first or pass --checkpoint)")
    return C.load_state(path), path


def _read_image(path: str) -> np.ndarray:
    img = tw.load_png(path)
    if img.shape != (tw.CANVAS, tw.CANVAS, 3):
        raise ConfigError(f"image {path} must be {tw.CANVAS}x{tw.CANVAS} RGB, got {img.shape}")
    return img


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> dict:
    stage = cfg.stage
    out = Path(cfg.out) if cfg.out else stage_path(cfg, stage, cfg.tag)
    metrics = out.with_suffix(".metrics.jsonl")
    prereq = PREREQ[stage]
    if prereq is None:
        state = C.new_state(cfg.seed)
        steps = CODEC_STEPS if cfg.steps is None else cfg.steps
        res = train_codec(state.codec, steps, lr=CODEC_LR, batch=cfg.batch or 16, seed=cfg.seed)
        records = [{"step": i, "task": "codec", "loss": round(v, 6), "lr": CODEC_LR} for i, v in enumerate(res.losses)]
        state.stage = "codec"
    else:
        init = Path(cfg.init) if cfg.init else stage_path(cfg, prereq)
        if not init.is_file():
            raise ConfigError(f"{STAGE_FILES[prereq]} checkpoint required: {init} not found")
        state = C.load_state(init)
        if stage == "warmup":
            steps = WARMUP_STEPS if cfg.steps is None else cfg.steps
            records = C.warmup_vlm(state, steps, cfg.seed, batch=cfg.batch or 16, progress_every=100).records
        else:
            sname = f"S{stage}"
            if stage == "1":
                C.begin_stage1(state, cfg.seed)
            elif stage == "2":
                C.transition_s1_to_s2(state, cfg.seed)
            else:
                C.transition_s2_to_s3(state, cfg.seed)
            plan = C.plan_for_stage(sname, steps=cfg.steps, batch=cfg.batch, lr_scale=cfg.lr_scale)
            records = C.run_stage(plan, state, cfg.seed, cfg.flags, progress_every=100).records
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(metrics, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    digest = C.save_state(state, out)
    print(f"wrote {out} (sha256 {digest[:16]}) and {metrics}")
    return {"checkpoint": str(out), "checkpoint_sha256": digest, "metrics": str(metrics), "steps": len(records)}


def _cond_from_files(cfg: RunConfig) -> list[tuple[np.ndarray, TokenRole]]:
    cond = []
    if cfg.source:
        cond.append((_read_image(cfg.source), TokenRole.parse("source")))
    for n, path in enumerate(cfg.references, start=1):
        cond.append((_read_image(path), TokenRole.parse(f"reference{n}")))
    return cond


def cmd_generate(cfg: RunConfig) -> dict:
    state, ckpt = _load_checkpoint(cfg)
    if cfg.manifest:
        samples = tw.read_manifest(cfg.manifest)
        if not samples:
            raise ConfigError(f"manifest {cfg.manifest} is empty")
        out_dir = Path(cfg.out or "generated")
        images = E.generate_images(state, samples, cfg.seed, cfg.sample_steps, cfg.cfg_scale, cfg.flags)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            tw.save_png(out_dir / f"{i:04d}.png", img)
        res = E.score(images, samples, "manifest", cfg.seed)
        print(f"wrote {len(images)} images to {out_dir}; mean compliance {res.compliance:.4f}")
        return {"images": len(images), "compliance": res.compliance}
    if not cfg.caption:
        raise ConfigError("generate needs --caption or --manifest")
    state.tokenizer.encode(cfg.caption)
    cond = _cond_from_files(cfg)
    blank = np.zeros((tw.CANVAS, tw.CANVAS, 3), np.float32)
    sample = tw.ToySample("custom", cfg.caption, cond, blank, tw.OracleSpec())
    img = E.generate_images(state, [sample], cfg.seed, cfg.sample_steps, cfg.cfg_scale, cfg.flags)[0]
    out = Path(cfg.out or "out.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    tw.save_png(out, img)
    result = {"image": str(out), "checkpoint_sha256": file_sha256(ckpt)}
    if not cond:
        try:
            keys, rel = tw.parse_t2i(cfg.caption)
        except ValueError:
            keys = None
        if keys:
            result["oracle"] = tw.oracle_score(img, tw._t2i_spec(keys, rel))
            print(f"oracle score: {result['oracle']}")
    print(f"wrote {out}")
    return result


def _report_header(cfg: RunConfig, ckpt: Path) -> dict:
    return {"command": cfg.command, "config_sha256": cfg.digest(), "checkpoint": str(ckpt), "checkpoint_sha256": file_sha256(ckpt)}


def _write_report(cfg: RunConfig, payload: dict, table: list[str], default: str) -> Path:
    path = Path(cfg.report or default)
    _write_json(path.with_suffix(".json"), payload)
    lines = [f"config sha256 {payload['config_sha256']}", f"checkpoint sha256 {payload.get('checkpoint_sha256', '-')}", ""] + table
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(table))
    return path


def cmd_eval(cfg: RunConfig) -> dict:
    if not cfg.manifest:
        raise ConfigError("eval needs --manifest (create one with `kontext manifest`)")
    samples = tw.read_manifest(cfg.manifest)
    if not samples:
        raise ConfigError(f"manifest {cfg.manifest} is empty")
    state, ckpt = _load_checkpoint(cfg)
    by_task: dict[str, list] = {}
    for s in samples:
        by_task.setdefault(s.task, []).append(s)
    results = {}
    for task, items in by_task.items():
        res = E.evaluate(state, task, len(items), cfg.seed, cfg.sample_steps, cfg.cfg_scale, cfg.flags, samples=items)
        results[task] = res.summary()
    payload = _report_header(cfg, ckpt) | {"manifest": cfg.manifest, "tasks": results}
    table = [f"{'task':<16}{'n':>5}{'compliance':>12}{'identity':>10}{'locality':>10}"]
    table += [f"{t:<16}{r['n']:>5}{r['compliance']:>12.4f}{r['identity']:>10.4f}{r['locality_mse']:>10.5f}" for t, r in results.items()]
    _write_report(cfg, payload, table, "reports/eval")
    return payload


def cmd_ablate_rope(cfg: RunConfig) -> dict:
    """Source vs Reference(1) tagging of the same conditioning image, plus the collapsed-position control."""
    state, ckpt = _load_checkpoint(cfg)
    per_seed = []
    shifted = C.Flags(rope_mode="shifted")
    for seed in cfg.seeds:
        eval_seed = E.EVAL_SEED_BASE + seed
        recon = E.eval_samples("reconstruction", cfg.n, eval_seed)
        variation = E.eval_samples("customized", cfg.n, eval_seed)
        row = {"seed": seed}
        for role in ("source", "reference1"):
            r = E.evaluate(state, "reconstruction", cfg.n, eval_seed, cfg.sample_steps, cfg.cfg_scale, shifted, E.with_role(recon, role))
            v = E.evaluate(state, "customized", cfg.n, eval_seed, cfg.sample_steps, cfg.cfg_scale, shifted, E.with_role(variation, role))
            row[role] = {"locality_mse": r.locality_mse, "reconstruction_compliance": r.compliance, "variation_compliance": v.compliance, "variation_identity": v.identity}
        per_seed.append(row)
    probe = recon[: min(8, cfg.n)]
    collapsed = C.Flags(rope_mode="collapsed")
    a = E.generate_latents(state, E.with_role(probe, "source"), 0, cfg.sample_steps, cfg.cfg_scale, collapsed)
    b = E.generate_latents(state, E.with_role(probe, "reference1"), 0, cfg.sample_steps, cfg.cfg_scale, collapsed)
    source_wins = sum(r["source"]["locality_mse"] < r["reference1"]["locality_mse"] for r in per_seed)
    ref_ok = sum(r["reference1"]["variation_compliance"] >= r["source"]["variation_compliance"] for r in per_seed)
    payload = _report_header(cfg, ckpt) | {
        "n": cfg.n,
        "seeds": cfg.seeds,
        "per_seed": per_seed,
        "source_lower_locality_majority": source_wins * 2 > len(per_seed),
        "reference_geq_variation_majority": ref_ok * 2 > len(per_seed),
        "collapsed_roles_max_abs_diff": float(np.max(np.abs(a - b))),
    }
    table = [f"{'seed':<6}{'role':<12}{'locality_mse':>14}{'var.compliance':>16}"]
    for r in per_seed:
        for role in ("source", "reference1"):
            table.append(f"{r['seed']:<6}{role:<12}{r[role]['locality_mse']:>14.5f}{r[role]['variation_compliance']:>16.4f}")
    table.append(f"collapsed positions: source vs reference max |diff| = {payload['collapsed_roles_max_abs_diff']:.3g}")
    _write_report(cfg, payload, table, "reports/ablate_rope")
    return payload


def cmd_ablate_multiref(cfg: RunConfig) -> dict:
    """Two-reference composition with shifted positions vs the no_shifted_rope model."""
    state, ckpt = _load_checkpoint(cfg)
    if cfg.ablation_checkpoint:
        ablated, ablated_path, how = C.load_state(cfg.ablation_checkpoint), cfg.ablation_checkpoint, "trained with collapsed positions"
    else:
        ablated, ablated_path, how = state, str(ckpt), "same weights, positions collapsed at inference"
    samples = E.eval_samples("multisubject", cfg.n, E.EVAL_SEED_BASE + cfg.seed)
    shifted = E.evaluate(state, "multisubject", cfg.n, cfg.seed, cfg.sample_steps, cfg.cfg_scale, C.Flags(rope_mode="shifted"), samples)
    collapsed = E.evaluate(ablated, "multisubject", cfg.n, cfg.seed, cfg.sample_steps, cfg.cfg_scale, C.Flags(rope_mode="collapsed"), samples)
    payload = _report_header(cfg, ckpt) | {
        "n": cfg.n,
        "ablation": how,
        "ablation_checkpoint": ablated_path,
        "shifted": shifted.summary(),
        "collapsed": collapsed.summary(),
        "gap": shifted.compliance - collapsed.compliance,
    }
    table = [
        f"shifted   compliance {shifted.compliance:.4f} identity {shifted.identity:.4f}",
        f"collapsed compliance {collapsed.compliance:.4f} identity {collapsed.identity:.4f} ({how})",
        f"gap {payload['gap']:+.4f}",
    ]
    _write_report(cfg, payload, table, "reports/ablate_multiref")
    return payload


def convergence_steps(kontext: list[float], text_only: list[float], window: int = 50) -> tuple[int | None, int, float]:
    """First step where the kontext run's smoothed loss reaches the text-only run's final smoothed loss."""
    sk = C.smoothed(kontext, window)
    st = C.smoothed(text_only, window)
    final = float(st[-1])
    hit = np.nonzero(sk <= final)[0]
    return (int(hit[0]) + 1 if len(hit) else None), len(st), final


def cmd_ablate_convergence(cfg: RunConfig) -> dict:
    """Stage 2 from one Stage-1 checkpoint: text+kontext vs text-only, per seed."""
    init = Path(cfg.init) if cfg.init else stage_path(cfg, "1")
    if not init.is_file():
        raise ConfigError(f"stage1 checkpoint required: {init} not found")
    steps = cfg.steps if cfg.steps is not None else 400
    rows = []
    for seed in cfg.seeds:
        curves = {}
        for name, no_k in (("kontext", False), ("text_only", True)):
            state = C.transition_s1_to_s2(C.load_state(init), seed)
            plan = C.plan_for_stage("S2", steps=steps, batch=cfg.batch or 16, lr_scale=cfg.lr_scale)
            curves[name] = [r["loss"] for r in C.run_stage(plan, state, seed, C.Flags(no_kontext=no_k)).records]
        hit, total, final = convergence_steps(curves["kontext"], curves["text_only"])
        ratio = hit / total if hit is not None else float("inf")
        rows.append({"seed": seed, "steps": total, "text_only_final": final, "kontext_steps_to_match": hit, "ratio": ratio, "curves": curves})
    agree = sum(r["ratio"] <= 0.7 for r in rows)
    payload = {"command": cfg.command, "config_sha256": cfg.digest(), "checkpoint": str(init), "checkpoint_sha256": file_sha256(init), "per_seed": rows, "majority_faster": agree * 2 > len(rows)}
    table = [f"{'seed':<6}{'text-only final':>16}{'kontext steps':>15}{'ratio':>8}"]
    table += [f"{r['seed']:<6}{r['text_only_final']:>16.4f}{str(r['kontext_steps_to_match']):>15}{r['ratio']:>8.3f}" for r in rows]
    _write_report(cfg, payload, table, "reports/ablate_convergence")
    return payload


def cmd_manifest(cfg: RunConfig) -> dict:
    out = Path(cfg.out or "manifests/eval.jsonl")
    tasks = parse_tasks(cfg.tasks)
    tw.write_manifest(out, tasks, E.EVAL_SEED_BASE + cfg.seed)
    print(f"wrote {out} ({sum(tasks.values())} items)")
    return {"manifest": str(out)}


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "ablate-rope": cmd_ablate_rope,
    "ablate-multiref": cmd_ablate_multiref,
    "ablate-convergence": cmd_ablate_convergence,
    "manifest": cmd_manifest,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kontext", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI file with a [run] section; its keys override flags")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--ckpt-root", dest="ckpt_root")
        sp.add_argument("--checkpoint")
        sp.add_argument("--out")
        sp.add_argument("--report")
        sp.add_argument("--cfg-scale", dest="cfg_scale", type=float)
        sp.add_argument("--sample-steps", dest="sample_steps", type=int)
        sp.add_argument("--no-kontext", dest="no_kontext", action="store_true", default=None)
        sp.add_argument("--no-shifted-rope", dest="no_shifted_rope", action="store_true", default=None)
        sp.add_argument("--role-override", dest="role_override")
        return sp

    t = common(sub.add_parser("train", help="train the codec, the VLM warm-up or a curriculum stage"))
    t.add_argument("--stage", choices=sorted(STAGE_FILES))
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr-scale", dest="lr_scale", type=float)
    t.add_argument("--init", help="input checkpoint (default: previous stage under the checkpoint root)")
    t.add_argument("--tag", help="suffix for the output checkpoint name, for ablation runs")

    g = common(sub.add_parser("generate", help="sample an image for a caption, or every item of a manifest"))
    g.add_argument("--caption")
    g.add_argument("--source", help="PNG tagged as the source image")
    g.add_argument("--reference", dest="references", action="append", help="PNG tagged as the next reference image")
    g.add_argument("--manifest")

    e = common(sub.add_parser("eval", help="oracle-scored metrics for a manifest"))
    e.add_argument("--manifest")

    ablations = {
        "ablate-rope": "source vs reference tagging of the same conditioning image",
        "ablate-multiref": "two-reference composition, shifted vs collapsed positions",
    }
    for name, text in ablations.items():
        a = common(sub.add_parser(name, help=text))
        a.add_argument("--n", type=int)
        a.add_argument("--seeds", type=int, nargs="+")
        a.add_argument("--ablation-checkpoint", dest="ablation_checkpoint")

    c = common(sub.add_parser("ablate-convergence", help="stage-2 text+kontext vs text-only loss curves"))
    c.add_argument("--init")
    c.add_argument("--steps", type=int)
    c.add_argument("--batch", type=int)
    c.add_argument("--lr-scale", dest="lr_scale", type=float)
    c.add_argument("--seeds", type=int, nargs="+")

    m = common(sub.add_parser("manifest", help="write an evaluation manifest"))
    m.add_argument("--tasks", help="comma list like t2i=100,edit=50")
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[cfg.command](cfg)
    except KontextError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
