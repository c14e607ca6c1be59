"""Three-stage training curriculum: plans, freeze masks, transitions, bucketing, training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from kontext import autodiff as ad
from kontext import checkpoint, lora
from kontext.autodiff import GradTape, Tensor
from kontext.codec import PatchCodec
from kontext.errors import ConfigError, ContractError, NumericalError
from kontext.mmdit import FULL, HEAD, DiffusionConfig, MMDiT, assemble, flow_loss
from kontext.optim import AdamW, clip_grad_norm
from kontext.rope import TokenRole
from kontext.toyworld import ToySample, generate
from kontext.vlm import VLM, Connector, KontextBundle, QueryTokens, Tokenizer, VlmConfig

log = logging.getLogger(__name__)

STAGES = ("S1", "S2", "S3")
STAGE_ORDER = ("init", "codec", "warmup", "S1", "S2", "S3")
BASE_LR = {"S1": 1e-4, "S2": 1e-4, "S3": 2e-5}
DEFAULT_LR_SCALE = 5.0
DEFAULT_STEPS = {"S1": 2000, "S2": 5000, "S3": 2000}
DEFAULT_BATCH = {"S1": 16, "S2": 32, "S3": 16}
STAGE_TASKS = {
    "S1": ("t2i", "reconstruction", "transformation"),
    "S2": ("t2i", "reconstruction"),
    "S3": ("t2i", "edit", "customized", "multisubject"),
}
STAGE_TRAINABLE = {
    "S1": frozenset({"vlm.lora", "connector", "diffusion.head", "query_tokens"}),
    "S2": frozenset({"connector", "diffusion.full", "query_tokens"}),
    "S3": frozenset({"diffusion.lora", "connector", "query_tokens"}),
}
CFG_DROP = 0.1
VLM_LORA = dict(rank=8, alpha=16.0)
DIFF_LORA = dict(rank=8, alpha=16.0)
DIFF_LORA_TARGETS = ("q", "k", "v", "o", "fc1", "fc2")


@dataclass(frozen=True)
class StagePlan:
    stage: str
    trainable: frozenset[str]
    tasks: dict[str, float]
    lr: float
    batch: int
    steps: int


def plan_for_stage(
    stage: str,
    steps: int | None = None,
    batch: int | None = None,
    lr_scale: float = DEFAULT_LR_SCALE,
    task_weights: dict[str, float] | None = None,
) -> StagePlan:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    tasks = STAGE_TASKS[stage]
    weights = {t: 1.0 / len(tasks) for t in tasks}
    if task_weights:
        unknown = set(task_weights) - set(tasks)
        if unknown:
            raise ConfigError(f"tasks {sorted(unknown)} are not part of stage {stage}")
        weights.update(task_weights)
        total = sum(weights.values())
        weights = {t: w / total for t, w in weights.items()}
    return StagePlan(
        stage=stage,
        trainable=STAGE_TRAINABLE[stage],
        tasks=weights,
        lr=BASE_LR[stage] * lr_scale,
        batch=DEFAULT_BATCH[stage] if batch is None else batch,
        steps=DEFAULT_STEPS[stage] if steps is None else steps,
    )


# ---------------------------------------------------------------------------
# model state and parameter groups


@dataclass(eq=False)
class ModelState:
    stage: str
    codec: PatchCodec
    vlm: VLM
    queries: QueryTokens
    connector: Connector
    diffusion: MMDiT
    tokenizer: Tokenizer
    vlm_adapters: list[lora.LoraAdapter] = field(default_factory=list)
    diff_adapters: list[lora.LoraAdapter] = field(default_factory=list)

    @property
    def diffusion_group(self) -> str:
        return f"diffusion.{self.diffusion.cfg.scale}"

    @property
    def low_level(self) -> bool:
        """Conditioning latents enter the diffusion sequence from Stage 3 on."""
        return self.stage == "S3"


def new_state(seed: int = 0, tokenizer: Tokenizer | None = None) -> ModelState:
    tok = tokenizer or Tokenizer.default()
    vcfg = VlmConfig(vocab_size=len(tok))
    rng = np.random.default_rng([seed, 17])
    return ModelState(
        stage="init",
        codec=PatchCodec(seed),
        vlm=VLM(vcfg, seed + 1),
        queries=QueryTokens(rng, vcfg.K, vcfg.model_dim),
        connector=Connector(vcfg.model_dim, HEAD.dim, seed + 2),
        diffusion=MMDiT(HEAD, seed + 3),
        tokenizer=tok,
    )


def _lora_params(adapters: Iterable[lora.LoraAdapter]) -> list[Tensor]:
    return [t for a in adapters for t in (a.A, a.B)]


def param_groups(state: ModelState) -> "OrderedDict[str, list[tuple[str, Tensor]]]":
    """Named parameters by curriculum group. LoRA tensors never sit in a base group."""
    groups: OrderedDict[str, list[tuple[str, Tensor]]] = OrderedDict()

    def split(prefix: str, module, base: str, adapters_group: str | None):
        for name, p in module.named_parameters(prefix):
            if ".lora." in name:
                groups.setdefault(adapters_group, []).append((name, p))
            else:
                groups.setdefault(base, []).append((name, p))

    groups["codec"] = list(state.codec.named_parameters("codec."))
    split("vlm.", state.vlm, "vlm.base", "vlm.lora")
    groups["query_tokens"] = list(state.queries.named_parameters("query_tokens."))
    groups["connector"] = list(state.connector.named_parameters("connector."))
    split("diffusion.", state.diffusion, state.diffusion_group, "diffusion.lora")
    return groups


def apply_freeze(state: ModelState, plan: StagePlan) -> dict[str, bool]:
    """requires_grad=True exactly on ``plan.trainable``; returns the mask by group."""
    if not plan.trainable:
        raise ConfigError("stage plan has an empty trainable set")
    groups = param_groups(state)
    missing = sorted(set(plan.trainable) - set(groups))
    if missing:
        raise ConfigError(f"parameter groups {missing} do not exist in the current model state ({state.stage})")
    mask = {}
    for g, items in groups.items():
        flag = g in plan.trainable
        mask[g] = flag
        for _, p in items:
            p.requires_grad = flag
            p._tracked = flag
            p.grad = None
    return mask


def group_hashes(state: ModelState) -> dict[str, str]:
    out = {}
    for g, items in param_groups(state).items():
        h = hashlib.sha256()
        for name, p in items:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        out[g] = h.hexdigest()
    return out


# ---------------------------------------------------------------------------
# transitions


def begin_stage1(state: ModelState, seed: int = 0) -> ModelState:
    if state.stage != "warmup":
        raise ContractError(f"stage 1 starts from the warm-up checkpoint, state is at {state.stage!r}")
    rng = np.random.default_rng([seed, 101])
    state.vlm_adapters = lora.attach(state.vlm, rng, include=lora_vlm_targets(), **VLM_LORA)
    state.stage = "S1"
    return state


def lora_vlm_targets() -> tuple[str, ...]:
    from kontext.vlm import LORA_TARGETS

    return LORA_TARGETS


def transition_s1_to_s2(state: ModelState, seed: int = 0) -> ModelState:
    """Merge VLM LoRA, swap the head for the Full model, re-init the connector; queries carry over."""
    if state.stage != "S1":
        raise ContractError(f"S1->S2 transition needs a stage-1 state, got {state.stage!r}; it may already have been applied")
    for _, lin in lora.lora_linears(state.vlm, lora_vlm_targets()):
        if lin.lora is not None:
            lora.merge(lin.lora, lin.weight)
            lin.lora = None
    state.vlm_adapters = []
    state.diffusion = MMDiT(FULL, seed + 3)
    state.connector = Connector(state.vlm.cfg.model_dim, FULL.dim, seed + 2)
    state.stage = "S2"
    return state


def transition_s2_to_s3(state: ModelState, seed: int = 0) -> ModelState:
    if state.stage != "S2":
        raise ContractError(f"S2->S3 transition needs a stage-2 state, got {state.stage!r}")
    rng = np.random.default_rng([seed, 303])
    state.diff_adapters = [
        a for blk in state.diffusion.blocks for a in lora.attach(blk, rng, include=DIFF_LORA_TARGETS, **DIFF_LORA)
    ]
    state.stage = "S3"
    return state


# ---------------------------------------------------------------------------
# bucketing and data


class Bucketeer:
    """Queues keyed by (aspect-ratio class, number of conditioning images)."""

    def __init__(self, batch: int):
        if batch < 1:
            raise ConfigError("batch size must be >= 1")
        self.batch = batch
        self.queues: dict[tuple[str, int], list] = defaultdict(list)

    @staticmethod
    def key(sample) -> tuple[str, int]:
        return (sample.aspect, sample.n_refs)

    def push(self, sample) -> list | None:
        q = self.queues[self.key(sample)]
        q.append(sample)
        if len(q) == self.batch:
            self.queues[self.key(sample)] = []
            return q
        return None

    def flush(self) -> list[list]:
        out = [q for q in self.queues.values() if q]
        self.queues = defaultdict(list)
        return out


def bucket(samples: Iterable, batch: int) -> list[list]:
    b = Bucketeer(batch)
    out = []
    for s in samples:
        full = b.push(s)
        if full is not None:
            out.append(full)
    return out + b.flush()


def draw_task(rng: np.random.Generator, weights: dict[str, float]) -> str:
    names = list(weights)
    p = np.array([weights[n] for n in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=p / p.sum()))]


class TaskStream:
    """Deterministic batch source: one task per step, batch filled through the bucketeer."""

    def __init__(self, tasks: dict[str, float], batch: int, seed: int):
        self.tasks = tasks
        self.batch = batch
        self.seed = seed
        self.counter = 0
        self.rng = np.random.default_rng([seed, 0xB0C])
        self.bucketeer = Bucketeer(batch)

    def next_batch(self) -> tuple[str, list[ToySample]]:
        task = draw_task(self.rng, self.tasks)
        while True:
            s = generate(task, self.seed, self.counter)
            self.counter += 1
            full = self.bucketeer.push(s)
            if full is not None:
                return task, full


# ---------------------------------------------------------------------------
# conditioning and losses


@dataclass
class Flags:
    no_kontext: bool = False
    rope_mode: str = "shifted"
    role_override: str | None = None


def _stack_cond(samples: list[ToySample]) -> list[tuple[np.ndarray, list[TokenRole]]]:
    n = samples[0].n_refs
    if any(s.n_refs != n for s in samples):
        raise ContractError("batch mixes conditioning-image counts; bucket it first")
    return [(np.stack([s.cond_images[k][0] for s in samples]), [s.cond_images[k][1] for s in samples]) for k in range(n)]


def encode_condition(
    state: ModelState,
    captions: list[str],
    cond: list[tuple[np.ndarray, list[TokenRole]]],
    flags: Flags = Flags(),
) -> KontextBundle:
    """VLM -> connector. With ``no_kontext`` the VLM sees text only and Q is dropped."""
    ids, mask = state.tokenizer.batch(captions, state.vlm.cfg.max_caption)
    images = [] if flags.no_kontext else [img for img, _ in cond]
    T, Q = state.vlm.forward(ids, mask, images, state.queries)
    bundle = state.connector.connect(T, Q, mask)
    if flags.no_kontext:
        b = len(captions)
        bundle = KontextBundle(bundle.T_proj, bundle.Q_proj[:, :0], bundle.text_mask, np.zeros((b, 0), bool))
    return bundle


def _override_roles(roles: list[TokenRole], override: str | None) -> list[TokenRole]:
    if override is None:
        return roles
    return [TokenRole.parse(override) for _ in roles]


def condition_latents(state: ModelState, cond, flags: Flags = Flags()) -> list[tuple[np.ndarray, list[TokenRole]]]:
    if not state.low_level:
        return []
    return [(state.codec.encode(img), _override_roles(roles, flags.role_override)) for img, roles in cond]


def batch_loss(
    state: ModelState,
    samples: list[ToySample],
    rng: np.random.Generator,
    flags: Flags = Flags(),
    cfg_drop: float = CFG_DROP,
) -> Tensor:
    cond = _stack_cond(samples)
    bundle = encode_condition(state, [s.caption for s in samples], cond, flags)
    b = len(samples)
    ctx, ctx_mask = bundle.tokens, bundle.mask
    drop = rng.random(b) < cfg_drop
    if drop.any():
        keep = (~drop).astype(np.float32)[:, None, None]
        null = state.diffusion.null_context(b, ctx.shape[1])
        ctx = ad.add(ad.mul(ctx, keep), ad.mul(null, 1.0 - keep))
        ctx_mask = ctx_mask.copy()
        ctx_mask[drop] = True
    lat = condition_latents(state, cond, flags)
    x0 = state.codec.encode(np.stack([s.target for s in samples]))

    def build(xt):
        return assemble(None, xt, lat, ctx=ctx, ctx_mask=ctx_mask, rope_mode=flags.rope_mode)

    return flow_loss(state.diffusion, x0, build, rng)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class StageResult:
    records: list[dict]
    seconds: float


def run_stage(
    plan: StagePlan,
    state: ModelState,
    seed: int,
    flags: Flags = Flags(),
    log_path: str | Path | None = None,
    stream: TaskStream | None = None,
    grad_clip: float = 1.0,
    warmup_steps: int = 100,
    progress_every: int = 0,
) -> StageResult:
    """Train the plan's trainable groups for ``plan.steps`` steps; frozen groups stay bit-identical."""
    if state.stage != plan.stage:
        raise ContractError(f"state is at {state.stage!r} but the plan is for {plan.stage!r}")
    apply_freeze(state, plan)
    groups = param_groups(state)
    trainable = [p for g in plan.trainable for _, p in groups[g]]
    opt = AdamW(trainable, lr=plan.lr)
    stream = stream or TaskStream(plan.tasks, plan.batch, seed)
    records: list[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    t0 = time.perf_counter()
    try:
        for step in range(plan.steps):
            task, samples = stream.next_batch()
            rng = np.random.default_rng([seed, step, 0x5EED])
            opt.zero_grad()
            with GradTape() as tape:
                loss = batch_loss(state, samples, rng, flags)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"loss became {value} at step {step} (task {task})", step=step, task=task)
            tape.backward(loss)
            clip_grad_norm(trainable, grad_clip)
            lr = plan.lr * min(1.0, (step + 1) / warmup_steps)
            opt.step(lr)
            rec = {"step": step, "task": task, "loss": round(value, 6), "lr": lr}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if progress_every and step % progress_every == 0:
                log.info("%s step %d task %s loss %.4f", plan.stage, step, task, value)
    finally:
        if fh:
            fh.close()
    for p in trainable:
        p.grad = None
    return StageResult(records, time.perf_counter() - t0)


def warmup_vlm(state: ModelState, steps: int, seed: int, batch: int = 16, lr: float = 1e-3, progress_every: int = 0) -> StageResult:
    """Next-token captioning of toy scenes so the VLM stub has image-grounded features."""
    if state.stage not in ("init", "codec"):
        raise ContractError(f"VLM warm-up runs before stage 1, state is at {state.stage!r}")
    vlm = state.vlm
    vlm.set_requires_grad(True)
    params = vlm.parameters()
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    tok = state.tokenizer
    records = []
    t0 = time.perf_counter()
    max_len = vlm.cfg.max_caption + 2
    for step in range(steps):
        samples = [generate("t2i", seed, step * batch + i) for i in range(batch)]
        ids = np.full((batch, max_len), tok.pad_id, np.int64)
        loss_mask = np.zeros((batch, max_len - 1), np.float32)
        for b, s in enumerate(samples):
            seq = [tok.bos_id] + tok.encode(s.caption) + [tok.eos_id]
            ids[b, : len(seq)] = seq
            loss_mask[b, : len(seq) - 1] = 1.0
        imgs = np.stack([s.target for s in samples])
        opt.zero_grad()
        with GradTape() as tape:
            logits = vlm.caption_logits(imgs, ids[:, :-1])
            loss = ad.cross_entropy(logits, ids[:, 1:], loss_mask)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"warm-up loss became {value} at step {step}", step=step, task="caption")
        tape.backward(loss)
        clip_grad_norm(params, 1.0)
        warm = min(1.0, (step + 1) / 100)
        opt.step(lr * warm * (0.5 + 0.5 * np.cos(np.pi * step / max(steps, 1))))
        records.append({"step": step, "task": "caption", "loss": round(value, 6), "lr": lr})
        if progress_every and step % progress_every == 0:
            log.info("warmup step %d loss %.4f", step, value)
    vlm.set_requires_grad(False)
    state.stage = "warmup"
    return StageResult(records, time.perf_counter() - t0)


def smoothed(values: list[float], window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def state_entries(state: ModelState) -> dict[str, np.ndarray]:
    entries = {}
    for items in param_groups(state).values():
        for name, p in items:
            entries[name] = p.data
    entries["meta.stage"] = np.array([STAGE_ORDER.index(state.stage)], np.float32)
    entries["meta.diffusion_full"] = np.array([1.0 if state.diffusion.cfg.scale == "full" else 0.0], np.float32)
    for name, arr in lora.lora_metadata(state.vlm).items():
        entries[f"vlm.{name}"] = arr
    for name, arr in lora.lora_metadata(state.diffusion).items():
        entries[f"diffusion.{name}"] = arr
    return entries


def save_state(state: ModelState, path: str | Path) -> str:
    return checkpoint.save(path, state_entries(state))


def load_state(path: str | Path, tokenizer: Tokenizer | None = None) -> ModelState:
    entries = checkpoint.load(path)
    stage = STAGE_ORDER[int(entries["meta.stage"][0])]
    state = new_state(0, tokenizer)
    state.stage = stage
    if entries["meta.diffusion_full"][0] > 0.5:
        state.diffusion = MMDiT(FULL)
        state.connector = Connector(state.vlm.cfg.model_dim, FULL.dim)
    for module, prefix, attr in ((state.vlm, "vlm.", "vlm_adapters"), (state.diffusion, "diffusion.", "diff_adapters")):
        metas = {k[len(prefix) : -len(".lora.meta")]: v for k, v in entries.items() if k.startswith(prefix) and k.endswith(".lora.meta")}
        adapters = []
        for name, lin in module.named_modules():
            if name in metas:
                rank, alpha = int(metas[name][0]), float(metas[name][1])
                lin.lora = lora.LoraAdapter.create(np.random.default_rng(0), lin.d_in, lin.d_out, rank, alpha)
                adapters.append(lin.lora)
        setattr(state, attr, adapters)
    schema = {name: p.shape for items in param_groups(state).values() for name, p in items}
    checkpoint.validate(entries, schema)
    for items in param_groups(state).values():
        for name, p in items:
            p.data = np.array(entries[name], dtype=np.float32)
    for m in (state.codec, state.vlm, state.queries, state.connector, state.diffusion):
        m.set_requires_grad(False)
    return state
