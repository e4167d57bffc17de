"""Three-stage training loop.

Stage 1 trains everything except the memory bank and its fusion convolution
with an L1 reconstruction loss; stage 2 trains the memory bank alone to
reconstruct the (frozen) query embeddings; stage 3 fine-tunes all parameters
with L1 at a lower learning rate. Batch size is one clip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import memory_attention
from .model import ManaModel, encode_frame, mana_forward, memory_query
from .ops import group_norm
from .tensor import Tape, Tensor, tabs, tmean

BETA1 = 0.5
BETA2 = 0.99
EPS = 1e-8

STAGE1_FROZEN = ("memory.m", "fuse.fy.w", "fuse.fy.b")


@dataclass(frozen=True)
class StageSpec:
    iterations: int
    lr: float


@dataclass(frozen=True)
class TrainSchedule:
    stage1: StageSpec
    stage2: StageSpec
    stage3: StageSpec

    def stages(self) -> tuple[StageSpec, StageSpec, StageSpec]:
        return (self.stage1, self.stage2, self.stage3)


def paper_schedule() -> TrainSchedule:
    return TrainSchedule(
        StageSpec(90_000, 1e-4), StageSpec(30_000, 1e-4), StageSpec(30_000, 1e-5)
    )


def desk_schedule(stage1: int = 1500, stage2: int = 20000, stage3: int = 300) -> TrainSchedule:
    """CPU-scale iteration counts at the full-scale preset's learning rates.

    Calibrated on the moving-stripes overfit clip: 500 stage-1 iterations
    leave the model at the bilinear baseline, 1500 clear it by ~8 dB; the
    memory loss needs ~10k cheap stage-2 steps to halve, 20k gives margin.
    """
    return TrainSchedule(
        StageSpec(stage1, 1e-4), StageSpec(stage2, 1e-4), StageSpec(stage3, 1e-5)
    )


def trainable_names(model: ManaModel, stage: int) -> set[str]:
    names = set(model.named_parameters())
    if stage == 1:
        return names - set(STAGE1_FROZEN)
    if stage == 2:
        return {"memory.m"}
    if stage == 3:
        return names
    raise ValueError(f"stage must be 1, 2, or 3, got {stage}")


@dataclass(frozen=True)
class StagePlan:
    """Resolved per-stage recipe: which loss, which parameters move."""

    stage: int
    loss: str  # "l1" or "memory"
    trainable: frozenset
    frozen: frozenset
    iterations: int
    lr: float


def stage_plan(model: ManaModel, stage: int, spec: StageSpec) -> StagePlan:
    names = set(model.named_parameters())
    trainable = trainable_names(model, stage)
    return StagePlan(
        stage=stage,
        loss="memory" if stage == 2 else "l1",
        trainable=frozenset(trainable),
        frozen=frozenset(names - trainable),
        iterations=spec.iterations,
        lr=spec.lr,
    )


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return tmean(tabs(pred - Tensor(np.asarray(target, dtype=pred.dtype))))


def memory_loss(y: Tensor, q: np.ndarray) -> Tensor:
    """Mean absolute difference between the memory readout and its query."""
    return tmean(tabs(y - Tensor(np.asarray(q, dtype=y.dtype))))


class Adam(object):
    """Adam over an explicit set of named trainable tensors.

    Bias-corrected moments; eps is added to the square root of the second
    moment. Every named parameter must be marked trainable, and each step
    must supply a gradient for exactly that set.
    """

    def __init__(self, params: dict[str, Tensor], lr: float):
        for name, t in params.items():
            if not t.requires_grad:
                raise ValueError(f"optimizer given frozen parameter {name}")
        self.params = dict(params)
        self.lr = lr
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        unknown = set(grads) - set(self.params)
        if unknown:
            raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
        missing = set(self.params) - set(grads)
        if missing:
            raise KeyError(f"missing gradients for: {sorted(missing)}")
        self.t += 1
        bc1 = 1.0 - BETA1**self.t
        bc2 = 1.0 - BETA2**self.t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - BETA1) * (g - m)
            v += (1.0 - BETA2) * (g * g - v)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
            p.data = p.data - update.astype(p.dtype)


def _named_grads(grads, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: grads[t] for name, t in params.items()}


def _reconstruction_step(model, clips, rng, optimizer, params):
    lr_frames, hr_center = clips[int(rng.integers(len(clips)))]
    with Tape() as tape:
        for t in params.values():
            tape.watch(t)
        out = mana_forward(model, lr_frames)
        loss = l1_loss(out, hr_center)
        grads = tape.backward(loss)
    optimizer.step(_named_grads(grads, params))
    return float(loss.item())


def _frozen_queries(model: ManaModel, clips) -> list[np.ndarray]:
    """Embedded center-frame queries under the frozen encoder, one per clip."""
    queries = []
    for lr_frames, _ in clips:
        center = (model.config.frames - 1) // 2
        frame = Tensor(np.asarray(lr_frames[center], dtype=model.memory.m.dtype))
        feat = group_norm(encode_frame(frame, model.encoder), model.norm)
        q = memory_query(model, [feat], q=None)
        queries.append(q.data.copy())
    return queries


def _memory_step(model, queries, rng, optimizer, params):
    q = queries[int(rng.integers(len(queries)))]
    with Tape() as tape:
        tape.watch(model.memory.m)
        y = memory_attention(Tensor(q), model.memory)
        loss = memory_loss(y, q)
        grads = tape.backward(loss)
    optimizer.step(_named_grads(grads, params))
    return float(loss.item())


def run_stage(
    model: ManaModel,
    clips,
    stage: int,
    spec: StageSpec,
    rng: np.random.Generator,
    history: list | None = None,
    start_iteration: int = 1,
    log_every: int = 0,
) -> int:
    """Run one stage; appends (iteration, stage, loss) rows and returns the
    next global iteration index. Zero iterations is a no-op."""
    if not clips:
        raise ValueError("need at least one training clip")
    names = trainable_names(model, stage)
    model.set_trainable(names)
    if spec.iterations == 0:
        return start_iteration
    params = {n: t for n, t in model.named_parameters().items() if n in names}
    optimizer = Adam(params, spec.lr)
    queries = _frozen_queries(model, clips) if stage == 2 else None
    it = start_iteration
    for _ in range(spec.iterations):
        if stage == 2:
            loss = _memory_step(model, queries, rng, optimizer, params)
        else:
            loss = _reconstruction_step(model, clips, rng, optimizer, params)
        if history is not None:
            history.append((it, stage, loss))
        if log_every and (it - start_iteration) % log_every == 0:
            print(f"iter {it} stage {stage} loss {loss:.6f}", flush=True)
        it += 1
    return it


def run_three_stage(
    model: ManaModel,
    clips,
    schedule: TrainSchedule,
    seed: int,
    log_every: int = 0,
) -> list[tuple[int, int, float]]:
    """Full pipeline over ``clips`` (a list of (lr_frames, hr_center) pairs).

    Deterministic for a fixed model state and seed. Returns the loss history
    as (global iteration, stage, loss) rows.
    """
    rng = np.random.default_rng(seed)
    history: list[tuple[int, int, float]] = []
    it = 1
    for stage, spec in enumerate(schedule.stages(), start=1):
        it = run_stage(model, clips, stage, spec, rng, history, it, log_every)
    return history
