"""Training loop: curriculum-driven batches, Adam, clipping, gradient noise,
parameter-set relaxation, and multi-seed sweeps."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .curriculum import CurriculumSchedule, CurriculumState, base_stage_sequence, operand_count_sampler
from .errors import ContractViolation, NumericError
from .model import ModelConfig, ParameterBank, collapse_param_sets, decode, forward, relaxation_penalty
from .tasks import (Example, TaskSpec, encode, gen_expression, gen_k_mul, gen_pair, k_mul_width)

log = logging.getLogger(__name__)

# Independent RNG streams derived from (seed, step, stream).
DATA_STREAM, DROPOUT_STREAM, NOISE_STREAM, LENGTH_STREAM = 0, 1, 2, 3


@dataclass
class GradNoise:
    enabled: bool = False
    scale: float = 0.01
    decay: float = 0.55


@dataclass
class RelaxationSchedule:
    initial: float = 1e-4
    growth: float = 2.0
    interval: int = 2000
    max_weight: float = 1.0
    threshold: float = 0.15


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: str = "add"
    representation: str = "padded"
    curriculum: str = "direct2"
    min_length: int = 1
    max_length: int = 12
    threshold: float = 0.15
    ema_decay: float = 0.99
    min_batches: int = 20
    reset_length_on_stage: bool = True
    current_length_prob: float = 0.5
    learning_rate: float = 1e-3
    # learning rate once the last curriculum stage is complete; None keeps learning_rate
    completion_learning_rate: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 1000
    clip_norm: float = 5.0
    grad_noise: GradNoise = field(default_factory=GradNoise)
    relaxation: RelaxationSchedule = field(default_factory=RelaxationSchedule)
    seed: int = 0
    memory: str = "stored"
    stop_at_completion: bool = False
    log_every: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractViolation("learning_rate must be >= 0")
        if self.completion_learning_rate is not None and self.completion_learning_rate < 0:
            raise ContractViolation("completion_learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.clip_norm <= 0:
            raise ContractViolation("clip_norm must be > 0")
        if self.memory not in ("stored", "recompute"):
            raise ContractViolation(f"memory must be 'stored' or 'recompute', got {self.memory!r}")
        if not 0.0 <= self.current_length_prob <= 1.0:
            raise ContractViolation("current_length_prob must be in [0, 1]")
        if self.max_steps < 0:
            raise ContractViolation("max_steps must be >= 0")
        TaskSpec(self.task, 2, self.representation, max(self.min_length, 1))
        self.schedule()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def schedule(self) -> CurriculumSchedule:
        sched = base_stage_sequence(self.curriculum, self.task, self.min_length, self.max_length,
                                    self.threshold, self.representation)
        sched.reset_length_on_stage = self.reset_length_on_stage
        return sched


# -- batches ----------------------------------------------------------------

def make_example(task: str, base: int, length: int, representation: str, rng: np.random.Generator) -> Example:
    if task in ("add", "mul"):
        return gen_pair(TaskSpec(task, base, representation, length), rng)
    if task == "k_mul":
        return gen_k_mul(length, base, rng, operand_count_sampler if length >= 3 else 1)
    if task == "expression":
        return gen_expression(length, base, rng)
    raise ContractViolation(f"unknown task {task!r}")


def batch_arrays(batch: Sequence[Example]):
    """Stack a batch into ``(inputs, targets, second_rows or None)``."""
    if not batch:
        raise ContractViolation("empty batch")
    n = len(batch[0].input)
    if any(len(ex.input) != n or len(ex.target) != n for ex in batch):
        raise ContractViolation("batch examples must share one input length")
    inputs = np.stack([encode(ex.input) for ex in batch])
    targets = np.stack([encode(ex.target) for ex in batch])
    second = None
    if batch[0].second_row is not None:
        second = np.stack([encode(ex.second_row) for ex in batch])
    return inputs, targets, second


def sequence_errors(logits, targets: np.ndarray) -> np.ndarray:
    """Per-example flag: any position decoded wrong."""
    return (decode(logits) != targets).any(axis=-1)


# -- optimizer --------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Sequence[tuple[str, T.Tensor]], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params:
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_arrays(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self.m[key[6:]] = np.array(arr)
            elif key.startswith("opt.v."):
                self.v[key[6:]] = np.array(arr)

    def merge_collapsed(self, bank: ParameterBank) -> None:
        """Average per-set moments onto the shared names after a collapse."""
        live = {name for name, _ in bank.parameters()}
        for store in (self.m, self.v):
            groups: dict[str, list[np.ndarray]] = {}
            for name, arr in store.items():
                if name.startswith("set"):
                    groups.setdefault(name.split(".", 1)[1], []).append(arr)
            for rest, arrs in groups.items():
                store[f"set0.{rest}"] = np.mean(np.stack(arrs), axis=0).astype(arrs[0].dtype)
            for name in list(store):
                if name not in live:
                    del store[name]


# -- single step ------------------------------------------------------------

def _stream(seed: int, step: int, stream: int) -> list[int]:
    return [int(seed), int(step), int(stream)]


def train_step(bank: ParameterBank, batch: Sequence[Example], config: TrainConfig, step: int,
               optimizer: Adam, relaxation_weight: float = 0.0) -> dict:
    """One forward/backward/update. Returns loss, gradient norms and batch
    sequence error."""
    inputs, targets, second = batch_arrays(batch)
    tape = T.Tape()
    with tape:
        logits = forward(inputs, bank, "train", second_row=second,
                         dropout_seed=_stream(config.seed, step, DROPOUT_STREAM), memory=config.memory)
        ce = T.cross_entropy(logits, targets)
        loss = ce
        use_penalty = relaxation_weight > 0 and bank.config.param_sets > 1 and not bank.collapsed
        if use_penalty:
            loss = ce + relaxation_penalty(bank) * relaxation_weight
    if not np.isfinite(loss.data):
        raise NumericError("loss")
    bank.zero_grad()
    tape.backward(loss)

    params = bank.parameters()
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params}
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if not np.isfinite(norm):
        first = next(name for name, g in grads.items() if not np.isfinite(g).all())
        raise NumericError(f"gradient of {first}")
    if norm > config.clip_norm:
        factor = config.clip_norm / norm
        grads = {k: g * np.asarray(factor, dtype=g.dtype) for k, g in grads.items()}
    clipped = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if config.grad_noise.enabled:
        sigma = config.grad_noise.scale / (1.0 + step) ** config.grad_noise.decay
        rng = np.random.default_rng(_stream(config.seed, step, NOISE_STREAM))
        grads = {k: g + rng.normal(0.0, sigma, g.shape).astype(g.dtype) for k, g in grads.items()}
    optimizer.step(params, grads)
    errors = sequence_errors(logits, targets)
    return {"loss": float(loss.data), "cross_entropy": float(ce.data), "grad_norm": norm,
            "clipped_norm": clipped, "seq_error": float(errors.mean())}


# -- relaxation -------------------------------------------------------------

@dataclass
class RelaxationState:
    weight: float
    qualifying_steps: int = 0
    collapsed: bool = False


def anneal_relaxation(bank: ParameterBank, schedule: RelaxationSchedule, state: RelaxationState,
                      training_error: float) -> tuple[RelaxationState, ParameterBank, list[dict]]:
    """Grow the pull-to-mean weight while training error is low; collapse the
    sets once the weight reaches ``schedule.max_weight``."""
    events: list[dict] = []
    if state.collapsed or bank.config.param_sets == 1:
        return state, bank, events
    if training_error < schedule.threshold:
        state.qualifying_steps += 1
        if state.qualifying_steps % schedule.interval == 0:
            state.weight *= schedule.growth
            events.append({"event": "relaxation_growth", "weight": state.weight})
    if state.weight >= schedule.max_weight:
        bank = collapse_param_sets(bank)
        state.collapsed = True
        events.append({"event": "collapse", "weight": state.weight})
    return state, bank, events


# -- runs -------------------------------------------------------------------

@dataclass
class RunRecord:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    seq_error: list[float] = field(default_factory=list)
    length: list[int] = field(default_factory=list)
    base: list[int] = field(default_factory=list)
    relaxation_weight: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    final_checkpoint: bytes | None = None
    final_step: int = 0
    wall_time: float = 0.0
    status: str = "completed"
    error: str | None = None
    bank: ParameterBank | None = None
    curriculum: dict = field(default_factory=dict)

    def summary(self) -> dict:
        tail = self.seq_error[-100:]
        return {"status": self.status, "error": self.error, "final_step": self.final_step,
                "final_length": self.length[-1] if self.length else None,
                "final_base": self.base[-1] if self.base else None,
                "recent_seq_error": float(np.mean(tail)) if tail else None,
                "checkpoints": self.checkpoints, "wall_time": self.wall_time,
                "curriculum": self.curriculum}


class _EventLog:
    def __init__(self, path: Path | None, append: bool = False):
        self.fh = open(path, "a" if append else "w", buffering=1) if path else None

    def write(self, record: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _rng_state(seed: int, step: int) -> dict:
    gen = np.random.default_rng(_stream(seed, step + 1, DATA_STREAM))
    state = gen.bit_generator.state
    return {"seed": seed, "next_step": step + 1, "stream": [seed, step + 1, DATA_STREAM],
            "bit_generator": state["bit_generator"], "state": {k: str(v) for k, v in state["state"].items()}}


def _snapshot(bank, config, step, optimizer, curriculum, relax) -> ckpt_io.Checkpoint:
    state = {"step": step, "adam_t": optimizer.t, "curriculum": curriculum.to_dict(),
             "relaxation": asdict(relax)}
    return ckpt_io.from_bank(bank, config.to_dict(), _rng_state(config.seed, step), state,
                             optimizer.state_arrays())


def _pick_length(config: TrainConfig, curriculum: CurriculumState, step: int) -> int:
    stage = curriculum.stage
    rng = np.random.default_rng(_stream(config.seed, step, LENGTH_STREAM))
    if curriculum.length == stage.min_length or rng.random() < config.current_length_prob:
        return curriculum.length
    return int(rng.integers(stage.min_length, curriculum.length + 1))


def _make_batch(config: TrainConfig, base: int, length: int, step: int) -> list[Example]:
    rng = np.random.default_rng(_stream(config.seed, step, DATA_STREAM))
    return [make_example(config.task, base, length, config.representation, rng)
            for _ in range(config.batch_size)]


def run_training(config: TrainConfig, run_dir=None, resume_from=None,
                 schedule: CurriculumSchedule | None = None) -> RunRecord:
    """Train from ``config.seed`` (or resume a checkpoint) until
    ``config.max_steps``. Fully reproducible from ``(config, seed)``.

    With ``run_dir`` the directory receives ``config.json``,
    ``events.jsonl``, ``checkpoints/step-NNNNNNN.ckpt`` and ``summary.json``.
    """
    t0 = time.perf_counter()
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    schedule = schedule or config.schedule()
    curriculum = CurriculumState(schedule, ema_decay=config.ema_decay, min_batches=config.min_batches)
    optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    relax = RelaxationState(config.relaxation.initial)
    start = 0
    if resume_from is not None:
        ck = resume_from if isinstance(resume_from, ckpt_io.Checkpoint) else ckpt_io.load(resume_from)
        bank = ck.bank()
        if bank.config != config.model:
            raise ContractViolation("checkpoint model config does not match the run config")
        start = int(ck.state["step"])
        optimizer.load_arrays(int(ck.state["adam_t"]), {k: v for k, v in ck.tensors.items() if k.startswith("opt.")})
        curriculum.load_dict(ck.state["curriculum"])
        relax = RelaxationState(**ck.state["relaxation"])
    else:
        bank = ParameterBank.initialize(config.model, [config.seed, 0xB0A7])

    record = RunRecord()
    events = _EventLog(run_dir / "events.jsonl" if run_dir else None, append=resume_from is not None)

    def save(step: int, tag: str) -> None:
        snap = _snapshot(bank, config, step, optimizer, curriculum, relax)
        blob = ckpt_io.dumps(snap)
        record.final_checkpoint = blob
        if run_dir:
            path = run_dir / "checkpoints" / f"step-{step:07d}.ckpt"
            path.write_bytes(blob)
            record.checkpoints.append(str(path))
            events.write({"event": "checkpoint", "step": step, "tag": tag, "path": str(path)})

    step = start
    try:
        for step in range(start + 1, config.max_steps + 1):
            stage = curriculum.stage
            length = _pick_length(config, curriculum, step)
            if curriculum.complete and config.completion_learning_rate is not None:
                optimizer.lr = config.completion_learning_rate
            batch = _make_batch(config, stage.base, length, step)
            metrics = train_step(bank, batch, config, step, optimizer,
                                 0.0 if relax.collapsed else relax.weight)
            if length == curriculum.length:
                transitions = curriculum.update(metrics["seq_error"], step)
            else:
                transitions = []
            relax, bank, relax_events = anneal_relaxation(bank, config.relaxation, relax, curriculum.recent_error)
            if relax.collapsed and any(e["event"] == "collapse" for e in relax_events):
                optimizer.merge_collapsed(bank)
            penalty = float(relaxation_penalty(bank).data) if bank.config.param_sets > 1 else 0.0
            record.steps.append(step)
            record.loss.append(metrics["loss"])
            record.seq_error.append(metrics["seq_error"])
            record.length.append(length)
            record.base.append(stage.base)
            record.relaxation_weight.append(relax.weight)
            record.penalty.append(penalty)
            if step % config.log_every == 0:
                events.write({"event": "step", "step": step, "length": length, "base": stage.base,
                              "curriculum_length": curriculum.length, "relaxation_weight": relax.weight,
                              "penalty": penalty, **metrics})
            for ev in transitions + [dict(e, step=step) for e in relax_events]:
                record.events.append(ev)
                events.write(ev)
                log.info("step %d: %s", step, ev)
            if any(e["event"] == "stage_complete" for e in transitions):
                save(step, "stage")
            if curriculum.complete and config.stop_at_completion:
                break
        else:
            step = max(start, config.max_steps)
    except (NumericError, ContractViolation) as exc:
        record.status = "aborted"
        record.error = f"{type(exc).__name__}: {exc}"
        events.write({"event": "abort", "step": step, "error": record.error})
        step -= 1
    record.final_step = max(step, start)
    save(record.final_step, "final")
    record.bank = bank
    record.curriculum = curriculum.to_dict()
    record.wall_time = time.perf_counter() - t0
    if run_dir:
        (run_dir / "summary.json").write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n")
    events.close()
    return record


# -- sweeps -----------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    passed: bool
    metric: float | None = None
    error: str | None = None
    run_dir: str | None = None
    final_step: int = 0
    checkpoint_sha: str | None = None


@dataclass
class SweepResult:
    fraction: float
    results: list[SeedResult]

    @property
    def failures(self) -> list[SeedResult]:
        return [r for r in self.results if r.error is not None]


def _sweep_one(args) -> SeedResult:
    import hashlib

    config, seed, criterion, trainer, run_root = args
    cfg = replace(config, seed=seed)
    run_dir = str(Path(run_root) / f"seed-{seed}") if run_root else None
    try:
        record = trainer(cfg, run_dir)
        if getattr(record, "status", "completed") != "completed":
            return SeedResult(seed, False, error=record.error, run_dir=run_dir,
                              final_step=getattr(record, "final_step", 0))
        verdict = criterion(record, cfg)
        passed, metric = verdict if isinstance(verdict, tuple) else (bool(verdict), None)
        sha = None
        blob = getattr(record, "final_checkpoint", None)
        if blob:
            sha = hashlib.sha256(blob).hexdigest()
        return SeedResult(seed, bool(passed), metric, None, run_dir, getattr(record, "final_step", 0), sha)
    except Exception as exc:  # a failing seed must not stop the sweep
        return SeedResult(seed, False, error=f"{type(exc).__name__}: {exc}", run_dir=run_dir)


def multi_seed_sweep(config: TrainConfig, seeds: Sequence[int], criterion: Callable,
                     trainer: Callable = run_training, run_root=None, parallelism: int = 1) -> SweepResult:
    """Train once per seed and report the fraction meeting ``criterion``.

    ``criterion(record, config)`` returns a bool or ``(bool, metric)``.
    Results are ordered as ``seeds`` regardless of ``parallelism``.
    """
    if not seeds:
        raise ContractViolation("a sweep needs at least one seed")
    jobs = [(config, int(s), criterion, trainer, run_root) for s in seeds]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(job) for job in jobs]
    return SweepResult(sum(r.passed for r in results) / len(results), results)
