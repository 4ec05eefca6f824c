"""QK Co-learn steps, QK Iteration and the in-batch (SimCLR-style) baseline.

In a Q phase the key backbone is frozen: its outputs for every training key
are bulk-evaluated once into a binary16 store, and each step runs the
trainable key head over the whole store so the query batch is pushed against
all N key descriptors. A K phase swaps the roles, with the database being
the (deterministically regenerated) augmented queries.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as E
from .data import EvalSplit, SynthConfig, augment_all
from .errors import ConfigError, ContractError, NumericError
from .loss import LossConfig, contrastive_bce, loss_backward, mine_hard_negatives, score_matrix
from .metrics import evaluate_model
from .nn import AdamState, CosineSchedule, adam_update, cosine_lr
from .parallel import map_ordered, map_rows
from .store import DEFAULT_CHUNK_SIZE, IntermediateStore, store_write

log = logging.getLogger(__name__)


@dataclass
class PhaseSpec:
    kind: str  # "Q" or "K"
    max_steps: int
    eval_every: int = 0  # 0: evaluate only at the end of the phase
    plateau_window: int = 0  # 0: no early stopping
    plateau_min_rel_improve: float = 0.0
    name: str = ""

    def validate(self):
        if self.kind not in E.PHASES:
            raise ConfigError(f"phase kind must be Q or K, got {self.kind!r}")
        if self.max_steps < 1:
            raise ConfigError(f"phase {self.name or self.kind}: max_steps must be >= 1")
        if self.eval_every < 0 or self.plateau_window < 0:
            raise ConfigError("eval_every and plateau_window must be >= 0")
        if self.plateau_min_rel_improve < 0:
            raise ConfigError("plateau_min_rel_improve must be >= 0")


@dataclass
class PhaseSchedule:
    phases: list
    seed: int = 0

    def __post_init__(self):
        self.phases = [p if isinstance(p, PhaseSpec) else PhaseSpec(**p) for p in self.phases]
        counts = {"Q": 0, "K": 0}
        for p in self.phases:
            p.validate()
            counts[p.kind] += 1
            if not p.name:
                p.name = f"{p.kind}{counts[p.kind]}"
        if not self.phases:
            raise ConfigError("schedule has no phases")

    @classmethod
    def alternating(cls, n_phases: int, max_steps: int, seed: int = 0, **kw) -> "PhaseSchedule":
        kinds = ["Q" if i % 2 == 0 else "K" for i in range(n_phases)]
        return cls([PhaseSpec(k, max_steps, **kw) for k in kinds], seed)

    @property
    def total_steps(self) -> int:
        return sum(p.max_steps for p in self.phases)


@dataclass
class OptimConfig:
    lr0: float = 3e-3
    alpha: float = 0.5
    decay_steps: int | None = None  # None: each phase decays over its own budget
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class StepRecord:
    step: int
    phase: str
    kind: str
    lr: float
    L: float
    L_pos: float
    L_neg: float
    n_mined: int
    short_mine: bool
    wall_time: float = 0.0

    def log_dict(self) -> dict:
        """Deterministic fields only; wall time is logged separately."""
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainData:
    """Training inputs plus their fixed baseline descriptors."""

    keys: np.ndarray
    queries: np.ndarray
    base_keys: np.ndarray
    base_queries: np.ndarray
    key_tag: str
    query_tag: str

    @property
    def n(self) -> int:
        return len(self.keys)


def _tag(prefix: str, x: np.ndarray) -> str:
    return f"{prefix}:{hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest()[:16]}"


def prepare_train_data(keys, synth: SynthConfig, featurizer, workers: int = 1) -> TrainData:
    """Regenerate each key's augmented query (seeded per item index) and
    precompute both sides' baseline descriptors."""
    keys = np.asarray(keys, dtype=np.float64)
    queries = augment_all(keys, synth)

    def feat(x):
        return map_rows(lambda t: E.baseline_featurize(featurizer, t), x, workers=workers)

    return TrainData(
        keys, queries, feat(keys), feat(queries), _tag("keys", keys), _tag("queries", queries)
    )


@dataclass
class TrainState:
    q: E.EncoderParams
    k: E.EncoderParams
    featurizer: E.BaselineFeaturizer
    adam: dict = field(default_factory=dict)
    step: int = 0
    phase_index: int = 0
    phase_kind: str = "Q"
    current_store: object = None
    db_desc_cache: np.ndarray | None = None

    def sides(self):
        """(moving, frozen) encoders for the current phase."""
        return (self.q, self.k) if self.phase_kind == "Q" else (self.k, self.q)


def _side_data(data: TrainData, enc: E.EncoderParams):
    if enc.role == "query":
        return data.queries, data.base_queries, data.query_tag
    return data.keys, data.base_keys, data.key_tag


def bulk_evaluate(
    frozen: E.EncoderParams,
    inputs,
    chunk_size: int,
    path,
    dataset_tag: str,
    workers: int = 1,
) -> IntermediateStore:
    """Backbone outputs for every database item, written as a binary16 store
    tagged with the backbone's parameter hash."""
    if frozen.trainable_backbone:
        raise ContractError(f"{frozen.role} backbone must be frozen before bulk evaluation")
    inputs = np.asarray(inputs, dtype=np.float64)
    # computed over fixed row tiles, so chunk_size only affects the file layout
    inter = map_rows(lambda t: E.backbone_forward(frozen, t), inputs, workers=workers)
    blocks = (inter[lo : lo + chunk_size] for lo in range(0, len(inter), chunk_size))
    store = store_write(
        blocks, chunk_size, path, E.source_tag(frozen, dataset_tag), d_mid=frozen.d_mid
    )
    if store.n_rows != len(inputs):
        from .errors import FormatError

        raise FormatError(f"store has {store.n_rows} rows for {len(inputs)} inputs")
    return store


def check_store(state: TrainState, data: TrainData) -> None:
    _, frozen = state.sides()
    _, _, tag = _side_data(data, frozen)
    store = state.current_store
    if store is None or store.source_tag != E.source_tag(frozen, tag):
        raise ContractError(
            f"intermediate store is stale for the frozen {frozen.role} backbone"
        )


def _adam_step(state: TrainState, enc: E.EncoderParams, part: str, grads: list, lr: float, optim):
    group = enc.group(part)
    name = group.name
    if name not in state.adam:
        state.adam[name] = AdamState.zeros(group.size(), optim.beta1, optim.beta2, optim.eps)
    flat_grad = np.concatenate([g.ravel() for g in grads])
    new, state.adam[name] = adam_update(group.flat(), flat_grad, state.adam[name], lr, name)
    group.assign(new)


def _db_descriptors(frozen, store, base, workers):
    """Frozen-side head over every stored intermediate, one block per chunk."""

    def head(chunk_index):
        lo, hi = store.chunk_bounds(chunk_index)
        return E.head_forward(frozen, store.read_chunk(chunk_index), base[lo:hi])

    return map_ordered(head, range(store.n_chunks), workers)


def phase_step(
    state: TrainState,
    data: TrainData,
    batch_idx,
    loss_cfg: LossConfig,
    lr: float,
    optim: OptimConfig,
    workers: int = 1,
    refresh_db: bool = True,
    phase_name: str = "",
) -> StepRecord:
    """One co-learn step: moving-side batch against the whole frozen-side
    database; updates the moving encoder and the frozen encoder's head."""
    t0 = time.perf_counter()
    check_store(state, data)
    moving, frozen = state.sides()
    m_inputs, m_base, _ = _side_data(data, moving)
    _, f_base, _ = _side_data(data, frozen)
    store = state.current_store
    batch_idx = np.asarray(batch_idx, dtype=np.int64)

    cache = E.EncoderCache()
    x = m_inputs[batch_idx]
    inter = E.backbone_forward(moving, x, cache)
    batch_desc = E.head_forward(moving, inter, m_base[batch_idx], cache)

    if refresh_db or state.db_desc_cache is None:
        state.db_desc_cache = _db_descriptors(frozen, store, f_base, workers)
    db_parts = state.db_desc_cache

    sm = score_matrix(batch_desc, db_parts, loss_cfg.tau, batch_idx, workers)
    mined = mine_hard_negatives(sm, sm.B, loss_cfg.M, loss_cfg.mining)
    lb = contrastive_bce(sm, loss_cfg, mined)
    if not np.isfinite(lb.L):
        raise NumericError(
            f"non-finite loss at step {state.step} ({phase_name}): "
            f"L_pos={lb.L_pos} L_neg={lb.L_neg} batch={batch_idx.tolist()}"
        )
    db_desc = np.concatenate(db_parts) if len(db_parts) > 1 else db_parts[0]
    grads = loss_backward(sm, loss_cfg, mined, batch_desc, db_desc)

    moving_grads = E.encoder_backward(moving, cache, grads.grad_batch)
    f_cache = E.EncoderCache()
    cols = grads.db_cols
    f_inter = np.concatenate([store.read_chunk(i) for i in range(store.n_chunks)])[cols]
    E.head_forward(frozen, f_inter, f_base[cols], f_cache)
    frozen_head_grads, _ = E.head_backward(frozen, f_cache, grads.grad_db)

    for part, g in moving_grads.items():
        _adam_step(state, moving, part, g, lr, optim)
    if frozen.trainable_head:
        _adam_step(state, frozen, "head", frozen_head_grads, lr, optim)

    state.step += 1
    return StepRecord(
        state.step,
        phase_name,
        state.phase_kind,
        lr,
        lb.L,
        lb.L_pos,
        lb.L_neg,
        int(len(mined)),
        lb.short_mine,
        time.perf_counter() - t0,
    )


def simclr_step(
    state: TrainState,
    q_inputs,
    k_inputs,
    q_base,
    k_base,
    loss_cfg: LossConfig,
    lr: float,
    optim: OptimConfig,
    phase_name: str = "simclr",
) -> StepRecord:
    """In-batch baseline: both encoders fully trainable, the database is the
    batch's own B key descriptors, same loss and mining."""
    t0 = time.perf_counter()
    q, k = state.q, state.k
    for enc in (q, k):
        enc.trainable_backbone = enc.trainable_head = True
    q_cache, k_cache = E.EncoderCache(), E.EncoderCache()
    q_desc = E.head_forward(q, E.backbone_forward(q, q_inputs, q_cache), q_base, q_cache)
    k_desc = E.head_forward(k, E.backbone_forward(k, k_inputs, k_cache), k_base, k_cache)
    B = len(q_desc)
    sm = score_matrix(q_desc, [k_desc], loss_cfg.tau, np.arange(B))
    mined = mine_hard_negatives(sm, B, loss_cfg.M, loss_cfg.mining)
    lb = contrastive_bce(sm, loss_cfg, mined)
    if not np.isfinite(lb.L):
        raise NumericError(f"non-finite loss at step {state.step} ({phase_name})")
    grads = loss_backward(sm, loss_cfg, mined, q_desc, k_desc)
    q_grads = E.encoder_backward(q, q_cache, grads.grad_batch)
    k_grads = E.encoder_backward(k, k_cache, grads.dense_db(B))
    for enc, gs in ((q, q_grads), (k, k_grads)):
        for part, g in gs.items():
            _adam_step(state, enc, part, g, lr, optim)
    state.step += 1
    return StepRecord(
        state.step, phase_name, "S", lr, lb.L, lb.L_pos, lb.L_neg, int(len(mined)),
        lb.short_mine, time.perf_counter() - t0,
    )


# --- phases -----------------------------------------------------------------


def batch_stream(n: int, batch_size: int, seed: int, phase_index: int):
    """Endless shuffled epochs of item indices, seeded per phase."""
    rng = np.random.default_rng([seed, phase_index, 0xBA7C])
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield perm[lo : lo + batch_size]


def should_stop(history: list, window: int, min_rel: float) -> bool:
    """Plateau rule: stop when the best of the last ``window`` evaluations
    improved on the best before them by less than ``min_rel`` (relative).
    Improvement is clipped at zero, so ``min_rel == 0`` never stops."""
    if window <= 0 or len(history) <= window:
        return False
    before = max(history[:-window])
    recent = max(history[-window:])
    improve = max(0.0, recent - before) / max(abs(before), 1e-12)
    return improve < min_rel


@dataclass
class PhaseResult:
    name: str
    kind: str
    steps: int
    evals: list  # (step_in_phase, metrics dict)
    early_stopped: bool

    @property
    def final(self) -> dict:
        return self.evals[-1][1]


@dataclass
class RunConfig:
    """Everything a training run needs besides data and schedule."""

    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 32
    chunk_size: int = DEFAULT_CHUNK_SIZE
    head_refresh_every: int = 1
    workers: int = 1


class RunLog:
    """Collects step records, optionally mirroring them to JSON-lines files."""

    def __init__(self, out_dir=None, prior: int = 0):
        self.records: list = []
        self.count = prior
        self.out_dir = Path(out_dir) if out_dir else None

    def append(self, rec: StepRecord) -> None:
        self.records.append(rec)
        self.count += 1
        if self.out_dir:
            with open(self.out_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(rec.log_dict(), sort_keys=True) + "\n")
            with open(self.out_dir / "timing.jsonl", "a") as fh:
                fh.write(json.dumps({"step": rec.step, "wall_time": rec.wall_time}) + "\n")

    def event(self, name: str, payload: dict) -> None:
        if self.out_dir:
            with open(self.out_dir / "evals.jsonl", "a") as fh:
                fh.write(json.dumps({"event": name, **payload}, sort_keys=True) + "\n")


def run_phase(
    state: TrainState,
    phase: PhaseSpec,
    data: TrainData,
    split: EvalSplit,
    cfg: RunConfig,
    seed: int,
    runlog: RunLog | None = None,
) -> PhaseResult:
    phase.validate()
    runlog = runlog or RunLog()
    decay = cfg.optim.decay_steps or phase.max_steps
    sched = CosineSchedule(cfg.optim.lr0, decay, cfg.optim.alpha)
    batches = batch_stream(data.n, cfg.batch_size, seed, state.phase_index)
    history, evals = [], []
    stopped = False
    state.db_desc_cache = None
    steps = 0
    for t in range(phase.max_steps):
        rec = phase_step(
            state,
            data,
            next(batches),
            cfg.loss,
            cosine_lr(sched, t),
            cfg.optim,
            cfg.workers,
            refresh_db=t % cfg.head_refresh_every == 0,
            phase_name=phase.name,
        )
        runlog.append(rec)
        steps = t + 1
        if phase.eval_every and steps % phase.eval_every == 0 and steps < phase.max_steps:
            m = evaluate_model(state.q, state.k, state.featurizer, split, cfg.loss.tau, cfg.workers)
            evals.append((steps, m))
            history.append(m["mu_ap"])
            runlog.event("eval", {"phase": phase.name, "step_in_phase": steps, **m})
            if should_stop(history, phase.plateau_window, phase.plateau_min_rel_improve):
                stopped = True
                break
    m = evaluate_model(state.q, state.k, state.featurizer, split, cfg.loss.tau, cfg.workers)
    evals.append((steps, m))
    runlog.event("phase_end", {"phase": phase.name, "steps": steps, **m})
    log.info("phase %s: %d steps, mu_ap=%.4f", phase.name, steps, m["mu_ap"])
    return PhaseResult(phase.name, phase.kind, steps, evals, stopped)


# --- checkpoints of the whole trainer ---------------------------------------


def save_trainer_state(state: TrainState, rows: list, n_records: int, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    E.write_checkpoint(state.q, directory / "query.qkcp")
    E.write_checkpoint(state.k, directory / "key.qkcp")
    meta = {
        "step": state.step,
        "phase_index": state.phase_index,
        "n_log_records": n_records,
        "rows": rows,
        "adam": {},
    }
    blobs = []
    for name in sorted(state.adam):
        st = state.adam[name]
        meta["adam"][name] = {"n": int(st.m.size), "t": st.t, "betas": [st.beta1, st.beta2, st.eps]}
        blobs += [st.m.astype("<f8").tobytes(), st.v.astype("<f8").tobytes()]
    (directory / "adam.bin").write_bytes(b"".join(blobs))
    (directory / "trainer.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_trainer_state(directory, featurizer):
    directory = Path(directory)
    meta = json.loads((directory / "trainer.json").read_text())
    q = E.read_checkpoint(directory / "query.qkcp", "query")
    k = E.read_checkpoint(directory / "key.qkcp", "key")
    buf = (directory / "adam.bin").read_bytes()
    adam, pos = {}, 0
    for name in sorted(meta["adam"]):
        info = meta["adam"][name]
        n = info["n"]
        m = np.frombuffer(buf, "<f8", n, pos).astype(np.float64)
        v = np.frombuffer(buf, "<f8", n, pos + 8 * n).astype(np.float64)
        pos += 16 * n
        b1, b2, eps = info["betas"]
        adam[name] = AdamState(m, v, info["t"], b1, b2, eps)
    state = TrainState(q, k, featurizer, adam, meta["step"], meta["phase_index"])
    return state, meta


def _phase_dir(root, i, phase) -> Path:
    return Path(root) / "checkpoints" / f"{i + 1:02d}_{phase.name}"


def run_qk_iteration(
    schedule: PhaseSchedule,
    state: TrainState,
    data: TrainData,
    split: EvalSplit,
    cfg: RunConfig,
    out_dir=None,
    resume: bool = False,
    stop_after: int | None = None,
):
    """Alternate phases per ``schedule``. Returns ``(state, rows, results)``
    where ``rows`` is the per-phase evaluation table.

    With ``out_dir`` set, each finished phase writes both encoders, the
    optimizer state and the table so far; ``resume`` picks up after the last
    finished phase. ``stop_after`` ends the run early after that many phases
    (used to simulate an interruption).
    """
    tmp = None
    if out_dir is None:
        tmp = tempfile.mkdtemp(prefix="qkiter-")
        store_dir = Path(tmp)
    else:
        out_dir = Path(out_dir)
        store_dir = out_dir / "stores"
        store_dir.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(out_dir)
    rows, results = [], []
    start = 0
    if resume and out_dir is not None:
        done = [
            i
            for i, p in enumerate(schedule.phases)
            if (_phase_dir(out_dir, i, p) / "trainer.json").exists()
        ]
        if done:
            last = max(done)
            loaded, meta = load_trainer_state(
                _phase_dir(out_dir, last, schedule.phases[last]), state.featurizer
            )
            state.q, state.k, state.adam, state.step = loaded.q, loaded.k, loaded.adam, loaded.step
            rows = meta["rows"]
            start = last + 1
            _truncate_logs(out_dir, meta["n_log_records"], rows)
            runlog.count = meta["n_log_records"]
    elif out_dir is not None:
        for name in ("train_log.jsonl", "timing.jsonl", "evals.jsonl"):
            (out_dir / name).unlink(missing_ok=True)

    try:
        for i in range(start, len(schedule.phases)):
            if stop_after is not None and i >= stop_after:
                break
            phase = schedule.phases[i]
            prev = schedule.phases[i - 1].kind if i > 0 else None
            state.phase_index = i
            state.phase_kind = phase.kind
            moving, frozen = state.sides()
            E.set_phase_trainability(state.q, state.k, phase.kind)
            if prev != phase.kind:
                # backbone comes out of a frozen interval: fresh moments
                state.adam.pop(moving.group("backbone").name, None)
            inputs, _, tag = _side_data(data, frozen)
            state.current_store = bulk_evaluate(
                frozen,
                inputs,
                cfg.chunk_size,
                store_dir / f"{i + 1:02d}_{phase.name}_{frozen.role}.qkis",
                tag,
                cfg.workers,
            )
            res = run_phase(state, phase, data, split, cfg, schedule.seed, runlog)
            results.append(res)
            rows.append(
                {
                    "phase": res.name,
                    "kind": res.kind,
                    "steps": res.steps,
                    "mu_ap": res.final["mu_ap"],
                    "macro_ap": res.final["macro_ap"],
                    "early_stopped": res.early_stopped,
                }
            )
            if out_dir is not None:
                save_trainer_state(state, rows, runlog.count, _phase_dir(out_dir, i, phase))
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
    return state, rows, results


def _truncate_logs(out_dir: Path, n_records: int, rows: list) -> None:
    def keep(path, n):
        if path.exists():
            lines = path.read_text().splitlines(keepends=True)[:n]
            path.write_text("".join(lines))

    keep(out_dir / "train_log.jsonl", n_records)
    keep(out_dir / "timing.jsonl", n_records)
    evals = out_dir / "evals.jsonl"
    if evals.exists():
        finished = {r["phase"] for r in rows}
        lines = []
        for line in evals.read_text().splitlines(keepends=True):
            if json.loads(line)["phase"] in finished:
                lines.append(line)
        evals.write_text("".join(lines))


def run_simclr(
    state: TrainState,
    data: TrainData,
    split: EvalSplit,
    cfg: RunConfig,
    steps: int,
    seed: int,
    lr0: float | None = None,
    eval_every: int = 0,
    out_dir=None,
):
    """In-batch baseline loop. Returns ``(state, evals)`` with
    ``evals`` a list of (step, metrics)."""
    runlog = RunLog(out_dir)
    if out_dir is not None:
        for name in ("train_log.jsonl", "timing.jsonl", "evals.jsonl"):
            (Path(out_dir) / name).unlink(missing_ok=True)
    sched = CosineSchedule(lr0 or cfg.optim.lr0, cfg.optim.decay_steps or steps, cfg.optim.alpha)
    batches = batch_stream(data.n, cfg.batch_size, seed, 0)
    evals = []
    for t in range(steps):
        idx = next(batches)
        rec = simclr_step(
            state,
            data.queries[idx],
            data.keys[idx],
            data.base_queries[idx],
            data.base_keys[idx],
            cfg.loss,
            cosine_lr(sched, t),
            cfg.optim,
        )
        runlog.append(rec)
        if (eval_every and (t + 1) % eval_every == 0) or t + 1 == steps:
            m = evaluate_model(state.q, state.k, state.featurizer, split, cfg.loss.tau, cfg.workers)
            evals.append((t + 1, m))
            runlog.event("eval", {"phase": "simclr", "step_in_phase": t + 1, **m})
    return state, evals
