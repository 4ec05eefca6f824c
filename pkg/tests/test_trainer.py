import json

import numpy as np
import pytest

from qkiter import encoder as E
from qkiter.data import SynthConfig, build_eval_split, generate_keys
from qkiter.errors import ConfigError, ContractError, NumericError
from qkiter.loss import LossConfig
from qkiter.store import ArrayStore, decode_half, encode_half, open_store
from qkiter.trainer import (
    OptimConfig,
    PhaseSchedule,
    PhaseSpec,
    RunConfig,
    TrainState,
    bulk_evaluate,
    phase_step,
    prepare_train_data,
    run_phase,
    run_qk_iteration,
    run_simclr,
    should_stop,
    simclr_step,
)

SYNTH = SynthConfig(n_keys=256, d_in=8, n_clusters=16)
LOSS = LossConfig(M=4)
OPTIM = OptimConfig(lr0=3e-3)


@pytest.fixture(scope="module")
def world():
    keys = generate_keys(SYNTH)
    split = build_eval_split(SYNTH, 20, 10, 10)
    fz = E.build_featurizer(3, keys, 12, 4)
    data = prepare_train_data(keys, SYNTH, fz)
    return data, split, fz


def fresh_state(data, fz, seed=1):
    q = E.init_encoder("query", data.queries, 16, 8, 8, 4, seed)
    k = E.init_encoder("key", data.keys, 16, 8, 8, 4, seed)
    return TrainState(q, k, fz)


def start_phase(state, data, kind, path, chunk_size=100):
    state.phase_kind = kind
    E.set_phase_trainability(state.q, state.k, kind)
    _, frozen = state.sides()
    inputs, tag = (data.keys, data.key_tag) if frozen.role == "key" else (data.queries, data.query_tag)
    state.current_store = bulk_evaluate(frozen, inputs, chunk_size, path, tag)


def backbone_bytes(enc):
    return enc.group("backbone").flat().tobytes() + enc.norm_mean.tobytes() + enc.norm_var.tobytes()


def run_cfg(**kw):
    return RunConfig(LOSS, OPTIM, **{"batch_size": 8, "chunk_size": 100, **kw})


def test_schedule_validation():
    s = PhaseSchedule.alternating(3, 10)
    assert [p.name for p in s.phases] == ["Q1", "K1", "Q2"]
    assert s.total_steps == 30
    with pytest.raises(ConfigError):
        PhaseSchedule([PhaseSpec("Q", 0)])
    with pytest.raises(ConfigError):
        PhaseSchedule([PhaseSpec("X", 5)])
    with pytest.raises(ConfigError):
        PhaseSchedule([])


def test_bulk_evaluate_layout_and_values(world, tmp_path):
    data, _, fz = world
    state = fresh_state(data, fz)
    E.set_phase_trainability(state.q, state.k, "Q")
    store = bulk_evaluate(state.k, data.keys[:10], 4, tmp_path / "a.qkis", data.key_tag)
    assert store.n_rows == 10 and store.n_chunks == 3
    assert [store.chunk_bounds(i) for i in range(3)] == [(0, 4), (4, 8), (8, 10)]
    direct = E.backbone_forward(state.k, data.keys[:10])
    assert store.read_all().tobytes() == decode_half(encode_half(direct)).tobytes()
    bulk_evaluate(state.k, data.keys[:10], 4, tmp_path / "b.qkis", data.key_tag)
    assert (tmp_path / "a.qkis").read_bytes() == (tmp_path / "b.qkis").read_bytes()


def test_bulk_evaluate_chunking_only_changes_layout(world, tmp_path):
    data, _, fz = world
    state = fresh_state(data, fz)
    E.set_phase_trainability(state.q, state.k, "Q")
    a = bulk_evaluate(state.k, data.keys, 7, tmp_path / "a.qkis", data.key_tag)
    b = bulk_evaluate(state.k, data.keys, 1000, tmp_path / "b.qkis", data.key_tag)
    assert a.read_all().tobytes() == b.read_all().tobytes()


def test_bulk_evaluate_requires_frozen_backbone(world, tmp_path):
    data, _, fz = world
    state = fresh_state(data, fz)
    with pytest.raises(ContractError):
        bulk_evaluate(state.k, data.keys, 100, tmp_path / "s.qkis", data.key_tag)


def test_stale_store_rejected(world, tmp_path):
    data, _, fz = world
    state = fresh_state(data, fz)
    start_phase(state, data, "Q", tmp_path / "s.qkis")
    state.k.backbone_layers[0].weight[0, 0] += 1e-9
    with pytest.raises(ContractError):
        phase_step(state, data, np.arange(8), LOSS, 1e-3, OPTIM)


def test_phase_step_deterministic(world, tmp_path):
    data, _, fz = world
    records = []
    for i in range(2):
        state = fresh_state(data, fz)
        start_phase(state, data, "Q", tmp_path / f"{i}.qkis")
        recs = [phase_step(state, data, np.arange(8) + 8 * t, LOSS, 1e-3, OPTIM) for t in range(3)]
        records.append([r.log_dict() for r in recs] + [E.checkpoint_bytes(state.q)])
    assert records[0] == records[1]


@pytest.mark.parametrize("kind", ["Q", "K"])
def test_freeze_integrity_and_gradient_reach(world, tmp_path, kind):
    data, _, fz = world
    state = fresh_state(data, fz)
    start_phase(state, data, kind, tmp_path / "s.qkis")
    moving, frozen = state.sides()
    frozen_bb, frozen_head = backbone_bytes(frozen), frozen.group("head").flat().copy()
    moving_bb = backbone_bytes(moving)
    for t in range(20):
        phase_step(state, data, np.arange(8) + 8 * t, LOSS, 3e-3, OPTIM)
    assert backbone_bytes(frozen) == frozen_bb
    assert backbone_bytes(moving) != moving_bb
    assert not np.array_equal(frozen.group("head").flat(), frozen_head)
    assert f"{frozen.role}.backbone" not in state.adam


def test_single_positive_descent(world, tmp_path):
    data, _, fz = world
    state = fresh_state(data, fz)
    start_phase(state, data, "Q", tmp_path / "s.qkis")
    losses = [phase_step(state, data, [5], LOSS, 1e-3, OPTIM).L for _ in range(50)]
    assert losses[-1] < losses[0]
    assert np.all(np.diff(losses) < 0)


def test_non_finite_loss_raises(world, tmp_path):
    data, _, fz = world
    state = fresh_state(data, fz)
    start_phase(state, data, "Q", tmp_path / "s.qkis")
    state.q.head_layers[-1].bias[:] = np.nan
    with pytest.raises(NumericError, match="step 0"):
        phase_step(state, data, np.arange(8), LOSS, 1e-3, OPTIM)


def test_should_stop_semantics():
    assert not should_stop([0.1, 0.2, 0.2, 0.2], 2, 0.0)
    assert not should_stop([0.1, 0.1], 5, 0.5)
    assert should_stop([0.5, 0.4, 0.45], 2, 0.01)
    assert not should_stop([0.5, 0.4, 0.6], 2, 0.01)
    assert should_stop([0.5, 0.501], 1, 0.01)
    assert not should_stop([0.5, 0.6], 0, 1.0)


def test_run_phase_plateau(world, tmp_path):
    data, split, fz = world
    cfg = run_cfg()
    state = fresh_state(data, fz)
    start_phase(state, data, "Q", tmp_path / "s.qkis")
    res = run_phase(state, PhaseSpec("Q", 40, 5, 1, 10.0, "Q1"), data, split, cfg, 0)
    assert res.early_stopped and res.steps == 10
    state = fresh_state(data, fz)
    start_phase(state, data, "Q", tmp_path / "t.qkis")
    res = run_phase(state, PhaseSpec("Q", 20, 5, 50, 10.0, "Q1"), data, split, cfg, 0)
    assert not res.early_stopped and res.steps == 20
    assert [s for s, _ in res.evals] == [5, 10, 15, 20]


def test_iteration_store_count_and_tags(world, tmp_path):
    data, split, fz = world
    state = fresh_state(data, fz)
    q_init_tag = E.source_tag(state.q, data.query_tag)
    sched = PhaseSchedule([PhaseSpec("Q", 5)])
    run_qk_iteration(sched, state, data, split, run_cfg(), tmp_path / "a")
    assert len(list((tmp_path / "a" / "stores").iterdir())) == 1
    state = fresh_state(data, fz)
    sched = PhaseSchedule([PhaseSpec("Q", 5), PhaseSpec("K", 5)])
    run_qk_iteration(sched, state, data, split, run_cfg(), tmp_path / "b")
    stores = sorted((tmp_path / "b" / "stores").iterdir())
    assert [p.name for p in stores] == ["01_Q1_key.qkis", "02_K1_query.qkis"]
    assert open_store(stores[1]).source_tag != q_init_tag


def test_backbone_adam_reset_after_frozen_interval(world):
    data, split, fz = world
    state = fresh_state(data, fz)
    sched = PhaseSchedule.alternating(3, 6)
    state, rows, _ = run_qk_iteration(sched, state, data, split, run_cfg())
    assert state.adam["query.backbone"].t == 6
    assert state.adam["key.backbone"].t == 6
    assert state.adam["query.head"].t == 18
    assert [r["phase"] for r in rows] == ["Q1", "K1", "Q2"]


def _run_files(world, out, **kw):
    data, split, fz = world
    state = fresh_state(data, fz)
    sched = PhaseSchedule.alternating(3, 8, seed=4)
    run_qk_iteration(sched, state, data, split, run_cfg(**kw), out)
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "timing.jsonl":
            files[str(p.relative_to(out))] = p.read_bytes()
    return files


def test_run_deterministic_across_workers_and_chunks(world, tmp_path):
    a = _run_files(world, tmp_path / "a")
    b = _run_files(world, tmp_path / "b", workers=3)
    c = _run_files(world, tmp_path / "c", chunk_size=37)
    assert a == b
    # store files differ in layout only; logs and checkpoints must not
    strip = lambda d: {k: v for k, v in d.items() if not k.startswith("stores")}
    assert strip(a) == strip(c)
    assert len(a["train_log.jsonl"].splitlines()) == 24


def test_resume_matches_uninterrupted(world, tmp_path):
    data, split, fz = world
    sched = PhaseSchedule.alternating(3, 8, seed=4)
    full = _run_files(world, tmp_path / "full")
    out = tmp_path / "cut"
    run_qk_iteration(sched, fresh_state(data, fz), data, split, run_cfg(), out, stop_after=2)
    # a partially written record from the crashed phase must be dropped
    with open(out / "train_log.jsonl", "a") as fh:
        fh.write('{"partial": true}\n')
    state, rows, _ = run_qk_iteration(
        sched, fresh_state(data, fz, seed=99), data, split, run_cfg(), out, resume=True
    )
    resumed = {
        str(p.relative_to(out)): p.read_bytes()
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "timing.jsonl"
    }
    assert resumed == full
    assert [r["phase"] for r in rows] == ["Q1", "K1", "Q2"]


def test_head_refresh_interval(world, tmp_path):
    data, split, fz = world
    state = fresh_state(data, fz)
    sched = PhaseSchedule([PhaseSpec("Q", 6)])
    state, rows, _ = run_qk_iteration(sched, state, data, split, run_cfg(head_refresh_every=3))
    assert rows[0]["steps"] == 6


def test_simclr_counting_and_no_freezing(world):
    data, _, fz = world
    state = fresh_state(data, fz)
    before = backbone_bytes(state.q), backbone_bytes(state.k)
    idx = np.array([0, 1])
    args = (data.queries[idx], data.keys[idx], data.base_queries[idx], data.base_keys[idx])
    rec = simclr_step(state, *args, LossConfig(M=1), 1e-3, OPTIM)
    assert rec.n_mined == 2 and not rec.short_mine
    # the zero final head layer blocks backbone gradients on the first step
    assert backbone_bytes(state.q) == before[0]
    simclr_step(state, *args, LossConfig(M=1), 1e-3, OPTIM)
    assert backbone_bytes(state.q) != before[0] and backbone_bytes(state.k) != before[1]


def test_simclr_equals_restricted_phase_step(world):
    """With the database cut down to the batch's own keys, a co-learn step
    and an in-batch step give the same loss and the same updates to every
    parameter group they share."""
    data, _, fz = world
    idx = np.arange(8) * 3
    base = fresh_state(data, fz)
    sub = prepare_train_data(data.keys[idx], SYNTH, fz)
    sub.queries = data.queries[idx]
    sub.base_queries = data.base_queries[idx]
    qk = TrainState(base.q.copy(), base.k.copy(), fz)
    qk.phase_kind = "Q"
    E.set_phase_trainability(qk.q, qk.k, "Q")
    sc = TrainState(base.q.copy(), base.k.copy(), fz)
    pairs = (data.queries[idx], data.keys[idx], data.base_queries[idx], data.base_keys[idx])
    # two steps: the first only moves the zero-initialized final head layers
    for _ in range(2):
        inter = E.backbone_forward(qk.k, sub.keys)
        qk.current_store = ArrayStore(inter, 3, E.source_tag(qk.k, sub.key_tag))
        rec_qk = phase_step(qk, sub, np.arange(8), LOSS, 1e-3, OPTIM)
        rec_sc = simclr_step(sc, *pairs, LOSS, 1e-3, OPTIM)
        assert rec_qk.L == rec_sc.L
        assert (rec_qk.L_pos, rec_qk.L_neg, rec_qk.n_mined) == (rec_sc.L_pos, rec_sc.L_neg, rec_sc.n_mined)
        for part in ("backbone", "head"):
            assert qk.q.group(part).flat().tobytes() == sc.q.group(part).flat().tobytes()
        assert qk.k.group("head").flat().tobytes() == sc.k.group("head").flat().tobytes()
    assert qk.k.group("backbone").flat().tobytes() != sc.k.group("backbone").flat().tobytes()


def test_simclr_run_writes_no_stores(world, tmp_path):
    data, split, fz = world
    state, evals = run_simclr(fresh_state(data, fz), data, split, run_cfg(), 10, 0, None, 5, tmp_path)
    assert [s for s, _ in evals] == [5, 10]
    assert not (tmp_path / "stores").exists()
    recs = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == list(range(1, 11))
