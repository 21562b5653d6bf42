import numpy as np
import pytest

from xraygpt.checkpoint import (
    FORMAT_VERSION,
    AlignmentCheckpoint,
    load_checkpoint,
    save_checkpoint,
)
from xraygpt.curation import CuratedRecord
from xraygpt.errors import (
    CheckpointIncompatibleError,
    ConfigError,
    CorruptCheckpointError,
    VersionMismatchError,
)
from xraygpt.instruction import build_training_example, build_vocab
from xraygpt.model import AlignmentModel, ModelConfig
from xraygpt.trainer import (
    OptimizerState,
    StageConfig,
    _batch_indices,
    optimizer_step,
    read_loss_trace,
    train_stage,
    write_loss_trace,
)

CFG = ModelConfig(
    d_raw=16, v_dim=8, d_model=8, vocab_size=32, max_len=64,
    decoder_kind="linear_tier0",
)


def _setup():
    records = [
        CuratedRecord("a", "lungs clear no acute process", ("x",)),
        CuratedRecord("b", "mild cardiomegaly stable appearance", ("y",)),
        CuratedRecord("c", "small left pleural effusion present", ("z",)),
    ]
    vocab = build_vocab(records, instructions=("describe this.",), max_size=23)
    assert len(vocab) <= CFG.vocab_size
    rng = np.random.default_rng(12)
    examples = [build_training_example(r, "describe this.", vocab) for r in records]
    vecs = [rng.uniform(size=CFG.d_raw) for _ in records]
    return examples, vecs


def _model():
    return AlignmentModel(CFG)


# -- optimizer --------------------------------------------------------------

def test_sgd_update_hand_computed():
    w = np.array([[1.0]])
    b = np.array([2.0])
    cfg = StageConfig(stage="one", total_steps=1, batch_size=1, learning_rate=0.5, optimizer="sgd")
    optimizer_step(w, b, np.array([[0.1]]), np.array([-0.2]), OptimizerState(kind="sgd"), cfg)
    assert w[0, 0] == pytest.approx(0.95)
    assert b[0] == pytest.approx(2.1)


def test_adam_first_step_is_signed_lr():
    # after bias correction the first update is lr * g / (|g| + eps)
    w = np.array([[0.0, 0.0]])
    b = np.zeros(1)
    cfg = StageConfig(stage="one", total_steps=1, batch_size=1, learning_rate=1e-3)
    state = OptimizerState.fresh("adam", w, b)
    optimizer_step(w, b, np.array([[3.0, -0.5]]), np.zeros(1), state, cfg)
    assert w[0, 0] == pytest.approx(-1e-3, rel=1e-6)
    assert w[0, 1] == pytest.approx(1e-3, rel=1e-6)
    assert state.t == 1


def test_zero_gradient_is_a_fixed_point():
    w = np.array([[1.5]])
    b = np.array([0.5])
    cfg = StageConfig(stage="one", total_steps=1, batch_size=1)
    state = OptimizerState.fresh("adam", w, b)
    optimizer_step(w, b, np.zeros_like(w), np.zeros_like(b), state, cfg)
    assert w[0, 0] == 1.5 and b[0] == 0.5


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        StageConfig(stage="three", total_steps=1, batch_size=1)
    with pytest.raises(ConfigError):
        StageConfig(stage="one", total_steps=0, batch_size=1)
    with pytest.raises(ConfigError):
        StageConfig(stage="one", total_steps=1, batch_size=1, optimizer="lbfgs")
    defaults = StageConfig.for_stage("one")
    assert defaults.total_steps == 2000 and defaults.batch_size == 8


# -- batch stream -----------------------------------------------------------

def test_batch_stream_covers_each_epoch():
    cfg = StageConfig(stage="one", total_steps=10, batch_size=2, seed=7)
    n = 6
    first_epoch = []
    for step in range(3):
        first_epoch.extend(_batch_indices(cfg, step, n))
    assert sorted(first_epoch) == list(range(n))
    second_epoch = []
    for step in range(3, 6):
        second_epoch.extend(_batch_indices(cfg, step, n))
    assert sorted(second_epoch) == list(range(n))
    assert first_epoch != second_epoch or n <= 1


def test_batch_stream_absolute_addressing():
    cfg = StageConfig(stage="one", total_steps=10, batch_size=3, seed=7)
    # the indices at step k do not depend on having computed steps < k
    assert _batch_indices(cfg, 5, 4) == _batch_indices(cfg, 5, 4)


# -- training ---------------------------------------------------------------

def test_training_deterministic():
    examples, vecs = _setup()
    cfg = StageConfig(stage="one", total_steps=20, batch_size=2, seed=3)
    ck1, losses1 = train_stage(cfg, _model(), examples, vecs)
    ck2, losses2 = train_stage(cfg, _model(), examples, vecs)
    assert losses1 == losses2
    assert np.array_equal(ck1.weight, ck2.weight)
    assert np.array_equal(ck1.bias, ck2.bias)


def test_training_reduces_loss():
    examples, vecs = _setup()
    cfg = StageConfig(stage="one", total_steps=60, batch_size=3, learning_rate=5e-3)
    _, losses = train_stage(cfg, _model(), examples, vecs)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_resume_is_bitwise_identical(tmp_path):
    examples, vecs = _setup()
    full = StageConfig(stage="one", total_steps=40, batch_size=2, seed=3)
    ck_full, losses_full = train_stage(full, _model(), examples, vecs)

    half = StageConfig(stage="one", total_steps=20, batch_size=2, seed=3)
    ck_half, losses_a = train_stage(half, _model(), examples, vecs)
    mid_path = tmp_path / "mid.ckpt"
    save_checkpoint(ck_half, mid_path)
    ck_resumed, losses_b = train_stage(
        half, _model(), examples, vecs, start=load_checkpoint(mid_path)
    )

    assert losses_a + losses_b == losses_full
    assert ck_resumed.step == ck_full.step == 40
    p1, p2 = tmp_path / "full.ckpt", tmp_path / "resumed.ckpt"
    save_checkpoint(ck_full, p1)
    save_checkpoint(ck_resumed, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_stage_two_requires_stage_one():
    examples, vecs = _setup()
    cfg = StageConfig(stage="two", total_steps=5, batch_size=2)
    with pytest.raises(ConfigError):
        train_stage(cfg, _model(), examples, vecs)


def test_stage_two_restarts_optimizer_and_step():
    examples, vecs = _setup()
    one = StageConfig(stage="one", total_steps=10, batch_size=2)
    ck1, _ = train_stage(one, _model(), examples, vecs)
    two = StageConfig(stage="two", total_steps=7, batch_size=2)
    model = _model()
    ck2, losses = train_stage(two, model, examples, vecs, start=ck1)
    assert ck2.stage == "two"
    assert ck2.step == 7 and ck2.opt_t == 7
    assert len(losses) == 7


def test_fingerprint_mismatch_rejected():
    examples, vecs = _setup()
    one = StageConfig(stage="one", total_steps=3, batch_size=2)
    ck, _ = train_stage(one, _model(), examples, vecs)
    other = AlignmentModel(
        ModelConfig(
            d_raw=16, v_dim=8, d_model=8, vocab_size=32, max_len=64,
            decoder_kind="linear_tier0", decoder_seed=99,
        )
    )
    with pytest.raises(CheckpointIncompatibleError):
        train_stage(one, other, examples, vecs, start=ck)


def test_periodic_checkpoints_written(tmp_path):
    examples, vecs = _setup()
    cfg = StageConfig(stage="one", total_steps=6, batch_size=2, checkpoint_every=2)
    train_stage(cfg, _model(), examples, vecs, checkpoint_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["stageone-00000002.ckpt", "stageone-00000004.ckpt", "stageone-00000006.ckpt"]


# -- checkpoint serialization -----------------------------------------------

def _sample_ckpt():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(8, 4))
    return AlignmentCheckpoint(
        fingerprint="f" * 64,
        stage="one",
        step=17,
        seeds=(1, 2, 3),
        weight=w,
        bias=rng.normal(size=4),
        optimizer="adam",
        opt_t=17,
        opt_arrays={
            "m_w": rng.normal(size=(8, 4)),
            "v_w": rng.normal(size=(8, 4)) ** 2,
            "m_b": rng.normal(size=4),
            "v_b": rng.normal(size=4) ** 2,
        },
    )


def test_checkpoint_round_trip(tmp_path):
    ck = _sample_ckpt()
    path = tmp_path / "a.ckpt"
    save_checkpoint(ck, path)
    loaded = load_checkpoint(path)
    assert loaded.fingerprint == ck.fingerprint
    assert loaded.stage == ck.stage and loaded.step == ck.step
    assert loaded.seeds == ck.seeds and loaded.opt_t == ck.opt_t
    assert np.array_equal(loaded.weight, ck.weight)
    assert np.array_equal(loaded.bias, ck.bias)
    assert set(loaded.opt_arrays) == set(ck.opt_arrays)
    for k in ck.opt_arrays:
        assert np.array_equal(loaded.opt_arrays[k], ck.opt_arrays[k])


def test_save_load_save_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(_sample_ckpt(), p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_checkpoint_rejected(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(_sample_ckpt(), p)
    data = p.read_bytes()
    p.write_bytes(data[: len(data) - 5])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(p)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(_sample_ckpt(), p)
    p.write_bytes(p.read_bytes() + b"\x00\x00")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(p)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "a.ckpt"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(p)


def test_version_mismatch_rejected(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(_sample_ckpt(), p)
    data = bytearray(p.read_bytes())
    assert FORMAT_VERSION == 1
    data[8] = 2  # bump the little-endian version field
    p.write_bytes(bytes(data))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(p)


# -- loss traces ------------------------------------------------------------

def test_loss_trace_round_trip(tmp_path):
    p = tmp_path / "trace.csv"
    losses = [1.5, 0.75, 1.0 / 3.0]
    write_loss_trace(p, losses, start_step=10, fingerprint="deadbeef")
    assert p.read_text().startswith("# fingerprint=deadbeef\n")
    rows = read_loss_trace(p)
    assert [s for s, _ in rows] == [10, 11, 12]
    assert [l for _, l in rows] == losses  # 17 significant digits round-trips
