import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lgdetect.errors import EmptyLog, ShapeMismatch, StrategyUnavailable
from lgdetect.learngene import (
    CANONICAL_STRATEGIES,
    ExpansionStrategy,
    ExtractionPolicy,
    GradSigLog,
    adapt_individual,
    expand,
    extract_learngene,
    gradient_significance,
    load_unit,
    save_unit,
    slot_ids,
    train_collective,
)
from lgdetect.neuralnet import Model, count_params
from lgdetect.numerics import rng_stream
from lgdetect.sdnet import GradRecord, TrainConfig, build_sdnet

from helpers import tiny_dataset


def _record(values):
    return GradRecord({"conv1/kernel": np.asarray(values, dtype=float)}, 1)


def test_significance_examples():
    assert gradient_significance(_record([1.0, 2.0]), 1e-4, ["conv1"])[0] == 1.0
    assert gradient_significance(_record([0.0, 0.0]), 1e-4, ["conv1"])[0] == 0.0
    assert gradient_significance(_record([1.0, 0.0, 1.0, 0.0]), 1e-4, ["conv1"])[0] == 0.5
    with pytest.raises(ValueError):
        gradient_significance(_record([1.0]), 0.0, ["conv1"])


@given(st.lists(st.floats(0, 1e-2), min_size=1, max_size=50), st.floats(1e-6, 1e-3), st.floats(1e-6, 1e-3))
def test_significance_monotone_in_tau(values, t1, t2):
    lo, hi = sorted((t1, t2))
    r = _record(values)
    a, b = gradient_significance(r, lo, ["conv1"])[0], gradient_significance(r, hi, ["conv1"])[0]
    assert a >= b and 0.0 <= b <= 1.0


def _collective_model(n_conv=12, nt=8, nr=32):
    return Model.initialize(build_sdnet(n_conv, nt, nr), rng_stream(0, "init-collective"))


def _synthetic_log(rho_fn, k=8, n=12):
    rho = np.array([[rho_fn(layer) for _ in range(k)] for layer in range(1, n + 1)])
    return GradSigLog(rho, 1e-4, 30, list(range(k)))


def test_extraction_picks_low_suffix():
    unit = extract_learngene(_collective_model(), _synthetic_log(lambda l: 0.01 if l >= 9 else 0.9))
    assert unit.layer_ids == [9, 10, 11, 12]
    assert unit.warnings == []
    assert unit.n_params == 2_336


def test_extraction_truncates_to_deepest():
    unit = extract_learngene(_collective_model(), _synthetic_log(lambda l: 0.01 if l >= 3 else 0.9))
    assert unit.layer_ids == [9, 10, 11, 12]
    short = extract_learngene(_collective_model(), _synthetic_log(lambda l: 0.01 if l >= 11 else 0.9))
    assert short.layer_ids == [11, 12]


def test_extraction_requires_nonincreasing_trend():
    rho = np.full((12, 8), 0.9)
    rho[8:] = np.linspace(0.0, 0.04, 8)  # low but rising
    unit = extract_learngene(_collective_model(), GradSigLog(rho, 1e-4, 30, list(range(8))))
    assert unit.warnings  # nothing eligible


def test_extraction_fallback():
    unit = extract_learngene(_collective_model(), _synthetic_log(lambda l: 0.9))
    assert len(unit) == 4 and unit.warnings
    assert unit.layer_ids == [9, 10, 11, 12]


def test_extraction_is_pure_and_rejects_empty():
    model, log = _collective_model(), _synthetic_log(lambda l: 0.01 if l >= 9 else 0.9)
    a, b = extract_learngene(model, log), extract_learngene(model, log)
    assert a.layer_ids == b.layer_ids and all(np.array_equal(x, y) for x, y in zip(a.kernels, b.kernels))
    with pytest.raises(EmptyLog):
        extract_learngene(model, GradSigLog(np.zeros((12, 0)), 1e-4, 1))


def test_gradsig_csv_roundtrip():
    log = _synthetic_log(lambda l: l / 13)
    text = log.to_csv({"config_hash": "abc", "master_seed": 4})
    assert text.startswith("# config_hash: abc\n# master_seed: 4\n")
    back = GradSigLog.from_csv(text)
    assert np.array_equal(back.rho, log.rho) and back.tau == log.tau and back.task_ids == log.task_ids


def test_strategy_canonicalization():
    assert len(CANONICAL_STRATEGIES) == 5
    assert ExpansionStrategy("embedding", "bottom").canonical() == ExpansionStrategy("inheriting", "bottom").canonical()
    assert ExpansionStrategy.parse("bottom") == ExpansionStrategy("embedding", "bottom")
    assert ExpansionStrategy.parse("inheriting/top") == ExpansionStrategy("inheriting", "top")
    with pytest.raises(ValueError):
        ExpansionStrategy("grafting", "top")


def test_slots():
    assert slot_ids(8, 4, "top") == [1, 2, 3, 4]
    assert slot_ids(8, 4, "middle") == [3, 4, 5, 6]
    assert slot_ids(8, 4, "bottom") == [5, 6, 7, 8]
    assert slot_ids(12, 4, "middle") == [5, 6, 7, 8]
    with pytest.raises(ShapeMismatch):
        slot_ids(3, 4, "top")


@pytest.fixture
def unit_and_source():
    source = _collective_model()
    unit = extract_learngene(source, _synthetic_log(lambda l: 0.01 if l >= 9 else 0.9))
    return unit, source


def test_expand_embedding_and_inheriting(unit_and_source):
    unit, source = unit_and_source
    spec = build_sdnet(8, 8, 32)
    emb = expand(spec, source, unit, ExpansionStrategy("embedding", "bottom"), rng_stream(0, "i"))
    for d, k in zip(range(5, 9), unit.kernels):
        assert np.array_equal(emb.model.params[f"conv{d}/kernel"], k)
    top = expand(spec, source, unit, ExpansionStrategy("embedding", "top"), rng_stream(0, "i"))
    assert np.array_equal(top.model.params["conv1/kernel"], unit.kernels[0])
    inh = expand(spec, source, unit, ExpansionStrategy("inheriting", "top"), rng_stream(0, "i"))
    for d, s in zip(range(5, 9), range(1, 5)):
        assert np.array_equal(inh.model.params[f"conv{d}/kernel"], source.params[f"conv{s}/kernel"])
        assert np.array_equal(inh.model.params[f"conv{d}/bias"], source.params[f"conv{s}/bias"])
    inh_b = expand(spec, source, unit, ExpansionStrategy("inheriting", "bottom"), rng_stream(0, "i"))
    assert emb.model.content_hash() == inh_b.model.content_hash()
    assert round(100 * emb.transferred_ratio, 1) == 10.8
    assert emb.copied_params == 2_336
    for e in (emb, top, inh):
        assert all(not c["bn"] and c["dst"].startswith("conv") for c in e.copies)
        assert all(not k.startswith("bn") for k in e.anchor)
    # non-copied layers share the init stream
    assert np.array_equal(emb.model.params["bn5/gamma"], np.ones(8))
    assert np.array_equal(emb.model.params["conv1/kernel"], inh.model.params["conv1/kernel"])


def test_inheriting_without_source(unit_and_source):
    unit, _ = unit_and_source
    spec = build_sdnet(8, 8, 32)
    with pytest.raises(StrategyUnavailable):
        expand(spec, None, unit, ExpansionStrategy("inheriting", "top"), rng_stream(0, "i"))
    expand(spec, None, unit, ExpansionStrategy("inheriting", "bottom"), rng_stream(0, "i"))


def test_expand_shape_mismatch(unit_and_source):
    unit, source = unit_and_source
    with pytest.raises(ShapeMismatch):
        expand(build_sdnet(3, 8, 32), source, unit, ExpansionStrategy("embedding", "bottom"), rng_stream(0, "i"))


def test_unit_file_roundtrip(tmp_path, unit_and_source):
    unit, _ = unit_and_source
    manifest = save_unit(unit, tmp_path / "u.lg", extra={"config_hash": "x"})
    assert manifest["n_params"] == 2_336 and manifest["bn_blocks"] == 0
    back = load_unit(tmp_path / "u.lg")
    assert back.layer_ids == unit.layer_ids and back.source_hash == unit.source_hash
    assert all(np.array_equal(a, b) for a, b in zip(back.kernels, unit.kernels))
    assert back.meta["n_conv_source"] == 12


def test_collective_training_small():
    tasks = [tiny_dataset(i, n=40) for i in range(3)]
    cfg = TrainConfig(epochs=2, batch_size=16)
    a = train_collective(tasks, cfg, n_conv=3)
    b = train_collective(tasks, cfg, n_conv=3)
    assert a.gradsig.rho.shape == (3, 3)
    assert np.array_equal(a.gradsig.rho, b.gradsig.rho)
    assert a.model.content_hash() == b.model.content_hash()
    assert np.all((a.gradsig.rho >= 0) & (a.gradsig.rho <= 1))
    assert len(a.logs) == 6
    one = train_collective(tasks[:1], cfg, n_conv=3)
    assert one.gradsig.n_tasks == 1


def test_adapt_individual_anchors_copied_layers():
    col = Model.initialize(build_sdnet(6, 2, 4), rng_stream(0, "c"))
    unit = extract_learngene(col, _synthetic_log(lambda l: 0.9, n=6), ExtractionPolicy(m_max=2))
    exp = expand(build_sdnet(4, 2, 4), col, unit, ExpansionStrategy("embedding", "bottom"), rng_stream(0, "i"))
    res = adapt_individual(exp, tiny_dataset(n=60), TrainConfig(epochs=3, batch_size=16, lam=1e12))
    for name, value in exp.anchor.items():
        assert np.linalg.norm(res.model.params[name] - value) < 1e-6
    assert count_params(exp.model.spec)["total"] > exp.copied_params
