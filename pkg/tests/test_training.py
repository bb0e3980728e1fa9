import numpy as np
import pytest

from posfuse.channel_sim import ScenarioSpec, default_environment, gen_dataset, import_fingerprints
from posfuse.errors import ConfigError, DataError, TrainingError
from posfuse.nn_core import VARIANCE_FLOOR, evaluate_loss
from posfuse.training import (
    ModelBundle,
    PlateauSchedule,
    TrainConfig,
    build_networks,
    model_inputs,
    predict_all,
    predict_dataset,
    train,
)

SMALL = dict(trunk_widths=(24,), head_widths=(12,), batch_size=32)


def cfg(**kw):
    base = dict(epochs=5, patience=4, **SMALL)
    base.update(kw)
    return TrainConfig(**base)


def subset(ds, anchors):
    """Dataset restricted to anchor indices ``anchors``."""
    return import_fingerprints(ds.positions, ds.fingerprints[:, anchors], ds.splits,
                               anchor_ids=[ds.anchor_ids[k] for k in anchors])


# -- configuration and schedule ---------------------------------------------------------


def test_plateau_drops_rate_after_patience():
    sched = PlateauSchedule(1e-3, 1e-4, patience=5)
    rates = [sched.step(1.0) for _ in range(8)]
    # epoch 1 sets the best; epochs 2..6 do not improve -> drop after epoch 6
    assert rates[:5] == [1e-3] * 5
    assert rates[5:] == [1e-4] * 3


def test_plateau_resets_on_improvement():
    sched = PlateauSchedule(1e-3, 1e-4, patience=2)
    assert [sched.step(v) for v in (3.0, 3.0, 2.0, 2.5, 2.5)] == [1e-3, 1e-3, 1e-3, 1e-3, 1e-4]


@pytest.mark.parametrize("bad", [dict(mode="late"), dict(loss="l1"), dict(epochs=10, patience=10),
                                 dict(dropout=1.0), dict(lr=0.0), dict(trunk_widths=())])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**{"epochs": 20, "patience": 5, **bad})


def test_config_dict_roundtrip():
    c = cfg(mode="stl", loss="mse", seed=4)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"epochz": 3})


# -- structure ------------------------------------------------------------------------------


def test_parameter_count_ordering(small_dataset):
    counts = {}
    for mode in ("stl", "mtl"):
        b = train(small_dataset, cfg(mode=mode, epochs=1, patience=0))
        counts[mode] = b.n_params
    assert counts["mtl"] < counts["stl"]
    assert counts["stl"] - counts["mtl"] == 3 * (16 * 4 * 2 * 24 + 24)


def test_early_fusion_input_width():
    env = default_environment()
    ds = gen_dataset(env, 30, seed=0)
    b = train(ds, cfg(mode="early", epochs=1, patience=0))
    assert b.trunks[0].in_dim == 4 * 8 * 64 * 2
    assert len(b.trunks) == len(b.heads) == 1
    assert model_inputs("early", ds.inputs("test"))[0].shape[1] == 4096


def test_bundle_shapes(small_dataset):
    mtl = train(small_dataset, cfg(mode="mtl", epochs=1, patience=0))
    stl = train(small_dataset, cfg(mode="stl", epochs=1, patience=0))
    assert (len(mtl.trunks), len(mtl.heads)) == (1, 4)
    assert (len(stl.trunks), len(stl.heads)) == (4, 4)
    assert [h.anchor_id for h in mtl.heads] == [1, 2, 3, 4]


# -- equivalences ------------------------------------------------------------------------------


def test_mtl_with_one_anchor_is_stl(small_dataset):
    one = subset(small_dataset, [0])
    a = train(one, cfg(mode="mtl", seed=2))
    b = train(one, cfg(mode="stl", seed=2))
    assert np.array_equal(a.trunks[0].params, b.trunks[0].params)
    assert np.array_equal(a.heads[0].params, b.heads[0].params)


def test_stl_anchors_train_independently(small_dataset):
    base = train(small_dataset, cfg(mode="stl"))
    noisy = small_dataset.fingerprints.copy()
    rng = np.random.default_rng(0)
    for k in (0, 2, 3):
        noisy[:, k] = rng.random(noisy[:, k].shape)
    other = import_fingerprints(small_dataset.positions, noisy, small_dataset.splits, anchor_ids=small_dataset.anchor_ids)
    alt = train(other, cfg(mode="stl"))
    assert np.array_equal(base.trunks[1].params, alt.trunks[1].params)
    assert np.array_equal(base.heads[1].params, alt.heads[1].params)
    assert not np.array_equal(base.heads[0].params, alt.heads[0].params)
    alone = train(subset(small_dataset, [1]), cfg(mode="stl"))
    assert np.array_equal(base.trunks[1].params, alone.trunks[0].params)
    assert np.array_equal(base.heads[1].params, alone.heads[0].params)


def test_threads_match_sequential(small_dataset):
    a = train(small_dataset, cfg(mode="stl", epochs=2, patience=1), workers=0)
    b = train(small_dataset, cfg(mode="stl", epochs=2, patience=1), workers=3)
    assert a.digest() == b.digest()


def test_training_is_deterministic(small_dataset):
    a = train(small_dataset, cfg(seed=5))
    b = train(small_dataset, cfg(seed=5))
    c = train(small_dataset, cfg(seed=6))
    assert a.digest() == b.digest() != c.digest()


# -- optimisation ------------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["early", "stl", "mtl"])
@pytest.mark.parametrize("loss", ["mse", "nll"])
def test_training_reduces_loss(small_dataset, mode, loss):
    b = train(small_dataset, cfg(mode=mode, loss=loss, epochs=50, patience=40))
    final = sum(h[-1].train_loss for h in b.histories)
    assert final < b.initial_train_loss


def test_best_validation_parameters_kept(small_dataset):
    b = train(small_dataset, cfg(mode="mtl", epochs=15, patience=10, lr=3e-3))
    xs = model_inputs("mtl", small_dataset.inputs("val"))
    val = evaluate_loss(b.trunks[0], b.heads, xs, small_dataset.labels("val"), "nll")
    assert val == pytest.approx(min(r.val_loss for r in b.histories[0]), rel=1e-6)


def test_history_csv(small_dataset):
    b = train(small_dataset, cfg(mode="stl", epochs=3, patience=2))
    lines = b.history_csv().splitlines()
    assert lines[0] == "anchor,epoch,train_loss,val_loss,lr"
    assert len(lines) == 1 + 4 * 3
    m = train(small_dataset, cfg(mode="mtl", epochs=3, patience=2))
    assert m.history_csv().splitlines()[0] == "epoch,train_loss,val_loss,lr"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(small_dataset):
    bad = import_fingerprints(small_dataset.positions * 1e200, small_dataset.fingerprints, small_dataset.splits)
    with pytest.raises(TrainingError) as info:
        train(bad, cfg(mode="mtl", loss="mse"))
    assert info.value.last_good_epoch == 0


def test_dynamic_training_data_rejected(small_env):
    ds = gen_dataset(small_env, 60, ScenarioSpec(frozenset({1})), seed=0)
    tags = ds.tags.copy()
    tags[ds.splits["train"][0]] = 1
    bad = import_fingerprints(ds.positions, ds.fingerprints, ds.splits, tags=tags)
    with pytest.raises(DataError):
        train(bad, cfg())


# -- prediction --------------------------------------------------------------------------------------


def test_predict_all_late_and_early(small_dataset):
    s = small_dataset.sample(int(small_dataset.splits["test"][0]))
    late = predict_all(train(small_dataset, cfg(mode="mtl", epochs=1, patience=0)), s, T=4)
    assert [e.anchor_id for e in late] == [1, 2, 3, 4]
    assert all(e.var_x > 0 and e.var_y > 0 for e in late)
    early = predict_all(train(small_dataset, cfg(mode="early", epochs=1, patience=0)), s, T=4)
    assert early.anchor_id == 0


def test_mse_without_dropout_has_floor_variance(small_dataset):
    b = train(small_dataset, cfg(mode="stl", loss="mse", dropout=0.0, epochs=1, patience=0))
    p = predict_dataset(b, small_dataset.inputs("test"), T=3)
    assert np.all(p.combined == VARIANCE_FLOOR)


def test_bundle_roundtrip_preserves_predictions(small_dataset, tmp_path):
    b = train(small_dataset, cfg(mode="stl", epochs=2, patience=1))
    b.save(tmp_path / "m.pfmb")
    back = ModelBundle.load(tmp_path / "m.pfmb")
    assert back.config == b.config and back.anchor_ids == b.anchor_ids
    fps = small_dataset.inputs("test")
    p1, p2 = predict_dataset(b, fps, 5, seed=3), predict_dataset(back, fps, 5, seed=3)
    assert np.array_equal(p1.mean, p2.mean) and np.array_equal(p1.combined, p2.combined)
    assert back.digest() == b.digest()
    assert back.val_loss == b.val_loss


def test_build_networks_widths():
    trunk, heads = build_networks(cfg(), 32, [1, 2], np.random.default_rng(0))
    assert trunk.sizes == (32, 24) and heads[0].sizes == (24, 12, 4)
