import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact import encoder as enc
from artifact import harness as Hn
from artifact.errors import InvalidInput, UndefinedMetric
from artifact.trainer import Heads, TrainConfig

import oracles

SMALL_ENC = enc.EncoderConfig(image_size=32, patch_size=8, d_model=8, layers=2, heads=2, apa_layers=1)
SMALL_TRAIN = TrainConfig(epochs=2, batch=8, lr=1e-3, n_warmup=1)


def small_specs(seed=0, n=6):
    return [Hn.SyntheticSpec(recipe=r, image_size=32, n_train=n, n_test=4, seed=seed) for r in Hn.DESK_TASKS]


# --- AUC ---------------------------------------------------------------------------------

def test_auc_against_pair_counting():
    rng = np.random.default_rng(0)
    scores = np.round(rng.random(1000) * 50) / 50  # many ties
    labels = rng.integers(0, 2, 1000)
    assert abs(Hn.auc(scores, labels) - oracles.auc_pairs(scores.tolist(), labels.tolist())) <= 1e-12


def test_auc_trivial_cases():
    assert Hn.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert Hn.auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert Hn.auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_errors():
    with pytest.raises(UndefinedMetric):
        Hn.auc([0.1, 0.2], [1, 1])
    with pytest.raises(InvalidInput):
        Hn.auc([0.1, 0.2], [0, 2])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_auc_monotone_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(60)
    y = np.r_[np.zeros(30, int), np.ones(30, int)]
    base = Hn.auc(s, y)
    assert abs(Hn.auc(np.exp(s), y) - base) <= 1e-12
    assert abs(Hn.auc(a * s + b, y) - base) <= 1e-12


# --- data generation -----------------------------------------------------------------------

def test_generation_is_deterministic():
    spec = small_specs(3)[0]
    a, b = Hn.gen_synthetic_task(spec, 1), Hn.gen_synthetic_task(spec, 1)
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert np.array_equal(x.image, y.image) and x.y_bin == y.y_bin
    c = Hn.gen_synthetic_task(spec, 2)
    assert not np.array_equal(a.train[0].image, c.train[0].image)


def test_generated_labels():
    data = Hn.gen_synthetic_task(small_specs()[1], 2)
    assert len(data.train) == 12 and len(data.test) == 8
    fakes = [s for s in data.train if s.y_bin == 1]
    # eyes texture + jawline boundary
    assert all(s.y_ind.tolist() == [0, 0, 0, 1, 1] for s in fakes)
    assert all(not s.y_ind.any() for s in data.train if s.y_bin == 0)
    assert all(0.0 <= s.image.min() and s.image.max() <= 1.0 for s in data.train)


def test_empty_recipe_is_indistinguishable():
    spec = Hn.SyntheticSpec(recipe=(), image_size=32, n_train=4, n_test=10, seed=1)
    data = Hn.gen_synthetic_task(spec, 1)
    for real, fake in zip(data.test[::2], data.test[1::2]):
        assert np.array_equal(real.image, fake.image)
    st_ = enc.EncoderState.init(SMALL_ENC, 0)
    heads = Heads.init(SMALL_ENC.d_model, 0, scale=1.0)
    assert Hn.evaluate(data.test, st_, heads, None, 3, False) == 0.5


def test_mouth_blur_trips_its_indicator():
    spec = Hn.SyntheticSpec(recipe=(("mouth", "blur", 3.0),), n_train=40, n_test=2, seed=4)
    data = Hn.gen_synthetic_task(spec, 1)
    Hn.attach_indicators(data.train)
    pairs = list(zip(data.train[::2], data.train[1::2]))
    wins = sum(f.indicators.anomaly_of("mouth", "blur") > r.indicators.anomaly_of("mouth", "blur")
               for r, f in pairs)
    assert wins >= 0.95 * len(pairs)


def test_spec_validation():
    with pytest.raises(InvalidInput):
        Hn.SyntheticSpec(recipe=(("jawline", "blur", 1.0),))
    with pytest.raises(InvalidInput):
        Hn.SyntheticSpec(n_train=1)
    with pytest.raises(InvalidInput):
        Hn.SyntheticSpec(image_size=60)


def test_region_masks_shapes():
    m = Hn.region_masks(64)
    assert set(m) == {"eyes", "nose", "cheeks", "mouth", "jawline", "boundary", "skin"}
    assert all(v.shape == (64, 64) and v.any() for v in m.values())
    assert not (m["skin"] & m["eyes"]).any()


def test_planted_toy_library():
    cands, sups, planted = Hn.toy_library_inputs(32, seed=1)
    lib = Hn.toy_library(32, seed=1)
    for ch, k in planted.items():
        assert lib[ch].pair is not None and lib[ch].pair.fake_text == cands[ch][k].fake_text


# --- protocol --------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def smoke_run():
    abl = Hn.Ablations(adh=False, apa=False, ind=False)
    return Hn.run_protocol(small_specs(), SMALL_TRAIN, abl, SMALL_ENC, seed=1)


def test_smoke_baseline_is_well_formed(smoke_run):
    assert sorted(smoke_run.auc) == [(1, 1), (2, 1), (2, 2)]
    assert all(0.0 <= v <= 1.0 for v in smoke_run.auc.values())
    assert smoke_run.num_tasks == 2
    assert smoke_run.manifest["config"]["train"]["mu1"] == 0.0
    assert smoke_run.manifest["config"]["train"]["use_apa"] is False
    m = smoke_run.matrix()
    assert np.isnan(m[0, 1]) and not np.isnan(m[1, 0])


def test_one_task_gives_one_entry():
    res = Hn.run_protocol(small_specs()[:1], TrainConfig(epochs=1, batch=8, n_warmup=1), Hn.Ablations(),
                          SMALL_ENC, seed=0)
    assert list(res.auc) == [(1, 1)]


def test_report_files(smoke_run, tmp_path):
    paths = Hn.report(smoke_run, tmp_path / "out")
    rows = list(csv.reader(open(paths["auc"])))
    assert rows[0] == ["after_task", "eval_task", "auc"]
    assert [r[:2] for r in rows[1:]] == [["1", "1"], ["2", "1"], ["2", "2"]]
    assert all(len(r[2].split(".")[1]) == 6 for r in rows[1:])
    manifest = paths["manifest"].read_text()
    assert f"config_hash={smoke_run.manifest['config_hash']}" in manifest
    assert "seed=1" in manifest and "task2_wallclock_s=" in manifest
    log = list(csv.reader(open(paths["log"])))
    assert log[0][:3] == ["task", "epoch", "batch"] and len(log) == 1 + 2 * 2 * 2


def test_protocol_is_byte_reproducible(smoke_run, tmp_path):
    again = Hn.run_protocol(small_specs(), SMALL_TRAIN, Hn.Ablations(adh=False, apa=False, ind=False),
                            SMALL_ENC, seed=1)
    Hn.write_auc_csv(smoke_run, tmp_path / "a.csv")
    Hn.write_auc_csv(again, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert again.manifest["config_hash"] == smoke_run.manifest["config_hash"]


@pytest.mark.parametrize("align", ["lerp", "ema", "wm"])
def test_alignment_flag_is_used(align):
    res = Hn.run_protocol(small_specs(), TrainConfig(epochs=1, batch=8, n_warmup=1),
                          Hn.Ablations(align=align), SMALL_ENC, seed=0)
    assert res.manifest["config"]["ablations"]["align"] == align
    assert len(res.state[3]) == 2


def test_unknown_alignment():
    with pytest.raises(InvalidInput):
        Hn.Ablations(align="mean")
