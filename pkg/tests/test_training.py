"""Training loop contracts: hygiene, freezing, selection, few-shot sampling."""

from collections import Counter

import numpy as np
import pytest

from polytag.checkpoint import params_state, state_checksum
from polytag.data import DataError, Encoded, LabelMap
from polytag.encoder import Encoder
from polytag.fusion import build_sft
from polytag.training import (
    FEWSHOT_BINS,
    FEWSHOT_GRID_BATCH,
    FEWSHOT_GRID_EPOCHS,
    FEWSHOT_GRID_LR,
    EpochRecord,
    FewShotConfig,
    SelectionResult,
    TrainConfig,
    TrainResult,
    evaluate,
    few_shot_finetune,
    few_shot_table,
    predict_sentence,
    select_model,
    train_task,
    write_training_log_csv,
)
from polytag.tensor import Rng

from helpers import TINY_ENC, make_profile, tiny_madx, tiny_zgul

N_LABELS = 3


def _sentences(code, n, seed):
    """Learnable synthetic task: the tag of a token is its id mod 3."""
    rng = Rng(seed).child(code)
    out = []
    for _ in range(n):
        length = int(rng.integers(2, 7))
        ids = rng.integers(3, TINY_ENC.vocab_size, shape=length).astype(np.int64)
        out.append(Encoded(ids, (ids % N_LABELS).astype(np.int64), code))
    return out


def _data(codes=("aa", "bb"), n_train=40, n_dev=12, seed=0):
    return {
        c: {"train": _sentences(c, n_train, seed), "dev": _sentences(c, n_dev, seed + 1)}
        for c in codes
    }


def _majority_f1(dev_set):
    counts = Counter(int(t) for ex in dev_set for t in ex.label_ids)
    total = sum(counts.values())
    return counts.most_common(1)[0][1] / total


def test_config_validation():
    with pytest.raises(ValueError, match="mode"):
        TrainConfig(mode="finetune")
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        FewShotConfig(n_examples=-1)


def test_grid_constants_match_documented_search_space():
    assert FEWSHOT_GRID_LR == (1e-5, 5e-5, 1e-4)
    assert FEWSHOT_GRID_EPOCHS == (1, 5, 10)
    assert FEWSHOT_GRID_BATCH == (1, 4, 8)
    assert FEWSHOT_BINS == (10, 30, 70, 100)


def test_zero_epochs_is_a_no_op():
    model, _ = tiny_zgul()
    before = state_checksum(params_state(model.parameters()))
    out = train_task(model, _data(), TrainConfig(mode="zgul", epochs=0, sources=("aa", "bb")))
    assert state_checksum(params_state(model.parameters())) == before
    assert out.log == [] and out.checkpoints == [] and out.dev_f1 == []


def test_mode_must_match_model_kind():
    model, _ = tiny_zgul()
    with pytest.raises(ValueError, match="does not match model kind"):
        train_task(model, _data(), TrainConfig(mode="sft"))


def test_sft_learns_past_the_majority_baseline():
    enc = Encoder(TINY_ENC, seed=2)
    model = build_sft(enc, LabelMap(("A", "B", "C")), languages=("aa", "bb"))
    data = _data()
    cfg = TrainConfig(mode="sft", lr=5e-3, epochs=4, batch_size=8, seed=1,
                      sources=("aa", "bb"))
    out = train_task(model, data, cfg)
    dev = data["aa"]["dev"] + data["bb"]["dev"]
    assert out.dev_f1[-1] > _majority_f1(dev) + 0.1
    # loss fell over training
    losses = [r.loss for r in out.log if r.split == "train"]
    assert losses[-1] < losses[0]
    # log carries one train and one dev row per epoch
    assert [r.split for r in out.log] == ["train", "dev"] * cfg.epochs
    assert len(out.checkpoints) == cfg.epochs


def test_zgul_training_learns_and_freezes_encoder_and_bank():
    model, _ = tiny_zgul()
    enc_before = state_checksum(params_state(model.encoder.parameters()))
    bank_before = state_checksum(params_state(model.bank.parameters()))
    data = _data()
    cfg = TrainConfig(mode="zgul", lr=5e-3, epochs=3, batch_size=8, seed=1,
                      sources=("aa", "bb"))
    out = train_task(model, data, cfg)
    assert state_checksum(params_state(model.encoder.parameters())) == enc_before
    assert state_checksum(params_state(model.bank.parameters())) == bank_before
    dev = data["aa"]["dev"] + data["bb"]["dev"]
    assert out.dev_f1[-1] > _majority_f1(dev)


def test_sft_updates_encoder_but_not_mlm_head():
    enc = Encoder(TINY_ENC, seed=2)
    model = build_sft(enc, LabelMap(("A", "B", "C")), languages=("aa",))
    mlm_before = (enc.mlm_W.value.numpy().copy(), enc.mlm_b.value.numpy().copy())
    body_before = state_checksum(params_state(enc.body_parameters()))
    train_task(model, _data(("aa",)), TrainConfig(mode="sft", lr=1e-3, epochs=1, sources=("aa",)))
    assert state_checksum(params_state(enc.body_parameters())) != body_before
    assert np.array_equal(enc.mlm_W.value.numpy(), mlm_before[0])
    assert np.array_equal(enc.mlm_b.value.numpy(), mlm_before[1])


def test_madx_training_freezes_language_adapters():
    model = tiny_madx()
    bank_before = state_checksum(params_state(model.bank.parameters()))
    task_before = state_checksum(params_state(model.task_adapter.parameters()))
    train_task(model, _data(), TrainConfig(mode="madx_multi", lr=5e-3, epochs=2,
                                           batch_size=8, sources=("aa", "bb")))
    assert state_checksum(params_state(model.bank.parameters())) == bank_before
    assert state_checksum(params_state(model.task_adapter.parameters())) != task_before


def test_training_is_bit_reproducible_per_seed():
    sums = []
    for seed in (4, 4, 9):
        model, _ = tiny_zgul()
        train_task(model, _data(), TrainConfig(mode="zgul", lr=1e-3, epochs=2,
                                               batch_size=8, seed=seed, sources=("aa", "bb")))
        sums.append(state_checksum(params_state(model.parameters())))
    assert sums[0] == sums[1]
    assert sums[0] != sums[2]


# -- hygiene -------------------------------------------------------------


def test_non_source_data_is_rejected():
    model, _ = tiny_zgul()
    data = _data(("aa", "bb"))
    data["tt"] = {"train": _sentences("tt", 3, 5)}
    with pytest.raises(DataError, match="non-source languages"):
        train_task(model, data, TrainConfig(mode="zgul", sources=("aa", "bb")))


def test_mislabeled_language_under_source_is_rejected():
    model, _ = tiny_zgul()
    data = _data(("aa",))
    data["aa"]["train"][0] = Encoded(
        data["aa"]["train"][0].ids, data["aa"]["train"][0].label_ids, "tt"
    )
    with pytest.raises(DataError, match="tagged 'tt' under source"):
        train_task(model, data, TrainConfig(mode="zgul", sources=("aa",)))


def test_source_without_adapter_is_rejected():
    model, _ = tiny_zgul(codes=("aa",))
    with pytest.raises(DataError, match="no language adapter for source 'bb'"):
        train_task(model, _data(("aa", "bb")), TrainConfig(mode="zgul", sources=("aa", "bb")))


def test_missing_source_data_is_rejected():
    model, _ = tiny_zgul()
    with pytest.raises(DataError, match="source language 'bb' has no data"):
        train_task(model, _data(("aa",)), TrainConfig(mode="zgul", sources=("aa", "bb")))


# -- selection -----------------------------------------------------------


def _rigged_checkpoint(model, label_id):
    """Model state whose classifier always predicts one label."""
    keep = params_state(model.parameters())
    state = {k: v.copy() for k, v in keep.items()}
    state["cls.W"] = np.zeros_like(state["cls.W"])
    b = np.zeros_like(state["cls.b"])
    b[label_id] = 10.0
    state["cls.b"] = b
    return state


def test_select_model_breaks_ties_toward_earliest_epoch():
    model, _ = tiny_zgul()
    dev = [Encoded(np.array([5, 9], dtype=np.int64), np.array([0, 0], dtype=np.int64), "aa")]
    ckpts = [
        _rigged_checkpoint(model, 2),  # predicts C: wrong everywhere
        _rigged_checkpoint(model, 0),  # predicts A: perfect
        _rigged_checkpoint(model, 0),  # tied with epoch 2
    ]
    before = state_checksum(params_state(model.parameters()))
    got = select_model(model, ckpts, dev)
    assert isinstance(got, SelectionResult)
    assert got.epoch == 2
    assert got.f1 == 1.0
    assert got.scores == [0.0, 1.0, 1.0]
    assert got.state is ckpts[1]
    # selection must not leave the model in a probed state
    assert state_checksum(params_state(model.parameters())) == before


def test_select_model_single_checkpoint_returns_it():
    model, _ = tiny_zgul()
    dev = [Encoded(np.array([5], dtype=np.int64), np.array([1], dtype=np.int64), "aa")]
    ckpt = params_state(model.parameters())
    got = select_model(model, [ckpt], dev)
    assert got.epoch == 1 and got.state is ckpt


def test_select_model_rejects_target_dev():
    model, _ = tiny_zgul()
    ckpt = params_state(model.parameters())
    target_dev = [Encoded(np.array([5], dtype=np.int64), np.array([0], dtype=np.int64), "tt")]
    with pytest.raises(DataError, match="target dev forbidden in zero-shot mode"):
        select_model(model, [ckpt], target_dev)


def test_select_model_input_validation():
    model, _ = tiny_zgul()
    with pytest.raises(ValueError, match="no checkpoints"):
        select_model(model, [], [])
    with pytest.raises(DataError, match="empty dev set"):
        select_model(model, [params_state(model.parameters())], [])


# -- few-shot ------------------------------------------------------------


def test_few_shot_zero_examples_returns_untouched_copy():
    model, _ = tiny_zgul()
    target = make_profile("uu", 55)
    tuned = few_shot_finetune(model, _sentences("uu", 8, 3),
                              FewShotConfig(n_examples=0), profile=target)
    assert tuned is not model
    assert state_checksum(params_state(tuned.parameters())) == state_checksum(
        params_state(model.parameters())
    )
    # the profile lands on the copy only
    assert "uu" in tuned.profiles and "uu" not in model.profiles


def test_few_shot_rejects_oversized_bins():
    model, profiles = tiny_zgul()
    with pytest.raises(DataError, match="only 4 available"):
        few_shot_finetune(model, _sentences("tt", 4, 3),
                          FewShotConfig(n_examples=10), profile=profiles["tt"])


def test_few_shot_is_seed_reproducible_and_sensitive():
    model, profiles = tiny_zgul()
    pool = _sentences("tt", 20, 3)
    cfg = dict(n_examples=10, lr=1e-3, epochs=2, batch_size=4)
    a = few_shot_finetune(model, pool, FewShotConfig(seed=1, **cfg), profile=profiles["tt"])
    b = few_shot_finetune(model, pool, FewShotConfig(seed=1, **cfg), profile=profiles["tt"])
    c = few_shot_finetune(model, pool, FewShotConfig(seed=2, **cfg), profile=profiles["tt"])
    ca = state_checksum(params_state(a.parameters()))
    assert ca == state_checksum(params_state(b.parameters()))
    assert ca != state_checksum(params_state(c.parameters()))


def test_few_shot_improves_over_zero_shot_on_learnable_target():
    deltas = []
    for seed in (0, 1, 2):
        model, profiles = tiny_zgul()
        pool = _sentences("tt", 60, 30 + seed)
        test = _sentences("tt", 25, 90 + seed)
        zero = evaluate(model, test, profiles={"tt": profiles["tt"]}).f1
        tuned = few_shot_finetune(
            model, pool,
            FewShotConfig(n_examples=60, lr=5e-3, epochs=4, batch_size=8, seed=seed),
            profile=profiles["tt"],
        )
        deltas.append(evaluate(tuned, test, profiles={"tt": profiles["tt"]}).f1 - zero)
    assert sum(deltas) / len(deltas) > 0.1


def test_few_shot_table_covers_requested_bins():
    model, profiles = tiny_zgul()
    pool = _sentences("tt", 30, 3)
    test = _sentences("tt", 8, 4)
    rows = few_shot_table(model, pool, test,
                          FewShotConfig(lr=1e-3, epochs=1, batch_size=4, seed=0),
                          profile=profiles["tt"], bins=(5, 20))
    assert [n for n, _ in rows] == [5, 20]
    assert all(0.0 <= f1 <= 1.0 for _, f1 in rows)


# -- evaluation helpers --------------------------------------------------


def test_evaluate_requires_labels_and_profiles():
    model, profiles = tiny_zgul()
    with pytest.raises(DataError, match="needs labeled"):
        evaluate(model, [Encoded(np.array([5], dtype=np.int64), None, "aa")])
    with pytest.raises(DataError, match="no typology profile"):
        predict_sentence(model, Encoded(np.array([5], dtype=np.int64), None, "zz"))


def test_log_csv_layout(tmp_path):
    records = [
        EpochRecord(1, "train", 1.25, None),
        EpochRecord(1, "dev", None, 0.5),
    ]
    p = tmp_path / "log.csv"
    write_training_log_csv(p, records)
    lines = p.read_text().strip().split("\n")
    assert lines[0] == "epoch,split,loss,micro_f1"
    assert lines[1] == "1,train,1.250000,"
    assert lines[2] == "1,dev,,0.500000"
