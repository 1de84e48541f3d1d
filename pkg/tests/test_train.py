import csv
import io
import math

import numpy as np
import pytest

from hresformer.checkpoint import load_checkpoint
from hresformer.losses import deep_supervised_loss
from hresformer.model import HResFormer
from hresformer.nn import SGD
from hresformer.phantom import (generate_phantom, make_split, normalize, read_manifest,
                                write_dataset)
from hresformer.train import (Case, ConfigError, TrainConfig, TrainingError, evaluate,
                              evaluate_predictions, format_dsc_csv, load_cases, parse_config,
                              poly_lr, step_lrs, train, train_epoch)

TINY = """
# tiny model on 4x16x16 phantoms
epochs = 3
n_train = 2
n_val = 1
n_test = 1
volume_shape = 4, 16, 16
semi_axes_min = 1.0, 2.0, 2.0
semi_axes_max = 1.5, 4.0, 4.0
channels2d = 4, 4, 8, 8
depths2d = 1, 1, 1, 1
heads2d = 1, 1, 2, 2
ratios2d = 2, 2, 1, 1
channels3d = 4, 4, 8, 8
depths3d = 2, 0, 0, 0
heads3d = 1, 1, 2, 2
window3d = 2, 2, 2
mlp_ratio = 2
hlgm_dim = 4
hlgm_blocks = 1
hlgm_heads = 1
hlgm_region = 1, 2, 2
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    s = parse_config(TINY)
    split = make_split(s.phantom, s.train.n_train, s.train.n_val, s.train.n_test, s.train.seed)
    return write_dataset(s.phantom, split, tmp_path_factory.mktemp("data"))


def _settings(extra=""):
    return parse_config(TINY + extra)


# -- schedule ---------------------------------------------------------------------------------
def test_poly_lr_examples():
    assert poly_lr(0, 100, 0.01) == 0.01
    assert poly_lr(50, 100, 0.01, power=1.0) == 0.005
    assert poly_lr(250, 1000, 0.01, 0.9) == pytest.approx(0.01 * math.exp(0.9 * math.log(0.75)), rel=1e-15)
    lrs = [poly_lr(e, 20, 0.01) for e in range(20)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        poly_lr(100, 100, 0.01)
    with pytest.raises(ValueError):
        poly_lr(-1, 100, 0.01)


def test_step_lrs_per_epoch_and_per_iteration():
    per_epoch = TrainConfig(epochs=4)
    assert step_lrs(2, 3, per_epoch) == [poly_lr(2, 4, 0.01)] * 3
    per_step = TrainConfig(epochs=4, lr_per_iteration=True)
    assert step_lrs(2, 3, per_step) == [poly_lr(k, 12, 0.01) for k in (6, 7, 8)]


# -- config -----------------------------------------------------------------------------------
def test_parse_config_fields_and_seed():
    s = _settings("seed = 4\nbase_lr = 0.02\naugment = false\n")
    assert s.model.channels2d == (4, 4, 8, 8)
    assert s.phantom.shape == (4, 16, 16)
    assert s.train.base_lr == 0.02 and s.train.augment is False
    assert s.model.seed == s.train.seed == s.phantom.seed == 4
    assert parse_config(TINY + "seed = 4\n", seed=9).train.seed == 9


@pytest.mark.parametrize("bad", ["no_such_key = 1", "epochs", "epochs = 0", "augment = maybe",
                                 "base_lr = -1", "num_classes = 1", "depths3d = 1, 1, 1, 1"])
def test_parse_config_errors(bad):
    with pytest.raises(ConfigError):
        parse_config(TINY + bad + "\n")


# -- training ---------------------------------------------------------------------------------
def test_zero_lr_epoch_leaves_params_untouched(dataset, tmp_path):
    s = _settings("epochs = 1\nbase_lr = 0\n")
    model, _ = train(s, dataset, tmp_path)
    fresh = HResFormer(s.model)
    for k, p in fresh.params().items():
        assert p.data.tobytes() == model.params()[k].data.tobytes()


def test_overfit_single_batch():
    s = _settings()
    vol = generate_phantom(s.phantom, 1)
    x = normalize(vol.intensity)
    model = HResFormer(s.model)
    opt = SGD(model.params(), 0.01, 0.9)
    losses = []
    for _ in range(20):
        report = deep_supervised_loss(model(x), vol.labels)
        losses.append(report.total.item())
        opt.zero_grad()
        report.total.backward()
        opt.step()
    decreases = int((np.diff(losses) < 0).sum())
    assert decreases >= 0.9 * (len(losses) - 1)


def test_outputs_and_metrics_csv(dataset, tmp_path):
    _, rows = train(_settings(), dataset, tmp_path)
    text = (tmp_path / "metrics.csv").read_text()
    parsed = list(csv.reader(io.StringIO(text)))
    assert parsed[0] == ["epoch", "lr", "train_loss", "val_mean_dsc"]
    assert [r[0] for r in parsed[1:]] == ["0", "1", "2"]
    assert float(parsed[1][1]) == 0.01
    assert (tmp_path / "last.ckpt").exists() and (tmp_path / "best.ckpt").exists()
    last = load_checkpoint(tmp_path / "last.ckpt")
    assert (last.epoch, last.step) == (3, 6)


def test_runs_are_byte_reproducible(dataset, tmp_path):
    for run in ("a", "b"):
        train(_settings("epochs = 2\n"), dataset, tmp_path / run)
    for name in ("metrics.csv", "last.ckpt", "best.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted(dataset, tmp_path):
    s = _settings()
    train(s, dataset, tmp_path / "full")
    train(s, dataset, tmp_path / "split", stop_after=2)
    train(s, dataset, tmp_path / "split", resume=tmp_path / "split" / "last.ckpt", stop_after=1)
    for name in ("metrics.csv", "last.ckpt"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "split" / name).read_bytes()


def test_non_finite_loss_aborts_with_context(dataset):
    s = _settings()
    cases = load_cases(read_manifest(dataset)["train"][:1])
    cases[0].image = cases[0].image.copy()
    cases[0].image[0, 0, 0, 0] = np.nan
    model = HResFormer(s.model)
    with pytest.raises(TrainingError, match=r"epoch 3, batch 0, lr 0\.005"):
        train_epoch(model, SGD(model.params()), cases, 3, 0.005, s.train)


def test_train_rejects_class_mismatch(dataset, tmp_path):
    with pytest.raises(TrainingError):
        train(_settings("num_classes = 4\n"), dataset, tmp_path)


# -- evaluation -------------------------------------------------------------------------------
def _cases(rng, n=3):
    return [Case(f"c{i}", rng.standard_normal((1, 4, 16, 16)).astype(np.float32),
                 rng.integers(0, 3, (4, 16, 16)).astype(np.uint8), 3) for i in range(n)]


def test_ground_truth_scores_one(rng):
    cases = _cases(rng)
    rows = evaluate_predictions([c.labels for c in cases], cases, 3)
    assert all(v == 1.0 for r in rows for v in r[1:])
    assert rows[-1][0] == "mean"


def test_zero_head_model_predicts_background(rng):
    s = _settings()
    model = HResFormer(s.model)
    for name, p in model.params().items():
        if ".heads." in name:
            p.data = np.zeros_like(p.data)
    rows = evaluate(model, _cases(rng), 3)
    assert all(v == 0.0 for r in rows for v in r[1:])


def test_mean_row_is_column_mean(rng):
    cases = _cases(rng, 4)
    preds = [rng.integers(0, 3, c.labels.shape) for c in cases]
    rows = evaluate_predictions(preds, cases, 3)
    body, mean = rows[:-1], rows[-1]
    for j in range(1, 4):
        assert mean[j] == pytest.approx(sum(r[j] for r in body) / len(body), rel=1e-15)
    text = format_dsc_csv(rows, 3)
    assert text.splitlines()[0] == "case_id,dsc_class1,dsc_class2,mean_dsc"
    assert len(text.splitlines()) == 6


def test_evaluate_rejects_class_mismatch(rng):
    s = _settings()
    cases = _cases(rng)
    cases[0].num_classes = 5
    with pytest.raises(TrainingError):
        evaluate(HResFormer(s.model), cases, 3)
