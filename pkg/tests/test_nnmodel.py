import numpy as np
import pytest
import torch

from celd.datahub import LabelSpace
from celd.nnmodel import (
    Checkpoint,
    CheckpointError,
    ClassifierConfig,
    DenseBlock,
    build,
    count_weighted_layers,
    extend_head,
    load,
    predict_proba,
    save,
)

TOY = ClassifierConfig(input_side=32, growth_rate=4, block_layout=(2, 2, 2, 2), num_classes=2, init_seed=5)


def batch(n=4, side=32, seed=0):
    return np.random.default_rng(seed).random((n, side, side, 3), dtype=np.float32)


def test_full_layout_has_121_weighted_layers():
    model = build(ClassifierConfig(input_side=224, growth_rate=32, stem_channels=64,
                                   block_layout=(6, 12, 24, 16), num_classes=2))
    assert count_weighted_layers(model) == 121
    assert model.feature_width == 1024


def test_seeded_construction():
    a, b = build(TOY).state_dict(), build(TOY).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = build(ClassifierConfig(**{**TOY.to_dict(), "init_seed": 6})).state_dict()
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_head_shape():
    model = build(TOY)
    assert model.head.weight.shape == (2, model.feature_width)
    assert model.head.bias.shape == (2,)


def test_dense_block_width_grows_linearly():
    block = DenseBlock(3, 10, 4, 4)
    x = torch.rand(2, 10, 8, 8)
    out = x
    for k, layer in enumerate(block, start=1):
        out = layer(out)
        assert out.shape[1] == 10 + k * 4
    assert block.out_channels == 22


class TestForward:
    def test_probabilities(self):
        probs = predict_proba(build(TOY), batch(5))
        assert probs.shape == (5, 2)
        assert torch.all(probs > 0)
        torch.testing.assert_close(probs.sum(1), torch.ones(5), atol=1e-6, rtol=0)

    def test_zero_head_is_uniform(self):
        model = build(ClassifierConfig(**{**TOY.to_dict(), "num_classes": 3}))
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        probs = predict_proba(model, batch(3))
        torch.testing.assert_close(probs, torch.full((3, 3), 1 / 3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            predict_proba(build(TOY), batch(2, side=16))
        with pytest.raises(ValueError):
            predict_proba(build(TOY), np.zeros((2, 32, 32)))


def test_config_validation():
    with pytest.raises(ValueError):
        ClassifierConfig(num_classes=1)
    with pytest.raises(ValueError):
        ClassifierConfig(block_layout=())
    with pytest.raises(ValueError):
        ClassifierConfig(growth_rate=0)


def trained_like_source(seed=0):
    """A source model with non-trivial BN statistics and weights."""
    model = build(TOY, LabelSpace.source())
    model.train()
    with torch.no_grad():
        for i in range(3):
            model(torch.rand(6, 3, 32, 32, generator=torch.Generator().manual_seed(seed + i)))
    return Checkpoint.from_model(model, epochs_run=3)


class TestExtendHead:
    def test_backbone_and_shared_rows_copied(self):
        src = trained_like_source()
        ext = extend_head(src, LabelSpace.target(), seed=1)
        state = ext.state_dict()
        for k, v in src.state.items():
            if k.startswith("head."):
                assert torch.equal(state[k][:2], v)
            else:
                assert torch.equal(state[k], v), k
        assert ext.head.weight.shape[0] == 3
        assert ext.labelspace == LabelSpace.target()

    def test_logits_preserved(self):
        src = trained_like_source()
        cs = src.to_model().eval()
        ct = extend_head(src, LabelSpace.target(), seed=1).eval()
        x = torch.rand(10, 3, 32, 32, generator=torch.Generator().manual_seed(42))
        with torch.no_grad():
            diff = (cs(x) - ct(x)[:, :2]).abs().max().item()
        assert diff == 0.0

    def test_degenerate_extension(self):
        src = trained_like_source()
        same = extend_head(src, LabelSpace.source())
        x = batch(4)
        assert torch.equal(predict_proba(same, x), predict_proba(src.to_model(), x))

    def test_new_row_seeded(self):
        src = trained_like_source()
        a = extend_head(src, LabelSpace.target(), seed=3).head.weight[2]
        b = extend_head(src, LabelSpace.target(), seed=3).head.weight[2]
        c = extend_head(src, LabelSpace.target(), seed=4).head.weight[2]
        assert torch.equal(a, b) and not torch.equal(a, c)

    def test_non_prefix(self):
        with pytest.raises(ValueError):
            extend_head(trained_like_source(), LabelSpace(("DR", "Healthy", "Glaucoma")))

    def test_config_mismatch(self):
        other = ClassifierConfig(**{**TOY.to_dict(), "growth_rate": 8})
        with pytest.raises(ValueError):
            extend_head(trained_like_source(), LabelSpace.target(), config=other)
        extend_head(trained_like_source(), LabelSpace.target(), config=TOY)


class TestCheckpointIO:
    def test_roundtrip(self, tmp_path):
        src = trained_like_source()
        src.metadata.update(best_val_loss=0.125, seed=3)
        path = save(src, tmp_path / "ck" / "source.pt")
        assert (tmp_path / "ck" / "source.json").is_file()
        back = load(path)
        assert back.config == src.config and back.labelspace == src.labelspace
        assert back.metadata == src.metadata
        assert set(back.state) == set(src.state)
        assert all(torch.equal(back.state[k], src.state[k]) for k in src.state)

    def test_truncated(self, tmp_path):
        path = save(trained_like_source(), tmp_path / "m.pt")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError, match="corrupt"):
            load(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load(tmp_path / "none.pt")

    def test_version_mismatch(self, tmp_path):
        path = save(trained_like_source(), tmp_path / "m.pt")
        side = tmp_path / "m.json"
        side.write_text(side.read_text().replace('"format_version": 1', '"format_version": 99'))
        with pytest.raises(CheckpointError, match="format"):
            load(path)

    def test_load_then_extend(self, tmp_path):
        path = save(trained_like_source(), tmp_path / "m.pt")
        model = extend_head(load(path), LabelSpace.target())
        assert predict_proba(model, batch(2)).shape == (2, 3)
