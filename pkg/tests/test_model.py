"""Model heads: shapes, class independence, adaptation, decode, snapshots."""

import numpy as np
import pytest
import torch

from cit_css.errors import ContractError, SnapshotFormatError
from cit_css.model import (
    LogitBundle,
    ModelConfig,
    ModelSnapshot,
    QueryBank,
    SegModel,
    cit_adapt,
    cit_forward,
    extend_queries,
    linear_mask_logits,
    semantic_decode,
    softmax_head_forward,
    upsample_bilinear,
)

TINY = ModelConfig(feature_dim=16, base_width=8, ffn_hidden=32)


@pytest.fixture()
def tiny_model():
    torch.manual_seed(101)
    return SegModel(TINY, head="cit", class_ids=(1, 2, 3))


@pytest.fixture()
def images():
    gen = torch.Generator().manual_seed(5)
    return torch.rand(2, 3, 32, 32, generator=gen)


def test_encoder_shapes_and_stride(tiny_model, images):
    feats = tiny_model.extract_features(images)
    assert feats.values.shape == (2, 16, 8, 8)
    assert feats.stride == 4 and feats.channels == 16
    single = tiny_model.extract_features(images[0])
    assert single.values.shape == (1, 16, 8, 8) and not single.batched


def test_encoder_rejects_non_multiple_dims(tiny_model):
    with pytest.raises(ContractError):
        tiny_model.extract_features(torch.zeros(3, 30, 32))
    with pytest.raises(ContractError):
        tiny_model.extract_features(torch.zeros(2, 3, 32, 31))


def test_encoder_zero_image_finite(tiny_model):
    feats = tiny_model.extract_features(torch.zeros(3, 32, 32))
    assert torch.isfinite(feats.values).all()


def test_encoder_eval_deterministic(tiny_model, images):
    tiny_model.eval()
    with torch.no_grad():
        a = tiny_model.extract_features(images).values
        b = tiny_model.extract_features(images).values
    assert torch.equal(a, b)


def test_upsample_bilinear_matches_interpolate():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(2, 4, 8, 8, generator=gen)
    ours = upsample_bilinear(x, (32, 32))
    ref = torch.nn.functional.interpolate(x, size=(32, 32), mode="bilinear", align_corners=False)
    assert torch.allclose(ours, ref, atol=1e-6)


def test_upsample_channel_restriction_exact():
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(2, 6, 8, 8, generator=gen)
    full = upsample_bilinear(x, (31, 17))
    sub = upsample_bilinear(x[:, 2:5], (31, 17))
    assert torch.equal(full[:, 2:5], sub)


def test_bundle_shapes_batched_and_single(tiny_model, images):
    bundle = tiny_model.forward_bundle(images)
    assert bundle.presence_logits.shape == (2, 3)
    assert bundle.mask_logits.shape == (2, 3, 32, 32)
    assert bundle.class_ids == (1, 2, 3)
    one = cit_forward(tiny_model.extract_features(images[0]), tiny_model.bank)
    assert one.presence_logits.shape == (3,)
    assert one.mask_logits.shape == (3, 32, 32)
    assert not one.batched


def test_single_class_bank_shapes(images):
    torch.manual_seed(0)
    bank = QueryBank((4,), dim=16, num_layers=1)
    model = SegModel(TINY, head="cit", bank=bank)
    out = cit_forward(model.extract_features(images[0]), bank)
    assert out.presence_logits.shape == (1,)
    assert out.mask_logits.shape == (1, 32, 32)


def test_row_restriction_bit_exact(tiny_model, images):
    tiny_model.eval()
    with torch.no_grad():
        full = tiny_model.forward_bundle(images)
        sub_bank = tiny_model.bank.restrict((1, 3))
        sub = cit_forward(tiny_model.extract_features(images), sub_bank, out_size=(32, 32))
    ref = full.restrict((1, 3))
    assert torch.equal(sub.mask_logits, ref.mask_logits)
    assert torch.equal(sub.presence_logits, ref.presence_logits)


def test_extend_queries_preserves_old_logits_bitwise(tiny_model, images):
    tiny_model.eval()
    with torch.no_grad():
        before = tiny_model.forward_bundle(images)
        gen = torch.Generator().manual_seed(3)
        grown = extend_queries(tiny_model.bank, (5, 6), generator=gen)
        after = cit_forward(tiny_model.extract_features(images), grown, out_size=(32, 32))
    assert grown.class_ids == (1, 2, 3, 5, 6)
    kept = after.restrict((1, 2, 3))
    assert torch.equal(kept.mask_logits, before.mask_logits)
    assert torch.equal(kept.presence_logits, before.presence_logits)


def test_extend_queries_decoder_params_bit_identical(tiny_model):
    grown = extend_queries(tiny_model.bank, (7,))
    old = dict(tiny_model.bank.named_parameters())
    new = dict(grown.named_parameters())
    for name, p in old.items():
        if name == "queries":
            assert torch.equal(p.detach(), new[name].detach()[: p.shape[0]])
        else:
            assert torch.equal(p.detach(), new[name].detach())


def test_extend_queries_adapted_rows(tiny_model):
    w = torch.full((2, 16), 0.25)
    grown = extend_queries(tiny_model.bank, (4, 5), init="adapted", weights=w)
    assert torch.equal(grown.queries.detach()[-2:], w)
    with pytest.raises(ValueError):
        extend_queries(tiny_model.bank, (4, 5), init="adapted", weights=torch.zeros(1, 16))
    with pytest.raises(ValueError):
        extend_queries(tiny_model.bank, (4,), init="nope")


def test_extend_queries_id_collision(tiny_model):
    with pytest.raises(ValueError):
        extend_queries(tiny_model.bank, (2,))
    with pytest.raises(ValueError):
        extend_queries(tiny_model.bank, (0, 4))


def test_extend_queries_generator_reproducible(tiny_model):
    a = extend_queries(tiny_model.bank, (5,), generator=torch.Generator().manual_seed(9))
    b = extend_queries(tiny_model.bank, (5,), generator=torch.Generator().manual_seed(9))
    assert torch.equal(a.queries.detach(), b.queries.detach())


def test_softmax_head_distribution(images):
    torch.manual_seed(2)
    model = SegModel(TINY, head="softmax", num_classes=4)
    probs = model.forward_probs(images)
    assert probs.shape == (2, 5, 32, 32)
    sums = probs.sum(dim=1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
    with pytest.raises(ValueError):
        softmax_head_forward(model.extract_features(images), torch.zeros(1, 16))


def test_softmax_head_violates_restriction_invariance(images):
    # the coupling counterexample: dropping a row changes surviving
    # probabilities because the normalizer changes
    torch.manual_seed(4)
    model = SegModel(TINY, head="softmax", num_classes=4)
    feats = model.extract_features(images)
    w = model.softmax_head.weight.detach()
    full = softmax_head_forward(feats, w)
    sub = softmax_head_forward(feats, w[:4])
    assert not torch.allclose(full[:, :4], sub, atol=1e-6)


def test_cit_adapt_identity_and_budget(images):
    torch.manual_seed(6)
    model = SegModel(TINY, head="softmax", num_classes=4)
    feats = model.extract_features(images)
    w = model.softmax_head.weight.detach()[1:]  # foreground rows
    bank = cit_adapt(w)
    assert bank.class_ids == (1, 2, 3, 4)
    out = cit_forward(feats, bank, out_size=(32, 32))
    ref = upsample_bilinear(linear_mask_logits(feats.values, w), (32, 32))
    assert torch.equal(out.mask_logits, ref)
    # parameter cost: within +5% of the softmax head it replaces
    head_params = model.softmax_head.weight.numel()
    bank_params = sum(p.numel() for p in bank.parameters())
    assert bank_params <= head_params * 1.05


def test_semantic_decode_threshold_and_ties():
    presence = torch.tensor([3.0, 3.0])
    mask = torch.zeros(2, 2, 2)
    mask[0, 0, 0] = 4.0
    mask[1, 0, 0] = 4.0  # exact tie with class id below
    mask[1, 1, 1] = 4.0
    bundle = LogitBundle(presence, mask, class_ids=(2, 5))
    out = semantic_decode(bundle, tau=0.5)
    assert out.dtype == np.int32
    assert out[0, 0] == 2  # tie goes to the lowest class id
    assert out[1, 1] == 5
    assert out[0, 1] == 0 and out[1, 0] == 0  # below threshold -> background
    # raising tau above the achievable score blanks everything
    assert (semantic_decode(bundle, tau=0.999) == 0).all()


def test_semantic_decode_batched(images):
    torch.manual_seed(7)
    model = SegModel(TINY, head="cit", class_ids=(1, 2))
    out = model.decode(images)
    assert out.shape == (2, 32, 32)
    single = model.decode(images[0])
    assert single.shape == (32, 32)
    assert np.array_equal(single, out[0])


def test_snapshot_round_trip(tmp_path, tiny_model, images):
    tiny_model.eval()
    snap = ModelSnapshot.from_model(tiny_model, 0, (1, 2, 3), manifest={"note": "t"})
    with torch.no_grad():
        ref = tiny_model.forward_bundle(images)
    snap.save(tmp_path / "s")
    loaded = ModelSnapshot.load(tmp_path / "s")
    out = loaded.predict(images)
    assert torch.equal(out.mask_logits, ref.mask_logits)
    assert torch.equal(out.presence_logits, ref.presence_logits)
    assert loaded.task_index == 0 and loaded.owned_class_ids == (1, 2, 3)
    assert loaded.parameter_digest() == snap.parameter_digest()
    assert loaded.probe_digest() == snap.probe_digest()


def test_snapshot_manifest_fields(tmp_path, tiny_model):
    import json

    snap = ModelSnapshot.from_model(tiny_model, 0, (1, 2, 3))
    snap.save(tmp_path / "s")
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert set(manifest) >= {"task_index", "owned_class_ids", "hyperparams",
                             "format_version", "probe_digest"}


def test_snapshot_version_mismatch(tmp_path, tiny_model):
    import json

    snap = ModelSnapshot.from_model(tiny_model, 0, (1, 2, 3))
    snap.save(tmp_path / "s")
    path = tmp_path / "s" / "manifest.json"
    doc = json.loads(path.read_text())
    doc["format_version"] = 999
    path.write_text(json.dumps(doc))
    with pytest.raises(SnapshotFormatError):
        ModelSnapshot.load(tmp_path / "s")


def test_snapshot_detects_tampered_weights(tmp_path, tiny_model):
    snap = ModelSnapshot.from_model(tiny_model, 0, (1, 2, 3))
    snap.save(tmp_path / "s")
    blob = torch.load(tmp_path / "s" / "weights.pt", weights_only=True)
    name = next(iter(blob["state"]))
    blob["state"][name] = blob["state"][name] + 1.0
    torch.save(blob, tmp_path / "s" / "weights.pt")
    with pytest.raises(SnapshotFormatError):
        ModelSnapshot.load(tmp_path / "s")


def test_snapshot_predict_is_side_effect_free(tiny_model, images):
    snap = ModelSnapshot.from_model(tiny_model, 0, (1, 2, 3))
    before = snap.parameter_digest()
    snap.predict(images)
    snap.predict(images, class_ids=(2,))
    assert snap.parameter_digest() == before


def test_snapshot_restore_trains_independently(tiny_model, images):
    snap = ModelSnapshot.from_model(tiny_model, 0, (1, 2, 3))
    model = snap.restore()
    opt = torch.optim.SGD(model.parameters(), lr=0.5)
    bundle = model.forward_bundle(images)
    loss = bundle.mask_logits.square().mean() + bundle.presence_logits.square().mean()
    loss.backward()
    opt.step()
    # the frozen copy is untouched by training the restored model
    assert snap.parameter_digest() == ModelSnapshot.from_model(tiny_model, 0, (1, 2, 3)).parameter_digest()


def test_bundle_restrict_and_concat():
    a = LogitBundle(torch.tensor([1.0, 2.0]), torch.zeros(2, 4, 4), (1, 3))
    b = LogitBundle(torch.tensor([5.0]), torch.ones(1, 4, 4), (2,))
    merged = LogitBundle.concat([a, b])
    assert merged.class_ids == (1, 2, 3)
    assert merged.presence_logits.tolist() == [1.0, 5.0, 2.0]
    with pytest.raises(ContractError):
        LogitBundle.concat([a, LogitBundle(torch.tensor([0.0]), torch.zeros(1, 4, 4), (3,))])
    with pytest.raises(ContractError):
        a.restrict((4,))
