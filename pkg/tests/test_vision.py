import numpy as np
import pytest

from tinymm import compute as C
from tinymm.errors import ConfigError
from oracles import block, ln, randomize
from tinymm.vision import VisionConfig, VisionEncoder, patch_count, patchify


def test_patch_count_published_grids():
    assert patch_count(336, 14) == 576
    assert patch_count(384, 14) == 729
    assert patch_count(8, 4) == 4


def test_patch_count_drops_remainder_and_rejects_oversized_patch():
    assert patch_count(10, 4) == 4
    with pytest.raises(ConfigError):
        patch_count(4, 8)
    with pytest.raises(ConfigError):
        VisionConfig(resolution=10, patch_size=4, width=8, heads=2)


def test_patchify_row_major():
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    patches = patchify(img, 2)
    np.testing.assert_array_equal(patches[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(patches[0, 2], [8, 9, 12, 13])


def test_encode_matches_hand_attention():
    cfg = VisionConfig(resolution=4, patch_size=2, depth=1, width=4, heads=1, channels=1)
    rng = np.random.default_rng(1)
    enc = VisionEncoder(cfg, rng, np.float64)
    randomize(enc, rng)
    img = rng.random((1, 4, 4))
    out = enc.encode(img).data
    x = patchify(img[None], 2)[0] @ enc.patch_embed.weight.data + enc.patch_embed.bias.data + enc.pos.data
    x = block(x, enc.blocks[0], causal=False)
    ref = ln(x, enc.ln_f.gain.data, enc.ln_f.bias.data)
    assert np.max(np.abs(out - ref)) < 1e-8


def test_encode_shape_and_determinism():
    cfg = VisionConfig(resolution=8, patch_size=4, depth=2, width=8, heads=2)
    enc = VisionEncoder(cfg, np.random.default_rng(0), np.float64)
    img = np.random.default_rng(1).random((3, 8, 8))
    a, b = enc.encode(img).data, enc.encode(img).data
    assert a.shape == (4, 8)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(a))


def test_encode_rejects_wrong_resolution():
    enc = VisionEncoder(VisionConfig(resolution=8, patch_size=4, width=8, heads=2), np.random.default_rng(0))
    with pytest.raises(C.ShapeError):
        enc.encode(np.zeros((3, 12, 12)))


def test_batch_permutation_has_no_leakage():
    enc = VisionEncoder(VisionConfig(resolution=8, patch_size=4, width=8, heads=2), np.random.default_rng(0),
                        np.float64)
    imgs = np.random.default_rng(2).random((3, 3, 8, 8))
    out = enc.encode(imgs).data
    swapped = enc.encode(imgs[[2, 0, 1]]).data
    np.testing.assert_allclose(swapped, out[[2, 0, 1]], atol=1e-12)


def test_freeze_prefix_semantics():
    enc = VisionEncoder(VisionConfig(resolution=8, patch_size=4, depth=4, width=8, heads=2),
                        np.random.default_rng(0))
    enc.set_freeze_prefix(0)
    assert all(p.trainable for p in enc.parameters())
    enc.set_freeze_prefix(2)
    assert not enc.patch_embed.weight.trainable and not enc.pos.trainable
    assert not any(p.trainable for b in enc.blocks[:2] for p in b.parameters())
    assert all(p.trainable for b in enc.blocks[2:] for p in b.parameters())
    enc.set_freeze_prefix(4)
    trainable = [n for n, p in enc.named_parameters() if p.trainable]
    assert trainable and all(n.startswith("ln_f") for n in trainable)
    with pytest.raises(ConfigError):
        enc.set_freeze_prefix(5)


def test_share_k_rule():
    assert VisionConfig(depth=24, width=8, heads=2).share_freeze_k() == 12
    assert VisionConfig(depth=5, width=8, heads=2).share_freeze_k() == 2
