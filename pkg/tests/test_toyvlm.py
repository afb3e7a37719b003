import numpy as np
import pytest

from compresslab import diffcore as dc
from compresslab import toyvlm as tv
from compresslab.compressor import CompressionConfig, make_hook


def test_dataset_is_deterministic(tiny_cfg):
    a = tv.generate_dataset(tiny_cfg, 20, seed=0)
    b = tv.generate_dataset(tiny_cfg, 20, seed=0)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.object_patches == b.object_patches and np.array_equal(a.labels, b.labels)


def test_labels_balanced():
    ds = tv.generate_dataset(tv.ModelConfig(), 1000, seed=4)
    assert abs(int(ds.labels.sum()) - 500) <= 20


def test_label_matches_objects(tiny_cfg):
    ds = tv.generate_dataset(tiny_cfg, 50, seed=2)
    for s in ds:
        assert s.label == int(s.query_class in s.object_classes)
        assert 1 <= len(s.object_patches) <= 4 and len(set(s.object_classes)) == len(s.object_classes)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_erasing_objects_makes_every_label_no(tiny_cfg):
    ds = tv.erase_objects(tv.generate_dataset(tiny_cfg, 30, seed=5))
    assert np.all(ds.labels == tv.NO)
    assert ds.images.max() <= tv.TaskConfig().background_max


def test_forward_shapes_and_row_sums(tiny_weights, tiny_data):
    tr = tv.forward(tiny_weights, tiny_data.images[:3], tiny_data.prompts[:3])
    cfg = tiny_weights.config
    n = cfg.n_visual + cfg.prompt_len
    assert tr.final_logits.shape == (3, 2)
    for a in tr.attn:
        assert a.shape == (3, cfg.heads, n, n)
        np.testing.assert_allclose(a.value.sum(-1), 1.0, atol=1e-9)
    for m in tr.index_maps:
        np.testing.assert_array_equal(m, np.broadcast_to(np.arange(cfg.n_visual), m.shape))


def test_mask_semantics(tiny_weights, tiny_data):
    cfg = tiny_weights.config
    a = tv.forward(tiny_weights, tiny_data.images[0], tiny_data.prompts[0]).attention(1)[0]
    nv = cfg.n_visual
    assert np.all(a[:, :nv, nv:] == 0.0)                       # visual never sees text
    assert np.all(a[:, nv:, :nv] > 0.0)                        # text sees every visual token
    assert np.all(np.triu(a[:, nv:, nv:], k=1) == 0.0)         # causal text


def test_zero_query_key_gives_uniform_rows(tiny_weights, tiny_data):
    w = tiny_weights.copy()
    for l in range(w.config.layers):
        w.params[f"L{l}.wq"][:] = 0.0
        w.params[f"L{l}.wk"][:] = 0.0
    a = tv.forward(w, tiny_data.images[0], tiny_data.prompts[0]).attention(2)[0]
    nv, n = w.config.n_visual, a.shape[-1]
    np.testing.assert_allclose(a[:, -1], 1.0 / n)
    np.testing.assert_allclose(a[:, :nv, :nv], 1.0 / nv)


def test_hook_halving_visual_tokens(tiny_weights, tiny_data):
    cfg = tiny_weights.config
    hook = make_hook(CompressionConfig(((2, 0.5),)), cfg.prompt_len)
    tr = tv.forward(tiny_weights, tiny_data.images[:2], tiny_data.prompts[:2], hook)
    half = -(-cfg.n_visual // 2)
    assert tr.n_visual == [16, 16, half, half]
    assert tr.attn[2].shape[-1] == half + cfg.prompt_len
    for m in tr.index_maps[2:]:
        assert np.all(np.diff(m, axis=1) > 0)


def test_text_tokens_untouched_by_hook(tiny_weights, tiny_data):
    cfg = tiny_weights.config
    hook = make_hook(CompressionConfig(((1, 0.25),)), cfg.prompt_len)
    plain = tv.forward(tiny_weights, tiny_data.images[:2], tiny_data.prompts[:2])
    hooked = tv.forward(tiny_weights, tiny_data.images[:2], tiny_data.prompts[:2], hook)
    # the first layer runs before any hook, so its text outputs agree exactly
    np.testing.assert_array_equal(plain.hidden_out[0].value[:, -cfg.prompt_len:],
                                  hooked.hidden_out[0].value[:, -cfg.prompt_len:])
    assert hooked.hidden_in[1].shape[1] == 4 + cfg.prompt_len


def test_empty_hook_rejected(tiny_weights, tiny_data):
    with pytest.raises(ValueError, match="empty"):
        tv.forward(tiny_weights, tiny_data.images[0], tiny_data.prompts[0],
                   lambda st: np.zeros(0, dtype=int) if st.layer == 1 else None)


def test_mismatched_prompt_rejected(tiny_weights, tiny_data):
    with pytest.raises(ValueError):
        tv.forward(tiny_weights, tiny_data.images[0], tiny_data.prompts[0][:2])


@pytest.mark.parametrize("logits,answer", [((2.0, -1.0), tv.NO), ((0.0, 0.0), tv.NO), ((-3.0, 5.0), tv.YES)])
def test_decode_answer(logits, answer):
    # logits are ordered (no, yes)
    assert tv.decode_answer(np.array(logits)) == answer


def test_decode_answer_yes_slot():
    assert tv.decode_answer(np.array([-1.0, 2.0])) == tv.YES


def test_retention_one_is_identity(tiny_weights, tiny_data):
    cfg = tiny_weights.config
    hf = lambda: make_hook(CompressionConfig(((2, 1.0),)), cfg.prompt_len)
    np.testing.assert_array_equal(tv.predict(tiny_weights, tiny_data.images, tiny_data.prompts, hf),
                                  tv.predict(tiny_weights, tiny_data.images, tiny_data.prompts))


def test_constant_answer_model_scores_half():
    cfg = tv.ModelConfig(grid_side=4, model_dim=16, heads=2, layers=4, ffn_dim=24)
    w = tv.init_weights(cfg, 0)
    w.params["head_w"][:] = 0.0
    w.params["head_b"][:] = [1.0, 0.0]
    ds = tv.generate_dataset(cfg, 200, 9)
    assert tv.accuracy(w, ds) == pytest.approx(0.5, abs=0.02)


def test_accuracy_rejects_empty(tiny_weights, tiny_data):
    with pytest.raises(ValueError):
        tv.accuracy(tiny_weights, tiny_data.subset(np.array([], dtype=int)))


def test_pixel_gradient_of_cross_entropy(tiny_weights, tiny_data):
    tape = Tape_ = dc.Tape()
    x = tape.leaf(tiny_data.images[:2])
    tr = tv.forward(tiny_weights, x, tiny_data.prompts[:2], tape=tape)
    loss = tv.cross_entropy(tr.logits, tiny_data.labels[:2])
    assert dc.finite_difference_check(loss, x, step=1e-5).max_rel_error < 1e-4


def test_training_is_deterministic(tiny_cfg):
    tr = tv.generate_dataset(tiny_cfg, 64, 1)
    va = tv.generate_dataset(tiny_cfg, 32, 2)
    tc = tv.TrainConfig(max_epochs=1)
    _, a = tv.train(tiny_cfg, tr, va, seed=7, tc=tc)
    _, b = tv.train(tiny_cfg, tr, va, seed=7, tc=tc)
    assert a.digest == b.digest and a.epochs == 1


def test_shuffled_labels_do_not_generalise(tiny_cfg):
    tr = tv.generate_dataset(tiny_cfg, 256, 21)
    tr.labels = np.random.default_rng(0).permutation(tr.labels)
    va = tv.generate_dataset(tiny_cfg, 200, 22)
    _, lg = tv.train(tiny_cfg, tr, va, seed=0, tc=tv.TrainConfig(max_epochs=3))
    assert lg.final_val_accuracy <= 0.60


def test_evidence_drop_relabels(tiny_cfg):
    ds = tv.generate_dataset(tiny_cfg, 40, 3)
    rng = np.random.default_rng(0)
    keep, labels = tv.evidence_drop(ds, np.arange(40), tiny_cfg.n_visual, 0.5, 0.5, rng)
    assert keep.shape == (40, 8)
    for i in range(40):
        kept = set(keep[i].tolist())
        s = ds[i]
        assert labels[i] == int(any(c == s.query_class for p, c in zip(s.object_patches, s.object_classes)
                                    if p in kept))
        assert np.all(np.diff(keep[i]) > 0)


def test_weights_round_trip(tmp_path, tiny_weights):
    meta = tv.save_weights(tiny_weights, tmp_path / "w.clab", seed=3)
    back = tv.load_weights(tmp_path / "w.clab")
    assert back.digest() == tiny_weights.digest() and back.config == tiny_weights.config
    assert meta["seed"] == 3 and meta["format_version"] == tv.FORMAT_VERSION


def test_dataset_round_trip_and_tamper(tmp_path, tiny_cfg, tiny_data):
    tv.save_dataset(tiny_data, tmp_path / "d.clab", tiny_cfg)
    back, cfg = tv.load_dataset(tmp_path / "d.clab")
    assert cfg == tiny_cfg and back.object_patches == tiny_data.object_patches
    np.testing.assert_array_equal(back.images, tiny_data.images)
    raw = bytearray((tmp_path / "d.clab").read_bytes())
    raw[20] ^= 0xFF
    (tmp_path / "d.clab").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="digest"):
        tv.load_dataset(tmp_path / "d.clab")


def test_fnv_reference_values():
    assert tv.fnv1a64(b"") == "cbf29ce484222325"
    assert tv.fnv1a64(b"a") == "af63dc4c8601ec8c"
