import numpy as np
import pytest
import torch

from hardmask.checkpoint import load_container, save_container
from hardmask.config import FrontendConfig, ModelConfig
from hardmask.corpus import assemble_batch
from hardmask.errors import CheckpointError, ContractError, InputTooShortError, NumericalError
from hardmask.masking import frame_mask
from hardmask.network import (
    EncoderOutput,
    build_targets,
    clone_as_teacher,
    decode_reconstruction,
    encode,
    extract_features,
    fingerprint,
    frame_count,
    frontend_weights,
    gradient_check,
    init_model,
    instance_normalize,
    load_parameter_arrays,
    masked_encoder_input,
    parameter_arrays,
    predict_frame_losses,
    receptive_field,
    shared_parameter_items,
)
from conftest import tiny_model_config
from oracles import hand_transformer_layer, naive_strided_conv


def feature_batch(rng, cfg, lengths):
    feats = [rng.normal(size=(n, cfg.dim)).astype(np.float32) for n in lengths]
    return assemble_batch(feats)


@pytest.fixture(scope="module")
def student():
    return init_model(tiny_model_config(), "student", np.random.default_rng(0))


# ------------------------------------------------------------- frontend


def test_passthrough_identity():
    cfg = FrontendConfig(passthrough=True)
    arr = np.random.default_rng(0).normal(size=(10, 8)).astype(np.float32)
    out = extract_features(arr, cfg)
    assert np.array_equal(out, arr)
    out[0, 0] = 99.0  # returned array is a copy
    assert arr[0, 0] != 99.0


def test_frame_count_formula_and_naive_conv():
    cfg = FrontendConfig(layers=((3, 10, 5),), seed=1)
    assert frame_count(100, cfg) == 19  # (100 - 10) // 5 + 1
    wave = np.random.default_rng(2).uniform(-1, 1, 100).astype(np.float32)
    out = extract_features(wave, cfg)
    assert out.shape == (19, 3)
    (w, b), = frontend_weights(cfg)
    raw = naive_strided_conv(wave[None, :].astype(np.float64), w.astype(np.float64), b, 5)
    from scipy.special import erf

    expected = 0.5 * raw * (1.0 + erf(raw / np.sqrt(2.0)))
    assert np.allclose(out, expected.T, atol=1e-5)


def test_zero_waveform_gives_zero_features():
    cfg = tiny_model_config().frontend
    wave = np.zeros(400, dtype=np.float32)
    assert np.all(extract_features(wave, cfg) == 0.0)  # biases are zero by construction


def test_too_short_waveform_rejected():
    cfg = tiny_model_config().frontend
    with pytest.raises(InputTooShortError):
        extract_features(np.zeros(receptive_field(cfg) - 1, dtype=np.float32), cfg)


def test_receptive_field_value():
    cfg = FrontendConfig(layers=((4, 10, 5), (4, 8, 4), (4, 4, 2)))
    assert receptive_field(cfg) == 105
    assert frame_count(105, cfg) == 1


# ------------------------------------------------------------- encoder


def test_encode_shapes(student, rng):
    batch = feature_batch(rng, student.cfg, [12, 9])
    enc = encode(student, batch)
    k = student.cfg.encoder_layers
    assert len(enc.per_layer) == k
    for layer_out in enc.per_layer:
        assert layer_out.shape == (2, 12, student.cfg.dim)
    assert enc.final.shape == (2, 12, student.cfg.dim)


def test_encode_final_is_norm_of_last_layer(student, rng):
    batch = feature_batch(rng, student.cfg, [10, 7])
    enc = encode(student, batch)
    expected = student.encoder.final_norm(enc.per_layer[-1])
    assert torch.equal(enc.final, expected)


def test_encode_empty_mask_identical_to_no_mask(student, rng):
    batch = feature_batch(rng, student.cfg, [11, 8])
    empty = frame_mask(batch.valid, [np.array([], dtype=np.int64)] * 2)
    a = encode(student, batch)
    b = encode(student, batch, empty)
    assert torch.equal(a.final, b.final)


def test_encode_shape_mismatch_rejected(student, rng):
    feats = [rng.normal(size=(5, student.cfg.dim + 1)).astype(np.float32)]
    batch = assemble_batch(feats)
    with pytest.raises(ContractError):
        encode(student, batch)


def test_single_layer_zero_weights_is_layernorm_of_input(rng):
    cfg = ModelConfig(dim=8, encoder_layers=1, attention_heads=2, ffn_dim=16,
                      head_layers=1, head_dim=8, layers_to_average=1,
                      frontend=FrontendConfig(passthrough=True))
    model = init_model(cfg, "student", np.random.default_rng(1))
    with torch.no_grad():
        layer = model.encoder.layers[0]
        for mod in (layer.attn.q_proj, layer.attn.k_proj, layer.attn.v_proj,
                    layer.attn.out_proj, layer.fc1, layer.fc2):
            mod.weight.zero_()
            mod.bias.zero_()
        model.encoder.pos_emb.zero_()
    batch = feature_batch(rng, cfg, [6])
    enc = encode(model, batch)
    x = torch.from_numpy(batch.features)
    # residual path is untouched; final applies the last layer norm
    assert torch.equal(enc.per_layer[0], x)
    expected = torch.nn.functional.layer_norm(x, (cfg.dim,))
    assert torch.allclose(enc.final, expected, atol=1e-6)


def test_single_layer_random_weights_vs_hand_oracle(rng):
    cfg = ModelConfig(dim=8, encoder_layers=1, attention_heads=2, ffn_dim=16,
                      head_layers=1, head_dim=8, layers_to_average=1,
                      frontend=FrontendConfig(passthrough=True))
    model = init_model(cfg, "student", np.random.default_rng(3), torch.float64)
    n = 7
    batch = feature_batch(rng, cfg, [n])
    layer = model.encoder.layers[0]
    params = {
        "heads": cfg.attention_heads,
        "ln1.weight": layer.ln1.weight.detach().numpy(),
        "ln1.bias": layer.ln1.bias.detach().numpy(),
        "q.weight": layer.attn.q_proj.weight.detach().numpy(),
        "q.bias": layer.attn.q_proj.bias.detach().numpy(),
        "k.weight": layer.attn.k_proj.weight.detach().numpy(),
        "k.bias": layer.attn.k_proj.bias.detach().numpy(),
        "v.weight": layer.attn.v_proj.weight.detach().numpy(),
        "v.bias": layer.attn.v_proj.bias.detach().numpy(),
        "out.weight": layer.attn.out_proj.weight.detach().numpy(),
        "out.bias": layer.attn.out_proj.bias.detach().numpy(),
        "ln2.weight": layer.ln2.weight.detach().numpy(),
        "ln2.bias": layer.ln2.bias.detach().numpy(),
        "fc1.weight": layer.fc1.weight.detach().numpy(),
        "fc1.bias": layer.fc1.bias.detach().numpy(),
        "fc2.weight": layer.fc2.weight.detach().numpy(),
        "fc2.bias": layer.fc2.bias.detach().numpy(),
        "final.weight": model.encoder.final_norm.weight.detach().numpy(),
        "final.bias": model.encoder.final_norm.bias.detach().numpy(),
    }
    x = batch.features[0].astype(np.float64) + model.encoder.pos_emb[:n].detach().numpy()
    block, final = hand_transformer_layer(x, params, np.ones(n, dtype=bool))
    with torch.no_grad():
        enc = encode(model, batch)
    assert np.allclose(enc.per_layer[0][0].numpy(), block, atol=1e-10)
    assert np.allclose(enc.final[0].numpy(), final, atol=1e-10)


def test_padding_invariance(student, rng):
    batch = feature_batch(rng, student.cfg, [12, 7])
    enc = encode(student, batch)
    pred = predict_frame_losses(student, enc, batch.valid)
    recon = decode_reconstruction(student, enc)

    tampered = feature_batch(rng, student.cfg, [12, 7])
    tampered.features[:] = batch.features
    tampered.features[1, 7:] = 99.0  # garbage at padded positions
    enc2 = encode(student, tampered)
    pred2 = predict_frame_losses(student, enc2, tampered.valid)
    recon2 = decode_reconstruction(student, enc2)

    valid = torch.from_numpy(batch.valid)
    assert torch.equal(enc.final[valid], enc2.final[valid])
    assert torch.equal(pred.values[valid], pred2.values[valid])
    assert torch.equal(recon[valid], recon2[valid])


def test_mask_embedding_substitution(student, rng):
    batch = feature_batch(rng, student.cfg, [10, 10])
    rows = [np.array([1, 4]), np.array([0, 9])]
    mask = frame_mask(batch.valid, rows)
    x = masked_encoder_input(student, batch, mask)
    emb = student.encoder.mask_emb.detach()
    for b, idx in enumerate(rows):
        for i in idx:
            assert torch.equal(x[b, i], emb)
    # outputs independent of the original features at masked positions
    tampered = feature_batch(rng, student.cfg, [10, 10])
    tampered.features[:] = batch.features
    for b, idx in enumerate(rows):
        tampered.features[b, idx] = -5.0
    a = encode(student, batch, mask)
    b2 = encode(student, tampered, mask)
    assert torch.equal(a.final, b2.final)


# ------------------------------------------------------------- heads


def test_predictor_sentinel_and_defined(student, rng):
    batch = feature_batch(rng, student.cfg, [9, 4])
    enc = encode(student, batch)
    pred = predict_frame_losses(student, enc, batch.valid)
    assert torch.isfinite(pred.values[torch.from_numpy(batch.valid)]).all()
    assert (pred.values[~torch.from_numpy(batch.valid)] == float("-inf")).all()


def test_predictor_zero_weights_bias_b(rng):
    cfg = tiny_model_config()
    model = init_model(cfg, "student", np.random.default_rng(2))
    with torch.no_grad():
        for conv in model.predictor.convs:
            conv.weight.zero_()
            conv.bias.zero_()
        model.predictor.head.weight.zero_()
        model.predictor.head.bias.fill_(0.75)
    batch = feature_batch(rng, cfg, [8, 5])
    pred = predict_frame_losses(model, encode(model, batch), batch.valid)
    valid = torch.from_numpy(batch.valid)
    assert torch.allclose(pred.values[valid], torch.full_like(pred.values[valid], 0.75))


def test_predictor_receptive_field_perturbation(rng):
    # head_layers 1, kernel 7: perturbing frame 0 may only change frames 0..3
    cfg = tiny_model_config()
    model = init_model(cfg, "student", np.random.default_rng(4))
    n = 16
    base = rng.normal(size=(n, cfg.dim)).astype(np.float32)
    bumped = base.copy()
    bumped[0] += 10.0
    with torch.no_grad():
        out1 = model.predictor(torch.from_numpy(base[None]))[0, :, 0].numpy()
        out2 = model.predictor(torch.from_numpy(bumped[None]))[0, :, 0].numpy()
    changed = np.flatnonzero(out1 != out2)
    assert changed.size > 0
    assert changed.max() <= 3


def test_decoder_requires_student_role(student, rng):
    teacher = clone_as_teacher(student)
    batch = feature_batch(rng, student.cfg, [6])
    enc = encode(teacher, batch)
    with pytest.raises(ContractError):
        decode_reconstruction(teacher, enc)


def test_decoder_shape_and_constant_bias(rng):
    cfg = tiny_model_config()
    model = init_model(cfg, "student", np.random.default_rng(6))
    batch = feature_batch(rng, cfg, [9, 6])
    enc = encode(model, batch)
    out = decode_reconstruction(model, enc)
    assert out.shape == (2, 9, cfg.dim)
    with torch.no_grad():
        for conv in model.decoder.convs:
            conv.weight.zero_()
            conv.bias.zero_()
        model.decoder.head.weight.zero_()
        model.decoder.head.bias.fill_(-1.25)
    out = decode_reconstruction(model, encode(model, batch))
    assert torch.allclose(out, torch.full_like(out, -1.25))


# ------------------------------------------------------------- targets


def make_enc(per_layer, valid):
    tensors = tuple(torch.as_tensor(p, dtype=torch.float64) for p in per_layer)
    return EncoderOutput(final=tensors[-1], per_layer=tensors,
                         valid=torch.as_tensor(valid, dtype=torch.bool))


def test_build_targets_hand_arithmetic():
    # layer 1: [1, 3] normalizes to ~[-1, 1]; layer 2: [2, 2] to [0, 0]
    layer1 = np.array([[[1.0], [3.0]]])
    layer2 = np.array([[[2.0], [2.0]]])
    enc = make_enc([layer1, layer2], np.ones((1, 2), dtype=bool))
    out = build_targets(enc, 2, eps=1e-5).numpy()
    assert out[0, 0, 0] == pytest.approx(-0.5, abs=1e-5)
    assert out[0, 1, 0] == pytest.approx(0.5, abs=1e-5)


def test_build_targets_single_layer_is_instance_norm():
    rng = np.random.default_rng(0)
    layer = rng.normal(size=(2, 6, 3))
    valid = np.ones((2, 6), dtype=bool)
    enc = make_enc([layer * 4, layer], valid)
    out = build_targets(enc, 1, eps=1e-5)
    expected = instance_normalize(torch.as_tensor(layer), torch.as_tensor(valid), 1e-5)
    assert torch.allclose(out, expected)


def test_build_targets_constant_layer_is_zero():
    layer = np.full((1, 5, 2), 3.3)
    enc = make_enc([layer], np.ones((1, 5), dtype=bool))
    assert np.allclose(build_targets(enc, 1).numpy(), 0.0)


def test_build_targets_range_check():
    layer = np.zeros((1, 4, 2))
    enc = make_enc([layer, layer], np.ones((1, 4), dtype=bool))
    with pytest.raises(ContractError):
        build_targets(enc, 3)
    with pytest.raises(ContractError):
        build_targets(enc, 0)


def test_instance_norm_moments_over_valid(rng):
    x = torch.from_numpy(rng.normal(size=(3, 10, 4)) * 5 + 2)
    valid = torch.from_numpy(np.arange(10)[None, :] < np.array([[10], [7], [4]]))
    eps = 1e-5
    out = instance_normalize(x, valid, eps)
    for b in range(3):
        n = int(valid[b].sum())
        seg = out[b, :n]
        raw = x[b, :n]
        var = raw.var(dim=0, unbiased=False)
        assert torch.allclose(seg.mean(dim=0), torch.zeros(4, dtype=seg.dtype), atol=1e-9)
        expected_var = var / (var + eps)
        assert torch.allclose(seg.var(dim=0, unbiased=False), expected_var, rtol=1e-6)
    assert torch.all(out[1, 7:] == 0.0)
    assert torch.all(out[2, 4:] == 0.0)


def test_targets_constant_under_student_updates(student, rng):
    teacher = clone_as_teacher(student)
    batch = feature_batch(rng, student.cfg, [8])
    with torch.no_grad():
        enc = encode(teacher, batch)
        targets = build_targets(enc, 2)
    assert not targets.requires_grad
    snapshot = targets.clone()
    with torch.no_grad():
        for p in student.parameters():
            p.add_(0.1)
    assert torch.equal(targets, snapshot)


# ------------------------------------------------------------- roles, ema plumbing


def test_shared_groups_shape_identical(student):
    teacher = clone_as_teacher(student)
    s = dict(shared_parameter_items(student))
    t = dict(shared_parameter_items(teacher))
    assert set(s) == set(t)
    for name in s:
        assert s[name].shape == t[name].shape
        assert s[name].numel() == t[name].numel()
    assert teacher.decoder is None
    assert all(not p.requires_grad for p in teacher.parameters())


def test_fingerprint_changes_with_params(student):
    fp = fingerprint(student)
    with torch.no_grad():
        student.encoder.mask_emb.add_(1e-3)
    assert fingerprint(student) != fp
    with torch.no_grad():
        student.encoder.mask_emb.sub_(1e-3)


# ------------------------------------------------------------- gradient check


def test_gradient_check_quadratic():
    p = torch.randn(40, dtype=torch.float64, requires_grad=True)
    err = gradient_check(lambda: 0.5 * (p ** 2).sum(), [p], eps=1e-4, num_coords=50)
    assert err < 1e-6


def test_gradient_check_nan_loss():
    p = torch.randn(5, dtype=torch.float64, requires_grad=True)
    with pytest.raises(NumericalError):
        gradient_check(lambda: (p * float("nan")).sum(), [p])


# ------------------------------------------------------------- checkpoint


def test_container_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a.float32": rng.normal(size=(3, 4)).astype(np.float32),
        "b.float64": rng.normal(size=(7,)),
        "c.int64": rng.integers(0, 100, size=(2, 2, 2)),
    }
    meta = {"completed_steps": 17, "nested": {"x": [1, 2, 3]}}
    path = tmp_path / "c.ckpt"
    save_container(path, arrays, meta)
    back, meta2 = load_container(path)
    assert meta2 == meta
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        assert np.array_equal(back[k], arrays[k])


def test_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_container(path)


def test_model_roundtrip_and_shape_mismatch(student, tmp_path):
    arrays = parameter_arrays(student)
    path = tmp_path / "m.ckpt"
    save_container(path, arrays, {})
    clone = init_model(student.cfg, "student", np.random.default_rng(99))
    back, _ = load_container(path)
    load_parameter_arrays(clone, back)
    assert fingerprint(clone) == fingerprint(student)

    other = init_model(
        ModelConfig(dim=8, encoder_layers=2, attention_heads=2, ffn_dim=16,
                    head_layers=1, head_dim=8,
                    frontend=FrontendConfig(passthrough=True)),
        "student", np.random.default_rng(0),
    )
    with pytest.raises(CheckpointError):
        load_parameter_arrays(other, back)
