import numpy as np
import pytest

from folnet.atoms import InputBatch, encode_base_atoms, EmbeddingTables
from folnet.model import (
    ModelConfig,
    cls_logits,
    init_params,
    layer_forward,
    load_checkpoint,
    mlm_logits,
    model_forward,
    parse_operator_spec,
    save_checkpoint,
)
from folnet.tensor import RngState, Tensor, finite_diff_grad

from refs import (
    build_matched_params,
    matched_config,
    transformer_layer,
    transformer_layer_params,
)


# ---- operator spec parsing ------------------------------------------


def test_parse_spec_full():
    spec = parse_operator_spec("jmc.atp")
    assert spec.unary_ops == ("j", "m", "c")
    assert spec.binary_ops == ("a", "t", "p")
    assert str(spec) == "jmc.atp"


def test_parse_spec_partial_and_one_sided():
    assert parse_operator_spec("j.a").binary_ops == ("a",)
    assert parse_operator_spec(".a").unary_ops == ()
    assert parse_operator_spec("j.").binary_ops == ()


@pytest.mark.parametrize("bad", ["jmc", "j.a.p", "x.a", "j.z", "jj.a", "."])
def test_parse_spec_rejects(bad):
    with pytest.raises(ValueError):
        parse_operator_spec(bad)


def test_config_dim_mismatch():
    with pytest.raises(ValueError):
        ModelConfig(d_unary=64, n_heads=4, head_size=8)


# ---- parameter initialization ---------------------------------------


def small_config(**kw):
    base = dict(
        num_layers=2, d_unary=8, d_binary=4, n_heads=2, head_size=4,
        delta=2, vocab_size=8, ffn_unary=8, ffn_binary=8, op_spec="jmc.atp",
    )
    base.update(kw)
    return ModelConfig(**base)


def small_batch(config, T=4, B=2, seed=0):
    rng = np.random.default_rng(seed)
    return InputBatch(
        token_ids=rng.integers(0, config.vocab_size, (B, T)),
        seq_ids=np.zeros((B, T), dtype=int),
        pad_mask=np.ones((B, T)),
    )


def test_init_zero_layers_has_no_layer_params():
    params = init_params(small_config(num_layers=0), RngState(0))
    assert not any(k.startswith("layer") for k in params)
    assert "emb.token" in params and "mlm.dense.w" in params


def test_init_statistics_and_determinism():
    config = small_config(d_unary=64, n_heads=4, head_size=16, vocab_size=100,
                          ffn_unary=128)
    p1 = init_params(config, RngState(7))
    p2 = init_params(config, RngState(7))
    p3 = init_params(config, RngState(8))
    assert p1.keys() == p2.keys()
    for k in p1:
        assert np.array_equal(p1[k].data, p2[k].data)
    assert not np.array_equal(p1["emb.token"].data, p3["emb.token"].data)
    tok = p1["emb.token"].data
    assert abs(tok.std() - 0.02) < 0.005
    assert np.abs(tok).max() <= 0.04  # truncated at two standard deviations
    assert np.all(p1["layer0.uni.ln1.g"].data == 1.0)
    assert np.all(p1["layer0.a.k.b"].data == 0.0)


def test_untied_mlm_has_decoder():
    assert "mlm.decoder" in init_params(small_config(tie_mlm=False), RngState(0))
    assert "mlm.decoder" not in init_params(small_config(), RngState(0))


# ---- forward pass ----------------------------------------------------


def test_forward_shapes_and_finiteness():
    config = small_config()
    params = init_params(config, RngState(1))
    batch = small_batch(config)
    u, U = model_forward(batch, params, config)
    assert u.shape == (2, 4, 8)
    assert U.shape == (2, 4, 4, 4)
    assert np.isfinite(u.data).all() and np.isfinite(U.data).all()
    m = mlm_logits(u, params, config)
    assert m.shape == (2, 4, 8)
    c = cls_logits(u, params, config)
    assert c.shape == (2, config.n_classes)


def test_zero_layers_returns_base_atoms():
    config = small_config(num_layers=0)
    params = init_params(config, RngState(2))
    batch = small_batch(config)
    u, U = model_forward(batch, params, config)
    tables = EmbeddingTables(params["emb.token"], params["emb.seq"], params["emb.dist"])
    u0, U0 = encode_base_atoms(batch, tables, config.delta)
    assert np.array_equal(u.data, u0.data)
    assert np.array_equal(U.data, U0.data)


def test_layers_compose():
    config = small_config()
    params = init_params(config, RngState(3))
    batch = small_batch(config)
    u2, U2 = model_forward(batch, params, config)
    tables = EmbeddingTables(params["emb.token"], params["emb.seq"], params["emb.dist"])
    u, U = encode_base_atoms(batch, tables, config.delta)
    from folnet.model import LayerMasks

    masks = LayerMasks(batch.pad_mask, None)
    for l in range(2):
        u, U = layer_forward(u, U, params, l, config, masks)
    assert np.array_equal(u.data, u2.data)
    assert np.array_equal(U.data, U2.data)


@pytest.mark.parametrize("spec", ["j.a", "jm.", ".atp", "c.p"])
def test_partial_specs_run(spec):
    config = small_config(op_spec=spec)
    params = init_params(config, RngState(4))
    u, U = model_forward(small_batch(config), params, config)
    assert np.isfinite(u.data).all() and np.isfinite(U.data).all()


def test_padding_does_not_leak_into_live_positions():
    config = small_config()
    params = init_params(config, RngState(5))
    T = 6
    rng = np.random.default_rng(6)
    ids = rng.integers(0, config.vocab_size, (1, T))
    pad = np.ones((1, T))
    pad[0, 4:] = 0.0
    b1 = InputBatch(ids, np.zeros((1, T), dtype=int), pad)
    ids2 = ids.copy()
    ids2[0, 4:] = (ids2[0, 4:] + 1) % config.vocab_size
    b2 = InputBatch(ids2, np.zeros((1, T), dtype=int), pad)
    u1, U1 = model_forward(b1, params, config)
    u2, U2 = model_forward(b2, params, config)
    assert np.max(np.abs(u1.data[0, :4] - u2.data[0, :4])) < 1e-12
    assert np.max(np.abs(U1.data[0, :4, :4] - U2.data[0, :4, :4])) < 1e-12


def test_dropout_train_mode_is_stochastic_but_seeded():
    config = small_config(dropout=0.5, attn_dropout=0.5)
    params = init_params(config, RngState(9))
    batch = small_batch(config)
    ua, _ = model_forward(batch, params, config, train=True,
                          rng=RngState(11).generator())
    ub, _ = model_forward(batch, params, config, train=True,
                          rng=RngState(11).generator())
    uc, _ = model_forward(batch, params, config, train=True,
                          rng=RngState(12).generator())
    ud, _ = model_forward(batch, params, config, train=False)
    assert np.array_equal(ua.data, ub.data)
    assert not np.array_equal(ua.data, uc.data)
    assert not np.array_equal(ua.data, ud.data)


# ---- transformer equivalence ----------------------------------------


def test_matches_post_ln_transformer_over_random_inits():
    config = matched_config(num_layers=2)
    T, B = 6, 2
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        tf_layers = [
            transformer_layer_params(rng, config.d_unary, config.ffn_unary)
            for _ in range(config.num_layers)
        ]
        token_emb = rng.standard_normal((config.vocab_size, config.d_unary)) * 0.5
        seq_emb = rng.standard_normal((2, config.d_unary)) * 0.5
        params = build_matched_params(config, tf_layers, token_emb, seq_emb)
        ids = rng.integers(0, config.vocab_size, (B, T))
        seq = np.zeros((B, T), dtype=int)
        batch = InputBatch(ids, seq, np.ones((B, T)))
        u, _ = model_forward(batch, params, config)
        x = token_emb[ids] + seq_emb[seq]
        for p in tf_layers:
            x = transformer_layer(x, p, config.n_heads)
        worst = max(worst, float(np.max(np.abs(u.data - x))))
    assert worst < 1e-10, f"max deviation {worst:.3e}"


def test_matched_single_layer_intermediate():
    # one layer, directly against the reference layer, fresh weights
    config = matched_config(num_layers=1, D=8, H=2, D2=2, F=16, V=5)
    rng = np.random.default_rng(0)
    p = transformer_layer_params(rng, 8, 16)
    tok = rng.standard_normal((5, 8))
    seq = np.zeros((2, 8))
    params = build_matched_params(config, [p], tok, seq)
    ids = rng.integers(0, 5, (1, 4))
    batch = InputBatch(ids, np.zeros((1, 4), dtype=int), np.ones((1, 4)))
    u, U = model_forward(batch, params, config)
    ref = transformer_layer(tok[ids], p, 2)
    assert np.max(np.abs(u.data - ref)) < 1e-10
    assert np.all(U.data == 0.0)  # binary branch stays neutralized


# ---- gradients -------------------------------------------------------


def _total_loss(batch, params, config):
    u, _ = model_forward(batch, params, config)
    m = mlm_logits(u, params, config)
    c = cls_logits(u, params, config)
    return (m * m).sum() * (1.0 / m.data.size) + (c * c).sum() * (1.0 / c.data.size)


@pytest.mark.parametrize(
    "name",
    [
        "emb.token",
        "emb.dist",
        "layer0.j.k.w",
        "layer0.m.v.w",
        "layer0.t.v.w",
        "layer0.p.k.w",
        "layer1.c.v.w",
        "layer0.bin.ln1.g",
        "layer0.uni.ffn.1.b",
        "mlm.dense.b",
        "cls.pool.w",
    ],
)
def test_end_to_end_gradients_match_finite_differences(name):
    config = small_config()
    params = init_params(config, RngState(21))
    batch = small_batch(config, T=4, B=2, seed=22)
    _total_loss(batch, params, config).backward()
    t = params[name]
    got = t.grad.copy()
    base = t.data.copy()

    def f(v):
        t.data[:] = v
        out = float(_total_loss(batch, params, config).data)
        t.data[:] = base
        return out

    fd = finite_diff_grad(f, base.copy(), eps=1e-5)
    assert np.max(np.abs(got - fd)) < 1e-6 + 1e-4 * np.max(np.abs(fd))


# ---- output heads ----------------------------------------------------


def test_mlm_zero_head_is_uniform():
    config = small_config()
    params = init_params(config, RngState(30))
    for k in ("mlm.dense.w", "mlm.dense.b", "mlm.ln.b", "mlm.bias"):
        params[k].data[:] = 0.0
    u, _ = model_forward(small_batch(config), params, config)
    logits = mlm_logits(u, params, config).data
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    assert np.max(np.abs(probs - 1.0 / config.vocab_size)) < 1e-12


def test_mlm_positions_match_full_slice():
    config = small_config()
    params = init_params(config, RngState(31))
    u, _ = model_forward(small_batch(config), params, config)
    full = mlm_logits(u, params, config).data
    sel = mlm_logits(u, params, config, positions=[1, 3]).data
    assert np.array_equal(sel, full[:, [1, 3]])
    with pytest.raises(IndexError):
        mlm_logits(u, params, config, positions=[7])


def test_mlm_tied_decoder_backprops_into_embedding():
    config = small_config()
    params = init_params(config, RngState(32))
    u, _ = model_forward(small_batch(config), params, config)
    m = mlm_logits(u, params, config)
    (m * m).sum().backward()
    assert params["emb.token"].grad is not None
    assert np.abs(params["emb.token"].grad).max() > 0


def test_cls_logits_empty_sequence_raises():
    config = small_config()
    params = init_params(config, RngState(33))
    u = Tensor(np.zeros((2, 0, config.d_unary)))
    with pytest.raises(ValueError):
        cls_logits(u, params, config)


# ---- checkpoints -----------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    config = small_config()
    params = init_params(config, RngState(40))
    extra = {
        "opt.m.emb.token": np.random.default_rng(41).standard_normal((8, 8)),
        "step": np.array(17.0),
    }
    path = str(tmp_path / "ck.bin")
    save_checkpoint(path, config, params, extra=extra, meta={"note": "test"})
    config2, params2, extra2, meta = load_checkpoint(path)
    assert config2 == config
    assert list(params2) == list(params)
    for k in params:
        assert np.array_equal(params[k].data, params2[k].data)
    for k in extra:
        assert np.array_equal(extra[k], extra2[k])
    assert meta == {"note": "test"}
    # loaded params drive an identical forward pass
    batch = small_batch(config)
    u1, _ = model_forward(batch, params, config)
    u2, _ = model_forward(batch, params2, config2)
    assert np.array_equal(u1.data, u2.data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(str(path))
