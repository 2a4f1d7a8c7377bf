import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from latent_scalpel import harness
from latent_scalpel import model as M

from oracles import project_out

V = len(harness.VOCAB)


def tiny(seed=0, n_layers=2, d_model=8, n_heads=2, max_seq_len=128):
    cfg = M.ModelConfig(V, n_layers, d_model, n_heads, max_seq_len, seed)
    return M.Checkpoint(cfg, M.init_params(cfg))


@pytest.fixture(scope="module")
def ckpt():
    return tiny(3, d_model=16)


@pytest.fixture(scope="module")
def prompt():
    return harness.render_prompt(harness.generate_problem(0, 1, 1))


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(V, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        M.ModelConfig(V, n_layers=0)
    assert M.ModelConfig(V, d_model=16, n_heads=4).d_mlp == 64


def test_residual_writers_cover_embeddings_and_outputs():
    cfg = M.ModelConfig(V, n_layers=3)
    w = M.residual_writers(cfg)
    assert {"tok_emb", "pos_emb"} <= set(w)
    assert all(f"blocks.{l}.W_O" in w and f"blocks.{l}.W_out" in w for l in range(3))
    assert "W_U" not in w
    shapes = M.param_shapes(cfg)
    assert all(shapes[n][-1] == cfg.d_model for n in w)


def test_identity_hook_is_bitwise_transparent(ckpt, prompt):
    base, _ = M.forward(ckpt, prompt.tokens)
    for l in range(ckpt.config.n_layers):
        out, _ = M.forward(ckpt, prompt.tokens, [M.HookSpec(l, "identity")])
        assert torch.equal(out, base)


def test_zero_alpha_steering_is_transparent(ckpt, prompt):
    d = torch.randn(ckpt.config.d_model)
    base, _ = M.forward(ckpt, prompt.tokens)
    out, _ = M.forward(ckpt, prompt.tokens, [M.HookSpec(1, "add_direction", d / d.norm(), 0.0)])
    assert torch.equal(out, base)


def test_capture_shapes(ckpt, prompt):
    _, caps = M.forward(ckpt, prompt.tokens, [M.HookSpec(0, "capture"), M.HookSpec(1, "capture", position=-1)])
    assert caps[0].shape == (len(prompt), ckpt.config.d_model)
    assert caps[1].shape == (ckpt.config.d_model,)


def test_add_direction_delta_is_exact(ckpt, prompt):
    d = torch.randn(ckpt.config.d_model, dtype=torch.float64)
    d = (d / d.norm()).float()
    hooks = [M.HookSpec(0, "capture"), M.HookSpec(0, "add_direction", d, 2.5), M.HookSpec(0, "capture")]
    _, (before, after) = M.forward(ckpt, prompt.tokens, hooks)
    assert torch.allclose(after - before, (2.5 * d).expand_as(before), atol=1e-6)
    hooks = [M.HookSpec(0, "capture"), M.HookSpec(0, "add_direction", d, 2.5, position=4), M.HookSpec(0, "capture")]
    _, (before, after) = M.forward(ckpt, prompt.tokens, hooks)
    diff = after - before
    assert torch.allclose(diff[4], 2.5 * d, atol=1e-6)
    assert torch.count_nonzero(diff[:4]) == 0 and torch.count_nonzero(diff[5:]) == 0


def test_forward_errors(ckpt):
    with pytest.raises(ValueError):
        M.forward(ckpt, [1] * (ckpt.config.max_seq_len + 1))
    with pytest.raises(ValueError):
        M.forward(ckpt, [1, 2], [M.HookSpec(9, "identity")])
    bad = ckpt.with_params({**ckpt.params, "W_U": ckpt.params["W_U"] * float("nan")}, "broken")
    with pytest.raises(M.NumericalError):
        M.forward(bad, [1, 2])


def test_generate_greedy_and_sampling(ckpt, prompt):
    a = M.generate(ckpt, prompt, 0.0, 6)
    assert a == M.generate(ckpt, prompt, 0.0, 6)
    assert M.generate(ckpt, prompt, 0.0, 0) == []
    assert len(a) <= 6 and harness.EOS_ID not in a
    d = torch.ones(ckpt.config.d_model) / ckpt.config.d_model ** 0.5
    assert M.generate(ckpt, prompt, 0.0, 6, [M.HookSpec(1, "add_direction", d, 0.0)]) == a
    s1 = M.generate(ckpt, prompt, 1.0, 6, generator=torch.Generator().manual_seed(5))
    s2 = M.generate(ckpt, prompt, 1.0, 6, generator=torch.Generator().manual_seed(5))
    assert s1 == s2
    with pytest.raises(ValueError):
        M.generate(ckpt, prompt, -1.0)


def test_generate_stops_at_context_limit():
    ck = tiny(max_seq_len=12)
    out = M.generate(ck, list(range(1, 10)), 0.0, 50)
    assert len(out) <= 3


def test_greedy_ties_go_to_lowest_id():
    ck = tiny()
    params = dict(ck.params)
    params["W_U"] = torch.zeros_like(params["W_U"])
    params["b_U"] = torch.zeros(V)
    params["b_U"][[7, 5, 9]] = 1.0
    out = M.generate(ck.with_params(params, "tie"), [1, 2], 0.0, 1)
    assert out == [5]


def test_final_token_capture_matches_hook(ckpt, prompt):
    other = harness.render_prompt(harness.generate_problem(0, 2, 3))
    recs = M.capture_final_token_residuals(ckpt, [prompt, other], 1)
    assert len(recs) == 2
    _, caps = M.forward(ckpt, prompt.tokens, [M.HookSpec(1, "capture")])
    np.testing.assert_array_equal(recs[0].vector, caps[0][-1].numpy())
    assert np.abs(recs[0].vector - recs[1].vector).max() > 0
    multi = M.capture_final_token_residuals(ckpt, [prompt], [0, 1])
    np.testing.assert_array_equal(multi[1][0].vector, recs[0].vector)


def test_capture_all_positions_shape(ckpt):
    toks = harness.build_background_corpus(0, 70)
    out = M.capture_all_positions(ckpt, toks, [0, 1], window=32)
    assert out[0].shape == (70, ckpt.config.d_model)


def test_attention_rows_are_distributions(ckpt, prompt):
    tr = M.attention_weights(ckpt, prompt, 1)
    assert tr.weights.shape == (ckpt.config.n_heads, len(prompt))
    assert (tr.weights >= 0).all()
    np.testing.assert_allclose(tr.weights.sum(1), 1.0, atol=1e-5)
    single = M.attention_weights(ckpt, [harness.BOS_ID], 0)
    np.testing.assert_allclose(single.weights, 1.0)


def test_lm_gradients_match_finite_differences():
    cfg = M.ModelConfig(V, 2, 8, 2, 16, 0)
    params = {k: v.double() for k, v in M.init_params(cfg).items()}
    gen = torch.Generator().manual_seed(0)
    for k in params:
        params[k] = params[k] + 0.3 * torch.randn(params[k].shape, generator=gen, dtype=torch.float64)
    tokens = torch.randint(1, V, (3, 10), generator=gen)
    tokens[0, 8:] = harness.PAD_ID

    def loss_of(p):
        return M.lm_loss(p, cfg, tokens)

    leaf = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    loss_of(leaf).backward()
    rng = np.random.default_rng(0)
    h = 1e-6
    worst = 0.0
    for name, t in params.items():
        flat = t.reshape(-1)
        for i in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            plus = {**params, name: t.clone()}
            minus = {**params, name: t.clone()}
            plus[name].view(-1)[i] += h
            minus[name].view(-1)[i] -= h
            fd = (loss_of(plus) - loss_of(minus)).item() / (2 * h)
            an = leaf[name].grad.reshape(-1)[i].item()
            if abs(fd) > 1e-7 or abs(an) > 1e-7:
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    assert worst < 1e-3


def test_training_reduces_loss_and_is_deterministic():
    corpus, _ = harness.training_corpus(0, 40)
    cfg = M.ModelConfig(V, 1, 16, 2, 96, 0)
    tokens, _ = M._pad_batch(corpus, None)
    init = M.lm_loss(M.init_params(cfg), cfg, tokens).item()
    a = M.train(cfg, corpus, 40, batch_size=16, warmup=5)
    b = M.train(cfg, corpus, 40, batch_size=16, warmup=5)
    assert M.lm_loss(a.params, cfg, tokens).item() < init
    assert all(torch.equal(a.params[k], b.params[k]) for k in a.params)
    assert a.tag == "base"
    with pytest.raises(ValueError):
        M.train(cfg, [], 1)


def test_overfits_five_sequences():
    corpus, _ = harness.training_corpus(1, 5)
    cfg = M.ModelConfig(V, 2, 32, 2, 96, 0)
    ck = M.train(cfg, corpus, 300, lr=3e-3, batch_size=5, warmup=10)
    tokens, _ = M._pad_batch(corpus, None)
    assert M.lm_loss(ck.params, cfg, tokens).item() < 0.1


def test_fine_tune_identity_and_provenance():
    ck = tiny()
    base = M.Checkpoint(ck.config, ck.params, ("base(seed=0)",))
    same = M.fine_tune(base, [], 0)
    assert all(torch.equal(same.params[k], base.params[k]) for k in base.params)
    assert same.tag == "fine_tuned" and same.provenance[0] == "base(seed=0)"
    with pytest.raises(ValueError):
        M.fine_tune(same, [], 0)


def test_fine_tune_respects_completion_mask():
    corpus, starts = harness.training_corpus(0, 20, loss_on_completion=True)
    ck = tiny(d_model=16)
    base = M.Checkpoint(ck.config, ck.params, ("base(seed=0)",))
    tuned = M.fine_tune(base, corpus, 5, loss_from=starts, batch_size=4)
    assert any(not torch.equal(tuned.params[k], base.params[k]) for k in base.params)


def _unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


@given(st.integers(0, 10_000))
def test_orthogonalization_matches_projector_oracle(seed):
    rng = np.random.default_rng(seed)
    ck = tiny(seed % 7)
    d = _unit(rng, ck.config.d_model)
    out = M.orthogonalize_checkpoint(ck, d, "x")
    for name in M.residual_writers(ck.config):
        W = ck.params[name].double().numpy().reshape(-1, ck.config.d_model)
        got = out.params[name].double().numpy().reshape(-1, ck.config.d_model)
        np.testing.assert_allclose(got, project_out(W, d), atol=1e-6)
    assert M.writer_components(out, d) <= 1e-6
    for name in set(ck.params) - set(M.residual_writers(ck.config)):
        assert torch.equal(out.params[name], ck.params[name])
    assert out.provenance[-1] == "orthogonalized(x)"


def test_orthogonalization_idempotent_and_noop_when_orthogonal():
    rng = np.random.default_rng(0)
    ck = tiny()
    d = _unit(rng, 8)
    once = M.orthogonalize_checkpoint(ck, d)
    twice = M.orthogonalize_checkpoint(once, d)
    assert max(float((once.params[k] - twice.params[k]).abs().max()) for k in ck.params) <= 1e-6
    params = dict(ck.params)
    for name in M.residual_writers(ck.config):
        params[name] = params[name].clone()
        params[name][..., 0] = 0.0
    clean = ck.with_params(params, "e0-free")
    e0 = np.eye(8)[0]
    same = M.orthogonalize_checkpoint(clean, e0)
    assert all(torch.equal(same.params[k], clean.params[k]) for k in params)


def test_orthogonalization_single_row_becomes_zero():
    ck = tiny()
    d = np.zeros(8)
    d[2] = 1.0
    params = dict(ck.params)
    params["blocks.0.b_O"] = torch.as_tensor(d, dtype=torch.float32)
    out = M.orthogonalize_checkpoint(ck.with_params(params, "row"), d)
    assert float(out.params["blocks.0.b_O"].abs().max()) == 0.0


def test_orthogonalization_rejects_non_unit():
    ck = tiny()
    with pytest.raises(ValueError):
        M.orthogonalize_checkpoint(ck, np.ones(8))
    with pytest.raises(ValueError):
        M.orthogonalize_checkpoint(ck, np.ones(3) / 3 ** 0.5)
