import math

import numpy as np
import pytest
import torch
from oracles import scalar_loss
from scipy.spatial.transform import Rotation

from dfmol.datasets import toy_templates
from dfmol.denoiser import GVP, GVPLayerNorm, ModelConfig, MoleculeDenoiser, rbf_embed
from dfmol.denoiser.loss import GradientError, Targets, TrainBatch, backward, batch_loss, compute_loss
from dfmol.denoiser.model import TorchPrediction
from dfmol.denoiser.training import make_batch
from dfmol.flows import FlowVariant

D = torch.float64
SMALL = ModelConfig(blocks=2, scalar_dim=8, vector_dim=3, edge_dim=6, n_cp=2, rbf_dim=4)


def _rot(seed):
    return torch.tensor(Rotation.random(random_state=seed).as_matrix(), dtype=D)


def _gvp(seed=0, in_dims=(5, 4), out_dims=(6, 3), **kw):
    torch.manual_seed(seed)
    g = GVP(in_dims, out_dims, **kw)
    g.reset_parameters(torch.Generator().manual_seed(seed))
    with torch.no_grad():
        g.b_j.normal_()
        g.b_g.normal_()
    return g


# --- GVP ---------------------------------------------------------------------


def test_gvp_zero_vectors_give_zero_vectors():
    g = _gvp()
    s = torch.randn(7, 5, dtype=D)
    s_out, v_out = g(s, torch.zeros(7, 4, 3, dtype=D))
    assert torch.all(v_out == 0)
    s_again, _ = g(s, torch.zeros(7, 4, 3, dtype=D))
    assert torch.equal(s_out, s_again)


def test_gvp_rotation_equivariance():
    g = _gvp(1)
    for k in range(20):
        s, v = torch.randn(5, dtype=D), torch.randn(4, 3, dtype=D)
        r = _rot(k)
        s1, v1 = g(s, v)
        s2, v2 = g(s, v @ r.T)
        assert torch.allclose(s1, s2, atol=1e-9) and torch.allclose(v1 @ r.T, v2, atol=1e-9)


def test_gvp_is_not_reflection_equivariant():
    mirror = torch.diag(torch.tensor([1.0, 1.0, -1.0], dtype=D))
    changed = 0
    for k in range(100):
        g = _gvp(k)
        s, v = torch.randn(5, dtype=D), torch.randn(4, 3, dtype=D)
        s1, v1 = g(s, v)
        s2, v2 = g(s, v @ mirror.T)
        changed += bool((s1 - s2).abs().max() > 1e-9 or (v1 @ mirror.T - v2).abs().max() > 1e-9)
    assert changed >= 99


def test_gvp_without_cross_product_is_reflection_equivariant():
    mirror = torch.diag(torch.tensor([-1.0, 1.0, 1.0], dtype=D))
    g = _gvp(3, n_cp=0)
    s, v = torch.randn(5, dtype=D), torch.randn(4, 3, dtype=D)
    s1, v1 = g(s, v)
    s2, v2 = g(s, v @ mirror.T)
    assert torch.allclose(s1, s2, atol=1e-12) and torch.allclose(v1 @ mirror.T, v2, atol=1e-12)


def test_gvp_shape_mismatch_raises():
    g = _gvp()
    with pytest.raises(RuntimeError):
        g(torch.randn(3, dtype=D), torch.randn(5, 3, dtype=D))


def test_cross_product_gradient_matches_finite_differences():
    a = torch.randn(4, 3, dtype=D, requires_grad=True)
    b = torch.randn(4, 3, dtype=D, requires_grad=True)
    w = torch.randn(4, 3, dtype=D)

    def f(a_, b_):
        return (torch.linalg.cross(a_, b_, dim=-1) * w).sum()

    f(a, b).backward()
    h = 1e-5
    for x, grad in ((a, a.grad), (b, b.grad)):
        fd = torch.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            with torch.no_grad():
                x[idx] += h
                up = f(a, b)
                x[idx] -= 2 * h
                down = f(a, b)
                x[idx] += h
            fd[idx] = (up - down) / (2 * h)
        assert (grad - fd).abs().max() < 1e-6


def test_rbf_embedding():
    d = torch.tensor([0.0, 2.0], dtype=D)
    out = rbf_embed(d, 16, 6.0)
    assert out.shape == (2, 16) and out[0, 0] == 1.0
    grid = torch.linspace(0, 6, 601, dtype=D)
    centers = torch.linspace(0, 6, 16, dtype=D)
    vals = rbf_embed(grid, 16, 6.0)
    for i, c in enumerate(centers):
        right = vals[grid >= c, i]
        left = vals[grid <= c, i]
        assert torch.all(right[1:] <= right[:-1]) and torch.all(left[1:] >= left[:-1])


def test_vector_layer_norm_is_rotation_equivariant():
    ln = GVPLayerNorm((4, 3))
    s, v = torch.randn(2, 4, dtype=D), torch.randn(2, 3, 3, dtype=D)
    r = _rot(0)
    _, v1 = ln(s, v)
    _, v2 = ln(s, v @ r.T)
    assert torch.allclose(v1 @ r.T, v2, atol=1e-12)


# --- update blocks -----------------------------------------------------------


def _graph(n=5, seed=0, batch=1):
    g = torch.Generator().manual_seed(seed)
    S, V, E = SMALL.scalar_dim, SMALL.vector_dim, SMALL.edge_dim
    x = torch.randn(batch, n, 3, dtype=D, generator=g)
    s = torch.randn(batch, n, S, dtype=D, generator=g)
    v = torch.randn(batch, n, V, 3, dtype=D, generator=g)
    e = torch.randn(batch, n, n, E, dtype=D, generator=g)
    e = e + e.transpose(1, 2)
    mask = torch.ones(batch, n, dtype=torch.bool)
    pair = mask.unsqueeze(1) & mask.unsqueeze(2) & ~torch.eye(n, dtype=torch.bool)
    return x, s, v, e, pair


def _block(variant="continuous"):
    from dfmol.molgraph import toy_vocabulary

    return MoleculeDenoiser(toy_vocabulary(), FlowVariant(variant), SMALL, seed=3).blocks[0]


def test_nfu_single_node_uses_zero_message():
    blk = _block()
    x, s, v, e, pair = _graph(n=1)
    s1, v1 = blk.nfu(x, s, v, e, pair)
    zs, zv = blk.psi_u(torch.zeros(1, 1, SMALL.scalar_dim, dtype=D), torch.zeros(1, 1, SMALL.vector_dim, 3, dtype=D))
    s2, v2 = blk.node_norm(s + zs, v + zv)
    assert torch.allclose(s1, s2) and torch.allclose(v1, v2)


def test_nfu_permutation_and_rotation_equivariance():
    blk = _block()
    x, s, v, e, pair = _graph(n=6)
    s1, v1 = blk.nfu(x, s, v, e, pair)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    s2, v2 = blk.nfu(x[:, perm], s[:, perm], v[:, perm], e[:, perm][:, :, perm], pair)
    assert torch.allclose(s1[:, perm], s2, atol=1e-12) and torch.allclose(v1[:, perm], v2, atol=1e-12)
    r = _rot(4)
    s3, v3 = blk.nfu(x @ r.T + 1.5, s, v @ r.T, e, pair)
    assert torch.allclose(s1, s3, atol=1e-9) and torch.allclose(v1 @ r.T, v3, atol=1e-9)


def test_npu_zeroed_chain_keeps_positions():
    blk = _block()
    with torch.no_grad():
        for p in blk.psi_x.parameters():
            p.zero_()
    x, s, v, _, _ = _graph()
    assert torch.equal(blk.npu(x, s, v), x)


def test_npu_translation_and_rotation():
    blk = _block()
    x, s, v, _, _ = _graph()
    out = blk.npu(x, s, v)
    shift = torch.tensor([1.0, -2.0, 0.5], dtype=D)
    assert torch.allclose(blk.npu(x + shift, s, v), out + shift, atol=1e-12)
    r = _rot(2)
    assert torch.allclose(blk.npu(x @ r.T, s, v @ r.T), out @ r.T, atol=1e-9)


def test_efu_zeroed_mlp_is_layer_norm():
    blk = _block()
    with torch.no_grad():
        for p in blk.phi_e.parameters():
            p.zero_()
    x, s, _, e, _ = _graph()
    assert torch.allclose(blk.efu(x, s, e), blk.edge_norm(e))


def test_efu_is_ordered_and_distance_sensitive():
    blk = _block()
    x, s, _, e, _ = _graph()
    out = blk.efu(x, s, e)
    assert not torch.allclose(out[0, 0, 1], out[0, 1, 0])
    x2 = x.clone()
    x2[0, 1] += torch.tensor([1e-4, 0, 0], dtype=D)
    assert (blk.efu(x2, s, e)[0, 0, 1] - out[0, 0, 1]).abs().max() > 0


# --- full model --------------------------------------------------------------


def _model(tag="continuous", cfg=SMALL, seed=0):
    from dfmol.molgraph import toy_vocabulary

    return MoleculeDenoiser(toy_vocabulary(), FlowVariant(tag), cfg, seed=seed)


def _batch(model, n_mols=3, seed=0):
    mols = toy_templates()
    pick = [mols[(seed + 3 * k) % 8] for k in range(n_mols)]
    return make_batch(pick, model.variant, model.vocab, np.random.default_rng(seed), ot_restarts=0)


@pytest.mark.parametrize("tag", ["continuous", "simplex", "dirichlet", "ctmc"])
def test_model_outputs_are_distributions_and_bonds_symmetric(tag):
    m = _model(tag)
    b = _batch(m)
    with torch.no_grad():
        p = m.predict(b.state, b.t)
    for rows in (p.a, p.c, p.e):
        assert torch.all(rows >= 0) and torch.allclose(rows.sum(-1), torch.ones(rows.shape[:-1], dtype=D))
    assert torch.equal(p.e, p.e.transpose(1, 2))


@pytest.mark.parametrize("tag", ["continuous", "ctmc"])
def test_model_permutation_equivariance(tag):
    m = _model(tag)
    b = _batch(m, n_mols=1, seed=6)
    s = b.state
    n = s.x.shape[1]
    perm = np.random.default_rng(0).permutation(n)
    s2 = type(s)(s.x[:, perm], s.a[:, perm], s.c[:, perm], s.e[:, perm][:, :, perm], s.mask[:, perm])
    with torch.no_grad():
        p1, p2 = m.predict(s, b.t), m.predict(s2, b.t)
    assert torch.allclose(p1.x[:, perm], p2.x, atol=1e-12)
    assert torch.allclose(p1.a[:, perm], p2.a, atol=1e-12)
    assert torch.allclose(p1.e[:, perm][:, :, perm], p2.e, atol=1e-12)


def test_model_padding_does_not_leak():
    m = _model()
    b = _batch(m, n_mols=3)
    k = int(b.state.mask[0].sum())
    single = type(b.state)(b.state.x[:1, :k], b.state.a[:1, :k], b.state.c[:1, :k], b.state.e[:1, :k, :k], b.state.mask[:1, :k])
    with torch.no_grad():
        full, alone = m.predict(b.state, b.t), m.predict(single, b.t[:1])
    assert torch.allclose(full.x[0, :k], alone.x[0], atol=1e-12)
    assert torch.allclose(full.e[0, :k, :k], alone.e[0], atol=1e-12)


def test_model_numpy_interface_matches_torch_path():
    m = _model("ctmc")
    b = _batch(m)
    pred = m(b.state, b.t)
    with torch.no_grad():
        p = m.predict(b.state, b.t)
    assert np.array_equal(pred.a, p.a.numpy()) and np.array_equal(pred.x, p.x.numpy())


# --- loss --------------------------------------------------------------------


def _onehot_prediction(t: Targets, model):
    return TorchPrediction(
        torch.tensor(t.x, dtype=D),
        torch.nn.functional.one_hot(torch.tensor(t.a), model.vocab.n_types).to(D),
        torch.nn.functional.one_hot(torch.tensor(t.c), model.vocab.n_charges).to(D),
        torch.nn.functional.one_hot(torch.tensor(t.e), 5).to(D),
    )


def test_perfect_prediction_has_zero_loss():
    m = _model()
    b = _batch(m)
    total, parts = compute_loss(_onehot_prediction(b.targets, m), b.targets)
    assert float(total) == 0.0 and all(float(v) == 0.0 for v in parts.values())


def test_uniform_prediction_has_log_d_cross_entropy():
    m = _model()
    b = _batch(m)
    p = _onehot_prediction(b.targets, m)
    uniform = TorchPrediction(p.x, torch.full_like(p.a, 1 / p.a.shape[-1]), torch.full_like(p.c, 1 / 3), torch.full_like(p.e, 0.2))
    _, parts = compute_loss(uniform, b.targets)
    assert float(parts["a"]) == pytest.approx(math.log(4))
    assert float(parts["c"]) == pytest.approx(math.log(3))
    assert float(parts["e"]) == pytest.approx(math.log(5))


def test_loss_matches_scalar_reimplementation():
    m = _model("dirichlet")
    b = _batch(m, seed=4)
    with torch.no_grad():
        p = m.predict(b.state, b.t)
    w = (3.0, 0.4, 1.0, 2.0)
    total, parts = compute_loss(p, b.targets, w)
    t = b.targets
    ref_total, ref_parts = scalar_loss(
        p.x.tolist(), t.x.tolist(), p.a.tolist(), t.a.tolist(), p.c.tolist(), t.c.tolist(), p.e.tolist(), t.e.tolist(), t.mask.tolist(), w
    )
    assert float(total) == pytest.approx(ref_total, rel=1e-12)
    for k in "xace":
        assert float(parts[k]) == pytest.approx(ref_parts[k], rel=1e-12)


def test_loss_weight_validation():
    m = _model()
    b = _batch(m)
    with pytest.raises(ValueError):
        compute_loss(_onehot_prediction(b.targets, m), b.targets, (1, 0, 1, 1))


def test_empty_batch_has_zero_loss_and_zero_gradients():
    m = _model()
    b = _batch(m)
    b.targets.mask[:] = False
    b.state.mask[:] = False
    loss, grads = backward(m, b)
    assert loss == 0.0
    assert all(float(g.abs().sum()) <= 1e-12 for g in grads.values())


def test_non_finite_gradient_names_parameter():
    m = _model()
    b = _batch(m)
    with torch.no_grad():
        m.head_a[2].bias[0] = float("nan")
    with pytest.raises(GradientError, match=r"non-finite gradient in parameter \w+"):
        backward(m, b)


FD_FLOOR = 1e-5


def finite_difference_check(model, batch, h=1e-5):
    """Relative error, per parameter tensor, of autograd vs central differences.

    Tensors whose gradient norm is below FD_FLOOR are measured against the floor:
    at step 1e-5 the roundoff of a central difference is 1e-10 to 1e-9 per tensor.
    """
    _, grads = backward(model, batch)
    worst = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = float(batch_loss(model, batch)[0])
                flat[i] = old - h
                down = float(batch_loss(model, batch)[0])
                flat[i] = old
                fd[i] = (up - down) / (2 * h)
            g = grads[name].view(-1)
            scale = max(float(g.norm()), float(fd.norm()), FD_FLOOR)
            worst[name] = float((g - fd).norm()) / scale
    return worst


def test_gradients_match_finite_differences_on_a_tiny_model():
    cfg = ModelConfig(blocks=1, scalar_dim=4, vector_dim=2, edge_dim=3, n_cp=1, rbf_dim=3)
    m = _model("simplex", cfg)
    b = _batch(m, n_mols=3, seed=1)
    worst = finite_difference_check(m, b)
    assert max(worst.values()) < 1e-4, worst


def test_train_batch_structure():
    m = _model("ctmc")
    b = _batch(m)
    assert isinstance(b, TrainBatch)
    s = b.state
    d = m.vocab.n_types
    assert s.a.max() <= d and np.array_equal(s.e, s.e.transpose(0, 2, 1))
    # padded atoms carry the mask token
    assert np.all(s.a[~s.mask] == d)
