import math

import numpy as np
import pytest

from carm_route import model as M
from carm_route import tensor as T
from carm_route.env import BatchEnv, validate_solution
from carm_route.instances import InstanceBatch, VrpInstance, generate_dataset, generate_instance, parse_variant
from carm_route.tensor import Tape, Tensor, parameter

from _oracles import central_difference, rel_error

SMALL = dict(embedding_dim=16, heads=4, encoder_layers=1, ff_hidden=32)


def small(strategy="CARM", **kw):
    return M.ModelConfig(**{**SMALL, "strategy": strategy, **kw})


def randomize(params, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data = rng.uniform(-scale, scale, size=p.shape)
    return params


def env_state(batch, n_roll=3, steps=2, seed=0):
    env = BatchEnv(batch, n_roll)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        keep = env.feasible()
        a = np.array([[rng.choice(np.flatnonzero(keep[b, p])) for p in range(n_roll)] for b in range(batch.size)])
        env.step(a)
    return env


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(embedding_dim=10, heads=3)
    with pytest.raises(ValueError):
        M.ModelConfig(strategy="XYZ")
    assert M.ModelConfig.from_json(small().to_json()) == small()
    d = M.ModelConfig()
    assert (d.embedding_dim, d.heads, d.encoder_layers, d.ff_hidden, d.clip) == (128, 8, 6, 512, 10.0)


def test_encode_shape_default_config():
    inst = generate_instance(parse_variant("cvrptw"), 10, 0)
    cfg = M.ModelConfig()
    H = M.encode(inst, M.init_params(cfg), cfg)
    assert H.shape == (11, 128)


def test_encoder_permutation_equivariance():
    cfg = small()
    params = M.init_params(cfg, 1)
    inst = generate_instance(parse_variant("cvrpbtw"), 7, 3)
    perm = np.random.default_rng(0).permutation(7)
    shuffled = VrpInstance(inst.variant, inst.seed, inst.depot, inst.coords[perm], inst.demands[perm], inst.capacity,
                           np.vstack([inst.windows[:1], inst.windows[1:][perm]]),
                           np.concatenate([inst.service_times[:1], inst.service_times[1:][perm]]),
                           inst.duration_limit, inst.backhaul_flags[perm])
    H = M.encode(inst, params, cfg).data
    Hs = M.encode(shuffled, params, cfg).data
    np.testing.assert_allclose(Hs[1:], H[1:][perm], atol=1e-12)
    np.testing.assert_allclose(Hs[0], H[0], atol=1e-12)


def test_identical_customers_share_embeddings():
    cfg = small()
    inst = generate_instance(parse_variant("cvrp"), 5, 2)
    inst.coords[3] = inst.coords[1]
    inst.demands[3] = inst.demands[1]
    H = M.encode(inst, M.init_params(cfg), cfg).data
    np.testing.assert_array_equal(H[2], H[4])


def test_node_feature_layout():
    inst = generate_instance(parse_variant("ocvrpbltw"), 6, 4)
    depot, feats = M.node_features(InstanceBatch.from_instances([inst]))
    np.testing.assert_array_equal(depot[0, 0], inst.depot)
    f = feats[0]
    np.testing.assert_array_equal(f[:, :2], inst.coords)
    np.testing.assert_allclose(f[:, 2], inst.demands / 50)
    np.testing.assert_allclose(f[:, 3], inst.windows[1:, 0] / 3.0)
    np.testing.assert_allclose(f[:, 4], inst.windows[1:, 1] / 3.0)
    np.testing.assert_allclose(f[:, 5], 0.2 / 3.0)
    np.testing.assert_array_equal(f[:, 6], inst.backhaul_flags)
    assert np.all(f[:, 7] == 1.0) and np.all(f[:, 8] == 1.0)
    _, plain = M.node_features(InstanceBatch.from_instances([generate_instance(parse_variant("cvrp"), 6, 4)]))
    assert np.all(plain[0, :, 3:] == 0)


def test_context_embedding():
    last = Tensor(np.arange(4.0))
    c = np.array([1.0, 0.0, 1.0, 0.0])
    h = M.context_embedding(last, c).data
    np.testing.assert_array_equal(h, [0, 1, 2, 3, 1, 0, 1, 0])
    h2 = M.context_embedding(last, c * 0.5).data
    np.testing.assert_array_equal(h[:4], h2[:4])


def scalar_carm_params(wc, bc, wg, bg, wb, bb):
    return {"dec.Wc": parameter(np.array(wc, float)), "dec.bc": parameter(np.array(bc, float)),
            "dec.Wgamma": parameter(np.array(wg, float)), "dec.bgamma": parameter(np.array(bg, float)),
            "dec.Wbeta": parameter(np.array(wb, float)), "dec.bbeta": parameter(np.array(bb, float))}


def test_carm_modulate_hand_example():
    params = scalar_carm_params([[1.0], [0.0]], [0.0], [[0.5]], [0.0], [[-1.0]], [0.0])
    out = M.carm_modulate(Tensor(np.array([2.0, 3.0])), np.array([3.0]), params)
    assert out.data.tolist() == [2.0]


def test_carm_modulate_identity_when_film_is_zero():
    rng = np.random.default_rng(0)
    wc, bc = rng.normal(size=(6, 4)), rng.normal(size=4)
    h = rng.normal(size=6)
    params = scalar_carm_params(wc, bc, np.zeros((2, 4)), np.zeros(4), np.zeros((2, 4)), np.zeros(4))
    np.testing.assert_array_equal(M.carm_modulate(Tensor(h), rng.normal(size=2), params).data, h @ wc + bc)
    params = scalar_carm_params(wc, bc, rng.normal(size=(2, 4)), np.zeros(4), rng.normal(size=(2, 4)), np.zeros(4))
    np.testing.assert_array_equal(M.carm_modulate(Tensor(h), np.zeros(2), params).data, h @ wc + bc)


def _cache_for(inst, cfg, params):
    batch = InstanceBatch.from_instances([inst])
    nodes = M.encode_batch(batch, params, cfg)
    return batch, nodes, M.build_cache(nodes, params, cfg)


def test_single_unmasked_node_attends_to_its_value():
    cfg = small("FGE")
    params = randomize(M.init_params(cfg), 1)
    inst = generate_instance(parse_variant("cvrp"), 3, 0)
    _, nodes, cache = _cache_for(inst, cfg, params)
    q = Tensor(np.random.default_rng(0).normal(size=(1, 1, 16 + 4)))
    keep = np.array([[[False, False, True, False]]])
    out = M.glimpse(q, cache, keep, params, cfg).data[0, 0]
    value = nodes.data[0, 2] @ params["dec.Wv"].data
    np.testing.assert_allclose(out, value @ params["dec.Wo"].data + params["dec.bo"].data, atol=1e-12)


def test_carm_state_embedding_is_h_m_when_attention_vanishes():
    cfg = small("CARM")
    params = randomize(M.init_params(cfg), 2)
    params["dec.Wo"].data[:] = 0
    params["dec.bo"].data[:] = 0
    inst = generate_instance(parse_variant("cvrp"), 4, 0)
    _, _, cache = _cache_for(inst, cfg, params)
    hm = Tensor(np.random.default_rng(1).normal(size=(1, 1, 16)))
    out = M.state_embedding(hm, cache, np.ones((1, 1, 5), bool), params, cfg)
    np.testing.assert_array_equal(out.data, hm.data)


def test_pre_and_fge_differ_when_a_node_is_infeasible_but_unvisited():
    inst = VrpInstance(parse_variant("cvrp"), 0, np.array([0.5, 0.5]), np.array([[0.1, 0.2], [0.8, 0.3], [0.4, 0.9]]),
                       np.array([45, 9, 2]), 50, None, None, None, np.zeros(3, bool))
    cfg = small("FGE")
    params = randomize(M.init_params(cfg), 3)
    batch, _, cache = _cache_for(inst, cfg, params)
    env = BatchEnv(batch, 1)
    env.step(np.array([[1]]))
    feas = env.feasible()
    assert not feas[0, 0, 2] and not env.visited[0, 0, 2]
    feats = env.features(4)
    outs = {s: M.decoder_step(params, cfg, cache, env.current, feats, feas, env.attention_keep(s, feas))
            for s in ("PRE", "FGE")}
    assert not np.allclose(outs["PRE"].state_emb.data, outs["FGE"].state_emb.data)
    np.testing.assert_array_equal(outs["PRE"].probs.data == 0, outs["FGE"].probs.data == 0)


def test_idt_head_examples():
    d = 4
    rng = np.random.default_rng(0)
    params = {"dec.Widt": parameter(rng.normal(size=(2, d))), "dec.ff1.W": parameter(np.zeros((d, 8))),
              "dec.ff1.b": parameter(np.zeros(8)), "dec.ff2.W": parameter(np.zeros((8, d))),
              "dec.ff2.b": parameter(np.zeros(d))}
    ha, last, hm = (Tensor(rng.normal(size=d)) for _ in range(3))
    c = rng.normal(size=2)
    out = M.idt_state_embedding(ha, last, np.zeros(2), params)
    np.testing.assert_allclose(out.data, ha.data + last.data)
    out = M.idt_state_embedding(ha, last, c, params, hm)
    np.testing.assert_allclose(out.data, ha.data + hm.data + last.data + c @ params["dec.Widt"].data)
    # non-trivial FF against a hand trace
    for k in ("dec.ff1.W", "dec.ff1.b", "dec.ff2.W", "dec.ff2.b"):
        params[k].data = rng.normal(size=params[k].shape)
    x = ha.data + last.data + c @ params["dec.Widt"].data
    ff = np.maximum(x @ params["dec.ff1.W"].data + params["dec.ff1.b"].data, 0) @ params["dec.ff2.W"].data
    expect = ff + params["dec.ff2.b"].data + x
    np.testing.assert_allclose(M.idt_state_embedding(ha, last, c, params).data, expect, atol=1e-12)


def test_compatibility_examples():
    nodes = Tensor(np.zeros((1, 3, 4)))
    emb = Tensor(np.ones((1, 1, 4)))
    p = M.compatibility(emb, nodes, np.array([[[True, True, False]]]), 10.0).data
    np.testing.assert_allclose(p, [[[0.5, 0.5, 0.0]]])
    rng = np.random.default_rng(0)
    big = Tensor(rng.normal(size=(2, 3, 8)) * 100)
    logits = M.compatibility_logits(big, Tensor(rng.normal(size=(2, 5, 8))), 10.0).data
    assert np.all(np.abs(logits) <= 10.0)
    sat = M.compatibility(Tensor(np.array([[[1e6]]])), Tensor(np.array([[[1.0], [-1.0]]])),
                          np.ones((1, 1, 2), bool), 10.0).data[0, 0]
    sig = 1 / (1 + math.exp(-20))
    assert sat[0] == pytest.approx(sig, abs=1e-12) and sat[1] == pytest.approx(1 - sig, abs=1e-12)


def test_carm_reduces_to_linear_projection_fge():
    cfg = small("CARM")
    params = randomize(M.init_params(cfg), 4)
    for k in ("dec.Wgamma", "dec.bgamma", "dec.Wbeta", "dec.bbeta"):
        params[k].data[:] = 0
    batch = InstanceBatch.from_instances(generate_dataset(parse_variant("cvrptw"), 8, 3, 0))
    _, nodes, cache = None, *(lambda n: (n, M.build_cache(n, params, cfg)))(M.encode_batch(batch, params, cfg))
    env = env_state(batch, 4, 3)
    feas = env.feasible()
    attn = env.attention_keep("CARM", feas)
    feats = env.features(4)
    out = M.decoder_step(params, cfg, cache, env.current, feats, feas, attn)
    last = T.take(nodes, (np.arange(3)[:, None], env.current))
    hbar = T.linear(M.context_embedding(last, feats), params["dec.Wc"], params["dec.bc"])
    ref = M.compatibility_logits(hbar + M.glimpse(hbar, cache, attn, params, cfg), nodes, cfg.clip)
    np.testing.assert_array_equal(out.logits.data, ref.data)


def test_param_count_delta():
    total, delta = M.param_count(M.ModelConfig(strategy="CARM"))
    assert delta == 17792 == M.carm_delta_formula(128, 4)
    assert M.param_count(M.ModelConfig(strategy="FGE"))[1] == 0
    assert M.param_count(M.ModelConfig(strategy="CARM", dynamic_features=0))[1] == 128**2 + 3 * 128
    assert M.carm_delta_formula(256, 0) - 3 * 256 == 4 * (M.carm_delta_formula(128, 0) - 3 * 128)
    assert total == sum(p.data.size for p in M.init_params(M.ModelConfig(strategy="CARM")).values())


def test_carm_film_starts_at_zero():
    params = M.init_params(small("CARM"))
    for k in ("dec.Wgamma", "dec.bgamma", "dec.Wbeta", "dec.bbeta"):
        assert np.all(params[k].data == 0)
    bound = 1 / math.sqrt(20)
    assert np.all(np.abs(params["dec.Wc"].data) <= bound)


@pytest.mark.parametrize("strategy,idt", [("PRE", False), ("FGE", False), ("CARM", False), ("CARM", True),
                                          ("PRE", True)])
def test_decoder_step_gradients(strategy, idt):
    cfg = small(strategy, idt_head=idt)
    params = randomize(M.init_params(cfg), 5)
    batch = InstanceBatch.from_instances(generate_dataset(parse_variant("cvrpltw"), 6, 2, 1))
    nodes = Tensor(M.encode_batch(batch, params, cfg).data)
    env = env_state(batch, 2, 2)
    feas, feats = env.feasible(), env.features(4)
    attn = env.attention_keep(strategy, feas)
    w = np.random.default_rng(0).normal(size=feas.shape)
    chosen = feas.argmax(-1)
    names = [k for k in params if k.startswith("dec.")]

    def loss_fn():
        cache = M.build_cache(nodes, params, cfg)
        out = M.decoder_step(params, cfg, cache, env.current, feats, feas, attn)
        pick = T.take(out.probs, (np.arange(2)[:, None], np.arange(2)[None, :], chosen))
        return (out.probs * w).sum() + T.log(pick).sum()

    with Tape() as tape:
        grads = tape.backward(loss_fn())
    for name in names:
        num = central_difference(lambda: float(loss_fn().data), params[name].data)
        got = grads.get(params[name], np.zeros_like(num))
        assert rel_error(got, num) < 1e-6, name


def test_decode_is_deterministic_and_valid():
    cfg = small("CARM", idt_head=True)
    params = M.init_params(cfg, 3)
    inst = generate_instance(parse_variant("ocvrpbltw"), 9, 2)
    a = M.decode(inst, params, cfg, starts=range(1, 10))
    b = M.decode(inst, params, cfg, starts=range(1, 10))
    assert [t.tour for t in a] == [t.tour for t in b]
    for t in a:
        assert validate_solution(inst, t.tour) == []
        assert all(lp <= 0 and np.isfinite(lp) for lp in t.log_probs)


def test_sampled_log_prob_is_sum_of_steps():
    cfg = small("FGE")
    params = M.init_params(cfg, 3)
    batch = InstanceBatch.from_instances(generate_dataset(parse_variant("cvrptw"), 8, 2, 2))
    res = M.rollout(params, cfg, batch, np.arange(1, 9), "sample", np.random.default_rng(0))
    np.testing.assert_allclose(res.log_prob.data, res.step_log_probs.sum(-1), rtol=1e-12)
    assert np.all(res.step_log_probs[~res.active] == 0)
    # replaying the same actions reproduces every per-step log-probability
    forced = np.stack([a for a in res.actions], axis=-1)
    again = M.rollout(params, cfg, batch, np.arange(1, 9), "greedy", forced=forced[..., 1:])
    np.testing.assert_allclose(again.step_log_probs, res.step_log_probs, atol=1e-12)


def test_decode_probabilities_are_permutation_equivariant():
    cfg = small("CARM")
    params = randomize(M.init_params(cfg), 7, 0.3)
    inst = generate_instance(parse_variant("cvrp"), 7, 5)
    perm = np.random.default_rng(1).permutation(7)
    inv = np.argsort(perm)
    other = VrpInstance(inst.variant, 0, inst.depot, inst.coords[perm], inst.demands[perm], inst.capacity,
                        None, None, None, inst.backhaul_flags[perm])
    (ta,) = M.decode(inst, params, cfg)
    (tb,) = M.decode(other, params, cfg)
    relabel = [0 if x == 0 else int(inv[x - 1]) + 1 for x in ta.tour]
    assert tb.tour == relabel
    np.testing.assert_allclose(tb.log_probs, ta.log_probs, atol=1e-10)


def test_greedy_is_invariant_to_isometries_when_encoder_ignores_position():
    from carm_route.training import augment_x8

    cfg = small("CARM")
    params = M.init_params(cfg, 9)
    params["enc.node.W"].data[:2] = 0
    params["enc.depot.W"].data[:] = 0
    inst = generate_instance(parse_variant("cvrptw"), 8, 6)
    tours = {tuple(M.decode(a, params, cfg, starts=range(1, 9))[k].tour)
             for a in augment_x8(inst) for k in [3]}
    assert len(tours) == 1


def test_every_carm_parameter_gets_gradient():
    from carm_route.training import reinforce_loss

    cfg = small("CARM", idt_head=True)
    params = M.init_params(cfg, 0)
    batch = InstanceBatch.from_instances(generate_dataset(parse_variant("cvrpltw"), 10, 4, 0))
    with Tape() as tape:
        res = M.rollout(params, cfg, batch, np.arange(1, 11), "sample", np.random.default_rng(0))
        grads = tape.backward(reinforce_loss(res.costs, res.log_prob))
    for name in ("dec.Wc", "dec.bc", "dec.Wgamma", "dec.bgamma", "dec.Wbeta", "dec.bbeta", "dec.Wq", "dec.Widt"):
        assert np.abs(grads[params[name]]).sum() > 0, name
