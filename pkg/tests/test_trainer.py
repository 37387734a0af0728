import math

import numpy as np
import pytest

from deepprior import autodiff as ad
from deepprior.datasets import MetaDataset, Minibatch, Task, gen_harmonics, harmonic_function, sample_minibatch
from deepprior.errors import ContractError, FormatError, TrainingDiverged
from deepprior.networks import gaussian_loglik, hetero_noise, regress_forward
from deepprior.posterior import TaskPosteriorParams
from deepprior.rng import make_rng
from deepprior.trainer import (
    AdamState,
    DeepPrior,
    ModelConfig,
    TrainConfig,
    adam_step,
    adapt_new_task,
    adapt_tasks,
    checkpoint_bytes,
    eval_mse,
    init_checkpoint,
    load_checkpoint,
    minibatch_loss,
    parse_checkpoint,
    predict_marginal,
    save_checkpoint,
    train,
)

TINY = dict(d_x=1, d_z=2, width=8, n_layers=2, flow_layers=2, flow_hidden=8)


@pytest.fixture(scope="module")
def small_ds():
    return gen_harmonics(12, (4, 20), seed=0)


@pytest.fixture(scope="module")
def trained(small_ds):
    cfg = TrainConfig(max_steps=300, eval_every=100, learning_rate=3e-3, adapt_steps=150, record_wall_time=False)
    return train(small_ds, ModelConfig(**TINY), cfg).checkpoint


def _random_params(model, n_tasks, seed):
    rng = make_rng(seed, "params")
    params = model.init_shared(rng)
    for k in params:
        if k.startswith("flow.") and k.endswith((".Wm", ".Ws", ".bm", ".bs")):
            params[k] = rng.normal(scale=0.3, size=params[k].shape)
    params["task.mu"] = rng.normal(size=(n_tasks, model.cfg.d_z))
    params["task.log_sigma"] = rng.normal(scale=0.3, size=(n_tasks, model.cfg.d_z))
    params["task.context"] = rng.normal(size=(n_tasks, model.cfg.d_c))
    return params


def test_single_element_loss_is_negative_loglik():
    model = DeepPrior(ModelConfig(**TINY, posterior="gaussian"))
    params = _random_params(model, 3, 0)
    batch = Minibatch(np.array([[0.4]]), np.array([0.2]), np.array([1]), np.array([1]))
    eps = np.array([[0.3, -1.2]])
    loss = minibatch_loss(batch, model, params, TrainConfig(kl_weight=0.0), eps).loss.value
    z = params["task.mu"][1] + np.exp(params["task.log_sigma"][1]) * eps[0]
    mu, s = regress_forward(np.array([0.4]), z, params, model.net)
    assert loss == pytest.approx(-gaussian_loglik(0.2, mu.value, hetero_noise(s.value)), abs=1e-12)


def test_prior_posterior_has_zero_expected_kl(small_ds):
    ckpt = init_checkpoint(small_ds, ModelConfig(**TINY), TrainConfig())
    model = DeepPrior(ckpt.model_cfg)
    batch = sample_minibatch(small_ds, 2000, make_rng(1, "mb"))
    eps = make_rng(2, "eps").standard_normal((2000, 2))
    terms = minibatch_loss(batch, model, ckpt.params, TrainConfig(), eps)
    assert abs(terms.kl_rows.mean()) < 1e-12  # identity flow over the prior: log q = log p pointwise


def test_likelihood_term_linear_in_n_j():
    model = DeepPrior(ModelConfig(**TINY))
    params = _random_params(model, 4, 1)
    rng = make_rng(3, "b")
    x, y, j = rng.normal(size=(5, 1)), rng.normal(size=5), np.array([0, 1, 2, 3, 1])
    n_j = np.array([3, 7, 1, 4, 7])
    eps = rng.standard_normal((5, 2))
    one = minibatch_loss(Minibatch(x, y, j, n_j), model, params, TrainConfig(), eps)
    two = minibatch_loss(Minibatch(x, y, j, 2 * n_j), model, params, TrainConfig(), eps)
    np.testing.assert_array_equal(two.likelihood_rows, 2 * one.likelihood_rows)
    np.testing.assert_array_equal(two.kl_rows, one.kl_rows)


def test_unknown_task_is_contract_error():
    model = DeepPrior(ModelConfig(**TINY))
    params = _random_params(model, 2, 0)
    batch = Minibatch(np.zeros((1, 1)), np.zeros(1), np.array([5]), np.array([1]))
    with pytest.raises(ContractError):
        minibatch_loss(batch, model, params, TrainConfig(), np.zeros((1, 2)))


@pytest.mark.parametrize("posterior", ["gaussian", "iaf"])
def test_minibatch_loss_gradient_matches_finite_differences(posterior):
    model = DeepPrior(ModelConfig(**TINY, posterior=posterior))
    base = _random_params(model, 3, 4)
    rng = make_rng(5, "batch")
    batch = Minibatch(rng.normal(size=(6, 1)), rng.normal(scale=0.2, size=6), rng.integers(0, 3, 6),
                      rng.integers(1, 5, 6))
    eps = rng.standard_normal((6, 2))
    cfg = TrainConfig(kl_weight=0.7)
    for name in sorted(base):
        def f(v, name=name):
            params = dict(base)
            params[name] = v
            return minibatch_loss(batch, model, params, cfg, eps).loss

        assert ad.finite_diff_check(f, base[name]) < 1e-4, name


def test_adam_zero_gradient_keeps_parameters():
    params = {"net.w": np.array([1.0, -2.0])}
    new, state = adam_step(params, {"net.w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(new["net.w"], params["net.w"])
    assert state.t == 1


def test_adam_first_step_is_signed_learning_rate():
    params = {"net.w": np.array([1.0, -2.0, 0.5])}
    g = np.array([3.0, -0.01, 1e-3])
    new, _ = adam_step(params, {"net.w": g}, AdamState(), lr=0.01)
    np.testing.assert_allclose(new["net.w"] - params["net.w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_converges_on_quadratic():
    target = np.array([1.5, -0.7, 3.0])
    scale = np.array([1.0, 4.0, 0.25])
    params, state = {"net.w": np.zeros(3)}, AdamState()
    for _ in range(200):
        params, state = adam_step(params, {"net.w": 2 * scale * (params["net.w"] - target)}, state, lr=0.1)
    assert np.abs(params["net.w"] - target).max() < 1e-3


def test_adam_does_not_mutate_inputs():
    params = {"net.w": np.ones(2)}
    before = params["net.w"].copy()
    adam_step(params, {"net.w": np.ones(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(params["net.w"], before)
    with pytest.raises(ContractError):
        adam_step(params, {"net.w": np.ones(3)}, AdamState(), lr=0.1)


def test_constant_target_loss_decreases():
    ds = MetaDataset([Task(0, np.linspace(-1, 1, 32)[:, None], np.full(32, 0.3))])
    cfg = TrainConfig(n_mb=16, max_steps=600, eval_every=100, learning_rate=3e-3, record_wall_time=False)
    rows = train(ds, ModelConfig(**TINY), cfg).metrics
    losses = [r["loss"] for r in rows]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_deterministic_baseline_has_point_posterior(small_ds):
    cfg = TrainConfig(baseline_mode="no_kl_deterministic")
    ckpt = init_checkpoint(small_ds, ModelConfig(**TINY), cfg)
    model = DeepPrior(ckpt.model_cfg)
    params = dict(ckpt.params)
    params["task.mu"] = make_rng(0, "mu").normal(size=params["task.mu"].shape)
    batch = sample_minibatch(small_ds, 20, make_rng(1, "mb"))
    z, kl = model.draw(params, batch.j, make_rng(2, "e").standard_normal((20, 2)), deterministic=True)
    np.testing.assert_array_equal(z.value, params["task.mu"][batch.j])
    assert np.all(kl.value == 0)
    terms = minibatch_loss(batch, model, params, cfg, np.zeros((20, 2)))
    assert terms.kl == 0.0


def test_same_seed_gives_identical_metrics(small_ds, tmp_path):
    cfg = TrainConfig(max_steps=40, eval_every=10, record_wall_time=False)
    train(small_ds, ModelConfig(**TINY), cfg, metrics_path=tmp_path / "a.csv")
    train(small_ds, ModelConfig(**TINY), cfg, metrics_path=tmp_path / "b.csv")
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b
    assert a.splitlines()[0] == b"step,loss,nll,kl,wall_ms"
    assert len(a.splitlines()) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_returns_last_good_checkpoint():
    ds = MetaDataset([Task(0, [[0.0], [1.0]], [1e200, -1e200])])
    with pytest.raises(TrainingDiverged) as info:
        train(ds, ModelConfig(**TINY), TrainConfig(max_steps=5, n_mb=2))
    assert info.value.checkpoint is not None and info.value.checkpoint.step == 0


def test_checkpoint_round_trip_restores_training(small_ds, tmp_path):
    cfg = TrainConfig(max_steps=30, eval_every=1, record_wall_time=False)
    first = train(small_ds, ModelConfig(**TINY), cfg).checkpoint
    path = save_checkpoint(first, tmp_path / "c.dpck")
    loaded = load_checkpoint(path)
    assert checkpoint_bytes(loaded) == checkpoint_bytes(first)
    direct = train(small_ds, resume=first, max_steps=31)
    resumed = train(small_ds, resume=loaded, max_steps=31)
    assert direct.metrics[-1]["loss"] == resumed.metrics[-1]["loss"]
    assert checkpoint_bytes(direct.checkpoint) == checkpoint_bytes(resumed.checkpoint)
    whole = train(small_ds, ModelConfig(**TINY), TrainConfig(max_steps=31, eval_every=1,
                                                              record_wall_time=False))
    assert whole.metrics[-1]["loss"] == resumed.metrics[-1]["loss"]
    assert resumed.checkpoint.step == 31


def test_corrupted_checkpoint_rejected(small_ds):
    buf = checkpoint_bytes(init_checkpoint(small_ds, ModelConfig(**TINY), TrainConfig()))
    for bad in (b"XXXX" + buf[4:], buf[:4] + b"\x07\x00" + buf[6:], buf[:-3], buf + b"\x00"):
        with pytest.raises(FormatError):
            parse_checkpoint(bad)


def test_ml_loop_matches_independent_torch_implementation(small_ds):
    torch = pytest.importorskip("torch")
    mcfg = ModelConfig(d_x=1, d_z=3, width=8, n_layers=2, posterior="gaussian")
    cfg = TrainConfig(n_mb=16, max_steps=10, eval_every=1, kl_weight=0.0, baseline_mode="no_kl_deterministic",
                      learning_rate=1e-2, weight_decay=0.0, record_wall_time=False)
    ckpt = init_checkpoint(small_ds, mcfg, cfg)
    params = dict(ckpt.params)
    params["task.mu"] = make_rng(0, "mu").normal(size=params["task.mu"].shape)
    ckpt.params = params
    ours = [r["loss"] for r in train(small_ds, resume=ckpt).metrics]

    # independent maximum-likelihood loop: same batches, same initial weights
    rng = make_rng(cfg.seed, "train")
    tp = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True)
          for k, v in params.items() if k != "task.log_sigma" and k != "task.context"}
    opt = torch.optim.Adam(tp.values(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)

    def dense(name, h):
        h = h @ tp[f"{name}.W"] + tp[f"{name}.b"]
        h = torch.nn.functional.layer_norm(h, h.shape[-1:], eps=1e-5) * tp[f"{name}.ln_g"] + tp[f"{name}.ln_b"]
        return torch.relu(h)

    theirs = []
    for _ in range(10):
        b = sample_minibatch(small_ds, cfg.n_mb, rng)
        rng.standard_normal((cfg.n_mb, mcfg.d_z))  # consume the unused noise draw
        z = tp["task.mu"][torch.tensor(b.j)]
        h = dense("net.in", torch.cat([torch.tensor(b.x), z], dim=1))
        h = h + dense("net.h1", dense("net.h0", h))
        out = h @ tp["net.out.W"] + tp["net.out.b"]
        sigma = torch.sigmoid(out[:, 1]) * 0.1 + 0.001
        dist = torch.distributions.Normal(out[:, 0], sigma)
        loss = -(torch.tensor(b.n_j, dtype=torch.float64) * dist.log_prob(torch.tensor(b.y))).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        theirs.append(loss.item())
    np.testing.assert_allclose(ours, theirs, rtol=0, atol=1e-10 * max(1.0, max(map(abs, theirs))))


def test_adapt_zero_steps_is_prior(trained, small_ds):
    post = adapt_new_task(trained, gen_harmonics(1, (8, 8), seed=5, split="meta-test").tasks[0], steps=0)
    np.testing.assert_array_equal(post.mu, np.zeros(2))
    np.testing.assert_array_equal(post.log_sigma, np.zeros(2))


def test_adapt_never_touches_shared_parameters(trained):
    before = trained.shared_checksum()
    snapshot = {k: v.copy() for k, v in trained.params.items()}
    adapt_tasks(trained, gen_harmonics(3, (8, 8), seed=5, split="meta-test").tasks, steps=20)
    assert trained.shared_checksum() == before
    for k, v in snapshot.items():
        np.testing.assert_array_equal(trained.params[k], v)


def test_adapt_batched_equals_individual(trained):
    tasks = gen_harmonics(3, (6, 12), seed=6, split="meta-test").tasks
    joint = adapt_tasks(trained, tasks, steps=15, seed=1)
    for t, post in zip(tasks, joint):
        alone = adapt_new_task(trained, t, steps=15, seed=1)
        np.testing.assert_allclose(post.mu, alone.mu, atol=1e-10)
        np.testing.assert_allclose(post.log_sigma, alone.log_sigma, atol=1e-10)


def test_posterior_contracts_with_more_data(trained):
    tasks = gen_harmonics(20, (64, 64), seed=8, split="meta-test").tasks
    small = adapt_tasks(trained, [t.subset(2) for t in tasks], steps=150)
    large = adapt_tasks(trained, tasks, steps=150)
    assert np.mean([p.sigma.mean() for p in large]) < np.mean([p.sigma.mean() for p in small])


def test_predict_single_sample_is_network_mean(trained):
    post = TaskPosteriorParams(np.array([0.3, -0.2]), np.array([-0.5, 0.1]), np.array([0.2, 0.0]))
    x = np.linspace(-2, 2, 7)
    pred = predict_marginal(trained, post, x, n_samples=1, rng=make_rng(0, "p"))
    mu, _ = regress_forward(x, np.repeat(pred.z, 7, axis=0), trained.params, DeepPrior(trained.model_cfg).net)
    np.testing.assert_allclose(pred.mean, mu.value, atol=1e-14)
    assert np.all(pred.epistemic_std == 0)
    assert np.all(pred.std >= 0.001)
    with pytest.raises(ContractError):
        predict_marginal(trained, post, x, n_samples=0)


def test_baseline_prediction_has_no_epistemic_variance(small_ds):
    cfg = TrainConfig(max_steps=5, baseline_mode="no_kl_deterministic")
    ckpt = train(small_ds, ModelConfig(**TINY), cfg).checkpoint
    post = adapt_new_task(ckpt, small_ds.tasks[0], steps=5)
    pred = predict_marginal(ckpt, post, np.linspace(-1, 1, 5), n_samples=10)
    assert np.all(pred.epistemic_std == 0)
    assert np.all(pred.std >= 0.001)


def test_oracle_predictor_mse_is_noise_variance():
    tasks = gen_harmonics(20, (64, 64), seed=9, split="meta-test", n_eval=100).tasks

    def oracle(t):
        m = t.meta
        return harmonic_function(t.x_eval[:, 0], m["omega"], m["a1"], m["a2"], m["b1"], m["b2"])

    table = eval_mse(None, tasks, (2, 64), predictor=oracle)
    for row in table:
        assert row["mse_mean"] == pytest.approx(0.05 ** 2, rel=0.1)
        assert set(row) == {"train_size", "mse_mean", "mse_stderr", "n_tasks"}
        assert row["n_tasks"] == 20


def test_eval_mse_on_trained_model(trained):
    tasks = gen_harmonics(4, (16, 16), seed=10, split="meta-test", n_eval=100).tasks
    table = eval_mse(trained, tasks, (2, 16), n_samples=4, steps=20)
    assert [r["train_size"] for r in table] == [2, 16]
    assert all(math.isfinite(r["mse_mean"]) for r in table)
