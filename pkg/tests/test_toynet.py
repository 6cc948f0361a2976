import numpy as np
import pytest

from dualattn.consistency import penalty_t, solve_witness
from dualattn.diffkit import Tensor, grad_check, parameter
from dualattn.errors import FormatError, RejectedInput
from dualattn.grid import ProbabilityMap
from dualattn.synthdata import DatasetSpec, generate
from dualattn.toynet import (
    TrainConfig,
    VARIANTS,
    attribution,
    forward,
    init_params,
    load_checkpoint,
    loss,
    predict,
    save_checkpoint,
    train,
    upsample_attention,
    write_metrics,
)
from dualattn.toynet.model import NMAP, penalty_terms


@pytest.fixture(scope="module")
def tiny():
    return generate(DatasetSpec(count=8, seed=11))


def _jitter(params, seed=0, scale=0.1):
    """Move every parameter off its initialization so no gradient is trivially zero."""
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    return params


def test_config_validation():
    with pytest.raises(RejectedInput):
        TrainConfig(variant="nope")
    with pytest.raises(RejectedInput):
        TrainConfig(alpha=-1.0)
    with pytest.raises(RejectedInput):
        TrainConfig.from_json('{"variant": "dual", "bogus": 1}')
    cfg = TrainConfig(variant="kl_zero_fl", seed=4)
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_zero_image_gives_bias_logits_and_uniform_tau():
    cfg = TrainConfig(variant="tau_k")
    params = init_params(cfg)
    params["head.b"].data = np.array([0.3, -0.7])
    out = forward(params, cfg, np.zeros((2, 64, 64)))
    assert np.allclose(out.logits.data, [[0.3, -0.7]] * 2)
    assert np.allclose(out.tau_fine.data, 1 / 256, atol=1e-15)
    assert out.tau_coarse is None and out.lam is None


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_shapes_and_probabilities(variant, tiny):
    cfg = TrainConfig(variant=variant)
    out = forward(init_params(cfg), cfg, tiny.images[:3])
    assert out.logits.shape == (3, 2)
    for tau, cells, site in ((out.tau_fine, 256, "fine"), (out.tau_coarse, 64, "coarse")):
        if site in cfg.sites:
            assert tau.shape == (3, cells)
            for row in tau.data:
                ProbabilityMap(row)
        else:
            assert tau is None
    assert (out.lam is not None) == (variant == "dual")


def test_forward_rejects_bad_shape():
    cfg = TrainConfig(variant="tau_l")
    with pytest.raises(RejectedInput):
        forward(init_params(cfg), cfg, np.zeros((1, 32, 32)))
    with pytest.raises(RejectedInput):
        forward(init_params(cfg), cfg, np.full((1, 64, 64), np.nan))


def test_map_witness_at_init_equals_closed_form(tiny):
    cfg = TrainConfig(variant="dual", witness="map")
    out = forward(init_params(cfg), cfg, tiny.images[:4])
    for i in range(4):
        w = solve_witness(
            ProbabilityMap(out.tau_fine.data[i]).smoothed(), ProbabilityMap(out.tau_coarse.data[i]).smoothed(), NMAP
        )
        diff = out.lam.data[i] - w.lam
        assert np.ptp(diff) < 1e-10


def test_dual_loss_at_witness_is_ce(tiny):
    cfg = TrainConfig(variant="dual", witness="closed_form")
    params = _jitter(init_params(cfg))
    out = forward(params, cfg, tiny.images[:4])
    total, ce, pen = loss(out, tiny.labels[:4], cfg)
    assert pen.item() <= 1e-12
    assert total.item() == pytest.approx(ce.item(), abs=1e-11)


def test_alpha_zero_dual_equals_unconstrained(tiny):
    dual = TrainConfig(variant="dual", alpha=0.0, seed=2)
    plain = TrainConfig(variant="unconstrained", seed=2)
    params = init_params(dual)
    shared = {k: v for k, v in params.items() if not k.startswith("witness")}
    a = loss(forward(params, dual, tiny.images[:4]), tiny.labels[:4], dual)[0].item()
    b = loss(forward(shared, plain, tiny.images[:4]), tiny.labels[:4], plain)[0].item()
    assert a == b


def test_confident_logits_leave_penalty():
    cfg = TrainConfig(variant="dual")
    rng = np.random.default_rng(0)
    fine = rng.random((2, 256)) + 0.1
    coarse = rng.random((2, 64)) + 0.1
    from dualattn.toynet.model import ForwardResult

    out = ForwardResult(
        Tensor(np.array([[60.0, -60.0], [-60.0, 60.0]])),
        Tensor(fine / fine.sum(1, keepdims=True)),
        Tensor(coarse / coarse.sum(1, keepdims=True)),
        Tensor(np.zeros((2, 64))),
    )
    total, ce, pen = loss(out, np.array([0, 1]), cfg)
    assert ce.item() < 1e-40
    assert total.item() == pytest.approx(10.0 * pen.item(), rel=1e-12)


def test_kl_zero_directions():
    rng = np.random.default_rng(1)
    fine = rng.random((1, 256)) + 0.1
    coarse = rng.random((1, 64)) + 0.1
    fine, coarse = fine / fine.sum(), coarse / coarse.sum()
    marg = fine @ NMAP.assignment_matrix()
    from dualattn.toynet.model import ForwardResult

    out = ForwardResult(Tensor(np.zeros((1, 2))), Tensor(fine), Tensor(coarse), None)
    lf = penalty_terms(out, TrainConfig(variant="kl_zero_lf")).data[0]
    fl = penalty_terms(out, TrainConfig(variant="kl_zero_fl")).data[0]
    assert lf == pytest.approx(np.sum(coarse * np.log(coarse / marg)), rel=1e-12)
    assert fl == pytest.approx(np.sum(marg * np.log(marg / coarse)), rel=1e-12)
    # with lambda = 0 the dual penalty is the lf direction
    zero = penalty_t(Tensor(fine), Tensor(coarse), Tensor(np.zeros((1, 64))), NMAP.assignment_matrix()).data[0]
    assert zero == pytest.approx(lf, rel=1e-10)


def relu_pattern(out: Tensor) -> np.ndarray:
    """Signs of every relu input in the graph, in a fixed traversal order."""
    seen, stack, signs = set(), [out], []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "relu":
            signs.append((node.parents[0].data > 0).reshape(-1))
        stack.extend(node.parents)
    return np.concatenate(signs) if signs else np.zeros(0, bool)


@pytest.mark.parametrize(
    "variant, witness",
    [("dual", "free"), ("dual", "map"), ("kl_zero_fl", "free"), ("unconstrained", "free")],
)
def test_full_model_gradient(variant, witness, tiny):
    """Five random coordinates per tensor, skipping any whose +-step segment crosses a relu kink.

    Central differences are only meaningful where the loss is smooth across the
    whole stencil; a crossing shows up as a flipped relu sign at one end.
    """
    step = 1e-5
    cfg = TrainConfig(variant=variant, witness=witness, key_scale=0.5)
    params = _jitter(init_params(cfg), seed=3)
    images, labels = tiny.images[:2].astype(np.float64), tiny.labels[:2]
    rng = np.random.default_rng(9)
    for name, p in params.items():

        def objective(t, name=name):
            swapped = dict(params)
            swapped[name] = t if isinstance(t, Tensor) else parameter(t)
            return loss(forward(swapped, cfg, images), labels, cfg)[0]

        base = relu_pattern(objective(p.data))
        coords = []
        for c in rng.permutation(p.data.size):
            if len(coords) == 5:
                break
            smooth = True
            for sign in (1.0, -1.0):
                moved = p.data.copy()
                moved.flat[c] += sign * step
                smooth &= np.array_equal(relu_pattern(objective(moved)), base)
            if smooth:
                coords.append(int(c))
        assert len(coords) == min(5, p.data.size), name
        report = grad_check(objective, p.data, step=step, tol=1e-4, coords=coords)
        assert report.passed, (name, report.max_rel_error)


def test_upsample_examples():
    assert np.allclose(upsample_attention(np.full(256, 1 / 256), 16), 1 / 4096)
    delta = np.zeros(256)
    delta[17] = 1.0  # row 1, col 1
    up = upsample_attention(delta, 16)
    assert up[4:8, 4:8].sum() == pytest.approx(1.0)
    assert np.all(up[4:8, 4:8] == 1 / 16)
    with pytest.raises(RejectedInput):
        upsample_attention(np.full(49, 1 / 49))


def test_attribution_requires_site(tiny):
    cfg = TrainConfig(variant="tau_k")
    with pytest.raises(RejectedInput):
        attribution(init_params(cfg), cfg, tiny.images[:2], "coarse")
    att = attribution(init_params(cfg), cfg, tiny.images[:2], "fine")
    assert att.shape == (2, 64, 64)
    assert np.allclose(att.sum(axis=(1, 2)), 1.0)


@pytest.mark.parametrize("variant", ["baseline", "unconstrained", "dual"])
def test_one_epoch_smoke_and_roundtrip(variant, tiny, tmp_path):
    cfg = TrainConfig(variant=variant, epochs=1, batch_size=4, seed=5)
    result = train(tiny, cfg)
    assert len(result.log) == 2 and np.isfinite(result.log[1]["ce"])
    if variant == "dual":
        assert result.log[1]["penalty"] is not None
    else:
        assert result.log[1]["penalty"] is None
    path = tmp_path / "m.catn"
    save_checkpoint(path, result.params, cfg)
    arrays, back = load_checkpoint(path)
    assert back == cfg
    assert set(arrays) == set(result.params)
    for k, v in arrays.items():
        assert np.array_equal(v, result.params[k].data)
    copy = tmp_path / "copy.catn"
    save_checkpoint(copy, arrays, back)
    assert copy.read_bytes() == path.read_bytes()
    logits, *_ = predict(arrays, back, tiny.images)
    logits2, *_ = predict(result.params, cfg, tiny.images)
    assert np.array_equal(logits, logits2)


def test_training_is_deterministic(tiny, tmp_path):
    cfg = TrainConfig(variant="dual", epochs=2, batch_size=4, seed=1)
    a, b = train(tiny, cfg), train(tiny, cfg)
    write_metrics(a.log, tmp_path / "a.csv")
    write_metrics(b.log, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    save_checkpoint(tmp_path / "a.catn", a.params, cfg)
    save_checkpoint(tmp_path / "b.catn", b.params, cfg)
    assert (tmp_path / "a.catn").read_bytes() == (tmp_path / "b.catn").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(tiny):
    from dualattn.errors import TrainingDiverged

    cfg = TrainConfig(variant="tau_l", epochs=1, batch_size=4, learning_rate=1e200)
    with pytest.raises(TrainingDiverged):
        train(tiny, cfg)


def test_checkpoint_format_errors(tmp_path, tiny):
    cfg = TrainConfig(variant="tau_l")
    path = tmp_path / "m.catn"
    save_checkpoint(path, init_params(cfg), cfg)
    raw = path.read_bytes()
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
