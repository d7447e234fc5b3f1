"""End-to-end acceptance suite; every test prints one PASS/FAIL line for its criterion.

Criteria 7-9 train real models on the toy benchmarks and take several minutes each.
"""

import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

import oracles
from equiflow import nsf, pga
from equiflow.abgatr import ABGATr, Anchors, ModelConfig, SupernodePooling
from equiflow.autodiff import grad_check
from equiflow.baseline import BaselineConfig
from equiflow.datasets import VISCOSITY, generate_dataset, poiseuille_velocity, potential_flow_velocity
from equiflow.diagnostics import alignment_variability, shape_descriptor, wilcoxon_signed_rank
from equiflow.equicheck import equivariance_report, motion_family
from equiflow.errors import TruncatedPayload
from equiflow.layers import (
    EquiLinear,
    EquiMLP,
    GeometricAttention,
    GeometricBlock,
    TokenSet,
    equi_layer_norm,
    equi_linear,
    gated_nonlinearity,
    geometric_anchor_attention,
    geometric_bilinear,
    geometric_self_attention,
    token_layer_norm,
)
from equiflow.meshes import icosphere
from equiflow.preprocess import Standardizer, fit_normalizer, fit_standardizer, prepare
from equiflow.training import TrainConfig, branch_loss, evaluate, rotation_sweep, train

D = torch.float64
FAST_S = dict(anchors_surface=32, anchors_volume=32)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return emit


def rel(a, b):
    return float((a - b).norm() / b.norm())


def test_criterion_01_algebra(verdict):
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(10_000, 16)), rng.normal(size=(10_000, 16))
    ta, tb = torch.as_tensor(a), torch.as_tensor(b)
    errs = {
        "gp": np.abs(pga.geometric_product(ta, tb).numpy() - oracles.gp(a, b)).max(),
        "join": np.abs(pga.join(ta, tb).numpy() - oracles.join(a, b)).max(),
        "inner": np.abs(pga.invariant_inner(ta, tb).numpy() - oracles.inner(a, b)).max(),
    }
    verdict(1, max(errs.values()) <= 1e-12, f"max abs error vs Cayley oracle {errs}")


def _layer_suite(dtype, rng):
    """Callables ``f(tokens, versor) -> (lhs, rhs)`` for every equivariant operation."""
    torch.manual_seed(0)
    n, c, s = 10, 4, 4
    mv = torch.as_tensor(rng.normal(size=(n, c, 16)), dtype=dtype)
    mv[:, 0] = pga.embed_point(rng.normal(size=(n, 3))).to(dtype)
    x = TokenSet(mv, torch.as_tensor(rng.normal(size=(n, s)), dtype=dtype))
    y = torch.as_tensor(rng.normal(size=(n, c, 16)), dtype=dtype)
    ref = torch.as_tensor(rng.normal(size=(n, 16)), dtype=dtype)
    w_lin = torch.as_tensor(rng.normal(size=(3, c, 9)), dtype=dtype)
    w_bil = torch.as_tensor(rng.normal(size=(3, c, 9)), dtype=dtype)
    lin = EquiLinear(c, 3, s, 5).to(dtype)
    attn = GeometricAttention(c, s, 2).to(dtype)
    mlp = EquiMLP(c, s, 4, 8).to(dtype)
    block = GeometricBlock(c, s, 2, 4, 8).to(dtype)
    pool = SupernodePooling(c, s, radius=1.5, length_unit=1.0).to(dtype)
    pos = pga.extract_point(mv[:, 0].to(D)).to(dtype)
    anchors = [1, 4, 6]

    def tok(f):
        def run(v):
            a, b = f(x.transform(v), v), f(x, None)
            return [(a.mv, pga.sandwich(v, b.mv)), (a.s, b.s)]

        return run

    def moved_pos(v):
        return pga.extract_point(pga.sandwich(v, pga.embed_point(pos.to(D)).to(dtype)).to(D)).to(dtype)

    return {
        "equi_linear": lambda v: [(equi_linear(w_lin, pga.sandwich(v, x.mv)), pga.sandwich(v, equi_linear(w_lin, x.mv)))],
        "equi_linear_module": lambda v: [(lin(pga.sandwich(v, x.mv), x.s)[0], pga.sandwich(v, lin(x.mv, x.s)[0]))],
        "geometric_bilinear": lambda v: [
            (
                geometric_bilinear(pga.sandwich(v, x.mv), pga.sandwich(v, y), w_bil, pga.sandwich(v, ref)),
                pga.sandwich(v, geometric_bilinear(x.mv, y, w_bil, ref)),
            )
        ],
        "gate": lambda v: [(gated_nonlinearity(pga.sandwich(v, x.mv)), pga.sandwich(v, gated_nonlinearity(x.mv)))],
        "layer_norm": lambda v: [(equi_layer_norm(pga.sandwich(v, x.mv)), pga.sandwich(v, equi_layer_norm(x.mv)))],
        "token_layer_norm": tok(lambda t, v: token_layer_norm(t)),
        "self_attention": tok(lambda t, v: geometric_self_attention(t, attn)),
        "anchor_attention": tok(lambda t, v: geometric_anchor_attention(t, anchors, attn)),
        "mlp": tok(lambda t, v: mlp(t)),
        "block": tok(lambda t, v: block(t, t.index(anchors))),
        "pooling": tok(lambda t, v: pool(t, pos if v is None else moved_pos(v), torch.tensor(anchors))),
    }


@pytest.mark.parametrize("precision", ["double", "single"])
def test_criterion_02_equivariance(verdict, precision):
    dtype, tol = (torch.float64, 1e-9) if precision == "double" else (torch.float32, 1e-3)
    motions = motion_family(20, seed=5)
    assert sum(m.is_reflection for m in motions) >= 2
    assert sum(np.array_equal(m.rotation, np.eye(3)) for m in motions) >= 2
    suite = _layer_suite(dtype, np.random.default_rng(2))
    worst = {}
    with torch.no_grad():
        for name, f in suite.items():
            devs = []
            for m in motions:
                v = pga.versor_from_motion(m, dtype=dtype)
                devs += [rel(a, b) for a, b in f(v)]
            worst[name] = max(devs)
    for kind in ("aero", "hemo"):
        worst[f"abgatr_{kind}"] = equivariance_report("abgatr", precision, 20, seed=5, kind=kind)["max_rel_dev"]
    name = max(worst, key=worst.get)
    verdict(2, worst[name] <= tol, f"{precision}: worst relative deviation {worst[name]:.2e} ({name}) over 20 motions, tol {tol:g}")


def _two_block_loss(seed):
    s = generate_dataset("aero", {"x": 1}, "canonical", seed, 12, 16)["x"][0]
    norm = fit_normalizer([s], "magnitude")
    batch = prepare(s, norm, D)
    torch.manual_seed(seed)
    cfg = ModelConfig(
        n_mv=2, n_s=4, heads=1, hidden_mv=2, hidden_s=4, geometry_blocks=0, shared_blocks=2, decoder_blocks=0,
        anchors_surface=6, anchors_volume=8, radius=150.0, n_freq=2,
    )
    model = ABGATr.for_batch(cfg, batch).to(D)
    anchors = Anchors.draw(12, 16, 6, 8, seed)
    named = [(n, p.shape) for n, p in model.named_parameters()]
    flat = torch.cat([p.detach().reshape(-1) for p in model.parameters()])

    def loss(theta):
        params, i = {}, 0
        for n, shape in named:
            k = math.prod(shape)
            params[n] = theta[i : i + k].reshape(shape)
            i += k
        out = functional_call(model, params, (batch, anchors))
        return branch_loss(out, (batch.surface_target, batch.volume_target))

    return loss, flat


def test_criterion_03_gradients(verdict):
    rng = np.random.default_rng(3)
    torch.manual_seed(3)
    attn, mlp, block = GeometricAttention(2, 2, 1).to(D), EquiMLP(2, 2, 2, 4).to(D), GeometricBlock(2, 2, 1, 2, 4).to(D)
    w = torch.as_tensor(rng.normal(size=(2, 2, 9)))
    ref = torch.as_tensor(rng.normal(size=(3, 16)))
    s = torch.as_tensor(rng.normal(size=(3, 2)))
    proj = torch.as_tensor(rng.normal(size=(3, 2, 16)))

    def tok(x):
        return TokenSet(x.reshape(3, 2, 16), s)

    layers = {
        "equi_linear": lambda x: (equi_linear(w, x.reshape(3, 2, 16)) * proj).sum(),
        "bilinear": lambda x: (geometric_bilinear(x.reshape(3, 2, 16), proj, w, ref) * proj).sum(),
        "gate": lambda x: (gated_nonlinearity(x.reshape(3, 2, 16)) * proj).sum(),
        "layer_norm": lambda x: (equi_layer_norm(x.reshape(3, 2, 16)) * proj).sum(),
        "self_attention": lambda x: (geometric_self_attention(tok(x), attn).mv * proj).sum(),
        "anchor_attention": lambda x: (geometric_anchor_attention(tok(x), [0, 2], attn).mv * proj).sum(),
        "mlp": lambda x: (mlp(tok(x)).mv * proj).sum(),
        "block": lambda x: (block(tok(x), tok(x)).mv * proj).sum(),
    }
    x0 = torch.as_tensor(rng.normal(size=(3, 2, 16)))
    x0[:, 0] = pga.embed_point(rng.normal(size=(3, 3)))
    layer_errs = {k: grad_check(f, 0.5 * x0.reshape(-1), h=1e-5).max_rel_err for k, f in layers.items()}
    loss, theta = _two_block_loss(0)
    model_err = grad_check(loss, theta, h=1e-5).max_rel_err
    worst = max(layer_errs, key=layer_errs.get)
    ok = layer_errs[worst] <= 1e-5 and model_err <= 1e-4
    verdict(3, ok, f"layers worst {layer_errs[worst]:.2e} ({worst}) tol 1e-5; 2-block AB-GATr {model_err:.2e} over {theta.numel()} params tol 1e-4")


def test_criterion_04_anchor_contract(verdict):
    rng = np.random.default_rng(4)
    torch.manual_seed(4)
    attn = GeometricAttention(4, 4, 2).to(D)
    mv = torch.as_tensor(rng.normal(size=(30, 4, 16)))
    mv[:, 0] = pga.embed_point(rng.normal(size=(30, 3)))
    x = TokenSet(mv, torch.as_tensor(rng.normal(size=(30, 4))))
    with torch.no_grad():
        full, ref = geometric_anchor_attention(x, list(range(30)), attn), geometric_self_attention(x, attn)
        dev_all = max(float((full.mv - ref.mv).abs().max()), float((full.s - ref.s).abs().max()))
        anchors = [0, 5, 9, 17]
        extra = TokenSet(torch.as_tensor(rng.normal(size=(100, 4, 16))), torch.as_tensor(rng.normal(size=(100, 4))))
        base = geometric_anchor_attention(x, anchors, attn)
        grown = geometric_anchor_attention(TokenSet.cat([x, extra]), anchors, attn)
        dev_layer = max(float((grown.mv[:30] - base.mv).abs().max()), float((grown.s[:30] - base.s).abs().max()))

    sample = generate_dataset("aero", {"x": 1}, "canonical", 4, 48, 96)["x"][0]
    norm = fit_normalizer([sample], "magnitude")
    model = ABGATr.for_batch(ModelConfig.fast(anchors_surface=16, anchors_volume=24), prepare(sample, norm, D)).to(D).eval()
    bigger = generate_dataset("aero", {"x": 1}, "canonical", 4, 48, 196)["x"][0]
    assert np.array_equal(bigger.surface_pos, sample.surface_pos)
    # same geometry, 100 more volume queries appended after the original ones
    from dataclasses import replace

    grown_sample = replace(
        sample,
        volume_pos=np.concatenate([sample.volume_pos, bigger.volume_pos[96:]]),
        volume_vec=np.concatenate([sample.volume_vec, bigger.volume_vec[96:]]),
        volume_scal=np.concatenate([sample.volume_scal, bigger.volume_scal[96:]]),
        volume_target=np.concatenate([sample.volume_target, bigger.volume_target[96:]]),
    )
    anchors = Anchors.draw(48, 96, 16, 24, 4)
    with torch.no_grad():
        s1, v1 = model(prepare(sample, norm, D), anchors)
        s2, v2 = model(prepare(grown_sample, norm, D), anchors)
    dev_model = max(float((s2 - s1).abs().max()), float((v2[:96] - v1).abs().max()))
    ok = dev_all <= 1e-12 and max(dev_layer, dev_model) <= 1e-9
    verdict(4, ok, f"anchors=all vs self-attention {dev_all:.1e}; +100 queries layer {dev_layer:.1e}, model {dev_model:.1e}")


def test_criterion_05_standardisation(verdict):
    from scipy.spatial.transform import Rotation

    rng = np.random.default_rng(5)
    x = rng.normal(size=(200, 3)) * 3 + rng.normal(size=3)
    st = fit_standardizer(x, "magnitude")
    commute = 0.0
    for r in Rotation.random(100, random_state=rng).as_matrix():
        commute = max(commute, float(np.abs(st.invert(st.apply(x) @ r.T) - st.invert(st.apply(x)) @ r.T).max()))
    rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    per_axis = Standardizer("per_axis", np.array([1.0, 0.0, 0.0]), np.ones(3))
    v = np.array([0.0, 1.0, 0.0])
    gap = float(np.linalg.norm(per_axis.invert(rz @ per_axis.apply(v)) - rz @ per_axis.invert(per_axis.apply(v))))
    # exact up to the last bit of the rescaling
    ok = commute <= 1e-12 * np.abs(x).max() and gap >= 0.1
    verdict(5, ok, f"magnitude commutation error {commute:.1e} over 100 rotations; per-axis counterexample gap {gap:.3f}")


def test_criterion_06_analytic_fidelity(verdict):
    aero = generate_dataset("aero", {"x": 10}, "canonical", 6, 64, 128)["x"]
    hemo = generate_dataset("hemo", {"x": 10}, "canonical", 6, 64, 128)["x"]
    div = pen = 0.0
    for s in aero:
        p = s.meta["params"]
        a, U, d = p["radius"], p["speed"], p["inflow"]
        field = lambda x: potential_flow_velocity(x, a, U, d)  # noqa: E731
        div = max(div, float(np.abs(oracles.divergence_fd(field, s.volume_pos, 1e-4 * a)).max() / (U / a)))
        n = s.surface_pos / np.linalg.norm(s.surface_pos, axis=1, keepdims=True)
        pen = max(pen, float(np.abs((field(s.surface_pos) * n).sum(1)).max()))
    slip = wss = 0.0
    for s in hemo:
        p = s.meta["params"]
        R, axis = p["radius"], np.array(p["axis"])
        slip = max(slip, float(np.abs(poiseuille_velocity(np.full(len(s.surface_pos), R), R, p["peak_speed"], axis)).max()))
        h = 1e-6 * R
        fd = VISCOSITY * np.linalg.norm(poiseuille_velocity(np.array([R - h]), R, p["peak_speed"], axis)) / h
        wss = max(wss, float(np.abs(np.linalg.norm(s.surface_target, axis=1) - fd).max() / fd))
    ok = div <= 1e-5 and pen <= 1e-12 and slip == 0.0 and wss <= 1e-4
    verdict(6, ok, f"|div u|/(U/a) {div:.1e}; u_r on surface {pen:.1e}; wall velocity {slip}; WSS vs FD {wss:.1e}")


def _median_pct(res):
    return {k: float(np.median(v)) for k, v in res.items()}


def test_criterion_07_rotation_generalisation(verdict):
    ds = generate_dataset("aero", {"train": 30, "val": 4, "test": 8}, "canonical", 7, 64, 128)
    cfg = TrainConfig(epochs=20, peak_lr=1e-3)
    ratios = {"baseline": [], "abgatr": []}
    for seed in (0, 1, 2):
        for kind, mc in (("baseline", BaselineConfig.fast(**FAST_S)), ("abgatr", ModelConfig.fast(**FAST_S))):
            _, model, norm = train(TrainConfig(**{**cfg.to_dict(), "seed": seed}), kind, ds, mc)
            can = _median_pct(evaluate(model, norm, ds["test"], mc, "none", cfg.eval_seed))
            rot = _median_pct(evaluate(model, norm, ds["test"], mc, "haar", cfg.eval_seed))
            ratios[kind].append({k: rot[k] / can[k] for k in can})
    med = {kind: {k: float(np.median([r[k] for r in rs])) for k in rs[0]} for kind, rs in ratios.items()}
    ok = all(v >= 5 for v in med["baseline"].values()) and all(abs(v - 1) <= 0.05 for v in med["abgatr"].values())
    fmt = {kind: {k: round(v, 4) for k, v in d.items()} for kind, d in med.items()}
    verdict(7, ok, f"median rotated/canonical rel-L2 over 3 seeds {fmt} (baseline >= 5, AB-GATr within 5%)")


def test_criterion_08_unaligned_benchmark(verdict):
    ds = generate_dataset("hemo", {"train": 20, "val": 4, "test": 10}, "haar", 8, 64, 128)
    runs = {"baseline": [], "abgatr": []}
    for seed in range(5):
        for kind, mc, aug in (("baseline", BaselineConfig.fast(**FAST_S), "haar"), ("abgatr", ModelConfig.fast(**FAST_S), "none")):
            rec, _, _ = train(TrainConfig(epochs=10, peak_lr=1e-3, seed=seed, augmentation=aug), kind, ds, mc)
            runs[kind].append(rec.test_rel_l2)
    lines, ok = [], True
    for target in ("surface", "volume"):
        # pair per test sample, each sample summarised by its median over the 5 seeds
        b = np.median([r[target] for r in runs["baseline"]], axis=0)
        a = np.median([r[target] for r in runs["abgatr"]], axis=0)
        p = wilcoxon_signed_rank(a, b, "two_sided")
        med_a = float(np.median([r[target] for r in runs["abgatr"]]))
        med_b = float(np.median([r[target] for r in runs["baseline"]]))
        ok &= med_a < med_b and p < 0.05
        lines.append(f"{target}: AB-GATr {med_a:.1f}% vs augmented baseline {med_b:.1f}%, p={p:.4f}")
    verdict(8, ok, "; ".join(lines))


def test_criterion_09_rotation_rate_trend(verdict):
    ds = generate_dataset("aero", {"train": 30, "val": 4, "test": 8}, "canonical", 9, 64, 128)
    degs = [0, 5, 15, 30, 60, 90, 180]
    rows = rotation_sweep(degs, [0, 180], TrainConfig(epochs=20, peak_lr=1e-3), ds, "baseline", BaselineConfig.fast(**FAST_S), seeds=(0, 1, 2))
    lines, ok = [], True
    for target in ("surface", "volume"):
        cell = {(r["train_deg"], r["test_deg"]): r["median_rel_l2_pct"] for r in rows if r["target"] == target}
        rho = oracles.spearman_rho(degs, [cell[(d, 0)] for d in degs])
        jumps = [cell[(d, 180)] / cell[(d, 0)] for d in (0, 5, 15)]
        ok &= rho >= 0.6 and min(jumps) >= 2
        lines.append(f"{target}: rho {rho:.2f}, 180/0 jump for 0-15 deg training {[round(j, 1) for j in jumps]}")
    verdict(9, ok, "; ".join(lines))


def test_criterion_10_diagnostics(verdict):
    lam = shape_descriptor(*icosphere(4, 1.0), k=16).spectrum
    groups = {l: float(lam[l * l : l * l + 2 * l + 1].mean()) for l in (1, 2, 3)}
    group_err = max(abs(g - l * (l + 1)) / (l * (l + 1)) for l, g in groups.items())
    aero = alignment_variability(generate_dataset("aero", {"x": 20}, "canonical", 10, 16, 64)["x"])
    hemo = alignment_variability(generate_dataset("hemo", {"x": 200}, "haar", 10, 8, 16)["x"])
    p = wilcoxon_signed_rank([2.0, 3.0, 4.0, 5.0, 6.0], [1.0, 1.5, 2.0, 2.5, 3.0], "two_sided")
    ok = group_err <= 0.05 and aero <= 0.01 and hemo >= 0.8 and p == 0.0625
    verdict(10, ok, f"sphere group error {group_err:.3f}; aero A {aero:.4f}, hemo A {hemo:.3f}; n=5 exact p {p}")


def test_criterion_11_determinism_and_io(verdict, tmp_path):
    ds = generate_dataset("hemo", {"train": 3, "val": 1, "test": 2}, "haar", 11, 16, 32)
    same = True
    for kind, mc in (("abgatr", ModelConfig.fast(shared_blocks=2, anchors_surface=8, anchors_volume=8)), ("baseline", BaselineConfig.fast(anchors_surface=8, anchors_volume=8))):
        cfg = TrainConfig(epochs=2, augmentation="haar", seed=11)
        r1, m1, _ = train(cfg, kind, ds, mc)
        r2, m2, _ = train(cfg, kind, ds, mc)
        same &= r1.to_dict() == r2.to_dict()
        same &= all(torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m2.state_dict().values()))
    rng = np.random.default_rng(11)
    fields = {"a": rng.normal(size=(7, 3)), "b": np.nextafter(rng.normal(size=5), np.inf), "c": np.arange(4, dtype=np.int64)}
    path = tmp_path / "x.nsf"
    nsf.write(path, fields, {"k": 1})
    back, meta = nsf.read(path)
    bitwise = meta == {"k": 1} and all(back[k].tobytes() == v.tobytes() and back[k].dtype == v.dtype for k, v in fields.items())
    raw = path.read_bytes()
    rejected = 0
    for cut in (3, 20, len(raw) - 1):
        try:
            nsf.decode(raw[:cut])
        except TruncatedPayload:
            rejected += 1
    ok = same and bitwise and rejected == 3
    verdict(11, ok, f"bitwise training repeat {same}; NSF round trip bitwise {bitwise}; truncated files rejected {rejected}/3")
