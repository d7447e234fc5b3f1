"""Empirical equivariance measurement over a fixed family of rigid motions."""

from __future__ import annotations

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from equiflow.abgatr import Anchors
from equiflow.datasets import apply_rigid_motion, generate_dataset
from equiflow.pga import RigidMotion
from equiflow.preprocess import fit_normalizer, prepare

REFLECT_Z = np.diag([1.0, 1.0, -1.0])


def motion_family(n: int, seed: int = 0) -> list[RigidMotion]:
    """``n >= 4`` motions: two pure translations, two reflections, then random proper and improper motions."""
    rng = np.random.default_rng(seed)
    out = [RigidMotion(np.eye(3), rng.normal(size=3)) for _ in range(2)]
    out += [RigidMotion(Rotation.random(random_state=rng).as_matrix() @ REFLECT_Z, rng.normal(size=3)) for _ in range(2)]
    for i in range(max(n, 4) - 4):
        r = Rotation.random(random_state=rng).as_matrix()
        out.append(RigidMotion(r @ REFLECT_Z if i % 3 == 2 else r, rng.normal(size=3)))
    return out[: max(n, 4)]


def relative_deviation(model, sample, motion: RigidMotion, norm, anchors: Anchors, dtype) -> float:
    """``max`` over branches of ``||f(gX) - g f(X)|| / ||f(X)||`` on standardised outputs."""
    with torch.no_grad():
        s, v = model(prepare(sample, norm, dtype), anchors)
        s2, v2 = model(prepare(apply_rigid_motion(sample, motion), norm, dtype), anchors)
    r = torch.as_tensor(motion.rotation, dtype=dtype)
    s_ref = s @ r.T if s.dim() == 2 else s
    dev_s = float((s2 - s_ref).norm() / s.norm())
    dev_v = float((v2 - v @ r.T).norm() / v.norm())
    return max(dev_s, dev_v)


def equivariance_report(model_kind: str = "abgatr", precision: str = "double", n_motions: int = 20, seed: int = 0, kind: str = "aero", checkpoint=None) -> dict:
    from equiflow.training import build_model, default_model_config, load_checkpoint, vector_mode

    dtype = torch.float64 if precision == "double" else torch.float32
    sample = generate_dataset(kind, {"x": 1}, "canonical", seed, 96, 192)["x"][0]
    if checkpoint is not None:
        model, norm, meta = load_checkpoint(checkpoint)
        model_kind = meta["model_kind"]
        anchors_cfg = meta["model_config"]
        m_s, m_v = anchors_cfg["anchors_surface"], anchors_cfg["anchors_volume"]
    else:
        torch.manual_seed(seed)
        norm = fit_normalizer([sample], vector_mode(model_kind))
        cfg = default_model_config(model_kind, fast=True)
        model = build_model(model_kind, cfg, prepare(sample, norm, dtype))
        m_s, m_v = cfg.anchors_surface, cfg.anchors_volume
    model = model.to(dtype).eval()
    anchors = Anchors.draw(len(sample.surface_pos), len(sample.volume_pos), m_s, m_v, seed)
    devs = [relative_deviation(model, sample, m, norm, anchors, dtype) for m in motion_family(n_motions, seed)]
    return {"model_kind": model_kind, "precision": precision, "n_motions": len(devs), "max_rel_dev": max(devs), "deviations": devs}
