"""Versioned model checkpoints (numpy archive; bit-exact round trip)."""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .encoders import BaselineSpec, EncoderParams, MarginalParams
from .errors import ConfigError
from .objective import ModelParams, VIBConfig
from .parser import DecoderParams

FORMAT_VERSION = 1

_PHI_FIELDS = (
    "root", "w_head", "b_head", "w_dep", "b_dep", "u_arc",
    "w_lhead", "b_lhead", "w_ldep", "b_ldep", "u_label",
    "rnn_wf", "rnn_bf", "rnn_wb", "rnn_bb",
)
_ENC_FIELDS = ("w1", "b1", "w2", "b2")


def save(params: ModelParams, path):
    """Write all parameter blocks plus config to a .npz archive."""
    arrays = {}
    meta = {
        "format_version": FORMAT_VERSION,
        "config": params.cfg.to_dict(),
        "label_vocab": list(params.label_vocab),
        "pos_vocab": list(params.pos_vocab),
        "input_dim": params.input_dim,
        "has_theta": params.theta is not None,
        "has_psi": params.psi is not None,
        "has_xi": params.xi is not None,
        "baseline_kind": (
            params.baseline_spec.kind if params.baseline_spec else None
        ),
    }
    for name, enc in (("theta", params.theta), ("xi", params.xi)):
        if enc is not None:
            for f in _ENC_FIELDS:
                arrays[f"{name}.{f}"] = ad.value(getattr(enc, f))
    if params.psi is not None:
        arrays["psi.raw"] = ad.value(params.psi.raw)
    for f in _PHI_FIELDS:
        t = getattr(params.phi, f)
        if t is not None:
            arrays[f"phi.{f}"] = ad.value(t)
    spec = params.baseline_spec
    if spec is not None:
        if spec.kind == "pca":
            arrays["baseline.projection"] = spec.projection
            arrays["baseline.mean"] = spec.mean
            arrays["baseline.eigvals"] = spec.eigvals
        if spec.kind == "gold_pos":
            meta["baseline_tag_vocab"] = list(spec.tag_vocab)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def _tensor(arrays, key):
    return ad.Tensor(arrays[key].copy(), requires_grad=True)


def load(path) -> ModelParams:
    """Reconstruct a ModelParams whose arrays equal the saved ones bitwise."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(bytes(arrays.pop("__meta__")).decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint version {meta.get('format_version')}"
        )
    cfg = VIBConfig(**meta["config"])

    def encoder(name):
        if not meta[f"has_{name}"]:
            return None
        return EncoderParams(
            mode=cfg.mode,
            out_dim=cfg.tag_dim,
            **{f: _tensor(arrays, f"{name}.{f}") for f in _ENC_FIELDS},
        )

    theta = encoder("theta")
    xi = encoder("xi")
    psi = None
    if meta["has_psi"]:
        psi = MarginalParams(
            mode=cfg.mode, out_dim=cfg.tag_dim, raw=_tensor(arrays, "psi.raw")
        )
    phi_kwargs = {
        f: (_tensor(arrays, f"phi.{f}") if f"phi.{f}" in arrays else None)
        for f in _PHI_FIELDS
    }
    phi = DecoderParams(
        labels=tuple(meta["label_vocab"]),
        arc_dim=cfg.arc_dim,
        label_dim=cfg.label_dim,
        **phi_kwargs,
    )
    spec = None
    kind = meta.get("baseline_kind")
    if kind == "identity":
        spec = BaselineSpec(kind="identity")
    elif kind == "pca":
        spec = BaselineSpec(
            kind="pca",
            projection=arrays["baseline.projection"],
            mean=arrays["baseline.mean"],
            eigvals=arrays["baseline.eigvals"],
        )
    elif kind == "gold_pos":
        spec = BaselineSpec(
            kind="gold_pos", tag_vocab=tuple(meta["baseline_tag_vocab"])
        )
    elif kind == "mlp":
        spec = BaselineSpec(kind="mlp", encoder=theta)
    return ModelParams(
        cfg=cfg,
        theta=theta,
        psi=psi,
        xi=xi,
        phi=phi,
        label_vocab=tuple(meta["label_vocab"]),
        pos_vocab=tuple(meta["pos_vocab"]),
        input_dim=meta["input_dim"],
        baseline_spec=spec,
    )
