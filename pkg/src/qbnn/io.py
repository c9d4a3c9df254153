"""Checkpoint files for float and quantised models.

A checkpoint is one ``.npz`` archive.  The entry ``__manifest__`` holds UTF-8
JSON describing the graph; every other entry is an array referenced from the
manifest by key.  See ``docs/checkpoint-format.md`` for the full layout.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from qbnn.bayes import Ensemble, Network, Site
from qbnn.quant import IntTensor, OfflineConstants, QuantParams, RangeObserver, precompute_offline

FORMAT = "qbnn-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _site_dict(site: Site) -> dict:
    return {
        "bits": site.bits,
        "signed": site.signed,
        "observer": site.observer.to_dict(),
        "params": site.params.to_dict() if site.params is not None else None,
        "fixed": site.fixed is not None,
    }


def _load_site(d: dict) -> Site:
    params = QuantParams.from_dict(d["params"]) if d["params"] is not None else None
    site = Site(d["bits"], d["signed"], fixed=params if d["fixed"] else None)
    site.observer = RangeObserver(**d["observer"])
    site.params = params
    return site


def _net_manifest(net: Network, prefix: str, arrays: dict) -> dict:
    layers = []
    for i, layer in enumerate(net.layers):
        key = f"{prefix}l{i}/"
        for name, p in layer.params.items():
            arrays[key + "param/" + name] = p
        entry = {
            "relu": layer.relu,
            "drop_p": layer.drop_p,
            "params": sorted(layer.params),
            "sites": {name: _site_dict(s) for name, s in layer.sites.items()},
            "integer": None,
        }
        il = layer.integer
        if il is not None:
            ie = {"fused_bias": key + "int/fused_bias", "const_term": None}
            arrays[key + "int/fused_bias"] = il.fused_bias
            if il.qw is not None:
                arrays[key + "int/qw"] = il.qw.data
                arrays[key + "int/col_sums_w"] = il.offline.col_sums_w
                ie["qw"] = key + "int/qw"
                ie["col_sums_w"] = key + "int/col_sums_w"
                ie["const_term"] = il.offline.const_term
            if il.q_mu is not None:
                arrays[key + "int/q_mu"] = il.q_mu.data
                arrays[key + "int/q_sigma"] = il.q_sigma.data
                ie["q_mu"] = key + "int/q_mu"
                ie["q_sigma"] = key + "int/q_sigma"
            entry["integer"] = ie
        layers.append(entry)
    return {
        "sizes": net.sizes,
        "method": net.method,
        "task": net.task,
        "dtype": np.dtype(net.dtype).name,
        "drop_p": net.drop_p,
        "bits": list(net.bits) if net.bits else None,
        "finalised": net.finalised,
        "converged": bool(getattr(net, "converged", True)),
        "input_site": _site_dict(net.input_site),
        "layers": layers,
    }


def save_model(model, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    if isinstance(model, Ensemble):
        manifest = {"kind": "ensemble",
                    "members": [_net_manifest(m, f"m{k}/", arrays) for k, m in enumerate(model.members)]}
    else:
        manifest = {"kind": "network", "members": [_net_manifest(model, "m0/", arrays)]}
    manifest.update(format=FORMAT, version=VERSION)
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=blob, **arrays)


def _load_net(m: dict, z, prefix: str) -> Network:
    dtype = np.dtype(m["dtype"]).type
    net = Network(m["sizes"], m["method"], drop_p=m["drop_p"], dtype=dtype, task=m["task"])
    net.input_site = _load_site(m["input_site"])
    for i, (layer, e) in enumerate(zip(net.layers, m["layers"])):
        layer.relu = e["relu"]
        layer.drop_p = e["drop_p"]
        layer.params = {name: np.array(z[f"{prefix}l{i}/param/{name}"]) for name in e["params"]}
        layer.sites = {name: _load_site(sd) for name, sd in e["sites"].items()}
    net._wire()
    net.bits = tuple(m["bits"]) if m["bits"] else None
    net.converged = m["converged"]
    for layer, e in zip(net.layers, m["layers"]):
        ie = e["integer"]
        if ie is None:
            continue
        il = layer.finalise()
        if not np.array_equal(il.fused_bias, z[ie["fused_bias"]]):
            raise CheckpointError("stored fused bias disagrees with the stored parameters")
        il.fused_bias = np.array(z[ie["fused_bias"]])
        if "qw" in ie:
            qw = IntTensor(np.array(z[ie["qw"]]), il.w_params)
            off = precompute_offline(qw, il.in_params, il.w_params)
            col_sums = np.array(z[ie["col_sums_w"]])
            if not np.array_equal(off.col_sums_w, col_sums) or off.const_term != ie["const_term"]:
                raise CheckpointError("offline constants do not match the stored integer weights")
            il.qw = qw
            il.offline = OfflineConstants(col_sums, ie["const_term"], il.fused_bias, qw.shape[0])
        if "q_mu" in ie:
            il.q_mu = IntTensor(np.array(z[ie["q_mu"]]), il.q_mu.params)
            il.q_sigma = IntTensor(np.array(z[ie["q_sigma"]]), il.q_sigma.params)
    net.finalised = m["finalised"]
    return net


def load_model(path):
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        if "__manifest__" not in z.files:
            raise CheckpointError(f"{path}: not a qbnn checkpoint")
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: unknown format {manifest.get('format')!r}")
        if manifest.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
        nets = [_load_net(m, z, f"m{k}/") for k, m in enumerate(manifest["members"])]
    if manifest["kind"] == "ensemble":
        return Ensemble(nets)
    return nets[0]
