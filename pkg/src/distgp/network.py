"""Network assembly, moment propagation, and model files.

A network spec is a plain dict (usually parsed from JSON):

    {"input": {"kind": "image", "height": 28, "width": 28, "channels": 1},
     "layers": [
        {"kind": "conv_svgp", "channels": 8, "kernel_size": 5,
         "stride": 2, "n_inducing": 64},
        {"kind": "affine_conv", "channels": 8, "kernel_size": 1},
        {"kind": "distgp_activation", "channels": 8, "n_inducing": 32},
        {"kind": "barycentre_pool", "window": 2},
        {"kind": "dense_distgp", "channels": 10, "n_inducing": 64}]}

Feature inputs use {"kind": "features", "dim": D} and a dense_svgp first
layer. Exactly one conv_svgp/dense_svgp layer is allowed, at the front;
everything downstream consumes moments, not observations.

Model files are a single binary container: magic, version, a JSON
manifest (spec, seed, parameter table, payload checksum), then the raw
little-endian float64 payload.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct

import numpy as np

from . import autodiff as ad
from .errors import (BadMagic, ConfigError, CountMismatch, DimensionMismatch,
                     IOFormatError, TruncatedFile)
from .layers import (AffineConv, BarycentrePool, ConvSVGP, DenseDistGP,
                     DenseSVGP, DistGPActivation, _SparseGPLayer,
                     conv_output_size)
from .moments import MomentMap, deterministic_map

MAGIC = b"DGPN"
FORMAT_VERSION = 1

FIRST_KINDS = ("conv_svgp", "dense_svgp")
LAYER_KINDS = FIRST_KINDS + ("affine_conv", "distgp_activation",
                             "barycentre_pool", "dense_distgp")

_REQUIRED_KEYS = {
    "conv_svgp": ("channels", "kernel_size", "stride", "n_inducing"),
    "dense_svgp": ("channels", "n_inducing"),
    "affine_conv": ("channels", "kernel_size"),
    "distgp_activation": ("channels", "n_inducing"),
    "barycentre_pool": ("window",),
    "dense_distgp": ("channels", "n_inducing"),
}


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def plan_shapes(spec: dict) -> list[tuple[int, int, int]]:
    """Propagate (H, W, C) through the layer list; validates geometry."""
    inp = spec.get("input")
    _require(isinstance(inp, dict), "spec needs an 'input' section")
    kind = inp.get("kind")
    if kind == "image":
        for key in ("height", "width", "channels"):
            _require(isinstance(inp.get(key), int) and inp[key] >= 1,
                     f"image input needs positive integer '{key}'")
        h, w, c = inp["height"], inp["width"], inp["channels"]
    elif kind == "features":
        _require(isinstance(inp.get("dim"), int) and inp["dim"] >= 1,
                 "feature input needs positive integer 'dim'")
        h, w, c = 1, 1, inp["dim"]
    else:
        raise ConfigError(f"unknown input kind: {kind!r}")

    layers = spec.get("layers")
    _require(isinstance(layers, list) and layers, "spec needs a non-empty 'layers' list")
    shapes = []
    for i, cfg in enumerate(layers):
        _require(isinstance(cfg, dict), f"layer {i} must be an object")
        lk = cfg.get("kind")
        _require(lk in LAYER_KINDS, f"layer {i}: unknown kind {lk!r}")
        if i == 0:
            _require(lk in FIRST_KINDS,
                     "the first layer must be conv_svgp or dense_svgp")
            _require((lk == "conv_svgp") == (kind == "image"),
                     "conv_svgp needs image input, dense_svgp needs features")
        else:
            _require(lk not in FIRST_KINDS,
                     f"layer {i}: {lk} may only appear once, at the front")
        for key in _REQUIRED_KEYS[lk]:
            _require(isinstance(cfg.get(key), int) and cfg[key] >= 1,
                     f"layer {i} ({lk}): needs positive integer '{key}'")
        try:
            if lk in ("conv_svgp", "affine_conv"):
                k = cfg["kernel_size"]
                stride = cfg.get("stride", 1)
                dilation = cfg.get("dilation", 1)
                h = conv_output_size(h, k, stride, dilation)
                w = conv_output_size(w, k, stride, dilation)
                c = cfg["channels"]
            elif lk == "barycentre_pool":
                win = cfg["window"]
                _require(win <= min(h, w),
                         f"layer {i}: pool window {win} exceeds map size {h}x{w}")
                h = conv_output_size(h, win, win, 1)
                w = conv_output_size(w, win, win, 1)
            else:
                if lk in ("dense_svgp", "dense_distgp"):
                    _require((h, w) == (1, 1),
                             f"layer {i} ({lk}): spatial map is {h}x{w}, expected 1x1")
                c = cfg["channels"]
        except DimensionMismatch as exc:
            raise ConfigError(f"layer {i} ({lk}): {exc}") from exc
        shapes.append((h, w, c))
    return shapes


def validate_network_spec(spec: dict) -> None:
    plan_shapes(spec)


class Network:
    """Deterministic moment-propagation pipeline over MomentMap fields."""

    def __init__(self, spec: dict, seed: int = 0):
        shapes = plan_shapes(spec)
        self.spec = copy.deepcopy(spec)
        self.seed = int(seed)
        self.store = ad.ParameterStore()
        self.layers = []
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        inp = spec["input"]
        c = inp["channels"] if inp["kind"] == "image" else inp["dim"]
        for i, cfg in enumerate(spec["layers"]):
            lk = cfg["kind"]
            name = f"layer{i:02d}_{lk}"
            if lk == "conv_svgp":
                layer = ConvSVGP(self.store, name, in_channels=c,
                                 kernel_size=cfg["kernel_size"],
                                 stride=cfg.get("stride", 1),
                                 channels=cfg["channels"],
                                 n_inducing=cfg["n_inducing"], rng=rng,
                                 dilation=cfg.get("dilation", 1))
            elif lk == "dense_svgp":
                layer = DenseSVGP(self.store, name, in_dim=c,
                                  channels=cfg["channels"],
                                  n_inducing=cfg["n_inducing"], rng=rng,
                                  linear_mean=bool(cfg.get("linear_mean", False)))
            elif lk == "affine_conv":
                layer = AffineConv(self.store, name, in_channels=c,
                                   out_channels=cfg["channels"],
                                   kernel_size=cfg["kernel_size"], rng=rng,
                                   stride=cfg.get("stride", 1),
                                   dilation=cfg.get("dilation", 1),
                                   normalized=bool(cfg.get("normalized", True)))
            elif lk == "distgp_activation":
                layer = DistGPActivation(self.store, name, in_channels=c,
                                         channels=cfg["channels"],
                                         n_inducing=cfg["n_inducing"], rng=rng,
                                         ard=bool(cfg.get("ard", False)))
            elif lk == "barycentre_pool":
                layer = BarycentrePool(cfg["window"])
            else:
                layer = DenseDistGP(self.store, name, in_dim=c,
                                    channels=cfg["channels"],
                                    n_inducing=cfg["n_inducing"], rng=rng,
                                    ard=bool(cfg.get("ard", True)))
            self.layers.append(layer)
            c = shapes[i][2]
        self.output_dim = c
        self.output_shape = shapes[-1]

    # ------------------------------------------------------------ forward

    def lift(self, x) -> MomentMap:
        """Observations to a zero-variance moment map."""
        x = np.asarray(x, dtype=np.float64)
        if self.spec["input"]["kind"] == "features":
            if x.ndim != 2:
                raise DimensionMismatch(f"feature input must be (N, D), got {x.shape}")
            return deterministic_map(x[:, None, None, :])
        if x.ndim == 3:
            x = x[..., None]
        if x.ndim != 4:
            raise DimensionMismatch(f"image input must be (N, H, W, C), got {x.shape}")
        return deterministic_map(x)

    def forward(self, x, collect: bool = False):
        """Propagate moments; returns (final map, per-layer aux list)."""
        mmap = x if isinstance(x, MomentMap) else self.lift(x)
        auxes = []
        for layer in self.layers:
            mmap, aux = layer.forward(mmap)
            if collect:
                aux["layer"] = getattr(layer, "name", layer.kind)
                aux["kind"] = layer.kind
                auxes.append(aux)
        return mmap, auxes

    def output_moments(self, x):
        """Final-layer rows plus the last GP layer's variance split.

        Returns numpy arrays: mean/var of the final map rows, and the
        distributional (vh) and within-data (vg) components reported by
        the last sparse-GP layer in the pipeline.
        """
        mmap, auxes = self.forward(x, collect=True)
        rows = mmap.rows().values()
        pred = None
        for aux in reversed(auxes):
            if "pred" in aux:
                pred = aux["pred"]
                break
        out = {"mean": rows.mean, "var": rows.var}
        if pred is not None:
            out["vh"] = ad.value_of(pred.distributional)
            out["vg"] = ad.value_of(pred.within_data)
        return out

    # --------------------------------------------------------- diagnostics

    def gp_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, _SparseGPLayer)]

    def affine_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, AffineConv)]

    def kl_total(self):
        total = None
        for layer in self.gp_layers():
            term = layer.kl()
            total = term if total is None else total + term
        return total

    def project(self) -> None:
        """Re-apply the Lipschitz projection to every normalized affine."""
        for layer in self.affine_layers():
            if layer.normalized:
                layer.project()

    def lipschitz_report(self) -> list[dict]:
        """Per-layer Lipschitz constants for operators that carry one."""
        rows = []
        for layer in self.layers:
            if isinstance(layer, AffineConv):
                bound, per = layer.lipschitz_bound()
                rows.append({"layer": layer.name, "kind": layer.kind,
                             "bound": bound, "per_output": per.tolist(),
                             "normalized": layer.normalized})
            elif hasattr(layer, "lipschitz_bound"):
                bound, per = layer.lipschitz_bound()
                rows.append({"layer": layer.name, "kind": layer.kind,
                             "bound": bound, "per_output": per.tolist()})
        return rows


# ------------------------------------------------------------- model files

def save_network(path, network: Network) -> None:
    """Write a model file: magic, version, JSON manifest, f64 payload."""
    names = network.store.names()
    table, chunks, offset = [], [], 0
    for name in names:
        value = network.store[name].value
        table.append({"name": name, "shape": list(value.shape),
                      "offset": offset, "size": int(value.size)})
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        offset += int(value.size)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": network.spec,
        "seed": network.seed,
        "dtype": "<f8",
        "params": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise BadMagic(f"not a model file: {path}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise IOFormatError(f"unsupported model format version {version}")
    mlen = struct.unpack("<Q", raw[8:16])[0]
    if len(raw) < 16 + mlen:
        raise TruncatedFile("model file ends inside the manifest")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IOFormatError(f"unreadable model manifest: {exc}") from exc
    payload = raw[16 + mlen:]
    total = sum(entry["size"] for entry in manifest["params"])
    if len(payload) != 8 * total:
        raise CountMismatch(
            f"payload holds {len(payload) // 8} values, manifest says {total}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise IOFormatError("model payload checksum mismatch")

    network = Network(manifest["spec"], seed=manifest.get("seed", 0))
    values = np.frombuffer(payload, dtype="<f8")
    seen = set()
    for entry in manifest["params"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        chunk = values[entry["offset"]:entry["offset"] + entry["size"]]
        if int(np.prod(shape, dtype=int)) != entry["size"]:
            raise IOFormatError(f"bad shape for parameter {name}")
        value = chunk.reshape(shape).astype(np.float64)
        if name in network.store:
            if network.store[name].value.shape != shape:
                raise IOFormatError(
                    f"parameter {name} has shape {shape}, spec wants "
                    f"{network.store[name].value.shape}")
            network.store[name].value = value
        else:
            # parameters owned by wrappers around the network (for example
            # a likelihood noise) ride along in the same store
            network.store.add(name, value)
        seen.add(name)
    missing = [n for n in network.store.names() if n not in seen]
    if missing:
        raise IOFormatError(f"model file lacks parameters: {missing}")
    return network
