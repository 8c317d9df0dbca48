"""Plain-text checkpoint files.

Line-oriented format, stable across versions:

    dummyproto-checkpoint v1
    meta <key> <value>            # model hyperparameters + run bookkeeping
    tensor <name> <d0> <d1> ...   # followed by one line of C float hex
    <hex> <hex> ...               # row-major float64 values, exact

Float values are serialized with float.hex() so reloading is bit-exact.
"""

import numpy as np

from .errors import DataError
from .model import ModelHyper, ProtoModel

MAGIC = "dummyproto-checkpoint v1"

_HYPER_FIELDS = {
    "channels": int,
    "dummy_hidden": int,
    "dummy_count": int,
    "baseline": lambda s: bool(int(s)),
    "tau_known": float,
    "gamma": float,
    "rfn": lambda s: bool(int(s)),
    "rfn_rho": float,
    "in_bins": int,
    "in_frames": int,
}


def _meta_lines(hyper, extra):
    vals = {
        "channels": hyper.channels,
        "dummy_hidden": hyper.dummy_hidden,
        "dummy_count": hyper.dummy_count,
        "baseline": int(hyper.baseline),
        "tau_known": repr(hyper.tau_known),
        "gamma": repr(hyper.gamma),
        "rfn": int(hyper.rfn),
        "rfn_rho": repr(hyper.rfn_rho),
        "in_bins": hyper.in_bins,
        "in_frames": hyper.in_frames,
    }
    for k, v in (extra or {}).items():
        if k in vals:
            raise DataError(f"extra meta key {k!r} collides with a hyperparameter")
        vals[k] = v
    return [f"meta {k} {v}" for k, v in vals.items()]


def _tensor_lines(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    shape = " ".join(str(n) for n in arr.shape)
    values = " ".join(v.hex() for v in arr.reshape(-1).tolist())
    return [f"tensor {name} {shape}", values]


def save_checkpoint(path, model, extra_meta=None):
    lines = [MAGIC]
    lines += _meta_lines(model.hyper, extra_meta)
    for name, p in model.named_params():
        lines += _tensor_lines(name, p.data)
    for name, arr in model.state():
        lines += _tensor_lines(name, arr)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_checkpoint(path):
    """Parse a checkpoint into (meta dict, {name: array})."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    meta, tensors = {}, {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
            i += 1
        elif kind == "tensor":
            parts = rest.split()
            name, shape = parts[0], tuple(int(n) for n in parts[1:])
            if i + 1 >= len(lines):
                raise DataError(f"{path}: tensor {name} has no value line")
            vals = np.array([float.fromhex(tok) for tok in lines[i + 1].split()])
            if vals.size != int(np.prod(shape)):
                raise DataError(f"{path}: tensor {name} has {vals.size} values for shape {shape}")
            tensors[name] = vals.reshape(shape)
            i += 2
        else:
            raise DataError(f"{path}: unexpected line {line!r}")
    return meta, tensors


def load_checkpoint(path):
    """Rebuild the model from a checkpoint. Returns (model, meta dict)."""
    meta, tensors = read_checkpoint(path)
    kwargs = {}
    for key, conv in _HYPER_FIELDS.items():
        if key not in meta:
            raise DataError(f"{path}: missing hyperparameter {key!r}")
        kwargs[key] = conv(meta[key])
    model = ProtoModel(ModelHyper(**kwargs))
    expected = dict(model.named_params())
    expected_state = dict(model.state())
    for name, param in expected.items():
        if name not in tensors:
            raise DataError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != param.data.shape:
            raise DataError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, want {param.data.shape}"
            )
        param.data[...] = tensors[name]
    for name, arr in expected_state.items():
        if name not in tensors:
            raise DataError(f"{path}: missing tensor {name!r}")
        arr[...] = tensors[name]
    unknown = set(tensors) - set(expected) - set(expected_state)
    if unknown:
        raise DataError(f"{path}: unknown tensors {sorted(unknown)}")
    return model, meta
