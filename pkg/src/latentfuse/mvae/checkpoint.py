"""JSON checkpoints with base64 little-endian float64 parameter blocks."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .model import MvaeModel

FORMAT = "latentfuse-mvae"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt, or version-mismatched checkpoint."""


def _pack(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def _unpack(block: dict) -> np.ndarray:
    raw = base64.b64decode(block["b64"], validate=True)
    shape = tuple(block["shape"])
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError("parameter block length does not match its shape")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_model(model: MvaeModel, path, train_config: dict | None = None, optimizer=None,
               epochs_done: int = 0, history: list[float] | None = None) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "model": {
            "signal_dims": model.signal_dims,
            "latent_dim": model.latent_dim,
            "hidden": model.hidden,
            "posterior_mode": model.posterior_mode,
            "seed": model.seed,
            "decoder_output": model.decoder_output,
        },
        "train_config": train_config or {},
        "epochs_done": int(epochs_done),
        "history": [float(h) for h in (history or [])],
        "params": {name: _pack(p.data) for name, p in model.named_parameters().items()},
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        doc["optimizer"] = {
            "kind": state["kind"],
            "lr": state["lr"],
            "t": state["t"],
            "beta1": state.get("beta1"),
            "beta2": state.get("beta2"),
            "eps": state.get("eps"),
            "m": [_pack(a) for a in state.get("m", [])],
            "v": [_pack(a) for a in state.get("v", [])],
        }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_model(path, with_state: bool = False):
    """Load a checkpoint. With ``with_state`` also return the raw document
    (train config, history) and the optimizer state dict, if present."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError("not a latentfuse checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        spec = doc["model"]
        model = MvaeModel(spec["signal_dims"], spec["latent_dim"], spec["hidden"], spec["posterior_mode"], spec["seed"],
                           spec.get("decoder_output", "linear"))
        params = model.named_parameters()
        if set(params) != set(doc["params"]):
            raise CheckpointError("parameter names do not match the architecture")
        for name, p in params.items():
            arr = _unpack(doc["params"][name])
            if arr.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            p.data = arr
        opt_state = None
        if "optimizer" in doc:
            o = doc["optimizer"]
            opt_state = dict(o, m=[_unpack(b) for b in o["m"]], v=[_unpack(b) for b in o["v"]])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if with_state:
        return model, doc, opt_state
    return model
