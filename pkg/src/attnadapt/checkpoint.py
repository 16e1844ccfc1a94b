"""Model checkpointing as npz archives.

Layout: every parameter and buffer is stored as its own array under a
namespaced key, `backbone/<name>` for everything outside the classifier
head and `head/<name>` for the head itself.  Two metadata entries ride
along: `format_version` (string) and `block_spec` (JSON string) so a
checkpoint is self-describing and can be rebuilt without outside state.
"""

import json

import numpy as np
import torch

from .backbone import AttentionFusionBackbone, BlockSpec
from .errors import ConfigurationError

FORMAT_VERSION = "attnadapt-checkpoint-1"


def _split_state(model: AttentionFusionBackbone) -> dict[str, np.ndarray]:
    arrays = {}
    for name, tensor in model.state_dict().items():
        if name.startswith("head."):
            key = "head/" + name[len("head."):]
        else:
            key = "backbone/" + name
        arrays[key] = tensor.detach().cpu().numpy()
    return arrays


def save_checkpoint(path, model: AttentionFusionBackbone) -> None:
    arrays = _split_state(model)
    arrays["format_version"] = np.array(FORMAT_VERSION)
    arrays["block_spec"] = np.array(json.dumps(model.spec.to_metadata()))
    np.savez(path, **arrays)


def load_checkpoint(path) -> AttentionFusionBackbone:
    with np.load(path, allow_pickle=False) as archive:
        keys = set(archive.files)
        if "format_version" not in keys or "block_spec" not in keys:
            raise ConfigurationError(f"{path} is not a model checkpoint")
        version = str(archive["format_version"])
        if version != FORMAT_VERSION:
            raise ConfigurationError(
                f"unsupported checkpoint version {version!r}, "
                f"expected {FORMAT_VERSION!r}")
        spec = BlockSpec.from_metadata(json.loads(str(archive["block_spec"])))
        model = AttentionFusionBackbone(spec)
        state = {}
        for key in archive.files:
            if key in ("format_version", "block_spec"):
                continue
            if key.startswith("head/"):
                name = "head." + key[len("head/"):]
            elif key.startswith("backbone/"):
                name = key[len("backbone/"):]
            else:
                raise ConfigurationError(f"unrecognized checkpoint key {key!r}")
            state[name] = torch.from_numpy(archive[key])
        missing, unexpected = model.load_state_dict(state, strict=False)
        # num_batches_tracked and friends must line up exactly; anything
        # missing means the archive does not match the declared spec.
        if missing or unexpected:
            raise ConfigurationError(
                f"checkpoint does not match architecture: missing={missing}, "
                f"unexpected={unexpected}")
    return model
