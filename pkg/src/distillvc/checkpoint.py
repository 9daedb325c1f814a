"""Checkpoint container: named tensors + shape manifest + schedule + stats + preset.

One archive format for every stage. Model bundles (teacher or student) hold the
noise predictor with both conditioning encoders and the feature normalization
stats, so conversion needs exactly one bundle plus the vocoder file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError
from .features import FeatureConfig, NormStats
from .networks import PRESETS, ContentEncoder, NoisePredictor, SpeakerEncoder, Vocoder
from .schedule import NoiseSchedule, build_cosine_schedule

__all__ = ["CHECKPOINT_VERSION", "Checkpoint", "save_checkpoint", "load_checkpoint", "load_into", "ModelBundle", "save_model_bundle", "load_model_bundle", "save_vocoder", "load_vocoder"]

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]

    def role_state_dict(self, role: str) -> dict[str, torch.Tensor]:
        prefix = role + "/"
        state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if k.startswith(prefix)}
        if not state:
            raise FormatError(f"checkpoint has no tensors for role {role!r}")
        return state


def save_checkpoint(path, modules: dict[str, torch.nn.Module], meta: dict, extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    if "preset" not in meta or "kind" not in meta:
        raise FormatError("checkpoint meta must carry 'preset' and 'kind'")
    arrays: dict[str, np.ndarray] = {}
    for role, module in modules.items():
        for key, tensor in module.state_dict().items():
            arrays[f"{role}/{key}"] = tensor.detach().cpu().numpy()
    for key, arr in (extra_arrays or {}).items():
        arrays[key] = np.asarray(arr)
    meta = dict(meta)
    meta["version"] = CHECKPOINT_VERSION
    meta["shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    if path.suffix != ".npz":
        # np.savez appends .npz; keep the caller's exact path
        path.with_name(path.name + ".npz").replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
            meta = json.loads(bytes(data["__meta__"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {meta.get('version')!r} unsupported (expected {CHECKPOINT_VERSION})")
    shapes = meta.get("shapes", {})
    if set(shapes) != set(arrays):
        raise FormatError("checkpoint tensor names do not match its shape manifest")
    for key, arr in arrays.items():
        if list(arr.shape) != shapes[key]:
            raise FormatError(f"checkpoint tensor {key!r} has shape {list(arr.shape)}, manifest says {shapes[key]}")
    return Checkpoint(meta=meta, arrays=arrays)


def load_into(ckpt: Checkpoint, role: str, module: torch.nn.Module) -> torch.nn.Module:
    state = ckpt.role_state_dict(role)
    own = module.state_dict()
    if set(state) != set(own):
        missing = sorted(set(own) - set(state))[:3]
        surplus = sorted(set(state) - set(own))[:3]
        raise FormatError(f"state mismatch for role {role!r}: missing {missing}, surplus {surplus}")
    for key, tensor in state.items():
        if tensor.shape != own[key].shape:
            raise FormatError(f"{role}/{key}: checkpoint shape {tuple(tensor.shape)} vs model {tuple(own[key].shape)}")
    module.load_state_dict(state)
    return module


@dataclass
class ModelBundle:
    predictor: NoisePredictor
    speaker: SpeakerEncoder
    content: ContentEncoder
    stats: NormStats
    schedule: NoiseSchedule
    feature_config: FeatureConfig
    meta: dict


def save_model_bundle(path, kind: str, preset_name: str, predictor, speaker, content, stats: NormStats, cfg, meta_extra: dict | None = None) -> None:
    meta = {
        "kind": kind,
        "preset": preset_name,
        "schedule.T": cfg["schedule.T"],
        "schedule.offset": cfg["schedule.offset"],
        "features.sample_rate": cfg["features.sample_rate"],
        "features.fft_size": cfg["features.fft_size"],
        "features.hop": cfg["features.hop"],
        "features.win": cfg["features.win"],
        "features.n_mels": cfg["features.n_mels"],
        "features.log_floor": cfg["features.log_floor"],
    }
    meta.update(meta_extra or {})
    save_checkpoint(
        path,
        {"predictor": predictor, "speaker": speaker, "content": content},
        meta,
        extra_arrays={"stats/mean": stats.mean, "stats/std": stats.std},
    )


def load_model_bundle(path) -> ModelBundle:
    ckpt = load_checkpoint(path)
    preset_name = ckpt.meta["preset"]
    if preset_name not in PRESETS:
        raise FormatError(f"checkpoint preset {preset_name!r} unknown")
    preset = PRESETS[preset_name]
    fcfg = FeatureConfig(
        sample_rate=ckpt.meta["features.sample_rate"],
        fft_size=ckpt.meta["features.fft_size"],
        hop=ckpt.meta["features.hop"],
        win=ckpt.meta["features.win"],
        n_mels=ckpt.meta["features.n_mels"],
        log_floor=ckpt.meta["features.log_floor"],
    )
    bundle = ModelBundle(
        predictor=load_into(ckpt, "predictor", NoisePredictor(preset, fcfg.n_mels)),
        speaker=load_into(ckpt, "speaker", SpeakerEncoder(preset, fcfg.n_mels)),
        content=load_into(ckpt, "content", ContentEncoder(preset, fcfg.n_mels)),
        stats=NormStats(mean=ckpt.arrays["stats/mean"], std=ckpt.arrays["stats/std"]),
        schedule=build_cosine_schedule(ckpt.meta["schedule.T"], ckpt.meta["schedule.offset"]),
        feature_config=fcfg,
        meta=ckpt.meta,
    )
    for module in (bundle.predictor, bundle.speaker, bundle.content):
        module.eval()
    return bundle


def save_vocoder(path, preset_name: str, vocoder: Vocoder, cfg, meta_extra: dict | None = None) -> None:
    meta = {"kind": "vocoder", "preset": preset_name, "features.n_mels": cfg["features.n_mels"]}
    meta.update(meta_extra or {})
    save_checkpoint(path, {"vocoder": vocoder}, meta)


def load_vocoder(path) -> tuple[Vocoder, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "vocoder":
        raise FormatError(f"expected a vocoder checkpoint, got kind {ckpt.meta.get('kind')!r}")
    preset = PRESETS[ckpt.meta["preset"]]
    vocoder = load_into(ckpt, "vocoder", Vocoder(preset, ckpt.meta["features.n_mels"]))
    vocoder.eval()
    return vocoder, ckpt.meta
