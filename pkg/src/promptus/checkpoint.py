"""Self-describing checkpoint archives."""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from promptus.model import ModelConfig, PromptedUSNet
from promptus.prompts import FAMILIES

FORMAT = "promptus-checkpoint/1"


def vocabulary() -> dict[str, list[str]]:
    return {family.__name__.lower(): [member.value for member in family] for family in FAMILIES}


def state_digest(model_or_state) -> str:
    """sha256 over parameter names, dtypes, shapes and raw bytes, in sorted name order."""
    state = model_or_state.state_dict() if isinstance(model_or_state, torch.nn.Module) else model_or_state
    hasher = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        hasher.update(name.encode())
        hasher.update(str(tensor.dtype).encode())
        hasher.update(str(tuple(tensor.shape)).encode())
        hasher.update(tensor.numpy().tobytes())
    return hasher.hexdigest()


def save_checkpoint(model: PromptedUSNet, path: str | Path, provenance: dict | None = None, **extra) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {key: value.detach().cpu().clone() for key, value in model.state_dict().items()}
    archive = {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "state_dict": state,
        "vocabulary": vocabulary(),
        "digest": state_digest(state),
        "provenance": dict(provenance or {}),
        **extra,
    }
    torch.save(archive, path)
    return archive["digest"]


def read_archive(path: str | Path) -> dict:
    archive = torch.load(path, map_location="cpu", weights_only=False)
    if archive.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} archive")
    if archive["vocabulary"] != vocabulary():
        raise ValueError(f"{path}: prompt vocabulary differs from this build")
    return archive


def load_checkpoint(path: str | Path) -> tuple[PromptedUSNet, dict]:
    archive = read_archive(path)
    cfg = ModelConfig.from_dict(archive["config"])
    model = PromptedUSNet(cfg)
    model.load_state_dict(archive["state_dict"])
    return model, archive
