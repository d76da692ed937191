"""
Per-task checkpoints.

A checkpoint is a JSON document (format version 1, see
docs/CHECKPOINT_FORMAT.md) holding the validated run config, every parameter
array and every task record. The world itself is not stored: it is rebuilt
from the echoed config, which makes it bit-identical to the training world.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from modules.utils import load_json, save_json

from .config import config_from_dict
from .engine import EngineState, TaskRecord, grow_registries
from .errors import DataError
from .world import CategoryPrototype, World, generate_world

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _array_to_json(array) -> dict:
    array = np.asarray(array, dtype=np.float64)
    return {"shape": list(array.shape), "data": [float(v) for v in array.ravel()]}


def _array_from_json(doc: dict) -> np.ndarray:
    try:
        return np.array(doc["data"], dtype=np.float64).reshape(doc["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed array in checkpoint: {exc}") from None


def checkpoint_document(state: EngineState) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "completed_task": state.records[-1].task_index if state.records else None,
        "config": state.config.model_dump(mode="json"),
        "category_ids": list(state.registry.category_ids),
        "parameters": {name: _array_to_json(value) for name, value in sorted(state.params().items())},
        "records": [
            {
                "task_index": r.task_index,
                "forget_category_ids": list(r.forget_category_ids),
                "prototypes": {cid: {"image": _array_to_json(p.image), "text": _array_to_json(p.text)}
                               for cid, p in r.prototypes.items()},
                "avg_refined_img": _array_to_json(r.avg_refined_img),
                "avg_refined_txt": _array_to_json(r.avg_refined_txt),
                "recorded_router_output": _array_to_json(r.recorded_router_output),
            }
            for r in state.records
        ],
    }


def save_checkpoint(state: EngineState, path) -> str:
    path = save_json(checkpoint_document(state), path)
    logger.info(f"Checkpoint written to {path}")
    return path


@dataclass
class LoadedCheckpoint:
    state: EngineState
    world: World
    completed_task: Optional[int]


def load_checkpoint(path, world: Optional[World] = None) -> LoadedCheckpoint:
    """Rebuild the engine state (and, unless given, the world) from a checkpoint file."""
    doc = load_json(path)
    version = doc.get("format_version") if isinstance(doc, dict) else None
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version {version} in {path}")
    config = config_from_dict(doc["config"])
    world = world or generate_world(config.world)
    state = EngineState.initialise(config, world)

    completed = doc.get("completed_task")
    if completed is not None:
        for task in world.tasks[: completed + 1]:
            grow_registries(state, world, task)
    if list(state.registry.category_ids) != list(doc.get("category_ids", [])):
        raise DataError(f"checkpoint {path} does not match the world rebuilt from its config")

    params = {name: _array_from_json(value) for name, value in doc.get("parameters", {}).items()}
    current = state.params()
    for name, value in params.items():
        if name in current and np.shape(current[name]) != value.shape:
            raise DataError(f"checkpoint parameter '{name}' has shape {value.shape}, expected {np.shape(current[name])}")
    state.load_params(params)
    for rec in doc.get("records", []):
        state.records.append(TaskRecord(
            task_index=int(rec["task_index"]),
            forget_category_ids=tuple(rec["forget_category_ids"]),
            prototypes={cid: CategoryPrototype(image=_array_from_json(p["image"]), text=_array_from_json(p["text"]))
                        for cid, p in rec["prototypes"].items()},
            avg_refined_img=_array_from_json(rec["avg_refined_img"]),
            avg_refined_txt=_array_from_json(rec["avg_refined_txt"]),
            recorded_router_output=_array_from_json(rec["recorded_router_output"]),
        ))
    logger.info(f"Loaded checkpoint {path} (completed task {completed})")
    return LoadedCheckpoint(state=state, world=world, completed_task=completed)
